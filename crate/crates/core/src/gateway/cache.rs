//! Content-addressed store of Navigator reasoning.
//!
//! Layout: `<root>/<key[0..2]>/<key[2..4]>/<key>.json`, one JSON record per
//! file, written by temp-file-and-rename.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GatewayError, Result};
use crate::io_util::write_atomic;
use crate::prompting::{PromptBundle, ReasoningOutput};

const KEY_SCHEME: &str = "navidrive-reason/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReasonCacheEntry {
    pub key: String,
    pub navigator_model: String,
    /// Unix seconds.
    pub created_at: u64,
    pub reasoning: ReasoningOutput,
}

impl ReasonCacheEntry {
    pub fn new(key: String, navigator_model: &str, reasoning: ReasoningOutput) -> Self {
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            key,
            navigator_model: navigator_model.to_string(),
            created_at,
            reasoning,
        }
    }
}

/// Hash of everything the Navigator sees: model, prompt texts, image
/// contents (by digest, not path) and the ego-state text.
pub fn cache_key(model_id: &str, bundle: &PromptBundle, ego_state_text: &str) -> Result<String> {
    let mut images = Vec::with_capacity(bundle.image_refs.len());
    for r in &bundle.image_refs {
        let bytes = std::fs::read(&r.path).map_err(|_| GatewayError::ImageUnreadable(r.path.clone()))?;
        images.push((r.camera.name(), hex::encode(Sha256::digest(&bytes))));
    }
    let material = serde_json::json!([
        KEY_SCHEME,
        model_id,
        bundle.system,
        bundle.user,
        images,
        ego_state_text,
    ]);
    Ok(hex::encode(Sha256::digest(material.to_string().as_bytes())))
}

pub struct ReasonCache {
    root: PathBuf,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl ReasonCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            key_locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_path(&self, key: &str) -> PathBuf {
        let (a, b) = (&key[..2.min(key.len())], &key[2.min(key.len())..4.min(key.len())]);
        self.root.join(a).join(b).join(format!("{key}.json"))
    }

    /// Per-key mutex serializing generation within this process.
    pub(crate) fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        self.key_locks
            .lock()
            .expect("key lock table poisoned")
            .entry(key.to_string())
            .or_default()
            .clone()
    }

    pub fn get(&self, key: &str) -> Result<Option<ReasonCacheEntry>> {
        let path = self.entry_path(key);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(source) => return Err(GatewayError::CacheIo { path, source }),
        };
        match serde_json::from_slice::<ReasonCacheEntry>(&bytes) {
            Ok(entry) if entry.key == key => Ok(Some(entry)),
            _ => Err(GatewayError::CacheCorrupt(key.to_string())),
        }
    }

    pub fn put(&self, entry: &ReasonCacheEntry) -> Result<()> {
        let path = self.entry_path(&entry.key);
        let io = |source| GatewayError::CacheIo {
            path: path.clone(),
            source,
        };
        std::fs::create_dir_all(path.parent().expect("entry has a parent")).map_err(io)?;
        write_atomic(&path, |w| {
            serde_json::to_writer_pretty(&mut *w, entry).map_err(std::io::Error::other)?;
            w.write_all(b"\n")
        })
        .map_err(io)
    }

    /// Moves an unreadable entry aside as `<key>.json.corrupt[.N]`.
    pub fn quarantine(&self, key: &str) -> Result<PathBuf> {
        let path = self.entry_path(key);
        let mut target = path.with_extension("json.corrupt");
        let mut n = 1;
        while target.exists() {
            target = path.with_extension(format!("json.corrupt.{n}"));
            n += 1;
        }
        std::fs::rename(&path, &target).map_err(|source| GatewayError::CacheIo {
            path: path.clone(),
            source,
        })?;
        Ok(target)
    }

    /// Number of entry files currently stored.
    pub fn len(&self) -> usize {
        fn walk(dir: &Path) -> usize {
            let Ok(rd) = std::fs::read_dir(dir) else { return 0 };
            rd.flatten()
                .map(|e| {
                    let p = e.path();
                    if p.is_dir() {
                        walk(&p)
                    } else {
                        usize::from(p.extension().is_some_and(|x| x == "json"))
                    }
                })
                .sum()
        }
        walk(&self.root)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
