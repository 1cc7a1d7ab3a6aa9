//! Deterministic backends for tests and offline runs.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, BackendReply, ChatBackend, ChatRequest, GatewayError, Usage};
use crate::action_fit::{fit_controls, FitOptions};
use crate::kinematics::{Control, ControlSequence, KinematicState, Point2, Trajectory, DEFAULT_KAPPA_MAX};
use crate::prompting::{find_clip_marker, serialize_actions, serialize_waypoints, OutputMode};
use crate::scene_log::Clip;

fn reply(texts: Vec<String>) -> BackendReply {
    BackendReply {
        texts,
        usage: Usage::default(),
    }
}

/// Returns the same text for every candidate.
pub struct EchoBackend {
    pub text: String,
}

impl EchoBackend {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }
}

impl ChatBackend for EchoBackend {
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, BackendError> {
        Ok(reply(vec![self.text.clone(); request.num_candidates]))
    }
}

/// Backend defined by a closure.
pub struct FnBackend<F>(pub F);

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<BackendReply, BackendError> + Send + Sync,
{
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, BackendError> {
        (self.0)(request)
    }
}

/// Answers Driver requests with the ground truth of the clip named by the
/// prompt's clip marker, optionally perturbed by seeded Gaussian noise.
/// Requests without a marker (Navigator prompts) get a fixed labeled answer.
pub struct ScriptedOracle {
    targets: HashMap<String, Target>,
    mode: OutputMode,
    sigma: f64,
    seed: u64,
    kappa_max: f64,
}

enum Target {
    Waypoints(Trajectory),
    Actions(ControlSequence),
}

impl ScriptedOracle {
    /// In action mode clips without `gt_controls` are fitted here.
    pub fn new(clips: &[Clip], mode: OutputMode, sigma: f64, seed: u64) -> Result<Self, GatewayError> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!("noise sigma must be >= 0, got {sigma}")));
        }
        let mut targets = HashMap::with_capacity(clips.len());
        for clip in clips {
            let target = match mode {
                OutputMode::Waypoint => Target::Waypoints(clip.future.clone()),
                OutputMode::Action => Target::Actions(match &clip.gt_controls {
                    Some(c) => c.clone(),
                    None => {
                        let init = KinematicState::at_origin(clip.ego_state.speed.max(0.0));
                        fit_controls(&clip.future, &init, &FitOptions::default())
                            .map_err(|e| GatewayError::InvalidRequest(format!("clip {}: {e}", clip.clip_id)))?
                            .controls
                    }
                }),
            };
            targets.insert(clip.clip_id.clone(), target);
        }
        Ok(Self {
            targets,
            mode,
            sigma,
            seed,
            kappa_max: DEFAULT_KAPPA_MAX,
        })
    }

    pub fn mode(&self) -> OutputMode {
        self.mode
    }

    fn rng(&self, clip_id: &str, candidate: usize) -> ChaCha8Rng {
        let digest = Sha256::digest(format!("{}\n{clip_id}\n{candidate}", self.seed).as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    /// Text of candidate `index` for `clip_id`.
    pub fn answer(&self, clip_id: &str, index: usize) -> Option<String> {
        let target = self.targets.get(clip_id)?;
        let mut rng = self.rng(clip_id, index);
        let normal = Normal::new(0.0, self.sigma).ok()?;
        let mut noise = || if self.sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        Some(match target {
            Target::Waypoints(t) => {
                let points = t.points.iter().map(|p| Point2::new(p.x + noise(), p.y + noise())).collect();
                serialize_waypoints(&Trajectory {
                    points,
                    dt: t.dt,
                })
            }
            Target::Actions(c) => {
                let steps = c
                    .steps
                    .iter()
                    .map(|s| {
                        let kappa = (s.curvature + noise()).clamp(-self.kappa_max, self.kappa_max);
                        Control::new(s.accel + noise(), kappa)
                    })
                    .collect();
                serialize_actions(&ControlSequence::new(steps, c.dt))
            }
        })
    }
}

const NAVIGATOR_ANSWER: &str = "Scene Description: scripted scene.\n\
Recommended Action: follow the high-level command.\n\
Reasoning: scripted oracle answer.";

impl ChatBackend for ScriptedOracle {
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, BackendError> {
        let marker = request
            .messages
            .iter()
            .map(|m| m.joined_text())
            .find_map(|t| find_clip_marker(&t).map(str::to_string));
        let Some(clip_id) = marker else {
            return Ok(reply(vec![NAVIGATOR_ANSWER.to_string(); request.num_candidates]));
        };
        let texts = (0..request.num_candidates)
            .map(|i| self.answer(&clip_id, i))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| BackendError::Fatal(GatewayError::UnknownRequest(format!("clip {clip_id}"))))?;
        Ok(reply(texts))
    }
}

/// One recorded exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub request_hash: String,
    pub texts: Vec<String>,
}

/// Serves recorded answers keyed by [`ChatRequest::hash`].
pub struct ReplayBackend {
    answers: HashMap<String, Vec<String>>,
}

impl ReplayBackend {
    pub fn new(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        Self {
            answers: entries.into_iter().map(|e| (e.request_hash, e.texts)).collect(),
        }
    }

    /// Reads a JSON-lines transcript; later lines win on duplicate hashes.
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let io = |source| GatewayError::CacheIo {
            path: path.to_path_buf(),
            source,
        };
        let file = File::open(path).map_err(io)?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| {
                GatewayError::InvalidResponse(format!("{} line {}: {e}", path.display(), i + 1))
            })?);
        }
        Ok(Self::new(entries))
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}

impl ChatBackend for ReplayBackend {
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, BackendError> {
        let hash = request.hash();
        match self.answers.get(&hash) {
            Some(texts) => Ok(reply(texts.clone())),
            None => Err(BackendError::Fatal(GatewayError::UnknownRequest(hash))),
        }
    }
}

/// Appends every successful exchange of the inner backend to a transcript
/// that [`ReplayBackend::load`] reads.
pub struct RecordingBackend<B> {
    inner: B,
    path: PathBuf,
    file: Mutex<File>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B, path: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let path = path.into();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| GatewayError::CacheIo {
                path: path.clone(),
                source,
            })?;
        Ok(Self {
            inner,
            path,
            file: Mutex::new(file),
        })
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, BackendError> {
        let out = self.inner.send(request)?;
        let entry = TranscriptEntry {
            request_hash: request.hash(),
            texts: out.texts.clone(),
        };
        let mut line = serde_json::to_string(&entry).expect("transcript entry serializes");
        line.push('\n');
        let mut file = self.file.lock().expect("transcript lock poisoned");
        file.write_all(line.as_bytes()).map_err(|source| {
            BackendError::Fatal(GatewayError::CacheIo {
                path: self.path.clone(),
                source,
            })
        })?;
        Ok(out)
    }
}

/// Counts calls and tracks concurrent occupancy of the inner backend.
pub struct Instrumented<B> {
    inner: B,
    delay: Duration,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl<B> Instrumented<B> {
    pub fn new(inner: B) -> Self {
        Self::with_delay(inner, Duration::ZERO)
    }

    /// Holds every call open for `delay` to make overlap observable.
    pub fn with_delay(inner: B, delay: Duration) -> Self {
        Self {
            inner,
            delay,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Largest number of simultaneous calls seen.
    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

impl<B: ChatBackend> ChatBackend for Instrumented<B> {
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let out = self.inner.send(request);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}

/// Fails with the given transient statuses, in order, then delegates.
pub struct FlakyBackend<B> {
    inner: B,
    failures: Vec<u16>,
    seen: AtomicUsize,
}

impl<B> FlakyBackend<B> {
    pub fn new(inner: B, failures: Vec<u16>) -> Self {
        Self {
            inner,
            failures,
            seen: AtomicUsize::new(0),
        }
    }
}

impl<B: ChatBackend> ChatBackend for FlakyBackend<B> {
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, BackendError> {
        let n = self.seen.fetch_add(1, Ordering::SeqCst);
        match self.failures.get(n) {
            Some(&status) => Err(BackendError::Transient {
                status: Some(status),
                message: format!("scripted failure {}", n + 1),
            }),
            None => self.inner.send(request),
        }
    }
}
