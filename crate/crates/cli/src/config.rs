//! Run configuration: one TOML file, `${VAR}` interpolation in string values,
//! unknown keys rejected, relative paths resolved against the file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use navidrive::action_fit::FitOptions;
use navidrive::gateway::{HttpConfig, RetryPolicy, Sampling};
use navidrive::kinematics::DEFAULT_KAPPA_MAX;
use navidrive::scene_log::{ClipWindow, CommandThresholds};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub navigator: EndpointConfig,
    pub driver: EndpointConfig,
    pub gateway: GatewayConfig,
    pub dataset: DatasetConfig,
    pub fitting: FittingConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            navigator: EndpointConfig::from_sampling(Sampling::navigator_default(), "NAVIGATOR_API_KEY"),
            driver: EndpointConfig::from_sampling(Sampling::driver_default(), "DRIVER_API_KEY"),
            gateway: GatewayConfig::default(),
            dataset: DatasetConfig::default(),
            fitting: FittingConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Scene-log files or directories of `*.jsonl` files.
    pub scene_logs: Vec<PathBuf>,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            scene_logs: Vec::new(),
            cache_dir: PathBuf::from("out/reason-cache"),
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    /// Base URL of a chat-completions service; unset means no endpoint.
    #[serde(default)]
    pub url: Option<String>,
    pub model_id: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

impl EndpointConfig {
    fn from_sampling(s: Sampling, key_env: &str) -> Self {
        Self {
            url: None,
            model_id: s.model_id,
            api_key_env: Some(key_env.to_string()),
            temperature: s.temperature,
            max_tokens: s.max_tokens,
            seed: s.seed,
            timeout_secs: default_timeout(),
        }
    }

    pub fn sampling(&self) -> Sampling {
        Sampling {
            model_id: self.model_id.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            seed: self.seed,
        }
    }

    pub fn http(&self) -> Option<HttpConfig> {
        self.url.as_ref().map(|url| HttpConfig {
            url: url.clone(),
            api_key_env: self.api_key_env.clone(),
            timeout_secs: self.timeout_secs,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatewayConfig {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        let r = RetryPolicy::default();
        Self {
            max_attempts: r.max_attempts,
            initial_backoff_ms: r.initial_backoff.as_millis() as u64,
            max_backoff_ms: r.max_backoff.as_millis() as u64,
            max_in_flight: 8,
        }
    }
}

impl GatewayConfig {
    pub fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.max_attempts,
            initial_backoff: Duration::from_millis(self.initial_backoff_ms),
            max_backoff: Duration::from_millis(self.max_backoff_ms),
            multiplier: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub window: ClipWindow,
    pub thresholds: CommandThresholds,
    pub split_file: Option<PathBuf>,
    /// Keep only scenes of this split (requires `split_file`).
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FittingConfig {
    pub lambda: f64,
    pub refine: bool,
    pub kappa_max: f64,
}

impl Default for FittingConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            refine: true,
            kappa_max: DEFAULT_KAPPA_MAX,
        }
    }
}

impl FittingConfig {
    pub fn options(&self) -> FitOptions {
        FitOptions {
            lambda: self.lambda,
            refine: self.refine,
            kappa_max: self.kappa_max,
            ..FitOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Driver inputs, e.g. `reason,command,images`.
    pub flags: String,
    pub k: usize,
    pub mode: String,
    pub include_fallback: bool,
    /// Adds the L2(6s) column and averages over all four horizons.
    pub six_second: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            flags: "reason,command,images".into(),
            k: 6,
            mode: "waypoint".into(),
            include_fallback: true,
            six_second: false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {}: {source}", path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {}: {message}", path.display())]
    Invalid { path: PathBuf, message: String },
}

/// Replaces every `${NAME}` with the environment variable's value.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find('}').ok_or_else(|| format!("unterminated '${{' in \"{text}\""))?;
        let name = &after[..end];
        if name.is_empty() {
            return Err(format!("empty variable name in \"{text}\""));
        }
        out.push_str(&lookup(name).ok_or_else(|| format!("environment variable {name} is not set"))?);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn interpolate_value(value: &mut toml::Value, lookup: &impl Fn(&str) -> Option<String>) -> Result<(), String> {
    match value {
        toml::Value::String(s) => *s = interpolate(s, lookup)?,
        toml::Value::Array(items) => {
            for v in items {
                interpolate_value(v, lookup)?;
            }
        }
        toml::Value::Table(table) => {
            for (_, v) in table.iter_mut() {
                interpolate_value(v, lookup)?;
            }
        }
        _ => {}
    }
    Ok(())
}

impl RunConfig {
    /// Parses config text; `base` anchors relative paths.
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self, ConfigError> {
        let invalid = |message: String| ConfigError::Invalid {
            path: origin.to_path_buf(),
            message,
        };
        let mut value: toml::Value = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        interpolate_value(&mut value, &|name| std::env::var(name).ok()).map_err(invalid)?;
        let mut config: RunConfig = value.try_into().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
        config.resolve(base);
        config.validate().map_err(invalid)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base, path)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !base.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        self.paths.scene_logs.iter_mut().for_each(fix);
        fix(&mut self.paths.cache_dir);
        fix(&mut self.paths.output_dir);
        if let Some(p) = self.dataset.split_file.as_mut() {
            fix(p);
        }
    }

    /// Checks value ranges and that referenced inputs exist.
    pub fn validate(&self) -> Result<(), String> {
        for p in &self.paths.scene_logs {
            if !p.exists() {
                return Err(format!("paths.scene_logs: {} does not exist", p.display()));
            }
        }
        for (name, p) in [("paths.cache_dir", &self.paths.cache_dir), ("paths.output_dir", &self.paths.output_dir)] {
            if p.is_file() {
                return Err(format!("{name}: {} is a file", p.display()));
            }
        }
        if let Some(p) = &self.dataset.split_file {
            if !p.is_file() {
                return Err(format!("dataset.split_file: {} does not exist", p.display()));
            }
        }
        if self.dataset.split.is_some() && self.dataset.split_file.is_none() {
            return Err("dataset.split requires dataset.split_file".into());
        }
        let w = &self.dataset.window;
        if w.stride_frames == 0 || w.future_frames == 0 || w.history_frames < 2 {
            return Err("dataset.window: stride and future must be >= 1 and history >= 2".into());
        }
        if !(self.fitting.lambda.is_finite() && self.fitting.lambda >= 0.0) {
            return Err(format!("fitting.lambda must be >= 0, got {}", self.fitting.lambda));
        }
        if !(self.fitting.kappa_max.is_finite() && self.fitting.kappa_max > 0.0) {
            return Err(format!("fitting.kappa_max must be > 0, got {}", self.fitting.kappa_max));
        }
        for (name, e) in [("navigator", &self.navigator), ("driver", &self.driver)] {
            if !(e.temperature.is_finite() && e.temperature >= 0.0) {
                return Err(format!("{name}.temperature must be >= 0, got {}", e.temperature));
            }
        }
        if self.gateway.max_attempts == 0 || self.gateway.max_in_flight == 0 {
            return Err("gateway.max_attempts and gateway.max_in_flight must be >= 1".into());
        }
        if self.eval.k == 0 {
            return Err("eval.k must be >= 1".into());
        }
        navidrive::prompting::AblationFlags::parse_list(&self.eval.flags).map_err(|e| format!("eval.flags: {e}"))?;
        self.eval
            .mode
            .parse::<navidrive::prompting::OutputMode>()
            .map_err(|e| format!("eval.mode: {e}"))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
