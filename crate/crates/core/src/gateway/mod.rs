//! Chat-completion access for the Navigator and Driver.
//!
//! A [`ChatBackend`] performs a single exchange (HTTP or a mock); the
//! [`Gateway`] wraps one with retries, exponential backoff and a global bound
//! on in-flight requests. [`Navigator`] and [`Driver`] build prompts from
//! clips and interpret the completions.

mod cache;
mod http;
pub mod mock;

use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kinematics::{self, ControlSequence, KinematicState, Trajectory, DEFAULT_KAPPA_MAX};
use crate::prompting::{
    parse_actions, parse_reasoning, parse_waypoints, AblationFlags, ChatMessage, OutputMode,
    ParseError, PromptError, PromptTemplates, ReasoningOutput,
};
use crate::scene_log::Clip;

pub use cache::{cache_key, ReasonCache, ReasonCacheEntry};
pub use http::{HttpBackend, HttpConfig};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("gave up after {attempts} attempts (last status {}): {message}", last_status.map_or("none".to_string(), |s| s.to_string()))]
    ExhaustedRetries {
        attempts: u32,
        last_status: Option<u16>,
        message: String,
    },
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("image unreadable: {}", .0.display())]
    ImageUnreadable(PathBuf),
    #[error("endpoint rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("no recorded response for request {0}")]
    UnknownRequest(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cache entry {0} is corrupt")]
    CacheCorrupt(String),
    #[error("cache io at {}: {source}", path.display())]
    CacheIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

pub type Result<T, E = GatewayError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub num_candidates: usize,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<()> {
        if self.num_candidates == 0 {
            return Err(GatewayError::InvalidRequest("num_candidates must be >= 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        Ok(())
    }

    /// Stable content hash of the whole request.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn add(&mut self, other: Usage) {
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub texts: Vec<String>,
    pub usage: Usage,
    pub latency_ms: u64,
    /// Attempts made, including the successful one.
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BackendReply {
    pub texts: Vec<String>,
    pub usage: Usage,
}

/// Outcome of one failed exchange.
#[derive(Debug)]
pub enum BackendError {
    /// Timeouts, connection failures, 429 and 5xx: worth retrying.
    Transient { status: Option<u16>, message: String },
    Fatal(GatewayError),
}

/// A single request/response exchange with a chat-completion service.
pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, BackendError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, BackendError> {
        (**self).send(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            initial_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(10),
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1` (attempts are 1-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = self.multiplier.powi(attempt.saturating_sub(1) as i32);
        self.initial_backoff.mul_f64(factor).min(self.max_backoff)
    }
}

/// Counting semaphore bounding concurrent exchanges.
struct InFlightLimit {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlightLimit);

impl InFlightLimit {
    fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            current: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.current.lock().expect("limiter poisoned");
        while *n >= self.max {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.current.lock().expect("limiter poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

/// Retrying, concurrency-bounded front for a backend. Shareable across
/// threads.
pub struct Gateway {
    backend: Box<dyn ChatBackend>,
    retry: RetryPolicy,
    limit: InFlightLimit,
}

impl Gateway {
    pub fn new(backend: impl ChatBackend + 'static, retry: RetryPolicy, max_in_flight: usize) -> Self {
        Self {
            backend: Box::new(backend),
            retry,
            limit: InFlightLimit::new(max_in_flight),
        }
    }

    /// Returns exactly `request.num_candidates` completions.
    pub fn complete(&self, request: &ChatRequest) -> Result<CandidateSet> {
        request.validate()?;
        let started = Instant::now();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let outcome = {
                let _permit = self.limit.acquire();
                self.backend.send(request)
            };
            match outcome {
                Ok(reply) => {
                    if reply.texts.len() != request.num_candidates {
                        return Err(GatewayError::InvalidResponse(format!(
                            "expected {} candidates, got {}",
                            request.num_candidates,
                            reply.texts.len()
                        )));
                    }
                    return Ok(CandidateSet {
                        texts: reply.texts,
                        usage: reply.usage,
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempts: attempt,
                    });
                }
                Err(BackendError::Fatal(e)) => return Err(e),
                Err(BackendError::Transient { status, message }) => {
                    if attempt >= self.retry.max_attempts {
                        return Err(GatewayError::ExhaustedRetries {
                            attempts: attempt,
                            last_status: status,
                            message,
                        });
                    }
                    let delay = self.retry.backoff(attempt);
                    log::debug!("transient failure ({message}); retry {attempt} in {delay:?}");
                    std::thread::sleep(delay);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sampling {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Sampling {
    pub fn navigator_default() -> Self {
        Self {
            model_id: "navigator".into(),
            temperature: 0.2,
            max_tokens: 1024,
            seed: None,
        }
    }

    pub fn driver_default() -> Self {
        Self {
            model_id: "driver".into(),
            temperature: 0.8,
            max_tokens: 512,
            seed: None,
        }
    }

    fn request(&self, messages: Vec<ChatMessage>, num_candidates: usize) -> ChatRequest {
        ChatRequest {
            model_id: self.model_id.clone(),
            messages,
            temperature: self.temperature,
            num_candidates,
            max_tokens: self.max_tokens,
            seed: self.seed,
        }
    }
}

/// Generates and caches reasoning for clips.
pub struct Navigator {
    pub gateway: Arc<Gateway>,
    pub sampling: Sampling,
    pub cache: ReasonCache,
    pub templates: PromptTemplates,
}

impl Navigator {
    pub fn new(gateway: Arc<Gateway>, sampling: Sampling, cache: ReasonCache) -> Self {
        Self {
            gateway,
            sampling,
            cache,
            templates: PromptTemplates::builtin().clone(),
        }
    }

    pub fn cache_key(&self, clip: &Clip) -> Result<String> {
        let bundle = self.templates.build_navigator_prompt(clip)?;
        let ego = self.templates.format_ego_state(&clip.ego_state, &clip.history)?;
        cache_key(&self.sampling.model_id, &bundle, &ego)
    }

    /// Cached reasoning for `clip`, if any. Never calls the backend.
    pub fn cached_reasoning(&self, clip: &Clip) -> Result<Option<ReasoningOutput>> {
        Ok(self.cache.get(&self.cache_key(clip)?)?.map(|e| e.reasoning))
    }

    /// Cached reasoning for `clip`, generated with one Navigator call on a
    /// miss. Concurrent callers for the same content share one call.
    pub fn get_or_generate_reasoning(&self, clip: &Clip) -> Result<ReasoningOutput> {
        let bundle = self.templates.build_navigator_prompt(clip)?;
        let ego = self.templates.format_ego_state(&clip.ego_state, &clip.history)?;
        let key = cache_key(&self.sampling.model_id, &bundle, &ego)?;

        let lock = self.cache.key_lock(&key);
        let _guard = lock.lock().expect("cache key lock poisoned");
        match self.cache.get(&key) {
            Ok(Some(entry)) => return Ok(entry.reasoning),
            Ok(None) => {}
            Err(GatewayError::CacheCorrupt(_)) => {
                let moved = self.cache.quarantine(&key)?;
                log::warn!("cache entry {key} corrupt; moved to {} and regenerating", moved.display());
            }
            Err(e) => return Err(e),
        }

        let request = self.sampling.request(bundle.to_messages(), 1);
        let set = self.gateway.complete(&request)?;
        let reasoning = parse_reasoning(&set.texts[0]);
        if reasoning.degraded {
            log::warn!("clip {}: navigator answer lacks section labels", clip.clip_id);
        }
        self.cache.put(&ReasonCacheEntry::new(key, &self.sampling.model_id, reasoning.clone()))?;
        Ok(reasoning)
    }

    /// Reasoning for every clip, in order, using `workers` threads
    /// (0 = available parallelism).
    pub fn reason_all(&self, clips: &[Clip], workers: usize) -> Result<Vec<Result<ReasoningOutput>>> {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| GatewayError::InvalidRequest(format!("worker pool: {e}")))?;
        Ok(pool.install(|| clips.par_iter().map(|c| self.get_or_generate_reasoning(c)).collect()))
    }
}

/// One Driver completion and what it decoded to.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub text: String,
    /// Decoded controls (action mode only).
    pub controls: Option<ControlSequence>,
    pub trajectory: std::result::Result<Trajectory, ParseError>,
}

impl Candidate {
    pub fn is_valid(&self) -> bool {
        self.trajectory.is_ok()
    }
}

/// Requests and decodes Driver candidates.
pub struct Driver {
    pub gateway: Arc<Gateway>,
    pub sampling: Sampling,
    pub templates: PromptTemplates,
    pub kappa_max: f64,
}

impl Driver {
    pub fn new(gateway: Arc<Gateway>, sampling: Sampling) -> Self {
        Self {
            gateway,
            sampling,
            templates: PromptTemplates::builtin().clone(),
            kappa_max: DEFAULT_KAPPA_MAX,
        }
    }

    /// Returns exactly `k` candidates; undecodable ones carry their error.
    pub fn predict_candidates(
        &self,
        clip: &Clip,
        flags: AblationFlags,
        k: usize,
        mode: OutputMode,
    ) -> Result<Vec<Candidate>> {
        let bundle = self.templates.build_driver_prompt(clip, flags, mode)?;
        let set = self.gateway.complete(&self.sampling.request(bundle.to_messages(), k))?;
        Ok(set
            .texts
            .into_iter()
            .map(|text| self.decode(clip, mode, text))
            .collect())
    }

    fn decode(&self, clip: &Clip, mode: OutputMode, text: String) -> Candidate {
        let horizon = clip.future.len();
        let dt = clip.future.dt;
        match mode {
            OutputMode::Waypoint => Candidate {
                trajectory: parse_waypoints(&text, horizon, dt),
                controls: None,
                text,
            },
            OutputMode::Action => match parse_actions(&text, horizon, dt, self.kappa_max) {
                Ok(controls) => {
                    let init = KinematicState::at_origin(clip.ego_state.speed.max(0.0));
                    // Finite but absurd accelerations can still overflow.
                    let trajectory = kinematics::rollout(&controls, &init).map_err(|_| {
                        let (index, worst) = controls
                            .steps
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.accel.abs().total_cmp(&b.1.accel.abs()))
                            .map(|(i, c)| (i, c.accel))
                            .unwrap_or((0, f64::NAN));
                        ParseError::OutOfRange {
                            index,
                            value: worst.to_string(),
                            limit: "finite rollout".into(),
                        }
                    });
                    Candidate {
                        controls: trajectory.is_ok().then_some(controls),
                        trajectory,
                        text,
                    }
                }
                Err(e) => Candidate {
                    trajectory: Err(e),
                    controls: None,
                    text,
                },
            },
        }
    }
}
