//! Open-loop planning metrics: per-step L2, min-of-K selection, the two
//! horizon-averaging protocols, and report emission.
//!
//! Point-wise protocol: L2@t is the error at the point t seconds ahead and
//! Avg is the mean of the listed horizons. Cumulative protocol: L2@t is the
//! mean error over every point up to t seconds, so Avg(3s) equals L2@3s.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Driver, Navigator};
use crate::io_util::write_atomic;
use crate::kinematics::{self, ControlSequence, KinematicState, Trajectory};
use crate::prompting::{AblationFlags, OutputMode};
use crate::scene_log::{Clip, FUTURE_POINTS};

/// Reported horizons in seconds.
pub const HORIZONS: [usize; 4] = [1, 2, 3, 6];
const STEPS_PER_SECOND: usize = 2;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no valid candidate")]
    NoValidCandidate,
    #[error("cannot write {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("worker pool: {0}")]
    Pool(String),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Euclidean distance between `pred` and `gt` at every step.
pub fn l2_profile(pred: &Trajectory, gt: &Trajectory) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(EvalError::InvalidInput(format!(
            "prediction has {} points, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if (pred.dt - gt.dt).abs() > 1e-9 {
        return Err(EvalError::InvalidInput(format!("dt {} vs {}", pred.dt, gt.dt)));
    }
    Ok(pred.points.iter().zip(&gt.points).map(|(p, g)| p.distance(g)).collect())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub profile: Vec<f64>,
    /// Mean of `profile`, the selection criterion.
    pub mean_l2: f64,
}

/// Picks the candidate with the smallest mean L2 over the full horizon;
/// the lowest index wins ties.
pub fn select_candidate(candidates: &[&Trajectory], gt: &Trajectory) -> Result<Selection> {
    let mut best: Option<Selection> = None;
    for (index, c) in candidates.iter().enumerate() {
        let profile = l2_profile(c, gt)?;
        let mean_l2 = mean(&profile);
        if best.as_ref().is_none_or(|b| mean_l2 < b.mean_l2) {
            best = Some(Selection {
                index,
                profile,
                mean_l2,
            });
        }
    }
    best.ok_or(EvalError::NoValidCandidate)
}

/// L2 at 1, 2, 3 and 6 s plus the two averages, under one protocol.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub l2_1s: f64,
    pub l2_2s: f64,
    pub l2_3s: f64,
    pub l2_6s: f64,
    pub avg_3s: f64,
    pub avg_6s: f64,
}

impl HorizonMetrics {
    fn from_horizons(at: [f64; 4], avg_3s: f64, avg_6s: f64) -> Self {
        Self {
            l2_1s: at[0],
            l2_2s: at[1],
            l2_3s: at[2],
            l2_6s: at[3],
            avg_3s,
            avg_6s,
        }
    }

    fn values(&self) -> [f64; 6] {
        [self.l2_1s, self.l2_2s, self.l2_3s, self.l2_6s, self.avg_3s, self.avg_6s]
    }

    fn from_values(v: [f64; 6]) -> Self {
        Self {
            l2_1s: v[0],
            l2_2s: v[1],
            l2_3s: v[2],
            l2_6s: v[3],
            avg_3s: v[4],
            avg_6s: v[5],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ProtocolMetrics {
    pub pointwise: HorizonMetrics,
    pub cumulative: HorizonMetrics,
}

/// Both protocols from a 12-step profile sampled at 2 Hz.
pub fn aggregate(profile: &[f64]) -> Result<ProtocolMetrics> {
    if profile.len() != FUTURE_POINTS {
        return Err(EvalError::InvalidInput(format!(
            "profile has {} entries, expected {FUTURE_POINTS}",
            profile.len()
        )));
    }
    let steps = HORIZONS.map(|s| s * STEPS_PER_SECOND);
    let at = steps.map(|n| profile[n - 1]);
    let upto = steps.map(|n| mean(&profile[..n]));
    Ok(ProtocolMetrics {
        pointwise: HorizonMetrics::from_horizons(at, mean(&at[..3]), mean(&at)),
        cumulative: HorizonMetrics::from_horizons(upto, upto[2], upto[3]),
    })
}

/// Per-clip outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub clip_id: String,
    /// Index among the K candidates; `None` when the fallback was used.
    pub selected_candidate: Option<usize>,
    pub valid_candidates: usize,
    pub metrics: ProtocolMetrics,
    /// No usable candidate; metrics come from the constant-velocity rollout.
    pub parse_failure: bool,
    /// Gateway or prompt error that caused the failure, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub flags: AblationFlags,
    pub k: usize,
    pub mode: OutputMode,
    pub driver_model: String,
    pub navigator_model: Option<String>,
    /// Whether fallback rows enter the aggregates.
    pub include_fallback: bool,
}

impl EvalConfig {
    /// Row label used in tables.
    pub fn label(&self) -> String {
        format!("{} [{}] {}", self.driver_model, self.flags.label(), self.mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub rows: Vec<MetricsRow>,
    /// Means over the aggregated rows; `None` if there are none.
    pub aggregates: Option<ProtocolMetrics>,
    /// Rows that entered the aggregates.
    pub aggregated_clips: usize,
    pub failure_count: usize,
}

impl EvalReport {
    pub fn new(config: EvalConfig, rows: Vec<MetricsRow>) -> Self {
        let used: Vec<&MetricsRow> = rows
            .iter()
            .filter(|r| config.include_fallback || !r.parse_failure)
            .collect();
        let aggregates = (!used.is_empty()).then(|| {
            let avg = |pick: fn(&ProtocolMetrics) -> &HorizonMetrics| {
                let mut sum = [0.0; 6];
                for r in &used {
                    for (s, v) in sum.iter_mut().zip(pick(&r.metrics).values()) {
                        *s += v;
                    }
                }
                HorizonMetrics::from_values(sum.map(|s| s / used.len() as f64))
            };
            ProtocolMetrics {
                pointwise: avg(|m| &m.pointwise),
                cumulative: avg(|m| &m.cumulative),
            }
        });
        let aggregated_clips = used.len();
        let failure_count = rows.iter().filter(|r| r.parse_failure).count();
        Self {
            config,
            rows,
            aggregates,
            aggregated_clips,
            failure_count,
        }
    }
}

/// Current speed held, zero curvature.
pub fn constant_velocity(clip: &Clip) -> Trajectory {
    let controls = ControlSequence::zeros(clip.future.len(), clip.future.dt);
    kinematics::rollout(&controls, &KinematicState::at_origin(clip.ego_state.speed.max(0.0)))
        .expect("zero controls from a valid state roll out")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub flags: AblationFlags,
    pub k: usize,
    pub mode: OutputMode,
    pub include_fallback: bool,
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            flags: AblationFlags::ALL,
            k: 6,
            mode: OutputMode::Waypoint,
            include_fallback: true,
            workers: 0,
        }
    }
}

fn evaluate_clip(clip: &Clip, driver: &Driver, navigator: Option<&Navigator>, options: &EvalOptions) -> Result<MetricsRow> {
    let mut prepared;
    let mut input = clip;
    let mut failure = None;
    if options.flags.reason && clip.reasoning.is_none() {
        match navigator.map(|n| n.get_or_generate_reasoning(clip)) {
            Some(Ok(r)) => {
                prepared = clip.clone();
                prepared.reasoning = Some(r);
                input = &prepared;
            }
            Some(Err(e)) => failure = Some(format!("navigator: {e}")),
            None => failure = Some("no reasoning and no navigator configured".to_string()),
        }
    }

    let mut selected = None;
    let mut valid = 0;
    if failure.is_none() {
        match driver.predict_candidates(input, options.flags, options.k, options.mode) {
            Ok(candidates) => {
                let trajectories: Vec<(usize, &Trajectory)> = candidates
                    .iter()
                    .enumerate()
                    .filter_map(|(i, c)| c.trajectory.as_ref().ok().filter(|t| t.len() == clip.future.len()).map(|t| (i, t)))
                    .collect();
                valid = trajectories.len();
                let refs: Vec<&Trajectory> = trajectories.iter().map(|(_, t)| *t).collect();
                match select_candidate(&refs, &clip.future) {
                    Ok(sel) => selected = Some((trajectories[sel.index].0, sel.profile)),
                    Err(EvalError::NoValidCandidate) => {}
                    Err(e) => return Err(e),
                }
            }
            Err(e) => failure = Some(format!("driver: {e}")),
        }
    }

    let (selected_candidate, profile, parse_failure) = match selected {
        Some((index, profile)) => (Some(index), profile, false),
        None => {
            log::warn!(
                "clip {}: {}; using constant-velocity fallback",
                clip.clip_id,
                failure.as_deref().unwrap_or("no valid candidate")
            );
            (None, l2_profile(&constant_velocity(clip), &clip.future)?, true)
        }
    };
    Ok(MetricsRow {
        clip_id: clip.clip_id.clone(),
        selected_candidate,
        valid_candidates: valid,
        metrics: aggregate(&profile)?,
        parse_failure,
        error: failure,
    })
}

/// Evaluates every clip; rows keep manifest order whatever the worker count.
pub fn run_eval(clips: &[Clip], driver: &Driver, navigator: Option<&Navigator>, options: &EvalOptions) -> Result<EvalReport> {
    if options.k == 0 {
        return Err(EvalError::InvalidInput("k must be >= 1".into()));
    }
    if let Some(c) = clips.iter().find(|c| c.future.len() != FUTURE_POINTS) {
        return Err(EvalError::InvalidInput(format!(
            "clip {} has {} future points, expected {FUTURE_POINTS}",
            c.clip_id,
            c.future.len()
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers)
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let rows = pool.install(|| {
        clips
            .par_iter()
            .map(|clip| evaluate_clip(clip, driver, navigator, options))
            .collect::<Result<Vec<_>>>()
    })?;
    let config = EvalConfig {
        flags: options.flags,
        k: options.k,
        mode: options.mode,
        driver_model: driver.sampling.model_id.clone(),
        navigator_model: navigator.filter(|_| options.flags.reason).map(|n| n.sampling.model_id.clone()),
        include_fallback: options.include_fallback,
    };
    Ok(EvalReport::new(config, rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Markdown,
    Csv,
    Jsonl,
}

impl ReportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            Self::Markdown => "md",
            Self::Csv => "csv",
            Self::Jsonl => "jsonl",
        }
    }
}

fn fmt3(v: f64) -> String {
    format!("{v:.3}")
}

/// One table per protocol, one row per report. `six_second` adds the
/// L2(6s) column and averages over all four horizons.
pub fn render_markdown(reports: &[EvalReport], six_second: bool) -> String {
    let mut out = String::new();
    for (title, pick) in [
        ("Point-wise L2 (m)", (|m: &ProtocolMetrics| m.pointwise) as fn(&ProtocolMetrics) -> HorizonMetrics),
        ("Cumulative-mean L2 (m)", |m: &ProtocolMetrics| m.cumulative),
    ] {
        out.push_str(&format!("### {title}\n\n"));
        if six_second {
            out.push_str("| Model/Config | L2(1s) | L2(2s) | L2(3s) | L2(6s) | Avg |\n|---|---|---|---|---|---|\n");
        } else {
            out.push_str("| Model/Config | L2(1s) | L2(2s) | L2(3s) | Avg |\n|---|---|---|---|---|\n");
        }
        for report in reports {
            let cells: Vec<String> = match report.aggregates.as_ref().map(pick) {
                Some(m) if six_second => vec![m.l2_1s, m.l2_2s, m.l2_3s, m.l2_6s, m.avg_6s].into_iter().map(fmt3).collect(),
                Some(m) => vec![m.l2_1s, m.l2_2s, m.l2_3s, m.avg_3s].into_iter().map(fmt3).collect(),
                None => vec!["n/a".to_string(); if six_second { 5 } else { 4 }],
            };
            out.push_str(&format!("| {} | {} |\n", report.config.label(), cells.join(" | ")));
        }
        out.push('\n');
    }
    for report in reports {
        out.push_str(&format!(
            "- {}: {} clips, {} in aggregates, {} parse failures (fallback {}), K = {}\n",
            report.config.label(),
            report.rows.len(),
            report.aggregated_clips,
            report.failure_count,
            if report.config.include_fallback { "included" } else { "excluded" },
            report.config.k,
        ));
    }
    out
}

#[derive(Serialize)]
struct CsvRow<'a> {
    config: String,
    clip_id: &'a str,
    selected_candidate: Option<usize>,
    valid_candidates: usize,
    parse_failure: bool,
    pointwise_l2_1s: String,
    pointwise_l2_2s: String,
    pointwise_l2_3s: String,
    pointwise_l2_6s: String,
    pointwise_avg_3s: String,
    pointwise_avg_6s: String,
    cumulative_l2_1s: String,
    cumulative_l2_2s: String,
    cumulative_l2_3s: String,
    cumulative_l2_6s: String,
    cumulative_avg_3s: String,
    cumulative_avg_6s: String,
    error: &'a str,
}

fn csv_row<'a>(config: &EvalConfig, row: &'a MetricsRow) -> CsvRow<'a> {
    let [p1, p2, p3, p6, pa3, pa6] = row.metrics.pointwise.values().map(fmt3);
    let [c1, c2, c3, c6, ca3, ca6] = row.metrics.cumulative.values().map(fmt3);
    CsvRow {
        config: config.label(),
        clip_id: &row.clip_id,
        selected_candidate: row.selected_candidate,
        valid_candidates: row.valid_candidates,
        parse_failure: row.parse_failure,
        pointwise_l2_1s: p1,
        pointwise_l2_2s: p2,
        pointwise_l2_3s: p3,
        pointwise_l2_6s: p6,
        pointwise_avg_3s: pa3,
        pointwise_avg_6s: pa6,
        cumulative_l2_1s: c1,
        cumulative_l2_2s: c2,
        cumulative_l2_3s: c3,
        cumulative_l2_6s: c6,
        cumulative_avg_3s: ca3,
        cumulative_avg_6s: ca6,
        error: row.error.as_deref().unwrap_or(""),
    }
}

/// Writes `reports` to `path` atomically.
pub fn emit_report(reports: &[EvalReport], format: ReportFormat, six_second: bool, path: &Path) -> Result<()> {
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    write_atomic(path, |w| match format {
        ReportFormat::Markdown => w.write_all(render_markdown(reports, six_second).as_bytes()),
        ReportFormat::Csv => {
            let mut out = csv::Writer::from_writer(w);
            for report in reports {
                for row in &report.rows {
                    out.serialize(csv_row(&report.config, row)).map_err(std::io::Error::other)?;
                }
            }
            out.flush()
        }
        ReportFormat::Jsonl => {
            for report in reports {
                for row in &report.rows {
                    serde_json::to_writer(&mut *w, row).map_err(std::io::Error::other)?;
                    w.write_all(b"\n")?;
                }
            }
            Ok(())
        }
    })
    .map_err(io)
}
