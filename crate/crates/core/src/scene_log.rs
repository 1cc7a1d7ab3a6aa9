//! Scene logs, sliding-window clip extraction, command labels, and the
//! line-delimited files built from clips (eval manifests and SFT corpora).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io_util::write_atomic;
use crate::kinematics::{
    self, normalize_angle, Control, ControlSequence, EgoState, KinematicsError, Point2, Pose2D,
    Trajectory, DEFAULT_DT,
};
use crate::prompting::{
    serialize_actions, serialize_waypoints, AblationFlags, ChatMessage, OutputMode, PromptError,
    PromptTemplates, ReasoningOutput, Role,
};

pub const SCENELOG_VERSION: &str = "scenelog/1";

/// Allowed deviation of inter-frame spacing from the nominal period.
pub const SPACING_TOLERANCE: f64 = 0.05;

pub const HISTORY_POINTS: usize = 5;
pub const FUTURE_POINTS: usize = 12;

/// Clip positions are stored on the waypoint text grid (1 cm), so a
/// prediction that reproduces the ground-truth text scores exactly zero.
pub const POSITION_GRID: f64 = 100.0;

fn snap_to_grid(mut traj: Trajectory) -> Trajectory {
    for p in &mut traj.points {
        // `+ 0.0` folds -0.0 into 0.0.
        p.x = (p.x * POSITION_GRID).round() / POSITION_GRID + 0.0;
        p.y = (p.y * POSITION_GRID).round() / POSITION_GRID + 0.0;
    }
    traj
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("clip {0} has no cached reasoning")]
    MissingReasoning(String),
    #[error("clip {0} has no fitted controls")]
    MissingControls(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

pub type Result<T, E = SceneError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Camera {
    Front,
    FrontLeft,
    FrontRight,
    Back,
    BackLeft,
    BackRight,
}

impl Camera {
    pub const ALL: [Camera; 6] = [
        Camera::Front,
        Camera::FrontLeft,
        Camera::FrontRight,
        Camera::Back,
        Camera::BackLeft,
        Camera::BackRight,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Camera::Front => "FRONT",
            Camera::FrontLeft => "FRONT_LEFT",
            Camera::FrontRight => "FRONT_RIGHT",
            Camera::Back => "BACK",
            Camera::BackLeft => "BACK_LEFT",
            Camera::BackRight => "BACK_RIGHT",
        }
    }
}

/// Camera name → image file. Iteration order is the fixed camera order.
pub type CameraMap = BTreeMap<Camera, PathBuf>;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    pub ego_pose: Pose2D,
    pub camera_images: CameraMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneLog {
    pub scene_id: String,
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Command {
    HardLeft,
    SlightLeft,
    KeepStraight,
    SlightRight,
    HardRight,
    DecelerateStop,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::HardLeft,
        Command::SlightLeft,
        Command::KeepStraight,
        Command::SlightRight,
        Command::HardRight,
        Command::DecelerateStop,
    ];

    /// Human-readable name used in prompts.
    pub fn label(&self) -> &'static str {
        match self {
            Command::HardLeft => "Hard Left",
            Command::SlightLeft => "Slight Left",
            Command::KeepStraight => "Keep Straight",
            Command::SlightRight => "Slight Right",
            Command::HardRight => "Hard Right",
            Command::DecelerateStop => "Decelerate Stop",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommandThresholds {
    /// Final-step speed below which a stop is considered, m/s.
    pub stop_speed: f64,
    /// Final speed must also fall below this fraction of the initial speed.
    pub stop_ratio: f64,
    /// Heading changes below this are straight, degrees.
    pub straight_deg: f64,
    /// Heading changes above this are hard turns, degrees.
    pub hard_deg: f64,
}

impl Default for CommandThresholds {
    fn default() -> Self {
        Self {
            stop_speed: 0.5,
            stop_ratio: 0.5,
            straight_deg: 8.0,
            hard_deg: 30.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipWindow {
    /// Past frames before the current one.
    pub history_frames: usize,
    pub future_frames: usize,
    pub stride_frames: usize,
}

impl Default for ClipWindow {
    fn default() -> Self {
        Self {
            history_frames: HISTORY_POINTS - 1,
            future_frames: FUTURE_POINTS,
            stride_frames: 2,
        }
    }
}

impl ClipWindow {
    pub fn window_frames(&self) -> usize {
        self.history_frames + 1 + self.future_frames
    }
}

/// One extracted sample, expressed in the ego frame of its current frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ManifestRecord", try_from = "ManifestRecord")]
pub struct Clip {
    pub clip_id: String,
    pub scene_id: String,
    /// Past positions, oldest first; the last point is the origin.
    pub history: Trajectory,
    pub future: Trajectory,
    pub ego_state: EgoState,
    pub command: Command,
    pub images: CameraMap,
    pub gt_controls: Option<ControlSequence>,
    pub reasoning: Option<ReasoningOutput>,
}

/// Manifest line layout of a [`Clip`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    clip_id: String,
    scene_id: String,
    dt: f64,
    history: Vec<[f64; 2]>,
    future: Vec<[f64; 2]>,
    ego_state: EgoState,
    command: Command,
    images: CameraMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_controls: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reasoning: Option<ReasoningOutput>,
}

impl From<Clip> for ManifestRecord {
    fn from(c: Clip) -> Self {
        let pairs = |t: &Trajectory| t.points.iter().map(|p| [p.x, p.y]).collect();
        ManifestRecord {
            dt: c.future.dt,
            history: pairs(&c.history),
            future: pairs(&c.future),
            gt_controls: c
                .gt_controls
                .map(|u| u.steps.iter().map(|s| [s.accel, s.curvature]).collect()),
            clip_id: c.clip_id,
            scene_id: c.scene_id,
            ego_state: c.ego_state,
            command: c.command,
            images: c.images,
            reasoning: c.reasoning,
        }
    }
}

impl TryFrom<ManifestRecord> for Clip {
    type Error = String;

    fn try_from(r: ManifestRecord) -> std::result::Result<Self, String> {
        let traj = |v: Vec<[f64; 2]>| {
            Trajectory::new(v.into_iter().map(|[x, y]| Point2::new(x, y)).collect(), r.dt)
                .map_err(|e| e.to_string())
        };
        if r.history.len() != HISTORY_POINTS {
            return Err(format!("history must have {HISTORY_POINTS} points, got {}", r.history.len()));
        }
        if r.future.len() != FUTURE_POINTS {
            return Err(format!("future must have {FUTURE_POINTS} points, got {}", r.future.len()));
        }
        let gt_controls = match r.gt_controls {
            Some(steps) => {
                if steps.len() != FUTURE_POINTS {
                    return Err(format!("gt_controls must have {FUTURE_POINTS} steps"));
                }
                let u = ControlSequence::new(steps.into_iter().map(|[a, k]| Control::new(a, k)).collect(), r.dt);
                u.validate().map_err(|e| e.to_string())?;
                Some(u)
            }
            None => None,
        };
        Ok(Clip {
            history: traj(r.history)?,
            future: traj(r.future)?,
            clip_id: r.clip_id,
            scene_id: r.scene_id,
            ego_state: r.ego_state,
            command: r.command,
            images: r.images,
            gt_controls,
            reasoning: r.reasoning,
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    version: String,
    scene_id: String,
    frames: Vec<FrameRecord>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    timestamp: f64,
    ego_pose: PoseRecord,
    images: BTreeMap<Camera, String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRecord {
    x: f64,
    y: f64,
    heading: f64,
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> SceneError {
    SceneError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

fn validate_scene(record: SceneRecord, base: &Path, line: usize) -> Result<SceneLog> {
    let at = |field: String| format!("line {line}: {field}");
    if record.version != SCENELOG_VERSION {
        return Err(schema(
            at("version".into()),
            format!("expected \"{SCENELOG_VERSION}\", found \"{}\"", record.version),
        ));
    }
    if record.scene_id.trim().is_empty() {
        return Err(schema(at("scene_id".into()), "empty scene id"));
    }
    if record.frames.is_empty() {
        return Err(schema(at("frames".into()), "no frames"));
    }

    let mut frames = Vec::with_capacity(record.frames.len());
    for (i, f) in record.frames.into_iter().enumerate() {
        let field = |name: &str| at(format!("frames[{i}].{name}"));
        if !f.timestamp.is_finite() {
            return Err(schema(field("timestamp"), "non-finite timestamp"));
        }
        for (name, v) in [("x", f.ego_pose.x), ("y", f.ego_pose.y), ("heading", f.ego_pose.heading)] {
            if !v.is_finite() {
                return Err(schema(field(&format!("ego_pose.{name}")), "non-finite value"));
            }
        }
        if !f.images.contains_key(&Camera::Front) {
            return Err(schema(field("images"), "FRONT image reference missing"));
        }
        frames.push(Frame {
            timestamp: f.timestamp,
            ego_pose: Pose2D::new(f.ego_pose.x, f.ego_pose.y, f.ego_pose.heading),
            camera_images: f
                .images
                .into_iter()
                .map(|(cam, rel)| (cam, base.join(rel)))
                .collect(),
        });
    }

    let unordered: Vec<usize> = frames
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1].timestamp <= w[0].timestamp)
        .map(|(i, _)| i + 1)
        .collect();
    if !unordered.is_empty() {
        return Err(schema(
            at("frames".into()),
            format!("timestamps not increasing at frames {unordered:?}"),
        ));
    }
    let gaps: Vec<String> = frames
        .windows(2)
        .enumerate()
        .filter(|(_, w)| ((w[1].timestamp - w[0].timestamp) - DEFAULT_DT).abs() > SPACING_TOLERANCE + 1e-9)
        .map(|(i, w)| format!("{} ({:.3} s)", i + 1, w[1].timestamp - w[0].timestamp))
        .collect();
    if !gaps.is_empty() {
        return Err(schema(
            at("frames".into()),
            format!(
                "frame spacing outside {DEFAULT_DT}±{SPACING_TOLERANCE} s at frames {}",
                gaps.join(", ")
            ),
        ));
    }
    Ok(SceneLog {
        scene_id: record.scene_id,
        frames,
    })
}

/// Reads every scene record in a scene-log file. Image references are
/// resolved against the file's directory.
pub fn load_scene_logs(path: &Path) -> Result<Vec<SceneLog>> {
    let file = File::open(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut scenes = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(&line);
        let record: SceneRecord = serde_path_to_error::deserialize(de).map_err(|e| {
            schema(format!("line {}: {}", i + 1, e.path()), e.inner().to_string())
        })?;
        scenes.push(validate_scene(record, base, i + 1)?);
    }
    if scenes.is_empty() {
        return Err(schema("line 1", "no scene record"));
    }
    Ok(scenes)
}

/// Reads a scene-log file holding exactly one scene.
pub fn load_scene_log(path: &Path) -> Result<SceneLog> {
    let mut scenes = load_scene_logs(path)?;
    if scenes.len() != 1 {
        return Err(schema(
            "line 2",
            format!("expected one scene per file, found {}", scenes.len()),
        ));
    }
    Ok(scenes.remove(0))
}

/// Start indices of every full window.
pub fn clip_starts(frames: usize, window: usize, stride: usize) -> Vec<usize> {
    if window == 0 || stride == 0 || frames < window {
        return Vec::new();
    }
    (0..=frames - window).step_by(stride).collect()
}

pub fn classify_command(future: &Trajectory, ego: &EgoState, thresholds: &CommandThresholds) -> Command {
    let mut prev = Point2::ORIGIN;
    let mut heading = 0.0;
    let mut last_speed = 0.0;
    for p in &future.points {
        let len = p.distance(&prev);
        if len >= crate::action_fit::MIN_HEADING_SEGMENT {
            heading += normalize_angle((p.y - prev.y).atan2(p.x - prev.x) - heading);
        }
        last_speed = len / future.dt;
        prev = *p;
    }

    if last_speed < thresholds.stop_speed && last_speed < thresholds.stop_ratio * ego.speed {
        return Command::DecelerateStop;
    }
    let delta = heading.to_degrees();
    let left = delta > 0.0;
    match delta.abs() {
        d if d < thresholds.straight_deg => Command::KeepStraight,
        d if d <= thresholds.hard_deg => {
            if left {
                Command::SlightLeft
            } else {
                Command::SlightRight
            }
        }
        _ => {
            if left {
                Command::HardLeft
            } else {
                Command::HardRight
            }
        }
    }
}

/// Cuts a scene into clips. A scene shorter than one window yields none.
pub fn extract_clips(scene: &SceneLog, window: &ClipWindow, thresholds: &CommandThresholds) -> Result<Vec<Clip>> {
    let starts = clip_starts(scene.frames.len(), window.window_frames(), window.stride_frames);
    if starts.is_empty() {
        log::warn!(
            "scene {} has {} frames, fewer than one {}-frame window; no clips",
            scene.scene_id,
            scene.frames.len(),
            window.window_frames()
        );
    }
    let mut clips = Vec::with_capacity(starts.len());
    for start in starts {
        let frames = &scene.frames[start..start + window.window_frames()];
        let current_idx = window.history_frames;
        let current = &frames[current_idx];
        let past = &frames[..=current_idx];
        let ahead = &frames[current_idx + 1..];

        let positions = |fs: &[Frame]| fs.iter().map(|f| f.ego_pose.position()).collect::<Vec<_>>();
        let history = snap_to_grid(kinematics::to_ego_frame(&positions(past), &current.ego_pose, DEFAULT_DT)?);
        let future = snap_to_grid(kinematics::to_ego_frame(&positions(ahead), &current.ego_pose, DEFAULT_DT)?);
        let poses: Vec<(Pose2D, f64)> = past.iter().map(|f| (f.ego_pose, f.timestamp)).collect();
        let ego_state = kinematics::derive_ego_state(&poses)?;
        let command = classify_command(&future, &ego_state, thresholds);

        clips.push(Clip {
            clip_id: format!("{}_{:03}", scene.scene_id, start),
            scene_id: scene.scene_id.clone(),
            history,
            future,
            ego_state,
            command,
            images: current.camera_images.clone(),
            gt_controls: None,
            reasoning: None,
        });
    }
    Ok(clips)
}

fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<usize> {
    write_atomic(path, |w| {
        for item in items {
            serde_json::to_writer(&mut *w, item).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
    .map_err(io_err(path))?;
    Ok(items.len())
}

pub fn emit_eval_manifest(clips: &[Clip], path: &Path) -> Result<usize> {
    write_jsonl(clips, path)
}

pub fn read_eval_manifest(path: &Path) -> Result<Vec<Clip>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut clips = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(&line);
        let clip: Clip = serde_path_to_error::deserialize(de).map_err(|e| {
            schema(format!("line {}: {}", i + 1, e.path()), e.inner().to_string())
        })?;
        clips.push(clip);
    }
    Ok(clips)
}

/// One supervised chat transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub clip_id: String,
    pub mode: OutputMode,
    pub flags: AblationFlags,
    pub messages: Vec<ChatMessage>,
    /// Per message: true only where the loss applies (the assistant turn).
    pub loss_mask: Vec<bool>,
}

pub fn build_sft_record(
    clip: &Clip,
    mode: OutputMode,
    flags: AblationFlags,
    templates: &PromptTemplates,
) -> Result<SftRecord> {
    if flags.reason && clip.reasoning.is_none() {
        return Err(SceneError::MissingReasoning(clip.clip_id.clone()));
    }
    let target = match mode {
        OutputMode::Waypoint => serialize_waypoints(&clip.future),
        OutputMode::Action => serialize_actions(
            clip.gt_controls
                .as_ref()
                .ok_or_else(|| SceneError::MissingControls(clip.clip_id.clone()))?,
        ),
    };
    let prompt = templates.build_driver_prompt(clip, flags, mode)?;
    let mut messages = prompt.to_messages();
    messages.push(ChatMessage::text(Role::Assistant, target));
    let loss_mask = messages.iter().map(|m| m.role == Role::Assistant).collect();
    Ok(SftRecord {
        clip_id: clip.clip_id.clone(),
        mode,
        flags,
        messages,
        loss_mask,
    })
}

/// Writes one chat record per clip. Every clip is checked before anything
/// is written, so a failure leaves no partial corpus.
pub fn emit_sft_corpus(
    clips: &[Clip],
    mode: OutputMode,
    flags: AblationFlags,
    templates: &PromptTemplates,
    path: &Path,
) -> Result<usize> {
    let records = clips
        .iter()
        .map(|c| build_sft_record(c, mode, flags, templates))
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&records, path)
}

/// README placed next to an emitted corpus.
pub fn corpus_readme(mode: OutputMode, flags: AblationFlags, records: usize) -> String {
    format!(
        "# Driver SFT corpus\n\
         \n\
         - records: {records}\n\
         - target: {mode}\n\
         - inputs: {}\n\
         - prompt templates: {}\n\
         \n\
         Each line is one chat transcript (`messages`: system, user, assistant).\n\
         Image parts are file references; the trainer loads and encodes them.\n\
         `loss_mask` marks the assistant turn as the only loss-bearing message;\n\
         all other tokens are masked out of the autoregressive objective.\n\
         \n\
         ## Reference training setup\n\
         \n\
         | setting | value |\n\
         |---|---|\n\
         | optimizer | AdamW, weight decay 0.01 |\n\
         | learning rate | 1e-5, cosine schedule |\n\
         | batch size | 1, gradient accumulation 16 |\n\
         | epochs | 3 |\n\
         | 8B-scale models | 8-bit quantization + LoRA (rank 64, alpha 128, dropout 0.05) |\n",
        flags.label(),
        crate::prompting::TEMPLATE_VERSION,
    )
}

/// Scene id → split name, read from `{"train": [...], "test": [...]}`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SceneSplit {
    assignment: BTreeMap<String, String>,
}

impl SceneSplit {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let lists: BTreeMap<String, Vec<String>> = serde_path_to_error::deserialize(de)
            .map_err(|e| schema(e.path().to_string(), e.inner().to_string()))?;
        let mut assignment = BTreeMap::new();
        for (split, scenes) in lists {
            for scene in scenes {
                if let Some(prev) = assignment.insert(scene.clone(), split.clone()) {
                    return Err(schema(
                        split.clone(),
                        format!("scene {scene} listed in both {prev} and {split}"),
                    ));
                }
            }
        }
        Ok(Self { assignment })
    }

    pub fn split_of(&self, scene_id: &str) -> Option<&str> {
        self.assignment.get(scene_id).map(String::as_str)
    }
}
