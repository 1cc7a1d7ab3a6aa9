//! Navigator and Driver prompt assembly, text encodings of waypoints and
//! control actions, and parsing of the Navigator's reasoning.
//!
//! Prompt wording lives in versioned template files under `templates/`;
//! code only decides which blocks appear and fills `{{placeholders}}`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{Control, ControlSequence, EgoState, Point2, Trajectory};
use crate::scene_log::{Camera, Clip};

pub const TEMPLATE_VERSION: &str = "v1";

/// Marker line carrying the clip id in Driver prompts.
pub const CLIP_MARKER_PREFIX: &str = "[clip-id: ";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("clip {0} has no cached reasoning")]
    MissingReasoning(String),
    #[error("at least one of reason/command/images must be enabled")]
    NoInputs,
    #[error("template {name}: {message}")]
    Template { name: String, message: String },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("expected {expected} pairs, found {found}")]
    WrongCount { found: usize, expected: usize },
    #[error("malformed number at byte {position}")]
    MalformedNumber { position: usize },
    #[error("unexpected token at byte {position}")]
    UnexpectedToken { position: usize },
    #[error("value {value} at step {index} exceeds limit {limit}")]
    OutOfRange { index: usize, value: String, limit: String },
}

/// Which inputs the Driver prompt carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationFlags {
    pub reason: bool,
    pub command: bool,
    pub images: bool,
}

impl AblationFlags {
    pub const ALL: AblationFlags = AblationFlags {
        reason: true,
        command: true,
        images: true,
    };

    pub fn new(reason: bool, command: bool, images: bool) -> Self {
        Self {
            reason,
            command,
            images,
        }
    }

    /// The four input combinations of the ablation table, in table order.
    pub fn ablation_rows() -> [AblationFlags; 4] {
        [
            Self::new(true, false, false),
            Self::new(true, false, true),
            Self::new(true, true, false),
            Self::new(true, true, true),
        ]
    }

    pub fn any(&self) -> bool {
        self.reason || self.command || self.images
    }

    /// Short label such as `reason+command`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.reason, "reason"),
            (self.command, "command"),
            (self.images, "images"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, name)| *name)
        .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    /// Parses a comma-separated list like `reason,images`; `all` and `none`
    /// are accepted.
    pub fn parse_list(s: &str) -> Result<Self, String> {
        let mut flags = Self::new(false, false, false);
        for item in s.split([',', '+']).map(str::trim).filter(|s| !s.is_empty()) {
            match item.to_ascii_lowercase().as_str() {
                "reason" => flags.reason = true,
                "command" => flags.command = true,
                "images" | "image" => flags.images = true,
                "all" => flags = Self::ALL,
                "none" => {}
                other => return Err(format!("unknown flag '{other}'")),
            }
        }
        Ok(flags)
    }
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::ALL
    }
}

/// What the Driver is asked to emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    Waypoint,
    Action,
}

impl std::str::FromStr for OutputMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "waypoint" | "waypoints" => Ok(Self::Waypoint),
            "action" | "actions" => Ok(Self::Action),
            other => Err(format!("unknown output mode '{other}'")),
        }
    }
}

impl std::fmt::Display for OutputMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Waypoint => "waypoint",
            Self::Action => "action",
        })
    }
}

/// The Navigator's three-part answer plus the raw completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningOutput {
    pub scene_description: String,
    pub recommended_action: String,
    pub reasoning: String,
    pub raw: String,
    /// Labels were missing; `reasoning` holds the whole text.
    #[serde(default)]
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub camera: Camera,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub user: String,
    pub image_refs: Vec<ImageRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// One content part of a chat message; images stay file references.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ContentPart {
    Text { text: String },
    Image { image: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            content: vec![ContentPart::Text { text: text.into() }],
        }
    }

    /// Concatenation of the text parts.
    pub fn joined_text(&self) -> String {
        self.content
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text { text } => Some(text.as_str()),
                ContentPart::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

impl PromptBundle {
    /// System message followed by the user message (images first, then text).
    pub fn to_messages(&self) -> Vec<ChatMessage> {
        let mut user: Vec<ContentPart> = self
            .image_refs
            .iter()
            .map(|r| ContentPart::Image {
                image: r.path.clone(),
            })
            .collect();
        user.push(ContentPart::Text {
            text: self.user.clone(),
        });
        vec![
            ChatMessage::text(Role::System, self.system.clone()),
            ChatMessage {
                role: Role::User,
                content: user,
            },
        ]
    }
}

const TEMPLATE_NAMES: [&str; 9] = [
    "navigator_system",
    "navigator_user",
    "driver_system",
    "ego_state",
    "driver_reasoning",
    "driver_command",
    "driver_images",
    "driver_task_waypoints",
    "driver_task_actions",
];

/// Prompt wording, one text per named template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    texts: BTreeMap<&'static str, String>,
}

impl PromptTemplates {
    /// The templates shipped with the crate.
    pub fn builtin() -> &'static PromptTemplates {
        static BUILTIN: OnceLock<PromptTemplates> = OnceLock::new();
        BUILTIN.get_or_init(|| {
            let sources = [
                include_str!("../templates/v1/navigator_system.txt"),
                include_str!("../templates/v1/navigator_user.txt"),
                include_str!("../templates/v1/driver_system.txt"),
                include_str!("../templates/v1/ego_state.txt"),
                include_str!("../templates/v1/driver_reasoning.txt"),
                include_str!("../templates/v1/driver_command.txt"),
                include_str!("../templates/v1/driver_images.txt"),
                include_str!("../templates/v1/driver_task_waypoints.txt"),
                include_str!("../templates/v1/driver_task_actions.txt"),
            ];
            PromptTemplates {
                texts: TEMPLATE_NAMES
                    .iter()
                    .zip(sources)
                    .map(|(n, s)| (*n, s.to_string()))
                    .collect(),
            }
        })
    }

    /// Loads `<name>.txt` for every template from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut texts = BTreeMap::new();
        for name in TEMPLATE_NAMES {
            let path = dir.join(format!("{name}.txt"));
            let text = std::fs::read_to_string(&path).map_err(|e| PromptError::Template {
                name: name.to_string(),
                message: format!("{}: {e}", path.display()),
            })?;
            texts.insert(name, text);
        }
        Ok(Self { texts })
    }

    fn render(&self, name: &'static str, vars: &[(&str, &str)]) -> Result<String, PromptError> {
        let template = &self.texts[name];
        render_template(template, vars).map_err(|message| PromptError::Template {
            name: name.to_string(),
            message,
        })
    }
}

/// Replaces `{{key}}` occurrences; unknown or unterminated placeholders are
/// errors. Trailing whitespace of the template is dropped.
fn render_template(template: &str, vars: &[(&str, &str)]) -> Result<String, String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template.trim_end();
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or_else(|| "unterminated placeholder".to_string())?;
        let key = after[..end].trim();
        let value = vars
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| format!("unknown placeholder '{key}'"))?;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Fixed-point rendering without a `-0.00`.
pub fn fmt_fixed(value: f64, decimals: usize) -> String {
    let s = format!("{value:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

fn format_pairs<I: IntoIterator<Item = (f64, f64)>>(pairs: I, first: usize, second: usize) -> String {
    let mut out = String::from("[");
    for (i, (a, b)) in pairs.into_iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let _ = write!(out, "({}, {})", fmt_fixed(a, first), fmt_fixed(b, second));
    }
    out.push(']');
    out
}

/// `[(x1, y1), (x2, y2), …]` at two decimals.
pub fn serialize_waypoints(traj: &Trajectory) -> String {
    format_pairs(traj.points.iter().map(|p| (p.x, p.y)), 2, 2)
}

/// `[(a1, k1), …]` with two decimals for acceleration and three for curvature.
pub fn serialize_actions(controls: &ControlSequence) -> String {
    format_pairs(controls.steps.iter().map(|c| (c.accel, c.curvature)), 2, 3)
}

fn is_separator(c: u8) -> bool {
    c.is_ascii_whitespace() || matches!(c, b',' | b'(' | b')' | b'[' | b']')
}

struct PairScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PairScanner<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn token(&mut self) -> (usize, &'a [u8]) {
        let start = self.pos;
        while self.pos < self.bytes.len() && !is_separator(self.bytes[self.pos]) {
            self.pos += 1;
        }
        (start, &self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<f64, ParseError> {
        self.skip_ws();
        let (start, tok) = self.token();
        if tok.is_empty() {
            return Err(ParseError::UnexpectedToken { position: start });
        }
        parse_number(tok).ok_or(ParseError::MalformedNumber { position: start })
    }

    fn expect(&mut self, c: u8) -> Result<(), ParseError> {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(ParseError::UnexpectedToken { position: self.pos })
        }
    }
}

fn parse_number(tok: &[u8]) -> Option<f64> {
    if !tok
        .iter()
        .all(|c| c.is_ascii_digit() || matches!(c, b'+' | b'-' | b'.' | b'e' | b'E'))
    {
        return None;
    }
    let s = std::str::from_utf8(tok).ok()?;
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Scans `(a, b)` pairs, optionally wrapped in one pair of brackets and
/// separated by commas and/or whitespace.
fn parse_pairs(text: &str) -> Result<Vec<(f64, f64)>, ParseError> {
    let mut sc = PairScanner {
        bytes: text.as_bytes(),
        pos: 0,
    };
    let mut pairs = Vec::new();
    let mut bracket_open = false;
    let mut bracket_closed = false;
    loop {
        sc.skip_ws();
        let Some(c) = sc.peek() else { break };
        match c {
            b',' if !pairs.is_empty() && !bracket_closed => sc.pos += 1,
            b'[' if !bracket_open && pairs.is_empty() => {
                bracket_open = true;
                sc.pos += 1;
            }
            b']' if bracket_open && !bracket_closed => {
                bracket_closed = true;
                sc.pos += 1;
            }
            b'(' if !bracket_closed => {
                sc.pos += 1;
                let a = sc.number()?;
                sc.expect(b',')?;
                let b = sc.number()?;
                sc.expect(b')')?;
                pairs.push((a, b));
            }
            _ if !is_separator(c) => {
                let (start, tok) = sc.token();
                return Err(if parse_number(tok).is_some() {
                    ParseError::UnexpectedToken { position: start }
                } else {
                    ParseError::MalformedNumber { position: start }
                });
            }
            _ => return Err(ParseError::UnexpectedToken { position: sc.pos }),
        }
    }
    if bracket_open && !bracket_closed {
        return Err(ParseError::UnexpectedToken {
            position: text.len(),
        });
    }
    Ok(pairs)
}

fn check_count<T>(pairs: &[T], expected: usize) -> Result<(), ParseError> {
    if pairs.len() != expected {
        return Err(ParseError::WrongCount {
            found: pairs.len(),
            expected,
        });
    }
    Ok(())
}

pub fn parse_waypoints(text: &str, expected: usize, dt: f64) -> Result<Trajectory, ParseError> {
    let pairs = parse_pairs(text)?;
    check_count(&pairs, expected)?;
    Ok(Trajectory {
        points: pairs.into_iter().map(|(x, y)| Point2::new(x, y)).collect(),
        dt,
    })
}

/// Parses an action string; every `|κ|` must be within `kappa_max`.
pub fn parse_actions(
    text: &str,
    expected: usize,
    dt: f64,
    kappa_max: f64,
) -> Result<ControlSequence, ParseError> {
    let pairs = parse_pairs(text)?;
    check_count(&pairs, expected)?;
    if let Some((index, (_, k))) = pairs
        .iter()
        .enumerate()
        .find(|(_, (_, k))| k.abs() > kappa_max + 1e-12)
    {
        return Err(ParseError::OutOfRange {
            index,
            value: k.to_string(),
            limit: kappa_max.to_string(),
        });
    }
    Ok(ControlSequence::new(
        pairs.into_iter().map(|(a, k)| Control::new(a, k)).collect(),
        dt,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Scene,
    Action,
    Reasoning,
}

const SECTION_LABELS: [(&str, Section); 3] = [
    ("scene description", Section::Scene),
    ("recommended action", Section::Action),
    ("reasoning", Section::Reasoning),
];

/// Recognizes a section header line, returning the section and any text
/// that follows the label on the same line.
fn match_header(line: &str) -> Option<(Section, &str)> {
    let is_heading = line.trim_start().starts_with('#');
    let stripped = line.trim_start_matches(|c: char| {
        c.is_whitespace() || matches!(c, '#' | '*' | '_' | '>' | '-' | '`')
    });
    // Optional list numbering such as "1." or "2)".
    let stripped = match stripped.find(|c: char| !c.is_ascii_digit()) {
        Some(i) if i > 0 && matches!(stripped.as_bytes()[i], b'.' | b')') => stripped[i + 1..].trim_start(),
        _ => stripped,
    };
    let lower = stripped.to_ascii_lowercase();
    for (label, section) in SECTION_LABELS {
        if !lower.starts_with(label) {
            continue;
        }
        let after = &stripped[label.len()..];
        let trimmed = after.trim_start_matches(['*', '_', '`', ' ', '\t']);
        if let Some(rest) = trimmed.strip_prefix([':', '-']) {
            let rest = rest.trim_start_matches(['*', '_', '`', ':']).trim();
            return Some((section, rest));
        }
        if trimmed.trim().is_empty() && (is_heading || after.contains('*') || after.is_empty()) {
            return Some((section, ""));
        }
    }
    None
}

/// Splits a Navigator completion into its three labeled sections. Never
/// fails: without all three labels the whole text becomes `reasoning`.
pub fn parse_reasoning(raw: &str) -> ReasoningOutput {
    let mut sections: [Option<Vec<&str>>; 3] = [None, None, None];
    let mut current: Option<usize> = None;
    for line in raw.lines() {
        if let Some((section, rest)) = match_header(line) {
            let idx = section as usize;
            let slot = sections[idx].get_or_insert_with(Vec::new);
            if !rest.is_empty() {
                slot.push(rest);
            }
            current = Some(idx);
        } else if let Some(idx) = current {
            sections[idx].as_mut().expect("current section exists").push(line);
        }
    }
    let texts: Vec<Option<String>> = sections
        .iter()
        .map(|s| {
            s.as_ref().map(|lines| lines.join("\n").trim().to_string()).filter(|t| !t.is_empty())
        })
        .collect();
    match (&texts[0], &texts[1], &texts[2]) {
        (Some(scene), Some(action), Some(reasoning)) => ReasoningOutput {
            scene_description: scene.clone(),
            recommended_action: action.clone(),
            reasoning: reasoning.clone(),
            raw: raw.to_string(),
            degraded: false,
        },
        _ => ReasoningOutput {
            scene_description: String::new(),
            recommended_action: String::new(),
            reasoning: raw.trim().to_string(),
            raw: raw.to_string(),
            degraded: true,
        },
    }
}

impl PromptTemplates {
    pub fn format_ego_state(&self, state: &EgoState, history: &Trajectory) -> Result<String, PromptError> {
        let speed = fmt_fixed(state.speed, 2);
        let yaw = fmt_fixed(state.yaw_rate, 2);
        let accel = fmt_fixed(state.accel, 2);
        let history = serialize_waypoints(history);
        self.render(
            "ego_state",
            &[
                ("speed", &speed),
                ("yaw_rate", &yaw),
                ("accel", &accel),
                ("history", &history),
            ],
        )
    }

    pub fn build_navigator_prompt(&self, clip: &Clip) -> Result<PromptBundle, PromptError> {
        let image_refs: Vec<ImageRef> = clip
            .images
            .iter()
            .map(|(camera, path)| ImageRef {
                camera: *camera,
                path: path.clone(),
            })
            .collect();
        let cameras = image_refs
            .iter()
            .map(|r| r.camera.name())
            .collect::<Vec<_>>()
            .join(", ");
        let ego = self.format_ego_state(&clip.ego_state, &clip.history)?;
        let user = self.render(
            "navigator_user",
            &[
                ("cameras", &cameras),
                ("ego_state", &ego),
                ("command", clip.command.label()),
            ],
        )?;
        Ok(PromptBundle {
            system: self.render("navigator_system", &[])?,
            user,
            image_refs,
        })
    }

    pub fn build_driver_prompt(
        &self,
        clip: &Clip,
        flags: AblationFlags,
        mode: OutputMode,
    ) -> Result<PromptBundle, PromptError> {
        if !flags.any() {
            return Err(PromptError::NoInputs);
        }
        let mut blocks = vec![
            format!("{CLIP_MARKER_PREFIX}{}]", clip.clip_id),
            self.format_ego_state(&clip.ego_state, &clip.history)?,
        ];
        if flags.reason {
            let reasoning = clip
                .reasoning
                .as_ref()
                .ok_or_else(|| PromptError::MissingReasoning(clip.clip_id.clone()))?;
            blocks.push(self.render("driver_reasoning", &[("reasoning", reasoning.raw.trim())])?);
        }
        if flags.command {
            blocks.push(self.render("driver_command", &[("command", clip.command.label())])?);
        }
        let mut image_refs = Vec::new();
        if flags.images {
            if let Some(path) = clip.images.get(&Camera::Front) {
                image_refs.push(ImageRef {
                    camera: Camera::Front,
                    path: path.clone(),
                });
            }
            blocks.push(self.render("driver_images", &[])?);
        }
        let count = clip.future.len().to_string();
        let dt = fmt_fixed(clip.future.dt, 1);
        let task = match mode {
            OutputMode::Waypoint => "driver_task_waypoints",
            OutputMode::Action => "driver_task_actions",
        };
        blocks.push(self.render(task, &[("count", &count), ("dt", &dt)])?);
        Ok(PromptBundle {
            system: self.render("driver_system", &[])?,
            user: blocks.join("\n\n"),
            image_refs,
        })
    }
}

pub fn format_ego_state(state: &EgoState, history: &Trajectory) -> String {
    PromptTemplates::builtin()
        .format_ego_state(state, history)
        .expect("builtin templates render")
}

pub fn build_navigator_prompt(clip: &Clip) -> PromptBundle {
    PromptTemplates::builtin()
        .build_navigator_prompt(clip)
        .expect("builtin templates render")
}

pub fn build_driver_prompt(
    clip: &Clip,
    flags: AblationFlags,
    mode: OutputMode,
) -> Result<PromptBundle, PromptError> {
    PromptTemplates::builtin().build_driver_prompt(clip, flags, mode)
}

/// Extracts the clip id from a Driver user message, if present.
pub fn find_clip_marker(text: &str) -> Option<&str> {
    text.lines().find_map(|line| {
        line.trim()
            .strip_prefix(CLIP_MARKER_PREFIX)
            .and_then(|rest| rest.strip_suffix(']'))
    })
}
