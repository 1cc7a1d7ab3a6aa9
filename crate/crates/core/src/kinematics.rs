//! Planar kinematic types and the discrete unicycle model used to turn
//! (acceleration, curvature) controls into waypoints.
//!
//! Conventions: ego frame has x forward and y left, headings are
//! counter-clockwise from +x, and positive curvature turns left.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default sampling period of the logs (2 Hz).
pub const DEFAULT_DT: f64 = 0.5;

/// Default curvature limit applied to fitted and parsed controls, in 1/m.
pub const DEFAULT_KAPPA_MAX: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("insufficient history: need at least 3 poses, got {found}")]
    InsufficientHistory { found: usize },
}

pub type Result<T, E = KinematicsError> = std::result::Result<T, E>;

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(TAU);
    if a > PI {
        a -= TAU;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x.is_finite() && self.y.is_finite() && self.heading.is_finite()) {
            return Err(KinematicsError::InvalidInput(format!(
                "non-finite pose ({}, {}, {})",
                self.x, self.y, self.heading
            )));
        }
        Ok(())
    }
}

/// Time-indexed waypoints with a fixed sampling period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<Point2>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(points: Vec<Point2>, dt: f64) -> Result<Self> {
        let traj = Self { points, dt };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(KinematicsError::InvalidInput(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if let Some(i) = self.points.iter().position(|p| !p.is_finite()) {
            return Err(KinematicsError::InvalidInput(format!(
                "non-finite waypoint at index {i}"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last(&self) -> Option<&Point2> {
        self.points.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicState {
    pub position: Point2,
    pub heading: f64,
    pub speed: f64,
}

impl KinematicState {
    pub fn new(position: Point2, heading: f64, speed: f64) -> Self {
        Self {
            position,
            heading: normalize_angle(heading),
            speed,
        }
    }

    /// Ego-frame initial state: at the origin, facing +x.
    pub fn at_origin(speed: f64) -> Self {
        Self::new(Point2::ORIGIN, 0.0, speed)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.position.is_finite() || !self.heading.is_finite() || !self.speed.is_finite() {
            return Err(KinematicsError::InvalidInput(
                "non-finite kinematic state".into(),
            ));
        }
        if self.speed < 0.0 {
            return Err(KinematicsError::InvalidInput(format!(
                "negative initial speed {}",
                self.speed
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Control {
    /// Longitudinal acceleration, m/s^2.
    pub accel: f64,
    /// Path curvature, 1/m.
    pub curvature: f64,
}

impl Control {
    pub const ZERO: Control = Control {
        accel: 0.0,
        curvature: 0.0,
    };

    pub fn new(accel: f64, curvature: f64) -> Self {
        Self { accel, curvature }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSequence {
    pub steps: Vec<Control>,
    pub dt: f64,
}

impl ControlSequence {
    pub fn new(steps: Vec<Control>, dt: f64) -> Self {
        Self { steps, dt }
    }

    pub fn zeros(len: usize, dt: f64) -> Self {
        Self::new(vec![Control::ZERO; len], dt)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(KinematicsError::InvalidInput(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if let Some(i) = self
            .steps
            .iter()
            .position(|c| !(c.accel.is_finite() && c.curvature.is_finite()))
        {
            return Err(KinematicsError::InvalidInput(format!(
                "non-finite control at step {i}"
            )));
        }
        Ok(())
    }

    /// Clamps every curvature into [-kappa_max, kappa_max]; returns how many
    /// steps were changed.
    pub fn clamp_curvature(&mut self, kappa_max: f64) -> usize {
        let mut clamped = 0;
        for step in &mut self.steps {
            let c = step.curvature.clamp(-kappa_max, kappa_max);
            if c != step.curvature {
                step.curvature = c;
                clamped += 1;
            }
        }
        clamped
    }
}

/// Speed, yaw rate and acceleration summarizing the current motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub speed: f64,
    pub yaw_rate: f64,
    pub accel: f64,
}

impl EgoState {
    pub fn new(speed: f64, yaw_rate: f64, accel: f64) -> Self {
        Self {
            speed,
            yaw_rate,
            accel,
        }
    }
}

/// Integrates a control sequence and returns every intermediate state,
/// starting with `init` (so the result has `controls.len() + 1` entries).
pub fn rollout_states(controls: &ControlSequence, init: &KinematicState) -> Result<Vec<KinematicState>> {
    controls.validate()?;
    init.validate()?;
    let dt = controls.dt;
    let mut states = Vec::with_capacity(controls.len() + 1);
    let (mut x, mut y, mut heading, mut speed) =
        (init.position.x, init.position.y, init.heading, init.speed);
    states.push(*init);
    for step in &controls.steps {
        x += speed * heading.cos() * dt;
        y += speed * heading.sin() * dt;
        heading += speed * step.curvature * dt;
        speed = (speed + step.accel * dt).max(0.0);
        states.push(KinematicState::new(Point2::new(x, y), heading, speed));
    }
    Ok(states)
}

/// Explicit Euler rollout. Point `t` is the position after `t + 1` steps.
pub fn rollout(controls: &ControlSequence, init: &KinematicState) -> Result<Trajectory> {
    if controls.is_empty() {
        return Err(KinematicsError::InvalidInput("empty control sequence".into()));
    }
    let states = rollout_states(controls, init)?;
    let points = states.iter().skip(1).map(|s| s.position).collect();
    Trajectory::new(points, controls.dt)
}

/// Backward finite differences over the last three timestamped poses.
pub fn derive_ego_state(poses: &[(Pose2D, f64)]) -> Result<EgoState> {
    if poses.len() < 3 {
        return Err(KinematicsError::InsufficientHistory { found: poses.len() });
    }
    for (pose, t) in poses {
        pose.validate()?;
        if !t.is_finite() {
            return Err(KinematicsError::InvalidInput("non-finite timestamp".into()));
        }
    }
    if let Some(w) = poses.windows(2).position(|w| w[1].1 <= w[0].1) {
        return Err(KinematicsError::InvalidInput(format!(
            "timestamps not strictly increasing at pose {}",
            w + 1
        )));
    }
    let n = poses.len();
    let (p0, t0) = &poses[n - 3];
    let (p1, t1) = &poses[n - 2];
    let (p2, t2) = &poses[n - 1];
    let dt_prev = t1 - t0;
    let dt_last = t2 - t1;
    let speed_prev = p1.position().distance(&p0.position()) / dt_prev;
    let speed = p2.position().distance(&p1.position()) / dt_last;
    let yaw_rate = normalize_angle(p2.heading - p1.heading) / dt_last;
    let accel = (speed - speed_prev) / dt_last;
    Ok(EgoState::new(speed, yaw_rate, accel))
}

/// Expresses global points in the frame of `reference` (x forward, y left).
pub fn to_ego_frame(global: &[Point2], reference: &Pose2D, dt: f64) -> Result<Trajectory> {
    reference.validate()?;
    let (sin, cos) = reference.heading.sin_cos();
    let points = global
        .iter()
        .map(|p| {
            let dx = p.x - reference.x;
            let dy = p.y - reference.y;
            Point2::new(cos * dx + sin * dy, -sin * dx + cos * dy)
        })
        .collect();
    Trajectory::new(points, dt)
}

/// Inverse of [`to_ego_frame`].
pub fn from_ego_frame(local: &Trajectory, reference: &Pose2D) -> Result<Vec<Point2>> {
    reference.validate()?;
    local.validate()?;
    let (sin, cos) = reference.heading.sin_cos();
    Ok(local
        .points
        .iter()
        .map(|p| {
            Point2::new(
                reference.x + cos * p.x - sin * p.y,
                reference.y + sin * p.x + cos * p.y,
            )
        })
        .collect())
}
