//! Waypoint → control conversion.
//!
//! A waypoint sequence is turned into per-step (acceleration, curvature)
//! labels by Tikhonov-regularized least squares:
//!
//! ```text
//! u* = argmin ||A u - b||² + λ ||L u||²
//! ```
//!
//! `A`/`b` come from a decoupled linearization of the Euler model in
//! [`crate::kinematics`]: a longitudinal block matches cumulative
//! accelerations to the speeds implied by waypoint spacing, and a lateral
//! block matches cumulative yaw increments (`v·κ·dt`) to the headings implied
//! by waypoint displacement directions. `L` is a second-difference smoother
//! on each channel plus a weak zeroth-order anchor. The linear solution can optionally be refined by
//! Gauss–Newton on the exact rollout residual, keeping the same smoother.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{
    self, normalize_angle, Control, ControlSequence, KinematicState, KinematicsError, Point2,
    Trajectory, DEFAULT_KAPPA_MAX,
};

/// Segments shorter than this carry the previous heading forward.
pub const MIN_HEADING_SEGMENT: f64 = 0.05;

/// All segments shorter than this make the trajectory stationary.
const DEGENERATE_SEGMENT: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("regularized normal equations are singular")]
    SingularSystem,
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

pub type Result<T, E = FitError> = std::result::Result<T, E>;

/// `min ||A u - b||² + λ ||L u||²`.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeProblem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub l: DMatrix<f64>,
    pub lambda: f64,
}

impl RidgeProblem {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, l: DMatrix<f64>, lambda: f64) -> Result<Self> {
        let problem = Self { a, b, l, lambda };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        if self.a.nrows() != self.b.len() {
            return Err(FitError::InvalidInput(format!(
                "A has {} rows but b has {} entries",
                self.a.nrows(),
                self.b.len()
            )));
        }
        if self.a.ncols() != self.l.ncols() {
            return Err(FitError::InvalidInput(format!(
                "A has {} columns but L has {}",
                self.a.ncols(),
                self.l.ncols()
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(FitError::InvalidInput(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        let finite = self.a.iter().chain(self.b.iter()).chain(self.l.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(FitError::InvalidInput("non-finite matrix entry".into()));
        }
        Ok(())
    }

    pub fn unknowns(&self) -> usize {
        self.a.ncols()
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        (&self.a * u - &self.b).norm_squared() + self.lambda * (&self.l * u).norm_squared()
    }
}

/// The `(n-2) × n` operator with rows `(…, 1, -2, 1, …)`.
pub fn second_difference(n: usize) -> Result<DMatrix<f64>> {
    if n < 3 {
        return Err(FitError::InvalidInput(format!(
            "second difference needs n >= 3, got {n}"
        )));
    }
    let mut d = DMatrix::zeros(n - 2, n);
    for r in 0..n - 2 {
        d[(r, r)] = 1.0;
        d[(r, r + 1)] = -2.0;
        d[(r, r + 2)] = 1.0;
    }
    Ok(d)
}

/// Solves the regularized normal equations `(AᵀA + λLᵀL) u = Aᵀb` by Cholesky.
pub fn ridge_solve(problem: &RidgeProblem) -> Result<DVector<f64>> {
    problem.validate()?;
    let at = problem.a.transpose();
    let mut normal = &at * &problem.a;
    if problem.lambda > 0.0 {
        normal += problem.l.transpose() * &problem.l * problem.lambda;
    }
    let rhs = at * &problem.b;

    let scale = normal.diagonal().amax();
    if scale == 0.0 {
        return Err(FitError::SingularSystem);
    }
    let chol = Cholesky::new(normal).ok_or(FitError::SingularSystem)?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
    if min_pivot <= scale * 1e-13 {
        return Err(FitError::SingularSystem);
    }
    let u = chol.solve(&rhs);
    if u.iter().any(|v| !v.is_finite()) {
        return Err(FitError::SingularSystem);
    }
    Ok(u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub problem: RidgeProblem,
    /// Set when every waypoint coincides with the start position; the
    /// system then has the all-zero solution.
    pub degenerate: bool,
}

/// Weight of the zeroth-order rows appended below the smoother. Curvature
/// is unobservable while the vehicle is stopped and the second difference
/// alone leaves affine sequences free.
pub const ANCHOR_WEIGHT: f64 = 1e-3;

/// Smoother for a horizon of `steps`: second differences on each of the α and
/// κ channels, stacked over `ANCHOR_WEIGHT · I`.
pub fn control_smoother(steps: usize) -> DMatrix<f64> {
    let n = 2 * steps;
    let diff_rows = if steps >= 3 { 2 * (steps - 2) } else { 0 };
    let mut l = DMatrix::zeros(diff_rows + n, n);
    if steps >= 3 {
        let d = second_difference(steps).expect("steps >= 3");
        l.view_mut((0, 0), (steps - 2, steps)).copy_from(&d);
        l.view_mut((steps - 2, steps), (steps - 2, steps)).copy_from(&d);
    }
    l.view_mut((diff_rows, 0), (n, n))
        .copy_from(&(DMatrix::identity(n, n) * ANCHOR_WEIGHT));
    l
}

fn check_inputs(traj: &Trajectory, init: &KinematicState, lambda: f64) -> Result<()> {
    traj.validate()?;
    init.validate()?;
    if traj.len() < 2 {
        return Err(FitError::InvalidInput(format!(
            "need at least 2 waypoints, got {}",
            traj.len()
        )));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(FitError::InvalidInput(format!("invalid lambda {lambda}")));
    }
    Ok(())
}

/// Builds the decoupled linear system. Unknowns are ordered
/// `(α₀ … α_{T-1}, κ₀ … κ_{T-1})`.
pub fn build_linear_system(traj: &Trajectory, init: &KinematicState, lambda: f64) -> Result<LinearSystem> {
    check_inputs(traj, init, lambda)?;
    let steps = traj.len();
    let dt = traj.dt;

    let mut prev = init.position;
    let mut seg_len = Vec::with_capacity(steps);
    let mut seg_dir = Vec::with_capacity(steps);
    for p in &traj.points {
        let (dx, dy) = (p.x - prev.x, p.y - prev.y);
        seg_len.push(dx.hypot(dy));
        seg_dir.push(dy.atan2(dx));
        prev = *p;
    }
    let degenerate = seg_len.iter().all(|&s| s < DEGENERATE_SEGMENT);

    // Speed during step t: the initial speed for t = 0, waypoint spacing after.
    let speeds: Vec<f64> = (0..steps)
        .map(|t| if t == 0 { init.speed } else { seg_len[t] / dt })
        .collect();

    // Unwrapped heading during step t.
    let mut headings = Vec::with_capacity(steps);
    headings.push(init.heading);
    for t in 1..steps {
        let last = headings[t - 1];
        headings.push(if seg_len[t] >= MIN_HEADING_SEGMENT {
            last + normalize_angle(seg_dir[t] - last)
        } else {
            last
        });
    }

    let rows = 2 * (steps - 1);
    let mut a = DMatrix::zeros(rows, 2 * steps);
    let mut b = DVector::zeros(rows);
    for r in 1..steps {
        let lon = r - 1;
        let lat = steps - 1 + r - 1;
        for j in 0..r {
            a[(lon, j)] = dt;
            a[(lat, steps + j)] = dt * speeds[j];
        }
        if !degenerate {
            b[lon] = speeds[r] - init.speed;
            b[lat] = headings[r] - init.heading;
        }
    }

    Ok(LinearSystem {
        problem: RidgeProblem::new(a, b, control_smoother(steps), lambda)?,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub lambda: f64,
    pub refine: bool,
    pub kappa_max: f64,
    pub max_iterations: usize,
    pub step_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            refine: true,
            kappa_max: DEFAULT_KAPPA_MAX,
            max_iterations: 20,
            step_tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub controls: ControlSequence,
    /// RMS Euclidean distance between the rollout of `controls` and the input.
    pub rollout_rmse: f64,
    pub endpoint_error: f64,
    pub iterations: usize,
    pub converged: bool,
    pub degenerate: bool,
    /// Steps whose curvature was clipped to `kappa_max`.
    pub clamped_steps: usize,
}

fn to_controls(u: &DVector<f64>, dt: f64) -> ControlSequence {
    let steps = u.len() / 2;
    ControlSequence::new(
        (0..steps).map(|t| Control::new(u[t], u[steps + t])).collect(),
        dt,
    )
}

/// Rollout positions stacked as `(x₀, y₀, x₁, y₁, …)` and their Jacobian
/// with respect to the stacked control vector.
fn rollout_with_jacobian(u: &DVector<f64>, init: &KinematicState, dt: f64) -> (DVector<f64>, DMatrix<f64>) {
    let steps = u.len() / 2;
    let n = u.len();
    let mut pos = DVector::zeros(2 * steps);
    let mut jac = DMatrix::zeros(2 * steps, n);

    let (mut x, mut y, mut th, mut v) = (init.position.x, init.position.y, init.heading, init.speed);
    let mut dx = DVector::<f64>::zeros(n);
    let mut dy = DVector::<f64>::zeros(n);
    let mut dth = DVector::<f64>::zeros(n);
    let mut dv = DVector::<f64>::zeros(n);

    for t in 0..steps {
        let (sin, cos) = th.sin_cos();
        let kappa = u[steps + t];
        let accel = u[t];

        x += v * cos * dt;
        y += v * sin * dt;
        dx += (&dv * cos - &dth * (v * sin)) * dt;
        dy += (&dv * sin + &dth * (v * cos)) * dt;

        let dth_next = &dth + (&dv * kappa) * dt;
        th += v * kappa * dt;
        let mut dth_next = dth_next;
        dth_next[steps + t] += v * dt;
        dth = dth_next;

        let v_next = v + accel * dt;
        if v_next > 0.0 {
            v = v_next;
            dv[t] += dt;
        } else {
            v = 0.0;
            dv.fill(0.0);
        }

        pos[2 * t] = x;
        pos[2 * t + 1] = y;
        jac.row_mut(2 * t).copy_from(&dx.transpose());
        jac.row_mut(2 * t + 1).copy_from(&dy.transpose());
    }
    (pos, jac)
}

fn stacked(points: &[Point2]) -> DVector<f64> {
    DVector::from_iterator(2 * points.len(), points.iter().flat_map(|p| [p.x, p.y]))
}

/// Exact-rollout objective: `||rollout(u) - W||² + λ ||L u||²`.
fn nonlinear_objective(
    u: &DVector<f64>,
    target: &DVector<f64>,
    init: &KinematicState,
    dt: f64,
    l: &DMatrix<f64>,
    lambda: f64,
) -> Result<f64> {
    let traj = kinematics::rollout(&to_controls(u, dt), init)?;
    Ok((stacked(&traj.points) - target).norm_squared() + lambda * (l * u).norm_squared())
}

fn gauss_newton(
    mut u: DVector<f64>,
    traj: &Trajectory,
    init: &KinematicState,
    l: &DMatrix<f64>,
    options: &FitOptions,
) -> Result<(DVector<f64>, usize, bool)> {
    let dt = traj.dt;
    let target = stacked(&traj.points);
    let mut cost = nonlinear_objective(&u, &target, init, dt, l, options.lambda)?;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < options.max_iterations {
        let (pos, jac) = rollout_with_jacobian(&u, init, dt);
        let residual = pos - &target;
        // Linearized subproblem solved directly for the new iterate:
        // min ||J (u' - u) + r||² + λ ||L u'||².
        let b = &jac * &u - residual;
        let proposal = ridge_solve(&RidgeProblem::new(jac, b, l.clone(), options.lambda)?)?;
        let step = proposal - &u;

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let candidate = &u + &step * scale;
            let c = nonlinear_objective(&candidate, &target, init, dt, l, options.lambda)?;
            if c <= cost {
                accepted = Some((candidate, c));
                break;
            }
            scale *= 0.5;
        }
        let Some((next, next_cost)) = accepted else {
            // No descent along the Gauss–Newton direction: stationary point.
            converged = true;
            break;
        };
        iterations += 1;
        let step_norm = step.norm() * scale;
        u = next;
        cost = next_cost;
        if step_norm < options.step_tolerance {
            converged = true;
            break;
        }
    }
    Ok((u, iterations, converged))
}

/// Fits controls to `traj` starting from `init`, then reports round-trip
/// fidelity of the (curvature-clamped) result.
pub fn fit_controls(traj: &Trajectory, init: &KinematicState, options: &FitOptions) -> Result<FitResult> {
    let system = build_linear_system(traj, init, options.lambda)?;
    let (u, iterations, converged) = if system.degenerate {
        (DVector::zeros(system.problem.unknowns()), 0, true)
    } else {
        let linear = ridge_solve(&system.problem)?;
        if options.refine {
            gauss_newton(linear, traj, init, &system.problem.l, options)?
        } else {
            (linear, 0, true)
        }
    };

    let mut controls = to_controls(&u, traj.dt);
    let clamped_steps = controls.clamp_curvature(options.kappa_max);
    let reconstructed = kinematics::rollout(&controls, init)?;
    let squared: Vec<f64> = reconstructed
        .points
        .iter()
        .zip(&traj.points)
        .map(|(a, b)| {
            let d = a.distance(b);
            d * d
        })
        .collect();
    let rollout_rmse = (squared.iter().sum::<f64>() / squared.len() as f64).sqrt();
    let endpoint_error = squared.last().copied().unwrap_or(0.0).sqrt();

    Ok(FitResult {
        controls,
        rollout_rmse,
        endpoint_error,
        iterations,
        converged,
        degenerate: system.degenerate,
        clamped_steps,
    })
}
