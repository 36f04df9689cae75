//! Linear LIP-MPC gait planner.
//!
//! Given the current pendulum state and a robot-centric subgoal, the planner
//! fixes the turning rate of every predicted step to `phi_c / (N T)`, which
//! makes the heading of each predicted step a known constant. Constraints
//! written in the robot frame (velocity, reachability, maneuverability) are
//! then linear in the foot placements, and with the states eliminated the
//! problem is a small dense QP over the `N` foot placements.

use std::f64::consts::FRAC_PI_4;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Rotation2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{HalfPlane, Vec2};
use crate::lip::{self, GaitControl, LipParams, LipState, Stance};
use crate::qp::{QpError, QpProblem, QpSolver, QpStatus};

#[derive(Debug, Error, PartialEq)]
pub enum MpcError {
    #[error("no feasible gait for the requested subgoal")]
    NoGait,
    #[error("gait QP hit its iteration limit")]
    SolverLimit,
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Dynamics(#[from] lip::LipError),
}

/// High-level action: distance and bearing of the subgoal relative to the
/// robot's CoM and heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subgoal {
    pub distance: f64,
    pub bearing: f64,
}

impl Subgoal {
    pub const MAX_DISTANCE: f64 = 3.0;
    pub const MAX_BEARING: f64 = FRAC_PI_4;

    /// Clamps into `[0, 3] x [-pi/4, pi/4]`; NaN components become zero.
    pub fn new(distance: f64, bearing: f64) -> Self {
        let d = if distance.is_nan() { 0.0 } else { distance };
        let b = if bearing.is_nan() { 0.0 } else { bearing };
        Subgoal {
            distance: d.clamp(0.0, Self::MAX_DISTANCE),
            bearing: b.clamp(-Self::MAX_BEARING, Self::MAX_BEARING),
        }
    }

    /// World-frame target point for a robot at `com` facing `heading`.
    pub fn target(&self, com: Vec2, heading: f64) -> Vec2 {
        let a = self.bearing + heading;
        com + Vec2::new(a.cos(), a.sin()) * self.distance
    }
}

/// Box for the capture point `q + v / omega0` right after a placement,
/// relative to the new stance foot in the heading frame. `lateral` points
/// towards the other foot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureBand {
    pub forward: [f64; 2],
    pub lateral: [f64; 2],
}

impl Default for CaptureBand {
    fn default() -> Self {
        CaptureBand {
            forward: [-0.01, 0.12],
            lateral: [0.05, 0.075],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    pub horizon: usize,
    pub lip: LipParams,
    pub v_x_max: f64,
    pub v_y_max: f64,
    /// Forward reach of the swing foot in the robot frame.
    pub reach_forward: [f64; 2],
    /// Lateral reach magnitude; the side alternates with the stance foot.
    pub reach_lateral: [f64; 2],
    /// Forward speed given up per rad/s of turning.
    pub turn_coupling: f64,
    pub cbf_zeta: f64,
    /// Extra inflation of every half-plane inside the planner.
    pub cbf_margin: f64,
    pub max_half_planes: usize,
    pub max_qp_iterations: usize,
    /// Band for the capture point after every placement. `None` drops the
    /// rows.
    pub capture: Option<CaptureBand>,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 3,
            lip: LipParams::default(),
            v_x_max: 0.8,
            v_y_max: 0.4,
            reach_forward: [-0.1, 0.6],
            reach_lateral: [0.1, 0.45],
            turn_coupling: 0.3,
            cbf_zeta: 0.4,
            cbf_margin: 0.1,
            max_half_planes: 3,
            max_qp_iterations: 200,
            capture: Some(CaptureBand::default()),
        }
    }
}

impl MpcConfig {
    pub fn turn_rate(&self, sg: &Subgoal) -> f64 {
        sg.bearing / (self.horizon as f64 * self.lip.step_duration)
    }

    pub fn rows_per_half_plane(&self) -> usize {
        self.horizon
    }

    pub fn base_rows(&self) -> usize {
        let capture = if self.capture.is_some() { 4 * self.horizon } else { 0 };
        9 * self.horizon + capture
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcDiagnostics {
    pub status: QpStatus,
    /// Sum of squared distances between the predicted CoM and the target.
    pub cost: f64,
    pub active_set: Vec<usize>,
    pub iterations: usize,
    pub rows: usize,
    pub half_planes: usize,
    pub dropped_half_planes: usize,
    /// Excluded from serialized logs so they stay reproducible.
    #[serde(skip)]
    pub wall_time_us: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub control: GaitControl,
    pub controls: Vec<GaitControl>,
    /// `x_1 .. x_N`.
    pub states: Vec<LipState>,
    /// World CoM at the start of steps `1 .. N+1`.
    pub com: Vec<Vec2>,
    pub target: Vec2,
    pub diagnostics: MpcDiagnostics,
}

/// Scalar affine function of the decision vector.
#[derive(Debug, Clone)]
struct Affine {
    constant: f64,
    coeffs: Vec<f64>,
}

impl Affine {
    fn constant(value: f64, n: usize) -> Self {
        Affine {
            constant: value,
            coeffs: vec![0.0; n],
        }
    }

    fn variable(index: usize, n: usize) -> Self {
        let mut a = Affine::constant(0.0, n);
        a.coeffs[index] = 1.0;
        a
    }

    fn scaled_add(&self, s: f64, other: &Affine, t: f64) -> Affine {
        Affine {
            constant: s * self.constant + t * other.constant,
            coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| s * a + t * b).collect(),
        }
    }
}

/// Affine world-axis pair.
#[derive(Debug, Clone)]
struct Affine2 {
    x: Affine,
    y: Affine,
}

impl Affine2 {
    fn constant(v: Vec2, n: usize) -> Self {
        Affine2 {
            x: Affine::constant(v.x, n),
            y: Affine::constant(v.y, n),
        }
    }

    fn combine(&self, s: f64, other: &Affine2, t: f64) -> Affine2 {
        Affine2 {
            x: self.x.scaled_add(s, &other.x, t),
            y: self.y.scaled_add(s, &other.y, t),
        }
    }

    /// `dir . self`
    fn project(&self, dir: Vec2) -> Affine {
        self.x.scaled_add(dir.x, &self.y, dir.y)
    }
}

struct Prediction {
    /// World CoM at the start of steps `1 .. N+1`.
    com: Vec<Affine2>,
    /// CoM velocity at the start of steps `1 .. N+1`.
    vel: Vec<Affine2>,
    /// CoM relative to the freshly placed foot, at the start of steps `1 .. N`.
    rel: Vec<Affine2>,
}

fn predict(x: &LipState, cfg: &MpcConfig) -> Prediction {
    let n_steps = cfg.horizon;
    let n = 2 * n_steps;
    let t = cfg.lip.step_duration;
    let w0 = cfg.lip.omega0();
    let (c, s) = ((w0 * t).cosh(), (w0 * t).sinh());

    let mut q = Affine2::constant(x.q, n);
    let mut v = Affine2::constant(x.v, n);
    let mut foot = Affine2::constant(x.stance_foot, n);
    let mut com = Vec::with_capacity(n_steps + 1);
    let mut vel = Vec::with_capacity(n_steps + 1);
    let mut rel = Vec::with_capacity(n_steps);
    for k in 0..=n_steps {
        let q_end = q.combine(c, &v, s / w0);
        let v_end = q.combine(w0 * s, &v, c);
        com.push(foot.combine(1.0, &q_end, 1.0));
        vel.push(v_end.clone());
        if k < n_steps {
            let f = Affine2 {
                x: Affine::variable(2 * k, n),
                y: Affine::variable(2 * k + 1, n),
            };
            q = q_end.combine(1.0, &f, -1.0);
            rel.push(q.clone());
            foot = foot.combine(1.0, &f, 1.0);
            v = v_end;
        }
    }
    Prediction { com, vel, rel }
}

struct Rows {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl Rows {
    /// Adds `expr <= bound`.
    fn le(&mut self, expr: &Affine, bound: f64) {
        self.a.push(expr.coeffs.clone());
        self.b.push(bound - expr.constant);
    }

    fn ge(&mut self, expr: &Affine, bound: f64) {
        self.a.push(expr.coeffs.iter().map(|v| -v).collect());
        self.b.push(expr.constant - bound);
    }
}

fn heading_axes(theta: f64) -> (Vec2, Vec2) {
    let r = Rotation2::new(theta);
    (r * Vec2::x(), r * Vec2::y())
}

/// Keeps at most `cfg.max_half_planes`, nearest to the CoM first. Returns
/// the kept planes and the number dropped.
fn select_half_planes(x: &LipState, planes: &[HalfPlane], cfg: &MpcConfig) -> (Vec<HalfPlane>, usize) {
    let p = x.com();
    let mut sorted: Vec<(usize, &HalfPlane)> = planes.iter().enumerate().collect();
    sorted.sort_by(|a, b| a.1.value(p).total_cmp(&b.1.value(p)).then(a.0.cmp(&b.0)));
    let kept: Vec<HalfPlane> = sorted.iter().take(cfg.max_half_planes).map(|(_, h)| **h).collect();
    let dropped = planes.len() - kept.len();
    (kept, dropped)
}

/// Builds the condensed gait QP over the foot placements
/// `z = [f_0x, f_0y, ..., f_(N-1)x, f_(N-1)y]` (world axes, each relative to
/// the previous stance foot).
///
/// The cost sums the squared distance to the target over the `N` predicted
/// CoM positions that the placements influence (steps `2 .. N+1`; the CoM at
/// the start of step 1 is already fixed by the current state). Rows, in
/// order: velocity box at boundaries `2 .. N+1` (4 per boundary), reach box
/// per placement (4 each), maneuverability per boundary, the capture band
/// (4 per placement, when enabled), then one barrier row per half-plane and
/// step.
pub fn assemble_qp(x: &LipState, sg: &Subgoal, half_planes: &[HalfPlane], cfg: &MpcConfig) -> QpProblem {
    let n_steps = cfg.horizon;
    let n = 2 * n_steps;
    let t = cfg.lip.step_duration;
    let omega = cfg.turn_rate(sg);
    let target = sg.target(x.com(), x.theta);
    let pred = predict(x, cfg);
    let heading = |k: usize| x.theta + k as f64 * omega * t;

    let mut q = DMatrix::zeros(n, n);
    let mut c = DVector::zeros(n);
    for p in &pred.com[1..] {
        for (axis, goal) in [(&p.x, target.x), (&p.y, target.y)] {
            let g = DVector::from_column_slice(&axis.coeffs);
            q += &g * g.transpose() * 2.0;
            c += &g * (2.0 * (axis.constant - goal));
        }
    }

    let mut rows = Rows { a: Vec::new(), b: Vec::new() };
    for k in 1..=n_steps {
        let (fwd, left) = heading_axes(heading(k + 1));
        let vx = pred.vel[k].project(fwd);
        let vy = pred.vel[k].project(left);
        rows.le(&vx, cfg.v_x_max);
        rows.ge(&vx, -cfg.v_x_max);
        rows.le(&vy, cfg.v_y_max);
        rows.ge(&vy, -cfg.v_y_max);
    }
    let mut stance = x.stance;
    for k in 0..n_steps {
        let (fwd, left) = heading_axes(heading(k + 1));
        let f = Affine2 {
            x: Affine::variable(2 * k, n),
            y: Affine::variable(2 * k + 1, n),
        };
        let fx = f.project(fwd);
        // the swing foot lands on the stance foot's outer side: a left
        // stance (-1) steps to the right (negative lateral), and vice versa
        let fy_out = f.project(left * stance.sign());
        rows.le(&fx, cfg.reach_forward[1]);
        rows.ge(&fx, cfg.reach_forward[0]);
        rows.le(&fy_out, cfg.reach_lateral[1]);
        rows.ge(&fy_out, cfg.reach_lateral[0]);
        stance = stance.flipped();
    }
    for k in 1..=n_steps {
        let (fwd, _) = heading_axes(heading(k + 1));
        rows.le(&pred.vel[k].project(fwd), cfg.v_x_max - cfg.turn_coupling * omega.abs());
    }
    if let Some(band) = &cfg.capture {
        let w0 = cfg.lip.omega0();
        let mut stance = x.stance;
        for k in 0..n_steps {
            stance = stance.flipped();
            let (fwd, left) = heading_axes(heading(k + 1));
            let xi = pred.rel[k].combine(1.0, &pred.vel[k], 1.0 / w0);
            let inward = xi.project(left * stance.sign());
            rows.ge(&inward, band.lateral[0]);
            rows.le(&inward, band.lateral[1]);
            let ahead = xi.project(fwd);
            rows.ge(&ahead, band.forward[0]);
            rows.le(&ahead, band.forward[1]);
        }
    }
    for hp in half_planes {
        let offset = hp.normal.dot(&hp.point) + hp.inflation + cfg.cbf_margin;
        for k in 0..n_steps {
            // h(p_(k+2)) - zeta h(p_(k+1)) >= 0
            let next = pred.com[k + 1].project(hp.normal);
            let prev = pred.com[k].project(hp.normal);
            let expr = next.scaled_add(1.0, &prev, -cfg.cbf_zeta);
            rows.ge(&expr, (1.0 - cfg.cbf_zeta) * offset);
        }
    }

    let m = rows.b.len();
    let a = DMatrix::from_fn(m, n, |i, j| rows.a[i][j]);
    QpProblem::inequality(q, c, a, DVector::from_vec(rows.b))
}

/// Tracking cost of a placement sequence: squared distance to the target
/// summed over the CoM positions at the start of steps `2 .. N+1`.
pub fn tracking_cost(com: &[Vec2], target: Vec2) -> f64 {
    com.iter().skip(1).map(|p| (p - target).norm_squared()).sum()
}

/// Gait planner; owns its QP workspace.
#[derive(Debug, Default)]
pub struct Planner {
    pub config: MpcConfig,
    solver: QpSolver,
}

impl Planner {
    pub fn new(config: MpcConfig) -> Self {
        Planner {
            config,
            solver: QpSolver::new(),
        }
    }

    pub fn plan(&mut self, x: &LipState, sg: &Subgoal, half_planes: &[HalfPlane]) -> Result<Plan, MpcError> {
        let started = Instant::now();
        let cfg = &self.config;
        let (kept, dropped) = select_half_planes(x, half_planes, cfg);
        let problem = assemble_qp(x, sg, &kept, cfg);
        let sol = self.solver.solve(&problem, cfg.max_qp_iterations)?;
        match sol.status {
            QpStatus::Optimal => {}
            QpStatus::Infeasible => return Err(MpcError::NoGait),
            QpStatus::MaxIterations => return Err(MpcError::SolverLimit),
        }
        let omega = cfg.turn_rate(sg);
        let controls: Vec<GaitControl> = (0..cfg.horizon)
            .map(|k| GaitControl {
                foot: Vec2::new(sol.z[2 * k], sol.z[2 * k + 1]),
                omega,
            })
            .collect();
        let mut states = Vec::with_capacity(cfg.horizon);
        let mut com = Vec::with_capacity(cfg.horizon + 1);
        let mut cur = *x;
        for u in &controls {
            let (q_end, _) = lip::evolve(cur.q, cur.v, cfg.lip.step_duration, &cfg.lip);
            com.push(cur.stance_foot + q_end);
            cur = lip::step_map(&cur, u, &cfg.lip)?;
            states.push(cur);
        }
        let (q_end, _) = lip::evolve(cur.q, cur.v, cfg.lip.step_duration, &cfg.lip);
        com.push(cur.stance_foot + q_end);
        let target = sg.target(x.com(), x.theta);
        let diagnostics = MpcDiagnostics {
            status: sol.status,
            cost: tracking_cost(&com, target),
            active_set: sol.active_set.clone(),
            iterations: sol.iterations,
            rows: problem.a_ineq.nrows(),
            half_planes: kept.len(),
            dropped_half_planes: dropped,
            wall_time_us: started.elapsed().as_secs_f64() * 1e6,
        };
        Ok(Plan {
            control: controls[0],
            controls,
            states,
            com,
            target,
            diagnostics,
        })
    }
}

/// Stance of the foot placed by decision `k` (the stance it lands beside).
pub fn stance_at(x: &LipState, k: usize) -> Stance {
    (0..k).fold(x.stance, |s, _| s.flipped())
}
