//! Step-to-step linear inverted pendulum dynamics with heading integration.
//!
//! The CoM state is stored relative to the current stance foot and in
//! world-aligned axes, so one walking step is an exactly affine map of the
//! ordered state `[q_x, v_x, q_y, v_y, theta]` and input `[f_x, f_y, omega]`.
//! Heading only enters through the constraints the planner imposes in the
//! robot frame; the pendulum itself does not care which way the robot faces.

use std::f64::consts::PI;

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec2;

pub type StateVector = SVector<f64, 5>;
pub type InputVector = SVector<f64, 3>;
pub type StateMatrix = SMatrix<f64, 5, 5>;
pub type InputMatrix = SMatrix<f64, 5, 3>;

/// Largest CoM offset from the stance foot before the step is treated as a fall.
pub const ENVELOPE: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum LipError {
    #[error("non-finite {0} passed to the step map")]
    NonFinite(&'static str),
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipParams {
    pub com_height: f64,
    pub step_duration: f64,
    pub gravity: f64,
}

impl Default for LipParams {
    fn default() -> Self {
        LipParams {
            com_height: 1.0,
            step_duration: 0.4,
            gravity: 9.81,
        }
    }
}

impl LipParams {
    pub fn omega0(&self) -> f64 {
        (self.gravity / self.com_height).sqrt()
    }

    fn hyperbolic(&self, t: f64) -> (f64, f64) {
        let w = self.omega0() * t;
        (w.cosh(), w.sinh())
    }
}

/// Which foot carries the robot: `-1` left, `+1` right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stance {
    Left,
    Right,
}

impl Stance {
    pub fn sign(self) -> f64 {
        match self {
            Stance::Left => -1.0,
            Stance::Right => 1.0,
        }
    }

    pub fn flipped(self) -> Stance {
        match self {
            Stance::Left => Stance::Right,
            Stance::Right => Stance::Left,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipState {
    /// CoM position relative to the stance foot.
    pub q: Vec2,
    pub v: Vec2,
    pub theta: f64,
    pub stance_foot: Vec2,
    pub stance: Stance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaitControl {
    /// Next stance foot relative to the current one.
    pub foot: Vec2,
    pub omega: f64,
}

impl LipState {
    /// A natural lateral sway for the given stance: the CoM sits `half_width`
    /// to the inside of the stance foot and moves so that, with no forward
    /// motion, the next step starts from the mirrored state.
    pub fn standing(position: Vec2, theta: f64, stance: Stance, half_width: f64, params: &LipParams) -> Self {
        let (c, s) = params.hyperbolic(params.step_duration);
        let w0 = params.omega0();
        let lateral = nalgebra::Rotation2::new(theta) * Vec2::y();
        // stance-side sign: left foot (-1) has the CoM to its right
        let offset = stance.sign() * half_width;
        let q = lateral * offset;
        LipState {
            q,
            v: q * ((1.0 - c) * w0 / s),
            theta,
            stance_foot: position - q,
            stance,
        }
    }

    pub fn com(&self) -> Vec2 {
        self.stance_foot + self.q
    }

    pub fn to_vector(&self) -> StateVector {
        StateVector::from([self.q.x, self.v.x, self.q.y, self.v.y, self.theta])
    }

    pub fn exceeds_envelope(&self) -> bool {
        self.q.norm() > ENVELOPE
    }

    /// Velocity expressed in the heading frame (x forward, y left).
    pub fn heading_velocity(&self) -> Vec2 {
        nalgebra::Rotation2::new(-self.theta) * self.v
    }

    fn check_finite(&self) -> Result<(), LipError> {
        let finite = self.q.iter().chain(self.v.iter()).chain(self.stance_foot.iter()).all(|v| v.is_finite())
            && self.theta.is_finite();
        if finite {
            Ok(())
        } else {
            Err(LipError::NonFinite("state"))
        }
    }
}

/// Pendulum flow about a fixed stance foot for time `t`.
pub fn evolve(q: Vec2, v: Vec2, t: f64, params: &LipParams) -> (Vec2, Vec2) {
    let (c, s) = params.hyperbolic(t);
    let w0 = params.omega0();
    (q * c + v * (s / w0), q * (w0 * s) + v * c)
}

/// One walking step: pendulum flow for `T`, then the swing foot lands at
/// `u.foot` relative to the old stance foot and becomes the new stance.
pub fn step_map(x: &LipState, u: &GaitControl, params: &LipParams) -> Result<LipState, LipError> {
    x.check_finite()?;
    if !(u.foot.iter().all(|v| v.is_finite()) && u.omega.is_finite()) {
        return Err(LipError::NonFinite("control"));
    }
    let t = params.step_duration;
    let (q_end, v_end) = evolve(x.q, x.v, t, params);
    Ok(LipState {
        q: q_end - u.foot,
        v: v_end,
        theta: wrap_angle(x.theta + u.omega * t),
        stance_foot: x.stance_foot + u.foot,
        stance: x.stance.flipped(),
    })
}

/// `(A_L, B_L)` such that one step is `x' = A_L x + B_L u` on the ordered
/// state `[q_x, v_x, q_y, v_y, theta]` and input `[f_x, f_y, omega]`
/// (heading unwrapped).
pub fn step_matrices(params: &LipParams) -> (StateMatrix, InputMatrix) {
    let t = params.step_duration;
    let (c, s) = params.hyperbolic(t);
    let w0 = params.omega0();
    let mut a = StateMatrix::zeros();
    for axis in 0..2 {
        let k = 2 * axis;
        a[(k, k)] = c;
        a[(k, k + 1)] = s / w0;
        a[(k + 1, k)] = w0 * s;
        a[(k + 1, k + 1)] = c;
    }
    a[(4, 4)] = 1.0;
    let mut b = InputMatrix::zeros();
    b[(0, 0)] = -1.0;
    b[(2, 1)] = -1.0;
    b[(4, 2)] = t;
    (a, b)
}

/// Per-axis orbital energy `v^2/2 - omega0^2 q^2/2`, conserved by the
/// within-step flow.
pub fn orbital_energy(x: &LipState, params: &LipParams) -> [f64; 2] {
    let w2 = params.omega0().powi(2);
    [
        0.5 * x.v.x * x.v.x - 0.5 * w2 * x.q.x * x.q.x,
        0.5 * x.v.y * x.v.y - 0.5 * w2 * x.q.y * x.q.y,
    ]
}
