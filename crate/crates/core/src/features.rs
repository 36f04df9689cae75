//! Raw observations and their fixed-scale feature encoding.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::geometry::{Environment, OccupancyGrid, Vec2, GRID_SIZE};
use crate::lip::{wrap_angle, LipState, Stance};

pub const POOL: usize = 8;
pub const POOLED: usize = (GRID_SIZE / POOL) * (GRID_SIZE / POOL);
pub const PROPRIO: usize = 11;
pub const FEATURE_DIM: usize = POOLED + PROPRIO;

pub const POSITION_SCALE: f64 = 10.0;
pub const VELOCITY_SCALE: f64 = 1.0;
pub const GOAL_DISTANCE_SCALE: f64 = 14.15;
pub const ANGLE_SCALE: f64 = std::f64::consts::PI;
pub const OBSTACLE_DISTANCE_SCALE: f64 = 3.0;

/// Everything the policy sees at the start of a walking step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawState {
    #[serde(with = "grid_hex")]
    pub grid: OccupancyGrid,
    pub com: Vec2,
    pub velocity: Vec2,
    pub theta: f64,
    pub stance: Stance,
    pub d_goal: f64,
    pub heading_error: f64,
    /// Distance to the nearest obstacle in the local window, if any.
    pub d_obstacle: Option<f64>,
    pub goal: Vec2,
}

/// Local view of the world around a pendulum state.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub raw: RawState,
    pub visible: Vec<usize>,
}

pub fn goal_geometry(com: Vec2, theta: f64, goal: Vec2) -> (f64, f64) {
    let to_goal = goal - com;
    (to_goal.norm(), wrap_angle(to_goal.y.atan2(to_goal.x) - theta))
}

pub fn observe(env: &Environment, x: &LipState) -> Observation {
    let com = x.com();
    let (grid, visible) = env.render_local_view(com, x.theta);
    let (d_goal, heading_error) = goal_geometry(com, x.theta, env.goal);
    let d_obstacle = if visible.is_empty() {
        None
    } else {
        Some(env.min_distance_among(com, &visible))
    };
    Observation {
        raw: RawState {
            grid,
            com,
            velocity: x.v,
            theta: x.theta,
            stance: x.stance,
            d_goal,
            heading_error,
            d_obstacle,
            goal: env.goal,
        },
        visible,
    }
}

/// Max over disjoint 8x8 blocks, row-major.
pub fn pool(grid: &OccupancyGrid) -> [f64; POOLED] {
    let side = GRID_SIZE / POOL;
    let mut out = [0.0; POOLED];
    for (i, row) in grid.rows.iter().enumerate() {
        for bj in 0..side {
            if (row >> (bj * POOL)) & 0xff != 0 {
                out[(i / POOL) * side + bj] = 1.0;
            }
        }
    }
    out
}

pub fn proprio(s: &RawState) -> [f64; PROPRIO] {
    let d_o = s
        .d_obstacle
        .map_or(1.0, |d| (d / OBSTACLE_DISTANCE_SCALE).clamp(-1.0, 1.0));
    [
        s.com.x / POSITION_SCALE,
        s.com.y / POSITION_SCALE,
        s.velocity.x / VELOCITY_SCALE,
        s.velocity.y / VELOCITY_SCALE,
        s.theta / ANGLE_SCALE,
        s.stance.sign(),
        s.d_goal / GOAL_DISTANCE_SCALE,
        s.heading_error / ANGLE_SCALE,
        d_o,
        s.goal.x / POSITION_SCALE,
        s.goal.y / POSITION_SCALE,
    ]
}

pub fn encode(s: &RawState) -> Vec<f64> {
    let mut v = Vec::with_capacity(FEATURE_DIM);
    v.extend_from_slice(&pool(&s.grid));
    v.extend_from_slice(&proprio(s));
    v
}

mod grid_hex {
    use super::*;

    pub fn serialize<S: Serializer>(g: &OccupancyGrid, s: S) -> Result<S::Ok, S::Error> {
        let mut bytes = Vec::with_capacity(GRID_SIZE * 8);
        for r in &g.rows {
            bytes.extend_from_slice(&r.to_be_bytes());
        }
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<OccupancyGrid, D::Error> {
        use serde::de::Error;
        let text = String::deserialize(d)?;
        let bytes = hex::decode(text).map_err(D::Error::custom)?;
        if bytes.len() != GRID_SIZE * 8 {
            return Err(D::Error::custom("occupancy grid must be 512 bytes"));
        }
        let mut g = OccupancyGrid::empty();
        for (row, chunk) in g.rows.iter_mut().zip(bytes.chunks_exact(8)) {
            *row = u64::from_be_bytes(chunk.try_into().expect("chunk of 8"));
        }
        Ok(g)
    }
}
