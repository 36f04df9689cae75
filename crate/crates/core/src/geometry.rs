//! Obstacle worlds: shapes, signed distances, tangent half-planes, random
//! environment generation and robot-centric occupancy grids.

use std::f64::consts::{PI, TAU};

use nalgebra::{Rotation2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;

/// Planar footprint of the walker, modelled as a disc around the CoM.
pub const ROBOT_RADIUS: f64 = 0.3;
/// Clearance kept between obstacles and the start/goal during generation.
pub const GENERATION_CLEARANCE: f64 = 1.0;
pub const MAX_OBSTACLES: usize = 8;
const MAX_REJECTIONS: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("environment oversubscribed: no valid obstacle layout after {0} rejections")]
    Oversubscribed(usize),
    #[error("too many obstacles requested: {0} (max {MAX_OBSTACLES})")]
    TooManyObstacles(usize),
    #[error("invalid obstacle: {0}")]
    InvalidObstacle(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Obstacle {
    Circle {
        center: Vec2,
        radius: f64,
    },
    Ellipse {
        center: Vec2,
        semi_axes: Vec2,
        rotation: f64,
    },
    /// Convex polygon, vertices in counterclockwise order.
    Polygon { vertices: Vec<Vec2> },
}

/// Nearest boundary point of an obstacle as seen from a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryQuery {
    pub point: Vec2,
    /// Unit outward normal of the supporting line through `point`.
    pub normal: Vec2,
    /// Negative when the query point is inside the obstacle.
    pub signed_distance: f64,
}

impl Obstacle {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |msg: &str| Err(GeometryError::InvalidObstacle(msg.to_string()));
        match self {
            Obstacle::Circle { center, radius } => {
                if !(center.iter().all(|v| v.is_finite()) && *radius > 0.0 && radius.is_finite()) {
                    return bad("circle needs finite center and radius > 0");
                }
            }
            Obstacle::Ellipse {
                center,
                semi_axes,
                rotation,
            } => {
                if !(center.iter().all(|v| v.is_finite())
                    && semi_axes.iter().all(|a| *a > 0.0 && a.is_finite())
                    && rotation.is_finite())
                {
                    return bad("ellipse needs finite center/rotation and semi-axes > 0");
                }
            }
            Obstacle::Polygon { vertices } => {
                if vertices.len() < 3 {
                    return bad("polygon needs at least 3 vertices");
                }
                let n = vertices.len();
                for i in 0..n {
                    let a = vertices[i];
                    let b = vertices[(i + 1) % n];
                    let c = vertices[(i + 2) % n];
                    if cross(b - a, c - b) < 0.0 {
                        return bad("polygon must be convex and counterclockwise");
                    }
                }
                if polygon_area(vertices) <= 1e-6 {
                    return bad("polygon area is degenerate");
                }
            }
        }
        Ok(())
    }

    /// Closed point-membership test.
    pub fn contains(&self, p: Vec2) -> bool {
        match self {
            Obstacle::Circle { center, radius } => (p - center).norm_squared() <= radius * radius,
            Obstacle::Ellipse {
                center,
                semi_axes,
                rotation,
            } => {
                let l = Rotation2::new(-rotation) * (p - center);
                (l.x / semi_axes.x).powi(2) + (l.y / semi_axes.y).powi(2) <= 1.0
            }
            Obstacle::Polygon { vertices } => {
                let n = vertices.len();
                (0..n).all(|i| cross(vertices[(i + 1) % n] - vertices[i], p - vertices[i]) >= 0.0)
            }
        }
    }

    pub fn signed_distance(&self, p: Vec2) -> f64 {
        self.closest_boundary(p).signed_distance
    }

    pub fn closest_boundary(&self, p: Vec2) -> BoundaryQuery {
        match self {
            Obstacle::Circle { center, radius } => {
                let d = p - center;
                let r = d.norm();
                let normal = if r > 0.0 { d / r } else { Vec2::x() };
                BoundaryQuery {
                    point: center + normal * *radius,
                    normal,
                    signed_distance: r - radius,
                }
            }
            Obstacle::Ellipse {
                center,
                semi_axes,
                rotation,
            } => {
                let rot = Rotation2::new(*rotation);
                let local = rot.inverse() * (p - center);
                let (b, inside) = closest_on_ellipse(semi_axes.x, semi_axes.y, local);
                let dist = (local - b).norm();
                // gradient of the implicit function is the outward normal
                let g = Vec2::new(b.x / semi_axes.x.powi(2), b.y / semi_axes.y.powi(2));
                let normal = rot * (g / g.norm());
                BoundaryQuery {
                    point: center + rot * b,
                    normal,
                    signed_distance: if inside { -dist } else { dist },
                }
            }
            Obstacle::Polygon { vertices } => polygon_closest(vertices, p),
        }
    }

    /// Center and radius of a disc enclosing the obstacle.
    pub fn bounding_circle(&self) -> (Vec2, f64) {
        match self {
            Obstacle::Circle { center, radius } => (*center, *radius),
            Obstacle::Ellipse {
                center, semi_axes, ..
            } => (*center, semi_axes.x.max(semi_axes.y)),
            Obstacle::Polygon { vertices } => {
                let c = vertices.iter().fold(Vec2::zeros(), |acc, v| acc + v) / vertices.len() as f64;
                let r = vertices.iter().map(|v| (v - c).norm()).fold(0.0, f64::max);
                (c, r)
            }
        }
    }

    /// Axis-aligned rectangle as a convex polygon.
    pub fn rectangle(center: Vec2, half_extents: Vec2, rotation: f64) -> Obstacle {
        let rot = Rotation2::new(rotation);
        let corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
        Obstacle::Polygon {
            vertices: corners
                .iter()
                .map(|&(sx, sy)| center + rot * Vec2::new(sx * half_extents.x, sy * half_extents.y))
                .collect(),
        }
    }
}

fn cross(a: Vec2, b: Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

fn polygon_area(vertices: &[Vec2]) -> f64 {
    let n = vertices.len();
    0.5 * (0..n).map(|i| cross(vertices[i], vertices[(i + 1) % n])).sum::<f64>()
}

fn polygon_closest(vertices: &[Vec2], p: Vec2) -> BoundaryQuery {
    let n = vertices.len();
    let mut best = (f64::INFINITY, Vec2::zeros(), 0usize);
    for i in 0..n {
        let a = vertices[i];
        let e = vertices[(i + 1) % n] - a;
        let t = ((p - a).dot(&e) / e.norm_squared()).clamp(0.0, 1.0);
        let q = a + e * t;
        let d = (p - q).norm();
        if d < best.0 {
            best = (d, q, i);
        }
    }
    let (dist, point, edge) = best;
    let inside = vertices.len() >= 3
        && (0..n).all(|i| cross(vertices[(i + 1) % n] - vertices[i], p - vertices[i]) >= 0.0);
    let normal = if dist > 1e-12 {
        let d = (p - point) / dist;
        if inside {
            -d
        } else {
            d
        }
    } else {
        let e = vertices[(edge + 1) % n] - vertices[edge];
        Vec2::new(e.y, -e.x).normalize()
    };
    BoundaryQuery {
        point,
        normal,
        signed_distance: if inside { -dist } else { dist },
    }
}

/// Closest point on the ellipse `(x/a)^2 + (y/b)^2 = 1` to `y`, plus whether
/// `y` lies strictly inside. Bisection on the Lagrange root, accurate to
/// machine precision.
fn closest_on_ellipse(a: f64, b: f64, y: Vec2) -> (Vec2, bool) {
    let inside = (y.x / a).powi(2) + (y.y / b).powi(2) < 1.0;
    // the root solver wants e0 >= e1 and a first-quadrant point
    let (e0, e1, swap) = if a >= b { (a, b, false) } else { (b, a, true) };
    let (y0, y1) = if swap { (y.y.abs(), y.x.abs()) } else { (y.x.abs(), y.y.abs()) };
    let (x0, x1) = closest_on_ellipse_quadrant(e0, e1, y0, y1);
    let (mut px, mut py) = if swap { (x1, x0) } else { (x0, x1) };
    px = px.copysign(y.x);
    py = py.copysign(y.y);
    (Vec2::new(px, py), inside)
}

fn closest_on_ellipse_quadrant(e0: f64, e1: f64, y0: f64, y1: f64) -> (f64, f64) {
    if y1 > 0.0 {
        if y0 > 0.0 {
            let z0 = y0 / e0;
            let z1 = y1 / e1;
            let g = z0 * z0 + z1 * z1 - 1.0;
            if g != 0.0 {
                let r0 = (e0 / e1).powi(2);
                let s = ellipse_root(r0, z0, z1, g);
                (r0 * y0 / (s + r0), y1 / (s + 1.0))
            } else {
                (y0, y1)
            }
        } else {
            (0.0, e1)
        }
    } else {
        let numer = e0 * y0;
        let denom = e0 * e0 - e1 * e1;
        if numer < denom {
            let xde0 = numer / denom;
            (e0 * xde0, e1 * (1.0 - xde0 * xde0).max(0.0).sqrt())
        } else {
            (e0, 0.0)
        }
    }
}

fn ellipse_root(r0: f64, z0: f64, z1: f64, mut g: f64) -> f64 {
    let n0 = r0 * z0;
    let mut s0 = z1 - 1.0;
    let mut s1 = if g < 0.0 { 0.0 } else { n0.hypot(z1) - 1.0 };
    let mut s = 0.0;
    for _ in 0..1100 {
        s = 0.5 * (s0 + s1);
        if s == s0 || s == s1 {
            break;
        }
        let ratio0 = n0 / (s + r0);
        let ratio1 = z1 / (s + 1.0);
        g = ratio0 * ratio0 + ratio1 * ratio1 - 1.0;
        if g > 0.0 {
            s0 = s;
        } else if g < 0.0 {
            s1 = s;
        } else {
            break;
        }
    }
    s
}

/// Linear safety function `h(p) = n·(p - b) - inflation` built from the
/// tangent line of an obstacle at its point nearest to some reference
/// position. Positive on the safe side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfPlane {
    pub normal: Vec2,
    pub point: Vec2,
    pub inflation: f64,
    pub obstacle: usize,
}

impl HalfPlane {
    pub fn value(&self, p: Vec2) -> f64 {
        self.normal.dot(&(p - self.point)) - self.inflation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec2,
    pub max: Vec2,
}

impl Aabb {
    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }
}

impl Default for Aabb {
    fn default() -> Self {
        Aabb {
            min: Vec2::new(0.0, 0.0),
            max: Vec2::new(10.0, 10.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GoalPolicy {
    Random,
    Fixed(Vec2),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub id: u64,
    pub bounds: Aabb,
    pub start: Vec2,
    pub goal: Vec2,
    pub obstacles: Vec<Obstacle>,
}

/// Goals drawn at random keep at least this distance from the start.
pub const MIN_GOAL_DISTANCE: f64 = 5.0;
const GOAL_MARGIN: f64 = 0.5;

impl Environment {
    pub fn new(id: u64, start: Vec2, goal: Vec2, obstacles: Vec<Obstacle>) -> Result<Self, GeometryError> {
        for o in &obstacles {
            o.validate()?;
        }
        Ok(Environment {
            id,
            bounds: Aabb::default(),
            start,
            goal,
            obstacles,
        })
    }

    /// Exact Euclidean distance from `p` to the nearest obstacle boundary,
    /// negative inside. `+inf` for an empty world.
    pub fn min_obstacle_distance(&self, p: Vec2) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.signed_distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Same as [`Environment::min_obstacle_distance`] restricted to a subset.
    pub fn min_distance_among(&self, p: Vec2, visible: &[usize]) -> f64 {
        visible
            .iter()
            .map(|&i| self.obstacles[i].signed_distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn collides(&self, p: Vec2) -> bool {
        self.min_obstacle_distance(p) < ROBOT_RADIUS
    }

    /// True when the whole segment keeps `clearance` from every obstacle,
    /// checked at intervals of at most `resolution` meters.
    pub fn segment_clear(&self, a: Vec2, b: Vec2, clearance: f64, resolution: f64) -> bool {
        let len = (b - a).norm();
        let n = ((len / resolution).ceil() as usize).max(1);
        (0..=n).all(|i| self.min_obstacle_distance(a + (b - a) * (i as f64 / n as f64)) >= clearance)
    }

    /// Signed distance from `p` to the robot-radius-inflated tangent
    /// half-plane of the nearest obstacle. `None` for an obstacle-free world.
    pub fn half_plane_value(&self, p: Vec2) -> Option<f64> {
        self.nearest_half_planes(p, 1, None).first().map(|h| h.value(p))
    }

    /// Tangent half-planes of the `k` obstacles nearest to `p`, nearest
    /// first, ties broken by obstacle index. `subset` restricts the search.
    pub fn nearest_half_planes(&self, p: Vec2, k: usize, subset: Option<&[usize]>) -> Vec<HalfPlane> {
        let all: Vec<usize>;
        let indices = match subset {
            Some(s) => s,
            None => {
                all = (0..self.obstacles.len()).collect();
                &all
            }
        };
        let mut queries: Vec<(f64, usize, BoundaryQuery)> = indices
            .iter()
            .map(|&i| {
                let q = self.obstacles[i].closest_boundary(p);
                (q.signed_distance, i, q)
            })
            .collect();
        queries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        queries
            .into_iter()
            .take(k)
            .map(|(_, i, q)| HalfPlane {
                normal: q.normal,
                point: q.point,
                inflation: ROBOT_RADIUS,
                obstacle: i,
            })
            .collect()
    }

    pub fn render_local_grid(&self, position: Vec2, heading: f64) -> OccupancyGrid {
        self.render_local_view(position, heading).0
    }

    /// Renders the grid and reports which obstacles occupy at least one cell.
    pub fn render_local_view(&self, position: Vec2, heading: f64) -> (OccupancyGrid, Vec<usize>) {
        let mut grid = OccupancyGrid::empty();
        let mut visible = Vec::new();
        let rot = Rotation2::new(heading);
        for (k, obstacle) in self.obstacles.iter().enumerate() {
            let (c, r) = obstacle.bounding_circle();
            if (c - position).norm() > r + OccupancyGrid::HALF_DIAGONAL + 1e-9 {
                continue;
            }
            let mut hit = false;
            for i in 0..GRID_SIZE {
                for j in 0..GRID_SIZE {
                    let world = position + rot * OccupancyGrid::cell_center(i, j);
                    if obstacle.contains(world) {
                        grid.set(i, j);
                        hit = true;
                    }
                }
            }
            if hit {
                visible.push(k);
            }
        }
        (grid, visible)
    }
}

pub const GRID_SIZE: usize = 64;

/// 64x64 robot-centric binary map, heading aligned. Row `i` runs from the
/// front edge (4.5 m ahead) backwards; column `j` runs from the left edge
/// (3 m) to the right. One `u64` per row, bit `j` set when occupied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OccupancyGrid {
    pub rows: [u64; GRID_SIZE],
}

impl OccupancyGrid {
    pub const FORWARD_RANGE: f64 = 4.5;
    pub const BACKWARD_RANGE: f64 = 1.5;
    pub const HALF_WIDTH: f64 = 3.0;
    pub const RESOLUTION: f64 = 6.0 / GRID_SIZE as f64;
    // farthest cell corner from the robot: hypot(4.5, 3.0)
    const HALF_DIAGONAL: f64 = 5.408326913195984;

    pub fn empty() -> Self {
        OccupancyGrid { rows: [0; GRID_SIZE] }
    }

    /// Cell center in the robot frame (x forward, y left).
    pub fn cell_center(i: usize, j: usize) -> Vec2 {
        Vec2::new(
            Self::FORWARD_RANGE - (i as f64 + 0.5) * Self::RESOLUTION,
            Self::HALF_WIDTH - (j as f64 + 0.5) * Self::RESOLUTION,
        )
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.rows[i] >> j & 1 == 1
    }

    pub fn set(&mut self, i: usize, j: usize) {
        self.rows[i] |= 1 << j;
    }

    pub fn count_occupied(&self) -> u32 {
        self.rows.iter().map(|r| r.count_ones()).sum()
    }
}

fn wrap_angle(a: f64) -> f64 {
    crate::lip::wrap_angle(a)
}

fn sample_obstacle(rng: &mut ChaCha8Rng, bounds: &Aabb) -> Obstacle {
    let center = Vec2::new(
        rng.random_range(bounds.min.x..=bounds.max.x),
        rng.random_range(bounds.min.y..=bounds.max.y),
    );
    match rng.random_range(0..3u8) {
        0 => Obstacle::Circle {
            center,
            radius: rng.random_range(0.3..=0.8),
        },
        1 => Obstacle::Ellipse {
            center,
            semi_axes: Vec2::new(rng.random_range(0.3..=0.9), rng.random_range(0.3..=0.9)),
            rotation: wrap_angle(rng.random_range(0.0..PI)),
        },
        _ => {
            let k = rng.random_range(3..=6usize);
            let radius = rng.random_range(0.4..=0.9);
            let phase = rng.random_range(0.0..TAU);
            let sector = TAU / k as f64;
            let vertices = (0..k)
                .map(|i| {
                    let a = phase + sector * (i as f64 + rng.random_range(-0.25..=0.25));
                    center + Vec2::new(a.cos(), a.sin()) * radius
                })
                .collect();
            Obstacle::Polygon { vertices }
        }
    }
}

/// Deterministic random environment: start at the origin, obstacles of
/// random shape/size/placement inside the 10x10 m box, none closer than
/// [`GENERATION_CLEARANCE`] to the start or goal.
pub fn generate_environment(
    id: u64,
    seed: u64,
    n_obstacles: usize,
    goal_policy: GoalPolicy,
) -> Result<Environment, GeometryError> {
    if n_obstacles > MAX_OBSTACLES {
        return Err(GeometryError::TooManyObstacles(n_obstacles));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = Aabb::default();
    let start = Vec2::zeros();
    let goal = match goal_policy {
        GoalPolicy::Fixed(g) => g,
        GoalPolicy::Random => loop {
            let g = Vec2::new(
                rng.random_range(bounds.min.x + GOAL_MARGIN..=bounds.max.x - GOAL_MARGIN),
                rng.random_range(bounds.min.y + GOAL_MARGIN..=bounds.max.y - GOAL_MARGIN),
            );
            if (g - start).norm() >= MIN_GOAL_DISTANCE {
                break g;
            }
        },
    };
    let mut obstacles = Vec::with_capacity(n_obstacles);
    let mut rejections = 0;
    while obstacles.len() < n_obstacles {
        let o = sample_obstacle(&mut rng, &bounds);
        if o.signed_distance(start) >= GENERATION_CLEARANCE && o.signed_distance(goal) >= GENERATION_CLEARANCE {
            obstacles.push(o);
        } else {
            rejections += 1;
            if rejections >= MAX_REJECTIONS {
                return Err(GeometryError::Oversubscribed(rejections));
            }
        }
    }
    Ok(Environment {
        id,
        bounds,
        start,
        goal,
        obstacles,
    })
}

/// Recipe for a set of environments: `per_count` random worlds for every
/// entry of `obstacle_counts`, then the listed trap layouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub obstacle_counts: Vec<usize>,
    pub per_count: usize,
    /// Shared goal; random per environment when absent.
    pub goal: Option<Vec2>,
    pub traps: Vec<TrapLayout>,
}

impl SuiteSpec {
    /// 50 worlds, ten each with 0, 1, 2, 6 and 8 obstacles.
    pub fn training() -> Self {
        SuiteSpec {
            obstacle_counts: vec![0, 1, 2, 6, 8],
            per_count: 10,
            goal: None,
            traps: Vec::new(),
        }
    }

    /// 25 worlds with 8 obstacles and the goal at (10, 10).
    pub fn unseen() -> Self {
        SuiteSpec {
            obstacle_counts: vec![MAX_OBSTACLES],
            per_count: 25,
            goal: Some(Vec2::new(10.0, 10.0)),
            traps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.obstacle_counts.len() * self.per_count + self.traps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Builds every environment of `spec`; ids run from 0 in generation order.
pub fn generate_suite(spec: &SuiteSpec, seed: u64) -> Result<Vec<Environment>, GeometryError> {
    let policy = spec.goal.map_or(GoalPolicy::Random, GoalPolicy::Fixed);
    let mut envs = Vec::with_capacity(spec.len());
    for &n in &spec.obstacle_counts {
        for _ in 0..spec.per_count {
            let id = envs.len() as u64;
            let env_seed = seed.wrapping_add(id.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            envs.push(generate_environment(id, env_seed, n, policy)?);
        }
    }
    for &layout in &spec.traps {
        envs.push(trap_environment(envs.len() as u64, layout));
    }
    Ok(envs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrapLayout {
    /// U-shaped cup opening towards the start with the goal behind it.
    Cup,
    /// Long wall across the straight line to the goal.
    Wall,
}

/// Hand-built layouts in which walking straight at the goal ends in a local
/// minimum of the distance-to-goal objective.
pub fn trap_environment(id: u64, layout: TrapLayout) -> Environment {
    let start = Vec2::zeros();
    let (goal, obstacles) = match layout {
        TrapLayout::Cup => {
            // cup axis along the diagonal, opening towards the origin
            let axis = PI / 4.0;
            let rot = Rotation2::new(axis);
            let base = Vec2::new(5.0, 0.0);
            let to_world = |v: Vec2| rot * v;
            let obstacles = vec![
                Obstacle::rectangle(to_world(base), Vec2::new(0.15, 1.6), axis),
                Obstacle::rectangle(to_world(base + Vec2::new(-1.0, 1.45)), Vec2::new(1.0, 0.15), axis),
                Obstacle::rectangle(to_world(base + Vec2::new(-1.0, -1.45)), Vec2::new(1.0, 0.15), axis),
            ];
            (to_world(Vec2::new(8.5, 0.0)), obstacles)
        }
        TrapLayout::Wall => {
            let obstacles = vec![Obstacle::rectangle(Vec2::new(5.0, 0.0), Vec2::new(0.15, 2.6), 0.0)];
            (Vec2::new(8.5, 0.0), obstacles)
        }
    };
    Environment {
        id,
        bounds: Aabb::default(),
        start,
        goal,
        obstacles,
    }
}
