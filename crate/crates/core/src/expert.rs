//! RRT-guided expert: a global RRT path, a line-of-sight subgoal picker that
//! feeds the LIP-MPC, and demonstration collection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::Observation;
use crate::geometry::{Environment, Vec2, ROBOT_RADIUS};
use crate::lip::{wrap_angle, LipState};
use crate::lmpc::Subgoal;
use crate::replay::Transition;
use crate::reward::Outcome;
use crate::sim::{run_episode, EpisodeConfig, SubgoalPolicy};

#[derive(Debug, Error, PartialEq)]
pub enum ExpertError {
    #[error("no path found after {0} samples")]
    NoPath(usize),
    #[error("start position is not collision-free")]
    StartBlocked,
    #[error("no demonstrations: every episode in a full pass over {0} environments failed")]
    NoDemonstrations(usize),
    #[error("empty environment list")]
    NoEnvironments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrtConfig {
    pub step_size: f64,
    pub goal_bias: f64,
    pub max_samples: usize,
    pub edge_resolution: f64,
    /// Clearances tried in order; the first that yields a path wins.
    pub clearances: Vec<f64>,
    /// Samples are drawn from the environment bounds grown by this margin.
    pub sample_margin: f64,
    pub lookahead: f64,
    /// Clearance required along the line of sight to a subgoal.
    pub sight_clearance: f64,
    pub replan_deviation: f64,
    pub path_resolution: f64,
}

impl Default for RrtConfig {
    fn default() -> Self {
        RrtConfig {
            step_size: 0.5,
            goal_bias: 0.1,
            max_samples: 20_000,
            edge_resolution: 0.05,
            clearances: vec![ROBOT_RADIUS + 0.4, ROBOT_RADIUS + 0.2, ROBOT_RADIUS],
            sample_margin: 1.0,
            lookahead: Subgoal::MAX_DISTANCE,
            sight_clearance: ROBOT_RADIUS + 0.2,
            replan_deviation: 1.0,
            path_resolution: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RrtTree {
    pub nodes: Vec<Vec2>,
    pub parent: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RrtPlan {
    pub path: Vec<Vec2>,
    /// Tree path before shortcutting.
    pub raw_path: Vec<Vec2>,
    pub tree: RrtTree,
    pub clearance: f64,
    pub samples: usize,
}

fn grow(env: &Environment, start: Vec2, goal: Vec2, rng: &mut ChaCha8Rng, cfg: &RrtConfig, clearance: f64) -> (RrtTree, Option<Vec<Vec2>>, usize) {
    let mut tree = RrtTree {
        nodes: vec![start],
        parent: vec![None],
    };
    let lo = env.bounds.min.add_scalar(-cfg.sample_margin);
    let hi = env.bounds.max.add_scalar(cfg.sample_margin);
    let clear = |a: Vec2, b: Vec2| env.segment_clear(a, b, clearance, cfg.edge_resolution);
    for sample in 1..=cfg.max_samples {
        let target = if rng.random_bool(cfg.goal_bias) {
            goal
        } else {
            Vec2::new(rng.random_range(lo.x..hi.x), rng.random_range(lo.y..hi.y))
        };
        let (nearest, _) = tree
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (i, (n - target).norm_squared()))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        let from = tree.nodes[nearest];
        let delta = target - from;
        let dist = delta.norm();
        if dist < 1e-9 {
            continue;
        }
        let to = if dist > cfg.step_size { from + delta * (cfg.step_size / dist) } else { target };
        if !clear(from, to) {
            continue;
        }
        tree.nodes.push(to);
        tree.parent.push(Some(nearest));
        let new = tree.nodes.len() - 1;
        if (goal - to).norm() <= cfg.step_size && clear(to, goal) {
            tree.nodes.push(goal);
            tree.parent.push(Some(new));
            let mut path = Vec::new();
            let mut cur = Some(tree.nodes.len() - 1);
            while let Some(i) = cur {
                path.push(tree.nodes[i]);
                cur = tree.parent[i];
            }
            path.reverse();
            return (tree, Some(path), sample);
        }
    }
    (tree, None, cfg.max_samples)
}

/// Greedy shortcutting: from each kept waypoint jump to the farthest later
/// waypoint that is directly reachable.
pub fn shortcut(env: &Environment, path: &[Vec2], clearance: f64, resolution: f64) -> Vec<Vec2> {
    if path.len() <= 2 {
        return path.to_vec();
    }
    let mut out = vec![path[0]];
    let mut i = 0;
    while i + 1 < path.len() {
        let mut j = path.len() - 1;
        while j > i + 1 && !env.segment_clear(path[i], path[j], clearance, resolution) {
            j -= 1;
        }
        out.push(path[j]);
        i = j;
    }
    out
}

/// Plans a collision-free polyline from `start` to `goal`. Deterministic in
/// `seed`.
pub fn rrt_plan(env: &Environment, start: Vec2, goal: Vec2, seed: u64, cfg: &RrtConfig) -> Result<RrtPlan, ExpertError> {
    let start_clearance = env.min_obstacle_distance(start);
    if start_clearance < ROBOT_RADIUS {
        return Err(ExpertError::StartBlocked);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0;
    for &clearance in &cfg.clearances {
        if clearance > start_clearance || clearance > env.min_obstacle_distance(goal) {
            continue;
        }
        let (tree, raw, samples) = grow(env, start, goal, &mut rng, cfg, clearance);
        total += samples;
        if let Some(raw_path) = raw {
            return Ok(RrtPlan {
                path: shortcut(env, &raw_path, clearance, cfg.edge_resolution),
                raw_path,
                tree,
                clearance,
                samples: total,
            });
        }
    }
    Err(ExpertError::NoPath(total))
}

/// Points along the polyline every `resolution` meters, with their arc
/// length. Always includes the final vertex.
pub fn resample(path: &[Vec2], resolution: f64) -> Vec<(f64, Vec2)> {
    let mut out = vec![(0.0, path[0])];
    let mut s0 = 0.0;
    for w in path.windows(2) {
        let len = (w[1] - w[0]).norm();
        let n = (len / resolution).ceil() as usize;
        for k in 1..=n {
            let t = k as f64 / n as f64;
            out.push((s0 + t * len, w[0] + (w[1] - w[0]) * t));
        }
        s0 += len;
    }
    out
}

pub fn distance_to_path(path: &[Vec2], p: Vec2) -> f64 {
    if path.len() == 1 {
        return (path[0] - p).norm();
    }
    path.windows(2)
        .map(|w| {
            let e = w[1] - w[0];
            let t = ((p - w[0]).dot(&e) / e.norm_squared().max(1e-18)).clamp(0.0, 1.0);
            (w[0] + e * t - p).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubgoalPick {
    pub subgoal: Subgoal,
    pub point: Vec2,
    /// False when no visible point was found and the nearest was used.
    pub visible: bool,
}

pub fn subgoal_towards(point: Vec2, com: Vec2, theta: f64) -> Subgoal {
    let d = point - com;
    Subgoal::new(d.norm(), wrap_angle(d.y.atan2(d.x) - theta))
}

/// Farthest path point (by arc length) within the lookahead that the robot
/// can see with its body clear; the nearest path point otherwise.
pub fn extract_subgoal(env: &Environment, path: &[Vec2], com: Vec2, theta: f64, cfg: &RrtConfig) -> SubgoalPick {
    assert!(!path.is_empty(), "extract_subgoal needs a path");
    let points = resample(path, cfg.path_resolution);
    for &(_, p) in points.iter().rev() {
        if (p - com).norm() <= cfg.lookahead && env.segment_clear(com, p, cfg.sight_clearance, cfg.edge_resolution) {
            return SubgoalPick {
                subgoal: subgoal_towards(p, com, theta),
                point: p,
                visible: true,
            };
        }
    }
    let (_, nearest) = points
        .iter()
        .map(|&(_, p)| ((p - com).norm(), p))
        .fold((f64::INFINITY, com), |b, c| if c.0 < b.0 { c } else { b });
    SubgoalPick {
        subgoal: subgoal_towards(nearest, com, theta),
        point: nearest,
        visible: false,
    }
}

/// RRT path following through the LIP-MPC.
#[derive(Debug, Clone)]
pub struct RrtLmpc {
    pub config: RrtConfig,
    pub path: Vec<Vec2>,
    pub replans: usize,
    pub hidden_fallbacks: usize,
    pub planning_failures: usize,
    seed: u64,
}

impl RrtLmpc {
    pub fn new(config: RrtConfig) -> Self {
        RrtLmpc {
            config,
            path: Vec::new(),
            replans: 0,
            hidden_fallbacks: 0,
            planning_failures: 0,
            seed: 0,
        }
    }

    fn plan_from(&mut self, env: &Environment, from: Vec2) {
        let seed = self.seed.wrapping_add(self.replans as u64);
        match rrt_plan(env, from, env.goal, seed, &self.config) {
            Ok(plan) => self.path = plan.path,
            Err(_) => {
                self.planning_failures += 1;
                // head straight for the goal and let the episode decide
                self.path = vec![from, env.goal];
            }
        }
    }
}

impl SubgoalPolicy for RrtLmpc {
    fn name(&self) -> String {
        "rrt-lmpc".into()
    }

    fn reset(&mut self, env: &Environment, seed: u64) {
        self.seed = seed;
        self.replans = 0;
        self.hidden_fallbacks = 0;
        self.planning_failures = 0;
        self.plan_from(env, env.start);
    }

    fn act(&mut self, env: &Environment, x: &LipState, _obs: &Observation) -> Subgoal {
        let com = x.com();
        if distance_to_path(&self.path, com) > self.config.replan_deviation {
            self.replans += 1;
            self.plan_from(env, com);
        }
        let pick = extract_subgoal(env, &self.path, com, x.theta, &self.config);
        if !pick.visible {
            self.hidden_fallbacks += 1;
        }
        pick.subgoal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoEpisode {
    pub env_id: u64,
    pub seed: u64,
    /// `None` when the expert could not plan at all.
    pub outcome: Option<Outcome>,
    pub steps: usize,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoDataset {
    pub source: String,
    pub seed: u64,
    pub env_ids: Vec<u64>,
    pub episodes: Vec<DemoEpisode>,
    pub transitions: Vec<Transition>,
}

/// Runs expert episodes round-robin over `envs` until `n_target`
/// transitions are gathered, then truncates to exactly `n_target`.
pub fn collect_demonstrations(
    envs: &[Environment],
    n_target: usize,
    seed: u64,
    expert: &RrtConfig,
    episode: &EpisodeConfig,
    include_failures: bool,
) -> Result<DemoDataset, ExpertError> {
    if envs.is_empty() {
        return Err(ExpertError::NoEnvironments);
    }
    let mut data = DemoDataset {
        source: "rrt-lmpc".into(),
        seed,
        env_ids: envs.iter().map(|e| e.id).collect(),
        episodes: Vec::new(),
        transitions: Vec::new(),
    };
    let mut dry = 0;
    let mut e = 0u64;
    while data.transitions.len() < n_target {
        let env = &envs[(e % envs.len() as u64) as usize];
        let ep_seed = seed.wrapping_add(e);
        e += 1;
        if rrt_plan(env, env.start, env.goal, ep_seed, expert).is_err() {
            data.episodes.push(DemoEpisode {
                env_id: env.id,
                seed: ep_seed,
                outcome: None,
                steps: 0,
                kept: false,
            });
            dry += 1;
        } else {
            let mut policy = RrtLmpc::new(expert.clone());
            let mut steps = Vec::new();
            let trace = run_episode(env, &mut policy, episode, ep_seed, &mut |t| steps.push(t.clone()));
            let kept = include_failures || trace.success();
            data.episodes.push(DemoEpisode {
                env_id: env.id,
                seed: ep_seed,
                outcome: Some(trace.outcome),
                steps: trace.len(),
                kept,
            });
            if kept && !steps.is_empty() {
                dry = 0;
                for mut t in steps {
                    t.demo = true;
                    data.transitions.push(t);
                }
            } else {
                dry += 1;
            }
        }
        if dry >= envs.len() {
            return Err(ExpertError::NoDemonstrations(envs.len()));
        }
    }
    data.transitions.truncate(n_target);
    Ok(data)
}
