//! Episode loop: one subgoal per walking step, one LIP-MPC step per subgoal.

use std::time::Instant;

use nalgebra::Rotation2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{goal_geometry, observe, Observation};
use crate::geometry::Environment;
use crate::lip::{self, GaitControl, LipParams, LipState, Stance};
use crate::lmpc::{MpcConfig, MpcDiagnostics, Planner, Subgoal};
use crate::replay::Transition;
use crate::reward::{breakdown, Outcome, RewardBreakdown, RewardParams, StepContext};
use crate::sac::Sac;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub n_max: usize,
    pub goal_radius: f64,
    /// Lateral offset of the CoM from the stance foot at the start.
    pub start_half_width: f64,
    pub start_heading: f64,
    /// Points per step at which the CoM path is checked for collisions.
    pub collision_substeps: usize,
    pub mpc: MpcConfig,
    pub reward: RewardParams,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            n_max: 100,
            goal_radius: 0.3,
            start_half_width: 0.1,
            start_heading: 0.0,
            collision_substeps: 4,
            mpc: MpcConfig::default(),
            reward: RewardParams::default(),
        }
    }
}

pub trait SubgoalPolicy {
    fn name(&self) -> String;

    fn reset(&mut self, _env: &Environment, _seed: u64) {}

    fn act(&mut self, env: &Environment, x: &LipState, obs: &Observation) -> Subgoal;
}

/// Aims straight at the goal: no subgoals, only the LIP-MPC.
#[derive(Debug, Clone, Default)]
pub struct LmpcDirect;

impl SubgoalPolicy for LmpcDirect {
    fn name(&self) -> String {
        "lmpc-direct".into()
    }

    fn act(&mut self, _env: &Environment, _x: &LipState, obs: &Observation) -> Subgoal {
        Subgoal::new(obs.raw.d_goal.min(Subgoal::MAX_DISTANCE), obs.raw.heading_error)
    }
}

/// Learned policy; the mean action unless `stochastic`.
pub struct SacPolicy<'a> {
    pub sac: &'a Sac,
    pub stochastic: bool,
    pub label: String,
    rng: ChaCha8Rng,
}

impl<'a> SacPolicy<'a> {
    pub fn new(sac: &'a Sac, stochastic: bool, label: impl Into<String>) -> Self {
        SacPolicy {
            sac,
            stochastic,
            label: label.into(),
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl SubgoalPolicy for SacPolicy<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn reset(&mut self, _env: &Environment, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn act(&mut self, _env: &Environment, _x: &LipState, obs: &Observation) -> Subgoal {
        let noise = self.stochastic.then(|| Sac::draw_noise(&mut self.rng, 1)[0]);
        self.sac.act(&obs.raw, noise).subgoal()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub state: LipState,
    pub subgoal: Subgoal,
    pub control: Option<GaitControl>,
    pub next_state: LipState,
    pub reward: RewardBreakdown,
    /// Half-plane value after the step, nearest visible obstacle.
    pub h: Option<f64>,
    pub d_goal: f64,
    pub mpc: Option<MpcDiagnostics>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub env_id: u64,
    pub method: String,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub outcome: Outcome,
    pub total_reward: f64,
    /// Policy inference time per step, microseconds. Not serialized.
    #[serde(skip)]
    pub policy_wall_us: Vec<f64>,
}

impl EpisodeTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn success(&self) -> bool {
        self.outcome == Outcome::Goal
    }

    /// Walking time to the goal, successful episodes only.
    pub fn goal_time(&self, params: &LipParams) -> Option<f64> {
        self.success().then(|| self.steps.len() as f64 * params.step_duration)
    }

    pub fn mpc_wall_us(&self) -> Vec<f64> {
        self.steps.iter().filter_map(|s| s.mpc.as_ref().map(|d| d.wall_time_us)).collect()
    }
}

pub fn initial_state(env: &Environment, cfg: &EpisodeConfig) -> LipState {
    LipState::standing(env.start, cfg.start_heading, Stance::Left, cfg.start_half_width, &cfg.mpc.lip)
}

fn visible_h(env: &Environment, obs: &Observation) -> Option<f64> {
    env.nearest_half_planes(obs.raw.com, 1, Some(&obs.visible))
        .first()
        .map(|h| h.value(obs.raw.com))
}

/// Average CoM velocity over the step, in the frame of the mid-step heading.
pub fn step_velocity(x: &LipState, next: &LipState, control: Option<&GaitControl>, params: &LipParams) -> [f64; 2] {
    let Some(u) = control else { return [0.0, 0.0] };
    let mid = x.theta + 0.5 * u.omega * params.step_duration;
    let v = Rotation2::new(-mid) * ((next.com() - x.com()) / params.step_duration);
    [v.x, v.y]
}

fn swept_collision(env: &Environment, x: &LipState, params: &LipParams, substeps: usize) -> bool {
    (1..=substeps.max(1)).any(|k| {
        let t = params.step_duration * k as f64 / substeps.max(1) as f64;
        let (q, _) = lip::evolve(x.q, x.v, t, params);
        env.collides(x.stance_foot + q)
    })
}

/// Reward context for a step, rebuilt from the logged states alone.
#[allow(clippy::too_many_arguments)]
pub fn step_context(
    env: &Environment,
    x: &LipState,
    next: &LipState,
    control: Option<&GaitControl>,
    subgoal: Subgoal,
    prev_subgoal: Subgoal,
    outcome: Outcome,
    n_step: usize,
    params: &LipParams,
) -> StepContext {
    let before = observe(env, x);
    let after = observe(env, next);
    StepContext {
        d_goal: after.raw.d_goal,
        d_goal_prev: before.raw.d_goal,
        heading_error: after.raw.heading_error,
        action: subgoal,
        action_prev: prev_subgoal,
        velocity: step_velocity(x, next, control, params),
        h: visible_h(env, &after),
        h_prev: visible_h(env, &before),
        outcome,
        n_step,
    }
}

/// Runs one episode. `on_step` sees every transition as it happens.
pub fn run_episode(
    env: &Environment,
    policy: &mut dyn SubgoalPolicy,
    cfg: &EpisodeConfig,
    seed: u64,
    on_step: &mut dyn FnMut(&Transition),
) -> EpisodeTrace {
    let params = cfg.mpc.lip;
    let mut planner = Planner::new(cfg.mpc.clone());
    let mut x = initial_state(env, cfg);
    policy.reset(env, seed);
    let mut obs = observe(env, &x);
    let mut h_prev = visible_h(env, &obs);
    let mut prev_action = Subgoal::new(0.0, 0.0);
    let mut trace = EpisodeTrace {
        env_id: env.id,
        method: policy.name(),
        seed,
        steps: Vec::new(),
        outcome: Outcome::Running,
        total_reward: 0.0,
        policy_wall_us: Vec::new(),
    };
    for t in 0..cfg.n_max {
        let started = Instant::now();
        let subgoal = policy.act(env, &x, &obs);
        trace.policy_wall_us.push(started.elapsed().as_secs_f64() * 1e6);

        let half_planes = env.nearest_half_planes(x.com(), obs.visible.len(), Some(&obs.visible));
        let (next, control, mpc, fell) = match planner.plan(&x, &subgoal, &half_planes) {
            Ok(plan) => {
                let next = plan.states[0];
                (next, Some(plan.control), Some(plan.diagnostics), next.exceeds_envelope())
            }
            Err(_) => (x, None, None, true),
        };
        let collided = control.is_some() && swept_collision(env, &x, &params, cfg.collision_substeps);
        let next_obs = observe(env, &next);
        let h = visible_h(env, &next_obs);
        let outcome = if collided {
            Outcome::Collision
        } else if fell {
            Outcome::Fall
        } else if next_obs.raw.d_goal < cfg.goal_radius {
            Outcome::Goal
        } else if t + 1 >= cfg.n_max {
            Outcome::Timeout
        } else {
            Outcome::Running
        };
        let ctx = StepContext {
            d_goal: next_obs.raw.d_goal,
            d_goal_prev: obs.raw.d_goal,
            heading_error: next_obs.raw.heading_error,
            action: subgoal,
            action_prev: prev_action,
            velocity: step_velocity(&x, &next, control.as_ref(), &params),
            h,
            h_prev,
            outcome,
            n_step: t + 1,
        };
        let reward = breakdown(&ctx, &cfg.reward);
        on_step(&Transition {
            state: obs.raw.clone(),
            action: subgoal,
            reward: reward.total,
            next_state: next_obs.raw.clone(),
            done: outcome.is_terminal(),
            demo: false,
        });
        trace.total_reward += reward.total;
        trace.steps.push(StepRecord {
            step: t,
            state: x,
            subgoal,
            control,
            next_state: next,
            reward,
            h,
            d_goal: next_obs.raw.d_goal,
            mpc,
            outcome,
        });
        if outcome.is_terminal() {
            trace.outcome = outcome;
            break;
        }
        x = next;
        obs = next_obs;
        h_prev = h;
        prev_action = subgoal;
    }
    trace
}

/// Reward breakdowns recomputed from the logged states of a trace.
pub fn recompute_rewards(env: &Environment, trace: &EpisodeTrace, cfg: &EpisodeConfig) -> Vec<(RewardBreakdown, f64, Option<f64>)> {
    let mut prev = Subgoal::new(0.0, 0.0);
    trace
        .steps
        .iter()
        .map(|s| {
            let ctx = step_context(env, &s.state, &s.next_state, s.control.as_ref(), s.subgoal, prev, s.outcome, s.step + 1, &cfg.mpc.lip);
            prev = s.subgoal;
            let (d_goal, _) = goal_geometry(s.next_state.com(), s.next_state.theta, env.goal);
            (breakdown(&ctx, &cfg.reward), d_goal, ctx.h)
        })
        .collect()
}

pub fn episode_seed(seed: u64, trial: usize, env_id: u64) -> u64 {
    seed.wrapping_add((trial as u64).wrapping_mul(1_000_003)).wrapping_add(env_id)
}

/// Runs `trials` passes over `suite`; `traces[trial][env]`.
pub fn evaluate(
    policy: &mut dyn SubgoalPolicy,
    suite: &[Environment],
    trials: usize,
    seed: u64,
    cfg: &EpisodeConfig,
) -> Vec<Vec<EpisodeTrace>> {
    (0..trials)
        .map(|trial| {
            suite
                .iter()
                .map(|env| run_episode(env, policy, cfg, episode_seed(seed, trial, env.id), &mut |_| {}))
                .collect()
        })
        .collect()
}

/// `evaluate` spread over `workers` threads, each with its own policy from
/// `make`. Episodes are independent, so the result equals the serial run.
pub fn evaluate_parallel<'a>(
    make: &(dyn Fn() -> Box<dyn SubgoalPolicy + 'a> + Sync),
    suite: &[Environment],
    trials: usize,
    seed: u64,
    cfg: &EpisodeConfig,
    workers: usize,
) -> Vec<Vec<EpisodeTrace>> {
    let jobs: Vec<(usize, usize)> = (0..trials).flat_map(|t| (0..suite.len()).map(move |e| (t, e))).collect();
    let workers = workers.clamp(1, jobs.len().max(1));
    let mut done: Vec<(usize, EpisodeTrace)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let jobs = &jobs;
                scope.spawn(move || {
                    let mut policy = make();
                    jobs.iter()
                        .enumerate()
                        .skip(w)
                        .step_by(workers)
                        .map(|(i, &(trial, e))| {
                            let env = &suite[e];
                            (i, run_episode(env, policy.as_mut(), cfg, episode_seed(seed, trial, env.id), &mut |_| {}))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    done.sort_by_key(|(i, _)| *i);
    let mut it = done.into_iter().map(|(_, t)| t);
    (0..trials).map(|_| it.by_ref().take(suite.len()).collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub success_rate: f64,
    pub mean_reward: f64,
    pub mean_goal_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub method: String,
    pub trials: Vec<TrialMetrics>,
    /// Percent.
    pub success_mean: f64,
    pub success_std: f64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub time_ratio: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn metrics_from_traces(method: &str, traces: &[Vec<EpisodeTrace>], params: &LipParams) -> Metrics {
    let trials: Vec<TrialMetrics> = traces
        .iter()
        .map(|episodes| {
            let n = episodes.len() as f64;
            let times: Vec<f64> = episodes.iter().filter_map(|e| e.goal_time(params)).collect();
            TrialMetrics {
                success_rate: 100.0 * episodes.iter().filter(|e| e.success()).count() as f64 / n,
                mean_reward: episodes.iter().map(|e| e.total_reward).sum::<f64>() / n,
                mean_goal_time: (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64),
            }
        })
        .collect();
    let (success_mean, success_std) = mean_std(&trials.iter().map(|t| t.success_rate).collect::<Vec<_>>());
    let (reward_mean, reward_std) = mean_std(&trials.iter().map(|t| t.mean_reward).collect::<Vec<_>>());
    Metrics {
        method: method.to_string(),
        trials,
        success_mean,
        success_std,
        reward_mean,
        reward_std,
        time_ratio: None,
    }
}

/// Mean goal time of `method` over episodes where both it and `reference`
/// succeed (same trial and environment), divided by the reference's mean
/// over the same episodes. `None` without a common success.
pub fn time_ratio(method: &[Vec<EpisodeTrace>], reference: &[Vec<EpisodeTrace>], params: &LipParams) -> Option<f64> {
    let (mut a, mut b, mut n) = (0.0, 0.0, 0usize);
    for (tm, tr) in method.iter().zip(reference) {
        for (em, er) in tm.iter().zip(tr) {
            if let (Some(x), Some(y)) = (em.goal_time(params), er.goal_time(params)) {
                a += x;
                b += y;
                n += 1;
            }
        }
    }
    (n > 0).then(|| a / b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{trap_environment, TrapLayout, Vec2};

    fn open_env(goal: Vec2) -> Environment {
        Environment::new(0, Vec2::zeros(), goal, vec![]).unwrap()
    }

    #[test]
    fn direct_walks_three_meters_quickly() {
        let env = open_env(Vec2::new(3.0, 0.0));
        let cfg = EpisodeConfig::default();
        let trace = run_episode(&env, &mut LmpcDirect, &cfg, 0, &mut |_| {});
        assert_eq!(trace.outcome, Outcome::Goal);
        assert!(trace.len() <= 20, "{} steps", trace.len());
        assert!(trace.steps.last().unwrap().d_goal < cfg.goal_radius);
    }

    #[test]
    fn direct_turns_towards_a_goal_behind() {
        let env = open_env(Vec2::new(-4.0, 1.0));
        let trace = run_episode(&env, &mut LmpcDirect, &EpisodeConfig::default(), 0, &mut |_| {});
        assert_eq!(trace.outcome, Outcome::Goal);
    }

    #[test]
    fn direct_gets_stuck_behind_a_wall() {
        let env = trap_environment(0, TrapLayout::Cup);
        let trace = run_episode(&env, &mut LmpcDirect, &EpisodeConfig::default(), 0, &mut |_| {});
        assert!(matches!(trace.outcome, Outcome::Timeout | Outcome::Collision | Outcome::Fall), "{:?}", trace.outcome);
    }

    #[test]
    fn direct_stalls_in_front_of_a_wall_until_timeout() {
        let env = trap_environment(0, TrapLayout::Wall);
        let trace = run_episode(&env, &mut LmpcDirect, &EpisodeConfig::default(), 0, &mut |_| {});
        assert_eq!(trace.outcome, Outcome::Timeout);
        assert!(trace.steps.iter().all(|s| s.h.is_none_or(|h| h > 0.0)));
    }

    #[test]
    fn trace_bookkeeping() {
        let env = trap_environment(3, TrapLayout::Wall);
        let cfg = EpisodeConfig::default();
        let mut transitions = Vec::new();
        let trace = run_episode(&env, &mut LmpcDirect, &cfg, 0, &mut |t| transitions.push(t.clone()));
        assert_eq!(transitions.len(), trace.len());
        // exactly one terminal record, at the end
        let terminal: Vec<usize> = trace.steps.iter().enumerate().filter(|(_, s)| s.outcome.is_terminal()).map(|(i, _)| i).collect();
        assert_eq!(terminal, vec![trace.len() - 1]);
        let sum: f64 = trace.steps.iter().map(|s| s.reward.total).sum();
        assert!((sum - trace.total_reward).abs() < 1e-12);
        for (s, (r, d, h)) in trace.steps.iter().zip(recompute_rewards(&env, &trace, &cfg)) {
            assert!((r.total - s.reward.total).abs() < 1e-12);
            assert!((d - s.d_goal).abs() < 1e-12);
            assert_eq!(h.is_some(), s.h.is_some());
            if let (Some(a), Some(b)) = (h, s.h) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for w in transitions.windows(2) {
            assert_eq!(w[0].next_state, w[1].state);
        }
    }

    #[test]
    fn reference_against_itself_has_unit_time_ratio() {
        let suite = vec![open_env(Vec2::new(3.0, 0.0)), open_env(Vec2::new(2.0, 4.0))];
        let cfg = EpisodeConfig::default();
        let traces = evaluate(&mut LmpcDirect, &suite, 2, 5, &cfg);
        assert_eq!(time_ratio(&traces, &traces, &cfg.mpc.lip), Some(1.0));
        let m = metrics_from_traces("lmpc-direct", &traces, &cfg.mpc.lip);
        assert_eq!(m.success_mean, 100.0);
        assert_eq!(m.success_std, 0.0);
        assert_eq!(m, metrics_from_traces("lmpc-direct", &traces.clone(), &cfg.mpc.lip));
    }

    #[test]
    fn parallel_evaluation_matches_serial() {
        let suite = vec![trap_environment(0, TrapLayout::Wall), open_env(Vec2::new(3.0, 1.0))];
        let cfg = EpisodeConfig { n_max: 15, ..EpisodeConfig::default() };
        let serial = evaluate(&mut LmpcDirect, &suite, 2, 4, &cfg);
        let make = || Box::new(LmpcDirect) as Box<dyn SubgoalPolicy>;
        let par = evaluate_parallel(&make, &suite, 2, 4, &cfg, 3);
        assert_eq!(serde_json::to_string(&serial).unwrap(), serde_json::to_string(&par).unwrap());
    }

    #[test]
    fn episodes_are_deterministic() {
        let env = trap_environment(1, TrapLayout::Wall);
        let cfg = EpisodeConfig::default();
        let a = run_episode(&env, &mut LmpcDirect, &cfg, 3, &mut |_| {});
        let b = run_episode(&env, &mut LmpcDirect, &cfg, 3, &mut |_| {});
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
