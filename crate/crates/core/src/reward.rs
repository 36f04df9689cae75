//! Step reward: five weighted sub-rewards plus a terminal bonus or penalty.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, FRAC_PI_6};

use serde::{Deserialize, Serialize};

use crate::lmpc::Subgoal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    /// Goal, heading, action, velocity, obstacle.
    pub weights: [f64; 5],
    pub a_g: f64,
    pub b_g: f64,
    pub a_theta: f64,
    pub heading_window: f64,
    pub q_a: f64,
    pub q_v: f64,
    pub a_v: f64,
    pub b_v: f64,
    pub lateral_speed_limit: f64,
    pub zeta: f64,
    /// Half-plane values are divided by this before use.
    pub h_scale: f64,
    pub goal_radius: f64,
    pub n_max: usize,
    pub goal_bonus: f64,
    pub goal_base: f64,
    pub goal_decay: f64,
    pub failure_penalty: f64,
    pub timeout_penalty: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            weights: [0.2, 0.1, 0.25, 0.2, 0.25],
            a_g: 2.33,
            b_g: 0.3,
            a_theta: 1.39,
            heading_window: FRAC_PI_6,
            q_a: 0.5,
            q_v: 0.7,
            a_v: 15.0,
            b_v: 0.5,
            lateral_speed_limit: 0.4,
            zeta: 0.4,
            h_scale: 3.0,
            goal_radius: 0.3,
            n_max: 100,
            goal_bonus: 60.0,
            goal_base: 40.0,
            goal_decay: 0.4,
            failure_penalty: -80.0,
            timeout_penalty: -70.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Running,
    Goal,
    Collision,
    Fall,
    Timeout,
}

impl Outcome {
    pub fn is_terminal(self) -> bool {
        self != Outcome::Running
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepContext {
    pub d_goal: f64,
    pub d_goal_prev: f64,
    pub heading_error: f64,
    pub action: Subgoal,
    pub action_prev: Subgoal,
    /// Robot-frame velocity `(v_x, v_y)`.
    pub velocity: [f64; 2],
    /// Half-plane value of the nearest visible obstacle; `None` when the
    /// local window is empty.
    pub h: Option<f64>,
    pub h_prev: Option<f64>,
    pub outcome: Outcome,
    pub n_step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub goal: f64,
    pub heading: f64,
    pub action: f64,
    pub velocity: f64,
    pub obstacle: f64,
    pub terminal: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn components(&self) -> [f64; 5] {
        [self.goal, self.heading, self.action, self.velocity, self.obstacle]
    }
}

fn unit(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn r_goal(ctx: &StepContext, p: &RewardParams) -> f64 {
    let progress = ctx.d_goal_prev - ctx.d_goal;
    if progress >= 0.0 {
        unit(p.b_g + p.a_g * progress)
    } else {
        0.0
    }
}

pub fn r_heading(ctx: &StepContext, p: &RewardParams) -> f64 {
    let e = ctx.heading_error.abs();
    if e <= p.heading_window {
        unit(1.0 - p.a_theta * e.powi(3))
    } else {
        0.0
    }
}

pub fn r_action(ctx: &StepContext, p: &RewardParams) -> f64 {
    let a = ctx.action;
    let prev = ctx.action_prev;
    let progress = unit(a.distance / Subgoal::MAX_DISTANCE - a.bearing.abs() / FRAC_PI_4);
    let smooth = unit(
        1.0 - 0.5 * ((a.distance - prev.distance).abs() / Subgoal::MAX_DISTANCE + (a.bearing - prev.bearing).abs() / FRAC_PI_2),
    );
    unit(p.q_a * progress + (1.0 - p.q_a) * smooth)
}

pub fn r_velocity(ctx: &StepContext, p: &RewardParams) -> f64 {
    let [vx, vy] = ctx.velocity;
    let forward = sigmoid(p.a_v * (vx - p.b_v));
    let lateral = if vy.abs() <= p.lateral_speed_limit { 1.0 } else { 0.0 };
    unit(p.q_v * forward + (1.0 - p.q_v) * lateral)
}

pub fn r_obstacle(ctx: &StepContext, p: &RewardParams) -> f64 {
    let Some(h) = ctx.h else { return 1.0 };
    let norm = |h: f64| unit(h / p.h_scale);
    // an obstacle that just came into view is measured against a clear past
    let prev = ctx.h_prev.map_or(1.0, norm);
    unit(norm(h) + (p.zeta - 1.0) * prev)
}

pub fn terminal_reward(ctx: &StepContext, p: &RewardParams) -> f64 {
    match ctx.outcome {
        Outcome::Running => 0.0,
        Outcome::Goal => p.goal_bonus * (-p.goal_decay * ctx.n_step as f64 / p.n_max as f64).exp() + p.goal_base,
        Outcome::Collision | Outcome::Fall => p.failure_penalty,
        Outcome::Timeout => p.timeout_penalty,
    }
}

pub fn breakdown(ctx: &StepContext, p: &RewardParams) -> RewardBreakdown {
    let parts = [r_goal(ctx, p), r_heading(ctx, p), r_action(ctx, p), r_velocity(ctx, p), r_obstacle(ctx, p)];
    let terminal = terminal_reward(ctx, p);
    let shaped: f64 = parts.iter().zip(&p.weights).map(|(r, w)| r * w).sum();
    RewardBreakdown {
        goal: parts[0],
        heading: parts[1],
        action: parts[2],
        velocity: parts[3],
        obstacle: parts[4],
        terminal,
        total: shaped + terminal,
    }
}

pub fn total_reward(ctx: &StepContext, p: &RewardParams) -> f64 {
    breakdown(ctx, p).total
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_3, PI};

    fn ctx() -> StepContext {
        StepContext {
            d_goal: 5.0,
            d_goal_prev: 5.0,
            heading_error: 0.0,
            action: Subgoal::new(3.0, 0.0),
            action_prev: Subgoal::new(3.0, 0.0),
            velocity: [0.5, 0.2],
            h: None,
            h_prev: None,
            outcome: Outcome::Running,
            n_step: 0,
        }
    }

    fn p() -> RewardParams {
        RewardParams::default()
    }

    #[test]
    fn goal_progress() {
        let mut c = ctx();
        assert_eq!(r_goal(&c, &p()), 0.3);
        c.d_goal = 5.1;
        assert_eq!(r_goal(&c, &p()), 0.0);
        c.d_goal = 4.7;
        assert!((r_goal(&c, &p()) - (0.3 + 2.33 * (5.0 - 4.7))).abs() < 1e-12);
        assert!((r_goal(&c, &p()) - 0.999).abs() < 1e-12);
    }

    #[test]
    fn heading_cubic() {
        let mut c = ctx();
        assert_eq!(r_heading(&c, &p()), 1.0);
        c.heading_error = PI / 6.0;
        assert!((r_heading(&c, &p()) - (1.0 - 1.39 * (PI / 6.0).powi(3))).abs() < 1e-12);
        c.heading_error = -PI / 4.0;
        assert_eq!(r_heading(&c, &p()), 0.0);
    }

    #[test]
    fn action_examples() {
        let mut c = ctx();
        assert_eq!(r_action(&c, &p()), 1.0);
        c.action = Subgoal::new(0.0, FRAC_PI_4);
        c.action_prev = Subgoal::new(0.0, FRAC_PI_4);
        assert!((r_action(&c, &p()) - 0.5).abs() < 1e-12);
        c.action = Subgoal::new(0.0, -FRAC_PI_4);
        c.action_prev = Subgoal::new(3.0, 0.0);
        // progress clamps to 0 and smoothness is 1 - (1 + 0.5) / 2
        assert!((r_action(&c, &p()) - 0.5 * 0.25).abs() < 1e-12);
        c.action_prev = Subgoal::new(3.0, FRAC_PI_4);
        assert!((r_action(&c, &p()) - 0.0).abs() < 1e-12);
    }

    #[test]
    fn velocity_examples() {
        let mut c = ctx();
        assert!((r_velocity(&c, &p()) - 0.65).abs() < 1e-12);
        c.velocity = [0.5, 0.41];
        assert!((r_velocity(&c, &p()) - 0.35).abs() < 1e-12);
        c.velocity = [0.9, 0.0];
        let expect = 0.7 / (1.0 + (-15.0f64 * 0.4).exp()) + 0.3;
        assert!((r_velocity(&c, &p()) - expect).abs() < 1e-12);
    }

    #[test]
    fn obstacle_examples() {
        let mut c = ctx();
        assert_eq!(r_obstacle(&c, &p()), 1.0);
        c.h = Some(1.5);
        c.h_prev = Some(1.5);
        assert!((r_obstacle(&c, &p()) - 0.4 * 0.5).abs() < 1e-12);
        c.h = Some(0.0);
        c.h_prev = Some(0.0);
        assert_eq!(r_obstacle(&c, &p()), 0.0);
        c.h = Some(-0.2);
        assert_eq!(r_obstacle(&c, &p()), 0.0);
    }

    #[test]
    fn terminal_examples() {
        let mut c = ctx();
        c.outcome = Outcome::Goal;
        assert_eq!(terminal_reward(&c, &p()), 100.0);
        c.n_step = 100;
        assert!((terminal_reward(&c, &p()) - (60.0 * (-0.4f64).exp() + 40.0)).abs() < 1e-12);
        assert!((terminal_reward(&c, &p()) - 80.219).abs() < 1e-3);
        c.outcome = Outcome::Collision;
        assert_eq!(terminal_reward(&c, &p()), -80.0);
        c.outcome = Outcome::Fall;
        assert_eq!(terminal_reward(&c, &p()), -80.0);
        c.outcome = Outcome::Timeout;
        assert_eq!(terminal_reward(&c, &p()), -70.0);
    }

    #[test]
    fn totals() {
        let mut c = ctx();
        c.d_goal = 4.0;
        c.velocity = [5.0, 0.0];
        let b = breakdown(&c, &p());
        assert_eq!(b.components(), [1.0; 5]);
        assert!((b.total - 1.0).abs() < 1e-12);

        let mut z = ctx();
        z.d_goal = 6.0;
        z.heading_error = 1.0;
        z.action = Subgoal::new(0.0, FRAC_PI_4);
        z.action_prev = Subgoal::new(3.0, -FRAC_PI_4);
        z.velocity = [-10.0, 1.0];
        z.h = Some(0.0);
        z.h_prev = Some(0.0);
        z.outcome = Outcome::Timeout;
        let b = breakdown(&z, &p());
        assert!(b.components().iter().all(|&r| r < 1e-12));
        assert!((b.total + 70.0).abs() < 1e-12);

        let mut m = ctx();
        m.d_goal = 4.9;
        m.heading_error = 0.2;
        m.action = Subgoal::new(2.0, 0.3);
        m.h = Some(2.0);
        m.h_prev = Some(2.4);
        let rg = 0.3 + 2.33 * 0.1;
        let rt = 1.0 - 1.39 * 0.008;
        let ra = 0.5 * (2.0 / 3.0 - 0.3 / FRAC_PI_4) + 0.5 * (1.0 - 0.5 * (1.0 / 3.0 + 0.3 / FRAC_PI_2));
        let rv = 0.65;
        let ro = 2.0 / 3.0 - 0.6 * 0.8;
        let hand = 0.2 * rg + 0.1 * rt + 0.25 * ra + 0.2 * rv + 0.25 * ro;
        assert!((total_reward(&m, &p()) - hand).abs() < 1e-12);
    }

    fn any_subgoal() -> impl Strategy<Value = Subgoal> {
        (-1.0..4.0f64, -2.0..2.0f64).prop_map(|(d, b)| Subgoal::new(d, b))
    }

    proptest! {
        #[test]
        fn sub_rewards_are_unit_bounded(
            d in 0.0..20.0f64, dp in 0.0..20.0f64, e in -PI..PI,
            a in any_subgoal(), ap in any_subgoal(),
            vx in -5.0..5.0f64, vy in -5.0..5.0f64,
            h in proptest::option::of(-2.0..10.0f64), hp in proptest::option::of(-2.0..10.0f64),
            n in 0usize..100, term in 0usize..5,
        ) {
            let outcome = [Outcome::Running, Outcome::Goal, Outcome::Collision, Outcome::Fall, Outcome::Timeout][term];
            let c = StepContext { d_goal: d, d_goal_prev: dp, heading_error: e, action: a, action_prev: ap, velocity: [vx, vy], h, h_prev: hp, outcome, n_step: n };
            let b = breakdown(&c, &p());
            for r in b.components() {
                prop_assert!((0.0..=1.0).contains(&r));
            }
            if outcome == Outcome::Running {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&b.total));
            } else {
                prop_assert!(b.total >= -80.0 && b.total <= 101.0);
            }
        }

        #[test]
        fn monotone_directions(x in 0.0..3.0f64, y in 0.0..3.0f64, t in 0.0..FRAC_PI_6, u in 0.0..FRAC_PI_6, hp in 0.0..3.0f64) {
            let (lo, hi) = (x.min(y), x.max(y));
            let mut a = ctx();
            let mut b = ctx();
            a.d_goal = a.d_goal_prev - lo;
            b.d_goal = b.d_goal_prev - hi;
            prop_assert!(r_goal(&a, &p()) <= r_goal(&b, &p()));
            a.heading_error = t.min(u);
            b.heading_error = -t.max(u);
            prop_assert!(r_heading(&a, &p()) >= r_heading(&b, &p()));
            a.h_prev = Some(hp);
            b.h_prev = Some(hp);
            a.h = Some(lo);
            b.h = Some(hi);
            prop_assert!(r_obstacle(&a, &p()) <= r_obstacle(&b, &p()));
        }
    }

    #[test]
    fn bearing_past_the_window_scores_zero_heading() {
        let mut c = ctx();
        c.heading_error = FRAC_PI_3;
        assert_eq!(r_heading(&c, &p()), 0.0);
    }
}
