//! Transitions and the demonstration-mixed replay buffer.

use std::collections::VecDeque;
use std::f64::consts::FRAC_PI_4;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cnn::grid_pixels;
use crate::features::{pool, proprio, RawState, FEATURE_DIM, PROPRIO};
use crate::geometry::{OccupancyGrid, GRID_SIZE};
use crate::lmpc::Subgoal;

pub const ACTION_DIM: usize = 2;
pub const PIXELS: usize = GRID_SIZE * GRID_SIZE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: RawState,
    pub action: Subgoal,
    pub reward: f64,
    pub next_state: RawState,
    pub done: bool,
    pub demo: bool,
}

/// Maps a subgoal onto the policy's squashed `[-1, 1]^2` action space.
pub fn normalize_action(sg: &Subgoal) -> [f64; 2] {
    [sg.distance / (Subgoal::MAX_DISTANCE / 2.0) - 1.0, sg.bearing / FRAC_PI_4]
}

pub fn denormalize_action(a: [f64; 2]) -> Subgoal {
    Subgoal::new((a[0] + 1.0) * Subgoal::MAX_DISTANCE / 2.0, a[1] * FRAC_PI_4)
}

/// Compact copy of a transition as the learner consumes it.
#[derive(Debug, Clone, PartialEq)]
struct Stored {
    grid: OccupancyGrid,
    proprio: [f64; PROPRIO],
    action: [f64; ACTION_DIM],
    reward: f64,
    next_grid: OccupancyGrid,
    next_proprio: [f64; PROPRIO],
    done: bool,
}

impl From<&Transition> for Stored {
    fn from(t: &Transition) -> Self {
        Stored {
            grid: t.state.grid,
            proprio: proprio(&t.state),
            action: normalize_action(&t.action),
            reward: t.reward,
            next_grid: t.next_state.grid,
            next_proprio: proprio(&t.next_state),
            done: t.done,
        }
    }
}

/// A sampled minibatch, row-major per field.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub size: usize,
    pub features: Vec<f64>,
    pub next_features: Vec<f64>,
    /// Full-resolution grids, filled only when requested.
    pub pixels: Option<Vec<f64>>,
    pub next_pixels: Option<Vec<f64>>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<f64>,
    pub demo_count: usize,
}

impl Batch {
    pub fn from_transitions(ts: &[Transition], with_pixels: bool) -> Batch {
        let stored: Vec<Stored> = ts.iter().map(Stored::from).collect();
        let refs: Vec<&Stored> = stored.iter().collect();
        let demo_count = ts.iter().filter(|t| t.demo).count();
        Batch::assemble(&refs, demo_count, with_pixels)
    }

    fn assemble(rows: &[&Stored], demo_count: usize, with_pixels: bool) -> Batch {
        let n = rows.len();
        let mut b = Batch {
            size: n,
            features: Vec::with_capacity(n * FEATURE_DIM),
            next_features: Vec::with_capacity(n * FEATURE_DIM),
            pixels: with_pixels.then(|| Vec::with_capacity(n * PIXELS)),
            next_pixels: with_pixels.then(|| Vec::with_capacity(n * PIXELS)),
            actions: Vec::with_capacity(n * ACTION_DIM),
            rewards: Vec::with_capacity(n),
            dones: Vec::with_capacity(n),
            demo_count,
        };
        for s in rows {
            b.features.extend_from_slice(&pool(&s.grid));
            b.features.extend_from_slice(&s.proprio);
            b.next_features.extend_from_slice(&pool(&s.next_grid));
            b.next_features.extend_from_slice(&s.next_proprio);
            if let (Some(p), Some(np)) = (b.pixels.as_mut(), b.next_pixels.as_mut()) {
                p.extend(grid_pixels(&s.grid));
                np.extend(grid_pixels(&s.next_grid));
            }
            b.actions.extend_from_slice(&s.action);
            b.rewards.push(s.reward);
            b.dones.push(if s.done { 1.0 } else { 0.0 });
        }
        b
    }
}

/// FIFO ring of online transitions plus an immutable demonstration store.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    capacity: usize,
    online: VecDeque<Stored>,
    demos: Vec<Stored>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, demos: &[Transition]) -> Self {
        assert!(capacity > 0);
        ReplayBuffer {
            capacity,
            online: VecDeque::with_capacity(capacity.min(1 << 16)),
            demos: demos.iter().map(Stored::from).collect(),
        }
    }

    pub fn push(&mut self, t: &Transition) {
        if self.online.len() == self.capacity {
            self.online.pop_front();
        }
        self.online.push_back(Stored::from(t));
    }

    pub fn online_len(&self) -> usize {
        self.online.len()
    }

    pub fn demo_len(&self) -> usize {
        self.demos.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Reward of the `i`-th oldest online transition.
    pub fn online_reward(&self, i: usize) -> f64 {
        self.online[i].reward
    }

    /// Number of demonstration rows in a batch of `size` at `fraction`.
    pub fn demo_rows(&self, size: usize, fraction: f64) -> usize {
        if self.demos.is_empty() {
            0
        } else if self.online.is_empty() {
            size
        } else {
            ((fraction * size as f64).round() as usize).min(size)
        }
    }

    /// Draws `size` rows with replacement: first the demonstration share,
    /// then the online share. No random numbers are consumed for an empty
    /// share.
    pub fn sample<R: Rng>(&self, size: usize, fraction: f64, with_pixels: bool, rng: &mut R) -> Batch {
        assert!(!(self.demos.is_empty() && self.online.is_empty()), "sampling an empty buffer");
        let n_demo = self.demo_rows(size, fraction);
        let mut rows: Vec<&Stored> = Vec::with_capacity(size);
        for _ in 0..n_demo {
            rows.push(&self.demos[rng.random_range(0..self.demos.len())]);
        }
        for _ in n_demo..size {
            rows.push(&self.online[rng.random_range(0..self.online.len())]);
        }
        Batch::assemble(&rows, n_demo, with_pixels)
    }
}

/// Share of each batch drawn from demonstrations: 0.8 for the first 10% of
/// training, then linear to 0 at 50%, 0 afterwards.
pub fn demo_fraction(episode: usize, total: usize) -> f64 {
    demo_fraction_with(episode, total, 0.8, 0.1, 0.5)
}

pub fn demo_fraction_with(episode: usize, total: usize, initial: f64, hold: f64, end: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let x = episode as f64 / total as f64;
    if x < hold {
        initial
    } else if x >= end {
        0.0
    } else {
        initial * (end - x) / (end - hold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::RawState;
    use crate::geometry::Vec2;
    use crate::lip::Stance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn transition(reward: f64, demo: bool) -> Transition {
        let s = RawState {
            grid: OccupancyGrid::empty(),
            com: Vec2::zeros(),
            velocity: Vec2::zeros(),
            theta: 0.0,
            stance: Stance::Left,
            d_goal: 5.0,
            heading_error: 0.0,
            d_obstacle: None,
            goal: Vec2::new(5.0, 0.0),
        };
        Transition {
            state: s.clone(),
            action: Subgoal::new(1.0, 0.2),
            reward,
            next_state: s,
            done: false,
            demo,
        }
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(demo_fraction(0, 1000), 0.8);
        assert_eq!(demo_fraction(99, 1000), 0.8);
        assert!((demo_fraction(300, 1000) - 0.4).abs() < 1e-12);
        assert_eq!(demo_fraction(500, 1000), 0.0);
        assert_eq!(demo_fraction(1000, 1000), 0.0);
    }

    #[test]
    fn action_normalization_round_trips() {
        for sg in [Subgoal::new(0.0, -FRAC_PI_4), Subgoal::new(3.0, FRAC_PI_4), Subgoal::new(1.2, 0.1)] {
            let back = denormalize_action(normalize_action(&sg));
            assert!((back.distance - sg.distance).abs() < 1e-12);
            assert!((back.bearing - sg.bearing).abs() < 1e-12);
        }
        assert_eq!(normalize_action(&Subgoal::new(1.5, 0.0)), [0.0, 0.0]);
    }

    #[test]
    fn eviction_is_fifo() {
        let mut b = ReplayBuffer::new(3, &[]);
        for r in 0..5 {
            b.push(&transition(r as f64, false));
        }
        assert_eq!(b.online_len(), 3);
        assert_eq!((0..3).map(|i| b.online_reward(i)).collect::<Vec<_>>(), vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn empty_partitions_fall_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let demos: Vec<Transition> = (0..4).map(|i| transition(i as f64, true)).collect();
        let b = ReplayBuffer::new(10, &demos);
        let batch = b.sample(8, 0.2, false, &mut rng);
        assert_eq!(batch.demo_count, 8);
        let mut online = ReplayBuffer::new(10, &[]);
        online.push(&transition(1.0, false));
        assert_eq!(online.sample(8, 0.8, false, &mut rng).demo_count, 0);
    }

    #[test]
    fn batch_rows_encode_like_features() {
        let t = transition(0.5, false);
        let b = Batch::from_transitions(std::slice::from_ref(&t), true);
        assert_eq!(b.features, crate::features::encode(&t.state));
        assert_eq!(b.pixels.as_ref().unwrap().len(), PIXELS);
        assert_eq!(b.actions, normalize_action(&t.action).to_vec());
    }
}
