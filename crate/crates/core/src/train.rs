//! Training loop: stochastic rollouts, a mixed replay buffer and SAC
//! updates, with the demonstration share annealed over episodes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Environment;
use crate::replay::{demo_fraction_with, ReplayBuffer, Transition};
use crate::reward::Outcome;
use crate::sac::{Losses, Sac, SacConfig, SacError};
use crate::sim::{run_episode, EpisodeConfig, SacPolicy};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged in episode {episode}: {source}")]
    Diverged {
        episode: usize,
        #[source]
        source: SacError,
    },
    #[error("no training environments")]
    NoEnvironments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Online transitions required before the first update.
    pub warmup: usize,
    /// Gradient updates per collected transition.
    pub updates_per_step: usize,
    pub demo_initial: f64,
    /// Fractions of `episodes` at which the share starts to decay and hits 0.
    pub demo_hold: f64,
    pub demo_end: f64,
    pub sac: SacConfig,
    pub episode: EpisodeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sac = SacConfig::default();
        TrainConfig {
            episodes: 1500,
            seed: 0,
            warmup: sac.batch_size,
            updates_per_step: 1,
            demo_initial: 0.8,
            demo_hold: 0.1,
            demo_end: 0.5,
            sac,
            episode: EpisodeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub episode: usize,
    pub env_id: u64,
    pub episode_return: f64,
    pub success: bool,
    pub outcome: Outcome,
    pub steps: usize,
    pub demo_fraction: f64,
    pub alpha: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub updates: u64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub sac: Sac,
    pub buffer: ReplayBuffer,
    /// Next episode index.
    pub episode: usize,
    pub curves: Vec<CurveRow>,
    /// Minibatch sampling stream, separate from the learner's noise.
    sampler: ChaCha8Rng,
}

impl Trainer {
    /// Pass an empty `demos` slice to train from scratch.
    pub fn new(config: TrainConfig, demos: &[Transition]) -> Self {
        let sac = Sac::new(config.sac.clone(), config.seed);
        Trainer {
            buffer: ReplayBuffer::new(config.sac.buffer_capacity, demos),
            sampler: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c),
            sac,
            config,
            episode: 0,
            curves: Vec::new(),
        }
    }

    pub fn demo_fraction(&self) -> f64 {
        if self.buffer.demo_len() == 0 {
            return 0.0;
        }
        let c = &self.config;
        demo_fraction_with(self.episode, c.episodes, c.demo_initial, c.demo_hold, c.demo_end)
    }

    /// One rollout on the round-robin environment, then one batch of updates
    /// per collected transition.
    pub fn run_episode(&mut self, envs: &[Environment]) -> Result<CurveRow, TrainError> {
        if envs.is_empty() {
            return Err(TrainError::NoEnvironments);
        }
        let env = &envs[self.episode % envs.len()];
        let seed = self.config.seed.wrapping_mul(0x9e37_79b9).wrapping_add(self.episode as u64);
        let frac = self.demo_fraction();
        let mut collected = Vec::new();
        let trace = {
            let mut policy = SacPolicy::new(&self.sac, true, "sac");
            run_episode(env, &mut policy, &self.config.episode, seed, &mut |t| collected.push(t.clone()))
        };

        let mut sums = Losses::default();
        let mut n_updates = 0;
        for t in &collected {
            self.buffer.push(t);
            if self.buffer.online_len() < self.config.warmup {
                continue;
            }
            for _ in 0..self.config.updates_per_step {
                let batch = self.buffer.sample(self.config.sac.batch_size, frac, self.sac.uses_pixels(), &mut self.sampler);
                let l = self.sac.update(&batch).map_err(|source| TrainError::Diverged {
                    episode: self.episode,
                    source,
                })?;
                sums.critic += l.critic;
                sums.actor += l.actor;
                n_updates += 1;
            }
        }
        let mean = |v: f64| if n_updates > 0 { v / n_updates as f64 } else { 0.0 };
        let row = CurveRow {
            episode: self.episode,
            env_id: env.id,
            episode_return: trace.total_reward,
            success: trace.outcome == Outcome::Goal,
            outcome: trace.outcome,
            steps: trace.len(),
            demo_fraction: frac,
            alpha: self.sac.alpha(),
            critic_loss: mean(sums.critic),
            actor_loss: mean(sums.actor),
            updates: self.sac.updates,
        };
        self.curves.push(row.clone());
        self.episode += 1;
        Ok(row)
    }

    /// Runs until `config.episodes`; `on_episode` sees each finished row.
    pub fn train(&mut self, envs: &[Environment], on_episode: &mut dyn FnMut(&Trainer, &CurveRow)) -> Result<(), TrainError> {
        while self.episode < self.config.episodes {
            let row = self.run_episode(envs)?;
            on_episode(self, &row);
        }
        Ok(())
    }
}

/// Success rate in percent over a window of curve rows.
pub fn success_rate(rows: &[CurveRow]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    100.0 * rows.iter().filter(|r| r.success).count() as f64 / rows.len() as f64
}
