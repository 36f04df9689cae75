//! Soft actor-critic over the subgoal action space.
//!
//! The actor outputs a mean and a bounded log standard deviation per action
//! dimension; samples are squashed through `tanh` into `[-1, 1]^2` and then
//! rescaled to subgoal bounds. Critics consume the squashed action
//! concatenated with the state features.

use std::f64::consts::{FRAC_PI_4, LN_2};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnn::{grid_pixels, CnnShape, CnnTape};
use crate::features::{encode, RawState, FEATURE_DIM, POOLED};
use crate::lmpc::Subgoal;
use crate::nn::{polyak, Adam, MlpShape, MlpTape};
use crate::replay::{denormalize_action, Batch, ACTION_DIM};

#[derive(Debug, Error, PartialEq)]
pub enum SacError {
    #[error("non-finite {what} after {updates} updates")]
    NonFinite { what: &'static str, updates: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Encoder {
    Pooled,
    Cnn(CnnShape),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub encoder: Encoder,
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub target_entropy: f64,
    pub tau: f64,
    pub init_alpha: f64,
    pub twin_critics: bool,
    pub log_std_bounds: [f64; 2],
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            hidden: vec![256, 256, 128, 64],
            encoder: Encoder::Pooled,
            gamma: 0.99,
            actor_lr: 5e-4,
            critic_lr: 1e-3,
            alpha_lr: 5e-4,
            batch_size: 64,
            buffer_capacity: 100_000,
            target_entropy: -0.5,
            tau: 0.005,
            init_alpha: 0.2,
            twin_critics: true,
            log_std_bounds: [-5.0, 2.0],
        }
    }
}

/// `log |d subgoal / d a|` of the affine map from `[-1, 1]^2` to subgoals.
pub fn action_scale_log() -> f64 {
    (Subgoal::MAX_DISTANCE / 2.0).ln() + FRAC_PI_4.ln()
}

/// `ln(1 - tanh(u)^2)` without cancellation.
pub fn log1m_tanh2(u: f64) -> f64 {
    let x = -2.0 * u;
    let softplus = x.max(0.0) + (-x.abs()).exp().ln_1p();
    2.0 * (LN_2 - u - softplus)
}

/// Encoder (optional CNN) plus MLP head, over one flat parameter vector:
/// CNN parameters first, then the MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub cnn: Option<CnnShape>,
    pub mlp: MlpShape,
    pub params: Vec<f64>,
    pub action_inputs: usize,
}

pub struct NetTape {
    cnn: Option<CnnTape>,
    mlp: MlpTape,
}

impl NetTape {
    pub fn output(&self) -> &[f64] {
        self.mlp.output()
    }
}

impl Network {
    pub fn new(encoder: &Encoder, hidden: &[usize], action_inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let cnn = match encoder {
            Encoder::Pooled => None,
            Encoder::Cnn(shape) => {
                assert_eq!(shape.output, POOLED, "CNN features replace the pooled grid block");
                Some(shape.clone())
            }
        };
        let mut sizes = vec![FEATURE_DIM + action_inputs];
        sizes.extend_from_slice(hidden);
        sizes.push(outputs);
        let mlp = MlpShape::new(sizes);
        let mut params = cnn.as_ref().map_or_else(Vec::new, |c| c.init(rng));
        params.extend(mlp.init(rng));
        Network {
            cnn,
            mlp,
            params,
            action_inputs,
        }
    }

    pub fn cnn_len(&self) -> usize {
        self.cnn.as_ref().map_or(0, |c| c.param_count())
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn forward(&self, features: &[f64], pixels: Option<&[f64]>, actions: Option<&[f64]>, batch: usize) -> NetTape {
        self.forward_with(&self.params, features, pixels, actions, batch)
    }

    pub fn forward_with(&self, params: &[f64], features: &[f64], pixels: Option<&[f64]>, actions: Option<&[f64]>, batch: usize) -> NetTape {
        let cl = self.cnn_len();
        let cnn = self
            .cnn
            .as_ref()
            .map(|c| c.forward(&params[..cl], pixels.expect("CNN encoder needs pixels"), batch));
        let width = self.input_dim();
        let mut input = Vec::with_capacity(batch * width);
        for s in 0..batch {
            let f = &features[s * FEATURE_DIM..(s + 1) * FEATURE_DIM];
            match &cnn {
                Some(t) => {
                    input.extend_from_slice(&t.output()[s * POOLED..(s + 1) * POOLED]);
                    input.extend_from_slice(&f[POOLED..]);
                }
                None => input.extend_from_slice(f),
            }
            if let Some(a) = actions {
                input.extend_from_slice(&a[s * self.action_inputs..(s + 1) * self.action_inputs]);
            }
        }
        let mlp = self.mlp.forward(&params[cl..], &input, batch);
        NetTape { cnn, mlp }
    }

    /// Accumulates parameter gradients of `sum(d_out * output)`; returns the
    /// gradient with respect to the action inputs when asked.
    pub fn backward(&self, tape: &NetTape, d_out: &[f64], grads: &mut [f64], action_grad: bool) -> Option<Vec<f64>> {
        let cl = self.cnn_len();
        let (gc, gm) = grads.split_at_mut(cl);
        let need_input = self.cnn.is_some() || action_grad;
        let dx = self.mlp.backward(&self.params[cl..], &tape.mlp, d_out, gm, need_input)?;
        let width = self.input_dim();
        let batch = tape.mlp.batch;
        if let (Some(shape), Some(ct)) = (&self.cnn, &tape.cnn) {
            let mut d_enc = Vec::with_capacity(batch * POOLED);
            for s in 0..batch {
                d_enc.extend_from_slice(&dx[s * width..s * width + POOLED]);
            }
            shape.backward(&self.params[..cl], ct, &d_enc, gc);
        }
        action_grad.then(|| {
            let mut da = Vec::with_capacity(batch * self.action_inputs);
            for s in 0..batch {
                da.extend_from_slice(&dx[(s + 1) * width - self.action_inputs..(s + 1) * width]);
            }
            da
        })
    }
}

/// One reparameterized policy sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicySample {
    pub mu: [f64; 2],
    pub log_sigma: [f64; 2],
    /// `d log_sigma / d raw` of the bounded parameterization.
    pub log_sigma_slope: [f64; 2],
    pub noise: [f64; 2],
    pub pre_squash: [f64; 2],
    pub action: [f64; 2],
    pub log_prob: f64,
}

impl PolicySample {
    pub fn subgoal(&self) -> Subgoal {
        denormalize_action(self.action)
    }
}

/// Turns raw actor outputs `[mu_0, mu_1, r_0, r_1]` and standard normal
/// noise into a squashed sample with its log-density in subgoal space.
pub fn squash(raw: &[f64], noise: [f64; 2], bounds: [f64; 2]) -> PolicySample {
    let mut s = PolicySample {
        mu: [raw[0], raw[1]],
        log_sigma: [0.0; 2],
        log_sigma_slope: [0.0; 2],
        noise,
        pre_squash: [0.0; 2],
        action: [0.0; 2],
        log_prob: -action_scale_log(),
    };
    let half = 0.5 * (bounds[1] - bounds[0]);
    for i in 0..2 {
        let t = raw[2 + i].tanh();
        s.log_sigma[i] = bounds[0] + half * (t + 1.0);
        s.log_sigma_slope[i] = half * (1.0 - t * t);
        s.pre_squash[i] = s.mu[i] + s.log_sigma[i].exp() * noise[i];
        s.action[i] = s.pre_squash[i].tanh();
        s.log_prob += -0.5 * noise[i] * noise[i] - s.log_sigma[i] - 0.5 * (2.0 * std::f64::consts::PI).ln() - log1m_tanh2(s.pre_squash[i]);
    }
    s
}

/// Gradient of `alpha * log_prob - q` with respect to the raw actor outputs,
/// given `dq = dq/da` at the sampled action.
pub fn actor_head_grad(s: &PolicySample, dq: [f64; 2], alpha: f64) -> [f64; 4] {
    let mut g = [0.0; 4];
    for i in 0..2 {
        let a = s.action[i];
        let du = alpha * 2.0 * a - dq[i] * (1.0 - a * a);
        let sigma = s.log_sigma[i].exp();
        let dls = -alpha + du * sigma * s.noise[i];
        g[i] = du;
        g[2 + i] = dls * s.log_sigma_slope[i];
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Losses {
    pub critic: f64,
    pub actor: f64,
    pub alpha: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone)]
pub struct Sac {
    pub config: SacConfig,
    pub actor: Network,
    pub critics: Vec<Network>,
    pub targets: Vec<Network>,
    pub log_alpha: f64,
    pub actor_opt: Adam,
    pub critic_opts: Vec<Adam>,
    pub alpha_opt: Adam,
    /// Noise for updates.
    pub rng: ChaCha8Rng,
    pub updates: u64,
}

impl Sac {
    pub fn new(config: SacConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actor = Network::new(&config.encoder, &config.hidden, 0, 4, &mut rng);
        let n_critics = if config.twin_critics { 2 } else { 1 };
        let critics: Vec<Network> = (0..n_critics)
            .map(|_| Network::new(&config.encoder, &config.hidden, ACTION_DIM, 1, &mut rng))
            .collect();
        let targets = critics.clone();
        let actor_opt = Adam::new(actor.params.len(), config.actor_lr);
        let critic_opts = critics.iter().map(|c| Adam::new(c.params.len(), config.critic_lr)).collect();
        let alpha_opt = Adam::new(1, config.alpha_lr);
        Sac {
            log_alpha: config.init_alpha.ln(),
            config,
            actor,
            critics,
            targets,
            actor_opt,
            critic_opts,
            alpha_opt,
            rng,
            updates: 0,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn uses_pixels(&self) -> bool {
        matches!(self.config.encoder, Encoder::Cnn(_))
    }

    /// Policy sample for one observation; `noise = None` gives the mean
    /// action.
    pub fn act(&self, state: &RawState, noise: Option<[f64; 2]>) -> PolicySample {
        let features = encode(state);
        let pixels = self.uses_pixels().then(|| grid_pixels(&state.grid));
        let tape = self.actor.forward(&features, pixels.as_deref(), None, 1);
        squash(tape.output(), noise.unwrap_or([0.0; 2]), self.config.log_std_bounds)
    }

    pub fn draw_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 2]> {
        (0..n)
            .map(|_| [StandardNormal.sample(&mut *rng), StandardNormal.sample(&mut *rng)])
            .collect()
    }

    fn sample_policy(&self, features: &[f64], pixels: Option<&[f64]>, noise: &[[f64; 2]]) -> (NetTape, Vec<PolicySample>) {
        let n = noise.len();
        let tape = self.actor.forward(features, pixels, None, n);
        let samples = (0..n)
            .map(|s| squash(&tape.output()[s * 4..s * 4 + 4], noise[s], self.config.log_std_bounds))
            .collect();
        (tape, samples)
    }

    /// Soft Bellman targets using the target critics and fresh policy
    /// samples at the next states.
    pub fn critic_targets(&self, batch: &Batch, noise: &[[f64; 2]]) -> Vec<f64> {
        let (_, next) = self.sample_policy(&batch.next_features, batch.next_pixels.as_deref(), noise);
        let actions: Vec<f64> = next.iter().flat_map(|s| s.action).collect();
        let q: Vec<NetTape> = self
            .targets
            .iter()
            .map(|t| t.forward(&batch.next_features, batch.next_pixels.as_deref(), Some(&actions), batch.size))
            .collect();
        let alpha = self.alpha();
        (0..batch.size)
            .map(|s| {
                let q_min = q.iter().map(|t| t.output()[s]).fold(f64::INFINITY, f64::min);
                batch.rewards[s] + self.config.gamma * (1.0 - batch.dones[s]) * (q_min - alpha * next[s].log_prob)
            })
            .collect()
    }

    /// Mean squared error of critic `c` against `targets` and its gradient.
    pub fn critic_loss_grad(&self, c: usize, batch: &Batch, targets: &[f64]) -> (f64, Vec<f64>) {
        let net = &self.critics[c];
        let tape = net.forward(&batch.features, batch.pixels.as_deref(), Some(&batch.actions), batch.size);
        let n = batch.size as f64;
        let mut loss = 0.0;
        let mut d = Vec::with_capacity(batch.size);
        for (q, y) in tape.output().iter().zip(targets) {
            loss += (q - y).powi(2) / n;
            d.push(2.0 * (q - y) / n);
        }
        let mut grads = vec![0.0; net.params.len()];
        net.backward(&tape, &d, &mut grads, false);
        (loss, grads)
    }

    /// Minimum over critics at `(s, a)` and, per row, `dQmin/da`.
    pub fn min_q_and_action_grad(&self, features: &[f64], pixels: Option<&[f64]>, actions: &[f64], batch: usize) -> (Vec<f64>, Vec<[f64; 2]>) {
        let tapes: Vec<NetTape> = self
            .critics
            .iter()
            .map(|c| c.forward(features, pixels, Some(actions), batch))
            .collect();
        let mut q_min = vec![f64::INFINITY; batch];
        let mut which = vec![0usize; batch];
        for (k, t) in tapes.iter().enumerate() {
            for s in 0..batch {
                if t.output()[s] < q_min[s] {
                    q_min[s] = t.output()[s];
                    which[s] = k;
                }
            }
        }
        let mut dq = vec![[0.0; 2]; batch];
        for (k, (c, t)) in self.critics.iter().zip(&tapes).enumerate() {
            let d_out: Vec<f64> = which.iter().map(|&w| if w == k { 1.0 } else { 0.0 }).collect();
            if d_out.iter().all(|&v| v == 0.0) {
                continue;
            }
            let mut scratch = vec![0.0; c.params.len()];
            let da = c.backward(t, &d_out, &mut scratch, true).expect("action gradient");
            for s in 0..batch {
                dq[s][0] += da[2 * s];
                dq[s][1] += da[2 * s + 1];
            }
        }
        (q_min, dq)
    }

    /// Actor loss `mean(alpha log pi - Qmin)` with its gradient and the mean
    /// log-probability of the samples.
    pub fn actor_loss_grad(&self, batch: &Batch, noise: &[[f64; 2]]) -> (f64, Vec<f64>, f64) {
        let n = batch.size;
        let (tape, samples) = self.sample_policy(&batch.features, batch.pixels.as_deref(), noise);
        let actions: Vec<f64> = samples.iter().flat_map(|s| s.action).collect();
        let (q, dq) = self.min_q_and_action_grad(&batch.features, batch.pixels.as_deref(), &actions, n);
        let alpha = self.alpha();
        let mut loss = 0.0;
        let mut mean_logp = 0.0;
        let mut d_raw = Vec::with_capacity(4 * n);
        for s in 0..n {
            loss += (alpha * samples[s].log_prob - q[s]) / n as f64;
            mean_logp += samples[s].log_prob / n as f64;
            d_raw.extend(actor_head_grad(&samples[s], dq[s], alpha).iter().map(|g| g / n as f64));
        }
        let mut grads = vec![0.0; self.actor.params.len()];
        self.actor.backward(&tape, &d_raw, &mut grads, false);
        (loss, grads, mean_logp)
    }

    /// Gradient of `-alpha * (mean_logp + target_entropy)` with respect to
    /// `log alpha`; zero when the policy entropy sits at the target.
    pub fn alpha_grad(&self, mean_logp: f64) -> f64 {
        -self.alpha() * (mean_logp + self.config.target_entropy)
    }

    pub fn update(&mut self, batch: &Batch) -> Result<Losses, SacError> {
        let n = batch.size;
        let next_noise = Self::draw_noise(&mut self.rng, n);
        let targets = self.critic_targets(batch, &next_noise);
        let mut critic_loss = 0.0;
        for c in 0..self.critics.len() {
            let (loss, grads) = self.critic_loss_grad(c, batch, &targets);
            critic_loss += loss;
            self.critic_opts[c].step(&mut self.critics[c].params, &grads);
        }
        self.check(critic_loss, "critic loss")?;

        let noise = Self::draw_noise(&mut self.rng, n);
        let (actor_loss, grads, mean_logp) = self.actor_loss_grad(batch, &noise);
        self.check(actor_loss, "actor loss")?;
        self.actor_opt.step(&mut self.actor.params, &grads);

        let g = self.alpha_grad(mean_logp);
        let mut la = [self.log_alpha];
        self.alpha_opt.step(&mut la, &[g]);
        self.log_alpha = la[0];
        let alpha_loss = -self.alpha() * (mean_logp + self.config.target_entropy);

        for (t, c) in self.targets.iter_mut().zip(&self.critics) {
            polyak(&mut t.params, &c.params, self.config.tau);
        }
        self.updates += 1;
        let all_finite = self.actor.params.iter().chain(self.critics.iter().flat_map(|c| c.params.iter())).all(|v| v.is_finite());
        if !all_finite || !self.log_alpha.is_finite() {
            return Err(SacError::NonFinite {
                what: "parameters",
                updates: self.updates,
            });
        }
        Ok(Losses {
            critic: critic_loss,
            actor: actor_loss,
            alpha: alpha_loss,
            entropy: -mean_logp,
        })
    }

    fn check(&self, v: f64, what: &'static str) -> Result<(), SacError> {
        if v.is_finite() {
            Ok(())
        } else {
            Err(SacError::NonFinite {
                what,
                updates: self.updates,
            })
        }
    }
}
