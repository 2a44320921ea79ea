//! Soft actor-critic: squashed-Gaussian actor, twin critics with Polyak
//! targets, and an auto-tuned entropy temperature.
//!
//! The policy only ever sees transition batches. It has no handle on the
//! dynamics model, so no uncertainty signal can leak into its objective.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::buffers::TransitionBatch;
use crate::error::{Error, Result};
use crate::numerics::{
    read_checkpoint, softplus, write_checkpoint, Activation, AdamState, Matrix, MlpSpec,
    ParamVector, RngStream,
};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub tau: f64,
    pub init_temperature: f64,
    /// Defaults to [`default_target_entropy`] when absent.
    pub target_entropy: Option<f64>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            hidden: vec![64, 64],
            activation: Activation::Relu,
            learning_rate: 3e-4,
            batch_size: 256,
            gamma: 0.99,
            tau: 0.005,
            init_temperature: 0.2,
            target_entropy: None,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::config(format!("{prefix}.hidden"), "widths must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{prefix}.batch_size"), "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("{prefix}.gamma"), "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config(format!("{prefix}.tau"), "must lie in [0, 1]"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config(format!("{prefix}.learning_rate"), "must be positive"));
        }
        if !(self.init_temperature > 0.0) {
            return Err(Error::config(format!("{prefix}.init_temperature"), "must be positive"));
        }
        Ok(())
    }
}

/// `ln(1 - tanh(u)^2)` without cancellation.
#[inline]
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// Squashed-Gaussian actor `obs -> (mean, log std)` per action dimension.
#[derive(Debug, Clone)]
pub struct Actor {
    spec: MlpSpec,
    pub params: ParamVector,
    bound: f64,
    opt: AdamState,
}

/// Reparameterized sample from the actor, with what the update needs.
struct ActorSample {
    actions: Matrix,
    log_prob: Vec<f64>,
    pre_tanh: Matrix,
    log_std: Matrix,
    clamped: Vec<bool>,
}

impl Actor {
    pub fn new(obs_dim: usize, action_dim: usize, bound: f64, cfg: &PolicyConfig, rng: &mut RngStream) -> Result<Self> {
        let spec = MlpSpec::with_hidden(obs_dim, &cfg.hidden, 2 * action_dim, cfg.activation)?;
        let params = spec.init_params(rng);
        let opt = AdamState::new(params.len(), cfg.learning_rate);
        Ok(Actor {
            spec,
            params,
            bound,
            opt,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn obs_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.spec.output_dim() / 2
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Mean and clamped log std for a batch.
    pub fn distribution(&self, obs: &Matrix) -> Result<(Matrix, Matrix)> {
        let out = self.spec.forward_batch(&self.params, obs)?;
        let d = self.action_dim();
        let mean = out.columns(0, d);
        let mut log_std = out.columns(d, 2 * d);
        log_std
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        Ok((mean, log_std))
    }

    /// Actions for a batch; row `i` draws its noise from `rngs[i]`.
    pub fn sample_batch(&self, obs: &Matrix, rngs: &mut [RngStream]) -> Result<Matrix> {
        if rngs.len() != obs.rows() {
            return Err(Error::shape("actor rngs", obs.rows(), rngs.len()));
        }
        let (mean, log_std) = self.distribution(obs)?;
        let mut a = mean;
        for (i, rng) in rngs.iter_mut().enumerate() {
            let ls = log_std.row(i);
            for (j, v) in a.row_mut(i).iter_mut().enumerate() {
                *v = self.bound * (*v + ls[j].exp() * rng.gaussian()).tanh();
            }
        }
        Ok(a)
    }

    pub fn deterministic_batch(&self, obs: &Matrix) -> Result<Matrix> {
        let (mut mean, _) = self.distribution(obs)?;
        mean.data_mut()
            .iter_mut()
            .for_each(|v| *v = self.bound * v.tanh());
        Ok(mean)
    }

    /// `bound * tanh(mean + std * xi)` or `bound * tanh(mean)`.
    pub fn act(&self, obs: &[f64], rng: &mut RngStream, deterministic: bool) -> Result<Vec<f64>> {
        let o = Matrix::row_vector(obs);
        let a = if deterministic {
            self.deterministic_batch(&o)?
        } else {
            self.sample_batch(&o, std::slice::from_mut(rng))?
        };
        Ok(a.into_vec())
    }

    /// Log-density of `action` under the squashed Gaussian, including the
    /// tanh and scale corrections.
    pub fn log_prob(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        if action.len() != self.action_dim() {
            return Err(Error::shape("log_prob action", self.action_dim(), action.len()));
        }
        if let Some(a) = action.iter().find(|a| !(a.abs() < self.bound)) {
            return Err(Error::InvalidInput(format!(
                "action {a} is not strictly inside (-{b}, {b})",
                b = self.bound
            )));
        }
        let (mean, log_std) = self.distribution(&Matrix::row_vector(obs))?;
        let mut lp = 0.0;
        for (j, &a) in action.iter().enumerate() {
            let u = (a / self.bound).atanh();
            let (m, ls) = (mean.get(0, j), log_std.get(0, j));
            let z = (u - m) / ls.exp();
            lp += -0.5 * z * z - ls - HALF_LOG_2PI - log_one_minus_tanh_sq(u) - self.bound.ln();
        }
        Ok(lp)
    }

    fn sample_with_noise(&self, obs: &Matrix, noise: &Matrix) -> Result<(ActorSample, crate::numerics::Tape)> {
        let tape = self.spec.forward_tape(&self.params, obs)?;
        let out = tape.output();
        let d = self.action_dim();
        let n = obs.rows();
        let mut actions = Matrix::zeros(n, d);
        let mut pre_tanh = Matrix::zeros(n, d);
        let mut log_std = Matrix::zeros(n, d);
        let mut clamped = vec![false; n * d];
        let mut log_prob = vec![0.0; n];
        for i in 0..n {
            for j in 0..d {
                let raw = out.get(i, d + j);
                let ls = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
                clamped[i * d + j] = ls != raw;
                let xi = noise.get(i, j);
                let u = out.get(i, j) + ls.exp() * xi;
                pre_tanh.set(i, j, u);
                log_std.set(i, j, ls);
                actions.set(i, j, self.bound * u.tanh());
                log_prob[i] +=
                    -0.5 * xi * xi - ls - HALF_LOG_2PI - log_one_minus_tanh_sq(u) - self.bound.ln();
            }
        }
        Ok((
            ActorSample {
                actions,
                log_prob,
                pre_tanh,
                log_std,
                clamped,
            },
            tape,
        ))
    }
}

/// Free-function form of [`Actor::act`].
pub fn act(actor: &Actor, obs: &[f64], rng: &mut RngStream, deterministic: bool) -> Result<Vec<f64>> {
    actor.act(obs, rng, deterministic)
}

/// Free-function form of [`Actor::log_prob`].
pub fn log_prob(actor: &Actor, obs: &[f64], action: &[f64]) -> Result<f64> {
    actor.log_prob(obs, action)
}

/// Q network with its Polyak-averaged target copy.
#[derive(Debug, Clone)]
pub struct Critic {
    spec: MlpSpec,
    pub params: ParamVector,
    pub target: ParamVector,
    opt: AdamState,
}

impl Critic {
    fn new(obs_dim: usize, action_dim: usize, cfg: &PolicyConfig, rng: &mut RngStream) -> Result<Self> {
        let spec = MlpSpec::with_hidden(obs_dim + action_dim, &cfg.hidden, 1, cfg.activation)?;
        let params = spec.init_params(rng);
        Ok(Critic {
            opt: AdamState::new(params.len(), cfg.learning_rate),
            target: params.clone(),
            spec,
            params,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn q(&self, obs: &Matrix, actions: &Matrix) -> Result<Vec<f64>> {
        Ok(self.spec.forward_batch(&self.params, &obs.hcat(actions))?.into_vec())
    }

    pub fn target_q(&self, obs: &Matrix, actions: &Matrix) -> Result<Vec<f64>> {
        Ok(self.spec.forward_batch(&self.target, &obs.hcat(actions))?.into_vec())
    }

    /// `target <- (1 - tau) target + tau online`.
    pub fn polyak(&mut self, tau: f64) {
        for (t, o) in self.target.iter_mut().zip(self.params.iter()) {
            *t = (1.0 - tau) * *t + tau * o;
        }
    }
}

#[derive(Debug, Clone)]
pub struct CriticPair {
    pub q1: Critic,
    pub q2: Critic,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct Temperature {
    pub log_alpha: f64,
    pub target_entropy: f64,
    opt: AdamState,
}

impl Temperature {
    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }
}

/// Losses and diagnostics of one update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateReport {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub temperature_loss: f64,
    pub alpha: f64,
    pub mean_target: f64,
    pub entropy: f64,
}

/// `-1` nat per action dimension measured on the unit box, shifted by
/// `ln(bound)` per dimension because log-densities are taken in action units.
/// A bound of 1 gives the usual `-action_dim`.
pub fn default_target_entropy(action_dim: usize, bound: f64) -> f64 {
    action_dim as f64 * (bound.ln() - 1.0)
}

/// Actor, critics and temperature trained together.
#[derive(Debug, Clone)]
pub struct SacAgent {
    pub actor: Actor,
    pub critics: CriticPair,
    pub temperature: Temperature,
    pub gamma: f64,
}

impl SacAgent {
    pub fn new(obs_dim: usize, action_dim: usize, bound: f64, cfg: &PolicyConfig, rng: &RngStream) -> Result<Self> {
        cfg.validate("policy")?;
        let actor = Actor::new(obs_dim, action_dim, bound, cfg, &mut rng.split("actor"))?;
        let q1 = Critic::new(obs_dim, action_dim, cfg, &mut rng.split("q1"))?;
        let q2 = Critic::new(obs_dim, action_dim, cfg, &mut rng.split("q2"))?;
        Ok(SacAgent {
            actor,
            critics: CriticPair { q1, q2, tau: cfg.tau },
            temperature: Temperature {
                log_alpha: cfg.init_temperature.ln(),
                target_entropy: cfg
                    .target_entropy
                    .unwrap_or_else(|| default_target_entropy(action_dim, bound)),
                opt: AdamState::new(1, cfg.learning_rate),
            },
            gamma: cfg.gamma,
        })
    }

    /// Bellman targets `r + γ (1 - done) (min Q'(s', a') - α log π(a'|s'))`
    /// with `a' ~ π(·|s')` drawn from `rng`.
    pub fn critic_targets(&self, batch: &TransitionBatch, rng: &mut RngStream) -> Result<Vec<f64>> {
        let n = batch.len();
        let noise = Matrix::from_vec(n, self.actor.action_dim(), rng.draw_gaussian(n * self.actor.action_dim()));
        let (next, _) = self.actor.sample_with_noise(&batch.next_obs, &noise)?;
        let q1 = self.critics.q1.target_q(&batch.next_obs, &next.actions)?;
        let q2 = self.critics.q2.target_q(&batch.next_obs, &next.actions)?;
        let alpha = self.temperature.alpha();
        Ok((0..n)
            .map(|i| {
                let soft = q1[i].min(q2[i]) - alpha * next.log_prob[i];
                batch.rewards[i] + self.gamma * (1.0 - batch.dones[i]) * soft
            })
            .collect())
    }

    fn critic_step(critic: &mut Critic, x: &Matrix, targets: &[f64]) -> Result<f64> {
        let tape = critic.spec.forward_tape(&critic.params, x)?;
        let q = tape.output();
        let n = targets.len() as f64;
        let mut upstream = Matrix::zeros(q.rows(), 1);
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let r = q.get(i, 0) - y;
            loss += r * r / n;
            upstream.set(i, 0, 2.0 * r / n);
        }
        let mut grads = vec![0.0; critic.params.len()];
        critic.spec.backward(&critic.params, &tape, &upstream, Some(&mut grads))?;
        critic.opt.step(&mut critic.params, &grads)?;
        Ok(loss)
    }

    /// One SAC step: critics, actor, temperature, then Polyak targets.
    pub fn update(&mut self, batch: &TransitionBatch, rng: &mut RngStream) -> Result<UpdateReport> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty policy batch".into()));
        }
        let d = self.actor.action_dim();
        let obs_dim = self.actor.obs_dim();
        let targets = self.critic_targets(batch, rng)?;
        let mean_target = targets.iter().sum::<f64>() / n as f64;

        let x = batch.obs.hcat(&batch.actions);
        let l1 = Self::critic_step(&mut self.critics.q1, &x, &targets)?;
        let l2 = Self::critic_step(&mut self.critics.q2, &x, &targets)?;
        let critic_loss = l1 + l2;

        let alpha = self.temperature.alpha();
        let noise = Matrix::from_vec(n, d, rng.draw_gaussian(n * d));
        let (sample, actor_tape) = self.actor.sample_with_noise(&batch.obs, &noise)?;
        let xa = batch.obs.hcat(&sample.actions);
        let c1 = &self.critics.q1;
        let c2 = &self.critics.q2;
        let t1 = c1.spec.forward_tape(&c1.params, &xa)?;
        let t2 = c2.spec.forward_tape(&c2.params, &xa)?;
        let mut up1 = Matrix::zeros(n, 1);
        let mut up2 = Matrix::zeros(n, 1);
        let mut actor_loss = 0.0;
        for i in 0..n {
            let (q1, q2) = (t1.output().get(i, 0), t2.output().get(i, 0));
            actor_loss += (alpha * sample.log_prob[i] - q1.min(q2)) / n as f64;
            if q1 <= q2 {
                up1.set(i, 0, 1.0);
            } else {
                up2.set(i, 0, 1.0);
            }
        }
        let dq1 = c1.spec.backward(&c1.params, &t1, &up1, None)?;
        let dq2 = c2.spec.backward(&c2.params, &t2, &up2, None)?;

        let mut upstream = Matrix::zeros(n, 2 * d);
        let nf = n as f64;
        for i in 0..n {
            for j in 0..d {
                let dq_da = dq1.get(i, obs_dim + j) + dq2.get(i, obs_dim + j);
                let u = sample.pre_tanh.get(i, j);
                let t = u.tanh();
                // d/du of (α log π - Q_min)
                let g_u = (alpha * 2.0 * t - dq_da * self.actor.bound * (1.0 - t * t)) / nf;
                upstream.set(i, j, g_u);
                let g_ls = if sample.clamped[i * d + j] {
                    0.0
                } else {
                    g_u * sample.log_std.get(i, j).exp() * noise.get(i, j) - alpha / nf
                };
                upstream.set(i, d + j, g_ls);
            }
        }
        let mut grads = vec![0.0; self.actor.params.len()];
        self.actor
            .spec
            .backward(&self.actor.params, &actor_tape, &upstream, Some(&mut grads))?;
        self.actor.opt.step(&mut self.actor.params, &grads)?;

        let mean_lp = sample.log_prob.iter().sum::<f64>() / nf;
        let temp = &mut self.temperature;
        let temperature_loss = -temp.log_alpha * (mean_lp + temp.target_entropy);
        let mut la = [temp.log_alpha];
        temp.opt.step(&mut la, &[-(mean_lp + temp.target_entropy)])?;
        temp.log_alpha = la[0];

        let tau = self.critics.tau;
        self.critics.q1.polyak(tau);
        self.critics.q2.polyak(tau);

        for (name, v) in [
            ("critic loss", critic_loss),
            ("actor loss", actor_loss),
            ("temperature loss", temperature_loss),
        ] {
            if !v.is_finite() {
                return Err(Error::non_finite(name, 0));
            }
        }
        Ok(UpdateReport {
            critic_loss,
            actor_loss,
            temperature_loss,
            alpha: self.temperature.alpha(),
            mean_target,
            entropy: -mean_lp,
        })
    }

    /// Writes actor, both critics and both targets as network blobs, then
    /// `log_alpha` as a little-endian f64.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        write_checkpoint(w, &self.actor.spec, &self.actor.params)?;
        for c in [&self.critics.q1, &self.critics.q2] {
            write_checkpoint(w, &c.spec, &c.params)?;
            write_checkpoint(w, &c.spec, &c.target)?;
        }
        w.write_all(&self.temperature.log_alpha.to_le_bytes())?;
        Ok(())
    }

    /// Restores weights saved by [`SacAgent::save`] into an agent of the same
    /// shape. Optimizer moments are not restored.
    pub fn load_weights<R: Read>(&mut self, r: &mut R) -> Result<()> {
        let mut take = |expected: &MlpSpec| -> Result<ParamVector> {
            let (spec, p) = read_checkpoint(r)?;
            if &spec != expected {
                return Err(Error::Format {
                    what: "policy checkpoint",
                    message: "network shape mismatch".into(),
                });
            }
            Ok(p)
        };
        self.actor.params = take(&self.actor.spec.clone())?;
        for c in [&mut self.critics.q1, &mut self.critics.q2] {
            let spec = c.spec.clone();
            c.params = take(&spec)?;
            c.target = take(&spec)?;
        }
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        self.temperature.log_alpha = f64::from_le_bytes(b);
        Ok(())
    }
}

/// Free-function form of [`SacAgent::update`].
pub fn policy_update(agent: &mut SacAgent, batch: &TransitionBatch, rng: &mut RngStream) -> Result<UpdateReport> {
    agent.update(batch, rng)
}
