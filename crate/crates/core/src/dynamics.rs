//! Probabilistic ensemble dynamics and reward model.
//!
//! Each member maps a normalized `(s, a)` to a diagonal Gaussian over the
//! normalized target `(s' - s, r)`. Log-variances are squashed into learnable
//! soft bounds. Members are fit by Gaussian negative log-likelihood on their
//! own bootstrap resample; the members with the lowest holdout likelihood
//! loss become the elites used for sampling and disagreement.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::envs::Transition;
use crate::error::{Error, Result};
use crate::numerics::{
    read_checkpoint, sigmoid, softplus, write_checkpoint, Activation, AdamState, Matrix, MlpSpec,
    ParamVector, RngStream,
};

/// Weight of the soft log-variance bound regularizer.
/// Smallest allowed distance between the learned log-variance bounds.
const MIN_LOGVAR_GAP: f64 = 1e-2;

pub const LOGVAR_BOUND_WEIGHT: f64 = 0.01;
const INIT_MAX_LOGVAR: f64 = 0.5;
const INIT_MIN_LOGVAR: f64 = -10.0;
const MIN_STD: f64 = 1e-8;

/// How per-dimension disagreement is reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scalarization {
    #[default]
    Mean,
    Sum,
    Max,
}

impl Scalarization {
    pub fn reduce(self, per_dim: &[f64]) -> f64 {
        match self {
            Scalarization::Mean => per_dim.iter().sum::<f64>() / per_dim.len() as f64,
            Scalarization::Sum => per_dim.iter().sum(),
            Scalarization::Max => per_dim.iter().copied().fold(0.0, f64::max),
        }
    }
}

/// Per-dimension affine standardizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fits mean and (population) standard deviation per column, flooring
    /// the standard deviation at `1e-8`.
    pub fn fit(data: &Matrix) -> Self {
        let (n, d) = (data.rows(), data.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, x) in mean.iter_mut().zip(data.row(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((v, x), m) in var.iter_mut().zip(data.row(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .iter()
            .map(|v| (v / n.max(1) as f64).sqrt().max(MIN_STD))
            .collect();
        Normalizer { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for i in 0..out.rows() {
            for ((v, m), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

/// Mean over rows of `sum_d (mu - y)^2 exp(-logvar) + logvar`.
pub fn gaussian_nll(mean: &Matrix, logvar: &Matrix, target: &Matrix) -> f64 {
    let n = mean.rows();
    let mut total = 0.0;
    for ((m, lv), y) in mean.data().iter().zip(logvar.data()).zip(target.data()) {
        let r = m - y;
        total += r * r * (-lv).exp() + lv;
    }
    total / n as f64
}

/// Gradient of one member's loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberGrad {
    pub net: Vec<f64>,
    pub max_logvar: Vec<f64>,
    pub min_logvar: Vec<f64>,
}

/// One Gaussian network of the ensemble.
#[derive(Debug, Clone)]
pub struct GaussianMember {
    pub params: ParamVector,
    pub max_logvar: Vec<f64>,
    pub min_logvar: Vec<f64>,
    net_opt: AdamState,
    bound_opt: AdamState,
}

struct HeadOutput {
    mean: Matrix,
    logvar: Matrix,
    // kept for the backward pass
    raw_logvar: Matrix,
    upper: Matrix,
}

impl GaussianMember {
    fn new(spec: &MlpSpec, out_dim: usize, lr: f64, rng: &mut RngStream) -> Self {
        let params = spec.init_params(rng);
        let n = params.len();
        GaussianMember {
            params,
            max_logvar: vec![INIT_MAX_LOGVAR; out_dim],
            min_logvar: vec![INIT_MIN_LOGVAR; out_dim],
            net_opt: AdamState::new(n, lr),
            bound_opt: AdamState::new(2 * out_dim, lr),
        }
    }

    fn head(&self, raw: &Matrix) -> HeadOutput {
        let d = self.max_logvar.len();
        let n = raw.rows();
        let mean = raw.columns(0, d);
        let raw_logvar = raw.columns(d, 2 * d);
        let mut upper = Matrix::zeros(n, d);
        let mut logvar = Matrix::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                let (hi, lo) = (self.max_logvar[j], self.min_logvar[j]);
                let h = hi - softplus(hi - raw_logvar.get(i, j));
                upper.set(i, j, h);
                // the soft floor can overshoot `hi` by up to exp(lo - hi)
                logvar.set(i, j, (lo + softplus(h - lo)).clamp(lo, hi));
            }
        }
        HeadOutput {
            mean,
            logvar,
            raw_logvar,
            upper,
        }
    }

    /// Mean and log-variance in normalized target space.
    pub fn predict(&self, spec: &MlpSpec, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let raw = spec.forward_batch(&self.params, x)?;
        let h = self.head(&raw);
        Ok((h.mean, h.logvar))
    }

    /// Training loss (likelihood term plus bound regularizer) and its gradient.
    pub fn loss_and_grad(&self, spec: &MlpSpec, x: &Matrix, y: &Matrix) -> Result<(f64, MemberGrad)> {
        let tape = spec.forward_tape(&self.params, x)?;
        let h = self.head(tape.output());
        let d = self.max_logvar.len();
        let n = x.rows();
        let nf = n as f64;
        let reg: f64 = LOGVAR_BOUND_WEIGHT
            * (self.max_logvar.iter().sum::<f64>() - self.min_logvar.iter().sum::<f64>());
        let loss = gaussian_nll(&h.mean, &h.logvar, y) + reg;

        let mut upstream = Matrix::zeros(n, 2 * d);
        let mut g_max = vec![LOGVAR_BOUND_WEIGHT; d];
        let mut g_min = vec![-LOGVAR_BOUND_WEIGHT; d];
        for i in 0..n {
            for j in 0..d {
                let lv = h.logvar.get(i, j);
                let r = h.mean.get(i, j) - y.get(i, j);
                let inv = (-lv).exp();
                upstream.set(i, j, 2.0 * r * inv / nf);
                let g_lv = (1.0 - r * r * inv) / nf;
                let (hi, lo) = (self.max_logvar[j], self.min_logvar[j]);
                if lv >= hi {
                    g_max[j] += g_lv;
                    continue;
                }
                if lv <= lo {
                    g_min[j] += g_lv;
                    continue;
                }
                let s_lo = sigmoid(h.upper.get(i, j) - lo);
                let s_hi = sigmoid(hi - h.raw_logvar.get(i, j));
                upstream.set(i, d + j, g_lv * s_lo * s_hi);
                g_max[j] += g_lv * s_lo * (1.0 - s_hi);
                g_min[j] += g_lv * (1.0 - s_lo);
            }
        }
        let mut g_net = vec![0.0; self.params.len()];
        spec.backward(&self.params, &tape, &upstream, Some(&mut g_net))?;
        Ok((
            loss,
            MemberGrad {
                net: g_net,
                max_logvar: g_max,
                min_logvar: g_min,
            },
        ))
    }

    fn apply(&mut self, grad: &MemberGrad) -> Result<()> {
        self.net_opt.step(&mut self.params, &grad.net)?;
        let mut bounds: Vec<f64> = self
            .max_logvar
            .iter()
            .chain(&self.min_logvar)
            .copied()
            .collect();
        let g: Vec<f64> = grad
            .max_logvar
            .iter()
            .chain(&grad.min_logvar)
            .copied()
            .collect();
        self.bound_opt.step(&mut bounds, &g)?;
        let d = self.max_logvar.len();
        for j in 0..d {
            let (hi, lo) = (bounds[j], bounds[d + j]);
            // both bounds can be driven down together on near-deterministic
            // outputs; keep them ordered around their midpoint
            if lo > hi - MIN_LOGVAR_GAP {
                let mid = 0.5 * (hi + lo);
                bounds[j] = mid + 0.5 * MIN_LOGVAR_GAP;
                bounds[d + j] = mid - 0.5 * MIN_LOGVAR_GAP;
            }
        }
        self.max_logvar.copy_from_slice(&bounds[..d]);
        self.min_logvar.copy_from_slice(&bounds[d..]);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelTrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
    pub max_epochs: usize,
    /// Epochs without a 1% holdout improvement before stopping.
    pub patience: usize,
    /// Cap on minibatch updates per member per fit; 0 means no cap.
    pub max_updates_per_fit: usize,
    /// Environment steps between fits.
    pub train_interval: usize,
}

impl Default for ModelTrainConfig {
    fn default() -> Self {
        ModelTrainConfig {
            batch_size: 256,
            learning_rate: 1e-3,
            holdout_fraction: 0.2,
            max_epochs: 50,
            patience: 5,
            max_updates_per_fit: 0,
            train_interval: 100,
        }
    }
}

impl ModelTrainConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::config(
                format!("{prefix}.holdout_fraction"),
                "must lie strictly between 0 and 1",
            ));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("train_interval", self.train_interval),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{prefix}.{name}"), "must be at least 1"));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config(format!("{prefix}.learning_rate"), "must be positive"));
        }
        Ok(())
    }
}

/// Outcome of one [`EnsembleModel::train`] call.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub skipped: bool,
    pub epochs: usize,
    pub train_nll: Vec<f64>,
    pub holdout_nll: Vec<f64>,
    pub elites: Vec<usize>,
    /// Indices into the fitted data that formed the holdout split.
    #[serde(skip)]
    pub holdout_indices: Vec<usize>,
}

/// Shape of an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub members: usize,
    pub elites: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub scalarization: Scalarization,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            members: 5,
            elites: 3,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            scalarization: Scalarization::Mean,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.members < 2 {
            return Err(Error::config(format!("{prefix}.members"), "need at least 2 members"));
        }
        if self.elites == 0 || self.elites > self.members {
            return Err(Error::config(
                format!("{prefix}.elites"),
                "must satisfy 1 <= elites <= members",
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config(format!("{prefix}.hidden"), "widths must be positive"));
        }
        Ok(())
    }
}

/// Elite-member predictions for a batch, denormalized to `(Δs, r)` units.
#[derive(Debug, Clone)]
pub struct ElitePredictions {
    /// One `(n x (obs_dim + 1))` mean matrix per elite, in elite order.
    pub means: Vec<Matrix>,
    pub stds: Vec<Matrix>,
}

/// Result of advancing a batch of states through the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelStep {
    pub next_obs: Matrix,
    pub reward: Vec<f64>,
    /// Member index (into the full ensemble) used for each row.
    pub member: Vec<usize>,
    pub uncertainty: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EnsembleModel {
    obs_dim: usize,
    action_dim: usize,
    spec: MlpSpec,
    members: Vec<GaussianMember>,
    elites: Vec<usize>,
    input_norm: Normalizer,
    output_norm: Normalizer,
    scalarization: Scalarization,
    fits: usize,
}

impl EnsembleModel {
    pub fn new(
        obs_dim: usize,
        action_dim: usize,
        cfg: &EnsembleConfig,
        learning_rate: f64,
        rng: &RngStream,
    ) -> Result<Self> {
        cfg.validate("model.ensemble")?;
        let out = obs_dim + 1;
        let spec = MlpSpec::with_hidden(obs_dim + action_dim, &cfg.hidden, 2 * out, cfg.activation)?;
        let members = (0..cfg.members)
            .map(|i| GaussianMember::new(&spec, out, learning_rate, &mut rng.split_index(i as u64)))
            .collect();
        Ok(EnsembleModel {
            obs_dim,
            action_dim,
            spec,
            members,
            elites: (0..cfg.elites).collect(),
            input_norm: Normalizer::identity(obs_dim + action_dim),
            output_norm: Normalizer::identity(out),
            scalarization: cfg.scalarization,
            fits: 0,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn members(&self) -> &[GaussianMember] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [GaussianMember] {
        &mut self.members
    }

    pub fn elites(&self) -> &[usize] {
        &self.elites
    }

    /// Replaces the elite set. Indices must be distinct and in range.
    pub fn set_elites(&mut self, elites: Vec<usize>) -> Result<()> {
        if elites.is_empty() {
            return Err(Error::InvalidInput("elite set must be non-empty".into()));
        }
        let mut sorted = elites.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != elites.len() || sorted.last().is_some_and(|&i| i >= self.members.len()) {
            return Err(Error::InvalidInput(format!("invalid elite set {elites:?}")));
        }
        self.elites = elites;
        Ok(())
    }

    pub fn input_normalizer(&self) -> &Normalizer {
        &self.input_norm
    }

    pub fn output_normalizer(&self) -> &Normalizer {
        &self.output_norm
    }

    pub fn set_normalizers(&mut self, input: Normalizer, output: Normalizer) -> Result<()> {
        if input.dim() != self.obs_dim + self.action_dim || output.dim() != self.obs_dim + 1 {
            return Err(Error::shape(
                "normalizer",
                self.obs_dim + self.action_dim,
                input.dim(),
            ));
        }
        self.input_norm = input;
        self.output_norm = output;
        Ok(())
    }

    pub fn scalarization(&self) -> Scalarization {
        self.scalarization
    }

    pub fn set_scalarization(&mut self, s: Scalarization) {
        self.scalarization = s;
    }

    /// Number of completed (non-skipped) fits.
    pub fn fits(&self) -> usize {
        self.fits
    }

    fn model_input(&self, obs: &Matrix, actions: &Matrix) -> Result<Matrix> {
        if obs.cols() != self.obs_dim {
            return Err(Error::shape("model obs", self.obs_dim, obs.cols()));
        }
        if actions.cols() != self.action_dim {
            return Err(Error::shape("model action", self.action_dim, actions.cols()));
        }
        if obs.rows() != actions.rows() {
            return Err(Error::shape("model batch", obs.rows(), actions.rows()));
        }
        Ok(self.input_norm.normalize(&obs.hcat(actions)))
    }

    fn targets(&self, batch: &[&Transition]) -> Matrix {
        let d = self.obs_dim + 1;
        let mut y = Matrix::zeros(batch.len(), d);
        for (i, t) in batch.iter().enumerate() {
            let row = y.row_mut(i);
            for j in 0..self.obs_dim {
                row[j] = t.next_obs[j] - t.obs[j];
            }
            row[self.obs_dim] = t.reward;
        }
        y
    }

    fn inputs(&self, batch: &[&Transition]) -> (Matrix, Matrix) {
        let obs = Matrix::from_rows(&batch.iter().map(|t| &t.obs[..]).collect::<Vec<_>>(), self.obs_dim);
        let act = Matrix::from_rows(
            &batch.iter().map(|t| &t.action[..]).collect::<Vec<_>>(),
            self.action_dim,
        );
        (obs, act)
    }

    /// Gaussian NLL of `member` on raw transitions, normalized with the
    /// ensemble normalizers, including the bound regularizer.
    pub fn nll_loss(&self, member: usize, batch: &[Transition]) -> Result<f64> {
        let refs: Vec<&Transition> = batch.iter().collect();
        let (obs, act) = self.inputs(&refs);
        let x = self.model_input(&obs, &act)?;
        let y = self.output_norm.normalize(&self.targets(&refs));
        let (loss, _) = self.members[member].loss_and_grad(&self.spec, &x, &y)?;
        if !loss.is_finite() {
            return Err(Error::non_finite(format!("nll loss of member {member}"), 0));
        }
        Ok(loss)
    }

    /// Fits every member on `data`.
    ///
    /// Normalizers are refreshed from all of `data`; a shared holdout split is
    /// carved out; each member trains on its own bootstrap of the rest; elites
    /// are the members with the lowest holdout likelihood loss.
    pub fn train(&mut self, data: &[Transition], cfg: &ModelTrainConfig, rng: &RngStream) -> Result<FitReport> {
        let n = data.len();
        if n < 2 * cfg.batch_size || n < 2 {
            return Ok(FitReport {
                skipped: true,
                epochs: 0,
                train_nll: vec![],
                holdout_nll: vec![],
                elites: self.elites.clone(),
                holdout_indices: vec![],
            });
        }
        let all: Vec<&Transition> = data.iter().collect();
        let (obs, act) = self.inputs(&all);
        self.input_norm = Normalizer::fit(&obs.hcat(&act));
        let targets = self.targets(&all);
        self.output_norm = Normalizer::fit(&targets);
        let x_all = self.model_input(&obs, &act)?;
        let y_all = self.output_norm.normalize(&targets);

        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, &mut rng.split("holdout"));
        let n_hold = ((n as f64 * cfg.holdout_fraction).round() as usize).clamp(1, n - 1);
        let holdout: Vec<usize> = order[..n_hold].to_vec();
        let train: Vec<usize> = order[n_hold..].to_vec();
        let x_hold = x_all.select_rows(&holdout);
        let y_hold = y_all.select_rows(&holdout);

        let mut member_rngs: Vec<RngStream> = (0..self.members.len())
            .map(|m| rng.split("member").split_index(m as u64))
            .collect();
        let boots: Vec<Vec<usize>> = member_rngs
            .iter_mut()
            .map(|r| (0..train.len()).map(|_| train[r.index(train.len())]).collect())
            .collect();

        let holdout_losses = |members: &[GaussianMember], spec: &MlpSpec| -> Result<Vec<f64>> {
            members
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let (mu, lv) = m.predict(spec, &x_hold)?;
                    let l = gaussian_nll(&mu, &lv, &y_hold);
                    if l.is_finite() {
                        Ok(l)
                    } else {
                        Err(Error::non_finite(format!("holdout nll of member {i}"), 0))
                    }
                })
                .collect()
        };

        let mut best = holdout_losses(&self.members, &self.spec)?;
        let mut stale = 0;
        let mut epochs = 0;
        let mut updates = 0;
        let mut train_nll = vec![0.0; self.members.len()];
        let batch = cfg.batch_size.min(train.len());
        'epochs: for _ in 0..cfg.max_epochs {
            epochs += 1;
            for (m, member) in self.members.iter_mut().enumerate() {
                let r = &mut member_rngs[m];
                let mut idx = boots[m].clone();
                shuffle(&mut idx, r);
                let mut sum = 0.0;
                let mut count = 0;
                for (b, chunk) in idx.chunks(batch).enumerate() {
                    if cfg.max_updates_per_fit > 0 && updates + b >= cfg.max_updates_per_fit {
                        break;
                    }
                    let x = x_all.select_rows(chunk);
                    let y = y_all.select_rows(chunk);
                    let (loss, grad) = member.loss_and_grad(&self.spec, &x, &y)?;
                    if !loss.is_finite() {
                        return Err(Error::non_finite(format!("nll loss of member {m}"), 0));
                    }
                    member.apply(&grad)?;
                    sum += loss;
                    count += 1;
                }
                if count > 0 {
                    train_nll[m] = sum / count as f64;
                }
            }
            updates += idx_batches(train.len(), batch);
            let current = holdout_losses(&self.members, &self.spec)?;
            let mut improved = false;
            for (b, c) in best.iter_mut().zip(&current) {
                if *b - c > 0.01 * b.abs() {
                    *b = *c;
                    improved = true;
                }
            }
            stale = if improved { 0 } else { stale + 1 };
            if stale > cfg.patience {
                break 'epochs;
            }
            if cfg.max_updates_per_fit > 0 && updates >= cfg.max_updates_per_fit {
                break 'epochs;
            }
        }

        let holdout_nll = holdout_losses(&self.members, &self.spec)?;
        let mut ranked: Vec<usize> = (0..self.members.len()).collect();
        ranked.sort_by(|&a, &b| holdout_nll[a].total_cmp(&holdout_nll[b]).then(a.cmp(&b)));
        ranked.truncate(self.elites.len());
        self.elites = ranked;
        self.fits += 1;
        Ok(FitReport {
            skipped: false,
            epochs,
            train_nll,
            holdout_nll,
            elites: self.elites.clone(),
            holdout_indices: holdout,
        })
    }

    /// Denormalized `(Δs, r)` means and standard deviations of every elite.
    pub fn predict_elites(&self, obs: &Matrix, actions: &Matrix) -> Result<ElitePredictions> {
        let x = self.model_input(obs, actions)?;
        let d = self.obs_dim + 1;
        let mut means = Vec::with_capacity(self.elites.len());
        let mut stds = Vec::with_capacity(self.elites.len());
        for &e in &self.elites {
            let (mut mu, lv) = self.members[e].predict(&self.spec, &x)?;
            let mut sd = lv;
            for i in 0..mu.rows() {
                for j in 0..d {
                    let s = self.output_norm.std[j];
                    mu.set(i, j, mu.get(i, j) * s + self.output_norm.mean[j]);
                    sd.set(i, j, (0.5 * sd.get(i, j)).exp() * s);
                }
            }
            means.push(mu);
            stds.push(sd);
        }
        Ok(ElitePredictions { means, stds })
    }

    fn disagreement_from(&self, pred: &ElitePredictions, row: usize) -> Result<f64> {
        let e = pred.means.len();
        if e < 2 {
            return Err(Error::InvalidInput(format!(
                "disagreement needs at least 2 elites, model has {e}"
            )));
        }
        let mut per_dim = vec![0.0; self.obs_dim];
        for (j, pd) in per_dim.iter_mut().enumerate() {
            let mu = pred.means.iter().map(|m| m.get(row, j)).sum::<f64>() / e as f64;
            *pd = pred
                .means
                .iter()
                .map(|m| (m.get(row, j) - mu).powi(2))
                .sum::<f64>()
                / (e - 1) as f64;
        }
        Ok(self.scalarization.reduce(&per_dim))
    }

    /// Ensemble disagreement for each row of a batch.
    pub fn disagreement_batch(&self, obs: &Matrix, actions: &Matrix) -> Result<Vec<f64>> {
        if self.elites.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "disagreement needs at least 2 elites, model has {}",
                self.elites.len()
            )));
        }
        let pred = self.predict_elites(obs, actions)?;
        (0..obs.rows()).map(|i| self.disagreement_from(&pred, i)).collect()
    }

    /// Unbiased variance of elite next-state means, scalarized over state dims.
    pub fn disagreement(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        Ok(self.disagreement_batch(&Matrix::row_vector(obs), &Matrix::row_vector(action))?[0])
    }

    /// Elite-average predicted next state.
    pub fn mean_next_obs(&self, obs: &Matrix, actions: &Matrix) -> Result<Matrix> {
        let pred = self.predict_elites(obs, actions)?;
        let e = pred.means.len() as f64;
        let mut out = obs.clone();
        for i in 0..obs.rows() {
            for j in 0..self.obs_dim {
                out.set(
                    i,
                    j,
                    obs.get(i, j) + pred.means.iter().map(|m| m.get(i, j)).sum::<f64>() / e,
                );
            }
        }
        Ok(out)
    }

    /// Samples a next state and reward for each row; row `i` draws from
    /// `rngs[i]` (member choice first, then the Gaussian noise).
    ///
    /// Uncertainty is the disagreement at `(obs, action)`, or 0 when the
    /// model has a single elite.
    pub fn step_batch(&self, obs: &Matrix, actions: &Matrix, rngs: &mut [RngStream]) -> Result<ModelStep> {
        let n = obs.rows();
        if rngs.len() != n {
            return Err(Error::shape("model step rngs", n, rngs.len()));
        }
        let pred = self.predict_elites(obs, actions)?;
        let e = self.elites.len();
        let mut next_obs = obs.clone();
        let mut reward = Vec::with_capacity(n);
        let mut member = Vec::with_capacity(n);
        let mut uncertainty = Vec::with_capacity(n);
        for (i, rng) in rngs.iter_mut().enumerate() {
            let k = rng.index(e);
            let (mu, sd) = (pred.means[k].row(i), pred.stds[k].row(i));
            let mut sample = Vec::with_capacity(self.obs_dim + 1);
            for (m, s) in mu.iter().zip(sd) {
                sample.push(m + s * rng.gaussian());
            }
            if sample.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite(
                    format!("model sample from member {}", self.elites[k]),
                    0,
                ));
            }
            for (j, v) in next_obs.row_mut(i).iter_mut().enumerate() {
                *v += sample[j];
            }
            reward.push(sample[self.obs_dim]);
            member.push(self.elites[k]);
            uncertainty.push(if e >= 2 {
                self.disagreement_from(&pred, i)?
            } else {
                0.0
            });
        }
        Ok(ModelStep {
            next_obs,
            reward,
            member,
            uncertainty,
        })
    }

    /// Single-state form of [`EnsembleModel::step_batch`]: `(s', r, member)`.
    pub fn sample_next(&self, obs: &[f64], action: &[f64], rng: &mut RngStream) -> Result<(Vec<f64>, f64, usize)> {
        let step = self.step_batch(
            &Matrix::row_vector(obs),
            &Matrix::row_vector(action),
            std::slice::from_mut(rng),
        )?;
        Ok((step.next_obs.into_vec(), step.reward[0], step.member[0]))
    }

    /// Writes the ensemble: a header, one network blob plus log-variance
    /// bounds per member, the normalizers and the elite indices.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"CPEN")?;
        for v in [
            1u32,
            self.obs_dim as u32,
            self.action_dim as u32,
            self.members.len() as u32,
            self.elites.len() as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[match self.scalarization {
            Scalarization::Mean => 0u8,
            Scalarization::Sum => 1,
            Scalarization::Max => 2,
        }])?;
        for m in &self.members {
            write_checkpoint(w, &self.spec, &m.params)?;
            write_f64s(w, &m.max_logvar)?;
            write_f64s(w, &m.min_logvar)?;
        }
        for v in [
            &self.input_norm.mean,
            &self.input_norm.std,
            &self.output_norm.mean,
            &self.output_norm.std,
        ] {
            write_f64s(w, v)?;
        }
        for &e in &self.elites {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads an ensemble written by [`EnsembleModel::save`]. Optimizer state
    /// is not persisted; it restarts at `learning_rate`.
    pub fn load<R: Read>(r: &mut R, learning_rate: f64) -> Result<Self> {
        let bad = |message: String| Error::Format {
            what: "ensemble checkpoint",
            message,
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"CPEN" {
            return Err(bad("bad magic".into()));
        }
        let mut header = [0u32; 5];
        for h in &mut header {
            *h = read_u32(r)?;
        }
        let [version, obs_dim, action_dim, n_members, n_elites] = header.map(|v| v as usize);
        if version != 1 {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut code = [0u8; 1];
        r.read_exact(&mut code)?;
        let scalarization = match code[0] {
            0 => Scalarization::Mean,
            1 => Scalarization::Sum,
            2 => Scalarization::Max,
            c => return Err(bad(format!("unknown scalarization {c}"))),
        };
        let mut spec = None;
        let mut members = Vec::with_capacity(n_members);
        for _ in 0..n_members {
            let (s, params) = read_checkpoint(r)?;
            let max_logvar = read_f64s(r)?;
            let min_logvar = read_f64s(r)?;
            let out = max_logvar.len();
            members.push(GaussianMember {
                net_opt: AdamState::new(params.len(), learning_rate),
                bound_opt: AdamState::new(2 * out, learning_rate),
                params,
                max_logvar,
                min_logvar,
            });
            spec = Some(s);
        }
        let spec = spec.ok_or_else(|| bad("no members".into()))?;
        if spec.input_dim() != obs_dim + action_dim || spec.output_dim() != 2 * (obs_dim + 1) {
            return Err(bad("network shape does not match dimensions".into()));
        }
        let input_norm = Normalizer {
            mean: read_f64s(r)?,
            std: read_f64s(r)?,
        };
        let output_norm = Normalizer {
            mean: read_f64s(r)?,
            std: read_f64s(r)?,
        };
        let elites = (0..n_elites)
            .map(|_| Ok(read_u32(r)? as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut model = EnsembleModel {
            obs_dim,
            action_dim,
            spec,
            members,
            elites: vec![0],
            input_norm: Normalizer::identity(obs_dim + action_dim),
            output_norm: Normalizer::identity(obs_dim + 1),
            scalarization,
            fits: 0,
        };
        model.set_normalizers(input_norm, output_norm)?;
        model.set_elites(elites)?;
        Ok(model)
    }
}

fn idx_batches(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Fisher-Yates shuffle driven by a stream.
pub(crate) fn shuffle<T>(v: &mut [T], rng: &mut RngStream) {
    for i in (1..v.len()).rev() {
        let j = rng.index(i + 1);
        v.swap(i, j);
    }
}

fn write_f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    w.write_all(&(v.len() as u32).to_le_bytes())?;
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let n = read_u32(r)? as usize;
    (0..n)
        .map(|_| {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        })
        .collect()
}

/// Free-function form of [`EnsembleModel::disagreement`].
pub fn disagreement(model: &EnsembleModel, obs: &[f64], action: &[f64]) -> Result<f64> {
    model.disagreement(obs, action)
}

/// Free-function form of [`EnsembleModel::sample_next`].
pub fn sample_next(
    model: &EnsembleModel,
    obs: &[f64],
    action: &[f64],
    rng: &mut RngStream,
) -> Result<(Vec<f64>, f64, usize)> {
    model.sample_next(obs, action, rng)
}

/// Free-function form of [`EnsembleModel::train`].
pub fn train_ensemble(
    model: &mut EnsembleModel,
    data: &[Transition],
    cfg: &ModelTrainConfig,
    rng: &RngStream,
) -> Result<FitReport> {
    model.train(data, cfg, rng)
}
