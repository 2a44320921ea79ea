//! The training loop: optimistic environment interaction, periodic model
//! fitting, conservative branched rollouts into the model buffer, policy
//! updates, and evaluation.

use std::cell::Cell;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::buffers::{sample_mixed, ModelBuffer, RealBuffer, RolloutTrace};
use crate::config::RunConfig;
use crate::dynamics::{EnsembleModel, FitReport};
use crate::envs::{EnvSpec, EnvState, Environment, Transition};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricRecord, MetricSink, RunManifest, RunStatus};
use crate::numerics::{Matrix, RngStream};
use crate::planner::{plan_batch, CandidateScore, PlanConfig, RunningScale};
use crate::policy::{SacAgent, UpdateReport};

/// Which phases plan with uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Optimistic exploration and conservative rollouts.
    #[default]
    Full,
    /// Rollouts plan on reward alone.
    ExploreOnly,
    /// Exploration plans on reward alone.
    RolloutOnly,
    /// No planning: `K = 1`, `α = 0` everywhere.
    Baseline,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Full, Mode::ExploreOnly, Mode::RolloutOnly, Mode::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::ExploreOnly => "explore_only",
            Mode::RolloutOnly => "rollout_only",
            Mode::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown mode `{s}`")))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Thresholded linear rollout-horizon ramp `[a, b, x, y]` over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct HorizonSchedule {
    pub a: f64,
    pub b: f64,
    pub x: f64,
    pub y: f64,
}

impl HorizonSchedule {
    pub fn new(a: f64, b: f64, x: f64, y: f64) -> Result<Self> {
        if !(a < b) {
            return Err(Error::InvalidInput(format!("schedule needs a < b, got [{a}, {b}, {x}, {y}]")));
        }
        if !(1.0 <= x && x <= y && y.is_finite()) {
            return Err(Error::InvalidInput(format!("schedule needs 1 <= x <= y, got [{a}, {b}, {x}, {y}]")));
        }
        Ok(HorizonSchedule { a, b, x, y })
    }
}

impl TryFrom<[f64; 4]> for HorizonSchedule {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        HorizonSchedule::new(v[0], v[1], v[2], v[3])
    }
}

impl From<HorizonSchedule> for [f64; 4] {
    fn from(s: HorizonSchedule) -> Self {
        [s.a, s.b, s.x, s.y]
    }
}

/// `floor(min(max(x + (e - a) / (b - a) * (y - x), x), y))`.
pub fn rollout_horizon(epoch: usize, s: &HorizonSchedule) -> usize {
    let e = epoch as f64;
    let h = (s.x + (e - s.a) / (s.b - s.a) * (s.y - s.x)).max(s.x).min(s.y);
    h.floor() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub epoch_steps: usize,
    /// Uniform-random actions for this many initial steps.
    pub warmup_steps: usize,
    /// Initial states per rollout phase (`M`).
    pub rollout_batch: usize,
    /// Policy updates per environment step (`G`).
    pub policy_updates_per_step: usize,
    pub rollout_schedule: HorizonSchedule,
    pub real_ratio: f64,
    pub model_buffer_capacity: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Evaluate with the rollout planner instead of the raw policy.
    pub eval_with_planner: bool,
    /// Diagnostic: label rollout transitions with the true reward.
    pub true_rollout_reward: bool,
    pub mode: Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 15_000,
            epoch_steps: 1000,
            warmup_steps: 1000,
            rollout_batch: 400,
            policy_updates_per_step: 5,
            rollout_schedule: HorizonSchedule {
                a: 20.0,
                b: 100.0,
                x: 1.0,
                y: 4.0,
            },
            real_ratio: 0.0,
            model_buffer_capacity: 100_000,
            eval_interval: 1000,
            eval_episodes: 10,
            eval_with_planner: false,
            true_rollout_reward: false,
            mode: Mode::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        for (name, v) in [
            ("total_steps", self.total_steps),
            ("epoch_steps", self.epoch_steps),
            ("rollout_batch", self.rollout_batch),
            ("policy_updates_per_step", self.policy_updates_per_step),
            ("model_buffer_capacity", self.model_buffer_capacity),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{prefix}.{name}"), "must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.real_ratio) {
            return Err(Error::config(format!("{prefix}.real_ratio"), "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Environment wrapper that counts `step` calls.
#[derive(Debug)]
pub struct CountingEnv<E> {
    pub inner: E,
    steps: Cell<u64>,
}

impl<E> CountingEnv<E> {
    pub fn new(inner: E) -> Self {
        CountingEnv {
            inner,
            steps: Cell::new(0),
        }
    }

    pub fn step_calls(&self) -> u64 {
        self.steps.get()
    }
}

impl<E: Environment> Environment for CountingEnv<E> {
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }
    fn action_dim(&self) -> usize {
        self.inner.action_dim()
    }
    fn action_bound(&self) -> f64 {
        self.inner.action_bound()
    }
    fn max_episode_steps(&self) -> usize {
        self.inner.max_episode_steps()
    }
    fn reset(&self, rng: &mut RngStream) -> EnvState {
        self.inner.reset(rng)
    }
    fn observe(&self, state: &EnvState) -> Vec<f64> {
        self.inner.observe(state)
    }
    fn step(&self, state: &EnvState, action: &[f64]) -> Result<(EnvState, Transition)> {
        self.steps.set(self.steps.get() + 1);
        self.inner.step(state, action)
    }
    fn is_terminal(&self, obs: &[f64]) -> bool {
        self.inner.is_terminal(obs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalStats {
    pub mean: f64,
    /// Population standard deviation across episodes.
    pub std: f64,
}

/// Runs `episodes` full episodes; episode `i` resets from `rng.split_index(i)`.
pub fn evaluate<E: Environment + ?Sized>(
    env: &E,
    policy: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    episodes: usize,
    rng: &RngStream,
) -> Result<EvalStats> {
    if episodes == 0 {
        return Err(Error::InvalidInput("evaluation needs at least one episode".into()));
    }
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut state = env.reset(&mut rng.split_index(ep as u64));
        let mut ret = 0.0;
        loop {
            let obs = env.observe(&state);
            let action = policy(&obs)?;
            let (next, t) = env.step(&state, &action)?;
            ret += t.reward;
            state = next;
            if t.done || t.truncated {
                break;
            }
        }
        returns.push(ret);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok(EvalStats {
        mean,
        std: var.sqrt(),
    })
}

/// Planner settings a phase uses under the current mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhasePlan {
    pub alpha: f64,
    pub candidates: usize,
}

/// One planning decision, recorded when tracing is on.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecisionTrace {
    pub phase: &'static str,
    pub env_steps: usize,
    /// Rollout branch; 0 for exploration.
    pub branch: usize,
    pub depth: usize,
    pub alpha: f64,
    pub candidates: usize,
    pub selected: usize,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub scores: Vec<CandidateScore>,
}

/// All mutable state of one run.
pub struct Trainer {
    pub config: RunConfig,
    seed: u64,
    env: CountingEnv<EnvSpec>,
    pub model: EnsembleModel,
    pub agent: SacAgent,
    pub real: RealBuffer,
    pub model_buffer: ModelBuffer,
    state: EnvState,
    steps: usize,
    env_phase_calls: u64,
    fit_attempts: usize,
    fits: usize,
    last_fit: Option<FitReport>,
    rollout_phases: usize,
    policy_updates: usize,
    root: RngStream,
    reset_rng: RngStream,
    scale: RunningScale,
    trace: Option<Vec<DecisionTrace>>,
}

impl Trainer {
    pub fn new(config: RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let spec = EnvSpec::new(config.env);
        let root = RngStream::new(seed, 0);
        let model = EnsembleModel::new(
            spec.obs_dim(),
            spec.action_dim(),
            &config.model.ensemble,
            config.model.training.learning_rate,
            &root.split("model"),
        )?;
        let agent = SacAgent::new(
            spec.obs_dim(),
            spec.action_dim(),
            spec.action_bound(),
            &config.policy,
            &root.split("policy"),
        )?;
        let mut reset_rng = root.split("reset");
        let state = spec.reset(&mut reset_rng);
        Ok(Trainer {
            model_buffer: ModelBuffer::new(config.trainer.model_buffer_capacity),
            trace: config.metrics.trace_decisions.then(Vec::new),
            config,
            seed,
            env: CountingEnv::new(spec),
            model,
            agent,
            real: RealBuffer::new(),
            state,
            steps: 0,
            env_phase_calls: 0,
            fit_attempts: 0,
            fits: 0,
            last_fit: None,
            rollout_phases: 0,
            policy_updates: 0,
            root,
            reset_rng,
            scale: RunningScale::default(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn env(&self) -> &CountingEnv<EnvSpec> {
        &self.env
    }

    /// Observation of the current real state.
    pub fn observation(&self) -> Vec<f64> {
        self.env.observe(&self.state)
    }

    pub fn env_steps(&self) -> usize {
        self.steps
    }

    pub fn epoch(&self) -> usize {
        self.steps / self.config.trainer.epoch_steps
    }

    pub fn env_phase_calls(&self) -> u64 {
        self.env_phase_calls
    }

    pub fn fits(&self) -> usize {
        self.fits
    }

    pub fn last_fit(&self) -> Option<&FitReport> {
        self.last_fit.as_ref()
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn take_trace(&mut self) -> Vec<DecisionTrace> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Exploration planner settings under the current mode.
    pub fn explore_plan(&self) -> PhasePlan {
        let p = &self.config.planner;
        match self.config.trainer.mode {
            Mode::Full | Mode::ExploreOnly => PhasePlan {
                alpha: p.alpha_o,
                candidates: p.candidates,
            },
            Mode::RolloutOnly => PhasePlan {
                alpha: 0.0,
                candidates: p.candidates,
            },
            Mode::Baseline => PhasePlan {
                alpha: 0.0,
                candidates: 1,
            },
        }
    }

    /// Rollout planner settings under the current mode.
    pub fn rollout_plan(&self) -> PhasePlan {
        let p = &self.config.planner;
        match self.config.trainer.mode {
            Mode::Full | Mode::RolloutOnly => PhasePlan {
                alpha: -p.alpha_c,
                candidates: p.candidates,
            },
            Mode::ExploreOnly => PhasePlan {
                alpha: 0.0,
                candidates: p.candidates,
            },
            Mode::Baseline => PhasePlan {
                alpha: 0.0,
                candidates: 1,
            },
        }
    }

    fn plan_config(&self, plan: PhasePlan) -> PlanConfig {
        let p = &self.config.planner;
        PlanConfig {
            candidates: plan.candidates,
            horizon: p.horizon,
            alpha: plan.alpha,
            terminate_on_done: p.terminate_on_done,
            timing: p.timing,
            uncertainty_scale: if p.normalize_uncertainty {
                self.scale.scale()
            } else {
                1.0
            },
        }
    }

    /// Stream that seeds the exploration decision at env step `step`.
    pub fn explore_stream(&self, step: usize) -> RngStream {
        self.root.split("explore").split_index(step as u64)
    }

    /// Actions for a batch of states under `plan`. With a single candidate
    /// the planner is skipped: candidate 0's first action is exactly the
    /// policy sample from `parent.split_index(0)`, so no model call is needed.
    fn choose(
        &mut self,
        plan: PhasePlan,
        states: &Matrix,
        parents: &[RngStream],
        phase: &'static str,
        depth: usize,
        branches: &[usize],
    ) -> Result<Matrix> {
        if plan.candidates == 1 && self.trace.is_none() {
            let mut streams: Vec<RngStream> = parents.iter().map(|p| p.split_index(0)).collect();
            return self.agent.actor.sample_batch(states, &mut streams);
        }
        let cfg = self.plan_config(plan);
        let env = &self.env;
        let outcomes = plan_batch(&self.agent.actor, states, &self.model, &cfg, parents, &|o| env.is_terminal(o))?;
        let mut actions = Matrix::zeros(states.rows(), self.env.action_dim());
        for (i, out) in outcomes.into_iter().enumerate() {
            actions.row_mut(i).copy_from_slice(&out.action);
            if let Some(trace) = self.trace.as_mut() {
                trace.push(DecisionTrace {
                    phase,
                    env_steps: self.steps,
                    branch: branches[i],
                    depth,
                    alpha: out.alpha,
                    candidates: plan.candidates,
                    selected: out.selected,
                    obs: states.row(i).to_vec(),
                    action: out.action,
                    scores: out.scores,
                });
            }
        }
        Ok(actions)
    }

    /// Action the exploration phase takes from `obs` at the current step.
    pub fn exploration_action(&mut self, obs: &[f64]) -> Result<Vec<f64>> {
        let parent = self.explore_stream(self.steps);
        if self.steps < self.config.trainer.warmup_steps {
            let mut r = parent.split("warmup");
            let b = self.env.action_bound();
            return Ok((0..self.env.action_dim())
                .map(|_| b * (2.0 * r.uniform() - 1.0))
                .collect());
        }
        let plan = self.explore_plan();
        Ok(self
            .choose(plan, &Matrix::row_vector(obs), &[parent], "explore", 0, &[0])?
            .into_vec())
    }

    /// One real step: choose an action, execute it, store the transition,
    /// and refit the model on schedule.
    pub fn environment_phase(&mut self) -> Result<Transition> {
        let index = self.steps;
        let wrap = |e: Error| Error::Phase {
            phase: "environment",
            index,
            source: Box::new(e),
        };
        let obs = self.env.observe(&self.state);
        let action = self.exploration_action(&obs).map_err(wrap)?;
        let (next, t) = self.env.step(&self.state, &action).map_err(wrap)?;
        self.real.push(t.clone()).map_err(wrap)?;
        self.env_phase_calls += 1;
        self.steps += 1;
        self.state = if t.done || t.truncated {
            self.env.reset(&mut self.reset_rng)
        } else {
            next
        };
        if self.steps % self.config.model.training.train_interval == 0 {
            self.fit_model().map_err(wrap)?;
        }
        Ok(t)
    }

    /// Fits the ensemble on all real data. Skipped fits (too little data)
    /// leave the previous model in place.
    pub fn fit_model(&mut self) -> Result<FitReport> {
        let rng = self.root.split("fit").split_index(self.fit_attempts as u64);
        self.fit_attempts += 1;
        let report = self
            .model
            .train(self.real.as_slice(), &self.config.model.training, &rng)?;
        if !report.skipped {
            self.fits += 1;
            self.last_fit = Some(report.clone());
        }
        Ok(report)
    }

    /// Replaces the model with an externally built one, which then counts
    /// as fitted.
    pub fn install_model(&mut self, model: EnsembleModel) -> Result<()> {
        if model.obs_dim() != self.env.obs_dim() || model.action_dim() != self.env.action_dim() {
            return Err(Error::shape("installed model obs dim", self.env.obs_dim(), model.obs_dim()));
        }
        self.model = model;
        self.fits += 1;
        self.last_fit = None;
        Ok(())
    }

    /// Branched model rollouts from real states into the model buffer.
    /// Returns the number of transitions pushed.
    pub fn rollout_phase(&mut self) -> Result<usize> {
        if self.real.is_empty() {
            return Err(Error::EmptySource("real"));
        }
        if self.fits == 0 {
            return Err(Error::InvalidInput("rollouts need a fitted model".into()));
        }
        let rng = self.root.split("rollout").split_index(self.rollout_phases as u64);
        self.rollout_phases += 1;
        let horizon = rollout_horizon(self.epoch(), &self.config.trainer.rollout_schedule);
        let m = self.config.trainer.rollout_batch;
        let mut pick = rng.split("starts");
        let starts: Vec<usize> = (0..m).map(|_| pick.index(self.real.len())).collect();
        let branch_rngs: Vec<RngStream> = (0..m).map(|i| rng.split_index(i as u64)).collect();
        let obs_dim = self.env.obs_dim();
        let mut obs = Matrix::from_rows(
            &starts.iter().map(|&i| &self.real.get(i).obs[..]).collect::<Vec<_>>(),
            obs_dim,
        );
        let mut active: Vec<usize> = (0..m).collect();
        let plan = self.rollout_plan();
        let mut pushed = 0;
        for h in 0..horizon {
            if active.is_empty() {
                break;
            }
            let parents: Vec<RngStream> = active
                .iter()
                .map(|&b| branch_rngs[b].split("plan").split_index(h as u64))
                .collect();
            let actions = self
                .choose(plan, &obs, &parents, "rollout", h, &active)
                .map_err(|e| rollout_error(e, 0))?;
            let mut streams: Vec<RngStream> = active
                .iter()
                .map(|&b| branch_rngs[b].split("model").split_index(h as u64))
                .collect();
            let step = self
                .model
                .step_batch(&obs, &actions, &mut streams)
                .map_err(|e| rollout_error(e, active[0]))?;
            let mut keep = Vec::with_capacity(active.len());
            for (i, &b) in active.iter().enumerate() {
                let next = step.next_obs.row(i).to_vec();
                let done = self.env.is_terminal(&next);
                let reward = if self.config.trainer.true_rollout_reward {
                    self.env.inner.true_reward(obs.row(i), actions.row(i), &next)
                } else {
                    step.reward[i]
                };
                let t = Transition {
                    obs: obs.row(i).to_vec(),
                    action: actions.row(i).to_vec(),
                    reward,
                    next_obs: next,
                    done,
                    truncated: false,
                };
                let u = step.uncertainty[i];
                self.model_buffer
                    .push(
                        t,
                        RolloutTrace {
                            member: step.member[i],
                            disagreement: u,
                        },
                    )
                    .map_err(|e| rollout_error(e, b))?;
                self.scale.observe(u);
                pushed += 1;
                if !done {
                    keep.push(i);
                }
            }
            obs = step.next_obs.select_rows(&keep);
            active = keep.iter().map(|&i| active[i]).collect();
        }
        Ok(pushed)
    }

    fn can_update_policy(&self) -> bool {
        let n_real = crate::buffers::real_share(self.config.policy.batch_size, self.config.trainer.real_ratio);
        (n_real == 0 || !self.real.is_empty())
            && (n_real == self.config.policy.batch_size || !self.model_buffer.is_empty())
    }

    /// `G` SAC updates on mixed batches; one report per update.
    pub fn policy_phase(&mut self) -> Result<Vec<UpdateReport>> {
        let g = self.config.trainer.policy_updates_per_step;
        let mut reports = Vec::with_capacity(g);
        for _ in 0..g {
            let mut rng = self.root.split("update").split_index(self.policy_updates as u64);
            self.policy_updates += 1;
            let batch = sample_mixed(
                &self.real,
                &self.model_buffer,
                self.config.policy.batch_size,
                self.config.trainer.real_ratio,
                &mut rng,
            )?;
            reports.push(self.agent.update(&batch, &mut rng)?);
        }
        Ok(reports)
    }

    /// One iteration of the outer loop.
    pub fn step(&mut self) -> Result<()> {
        self.environment_phase()?;
        if self.fits > 0 && self.steps % self.config.model.training.train_interval == 0 {
            self.rollout_phase()?;
        }
        if self.can_update_policy() {
            self.policy_phase().map_err(|e| Error::Phase {
                phase: "policy",
                index: self.steps,
                source: Box::new(e),
            })?;
        }
        Ok(())
    }

    /// Deterministic raw policy (or the rollout planner when configured) on
    /// fixed evaluation resets.
    pub fn evaluate(&self) -> Result<EvalStats> {
        let rng = self.root.split("eval");
        let episodes = self.config.trainer.eval_episodes;
        let spec = self.env.inner;
        if self.config.trainer.eval_with_planner {
            let cfg = self.plan_config(self.rollout_plan());
            let mut decision = 0u64;
            let plan_rng = self.root.split("eval-plan");
            let mut policy = |obs: &[f64]| {
                decision += 1;
                let out = plan_batch(
                    &self.agent.actor,
                    &Matrix::row_vector(obs),
                    &self.model,
                    &cfg,
                    &[plan_rng.split_index(decision)],
                    &|o| spec.is_terminal(o),
                )?;
                Ok(out.into_iter().next().expect("one state").action)
            };
            evaluate(&spec, &mut policy, episodes, &rng)
        } else {
            let mut unused = RngStream::new(0, 0);
            let mut policy = |obs: &[f64]| self.agent.actor.act(obs, &mut unused, true);
            evaluate(&spec, &mut policy, episodes, &rng)
        }
    }

    /// Model error on the last fit's holdout split, or on all real data
    /// before the first fit.
    pub fn model_holdout_mse(&self) -> Result<f64> {
        match &self.last_fit {
            Some(fit) if !fit.holdout_indices.is_empty() => {
                let holdout: Vec<Transition> = fit
                    .holdout_indices
                    .iter()
                    .map(|&i| self.real.get(i).clone())
                    .collect();
                metrics::model_prediction_error(&self.model, &holdout)
            }
            _ => metrics::model_prediction_error(&self.model, self.real.as_slice()),
        }
    }

    /// Mean disagreement over the model buffer; 0 while it is empty or the
    /// model has fewer than two elites.
    pub fn rollout_uncertainty(&self) -> Result<f64> {
        if self.model_buffer.is_empty() || self.model.elites().len() < 2 {
            return Ok(0.0);
        }
        metrics::rollout_uncertainty_metric(&self.model, &self.model_buffer)
    }

    pub fn metric_record(&self, eval: EvalStats, wall_seconds: f64) -> Result<MetricRecord> {
        Ok(MetricRecord {
            schema_version: metrics::SCHEMA_VERSION,
            env_steps: self.steps,
            eval_return_mean: eval.mean,
            eval_return_std: eval.std,
            model_holdout_mse: self.model_holdout_mse()?,
            rollout_uncertainty: self.rollout_uncertainty()?,
            wall_seconds,
            mode: self.config.trainer.mode.name().to_string(),
            seed: self.seed,
        })
    }
}

fn rollout_error(e: Error, branch: usize) -> Error {
    Error::Phase {
        phase: "rollout",
        index: branch,
        source: Box::new(e),
    }
}

/// Paths and final evaluation of a finished run.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub final_eval: EvalStats,
    pub records: usize,
    pub metrics_path: PathBuf,
    pub manifest_path: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const MODEL_BUFFER_FILE: &str = "model_buffer.bin";

/// Runs the full loop, writing metrics and a manifest into `out_dir`.
///
/// On failure the manifest is rewritten with status `failed` and the
/// metrics already written are kept.
pub fn run(config: &RunConfig, seed: u64, out_dir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut manifest = RunManifest::new(config, seed)?;
    manifest.outputs.insert("metrics".into(), METRICS_FILE.into());
    if config.metrics.trace_decisions {
        manifest.outputs.insert("decisions".into(), DECISIONS_FILE.into());
    }
    if config.metrics.dump_model_buffer {
        manifest.outputs.insert("model_buffer".into(), MODEL_BUFFER_FILE.into());
    }
    manifest.write(&manifest_path)?;
    let mut sink = MetricSink::create(&metrics_path)?;
    match run_inner(config, seed, out_dir, &mut sink) {
        Ok(final_eval) => {
            manifest.status = RunStatus::Complete;
            manifest.records = sink.records();
            manifest.write(&manifest_path)?;
            Ok(RunSummary {
                final_eval,
                records: sink.records(),
                metrics_path,
                manifest_path,
            })
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.partial_metrics = true;
            manifest.records = sink.records();
            manifest.error = Some(e.to_string());
            manifest.write(&manifest_path)?;
            Err(e)
        }
    }
}

fn run_inner(config: &RunConfig, seed: u64, out_dir: &Path, sink: &mut MetricSink) -> Result<EvalStats> {
    let start = Instant::now();
    let clock = |start: &Instant| {
        if config.metrics.record_wall_clock {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };
    let mut trainer = Trainer::new(config.clone(), seed)?;
    let mut decisions = if config.metrics.trace_decisions {
        Some(BufWriter::new(File::create(out_dir.join(DECISIONS_FILE))?))
    } else {
        None
    };
    let total = config.trainer.total_steps;
    let interval = config.trainer.eval_interval;
    while trainer.env_steps() < total {
        trainer.step()?;
        if let Some(w) = decisions.as_mut() {
            for d in trainer.take_trace() {
                serde_json::to_writer(&mut *w, &d)?;
                w.write_all(b"\n")?;
            }
        }
        if trainer.env_steps() % interval == 0 {
            let eval = trainer.evaluate()?;
            sink.append(&trainer.metric_record(eval, clock(&start))?)?;
        }
    }
    let final_eval = trainer.evaluate()?;
    sink.append(&trainer.metric_record(final_eval, clock(&start))?)?;
    if let Some(mut w) = decisions {
        w.flush()?;
    }
    if config.metrics.dump_model_buffer {
        let mut w = BufWriter::new(File::create(out_dir.join(MODEL_BUFFER_FILE))?);
        trainer
            .model_buffer
            .dump(&mut w, trainer.env.obs_dim(), trainer.env.action_dim())?;
        w.flush()?;
    }
    Ok(final_eval)
}
