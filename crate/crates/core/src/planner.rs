//! Uncertainty-aware policy-guided MPC.
//!
//! Each decision samples `K` candidate trajectories of length `H_p` from the
//! policy inside the learned model, scores them by predicted reward plus a
//! signed multiple of ensemble disagreement, and returns the first action of
//! the best one. A negative coefficient gives the conservative rollout
//! planner, a positive one the optimistic exploration planner.

use serde::{Deserialize, Serialize};

use crate::dynamics::{EnsembleModel, ModelStep};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};
use crate::policy::Actor;

/// Source of candidate actions. Row `i` must draw only from `rngs[i]`.
pub trait ProposalPolicy {
    fn propose(&self, obs: &Matrix, rngs: &mut [RngStream]) -> Result<Matrix>;
}

/// One-step model used for planning. Row `i` must draw only from `rngs[i]`
/// and report its disagreement in `uncertainty[i]`.
pub trait RolloutModel {
    fn predict_step(&self, obs: &Matrix, actions: &Matrix, rngs: &mut [RngStream]) -> Result<ModelStep>;
}

impl ProposalPolicy for Actor {
    fn propose(&self, obs: &Matrix, rngs: &mut [RngStream]) -> Result<Matrix> {
        self.sample_batch(obs, rngs)
    }
}

impl RolloutModel for EnsembleModel {
    fn predict_step(&self, obs: &Matrix, actions: &Matrix, rngs: &mut [RngStream]) -> Result<ModelStep> {
        if self.elites().len() < 2 {
            return Err(Error::InvalidInput(format!(
                "planning needs at least 2 elites, model has {}",
                self.elites().len()
            )));
        }
        self.step_batch(obs, actions, rngs)
    }
}

/// Which planning steps contribute disagreement to a candidate's score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyTiming {
    /// `t = 0 .. H_p-1`, reward and disagreement at every step.
    #[default]
    AllSteps,
    /// Reward at `t = 0 .. H_p`, disagreement only at `t = 1 .. H_p`.
    AfterFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    #[serde(rename = "K")]
    pub candidates: usize,
    #[serde(rename = "H_p")]
    pub horizon: usize,
    pub alpha: f64,
    pub terminate_on_done: bool,
    pub timing: UncertaintyTiming,
    /// Disagreement is divided by this before scoring.
    pub uncertainty_scale: f64,
}

impl PlanConfig {
    pub fn new(candidates: usize, horizon: usize, alpha: f64) -> Self {
        PlanConfig {
            candidates,
            horizon,
            alpha,
            terminate_on_done: true,
            timing: UncertaintyTiming::AllSteps,
            uncertainty_scale: 1.0,
        }
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        PlanConfig {
            alpha,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 {
            return Err(Error::config("planner.K", "must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(Error::config("planner.H_p", "must be at least 1"));
        }
        if !self.alpha.is_finite() {
            return Err(Error::config("planner.alpha", "must be finite"));
        }
        if !(self.uncertainty_scale > 0.0 && self.uncertainty_scale.is_finite()) {
            return Err(Error::config("planner.uncertainty_scale", "must be positive"));
        }
        Ok(())
    }

    fn simulated_steps(&self) -> usize {
        match self.timing {
            UncertaintyTiming::AllSteps => self.horizon,
            UncertaintyTiming::AfterFirst => self.horizon + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateScore {
    pub candidate: usize,
    pub reward_sum: f64,
    pub uncertainty_sum: f64,
    pub total: f64,
    pub first_action: Vec<f64>,
    pub steps: usize,
}

impl CandidateScore {
    fn new(candidate: usize, first_action: Vec<f64>) -> Self {
        CandidateScore {
            candidate,
            reward_sum: 0.0,
            uncertainty_sum: 0.0,
            total: 0.0,
            first_action,
            steps: 0,
        }
    }
}

/// Index of the highest total; the lowest index wins ties.
pub fn select(scores: &[CandidateScore]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        match best {
            Some(b) if !(s.total > scores[b].total) => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Full record of one planning decision.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanOutcome {
    pub action: Vec<f64>,
    pub selected: usize,
    pub alpha: f64,
    pub scores: Vec<CandidateScore>,
}

/// Plans from every row of `states` at once. State `i` uses `rngs[i]`;
/// candidate `k` of that state draws from `rngs[i].split_index(k)`, so the
/// result for a state does not depend on the other rows or on `K`.
///
/// The parent streams are not advanced; callers step them between decisions.
pub fn plan_batch<P, M>(
    policy: &P,
    states: &Matrix,
    model: &M,
    cfg: &PlanConfig,
    rngs: &[RngStream],
    is_terminal: &dyn Fn(&[f64]) -> bool,
) -> Result<Vec<PlanOutcome>>
where
    P: ProposalPolicy + ?Sized,
    M: RolloutModel + ?Sized,
{
    cfg.validate()?;
    if rngs.len() != states.rows() {
        return Err(Error::shape("planner rngs", states.rows(), rngs.len()));
    }
    let k = cfg.candidates;
    let n = states.rows();
    let rows = n * k;
    let row_index: Vec<usize> = (0..rows).map(|r| r / k).collect();
    let mut obs = states.select_rows(&row_index);
    let mut streams: Vec<RngStream> = (0..rows)
        .map(|r| rngs[r / k].split_index((r % k) as u64))
        .collect();
    let mut scores: Vec<CandidateScore> = Vec::with_capacity(rows);
    // rows still accumulating, as indices into `scores`
    let mut active: Vec<usize> = (0..rows).collect();

    for t in 0..cfg.simulated_steps() {
        if active.is_empty() {
            break;
        }
        let saved = streams.clone();
        let actions = policy.propose(&obs, &mut streams).map_err(|e| {
            locate(e, &active, k, |i| {
                let mut s = [saved[i].clone()];
                policy.propose(&obs.select_rows(&[i]), &mut s).map(drop)
            })
        })?;
        let saved = streams.clone();
        let step = model.predict_step(&obs, &actions, &mut streams).map_err(|e| {
            locate(e, &active, k, |i| {
                let mut s = [saved[i].clone()];
                model
                    .predict_step(&obs.select_rows(&[i]), &actions.select_rows(&[i]), &mut s)
                    .map(drop)
            })
        })?;
        if t == 0 {
            for r in 0..rows {
                scores.push(CandidateScore::new(r % k, actions.row(r).to_vec()));
            }
        }
        let count_u = t > 0 || cfg.timing == UncertaintyTiming::AllSteps;
        let mut keep = Vec::with_capacity(active.len());
        for (i, &r) in active.iter().enumerate() {
            let sc = &mut scores[r];
            sc.reward_sum += step.reward[i];
            if count_u {
                sc.uncertainty_sum += step.uncertainty[i] / cfg.uncertainty_scale;
            }
            sc.steps += 1;
            if !(cfg.terminate_on_done && is_terminal(step.next_obs.row(i))) {
                keep.push(i);
            }
        }
        if keep.len() == active.len() {
            obs = step.next_obs;
        } else {
            obs = step.next_obs.select_rows(&keep);
            let mut kept_streams = Vec::with_capacity(keep.len());
            let mut drained: Vec<Option<RngStream>> = streams.into_iter().map(Some).collect();
            for &i in &keep {
                kept_streams.push(drained[i].take().expect("each row kept once"));
            }
            streams = kept_streams;
            active = keep.iter().map(|&i| active[i]).collect();
        }
    }

    for s in &mut scores {
        s.total = s.reward_sum + cfg.alpha * s.uncertainty_sum;
    }
    let mut out = Vec::with_capacity(n);
    let mut it = scores.into_iter();
    for _ in 0..n {
        let group: Vec<CandidateScore> = it.by_ref().take(k).collect();
        let selected = select(&group).expect("K >= 1");
        out.push(PlanOutcome {
            action: group[selected].first_action.clone(),
            selected,
            alpha: cfg.alpha,
            scores: group,
        });
    }
    Ok(out)
}

/// Names the first candidate whose row fails on its own; falls back to the
/// batch error when no single row reproduces it.
fn locate(err: Error, active: &[usize], k: usize, mut probe: impl FnMut(usize) -> Result<()>) -> Error {
    for (i, &r) in active.iter().enumerate() {
        if let Err(e) = probe(i) {
            return Error::Candidate {
                candidate: r % k,
                source: Box::new(e),
            };
        }
    }
    err
}

/// Scores all `K` candidates from a single state.
pub fn score_candidates<P, M>(
    policy: &P,
    s: &[f64],
    model: &M,
    cfg: &PlanConfig,
    rng: &RngStream,
    is_terminal: &dyn Fn(&[f64]) -> bool,
) -> Result<Vec<CandidateScore>>
where
    P: ProposalPolicy + ?Sized,
    M: RolloutModel + ?Sized,
{
    let mut out = plan_batch(policy, &Matrix::row_vector(s), model, cfg, std::slice::from_ref(rng), is_terminal)?;
    Ok(out.pop().expect("one state").scores)
}

/// First action of the highest-scoring candidate.
pub fn up_mpc<P, M>(
    policy: &P,
    s: &[f64],
    model: &M,
    cfg: &PlanConfig,
    rng: &RngStream,
    is_terminal: &dyn Fn(&[f64]) -> bool,
) -> Result<Vec<f64>>
where
    P: ProposalPolicy + ?Sized,
    M: RolloutModel + ?Sized,
{
    let mut out = plan_batch(policy, &Matrix::row_vector(s), model, cfg, std::slice::from_ref(rng), is_terminal)?;
    Ok(out.pop().expect("one state").action)
}

fn positive_rate(name: &str, rate: f64) -> Result<()> {
    if rate > 0.0 && rate.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("planner.{name}"), format!("must be positive, got {rate}")))
    }
}

/// [`up_mpc`] with the disagreement charged as a penalty `-alpha_c`.
pub fn conservative_action<P, M>(
    policy: &P,
    s: &[f64],
    model: &M,
    cfg: &PlanConfig,
    alpha_c: f64,
    rng: &RngStream,
    is_terminal: &dyn Fn(&[f64]) -> bool,
) -> Result<Vec<f64>>
where
    P: ProposalPolicy + ?Sized,
    M: RolloutModel + ?Sized,
{
    positive_rate("alpha_c", alpha_c)?;
    up_mpc(policy, s, model, &cfg.with_alpha(-alpha_c), rng, is_terminal)
}

/// [`up_mpc`] with the disagreement paid as a bonus `+alpha_o`.
pub fn optimistic_action<P, M>(
    policy: &P,
    s: &[f64],
    model: &M,
    cfg: &PlanConfig,
    alpha_o: f64,
    rng: &RngStream,
    is_terminal: &dyn Fn(&[f64]) -> bool,
) -> Result<Vec<f64>>
where
    P: ProposalPolicy + ?Sized,
    M: RolloutModel + ?Sized,
{
    positive_rate("alpha_o", alpha_o)?;
    up_mpc(policy, s, model, &cfg.with_alpha(alpha_o), rng, is_terminal)
}

/// Running standard deviation of observed disagreement, used as
/// `uncertainty_scale` when normalization is enabled.
#[derive(Debug, Clone, Default)]
pub struct RunningScale {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningScale {
    pub fn observe(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Population std, or 1 until two samples have been seen or while the
    /// spread is negligible.
    pub fn scale(&self) -> f64 {
        if self.count < 2 {
            return 1.0;
        }
        let sd = (self.m2 / self.count as f64).sqrt();
        if sd > 1e-12 {
            sd
        } else {
            1.0
        }
    }
}

/// Never terminates; for planning without a termination predicate.
pub fn never_terminal(_: &[f64]) -> bool {
    false
}
