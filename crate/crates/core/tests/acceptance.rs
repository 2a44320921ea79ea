//! Acceptance suite. Runs every criterion in order, prints one
//! `PASS`/`FAIL` line each, and exits non-zero if any failed.
//!
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 3 5`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use coplanner::config::{desk_preset, with_mode, RunConfig};
use coplanner::dynamics::{EnsembleConfig, EnsembleModel, ModelTrainConfig, ModelStep, Normalizer};
use coplanner::envs::{EnvKind, Transition};
use coplanner::metrics::{self, MetricRecord};
use coplanner::numerics::{mlp_gradient, Activation, Matrix, MlpSpec, RngStream};
use coplanner::planner::{
    conservative_action, never_terminal, optimistic_action, plan_batch, select, CandidateScore, PlanConfig,
    ProposalPolicy, RolloutModel,
};
use coplanner::trainer::{self, rollout_horizon, HorizonSchedule, Mode, Trainer};
use coplanner::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- 1

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET_S: f64 = 10.0;
const FD_EPS: f64 = 1e-6;

/// Relative error with a floor so near-zero components compare absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::new(2024, 1);
    let mut worst = 0.0f64;
    let mut configs = 0;
    let mut skipped_kinks = 0;
    while configs < 50 {
        let depth = 1 + rng.index(3);
        let mut widths = vec![1 + rng.index(5)];
        widths.extend((0..depth).map(|_| 1 + rng.index(8)));
        widths.push(1 + rng.index(4));
        let act = if configs % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let spec = MlpSpec::new(widths, act).unwrap();
        let mut params = spec.init_params(&mut rng);
        for l in 0..spec.num_layers() {
            for b in &mut params[spec.bias_range(l)] {
                *b = rng.uniform() - 0.5;
            }
        }
        let x: Vec<f64> = rng.draw_gaussian(spec.input_dim());
        let up: Vec<f64> = rng.draw_gaussian(spec.output_dim());
        let f = |p: &[f64], x: &[f64]| -> f64 {
            let y = spec.forward(p, x).unwrap();
            y.iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        // a relu pre-activation within reach of the probe makes the finite
        // difference meaningless; redraw instead
        if act == Activation::Relu && near_kink(&spec, &params.0, &x) {
            skipped_kinks += 1;
            continue;
        }
        let (g, dx) = mlp_gradient(&spec, &params, &x, &up).unwrap();
        let mut p = params.0.clone();
        for i in 0..p.len() {
            let orig = p[i];
            p[i] = orig + FD_EPS;
            let hi = f(&p, &x);
            p[i] = orig - FD_EPS;
            let lo = f(&p, &x);
            p[i] = orig;
            worst = worst.max(rel_err(g[i], (hi - lo) / (2.0 * FD_EPS)));
        }
        let mut xv = x.clone();
        for i in 0..xv.len() {
            let orig = xv[i];
            xv[i] = orig + FD_EPS;
            let hi = f(&p, &xv);
            xv[i] = orig - FD_EPS;
            let lo = f(&p, &xv);
            xv[i] = orig;
            worst = worst.max(rel_err(dx[i], (hi - lo) / (2.0 * FD_EPS)));
        }
        configs += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < GRAD_TOL && secs < GRAD_BUDGET_S,
        format!(
            "max rel err {worst:.2e} (< {GRAD_TOL:.0e}) over {configs} configs ({skipped_kinks} redrawn near relu kinks), {secs:.2} s (< {GRAD_BUDGET_S} s)"
        ),
    )
}

/// True if any hidden pre-activation is within 1e-4 of zero, where a
/// parameter perturbation of FD_EPS could cross the kink.
fn near_kink(spec: &MlpSpec, params: &[f64], x: &[f64]) -> bool {
    let w = spec.widths();
    let mut h = x.to_vec();
    for l in 0..spec.num_layers() - 1 {
        let wr = &params[spec.weight_range(l)];
        let br = &params[spec.bias_range(l)];
        let mut next = vec![0.0; w[l + 1]];
        for (j, n) in next.iter_mut().enumerate() {
            let z: f64 = br[j] + (0..w[l]).map(|i| wr[j * w[l] + i] * h[i]).sum::<f64>();
            if z.abs() < 1e-4 {
                return true;
            }
            *n = z.max(0.0);
        }
        h = next;
    }
    false
}

// ---------------------------------------------------------------- 2

const TRANSLATION_TOL: f64 = 1e-9;

/// Members whose mean next-state delta is the constant `offsets[m]`.
fn constant_ensemble(obs_dim: usize, offsets: &[f64]) -> EnsembleModel {
    let cfg = EnsembleConfig {
        members: offsets.len(),
        elites: offsets.len(),
        hidden: vec![4],
        ..EnsembleConfig::default()
    };
    let mut model = EnsembleModel::new(obs_dim, 1, &cfg, 1e-3, &RngStream::new(0, 0)).unwrap();
    let spec = model.spec().clone();
    let last = spec.num_layers() - 1;
    for (m, &off) in offsets.iter().enumerate() {
        let member = &mut model.members_mut()[m];
        member.params.0.iter_mut().for_each(|p| *p = 0.0);
        let b = spec.bias_range(last).start;
        for j in 0..obs_dim {
            member.params[b + j] = off;
        }
    }
    model
}

fn disagreement_oracle() -> Outcome {
    let identical = {
        let mut model = EnsembleModel::new(3, 2, &EnsembleConfig::default(), 1e-3, &RngStream::new(5, 0)).unwrap();
        let first = model.members()[0].clone();
        for m in model.members_mut() {
            *m = first.clone();
        }
        model.disagreement(&[0.3, -1.0, 2.0], &[0.5, -0.5]).unwrap()
    };
    let pair = constant_ensemble(1, &[1.0, 3.0]).disagreement(&[0.0], &[0.0]).unwrap();

    let mut rng = RngStream::new(77, 3);
    let mut worst = 0.0f64;
    for i in 0..1000u64 {
        let obs_dim = 1 + rng.index(3);
        let members = 2 + rng.index(4);
        let cfg = EnsembleConfig {
            members,
            elites: members,
            hidden: vec![8],
            ..EnsembleConfig::default()
        };
        let mut model = EnsembleModel::new(obs_dim, 1, &cfg, 1e-3, &RngStream::new(i, 9)).unwrap();
        let out_std: Vec<f64> = (0..=obs_dim).map(|_| 0.5 + 2.0 * rng.uniform()).collect();
        let out_mean: Vec<f64> = rng.draw_gaussian(obs_dim + 1);
        let input = Normalizer::identity(obs_dim + 1);
        model
            .set_normalizers(input.clone(), Normalizer { mean: out_mean.clone(), std: out_std.clone() })
            .unwrap();
        let s = rng.draw_gaussian(obs_dim);
        let a = rng.draw_gaussian(1);
        let u = model.disagreement(&s, &a).unwrap();
        // translate every member's prediction by the same vector
        let shift: Vec<f64> = rng.draw_gaussian(obs_dim + 1).iter().map(|c| 50.0 * c).collect();
        let shifted: Vec<f64> = out_mean.iter().zip(&shift).map(|(m, c)| m + c).collect();
        model.set_normalizers(input, Normalizer { mean: shifted, std: out_std }).unwrap();
        let u2 = model.disagreement(&s, &a).unwrap();
        worst = worst.max((u - u2).abs() / u.abs().max(1.0));
    }
    outcome(
        identical == 0.0 && (pair - 2.0).abs() < 1e-12 && worst < TRANSLATION_TOL,
        format!(
            "identical members -> {identical} (exact 0), two-member 1-d -> {pair} (2 within 1e-12), translation max rel diff {worst:.2e} (< {TRANSLATION_TOL:.0e}) over 1000 ensembles"
        ),
    )
}

// ---------------------------------------------------------------- 3

/// Policy drawing one action index per step from its row's stream.
struct TablePolicy {
    actions: Vec<f64>,
}

impl ProposalPolicy for TablePolicy {
    fn propose(&self, obs: &Matrix, rngs: &mut [RngStream]) -> Result<Matrix> {
        let v = rngs.iter_mut().map(|r| self.actions[r.index(self.actions.len())]).collect();
        Ok(Matrix::from_vec(obs.rows(), 1, v))
    }
}

/// Deterministic finite MDP over integer states with tabulated rewards and
/// disagreements.
struct TableModel {
    n_actions: usize,
    next: Vec<usize>,
    reward: Vec<f64>,
    unc: Vec<f64>,
}

impl TableModel {
    fn random(states: usize, n_actions: usize, rng: &mut RngStream) -> Self {
        let cells = states * n_actions;
        TableModel {
            n_actions,
            next: (0..cells).map(|_| rng.index(states)).collect(),
            reward: (0..cells).map(|_| rng.gaussian()).collect(),
            unc: (0..cells).map(|_| 2.0 * rng.uniform()).collect(),
        }
    }

    fn cell(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }
}

impl RolloutModel for TableModel {
    fn predict_step(&self, obs: &Matrix, actions: &Matrix, _: &mut [RngStream]) -> Result<ModelStep> {
        let n = obs.rows();
        let mut next = Matrix::zeros(n, 1);
        let (mut r, mut u) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            // actions are their own indices in this fixture
            let c = self.cell(obs.get(i, 0) as usize, actions.get(i, 0) as usize);
            next.set(i, 0, self.next[c] as f64);
            r.push(self.reward[c]);
            u.push(self.unc[c]);
        }
        Ok(ModelStep {
            next_obs: next,
            reward: r,
            member: vec![0; n],
            uncertainty: u,
        })
    }
}

/// Reward and disagreement sums of every action sequence of length `h`,
/// keyed by the sequence.
fn enumerate(model: &TableModel, s0: usize, h: usize) -> BTreeMap<Vec<usize>, (f64, f64)> {
    let mut table = BTreeMap::new();
    for code in 0..model.n_actions.pow(h as u32) {
        let mut c = code;
        let seq: Vec<usize> = (0..h)
            .map(|_| {
                let a = c % model.n_actions;
                c /= model.n_actions;
                a
            })
            .collect();
        let (mut s, mut r, mut u) = (s0, 0.0, 0.0);
        for &a in &seq {
            let cell = model.cell(s, a);
            r += model.reward[cell];
            u += model.unc[cell];
            s = model.next[cell];
        }
        table.insert(seq, (r, u));
    }
    table
}

fn planner_oracle() -> Outcome {
    let mut rng = RngStream::new(31, 4);
    let (mut agree_c, mut agree_o) = (0, 0);
    for fixture in 0..100u64 {
        let states = 2 + rng.index(6);
        let n_actions = 2 + rng.index(3);
        let k = 1 + rng.index(5);
        let h = 1 + rng.index(3);
        let alpha_c = 0.25 + 3.0 * rng.uniform();
        let alpha_o = 0.25 + 3.0 * rng.uniform();
        let model = TableModel::random(states, n_actions, &mut rng);
        let policy = TablePolicy {
            actions: (0..n_actions).map(|a| a as f64).collect(),
        };
        let s0 = rng.index(states);
        let table = enumerate(&model, s0, h);
        let plan_rng = RngStream::new(fixture, 8);
        let cfg = PlanConfig::new(k, h, 0.0);
        let oracle = |alpha: f64| {
            let mut best: Option<(f64, usize)> = None;
            for c in 0..k {
                let mut stream = plan_rng.split_index(c as u64);
                let seq: Vec<usize> = (0..h).map(|_| stream.index(n_actions)).collect();
                let (r, u) = table[&seq];
                let total = r + alpha * u;
                if best.is_none_or(|(b, _)| total > b) {
                    best = Some((total, seq[0]));
                }
            }
            best.unwrap().1 as f64
        };
        let s = [s0 as f64];
        let got_c = conservative_action(&policy, &s, &model, &cfg, alpha_c, &plan_rng, &never_terminal).unwrap();
        let got_o = optimistic_action(&policy, &s, &model, &cfg, alpha_o, &plan_rng, &never_terminal).unwrap();
        agree_c += usize::from(got_c[0] == oracle(-alpha_c));
        agree_o += usize::from(got_o[0] == oracle(alpha_o));
        // the batched entry point must agree with the single-state one
        let batch = plan_batch(&policy, &Matrix::row_vector(&s), &model, &cfg.with_alpha(-alpha_c), &[plan_rng], &never_terminal)
            .unwrap();
        if batch[0].action != got_c {
            agree_c -= 1;
        }
    }
    outcome(
        agree_c == 100 && agree_o == 100,
        format!("conservative {agree_c}/100, optimistic {agree_o}/100 fixtures match enumeration (need 100/100 each)"),
    )
}

// ---------------------------------------------------------------- 4

fn scalarization_monotonicity() -> Outcome {
    const GRID: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 4.0];
    let mut rng = RngStream::new(4, 4);
    let mut violations = 0;
    for _ in 0..1000 {
        let k = 2 + rng.index(9);
        let pairs: Vec<(f64, f64)> = (0..k).map(|_| (5.0 * rng.gaussian(), 3.0 * rng.uniform())).collect();
        let chosen_u = |alpha: f64| {
            let scores: Vec<CandidateScore> = pairs
                .iter()
                .enumerate()
                .map(|(c, &(r, u))| CandidateScore {
                    candidate: c,
                    reward_sum: r,
                    uncertainty_sum: u,
                    total: r + alpha * u,
                    first_action: vec![c as f64],
                    steps: 1,
                })
                .collect();
            pairs[select(&scores).unwrap()].1
        };
        let cons: Vec<f64> = GRID.iter().map(|&a| chosen_u(-a)).collect();
        let opt: Vec<f64> = GRID.iter().map(|&a| chosen_u(a)).collect();
        violations += cons.windows(2).filter(|w| w[1] > w[0]).count();
        violations += opt.windows(2).filter(|w| w[1] < w[0]).count();
    }
    outcome(violations == 0, format!("{violations} violations over 1000 score sets (need 0)"))
}

// ---------------------------------------------------------------- 5

fn baseline_collapse() -> Outcome {
    let mut cfg = desk_preset(EnvKind::Pendulum);
    cfg.trainer.mode = Mode::Baseline;
    cfg.trainer.warmup_steps = 0;
    cfg.trainer.total_steps = 1000;
    let mut t = Trainer::new(cfg, 3).unwrap();
    let mut mismatches = 0;
    for step in 0..1000 {
        let obs = t.observation();
        let mut raw_rng = t.explore_stream(step).split_index(0);
        let raw = t.agent.actor.act(&obs, &mut raw_rng, false).unwrap();
        t.step().unwrap();
        let taken = &t.real.get(t.real.len() - 1).action;
        if taken.iter().zip(&raw).any(|(a, b)| a.to_bits() != b.to_bits()) {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} of 1000 decisions differ bitwise from raw policy samples (training ran: {} fits)", t.fits()),
    )
}

// ---------------------------------------------------------------- 6

fn horizon_schedule() -> Outcome {
    let s = HorizonSchedule::new(20.0, 100.0, 1.0, 4.0).unwrap();
    let early = (0..=20).all(|e| rollout_horizon(e, &s) == 1);
    let mid = rollout_horizon(60, &s);
    let late = (100..=400).all(|e| rollout_horizon(e, &s) == 4);
    outcome(
        early && mid == 2 && late,
        format!("e<=20 all 1: {early}, e=60 -> {mid} (2), e>=100 all 4: {late}"),
    )
}

// ---------------------------------------------------------------- 7

const LINEAR_MSE_TOL: f64 = 1e-3;
const FIT_BUDGET_S: f64 = 30.0;

fn linear_system(s: &[f64], a: &[f64]) -> (Vec<f64>, f64) {
    let next = vec![
        0.9 * s[0] + 0.1 * s[1] + 0.2 * a[0],
        -0.1 * s[0] + 0.8 * s[1] + 0.05 * s[2],
        0.3 * s[2] - 0.4 * a[0] + 0.1 * s[0],
    ];
    let reward = 0.5 * s[0] - 0.25 * s[2] + 0.1 * a[0];
    (next, reward)
}

fn model_fitting() -> Outcome {
    let mut rng = RngStream::new(12, 0);
    let data: Vec<Transition> = (0..2000)
        .map(|_| {
            let s: Vec<f64> = (0..3).map(|_| 2.0 * rng.uniform() - 1.0).collect();
            let a = vec![2.0 * rng.uniform() - 1.0];
            let (next_obs, reward) = linear_system(&s, &a);
            Transition {
                obs: s,
                action: a,
                reward,
                next_obs,
                done: false,
                truncated: false,
            }
        })
        .collect();
    let mut model = EnsembleModel::new(3, 1, &EnsembleConfig::default(), 1e-3, &RngStream::new(1, 1)).unwrap();
    let start = Instant::now();
    let report = model.train(&data, &ModelTrainConfig::default(), &RngStream::new(2, 2)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let holdout: Vec<Transition> = report.holdout_indices.iter().map(|&i| data[i].clone()).collect();
    let mse = metrics::model_prediction_error(&model, &holdout).unwrap();

    let mut probe = |scale: (f64, f64)| {
        (0..100)
            .map(|_| {
                let s: Vec<f64> = (0..3)
                    .map(|_| {
                        let m = scale.0 + (scale.1 - scale.0) * rng.uniform();
                        if rng.uniform() < 0.5 { -m } else { m }
                    })
                    .collect();
                let a = vec![2.0 * rng.uniform() - 1.0];
                model.disagreement(&s, &a).unwrap()
            })
            .sum::<f64>()
            / 100.0
    };
    let inside = probe((0.0, 0.9));
    let outside = probe((3.0, 5.0));
    outcome(
        mse < LINEAR_MSE_TOL && secs < FIT_BUDGET_S && outside > inside,
        format!(
            "holdout mse {mse:.2e} (< {LINEAR_MSE_TOL:.0e}), fit {secs:.1} s (< {FIT_BUDGET_S} s), disagreement out-of-hull {outside:.3e} > in-hull {inside:.3e}"
        ),
    )
}

// ---------------------------------------------------------------- 8, 9

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn run_modes(env: EnvKind, modes: &[Mode], root: &Path) -> BTreeMap<Mode, Vec<Vec<MetricRecord>>> {
    let base = desk_preset(env);
    let mut out = BTreeMap::new();
    for &mode in modes {
        let cfg = with_mode(&base, mode);
        let runs = SEEDS
            .iter()
            .map(|&seed| {
                let dir = root.join(mode.name()).join(format!("seed_{seed}"));
                let s = trainer::run(&cfg, seed, &dir).unwrap();
                metrics::read_metrics(&s.metrics_path).unwrap()
            })
            .collect();
        out.insert(mode, runs);
    }
    out
}

const SOLVE_THRESHOLD: f64 = -500.0;
const SPEEDUP: f64 = 0.9;
const PENDULUM_BUDGET_S: f64 = 1800.0;

fn steps_to_threshold(records: &[MetricRecord]) -> f64 {
    records
        .iter()
        .find(|r| r.eval_return_mean >= SOLVE_THRESHOLD)
        .map_or(f64::INFINITY, |r| r.env_steps as f64)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn sample_efficiency() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let runs = run_modes(EnvKind::Pendulum, &[Mode::Full, Mode::Baseline], dir.path());
    let secs = start.elapsed().as_secs_f64();
    let steps = |m: Mode| runs[&m].iter().map(|r| steps_to_threshold(r)).collect::<Vec<_>>();
    let (full, base) = (steps(Mode::Full), steps(Mode::Baseline));
    let (mf, mb) = (median(full.clone()), median(base.clone()));
    outcome(
        mf <= SPEEDUP * mb && secs <= PENDULUM_BUDGET_S,
        format!(
            "median steps to {SOLVE_THRESHOLD}: full {mf} {full:?} vs baseline {mb} {base:?} (need <= {SPEEDUP}x), {secs:.0} s (<= {PENDULUM_BUDGET_S} s)"
        ),
    )
}

const FAR_GOAL_RETURN: f64 = 50.0;
const MSE_SLACK: f64 = 1.2;

fn mechanism_signatures() -> Outcome {
    let dir = tempfile::tempdir().unwrap();

    let maze = run_modes(
        EnvKind::Pointmaze,
        &[Mode::Full, Mode::ExploreOnly, Mode::RolloutOnly],
        &dir.path().join("pointmaze"),
    );
    let reached = |m: Mode| {
        maze[&m]
            .iter()
            .filter(|r| r.last().is_some_and(|x| x.eval_return_mean >= FAR_GOAL_RETURN))
            .count()
    };
    let (rf, re, rr) = (reached(Mode::Full), reached(Mode::ExploreOnly), reached(Mode::RolloutOnly));
    let maze_ok = rf >= 3 && re >= 3 && rr < rf && rr < re;

    let cliff = run_modes(
        EnvKind::Cliffcar,
        &[Mode::Full, Mode::RolloutOnly, Mode::Baseline],
        &dir.path().join("cliffcar"),
    );
    let mean_unc = |r: &Vec<MetricRecord>| r.iter().map(|x| x.rollout_uncertainty).sum::<f64>() / r.len() as f64;
    let final_mse = |m: Mode| {
        cliff[&m].iter().map(|r| r.last().unwrap().model_holdout_mse).sum::<f64>() / SEEDS.len() as f64
    };
    let paired_lower = |m: Mode| {
        cliff[&m]
            .iter()
            .zip(&cliff[&Mode::Baseline])
            .filter(|(a, b)| mean_unc(a) < mean_unc(b))
            .count()
    };
    let (lf, lr) = (paired_lower(Mode::Full), paired_lower(Mode::RolloutOnly));
    let (mf, mr, mb) = (final_mse(Mode::Full), final_mse(Mode::RolloutOnly), final_mse(Mode::Baseline));
    let cliff_ok = lf >= 4 && lr >= 4 && mf <= MSE_SLACK * mb && mr <= MSE_SLACK * mb;

    outcome(
        maze_ok && cliff_ok,
        format!(
            "(a) pointmaze seeds >= {FAR_GOAL_RETURN}: full {rf}/5, explore_only {re}/5, rollout_only {rr}/5 [{}]; (b) cliffcar lower uncertainty than baseline: full {lf}/5, rollout_only {lr}/5, final mse full {mf:.3e} rollout_only {mr:.3e} baseline {mb:.3e} (<= {MSE_SLACK}x) [{}]",
            if maze_ok { "ok" } else { "fail" },
            if cliff_ok { "ok" } else { "fail" },
        ),
    )
}

// ---------------------------------------------------------------- 10

fn short_config(env: EnvKind, steps: usize) -> RunConfig {
    let mut c = desk_preset(env);
    c.trainer.total_steps = steps;
    c.trainer.warmup_steps = steps / 2;
    c.trainer.eval_interval = steps / 4;
    c.trainer.eval_episodes = 2;
    c.trainer.rollout_batch = 32;
    c.model.training.train_interval = steps / 4;
    c.model.training.max_updates_per_fit = 50;
    c
}

fn determinism() -> Outcome {
    let cfg = short_config(EnvKind::Pendulum, 1000);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    trainer::run(&cfg, 11, a.path()).unwrap();
    trainer::run(&cfg, 11, b.path()).unwrap();
    let read = |d: &Path| std::fs::read(d.join(trainer::METRICS_FILE)).unwrap();
    let (ma, mb) = (read(a.path()), read(b.path()));
    outcome(
        ma == mb && !ma.is_empty(),
        format!("two runs wrote {} and {} metric bytes, identical: {}", ma.len(), mb.len(), ma == mb),
    )
}

// ---------------------------------------------------------------- 11

fn cli() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_coplanner"));
    c.env_remove("COPLANNER_SEED");
    c
}

fn cli_contract() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // (a) missing planner.K
    let mut doc = serde_json::to_value(desk_preset(EnvKind::Cliffcar)).unwrap();
    doc["planner"].as_object_mut().unwrap().remove("K");
    let bad = root.join("bad.json");
    std::fs::write(&bad, serde_json::to_string(&doc).unwrap()).unwrap();
    let out = cli()
        .args(["run", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(root.join("bad_run"))
        .output()
        .unwrap();
    let stderr = String::from_utf8_lossy(&out.stderr);
    let schema_ok = out.status.code() == Some(2) && stderr.contains("planner.K");

    // (b) ablate over 4 modes x 3 seeds
    let good = root.join("good.json");
    std::fs::write(&good, serde_json::to_string(&short_config(EnvKind::Cliffcar, 200)).unwrap()).unwrap();
    let ablate_dir = root.join("ablate");
    let status = cli()
        .args(["ablate", "--config"])
        .arg(&good)
        .args(["--seeds", "0,1,2", "--out"])
        .arg(&ablate_dir)
        .output()
        .unwrap()
        .status;
    let runs = metrics::find_runs(&ablate_dir).unwrap();
    let ablate_ok = status.success() && runs.len() == 12;

    // (c) plot-data against a hand recomputation
    let csv_path = root.join("curve.csv");
    let plot_status = cli()
        .args(["plot-data", "--in"])
        .arg(&ablate_dir)
        .arg("--out")
        .arg(&csv_path)
        .output()
        .unwrap()
        .status;
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for mode in Mode::ALL {
        for seed in 0..3 {
            let path = ablate_dir.join(mode.name()).join(format!("seed_{seed}")).join(trainer::METRICS_FILE);
            for (i, r) in metrics::read_metrics(&path).unwrap().iter().enumerate() {
                groups.entry((mode.name().to_string(), i)).or_default().push(r.eval_return_mean);
            }
        }
    }
    let mut rows = 0;
    let mut plot_ok = plot_status.success();
    if plot_ok {
        let mut reader = csv::Reader::from_path(&csv_path).unwrap();
        for row in reader.deserialize::<metrics::CurvePoint>() {
            let p = row.unwrap();
            let xs = &groups[&(p.mode.clone(), p.checkpoint)];
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let std = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
            let ci = 1.96 * std / n.sqrt();
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + b.abs());
            plot_ok &= p.seeds == 3 && close(p.mean, mean) && close(p.std, std) && close(p.ci95, ci);
            rows += 1;
        }
        plot_ok &= rows == groups.len();
    }

    outcome(
        schema_ok && ablate_ok && plot_ok,
        format!(
            "schema error exit {:?} naming planner.K: {schema_ok}; ablate run dirs {} (12); plot-data {rows} rows match hand recomputation: {plot_ok}",
            out.status.code(),
            runs.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "disagreement oracle", disagreement_oracle),
        (3, "planner oracle equivalence", planner_oracle),
        (4, "scalarization monotonicity", scalarization_monotonicity),
        (5, "alpha=0 / K=1 collapse", baseline_collapse),
        (6, "rollout-horizon schedule", horizon_schedule),
        (7, "model fitting", model_fitting),
        (8, "directional sample efficiency", sample_efficiency),
        (9, "mechanism signatures", mechanism_signatures),
        (10, "determinism", determinism),
        (11, "CLI contract", cli_contract),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        println!(
            "{} criterion {id:>2} {name}: {} [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!o.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
