//! Analytic continuous-control environments.
//!
//! Three fixed-constant tasks serve as the real environment and as ground
//! truth for tests:
//!
//! * `pendulum` — torque-limited swing-up. State `(θ, θ̇)`, observation
//!   `(cos θ, sin θ, θ̇)`, θ = 0 is upright. Reward is charged on the
//!   pre-step state: `-(wrap(θ)² + 0.1 θ̇² + 0.001 u²)`.
//! * `pointmaze` — planar point in `[0, 1]²` moved by clipped displacements.
//!   A wall at `x = 0.5, y ≤ 0.8` separates the start `(0.1, 0.1)` from the
//!   goal `(0.9, 0.1)`; a weak decoy sits at `(0.4, 0.9)`. Reward is charged
//!   on the post-step position.
//! * `cliffcar` — 1-D car `(x, v)` rewarded by its post-step position, with
//!   a terminal penalty of -10 once `x > 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Pendulum,
    Pointmaze,
    Cliffcar,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Pendulum => "pendulum",
            EnvKind::Pointmaze => "pointmaze",
            EnvKind::Cliffcar => "cliffcar",
        }
    }
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pendulum" => Ok(EnvKind::Pendulum),
            "pointmaze" => Ok(EnvKind::Pointmaze),
            "cliffcar" => Ok(EnvKind::Cliffcar),
            other => Err(Error::InvalidInput(format!("unknown environment `{other}`"))),
        }
    }
}

pub mod pendulum {
    pub const GRAVITY: f64 = 10.0;
    pub const MASS: f64 = 1.0;
    pub const LENGTH: f64 = 1.0;
    pub const DT: f64 = 0.05;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const MAX_SPEED: f64 = 8.0;
    pub const HORIZON: usize = 200;
}

pub mod pointmaze {
    pub const MAX_STEP: f64 = 0.1;
    pub const WALL_X: f64 = 0.5;
    pub const WALL_TOP: f64 = 0.8;
    pub const STANDOFF: f64 = 1e-6;
    pub const START: [f64; 2] = [0.1, 0.1];
    pub const GOAL: [f64; 2] = [0.9, 0.1];
    pub const DECOY: [f64; 2] = [0.4, 0.9];
    pub const DECOY_WEIGHT: f64 = 0.1;
    pub const HORIZON: usize = 100;
}

pub mod cliffcar {
    pub const ACCEL: f64 = 0.05;
    pub const MAX_SPEED: f64 = 0.5;
    pub const DT: f64 = 0.1;
    pub const CLIFF_X: f64 = 1.0;
    pub const CLIFF_PENALTY: f64 = -10.0;
    pub const HORIZON: usize = 100;
}

/// Internal environment state plus the within-episode step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub inner: Vec<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// Set by the termination predicate only.
    pub done: bool,
    /// Episode horizon reached.
    pub truncated: bool,
}

impl Transition {
    pub fn is_finite(&self) -> bool {
        self.reward.is_finite()
            && self.obs.iter().all(|v| v.is_finite())
            && self.action.iter().all(|v| v.is_finite())
            && self.next_obs.iter().all(|v| v.is_finite())
    }
}

/// Interface shared by the analytic environments and test stubs.
pub trait Environment {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Symmetric bound of the action box.
    fn action_bound(&self) -> f64;
    fn max_episode_steps(&self) -> usize;
    fn reset(&self, rng: &mut RngStream) -> EnvState;
    fn observe(&self, state: &EnvState) -> Vec<f64>;
    fn step(&self, state: &EnvState, action: &[f64]) -> Result<(EnvState, Transition)>;
    /// Termination predicate on an observation.
    fn is_terminal(&self, obs: &[f64]) -> bool;
}

/// Static description of one of the analytic environments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: EnvKind,
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::PI;
    let mut t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t <= -PI {
        t += 2.0 * PI;
    }
    t
}

fn clip(x: f64, bound: f64) -> f64 {
    x.clamp(-bound, bound)
}

fn dist(p: &[f64], q: [f64; 2]) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

impl EnvSpec {
    pub fn new(name: EnvKind) -> Self {
        EnvSpec { name }
    }

    pub fn dt(&self) -> Option<f64> {
        match self.name {
            EnvKind::Pendulum => Some(pendulum::DT),
            EnvKind::Pointmaze => None,
            EnvKind::Cliffcar => Some(cliffcar::DT),
        }
    }

    fn clip_action(&self, action: &[f64]) -> Result<Vec<f64>> {
        if action.len() != self.action_dim() {
            return Err(Error::shape("env action", self.action_dim(), action.len()));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite action {action:?} for {}",
                self.name.name()
            )));
        }
        let b = self.action_bound();
        Ok(action.iter().map(|&a| clip(a, b)).collect())
    }

    /// Closed-form reward of `(s, a, s')` in observation space.
    pub fn true_reward(&self, obs: &[f64], action: &[f64], next_obs: &[f64]) -> f64 {
        match self.name {
            EnvKind::Pendulum => {
                let theta = wrap_angle(obs[1].atan2(obs[0]));
                let thdot = obs[2];
                let u = clip(action[0], pendulum::MAX_TORQUE);
                -(theta * theta + 0.1 * thdot * thdot + 0.001 * u * u)
            }
            EnvKind::Pointmaze => {
                (-10.0 * dist(next_obs, pointmaze::GOAL)).exp()
                    + pointmaze::DECOY_WEIGHT * (-10.0 * dist(next_obs, pointmaze::DECOY)).exp()
            }
            EnvKind::Cliffcar => {
                let x = next_obs[0];
                if self.is_terminal(next_obs) {
                    x + cliffcar::CLIFF_PENALTY
                } else {
                    x
                }
            }
        }
    }

    fn pointmaze_move(p: [f64; 2], d: [f64; 2]) -> [f64; 2] {
        use pointmaze::{STANDOFF, WALL_TOP, WALL_X};
        let [x0, y0] = p;
        let (x1, y1) = (x0 + d[0], y0 + d[1]);
        let mut end = [x1, y1];
        if d[0] != 0.0 && x0.min(x1) <= WALL_X && WALL_X <= x0.max(x1) {
            let t = (WALL_X - x0) / d[0];
            let y_cross = y0 + t * d[1];
            if y_cross <= WALL_TOP {
                // stop just short of the wall on the side we came from
                let side = if x0 < WALL_X {
                    -1.0
                } else if x0 > WALL_X {
                    1.0
                } else {
                    -d[0].signum()
                };
                let stop_x = WALL_X + side * STANDOFF;
                let ts = ((stop_x - x0) / d[0]).clamp(0.0, 1.0);
                end = [stop_x, y0 + ts * d[1]];
            }
        } else if d[0] == 0.0 && x0 == WALL_X && y1 <= WALL_TOP {
            // sliding along the wall line from above
            end = [x0, y1.max(WALL_TOP + STANDOFF)];
        }
        [end[0].clamp(0.0, 1.0), end[1].clamp(0.0, 1.0)]
    }
}

impl Environment for EnvSpec {
    fn obs_dim(&self) -> usize {
        match self.name {
            EnvKind::Pendulum => 3,
            EnvKind::Pointmaze | EnvKind::Cliffcar => 2,
        }
    }

    fn action_dim(&self) -> usize {
        match self.name {
            EnvKind::Pendulum | EnvKind::Cliffcar => 1,
            EnvKind::Pointmaze => 2,
        }
    }

    fn action_bound(&self) -> f64 {
        match self.name {
            EnvKind::Pendulum => pendulum::MAX_TORQUE,
            EnvKind::Pointmaze => pointmaze::MAX_STEP,
            EnvKind::Cliffcar => 1.0,
        }
    }

    fn max_episode_steps(&self) -> usize {
        match self.name {
            EnvKind::Pendulum => pendulum::HORIZON,
            EnvKind::Pointmaze => pointmaze::HORIZON,
            EnvKind::Cliffcar => cliffcar::HORIZON,
        }
    }

    fn reset(&self, rng: &mut RngStream) -> EnvState {
        use std::f64::consts::PI;
        let inner = match self.name {
            EnvKind::Pendulum => {
                let theta = -PI + 2.0 * PI * rng.uniform();
                let thdot = -1.0 + 2.0 * rng.uniform();
                vec![theta, thdot]
            }
            EnvKind::Pointmaze => pointmaze::START.to_vec(),
            EnvKind::Cliffcar => vec![0.0, 0.0],
        };
        EnvState { inner, steps: 0 }
    }

    fn observe(&self, state: &EnvState) -> Vec<f64> {
        match self.name {
            EnvKind::Pendulum => {
                let (theta, thdot) = (state.inner[0], state.inner[1]);
                vec![theta.cos(), theta.sin(), thdot]
            }
            EnvKind::Pointmaze | EnvKind::Cliffcar => state.inner.clone(),
        }
    }

    fn step(&self, state: &EnvState, action: &[f64]) -> Result<(EnvState, Transition)> {
        let action = self.clip_action(action)?;
        let inner = match self.name {
            EnvKind::Pendulum => {
                use pendulum::*;
                let (theta, thdot) = (state.inner[0], state.inner[1]);
                let u = action[0];
                let accel = 3.0 * GRAVITY / (2.0 * LENGTH) * theta.sin()
                    + 3.0 / (MASS * LENGTH * LENGTH) * u;
                let thdot = clip(thdot + accel * DT, MAX_SPEED);
                let theta = wrap_angle(theta + thdot * DT);
                vec![theta, thdot]
            }
            EnvKind::Pointmaze => {
                let p = Self::pointmaze_move(
                    [state.inner[0], state.inner[1]],
                    [action[0], action[1]],
                );
                p.to_vec()
            }
            EnvKind::Cliffcar => {
                use cliffcar::*;
                let v = clip(state.inner[1] + ACCEL * action[0], MAX_SPEED);
                let x = state.inner[0] + v * DT;
                vec![x, v]
            }
        };
        let next = EnvState {
            inner,
            steps: state.steps + 1,
        };
        let obs = self.observe(state);
        let next_obs = self.observe(&next);
        let reward = self.true_reward(&obs, &action, &next_obs);
        let done = self.is_terminal(&next_obs);
        let truncated = !done && next.steps >= self.max_episode_steps();
        Ok((
            next,
            Transition {
                obs,
                action,
                reward,
                next_obs,
                done,
                truncated,
            },
        ))
    }

    fn is_terminal(&self, obs: &[f64]) -> bool {
        match self.name {
            EnvKind::Cliffcar => obs[0] > cliffcar::CLIFF_X,
            EnvKind::Pendulum | EnvKind::Pointmaze => false,
        }
    }
}

pub fn env_reset(spec: &EnvSpec, rng: &mut RngStream) -> EnvState {
    spec.reset(rng)
}

pub fn env_step(spec: &EnvSpec, state: &EnvState, action: &[f64]) -> Result<(EnvState, Transition)> {
    spec.step(state, action)
}

pub fn env_true_reward(spec: &EnvSpec, obs: &[f64], action: &[f64], next_obs: &[f64]) -> f64 {
    spec.true_reward(obs, action, next_obs)
}

pub fn env_termination(spec: &EnvSpec, next_obs: &[f64]) -> bool {
    spec.is_terminal(next_obs)
}
