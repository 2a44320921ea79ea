//! The run configuration document and its presets.
//!
//! A configuration is one JSON object with the sections `env`, `model`,
//! `policy`, `planner`, `trainer` and `metrics`. Only `env` and the four
//! planner rates/sizes are required; every other field has a default.
//! Unknown fields are rejected. Errors name the offending field path, e.g.
//! `planner.K`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{EnsembleConfig, ModelTrainConfig};
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::numerics::Activation;
use crate::planner::UncertaintyTiming;
use crate::policy::PolicyConfig;
use crate::trainer::{HorizonSchedule, Mode, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub ensemble: EnsembleConfig,
    pub training: ModelTrainConfig,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerSettings {
    #[serde(rename = "K")]
    pub candidates: usize,
    #[serde(rename = "H_p")]
    pub horizon: usize,
    pub alpha_c: f64,
    pub alpha_o: f64,
    #[serde(default = "yes")]
    pub terminate_on_done: bool,
    #[serde(default)]
    pub timing: UncertaintyTiming,
    /// Divide disagreement by its running standard deviation before scoring.
    #[serde(default)]
    pub normalize_uncertainty: bool,
}

impl PlannerSettings {
    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 {
            return Err(Error::config("planner.K", "must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(Error::config("planner.H_p", "must be at least 1"));
        }
        for (name, v) in [("alpha_c", self.alpha_c), ("alpha_o", self.alpha_o)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("planner.{name}"), "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Record elapsed seconds in metric records. Off by default so metric
    /// files are byte-identical across repeated runs.
    pub record_wall_clock: bool,
    /// Write every planning decision to `decisions.jsonl`.
    pub trace_decisions: bool,
    /// Dump the final model buffer to `model_buffer.bin`.
    pub dump_model_buffer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvKind,
    /// Lowest-precedence seed; overridden by `COPLANNER_SEED` and `--seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub policy: PolicyConfig,
    pub planner: PlannerSettings,
    #[serde(default)]
    pub trainer: TrainConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.ensemble.validate("model.ensemble")?;
        self.model.training.validate("model.training")?;
        self.policy.validate("policy")?;
        self.planner.validate()?;
        self.trainer.validate("trainer")
    }

    /// Parses and validates a configuration document.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let parent = e.path().to_string();
            let message = e.inner().to_string();
            Error::Config {
                path: field_path(&parent, &message),
                message,
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    /// Canonical JSON: every field explicit, object keys sorted.
    pub fn canonical_json(&self) -> Result<String> {
        // serde_json's default map is ordered by key
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string(&value)?)
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.canonical_json()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Sets a field by dotted path, e.g. `planner.alpha_o`, from a JSON
    /// literal, then re-validates.
    pub fn with_override(&self, path: &str, value: &str) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        let parsed: serde_json::Value = serde_json::from_str(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        let mut node = &mut doc;
        for key in path.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(key))
                .ok_or_else(|| Error::config(path, "no such field"))?;
        }
        *node = parsed;
        Self::from_json_str(&serde_json::to_string(&doc)?)
    }
}

/// Turns serde's `missing field `K`` at path `planner` into `planner.K`.
/// Other errors already carry the full path.
fn field_path(parent: &str, message: &str) -> String {
    let named = message
        .strip_prefix("missing field `")
        .and_then(|rest| rest.split('`').next());
    match (named, parent) {
        (Some(f), ".") | (Some(f), "") => f.to_string(),
        (Some(f), p) => format!("{p}.{f}"),
        (None, p) => p.to_string(),
    }
}

/// Table 1 settings for proprioceptive control: ensemble of 7 with 5
/// elites, 4x200 model, 4x512 actor and critic, 10 updates per step, model
/// refit every 250 steps, horizon ramp `[20, 150, 1, 4]`, real ratio 0,
/// `α_c = 2`, `α_o = 1`, `K = H_p = 5`.
pub fn table1_preset(env: EnvKind) -> RunConfig {
    RunConfig {
        env,
        seed: None,
        model: ModelSection {
            ensemble: EnsembleConfig {
                members: 7,
                elites: 5,
                hidden: vec![200; 4],
                activation: Activation::Relu,
                ..EnsembleConfig::default()
            },
            training: ModelTrainConfig {
                batch_size: 256,
                learning_rate: 1e-3,
                train_interval: 250,
                ..ModelTrainConfig::default()
            },
        },
        policy: PolicyConfig {
            hidden: vec![512; 4],
            learning_rate: 3e-4,
            batch_size: 256,
            ..PolicyConfig::default()
        },
        planner: PlannerSettings {
            candidates: 5,
            horizon: 5,
            alpha_c: 2.0,
            alpha_o: 1.0,
            terminate_on_done: true,
            timing: UncertaintyTiming::AllSteps,
            normalize_uncertainty: false,
        },
        trainer: TrainConfig {
            policy_updates_per_step: 10,
            rollout_schedule: HorizonSchedule {
                a: 20.0,
                b: 150.0,
                x: 1.0,
                y: 4.0,
            },
            real_ratio: 0.0,
            ..TrainConfig::default()
        },
        metrics: MetricsConfig::default(),
    }
}

/// Single-core desk defaults: the Table 1 planner rates with small
/// networks, one policy update per step and a capped model fit.
pub fn desk_preset(env: EnvKind) -> RunConfig {
    let (total_steps, schedule) = match env {
        EnvKind::Pendulum => (15_000, [1.0, 10.0, 1.0, 3.0]),
        EnvKind::Pointmaze => (20_000, [1.0, 10.0, 1.0, 4.0]),
        EnvKind::Cliffcar => (10_000, [1.0, 5.0, 1.0, 4.0]),
    };
    RunConfig {
        env,
        seed: None,
        model: ModelSection {
            ensemble: EnsembleConfig::default(),
            training: ModelTrainConfig {
                batch_size: 128,
                max_updates_per_fit: 400,
                train_interval: 250,
                ..ModelTrainConfig::default()
            },
        },
        policy: PolicyConfig {
            batch_size: 128,
            ..PolicyConfig::default()
        },
        planner: PlannerSettings {
            candidates: 5,
            horizon: 5,
            alpha_c: 2.0,
            alpha_o: 1.0,
            terminate_on_done: true,
            timing: UncertaintyTiming::AllSteps,
            normalize_uncertainty: true,
        },
        trainer: TrainConfig {
            total_steps,
            eval_interval: 500,
            policy_updates_per_step: 1,
            rollout_schedule: HorizonSchedule::try_from(schedule).expect("valid preset schedule"),
            ..TrainConfig::default()
        },
        metrics: MetricsConfig::default(),
    }
}

/// Looks up a named preset: `table1` or `desk`.
pub fn preset(name: &str, env: EnvKind) -> Result<RunConfig> {
    match name {
        "table1" => Ok(table1_preset(env)),
        "desk" => Ok(desk_preset(env)),
        other => Err(Error::InvalidInput(format!("unknown preset `{other}`"))),
    }
}

/// Applies an ablation mode to a copy of `cfg`.
pub fn with_mode(cfg: &RunConfig, mode: Mode) -> RunConfig {
    let mut c = cfg.clone();
    c.trainer.mode = mode;
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"env": "pendulum", "planner": {"K": 5, "H_p": 5, "alpha_c": 2, "alpha_o": 1}}"#;

    #[test]
    fn minimal_document_parses_with_defaults() {
        let c = RunConfig::from_json_str(MINIMAL).unwrap();
        assert_eq!(c.planner.candidates, 5);
        assert_eq!(c.trainer, TrainConfig::default());
    }

    #[test]
    fn missing_planner_k_names_path() {
        let text = r#"{"env": "pendulum", "planner": {"H_p": 5, "alpha_c": 2, "alpha_o": 1}}"#;
        match RunConfig::from_json_str(text) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "planner.K"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nested_type_error_names_path() {
        let text = r#"{"env": "pendulum", "planner": {"K": 5, "H_p": 5, "alpha_c": 2, "alpha_o": 1},
                      "model": {"training": {"batch_size": "big"}}}"#;
        match RunConfig::from_json_str(text) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "model.training.batch_size"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_field_rejected() {
        let text = r#"{"env": "pendulum", "planner": {"K": 5, "H_p": 5, "alpha_c": 2, "alpha_o": 1, "beta": 3}}"#;
        match RunConfig::from_json_str(text) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "planner.beta"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_validation_names_path() {
        let text = r#"{"env": "pendulum", "planner": {"K": 0, "H_p": 5, "alpha_c": 2, "alpha_o": 1}}"#;
        match RunConfig::from_json_str(text) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "planner.K"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn canonical_round_trip_is_identity() {
        for c in [desk_preset(EnvKind::Cliffcar), table1_preset(EnvKind::Pendulum)] {
            let text = c.canonical_json().unwrap();
            let back = RunConfig::from_json_str(&text).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.canonical_json().unwrap(), text);
        }
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = RunConfig::from_json_str(MINIMAL).unwrap();
        let b = RunConfig::from_json_str(
            r#"{"planner": {"alpha_o": 1, "alpha_c": 2, "H_p": 5, "K": 5}, "env": "pendulum"}"#,
        )
        .unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let c = a.with_override("planner.alpha_o", "0.5").unwrap();
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn table1_rates() {
        let c = table1_preset(EnvKind::Pendulum);
        assert_eq!(
            (c.planner.alpha_c, c.planner.alpha_o, c.planner.candidates, c.planner.horizon),
            (2.0, 1.0, 5, 5)
        );
        assert_eq!(c.trainer.real_ratio, 0.0);
    }

    #[test]
    fn override_parses_literals_and_modes() {
        let c = RunConfig::from_json_str(MINIMAL).unwrap();
        assert_eq!(c.with_override("planner.K", "3").unwrap().planner.candidates, 3);
        assert_eq!(
            c.with_override("trainer.mode", "baseline").unwrap().trainer.mode,
            Mode::Baseline
        );
        assert!(c.with_override("planner.nope", "1").is_err());
    }
}
