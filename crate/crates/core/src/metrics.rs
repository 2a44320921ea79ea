//! Metric records, run manifests, the model-quality metrics, and learning
//! curve aggregation.
//!
//! Metric files are JSON lines, one [`MetricRecord`] per line, appended as
//! evaluations happen.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::buffers::{DumpReader, ModelBuffer};
use crate::config::RunConfig;
use crate::dynamics::EnsembleModel;
use crate::envs::Transition;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const SCHEMA_VERSION: u32 = 1;

/// Rows per model call when sweeping large buffers.
const CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub schema_version: u32,
    pub env_steps: usize,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub model_holdout_mse: f64,
    pub rollout_uncertainty: f64,
    pub wall_seconds: f64,
    pub mode: String,
    pub seed: u64,
}

impl MetricRecord {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eval_return_mean", self.eval_return_mean),
            ("eval_return_std", self.eval_return_std),
            ("model_holdout_mse", self.model_holdout_mse),
            ("rollout_uncertainty", self.rollout_uncertainty),
            ("wall_seconds", self.wall_seconds),
        ] {
            if !v.is_finite() {
                return Err(Error::non_finite(format!("metric {name}"), 0));
            }
        }
        Ok(())
    }
}

/// Append-only writer for one run's metric file.
pub struct MetricSink {
    file: File,
    last_steps: Option<usize>,
    records: usize,
}

impl MetricSink {
    /// Creates (truncating) the file.
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(MetricSink {
            file,
            last_steps: None,
            records: 0,
        })
    }

    pub fn records(&self) -> usize {
        self.records
    }

    /// Writes one line and flushes it, so a crash leaves complete lines only.
    pub fn append(&mut self, r: &MetricRecord) -> Result<()> {
        r.validate()?;
        if let Some(prev) = self.last_steps {
            if r.env_steps < prev {
                return Err(Error::InvalidInput(format!(
                    "metric env_steps went backwards: {prev} then {}",
                    r.env_steps
                )));
            }
        }
        let mut line = serde_json::to_string(r)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        self.last_steps = Some(r.env_steps);
        self.records += 1;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Writes records as CSV with a header row.
pub fn export_csv<W: Write>(records: &[MetricRecord], w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for r in records {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub env: String,
    pub mode: String,
    /// Output name to path relative to the run directory.
    pub outputs: BTreeMap<String, String>,
    pub status: RunStatus,
    pub partial_metrics: bool,
    pub records: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config: serde_json::Value,
}

impl RunManifest {
    pub fn new(config: &RunConfig, seed: u64) -> Result<Self> {
        Ok(RunManifest {
            config_hash: config.hash()?,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            env: config.env.name().to_string(),
            mode: config.trainer.mode.name().to_string(),
            outputs: BTreeMap::new(),
            status: RunStatus::Running,
            partial_metrics: false,
            records: 0,
            error: None,
            config: serde_json::to_value(config)?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Mean squared error between the elite-mean predicted next state and the
/// true next state, over samples and state dimensions.
pub fn model_prediction_error(model: &EnsembleModel, holdout: &[Transition]) -> Result<f64> {
    if holdout.is_empty() {
        return Err(Error::InvalidInput("prediction error needs at least one holdout transition".into()));
    }
    let d = model.obs_dim();
    let mut sum = 0.0;
    for chunk in holdout.chunks(CHUNK) {
        let obs = Matrix::from_rows(&chunk.iter().map(|t| &t.obs[..]).collect::<Vec<_>>(), d);
        let act = Matrix::from_rows(
            &chunk.iter().map(|t| &t.action[..]).collect::<Vec<_>>(),
            model.action_dim(),
        );
        let pred = model.mean_next_obs(&obs, &act)?;
        for (i, t) in chunk.iter().enumerate() {
            for (p, y) in pred.row(i).iter().zip(&t.next_obs) {
                sum += (p - y).powi(2);
            }
        }
    }
    Ok(sum / (holdout.len() * d) as f64)
}

/// Running mean of disagreement over `(s, a)` pairs fed in chunks.
struct DisagreementMean<'a> {
    model: &'a EnsembleModel,
    obs: Vec<f64>,
    act: Vec<f64>,
    rows: usize,
    sum: f64,
    count: usize,
}

impl<'a> DisagreementMean<'a> {
    fn new(model: &'a EnsembleModel) -> Self {
        DisagreementMean {
            model,
            obs: Vec::new(),
            act: Vec::new(),
            rows: 0,
            sum: 0.0,
            count: 0,
        }
    }

    fn push(&mut self, obs: &[f64], act: &[f64]) -> Result<()> {
        self.obs.extend_from_slice(obs);
        self.act.extend_from_slice(act);
        self.rows += 1;
        if self.rows == CHUNK {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if self.rows == 0 {
            return Ok(());
        }
        let o = Matrix::from_vec(self.rows, self.model.obs_dim(), std::mem::take(&mut self.obs));
        let a = Matrix::from_vec(self.rows, self.model.action_dim(), std::mem::take(&mut self.act));
        self.sum += self.model.disagreement_batch(&o, &a)?.iter().sum::<f64>();
        self.count += self.rows;
        self.rows = 0;
        Ok(())
    }

    fn finish(mut self, what: &'static str) -> Result<f64> {
        self.flush()?;
        if self.count == 0 {
            return Err(Error::EmptySource(what));
        }
        Ok(self.sum / self.count as f64)
    }
}

/// Mean disagreement of `model` over every `(s, a)` stored in `buffer`.
pub fn rollout_uncertainty_metric(model: &EnsembleModel, buffer: &ModelBuffer) -> Result<f64> {
    let mut acc = DisagreementMean::new(model);
    for (t, _) in buffer.iter() {
        acc.push(&t.obs, &t.action)?;
    }
    acc.finish("model")
}

/// Same metric streamed from a buffer dump.
pub fn rollout_uncertainty_from_dump<R: Read>(model: &EnsembleModel, dump: R) -> Result<f64> {
    let reader = DumpReader::new(dump)?;
    if reader.obs_dim != model.obs_dim() || reader.action_dim != model.action_dim() {
        return Err(Error::Format {
            what: "buffer dump",
            message: format!(
                "dims {}x{} do not match the model's {}x{}",
                reader.obs_dim,
                reader.action_dim,
                model.obs_dim(),
                model.action_dim()
            ),
        });
    }
    let mut acc = DisagreementMean::new(model);
    for rec in reader {
        let rec = rec?;
        acc.push(&rec.transition.obs, &rec.transition.action)?;
    }
    acc.finish("model")
}

/// One row of the aggregated learning-curve table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub mode: String,
    /// Position of the record within each run file.
    pub checkpoint: usize,
    pub env_steps: usize,
    pub seeds: usize,
    pub mean: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std: f64,
    /// Half-width of the normal-approximation 95% interval,
    /// `1.96 * std / sqrt(seeds)`.
    pub ci95: f64,
}

/// Groups runs by mode and aggregates `eval_return_mean` per checkpoint.
pub fn aggregate(runs: &[(String, Vec<MetricRecord>)]) -> Result<Vec<CurvePoint>> {
    let mut groups: BTreeMap<(String, usize), (usize, Vec<f64>)> = BTreeMap::new();
    for (mode, records) in runs {
        for (i, r) in records.iter().enumerate() {
            let entry = groups
                .entry((mode.clone(), i))
                .or_insert_with(|| (r.env_steps, Vec::new()));
            if entry.0 != r.env_steps {
                return Err(Error::InvalidInput(format!(
                    "mode {mode} checkpoint {i}: runs disagree on env_steps ({} vs {})",
                    entry.0, r.env_steps
                )));
            }
            entry.1.push(r.eval_return_mean);
        }
    }
    Ok(groups
        .into_iter()
        .map(|((mode, checkpoint), (env_steps, xs))| {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let std = if xs.len() > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            CurvePoint {
                mode,
                checkpoint,
                env_steps,
                seeds: xs.len(),
                mean,
                std,
                ci95: 1.96 * std / n.sqrt(),
            }
        })
        .collect())
}

/// Finds every run directory (one holding a manifest and a metric file)
/// under `root`, in sorted path order.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io(e.into()))?;
        if entry.file_name() == crate::trainer::MANIFEST_FILE {
            let dir = entry.path().parent().expect("file has a parent").to_path_buf();
            if dir.join(crate::trainer::METRICS_FILE).exists() {
                dirs.push(dir);
            }
        }
    }
    Ok(dirs)
}

/// Aggregates every run under `root` and writes the table as CSV.
pub fn plot_data<W: Write>(root: &Path, out: W) -> Result<Vec<CurvePoint>> {
    let mut runs = Vec::new();
    for dir in find_runs(root)? {
        let manifest = RunManifest::read(&dir.join(crate::trainer::MANIFEST_FILE))?;
        runs.push((manifest.mode, read_metrics(&dir.join(crate::trainer::METRICS_FILE))?));
    }
    if runs.is_empty() {
        return Err(Error::InvalidInput(format!("no runs found under {}", root.display())));
    }
    let points = aggregate(&runs)?;
    let mut csv = csv::Writer::from_writer(out);
    for p in &points {
        csv.serialize(p)?;
    }
    csv.flush()?;
    Ok(points)
}
