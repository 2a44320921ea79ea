//! Real and model transition buffers with real-ratio batch mixing.
//!
//! The binary dump written by [`ModelBuffer::dump`] is little-endian:
//!
//! ```text
//! magic      4 bytes  b"CPBF"
//! version    u32      1
//! obs_dim    u32
//! action_dim u32
//! count      u64
//! records    count x { obs f64 x obs_dim, action f64 x action_dim,
//!                      reward f64, next_obs f64 x obs_dim, done u8,
//!                      truncated u8, member u32, disagreement f64 }
//! ```
//!
//! Real transitions are dumped with `member = u32::MAX` and disagreement 0.

use std::collections::VecDeque;
use std::io::{Read, Write};

use crate::envs::Transition;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

/// Provenance of a model-generated transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutTrace {
    /// Ensemble member that produced the sample.
    pub member: usize,
    /// Disagreement at the transition's `(s, a)`.
    pub disagreement: f64,
}

fn check_finite(t: &Transition, source: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "non-finite transition rejected by {source} buffer: obs={:?} action={:?} reward={} next_obs={:?}",
            t.obs, t.action, t.reward, t.next_obs
        )))
    }
}

/// Append-only store of real environment transitions.
#[derive(Debug, Clone, Default)]
pub struct RealBuffer {
    items: Vec<Transition>,
}

impl RealBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        check_finite(&t, "real")?;
        self.items.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn as_slice(&self) -> &[Transition] {
        &self.items
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn sample_index(&self, rng: &mut RngStream) -> Result<usize> {
        if self.items.is_empty() {
            return Err(Error::EmptySource("real"));
        }
        Ok(rng.index(self.items.len()))
    }
}

/// Bounded FIFO store of model-generated transitions.
#[derive(Debug, Clone)]
pub struct ModelBuffer {
    capacity: usize,
    items: VecDeque<(Transition, RolloutTrace)>,
}

impl ModelBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "model buffer capacity must be positive");
        ModelBuffer {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition, trace: RolloutTrace) -> Result<()> {
        check_finite(&t, "model")?;
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back((t, trace));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i].0
    }

    pub fn trace(&self, i: usize) -> RolloutTrace {
        self.items[i].1
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &(Transition, RolloutTrace)> {
        self.items.iter()
    }

    pub fn dump<W: Write>(&self, w: &mut W, obs_dim: usize, action_dim: usize) -> Result<()> {
        write_dump(
            w,
            obs_dim,
            action_dim,
            self.items.len(),
            self.items.iter().map(|(t, tr)| (t, Some(*tr))),
        )
    }
}

impl RealBuffer {
    pub fn dump<W: Write>(&self, w: &mut W, obs_dim: usize, action_dim: usize) -> Result<()> {
        write_dump(
            w,
            obs_dim,
            action_dim,
            self.items.len(),
            self.items.iter().map(|t| (t, None)),
        )
    }
}

fn write_dump<'a, W: Write>(
    w: &mut W,
    obs_dim: usize,
    action_dim: usize,
    count: usize,
    records: impl Iterator<Item = (&'a Transition, Option<RolloutTrace>)>,
) -> Result<()> {
    w.write_all(b"CPBF")?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&(obs_dim as u32).to_le_bytes())?;
    w.write_all(&(action_dim as u32).to_le_bytes())?;
    w.write_all(&(count as u64).to_le_bytes())?;
    for (t, trace) in records {
        if t.obs.len() != obs_dim || t.next_obs.len() != obs_dim {
            return Err(Error::shape("buffer dump obs", obs_dim, t.obs.len()));
        }
        if t.action.len() != action_dim {
            return Err(Error::shape("buffer dump action", action_dim, t.action.len()));
        }
        for v in t.obs.iter().chain(&t.action).chain(std::iter::once(&t.reward)).chain(&t.next_obs) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[t.done as u8, t.truncated as u8])?;
        let (member, u) = match trace {
            Some(tr) => (tr.member as u32, tr.disagreement),
            None => (u32::MAX, 0.0),
        };
        w.write_all(&member.to_le_bytes())?;
        w.write_all(&u.to_le_bytes())?;
    }
    Ok(())
}

/// One record of a buffer dump.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpRecord {
    pub transition: Transition,
    pub trace: Option<RolloutTrace>,
}

/// Streaming reader over a buffer dump.
pub struct DumpReader<R: Read> {
    reader: R,
    pub obs_dim: usize,
    pub action_dim: usize,
    remaining: u64,
}

impl<R: Read> DumpReader<R> {
    pub fn new(mut reader: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        reader.read_exact(&mut magic)?;
        if &magic != b"CPBF" {
            return Err(Error::Format {
                what: "buffer dump",
                message: "bad magic".into(),
            });
        }
        let version = read_u32(&mut reader)?;
        if version != 1 {
            return Err(Error::Format {
                what: "buffer dump",
                message: format!("unsupported version {version}"),
            });
        }
        let obs_dim = read_u32(&mut reader)? as usize;
        let action_dim = read_u32(&mut reader)? as usize;
        let mut b = [0u8; 8];
        reader.read_exact(&mut b)?;
        Ok(DumpReader {
            reader,
            obs_dim,
            action_dim,
            remaining: u64::from_le_bytes(b),
        })
    }

    pub fn remaining(&self) -> u64 {
        self.remaining
    }

    fn read_record(&mut self) -> Result<DumpRecord> {
        let r = &mut self.reader;
        let obs = read_f64s(r, self.obs_dim)?;
        let action = read_f64s(r, self.action_dim)?;
        let reward = read_f64s(r, 1)?[0];
        let next_obs = read_f64s(r, self.obs_dim)?;
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags)?;
        let member = read_u32(r)?;
        let u = read_f64s(r, 1)?[0];
        Ok(DumpRecord {
            transition: Transition {
                obs,
                action,
                reward,
                next_obs,
                done: flags[0] != 0,
                truncated: flags[1] != 0,
            },
            trace: (member != u32::MAX).then_some(RolloutTrace {
                member: member as usize,
                disagreement: u,
            }),
        })
    }
}

impl<R: Read> Iterator for DumpReader<R> {
    type Item = Result<DumpRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        Some(self.read_record())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    (0..n)
        .map(|_| {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        })
        .collect()
}

/// Column-stacked minibatch of transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub obs: Matrix,
    pub actions: Matrix,
    pub rewards: Vec<f64>,
    pub next_obs: Matrix,
    /// 1.0 where the transition terminated.
    pub dones: Vec<f64>,
    /// Count of rows drawn from the real buffer.
    pub real_count: usize,
}

impl TransitionBatch {
    pub fn from_transitions(items: &[&Transition]) -> Self {
        let obs_dim = items.first().map_or(0, |t| t.obs.len());
        let action_dim = items.first().map_or(0, |t| t.action.len());
        TransitionBatch {
            obs: Matrix::from_rows(&items.iter().map(|t| &t.obs[..]).collect::<Vec<_>>(), obs_dim),
            actions: Matrix::from_rows(
                &items.iter().map(|t| &t.action[..]).collect::<Vec<_>>(),
                action_dim,
            ),
            rewards: items.iter().map(|t| t.reward).collect(),
            next_obs: Matrix::from_rows(
                &items.iter().map(|t| &t.next_obs[..]).collect::<Vec<_>>(),
                obs_dim,
            ),
            dones: items.iter().map(|t| if t.done { 1.0 } else { 0.0 }).collect(),
            real_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Number of real rows in a mixed batch: `real_ratio * batch_size`, rounded
/// half up.
pub fn real_share(batch_size: usize, real_ratio: f64) -> usize {
    ((real_ratio * batch_size as f64 + 0.5).floor() as usize).min(batch_size)
}

/// Draws a shuffled batch with `real_share` rows from `real` and the rest from
/// `model`, uniformly with replacement.
pub fn sample_mixed(
    real: &RealBuffer,
    model: &ModelBuffer,
    batch_size: usize,
    real_ratio: f64,
    rng: &mut RngStream,
) -> Result<TransitionBatch> {
    if !(0.0..=1.0).contains(&real_ratio) {
        return Err(Error::InvalidInput(format!("real ratio {real_ratio} outside [0, 1]")));
    }
    let n_real = real_share(batch_size, real_ratio);
    let n_model = batch_size - n_real;
    if n_real > 0 && real.is_empty() {
        return Err(Error::EmptySource("real"));
    }
    if n_model > 0 && model.is_empty() {
        return Err(Error::EmptySource("model"));
    }
    let mut picks: Vec<&Transition> = Vec::with_capacity(batch_size);
    for _ in 0..n_real {
        picks.push(real.get(rng.index(real.len())));
    }
    for _ in 0..n_model {
        picks.push(model.get(rng.index(model.len())));
    }
    crate::dynamics::shuffle(&mut picks, rng);
    let mut batch = TransitionBatch::from_transitions(&picks);
    batch.real_count = n_real;
    Ok(batch)
}
