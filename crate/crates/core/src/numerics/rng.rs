//! Splittable, counter-based random streams.
//!
//! A stream is a ChaCha8 keystream addressed by `(seed, stream id)`. Splitting
//! derives a child stream id by hashing the parent id with a label, so
//! independent consumers (seeds, candidates, rollout branches) never share
//! draws and do not depend on each other's consumption order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Deterministic random stream identified by `(seed, stream id)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Position in the keystream, in 32-bit words.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Child stream keyed by a label. Does not advance `self`.
    pub fn split(&self, label: &str) -> RngStream {
        let h = fnv1a(label.as_bytes(), FNV_OFFSET ^ self.stream_id);
        RngStream::new(self.seed, mix(h))
    }

    /// Child stream keyed by an integer index. Does not advance `self`.
    pub fn split_index(&self, index: u64) -> RngStream {
        let h = fnv1a(&index.to_le_bytes(), fnv1a(b"#", FNV_OFFSET ^ self.stream_id));
        RngStream::new(self.seed, mix(h))
    }

    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn draw_gaussian(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }

    pub fn draw_uniform(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.uniform()).collect()
    }

    /// Uniform index in `0..n`. Panics when `n == 0`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be non-empty");
        rand::Rng::random_range(self, 0..n)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Free-function form of [`RngStream::draw_gaussian`].
pub fn rng_draw_gaussian(stream: &mut RngStream, n: usize) -> Vec<f64> {
    stream.draw_gaussian(n)
}

/// Free-function form of [`RngStream::draw_uniform`].
pub fn rng_draw_uniform(stream: &mut RngStream, n: usize) -> Vec<f64> {
    stream.draw_uniform(n)
}

/// Free-function form of [`RngStream::split`].
pub fn rng_split(stream: &RngStream, label: &str) -> RngStream {
    stream.split(label)
}
