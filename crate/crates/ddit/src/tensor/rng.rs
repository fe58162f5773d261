//! Deterministic PCG32 generator (PCG-XSH-RR 64/32) with Box–Muller normal
//! sampling.
//!
//! Same seed and stream produce the same draw sequence, bit for bit. Cross
//! implementation compatibility is not a goal; internal determinism is. The
//! full generator state is two u64 words, so it serializes losslessly into
//! checkpoints (see [`Rng::to_hex`]).

use crate::error::{Error, Result};

const MULTIPLIER: u64 = 6364136223846793005;

/// PCG32 state. `inc` is the (odd) stream selector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
    inc: u64,
}

impl Rng {
    /// Generator seeded on stream 0.
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Generator with an explicit stream id; distinct streams from the same
    /// seed are independent sequences.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = Rng {
            state: 0,
            inc: (stream << 1) | 1,
        };
        rng.next_u32();
        rng.state = rng.state.wrapping_add(seed);
        rng.next_u32();
        rng
    }

    pub fn next_u32(&mut self) -> u32 {
        let old = self.state;
        self.state = old.wrapping_mul(MULTIPLIER).wrapping_add(self.inc);
        let xorshifted = (((old >> 18) ^ old) >> 27) as u32;
        let rot = (old >> 59) as u32;
        xorshifted.rotate_right(rot)
    }

    pub fn next_u64(&mut self) -> u64 {
        let lo = self.next_u32() as u64;
        let hi = self.next_u32() as u64;
        lo | (hi << 32)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        (self.next_u64() >> 11) as f64 * SCALE
    }

    /// Uniform integer in [0, bound); unbiased via rejection.
    pub fn next_below(&mut self, bound: u32) -> u32 {
        assert!(bound > 0, "next_below bound must be positive");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let x = self.next_u32();
            if x >= threshold {
                return x % bound;
            }
        }
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal draw via Box–Muller. Consumes two uniforms and keeps
    /// only the cosine branch so the state stays a pure (state, inc) pair.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1], keeps ln finite
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn fill_normal(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_normal()).collect()
    }

    pub fn fill_uniform(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }

    /// Select `k` distinct indices out of `0..n`, returned sorted.
    pub fn choose_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        // partial Fisher-Yates
        for i in 0..k {
            let j = i + self.next_below((n - i) as u32) as usize;
            pool.swap(i, j);
        }
        let mut chosen = pool[..k].to_vec();
        chosen.sort_unstable();
        chosen
    }

    /// 32 hex chars: state then inc.
    pub fn to_hex(&self) -> String {
        format!("{:016x}{:016x}", self.state, self.inc)
    }

    pub fn from_hex(hex: &str) -> Result<Self> {
        if hex.len() != 32 {
            return Err(Error::MalformedManifest(format!(
                "rng hex must be 32 chars, got {}",
                hex.len()
            )));
        }
        let state = u64::from_str_radix(&hex[..16], 16)
            .map_err(|e| Error::MalformedManifest(format!("rng hex: {e}")))?;
        let inc = u64::from_str_radix(&hex[16..], 16)
            .map_err(|e| Error::MalformedManifest(format!("rng hex: {e}")))?;
        Ok(Rng { state, inc })
    }
}
