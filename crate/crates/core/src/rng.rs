//! Seeded random streams built on splitmix64.
//!
//! Every random draw in the crate comes from a [`SeedStream`], and every stream
//! seed is derived with [`mix64`] so that two runs with the same master seed are
//! bit-identical regardless of evaluation order or thread count.

/// splitmix64 mixing step (Vigna). The constants are fixed so independent
/// implementations of the seed-derivation rule agree bit-for-bit.
#[inline]
pub fn mix64(z: u64) -> u64 {
    let mut z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed for one weight tensor:
/// `mix64(seed ^ mix64(genome_id) ^ mix64(layer) ^ mix64(trial))`.
#[inline]
pub fn stream_seed(seed: u64, genome_id: u64, layer: u64, trial: u64) -> u64 {
    mix64(seed ^ mix64(genome_id) ^ mix64(layer) ^ mix64(trial))
}

/// splitmix64 generator. Fast, non-cryptographic, fully portable.
#[derive(Debug, Clone)]
pub struct SeedStream {
    state: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        const DEN: f64 = (1u64 << 53) as f64;
        ((self.next_u64() >> 11) as f64) / DEN
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [lo, hi] (inclusive). Uses the multiply-high method;
    /// bias is negligible for the small spans used here.
    #[inline]
    pub fn int_in(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        let span = hi - lo + 1;
        lo + (((self.next_u64() as u128) * (span as u128)) >> 64) as u64
    }

    /// Uniform index in [0, n).
    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        self.int_in(0, n as u64 - 1) as usize
    }

    /// Bernoulli draw with probability `p`.
    #[inline]
    pub fn chance(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller. Draws two uniforms per call; no caching
    /// so the draw count per sample is fixed.
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
