//! SplitMix64 generator shared by every stochastic step of the pipeline.
//!
//! Each consumer (initialisation, shuffling, sampling, projections, ...) draws
//! from its own substream so that adding draws in one place never perturbs
//! another. A substream for `(seed, role)` is a fresh generator whose state is
//! the first output of `SplitMix64(seed ^ role)`.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Role constants used to derive independent substreams from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 0x1111_0000_0000_0001,
    Shuffle = 0x2222_0000_0000_0002,
    RandomSelect = 0x3333_0000_0000_0003,
    Gumbel = 0x4444_0000_0000_0004,
    Projection = 0x5555_0000_0000_0005,
    Synth = 0x6666_0000_0000_0006,
    Split = 0x7777_0000_0000_0007,
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Substream for a given role, derived as described in the module docs.
    pub fn substream(seed: u64, role: Stream) -> Self {
        let mut parent = Self::new(seed ^ role as u64);
        Self::new(parent.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in (0, 1); never returns 0, so logs are always finite.
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_f64() * n as f64) as usize).min(n - 1)
    }

    /// Standard normal draw (Box-Muller, one value per call).
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_open01();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Standard Gumbel draw.
    pub fn next_gumbel(&mut self) -> f64 {
        -(-self.next_open01().ln()).ln()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
