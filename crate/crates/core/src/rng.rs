//! Splittable 64-bit generator (SplitMix64).
//!
//! Every stochastic routine in the crate takes an explicit seed and derives
//! independent streams with [`Rng::derive`], so seed `s` of a Monte-Carlo
//! sweep is reproducible without generating seeds `0..s-1` first.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    /// Cached second output of the Box-Muller transform.
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        // One warm-up mix so nearby seeds decorrelate.
        let mut state = seed;
        splitmix64(&mut state);
        Rng { state, spare_normal: None }
    }

    /// Independent stream `stream` of the generator seeded with `seed`.
    pub fn from_seed_stream(seed: u64, stream: u64) -> Self {
        let mut state = seed;
        let a = splitmix64(&mut state);
        let mut state = stream ^ a.rotate_left(17);
        splitmix64(&mut state);
        Rng { state, spare_normal: None }
    }

    /// Derive a child generator; advances this one by a single draw.
    pub fn derive(&mut self, stream: u64) -> Rng {
        Rng::from_seed_stream(self.next_u64(), stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Rejection-free multiply-shift; bias is negligible for n << 2^64.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1]: avoids ln(0).
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn next_gaussian(&mut self, mean: f64, std_dev: f64) -> f64 {
        mean + std_dev * self.next_normal()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}
