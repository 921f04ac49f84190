//! Seeded SplitMix64 streams.
//!
//! Every random quantity in the simulator is drawn from a [`SplitMix64`]
//! stream derived from a user seed plus a fixed list of stream tags, so the
//! exact sequence can be reproduced by any implementation of the same
//! generator:
//!
//! ```text
//! state_0 = seed
//! state_i = mix64(state_{i-1} ^ mix64(tag_i + GOLDEN_GAMMA))
//! next()  : state += GOLDEN_GAMMA; return mix64(state)
//! mix64(z): z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!           z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!           return z ^ (z >> 31)
//! ```
//!
//! Uniform reals use the top 53 bits, bounded integers use Lemire's
//! multiply-and-reject method and shuffles are Fisher-Yates from the back.

/// Weyl increment of SplitMix64.
pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Stream tags. Each consumer of randomness owns one.
pub mod stream {
    pub const DATASET: u64 = 1;
    pub const TRAIN_TEST_SPLIT: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const MOBILITY_INIT: u64 = 4;
    pub const TURNING: u64 = 5;
    pub const BATCH: u64 = 6;
    pub const MODEL_INIT: u64 = 7;
    pub const POWER_ITERATION: u64 = 8;
}

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Derives an independent stream from `seed` and a path of tags.
    pub fn derive(seed: u64, tags: &[u64]) -> Self {
        let state = tags.iter().fold(seed, |s, &tag| {
            mix64(s ^ mix64(tag.wrapping_add(GOLDEN_GAMMA)))
        });
        Self { state }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let mut m = (self.next_u64() as u128) * (n as u128);
        let mut low = m as u64;
        if low < n {
            let threshold = n.wrapping_neg() % n;
            while low < threshold {
                m = (self.next_u64() as u128) * (n as u128);
                low = m as u64;
            }
        }
        (m >> 64) as u64
    }

    /// Standard normal deviate (Box-Muller, cosine branch only).
    pub fn next_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn coin(&mut self) -> bool {
        self.next_u64() >> 63 == 1
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        // Published SplitMix64 outputs for seed 0.
        let mut rng = SplitMix64::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(rng.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn derived_streams_differ() {
        let a = SplitMix64::derive(7, &[stream::BATCH, 0]).next_u64();
        let b = SplitMix64::derive(7, &[stream::BATCH, 1]).next_u64();
        let c = SplitMix64::derive(8, &[stream::BATCH, 0]).next_u64();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, SplitMix64::derive(7, &[stream::BATCH, 0]).next_u64());
    }

    #[test]
    fn below_stays_in_range_and_hits_all_values() {
        let mut rng = SplitMix64::new(3);
        let mut seen = [0usize; 7];
        for _ in 0..7000 {
            let v = rng.below(7) as usize;
            seen[v] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800 && c < 1200), "{seen:?}");
    }

    #[test]
    fn uniform_and_normal_moments() {
        let mut rng = SplitMix64::new(11);
        let n = 200_000;
        let (mut su, mut sn, mut sn2) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let u = rng.next_f64();
            assert!((0.0..1.0).contains(&u));
            su += u;
            let z = rng.next_normal();
            sn += z;
            sn2 += z * z;
        }
        let n = n as f64;
        assert!((su / n - 0.5).abs() < 0.005);
        assert!((sn / n).abs() < 0.01);
        assert!((sn2 / n - 1.0).abs() < 0.02);
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = SplitMix64::new(5);
        let mut v: Vec<usize> = (0..100).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
