//! Deterministic keyed randomness.
//!
//! Every stochastic draw in the crate flows through a [`KeyedStream`]: a
//! ChaCha8 keystream whose 256-bit key is derived from a list of 64-bit
//! labels (seed, domain tag, worker id, ...) and whose stream id carries the
//! iteration counter. Two parties deriving the same labels produce the same
//! bytes on any platform, which is what makes pairwise noise cancellation
//! exact rather than statistical. Gaussian samples go through a rational
//! approximation of the normal quantile built only from arithmetic and
//! `libm` calls, so they are reproducible bit for bit across platforms.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Domain tags keeping unrelated streams apart under one master seed.
pub mod domain {
    pub const PAIR_SEED: u64 = 0x7061_6972; // pairwise seed table
    pub const PAIR_NOISE: u64 = 0x636f_7272; // correlated noise stream
    pub const IND_NOISE: u64 = 0x696e_6470; // independent noise stream
    pub const BATCH: u64 = 0x6261_7463; // mini-batch sampling
    pub const PARTITION: u64 = 0x7061_7274; // data partitioning
    pub const TASK: u64 = 0x7461_736b; // synthetic task generation
    pub const POWER_START: u64 = 0x7077_6974; // power-iteration start vector
    pub const THETA_HAT: u64 = 0x7468_6174; // uniform iterate sampling
}

/// SplitMix64 finalizer; good avalanche, zero state.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold a list of labels into one 64-bit value.
pub fn mix_labels(labels: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3u64;
    for (i, &l) in labels.iter().enumerate() {
        h = mix64(h ^ l.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1)));
    }
    h
}

fn derive_key(labels: &[u64]) -> [u8; 32] {
    let h = mix_labels(labels);
    let mut key = [0u8; 32];
    for k in 0..4 {
        let w = mix64(h.wrapping_add((k as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        key[8 * k..8 * (k + 1)].copy_from_slice(&w.to_le_bytes());
    }
    key
}

/// A counter-mode keystream addressed by `(labels, stream)`.
pub struct KeyedStream {
    rng: ChaCha8Rng,
}

impl KeyedStream {
    /// Open the stream identified by `labels` with stream counter `stream`
    /// (typically the iteration index).
    pub fn new(labels: &[u64], stream: u64) -> Self {
        let mut rng = ChaCha8Rng::from_seed(derive_key(labels));
        rng.set_stream(stream);
        Self { rng }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in the open interval (0, 1), 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (((self.next_u64() >> 11) as f64) + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal draw via the quantile of a uniform.
    pub fn standard_normal(&mut self) -> f64 {
        inverse_normal_cdf(self.uniform())
    }

    /// Uniform integer in `[0, bound)` by rejection; exact, no modulo bias.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0);
        let bound = bound as u64;
        let zone = u64::MAX - (u64::MAX % bound + 1) % bound;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return (v % bound) as usize;
            }
        }
    }

    /// First `k` entries of a Fisher-Yates shuffle of `0..len`.
    pub fn sample_without_replacement(&mut self, len: usize, k: usize) -> Vec<usize> {
        assert!(k <= len);
        let mut idx: Vec<usize> = (0..len).collect();
        for i in 0..k {
            let j = i + self.below(len - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }

    /// Gamma(shape, 1) draw, Marsaglia-Tsang with the shape<1 boost.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        assert!(shape > 0.0);
        if shape < 1.0 {
            let boost = libm::pow(self.uniform(), 1.0 / shape);
            return boost * self.gamma(shape + 1.0);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / libm::sqrt(9.0 * d);
        loop {
            let x = self.standard_normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v3 = v * v * v;
            let u = self.uniform();
            if libm::log(u) < 0.5 * x * x + d - d * v3 + d * libm::log(v3) {
                return d * v3;
            }
        }
    }
}

/// Normal quantile (inverse CDF), Acklam's rational approximation.
///
/// Relative error below 1.2e-9 over (0, 1); built from arithmetic plus
/// `libm::{log, sqrt}` only, so results are identical on every platform.
#[allow(clippy::excessive_precision)] // published coefficients kept verbatim
pub fn inverse_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile argument must lie in (0,1)");

    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = libm::sqrt(-2.0 * libm::log(p));
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = libm::sqrt(-2.0 * libm::log(1.0 - p));
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let mut a = KeyedStream::new(&[1, 2, 3], 7);
        let mut b = KeyedStream::new(&[1, 2, 3], 7);
        for _ in 0..32 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_differ_by_label_and_stream() {
        let mut a = KeyedStream::new(&[1, 2, 3], 0);
        let mut b = KeyedStream::new(&[1, 2, 4], 0);
        let mut c = KeyedStream::new(&[1, 2, 3], 1);
        let base = a.next_u64();
        assert_ne!(base, b.next_u64());
        assert_ne!(base, c.next_u64());
    }

    #[test]
    fn quantile_symmetry_and_anchors() {
        assert!(inverse_normal_cdf(0.5).abs() < 1e-12);
        let z = inverse_normal_cdf(0.975);
        assert!((z - 1.959963984540054).abs() < 1e-7, "z={z}");
        for &p in &[1e-9, 1e-4, 0.3, 0.5, 0.9, 1.0 - 1e-9] {
            let a = inverse_normal_cdf(p);
            let b = inverse_normal_cdf(1.0 - p);
            assert!((a + b).abs() < 1e-6 * (1.0 + a.abs()), "p={p}");
        }
    }

    #[test]
    fn normal_moments() {
        let mut s = KeyedStream::new(&[42], 0);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let z = s.standard_normal();
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean={mean}");
        assert!((var - 1.0).abs() < 0.02, "var={var}");
    }

    #[test]
    fn below_is_unbiased_enough() {
        let mut s = KeyedStream::new(&[7], 0);
        let mut counts = [0usize; 5];
        for _ in 0..50_000 {
            counts[s.below(5)] += 1;
        }
        for &c in &counts {
            assert!((c as f64 - 10_000.0).abs() < 500.0, "counts={counts:?}");
        }
    }

    #[test]
    fn sample_without_replacement_is_a_prefix_permutation() {
        let mut s = KeyedStream::new(&[9], 3);
        let k = s.sample_without_replacement(10, 4);
        assert_eq!(k.len(), 4);
        let mut sorted = k.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 4);
        assert!(sorted.iter().all(|&i| i < 10));
    }

    #[test]
    fn gamma_mean_matches_shape() {
        let mut s = KeyedStream::new(&[11], 0);
        for &shape in &[0.3, 1.0, 4.5] {
            let n = 20_000;
            let mut sum = 0.0;
            for _ in 0..n {
                sum += s.gamma(shape);
            }
            let mean = sum / n as f64;
            assert!(
                (mean - shape).abs() < 0.05 * (1.0 + shape),
                "shape={shape} mean={mean}"
            );
        }
    }
}
