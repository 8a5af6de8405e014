//! Robust aggregation of `n` candidate vectors of which up to `f` may be
//! corrupt.
//!
//! The centerpiece is the covariance-agnostic filter ([`caf`]): it
//! iteratively downweights inputs by their contribution to variance along
//! the worst direction, tracks the weighted mean with the smallest top
//! covariance eigenvalue seen so far, and returns that mean once the
//! surviving weight mass drops below `n - 2f`. No bound on the honest
//! covariance is required, only the corrupt count bound `f < n/2`.
//!
//! [`certify`] evaluates the deviation guarantee the filter satisfies:
//! for every subset `S` of size `n - f`,
//! `"output - mean(S)"^2 <= kappa * lambda_max(cov(S))` with
//! `kappa = 6f/(n-f) * (1 + f/(n-2f))^2`.
//!
//! The usual coordinate-wise and distance-based aggregation rules live in
//! [`baselines`] for comparison.

mod baselines;
mod eigen;

pub use baselines::{baseline, BaselineRule};
pub use eigen::{weighted_cov_top_eigen, CovTopEigen, EigenMode};

use serde::Serialize;
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("vector {index} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("vector {0} contains a non-finite entry")]
    NonFinite(usize),
    #[error("corrupt bound {corrupt_bound} must satisfy 2*{corrupt_bound} < n = {n}")]
    InvalidCorruptBound { corrupt_bound: usize, n: usize },
    #[error("weight vector has length {got}, batch has {expected} vectors")]
    WeightLengthMismatch { got: usize, expected: usize },
    #[error("weights are degenerate: {0}")]
    DegenerateWeights(&'static str),
    #[error("honest index set invalid: {0}")]
    InvalidHonestSet(String),
}

/// A set of `n` candidate vectors sharing one dimension, all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateBatch {
    vectors: Vec<Vec<f64>>,
}

impl UpdateBatch {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self, AggregationError> {
        if vectors.is_empty() {
            return Err(AggregationError::EmptyBatch);
        }
        let d = vectors[0].len();
        if d == 0 {
            return Err(AggregationError::DimensionMismatch {
                index: 0,
                got: 0,
                expected: 1,
            });
        }
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != d {
                return Err(AggregationError::DimensionMismatch {
                    index: i,
                    got: v.len(),
                    expected: d,
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(AggregationError::NonFinite(i));
            }
        }
        Ok(Self { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.vectors
    }
}

fn check_corrupt_bound(n: usize, corrupt_bound: usize) -> Result<(), AggregationError> {
    if 2 * corrupt_bound >= n {
        return Err(AggregationError::InvalidCorruptBound { corrupt_bound, n });
    }
    Ok(())
}

fn check_weights(batch: &UpdateBatch, weights: &[f64]) -> Result<f64, AggregationError> {
    if weights.len() != batch.len() {
        return Err(AggregationError::WeightLengthMismatch {
            got: weights.len(),
            expected: batch.len(),
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(AggregationError::DegenerateWeights(
            "weights must be finite and nonnegative",
        ));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(AggregationError::DegenerateWeights("weights sum to zero"));
    }
    Ok(total)
}

/// Weighted mean `sum_i c_i x_i / sum_i c_i`.
pub fn weighted_mean(batch: &UpdateBatch, weights: &[f64]) -> Result<Vec<f64>, AggregationError> {
    let total = check_weights(batch, weights)?;
    let mut out = vec![0.0; batch.dim()];
    for (w, x) in weights.iter().zip(batch.rows()) {
        if *w > 0.0 {
            linalg::axpy(&mut out, *w, x);
        }
    }
    linalg::scale(&mut out, 1.0 / total);
    Ok(out)
}

/// Snapshot of the filter state after one downweighting pass.
#[derive(Debug, Clone, Serialize)]
pub struct CafState {
    /// Current per-input weights in `[0, 1]`.
    pub weights: Vec<f64>,
    /// Best weighted mean tracked so far.
    pub best_mean: Vec<f64>,
    /// Square root of the smallest top covariance eigenvalue seen so far.
    pub best_sigma: f64,
    /// Downweighting passes executed so far.
    pub iterations_used: usize,
}

#[derive(Debug, Clone)]
pub struct CafOutput {
    /// The aggregate: the tracked best weighted mean.
    pub mean: Vec<f64>,
    /// Final filter state.
    pub state: CafState,
    /// One state snapshot per loop iteration, in order.
    pub history: Vec<CafState>,
}

/// Weights below this are snapped to exact zero so the termination count
/// holds under floating point.
const WEIGHT_FLOOR: f64 = 1e-15;

/// Covariance-agnostic filter, exact eigensolver, default seed.
pub fn caf(batch: &UpdateBatch, corrupt_bound: usize) -> Result<Vec<f64>, AggregationError> {
    Ok(caf_full(batch, corrupt_bound, EigenMode::Exact, 0)?.mean)
}

/// Covariance-agnostic filter with explicit eigensolver mode and seed for
/// the power-iteration start vectors.
pub fn caf_full(
    batch: &UpdateBatch,
    corrupt_bound: usize,
    mode: EigenMode,
    seed: u64,
) -> Result<CafOutput, AggregationError> {
    let n = batch.len();
    check_corrupt_bound(n, corrupt_bound)?;

    let mut weights = vec![1.0f64; n];
    let mut best_mean = linalg::mean_rows(batch.rows());
    let mut best_sigma = f64::INFINITY;
    let mut iterations = 0usize;
    let mut history = Vec::new();
    let threshold = (n - 2 * corrupt_bound) as f64;

    while weights.iter().sum::<f64>() >= threshold {
        iterations += 1;
        // The loop sheds at least one active weight per pass, so it cannot
        // run more than 2f+1 times.
        debug_assert!(iterations <= 2 * corrupt_bound + 1);

        let eig = weighted_cov_top_eigen(batch, &weights, mode, seed ^ iterations as u64)?;
        let sigma = eig.lambda_max.max(0.0).sqrt();
        if sigma <= best_sigma {
            best_sigma = sigma;
            best_mean = eig.mean.clone();
        }

        let tau: Vec<f64> = batch
            .rows()
            .iter()
            .map(|x| {
                let proj = x
                    .iter()
                    .zip(&eig.mean)
                    .zip(&eig.eigenvector)
                    .map(|((xi, mi), vi)| (xi - mi) * vi)
                    .sum::<f64>();
                proj * proj
            })
            .collect();

        // The max is taken over inputs still carrying weight; a zeroed
        // input can deviate arbitrarily without telling us anything new,
        // and letting it own the max would stall the weight decay.
        let tau_max = tau
            .iter()
            .zip(&weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(t, _)| *t)
            .fold(0.0f64, f64::max);

        if tau_max == 0.0 {
            // All surviving inputs coincide along the top direction; the
            // covariance is degenerate and the tracked mean is final.
            history.push(CafState {
                weights: weights.clone(),
                best_mean: best_mean.clone(),
                best_sigma,
                iterations_used: iterations,
            });
            break;
        }

        for (w, t) in weights.iter_mut().zip(&tau) {
            let next = *w * (1.0 - t / tau_max);
            *w = if next < WEIGHT_FLOOR { 0.0 } else { next };
        }
        history.push(CafState {
            weights: weights.clone(),
            best_mean: best_mean.clone(),
            best_sigma,
            iterations_used: iterations,
        });
    }

    let state = CafState {
        weights,
        best_mean: best_mean.clone(),
        best_sigma,
        iterations_used: iterations,
    };
    Ok(CafOutput {
        mean: best_mean,
        state,
        history,
    })
}

/// The robustness constant `6f/(n-f) * (1 + f/(n-2f))^2`.
pub fn kappa(n: usize, corrupt_bound: usize) -> f64 {
    let f = corrupt_bound as f64;
    let n = n as f64;
    6.0 * f / (n - f) * (1.0 + f / (n - 2.0 * f)).powi(2)
}

/// Outcome of checking the filter deviation bound against one honest set.
#[derive(Debug, Clone, Serialize)]
pub struct RobustnessCertificate {
    /// Squared distance from the aggregate to the honest mean.
    pub lhs: f64,
    /// `kappa` times the top eigenvalue of the honest empirical covariance.
    pub rhs: f64,
    pub kappa: f64,
    pub holds: bool,
}

/// Evaluate the deviation bound for `output` against the honest subset.
///
/// `honest` must list `n - f` distinct in-range indices; `f` is inferred
/// from its size. `holds` allows a small relative and absolute slack for
/// floating point.
pub fn certify(
    batch: &UpdateBatch,
    honest: &[usize],
    output: &[f64],
) -> Result<RobustnessCertificate, AggregationError> {
    let n = batch.len();
    if honest.is_empty() {
        return Err(AggregationError::InvalidHonestSet("empty".into()));
    }
    let mut seen = vec![false; n];
    for &i in honest {
        if i >= n {
            return Err(AggregationError::InvalidHonestSet(format!(
                "index {i} out of range for n = {n}"
            )));
        }
        if seen[i] {
            return Err(AggregationError::InvalidHonestSet(format!(
                "duplicate index {i}"
            )));
        }
        seen[i] = true;
    }
    let corrupt_bound = n - honest.len();
    check_corrupt_bound(n, corrupt_bound)?;
    if output.len() != batch.dim() {
        return Err(AggregationError::DimensionMismatch {
            index: 0,
            got: output.len(),
            expected: batch.dim(),
        });
    }

    let honest_rows: Vec<Vec<f64>> = honest.iter().map(|&i| batch.rows()[i].clone()).collect();
    let honest_batch = UpdateBatch::new(honest_rows)?;
    let ones = vec![1.0; honest_batch.len()];
    let eig = weighted_cov_top_eigen(&honest_batch, &ones, EigenMode::Exact, 0)?;

    let lhs = linalg::dist_sq(output, &eig.mean);
    let k = kappa(n, corrupt_bound);
    let rhs = k * eig.lambda_max.max(0.0);
    let holds = lhs <= rhs * (1.0 + 1e-9) + 1e-12;
    Ok(RobustnessCertificate {
        lhs,
        rhs,
        kappa: k,
        holds,
    })
}

/// Aggregation rules selectable by the training loop and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Mean,
    Caf,
    CafPower,
    Cwtm,
    Cwmed,
    Gm,
    Multikrum,
    Meamed,
}

impl AggregatorKind {
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "mean" => Self::Mean,
            "caf" => Self::Caf,
            "caf_power" | "caf-power" => Self::CafPower,
            "cwtm" => Self::Cwtm,
            "cwmed" => Self::Cwmed,
            "gm" => Self::Gm,
            "multikrum" | "mk" => Self::Multikrum,
            "meamed" => Self::Meamed,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Caf => "caf",
            Self::CafPower => "caf_power",
            Self::Cwtm => "cwtm",
            Self::Cwmed => "cwmed",
            Self::Gm => "gm",
            Self::Multikrum => "multikrum",
            Self::Meamed => "meamed",
        }
    }

    /// Apply the rule; `seed` only matters for the power-iteration variant.
    pub fn apply(
        &self,
        batch: &UpdateBatch,
        corrupt_bound: usize,
        seed: u64,
    ) -> Result<Vec<f64>, AggregationError> {
        match self {
            Self::Mean => Ok(linalg::mean_rows(batch.rows())),
            Self::Caf => Ok(caf_full(batch, corrupt_bound, EigenMode::Exact, seed)?.mean),
            Self::CafPower => Ok(caf_full(batch, corrupt_bound, EigenMode::Power, seed)?.mean),
            Self::Cwtm => baseline(BaselineRule::Cwtm, batch, corrupt_bound),
            Self::Cwmed => baseline(BaselineRule::Cwmed, batch, corrupt_bound),
            Self::Gm => baseline(BaselineRule::Gm, batch, corrupt_bound),
            Self::Multikrum => baseline(BaselineRule::MultiKrum, batch, corrupt_bound),
            Self::Meamed => baseline(BaselineRule::Meamed, batch, corrupt_bound),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::KeyedStream;

    fn batch(rows: &[&[f64]]) -> UpdateBatch {
        UpdateBatch::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn weighted_mean_examples() {
        let b = batch(&[&[1.0, 0.0], &[3.0, 0.0]]);
        assert_eq!(weighted_mean(&b, &[1.0, 1.0]).unwrap(), vec![2.0, 0.0]);
        assert_eq!(weighted_mean(&b, &[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);

        let b = batch(&[&[0.0, 0.0], &[0.0, 0.0], &[100.0, 0.0]]);
        assert_eq!(
            weighted_mean(&b, &[1.0, 1.0, 0.0]).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn weighted_mean_rejects_zero_weights() {
        let b = batch(&[&[1.0], &[2.0]]);
        assert!(matches!(
            weighted_mean(&b, &[0.0, 0.0]),
            Err(AggregationError::DegenerateWeights(_))
        ));
    }

    #[test]
    fn batch_validation() {
        assert!(matches!(
            UpdateBatch::new(vec![]),
            Err(AggregationError::EmptyBatch)
        ));
        assert!(matches!(
            UpdateBatch::new(vec![vec![1.0], vec![1.0, 2.0]]),
            Err(AggregationError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            UpdateBatch::new(vec![vec![f64::NAN]]),
            Err(AggregationError::NonFinite(0))
        ));
    }

    #[test]
    fn caf_identical_inputs_returns_them() {
        let b = batch(&[&[2.0, -1.0], &[2.0, -1.0], &[2.0, -1.0]]);
        let out = caf(&b, 1).unwrap();
        assert_eq!(out, vec![2.0, -1.0]);
    }

    #[test]
    fn caf_hand_trace_single_outlier() {
        // Four inputs at the origin and one at (100, 0): the first pass
        // stores mean (20,0) with sigma 40 and zeroes the outlier; the
        // second pass sees zero covariance and stores the origin.
        let b = batch(&[
            &[0.0, 0.0],
            &[0.0, 0.0],
            &[0.0, 0.0],
            &[0.0, 0.0],
            &[100.0, 0.0],
        ]);
        let out = caf_full(&b, 1, EigenMode::Exact, 0).unwrap();
        assert_eq!(out.mean, vec![0.0, 0.0]);
        assert_eq!(out.state.iterations_used, 2);
        assert_eq!(out.state.best_sigma, 0.0);

        let first = &out.history[0];
        assert!((first.best_mean[0] - 20.0).abs() < 1e-9);
        assert!((first.best_sigma - 40.0).abs() < 1e-9);
        assert_eq!(first.weights[4], 0.0);
    }

    #[test]
    fn caf_zero_corrupt_bound_is_arithmetic_mean() {
        let mut stream = KeyedStream::new(&[100], 0);
        for _ in 0..20 {
            let n = 2 + stream.below(8);
            let d = 1 + stream.below(6);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| stream.standard_normal() * 3.0).collect())
                .collect();
            let mean = crate::linalg::mean_rows(&rows);
            let b = UpdateBatch::new(rows).unwrap();
            let out = caf_full(&b, 0, EigenMode::Exact, 0).unwrap();
            assert_eq!(out.state.iterations_used, 1);
            for (a, m) in out.mean.iter().zip(&mean) {
                assert!((a - m).abs() <= 1e-9, "caf(f=0) deviates from mean");
            }
        }
    }

    #[test]
    fn caf_rejects_bad_corrupt_bound() {
        let b = batch(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        assert!(matches!(
            caf(&b, 2),
            Err(AggregationError::InvalidCorruptBound { .. })
        ));
    }

    #[test]
    fn caf_weights_monotone_and_zeroed_each_pass() {
        let mut stream = KeyedStream::new(&[101], 0);
        for round in 0..30 {
            let n = 5 + stream.below(10);
            let f = stream.below(n / 2).min((n - 1) / 2);
            let d = 1 + stream.below(5);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let scale = if i < n - f { 1.0 } else { 50.0 };
                    (0..d).map(|_| stream.standard_normal() * scale).collect()
                })
                .collect();
            let b = UpdateBatch::new(rows).unwrap();
            let out = caf_full(&b, f, EigenMode::Exact, round).unwrap();
            assert!(out.state.iterations_used <= 2 * f + 1);

            let mut prev = vec![1.0; n];
            let mut zeros_prev = 0usize;
            for snap in &out.history {
                for (w, p) in snap.weights.iter().zip(&prev) {
                    assert!(*w <= *p + 1e-15, "weights must not increase");
                    assert!((0.0..=1.0).contains(w));
                }
                let zeros = snap.weights.iter().filter(|w| **w == 0.0).count();
                let last = snap.iterations_used == out.state.iterations_used
                    && out.state.best_sigma == 0.0;
                if !last {
                    assert!(zeros > zeros_prev, "each pass must zero a weight");
                }
                zeros_prev = zeros;
                prev = snap.weights.clone();
            }
        }
    }

    #[test]
    fn caf_permutation_equivariance() {
        let rows: Vec<Vec<f64>> = vec![
            vec![0.1, 2.0],
            vec![-1.0, 0.4],
            vec![0.3, -0.2],
            vec![9.0, -7.0],
            vec![0.0, 0.1],
        ];
        let b = UpdateBatch::new(rows.clone()).unwrap();
        let base = caf(&b, 1).unwrap();
        let perm = [4, 2, 0, 1, 3];
        let permuted =
            UpdateBatch::new(perm.iter().map(|&i| rows[i].clone()).collect()).unwrap();
        let out = caf(&permuted, 1).unwrap();
        for (a, c) in base.iter().zip(&out) {
            assert!((a - c).abs() <= 1e-12);
        }
    }

    #[test]
    fn caf_translation_equivariance() {
        let mut stream = KeyedStream::new(&[102], 0);
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..3).map(|_| stream.standard_normal()).collect())
            .collect();
        let shift = [5.0, -2.0, 11.0];
        let shifted: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().zip(&shift).map(|(x, s)| x + s).collect())
            .collect();
        let a = caf(&UpdateBatch::new(rows).unwrap(), 2).unwrap();
        let b = caf(&UpdateBatch::new(shifted).unwrap(), 2).unwrap();
        for k in 0..3 {
            assert!((a[k] + shift[k] - b[k]).abs() <= 1e-9);
        }
    }

    #[test]
    fn exact_and_power_filters_agree() {
        let mut stream = KeyedStream::new(&[104], 0);
        for round in 0..25 {
            let n = 5 + stream.below(12);
            let f = stream.below((n - 1) / 2 + 1);
            let d = 1 + stream.below(64);
            let scale = 10f64.powf(stream.uniform() * 2.0 - 1.0);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let magnitude = if i < n - f { scale } else { 30.0 * scale };
                    (0..d)
                        .map(|_| magnitude * stream.standard_normal())
                        .collect()
                })
                .collect();
            let b = UpdateBatch::new(rows).unwrap();
            let exact = caf_full(&b, f, EigenMode::Exact, round).unwrap();
            let power = caf_full(&b, f, EigenMode::Power, round).unwrap();
            let delta = crate::linalg::dist_sq(&exact.mean, &power.mean).sqrt();
            assert!(
                delta <= 1e-2 * scale * (d as f64).sqrt(),
                "round {round}: exact/power outputs diverge by {delta} at scale {scale}"
            );
        }
    }

    #[test]
    fn kappa_example() {
        let k = kappa(10, 2);
        assert!((k - 8.0 / 3.0).abs() < 1e-12);
        assert_eq!(kappa(10, 0), 0.0);
    }

    #[test]
    fn certify_identical_honest_inputs() {
        let b = batch(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], &[500.0, -3.0]]);
        let cert = certify(&b, &[0, 1, 2], &[1.0, 1.0]).unwrap();
        assert_eq!(cert.lhs, 0.0);
        assert_eq!(cert.rhs, 0.0);
        assert!(cert.holds);
    }

    #[test]
    fn certify_rejects_bad_sets() {
        let b = batch(&[&[1.0], &[2.0], &[3.0]]);
        assert!(certify(&b, &[0, 0], &[1.0]).is_err());
        assert!(certify(&b, &[0, 5], &[1.0]).is_err());
        // |S| = 1 implies f = 2 >= n/2.
        assert!(matches!(
            certify(&b, &[0], &[1.0]),
            Err(AggregationError::InvalidCorruptBound { .. })
        ));
    }

    #[test]
    fn certificate_holds_on_random_instances() {
        let mut stream = KeyedStream::new(&[103], 0);
        for round in 0..200 {
            let n = 3 + stream.below(10);
            let f = if n >= 3 { stream.below((n - 1) / 2 + 1) } else { 0 };
            let d = 1 + stream.below(4);
            let mut rows: Vec<Vec<f64>> = (0..n - f)
                .map(|_| (0..d).map(|_| stream.standard_normal()).collect())
                .collect();
            for _ in 0..f {
                rows.push((0..d).map(|_| stream.standard_normal() * 1e4).collect());
            }
            let honest: Vec<usize> = (0..n - f).collect();
            let b = UpdateBatch::new(rows).unwrap();
            let out = caf_full(&b, f, EigenMode::Exact, round).unwrap();
            let cert = certify(&b, &honest, &out.mean).unwrap();
            assert!(
                cert.holds,
                "round {round}: lhs={} rhs={} n={n} f={f}",
                cert.lhs, cert.rhs
            );
        }
    }

    #[test]
    fn aggregator_kind_round_trip() {
        for kind in [
            AggregatorKind::Mean,
            AggregatorKind::Caf,
            AggregatorKind::CafPower,
            AggregatorKind::Cwtm,
            AggregatorKind::Cwmed,
            AggregatorKind::Gm,
            AggregatorKind::Multikrum,
            AggregatorKind::Meamed,
        ] {
            assert_eq!(AggregatorKind::parse(kind.name()), Some(kind));
        }
        assert_eq!(AggregatorKind::parse("nope"), None);
    }
}
