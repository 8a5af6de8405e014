//! Top eigenpair of the weighted empirical covariance.
//!
//! Two routes: a cyclic Jacobi solve on the explicitly formed `d x d`
//! covariance (exact route, used while `d` stays small), and a matrix-free
//! power iteration working only with products `(x_i - mu) <x_i - mu, v>`
//! (fast route, also the exact route's fallback for large `d`).

use super::{check_weights, AggregationError, UpdateBatch};
use crate::linalg;
use crate::rng::{domain, KeyedStream};

/// Dimension above which the exact route stops forming the covariance.
const DENSE_LIMIT: usize = 128;
/// Relative tolerance of the exact power-iteration fallback.
const EXACT_TOL: f64 = 1e-10;
/// Relative tolerance of the fast route.
const POWER_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigenMode {
    /// Dense symmetric eigensolve (power iteration at tight tolerance when
    /// the dimension exceeds the dense limit).
    Exact,
    /// Matrix-free power iteration.
    Power,
}

/// Top eigenpair of the weighted covariance, plus the weighted mean it is
/// centered on.
#[derive(Debug, Clone)]
pub struct CovTopEigen {
    pub lambda_max: f64,
    /// Unit-norm eigenvector; arbitrary when the covariance is zero.
    pub eigenvector: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Compute the top eigenpair of
/// `Sigma_c = sum_i c_i (x_i - mu)(x_i - mu)^T / sum_i c_i`.
pub fn weighted_cov_top_eigen(
    batch: &UpdateBatch,
    weights: &[f64],
    mode: EigenMode,
    seed: u64,
) -> Result<CovTopEigen, AggregationError> {
    let total = check_weights(batch, weights)?;
    let d = batch.dim();
    let mean = super::weighted_mean(batch, weights)?;

    // Centered rows with positive weight; everything downstream works on
    // these.
    let centered: Vec<(f64, Vec<f64>)> = batch
        .rows()
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(x, w)| (*w, linalg::sub(x, &mean)))
        .collect();

    if centered.iter().all(|(_, y)| y.iter().all(|v| *v == 0.0)) {
        let mut e1 = vec![0.0; d];
        e1[0] = 1.0;
        return Ok(CovTopEigen {
            lambda_max: 0.0,
            eigenvector: e1,
            mean,
        });
    }

    let (lambda_max, eigenvector) = match mode {
        EigenMode::Exact if d <= DENSE_LIMIT => {
            let cov = form_covariance(&centered, total, d);
            jacobi_top_eigenpair(&cov, d)
        }
        EigenMode::Exact => power_top_eigenpair(&centered, total, d, EXACT_TOL, seed),
        EigenMode::Power => power_top_eigenpair(&centered, total, d, POWER_TOL, seed),
    };

    Ok(CovTopEigen {
        lambda_max,
        eigenvector,
        mean,
    })
}

fn form_covariance(centered: &[(f64, Vec<f64>)], total: f64, d: usize) -> Vec<f64> {
    let mut cov = vec![0.0; d * d];
    for (w, y) in centered {
        let s = w / total;
        for i in 0..d {
            let yi = s * y[i];
            if yi == 0.0 {
                continue;
            }
            for j in i..d {
                cov[i * d + j] += yi * y[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i * d + j] = cov[j * d + i];
        }
    }
    cov
}

/// Cyclic Jacobi eigensolve of a symmetric matrix; returns the largest
/// eigenvalue with an associated unit eigenvector.
fn jacobi_top_eigenpair(matrix: &[f64], d: usize) -> (f64, Vec<f64>) {
    if d == 1 {
        return (matrix[0], vec![1.0]);
    }
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }

    let scale = matrix
        .iter()
        .fold(0.0f64, |acc, x| acc.max(x.abs()))
        .max(f64::MIN_POSITIVE);

    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for p in 0..d {
            for q in (p + 1)..d {
                off = off.max(a[p * d + q].abs());
            }
        }
        if off <= 1e-14 * scale {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut best = 0usize;
    for i in 1..d {
        if a[i * d + i] > a[best * d + best] {
            best = i;
        }
    }
    let mut vec_out: Vec<f64> = (0..d).map(|k| v[k * d + best]).collect();
    linalg::normalize(&mut vec_out);
    (a[best * d + best], vec_out)
}

/// Matrix-free power iteration on the weighted covariance.
fn power_top_eigenpair(
    centered: &[(f64, Vec<f64>)],
    total: f64,
    d: usize,
    tol: f64,
    seed: u64,
) -> (f64, Vec<f64>) {
    let max_iters = (10.0 * (d.max(2) as f64).ln() + 200.0).ceil() as usize;
    let mut stream = KeyedStream::new(&[domain::POWER_START, seed], 0);

    for _restart in 0..4 {
        let mut v: Vec<f64> = (0..d).map(|_| stream.standard_normal()).collect();
        if !linalg::normalize(&mut v) {
            continue;
        }
        let mut rayleigh_prev = f64::NAN;
        let mut converged = false;
        let mut rayleigh = 0.0;
        for _ in 0..max_iters {
            let mut z = vec![0.0; d];
            rayleigh = 0.0;
            for (w, y) in centered {
                let proj = linalg::dot(y, &v);
                let coeff = w / total * proj;
                rayleigh += coeff * proj;
                linalg::axpy(&mut z, coeff, y);
            }
            if !linalg::normalize(&mut z) {
                // v landed exactly orthogonal to every centered row.
                break;
            }
            v = z;
            if rayleigh_prev.is_finite()
                && (rayleigh - rayleigh_prev).abs() <= tol * rayleigh.max(f64::MIN_POSITIVE)
            {
                converged = true;
                break;
            }
            rayleigh_prev = rayleigh;
        }
        if converged || rayleigh > 0.0 {
            return (rayleigh.max(0.0), v);
        }
    }

    // Every start collapsed: deviations are nonzero but the stream kept
    // hitting their orthogonal complement. Fall back to the largest row.
    let mut best = centered[0].1.clone();
    let mut best_sq = linalg::norm_sq(&best);
    for (_, y) in centered {
        let nsq = linalg::norm_sq(y);
        if nsq > best_sq {
            best_sq = nsq;
            best = y.clone();
        }
    }
    linalg::normalize(&mut best);
    let mut rayleigh = 0.0;
    for (w, y) in centered {
        let proj = linalg::dot(y, &best);
        rayleigh += w / total * proj * proj;
    }
    (rayleigh, best)
}
