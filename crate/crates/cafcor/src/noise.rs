//! Pairwise correlated and independent Gaussian noise.
//!
//! Workers agree once on a symmetric table of pair seeds (simulated here by
//! a trusted in-process registry; no actual key exchange). At iteration `t`
//! the pair `{i, j}` derives the same Gaussian vector from its shared seed;
//! the smaller index adds it, the larger subtracts it, so the two
//! contributions cancel bit for bit in any sum containing both. Each worker
//! additionally draws an independent Gaussian term from a stream keyed by
//! its own id.

use thiserror::Error;

use crate::rng::{domain, mix_labels, KeyedStream};

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("a registry needs at least 2 workers, got {0}")]
    TooFewWorkers(usize),
    #[error("worker index {0} out of range for n = {1}")]
    WorkerOutOfRange(usize, usize),
    #[error("pairwise noise requires two distinct workers, got i = j = {0}")]
    SelfPair(usize),
    #[error("variances must be finite and nonnegative")]
    InvalidVariance,
    #[error("vector has dimension {got}, plan expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
}

/// Noise magnitudes, in variance units, for a `d`-dimensional message.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisePlan {
    pub sigma_cor_sq: f64,
    pub sigma_ind_sq: f64,
    pub d: usize,
}

impl NoisePlan {
    pub fn new(sigma_cor_sq: f64, sigma_ind_sq: f64, d: usize) -> Result<Self, NoiseError> {
        if !(sigma_cor_sq.is_finite() && sigma_ind_sq.is_finite())
            || sigma_cor_sq < 0.0
            || sigma_ind_sq < 0.0
        {
            return Err(NoiseError::InvalidVariance);
        }
        Ok(Self {
            sigma_cor_sq,
            sigma_ind_sq,
            d,
        })
    }

    /// A plan that injects nothing (privacy disabled).
    pub fn disabled(d: usize) -> Self {
        Self {
            sigma_cor_sq: 0.0,
            sigma_ind_sq: 0.0,
            d,
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.sigma_cor_sq == 0.0 && self.sigma_ind_sq == 0.0
    }
}

/// Symmetric table of per-pair seeds, derived deterministically from one
/// master seed.
#[derive(Debug, Clone)]
pub struct SecretRegistry {
    n: usize,
    master_seed: u64,
    seed_table: Vec<u64>,
}

impl SecretRegistry {
    /// Simulated one-time pairwise agreement: same `(n, master_seed)` gives
    /// an identical table everywhere.
    pub fn establish(n: usize, master_seed: u64) -> Result<Self, NoiseError> {
        if n < 2 {
            return Err(NoiseError::TooFewWorkers(n));
        }
        let mut seed_table = vec![0u64; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let s = mix_labels(&[domain::PAIR_SEED, master_seed, i as u64, j as u64]);
                seed_table[i * n + j] = s;
                seed_table[j * n + i] = s;
            }
        }
        Ok(Self {
            n,
            master_seed,
            seed_table,
        })
    }

    pub fn worker_count(&self) -> usize {
        self.n
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn pair_seed(&self, i: usize, j: usize) -> Result<u64, NoiseError> {
        if i >= self.n {
            return Err(NoiseError::WorkerOutOfRange(i, self.n));
        }
        if j >= self.n {
            return Err(NoiseError::WorkerOutOfRange(j, self.n));
        }
        if i == j {
            return Err(NoiseError::SelfPair(i));
        }
        Ok(self.seed_table[i * self.n + j])
    }
}

/// Correlated noise term `v(i,j,t)`; satisfies `v(i,j,t) = -v(j,i,t)`
/// exactly, with the smaller index taking the positive sign.
pub fn pairwise_noise(
    registry: &SecretRegistry,
    i: usize,
    j: usize,
    t: u64,
    plan: &NoisePlan,
) -> Result<Vec<f64>, NoiseError> {
    let seed = registry.pair_seed(i, j)?;
    if plan.sigma_cor_sq == 0.0 {
        return Ok(vec![0.0; plan.d]);
    }
    let sigma = plan.sigma_cor_sq.sqrt();
    let mut stream = KeyedStream::new(&[domain::PAIR_NOISE, seed], t);
    let sign = if i < j { 1.0 } else { -1.0 };
    Ok((0..plan.d)
        .map(|_| sign * (sigma * stream.standard_normal()))
        .collect())
}

/// Independent noise term for worker `i` at iteration `t`.
pub fn independent_noise(
    registry: &SecretRegistry,
    i: usize,
    t: u64,
    plan: &NoisePlan,
) -> Result<Vec<f64>, NoiseError> {
    if i >= registry.n {
        return Err(NoiseError::WorkerOutOfRange(i, registry.n));
    }
    if plan.sigma_ind_sq == 0.0 {
        return Ok(vec![0.0; plan.d]);
    }
    let sigma = plan.sigma_ind_sq.sqrt();
    let mut stream = KeyedStream::new(&[domain::IND_NOISE, registry.master_seed, i as u64], t);
    Ok((0..plan.d).map(|_| sigma * stream.standard_normal()).collect())
}

/// Full perturbation of a clipped gradient:
/// `g + v_bar_i(t) + sum_{j != i} v(i,j,t)`.
pub fn perturb(
    gradient: &[f64],
    i: usize,
    t: u64,
    registry: &SecretRegistry,
    plan: &NoisePlan,
) -> Result<Vec<f64>, NoiseError> {
    if gradient.len() != plan.d {
        return Err(NoiseError::DimensionMismatch {
            got: gradient.len(),
            expected: plan.d,
        });
    }
    let mut out = gradient.to_vec();
    let ind = independent_noise(registry, i, t, plan)?;
    for (o, v) in out.iter_mut().zip(&ind) {
        *o += v;
    }
    for j in 0..registry.n {
        if j == i {
            continue;
        }
        let pair = pairwise_noise(registry, i, j, t, plan)?;
        for (o, v) in out.iter_mut().zip(&pair) {
            *o += v;
        }
    }
    Ok(out)
}
