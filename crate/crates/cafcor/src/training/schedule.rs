//! Learning-rate and momentum schedules.
//!
//! The decaying schedule for strongly convex losses and the constant rate
//! for nonconvex losses both tie the momentum coefficient to the learning
//! rate via `beta_t = 1 - 24 L gamma_t`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("strong convexity mu = {mu} must not exceed smoothness L = {l}")]
    MuExceedsL { mu: f64, l: f64 },
    #[error("schedule parameter out of range: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    /// `gamma_t = 10 / (mu (t + 240 L / mu))`, decaying.
    StronglyConvex { mu: f64, l: f64 },
    /// Constant `gamma = min(1/(24L), sqrt(3 loss_gap) / (16 sigma_bar sqrt(L T)))`.
    NonConvex { l: f64, gamma: f64 },
    /// User-fixed pair.
    Constant { gamma: f64, beta: f64 },
}

impl Schedule {
    pub fn strongly_convex(mu: f64, l: f64) -> Result<Self, ScheduleError> {
        if !(mu > 0.0 && l > 0.0 && mu.is_finite() && l.is_finite()) {
            return Err(ScheduleError::InvalidParameter(format!(
                "mu = {mu}, L = {l} must be positive and finite"
            )));
        }
        if mu > l {
            return Err(ScheduleError::MuExceedsL { mu, l });
        }
        Ok(Self::StronglyConvex { mu, l })
    }

    pub fn non_convex(
        l: f64,
        loss_gap: f64,
        sigma_bar: f64,
        total_steps: u64,
    ) -> Result<Self, ScheduleError> {
        if !(l > 0.0 && loss_gap > 0.0 && sigma_bar > 0.0) || total_steps == 0 {
            return Err(ScheduleError::InvalidParameter(format!(
                "L = {l}, loss_gap = {loss_gap}, sigma_bar = {sigma_bar}, T = {total_steps}"
            )));
        }
        let gamma = (1.0 / (24.0 * l)).min(
            (3.0 * loss_gap).sqrt() / (16.0 * sigma_bar * (l * total_steps as f64).sqrt()),
        );
        Ok(Self::NonConvex { l, gamma })
    }

    pub fn constant(gamma: f64, beta: f64) -> Result<Self, ScheduleError> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(ScheduleError::InvalidParameter(format!("gamma = {gamma}")));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(ScheduleError::InvalidParameter(format!(
                "beta = {beta} must lie in [0, 1]"
            )));
        }
        Ok(Self::Constant { gamma, beta })
    }

    /// `(gamma_t, beta_t)`; the momentum coefficient is clamped to `[0, 1]`.
    pub fn at(&self, t: u64) -> (f64, f64) {
        match *self {
            Self::StronglyConvex { mu, l } => {
                let gamma = 10.0 / (mu * (t as f64 + 240.0 * l / mu));
                (gamma, (1.0 - 24.0 * l * gamma).clamp(0.0, 1.0))
            }
            Self::NonConvex { l, gamma } => (gamma, (1.0 - 24.0 * l * gamma).clamp(0.0, 1.0)),
            Self::Constant { gamma, beta } => (gamma, beta),
        }
    }
}

/// Mini-batch gradient variance `2 (1 - b/m) sigma_sq / b`.
pub fn sigma_batch_sq(sigma_sq: f64, batch: usize, points: usize) -> f64 {
    2.0 * (1.0 - batch as f64 / points as f64) * sigma_sq / batch as f64
}

/// Default effective-noise estimate for the nonconvex rate:
/// `sqrt(sigma_b_sq + d (f sigma_cor_sq + sigma_ind_sq) / (n - f))`.
/// A simplification of the full constant, which also carries
/// filter-dependent terms.
pub fn default_sigma_bar(
    sigma_b_sq: f64,
    d: usize,
    corrupt: usize,
    n: usize,
    sigma_cor_sq: f64,
    sigma_ind_sq: f64,
) -> f64 {
    (sigma_b_sq
        + d as f64 * (corrupt as f64 * sigma_cor_sq + sigma_ind_sq) / (n - corrupt) as f64)
        .sqrt()
}
