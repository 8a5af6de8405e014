//! Rényi accountant for secret-based local differential privacy.
//!
//! The threat model is an honest-but-curious server that sees every worker
//! message and additionally receives the pair secrets of `q <= f` colluding
//! malicious workers. One protocol step, where each worker releases its
//! clipped gradient masked by pairwise-canceling noise of variance
//! `sigma_cor_sq` plus independent noise of variance `sigma_ind_sq`,
//! satisfies `(alpha, alpha * eps_step)`-Rényi DP with
//!
//! ```text
//! eps_step = 2 C^2 / ((n-q) sigma_cor_sq + sigma_ind_sq)
//!          * [1 + sigma_cor_sq / ((f-q) sigma_cor_sq + sigma_ind_sq)]
//! ```
//!
//! Steps compose linearly in the Rényi order, and conversion to `(eps,
//! delta)` adds `log(1/delta)/(alpha - 1)`; the optimal order has a closed
//! form. The accountant works in variance units throughout.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("noise is infeasible: {0}")]
    InfeasibleNoise(String),
    #[error("regime is infeasible: {0}")]
    InfeasibleRegime(String),
}

/// Threat-model and budget tuple for the accountant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrivacyParams {
    /// Target budget; must lie in `(0, log(1/delta))`.
    pub epsilon: f64,
    pub delta: f64,
    /// Number of composed protocol steps.
    pub steps: u64,
    /// Sensitivity scale: the clipping threshold (or the per-example share
    /// of it under example-level accounting).
    pub clip: f64,
    pub n: usize,
    /// Bound on malicious workers.
    pub corrupt: usize,
    /// Colluding workers revealing their secrets, `q <= f`.
    pub colluding: usize,
}

impl PrivacyParams {
    /// Validate everything except the budget (for operations that do not
    /// consume a target epsilon).
    fn check_structure(&self) -> Result<(), PrivacyError> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(PrivacyError::InvalidParams(format!(
                "delta must lie in (0,1), got {}",
                self.delta
            )));
        }
        if self.steps == 0 {
            return Err(PrivacyError::InvalidParams("steps must be >= 1".into()));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(PrivacyError::InvalidParams(format!(
                "clip threshold must be positive, got {}",
                self.clip
            )));
        }
        if self.colluding > self.corrupt {
            return Err(PrivacyError::InvalidParams(format!(
                "colluding count {} exceeds corrupt bound {}",
                self.colluding, self.corrupt
            )));
        }
        if 2 * self.corrupt >= self.n {
            return Err(PrivacyError::InvalidParams(format!(
                "corrupt bound {} must satisfy 2f < n = {}",
                self.corrupt, self.n
            )));
        }
        Ok(())
    }

    /// Validate including the budget interval required by the feasibility
    /// condition; the accountant refuses to extrapolate beyond it.
    fn check_budget(&self) -> Result<(), PrivacyError> {
        self.check_structure()?;
        let limit = (1.0 / self.delta).ln();
        if !(self.epsilon > 0.0 && self.epsilon < limit) {
            return Err(PrivacyError::InvalidParams(format!(
                "epsilon must lie in (0, log(1/delta)) = (0, {limit:.6}), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Collusion regimes the calibration supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseRegime {
    /// Equal correlated and independent variances; guards against all
    /// malicious workers colluding (`q` treated as `f`).
    Equal,
    /// Local-DP fallback: no shared randomness, correlated variance zero.
    Ldp,
    /// Correlated noise only; needs at least one non-colluding malicious
    /// worker (`q < f`).
    NoIndependent,
}

impl NoiseRegime {
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "equal" => Self::Equal,
            "ldp" => Self::Ldp,
            "no_independent" | "no-independent" => Self::NoIndependent,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Equal => "equal",
            Self::Ldp => "ldp",
            Self::NoIndependent => "no_independent",
        }
    }
}

/// Calibrated noise magnitudes, in variance units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseAssignment {
    pub sigma_cor_sq: f64,
    pub sigma_ind_sq: f64,
    pub regime: NoiseRegime,
}

fn effective_variances(
    p: &PrivacyParams,
    a: &NoiseAssignment,
) -> Result<(f64, f64), PrivacyError> {
    let visible = (p.n - p.colluding) as f64 * a.sigma_cor_sq + a.sigma_ind_sq;
    let hidden = (p.corrupt - p.colluding) as f64 * a.sigma_cor_sq + a.sigma_ind_sq;
    if hidden <= 0.0 || visible <= 0.0 {
        return Err(PrivacyError::InfeasibleNoise(format!(
            "degenerate covariance: (f-q) sigma_cor_sq + sigma_ind_sq = {hidden}"
        )));
    }
    Ok((visible, hidden))
}

fn eps_step(p: &PrivacyParams, a: &NoiseAssignment) -> Result<f64, PrivacyError> {
    let (visible, hidden) = effective_variances(p, a)?;
    Ok(2.0 * p.clip * p.clip / visible * (1.0 + a.sigma_cor_sq / hidden))
}

/// Rényi divergence bound of one protocol step at order `alpha`.
pub fn per_step_rdp(
    alpha: f64,
    p: &PrivacyParams,
    a: &NoiseAssignment,
) -> Result<f64, PrivacyError> {
    if alpha.is_nan() || alpha <= 1.0 {
        return Err(PrivacyError::InvalidParams(format!(
            "Rényi order must exceed 1, got {alpha}"
        )));
    }
    p.check_structure()?;
    Ok(alpha * eps_step(p, a)?)
}

/// Composed budget after `steps` iterations, evaluated at the closed-form
/// optimal Rényi order. Returns `(eps_star, alpha_star)`.
pub fn secldp_epsilon(
    p: &PrivacyParams,
    a: &NoiseAssignment,
) -> Result<(f64, f64), PrivacyError> {
    p.check_structure()?;
    let (visible, hidden) = effective_variances(p, a)?;
    let log_inv_delta = (1.0 / p.delta).ln();
    let amplification = 1.0 + a.sigma_cor_sq / hidden;
    let t = p.steps as f64;
    let alpha_star =
        1.0 + (log_inv_delta * visible).sqrt() / (p.clip * (2.0 * t * amplification).sqrt());
    let step = eps_step(p, a)?;
    let eps_star = t * alpha_star * step + log_inv_delta / (alpha_star - 1.0);
    Ok((eps_star, alpha_star))
}

/// Feasibility condition tying the noise to the `(epsilon, delta)` target:
///
/// ```text
/// ((n-q) sigma_cor_sq + sigma_ind_sq) / (1 + sigma_cor_sq / ((f-q) sigma_cor_sq + sigma_ind_sq))
///     >= 16 C^2 T log(1/delta) / epsilon^2
/// ```
pub fn check_theorem_condition(
    p: &PrivacyParams,
    a: &NoiseAssignment,
) -> Result<bool, PrivacyError> {
    p.check_budget()?;
    if a.sigma_cor_sq == 0.0 && a.sigma_ind_sq == 0.0 {
        return Ok(false);
    }
    let visible = (p.n - p.colluding) as f64 * a.sigma_cor_sq + a.sigma_ind_sq;
    let hidden = (p.corrupt - p.colluding) as f64 * a.sigma_cor_sq + a.sigma_ind_sq;
    // hidden == 0 with positive correlated noise: the server can cancel
    // everything it sees; the left side degenerates to zero.
    let lhs = if hidden == 0.0 {
        0.0
    } else {
        visible / (1.0 + a.sigma_cor_sq / hidden)
    };
    let rhs = required_noise_scale(p);
    Ok(lhs >= rhs)
}

/// Right-hand side of the feasibility condition, `16 C^2 T log(1/delta) / eps^2`.
fn required_noise_scale(p: &PrivacyParams) -> f64 {
    16.0 * p.clip * p.clip * p.steps as f64 * (1.0 / p.delta).ln() / (p.epsilon * p.epsilon)
}

/// Smallest variance scale making `check` true, by bisection to relative
/// 1e-6 over the bracket `[1e-12, 1e12] * C^2 T`.
fn smallest_feasible(
    p: &PrivacyParams,
    assignment_of: impl Fn(f64) -> NoiseAssignment,
) -> Result<f64, PrivacyError> {
    let unit = p.clip * p.clip * p.steps as f64;
    let mut lo = 1e-12 * unit;
    let mut hi = 1e12 * unit;
    if check_theorem_condition(p, &assignment_of(lo))? {
        return Ok(lo);
    }
    if !check_theorem_condition(p, &assignment_of(hi))? {
        return Err(PrivacyError::InfeasibleNoise(
            "no feasible variance within the search bracket".into(),
        ));
    }
    while hi - lo > 1e-6 * hi {
        let mid = 0.5 * (lo + hi);
        if check_theorem_condition(p, &assignment_of(mid))? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Pick noise variances meeting the `(epsilon, delta)` target in the given
/// regime. Every returned assignment satisfies [`check_theorem_condition`].
pub fn calibrate(p: &PrivacyParams, regime: NoiseRegime) -> Result<NoiseAssignment, PrivacyError> {
    p.check_budget()?;
    let assignment = match regime {
        NoiseRegime::Equal => {
            // Closed form, guarding against full collusion (q = f).
            let s = 32.0 * p.clip * p.clip * p.steps as f64 * (1.0 / p.delta).ln()
                / (p.epsilon * p.epsilon * (p.n - p.corrupt) as f64);
            NoiseAssignment {
                sigma_cor_sq: s,
                sigma_ind_sq: s,
                regime,
            }
        }
        NoiseRegime::Ldp => {
            let worst = PrivacyParams {
                colluding: p.corrupt,
                ..*p
            };
            let s = smallest_feasible(&worst, |v| NoiseAssignment {
                sigma_cor_sq: 0.0,
                sigma_ind_sq: v,
                regime,
            })?;
            NoiseAssignment {
                sigma_cor_sq: 0.0,
                sigma_ind_sq: s,
                regime,
            }
        }
        NoiseRegime::NoIndependent => {
            if p.colluding >= p.corrupt {
                return Err(PrivacyError::InfeasibleRegime(format!(
                    "dropping independent noise needs a non-colluding malicious worker (q = {} >= f = {})",
                    p.colluding, p.corrupt
                )));
            }
            let s = smallest_feasible(p, |v| NoiseAssignment {
                sigma_cor_sq: v,
                sigma_ind_sq: 0.0,
                regime,
            })?;
            NoiseAssignment {
                sigma_cor_sq: s,
                sigma_ind_sq: 0.0,
                regime,
            }
        }
    };
    let check_at = match regime {
        NoiseRegime::Equal | NoiseRegime::Ldp => PrivacyParams {
            colluding: p.corrupt,
            ..*p
        },
        NoiseRegime::NoIndependent => *p,
    };
    debug_assert!(check_theorem_condition(&check_at, &assignment)?);
    Ok(assignment)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> PrivacyParams {
        PrivacyParams {
            epsilon: 1.0,
            delta: 1e-4,
            steps: 100,
            clip: 1.0,
            n: 10,
            corrupt: 2,
            colluding: 2,
        }
    }

    fn assignment(cor: f64, ind: f64) -> NoiseAssignment {
        NoiseAssignment {
            sigma_cor_sq: cor,
            sigma_ind_sq: ind,
            regime: NoiseRegime::Equal,
        }
    }

    #[test]
    fn per_step_reduces_to_gaussian_mechanism() {
        // sigma_cor = 0, sigma_ind_sq = 2, C = 1, alpha = 3: the step bound
        // equals the plain Gaussian-mechanism value with sensitivity 2C.
        let p = params();
        let a = assignment(0.0, 2.0);
        let got = per_step_rdp(3.0, &p, &a).unwrap();
        assert!((got - 3.0).abs() < 1e-15);

        for alpha in [1.5, 2.0, 8.0, 64.0] {
            for sig in [0.5, 2.0, 37.0] {
                let a = assignment(0.0, sig);
                let got = per_step_rdp(alpha, &p, &a).unwrap();
                let textbook = alpha * (2.0 * p.clip) * (2.0 * p.clip) / (2.0 * sig);
                assert!((got - textbook).abs() <= 1e-12 * textbook);
            }
        }
    }

    #[test]
    fn per_step_large_correlated_limit() {
        // With q = f and huge correlated noise the bound approaches
        // 2 C^2 / ((n-f) sigma_ind_sq) scaled by alpha; decreasing in n.
        let mut prev = f64::INFINITY;
        for n in [6usize, 10, 20, 50] {
            let p = PrivacyParams {
                n,
                ..params()
            };
            let a = assignment(1e12, 3.0);
            let got = per_step_rdp(2.0, &p, &a).unwrap();
            let limit = 2.0 * 2.0 / ((n - 2) as f64 * 1e12) * (1.0 + 1e12 / 3.0);
            assert!((got - limit).abs() <= 1e-6 * limit, "n={n}");
            assert!(got < prev, "must decrease in n");
            prev = got;
        }
    }

    #[test]
    fn per_step_quadratic_in_clip() {
        let p = params();
        let doubled = PrivacyParams { clip: 2.0, ..p };
        let a = assignment(1.5, 2.5);
        let base = per_step_rdp(4.0, &p, &a).unwrap();
        let big = per_step_rdp(4.0, &doubled, &a).unwrap();
        assert!((big - 4.0 * base).abs() < 1e-12 * big);
    }

    #[test]
    fn per_step_monotone_in_collusion() {
        let a = assignment(2.0, 0.5);
        let mut prev = 0.0;
        for q in 0..=2 {
            let p = PrivacyParams {
                colluding: q,
                ..params()
            };
            let got = per_step_rdp(2.0, &p, &a).unwrap();
            assert!(got >= prev, "q={q}");
            prev = got;
        }
    }

    #[test]
    fn per_step_rejects_degenerate_covariance() {
        let p = params(); // q = f = 2
        assert!(matches!(
            per_step_rdp(2.0, &p, &assignment(1.0, 0.0)),
            Err(PrivacyError::InfeasibleNoise(_))
        ));
        assert!(matches!(
            per_step_rdp(0.5, &p, &assignment(1.0, 1.0)),
            Err(PrivacyError::InvalidParams(_))
        ));
    }

    #[test]
    fn composition_is_linear_in_steps() {
        let a = assignment(1.0, 1.0);
        let p1 = PrivacyParams { steps: 1, ..params() };
        let (e1, alpha1) = secldp_epsilon(&p1, &a).unwrap();
        // Recompute at T steps with the T=1 optimal order frozen: the RDP
        // part must be exactly T times the single-step value.
        let step = per_step_rdp(alpha1, &p1, &a).unwrap();
        let log_inv_delta = (1.0 / p1.delta).ln();
        assert!((e1 - (step + log_inv_delta / (alpha1 - 1.0))).abs() < 1e-12);
        for t in [7u64, 100] {
            let pt = PrivacyParams { steps: t, ..params() };
            let (et, alpha_t) = secldp_epsilon(&pt, &a).unwrap();
            let expected = t as f64 * per_step_rdp(alpha_t, &pt, &a).unwrap()
                + log_inv_delta / (alpha_t - 1.0);
            assert!((et - expected).abs() < 1e-12 * expected);
        }
    }

    #[test]
    fn secldp_vanishes_with_huge_noise() {
        let p = PrivacyParams { steps: 1, ..params() };
        let mut prev = f64::INFINITY;
        for k in [1.0, 1e3, 1e6, 1e9] {
            let a = assignment(0.0, 2.0 * k);
            let (eps, _) = secldp_epsilon(&p, &a).unwrap();
            assert!(eps < prev);
            prev = eps;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn secldp_monotone_in_independent_noise() {
        let p = params();
        let mut prev = f64::INFINITY;
        for ind in [0.5, 1.0, 4.0, 32.0, 1000.0] {
            let (eps, _) = secldp_epsilon(&p, &assignment(1.0, ind)).unwrap();
            assert!(eps <= prev, "ind={ind}");
            prev = eps;
        }
    }

    #[test]
    fn theorem_condition_worked_example() {
        // Corollary-style choice: sigma^2 = 32 C^2 T log(1/delta) / (eps^2 (n-f)).
        let p = params();
        let s = 32.0 * 100.0 * (1e4f64).ln() / 8.0;
        assert!((s - 3684.1361487904736).abs() < 1e-9);
        let a = assignment(s, s);
        assert!(check_theorem_condition(&p, &a).unwrap());

        // LHS = 4.5 sigma^2 ~ 16578, RHS ~ 14737.
        let lhs = 4.5 * s;
        let rhs = 16.0 * 100.0 * (1e4f64).ln();
        assert!((lhs - 16578.61266955713).abs() < 1e-6);
        assert!((rhs - 14736.54459516189).abs() < 1e-6);
    }

    #[test]
    fn theorem_condition_zero_noise_is_false() {
        let p = params();
        assert!(!check_theorem_condition(&p, &assignment(0.0, 0.0)).unwrap());
        assert!(!check_theorem_condition(&p, &assignment(1e-12, 1e-12)).unwrap());
    }

    #[test]
    fn theorem_condition_scaling_preserves_feasibility() {
        let p = params();
        let s = 3684.14;
        for scale in [1.0, 10.0, 100.0] {
            assert!(check_theorem_condition(&p, &assignment(s * scale, s * scale)).unwrap());
        }
    }

    #[test]
    fn theorem_condition_rejects_bad_budget() {
        let p = PrivacyParams {
            epsilon: 20.0, // >= log(1/delta) = 9.21
            ..params()
        };
        assert!(matches!(
            check_theorem_condition(&p, &assignment(1.0, 1.0)),
            Err(PrivacyError::InvalidParams(_))
        ));
    }

    #[test]
    fn calibrate_equal_matches_closed_form() {
        let p = params();
        let a = calibrate(&p, NoiseRegime::Equal).unwrap();
        assert!((a.sigma_cor_sq - 3684.1361487904736).abs() < 1e-9);
        assert_eq!(a.sigma_cor_sq, a.sigma_ind_sq);
        assert!(check_theorem_condition(&p, &a).unwrap());
        let (eps, _) = secldp_epsilon(&p, &a).unwrap();
        assert!(eps <= p.epsilon, "eps_star={eps}");
    }

    #[test]
    fn calibrate_ldp_plateaus_in_n() {
        let mut prev: Option<f64> = None;
        for n in [10usize, 100, 1000, 10_000] {
            let p = PrivacyParams { n, ..params() };
            let a = calibrate(&p, NoiseRegime::Ldp).unwrap();
            assert_eq!(a.sigma_cor_sq, 0.0);
            // Smallest feasible value is 16 C^2 T log(1/delta) / eps^2,
            // independent of n.
            let closed = 16.0 * 100.0 * (1e4f64).ln();
            assert!(
                (a.sigma_ind_sq - closed).abs() <= 2e-6 * closed,
                "n={n}: {}",
                a.sigma_ind_sq
            );
            if let Some(p) = prev {
                assert!((a.sigma_ind_sq - p).abs() <= 2e-6 * p);
            }
            prev = Some(a.sigma_ind_sq);
        }
    }

    #[test]
    fn calibrate_no_independent_requires_hidden_secret() {
        let p = params(); // q = f
        assert!(matches!(
            calibrate(&p, NoiseRegime::NoIndependent),
            Err(PrivacyError::InfeasibleRegime(_))
        ));
        let p = PrivacyParams {
            colluding: 0,
            ..params()
        };
        let a = calibrate(&p, NoiseRegime::NoIndependent).unwrap();
        assert_eq!(a.sigma_ind_sq, 0.0);
        assert!(a.sigma_cor_sq > 0.0);
        assert!(check_theorem_condition(&p, &a).unwrap());
    }

    #[test]
    fn equal_calibration_scales_inversely_with_workers() {
        let p1 = PrivacyParams { n: 100, ..params() };
        let p2 = PrivacyParams { n: 200, ..params() };
        let a1 = calibrate(&p1, NoiseRegime::Equal).unwrap();
        let a2 = calibrate(&p2, NoiseRegime::Equal).unwrap();
        let ratio = a2.sigma_cor_sq / a1.sigma_cor_sq;
        let expected = (100.0 - 2.0) / (200.0 - 2.0);
        assert!((ratio - expected).abs() < 1e-12);
    }
}
