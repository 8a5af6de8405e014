//! Robust and private distributed learning at desk scale.
//!
//! The library combines four pieces that are usually studied separately:
//!
//! - [`aggregation`]: robust aggregation of worker vectors with up to `f`
//!   corrupt entries, centered on a covariance-agnostic filter (CAF) that
//!   needs no bound on the honest covariance, plus standard baselines and a
//!   checkable robustness certificate.
//! - [`noise`]: pairwise-canceling correlated Gaussian noise driven by a
//!   simulated one-time seed agreement, with bit-exact antisymmetry.
//! - [`privacy`]: a Rényi accountant for secret-based local DP (SecLDP),
//!   covering per-step divergence, composition, DP conversion, feasibility
//!   checks, and noise calibration across collusion regimes.
//! - [`training`]: a deterministic server/worker simulator running the full
//!   protocol (clipping, noise injection, momentum, robust aggregation) on
//!   quadratic, logistic, and small MLP tasks, with [`attacks`] supplying
//!   the malicious messages.
//!
//! The [`harness`] module holds configuration parsing, IDX dataset
//! ingestion, and trace output used by the `cafcor` command-line tool.

pub mod aggregation;
pub mod attacks;
pub mod harness;
pub mod linalg;
pub mod noise;
pub mod privacy;
pub mod rng;
pub mod training;
