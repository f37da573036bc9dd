//! Covariate-balancing propensity scores for causal inference with
//! categorical and continuous treatments.
//!
//! The estimand is the average potential outcome: `θ_k = E{Y*(k)}` for a
//! treatment with levels `k = 0..K`, or the dose-response curve
//! `θ(a) = E{Y*(a)}` for a continuous dose. Both are estimated by inverse
//! probability weighting, with the generalized propensity score fitted so
//! that weighted covariate moments *balance* rather than by maximizing a
//! likelihood:
//!
//! * categorical: `β̂` solves the stacked moment conditions
//!   `Σ_i {1(A_i=k)/π(k,X_i,β) − 1} B(k,X_i) = 0` for every level `k`
//!   (two-step GMM when the system is overidentified), then
//!   `θ̂_k = n⁻¹ Σ_i 1(A_i=k) Y_i / π(k,X_i,β̂)`;
//! * continuous: `β̂` minimizes a kernel-localized version of the same
//!   imbalance criterion and `θ̂(a)` is a kernel-weighted average of
//!   `Y_i / π(a or A_i, X_i, β̂)`.
//!
//! Large-sample sandwich variances, an efficiency-bound calculator, kernel
//! bandwidth selection (least-squares and one-sided cross-validation) and a
//! Monte Carlo harness for the bundled benchmark designs round out the
//! toolkit. The `parallel` feature (on by default) runs replicates, curve
//! grids and bandwidth searches on a rayon pool; outputs are byte-identical
//! for any worker count.

pub mod basis;
pub mod categorical;
pub mod continuous;
pub mod data;
pub mod error;
pub mod expr;
pub mod kernel;
pub mod optim;
pub mod par;
pub mod propensity;
pub mod report;
pub mod sim;

pub use data::{Dataset, TreatmentSpace};
pub use error::{Error, Result};

/// Two-sided 97.5% standard normal quantile used for all confidence bands.
pub const Z_975: f64 = 1.959_964;

/// Probability floor applied to every inverse-probability denominator.
///
/// Fitted propensities are clamped into `[DELTA, 1 − DELTA]` before any
/// division; each clamping event is counted and surfaced in fit diagnostics
/// so that silent weight truncation cannot go unnoticed.
pub const DELTA: f64 = 1e-3;
