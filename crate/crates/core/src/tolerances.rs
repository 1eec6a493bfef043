//! Numeric tolerances used across the crate and its test suites.
//!
//! All values assume 32-bit float arithmetic unless stated otherwise.

/// Maximum relative error of `gamma + beta` against the full forward activation.
pub const COMPLETENESS_REL: f64 = 1e-4;

/// Maximum absolute error between a logit contribution and the matching
/// mean-ablation difference on affine (linear-mode) models.
pub const AFFINE_ORACLE_ABS: f64 = 1e-5;

/// Relative error allowed between backprop and central finite differences.
pub const GRAD_CHECK_REL: f64 = 1e-3;

/// Fraction of sampled coordinates that must pass the gradient check.
pub const GRAD_CHECK_PASS_FRACTION: f64 = 0.95;

/// Step used for central finite differences.
pub const GRAD_CHECK_STEP: f64 = 1e-3;

/// Denominator floor for relative gradient error; below it the error is absolute.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Tolerance for arithmetic scoring oracles.
pub const SCORE_ORACLE_ABS: f64 = 1e-6;

/// Tolerance for the circuit-only versus all-mean forward comparison.
pub const ABLATION_ORACLE_ABS: f64 = 1e-6;

/// Tolerance for brute-force mean comparisons.
pub const MEAN_ORACLE_ABS: f64 = 1e-6;

/// LayerNorm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;
