//! Sequential Bayesian density estimation over finite sieve priors.
//!
//! Everything lives on a fixed grid of equal-width cells, so candidate
//! densities are piecewise constant and every divergence, prior mass, and
//! posterior weight is an exact finite sum rather than a quadrature
//! approximation. On top of that foundation the crate provides:
//!
//! - [`density`]: grid densities, sampling, mixtures, and the three
//!   divergences (Kullback-Leibler, its second moment, and half-squared
//!   Hellinger) computed exactly.
//! - [`prior`]: finite sieve priors over histogram candidates, exact
//!   neighborhood masses, and local support-condition checks against a
//!   rate sequence.
//! - [`engine`]: log-space sequential posterior and fractional-power
//!   pseudo-posterior updating, predictive densities, restricted
//!   posteriors over candidate subsets, and run traces.
//! - [`diagnostics`]: martingale-difference series built from run traces
//!   and the bound reports that render convergence-rate claims as
//!   checkable margins.
//! - [`harness`]: experiment configuration, deterministic replication
//!   fan-out, report aggregation, and file output.

pub mod density;
pub mod diagnostics;
pub mod engine;
pub mod harness;
pub mod prior;

pub use density::{cesaro_average, divergences, mixture, Divergences, Grid, GridDensity};
pub use engine::{PosteriorState, RunTrace, SubsetMask, Tracer};
pub use prior::{EpsilonSequence, FinitePrior, NeighborhoodVariant, SupportCheckResult};

/// Log-sum-exp with max subtraction; `-inf` inputs drop out and an
/// all-`-inf` (or empty) input yields `-inf` rather than NaN.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::log_sum_exp;

    #[test]
    fn log_sum_exp_matches_naive_in_safe_range() {
        let xs = [0.5, 2.0, -1.0];
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - naive).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_survives_large_magnitudes() {
        let xs = [-1200.0, -1202.0];
        let expected = -1200.0 + (1.0 + (-2.0f64).exp()).ln();
        assert!((log_sum_exp(&xs) - expected).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_of_all_neg_infinity_is_neg_infinity() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }
}
