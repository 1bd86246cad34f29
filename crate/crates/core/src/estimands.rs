//! Point estimators of the mediation functional, the arm means, and the
//! derived natural direct/indirect and total effects.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::nuisance::LinearFit;

/// Point estimates with the exact decomposition identities
/// nie = alpha1 - theta, nde = theta - alpha0, ate = alpha1 - alpha0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointEstimates {
    pub theta: f64,
    pub alpha0: f64,
    pub alpha1: f64,
    pub nie: f64,
    pub nde: f64,
    pub ate: f64,
}

/// Interval the weight-normalization diagnostic should fall into; the
/// population value of mean(R delta) is 1.
pub const WEIGHT_NORMALIZATION_RANGE: (f64, f64) = (0.8, 1.2);

/// theta-hat = n^-1 sum_i R_i delta_i eta(X_i). The sum runs over all rows;
/// R zeroes the missing ones (no Hajek renormalization).
pub fn estimate_theta(data: &Dataset, rdelta: &[f64], eta: &LinearFit) -> Result<f64> {
    let eta_values = eta.evaluate_design(&eta.basis.design_matrix(&data.covariate_rows())?)?;
    let n = data.len() as f64;
    Ok(rdelta
        .iter()
        .zip(&eta_values)
        .map(|(&rd, &e)| rd * e)
        .sum::<f64>()
        / n)
}

/// alpha-hat(t) = n^-1 sum_i R_i delta_i mu(t, X_i).
pub fn estimate_alpha(data: &Dataset, rdelta: &[f64], mu: &LinearFit) -> Result<f64> {
    let mu_values = mu.evaluate_design(&mu.basis.design_matrix(&data.covariate_rows())?)?;
    let n = data.len() as f64;
    Ok(rdelta
        .iter()
        .zip(&mu_values)
        .map(|(&rd, &m)| rd * m)
        .sum::<f64>()
        / n)
}

/// Assemble the effect decomposition from the three point estimates. The
/// total effect is built as nie + nde so the decomposition identity is exact
/// in floating point; it agrees with alpha1 - alpha0 up to rounding.
pub fn mediation_effects(theta: f64, alpha0: f64, alpha1: f64) -> PointEstimates {
    let nie = alpha1 - theta;
    let nde = theta - alpha0;
    PointEstimates {
        theta,
        alpha0,
        alpha1,
        nie,
        nde,
        ate: nie + nde,
    }
}

/// Diagnostic n^-1 sum R_i delta_i; should be near 1.
pub fn weight_normalization(rdelta: &[f64]) -> f64 {
    rdelta.iter().sum::<f64>() / rdelta.len() as f64
}

pub fn weight_normalization_warning(value: f64) -> bool {
    value < WEIGHT_NORMALIZATION_RANGE.0 || value > WEIGHT_NORMALIZATION_RANGE.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn dgp1_closed_form_effects() {
        let est = mediation_effects(2.5, 1.5, 4.0);
        assert_relative_eq!(est.nie, 1.5);
        assert_relative_eq!(est.nde, 1.0);
        assert_relative_eq!(est.ate, 2.5);
    }

    #[test]
    fn equal_inputs_give_zero_effects() {
        let est = mediation_effects(0.7, 0.7, 0.7);
        assert_eq!(est.nie, 0.0);
        assert_eq!(est.nde, 0.0);
        assert_eq!(est.ate, 0.0);
    }

    proptest! {
        #[test]
        fn decomposition_identities_hold(theta in -50.0..50.0, a0 in -50.0..50.0, a1 in -50.0..50.0) {
            let est = mediation_effects(theta, a0, a1);
            prop_assert_eq!(est.nie + est.nde, est.ate);
            prop_assert_eq!(est.nie, est.alpha1 - est.theta);
            prop_assert_eq!(est.nde, est.theta - est.alpha0);
            // The alternative route agrees up to rounding.
            prop_assert!((est.ate - (a1 - a0)).abs() <= 1e-12 * (1.0 + a1.abs() + a0.abs()));
        }
    }

    #[test]
    fn normalization_warning_thresholds() {
        assert!(!weight_normalization_warning(1.0));
        assert!(!weight_normalization_warning(0.8));
        assert!(weight_normalization_warning(0.79));
        assert!(weight_normalization_warning(1.21));
    }
}
