//! Weighted one-step estimators of the nuisance functions: the outcome
//! regression gamma, its iterated projection eta, the arm means mu(t, .), the
//! inverse-propensity coefficients b1/e_t, and the density-ratio coefficient
//! b2. All weights are I(arm) * R * delta-hat.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, LinkSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seriesreg::{Arm, SpdSolver};
use crate::smd::{solve_smd, AffineResidual, OptimOptions, OptimizerDiagnostics, SmdProblem};

/// Domain of a fitted sieve function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitDomain {
    MediatorCovariates,
    Covariates,
    FullObservation,
}

/// A fitted sieve coefficient vector, possibly composed with a link. The
/// outcome-side fits use the identity link; the inverse-propensity fits use a
/// range-(1, inf) link.
#[derive(Clone, Debug)]
pub struct LinearFit {
    pub basis: BasisSpec,
    pub coefficients: DVector<f64>,
    pub link: LinkSpec,
    pub domain: FitDomain,
    pub weight_source: String,
    pub diagnostics: Option<OptimizerDiagnostics>,
}

impl LinearFit {
    pub fn evaluate(&self, point: &[f64]) -> Result<f64> {
        let terms = self.basis.evaluate(point)?;
        let v: f64 = terms
            .iter()
            .zip(self.coefficients.iter())
            .map(|(t, c)| t * c)
            .sum();
        Ok(self.link.apply(v))
    }

    /// Evaluate over a prebuilt design matrix for this fit's basis.
    pub fn evaluate_design(&self, design: &DMatrix<f64>) -> Result<Vec<f64>> {
        if design.ncols() != self.coefficients.len() {
            return Err(Error::DimensionMismatch {
                what: "fit design columns",
                expected: self.coefficients.len(),
                got: design.ncols(),
            });
        }
        let mut v = vec![0.0; design.nrows()];
        for j in 0..design.ncols() {
            let c = self.coefficients[j];
            if c != 0.0 {
                let col = design.column(j);
                for (i, vi) in v.iter_mut().enumerate() {
                    *vi += col[i] * c;
                }
            }
        }
        Ok(v.into_iter().map(|vi| self.link.apply(vi)).collect())
    }
}

/// Weighted least squares of `responses` on the basis columns: the closed
/// form (sum w u u')^-1 sum w y u with the shared ridge policy.
pub fn weighted_series_fit(
    responses: &[f64],
    weights: &[f64],
    points: &[Vec<f64>],
    basis: &BasisSpec,
    domain: FitDomain,
    weight_source: &str,
) -> Result<LinearFit> {
    let n = responses.len();
    if weights.len() != n || points.len() != n {
        return Err(Error::DimensionMismatch {
            what: "weighted fit rows",
            expected: n,
            got: weights.len().min(points.len()),
        });
    }
    let k = basis.total_terms();
    let active = weights.iter().filter(|&&w| w > 0.0).count();
    if active < k {
        return Err(Error::InsufficientData {
            what: weight_source.to_string(),
            needed: k,
            got: active,
        });
    }
    let design = basis.design_matrix(points)?;
    let mut gram = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    for a in 0..k {
        let col_a = design.column(a);
        for b in a..k {
            let col_b = design.column(b);
            let mut acc = 0.0;
            for i in 0..n {
                if weights[i] != 0.0 {
                    acc += weights[i] * col_a[i] * col_b[i];
                }
            }
            gram[(a, b)] = acc;
            gram[(b, a)] = acc;
        }
        let mut acc = 0.0;
        for i in 0..n {
            if weights[i] != 0.0 {
                acc += weights[i] * col_a[i] * responses[i];
            }
        }
        rhs[a] = acc;
    }
    let solver = SpdSolver::new(gram, weight_source)?;
    let coefficients = solver.solve(&rhs);
    if coefficients.iter().any(|c| !c.is_finite()) {
        return Err(Error::NumericalFailure(weight_source.to_string()));
    }
    Ok(LinearFit {
        basis: basis.clone(),
        coefficients,
        link: LinkSpec::identity(),
        domain,
        weight_source: weight_source.to_string(),
        diagnostics: None,
    })
}

/// Outcome regression gamma(m, x) ~ E(Y | T=1, M=m, X*=x): weighted series
/// fit of Y on u(M, X) with weights T R delta.
pub fn fit_gamma(data: &Dataset, rdelta: &[f64], basis_u: &BasisSpec) -> Result<LinearFit> {
    let weights: Vec<f64> = data
        .t
        .iter()
        .zip(rdelta)
        .map(|(&t, &rd)| t as f64 * rd)
        .collect();
    weighted_series_fit(
        &data.y,
        &weights,
        &data.mediator_covariate_rows(),
        basis_u,
        FitDomain::MediatorCovariates,
        "gamma fit (weights T R delta)",
    )
}

/// Iterated projection eta(x) ~ E(gamma(M, X) | T=0, X*=x): weighted series
/// fit of the gamma pseudo-outcome on v(X) with weights (1-T) R delta.
pub fn fit_eta(
    data: &Dataset,
    rdelta: &[f64],
    gamma: &LinearFit,
    basis_v: &BasisSpec,
) -> Result<LinearFit> {
    let pseudo = gamma.evaluate_design(&gamma.basis.design_matrix(&data.mediator_covariate_rows())?)?;
    let weights: Vec<f64> = data
        .t
        .iter()
        .zip(rdelta)
        .map(|(&t, &rd)| (1 - t) as f64 * rd)
        .collect();
    weighted_series_fit(
        &pseudo,
        &weights,
        &data.covariate_rows(),
        basis_v,
        FitDomain::Covariates,
        "eta fit (weights (1-T) R delta)",
    )
}

/// Arm-mean regression mu(t, x) ~ E(Y | T=t, X*=x).
pub fn fit_mu(data: &Dataset, rdelta: &[f64], basis_v: &BasisSpec, t: u8) -> Result<LinearFit> {
    let weights: Vec<f64> = data
        .t
        .iter()
        .zip(rdelta)
        .map(|(&ti, &rd)| if ti == t { rd } else { 0.0 })
        .collect();
    weighted_series_fit(
        &data.y,
        &weights,
        &data.covariate_rows(),
        basis_v,
        FitDomain::Covariates,
        &format!("mu({t}, .) fit (weights I(T={t}) R delta)"),
    )
}

/// Inverse propensity e_t(x) = 1 / f(T=t | X*=x), fitted on a generalized
/// linear sieve by minimum distance over the R = 1 subgroup:
/// minimize n^-1 sum_i R_i Ehat[ delta {1 - I(T=t) e(X)} | R=1, X_i ]^2.
pub fn fit_inverse_propensity(
    data: &Dataset,
    rdelta: &[f64],
    basis_v: &BasisSpec,
    link: LinkSpec,
    options: &OptimOptions,
    t: u8,
) -> Result<LinearFit> {
    if data.observed_arm_count(t) == 0 {
        return Err(Error::InsufficientData {
            what: format!("inverse propensity for arm {t} (arm empty in R=1 subgroup)"),
            needed: 1,
            got: 0,
        });
    }
    let n = data.len();
    let mut offset = vec![0.0; n];
    let mut slope = vec![0.0; n];
    for i in 0..n {
        if data.r[i] == 1 {
            offset[i] = rdelta[i];
            if data.t[i] == t {
                slope[i] = -rdelta[i];
            }
        }
    }
    let points = data.covariate_rows();
    let problem = SmdProblem::new(
        AffineResidual { offset, slope },
        &points,
        basis_v,
        &points,
        basis_v,
        link,
        None,
        None,
        Some(&data.r),
        &format!("inverse propensity (t={t})"),
    )?;
    let fit = solve_smd(&problem, None, options)?;
    Ok(LinearFit {
        basis: basis_v.clone(),
        coefficients: fit
            .coefficient(Arm::Pooled)
            .expect("pooled solve")
            .clone(),
        link,
        domain: FitDomain::Covariates,
        weight_source: format!("smd inverse propensity (t={t})"),
        diagnostics: Some(fit.diagnostics),
    })
}

/// b1(x) = 1 / f(T=0 | X*=x); the t = 0 inverse propensity.
pub fn fit_b1(
    data: &Dataset,
    rdelta: &[f64],
    basis_v: &BasisSpec,
    link: LinkSpec,
    options: &OptimOptions,
) -> Result<LinearFit> {
    fit_inverse_propensity(data, rdelta, basis_v, link, options, 0)
}

/// b2(m, x) = f(m | T=0, x) / { f(T=1 | x) f(m | T=1, x) }, fitted on the
/// linear sieve (no range restriction applies) by minimum distance:
/// minimize n^-1 sum_i R_i Ehat[ delta {(1-T) b1(X) - T b2(M, X)} | R=1, M_i, X_i ]^2.
pub fn fit_b2(
    data: &Dataset,
    rdelta: &[f64],
    b1: &LinearFit,
    basis_u: &BasisSpec,
) -> Result<LinearFit> {
    if data.observed_arm_count(1) == 0 {
        return Err(Error::InsufficientData {
            what: "b2 fit (treated arm empty in R=1 subgroup)".into(),
            needed: 1,
            got: 0,
        });
    }
    let n = data.len();
    let b1_values = b1.evaluate_design(&b1.basis.design_matrix(&data.covariate_rows())?)?;
    let mut offset = vec![0.0; n];
    let mut slope = vec![0.0; n];
    for i in 0..n {
        if data.r[i] == 1 {
            offset[i] = rdelta[i] * (1 - data.t[i]) as f64 * b1_values[i];
            slope[i] = -rdelta[i] * data.t[i] as f64;
        }
    }
    let points = data.mediator_covariate_rows();
    let problem = SmdProblem::new(
        AffineResidual { offset, slope },
        &points,
        basis_u,
        &points,
        basis_u,
        LinkSpec::identity(),
        None,
        None,
        Some(&data.r),
        "b2 fit",
    )?;
    let fit = solve_smd(&problem, None, &OptimOptions::default())?;
    Ok(LinearFit {
        basis: basis_u.clone(),
        coefficients: fit
            .coefficient(Arm::Pooled)
            .expect("pooled solve")
            .clone(),
        link: LinkSpec::identity(),
        domain: FitDomain::MediatorCovariates,
        weight_source: "smd b2".into(),
        diagnostics: Some(fit.diagnostics),
    })
}
