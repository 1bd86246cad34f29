//! Series least-squares estimation of conditional expectations, with
//! treatment-arm splits and subgroup (R = 1) restriction.
//!
//! The same weighted projection backs the plain conditional-expectation
//! estimator, the inner projection of the minimum-distance criterion, and the
//! weighted Gram systems of the closed-form fits.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::basis::BasisSpec;
use crate::error::{Error, Result};

/// Relative ridge added to every Gram diagonal: eps = RIDGE_REL * trace / dim.
pub const RIDGE_REL: f64 = 1e-8;
/// Relative eigenvalue cutoff of the pseudo-inverse fallback.
const PINV_CUTOFF: f64 = 1e-10;

/// Symmetric positive-definite solver with a deterministic pseudo-inverse
/// fallback for rank-deficient systems.
#[derive(Clone, Debug)]
pub(crate) struct SpdSolver {
    chol: Option<Cholesky<f64, Dyn>>,
    pinv: Option<DMatrix<f64>>,
    pub(crate) condition: f64,
}

impl SpdSolver {
    pub(crate) fn new(mut gram: DMatrix<f64>, context: &str) -> Result<Self> {
        let dim = gram.nrows();
        let trace: f64 = gram.diagonal().iter().sum();
        if !trace.is_finite() {
            return Err(Error::NumericalFailure(format!("{context} gram trace")));
        }
        let ridge = RIDGE_REL * trace / dim.max(1) as f64;
        for i in 0..dim {
            gram[(i, i)] += ridge;
        }
        let condition = estimate_condition(&gram);
        if let Some(chol) = gram.clone().cholesky() {
            return Ok(SpdSolver {
                chol: Some(chol),
                pinv: None,
                condition,
            });
        }
        // Eigen pseudo-inverse with a relative cutoff.
        let eig = gram.symmetric_eigen();
        let max_ev = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(max_ev.is_finite() && max_ev > 0.0) {
            return Err(Error::SingularDesign(context.to_string()));
        }
        let cutoff = PINV_CUTOFF * max_ev;
        let inv_ev = DVector::from_iterator(
            dim,
            eig.eigenvalues
                .iter()
                .map(|&ev| if ev > cutoff { 1.0 / ev } else { 0.0 }),
        );
        let pinv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_ev) * eig.eigenvectors.transpose();
        Ok(SpdSolver {
            chol: None,
            pinv: Some(pinv),
            condition,
        })
    }

    pub(crate) fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match (&self.chol, &self.pinv) {
            (Some(chol), _) => chol.solve(rhs),
            (None, Some(pinv)) => pinv * rhs,
            _ => unreachable!(),
        }
    }
}

fn estimate_condition(gram: &DMatrix<f64>) -> f64 {
    // Diagonal ratio is a cheap surrogate that is exact for the degenerate
    // cases the validator cares about (constant or near-constant columns).
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for v in gram.diagonal().iter() {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Arm selector for fitted series estimators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Arm {
    Label(u8),
    Pooled,
}

#[derive(Clone, Debug)]
struct ProjectorArm {
    rows: Vec<usize>,
    solver: SpdSolver,
}

/// Design matrix plus per-arm weighted Gram factorizations. The projection it
/// represents is V |-> fitted values of the per-arm least-squares fit of V on
/// the basis columns, restricted to masked rows.
#[derive(Clone, Debug)]
pub struct WeightedProjector {
    design: DMatrix<f64>,
    arms: BTreeMap<Arm, ProjectorArm>,
    arm_of_row: Vec<Arm>,
}

impl WeightedProjector {
    pub fn new(
        design: DMatrix<f64>,
        arm_labels: Option<&[u8]>,
        mask: Option<&[u8]>,
        context: &str,
    ) -> Result<Self> {
        let n = design.nrows();
        let k = design.ncols();
        if let Some(labels) = arm_labels {
            if labels.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "arm labels",
                    expected: n,
                    got: labels.len(),
                });
            }
        }
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "subgroup mask",
                    expected: n,
                    got: m.len(),
                });
            }
        }
        let arm_of_row: Vec<Arm> = (0..n)
            .map(|i| match arm_labels {
                Some(labels) => Arm::Label(labels[i]),
                None => Arm::Pooled,
            })
            .collect();
        let mut rows_by_arm: BTreeMap<Arm, Vec<usize>> = BTreeMap::new();
        for i in 0..n {
            if mask.map_or(true, |m| m[i] != 0) {
                rows_by_arm.entry(arm_of_row[i]).or_default().push(i);
            }
        }
        if rows_by_arm.is_empty() {
            return Err(Error::InsufficientData {
                what: context.to_string(),
                needed: k,
                got: 0,
            });
        }
        let mut arms = BTreeMap::new();
        for (arm, rows) in rows_by_arm {
            if rows.len() < k {
                return Err(Error::InsufficientData {
                    what: format!("{context} ({arm:?})"),
                    needed: k,
                    got: rows.len(),
                });
            }
            let sub = design.select_rows(rows.iter());
            let gram = sub.transpose() * &sub;
            let solver = SpdSolver::new(gram, context)?;
            arms.insert(arm, ProjectorArm { rows, solver });
        }
        Ok(WeightedProjector {
            design,
            arms,
            arm_of_row,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.design.nrows()
    }

    pub fn n_terms(&self) -> usize {
        self.design.ncols()
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn arms(&self) -> impl Iterator<Item = Arm> + '_ {
        self.arms.keys().copied()
    }

    pub fn arm_rows(&self, arm: Arm) -> Option<&[usize]> {
        self.arms.get(&arm).map(|a| a.rows.as_slice())
    }

    pub(crate) fn condition(&self, arm: Arm) -> Option<f64> {
        self.arms.get(&arm).map(|a| a.solver.condition)
    }

    /// Least-squares coefficients of `values` on the design columns over the
    /// masked rows of `arm`.
    pub fn coefficients(&self, arm: Arm, values: &[f64]) -> Result<DVector<f64>> {
        let data = self
            .arms
            .get(&arm)
            .ok_or(Error::InvalidConfig(format!("unfitted arm {arm:?}")))?;
        let k = self.n_terms();
        let mut rhs = DVector::zeros(k);
        for j in 0..k {
            let col = self.design.column(j);
            let mut acc = 0.0;
            for &i in &data.rows {
                acc += col[i] * values[i];
            }
            rhs[j] = acc;
        }
        Ok(data.solver.solve(&rhs))
    }

    /// Apply the masked projection: fitted values on masked rows, zero
    /// elsewhere. This is the map whose squared norm the minimum-distance
    /// criterion averages.
    pub fn project_masked(&self, values: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_rows()];
        for (&arm, data) in &self.arms {
            let coef = self.coefficients(arm, values)?;
            for j in 0..self.n_terms() {
                let c = coef[j];
                if c != 0.0 {
                    let col = self.design.column(j);
                    for &i in &data.rows {
                        out[i] += col[i] * c;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Fitted values at every row, each row evaluated with its own arm's
    /// coefficients (rows of arms absent from the fit keep value zero).
    pub fn fitted_all(&self, values: &[f64]) -> Result<Vec<f64>> {
        let arm_list: Vec<Arm> = self.arms.keys().copied().collect();
        let mut coefs: Vec<DVector<f64>> = Vec::with_capacity(arm_list.len());
        for &arm in &arm_list {
            coefs.push(self.coefficients(arm, values)?);
        }
        let block_of_row: Vec<Option<usize>> = self
            .arm_of_row
            .iter()
            .map(|a| arm_list.iter().position(|b| b == a))
            .collect();
        let mut out = vec![0.0; self.n_rows()];
        for j in 0..self.n_terms() {
            let col = self.design.column(j);
            for i in 0..self.n_rows() {
                if let Some(b) = block_of_row[i] {
                    out[i] += col[i] * coefs[b][j];
                }
            }
        }
        Ok(out)
    }
}

/// A fitted series least-squares conditional-expectation estimator.
#[derive(Clone, Debug)]
pub struct SeriesFit {
    pub basis: BasisSpec,
    arm_coefficients: BTreeMap<Arm, DVector<f64>>,
    pub n_per_arm: BTreeMap<Arm, usize>,
    projector: WeightedProjector,
}

/// Fit E(V | conditioning point) by least squares on the basis columns,
/// optionally split by treatment arm and restricted to a subgroup.
pub fn fit_series(
    responses: &[f64],
    points: &[Vec<f64>],
    basis: &BasisSpec,
    arm_labels: Option<&[u8]>,
    subgroup_mask: Option<&[u8]>,
) -> Result<SeriesFit> {
    if points.len() != responses.len() {
        return Err(Error::DimensionMismatch {
            what: "series responses",
            expected: points.len(),
            got: responses.len(),
        });
    }
    let design = basis.design_matrix(points)?;
    let projector = WeightedProjector::new(design, arm_labels, subgroup_mask, "series regression")?;
    let mut arm_coefficients = BTreeMap::new();
    let mut n_per_arm = BTreeMap::new();
    for arm in projector.arms().collect::<Vec<_>>() {
        arm_coefficients.insert(arm, projector.coefficients(arm, responses)?);
        n_per_arm.insert(arm, projector.arm_rows(arm).map_or(0, |r| r.len()));
    }
    Ok(SeriesFit {
        basis: basis.clone(),
        arm_coefficients,
        n_per_arm,
        projector,
    })
}

/// Prediction at a new point with the requested arm's coefficients.
pub fn predict_series(fit: &SeriesFit, point: &[f64], arm: Arm) -> Result<f64> {
    let coef = fit
        .arm_coefficients
        .get(&arm)
        .ok_or(Error::InvalidConfig(format!("unfitted arm {arm:?}")))?;
    let terms = fit.basis.evaluate(point)?;
    Ok(terms.iter().zip(coef.iter()).map(|(t, c)| t * c).sum())
}

impl SeriesFit {
    pub fn coefficients(&self, arm: Arm) -> Option<&DVector<f64>> {
        self.arm_coefficients.get(&arm)
    }

    /// Fitted values at the training rows (each row through its own arm).
    pub fn fitted_values(&self) -> Result<Vec<f64>> {
        let arm_list: Vec<Arm> = self.arm_coefficients.keys().copied().collect();
        let block_of_row: Vec<Option<usize>> = self
            .projector
            .arm_of_row
            .iter()
            .map(|a| arm_list.iter().position(|b| b == a))
            .collect();
        let mut out = vec![0.0; self.projector.n_rows()];
        for j in 0..self.projector.n_terms() {
            let col = self.projector.design.column(j);
            for (i, out_i) in out.iter_mut().enumerate() {
                if let Some(b) = block_of_row[i] {
                    *out_i += col[i] * self.arm_coefficients[&arm_list[b]][j];
                }
            }
        }
        Ok(out)
    }

    /// The linear projection operator V |-> fitted values over the training
    /// sample (masked rows; zero elsewhere).
    pub fn projection_matrix(&self) -> &WeightedProjector {
        &self.projector
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_basis, BasisFamily};
    use approx::assert_relative_eq;

    fn column(points: &[f64]) -> Vec<Vec<f64>> {
        points.iter().map(|&p| vec![p]).collect()
    }

    #[test]
    fn constant_responses_reproduced_exactly() {
        let basis = build_basis(BasisFamily::Polynomial, &[2]).unwrap();
        let points = column(&[0.1, 0.4, 0.9, 0.2, 0.6]);
        let fit = fit_series(&[3.0; 5], &points, &basis, None, None).unwrap();
        for p in [0.0, 0.5, 1.7] {
            assert_relative_eq!(
                predict_series(&fit, &[p], Arm::Pooled).unwrap(),
                3.0,
                max_relative = 1e-8
            );
        }
    }

    #[test]
    fn linear_responses_in_span_reproduced() {
        let basis = build_basis(BasisFamily::Polynomial, &[1, 1]).unwrap();
        let points: Vec<Vec<f64>> = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
            vec![0.3, 0.8],
        ];
        let responses: Vec<f64> = points.iter().map(|p| 2.0 + 3.0 * p[0] - p[1]).collect();
        let fit = fit_series(&responses, &points, &basis, None, None).unwrap();
        for (p, &r) in points.iter().zip(&responses) {
            assert_relative_eq!(
                predict_series(&fit, p, Arm::Pooled).unwrap(),
                r,
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn intercept_only_two_points_average() {
        let basis = build_basis(BasisFamily::Polynomial, &[0]).unwrap();
        let fit = fit_series(&[1.0, 3.0], &column(&[0.2, 0.8]), &basis, None, None).unwrap();
        assert_relative_eq!(
            predict_series(&fit, &[0.55], Arm::Pooled).unwrap(),
            2.0,
            max_relative = 1e-10
        );
        let proj = fit.projection_matrix().project_masked(&[1.0, 3.0]).unwrap();
        assert_relative_eq!(proj[0], 2.0, max_relative = 1e-8);
        assert_relative_eq!(proj[1], 2.0, max_relative = 1e-8);
    }

    #[test]
    fn projection_is_idempotent_and_reproduces_columns() {
        let basis = build_basis(BasisFamily::Polynomial, &[3]).unwrap();
        let points = column(&[0.05, 0.17, 0.31, 0.44, 0.58, 0.66, 0.79, 0.93, 0.12, 0.85]);
        let responses: Vec<f64> = points.iter().map(|p| (7.0 * p[0]).sin()).collect();
        let fit = fit_series(&responses, &points, &basis, None, None).unwrap();
        let proj = fit.projection_matrix();

        let once = proj.project_masked(&responses).unwrap();
        let twice = proj.project_masked(&once).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0));
        }

        // A basis column is a fixed point of the projection.
        let col: Vec<f64> = points.iter().map(|p| p[0] * p[0]).collect();
        let fitted = proj.project_masked(&col).unwrap();
        for (a, b) in col.iter().zip(&fitted) {
            assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn residuals_orthogonal_to_basis_columns() {
        let basis = build_basis(BasisFamily::Polynomial, &[2]).unwrap();
        let points = column(&[0.0, 0.1, 0.25, 0.33, 0.5, 0.61, 0.75, 0.9, 1.0]);
        let responses: Vec<f64> = points.iter().map(|p| (4.0 * p[0]).cos() + p[0]).collect();
        let fit = fit_series(&responses, &points, &basis, None, None).unwrap();
        let fitted = fit.fitted_values().unwrap();
        let design = basis.design_matrix(&points).unwrap();
        for j in 0..basis.total_terms() {
            let dot: f64 = (0..points.len())
                .map(|i| design[(i, j)] * (responses[i] - fitted[i]))
                .sum();
            assert!(dot.abs() <= 1e-6 * points.len() as f64, "column {j}: {dot}");
        }
    }

    #[test]
    fn arm_split_equals_separate_fits() {
        let basis = build_basis(BasisFamily::Polynomial, &[1]).unwrap();
        let points = column(&[0.1, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8, 0.9]);
        let responses = vec![1.0, 1.2, 1.4, 1.6, 5.0, 5.5, 6.0, 6.5];
        let arms = vec![0u8, 0, 0, 0, 1, 1, 1, 1];
        let fit = fit_series(&responses, &points, &basis, Some(&arms), None).unwrap();
        let fit0 = fit_series(&responses[..4], &points[..4], &basis, None, None).unwrap();
        let p0_split = predict_series(&fit, &[0.25], Arm::Label(0)).unwrap();
        let p0_alone = predict_series(&fit0, &[0.25], Arm::Pooled).unwrap();
        assert_relative_eq!(p0_split, p0_alone, max_relative = 1e-10);
    }

    #[test]
    fn single_arm_labels_match_pooled_fit() {
        let basis = build_basis(BasisFamily::Polynomial, &[1]).unwrap();
        let points = column(&[0.1, 0.4, 0.7, 0.9]);
        let responses = vec![0.5, 1.1, 1.6, 2.0];
        let labeled = fit_series(&responses, &points, &basis, Some(&[1, 1, 1, 1]), None).unwrap();
        let pooled = fit_series(&responses, &points, &basis, None, None).unwrap();
        assert_eq!(
            labeled.coefficients(Arm::Label(1)).unwrap(),
            pooled.coefficients(Arm::Pooled).unwrap()
        );
        assert!(predict_series(&labeled, &[0.5], Arm::Label(0)).is_err());
    }

    #[test]
    fn too_few_rows_in_arm_is_an_error() {
        let basis = build_basis(BasisFamily::Polynomial, &[3]).unwrap();
        let points = column(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let responses = vec![1.0; 6];
        // Arm 1 has two rows but the basis needs four.
        let arms = vec![0u8, 0, 0, 0, 1, 1];
        assert!(matches!(
            fit_series(&responses, &points, &basis, Some(&arms), None),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn subgroup_mask_restricts_fit() {
        let basis = build_basis(BasisFamily::Polynomial, &[0]).unwrap();
        let points = column(&[0.1, 0.2, 0.3, 0.4]);
        let responses = vec![1.0, 1.0, 10.0, 10.0];
        let mask = vec![1u8, 1, 0, 0];
        let fit = fit_series(&responses, &points, &basis, None, Some(&mask)).unwrap();
        assert_relative_eq!(
            predict_series(&fit, &[0.9], Arm::Pooled).unwrap(),
            1.0,
            max_relative = 1e-10
        );
    }
}
