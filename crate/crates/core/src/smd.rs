//! Generic sieve-minimum-distance engine.
//!
//! Minimizes  s * n^-1 sum_i [ Ehat{ g(O, f) | W_i } ]^2  -  n^-1 sum_i w_i f_i
//! over a (generalized-)linear sieve f(row) = link(q(row)' pi_arm), where the
//! inner conditional expectation is the series projection from `seriesreg`.
//! The residual g is affine in the sieve value, g_i(f) = offset_i + slope_i *
//! f, which covers the inverse-missingness weight, the propensity-type fits,
//! and the representer problems. The scale s is 1/2 exactly when a linear
//! term is present.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::basis::{BasisSpec, LinkKind, LinkSpec};
use crate::error::{Error, Result};
use crate::seriesreg::{Arm, SpdSolver, WeightedProjector};

/// Residual map affine in the sieve value: g_i(f) = offset[i] + slope[i] * f.
#[derive(Clone, Debug)]
pub struct AffineResidual {
    pub offset: Vec<f64>,
    pub slope: Vec<f64>,
}

impl AffineResidual {
    pub fn value(&self, i: usize, f: f64) -> f64 {
        self.offset[i] + self.slope[i] * f
    }

    /// Partial derivative of the residual in the sieve value.
    pub fn df(&self, i: usize) -> f64 {
        self.slope[i]
    }
}

/// Optimizer configuration, exposed through the run configuration.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OptimOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
    pub restart_scale: f64,
    pub seed: u64,
    /// Run the quasi-Newton path even for identity links (testing hook).
    #[serde(default)]
    pub force_iterative: bool,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            grad_tol: 1e-8,
            max_iter: 500,
            restarts: 3,
            restart_scale: 0.1,
            seed: 0,
            force_iterative: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct OptimizerDiagnostics {
    pub iterations: usize,
    pub grad_norm: f64,
    pub restarts_used: usize,
    pub converged: bool,
}

/// A minimum-distance problem instance with its cached inner projection.
pub struct SmdProblem {
    residual: AffineResidual,
    parameter_basis: BasisSpec,
    parameter_design: DMatrix<f64>,
    link: LinkSpec,
    arm_labels: Option<Vec<u8>>,
    arm_order: Vec<Arm>,
    block_of_row: Vec<usize>,
    projector: WeightedProjector,
    linear_weights: Option<Vec<f64>>,
    context: String,
    n_rows: usize,
}

impl SmdProblem {
    /// Assemble a problem. The instrument projection is computed once here;
    /// it does not depend on the sieve coefficients.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        residual: AffineResidual,
        conditioning_points: &[Vec<f64>],
        instrument_basis: &BasisSpec,
        parameter_points: &[Vec<f64>],
        parameter_basis: &BasisSpec,
        link: LinkSpec,
        arm_labels: Option<&[u8]>,
        linear_weights: Option<Vec<f64>>,
        subgroup_mask: Option<&[u8]>,
        context: &str,
    ) -> Result<SmdProblem> {
        let n = conditioning_points.len();
        if parameter_points.len() != n
            || residual.offset.len() != n
            || residual.slope.len() != n
        {
            return Err(Error::DimensionMismatch {
                what: "smd problem rows",
                expected: n,
                got: parameter_points.len(),
            });
        }
        if instrument_basis.total_terms() < parameter_basis.total_terms() {
            return Err(Error::InvalidConfig(format!(
                "{context}: instrument basis has {} terms, fewer than the {} parameter terms",
                instrument_basis.total_terms(),
                parameter_basis.total_terms()
            )));
        }
        let instrument_design = instrument_basis.design_matrix(conditioning_points)?;
        let projector =
            WeightedProjector::new(instrument_design, arm_labels, subgroup_mask, context)?;
        let parameter_design = parameter_basis.design_matrix(parameter_points)?;
        let arm_order: Vec<Arm> = match arm_labels {
            Some(_) => projector.arms().collect(),
            None => vec![Arm::Pooled],
        };
        let block_index: BTreeMap<Arm, usize> = arm_order
            .iter()
            .enumerate()
            .map(|(b, &a)| (a, b))
            .collect();
        let block_of_row: Vec<usize> = (0..n)
            .map(|i| match arm_labels {
                Some(labels) => *block_index.get(&Arm::Label(labels[i])).unwrap_or(&0),
                None => 0,
            })
            .collect();
        Ok(SmdProblem {
            residual,
            parameter_basis: parameter_basis.clone(),
            parameter_design,
            link,
            arm_labels: arm_labels.map(|l| l.to_vec()),
            arm_order,
            block_of_row,
            projector,
            linear_weights,
            context: context.to_string(),
            n_rows: n,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_parameters(&self) -> usize {
        self.arm_order.len() * self.parameter_basis.total_terms()
    }

    pub fn projector(&self) -> &WeightedProjector {
        &self.projector
    }

    fn scale(&self) -> f64 {
        if self.linear_weights.is_some() {
            0.5
        } else {
            1.0
        }
    }

    /// Linear predictors v_i = q_i' pi_{arm(i)} for a concatenated vector.
    fn predictors(&self, pi: &DVector<f64>) -> Vec<f64> {
        let terms = self.parameter_basis.total_terms();
        let mut v = vec![0.0; self.n_rows];
        for j in 0..terms {
            let col = self.parameter_design.column(j);
            for i in 0..self.n_rows {
                v[i] += col[i] * pi[self.block_of_row[i] * terms + j];
            }
        }
        v
    }

    fn residual_vector(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n_rows)
            .map(|i| self.residual.value(i, self.link.apply(v[i])))
            .collect()
    }

    /// Criterion value at a coefficient vector.
    pub fn criterion(&self, pi: &DVector<f64>) -> Result<f64> {
        let v = self.predictors(pi);
        let g = self.residual_vector(&v);
        let fitted = self.projector.project_masked(&g)?;
        let n = self.n_rows as f64;
        let quad = self.scale() * fitted.iter().map(|f| f * f).sum::<f64>() / n;
        let lin = match &self.linear_weights {
            Some(w) => {
                let mut acc = 0.0;
                for i in 0..self.n_rows {
                    if w[i] != 0.0 {
                        acc += w[i] * self.link.apply(v[i]);
                    }
                }
                acc / n
            }
            None => 0.0,
        };
        let crit = quad - lin;
        if !crit.is_finite() {
            return Err(Error::NumericalFailure(self.context.clone()));
        }
        Ok(crit)
    }

    /// Criterion and analytic gradient, chaining through the cached
    /// projection and the link derivative.
    pub fn criterion_and_gradient(&self, pi: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let terms = self.parameter_basis.total_terms();
        let n = self.n_rows as f64;
        let s = self.scale();
        let v = self.predictors(pi);
        let g = self.residual_vector(&v);
        let fitted = self.projector.project_masked(&g)?;
        let quad = s * fitted.iter().map(|f| f * f).sum::<f64>() / n;
        // The quadratic part differentiates to (2s/n) J' A' A g with J the
        // Jacobian of g; A is symmetric so A'A g = A (A g).
        let doubled = self.projector.project_masked(&fitted)?;
        let mut row_coef = vec![0.0; self.n_rows];
        let mut lin = 0.0;
        for i in 0..self.n_rows {
            let lg = self.link.grad(v[i]);
            row_coef[i] = 2.0 * s / n * doubled[i] * self.residual.df(i) * lg;
            if let Some(w) = &self.linear_weights {
                if w[i] != 0.0 {
                    lin += w[i] * self.link.apply(v[i]);
                    row_coef[i] -= w[i] * lg / n;
                }
            }
        }
        let mut grad = DVector::zeros(self.n_parameters());
        for j in 0..terms {
            let col = self.parameter_design.column(j);
            for i in 0..self.n_rows {
                if row_coef[i] != 0.0 {
                    grad[self.block_of_row[i] * terms + j] += row_coef[i] * col[i];
                }
            }
        }
        let crit = quad - lin / n;
        if !crit.is_finite() {
            return Err(Error::NumericalFailure(self.context.clone()));
        }
        Ok((crit, grad))
    }
}

/// Analytic gradient of the empirical criterion.
pub fn smd_gradient(problem: &SmdProblem, coefficients: &DVector<f64>) -> Result<DVector<f64>> {
    problem.criterion_and_gradient(coefficients).map(|(_, g)| g)
}

/// A fitted sieve weight (or any other minimum-distance sieve function).
#[derive(Clone, Debug)]
pub struct WeightFit {
    pub link: LinkSpec,
    pub parameter_basis: BasisSpec,
    arm_order: Vec<Arm>,
    coefficients: Vec<DVector<f64>>,
    pub criterion_value: f64,
    pub diagnostics: OptimizerDiagnostics,
}

impl WeightFit {
    /// Constant unit weight on the given basis (identity link, intercept 1):
    /// the forced no-missingness regime.
    pub fn unit(basis: &BasisSpec) -> WeightFit {
        let mut coef = DVector::zeros(basis.total_terms());
        coef[0] = 1.0;
        WeightFit {
            link: LinkSpec::identity(),
            parameter_basis: basis.clone(),
            arm_order: vec![Arm::Label(0), Arm::Label(1)],
            coefficients: vec![coef.clone(), coef],
            criterion_value: 0.0,
            diagnostics: OptimizerDiagnostics {
                converged: true,
                ..Default::default()
            },
        }
    }

    pub fn arms(&self) -> &[Arm] {
        &self.arm_order
    }

    pub fn coefficient(&self, arm: Arm) -> Option<&DVector<f64>> {
        self.arm_order
            .iter()
            .position(|&a| a == arm)
            .map(|b| &self.coefficients[b])
    }

    fn arm_for(&self, t: u8) -> Result<&DVector<f64>> {
        self.coefficient(Arm::Label(t))
            .or_else(|| self.coefficient(Arm::Pooled))
            .ok_or_else(|| Error::InvalidConfig(format!("no coefficients for arm {t}")))
    }

    /// Evaluate at a raw parameter point for treatment arm t.
    pub fn evaluate(&self, t: u8, point: &[f64]) -> Result<f64> {
        let coef = self.arm_for(t)?;
        let terms = self.parameter_basis.evaluate(point)?;
        let v: f64 = terms.iter().zip(coef.iter()).map(|(q, c)| q * c).sum();
        Ok(self.link.apply(v))
    }

    /// Evaluate over a prebuilt design matrix, row i through arm labels[i].
    pub fn evaluate_design(
        &self,
        design: &DMatrix<f64>,
        labels: Option<&[u8]>,
    ) -> Result<Vec<f64>> {
        let n = design.nrows();
        let terms = self.parameter_basis.total_terms();
        if design.ncols() != terms {
            return Err(Error::DimensionMismatch {
                what: "weight design columns",
                expected: terms,
                got: design.ncols(),
            });
        }
        let mut out = vec![0.0; n];
        // Resolve each row's coefficient block once.
        let block_for_label: Vec<&DVector<f64>> = match labels {
            Some(_) => vec![self.arm_for(0)?, self.arm_for(1)?],
            None => vec![self.arm_for(0)?],
        };
        let mut v = vec![0.0; n];
        for j in 0..terms {
            let col = design.column(j);
            match labels {
                Some(l) => {
                    for i in 0..n {
                        v[i] += col[i] * block_for_label[l[i] as usize][j];
                    }
                }
                None => {
                    for i in 0..n {
                        v[i] += col[i] * block_for_label[0][j];
                    }
                }
            }
        }
        for i in 0..n {
            out[i] = self.link.apply(v[i]);
        }
        Ok(out)
    }

    fn concatenated(&self) -> DVector<f64> {
        let terms = self.parameter_basis.total_terms();
        let mut pi = DVector::zeros(self.arm_order.len() * terms);
        for (b, coef) in self.coefficients.iter().enumerate() {
            for j in 0..terms {
                pi[b * terms + j] = coef[j];
            }
        }
        pi
    }
}

/// Evaluate a fitted inverse-missingness weight at (t, m, y, x).
pub fn evaluate_weight(fit: &WeightFit, t: u8, m: f64, y: f64, x: &[f64]) -> Result<f64> {
    let mut point = Vec::with_capacity(2 + x.len());
    point.push(m);
    point.push(y);
    point.extend_from_slice(x);
    fit.evaluate(t, &point)
}

struct RunOutcome {
    pi: DVector<f64>,
    criterion: f64,
    grad_norm: f64,
    iterations: usize,
    converged: bool,
}

/// Solve the minimum-distance problem. Identity-link problems are strictly
/// convex quadratics and use a direct normal-equation solve; generalized
/// links go through multi-start BFGS with backtracking line search.
pub fn solve_smd(
    problem: &SmdProblem,
    init: Option<&DVector<f64>>,
    options: &OptimOptions,
) -> Result<WeightFit> {
    let fit = if problem.link.kind == LinkKind::Identity && !options.force_iterative {
        solve_linear(problem)?
    } else {
        solve_iterative(problem, init, options)?
    };
    Ok(fit)
}

fn pack_fit(problem: &SmdProblem, pi: DVector<f64>, criterion: f64, diag: OptimizerDiagnostics) -> WeightFit {
    let terms = problem.parameter_basis.total_terms();
    let coefficients: Vec<DVector<f64>> = (0..problem.arm_order.len())
        .map(|b| DVector::from_iterator(terms, (0..terms).map(|j| pi[b * terms + j])))
        .collect();
    WeightFit {
        link: problem.link,
        parameter_basis: problem.parameter_basis.clone(),
        arm_order: problem.arm_order.clone(),
        coefficients,
        criterion_value: criterion,
        diagnostics: diag,
    }
}

fn solve_linear(problem: &SmdProblem) -> Result<WeightFit> {
    let terms = problem.parameter_basis.total_terms();
    let p = problem.n_parameters();
    let n = problem.n_rows;
    // Columns of the composed map pi -> A (slope .* B pi), one per parameter.
    let mut composed = DMatrix::zeros(n, p);
    let mut col_buf = vec![0.0; n];
    for b in 0..problem.arm_order.len() {
        for j in 0..terms {
            for (i, cb) in col_buf.iter_mut().enumerate() {
                *cb = if problem.block_of_row[i] == b {
                    problem.residual.slope[i] * problem.parameter_design[(i, j)]
                } else {
                    0.0
                };
            }
            let projected = problem.projector.project_masked(&col_buf)?;
            for i in 0..n {
                composed[(i, b * terms + j)] = projected[i];
            }
        }
    }
    let offset_fitted = problem.projector.project_masked(&problem.residual.offset)?;
    let gram = composed.transpose() * &composed;
    let mut rhs = -(composed.transpose() * DVector::from_vec(offset_fitted));
    if let Some(w) = &problem.linear_weights {
        // + (1/(2s)) B~' w with s = 1/2.
        for i in 0..n {
            if w[i] != 0.0 {
                let b = problem.block_of_row[i];
                for j in 0..terms {
                    rhs[b * terms + j] += w[i] * problem.parameter_design[(i, j)];
                }
            }
        }
    }
    let solver = SpdSolver::new(gram, &problem.context)?;
    let pi = solver.solve(&rhs);
    let (criterion, grad) = problem.criterion_and_gradient(&pi)?;
    let diag = OptimizerDiagnostics {
        iterations: 0,
        grad_norm: grad.amax(),
        restarts_used: 0,
        converged: true,
    };
    Ok(pack_fit(problem, pi, criterion, diag))
}

fn solve_iterative(
    problem: &SmdProblem,
    init: Option<&DVector<f64>>,
    options: &OptimOptions,
) -> Result<WeightFit> {
    let p = problem.n_parameters();
    let mut starts: Vec<DVector<f64>> = Vec::new();
    if let Some(x0) = init {
        if x0.len() != p {
            return Err(Error::DimensionMismatch {
                what: "smd init",
                expected: p,
                got: x0.len(),
            });
        }
        starts.push(x0.clone());
    }
    starts.push(DVector::zeros(p));
    let mut rng = ChaCha12Rng::seed_from_u64(options.seed);
    for _ in 0..options.restarts {
        starts.push(DVector::from_iterator(
            p,
            (0..p).map(|_| options.restart_scale * rng.sample::<f64, _>(StandardNormal)),
        ));
    }

    let mut runs: Vec<RunOutcome> = Vec::with_capacity(starts.len());
    for start in &starts {
        runs.push(bfgs(problem, start.clone(), options)?);
    }
    // Lowest criterion wins; ties broken by coefficient norm.
    let best_idx = select_best(&runs);
    let mut best = runs.swap_remove(best_idx);
    let mut restarts_used = starts.len() - 1;
    if !best.converged {
        // One continuation from the best iterate with a fresh Hessian.
        let cont = bfgs(problem, best.pi.clone(), options)?;
        restarts_used += 1;
        if cont.criterion <= best.criterion {
            best = cont;
        }
    }
    if !best.converged {
        return Err(Error::ConvergenceFailure {
            context: problem.context.clone(),
            iterations: best.iterations,
            grad_norm: best.grad_norm,
            restarts: restarts_used,
            best: split_blocks(problem, &best.pi),
        });
    }
    let diag = OptimizerDiagnostics {
        iterations: best.iterations,
        grad_norm: best.grad_norm,
        restarts_used,
        converged: true,
    };
    Ok(pack_fit(problem, best.pi, best.criterion, diag))
}

fn split_blocks(problem: &SmdProblem, pi: &DVector<f64>) -> Vec<Vec<f64>> {
    let terms = problem.parameter_basis.total_terms();
    (0..problem.arm_order.len())
        .map(|b| (0..terms).map(|j| pi[b * terms + j]).collect())
        .collect()
}

fn select_best(runs: &[RunOutcome]) -> usize {
    let mut best = 0;
    for (i, run) in runs.iter().enumerate().skip(1) {
        let b = &runs[best];
        let better = run.criterion < b.criterion
            || (run.criterion == b.criterion && run.pi.norm() < b.pi.norm());
        if better {
            best = i;
        }
    }
    best
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
const CURVATURE_FLOOR: f64 = 1e-10;

fn bfgs(problem: &SmdProblem, mut x: DVector<f64>, options: &OptimOptions) -> Result<RunOutcome> {
    let p = x.len();
    let (mut fval, mut grad) = problem.criterion_and_gradient(&x)?;
    let mut hess_inv = DMatrix::<f64>::identity(p, p);
    let mut iterations = 0;
    let tol = |f: f64| options.grad_tol * f.abs().max(1.0);

    while iterations < options.max_iter {
        if grad.amax() <= tol(fval) {
            return Ok(RunOutcome {
                pi: x,
                criterion: fval,
                grad_norm: grad.amax(),
                iterations,
                converged: true,
            });
        }
        let mut direction = -(&hess_inv * &grad);
        let mut slope = grad.dot(&direction);
        if !(slope < 0.0) {
            hess_inv = DMatrix::identity(p, p);
            direction = -grad.clone();
            slope = grad.dot(&direction);
        }
        // Backtracking Armijo line search.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let candidate = &x + &direction * step;
            match problem.criterion(&candidate) {
                Ok(fc) if fc <= fval + ARMIJO_C1 * step * slope => {
                    accepted = Some((candidate, fc));
                    break;
                }
                _ => step *= 0.5,
            }
        }
        let Some((x_new, f_new)) = accepted else {
            // Line search stalled; report the current point.
            break;
        };
        let (_, grad_new) = problem.criterion_and_gradient(&x_new)?;
        let s = &x_new - &x;
        let yv = &grad_new - &grad;
        let sy = s.dot(&yv);
        if sy > CURVATURE_FLOOR * s.norm() * yv.norm() {
            let hy = &hess_inv * &yv;
            let yhy = yv.dot(&hy);
            let c1 = (sy + yhy) / (sy * sy);
            hess_inv += c1 * (&s * s.transpose());
            let cross = &hy * s.transpose();
            hess_inv -= (&cross + cross.transpose()) / sy;
        }
        x = x_new;
        fval = f_new;
        grad = grad_new;
        iterations += 1;
    }
    let gnorm = grad.amax();
    Ok(RunOutcome {
        pi: x,
        criterion: fval,
        grad_norm: gnorm,
        iterations,
        converged: gnorm <= tol(fval),
    })
}

/// Concatenated coefficient vector of a fit (testing hook for the gradient
/// and criterion checks).
pub fn fit_coefficients(fit: &WeightFit) -> DVector<f64> {
    fit.concatenated()
}
