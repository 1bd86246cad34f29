//! Sieve bases (tensor-product polynomials, splines, Fourier terms) and the
//! monotone link functions used by the generalized-linear sieve.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Family of univariate term functions the tensor product is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    Polynomial,
    Spline,
    Fourier,
}

/// How multi-variable terms are truncated.
///
/// `TotalDegree` keeps tensor terms whose degree indices sum to at most the
/// largest per-variable degree; `Additive` keeps only terms involving a single
/// variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    TotalDegree,
    Additive,
}

/// Per-variable affine map applied before term evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn identity(dims: usize) -> Self {
        Standardization {
            shift: vec![0.0; dims],
            scale: vec![1.0; dims],
        }
    }

    /// Map each variable's observed min/max onto [0, 1]. Degenerate (constant)
    /// columns get unit scale so evaluation stays finite.
    pub fn from_rows<'a, I>(rows: I, dims: usize) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut min = vec![f64::INFINITY; dims];
        let mut max = vec![f64::NEG_INFINITY; dims];
        for row in rows {
            for j in 0..dims {
                min[j] = min[j].min(row[j]);
                max[j] = max[j].max(row[j]);
            }
        }
        let mut shift = vec![0.0; dims];
        let mut scale = vec![1.0; dims];
        for j in 0..dims {
            if min[j].is_finite() && max[j] > min[j] {
                shift[j] = min[j];
                scale[j] = max[j] - min[j];
            } else if min[j].is_finite() {
                shift[j] = min[j];
            }
        }
        Standardization { shift, scale }
    }

    #[inline]
    pub fn apply(&self, j: usize, v: f64) -> f64 {
        (v - self.shift[j]) / self.scale[j]
    }
}

/// A finite tensor-product sieve basis. Term 0 is always the constant 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub family: BasisFamily,
    pub per_variable_degree: Vec<usize>,
    pub input_dims: usize,
    pub truncation: Truncation,
    pub standardization: Standardization,
    /// Multi-index of each retained term; exponents[k][j] is the degree index
    /// of variable j in term k.
    exponents: Vec<Vec<u8>>,
}

/// Build a basis with identity standardization and total-degree truncation.
pub fn build_basis(family: BasisFamily, degrees: &[usize]) -> Result<BasisSpec> {
    build_basis_with(
        family,
        degrees,
        Truncation::TotalDegree,
        Standardization::identity(degrees.len()),
    )
}

pub fn build_basis_with(
    family: BasisFamily,
    degrees: &[usize],
    truncation: Truncation,
    standardization: Standardization,
) -> Result<BasisSpec> {
    let dims = degrees.len();
    if dims == 0 {
        return Err(Error::InvalidConfig(
            "basis needs at least one input variable".into(),
        ));
    }
    if standardization.shift.len() != dims || standardization.scale.len() != dims {
        return Err(Error::DimensionMismatch {
            what: "standardization",
            expected: dims,
            got: standardization.shift.len(),
        });
    }
    let total_cap = degrees.iter().copied().max().unwrap_or(0);
    let mut exponents = Vec::new();
    let mut current = vec![0u8; dims];
    enumerate_terms(degrees, total_cap, truncation, 0, 0, &mut current, &mut exponents);
    // Graded order: constant first, then by total degree, then lexicographic.
    exponents.sort_by(|a, b| {
        let (sa, sb) = (
            a.iter().map(|&e| e as usize).sum::<usize>(),
            b.iter().map(|&e| e as usize).sum::<usize>(),
        );
        sa.cmp(&sb).then_with(|| a.cmp(b))
    });
    Ok(BasisSpec {
        family,
        per_variable_degree: degrees.to_vec(),
        input_dims: dims,
        truncation,
        standardization,
        exponents,
    })
}

fn enumerate_terms(
    degrees: &[usize],
    total_cap: usize,
    truncation: Truncation,
    var: usize,
    used: usize,
    current: &mut Vec<u8>,
    out: &mut Vec<Vec<u8>>,
) {
    if var == degrees.len() {
        if truncation == Truncation::Additive {
            let active = current.iter().filter(|&&e| e > 0).count();
            if active > 1 {
                return;
            }
        }
        out.push(current.clone());
        return;
    }
    let cap = degrees[var].min(total_cap - used);
    for e in 0..=cap {
        current[var] = e as u8;
        enumerate_terms(degrees, total_cap, truncation, var + 1, used + e, current, out);
    }
    current[var] = 0;
}

impl BasisSpec {
    pub fn total_terms(&self) -> usize {
        self.exponents.len()
    }

    /// Univariate term function for variable `var` at degree index `e`.
    fn term(&self, var: usize, e: u8, v: f64) -> f64 {
        if e == 0 {
            return 1.0;
        }
        match self.family {
            BasisFamily::Polynomial => v.powi(e as i32),
            BasisFamily::Fourier => {
                let k = e.div_ceil(2) as f64;
                let arg = 2.0 * std::f64::consts::PI * k * v;
                if e % 2 == 1 {
                    arg.sin()
                } else {
                    arg.cos()
                }
            }
            BasisFamily::Spline => {
                if e <= 3 {
                    v.powi(e as i32)
                } else {
                    // Truncated cubic powers with uniform interior knots on [0, 1].
                    let g = self.per_variable_degree[var];
                    let knot = (e as usize - 3) as f64 / (g as f64 - 2.0);
                    let d = v - knot;
                    if d > 0.0 {
                        d * d * d
                    } else {
                        0.0
                    }
                }
            }
        }
    }

    pub fn evaluate(&self, point: &[f64]) -> Result<Vec<f64>> {
        if point.len() != self.input_dims {
            return Err(Error::DimensionMismatch {
                what: "basis evaluation point",
                expected: self.input_dims,
                got: point.len(),
            });
        }
        let mut out = vec![0.0; self.total_terms()];
        self.evaluate_into(point, &mut out);
        Ok(out)
    }

    /// Evaluation without the dimension check, for hot loops.
    pub fn evaluate_into(&self, point: &[f64], out: &mut [f64]) {
        debug_assert_eq!(point.len(), self.input_dims);
        debug_assert_eq!(out.len(), self.total_terms());
        let std_point: Vec<f64> = (0..self.input_dims)
            .map(|j| self.standardization.apply(j, point[j]))
            .collect();
        for (k, exps) in self.exponents.iter().enumerate() {
            let mut prod = 1.0;
            for (j, &e) in exps.iter().enumerate() {
                if e > 0 {
                    prod *= self.term(j, e, std_point[j]);
                }
            }
            out[k] = prod;
        }
    }

    /// Design matrix with one row per point, one column per term.
    pub fn design_matrix(&self, points: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let n = points.len();
        let k = self.total_terms();
        let mut m = DMatrix::zeros(n, k);
        let mut row = vec![0.0; k];
        for (i, p) in points.iter().enumerate() {
            if p.len() != self.input_dims {
                return Err(Error::DimensionMismatch {
                    what: "design matrix point",
                    expected: self.input_dims,
                    got: p.len(),
                });
            }
            self.evaluate_into(p, &mut row);
            for (j, &v) in row.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }
}

/// Monotone link with range (1, inf) for the generalized-linear sieve, or the
/// identity for plain linear sieves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    InverseLogistic,
    DoubleExponential,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub kind: LinkKind,
}

/// Clamp exponents so exp never overflows.
const EXP_CLAMP: f64 = 700.0;

impl LinkSpec {
    pub fn new(kind: LinkKind) -> Self {
        LinkSpec { kind }
    }

    pub fn identity() -> Self {
        LinkSpec::new(LinkKind::Identity)
    }

    pub fn range_floor(&self) -> f64 {
        match self.kind {
            LinkKind::Identity => f64::NEG_INFINITY,
            _ => 1.0,
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        let v = v.clamp(-EXP_CLAMP, EXP_CLAMP);
        match self.kind {
            LinkKind::InverseLogistic => 1.0 + (-v).exp(),
            LinkKind::DoubleExponential => v.exp().min(EXP_CLAMP).exp(),
            LinkKind::Identity => v,
        }
    }

    pub fn grad(&self, v: f64) -> f64 {
        let v = v.clamp(-EXP_CLAMP, EXP_CLAMP);
        match self.kind {
            LinkKind::InverseLogistic => -(-v).exp(),
            LinkKind::DoubleExponential => {
                let inner = v.exp().min(EXP_CLAMP);
                inner * inner.exp()
            }
            LinkKind::Identity => 1.0,
        }
    }
}

pub fn link_apply(link: &LinkSpec, v: f64) -> f64 {
    link.apply(v)
}

pub fn link_grad(link: &LinkSpec, v: f64) -> f64 {
    link.grad(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn scalar_cubic_has_four_terms() {
        let b = build_basis(BasisFamily::Polynomial, &[3]).unwrap();
        assert_eq!(b.total_terms(), 4);
        let v = b.evaluate(&[0.5]).unwrap();
        assert_eq!(v, vec![1.0, 0.5, 0.25, 0.125]);
    }

    #[test]
    fn bivariate_total_degree_three_has_ten_terms() {
        // Count of bivariate monomials with total degree <= 3 is C(5,2) = 10.
        let b = build_basis(BasisFamily::Polynomial, &[3, 3]).unwrap();
        assert_eq!(b.total_terms(), 10);
    }

    #[test]
    fn constant_basis_is_single_term() {
        let b = build_basis(BasisFamily::Polynomial, &[0]).unwrap();
        assert_eq!(b.total_terms(), 1);
        assert_eq!(b.evaluate(&[3.7]).unwrap(), vec![1.0]);
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(matches!(
            build_basis(BasisFamily::Polynomial, &[]),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn degree_one_bivariate_evaluates_linearly() {
        let b = build_basis(BasisFamily::Polynomial, &[1, 1]).unwrap();
        assert_eq!(b.evaluate(&[2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn first_term_is_constant_for_every_family() {
        for family in [BasisFamily::Polynomial, BasisFamily::Spline, BasisFamily::Fourier] {
            let b = build_basis(family, &[4, 2]).unwrap();
            for p in [[-1.3, 0.4], [0.0, 0.0], [2.0, 9.0]] {
                assert_eq!(b.evaluate(&p).unwrap()[0], 1.0);
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let b = build_basis(BasisFamily::Polynomial, &[2, 2]).unwrap();
        assert!(b.evaluate(&[1.0]).is_err());
    }

    #[test]
    fn standardization_matches_identity_at_mapped_point() {
        let rows = vec![vec![2.0], vec![6.0]];
        let std = Standardization::from_rows(rows.iter().map(|r| r.as_slice()), 1);
        let b = build_basis_with(BasisFamily::Polynomial, &[3], Truncation::TotalDegree, std)
            .unwrap();
        let ident = build_basis(BasisFamily::Polynomial, &[3]).unwrap();
        // Midpoint 4.0 maps to 0.5 on [0,1].
        assert_eq!(b.evaluate(&[4.0]).unwrap(), ident.evaluate(&[0.5]).unwrap());
    }

    #[test]
    fn additive_truncation_drops_interactions() {
        let b = build_basis_with(
            BasisFamily::Polynomial,
            &[2, 2],
            Truncation::Additive,
            Standardization::identity(2),
        )
        .unwrap();
        // 1 + {v1, v1^2} + {v2, v2^2}
        assert_eq!(b.total_terms(), 5);
    }

    #[test]
    fn inverse_logistic_values() {
        let link = LinkSpec::new(LinkKind::InverseLogistic);
        assert_relative_eq!(link.apply(0.0), 2.0);
        assert_relative_eq!(link.grad(0.0), -1.0);
        assert!(link.apply(900.0) > 1.0);
        assert!(link.apply(-900.0).is_finite());
    }

    #[test]
    fn double_exponential_values() {
        let link = LinkSpec::new(LinkKind::DoubleExponential);
        assert_relative_eq!(link.apply(0.0), std::f64::consts::E, max_relative = 1e-12);
        assert!(link.apply(10.0).is_finite());
        assert!(link.apply(800.0).is_finite());
    }

    #[test]
    fn link_gradients_match_finite_differences() {
        let h = 1e-6;
        for kind in [LinkKind::InverseLogistic, LinkKind::DoubleExponential, LinkKind::Identity] {
            let link = LinkSpec::new(kind);
            let mut v = -20.0;
            while v <= 20.0 {
                // Keep the double exponential in a numerically sane window.
                if kind == LinkKind::DoubleExponential && v > 5.0 {
                    break;
                }
                let fd = (link.apply(v + h) - link.apply(v - h)) / (2.0 * h);
                let an = link.grad(v);
                let rel = (an - fd).abs() / an.abs().max(1.0);
                assert!(rel < 1e-6, "kind {kind:?} v {v}: analytic {an} vs fd {fd}");
                v += 0.5;
            }
        }
    }

    #[test]
    fn spline_terms_are_continuous_at_knots() {
        let b = build_basis(BasisFamily::Spline, &[5]).unwrap();
        assert_eq!(b.total_terms(), 6);
        let below = b.evaluate(&[1.0 / 3.0 - 1e-9]).unwrap();
        let above = b.evaluate(&[1.0 / 3.0 + 1e-9]).unwrap();
        for (lo, hi) in below.iter().zip(above.iter()) {
            assert!((lo - hi).abs() < 1e-8);
        }
    }
}
