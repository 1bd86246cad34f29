//! Observation layout: one row is O = (R, T, M, Y, X, Z) where the missable
//! components of X are zeroed whenever R = 0.

use crate::error::{Error, Result};

/// Immutable sample of n observations, stored column-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Missingness indicator: 1 when every missable covariate is observed.
    pub r: Vec<u8>,
    /// Binary treatment.
    pub t: Vec<u8>,
    /// Mediator.
    pub m: Vec<f64>,
    /// Outcome.
    pub y: Vec<f64>,
    /// Shadow variable (fully observed).
    pub z: Vec<f64>,
    /// Covariate columns; missable columns hold 0 where r = 0.
    pub x: Vec<Vec<f64>>,
    /// Which covariate columns are subject to missingness.
    pub missable: Vec<bool>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        for (name, len) in [
            ("r", self.r.len()),
            ("m", self.m.len()),
            ("y", self.y.len()),
            ("z", self.z.len()),
        ] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    what: match name {
                        "r" => "column r",
                        "m" => "column m",
                        "y" => "column y",
                        _ => "column z",
                    },
                    expected: n,
                    got: len,
                });
            }
        }
        for col in &self.x {
            if col.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "covariate column",
                    expected: n,
                    got: col.len(),
                });
            }
        }
        if self.missable.len() != self.n_covariates() {
            return Err(Error::DimensionMismatch {
                what: "missable flags",
                expected: self.n_covariates(),
                got: self.missable.len(),
            });
        }
        if !self.missable.iter().any(|&f| f) {
            return Err(Error::Data("at least one covariate must be missable".into()));
        }
        if self.t.iter().any(|&t| t > 1) || self.r.iter().any(|&r| r > 1) {
            return Err(Error::Data("treatment and missingness indicators must be 0/1".into()));
        }
        for (i, (m, y)) in self.m.iter().zip(&self.y).enumerate() {
            if !m.is_finite() || !y.is_finite() {
                return Err(Error::Data(format!("non-finite mediator or outcome at row {i}")));
            }
        }
        Ok(())
    }

    /// Zero out missable covariates on rows with r = 0 (the storage convention).
    pub fn apply_mask(&mut self) {
        for (j, col) in self.x.iter_mut().enumerate() {
            if self.missable[j] {
                for (v, &r) in col.iter_mut().zip(&self.r) {
                    if r == 0 {
                        *v = 0.0;
                    }
                }
            }
        }
    }

    pub fn observed_count(&self) -> usize {
        self.r.iter().filter(|&&r| r == 1).count()
    }

    pub fn arm_count(&self, t: u8) -> usize {
        self.t.iter().filter(|&&ti| ti == t).count()
    }

    /// Rows with T = t and R = 1.
    pub fn observed_arm_count(&self, t: u8) -> usize {
        self.t
            .iter()
            .zip(&self.r)
            .filter(|&(&ti, &ri)| ti == t && ri == 1)
            .count()
    }

    /// Covariate vector of row i.
    pub fn x_row(&self, i: usize) -> Vec<f64> {
        self.x.iter().map(|col| col[i]).collect()
    }

    /// Conditioning points (m, y, z, fully observed covariates...) of the
    /// instrument side; masked covariates never enter.
    pub fn instrument_rows(&self) -> Vec<Vec<f64>> {
        let obs_cols: Vec<&Vec<f64>> = self
            .x
            .iter()
            .zip(&self.missable)
            .filter(|(_, &miss)| !miss)
            .map(|(col, _)| col)
            .collect();
        (0..self.len())
            .map(|i| {
                let mut row = Vec::with_capacity(3 + obs_cols.len());
                row.push(self.m[i]);
                row.push(self.y[i]);
                row.push(self.z[i]);
                row.extend(obs_cols.iter().map(|col| col[i]));
                row
            })
            .collect()
    }

    /// Points (m, y, x...) where the inverse-missingness weight lives.
    pub fn weight_rows(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|i| {
                let mut row = Vec::with_capacity(2 + self.n_covariates());
                row.push(self.m[i]);
                row.push(self.y[i]);
                row.extend(self.x.iter().map(|col| col[i]));
                row
            })
            .collect()
    }

    /// Points (m, x...) for the outcome-side fits.
    pub fn mediator_covariate_rows(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|i| {
                let mut row = Vec::with_capacity(1 + self.n_covariates());
                row.push(self.m[i]);
                row.extend(self.x.iter().map(|col| col[i]));
                row
            })
            .collect()
    }

    /// Points (x...) for the covariate-only fits.
    pub fn covariate_rows(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.x_row(i)).collect()
    }

    /// New dataset holding the given rows (used by complete-case analysis and
    /// the pairs bootstrap; indices may repeat).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            r: indices.iter().map(|&i| self.r[i]).collect(),
            t: indices.iter().map(|&i| self.t[i]).collect(),
            m: indices.iter().map(|&i| self.m[i]).collect(),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            z: indices.iter().map(|&i| self.z[i]).collect(),
            x: self
                .x
                .iter()
                .map(|col| indices.iter().map(|&i| col[i]).collect())
                .collect(),
            missable: self.missable.clone(),
        }
    }
}

/// Latent quantities known only to the data-generating process; carried next
/// to a simulated dataset for oracle estimators and diagnostics.
#[derive(Clone, Debug)]
pub struct LatentTruth {
    /// True covariates, including the masked component.
    pub x_star: Vec<Vec<f64>>,
    /// The four structural noise draws.
    pub eps: [Vec<f64>; 4],
    /// Potential mediators under control/treatment.
    pub m0: Vec<f64>,
    pub m1: Vec<f64>,
    /// Potential outcomes Y(t, M(t')).
    pub y00: Vec<f64>,
    pub y10: Vec<f64>,
    pub y01: Vec<f64>,
    pub y11: Vec<f64>,
    /// P(R = 1 | T, M, Y, X*) for each row.
    pub response_prob: Vec<f64>,
}

impl LatentTruth {
    pub fn x_star_row(&self, i: usize) -> Vec<f64> {
        self.x_star.iter().map(|col| col[i]).collect()
    }

    /// Dataset with the true covariates restored and missingness removed.
    pub fn restore(&self, data: &Dataset) -> Dataset {
        Dataset {
            r: vec![1; data.len()],
            t: data.t.clone(),
            m: data.m.clone(),
            y: data.y.clone(),
            z: data.z.clone(),
            x: self.x_star.clone(),
            missable: data.missable.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        Dataset {
            r: vec![1, 0, 1],
            t: vec![0, 1, 1],
            m: vec![0.1, 0.2, 0.3],
            y: vec![1.0, 2.0, 3.0],
            z: vec![0.5, 0.6, 0.7],
            x: vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]],
            missable: vec![true, false],
        }
    }

    #[test]
    fn validate_accepts_consistent_data() {
        assert!(toy().validate().is_ok());
    }

    #[test]
    fn mask_zeroes_missable_columns_only() {
        let mut d = toy();
        d.apply_mask();
        assert_eq!(d.x[0], vec![1.0, 0.0, 3.0]);
        assert_eq!(d.x[1], vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn subset_keeps_row_alignment() {
        let d = toy();
        let s = d.subset(&[2, 0]);
        assert_eq!(s.t, vec![1, 0]);
        assert_eq!(s.x[0], vec![3.0, 1.0]);
    }

    #[test]
    fn validate_rejects_nonbinary_treatment() {
        let mut d = toy();
        d.t[0] = 2;
        assert!(d.validate().is_err());
    }

    #[test]
    fn validate_requires_a_missable_covariate() {
        let mut d = toy();
        d.missable = vec![false, false];
        assert!(matches!(d.validate(), Err(Error::Data(_))));
    }
}
