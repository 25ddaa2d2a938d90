//! Weighted least squares with QR, rank diagnostics and sandwich covariances.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance under which a column is treated as a linear combination
/// of the columns before it.
const RANK_TOL: f64 = 1e-10;

/// Names of columns that are (numerically) linear combinations of earlier
/// columns, found by modified Gram-Schmidt on the weighted design.
pub fn dependent_columns(x: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..x.ncols() {
        let mut v = x.column(j).into_owned();
        let norm0 = v.norm();
        for q in &basis {
            let r = q.dot(&v);
            v.axpy(-r, q, 1.0);
        }
        let norm = v.norm();
        if norm0 == 0.0 || norm <= RANK_TOL * norm0.max(1.0) {
            dependent.push(names.get(j).cloned().unwrap_or_else(|| format!("col{j}")));
        } else {
            basis.push(v / norm);
        }
    }
    dependent
}

#[derive(Debug, Clone)]
pub struct WlsFit {
    pub coef: DVector<f64>,
    /// `(X'WX)^-1`
    pub bread: DMatrix<f64>,
    pub residuals: DVector<f64>,
    pub weights: DVector<f64>,
    pub design: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy)]
pub enum Covariance<'a> {
    /// `s² (X'WX)^-1` with `s² = Σ w e² / (n - k)`.
    Classical,
    /// Eicker-Huber-White, no small-sample factor.
    Hc0,
    /// HC0 scaled by `n / (n - k)`.
    Hc1,
    /// Cluster-robust with the usual `G/(G-1) · (n-1)/(n-k)` factor; one
    /// cluster label per row.
    Cluster(&'a [usize]),
}

/// Solve `min Σ w_i (y_i - x_i'b)²`. Rows with zero weight are kept in the
/// design (they contribute nothing).
pub fn wls(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>, names: &[String]) -> Result<WlsFit> {
    assert_eq!(x.nrows(), y.len());
    assert_eq!(x.nrows(), w.len());
    for (i, &wi) in w.iter().enumerate() {
        if wi < 0.0 || !wi.is_finite() {
            return Err(Error::NegativeWeight { firm: format!("row {i}"), weight: wi });
        }
    }
    let sw = w.map(f64::sqrt);
    let mut xs = x.clone();
    for (mut row, s) in xs.row_iter_mut().zip(sw.iter()) {
        row *= *s;
    }
    let dep = dependent_columns(&xs, names);
    if !dep.is_empty() {
        return Err(Error::RankDeficient(dep));
    }
    let ys = y.component_mul(&sw);
    let qr = xs.qr();
    let r = qr.r();
    let qty = qr.q().transpose() * &ys;
    let coef = r.solve_upper_triangular(&qty).ok_or_else(|| Error::RankDeficient(names.to_vec()))?;
    let k = x.ncols();
    let rinv =
        r.solve_upper_triangular(&DMatrix::identity(k, k)).ok_or_else(|| Error::RankDeficient(names.to_vec()))?;
    let bread = &rinv * rinv.transpose();
    let residuals = y - x * &coef;
    Ok(WlsFit { coef, bread, residuals, weights: w.clone(), design: x.clone() })
}

impl WlsFit {
    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    pub fn k(&self) -> usize {
        self.design.ncols()
    }

    pub fn covariance(&self, kind: Covariance<'_>) -> DMatrix<f64> {
        let n = self.n() as f64;
        let k = self.k() as f64;
        match kind {
            Covariance::Classical => {
                let s2 = self.residuals.iter().zip(self.weights.iter()).map(|(e, w)| w * e * e).sum::<f64>() / (n - k);
                &self.bread * s2
            }
            Covariance::Hc0 | Covariance::Hc1 => {
                let mut meat = DMatrix::zeros(self.k(), self.k());
                for (i, row) in self.design.row_iter().enumerate() {
                    let s = self.weights[i] * self.residuals[i];
                    let g = row.transpose() * s;
                    meat += &g * g.transpose();
                }
                let factor = if matches!(kind, Covariance::Hc1) { n / (n - k) } else { 1.0 };
                &self.bread * meat * &self.bread * factor
            }
            Covariance::Cluster(labels) => {
                assert_eq!(labels.len(), self.n());
                let mut sums: std::collections::BTreeMap<usize, DVector<f64>> = Default::default();
                for (i, row) in self.design.row_iter().enumerate() {
                    let s = self.weights[i] * self.residuals[i];
                    let g = row.transpose() * s;
                    sums.entry(labels[i]).and_modify(|acc| *acc += &g).or_insert(g);
                }
                let g_count = sums.len() as f64;
                let mut meat = DMatrix::zeros(self.k(), self.k());
                for g in sums.values() {
                    meat += g * g.transpose();
                }
                let factor = if g_count > 1.0 { g_count / (g_count - 1.0) * (n - 1.0) / (n - k) } else { 1.0 };
                &self.bread * meat * &self.bread * factor
            }
        }
    }

    pub fn std_errors(&self, kind: Covariance<'_>) -> DVector<f64> {
        self.covariance(kind).diagonal().map(|v| v.max(0.0).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|j| format!("x{j}")).collect()
    }

    #[test]
    fn exact_line_is_recovered() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y = DVector::from_vec(vec![1.0, 3.0, 5.0, 7.0]);
        let w = DVector::from_element(4, 1.0);
        let fit = wls(&x, &y, &w, &names(2)).unwrap();
        assert!((fit.coef[0] - 1.0).abs() < 1e-12);
        assert!((fit.coef[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_column_is_named() {
        let x = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 2.0, 1.0, 2.0, 3.0, 1.0, 3.0, 4.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let w = DVector::from_element(3, 1.0);
        match wls(&x, &y, &w, &names(3)) {
            Err(Error::RankDeficient(cols)) => assert_eq!(cols, vec!["x2".to_string()]),
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn negative_weight_rejected() {
        let x = DMatrix::from_element(2, 1, 1.0);
        let y = DVector::from_vec(vec![1.0, 2.0]);
        let w = DVector::from_vec(vec![1.0, -1.0]);
        assert!(matches!(wls(&x, &y, &w, &names(1)), Err(Error::NegativeWeight { .. })));
    }
}
