//! Least-squares conditional expectations on a polynomial basis.
//!
//! Regressors are standardized per coordinate before the monomials are
//! built; coordinates with (numerically) zero variance are dropped, so
//! ensembles driven by a deterministic or degenerate diffusion fall back to
//! lower-dimensional bases, down to the plain sample mean. The normal
//! equations are solved through a symmetric eigendecomposition with a
//! relative cutoff, which keeps rank-deficient designs well defined.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Monomial basis of bounded total degree over the active coordinates of a
/// point cloud.
#[derive(Debug, Clone)]
pub struct PolyBasis {
    /// Indices of the retained (non-constant) coordinates.
    active: Vec<usize>,
    /// Per-active-coordinate affine standardization (mean, scale).
    means: Vec<f64>,
    scales: Vec<f64>,
    /// Exponent multi-indices over the active coordinates.
    exponents: Vec<Vec<u32>>,
}

fn multi_indices(vars: usize, degree: u32) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; vars]];
    for _ in 0..degree {
        let mut next: Vec<Vec<u32>> = Vec::new();
        for e in &out {
            for v in 0..vars {
                let mut f = e.clone();
                f[v] += 1;
                // keep multi-indices nondecreasing in construction order to
                // avoid duplicates
                if f[..v].iter().zip(e[..v].iter()).all(|(a, b)| a == b) {
                    next.push(f);
                }
            }
        }
        for f in next {
            if !out.contains(&f) {
                out.push(f);
            }
        }
    }
    out
}

impl PolyBasis {
    /// Build the basis adapted to the sample cloud `points` (rows are
    /// observations).
    pub fn fit(points: ArrayView2<f64>, degree: u32) -> Result<Self> {
        let rows = points.nrows();
        if rows == 0 {
            return Err(Error::DegenerateBasis("empty sample".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateBasis(
                "non-finite regressor values".into(),
            ));
        }
        let cols = points.ncols();
        let mut active = Vec::new();
        let mut means = Vec::new();
        let mut scales = Vec::new();
        for c in 0..cols {
            let col = points.column(c);
            let mean = col.sum() / rows as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / rows as f64;
            let sd = var.sqrt();
            if sd > 1e-12 * (1.0 + mean.abs()) {
                active.push(c);
                means.push(mean);
                scales.push(sd);
            }
        }
        let exponents = multi_indices(active.len(), degree);
        Ok(PolyBasis {
            active,
            means,
            scales,
            exponents,
        })
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn eval_into(&self, x: ArrayView1<f64>, row: &mut [f64]) {
        let std: Vec<f64> = self
            .active
            .iter()
            .enumerate()
            .map(|(k, &c)| (x[c] - self.means[k]) / self.scales[k])
            .collect();
        for (j, e) in self.exponents.iter().enumerate() {
            let mut v = 1.0;
            for (k, &p) in e.iter().enumerate() {
                for _ in 0..p {
                    v *= std[k];
                }
            }
            row[j] = v;
        }
    }

    pub fn design_matrix(&self, points: ArrayView2<f64>) -> Array2<f64> {
        let mut phi = Array2::zeros((points.nrows(), self.len()));
        for (i, x) in points.rows().into_iter().enumerate() {
            let mut row = vec![0.0; self.len()];
            self.eval_into(x, &mut row);
            for (j, v) in row.into_iter().enumerate() {
                phi[[i, j]] = v;
            }
        }
        phi
    }
}

/// A fitted least-squares regression with possibly several targets.
#[derive(Debug, Clone)]
pub struct RegressionFit {
    pub basis: PolyBasis,
    /// k x m coefficient matrix (k basis functions, m targets).
    pub coefficients: Array2<f64>,
    /// Fitted values at the sample points, P x m.
    pub fitted: Array2<f64>,
    /// Rank retained by the eigenvalue cutoff.
    pub rank: usize,
}

/// Regress every column of `targets` on the polynomial basis in `points`.
pub fn regress(
    points: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    degree: u32,
) -> Result<RegressionFit> {
    let basis = PolyBasis::fit(points, degree)?;
    regress_with_basis(basis, points, targets)
}

pub fn regress_with_basis(
    basis: PolyBasis,
    points: ArrayView2<f64>,
    targets: ArrayView2<f64>,
) -> Result<RegressionFit> {
    let rows = points.nrows();
    if targets.nrows() != rows {
        return Err(Error::Domain(
            "regression points and targets disagree in length".into(),
        ));
    }
    let k = basis.len();
    let phi = basis.design_matrix(points);
    // normal equations solved by symmetric eigendecomposition; small k
    let gram = phi.t().dot(&phi);
    let rhs = phi.t().dot(&targets);
    let gm = nalgebra::DMatrix::from_fn(k, k, |i, j| gram[[i, j]]);
    let eig = nalgebra::SymmetricEigen::new(gm);
    let lambda_max = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    if !(lambda_max.is_finite() && lambda_max > 0.0) {
        return Err(Error::DegenerateBasis(
            "design matrix has no usable column".into(),
        ));
    }
    let cutoff = lambda_max * 1e-12;
    let rank = eig.eigenvalues.iter().filter(|v| **v > cutoff).count();
    let m = targets.ncols();
    let mut coeff = Array2::zeros((k, m));
    for t in 0..m {
        let b = nalgebra::DVector::from_fn(k, |i, _| rhs[[i, t]]);
        // pseudo-inverse through the eigenbasis
        let proj = eig.eigenvectors.transpose() * &b;
        let mut scaled = proj;
        for i in 0..k {
            let ev = eig.eigenvalues[i];
            scaled[i] = if ev > cutoff { scaled[i] / ev } else { 0.0 };
        }
        let beta = &eig.eigenvectors * scaled;
        for i in 0..k {
            coeff[[i, t]] = beta[i];
        }
    }
    let fitted = phi.dot(&coeff);
    Ok(RegressionFit {
        basis,
        coefficients: coeff,
        fitted,
        rank,
    })
}

/// Coefficients plus their OLS standard errors for a single target;
/// used by the drift tests on martingale increments.
pub fn regress_with_errors(
    points: ArrayView2<f64>,
    target: ArrayView1<f64>,
    degree: u32,
) -> Result<(RegressionFit, Array1<f64>)> {
    let t2 = target.insert_axis(ndarray::Axis(1));
    let fit = regress(points, t2.view(), degree)?;
    let rows = points.nrows() as f64;
    let k = fit.basis.len();
    let resid: f64 = (0..points.nrows())
        .map(|i| {
            let r = target[i] - fit.fitted[[i, 0]];
            r * r
        })
        .sum();
    let dof = (rows - k as f64).max(1.0);
    let sigma2 = resid / dof;
    // var(beta) = sigma^2 (Phi^T Phi)^+, diagonal entries
    let phi = fit.basis.design_matrix(points);
    let gram = phi.t().dot(&phi);
    let gm = nalgebra::DMatrix::from_fn(k, k, |i, j| gram[[i, j]]);
    let eig = nalgebra::SymmetricEigen::new(gm);
    let lambda_max = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    let cutoff = lambda_max * 1e-12;
    let mut ses = Array1::zeros(k);
    for i in 0..k {
        let mut diag = 0.0;
        for j in 0..k {
            let ev = eig.eigenvalues[j];
            if ev > cutoff {
                let q = eig.eigenvectors[(i, j)];
                diag += q * q / ev;
            }
        }
        ses[i] = (sigma2 * diag).sqrt();
    }
    Ok((fit, ses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn recovers_polynomials_exactly() {
        let pts = Array2::from_shape_fn((200, 2), |(i, j)| {
            let t = i as f64 / 200.0;
            if j == 0 {
                t * 2.0 - 1.0
            } else {
                (t * 7.0).sin()
            }
        });
        let target = Array2::from_shape_fn((200, 1), |(i, _)| {
            let x = pts[[i, 0]];
            let y = pts[[i, 1]];
            1.5 - 2.0 * x + 0.75 * x * y + y * y * y
        });
        let fit = regress(pts.view(), target.view(), 3).unwrap();
        for i in 0..200 {
            assert!((fit.fitted[[i, 0]] - target[[i, 0]]).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_cloud_falls_back_to_mean() {
        let pts = Array2::from_elem((50, 3), 2.5);
        let target = Array2::from_shape_fn((50, 1), |(i, _)| if i % 2 == 0 { 1.0 } else { 3.0 });
        let fit = regress(pts.view(), target.view(), 3).unwrap();
        assert_eq!(fit.basis.len(), 1); // constant only
        for i in 0..50 {
            assert!((fit.fitted[[i, 0]] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_mean_preservation() {
        // with an intercept in the basis, fitted values average to the
        // target average
        let pts = Array2::from_shape_fn((101, 1), |(i, _)| (i as f64 * 0.37).sin());
        let target =
            Array2::from_shape_fn((101, 1), |(i, _)| (i as f64 * 0.11).cos() * 2.0 + 0.3);
        let fit = regress(pts.view(), target.view(), 3).unwrap();
        let mt = target.sum() / 101.0;
        let mf = fit.fitted.sum() / 101.0;
        assert!((mt - mf).abs() < 1e-12);
    }

    #[test]
    fn degenerate_design_is_reported() {
        let pts = Array2::from_elem((4, 1), f64::NAN);
        let target = array![[1.0], [2.0], [3.0], [4.0]];
        assert!(matches!(
            regress(pts.view(), target.view(), 2),
            Err(Error::DegenerateBasis(_)) | Err(Error::Domain(_))
        ));
    }

    #[test]
    fn coefficient_errors_scale_with_noise() {
        let pts = Array2::from_shape_fn((400, 1), |(i, _)| (i as f64 % 20.0) / 10.0 - 1.0);
        let target = Array1::from_shape_fn(400, |i| if i % 2 == 0 { 0.1 } else { -0.1 });
        let (fit, ses) = regress_with_errors(pts.view(), target.view(), 1).unwrap();
        assert_eq!(fit.basis.len(), 2);
        assert!(ses.iter().all(|s| *s > 0.0 && *s < 0.05));
    }
}
