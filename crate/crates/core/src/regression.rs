//! Polynomial least-squares regression for conditional expectations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Exponent tuples of all monomials in `d` variables with total degree <= `degree`.
pub fn monomial_exponents(d: usize, degree: usize) -> Vec<Vec<usize>> {
    fn rec(d: usize, degree: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if d == 0 {
            out.push(prefix.clone());
            return;
        }
        let used: usize = prefix.iter().sum();
        for e in 0..=(degree - used) {
            prefix.push(e);
            rec(d - 1, degree, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(d, degree, &mut Vec::new(), &mut out);
    out
}

/// Evaluates the monomial basis at a point.
pub fn features(x: &[f64], exponents: &[Vec<usize>]) -> Vec<f64> {
    exponents
        .iter()
        .map(|e| {
            let mut v = 1.0;
            for (xi, &p) in x.iter().zip(e) {
                for _ in 0..p {
                    v *= xi;
                }
            }
            v
        })
        .collect()
}

/// Ordinary least squares fit with standard errors for fitted values.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coeffs: DVector<f64>,
    pub residual_std: f64,
    xtx_inv: DMatrix<f64>,
    pub n: usize,
}

impl OlsFit {
    pub fn predict(&self, phi: &[f64]) -> f64 {
        phi.iter().zip(self.coeffs.iter()).map(|(a, b)| a * b).sum()
    }

    /// Standard error of the fitted conditional mean at a feature vector.
    pub fn prediction_se(&self, phi: &[f64]) -> f64 {
        let p = DVector::from_column_slice(phi);
        let v = (p.transpose() * &self.xtx_inv * &p)[0].max(0.0);
        self.residual_std * v.sqrt()
    }
}

/// Fits `y ~ design * beta`; errors out when the design is rank-deficient.
pub fn ols(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit> {
    let n = design.nrows();
    let m = design.ncols();
    if n < m {
        return Err(Error::Statistics { needed: m, got: n });
    }
    let xtx = design.transpose() * design;
    let svd = xtx.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * (m as f64);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < m {
        return Err(Error::Basis { rank, cols: m });
    }
    let xty = design.transpose() * y;
    let coeffs = svd
        .solve(&xty, tol)
        .map_err(|_| Error::Basis { rank, cols: m })?;
    let resid = y - design * &coeffs;
    let dof = (n - m).max(1);
    let residual_std = (resid.norm_squared() / dof as f64).sqrt();
    let xtx_inv = xtx.try_inverse().ok_or(Error::Basis { rank, cols: m })?;
    Ok(OlsFit {
        coeffs,
        residual_std,
        xtx_inv,
        n,
    })
}

/// Convenience: regress scalar targets on the polynomial basis in `xs`.
pub fn poly_regression(
    xs: &[Vec<f64>],
    ys: &[f64],
    degree: usize,
) -> Result<(OlsFit, Vec<Vec<usize>>)> {
    let d = xs.first().map(|v| v.len()).unwrap_or(0);
    let exps = monomial_exponents(d, degree);
    let m = exps.len();
    let mut design = DMatrix::zeros(xs.len(), m);
    for (i, x) in xs.iter().enumerate() {
        let phi = features(x, &exps);
        for (j, v) in phi.iter().enumerate() {
            design[(i, j)] = *v;
        }
    }
    let y = DVector::from_column_slice(ys);
    Ok((ols(&design, &y)?, exps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_sizes() {
        assert_eq!(monomial_exponents(1, 2).len(), 3);
        assert_eq!(monomial_exponents(2, 2).len(), 6);
    }

    #[test]
    fn exact_quadratic_recovery() {
        let xs: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 * 0.1 - 2.5]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 + 2.0 * x[0] - 0.5 * x[0] * x[0]).collect();
        let (fit, exps) = poly_regression(&xs, &ys, 2).unwrap();
        let phi = features(&[0.7], &exps);
        assert!((fit.predict(&phi) - (1.0 + 1.4 - 0.245)).abs() < 1e-10);
        assert!(fit.residual_std < 1e-10);
    }

    #[test]
    fn rank_deficiency_detected() {
        // duplicate column
        let design = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]);
        let y = DVector::from_column_slice(&[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(ols(&design, &y), Err(Error::Basis { .. })));
    }
}
