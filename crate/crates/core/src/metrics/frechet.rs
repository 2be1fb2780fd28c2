use nalgebra::{DMatrix, DVector};

use crate::error::{config_err, Error, Result};

/// Added to both covariance diagonals before the matrix square root.
pub const COV_REGULARIZER: f64 = 1e-6;

/// Sample mean and unbiased covariance (with the diagonal regularizer).
pub fn gaussian_fit(xs: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if xs.len() < 2 {
        return Err(config_err("a Gaussian fit needs at least 2 samples"));
    }
    let d = xs[0].len();
    if xs.iter().any(|x| x.len() != d) {
        return Err(Error::Dimension { expected: d, got: xs.iter().map(Vec::len).find(|l| *l != d).unwrap_or(d) });
    }
    let n = xs.len() as f64;
    let mut mean = DVector::zeros(d);
    for x in xs {
        mean += DVector::from_column_slice(x);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for x in xs {
        let c = DVector::from_column_slice(x) - &mean;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    for i in 0..d {
        cov[(i, i)] += COV_REGULARIZER;
    }
    Ok((mean, cov))
}

/// 2-Wasserstein distance between Gaussian fits of the two sample sets.
///
/// The trace of `(C1^{1/2} C2 C1^{1/2})^{1/2}` is the sum of square roots of
/// the eigenvalues of `C1 C2`, which are real and nonnegative.
pub fn frechet_raw(gen: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    let (m1, c1) = gaussian_fit(gen)?;
    let (m2, c2) = gaussian_fit(reference)?;
    if m1.len() != m2.len() {
        return Err(Error::Dimension { expected: m2.len(), got: m1.len() });
    }
    let cross: f64 = (&c1 * &c2).complex_eigenvalues().iter().map(|z| z.re.max(0.0).sqrt()).sum();
    let w2 = (&m1 - &m2).norm_squared() + c1.trace() + c2.trace() - 2.0 * cross;
    let w = w2.max(0.0).sqrt();
    if !w.is_finite() {
        return Err(Error::NonFinite { context: "frechet_raw".into() });
    }
    Ok(w)
}
