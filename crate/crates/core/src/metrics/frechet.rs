use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::MetricsError;

/// Mean and covariance of a feature cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

/// Sample mean and unbiased covariance of the rows, symmetrised.
pub fn fit_gaussian(rows: &[Vec<f64>]) -> Result<GaussianSummary, MetricsError> {
    if rows.len() < 2 {
        return Err(MetricsError::InsufficientSamples(rows.len()));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(MetricsError::DimMismatch("ragged feature rows".into()));
    }
    let n = rows.len();
    let mut mean = DVector::zeros(d);
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean /= n as f64;
    let mut centred = DMatrix::zeros(n, d);
    for (i, r) in rows.iter().enumerate() {
        for j in 0..d {
            centred[(i, j)] = r[j] - mean[j];
        }
    }
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianSummary { mean, cov, count: n })
}

/// Principal square root of a symmetric positive semi-definite matrix.
/// Eigenvalues down to `-1e-8` are treated as zero.
pub fn matrix_sqrt_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricsError> {
    if !a.is_square() {
        return Err(MetricsError::DimMismatch(format!("{}x{} is not square", a.nrows(), a.ncols())));
    }
    let asym = (a - a.transpose()).norm();
    if asym > 1e-9 * a.norm().max(1.0) {
        return Err(MetricsError::NotSymmetric(asym));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if let Some(min) = eig.eigenvalues.iter().cloned().reduce(f64::min) {
        if min < -1e-8 * a.norm().max(1.0) {
            return Err(MetricsError::NotPositiveSemidefinite(min));
        }
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let r = q * DMatrix::from_diagonal(&roots) * q.transpose();
    Ok((&r + r.transpose()) * 0.5)
}

/// `|m1 - m2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`, clamped at zero.
pub fn frechet_distance(g1: &GaussianSummary, g2: &GaussianSummary) -> Result<f64, MetricsError> {
    if g1.mean.len() != g2.mean.len() {
        return Err(MetricsError::DimMismatch(format!("{} vs {}", g1.mean.len(), g2.mean.len())));
    }
    let diff = (&g1.mean - &g2.mean).norm_squared();
    // (S1 S2)^(1/2) shares its trace with (sqrt(S1) S2 sqrt(S1))^(1/2), which is symmetric.
    let s1 = matrix_sqrt_psd(&g1.cov)?;
    let inner = &s1 * &g2.cov * &s1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = matrix_sqrt_psd(&inner)?.trace();
    Ok((diff + g1.cov.trace() + g2.cov.trace() - 2.0 * cross).max(0.0))
}
