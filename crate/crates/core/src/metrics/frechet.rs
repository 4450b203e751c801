//! Gaussian Fréchet distance between pooled motion frames.

use alloc::format;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Covariance regulariser added to both sides.
pub const FD_EPS: f64 = 1e-6;

/// Mean and unbiased covariance of `n x d` row-major frames, plus `eps * I`.
pub fn moments(frames: &[f64], dim: usize, eps: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if dim == 0 || frames.len() % dim != 0 {
        return Err(Error::Invalid(format!("{} values do not form rows of {dim}", frames.len())));
    }
    let n = frames.len() / dim;
    if n < 2 {
        return Err(Error::Invalid(format!("need at least 2 frames, got {n}")));
    }
    let x = DMatrix::from_row_slice(n, dim, frames);
    let mu = x.row_mean().transpose();
    let mut c = x;
    for mut row in c.row_iter_mut() {
        row -= mu.transpose();
    }
    let mut cov = c.transpose() * &c / (n as f64 - 1.0);
    for i in 0..dim {
        cov[(i, i)] += eps;
    }
    Ok((mu, cov))
}

/// Symmetric PSD square root with negative eigenvalues clipped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| libm::sqrt(v.max(0.0)));
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `||mu_g - mu_r||^2 + Tr(S_g + S_r - 2 (S_g S_r)^{1/2})`.
///
/// The trace of `(S_g S_r)^{1/2}` equals that of `(R S_g R)^{1/2}` with
/// `R = S_r^{1/2}`, which is symmetric and so has a stable square root.
pub fn frechet_from_moments(mu_g: &DVector<f64>, s_g: &DMatrix<f64>, mu_r: &DVector<f64>, s_r: &DMatrix<f64>) -> f64 {
    let r = sqrtm_psd(s_r);
    let inner = &r * s_g * &r;
    let cross = sqrtm_psd(&inner).trace();
    let d = mu_g - mu_r;
    (d.dot(&d) + s_g.trace() + s_r.trace() - 2.0 * cross).max(0.0)
}

/// Frechet distance between two pooled frame sets of width `dim`.
pub fn frechet_distance(gen: &[f64], gt: &[f64], dim: usize) -> Result<f64> {
    let (mg, sg) = moments(gen, dim, FD_EPS)?;
    let (mr, sr) = moments(gt, dim, FD_EPS)?;
    Ok(frechet_from_moments(&mg, &sg, &mr, &sr))
}

/// Frames fewer than dims make the raw covariance rank deficient.
pub fn rank_deficient(frames: usize, dim: usize) -> bool {
    frames <= dim
}
