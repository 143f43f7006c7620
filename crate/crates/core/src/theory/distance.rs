//! Closed-form distances between Gaussians.

use super::symmetrize;
use crate::error::{domain_err, shape_err, Result};
use crate::linalg::{matmul, psd_sqrt, spd_inverse_logdet, sym_eig, Matrix, Vector, SYMMETRY_TOL};

/// Relative eigenvalue floor below which a covariance counts as singular.
const SINGULAR_REL: f64 = 1e-12;

fn check_gaussian(mu: &Vector, sigma: &Matrix, k: usize) -> Result<()> {
    if mu.len() != k || sigma.shape() != (k, k) {
        return shape_err(format!("Gaussian in dimension {k} got mean {} and covariance {:?}", mu.len(), sigma.shape()));
    }
    if !sigma.is_symmetric(SYMMETRY_TOL) {
        return domain_err("covariance is not symmetric");
    }
    Ok(())
}

/// Any `W_p` between Gaussians sharing a covariance is the mean distance.
pub fn wp_equal_cov(mu_i: &Vector, mu0: &Vector) -> Result<f64> {
    if mu_i.len() != mu0.len() {
        return shape_err(format!("means of length {} and {}", mu_i.len(), mu0.len()));
    }
    Ok(mu_i.sub(mu0).l2_norm())
}

/// `W₂² = ‖Δμ‖² + tr(Σ₁ + Σ₂ − 2(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
pub fn w2_gaussian(mu1: &Vector, sigma1: &Matrix, mu2: &Vector, sigma2: &Matrix) -> Result<f64> {
    let k = mu1.len();
    check_gaussian(mu1, sigma1, k)?;
    check_gaussian(mu2, sigma2, k)?;
    let r1 = psd_sqrt(sigma1)?;
    let mut inner = matmul(&matmul(&r1, sigma2)?, &r1)?;
    symmetrize(&mut inner);
    let cross = psd_sqrt(&inner)?.trace();
    psd_sqrt(sigma2)?;
    let bures = (sigma1.trace() + sigma2.trace() - 2.0 * cross).max(0.0);
    let dm = mu1.sub(mu2).l2_norm();
    Ok((dm * dm + bures).sqrt())
}

/// `KL(N(μ₁, Σ₁) ‖ N(μ₀, Σ₀))`; `+∞` when `Σ₁` is singular.
pub fn kl_gaussian(mu1: &Vector, sigma1: &Matrix, mu0: &Vector, sigma0: &Matrix) -> Result<f64> {
    let k = mu1.len();
    check_gaussian(mu1, sigma1, k)?;
    check_gaussian(mu0, sigma0, k)?;
    let (inv0, logdet0) = spd_inverse_logdet(sigma0)?;
    let e1 = sym_eig(sigma1)?;
    let max = e1.eigenvalues.first().copied().unwrap_or(0.0).abs();
    let min = e1.eigenvalues.last().copied().unwrap_or(0.0);
    if min <= SINGULAR_REL * max.max(f64::MIN_POSITIVE) {
        return Ok(f64::INFINITY);
    }
    let logdet1: f64 = e1.eigenvalues.iter().map(|l| l.ln()).sum();
    let trace = matmul(&inv0, sigma1)?.trace();
    let dm = mu1.sub(mu0);
    let quad: f64 = dm.dot(&Vector::new(inv0.matvec(&dm)?)?);
    Ok(0.5 * (logdet0 - logdet1 - k as f64 + trace + quad))
}
