//! Mixture posterior built by the dimension-reduction component, and its sampler.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result};
use crate::linalg::{matmul_nt, sym_eig, Matrix, Vector};

/// Per-sample latent mixture `η N(μ₁, Σ₁) + (1−η) N(μ₂, Σ₂)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixturePosterior {
    pub mu1: Vector,
    pub mu2: Vector,
    /// Inlier factor after spectral truncation.
    pub m1: Matrix,
    pub m2: Matrix,
    pub sigma1: Matrix,
    pub sigma2: Matrix,
    pub eta: f64,
}

/// `Aᵀ diag(s) A` for a D′×d matrix `A`.
pub fn diag_sandwich(a: &Matrix, s: &[f64]) -> Matrix {
    let d = a.cols();
    let mut out = Matrix::zeros(d, d);
    for (m, &w) in s.iter().enumerate() {
        let row = a.row(m);
        for j in 0..d {
            for k in 0..d {
                out[(j, k)] += w * row[j] * row[k];
            }
        }
    }
    out
}

/// Zeroes the `d − keep` smallest eigenvalues (signed, after a descending
/// sort) and resynthesizes `U diag(σ̃) Uᵀ`.
pub fn truncate_spectrum(m: &Matrix, keep: usize) -> Result<Matrix> {
    let mut sym = m.clone();
    let d = sym.rows();
    for r in 0..d {
        for c in r + 1..d {
            let avg = 0.5 * (sym[(r, c)] + sym[(c, r)]);
            sym[(r, c)] = avg;
            sym[(c, r)] = avg;
        }
    }
    let e = sym_eig(&sym)?;
    Ok(e.synthesize(|i, l| if i < keep { l } else { 0.0 }))
}

/// `M Mᵀ + I`.
pub fn factor_to_cov(m: &Matrix) -> Matrix {
    let mut s = matmul_nt(m, m);
    for i in 0..s.rows() {
        s[(i, i)] += 1.0;
    }
    s
}

/// Maps encoder features to the latent mixture. With `truncate` the inlier
/// factor keeps only its top d/2 eigenvalues.
pub fn reduce(mu01: &Vector, mu02: &Vector, s01: &Vector, s02: &Vector, a: &Matrix, eta: f64, truncate: bool) -> Result<MixturePosterior> {
    let p = a.rows();
    if [mu01.len(), mu02.len(), s01.len(), s02.len()].iter().any(|&n| n != p) {
        return shape_err(format!("encoder features must have length {p} to match A"));
    }
    let at = a.transpose();
    let mu1 = Vector::new(at.matvec(mu01)?)?;
    let mu2 = Vector::new(at.matvec(mu02)?)?;
    let full1 = diag_sandwich(a, s01);
    let m1 = if truncate { truncate_spectrum(&full1, a.cols() / 2)? } else { full1 };
    let m2 = diag_sandwich(a, s02);
    let sigma1 = factor_to_cov(&m1);
    let sigma2 = factor_to_cov(&m2);
    Ok(MixturePosterior { mu1, mu2, m1, m2, sigma1, sigma2, eta })
}

/// Draws `t` latent points. Each draw picks the inlier mode (label 1) with
/// probability η, otherwise the outlier mode (label 2), and returns
/// `μⱼ + Mⱼε₁ + ε₂`.
pub fn sample_latent<R: Rng + ?Sized>(post: &MixturePosterior, t: usize, rng: &mut R) -> (Vec<Vector>, Vec<u8>) {
    let d = post.mu1.len();
    let mut zs = Vec::with_capacity(t);
    let mut labels = Vec::with_capacity(t);
    for _ in 0..t {
        let inlier = rng.gen::<f64>() < post.eta;
        let eps1: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let eps2: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let (mu, m) = if inlier { (&post.mu1, &post.m1) } else { (&post.mu2, &post.m2) };
        let me = m.matvec(&eps1).expect("latent factor shape");
        let z: Vec<f64> = (0..d).map(|i| mu[i] + me[i] + eps2[i]).collect();
        zs.push(Vector::new(z).expect("finite sample"));
        labels.push(if inlier { 1 } else { 2 });
    }
    (zs, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn a3x2() -> Matrix {
        Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap()
    }

    fn v(x: &[f64]) -> Vector {
        Vector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn truncates_smallest_eigenvalue() {
        let z = v(&[0.0, 0.0, 0.0]);
        let p = reduce(&z, &z, &v(&[4.0, 1.0, 9.0]), &z, &a3x2(), 5.0 / 6.0, true).unwrap();
        assert!(p.m1.max_abs_diff(&Matrix::diag(&[4.0, 0.0])) < 1e-12);
        assert!(p.sigma1.max_abs_diff(&Matrix::diag(&[17.0, 1.0])) < 1e-12);
        assert_eq!(p.mu1.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn truncation_uses_signed_values() {
        let z = v(&[0.0, 0.0, 0.0]);
        let p = reduce(&z, &z, &v(&[-5.0, 2.0, 0.0]), &z, &a3x2(), 5.0 / 6.0, true).unwrap();
        assert!(p.m1.max_abs_diff(&Matrix::diag(&[0.0, 2.0])) < 1e-12);
        assert!(p.sigma1.max_abs_diff(&Matrix::diag(&[1.0, 5.0])) < 1e-12);
    }

    #[test]
    fn same_rank_skips_truncation() {
        let z = v(&[0.0, 0.0, 0.0]);
        let p = reduce(&z, &z, &v(&[4.0, 1.0, 9.0]), &z, &a3x2(), 5.0 / 6.0, false).unwrap();
        assert!(p.m1.max_abs_diff(&Matrix::diag(&[4.0, 1.0])) < 1e-12);
    }

    #[test]
    fn reduce_checks_shapes() {
        let z = v(&[0.0, 0.0]);
        assert!(reduce(&z, &z, &z, &z, &a3x2(), 0.8, true).is_err());
    }

    #[test]
    fn eta_one_gives_inlier_labels() {
        let z = v(&[0.0, 0.0, 0.0]);
        let p = reduce(&z, &z, &z, &z, &a3x2(), 1.0, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, labels) = sample_latent(&p, 1000, &mut rng);
        assert!(labels.iter().all(|&l| l == 1));
    }

    #[test]
    fn zero_factors_give_standard_normal() {
        let z = v(&[0.0, 0.0, 0.0]);
        let mut p = reduce(&z, &z, &z, &z, &a3x2(), 5.0 / 6.0, true).unwrap();
        p.eta = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let (zs, _) = sample_latent(&p, n, &mut rng);
        let mut cov = [[0.0; 2]; 2];
        for z in &zs {
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] += z[i] * z[j] / n as f64;
                }
            }
        }
        // z = ε₁·0 + ε₂, so Cov = I
        assert!((cov[0][0] - 1.0).abs() < 0.03 && (cov[1][1] - 1.0).abs() < 0.03);
        assert!(cov[0][1].abs() < 0.03);
    }
}
