//! Closed-form Gaussian distances, the two-mode barycenter problem and its
//! analytic minimizers, plus numerical oracles that check them.
//!
//! The problem: given a reference `N(μ₀, Σ₀)`, find two Gaussians with
//! `‖μ₁ − μ₂‖ = ε` minimizing `η·R(N₁, N₀) + (1 − η)·R(N₂, N₀)`. Minimizer
//! directions are free; every solver here fixes them to the first axis.

mod distance;
mod oracle;
mod report;

pub use distance::{kl_gaussian, w2_gaussian, wp_equal_cov};
pub use oracle::{brute_force_bary, empirical_w1, nelder_mead, BruteForceConfig, NelderMead, NmResult};
pub use report::{
    gaussian_samples, random_low_rank_problems, shared_cov_grid, verification_report, InstanceCheck, PropositionCheck,
    TheoryReport,
};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Error, Result};
use crate::linalg::{matmul, Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Regularizer {
    /// `W_p` for some `p ≥ 1`; only the shared-covariance case has a closed form.
    Wp { p: f64 },
    W2,
    Kl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovConstraint {
    /// `Σ₁ = Σ₂ = Σ₀`.
    Shared,
    /// `Σ₁` has rank `κ`, `Σ₂` is full rank.
    LowRankInlier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryProblem {
    pub k: usize,
    pub kappa: usize,
    pub eps: f64,
    pub eta: f64,
    pub mu0: Vector,
    pub sigma0: Matrix,
    pub regularizer: Regularizer,
    pub constraint: CovConstraint,
}

impl TheoryProblem {
    /// Reference `N(0, I_K)`.
    pub fn standard(k: usize, kappa: usize, eps: f64, eta: f64, regularizer: Regularizer, constraint: CovConstraint) -> Self {
        Self { k, kappa, eps, eta, mu0: Vector::zeros(k), sigma0: Matrix::identity(k), regularizer, constraint }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return domain_err("dimension K must be positive");
        }
        if self.mu0.len() != self.k || self.sigma0.shape() != (self.k, self.k) {
            return Err(Error::Shape(format!("reference must live in dimension K={}", self.k)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return domain_err(format!("separation ε must be positive, got {}", self.eps));
        }
        if !(self.eta > 0.5 && self.eta < 1.0) {
            return domain_err(format!("η must lie in (0.5, 1), got {}", self.eta));
        }
        if self.constraint == CovConstraint::LowRankInlier {
            if !(self.kappa >= 1 && self.kappa < self.k) {
                return domain_err(format!("inlier rank must satisfy 1 ≤ κ < K, got κ={}, K={}", self.kappa, self.k));
            }
            if self.mu0.l2_norm() != 0.0 || self.sigma0 != Matrix::identity(self.k) {
                return domain_err("the low-rank problem is posed against N(0, I)");
            }
        }
        if let Regularizer::Wp { p } = self.regularizer {
            if !(p >= 1.0) {
                return domain_err(format!("W_p needs p ≥ 1, got {p}"));
            }
            if self.constraint != CovConstraint::Shared {
                return domain_err("W_p has a closed form only for shared covariance");
            }
        }
        Ok(())
    }

    /// Regularizer between `N(μ, Σ)` and the reference.
    pub fn distance(&self, mu: &Vector, sigma: &Matrix) -> Result<f64> {
        match self.regularizer {
            Regularizer::Wp { .. } => wp_equal_cov(mu, &self.mu0),
            Regularizer::W2 => w2_gaussian(mu, sigma, &self.mu0, &self.sigma0),
            Regularizer::Kl => kl_gaussian(mu, sigma, &self.mu0, &self.sigma0),
        }
    }

    pub fn objective(&self, mu1: &Vector, sigma1: &Matrix, mu2: &Vector, sigma2: &Matrix) -> Result<f64> {
        Ok(self.eta * self.distance(mu1, sigma1)? + (1.0 - self.eta) * self.distance(mu2, sigma2)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheorySolution {
    pub mu1: Vector,
    pub mu2: Vector,
    pub sigma1: Matrix,
    pub sigma2: Matrix,
    pub objective: f64,
    /// Colinearity parameter `⟨μ₁ − μ₀, e₁⟩ / ε`.
    pub u: Option<f64>,
}

/// Analytic minimizer with shared covariance. Under `W_p` the inlier mean
/// sits on the reference mean; under KL the reference mean is the
/// η-weighted average of the two means.
pub fn solve_shared_cov(problem: &TheoryProblem) -> Result<TheorySolution> {
    problem.validate()?;
    if problem.constraint != CovConstraint::Shared {
        return domain_err("solve_shared_cov needs the shared-covariance constraint");
    }
    let (k, eps, eta) = (problem.k, problem.eps, problem.eta);
    let (t1, t2) = match problem.regularizer {
        Regularizer::Wp { .. } => (0.0, eps),
        Regularizer::Kl => ((1.0 - eta) * eps, -eta * eps),
        Regularizer::W2 => return domain_err("shared covariance is solved for W_p and KL"),
    };
    let mu1 = problem.mu0.add(&Vector::basis(k, 0, t1));
    let mu2 = problem.mu0.add(&Vector::basis(k, 0, t2));
    let sigma = problem.sigma0.clone();
    let objective = problem.objective(&mu1, &sigma, &mu2, &sigma)?;
    Ok(TheorySolution { mu1, mu2, sigma1: sigma.clone(), sigma2: sigma, objective, u: Some(t1 / eps) })
}

/// Squared low-rank objective as a function of the colinearity parameter:
/// `(K−κ)((1−η)|(u−1)/u| + η)² + ε²(η|u| + (1−η)|u−1|)²`.
pub fn scalar_objective_f(u: f64, k: usize, kappa: usize, eps: f64, eta: f64) -> Result<f64> {
    if u == 0.0 {
        return domain_err("f has a pole at u = 0");
    }
    let r = (k - kappa.min(k)) as f64;
    let a = (1.0 - eta) * ((u - 1.0) / u).abs() + eta;
    let b = eta * u.abs() + (1.0 - eta) * (u - 1.0).abs();
    Ok(r * a * a + eps * eps * b * b)
}

/// Smallest η for which the low-rank closed form holds.
pub fn eta_star(k: usize, kappa: usize, eps: f64) -> f64 {
    let r = (k - kappa) as f64;
    (r + eps * eps) / (r + 2.0 * eps * eps)
}

pub fn u_star(k: usize, kappa: usize, eps: f64, eta: f64) -> f64 {
    let r = (k - kappa) as f64;
    (r * (1.0 - eta) / (eps * eps * (2.0 * eta - 1.0))).cbrt()
}

/// Analytic W2 minimizer with a rank-κ inlier covariance against `N(0, I_K)`.
pub fn prop2_analytic(k: usize, kappa: usize, eps: f64, eta: f64) -> Result<TheorySolution> {
    let problem = TheoryProblem::standard(k, kappa, eps, eta, Regularizer::W2, CovConstraint::LowRankInlier);
    problem.validate()?;
    let threshold = eta_star(k, kappa, eps);
    if eta <= threshold {
        return Err(Error::OutOfRegime(format!("η={eta} ≤ η★={threshold}")));
    }
    let u = u_star(k, kappa, eps, eta);
    let mu1 = Vector::basis(k, 0, u * eps);
    let mu2 = Vector::basis(k, 0, -(1.0 - u) * eps);
    let d1: Vec<f64> = (0..k).map(|i| if i < kappa { 1.0 } else { 0.0 }).collect();
    let d2: Vec<f64> = (0..k).map(|i| if i < kappa { 1.0 } else { 1.0 / (u * u) }).collect();
    let (sigma1, sigma2) = (Matrix::diag(&d1), Matrix::diag(&d2));
    let objective = problem.objective(&mu1, &sigma1, &mu2, &sigma2)?;
    Ok(TheorySolution { mu1, mu2, sigma1, sigma2, objective, u: Some(u) })
}

/// Random SPD matrix `Q diag(λ) Qᵀ` with eigenvalues uniform in `range`.
pub fn random_spd<R: Rng + ?Sized>(k: usize, range: (f64, f64), rng: &mut R) -> Matrix {
    let q = random_orthogonal(k, rng);
    let lambda: Vec<f64> = (0..k).map(|_| rng.gen_range(range.0..=range.1)).collect();
    let ql = matmul(&q, &Matrix::diag(&lambda)).expect("square");
    let mut s = matmul(&ql, &q.transpose()).expect("square");
    symmetrize(&mut s);
    s
}

pub(crate) fn random_orthogonal<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Matrix {
    let mut q = Matrix::zeros(k, k);
    let mut j = 0;
    while j < k {
        let mut v: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        for c in 0..j {
            let p: f64 = (0..k).map(|i| v[i] * q[(i, c)]).sum();
            (0..k).for_each(|i| v[i] -= p * q[(i, c)]);
        }
        let n = crate::linalg::l2_norm(&v);
        if n > 1e-8 {
            (0..k).for_each(|i| q[(i, j)] = v[i] / n);
            j += 1;
        }
    }
    q
}

pub(crate) fn symmetrize(m: &mut Matrix) {
    let n = m.rows();
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_cov_examples() {
        let wp = TheoryProblem::standard(2, 1, 1.0, 5.0 / 6.0, Regularizer::Wp { p: 1.0 }, CovConstraint::Shared);
        let s = solve_shared_cov(&wp).unwrap();
        assert_eq!(s.mu1.l2_norm(), 0.0);
        assert!((s.objective - 1.0 / 6.0).abs() < 1e-15);
        assert!((s.mu1.sub(&s.mu2).l2_norm() - 1.0).abs() < 1e-12);

        let kl = TheoryProblem { regularizer: Regularizer::Kl, ..wp.clone() };
        let s = solve_shared_cov(&kl).unwrap();
        assert!((s.mu1.l2_norm() - 1.0 / 6.0).abs() < 1e-12);
        assert!((s.mu2.l2_norm() - 5.0 / 6.0).abs() < 1e-12);
        let avg = s.mu1.scale(5.0 / 6.0).add(&s.mu2.scale(1.0 / 6.0));
        assert!(avg.l2_norm() < 1e-12);

        let half = TheoryProblem { eta: 0.5, ..wp };
        assert!(matches!(solve_shared_cov(&half), Err(Error::Domain(_))));
    }

    #[test]
    fn f_examples() {
        assert!((scalar_objective_f(1.0, 2, 1, 1.0, 0.9).unwrap() - 1.62).abs() < 1e-12);
        assert!((scalar_objective_f(0.5, 2, 1, 1.0, 0.9).unwrap() - 1.25).abs() < 1e-12);
        assert!(matches!(scalar_objective_f(0.0, 2, 1, 1.0, 0.9), Err(Error::Domain(_))));
    }

    #[test]
    fn f_is_minimized_at_u_star() {
        let (k, kappa, eps, eta) = (2, 1, 1.0, 0.9);
        let best = scalar_objective_f(u_star(k, kappa, eps, eta), k, kappa, eps, eta).unwrap();
        // log-spaced grid over ±[1e-2, 1e2]
        for i in 0..5000 {
            let mag = 10f64.powf(-2.0 + 4.0 * i as f64 / 4999.0);
            for u in [mag, -mag] {
                assert!(scalar_objective_f(u, k, kappa, eps, eta).unwrap() >= best - 1e-12, "u={u}");
            }
        }
    }

    #[test]
    fn prop2_examples() {
        let s = prop2_analytic(2, 1, 1.0, 0.9).unwrap();
        assert!((eta_star(2, 1, 1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.u.unwrap() - 0.5).abs() < 1e-12);
        assert!((s.mu1.l2_norm() - 0.5).abs() < 1e-12 && (s.mu2.l2_norm() - 0.5).abs() < 1e-12);
        assert!(s.sigma2.max_abs_diff(&Matrix::diag(&[1.0, 4.0])) < 1e-12);
        assert!((s.objective - 1.25f64.sqrt()).abs() < 1e-12);
        let u = s.u.unwrap();
        assert!(s.mu2.scale(u).add(&s.mu1.scale(1.0 - u)).l2_norm() < 1e-12);

        assert!(matches!(prop2_analytic(2, 1, 1.0, 0.6), Err(Error::OutOfRegime(_))));
        assert!(matches!(prop2_analytic(2, 2, 1.0, 0.9), Err(Error::Domain(_))));
        assert!((u_star(2, 1, 1.0, 0.999) - (0.001f64 / 0.998).cbrt()).abs() < 1e-15);
        assert!((u_star(2, 1, 1.0, 0.999) - 0.1001).abs() < 1e-4);
    }

    #[test]
    fn free_diagonal_covariances_beat_the_colinear_minimizer() {
        // without colinearity in (mean; root) space, Σ₂ = I and a small
        // inlier offset give a lower objective than the closed form
        let p = TheoryProblem::standard(2, 1, 1.0, 0.9, Regularizer::W2, CovConstraint::LowRankInlier);
        let u = 0.1 / 0.8f64.sqrt();
        let (mu1, mu2) = (Vector::basis(2, 0, u), Vector::basis(2, 0, u - 1.0));
        let free = p.objective(&mu1, &Matrix::diag(&[1.0, 0.0]), &mu2, &Matrix::identity(2)).unwrap();
        assert!(free < prop2_analytic(2, 1, 1.0, 0.9).unwrap().objective - 0.1);
    }

    #[test]
    fn random_spd_is_spd() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s = random_spd(4, (0.5, 2.0), &mut rng);
        let e = crate::linalg::sym_eig(&s).unwrap();
        assert!(e.eigenvalues.iter().all(|&l| (0.5 - 1e-12..=2.0 + 1e-12).contains(&l)));
    }
}
