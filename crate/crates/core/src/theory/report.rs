//! Verification report comparing every closed form with its oracle.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::*;
use crate::linalg::psd_sqrt;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceCheck {
    pub params: BTreeMap<String, f64>,
    pub analytic: BTreeMap<String, f64>,
    pub oracle: BTreeMap<String, f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropositionCheck {
    pub name: String,
    pub instances: Vec<InstanceCheck>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub seed: u64,
    pub propositions: Vec<PropositionCheck>,
    pub pass: bool,
}

fn map<const N: usize>(kv: [(&str, f64); N]) -> BTreeMap<String, f64> {
    kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn proposition(name: &str, instances: Vec<InstanceCheck>) -> PropositionCheck {
    let pass = instances.iter().all(|i| i.pass);
    PropositionCheck { name: name.into(), instances, pass }
}

/// `n` draws from `N(μ, Σ)`.
pub fn gaussian_samples<R: Rng + ?Sized>(mu: &Vector, sigma: &Matrix, n: usize, rng: &mut R) -> Result<Vec<Vector>> {
    let root = psd_sqrt(sigma)?;
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..mu.len()).map(|_| rng.sample(StandardNormal)).collect();
            Ok(mu.add(&Vector::new(root.matvec(&z)?)?))
        })
        .collect()
}

/// Grid of shared-covariance problems with a random reference.
pub fn shared_cov_grid(regularizer: Regularizer, rng: &mut ChaCha8Rng) -> Vec<TheoryProblem> {
    let mut out = Vec::new();
    for eta in [0.6, 0.75, 5.0 / 6.0] {
        for eps in [0.5, 1.0, 2.0] {
            for k in [2, 5] {
                let mu0 = Vector::new((0..k).map(|_| rng.sample(StandardNormal)).collect()).expect("finite");
                let sigma0 = random_spd(k, (0.5, 2.0), rng);
                out.push(TheoryProblem { k, kappa: 1, eps, eta, mu0, sigma0, regularizer, constraint: CovConstraint::Shared });
            }
        }
    }
    out
}

/// Random low-rank problems inside the closed-form regime, built from a
/// target `u★ ∈ [0.25, 0.75]` by inverting the cube-root formula for η.
pub fn random_low_rank_problems(count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, f64, f64)> {
    (0..count)
        .map(|_| {
            let k = rng.gen_range(2..=4);
            let kappa = rng.gen_range(1..k);
            let eps = rng.gen_range(0.5..2.0);
            let u: f64 = rng.gen_range(0.25..0.75);
            let (r, s) = ((k - kappa) as f64, u.powi(3) * eps * eps);
            (k, kappa, eps, (r + s) / (r + 2.0 * s))
        })
        .collect()
}

fn shared_wp(rng: &mut ChaCha8Rng, cfg: &BruteForceConfig) -> Result<PropositionCheck> {
    let mut instances = Vec::new();
    for p in shared_cov_grid(Regularizer::Wp { p: 1.0 }, rng) {
        let a = solve_shared_cov(&p)?;
        let o = brute_force_bary(&p, cfg)?;
        let dist = o.mu1.sub(&p.mu0).l2_norm();
        let pass = dist <= 1e-3 * p.eps && (o.objective - (1.0 - p.eta) * p.eps).abs() <= 1e-4;
        instances.push(InstanceCheck {
            params: map([("K", p.k as f64), ("eps", p.eps), ("eta", p.eta)]),
            analytic: map([("objective", a.objective), ("mu1_to_mu0", a.mu1.sub(&p.mu0).l2_norm())]),
            oracle: map([("objective", o.objective), ("mu1_to_mu0", dist)]),
            pass,
        });
    }
    Ok(proposition("shared-cov-wp", instances))
}

fn shared_kl(rng: &mut ChaCha8Rng, cfg: &BruteForceConfig) -> Result<PropositionCheck> {
    let mut instances = Vec::new();
    for p in shared_cov_grid(Regularizer::Kl, rng) {
        let a = solve_shared_cov(&p)?;
        let o = brute_force_bary(&p, cfg)?;
        let residual = |s: &TheorySolution| p.mu0.sub(&s.mu1.scale(p.eta).add(&s.mu2.scale(1.0 - p.eta))).l2_norm();
        let pass = residual(&o) <= 1e-3 * p.eps;
        instances.push(InstanceCheck {
            params: map([("K", p.k as f64), ("eps", p.eps), ("eta", p.eta)]),
            analytic: map([("objective", a.objective), ("mean_residual", residual(&a))]),
            oracle: map([("objective", o.objective), ("mean_residual", residual(&o))]),
            pass,
        });
    }
    Ok(proposition("shared-cov-kl", instances))
}

fn low_rank_w2(rng: &mut ChaCha8Rng, cfg: &BruteForceConfig) -> Result<PropositionCheck> {
    let mut cases = vec![(2, 1, 1.0, 0.9)];
    cases.extend(random_low_rank_problems(5, rng));
    let mut instances = Vec::new();
    for (k, kappa, eps, eta) in cases {
        let a = prop2_analytic(k, kappa, eps, eta)?;
        let p = TheoryProblem::standard(k, kappa, eps, eta, Regularizer::W2, CovConstraint::LowRankInlier);
        let o = brute_force_bary(&p, cfg)?;
        let (ua, uo) = (a.u.unwrap_or(f64::NAN), o.u.unwrap_or(f64::NAN));
        let f_star = scalar_objective_f(ua, k, kappa, eps, eta)?;
        let pass = (ua - uo).abs() <= 1e-3
            && a.sigma2.max_abs_diff(&o.sigma2) <= 1e-3
            && (f_star.sqrt() - a.objective).abs() <= 1e-9
            && o.objective >= a.objective - 1e-6;
        instances.push(InstanceCheck {
            params: map([("K", k as f64), ("kappa", kappa as f64), ("eps", eps), ("eta", eta)]),
            analytic: map([("u", ua), ("objective", a.objective), ("sqrt_f_u", f_star.sqrt())]),
            oracle: map([("u", uo), ("objective", o.objective), ("sigma2_max_abs_diff", a.sigma2.max_abs_diff(&o.sigma2))]),
            pass,
        });
    }
    Ok(proposition("low-rank-w2", instances))
}

fn kl_singular(rng: &mut ChaCha8Rng) -> Result<PropositionCheck> {
    let mut instances = Vec::new();
    for k in [2, 3, 5] {
        let mut hits = 0;
        for _ in 0..20 {
            let sigma0 = random_spd(k, (0.2, 3.0), rng);
            let mut d = vec![1.0; k];
            d[k - 1] = 0.0;
            let kl = kl_gaussian(&Vector::zeros(k), &Matrix::diag(&d), &Vector::zeros(k), &sigma0)?;
            hits += usize::from(kl == f64::INFINITY);
        }
        instances.push(InstanceCheck {
            params: map([("K", k as f64), ("trials", 20.0)]),
            analytic: map([("infinite", 20.0)]),
            oracle: map([("infinite", hits as f64)]),
            pass: hits == 20,
        });
    }
    Ok(proposition("kl-singular", instances))
}

fn mean_w1(rng: &mut ChaCha8Rng) -> Result<PropositionCheck> {
    let mut instances = Vec::new();
    for _ in 0..5 {
        let sigma = random_spd(2, (0.1, 0.5), rng);
        for shift in [1.0, 2.0] {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let mu = Vector::new(vec![shift * angle.cos(), shift * angle.sin()]).expect("finite");
            let a = gaussian_samples(&mu, &sigma, 256, rng)?;
            let b = gaussian_samples(&Vector::zeros(2), &sigma, 256, rng)?;
            let w = empirical_w1(&a, &b)?;
            instances.push(InstanceCheck {
                params: map([("shift", shift), ("n", 256.0)]),
                analytic: map([("w1", shift)]),
                oracle: map([("w1", w)]),
                pass: (w - shift).abs() <= 0.12 * shift,
            });
        }
    }
    Ok(proposition("mean-w1", instances))
}

/// Runs every check; random instances come from `seed`.
pub fn verification_report(seed: u64) -> Result<TheoryReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = BruteForceConfig::default();
    let propositions = vec![
        shared_wp(&mut rng, &cfg)?,
        shared_kl(&mut rng, &cfg)?,
        low_rank_w2(&mut rng, &cfg)?,
        kl_singular(&mut rng)?,
        mean_w1(&mut rng)?,
    ];
    let pass = propositions.iter().all(|p| p.pass);
    Ok(TheoryReport { seed, propositions, pass })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_passes() {
        let r = verification_report(0).unwrap();
        for p in &r.propositions {
            for i in &p.instances {
                assert!(i.pass, "{}: {:?} analytic {:?} oracle {:?}", p.name, i.params, i.analytic, i.oracle);
            }
        }
        assert!(r.pass);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<TheoryReport>(&json).unwrap(), r);
    }
}
