//! Numerical oracles: Nelder–Mead over the reduced barycenter
//! parameterization and exact assignment-based empirical W1.

use serde::{Deserialize, Serialize};

use super::{CovConstraint, TheoryProblem, TheorySolution};
use crate::error::{domain_err, shape_err, Error, Result};
use crate::linalg::{Matrix, Vector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NelderMead {
    pub max_iter: usize,
    /// Spread of simplex values at convergence, relative to `1 + |f|`.
    pub ftol: f64,
    /// Largest vertex distance from the best vertex at convergence.
    pub xtol: f64,
    pub step: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self { max_iter: 10_000, ftol: 1e-15, xtol: 1e-10, step: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NmResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
}

/// Minimizes `f` from `x0` with the standard reflection / expansion /
/// contraction / shrink coefficients (1, 2, ½, ½).
pub fn nelder_mead(mut f: impl FnMut(&[f64]) -> Result<f64>, x0: &[f64], cfg: &NelderMead) -> Result<NmResult> {
    let n = x0.len();
    if n == 0 {
        return domain_err("nothing to optimize");
    }
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += cfg.step;
        simplex.push(x);
    }
    let mut values = simplex.iter().map(|x| f(x)).collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..=n).collect();
    for iter in 0..cfg.max_iter {
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let (best, worst, second) = (order[0], order[n], order[n - 1]);
        let spread = values[worst] - values[best];
        let size = simplex
            .iter()
            .map(|x| x.iter().zip(&simplex[best]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread <= cfg.ftol * (1.0 + values[best].abs()) && size <= cfg.xtol {
            return Ok(NmResult { x: simplex[best].clone(), value: values[best], iterations: iter });
        }
        let mut centroid = vec![0.0; n];
        for &i in &order[..n] {
            centroid.iter_mut().zip(&simplex[i]).for_each(|(c, x)| *c += x / n as f64);
        }
        let toward = |t: f64| -> Vec<f64> {
            centroid.iter().zip(&simplex[worst]).map(|(c, w)| c + t * (w - c)).collect()
        };
        let xr = toward(-1.0);
        let fr = f(&xr)?;
        if fr < values[best] {
            let xe = toward(-2.0);
            let fe = f(&xe)?;
            let (x, v) = if fe < fr { (xe, fe) } else { (xr, fr) };
            simplex[worst] = x;
            values[worst] = v;
        } else if fr < values[second] {
            simplex[worst] = xr;
            values[worst] = fr;
        } else {
            let (xc, fc) = if fr < values[worst] {
                let xc = toward(-0.5);
                let fc = f(&xc)?;
                (xc, fc)
            } else {
                let xc = toward(0.5);
                let fc = f(&xc)?;
                (xc, fc)
            };
            if fc < values[worst].min(fr) {
                simplex[worst] = xc;
                values[worst] = fc;
            } else {
                let xb = simplex[best].clone();
                for &i in &order[1..] {
                    simplex[i] = simplex[i].iter().zip(&xb).map(|(x, b)| b + 0.5 * (x - b)).collect();
                    values[i] = f(&simplex[i])?;
                }
            }
        }
    }
    Err(Error::Numerical(format!("Nelder–Mead did not converge in {} iterations", cfg.max_iter)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BruteForceConfig {
    /// Coarse grid points over the first-axis offset `u ∈ [−1, 2]`.
    pub grid: usize,
    pub restarts: usize,
    pub nm: NelderMead,
}

impl Default for BruteForceConfig {
    fn default() -> Self {
        Self { grid: 31, restarts: 20, nm: NelderMead::default() }
    }
}

struct Layout<'a> {
    problem: &'a TheoryProblem,
}

impl Layout<'_> {
    fn dim(&self) -> usize {
        let p = self.problem;
        match p.constraint {
            CovConstraint::Shared => p.k,
            CovConstraint::LowRankInlier => 1 + p.kappa,
        }
    }

    fn start(&self, u: f64) -> Vec<f64> {
        let p = self.problem;
        match p.constraint {
            CovConstraint::Shared => Vector::basis(p.k, 0, u * p.eps).into_vec(),
            CovConstraint::LowRankInlier => {
                let mut x = vec![1.0; self.dim()];
                x[0] = u;
                x
            }
        }
    }

    /// Shared: `μ₁ = μ₀ + v`, `μ₂ = μ₁ − ε e₁`. Low rank: `μ₁ = uε e₁`,
    /// `μ₂ = (u − 1)ε e₁`, `Σ₁^{1/2} = diag(a′; 0)` and `Σ₂^{1/2} = diag(b)`
    /// with `b` fixed by colinearity of `(μ₁; a)`, `(μ₂; b)` and `(0; 1)`.
    /// `None` outside the positive orthant of square-root entries.
    fn unpack(&self, x: &[f64]) -> Option<(Vector, Matrix, Vector, Matrix)> {
        let p = self.problem;
        let k = p.k;
        match p.constraint {
            CovConstraint::Shared => {
                let mu1 = p.mu0.add(&Vector::new(x.to_vec()).ok()?);
                let mu2 = mu1.sub(&Vector::basis(k, 0, p.eps));
                Some((mu1, p.sigma0.clone(), mu2, p.sigma0.clone()))
            }
            CovConstraint::LowRankInlier => {
                let (u, a) = (x[0], &x[1..]);
                if u <= 0.0 || a.iter().any(|&ai| ai <= 0.0) {
                    return None;
                }
                let mut b: Vec<f64> = a.iter().map(|ai| (1.0 + (u - 1.0) * ai) / u).collect();
                b.resize(k, 1.0 / u);
                if b.iter().any(|&bi| bi <= 0.0) {
                    return None;
                }
                let mut d1: Vec<f64> = a.iter().map(|ai| ai * ai).collect();
                d1.resize(k, 0.0);
                let d2: Vec<f64> = b.iter().map(|bi| bi * bi).collect();
                let mu1 = Vector::basis(k, 0, u * p.eps);
                let mu2 = Vector::basis(k, 0, (u - 1.0) * p.eps);
                Some((mu1, Matrix::diag(&d1), mu2, Matrix::diag(&d2)))
            }
        }
    }

    fn objective(&self, x: &[f64]) -> Result<f64> {
        if x.iter().any(|v| !v.is_finite()) {
            return Ok(f64::INFINITY);
        }
        match self.unpack(x) {
            Some((m1, s1, m2, s2)) => self.problem.objective(&m1, &s1, &m2, &s2),
            None => Ok(f64::INFINITY),
        }
    }
}

/// Numerical minimizer of the two-mode problem over a reduced
/// parameterization: with shared covariance the inlier offset is free and
/// the mean difference is `ε e₁`; with a low-rank inlier the means and
/// diagonal covariance roots are colinear with the reference, leaving the
/// scalar `u` and the inlier roots `a′`. A coarse grid over `u ∈ [−1, 2]`
/// seeds a restarted Nelder–Mead.
pub fn brute_force_bary(problem: &TheoryProblem, cfg: &BruteForceConfig) -> Result<TheorySolution> {
    problem.validate()?;
    if problem.k > 6 {
        return domain_err(format!("brute force is limited to K ≤ 6, got {}", problem.k));
    }
    if cfg.grid < 2 {
        return domain_err("grid needs at least two points");
    }
    let layout = Layout { problem };
    let mut best_x = layout.start(1.0);
    let mut best = f64::INFINITY;
    for i in 0..cfg.grid {
        let u = -1.0 + 3.0 * i as f64 / (cfg.grid - 1) as f64;
        let x = layout.start(u);
        let v = layout.objective(&x)?;
        if v < best {
            best = v;
            best_x = x;
        }
    }
    let nm = NelderMead { step: cfg.nm.step * problem.eps.max(1.0), ..cfg.nm.clone() };
    for _ in 0..=cfg.restarts {
        let r = nelder_mead(|x| layout.objective(x), &best_x, &nm)?;
        let improved = best - r.value;
        if r.value <= best {
            best = r.value;
            best_x = r.x;
        }
        if improved <= 1e-14 * (1.0 + best.abs()) {
            break;
        }
    }
    let (mu1, sigma1, mu2, sigma2) =
        layout.unpack(&best_x).ok_or_else(|| Error::Numerical("oracle found no feasible point".into()))?;
    let u = (mu1[0] - problem.mu0[0]) / problem.eps;
    Ok(TheorySolution { mu1, mu2, sigma1, sigma2, objective: best, u: Some(u) })
}

/// Exact empirical W1 between equal-size point sets: the optimal
/// assignment cost under Euclidean distance, divided by `n`.
pub fn empirical_w1(a: &[Vector], b: &[Vector]) -> Result<f64> {
    let n = a.len();
    if b.len() != n {
        return shape_err(format!("sample counts differ: {} vs {}", n, b.len()));
    }
    if n == 0 || n > 512 {
        return domain_err(format!("need 1 ≤ n ≤ 512 samples per side, got {n}"));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|p| p.len() != dim) {
        return shape_err("points differ in dimension");
    }
    let cost: Vec<f64> = a.iter().flat_map(|p| b.iter().map(move |q| p.sub(q).l2_norm())).collect();
    let assign = hungarian(&cost, n);
    Ok(assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() / n as f64)
}

/// Min-cost perfect matching on a row-major `n×n` cost matrix (shortest
/// augmenting paths with potentials). Returns the column of each row.
fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    let c = |i: usize, j: usize| cost[(i - 1) * n + (j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    row_to_col
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::theory::{prop2_analytic, solve_shared_cov, Regularizer};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn pts(xs: &[f64]) -> Vec<Vector> {
        xs.iter().map(|&x| Vector::new(vec![x]).unwrap()).collect()
    }

    #[test]
    fn nelder_mead_rosenbrock() {
        let f = |x: &[f64]| Ok((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2));
        let r = nelder_mead(f, &[-1.2, 1.0], &NelderMead::default()).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{:?}", r.x);
        let tight = NelderMead { max_iter: 5, ..NelderMead::default() };
        assert!(matches!(nelder_mead(f, &[-1.2, 1.0], &tight), Err(Error::Numerical(_))));
    }

    #[test]
    fn oracle_matches_shared_wp() {
        let p = TheoryProblem::standard(2, 1, 1.0, 5.0 / 6.0, Regularizer::Wp { p: 1.0 }, CovConstraint::Shared);
        let s = brute_force_bary(&p, &BruteForceConfig::default()).unwrap();
        assert!(s.mu1.l2_norm() < 1e-3);
        assert!((s.objective - 1.0 / 6.0).abs() < 1e-6);
        assert!((s.mu1.sub(&s.mu2).l2_norm() - 1.0).abs() < 1e-8);
        assert!((s.objective - solve_shared_cov(&p).unwrap().objective).abs() < 1e-6);
    }

    #[test]
    fn oracle_matches_prop2() {
        let p = TheoryProblem::standard(2, 1, 1.0, 0.9, Regularizer::W2, CovConstraint::LowRankInlier);
        let s = brute_force_bary(&p, &BruteForceConfig::default()).unwrap();
        let a = prop2_analytic(2, 1, 1.0, 0.9).unwrap();
        assert!((s.u.unwrap() - 0.5).abs() < 1e-3, "{:?}", s.u);
        assert!(s.sigma2.max_abs_diff(&a.sigma2) < 1e-3);
        assert!((s.objective - a.objective).abs() < 1e-8);
    }

    #[test]
    fn oracle_rejects_bad_problems() {
        let p = TheoryProblem::standard(2, 1, 0.0, 0.9, Regularizer::W2, CovConstraint::LowRankInlier);
        assert!(matches!(brute_force_bary(&p, &BruteForceConfig::default()), Err(Error::Domain(_))));
        let p = TheoryProblem::standard(7, 1, 1.0, 0.9, Regularizer::W2, CovConstraint::LowRankInlier);
        assert!(matches!(brute_force_bary(&p, &BruteForceConfig::default()), Err(Error::Domain(_))));
    }

    #[test]
    fn w1_examples() {
        assert_eq!(empirical_w1(&pts(&[0.0, 1.0]), &pts(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(empirical_w1(&pts(&[0.0, 1.0]), &pts(&[2.0, 3.0])).unwrap(), 2.0);
        assert_eq!(empirical_w1(&pts(&[0.0, 1.0]), &pts(&[1.0, 0.0])).unwrap(), 0.0);
        assert!(matches!(empirical_w1(&pts(&[0.0]), &pts(&[0.0, 1.0])), Err(Error::Shape(_))));
    }

    #[test]
    fn w1_of_shifted_gaussians() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut draw = |shift: f64| -> Vec<Vector> {
            (0..200)
                .map(|_| {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    let y: f64 = StandardNormal.sample(&mut rng);
                    Vector::new(vec![x + shift, y]).unwrap()
                })
                .collect()
        };
        let (a, b) = (draw(1.0), draw(0.0));
        let w = empirical_w1(&a, &b).unwrap();
        assert!((w - 1.0).abs() <= 0.1, "{w}");
    }

    fn brute_matching(cost: &[f64], n: usize) -> f64 {
        fn go(row: usize, n: usize, used: &mut Vec<bool>, cost: &[f64]) -> f64 {
            if row == n {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row * n + j] + go(row + 1, n, used, cost));
                    used[j] = false;
                }
            }
            best
        }
        go(0, n, &mut vec![false; n], cost)
    }

    proptest! {
        #[test]
        fn hungarian_is_optimal(n in 1usize..7, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..10.0)).collect();
            let assign = hungarian(&cost, n);
            let mut cols = assign.clone();
            cols.sort_unstable();
            prop_assert_eq!(cols, (0..n).collect::<Vec<_>>());
            let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
            prop_assert!((total - brute_matching(&cost, n)).abs() < 1e-9);
        }
    }
}
