//! Novelty scoring: mean cosine similarity between a point and decodings of
//! draws from its inlier mode. Higher means more normal.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::MawModel;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::linalg::{l2_norm, Matrix};
use crate::nets::BnMode;

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn fill_normal<R: Rng + ?Sized>(m: &mut Matrix, rows: std::ops::Range<usize>, rng: &mut R) {
    for r in rows {
        for x in m.row_mut(r) {
            *x = rng.sample(StandardNormal);
        }
    }
}

/// Scores the rows of `ys` given per-row noise (`t` rows of `eps1`/`eps2`
/// per point).
fn score_with_noise(model: &MawModel, ys: &Matrix, t: usize, eps1: &Matrix, eps2: &Matrix) -> Result<Vec<f64>> {
    if ys.cols() != model.input_dim {
        return Err(Error::Shape(format!("model expects {} features, got {}", model.input_dim, ys.cols())));
    }
    // the model is trained on unit-norm rows
    let mut unit = ys.clone();
    for r in 0..unit.rows() {
        let n = l2_norm(unit.row(r));
        if n > 0.0 {
            unit.row_mut(r).iter_mut().for_each(|x| *x /= n);
        }
    }
    let mut tape = Tape::new();
    let y = tape.constant(unit);
    let (enc, _) = model.encode(&mut tape, y, BnMode::Eval, false)?;
    let inlier = vec![true; ys.rows() * t];
    let z = model.sample(&mut tape, enc, t, eps1, eps2, &inlier)?;
    let (dec, _) = model.decoder.forward(&mut tape, &model.store, z, BnMode::Eval, false)?;
    let dv = tape.value(dec);
    Ok((0..ys.rows())
        .map(|j| {
            let s: f64 = (0..t).map(|s| cosine(ys.row(j), dv.row(j * t + s))).sum();
            s / t as f64
        })
        .collect())
}

/// Score of a single point with `t` inlier draws from `rng`.
pub fn score<R: Rng + ?Sized>(model: &MawModel, y: &[f64], t: usize, rng: &mut R) -> Result<f64> {
    if t == 0 {
        return Err(Error::Domain("need at least one draw".into()));
    }
    let d = model.hp.d;
    let mut eps1 = Matrix::zeros(t, d);
    let mut eps2 = Matrix::zeros(t, d);
    for s in 0..t {
        fill_normal(&mut eps1, s..s + 1, rng);
        fill_normal(&mut eps2, s..s + 1, rng);
    }
    let ys = Matrix::from_vec(1, y.len(), y.to_vec())?;
    Ok(score_with_noise(model, &ys, t, &eps1, &eps2)?[0])
}

/// Scores every row of `ys`. Point `j` draws its noise from its own ChaCha8
/// stream (`seed`, stream `j`), so a score does not depend on which other
/// points are scored alongside it.
pub fn score_points(model: &MawModel, ys: &Matrix, t: usize, seed: u64) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::Domain("need at least one draw".into()));
    }
    let d = model.hp.d;
    let n = ys.rows();
    let mut eps1 = Matrix::zeros(n * t, d);
    let mut eps2 = Matrix::zeros(n * t, d);
    for j in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        for s in 0..t {
            let r = j * t + s;
            fill_normal(&mut eps1, r..r + 1, &mut rng);
            fill_normal(&mut eps2, r..r + 1, &mut rng);
        }
    }
    score_with_noise(model, ys, t, &eps1, &eps2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Hyperparams, Variant};

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]) - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]), 0.0);
        assert_eq!(cosine(&[3.0, 4.0], &[3.0, 4.0]), 1.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn scores_are_bounded_and_per_point() {
        for v in Variant::ALL {
            let hp = Hyperparams { d_prime: 8, variant: v, ..Hyperparams::default() };
            let model = MawModel::new(4, hp, 2).unwrap();
            let ys = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.6, 0.8, 0.0], vec![0.5, 0.5, 0.5, 0.5]]).unwrap();
            let all = score_points(&model, &ys, 5, 9).unwrap();
            assert!(all.iter().all(|s| (-1.0..=1.0).contains(s)), "{v}");
            let first = Matrix::from_rows(&[ys.row(0).to_vec()]).unwrap();
            assert_eq!(all[0], score_points(&model, &first, 5, 9).unwrap()[0]);
        }
    }

    #[test]
    fn score_is_scale_invariant() {
        let hp = Hyperparams { d_prime: 8, ..Hyperparams::default() };
        let model = MawModel::new(3, hp, 4).unwrap();
        let y = [0.25, -0.5, 0.75];
        let y4: Vec<f64> = y.iter().map(|v| v * 4.0).collect();
        let a = score(&model, &y, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = score(&model, &y4, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
