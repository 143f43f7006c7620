//! Alternating training: per batch one VAE step, one critic step (plus
//! clipping) and one generator step.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{gan_critic_loss, gan_gen_loss, gen_loss, kl_diag_loss, mse_loss, vae_loss, w1_loss};
use super::{Encoded, Hyperparams, MawModel, Noise, Variant};
use crate::autodiff::{repeat_rows, BatchStats, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nets::{clip_weights, BnMode};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    /// Reconstruction loss (plus the KL term for the plain VAE).
    pub vae: f64,
    /// Critic loss; zero when the variant has no critic.
    pub critic: f64,
    /// Generator loss; zero when the variant has no critic.
    pub gen: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub epochs: Vec<EpochLosses>,
}

/// Contiguous batches of `batch_size` over `n` rows; a trailing batch of a
/// single row is merged into the previous one (batch norm needs two rows).
pub fn batches(n: usize, batch_size: usize) -> Result<Vec<Range<usize>>> {
    if n < 2 {
        return Err(Error::Domain(format!("training needs at least 2 points, got {n}")));
    }
    let bs = batch_size.max(2);
    let mut out: Vec<Range<usize>> = (0..n).step_by(bs).map(|s| s..(s + bs).min(n)).collect();
    if out.len() > 1 && out.last().unwrap().len() == 1 {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    Ok(out)
}

/// Initializes a model from `seed` and trains it on the rows of `x`.
pub fn train(x: &Matrix, hp: &Hyperparams, seed: u64) -> Result<(MawModel, LossTrace)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MawModel::with_rng(x.cols(), hp.clone(), seed, &mut rng)?;
    let trace = train_model(&mut model, x, &mut rng)?;
    Ok((model, trace))
}

/// Runs `model.hp.epochs` epochs, reshuffling the rows every epoch.
pub fn train_model<R: Rng + ?Sized>(model: &mut MawModel, x: &Matrix, rng: &mut R) -> Result<LossTrace> {
    if x.cols() != model.input_dim {
        return Err(Error::Shape(format!("model expects {} features, data has {}", model.input_dim, x.cols())));
    }
    let ranges = batches(x.rows(), model.hp.batch_size)?;
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut trace = LossTrace::default();
    let mut tape = Tape::new();
    for epoch in 0..model.hp.epochs {
        order.shuffle(rng);
        let mut sums = [0.0; 3];
        for (b, range) in ranges.iter().enumerate() {
            let rows = &order[range.clone()];
            let mut xb = Matrix::zeros(rows.len(), x.cols());
            for (i, &r) in rows.iter().enumerate() {
                xb.row_mut(i).copy_from_slice(x.row(r));
            }
            let losses = train_batch(model, &mut tape, &xb, rng).map_err(|e| at_location(e, epoch, b))?;
            for (s, l) in sums.iter_mut().zip(losses) {
                *s += l;
            }
        }
        let nb = ranges.len() as f64;
        trace.epochs.push(EpochLosses { epoch, vae: sums[0] / nb, critic: sums[1] / nb, gen: sums[2] / nb });
    }
    Ok(trace)
}

fn at_location(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!("epoch {epoch}, batch {batch}: {msg}")),
        other => other,
    }
}

fn finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numerical(format!("{what} loss is {value}")))
    }
}

/// The three per-batch objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Reconstruction loss over encoder, reduction and decoder.
    Reconstruction,
    /// Critic loss over the critic, on detached generated samples.
    Critic,
    /// Generator loss over encoder and reduction through a frozen critic.
    Generator,
}

type Stats = Vec<BatchStats>;

fn record_reconstruction(model: &MawModel, tape: &mut Tape, xb: &Matrix, noise: &Noise) -> Result<(Var, Var, Stats, Stats)> {
    let t = model.hp.t;
    let x = tape.constant(xb.clone());
    let (enc, enc_stats) = model.encode(tape, x, BnMode::Train, true)?;
    let z = model.sample(tape, enc, t, &noise.eps1, &noise.eps2, &noise.inlier)?;
    let (dec, dec_stats) = model.decoder.forward(tape, &model.store, z, BnMode::Train, true)?;
    let xr = tape.constant(repeat_rows(xb, t));
    let root = match (model.hp.variant, enc) {
        (Variant::Vae, Encoded::Diagonal { mu, logvar }) => {
            let rec = mse_loss(tape, xr, dec)?;
            let kl = kl_diag_loss(tape, mu, logvar)?;
            tape.add(rec, kl)?
        }
        (Variant::MawMse, _) => mse_loss(tape, xr, dec)?,
        _ => vae_loss(tape, xr, dec)?,
    };
    Ok((root, z, enc_stats, dec_stats))
}

/// Generated and prior samples pass through the critic as one batch.
fn record_critic(model: &MawModel, tape: &mut Tape, z_gen: Matrix, noise: &Noise) -> Result<(Var, Stats)> {
    let critic = model.critic.as_ref().ok_or_else(|| Error::Domain("variant has no critic".into()))?;
    let rows = z_gen.rows();
    let zc = tape.constant(z_gen);
    let zh = tape.constant(noise.hyp.clone());
    let joint = tape.concat_rows(zc, zh)?;
    let (out, stats) = critic.forward(tape, &model.store, joint, BnMode::Train, true)?;
    let dg = tape.rows(out, 0, rows)?;
    let dh = tape.rows(out, rows, rows)?;
    let root = if model.hp.variant.wasserstein() { w1_loss(tape, dg, dh)? } else { gan_critic_loss(tape, dg, dh)? };
    Ok((root, stats))
}

fn record_generator(model: &MawModel, tape: &mut Tape, xb: &Matrix, noise: &Noise) -> Result<Var> {
    let critic = model.critic.as_ref().ok_or_else(|| Error::Domain("variant has no critic".into()))?;
    let t = model.hp.t;
    let x = tape.constant(xb.clone());
    let (enc, _) = model.encode(tape, x, BnMode::Train, true)?;
    let z = model.sample(tape, enc, t, &noise.eps1, &noise.eps2, &noise.inlier)?;
    let rows = tape.value(z).rows();
    let zh = tape.constant(noise.hyp.clone());
    let joint = tape.concat_rows(z, zh)?;
    let (out, _) = critic.forward(tape, &model.store, joint, BnMode::Train, false)?;
    let dg = tape.rows(out, 0, rows)?;
    Ok(if model.hp.variant.wasserstein() { gen_loss(tape, dg) } else { gan_gen_loss(tape, dg) })
}

/// Value and parameter gradients of one objective on a batch with fixed
/// noise. The model is left untouched.
pub fn objective(model: &MawModel, xb: &Matrix, noise: &Noise, which: Objective) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let root = match which {
        Objective::Reconstruction => record_reconstruction(model, &mut tape, xb, noise)?.0,
        Objective::Critic => {
            let (_, z, _, _) = record_reconstruction(model, &mut tape, xb, noise)?;
            let z_gen = tape.value(z).clone();
            tape.reset();
            record_critic(model, &mut tape, z_gen, noise)?.0
        }
        Objective::Generator => record_generator(model, &mut tape, xb, noise)?,
    };
    let value = tape.scalar(root);
    Ok((value, tape.backward(root)?))
}

/// One iteration of the alternating scheme on a batch; returns the
/// (reconstruction, critic, generator) losses.
fn train_batch<R: Rng + ?Sized>(model: &mut MawModel, tape: &mut Tape, xb: &Matrix, rng: &mut R) -> Result<[f64; 3]> {
    let hp = model.hp.clone();
    let noise = Noise::draw(xb.rows() * hp.t, hp.d, hp.sampling_eta(), rng);

    tape.reset();
    let (root, z, enc_stats, dec_stats) = record_reconstruction(model, tape, xb, &noise)?;
    let l_vae = finite(tape.scalar(root), "reconstruction")?;
    let z_gen = tape.value(z).clone();
    let grads = tape.backward(root)?;
    model.vae_opt.apply(&mut model.store, &grads)?;
    model.encoder.update_running(&enc_stats);
    model.decoder.update_running(&dec_stats);

    if model.critic.is_none() {
        return Ok([l_vae, 0.0, 0.0]);
    }

    tape.reset();
    let (root, critic_stats) = record_critic(model, tape, z_gen, &noise)?;
    let l_critic = finite(tape.scalar(root), "critic")?;
    let grads = tape.backward(root)?;
    model.critic_opt.as_mut().expect("critic optimizer").apply(&mut model.store, &grads)?;
    let critic = model.critic.as_mut().expect("critic");
    critic.update_running(&critic_stats);
    if hp.variant.wasserstein() {
        clip_weights(&mut model.store, &critic.param_ids(), -hp.clip, hp.clip);
    }

    tape.reset();
    let root = record_generator(model, tape, xb, &noise)?;
    let l_gen = finite(tape.scalar(root), "generator")?;
    let grads = tape.backward(root)?;
    model.gen_opt.as_mut().expect("generator optimizer").apply(&mut model.store, &grads)?;

    Ok([l_vae, l_critic, l_gen])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn batch_ranges() {
        assert_eq!(batches(10, 4).unwrap(), vec![0..4, 4..8, 8..10]);
        assert_eq!(batches(9, 4).unwrap(), vec![0..4, 4..9]);
        assert_eq!(batches(3, 128).unwrap(), vec![0..3]);
        assert!(batches(1, 4).is_err());
    }

    fn toy_data() -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut x = Matrix::zeros(8, 6);
        for r in 0..8 {
            let s: f64 = rng.gen_range(-1.0..1.0);
            for c in 0..6 {
                x[(r, c)] = s * (c as f64 + 1.0) + 0.05 * rng.gen_range(-1.0..1.0);
            }
            let n = crate::linalg::l2_norm(x.row(r));
            x.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        x
    }

    fn hp(epochs: usize, variant: Variant) -> Hyperparams {
        Hyperparams { d_prime: 8, epochs, batch_size: 8, lr_vae: 1e-3, lr_gen: 1e-3, variant, ..Hyperparams::default() }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let x = toy_data();
        let (model, trace) = train(&x, &hp(0, Variant::Maw), 5).unwrap();
        assert!(trace.epochs.is_empty());
        assert_eq!(model, MawModel::new(6, hp(0, Variant::Maw), 5).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_clips_the_critic() {
        let x = toy_data();
        let (m1, t1) = train(&x, &hp(3, Variant::Maw), 7).unwrap();
        let (_, t2) = train(&x, &hp(3, Variant::Maw), 7).unwrap();
        assert_eq!(t1, t2);
        let critic = m1.critic.as_ref().unwrap();
        for id in critic.param_ids() {
            assert!(m1.store.get(id).as_slice().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn reconstruction_loss_decreases() {
        let x = toy_data();
        let mut finals = Vec::new();
        let mut initials = Vec::new();
        for seed in 0..3 {
            let (_, trace) = train(&x, &hp(50, Variant::Maw), seed).unwrap();
            initials.push(trace.epochs[0].vae);
            finals.push(trace.epochs.last().unwrap().vae);
        }
        initials.sort_by(f64::total_cmp);
        finals.sort_by(f64::total_cmp);
        assert!(finals[1] < initials[1], "{finals:?} vs {initials:?}");
    }

    #[test]
    fn every_variant_trains() {
        let x = toy_data();
        for v in Variant::ALL {
            let (_, trace) = train(&x, &hp(2, v), 1).unwrap();
            assert!(trace.epochs.iter().all(|e| e.vae.is_finite() && e.critic.is_finite() && e.gen.is_finite()), "{v}");
        }
    }

    #[test]
    fn nan_input_aborts_with_location() {
        let mut x = toy_data();
        x[(0, 0)] = f64::NAN;
        let err = train(&x, &hp(2, Variant::Maw), 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epoch 0") && msg.contains("batch 0"), "{msg}");
    }
}
