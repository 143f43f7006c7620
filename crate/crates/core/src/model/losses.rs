//! Training objectives, recorded on a tape.
//!
//! Reconstruction losses take the batch repeated T times (row `i·T + t`
//! holds `x⁽ⁱ⁾`) alongside the decoded samples in the same order.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::linalg::Matrix;

/// Mean Euclidean reconstruction error (least absolute deviation).
pub fn vae_loss(tape: &mut Tape, x_rep: Var, decoded: Var) -> Result<Var> {
    let n = tape.l2norm_of_diff(x_rep, decoded)?;
    Ok(tape.mean(n))
}

/// Mean squared reconstruction error.
pub fn mse_loss(tape: &mut Tape, x_rep: Var, decoded: Var) -> Result<Var> {
    let diff = tape.sub(x_rep, decoded)?;
    let n = tape.row_sq_norms(diff);
    Ok(tape.mean(n))
}

fn check_counts(tape: &Tape, gen: Var, hyp: Var) -> Result<()> {
    let (g, h) = (tape.value(gen).shape(), tape.value(hyp).shape());
    if g != h {
        return shape_err(format!("critic outputs differ in shape: {g:?} vs {h:?}"));
    }
    Ok(())
}

/// Critic objective `mean Dis(z_gen) − mean Dis(z_hyp)`.
pub fn w1_loss(tape: &mut Tape, gen: Var, hyp: Var) -> Result<Var> {
    check_counts(tape, gen, hyp)?;
    let mg = tape.mean(gen);
    let mh = tape.mean(hyp);
    tape.sub(mg, mh)
}

/// Generator objective `−mean Dis(z_gen)`.
pub fn gen_loss(tape: &mut Tape, gen: Var) -> Var {
    let m = tape.mean(gen);
    tape.scale(m, -1.0)
}

/// Binary cross-entropy of a logit discriminator that labels prior samples 1
/// and generated samples 0.
pub fn gan_critic_loss(tape: &mut Tape, gen: Var, hyp: Var) -> Result<Var> {
    check_counts(tape, gen, hyp)?;
    let sg = tape.softplus(gen);
    let neg = tape.scale(hyp, -1.0);
    let sh = tape.softplus(neg);
    let mg = tape.mean(sg);
    let mh = tape.mean(sh);
    tape.add(mg, mh)
}

/// Non-saturating generator loss `mean −log σ(Dis(z_gen))`.
pub fn gan_gen_loss(tape: &mut Tape, gen: Var) -> Var {
    let neg = tape.scale(gen, -1.0);
    let s = tape.softplus(neg);
    tape.mean(s)
}

/// `KL(N(μ, diag(e^lv)) ‖ N(0, I))` summed over coordinates, averaged over rows.
pub fn kl_diag_loss(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let var = tape.exp(logvar);
    let mu2 = tape.mul(mu, mu)?;
    let a = tape.add(var, mu2)?;
    let b = tape.sub(a, logvar)?;
    let per_row = tape.sum(b);
    let (n, d) = tape.value(mu).shape();
    // ½ Σ (e^lv + μ² − 1 − lv), mean over the n rows
    let scaled = tape.scale(per_row, 0.5 / n as f64);
    let offset = tape.constant(Matrix::filled(1, 1, 0.5 * d as f64));
    tape.sub(scaled, offset)
}

fn eval_scalar(build: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let root = build(&mut tape)?;
    Ok(tape.scalar(root))
}

/// [`vae_loss`] on plain matrices; `decoded` has `T` rows per row of `x`.
pub fn vae_loss_value(x: &Matrix, decoded: &Matrix, squared: bool) -> Result<f64> {
    if x.rows() == 0 || decoded.rows() % x.rows() != 0 || x.cols() != decoded.cols() {
        return shape_err("decoded samples must be T rows per input row");
    }
    let t = decoded.rows() / x.rows();
    eval_scalar(|tape| {
        let xr = tape.constant(crate::autodiff::repeat_rows(x, t));
        let dv = tape.constant(decoded.clone());
        if squared {
            mse_loss(tape, xr, dv)
        } else {
            vae_loss(tape, xr, dv)
        }
    })
}

fn column(v: &[f64]) -> Matrix {
    Matrix::from_vec(v.len(), 1, v.to_vec()).expect("column")
}

pub fn w1_loss_value(gen: &[f64], hyp: &[f64]) -> Result<f64> {
    eval_scalar(|tape| {
        let g = tape.constant(column(gen));
        let h = tape.constant(column(hyp));
        w1_loss(tape, g, h)
    })
}

pub fn gen_loss_value(gen: &[f64]) -> Result<f64> {
    eval_scalar(|tape| {
        let g = tape.constant(column(gen));
        Ok(gen_loss(tape, g))
    })
}
