//! Focal and dice losses and their weighted combination for both heads.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the focal term; dice gets `1 - lambda`.
    pub lambda: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.2,
            focal_gamma: 2.0,
            focal_alpha: 0.5,
            dice_eps: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) || self.focal_gamma < 0.0 || self.dice_eps < 0.0 {
            return Err(Error::Config("focal/dice parameters out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub coarse: f64,
    pub final_: f64,
    pub overall: f64,
    pub coarse_focal: f64,
    pub coarse_dice: f64,
    pub final_focal: f64,
    pub final_dice: f64,
}

fn check(tape: &Tape, probs: Var, gt: &Tensor, op: &'static str) -> Result<()> {
    if tape.value(probs).numel() != gt.numel() {
        return Err(Error::shape(op, tape.shape(probs), gt.shape()));
    }
    Ok(())
}

fn constant_like(tape: &mut Tape, like: Var, data: Vec<f64>) -> Result<Var> {
    let shape = tape.shape(like).to_vec();
    Ok(tape.constant(Tensor::new(shape, data)?))
}

/// Mean over pixels of `-α_t (1-p_t)^γ log p_t`.
pub fn focal_loss_var(tape: &mut Tape, probs: Var, gt: &Tensor, gamma: f64, alpha: f64) -> Result<Var> {
    check(tape, probs, gt, "focal_loss")?;
    let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    // p_t = (1 - g) + (2g - 1) p
    let sign = constant_like(tape, p, gt.data().iter().map(|g| 2.0 * g - 1.0).collect())?;
    let offset = constant_like(tape, p, gt.data().iter().map(|g| 1.0 - g).collect())?;
    let alpha_t = constant_like(
        tape,
        p,
        gt.data().iter().map(|g| g * alpha + (1.0 - g) * (1.0 - alpha)).collect(),
    )?;
    let sp = tape.mul(p, sign)?;
    let pt = tape.add(sp, offset)?;
    let log_pt = tape.log(pt);
    let term = if gamma == 0.0 {
        log_pt
    } else {
        let one_minus = tape.scale(pt, -1.0);
        let one_minus = tape.add_scalar(one_minus, 1.0);
        let w = tape.powf(one_minus, gamma);
        tape.mul(w, log_pt)?
    };
    let weighted = tape.mul(term, alpha_t)?;
    let m = tape.mean(weighted);
    Ok(tape.scale(m, -1.0))
}

/// `1 - (2Σpg + eps) / (Σp + Σg + eps)`.
pub fn dice_loss_var(tape: &mut Tape, probs: Var, gt: &Tensor, eps: f64) -> Result<Var> {
    check(tape, probs, gt, "dice_loss")?;
    let g = constant_like(tape, probs, gt.data().to_vec())?;
    let pg = tape.mul(probs, g)?;
    let inter = tape.sum(pg);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, eps);
    let sp = tape.sum(probs);
    let den = tape.add_scalar(sp, gt.sum() + eps);
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

fn eval(probs: &Tensor, build: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let l = build(&mut tape, p)?;
    Ok(tape.value(l).data()[0])
}

pub fn focal_loss(probs: &Tensor, gt: &Tensor, gamma: f64, alpha: f64) -> Result<f64> {
    eval(probs, |t, p| focal_loss_var(t, p, gt, gamma, alpha))
}

pub fn dice_loss(probs: &Tensor, gt: &Tensor, eps: f64) -> Result<f64> {
    eval(probs, |t, p| dice_loss_var(t, p, gt, eps))
}

/// `λ·focal + (1-λ)·dice` on logits; returns the loss and its two terms.
pub fn head_loss(tape: &mut Tape, logits: Var, gt: &Tensor, cfg: &LossConfig) -> Result<(Var, f64, f64)> {
    let probs = tape.sigmoid(logits);
    let focal = focal_loss_var(tape, probs, gt, cfg.focal_gamma, cfg.focal_alpha)?;
    let dice = dice_loss_var(tape, probs, gt, cfg.dice_eps)?;
    let a = tape.scale(focal, cfg.lambda);
    let b = tape.scale(dice, 1.0 - cfg.lambda);
    let loss = tape.add(a, b)?;
    let (f, d) = (tape.value(focal).data()[0], tape.value(dice).data()[0]);
    Ok((loss, f, d))
}

/// Coarse logits (feature resolution) are upscaled to the ground-truth size
/// before scoring; the result is `L_coarse + L_final`.
pub fn composite_loss(
    tape: &mut Tape,
    coarse_logits: Var,
    final_logits: Var,
    gt: &Tensor,
    cfg: &LossConfig,
) -> Result<(Var, LossReport)> {
    let &[h, w] = gt.shape() else {
        return Err(Error::invalid("composite_loss", "gt must be H×W"));
    };
    let coarse_up = tape.interpolate_bilinear(coarse_logits, h, w)?;
    let (lc, cf, cd) = head_loss(tape, coarse_up, gt, cfg)?;
    let (lf, ff, fd) = head_loss(tape, final_logits, gt, cfg)?;
    let overall = tape.add(lc, lf)?;
    let v = |t: &Tape, x: Var| t.value(x).data()[0];
    let report = LossReport {
        coarse: v(tape, lc),
        final_: v(tape, lf),
        overall: v(tape, overall),
        coarse_focal: cf,
        coarse_dice: cd,
        final_focal: ff,
        final_dice: fd,
    };
    Ok((overall, report))
}
