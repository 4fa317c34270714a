//! Finite-difference check of the whole training loss against the tape.

use rand::Rng;

use super::loss::{composite_loss, LossConfig};
use crate::data::Sample;
use crate::error::Result;
use crate::model::{ForwardOutput, MapSam};
use crate::params::{ParamId, ParamStore};
use crate::tensor::gradcheck::relative_error;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    /// Scalars compared.
    pub checked: usize,
    /// Scalars skipped because a perturbation changed a discrete decision.
    pub skipped: usize,
    pub worst_rel_err: f64,
    /// Name and index of the worst scalar.
    pub worst_at: Option<(String, usize)>,
}

/// Point picks and binary masks; central differences are only meaningful
/// while these stay fixed.
fn discrete_state(out: &ForwardOutput) -> (Vec<usize>, Tensor, Vec<Tensor>) {
    let pts = out.points.iter().flat_map(|p| [p.row, p.col]).collect();
    (pts, out.coarse.binary.clone(), out.decode.masks.clone())
}

fn loss_of(
    model: &MapSam,
    store: &ParamStore,
    sample: &Sample,
    cfg: &LossConfig,
) -> Result<(Tape, Var, (Vec<usize>, Tensor, Vec<Tensor>))> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, store, &sample.image, None)?;
    let (loss, _) = composite_loss(&mut tape, out.coarse_logits, out.final_logits(), &sample.gt, cfg)?;
    let state = discrete_state(&out);
    Ok((tape, loss, state))
}

/// Compares the gradient of the composite loss with central differences on
/// a random `fraction` of all parameter scalars, trainable or not.
pub fn model_gradient_check(
    model: &MapSam,
    store: &ParamStore,
    sample: &Sample,
    cfg: &LossConfig,
    fraction: f64,
    h: f64,
    rng: &mut impl Rng,
) -> Result<GradientCheck> {
    let mut all = store.clone();
    all.set_trainable_where(true, |_| true);
    let (mut tape, loss, state0) = loss_of(model, &all, sample, cfg)?;
    let grads = tape.backward(loss)?;

    let scalars: Vec<(ParamId, usize)> = all
        .iter()
        .flat_map(|(id, p)| (0..p.value.numel()).map(move |i| (id, i)))
        .collect();
    let n = ((scalars.len() as f64 * fraction).ceil() as usize).clamp(1, scalars.len());
    let mut report = GradientCheck {
        checked: 0,
        skipped: 0,
        worst_rel_err: 0.0,
        worst_at: None,
    };
    for k in rand::seq::index::sample(rng, scalars.len(), n) {
        let (id, i) = scalars[k];
        let mut values = [0.0; 2];
        let mut stable = true;
        for (j, sign) in [1.0, -1.0].into_iter().enumerate() {
            let mut s = all.clone();
            s.value_mut(id).data_mut()[i] += sign * h;
            let (t, l, st) = loss_of(model, &s, sample, cfg)?;
            stable &= st == state0;
            values[j] = t.value(l).data()[0];
        }
        if !stable {
            report.skipped += 1;
            continue;
        }
        let numeric = (values[0] - values[1]) / (2.0 * h);
        let analytic = grads.param(id).map_or(0.0, |g| g.data()[i]);
        let err = relative_error(analytic, numeric, 1e-6);
        if err > report.worst_rel_err || report.worst_at.is_none() {
            report.worst_rel_err = err.max(report.worst_rel_err);
            report.worst_at = Some((all.get(id).name.clone(), i));
        }
        report.checked += 1;
    }
    Ok(report)
}
