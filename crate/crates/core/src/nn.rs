//! Small building blocks shared by the encoder, prompt generator and decoder.

use rand::Rng;

use crate::adaptation::AdaptedLinear;
use crate::error::{Error, Result};
use crate::params::{xavier, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layernorm(x, g, b, LN_EPS)
    }
}

/// Plain (never adapted) linear layer with Xavier weight and zero bias.
pub fn linear(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    bias: bool,
) -> AdaptedLinear {
    let b = bias.then(|| Tensor::zeros(&[out_dim]));
    AdaptedLinear::new(store, name, xavier(rng, out_dim, in_dim), b, true)
}

/// Scaled dot-product attention split over `heads` column groups.
///
/// `mask`, when given, is an additive `q×k` logit mask (0 or `-inf`) shared
/// by every head. Returns the concatenated head outputs and each head's
/// attention weights.
pub fn attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let dim = tape.shape(q)[1];
    if heads == 0 || dim % heads != 0 || tape.shape(k)[1] != dim || tape.shape(v)[1] != dim {
        return Err(Error::invalid(
            "attention",
            format!(
                "{heads} heads over q {:?}, k {:?}, v {:?}",
                tape.shape(q),
                tape.shape(k),
                tape.shape(v)
            ),
        ));
    }
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * hd, (h + 1) * hd)?,
                tape.slice_cols(k, h * hd, (h + 1) * hd)?,
                tape.slice_cols(v, h * hd, (h + 1) * hd)?,
            )
        };
        let logits = tape.matmul_nt(qh, kh)?;
        let mut logits = tape.scale(logits, scale);
        if let Some(m) = mask {
            logits = tape.add(logits, m)?;
        }
        let w = tape.softmax(logits, 1)?;
        outs.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let out = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    Ok((out, weights))
}
