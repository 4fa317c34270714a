//! Low-rank (LoRA) and weight-decomposed low-rank (DoRA) adaptation of
//! frozen linear layers.
//!
//! A base weight `W0` is `d×k` (`out×in`). LoRA merges `W0 + s·B·A` with
//! `B: d×r`, `A: r×k` and `s = alpha / r`. DoRA rescales every column of the
//! LoRA-merged direction to the trainable magnitude `m` (`1×k`):
//!
//! ```text
//! W' = m · (W0 + s·B·A) / ‖W0 + s·B·A‖_c
//! ```
//!
//! `B` starts at zero and `m` at `‖W0‖_c`, so a freshly attached adapter
//! reproduces the frozen layer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{normal, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptMode {
    Frozen,
    Lora,
    Dora,
}

impl AdaptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AdaptMode::Frozen => "frozen",
            AdaptMode::Lora => "lora",
            AdaptMode::Dora => "dora",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "frozen" => Some(AdaptMode::Frozen),
            "lora" => Some(AdaptMode::Lora),
            "dora" => Some(AdaptMode::Dora),
            _ => None,
        }
    }
}

/// Rank and scaling of an adapter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 4,
            alpha: 4.0,
        }
    }
}

impl AdapterConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Clone, Copy, Debug)]
struct Adapter {
    a: ParamId,
    b: ParamId,
    magnitude: Option<ParamId>,
    scale: f64,
}

/// A linear layer `y = x·W'ᵀ + bias` whose effective weight `W'` is the base
/// weight, optionally adapted.
#[derive(Clone, Debug)]
pub struct AdaptedLinear {
    name: String,
    w0: ParamId,
    bias: Option<ParamId>,
    adapter: Option<Adapter>,
    mode: AdaptMode,
    out_dim: usize,
    in_dim: usize,
}

impl AdaptedLinear {
    /// Registers the base weight (`out×in`) and optional bias under `name`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        w0: Tensor,
        bias: Option<Tensor>,
        trainable: bool,
    ) -> Self {
        let (out_dim, in_dim) = (w0.shape()[0], w0.shape()[1]);
        let w0 = store.add(format!("{name}.weight"), w0, trainable);
        let bias = bias.map(|b| store.add(format!("{name}.bias"), b, trainable));
        AdaptedLinear {
            name: name.to_string(),
            w0,
            bias,
            adapter: None,
            mode: AdaptMode::Frozen,
            out_dim,
            in_dim,
        }
    }

    /// Freezes the base weight and attaches a LoRA or DoRA adapter.
    pub fn attach(
        &mut self,
        store: &mut ParamStore,
        rng: &mut impl Rng,
        mode: AdaptMode,
        cfg: AdapterConfig,
    ) -> Result<()> {
        if mode == AdaptMode::Frozen {
            return Ok(());
        }
        if self.adapter.is_some() {
            return Err(Error::invalid("attach", format!("`{}` already adapted", self.name)));
        }
        if cfg.rank == 0 || cfg.rank > self.out_dim.min(self.in_dim) {
            return Err(Error::invalid(
                "attach",
                format!("rank {} out of range for {}×{}", cfg.rank, self.out_dim, self.in_dim),
            ));
        }
        store.set_trainable(self.w0, false);
        if let Some(b) = self.bias {
            store.set_trainable(b, false);
        }
        let a = store.add(
            format!("{}.lora_a", self.name),
            normal(rng, &[cfg.rank, self.in_dim], 0.01),
            true,
        );
        let b = store.add(
            format!("{}.lora_b", self.name),
            Tensor::zeros(&[self.out_dim, cfg.rank]),
            true,
        );
        let magnitude = (mode == AdaptMode::Dora).then(|| {
            let norms = column_norms_of(store.value(self.w0));
            store.add(format!("{}.magnitude", self.name), norms, true)
        });
        self.adapter = Some(Adapter {
            a,
            b,
            magnitude,
            scale: cfg.scale(),
        });
        self.mode = mode;
        Ok(())
    }

    pub fn mode(&self) -> AdaptMode {
        self.mode
    }

    pub fn base_weight(&self) -> ParamId {
        self.w0
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    /// `(A, B, m)` parameter ids when adapted.
    pub fn adapter_params(&self) -> Option<(ParamId, ParamId, Option<ParamId>)> {
        self.adapter.map(|a| (a.a, a.b, a.magnitude))
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.out_dim, self.in_dim)
    }

    /// The effective weight `W'` on the tape, recomputed on every call.
    pub fn merged_weight(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let w0 = tape.param(store, self.w0);
        let Some(ad) = self.adapter else {
            return Ok(w0);
        };
        let a = tape.param(store, ad.a);
        let b = tape.param(store, ad.b);
        match ad.magnitude {
            Some(m) => {
                let m = tape.param(store, m);
                dora_merged(tape, w0, a, b, m, ad.scale)
            }
            None => lora_merged(tape, w0, a, b, ad.scale),
        }
    }

    /// `x·W'ᵀ + bias` for `x: n×in`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = self.merged_weight(tape, store)?;
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

/// Column-wise Euclidean norms of a `d×k` matrix, as `1×k`.
pub fn column_norms(tape: &mut Tape, w: Var) -> Result<Var> {
    tape.column_norms(w)
}

pub(crate) fn column_norms_of(w: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(w.clone());
    let n = tape.column_norms(v).expect("2-D weight");
    tape.value(n).clone()
}

/// `W0 + scale·B·A`.
pub fn lora_merged(tape: &mut Tape, w0: Var, a: Var, b: Var, scale: f64) -> Result<Var> {
    let (d, k) = (tape.shape(w0)[0], tape.shape(w0)[1]);
    let (bd, br) = (tape.shape(b)[0], tape.shape(b)[1]);
    let (ar, ak) = (tape.shape(a)[0], tape.shape(a)[1]);
    if bd != d || ak != k || ar != br {
        return Err(Error::Shape {
            op: "lora_merged",
            lhs: vec![bd, br],
            rhs: vec![ar, ak],
        });
    }
    let mut delta = tape.matmul(b, a)?;
    if scale != 1.0 {
        delta = tape.scale(delta, scale);
    }
    tape.add(w0, delta)
}

/// `m · (W0 + scale·B·A) / ‖W0 + scale·B·A‖_c`.
pub fn dora_merged(tape: &mut Tape, w0: Var, a: Var, b: Var, m: Var, scale: f64) -> Result<Var> {
    let direction = lora_merged(tape, w0, a, b, scale)?;
    let norms = tape.column_norms(direction)?;
    if let Some(column) = tape.value(norms).data().iter().position(|&v| v == 0.0) {
        return Err(Error::ZeroNormColumn { column });
    }
    if tape.value(m).numel() != tape.value(norms).numel() {
        return Err(Error::shape("dora_merged", tape.shape(m), tape.shape(norms)));
    }
    let m = tape.reshape(m, &[1, tape.value(norms).numel()])?;
    let ratio = tape.div(m, norms)?;
    tape.mul_row(direction, ratio)
}

/// `(trainable, total)` scalar parameter counts.
pub fn trainable_parameter_count(store: &ParamStore) -> (usize, usize) {
    store.count()
}
