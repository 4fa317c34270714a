//! Miniature ViT image encoder with adapters on the query and value
//! projections and per-layer feature taps.

use rand::Rng;

use crate::adaptation::{AdaptMode, AdaptedLinear, AdapterConfig};
use crate::error::{Error, Result};
use crate::nn::{self, LayerNorm};
use crate::params::{normal, xavier, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// 1-based encoder layers whose outputs feed the coarse-mask heads.
    pub feature_tap_layers: Vec<usize>,
    /// Width of the neck output handed to the decoder.
    pub out_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            feature_tap_layers: vec![1, 2, 3, 4],
            out_dim: 32,
        }
    }
}

impl EncoderConfig {
    /// Side length of the feature grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Sorts the tap list; order carries no meaning.
    pub fn normalized(mut self) -> Self {
        self.feature_tap_layers.sort_unstable();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.embed_dim < 16 {
            return bad(format!("embed_dim {} below 16", self.embed_dim));
        }
        if self.out_dim < 2 || self.out_dim % 2 != 0 {
            return bad(format!("out_dim {} must be even and at least 2", self.out_dim));
        }
        let taps = &self.feature_tap_layers;
        if taps.is_empty() || taps.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("tap layers {taps:?} must be sorted and unique"));
        }
        if taps[0] == 0 || *taps.last().unwrap() != self.num_layers {
            return bad(format!(
                "tap layers {taps:?} must lie in [1, {}] and include the last layer",
                self.num_layers
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    q: AdaptedLinear,
    k: AdaptedLinear,
    v: AdaptedLinear,
    proj: AdaptedLinear,
    ln2: LayerNorm,
    fc1: AdaptedLinear,
    fc2: AdaptedLinear,
}

/// Per-tap feature grids (`g×g×D`) on a tape, keyed by 1-based layer.
#[derive(Clone, Debug)]
pub struct LayerFeatures {
    pub taps: Vec<(usize, Var)>,
    /// Neck output `g×g×out_dim`, the image embedding `F`.
    pub last: Var,
}

/// Detached copy of [`LayerFeatures`] values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSnapshot {
    pub taps: Vec<(usize, Tensor)>,
    pub last: Tensor,
}

impl LayerFeatures {
    pub fn snapshot(&self, tape: &Tape) -> FeatureSnapshot {
        FeatureSnapshot {
            taps: self.taps.iter().map(|(l, v)| (*l, tape.value(*v).clone())).collect(),
            last: tape.value(self.last).clone(),
        }
    }
}

impl FeatureSnapshot {
    /// Re-enters the snapshot on a tape as constants.
    pub fn to_tape(&self, tape: &mut Tape) -> LayerFeatures {
        let last = tape.constant(self.last.clone());
        let taps = self
            .taps
            .iter()
            .map(|(l, t)| (*l, tape.constant(t.clone())))
            .collect();
        LayerFeatures { taps, last }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    patch: AdaptedLinear,
    pos: ParamId,
    blocks: Vec<Block>,
    neck: AdaptedLinear,
    neck_norm: LayerNorm,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: EncoderConfig) -> Result<Self> {
        let cfg = cfg.normalized();
        cfg.validate()?;
        let d = cfg.embed_dim;
        let patch = AdaptedLinear::new(
            store,
            "encoder.patch_embed",
            xavier(rng, d, cfg.patch_dim()),
            Some(Tensor::zeros(&[d])),
            true,
        );
        let pos = store.add("encoder.pos_embed", normal(rng, &[cfg.tokens(), d], 0.02), true);
        let blocks = (0..cfg.num_layers)
            .map(|i| {
                let p = format!("encoder.blocks.{i}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{p}.norm1"), d),
                    q: nn::linear(store, rng, &format!("{p}.attn.q"), d, d, true),
                    k: nn::linear(store, rng, &format!("{p}.attn.k"), d, d, true),
                    v: nn::linear(store, rng, &format!("{p}.attn.v"), d, d, true),
                    proj: nn::linear(store, rng, &format!("{p}.attn.proj"), d, d, true),
                    ln2: LayerNorm::new(store, &format!("{p}.norm2"), d),
                    fc1: nn::linear(store, rng, &format!("{p}.mlp.fc1"), d, 4 * d, true),
                    fc2: nn::linear(store, rng, &format!("{p}.mlp.fc2"), 4 * d, d, true),
                }
            })
            .collect();
        let neck = nn::linear(store, rng, "encoder.neck", d, cfg.out_dim, true);
        let neck_norm = LayerNorm::new(store, "encoder.neck_norm", cfg.out_dim);
        Ok(Encoder {
            cfg,
            patch,
            pos,
            blocks,
            neck,
            neck_norm,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Attaches adapters to the query and value projection of every block.
    pub fn attach_adapters(
        &mut self,
        store: &mut ParamStore,
        rng: &mut impl Rng,
        mode: AdaptMode,
        cfg: AdapterConfig,
    ) -> Result<()> {
        for b in &mut self.blocks {
            b.q.attach(store, rng, mode, cfg)?;
            b.v.attach(store, rng, mode, cfg)?;
        }
        Ok(())
    }

    pub fn is_prefix(name: &str) -> bool {
        name.starts_with("encoder.")
    }

    /// Whether `name` is an adapter parameter (trainable during fine-tuning).
    pub fn is_adapter_param(name: &str) -> bool {
        Self::is_prefix(name)
            && (name.ends_with(".lora_a") || name.ends_with(".lora_b") || name.ends_with(".magnitude"))
    }

    /// Unfolds an `H×W×3` image into `tokens × (p·p·3)` patch rows.
    pub fn unfold(&self, image: &Tensor) -> Result<Tensor> {
        let s = self.cfg.image_size;
        if image.shape() != [s, s, 3] {
            return Err(Error::shape("patchify", image.shape(), &[s, s, 3]));
        }
        let p = self.cfg.patch_size;
        let g = self.cfg.grid();
        let src = image.data();
        let mut out = Vec::with_capacity(s * s * 3);
        for gy in 0..g {
            for gx in 0..g {
                for py in 0..p {
                    let row = (gy * p + py) * s + gx * p;
                    out.extend_from_slice(&src[row * 3..(row + p) * 3]);
                }
            }
        }
        Tensor::new(vec![g * g, self.cfg.patch_dim()], out)
    }

    /// Linear patch embedding plus learned positional embedding.
    pub fn patchify(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor) -> Result<Var> {
        let patches = tape.constant(self.unfold(image)?);
        let x = self.patch.forward(tape, store, patches)?;
        let pos = tape.param(store, self.pos);
        tape.add(x, pos)
    }

    /// Pre-norm transformer block `layer` (0-based).
    pub fn attention_block(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
        x: Var,
    ) -> Result<Var> {
        let b = &self.blocks[layer];
        let h = b.ln1.forward(tape, store, x)?;
        let q = b.q.forward(tape, store, h)?;
        let k = b.k.forward(tape, store, h)?;
        let v = b.v.forward(tape, store, h)?;
        let (att, _) = nn::attention(tape, q, k, v, self.cfg.num_heads, None)?;
        let att = b.proj.forward(tape, store, att)?;
        let x = tape.add(x, att)?;
        let h = b.ln2.forward(tape, store, x)?;
        let h = b.fc1.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = b.fc2.forward(tape, store, h)?;
        tape.add(x, h)
    }

    /// Runs every block and returns the token sequence after each one.
    pub fn forward_tokens(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor) -> Result<Vec<Var>> {
        let mut x = self.patchify(tape, store, image)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for l in 0..self.blocks.len() {
            x = self.attention_block(tape, store, l, x)?;
            outs.push(x);
        }
        Ok(outs)
    }

    /// Encodes an image into per-tap feature grids and the neck output.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor) -> Result<LayerFeatures> {
        let outs = self.forward_tokens(tape, store, image)?;
        let (g, d) = (self.cfg.grid(), self.cfg.embed_dim);
        let mut taps = Vec::with_capacity(self.cfg.feature_tap_layers.len());
        for &l in &self.cfg.feature_tap_layers {
            taps.push((l, tape.reshape(outs[l - 1], &[g, g, d])?));
        }
        let neck = self.neck(tape, store, *outs.last().expect("at least one layer"))?;
        let last = tape.reshape(neck, &[g, g, self.cfg.out_dim])?;
        Ok(LayerFeatures { taps, last })
    }

    /// Projects final-block tokens to `tokens × out_dim`.
    pub fn neck(&self, tape: &mut Tape, store: &ParamStore, tokens: Var) -> Result<Var> {
        let x = self.neck.forward(tape, store, tokens)?;
        self.neck_norm.forward(tape, store, x)
    }

    /// Encodes without keeping a tape around.
    pub fn encode_detached(&self, store: &ParamStore, image: &Tensor) -> Result<FeatureSnapshot> {
        let mut tape = Tape::new();
        let f = self.encode(&mut tape, store, image)?;
        Ok(f.snapshot(&tape))
    }

    /// Query projection of block `layer`, for tests and diagnostics.
    pub fn query_projection(&self, layer: usize) -> &AdaptedLinear {
        &self.blocks[layer].q
    }

    pub fn value_projection(&self, layer: usize) -> &AdaptedLinear {
        &self.blocks[layer].v
    }
}
