//! Two-way transformer mask decoder with masked token-to-image attention.
//!
//! Each layer runs token self-attention, token-to-image cross-attention
//! restricted to the previous layer's binary mask, a token MLP, unmasked
//! image-to-token cross-attention, and a mask head whose thresholded output
//! becomes the next layer's attention mask.

use log::debug;
use rand::Rng;

use crate::adaptation::AdaptedLinear;
use crate::error::{Error, Result};
use crate::nn::{self, LayerNorm};
use crate::params::{normal, ParamId, ParamStore};
use crate::prompt::MASK_THRESHOLD;
use crate::tensor::{sigmoid, Tape, Tensor, Var};

/// `q`, `k`, `v` projections of one single-head attention.
#[derive(Clone, Debug)]
pub struct Projections {
    pub f_q: AdaptedLinear,
    pub f_k: AdaptedLinear,
    pub f_v: AdaptedLinear,
}

impl Projections {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize) -> Self {
        Projections {
            f_q: nn::linear(store, rng, &format!("{name}.q"), d, d, true),
            f_k: nn::linear(store, rng, &format!("{name}.k"), d, d, true),
            f_v: nn::linear(store, rng, &format!("{name}.v"), d, d, true),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayerWeights {
    pub self_attn: Projections,
    pub norm1: LayerNorm,
    pub token_to_image: Projections,
    pub norm2: LayerNorm,
    pub mlp: (AdaptedLinear, AdaptedLinear),
    pub norm3: LayerNorm,
    pub image_to_token: Projections,
    pub norm4: LayerNorm,
    /// Bias-free two-layer projection of the mask token, tied across layers.
    pub mask_head: (AdaptedLinear, AdaptedLinear),
}

impl DecoderLayerWeights {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        mask_head: (AdaptedLinear, AdaptedLinear),
    ) -> Self {
        DecoderLayerWeights {
            self_attn: Projections::new(store, rng, &format!("{name}.self_attn"), d),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            token_to_image: Projections::new(store, rng, &format!("{name}.token_to_image"), d),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            mlp: (
                nn::linear(store, rng, &format!("{name}.mlp.fc1"), d, d, true),
                nn::linear(store, rng, &format!("{name}.mlp.fc2"), d, d, true),
            ),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d),
            image_to_token: Projections::new(store, rng, &format!("{name}.image_to_token"), d),
            norm4: LayerNorm::new(store, &format!("{name}.norm4"), d),
            mask_head,
        }
    }
}

/// Decoder state entering a layer.
#[derive(Clone, Debug)]
pub struct DecoderState {
    /// Prompt tokens followed by the mask token, `(N+1)×D`.
    pub tokens: Var,
    /// Flattened image features, `(h·w)×D`.
    pub image: Var,
    /// Binary `h×w×1` mask from the previous layer.
    pub attention_mask: Tensor,
    pub layer_index: usize,
}

/// Additive logit mask: 0 on foreground cells, `-inf` elsewhere, repeated
/// for every token row. `None` when the mask is empty (unmasked fallback).
pub fn additive_mask(mask: &Tensor, rows: usize) -> Option<Tensor> {
    if mask.data().iter().all(|&v| v != 1.0) {
        return None;
    }
    let row: Vec<f64> = mask
        .data()
        .iter()
        .map(|&v| if v == 1.0 { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    let n = row.len();
    Some(Tensor::new(vec![rows, n], row.repeat(rows)).expect("mask shape"))
}

/// `X_l = softmax(M_{l-1} + Q Kᵀ/√d) V + X_{l-1}`.
///
/// With `masked = false`, or when the mask is empty, plain cross-attention
/// is used. Returns the updated tokens and the attention weights.
pub fn masked_cross_attention(
    tape: &mut Tape,
    store: &ParamStore,
    state: &DecoderState,
    weights: &Projections,
    image_pe: Option<Var>,
    masked: bool,
) -> Result<(Var, Var)> {
    let pixels = tape.shape(state.image)[0];
    if state.attention_mask.numel() != pixels {
        return Err(Error::shape(
            "masked_cross_attention",
            state.attention_mask.shape(),
            tape.shape(state.image),
        ));
    }
    let keys_in = match image_pe {
        Some(pe) => tape.add(state.image, pe)?,
        None => state.image,
    };
    let q = weights.f_q.forward(tape, store, state.tokens)?;
    let k = weights.f_k.forward(tape, store, keys_in)?;
    let v = weights.f_v.forward(tape, store, state.image)?;
    let rows = tape.shape(state.tokens)[0];
    let mask = if masked {
        let m = additive_mask(&state.attention_mask, rows);
        if m.is_none() {
            debug!("layer {}: empty attention mask, attending everywhere", state.layer_index);
        }
        m.map(|m| tape.constant(m))
    } else {
        None
    };
    let (att, w) = nn::attention(tape, q, k, v, 1, mask)?;
    Ok((tape.add(att, state.tokens)?, w[0]))
}

/// Per-pixel dot product between the projected mask token (last token row)
/// and the image features, as an `h×w×1` logit grid.
pub fn mask_head(
    tape: &mut Tape,
    store: &ParamStore,
    head: &(AdaptedLinear, AdaptedLinear),
    tokens: Var,
    image: Var,
    grid: (usize, usize),
) -> Result<Var> {
    let n = tape.shape(tokens)[0];
    if n == 0 {
        return Err(Error::invalid("mask_head", "no mask token"));
    }
    let tok = tape.slice_rows(tokens, n - 1, n)?;
    let h = head.0.forward(tape, store, tok)?;
    let h = tape.gelu(h);
    let proj = head.1.forward(tape, store, h)?;
    let logits = tape.matmul_nt(image, proj)?;
    tape.reshape(logits, &[grid.0, grid.1, 1])
}

/// Output of one decoder layer.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub state: DecoderState,
    pub logits: Var,
    pub cross_weights: Var,
}

/// Binary mask `sigmoid(logits) ≥ 0.5`.
pub fn binarize(logits: &Tensor) -> Tensor {
    logits.map(|v| if sigmoid(v) >= MASK_THRESHOLD { 1.0 } else { 0.0 })
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    layers: Vec<DecoderLayerWeights>,
    mask_token: ParamId,
    dim: usize,
}

/// Result of [`MaskDecoder::decode`].
#[derive(Clone, Debug)]
pub struct DecodeOutput {
    /// Final logits at feature resolution, `h×w×1`.
    pub lowres_logits: Var,
    /// Final logits at image resolution, `S×S×1`.
    pub logits: Var,
    /// `M_0` (initial) through `M_L`, each binary `h×w×1`.
    pub masks: Vec<Tensor>,
    pub cross_weights: Vec<Var>,
}

impl MaskDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, dim: usize, num_layers: usize) -> Self {
        let mask_token = store.add("decoder.mask_token", normal(rng, &[1, dim], 0.02), true);
        // only the last layer's logits reach the loss, so a per-layer head
        // would leave intermediate masks untrained
        let head = (
            nn::linear(store, rng, "decoder.mask_head.fc1", dim, dim, false),
            nn::linear(store, rng, "decoder.mask_head.fc2", dim, dim, false),
        );
        let layers = (0..num_layers)
            .map(|i| {
                DecoderLayerWeights::new(store, rng, &format!("decoder.layers.{i}"), dim, head.clone())
            })
            .collect();
        MaskDecoder {
            layers,
            mask_token,
            dim,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, i: usize) -> &DecoderLayerWeights {
        &self.layers[i]
    }

    pub fn mask_token(&self) -> ParamId {
        self.mask_token
    }

    /// One full decoder layer.
    pub fn decoder_layer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        state: &DecoderState,
        image_pe: Option<Var>,
        grid: (usize, usize),
        masked: bool,
    ) -> Result<LayerOutput> {
        let w = &self.layers[state.layer_index];

        let q = w.self_attn.f_q.forward(tape, store, state.tokens)?;
        let k = w.self_attn.f_k.forward(tape, store, state.tokens)?;
        let v = w.self_attn.f_v.forward(tape, store, state.tokens)?;
        let (sa, _) = nn::attention(tape, q, k, v, 1, None)?;
        let x = tape.add(state.tokens, sa)?;
        let x = w.norm1.forward(tape, store, x)?;

        let mid = DecoderState {
            tokens: x,
            ..state.clone()
        };
        let (x, cross_weights) =
            masked_cross_attention(tape, store, &mid, &w.token_to_image, image_pe, masked)?;
        let x = w.norm2.forward(tape, store, x)?;

        let h = w.mlp.0.forward(tape, store, x)?;
        let h = tape.relu(h);
        let h = w.mlp.1.forward(tape, store, h)?;
        let x = tape.add(x, h)?;
        let x = w.norm3.forward(tape, store, x)?;

        let q_in = match image_pe {
            Some(pe) => tape.add(state.image, pe)?,
            None => state.image,
        };
        let q = w.image_to_token.f_q.forward(tape, store, q_in)?;
        let k = w.image_to_token.f_k.forward(tape, store, x)?;
        let v = w.image_to_token.f_v.forward(tape, store, x)?;
        let (ia, _) = nn::attention(tape, q, k, v, 1, None)?;
        let img = tape.add(state.image, ia)?;
        let img = w.norm4.forward(tape, store, img)?;

        let logits = mask_head(tape, store, &w.mask_head, x, img, grid)?;
        let next_mask = binarize(tape.value(logits));
        Ok(LayerOutput {
            state: DecoderState {
                tokens: x,
                image: img,
                attention_mask: next_mask,
                layer_index: state.layer_index + 1,
            },
            logits,
            cross_weights,
        })
    }

    /// Runs every layer from the coarse binary mask and upsamples the final
    /// logits to `image_size`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        prompt_tokens: Var,
        initial_mask: &Tensor,
        image_pe: Option<&Tensor>,
        image_size: usize,
        masked: bool,
    ) -> Result<DecodeOutput> {
        let &[h, w, d] = tape.shape(features) else {
            return Err(Error::invalid("decode", "features must be H×W×C"));
        };
        if d != self.dim || initial_mask.numel() != h * w {
            return Err(Error::shape("decode", tape.shape(features), initial_mask.shape()));
        }
        let image = tape.reshape(features, &[h * w, d])?;
        let mask_token = tape.param(store, self.mask_token);
        let tokens = tape.concat_rows(&[prompt_tokens, mask_token])?;
        let pe = image_pe.map(|p| tape.constant(p.clone()));

        let mut state = DecoderState {
            tokens,
            image,
            attention_mask: initial_mask.clone(),
            layer_index: 0,
        };
        let mut masks = vec![initial_mask.clone()];
        let mut cross_weights = Vec::with_capacity(self.layers.len());
        let mut logits = None;
        for _ in 0..self.layers.len() {
            let out = self.decoder_layer(tape, store, &state, pe, (h, w), masked)?;
            masks.push(out.state.attention_mask.clone());
            cross_weights.push(out.cross_weights);
            logits = Some(out.logits);
            state = out.state;
        }
        let lowres_logits = logits.ok_or_else(|| Error::invalid("decode", "zero decoder layers"))?;
        let logits = tape.interpolate_bilinear(lowres_logits, image_size, image_size)?;
        Ok(DecodeOutput {
            lowres_logits,
            logits,
            masks,
            cross_weights,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    const D: usize = 16;
    const G: usize = 4;

    fn rand(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    fn setup(seed: u64) -> (ChaCha8Rng, ParamStore, MaskDecoder) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dec = MaskDecoder::new(&mut store, &mut r, D, 2);
        (r, store, dec)
    }

    fn state(t: &mut Tape, r: &mut ChaCha8Rng, mask: Tensor) -> DecoderState {
        DecoderState {
            tokens: t.constant(rand(r, &[3, D])),
            image: t.constant(rand(r, &[G * G, D])),
            attention_mask: mask,
            layer_index: 0,
        }
    }

    fn random_mask(r: &mut ChaCha8Rng) -> Tensor {
        loop {
            let m = Tensor::from_fn(&[G, G, 1], |_| if r.gen_bool(0.4) { 1.0 } else { 0.0 });
            if m.sum() > 0.0 {
                return m;
            }
        }
    }

    #[test]
    fn all_ones_mask_equals_plain_attention() {
        let (mut r, store, dec) = setup(1);
        let mut t = Tape::new();
        let s = state(&mut t, &mut r, Tensor::full(&[G, G, 1], 1.0));
        let w = &dec.layer(0).token_to_image;
        let (masked, _) = masked_cross_attention(&mut t, &store, &s, w, None, true).unwrap();
        let (plain, _) = masked_cross_attention(&mut t, &store, &s, w, None, false).unwrap();
        assert!(t.value(masked).max_abs_diff(t.value(plain)) < 1e-12);
    }

    #[test]
    fn zero_value_projection_is_residual_identity() {
        let (mut r, mut store, dec) = setup(2);
        let v = &dec.layer(0).token_to_image.f_v;
        *store.value_mut(v.base_weight()) = Tensor::zeros(&[D, D]);
        *store.value_mut(v.bias().unwrap()) = Tensor::zeros(&[D]);
        let mut t = Tape::new();
        let m = random_mask(&mut r);
        let s = state(&mut t, &mut r, m);
        let (x, _) =
            masked_cross_attention(&mut t, &store, &s, &dec.layer(0).token_to_image, None, true).unwrap();
        assert_eq!(t.value(x), t.value(s.tokens));
    }

    #[test]
    fn masked_pixels_get_zero_weight_and_rest_renormalise() {
        let (mut r, store, dec) = setup(3);
        for _ in 0..20 {
            let mut t = Tape::new();
            let m = random_mask(&mut r);
            let s = state(&mut t, &mut r, m.clone());
            let proj = &dec.layer(0).token_to_image;
            let (_, w) = masked_cross_attention(&mut t, &store, &s, proj, None, true).unwrap();
            // restricted-softmax oracle over visible pixels
            let q = proj.f_q.forward(&mut t, &store, s.tokens).unwrap();
            let k = proj.f_k.forward(&mut t, &store, s.image).unwrap();
            let (q, k) = (t.value(q).clone(), t.value(k).clone());
            for row in 0..3 {
                let logits: Vec<f64> = (0..G * G)
                    .map(|p| (0..D).map(|j| q.get2(row, j) * k.get2(p, j)).sum::<f64>() / (D as f64).sqrt())
                    .collect();
                let vis: Vec<usize> = (0..G * G).filter(|&p| m.data()[p] == 1.0).collect();
                let mx = vis.iter().map(|&p| logits[p]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = vis.iter().map(|&p| (logits[p] - mx).exp()).sum();
                for p in 0..G * G {
                    let got = t.value(w).get2(row, p);
                    if m.data()[p] == 0.0 {
                        assert_eq!(got, 0.0);
                    } else {
                        assert!((got - (logits[p] - mx).exp() / z).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn empty_mask_falls_back_to_unmasked() {
        let (mut r, store, dec) = setup(4);
        let mut t = Tape::new();
        let s = state(&mut t, &mut r, Tensor::zeros(&[G, G, 1]));
        let proj = &dec.layer(0).token_to_image;
        let (a, w) = masked_cross_attention(&mut t, &store, &s, proj, None, true).unwrap();
        let (b, _) = masked_cross_attention(&mut t, &store, &s, proj, None, false).unwrap();
        assert!(t.value(a).data().iter().all(|v| v.is_finite()));
        assert!(t.value(w).data().iter().all(|v| *v > 0.0));
        assert_eq!(t.value(a), t.value(b));
    }

    fn zero_mask_heads(store: &mut ParamStore, dec: &MaskDecoder) {
        for i in 0..dec.num_layers() {
            let (a, b) = &dec.layer(i).mask_head;
            *store.value_mut(a.base_weight()) = Tensor::zeros(&[D, D]);
            *store.value_mut(b.base_weight()) = Tensor::zeros(&[D, D]);
        }
    }

    #[test]
    fn zero_mask_head_keeps_all_ones_masks() {
        let (mut r, mut store, dec) = setup(5);
        zero_mask_heads(&mut store, &dec);
        let mut t = Tape::new();
        let f = t.constant(rand(&mut r, &[G, G, D]));
        let p = t.constant(rand(&mut r, &[2, D]));
        let out = dec
            .decode(&mut t, &store, f, p, &Tensor::full(&[G, G, 1], 1.0), None, 16, true)
            .unwrap();
        assert_eq!(out.masks.len(), 3);
        for m in &out.masks {
            assert!(m.data().iter().all(|v| *v == 1.0));
        }
    }

    #[test]
    fn decoder_layer_is_deterministic_and_trains_every_projection() {
        let (mut r, store, dec) = setup(6);
        let run = |r: &mut ChaCha8Rng| {
            let mut t = Tape::new();
            let tokens = t.leaf(rand(r, &[3, D]), true);
            let image = t.leaf(rand(r, &[G * G, D]), true);
            let s = DecoderState {
                tokens,
                image,
                attention_mask: Tensor::from_fn(&[G, G, 1], |i| (i % 2) as f64),
                layer_index: 0,
            };
            let out = dec.decoder_layer(&mut t, &store, &s, None, (G, G), true).unwrap();
            let snapshot = (t.value(out.state.tokens).clone(), t.value(out.logits).clone());
            let probs = t.sigmoid(out.logits);
            let loss = t.sum(probs);
            (snapshot, t.backward(loss).unwrap())
        };
        let (a, grads) = run(&mut r.clone());
        let (b, _) = run(&mut r);
        assert_eq!(a, b);
        let w = dec.layer(0);
        for lin in [&w.token_to_image.f_q, &w.token_to_image.f_k, &w.token_to_image.f_v, &w.mask_head.0, &w.mask_head.1] {
            let g = grads.param(lin.base_weight()).expect("gradient present");
            assert!(g.data().iter().any(|v| *v != 0.0));
        }
    }

    #[test]
    fn mask_head_contracts() {
        let (mut r, store, dec) = setup(7);
        let head = &dec.layer(0).mask_head;
        let mut t = Tape::new();
        let image = rand(&mut r, &[G * G, D]);
        let iv = t.constant(image.clone());
        let zero = t.constant(Tensor::zeros(&[3, D]));
        let l = mask_head(&mut t, &store, head, zero, iv, (G, G)).unwrap();
        assert!(t.value(l).data().iter().all(|v| *v == 0.0));

        let tok = rand(&mut r, &[3, D]);
        let tv = t.constant(tok.clone());
        let same = t.constant(Tensor::from_fn(&[G * G, D], |i| (i % D) as f64 * 0.1));
        let l = mask_head(&mut t, &store, head, tv, same, (G, G)).unwrap();
        let first = t.value(l).data()[0];
        assert!(t.value(l).data().iter().all(|v| *v == first));

        let l = mask_head(&mut t, &store, head, tv, iv, (G, G)).unwrap();
        let w1 = store.value(head.0.base_weight());
        let w2 = store.value(head.1.base_weight());
        let m: Vec<f64> = (0..D).map(|o| (0..D).map(|i| tok.get2(2, i) * w1.get2(o, i)).sum()).collect();
        let m: Vec<f64> = m.iter().map(|&x| crate::tensor::tape_gelu(x)).collect();
        let p: Vec<f64> = (0..D).map(|o| (0..D).map(|i| m[i] * w2.get2(o, i)).sum()).collect();
        for px in 0..G * G {
            let want: f64 = (0..D).map(|j| image.get2(px, j) * p[j]).sum();
            assert!((t.value(l).data()[px] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_shape_and_zero_weights_give_constant_map() {
        let (mut r, mut store, dec) = setup(8);
        let mut t = Tape::new();
        let f = t.constant(rand(&mut r, &[G, G, D]));
        let p = t.constant(rand(&mut r, &[2, D]));
        let m = random_mask(&mut r);
        let out = dec.decode(&mut t, &store, f, p, &m, None, 16, true).unwrap();
        assert_eq!(t.shape(out.logits), &[16, 16, 1]);
        assert_eq!(t.shape(out.lowres_logits), &[G, G, 1]);

        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = Tensor::zeros(&shape);
        }
        let out = dec.decode(&mut t, &store, f, p, &m, None, 16, true).unwrap();
        let v = t.value(out.logits);
        assert!(v.data().iter().all(|x| *x == v.data()[0]));
    }
}
