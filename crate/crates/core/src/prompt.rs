//! Automatic positional-semantic prompting: per-layer coarse-mask heads,
//! multi-layer fusion, extremal point selection, point embedding, and the
//! pooled target embedding added onto the point tokens.

use std::f64::consts::PI;

use log::warn;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::LayerNorm;
use crate::params::{normal, xavier, ParamId, ParamStore};
use crate::tensor::{interpolate_bilinear, Tape, Tensor, Var};

/// Binarisation threshold shared by the coarse mask and decoder masks.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Three 1×1 convolutions (C → C/4 → C/16 → 1) with LayerNorm + GELU
/// between them.
#[derive(Clone, Debug)]
pub struct CoarseHead {
    convs: [(ParamId, ParamId); 3],
    norms: [LayerNorm; 2],
}

impl CoarseHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize) -> Self {
        let widths = [channels, channels / 4, channels / 16, 1];
        let convs = std::array::from_fn(|i| {
            let (cin, cout) = (widths[i], widths[i + 1]);
            let w = xavier(rng, cin, cout);
            (
                store.add(format!("{name}.conv{}.weight", i + 1), w, true),
                store.add(format!("{name}.conv{}.bias", i + 1), Tensor::zeros(&[cout]), true),
            )
        });
        let norms = [
            LayerNorm::new(store, &format!("{name}.norm1"), widths[1]),
            LayerNorm::new(store, &format!("{name}.norm2"), widths[2]),
        ];
        CoarseHead { convs, norms }
    }

    /// Maps an `h×w×C` tap grid to `h×w×1` logits.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tap: Var) -> Result<Var> {
        let mut x = tap;
        for (i, (w, b)) in self.convs.iter().enumerate() {
            let (w, b) = (tape.param(store, *w), tape.param(store, *b));
            x = tape.conv1x1(x, w, Some(b))?;
            if i < 2 {
                x = self.norms[i].forward(tape, store, x)?;
                x = tape.gelu(x);
            }
        }
        Ok(x)
    }
}

/// Element-wise mean of per-layer logit grids.
pub fn fuse_layers(tape: &mut Tape, per_layer: &[Var]) -> Result<Var> {
    let first = *per_layer
        .first()
        .ok_or_else(|| Error::invalid("fuse_layers", "no layer predictions"))?;
    let mut acc = first;
    for &l in &per_layer[1..] {
        acc = tape.add(acc, l)?;
    }
    Ok(if per_layer.len() == 1 {
        acc
    } else {
        tape.scale(acc, 1.0 / per_layer.len() as f64)
    })
}

/// Low-resolution foreground estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseMask {
    pub logits: Tensor,
    pub probabilities: Tensor,
    pub binary: Tensor,
    pub threshold: f64,
}

impl CoarseMask {
    pub fn from_logits(logits: Tensor, threshold: f64) -> Self {
        let probabilities = logits.map(crate::tensor::sigmoid);
        let binary = probabilities.map(|p| if p >= threshold { 1.0 } else { 0.0 });
        CoarseMask {
            logits,
            probabilities,
            binary,
            threshold,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.logits.shape()[0], self.logits.shape()[1])
    }

    pub fn foreground(&self) -> usize {
        self.binary.data().iter().filter(|&&v| v == 1.0).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointLabel {
    Positive,
    Negative,
}

impl PointLabel {
    pub fn index(self) -> usize {
        match self {
            PointLabel::Positive => 0,
            PointLabel::Negative => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PointLabel::Positive => "positive",
            PointLabel::Negative => "negative",
        }
    }
}

/// A labelled pixel position `(row, col)` in input-image space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Point {
    pub row: usize,
    pub col: usize,
    pub label: PointLabel,
}

/// Positive point at the highest interpolated probability, negative point at
/// the lowest. Ties resolve to the first pixel in row-major order.
pub fn select_points(mask: &CoarseMask, image_size: usize) -> Result<[Point; 2]> {
    let up = interpolate_bilinear(&mask.probabilities, image_size, image_size)?;
    let (mut hi, mut lo) = (0, 0);
    let d = up.data();
    for (i, &p) in d.iter().enumerate() {
        if p > d[hi] {
            hi = i;
        }
        if p < d[lo] {
            lo = i;
        }
    }
    if d[hi] == d[lo] {
        warn!("coarse mask is constant; both point prompts fall back to pixel (0, 0)");
    }
    let at = |i: usize, label| Point {
        row: i / image_size,
        col: i % image_size,
        label,
    };
    Ok([at(hi, PointLabel::Positive), at(lo, PointLabel::Negative)])
}

/// Random-Fourier point encoder with one learned embedding per label.
#[derive(Clone, Debug)]
pub struct PromptEncoder {
    fourier: ParamId,
    labels: ParamId,
    dim: usize,
}

/// Point tokens on a tape, one row per point.
#[derive(Clone, Debug)]
pub struct PromptTokens {
    pub tokens: Var,
    pub points: Vec<Point>,
}

impl PromptEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, dim: usize) -> Self {
        let fourier = store.add("prompt.pe_gaussian", normal(rng, &[2, dim / 2], 1.0), false);
        let labels = store.add("prompt.label_embed", normal(rng, &[2, dim], 0.02), true);
        PromptEncoder { fourier, labels, dim }
    }

    /// Fourier encoding of normalised `(x, y) ∈ [0,1]²`.
    fn encode_xy(&self, store: &ParamStore, x: f64, y: f64) -> Vec<f64> {
        let g = store.value(self.fourier);
        let half = self.dim / 2;
        let (cx, cy) = (2.0 * x - 1.0, 2.0 * y - 1.0);
        let proj: Vec<f64> = (0..half)
            .map(|j| 2.0 * PI * (cx * g.get2(0, j) + cy * g.get2(1, j)))
            .collect();
        proj.iter().map(|v| v.sin()).chain(proj.iter().map(|v| v.cos())).collect()
    }

    /// Positional encoding of a pixel centre.
    pub fn positional_encoding(&self, store: &ParamStore, row: usize, col: usize, size: usize) -> Tensor {
        let x = (col as f64 + 0.5) / size as f64;
        let y = (row as f64 + 0.5) / size as f64;
        Tensor::new(vec![1, self.dim], self.encode_xy(store, x, y)).expect("dim")
    }

    /// Encoding of every cell centre of a `g×g` grid, as `g²×D`.
    pub fn dense_encoding(&self, store: &ParamStore, grid: usize) -> Tensor {
        let mut data = Vec::with_capacity(grid * grid * self.dim);
        for r in 0..grid {
            for c in 0..grid {
                data.extend(self.encode_xy(
                    store,
                    (c as f64 + 0.5) / grid as f64,
                    (r as f64 + 0.5) / grid as f64,
                ));
            }
        }
        Tensor::new(vec![grid * grid, self.dim], data).expect("dim")
    }

    /// Embeds labelled points: positional encoding + label embedding.
    pub fn embed_points(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        points: &[Point],
        image_size: usize,
    ) -> Result<PromptTokens> {
        if points.is_empty() {
            return Err(Error::invalid("embed_points", "no points"));
        }
        let table = tape.param(store, self.labels);
        let mut rows = Vec::with_capacity(points.len());
        for p in points {
            if p.row >= image_size || p.col >= image_size {
                return Err(Error::invalid(
                    "embed_points",
                    format!("point ({}, {}) outside {image_size}×{image_size}", p.row, p.col),
                ));
            }
            let pe = tape.constant(self.positional_encoding(store, p.row, p.col, image_size));
            let i = p.label.index();
            let label = tape.slice_rows(table, i, i + 1)?;
            rows.push(tape.add(pe, label)?);
        }
        let tokens = tape.concat_rows(&rows)?;
        Ok(PromptTokens {
            tokens,
            points: points.to_vec(),
        })
    }
}

/// Pooled target embedding `T` (`1×D`) on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TargetEmbedding {
    pub embedding: Var,
    pub support_size: usize,
}

/// Mean of the `F` vectors under the binary coarse mask; zero when empty.
pub fn target_embedding(tape: &mut Tape, features: Var, mask: &CoarseMask) -> Result<TargetEmbedding> {
    let &[h, w, d] = tape.shape(features) else {
        return Err(Error::invalid("target_embedding", "features must be H×W×C"));
    };
    if mask.grid() != (h, w) {
        return Err(Error::shape("target_embedding", tape.shape(features), mask.binary.shape()));
    }
    let n = mask.foreground();
    if n == 0 {
        warn!("empty coarse mask; target embedding set to zero");
        let embedding = tape.constant(Tensor::zeros(&[1, d]));
        return Ok(TargetEmbedding {
            embedding,
            support_size: 0,
        });
    }
    let weights = Tensor::new(vec![1, h * w], mask.binary.data().to_vec())?;
    let weights = tape.constant(weights);
    let flat = tape.reshape(features, &[h * w, d])?;
    let sum = tape.matmul(weights, flat)?;
    let embedding = tape.scale(sum, 1.0 / n as f64);
    Ok(TargetEmbedding {
        embedding,
        support_size: n,
    })
}

/// Adds `T` to every prompt token.
pub fn positional_semantic_tokens(tape: &mut Tape, tokens: Var, target: Var) -> Result<Var> {
    tape.add_row(tokens, target)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{interpolate_bilinear, sigmoid};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| r.gen_range(-2.0..2.0))
    }

    #[test]
    fn coarse_head_zero_input_shape_and_composed_oracle() {
        let mut r = rng(1);
        let mut store = ParamStore::new();
        let head = CoarseHead::new(&mut store, &mut r, "h", 64);
        let mut t = Tape::new();
        let zero = t.constant(Tensor::zeros(&[8, 8, 64]));
        let y = head.forward(&mut t, &store, zero).unwrap();
        assert_eq!(t.shape(y), &[8, 8, 1]);
        assert!(t.value(y).data().iter().all(|v| *v == 0.0));

        // give the LayerNorms and biases non-trivial values
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.value(id).shape().to_vec();
            if shape.len() == 1 {
                *store.value_mut(id) = rand(&mut r, &shape);
            }
        }
        let x = rand(&mut r, &[3, 2, 64]);
        let xv = t.constant(x.clone());
        let y = head.forward(&mut t, &store, xv).unwrap();

        let get = |n: &str| store.value(store.find(n).unwrap()).clone();
        let stage = |rows: Vec<Vec<f64>>, w: &Tensor, b: &Tensor| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|px| {
                    (0..w.shape()[1])
                        .map(|o| b.data()[o] + (0..px.len()).map(|i| px[i] * w.get2(i, o)).sum::<f64>())
                        .collect()
                })
                .collect()
        };
        let norm_gelu = |rows: Vec<Vec<f64>>, g: &Tensor, b: &Tensor| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|px| {
                    let n = px.len() as f64;
                    let mean = px.iter().sum::<f64>() / n;
                    let var = px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    px.iter()
                        .enumerate()
                        .map(|(j, v)| {
                            let z = (v - mean) / (var + crate::nn::LN_EPS).sqrt() * g.data()[j] + b.data()[j];
                            0.5 * z * (1.0 + ((2.0 / PI).sqrt() * (z + 0.044715 * z.powi(3))).tanh())
                        })
                        .collect()
                })
                .collect()
        };
        let rows: Vec<Vec<f64>> = x.data().chunks(64).map(|c| c.to_vec()).collect();
        let s1 = norm_gelu(stage(rows, &get("h.conv1.weight"), &get("h.conv1.bias")), &get("h.norm1.gain"), &get("h.norm1.bias"));
        let s2 = norm_gelu(stage(s1, &get("h.conv2.weight"), &get("h.conv2.bias")), &get("h.norm2.gain"), &get("h.norm2.bias"));
        let s3 = stage(s2, &get("h.conv3.weight"), &get("h.conv3.bias"));
        for (got, want) in t.value(y).data().iter().zip(s3.iter().map(|v| v[0])) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_examples() {
        let mut r = rng(2);
        let mut t = Tape::new();
        let l = rand(&mut r, &[4, 4, 1]);
        let lv = t.constant(l.clone());
        let f = fuse_layers(&mut t, &[lv, lv, lv]).unwrap();
        assert!(t.value(f).max_abs_diff(&l) < 1e-15);

        let a = t.constant(Tensor::full(&[1, 1, 1], 10.0));
        let b = t.constant(Tensor::full(&[1, 1, 1], -10.0));
        let f = fuse_layers(&mut t, &[a, b]).unwrap();
        let m = CoarseMask::from_logits(t.value(f).clone(), MASK_THRESHOLD);
        assert_eq!(m.probabilities.data(), &[0.5]);
        assert_eq!(m.binary.data(), &[1.0]);

        let layers: Vec<Tensor> = (0..4).map(|_| rand(&mut r, &[3, 3, 1])).collect();
        let vars: Vec<Var> = layers.iter().map(|l| t.constant(l.clone())).collect();
        let f = fuse_layers(&mut t, &vars).unwrap();
        for i in 0..9 {
            let mean = layers.iter().map(|l| l.data()[i]).sum::<f64>() / 4.0;
            assert!((t.value(f).data()[i] - mean).abs() < 1e-12);
        }
        assert!(fuse_layers(&mut t, &[]).is_err());
        let odd = t.constant(Tensor::zeros(&[2, 3, 1]));
        assert!(fuse_layers(&mut t, &[vars[0], odd]).is_err());
    }

    fn mask_from_probs(p: Tensor) -> CoarseMask {
        let logits = p.map(|v| (v / (1.0 - v)).ln());
        let mut m = CoarseMask::from_logits(logits, MASK_THRESHOLD);
        m.probabilities = p;
        m
    }

    #[test]
    fn point_selection_constructed_and_constant() {
        let mut p = Tensor::full(&[4, 4, 1], 0.5);
        p.data_mut()[3 * 4 + 2] = 0.95;
        p.data_mut()[0] = 0.05;
        let [pos, neg] = select_points(&mask_from_probs(p), 16).unwrap();
        // cell (3,2) covers pixels rows 12..16, cols 8..12; peak at its centre pixels
        assert!((12..16).contains(&pos.row) && (8..12).contains(&pos.col), "{pos:?}");
        assert!(neg.row < 4 && neg.col < 4, "{neg:?}");
        assert_eq!(pos.label, PointLabel::Positive);

        let [pos, neg] = select_points(&mask_from_probs(Tensor::full(&[4, 4, 1], 0.3)), 16).unwrap();
        assert_eq!((pos.row, pos.col, neg.row, neg.col), (0, 0, 0, 0));
    }

    #[test]
    fn point_selection_matches_full_scan() {
        let mut r = rng(3);
        for _ in 0..50 {
            let p = Tensor::from_fn(&[8, 8, 1], |_| r.gen_range(0.0..1.0));
            let up = interpolate_bilinear(&p, 64, 64).unwrap();
            let [pos, neg] = select_points(&mask_from_probs(p), 64).unwrap();
            let mut best = (f64::NEG_INFINITY, 0);
            let mut worst = (f64::INFINITY, 0);
            for i in 0..64 * 64 {
                let v = up.data()[i];
                if v > best.0 {
                    best = (v, i);
                }
                if v < worst.0 {
                    worst = (v, i);
                }
            }
            assert_eq!(pos.row * 64 + pos.col, best.1);
            assert_eq!(neg.row * 64 + neg.col, worst.1);
        }
    }

    #[test]
    fn point_embedding_contracts() {
        let mut r = rng(4);
        let mut store = ParamStore::new();
        let enc = PromptEncoder::new(&mut store, &mut r, 64);
        let mut t = Tape::new();
        let pos = Point { row: 10, col: 20, label: PointLabel::Positive };
        let neg = Point { label: PointLabel::Negative, ..pos };
        let toks = enc.embed_points(&mut t, &store, &[pos, neg], 64).unwrap();
        let v = t.value(toks.tokens).clone();
        let table = store.value(store.find("prompt.label_embed").unwrap());
        for j in 0..64 {
            let delta = v.get2(0, j) - v.get2(1, j);
            let label_delta = table.get2(0, j) - table.get2(1, j);
            assert!((delta - label_delta).abs() < 1e-12);
        }
        let again = enc.embed_points(&mut t, &store, &[pos, neg], 64).unwrap();
        assert_eq!(t.value(again.tokens), &v);

        let bad = Point { row: 64, ..pos };
        assert!(enc.embed_points(&mut t, &store, &[bad], 64).is_err());

        let mut min = f64::INFINITY;
        for _ in 0..1000 {
            let (a, b) = loop {
                let a = (r.gen_range(0..64), r.gen_range(0..64));
                let b = (r.gen_range(0..64), r.gen_range(0..64));
                if a != b {
                    break (a, b);
                }
            };
            let ea = enc.positional_encoding(&store, a.0, a.1, 64);
            let eb = enc.positional_encoding(&store, b.0, b.1, 64);
            let d = ea.data().iter().zip(eb.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            min = min.min(d);
        }
        assert!(min > 0.0);
    }

    #[test]
    fn target_embedding_examples() {
        let mut r = rng(5);
        let mut t = Tape::new();
        let f = rand(&mut r, &[4, 4, 8]);
        let fv = t.constant(f.clone());

        let all = mask_from_probs(Tensor::full(&[4, 4, 1], 0.9));
        let te = target_embedding(&mut t, fv, &all).unwrap();
        assert_eq!(te.support_size, 16);
        for j in 0..8 {
            let gap = (0..16).map(|i| f.data()[i * 8 + j]).sum::<f64>() / 16.0;
            assert!((t.value(te.embedding).data()[j] - gap).abs() < 1e-12);
        }

        let empty = mask_from_probs(Tensor::full(&[4, 4, 1], 0.1));
        let te = target_embedding(&mut t, fv, &empty).unwrap();
        assert_eq!(te.support_size, 0);
        assert!(t.value(te.embedding).data().iter().all(|v| *v == 0.0));

        let probs = Tensor::from_fn(&[4, 4, 1], |_| r.gen_range(0.01..0.99));
        let m = mask_from_probs(probs);
        let te = target_embedding(&mut t, fv, &m).unwrap();
        let chosen: Vec<usize> = (0..16).filter(|&i| m.probabilities.data()[i] >= 0.5).collect();
        assert_eq!(te.support_size, chosen.len());
        for j in 0..8 {
            let mean = chosen.iter().map(|&i| f.data()[i * 8 + j]).sum::<f64>() / chosen.len() as f64;
            assert!((t.value(te.embedding).data()[j] - mean).abs() < 1e-12);
        }

        let wrong = mask_from_probs(Tensor::full(&[2, 2, 1], 0.9));
        assert!(target_embedding(&mut t, fv, &wrong).is_err());
    }

    #[test]
    fn semantic_tokens_add_target() {
        let mut r = rng(6);
        let mut t = Tape::new();
        let p = rand(&mut r, &[2, 8]);
        let pv = t.constant(p.clone());
        let zero = t.constant(Tensor::zeros(&[1, 8]));
        let s = positional_semantic_tokens(&mut t, pv, zero).unwrap();
        assert_eq!(t.value(s), &p);

        let target = rand(&mut r, &[1, 8]);
        let tv = t.constant(target.clone());
        let s = positional_semantic_tokens(&mut t, pv, tv).unwrap();
        for i in 0..2 {
            for j in 0..8 {
                assert_eq!(t.value(s).get2(i, j) - p.get2(i, j), target.data()[j] + p.get2(i, j) - p.get2(i, j));
            }
        }
        let neg = t.constant(target.map(|v| -v));
        let back = positional_semantic_tokens(&mut t, s, neg).unwrap();
        assert!(t.value(back).max_abs_diff(&p) < 1e-15);
        let bad = t.constant(Tensor::zeros(&[1, 4]));
        assert!(positional_semantic_tokens(&mut t, pv, bad).is_err());
        assert!(sigmoid(0.0) == 0.5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn points_lie_inside_and_are_ordered(seed in any::<u64>()) {
                let mut r = rng(seed);
                let p = Tensor::from_fn(&[8, 8, 1], |_| r.gen_range(0.001..0.999));
                let m = mask_from_probs(p);
                let up = interpolate_bilinear(&m.probabilities, 64, 64).unwrap();
                let [pos, neg] = select_points(&m, 64).unwrap();
                prop_assert!(pos.row < 64 && pos.col < 64 && neg.row < 64 && neg.col < 64);
                prop_assert!(up.data()[pos.row * 64 + pos.col] >= up.data()[neg.row * 64 + neg.col]);
            }
        }
    }
}
