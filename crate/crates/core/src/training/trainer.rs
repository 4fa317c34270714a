//! Mini-batch training loops for encoder pretraining and fine-tuning.

use std::collections::BTreeMap;
use std::fmt;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{composite_loss, LossConfig, LossReport};
use super::optim::{clip_grad_norm, AdamW, AdamWConfig, Schedule};
use crate::adaptation::AdaptedLinear;
use crate::data::Sample;
use crate::encoder::{Encoder, FeatureSnapshot};
use crate::error::{Error, Result};
use crate::metrics::{confusion, EvalReport};
use crate::model::MapSam;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Total epochs; a resumed run continues up to this count.
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_iters: u64,
    /// Decay horizon; 0 means `epochs × batches per epoch`.
    pub max_iters: u64,
    pub adamw: AdamWConfig,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 8,
            base_lr: 0.005,
            warmup_iters: 250,
            max_iters: 0,
            adamw: AdamWConfig::default(),
            clip_norm: 1.0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.base_lr >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("base_lr and clip_norm must be non-negative".into()));
        }
        Ok(())
    }

    pub fn schedule(&self, train_len: usize) -> Schedule {
        let per_epoch = train_len.div_ceil(self.batch_size) as u64;
        Schedule {
            base_lr: self.base_lr,
            warmup_iters: self.warmup_iters,
            max_iters: if self.max_iters > 0 {
                self.max_iters
            } else {
                (self.epochs as u64 * per_epoch).max(1)
            },
        }
    }
}

/// Mutable training progress, saved alongside parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimiser steps.
    pub step: u64,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(seed: u64, adamw: AdamWConfig) -> Self {
        TrainState {
            epoch: 0,
            step: 0,
            optimizer: AdamW::new(adamw),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// One line of the fine-tuning metric log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_coarse: f64,
    pub loss_final: f64,
    pub loss_overall: f64,
    pub val_iou: f64,
    pub val_f1: f64,
    pub lr: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:.8} {:.8} {:.8} {:.6} {:.6} {:.8e}",
            self.epoch,
            self.loss_coarse,
            self.loss_final,
            self.loss_overall,
            self.val_iou,
            self.val_f1,
            self.lr
        )
    }
}

impl EpochRecord {
    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Data(format!("malformed metric line `{line}`"));
        if f.len() != 7 {
            return Err(bad());
        }
        let n = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(EpochRecord {
            epoch: f[0].parse().map_err(|_| bad())?,
            loss_coarse: n(1)?,
            loss_final: n(2)?,
            loss_overall: n(3)?,
            val_iou: n(4)?,
            val_f1: n(5)?,
            lr: n(6)?,
        })
    }
}

/// Micro-aggregated reports for the final and coarse predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub final_: EvalReport,
    pub coarse: EvalReport,
}

/// Encoder snapshots per sample; empty when the encoder trains.
pub fn feature_cache(model: &MapSam, store: &ParamStore, samples: &[Sample]) -> Result<Vec<FeatureSnapshot>> {
    if !model.encoder_is_frozen(store) {
        return Ok(Vec::new());
    }
    samples.iter().map(|s| model.snapshot(store, &s.image)).collect()
}

pub fn evaluate_samples(
    model: &MapSam,
    store: &ParamStore,
    samples: &[Sample],
    cache: &[FeatureSnapshot],
    label: &str,
) -> Result<Evaluation> {
    let mut final_ = EvalReport::new(label);
    let mut coarse = EvalReport::new(format!("{label} coarse"));
    for (i, s) in samples.iter().enumerate() {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, store, &s.image, cache.get(i))?;
        let pred = crate::decoder::binarize(tape.value(out.final_logits()));
        final_.push(&s.id, confusion(&pred, &s.gt)?);
        let up = crate::tensor::interpolate_bilinear(tape.value(out.coarse_logits), s.size, s.size)?;
        coarse.push(&s.id, confusion(&crate::decoder::binarize(&up), &s.gt)?);
    }
    Ok(Evaluation { final_, coarse })
}

fn zero_grads(store: &ParamStore) -> BTreeMap<ParamId, Tensor> {
    store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, Tensor::zeros(p.value.shape())))
        .collect()
}

fn accumulate(into: &mut BTreeMap<ParamId, Tensor>, grads: BTreeMap<ParamId, Tensor>) {
    for (id, g) in grads {
        if let Some(acc) = into.get_mut(&id) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}

fn finish_step(
    store: &mut ParamStore,
    state: &mut TrainState,
    mut grads: BTreeMap<ParamId, Tensor>,
    batch: usize,
    cfg: &TrainConfig,
    schedule: &Schedule,
) -> Result<f64> {
    let inv = 1.0 / batch as f64;
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    if cfg.clip_norm > 0.0 {
        let norm = clip_grad_norm(&mut grads, cfg.clip_norm);
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm at step {}", state.step + 1)));
        }
    }
    let lr = schedule.lr_at(state.step + 1);
    state.optimizer.step(store, &grads, lr)?;
    state.step += 1;
    Ok(lr)
}

fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Fine-tunes every trainable parameter of `model` on `train`, validating on
/// `val` after each epoch. Frozen parameters are never written.
pub fn finetune(
    model: &MapSam,
    store: &mut ParamStore,
    state: &mut TrainState,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let size = model.config().encoder.image_size;
    if let Some(s) = train.iter().chain(val).find(|s| s.size != size) {
        return Err(Error::Config(format!(
            "tile `{}` is {}px but the model expects {size}px",
            s.id, s.size
        )));
    }
    let schedule = cfg.schedule(train.len());
    let (trainable, total) = store.count();
    info!(
        "fine-tuning {trainable} of {total} parameters ({:.2}%)",
        100.0 * trainable as f64 / total as f64
    );
    let train_cache = feature_cache(model, store, train)?;
    let val_cache = feature_cache(model, store, val)?;
    if !train_cache.is_empty() {
        debug!("encoder frozen; features cached");
    }

    let mut records = Vec::new();
    while state.epoch < cfg.epochs {
        let order = shuffled(&mut state.rng, train.len());
        let mut sums = LossReport::default();
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = zero_grads(store);
            for &i in batch {
                let s = &train[i];
                let mut tape = Tape::new();
                let out = model.forward(&mut tape, store, &s.image, train_cache.get(i))?;
                let (loss, rep) =
                    composite_loss(&mut tape, out.coarse_logits, out.final_logits(), &s.gt, &cfg.loss)?;
                if !rep.overall.is_finite() {
                    return Err(Error::Numeric(format!("loss is {} on tile `{}`", rep.overall, s.id)));
                }
                sums.coarse += rep.coarse;
                sums.final_ += rep.final_;
                sums.overall += rep.overall;
                accumulate(&mut grads, tape.backward(loss)?.into_params());
            }
            lr = finish_step(store, state, grads, batch.len(), cfg, &schedule)?;
        }
        state.epoch += 1;
        let n = train.len() as f64;
        let eval = evaluate_samples(model, store, val, &val_cache, "val")?;
        let rec = EpochRecord {
            epoch: state.epoch,
            loss_coarse: sums.coarse / n,
            loss_final: sums.final_ / n,
            loss_overall: sums.overall / n,
            val_iou: eval.final_.iou(),
            val_f1: eval.final_.f1(),
            lr,
        };
        info!("epoch {rec}");
        on_epoch(&rec)?;
        records.push(rec);
    }
    Ok(records)
}

/// Linear pixel head used only during pretraining.
pub fn pixel_head(store: &mut ParamStore, rng: &mut impl Rng, encoder: &Encoder) -> AdaptedLinear {
    let cfg = encoder.config();
    crate::nn::linear(store, rng, "pretrain.pixel_head", cfg.out_dim, cfg.patch_dim(), true)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

impl fmt::Display for PretrainRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:.8} {:.8e}", self.epoch, self.loss, self.lr)
    }
}

/// Masked-patch reconstruction loss for one image: masked patches are
/// replaced by mid-grey and the head must recover their pixels.
pub fn reconstruction_loss(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &Encoder,
    head: &AdaptedLinear,
    image: &Tensor,
    masked: &[bool],
) -> Result<crate::tensor::Var> {
    let cfg = encoder.config();
    let (p, s) = (cfg.patch_size, cfg.image_size);
    let g = cfg.grid();
    let mut corrupted = image.clone();
    let data = corrupted.data_mut();
    for (t, _) in masked.iter().enumerate().filter(|(_, &m)| m) {
        let (gy, gx) = (t / g, t % g);
        for y in gy * p..(gy + 1) * p {
            for x in gx * p..(gx + 1) * p {
                data[(y * s + x) * 3..(y * s + x) * 3 + 3].fill(0.5);
            }
        }
    }
    let tokens = encoder.forward_tokens(tape, store, &corrupted)?;
    let top = encoder.neck(tape, store, *tokens.last().expect("layers"))?;
    let pred = head.forward(tape, store, top)?;
    let target = tape.constant(encoder.unfold(image)?);
    let count = masked.iter().filter(|&&m| m).count().max(1);
    let weights: Vec<f64> = masked
        .iter()
        .flat_map(|&m| std::iter::repeat(m as u8 as f64).take(cfg.patch_dim()))
        .collect();
    let w = tape.constant(Tensor::new(vec![g * g, cfg.patch_dim()], weights)?);
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let sq = tape.mul(sq, w)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / (count * cfg.patch_dim()) as f64))
}

/// Trains the encoder and pixel head on masked-patch reconstruction.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    encoder: &Encoder,
    head: &AdaptedLinear,
    store: &mut ParamStore,
    state: &mut TrainState,
    images: &[Tensor],
    cfg: &TrainConfig,
    mask_ratio: f64,
    on_epoch: &mut dyn FnMut(&PretrainRecord) -> Result<()>,
) -> Result<Vec<PretrainRecord>> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Data("no pretraining images".into()));
    }
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::Config(format!("mask_ratio {mask_ratio} outside [0, 1)")));
    }
    let tokens = encoder.config().tokens();
    let n_masked = ((tokens as f64 * mask_ratio).round() as usize).clamp(1, tokens);
    let schedule = cfg.schedule(images.len());
    let mut records = Vec::new();
    while state.epoch < cfg.epochs {
        let order = shuffled(&mut state.rng, images.len());
        let mut total = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = zero_grads(store);
            for &i in batch {
                let mut masked = vec![false; tokens];
                for t in rand::seq::index::sample(&mut state.rng, tokens, n_masked) {
                    masked[t] = true;
                }
                let mut tape = Tape::new();
                let loss = reconstruction_loss(&mut tape, store, encoder, head, &images[i], &masked)?;
                let v = tape.value(loss).data()[0];
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("reconstruction loss is {v}")));
                }
                total += v;
                accumulate(&mut grads, tape.backward(loss)?.into_params());
            }
            lr = finish_step(store, state, grads, batch.len(), cfg, &schedule)?;
        }
        state.epoch += 1;
        let rec = PretrainRecord {
            epoch: state.epoch,
            loss: total / images.len() as f64,
            lr,
        };
        info!("pretrain epoch {rec}");
        on_epoch(&rec)?;
        records.push(rec);
    }
    Ok(records)
}
