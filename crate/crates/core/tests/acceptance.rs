//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs with `harness = false`, so the lines are always shown. Set
//! `ACCEPTANCE_ONLY=6,7` to run a subset and `ACCEPTANCE_STRICT=1` to make
//! a failed criterion fail the test target.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use mapsam::ablation::{Ablation, AblationData, AblationTable};
use mapsam::adaptation::{AdaptMode, AdapterConfig};
use mapsam::config::RunConfig;
use mapsam::data::{build_dataset, DatasetSplit, FeatureClass, Sample, Split};
use mapsam::decoder::{masked_cross_attention, DecoderState};
use mapsam::encoder::{Encoder, EncoderConfig};
use mapsam::metrics::{ConfusionCounts, EvalReport};
use mapsam::model::{MapSam, ModelConfig};
use mapsam::nn::attention;
use mapsam::params::ParamStore;
use mapsam::pipeline;
use mapsam::prompt::{select_points, target_embedding, CoarseMask, MASK_THRESHOLD};
use mapsam::tensor::gradcheck::tape_gradient_error;
use mapsam::tensor::{interpolate_bilinear, Tape, Tensor, Var};
use mapsam::training::{
    composite_loss, dice_loss, evaluate_samples, feature_cache, finetune, focal_loss, model_gradient_check,
    AdamWConfig, LossConfig, Schedule, TrainConfig, TrainState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 10-shot test-IoU floor; the reference run scores 0.537.
const FEW_SHOT_IOU_THRESHOLD: f64 = 0.5;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
}

fn weighted_sum(t: &mut Tape, x: Var) -> Var {
    let w = Tensor::from_fn(t.shape(x), |i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0);
    let w = t.constant(w);
    let p = t.mul(x, w).unwrap();
    t.sum(p)
}

fn small_encoder(image: usize, patch: usize) -> EncoderConfig {
    EncoderConfig {
        image_size: image,
        patch_size: patch,
        embed_dim: 32,
        num_layers: 2,
        num_heads: 2,
        feature_tap_layers: vec![1, 2],
        out_dim: 8,
    }
}

// ---------------------------------------------------------------- 1

fn op_cases() -> Vec<(&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>)> {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let pos = |r: &mut ChaCha8Rng, shape: &[usize]| Tensor::from_fn(shape, |_| r.gen_range(0.5..2.0));
    vec![
        ("matmul", vec![rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[4, 2])], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            weighted_sum(t, y)
        })),
        ("matmul_nt", vec![rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[5, 4])], Box::new(|t, v| {
            let y = t.matmul_nt(v[0], v[1]).unwrap();
            weighted_sum(t, y)
        })),
        ("transpose", vec![rand_tensor(&mut r, &[3, 4])], Box::new(|t, v| {
            let y = t.transpose(v[0]).unwrap();
            weighted_sum(t, y)
        })),
        ("linear", vec![rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[2, 4]), rand_tensor(&mut r, &[2])], Box::new(|t, v| {
            let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
            weighted_sum(t, y)
        })),
        ("add/sub/mul/div", vec![rand_tensor(&mut r, &[2, 3]), pos(&mut r, &[2, 3])], Box::new(|t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            let s = t.sub(a, v[0]).unwrap();
            let m = t.mul(s, v[0]).unwrap();
            let d = t.div(m, v[1]).unwrap();
            weighted_sum(t, d)
        })),
        ("add_row/mul_row", vec![rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[4])], Box::new(|t, v| {
            let a = t.add_row(v[0], v[1]).unwrap();
            let m = t.mul_row(a, v[1]).unwrap();
            weighted_sum(t, m)
        })),
        ("scale/add_scalar", vec![rand_tensor(&mut r, &[5])], Box::new(|t, v| {
            let s = t.scale(v[0], -0.7);
            let a = t.add_scalar(s, 1.5);
            weighted_sum(t, a)
        })),
        ("sigmoid/gelu/relu/clamp", vec![rand_tensor(&mut r, &[2, 5])], Box::new(|t, v| {
            let s = t.sigmoid(v[0]);
            let g = t.gelu(v[0]);
            let r = t.relu(v[0]);
            let c = t.clamp(v[0], -1.0, 1.0);
            let a = t.add(s, g).unwrap();
            let b = t.add(r, c).unwrap();
            let y = t.mul(a, b).unwrap();
            weighted_sum(t, y)
        })),
        ("log/sqrt/powf", vec![pos(&mut r, &[6])], Box::new(|t, v| {
            let l = t.log(v[0]);
            let s = t.sqrt(v[0]);
            let p = t.powf(v[0], 0.9);
            let a = t.add(l, s).unwrap();
            let y = t.add(a, p).unwrap();
            weighted_sum(t, y)
        })),
        ("softmax", vec![rand_tensor(&mut r, &[3, 5])], Box::new(|t, v| {
            let a = t.softmax(v[0], 1).unwrap();
            let b = t.softmax(v[0], 0).unwrap();
            let y = t.add(a, b).unwrap();
            weighted_sum(t, y)
        })),
        ("layernorm", vec![rand_tensor(&mut r, &[3, 5]), rand_tensor(&mut r, &[5]), rand_tensor(&mut r, &[5])], Box::new(|t, v| {
            let y = t.layernorm(v[0], v[1], v[2], 1e-5).unwrap();
            weighted_sum(t, y)
        })),
        ("column_norms", vec![rand_tensor(&mut r, &[4, 3])], Box::new(|t, v| {
            let y = t.column_norms(v[0]).unwrap();
            weighted_sum(t, y)
        })),
        ("sum/mean/reshape", vec![rand_tensor(&mut r, &[2, 6])], Box::new(|t, v| {
            let rs = t.reshape(v[0], &[3, 4]).unwrap();
            let sq = t.mul(rs, rs).unwrap();
            let m = t.mean(sq);
            let w = weighted_sum(t, rs);
            t.add(m, w).unwrap()
        })),
        ("slices/concats", vec![rand_tensor(&mut r, &[3, 4])], Box::new(|t, v| {
            let left = t.slice_cols(v[0], 0, 1).unwrap();
            let right = t.slice_cols(v[0], 1, 4).unwrap();
            let cols = t.concat_cols(&[right, left]).unwrap();
            let top = t.slice_rows(cols, 0, 1).unwrap();
            let rest = t.slice_rows(cols, 1, 3).unwrap();
            let rows = t.concat_rows(&[rest, top]).unwrap();
            weighted_sum(t, rows)
        })),
        ("interpolate_bilinear", vec![rand_tensor(&mut r, &[3, 2, 2])], Box::new(|t, v| {
            let y = t.interpolate_bilinear(v[0], 7, 5).unwrap();
            weighted_sum(t, y)
        })),
        ("conv1x1", vec![rand_tensor(&mut r, &[2, 3, 4]), rand_tensor(&mut r, &[4, 2]), rand_tensor(&mut r, &[2])], Box::new(|t, v| {
            let y = t.conv1x1(v[0], v[1], Some(v[2])).unwrap();
            weighted_sum(t, y)
        })),
        ("multi-head attention", vec![rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[5, 4]), rand_tensor(&mut r, &[5, 4])], Box::new(|t, v| {
            let (y, _) = attention(t, v[0], v[1], v[2], 2, None).unwrap();
            weighted_sum(t, y)
        })),
        ("masked attention", vec![rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[5, 4]), rand_tensor(&mut r, &[5, 4])], Box::new(|t, v| {
            let mut m = Tensor::zeros(&[3, 5]);
            for row in 0..3 {
                m.data_mut()[row * 5 + 1] = f64::NEG_INFINITY;
            }
            let m = t.constant(m);
            let (y, _) = attention(t, v[0], v[1], v[2], 1, Some(m)).unwrap();
            weighted_sum(t, y)
        })),
    ]
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst_op = (0.0f64, "");
    for (name, inputs, build) in op_cases() {
        let err = ok(tape_gradient_error(&inputs, build, 1e-3))?;
        ensure!(err < 1e-4, "{name}: rel err {err:.2e}");
        if err > worst_op.0 {
            worst_op = (err, name);
        }
    }
    let cfg = ModelConfig {
        encoder: small_encoder(16, 4),
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut model = ok(MapSam::new(&mut store, &mut rng, cfg))?;
    ok(model.prepare_finetune(&mut store, &mut rng))?;
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.value_mut(id).data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let big = &ok(mapsam::data::generate_samples(FeatureClass::Railway, 1, 23, 32, "g"))?[0];
    let tile = ok(big.halved())?;
    let rep = ok(model_gradient_check(&model, &store, &tile, &LossConfig::default(), 0.01, 1e-5, &mut rng))?;
    ensure!(rep.worst_rel_err < 1e-3, "end-to-end: {rep:?}");
    ensure!(rep.checked * 10 >= (rep.checked + rep.skipped) * 9, "too many unstable samples: {rep:?}");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    Ok(format!(
        "ops worst {:.1e} ({}); 16x16 end-to-end {} scalars worst {:.1e}; {:.1}s",
        worst_op.0,
        worst_op.1,
        rep.checked,
        rep.worst_rel_err,
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let cfg = ModelConfig {
        encoder: small_encoder(32, 8),
        ..ModelConfig::default()
    };
    let tile = ok(mapsam::data::generate_samples(FeatureClass::Railway, 1, 5, 32, "t"))?.remove(0);

    // step-0 equivalence
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = ok(MapSam::new(&mut store, &mut rng, cfg.clone()))?;
    let forward = |m: &MapSam, s: &ParamStore| -> Result<Tensor, String> {
        let mut tape = Tape::new();
        let out = ok(m.forward(&mut tape, s, &tile.image, None))?;
        Ok(tape.value(out.final_logits()).clone())
    };
    let before = forward(&model, &store)?;
    ok(model.prepare_finetune(&mut store, &mut rng))?;
    let step0 = forward(&model, &store)?.max_abs_diff(&before);
    ensure!(step0 < 1e-12, "step-0 difference {step0:.2e}");

    // column-norm identity after moving every adapter tensor
    let mut moved = store.clone();
    for (id, name) in moved.iter().map(|(id, p)| (id, p.name.clone())).collect::<Vec<_>>() {
        if Encoder::is_adapter_param(&name) {
            for v in moved.value_mut(id).data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }
    let mut norm_err = 0.0f64;
    let enc = model.encoder();
    for l in 0..enc.config().num_layers {
        for proj in [enc.query_projection(l), enc.value_projection(l)] {
            let mut tape = Tape::new();
            let w = ok(proj.merged_weight(&mut tape, &moved))?;
            let norms = ok(tape.column_norms(w))?;
            let (_, _, m) = proj.adapter_params().ok_or("projection not adapted")?;
            let m = moved.value(m.ok_or("no magnitude")?);
            for (a, b) in tape.value(norms).data().iter().zip(m.data()) {
                norm_err = norm_err.max((a - b.abs()).abs());
            }
        }
    }
    ensure!(norm_err < 1e-9, "column norms differ from |m| by {norm_err:.2e}");

    // frozen weights bitwise fixed over 100 optimiser steps
    let train = ok(mapsam::data::generate_samples(FeatureClass::Railway, 8, 6, 32, "tr"))?;
    let frozen_before = store.clone();
    let mut state = TrainState::new(4, AdamWConfig::default());
    let tc = TrainConfig {
        epochs: 50,
        batch_size: 4,
        warmup_iters: 10,
        ..TrainConfig::default()
    };
    ok(finetune(&model, &mut store, &mut state, &train, &[], &tc, &mut |_| Ok(())))?;
    ensure!(state.step == 100, "ran {} steps", state.step);
    let mut frozen = 0;
    for ((_, a), (_, b)) in frozen_before.iter().zip(store.iter()) {
        if !a.trainable {
            let same = a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            ensure!(same, "frozen `{}` changed", a.name);
            frozen += 1;
        }
    }

    // DoRA adds exactly k = in_dim magnitudes per adapted layer over LoRA
    let count = |mode: AdaptMode| -> Result<usize, String> {
        let mut s = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut m = ok(MapSam::new(&mut s, &mut r, ModelConfig { adapt_mode: mode, ..ModelConfig::default() }))?;
        ok(m.prepare_finetune(&mut s, &mut r))?;
        Ok(s.count().0)
    };
    let defaults = EncoderConfig::default();
    let layers = 2 * defaults.num_layers;
    let delta = count(AdaptMode::Dora)? - count(AdaptMode::Lora)?;
    ensure!(delta == layers * defaults.embed_dim, "DoRA-LoRA delta {delta}, expected {}", layers * defaults.embed_dim);
    let rank = AdapterConfig::default().rank;
    Ok(format!(
        "step-0 {step0:.0e}; norm err {norm_err:.1e}; {frozen} frozen tensors unchanged over 100 steps; DoRA-LoRA = {delta} = {layers} layers x k={} (rank {rank})",
        defaults.embed_dim
    ))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = ok(MapSam::new(&mut store, &mut rng, ModelConfig::default()))?;
    let proj = &model.decoder().layer(0).token_to_image;
    let d = EncoderConfig::default().out_dim;
    let (g, n_tok) = (8, 3);
    let tokens = rand_tensor(&mut rng, &[n_tok, d]);
    let image = rand_tensor(&mut rng, &[g * g, d]);
    let run = |mask: Tensor, masked: bool| -> Result<(Tensor, Tensor), String> {
        let mut tape = Tape::new();
        let state = DecoderState {
            tokens: tape.constant(tokens.clone()),
            image: tape.constant(image.clone()),
            attention_mask: mask,
            layer_index: 1,
        };
        let (out, w) = ok(masked_cross_attention(&mut tape, &store, &state, proj, None, masked))?;
        Ok((tape.value(out).clone(), tape.value(w).clone()))
    };
    let (plain, _) = run(Tensor::full(&[g, g, 1], 1.0), false)?;
    let (ones, _) = run(Tensor::full(&[g, g, 1], 1.0), true)?;
    let diff = ones.max_abs_diff(&plain);
    ensure!(diff < 1e-12, "all-ones mask differs by {diff:.2e}");

    let partial = Tensor::from_fn(&[g, g, 1], |_| rng.gen_bool(0.3) as u8 as f64);
    let (_, w) = run(partial.clone(), true)?;
    let mut leaked = 0.0f64;
    for r in 0..n_tok {
        for c in 0..g * g {
            if partial.data()[c] == 0.0 {
                leaked = leaked.max(w.get2(r, c).abs());
            }
        }
    }
    ensure!(leaked == 0.0, "masked pixels received weight {leaked:e}");

    let (empty, we) = run(Tensor::zeros(&[g, g, 1]), true)?;
    ensure!(
        empty.data().iter().chain(we.data()).all(|v| v.is_finite()),
        "empty mask produced non-finite values"
    );
    ensure!(empty.max_abs_diff(&plain) == 0.0, "empty-mask fallback differs from plain attention");
    Ok(format!("all-ones diff {diff:.0e}; masked weight exactly 0; empty-mask fallback finite and unmasked"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = Tensor::from_fn(&[64], |_| rng.gen_bool(0.4) as u8 as f64);
    let dice_perfect = ok(dice_loss(&g, &g, 1.0))?;
    ensure!(dice_perfect == 0.0, "dice(perfect) = {dice_perfect}");

    let p = Tensor::from_fn(&[64], |_| rng.gen_range(0.01..0.99));
    let bce: f64 = p
        .data()
        .iter()
        .zip(g.data())
        .map(|(&p, &g)| -(g * p.ln() + (1.0 - g) * (1.0 - p).ln()))
        .sum::<f64>()
        / 64.0;
    let focal = ok(focal_loss(&p, &g, 0.0, 0.5))?;
    ensure!((focal - 0.5 * bce).abs() < 1e-9, "focal {focal} vs 0.5*BCE {}", 0.5 * bce);

    let mut worst_add = 0.0f64;
    for seed in 0..20u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let c = tape.constant(rand_tensor(&mut r, &[8, 8, 1]));
        let f = tape.constant(rand_tensor(&mut r, &[64, 64, 1]));
        let gt = Tensor::from_fn(&[64, 64], |_| r.gen_bool(0.2) as u8 as f64);
        let (overall, rep) = ok(composite_loss(&mut tape, c, f, &gt, &LossConfig::default()))?;
        ensure!(rep.overall == rep.coarse + rep.final_, "L_overall != L_coarse + L_final");
        worst_add = worst_add.max((tape.value(overall).data()[0] - rep.coarse - rep.final_).abs());
    }
    ensure!(worst_add < 1e-12, "tape value differs from report by {worst_add:e}");

    let s = Schedule {
        base_lr: 0.005,
        warmup_iters: 250,
        max_iters: 4000,
    };
    ensure!(s.lr_at(125) == 0.0025, "lr(T_w/2) = {}", s.lr_at(125));
    ensure!(s.lr_at(250) == 0.005, "lr(T_w) = {}", s.lr_at(250));
    let decay_at_tw = s.base_lr * (1.0 - 0.0 / s.max_iters as f64).powf(0.9);
    ensure!(decay_at_tw == s.lr_at(250), "branches disagree at T_w");
    let jump = (s.lr_at(251) - s.lr_at(250)).abs();
    ensure!(jump < 0.005 / 4000.0, "jump {jump:e} after T_w");
    Ok("dice(perfect)=0; focal(0,0.5)=0.5 BCE; L_overall recomposes on 20 draws; lr(125)=0.0025, lr(250)=0.005".into())
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (h, w, d) = (8, 8, 16);
        let f = rand_tensor(&mut rng, &[h, w, d]);
        let logits = rand_tensor(&mut rng, &[h, w, 1]);
        let mask = CoarseMask::from_logits(logits, MASK_THRESHOLD);
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let t = ok(target_embedding(&mut tape, fv, &mask))?;
        let cells: Vec<usize> = (0..h * w).filter(|&i| mask.binary.data()[i] == 1.0).collect();
        for c in 0..d {
            let brute = if cells.is_empty() {
                0.0
            } else {
                cells.iter().map(|&i| f.data()[i * d + c]).sum::<f64>() / cells.len() as f64
            };
            worst = worst.max((tape.value(t.embedding).data()[c] - brute).abs());
        }
    }
    ensure!(worst < 1e-12, "target embedding off by {worst:.2e}");

    for trial in 0..1000 {
        let size = 64;
        let logits = rand_tensor(&mut rng, &[8, 8, 1]);
        let mask = CoarseMask::from_logits(logits, MASK_THRESHOLD);
        let [pos, neg] = ok(select_points(&mask, size))?;
        let up = ok(interpolate_bilinear(&mask.probabilities, size, size))?;
        let d = up.data();
        let mut hi = 0;
        let mut lo = 0;
        for i in 1..d.len() {
            if d[i] > d[hi] {
                hi = i;
            }
            if d[i] < d[lo] {
                lo = i;
            }
        }
        ensure!(
            (pos.row * size + pos.col, neg.row * size + neg.col) == (hi, lo),
            "map {trial}: points disagree with the full scan"
        );
    }
    Ok(format!("target embedding worst {worst:.1e} over 50 maps; points match the scan on 1000 maps"))
}

// ---------------------------------------------------------------- shared data for 6-8

struct Shared {
    _dir: tempfile::TempDir,
    cfg: RunConfig,
    dataset: DatasetSplit,
    train: Vec<Sample>,
    val: Vec<Sample>,
    test: Vec<Sample>,
    pretrained: ParamStore,
    pretrain_time: Duration,
}

fn shared() -> &'static Shared {
    static SHARED: OnceLock<Shared> = OnceLock::new();
    SHARED.get_or_init(|| {
        let cfg = RunConfig::default();
        let dir = tempfile::tempdir().expect("tempdir");
        let d = &cfg.data;
        let dataset = build_dataset(
            dir.path(),
            FeatureClass::Railway,
            (d.train, d.val, d.test),
            d.seed,
            cfg.model.encoder.image_size,
        )
        .expect("dataset");
        let start = Instant::now();
        let pretrained = pipeline::pretrain_stage(&cfg, None, &mut |_| Ok(()))
            .expect("pretraining")
            .to_store();
        Shared {
            train: dataset.load_split(Split::Train).expect("train"),
            val: dataset.load_split(Split::Val).expect("val"),
            test: dataset.load_split(Split::Test).expect("test"),
            _dir: dir,
            cfg,
            dataset,
            pretrained,
            pretrain_time: start.elapsed(),
        }
    })
}

fn ablation() -> &'static Result<(AblationTable, AblationTable, Duration), String> {
    static TABLES: OnceLock<Result<(AblationTable, AblationTable, Duration), String>> = OnceLock::new();
    TABLES.get_or_init(|| {
        let s = shared();
        let start = Instant::now();
        let data = AblationData {
            train: &s.train,
            val: &s.val,
            test: &s.test,
        };
        let mut ab = ok(Ablation::new(s.cfg.clone(), s.pretrained.clone(), ABLATION_SEEDS.to_vec(), data))?;
        let components = ok(ab.components())?;
        // pretraining plus the component runs; the tap sweep is timed apart
        let elapsed = start.elapsed() + s.pretrain_time;
        let taps = ok(ab.taps())?;
        Ok((components, taps, elapsed))
    })
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let (table, _, elapsed) = ablation().as_ref().map_err(Clone::clone)?;
    let elapsed = *elapsed;
    print!("{}", indent(&table.render()));
    let m: Vec<f64> = table.rows.iter().map(|r| 100.0 * r.mean()).collect();
    let summary = format!(
        "IoU x100 {:.2} / {:.2} / {:.2} / {:.2}; gains {:+.2} {:+.2} {:+.2}; full-base {:+.2}; {:.1} min",
        m[0],
        m[1],
        m[2],
        m[3],
        m[1] - m[0],
        m[2] - m[1],
        m[3] - m[2],
        m[3] - m[0],
        elapsed.as_secs_f64() / 60.0
    );
    ensure!(m[1] - m[0] >= 8.0, "+DoRA gain below 8 points: {summary}");
    ensure!(m[2] - m[1] >= -0.5, "+Semantic gain below -0.5: {summary}");
    ensure!(m[3] - m[2] >= -0.5, "+Masked gain below -0.5: {summary}");
    ensure!(m[3] - m[0] >= 8.0, "full-vs-baseline below 8 points: {summary}");
    ensure!(elapsed < Duration::from_secs(45 * 60), "runtime over 45 min: {summary}");
    Ok(summary)
}

fn indent(text: &str) -> String {
    text.lines().map(|l| format!("    {l}\n")).collect()
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let (_, taps, _) = ablation().as_ref().map_err(Clone::clone)?;
    print!("{}", indent(&taps.render()));
    ensure!(taps.rows.len() == 2, "expected two tap rows");
    let gap = 100.0 * (taps.rows[1].mean() - taps.rows[0].mean());
    let per_seed: Vec<String> = taps.rows[0]
        .scores
        .iter()
        .zip(&taps.rows[1].scores)
        .map(|(a, b)| format!("{:+.2}", 100.0 * (b - a)))
        .collect();
    let summary = format!("coarse IoU gap {{1,2,3,4}} - {{4}} = {gap:+.2} points (per seed {})", per_seed.join(" "));
    ensure!(gap >= 0.0, "{summary}");
    Ok(summary)
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let s = shared();
    let few = ok(s.dataset.k_shot(10, 0))?;
    let train = ok(few.load_split(Split::Train))?;
    ensure!(train.len() == 10, "k-shot produced {} tiles", train.len());
    let mut cfg = s.cfg.clone();
    // ten tiles make two steps per epoch, so train longer and warm up faster
    cfg.finetune.epochs = 150;
    cfg.finetune.warmup_iters = 30;
    let run = ok(pipeline::finetune_stage(&cfg, Some(&s.pretrained), None, &train, &s.val, &mut |_| Ok(())))?;
    let cache = ok(feature_cache(&run.model, &run.store, &s.test))?;
    let ev = ok(evaluate_samples(&run.model, &run.store, &s.test, &cache, "test"))?;
    let iou = ev.final_.iou();
    let summary = format!("10-shot test IoU {iou:.4} (threshold {FEW_SHOT_IOU_THRESHOLD})");
    ensure!(iou >= FEW_SHOT_IOU_THRESHOLD, "{summary}");
    Ok(summary)
}

// ---------------------------------------------------------------- 9

fn mapsam(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mapsam"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("MAPSAM_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "mapsam {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let small = [
        "--set", "data.train=24", "--set", "data.val=4", "--set", "data.test=4",
        "--set", "pretrain.textures=8", "--set", "pretrain.epochs=1",
        "--set", "finetune.epochs=3", "--set", "finetune.warmup_iters=5",
    ];
    let with = |head: &[&str]| -> Vec<String> { head.iter().chain(small.iter()).map(|s| s.to_string()).collect() };
    let run = |args: Vec<String>| mapsam(&args.iter().map(String::as_str).collect::<Vec<_>>());
    run(with(&["gen-data", "--out", &p("data")]))?;
    run(with(&["pretrain", "--out", &p("pre.ckpt"), "--seed", "5"]))?;
    for i in 0..2 {
        run(with(&[
            "finetune", "--data", &p("data"), "--pretrained", &p("pre.ckpt"), "--seed", "5",
            "--out", &p(&format!("ft{i}.ckpt")), "--log", &p(&format!("log{i}.txt")),
        ]))?;
    }
    let read = |name: &str| std::fs::read(dir.path().join(name)).map_err(|e| e.to_string());
    let (log0, log1) = (read("log0.txt")?, read("log1.txt")?);
    ensure!(!log0.is_empty() && log0 == log1, "metric logs differ");
    ensure!(read("ft0.ckpt")? == read("ft1.ckpt")?, "checkpoints differ");

    let bytes = read("ft0.ckpt")?;
    let ck = ok(mapsam::checkpoint::Checkpoint::load(&dir.path().join("ft0.ckpt")))?;
    let again = dir.path().join("again.ckpt");
    ok(ck.save(&again))?;
    ensure!(std::fs::read(&again).map_err(|e| e.to_string())? == bytes, "save(load(x)) != x");
    Ok(format!(
        "two finetune runs: identical {}-line metric logs and checkpoints; save/load round trip byte-identical ({} bytes)",
        String::from_utf8_lossy(&log0).lines().count(),
        bytes.len()
    ))
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut report = EvalReport::new("test");
    for i in 0..60 {
        let c = ConfusionCounts {
            tp: rng.gen_range(0..500),
            fp: rng.gen_range(0..200),
            fn_: rng.gen_range(0..200),
            tn: rng.gen_range(0..4000),
        };
        report.push(format!("tile_{i:03}"), c);
    }
    report.push("empty", ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 4096 });
    // every rendered row, recomputed from its own counts
    let rows = EvalReport::parse_rows(&report.render());
    let (mut worst, mut printed) = (0.0f64, 0.0f64);
    for (_, f1_shown, iou_shown, c) in &rows {
        let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
        let denom = tp + fp + fn_;
        let (iou, f1) = if denom == 0.0 { (1.0, 1.0) } else { (tp / denom, 2.0 * tp / (2.0 * tp + fp + fn_)) };
        worst = worst.max((f1 - 2.0 * iou / (1.0 + iou)).abs());
        worst = worst.max((c.f1() - 2.0 * c.iou() / (1.0 + c.iou())).abs());
        printed = printed.max((f1_shown - f1).abs()).max((iou_shown - iou).abs());
    }
    let micro = report.micro();
    ensure!(worst < 1e-12, "F1/IoU identity off by {worst:e}");
    ensure!(printed <= 5e-5, "rendered scores differ from their counts by {printed:e}");
    ensure!(rows.len() == report.tiles.len() + 1, "report has {} rows", rows.len());

    let mut tiles = report.tiles.clone();
    for _ in 0..20 {
        for i in (1..tiles.len()).rev() {
            tiles.swap(i, rng.gen_range(0..=i));
        }
        let mut shuffled = EvalReport::new("test");
        for t in &tiles {
            shuffled.push(t.id.clone(), t.counts);
        }
        ensure!(shuffled.micro() == micro && shuffled.iou() == report.iou(), "micro aggregate depends on order");
    }
    Ok(format!("{} rows satisfy F1 = 2 IoU/(1+IoU) (worst {worst:.1e}); micro aggregate stable under 20 shuffles", report.tiles.len() + 1))
}

// ----------------------------------------------------------------

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "gradient suite", criterion_1),
        (2, "DoRA algebra", criterion_2),
        (3, "masked attention", criterion_3),
        (4, "loss and schedule identities", criterion_4),
        (5, "target embedding and point selection", criterion_5),
        (6, "component ablation direction", criterion_6),
        (7, "multi-layer tap fusion", criterion_7),
        (8, "10-shot regime", criterion_8),
        (9, "determinism", criterion_9),
        (10, "metric identities", criterion_10),
    ];
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                println!("criterion {n:>2} FAIL  {name}: {detail} [{secs:.1}s]");
                failed.push(n);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        if std::env::var_os("ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
