//! Pretrains a small encoder, fine-tunes it with DoRA on synthetic railway
//! tiles and saves the checkpoint.
//!
//! `cargo run --release --example finetune_railway -- [out_dir]`

use std::path::PathBuf;

use mapsam::config::RunConfig;
use mapsam::data::{generate_samples, FeatureClass};
use mapsam::pipeline;
use mapsam::training::{evaluate_samples, feature_cache};

fn main() -> mapsam::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/finetune_railway".into()));
    let mut cfg = RunConfig::default();
    cfg.pretrain.textures = 100;
    cfg.pretrain.train.epochs = 5;
    cfg.finetune.epochs = 12;
    cfg.finetune.warmup_iters = 20;

    let pre = pipeline::pretrain_stage(&cfg, None, &mut |r| {
        println!("pretrain {r}");
        Ok(())
    })?;
    let size = cfg.model.encoder.image_size;
    let train = generate_samples(FeatureClass::Railway, 60, 1, size, "train")?;
    let val = generate_samples(FeatureClass::Railway, 10, 2, size, "val")?;
    let test = generate_samples(FeatureClass::Railway, 20, 3, size, "test")?;

    println!("epoch loss_coarse loss_final loss_overall val_iou val_f1 lr");
    let run = pipeline::finetune_stage(&cfg, Some(&pre.to_store()), None, &train, &val, &mut |r| {
        println!("{r}");
        Ok(())
    })?;
    let (trainable, total) = run.store.count();
    println!("trainable share {:.2}%", 100.0 * trainable as f64 / total as f64);

    let cache = feature_cache(&run.model, &run.store, &test)?;
    let ev = evaluate_samples(&run.model, &run.store, &test, &cache, "test")?;
    println!("test IoU {:.4}, F1 {:.4}, coarse IoU {:.4}", ev.final_.iou(), ev.final_.f1(), ev.coarse.iou());

    let path = out.join("finetuned.ckpt");
    run.checkpoint(&cfg).save(&path)?;
    println!("saved {}", path.display());
    Ok(())
}
