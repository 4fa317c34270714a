//! A reduced component and tap-layer ablation that finishes in a few
//! minutes. The `ablate` subcommand runs the full-size version.

use mapsam::ablation::{Ablation, AblationData};
use mapsam::config::RunConfig;
use mapsam::data::{generate_samples, FeatureClass};
use mapsam::pipeline;

fn main() -> mapsam::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut cfg = RunConfig::default();
    cfg.pretrain.textures = 60;
    cfg.pretrain.train.epochs = 4;
    cfg.finetune.epochs = 6;
    cfg.finetune.warmup_iters = 10;

    let size = cfg.model.encoder.image_size;
    let train = generate_samples(FeatureClass::Railway, 40, 1, size, "train")?;
    let val = generate_samples(FeatureClass::Railway, 8, 2, size, "val")?;
    let test = generate_samples(FeatureClass::Railway, 16, 3, size, "test")?;
    let pre = pipeline::pretrain_stage(&cfg, None, &mut |_| Ok(()))?;

    let data = AblationData {
        train: &train,
        val: &val,
        test: &test,
    };
    let mut ab = Ablation::new(cfg, pre.to_store(), vec![0], data)?;
    print!("{}", ab.components()?.render());
    println!();
    print!("{}", ab.taps()?.render());
    Ok(())
}
