//! Stage orchestration shared by the CLI, the ablation runner and examples.

use log::info;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adaptation::AdaptedLinear;
use crate::checkpoint::{Checkpoint, Stage};
use crate::config::RunConfig;
use crate::data::{derive_seed, gen_texture, image_tensor, Sample};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::model::{MapSam, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::{self, EpochRecord, PretrainRecord, TrainState};

/// Seed of the training-state RNG, kept apart from the initialisation RNG.
fn state_seed(seed: u64) -> u64 {
    derive_seed(seed, "train-state")
}

/// Generic texture images for pretraining.
pub fn pretraining_images(count: usize, size: usize, seed: u64) -> Result<Vec<Tensor>> {
    (0..count)
        .map(|i| {
            let raster = gen_texture(derive_seed(seed, &format!("texture_{i:05}")), size)?;
            Ok(image_tensor(size, &raster))
        })
        .collect()
}

/// Encoder plus pixel head, freshly initialised.
pub fn pretrain_model(cfg: &ModelConfig, seed: u64) -> Result<(Encoder, AdaptedLinear, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = Encoder::new(&mut store, &mut rng, cfg.encoder.clone())?;
    let head = training::pixel_head(&mut store, &mut rng, &encoder);
    Ok((encoder, head, store))
}

/// Runs (or resumes) encoder pretraining and returns the final checkpoint.
pub fn pretrain_stage(
    cfg: &RunConfig,
    resume: Option<&Checkpoint>,
    on_epoch: &mut dyn FnMut(&PretrainRecord) -> Result<()>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let (encoder, head, mut store) = pretrain_model(&cfg.model, cfg.seed)?;
    let mut state = match resume {
        Some(ck) => {
            check_stage(ck, Stage::Pretrain)?;
            ck.restore_params(&mut store, true)?;
            ck.train_state(&store, cfg.pretrain.train.adamw)?
        }
        None => TrainState::new(state_seed(cfg.seed), cfg.pretrain.train.adamw),
    };
    let images = pretraining_images(cfg.pretrain.textures, cfg.model.encoder.image_size, cfg.seed)?;
    training::pretrain(
        &encoder,
        &head,
        &mut store,
        &mut state,
        &images,
        &cfg.pretrain.train,
        cfg.pretrain.mask_ratio,
        on_epoch,
    )?;
    Ok(Checkpoint::capture(Stage::Pretrain, cfg.render(), &store, &state))
}

fn check_stage(ck: &Checkpoint, want: Stage) -> Result<()> {
    if ck.stage != want {
        return Err(Error::Checkpoint(format!(
            "expected a {} checkpoint, found {}",
            want.as_str(),
            ck.stage.as_str()
        )));
    }
    Ok(())
}

/// Builds a fine-tuning model: fresh heads and decoder, encoder weights from
/// `pretrained` (if any), adapters attached and the encoder base frozen.
pub fn finetune_model(cfg: &ModelConfig, pretrained: Option<&ParamStore>, seed: u64) -> Result<(MapSam, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MapSam::new(&mut store, &mut rng, cfg.clone())?;
    if let Some(src) = pretrained {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            if !Encoder::is_prefix(&name) {
                continue;
            }
            let sid = src
                .find(&name)
                .ok_or_else(|| Error::Config(format!("pretrained encoder lacks `{name}`")))?;
            let v = src.value(sid);
            if v.shape() != store.value(id).shape() {
                return Err(Error::Config(format!(
                    "pretrained `{name}` has shape {:?}, model expects {:?}",
                    v.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = v.clone();
        }
    }
    model.prepare_finetune(&mut store, &mut rng)?;
    Ok((model, store))
}

/// Outcome of a fine-tuning run.
pub struct FinetuneRun {
    pub model: MapSam,
    pub store: ParamStore,
    pub state: TrainState,
    pub records: Vec<EpochRecord>,
}

impl FinetuneRun {
    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint::capture(Stage::Finetune, cfg.render(), &self.store, &self.state)
    }
}

/// Fine-tunes from a pretrained store, or resumes from a fine-tune
/// checkpoint.
pub fn finetune_stage(
    cfg: &RunConfig,
    pretrained: Option<&ParamStore>,
    resume: Option<&Checkpoint>,
    train: &[Sample],
    val: &[Sample],
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<FinetuneRun> {
    cfg.validate()?;
    let (model, mut store) = finetune_model(&cfg.model, pretrained, cfg.seed)?;
    let mut state = match resume {
        Some(ck) => {
            check_stage(ck, Stage::Finetune)?;
            ck.restore_params(&mut store, true)?;
            ck.train_state(&store, cfg.finetune.adamw)?
        }
        None => TrainState::new(state_seed(cfg.seed), cfg.finetune.adamw),
    };
    let base_trainable = store
        .iter()
        .filter(|(_, p)| Encoder::is_prefix(&p.name) && !Encoder::is_adapter_param(&p.name) && p.trainable)
        .count();
    let (trainable, total) = store.count();
    info!(
        "trainable parameters: {trainable} of {total} ({:.2}%); gradient-enabled base-encoder tensors: {base_trainable}",
        100.0 * trainable as f64 / total as f64
    );
    let records = training::finetune(&model, &mut store, &mut state, train, val, &cfg.finetune, on_epoch)?;
    Ok(FinetuneRun {
        model,
        store,
        state,
        records,
    })
}

/// Rebuilds the model recorded in a fine-tune checkpoint.
pub fn load_finetuned(ck: &Checkpoint) -> Result<(RunConfig, MapSam, ParamStore)> {
    check_stage(ck, Stage::Finetune)?;
    let cfg = RunConfig::parse(&ck.config)?;
    let (model, mut store) = finetune_model(&cfg.model, None, cfg.seed)?;
    ck.restore_params(&mut store, true)?;
    Ok((cfg, model, store))
}
