//! Run configuration as sectioned `key = value` text.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::adaptation::AdaptMode;
use crate::data::FeatureClass;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub class: FeatureClass,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            class: FeatureClass::Railway,
            train: 200,
            val: 25,
            test: 50,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub textures: usize,
    pub mask_ratio: f64,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            textures: 400,
            mask_ratio: 0.5,
            train: TrainConfig {
                epochs: 60,
                base_lr: 0.001,
                warmup_iters: 50,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub finetune: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: TrainConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
    }
}

fn train_entries(t: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("epochs", t.epochs.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("base_lr", format!("{:?}", t.base_lr)),
        ("warmup_iters", t.warmup_iters.to_string()),
        ("max_iters", t.max_iters.to_string()),
        ("beta1", format!("{:?}", t.adamw.beta1)),
        ("beta2", format!("{:?}", t.adamw.beta2)),
        ("adam_eps", format!("{:?}", t.adamw.eps)),
        ("weight_decay", format!("{:?}", t.adamw.weight_decay)),
        ("clip_norm", format!("{:?}", t.clip_norm)),
        ("lambda", format!("{:?}", t.loss.lambda)),
        ("focal_gamma", format!("{:?}", t.loss.focal_gamma)),
        ("focal_alpha", format!("{:?}", t.loss.focal_alpha)),
        ("dice_eps", format!("{:?}", t.loss.dice_eps)),
    ]
}

fn set_train(t: &mut TrainConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "epochs" => t.epochs = parse(key, v)?,
        "batch_size" => t.batch_size = parse(key, v)?,
        "base_lr" => t.base_lr = parse(key, v)?,
        "warmup_iters" => t.warmup_iters = parse(key, v)?,
        "max_iters" => t.max_iters = parse(key, v)?,
        "beta1" => t.adamw.beta1 = parse(key, v)?,
        "beta2" => t.adamw.beta2 = parse(key, v)?,
        "adam_eps" => t.adamw.eps = parse(key, v)?,
        "weight_decay" => t.adamw.weight_decay = parse(key, v)?,
        "clip_norm" => t.clip_norm = parse(key, v)?,
        "lambda" => t.loss.lambda = parse(key, v)?,
        "focal_gamma" => t.loss.focal_gamma = parse(key, v)?,
        "focal_alpha" => t.loss.focal_alpha = parse(key, v)?,
        "dice_eps" => t.loss.dice_eps = parse(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    /// `(section, key, value)` triples in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let m = &self.model;
        let e = &m.encoder;
        let taps: Vec<String> = e.feature_tap_layers.iter().map(|l| l.to_string()).collect();
        let mut out = vec![
            ("run", "seed", self.seed.to_string()),
            ("model", "image_size", e.image_size.to_string()),
            ("model", "patch_size", e.patch_size.to_string()),
            ("model", "embed_dim", e.embed_dim.to_string()),
            ("model", "num_layers", e.num_layers.to_string()),
            ("model", "num_heads", e.num_heads.to_string()),
            ("model", "tap_layers", taps.join(",")),
            ("model", "out_dim", e.out_dim.to_string()),
            ("model", "decoder_layers", m.decoder_layers.to_string()),
            ("model", "adapt_mode", m.adapt_mode.as_str().to_string()),
            ("model", "rank", m.adapter.rank.to_string()),
            ("model", "alpha", format!("{:?}", m.adapter.alpha)),
            ("model", "semantic_prompt", m.semantic_prompt.to_string()),
            ("model", "masked_attention", m.masked_attention.to_string()),
            ("data", "class", self.data.class.to_string()),
            ("data", "train", self.data.train.to_string()),
            ("data", "val", self.data.val.to_string()),
            ("data", "test", self.data.test.to_string()),
            ("data", "seed", self.data.seed.to_string()),
            ("pretrain", "textures", self.pretrain.textures.to_string()),
            ("pretrain", "mask_ratio", format!("{:?}", self.pretrain.mask_ratio)),
        ];
        out.extend(train_entries(&self.pretrain.train).into_iter().map(|(k, v)| ("pretrain", k, v)));
        out.extend(train_entries(&self.finetune).into_iter().map(|(k, v)| ("finetune", k, v)));
        out
    }

    /// Sets one value; `key` is `section.name`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, name) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("key `{key}` lacks a section")))?;
        let v = value.trim();
        let m = &mut self.model;
        let known = match (section, name) {
            ("run", "seed") => {
                self.seed = parse(key, v)?;
                true
            }
            ("model", _) => {
                match name {
                    "image_size" => m.encoder.image_size = parse(key, v)?,
                    "patch_size" => m.encoder.patch_size = parse(key, v)?,
                    "embed_dim" => m.encoder.embed_dim = parse(key, v)?,
                    "num_layers" => m.encoder.num_layers = parse(key, v)?,
                    "num_heads" => m.encoder.num_heads = parse(key, v)?,
                    "tap_layers" => {
                        m.encoder.feature_tap_layers = v
                            .split(',')
                            .map(|s| parse(key, s.trim()))
                            .collect::<Result<_>>()?
                    }
                    "out_dim" => m.encoder.out_dim = parse(key, v)?,
                    "decoder_layers" => m.decoder_layers = parse(key, v)?,
                    "adapt_mode" => {
                        m.adapt_mode = AdaptMode::parse(v)
                            .ok_or_else(|| Error::Config(format!("unknown adapt_mode `{v}`")))?
                    }
                    "rank" => m.adapter.rank = parse(key, v)?,
                    "alpha" => m.adapter.alpha = parse(key, v)?,
                    "semantic_prompt" => m.semantic_prompt = parse_bool(key, v)?,
                    "masked_attention" => m.masked_attention = parse_bool(key, v)?,
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                true
            }
            ("data", _) => {
                let d = &mut self.data;
                match name {
                    "class" => d.class = FeatureClass::parse(v).map_err(|e| Error::Config(e.to_string()))?,
                    "train" => d.train = parse(key, v)?,
                    "val" => d.val = parse(key, v)?,
                    "test" => d.test = parse(key, v)?,
                    "seed" => d.seed = parse(key, v)?,
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                true
            }
            ("pretrain", "textures") => {
                self.pretrain.textures = parse(key, v)?;
                true
            }
            ("pretrain", "mask_ratio") => {
                self.pretrain.mask_ratio = parse(key, v)?;
                true
            }
            ("pretrain", _) => set_train(&mut self.pretrain.train, name, v)?,
            ("finetune", _) => set_train(&mut self.finetune, name, v)?,
            _ => false,
        };
        if !known {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, value) in self.entries() {
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                writeln!(out, "[{section}]").unwrap();
                current = section;
            }
            writeln!(out, "{key} = {value}").unwrap();
        }
        out
    }

    /// Parses text on top of the defaults. Blank lines and `#` comments are
    /// ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            if section.is_empty() {
                return Err(Error::Config(format!("line {}: key outside a section", n + 1)));
            }
            cfg.set(&format!("{section}.{}", k.trim()), v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.finetune.validate()?;
        self.pretrain.train.validate()?;
        if !(0.0..1.0).contains(&self.pretrain.mask_ratio) {
            return Err(Error::Config("pretrain.mask_ratio outside [0, 1)".into()));
        }
        Ok(())
    }
}
