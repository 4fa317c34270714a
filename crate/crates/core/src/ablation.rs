//! Component and tap-layer ablations over several seeds.

use std::collections::HashMap;
use std::fmt::Write as _;

use log::info;

use crate::adaptation::AdaptMode;
use crate::config::RunConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::pipeline;
use crate::training::{evaluate_samples, feature_cache};

/// Cumulative rows of the component ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    PositionalPrompt,
    Dora,
    SemanticPrompt,
    MaskedAttention,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::PositionalPrompt,
        Variant::Dora,
        Variant::SemanticPrompt,
        Variant::MaskedAttention,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::PositionalPrompt => "Positional Prompt",
            Variant::Dora => "+ DoRA",
            Variant::SemanticPrompt => "+ Semantic Prompt",
            Variant::MaskedAttention => "+ Masked Attention",
        }
    }

    /// `base` with the flags of this row; every earlier component stays on.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let rank = Variant::ALL.iter().position(|&v| v == self).expect("listed");
        let mut cfg = base.clone();
        cfg.adapt_mode = if rank >= 1 { AdaptMode::Dora } else { AdaptMode::Frozen };
        cfg.semantic_prompt = rank >= 2;
        cfg.masked_attention = rank >= 3;
        cfg
    }
}

/// Which score a row reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Score {
    FinalIou,
    CoarseIou,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    /// One score per seed, in `[0, 1]`.
    pub scores: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }

    /// Sample standard deviation; zero for a single seed.
    pub fn sd(&self) -> f64 {
        let n = self.scores.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.scores.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub title: String,
    pub metric: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Mean of row `i` minus mean of row `i - 1`; `None` for the first row.
    pub fn gain(&self, i: usize) -> Option<f64> {
        (i > 0).then(|| self.rows[i].mean() - self.rows[i - 1].mean())
    }

    /// Scores are shown ×100 as `mean±sd`.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(7);
        let mut out = format!("# {}\n", self.title);
        let _ = writeln!(out, "{:<width$}  {:>14}  {:>7}", "Variant", self.metric, "Gain");
        for (i, row) in self.rows.iter().enumerate() {
            let cell = format!("{:.2}±{:.2}", 100.0 * row.mean(), 100.0 * row.sd());
            let gain = match self.gain(i) {
                Some(g) => format!("{:+.2}", 100.0 * g),
                None => "-".to_string(),
            };
            let _ = writeln!(out, "{:<width$}  {cell:>14}  {gain:>7}", row.label);
        }
        out
    }
}

/// Inputs shared by every run of an ablation.
pub struct AblationData<'a> {
    pub train: &'a [Sample],
    pub val: &'a [Sample],
    pub test: &'a [Sample],
}

#[derive(Clone, Copy, Debug)]
struct Outcome {
    final_iou: f64,
    coarse_iou: f64,
}

/// Runs fine-tunes on demand and memoises them by (model config, seed), so
/// the tap sweep reuses the full-model runs of the component ablation.
///
/// Every run starts from the same pretrained encoder; seeds vary the
/// fine-tuning initialisation and sample order.
pub struct Ablation<'a> {
    base: RunConfig,
    seeds: Vec<u64>,
    data: AblationData<'a>,
    pretrained: ParamStore,
    runs: HashMap<(String, u64), Outcome>,
}

impl<'a> Ablation<'a> {
    pub fn new(base: RunConfig, pretrained: ParamStore, seeds: Vec<u64>, data: AblationData<'a>) -> Result<Self> {
        base.validate()?;
        if seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        if data.train.is_empty() || data.test.is_empty() {
            return Err(Error::Data("ablation needs train and test tiles".into()));
        }
        Ok(Ablation {
            base,
            seeds,
            data,
            pretrained,
            runs: HashMap::new(),
        })
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    fn run(&mut self, model: &ModelConfig, seed: u64) -> Result<Outcome> {
        let mut cfg = self.base.clone();
        cfg.seed = seed;
        cfg.model = model.clone();
        let key = (cfg.render(), seed);
        if let Some(o) = self.runs.get(&key) {
            return Ok(*o);
        }
        let run = pipeline::finetune_stage(&cfg, Some(&self.pretrained), None, self.data.train, self.data.val, &mut |_| Ok(()))?;
        let cache = feature_cache(&run.model, &run.store, self.data.test)?;
        let ev = evaluate_samples(&run.model, &run.store, self.data.test, &cache, "test")?;
        let o = Outcome {
            final_iou: ev.final_.iou(),
            coarse_iou: ev.coarse.iou(),
        };
        info!(
            "seed {seed} adapt={} semantic={} masked={} taps={:?}: final IoU {:.4}, coarse IoU {:.4}",
            model.adapt_mode.as_str(),
            model.semantic_prompt,
            model.masked_attention,
            model.encoder.feature_tap_layers,
            o.final_iou,
            o.coarse_iou
        );
        self.runs.insert(key, o);
        Ok(o)
    }

    fn row(&mut self, label: String, model: &ModelConfig, score: Score) -> Result<AblationRow> {
        let mut scores = Vec::with_capacity(self.seeds.len());
        for seed in self.seeds.clone() {
            let o = self.run(model, seed)?;
            scores.push(match score {
                Score::FinalIou => o.final_iou,
                Score::CoarseIou => o.coarse_iou,
            });
        }
        Ok(AblationRow { label, scores })
    }

    /// The four cumulative component rows, scored on final-mask test IoU.
    pub fn components(&mut self) -> Result<AblationTable> {
        let mut rows = Vec::new();
        for v in Variant::ALL {
            let model = v.apply(&self.base.model);
            rows.push(self.row(v.label().to_string(), &model, Score::FinalIou)?);
        }
        Ok(AblationTable {
            title: "Ablation of main components".into(),
            metric: "IoU".into(),
            rows,
        })
    }

    /// Last-layer-only taps against the configured multi-layer set, on the
    /// full model and scored on coarse-mask test IoU.
    pub fn taps(&mut self) -> Result<AblationTable> {
        let full = Variant::MaskedAttention.apply(&self.base.model);
        let last = full.encoder.num_layers;
        let mut sets = vec![vec![last]];
        if full.encoder.feature_tap_layers != sets[0] {
            sets.push(full.encoder.feature_tap_layers.clone());
        }
        let mut rows = Vec::new();
        for taps in sets {
            let mut model = full.clone();
            model.encoder.feature_tap_layers = taps.clone();
            let label = format!("{} layer{} {taps:?}", taps.len(), if taps.len() == 1 { "" } else { "s" });
            rows.push(self.row(label, &model, Score::CoarseIou)?);
        }
        Ok(AblationTable {
            title: "Ablation of multi-layer feature selection".into(),
            metric: "Coarse IoU".into(),
            rows,
        })
    }
}
