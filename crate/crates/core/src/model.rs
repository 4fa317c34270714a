//! Full segmentation model: encoder, auto-prompt generator, prompt encoder
//! and mask decoder.

use rand::Rng;

use crate::adaptation::{AdaptMode, AdapterConfig};
use crate::decoder::{DecodeOutput, MaskDecoder};
use crate::encoder::{Encoder, EncoderConfig, FeatureSnapshot, LayerFeatures};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::prompt::{
    fuse_layers, positional_semantic_tokens, select_points, target_embedding, CoarseHead,
    CoarseMask, Point, PromptEncoder, TargetEmbedding, MASK_THRESHOLD,
};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    /// Adaptation applied to the encoder during fine-tuning.
    pub adapt_mode: AdaptMode,
    pub semantic_prompt: bool,
    pub masked_attention: bool,
    pub decoder_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            adapter: AdapterConfig::default(),
            adapt_mode: AdaptMode::Dora,
            semantic_prompt: true,
            masked_attention: true,
            decoder_layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoder_layers == 0 {
            return Err(Error::Config("decoder_layers must be at least 1".into()));
        }
        if self.adapt_mode != AdaptMode::Frozen
            && (self.adapter.rank == 0 || self.adapter.rank > self.encoder.embed_dim)
        {
            return Err(Error::Config(format!(
                "adapter rank {} outside 1..={}",
                self.adapter.rank, self.encoder.embed_dim
            )));
        }
        Ok(())
    }
}

/// Everything produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Per-tap coarse logits, `h×w×1`.
    pub layer_logits: Vec<(usize, Var)>,
    /// Fused coarse logits, `h×w×1`.
    pub coarse_logits: Var,
    pub coarse: CoarseMask,
    pub points: [Point; 2],
    pub target: Option<TargetEmbedding>,
    pub decode: DecodeOutput,
}

impl ForwardOutput {
    pub fn final_logits(&self) -> Var {
        self.decode.logits
    }
}

#[derive(Clone, Debug)]
pub struct MapSam {
    cfg: ModelConfig,
    encoder: Encoder,
    heads: Vec<(usize, CoarseHead)>,
    prompt: PromptEncoder,
    decoder: MaskDecoder,
    adapted: bool,
}

impl MapSam {
    /// Builds every component with the encoder fully trainable and no
    /// adapters attached.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: ModelConfig) -> Result<Self> {
        let mut cfg = cfg;
        cfg.encoder = cfg.encoder.normalized();
        cfg.validate()?;
        let (d, od) = (cfg.encoder.embed_dim, cfg.encoder.out_dim);
        let encoder = Encoder::new(store, rng, cfg.encoder.clone())?;
        let heads = cfg
            .encoder
            .feature_tap_layers
            .iter()
            .map(|&l| (l, CoarseHead::new(store, rng, &format!("coarse_heads.{l}"), d)))
            .collect();
        let prompt = PromptEncoder::new(store, rng, od);
        let decoder = MaskDecoder::new(store, rng, od, cfg.decoder_layers);
        Ok(MapSam {
            cfg,
            encoder,
            heads,
            prompt,
            decoder,
            adapted: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &MaskDecoder {
        &self.decoder
    }

    pub fn prompt_encoder(&self) -> &PromptEncoder {
        &self.prompt
    }

    pub fn is_adapted(&self) -> bool {
        self.adapted
    }

    /// Attaches encoder adapters per the configured mode and freezes every
    /// other encoder parameter. Call after loading pretrained encoder weights.
    pub fn prepare_finetune(&mut self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        if self.adapted {
            return Err(Error::invalid("prepare_finetune", "model already prepared"));
        }
        if self.cfg.adapt_mode != AdaptMode::Frozen {
            self.encoder
                .attach_adapters(store, rng, self.cfg.adapt_mode, self.cfg.adapter)?;
        }
        store.set_trainable_where(false, |n| {
            Encoder::is_prefix(n) && !Encoder::is_adapter_param(n)
        });
        self.adapted = true;
        Ok(())
    }

    /// Whether the encoder output can be cached: nothing in it trains.
    pub fn encoder_is_frozen(&self, store: &ParamStore) -> bool {
        store
            .iter()
            .all(|(_, p)| !(Encoder::is_prefix(&p.name) && p.trainable))
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor) -> Result<LayerFeatures> {
        self.encoder.encode(tape, store, image)
    }

    pub fn snapshot(&self, store: &ParamStore, image: &Tensor) -> Result<FeatureSnapshot> {
        self.encoder.encode_detached(store, image)
    }

    /// Forward pass. `cached` replaces the encoder with precomputed features,
    /// which is only valid while the encoder is frozen.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: &Tensor,
        cached: Option<&FeatureSnapshot>,
    ) -> Result<ForwardOutput> {
        let features = match cached {
            Some(snap) => snap.to_tape(tape),
            None => self.encode(tape, store, image)?,
        };
        self.forward_features(tape, store, &features)
    }

    pub fn forward_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: &LayerFeatures,
    ) -> Result<ForwardOutput> {
        let size = self.cfg.encoder.image_size;
        if features.taps.len() != self.heads.len() {
            return Err(Error::invalid("forward", "feature taps do not match coarse heads"));
        }
        let mut layer_logits = Vec::with_capacity(self.heads.len());
        for ((l, head), &(fl, f)) in self.heads.iter().zip(&features.taps) {
            if *l != fl {
                return Err(Error::invalid("forward", format!("tap {fl} fed to head {l}")));
            }
            layer_logits.push((*l, head.forward(tape, store, f)?));
        }
        let per_layer: Vec<Var> = layer_logits.iter().map(|&(_, v)| v).collect();
        let coarse_logits = fuse_layers(tape, &per_layer)?;
        let coarse = CoarseMask::from_logits(tape.value(coarse_logits).clone(), MASK_THRESHOLD);

        let points = select_points(&coarse, size)?;
        let prompt = self.prompt.embed_points(tape, store, &points, size)?;
        let (tokens, target) = if self.cfg.semantic_prompt {
            let t = target_embedding(tape, features.last, &coarse)?;
            (positional_semantic_tokens(tape, prompt.tokens, t.embedding)?, Some(t))
        } else {
            (prompt.tokens, None)
        };

        let grid = self.cfg.encoder.grid();
        let image_pe = self.prompt.dense_encoding(store, grid);
        let decode = self.decoder.decode(
            tape,
            store,
            features.last,
            tokens,
            &coarse.binary,
            Some(&image_pe),
            size,
            self.cfg.masked_attention,
        )?;
        Ok(ForwardOutput {
            layer_logits,
            coarse_logits,
            coarse,
            points,
            target,
            decode,
        })
    }

    /// Binary prediction at image resolution.
    pub fn predict(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, image, None)?;
        Ok(crate::decoder::binarize(tape.value(out.final_logits())))
    }
}
