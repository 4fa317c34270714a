//! Compares tape gradients of the full training loss with central
//! differences on a handful of parameters of a 32×32 model.

use mapsam::data::generate_samples;
use mapsam::data::FeatureClass;
use mapsam::encoder::EncoderConfig;
use mapsam::model::{MapSam, ModelConfig};
use mapsam::params::ParamStore;
use mapsam::tensor::gradcheck::relative_error;
use mapsam::tensor::Tape;
use mapsam::training::{composite_loss, LossConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mapsam::Result<()> {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 2,
            feature_tap_layers: vec![1, 2],
            out_dim: 8,
        },
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = MapSam::new(&mut store, &mut rng, cfg)?;
    let sample = generate_samples(FeatureClass::Railway, 1, 3, 32, "g")?.remove(0);
    let loss_cfg = LossConfig::default();

    let loss = |store: &ParamStore| -> mapsam::Result<(Tape, mapsam::tensor::Var)> {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, store, &sample.image, None)?;
        let (l, _) = composite_loss(&mut tape, out.coarse_logits, out.final_logits(), &sample.gt, &loss_cfg)?;
        Ok((tape, l))
    };
    let (mut tape, l) = loss(&store)?;
    println!("loss {:.6}", tape.value(l).data()[0]);
    let grads = tape.backward(l)?;

    let h = 1e-5;
    for name in [
        "encoder.patch_embed.weight",
        "encoder.blocks.0.attn.q.weight",
        "coarse_heads.1.conv1.weight",
        "decoder.mask_token",
        "decoder.mask_head.fc2.weight",
    ] {
        let Some(id) = store.find(name) else {
            println!("{name}: not present");
            continue;
        };
        let analytic = grads.param(id).map_or(0.0, |g| g.data()[0]);
        let mut s = store.clone();
        s.value_mut(id).data_mut()[0] += h;
        let (t, lp) = loss(&s)?;
        let plus = t.value(lp).data()[0];
        s.value_mut(id).data_mut()[0] -= 2.0 * h;
        let (t, lm) = loss(&s)?;
        let numeric = (plus - t.value(lm).data()[0]) / (2.0 * h);
        println!(
            "{name}[0]: analytic {analytic:+.6e} numeric {numeric:+.6e} rel err {:.1e}",
            relative_error(analytic, numeric, 1e-8)
        );
    }
    Ok(())
}
