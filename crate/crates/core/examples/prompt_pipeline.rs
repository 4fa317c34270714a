//! Walks one tile through the automatic prompt generator: per-layer coarse
//! logits, their mean, the two selected points and the target embedding.

use mapsam::data::gen_railway;
use mapsam::model::{MapSam, ModelConfig};
use mapsam::params::ParamStore;
use mapsam::tensor::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mapsam::Result<()> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = MapSam::new(&mut store, &mut rng, ModelConfig::default())?;
    let tile = gen_railway(42, 64)?;
    println!("railway tile, seed 42: {:.1}% foreground", 100.0 * tile.foreground_fraction());

    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &store, &tile.image(), None)?;
    for (layer, logits) in &out.layer_logits {
        let t = tape.value(*logits);
        let mean = t.sum() / t.numel() as f64;
        println!("tap layer {layer}: coarse logits {:?}, mean {mean:+.4}", t.shape());
    }
    let (h, w) = out.coarse.grid();
    println!(
        "fused coarse mask {h}×{w}: {} cells at p ≥ {}",
        out.coarse.foreground(),
        out.coarse.threshold
    );
    for p in &out.points {
        println!("{} point at row {}, col {}", p.label.as_str(), p.row, p.col);
    }
    match &out.target {
        Some(t) => println!(
            "target embedding {:?} averaged over {} cells",
            tape.shape(t.embedding),
            t.support_size
        ),
        None => println!("semantic prompt disabled"),
    }
    println!("decoder masks per layer: {}", out.decode.masks.len() - 1);
    Ok(())
}
