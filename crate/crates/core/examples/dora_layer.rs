//! Attaches LoRA and DoRA adapters to one linear layer and checks the
//! properties that make DoRA a drop-in replacement at initialisation.

use mapsam::adaptation::{trainable_parameter_count, AdaptMode, AdapterConfig};
use mapsam::nn::linear;
use mapsam::params::ParamStore;
use mapsam::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mapsam::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::from_fn(&[3, 16], |_| rng.gen_range(-1.0..1.0));
    let cfg = AdapterConfig::default();

    for mode in [AdaptMode::Lora, AdaptMode::Dora] {
        let mut store = ParamStore::new();
        let mut layer = linear(&mut store, &mut rng, "proj", 16, 12, true);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let before = layer.forward(&mut tape, &store, xv)?;
        let before = tape.value(before).clone();

        layer.attach(&mut store, &mut rng, mode, cfg)?;
        let xv = tape.constant(x.clone());
        let after = layer.forward(&mut tape, &store, xv)?;
        let (trainable, total) = trainable_parameter_count(&store);
        println!(
            "{:>4}: step-0 output change {:.1e}, trainable {trainable} of {total}",
            mode.as_str(),
            tape.value(after).max_abs_diff(&before)
        );

        if mode == AdaptMode::Dora {
            // move B away from zero and compare column norms with |m|
            let (_, b, m) = layer.adapter_params().expect("adapted");
            for v in store.value_mut(b).data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
            let w = layer.merged_weight(&mut tape, &store)?;
            let norms = tape.column_norms(w)?;
            let m = store.value(m.expect("magnitude")).clone();
            let diff = tape
                .value(norms)
                .data()
                .iter()
                .zip(m.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            println!("dora: max |‖W'‖_c − m| after perturbing B = {diff:.1e}");
        }
    }
    println!("rank {} / alpha {}: DoRA adds one magnitude per input column", cfg.rank, cfg.alpha);
    Ok(())
}
