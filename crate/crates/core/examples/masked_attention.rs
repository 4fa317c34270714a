//! Cross-attention restricted to the previous mask: masked-out pixels get
//! zero weight, an all-ones mask changes nothing and an empty mask falls
//! back to plain attention.

use mapsam::decoder::additive_mask;
use mapsam::nn::attention;
use mapsam::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mapsam::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (tokens, pixels, dim) = (3, 16, 8);
    let mut rand = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let (q, k, v) = (rand(&[tokens, dim]), rand(&[pixels, dim]), rand(&[pixels, dim]));

    let run = |mask: Option<&Tensor>| -> mapsam::Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let m = mask.and_then(|m| additive_mask(m, tokens)).map(|m| tape.constant(m));
        let (out, w) = attention(&mut tape, qv, kv, vv, 1, m)?;
        Ok((tape.value(out).clone(), tape.value(w[0]).clone()))
    };

    let (plain, _) = run(None)?;
    let (ones, _) = run(Some(&Tensor::full(&[4, 4, 1], 1.0)))?;
    println!("all-ones mask vs plain: max diff {:.1e}", ones.max_abs_diff(&plain));

    let partial = Tensor::from_fn(&[4, 4, 1], |i| (i % 4 < 2) as u8 as f64);
    let (_, w) = run(Some(&partial))?;
    let leaked: f64 = (0..tokens)
        .flat_map(|r| (0..pixels).map(move |c| (r, c)))
        .filter(|&(_, c)| partial.data()[c] == 0.0)
        .map(|(r, c)| w.get2(r, c))
        .sum();
    println!("weight on masked-out pixels: {leaked}");

    let (empty, _) = run(Some(&Tensor::zeros(&[4, 4, 1])))?;
    println!(
        "empty mask: finite = {}, equals plain = {}",
        empty.data().iter().all(|v| v.is_finite()),
        empty.max_abs_diff(&plain) == 0.0
    );
    Ok(())
}
