//! Writes a small railway dataset and a few vineyard and texture tiles.
//!
//! `cargo run --example gen_tiles -- [out_dir]`

use std::path::PathBuf;

use mapsam::data::{build_dataset, gen_texture, gen_vineyard, pnm, FeatureClass, Split};

fn main() -> mapsam::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/tiles".into()));
    let ds = build_dataset(&out.join("railway"), FeatureClass::Railway, (14, 2, 4), 7, 64)?;
    println!(
        "railway: {} train / {} val / {} test tiles in {}",
        ds.count(Split::Train),
        ds.count(Split::Val),
        ds.count(Split::Test),
        out.join("railway").display()
    );
    for seed in 0..4 {
        let tile = gen_vineyard(seed, 64)?;
        pnm::write(
            &out.join(format!("vineyard_{seed}.ppm")),
            &pnm::encode_ppm(64, 64, &tile.raster),
        )?;
        println!("vineyard seed {seed}: foreground {:.3}", tile.foreground_fraction());
        let texture = gen_texture(seed, 64)?;
        pnm::write(
            &out.join(format!("texture_{seed}.ppm")),
            &pnm::encode_ppm(64, 64, &texture),
        )?;
    }
    Ok(())
}
