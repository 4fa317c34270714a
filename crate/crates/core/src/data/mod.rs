//! Synthetic map tiles and dataset files.

mod dataset;
mod mapgen;
pub mod pnm;
pub mod raster;

pub use dataset::{
    build_dataset, derive_seed, generate_samples, load_manifest, load_tile, save_manifest,
    write_tile, DatasetSplit, ManifestEntry, Sample, Split, MANIFEST_NAME,
};
pub use mapgen::{
    gen_railway, gen_texture, gen_vineyard, image_tensor, FeatureClass, Geometry, Tile,
    MIN_TILE_SIZE, RAIL_HALF_GAUGE, RAIL_WIDTH,
};
