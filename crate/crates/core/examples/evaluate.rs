//! Scores a fine-tuned checkpoint on the test split of a dataset and checks
//! the F1/IoU identity on every row of the report.
//!
//! `cargo run --release --example evaluate -- <checkpoint> <dataset_dir>`

use std::path::PathBuf;

use mapsam::checkpoint::Checkpoint;
use mapsam::cli::open_dataset;
use mapsam::data::Split;
use mapsam::metrics::EvalReport;
use mapsam::pipeline;
use mapsam::training::{evaluate_samples, feature_cache};

fn main() -> mapsam::Result<()> {
    let mut args = std::env::args().skip(1).map(PathBuf::from);
    let (Some(ck), Some(data)) = (args.next(), args.next()) else {
        eprintln!("usage: evaluate <checkpoint> <dataset_dir>");
        std::process::exit(2);
    };
    let (_, model, store) = pipeline::load_finetuned(&Checkpoint::load(&ck)?)?;
    let test = open_dataset(&data)?.load_split(Split::Test)?;
    let cache = feature_cache(&model, &store, &test)?;
    let ev = evaluate_samples(&model, &store, &test, &cache, "test")?;
    let text = ev.final_.render();
    print!("{text}");

    let worst = EvalReport::parse_rows(&text)
        .iter()
        .map(|(_, f1, iou, _)| (f1 - 2.0 * iou / (1.0 + iou)).abs())
        .fold(0.0, f64::max);
    println!("max |F1 − 2·IoU/(1+IoU)| over rows: {worst:.1e}");
    Ok(())
}
