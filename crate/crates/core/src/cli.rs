//! Command-line front end. The `mapsam` binary only forwards to [`main`].

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info, warn};

use crate::ablation::{Ablation, AblationData};
use crate::checkpoint::{Checkpoint, Stage};
use crate::config::RunConfig;
use crate::data::{self, build_dataset, image_tensor, load_manifest, pnm, save_manifest, DatasetSplit, Split};
use crate::error::{Error, Result};
use crate::pipeline;
use crate::tensor::{interpolate_bilinear, Tape};
use crate::training::{evaluate_samples, feature_cache};

#[derive(Parser, Debug)]
#[command(name = "mapsam", version, about = "Prompt-free segmentation of map features with an adapted ViT")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Config file in sectioned `key = value` form.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one value, e.g. `--set finetune.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Run seed; falls back to MAPSAM_SEED, then to the config.
    #[arg(long, env = "MAPSAM_SEED", global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset, or subsample an existing manifest.
    GenData(GenDataArgs),
    /// Pretrain the encoder on masked-patch reconstruction of textures.
    Pretrain(PretrainArgs),
    /// Fine-tune adapters, prompt generator and decoder on a dataset.
    Finetune(FinetuneArgs),
    /// Score a fine-tuned checkpoint on one split.
    Eval(EvalArgs),
    /// Segment one tile.
    Infer(InferArgs),
    /// Run the component and tap-layer ablations.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory (generation) or dataset to subsample.
    #[arg(long)]
    pub out: PathBuf,
    /// Subsample the existing dataset at `--out` to this many training tiles.
    #[arg(long, conflicts_with = "fraction")]
    pub k_shot: Option<usize>,
    /// Subsample the existing dataset at `--out` to this share of training tiles.
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Manifest file name for a subsample (default `manifest_k{K}.txt` or `manifest_f{F}.txt`).
    #[arg(long)]
    pub name: Option<String>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a pretraining checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Per-epoch log (`epoch loss lr`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Pretraining checkpoint supplying the encoder.
    #[arg(long, conflicts_with = "resume")]
    pub pretrained: Option<PathBuf>,
    /// Continue from a fine-tuning checkpoint; epoch numbering carries on.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Metric log, one line per epoch; appended to on resume.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write each tile's predicted mask as `{id}.pgm` here.
    #[arg(long)]
    pub dump_dir: Option<PathBuf>,
    /// Also report the coarse mask.
    #[arg(long)]
    pub coarse: bool,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input tile (binary PPM).
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory; receives `final.pgm`.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write coarse.pgm, points.txt and one mask_l{i}.pgm per decoder layer.
    #[arg(long)]
    pub dump_intermediates: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationKind {
    Components,
    Taps,
    Both,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Pretraining checkpoint; pretrains from scratch when absent.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Number of fine-tuning seeds, counted up from the run seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long, value_enum, default_value = "both")]
    pub what: AblationKind,
    /// Table file; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

/// Defaults, then `base` (a checkpoint's snapshot), then the config file,
/// the seed and the `--set` overrides.
pub fn resolve_config(args: &ConfigArgs, base: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match (&args.config, base) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(text)) => RunConfig::parse(text)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    for item in &args.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`--set {item}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Accepts a dataset directory (reads `manifest.txt`) or a manifest path.
pub fn open_dataset(path: &Path) -> Result<DatasetSplit> {
    let manifest = if path.is_dir() { path.join(data::MANIFEST_NAME) } else { path.to_path_buf() };
    if !manifest.exists() {
        return Err(Error::Data(format!("no manifest at {}", manifest.display())));
    }
    load_manifest(&manifest)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    pnm::write(path, text.as_bytes())
}

struct LineLog(Option<fs::File>);

impl LineLog {
    fn open(path: Option<&Path>, append: bool) -> Result<Self> {
        let Some(path) = path else { return Ok(LineLog(None)) };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(LineLog(Some(file)))
    }

    fn line(&mut self, text: &str) -> Result<()> {
        if let Some(f) = &mut self.0 {
            writeln!(f, "{text}").map_err(|e| Error::Data(format!("metric log: {e}")))?;
        }
        Ok(())
    }
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let cfg = resolve_config(&args.cfg, None)?;
    let subsample = match (args.k_shot, args.fraction) {
        (Some(k), _) => Some((format!("manifest_k{k}.txt"), Some(k), None)),
        (None, Some(f)) => Some((format!("manifest_f{f}.txt"), None, Some(f))),
        (None, None) => None,
    };
    if let Some((default_name, k, f)) = subsample {
        let ds = open_dataset(&args.out)?;
        let sub = match (k, f) {
            (Some(k), _) => ds.k_shot(k, cfg.seed)?,
            (_, Some(f)) => ds.fraction(f, cfg.seed)?,
            _ => unreachable!(),
        };
        let path = ds.root.join(args.name.clone().unwrap_or(default_name));
        save_manifest(&sub, &path)?;
        info!("wrote {} training tiles to {}", sub.count(Split::Train), path.display());
        return Ok(());
    }
    let d = &cfg.data;
    let ds = build_dataset(
        &args.out,
        d.class,
        (d.train, d.val, d.test),
        d.seed,
        cfg.model.encoder.image_size,
    )?;
    info!("wrote {} {} tiles to {}", ds.entries.len(), d.class, args.out.display());
    Ok(())
}

fn pretrain(args: &PretrainArgs) -> Result<()> {
    let resume = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let cfg = resolve_config(&args.cfg, resume.as_ref().map(|c| c.config.as_str()))?;
    let mut log = LineLog::open(args.log.as_deref(), resume.is_some())?;
    let ck = pipeline::pretrain_stage(&cfg, resume.as_ref(), &mut |r| log.line(&r.to_string()))?;
    ck.save(&args.out)?;
    info!("wrote {}", args.out.display());
    Ok(())
}

fn finetune(args: &FinetuneArgs) -> Result<()> {
    let resume = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let pretrained = args.pretrained.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(p) = &pretrained {
        if p.stage != Stage::Pretrain {
            return Err(Error::Checkpoint(format!("{} is not a pretraining checkpoint", p.stage.as_str())));
        }
    }
    let base = resume.as_ref().or(pretrained.as_ref()).map(|c| c.config.as_str());
    let cfg = resolve_config(&args.cfg, base)?;
    if pretrained.is_none() && resume.is_none() {
        warn!("no pretrained encoder given; fine-tuning from a random encoder");
    }
    let ds = open_dataset(&args.data)?;
    let train = ds.load_split(Split::Train)?;
    let val = ds.load_split(Split::Val)?;
    let mut log = LineLog::open(args.log.as_deref(), resume.is_some())?;
    let pre_store = pretrained.as_ref().map(Checkpoint::to_store);
    let run = pipeline::finetune_stage(&cfg, pre_store.as_ref(), resume.as_ref(), &train, &val, &mut |r| {
        log.line(&r.to_string())
    })?;
    run.checkpoint(&cfg).save(&args.out)?;
    info!("wrote {}", args.out.display());
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (_, model, store) = pipeline::load_finetuned(&ck)?;
    let ds = open_dataset(&args.data)?;
    let split: Split = args.split.into();
    let samples = ds.load_split(split)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("split `{}` is empty", split.as_str())));
    }
    let cache = feature_cache(&model, &store, &samples)?;
    let ev = evaluate_samples(&model, &store, &samples, &cache, split.as_str())?;
    if let Some(dir) = &args.dump_dir {
        for s in &samples {
            let pred = model.predict(&store, &s.image)?;
            pnm::write_unit_grid(&dir.join(format!("{}.pgm", s.id)), s.size, s.size, pred.data())?;
        }
    }
    let mut text = ev.final_.render();
    if args.coarse {
        text.push('\n');
        text.push_str(&ev.coarse.render());
    }
    match &args.out {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn infer(args: &InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (cfg, model, store) = pipeline::load_finetuned(&ck)?;
    let (w, h, c, raster) = pnm::read(&args.input)?;
    let size = cfg.model.encoder.image_size;
    if c != 3 || w != size || h != size {
        return Err(Error::Data(format!(
            "{} is {w}×{h} with {c} channels; expected a {size}×{size} colour tile",
            args.input.display()
        )));
    }
    let image = image_tensor(size, &raster);
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &store, &image, None)?;
    let fin = crate::decoder::binarize(tape.value(out.final_logits()));
    pnm::write_unit_grid(&args.out.join("final.pgm"), size, size, fin.data())?;
    if args.dump_intermediates {
        let coarse = interpolate_bilinear(&out.coarse.probabilities, size, size)?;
        pnm::write_unit_grid(&args.out.join("coarse.pgm"), size, size, coarse.data())?;
        let points: String = out
            .points
            .iter()
            .map(|p| format!("{} {} {}\n", p.row, p.col, p.label.as_str()))
            .collect();
        write_text(&args.out.join("points.txt"), &points)?;
        let g = cfg.model.encoder.grid();
        for (i, m) in out.decode.masks.iter().skip(1).enumerate() {
            pnm::write_unit_grid(&args.out.join(format!("mask_l{i}.pgm")), g, g, m.data())?;
        }
    }
    info!("wrote masks to {}", args.out.display());
    Ok(())
}

fn ablate(args: &AblateArgs) -> Result<()> {
    let pretrained = args.pretrained.as_deref().map(Checkpoint::load).transpose()?;
    let cfg = resolve_config(&args.cfg, pretrained.as_ref().map(|c| c.config.as_str()))?;
    if args.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let ds = open_dataset(&args.data)?;
    let train = ds.load_split(Split::Train)?;
    let val = ds.load_split(Split::Val)?;
    let test = ds.load_split(Split::Test)?;
    let store = match pretrained {
        Some(ck) => ck.to_store(),
        None => pipeline::pretrain_stage(&cfg, None, &mut |_| Ok(()))?.to_store(),
    };
    let seeds = (0..args.seeds).map(|i| cfg.seed + i).collect();
    let mut ab = Ablation::new(
        cfg,
        store,
        seeds,
        AblationData {
            train: &train,
            val: &val,
            test: &test,
        },
    )?;
    let mut text = String::new();
    if args.what != AblationKind::Taps {
        text.push_str(&ab.components()?.render());
    }
    if args.what != AblationKind::Components {
        if !text.is_empty() {
            text.push('\n');
        }
        text.push_str(&ab.taps()?.render());
    }
    match &args.out {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Ablate(a) => ablate(a),
    }
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            error!("{e}");
            e.exit_code()
        }
    }
}
