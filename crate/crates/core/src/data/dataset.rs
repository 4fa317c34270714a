//! Dataset layout on disk: a manifest plus one PPM raster and one PGM mask
//! per tile.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::mapgen::{image_tensor, FeatureClass, Tile};
use super::pnm;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub class: FeatureClass,
    pub seed: u64,
    pub split: Split,
    /// Relative to the manifest directory.
    pub raster_path: String,
    pub mask_path: String,
}

/// A tile as consumed by training and evaluation.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub size: usize,
    pub image: Tensor,
    pub gt: Tensor,
}

impl Sample {
    /// Halves the resolution: 2×2 mean for the image, and a ground-truth
    /// cell is foreground if any of its four pixels is.
    pub fn halved(&self) -> Result<Sample> {
        let s = self.size;
        if s % 2 != 0 {
            return Err(Error::Data(format!("tile `{}` has odd size {s}", self.id)));
        }
        let h = s / 2;
        let quad = |y: usize, x: usize| [(2 * y, 2 * x), (2 * y, 2 * x + 1), (2 * y + 1, 2 * x), (2 * y + 1, 2 * x + 1)];
        let img = self.image.data();
        let image = Tensor::from_fn(&[h, h, 3], |i| {
            let (y, x, c) = (i / (3 * h), (i / 3) % h, i % 3);
            quad(y, x).iter().map(|&(yy, xx)| img[(yy * s + xx) * 3 + c]).sum::<f64>() / 4.0
        });
        let gt = self.gt.data();
        let gt = Tensor::from_fn(&[h, h], |i| {
            quad(i / h, i % h).iter().map(|&(yy, xx)| gt[yy * s + xx]).fold(0.0, f64::max)
        });
        Ok(Sample {
            id: self.id.clone(),
            size: h,
            image,
            gt,
        })
    }
}

impl Tile {
    pub fn to_sample(&self) -> Sample {
        Sample {
            id: self.id.clone(),
            size: self.size,
            image: self.image(),
            gt: self.gt_tensor(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// Per-tile seed from the dataset seed and the tile id (FNV-1a then
/// splitmix64 finalisation).
pub fn derive_seed(root_seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ root_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl DatasetSplit {
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.as_str())
            .collect()
    }

    pub fn entries_in(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    /// Keeps `k` training tiles drawn without replacement; val and test are
    /// untouched.
    pub fn k_shot(&self, k: usize, seed: u64) -> Result<DatasetSplit> {
        let train = self.count(Split::Train);
        if k == 0 || k > train {
            return Err(Error::Data(format!(
                "k-shot {k} outside 1..={train} training tiles"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = sample(&mut rng, train, k).into_vec();
        keep.sort_unstable();
        let keep: HashSet<usize> = keep.into_iter().collect();
        let mut i = 0;
        let entries = self
            .entries
            .iter()
            .filter(|e| {
                if e.split != Split::Train {
                    return true;
                }
                i += 1;
                keep.contains(&(i - 1))
            })
            .cloned()
            .collect();
        Ok(DatasetSplit {
            root: self.root.clone(),
            entries,
        })
    }

    /// Keeps `round(fraction · n_train)` training tiles (at least one).
    pub fn fraction(&self, fraction: f64, seed: u64) -> Result<DatasetSplit> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Data(format!("fraction {fraction} outside (0, 1]")));
        }
        let k = ((self.count(Split::Train) as f64 * fraction).round() as usize).max(1);
        self.k_shot(k, seed)
    }

    pub fn manifest_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            writeln!(
                out,
                "{} {} {} {} {} {}",
                e.id,
                e.class,
                e.seed,
                e.split.as_str(),
                e.raster_path,
                e.mask_path
            )
            .unwrap();
        }
        out
    }

    pub fn parse_manifest(root: &Path, text: &str) -> Result<DatasetSplit> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = |m: &str| Error::Data(format!("manifest line {}: {m}", n + 1));
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            if !seen.insert(f[0].to_string()) {
                return Err(bad("duplicate id"));
            }
            entries.push(ManifestEntry {
                id: f[0].into(),
                class: FeatureClass::parse(f[1])?,
                seed: f[2].parse().map_err(|_| bad("seed"))?,
                split: f[3].parse()?,
                raster_path: f[4].into(),
                mask_path: f[5].into(),
            });
        }
        Ok(DatasetSplit {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<Sample> {
        load_tile(&self.root, entry)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.entries_in(split).into_iter().map(|e| self.load(e)).collect()
    }
}

pub fn save_manifest(split: &DatasetSplit, path: &Path) -> Result<()> {
    pnm::write(path, split.manifest_text().as_bytes())
}

/// Reads a manifest; tile paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<DatasetSplit> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new("."));
    DatasetSplit::parse_manifest(root, &text)
}

pub fn write_tile(root: &Path, entry: &ManifestEntry, tile: &Tile) -> Result<()> {
    pnm::write(
        &root.join(&entry.raster_path),
        &pnm::encode_ppm(tile.size, tile.size, &tile.raster),
    )?;
    let mask: Vec<u8> = tile.gt.iter().map(|&v| v * 255).collect();
    pnm::write(
        &root.join(&entry.mask_path),
        &pnm::encode_pgm(tile.size, tile.size, &mask),
    )
}

pub fn load_tile(root: &Path, entry: &ManifestEntry) -> Result<Sample> {
    let (w, h, c, raster) = pnm::read(&root.join(&entry.raster_path))?;
    let (mw, mh, mc, mask) = pnm::read(&root.join(&entry.mask_path))?;
    if c != 3 || mc != 1 || w != h || (mw, mh) != (w, h) {
        return Err(Error::Data(format!("tile `{}` has inconsistent files", entry.id)));
    }
    let gt = mask.iter().map(|&v| (v >= 128) as u8 as f64).collect();
    Ok(Sample {
        id: entry.id.clone(),
        size: w,
        image: image_tensor(w, &raster),
        gt: Tensor::new(vec![w, w], gt)?,
    })
}

/// Generates `train + val + test` tiles into `root` and writes the manifest.
pub fn build_dataset(
    root: &Path,
    class: FeatureClass,
    counts: (usize, usize, usize),
    root_seed: u64,
    size: usize,
) -> Result<DatasetSplit> {
    let (train, val, test) = counts;
    if train == 0 || val == 0 || test == 0 {
        return Err(Error::Data("split counts must be positive".into()));
    }
    let mut entries = Vec::with_capacity(train + val + test);
    for i in 0..train + val + test {
        let split = if i < train {
            Split::Train
        } else if i < train + val {
            Split::Val
        } else {
            Split::Test
        };
        let id = format!("{class}_{i:05}");
        let entry = ManifestEntry {
            seed: derive_seed(root_seed, &id),
            raster_path: format!("tiles/{id}.ppm"),
            mask_path: format!("tiles/{id}_gt.pgm"),
            class,
            split,
            id,
        };
        let mut tile = class.generate(entry.seed, size)?;
        tile.id = entry.id.clone();
        write_tile(root, &entry, &tile)?;
        entries.push(entry);
    }
    let split = DatasetSplit {
        root: root.to_path_buf(),
        entries,
    };
    save_manifest(&split, &root.join(MANIFEST_NAME))?;
    Ok(split)
}

/// Generates tiles in memory without touching disk.
pub fn generate_samples(
    class: FeatureClass,
    count: usize,
    root_seed: u64,
    size: usize,
    prefix: &str,
) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let id = format!("{prefix}_{i:05}");
            let mut tile = class.generate(derive_seed(root_seed, &id), size)?;
            tile.id = id;
            Ok(tile.to_sample())
        })
        .collect()
}
