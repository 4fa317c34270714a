//! Versioned binary checkpoint container.
//!
//! Layout (little-endian): magic `MSAM`, `u32` version, stage byte, config
//! text, epoch, step, RNG state, then named blobs. Each blob carries a kind
//! byte (parameter or optimiser moment), its name, a trainable flag, its
//! dimensions and `f64` data.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::{AdamW, AdamWConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"MSAM";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    fn code(self) -> u8 {
        match self {
            Stage::Pretrain => 0,
            Stage::Finetune => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Param = 0,
    Moment1 = 1,
    Moment2 = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: String,
    pub epoch: u64,
    pub step: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub params: Vec<Blob>,
    pub adam_steps: u64,
    /// `(name, first moment, second moment)`.
    pub moments: Vec<(String, Tensor, Tensor)>,
}

impl Checkpoint {
    pub fn capture(stage: Stage, config: String, store: &ParamStore, state: &TrainState) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| Blob {
                name: p.name.clone(),
                trainable: p.trainable,
                value: p.value.clone(),
            })
            .collect();
        let moments = state
            .optimizer
            .moments
            .iter()
            .map(|(id, (m, v))| (store.get(*id).name.clone(), m.clone(), v.clone()))
            .collect();
        Checkpoint {
            stage,
            config,
            epoch: state.epoch as u64,
            step: state.step,
            rng_seed: state.rng.get_seed(),
            rng_stream: state.rng.get_stream(),
            rng_word_pos: state.rng.get_word_pos(),
            params,
            adam_steps: state.optimizer.steps,
            moments,
        }
    }

    /// Writes parameter values into `store`. Every blob must name an existing
    /// parameter of the same shape; with `exact`, every store entry must be
    /// covered too.
    pub fn restore_params(&self, store: &mut ParamStore, exact: bool) -> Result<()> {
        for b in &self.params {
            let id = store
                .find(&b.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", b.name)))?;
            let dst = store.value_mut(id);
            if dst.shape() != b.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, checkpoint has {:?}",
                    b.name,
                    dst.shape(),
                    b.value.shape()
                )));
            }
            *dst = b.value.clone();
        }
        if exact && store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        Ok(())
    }

    /// Parameters as a standalone store.
    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for b in &self.params {
            store.add(b.name.clone(), b.value.clone(), b.trainable);
        }
        store
    }

    /// Training progress, resolving moment names against `store`.
    pub fn train_state(&self, store: &ParamStore, adamw: AdamWConfig) -> Result<TrainState> {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        let mut optimizer = AdamW::new(adamw);
        optimizer.steps = self.adam_steps;
        for (name, m, v) in &self.moments {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("moment for unknown parameter `{name}`")))?;
            optimizer.moments.insert(id, (m.clone(), v.clone()));
        }
        Ok(TrainState {
            epoch: self.epoch as usize,
            step: self.step,
            optimizer,
            rng,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        w.push(self.stage.code());
        put_str(&mut w, &self.config);
        w.extend_from_slice(&self.epoch.to_le_bytes());
        w.extend_from_slice(&self.step.to_le_bytes());
        w.extend_from_slice(&self.rng_seed);
        w.extend_from_slice(&self.rng_stream.to_le_bytes());
        w.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        w.extend_from_slice(&self.adam_steps.to_le_bytes());
        let blobs = self.params.len() + 2 * self.moments.len();
        w.extend_from_slice(&(blobs as u32).to_le_bytes());
        for b in &self.params {
            put_blob(&mut w, Kind::Param, &b.name, b.trainable, &b.value);
        }
        for (name, m, v) in &self.moments {
            put_blob(&mut w, Kind::Moment1, name, false, m);
            put_blob(&mut w, Kind::Moment2, name, false, v);
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version}, this build reads version {VERSION}"
            )));
        }
        let stage = match r.take(1)?[0] {
            0 => Stage::Pretrain,
            1 => Stage::Finetune,
            s => return Err(Error::Checkpoint(format!("unknown stage code {s}"))),
        };
        let config = r.string()?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let rng_seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let rng_stream = r.u64()?;
        let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let adam_steps = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = Vec::new();
        let mut moments: Vec<(String, Tensor, Tensor)> = Vec::new();
        let mut pending: Option<(String, Tensor)> = None;
        for _ in 0..n {
            let kind = r.take(1)?[0];
            let name = r.string()?;
            let trainable = r.take(1)?[0] != 0;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let raw = r.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let value = Tensor::new(dims, data)?;
            match kind {
                0 => params.push(Blob {
                    name,
                    trainable,
                    value,
                }),
                1 => pending = Some((name, value)),
                2 => match pending.take() {
                    Some((m_name, m)) if m_name == name => moments.push((name, m, value)),
                    _ => return Err(Error::Checkpoint(format!("unpaired moment `{name}`"))),
                },
                k => return Err(Error::Checkpoint(format!("unknown blob kind {k}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            stage,
            config,
            epoch,
            step,
            rng_seed,
            rng_stream,
            rng_word_pos,
            params,
            adam_steps,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::pnm::write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u32).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

fn put_blob(w: &mut Vec<u8>, kind: Kind, name: &str, trainable: bool, t: &Tensor) {
    w.push(kind as u8);
    put_str(w, name);
    w.push(trainable as u8);
    w.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        w.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 in checkpoint".into()))
    }
}
