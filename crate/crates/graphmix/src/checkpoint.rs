//! Checkpoint container.
//!
//! All integers are little-endian:
//!
//! ```text
//! magic    b"GMXC"
//! version  u32
//! width    u8     element width in bytes: 4 (f32) or 8 (f64)
//! count    u32
//! count × { name_len u32, name UTF-8, rank u32, dims u64 × rank, values }
//! meta_len u32, meta JSON
//! ```
//!
//! A learner checkpoint stores the main parameters under their own names,
//! target copies under `target/` and optimizer state under `opt/`; the JSON
//! trailer holds counters, random stream positions and the architecture.

use std::fs;
use std::path::Path;

use graphmix_core::diff::{ParamStore, ParamTensor, Precision, Scalar};
use graphmix_core::model::{GraphMix, ModelConfig, ModelDims};
use graphmix_core::trainer::{Counters, RngPositions, Trainer};
use serde::{Deserialize, Serialize};

use crate::Error;

pub const MAGIC: &[u8; 4] = b"GMXC";
pub const VERSION: u32 = 1;
pub const TARGET_PREFIX: &str = "target/";
pub const OPT_PREFIX: &str = "opt/";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported format version {found} (this build reads version {VERSION})")]
    Version { found: u32 },
    #[error("unsupported precision tag {0}")]
    Precision(u8),
    #[error("holds {found}-byte values, expected {expected}-byte")]
    WrongPrecision { expected: u8, found: u8 },
    #[error("truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("record {0} has a non-UTF-8 name")]
    Name(usize),
    #[error("tensor: {0}")]
    Tensor(String),
    #[error("metadata: {0}")]
    Meta(String),
}

/// Serializes `tensors` and `meta` into one container.
pub fn encode<'a, T: Scalar + 'a>(
    tensors: impl IntoIterator<Item = &'a ParamTensor<T>>,
    meta: &serde_json::Value,
) -> Result<Vec<u8>, CheckpointError> {
    let width = T::PRECISION.width();
    if Precision::from_width(width) != Some(T::PRECISION) {
        return Err(CheckpointError::Precision(width));
    }
    let tensors: Vec<&ParamTensor<T>> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(width);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name().len() as u32).to_le_bytes());
        out.extend_from_slice(t.name().as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.values() {
            v.write_le(&mut out);
        }
    }
    let meta = serde_json::to_vec(meta).map_err(|e| CheckpointError::Meta(e.to_string()))?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a container whose values have precision `T`.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(Vec<ParamTensor<T>>, serde_json::Value), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let width = r.take(1)?[0];
    if Precision::from_width(width).is_none() {
        return Err(CheckpointError::Precision(width));
    }
    if width != T::PRECISION.width() {
        return Err(CheckpointError::WrongPrecision { expected: T::PRECISION.width(), found: width });
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| CheckpointError::Name(i))?.to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| CheckpointError::Tensor(format!("`{name}` is too large")))?);
        }
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let bytes =
            n.and_then(|n| n.checked_mul(width as usize)).ok_or_else(|| CheckpointError::Tensor(format!("`{name}` is too large")))?;
        let raw = r.take(bytes)?;
        let values = raw.chunks_exact(width as usize).map(T::read_le).collect();
        tensors.push(ParamTensor::new(name, shape, values).map_err(|e| CheckpointError::Tensor(e.to_string()))?);
    }
    let meta_len = r.u32()? as usize;
    let meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| CheckpointError::Meta(e.to_string()))?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - r.pos));
    }
    Ok((tensors, meta))
}

/// Run metadata carried by a learner checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub seed: u64,
    pub model: ModelConfig,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub state_dim: usize,
    pub n_agents: usize,
    pub episodes: u64,
    pub env_steps: u64,
    pub updates: u64,
    pub next_eval: u64,
    /// Word positions of the env, exploration and sampling streams.
    pub rng: [u128; 3],
}

impl Meta {
    pub fn dims(&self) -> ModelDims {
        ModelDims { obs_dim: self.obs_dim, n_actions: self.n_actions, state_dim: self.state_dim }
    }

    pub fn model(&self) -> Result<GraphMix, graphmix_core::Error> {
        GraphMix::new(self.model.clone(), self.dims())
    }

    pub fn counters(&self) -> Counters {
        Counters { episodes: self.episodes, env_steps: self.env_steps, updates: self.updates, next_eval: self.next_eval }
    }

    pub fn rng_positions(&self) -> RngPositions {
        RngPositions { env: self.rng[0], explore: self.rng[1], sampling: self.rng[2] }
    }
}

/// Complete learner state except the replay buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub target: ParamStore<f32>,
    pub optim: Vec<(String, Vec<f32>)>,
    pub meta: Meta,
}

impl Checkpoint {
    pub fn of(trainer: &Trainer) -> Checkpoint {
        let d = trainer.model().dims();
        let c = trainer.counters();
        let r = trainer.rng_positions();
        Checkpoint {
            params: trainer.params().clone(),
            target: trainer.target().clone(),
            optim: trainer.optimizer().state().iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            meta: Meta {
                seed: trainer.seed(),
                model: trainer.model().config().clone(),
                obs_dim: d.obs_dim,
                n_actions: d.n_actions,
                state_dim: d.state_dim,
                n_agents: trainer.env_spec().n_agents,
                episodes: c.episodes,
                env_steps: c.env_steps,
                updates: c.updates,
                next_eval: c.next_eval,
                rng: [r.env, r.explore, r.sampling],
            },
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let renamed = |prefix: &str, p: &ParamTensor<f32>| {
            ParamTensor::new(format!("{prefix}{}", p.name()), p.shape().to_vec(), p.values().to_vec()).expect("valid tensor")
        };
        let mut all: Vec<ParamTensor<f32>> = self.params.iter().cloned().collect();
        all.extend(self.target.iter().map(|p| renamed(TARGET_PREFIX, p)));
        for (name, values) in &self.optim {
            let t = ParamTensor::new(format!("{OPT_PREFIX}{name}"), vec![values.len().max(1)], values.clone());
            all.push(t.expect("optimizer state is non-empty"));
        }
        let meta = serde_json::to_value(&self.meta).expect("meta serializes");
        encode(&all, &meta).expect("f32 is storable")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        let (tensors, meta) = decode::<f32>(bytes)?;
        let meta: Meta = serde_json::from_value(meta).map_err(|e| CheckpointError::Meta(e.to_string()))?;
        let (mut params, mut target, mut optim) = (ParamStore::new(), ParamStore::new(), Vec::new());
        let bad = |e: graphmix_core::diff::DiffError| CheckpointError::Tensor(e.to_string());
        for t in tensors {
            if let Some(name) = t.name().strip_prefix(TARGET_PREFIX) {
                let t = ParamTensor::new(name, t.shape().to_vec(), t.values().to_vec()).map_err(bad)?;
                target.insert(t).map_err(bad)?;
            } else if let Some(name) = t.name().strip_prefix(OPT_PREFIX) {
                optim.push((name.to_string(), t.values().to_vec()));
            } else {
                params.insert(t).map_err(bad)?;
            }
        }
        Ok(Checkpoint { params, target, optim, meta })
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(Error::write(dir))?;
        }
        // Write then rename so a crash never leaves a partial checkpoint.
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(Error::write(&tmp))?;
        fs::rename(&tmp, path).map_err(Error::write(path))
    }

    pub fn load(path: &Path) -> Result<Checkpoint, Error> {
        let bytes = fs::read(path).map_err(Error::read(path))?;
        Checkpoint::from_bytes(&bytes).map_err(|source| Error::Checkpoint { path: path.to_path_buf(), source })
    }
}
