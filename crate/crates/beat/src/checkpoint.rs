//! Single-file checkpoint archive.
//!
//! Layout: the magic bytes `BEATCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` manifest length, the JSON manifest, then every array
//! listed in the manifest as little-endian `f64` values in listed order.
//! Model parameters keep their canonical names; optimizer moments are stored
//! as `adam.m.<name>` and `adam.v.<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use beat_core::config::{DataDims, TrainConfig};
use beat_core::data::Vocabulary;
use beat_core::model::Model;
use beat_core::optim::Adam;
use beat_core::params::Params;
use beat_core::train::{RngState, Trainer};
use beat_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 8] = b"BEATCKPT";
pub const VERSION: u32 = 1;
const FIRST_MOMENT: &str = "adam.m.";
const SECOND_MOMENT: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: TrainConfig,
    dims: DataDims,
    vocab: Vec<String>,
    adam: AdamHeader,
    rng: RngState,
    epoch: usize,
    arrays: Vec<ArrayEntry>,
}

/// Everything needed to evaluate a model or continue training it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Adam,
    pub rng: RngState,
    pub epoch: usize,
    pub vocab: Vocabulary,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, vocab: &Vocabulary) -> Self {
        Self {
            model: trainer.model.clone(),
            optimizer: trainer.optimizer.clone(),
            rng: trainer.rng_state(),
            epoch: trainer.epoch(),
            vocab: vocab.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut arrays: Vec<(String, &Tensor)> = self.model.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        arrays.extend(self.optimizer.first_moments().iter().map(|(n, t)| (format!("{FIRST_MOMENT}{n}"), t)));
        arrays.extend(self.optimizer.second_moments().iter().map(|(n, t)| (format!("{SECOND_MOMENT}{n}"), t)));
        let o = &self.optimizer;
        let manifest = Manifest {
            config: self.model.config.clone(),
            dims: self.model.dims,
            vocab: self.vocab.tokens().to_vec(),
            adam: AdamHeader { lr: o.lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps, step: o.step_count() },
            rng: self.rng,
            epoch: self.epoch,
            arrays: arrays.iter().map(|(n, t)| ArrayEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + json.len() + arrays.iter().map(|(_, t)| 8 * t.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> CliResult<Self> {
        let bad = |m: &str| CliError::format(path, format!("invalid checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing BEATCKPT header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = bytes.get(20..20 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
        let mut cursor = 20 + len;
        let mut params = Params::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for entry in &manifest.arrays {
            let n: usize = entry.shape.iter().product();
            let raw = bytes.get(cursor..cursor + 8 * n).ok_or_else(|| bad(&format!("truncated array '{}'", entry.name)))?;
            cursor += 8 * n;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(&entry.shape, data).map_err(|e| bad(&e.to_string()))?;
            if let Some(name) = entry.name.strip_prefix(FIRST_MOMENT) {
                first.insert(name.to_string(), t);
            } else if let Some(name) = entry.name.strip_prefix(SECOND_MOMENT) {
                second.insert(name.to_string(), t);
            } else {
                params.insert(entry.name.clone(), t);
            }
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let vocab = Vocabulary::from_tokens(manifest.vocab);
        if vocab.len() != manifest.dims.vocab_size {
            return Err(bad("vocabulary size disagrees with the model"));
        }
        manifest.config.validate()?;
        let model = Model::from_params(manifest.config, manifest.dims, params)?;
        let a = manifest.adam;
        let mut optimizer = Adam::from_state(a.lr, a.step, first, second)?;
        (optimizer.beta1, optimizer.beta2, optimizer.eps) = (a.beta1, a.beta2, a.eps);
        Ok(Self { model, optimizer, rng: manifest.rng, epoch: manifest.epoch, vocab })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
