//! Training loop.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::{DataDims, TrainConfig};
use crate::data::{IdentitySampler, PairDataset};
use crate::error::{BeatError, Result};
use crate::model::Model;
use crate::optim::Adam;

/// Loss breakdown logged after one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub id: f64,
    pub cr: f64,
    pub total: f64,
    pub lr: f64,
    pub missing_negatives: bool,
}

/// Position of the batch sampler's random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

pub fn dims_of(ds: &PairDataset) -> DataDims {
    DataDims { vocab_size: ds.vocab.len(), num_identities: ds.num_identities }
}

/// Steps per epoch: the configured value or `ceil(pairs / batch)`.
pub fn steps_per_epoch(ds: &PairDataset, cfg: &TrainConfig) -> usize {
    cfg.steps_per_epoch.unwrap_or_else(|| ds.pairs.len().div_ceil(cfg.batch_size)).max(1)
}

/// Owns the model, optimizer and sampling stream of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    rng: ChaCha8Rng,
    sampler: IdentitySampler,
    epoch: usize,
}

impl Trainer {
    pub fn new(ds: &PairDataset, config: TrainConfig) -> Result<Self> {
        ds.validate()?;
        if ds.image_size() != (config.image_height, config.image_width) {
            return Err(BeatError::Config(format!(
                "dataset images are {:?}, config expects ({}, {})",
                ds.image_size(),
                config.image_height,
                config.image_width
            )));
        }
        if ds.max_len > config.max_len {
            return Err(BeatError::Config(format!("dataset texts reach {} tokens, max_len is {}", ds.max_len, config.max_len)));
        }
        if config.batch_size > ds.pairs.len() {
            return Err(BeatError::Config(format!("batch size {} exceeds {} pairs", config.batch_size, ds.pairs.len())));
        }
        let seed = config.seed;
        let model = Model::new(config, dims_of(ds), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let optimizer = Adam::new(model.config.lr);
        Ok(Self { model, optimizer, rng, sampler: IdentitySampler::new(ds), epoch: 0 })
    }

    /// Resumes from saved parts.
    pub fn resume(ds: &PairDataset, model: Model, optimizer: Adam, rng: RngState, epoch: usize) -> Result<Self> {
        ds.validate()?;
        if model.dims != dims_of(ds) {
            return Err(BeatError::Config(String::from("dataset does not match the model's vocabulary or identities")));
        }
        Ok(Self { model, optimizer, rng: rng.restore(), sampler: IdentitySampler::new(ds), epoch })
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&mut self, ds: &PairDataset) -> Result<StepRecord> {
        let cfg = &self.model.config;
        let batch = self.sampler.sample(cfg.batch_size, &mut self.rng)?;
        let flips: Vec<bool> = (0..batch.len()).map(|_| cfg.flip && self.rng.random_bool(0.5)).collect();
        let mut g = Graph::new();
        let mut binder = self.model.binder();
        let loss = self.model.batch_loss(&mut g, &mut binder, ds, &batch, &flips)?;
        let step = self.optimizer.step_count() + 1;
        let b = loss.breakdown;
        if !b.total.is_finite() {
            return Err(BeatError::Diverged {
                step,
                detail: format!("id={} cr={} total={} max|param|={:e}", b.id, b.cr, b.total, self.max_abs_param()),
            });
        }
        let bound: Vec<(String, Var)> = binder.bound().map(|(n, &v)| (n.clone(), v)).collect();
        drop(binder);
        let grads = g.backward(loss.total);
        let updates: Vec<(&str, &crate::Tensor)> =
            bound.iter().filter_map(|(name, v)| grads.get(*v).map(|t| (name.as_str(), t))).collect();
        if let Some((name, _)) = updates.iter().find(|(_, t)| !t.all_finite()) {
            return Err(BeatError::Diverged { step, detail: format!("non-finite gradient for '{name}', total={}", b.total) });
        }
        self.optimizer.update(&mut self.model.params, updates)?;
        Ok(StepRecord {
            step,
            epoch: self.epoch,
            id: b.id,
            cr: b.cr,
            total: b.total,
            lr: self.optimizer.lr,
            missing_negatives: loss.missing_negatives,
        })
    }

    pub fn run_epoch(&mut self, ds: &PairDataset) -> Result<Vec<StepRecord>> {
        let mut records = Vec::new();
        self.run_epoch_with(ds, |r| records.push(*r))?;
        Ok(records)
    }

    /// Like `run_epoch`, handing each record to `on_step` as soon as it exists.
    pub fn run_epoch_with(&mut self, ds: &PairDataset, mut on_step: impl FnMut(&StepRecord)) -> Result<()> {
        for _ in 0..steps_per_epoch(ds, &self.model.config) {
            on_step(&self.step(ds)?);
        }
        self.epoch += 1;
        Ok(())
    }

    fn max_abs_param(&self) -> f64 {
        self.model.params.iter().flat_map(|(_, t)| t.data().iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Result of a complete run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub history: Vec<StepRecord>,
}

/// Trains for `config.epochs` epochs. `on_step` sees every record as it is produced.
pub fn train_with(
    ds: &PairDataset,
    config: TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    let epochs = config.epochs;
    let mut trainer = Trainer::new(ds, config)?;
    let mut history = Vec::new();
    for _ in 0..epochs {
        trainer.run_epoch_with(ds, |r| {
            on_step(r);
            history.push(*r);
        })?;
    }
    Ok(TrainOutcome { trainer, history })
}

pub fn train(ds: &PairDataset, config: TrainConfig) -> Result<TrainOutcome> {
    train_with(ds, config, |_| {})
}

/// Mean total loss of each epoch.
pub fn epoch_means(history: &[StepRecord]) -> Vec<f64> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for r in history {
        if out.len() <= r.epoch {
            out.resize(r.epoch + 1, (0.0, 0));
        }
        out[r.epoch].0 += r.total;
        out[r.epoch].1 += 1;
    }
    out.into_iter().map(|(s, n)| if n == 0 { 0.0 } else { s / n as f64 }).collect()
}
