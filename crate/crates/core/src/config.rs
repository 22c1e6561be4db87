//! Hyperparameters and run configuration.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::conv_out;
use crate::error::{bail, Result};

/// Feature granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Global,
    Local,
    Nonlocal,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Global, Granularity::Local, Granularity::Nonlocal];

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Global => "global",
            Granularity::Local => "local",
            Granularity::Nonlocal => "nonlocal",
        }
    }
}

/// Loss weights per granularity plus the ranking margins.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub global: f64,
    pub local: f64,
    pub nonlocal: f64,
    pub alpha1: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { global: 2.0, local: 1.0, nonlocal: 1.0, alpha1: 0.2, beta: 0.1 }
    }
}

impl LossWeights {
    pub fn weight(&self, g: Granularity) -> f64 {
        match g {
            Granularity::Global => self.global,
            Granularity::Local => self.local,
            Granularity::Nonlocal => self.nonlocal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("global", self.global), ("local", self.local), ("nonlocal", self.nonlocal)] {
            if !(w >= 0.0) {
                bail!(Config, "loss weight {name} must be non-negative, got {w}");
            }
        }
        if !(self.alpha1 > 0.0) {
            bail!(Config, "alpha1 must be positive, got {}", self.alpha1);
        }
        if !(self.beta >= 0.0) {
            bail!(Config, "beta must be non-negative, got {}", self.beta);
        }
        Ok(())
    }
}

/// Which alignment spaces the model scores pairs in.
///
/// `shared` counts modal-shared spaces, each with its own plain linear
/// projection per modality. `image` aligns REM-G projected text against fixed
/// visual features, `text` the reverse.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceConfig {
    pub shared: usize,
    pub image: bool,
    pub text: bool,
}

impl SpaceConfig {
    pub const BIDIRECTIONAL: SpaceConfig = SpaceConfig { shared: 0, image: true, text: true };
    pub const MODAL_SHARED: SpaceConfig = SpaceConfig { shared: 1, image: false, text: false };
    pub const IMAGE_ONLY: SpaceConfig = SpaceConfig { shared: 0, image: true, text: false };
    pub const TEXT_ONLY: SpaceConfig = SpaceConfig { shared: 0, image: false, text: true };

    pub fn count(&self) -> usize {
        self.shared + usize::from(self.image) + usize::from(self.text)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeMining {
    /// Hardest in-batch negative per anchor.
    Hardest,
    /// Every in-batch negative contributes its own hinge.
    SumOverAll,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GranularityToggles {
    pub global: bool,
    pub local: bool,
    pub nonlocal: bool,
}

impl GranularityToggles {
    pub const ALL: GranularityToggles = GranularityToggles { global: true, local: true, nonlocal: true };

    pub fn enabled(&self, g: Granularity) -> bool {
        match g {
            Granularity::Global => self.global,
            Granularity::Local => self.local,
            Granularity::Nonlocal => self.nonlocal,
        }
    }

    pub fn active(&self) -> Vec<Granularity> {
        Granularity::ALL.into_iter().filter(|g| self.enabled(*g)).collect()
    }
}

/// Desk-scale convolutional backbone: one 3x3 conv + ReLU per stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub m: usize,
    pub k: usize,
    pub r: usize,
    pub c: usize,
    pub c_g: usize,
    pub c_l: usize,
    pub c_n: usize,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub spaces: SpaceConfig,
    pub id_loss: bool,
    pub cr_loss: bool,
    pub granularities: GranularityToggles,
    pub negatives: NegativeMining,
    pub image_height: usize,
    pub image_width: usize,
    pub max_len: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub backbone: BackboneConfig,
    pub flip: bool,
    pub frozen_text: bool,
    /// Optimizer steps per epoch; `None` means `ceil(P / batch_size)`.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small profile that trains on one CPU in seconds.
    pub fn desk() -> Self {
        Self {
            m: 4,
            k: 6,
            r: 8,
            c: 32,
            c_g: 64,
            c_l: 64,
            c_n: 32,
            weights: LossWeights::default(),
            batch_size: 16,
            lr: 1e-3,
            epochs: 30,
            seed: 0,
            spaces: SpaceConfig::BIDIRECTIONAL,
            id_loss: true,
            cr_loss: true,
            granularities: GranularityToggles::ALL,
            negatives: NegativeMining::Hardest,
            image_height: 48,
            image_width: 16,
            max_len: 24,
            embed_dim: 16,
            hidden_dim: 16,
            backbone: BackboneConfig { channels: vec![8, 16, 32], strides: vec![2, 2, 1], kernel: 3 },
            flip: true,
            frozen_text: false,
            steps_per_epoch: None,
        }
    }

    /// Full-size hyperparameters; only practical with a real backbone.
    pub fn paper() -> Self {
        Self {
            c: 2048,
            c_g: 1024,
            c_l: 1024,
            c_n: 512,
            batch_size: 64,
            epochs: 80,
            image_height: 384,
            image_width: 112,
            max_len: 100,
            embed_dim: 768,
            hidden_dim: 512,
            backbone: BackboneConfig {
                channels: vec![256, 512, 1024, 2048],
                strides: vec![2, 2, 2, 2],
                kernel: 3,
            },
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => bail!(Config, "unknown profile '{other}' (expected desk or paper)"),
        }
    }

    /// Spatial size `(H, W)` of the backbone output.
    pub fn feature_map_size(&self) -> (usize, usize) {
        let mut h = self.image_height;
        let mut w = self.image_width;
        for &s in &self.backbone.strides {
            h = conv_out(h, self.backbone.kernel, s);
            w = conv_out(w, self.backbone.kernel, s);
        }
        (h, w)
    }

    pub fn dim(&self, g: Granularity) -> usize {
        match g {
            Granularity::Global => self.c_g,
            Granularity::Local => self.c_l,
            Granularity::Nonlocal => self.c_n,
        }
    }

    /// REM-G members reproduce the plain linear parameter count only when `M = r / 2`.
    pub fn has_parameter_parity(&self) -> bool {
        2 * self.m == self.r
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.m == 0 {
            bail!(Config, "M must be at least 1");
        }
        if self.k == 0 {
            bail!(Config, "K must be at least 1");
        }
        if self.granularities.nonlocal && self.k < 2 {
            bail!(Config, "non-local features need K >= 2, got {}", self.k);
        }
        if self.r == 0 {
            bail!(Config, "r must be positive");
        }
        for g in Granularity::ALL {
            let d = self.dim(g);
            if d == 0 || d % self.r != 0 {
                bail!(Config, "r = {} must divide the {} dimension {}", self.r, g.name(), d);
            }
        }
        if self.c == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            bail!(Config, "feature dimensions must be positive");
        }
        if self.backbone.channels.is_empty()
            || self.backbone.channels.len() != self.backbone.strides.len()
            || self.backbone.strides.contains(&0)
            || self.backbone.kernel == 0
        {
            bail!(Config, "backbone needs matching non-empty channel and stride lists");
        }
        if *self.backbone.channels.last().unwrap() != self.c {
            bail!(Config, "last backbone stage must output C = {} channels", self.c);
        }
        let (h, _) = self.feature_map_size();
        if h % self.k != 0 {
            bail!(Config, "feature map height {h} is not divisible by K = {}", self.k);
        }
        if self.batch_size < 2 {
            bail!(Config, "batch size must be at least 2, got {}", self.batch_size);
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            bail!(Config, "learning rate must be finite and non-negative");
        }
        if self.max_len == 0 {
            bail!(Config, "max_len must be positive");
        }
        if self.spaces.count() == 0 {
            bail!(Config, "at least one alignment space is required");
        }
        if !self.id_loss && !self.cr_loss {
            bail!(Config, "both losses disabled: nothing to optimize");
        }
        if self.granularities.active().is_empty() {
            bail!(Config, "at least one granularity must be enabled");
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: core::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| {
                crate::error::BeatError::Config(alloc::format!("bad value '{v}' for {key}"))
            })
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',').map(|s| num(key, s)).collect()
        }
        match key {
            "m" | "M" => self.m = num(key, value)?,
            "k" | "K" => self.k = num(key, value)?,
            "r" => self.r = num(key, value)?,
            "c" | "C" => self.c = num(key, value)?,
            "c_g" => self.c_g = num(key, value)?,
            "c_l" => self.c_l = num(key, value)?,
            "c_n" => self.c_n = num(key, value)?,
            "alpha1" => self.weights.alpha1 = num(key, value)?,
            "beta" => self.weights.beta = num(key, value)?,
            "weight.global" => self.weights.global = num(key, value)?,
            "weight.local" => self.weights.local = num(key, value)?,
            "weight.nonlocal" => self.weights.nonlocal = num(key, value)?,
            "batch_size" | "B" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "spaces" => self.spaces = parse_spaces(value)?,
            "spaces.shared" => self.spaces.shared = num(key, value)?,
            "spaces.image" => self.spaces.image = num(key, value)?,
            "spaces.text" => self.spaces.text = num(key, value)?,
            "id_loss" => self.id_loss = num(key, value)?,
            "cr_loss" => self.cr_loss = num(key, value)?,
            "global" => self.granularities.global = num(key, value)?,
            "local" => self.granularities.local = num(key, value)?,
            "nonlocal" => self.granularities.nonlocal = num(key, value)?,
            "negatives" => {
                self.negatives = match value.trim() {
                    "hardest" => NegativeMining::Hardest,
                    "sum-over-all" | "sum" => NegativeMining::SumOverAll,
                    other => bail!(Config, "unknown negative mining '{other}'"),
                }
            }
            "image_height" => self.image_height = num(key, value)?,
            "image_width" => self.image_width = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "backbone.channels" => self.backbone.channels = list(key, value)?,
            "backbone.strides" => self.backbone.strides = list(key, value)?,
            "backbone.kernel" => self.backbone.kernel = num(key, value)?,
            "flip" => self.flip = num(key, value)?,
            "frozen_text" => self.frozen_text = num(key, value)?,
            "steps_per_epoch" => {
                self.steps_per_epoch = match value.trim() {
                    "auto" | "" => None,
                    v => Some(num(key, v)?),
                }
            }
            other => bail!(Config, "unknown config key '{other}'"),
        }
        Ok(())
    }
}

/// Parses `bidirectional`, `image-only`, `text-only`, `modal-shared`, or a
/// `+`-joined combination such as `mss+is+ts` / `mss*2`.
pub fn parse_spaces(value: &str) -> Result<SpaceConfig> {
    let v = value.trim().to_ascii_lowercase();
    match v.as_str() {
        "bidirectional" | "bi-directional" => return Ok(SpaceConfig::BIDIRECTIONAL),
        "image-only" => return Ok(SpaceConfig::IMAGE_ONLY),
        "text-only" => return Ok(SpaceConfig::TEXT_ONLY),
        "modal-shared" => return Ok(SpaceConfig::MODAL_SHARED),
        _ => {}
    }
    let mut s = SpaceConfig { shared: 0, image: false, text: false };
    for part in v.split('+') {
        let (name, count) = match part.split_once('*') {
            Some((n, c)) => (n, c.parse::<usize>().ok()),
            None => (part, Some(1)),
        };
        let Some(count) = count else { bail!(Config, "bad space multiplier in '{part}'") };
        match name {
            "mss" => s.shared += count,
            "is" => s.image = true,
            "ts" => s.text = true,
            other => bail!(Config, "unknown space '{other}'"),
        }
    }
    Ok(s)
}

/// Dimensions fixed by the data rather than by hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub vocab_size: usize,
    pub num_identities: usize,
}

pub fn spaces_label(s: &SpaceConfig) -> String {
    let mut parts: Vec<String> = Vec::new();
    if s.shared > 0 {
        parts.push(alloc::format!("MSSx{}", s.shared));
    }
    if s.image {
        parts.push("IS".into());
    }
    if s.text {
        parts.push("TS".into());
    }
    parts.join("+")
}
