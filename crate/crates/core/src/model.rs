//! Full model: encoders, alignment spaces, identity classifiers.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::{DataDims, Granularity, TrainConfig};
use crate::data::{Batch, ImageSample, PairDataset, TextSample};
use crate::encoders::{self, FeatureVars, Modality};
use crate::error::{bail, Result};
use crate::objectives::{self, granularity_similarity, LossBreakdown, RankingBatch, Reduce, Space};
use crate::params::{linear_init, Binder, Params};
use crate::remg::{self, Direction};
use crate::tensor::Tensor;

pub fn shared_name(space: usize, g: Granularity, which: &str) -> String {
    format!("shared.s{space}.{}.{which}", g.name())
}

pub fn id_name(g: Granularity, m: Modality) -> String {
    format!("id.{}.{}.W", g.name(), m.tag())
}

/// One side's features at one granularity: the raw `[n, P, d]` features and,
/// for every alignment space, this side's candidates in that space.
#[derive(Clone, Debug, PartialEq)]
pub struct SideFeatures<T> {
    pub granularity: Granularity,
    pub raw: T,
    pub spaces: Vec<Vec<T>>,
}

/// Value-level embeddings of a set of samples, one entry per active granularity.
pub type Embeddings = Vec<SideFeatures<Tensor>>;

/// Graph nodes of one training step.
#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub missing_negatives: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub dims: DataDims,
    pub params: Params,
}

const EMBED_CHUNK: usize = 64;

impl Model {
    pub fn new(config: TrainConfig, dims: DataDims, seed: u64) -> Result<Self> {
        config.validate()?;
        if dims.vocab_size == 0 || dims.num_identities == 0 {
            bail!(Config, "vocabulary and identity counts must be positive");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        encoders::init_encoder_params(&mut params, &config, &dims, &mut rng);
        for g in Granularity::ALL {
            let d = config.dim(g);
            if config.spaces.text {
                remg::init_group_params(&mut params, Direction::ImageToText, g, d, config.m, config.r, &mut rng)?;
            }
            if config.spaces.image {
                remg::init_group_params(&mut params, Direction::TextToImage, g, d, config.m, config.r, &mut rng)?;
            }
            for s in 0..config.spaces.shared {
                params.insert(shared_name(s, g, "W_v"), linear_init(d, d, &mut rng));
                params.insert(shared_name(s, g, "W_t"), linear_init(d, d, &mut rng));
            }
            if config.id_loss {
                for m in [Modality::Visual, Modality::Textual] {
                    params.insert(id_name(g, m), linear_init(d, dims.num_identities, &mut rng));
                }
            }
        }
        Ok(Self { config, dims, params })
    }

    /// Adopts `params` after checking they match the layout `config` implies.
    pub fn from_params(config: TrainConfig, dims: DataDims, params: Params) -> Result<Self> {
        let template = Self::new(config, dims, 0)?;
        if template.params.len() != params.len() {
            bail!(Validation, "expected {} parameter arrays, found {}", template.params.len(), params.len());
        }
        for (name, t) in template.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => bail!(Validation, "parameter '{name}' has shape {:?}, expected {:?}", p.shape(), t.shape()),
                None => bail!(Validation, "missing parameter '{name}'"),
            }
        }
        Ok(Self { params, ..template })
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.config.frozen_text && name.starts_with("enc.txt.")
    }

    pub fn trainable_count(&self) -> usize {
        self.params.count_where(|n| !self.is_frozen(n))
    }

    pub fn binder(&self) -> Binder<'_> {
        let b = Binder::trainable(&self.params);
        if self.config.frozen_text {
            b.freeze_prefix("enc.txt.")
        } else {
            b
        }
    }

    /// Granularities that are switched on and carry a positive weight.
    pub fn active_granularities(&self) -> Vec<Granularity> {
        let c = &self.config;
        Granularity::ALL.into_iter().filter(|&g| c.granularities.enabled(g) && c.weights.weight(g) > 0.0).collect()
    }

    fn raw_var(g: &mut Graph, f: &FeatureVars, gran: Granularity) -> Var {
        match gran {
            Granularity::Global => {
                let s = g.value(f.global).shape().to_vec();
                g.reshape(f.global, &[s[0], 1, s[1]])
            }
            Granularity::Local => f.local,
            Granularity::Nonlocal => f.nonlocal,
        }
    }

    /// Places one side's features into every configured space: shared
    /// spaces first, then the image space, then the text space.
    pub fn project_graph(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        feats: &FeatureVars,
        side: Modality,
    ) -> Vec<SideFeatures<Var>> {
        let c = &self.config;
        self.active_granularities()
            .into_iter()
            .map(|gran| {
                let raw = Self::raw_var(g, feats, gran);
                let mut spaces = Vec::with_capacity(c.spaces.count());
                for s in 0..c.spaces.shared {
                    let which = if side == Modality::Visual { "W_v" } else { "W_t" };
                    let w = b.get(g, &shared_name(s, gran, which));
                    spaces.push(vec![g.matmul(raw, w)]);
                }
                if c.spaces.image {
                    spaces.push(match side {
                        Modality::Visual => vec![raw],
                        Modality::Textual => remg::remg_graph(g, b, raw, Direction::TextToImage, gran, c.m),
                    });
                }
                if c.spaces.text {
                    spaces.push(match side {
                        Modality::Visual => remg::remg_graph(g, b, raw, Direction::ImageToText, gran, c.m),
                        Modality::Textual => vec![raw],
                    });
                }
                SideFeatures { granularity: gran, raw, spaces }
            })
            .collect()
    }

    /// Training similarity `[n_text, n_image]` per granularity (unweighted).
    pub fn similarity_graph(
        g: &mut Graph,
        texts: &[SideFeatures<Var>],
        images: &[SideFeatures<Var>],
    ) -> Vec<(Granularity, Var)> {
        texts
            .iter()
            .zip(images)
            .map(|(t, v)| {
                let spaces: Vec<Space<Var>> = t
                    .spaces
                    .iter()
                    .zip(&v.spaces)
                    .map(|(a, b)| Space { text: a.clone(), image: b.clone() })
                    .collect();
                (t.granularity, objectives::granularity_similarity_graph(g, &spaces))
            })
            .collect()
    }

    /// Builds the loss of one batch. `flips[i]` mirrors image `i` horizontally.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        ds: &PairDataset,
        batch: &Batch,
        flips: &[bool],
    ) -> Result<StepLoss> {
        batch.validate(ds)?;
        let n = batch.len();
        if flips.len() != n {
            bail!(Argument, "{} flip flags for a batch of {n}", flips.len());
        }
        let owned: Vec<ImageSample> = batch
            .images
            .iter()
            .zip(flips)
            .map(|(&i, &f)| if f { ds.images[i].flipped() } else { ds.images[i].clone() })
            .collect();
        let images: Vec<&ImageSample> = owned.iter().collect();
        let mut texts: Vec<&TextSample> = batch.texts.iter().map(|&i| &ds.texts[i]).collect();
        let mut alt_rows = Vec::with_capacity(n);
        for alt in &batch.alt_texts {
            alt_rows.push(alt.map(|t| {
                texts.push(&ds.texts[t]);
                texts.len() - 1
            }));
        }
        let labels: Vec<usize> = batch.identities.iter().map(|p| p.0).collect();

        let vf = encoders::image_features(g, b, &images, &self.config)?;
        let tf = encoders::text_features(g, b, &texts, &self.config)?;
        let vs = self.project_graph(g, b, &vf, Modality::Visual);
        let ts = self.project_graph(g, b, &tf, Modality::Textual);
        let weights = &self.config.weights;

        let mut id_terms = Vec::new();
        if self.config.id_loss {
            let matched: Vec<usize> = (0..n).collect();
            for (v, t) in vs.iter().zip(&ts) {
                let gran = v.granularity;
                let wv = b.get(g, &id_name(gran, Modality::Visual));
                let wt = b.get(g, &id_name(gran, Modality::Textual));
                let lv = objectives::id_loss_graph(g, v.raw, wv, &labels);
                let s = g.value(t.raw).shape().to_vec();
                let flat = g.reshape(t.raw, &[s[0], s[1] * s[2]]);
                let rows = g.gather(flat, &matched);
                let rows = g.reshape(rows, &[n, s[1], s[2]]);
                let lt = objectives::id_loss_graph(g, rows, wt, &labels);
                let both = g.add(lv, lt);
                id_terms.push(g.scale(both, weights.weight(gran)));
            }
        }
        let mut cr_terms = Vec::new();
        let mut missing = false;
        if self.config.cr_loss {
            let rb = RankingBatch { identities: &batch.identities, alt_rows: &alt_rows };
            for (gran, sim) in Self::similarity_graph(g, &ts, &vs) {
                let (l, m) = objectives::cr_loss_graph(g, sim, &rb, weights, self.config.negatives)?;
                missing |= m;
                cr_terms.push(g.scale(l, weights.weight(gran)));
            }
        }
        let sum = |g: &mut Graph, terms: &[Var]| {
            if terms.is_empty() {
                g.constant(Tensor::scalar(0.0))
            } else {
                g.add_all(terms)
            }
        };
        let id = sum(g, &id_terms);
        let cr = sum(g, &cr_terms);
        let total = g.add(id, cr);
        let breakdown = LossBreakdown { id: g.scalar(id), cr: g.scalar(cr), total: g.scalar(total) };
        Ok(StepLoss { total, breakdown, missing_negatives: missing })
    }

    fn collect(g: &Graph, sides: Vec<SideFeatures<Var>>) -> Embeddings {
        sides
            .into_iter()
            .map(|s| SideFeatures {
                granularity: s.granularity,
                raw: g.value(s.raw).clone(),
                spaces: s.spaces.iter().map(|c| c.iter().map(|&v| g.value(v).clone()).collect()).collect(),
            })
            .collect()
    }

    fn append(acc: &mut Option<Embeddings>, next: Embeddings) -> Result<()> {
        let Some(prev) = acc else {
            *acc = Some(next);
            return Ok(());
        };
        let cat = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
            let mut shape = a.shape().to_vec();
            shape[0] += b.dim(0);
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            Tensor::new(&shape, data)
        };
        for (p, q) in prev.iter_mut().zip(next) {
            p.raw = cat(&p.raw, &q.raw)?;
            for (ps, qs) in p.spaces.iter_mut().zip(&q.spaces) {
                for (a, b) in ps.iter_mut().zip(qs) {
                    *a = cat(a, b)?;
                }
            }
        }
        Ok(())
    }

    pub fn embed_images(&self, images: &[&ImageSample]) -> Result<Embeddings> {
        if images.is_empty() {
            bail!(Argument, "no images to embed");
        }
        let mut acc = None;
        for chunk in images.chunks(EMBED_CHUNK) {
            let mut g = Graph::new();
            let mut b = Binder::frozen(&self.params);
            let f = encoders::image_features(&mut g, &mut b, chunk, &self.config)?;
            let sides = self.project_graph(&mut g, &mut b, &f, Modality::Visual);
            Self::append(&mut acc, Self::collect(&g, sides))?;
        }
        Ok(acc.unwrap())
    }

    pub fn embed_texts(&self, texts: &[&TextSample]) -> Result<Embeddings> {
        if texts.is_empty() {
            bail!(Argument, "no texts to embed");
        }
        let mut acc = None;
        for chunk in texts.chunks(EMBED_CHUNK) {
            let mut g = Graph::new();
            let mut b = Binder::frozen(&self.params);
            let f = encoders::text_features(&mut g, &mut b, chunk, &self.config)?;
            let sides = self.project_graph(&mut g, &mut b, &f, Modality::Textual);
            Self::append(&mut acc, Self::collect(&g, sides))?;
        }
        Ok(acc.unwrap())
    }

    /// Weighted text-by-image similarity over active granularities.
    pub fn similarity(&self, texts: &Embeddings, images: &Embeddings, reduce: Reduce) -> Result<Tensor> {
        if texts.len() != images.len() {
            bail!(Argument, "embeddings cover different granularities");
        }
        let mut parts = Vec::with_capacity(texts.len());
        for (t, v) in texts.iter().zip(images) {
            let spaces: Vec<Space<Tensor>> = t
                .spaces
                .iter()
                .zip(&v.spaces)
                .map(|(a, b)| Space { text: a.clone(), image: b.clone() })
                .collect();
            parts.push((t.granularity, granularity_similarity(&spaces, reduce)?));
        }
        objectives::combine_granularities(&parts, &self.config.weights)
    }
}
