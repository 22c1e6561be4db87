//! Text-to-image recall.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{ImageSample, PairDataset, PersonIdentity, TextSample};
use crate::error::{bail, Result};
use crate::model::Model;
use crate::objectives::Reduce;
use crate::tensor::Tensor;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub ks: Vec<usize>,
    /// Percentages aligned with `ks`.
    pub recalls: Vec<f64>,
    pub num_queries: usize,
    pub gallery_size: usize,
    /// 1-based rank of the first correct image per query; `None` when the
    /// gallery holds no image of the query's identity.
    pub ranks: Vec<Option<usize>>,
}

impl RecallReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recalls[i])
    }

    pub fn r1(&self) -> f64 {
        self.at(1).unwrap_or(0.0)
    }
}

/// Gallery order for one query: score descending, index ascending on ties.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

pub fn recall_from_scores(
    scores: &Tensor,
    queries: &[PersonIdentity],
    gallery: &[PersonIdentity],
    ks: &[usize],
) -> Result<RecallReport> {
    if queries.is_empty() {
        bail!(Argument, "no queries");
    }
    if gallery.is_empty() {
        bail!(Argument, "empty gallery");
    }
    if scores.shape() != [queries.len(), gallery.len()] {
        bail!(Shape, "scores {:?} do not match {} queries x {} gallery", scores.shape(), queries.len(), gallery.len());
    }
    if ks.is_empty() || ks.contains(&0) {
        bail!(Argument, "k values must be positive");
    }
    let ranks: Vec<Option<usize>> = queries
        .iter()
        .enumerate()
        .map(|(q, id)| ranking(scores.row(q)).iter().position(|&j| gallery[j] == *id).map(|p| p + 1))
        .collect();
    let recalls = ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count();
            100.0 * hits as f64 / queries.len() as f64
        })
        .collect();
    Ok(RecallReport { ks: ks.to_vec(), recalls, num_queries: queries.len(), gallery_size: gallery.len(), ranks })
}

/// Inference scores `[texts, images]`.
pub fn score_matrix(model: &Model, texts: &[&TextSample], images: &[&ImageSample]) -> Result<Tensor> {
    let t = model.embed_texts(texts)?;
    let v = model.embed_images(images)?;
    model.similarity(&t, &v, Reduce::Max)
}

pub fn evaluate_recall(model: &Model, texts: &[&TextSample], images: &[&ImageSample], ks: &[usize]) -> Result<RecallReport> {
    if texts.is_empty() {
        bail!(Argument, "no queries");
    }
    if images.is_empty() {
        bail!(Argument, "empty gallery");
    }
    let scores = score_matrix(model, texts, images)?;
    let q: Vec<PersonIdentity> = texts.iter().map(|t| t.identity).collect();
    let g: Vec<PersonIdentity> = images.iter().map(|i| i.identity).collect();
    recall_from_scores(&scores, &q, &g, ks)
}

/// Every text of `ds` queries every image of `ds`.
pub fn evaluate_dataset(model: &Model, ds: &PairDataset) -> Result<RecallReport> {
    let texts: Vec<&TextSample> = ds.texts.iter().collect();
    let images: Vec<&ImageSample> = ds.images.iter().collect();
    evaluate_recall(model, &texts, &images, &DEFAULT_KS)
}
