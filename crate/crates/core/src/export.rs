//! Heatmap grids and raw global features for external plotting.

use alloc::vec::Vec;

use crate::autodiff::Graph;
use crate::config::Granularity;
use crate::data::{ImageSample, PairDataset, TextSample};
use crate::encoders::{self, global_name, Modality};
use crate::error::{bail, Result};
use crate::model::{shared_name, Model};
use crate::params::Binder;
use crate::remg::{remg_graph, Direction};
use crate::tensor::{cosine, Tensor};

/// Cosine between the text's global feature and every cell of the image's
/// feature map, `[H, W]`.
///
/// Cells are projected by the visual global head. In the image space the
/// text feature goes through the text-to-image global group and the
/// candidate closest to the image's own global feature is used; without an
/// image space the first shared space is used instead.
pub fn heatmap(model: &Model, image: &ImageSample, text: &TextSample) -> Result<Tensor> {
    let cfg = &model.config;
    if !cfg.spaces.image && cfg.spaces.shared == 0 {
        bail!(Config, "heatmaps need the image space or a shared space");
    }
    let mut g = Graph::new();
    let mut b = Binder::frozen(&model.params);
    let vmap = encoders::visual_backbone(&mut g, &mut b, &[image], cfg)?;
    let s = g.value(vmap).shape().to_vec();
    let (h, w, c) = (s[1], s[2], s[3]);
    let cells = g.reshape(vmap, &[h * w, c]);
    let wg = b.get(&mut g, &global_name(Modality::Visual));
    let mut cells = g.matmul(cells, wg);
    let vf = encoders::image_features(&mut g, &mut b, &[image], cfg)?;
    let tf = encoders::text_features(&mut g, &mut b, &[text], cfg)?;
    let (mut v_global, candidates) = if cfg.spaces.image {
        (vf.global, remg_graph(&mut g, &mut b, tf.global, Direction::TextToImage, Granularity::Global, cfg.m))
    } else {
        let wv = b.get(&mut g, &shared_name(0, Granularity::Global, "W_v"));
        let wt = b.get(&mut g, &shared_name(0, Granularity::Global, "W_t"));
        cells = g.matmul(cells, wv);
        (g.matmul(vf.global, wv), alloc::vec![g.matmul(tf.global, wt)])
    };
    v_global = g.reshape(v_global, &[g.value(v_global).len()]);
    let vg = g.value(v_global).data().to_vec();
    let best = candidates
        .iter()
        .map(|&t| g.value(t).data().to_vec())
        .map(|t| (cosine(&t, &vg), t))
        .fold(None::<(f64, Vec<f64>)>, |acc, x| match acc {
            Some(a) if a.0 >= x.0 => Some(a),
            _ => Some(x),
        })
        .map(|(_, t)| t)
        .expect("at least one candidate");
    let grid = g.value(cells);
    let values = (0..h * w).map(|i| cosine(&best, grid.row(i))).collect();
    Tensor::new(&[h, w], values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleKind {
    Image,
    Text,
}

impl SampleKind {
    pub fn tag(self) -> &'static str {
        match self {
            SampleKind::Image => "image",
            SampleKind::Text => "text",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub sample_id: usize,
    pub kind: SampleKind,
    pub identity: usize,
    pub values: Vec<f64>,
}

/// Pre-embedding global features of every image, then every text.
pub fn global_embeddings(model: &Model, ds: &PairDataset) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::with_capacity(ds.images.len() + ds.texts.len());
    let images: Vec<&ImageSample> = ds.images.iter().collect();
    let texts: Vec<&TextSample> = ds.texts.iter().collect();
    for chunk in images.chunks(64) {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&model.params);
        let f = encoders::image_features(&mut g, &mut b, chunk, &model.config)?;
        for (i, s) in chunk.iter().enumerate() {
            let values = g.value(f.global).row(i).to_vec();
            rows.push(EmbeddingRow { sample_id: s.sample_id, kind: SampleKind::Image, identity: s.identity.0, values });
        }
    }
    for chunk in texts.chunks(64) {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&model.params);
        let f = encoders::text_features(&mut g, &mut b, chunk, &model.config)?;
        for (i, s) in chunk.iter().enumerate() {
            let values = g.value(f.global).row(i).to_vec();
            rows.push(EmbeddingRow { sample_id: s.sample_id, kind: SampleKind::Text, identity: s.identity.0, values });
        }
    }
    Ok(rows)
}
