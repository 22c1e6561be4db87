//! Similarity aggregation, identity loss and the compound ranking loss.
//!
//! Features of one granularity are held as `[n, P, d]` tensors where `P` is
//! 1 for global features and K for part features. An alignment space pairs
//! a list of text-side candidates with a list of image-side candidates; in
//! the image space the text side holds the M REM-G outputs and the image
//! side the raw visual feature, and the text space mirrors that. Training
//! sums cosines over all candidate pairs, inference keeps the best one.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::config::{Granularity, LossWeights, NegativeMining};
use crate::data::PersonIdentity;
use crate::encoders::MultiGrainedFeatures;
use crate::error::{bail, Result};
use crate::remg::EmbeddedPair;
use crate::tensor::{matmul_acc, matmul_nt_acc, norm, Tensor};

/// How candidate cosines within one space are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    /// Sum over all candidate pairs (training).
    Sum,
    /// Best candidate pair per part (inference).
    Max,
}

/// Candidates of both sides in one alignment space.
#[derive(Clone, Debug, PartialEq)]
pub struct Space<T> {
    pub text: Vec<T>,
    pub image: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityKind {
    TrainingSum,
    InferenceMaxSum,
}

/// Text-by-image scores.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Tensor,
    pub kind: SimilarityKind,
}

impl SimilarityMatrix {
    pub fn num_texts(&self) -> usize {
        self.values.dim(0)
    }

    pub fn num_images(&self) -> usize {
        self.values.dim(1)
    }

    pub fn get(&self, text: usize, image: usize) -> f64 {
        self.values.at2(text, image)
    }
}

fn normalized(t: &Tensor) -> Tensor {
    let d = *t.shape().last().unwrap();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d) {
        let n = norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

fn check_side(ts: &[Tensor], what: &str) -> Result<(usize, usize, usize)> {
    let Some(first) = ts.first() else {
        bail!(Argument, "{what} side of a space has no candidates");
    };
    if first.ndim() != 3 {
        bail!(Shape, "candidates must be [n, P, d], got {:?}", first.shape());
    }
    if ts.iter().any(|t| t.shape() != first.shape()) {
        bail!(Shape, "{what} candidates differ in shape");
    }
    if ts.iter().any(|t| !t.all_finite()) {
        bail!(Argument, "non-finite {what} features");
    }
    Ok((first.dim(0), first.dim(1), first.dim(2)))
}

/// Scores of one space, `[n_text, n_image]`, with parts averaged.
pub fn space_similarity(space: &Space<Tensor>, reduce: Reduce) -> Result<Tensor> {
    let (nt, p, d) = check_side(&space.text, "text")?;
    let (ni, p2, d2) = check_side(&space.image, "image")?;
    if (p, d) != (p2, d2) {
        bail!(Shape, "text parts [{p}, {d}] do not match image parts [{p2}, {d2}]");
    }
    let slice = |t: &Tensor, k: usize| -> Vec<f64> {
        let n = t.dim(0);
        (0..n).flat_map(|i| t.data()[(i * p + k) * d..][..d].iter().copied()).collect()
    };
    let texts: Vec<Tensor> = space.text.iter().map(normalized).collect();
    let images: Vec<Tensor> = space.image.iter().map(normalized).collect();
    let mut total = vec![0.0; nt * ni];
    for k in 0..p {
        let tk: Vec<Vec<f64>> = texts.iter().map(|t| slice(t, k)).collect();
        let ik: Vec<Vec<f64>> = images.iter().map(|t| slice(t, k)).collect();
        let mut part = match reduce {
            Reduce::Sum => vec![0.0; nt * ni],
            Reduce::Max => vec![f64::NEG_INFINITY; nt * ni],
        };
        let mut buf = vec![0.0; nt * ni];
        for a in &tk {
            for b in &ik {
                buf.iter_mut().for_each(|v| *v = 0.0);
                matmul_nt_acc(a, b, &mut buf, nt, d, ni);
                for (acc, v) in part.iter_mut().zip(&buf) {
                    match reduce {
                        Reduce::Sum => *acc += v,
                        Reduce::Max => *acc = acc.max(*v),
                    }
                }
            }
        }
        total.iter_mut().zip(&part).for_each(|(t, v)| *t += v);
    }
    total.iter_mut().for_each(|v| *v /= p as f64);
    Tensor::new(&[nt, ni], total)
}

/// Sum of space scores at one granularity.
pub fn granularity_similarity(spaces: &[Space<Tensor>], reduce: Reduce) -> Result<Tensor> {
    let Some((first, rest)) = spaces.split_first() else {
        bail!(Argument, "no alignment spaces");
    };
    let mut acc = space_similarity(first, reduce)?;
    for s in rest {
        let next = space_similarity(s, reduce)?;
        if next.shape() != acc.shape() {
            bail!(Shape, "spaces disagree on sample counts");
        }
        acc.data_mut().iter_mut().zip(next.data()).for_each(|(a, b)| *a += b);
    }
    Ok(acc)
}

/// Weighted sum of per-granularity matrices.
pub fn combine_granularities(parts: &[(Granularity, Tensor)], weights: &LossWeights) -> Result<Tensor> {
    let Some((_, first)) = parts.first() else {
        bail!(Argument, "no granularities to combine");
    };
    let mut acc = Tensor::zeros(first.shape());
    for (g, s) in parts {
        if s.shape() != acc.shape() {
            bail!(Shape, "granularity matrices differ in shape");
        }
        let w = weights.weight(*g);
        acc.data_mut().iter_mut().zip(s.data()).for_each(|(a, b)| *a += w * b);
    }
    Ok(acc)
}

fn as_rows(g: Granularity, f: &MultiGrainedFeatures) -> Result<Tensor> {
    let rows: &[Vec<f64>] = match g {
        Granularity::Global => core::slice::from_ref(&f.global),
        Granularity::Local => &f.local,
        Granularity::Nonlocal => &f.nonlocal,
    };
    let Some(d) = rows.first().map(Vec::len) else {
        bail!(Shape, "{} features are empty", g.name());
    };
    if rows.iter().any(|r| r.len() != d) {
        bail!(Shape, "{} parts differ in length", g.name());
    }
    Tensor::new(&[1, rows.len(), d], rows.concat())
}

fn pair_similarity(
    v: &MultiGrainedFeatures,
    t: &MultiGrainedFeatures,
    embedded: &EmbeddedPair,
    weights: &LossWeights,
    reduce: Reduce,
) -> Result<f64> {
    if embedded.v_in_text.is_empty() || embedded.t_in_image.is_empty() {
        bail!(Argument, "embedded pair has no candidates");
    }
    let mut parts = Vec::with_capacity(3);
    for g in Granularity::ALL {
        let image_space = Space {
            text: embedded.t_in_image.iter().map(|f| as_rows(g, f)).collect::<Result<_>>()?,
            image: vec![as_rows(g, v)?],
        };
        let text_space = Space {
            text: vec![as_rows(g, t)?],
            image: embedded.v_in_text.iter().map(|f| as_rows(g, f)).collect::<Result<_>>()?,
        };
        parts.push((g, granularity_similarity(&[image_space, text_space], reduce)?));
    }
    Ok(combine_granularities(&parts, weights)?.data()[0])
}

/// Summed cosines over every candidate in both spaces, weighted across
/// granularities with part scores averaged.
pub fn training_similarity(
    v: &MultiGrainedFeatures,
    t: &MultiGrainedFeatures,
    embedded: &EmbeddedPair,
    weights: &LossWeights,
) -> Result<f64> {
    pair_similarity(v, t, embedded, weights, Reduce::Sum)
}

/// Best candidate per space, then summed over the two spaces.
pub fn inference_similarity(
    v: &MultiGrainedFeatures,
    t: &MultiGrainedFeatures,
    embedded: &EmbeddedPair,
    weights: &LossWeights,
) -> Result<f64> {
    pair_similarity(v, t, embedded, weights, Reduce::Max)
}

/// Graph version of [`space_similarity`] under [`Reduce::Sum`]; candidate
/// nodes are `[n, P, d]`.
pub fn space_similarity_graph(g: &mut Graph, space: &Space<Var>) -> Var {
    let side = |g: &mut Graph, vars: &[Var]| {
        let normed: Vec<Var> = vars.iter().map(|&v| g.normalize_rows(v)).collect();
        let summed = g.add_all(&normed);
        let s = g.value(summed).shape().to_vec();
        (g.reshape(summed, &[s[0], s[1] * s[2]]), s[1])
    };
    let (t, p) = side(g, &space.text);
    let (v, _) = side(g, &space.image);
    let raw = g.matmul_nt(t, v);
    g.scale(raw, 1.0 / p as f64)
}

pub fn granularity_similarity_graph(g: &mut Graph, spaces: &[Space<Var>]) -> Var {
    let per: Vec<Var> = spaces.iter().map(|s| space_similarity_graph(g, s)).collect();
    g.add_all(&per)
}

/// `alpha2 = (ratio + 1) * alpha1 / 2` with `ratio = weak / strong` clamped
/// to `[0, 1]`, taken as 1 when `strong <= 0`. The result lies in
/// `[alpha1 / 2, alpha1]`.
pub fn adaptive_margin(strong: f64, weak: f64, alpha1: f64) -> f64 {
    let ratio = if strong > 0.0 { (weak / strong).clamp(0.0, 1.0) } else { 1.0 };
    (ratio + 1.0) * alpha1 / 2.0
}

/// Cell of a similarity matrix: `(text row, image column)`.
pub type Cell = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq)]
enum Margin {
    Fixed(f64),
    /// `(ratio + 1) * alpha1 / 2` with `ratio = S[weak] / S[strong]`, in
    /// the unclamped regime.
    Adaptive { strong: Cell, weak: Cell, alpha1: f64 },
}

/// `weight * max(margin - S[pos] + S[neg], 0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Hinge {
    weight: f64,
    margin: Margin,
    pos: Cell,
    neg: Cell,
}

/// Row layout of a ranking batch: rows `0..B` of the similarity matrix are
/// the matched texts of images `0..B`; `alt_rows[i]` is the row of a second
/// same-identity text for position `i`, if any.
#[derive(Clone, Copy, Debug)]
pub struct RankingBatch<'a> {
    pub identities: &'a [PersonIdentity],
    pub alt_rows: &'a [Option<usize>],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrOutcome {
    pub loss: f64,
    /// Set when some position had no different-identity candidate.
    pub missing_negatives: bool,
}

fn argmax(cands: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in cands {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

fn plan_hinges(
    sim: &Tensor,
    batch: &RankingBatch<'_>,
    weights: &LossWeights,
    mining: NegativeMining,
) -> Result<(Vec<Hinge>, bool)> {
    let b = batch.identities.len();
    if sim.ndim() != 2 || sim.dim(1) != b || sim.dim(0) < b {
        bail!(Shape, "similarity matrix {:?} does not fit a batch of {b}", sim.shape());
    }
    if batch.alt_rows.len() != b {
        bail!(Shape, "alt_rows has {} entries for a batch of {b}", batch.alt_rows.len());
    }
    if let Some(r) = batch.alt_rows.iter().flatten().find(|&&r| r >= sim.dim(0)) {
        bail!(Argument, "alt row {r} outside the similarity matrix");
    }
    let ids = batch.identities;
    let s = |c: Cell| sim.at2(c.0, c.1);
    let (a1, beta) = (weights.alpha1, weights.beta);
    let mut out = Vec::new();
    let mut missing = false;
    for i in 0..b {
        let neg_texts: Vec<usize> = (0..b).filter(|&j| ids[j] != ids[i]).collect();
        let neg_images = neg_texts.clone();
        if neg_texts.is_empty() {
            missing = true;
            continue;
        }
        let pos = (i, i);
        let pick = |cands: &[usize], score: &dyn Fn(usize) -> f64| -> Vec<usize> {
            match mining {
                NegativeMining::Hardest => argmax(cands.iter().map(|&j| (j, score(j)))).into_iter().collect(),
                NegativeMining::SumOverAll => cands.to_vec(),
            }
        };
        let hard_texts = pick(&neg_texts, &|j| s((j, i)));
        let hard_images = pick(&neg_images, &|j| s((i, j)));
        for &j in &hard_texts {
            out.push(Hinge { weight: 1.0, margin: Margin::Fixed(a1), pos, neg: (j, i) });
        }
        for &j in &hard_images {
            out.push(Hinge { weight: 1.0, margin: Margin::Fixed(a1), pos, neg: (i, j) });
        }
        let Some(alt) = batch.alt_rows[i] else { continue };
        let weak = (alt, i);
        let (ss, sw) = (s(pos), s(weak));
        let margin = match sw / ss {
            r if ss > 0.0 && r <= 0.0 => Margin::Fixed(a1 / 2.0),
            r if ss > 0.0 && r < 1.0 => Margin::Adaptive { strong: pos, weak, alpha1: a1 },
            _ => Margin::Fixed(a1),
        };
        for &j in &hard_texts {
            out.push(Hinge { weight: beta, margin, pos: weak, neg: (j, i) });
        }
        for &j in &pick(&neg_images, &|j| s((alt, j))) {
            out.push(Hinge { weight: beta, margin, pos: weak, neg: (alt, j) });
        }
    }
    Ok((out, missing))
}

/// Compound ranking loss over one batch, summed over positions.
pub fn cr_loss(
    sim: &Tensor,
    batch: &RankingBatch<'_>,
    weights: &LossWeights,
    mining: NegativeMining,
) -> Result<CrOutcome> {
    if !sim.all_finite() {
        bail!(Argument, "non-finite similarity");
    }
    let (hinges, missing) = plan_hinges(sim, batch, weights, mining)?;
    let s = |c: Cell| sim.at2(c.0, c.1);
    let loss = hinges
        .iter()
        .map(|h| {
            let m = match h.margin {
                Margin::Fixed(m) => m,
                Margin::Adaptive { strong, weak, alpha1 } => adaptive_margin(s(strong), s(weak), alpha1),
            };
            h.weight * (m - s(h.pos) + s(h.neg)).max(0.0)
        })
        .sum();
    Ok(CrOutcome { loss, missing_negatives: missing })
}

/// Graph version of [`cr_loss`]. Negatives are selected on the current
/// values; the adaptive margin stays differentiable.
pub fn cr_loss_graph(
    g: &mut Graph,
    sim: Var,
    batch: &RankingBatch<'_>,
    weights: &LossWeights,
    mining: NegativeMining,
) -> Result<(Var, bool)> {
    let (hinges, missing) = plan_hinges(g.value(sim), batch, weights, mining)?;
    let cols = g.value(sim).dim(1);
    let mut cache = alloc::collections::BTreeMap::new();
    let mut cell = |g: &mut Graph, c: Cell| *cache.entry(c).or_insert_with(|| g.pick(sim, c.0 * cols + c.1));
    let mut terms = Vec::with_capacity(hinges.len());
    for h in &hinges {
        let margin = match h.margin {
            Margin::Fixed(m) => g.constant(Tensor::scalar(m)),
            Margin::Adaptive { strong, weak, alpha1 } => {
                let (ss, sw) = (cell(g, strong), cell(g, weak));
                let ratio = g.div(sw, ss);
                let shifted = g.add_const(ratio, 1.0);
                g.scale(shifted, alpha1 / 2.0)
            }
        };
        let (p, n) = (cell(g, h.pos), cell(g, h.neg));
        let gap = g.sub(n, p);
        let z = g.add(margin, gap);
        let hinge = g.relu(z);
        terms.push(g.scale(hinge, h.weight));
    }
    let loss = if terms.is_empty() { g.constant(Tensor::scalar(0.0)) } else { g.add_all(&terms) };
    Ok((loss, missing))
}

/// Identity classifiers `[d, Q]` per granularity, for each modality.
#[derive(Clone, Debug, PartialEq)]
pub struct IdClassifiers {
    pub visual: [Tensor; 3],
    pub textual: [Tensor; 3],
}

impl IdClassifiers {
    pub fn num_identities(&self) -> usize {
        self.visual[0].dim(1)
    }
}

fn granularity_index(g: Granularity) -> usize {
    match g {
        Granularity::Global => 0,
        Granularity::Local => 1,
        Granularity::Nonlocal => 2,
    }
}

/// Mean over rows of `-log softmax(row W)[y]`.
fn mean_cross_entropy(rows: &Tensor, w: &Tensor, y: usize) -> Result<f64> {
    let (p, d) = (rows.dim(1), rows.dim(2));
    if w.ndim() != 2 || w.dim(0) != d {
        bail!(Shape, "classifier {:?} does not take {d}-dim features", w.shape());
    }
    let q = w.dim(1);
    let mut logits = vec![0.0; p * q];
    matmul_acc(rows.data(), w.data(), &mut logits, p, d, q);
    let total: f64 = logits
        .chunks(q)
        .map(|row| {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + libm::log(row.iter().map(|v| libm::exp(v - mx)).sum::<f64>());
            lse - row[y]
        })
        .sum();
    Ok(total / p as f64)
}

/// Identity cross-entropy on pre-embedding features of one image and one
/// text sharing label `y`, weighted across granularities.
pub fn id_loss(
    v: &MultiGrainedFeatures,
    t: &MultiGrainedFeatures,
    y: PersonIdentity,
    classifiers: &IdClassifiers,
    weights: &LossWeights,
) -> Result<f64> {
    let q = classifiers.num_identities();
    if y.0 >= q {
        bail!(Argument, "identity {} outside [0, {q})", y.0);
    }
    let mut total = 0.0;
    for g in Granularity::ALL {
        let gi = granularity_index(g);
        let term = mean_cross_entropy(&as_rows(g, v)?, &classifiers.visual[gi], y.0)?
            + mean_cross_entropy(&as_rows(g, t)?, &classifiers.textual[gi], y.0)?;
        total += weights.weight(g) * term;
    }
    Ok(total)
}

/// Sum over samples of part-averaged cross-entropy, for `[n, P, d]` features.
pub fn id_loss_graph(g: &mut Graph, feats: Var, classifier: Var, labels: &[usize]) -> Var {
    let s = g.value(feats).shape().to_vec();
    let (n, p, d) = (s[0], s[1], s[2]);
    let rows = g.reshape(feats, &[n * p, d]);
    let logits = g.matmul(rows, classifier);
    let per_row: Vec<usize> = labels.iter().flat_map(|&y| core::iter::repeat_n(y, p)).collect();
    let ce = g.cross_entropy(logits, &per_row);
    let total = g.sum(ce);
    g.scale(total, 1.0 / p as f64)
}

/// Loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub id: f64,
    pub cr: f64,
    pub total: f64,
}

pub fn total_loss(id: f64, cr: f64) -> LossBreakdown {
    LossBreakdown { id, cr, total: id + cr }
}
