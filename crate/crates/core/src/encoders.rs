//! Backbones and the multi-grained feature heads.
//!
//! Images go through a strided convolution stack to a `[H, W, C]` map, texts
//! through an embedding table and a bidirectional LSTM to `[N, C]`. From
//! those, global features are max-pooled and linearly projected, local
//! features are pooled per horizontal stripe (images) or per word-attention
//! map (texts), and non-local features mix the K local features through
//! cosine-softmax attention with per-part weights.
//!
//! Every fully connected map here is a bare matrix product.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::{DataDims, TrainConfig};
use crate::data::{ImageSample, TextSample};
use crate::error::{bail, Result};
use crate::params::{linear_init, uniform, Binder, Params};
use crate::tensor::Tensor;

/// Modality branch, used as the second path segment of parameter names.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Textual,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Visual => "vis",
            Modality::Textual => "txt",
        }
    }
}

pub fn conv_name(stage: usize) -> String {
    format!("enc.vis.conv{stage}")
}
pub const EMBED: &str = "enc.txt.embed";
pub const TEXT_OUT: &str = "enc.txt.W_out";
pub const WAM_QUERIES: &str = "enc.txt.wam.queries";

pub fn lstm_name(dir: &str, which: &str) -> String {
    format!("enc.txt.lstm.{dir}.{which}")
}
pub fn global_name(m: Modality) -> String {
    format!("enc.{}.W_g", m.tag())
}
pub fn local_name(m: Modality) -> String {
    format!("enc.{}.W_l", m.tag())
}
pub fn nlm_name(m: Modality, part: usize, which: &str) -> String {
    format!("enc.{}.nlm.k{part}.W_{which}", m.tag())
}

pub fn init_encoder_params<R: Rng + ?Sized>(
    params: &mut Params,
    cfg: &TrainConfig,
    dims: &DataDims,
    rng: &mut R,
) {
    let bb = &cfg.backbone;
    let mut cin = 3;
    for (i, &cout) in bb.channels.iter().enumerate() {
        let fan_in = bb.kernel * bb.kernel * cin;
        let bound = libm::sqrt(6.0 / fan_in as f64);
        params.insert(conv_name(i), uniform(&[bb.kernel, bb.kernel, cin, cout], bound, rng));
        cin = cout;
    }
    let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
    params.insert(EMBED, uniform(&[dims.vocab_size, e], libm::sqrt(3.0), rng));
    for dir in ["fwd", "bwd"] {
        let b = 1.0 / libm::sqrt(h as f64);
        params.insert(lstm_name(dir, "W_x"), uniform(&[e, 4 * h], b, rng));
        params.insert(lstm_name(dir, "W_h"), uniform(&[h, 4 * h], b, rng));
    }
    params.insert(TEXT_OUT, linear_init(2 * h, cfg.c, rng));
    params.insert(WAM_QUERIES, uniform(&[cfg.k, cfg.c], libm::sqrt(3.0), rng));
    for m in [Modality::Visual, Modality::Textual] {
        params.insert(global_name(m), linear_init(cfg.c, cfg.c_g, rng));
        params.insert(local_name(m), linear_init(cfg.c, cfg.c_l, rng));
        for k in 0..cfg.k {
            for w in ["alpha", "beta", "gamma"] {
                params.insert(nlm_name(m, k, w), linear_init(cfg.c_l, cfg.c_l, rng));
            }
            params.insert(nlm_name(m, k, "delta"), linear_init(cfg.c_l, cfg.c_n, rng));
        }
    }
}

/// Visual feature map `[H, W, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatureMap {
    pub values: Tensor,
}

/// Textual features `[N, C]`; rows at or past `valid_length` are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatureSeq {
    pub values: Tensor,
    pub valid_length: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiGrainedFeatures {
    pub global: Vec<f64>,
    pub local: Vec<Vec<f64>>,
    pub nonlocal: Vec<Vec<f64>>,
}

/// Batched multi-grained features inside a graph: `global [n, C_g]`,
/// `local [n, K, C_l]`, `nonlocal [n, K, C_n]`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureVars {
    pub global: Var,
    pub local: Var,
    pub nonlocal: Var,
}

fn stack_images(images: &[&ImageSample], cfg: &TrainConfig) -> Result<Tensor> {
    let (h, w) = (cfg.image_height, cfg.image_width);
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if img.pixels.shape() != [h, w, 3] {
            bail!(
                Argument,
                "image {} has shape {:?}, expected [{h}, {w}, 3]",
                img.sample_id,
                img.pixels.shape()
            );
        }
        data.extend_from_slice(img.pixels.data());
    }
    Tensor::new(&[images.len(), h, w, 3], data)
}

/// Backbone over a batch of images: `[n, H, W, C]`.
pub fn visual_backbone(
    g: &mut Graph,
    b: &mut Binder,
    images: &[&ImageSample],
    cfg: &TrainConfig,
) -> Result<Var> {
    let mut x = g.constant(stack_images(images, cfg)?);
    for (i, &s) in cfg.backbone.strides.iter().enumerate() {
        let k = b.get(g, &conv_name(i));
        let c = g.conv2d(x, k, s);
        x = g.relu(c);
    }
    Ok(x)
}

/// Embedding + bidirectional LSTM over a batch of texts. Returns `[n, N, C]`
/// with padded rows zeroed, plus the valid lengths.
pub fn text_backbone(
    g: &mut Graph,
    b: &mut Binder,
    texts: &[&TextSample],
    cfg: &TrainConfig,
) -> Result<(Var, Vec<usize>)> {
    let n = texts.len();
    let vocab = b.params().tensor(EMBED).dim(0);
    let mut lens = Vec::with_capacity(n);
    for t in texts {
        if t.tokens.is_empty() || t.tokens.len() > cfg.max_len {
            bail!(Argument, "text {} length {} outside [1, {}]", t.sample_id, t.tokens.len(), cfg.max_len);
        }
        if let Some(tok) = t.tokens.iter().find(|&&x| x >= vocab) {
            bail!(Argument, "text {} token {tok} outside vocabulary of {vocab}", t.sample_id);
        }
        lens.push(t.tokens.len());
    }
    let h = cfg.hidden_dim;
    let steps = *lens.iter().max().unwrap_or(&0);
    let embed = b.get(g, EMBED);
    let xs: Vec<Var> = (0..steps)
        .map(|t| {
            let idx: Vec<usize> = texts.iter().map(|s| s.tokens.get(t).copied().unwrap_or(0)).collect();
            g.gather(embed, &idx)
        })
        .collect();
    let masks: Vec<Var> = (0..steps)
        .map(|t| {
            let m = lens.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect();
            g.constant(Tensor::vector(m))
        })
        .collect();

    let run = |g: &mut Graph, b: &mut Binder, dir: &str, order: Vec<usize>| -> Vec<Var> {
        let wx = b.get(g, &lstm_name(dir, "W_x"));
        let wh = b.get(g, &lstm_name(dir, "W_h"));
        let mut hs = g.constant(Tensor::zeros(&[n, h]));
        let mut cs = g.constant(Tensor::zeros(&[n, h]));
        let mut out = vec![hs; steps];
        let reverse = dir == "bwd";
        for t in order {
            let zx = g.matmul(xs[t], wx);
            let zh = g.matmul(hs, wh);
            let z = g.add(zx, zh);
            let gi = g.slice_cols(z, 0, h);
            let gf = g.slice_cols(z, h, h);
            let gg = g.slice_cols(z, 2 * h, h);
            let go = g.slice_cols(z, 3 * h, h);
            let i = g.sigmoid(gi);
            let f = g.sigmoid(gf);
            let cand = g.tanh(gg);
            let o = g.sigmoid(go);
            let fc = g.mul(f, cs);
            let ic = g.mul(i, cand);
            let mut c_new = g.add(fc, ic);
            let tc = g.tanh(c_new);
            let mut h_new = g.mul(o, tc);
            if reverse {
                // state stays at zero until the sequence's last valid token
                c_new = g.mul_rows(c_new, masks[t]);
                h_new = g.mul_rows(h_new, masks[t]);
            }
            cs = c_new;
            hs = h_new;
            out[t] = h_new;
        }
        out
    };
    let fwd = run(g, b, "fwd", (0..steps).collect());
    let bwd = run(g, b, "bwd", (0..steps).rev().collect());
    let w_out = b.get(g, TEXT_OUT);
    let zero_row = g.constant(Tensor::zeros(&[n, cfg.c]));
    let rows: Vec<Var> = (0..cfg.max_len)
        .map(|t| {
            if t >= steps {
                return zero_row;
            }
            let hc = g.concat_cols(fwd[t], bwd[t]);
            let y = g.matmul(hc, w_out);
            g.mul_rows(y, masks[t])
        })
        .collect();
    Ok((g.stack(&rows), lens))
}

/// Global max pooling over the positions of `[n, P, C]` followed by `W_g`.
pub fn global_head_graph(g: &mut Graph, feats: Var, lens: Option<&[usize]>, w: Var) -> Var {
    let pooled = g.max_pool(feats, lens);
    g.matmul(pooled, w)
}

/// Splits `[n, H, W, C]` into K horizontal stripes and pools each: `[n, K, C]`.
pub fn visual_part_pool(g: &mut Graph, v: Var, k: usize) -> Var {
    let s = g.value(v).shape().to_vec();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let stripes = g.reshape(v, &[n * k, (h / k) * w, c]);
    let pooled = g.max_pool(stripes, None);
    g.reshape(pooled, &[n, k, c])
}

/// Word attention surrogate: K learned queries, scaled dot-product softmax
/// over valid positions, each output row scaled by `valid_length * weight`.
/// Returns K nodes of shape `[n, N, C]`.
pub fn word_attention_graph(g: &mut Graph, t: Var, lens: &[usize], queries: Var) -> Vec<Var> {
    let s = g.value(t).shape().to_vec();
    let (n, len, c) = (s[0], s[1], s[2]);
    let k = g.value(queries).dim(0);
    let flat = g.reshape(t, &[n * len, c]);
    let raw = g.matmul_nt(flat, queries);
    let scores = g.scale(raw, 1.0 / libm::sqrt(c as f64));
    let scores = g.reshape(scores, &[n, len, k]);
    let scores = g.swap_last(scores);
    let scores = g.reshape(scores, &[n * k, len]);
    let mask: Vec<bool> = (0..n * k).flat_map(|row| (0..len).map(move |j| (row, j))).map(|(row, j)| j < lens[row / k]).collect();
    let attn = g.softmax(scores, Some(&mask));
    let scale = g.constant(Tensor::vector((0..n * k).map(|row| lens[row / k] as f64).collect()));
    let attn = g.mul_rows(attn, scale);
    let attn = g.reshape(attn, &[n, k, len]);
    (0..k)
        .map(|part| {
            let w = g.select(attn, part);
            let w = g.reshape(w, &[n * len]);
            let scaled = g.mul_rows(flat, w);
            g.reshape(scaled, &[n, len, c])
        })
        .collect()
}

/// Non-local module over `[n, K, C_l]` local features, returning `[n, K, C_n]`.
pub fn nonlocal_graph(g: &mut Graph, b: &mut Binder, locals: Var, modality: Modality) -> Var {
    nonlocal_graph_traced(g, b, locals, modality).0
}

/// Like [`nonlocal_graph`], also returning each part's `[n, K-1]` cosine
/// scores and attention weights over the other parts in ascending order.
pub fn nonlocal_graph_traced(g: &mut Graph, b: &mut Binder, locals: Var, modality: Modality) -> (Var, Vec<(Var, Var)>) {
    let k = g.value(locals).dim(1);
    let parts: Vec<Var> = (0..k).map(|p| g.select(locals, p)).collect();
    let keys: Vec<Var> = (0..k)
        .map(|i| {
            let wb = b.get(g, &nlm_name(modality, i, "beta"));
            g.matmul(parts[i], wb)
        })
        .collect();
    let keys_n: Vec<Var> = keys.iter().map(|&x| g.normalize_rows(x)).collect();
    let mut trace = Vec::with_capacity(k);
    let outs: Vec<Var> = (0..k)
        .map(|p| {
            let wa = b.get(g, &nlm_name(modality, p, "alpha"));
            let q = g.matmul(parts[p], wa);
            let qn = g.normalize_rows(q);
            let others: Vec<usize> = (0..k).filter(|&i| i != p).collect();
            let scores: Vec<Var> = others.iter().map(|&i| g.row_dot(qn, keys_n[i])).collect();
            let s = g.stack_cols(&scores);
            let w = g.softmax(s, None);
            trace.push((s, w));
            let terms: Vec<Var> = others
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    let col = g.select_col(w, j);
                    g.mul_rows(keys[i], col)
                })
                .collect();
            let agg = g.add_all(&terms);
            let wg = b.get(g, &nlm_name(modality, p, "gamma"));
            let agg = g.matmul(agg, wg);
            let mixed = g.add(parts[p], agg);
            let wd = b.get(g, &nlm_name(modality, p, "delta"));
            g.matmul(mixed, wd)
        })
        .collect();
    (g.stack(&outs), trace)
}

/// Full image branch: backbone + global/local/non-local heads.
pub fn image_features(
    g: &mut Graph,
    b: &mut Binder,
    images: &[&ImageSample],
    cfg: &TrainConfig,
) -> Result<FeatureVars> {
    let v = visual_backbone(g, b, images, cfg)?;
    let s = g.value(v).shape().to_vec();
    let flat = g.reshape(v, &[s[0], s[1] * s[2], s[3]]);
    let wg = b.get(g, &global_name(Modality::Visual));
    let global = global_head_graph(g, flat, None, wg);
    let pooled = visual_part_pool(g, v, cfg.k);
    let wl = b.get(g, &local_name(Modality::Visual));
    let local = g.matmul(pooled, wl);
    let nonlocal = if cfg.k >= 2 { nonlocal_graph(g, b, local, Modality::Visual) } else { local };
    Ok(FeatureVars { global, local, nonlocal })
}

/// Full text branch: backbone + global/local (via word attention)/non-local heads.
pub fn text_features(
    g: &mut Graph,
    b: &mut Binder,
    texts: &[&TextSample],
    cfg: &TrainConfig,
) -> Result<FeatureVars> {
    let (t, lens) = text_backbone(g, b, texts, cfg)?;
    let wg = b.get(g, &global_name(Modality::Textual));
    let global = global_head_graph(g, t, Some(&lens), wg);
    let queries = b.get(g, WAM_QUERIES);
    let maps = word_attention_graph(g, t, &lens, queries);
    let pooled: Vec<Var> = maps.iter().map(|&m| g.max_pool(m, Some(&lens))).collect();
    let pooled = g.stack(&pooled);
    let wl = b.get(g, &local_name(Modality::Textual));
    let local = g.matmul(pooled, wl);
    let nonlocal = if cfg.k >= 2 { nonlocal_graph(g, b, local, Modality::Textual) } else { local };
    Ok(FeatureVars { global, local, nonlocal })
}

/// Reads row `i` of batched feature nodes into a value bundle.
pub fn features_at(g: &Graph, f: &FeatureVars, i: usize) -> MultiGrainedFeatures {
    let parts = |v: Var| {
        let t = g.value(v);
        let (k, d) = (t.dim(1), t.dim(2));
        (0..k).map(|p| t.data()[(i * k + p) * d..][..d].to_vec()).collect()
    };
    MultiGrainedFeatures { global: g.value(f.global).row(i).to_vec(), local: parts(f.local), nonlocal: parts(f.nonlocal) }
}

// ---- single-sample operations -------------------------------------------

pub fn encode_image(image: &ImageSample, params: &Params, cfg: &TrainConfig) -> Result<VisualFeatureMap> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(params);
    let v = visual_backbone(&mut g, &mut b, &[image], cfg)?;
    let t = g.value(v);
    let values = t.clone().reshape(&t.shape()[1..])?;
    Ok(VisualFeatureMap { values })
}

pub fn encode_text(text: &TextSample, params: &Params, cfg: &TrainConfig) -> Result<TextFeatureSeq> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(params);
    let (v, lens) = text_backbone(&mut g, &mut b, &[text], cfg)?;
    let t = g.value(v);
    let values = t.clone().reshape(&t.shape()[1..])?;
    Ok(TextFeatureSeq { values, valid_length: lens[0] })
}

fn check_projection(c: usize, w: &Tensor, what: &str) -> Result<()> {
    if w.ndim() != 2 || w.dim(0) != c {
        bail!(Shape, "{what} expects a [{c}, _] matrix, got {:?}", w.shape());
    }
    Ok(())
}

fn pool_project(rows: Tensor, valid: usize, w: &Tensor) -> Result<Vec<f64>> {
    let s = rows.shape().to_vec();
    let c = *s.last().unwrap();
    let p = rows.len() / c;
    if valid == 0 || valid > p {
        bail!(Argument, "need between 1 and {p} valid rows, got {valid}");
    }
    if !rows.all_finite() {
        bail!(Argument, "non-finite input features");
    }
    check_projection(c, w, "projection")?;
    let mut g = Graph::new();
    let x = g.constant(rows.reshape(&[1, p, c])?);
    let wv = g.constant(w.clone());
    let out = global_head_graph(&mut g, x, Some(&[valid]), wv);
    Ok(g.value(out).data().to_vec())
}

/// `GMP(V) W_g` for a visual map.
pub fn global_head_visual(map: &VisualFeatureMap, w_g: &Tensor) -> Result<Vec<f64>> {
    let n = map.values.dim(0) * map.values.dim(1);
    pool_project(map.values.clone(), n, w_g)
}

/// `GMP(T) W_g` over the valid rows of a text sequence.
pub fn global_head_text(seq: &TextFeatureSeq, w_g: &Tensor) -> Result<Vec<f64>> {
    pool_project(seq.values.clone(), seq.valid_length, w_g)
}

/// `GMP(part) W_l` over the first `valid_rows` rows (all rows when `None`).
pub fn local_head(part: &Tensor, valid_rows: Option<usize>, w_l: &Tensor) -> Result<Vec<f64>> {
    let c = *part.shape().last().unwrap_or(&0);
    let rows = if c == 0 { 0 } else { part.len() / c };
    pool_project(part.clone(), valid_rows.unwrap_or(rows), w_l)
}

/// K contiguous horizontal stripes `[H/K, W, C]`, top to bottom.
pub fn split_visual_parts(map: &VisualFeatureMap, k: usize) -> Result<Vec<Tensor>> {
    let v = &map.values;
    if v.ndim() != 3 {
        bail!(Shape, "visual map must be [H, W, C]");
    }
    let (h, w, c) = (v.dim(0), v.dim(1), v.dim(2));
    if k == 0 || h % k != 0 {
        bail!(Argument, "height {h} is not divisible by K = {k}");
    }
    let stripe = (h / k) * w * c;
    (0..k).map(|p| Tensor::new(&[h / k, w, c], v.data()[p * stripe..][..stripe].to_vec())).collect()
}

pub fn word_attention(seq: &TextFeatureSeq, queries: &Tensor) -> Result<Vec<Tensor>> {
    let t = &seq.values;
    if t.ndim() != 2 || queries.ndim() != 2 || queries.dim(1) != t.dim(1) {
        bail!(Shape, "word attention needs T [N, C] and queries [K, C]");
    }
    if seq.valid_length == 0 || seq.valid_length > t.dim(0) {
        bail!(Argument, "valid_length must be in [1, {}]", t.dim(0));
    }
    let mut g = Graph::new();
    let tv = g.constant(t.clone().reshape(&[1, t.dim(0), t.dim(1)])?);
    let q = g.constant(queries.clone());
    let outs = word_attention_graph(&mut g, tv, &[seq.valid_length], q);
    outs.into_iter().map(|o| g.value(o).clone().reshape(t.shape())).collect()
}

/// Per-part non-local weights: `alpha/beta/gamma [C_l, C_l]`, `delta [C_l, C_n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NlmWeights {
    pub alpha: Vec<Tensor>,
    pub beta: Vec<Tensor>,
    pub gamma: Vec<Tensor>,
    pub delta: Vec<Tensor>,
}

impl NlmWeights {
    pub fn from_params(params: &Params, modality: Modality, k: usize) -> Self {
        let get = |w: &str| (0..k).map(|p| params.tensor(&nlm_name(modality, p, w)).clone()).collect();
        Self { alpha: get("alpha"), beta: get("beta"), gamma: get("gamma"), delta: get("delta") }
    }

    fn into_params(self, modality: Modality) -> Params {
        let mut p = Params::new();
        for (w, list) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("delta", self.delta)] {
            for (i, t) in list.into_iter().enumerate() {
                p.insert(nlm_name(modality, i, w), t);
            }
        }
        p
    }
}

/// Attention of one sample's non-local module. Row `p` covers the other
/// parts in ascending order.
#[derive(Clone, Debug, PartialEq)]
pub struct NlmAttention {
    pub scores: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

fn check_nlm_inputs(locals: &[Vec<f64>], weights: &NlmWeights) -> Result<(usize, usize)> {
    let k = locals.len();
    if k < 2 {
        bail!(Argument, "non-local module needs K >= 2 parts, got {k}");
    }
    let c = locals[0].len();
    if locals.iter().any(|l| l.len() != c) {
        bail!(Shape, "local features differ in length");
    }
    for list in [&weights.alpha, &weights.beta, &weights.gamma, &weights.delta] {
        if list.len() != k {
            bail!(Shape, "expected {k} per-part matrices, got {}", list.len());
        }
    }
    for p in 0..k {
        for w in [&weights.alpha[p], &weights.beta[p], &weights.gamma[p]] {
            if w.shape() != [c, c] {
                bail!(Shape, "part {p} mixing matrix must be [{c}, {c}], got {:?}", w.shape());
            }
        }
        check_projection(c, &weights.delta[p], "W_delta")?;
    }
    Ok((k, c))
}

fn run_nonlocal(locals: &[Vec<f64>], weights: &NlmWeights) -> Result<(Graph, Var, Vec<(Var, Var)>)> {
    let (k, c) = check_nlm_inputs(locals, weights)?;
    let params = weights.clone().into_params(Modality::Visual);
    let mut g = Graph::new();
    let mut b = Binder::frozen(&params);
    let data = locals.iter().flatten().copied().collect();
    let x = g.constant(Tensor::new(&[1, k, c], data)?);
    let (out, trace) = nonlocal_graph_traced(&mut g, &mut b, x, Modality::Visual);
    Ok((g, out, trace))
}

pub fn nonlocal_head(locals: &[Vec<f64>], weights: &NlmWeights) -> Result<Vec<Vec<f64>>> {
    let (g, out, _) = run_nonlocal(locals, weights)?;
    let t = g.value(out);
    let d = t.dim(2);
    Ok((0..locals.len()).map(|p| t.data()[p * d..][..d].to_vec()).collect())
}

pub fn nonlocal_attention(locals: &[Vec<f64>], weights: &NlmWeights) -> Result<NlmAttention> {
    let (g, _, trace) = run_nonlocal(locals, weights)?;
    let row = |v: Var| g.value(v).data().to_vec();
    Ok(NlmAttention {
        scores: trace.iter().map(|&(s, _)| row(s)).collect(),
        weights: trace.iter().map(|&(_, w)| row(w)).collect(),
    })
}

pub fn extract_image(image: &ImageSample, params: &Params, cfg: &TrainConfig) -> Result<MultiGrainedFeatures> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(params);
    let f = image_features(&mut g, &mut b, &[image], cfg)?;
    Ok(features_at(&g, &f, 0))
}

pub fn extract_text(text: &TextSample, params: &Params, cfg: &TrainConfig) -> Result<MultiGrainedFeatures> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(params);
    let f = text_features(&mut g, &mut b, &[text], cfg)?;
    Ok(features_at(&g, &f, 0))
}
