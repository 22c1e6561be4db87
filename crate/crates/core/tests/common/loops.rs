//! Brute-force loop versions of the model's formulas, written against plain
//! vectors so they share no code with the crate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

pub fn vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows).map(|_| vector(rng, cols, scale)).collect()
}

pub fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

/// `x W` for a row vector.
pub fn vec_mat(x: &[f64], w: &Mat) -> Vec<f64> {
    let cols = w[0].len();
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i][j];
        }
    }
    out
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Non-local features from local features `locals[k]` with per-part weights.
pub fn nlm(locals: &Mat, alpha: &[Mat], beta: &[Mat], gamma: &[Mat], delta: &[Mat]) -> Mat {
    let k = locals.len();
    let keys: Vec<Vec<f64>> = (0..k).map(|i| vec_mat(&locals[i], &beta[i])).collect();
    let mut out = Vec::new();
    for p in 0..k {
        let query = vec_mat(&locals[p], &alpha[p]);
        let mut denom = 0.0;
        for j in 0..k {
            if j != p {
                denom += cos(&query, &keys[j]).exp();
            }
        }
        let mut agg = vec![0.0; locals[p].len()];
        for i in 0..k {
            if i != p {
                let w = cos(&query, &keys[i]).exp() / denom;
                for c in 0..agg.len() {
                    agg[c] += w * keys[i][c];
                }
            }
        }
        let agg = vec_mat(&agg, &gamma[p]);
        let mixed: Vec<f64> = locals[p].iter().zip(&agg).map(|(a, b)| a + b).collect();
        out.push(vec_mat(&mixed, &delta[p]));
    }
    out
}

/// `x + relu(x W1) W2`.
pub fn rem(x: &[f64], w1: &Mat, w2: &Mat) -> Vec<f64> {
    let hidden: Vec<f64> = vec_mat(x, w1).into_iter().map(|v| v.max(0.0)).collect();
    let up = vec_mat(&hidden, w2);
    x.iter().zip(&up).map(|(a, b)| a + b).collect()
}

/// `-log softmax(x W)[y]` without any stabilisation tricks.
pub fn cross_entropy(x: &[f64], w: &Mat, y: usize) -> f64 {
    let logits = vec_mat(x, w);
    let total: f64 = logits.iter().map(|z| z.exp()).sum();
    -(logits[y].exp() / total).ln()
}

/// One sample's features: global, K local, K non-local.
#[derive(Clone, Debug)]
pub struct Feats {
    pub global: Vec<f64>,
    pub local: Mat,
    pub nonlocal: Mat,
}

impl Feats {
    pub fn parts(&self, gran: usize) -> Mat {
        match gran {
            0 => vec![self.global.clone()],
            1 => self.local.clone(),
            _ => self.nonlocal.clone(),
        }
    }
}

/// Granularity weights global, local, non-local.
pub const GRAN_WEIGHTS: [f64; 3] = [2.0, 1.0, 1.0];

/// ID loss: per granularity, part-averaged cross-entropy of both sides,
/// weighted across granularities.
pub fn id_loss(v: &Feats, t: &Feats, y: usize, wv: &[Mat; 3], wt: &[Mat; 3]) -> f64 {
    let mut total = 0.0;
    for g in 0..3 {
        let (vp, tp) = (v.parts(g), t.parts(g));
        let lv: f64 = vp.iter().map(|x| cross_entropy(x, &wv[g], y)).sum::<f64>() / vp.len() as f64;
        let lt: f64 = tp.iter().map(|x| cross_entropy(x, &wt[g], y)).sum::<f64>() / tp.len() as f64;
        total += GRAN_WEIGHTS[g] * (lv + lt);
    }
    total
}

/// Similarity of one image and one text. `t_img[m]` are the text's
/// candidates in image space, `v_txt[m]` the image's candidates in text
/// space. With `use_max` each space keeps its best candidate per part.
pub fn pair_similarity(v: &Feats, t: &Feats, v_txt: &[Feats], t_img: &[Feats], use_max: bool) -> f64 {
    let mut total = 0.0;
    for g in 0..3 {
        let (vp, tp) = (v.parts(g), t.parts(g));
        let mut s = 0.0;
        for p in 0..vp.len() {
            let image_space: Vec<f64> = t_img.iter().map(|c| cos(&vp[p], &c.parts(g)[p])).collect();
            let text_space: Vec<f64> = v_txt.iter().map(|c| cos(&c.parts(g)[p], &tp[p])).collect();
            let reduce = |xs: &[f64]| {
                if use_max {
                    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    xs.iter().sum()
                }
            };
            s += reduce(&image_space) + reduce(&text_space);
        }
        total += GRAN_WEIGHTS[g] * s / vp.len() as f64;
    }
    total
}

/// `(min(weak / strong, 1) + 1) * alpha1 / 2`, or `alpha1` when `strong <= 0`.
pub fn alpha2(strong: f64, weak: f64, alpha1: f64) -> f64 {
    if strong <= 0.0 {
        return alpha1;
    }
    ((weak / strong).clamp(0.0, 1.0) + 1.0) * alpha1 / 2.0
}

fn hinge(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Compound ranking loss summed over the batch. `s[text][image]`; rows
/// `0..b` are the matched texts and `alt[i]` names the row of a same-identity
/// text of another image. `hardest` keeps only the most similar negative.
pub fn cr_loss(s: &Mat, ids: &[usize], alt: &[Option<usize>], alpha1: f64, beta: f64, hardest: bool) -> f64 {
    let b = ids.len();
    let mut loss = 0.0;
    for i in 0..b {
        let negs: Vec<usize> = (0..b).filter(|&j| ids[j] != ids[i]).collect();
        if negs.is_empty() {
            continue;
        }
        let choose = |score: &dyn Fn(usize) -> f64| -> Vec<usize> {
            if !hardest {
                return negs.clone();
            }
            let mut best = negs[0];
            for &j in &negs {
                if score(j) > score(best) {
                    best = j;
                }
            }
            vec![best]
        };
        let neg_texts = choose(&|j| s[j][i]);
        let neg_images = choose(&|j| s[i][j]);
        for &j in &neg_texts {
            loss += hinge(alpha1 - s[i][i] + s[j][i]);
        }
        for &j in &neg_images {
            loss += hinge(alpha1 - s[i][i] + s[i][j]);
        }
        if let Some(a) = alt[i] {
            let m = alpha2(s[i][i], s[a][i], alpha1);
            for &j in &neg_texts {
                loss += beta * hinge(m - s[a][i] + s[j][i]);
            }
            for &j in &choose(&|j| s[a][j]) {
                loss += beta * hinge(m - s[a][i] + s[a][j]);
            }
        }
    }
    loss
}
