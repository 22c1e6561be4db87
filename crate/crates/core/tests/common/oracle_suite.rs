use crate::common;
use beat_core::autodiff::Graph;
use beat_core::config::{DataDims, Granularity, LossWeights, NegativeMining, TrainConfig};
use beat_core::data::{generate_synthetic, PersonIdentity, SyntheticSpec};
use beat_core::encoders::{extract_image, extract_text, nonlocal_head, MultiGrainedFeatures, NlmWeights};
use beat_core::model::Model;
use beat_core::objectives::{
    adaptive_margin, cr_loss, cr_loss_graph, id_loss, id_loss_graph, inference_similarity, training_similarity,
    IdClassifiers, RankingBatch, Reduce,
};
use beat_core::params::uniform;
use beat_core::remg::{bidirectional_embed, rem_forward, rem_name, remg_embed, Direction, REMGroup, REMParams};
use beat_core::Tensor;
use common::{flatten, matrix, max_rel_err, rel_err, vector, Feats, Mat};
use rand::Rng;

const TOL: f64 = 1e-6;
const INSTANCES: u64 = 100;

fn tensor(m: &Mat) -> Tensor {
    Tensor::new(&[m.len(), m[0].len()], flatten(m)).unwrap()
}

fn to_feats(f: &MultiGrainedFeatures) -> Feats {
    Feats { global: f.global.clone(), local: f.local.clone(), nonlocal: f.nonlocal.clone() }
}

fn from_feats(f: &Feats) -> MultiGrainedFeatures {
    MultiGrainedFeatures { global: f.global.clone(), local: f.local.clone(), nonlocal: f.nonlocal.clone() }
}

fn random_feats(rng: &mut rand_chacha::ChaCha8Rng, k: usize, dims: [usize; 3]) -> Feats {
    Feats {
        global: vector(rng, dims[0], 1.0),
        local: matrix(rng, k, dims[1], 1.0),
        nonlocal: matrix(rng, k, dims[2], 1.0),
    }
}

pub fn nonlocal_module_matches_loops() {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = common::rng(seed);
        let k = rng.random_range(2..6);
        let c = rng.random_range(1..7);
        let cn = rng.random_range(1..6);
        let locals = matrix(&mut rng, k, c, 1.0);
        let mats = |rng: &mut _, cols| (0..k).map(|_| matrix(rng, c, cols, 1.0)).collect::<Vec<_>>();
        let (a, b, g, d) = (mats(&mut rng, c), mats(&mut rng, c), mats(&mut rng, c), mats(&mut rng, cn));
        let want = common::nlm(&locals, &a, &b, &g, &d);
        let w = NlmWeights {
            alpha: a.iter().map(tensor).collect(),
            beta: b.iter().map(tensor).collect(),
            gamma: g.iter().map(tensor).collect(),
            delta: d.iter().map(tensor).collect(),
        };
        let got = nonlocal_head(&locals, &w).unwrap();
        worst = worst.max(max_rel_err(&flatten(&got), &flatten(&want)));
    }
    assert!(worst < TOL, "max relative error {worst:e}");
}

pub fn residual_embedding_matches_loops() {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = common::rng(1000 + seed);
        let r = rng.random_range(1..5);
        let c = r * rng.random_range(1..5);
        let m = rng.random_range(1..5);
        let x = vector(&mut rng, c, 1.0);
        let weights: Vec<(Mat, Mat)> = (0..m).map(|_| (matrix(&mut rng, c, c / r, 1.0), matrix(&mut rng, c / r, c, 1.0))).collect();
        let rems: Vec<REMParams> = weights.iter().map(|(a, b)| REMParams::new(tensor(a), tensor(b)).unwrap()).collect();
        worst = worst.max(max_rel_err(&rem_forward(&x, &rems[0]).unwrap(), &common::rem(&x, &weights[0].0, &weights[0].1)));
        let group = REMGroup::new(rems, Direction::ImageToText, Granularity::Global).unwrap();
        let got = remg_embed(&x, &group).unwrap();
        assert_eq!(got.len(), m);
        for (out, (a, b)) in got.iter().zip(&weights) {
            worst = worst.max(max_rel_err(out, &common::rem(&x, a, b)));
        }
    }
    assert!(worst < TOL, "max relative error {worst:e}");
}

pub fn identity_loss_matches_loops() {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = common::rng(2000 + seed);
        let k = rng.random_range(2..5);
        let dims = [rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6)];
        let q = rng.random_range(2..7);
        let y = rng.random_range(0..q);
        let (v, t) = (random_feats(&mut rng, k, dims), random_feats(&mut rng, k, dims));
        let wv: [Mat; 3] = core::array::from_fn(|g| matrix(&mut rng, dims[g], q, 1.0));
        let wt: [Mat; 3] = core::array::from_fn(|g| matrix(&mut rng, dims[g], q, 1.0));
        let cls = IdClassifiers {
            visual: core::array::from_fn(|g| tensor(&wv[g])),
            textual: core::array::from_fn(|g| tensor(&wt[g])),
        };
        let got = id_loss(&from_feats(&v), &from_feats(&t), PersonIdentity(y), &cls, &LossWeights::default()).unwrap();
        worst = worst.max(rel_err(got, common::id_loss(&v, &t, y, &wv, &wt)));

        // batched graph form: sum over samples of part-averaged cross-entropy
        let n = rng.random_range(1..5);
        let feats: Vec<Mat> = (0..n).map(|_| matrix(&mut rng, k, dims[1], 1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..q)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[n, k, dims[1]], feats.iter().flat_map(flatten).collect()).unwrap());
        let w = g.constant(tensor(&wv[1]));
        let l = id_loss_graph(&mut g, x, w, &labels);
        let want: f64 = feats
            .iter()
            .zip(&labels)
            .map(|(f, &y)| f.iter().map(|row| common::cross_entropy(row, &wv[1], y)).sum::<f64>() / k as f64)
            .sum();
        worst = worst.max(rel_err(g.scalar(l), want));
    }
    assert!(worst < TOL, "max relative error {worst:e}");
}

pub fn adaptive_margin_matches_formula() {
    let mut rng = common::rng(3);
    for _ in 0..1000 {
        let (s, w, a) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.01..1.0));
        let got = adaptive_margin(s, w, a);
        assert!(rel_err(got, common::alpha2(s, w, a)) < TOL);
        assert!(got >= a / 2.0 - 1e-15 && got <= a + 1e-15);
    }
}

pub fn compound_ranking_loss_matches_loops() {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = common::rng(4000 + seed);
        let b: usize = rng.random_range(2..8);
        let ids: Vec<usize> = (0..b).map(|_| rng.random_range(0..b.div_ceil(2) + 1)).collect();
        let mut alt = Vec::new();
        let mut rows = b;
        for _ in 0..b {
            if rng.random_bool(0.6) {
                alt.push(Some(rows));
                rows += 1;
            } else {
                alt.push(None);
            }
        }
        let s = matrix(&mut rng, rows, b, 1.5);
        let alpha1 = rng.random_range(0.05..0.5);
        let beta = rng.random_range(0.0..1.0);
        let weights = LossWeights { alpha1, beta, ..LossWeights::default() };
        let pids: Vec<PersonIdentity> = ids.iter().map(|&i| PersonIdentity(i)).collect();
        let batch = RankingBatch { identities: &pids, alt_rows: &alt };
        for (mining, hardest) in [(NegativeMining::Hardest, true), (NegativeMining::SumOverAll, false)] {
            let want = common::cr_loss(&s, &ids, &alt, alpha1, beta, hardest);
            let got = cr_loss(&tensor(&s), &batch, &weights, mining).unwrap().loss;
            worst = worst.max(rel_err(got, want));
            let mut g = Graph::new();
            let sv = g.constant(tensor(&s));
            let (l, _) = cr_loss_graph(&mut g, sv, &batch, &weights, mining).unwrap();
            worst = worst.max(rel_err(g.scalar(l), want));
        }
    }
    assert!(worst < TOL, "max relative error {worst:e}");
}

fn random_groups(rng: &mut rand_chacha::ChaCha8Rng, m: usize, r: usize, dims: [usize; 3]) -> (Vec<REMGroup>, Vec<Vec<Vec<(Mat, Mat)>>>) {
    let mut groups = Vec::new();
    let mut raw = Vec::new();
    for dir in [Direction::ImageToText, Direction::TextToImage] {
        let mut per_gran = Vec::new();
        for (gi, gran) in Granularity::ALL.into_iter().enumerate() {
            let c = dims[gi];
            let ws: Vec<(Mat, Mat)> = (0..m).map(|_| (matrix(rng, c, c / r, 1.0), matrix(rng, c / r, c, 1.0))).collect();
            let rems = ws.iter().map(|(a, b)| REMParams::new(tensor(a), tensor(b)).unwrap()).collect();
            groups.push(REMGroup::new(rems, dir, gran).unwrap());
            per_gran.push(ws);
        }
        raw.push(per_gran);
    }
    (groups, raw)
}

fn candidates(f: &Feats, ws: &[Vec<(Mat, Mat)>], m: usize) -> Vec<Feats> {
    (0..m)
        .map(|i| Feats {
            global: common::rem(&f.global, &ws[0][i].0, &ws[0][i].1),
            local: f.local.iter().map(|x| common::rem(x, &ws[1][i].0, &ws[1][i].1)).collect(),
            nonlocal: f.nonlocal.iter().map(|x| common::rem(x, &ws[2][i].0, &ws[2][i].1)).collect(),
        })
        .collect()
}

pub fn training_and_inference_similarity_match_loops() {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = common::rng(5000 + seed);
        let k = rng.random_range(2..5);
        let r = rng.random_range(1..3);
        let dims = [r * rng.random_range(1..4), r * rng.random_range(1..4), r * rng.random_range(1..4)];
        let m = rng.random_range(1..5);
        let (v, t) = (random_feats(&mut rng, k, dims), random_feats(&mut rng, k, dims));
        let (groups, raw) = random_groups(&mut rng, m, r, dims);
        let v_txt = candidates(&v, &raw[0], m);
        let t_img = candidates(&t, &raw[1], m);
        let emb = bidirectional_embed(&from_feats(&v), &from_feats(&t), &groups).unwrap();
        let w = LossWeights::default();
        let train = training_similarity(&from_feats(&v), &from_feats(&t), &emb, &w).unwrap();
        let infer = inference_similarity(&from_feats(&v), &from_feats(&t), &emb, &w).unwrap();
        worst = worst.max(rel_err(train, common::pair_similarity(&v, &t, &v_txt, &t_img, false)));
        worst = worst.max(rel_err(infer, common::pair_similarity(&v, &t, &v_txt, &t_img, true)));
    }
    assert!(worst < TOL, "max relative error {worst:e}");
}

pub fn batched_model_scores_match_per_pair_loops() {
    let ds = generate_synthetic(&SyntheticSpec::new(5, 2, 2, 0.1, 11)).unwrap();
    let cfg = TrainConfig::desk();
    let dims = DataDims { vocab_size: ds.vocab.len(), num_identities: ds.num_identities };
    let mut model = Model::new(cfg.clone(), dims, 7).unwrap();
    let mut rng = common::rng(77);
    let names: Vec<String> = model.params.names().into_iter().filter(|n| n.ends_with(".W2")).collect();
    for n in names {
        let shape = model.params.tensor(&n).shape().to_vec();
        model.params.insert(n, uniform(&shape, 0.2, &mut rng));
    }
    let rem_weights = |dir| -> Vec<Vec<(Mat, Mat)>> {
        Granularity::ALL
            .into_iter()
            .map(|g| {
                (0..cfg.m)
                    .map(|i| {
                        let get = |w| {
                            let t = model.params.tensor(&rem_name(dir, g, i, w));
                            t.data().chunks(t.dim(1)).map(<[f64]>::to_vec).collect::<Mat>()
                        };
                        (get("W1"), get("W2"))
                    })
                    .collect()
            })
            .collect()
    };
    let (v2t, t2v) = (rem_weights(Direction::ImageToText), rem_weights(Direction::TextToImage));
    let texts: Vec<_> = ds.texts.iter().collect();
    let images: Vec<_> = ds.images.iter().collect();
    let te = model.embed_texts(&texts).unwrap();
    let ie = model.embed_images(&images).unwrap();
    let sum = model.similarity(&te, &ie, Reduce::Sum).unwrap();
    let max = model.similarity(&te, &ie, Reduce::Max).unwrap();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (a, t) in ds.texts.iter().enumerate() {
        let tf = to_feats(&extract_text(t, &model.params, &cfg).unwrap());
        let t_img = candidates(&tf, &t2v, cfg.m);
        for (b, img) in ds.images.iter().enumerate() {
            let vf = to_feats(&extract_image(img, &model.params, &cfg).unwrap());
            let v_txt = candidates(&vf, &v2t, cfg.m);
            worst = worst.max(rel_err(sum.at2(a, b), common::pair_similarity(&vf, &tf, &v_txt, &t_img, false)));
            worst = worst.max(rel_err(max.at2(a, b), common::pair_similarity(&vf, &tf, &v_txt, &t_img, true)));
            count += 1;
        }
    }
    assert!(count >= 100);
    assert!(worst < TOL, "max relative error {worst:e}");
}

pub const ALL: &[(&str, fn())] = &[
    ("nonlocal_module_matches_loops", nonlocal_module_matches_loops),
    ("residual_embedding_matches_loops", residual_embedding_matches_loops),
    ("identity_loss_matches_loops", identity_loss_matches_loops),
    ("adaptive_margin_matches_formula", adaptive_margin_matches_formula),
    ("compound_ranking_loss_matches_loops", compound_ranking_loss_matches_loops),
    ("training_and_inference_similarity_match_loops", training_and_inference_similarity_match_loops),
    ("batched_model_scores_match_per_pair_loops", batched_model_scores_match_per_pair_loops),
];
