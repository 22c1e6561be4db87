use crate::common;
use beat_core::autodiff::check::{relative_error, vector_relative_error};
use beat_core::autodiff::{Graph, Var};
use beat_core::config::{DataDims, Granularity, TrainConfig};
use beat_core::data::{generate_synthetic, sample_identity_batch, Batch, PairDataset, SyntheticSpec};
use beat_core::encoders::{
    global_head_graph, image_features, nonlocal_graph, nlm_name, text_features, visual_part_pool, word_attention_graph,
    Modality,
};
use beat_core::model::Model;
use beat_core::objectives::{space_similarity_graph, Space};
use beat_core::params::{uniform, Binder, Params};
use beat_core::remg::{rem_graph, remg_graph, rem_name, Direction};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn desk_setup() -> (PairDataset, Model, Batch) {
    let ds = generate_synthetic(&SyntheticSpec::new(8, 2, 2, 0.1, 5)).unwrap();
    let cfg = TrainConfig { batch_size: 4, ..TrainConfig::desk() };
    let dims = DataDims { vocab_size: ds.vocab.len(), num_identities: ds.num_identities };
    let mut model = Model::new(cfg, dims, 3).unwrap();
    let mut rng = common::rng(31);
    for name in model.params.names().into_iter().filter(|n| n.ends_with(".W2")) {
        let shape = model.params.tensor(&name).shape().to_vec();
        model.params.insert(name, uniform(&shape, 0.2, &mut rng));
    }
    let batch = sample_identity_batch(&ds, 4, &mut rng).unwrap();
    (ds, model, batch)
}

fn loss_value(model: &Model, ds: &PairDataset, batch: &Batch) -> f64 {
    let mut g = Graph::new();
    let mut b = Binder::frozen(&model.params);
    model.batch_loss(&mut g, &mut b, ds, batch, &[false; 4]).unwrap().breakdown.total
}

fn analytic(model: &Model, ds: &PairDataset, batch: &Batch) -> Vec<(String, Vec<f64>)> {
    let mut g = Graph::new();
    let mut b = model.binder();
    let loss = model.batch_loss(&mut g, &mut b, ds, batch, &[false; 4]).unwrap();
    let grads = g.backward(loss.total);
    b.bound()
        .map(|(n, &v)| {
            let len = model.params.tensor(n).len();
            (n.clone(), grads.get(v).map_or_else(|| vec![0.0; len], |t| t.data().to_vec()))
        })
        .collect()
}

fn shifted(model: &Model, name: &str, dir: &[f64], eps: f64) -> Model {
    let mut m = model.clone();
    for (p, d) in m.params.get_mut(name).unwrap().data_mut().iter_mut().zip(dir) {
        *p += eps * d;
    }
    m
}

pub fn total_loss_gradients_match_finite_differences() {
    let (ds, model, batch) = desk_setup();
    let grads = analytic(&model, &ds, &batch);
    assert_eq!(grads.len(), model.params.len(), "every parameter tensor takes part in the loss");
    let fd = |name: &str, dir: &[f64]| {
        let plus = loss_value(&shifted(&model, name, dir, STEP), &ds, &batch);
        let minus = loss_value(&shifted(&model, name, dir, -STEP), &ds, &batch);
        (plus - minus) / (2.0 * STEP)
    };
    let mut worst = (0.0, String::new());
    for (name, g) in &grads {
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 0.0, "'{name}' receives no gradient");
        let unit: Vec<f64> = g.iter().map(|x| x / norm).collect();
        let mut errs = vec![relative_error(norm, fd(name, &unit), 1e-6)];
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        for &i in order.iter().take(3) {
            let mut e = vec![0.0; g.len()];
            e[i] = 1.0;
            errs.push(relative_error(g[i], fd(name, &e), 1e-6));
        }
        let e = errs.into_iter().fold(0.0, f64::max);
        if e > worst.0 {
            worst = (e, name.clone());
        }
    }
    assert!(worst.0 < TOL, "relative error {:e} on '{}'", worst.0, worst.1);
}

/// Full-coordinate check of a scalar built from named tensors in `params`.
fn params_gradient_error(params: &Params, build: &dyn Fn(&mut Graph, &mut Binder) -> Var) -> f64 {
    let eval = |p: &Params| {
        let mut g = Graph::new();
        let mut b = Binder::frozen(p);
        let out = build(&mut g, &mut b);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let mut b = Binder::trainable(params);
    let out = build(&mut g, &mut b);
    let grads = g.backward(out);
    let bound: Vec<(String, Var)> = b.bound().map(|(n, &v)| (n.clone(), v)).collect();
    assert_eq!(bound.len(), params.len());
    let mut worst: f64 = 0.0;
    for (name, v) in bound {
        let t = params.tensor(&name);
        let a = grads.get(v).map_or_else(|| vec![0.0; t.len()], |x| x.data().to_vec());
        let mut work = params.clone();
        let num: Vec<f64> = (0..t.len())
            .map(|i| {
                let orig = t.data()[i];
                work.get_mut(&name).unwrap().data_mut()[i] = orig + STEP;
                let plus = eval(&work);
                work.get_mut(&name).unwrap().data_mut()[i] = orig - STEP;
                let minus = eval(&work);
                work.get_mut(&name).unwrap().data_mut()[i] = orig;
                (plus - minus) / (2.0 * STEP)
            })
            .collect();
        worst = worst.max(vector_relative_error(&a, &num, 1e-8));
    }
    worst
}

/// `sum(out * R)` for a fixed random `R`, so every output coordinate counts.
fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.value(out).shape().to_vec();
    let r = g.constant(uniform(&shape, 1.0, &mut common::rng(seed)));
    let p = g.mul(out, r);
    g.sum(p)
}

fn random_params(seed: u64, entries: &[(&str, &[usize])]) -> Params {
    let mut rng = common::rng(seed);
    let mut p = Params::new();
    for (name, shape) in entries {
        p.insert(*name, uniform(shape, 1.0, &mut rng));
    }
    p
}

pub fn global_head_gradients() {
    for seed in 0..5 {
        let p = random_params(seed, &[("x", &[2, 5, 6]), ("W_g", &[6, 4])]);
        let err = params_gradient_error(&p, &|g, b| {
            let x = b.get(g, "x");
            let w = b.get(g, "W_g");
            let out = global_head_graph(g, x, Some(&[5, 3]), w);
            project(g, out, 100 + seed)
        });
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}

pub fn visual_local_head_gradients() {
    for seed in 0..5 {
        let p = random_params(seed, &[("v", &[2, 6, 3, 4]), ("W_l", &[4, 5])]);
        let err = params_gradient_error(&p, &|g, b| {
            let v = b.get(g, "v");
            let pooled = visual_part_pool(g, v, 3);
            let w = b.get(g, "W_l");
            let out = g.matmul(pooled, w);
            project(g, out, 200 + seed)
        });
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}

pub fn word_attention_head_gradients() {
    for seed in 0..5 {
        let p = random_params(seed, &[("t", &[2, 5, 4]), ("queries", &[3, 4]), ("W_l", &[4, 4])]);
        let err = params_gradient_error(&p, &|g, b| {
            let t = b.get(g, "t");
            let q = b.get(g, "queries");
            let lens = [5, 2];
            let maps = word_attention_graph(g, t, &lens, q);
            let pooled: Vec<Var> = maps.iter().map(|&m| g.max_pool(m, Some(&lens))).collect();
            let pooled = g.stack(&pooled);
            let w = b.get(g, "W_l");
            let out = g.matmul(pooled, w);
            project(g, out, 300 + seed)
        });
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}

pub fn nonlocal_head_gradients() {
    let (k, c, d) = (3, 4, 3);
    for seed in 0..5 {
        let mut rng = common::rng(seed);
        let mut p = Params::new();
        p.insert("locals", uniform(&[2, k, c], 1.0, &mut rng));
        for part in 0..k {
            for w in ["alpha", "beta", "gamma"] {
                p.insert(nlm_name(Modality::Visual, part, w), uniform(&[c, c], 1.0, &mut rng));
            }
            p.insert(nlm_name(Modality::Visual, part, "delta"), uniform(&[c, d], 1.0, &mut rng));
        }
        let err = params_gradient_error(&p, &|g, b| {
            let x = b.get(g, "locals");
            let out = nonlocal_graph(g, b, x, Modality::Visual);
            project(g, out, 400 + seed)
        });
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}

pub fn rem_gradients_cover_inactive_rectifier_units() {
    let (c, r) = (8, 4);
    let mut inactive_seen = 0;
    for seed in 0..10 {
        let p = random_params(seed, &[("x", &[3, c]), ("W1", &[c, c / r]), ("W2", &[c / r, c])]);
        let h = {
            let mut g = Graph::new();
            let x = g.constant(p.tensor("x").clone());
            let w1 = g.constant(p.tensor("W1").clone());
            let h = g.matmul(x, w1);
            g.value(h).clone()
        };
        inactive_seen += h.data().iter().filter(|&&v| v < 0.0).count();
        let err = params_gradient_error(&p, &|g, b| {
            let x = b.get(g, "x");
            let w1 = b.get(g, "W1");
            let w2 = b.get(g, "W2");
            let out = rem_graph(g, x, w1, w2);
            project(g, out, 500 + seed)
        });
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
    assert!(inactive_seen > 0, "no instance exercised an inactive unit");
}

pub fn rem_group_gradients() {
    let (c, r, m) = (8, 4, 2);
    let mut rng = common::rng(9);
    let mut p = Params::new();
    p.insert("x", uniform(&[2, 3, c], 1.0, &mut rng));
    for idx in 0..m {
        p.insert(rem_name(Direction::ImageToText, Granularity::Local, idx, "W1"), uniform(&[c, c / r], 1.0, &mut rng));
        p.insert(rem_name(Direction::ImageToText, Granularity::Local, idx, "W2"), uniform(&[c / r, c], 1.0, &mut rng));
    }
    let err = params_gradient_error(&p, &|g, b| {
        let x = b.get(g, "x");
        let outs = remg_graph(g, b, x, Direction::ImageToText, Granularity::Local, m);
        let terms: Vec<Var> = outs.iter().enumerate().map(|(i, &o)| project(g, o, 600 + i as u64)).collect();
        g.add_all(&terms)
    });
    assert!(err < TOL, "{err:e}");
}

/// Gradients of the alignment term in one space only (`0` image space, `1` text space).
fn single_space_gradients(space: usize) -> Vec<(String, f64)> {
    let (ds, model, batch) = desk_setup();
    let mut g = Graph::new();
    let mut b = model.binder();
    let images: Vec<_> = batch.images.iter().map(|&i| &ds.images[i]).collect();
    let texts: Vec<_> = batch.texts.iter().map(|&i| &ds.texts[i]).collect();
    let vf = image_features(&mut g, &mut b, &images, &model.config).unwrap();
    let tf = text_features(&mut g, &mut b, &texts, &model.config).unwrap();
    let vs = model.project_graph(&mut g, &mut b, &vf, Modality::Visual);
    let ts = model.project_graph(&mut g, &mut b, &tf, Modality::Textual);
    let terms: Vec<Var> = vs
        .iter()
        .zip(&ts)
        .map(|(v, t)| {
            let s = Space { text: t.spaces[space].clone(), image: v.spaces[space].clone() };
            let sim = space_similarity_graph(&mut g, &s);
            project(&mut g, sim, 700)
        })
        .collect();
    let root = g.add_all(&terms);
    let grads = g.backward(root);
    b.bound()
        .map(|(n, &v)| (n.clone(), grads.get(v).map_or(0.0, |t| t.data().iter().map(|x| x.abs()).sum())))
        .collect()
}

fn mass(grads: &[(String, f64)], prefix: &str) -> (f64, usize) {
    let hits: Vec<f64> = grads.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, m)| *m).collect();
    (hits.iter().sum(), hits.len())
}

pub fn text_space_alignment_leaves_text_to_image_groups_untouched() {
    let grads = single_space_gradients(1);
    let (t2v, _) = mass(&grads, "remg.t2v.");
    assert_eq!(t2v, 0.0);
    let (v2t, n) = mass(&grads, "remg.v2t.");
    assert!(n > 0 && v2t > 0.0);
    assert!(mass(&grads, "enc.vis.").0 > 0.0);
    assert!(mass(&grads, "enc.txt.").0 > 0.0, "fixed targets still train their own encoder");
}

pub fn image_space_alignment_leaves_image_to_text_groups_untouched() {
    let grads = single_space_gradients(0);
    let (v2t, _) = mass(&grads, "remg.v2t.");
    assert_eq!(v2t, 0.0);
    let (t2v, n) = mass(&grads, "remg.t2v.");
    assert!(n > 0 && t2v > 0.0);
    assert!(mass(&grads, "enc.txt.").0 > 0.0);
    assert!(mass(&grads, "enc.vis.").0 > 0.0);
}

pub const ALL: &[(&str, fn())] = &[
    ("total_loss_gradients_match_finite_differences", total_loss_gradients_match_finite_differences),
    ("global_head_gradients", global_head_gradients),
    ("visual_local_head_gradients", visual_local_head_gradients),
    ("word_attention_head_gradients", word_attention_head_gradients),
    ("nonlocal_head_gradients", nonlocal_head_gradients),
    ("rem_gradients_cover_inactive_rectifier_units", rem_gradients_cover_inactive_rectifier_units),
    ("rem_group_gradients", rem_group_gradients),
    ("text_space_alignment_leaves_text_to_image_groups_untouched", text_space_alignment_leaves_text_to_image_groups_untouched),
    ("image_space_alignment_leaves_image_to_text_groups_untouched", image_space_alignment_leaves_image_to_text_groups_untouched),
];
