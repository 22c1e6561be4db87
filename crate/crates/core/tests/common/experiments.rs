use beat_core::ablation::{run_ablation, AblationMatrix};
use beat_core::config::{DataDims, Granularity, SpaceConfig, TrainConfig};
use beat_core::data::{generate_synthetic, PairDataset, SyntheticSpec};
use beat_core::eval::evaluate_dataset;
use beat_core::model::Model;
use beat_core::objectives::{combine_granularities, inference_similarity, space_similarity, training_similarity, Reduce, Space};
use beat_core::params::uniform;
use beat_core::remg::{bidirectional_embed, Direction, REMGroup};
use beat_core::train::{dims_of, epoch_means, train};
use beat_core::Tensor;

use crate::common;

pub const SEEDS: u64 = 5;

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Training identities and a disjoint draw of evaluation identities for seed `s`.
pub fn held_out(s: u64) -> (PairDataset, PairDataset) {
    let train_set = generate_synthetic(&SyntheticSpec::new(32, 4, 4, 0.1, 100 + s)).unwrap();
    let eval_set = generate_synthetic(&SyntheticSpec::new(32, 4, 4, 0.1, 900 + s)).unwrap();
    (train_set, eval_set)
}

pub fn baseline(base: &TrainConfig) -> TrainConfig {
    TrainConfig { spaces: SpaceConfig::MODAL_SHARED, ..base.clone() }
}

/// Per-seed held-out R@1 of BEAT and of the modal-shared baseline.
pub fn directional_benchmark(mut on_seed: impl FnMut(u64, f64, f64)) -> (Vec<f64>, Vec<f64>) {
    let (mut beat, mut base) = (Vec::new(), Vec::new());
    for s in 0..SEEDS {
        let (train_set, eval_set) = held_out(s);
        let cfg = TrainConfig { seed: s, ..TrainConfig::desk() };
        let r1 = |c: TrainConfig| evaluate_dataset(&train(&train_set, c).unwrap().trainer.model, &eval_set).unwrap().r1();
        let (a, b) = (r1(cfg.clone()), r1(baseline(&cfg)));
        on_seed(s, a, b);
        beat.push(a);
        base.push(b);
    }
    (beat, base)
}

/// Per-seed held-out R@1 of the loss matrix rows, keyed by row label.
pub fn loss_ablation(mut on_seed: impl FnMut(u64, &[(String, f64)])) -> Vec<(String, Vec<f64>)> {
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for s in 0..SEEDS {
        let (train_set, eval_set) = held_out(s);
        let cfg = TrainConfig { seed: s, ..TrainConfig::desk() };
        let rows = run_ablation(&train_set, &eval_set, &cfg, AblationMatrix::Losses, |_| {}).unwrap();
        let scores: Vec<(String, f64)> = rows.iter().map(|r| (r.row.label.clone(), r.report.r1())).collect();
        on_seed(s, &scores);
        for (label, r1) in scores {
            match out.iter_mut().find(|(l, _)| *l == label) {
                Some((_, v)) => v.push(r1),
                None => out.push((label, vec![r1])),
            }
        }
    }
    out
}

fn dims() -> DataDims {
    DataDims { vocab_size: 22, num_identities: 8 }
}

pub fn parameter_parity() {
    for c_in in [16, 64] {
        for (m, r) in [(4, 8), (2, 4)] {
            let cfg = TrainConfig { m, r, c_g: c_in, c_l: c_in, c_n: c_in, ..TrainConfig::desk() };
            assert!(cfg.has_parameter_parity());
            let beat = Model::new(cfg.clone(), dims(), 0).unwrap();
            let base = Model::new(baseline(&cfg), dims(), 0).unwrap();
            assert_eq!(
                beat.trainable_count(),
                base.trainable_count(),
                "C_in={c_in} M={m} r={r}: BEAT {} vs baseline {}",
                beat.trainable_count(),
                base.trainable_count()
            );
            let rem = beat.params.count_where(|n| n.starts_with("remg."));
            let shared = base.params.count_where(|n| n.starts_with("shared."));
            assert_eq!(rem, shared);
            assert_eq!(rem, 2 * Granularity::ALL.len() * c_in * c_in);
        }
    }
}

fn small_set() -> PairDataset {
    generate_synthetic(&SyntheticSpec::new(4, 2, 2, 0.1, 21)).unwrap()
}

fn randomize_w2(model: &mut Model, seed: u64) {
    let mut rng = common::rng(seed);
    for name in model.params.names().into_iter().filter(|n| n.ends_with(".W2")) {
        let shape = model.params.tensor(&name).shape().to_vec();
        model.params.insert(name, uniform(&shape, 0.3, &mut rng));
    }
}

fn scores(model: &Model, ds: &PairDataset, reduce: Reduce) -> Tensor {
    let texts: Vec<_> = ds.texts.iter().collect();
    let images: Vec<_> = ds.images.iter().collect();
    let t = model.embed_texts(&texts).unwrap();
    let v = model.embed_images(&images).unwrap();
    model.similarity(&t, &v, reduce).unwrap()
}

/// With one REM per group, training and inference similarity agree bit for bit.
pub fn single_member_collapse() {
    let ds = small_set();
    let cfg = TrainConfig { m: 1, ..TrainConfig::desk() };
    let mut model = Model::new(cfg.clone(), dims_of(&ds), 4).unwrap();
    randomize_w2(&mut model, 44);
    assert_eq!(scores(&model, &ds, Reduce::Sum), scores(&model, &ds, Reduce::Max));

    let groups: Vec<REMGroup> = [Direction::ImageToText, Direction::TextToImage]
        .into_iter()
        .flat_map(|d| Granularity::ALL.map(|g| REMGroup::from_params(&model.params, d, g, 1).unwrap()))
        .collect();
    let mut pairs = 0;
    for img in &ds.images {
        let v = beat_core::encoders::extract_image(img, &model.params, &cfg).unwrap();
        for txt in &ds.texts {
            let t = beat_core::encoders::extract_text(txt, &model.params, &cfg).unwrap();
            let e = bidirectional_embed(&v, &t, &groups).unwrap();
            let train_s = training_similarity(&v, &t, &e, &cfg.weights).unwrap();
            let infer_s = inference_similarity(&v, &t, &e, &cfg.weights).unwrap();
            assert_eq!(train_s.to_bits(), infer_s.to_bits());
            pairs += 1;
        }
    }
    assert_eq!(pairs, ds.images.len() * ds.texts.len());
}

/// Freshly initialized REMs are identities, so BEAT scores reduce to the
/// raw-feature cosine counted once per space.
pub fn zero_initialized_rems_reduce_to_raw_alignment() {
    let ds = small_set();
    let model = Model::new(TrainConfig::desk(), dims_of(&ds), 6).unwrap();
    assert!(model.params.iter().filter(|(n, _)| n.ends_with(".W2")).all(|(_, t)| t.data().iter().all(|&x| x == 0.0)));
    let texts: Vec<_> = ds.texts.iter().collect();
    let images: Vec<_> = ds.images.iter().collect();
    let t = model.embed_texts(&texts).unwrap();
    let v = model.embed_images(&images).unwrap();
    let mut parts = Vec::new();
    for (ts, vs) in t.iter().zip(&v) {
        let raw = Space { text: vec![ts.raw.clone()], image: vec![vs.raw.clone()] };
        let once = space_similarity(&raw, Reduce::Max).unwrap();
        let twice = Tensor::new(once.shape(), once.data().iter().map(|x| x + x).collect()).unwrap();
        parts.push((ts.granularity, twice));
    }
    let want = combine_granularities(&parts, &model.config.weights).unwrap();
    assert_eq!(model.similarity(&t, &v, Reduce::Max).unwrap(), want);

    let m = model.config.m as f64;
    let sum = model.similarity(&t, &v, Reduce::Sum).unwrap();
    for (a, b) in sum.data().iter().zip(want.data()) {
        assert!((a - m * b).abs() <= 1e-12 * (1.0 + b.abs() * m), "{a} vs {m} x {b}");
    }
}

/// Median over seeds of the mean total loss in epoch 1 and epoch 10.
pub fn loss_curve_endpoints() -> (f64, f64) {
    let ds = generate_synthetic(&SyntheticSpec::new(16, 4, 4, 0.1, 3)).unwrap();
    let (mut first, mut last) = (Vec::new(), Vec::new());
    for s in 0..SEEDS {
        let out = train(&ds, TrainConfig { epochs: 10, seed: s, ..TrainConfig::desk() }).unwrap();
        let means = epoch_means(&out.history);
        assert_eq!(means.len(), 10);
        first.push(means[0]);
        last.push(means[9]);
    }
    (median(&first), median(&last))
}

pub fn loss_decreases_over_training() {
    let (first, last) = loss_curve_endpoints();
    assert!(last < first, "epoch 10 mean loss {last} is not below epoch 1 mean loss {first}");
}

/// Same data, config and seed give identical parameters, histories and reports.
pub fn training_is_deterministic() {
    let ds = small_set();
    let cfg = TrainConfig { batch_size: 4, epochs: 2, ..TrainConfig::desk() };
    let a = train(&ds, cfg.clone()).unwrap();
    let b = train(&ds, cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.trainer.model.params, b.trainer.model.params);
    assert_eq!(a.trainer.optimizer, b.trainer.optimizer);
    assert_eq!(evaluate_dataset(&a.trainer.model, &ds).unwrap(), evaluate_dataset(&b.trainer.model, &ds).unwrap());
}

pub const ALL: &[(&str, fn())] = &[
    ("parameter_parity", parameter_parity),
    ("single_member_collapse", single_member_collapse),
    ("zero_initialized_rems_reduce_to_raw_alignment", zero_initialized_rems_reduce_to_raw_alignment),
    ("loss_decreases_over_training", loss_decreases_over_training),
    ("training_is_deterministic", training_is_deterministic),
];
