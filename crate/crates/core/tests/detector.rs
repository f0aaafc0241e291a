mod common;

use common::*;
use mint_core::aad::{StageId};
use mint_core::dataset::Membership;
use mint_core::detector::*;
use mint_core::Error;
use mint_tensor::{BatchNormStats, Mode, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn vanilla_parameter_count_and_structure() {
    let m = build_vanilla(VanillaMintConfig::default(), &[16], 1).unwrap();
    assert_eq!(m.param_count(), 16 * 128 + 128 + 2 * 128 + 128 + 1);
    let seq = m.layers();
    assert_eq!(
        seq,
        vec![
            Layer::Dense { inputs: 16, outputs: 128 },
            Layer::Relu,
            Layer::BatchNorm { features: 128 },
            Layer::Dropout { rate_millis: 500 },
            Layer::Dense { inputs: 128, outputs: 1 },
            Layer::Sigmoid,
        ]
    );
    // dense → BN → dropout → sigmoid appear in this order.
    let pos = |f: fn(&Layer) -> bool| seq.iter().position(f).unwrap();
    assert!(pos(|l| matches!(l, Layer::Dense { .. })) < pos(|l| matches!(l, Layer::BatchNorm { .. })));
    assert!(pos(|l| matches!(l, Layer::BatchNorm { .. })) < pos(|l| matches!(l, Layer::Dropout { .. })));
    assert!(pos(|l| matches!(l, Layer::Dropout { .. })) < pos(|l| matches!(l, Layer::Sigmoid)));
    match &m.config {
        DetectorConfig::Vanilla(c) => assert_eq!((c.l1, c.epochs, c.batch, c.lr), (0.1, 20, 128, 0.001)),
        _ => unreachable!(),
    }
}

#[test]
fn combination_input_dimension() {
    let cfg = VanillaMintConfig {
        sources: (1..=4).map(StageId::Stage).collect(),
        ..VanillaMintConfig::default()
    };
    let m = build_vanilla(cfg.clone(), &[16, 32, 64, 128], 1).unwrap();
    assert_eq!(m.input.dim(), 240);
    let mut with_outcome = cfg;
    with_outcome.sources.push(StageId::Outcome);
    assert_eq!(build_vanilla(with_outcome, &[16, 32, 64, 128, 128], 1).unwrap().input.dim(), 368);
    let empty = VanillaMintConfig { sources: vec![], ..VanillaMintConfig::default() };
    assert!(matches!(build_vanilla(empty, &[], 1), Err(Error::Config(_))));
}

#[test]
fn cnn_shapes_and_width_multiplier() {
    let m = build_cnn(CnnMintConfig::default(), [32, 32, 16], 1).unwrap();
    let seq = m.layers();
    assert_eq!(
        seq,
        vec![
            Layer::Conv { kernel: 5, in_channels: 16, filters: 64 },
            Layer::Relu,
            Layer::MaxPool { window: 2, stride: 2 },
            Layer::Flatten,
            Layer::Dense { inputs: 14 * 14 * 64, outputs: 16 },
            Layer::Relu,
            Layer::Dropout { rate_millis: 500 },
            Layer::Dense { inputs: 16, outputs: 1 },
            Layer::Sigmoid,
        ]
    );
    let wide = build_cnn(CnnMintConfig { width_multiplier: 3.0, ..CnnMintConfig::default() }, [32, 32, 16], 1).unwrap();
    assert_eq!(wide.params[2].shape(), &[14 * 14 * 64, 48]);
    let ratio = wide.param_count() as f64 / m.param_count() as f64;
    assert!((2.5..=3.0).contains(&ratio), "{ratio}");
    let err = build_cnn(CnnMintConfig::default(), [4, 4, 128], 1).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert_eq!(CnnMintConfig::default().fitted_kernel(4, 4), 3);
    assert!(build_cnn(CnnMintConfig { kernel: 3, ..CnnMintConfig::default() }, [4, 4, 128], 1).is_ok());
}

#[test]
fn same_seed_same_init() {
    let a = build_cnn(CnnMintConfig::default(), [8, 8, 4], 5).unwrap();
    let b = build_cnn(CnnMintConfig::default(), [8, 8, 4], 5).unwrap();
    let v1 = build_vanilla(VanillaMintConfig::default(), &[8], 5).unwrap();
    let v2 = build_vanilla(VanillaMintConfig::default(), &[8], 5).unwrap();
    for (p, q) in a.params.iter().zip(&b.params).chain(v1.params.iter().zip(&v2.params)) {
        assert_eq!(p.value, q.value);
    }
}

fn planted(m: Membership, rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let mut v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    v[0] = if m == Membership::D { 1.0 } else { -1.0 };
    v
}

fn quick_vanilla(sources: Vec<StageId>, epochs: usize) -> VanillaMintConfig {
    VanillaMintConfig { sources, epochs, ..VanillaMintConfig::default() }
}

#[test]
fn planted_separable_vanilla_reaches_099() {
    let split = simple_split(512, 200);
    let store = vector_store(&split, StageId::Stage(1), 8, 1, |m, r| planted(m, r, 8));
    let mut model = build_vanilla(quick_vanilla(vec![StageId::Stage(1)], 20), &[8], 2).unwrap();
    train_mint(&mut model, &store, &split, 3).unwrap();
    let ids: Vec<u64> = split.eval().map(|(i, _)| i).collect();
    let scores = predict_membership(&model, &store, &ids).unwrap();
    assert!(accuracy(&scores, &split) >= 0.99, "{}", accuracy(&scores, &split));
}

#[test]
fn zero_epochs_is_chance_on_uninformative_data() {
    let split = simple_split(256, 1000);
    let store = vector_store(&split, StageId::Stage(1), 8, 1, |_, r| (0..8).map(|_| r.gen()).collect());
    let mut model = build_vanilla(quick_vanilla(vec![StageId::Stage(1)], 0), &[8], 2).unwrap();
    let before = model.params.clone();
    let curve = train_mint(&mut model, &store, &split, 3).unwrap();
    assert!(curve.epochs.is_empty());
    assert_eq!(before[0].value, model.params[0].value);
    let ids: Vec<u64> = split.eval().map(|(i, _)| i).collect();
    let acc = accuracy(&predict_membership(&model, &store, &ids).unwrap(), &split);
    assert!((acc - 0.5).abs() <= 0.05, "{acc}");
}

#[test]
fn cnn_fixture_loss_drops_by_30_percent() {
    let split = simple_split(1024, 64);
    let store = block_store(&split, 1, [8, 8, 8], 7, |m, r| {
        (0..512)
            .map(|i| {
                let stripe = if m == Membership::D && (i / 64) % 2 == 0 { 0.5 } else { 0.0 };
                r.gen_range(0.0..1.0) + stripe
            })
            .collect()
    });
    let cfg = CnnMintConfig { epochs: 10, filters: 8, kernel: 3, ..CnnMintConfig::default() };
    let mut model = build_cnn(cfg, [8, 8, 8], 7).unwrap();
    let curve = train_mint(&mut model, &store, &split, 7).unwrap();
    assert!(curve.final_loss <= 0.7 * curve.initial, "{curve:?}");
}

#[test]
fn coverage_error_lists_missing_ids() {
    let split = simple_split(64, 8);
    let store = vector_store(&split, StageId::Stage(1), 4, 1, |m, r| planted(m, r, 4));
    let mut bigger = simple_split(64, 10);
    bigger.eval_d = (200_000..200_010).collect();
    let mut model = build_vanilla(quick_vanilla(vec![StageId::Stage(1)], 1), &[4], 2).unwrap();
    match train_mint(&mut model, &store, &bigger, 1) {
        Err(Error::Coverage { missing }) => {
            assert_eq!(missing.len(), 4);
            assert!(missing.contains(&200_008) && missing.contains(&300_009));
        }
        other => panic!("expected coverage error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn prediction_properties() {
    let split = simple_split(128, 64);
    let store = vector_store(&split, StageId::Stage(2), 6, 4, |m, r| planted(m, r, 6));
    let mut model = build_vanilla(quick_vanilla(vec![StageId::Stage(2)], 2), &[6], 2).unwrap();
    train_mint(&mut model, &store, &split, 1).unwrap();
    let ids: Vec<u64> = split.eval().map(|(i, _)| i).collect();
    let batch = predict_membership(&model, &store, &ids).unwrap();
    for (i, id) in ids.iter().enumerate().step_by(7) {
        let single = predict_membership(&model, &store, &[*id, *id]).unwrap();
        assert_eq!(single[0], single[1]);
        assert!((single[0] - batch[i]).abs() <= 1e-6);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::from_fn(&[10_000, 6], |_| rng.gen_range(-10.0f32..10.0));
    let s = model.predict_features(&x).unwrap();
    assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));

    let other = vector_store(&split, StageId::Stage(3), 6, 4, |m, r| planted(m, r, 6));
    assert!(matches!(predict_membership(&model, &other, &ids), Err(Error::Config(_))));
    let wrong_dim = vector_store(&split, StageId::Stage(2), 5, 4, |m, r| planted(m, r, 5));
    assert!(matches!(predict_membership(&model, &wrong_dim, &ids), Err(Error::Config(_))));
}

#[test]
fn outcome_baseline_is_outcome_only_vanilla() {
    let split = simple_split(512, 200);
    let store = vector_store(&split, StageId::Outcome, 16, 1, |m, r| planted(m, r, 16));
    let base = quick_vanilla(vec![StageId::Stage(1)], 20);
    let (model, _) = outcome_only_baseline(&store, &split, &base, 4).unwrap();
    let expect = build_vanilla(VanillaMintConfig { sources: vec![StageId::Outcome], ..base }, &[16], 4).unwrap();
    assert_eq!(model.config, expect.config);
    let ids: Vec<u64> = split.eval().map(|(i, _)| i).collect();
    let acc = accuracy(&predict_membership(&model, &store, &ids).unwrap(), &split);
    assert!(acc >= 0.99, "{acc}");
}

#[test]
fn zero_l1_loss_is_plain_bce() {
    let cfg = VanillaMintConfig { l1: 0.0, ..VanillaMintConfig::default() };
    let model = build_vanilla(cfg.clone(), &[5], 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(&[8, 5], |_| rng.gen::<f32>());
    let t: Vec<f32> = (0..8).map(|i| (i % 2) as f32).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = model.params.iter().map(|p| tape.param(p)).collect();
    let xv = tape.constant(x.clone());
    let mut stats = BatchNormStats::new(128);
    let mut r1 = ChaCha8Rng::seed_from_u64(5);
    let (loss, _) = loss_graph(&model.config, &mut tape, &vars, xv, &t, Some(&mut stats), Mode::Train, &mut r1).unwrap();

    let mut tape2 = Tape::new();
    let vars2: Vec<Var> = model.params.iter().map(|p| tape2.param(p)).collect();
    let xv2 = tape2.constant(x);
    let mut stats2 = BatchNormStats::new(128);
    let mut r2 = ChaCha8Rng::seed_from_u64(5);
    let p = vanilla_graph(&mut tape2, &vars2, xv2, &mut stats2, cfg.dropout, Mode::Train, &mut r2).unwrap();
    let bce = tape2.bce_loss(p, &t).unwrap();
    assert_eq!(tape.value(loss).data()[0].to_bits(), tape2.value(bce).data()[0].to_bits());
}

#[test]
fn training_is_seed_reproducible_and_checkpoints_round_trip() {
    let split = simple_split(128, 32);
    let store = block_store(&split, 2, [6, 6, 3], 2, |m, r| {
        (0..108).map(|_| r.gen_range(0.0..1.0) + if m == Membership::D { 0.2 } else { 0.0 }).collect()
    });
    let cfg = CnnMintConfig { epochs: 2, filters: 4, kernel: 3, stage: 2, batch: 32, ..CnnMintConfig::default() };
    let mut a = build_cnn(cfg.clone(), [6, 6, 3], 1).unwrap();
    let mut b = build_cnn(cfg, [6, 6, 3], 1).unwrap();
    train_mint(&mut a, &store, &split, 11).unwrap();
    train_mint(&mut b, &store, &split, 11).unwrap();
    for (p, q) in a.params.iter().zip(&b.params) {
        assert_eq!(p.value, q.value);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.mdl");
    let h1 = a.save(&path).unwrap();
    let (back, h2) = MintModel::load(&path).unwrap();
    assert_eq!(h1, h2);
    let ids: Vec<u64> = split.eval().map(|(i, _)| i).collect();
    assert_eq!(predict_membership(&a, &store, &ids).unwrap(), predict_membership(&back, &store, &ids).unwrap());

    let vsplit = simple_split(128, 16);
    let vstore = vector_store(&vsplit, StageId::Stage(1), 4, 1, |m, r| planted(m, r, 4));
    let mut v = build_vanilla(quick_vanilla(vec![StageId::Stage(1)], 2), &[4], 1).unwrap();
    train_mint(&mut v, &vstore, &vsplit, 1).unwrap();
    let path = dir.path().join("v.mdl");
    v.save(&path).unwrap();
    let (vb, _) = MintModel::load(&path).unwrap();
    assert_eq!(vb.bn, v.bn);
    let ids: Vec<u64> = vsplit.eval().map(|(i, _)| i).collect();
    assert_eq!(predict_membership(&v, &vstore, &ids).unwrap(), predict_membership(&vb, &vstore, &ids).unwrap());
}

#[test]
fn full_architectures_pass_gradient_checks() {
    for (name, err) in detector_gradient_suite(20, 3) {
        assert!(err <= 1e-4, "{name}: {err}");
    }
}
