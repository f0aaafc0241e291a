#![allow(dead_code)]

use std::collections::BTreeMap;

use mint_core::aad::{channel_max_pool, AadRecord, AadStore, StageId};
use mint_core::dataset::{ContentHash, Membership, SampleId, SplitSpec};
use mint_core::detector::*;
use mint_core::Error;
use mint_tensor::oracle::gradient_error;
use mint_tensor::{BatchNormStats, Mode, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fake_hash(id: SampleId) -> ContentHash {
    let mut h = [0u8; 32];
    h[..8].copy_from_slice(&id.to_le_bytes());
    ContentHash(h)
}

/// Split over consecutive ids: D-train, E-train, D-eval, E-eval.
pub fn simple_split(train: usize, eval: usize) -> SplitSpec {
    let ids = |base: u64, n: usize| (base..base + n as u64).collect::<Vec<_>>();
    let train_d = ids(0, train);
    let train_e = ids(100_000, train);
    let eval_d = ids(200_000, eval);
    let eval_e = ids(300_000, eval);
    let hashes: BTreeMap<SampleId, ContentHash> = train_d
        .iter()
        .chain(&train_e)
        .chain(&eval_d)
        .chain(&eval_e)
        .map(|&i| (i, fake_hash(i)))
        .collect();
    SplitSpec { seed: 0, train_d, train_e, eval_d, eval_e, hashes }
}

pub fn membership_of(split: &SplitSpec, id: SampleId) -> Membership {
    if split.train_d.contains(&id) || split.eval_d.contains(&id) {
        Membership::D
    } else {
        Membership::E
    }
}

/// Vector records for every split id; `f` produces the vector from (membership, rng).
pub fn vector_store(
    split: &SplitSpec,
    stage: StageId,
    dim: usize,
    seed: u64,
    f: impl Fn(Membership, &mut ChaCha8Rng) -> Vec<f32>,
) -> AadStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = split
        .all_ids()
        .map(|id| {
            let m = membership_of(split, id);
            let v = f(m, &mut rng);
            assert_eq!(v.len(), dim);
            AadRecord { sample_id: id, stage, membership: m, block: None, vector: v }
        })
        .collect();
    AadStore::new([0; 32], 32, records).unwrap()
}

/// Block records; `f` produces the block values.
pub fn block_store(
    split: &SplitSpec,
    stage: u8,
    shape: [usize; 3],
    seed: u64,
    f: impl Fn(Membership, &mut ChaCha8Rng) -> Vec<f32>,
) -> AadStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = split
        .all_ids()
        .map(|id| {
            let m = membership_of(split, id);
            let block = Tensor::new(&shape, f(m, &mut rng)).unwrap();
            AadRecord {
                sample_id: id,
                stage: StageId::Stage(stage),
                membership: m,
                vector: channel_max_pool(&block).unwrap().into_data(),
                block: Some(block),
            }
        })
        .collect();
    AadStore::new([0; 32], 32, records).unwrap()
}

pub fn accuracy(scores: &[f64], split: &SplitSpec) -> f64 {
    let ids: Vec<SampleId> = split.eval().map(|(i, _)| i).collect();
    assert_eq!(ids.len(), scores.len());
    let correct = split
        .eval()
        .zip(scores)
        .filter(|((_, m), &s)| (s >= DECISION_THRESHOLD) == (*m == Membership::D))
        .count();
    correct as f64 / scores.len() as f64
}

fn to_tensor_err(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::Usage(other.to_string()),
    }
}

/// Finite-difference check of the full training loss of one detector in f64,
/// with respect to every parameter and the input batch. Biases are redrawn
/// from U(−0.5, 0.5) so no ReLU sits exactly on its kink.
pub fn detector_gradient_error(model: &MintModel, rows: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_features(&model.input, rows, &mut rng).cast::<f64>();
    let targets: Vec<f64> = (0..rows).map(|i| (i % 2) as f64).collect();
    let mut inputs: Vec<Tensor<f64>> = model
        .params
        .iter()
        .map(|p| {
            if p.name.ends_with("bias") {
                Tensor::from_fn(p.value.shape(), |_| rng.gen_range(-0.5..0.5))
            } else {
                p.value.cast()
            }
        })
        .collect();
    inputs.push(x);
    let hidden = model.bn.as_ref().map(|b| b.mean.len());
    let config = model.config.clone();
    let build = move |tape: &mut Tape<f64>, vars: &[Var]| -> mint_tensor::Result<Var> {
        let mut stats = hidden.map(BatchNormStats::<f64>::new);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD0);
        let (loss, _) = loss_graph(
            &config,
            tape,
            &vars[..vars.len() - 1],
            vars[vars.len() - 1],
            &targets,
            stats.as_mut(),
            Mode::Train,
            &mut rng,
        )
        .map_err(to_tensor_err)?;
        Ok(loss)
    };
    gradient_error(&inputs, &build, seed).unwrap()
}

/// Worst finite-difference errors of the two detector architectures over
/// `configs` random configurations each.
pub fn detector_gradient_suite(configs: usize, seed: u64) -> [(&'static str, f64); 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut vanilla, mut cnn) = (0.0f64, 0.0f64);
    for i in 0..configs {
        let n_sources = rng.gen_range(1..=3);
        let dims: Vec<usize> = (0..n_sources).map(|_| rng.gen_range(2..7)).collect();
        let sources = [StageId::Stage(1), StageId::Stage(2), StageId::Outcome][..n_sources].to_vec();
        let cfg = VanillaMintConfig {
            sources,
            hidden: rng.gen_range(3..10),
            l1: [0.0, 0.1, 0.01][i % 3],
            ..VanillaMintConfig::default()
        };
        let model = build_vanilla(cfg, &dims, rng.gen()).unwrap();
        vanilla = vanilla.max(detector_gradient_error(&model, rng.gen_range(4..9), rng.gen()));

        let kernel = rng.gen_range(1..=5);
        let side = kernel + rng.gen_range(1..5);
        let shape = [side, side + rng.gen_range(0..2), rng.gen_range(1..4)];
        let cfg = CnnMintConfig {
            filters: rng.gen_range(1..5),
            kernel,
            width_multiplier: [1.0 / 3.0, 1.0, 3.0][i % 3],
            ..CnnMintConfig::default()
        };
        let model = build_cnn(cfg, shape, rng.gen()).unwrap();
        cnn = cnn.max(detector_gradient_error(&model, rng.gen_range(2..6), rng.gen()));
    }
    [("vanilla-detector", vanilla), ("cnn-detector", cnn)]
}
