use mint_core::aad::*;
use mint_core::audited::{build_model, AuditedModel, AuditedModelConfig};
use mint_core::dataset::{Membership, RawImage};
use mint_core::Error;
use mint_tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loop_max(block: &Tensor<f32>) -> Vec<f32> {
    let [h, w, c] = [block.shape()[0], block.shape()[1], block.shape()[2]];
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let mut m = f32::NEG_INFINITY;
        for y in 0..h {
            for x in 0..w {
                m = m.max(block.data()[(y * w + x) * c + ch]);
            }
        }
        out.push(m);
    }
    out
}

#[test]
fn channel_max_shape_contract() {
    let b = Tensor::from_fn(&[56, 56, 64], |i| (i % 97) as f32);
    assert_eq!(channel_max_pool(&b).unwrap().shape(), &[64]);
}

#[test]
fn channel_max_matches_loop_oracle_on_1000_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let shape = [rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..17)];
        let b = Tensor::from_fn(&shape, |_| rng.gen_range(-5.0f32..5.0));
        assert_eq!(channel_max_pool(&b).unwrap().data(), loop_max(&b).as_slice());
    }
}

proptest! {
    #[test]
    fn channel_max_permutation_invariant_and_monotone(
        h in 1usize..6, w in 1usize..6, c in 1usize..5, seed in any::<u64>(), shift in 0.0f32..10.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Tensor::from_fn(&[h, w, c], |_| rng.gen_range(-3.0f32..3.0));
        let base = channel_max_pool(&b).unwrap();
        let mut order: Vec<usize> = (0..h * w).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut shuffled = Vec::with_capacity(b.len());
        for &p in &order {
            shuffled.extend_from_slice(&b.data()[p * c..(p + 1) * c]);
        }
        let s = Tensor::new(&[h, w, c], shuffled).unwrap();
        prop_assert_eq!(channel_max_pool(&s).unwrap(), base.clone());
        let plus = channel_max_pool(&b.map(|v| v + shift)).unwrap();
        for (a, m) in plus.data().iter().zip(base.data()) {
            prop_assert_eq!(*a, m + shift);
        }
    }
}

fn images(n: usize, seed: u64) -> Vec<RawImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| RawImage { height: 40, width: 40, pixels: (0..40 * 40 * 3).map(|_| rng.gen()).collect() })
        .collect()
}

fn inputs(imgs: &[RawImage]) -> Vec<AadInput<'_>> {
    imgs.iter()
        .enumerate()
        .map(|(i, image)| AadInput {
            sample_id: 100 - i as u64,
            membership: if i % 2 == 0 { Membership::D } else { Membership::E },
            image,
        })
        .collect()
}

#[test]
fn extraction_counts_shapes_and_order() {
    let m = build_model(AuditedModelConfig::default(), 2).unwrap();
    let imgs = images(10, 3);
    let store = extract_aad(&m, [1; 32], &inputs(&imgs), &[StageId::Stage(4), StageId::Stage(1)], true).unwrap();
    assert_eq!(store.len(), 20);
    assert_eq!(store.block_shape(StageId::Stage(1)), Some([32, 32, 16]));
    assert_eq!(store.block_shape(StageId::Stage(4)), Some([4, 4, 128]));
    let keys: Vec<(StageId, u64)> = store.records().iter().map(|r| (r.stage, r.sample_id)).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    for r in store.records() {
        assert_eq!(r.vector, channel_max_pool(r.block.as_ref().unwrap()).unwrap().into_data());
    }
    assert_eq!(store.get(StageId::Stage(1), 100).unwrap().membership, Membership::D);

    let outcome = extract_aad(&m, [1; 32], &inputs(&imgs), &[StageId::Outcome], true).unwrap();
    assert_eq!(outcome.len(), 10);
    assert!(outcome.records().iter().all(|r| r.block.is_none() && r.vector.len() == 128));

    let vec_only = extract_aad(&m, [1; 32], &inputs(&imgs), &[StageId::Stage(2)], false).unwrap();
    assert!(vec_only.records().iter().all(|r| r.block.is_none() && r.vector.len() == 32));

    let err = extract_aad(&m, [1; 32], &inputs(&imgs), &[StageId::Stage(5)], false).unwrap_err();
    assert!(matches!(err, Error::Parameter(_)));
}

#[test]
fn reextraction_from_reloaded_checkpoint_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = build_model(AuditedModelConfig::default(), 4).unwrap();
    let hash = m.save_checkpoint(&path).unwrap();
    let (back, h2) = AuditedModel::load_checkpoint(&path).unwrap();
    let imgs = images(6, 5);
    let stages = [StageId::Stage(1), StageId::Stage(3), StageId::Outcome];
    let a = extract_aad(&m, hash, &inputs(&imgs), &stages, true).unwrap();
    let b = extract_aad(&back, h2, &inputs(&imgs), &stages, true).unwrap();
    assert_eq!(a.encode(), b.encode());
}

fn random_store(n: usize, seed: u64) -> AadStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for i in 0..n as u64 {
        let block = Tensor::from_fn(&[3, 2, 4], |_| rng.gen_range(-1.0f32..1.0));
        records.push(AadRecord {
            sample_id: i,
            stage: StageId::Stage(2),
            membership: if i % 3 == 0 { Membership::D } else { Membership::E },
            vector: channel_max_pool(&block).unwrap().into_data(),
            block: Some(block),
        });
        records.push(AadRecord {
            sample_id: i,
            stage: StageId::Outcome,
            membership: if i % 3 == 0 { Membership::D } else { Membership::E },
            vector: (0..8).map(|_| rng.gen()).collect(),
            block: None,
        });
    }
    AadStore::new([7; 32], 32, records).unwrap()
}

#[test]
fn store_round_trip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.aad");
    let store = random_store(50, 1);
    assert_eq!(store.len(), 100);
    write_store(&store, &path).unwrap();
    assert_eq!(read_store(&path, Some(&[7; 32])).unwrap(), store);

    let err = read_store(&path, Some(&[8; 32])).unwrap_err();
    assert!(matches!(err, Error::Provenance(_)));

    let bytes = std::fs::read(&path).unwrap();
    let count_at = 8 + 4 + 32 + 4;
    for delta in [1i64, -1] {
        let mut tampered = bytes.clone();
        let c = u32::from_le_bytes(tampered[count_at..count_at + 4].try_into().unwrap()) as i64 + delta;
        tampered[count_at..count_at + 4].copy_from_slice(&(c as u32).to_le_bytes());
        assert!(matches!(AadStore::decode(&tampered, None), Err(Error::Format { .. })));
    }
    assert!(matches!(AadStore::decode(&bytes[..bytes.len() - 3], None), Err(Error::Format { .. })));

    // A block whose vector no longer matches is rejected.
    let mut tampered = bytes.clone();
    let first_vector = count_at + 4 + 8 + 1 + 1 + 12;
    tampered[first_vector..first_vector + 4].copy_from_slice(&9.0f32.to_le_bytes());
    assert!(AadStore::decode(&tampered, None).is_err());
}

#[test]
fn stage1_store_size_accounting() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let records = (0..1000u64)
        .map(|i| {
            let block = Tensor::from_fn(&[32, 32, 16], |_| rng.gen::<f32>());
            AadRecord {
                sample_id: i,
                stage: StageId::Stage(1),
                membership: Membership::E,
                vector: channel_max_pool(&block).unwrap().into_data(),
                block: Some(block),
            }
        })
        .collect();
    let store = AadStore::new([0; 32], 32, records).unwrap();
    let size = store.encode().len() as f64;
    let payload = 1000.0 * (32.0 * 32.0 * 16.0 * 4.0);
    assert!(size >= payload && size <= payload * 1.05, "{size}");
}
