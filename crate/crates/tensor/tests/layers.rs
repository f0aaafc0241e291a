use mint_tensor::oracle;
use mint_tensor::{
    Activation, Adam, BatchNormStats, Conv2dSpec, Mode, Parameter, Tape, Tensor, TensorError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t32(shape: &[usize], data: &[f32]) -> Tensor<f32> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn rel_close_f32(got: &[f32], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        let denom = w.abs().max(1.0);
        assert!(((*g as f64) - w).abs() / denom <= tol, "{g} vs {w}");
    }
}

#[test]
fn dense_identity_and_bias_only() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t32(&[1, 2], &[1.0, 2.0]));
    let w = tape.constant(t32(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(t32(&[2], &[0.0, 0.0]));
    let y = tape.dense(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

    let w0 = tape.constant(Tensor::zeros(&[2, 2]));
    let b2 = tape.constant(t32(&[2], &[3.0, 4.0]));
    let y = tape.dense(x, w0, b2).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
}

#[test]
fn dense_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (x, w, b) = (rand_vec(&mut rng, 6), rand_vec(&mut rng, 6), rand_vec(&mut rng, 2));
    let want = oracle::dense(&x, 2, 3, &w, 2, &b);
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(Tensor::new(&[2, 3], x).unwrap().cast());
    let wv = tape.constant(Tensor::new(&[3, 2], w).unwrap().cast());
    let bv = tape.constant(Tensor::new(&[2], b).unwrap().cast());
    let y = tape.dense(xv, wv, bv).unwrap();
    rel_close_f32(tape.value(y).data(), &want, 1e-5);
}

#[test]
fn dense_shape_mismatch() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[2, 3]));
    let w = tape.constant(Tensor::zeros(&[4, 2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(tape.dense(x, w, b), Err(TensorError::Dimension { .. })));
}

#[test]
fn conv_identity_and_bias_only() {
    let mut tape = Tape::<f32>::new();
    let img: Vec<f32> = (0..9).map(|i| i as f32).collect();
    let x = tape.constant(t32(&[1, 3, 3, 1], &img));
    let k = tape.constant(t32(&[1, 1, 1, 1], &[1.0]));
    let b = tape.constant(t32(&[1], &[0.0]));
    let y = tape.conv2d(x, k, b, Conv2dSpec::default()).unwrap();
    assert_eq!(tape.value(y).data(), &img[..]);

    let z = tape.constant(Tensor::zeros(&[1, 5, 5, 2]));
    let k = tape.constant(Tensor::from_fn(&[3, 3, 2, 3], |i| i as f32 * 0.1));
    let b = tape.constant(Tensor::full(&[3], 0.5));
    let y = tape.conv2d(z, k, b, Conv2dSpec::default()).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 3, 3, 3]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.5));
}

#[test]
fn conv_matches_direct_correlation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
        let (x, k, b) = (rand_vec(&mut rng, 32), rand_vec(&mut rng, 36), rand_vec(&mut rng, 2));
        let (want, oshape) = oracle::conv2d(&x, [1, 4, 4, 2], &k, [3, 3, 2], &b, stride, pad);
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(Tensor::new(&[1, 4, 4, 2], x).unwrap().cast());
        let kv = tape.constant(Tensor::new(&[3, 3, 2, 2], k).unwrap().cast());
        let bv = tape.constant(Tensor::new(&[2], b).unwrap().cast());
        let y = tape.conv2d(xv, kv, bv, Conv2dSpec { stride, padding: pad }).unwrap();
        assert_eq!(tape.value(y).shape(), &oshape);
        rel_close_f32(tape.value(y).data(), &want, 1e-5);
    }
}

#[test]
fn conv_kernel_too_large() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 3, 1]));
    let k = tape.constant(Tensor::zeros(&[5, 5, 1, 1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(
        tape.conv2d(x, k, b, Conv2dSpec::default()),
        Err(TensorError::Dimension { .. })
    ));
    // Padding makes it fit.
    assert!(tape.conv2d(x, k, b, Conv2dSpec { stride: 1, padding: 1 }).is_ok());
}

#[test]
fn maxpool_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[1, 4, 4, 2], 7.0));
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 2, 2, 2]);
    assert!(tape.value(y).data().iter().all(|&v| v == 7.0));

    let x = tape.constant(t32(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);

    assert!(matches!(tape.maxpool2d(x, 3, 1), Err(TensorError::Dimension { .. })));
}

#[test]
fn maxpool_matches_window_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = rand_vec(&mut rng, 6 * 6 * 3).iter().map(|&v| v as f32 as f64).collect();
    let want = oracle::maxpool2d(&x, [1, 6, 6, 3], 2, 2);
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(Tensor::new(&[1, 6, 6, 3], x).unwrap().cast());
    let y = tape.maxpool2d(xv, 2, 2).unwrap();
    rel_close_f32(tape.value(y).data(), &want, 0.0);
}

#[test]
fn maxpool_tie_routes_gradient_to_first_maximum() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full(&[1, 2, 2, 1], 1.0));
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn activation_values() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(t32(&[3], &[-1.0, 2.0, 0.0]));
    let r = tape.activation(x, Activation::Relu).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0]);
    let s = tape.activation(x, Activation::Sigmoid).unwrap();
    assert_eq!(tape.value(s).data()[2], 0.5);

    let extreme = tape.constant(t32(&[4], &[-1e4, -90.0, 40.0, 1e4]));
    let s = tape.sigmoid(extreme).unwrap();
    assert!(tape.value(s).data().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn batchnorm_degenerate_and_normalizing() {
    let mut stats = BatchNormStats::<f64>::new(2);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(&[4, 2], vec![3.0, 1.0, 3.0, 2.0, 3.0, 5.0, 3.0, 9.0]).unwrap());
    let gamma = tape.constant(Tensor::full(&[2], 1.0));
    let beta = tape.constant(Tensor::zeros(&[2]));
    let y = tape.batchnorm1d(x, gamma, beta, &mut stats, Mode::Train).unwrap();
    let out = tape.value(y).data().to_vec();
    let col0: Vec<f64> = out.iter().step_by(2).copied().collect();
    assert!(col0.iter().all(|v| *v == 0.0));
    let col1: Vec<f64> = out.iter().skip(1).step_by(2).copied().collect();
    let mean = col1.iter().sum::<f64>() / 4.0;
    let var = col1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-5);
    assert!((var - 1.0).abs() < 1e-5);
    // Running stats moved 10% towards the batch statistics.
    assert!((stats.mean[0] - 0.3).abs() < 1e-12);
}

#[test]
fn batchnorm_train_needs_two_rows_and_eval_is_deterministic() {
    let mut stats = BatchNormStats::<f32>::new(3);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_fn(&[1, 3], |i| i as f32));
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(
        tape.batchnorm1d(x, g, b, &mut stats, Mode::Train),
        Err(TensorError::BatchSize { min: 2, got: 1, .. })
    ));
    let y1 = tape.batchnorm1d(x, g, b, &mut stats, Mode::Eval).unwrap();
    let y2 = tape.batchnorm1d(x, g, b, &mut stats, Mode::Eval).unwrap();
    assert_eq!(tape.value(y1), tape.value(y2));
}

#[test]
fn dropout_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_fn(&[10, 10], |i| i as f32));
    assert_eq!(tape.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap(), x);
    let y = tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
    assert!(matches!(
        tape.dropout(x, 1.0, Mode::Train, &mut rng),
        Err(TensorError::Parameter { .. })
    ));
}

#[test]
fn dropout_survivor_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut tape = Tape::<f32>::new();
    let n = 100_000;
    let x = tape.constant(Tensor::full(&[n], 1.0));
    let y = tape.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
    let out = tape.value(y).data();
    let survivors: Vec<f32> = out.iter().copied().filter(|&v| v != 0.0).collect();
    let frac = survivors.len() as f64 / n as f64;
    assert!((frac - 0.5).abs() <= 0.01, "survivor fraction {frac}");
    let mean = survivors.iter().map(|&v| v as f64).sum::<f64>() / survivors.len() as f64;
    assert!((mean - 2.0).abs() / 2.0 <= 0.02);
}

#[test]
fn dropout_same_seed_same_mask() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[64], |i| i as f32));
        let y = tape.dropout(x, 0.3, Mode::Train, &mut rng).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn bce_examples() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::new(&[4], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
    let l = tape.bce_loss(p, &[1.0, 0.0, 1.0, 0.0]).unwrap();
    assert!(tape.value(l).data()[0] <= 1e-6);

    let half = tape.constant(Tensor::full(&[6], 0.5));
    let l = tape.bce_loss(half, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
    assert!((tape.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);

    assert!(matches!(tape.bce_loss(half, &[0.5; 6]), Err(TensorError::Label { .. })));
}

#[test]
fn bce_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p: Vec<f64> = (0..17).map(|_| rng.gen_range(0.01..0.99)).collect();
    let t: Vec<f64> = (0..17).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
    let want = -p
        .iter()
        .zip(&t)
        .map(|(p, t)| t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        .sum::<f64>()
        / 17.0;
    let mut tape = Tape::<f64>::new();
    let pv = tape.constant(Tensor::new(&[17, 1], p).unwrap());
    let l = tape.bce_loss(pv, &t).unwrap();
    assert!((tape.value(l).data()[0] - want).abs() <= 1e-12);
}

#[test]
fn softmax_ce_examples() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::full(&[3, 4], 0.7));
    let l = tape.softmax_cross_entropy(z, &[0, 1, 3]).unwrap();
    assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);

    let z = tape.constant(Tensor::new(&[1, 3], vec![1000.0, 0.0, -5.0]).unwrap());
    let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
    assert!(tape.value(l).data()[0].abs() < 1e-12);

    assert!(matches!(tape.softmax_cross_entropy(z, &[3]), Err(TensorError::Label { .. })));
}

#[test]
fn softmax_ce_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let z = rand_vec(&mut rng, 15).iter().map(|v| v * 4.0).collect::<Vec<_>>();
    let labels = [4usize, 0, 2];
    let want = (0..3)
        .map(|i| {
            let row = &z[i * 5..(i + 1) * 5];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[labels[i]].exp() / denom).ln()
        })
        .sum::<f64>()
        / 3.0;
    let mut tape = Tape::<f64>::new();
    let zv = tape.constant(Tensor::new(&[3, 5], z).unwrap());
    let l = tape.softmax_cross_entropy(zv, &labels).unwrap();
    assert!((tape.value(l).data()[0] - want).abs() <= 1e-10);
}

#[test]
fn l1_examples() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros(&[3]));
    let l = tape.l1_penalty(z, 0.1).unwrap();
    assert_eq!(tape.value(l).data()[0], 0.0);
    let w = tape.constant(Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
    let l = tape.l1_penalty(w, 0.1).unwrap();
    assert!((tape.value(l).data()[0] - 0.3).abs() < 1e-15);
    assert!(tape.l1_penalty(w, -1.0).is_err());
}

#[test]
fn backward_linear_and_square() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_fn(&[2, 3, 2], |i| i as f64 - 4.0));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    let want: Vec<f64> = tape.value(x).data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.get(x).unwrap().data(), &want[..]);
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[3]));
    let y = tape.relu(x).unwrap();
    assert!(matches!(tape.backward(y), Err(TensorError::Usage(_))));
}

#[test]
fn adam_trains_a_dense_layer_through_the_tape() {
    // Fit y = 2x − 1 with a 1×1 dense layer.
    let mut w = Parameter::new("w", Tensor::<f64>::zeros(&[1, 1]));
    let mut b = Parameter::new("b", Tensor::<f64>::zeros(&[1]));
    let xs = Tensor::new(&[4, 1], vec![-1.0, 0.0, 1.0, 2.0]).unwrap();
    let ys = [-3.0, -1.0, 1.0, 3.0];
    let adam = Adam::with_lr(0.05);
    for _ in 0..3000 {
        let mut tape = Tape::new();
        let x = tape.constant(xs.clone());
        let wv = tape.param(&w);
        let bv = tape.param(&b);
        let y = tape.dense(x, wv, bv).unwrap();
        let target = tape.constant(Tensor::new(&[4, 1], ys.to_vec()).unwrap().map(|v| -v));
        let diff = tape.add(y, target).unwrap();
        let sq = tape.mul(diff, diff).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        g.accumulate_into(wv, &mut w).unwrap();
        g.accumulate_into(bv, &mut b).unwrap();
        adam.step([&mut w, &mut b]).unwrap();
    }
    assert!((w.value.data()[0] - 2.0).abs() < 1e-2);
    assert!((b.value.data()[0] + 1.0).abs() < 1e-2);
}
