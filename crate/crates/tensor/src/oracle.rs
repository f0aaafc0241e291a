//! Slow reference implementations used as test oracles. Nothing here shares
//! code with the optimized kernels: plain index loops and central differences.

/// `x` is `n×din`, `w` is `din×dout`.
pub fn dense(x: &[f64], n: usize, din: usize, w: &[f64], dout: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n * dout];
    for i in 0..n {
        for j in 0..dout {
            let mut acc = b[j];
            for p in 0..din {
                acc += x[i * din + p] * w[p * dout + j];
            }
            y[i * dout + j] = acc;
        }
    }
    y
}

/// Direct cross-correlation over `n×h×w×cin` input and `kh×kw×cin×cout` kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    [n, h, w, cin]: [usize; 4],
    k: &[f64],
    [kh, kw, cout]: [usize; 3],
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut y = vec![0.0; n * ho * wo * cout];
    for s in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for o in 0..cout {
                    let mut acc = b[o];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for c in 0..cin {
                                let xv = x[((s * h + iy as usize) * w + ix as usize) * cin + c];
                                let kv = k[((ky * kw + kx) * cin + c) * cout + o];
                                acc += xv * kv;
                            }
                        }
                    }
                    y[((s * ho + oy) * wo + ox) * cout + o] = acc;
                }
            }
        }
    }
    (y, [n, ho, wo, cout])
}

pub fn maxpool2d(x: &[f64], [n, h, w, c]: [usize; 4], window: usize, stride: usize) -> Vec<f64> {
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let mut y = Vec::with_capacity(n * ho * wo * c);
    for s in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut m = f64::NEG_INFINITY;
                    for ky in 0..window {
                        for kx in 0..window {
                            let v = x[((s * h + oy * stride + ky) * w + ox * stride + kx) * c + ch];
                            if v > m {
                                m = v;
                            }
                        }
                    }
                    y.push(m);
                }
            }
        }
    }
    y
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Denominator floor of [`relative_error`], about five orders above the
/// round-off of a central difference with `h = 1e-6` on an O(1) loss.
pub const GRADIENT_FLOOR: f64 = 1e-5;

/// `‖a − b‖ / max(‖a‖, ‖b‖, GRADIENT_FLOOR)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(GRADIENT_FLOOR)
}

use rand::{Rng, SeedableRng};
use rand::rngs::StdRng;

use crate::{BatchNormStats, Conv2dSpec, Mode, Result, Tape, Tensor, Var};

/// Relative error between the tape gradient and central differences of
/// `Σ proj ⊙ build(inputs)` for every input, maximised over inputs.
///
/// `build` must be a deterministic function of its inputs (reseed any RNG inside it).
pub fn gradient_error(
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    seed: u64,
) -> Result<f64> {
    let scalar_of = |vals: &[Tensor<f64>], proj: Option<&Tensor<f64>>| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let loss = match proj {
            Some(p) if tape.value(out).len() > 1 => {
                let pv = tape.constant(p.clone());
                let m = tape.mul(out, pv)?;
                tape.sum(m)?
            }
            _ => tape.sum(out)?,
        };
        Ok((tape, vars, loss))
    };

    // Shape of the output decides the random projection.
    let out_shape = {
        let mut probe = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| probe.leaf(t.clone())).collect();
        let out = build(&mut probe, &vars)?;
        probe.value(out).shape().to_vec()
    };
    let mut rng = StdRng::seed_from_u64(seed);
    let proj = Tensor::from_fn(&out_shape, |_| rng.gen_range(-1.0..1.0));

    let (tape, vars, loss) = scalar_of(inputs, Some(&proj))?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let numeric = numeric_gradient(
            |x| {
                let mut vals = inputs.to_vec();
                vals[i] = Tensor::new(inputs[i].shape(), x.to_vec()).unwrap();
                let (t, _, l) = scalar_of(&vals, Some(&proj)).expect("forward succeeded once");
                t.value(l).data()[0]
            },
            inputs[i].data(),
            1e-6,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn uniform(rng: &mut StdRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Runs `configs` random finite-difference checks for every differentiable op
/// and returns the worst relative error per op.
pub fn op_gradient_suite(configs: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut results: Vec<(&'static str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match results.iter_mut().find(|(n, _)| *n == name) {
        Some(slot) => slot.1 = slot.1.max(err),
        None => results.push((name, err)),
    };
    for c in 0..configs {
        let s = seed.wrapping_mul(1000).wrapping_add(c as u64);
        let n = rng.gen_range(2..5);
        let din = rng.gen_range(1..6);
        let dout = rng.gen_range(1..5);

        let ins = [
            uniform(&mut rng, &[n, din], -1.0, 1.0),
            uniform(&mut rng, &[din, dout], -1.0, 1.0),
            uniform(&mut rng, &[dout], -1.0, 1.0),
        ];
        let e = gradient_error(&ins, &|t, v| t.dense(v[0], v[1], v[2]), s).unwrap();
        record("dense", e);

        let (h, w) = (rng.gen_range(3..7), rng.gen_range(3..7));
        let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let k = rng.gen_range(1..4);
        let spec = Conv2dSpec {
            stride: rng.gen_range(1..3),
            padding: rng.gen_range(0..2),
        };
        let ins = [
            uniform(&mut rng, &[2, h, w, cin], -1.0, 1.0),
            uniform(&mut rng, &[k, k, cin, cout], -1.0, 1.0),
            uniform(&mut rng, &[cout], -1.0, 1.0),
        ];
        let e = gradient_error(&ins, &|t, v| t.conv2d(v[0], v[1], v[2], spec), s).unwrap();
        record("conv2d", e);

        let win = rng.gen_range(1..3);
        let ins = [uniform(&mut rng, &[2, h, w, cin], -1.0, 1.0)];
        let e = gradient_error(&ins, &|t, v| t.maxpool2d(v[0], win, win), s).unwrap();
        record("maxpool2d", e);

        let e = gradient_error(&ins, &|t, v| t.global_avg_pool(v[0]), s).unwrap();
        record("global_avg_pool", e);

        let ins = [uniform(&mut rng, &[n, din], -2.0, 2.0)];
        let e = gradient_error(&ins, &|t, v| t.relu(v[0]), s).unwrap();
        record("relu", e);
        let e = gradient_error(&ins, &|t, v| t.sigmoid(v[0]), s).unwrap();
        record("sigmoid", e);

        // Two rows normalize to ±1 regardless of input, leaving a vanishing gradient.
        let bn_rows = n + 2;
        let ins = [
            uniform(&mut rng, &[bn_rows, din], -2.0, 2.0),
            uniform(&mut rng, &[din], 0.5, 1.5),
            uniform(&mut rng, &[din], -0.5, 0.5),
        ];
        let e = gradient_error(
            &ins,
            &|t, v| {
                let mut stats = BatchNormStats::new(din);
                t.batchnorm1d(v[0], v[1], v[2], &mut stats, Mode::Train)
            },
            s,
        )
        .unwrap();
        record("batchnorm1d/train", e);
        let running = BatchNormStats {
            mean: (0..din).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            var: (0..din).map(|_| rng.gen_range(0.5..2.0)).collect(),
            momentum: 0.9,
            eps: 1e-5,
        };
        let e = gradient_error(
            &ins,
            &|t, v| {
                let mut stats = running.clone();
                t.batchnorm1d(v[0], v[1], v[2], &mut stats, Mode::Eval)
            },
            s,
        )
        .unwrap();
        record("batchnorm1d/eval", e);

        let ins = [uniform(&mut rng, &[n, din], -1.0, 1.0)];
        let e = gradient_error(
            &ins,
            &|t, v| {
                let mut drng = StdRng::seed_from_u64(s);
                t.dropout(v[0], 0.5, Mode::Train, &mut drng)
            },
            s,
        )
        .unwrap();
        record("dropout", e);

        let ins = [uniform(&mut rng, &[n], 0.05, 0.95)];
        let target: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
        let e = gradient_error(&ins, &|t, v| t.bce_loss(v[0], &target), s).unwrap();
        record("bce_loss", e);

        let kcls = rng.gen_range(2..6);
        let ins = [uniform(&mut rng, &[n, kcls], -3.0, 3.0)];
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..kcls)).collect();
        let e = gradient_error(&ins, &|t, v| t.softmax_cross_entropy(v[0], &labels), s).unwrap();
        record("softmax_cross_entropy", e);

        // Keep weights away from the kink at zero.
        let ins = [Tensor::from_fn(&[din, dout], |_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })];
        let e = gradient_error(&ins, &|t, v| t.l1_penalty(v[0], 0.1), s).unwrap();
        record("l1_penalty", e);

        let ins = [uniform(&mut rng, &[n, din], -1.0, 1.0), uniform(&mut rng, &[n, din], -1.0, 1.0)];
        let e = gradient_error(&ins, &|t, v| t.add(v[0], v[1]), s).unwrap();
        record("add", e);
        let e = gradient_error(&ins, &|t, v| t.mul(v[0], v[1]), s).unwrap();
        record("mul", e);
        let e = gradient_error(&ins, &|t, v| t.flatten(v[0]), s).unwrap();
        record("reshape", e);
    }
    results
}
