//! Forward kernels and their vector-Jacobian products.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{BatchNormStats, Conv2dSpec, Mode, Node, Op, Tape, Var};
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    let one = T::one();
    let y = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    // Keep the result strictly inside (0, 1) even where the exact value rounds to an endpoint.
    let hi = one - T::epsilon() / T::from_f64(2.0);
    y.max(T::min_positive_value()).min(hi)
}

pub(crate) fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 || w.rank() != 2 || b.rank() != 1 {
        return Err(TensorError::dim(
            "dense",
            format!("expected N×Din, Din×Dout, Dout; got {:?}, {:?}, {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[1];
    if w.shape()[0] != din || b.shape()[0] != dout {
        return Err(TensorError::dim(
            "dense",
            format!("x {:?}, W {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let mut out = Vec::with_capacity(n * dout);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    T::gemm(n, din, dout, x.data(), false, w.data(), false, &mut out, true);
    Tensor::new(&[n, dout], out)
}

struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &[usize], k: &[usize], spec: Conv2dSpec) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return Err(TensorError::dim(
                "conv2d",
                format!("expected N×H×W×C input and kh×kw×Cin×Cout kernel; got {x:?}, {k:?}"),
            ));
        }
        if spec.stride == 0 {
            return Err(TensorError::param("conv2d", "stride must be ≥ 1"));
        }
        let (n, h, w, cin) = (x[0], x[1], x[2], x[3]);
        let (kh, kw, kc, cout) = (k[0], k[1], k[2], k[3]);
        if kc != cin {
            return Err(TensorError::dim(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {cin}"),
            ));
        }
        let (ph, pw) = (h + 2 * spec.padding, w + 2 * spec.padding);
        if kh > ph || kw > pw {
            return Err(TensorError::dim(
                "conv2d",
                format!("kernel {kh}×{kw} larger than padded input {ph}×{pw}"),
            ));
        }
        Ok(ConvGeom {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            ho: (ph - kh) / spec.stride + 1,
            wo: (pw - kw) / spec.stride + 1,
            stride: spec.stride,
            pad: spec.padding,
        })
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Patch matrix of one sample: row per output position, columns ordered (ky, kx, c).
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let patch = self.patch();
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &mut cols[(oy * self.wo + ox) * patch..][..patch];
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        let dst = &mut row[(ky * self.kw + kx) * self.cin..][..self.cin];
                        if iy < 0 || ix < 0 || iy as usize >= self.h || ix as usize >= self.w {
                            dst.fill(T::zero());
                        } else {
                            let src = ((iy as usize) * self.w + ix as usize) * self.cin;
                            dst.copy_from_slice(&x[src..src + self.cin]);
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let patch = self.patch();
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &cols[(oy * self.wo + ox) * patch..][..patch];
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy as usize >= self.h {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix as usize >= self.w {
                            continue;
                        }
                        let dst = ((iy as usize) * self.w + ix as usize) * self.cin;
                        let src = &row[(ky * self.kw + kx) * self.cin..][..self.cin];
                        for (d, &s) in dx[dst..dst + self.cin].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    b: &Tensor<T>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), k.shape(), spec)?;
    if b.shape() != [g.cout] {
        return Err(TensorError::dim(
            "conv2d",
            format!("bias {:?} for {} output channels", b.shape(), g.cout),
        ));
    }
    let (patch, pos) = (g.patch(), g.positions());
    let in_len = g.h * g.w * g.cin;
    let out_len = pos * g.cout;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut cols = vec![T::zero(); pos * patch];
    for s in 0..g.n {
        g.im2col(&x.data()[s * in_len..(s + 1) * in_len], &mut cols);
        let o = &mut out[s * out_len..(s + 1) * out_len];
        for row in o.chunks_exact_mut(g.cout) {
            row.copy_from_slice(b.data());
        }
        T::gemm(pos, patch, g.cout, &cols, false, k.data(), false, o, true);
    }
    Tensor::new(&[g.n, g.ho, g.wo, g.cout], out)
}

pub(crate) fn maxpool2d_forward<T: Scalar>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.rank() != 4 {
        return Err(TensorError::dim("maxpool2d", format!("expected N×H×W×C, got {:?}", x.shape())));
    }
    if window == 0 || stride == 0 {
        return Err(TensorError::param("maxpool2d", "window and stride must be ≥ 1"));
    }
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if window > h || window > w {
        return Err(TensorError::dim(
            "maxpool2d",
            format!("window {window} exceeds input {h}×{w}"),
        ));
    }
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(n * ho * wo * c);
    let mut argmax = Vec::with_capacity(n * ho * wo * c);
    let xd = x.data();
    for s in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    let mut best_v = T::neg_infinity();
                    for ky in 0..window {
                        for kx in 0..window {
                            let idx = ((s * h + oy * stride + ky) * w + ox * stride + kx) * c + ch;
                            // Strict comparison keeps the first row-major maximum on ties.
                            if best == usize::MAX || xd[idx] > best_v {
                                best = idx;
                                best_v = xd[idx];
                            }
                        }
                    }
                    out.push(best_v);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((Tensor::new(&[n, ho, wo, c], out)?, argmax))
}

pub(crate) fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(TensorError::dim("global_avg_pool", format!("expected N×H×W×C, got {:?}", x.shape())));
    }
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let mut out = vec![T::zero(); n * c];
    for s in 0..n {
        let o = &mut out[s * c..(s + 1) * c];
        for px in x.data()[s * h * w * c..(s + 1) * h * w * c].chunks_exact(c) {
            for (a, &v) in o.iter_mut().zip(px) {
                *a += v;
            }
        }
        for a in o.iter_mut() {
            *a *= inv;
        }
    }
    Tensor::new(&[n, c], out)
}

pub(crate) struct BatchNormForward<T> {
    pub out: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut BatchNormStats<T>,
    mode: Mode,
) -> Result<BatchNormForward<T>> {
    if x.rank() != 2 {
        return Err(TensorError::dim("batchnorm1d", format!("expected N×D, got {:?}", x.shape())));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if gamma.shape() != [d] || beta.shape() != [d] || stats.mean.len() != d || stats.var.len() != d {
        return Err(TensorError::dim(
            "batchnorm1d",
            format!("feature dim {d} vs gamma {:?} beta {:?}", gamma.shape(), beta.shape()),
        ));
    }
    let eps = T::from_f64(stats.eps);
    let (mean, var) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(TensorError::BatchSize {
                    op: "batchnorm1d",
                    min: 2,
                    got: n,
                });
            }
            let inv_n = T::from_f64(1.0 / n as f64);
            let mut mean = vec![T::zero(); d];
            for row in x.data().chunks_exact(d) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_n);
            let mut var = vec![T::zero(); d];
            for row in x.data().chunks_exact(d) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s *= inv_n);
            let mom = T::from_f64(stats.momentum);
            let one_m = T::from_f64(1.0 - stats.momentum);
            for j in 0..d {
                stats.mean[j] = mom * stats.mean[j] + one_m * mean[j];
                stats.var[j] = mom * stats.var[j] + one_m * var[j];
            }
            (mean, var)
        }
        Mode::Eval => (stats.mean.clone(), stats.var.clone()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(n * d);
    let mut out = Vec::with_capacity(n * d);
    for row in x.data().chunks_exact(d) {
        for j in 0..d {
            let h = (row[j] - mean[j]) * inv_std[j];
            xhat.push(h);
            out.push(gamma.data()[j] * h + beta.data()[j]);
        }
    }
    Ok(BatchNormForward {
        out: Tensor::new(&[n, d], out)?,
        xhat,
        inv_std,
    })
}

fn flat_len<T: Scalar>(pred: &Tensor<T>) -> Option<usize> {
    match pred.shape() {
        [n] => Some(*n),
        [n, 1] => Some(*n),
        _ => None,
    }
}

pub(crate) fn bce_forward<T: Scalar>(pred: &Tensor<T>, target: &[T]) -> Result<T> {
    let n = flat_len(pred)
        .ok_or_else(|| TensorError::dim("bce_loss", format!("expected N or N×1, got {:?}", pred.shape())))?;
    if target.len() != n {
        return Err(TensorError::dim("bce_loss", format!("{n} predictions, {} targets", target.len())));
    }
    if let Some(t) = target.iter().find(|&&t| t != T::zero() && t != T::one()) {
        return Err(TensorError::label("bce_loss", format!("target {t} not in {{0,1}}")));
    }
    let lo = T::from_f64(BCE_CLAMP);
    let hi = T::one() - lo;
    let mut total = T::zero();
    for (&p, &t) in pred.data().iter().zip(target) {
        let p = p.max(lo).min(hi);
        total -= t * p.ln() + (T::one() - t) * (T::one() - p).ln();
    }
    Ok(total / T::from_f64(n as f64))
}

pub(crate) fn softmax_ce_forward<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
    if logits.rank() != 2 {
        return Err(TensorError::dim("softmax_cross_entropy", format!("expected N×K, got {:?}", logits.shape())));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(TensorError::dim("softmax_cross_entropy", format!("{n} rows, {} labels", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::label("softmax_cross_entropy", format!("label {l} outside [0, {k})")));
    }
    let mut probs = Vec::with_capacity(n * k);
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let denom: T = row.iter().map(|&z| (z - max).exp()).sum();
        let log_denom = denom.ln();
        total += log_denom - (row[label] - max);
        probs.extend(row.iter().map(|&z| (z - max).exp() / denom));
    }
    Ok((total / T::from_f64(n as f64), probs))
}

pub(crate) fn backward_node<T: Scalar>(
    tape: &Tape<T>,
    node: &Node<T>,
    g: &Tensor<T>,
    emit: &mut dyn FnMut(Var, Tensor<T>),
) {
    let wants = |v: Var| tape.requires_grad(v);
    match &node.op {
        Op::Leaf => {}
        Op::Dense { x, w, b } => {
            let (xv, wv) = (tape.value(*x), tape.value(*w));
            let (n, din, dout) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
            if wants(*w) {
                let mut dw = vec![T::zero(); din * dout];
                T::gemm(din, n, dout, xv.data(), true, g.data(), false, &mut dw, false);
                emit(*w, Tensor::new(&[din, dout], dw).unwrap());
            }
            if wants(*b) {
                emit(*b, column_sums(g.data(), dout));
            }
            if wants(*x) {
                let mut dx = vec![T::zero(); n * din];
                T::gemm(n, dout, din, g.data(), false, wv.data(), true, &mut dx, false);
                emit(*x, Tensor::new(xv.shape(), dx).unwrap());
            }
        }
        Op::Conv2d { x, k, b, spec } => {
            let (xv, kv) = (tape.value(*x), tape.value(*k));
            let geom = ConvGeom::new(xv.shape(), kv.shape(), *spec).expect("validated in forward");
            let (patch, pos) = (geom.patch(), geom.positions());
            let in_len = geom.h * geom.w * geom.cin;
            let out_len = pos * geom.cout;
            let want_k = wants(*k);
            let want_x = wants(*x);
            let mut dk = vec![T::zero(); patch * geom.cout];
            let mut dx = if want_x { vec![T::zero(); xv.len()] } else { Vec::new() };
            let mut cols = vec![T::zero(); pos * patch];
            let mut dcols = if want_x { vec![T::zero(); pos * patch] } else { Vec::new() };
            for s in 0..geom.n {
                let gs = &g.data()[s * out_len..(s + 1) * out_len];
                if want_k {
                    geom.im2col(&xv.data()[s * in_len..(s + 1) * in_len], &mut cols);
                    T::gemm(patch, pos, geom.cout, &cols, true, gs, false, &mut dk, true);
                }
                if want_x {
                    T::gemm(pos, geom.cout, patch, gs, false, kv.data(), true, &mut dcols, false);
                    geom.col2im(&dcols, &mut dx[s * in_len..(s + 1) * in_len]);
                }
            }
            if want_k {
                emit(*k, Tensor::new(kv.shape(), dk).unwrap());
            }
            if wants(*b) {
                emit(*b, column_sums(g.data(), geom.cout));
            }
            if want_x {
                emit(*x, Tensor::new(xv.shape(), dx).unwrap());
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if wants(*x) {
                let mut dx = Tensor::zeros(tape.value(*x).shape());
                let d = dx.data_mut();
                for (&idx, &gv) in argmax.iter().zip(g.data()) {
                    d[idx] += gv;
                }
                emit(*x, dx);
            }
        }
        Op::GlobalAvgPool { x } => {
            if wants(*x) {
                let xv = tape.value(*x);
                let (n, h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let mut dx = Vec::with_capacity(xv.len());
                for s in 0..n {
                    let gs = &g.data()[s * c..(s + 1) * c];
                    for _ in 0..h * w {
                        dx.extend(gs.iter().map(|&v| v * inv));
                    }
                }
                emit(*x, Tensor::new(xv.shape(), dx).unwrap());
            }
        }
        Op::Relu { x } => {
            if wants(*x) {
                let xv = tape.value(*x);
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                emit(*x, dx);
            }
        }
        Op::Sigmoid { x } => {
            if wants(*x) {
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= y * (T::one() - y);
                }
                emit(*x, dx);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let xv = tape.value(*x);
            let (n, d) = (xv.shape()[0], xv.shape()[1]);
            let gd = g.data();
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            for (grow, hrow) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                for j in 0..d {
                    dbeta[j] += grow[j];
                    dgamma[j] += grow[j] * hrow[j];
                }
            }
            if wants(*x) {
                let gam = tape.value(*gamma).data();
                let mut dx = Vec::with_capacity(n * d);
                if *train {
                    let inv_n = T::from_f64(1.0 / n as f64);
                    for (grow, hrow) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            let scale = gam[j] * inv_std[j] * inv_n;
                            let nf = T::from_f64(n as f64);
                            dx.push(scale * (nf * grow[j] - dbeta[j] - hrow[j] * dgamma[j]));
                        }
                    }
                } else {
                    for grow in gd.chunks_exact(d) {
                        for j in 0..d {
                            dx.push(grow[j] * gam[j] * inv_std[j]);
                        }
                    }
                }
                emit(*x, Tensor::new(&[n, d], dx).unwrap());
            }
            if wants(*gamma) {
                emit(*gamma, Tensor::new(&[d], dgamma).unwrap());
            }
            if wants(*beta) {
                emit(*beta, Tensor::new(&[d], dbeta).unwrap());
            }
        }
        Op::Dropout { x, mask } => {
            if wants(*x) {
                let mut dx = g.clone();
                for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
                    *d *= m;
                }
                emit(*x, dx);
            }
        }
        Op::Bce { pred, target } => {
            if wants(*pred) {
                let pv = tape.value(*pred);
                let lo = T::from_f64(BCE_CLAMP);
                let hi = T::one() - lo;
                let scale = g.data()[0] / T::from_f64(target.len() as f64);
                // Gradient is evaluated at the clamped probability so saturated
                // predictions still receive a signal.
                let dp = pv.data().iter().zip(target).map(|(&p, &t)| {
                    let p = p.max(lo).min(hi);
                    scale * ((T::one() - t) / (T::one() - p) - t / p)
                });
                emit(*pred, Tensor::new(pv.shape(), dp.collect()).unwrap());
            }
        }
        Op::SoftmaxCe { logits, labels, probs } => {
            if wants(*logits) {
                let lv = tape.value(*logits);
                let k = lv.shape()[1];
                let scale = g.data()[0] / T::from_f64(labels.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dl[i * k + l] -= scale;
                }
                emit(*logits, Tensor::new(lv.shape(), dl).unwrap());
            }
        }
        Op::L1 { w, coeff } => {
            if wants(*w) {
                let scale = g.data()[0] * *coeff;
                let dw = tape.value(*w).map(|v| {
                    if v > T::zero() {
                        scale
                    } else if v < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                });
                emit(*w, dw);
            }
        }
        Op::Add { a, b } => {
            if wants(*a) {
                emit(*a, g.clone());
            }
            if wants(*b) {
                emit(*b, g.clone());
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (tape.value(*a), tape.value(*b));
            if wants(*a) {
                let mut da = g.clone();
                for (d, &y) in da.data_mut().iter_mut().zip(bv.data()) {
                    *d *= y;
                }
                emit(*a, da);
            }
            if wants(*b) {
                let mut db = g.clone();
                for (d, &y) in db.data_mut().iter_mut().zip(av.data()) {
                    *d *= y;
                }
                emit(*b, db);
            }
        }
        Op::Sum { x } => {
            if wants(*x) {
                emit(*x, Tensor::full(tape.value(*x).shape(), g.data()[0]));
            }
        }
        Op::Reshape { x } => {
            if wants(*x) {
                emit(*x, g.clone().reshape(tape.value(*x).shape()).unwrap());
            }
        }
    }
}

fn column_sums<T: Scalar>(g: &[T], width: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); width];
    for row in g.chunks_exact(width) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new(&[width], out).unwrap()
}
