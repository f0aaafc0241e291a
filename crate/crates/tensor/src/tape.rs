//! Wengert-list tape: every forward op appends a node holding its output and
//! whatever it needs for the vector-Jacobian product; `backward` replays the
//! list in reverse.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::ops;
use crate::param::Parameter;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            padding: 0,
        }
    }
}

/// Running statistics for batch normalization over the feature axis of `N×D` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn new(dim: usize) -> Self {
        BatchNormStats {
            mean: vec![T::zero(); dim],
            var: vec![T::one(); dim],
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormStats<U> {
        BatchNormStats {
            mean: self.mean.iter().map(|x| U::from_f64(x.as_f64())).collect(),
            var: self.var.iter().map(|x| U::from_f64(x.as_f64())).collect(),
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        spec: Conv2dSpec,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Bce {
        pred: Var,
        target: Vec<T>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    L1 {
        w: Var,
        coeff: T,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Ordered record of executed ops. One tape per forward/backward pass.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Accumulate the gradient of `v` into `param`'s slot. Leaves the slot
    /// untouched when the loss does not depend on `v`.
    pub fn accumulate_into(&self, v: Var, param: &mut Parameter<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => param.accumulate_grad(g),
            None => {
                if param.grad.is_none() {
                    param.grad = Some(Tensor::zeros(param.shape()));
                }
                Ok(())
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    /// Input that gradients are not tracked for.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf tracked for gradients.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        self.leaf(p.value.clone())
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::dense_forward(self.value(x), self.value(w), self.value(b))?;
        self.push_checked("dense", out, Op::Dense { x, w, b }, &[x, w, b])
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, spec: Conv2dSpec) -> Result<Var> {
        let out = ops::conv2d_forward(self.value(x), self.value(k), self.value(b), spec)?;
        self.push_checked("conv2d", out, Op::Conv2d { x, k, b, spec }, &[x, k, b])
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = ops::maxpool2d_forward(self.value(x), window, stride)?;
        self.push_checked("maxpool2d", out, Op::MaxPool2d { x, argmax }, &[x])
    }

    /// `N×H×W×C → N×C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool_forward(self.value(x))?;
        self.push_checked("global_avg_pool", out, Op::GlobalAvgPool { x }, &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push_checked("relu", out, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(ops::sigmoid);
        self.push_checked("sigmoid", out, Op::Sigmoid { x }, &[x])
    }

    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let fwd = ops::batchnorm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            stats,
            mode,
        )?;
        self.push_checked(
            "batchnorm1d",
            fwd.out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                train: mode == Mode::Train,
            },
            &[x, gamma, beta],
        )
    }

    /// Inverted dropout. In eval mode (or with `rate == 0`) this returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::param(
                "dropout",
                format!("rate must lie in [0, 1), got {rate}"),
            ));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let mut out = xv.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push_checked("dropout", out, Op::Dropout { x, mask }, &[x])
    }

    /// Mean binary cross-entropy; `pred` is `N` or `N×1` probabilities, `target` in {0,1}.
    pub fn bce_loss(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let loss = ops::bce_forward(self.value(pred), target)?;
        self.push_checked(
            "bce_loss",
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                target: target.to_vec(),
            },
            &[pred],
        )
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_ce_forward(self.value(logits), labels)?;
        self.push_checked(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// `coeff · Σ|w|`.
    pub fn l1_penalty(&mut self, w: Var, coeff: f64) -> Result<Var> {
        if !(coeff >= 0.0) {
            return Err(TensorError::param(
                "l1_penalty",
                format!("coefficient must be non-negative, got {coeff}"),
            ));
        }
        let coeff = T::from_f64(coeff);
        let total: T = self.value(w).data().iter().map(|v| v.abs()).sum();
        self.push_checked("l1_penalty", Tensor::scalar(coeff * total), Op::L1 { w, coeff }, &[w])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::dim(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        self.push_checked("add", out, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::dim(
                "mul",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = va.clone();
        for (o, &y) in out.data_mut().iter_mut().zip(vb.data()) {
            *o *= y;
        }
        self.push_checked("mul", out, Op::Mul { a, b }, &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push_checked("reshape", out, Op::Reshape { x }, &[x])
    }

    /// Flatten everything after the batch axis: `N×... → N×D`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = [v.rows(), v.row_len()];
        self.reshape(x, &shape)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            ops::backward_node(self, node, &g, &mut |v: Var, contrib: Tensor<T>| {
                accumulate(&mut grads, v, contrib)
            });
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, contrib: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&contrib),
        slot @ None => *slot = Some(contrib),
    }
}
