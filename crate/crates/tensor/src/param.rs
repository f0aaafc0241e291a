use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A trainable tensor plus its gradient accumulator and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub state: AdamState<T>,
}

/// First/second moment estimates and the number of updates applied so far.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let n = value.len();
        Parameter {
            name: name.into(),
            value,
            grad: None,
            state: AdamState {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
                step: 0,
            },
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Add `g` into the gradient slot (multiple uses accumulate).
    pub fn accumulate_grad(&mut self, g: &Tensor<T>) -> Result<()> {
        if g.shape() != self.value.shape() {
            return Err(TensorError::dim(
                "accumulate_grad",
                format!("{}: {:?} vs {:?}", self.name, g.shape(), self.value.shape()),
            ));
        }
        match &mut self.grad {
            Some(acc) => acc.add_assign(g),
            None => self.grad = Some(g.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Same parameter in another precision; optimizer moments are carried over.
    pub fn cast<U: Scalar>(&self) -> Parameter<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        Parameter {
            name: self.name.clone(),
            value: self.value.cast(),
            grad: self.grad.as_ref().map(|g| g.cast()),
            state: AdamState {
                m: conv(&self.state.m),
                v: conv(&self.state.v),
                step: self.state.step,
            },
        }
    }
}

/// Bias-corrected Adam. Defaults are the conventional 0.9 / 0.999 / 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam {
            lr,
            ..Adam::default()
        }
    }

    /// Apply one update to every parameter and clear its gradient.
    ///
    /// Every parameter must carry a gradient; a missing one is a usage error and
    /// leaves all parameters untouched.
    pub fn step<'a, T: Scalar>(
        &self,
        params: impl IntoIterator<Item = &'a mut Parameter<T>>,
    ) -> Result<()> {
        let mut params: Vec<&mut Parameter<T>> = params.into_iter().collect();
        if params.is_empty() {
            return Err(TensorError::Usage("adam step with no parameters".into()));
        }
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(TensorError::Usage(format!(
                "adam step without gradient for parameter `{}`",
                p.name
            )));
        }
        for p in params.iter_mut() {
            let grad = p.grad.take().expect("checked above");
            p.state.step += 1;
            let t = p.state.step as i32;
            let b1 = self.beta1;
            let b2 = self.beta2;
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            let (tb1, tb2) = (T::from_f64(b1), T::from_f64(b2));
            let (ob1, ob2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
            let lr = T::from_f64(self.lr);
            let eps = T::from_f64(self.eps);
            let (bc1, bc2) = (T::from_f64(bc1), T::from_f64(bc2));
            let state = &mut p.state;
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(state.m.iter_mut())
                .zip(state.v.iter_mut())
            {
                *m = tb1 * *m + ob1 * g;
                *v = tb2 * *v + ob2 * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
