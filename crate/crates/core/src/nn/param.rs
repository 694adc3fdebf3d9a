//! Trainable parameters and the Adam optimizer.

use crate::scalar::Scalar;
use ndarray::ArrayD;

/// One trainable tensor with its gradient and Adam moment buffers.
/// The name is stable and used for checkpoint round-trips.
#[derive(Clone, Debug)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub value: ArrayD<S>,
    pub grad: ArrayD<S>,
    pub m: ArrayD<S>,
    pub v: ArrayD<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, value: ArrayD<S>) -> Self {
        let zeros = ArrayD::zeros(value.raw_dim());
        Self {
            name: name.into(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }
}

/// Anything that owns parameters.
pub trait Module<S: Scalar> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>));
}

pub fn zero_grads<S: Scalar, M: Module<S>>(module: &mut M) {
    module.visit_params(&mut |p| p.zero_grad());
}

pub fn param_count<S: Scalar, M: Module<S>>(module: &mut M) -> usize {
    let mut n = 0;
    module.visit_params(&mut |p| n += p.value.len());
    n
}

/// Squared L2 norm of all gradients; used to assert freeze contracts.
pub fn grad_norm_sq<S: Scalar, M: Module<S>>(module: &mut M) -> f64 {
    let mut acc = 0.0;
    module.visit_params(&mut |p| {
        acc += p.grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>();
    });
    acc
}

#[derive(Clone, Debug)]
pub struct Adam<S: Scalar> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    pub t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, betas: (f64, f64)) -> Self {
        Self {
            lr: S::from_f64(lr),
            beta1: S::from_f64(betas.0),
            beta2: S::from_f64(betas.1),
            eps: S::from_f64(1e-8),
            t: 0,
        }
    }

    pub fn step<M: Module<S>>(&mut self, module: &mut M) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        let one = S::one();
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        module.visit_params(&mut |p| {
            let g = &p.grad;
            ndarray::Zip::from(&mut p.m).and(g).for_each(|m, &g| {
                *m = b1 * *m + (one - b1) * g;
            });
            ndarray::Zip::from(&mut p.v).and(g).for_each(|v, &g| {
                *v = b2 * *v + (one - b2) * g * g;
            });
            ndarray::Zip::from(&mut p.value)
                .and(&p.m)
                .and(&p.v)
                .for_each(|w, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *w = *w - lr * mhat / (vhat.sqrt() + eps);
                });
        });
    }
}
