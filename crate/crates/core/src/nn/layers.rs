//! Dense, normalization and activation layers.

use super::init::Init;
use super::param::{Module, Param};
use crate::scalar::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Linear<S: Scalar> {
    pub w: Param<S>, // [out, in]
    pub b: Param<S>, // [out]
    pub n_in: usize,
    pub n_out: usize,
    cache_x: Option<Array2<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(name: &str, n_in: usize, n_out: usize, init: Init, rng: &mut ChaCha8Rng) -> Self {
        let w = init.sample::<S>(rng, &[n_out, n_in], n_in, n_out);
        Self {
            w: Param::new(format!("{name}.w"), w),
            b: Param::new(format!("{name}.b"), ArrayD::zeros(IxDyn(&[n_out]))),
            n_in,
            n_out,
            cache_x: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<S>, train: bool) -> Array2<S> {
        let (n, d) = x.dim();
        assert_eq!(d, self.n_in, "{}: input dim mismatch", self.w.name);
        let w2 = self
            .w
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut y = Array2::zeros((n, self.n_out));
        general_mat_mul(S::one(), x, &w2.t(), S::zero(), &mut y);
        for mut row in y.outer_iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v + self.b.value[[j]];
            }
        }
        self.cache_x = if train { Some(x.clone()) } else { None };
        y
    }

    pub fn backward(&mut self, gy: &Array2<S>) -> Array2<S> {
        let x = self.cache_x.as_ref().expect("forward(train) before backward");
        let mut dw = self
            .w
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        general_mat_mul(S::one(), &gy.t(), &x.view(), S::one(), &mut dw);
        for row in gy.outer_iter() {
            for (j, &v) in row.iter().enumerate() {
                self.b.grad[[j]] += v;
            }
        }
        let w2 = self
            .w
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut gx = Array2::zeros(x.raw_dim());
        general_mat_mul(S::one(), gy, &w2, S::zero(), &mut gx);
        gx
    }
}

impl<S: Scalar> Module<S> for Linear<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Instance normalization with affine parameters: each (sample, channel)
/// plane is normalized over its spatial extent. Behaves identically in train
/// and eval mode, and per-sample outputs do not depend on batch composition.
#[derive(Clone, Debug)]
pub struct InstanceNorm2d<S: Scalar> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub channels: usize,
    eps: S,
    cache: Option<(Array4<S>, Array2<S>)>, // (xhat, invstd per [n, c])
}

impl<S: Scalar> InstanceNorm2d<S> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(
                format!("{name}.gamma"),
                ArrayD::from_elem(IxDyn(&[channels]), S::one()),
            ),
            beta: Param::new(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels]))),
            channels,
            eps: S::from_f64(1e-5),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<S>, train: bool) -> Array4<S> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "{}: channel mismatch", self.gamma.name);
        let hw = S::from_f64((h * w) as f64);
        let mut y = Array4::zeros((n, c, h, w));
        let mut xhat = Array4::zeros((n, c, h, w));
        let mut invstd = Array2::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let plane = x.slice(ndarray::s![ni, ci, .., ..]);
                let mean = plane.iter().fold(S::zero(), |a, &v| a + v) / hw;
                let var = plane
                    .iter()
                    .fold(S::zero(), |a, &v| a + (v - mean) * (v - mean))
                    / hw;
                let istd = S::one() / (var + self.eps).sqrt();
                invstd[[ni, ci]] = istd;
                let g = self.gamma.value[[ci]];
                let b = self.beta.value[[ci]];
                let mut xh = xhat.slice_mut(ndarray::s![ni, ci, .., ..]);
                let mut yo = y.slice_mut(ndarray::s![ni, ci, .., ..]);
                ndarray::Zip::from(&mut xh)
                    .and(&mut yo)
                    .and(&plane)
                    .for_each(|xh, yo, &v| {
                        let xn = (v - mean) * istd;
                        *xh = xn;
                        *yo = g * xn + b;
                    });
            }
        }
        self.cache = if train { Some((xhat, invstd)) } else { None };
        y
    }

    pub fn backward(&mut self, gy: &Array4<S>) -> Array4<S> {
        let (xhat, invstd) = self.cache.as_ref().expect("forward(train) before backward");
        let (n, c, h, w) = gy.dim();
        let hw = S::from_f64((h * w) as f64);
        let mut gx = Array4::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let g = self.gamma.value[[ci]];
                let istd = invstd[[ni, ci]];
                let gy_p = gy.slice(ndarray::s![ni, ci, .., ..]);
                let xh_p = xhat.slice(ndarray::s![ni, ci, .., ..]);
                let mut s1 = S::zero(); // sum(dxhat)
                let mut s2 = S::zero(); // sum(dxhat * xhat)
                let mut dg = S::zero();
                let mut db = S::zero();
                ndarray::Zip::from(&gy_p).and(&xh_p).for_each(|&dy, &xh| {
                    let dxh = dy * g;
                    s1 += dxh;
                    s2 += dxh * xh;
                    dg += dy * xh;
                    db += dy;
                });
                self.gamma.grad[[ci]] += dg;
                self.beta.grad[[ci]] += db;
                let mut gx_p = gx.slice_mut(ndarray::s![ni, ci, .., ..]);
                ndarray::Zip::from(&mut gx_p)
                    .and(&gy_p)
                    .and(&xh_p)
                    .for_each(|gx, &dy, &xh| {
                        let dxh = dy * g;
                        *gx = istd * (dxh - (s1 + xh * s2) / hw);
                    });
            }
        }
        gx
    }
}

impl<S: Scalar> Module<S> for InstanceNorm2d<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Elementwise activations with cached outputs for backward.
#[derive(Clone, Debug)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

#[derive(Clone, Debug)]
pub struct Act<S: Scalar> {
    pub kind: Activation,
    cache_y: Option<ArrayD<S>>,
}

impl<S: Scalar> Act<S> {
    pub fn new(kind: Activation) -> Self {
        Self {
            kind,
            cache_y: None,
        }
    }

    pub fn apply_scalar(kind: &Activation, v: S) -> S {
        match kind {
            Activation::Relu => {
                if v > S::zero() {
                    v
                } else {
                    S::zero()
                }
            }
            Activation::LeakyRelu(a) => {
                if v > S::zero() {
                    v
                } else {
                    S::from_f64(*a) * v
                }
            }
            Activation::Sigmoid => S::one() / (S::one() + (-v).exp()),
            Activation::Tanh => v.tanh(),
        }
    }

    pub fn forward_dyn(&mut self, x: &ArrayD<S>, train: bool) -> ArrayD<S> {
        let y = x.mapv(|v| Self::apply_scalar(&self.kind, v));
        self.cache_y = if train { Some(y.clone()) } else { None };
        y
    }

    pub fn forward4(&mut self, x: &Array4<S>, train: bool) -> Array4<S> {
        let y = x.mapv(|v| Self::apply_scalar(&self.kind, v));
        self.cache_y = if train { Some(y.clone().into_dyn()) } else { None };
        y
    }

    pub fn forward2(&mut self, x: &Array2<S>, train: bool) -> Array2<S> {
        let y = x.mapv(|v| Self::apply_scalar(&self.kind, v));
        self.cache_y = if train { Some(y.clone().into_dyn()) } else { None };
        y
    }

    pub fn backward_dyn(&self, gy: &ArrayD<S>) -> ArrayD<S> {
        let y = self.cache_y.as_ref().expect("forward(train) before backward");
        let mut gx = gy.clone();
        match self.kind {
            Activation::Relu => {
                ndarray::Zip::from(&mut gx).and(y).for_each(|g, &y| {
                    if y <= S::zero() {
                        *g = S::zero();
                    }
                });
            }
            Activation::LeakyRelu(a) => {
                let a = S::from_f64(a);
                ndarray::Zip::from(&mut gx).and(y).for_each(|g, &y| {
                    if y <= S::zero() {
                        *g = *g * a;
                    }
                });
            }
            Activation::Sigmoid => {
                ndarray::Zip::from(&mut gx).and(y).for_each(|g, &y| {
                    *g = *g * y * (S::one() - y);
                });
            }
            Activation::Tanh => {
                ndarray::Zip::from(&mut gx).and(y).for_each(|g, &y| {
                    *g = *g * (S::one() - y * y);
                });
            }
        }
        gx
    }

    pub fn backward4(&self, gy: &Array4<S>) -> Array4<S> {
        let y = self.cache_y.as_ref().expect("forward(train) before backward");
        let y4 = y.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut gx = gy.clone();
        self.scale_grad_inplace(&mut gx.view_mut().into_dyn(), &y4.into_dyn());
        gx
    }

    pub fn backward2(&self, gy: &Array2<S>) -> Array2<S> {
        let y = self.cache_y.as_ref().expect("forward(train) before backward");
        let y2 = y.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut gx = gy.clone();
        self.scale_grad_inplace(&mut gx.view_mut().into_dyn(), &y2.into_dyn());
        gx
    }

    fn scale_grad_inplace(
        &self,
        gx: &mut ndarray::ArrayViewMutD<S>,
        y: &ndarray::ArrayViewD<S>,
    ) {
        match self.kind {
            Activation::Relu => {
                ndarray::Zip::from(gx).and(y).for_each(|g, &y| {
                    if y <= S::zero() {
                        *g = S::zero();
                    }
                });
            }
            Activation::LeakyRelu(a) => {
                let a = S::from_f64(a);
                ndarray::Zip::from(gx).and(y).for_each(|g, &y| {
                    if y <= S::zero() {
                        *g = *g * a;
                    }
                });
            }
            Activation::Sigmoid => {
                ndarray::Zip::from(gx).and(y).for_each(|g, &y| {
                    *g = *g * y * (S::one() - y);
                });
            }
            Activation::Tanh => {
                ndarray::Zip::from(gx).and(y).for_each(|g, &y| {
                    *g = *g * (S::one() - y * y);
                });
            }
        }
    }
}

/// Numerically stable sigmoid on a 2D array of logits.
pub fn sigmoid2<S: Scalar>(z: &Array2<S>) -> Array2<S> {
    z.mapv(|v| S::one() / (S::one() + (-v).exp()))
}

/// log(1 + exp(x)) without overflow.
pub fn softplus<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x + (S::one() + (-x).exp()).ln()
    } else {
        (S::one() + x.exp()).ln()
    }
}

pub fn mean_arr1<S: Scalar>(x: &Array1<S>) -> S {
    x.iter().fold(S::zero(), |a, &v| a + v) / S::from_f64(x.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::Array4;

    #[test]
    fn linear_backward_matches_fd() {
        let mut rng = stream(5, &[0]);
        let mut lin = Linear::<f64>::new("t", 4, 3, Init::He, &mut rng);
        let x = Array2::from_shape_fn((2, 4), |(i, j)| (i * 4 + j) as f64 * 0.1 - 0.3);
        let y = lin.forward(&x, true);
        let gy = y.mapv(|v| 2.0 * v);
        let gx = lin.backward(&gy);
        let h = 1e-6;
        let sq = |l: &mut Linear<f64>, x: &Array2<f64>| -> f64 {
            l.forward(x, false).iter().map(|v| v * v).sum()
        };
        for i in 0..lin.w.value.len() {
            let orig = lin.w.value.as_slice().unwrap()[i];
            lin.w.value.as_slice_mut().unwrap()[i] = orig + h;
            let lp = sq(&mut lin, &x);
            lin.w.value.as_slice_mut().unwrap()[i] = orig - h;
            let lm = sq(&mut lin, &x);
            lin.w.value.as_slice_mut().unwrap()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = lin.w.grad.as_slice().unwrap()[i];
            assert!((fd - an).abs() < 1e-6 * fd.abs().max(1.0), "{fd} vs {an}");
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            let fd = (sq(&mut lin, &xp) - sq(&mut lin, &xm)) / (2.0 * h);
            let an = gx.as_slice().unwrap()[i];
            assert!((fd - an).abs() < 1e-6 * fd.abs().max(1.0), "{fd} vs {an}");
        }
    }

    #[test]
    fn instance_norm_normalizes_and_backward_matches_fd() {
        let mut inorm = InstanceNorm2d::<f64>::new("t", 2);
        inorm.gamma.value[[0]] = 1.3;
        inorm.gamma.value[[1]] = 0.7;
        inorm.beta.value[[1]] = 0.2;
        let x = Array4::from_shape_fn((2, 2, 3, 3), |(a, b, c, d)| {
            ((a * 7 + b * 5 + c * 3 + d) % 13) as f64 / 13.0
        });
        let y = inorm.forward(&x, true);
        // per-plane mean of (y - beta)/gamma should be ~0, var ~1
        let plane = y.slice(ndarray::s![0, 0, .., ..]);
        let m: f64 = plane.iter().sum::<f64>() / 9.0;
        assert!((m - 0.0).abs() < 1e-9);

        let gy = y.mapv(|v| 2.0 * v);
        let gx = inorm.backward(&gy);
        let h = 1e-6;
        let sq = |n: &mut InstanceNorm2d<f64>, x: &Array4<f64>| -> f64 {
            n.forward(x, false).iter().map(|v| v * v).sum()
        };
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            let fd = (sq(&mut inorm, &xp) - sq(&mut inorm, &xm)) / (2.0 * h);
            let an = gx.as_slice().unwrap()[i];
            assert!(
                (fd - an).abs() < 1e-5 * fd.abs().max(1.0) + 1e-7,
                "x[{i}]: {fd} vs {an}"
            );
        }
        for ci in 0..2 {
            let orig = inorm.gamma.value[[ci]];
            inorm.gamma.value[[ci]] = orig + h;
            let lp = sq(&mut inorm, &x);
            inorm.gamma.value[[ci]] = orig - h;
            let lm = sq(&mut inorm, &x);
            inorm.gamma.value[[ci]] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = inorm.gamma.grad[[ci]];
            assert!((fd - an).abs() < 1e-5 * fd.abs().max(1.0), "{fd} vs {an}");
        }
    }

    #[test]
    fn activations_backward_match_fd() {
        for kind in [
            Activation::Relu,
            Activation::LeakyRelu(0.2),
            Activation::Sigmoid,
            Activation::Tanh,
        ] {
            let mut act = Act::<f64>::new(kind);
            let x = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 - 1.0) * 0.7 + j as f64 * 0.13);
            let y = act.forward2(&x, true);
            let gy = y.mapv(|v| 2.0 * v);
            let gx = act.backward2(&gy);
            let h = 1e-7;
            for i in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.as_slice_mut().unwrap()[i] += h;
                xm.as_slice_mut().unwrap()[i] -= h;
                let mut a2 = Act::<f64>::new(act.kind.clone());
                let lp: f64 = a2.forward2(&xp, false).iter().map(|v| v * v).sum();
                let lm: f64 = a2.forward2(&xm, false).iter().map(|v| v * v).sum();
                let fd = (lp - lm) / (2.0 * h);
                let an = gx.as_slice().unwrap()[i];
                assert!(
                    (fd - an).abs() < 1e-5 * fd.abs().max(1.0) + 1e-7,
                    "{:?} x[{i}]: {fd} vs {an}",
                    act.kind
                );
            }
        }
    }
}
