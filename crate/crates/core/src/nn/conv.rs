//! 2D convolution and transposed convolution via im2col + GEMM, with
//! hand-written backward passes. All loops run in a fixed order so results
//! are bit-reproducible.

use super::init::Init;
use super::param::{Module, Param};
use crate::scalar::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView3, ArrayViewMut3, Axis};
use rand_chacha::ChaCha8Rng;

/// Output spatial size of a convolution.
pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Output spatial size of a transposed convolution.
pub fn conv_transpose_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + k - 2 * pad
}

/// Unfold `x` [C,H,W] into columns [C*k*k, ho*wo] for a (k, stride, pad) conv.
fn im2col<S: Scalar>(
    x: &ArrayView3<S>,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut Array2<S>,
) {
    let (c, h, w) = x.dim();
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    debug_assert_eq!(cols.dim(), (c * k * k, ho * wo));
    let xs = x.as_slice().expect("im2col input must be contiguous");
    let cs = cols.as_slice_mut().expect("cols contiguous");
    // valid ox range for a kernel column kx: 0 <= ox*stride + kx - pad < w
    let ox_range = |kx: usize| -> (usize, usize) {
        let lo = if kx < pad { (pad - kx).div_ceil(stride) } else { 0 };
        let hi = if w + pad > kx {
            ((w + pad - kx - 1) / stride + 1).min(wo)
        } else {
            0
        };
        (lo.min(wo), hi.max(lo.min(wo)))
    };
    let mut row = 0usize;
    for ci in 0..c {
        let xc = &xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let (x_lo, x_hi) = ox_range(kx);
                let base = row * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let out = &mut cs[base + oy * wo..base + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out.fill(S::zero());
                        continue;
                    }
                    let in_row = iy as usize * w;
                    out[..x_lo].fill(S::zero());
                    out[x_hi..].fill(S::zero());
                    if stride == 1 {
                        let ix0 = x_lo + kx - pad;
                        out[x_lo..x_hi].copy_from_slice(&xc[in_row + ix0..in_row + ix0 + (x_hi - x_lo)]);
                    } else {
                        for ox in x_lo..x_hi {
                            out[ox] = xc[in_row + ox * stride + kx - pad];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold columns back, accumulating overlaps; inverse layout of [`im2col`].
fn col2im<S: Scalar>(
    cols: &Array2<S>,
    k: usize,
    stride: usize,
    pad: usize,
    mut out: ArrayViewMut3<S>,
) {
    let (c, h, w) = out.dim();
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    debug_assert_eq!(cols.dim(), (c * k * k, ho * wo));
    let cs = cols.as_slice().expect("cols contiguous");
    let os = out.as_slice_mut().expect("out contiguous");
    os.fill(S::zero());
    let ox_range = |kx: usize| -> (usize, usize) {
        let lo = if kx < pad { (pad - kx).div_ceil(stride) } else { 0 };
        let hi = if w + pad > kx {
            ((w + pad - kx - 1) / stride + 1).min(wo)
        } else {
            0
        };
        (lo.min(wo), hi.max(lo.min(wo)))
    };
    let mut row = 0usize;
    for ci in 0..c {
        let oc = ci * h * w;
        for ky in 0..k {
            for kx in 0..k {
                let (x_lo, x_hi) = ox_range(kx);
                let base = row * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = oc + iy as usize * w;
                    let col = &cs[base + oy * wo..base + (oy + 1) * wo];
                    if stride == 1 {
                        let ix0 = x_lo + kx - pad;
                        let dst = &mut os[in_row + ix0..in_row + ix0 + (x_hi - x_lo)];
                        for (d, &v) in dst.iter_mut().zip(&col[x_lo..x_hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in x_lo..x_hi {
                            os[in_row + ox * stride + kx - pad] += col[ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Standard 2D convolution. Weight is stored flat as [cout, cin*k*k].
#[derive(Clone, Debug)]
pub struct Conv2d<S: Scalar> {
    pub w: Param<S>,
    pub b: Param<S>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    cache_x: Option<Array4<S>>,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * k * k;
        let fan_out = cout * k * k;
        let w = init.sample::<S>(rng, &[cout, cin * k * k], fan_in, fan_out);
        let b = ndarray::ArrayD::zeros(ndarray::IxDyn(&[cout]));
        Self {
            w: Param::new(format!("{name}.w"), w),
            b: Param::new(format!("{name}.b"), b),
            cin,
            cout,
            k,
            stride,
            pad,
            cache_x: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_size(h, self.k, self.stride, self.pad),
            conv_out_size(w, self.k, self.stride, self.pad),
        )
    }

    pub fn forward(&mut self, x: &Array4<S>, train: bool) -> Array4<S> {
        let (n, cin, h, w) = x.dim();
        assert_eq!(cin, self.cin, "{}: channel mismatch", self.w.name);
        let (ho, wo) = self.out_hw(h, w);
        let mut out = Array4::zeros((n, self.cout, ho, wo));
        let mut cols = Array2::zeros((self.cin * self.k * self.k, ho * wo));
        let w2 = self
            .w
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        for ni in 0..n {
            im2col(
                &x.index_axis(Axis(0), ni),
                self.k,
                self.stride,
                self.pad,
                &mut cols,
            );
            let mut out_mat = out
                .index_axis_mut(Axis(0), ni)
                .into_shape_with_order((self.cout, ho * wo))
                .unwrap();
            general_mat_mul(S::one(), &w2, &cols.view(), S::zero(), &mut out_mat);
            for (co, mut row) in out_mat.outer_iter_mut().enumerate() {
                let b = self.b.value[[co]];
                row.mapv_inplace(|v| v + b);
            }
        }
        self.cache_x = if train { Some(x.clone()) } else { None };
        out
    }

    pub fn backward(&mut self, gy: &Array4<S>) -> Array4<S> {
        let x = self.cache_x.as_ref().expect("forward(train) before backward");
        let (n, _, h, w) = x.dim();
        let (ho, wo) = self.out_hw(h, w);
        let mut gx = Array4::zeros(x.raw_dim());
        let mut cols = Array2::zeros((self.cin * self.k * self.k, ho * wo));
        let mut dcols = Array2::zeros((self.cin * self.k * self.k, ho * wo));
        let w2 = self
            .w
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut dw2 = self
            .w
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        for ni in 0..n {
            let gy_mat = gy
                .index_axis(Axis(0), ni)
                .into_shape_with_order((self.cout, ho * wo))
                .unwrap();
            // bias grad
            for (co, row) in gy_mat.outer_iter().enumerate() {
                self.b.grad[[co]] += row.iter().fold(S::zero(), |a, &v| a + v);
            }
            // weight grad: dW += gy . cols^T
            im2col(
                &x.index_axis(Axis(0), ni),
                self.k,
                self.stride,
                self.pad,
                &mut cols,
            );
            general_mat_mul(S::one(), &gy_mat, &cols.t(), S::one(), &mut dw2);
            // input grad: col2im(W^T . gy)
            general_mat_mul(S::one(), &w2.t(), &gy_mat, S::zero(), &mut dcols);
            col2im(
                &dcols,
                self.k,
                self.stride,
                self.pad,
                gx.index_axis_mut(Axis(0), ni),
            );
        }
        gx
    }
}

impl<S: Scalar> Module<S> for Conv2d<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Transposed 2D convolution (fractionally strided). Weight layout is
/// [cin, cout*k*k]; with k=4, stride=2, pad=1 it doubles spatial dims.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<S: Scalar> {
    pub w: Param<S>,
    pub b: Param<S>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    cache_x: Option<Array4<S>>,
}

impl<S: Scalar> ConvTranspose2d<S> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // fan_in per output element is cin * (k/stride)^2; use cin*k*k as a
        // conservative stand-in, matching the forward conv convention.
        let fan_in = cin * k * k;
        let fan_out = cout * k * k;
        let w = init.sample::<S>(rng, &[cin, cout * k * k], fan_in, fan_out);
        let b = ndarray::ArrayD::zeros(ndarray::IxDyn(&[cout]));
        Self {
            w: Param::new(format!("{name}.w"), w),
            b: Param::new(format!("{name}.b"), b),
            cin,
            cout,
            k,
            stride,
            pad,
            cache_x: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_transpose_out_size(h, self.k, self.stride, self.pad),
            conv_transpose_out_size(w, self.k, self.stride, self.pad),
        )
    }

    pub fn forward(&mut self, x: &Array4<S>, train: bool) -> Array4<S> {
        let (n, cin, hi, wi) = x.dim();
        assert_eq!(cin, self.cin, "{}: channel mismatch", self.w.name);
        let (ho, wo) = self.out_hw(hi, wi);
        let mut out = Array4::zeros((n, self.cout, ho, wo));
        let mut cols = Array2::zeros((self.cout * self.k * self.k, hi * wi));
        let w2 = self
            .w
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        for ni in 0..n {
            let x_mat = x
                .index_axis(Axis(0), ni)
                .into_shape_with_order((self.cin, hi * wi))
                .unwrap();
            general_mat_mul(S::one(), &w2.t(), &x_mat, S::zero(), &mut cols);
            col2im(
                &cols,
                self.k,
                self.stride,
                self.pad,
                out.index_axis_mut(Axis(0), ni),
            );
            let mut out3 = out.index_axis_mut(Axis(0), ni);
            for (co, mut plane) in out3.outer_iter_mut().enumerate() {
                let b = self.b.value[[co]];
                plane.mapv_inplace(|v| v + b);
            }
        }
        self.cache_x = if train { Some(x.clone()) } else { None };
        out
    }

    pub fn backward(&mut self, gy: &Array4<S>) -> Array4<S> {
        let x = self.cache_x.as_ref().expect("forward(train) before backward");
        let (n, _, hi, wi) = x.dim();
        let mut gx = Array4::zeros(x.raw_dim());
        let mut gy_cols = Array2::zeros((self.cout * self.k * self.k, hi * wi));
        let w2 = self
            .w
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut dw2 = self
            .w
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        for ni in 0..n {
            let gy3 = gy.index_axis(Axis(0), ni);
            for (co, plane) in gy3.outer_iter().enumerate() {
                self.b.grad[[co]] += plane.iter().fold(S::zero(), |a, &v| a + v);
            }
            im2col(&gy3, self.k, self.stride, self.pad, &mut gy_cols);
            let x_mat = x
                .index_axis(Axis(0), ni)
                .into_shape_with_order((self.cin, hi * wi))
                .unwrap();
            // dW += x . gy_cols^T
            general_mat_mul(S::one(), &x_mat, &gy_cols.t(), S::one(), &mut dw2);
            // dx = W . gy_cols
            let mut gx_mat = gx
                .index_axis_mut(Axis(0), ni)
                .into_shape_with_order((self.cin, hi * wi))
                .unwrap();
            general_mat_mul(S::one(), &w2, &gy_cols.view(), S::zero(), &mut gx_mat);
        }
        gx
    }
}

impl<S: Scalar> Module<S> for ConvTranspose2d<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}
