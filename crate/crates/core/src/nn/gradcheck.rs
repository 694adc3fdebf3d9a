//! Central finite-difference checking of analytic gradients.
//!
//! Callers compute analytic gradients into the module's `Param::grad`
//! buffers, then hand a pure loss closure here; every n-th parameter element
//! is perturbed centrally and compared. Intended for f64 instantiations.

use super::param::{Module, Param};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter elements where both analytic and FD gradients were ~0.
    pub skipped_zero: usize,
    /// (finite-difference, analytic) pair at the worst element.
    pub worst: (f64, f64),
}

/// Compare analytic grads (already stored in the module) against central
/// finite differences of `loss_fn`. `stride` subsamples parameter elements;
/// `h_scale` sets the relative step. Gradients smaller than `zero_tol` on
/// both sides are counted as matching zeros.
pub fn check_grads<S, M, F>(
    module: &mut M,
    mut loss_fn: F,
    stride: usize,
    h_scale: f64,
    zero_tol: f64,
) -> GradCheckReport
where
    S: Scalar,
    M: Module<S>,
    F: FnMut(&mut M) -> f64,
{
    // Snapshot grads first: loss_fn re-runs forward passes which must not
    // touch them, but be defensive about ordering.
    let mut names: Vec<String> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    module.visit_params(&mut |p: &mut Param<S>| {
        names.push(p.name.clone());
        sizes.push(p.value.len());
    });

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        skipped_zero: 0,
        worst: (0.0, 0.0),
    };

    for (pi, size) in sizes.iter().enumerate() {
        for ei in (0..*size).step_by(stride.max(1)) {
            let (orig, analytic) = with_param_element(module, pi, ei, |v, g| (v, g));
            let h = h_scale * orig.abs().max(1.0);
            set_param_element(module, pi, ei, orig + h);
            let lp = loss_fn(module);
            set_param_element(module, pi, ei, orig - h);
            let lm = loss_fn(module);
            set_param_element(module, pi, ei, orig);
            let fd = (lp - lm) / (2.0 * h);
            if fd.abs() < zero_tol && analytic.abs() < zero_tol {
                report.skipped_zero += 1;
                continue;
            }
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(zero_tol);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (fd, analytic);
            }
            report.checked += 1;
        }
    }
    report
}

fn with_param_element<S: Scalar, M: Module<S>, R>(
    module: &mut M,
    pi: usize,
    ei: usize,
    f: impl FnOnce(f64, f64) -> R,
) -> R {
    let mut out = None;
    let mut idx = 0usize;
    module.visit_params(&mut |p: &mut Param<S>| {
        if idx == pi {
            let v = p.value.as_slice().expect("contiguous")[ei].as_f64();
            let g = p.grad.as_slice().expect("contiguous")[ei].as_f64();
            out = Some((v, g));
        }
        idx += 1;
    });
    let (v, g) = out.expect("param index in range");
    f(v, g)
}

fn set_param_element<S: Scalar, M: Module<S>>(module: &mut M, pi: usize, ei: usize, v: f64) {
    let mut idx = 0usize;
    module.visit_params(&mut |p: &mut Param<S>| {
        if idx == pi {
            p.value.as_slice_mut().expect("contiguous")[ei] = S::from_f64(v);
        }
        idx += 1;
    });
}
