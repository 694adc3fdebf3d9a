//! Floating-point scalar abstraction: everything numeric in this crate is
//! generic over [`Scalar`] so the same code runs in f32 (training) and f64
//! (gradient checking).

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssignOps};

/// f32 or f64.
pub trait Scalar:
    Float
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const KIND: ScalarKind;

    fn from_f64(v: f64) -> Self {
        Self::from(v).expect("finite f64 converts to any Scalar")
    }

    fn as_f64(self) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarKind {
    F32,
    F64,
}

impl ScalarKind {
    pub fn name(self) -> &'static str {
        match self {
            ScalarKind::F32 => "f32",
            ScalarKind::F64 => "f64",
        }
    }
}

impl Scalar for f32 {
    const KIND: ScalarKind = ScalarKind::F32;

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const KIND: ScalarKind = ScalarKind::F64;

    fn as_f64(self) -> f64 {
        self
    }
}
