//! Core tensor carriers for the pipeline.
//!
//! [`ImageTensor`] is an `[N, C, H, W]` batch with values in `[0, 1]`;
//! [`AttentionMask`] is `[N, 1, H, W]` with 1 = normal region, 0 =
//! useless/anomalous region. Ground-truth masks are binary, generated maps
//! may be fractional.

use crate::error::ShapeError;
use crate::scalar::Scalar;
use ndarray::{s, Array4, Axis};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<S: Scalar> {
    data: Array4<S>,
}

impl<S: Scalar> ImageTensor<S> {
    /// Validating constructor: values must be in [0,1] and C must be 1 or 3.
    pub fn new(data: Array4<S>) -> Result<Self, ShapeError> {
        let (_, c, h, w) = data.dim();
        if !(c == 1 || c == 3) || h == 0 || w == 0 {
            return Err(ShapeError::Mismatch {
                expected: "[N, 1|3, H>0, W>0]".into(),
                got: format!("{:?}", data.dim()),
            });
        }
        if data.iter().any(|&v| v < S::zero() || v > S::one()) {
            return Err(ShapeError::OutOfRange);
        }
        Ok(Self { data })
    }

    /// For internal ops whose output range is guaranteed by construction.
    pub(crate) fn new_unchecked(data: Array4<S>) -> Self {
        debug_assert!(data.iter().all(|&v| v >= S::zero() && v <= S::one()));
        Self { data }
    }

    pub fn data(&self) -> &Array4<S> {
        &self.data
    }

    pub fn into_data(self) -> Array4<S> {
        self.data
    }

    pub fn batch_size(&self) -> usize {
        self.data.dim().0
    }

    pub fn channels(&self) -> usize {
        self.data.dim().1
    }

    pub fn height(&self) -> usize {
        self.data.dim().2
    }

    pub fn width(&self) -> usize {
        self.data.dim().3
    }

    /// One image as a batch of size 1.
    pub fn single(&self, index: usize) -> ImageTensor<S> {
        let v = self.data.slice(s![index..index + 1, .., .., ..]);
        Self {
            data: v.to_owned(),
        }
    }

    /// Stack a list of size-1 (or larger) batches along N.
    pub fn concat(parts: &[&ImageTensor<S>]) -> Result<Self, ShapeError> {
        let views: Vec<_> = parts.iter().map(|p| p.data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views).map_err(|e| ShapeError::Invalid(e.to_string()))?;
        Ok(Self { data })
    }

    pub fn select(&self, indices: &[usize]) -> ImageTensor<S> {
        let data = self.data.select(Axis(0), indices);
        Self { data }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask<S: Scalar> {
    data: Array4<S>,
}

impl<S: Scalar> AttentionMask<S> {
    pub fn new(data: Array4<S>) -> Result<Self, ShapeError> {
        let (_, c, h, w) = data.dim();
        if c != 1 || h == 0 || w == 0 {
            return Err(ShapeError::Mismatch {
                expected: "[N, 1, H>0, W>0]".into(),
                got: format!("{:?}", data.dim()),
            });
        }
        if data.iter().any(|&v| v < S::zero() || v > S::one()) {
            return Err(ShapeError::OutOfRange);
        }
        Ok(Self { data })
    }

    pub(crate) fn new_unchecked(data: Array4<S>) -> Self {
        debug_assert!(data.iter().all(|&v| v >= S::zero() && v <= S::one()));
        Self { data }
    }

    /// Fully activated map (all normal).
    pub fn ones(n: usize, h: usize, w: usize) -> Self {
        Self {
            data: Array4::from_elem((n, 1, h, w), S::one()),
        }
    }

    /// Fully deactivated map (everything anomalous/useless).
    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        Self {
            data: Array4::zeros((n, 1, h, w)),
        }
    }

    pub fn data(&self) -> &Array4<S> {
        &self.data
    }

    pub fn into_data(self) -> Array4<S> {
        self.data
    }

    pub fn batch_size(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().2
    }

    pub fn width(&self) -> usize {
        self.data.dim().3
    }

    /// Ground-truth masks must be exactly {0, 1}.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == S::zero() || v == S::one())
    }

    pub fn single(&self, index: usize) -> AttentionMask<S> {
        let v = self.data.slice(s![index..index + 1, .., .., ..]);
        Self {
            data: v.to_owned(),
        }
    }

    pub fn concat(parts: &[&AttentionMask<S>]) -> Result<Self, ShapeError> {
        let views: Vec<_> = parts.iter().map(|p| p.data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views).map_err(|e| ShapeError::Invalid(e.to_string()))?;
        Ok(Self { data })
    }

    pub fn select(&self, indices: &[usize]) -> AttentionMask<S> {
        let data = self.data.select(Axis(0), indices);
        Self { data }
    }

    /// Count of zero-valued pixels, summed over the batch.
    pub fn zero_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == S::zero()).count()
    }
}

/// `[N, K, H, W]` feature tensor produced by the ADGAN feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<S: Scalar> {
    pub data: Array4<S>,
}

impl<S: Scalar> FeatureMap<S> {
    pub fn new(data: Array4<S>) -> Self {
        Self { data }
    }

    pub fn batch_size(&self) -> usize {
        self.data.dim().0
    }

    pub fn channels(&self) -> usize {
        self.data.dim().1
    }

    pub fn height(&self) -> usize {
        self.data.dim().2
    }

    pub fn width(&self) -> usize {
        self.data.dim().3
    }
}

/// Check that two spatial shapes agree; used by ops that pair images, masks
/// and features.
pub fn check_spatial_match(
    what: &str,
    (h1, w1): (usize, usize),
    (h2, w2): (usize, usize),
) -> Result<(), ShapeError> {
    if (h1, w1) != (h2, w2) {
        return Err(ShapeError::Mismatch {
            expected: format!("{what}: {h1}x{w1}"),
            got: format!("{h2}x{w2}"),
        });
    }
    Ok(())
}
