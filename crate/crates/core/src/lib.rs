pub mod adgan;
pub mod attention;
pub mod backbones;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod types;
pub mod viz;

pub use scalar::Scalar;
pub use types::{AttentionMask, FeatureMap, ImageTensor};

/// Default training precision; gradient checks instantiate the same code in f64.
pub type Real = f32;
pub type ImageTensorF = ImageTensor<Real>;
pub type AttentionMaskF = AttentionMask<Real>;
pub type FeatureMapF = FeatureMap<Real>;
