//! A small CPU neural-network engine: conv / transposed-conv / dense layers
//! with hand-written backward passes, instance normalization, Adam, and
//! seeded initialization. Generic over [`crate::Scalar`]; training runs in
//! f32, gradient checks in f64.

pub mod conv;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod param;

pub use conv::{conv_out_size, conv_transpose_out_size, Conv2d, ConvTranspose2d};
pub use init::Init;
pub use layers::{sigmoid2, softplus, Act, Activation, InstanceNorm2d, Linear};
pub use param::{grad_norm_sq, param_count, zero_grads, Adam, Module, Param};
