//! Seeded weight initialization.

use crate::rng::standard_normal;
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// N(0, sqrt(2/fan_in)) - for ReLU-family layers.
    He,
    /// N(0, sqrt(2/(fan_in+fan_out))) - for sigmoid/tanh heads.
    Xavier,
    /// N(0, std) with a fixed std (DCGAN-style discriminators use 0.02).
    Normal(f64),
}

impl Init {
    pub fn sample<S: Scalar>(
        self,
        rng: &mut ChaCha8Rng,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) -> ArrayD<S> {
        let std = match self {
            Init::He => (2.0 / fan_in as f64).sqrt(),
            Init::Xavier => (2.0 / (fan_in + fan_out) as f64).sqrt(),
            Init::Normal(s) => s,
        };
        let mut out = ArrayD::zeros(IxDyn(shape));
        for v in out.iter_mut() {
            *v = S::from_f64(standard_normal(rng) * std);
        }
        out
    }
}
