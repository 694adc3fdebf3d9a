//! Network building blocks shared by the attention network and ADGAN:
//! a ResNet-style encoder, a transposed-convolution decoder, small conv
//! heads, and a DCGAN-style discriminator.
//!
//! Instance normalization is used throughout so per-sample outputs never
//! depend on batch composition; that keeps eval deterministic and lets the
//! trainers run normal and anomaly branches through one forward pass.

use crate::nn::{
    Act, Activation, Conv2d, ConvTranspose2d, Init, InstanceNorm2d, Linear, Module, Param,
};
use crate::scalar::Scalar;
use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;

/// Basic residual block: conv-norm-relu-conv-norm plus (projected) shortcut.
#[derive(Clone, Debug)]
pub struct BasicBlock<S: Scalar> {
    conv1: Conv2d<S>,
    n1: InstanceNorm2d<S>,
    a1: Act<S>,
    conv2: Conv2d<S>,
    n2: InstanceNorm2d<S>,
    down: Option<(Conv2d<S>, InstanceNorm2d<S>)>,
    a2: Act<S>,
}

impl<S: Scalar> BasicBlock<S> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let down = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(&format!("{name}.down"), cin, cout, 1, stride, 0, Init::He, rng),
                InstanceNorm2d::new(&format!("{name}.down_n"), cout),
            ))
        } else {
            None
        };
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, stride, 1, Init::He, rng),
            n1: InstanceNorm2d::new(&format!("{name}.n1"), cout),
            a1: Act::new(Activation::Relu),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, 1, Init::He, rng),
            n2: InstanceNorm2d::new(&format!("{name}.n2"), cout),
            down,
            a2: Act::new(Activation::Relu),
        }
    }

    pub fn forward(&mut self, x: &Array4<S>, train: bool) -> Array4<S> {
        let mut h = self.conv1.forward(x, train);
        h = self.n1.forward(&h, train);
        h = self.a1.forward4(&h, train);
        h = self.conv2.forward(&h, train);
        h = self.n2.forward(&h, train);
        let shortcut = match &mut self.down {
            Some((c, n)) => {
                let s = c.forward(x, train);
                n.forward(&s, train)
            }
            None => x.clone(),
        };
        self.a2.forward4(&(h + shortcut), train)
    }

    pub fn backward(&mut self, gy: &Array4<S>) -> Array4<S> {
        let g = self.a2.backward4(gy);
        // main branch
        let gh = self.n2.backward(&g);
        let gh = self.conv2.backward(&gh);
        let gh = self.a1.backward4(&gh);
        let gh = self.n1.backward(&gh);
        let gx_main = self.conv1.backward(&gh);
        // shortcut branch
        let gx_short = match &mut self.down {
            Some((c, n)) => {
                let gs = n.backward(&g);
                c.backward(&gs)
            }
            None => g,
        };
        gx_main + gx_short
    }
}

impl<S: Scalar> Module<S> for BasicBlock<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.conv1.visit_params(f);
        self.n1.visit_params(f);
        self.conv2.visit_params(f);
        self.n2.visit_params(f);
        if let Some((c, n)) = &mut self.down {
            c.visit_params(f);
            n.visit_params(f);
        }
    }
}

/// ResNet-style encoder: stride-1 stem, then one downsampling stage per entry
/// of `blocks_per_stage` with channel doubling. Input H must be divisible by
/// 2^stages.
#[derive(Clone, Debug)]
pub struct ResNetEncoder<S: Scalar> {
    stem: Conv2d<S>,
    stem_n: InstanceNorm2d<S>,
    stem_a: Act<S>,
    blocks: Vec<BasicBlock<S>>,
    pub out_channels: usize,
    pub n_stages: usize,
}

impl<S: Scalar> ResNetEncoder<S> {
    pub fn new(
        name: &str,
        in_channels: usize,
        base_width: usize,
        blocks_per_stage: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut blocks = Vec::new();
        let mut cin = base_width;
        let mut width = base_width;
        for (si, &nb) in blocks_per_stage.iter().enumerate() {
            for bi in 0..nb {
                let stride = if bi == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(
                    &format!("{name}.s{si}b{bi}"),
                    cin,
                    width,
                    stride,
                    rng,
                ));
                cin = width;
            }
            if si + 1 < blocks_per_stage.len() {
                width *= 2;
            }
        }
        Self {
            stem: Conv2d::new(&format!("{name}.stem"), in_channels, base_width, 3, 1, 1, Init::He, rng),
            stem_n: InstanceNorm2d::new(&format!("{name}.stem_n"), base_width),
            stem_a: Act::new(Activation::Relu),
            blocks,
            out_channels: cin,
            n_stages: blocks_per_stage.len(),
        }
    }

    pub fn forward(&mut self, x: &Array4<S>, train: bool) -> Array4<S> {
        let mut h = self.stem.forward(x, train);
        h = self.stem_n.forward(&h, train);
        h = self.stem_a.forward4(&h, train);
        for b in &mut self.blocks {
            h = b.forward(&h, train);
        }
        h
    }

    pub fn backward(&mut self, gy: &Array4<S>) -> Array4<S> {
        let mut g = gy.clone();
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        let g = self.stem_a.backward4(&g);
        let g = self.stem_n.backward(&g);
        self.stem.backward(&g)
    }
}

impl<S: Scalar> Module<S> for ResNetEncoder<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.stem.visit_params(f);
        self.stem_n.visit_params(f);
        for b in &mut self.blocks {
            b.visit_params(f);
        }
    }
}

/// FC from the latent followed by transposed-conv upsampling stages back to
/// full resolution. Channel count halves per stage down to `min_width`.
#[derive(Clone, Debug)]
pub struct UpsampleDecoder<S: Scalar> {
    fc: Linear<S>,
    fc_a: Act<S>,
    ups: Vec<(ConvTranspose2d<S>, InstanceNorm2d<S>, Act<S>)>,
    pub c0: usize,
    pub s0: usize,
    pub out_channels: usize,
}

impl<S: Scalar> UpsampleDecoder<S> {
    pub fn new(
        name: &str,
        latent_dim: usize,
        c0: usize,
        s0: usize,
        n_stages: usize,
        min_width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fc = Linear::new(&format!("{name}.fc"), latent_dim, c0 * s0 * s0, Init::He, rng);
        let mut ups = Vec::new();
        let mut cin = c0;
        for i in 0..n_stages {
            let cout = (cin / 2).max(min_width);
            ups.push((
                ConvTranspose2d::new(&format!("{name}.up{i}"), cin, cout, 4, 2, 1, Init::He, rng),
                InstanceNorm2d::new(&format!("{name}.up{i}_n"), cout),
                Act::new(Activation::Relu),
            ));
            cin = cout;
        }
        Self {
            fc,
            fc_a: Act::new(Activation::Relu),
            ups,
            c0,
            s0,
            out_channels: cin,
        }
    }

    pub fn forward(&mut self, z: &Array2<S>, train: bool) -> Array4<S> {
        let n = z.dim().0;
        let flat = self.fc.forward(z, train);
        let flat = self.fc_a.forward2(&flat, train);
        let mut h = flat
            .into_shape_with_order((n, self.c0, self.s0, self.s0))
            .unwrap();
        for (up, norm, act) in &mut self.ups {
            h = up.forward(&h, train);
            h = norm.forward(&h, train);
            h = act.forward4(&h, train);
        }
        h
    }

    pub fn backward(&mut self, gy: &Array4<S>) -> Array2<S> {
        let mut g = gy.clone();
        for (up, norm, act) in self.ups.iter_mut().rev() {
            g = act.backward4(&g);
            g = norm.backward(&g);
            g = up.backward(&g);
        }
        let n = g.dim().0;
        let flat = g
            .into_shape_with_order((n, self.c0 * self.s0 * self.s0))
            .unwrap();
        let flat = self.fc_a.backward2(&flat);
        self.fc.backward(&flat)
    }
}

impl<S: Scalar> Module<S> for UpsampleDecoder<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.fc.visit_params(f);
        for (up, norm, _) in &mut self.ups {
            up.visit_params(f);
            norm.visit_params(f);
        }
    }
}

/// Three stride-1 convs mapping the decoder trunk to an output plane
/// (reconstruction, attention map or feature map) through a squashing
/// activation.
#[derive(Clone, Debug)]
pub struct ConvHead<S: Scalar> {
    c1: Conv2d<S>,
    a1: Act<S>,
    c2: Conv2d<S>,
    a2: Act<S>,
    c3: Conv2d<S>,
    out_a: Act<S>,
}

impl<S: Scalar> ConvHead<S> {
    pub fn new(
        name: &str,
        cin: usize,
        width: usize,
        cout: usize,
        out_act: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            c1: Conv2d::new(&format!("{name}.c1"), cin, width, 3, 1, 1, Init::He, rng),
            a1: Act::new(Activation::Relu),
            c2: Conv2d::new(&format!("{name}.c2"), width, width, 3, 1, 1, Init::He, rng),
            a2: Act::new(Activation::Relu),
            c3: Conv2d::new(&format!("{name}.c3"), width, cout, 3, 1, 1, Init::Xavier, rng),
            out_a: Act::new(out_act),
        }
    }

    pub fn forward(&mut self, x: &Array4<S>, train: bool) -> Array4<S> {
        let h = self.c1.forward(x, train);
        let h = self.a1.forward4(&h, train);
        let h = self.c2.forward(&h, train);
        let h = self.a2.forward4(&h, train);
        let h = self.c3.forward(&h, train);
        self.out_a.forward4(&h, train)
    }

    pub fn backward(&mut self, gy: &Array4<S>) -> Array4<S> {
        let g = self.out_a.backward4(gy);
        let g = self.c3.backward(&g);
        let g = self.a2.backward4(&g);
        let g = self.c2.backward(&g);
        let g = self.a1.backward4(&g);
        self.c1.backward(&g)
    }
}

impl<S: Scalar> Module<S> for ConvHead<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.c1.visit_params(f);
        self.c2.visit_params(f);
        self.c3.visit_params(f);
    }
}

/// DCGAN-style discriminator: strided 4x4 convs with LeakyReLU down to 4x4,
/// then a valid 4x4 conv to one logit per sample. The first layer carries no
/// normalization.
#[derive(Clone, Debug)]
pub struct Discriminator<S: Scalar> {
    layers: Vec<(Conv2d<S>, Option<InstanceNorm2d<S>>, Act<S>)>,
    final_conv: Conv2d<S>,
    pub in_channels: usize,
    pub image_size: usize,
}

impl<S: Scalar> Discriminator<S> {
    pub fn new(
        name: &str,
        in_channels: usize,
        width: usize,
        image_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(
            image_size >= 8 && image_size.is_power_of_two(),
            "discriminator needs a power-of-two image size >= 8, got {image_size}"
        );
        let n_down = (image_size / 4).trailing_zeros() as usize;
        let mut layers = Vec::new();
        let mut cin = in_channels;
        let mut w = width;
        for i in 0..n_down {
            let norm = if i == 0 {
                None
            } else {
                Some(InstanceNorm2d::new(&format!("{name}.l{i}_n"), w))
            };
            layers.push((
                Conv2d::new(&format!("{name}.l{i}"), cin, w, 4, 2, 1, Init::Normal(0.02), rng),
                norm,
                Act::new(Activation::LeakyRelu(0.2)),
            ));
            cin = w;
            w *= 2;
        }
        let final_conv = Conv2d::new(&format!("{name}.out"), cin, 1, 4, 1, 0, Init::Normal(0.02), rng);
        Self {
            layers,
            final_conv,
            in_channels,
            image_size,
        }
    }

    /// Per-sample logits [N, 1].
    pub fn forward_logits(&mut self, x: &Array4<S>, train: bool) -> Array2<S> {
        let mut h = x.clone();
        for (conv, norm, act) in &mut self.layers {
            h = conv.forward(&h, train);
            if let Some(n) = norm {
                h = n.forward(&h, train);
            }
            h = act.forward4(&h, train);
        }
        let out = self.final_conv.forward(&h, train); // [N,1,1,1]
        let n = out.dim().0;
        out.into_shape_with_order((n, 1)).unwrap()
    }

    /// Backprop from logit grads to the input; parameter grads accumulate.
    pub fn backward_logits(&mut self, glogits: &Array2<S>) -> Array4<S> {
        let n = glogits.dim().0;
        let g4 = glogits
            .clone()
            .into_shape_with_order((n, 1, 1, 1))
            .unwrap();
        let mut g = self.final_conv.backward(&g4);
        for (conv, norm, act) in self.layers.iter_mut().rev() {
            g = act.backward4(&g);
            if let Some(nm) = norm {
                g = nm.backward(&g);
            }
            g = conv.backward(&g);
        }
        g
    }

    /// Probability-like realness scores in (0,1), eval mode.
    pub fn forward_probs(&mut self, x: &Array4<S>) -> Vec<S> {
        let logits = self.forward_logits(x, false);
        logits
            .iter()
            .map(|&z| S::one() / (S::one() + (-z).exp()))
            .collect()
    }
}

impl<S: Scalar> Module<S> for Discriminator<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        for (conv, norm, _) in &mut self.layers {
            conv.visit_params(f);
            if let Some(n) = norm {
                n.visit_params(f);
            }
        }
        self.final_conv.visit_params(f);
    }
}
