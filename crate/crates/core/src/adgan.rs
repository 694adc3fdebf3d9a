//! Stage 2: the anomaly detection GAN.
//!
//! Images pass through a two-layer stride-1 feature extractor; the frozen
//! stage-1 attention map is multiplied point-wise onto the features (Eq. of
//! the masked feature map), and a GAN learns the distribution of those masked
//! normal features. The discriminator's realness output, inverted, is the
//! image-level anomaly score.

use crate::attention::{AttentionNet, ForwardMode, LossBundle};
use crate::backbones::{ConvHead, Discriminator, ResNetEncoder, UpsampleDecoder};
use crate::error::{ConfigError, ShapeError, TrainError};
use crate::nn::{zero_grads, Act, Activation, Adam, Conv2d, Init, Linear, Module, Param};
use crate::rng::{self, standard_normal, stream};
use crate::scalar::Scalar;
use crate::types::{AttentionMask, FeatureMap, ImageTensor};
use ndarray::{s, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdganConfig {
    /// Feature channels K produced by the extractor.
    pub feature_channels: usize,
    pub latent_dim: usize,
    pub base_width: usize,
    pub enc_blocks: Vec<usize>,
    pub head_width: usize,
    pub disc_width: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub adv_weight: f64,
    /// Weight of the feature-reconstruction term (0 disables it).
    pub rec_weight: f64,
    pub kl_weight: f64,
    /// Train the extractor jointly with the generator; when false its random
    /// initialization stays frozen.
    pub train_extractor: bool,
    pub label_smoothing: f64,
}

impl Default for AdganConfig {
    fn default() -> Self {
        Self {
            feature_channels: 64,
            latent_dim: 64,
            base_width: 16,
            enc_blocks: vec![1, 1, 1, 1],
            head_width: 16,
            disc_width: 32,
            lr: 2e-4,
            betas: (0.5, 0.999),
            adv_weight: 1.0,
            rec_weight: 1.0,
            kl_weight: 1.0,
            train_extractor: true,
            label_smoothing: 0.0,
        }
    }
}

impl AdganConfig {
    pub fn validate(&self, image_size: usize) -> Result<(), ConfigError> {
        let inv = |field: &str, reason: String| ConfigError::InvalidField {
            field: field.into(),
            reason,
        };
        if self.feature_channels == 0 {
            return Err(inv("feature_channels", "must be positive".into()));
        }
        if self.enc_blocks.is_empty() || self.enc_blocks.iter().any(|&b| b == 0) {
            return Err(inv("enc_blocks", "needs at least one nonzero stage".into()));
        }
        if image_size % (1 << self.enc_blocks.len()) != 0 {
            return Err(inv(
                "enc_blocks",
                format!(
                    "{image_size} not divisible into {} stages",
                    self.enc_blocks.len()
                ),
            ));
        }
        for (name, v) in [
            ("adv_weight", self.adv_weight),
            ("rec_weight", self.rec_weight),
            ("kl_weight", self.kl_weight),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(inv(name, "must be finite and >= 0".into()));
            }
        }
        if self.lr <= 0.0 {
            return Err(inv("lr", "must be positive".into()));
        }
        Ok(())
    }
}

/// Two stride-1 convolutions with an odd nonlinearity; spatial dims are
/// preserved so the attention map applies without resampling.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<S: Scalar> {
    c1: Conv2d<S>,
    a1: Act<S>,
    c2: Conv2d<S>,
    a2: Act<S>,
    pub out_channels: usize,
}

impl<S: Scalar> FeatureExtractor<S> {
    pub fn new(
        name: &str,
        in_channels: usize,
        feature_channels: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        Self {
            c1: Conv2d::new(&format!("{name}.c1"), in_channels, feature_channels, 3, 1, 1, Init::He, rng),
            a1: Act::new(Activation::Tanh),
            c2: Conv2d::new(&format!("{name}.c2"), feature_channels, feature_channels, 3, 1, 1, Init::He, rng),
            a2: Act::new(Activation::Tanh),
            out_channels: feature_channels,
        }
    }

    pub fn forward(&mut self, x: &Array4<S>, train: bool) -> Array4<S> {
        let h = self.c1.forward(x, train);
        let h = self.a1.forward4(&h, train);
        let h = self.c2.forward(&h, train);
        self.a2.forward4(&h, train)
    }

    pub fn backward(&mut self, gy: &Array4<S>) -> Array4<S> {
        let g = self.a2.backward4(gy);
        let g = self.c2.backward(&g);
        let g = self.a1.backward4(&g);
        self.c1.backward(&g)
    }
}

impl<S: Scalar> Module<S> for FeatureExtractor<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.c1.visit_params(f);
        self.c2.visit_params(f);
    }
}

/// Point-wise multiplication of a feature map by an attention map, broadcast
/// across feature channels.
pub fn mask_features<S: Scalar>(
    f: &FeatureMap<S>,
    a: &AttentionMask<S>,
) -> Result<FeatureMap<S>, ShapeError> {
    let (n, k, h, w) = f.data.dim();
    let (na, _, ha, wa) = a.data().dim();
    if na != n || ha != h || wa != w {
        return Err(ShapeError::Mismatch {
            expected: format!("attention map [{n},1,{h},{w}]"),
            got: format!("{:?}", a.data().dim()),
        });
    }
    let mut out = f.data.clone();
    for ni in 0..n {
        let plane = a.data().slice(s![ni, 0, .., ..]);
        for ki in 0..k {
            let mut ch = out.slice_mut(s![ni, ki, .., ..]);
            ndarray::Zip::from(&mut ch).and(&plane).for_each(|o, &m| {
                *o = *o * m;
            });
        }
    }
    Ok(FeatureMap::new(out))
}

/// Gradient of [`mask_features`] with respect to the features.
fn mask_features_backward<S: Scalar>(g: &Array4<S>, a: &AttentionMask<S>) -> Array4<S> {
    let (n, k, _, _) = g.dim();
    let mut out = g.clone();
    for ni in 0..n {
        let plane = a.data().slice(s![ni, 0, .., ..]);
        for ki in 0..k {
            let mut ch = out.slice_mut(s![ni, ki, .., ..]);
            ndarray::Zip::from(&mut ch).and(&plane).for_each(|o, &m| {
                *o = *o * m;
            });
        }
    }
    out
}

/// Feature-space adversarial VAE: same encoder/decoder scheme as the
/// attention generator with a single feature-reconstruction head.
#[derive(Clone, Debug)]
pub struct AdganGenerator<S: Scalar> {
    enc: ResNetEncoder<S>,
    fc_mu: Linear<S>,
    fc_logvar: Linear<S>,
    dec: UpsampleDecoder<S>,
    head: ConvHead<S>,
    bottleneck: usize,
    enc_channels: usize,
    cache: Option<(Array2<S>, Array2<S>)>, // (eps, std)
}

pub struct AdganGenOutput<S: Scalar> {
    pub recon: Array4<S>,
    pub mu: Array2<S>,
    pub logvar: Array2<S>,
}

impl<S: Scalar> AdganGenerator<S> {
    pub fn new(
        cfg: &AdganConfig,
        image_size: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let enc = ResNetEncoder::new(
            "adgen.enc",
            cfg.feature_channels,
            cfg.base_width,
            &cfg.enc_blocks,
            rng,
        );
        let enc_channels = enc.out_channels;
        let stages = cfg.enc_blocks.len();
        let bott = image_size >> stages;
        let flat = enc_channels * bott * bott;
        let fc_mu = Linear::new("adgen.fc_mu", flat, cfg.latent_dim, Init::Xavier, rng);
        let fc_logvar = Linear::new("adgen.fc_logvar", flat, cfg.latent_dim, Init::Xavier, rng);
        let dec = UpsampleDecoder::new(
            "adgen.dec",
            cfg.latent_dim,
            enc_channels,
            bott,
            stages,
            cfg.base_width,
            rng,
        );
        let head = ConvHead::new(
            "adgen.head",
            dec.out_channels,
            cfg.head_width,
            cfg.feature_channels,
            Activation::Tanh,
            rng,
        );
        Self {
            enc,
            fc_mu,
            fc_logvar,
            dec,
            head,
            bottleneck: bott,
            enc_channels,
            cache: None,
        }
    }

    pub fn forward(&mut self, f_nor: &Array4<S>, mode: ForwardMode<S>) -> AdganGenOutput<S> {
        let train = matches!(mode, ForwardMode::Train { .. });
        let n = f_nor.dim().0;
        let enc = self.enc.forward(f_nor, train);
        let flat = enc
            .into_shape_with_order((n, self.enc_channels * self.bottleneck * self.bottleneck))
            .unwrap();
        let mu = self.fc_mu.forward(&flat, train);
        let logvar = self.fc_logvar.forward(&flat, train);
        let half = S::from_f64(0.5);
        let z = match mode {
            ForwardMode::Eval => mu.clone(),
            ForwardMode::Train { eps } => {
                let std = logvar.mapv(|lv| (half * lv).exp());
                let z = &mu + &(&std * eps);
                self.cache = Some((eps.clone(), std));
                z
            }
        };
        let trunk = self.dec.forward(&z, train);
        let recon = self.head.forward(&trunk, train);
        AdganGenOutput { recon, mu, logvar }
    }

    /// Backward to the generator input (the masked feature map).
    pub fn backward(
        &mut self,
        g_recon: &Array4<S>,
        g_mu: &Array2<S>,
        g_logvar: &Array2<S>,
    ) -> Array4<S> {
        let (eps, std) = self.cache.as_ref().expect("train forward before backward");
        let gt = self.head.backward(g_recon);
        let gz = self.dec.backward(&gt);
        let half = S::from_f64(0.5);
        let dmu = &gz + g_mu;
        let dlv_path = ndarray::Zip::from(&gz)
            .and(eps)
            .and(std)
            .map_collect(|&dz, &e, &sd| dz * e * sd * half);
        let dlogvar = &dlv_path + g_logvar;
        let gflat = self.fc_mu.backward(&dmu) + self.fc_logvar.backward(&dlogvar);
        let n = gflat.dim().0;
        let genc = gflat
            .into_shape_with_order((n, self.enc_channels, self.bottleneck, self.bottleneck))
            .unwrap();
        self.enc.backward(&genc)
    }
}

impl<S: Scalar> Module<S> for AdganGenerator<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.enc.visit_params(f);
        self.fc_mu.visit_params(f);
        self.fc_logvar.visit_params(f);
        self.dec.visit_params(f);
        self.head.visit_params(f);
    }
}

/// Extractor + feature GAN.
#[derive(Clone, Debug)]
pub struct AdganNet<S: Scalar> {
    pub cfg: AdganConfig,
    pub image_size: usize,
    pub image_channels: usize,
    pub extractor: FeatureExtractor<S>,
    pub gen: AdganGenerator<S>,
    pub disc: Discriminator<S>,
}

impl<S: Scalar> AdganNet<S> {
    pub fn new(
        cfg: &AdganConfig,
        image_channels: usize,
        image_size: usize,
        seed: u64,
    ) -> Result<Self, ConfigError> {
        cfg.validate(image_size)?;
        let mut rng = stream(seed, &[rng::TAG_INIT, rng::TAG_STAGE2]);
        let extractor =
            FeatureExtractor::new("adext", image_channels, cfg.feature_channels, &mut rng);
        let gen = AdganGenerator::new(cfg, image_size, &mut rng);
        let disc = Discriminator::new(
            "addisc",
            cfg.feature_channels,
            cfg.disc_width,
            image_size,
            &mut rng,
        );
        Ok(Self {
            cfg: cfg.clone(),
            image_size,
            image_channels,
            extractor,
            gen,
            disc,
        })
    }

    /// Eval-mode feature extraction; spatial dims match the input.
    pub fn extract_features(&mut self, x: &ImageTensor<S>) -> FeatureMap<S> {
        FeatureMap::new(self.extractor.forward(x.data(), false))
    }
}

/// Anomaly score convention: 1 - D(masked features); higher = more anomalous.
pub fn score_from_realness<S: Scalar>(realness: &[S]) -> Vec<S> {
    realness.iter().map(|&p| S::one() - p).collect()
}

/// Image-level anomaly scores from frozen stage-1 and stage-2 snapshots.
pub fn anomaly_score<S: Scalar>(
    x: &ImageTensor<S>,
    attn_net: &mut AttentionNet<S>,
    adgan: &mut AdganNet<S>,
) -> Result<Vec<S>, ShapeError> {
    let attn = attn_net.gen.forward(x.data(), ForwardMode::Eval).attn;
    let f = adgan.extract_features(x);
    let masked = mask_features(&f, &attn)?;
    let realness = adgan.disc.forward_probs(&masked.data);
    Ok(score_from_realness(&realness))
}

/// Stage-2 trainer. The attention network is passed per step and never
/// updated; only eval-mode forwards touch it.
#[derive(Clone, Debug)]
pub struct AdganTrainer<S: Scalar> {
    pub net: AdganNet<S>,
    pub opt_g: Adam<S>,
    pub opt_d: Adam<S>,
    pub opt_ext: Adam<S>,
    pub step: u64,
    pub seed: u64,
}

impl<S: Scalar> AdganTrainer<S> {
    pub fn new(
        cfg: &AdganConfig,
        image_channels: usize,
        image_size: usize,
        seed: u64,
    ) -> Result<Self, ConfigError> {
        let net = AdganNet::new(cfg, image_channels, image_size, seed)?;
        Ok(Self {
            opt_g: Adam::new(cfg.lr, cfg.betas),
            opt_d: Adam::new(cfg.lr, cfg.betas),
            opt_ext: Adam::new(cfg.lr, cfg.betas),
            net,
            step: 0,
            seed,
        })
    }

    pub fn train_step(
        &mut self,
        batch: &ImageTensor<S>,
        attn_net: &mut AttentionNet<S>,
    ) -> Result<LossBundle<S>, TrainError> {
        let b = batch.batch_size();
        assert!(b > 0, "empty batch");
        let cfg = self.net.cfg.clone();

        // Frozen stage-1 attention maps (eval mode, values only).
        let attn = attn_net.gen.forward(batch.data(), ForwardMode::Eval).attn;

        // Extractor forward once per step; its cache backs the G update.
        let feats = self.net.extractor.forward(batch.data(), true);
        let f_nor = mask_features(&FeatureMap::new(feats), &attn)?;

        // Generator forward (training mode, seeded noise).
        let eps = {
            let mut r = stream(self.seed, &[rng::TAG_EPS_NORMAL, rng::TAG_STAGE2, self.step]);
            Array2::from_shape_fn((b, cfg.latent_dim), |_| S::from_f64(standard_normal(&mut r)))
        };
        let out = self
            .net
            .gen
            .forward(&f_nor.data, ForwardMode::Train { eps: &eps });

        // ---- discriminator update ----
        let real_t = 1.0 - cfg.label_smoothing;
        let d_loss = if cfg.adv_weight > 0.0 {
            let d_in = ndarray::concatenate(Axis(0), &[f_nor.data.view(), out.recon.view()])
                .unwrap();
            zero_grads(&mut self.net.disc);
            let logits = self.net.disc.forward_logits(&d_in, true);
            let mut gl = Array2::zeros(logits.raw_dim());
            let mut loss = S::zero();
            let scale = S::from_f64(cfg.adv_weight / b as f64);
            for i in 0..b {
                let zr = logits[[i, 0]];
                let zf = logits[[b + i, 0]];
                loss += crate::nn::softplus(zr) - S::from_f64(real_t) * zr;
                loss += crate::nn::softplus(zf);
                gl[[i, 0]] = (S::one() / (S::one() + (-zr).exp()) - S::from_f64(real_t)) * scale;
                gl[[b + i, 0]] = (S::one() / (S::one() + (-zf).exp())) * scale;
            }
            let loss = loss / S::from_f64(b as f64);
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    stage: "adgan".into(),
                    step: self.step,
                    checkpoint: None,
                });
            }
            self.net.disc.backward_logits(&gl);
            self.opt_d.step(&mut self.net.disc);
            loss
        } else {
            S::zero()
        };

        // ---- generator (+ extractor) update ----
        zero_grads(&mut self.net.gen);
        zero_grads(&mut self.net.extractor);
        let mut g_recon = Array4::<S>::zeros(out.recon.raw_dim());
        let mut g_mu = Array2::<S>::zeros(out.mu.raw_dim());
        let mut g_logvar = Array2::<S>::zeros(out.logvar.raw_dim());

        let mut l_adv = S::zero();
        if cfg.adv_weight > 0.0 {
            let logits = self.net.disc.forward_logits(&out.recon, true);
            let mut gl = Array2::zeros(logits.raw_dim());
            let scale = S::from_f64(cfg.adv_weight / b as f64);
            for i in 0..b {
                let z = logits[[i, 0]];
                l_adv += crate::nn::softplus(-z);
                gl[[i, 0]] = (S::one() / (S::one() + (-z).exp()) - S::one()) * scale;
            }
            l_adv = l_adv / S::from_f64(b as f64);
            let g = self.net.disc.backward_logits(&gl);
            g_recon += &g;
        }

        let mut l_rec = S::zero();
        if cfg.rec_weight > 0.0 {
            let n_el = S::from_f64(out.recon.len() as f64);
            let scale = S::from_f64(cfg.rec_weight) / n_el;
            let mut acc = S::zero();
            ndarray::Zip::from(&mut g_recon)
                .and(&out.recon)
                .and(&f_nor.data)
                .for_each(|g, &r, &t| {
                    let d = r - t;
                    acc += d * d;
                    *g += d * scale;
                });
            l_rec = S::from_f64(0.5) * acc / n_el;
        }

        let mut l_kl = S::zero();
        if cfg.kl_weight > 0.0 {
            let bn = S::from_f64(b as f64);
            let scale = S::from_f64(cfg.kl_weight) / bn;
            let half = S::from_f64(0.5);
            let mut acc = S::zero();
            ndarray::Zip::from(&mut g_mu)
                .and(&mut g_logvar)
                .and(&out.mu)
                .and(&out.logvar)
                .for_each(|gm, gl, &m, &lv| {
                    acc += m * m + lv.exp() - lv - S::one();
                    *gm += m * scale;
                    *gl += half * (lv.exp() - S::one()) * scale;
                });
            l_kl = half * acc / bn;
        }

        let total = S::from_f64(cfg.adv_weight) * l_adv
            + S::from_f64(cfg.rec_weight) * l_rec
            + S::from_f64(cfg.kl_weight) * l_kl;
        let bundle = LossBundle {
            l_adv,
            l_adv_ano: S::zero(),
            l_g_rec: l_rec,
            l_g_kl: l_kl,
            l_att: S::zero(),
            total,
            d_loss,
            d_loss_ano: S::zero(),
            d_total: d_loss,
        };
        if !bundle.is_finite() {
            return Err(TrainError::Diverged {
                stage: "adgan".into(),
                step: self.step,
                checkpoint: None,
            });
        }

        let g_input = self.net.gen.backward(&g_recon, &g_mu, &g_logvar);
        if cfg.train_extractor {
            let g_feat = mask_features_backward(&g_input, &attn);
            self.net.extractor.backward(&g_feat);
            self.opt_ext.step(&mut self.net.extractor);
        }
        self.opt_g.step(&mut self.net.gen);
        self.step += 1;
        Ok(bundle)
    }
}
