//! Stage 1: the attention network.
//!
//! The generator is an adversarial VAE that emits a reconstruction and an
//! attention map from one decoder trunk through two conv heads. The
//! discriminator judges channel-concatenated (image, map) pairs. Training
//! combines four losses: the adversarial loss on normal pairs, the
//! adversarial anomaly loss on synthesized (anomaly, deactivated-map) pairs,
//! reconstruction + KL, and the attention loss that supervises the map
//! directly.

use crate::backbones::{ConvHead, Discriminator, ResNetEncoder, UpsampleDecoder};
use crate::error::{ConfigError, ShapeError, TrainError};
use crate::nn::{softplus, zero_grads, Activation, Adam, Init, Linear, Module, Param};
use crate::rng::{self, standard_normal, stream};
use crate::scalar::Scalar;
use crate::synth::{sample_anomaly_batch, AugmentationConfig};
use crate::types::{AttentionMask, ImageTensor};
use ndarray::{concatenate, s, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Weights for the total generator objective; 1.0 everywhere reproduces the
/// unweighted sum of the four loss terms. Setting a weight to 0 removes that
/// term's computation entirely.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adv: f64,
    pub adv_ano: f64,
    pub rec: f64,
    pub kl: f64,
    pub att: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adv: 1.0,
            adv_ano: 1.0,
            rec: 1.0,
            kl: 1.0,
            att: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionNetConfig {
    pub image_channels: usize,
    pub image_size: usize,
    pub latent_dim: usize,
    /// Encoder stem width; stage widths double from here.
    pub base_width: usize,
    /// Residual blocks per encoder stage; each stage halves the resolution.
    /// The decoder mirrors the stage count with transposed convolutions.
    pub enc_blocks: Vec<usize>,
    /// Width of the two three-conv output heads.
    pub head_width: usize,
    pub disc_width: usize,
    pub weights: LossWeights,
    pub lr: f64,
    pub betas: (f64, f64),
    /// Real-label smoothing for the discriminator (0 = off).
    pub label_smoothing: f64,
    /// Optional checkpoint to initialize encoder weights from.
    pub pretrained_encoder: Option<PathBuf>,
}

impl Default for AttentionNetConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            image_size: 64,
            latent_dim: 64,
            base_width: 16,
            enc_blocks: vec![2, 2, 2, 2],
            head_width: 16,
            disc_width: 32,
            weights: LossWeights::default(),
            lr: 2e-4,
            betas: (0.5, 0.999),
            label_smoothing: 0.0,
            pretrained_encoder: None,
        }
    }
}

impl AttentionNetConfig {
    pub fn n_stages(&self) -> usize {
        self.enc_blocks.len()
    }

    pub fn bottleneck(&self) -> usize {
        self.image_size >> self.n_stages()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |field: &str, reason: String| ConfigError::InvalidField {
            field: field.into(),
            reason,
        };
        if self.enc_blocks.is_empty() || self.enc_blocks.iter().any(|&b| b == 0) {
            return Err(inv("enc_blocks", "needs at least one nonzero stage".into()));
        }
        if self.image_size % (1 << self.n_stages()) != 0 || self.bottleneck() == 0 {
            return Err(inv(
                "image_size",
                format!(
                    "{} not divisible into {} downsampling stages",
                    self.image_size,
                    self.n_stages()
                ),
            ));
        }
        if self.image_size < 8 || !self.image_size.is_power_of_two() {
            return Err(inv(
                "image_size",
                format!("must be a power of two >= 8, got {}", self.image_size),
            ));
        }
        for (name, v) in [
            ("adv", self.weights.adv),
            ("adv_ano", self.weights.adv_ano),
            ("rec", self.weights.rec),
            ("kl", self.weights.kl),
            ("att", self.weights.att),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(inv("weights", format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(inv("label_smoothing", "must be in [0, 0.5)".into()));
        }
        if self.lr <= 0.0 {
            return Err(inv("lr", "must be positive".into()));
        }
        Ok(())
    }
}

/// Generator outputs: reconstruction, attention map, and the variational
/// posterior parameters.
#[derive(Clone, Debug)]
pub struct GeneratorOutput<S: Scalar> {
    pub recon: ImageTensor<S>,
    pub attn: AttentionMask<S>,
    pub latent_mean: Array2<S>,
    pub latent_logvar: Array2<S>,
}

/// Forward mode: eval uses the posterior mean; train samples the latent with
/// caller-provided noise so steps stay reproducible.
pub enum ForwardMode<'a, S: Scalar> {
    Eval,
    Train { eps: &'a Array2<S> },
}

#[derive(Clone, Debug)]
struct ReparamCache<S: Scalar> {
    eps: Array2<S>,
    std: Array2<S>,
}

/// The stage-1 generator G1: ResNet encoder, variational latent, shared
/// decoder trunk, and two sigmoid conv heads (reconstruction, attention).
#[derive(Clone, Debug)]
pub struct AttentionGenerator<S: Scalar> {
    enc: ResNetEncoder<S>,
    fc_mu: Linear<S>,
    fc_logvar: Linear<S>,
    dec: UpsampleDecoder<S>,
    head_recon: ConvHead<S>,
    head_attn: ConvHead<S>,
    bottleneck: usize,
    enc_channels: usize,
    cache: Option<ReparamCache<S>>,
}

impl<S: Scalar> AttentionGenerator<S> {
    pub fn new(cfg: &AttentionNetConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let enc = ResNetEncoder::new("gen.enc", cfg.image_channels, cfg.base_width, &cfg.enc_blocks, rng);
        let enc_channels = enc.out_channels;
        let bott = cfg.bottleneck();
        let flat = enc_channels * bott * bott;
        let fc_mu = Linear::new("gen.fc_mu", flat, cfg.latent_dim, Init::Xavier, rng);
        let fc_logvar = Linear::new("gen.fc_logvar", flat, cfg.latent_dim, Init::Xavier, rng);
        let dec = UpsampleDecoder::new(
            "gen.dec",
            cfg.latent_dim,
            enc_channels,
            bott,
            cfg.n_stages(),
            cfg.base_width,
            rng,
        );
        let head_recon = ConvHead::new(
            "gen.head_recon",
            dec.out_channels,
            cfg.head_width,
            cfg.image_channels,
            Activation::Sigmoid,
            rng,
        );
        let head_attn = ConvHead::new(
            "gen.head_attn",
            dec.out_channels,
            cfg.head_width,
            1,
            Activation::Sigmoid,
            rng,
        );
        Self {
            enc,
            fc_mu,
            fc_logvar,
            dec,
            head_recon,
            head_attn,
            bottleneck: bott,
            enc_channels,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<S>, mode: ForwardMode<S>) -> GeneratorOutput<S> {
        let train = matches!(mode, ForwardMode::Train { .. });
        let n = x.dim().0;
        let f = self.enc.forward(x, train);
        let flat = f
            .into_shape_with_order((n, self.enc_channels * self.bottleneck * self.bottleneck))
            .unwrap();
        let mu = self.fc_mu.forward(&flat, train);
        let logvar = self.fc_logvar.forward(&flat, train);
        let half = S::from_f64(0.5);
        let z = match mode {
            ForwardMode::Eval => mu.clone(),
            ForwardMode::Train { eps } => {
                assert_eq!(eps.dim(), mu.dim(), "eps shape mismatch");
                let std = logvar.mapv(|lv| (half * lv).exp());
                let z = &mu + &(&std * eps);
                self.cache = Some(ReparamCache {
                    eps: eps.clone(),
                    std,
                });
                z
            }
        };
        let trunk = self.dec.forward(&z, train);
        let recon = self.head_recon.forward(&trunk, train);
        let attn = self.head_attn.forward(&trunk, train);
        GeneratorOutput {
            recon: ImageTensor::new_unchecked(recon),
            attn: AttentionMask::new_unchecked(attn),
            latent_mean: mu,
            latent_logvar: logvar,
        }
    }

    /// Accumulate parameter gradients from output-side gradients.
    /// `g_mu` / `g_logvar` carry direct contributions (the KL term); the
    /// decoder path gradient is added internally through the
    /// reparameterization.
    pub fn backward(
        &mut self,
        g_recon: &Array4<S>,
        g_attn: &Array4<S>,
        g_mu: &Array2<S>,
        g_logvar: &Array2<S>,
    ) {
        let cache = self.cache.as_ref().expect("train forward before backward");
        let gt_recon = self.head_recon.backward(g_recon);
        let gt_attn = self.head_attn.backward(g_attn);
        let gz = self.dec.backward(&(gt_recon + gt_attn));
        // z = mu + std * eps, std = exp(logvar/2)
        // dmu += dz ; dlogvar += dz * eps * std / 2
        let half = S::from_f64(0.5);
        let dmu = &gz + g_mu;
        let dlv_path = ndarray::Zip::from(&gz)
            .and(&cache.eps)
            .and(&cache.std)
            .map_collect(|&dz, &e, &sd| dz * e * sd * half);
        let dlogvar = &dlv_path + g_logvar;
        let gflat_mu = self.fc_mu.backward(&dmu);
        let gflat_lv = self.fc_logvar.backward(&dlogvar);
        let gflat = gflat_mu + gflat_lv;
        let n = gflat.dim().0;
        let genc = gflat
            .into_shape_with_order((n, self.enc_channels, self.bottleneck, self.bottleneck))
            .unwrap();
        self.enc.backward(&genc);
    }

    pub fn encoder_mut(&mut self) -> &mut ResNetEncoder<S> {
        &mut self.enc
    }
}

impl<S: Scalar> Module<S> for AttentionGenerator<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.enc.visit_params(f);
        self.fc_mu.visit_params(f);
        self.fc_logvar.visit_params(f);
        self.dec.visit_params(f);
        self.head_recon.visit_params(f);
        self.head_attn.visit_params(f);
    }
}

/// Generator + pair discriminator.
#[derive(Clone, Debug)]
pub struct AttentionNet<S: Scalar> {
    pub cfg: AttentionNetConfig,
    pub gen: AttentionGenerator<S>,
    pub disc: Discriminator<S>,
}

impl<S: Scalar> Module<S> for AttentionNet<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.gen.visit_params(f);
        self.disc.visit_params(f);
    }
}

impl<S: Scalar> AttentionNet<S> {
    pub fn new(cfg: &AttentionNetConfig, seed: u64) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let mut rng = stream(seed, &[rng::TAG_INIT, rng::TAG_STAGE1]);
        let mut gen = AttentionGenerator::new(cfg, &mut rng);
        let disc = Discriminator::new(
            "disc",
            cfg.image_channels + 1,
            cfg.disc_width,
            cfg.image_size,
            &mut rng,
        );
        if let Some(path) = &cfg.pretrained_encoder {
            let ckpt = crate::checkpoint::load(path).map_err(|e| ConfigError::InvalidField {
                field: "pretrained_encoder".into(),
                reason: e.to_string(),
            })?;
            crate::checkpoint::import_module_partial(gen.encoder_mut(), &ckpt).map_err(|e| {
                ConfigError::InvalidField {
                    field: "pretrained_encoder".into(),
                    reason: e.to_string(),
                }
            })?;
        }
        Ok(Self {
            cfg: cfg.clone(),
            gen,
            disc,
        })
    }

    /// Eval-mode generator pass (latent = posterior mean; fully deterministic).
    pub fn generator_forward(&mut self, x: &ImageTensor<S>) -> GeneratorOutput<S> {
        self.gen.forward(x.data(), ForwardMode::Eval)
    }

    /// Eval-mode discriminator pass over channel-concatenated (image, map)
    /// pairs; per-sample realness scores in (0,1).
    pub fn discriminator_forward(
        &mut self,
        img: &ImageTensor<S>,
        attn: &AttentionMask<S>,
    ) -> Result<Vec<S>, ShapeError> {
        let cat = concat_pair(img.data(), attn.data())?;
        Ok(self.disc.forward_probs(&cat))
    }
}

/// Channel-wise concat of an image and a map: [N,C,H,W] + [N,1,H,W] -> [N,C+1,H,W].
pub fn concat_pair<S: Scalar>(
    img: &Array4<S>,
    map: &Array4<S>,
) -> Result<Array4<S>, ShapeError> {
    let (n, c, h, w) = img.dim();
    let (nm, cm, hm, wm) = map.dim();
    if nm != n || cm != 1 || hm != h || wm != w {
        return Err(ShapeError::Mismatch {
            expected: format!("map [{n},1,{h},{w}]"),
            got: format!("[{nm},{cm},{hm},{wm}]"),
        });
    }
    // built by slice assignment to keep the result in standard layout
    let mut out = Array4::zeros((n, c + 1, h, w));
    out.slice_mut(s![.., 0..c, .., ..]).assign(img);
    out.slice_mut(s![.., c..c + 1, .., ..]).assign(map);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

fn check_scores<S: Scalar>(scores: &[S]) -> Result<(), TrainError> {
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(TrainError::NonFiniteScores);
    }
    Ok(())
}

/// Discriminator cross-entropy for the normal adversarial objective:
/// real pairs (x_in, fully-activated map) vs fake pairs (x_re, a_gen).
/// At d_real = d_fake = 0.5 this is 2 ln 2 per sample.
pub fn loss_adv<S: Scalar>(d_real: &[S], d_fake: &[S]) -> Result<S, TrainError> {
    check_scores(d_real)?;
    check_scores(d_fake)?;
    Ok(bce_mean(d_real, true) + bce_mean(d_fake, false))
}

/// Discriminator cross-entropy for the adversarial anomaly objective:
/// real pairs are (x_ano, deactivated ground-truth map), fake pairs are the
/// generator's (reconstruction, map) for the anomaly input.
pub fn loss_adv_ano<S: Scalar>(d_ano_real: &[S], d_ano_fake: &[S]) -> Result<S, TrainError> {
    check_scores(d_ano_real)?;
    check_scores(d_ano_fake)?;
    Ok(bce_mean(d_ano_real, true) + bce_mean(d_ano_fake, false))
}

fn bce_mean<S: Scalar>(scores: &[S], target_real: bool) -> S {
    let n = S::from_f64(scores.len() as f64);
    let mut acc = S::zero();
    for &p in scores {
        acc += if target_real {
            -(p.ln())
        } else {
            -((S::one() - p).ln())
        };
    }
    acc / n
}

/// Reconstruction NLL (unit-variance Gaussian, i.e. half mean squared error)
/// and the closed-form KL to the standard normal prior. The KL is summed over
/// latent dimensions and averaged over the batch.
pub fn loss_generator<S: Scalar>(x: &ImageTensor<S>, out: &GeneratorOutput<S>) -> (S, S) {
    let rec = half_mse(out.recon.data(), x.data());
    let kl = kl_gaussian(&out.latent_mean, &out.latent_logvar);
    (rec, kl)
}

fn half_mse<S: Scalar>(a: &Array4<S>, b: &Array4<S>) -> S {
    let n = S::from_f64(a.len() as f64);
    let half = S::from_f64(0.5);
    let mut acc = S::zero();
    ndarray::Zip::from(a).and(b).for_each(|&x, &y| {
        let d = x - y;
        acc += d * d;
    });
    half * acc / n
}

fn kl_gaussian<S: Scalar>(mu: &Array2<S>, logvar: &Array2<S>) -> S {
    let (n, _z) = mu.dim();
    let half = S::from_f64(0.5);
    let mut acc = S::zero();
    ndarray::Zip::from(mu).and(logvar).for_each(|&m, &lv| {
        acc += m * m + lv.exp() - lv - S::one();
    });
    half * acc / S::from_f64(n as f64)
}

/// Attention loss: per-pixel MSE pushing the normal-input map to the
/// fully-activated target and the anomaly-input map to its ground truth.
pub fn loss_attention<S: Scalar>(
    a_gen_nor: &AttentionMask<S>,
    a_gen_ano: &AttentionMask<S>,
    a_nor: &AttentionMask<S>,
    a_ano: &AttentionMask<S>,
) -> S {
    mse4(a_gen_nor.data(), a_nor.data()) + mse4(a_gen_ano.data(), a_ano.data())
}

fn mse4<S: Scalar>(a: &Array4<S>, b: &Array4<S>) -> S {
    let n = S::from_f64(a.len() as f64);
    let mut acc = S::zero();
    ndarray::Zip::from(a).and(b).for_each(|&x, &y| {
        let d = x - y;
        acc += d * d;
    });
    acc / n
}

/// Stable binary cross-entropy from logits: softplus(z) - t*z, mean over rows.
fn bce_logits_mean<S: Scalar>(logits: &Array2<S>, target: f64) -> S {
    let t = S::from_f64(target);
    let n = S::from_f64(logits.len() as f64);
    let mut acc = S::zero();
    for &z in logits.iter() {
        acc += softplus(z) - t * z;
    }
    acc / n
}

/// d(bce_logits)/dz = sigmoid(z) - t, scaled by `scale`.
fn bce_logits_grad<S: Scalar>(logits: &Array2<S>, target: f64, scale: S) -> Array2<S> {
    let t = S::from_f64(target);
    logits.mapv(|z| (S::one() / (S::one() + (-z).exp()) - t) * scale)
}

/// All per-step scalars. `total` is the exact weighted sum of the five
/// generator components.
#[derive(Clone, Copy, Debug)]
pub struct LossBundle<S: Scalar> {
    pub l_adv: S,
    pub l_adv_ano: S,
    pub l_g_rec: S,
    pub l_g_kl: S,
    pub l_att: S,
    pub total: S,
    pub d_loss: S,
    pub d_loss_ano: S,
    pub d_total: S,
}

impl<S: Scalar> LossBundle<S> {
    pub fn is_finite(&self) -> bool {
        [
            self.l_adv,
            self.l_adv_ano,
            self.l_g_rec,
            self.l_g_kl,
            self.l_att,
            self.total,
            self.d_loss,
            self.d_loss_ano,
            self.d_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn csv_header() -> &'static str {
        "step,l_adv,l_adv_ano,l_g_rec,l_g_kl,l_att,total,d_loss,d_loss_ano,d_total"
    }

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            step,
            self.l_adv.as_f64(),
            self.l_adv_ano.as_f64(),
            self.l_g_rec.as_f64(),
            self.l_g_kl.as_f64(),
            self.l_att.as_f64(),
            self.total.as_f64(),
            self.d_loss.as_f64(),
            self.d_loss_ano.as_f64(),
            self.d_total.as_f64()
        )
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// Owns the stage-1 models and their optimizers. One call to
/// [`AttentionTrainer::train_step`] performs one discriminator update and one
/// generator update on a batch of normal images, synthesizing the anomaly
/// batch internally.
#[derive(Clone, Debug)]
pub struct AttentionTrainer<S: Scalar> {
    pub net: AttentionNet<S>,
    pub opt_g: Adam<S>,
    pub opt_d: Adam<S>,
    pub aug: AugmentationConfig,
    /// When false no anomalies are synthesized: the adversarial anomaly loss
    /// and the anomaly term of the attention loss are inactive.
    pub use_synthetic_anomalies: bool,
    pub step: u64,
    pub seed: u64,
}

impl<S: Scalar> AttentionTrainer<S> {
    pub fn new(
        cfg: &AttentionNetConfig,
        aug: AugmentationConfig,
        seed: u64,
    ) -> Result<Self, ConfigError> {
        aug.validate()?;
        let net = AttentionNet::new(cfg, seed)?;
        Ok(Self {
            opt_g: Adam::new(cfg.lr, cfg.betas),
            opt_d: Adam::new(cfg.lr, cfg.betas),
            net,
            aug,
            use_synthetic_anomalies: true,
            step: 0,
            seed,
        })
    }

    fn draw_eps(&self, n: usize, tag: u64) -> Array2<S> {
        let mut r = stream(self.seed, &[tag, self.step]);
        Array2::from_shape_fn((n, self.net.cfg.latent_dim), |_| {
            S::from_f64(standard_normal(&mut r))
        })
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &ImageTensor<S>) -> Result<LossBundle<S>, TrainError> {
        let b = batch.batch_size();
        assert!(b > 0, "empty batch");
        let w = self.net.cfg.weights;
        let (h, wd) = (batch.height(), batch.width());
        let use_ano = self.use_synthetic_anomalies && (w.adv_ano > 0.0 || w.att > 0.0);

        // Synthesize the anomaly batch from the normal batch.
        let (x_ano, a_ano) = if use_ano {
            let aug = self
                .aug
                .with_seed(rng::derive_seed(self.aug.seed, &[rng::TAG_STEP, self.step]));
            let samples = sample_anomaly_batch(batch, &aug)?;
            let imgs: Vec<&ImageTensor<S>> = samples.iter().map(|s| &s.image).collect();
            let masks: Vec<&AttentionMask<S>> = samples.iter().map(|s| &s.mask).collect();
            (
                Some(ImageTensor::concat(&imgs)?),
                Some(AttentionMask::concat(&masks)?),
            )
        } else {
            (None, None)
        };

        // Single generator forward over [normal ; anomaly]; instance norm
        // keeps per-sample outputs independent of batch composition.
        let x_all = match &x_ano {
            Some(xa) => ImageTensor::concat(&[batch, xa])?,
            None => batch.clone(),
        };
        let eps = {
            let mut e = self.draw_eps(b, rng::TAG_EPS_NORMAL);
            if use_ano {
                let e2 = self.draw_eps(b, rng::TAG_EPS_ANOMALY);
                e = concatenate(Axis(0), &[e.view(), e2.view()]).unwrap();
            }
            e
        };
        let out = self
            .net
            .gen
            .forward(x_all.data(), ForwardMode::Train { eps: &eps });
        let recon_all = out.recon.data();
        let attn_all = out.attn.data();

        // ---- discriminator update -------------------------------------
        let ones_map = AttentionMask::<S>::ones(b, h, wd);
        let real_t = 1.0 - self.net.cfg.label_smoothing;
        let mut d_groups: Vec<Array4<S>> = Vec::new();
        let mut d_meta: Vec<(f64, f64)> = Vec::new(); // (target, weight) per group
        if w.adv > 0.0 {
            d_groups.push(concat_pair(batch.data(), ones_map.data())?);
            d_meta.push((real_t, w.adv));
            d_groups.push(concat_pair(
                &recon_all.slice(s![0..b, .., .., ..]).to_owned(),
                &attn_all.slice(s![0..b, .., .., ..]).to_owned(),
            )?);
            d_meta.push((0.0, w.adv));
        }
        if w.adv_ano > 0.0 && use_ano {
            let xa = x_ano.as_ref().unwrap();
            let aa = a_ano.as_ref().unwrap();
            d_groups.push(concat_pair(xa.data(), aa.data())?);
            d_meta.push((real_t, w.adv_ano));
            d_groups.push(concat_pair(
                &recon_all.slice(s![b.., .., .., ..]).to_owned(),
                &attn_all.slice(s![b.., .., .., ..]).to_owned(),
            )?);
            d_meta.push((0.0, w.adv_ano));
        }

        let (d_loss, d_loss_ano) = if d_groups.is_empty() {
            (S::zero(), S::zero())
        } else {
            let views: Vec<_> = d_groups.iter().map(|g| g.view()).collect();
            let d_in = concatenate(Axis(0), &views).unwrap();
            zero_grads(&mut self.net.disc);
            let logits = self.net.disc.forward_logits(&d_in, true);
            let mut glogits = Array2::zeros(logits.raw_dim());
            let mut loss_nor = S::zero();
            let mut loss_ano = S::zero();
            for (gi, &(target, weight)) in d_meta.iter().enumerate() {
                let lg = logits.slice(s![gi * b..(gi + 1) * b, ..]).to_owned();
                let l = bce_logits_mean(&lg, target);
                let scale = S::from_f64(weight / b as f64);
                let grad = bce_logits_grad(&lg, target, scale);
                glogits
                    .slice_mut(s![gi * b..(gi + 1) * b, ..])
                    .assign(&grad);
                // first two groups belong to Eq. 1, the rest to Eq. 2
                if gi < 2 && w.adv > 0.0 {
                    loss_nor += l;
                } else {
                    loss_ano += l;
                }
            }
            let d_total_check = loss_nor * S::from_f64(w.adv) + loss_ano * S::from_f64(w.adv_ano);
            if !d_total_check.is_finite() {
                return Err(TrainError::Diverged {
                    stage: "attention".into(),
                    step: self.step,
                    checkpoint: None,
                });
            }
            self.net.disc.backward_logits(&glogits);
            self.opt_d.step(&mut self.net.disc);
            (loss_nor, loss_ano)
        };
        let d_total = d_loss * S::from_f64(w.adv) + d_loss_ano * S::from_f64(w.adv_ano);

        // ---- generator update ------------------------------------------
        zero_grads(&mut self.net.gen);
        let mut g_recon = Array4::<S>::zeros(recon_all.raw_dim());
        let mut g_attn = Array4::<S>::zeros(attn_all.raw_dim());
        let mut g_mu = Array2::<S>::zeros(out.latent_mean.raw_dim());
        let mut g_logvar = Array2::<S>::zeros(out.latent_logvar.raw_dim());

        // adversarial terms through the (updated) discriminator
        let mut l_adv_g = S::zero();
        let mut l_adv_ano_g = S::zero();
        let mut adv_groups: Vec<(usize, f64)> = Vec::new(); // (offset, weight)
        if w.adv > 0.0 {
            adv_groups.push((0, w.adv));
        }
        if w.adv_ano > 0.0 && use_ano {
            adv_groups.push((b, w.adv_ano));
        }
        if !adv_groups.is_empty() {
            let mut fakes: Vec<Array4<S>> = Vec::new();
            for &(off, _) in &adv_groups {
                fakes.push(concat_pair(
                    &recon_all.slice(s![off..off + b, .., .., ..]).to_owned(),
                    &attn_all.slice(s![off..off + b, .., .., ..]).to_owned(),
                )?);
            }
            let views: Vec<_> = fakes.iter().map(|g| g.view()).collect();
            let fake_in = concatenate(Axis(0), &views).unwrap();
            let logits = self.net.disc.forward_logits(&fake_in, true);
            let mut glogits = Array2::zeros(logits.raw_dim());
            for (gi, &(_off, weight)) in adv_groups.iter().enumerate() {
                let lg = logits.slice(s![gi * b..(gi + 1) * b, ..]).to_owned();
                // non-saturating generator loss: -log D(fake)
                let l = bce_logits_mean(&lg, 1.0);
                if gi == 0 && w.adv > 0.0 {
                    l_adv_g = l;
                } else {
                    l_adv_ano_g = l;
                }
                let scale = S::from_f64(weight / b as f64);
                glogits
                    .slice_mut(s![gi * b..(gi + 1) * b, ..])
                    .assign(&bce_logits_grad(&lg, 1.0, scale));
            }
            // discriminator grads polluted here are zeroed at its next update
            let g_at_input = self.net.disc.backward_logits(&glogits);
            let c = batch.channels();
            for (gi, &(off, _)) in adv_groups.iter().enumerate() {
                let gslice = g_at_input.slice(s![gi * b..(gi + 1) * b, .., .., ..]);
                let mut tr = g_recon.slice_mut(s![off..off + b, .., .., ..]);
                tr += &gslice.slice(s![.., 0..c, .., ..]);
                let mut ta = g_attn.slice_mut(s![off..off + b, .., .., ..]);
                ta += &gslice.slice(s![.., c..c + 1, .., ..]);
            }
        }

        // reconstruction + KL on the normal half
        let mut l_rec = S::zero();
        let mut l_kl = S::zero();
        if w.rec > 0.0 {
            let recon_nor = recon_all.slice(s![0..b, .., .., ..]);
            let x_nor = batch.data();
            let n_el = S::from_f64((b * batch.channels() * h * wd) as f64);
            let scale = S::from_f64(w.rec) / n_el;
            let mut acc = S::zero();
            let mut gr = g_recon.slice_mut(s![0..b, .., .., ..]);
            ndarray::Zip::from(&mut gr)
                .and(&recon_nor)
                .and(x_nor)
                .for_each(|g, &r, &x| {
                    let d = r - x;
                    acc += d * d;
                    *g += d * scale;
                });
            l_rec = S::from_f64(0.5) * acc / n_el;
        }
        if w.kl > 0.0 {
            let mu_n = out.latent_mean.slice(s![0..b, ..]);
            let lv_n = out.latent_logvar.slice(s![0..b, ..]);
            let bn = S::from_f64(b as f64);
            let scale = S::from_f64(w.kl) / bn;
            let half = S::from_f64(0.5);
            let mut acc = S::zero();
            let mut gm = g_mu.slice_mut(s![0..b, ..]);
            let mut gl = g_logvar.slice_mut(s![0..b, ..]);
            ndarray::Zip::from(&mut gm)
                .and(&mut gl)
                .and(&mu_n)
                .and(&lv_n)
                .for_each(|gm, gl, &m, &lv| {
                    acc += m * m + lv.exp() - lv - S::one();
                    *gm += m * scale;
                    *gl += half * (lv.exp() - S::one()) * scale;
                });
            l_kl = half * acc / bn;
        }

        // attention loss: normal term toward all-ones; anomaly term toward GT
        let mut l_att = S::zero();
        if w.att > 0.0 {
            let two = S::from_f64(2.0);
            let n_el = S::from_f64((b * h * wd) as f64);
            let scale = S::from_f64(w.att) / n_el * two;
            {
                let a_nor = attn_all.slice(s![0..b, .., .., ..]);
                let mut ga = g_attn.slice_mut(s![0..b, .., .., ..]);
                let mut acc = S::zero();
                ndarray::Zip::from(&mut ga).and(&a_nor).for_each(|g, &a| {
                    let d = a - S::one();
                    acc += d * d;
                    *g += d * scale;
                });
                l_att += acc / n_el;
            }
            if use_ano {
                let a_ano_gen = attn_all.slice(s![b.., .., .., ..]);
                let a_gt = a_ano.as_ref().unwrap().data();
                let mut ga = g_attn.slice_mut(s![b.., .., .., ..]);
                let mut acc = S::zero();
                ndarray::Zip::from(&mut ga)
                    .and(&a_ano_gen)
                    .and(a_gt)
                    .for_each(|g, &a, &t| {
                        let d = a - t;
                        acc += d * d;
                        *g += d * scale;
                    });
                l_att += acc / n_el;
            }
        }

        let total = S::from_f64(w.adv) * l_adv_g
            + S::from_f64(w.adv_ano) * l_adv_ano_g
            + S::from_f64(w.rec) * l_rec
            + S::from_f64(w.kl) * l_kl
            + S::from_f64(w.att) * l_att;

        let bundle = LossBundle {
            l_adv: l_adv_g,
            l_adv_ano: l_adv_ano_g,
            l_g_rec: l_rec,
            l_g_kl: l_kl,
            l_att,
            total,
            d_loss,
            d_loss_ano,
            d_total,
        };
        if !bundle.is_finite() {
            return Err(TrainError::Diverged {
                stage: "attention".into(),
                step: self.step,
                checkpoint: None,
            });
        }

        self.net.gen.backward(&g_recon, &g_attn, &g_mu, &g_logvar);
        self.opt_g.step(&mut self.net.gen);
        self.step += 1;
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::export_module;
    use ndarray::Array4;
    use rand::Rng;

    fn tiny_cfg() -> AttentionNetConfig {
        AttentionNetConfig {
            image_channels: 3,
            image_size: 16,
            latent_dim: 8,
            base_width: 4,
            enc_blocks: vec![1, 1],
            head_width: 4,
            disc_width: 4,
            ..Default::default()
        }
    }

    fn random_batch(seed: u64, n: usize, c: usize, hw: usize) -> ImageTensor<f32> {
        let mut r = stream(seed, &[123]);
        ImageTensor::new(Array4::from_shape_fn((n, c, hw, hw), |_| {
            r.gen_range(0.0..1.0f32)
        }))
        .unwrap()
    }

    #[test]
    fn generator_output_shapes_and_ranges() {
        let cfg = AttentionNetConfig {
            image_size: 64,
            base_width: 8,
            enc_blocks: vec![1, 1, 1, 1],
            latent_dim: 16,
            head_width: 4,
            disc_width: 8,
            ..Default::default()
        };
        let mut net = AttentionNet::<f32>::new(&cfg, 7).unwrap();
        let x = random_batch(1, 2, 3, 64);
        let out = net.generator_forward(&x);
        assert_eq!(out.recon.data().dim(), (2, 3, 64, 64));
        assert_eq!(out.attn.data().dim(), (2, 1, 64, 64));
        assert!(out.attn.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(out.recon.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = tiny_cfg();
        let mut net = AttentionNet::<f32>::new(&cfg, 3).unwrap();
        let x = random_batch(2, 3, 3, 16);
        let a = net.generator_forward(&x);
        let b = net.generator_forward(&x);
        assert_eq!(a.recon.data(), b.recon.data());
        assert_eq!(a.attn.data(), b.attn.data());
        assert_eq!(a.latent_mean, b.latent_mean);
    }

    #[test]
    fn discriminator_sees_c_plus_one_channels() {
        let cfg = tiny_cfg();
        let mut net = AttentionNet::<f32>::new(&cfg, 4).unwrap();
        assert_eq!(net.disc.in_channels, 4);
        let x = random_batch(3, 2, 3, 16);
        let m = AttentionMask::ones(2, 16, 16);
        let p = net.discriminator_forward(&x, &m).unwrap();
        assert_eq!(p.len(), 2);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        // misaligned shapes are rejected
        let bad = AttentionMask::ones(2, 8, 8);
        assert!(net.discriminator_forward(&x, &bad).is_err());
    }

    #[test]
    fn loss_adv_known_values() {
        // perfect discrimination -> exactly 0
        let z = loss_adv(&[1.0f64, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(z, 0.0);
        // maximum uncertainty -> 2 ln 2
        let l = loss_adv(&[0.5f64; 4], &[0.5; 4]).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let l2 = loss_adv_ano(&[0.5f64; 3], &[0.5; 3]).unwrap();
        assert!((l2 - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        // non-finite scores rejected
        assert!(loss_adv(&[f64::NAN], &[0.5]).is_err());
    }

    #[test]
    fn loss_adv_gradient_signs_by_finite_difference() {
        let h = 1e-6;
        let base = loss_adv(&[0.7f64], &[0.4]).unwrap();
        let d_real_up = loss_adv(&[0.7 + h], &[0.4]).unwrap();
        let d_fake_up = loss_adv(&[0.7f64], &[0.4 + h]).unwrap();
        assert!((d_real_up - base) / h < 0.0, "dL/d_real must be negative");
        assert!((d_fake_up - base) / h > 0.0, "dL/d_fake must be positive");
    }

    #[test]
    fn loss_generator_known_values() {
        let cfg = tiny_cfg();
        let mut net = AttentionNet::<f32>::new(&cfg, 5).unwrap();
        let x = random_batch(6, 2, 3, 16);
        let mut out = net.generator_forward(&x);
        // exact reconstruction and prior-matching posterior
        out.recon = x.clone();
        out.latent_mean.fill(0.0);
        out.latent_logvar.fill(0.0);
        let (rec, kl) = loss_generator(&x, &out);
        assert_eq!(rec, 0.0);
        assert_eq!(kl, 0.0);
        // mu = (1, 0, ..), logvar = 0 -> kl = 0.5 per sample
        out.latent_mean.fill(0.0);
        out.latent_mean[[0, 0]] = 1.0;
        out.latent_mean[[1, 0]] = 1.0;
        let (_, kl) = loss_generator(&x, &out);
        assert!((kl - 0.5).abs() < 1e-6);
    }

    #[test]
    fn loss_attention_known_values_and_loop_oracle() {
        let n = 2;
        let hw = 8;
        let ones = AttentionMask::<f64>::ones(n, hw, hw);
        let zeros = AttentionMask::<f64>::zeros(n, hw, hw);
        // exact match -> 0
        let l = loss_attention(&ones, &zeros, &ones, &zeros);
        assert_eq!(l, 0.0);
        // constant offset: a_gen_nor = 0 vs target 1, anomaly matched -> 1.0
        let l = loss_attention(&zeros, &zeros, &ones, &zeros);
        assert!((l - 1.0).abs() < 1e-12);

        // random maps vs a naive per-pixel loop
        let mut r = stream(9, &[1]);
        let mk = |r: &mut rand_chacha::ChaCha8Rng| {
            AttentionMask::<f64>::new(Array4::from_shape_fn((n, 1, hw, hw), |_| {
                r.gen_range(0.0..1.0)
            }))
            .unwrap()
        };
        let (g_nor, g_ano, t_nor, t_ano) = (mk(&mut r), mk(&mut r), mk(&mut r), mk(&mut r));
        let got = loss_attention(&g_nor, &g_ano, &t_nor, &t_ano);
        let mut want = 0.0;
        let count = (n * hw * hw) as f64;
        for ni in 0..n {
            for y in 0..hw {
                for x in 0..hw {
                    let d1 = g_nor.data()[[ni, 0, y, x]] - t_nor.data()[[ni, 0, y, x]];
                    let d2 = g_ano.data()[[ni, 0, y, x]] - t_ano.data()[[ni, 0, y, x]];
                    want += (d1 * d1 + d2 * d2) / count;
                }
            }
        }
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn train_step_total_is_exact_weighted_sum() {
        let cfg = tiny_cfg();
        let mut tr = AttentionTrainer::<f32>::new(&cfg, AugmentationConfig::default(), 11).unwrap();
        let batch = random_batch(12, 4, 3, 16);
        let b = tr.train_step(&batch).unwrap();
        let w = cfg.weights;
        let expect = w.adv as f32 * b.l_adv
            + w.adv_ano as f32 * b.l_adv_ano
            + w.rec as f32 * b.l_g_rec
            + w.kl as f32 * b.l_g_kl
            + w.att as f32 * b.l_att;
        assert_eq!(b.total, expect);
        assert!(b.is_finite());
    }

    #[test]
    fn train_step_is_deterministic() {
        let cfg = tiny_cfg();
        let aug = AugmentationConfig {
            seed: 5,
            ..Default::default()
        };
        let batch = random_batch(13, 4, 3, 16);
        let mut t1 = AttentionTrainer::<f32>::new(&cfg, aug.clone(), 17).unwrap();
        let mut t2 = AttentionTrainer::<f32>::new(&cfg, aug, 17).unwrap();
        for _ in 0..2 {
            t1.train_step(&batch).unwrap();
            t2.train_step(&batch).unwrap();
        }
        let p1 = export_module(&mut t1.net.gen);
        let p2 = export_module(&mut t2.net.gen);
        for ((n1, a), (n2, b)) in p1.iter().zip(p2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a, b, "{n1} diverged");
        }
        let d1 = export_module(&mut t1.net.disc);
        let d2 = export_module(&mut t2.net.disc);
        for ((n1, a), (n2, b)) in d1.iter().zip(d2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a, b, "{n1} diverged");
        }
    }

    /// With att and adv_ano weights at zero the step must be bitwise equal
    /// to an independently written plain VAE-GAN step.
    #[test]
    fn zero_weights_reduce_to_plain_vae_gan_step() {
        let mut cfg = tiny_cfg();
        cfg.weights.adv_ano = 0.0;
        cfg.weights.att = 0.0;
        let aug = AugmentationConfig::default();
        let batch = random_batch(14, 4, 3, 16);

        let mut tr = AttentionTrainer::<f32>::new(&cfg, aug.clone(), 23).unwrap();
        let mut reference = AttentionTrainer::<f32>::new(&cfg, aug, 23).unwrap();

        for _ in 0..2 {
            tr.train_step(&batch).unwrap();
            reference_vae_gan_step(&mut reference, &batch);
        }

        let p1 = export_module(&mut tr.net.gen);
        let p2 = export_module(&mut reference.net.gen);
        for ((n1, a), (n2, b)) in p1.iter().zip(p2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a, b, "{n1} differs from reference");
        }
        let d1 = export_module(&mut tr.net.disc);
        let d2 = export_module(&mut reference.net.disc);
        for ((n1, a), (n2, b)) in d1.iter().zip(d2.iter()) {
            assert_eq!(a, b, "{n1} differs from reference (disc)");
            assert_eq!(n1, n2);
        }
    }

    /// Hand-written Eq.1 + L_G step: one D update on (real, fake) normal
    /// pairs, one G update with adversarial + reconstruction + KL terms.
    fn reference_vae_gan_step(tr: &mut AttentionTrainer<f32>, batch: &ImageTensor<f32>) {
        let b = batch.batch_size();
        let (h, wd) = (batch.height(), batch.width());
        let eps = tr.draw_eps(b, rng::TAG_EPS_NORMAL);
        let out = tr
            .net
            .gen
            .forward(batch.data(), ForwardMode::Train { eps: &eps });

        // D update
        let ones = AttentionMask::<f32>::ones(b, h, wd);
        let real = concat_pair(batch.data(), ones.data()).unwrap();
        let fake = concat_pair(out.recon.data(), out.attn.data()).unwrap();
        let d_in = concatenate(Axis(0), &[real.view(), fake.view()]).unwrap();
        zero_grads(&mut tr.net.disc);
        let logits = tr.net.disc.forward_logits(&d_in, true);
        let mut gl = Array2::zeros(logits.raw_dim());
        let inv_b = 1.0 / b as f32;
        for i in 0..b {
            let zr = logits[[i, 0]];
            let zf = logits[[b + i, 0]];
            gl[[i, 0]] = (1.0 / (1.0 + (-zr).exp()) - 1.0) * inv_b;
            gl[[b + i, 0]] = (1.0 / (1.0 + (-zf).exp())) * inv_b;
        }
        tr.net.disc.backward_logits(&gl);
        tr.opt_d.step(&mut tr.net.disc);

        // G update
        zero_grads(&mut tr.net.gen);
        let fake = concat_pair(out.recon.data(), out.attn.data()).unwrap();
        let logits = tr.net.disc.forward_logits(&fake, true);
        let mut gl = Array2::zeros(logits.raw_dim());
        for i in 0..b {
            let z = logits[[i, 0]];
            gl[[i, 0]] = (1.0 / (1.0 + (-z).exp()) - 1.0) * inv_b;
        }
        let gin = tr.net.disc.backward_logits(&gl);
        let c = batch.channels();
        let mut g_recon = gin.slice(s![.., 0..c, .., ..]).to_owned();
        let g_attn = gin.slice(s![.., c..c + 1, .., ..]).to_owned();
        let rec_scale = 1.0f32 / (b * c * h * wd) as f32;
        ndarray::Zip::from(&mut g_recon)
            .and(out.recon.data())
            .and(batch.data())
            .for_each(|g, &r, &x| *g += (r - x) * rec_scale);
        let kl_scale = 1.0f32 / b as f32;
        let g_mu = out.latent_mean.mapv(|m| m * kl_scale);
        let g_logvar = out.latent_logvar.mapv(|lv| 0.5 * (lv.exp() - 1.0) * kl_scale);
        tr.net.gen.backward(&g_recon, &g_attn, &g_mu, &g_logvar);
        tr.opt_g.step(&mut tr.net.gen);
        tr.step += 1;
    }

    #[test]
    fn attention_range_invariant_after_training() {
        let cfg = tiny_cfg();
        let mut tr = AttentionTrainer::<f32>::new(&cfg, AugmentationConfig::default(), 31).unwrap();
        let batch = random_batch(15, 4, 3, 16);
        for _ in 0..5 {
            tr.train_step(&batch).unwrap();
        }
        let out = tr.net.generator_forward(&batch);
        assert!(out.attn.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn pretrained_encoder_hook_roundtrips() {
        let cfg = tiny_cfg();
        let mut donor = AttentionNet::<f32>::new(&cfg, 41).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let ckpt = crate::checkpoint::Checkpoint {
            kind: "attention".into(),
            step: 0,
            config: serde_json::json!({}),
            extra: Default::default(),
            tensors: export_module(donor.gen.encoder_mut()),
        };
        crate::checkpoint::save(&path, &ckpt, "f32").unwrap();

        let cfg2 = AttentionNetConfig {
            pretrained_encoder: Some(path),
            ..cfg
        };
        let mut net = AttentionNet::<f32>::new(&cfg2, 99).unwrap();
        let a = export_module(donor.gen.encoder_mut());
        let b = export_module(net.gen.encoder_mut());
        for ((n1, t1), (n2, t2)) in a.iter().zip(b.iter()) {
            assert_eq!(n1, n2);
            if !n1.ends_with(".adam_m") && !n1.ends_with(".adam_v") {
                assert_eq!(t1, t2, "{n1} not loaded");
            }
        }
    }
}
