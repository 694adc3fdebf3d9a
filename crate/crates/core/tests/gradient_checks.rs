//! Central finite-difference verification of the analytic gradients used in
//! training, on a tiny f64 network (latent 4, 8x8 inputs).

use attnad::attention::{
    concat_pair, loss_adv, loss_attention, loss_generator, AttentionNet, AttentionNetConfig,
    ForwardMode, GeneratorOutput,
};
use attnad::nn::gradcheck::check_grads;
use attnad::nn::zero_grads;
use attnad::rng::stream;
use attnad::types::{AttentionMask, ImageTensor};
use ndarray::{s, Array2, Array4};
use rand::Rng;

const TOL: f64 = 1e-4;
const H: f64 = 1e-6;

fn tiny_cfg() -> AttentionNetConfig {
    AttentionNetConfig {
        image_channels: 3,
        image_size: 8,
        latent_dim: 4,
        base_width: 4,
        enc_blocks: vec![1],
        head_width: 4,
        disc_width: 4,
        ..Default::default()
    }
}

fn fixtures(seed: u64, n: usize) -> (ImageTensor<f64>, Array2<f64>) {
    let mut r = stream(seed, &[1]);
    let x = ImageTensor::new(Array4::from_shape_fn((n, 3, 8, 8), |_| r.gen_range(0.0..1.0)))
        .unwrap();
    let eps = Array2::from_shape_fn((n, 4), |_| r.gen_range(-1.0..1.0));
    (x, eps)
}

fn binary_mask(seed: u64, n: usize) -> AttentionMask<f64> {
    let mut r = stream(seed, &[2]);
    AttentionMask::new(Array4::from_shape_fn((n, 1, 8, 8), |_| {
        if r.gen_bool(0.5) {
            1.0
        } else {
            0.0
        }
    }))
    .unwrap()
}

#[test]
fn attention_loss_gradients_match_finite_differences() {
    let net = AttentionNet::<f64>::new(&tiny_cfg(), 101).unwrap();
    let mut gen = net.gen;
    let (x, eps) = fixtures(7, 4);
    let a_nor = AttentionMask::<f64>::ones(2, 8, 8);
    let a_ano = binary_mask(8, 2);

    // L_att over a combined batch: first half toward all-ones, second half
    // toward the anomaly ground truth.
    let l_att = |gen: &mut attnad::attention::AttentionGenerator<f64>| -> f64 {
        let out = gen.forward(x.data(), ForwardMode::Train { eps: &eps });
        let g_nor = AttentionMask::new(out.attn.data().slice(s![0..2, .., .., ..]).to_owned())
            .unwrap();
        let g_ano = AttentionMask::new(out.attn.data().slice(s![2..4, .., .., ..]).to_owned())
            .unwrap();
        loss_attention(&g_nor, &g_ano, &a_nor, &a_ano)
    };

    // analytic: d/d_attn of each mean-MSE term
    zero_grads(&mut gen);
    let out = gen.forward(x.data(), ForwardMode::Train { eps: &eps });
    let n_el = (2 * 8 * 8) as f64;
    let mut g_attn = Array4::<f64>::zeros(out.attn.data().raw_dim());
    {
        let a = out.attn.data();
        let mut g = g_attn.slice_mut(s![0..2, .., .., ..]);
        ndarray::Zip::from(&mut g)
            .and(&a.slice(s![0..2, .., .., ..]))
            .and(a_nor.data())
            .for_each(|g, &v, &t| *g = 2.0 * (v - t) / n_el);
        let mut g = g_attn.slice_mut(s![2..4, .., .., ..]);
        ndarray::Zip::from(&mut g)
            .and(&a.slice(s![2..4, .., .., ..]))
            .and(a_ano.data())
            .for_each(|g, &v, &t| *g = 2.0 * (v - t) / n_el);
    }
    let zeros_recon = Array4::zeros(out.recon.data().raw_dim());
    let zeros_mu = Array2::zeros(out.latent_mean.raw_dim());
    gen.backward(&zeros_recon, &g_attn, &zeros_mu, &zeros_mu.clone());

    let report = check_grads(&mut gen, l_att, 11, H, 1e-6);
    assert!(report.checked > 50, "too few elements checked: {report:?}");
    assert!(
        report.max_rel_err < TOL,
        "L_att gradient mismatch: {:?}",
        report
    );
}

#[test]
fn generator_loss_gradients_match_finite_differences() {
    let net = AttentionNet::<f64>::new(&tiny_cfg(), 102).unwrap();
    let mut gen = net.gen;
    let (x, eps) = fixtures(9, 3);

    let l_g = |gen: &mut attnad::attention::AttentionGenerator<f64>| -> f64 {
        let out = gen.forward(x.data(), ForwardMode::Train { eps: &eps });
        let (rec, kl) = loss_generator(&x, &out);
        rec + kl
    };

    zero_grads(&mut gen);
    let out = gen.forward(x.data(), ForwardMode::Train { eps: &eps });
    let GeneratorOutput {
        recon,
        latent_mean,
        latent_logvar,
        ..
    } = &out;
    let n_el = recon.data().len() as f64;
    let b = x.batch_size() as f64;
    let mut g_recon = Array4::<f64>::zeros(recon.data().raw_dim());
    ndarray::Zip::from(&mut g_recon)
        .and(recon.data())
        .and(x.data())
        .for_each(|g, &r, &t| *g = (r - t) / n_el);
    let g_mu = latent_mean.mapv(|m| m / b);
    let g_logvar = latent_logvar.mapv(|lv| 0.5 * (lv.exp() - 1.0) / b);
    let g_attn = Array4::zeros(out.attn.data().raw_dim());
    gen.backward(&g_recon, &g_attn, &g_mu, &g_logvar);

    let report = check_grads(&mut gen, l_g, 23, H, 1e-6);
    assert!(report.checked > 50, "too few elements checked: {report:?}");
    assert!(
        report.max_rel_err < TOL,
        "L_G gradient mismatch: {:?}",
        report
    );
}

#[test]
fn discriminator_cross_entropy_gradients_match_finite_differences() {
    let net = AttentionNet::<f64>::new(&tiny_cfg(), 103).unwrap();
    let mut disc = net.disc;
    let mut r = stream(31, &[3]);
    let real_img = ImageTensor::new(Array4::from_shape_fn((3, 3, 8, 8), |_| r.gen_range(0.0..1.0)))
        .unwrap();
    let fake_img = ImageTensor::new(Array4::from_shape_fn((3, 3, 8, 8), |_| r.gen_range(0.0..1.0)))
        .unwrap();
    let ones = AttentionMask::<f64>::ones(3, 8, 8);
    let fake_map = AttentionMask::new(Array4::from_shape_fn((3, 1, 8, 8), |_| r.gen_range(0.0..1.0)))
        .unwrap();
    let real_in = concat_pair(real_img.data(), ones.data()).unwrap();
    let fake_in = concat_pair(fake_img.data(), fake_map.data()).unwrap();

    let loss = |d: &mut attnad::backbones::Discriminator<f64>| -> f64 {
        let pr = d.forward_probs(&real_in);
        let pf = d.forward_probs(&fake_in);
        loss_adv(&pr, &pf).unwrap()
    };

    zero_grads(&mut disc);
    let zr = disc.forward_logits(&real_in, true);
    let gr = zr.mapv(|z| (1.0 / (1.0 + (-z).exp()) - 1.0) / 3.0);
    disc.backward_logits(&gr);
    let zf = disc.forward_logits(&fake_in, true);
    let gf = zf.mapv(|z| (1.0 / (1.0 + (-z).exp())) / 3.0);
    disc.backward_logits(&gf);

    let report = check_grads(&mut disc, loss, 3, H, 1e-6);
    assert!(report.checked > 50, "too few elements checked: {report:?}");
    assert!(
        report.max_rel_err < TOL,
        "adversarial D gradient mismatch: {:?}",
        report
    );
}

#[test]
fn generator_adversarial_gradients_match_finite_differences() {
    // non-saturating G loss: -mean log D(concat(recon, attn)); the
    // discriminator acts as a fixed function of the generator outputs.
    let net = AttentionNet::<f64>::new(&tiny_cfg(), 104).unwrap();
    let mut gen = net.gen;
    let mut disc = net.disc;
    let (x, eps) = fixtures(33, 3);

    // analytic grads first, while the discriminator is freely borrowable
    zero_grads(&mut gen);
    let out = gen.forward(x.data(), ForwardMode::Train { eps: &eps });
    let cat = concat_pair(out.recon.data(), out.attn.data()).unwrap();
    let z = disc.forward_logits(&cat, true);
    let gz = z.mapv(|z| (1.0 / (1.0 + (-z).exp()) - 1.0) / 3.0);
    let gin = disc.backward_logits(&gz);
    let g_recon = gin.slice(s![.., 0..3, .., ..]).to_owned();
    let g_attn = gin.slice(s![.., 3..4, .., ..]).to_owned();
    let zeros_mu = Array2::zeros(out.latent_mean.raw_dim());
    gen.backward(&g_recon, &g_attn, &zeros_mu, &zeros_mu.clone());

    let loss = |gen: &mut attnad::attention::AttentionGenerator<f64>| -> f64 {
        let out = gen.forward(x.data(), ForwardMode::Train { eps: &eps });
        let cat = concat_pair(out.recon.data(), out.attn.data()).unwrap();
        let p = disc.forward_probs(&cat);
        -p.iter().map(|v| v.ln()).sum::<f64>() / p.len() as f64
    };
    let report = check_grads(&mut gen, loss, 13, H, 1e-6);
    assert!(report.checked > 50, "too few elements checked: {report:?}");
    assert!(
        report.max_rel_err < TOL,
        "adversarial G gradient mismatch: {:?}",
        report
    );
}
