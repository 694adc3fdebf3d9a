//! Train (or reuse) a run and print detection AUROC for every score source:
//! ADGAN discriminator, attention-net reconstruction loss, and attention-net
//! discriminator.
//!
//! Usage: score_compare <run_config.json> [--reuse]

use attnad::attention::AttentionTrainer;
use attnad::metrics::auroc;
use attnad::pipeline::{ingest, run_two_stage, score_test_split, RunConfig, RunManifest, ScoreSource};

fn main() {
    let mut args = std::env::args().skip(1);
    let cfg_path = args.next().expect("usage: score_compare <config.json> [--reuse]");
    let reuse = args.next().as_deref() == Some("--reuse");
    let raw = std::fs::read_to_string(&cfg_path).expect("read config");
    let cfg = RunConfig::from_json(&raw).expect("parse config");

    let manifest_path = cfg.output_dir.join("manifest.json");
    let manifest = if reuse && manifest_path.exists() {
        RunManifest::load(&manifest_path).expect("load manifest")
    } else {
        run_two_stage(&cfg, false).expect("run")
    };

    let dataset = ingest::<attnad::Real>(&cfg).expect("ingest");
    let mut tr = AttentionTrainer::<attnad::Real>::new(
        &cfg.effective_attention(),
        cfg.augmentation.clone(),
        cfg.seed,
    )
    .expect("trainer");
    let ckpt = attnad::checkpoint::load(manifest.stage1_checkpoint.as_ref().unwrap()).unwrap();
    attnad::checkpoint::import_module(&mut tr.net.gen, &ckpt).unwrap();
    attnad::checkpoint::import_module(&mut tr.net.disc, &ckpt).unwrap();
    let mut attn = tr.net;

    let mut adgan = manifest.stage2_checkpoint.as_ref().map(|p| {
        let mut tr2 = attnad::adgan::AdganTrainer::<attnad::Real>::new(
            &cfg.adgan,
            cfg.attention.image_channels,
            cfg.attention.image_size,
            attnad::rng::derive_seed(cfg.seed, &[attnad::rng::TAG_STAGE2]),
        )
        .expect("adgan trainer");
        let ckpt = attnad::checkpoint::load(p).unwrap();
        attnad::checkpoint::import_module(&mut tr2.net.extractor, &ckpt).unwrap();
        attnad::checkpoint::import_module(&mut tr2.net.gen, &ckpt).unwrap();
        attnad::checkpoint::import_module(&mut tr2.net.disc, &ckpt).unwrap();
        tr2.net
    });

    if let Some(ad) = adgan.as_mut() {
        let recs = score_test_split(&mut attn, Some(ad), &dataset, ScoreSource::Adgan, true).unwrap();
        println!("adgan_discriminator auroc: {:.4}", auroc(&recs).unwrap());
        println!(
            "pixel auroc: {:.4}",
            attnad::metrics::pixel_auroc(&recs).unwrap()
        );
    }
    for (src, name) in [
        (ScoreSource::ReconLoss, "attention_recon_loss"),
        (ScoreSource::AttnDiscriminator, "attention_discriminator"),
    ] {
        let recs = score_test_split(&mut attn, None, &dataset, src, false).unwrap();
        println!("{name} auroc: {:.4}", auroc(&recs).unwrap());
    }
}
