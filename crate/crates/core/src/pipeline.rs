//! Two-stage run orchestration: config, training loops with checkpoints and
//! crash-resume, evaluation with report/artifact emission, and the
//! augmentation experiment matrix.

use crate::adgan::{anomaly_score, AdganConfig, AdganTrainer};
use crate::attention::{concat_pair, AttentionNetConfig, AttentionTrainer, ForwardMode};
use crate::checkpoint::{self, Checkpoint};
use crate::data::{
    self, generate_shapes_dataset, BinaryDataset, DatasetManifest, SyntheticShapesConfig,
};
use crate::error::{ConfigError, PipelineError, TrainError};
use crate::metrics::{
    auroc, classification_accuracy, pixel_auroc, roc_points, ClassBreakdown, EvalReport,
    ScoreRecord, ThresholdPolicy,
};
use crate::rng::{self, stream};
use crate::scalar::Scalar;
use crate::synth::{sample_anomaly_batch, AugmentationConfig};
use crate::types::ImageTensor;
use crate::viz;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const EXIT_CONFIG_ERROR: i32 = 2;
pub const EXIT_DATA_ERROR: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DatasetRef {
    /// Built-in synthetic dataset.
    Shapes { config: SyntheticShapesConfig },
    /// Manifest-backed multiclass archive.
    Archive { root: PathBuf, manifest: PathBuf },
    /// MVTec-style folder tree.
    DefectTree { root: PathBuf, image_size: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FallbackScore {
    /// Attention-net reconstruction error as the anomaly score.
    ReconLoss,
    /// Inverted attention-net discriminator output.
    AttnDiscriminator,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationFlags {
    #[serde(default)]
    pub disable_att: bool,
    #[serde(default)]
    pub disable_adv_ano: bool,
    /// Skip stage 2 and score with the given fallback.
    #[serde(default)]
    pub skip_adgan: Option<FallbackScore>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub steps: u64,
    pub batch_size: usize,
    /// 0 = only the final checkpoint is written.
    #[serde(default)]
    pub checkpoint_every: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    #[serde(default = "default_true")]
    pub write_overlays: bool,
    #[serde(default = "default_true")]
    pub write_roc: bool,
    /// Compute pixel AUROC when the dataset carries masks.
    #[serde(default = "default_true")]
    pub pixel_metrics: bool,
}

fn default_true() -> bool {
    true
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            write_overlays: true,
            write_roc: true,
            pixel_metrics: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetRef,
    /// Normal class for the one-class protocol.
    pub normal_class: u32,
    pub augmentation: AugmentationConfig,
    pub attention: AttentionNetConfig,
    pub adgan: AdganConfig,
    pub stage1: StageSchedule,
    pub stage2: StageSchedule,
    /// Master seed; all stage/step streams derive from it. Mandatory.
    pub seed: u64,
    #[serde(default)]
    pub ablation: AblationFlags,
    #[serde(default)]
    pub eval: EvalOptions,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Effective attention config after applying ablation flags.
    pub fn effective_attention(&self) -> AttentionNetConfig {
        let mut cfg = self.attention.clone();
        if self.ablation.disable_att {
            cfg.weights.att = 0.0;
        }
        if self.ablation.disable_adv_ano {
            cfg.weights.adv_ano = 0.0;
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.augmentation.validate()?;
        self.effective_attention().validate()?;
        self.adgan.validate(self.attention.image_size)?;
        if self.stage1.steps == 0 {
            return Err(ConfigError::InvalidField {
                field: "stage1.steps".into(),
                reason: "must be positive".into(),
            });
        }
        if self.stage1.batch_size == 0 || self.stage2.batch_size == 0 {
            return Err(ConfigError::InvalidField {
                field: "batch_size".into(),
                reason: "must be positive".into(),
            });
        }
        if self.ablation.skip_adgan.is_some() && self.stage2.steps > 0 {
            return Err(ConfigError::Inconsistent(
                "skip_adgan is set but stage2.steps > 0; set stage2.steps = 0".into(),
            ));
        }
        if self.ablation.skip_adgan.is_none() && self.stage2.steps == 0 {
            return Err(ConfigError::Inconsistent(
                "stage2.steps = 0 requires an ablation.skip_adgan fallback score".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Fingerprint {
    pub crate_version: String,
    pub config_sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum RunStatus {
    Completed,
    Diverged {
        stage: String,
        step: u64,
        checkpoint: PathBuf,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WallClock {
    pub stage1_secs: f64,
    pub stage2_secs: f64,
    pub eval_secs: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub fingerprint: Fingerprint,
    pub stage1_checkpoint: Option<PathBuf>,
    pub stage2_checkpoint: Option<PathBuf>,
    pub report_path: Option<PathBuf>,
    pub metrics: Option<EvalReport>,
    pub wall_clock: WallClock,
    pub status: RunStatus,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let s = serde_json::to_string_pretty(self)
            .map_err(|e| PipelineError::io(path, std::io::Error::other(e.to_string())))?;
        std::fs::write(path, s).map_err(|e| PipelineError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let s = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        serde_json::from_str(&s)
            .map_err(|e| PipelineError::Config(ConfigError::Parse(e.to_string())))
    }
}

pub fn fingerprint(cfg: &RunConfig) -> Fingerprint {
    let mut h = Sha256::new();
    h.update(cfg.to_json().as_bytes());
    Fingerprint {
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: format!("{:x}", h.finalize()),
    }
}

/// Ingest the configured dataset and apply the one-class protocol.
pub fn ingest<S: Scalar>(cfg: &RunConfig) -> Result<BinaryDataset<S>, PipelineError> {
    let labeled = match &cfg.dataset {
        DatasetRef::Shapes { config } => generate_shapes_dataset::<S>(config),
        DatasetRef::Archive { root, manifest } => {
            let m = DatasetManifest::load(manifest)?;
            data::archive::load_multiclass_archive::<S>(root, &m)?
        }
        DatasetRef::DefectTree { root, image_size } => {
            data::defect_tree::load_defect_tree::<S>(root, *image_size)?
        }
    };
    let bin = crate::metrics::one_class_protocol(&labeled, cfg.normal_class)?;
    if bin.train_images.height() != cfg.attention.image_size
        || bin.train_images.width() != cfg.attention.image_size
    {
        return Err(PipelineError::Config(ConfigError::Inconsistent(format!(
            "dataset images are {}x{} but attention.image_size is {}",
            bin.train_images.height(),
            bin.train_images.width(),
            cfg.attention.image_size
        ))));
    }
    Ok(bin)
}

fn select_batch<S: Scalar>(
    pool: &ImageTensor<S>,
    seed: u64,
    stage_tag: u64,
    step: u64,
    batch_size: usize,
) -> ImageTensor<S> {
    let mut r = stream(seed, &[rng::TAG_BATCH, stage_tag, step]);
    let idx = rng::sample_indices(&mut r, pool.batch_size(), batch_size);
    pool.select(&idx)
}

fn append_line(path: &Path, line: &str) -> Result<(), PipelineError> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| PipelineError::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| PipelineError::io(path, e))
}

// ---------------------------------------------------------------------------
// Trainer checkpointing
// ---------------------------------------------------------------------------

fn save_attention_checkpoint<S: Scalar>(
    tr: &mut AttentionTrainer<S>,
    cfg_json: serde_json::Value,
    path: &Path,
) -> Result<(), PipelineError> {
    let mut tensors = checkpoint::export_module(&mut tr.net.gen);
    tensors.extend(checkpoint::export_module(&mut tr.net.disc));
    let ckpt = Checkpoint {
        kind: "attention".into(),
        step: tr.step,
        config: cfg_json,
        extra: BTreeMap::from([
            ("opt_g_t".to_string(), tr.opt_g.t),
            ("opt_d_t".to_string(), tr.opt_d.t),
        ]),
        tensors,
    };
    checkpoint::save(path, &ckpt, S::KIND.name())?;
    Ok(())
}

fn load_attention_checkpoint<S: Scalar>(
    tr: &mut AttentionTrainer<S>,
    path: &Path,
) -> Result<(), PipelineError> {
    let ckpt = checkpoint::load(path)?;
    if ckpt.kind != "attention" {
        return Err(PipelineError::Checkpoint(
            crate::error::CheckpointError::WrongKind {
                expected: "attention".into(),
                got: ckpt.kind,
            },
        ));
    }
    checkpoint::import_module(&mut tr.net.gen, &ckpt)?;
    checkpoint::import_module(&mut tr.net.disc, &ckpt)?;
    tr.step = ckpt.step;
    tr.opt_g.t = *ckpt.extra.get("opt_g_t").unwrap_or(&0);
    tr.opt_d.t = *ckpt.extra.get("opt_d_t").unwrap_or(&0);
    Ok(())
}

fn save_adgan_checkpoint<S: Scalar>(
    tr: &mut AdganTrainer<S>,
    cfg_json: serde_json::Value,
    path: &Path,
) -> Result<(), PipelineError> {
    let mut tensors = checkpoint::export_module(&mut tr.net.extractor);
    tensors.extend(checkpoint::export_module(&mut tr.net.gen));
    tensors.extend(checkpoint::export_module(&mut tr.net.disc));
    let ckpt = Checkpoint {
        kind: "adgan".into(),
        step: tr.step,
        config: cfg_json,
        extra: BTreeMap::from([
            ("opt_g_t".to_string(), tr.opt_g.t),
            ("opt_d_t".to_string(), tr.opt_d.t),
            ("opt_ext_t".to_string(), tr.opt_ext.t),
        ]),
        tensors,
    };
    checkpoint::save(path, &ckpt, S::KIND.name())?;
    Ok(())
}

fn load_adgan_checkpoint<S: Scalar>(
    tr: &mut AdganTrainer<S>,
    path: &Path,
) -> Result<(), PipelineError> {
    let ckpt = checkpoint::load(path)?;
    if ckpt.kind != "adgan" {
        return Err(PipelineError::Checkpoint(
            crate::error::CheckpointError::WrongKind {
                expected: "adgan".into(),
                got: ckpt.kind,
            },
        ));
    }
    checkpoint::import_module(&mut tr.net.extractor, &ckpt)?;
    checkpoint::import_module(&mut tr.net.gen, &ckpt)?;
    checkpoint::import_module(&mut tr.net.disc, &ckpt)?;
    tr.step = ckpt.step;
    tr.opt_g.t = *ckpt.extra.get("opt_g_t").unwrap_or(&0);
    tr.opt_d.t = *ckpt.extra.get("opt_d_t").unwrap_or(&0);
    tr.opt_ext.t = *ckpt.extra.get("opt_ext_t").unwrap_or(&0);
    Ok(())
}

fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut best: Option<(u64, PathBuf)> = None;
    let entries = std::fs::read_dir(dir).ok()?;
    for e in entries.flatten() {
        let p = e.path();
        let name = p.file_name()?.to_string_lossy().to_string();
        if let Some(stem) = name.strip_prefix("step_").and_then(|s| s.strip_suffix(".ckpt")) {
            if let Ok(step) = stem.parse::<u64>() {
                if best.as_ref().map(|(b, _)| step > *b).unwrap_or(true) {
                    best = Some((step, p.clone()));
                }
            }
        }
    }
    best.map(|(_, p)| p)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// How detection scores are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreSource {
    Adgan,
    ReconLoss,
    AttnDiscriminator,
}

impl ScoreSource {
    fn name(self) -> &'static str {
        match self {
            ScoreSource::Adgan => "adgan_discriminator",
            ScoreSource::ReconLoss => "attention_recon_loss",
            ScoreSource::AttnDiscriminator => "attention_discriminator",
        }
    }
}

/// Score every test sample. Detection score per `source`; pixel scores are
/// the inverted attention map when masks are available.
pub fn score_test_split<S: Scalar>(
    attn: &mut crate::attention::AttentionNet<S>,
    adgan: Option<&mut crate::adgan::AdganNet<S>>,
    dataset: &BinaryDataset<S>,
    source: ScoreSource,
    with_pixels: bool,
) -> Result<Vec<ScoreRecord>, PipelineError> {
    let test = &dataset.test;
    let n = test.len();
    let mut records = Vec::with_capacity(n);
    let chunk = 32usize;
    let mut adgan = adgan;
    let mut start = 0usize;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let images = test.images.select(&idx);
        let out = attn.gen.forward(images.data(), ForwardMode::Eval);
        let scores: Vec<f64> = match source {
            ScoreSource::Adgan => {
                let ad = adgan
                    .as_deref_mut()
                    .expect("adgan snapshot required for adgan scoring");
                anomaly_score(&images, attn, ad)?
                    .iter()
                    .map(|v| v.as_f64())
                    .collect()
            }
            ScoreSource::ReconLoss => {
                // per-sample mean squared reconstruction error
                let mut v = Vec::with_capacity(end - start);
                for i in 0..(end - start) {
                    let r = out.recon.single(i);
                    let x = images.single(i);
                    let mse = r
                        .data()
                        .iter()
                        .zip(x.data().iter())
                        .map(|(&a, &b)| {
                            let d = a.as_f64() - b.as_f64();
                            d * d
                        })
                        .sum::<f64>()
                        / r.data().len() as f64;
                    v.push(mse);
                }
                v
            }
            ScoreSource::AttnDiscriminator => {
                let cat = concat_pair(images.data(), out.attn.data())?;
                attn.disc
                    .forward_probs(&cat)
                    .iter()
                    .map(|p| 1.0 - p.as_f64())
                    .collect()
            }
        };
        for (k, gi) in idx.iter().enumerate() {
            let (pixel_scores, pixel_labels) = if with_pixels {
                match &test.masks {
                    Some(masks) => {
                        let (h, w) = (masks.height(), masks.width());
                        let mut ps = ndarray::Array2::zeros((h, w));
                        let mut pl = ndarray::Array2::zeros((h, w));
                        for y in 0..h {
                            for x in 0..w {
                                ps[[y, x]] = 1.0 - out.attn.data()[[k, 0, y, x]].as_f64();
                                pl[[y, x]] =
                                    if masks.data()[[*gi, 0, y, x]] == S::zero() { 1 } else { 0 };
                            }
                        }
                        (Some(ps), Some(pl))
                    }
                    None => (None, None),
                }
            } else {
                (None, None)
            };
            records.push(ScoreRecord {
                sample_id: test.ids[*gi].clone(),
                label: test.labels[*gi] as u8,
                score: scores[k],
                pixel_scores,
                pixel_labels,
                class_id: Some(dataset.test_orig_class[*gi]),
            });
        }
        start = end;
    }
    Ok(records)
}

/// Deterministic stratified half split of records into (validation, evaluation).
fn split_for_threshold(records: &[ScoreRecord], seed: u64) -> (Vec<ScoreRecord>, Vec<ScoreRecord>) {
    let mut val = Vec::new();
    let mut eval = Vec::new();
    for label in [0u8, 1u8] {
        let mut idx: Vec<usize> = records
            .iter()
            .enumerate()
            .filter_map(|(i, r)| (r.label == label).then_some(i))
            .collect();
        let mut r = stream(seed, &[rng::TAG_EVAL_SPLIT, label as u64]);
        idx.shuffle(&mut r);
        for (k, i) in idx.into_iter().enumerate() {
            if k % 2 == 0 {
                val.push(records[i].clone());
            } else {
                eval.push(records[i].clone());
            }
        }
    }
    (val, eval)
}

/// Build the evaluation report from score records.
pub fn build_report(
    records: &[ScoreRecord],
    class_names: &[String],
    normal_class: u32,
    pixel_metrics: bool,
    seed: u64,
    source: ScoreSource,
) -> Result<EvalReport, PipelineError> {
    let det_auroc = auroc(records)?;
    let px = if pixel_metrics && records.iter().any(|r| r.pixel_scores.is_some()) {
        Some(pixel_auroc(records)?)
    } else {
        None
    };
    let (val, eval_half) = split_for_threshold(records, seed);
    let (accuracy, threshold) = classification_accuracy(
        &eval_half,
        &ThresholdPolicy::MaxBalancedAccuracy {
            validation: val.clone(),
        },
    )?;

    let normals: Vec<ScoreRecord> = records.iter().filter(|r| r.label == 0).cloned().collect();
    let mut per_class = Vec::new();
    let mut classes: Vec<u32> = records.iter().filter_map(|r| r.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    for c in classes {
        let members: Vec<ScoreRecord> = records
            .iter()
            .filter(|r| r.class_id == Some(c))
            .cloned()
            .collect();
        let mean_score = members.iter().map(|r| r.score).sum::<f64>() / members.len() as f64;
        let auroc_vs_normal = if c == normal_class {
            None
        } else {
            let mut vs: Vec<ScoreRecord> = normals.clone();
            vs.extend(members.iter().cloned());
            Some(auroc(&vs)?)
        };
        per_class.push(ClassBreakdown {
            class_id: c,
            class_name: class_names
                .get(c as usize)
                .cloned()
                .unwrap_or_else(|| format!("class_{c}")),
            n: members.len(),
            mean_score,
            auroc_vs_normal,
        });
    }
    Ok(EvalReport {
        score_source: source.name().to_string(),
        auroc: det_auroc,
        pixel_auroc: px,
        accuracy_at_threshold: accuracy,
        threshold,
        threshold_policy: "max_balanced_accuracy_on_validation_half".into(),
        per_class,
        n_samples: records.len(),
        n_validation: val.len(),
        n_evaluation: records.len() - val.len(),
    })
}

fn write_eval_artifacts<S: Scalar>(
    records: &[ScoreRecord],
    report: &EvalReport,
    dataset: &BinaryDataset<S>,
    attn: &mut crate::attention::AttentionNet<S>,
    opts: &EvalOptions,
    eval_dir: &Path,
) -> Result<PathBuf, PipelineError> {
    std::fs::create_dir_all(eval_dir).map_err(|e| PipelineError::io(eval_dir, e))?;
    let report_path = eval_dir.join("report.json");
    std::fs::write(&report_path, report.to_json())
        .map_err(|e| PipelineError::io(&report_path, e))?;

    let scores_path = eval_dir.join("scores.csv");
    let mut csv = String::from("sample_id,label,score\n");
    for r in records {
        csv.push_str(&format!("{},{},{}\n", r.sample_id, r.label, r.score));
    }
    std::fs::write(&scores_path, csv).map_err(|e| PipelineError::io(&scores_path, e))?;

    if opts.write_roc {
        let pts = roc_points(records);
        let mut csv = String::from("fpr,tpr\n");
        for (f, t) in &pts {
            csv.push_str(&format!("{f},{t}\n"));
        }
        let p = eval_dir.join("roc.csv");
        std::fs::write(&p, csv).map_err(|e| PipelineError::io(&p, e))?;
        viz::save_roc_png(&pts, &eval_dir.join("roc.png"))?;
    }

    if opts.write_overlays {
        let dir = eval_dir.join("overlays");
        let test = &dataset.test;
        for (i, r) in records.iter().enumerate() {
            if r.label != 1 {
                continue;
            }
            let img = test.images.single(i);
            let out = attn.gen.forward(img.data(), ForwardMode::Eval);
            let safe = r.sample_id.replace(['/', '\\'], "_");
            viz::save_overlay_png(&img, &out.attn, 0, &dir.join(format!("{safe}.png")))?;
        }
    }
    Ok(report_path)
}

// ---------------------------------------------------------------------------
// Two-stage run
// ---------------------------------------------------------------------------

/// Train stage 1 then stage 2 (or a fallback), evaluate, and persist
/// everything under `cfg.output_dir`. With `resume`, training restarts from
/// the latest checkpoints and reproduces the uninterrupted run exactly.
pub fn run_two_stage(cfg: &RunConfig, resume: bool) -> Result<RunManifest, PipelineError> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
    std::fs::write(out.join("config.json"), cfg.to_json())
        .map_err(|e| PipelineError::io(out.join("config.json"), e))?;

    let dataset: BinaryDataset<crate::Real> = ingest(cfg)?;
    let mut manifest = RunManifest {
        config: cfg.clone(),
        fingerprint: fingerprint(cfg),
        stage1_checkpoint: None,
        stage2_checkpoint: None,
        report_path: None,
        metrics: None,
        wall_clock: WallClock {
            stage1_secs: 0.0,
            stage2_secs: 0.0,
            eval_secs: 0.0,
        },
        status: RunStatus::Completed,
    };
    let manifest_path = out.join("manifest.json");

    // ---- stage 1 ----
    let stage1_dir = out.join("stage1");
    std::fs::create_dir_all(&stage1_dir).map_err(|e| PipelineError::io(&stage1_dir, e))?;
    let attn_cfg = cfg.effective_attention();
    let aug = cfg
        .augmentation
        .with_seed(rng::derive_seed(cfg.seed, &[rng::TAG_STAGE1, rng::TAG_SAMPLE]));
    let mut tr1 = AttentionTrainer::<crate::Real>::new(&attn_cfg, aug, cfg.seed)?;
    tr1.use_synthetic_anomalies = use_synth_for(cfg);
    if resume {
        if let Some(p) = latest_checkpoint(&stage1_dir) {
            load_attention_checkpoint(&mut tr1, &p)?;
        }
    }
    let losses_csv = stage1_dir.join("losses.csv");
    if tr1.step == 0 {
        std::fs::write(
            &losses_csv,
            format!("{}\n", crate::attention::LossBundle::<crate::Real>::csv_header()),
        )
        .map_err(|e| PipelineError::io(&losses_csv, e))?;
    }
    let t0 = Instant::now();
    let stage1_cfg_json = serde_json::to_value(&attn_cfg).unwrap();
    while tr1.step < cfg.stage1.steps {
        let batch = select_batch(
            &dataset.train_images,
            cfg.seed,
            rng::TAG_STAGE1,
            tr1.step,
            cfg.stage1.batch_size,
        );
        let step_before = tr1.step;
        match tr1.train_step(&batch) {
            Ok(bundle) => {
                append_line(&losses_csv, &bundle.csv_row(step_before))?;
            }
            Err(TrainError::Diverged { stage, step, .. }) => {
                let diag = stage1_dir.join(format!("diverged_step_{step}.ckpt"));
                save_attention_checkpoint(&mut tr1, stage1_cfg_json.clone(), &diag)?;
                manifest.status = RunStatus::Diverged {
                    stage: stage.clone(),
                    step,
                    checkpoint: diag.clone(),
                };
                manifest.save(&manifest_path)?;
                return Err(PipelineError::Train(TrainError::Diverged {
                    stage,
                    step,
                    checkpoint: Some(diag),
                }));
            }
            Err(e) => return Err(e.into()),
        }
        if cfg.stage1.checkpoint_every > 0
            && tr1.step % cfg.stage1.checkpoint_every == 0
            && tr1.step < cfg.stage1.steps
        {
            let p = stage1_dir.join(format!("step_{:07}.ckpt", tr1.step));
            save_attention_checkpoint(&mut tr1, stage1_cfg_json.clone(), &p)?;
        }
    }
    let stage1_final = stage1_dir.join(format!("step_{:07}.ckpt", tr1.step));
    save_attention_checkpoint(&mut tr1, stage1_cfg_json.clone(), &stage1_final)?;
    manifest.stage1_checkpoint = Some(stage1_final.clone());
    manifest.wall_clock.stage1_secs = t0.elapsed().as_secs_f64();

    // stage-1 snapshot is frozen from here on
    let mut attn_net = tr1.net;
    let frozen_hash = hash_params(&mut attn_net);

    // ---- stage 2 ----
    let mut adgan_net = None;
    if cfg.ablation.skip_adgan.is_none() {
        let stage2_dir = out.join("stage2");
        std::fs::create_dir_all(&stage2_dir).map_err(|e| PipelineError::io(&stage2_dir, e))?;
        let mut tr2 = AdganTrainer::<crate::Real>::new(
            &cfg.adgan,
            cfg.attention.image_channels,
            cfg.attention.image_size,
            rng::derive_seed(cfg.seed, &[rng::TAG_STAGE2]),
        )?;
        if resume {
            if let Some(p) = latest_checkpoint(&stage2_dir) {
                load_adgan_checkpoint(&mut tr2, &p)?;
            }
        }
        let losses2_csv = stage2_dir.join("losses.csv");
        if tr2.step == 0 {
            std::fs::write(
                &losses2_csv,
                format!("{}\n", crate::attention::LossBundle::<crate::Real>::csv_header()),
            )
            .map_err(|e| PipelineError::io(&losses2_csv, e))?;
        }
        let t1 = Instant::now();
        let stage2_cfg_json = serde_json::to_value(&cfg.adgan).unwrap();
        while tr2.step < cfg.stage2.steps {
            let batch = select_batch(
                &dataset.train_images,
                cfg.seed,
                rng::TAG_STAGE2,
                tr2.step,
                cfg.stage2.batch_size,
            );
            let step_before = tr2.step;
            match tr2.train_step(&batch, &mut attn_net) {
                Ok(bundle) => {
                    append_line(&losses2_csv, &bundle.csv_row(step_before))?;
                }
                Err(TrainError::Diverged { stage, step, .. }) => {
                    let diag = stage2_dir.join(format!("diverged_step_{step}.ckpt"));
                    save_adgan_checkpoint(&mut tr2, stage2_cfg_json.clone(), &diag)?;
                    manifest.status = RunStatus::Diverged {
                        stage: stage.clone(),
                        step,
                        checkpoint: diag.clone(),
                    };
                    manifest.save(&manifest_path)?;
                    return Err(PipelineError::Train(TrainError::Diverged {
                        stage,
                        step,
                        checkpoint: Some(diag),
                    }));
                }
                Err(e) => return Err(e.into()),
            }
            if cfg.stage2.checkpoint_every > 0
                && tr2.step % cfg.stage2.checkpoint_every == 0
                && tr2.step < cfg.stage2.steps
            {
                let p = stage2_dir.join(format!("step_{:07}.ckpt", tr2.step));
                save_adgan_checkpoint(&mut tr2, stage2_cfg_json.clone(), &p)?;
            }
        }
        let stage2_final = stage2_dir.join(format!("step_{:07}.ckpt", tr2.step));
        save_adgan_checkpoint(&mut tr2, stage2_cfg_json.clone(), &stage2_final)?;
        manifest.stage2_checkpoint = Some(stage2_final);
        manifest.wall_clock.stage2_secs = t1.elapsed().as_secs_f64();
        adgan_net = Some(tr2.net);
    }

    assert_eq!(
        frozen_hash,
        hash_params(&mut attn_net),
        "stage-1 weights must not change during stage 2"
    );

    // ---- evaluation ----
    let t2 = Instant::now();
    let source = match cfg.ablation.skip_adgan {
        None => ScoreSource::Adgan,
        Some(FallbackScore::ReconLoss) => ScoreSource::ReconLoss,
        Some(FallbackScore::AttnDiscriminator) => ScoreSource::AttnDiscriminator,
    };
    let with_pixels = cfg.eval.pixel_metrics && dataset.test.masks.is_some();
    let records = score_test_split(
        &mut attn_net,
        adgan_net.as_mut(),
        &dataset,
        source,
        with_pixels,
    )?;
    let report = build_report(
        &records,
        &dataset.class_names,
        dataset.normal_class,
        with_pixels,
        cfg.seed,
        source,
    )?;
    let report_path = write_eval_artifacts(
        &records,
        &report,
        &dataset,
        &mut attn_net,
        &cfg.eval,
        &out.join("eval"),
    )?;
    manifest.wall_clock.eval_secs = t2.elapsed().as_secs_f64();
    manifest.report_path = Some(report_path);
    manifest.metrics = Some(report);
    manifest.save(&manifest_path)?;
    Ok(manifest)
}

fn use_synth_for(cfg: &RunConfig) -> bool {
    // a fully inert augmentation config means the run trains without
    // synthesized anomalies (the Table-1 "base" condition)
    !cfg.augmentation.prime_steps_empty() || !cfg.ablation.disable_adv_ano
}

fn hash_params<S: Scalar, M: crate::nn::Module<S>>(m: &mut M) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    m.visit_params(&mut |p| {
        p.name.hash(&mut h);
        for v in p.value.iter() {
            v.as_f64().to_bits().hash(&mut h);
        }
    });
    h.finish()
}

/// Re-run evaluation from a saved run manifest.
pub fn evaluate_from_manifest(manifest_path: &Path) -> Result<EvalReport, PipelineError> {
    let manifest = RunManifest::load(manifest_path)?;
    let cfg = &manifest.config;
    cfg.validate()?;
    let dataset: BinaryDataset<crate::Real> = ingest(cfg)?;

    let s1 = manifest.stage1_checkpoint.as_ref().ok_or_else(|| {
        PipelineError::Config(ConfigError::Inconsistent(
            "manifest has no stage-1 checkpoint".into(),
        ))
    })?;
    let attn_cfg = cfg.effective_attention();
    let mut tr1 = AttentionTrainer::<crate::Real>::new(
        &attn_cfg,
        cfg.augmentation.clone(),
        cfg.seed,
    )?;
    load_attention_checkpoint(&mut tr1, s1)?;
    let mut attn_net = tr1.net;

    let mut adgan_net = None;
    if let Some(s2) = &manifest.stage2_checkpoint {
        let mut tr2 = AdganTrainer::<crate::Real>::new(
            &cfg.adgan,
            cfg.attention.image_channels,
            cfg.attention.image_size,
            rng::derive_seed(cfg.seed, &[rng::TAG_STAGE2]),
        )?;
        load_adgan_checkpoint(&mut tr2, s2)?;
        adgan_net = Some(tr2.net);
    }
    let source = match cfg.ablation.skip_adgan {
        None => ScoreSource::Adgan,
        Some(FallbackScore::ReconLoss) => ScoreSource::ReconLoss,
        Some(FallbackScore::AttnDiscriminator) => ScoreSource::AttnDiscriminator,
    };
    let with_pixels = cfg.eval.pixel_metrics && dataset.test.masks.is_some();
    let records = score_test_split(
        &mut attn_net,
        adgan_net.as_mut(),
        &dataset,
        source,
        with_pixels,
    )?;
    let report = build_report(
        &records,
        &dataset.class_names,
        dataset.normal_class,
        with_pixels,
        cfg.seed,
        source,
    )?;
    write_eval_artifacts(
        &records,
        &report,
        &dataset,
        &mut attn_net,
        &cfg.eval,
        &manifest_path
            .parent()
            .unwrap_or(Path::new("."))
            .join("eval"),
    )?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Augmentation experiment matrix
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugCondition {
    Base,
    Rotate,
    Perm,
    Jitter,
    RotatePerm,
    RotatePermJitter,
}

impl AugCondition {
    pub fn name(self) -> &'static str {
        match self {
            AugCondition::Base => "base",
            AugCondition::Rotate => "rotate",
            AugCondition::Perm => "perm",
            AugCondition::Jitter => "jitter",
            AugCondition::RotatePerm => "r_and_p",
            AugCondition::RotatePermJitter => "r_and_p_and_j",
        }
    }

    /// Restrict an augmentation config to this condition's transforms.
    pub fn shape_augmentation(self, base: &AugmentationConfig) -> AugmentationConfig {
        let mut aug = base.clone();
        let (rot, perm, jit) = match self {
            AugCondition::Base => (false, false, false),
            AugCondition::Rotate => (true, false, false),
            AugCondition::Perm => (false, true, false),
            AugCondition::Jitter => (false, false, true),
            AugCondition::RotatePerm => (true, true, false),
            AugCondition::RotatePermJitter => (true, true, true),
        };
        if !rot {
            aug.rotation_angles.clear();
        }
        if !perm {
            aug.perm_grid = None;
        }
        if !jit {
            aug.jitter = crate::synth::JitterRanges {
                brightness: 0.0,
                contrast: 0.0,
                saturation: 0.0,
            };
        }
        aug
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixConfig {
    pub base: RunConfig,
    pub conditions: Vec<AugCondition>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixRow {
    pub condition: String,
    pub per_class_auroc: Vec<(String, f64)>,
    pub mean_auroc: f64,
    pub overall_auroc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixReport {
    pub rows: Vec<MatrixRow>,
    /// Published reference means for orientation (same experiment on CIFAR10):
    /// base 0.583, r_and_p_and_j 0.663, semi-supervised upper reference 0.687.
    pub reference_means: Vec<(String, f64)>,
}

impl MatrixReport {
    pub fn to_text_table(&self) -> String {
        let mut classes: Vec<String> = Vec::new();
        for row in &self.rows {
            for (c, _) in &row.per_class_auroc {
                if !classes.contains(c) {
                    classes.push(c.clone());
                }
            }
        }
        let mut s = String::new();
        s.push_str(&format!("{:<16}", "condition"));
        for c in &classes {
            s.push_str(&format!("{c:>12}"));
        }
        s.push_str(&format!("{:>12}\n", "mean"));
        for row in &self.rows {
            s.push_str(&format!("{:<16}", row.condition));
            for c in &classes {
                let v = row
                    .per_class_auroc
                    .iter()
                    .find(|(n, _)| n == c)
                    .map(|(_, v)| *v);
                match v {
                    Some(v) => s.push_str(&format!("{v:>12.4}")),
                    None => s.push_str(&format!("{:>12}", "-")),
                }
            }
            s.push_str(&format!("{:>12.4}\n", row.mean_auroc));
        }
        s.push('\n');
        for (name, v) in &self.reference_means {
            s.push_str(&format!("reference {name}: {v:.3}\n"));
        }
        s
    }
}

/// Train one detector per augmentation condition (same seed and data) and
/// tabulate per-class and mean AUROC.
pub fn run_augmentation_matrix(cfg: &MatrixConfig) -> Result<MatrixReport, PipelineError> {
    let mut rows = Vec::new();
    for cond in &cfg.conditions {
        let mut run_cfg = cfg.base.clone();
        run_cfg.augmentation = cond.shape_augmentation(&cfg.base.augmentation);
        if *cond == AugCondition::Base {
            run_cfg.ablation.disable_adv_ano = true;
        }
        run_cfg.output_dir = cfg.base.output_dir.join(cond.name());
        let manifest = run_two_stage(&run_cfg, false)?;
        let report = manifest.metrics.expect("completed run has metrics");
        let per_class: Vec<(String, f64)> = report
            .per_class
            .iter()
            .filter_map(|c| c.auroc_vs_normal.map(|a| (c.class_name.clone(), a)))
            .collect();
        let mean = if per_class.is_empty() {
            report.auroc
        } else {
            per_class.iter().map(|(_, v)| v).sum::<f64>() / per_class.len() as f64
        };
        rows.push(MatrixRow {
            condition: cond.name().to_string(),
            per_class_auroc: per_class,
            mean_auroc: mean,
            overall_auroc: report.auroc,
        });
    }
    let report = MatrixReport {
        rows,
        reference_means: vec![
            ("base".into(), 0.583),
            ("r_and_p_and_j".into(), 0.663),
            ("semi".into(), 0.687),
        ],
    };
    let json_path = cfg.base.output_dir.join("matrix_report.json");
    std::fs::create_dir_all(&cfg.base.output_dir)
        .map_err(|e| PipelineError::io(&cfg.base.output_dir, e))?;
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| PipelineError::io(&json_path, e))?;
    let txt_path = cfg.base.output_dir.join("matrix_report.txt");
    std::fs::write(&txt_path, report.to_text_table())
        .map_err(|e| PipelineError::io(&txt_path, e))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Synth preview
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PreviewRecord<'a> {
    index: usize,
    seed: u64,
    kind: &'a str,
    mask_zero_fraction: f64,
    mask_mean: f64,
    recipe: &'a crate::synth::Recipe,
}

/// Generate sample anomalies from shapes normals and write side-by-side PNG
/// triplets plus a JSONL manifest (one record per sample).
pub fn synth_preview(
    out_dir: &Path,
    aug: &AugmentationConfig,
    shapes: &SyntheticShapesConfig,
    count: usize,
) -> Result<PathBuf, PipelineError> {
    aug.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    let mut shapes_cfg = shapes.clone();
    shapes_cfg.train_normal = count;
    shapes_cfg.test_normal = 0;
    shapes_cfg.test_anomaly = 0;
    let ds = generate_shapes_dataset::<crate::Real>(&shapes_cfg);
    let samples = sample_anomaly_batch(&ds.train.images, aug)?;
    let manifest_path = out_dir.join("preview.jsonl");
    let mut lines = String::new();
    for (i, s) in samples.iter().enumerate() {
        let input = ds.train.images.single(i);
        viz::save_triplet_png(
            &input,
            &s.image,
            &s.mask,
            &out_dir.join(format!("sample_{i:04}.png")),
        )?;
        let total = (s.mask.height() * s.mask.width()) as f64;
        let zeros = s.mask.zero_count() as f64;
        let mean = s
            .mask
            .data()
            .iter()
            .map(|v| v.as_f64())
            .sum::<f64>()
            / total;
        let rec = PreviewRecord {
            index: i,
            seed: s.recipe.seed,
            kind: match s.recipe.kind {
                crate::synth::AnomalyKind::Prime => "prime",
                crate::synth::AnomalyKind::Cut => "cut",
            },
            mask_zero_fraction: zeros / total,
            mask_mean: mean,
            recipe: &s.recipe,
        };
        lines.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        lines.push('\n');
    }
    std::fs::write(&manifest_path, lines).map_err(|e| PipelineError::io(&manifest_path, e))?;
    Ok(manifest_path)
}
