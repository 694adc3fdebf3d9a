//! The synthetic "shapes" dataset: a centered textured disk on a smoothly
//! varying background as the normal class, with rectangle patches and
//! scratches as anomalies. Every anomaly ships a pixel-exact binary mask
//! (attention convention: 0 on defect pixels). Generation is a pure function
//! of the config.

use super::{DataSplit, LabeledDataset};
use crate::rng::{self, standard_normal, stream, uniform_range};
use crate::scalar::Scalar;
use crate::types::{AttentionMask, ImageTensor};
use ndarray::{Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DefectKind {
    Rect,
    Scratch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShapesConfig {
    pub canvas: usize,
    pub train_normal: usize,
    pub test_normal: usize,
    pub test_anomaly: usize,
    pub seed: u64,
    /// Disk radius as a fraction of the canvas, uniform in this range.
    pub disk_radius_frac: (f64, f64),
    /// Per-pixel Gaussian noise sigma.
    pub noise_sigma: f64,
    /// Amplitude of the low-frequency background texture.
    pub texture_amp: f64,
    pub defect_kinds: Vec<DefectKind>,
    /// Rectangle defect edge lengths in pixels (at canvas 64, scaled linearly).
    pub rect_size: (usize, usize),
    pub scratch_len: (usize, usize),
    pub scratch_thickness: (usize, usize),
}

impl Default for SyntheticShapesConfig {
    fn default() -> Self {
        Self {
            canvas: 64,
            train_normal: 400,
            test_normal: 100,
            test_anomaly: 100,
            seed: 0,
            disk_radius_frac: (0.22, 0.30),
            noise_sigma: 0.02,
            texture_amp: 0.06,
            defect_kinds: vec![DefectKind::Rect, DefectKind::Scratch],
            rect_size: (6, 14),
            scratch_len: (16, 34),
            scratch_thickness: (2, 3),
        }
    }
}

pub const CLASS_GOOD: u32 = 0;
pub const CLASS_RECT: u32 = 1;
pub const CLASS_SCRATCH: u32 = 2;

const SPLIT_TRAIN: u64 = 1;
const SPLIT_TEST_NORMAL: u64 = 2;
const SPLIT_TEST_ANOMALY: u64 = 3;

fn scale(cfg: &SyntheticShapesConfig, v: usize) -> usize {
    ((v * cfg.canvas) as f64 / 64.0).round().max(1.0) as usize
}

/// Render the normal canvas for (split, index): gradient + low-frequency
/// texture + noise background with a warm centered disk.
fn render_normal<S: Scalar>(cfg: &SyntheticShapesConfig, split: u64, index: usize) -> Array4<S> {
    let mut r = stream(cfg.seed, &[rng::TAG_DATASET, split, index as u64]);
    let hw = cfg.canvas;
    let mut img = Array4::<f64>::zeros((1, 3, hw, hw));

    // background palette: cool bluish tones with per-image variation
    let base = [
        0.22 + uniform_range(&mut r, -0.04, 0.04),
        0.30 + uniform_range(&mut r, -0.04, 0.04),
        0.45 + uniform_range(&mut r, -0.06, 0.06),
    ];
    let fx = uniform_range(&mut r, 1.0, 3.0);
    let fy = uniform_range(&mut r, 1.0, 3.0);
    let px = uniform_range(&mut r, 0.0, 1.0);
    let py = uniform_range(&mut r, 0.0, 1.0);
    let grad = uniform_range(&mut r, -0.08, 0.08);

    // disk parameters
    let cy = hw as f64 / 2.0 + uniform_range(&mut r, -2.0, 2.0);
    let cx = hw as f64 / 2.0 + uniform_range(&mut r, -2.0, 2.0);
    let radius = uniform_range(&mut r, cfg.disk_radius_frac.0, cfg.disk_radius_frac.1) * hw as f64;
    let disk = [
        0.80 + uniform_range(&mut r, -0.05, 0.05),
        0.35 + uniform_range(&mut r, -0.05, 0.05),
        0.22 + uniform_range(&mut r, -0.05, 0.05),
    ];

    for y in 0..hw {
        for x in 0..hw {
            let t = cfg.texture_amp
                * (std::f64::consts::TAU * (fx * x as f64 / hw as f64 + px)).sin()
                * (std::f64::consts::TAU * (fy * y as f64 / hw as f64 + py)).cos();
            let g = grad * (y as f64 / hw as f64 - 0.5);
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let dist = (dy * dy + dx * dx).sqrt();
            // soft one-pixel edge on the disk
            let alpha = (radius + 0.5 - dist).clamp(0.0, 1.0);
            for c in 0..3 {
                let bg = base[c] + t + g;
                let v = bg * (1.0 - alpha) + disk[c] * alpha;
                img[[0, c, y, x]] = v;
            }
        }
    }
    // nuisance noise
    for v in img.iter_mut() {
        *v += cfg.noise_sigma * standard_normal(&mut r);
    }
    img.mapv(|v| S::from_f64(v.clamp(0.0, 1.0)))
}

fn defect_color(r: &mut ChaCha8Rng) -> [f64; 3] {
    let palette: [[f64; 3]; 4] = [
        [0.10, 0.85, 0.30], // green
        [0.10, 0.80, 0.90], // cyan
        [0.95, 0.90, 0.10], // yellow
        [0.90, 0.10, 0.80], // magenta
    ];
    let mut c = palette[r.gen_range(0..palette.len())];
    for ch in &mut c {
        *ch = (*ch + uniform_range(r, -0.05, 0.05)).clamp(0.0, 1.0);
    }
    c
}

/// Paint one defect onto the image; returns the binary coverage map
/// (true = defect pixel).
fn paint_defect<S: Scalar>(
    cfg: &SyntheticShapesConfig,
    kind: DefectKind,
    img: &mut Array4<S>,
    r: &mut ChaCha8Rng,
) -> Array2<bool> {
    let hw = cfg.canvas;
    let mut cover = Array2::from_elem((hw, hw), false);
    let color = defect_color(r);
    match kind {
        DefectKind::Rect => {
            let rh = r.gen_range(scale(cfg, cfg.rect_size.0)..=scale(cfg, cfg.rect_size.1));
            let rw = r.gen_range(scale(cfg, cfg.rect_size.0)..=scale(cfg, cfg.rect_size.1));
            let top = r.gen_range(0..=hw - rh);
            let left = r.gen_range(0..=hw - rw);
            for y in top..top + rh {
                for x in left..left + rw {
                    cover[[y, x]] = true;
                }
            }
        }
        DefectKind::Scratch => {
            let len = r.gen_range(scale(cfg, cfg.scratch_len.0)..=scale(cfg, cfg.scratch_len.1)) as f64;
            let th = r.gen_range(cfg.scratch_thickness.0..=cfg.scratch_thickness.1) as f64;
            let angle = uniform_range(r, 0.0, std::f64::consts::PI);
            let (dy, dx) = (angle.sin(), angle.cos());
            let margin = 2.0;
            let cy = uniform_range(r, margin, hw as f64 - margin);
            let cx = uniform_range(r, margin, hw as f64 - margin);
            let (y0, x0) = (cy - dy * len / 2.0, cx - dx * len / 2.0);
            let (y1, x1) = (cy + dy * len / 2.0, cx + dx * len / 2.0);
            for y in 0..hw {
                for x in 0..hw {
                    let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                    // distance from pixel center to segment
                    let vy = y1 - y0;
                    let vx = x1 - x0;
                    let t = (((py - y0) * vy + (px - x0) * vx) / (vy * vy + vx * vx))
                        .clamp(0.0, 1.0);
                    let (qy, qx) = (y0 + t * vy, x0 + t * vx);
                    let d = ((py - qy).powi(2) + (px - qx).powi(2)).sqrt();
                    if d <= th / 2.0 {
                        cover[[y, x]] = true;
                    }
                }
            }
        }
    }
    for y in 0..cfg.canvas {
        for x in 0..cfg.canvas {
            if cover[[y, x]] {
                for c in 0..3 {
                    img[[0, c, y, x]] = S::from_f64(color[c]);
                }
            }
        }
    }
    cover
}

/// Deterministically generate one anomaly with its pristine counterpart and
/// binary mask (attention convention). Exposed so tests can compare the
/// defect region against the paired normal rendering.
pub fn generate_anomaly_with_reference<S: Scalar>(
    cfg: &SyntheticShapesConfig,
    index: usize,
) -> (ImageTensor<S>, ImageTensor<S>, AttentionMask<S>, DefectKind) {
    let normal = render_normal::<S>(cfg, SPLIT_TEST_ANOMALY, index);
    let mut img = normal.clone();
    let mut r = stream(
        cfg.seed,
        &[rng::TAG_DATASET, SPLIT_TEST_ANOMALY, index as u64, 7],
    );
    let kind = cfg.defect_kinds[index % cfg.defect_kinds.len()];
    let cover = paint_defect(cfg, kind, &mut img, &mut r);
    let hw = cfg.canvas;
    let mut mask = Array4::from_elem((1, 1, hw, hw), S::one());
    for y in 0..hw {
        for x in 0..hw {
            if cover[[y, x]] {
                mask[[0, 0, y, x]] = S::zero();
            }
        }
    }
    (
        ImageTensor::new_unchecked(normal),
        ImageTensor::new_unchecked(img),
        AttentionMask::new_unchecked(mask),
        kind,
    )
}

/// Build the full dataset: `train_normal` good training images (all-ones
/// masks), and a test split of good images plus anomalies cycling through the
/// configured defect kinds.
pub fn generate_shapes_dataset<S: Scalar>(cfg: &SyntheticShapesConfig) -> LabeledDataset<S> {
    assert!(!cfg.defect_kinds.is_empty(), "need at least one defect kind");
    let hw = cfg.canvas;

    let mut train_imgs = Vec::with_capacity(cfg.train_normal);
    for i in 0..cfg.train_normal {
        train_imgs.push(ImageTensor::new_unchecked(render_normal::<S>(
            cfg,
            SPLIT_TRAIN,
            i,
        )));
    }
    let train_refs: Vec<&ImageTensor<S>> = train_imgs.iter().collect();
    let train_images = ImageTensor::concat(&train_refs).unwrap();
    let train = DataSplit {
        ids: (0..cfg.train_normal).map(|i| format!("train_good_{i:05}")).collect(),
        labels: vec![CLASS_GOOD; cfg.train_normal],
        masks: Some(AttentionMask::ones(cfg.train_normal, hw, hw)),
        images: train_images,
    };

    let mut test_imgs: Vec<ImageTensor<S>> = Vec::new();
    let mut test_masks: Vec<AttentionMask<S>> = Vec::new();
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for i in 0..cfg.test_normal {
        test_imgs.push(ImageTensor::new_unchecked(render_normal::<S>(
            cfg,
            SPLIT_TEST_NORMAL,
            i,
        )));
        test_masks.push(AttentionMask::ones(1, hw, hw));
        ids.push(format!("test_good_{i:05}"));
        labels.push(CLASS_GOOD);
    }
    for i in 0..cfg.test_anomaly {
        let (_, img, mask, kind) = generate_anomaly_with_reference::<S>(cfg, i);
        test_imgs.push(img);
        test_masks.push(mask);
        let (name, class) = match kind {
            DefectKind::Rect => ("rect", CLASS_RECT),
            DefectKind::Scratch => ("scratch", CLASS_SCRATCH),
        };
        ids.push(format!("test_{name}_{i:05}"));
        labels.push(class);
    }
    let test = DataSplit {
        ids,
        labels,
        images: if test_imgs.is_empty() {
            ImageTensor::new_unchecked(Array4::zeros((0, 3, hw, hw)))
        } else {
            let refs: Vec<&ImageTensor<S>> = test_imgs.iter().collect();
            ImageTensor::concat(&refs).unwrap()
        },
        masks: Some(if test_masks.is_empty() {
            AttentionMask::new_unchecked(Array4::zeros((0, 1, hw, hw)))
        } else {
            let refs: Vec<&AttentionMask<S>> = test_masks.iter().collect();
            AttentionMask::concat(&refs).unwrap()
        }),
    };

    LabeledDataset {
        name: "shapes".into(),
        class_names: vec!["good".into(), "rect".into(), "scratch".into()],
        train,
        test,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticShapesConfig {
        SyntheticShapesConfig {
            canvas: 32,
            train_normal: 6,
            test_normal: 4,
            test_anomaly: 4,
            seed: 77,
            ..Default::default()
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let cfg = small_cfg();
        let a = generate_shapes_dataset::<f32>(&cfg);
        let b = generate_shapes_dataset::<f32>(&cfg);
        assert_eq!(a.train.images.data(), b.train.images.data());
        assert_eq!(a.test.images.data(), b.test.images.data());
        assert_eq!(
            a.test.masks.as_ref().unwrap().data(),
            b.test.masks.as_ref().unwrap().data()
        );
    }

    #[test]
    fn masks_are_binary_and_match_defect_pixels() {
        let cfg = small_cfg();
        for i in 0..6 {
            let (normal, anomaly, mask, _) = generate_anomaly_with_reference::<f32>(&cfg, i);
            assert!(mask.is_binary());
            let zeros = mask.zero_count();
            assert!(zeros > 0, "defect must cover at least one pixel");
            // defect region differs from the paired normal; outside is identical
            let mut region_diff = 0.0f64;
            for y in 0..cfg.canvas {
                for x in 0..cfg.canvas {
                    let m = mask.data()[[0, 0, y, x]];
                    for c in 0..3 {
                        let d = (anomaly.data()[[0, c, y, x]] - normal.data()[[0, c, y, x]]).abs();
                        if m == 0.0 {
                            region_diff += d as f64;
                        } else {
                            assert_eq!(d, 0.0, "pixel outside mask changed at ({y},{x})");
                        }
                    }
                }
            }
            assert!(region_diff > 0.0);
        }
    }

    #[test]
    fn splits_have_declared_counts_and_normal_train() {
        let cfg = small_cfg();
        let ds = generate_shapes_dataset::<f32>(&cfg);
        assert_eq!(ds.train.len(), 6);
        assert_eq!(ds.test.len(), 8);
        assert!(ds.train.labels.iter().all(|&l| l == CLASS_GOOD));
        assert!(ds.train.masks.as_ref().unwrap().is_binary());
        assert_eq!(ds.train.masks.as_ref().unwrap().zero_count(), 0);
        ds.train.validate().unwrap();
        ds.test.validate().unwrap();
        // anomalies cycle through rect and scratch
        let n_rect = ds.test.labels.iter().filter(|&&l| l == CLASS_RECT).count();
        let n_scratch = ds
            .test
            .labels
            .iter()
            .filter(|&&l| l == CLASS_SCRATCH)
            .count();
        assert_eq!(n_rect, 2);
        assert_eq!(n_scratch, 2);
    }

    #[test]
    fn values_stay_in_unit_range() {
        let cfg = small_cfg();
        let ds = generate_shapes_dataset::<f64>(&cfg);
        assert!(ds
            .test
            .images
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }
}
