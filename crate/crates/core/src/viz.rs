//! PNG rendering of samples, attention overlays, and ROC curves.

use crate::error::PipelineError;
use crate::scalar::Scalar;
use crate::types::{AttentionMask, ImageTensor};
use image::{Rgb, RgbImage};
use std::path::Path;

fn to_rgb8<S: Scalar>(img: &ImageTensor<S>, index: usize) -> RgbImage {
    let d = img.data();
    let (_, c, h, w) = d.dim();
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = if c == 3 {
                [
                    (d[[index, 0, y, x]].as_f64() * 255.0).round() as u8,
                    (d[[index, 1, y, x]].as_f64() * 255.0).round() as u8,
                    (d[[index, 2, y, x]].as_f64() * 255.0).round() as u8,
                ]
            } else {
                let v = (d[[index, 0, y, x]].as_f64() * 255.0).round() as u8;
                [v, v, v]
            };
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    out
}

fn mask_to_rgb8<S: Scalar>(mask: &AttentionMask<S>, index: usize) -> RgbImage {
    let d = mask.data();
    let (_, _, h, w) = d.dim();
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (d[[index, 0, y, x]].as_f64() * 255.0).round() as u8;
            out.put_pixel(x as u32, y as u32, Rgb([v, v, v]));
        }
    }
    out
}

fn hstack(parts: &[RgbImage], gap: u32) -> RgbImage {
    let h = parts.iter().map(|p| p.height()).max().unwrap_or(1);
    let w: u32 = parts.iter().map(|p| p.width()).sum::<u32>() + gap * (parts.len() as u32 - 1);
    let mut out = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut x0 = 0u32;
    for p in parts {
        for y in 0..p.height() {
            for x in 0..p.width() {
                out.put_pixel(x0 + x, y, *p.get_pixel(x, y));
            }
        }
        x0 += p.width() + gap;
    }
    out
}

fn save(img: &RgbImage, path: &Path) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    img.save(path)
        .map_err(|e| PipelineError::io(path, std::io::Error::other(e.to_string())))
}

pub fn save_image_png<S: Scalar>(
    img: &ImageTensor<S>,
    index: usize,
    path: &Path,
) -> Result<(), PipelineError> {
    save(&to_rgb8(img, index), path)
}

/// Side-by-side (input | anomaly | mask) strip, used by `synth preview`.
pub fn save_triplet_png<S: Scalar>(
    input: &ImageTensor<S>,
    anomaly: &ImageTensor<S>,
    mask: &AttentionMask<S>,
    path: &Path,
) -> Result<(), PipelineError> {
    let strip = hstack(
        &[to_rgb8(input, 0), to_rgb8(anomaly, 0), mask_to_rgb8(mask, 0)],
        2,
    );
    save(&strip, path)
}

/// (input | attention map | attention-weighted input) strip for one test
/// sample.
pub fn save_overlay_png<S: Scalar>(
    input: &ImageTensor<S>,
    attn: &AttentionMask<S>,
    index: usize,
    path: &Path,
) -> Result<(), PipelineError> {
    let base = to_rgb8(input, index);
    let map = mask_to_rgb8(attn, index);
    let mut weighted = base.clone();
    for y in 0..base.height() {
        for x in 0..base.width() {
            let a = map.get_pixel(x, y).0[0] as f64 / 255.0;
            let p = base.get_pixel(x, y).0;
            weighted.put_pixel(
                x,
                y,
                Rgb([
                    (p[0] as f64 * a).round() as u8,
                    (p[1] as f64 * a).round() as u8,
                    (p[2] as f64 * a).round() as u8,
                ]),
            );
        }
    }
    save(&hstack(&[base, map, weighted], 2), path)
}

/// Plot an ROC polyline on a square canvas with light gridlines.
pub fn save_roc_png(points: &[(f64, f64)], path: &Path) -> Result<(), PipelineError> {
    let size = 256u32;
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let grid = Rgb([225, 225, 225]);
    for i in 1..4 {
        let p = i * size / 4;
        for t in 0..size {
            img.put_pixel(p, t, grid);
            img.put_pixel(t, p, grid);
        }
    }
    // diagonal reference
    for t in 0..size {
        img.put_pixel(t, size - 1 - t, Rgb([200, 200, 230]));
    }
    let to_px = |fpr: f64, tpr: f64| -> (i64, i64) {
        let x = (fpr.clamp(0.0, 1.0) * (size - 1) as f64).round() as i64;
        let y = ((1.0 - tpr.clamp(0.0, 1.0)) * (size - 1) as f64).round() as i64;
        (x, y)
    };
    let line = Rgb([180, 40, 40]);
    for w in points.windows(2) {
        let (x0, y0) = to_px(w[0].0, w[0].1);
        let (x1, y1) = to_px(w[1].0, w[1].1);
        // Bresenham
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            img.put_pixel(x as u32, y as u32, line);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
    save(&img, path)
}
