//! Image and mask resizing. Images use bilinear interpolation (range-
//! preserving up to clamping); masks use nearest neighbor so binary values
//! stay binary.

use crate::scalar::Scalar;
use crate::types::{AttentionMask, ImageTensor};
use ndarray::Array4;

fn src_coord(dst: usize, scale: f64, src_len: usize) -> (usize, usize, f64) {
    // half-pixel center mapping
    let s = (dst as f64 + 0.5) * scale - 0.5;
    let s = s.clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

pub fn resize_bilinear<S: Scalar>(img: &ImageTensor<S>, out_h: usize, out_w: usize) -> ImageTensor<S> {
    let x = img.data();
    let (n, c, h, w) = x.dim();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Array4::zeros((n, c, out_h, out_w));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..out_h {
                let (y0, y1, fy) = src_coord(oy, sy, h);
                for ox in 0..out_w {
                    let (x0, x1, fx) = src_coord(ox, sx, w);
                    let p00 = x[[ni, ci, y0, x0]].as_f64();
                    let p01 = x[[ni, ci, y0, x1]].as_f64();
                    let p10 = x[[ni, ci, y1, x0]].as_f64();
                    let p11 = x[[ni, ci, y1, x1]].as_f64();
                    let top = p00 * (1.0 - fx) + p01 * fx;
                    let bot = p10 * (1.0 - fx) + p11 * fx;
                    let v = top * (1.0 - fy) + bot * fy;
                    out[[ni, ci, oy, ox]] = S::from_f64(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    ImageTensor::new_unchecked(out)
}

pub fn resize_mask_nearest<S: Scalar>(
    mask: &AttentionMask<S>,
    out_h: usize,
    out_w: usize,
) -> AttentionMask<S> {
    let x = mask.data();
    let (n, _, h, w) = x.dim();
    if (h, w) == (out_h, out_w) {
        return mask.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Array4::zeros((n, 1, out_h, out_w));
    for ni in 0..n {
        for oy in 0..out_h {
            let y = (((oy as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(h - 1);
            for ox in 0..out_w {
                let xx = (((ox as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(w - 1);
                out[[ni, 0, oy, ox]] = x[[ni, 0, y, xx]];
            }
        }
    }
    AttentionMask::new_unchecked(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn constant_image_resizes_to_same_constant() {
        let img = ImageTensor::new(Array4::from_elem((1, 3, 20, 20), 0.37f32)).unwrap();
        let out = resize_bilinear(&img, 64, 64);
        for &v in out.data().iter() {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_resize_is_bit_exact() {
        let img = ImageTensor::new(Array4::from_shape_fn((1, 1, 8, 8), |(_, _, y, x)| {
            ((y * 8 + x) as f32) / 64.0
        }))
        .unwrap();
        let out = resize_bilinear(&img, 8, 8);
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn nearest_mask_resize_keeps_binary_values() {
        let mut m = Array4::<f32>::from_elem((1, 1, 10, 10), 1.0);
        for y in 3..7 {
            for x in 2..5 {
                m[[0, 0, y, x]] = 0.0;
            }
        }
        let mask = AttentionMask::new(m).unwrap();
        let out = resize_mask_nearest(&mask, 16, 16);
        assert!(out.is_binary());
        assert!(out.zero_count() > 0);
    }
}
