//! MVTec-style defect trees:
//!
//! ```text
//! root/
//!   train/good/*.png
//!   test/good/*.png
//!   test/<defect>/*.png
//!   ground_truth/<defect>/<stem>_mask.png
//! ```
//!
//! Test anomalies must carry a mask (white = defect); loaded masks follow the
//! attention convention (0 = defect). Good test images get all-ones maps.

use super::archive::decode_image;
use super::manifest::read_dir_sorted;
use super::resize::{resize_bilinear, resize_mask_nearest};
use super::{DataSplit, LabeledDataset};
use crate::error::DataError;
use crate::scalar::Scalar;
use crate::types::{AttentionMask, ImageTensor};
use ndarray::Array4;
use std::path::Path;

fn decode_mask<S: Scalar>(path: &Path, out_hw: usize) -> Result<AttentionMask<S>, DataError> {
    let img = image::open(path).map_err(|e| DataError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let mut m = Array4::zeros((1, 1, h as usize, w as usize));
    for (x, y, p) in gray.enumerate_pixels() {
        // white marks the defect; attention convention inverts it
        m[[0, 0, y as usize, x as usize]] = if p.0[0] > 127 { S::zero() } else { S::one() };
    }
    let mask = AttentionMask::new_unchecked(m);
    Ok(resize_mask_nearest(&mask, out_hw, out_hw))
}

fn find_mask_file(gt_dir: &Path, stem: &str) -> Option<std::path::PathBuf> {
    if !gt_dir.is_dir() {
        return None;
    }
    let candidates = read_dir_sorted(gt_dir).ok()?;
    candidates.into_iter().find(|p| {
        p.file_stem()
            .map(|s| {
                let s = s.to_string_lossy();
                s == format!("{stem}_mask") || s == stem
            })
            .unwrap_or(false)
    })
}

/// Load a defect tree, resizing to `image_size` (square, multiple of 16).
pub fn load_defect_tree<S: Scalar>(
    root: &Path,
    image_size: usize,
) -> Result<LabeledDataset<S>, DataError> {
    if image_size == 0 || image_size % 16 != 0 {
        return Err(DataError::Layout(format!(
            "image_size {image_size} must be a positive multiple of 16"
        )));
    }
    let train_good = root.join("train").join("good");
    if !train_good.is_dir() {
        return Err(DataError::Layout(format!(
            "{}: missing train/good/",
            root.display()
        )));
    }

    // classes: good first, then defect categories sorted
    let mut defect_classes: Vec<String> = Vec::new();
    for p in read_dir_sorted(&root.join("test"))? {
        if p.is_dir() {
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            if name != "good" {
                defect_classes.push(name);
            }
        }
    }
    defect_classes.sort();
    let mut class_names = vec!["good".to_string()];
    class_names.extend(defect_classes.iter().cloned());

    let load_split_dir = |dir: &Path,
                              class: u32,
                              with_mask: bool|
     -> Result<(Vec<String>, Vec<ImageTensor<S>>, Vec<AttentionMask<S>>, Vec<u32>), DataError> {
        let mut ids = Vec::new();
        let mut imgs = Vec::new();
        let mut masks = Vec::new();
        let mut labels = Vec::new();
        for f in read_dir_sorted(dir)? {
            if !f.is_file() {
                continue;
            }
            let img = decode_image::<S>(&f)?;
            let img = resize_bilinear(&img, image_size, image_size);
            let stem = f.file_stem().unwrap().to_string_lossy().to_string();
            let mask = if with_mask {
                let cat = dir.file_name().unwrap().to_string_lossy().to_string();
                let gt_dir = root.join("ground_truth").join(&cat);
                let mf = find_mask_file(&gt_dir, &stem)
                    .ok_or_else(|| DataError::MissingMask { path: f.clone() })?;
                decode_mask::<S>(&mf, image_size)?
            } else {
                AttentionMask::ones(1, image_size, image_size)
            };
            ids.push(f.strip_prefix(root).unwrap().to_string_lossy().to_string());
            imgs.push(img);
            masks.push(mask);
            labels.push(class);
        }
        Ok((ids, imgs, masks, labels))
    };

    let (train_ids, train_imgs, train_masks, train_labels) =
        load_split_dir(&train_good, 0, false)?;
    if train_imgs.is_empty() {
        return Err(DataError::Layout("train/good/ is empty".into()));
    }

    let mut test_ids = Vec::new();
    let mut test_imgs = Vec::new();
    let mut test_masks = Vec::new();
    let mut test_labels = Vec::new();
    let test_good = root.join("test").join("good");
    if test_good.is_dir() {
        let (i, im, ma, la) = load_split_dir(&test_good, 0, false)?;
        test_ids.extend(i);
        test_imgs.extend(im);
        test_masks.extend(ma);
        test_labels.extend(la);
    }
    for (ci, cat) in defect_classes.iter().enumerate() {
        let dir = root.join("test").join(cat);
        let (i, im, ma, la) = load_split_dir(&dir, (ci + 1) as u32, true)?;
        test_ids.extend(i);
        test_imgs.extend(im);
        test_masks.extend(ma);
        test_labels.extend(la);
    }
    if test_imgs.is_empty() {
        return Err(DataError::Layout("test/ has no usable images".into()));
    }

    let tr_refs: Vec<&ImageTensor<S>> = train_imgs.iter().collect();
    let tr_mask_refs: Vec<&AttentionMask<S>> = train_masks.iter().collect();
    let te_refs: Vec<&ImageTensor<S>> = test_imgs.iter().collect();
    let te_mask_refs: Vec<&AttentionMask<S>> = test_masks.iter().collect();
    let ds = LabeledDataset {
        name: root
            .file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "defect_tree".into()),
        class_names,
        train: DataSplit {
            ids: train_ids,
            images: ImageTensor::concat(&tr_refs)?,
            labels: train_labels,
            masks: Some(AttentionMask::concat(&tr_mask_refs)?),
        },
        test: DataSplit {
            ids: test_ids,
            images: ImageTensor::concat(&te_refs)?,
            labels: test_labels,
            masks: Some(AttentionMask::concat(&te_mask_refs)?),
        },
    };
    ds.train.validate()?;
    ds.test.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, w: u32, h: u32, rgb: [u8; 3]) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::RgbImage::from_pixel(w, h, image::Rgb(rgb)).save(path).unwrap();
    }

    fn write_mask(path: &Path, w: u32, h: u32, defect_box: (u32, u32, u32, u32)) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        let mut img = image::GrayImage::from_pixel(w, h, image::Luma([0u8]));
        let (x0, y0, bw, bh) = defect_box;
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                img.put_pixel(x, y, image::Luma([255]));
            }
        }
        img.save(path).unwrap();
    }

    fn build_tree(root: &Path) {
        for i in 0..4 {
            write_png(&root.join(format!("train/good/{i:03}.png")), 32, 32, [120, 120, 120]);
        }
        for i in 0..2 {
            write_png(&root.join(format!("test/good/{i:03}.png")), 32, 32, [120, 120, 120]);
        }
        for i in 0..2 {
            write_png(&root.join(format!("test/crack/{i:03}.png")), 32, 32, [120, 40, 40]);
            write_mask(
                &root.join(format!("ground_truth/crack/{i:03}_mask.png")),
                32,
                32,
                (4, 6, 8, 8),
            );
        }
    }

    #[test]
    fn pairs_masks_and_relabels() {
        let dir = tempfile::tempdir().unwrap();
        build_tree(dir.path());
        let ds = load_defect_tree::<f32>(dir.path(), 32).unwrap();
        assert_eq!(ds.class_names, vec!["good".to_string(), "crack".to_string()]);
        assert_eq!(ds.train.len(), 4);
        assert_eq!(ds.test.len(), 4);
        let masks = ds.test.masks.as_ref().unwrap();
        assert!(masks.is_binary());
        // good test images have zero anomaly pixels
        for (i, &l) in ds.test.labels.iter().enumerate() {
            let zeros = masks.single(i).zero_count();
            if l == 0 {
                assert_eq!(zeros, 0);
            } else {
                assert_eq!(zeros, 64, "8x8 defect box");
            }
        }
    }

    #[test]
    fn anomaly_without_mask_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        build_tree(dir.path());
        write_png(&dir.path().join("test/crack/999.png"), 32, 32, [9, 9, 9]);
        let err = load_defect_tree::<f32>(dir.path(), 32).unwrap_err();
        assert!(matches!(err, DataError::MissingMask { .. }), "got {err}");
    }

    #[test]
    fn file_counts_reconcile_with_directory_listing() {
        let dir = tempfile::tempdir().unwrap();
        build_tree(dir.path());
        let ds = load_defect_tree::<f32>(dir.path(), 32).unwrap();
        let count = |p: &str| std::fs::read_dir(dir.path().join(p)).unwrap().count();
        assert_eq!(ds.train.len(), count("train/good"));
        assert_eq!(ds.test.len(), count("test/good") + count("test/crack"));
    }
}
