//! Manifest-backed loading of labeled multiclass image archives
//! (directory trees of encoded images).

use super::manifest::{sha256_file, DatasetManifest};
use super::resize::resize_bilinear;
use super::{DataSplit, LabeledDataset};
use crate::error::DataError;
use crate::scalar::Scalar;
use crate::types::ImageTensor;
use ndarray::Array4;
use std::path::Path;

/// Decode one image file to a [1, 3, H, W] tensor in [0,1]. Grayscale inputs
/// are channel-replicated.
pub fn decode_image<S: Scalar>(path: &Path) -> Result<ImageTensor<S>, DataError> {
    let img = image::open(path).map_err(|e| DataError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut out = Array4::zeros((1, 3, h as usize, w as usize));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[0, c, y as usize, x as usize]] = S::from_f64(p.0[c] as f64 / 255.0);
        }
    }
    Ok(ImageTensor::new_unchecked(out))
}

/// Load an archive against its manifest: checksums verified, images decoded,
/// resized to the declared square size and range-normalized.
pub fn load_multiclass_archive<S: Scalar>(
    root: &Path,
    manifest: &DatasetManifest,
) -> Result<LabeledDataset<S>, DataError> {
    manifest.validate()?;
    let size = manifest.image_size;
    let mut splits: std::collections::BTreeMap<&str, (Vec<String>, Vec<ImageTensor<S>>, Vec<u32>)> =
        Default::default();
    for e in &manifest.files {
        let path = root.join(&e.path);
        let got = sha256_file(&path)?;
        if got != e.sha256 {
            return Err(DataError::ChecksumMismatch { path });
        }
        let img = decode_image::<S>(&path)?;
        let img = resize_bilinear(&img, size, size);
        let slot = splits.entry(e.split.as_str()).or_default();
        slot.0.push(e.path.clone());
        slot.1.push(img);
        slot.2.push(e.class);
    }
    let mut take = |name: &str| -> Result<DataSplit<S>, DataError> {
        match splits.remove(name) {
            Some((ids, imgs, labels)) => {
                let refs: Vec<&ImageTensor<S>> = imgs.iter().collect();
                Ok(DataSplit {
                    ids,
                    images: ImageTensor::concat(&refs)?,
                    labels,
                    masks: None,
                })
            }
            None => Err(DataError::Layout(format!("no `{name}` split in manifest"))),
        }
    };
    let train = take("train")?;
    let test = take("test")?;
    Ok(LabeledDataset {
        name: manifest.name.clone(),
        class_names: manifest.classes.clone(),
        train,
        test,
    })
}
