//! Dataset manifests: one record per image with split, class, optional mask
//! path, and a SHA-256 checksum. The manifest pins what the loader accepts.

use crate::error::DataError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the dataset root.
    pub path: String,
    pub split: String,
    pub class: u32,
    pub mask: Option<String>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    /// Square resize target; must be a multiple of 16.
    pub image_size: usize,
    pub classes: Vec<String>,
    pub has_masks: bool,
    pub files: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(DataError::Manifest(format!(
                "image_size {} must be a positive multiple of 16",
                self.image_size
            )));
        }
        if self.classes.is_empty() {
            return Err(DataError::Manifest("no classes declared".into()));
        }
        for e in &self.files {
            if e.class as usize >= self.classes.len() {
                return Err(DataError::Manifest(format!(
                    "{}: class {} out of range",
                    e.path, e.class
                )));
            }
            if e.split != "train" && e.split != "test" {
                return Err(DataError::Manifest(format!(
                    "{}: unknown split `{}`",
                    e.path, e.split
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let s = serde_json::to_string_pretty(self)
            .map_err(|e| DataError::Manifest(e.to_string()))?;
        std::fs::write(path, s).map_err(|e| DataError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let s = std::fs::read_to_string(path).map_err(|e| DataError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let m: Self = serde_json::from_str(&s).map_err(|e| DataError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn count_for_class(&self, split: &str, class: u32) -> usize {
        self.files
            .iter()
            .filter(|e| e.split == split && e.class == class)
            .count()
    }
}

pub fn sha256_file(path: &Path) -> Result<String, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

/// Scan `<root>/{train,test}/<class_dir>/*` and build a manifest. Classes are
/// the sorted union of class directory names; image order inside a class is
/// lexicographic so manifests are reproducible.
pub fn build_manifest(
    root: &Path,
    name: &str,
    image_size: usize,
) -> Result<DatasetManifest, DataError> {
    let mut class_names: Vec<String> = Vec::new();
    for split in ["train", "test"] {
        let dir = root.join(split);
        if !dir.is_dir() {
            continue;
        }
        for entry in read_dir_sorted(&dir)? {
            if entry.is_dir() {
                let c = entry.file_name().unwrap().to_string_lossy().to_string();
                if !class_names.contains(&c) {
                    class_names.push(c);
                }
            }
        }
    }
    class_names.sort();
    if class_names.is_empty() {
        return Err(DataError::Layout(format!(
            "{}: expected train/<class>/ or test/<class>/ directories",
            root.display()
        )));
    }

    let mut files = Vec::new();
    for split in ["train", "test"] {
        for (ci, cname) in class_names.iter().enumerate() {
            let dir = root.join(split).join(cname);
            if !dir.is_dir() {
                continue;
            }
            for f in read_dir_sorted(&dir)? {
                if f.is_file() {
                    let rel = f
                        .strip_prefix(root)
                        .unwrap()
                        .to_string_lossy()
                        .replace('\\', "/");
                    files.push(ManifestEntry {
                        path: rel,
                        split: split.to_string(),
                        class: ci as u32,
                        mask: None,
                        sha256: sha256_file(&f)?,
                    });
                }
            }
        }
    }
    let m = DatasetManifest {
        name: name.to_string(),
        image_size,
        classes: class_names,
        has_masks: false,
        files,
    };
    m.validate()?;
    Ok(m)
}

pub(crate) fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| DataError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}
