//! Dataset acquisition and normalization: manifest-backed multiclass image
//! archives, MVTec-style defect trees with ground-truth masks, and the
//! built-in synthetic shapes dataset used for desk-scale acceptance.

pub mod archive;
pub mod defect_tree;
pub mod manifest;
pub mod resize;
pub mod shapes;

use crate::error::ShapeError;
use crate::scalar::Scalar;
use crate::types::{AttentionMask, ImageTensor};

pub use manifest::{build_manifest, DatasetManifest, ManifestEntry};
pub use shapes::{generate_shapes_dataset, DefectKind, SyntheticShapesConfig};

/// One split of a labeled dataset. Masks, when present, follow the attention
/// convention: 1 = normal region, 0 = anomalous region.
#[derive(Clone, Debug)]
pub struct DataSplit<S: Scalar> {
    pub ids: Vec<String>,
    pub images: ImageTensor<S>,
    pub labels: Vec<u32>,
    pub masks: Option<AttentionMask<S>>,
}

impl<S: Scalar> DataSplit<S> {
    pub fn len(&self) -> usize {
        self.images.batch_size()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<(), ShapeError> {
        let n = self.images.batch_size();
        if self.ids.len() != n || self.labels.len() != n {
            return Err(ShapeError::Invalid(format!(
                "split bookkeeping mismatch: {} images, {} ids, {} labels",
                n,
                self.ids.len(),
                self.labels.len()
            )));
        }
        if let Some(m) = &self.masks {
            if m.batch_size() != n
                || m.height() != self.images.height()
                || m.width() != self.images.width()
            {
                return Err(ShapeError::Mismatch {
                    expected: format!(
                        "masks [{n},1,{},{}]",
                        self.images.height(),
                        self.images.width()
                    ),
                    got: format!(
                        "[{},1,{},{}]",
                        m.batch_size(),
                        m.height(),
                        m.width()
                    ),
                });
            }
        }
        Ok(())
    }
}

/// A multiclass dataset with train/test splits.
#[derive(Clone, Debug)]
pub struct LabeledDataset<S: Scalar> {
    pub name: String,
    pub class_names: Vec<String>,
    pub train: DataSplit<S>,
    pub test: DataSplit<S>,
}

/// One-class view of a dataset: normal-only training images, binary test
/// labels (0 normal / 1 anomaly), original class ids kept for breakdowns.
#[derive(Clone, Debug)]
pub struct BinaryDataset<S: Scalar> {
    pub name: String,
    pub normal_class: u32,
    pub class_names: Vec<String>,
    pub train_images: ImageTensor<S>,
    pub test: DataSplit<S>,
    pub test_orig_class: Vec<u32>,
}
