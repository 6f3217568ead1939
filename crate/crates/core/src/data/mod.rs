//! Datasets, binary readers and preprocessing.

mod augment;
mod cifar;
mod idx;
mod preprocess;
mod synthetic;

pub use augment::{augment, center_crop, crop_flip, Augment, CropSpec};
pub use cifar::{
    load_cifar10, load_cifar10_subset, read_cifar_records, write_cifar_records, CIFAR_CLASSES,
    CIFAR_RECORD_BYTES, CIFAR_SIDE, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES,
};
pub use idx::{load_idx, load_idx_dataset, read_idx, write_idx, IdxArray, IdxType};
pub use preprocess::{
    channel_stats, gcn, standardize, zca_apply, zca_fit, ChannelStats, Preprocessing, Preprocessor,
    ZcaTransform, GCN_FLOOR, ZCA_EPS,
};
pub use synthetic::{synthetic_cifar, write_synthetic_cifar_dir};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub source: String,
    /// Preprocessing steps applied so far, oldest first.
    pub preprocessing: Vec<String>,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        classes: usize,
        source: impl Into<String>,
    ) -> Result<Self> {
        let (n, _, _, _) = images.nchw()?;
        if n != labels.len() {
            return Err(Error::invalid(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if classes == 0 {
            return Err(Error::invalid("dataset needs at least one class"));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, l)| **l >= classes) {
            return Err(Error::invalid(format!(
                "label {l} at index {i} is outside [0, {classes})"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            source: source.into(),
            preprocessing: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.gather_outer(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    /// The first `n` samples (all of them when `n >= len`).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        Ok(Dataset {
            images: self.images.slice_outer(0, n)?,
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            source: self.source.clone(),
            preprocessing: self.preprocessing.clone(),
        })
    }

    /// Samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}
