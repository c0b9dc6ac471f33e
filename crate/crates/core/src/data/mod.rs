//! Datasets (CIFAR binary, synthetic) and checkpoint serialization.

mod checkpoint;
mod cifar;
mod synth;

pub use checkpoint::{Blob, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use cifar::{load_cifar, parse_cifar, read_cifar, CifarKind, PIXELS_PER_IMAGE};
pub use synth::synth_dataset;

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Synthetic,
}

/// Images `(n, 3, 32, 32)` with values in `[0, 1]` and integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let s = images.shape();
        if s.n != labels.len() {
            return Err(Error::invalid(
                "dataset",
                format!("{} images but {} labels", s.n, labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label, classes });
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> Shape4 {
        Shape4::new(1, self.images.shape().c, self.images.shape().h, self.images.shape().w)
    }

    /// Copy the given samples into a batch tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let s = self.images.shape();
        let mut data = Vec::with_capacity(indices.len() * s.sample());
        for &i in indices {
            data.extend_from_slice(self.images.sample(i));
        }
        let shape = Shape4::new(indices.len(), s.c, s.h, s.w);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&idx);
        Dataset::new(images, labels, self.classes, self.split)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}
