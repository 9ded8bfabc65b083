//! Dataset ingestion and batch preparation.

pub mod augment;
pub mod cifar;
pub mod idx;
pub mod synth;

pub use augment::{augment, AugmentOps};
pub use cifar::read_cifar10;
pub use idx::read_idx;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// An in-memory labelled image set, images `[N, C, H, W]` in [0, 1].
#[derive(Debug, Clone)]
pub struct Dataset<S: Scalar> {
    pub images: Tensor<S>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(images: Tensor<S>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if images.rank() != 4 {
            return Err(Error::InvalidArgument(format!(
                "dataset images must be [N,C,H,W], got {:?}",
                images.shape()
            )));
        }
        if n != labels.len() {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Format(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    /// Copy out a batch by sample indices.
    pub fn batch(&self, indices: &[usize]) -> DatasetBatch<S> {
        let [_, c, h, w] = self.images.shape() else { unreachable!() };
        let sample = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * sample);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * sample..(i + 1) * sample]);
            labels.push(self.labels[i]);
        }
        DatasetBatch {
            images: Tensor::new(vec![indices.len(), *c, *h, *w], data),
            labels,
        }
    }

    /// Zero-pad every image symmetrically up to `size` x `size` (e.g. MNIST
    /// 28 -> 32 so the 16x reduction divides evenly).
    pub fn pad_to(&self, size: usize) -> Result<Self> {
        let [n, c, h, w] = self.images.shape() else { unreachable!() };
        let (n, c, h, w) = (*n, *c, *h, *w);
        if size < h || size < w {
            return Err(Error::InvalidArgument(format!(
                "pad_to: target {size} smaller than image {h}x{w}"
            )));
        }
        let (top, left) = ((size - h) / 2, (size - w) / 2);
        let mut out = vec![S::ZERO; n * c * size * size];
        for img in 0..n * c {
            for y in 0..h {
                let src = img * h * w + y * w;
                let dst = img * size * size + (y + top) * size + left;
                out[dst..dst + w].copy_from_slice(&self.images.data()[src..src + w]);
            }
        }
        Ok(Self {
            images: Tensor::new(vec![n, c, size, size], out),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        })
    }
}

/// One training batch.
#[derive(Debug, Clone)]
pub struct DatasetBatch<S: Scalar> {
    pub images: Tensor<S>,
    pub labels: Vec<usize>,
}
