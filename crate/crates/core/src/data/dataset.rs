use serde::{Deserialize, Serialize};

use crate::error::{AibError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Mean and population standard deviation per channel of `[N, C, H, W]`
    /// values; a constant channel gets std 1.
    pub fn of(images: &Tensor) -> Self {
        let s = images.shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let values = (0..n).flat_map(|i| {
                let start = (i * c + ch) * plane;
                images.data()[start..start + plane].iter().copied()
            });
            let count = (n * plane) as f64;
            let m = values.clone().sum::<f64>() / count;
            let var = values.map(|v| (v - m) * (v - m)).sum::<f64>() / count;
            mean[ch] = m;
            std[ch] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Normalization { mean, std }
    }

    pub fn apply(&self, raw: &Tensor) -> Tensor {
        let s = raw.shape();
        let (c, plane) = (s[1], s[2] * s[3]);
        Tensor::from_fn(s, |i| {
            let ch = (i / plane) % c;
            (raw.data()[i] - self.mean[ch]) / self.std[ch]
        })
    }
}

/// Images with raw pixel values in `[0, 1]`, labels, and the standardization
/// applied when batches are drawn for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
    normalization: Normalization,
}

impl ImageDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(AibError::Dimension(format!(
                "dataset images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(AibError::Dimension(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(AibError::Input(format!("label {bad} outside [0, {num_classes})")));
        }
        let normalization = Normalization::of(&images);
        Ok(ImageDataset {
            images,
            labels,
            num_classes,
            split,
            normalization,
        })
    }

    /// Replaces the recorded statistics (test splits reuse the training ones).
    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Raw images and labels at `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    pub fn standardize(&self, raw: &Tensor) -> Tensor {
        self.normalization.apply(raw)
    }

    /// Keeps `classes` (relabelled `0..classes.len()` in the given order) and at
    /// most `per_class` images of each, in original order.
    pub fn subset(&self, classes: &[usize], per_class: Option<usize>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(AibError::Config("a subset needs at least two classes".into()));
        }
        let mut taken = vec![0usize; classes.len()];
        let mut indices = Vec::new();
        let mut labels = Vec::new();
        for (i, &label) in self.labels.iter().enumerate() {
            if let Some(pos) = classes.iter().position(|&c| c == label) {
                if per_class.is_none_or(|cap| taken[pos] < cap) {
                    taken[pos] += 1;
                    indices.push(i);
                    labels.push(pos);
                }
            }
        }
        if indices.is_empty() {
            return Err(AibError::Config(format!("no images of classes {classes:?}")));
        }
        let images = self.images.gather_rows(&indices)?;
        ImageDataset::new(images, labels, classes.len(), self.split)
    }

    /// Replaces the raw images, keeping labels and statistics.
    pub fn with_images(&self, images: Tensor) -> Result<Self> {
        if images.shape() != self.images.shape() {
            return Err(AibError::Dimension(format!(
                "replacement images {:?} differ from {:?}",
                images.shape(),
                self.images.shape()
            )));
        }
        Ok(ImageDataset {
            images,
            ..self.clone()
        })
    }
}

/// Pixel byte to raw value.
pub fn byte_to_unit(b: u8) -> f64 {
    b as f64 / 255.0
}

/// Raw value to pixel byte (clamped, rounded).
pub fn unit_to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
