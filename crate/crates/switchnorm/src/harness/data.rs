//! Deterministic synthetic classification data.

use crate::error::{Result, SnError};
use crate::tensor::{Rng, Tensor4};

/// A labeled image set, `(samples, C, H, W)`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Split into two datasets sharing the class patterns: the first
    /// `first` samples and the rest.
    pub fn split(&self, first: usize) -> Result<(Dataset, Dataset)> {
        if first == 0 || first >= self.len() {
            return Err(SnError::Parameter(format!(
                "split point {first} outside 1..{}",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..first).collect();
        let tail: Vec<usize> = (first..self.len()).collect();
        let (head_images, head_labels) = self.gather(&head)?;
        let (tail_images, tail_labels) = self.gather(&tail)?;
        Ok((
            Dataset {
                images: head_images,
                labels: head_labels,
                classes: self.classes,
            },
            Dataset {
                images: tail_images,
                labels: tail_labels,
                classes: self.classes,
            },
        ))
    }

    /// Copy the given samples into a fresh batch tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor4, Vec<usize>)> {
        if indices.is_empty() {
            return Err(SnError::Data("empty batch".into()));
        }
        let (_, c, h, w) = self.images.shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let src = self.images.as_slice();
        for &ix in indices {
            data.extend_from_slice(&src[ix * per..(ix + 1) * per]);
        }
        let batch = Tensor4::from_vec(indices.len(), c, h, w, data)?;
        let labels = indices.iter().map(|&ix| self.labels[ix]).collect();
        Ok((batch, labels))
    }
}

/// Class-conditional Gaussian blobs over per-channel mean patterns.
///
/// Each class gets a random pattern vector in channel space; a sample
/// is that pattern broadcast over `(H, W)` plus elementwise Gaussian
/// noise. Labels are assigned round-robin, so class counts differ by
/// at most one. At `noise = 0` the classes are points in feature
/// space, hence linearly separable.
pub fn synth_dataset(
    rng: &mut Rng,
    classes: usize,
    samples: usize,
    c: usize,
    h: usize,
    w: usize,
    noise: f64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(SnError::Parameter(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if samples == 0 {
        return Err(SnError::Parameter("need at least one sample".into()));
    }
    if noise.is_nan() || noise < 0.0 {
        return Err(SnError::Parameter(format!(
            "noise must be >= 0, got {noise}"
        )));
    }

    let patterns: Vec<f64> = (0..classes * c).map(|_| rng.normal()).collect();
    let labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();

    let hw = h * w;
    let mut data = vec![0.0; samples * c * hw];
    for (i, &label) in labels.iter().enumerate() {
        for cc in 0..c {
            let base = (i * c + cc) * hw;
            let mean = patterns[label * c + cc];
            for k in 0..hw {
                data[base + k] = mean + noise * rng.normal();
            }
        }
    }

    Ok(Dataset {
        images: Tensor4::from_vec(samples, c, h, w, data)?,
        labels,
        classes,
    })
}
