//! In-memory labeled image sets in the quantized input domain.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qtensor::{dequantize, quantize_value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Attack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Mnist,
    Cifar10,
    Random,
    Ga,
    TestSet,
    Synthetic,
}

/// Input quantization exponent for images: pixels in `[0, 1]` at `dec = 0`.
pub const INPUT_DEC: i32 = 0;

/// Maps an 8-bit pixel to the quantized input domain (`255 -> 127`).
pub fn quantize_pixel(p: u8) -> i8 {
    quantize_value(p as f64 / 255.0, INPUT_DEC)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub image_shape: [usize; 3],
    /// Row-major CHW images, concatenated.
    pub images: Vec<i8>,
    /// Labels in `[0, num_classes)`; empty for unlabeled attack sets.
    pub labels: Vec<u8>,
    pub num_classes: usize,
    pub split: Split,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(
        image_shape: [usize; 3],
        images: Vec<i8>,
        labels: Vec<u8>,
        num_classes: usize,
        split: Split,
        provenance: Provenance,
    ) -> Result<Self> {
        let per = image_shape.iter().product::<usize>();
        if per == 0 || !images.len().is_multiple_of(per) {
            return Err(Error::shape(
                format!("a multiple of {per} pixel values"),
                images.len(),
            ));
        }
        let n = images.len() / per;
        if !labels.is_empty() && labels.len() != n {
            return Err(Error::validation(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::validation(format!(
                "label {l} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            image_shape,
            images,
            labels,
            num_classes,
            split,
            provenance,
        })
    }

    /// Unlabeled set built from individual inputs.
    pub fn from_inputs(
        image_shape: [usize; 3],
        inputs: &[Vec<i8>],
        num_classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        Self::new(
            image_shape,
            inputs.concat(),
            Vec::new(),
            num_classes,
            Split::Attack,
            provenance,
        )
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.images.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[i8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn inputs(&self) -> Vec<Vec<i8>> {
        (0..self.len()).map(|i| self.image(i).to_vec()).collect()
    }

    /// Image as real-valued pixels.
    pub fn image_f64(&self, i: usize) -> Vec<f64> {
        dequantize(self.image(i), INPUT_DEC)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(if self.is_labeled() { indices.len() } else { 0 });
        for &i in indices {
            images.extend_from_slice(self.image(i));
            if self.is_labeled() {
                labels.push(self.labels[i]);
            }
        }
        Self {
            images,
            labels,
            ..self.clone_header()
        }
    }

    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Random `fraction` of the samples (at least one), deterministic per seed.
    pub fn sample_fraction(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::validation(format!(
                "fraction {fraction} outside (0, 1]"
            )));
        }
        let n = ((self.len() as f64 * fraction).round() as usize).clamp(1, self.len().max(1));
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        idx.sort_unstable();
        Ok(self.subset(&idx))
    }

    /// Replaces the labels (e.g. with a victim's predictions).
    pub fn relabeled(&self, labels: Vec<u8>) -> Result<Self> {
        Self::new(
            self.image_shape,
            self.images.clone(),
            labels,
            self.num_classes,
            self.split,
            self.provenance,
        )
    }

    fn clone_header(&self) -> Self {
        Self {
            image_shape: self.image_shape,
            images: Vec::new(),
            labels: Vec::new(),
            num_classes: self.num_classes,
            split: self.split,
            provenance: self.provenance,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        Dataset::new(
            [1, 1, 2],
            vec![1, 2, 3, 4, 5, 6],
            vec![0, 1, 2],
            3,
            Split::Train,
            Provenance::Synthetic,
        )
        .unwrap()
    }

    #[test]
    fn pixel_quantization() {
        assert_eq!(quantize_pixel(255), 127);
        assert_eq!(quantize_pixel(0), 0);
        assert_eq!(quantize_pixel(128), 64);
    }

    #[test]
    fn validates_counts_and_labels() {
        assert!(Dataset::new([1, 1, 2], vec![1, 2, 3], vec![], 2, Split::Test, Provenance::Mnist).is_err());
        assert!(Dataset::new([1, 1, 2], vec![1, 2], vec![0, 1], 2, Split::Test, Provenance::Mnist).is_err());
        assert!(Dataset::new([1, 1, 2], vec![1, 2], vec![2], 2, Split::Test, Provenance::Mnist).is_err());
    }

    #[test]
    fn subsets() {
        let d = toy();
        assert_eq!(d.len(), 3);
        assert_eq!(d.image(1), &[3, 4]);
        let s = d.subset(&[2, 0]);
        assert_eq!(s.images, vec![5, 6, 1, 2]);
        assert_eq!(s.labels, vec![2, 0]);
        let f = d.sample_fraction(0.34, 1).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(d.sample_fraction(0.5, 9).unwrap(), d.sample_fraction(0.5, 9).unwrap());
        assert!(d.sample_fraction(0.0, 1).is_err());
    }
}
