//! Multi-domain labeled images: synthesis, on-disk loading, leave-one-domain
//! -out splitting and dual-stream pair sampling.

mod directory;
pub mod glyphs;
mod sampling;
mod synth;

pub use directory::{export_directory_dataset, load_directory_dataset, Manifest, MANIFEST_FILE};
pub use sampling::{PairBatch, PairSampler};
pub use synth::{synthesize_domains, DomainShiftSpec, DomainStyle, StyleOp};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One image with its class and domain. Pixels are CHW in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Vec<f32>,
    pub label: usize,
    pub domain: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub domain_names: Vec<String>,
    /// `(channels, height, width)`.
    pub image_shape: [usize; 3],
    /// Sample count per domain.
    pub counts: Vec<usize>,
}

impl DatasetMeta {
    pub fn num_domains(&self) -> usize {
        self.domain_names.len()
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domain_names.iter().position(|d| d == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    /// Build a dataset, validating every image against the metadata and
    /// recomputing per-domain counts.
    pub fn new(mut meta: DatasetMeta, images: Vec<LabeledImage>) -> Result<Self> {
        let pixels: usize = meta.image_shape.iter().product();
        let mut counts = vec![0; meta.num_domains()];
        for (i, im) in images.iter().enumerate() {
            if im.pixels.len() != pixels {
                return Err(Error::shape(format!(
                    "image {i} has {} values, expected {:?}",
                    im.pixels.len(),
                    meta.image_shape
                )));
            }
            if im.label >= meta.num_classes || im.domain >= meta.num_domains() {
                return Err(Error::Schema(format!(
                    "image {i} has label {} / domain {} outside K={} M={}",
                    im.label,
                    im.domain,
                    meta.num_classes,
                    meta.num_domains()
                )));
            }
            if im.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Schema(format!("image {i} has pixels outside [0, 1]")));
            }
            counts[im.domain] += 1;
        }
        meta.counts = counts;
        Ok(Self { meta, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Domains that have at least one image.
    pub fn present_domains(&self) -> Vec<usize> {
        (0..self.meta.num_domains())
            .filter(|&d| self.meta.counts[d] > 0)
            .collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.label).collect()
    }

    /// Stack the selected images into an `(N, C, H, W)` tensor.
    pub fn batch_tensor<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let [c, h, w] = self.meta.image_shape;
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend(self.images[i].pixels.iter().map(|&v| T::lit(v as f64)));
        }
        Tensor::from_vec(&[indices.len(), c, h, w], data).expect("validated image shape")
    }

    /// SHA-256 over labels, domains and pixel bits, in order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for im in &self.images {
            h.update((im.label as u64).to_le_bytes());
            h.update((im.domain as u64).to_le_bytes());
            for v in &im.pixels {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn subset(&self, keep: impl Fn(&LabeledImage) -> bool) -> Result<Dataset> {
        let images = self.images.iter().filter(|i| keep(i)).cloned().collect();
        Dataset::new(self.meta.clone(), images)
    }
}

/// Split into `(train, test)`: test is exactly the `held_out` domain.
pub fn leave_one_out_split(data: &Dataset, held_out: usize) -> Result<(Dataset, Dataset)> {
    if held_out >= data.meta.num_domains() {
        return Err(Error::config(format!(
            "held-out domain {held_out} out of range for {} domains",
            data.meta.num_domains()
        )));
    }
    let train = data.subset(|i| i.domain != held_out)?;
    let test = data.subset(|i| i.domain == held_out)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(m: usize, per: usize) -> Dataset {
        let meta = DatasetMeta {
            num_classes: 2,
            domain_names: (0..m).map(|d| format!("d{d}")).collect(),
            image_shape: [1, 1, 1],
            counts: vec![],
        };
        let images = (0..m * per)
            .map(|i| LabeledImage {
                pixels: vec![0.5],
                label: i % 2,
                domain: i / per,
            })
            .collect();
        Dataset::new(meta, images).unwrap()
    }

    #[test]
    fn split_partitions_by_domain() {
        let d = toy(4, 5);
        let (train, test) = leave_one_out_split(&d, 2).unwrap();
        assert_eq!(train.len() + test.len(), d.len());
        assert!(test.images.iter().all(|i| i.domain == 2));
        assert!(train.images.iter().all(|i| i.domain != 2));
        assert_eq!(train.present_domains(), vec![0, 1, 3]);
    }

    #[test]
    fn split_two_domains() {
        let d = toy(2, 3);
        let (train, _) = leave_one_out_split(&d, 0).unwrap();
        assert_eq!(train.present_domains(), vec![1]);
    }

    #[test]
    fn split_out_of_range() {
        assert!(matches!(leave_one_out_split(&toy(2, 3), 2), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_bad_pixels() {
        let mut d = toy(2, 1);
        d.images[0].pixels[0] = 1.5;
        assert!(Dataset::new(d.meta.clone(), d.images).is_err());
    }
}
