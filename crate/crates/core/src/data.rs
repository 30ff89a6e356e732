//! Datasets: MNIST in IDX format and seeded Gaussian blobs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N×…` inputs, normalized.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if labels.is_empty() || inputs.batch_len() != labels.len() || inputs.ndim() < 2 {
            return Err(Error::Data(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// The first `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        Dataset::new(
            self.inputs.slice_batch(0, n)?,
            self.labels[..n].to_vec(),
            self.num_classes,
            self.split,
        )
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Dataset> {
        Dataset::new(
            self.inputs.gather_batch(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
            split,
        )
    }

    /// Seeded random partition into train and test parts.
    pub fn split_off(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0 < test_fraction && test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test fraction must lie in (0, 1), got {test_fraction}"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((self.len() as f64 * test_fraction).round() as usize).clamp(1, self.len() - 1);
        let (test, train) = idx.split_at(n_test);
        Ok((self.subset(train, Split::Train)?, self.subset(test, Split::Test)?))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let Some(b) = self.bytes.get(self.pos..end) else {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        };
        self.pos = end;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn body(&self, len: usize) -> Result<&'a [u8]> {
        let have = self.bytes.len() - self.pos;
        if have < len {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                message: format!("truncated payload: {len} bytes expected, {have} present"),
            });
        }
        Ok(&self.bytes[self.pos..self.pos + len])
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.u32_be("magic")?;
    if magic != IDX_IMAGES {
        return Err(Error::Format {
            offset: 0,
            message: format!("image magic {magic:#010x}, expected {IDX_IMAGES:#010x}"),
        });
    }
    let n = r.u32_be("image count")? as usize;
    let rows = r.u32_be("row count")? as usize;
    let cols = r.u32_be("column count")? as usize;
    Ok((n, rows, cols, r.body(n * rows * cols)?))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.u32_be("magic")?;
    if magic != IDX_LABELS {
        return Err(Error::Format {
            offset: 0,
            message: format!("label magic {magic:#010x}, expected {IDX_LABELS:#010x}"),
        });
    }
    let n = r.u32_be("label count")? as usize;
    r.body(n)
}

/// Loads an IDX image/label pair as a `N×1×H×W` dataset of 10 classes,
/// scaled to `[0, 1]` and standardized with the MNIST statistics.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let img_bytes = read_file(images_path)?;
    let lab_bytes = read_file(labels_path)?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes)?;
    let labels = parse_idx_labels(&lab_bytes)?;
    if labels.len() != n {
        return Err(Error::Data(format!("{n} images but {} labels", labels.len())));
    }
    let data = pixels
        .iter()
        .map(|&p| (p as f64 / 255.0 - MNIST_MEAN) / MNIST_STD)
        .collect();
    let inputs = Tensor::new(vec![n, 1, rows, cols], data)?;
    Dataset::new(inputs, labels.iter().map(|&y| y as usize).collect(), 10, split)
}

/// Standard MNIST file names for a split.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (images, labels) = mnist_paths(dir, split);
    for p in [&images, &labels] {
        if !p.is_file() {
            return Err(Error::Data(format!(
                "missing MNIST file {}; run scripts/fetch_mnist.sh or point QCFS_DATA_DIR at a directory holding the four uncompressed IDX files",
                p.display()
            )));
        }
    }
    load_idx(&images, &labels, split)
}

/// Seeded Gaussian clusters.
///
/// Class centers are drawn uniformly from `[-3, 3]^dim`; each sample is its
/// center plus isotropic noise of standard deviation `spread`. Features are
/// then standardized to zero mean and unit variance (features with zero
/// variance are only centered).
pub fn synth_blobs(n_per_class: usize, n_classes: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 || n_classes == 0 || dim == 0 {
        return Err(Error::Config("blob counts and dimension must be positive".into()));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Config(format!(
            "blob spread must be finite and ≥ 0, got {spread}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center_dist = Uniform::new_inclusive(-3.0, 3.0).expect("valid range");
    let noise = Normal::new(0.0, spread).expect("valid spread");
    let centers: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..dim).map(|_| center_dist.sample(&mut rng)).collect())
        .collect();
    let n = n_per_class * n_classes;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (class, c) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            data.extend(c.iter().map(|&m| m + noise.sample(&mut rng)));
            labels.push(class);
        }
    }
    for j in 0..dim {
        let mean = (0..n).map(|i| data[i * dim + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (data[i * dim + j] - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            data[i * dim + j] = (data[i * dim + j] - mean) / scale;
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, n_classes, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic() {
        assert_eq!(
            synth_blobs(20, 3, 4, 0.7, 11).unwrap(),
            synth_blobs(20, 3, 4, 0.7, 11).unwrap()
        );
        assert_ne!(
            synth_blobs(20, 3, 4, 0.7, 11).unwrap(),
            synth_blobs(20, 3, 4, 0.7, 12).unwrap()
        );
    }

    #[test]
    fn wrong_label_magic_is_rejected() {
        let mut bytes = 0x0803u32.to_be_bytes().to_vec();
        bytes.extend(1u32.to_be_bytes());
        bytes.push(3);
        assert!(matches!(parse_idx_labels(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(matches!(parse_idx_images(&[]), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let mut bytes = 0x0801u32.to_be_bytes().to_vec();
        bytes.extend(5u32.to_be_bytes());
        bytes.extend([1, 2]);
        match parse_idx_labels(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_partitions_samples() {
        let d = synth_blobs(10, 2, 2, 0.5, 1).unwrap();
        let (tr, te) = d.split_off(0.3, 5).unwrap();
        assert_eq!(tr.len() + te.len(), 20);
        assert_eq!(te.len(), 6);
        assert_eq!(te.split, Split::Test);
    }
}
