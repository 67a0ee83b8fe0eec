//! Datasets, IDX ingestion and Poisson subsampling.

use std::fs;
use std::path::Path;

use crate::error::{param, structural, Error, Result};
use crate::numerics::{bernoulli_mask, RandomStream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-per-example feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(structural("dataset must contain at least one example"));
        }
        if dim == 0 || features.len() != n * dim {
            return Err(structural(format!(
                "expected {n}x{dim} features, got {} values",
                features.len()
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(structural("dataset features must be finite"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(structural(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            features,
            labels,
            dim,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Keeps the listed rows, in the given order.
    pub fn select(&self, rows: &[usize], name: impl Into<String>) -> Result<Self> {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &i in rows {
            if i >= self.len() {
                return Err(structural(format!("row {i} out of range")));
            }
            features.extend_from_slice(self.features(i));
            labels.push(self.labels[i]);
        }
        Self::new(features, labels, self.dim, self.num_classes, name)
    }

    /// Splits into the first `n` rows and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return Err(param(format!(
                "split point {n} must lie strictly inside 1..{}",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((
            self.select(&head, format!("{}-train", self.name))?,
            self.select(&tail, format!("{}-eval", self.name))?,
        ))
    }
}

/// Poisson subsample of `0..n` for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub mask: Vec<bool>,
    pub indices: Vec<usize>,
    pub q: f64,
    /// `L = qN`, the divisor used by the parameter update.
    pub expected_lot: f64,
}

impl SampleBatch {
    pub fn from_mask(mask: Vec<bool>, q: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&q) {
            return Err(param(format!("sampling probability must lie in [0, 1], got {q}")));
        }
        let indices = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        let expected_lot = q * mask.len() as f64;
        Ok(Self {
            mask,
            indices,
            q,
            expected_lot,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Same batch with example `i` dropped from the mask.
    pub fn without(&self, i: usize) -> Self {
        let mut mask = self.mask.clone();
        if let Some(m) = mask.get_mut(i) {
            *m = false;
        }
        let indices = self.indices.iter().copied().filter(|&j| j != i).collect();
        Self {
            mask,
            indices,
            q: self.q,
            expected_lot: self.expected_lot,
        }
    }
}

pub fn poisson_sample(stream: RandomStream, n: usize, q: f64) -> Result<SampleBatch> {
    let mask = bernoulli_mask(stream, n, q)?;
    SampleBatch::from_mask(mask, q)
}

fn read_be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(Error::from)
}

fn check_len(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

fn check_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<()> {
    check_len(path, bytes, 4)?;
    let found = read_be_u32(bytes, 0);
    if found != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("expected IDX magic 0x{expected:08x}, found 0x{found:08x}"),
        });
    }
    Ok(())
}

/// Loads an IDX image/label pair, scaling pixels to `[0, 1]`.
///
/// The class count is `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<Dataset> {
    if limit == Some(0) {
        return Err(param("row limit must be positive"));
    }
    let images = read_file(images_path)?;
    check_magic(images_path, &images, IDX_IMAGES_MAGIC)?;
    check_len(images_path, &images, 16)?;
    let count = read_be_u32(&images, 4) as usize;
    let rows = read_be_u32(&images, 8) as usize;
    let cols = read_be_u32(&images, 12) as usize;
    let dim = rows * cols;

    let labels_raw = read_file(labels_path)?;
    check_magic(labels_path, &labels_raw, IDX_LABELS_MAGIC)?;
    check_len(labels_path, &labels_raw, 8)?;
    let label_count = read_be_u32(&labels_raw, 4) as usize;
    if label_count != count {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            message: format!("label count {label_count} does not match image count {count}"),
        });
    }

    let n = limit.map_or(count, |l| l.min(count));
    check_len(images_path, &images, 16 + n * dim)?;
    check_len(labels_path, &labels_raw, 8 + n)?;

    let features = images[16..16 + n * dim]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels: Vec<usize> = labels_raw[8..8 + n].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_owned());
    Dataset::new(features, labels, dim, num_classes.max(2), name)
}

/// Serializes images and labels in IDX layout. Pixels are given as raw bytes.
pub fn encode_idx(pixels: &[u8], rows: u32, cols: u32, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let count = labels.len() as u32;
    let mut img = Vec::with_capacity(16 + pixels.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&count.to_be_bytes());
    img.extend_from_slice(&rows.to_be_bytes());
    img.extend_from_slice(&cols.to_be_bytes());
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&count.to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

/// Balanced Gaussian blobs with unit isotropic noise. Class `c` is centred
/// at `3·u_c` where `u_c = ±e_(c mod d)`, positive for the first `d` classes
/// and negative for the next `d`. Example `i` has label `i mod classes`.
pub fn gen_synthetic(stream: RandomStream, n: usize, d: usize, classes: usize) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(param("synthetic dataset needs n >= 1 and d >= 1"));
    }
    if classes < 2 || classes > 2 * d {
        return Err(param(format!(
            "synthetic dataset needs 2 <= classes <= 2*d = {}, got {classes}",
            2 * d
        )));
    }
    let mut rng = stream.generator();
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let axis = c % d;
        let sign = if c < d { 1.0 } else { -1.0 };
        labels.push(c);
        for k in 0..d {
            let center = if k == axis { 3.0 * sign } else { 0.0 };
            features.push(center + rng.standard_normal());
        }
    }
    Dataset::new(features, labels, d, classes, format!("synthetic-{classes}c-{d}d"))
}
