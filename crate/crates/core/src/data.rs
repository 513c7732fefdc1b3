//! Datasets: a Gaussian-mixture generator, an IDX (MNIST-style) loader, and
//! IID / Dirichlet sharding across devices.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Tensor2;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("truncated IDX file: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("cannot split {samples} samples into {shards} non-empty shards")]
    TooManyShards { samples: usize, shards: usize },
    #[error("invalid dataset parameter: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor2,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor2, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} feature rows, {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Invalid(format!("label {l} ≥ class count {classes}")));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Isotropic Gaussian classes around centers drawn from `N(0, I)`.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    centers: Vec<Vec<f64>>,
    spread: f64,
}

impl GaussianMixture {
    pub fn new(classes: usize, dims: usize, spread: f64, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(DataError::Invalid("need at least 2 classes".into()));
        }
        if dims == 0 || !(spread >= 0.0) {
            return Err(DataError::Invalid("dims ≥ 1 and spread ≥ 0 required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = (0..classes)
            .map(|_| (0..dims).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        Ok(Self { centers, spread })
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// `per_class` samples of each class, shuffled.
    pub fn sample<R: Rng + ?Sized>(&self, per_class: usize, rng: &mut R) -> Dataset {
        let classes = self.centers.len();
        let dims = self.centers[0].len();
        let mut order: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
        order.shuffle(rng);
        let mut data = Vec::with_capacity(order.len() * dims);
        for &c in &order {
            for &m in &self.centers[c] {
                let z: f64 = rng.sample(StandardNormal);
                data.push(m + self.spread * z);
            }
        }
        Dataset {
            features: Tensor2::from_vec(order.len(), dims, data).expect("finite samples"),
            labels: order,
            classes,
        }
    }
}

pub fn gen_gaussian_mixture(classes: usize, dims: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    let mix = GaussianMixture::new(classes, dims, spread, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    Ok(mix.sample(per_class, &mut rng))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(DataError::Truncated {
                need: self.pos + n,
                have: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses an IDX image file into `(count, rows·cols, raw pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = c.u32()? as usize;
    let rows = c.u32()? as usize;
    let cols = c.u32()? as usize;
    let pixels = c.take(n * rows * cols)?.to_vec();
    Ok((n, rows * cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = c.u32()? as usize;
    Ok(c.take(n)?.to_vec())
}

/// Loads an IDX image/label pair; pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, dims, pixels) = parse_idx_images(&read_file(images)?)?;
    let raw_labels = parse_idx_labels(&read_file(labels)?)?;
    if raw_labels.len() != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: raw_labels.len(),
        });
    }
    if dims == 0 {
        return Err(DataError::Invalid("zero-sized images".into()));
    }
    let features = Tensor2::from_vec(n, dims, pixels.iter().map(|&p| p as f64 / 255.0).collect())
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(features, labels, classes)
}

pub fn encode_idx_images(rows: usize, cols: usize, images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum PartitionMode {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub shards: usize,
    pub seed: u64,
}

fn dirichlet<R: Rng + ?Sized>(alpha: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let mut p: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = p.iter().sum();
    if total > 0.0 && total.is_finite() {
        p.iter_mut().for_each(|v| *v /= total);
    } else {
        // every gamma draw underflowed: all mass on one shard
        p.iter_mut().for_each(|v| *v = 0.0);
        p[rng.random_range(0..n)] = 1.0;
    }
    p
}

/// Splits sample indices into `spec.shards` disjoint, exhaustive, non-empty
/// shards.
pub fn partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    let n = ds.len();
    let k = spec.shards;
    if k == 0 || k > n {
        return Err(DataError::TooManyShards { samples: n, shards: k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
    match spec.mode {
        PartitionMode::Iid => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let (base, extra) = (n / k, n % k);
            let mut start = 0;
            for (s, shard) in shards.iter_mut().enumerate() {
                let len = base + usize::from(s < extra);
                shard.extend_from_slice(&idx[start..start + len]);
                start += len;
            }
        }
        PartitionMode::Dirichlet { alpha } => {
            if !(alpha > 0.0) {
                return Err(DataError::Invalid(format!("dirichlet alpha must be > 0, got {alpha}")));
            }
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
            for (i, &l) in ds.labels.iter().enumerate() {
                by_class[l].push(i);
            }
            for members in by_class.iter_mut().filter(|m| !m.is_empty()) {
                members.shuffle(&mut rng);
                let p = dirichlet(alpha, k, &mut rng);
                let m = members.len();
                let mut acc = 0.0;
                let mut prev = 0;
                for (s, shard) in shards.iter_mut().enumerate() {
                    acc += p[s];
                    let cut = if s + 1 == k {
                        m
                    } else {
                        ((acc * m as f64).round() as usize).clamp(prev, m)
                    };
                    shard.extend_from_slice(&members[prev..cut]);
                    prev = cut;
                }
            }
            // repair: move one sample from the largest shard into each empty one
            while let Some(empty) = shards.iter().position(Vec::is_empty) {
                let largest = (0..k).max_by_key(|&s| (shards[s].len(), std::cmp::Reverse(s))).expect("k ≥ 1");
                let moved = shards[largest].pop().expect("largest shard has ≥ 2 samples");
                log::debug!("partition: moved sample {moved} from shard {largest} to empty shard {empty}");
                shards[empty].push(moved);
            }
        }
    }
    Ok(shards)
}

/// Total-variation distance between a shard's label distribution and the
/// global one.
pub fn label_tv_distance(ds: &Dataset, shard: &[usize]) -> f64 {
    let global = ds.class_histogram();
    let mut local = vec![0usize; ds.classes];
    for &i in shard {
        local[ds.labels[i]] += 1;
    }
    let (n, m) = (ds.len() as f64, shard.len().max(1) as f64);
    0.5 * global
        .iter()
        .zip(&local)
        .map(|(&g, &l)| (g as f64 / n - l as f64 / m).abs())
        .sum::<f64>()
}
