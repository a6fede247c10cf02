//! Datasets, IDX parsing and deterministic minibatching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;
const MNIST_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Split {
    #[default]
    Train,
    Test,
    Other,
}

/// Labeled examples with one-hot targets, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<f64>,
    dim: usize,
    classes: usize,
    split: Split,
}

impl Dataset {
    /// Builds a dataset from inputs and integer class labels.
    pub fn from_labels(
        inputs: Vec<f64>,
        dim: usize,
        labels: &[usize],
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        if dim == 0 || inputs.len() != labels.len() * dim {
            return Err(Error::shape(format!(
                "{} inputs of width {} do not match {} labels",
                inputs.len(),
                dim,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::shape(format!(
                "label {} outside {} classes",
                bad, classes
            )));
        }
        let mut onehot = vec![0.0; labels.len() * classes];
        for (i, &l) in labels.iter().enumerate() {
            onehot[i * classes + l] = 1.0;
        }
        Ok(Dataset {
            inputs,
            labels: onehot,
            dim,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len() / self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn onehot(&self) -> &[f64] {
        &self.labels
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        let row = &self.labels[i * self.classes..(i + 1) * self.classes];
        row.iter().position(|&v| v == 1.0).expect("one-hot row")
    }

    /// Gathers the given rows into a batch.
    pub fn batch(&self, indices: &[usize]) -> DataBatch {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len() * self.classes);
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
            labels.extend_from_slice(&self.labels[i * self.classes..(i + 1) * self.classes]);
        }
        DataBatch {
            inputs,
            labels,
            dim: self.dim,
            classes: self.classes,
        }
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> DataBatch {
        DataBatch {
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
            dim: self.dim,
            classes: self.classes,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let b = self.batch(indices);
        Dataset {
            inputs: b.inputs,
            labels: b.labels,
            dim: self.dim,
            classes: self.classes,
            split: self.split,
        }
    }

    /// The first `n` examples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// A minibatch: `len x dim` inputs and `len x classes` one-hot labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBatch {
    inputs: Vec<f64>,
    labels: Vec<f64>,
    dim: usize,
    classes: usize,
}

impl DataBatch {
    pub fn new(inputs: Vec<f64>, labels: Vec<f64>, dim: usize, classes: usize) -> Result<Self> {
        if dim == 0
            || classes == 0
            || !inputs.len().is_multiple_of(dim)
            || labels.len() != inputs.len() / dim * classes
        {
            return Err(Error::shape(
                "batch inputs and labels disagree on the row count",
            ));
        }
        for row in labels.chunks(classes) {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::shape(format!("label row {:?} is not one-hot", row)));
            }
        }
        Ok(DataBatch {
            inputs,
            labels,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len() / self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }
}

fn read_u32(bytes: &[u8], at: usize, field: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            field,
            detail: "file ends inside the header".into(),
        })
}

/// Parses IDX image and label buffers into raw pixels, labels and the image size.
pub fn parse_idx_raw(images: &[u8], labels: &[u8]) -> Result<(Vec<u8>, Vec<u8>, usize)> {
    let magic = read_u32(images, 0, "images magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Parse {
            field: "images magic",
            detail: format!("expected {:#010x}, found {:#010x}", IMAGES_MAGIC, magic),
        });
    }
    let count = read_u32(images, 4, "images count")? as usize;
    let rows = read_u32(images, 8, "images rows")? as usize;
    let cols = read_u32(images, 12, "images cols")? as usize;
    let dim = rows * cols;
    if dim == 0 {
        return Err(Error::Parse {
            field: "images dimensions",
            detail: format!("{}x{} images", rows, cols),
        });
    }
    let payload = &images[16..];
    if payload.len() != count * dim {
        return Err(Error::Parse {
            field: "images payload",
            detail: format!("expected {} bytes, found {}", count * dim, payload.len()),
        });
    }

    let magic = read_u32(labels, 0, "labels magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Parse {
            field: "labels magic",
            detail: format!("expected {:#010x}, found {:#010x}", LABELS_MAGIC, magic),
        });
    }
    let label_count = read_u32(labels, 4, "labels count")? as usize;
    if label_count != count {
        return Err(Error::Parse {
            field: "labels count",
            detail: format!("{} labels for {} images", label_count, count),
        });
    }
    let label_payload = &labels[8..];
    if label_payload.len() != label_count {
        return Err(Error::Parse {
            field: "labels payload",
            detail: format!(
                "expected {} bytes, found {}",
                label_count,
                label_payload.len()
            ),
        });
    }
    if let Some(&bad) = label_payload.iter().find(|&&l| l as usize >= MNIST_CLASSES) {
        return Err(Error::Parse {
            field: "labels payload",
            detail: format!("label {} outside 0..{}", bad, MNIST_CLASSES),
        });
    }
    Ok((payload.to_vec(), label_payload.to_vec(), dim))
}

/// Parses IDX buffers, scaling pixels to `[0, 1]` by `/255`.
pub fn parse_idx(images: &[u8], labels: &[u8], split: Split) -> Result<Dataset> {
    let (pixels, labels, dim) = parse_idx_raw(images, labels)?;
    let inputs = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    Dataset::from_labels(inputs, dim, &labels, MNIST_CLASSES, split)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::Io(format!("{}: {}", p.display(), e)));
    let name = images_path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("");
    let split = if name.starts_with("t10k") {
        Split::Test
    } else if name.starts_with("train") {
        Split::Train
    } else {
        Split::Other
    };
    parse_idx(&read(images_path)?, &read(labels_path)?, split)
}

/// Batching parameters for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub epoch: u64,
}

/// Seeded permutation of `0..n` for the given epoch.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// The batches of one epoch, the last possibly partial.
pub fn batches(dataset: &Dataset, plan: &BatchPlan) -> Result<Vec<DataBatch>> {
    if plan.batch_size == 0 {
        return Err(Error::shape("batch size must be at least 1"));
    }
    let perm = epoch_permutation(dataset.len(), plan.seed, plan.epoch);
    Ok(perm
        .chunks(plan.batch_size)
        .map(|idx| dataset.batch(idx))
        .collect())
}

/// Endless epoch-by-epoch batch indices; each epoch has a fresh permutation.
#[derive(Debug, Clone)]
pub struct BatchStream {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    perm: Vec<usize>,
    cursor: usize,
}

impl BatchStream {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(Error::shape(
                "batch stream needs a nonempty dataset and batch size",
            ));
        }
        Ok(BatchStream {
            n,
            batch_size,
            seed,
            epoch: 0,
            perm: epoch_permutation(n, seed, 0),
            cursor: 0,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor >= self.n {
            self.epoch += 1;
            self.perm = epoch_permutation(self.n, self.seed, self.epoch);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.n);
        let idx = self.perm[self.cursor..end].to_vec();
        self.cursor = end;
        idx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyKind {
    /// Two isotropic unit-variance Gaussians with means `(-5, 0)` and `(5, 0)`.
    TwoGaussians,
    /// Points around the corners `(+-1, +-1)`, labeled by whether the signs differ.
    Xor,
}

/// Two-class 2-D synthetic data. Labels alternate so every prefix is balanced.
pub fn make_toy(kind: ToyKind, count: usize, seed: u64) -> Result<Dataset> {
    if count < 4 {
        return Err(Error::shape("toy datasets need at least 4 points"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let mut inputs = Vec::with_capacity(2 * count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        match kind {
            ToyKind::TwoGaussians => {
                let label = i % 2;
                let cx = if label == 0 { -5.0 } else { 5.0 };
                inputs.push(cx + unit.sample(&mut rng));
                inputs.push(unit.sample(&mut rng));
                labels.push(label);
            }
            ToyKind::Xor => {
                let corner = i % 4;
                let (sx, sy) = (
                    [-1.0, -1.0, 1.0, 1.0][corner],
                    [-1.0, 1.0, -1.0, 1.0][corner],
                );
                let jitter = if i < 4 { 0.0 } else { 0.2 };
                inputs.push(sx + jitter * unit.sample(&mut rng));
                inputs.push(sy + jitter * unit.sample(&mut rng));
                labels.push(usize::from(sx * sy < 0.0));
            }
        }
    }
    Dataset::from_labels(inputs, 2, &labels, 2, Split::Other)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_files(pixels: &[u8], labels: &[u8], rows: u32, cols: u32) -> (Vec<u8>, Vec<u8>) {
        let count = labels.len() as u32;
        let mut img = Vec::new();
        for v in [IMAGES_MAGIC, count, rows, cols] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend_from_slice(pixels);
        let mut lab = Vec::new();
        for v in [LABELS_MAGIC, count] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend_from_slice(labels);
        (img, lab)
    }

    #[test]
    fn parses_small_idx_and_scales() {
        let pixels: Vec<u8> = (0..12).map(|i| (i * 23) as u8).collect();
        let (img, lab) = idx_files(&pixels, &[3, 7, 0], 2, 2);
        let ds = parse_idx(&img, &lab, Split::Train).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.classes()), (3, 4, 10));
        assert_eq!(ds.label(1), 7);
        for (v, &p) in ds.inputs().iter().zip(&pixels) {
            assert!((0.0..=1.0).contains(v));
            assert_eq!((v * 255.0).round() as u8, p);
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let (mut img, lab) = idx_files(&[0; 4], &[1], 2, 2);
        img[3] = 0x02;
        match parse_idx(&img, &lab, Split::Train) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "images magic"),
            other => panic!("unexpected {:?}", other),
        }
        let (img, mut lab) = idx_files(&[0; 4], &[1], 2, 2);
        lab[2] = 0xff;
        assert!(matches!(
            parse_idx(&img, &lab, Split::Train),
            Err(Error::Parse {
                field: "labels magic",
                ..
            })
        ));
    }

    #[test]
    fn truncation_and_count_mismatch() {
        let (img, lab) = idx_files(&[0; 8], &[1, 2], 2, 2);
        assert!(matches!(
            parse_idx(&img[..img.len() - 1], &lab, Split::Train),
            Err(Error::Parse {
                field: "images payload",
                ..
            })
        ));
        assert!(matches!(
            parse_idx(&img[..10], &lab, Split::Train),
            Err(Error::Parse {
                field: "images rows",
                ..
            })
        ));
        let (_, lab3) = idx_files(&[0; 12], &[1, 2, 3], 2, 2);
        assert!(matches!(
            parse_idx(&img, &lab3, Split::Train),
            Err(Error::Parse {
                field: "labels count",
                ..
            })
        ));
    }

    #[test]
    fn one_batch_when_batch_exceeds_size() {
        let ds = make_toy(ToyKind::TwoGaussians, 10, 0).unwrap();
        let b = batches(
            &ds,
            &BatchPlan {
                batch_size: 64,
                seed: 1,
                epoch: 0,
            },
        )
        .unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 10);
    }

    #[test]
    fn batching_partitions_each_epoch() {
        let ds = make_toy(ToyKind::Xor, 23, 0).unwrap();
        for epoch in 0..3 {
            let perm = epoch_permutation(ds.len(), 4, epoch);
            let mut seen = perm.clone();
            seen.sort_unstable();
            assert_eq!(seen, (0..23).collect::<Vec<_>>());
            let b = batches(
                &ds,
                &BatchPlan {
                    batch_size: 5,
                    seed: 4,
                    epoch,
                },
            )
            .unwrap();
            assert_eq!(b.iter().map(DataBatch::len).sum::<usize>(), 23);
            assert_eq!(b.last().unwrap().len(), 3);
        }
        assert_ne!(epoch_permutation(23, 4, 0), epoch_permutation(23, 4, 1));
        assert_eq!(epoch_permutation(23, 4, 1), epoch_permutation(23, 4, 1));
    }

    #[test]
    fn stream_rolls_over_epochs() {
        let mut s = BatchStream::new(7, 3, 9).unwrap();
        let mut first_epoch = Vec::new();
        for _ in 0..3 {
            first_epoch.extend(s.next_indices());
        }
        first_epoch.sort_unstable();
        assert_eq!(first_epoch, (0..7).collect::<Vec<_>>());
        assert_eq!(s.epoch(), 0);
        s.next_indices();
        assert_eq!(s.epoch(), 1);
    }

    #[test]
    fn toy_data_properties() {
        let a = make_toy(ToyKind::TwoGaussians, 200, 3).unwrap();
        assert_eq!(a, make_toy(ToyKind::TwoGaussians, 200, 3).unwrap());
        // the separator x = 0 classifies nearly everything
        let correct = (0..a.len())
            .filter(|&i| usize::from(a.input(i)[0] > 0.0) == a.label(i))
            .count();
        assert!(correct as f64 / 200.0 >= 0.99);

        let x = make_toy(ToyKind::Xor, 4, 0).unwrap();
        let labels: Vec<usize> = (0..4).map(|i| x.label(i)).collect();
        assert_eq!(labels, vec![0, 1, 1, 0]);
        assert!(make_toy(ToyKind::Xor, 3, 0).is_err());
    }

    #[test]
    fn xor_corners_defeat_every_linear_rule() {
        // Sweep a grid of separators w.x + c > 0; none labels all four corners.
        let x = make_toy(ToyKind::Xor, 4, 0).unwrap();
        let grid: Vec<f64> = (-10..=10).map(|i| i as f64 / 5.0).collect();
        for &w0 in &grid {
            for &w1 in &grid {
                for &c in &grid {
                    let ok = (0..4).all(|i| {
                        let p = x.input(i);
                        usize::from(w0 * p[0] + w1 * p[1] + c > 0.0) == x.label(i)
                    });
                    assert!(!ok);
                }
            }
        }
    }

    #[test]
    fn batch_validation() {
        assert!(DataBatch::new(vec![0.0; 4], vec![1.0, 0.0, 1.0, 1.0], 2, 2).is_err());
        assert!(DataBatch::new(vec![0.0; 4], vec![1.0, 0.0, 0.0, 1.0], 2, 2).is_ok());
    }
}
