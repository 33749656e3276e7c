//! CIFAR-10 binary ingestion, one-hot labels, class-stratified subsetting,
//! and deterministic batching.
//!
//! The on-disk format is the CIFAR-10 binary version 1: each record is one
//! label byte followed by 3072 pixel bytes (channel-planar, row-major), 10000
//! records per file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Shape4;

pub const IMAGE_PIXELS: usize = 3 * 32 * 32;
pub const RECORD_BYTES: usize = 1 + IMAGE_PIXELS;
pub const RECORDS_PER_FILE: usize = 10_000;
pub const N_CLASSES: usize = 10;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Images as reals in [0, 1] with one-hot encodable labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Vec<f32>, // len * 3072, (c, h, w) planar per image
    labels: Vec<u8>,
}

impl Dataset {
    pub fn from_parts(images: Vec<f32>, labels: Vec<u8>) -> Self {
        assert_eq!(images.len(), labels.len() * IMAGE_PIXELS, "image buffer size mismatch");
        assert!(labels.iter().all(|&l| (l as usize) < N_CLASSES), "label out of range");
        Dataset { images, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn one_hot(&self, i: usize) -> [f32; N_CLASSES] {
        let mut row = [0.0; N_CLASSES];
        row[self.labels[i] as usize] = 1.0;
        row
    }

    /// Materialize the images and one-hot labels for a batch of indices as
    /// tensors of shape (n, 3, 32, 32) and (n, 10, 1, 1).
    pub fn batch_tensors(&self, indices: &[usize]) -> (Shape4, Vec<f32>, Shape4, Vec<f32>) {
        let n = indices.len();
        let mut images = Vec::with_capacity(n * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(n * N_CLASSES);
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.extend_from_slice(&self.one_hot(i));
        }
        (Shape4::new(n, 3, 32, 32), images, Shape4::new(n, N_CLASSES, 1, 1), labels)
    }

    /// Re-serialize record `i` into the binary file layout.
    pub fn record_bytes(&self, i: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(RECORD_BYTES);
        out.push(self.labels[i]);
        out.extend(self.image(i).iter().map(|&v| (v * 255.0).round() as u8));
        out
    }

    pub fn class_histogram(&self) -> [usize; N_CLASSES] {
        let mut hist = [0; N_CLASSES];
        for &l in &self.labels {
            hist[l as usize] += 1;
        }
        hist
    }
}

fn load_file(path: &Path) -> Result<(Vec<f32>, Vec<u8>)> {
    let name = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::DataFormat { file: name.clone(), problem: "file not found".into() }
        } else {
            Error::Io(e)
        }
    })?;
    let expected = RECORDS_PER_FILE * RECORD_BYTES;
    if bytes.len() != expected {
        return Err(Error::DataFormat {
            file: name,
            problem: format!("size {} bytes, expected {expected}", bytes.len()),
        });
    }
    let mut images = Vec::with_capacity(RECORDS_PER_FILE * IMAGE_PIXELS);
    let mut labels = Vec::with_capacity(RECORDS_PER_FILE);
    for (rec, chunk) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = chunk[0];
        if label as usize >= N_CLASSES {
            return Err(Error::DataFormat {
                file: name,
                problem: format!("label byte {label} at offset {}", rec * RECORD_BYTES),
            });
        }
        labels.push(label);
        images.extend(chunk[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((images, labels))
}

/// Load the train split (five batch files) and the test split.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for file in TRAIN_FILES {
        let (images, labels) = load_file(&dir.join(file))?;
        train_images.extend(images);
        train_labels.extend(labels);
    }
    let (test_images, test_labels) = load_file(&dir.join(TEST_FILE))?;
    Ok((
        Dataset::from_parts(train_images, train_labels),
        Dataset::from_parts(test_images, test_labels),
    ))
}

/// Class-stratified subset: n/10 items per class, with the remainder spread
/// over the lowest class indices. Selection within each class is a seeded
/// shuffle, and the result is ordered class-major.
pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n < N_CLASSES {
        return Err(Error::SubsetTooSmall { n });
    }
    if n > ds.len() {
        return Err(Error::SubsetTooLarge { n, available: ds.len() });
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); N_CLASSES];
    for i in 0..ds.len() {
        per_class[ds.label(i) as usize].push(i);
    }
    let base = n / N_CLASSES;
    let remainder = n % N_CLASSES;
    let mut rng = Rng::new(seed);
    let mut images = Vec::with_capacity(n * IMAGE_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (class, indices) in per_class.iter_mut().enumerate() {
        let want = base + usize::from(class < remainder);
        if indices.len() < want {
            return Err(Error::DataFormat {
                file: "dataset".into(),
                problem: format!(
                    "class {class} has only {} items, need {want} for a stratified subset",
                    indices.len()
                ),
            });
        }
        rng.shuffle(indices);
        for &i in indices.iter().take(want) {
            images.extend_from_slice(ds.image(i));
            labels.push(ds.label(i));
        }
    }
    Ok(Dataset::from_parts(images, labels))
}

/// Deterministic epoch batching: the permutation of each epoch is a pure
/// function of (seed, epoch), and the final partial batch is kept.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
}

impl BatchIterator {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        assert!(batch_size >= 1, "batch size must be >= 1");
        BatchIterator { len, batch_size, seed, epoch: 0 }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// The shuffled index order for a given epoch.
    pub fn epoch_indices(&self, epoch: u64) -> Vec<usize> {
        let mut indices: Vec<usize> = (0..self.len).collect();
        Rng::derive(self.seed, epoch).shuffle(&mut indices);
        indices
    }

    /// Batches for the current epoch, advancing the epoch counter.
    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        let indices = self.epoch_indices(self.epoch);
        self.epoch += 1;
        indices.chunks(self.batch_size).map(|c| c.to_vec()).collect()
    }
}

/// Deterministic synthetic dataset in the CIFAR-10 shape: uniform pixel noise
/// and cycling labels. A stand-in for smoke tests when the real corpus is not
/// on disk.
pub fn synthetic(n: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed);
    let images = (0..n * IMAGE_PIXELS).map(|_| rng.uniform() as f32).collect();
    let labels = (0..n).map(|i| (i % N_CLASSES) as u8).collect();
    Dataset::from_parts(images, labels)
}
