//! MNIST IDX container parsing and seeded mini-batching.
//!
//! ```text
//! images: u32 BE magic 0x00000803 | u32 BE count | u32 BE rows | u32 BE cols | count*rows*cols u8
//! labels: u32 BE magic 0x00000801 | u32 BE count | count u8
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated payload, header declares {expected} bytes but {found} are present")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: label {label} at index {index} is outside 0..=9")]
    LabelOutOfRange { path: PathBuf, index: usize, label: u8 },
    #[error("image count {images} does not match label count {labels}")]
    SizeMismatch { images: usize, labels: usize },
    #[error("{path}: image set is empty")]
    Empty { path: PathBuf },
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Raw 8-bit grayscale images stored row-major, image after image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSet {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl ImageSet {
    pub fn image(&self, index: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[index * n..(index + 1) * n]
    }

    /// Keeps only the first `n` images.
    pub fn truncate(&mut self, n: usize) {
        if n < self.count {
            self.count = n;
            self.pixels.truncate(n * self.rows * self.cols);
        }
    }

    /// Serializes to the IDX image layout.
    pub fn to_idx_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len());
        out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        out.extend_from_slice(&(self.count as u32).to_be_bytes());
        out.extend_from_slice(&(self.rows as u32).to_be_bytes());
        out.extend_from_slice(&(self.cols as u32).to_be_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    pub labels: Vec<u8>,
}

impl LabelSet {
    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn truncate(&mut self, n: usize) {
        self.labels.truncate(n);
    }

    pub fn to_idx_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.labels.len());
        out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        out.extend_from_slice(&(self.labels.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.labels);
        out
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DatasetError> {
    fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], offset: usize) -> Option<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn truncated(path: &Path, expected: usize, found: usize) -> DatasetError {
    DatasetError::TruncatedPayload {
        path: path.to_path_buf(),
        expected,
        found,
    }
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<ImageSet, DatasetError> {
    let magic = be_u32(bytes, 0).ok_or_else(|| truncated(path, 16, bytes.len()))?;
    if magic != IMAGE_MAGIC {
        return Err(DatasetError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: IMAGE_MAGIC,
        });
    }
    let header = |off| be_u32(bytes, off).ok_or_else(|| truncated(path, 16, bytes.len()));
    let count = header(4)? as usize;
    let rows = header(8)? as usize;
    let cols = header(12)? as usize;
    let expected = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| truncated(path, usize::MAX, bytes.len()))?;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(truncated(path, expected, payload.len()));
    }
    if count == 0 {
        return Err(DatasetError::Empty {
            path: path.to_path_buf(),
        });
    }
    Ok(ImageSet {
        count,
        rows,
        cols,
        pixels: payload.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<LabelSet, DatasetError> {
    let magic = be_u32(bytes, 0).ok_or_else(|| truncated(path, 8, bytes.len()))?;
    if magic != LABEL_MAGIC {
        return Err(DatasetError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: LABEL_MAGIC,
        });
    }
    let count = be_u32(bytes, 4).ok_or_else(|| truncated(path, 8, bytes.len()))? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(truncated(path, count, payload.len()));
    }
    if let Some((index, &label)) = payload.iter().enumerate().find(|(_, &l)| l as usize >= NUM_CLASSES) {
        return Err(DatasetError::LabelOutOfRange {
            path: path.to_path_buf(),
            index,
            label,
        });
    }
    Ok(LabelSet {
        labels: payload.to_vec(),
    })
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<ImageSet, DatasetError> {
    let path = path.as_ref();
    parse_idx_images(&read_file(path)?, path)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<LabelSet, DatasetError> {
    let path = path.as_ref();
    parse_idx_labels(&read_file(path)?, path)
}

/// Maps raw pixels to `pixel / 255` in `[0, 1]`.
pub fn normalize(image: &[u8]) -> Vec<f32> {
    image.iter().map(|&p| p as f32 / 255.0).collect()
}

/// A paired image/label set.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: ImageSet,
    labels: LabelSet,
}

/// One mini-batch: flattened normalized inputs (`len = labels.len() * rows * cols`).
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub inputs: Vec<f32>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: ImageSet, labels: LabelSet) -> Result<Self, DatasetError> {
        if images.count != labels.count() {
            return Err(DatasetError::SizeMismatch {
                images: images.count,
                labels: labels.count(),
            });
        }
        Ok(Self { images, labels })
    }

    pub fn load(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self, DatasetError> {
        Self::new(load_idx_images(images)?, load_idx_labels(labels)?)
    }

    pub fn len(&self) -> usize {
        self.images.count
    }

    pub fn is_empty(&self) -> bool {
        self.images.count == 0
    }

    pub fn truncate(&mut self, n: usize) {
        self.images.truncate(n);
        self.labels.truncate(n);
    }

    pub fn images(&self) -> &ImageSet {
        &self.images
    }

    pub fn label(&self, index: usize) -> u8 {
        self.labels.labels[index]
    }

    pub fn input(&self, index: usize) -> Vec<f32> {
        normalize(self.images.image(index))
    }

    pub fn sample_len(&self) -> usize {
        self.images.rows * self.images.cols
    }

    /// Shuffled index batches for one epoch. Every sample appears exactly
    /// once; the last batch may be short.
    pub fn batch_indices(&self, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>, DatasetError> {
        if batch_size == 0 {
            return Err(DatasetError::ZeroBatch);
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
    }

    pub fn batches(&self, batch_size: usize, seed: u64) -> Result<impl Iterator<Item = Batch> + '_, DatasetError> {
        let plan = self.batch_indices(batch_size, seed)?;
        Ok(plan.into_iter().map(move |indices| self.gather(indices)))
    }

    pub fn gather(&self, indices: Vec<usize>) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.sample_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in &indices {
            inputs.extend(self.images.image(i).iter().map(|&p| p as f32 / 255.0));
            labels.push(self.labels.labels[i]);
        }
        Batch {
            indices,
            inputs,
            labels,
        }
    }
}
