//! Datasets: IDX files, the synthetic stroke corpus, and seeded batching.

mod idx;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use idx::{load_idx, parse_images, parse_labels, quantize, write_idx, IMAGE_MAGIC, LABEL_MAGIC};
pub use synth::{render, synth_strokes, Placement, Primitive, SynthSpec, CUP, DIAGONAL, H_LINE, RING, V_LINE};

use crate::stn::AffineAction;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("bad {what} magic: expected {expected:#010x}, got {got:#010x}")]
    BadMagic { what: &'static str, expected: u32, got: u32 },
    #[error("truncated {what}: need {expected} bytes, have {got}")]
    Truncated { what: &'static str, expected: usize, got: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("pixel {index} = {value} outside [0, 1]")]
    PixelRange { index: usize, value: f32 },
    #[error("bad dataset shape: {0}")]
    Shape(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("action {0:?} leaves the level bounds")]
    OutOfBounds(AffineAction),
}

/// Square grayscale images in `[0,1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `[N, S, S]`
    pub images: Tensor<f32>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn new(name: String, images: Tensor<f32>, labels: Vec<u32>) -> Result<Self, DataError> {
        let s = images.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(DataError::Shape(format!("expected [N, S, S], got {s:?}")));
        }
        if s[0] != labels.len() {
            return Err(DataError::CountMismatch { images: s[0], labels: labels.len() });
        }
        if let Some((index, &value)) = images.data().iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::PixelRange { index, value });
        }
        Ok(Dataset { name, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_size() * self.image_size();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// `[len, S, S]` stack of the listed images.
    pub fn gather(&self, indices: &[usize]) -> Tensor<f32> {
        let s = self.image_size();
        let mut data = Vec::with_capacity(indices.len() * s * s);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new([indices.len(), s, s], data).expect("gather shape")
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            images: self.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Indices whose label satisfies `keep`.
    pub fn indices_where(&self, keep: impl Fn(u32) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| keep(self.labels[i])).collect()
    }
}

/// Index batches for one epoch: a seeded shuffle, split into runs of
/// `batch_size` with the final partial batch kept. Each epoch draws from
/// its own stream of the seed.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// One epoch of shuffled image batches.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64) -> impl Iterator<Item = Tensor<f32>> + '_ {
    epoch_batches(ds.len(), batch_size, seed, 0).into_iter().map(move |idx| ds.gather(&idx))
}
