//! Dataset ingestion, deterministic augmentation, synthetic data and
//! batching.

mod augment;
mod formats;
mod synth;

pub use augment::{augment_image, AugmentParams};
pub use formats::{load_cifar_binary, load_idx, load_raw, save_raw};
pub use synth::synth_dataset;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{format}: bad magic bytes")]
    BadMagic { format: &'static str },
    #[error("{format}: truncated file ({detail})")]
    Truncated {
        format: &'static str,
        detail: String,
    },
    #[error("record {index}: label {label} exceeds {classes} classes")]
    LabelOverflow {
        index: usize,
        label: u32,
        classes: usize,
    },
    #[error("{format}: unsupported element type 0x{dtype:02x}")]
    UnsupportedDtype { format: &'static str, dtype: u8 },
    #[error("{format}: header: {msg}")]
    Header { format: &'static str, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Per-channel normalization statistics, computed on the train split.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    /// Identity statistics (mean 0, std 1).
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Images in [0,1] with integer class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<u32>,
    pub split: Split,
    pub num_classes: usize,
    pub norm: Option<ChannelStats>,
}

impl Dataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<u32>,
        split: Split,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        let n = images.shape()[0];
        assert_eq!(n, labels.len(), "image/label count mismatch");
        for (i, &l) in labels.iter().enumerate() {
            if l as usize >= num_classes {
                return Err(DataError::LabelOverflow {
                    index: i,
                    label: l,
                    classes: num_classes,
                });
            }
        }
        Ok(Self {
            images,
            labels,
            split,
            num_classes,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (C, H, W) of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Per-channel mean/std over all pixels. Meant to be called on the
    /// train split and shared with eval pipelines.
    pub fn compute_norm(&mut self) -> ChannelStats {
        let [c, h, w] = self.image_shape();
        let n = self.len();
        let per = (n * h * w) as f64;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let hw = h * w;
        let data = self.images.data();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for &v in &data[base..base + hw] {
                    mean[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let stats = ChannelStats {
            mean: mean.iter().map(|m| (*m / per) as f32).collect(),
            std: mean
                .iter()
                .zip(&sq)
                .map(|(m, s)| {
                    let mu = m / per;
                    ((s / per - mu * mu).max(1e-12).sqrt() as f32).max(1e-6)
                })
                .collect(),
        };
        self.norm = Some(stats.clone());
        stats
    }

    /// Contiguous index-range view, copied.
    pub fn subset(&self, start: usize, end: usize, split: Split) -> Dataset {
        let [c, h, w] = self.image_shape();
        let chw = c * h * w;
        let images = Tensor::new(
            vec![end - start, c, h, w],
            self.images.data()[start * chw..end * chw].to_vec(),
        )
        .expect("subset shape");
        Dataset {
            images,
            labels: self.labels[start..end].to_vec(),
            split,
            num_classes: self.num_classes,
            norm: self.norm.clone(),
        }
    }
}

/// Deterministic shuffling/augmenting batch source. The same
/// (seed, epoch) always yields the same batch sequence with the same
/// augmentations.
pub struct BatchStream<'a> {
    pub data: &'a Dataset,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    pub norm: ChannelStats,
}

impl<'a> BatchStream<'a> {
    pub fn new(data: &'a Dataset, batch_size: usize, seed: u64, augment: bool) -> Self {
        let norm = data
            .norm
            .clone()
            .unwrap_or_else(|| ChannelStats::identity(data.image_shape()[0]));
        Self {
            data,
            batch_size,
            seed,
            augment,
            norm,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.batch_size)
    }

    /// Iterate one epoch's batches: `(images [B,C,H,W], labels)`.
    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = (Tensor<f32>, Vec<u32>)> + '_ {
        let n = self.data.len();
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add(epoch as u64),
        );
        // Fisher-Yates
        for i in (1..n).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        let [c, h, w] = self.data.image_shape();
        let chw = c * h * w;
        (0..self.batches_per_epoch()).map(move |bi| {
            let lo = bi * self.batch_size;
            let hi = ((bi + 1) * self.batch_size).min(n);
            let b = hi - lo;
            let mut images = vec![0.0f32; b * chw];
            let mut labels = Vec::with_capacity(b);
            for (slot, &idx) in order[lo..hi].iter().enumerate() {
                let src = &self.data.images.data()[idx as usize * chw..(idx as usize + 1) * chw];
                let dst = &mut images[slot * chw..(slot + 1) * chw];
                if self.augment {
                    let params = AugmentParams::draw(&mut rng);
                    augment_image(src, c, h, w, params, dst);
                } else {
                    dst.copy_from_slice(src);
                }
                // normalize after augmentation
                for ch in 0..c {
                    let (m, s) = (self.norm.mean[ch], self.norm.std[ch]);
                    for v in &mut dst[ch * h * w..(ch + 1) * h * w] {
                        *v = (*v - m) / s;
                    }
                }
                labels.push(self.data.labels[idx as usize]);
            }
            (
                Tensor::new(vec![b, c, h, w], images).expect("batch shape"),
                labels,
            )
        })
    }
}
