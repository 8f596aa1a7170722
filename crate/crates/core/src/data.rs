//! In-memory labelled image sets and seeded mini-batch iteration.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[C, H, W]` of a single image.
    pub shape: [usize; 3],
    pub classes: usize,
    /// Row-major images, `len * C * H * W` values.
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

/// One mini-batch in `[N, C, H, W]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[C, H, W]` of each image.
    pub shape: [usize; 3],
    pub indices: Vec<usize>,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn new(shape: [usize; 3], classes: usize, images: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidArgument("dataset needs at least one class".into()));
        }
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!("image shape {shape:?} has a zero dimension")));
        }
        let per = shape.iter().product::<usize>();
        if images.len() != labels.len() * per {
            return Err(Error::InvalidArgument(format!(
                "{} image values for {} labels of {per} values each",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self {
            shape,
            classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let per = self.image_len();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = alloc::vec![0; self.classes];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }

    /// Per-channel mean and population standard deviation.
    pub fn channel_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let [c, h, w] = self.shape;
        let hw = h * w;
        let count = (self.len() * hw) as f64;
        let mut mean = alloc::vec![0.0; c];
        let mut sq = alloc::vec![0.0; c];
        for i in 0..self.len() {
            let img = self.image(i);
            for ch in 0..c {
                for &v in &img[ch * hw..(ch + 1) * hw] {
                    mean[ch] += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for i in 0..self.len() {
            let img = self.image(i);
            for ch in 0..c {
                for &v in &img[ch * hw..(ch + 1) * hw] {
                    sq[ch] += (v - mean[ch]) * (v - mean[ch]);
                }
            }
        }
        let std = sq.iter().map(|s| libm::sqrt(s / count)).collect();
        (mean, std)
    }

    /// Applies `(x - mean) / std` per channel; zero deviations are treated as 1.
    pub fn normalize(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        let [c, h, w] = self.shape;
        if mean.len() != c || std.len() != c {
            return Err(Error::InvalidArgument(format!(
                "normalization constants for {} / {} channels, images have {c}",
                mean.len(),
                std.len()
            )));
        }
        let hw = h * w;
        for (k, v) in self.images.iter_mut().enumerate() {
            let ch = (k / hw) % c;
            let s = if std[ch] > 0.0 { std[ch] } else { 1.0 };
            *v = (*v - mean[ch]) / s;
        }
        Ok(())
    }

    /// Example order for one epoch: a seeded shuffle, distinct per epoch.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Batch {
            shape: self.shape,
            indices: indices.to_vec(),
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Mini-batches in the given order; the final partial batch is kept.
    pub fn batches<'a>(&'a self, order: &'a [usize], batch_size: usize) -> impl Iterator<Item = Batch> + 'a {
        order.chunks(batch_size.max(1)).map(move |idx| self.gather(idx))
    }

    /// Shuffled batches for `epoch`.
    pub fn shuffled(&self, batch_size: usize, seed: u64, epoch: usize) -> Vec<Batch> {
        let order = self.epoch_order(seed, epoch);
        self.batches(&order, batch_size).collect()
    }

    /// Batches in storage order.
    pub fn sequential(&self, batch_size: usize) -> Vec<Batch> {
        let order: Vec<usize> = (0..self.len()).collect();
        self.batches(&order, batch_size).collect()
    }
}
