use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Image, CHANNELS, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Per-channel standardization in `[0, 1]` pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f32; CHANNELS],
    pub std: [f32; CHANNELS],
}

impl Normalizer {
    pub fn identity() -> Self {
        Normalizer {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        }
    }

    pub fn fit(images: &[Image]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::param("cannot fit normalization statistics on zero images"));
        }
        let plane = IMAGE_SIDE * IMAGE_SIDE;
        let mut sum = [0f64; CHANNELS];
        let mut sq = [0f64; CHANNELS];
        for img in images {
            for c in 0..CHANNELS {
                for &b in &img.bytes()[c * plane..(c + 1) * plane] {
                    let v = b as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (images.len() * plane) as f64;
        let mut out = Self::identity();
        for c in 0..CHANNELS {
            let m = sum[c] / n;
            out.mean[c] = m as f32;
            out.std[c] = ((sq[c] / n - m * m).max(0.0).sqrt()).max(1e-6) as f32;
        }
        Ok(out)
    }
}

/// Stacks images into a normalized `[B, 3, 32, 32]` tensor.
pub fn to_tensor(images: &[Image], norm: &Normalizer) -> Tensor<f32> {
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let mut data = Vec::with_capacity(images.len() * CHANNELS * plane);
    for img in images {
        for c in 0..CHANNELS {
            let (m, s) = (norm.mean[c], norm.std[c]);
            data.extend(
                img.bytes()[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&b| (b as f32 / 255.0 - m) / s),
            );
        }
    }
    Tensor::new([images.len(), CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data).expect("image tensor shape")
}

/// A seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed, &[epoch as u64]));
    idx
}

/// Repeated augmentation: the first `⌈n / repeats⌉` images of the shuffled
/// order, each listed `repeats` times in a row, cut back to `n` entries. Every
/// copy lands at its own batch position and so gets its own augmentation draw.
/// `repeats ≤ 1` is the plain shuffle.
pub fn repeated_order(n: usize, repeats: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let base = epoch_order(n, seed, epoch);
    if repeats <= 1 {
        return base;
    }
    let mut out: Vec<usize> = base[..n.div_ceil(repeats)]
        .iter()
        .flat_map(|&i| std::iter::repeat_n(i, repeats))
        .collect();
    out.truncate(n);
    out
}

/// Draws a class uniformly, then an example of that class uniformly.
#[derive(Clone, Debug)]
pub struct ClassBalancedSampler {
    by_class: Vec<Vec<usize>>,
}

impl ClassBalancedSampler {
    pub fn new(labels: &[usize], n_classes: usize) -> Result<Self> {
        let mut by_class = vec![Vec::new(); n_classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= n_classes {
                return Err(Error::Index(format!("label {l} out of range for {n_classes} classes")));
            }
            by_class[l].push(i);
        }
        by_class.retain(|v: &Vec<usize>| !v.is_empty());
        if by_class.is_empty() {
            return Err(Error::param("class-balanced sampler needs at least one example"));
        }
        Ok(ClassBalancedSampler { by_class })
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n)
            .map(|_| {
                let members = &self.by_class[rng.random_range(0..self.by_class.len())];
                members[rng.random_range(0..members.len())]
            })
            .collect()
    }
}

/// Maps `f` over `items` on up to `workers` scoped threads, preserving order.
/// `f` receives the item index so per-item randomness can be keyed on it,
/// which keeps the output independent of the worker count.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(k, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(j, t)| f(k * chunk + j, t))
                        .collect::<Vec<R>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}
