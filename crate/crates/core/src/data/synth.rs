//! Procedural stand-in images in the CIFAR-10 layout. Each class has its own
//! base colour, stripe orientation and stripe frequency; per-image phase,
//! brightness and pixel noise make the task non-trivial but learnable.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::cifar::{write_batch_file, RawDataset, Split};
use super::{Image, CHANNELS, IMAGE_SIDE};
use crate::error::Result;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of additive pixel noise, in 0–255 units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_classes: 10,
            train_per_class: 5000,
            test_per_class: 1000,
            noise: 24.0,
            seed: 0,
        }
    }
}

fn class_style(class: usize, n_classes: usize) -> ([f64; 3], f64, f64) {
    let hue = class as f64 / n_classes as f64 * std::f64::consts::TAU;
    let color = [0.0, 1.0, 2.0].map(|k: f64| 128.0 + 70.0 * (hue + k * std::f64::consts::TAU / 3.0).cos());
    let angle = (class * 3 % n_classes.max(1)) as f64 / n_classes as f64 * std::f64::consts::PI;
    let freq = 1.5 + (class % 3) as f64;
    (color, angle, freq)
}

pub fn synth_image<R: Rng + ?Sized>(class: usize, n_classes: usize, noise: f64, rng: &mut R) -> Image {
    let (color, angle, freq) = class_style(class, n_classes);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let gain = rng.random_range(0.75..1.25);
    let jitter = rng.random_range(-0.15..0.15);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let (s, c) = (angle + jitter).sin_cos();
    let mut img = Image::filled(0);
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let u = (x as f64 * c + y as f64 * s) / IMAGE_SIDE as f64;
            let stripe = (u * freq * std::f64::consts::TAU + phase).sin();
            for ch in 0..CHANNELS {
                let v = color[ch] * gain + 50.0 * stripe + normal.sample(rng);
                img.set(ch, y, x, v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    img
}

fn synth_split(spec: &SynthSpec, per_class: usize, stream: u64) -> Split {
    let mut split = Split::default();
    for i in 0..per_class {
        for class in 0..spec.n_classes {
            let mut rng = seed::rng(spec.seed, &[stream, class as u64, i as u64]);
            split.images.push(synth_image(class, spec.n_classes, spec.noise, &mut rng));
            split.labels.push(class);
        }
    }
    split
}

pub fn generate(spec: &SynthSpec) -> RawDataset {
    RawDataset {
        train: synth_split(spec, spec.train_per_class, 0),
        test: synth_split(spec, spec.test_per_class, 1),
        n_classes: spec.n_classes,
    }
}

/// Writes the five training batch files and the test file into `dir`.
pub fn write_cifar_layout(dir: &Path, raw: &RawDataset) -> Result<()> {
    let n = raw.train.len();
    let per_file = n.div_ceil(5);
    for k in 0..5 {
        let lo = (k * per_file).min(n);
        let hi = ((k + 1) * per_file).min(n);
        let part = Split {
            images: raw.train.images[lo..hi].to_vec(),
            labels: raw.train.labels[lo..hi].to_vec(),
        };
        write_batch_file(&dir.join(format!("data_batch_{}.bin", k + 1)), &part)?;
    }
    write_batch_file(&dir.join("test_batch.bin"), &raw.test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_cifar10;

    #[test]
    fn roundtrips_through_the_binary_layout() {
        let spec = SynthSpec {
            train_per_class: 3,
            test_per_class: 2,
            ..SynthSpec::default()
        };
        let raw = generate(&spec);
        let dir = tempfile::tempdir().unwrap();
        write_cifar_layout(dir.path(), &raw).unwrap();
        let back = load_cifar10(dir.path()).unwrap();
        assert_eq!(back.train.labels, raw.train.labels);
        assert_eq!(back.train.images, raw.train.images);
        assert_eq!(back.test.class_counts(10), vec![2; 10]);
    }

    #[test]
    fn classes_differ_in_mean_colour() {
        let mut rng = seed::rng(0, &[]);
        let means: Vec<f64> = (0..10)
            .map(|c| {
                let img = synth_image(c, 10, 0.0, &mut rng);
                img.bytes()[..1024].iter().map(|&b| b as f64).sum::<f64>() / 1024.0
            })
            .collect();
        assert!(means.windows(2).any(|w| (w[0] - w[1]).abs() > 10.0));
    }
}
