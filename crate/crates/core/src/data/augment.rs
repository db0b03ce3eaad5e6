//! Weak (teacher-training) and strong (distillation) augmentation, plus
//! Mixup/CutMix batch blending.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::{Image, CHANNELS, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const S: usize = IMAGE_SIDE;

pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..CHANNELS {
        for y in 0..S {
            for x in 0..S {
                out.set(c, y, x, img.get(c, y, S - 1 - x));
            }
        }
    }
    out
}

/// Crop of the zero-padded image at offset `(dy, dx)` in `[0, 2·pad]`.
/// Offset `(pad, pad)` is the identity.
pub fn pad_crop(img: &Image, pad: usize, dy: usize, dx: usize) -> Image {
    let mut out = Image::filled(0);
    for c in 0..CHANNELS {
        for y in 0..S {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= S as isize {
                continue;
            }
            for x in 0..S {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < S as isize {
                    out.set(c, y, x, img.get(c, sy as usize, sx as usize));
                }
            }
        }
    }
    out
}

/// Random 4-pixel-padded crop and a horizontal flip with probability ½.
pub fn weak_augment<R: Rng + ?Sized>(img: &Image, rng: &mut R) -> Image {
    let dy = rng.random_range(0..=8);
    let dx = rng.random_range(0..=8);
    let out = pad_crop(img, 4, dy, dx);
    if rng.random_bool(0.5) {
        hflip(&out)
    } else {
        out
    }
}

/// Parameters of the strong augmentation stack applied during distillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrongRecipe {
    pub resized_crop_prob: f64,
    /// Area fraction range for the random resized crop.
    pub crop_scale: (f64, f64),
    /// Aspect-ratio range for the random resized crop.
    pub crop_ratio: (f64, f64),
    pub flip_prob: f64,
    pub jitter_prob: f64,
    /// Brightness/contrast/saturation factors are drawn from `[1−s, 1+s]`.
    pub jitter_strength: f64,
    pub erase_prob: f64,
    /// Area fraction range of the erased rectangle.
    pub erase_area: (f64, f64),
    pub erase_ratio: (f64, f64),
}

impl Default for StrongRecipe {
    fn default() -> Self {
        StrongRecipe {
            resized_crop_prob: 1.0,
            crop_scale: (0.35, 1.0),
            crop_ratio: (0.75, 4.0 / 3.0),
            flip_prob: 0.5,
            jitter_prob: 1.0,
            jitter_strength: 0.3,
            erase_prob: 0.25,
            erase_area: (0.02, 1.0 / 3.0),
            erase_ratio: (0.3, 3.3),
        }
    }
}

impl StrongRecipe {
    /// Every stage disabled.
    pub fn identity() -> Self {
        StrongRecipe {
            resized_crop_prob: 0.0,
            flip_prob: 0.0,
            jitter_prob: 0.0,
            erase_prob: 0.0,
            ..Self::default()
        }
    }
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Picks a `(top, left, h, w)` rectangle with the given area fraction and
/// aspect-ratio ranges, or `None` after ten failed draws.
fn sample_rect<R: Rng + ?Sized>(rng: &mut R, area: (f64, f64), ratio: (f64, f64)) -> Option<(usize, usize, usize, usize)> {
    let total = (S * S) as f64;
    for _ in 0..10 {
        let target = total * uniform(rng, area.0, area.1);
        let ar = log_uniform(rng, ratio.0, ratio.1);
        let w = (target * ar).sqrt().round() as usize;
        let h = (target / ar).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= S && h <= S {
            let top = rng.random_range(0..=S - h);
            let left = rng.random_range(0..=S - w);
            return Some((top, left, h, w));
        }
    }
    None
}

fn resize_crop(img: &Image, top: usize, left: usize, h: usize, w: usize) -> Image {
    let mut out = Image::filled(0);
    let sy = h as f64 / S as f64;
    let sx = w as f64 / S as f64;
    for y in 0..S {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for x in 0..S {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for c in 0..CHANNELS {
                let p = |yy: usize, xx: usize| img.get(c, top + yy, left + xx) as f64;
                let v = (1.0 - wy) * ((1.0 - wx) * p(y0, x0) + wx * p(y0, x1))
                    + wy * ((1.0 - wx) * p(y1, x0) + wx * p(y1, x1));
                out.set(c, y, x, v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

fn color_jitter<R: Rng + ?Sized>(img: &Image, strength: f64, rng: &mut R) -> Image {
    let lo = (1.0 - strength).max(0.0);
    let hi = 1.0 + strength;
    let brightness = uniform(rng, lo, hi);
    let contrast = uniform(rng, lo, hi);
    let saturation = uniform(rng, lo, hi);
    let mut px: Vec<[f64; 3]> = (0..S * S)
        .map(|i| {
            let (y, x) = (i / S, i % S);
            [0, 1, 2].map(|c| img.get(c, y, x) as f64 * brightness)
        })
        .collect();
    let gray = |p: &[f64; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    let mean_gray = px.iter().map(|p| gray(p).clamp(0.0, 255.0)).sum::<f64>() / (S * S) as f64;
    for p in &mut px {
        for v in p.iter_mut() {
            *v = (v.clamp(0.0, 255.0) - mean_gray) * contrast + mean_gray;
        }
        let g = gray(p);
        for v in p.iter_mut() {
            *v = g + (*v - g) * saturation;
        }
    }
    let mut out = Image::filled(0);
    for (i, p) in px.iter().enumerate() {
        for c in 0..CHANNELS {
            out.set(c, i / S, i % S, p[c].round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

fn random_erase<R: Rng + ?Sized>(img: &mut Image, area: (f64, f64), ratio: (f64, f64), rng: &mut R) {
    if let Some((top, left, h, w)) = sample_rect(rng, area, ratio) {
        for c in 0..CHANNELS {
            for y in top..top + h {
                for x in left..left + w {
                    img.set(c, y, x, rng.random());
                }
            }
        }
    }
}

/// Random resized crop, horizontal flip, color jitter, random erasing, in
/// that order. Each stage fires with its recipe probability.
pub fn strong_augment<R: Rng + ?Sized>(img: &Image, rng: &mut R, recipe: &StrongRecipe) -> Image {
    let mut out = img.clone();
    if recipe.resized_crop_prob > 0.0 && rng.random_bool(recipe.resized_crop_prob.min(1.0)) {
        if let Some((top, left, h, w)) = sample_rect(rng, recipe.crop_scale, recipe.crop_ratio) {
            out = resize_crop(&out, top, left, h, w);
        }
    }
    if recipe.flip_prob > 0.0 && rng.random_bool(recipe.flip_prob.min(1.0)) {
        out = hflip(&out);
    }
    if recipe.jitter_prob > 0.0 && rng.random_bool(recipe.jitter_prob.min(1.0)) {
        out = color_jitter(&out, recipe.jitter_strength, rng);
    }
    if recipe.erase_prob > 0.0 && rng.random_bool(recipe.erase_prob.min(1.0)) {
        random_erase(&mut out, recipe.erase_area, recipe.erase_ratio, rng);
    }
    out
}

/// Label-smoothed one-hot: `1−ε` on `label`, `ε/(C−1)` elsewhere.
pub fn smooth_one_hot(label: usize, n_classes: usize, epsilon: f64) -> Vec<f64> {
    if n_classes == 1 {
        return vec![1.0];
    }
    let off = epsilon / (n_classes - 1) as f64;
    let mut row = vec![off; n_classes];
    row[label] = 1.0 - epsilon;
    row
}

/// Inputs and blended soft targets for one training step.
#[derive(Clone, Debug)]
pub struct AugmentedBatch {
    /// `[B, 3, H, W]`
    pub inputs: Tensor<f32>,
    /// `[B, C]`, each row sums to 1.
    pub soft_targets: Tensor<f32>,
    pub labels_a: Vec<usize>,
    pub labels_b: Vec<usize>,
    pub lambda: f64,
}

impl AugmentedBatch {
    /// A batch with no blending (λ = 1).
    pub fn unmixed(inputs: Tensor<f32>, labels: &[usize], n_classes: usize, epsilon: f64) -> Result<Self> {
        let targets = blend_targets(labels, labels, 1.0, n_classes, epsilon)?;
        Ok(AugmentedBatch {
            inputs,
            soft_targets: targets,
            labels_a: labels.to_vec(),
            labels_b: labels.to_vec(),
            lambda: 1.0,
        })
    }
}

fn blend_targets(a: &[usize], b: &[usize], lambda: f64, n_classes: usize, epsilon: f64) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(a.len() * n_classes);
    for (&ya, &yb) in a.iter().zip(b) {
        if ya >= n_classes || yb >= n_classes {
            return Err(Error::Index(format!("label {} out of range for {n_classes} classes", ya.max(yb))));
        }
        let ta = smooth_one_hot(ya, n_classes, epsilon);
        let tb = smooth_one_hot(yb, n_classes, epsilon);
        data.extend(ta.iter().zip(&tb).map(|(p, q)| (lambda * p + (1.0 - lambda) * q) as f32));
    }
    Tensor::new([a.len(), n_classes], data)
}

fn check_pair(a: &Tensor<f32>, b: &Tensor<f32>, la: &[usize], lb: &[usize]) -> Result<()> {
    if a.shape() != b.shape() || a.rank() != 4 || la.len() != a.shape()[0] || lb.len() != la.len() {
        return Err(Error::shape(format!(
            "mix batches must share an NCHW shape and label count: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::param(format!("mix alpha must be > 0, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::param(e.to_string()))?;
    Ok(beta.sample(rng))
}

#[allow(clippy::too_many_arguments)]
pub fn mixup_with_lambda(
    a: &Tensor<f32>,
    labels_a: &[usize],
    b: &Tensor<f32>,
    labels_b: &[usize],
    n_classes: usize,
    lambda: f64,
    epsilon: f64,
) -> Result<AugmentedBatch> {
    check_pair(a, b, labels_a, labels_b)?;
    let l = lambda as f32;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| if lambda == 1.0 { x } else { l * x + (1.0 - l) * y })
        .collect();
    Ok(AugmentedBatch {
        inputs: Tensor::new(a.shape().to_vec(), data)?,
        soft_targets: blend_targets(labels_a, labels_b, lambda, n_classes, epsilon)?,
        labels_a: labels_a.to_vec(),
        labels_b: labels_b.to_vec(),
        lambda,
    })
}

/// `λ ~ Beta(α, α)`; inputs and targets blended linearly.
#[allow(clippy::too_many_arguments)]
pub fn mixup<R: Rng + ?Sized>(
    a: &Tensor<f32>,
    labels_a: &[usize],
    b: &Tensor<f32>,
    labels_b: &[usize],
    n_classes: usize,
    alpha: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<AugmentedBatch> {
    let lambda = sample_lambda(alpha, rng)?;
    mixup_with_lambda(a, labels_a, b, labels_b, n_classes, lambda, epsilon)
}

/// Half-open pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

/// Pastes `box` from `b` into `a`; λ becomes the surviving area fraction of `a`.
#[allow(clippy::too_many_arguments)]
pub fn cutmix_with_box(
    a: &Tensor<f32>,
    labels_a: &[usize],
    b: &Tensor<f32>,
    labels_b: &[usize],
    n_classes: usize,
    cut: CutBox,
    epsilon: f64,
) -> Result<AugmentedBatch> {
    check_pair(a, b, labels_a, labels_b)?;
    let s = a.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if cut.y1 > h || cut.x1 > w || cut.y0 > cut.y1 || cut.x0 > cut.x1 {
        return Err(Error::shape(format!("cut box {cut:?} outside {h}×{w}")));
    }
    let mut data = a.data().to_vec();
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            for y in cut.y0..cut.y1 {
                for x in cut.x0..cut.x1 {
                    data[base + y * w + x] = b.data()[base + y * w + x];
                }
            }
        }
    }
    let lambda = 1.0 - cut.area() as f64 / (h * w) as f64;
    Ok(AugmentedBatch {
        inputs: Tensor::new(s.to_vec(), data)?,
        soft_targets: blend_targets(labels_a, labels_b, lambda, n_classes, epsilon)?,
        labels_a: labels_a.to_vec(),
        labels_b: labels_b.to_vec(),
        lambda,
    })
}

/// Box side lengths `W·√(1−λ)`, `H·√(1−λ)` for `λ ~ Beta(α, α)`, centred
/// uniformly and clipped to the image.
pub fn sample_cut_box<R: Rng + ?Sized>(h: usize, w: usize, lambda: f64, rng: &mut R) -> CutBox {
    let ratio = (1.0 - lambda).max(0.0).sqrt();
    let cut_w = (w as f64 * ratio) as usize;
    let cut_h = (h as f64 * ratio) as usize;
    let cx = rng.random_range(0..w) as isize;
    let cy = rng.random_range(0..h) as isize;
    let clip = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
    CutBox {
        y0: clip(cy - (cut_h / 2) as isize, h),
        y1: clip(cy + (cut_h / 2) as isize, h),
        x0: clip(cx - (cut_w / 2) as isize, w),
        x1: clip(cx + (cut_w / 2) as isize, w),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cutmix<R: Rng + ?Sized>(
    a: &Tensor<f32>,
    labels_a: &[usize],
    b: &Tensor<f32>,
    labels_b: &[usize],
    n_classes: usize,
    alpha: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<AugmentedBatch> {
    check_pair(a, b, labels_a, labels_b)?;
    let lambda = sample_lambda(alpha, rng)?;
    let cut = sample_cut_box(a.shape()[2], a.shape()[3], lambda, rng);
    cutmix_with_box(a, labels_a, b, labels_b, n_classes, cut, epsilon)
}

/// Batch-level Mixup/CutMix settings. The partner of image `i` is image
/// `B−1−i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixConfig {
    /// Beta parameter for Mixup; 0 disables it.
    pub mixup_alpha: f64,
    /// Beta parameter for CutMix; 0 disables it.
    pub cutmix_alpha: f64,
    /// Probability of CutMix when both are enabled.
    pub switch_prob: f64,
    /// Probability that a batch is mixed at all.
    pub prob: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            mixup_alpha: 0.8,
            cutmix_alpha: 1.0,
            switch_prob: 0.5,
            prob: 1.0,
        }
    }
}

impl MixConfig {
    pub fn off() -> Self {
        MixConfig {
            mixup_alpha: 0.0,
            cutmix_alpha: 0.0,
            ..Self::default()
        }
    }

    pub fn enabled(&self) -> bool {
        self.prob > 0.0 && (self.mixup_alpha > 0.0 || self.cutmix_alpha > 0.0)
    }
}

pub fn mix_batch<R: Rng + ?Sized>(
    inputs: &Tensor<f32>,
    labels: &[usize],
    n_classes: usize,
    cfg: &MixConfig,
    epsilon: f64,
    rng: &mut R,
) -> Result<AugmentedBatch> {
    if !cfg.enabled() || !rng.random_bool(cfg.prob.min(1.0)) {
        return AugmentedBatch::unmixed(inputs.clone(), labels, n_classes, epsilon);
    }
    let b = labels.len();
    let per = inputs.numel() / b.max(1);
    let mut flipped = Vec::with_capacity(inputs.numel());
    for i in (0..b).rev() {
        flipped.extend_from_slice(&inputs.data()[i * per..(i + 1) * per]);
    }
    let partner = Tensor::new(inputs.shape().to_vec(), flipped)?;
    let partner_labels: Vec<usize> = labels.iter().rev().copied().collect();
    let use_cutmix = match (cfg.mixup_alpha > 0.0, cfg.cutmix_alpha > 0.0) {
        (true, true) => rng.random_bool(cfg.switch_prob.clamp(0.0, 1.0)),
        (false, true) => true,
        _ => false,
    };
    if use_cutmix {
        cutmix(inputs, labels, &partner, &partner_labels, n_classes, cfg.cutmix_alpha, epsilon, rng)
    } else {
        mixup(inputs, labels, &partner, &partner_labels, n_classes, cfg.mixup_alpha, epsilon, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn noisy_image(s: u64) -> Image {
        let mut rng = seed::rng(s, &[]);
        Image::from_planes((0..super::super::IMAGE_BYTES).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn flip_is_an_involution_and_centered_crop_is_identity() {
        let img = noisy_image(1);
        assert_eq!(hflip(&hflip(&img)), img);
        assert_ne!(hflip(&img), img);
        assert_eq!(pad_crop(&img, 4, 4, 4), img);
    }

    #[test]
    fn augmenters_are_seed_deterministic() {
        let img = noisy_image(2);
        let r = StrongRecipe::default();
        assert_eq!(weak_augment(&img, &mut seed::rng(9, &[])), weak_augment(&img, &mut seed::rng(9, &[])));
        assert_eq!(
            strong_augment(&img, &mut seed::rng(9, &[]), &r),
            strong_augment(&img, &mut seed::rng(9, &[]), &r)
        );
    }

    #[test]
    fn identity_recipe_is_identity() {
        let img = noisy_image(3);
        for s in 0..20 {
            assert_eq!(strong_augment(&img, &mut seed::rng(s, &[]), &StrongRecipe::identity()), img);
        }
    }

    #[test]
    fn full_area_erase_noises_everything() {
        let img = Image::filled(0);
        let recipe = StrongRecipe {
            erase_prob: 1.0,
            erase_area: (1.0, 1.0),
            erase_ratio: (1.0, 1.0),
            ..StrongRecipe::identity()
        };
        let out = strong_augment(&img, &mut seed::rng(4, &[]), &recipe);
        let mean = out.bytes().iter().map(|&b| b as f64).sum::<f64>() / out.bytes().len() as f64;
        // uniform u8 noise: mean 127.5, std of the mean over 3072 draws ≈ 1.3
        assert!((mean - 127.5).abs() < 8.0, "mean {mean}");
        let zeros = out.bytes().iter().filter(|&&b| b == 0).count();
        assert!(zeros < 40);
    }

    fn batch(val: f32, labels: &[usize]) -> Tensor<f32> {
        Tensor::full([labels.len(), 3, 4, 4], val)
    }

    #[test]
    fn mixup_lambda_edge_cases() {
        let a = Tensor::from_fn([2, 3, 4, 4], |i| i as f32 * 0.1);
        let b = batch(-1.0, &[0, 0]);
        let m = mixup_with_lambda(&a, &[1, 2], &b, &[3, 4], 10, 1.0, 0.0).unwrap();
        assert_eq!(m.inputs, a);
        let m = mixup_with_lambda(&a, &[2, 2], &b, &[7, 7], 10, 0.5, 0.0).unwrap();
        let row = m.soft_targets.row(0);
        assert_eq!(row[2], 0.5);
        assert_eq!(row[7], 0.5);
        assert_eq!(row.iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn cutmix_edge_cases() {
        let a = batch(1.0, &[0, 1]);
        let b = batch(2.0, &[2, 3]);
        let none = CutBox { y0: 0, y1: 0, x0: 0, x1: 0 };
        let m = cutmix_with_box(&a, &[0, 1], &b, &[2, 3], 4, none, 0.0).unwrap();
        assert_eq!(m.inputs, a);
        assert_eq!(m.lambda, 1.0);
        let full = CutBox { y0: 0, y1: 4, x0: 0, x1: 4 };
        let m = cutmix_with_box(&a, &[0, 1], &b, &[2, 3], 4, full, 0.0).unwrap();
        assert_eq!(m.inputs, b);
        assert_eq!(m.lambda, 0.0);
        assert_eq!(m.soft_targets.row(0), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn clipped_corner_box_lambda_matches_pixel_count() {
        let a = batch(0.0, &[0]);
        let b = batch(1.0, &[1]);
        let mut rng = seed::rng(5, &[]);
        for _ in 0..200 {
            let lambda: f64 = rng.random();
            let cut = sample_cut_box(4, 4, lambda, &mut rng);
            let m = cutmix_with_box(&a, &[0], &b, &[1], 2, cut, 0.0).unwrap();
            let pasted = m.inputs.data()[..16].iter().filter(|&&v| v == 1.0).count();
            assert!((m.lambda - (1.0 - pasted as f64 / 16.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothing_spreads_epsilon_over_other_classes() {
        let t = smooth_one_hot(3, 10, 0.1);
        assert!((t[3] - 0.9).abs() < 1e-12);
        assert!((t[0] - 0.1 / 9.0).abs() < 1e-12);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mix_batch_pairs_with_reversed_batch() {
        let a = Tensor::from_fn([2, 3, 4, 4], |i| if i < 48 { 0.0 } else { 1.0 });
        let cfg = MixConfig {
            cutmix_alpha: 0.0,
            ..MixConfig::default()
        };
        let m = mix_batch(&a, &[0, 1], 2, &cfg, 0.0, &mut seed::rng(2, &[])).unwrap();
        assert_eq!(m.labels_b, vec![1, 0]);
        let l = m.lambda as f32;
        assert!((m.inputs.data()[0] - (1.0 - l)).abs() < 1e-6);
        let off = mix_batch(&a, &[0, 1], 2, &MixConfig::off(), 0.0, &mut seed::rng(2, &[])).unwrap();
        assert_eq!(off.inputs, a);
        assert_eq!(off.lambda, 1.0);
    }

    #[test]
    fn bad_alpha_is_parameter_error() {
        let a = batch(0.0, &[0]);
        let r = mixup(&a, &[0], &a, &[0], 2, 0.0, 0.0, &mut seed::rng(1, &[]));
        assert!(matches!(r, Err(Error::Parameter(_))));
    }
}
