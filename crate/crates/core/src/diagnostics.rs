//! Attention locality, attention rollout, tail-class feature rank, prediction
//! entropy, and CLS/DIST feature divergence.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{mix_batch, strong_augment, to_tensor, weak_augment, Image, MixConfig, Normalizer, StrongRecipe};
use crate::error::{Error, Result};
use crate::models::{AttentionRecord, TeacherCnn};
use crate::seed;
use crate::tensor::{svd, Tensor};

/// Mean attention distance in pixels, indexed `[block][head]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalityProfile {
    pub per_block: Vec<Vec<f64>>,
}

impl LocalityProfile {
    pub fn block_means(&self) -> Vec<f64> {
        self.per_block
            .iter()
            .map(|h| h.iter().sum::<f64>() / h.len().max(1) as f64)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("block,head,mean_distance_px\n");
        for (b, heads) in self.per_block.iter().enumerate() {
            for (h, d) in heads.iter().enumerate() {
                s.push_str(&format!("{b},{h},{d}\n"));
            }
        }
        s
    }
}

fn grid_side(n_patches: usize) -> Result<usize> {
    let g = (n_patches as f64).sqrt().round() as usize;
    if g * g != n_patches {
        return Err(Error::shape(format!("{n_patches} patch tokens do not form a square grid")));
    }
    Ok(g)
}

/// Pixel distances between patch centres on a `g × g` grid of `patch`-pixel
/// patches, row-major.
fn patch_distances(g: usize, patch: usize) -> Vec<f64> {
    let n = g * g;
    let mut d = vec![0.0; n * n];
    for q in 0..n {
        for k in 0..n {
            let dy = (q / g) as f64 - (k / g) as f64;
            let dx = (q % g) as f64 - (k % g) as f64;
            d[q * n + k] = patch as f64 * (dx * dx + dy * dy).sqrt();
        }
    }
    d
}

/// For every head, `Σ_q Σ_k A[q,k] · dist(q,k) / n_queries` over patch
/// queries and patch keys, averaged over the images in the record. The first
/// `prefix_tokens` tokens (CLS, DIST) take no part.
pub fn mean_attention_distance(
    rec: &AttentionRecord,
    patch_size: usize,
    image_size: usize,
    prefix_tokens: usize,
) -> Result<LocalityProfile> {
    let g = image_size / patch_size.max(1);
    let n = g * g;
    let dist = patch_distances(g, patch_size);
    let mut per_block = Vec::with_capacity(rec.n_blocks());
    for (bi, blk) in rec.blocks.iter().enumerate() {
        let s = blk.shape();
        if s.len() != 4 || s[2] != s[3] || s[2] != n + prefix_tokens {
            return Err(Error::shape(format!(
                "block {bi} attention {s:?} does not match a {g}×{g} grid plus {prefix_tokens} tokens"
            )));
        }
        let (b, heads, t) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; heads];
        for img in 0..b {
            for (h, acc) in out.iter_mut().enumerate() {
                let a = rec.matrix(bi, img, h);
                let mut total = 0.0;
                for q in 0..n {
                    let row = &a[(q + prefix_tokens) * t + prefix_tokens..(q + prefix_tokens + 1) * t];
                    total += row.iter().zip(&dist[q * n..(q + 1) * n]).map(|(w, d)| w * d).sum::<f64>();
                }
                *acc += total / n as f64;
            }
        }
        out.iter_mut().for_each(|v| *v /= b as f64);
        per_block.push(out);
    }
    Ok(LocalityProfile { per_block })
}

/// Head-averaged attention per block for one image, each `T × T` row-major.
pub fn head_averaged(rec: &AttentionRecord, image: usize) -> Vec<Vec<f64>> {
    rec.blocks
        .iter()
        .enumerate()
        .map(|(bi, blk)| {
            let (heads, t) = (blk.shape()[1], blk.shape()[2]);
            let mut avg = vec![0.0; t * t];
            for h in 0..heads {
                for (a, &v) in avg.iter_mut().zip(rec.matrix(bi, image, h)) {
                    *a += v / heads as f64;
                }
            }
            avg
        })
        .collect()
}

/// `R = Ã_L ⋯ Ã_1` with `Ã = ½(Ā + I)` row-renormalized.
pub fn rollout_matrix(blocks: &[Vec<f64>], t: usize) -> Result<Tensor<f64>> {
    let mut r = Tensor::from_fn([t, t], |i| if i / t == i % t { 1.0 } else { 0.0 });
    for (bi, a) in blocks.iter().enumerate() {
        if a.len() != t * t {
            return Err(Error::shape(format!("block {bi} attention is not {t}×{t}")));
        }
        let mut aug = a.iter().map(|v| 0.5 * v).collect::<Vec<_>>();
        for i in 0..t {
            aug[i * t + i] += 0.5;
            let s: f64 = aug[i * t..(i + 1) * t].iter().sum();
            aug[i * t..(i + 1) * t].iter_mut().for_each(|v| *v /= s);
        }
        r = Tensor::new([t, t], aug)?.matmul(&r)?;
    }
    Ok(r)
}

/// Saliency of `target_token` over the patch grid.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub matrix: Tensor<f64>,
    /// `[g, g]`
    pub saliency: Tensor<f64>,
}

pub fn attention_rollout(rec: &AttentionRecord, image: usize, target_token: usize, prefix_tokens: usize) -> Result<Rollout> {
    let (_, _, t) = rec.dims().ok_or_else(|| Error::shape("rollout needs at least one block"))?;
    if target_token >= t || prefix_tokens > t {
        return Err(Error::Index(format!("token {target_token} out of range for {t} tokens")));
    }
    let g = grid_side(t - prefix_tokens)?;
    let matrix = rollout_matrix(&head_averaged(rec, image), t)?;
    let row = &matrix.row(target_token)[prefix_tokens..];
    let saliency = Tensor::new([g, g], row.to_vec())?;
    Ok(Rollout { matrix, saliency })
}

/// 8-bit binary PGM scaled so the maximum maps to 255, each cell drawn as a
/// `scale × scale` block.
pub fn write_pgm(path: &Path, grid: &Tensor<f64>, scale: usize) -> Result<()> {
    let (h, w) = grid.dims2()?;
    let scale = scale.max(1);
    let max = grid.data().iter().cloned().fold(0.0, f64::max);
    let mut out = format!("P5\n{} {}\n255\n", w * scale, h * scale).into_bytes();
    for y in 0..h * scale {
        for x in 0..w * scale {
            let v = grid.data()[(y / scale) * w + x / scale];
            let px = if max > 0.0 { (v / max * 255.0).round().clamp(0.0, 255.0) } else { 0.0 };
            out.push(px as u8);
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    Cls,
    Dist,
}

impl std::fmt::Display for TokenKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TokenKind::Cls => "CLS",
            TokenKind::Dist => "DIST",
        })
    }
}

/// Per-image token features with their class labels.
#[derive(Clone, Debug)]
pub struct FeatureMatrix {
    /// `[n, d]`
    pub rows: Tensor<f64>,
    pub classes: Vec<usize>,
    pub token: TokenKind,
}

impl FeatureMatrix {
    pub fn new(rows: Tensor<f64>, classes: Vec<usize>, token: TokenKind) -> Result<Self> {
        let (n, _) = rows.dims2()?;
        if n != classes.len() {
            return Err(Error::shape(format!("{n} feature rows for {} labels", classes.len())));
        }
        if rows.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature entry".into()));
        }
        Ok(FeatureMatrix { rows, classes, token })
    }

    /// Rows whose class is in `keep`.
    pub fn select(&self, keep: &[usize]) -> Self {
        let d = self.rows.shape()[1];
        let idx: Vec<usize> = (0..self.classes.len()).filter(|&i| keep.contains(&self.classes[i])).collect();
        let data = idx.iter().flat_map(|&i| self.rows.row(i).to_vec()).collect();
        FeatureMatrix {
            rows: Tensor::new([idx.len(), d], data).expect("row subset"),
            classes: idx.iter().map(|&i| self.classes[i]).collect(),
            token: self.token,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankResult {
    pub k: usize,
    /// No `k ≤ min(n, d)` met the tolerance; `k` is `min(n, d)`.
    pub exhausted: bool,
    /// Relative squared reconstruction error for `k = 0..=min(n, d)`.
    pub errors: Vec<f64>,
}

/// Least `k` such that projecting `f_min` onto the top-`k` right singular
/// vectors of column-centred `f_all` leaves relative squared error ≤ `tol`.
/// `f_min` itself is not centred.
pub fn feature_rank(f_all: &Tensor<f64>, f_min: &Tensor<f64>, tol: f64) -> Result<RankResult> {
    let (n, d) = f_all.dims2()?;
    let (m, dm) = f_min.dims2()?;
    if d != dm {
        return Err(Error::shape(format!("feature widths differ: {d} vs {dm}")));
    }
    let total: f64 = f_min.sq_norm();
    if total == 0.0 {
        return Ok(RankResult {
            k: 0,
            exhausted: false,
            errors: vec![0.0],
        });
    }
    let mut centred = f_all.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| f_all.data()[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            centred.data_mut()[i * d + j] -= mean;
        }
    }
    let dec = svd(&centred)?;
    let r = dec.s.len();
    // ‖F − F V_k V_kᵀ‖² = ‖F‖² − Σ_{j<k} ‖F v_j‖² for orthonormal v_j
    let proj = f_min.matmul(&dec.v)?;
    let mut errors = Vec::with_capacity(r + 1);
    let mut captured = 0.0;
    errors.push(1.0);
    for j in 0..r {
        captured += (0..m).map(|i| proj.data()[i * r + j].powi(2)).sum::<f64>();
        errors.push(((total - captured) / total).max(0.0));
    }
    match errors.iter().position(|&e| e <= tol) {
        Some(k) => Ok(RankResult { k, exhausted: false, errors }),
        None => Ok(RankResult {
            k: r,
            exhausted: true,
            errors,
        }),
    }
}

/// `−Σ p ln p` per row, in nats, with `0 · ln 0 = 0`.
pub fn prediction_entropy(probs: &Tensor<f64>) -> Result<Vec<f64>> {
    let (_, c) = probs.dims2()?;
    if probs.data().iter().any(|&p| p < 0.0) {
        return Err(Error::param("probabilities must be non-negative"));
    }
    Ok(probs
        .data()
        .chunks(c)
        .map(|row| -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Divergence {
    /// Mean of `1 − cos(u, v)` over rows where both norms are nonzero; NaN
    /// when none qualify.
    pub mean: f64,
    pub used: usize,
    pub excluded: usize,
}

pub fn cls_dist_divergence(cls: &Tensor<f64>, dist: &Tensor<f64>) -> Result<Divergence> {
    if cls.shape() != dist.shape() {
        return Err(Error::shape(format!("feature shapes differ: {:?} vs {:?}", cls.shape(), dist.shape())));
    }
    let (n, _) = cls.dims2()?;
    let mut sum = 0.0;
    let mut used = 0;
    for i in 0..n {
        let (u, v) = (cls.row(i), dist.row(i));
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu == 0.0 || nv == 0.0 {
            continue;
        }
        let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        sum += 1.0 - dot / (nu * nv);
        used += 1;
    }
    Ok(Divergence {
        mean: if used > 0 { sum / used as f64 } else { f64::NAN },
        used,
        excluded: n - used,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    pub n: usize,
    pub in_dist_mean: f64,
    pub in_dist_std: f64,
    pub ood_mean: f64,
    pub ood_std: f64,
}

impl EntropySummary {
    pub fn to_csv(&self) -> String {
        format!(
            "view,n,mean_entropy_nats,std_entropy_nats\nweak,{n},{},{}\nstrong_mixed,{n},{},{}\n",
            self.in_dist_mean,
            self.in_dist_std,
            self.ood_mean,
            self.ood_std,
            n = self.n
        )
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Teacher softmax entropy on `n_samples` weakly augmented images versus the
/// same images strongly augmented and mixed.
#[allow(clippy::too_many_arguments)]
pub fn entropy_report(
    teacher: &TeacherCnn<f32>,
    images: &[Image],
    labels: &[usize],
    norm: &Normalizer,
    recipe: &StrongRecipe,
    mix: &MixConfig,
    n_samples: usize,
    seed_base: u64,
) -> Result<EntropySummary> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::param("entropy report needs a non-empty labelled image set"));
    }
    let n_classes = teacher.config.n_classes;
    let mut weak_h = Vec::with_capacity(n_samples);
    let mut ood_h = Vec::with_capacity(n_samples);
    let mut pick = seed::rng(seed_base, &[0]);
    let chosen: Vec<usize> = (0..n_samples)
        .map(|_| rand::Rng::random_range(&mut pick, 0..images.len()))
        .collect();
    for (ci, chunk) in chosen.chunks(64).enumerate() {
        let weak: Vec<Image> = chunk
            .iter()
            .enumerate()
            .map(|(j, &i)| weak_augment(&images[i], &mut seed::rng(seed_base, &[1, ci as u64, j as u64])))
            .collect();
        let strong: Vec<Image> = chunk
            .iter()
            .enumerate()
            .map(|(j, &i)| strong_augment(&images[i], &mut seed::rng(seed_base, &[2, ci as u64, j as u64]), recipe))
            .collect();
        let lab: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let mixed = mix_batch(&to_tensor(&strong, norm), &lab, n_classes, mix, 0.0, &mut seed::rng(seed_base, &[3, ci as u64]))?;
        for (x, sink) in [(to_tensor(&weak, norm), &mut weak_h), (mixed.inputs, &mut ood_h)] {
            let (z, _) = teacher.eval(&x)?;
            let p = teacher.probs(&z)?.cast::<f64>();
            sink.extend(prediction_entropy(&p)?);
        }
    }
    let (im, is) = mean_std(&weak_h);
    let (om, os) = mean_std(&ood_h);
    Ok(EntropySummary {
        n: n_samples,
        in_dist_mean: im,
        in_dist_std: is,
        ood_mean: om,
        ood_std: os,
    })
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn record(t: usize, f: impl Fn(usize, usize) -> f64) -> AttentionRecord {
        AttentionRecord {
            blocks: vec![Tensor::from_fn([1, 1, t, t], |i| f(i / t, i % t))],
        }
    }

    #[test]
    fn identity_attention_has_zero_distance() {
        let rec = record(6, |q, k| if q == k { 1.0 } else { 0.0 });
        let p = mean_attention_distance(&rec, 1, 2, 2).unwrap();
        assert_eq!(p.per_block, vec![vec![0.0]]);
    }

    #[test]
    fn uniform_on_2x2_grid() {
        let rec = record(4, |_, _| 0.25);
        let p = mean_attention_distance(&rec, 1, 2, 0).unwrap();
        assert_relative_eq!(p.per_block[0][0], (2.0 + 2f64.sqrt()) / 4.0, max_relative = 1e-15);
    }

    #[test]
    fn grid_mismatch_is_shape_error() {
        let rec = record(5, |_, _| 0.2);
        assert!(matches!(mean_attention_distance(&rec, 1, 2, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn identity_rollout_is_one_hot() {
        let rec = record(6, |q, k| if q == k { 1.0 } else { 0.0 });
        let r = attention_rollout(&rec, 0, 3, 2).unwrap();
        assert_eq!(r.saliency.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn entropy_examples() {
        let p = Tensor::from_rows(&[vec![0.1; 10], {
            let mut v = vec![0.0; 10];
            v[4] = 1.0;
            v
        }])
        .unwrap();
        let h = prediction_entropy(&p).unwrap();
        assert_relative_eq!(h[0], 10f64.ln(), max_relative = 1e-12);
        assert_eq!(h[1], 0.0);
        let h = prediction_entropy(&Tensor::from_rows(&[vec![0.5, 0.25, 0.25]]).unwrap()).unwrap();
        assert_relative_eq!(h[0], 1.5 * 2f64.ln(), max_relative = 1e-12);
        assert!(prediction_entropy(&Tensor::from_rows(&[vec![1.1, -0.1]]).unwrap()).is_err());
    }

    #[test]
    fn divergence_examples() {
        let u = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0], vec![-1.0, -2.0], vec![1.0, 0.0]]).unwrap();
        let d = cls_dist_divergence(&u, &v).unwrap();
        assert_eq!(d.excluded, 1);
        assert_relative_eq!(d.mean, (0.0 + 1.0 + 2.0) / 3.0, max_relative = 1e-15);
    }

    #[test]
    fn zero_minority_features_have_rank_zero() {
        let all = Tensor::from_fn([5, 3], |i| i as f64);
        let r = feature_rank(&all, &Tensor::zeros([2, 3]), 0.01).unwrap();
        assert_eq!(r.k, 0);
    }

    #[test]
    fn pgm_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.pgm");
        write_pgm(&p, &Tensor::from_fn([2, 3], |i| i as f64), 2).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n6 4\n255\n"));
        assert_eq!(bytes.len(), 11 + 24);
        assert_eq!(*bytes.last().unwrap(), 255);
    }
}
