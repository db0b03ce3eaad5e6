use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::store::{Bound, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, BatchStats, BnMode, Scalar, Tape, Tensor, Var};

const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    /// Residual blocks per stage; depth is `6n + 2`.
    pub blocks_per_stage: usize,
    pub widths: [usize; 3],
    pub n_classes: usize,
    /// Multiplier applied to cosine logits before softmax.
    pub logit_scale: f64,
    pub bn_momentum: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            blocks_per_stage: 5,
            widths: [16, 32, 64],
            n_classes: 10,
            logit_scale: 30.0,
            bn_momentum: 0.1,
        }
    }
}

impl TeacherConfig {
    pub fn feature_dim(&self) -> usize {
        self.widths[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct BnIds {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct BlockIds {
    conv1: usize,
    bn1: BnIds,
    conv2: usize,
    bn2: BnIds,
    stride: usize,
    shortcut: Option<(usize, BnIds)>,
}

/// Residual CNN for 32×32 inputs: a 3×3 stem, three stages of basic blocks
/// (the first block of stages 2 and 3 halves the resolution), global average
/// pooling, and a cosine classifier whose logits lie in `[−1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherCnn<T: Scalar = f32> {
    pub config: TeacherConfig,
    pub params: ParamStore<T>,
    stem: usize,
    stem_bn: BnIds,
    blocks: Vec<BlockIds>,
    fc: usize,
}

/// Batch statistics to fold into the running buffers after a training step.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    mean: usize,
    var: usize,
    stats: BatchStats<T>,
}

impl<T: Scalar> BnUpdate<T> {
    /// `running ← (1 − m)·running + m·batch`.
    pub fn apply(&self, params: &mut ParamStore<T>, momentum: f64) {
        let m = T::of(momentum);
        for (id, src) in [(self.mean, &self.stats.mean), (self.var, &self.stats.var)] {
            for (r, &b) in params.get_mut(id).data_mut().iter_mut().zip(src) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TeacherOutput<T> {
    /// Cosine logits `[B, C]`.
    pub logits: Var,
    /// Pooled features `[B, 64]`.
    pub features: Var,
    pub bn_updates: Vec<BnUpdate<T>>,
}

fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Tensor<T> {
    let fan_in = shape[1] * shape[2] * shape[3];
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    Tensor::from_fn(shape, |_| T::of(normal.sample(rng)))
}

fn push_bn<T: Scalar>(s: &mut ParamStore<T>, prefix: &str, c: usize) -> BnIds {
    BnIds {
        gamma: s.push(format!("{prefix}.g"), Tensor::full([c], T::one()), ParamKind::NoDecay),
        beta: s.push(format!("{prefix}.b"), Tensor::zeros([c]), ParamKind::NoDecay),
        mean: s.push(format!("{prefix}.mean"), Tensor::zeros([c]), ParamKind::Buffer),
        var: s.push(format!("{prefix}.var"), Tensor::full([c], T::one()), ParamKind::Buffer),
    }
}

impl<T: Scalar> TeacherCnn<T> {
    pub fn new<R: Rng + ?Sized>(config: TeacherConfig, rng: &mut R) -> Result<Self> {
        if config.blocks_per_stage == 0 || config.n_classes == 0 || config.widths.contains(&0) {
            return Err(Error::Config("teacher needs positive depth, widths and classes".into()));
        }
        let mut s = ParamStore::new();
        let w0 = config.widths[0];
        let stem = s.push("stem.conv", he_normal([w0, 3, 3, 3], rng), ParamKind::Weight);
        let stem_bn = push_bn(&mut s, "stem.bn", w0);
        let mut blocks = Vec::new();
        let mut in_c = w0;
        for (stage, &out_c) in config.widths.iter().enumerate() {
            for k in 0..config.blocks_per_stage {
                let stride = if stage > 0 && k == 0 { 2 } else { 1 };
                let p = format!("stage{stage}.block{k}");
                let conv1 = s.push(format!("{p}.conv1"), he_normal([out_c, in_c, 3, 3], rng), ParamKind::Weight);
                let bn1 = push_bn(&mut s, &format!("{p}.bn1"), out_c);
                let conv2 = s.push(format!("{p}.conv2"), he_normal([out_c, out_c, 3, 3], rng), ParamKind::Weight);
                let bn2 = push_bn(&mut s, &format!("{p}.bn2"), out_c);
                let shortcut = (stride != 1 || in_c != out_c).then(|| {
                    let w = s.push(format!("{p}.short"), he_normal([out_c, in_c, 1, 1], rng), ParamKind::Weight);
                    (w, push_bn(&mut s, &format!("{p}.short_bn"), out_c))
                });
                blocks.push(BlockIds {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    stride,
                    shortcut,
                });
                in_c = out_c;
            }
        }
        let fc = s.push(
            "fc",
            Tensor::from_fn([config.n_classes, in_c], |_| T::of(rng.random_range(-1.0..1.0))),
            ParamKind::Weight,
        );
        Ok(TeacherCnn {
            config,
            params: s,
            stem,
            stem_bn,
            blocks,
            fc,
        })
    }

    pub fn stem_id(&self) -> usize {
        self.stem
    }

    #[allow(clippy::too_many_arguments)]
    fn bn(
        params: &ParamStore<T>,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        ids: BnIds,
        train: bool,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        let mode = if train {
            BnMode::Train
        } else {
            BnMode::Eval {
                mean: params.get(ids.mean).data(),
                var: params.get(ids.var).data(),
            }
        };
        let (y, stats) = tape.batch_norm2d(x, bound[ids.gamma], bound[ids.beta], mode, T::of(BN_EPS))?;
        if let Some(stats) = stats {
            updates.push(BnUpdate {
                mean: ids.mean,
                var: ids.var,
                stats,
            });
        }
        Ok(y)
    }

    /// `train` selects batch statistics (and reports them) instead of the
    /// running buffers.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: &Tensor<T>, train: bool) -> Result<TeacherOutput<T>> {
        self.forward_with(&self.params, tape, bound, x, train)
    }

    /// As [`Self::forward`], reading running buffers from `params`, which
    /// must have this model's layout.
    pub fn forward_with(
        &self,
        params: &ParamStore<T>,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: &Tensor<T>,
        train: bool,
    ) -> Result<TeacherOutput<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape(format!("teacher expects [B,3,H,W], got {s:?}")));
        }
        let mut updates = Vec::new();
        let x = tape.constant(x.clone());
        let h = tape.conv2d(x, bound[self.stem], 1, 1)?;
        let h = Self::bn(params, tape, bound, h, self.stem_bn, train, &mut updates)?;
        let mut h = tape.relu(h);
        for blk in &self.blocks {
            let o = tape.conv2d(h, bound[blk.conv1], blk.stride, 1)?;
            let o = Self::bn(params, tape, bound, o, blk.bn1, train, &mut updates)?;
            let o = tape.relu(o);
            let o = tape.conv2d(o, bound[blk.conv2], 1, 1)?;
            let o = Self::bn(params, tape, bound, o, blk.bn2, train, &mut updates)?;
            let skip = match blk.shortcut {
                Some((w, ids)) => {
                    let sk = tape.conv2d(h, bound[w], blk.stride, 0)?;
                    Self::bn(params, tape, bound, sk, ids, train, &mut updates)?
                }
                None => h,
            };
            let sum = tape.add(o, skip)?;
            h = tape.relu(sum);
        }
        let features = tape.avg_pool(h)?;
        let fnorm = tape.l2_normalize_rows(features)?;
        let wnorm = tape.l2_normalize_rows(bound[self.fc])?;
        let logits = tape.matmul_t(fnorm, wnorm)?;
        Ok(TeacherOutput {
            logits,
            features,
            bn_updates: updates,
        })
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        for u in updates {
            u.apply(&mut self.params, self.config.bn_momentum);
        }
    }

    /// Eval-mode logits and features.
    pub fn eval(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind_constants(&mut tape);
        let out = self.forward(&mut tape, &bound, x, false)?;
        Ok((tape.value(out.logits).clone(), tape.value(out.features).clone()))
    }

    /// `softmax(s · z)` of cosine logits.
    pub fn probs(&self, logits: &Tensor<T>) -> Result<Tensor<T>> {
        softmax_rows(&logits.map(|v| v * T::of(self.config.logit_scale)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn small() -> TeacherConfig {
        TeacherConfig {
            blocks_per_stage: 1,
            widths: [4, 8, 8],
            n_classes: 3,
            ..TeacherConfig::default()
        }
    }

    #[test]
    fn shapes_and_determinism() {
        let t = TeacherCnn::<f32>::new(small(), &mut seed::rng(0, &[])).unwrap();
        let mut rng = seed::rng(1, &[]);
        let one: Vec<f32> = (0..3 * 32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new([2, 3, 32, 32], [one.clone(), one].concat()).unwrap();
        let (z, f) = t.eval(&x).unwrap();
        assert_eq!(z.shape(), &[2, 3]);
        assert_eq!(f.shape(), &[2, 8]);
        assert_eq!(z.row(0), z.row(1));
        assert!(z.data().iter().all(|v| v.abs() <= 1.0 + 1e-6));
    }

    #[test]
    fn resnet32_layout() {
        let t = TeacherCnn::<f32>::new(TeacherConfig::default(), &mut seed::rng(0, &[])).unwrap();
        let convs = t.params.entries().iter().filter(|e| e.name.ends_with("conv1") || e.name.ends_with("conv2")).count();
        // 15 blocks × 2 convs + stem + fc = 32 weighted layers
        assert_eq!(convs + 2, 32);
        assert_eq!(t.config.feature_dim(), 64);
        assert_eq!(t.params.by_name("fc").unwrap().shape(), &[10, 64]);
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut t = TeacherCnn::<f64>::new(small(), &mut seed::rng(0, &[])).unwrap();
        let x = Tensor::full([2, 3, 32, 32], 2.0);
        let mut tape = Tape::new();
        let bound = t.params.bind(&mut tape);
        let out = t.forward(&mut tape, &bound, &x, true).unwrap();
        // stem, two per block, plus the two strided shortcuts
        assert_eq!(out.bn_updates.len(), 1 + 3 * 2 + 2);
        t.apply_bn_updates(&out.bn_updates);
        let id = t.params.index_of("stem.bn.mean").unwrap();
        assert!(t.params.get(id).data().iter().any(|&v| v != 0.0));
    }
}
