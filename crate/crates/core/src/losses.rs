//! Classification losses on the tape, class re-weighting by effective
//! number, and label-dependent margins.

use serde::{Deserialize, Serialize};

use crate::data::smooth_one_hot;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// `(1 − βⁿ) / (1 − β)`.
pub fn effective_number(n: usize, beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::param(format!("beta must lie in (0, 1), got {beta}")));
    }
    Ok((1.0 - beta.powf(n as f64)) / (1.0 - beta))
}

/// Deferred re-weighting: unit weights before `start_epoch`, inverse
/// effective number from then on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrwSchedule {
    pub beta: f64,
    pub start_epoch: usize,
    pub class_counts: Vec<usize>,
    /// Rescale active weights to mean 1.
    pub normalize: bool,
}

impl DrwSchedule {
    pub fn new(beta: f64, start_epoch: usize, class_counts: Vec<usize>, normalize: bool) -> Result<Self> {
        effective_number(1, beta)?;
        if let Some(c) = class_counts.iter().position(|&n| n == 0) {
            return Err(Error::param(format!("class {c} has no samples; its weight is undefined")));
        }
        Ok(DrwSchedule {
            beta,
            start_epoch,
            class_counts,
            normalize,
        })
    }

    pub fn active(&self, epoch: usize) -> bool {
        epoch >= self.start_epoch
    }

    pub fn weights(&self, epoch: usize) -> Vec<f64> {
        let c = self.class_counts.len();
        if !self.active(epoch) {
            return vec![1.0; c];
        }
        let mut w: Vec<f64> = self
            .class_counts
            .iter()
            .map(|&n| 1.0 / effective_number(n, self.beta).expect("beta checked at construction"))
            .collect();
        if self.normalize {
            let mean = w.iter().sum::<f64>() / c as f64;
            w.iter_mut().for_each(|v| *v /= mean);
        }
        w
    }
}

fn check_labels(labels: &[usize], n_classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= n_classes) {
        Some(l) => Err(Error::Index(format!("label {l} out of range for {n_classes} classes"))),
        None => Ok(()),
    }
}

fn one_hot<T: Scalar>(labels: &[usize], n_classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros([labels.len(), n_classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * n_classes + l] = T::one();
    }
    t
}

fn logits_dims<T: Scalar>(tape: &Tape<T>, logits: Var, batch: usize) -> Result<(usize, usize)> {
    let (b, c) = tape.value(logits).dims2()?;
    if b != batch {
        return Err(Error::shape(format!("{b} logit rows for {batch} labels")));
    }
    Ok((b, c))
}

/// Cross entropy against `1 − ε` on the label and `ε/(C−1)` elsewhere,
/// averaged over the batch.
pub fn ce_smoothed<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize], epsilon: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::param(format!("smoothing must lie in [0, 1), got {epsilon}")));
    }
    let (b, c) = logits_dims(tape, logits, labels.len())?;
    check_labels(labels, c)?;
    let data = labels
        .iter()
        .flat_map(|&l| smooth_one_hot(l, c, epsilon))
        .map(T::of)
        .collect();
    let targets = Tensor::new([b, c], data)?;
    tape.cross_entropy(logits, &targets, &vec![T::one(); b])
}

/// `−Σ t · log softmax(z)`, averaged over the batch.
pub fn ce_soft<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &Tensor<T>) -> Result<Var> {
    if targets.data().iter().any(|&t| t < T::zero()) {
        return Err(Error::param("soft targets must be non-negative"));
    }
    let b = targets.shape().first().copied().unwrap_or(0);
    tape.cross_entropy(logits, targets, &vec![T::one(); b])
}

/// Cross entropy on the teacher's hard labels, sample `i` scaled by
/// `weights[teacher_labels[i]]`, averaged over the batch.
pub fn drw_distill_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits_dist: Var,
    teacher_labels: &[usize],
    weights: &[f64],
) -> Result<Var> {
    let (_, c) = logits_dims(tape, logits_dist, teacher_labels.len())?;
    check_labels(teacher_labels, c)?;
    if weights.len() != c {
        return Err(Error::shape(format!("{} class weights for {c} classes", weights.len())));
    }
    let per_sample: Vec<T> = teacher_labels.iter().map(|&y| T::of(weights[y])).collect();
    tape.cross_entropy(logits_dist, &one_hot(teacher_labels, c), &per_sample)
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub cls: Var,
    pub dist: Var,
}

/// `½ · CE(cls logits, soft targets) + ½ · weighted CE(dist logits, teacher labels)`.
pub fn combined_deit_lt_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits_cls: Var,
    logits_dist: Var,
    soft_targets: &Tensor<T>,
    teacher_labels: &[usize],
    weights: &[f64],
) -> Result<LossParts> {
    let cls = ce_soft(tape, logits_cls, soft_targets)?;
    let dist = drw_distill_loss(tape, logits_dist, teacher_labels, weights)?;
    let sum = tape.add(cls, dist)?;
    let total = tape.scale(sum, T::of(0.5));
    Ok(LossParts { total, cls, dist })
}

/// `Δ_j ∝ N_j^{−1/4}`, scaled so the largest margin equals `max_margin`.
pub fn ldam_margins(class_counts: &[usize], max_margin: f64) -> Result<Vec<f64>> {
    if let Some(c) = class_counts.iter().position(|&n| n == 0) {
        return Err(Error::param(format!("class {c} has zero samples; margin is undefined")));
    }
    let raw: Vec<f64> = class_counts.iter().map(|&n| (n as f64).powf(-0.25)).collect();
    let top = raw.iter().cloned().fold(0.0, f64::max);
    Ok(raw.iter().map(|r| r * max_margin / top).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdamParams {
    pub max_margin: f64,
    pub logit_scale: f64,
}

impl Default for LdamParams {
    fn default() -> Self {
        LdamParams {
            max_margin: 0.5,
            logit_scale: 30.0,
        }
    }
}

/// Cross entropy over `s · (z − Δ_y · e_y)`; the true-class logit alone is
/// lowered by its class margin. `class_weights` scales each sample by the
/// weight of its label.
pub fn ldam_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    class_counts: &[usize],
    params: &LdamParams,
    class_weights: Option<&[f64]>,
) -> Result<Var> {
    let (b, c) = logits_dims(tape, logits, labels.len())?;
    check_labels(labels, c)?;
    if class_counts.len() != c {
        return Err(Error::shape(format!("{} class counts for {c} classes", class_counts.len())));
    }
    let margins = ldam_margins(class_counts, params.max_margin)?;
    let mut shift = Tensor::<T>::zeros([b, c]);
    for (i, &y) in labels.iter().enumerate() {
        shift.data_mut()[i * c + y] = T::of(-margins[y]);
    }
    let shift = tape.constant(shift);
    let z = tape.add(logits, shift)?;
    let z = tape.scale(z, T::of(params.logit_scale));
    let w: Vec<T> = match class_weights {
        Some(cw) if cw.len() != c => return Err(Error::shape(format!("{} class weights for {c} classes", cw.len()))),
        Some(cw) => labels.iter().map(|&y| T::of(cw[y])).collect(),
        None => vec![T::one(); b],
    };
    tape.cross_entropy(z, &one_hot(labels, c), &w)
}
