//! Training loops for the teacher, the dual-token student and head
//! re-training, plus dual-head inference, grouped evaluation and the toggle
//! grid.

mod ablate;
mod crt;
mod io;
mod student;
mod teacher;

pub use ablate::{ablate, AblationRow, ABLATION_HEADER};
pub use crt::crt_retrain;
pub use io::{
    load_student, load_student_state, load_teacher, meta_path, read_meta, save_student_state, save_teacher, CheckpointMeta,
    MetricsCsv, ModelSpec, SplitDescriptor,
};
pub use student::{distill_step, train_student, DistillBatch, EpochMetrics, StepStats, StudentState, STUDENT_HEADER};
pub use teacher::{train_teacher, TeacherEpoch, TEACHER_HEADER};

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{make_longtailed, to_tensor, Group, Image, LtDataset, Normalizer, RawDataset, Split};
use crate::diagnostics::cls_dist_divergence;
use crate::error::{Error, Result};
use crate::models::{hard_label, DualTokenVit, TeacherCnn};
use crate::seed::SeedPlan;
use crate::tensor::{argmax_rows, Tensor};

/// Images per forward pass at evaluation time.
const EVAL_CHUNK: usize = 100;

/// Everything derived from the raw data and the master seed before training.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub ds: LtDataset,
    pub norm: Normalizer,
    pub seeds: SeedPlan,
    /// Balanced held-out split, optionally trimmed per class.
    pub eval: Split,
}

impl Workspace {
    pub fn prepare(cfg: &TrainConfig, raw: &RawDataset) -> Result<Self> {
        let seeds = SeedPlan::new(cfg.seed);
        if raw.n_classes != cfg.student.n_classes {
            return Err(Error::Config(format!(
                "data has {} classes but the student is configured for {}",
                raw.n_classes, cfg.student.n_classes
            )));
        }
        let ds = make_longtailed(raw, cfg.dataset.rho, cfg.dataset.n_max, seeds.split)?.with_kind(&cfg.dataset.kind()?)?;
        let norm = Normalizer::fit(&ds.train.images)?;
        let eval = trim_per_class(&ds.val, ds.n_classes, cfg.dataset.eval_per_class);
        Ok(Workspace { ds, norm, seeds, eval })
    }

    pub fn descriptor(&self) -> SplitDescriptor {
        SplitDescriptor {
            rho: self.ds.rho,
            n_max: self.ds.n_max,
            split_seed: self.seeds.split,
            class_counts: self.ds.class_counts.clone(),
        }
    }
}

/// Keeps the first `per_class` images of every class; 0 keeps all.
fn trim_per_class(split: &Split, n_classes: usize, per_class: usize) -> Split {
    if per_class == 0 {
        return split.clone();
    }
    let mut seen = vec![0usize; n_classes];
    let mut out = Split::default();
    for (img, &l) in split.images.iter().zip(&split.labels) {
        if seen[l] < per_class {
            seen[l] += 1;
            out.images.push(img.clone());
            out.labels.push(l);
        }
    }
    out
}

/// Class predictions from the two heads and from their mean.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Predictions {
    pub averaged: Vec<usize>,
    pub cls_only: Vec<usize>,
    pub dist_only: Vec<usize>,
}

/// `averaged = argmax((z_cls + z_dist) / 2)`; ties go to the lowest index.
pub fn combine_predictions(logits_cls: &Tensor<f32>, logits_dist: &Tensor<f32>) -> Result<Predictions> {
    if logits_cls.shape() != logits_dist.shape() {
        return Err(Error::shape(format!(
            "head logits differ in shape: {:?} vs {:?}",
            logits_cls.shape(),
            logits_dist.shape()
        )));
    }
    let mean = Tensor::new(
        logits_cls.shape().to_vec(),
        logits_cls.data().iter().zip(logits_dist.data()).map(|(a, b)| (a + b) / 2.0).collect(),
    )?;
    Ok(Predictions {
        averaged: argmax_rows(&mean),
        cls_only: argmax_rows(logits_cls),
        dist_only: argmax_rows(logits_dist),
    })
}

pub fn infer(student: &DualTokenVit<f32>, x: &Tensor<f32>) -> Result<Predictions> {
    let out = student.eval(x, false)?;
    combine_predictions(&out.logits_cls, &out.logits_dist)
}

/// Accuracy overall and within each class group. A group with no samples
/// reports NaN.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub overall: f64,
    pub head: f64,
    pub mid: f64,
    pub tail: f64,
}

impl GroupAccuracy {
    pub fn group(&self, g: Group) -> f64 {
        match g {
            Group::Head => self.head,
            Group::Mid => self.mid,
            Group::Tail => self.tail,
        }
    }
}

pub fn group_accuracy(preds: &[usize], labels: &[usize], groups: &[Group]) -> Result<GroupAccuracy> {
    if preds.len() != labels.len() {
        return Err(Error::shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut hit = [0usize; 4];
    let mut tot = [0usize; 4];
    for (&p, &y) in preds.iter().zip(labels) {
        let g = *groups
            .get(y)
            .ok_or_else(|| Error::Index(format!("label {y} has no group ({} classes)", groups.len())))?;
        let slot = 1 + Group::ALL.iter().position(|&h| h == g).expect("known group");
        for s in [0, slot] {
            tot[s] += 1;
            hit[s] += (p == y) as usize;
        }
    }
    let acc = |s: usize| if tot[s] == 0 { f64::NAN } else { hit[s] as f64 / tot[s] as f64 };
    Ok(GroupAccuracy {
        overall: acc(0),
        head: acc(1),
        mid: acc(2),
        tail: acc(3),
    })
}

/// Grouped accuracy for the averaged, CLS-only and DIST-only predictions,
/// plus the mean CLS–DIST cosine distance of the pre-head features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub averaged: GroupAccuracy,
    pub cls: GroupAccuracy,
    pub dist: GroupAccuracy,
    pub cosine_cls_dist: f64,
}

pub fn evaluate_student(student: &DualTokenVit<f32>, split: &Split, norm: &Normalizer, groups: &[Group]) -> Result<EvalReport> {
    let mut preds = Predictions {
        averaged: Vec::new(),
        cls_only: Vec::new(),
        dist_only: Vec::new(),
    };
    let d = student.config.embed_dim;
    let (mut fc, mut fd) = (Vec::new(), Vec::new());
    for chunk in split.images.chunks(EVAL_CHUNK) {
        let out = student.eval(&to_tensor(chunk, norm), false)?;
        let p = combine_predictions(&out.logits_cls, &out.logits_dist)?;
        preds.averaged.extend(p.averaged);
        preds.cls_only.extend(p.cls_only);
        preds.dist_only.extend(p.dist_only);
        fc.extend(out.features_cls.data().iter().map(|&v| v as f64));
        fd.extend(out.features_dist.data().iter().map(|&v| v as f64));
    }
    let n = split.len();
    let cosine = if n == 0 {
        f64::NAN
    } else {
        cls_dist_divergence(&Tensor::new([n, d], fc)?, &Tensor::new([n, d], fd)?)?.mean
    };
    Ok(EvalReport {
        n,
        averaged: group_accuracy(&preds.averaged, &split.labels, groups)?,
        cls: group_accuracy(&preds.cls_only, &split.labels, groups)?,
        dist: group_accuracy(&preds.dist_only, &split.labels, groups)?,
        cosine_cls_dist: cosine,
    })
}

pub fn teacher_predictions(teacher: &TeacherCnn<f32>, images: &[Image], norm: &Normalizer) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let (z, _) = teacher.eval(&to_tensor(chunk, norm))?;
        out.extend(hard_label(&z));
    }
    Ok(out)
}

pub fn evaluate_teacher(teacher: &TeacherCnn<f32>, split: &Split, norm: &Normalizer, groups: &[Group]) -> Result<GroupAccuracy> {
    group_accuracy(&teacher_predictions(teacher, &split.images, norm)?, &split.labels, groups)
}

/// Batches per epoch, counting a final partial batch.
pub(crate) fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_breaks_to_lowest_index() {
        let zc = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
        let zd = Tensor::new([1, 2], vec![0.0, 1.0]).unwrap();
        let p = combine_predictions(&zc, &zd).unwrap();
        assert_eq!(p.averaged, vec![0]);
        assert_eq!(p.cls_only, vec![0]);
        assert_eq!(p.dist_only, vec![1]);
    }

    #[test]
    fn identical_heads_agree() {
        let z = Tensor::new([3, 4], (0..12).map(|i| ((i * 7) % 5) as f32).collect()).unwrap();
        let p = combine_predictions(&z, &z).unwrap();
        assert_eq!(p.averaged, p.cls_only);
        assert_eq!(p.averaged, p.dist_only);
    }

    fn cifar10_groups() -> Vec<Group> {
        crate::data::group_classes(&[1; 10], &crate::data::DatasetKind::Cifar10).unwrap()
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let labels: Vec<usize> = (0..50).map(|i| i % 10).collect();
        let a = group_accuracy(&labels, &labels, &cifar10_groups()).unwrap();
        assert_eq!((a.overall, a.head, a.mid, a.tail), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn constant_class_zero_predictor() {
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let a = group_accuracy(&vec![0; 100], &labels, &cifar10_groups()).unwrap();
        assert_eq!(a.overall, 0.1);
        assert!((a.head - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!((a.mid, a.tail), (0.0, 0.0));
    }

    #[test]
    fn groups_recombine_to_overall() {
        let labels: Vec<usize> = (0..97).map(|i| (i * 3) % 10).collect();
        let preds: Vec<usize> = (0..97).map(|i| (i * i) % 10).collect();
        let groups = cifar10_groups();
        let a = group_accuracy(&preds, &labels, &groups).unwrap();
        let mut weighted = 0.0;
        for g in Group::ALL {
            let n = labels.iter().filter(|&&y| groups[y] == g).count() as f64;
            weighted += a.group(g) * n;
        }
        let direct = preds.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64 / 97.0;
        assert!((weighted / 97.0 - direct).abs() < 1e-12);
        assert!((a.overall - direct).abs() < 1e-15);
    }

    #[test]
    fn trimming_keeps_first_per_class() {
        let split = Split {
            images: (0..12).map(|i| Image::filled(i as u8)).collect(),
            labels: (0..12).map(|i| i % 3).collect(),
        };
        let t = trim_per_class(&split, 3, 2);
        assert_eq!(t.labels, vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(t.images[3].get(0, 0, 0), 3);
    }
}
