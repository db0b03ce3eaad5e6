//! Student distillation: strongly augmented and mixed views go to both the
//! student and the frozen teacher; the DIST head learns the teacher's hard
//! labels under deferred re-weighting.

use super::{evaluate_student, steps_per_epoch, EvalReport, Workspace};
use crate::config::TrainConfig;
use crate::data::{
    repeated_order, mix_batch, parallel_map, strong_augment, to_tensor, weak_augment, MixConfig, Normalizer, Split,
};
use crate::error::{Error, Result};
use crate::losses::{combined_deit_lt_loss, DrwSchedule};
use crate::models::{hard_label, DualTokenVit, TeacherCnn};
use crate::optim::{cosine_lr, AdamW, Optimizer};
use crate::seed::{self, SeedPlan};
use crate::tensor::Tape;

pub const STUDENT_HEADER: &str =
    "epoch,lr,loss_cls,loss_dist,acc_avg,acc_cls,acc_dist,head,mid,tail,cosine_cls_dist,teacher_agree";

/// Student weights, optimizer state and progress; enough to resume.
#[derive(Clone, Debug)]
pub struct StudentState {
    pub student: DualTokenVit<f32>,
    pub opt: AdamW<f32>,
    pub epochs_done: usize,
}

impl StudentState {
    pub fn new(cfg: &TrainConfig, seeds: &SeedPlan) -> Result<Self> {
        Ok(StudentState {
            student: DualTokenVit::new(cfg.student.clone(), &mut seed::rng(seeds.init, &[2]))?,
            opt: AdamW::new(cfg.optim.weight_decay),
            epochs_done: 0,
        })
    }
}

/// One minibatch of a split, addressed by index.
#[derive(Clone, Copy, Debug)]
pub struct DistillBatch<'a> {
    pub split: &'a Split,
    pub indices: &'a [usize],
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_dist: f64,
    /// Samples whose teacher label equals the dominant ground-truth label
    /// of the (possibly mixed) input.
    pub teacher_agree: usize,
    pub n: usize,
}

/// Mixing is switched off from the re-weighting epoch on unless
/// `mix_during_drw` is set.
fn mix_for_epoch(cfg: &TrainConfig, epoch: usize) -> MixConfig {
    if epoch >= cfg.drw_epoch() && !cfg.augment.mix_during_drw {
        MixConfig::off()
    } else {
        cfg.augment.mix.clone()
    }
}

/// One optimizer step on one batch.
///
/// The same augmented and mixed tensor feeds the teacher and the student
/// when `ood_distill` is on; otherwise the teacher labels a weakly
/// augmented view of the same images.
#[allow(clippy::too_many_arguments)]
pub fn distill_step(
    cfg: &TrainConfig,
    seeds: &SeedPlan,
    norm: &Normalizer,
    drw: &DrwSchedule,
    teacher: &TeacherCnn<f32>,
    state: &mut StudentState,
    batch: DistillBatch<'_>,
) -> Result<StepStats> {
    let n_classes = state.student.config.n_classes;
    if teacher.config.n_classes != n_classes {
        return Err(Error::Config(format!(
            "teacher predicts {} classes, student {}",
            teacher.config.n_classes, n_classes
        )));
    }
    let (e, s) = (batch.epoch as u64, batch.step as u64);
    let images = &batch.split.images;
    let labels: Vec<usize> = batch.indices.iter().map(|&i| batch.split.labels[i]).collect();
    let strong = parallel_map(batch.indices, cfg.workers, |j, &i| {
        strong_augment(&images[i], &mut seed::rng(seeds.augment, &[2, e, s, j as u64]), &cfg.augment.strong)
    });
    let mixed = mix_batch(
        &to_tensor(&strong, norm),
        &labels,
        n_classes,
        &mix_for_epoch(cfg, batch.epoch),
        cfg.optim.epsilon_smooth,
        &mut seed::rng(seeds.augment, &[3, e, s]),
    )?;
    let teacher_logits = if cfg.toggles.ood_distill {
        teacher.eval(&mixed.inputs)?.0
    } else {
        let weak = parallel_map(batch.indices, cfg.workers, |j, &i| {
            weak_augment(&images[i], &mut seed::rng(seeds.augment, &[4, e, s, j as u64]))
        });
        teacher.eval(&to_tensor(&weak, norm))?.0
    };
    let y_t = hard_label(&teacher_logits);
    let weights = if cfg.toggles.drw {
        drw.weights(batch.epoch)
    } else {
        vec![1.0; n_classes]
    };

    let mut tape = Tape::new();
    let bound = state.student.params.bind(&mut tape);
    let out = state.student.forward(&mut tape, &bound, &mixed.inputs, false)?;
    let parts = combined_deit_lt_loss(&mut tape, out.logits_cls, out.logits_dist, &mixed.soft_targets, &y_t, &weights)?;
    let loss = tape.value(parts.total).item() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "student loss is {loss} at epoch {}, step {}",
            batch.epoch, batch.step
        )));
    }
    let loss_cls = tape.value(parts.cls).item() as f64;
    let loss_dist = tape.value(parts.dist).item() as f64;
    tape.backward(parts.total)?;
    let grads = state.student.params.grads(&tape, &bound);
    state.opt.step(&mut state.student.params, &grads, batch.lr)?;

    let dominant = if mixed.lambda >= 0.5 { &mixed.labels_a } else { &mixed.labels_b };
    Ok(StepStats {
        loss,
        loss_cls,
        loss_dist,
        teacher_agree: y_t.iter().zip(dominant).filter(|(t, y)| t == y).count(),
        n: labels.len(),
    })
}

/// One row of the student metrics CSV. `epoch` counts from 1; the group
/// columns refer to the averaged prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_cls: f64,
    pub loss_dist: f64,
    pub teacher_agree: f64,
    pub eval: EvalReport,
}

impl EpochMetrics {
    pub fn to_csv_row(&self) -> String {
        let r = &self.eval;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.loss_cls,
            self.loss_dist,
            r.averaged.overall,
            r.cls.overall,
            r.dist.overall,
            r.averaged.head,
            r.averaged.mid,
            r.averaged.tail,
            r.cosine_cls_dist,
            self.teacher_agree
        )
    }
}

/// Runs epochs `state.epochs_done .. until` (capped at `cfg.epochs`) of the
/// full schedule. `on_epoch` sees the state after each completed epoch.
pub fn train_student(
    cfg: &TrainConfig,
    ws: &Workspace,
    teacher: &TeacherCnn<f32>,
    state: &mut StudentState,
    until: usize,
    on_epoch: &mut dyn FnMut(&StudentState, &EpochMetrics) -> Result<()>,
) -> Result<()> {
    let train = &ws.ds.train;
    let steps = steps_per_epoch(train.len(), cfg.batch_size);
    let total = steps * cfg.epochs;
    let drw = DrwSchedule::new(cfg.drw.beta, cfg.drw_epoch(), ws.ds.class_counts.clone(), cfg.drw.normalize)?;
    let order_seed = seed::derive(ws.seeds.order, &[2]);
    let o = &cfg.optim;
    while state.epochs_done < until.min(cfg.epochs) {
        let epoch = state.epochs_done;
        let order = repeated_order(train.len(), cfg.augment.repeats, order_seed, epoch);
        let (mut cls_sum, mut dist_sum, mut agree, mut lr) = (0.0, 0.0, 0usize, 0.0);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            lr = cosine_lr(epoch * steps + step, total, o.warmup_epochs * steps, o.lr, o.min_lr);
            let batch = DistillBatch {
                split: train,
                indices: idx,
                epoch,
                step,
                lr,
            };
            let st = distill_step(cfg, &ws.seeds, &ws.norm, &drw, teacher, state, batch)?;
            cls_sum += st.loss_cls * st.n as f64;
            dist_sum += st.loss_dist * st.n as f64;
            agree += st.teacher_agree;
        }
        state.epochs_done += 1;
        let n = train.len().max(1) as f64;
        let m = EpochMetrics {
            epoch: state.epochs_done,
            lr,
            loss_cls: cls_sum / n,
            loss_dist: dist_sum / n,
            teacher_agree: agree as f64 / n,
            eval: evaluate_student(&state.student, &ws.eval, &ws.norm, &ws.ds.groups)?,
        };
        log::info!("student {}", m.to_csv_row());
        on_epoch(state, &m)?;
    }
    Ok(())
}
