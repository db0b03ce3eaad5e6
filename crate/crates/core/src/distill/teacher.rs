//! Teacher training: weak augmentation, margin loss with deferred
//! re-weighting, optionally wrapped in a sharpness-aware step.

use super::{evaluate_teacher, steps_per_epoch, Workspace};
use crate::config::TrainConfig;
use crate::data::{epoch_order, parallel_map, to_tensor, weak_augment};
use crate::error::{Error, Result};
use crate::losses::{ldam_loss, DrwSchedule};
use crate::models::{hard_label, TeacherCnn};
use crate::optim::{cosine_lr, sam_step, AdamW, Optimizer, OptimizerKind, Sgd};
use crate::seed;
use crate::tensor::Tape;

pub const TEACHER_HEADER: &str = "epoch,lr,loss,train_acc,acc,head,mid,tail";

/// One row of the teacher metrics CSV. `epoch` counts from 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
    pub acc: f64,
    pub head: f64,
    pub mid: f64,
    pub tail: f64,
}

impl TeacherEpoch {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.lr, self.loss, self.train_acc, self.acc, self.head, self.mid, self.tail
        )
    }
}

/// Trains a fresh teacher on `ws.ds.train`. The SAM radius is zero when the
/// `sam_teacher` toggle is off, which reduces each step to the base
/// optimizer's.
pub fn train_teacher(
    cfg: &TrainConfig,
    ws: &Workspace,
    on_epoch: &mut dyn FnMut(&TeacherCnn<f32>, &TeacherEpoch) -> Result<()>,
) -> Result<TeacherCnn<f32>> {
    let tt = &cfg.teacher_train;
    let mut teacher = TeacherCnn::<f32>::new(cfg.teacher.clone(), &mut seed::rng(ws.seeds.init, &[1]))?;
    if cfg.teacher.n_classes != ws.ds.n_classes {
        return Err(Error::Config(format!(
            "teacher has {} classes but the data has {}",
            cfg.teacher.n_classes, ws.ds.n_classes
        )));
    }
    let mut opt: Box<dyn Optimizer<f32>> = match tt.optimizer {
        OptimizerKind::Sgd => Box::new(Sgd::new(tt.momentum, tt.weight_decay)),
        OptimizerKind::AdamW => Box::new(AdamW::new(tt.weight_decay)),
    };
    let rho = if cfg.toggles.sam_teacher { tt.rho_sam } else { 0.0 };
    let drw = DrwSchedule::new(tt.drw_beta, tt.drw_epoch(), ws.ds.class_counts.clone(), tt.drw_normalize)?;
    let train = &ws.ds.train;
    let steps = steps_per_epoch(train.len(), tt.batch_size);
    let total = steps * tt.epochs;
    let order_seed = seed::derive(ws.seeds.order, &[1]);
    let momentum = cfg.teacher.bn_momentum;

    for epoch in 0..tt.epochs {
        let weights = drw.weights(epoch);
        let order = epoch_order(train.len(), order_seed, epoch);
        let (mut loss_sum, mut correct, mut lr) = (0.0, 0usize, 0.0);
        for (step, idx) in order.chunks(tt.batch_size).enumerate() {
            lr = cosine_lr(epoch * steps + step, total, tt.warmup_epochs * steps, tt.lr, tt.min_lr);
            let views = parallel_map(idx, cfg.workers, |j, &i| {
                let mut rng = seed::rng(ws.seeds.augment, &[1, epoch as u64, step as u64, j as u64]);
                weak_augment(&train.images[i], &mut rng)
            });
            let x = to_tensor(&views, &ws.norm);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut params = std::mem::take(&mut teacher.params);
            let outcome = sam_step(&mut params, opt.as_mut(), lr, rho, |p| {
                let mut tape = Tape::new();
                let bound = p.bind(&mut tape);
                let out = teacher.forward_with(p, &mut tape, &bound, &x, true)?;
                let loss = ldam_loss(&mut tape, out.logits, &labels, &ws.ds.class_counts, &tt.ldam, Some(&weights))?;
                let value = tape.value(loss).item() as f64;
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "teacher loss is {value} at epoch {epoch}, step {step}"
                    )));
                }
                let logits = tape.value(out.logits).clone();
                tape.backward(loss)?;
                Ok((value, p.grads(&tape, &bound), (out.bn_updates, logits)))
            });
            let outcome = match outcome {
                Ok(o) => o,
                Err(e) => {
                    teacher.params = params;
                    return Err(e);
                }
            };
            let (updates, logits) = outcome.aux;
            for u in &updates {
                u.apply(&mut params, momentum);
            }
            teacher.params = params;
            loss_sum += outcome.loss * labels.len() as f64;
            correct += hard_label(&logits).iter().zip(&labels).filter(|(p, y)| p == y).count();
        }
        let acc = evaluate_teacher(&teacher, &ws.eval, &ws.norm, &ws.ds.groups)?;
        let row = TeacherEpoch {
            epoch: epoch + 1,
            lr,
            loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            acc: acc.overall,
            head: acc.head,
            mid: acc.mid,
            tail: acc.tail,
        };
        log::info!("teacher {}", row.to_csv_row());
        on_epoch(&teacher, &row)?;
    }
    Ok(teacher)
}
