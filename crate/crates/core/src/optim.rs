//! First-order optimizers over a [`ParamStore`], learning-rate schedule, and
//! the sharpness-aware two-pass step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ParamKind, ParamStore};
use crate::tensor::{Checkpoint, Scalar, Tensor};

/// Per-parameter gradients in store order; `None` marks non-trainable entries.
pub type Grads<T> = Vec<Option<Tensor<T>>>;

pub trait Optimizer<T: Scalar> {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) -> Result<()>;

    /// State tensors under `prefix`, for resuming.
    fn save(&self, prefix: &str, ck: &mut Checkpoint);

    fn load(&mut self, prefix: &str, ck: &Checkpoint) -> Result<()>;
}

fn check_grads<T: Scalar>(params: &ParamStore<T>, grads: &Grads<T>) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (e, g) in params.entries().iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != e.value.shape() {
                return Err(Error::shape(format!("gradient for {} has shape {:?}", e.name, g.shape())));
            }
            if g.has_nan() {
                return Err(Error::Numeric(format!("NaN gradient for {}", e.name)));
            }
        }
    }
    Ok(())
}

fn save_slots<T: Scalar>(ck: &mut Checkpoint, prefix: &str, slots: &[Option<Vec<T>>]) {
    for (i, s) in slots.iter().enumerate() {
        if let Some(v) = s {
            ck.push(
                format!("{prefix}{i}"),
                Tensor::new([v.len()], v.iter().map(|x| x.f64() as f32).collect()).expect("1-d"),
            );
        }
    }
}

fn load_slots<T: Scalar>(ck: &Checkpoint, prefix: &str, n: usize) -> Vec<Option<Vec<T>>> {
    (0..n)
        .map(|i| ck.get(&format!("{prefix}{i}")).map(|t| t.data().iter().map(|&x| T::of(x as f64)).collect()))
        .collect()
}

/// Adam with decoupled weight decay, applied only to [`ParamKind::Weight`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Scalar = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

impl<T: Scalar> Optimizer<T> for AdamW<T> {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) -> Result<()> {
        check_grads(params, grads)?;
        if self.m.len() != params.len() {
            self.m = vec![None; params.len()];
            self.v = vec![None; params.len()];
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let bc1 = T::of(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - self.beta2.powi(self.t as i32));
        let lr_t = T::of(lr);
        let eps = T::of(self.eps);
        for (i, (e, g)) in params.entries_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let n = g.numel();
            let m = self.m[i].get_or_insert_with(|| vec![T::zero(); n]);
            let v = self.v[i].get_or_insert_with(|| vec![T::zero(); n]);
            let decay = if e.kind == ParamKind::Weight {
                T::one() - lr_t * T::of(self.weight_decay)
            } else {
                T::one()
            };
            for (((p, &gj), mj), vj) in e.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = b1 * *mj + (T::one() - b1) * gj;
                *vj = b2 * *vj + (T::one() - b2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *p = *p * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    fn save(&self, prefix: &str, ck: &mut Checkpoint) {
        ck.push(format!("{prefix}t"), Tensor::new([2], split_u64(self.t)).expect("1-d"));
        save_slots(ck, &format!("{prefix}m."), &self.m);
        save_slots(ck, &format!("{prefix}v."), &self.v);
    }

    fn load(&mut self, prefix: &str, ck: &Checkpoint) -> Result<()> {
        let t = ck
            .get(&format!("{prefix}t"))
            .ok_or_else(|| Error::Config(format!("checkpoint has no optimizer state under {prefix:?}")))?;
        self.t = join_u64(t.data());
        let n = self.m.len().max(count_slots(ck, &format!("{prefix}m.")));
        self.m = load_slots(ck, &format!("{prefix}m."), n);
        self.v = load_slots(ck, &format!("{prefix}v."), n);
        Ok(())
    }
}

/// Stores a counter as two exact f32 halves (16 bits each).
fn split_u64(x: u64) -> Vec<f32> {
    vec![(x & 0xFFFF) as f32, ((x >> 16) & 0xFFFF) as f32]
}

fn join_u64(d: &[f32]) -> u64 {
    d[0] as u64 | ((d.get(1).copied().unwrap_or(0.0) as u64) << 16)
}

fn count_slots(ck: &Checkpoint, prefix: &str) -> usize {
    ck.entries
        .iter()
        .filter_map(|(name, _)| name.strip_prefix(prefix)?.parse::<usize>().ok())
        .map(|i| i + 1)
        .max()
        .unwrap_or(0)
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient
/// of [`ParamKind::Weight`] entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T: Scalar = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    buf: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            buf: Vec::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for Sgd<T> {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) -> Result<()> {
        check_grads(params, grads)?;
        if self.buf.len() != params.len() {
            self.buf = vec![None; params.len()];
        }
        let mu = T::of(self.momentum);
        let lr_t = T::of(lr);
        for (i, (e, g)) in params.entries_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let wd = if e.kind == ParamKind::Weight {
                T::of(self.weight_decay)
            } else {
                T::zero()
            };
            let fresh = self.buf[i].is_none();
            let buf = self.buf[i].get_or_insert_with(|| vec![T::zero(); g.numel()]);
            for ((p, &gj), bj) in e.value.data_mut().iter_mut().zip(g.data()).zip(buf.iter_mut()) {
                let d = gj + wd * *p;
                *bj = if fresh { d } else { mu * *bj + d };
                *p -= lr_t * *bj;
            }
        }
        Ok(())
    }

    fn save(&self, prefix: &str, ck: &mut Checkpoint) {
        ck.push(format!("{prefix}sgd"), Tensor::new([1], vec![1.0]).expect("1-d"));
        save_slots(ck, &format!("{prefix}buf."), &self.buf);
    }

    fn load(&mut self, prefix: &str, ck: &Checkpoint) -> Result<()> {
        if ck.get(&format!("{prefix}sgd")).is_none() {
            return Err(Error::Config(format!("checkpoint has no optimizer state under {prefix:?}")));
        }
        let n = self.buf.len().max(count_slots(ck, &format!("{prefix}buf.")));
        self.buf = load_slots(ck, &format!("{prefix}buf."), n);
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to `min_lr` at
/// `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64, min_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

pub fn global_norm<T: Scalar>(grads: &Grads<T>) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug)]
pub struct SamOutcome<A> {
    /// Loss at the unperturbed point.
    pub loss: f64,
    /// Global L2 norm of the applied perturbation (0 when skipped).
    pub perturbation_norm: f64,
    /// Auxiliary output of the first gradient evaluation.
    pub aux: A,
}

/// One sharpness-aware step.
///
/// `eval` returns `(loss, grads, aux)` at the current parameters. The
/// gradient `g` at `w` sets the ascent `ε = ρ·g/‖g‖₂` (global norm); the
/// gradient at `w + ε` is handed to `opt` after `w` is restored exactly.
/// With `ρ = 0` or `g = 0` this is a plain step on `g`.
pub fn sam_step<T, O, A, F>(params: &mut ParamStore<T>, opt: &mut O, lr: f64, rho: f64, mut eval: F) -> Result<SamOutcome<A>>
where
    T: Scalar,
    O: Optimizer<T> + ?Sized,
    F: FnMut(&ParamStore<T>) -> Result<(f64, Grads<T>, A)>,
{
    if !(rho >= 0.0) {
        return Err(Error::param(format!("SAM radius must be ≥ 0, got {rho}")));
    }
    let (loss, grads, aux) = eval(params)?;
    let norm = global_norm(&grads);
    if rho == 0.0 || norm == 0.0 {
        opt.step(params, &grads, lr)?;
        return Ok(SamOutcome {
            loss,
            perturbation_norm: 0.0,
            aux,
        });
    }
    let scale = rho / norm;
    let mut snapshot = Vec::new();
    let mut applied = 0.0;
    for (i, (e, g)) in params.entries_mut().iter_mut().zip(&grads).enumerate() {
        let Some(g) = g else { continue };
        snapshot.push((i, e.value.clone()));
        for (p, &gj) in e.value.data_mut().iter_mut().zip(g.data()) {
            let before = *p;
            *p += T::of(scale * gj.f64());
            applied += (*p - before).f64().powi(2);
        }
    }
    let (_, perturbed_grads, _) = eval(params)?;
    for (i, value) in snapshot {
        params.entries_mut()[i].value = value;
    }
    opt.step(params, &perturbed_grads, lr)?;
    Ok(SamOutcome {
        loss,
        perturbation_norm: applied.sqrt(),
        aux,
    })
}
