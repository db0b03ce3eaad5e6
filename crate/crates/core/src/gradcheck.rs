//! Central finite-difference checks of reverse-mode gradients, and a catalogue
//! covering every differentiable tape op, every loss and both models.
//!
//! An entry passes when `|analytic − numeric| ≤ REL_TOL · max(|analytic|,
//! |numeric|, DENOM_FLOOR)`. The floor keeps near-zero entries from being
//! judged on round-off alone.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::losses::{ce_smoothed, ce_soft, combined_deit_lt_loss, drw_distill_loss, ldam_loss, LdamParams};
use crate::models::{Bound, DualTokenVit, ParamStore, TeacherCnn, TeacherConfig, VitConfig};
use crate::seed;
use crate::tensor::{BnMode, Tape, Tensor, Var};

pub const REL_TOL: f64 = 1e-4;
pub const DENOM_FLOOR: f64 = 1e-2;
/// Step for the central difference in f64.
pub const STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckReport {
    /// Largest `|a − n| / max(|a|, |n|, DENOM_FLOOR)` over checked entries.
    pub worst: f64,
    pub checked: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst <= REL_TOL
    }

    fn merge(self, other: CheckReport) -> CheckReport {
        CheckReport {
            worst: self.worst.max(other.worst),
            checked: self.checked + other.checked,
        }
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(DENOM_FLOOR)
}

fn scalar_of(tape: &Tape<f64>, y: Var) -> Result<f64> {
    let v = tape.value(y);
    if v.numel() != 1 {
        return Err(Error::shape(format!("checked function must be scalar, got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Checks `f` with respect to every entry of every input.
pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    scalar_of(&tape, y)?;
    tape.backward(y)?;
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let y = f(&mut t, &vs)?;
        scalar_of(&t, y)
    };
    let mut report = CheckReport { worst: 0.0, checked: 0 };
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + STEP;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - STEP;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            report.worst = report.worst.max(rel_err(analytic.data()[i], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Checks `f` with respect to the store entries `ids`; every other entry is
/// held constant.
pub fn check_store<F>(store: &ParamStore<f64>, ids: &[usize], f: F) -> Result<CheckReport>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut active = store.clone();
    let names: Vec<String> = ids.iter().map(|&i| store.entries()[i].name.clone()).collect();
    active.set_frozen(|n| !names.iter().any(|m| m == n));
    let mut tape = Tape::new();
    let bound = active.bind(&mut tape);
    let y = f(&active, &mut tape, &bound)?;
    scalar_of(&tape, y)?;
    tape.backward(y)?;
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let b = s.bind_constants(&mut t);
        let y = f(s, &mut t, &b)?;
        scalar_of(&t, y)
    };
    let mut report = CheckReport { worst: 0.0, checked: 0 };
    let mut probe = store.clone();
    for &id in ids {
        let analytic = tape.grad(bound[id]).unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()));
        for i in 0..store.get(id).numel() {
            let x0 = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = x0 + STEP;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = x0 - STEP;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = x0;
            report.worst = report.worst.max(rel_err(analytic.data()[i], (up - down) / (2.0 * STEP)));
            report.checked += 1;
        }
    }
    Ok(report)
}

fn normal(shape: &[usize], rng: &mut seed::Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

/// Normal entries pushed at least `gap` away from zero, for ops with a kink
/// at the origin.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut seed::Rng) -> Tensor<f64> {
    normal(shape, rng).map(|v| v.signum() * (v.abs() + gap))
}

fn probs(b: usize, c: usize, rng: &mut seed::Rng) -> Tensor<f64> {
    let mut t = Tensor::from_fn([b, c], |_| rng.random_range(0.05..1.0));
    for i in 0..b {
        let s: f64 = t.row(i).iter().sum();
        for v in &mut t.data_mut()[i * c..(i + 1) * c] {
            *v /= s;
        }
    }
    t
}

fn labels(b: usize, c: usize, rng: &mut seed::Rng) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..c)).collect()
}

/// Reduces a tensor-valued op to a scalar by a fixed random projection.
fn project(tape: &mut Tape<f64>, y: Var, rng: &mut seed::Rng) -> Result<Var> {
    let r = normal(tape.shape(y), rng);
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

type CaseFn = fn(&mut seed::Rng) -> Result<CheckReport>;

/// A named gradient check, run once per seed.
#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    run: CaseFn,
}

impl GradCase {
    pub fn run(&self, seed_value: u64) -> Result<CheckReport> {
        let tag = self.name.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
        (self.run)(&mut seed::rng(seed_value, &[tag]))
    }
}

/// Checks a tensor-valued op of the given inputs via a random projection.
fn projected(inputs: Vec<Tensor<f64>>, rng: &mut seed::Rng, op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<CheckReport> {
    let proj_seed: u64 = rng.random();
    check(&inputs, |t, v| {
        let y = op(t, v)?;
        project(t, y, &mut seed::rng(proj_seed, &[]))
    })
}

macro_rules! case {
    ($name:expr, |$rng:ident| $body:expr) => {
        GradCase {
            name: $name,
            run: |$rng: &mut seed::Rng| $body,
        }
    };
}

pub fn catalogue() -> Vec<GradCase> {
    vec![
        case!("matmul", |r| projected(vec![normal(&[3, 4], r), normal(&[4, 5], r)], r, |t, v| t.matmul(v[0], v[1]))),
        case!("matmul_batched", |r| projected(vec![normal(&[2, 3, 4], r), normal(&[2, 4, 5], r)], r, |t, v| t
            .matmul(v[0], v[1]))),
        case!("matmul_shared_rhs", |r| projected(vec![normal(&[2, 3, 4], r), normal(&[4, 2], r)], r, |t, v| t
            .matmul(v[0], v[1]))),
        case!("matmul_transposed", |r| projected(vec![normal(&[2, 3, 4], r), normal(&[2, 5, 4], r)], r, |t, v| t
            .matmul_t(v[0], v[1]))),
        case!("add", |r| projected(vec![normal(&[3, 4], r), normal(&[3, 4], r)], r, |t, v| t.add(v[0], v[1]))),
        case!("mul", |r| projected(vec![normal(&[3, 4], r), normal(&[3, 4], r)], r, |t, v| t.mul(v[0], v[1]))),
        case!("scale", |r| projected(vec![normal(&[3, 4], r)], r, |t, v| Ok(t.scale(v[0], -1.7)))),
        case!("add_broadcast", |r| projected(vec![normal(&[2, 3, 4], r), normal(&[4], r)], r, |t, v| t
            .add_broadcast(v[0], v[1]))),
        case!("add_broadcast_2d", |r| projected(vec![normal(&[2, 3, 4], r), normal(&[3, 4], r)], r, |t, v| t
            .add_broadcast(v[0], v[1]))),
        case!("relu", |r| projected(vec![away_from_zero(&[3, 5], 0.05, r)], r, |t, v| Ok(t.relu(v[0])))),
        case!("gelu", |r| projected(vec![normal(&[3, 5], r)], r, |t, v| Ok(t.gelu(v[0])))),
        case!("softmax", |r| projected(vec![normal(&[3, 5], r)], r, |t, v| t.softmax(v[0]))),
        case!("log_softmax", |r| projected(vec![normal(&[3, 5], r)], r, |t, v| t.log_softmax(v[0]))),
        case!("layer_norm", |r| projected(vec![normal(&[2, 3, 6], r), normal(&[6], r), normal(&[6], r)], r, |t, v| t
            .layer_norm(v[0], v[1], v[2], 1e-5))),
        case!("batch_norm2d_train", |r| projected(
            vec![normal(&[3, 2, 3, 3], r), normal(&[2], r), normal(&[2], r)],
            r,
            |t, v| Ok(t.batch_norm2d(v[0], v[1], v[2], BnMode::Train, 1e-5)?.0)
        )),
        case!("batch_norm2d_eval", |r| {
            let mean = normal(&[2], r).into_data();
            let var: Vec<f64> = normal(&[2], r).data().iter().map(|v| 0.5 + v.abs()).collect();
            projected(vec![normal(&[3, 2, 3, 3], r), normal(&[2], r), normal(&[2], r)], r, move |t, v| {
                Ok(t.batch_norm2d(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var }, 1e-5)?.0)
            })
        }),
        case!("l2_normalize_rows", |r| projected(vec![normal(&[3, 5], r)], r, |t, v| t.l2_normalize_rows(v[0]))),
        case!("conv2d_same", |r| projected(vec![normal(&[2, 2, 5, 5], r), normal(&[3, 2, 3, 3], r)], r, |t, v| t
            .conv2d(v[0], v[1], 1, 1))),
        case!("conv2d_strided", |r| projected(vec![normal(&[2, 2, 6, 6], r), normal(&[3, 2, 3, 3], r)], r, |t, v| t
            .conv2d(v[0], v[1], 2, 1))),
        case!("conv2d_pointwise", |r| projected(vec![normal(&[2, 3, 4, 4], r), normal(&[2, 3, 1, 1], r)], r, |t, v| t
            .conv2d(v[0], v[1], 2, 0))),
        case!("avg_pool", |r| projected(vec![normal(&[2, 3, 4, 4], r)], r, |t, v| t.avg_pool(v[0]))),
        case!("reshape", |r| projected(vec![normal(&[2, 3, 4], r)], r, |t, v| t.reshape(v[0], [6, 4]))),
        case!("permute", |r| projected(vec![normal(&[2, 3, 4], r)], r, |t, v| t.permute(v[0], &[2, 0, 1]))),
        case!("concat", |r| projected(vec![normal(&[2, 3, 2], r), normal(&[2, 1, 2], r)], r, |t, v| t
            .concat(&[v[0], v[1]], 1))),
        case!("narrow", |r| projected(vec![normal(&[2, 5, 3], r)], r, |t, v| t.narrow(v[0], 1, 1, 3))),
        case!("repeat_leading", |r| projected(vec![normal(&[3, 4], r)], r, |t, v| Ok(t.repeat_leading(v[0], 2)))),
        case!("sum", |r| check(&[normal(&[3, 4], r)], |t, v| Ok(t.sum(v[0])))),
        case!("mean", |r| check(&[normal(&[3, 4], r)], |t, v| Ok(t.mean(v[0])))),
        case!("cross_entropy", |r| {
            let targets = probs(4, 5, r);
            let w: Vec<f64> = (0..4).map(|_| r.random_range(0.1..2.0)).collect();
            check(&[normal(&[4, 5], r)], |t, v| t.cross_entropy(v[0], &targets, &w))
        }),
        case!("ce_smoothed", |r| {
            let y = labels(4, 5, r);
            check(&[normal(&[4, 5], r)], |t, v| ce_smoothed(t, v[0], &y, 0.1))
        }),
        case!("ce_soft", |r| {
            let targets = probs(4, 5, r);
            check(&[normal(&[4, 5], r)], |t, v| ce_soft(t, v[0], &targets))
        }),
        case!("drw_distill_loss", |r| {
            let y = labels(4, 5, r);
            let w: Vec<f64> = (0..5).map(|_| r.random_range(0.1..3.0)).collect();
            check(&[normal(&[4, 5], r)], |t, v| drw_distill_loss(t, v[0], &y, &w))
        }),
        case!("combined_deit_lt_loss", |r| {
            let targets = probs(4, 5, r);
            let y = labels(4, 5, r);
            let w: Vec<f64> = (0..5).map(|_| r.random_range(0.1..3.0)).collect();
            check(&[normal(&[4, 5], r), normal(&[4, 5], r)], |t, v| {
                Ok(combined_deit_lt_loss(t, v[0], v[1], &targets, &y, &w)?.total)
            })
        }),
        case!("ldam_loss", |r| {
            let y = labels(4, 5, r);
            let counts = [500, 200, 80, 30, 10];
            let w: Vec<f64> = (0..5).map(|_| r.random_range(0.1..3.0)).collect();
            let cosine = normal(&[4, 5], r).map(|v| v.tanh());
            check(&[cosine], |t, v| ldam_loss(t, v[0], &y, &counts, &LdamParams::default(), Some(&w)))
        }),
        case!("vit_forward", |r| {
            let cfg = VitConfig {
                image_size: 8,
                patch_size: 4,
                embed_dim: 8,
                depth: 1,
                n_heads: 2,
                mlp_ratio: 2,
                n_classes: 3,
            };
            let model = DualTokenVit::<f64>::new(cfg, r)?;
            let x = normal(&[2, 3, 8, 8], r);
            let targets = probs(2, 3, r);
            let y = labels(2, 3, r);
            let ids: Vec<usize> = (0..model.params.len()).collect();
            check_store(&model.params, &ids, |_, t, b| {
                let out = model.forward(t, b, &x, false)?;
                Ok(combined_deit_lt_loss(t, out.logits_cls, out.logits_dist, &targets, &y, &[1.0, 2.0, 0.5])?.total)
            })
        }),
        case!("teacher_stem", |r| {
            let cfg = TeacherConfig {
                blocks_per_stage: 1,
                widths: [2, 4, 4],
                n_classes: 3,
                logit_scale: 30.0,
                bn_momentum: 0.1,
            };
            let model = TeacherCnn::<f64>::new(cfg, r)?;
            let x = normal(&[2, 3, 8, 8], r);
            let y = labels(2, 3, r);
            check_store(&model.params, &[model.stem_id()], |s, t, b| {
                let out = model.forward_with(s, t, b, &x, true)?;
                ldam_loss(t, out.logits, &y, &[100, 30, 10], &LdamParams::default(), None)
            })
        }),
    ]
}

/// Runs every case for seeds `0..n_seeds`, returning the worst report per case.
pub fn run_suite(n_seeds: u64) -> Result<Vec<(&'static str, CheckReport)>> {
    catalogue()
        .iter()
        .map(|c| {
            let mut acc = CheckReport { worst: 0.0, checked: 0 };
            for s in 0..n_seeds {
                acc = acc.merge(c.run(s)?);
            }
            Ok((c.name, acc))
        })
        .collect()
}
