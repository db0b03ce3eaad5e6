//! Acceptance suite: one status line per criterion.
//!
//! Runs without the libtest harness so every line reaches the output of a
//! plain `cargo test`. Exits nonzero when any criterion fails. A criterion
//! that cannot run in this environment is reported as BLOCKED with the
//! reason, never as PASS.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;

use tdlt::config::TrainConfig;
use tdlt::data::{load_cifar10, smooth_one_hot};
use tdlt::diagnostics::{attention_rollout, entropy_report, feature_rank, mean_attention_distance, prediction_entropy};
use tdlt::distill::{
    evaluate_student, load_student_state, save_student_state, train_student, train_teacher, CheckpointMeta, ModelSpec,
    StudentState, Workspace,
};
use tdlt::gradcheck::{run_suite, REL_TOL};
use tdlt::losses::{combined_deit_lt_loss, DrwSchedule};
use tdlt::models::{AttentionRecord, ParamKind, ParamStore, TeacherCnn, TeacherConfig};
use tdlt::optim::{sam_step, Optimizer, Sgd};
use tdlt::seed;
use tdlt::{Tape, Tensor};

enum Status {
    Pass(String),
    Fail(String),
    Blocked(String),
}

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_tdlt")
}

fn tdlt(args: &[&str], data: &Path, out: &Path) -> std::process::Output {
    Command::new(bin())
        .args(args)
        .env("TDLT_DATA_DIR", data)
        .env("TDLT_OUT_DIR", out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

const GRAD_SEEDS: u64 = 20;
const GRAD_BUDGET_S: f64 = 120.0;

fn criterion_1() -> Check {
    let t0 = Instant::now();
    let results = run_suite(GRAD_SEEDS).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let worst = results.iter().map(|(_, r)| r.worst).fold(0.0, f64::max);
    let failing: Vec<String> = results
        .iter()
        .filter(|(_, r)| !r.passed())
        .map(|(n, r)| format!("{n} ({:.2e})", r.worst))
        .collect();
    ensure(failing.is_empty(), || format!("over tolerance {REL_TOL:e}: {}", failing.join(", ")))?;
    ensure(secs < GRAD_BUDGET_S, || format!("took {secs:.1}s, budget {GRAD_BUDGET_S}s"))?;
    Ok(format!(
        "{} cases x {GRAD_SEEDS} seeds, worst relative error {worst:.2e} <= {REL_TOL:e}, {secs:.1}s < {GRAD_BUDGET_S}s",
        results.len()
    ))
}

// ---------------------------------------------------------------------------
// 2. Dataset reproduction

/// Largest `n` with `n ≤ 5000 · ρ^(−i/9)`, in exact integers. With
/// `5000 = a · b` and `ρ = a`, the bound is `n⁹ ≤ a^(9−i) · b⁹`.
fn floor_count_exact(i: u32, rho: u128, other: u128) -> usize {
    let bound = rho.pow(9 - i) * other.pow(9);
    let mut n: u128 = 0;
    while (n + 1).pow(9) <= bound {
        n += 1;
    }
    n as usize
}

fn manifest_counts(csv: &Path) -> Vec<usize> {
    let text = std::fs::read_to_string(csv).expect("dataset csv");
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("class_index,count,group"));
    lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect()
}

fn criterion_2() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("cifar");
    let synth = Command::new(bin())
        .args(["dataset", "synth", "--dir", data.to_str().unwrap(), "--per-class", "5000", "--test-per-class", "10"])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(synth.status.success(), || String::from_utf8_lossy(&synth.stderr).into_owned())?;

    let out100 = dir.path().join("rho100");
    let run = tdlt(&["dataset", "build", "--rho", "100", "--n-max", "5000"], &data, &out100);
    ensure(run.status.success(), || String::from_utf8_lossy(&run.stderr).into_owned())?;
    let stdout = String::from_utf8_lossy(&run.stdout);
    ensure(stdout.contains("training images: 12406"), || format!("stdout was {stdout:?}"))?;
    let c100 = manifest_counts(&out100.join("dataset.csv"));
    ensure(c100.iter().sum::<usize>() == 12406, || format!("sum {}", c100.iter().sum::<usize>()))?;
    ensure(c100[0] == 5000 && c100[9] == 50, || format!("N_0 = {}, N_9 = {}", c100[0], c100[9]))?;
    let oracle100: Vec<usize> = (0..10).map(|i| floor_count_exact(i, 100, 50)).collect();
    ensure(c100 == oracle100, || format!("rho=100 counts {c100:?} vs oracle {oracle100:?}"))?;

    let out50 = dir.path().join("rho50");
    let run = tdlt(&["dataset", "build", "--rho", "50", "--n-max", "5000"], &data, &out50);
    ensure(run.status.success(), || String::from_utf8_lossy(&run.stderr).into_owned())?;
    let c50 = manifest_counts(&out50.join("dataset.csv"));
    let oracle50: Vec<usize> = (0..10).map(|i| floor_count_exact(i, 50, 100)).collect();
    ensure(c50 == oracle50, || format!("rho=50 counts {c50:?} vs oracle {oracle50:?}"))?;
    Ok(format!(
        "rho=100 gives {} images (N_0=5000, N_9=50); rho=50 counts {c50:?} match the exact-integer oracle; \
         source images are a synthetic CIFAR-layout fixture",
        c100.iter().sum::<usize>()
    ))
}

// ---------------------------------------------------------------------------
// 3. DRW correctness

/// Effective number by direct summation of the geometric series.
fn effective_number_by_sum(n: usize, beta: f64) -> f64 {
    let mut s = 0.0;
    let mut p = 1.0;
    for _ in 0..n {
        s += p;
        p *= beta;
    }
    s
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn criterion_3() -> Check {
    let mut rng = seed::rng(3, &[]);
    let mut worst_w: f64 = 0.0;
    for inst in 0..200 {
        let c = rng.random_range(2..12);
        let counts: Vec<usize> = (0..c).map(|_| rng.random_range(1..6000)).collect();
        let beta = rng.random_range(0.5..0.99999);
        let k = rng.random_range(0..50);
        let s = DrwSchedule::new(beta, k, counts.clone(), false).map_err(|e| e.to_string())?;
        for e in 0..k {
            ensure(s.weights(e).iter().all(|&w| w == 1.0), || format!("instance {inst}: epoch {e} < K not unit"))?;
        }
        for beta in [0.9999, 0.99] {
            let s = DrwSchedule::new(beta, k, counts.clone(), false).map_err(|e| e.to_string())?;
            for e in [k, k + 1, k + 37] {
                for (y, &w) in s.weights(e).iter().enumerate() {
                    let oracle = 1.0 / effective_number_by_sum(counts[y], beta);
                    let err = (w - oracle).abs() / oracle;
                    worst_w = worst_w.max(err);
                    ensure(err <= 1e-9, || format!("beta {beta}, N={}: {w} vs {oracle}", counts[y]))?;
                }
            }
        }
    }

    let mut worst_l: f64 = 0.0;
    for _ in 0..100 {
        let (b, c) = (rng.random_range(1..9), rng.random_range(2..11));
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let zc: Vec<f64> = (0..b * c).map(|_| rng.random_range(-4.0..4.0)).collect();
        let zd: Vec<f64> = (0..b * c).map(|_| rng.random_range(-4.0..4.0)).collect();
        let eps = 0.1;
        let soft: Vec<f64> = labels.iter().flat_map(|&y| smooth_one_hot(y, c, eps)).collect();
        let mut tape = Tape::<f64>::new();
        let vc = tape.constant(Tensor::new([b, c], zc.clone()).unwrap());
        let vd = tape.constant(Tensor::new([b, c], zd.clone()).unwrap());
        let targets = Tensor::new([b, c], soft.clone()).unwrap();
        // The oracle teacher labels every image with its ground truth.
        let parts = combined_deit_lt_loss(&mut tape, vc, vd, &targets, &labels, &vec![1.0; c]).map_err(|e| e.to_string())?;
        let got = tape.value(parts.total).item();
        let mut cls = 0.0;
        let mut dist = 0.0;
        for i in 0..b {
            let lc = log_softmax(&zc[i * c..(i + 1) * c]);
            let ld = log_softmax(&zd[i * c..(i + 1) * c]);
            for j in 0..c {
                let t = if j == labels[i] { 1.0 - eps } else { eps / (c - 1) as f64 };
                cls -= t * lc[j];
            }
            dist -= ld[labels[i]];
        }
        let oracle = 0.5 * cls / b as f64 + 0.5 * dist / b as f64;
        worst_l = worst_l.max((got - oracle).abs());
        ensure((got - oracle).abs() <= 1e-6, || format!("loss {got} vs {oracle}"))?;
    }
    Ok(format!(
        "200 random schedules unit before K; weights vs summed-series oracle worst rel {worst_w:.1e} <= 1e-9; \
         oracle-teacher loss worst abs {worst_l:.1e} <= 1e-6"
    ))
}

// ---------------------------------------------------------------------------
// 4. Diagnostic oracles

const DIAG_INSTANCES: usize = 60;
const DIAG_TOL: f64 = 1e-6;
const DIAG_BUDGET_S: f64 = 60.0;

fn random_stochastic(rng: &mut seed::Rng, t: usize) -> Vec<f64> {
    let mut a: Vec<f64> = (0..t * t).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
    for r in 0..t {
        let s: f64 = a[r * t..(r + 1) * t].iter().sum();
        a[r * t..(r + 1) * t].iter_mut().for_each(|v| *v /= s);
    }
    a
}

fn random_record(rng: &mut seed::Rng, blocks: usize, b: usize, heads: usize, t: usize) -> AttentionRecord {
    AttentionRecord {
        blocks: (0..blocks)
            .map(|_| {
                let data: Vec<f64> = (0..b * heads).flat_map(|_| random_stochastic(rng, t)).collect();
                Tensor::new([b, heads, t, t], data).unwrap()
            })
            .collect(),
    }
}

/// Euclidean distance between patch centres from explicit pixel coordinates.
fn brute_attention_distance(rec: &AttentionRecord, patch: usize, image: usize, prefix: usize) -> Vec<Vec<f64>> {
    let g = image / patch;
    let centre = |i: usize| (((i % g) * patch) as f64 + patch as f64 / 2.0, ((i / g) * patch) as f64 + patch as f64 / 2.0);
    rec.blocks
        .iter()
        .map(|blk| {
            let s = blk.shape();
            let (b, heads, t) = (s[0], s[1], s[2]);
            (0..heads)
                .map(|h| {
                    let mut per_image = 0.0;
                    for img in 0..b {
                        let mut sum = 0.0;
                        for q in 0..g * g {
                            for k in 0..g * g {
                                let (qx, qy) = centre(q);
                                let (kx, ky) = centre(k);
                                let w = blk.data()[((img * heads + h) * t + q + prefix) * t + k + prefix];
                                sum += w * ((qx - kx).powi(2) + (qy - ky).powi(2)).sqrt();
                            }
                        }
                        per_image += sum / (g * g) as f64;
                    }
                    per_image / b as f64
                })
                .collect()
        })
        .collect()
}

/// Rollout by explicit recursion `R ← Ã · R` with `Ã = (½A + ½I)` row-normalized.
fn brute_rollout(rec: &AttentionRecord, image: usize) -> Vec<f64> {
    let t = rec.blocks[0].shape()[2];
    let heads = rec.blocks[0].shape()[1];
    let mut r = vec![0.0; t * t];
    for i in 0..t {
        r[i * t + i] = 1.0;
    }
    for blk in &rec.blocks {
        let mut a = vec![0.0; t * t];
        for h in 0..heads {
            for i in 0..t * t {
                a[i] += blk.data()[(image * heads + h) * t * t + i] / heads as f64;
            }
        }
        for i in 0..t {
            for j in 0..t {
                a[i * t + j] = 0.5 * a[i * t + j] + if i == j { 0.5 } else { 0.0 };
            }
            let s: f64 = a[i * t..(i + 1) * t].iter().sum();
            for j in 0..t {
                a[i * t + j] /= s;
            }
        }
        let mut next = vec![0.0; t * t];
        for i in 0..t {
            for j in 0..t {
                for k in 0..t {
                    next[i * t + j] += a[i * t + k] * r[k * t + j];
                }
            }
        }
        r = next;
    }
    r
}

/// Smallest `k` whose top-`k` principal directions of the centred `F_all`
/// reconstruct `F_min` within `tol` relative squared error.
fn brute_rank(f_all: &DMatrix<f64>, f_min: &DMatrix<f64>, tol: f64) -> Option<usize> {
    let mean = f_all.row_mean();
    let mut centred = f_all.clone();
    for mut row in centred.row_iter_mut() {
        row -= &mean;
    }
    let svd = centred.svd(false, true);
    let v_t = svd.v_t.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].partial_cmp(&svd.singular_values[a]).unwrap());
    let total = f_min.norm_squared();
    for k in 0..=order.len() {
        let mut recon = DMatrix::<f64>::zeros(f_min.nrows(), f_min.ncols());
        for &j in &order[..k] {
            let v = v_t.row(j).transpose();
            recon += (f_min * &v) * v.transpose();
        }
        if (f_min - recon).norm_squared() / total <= tol {
            return Some(k);
        }
    }
    None
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor<f64> {
    Tensor::from_fn([m.nrows(), m.ncols()], |i| m[(i / m.ncols(), i % m.ncols())])
}

fn criterion_4() -> Check {
    let t0 = Instant::now();
    let mut rng = seed::rng(4, &[]);
    let mut worst: f64 = 0.0;
    let (mut rank_hits, mut exhausted) = (0, 0);
    for inst in 0..DIAG_INSTANCES {
        let patch = [2, 4, 8][inst % 3];
        let image = patch * rng.random_range(2..5);
        let g = image / patch;
        let t = g * g + 2;
        let (blocks, b, heads) = (rng.random_range(1..4), rng.random_range(1..3), rng.random_range(1..4));
        let rec = random_record(&mut rng, blocks, b, heads, t);

        let got = mean_attention_distance(&rec, patch, image, 2).map_err(|e| e.to_string())?;
        let want = brute_attention_distance(&rec, patch, image, 2);
        for (gb, wb) in got.per_block.iter().zip(&want) {
            for (x, y) in gb.iter().zip(wb) {
                worst = worst.max((x - y).abs());
            }
        }

        let target = inst % 2;
        let roll = attention_rollout(&rec, 0, target, 2).map_err(|e| e.to_string())?;
        let want = brute_rollout(&rec, 0);
        for (x, y) in roll.matrix.data().iter().zip(&want) {
            worst = worst.max((x - y).abs());
        }
        for (x, y) in roll.saliency.data().iter().zip(&want[target * t + 2..(target + 1) * t]) {
            worst = worst.max((x - y).abs());
        }

        let (n, d) = (rng.random_range(12..40), rng.random_range(3..10));
        let latent = rng.random_range(1..d + 1);
        let basis = DMatrix::<f64>::from_fn(latent, d, |_, _| rng.random_range(-1.0..1.0));
        let coeff = DMatrix::<f64>::from_fn(n, latent, |_, _| rng.random_range(-2.0..2.0));
        let noise = DMatrix::<f64>::from_fn(n, d, |_, _| rng.random_range(-0.05..0.05));
        let f_all = coeff * basis + noise;
        let m = rng.random_range(2..n / 2);
        let f_min = f_all.rows(n - m, m).into_owned();
        let got = feature_rank(&to_tensor(&f_all), &to_tensor(&f_min), 0.01).map_err(|e| e.to_string())?;
        let want = brute_rank(&f_all, &f_min, 0.01);
        match want {
            Some(k) => ensure(!got.exhausted && got.k == k, || format!("rank {} vs oracle {k}", got.k))?,
            None => {
                exhausted += 1;
                ensure(got.exhausted, || format!("rank {} but the oracle never reaches tolerance", got.k))?
            }
        }
        rank_hits += 1;

        let c = rng.random_range(2..12);
        let rows = rng.random_range(1..8);
        let mut p: Vec<f64> = (0..rows * c).map(|_| rng.random_range(0.0..1.0)).collect();
        if inst % 5 == 0 {
            p[0] = 0.0;
        }
        for r in 0..rows {
            let s: f64 = p[r * c..(r + 1) * c].iter().sum();
            p[r * c..(r + 1) * c].iter_mut().for_each(|v| *v /= s);
        }
        let h = prediction_entropy(&Tensor::new([rows, c], p.clone()).unwrap()).map_err(|e| e.to_string())?;
        for (r, &hr) in h.iter().enumerate() {
            let mut want = 0.0;
            for &q in &p[r * c..(r + 1) * c] {
                if q > 0.0 {
                    want += q * (1.0 / q).ln();
                }
            }
            worst = worst.max((hr - want).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(worst <= DIAG_TOL, || format!("worst abs deviation {worst:.2e} > {DIAG_TOL:e}"))?;
    ensure(secs < DIAG_BUDGET_S, || format!("took {secs:.1}s, budget {DIAG_BUDGET_S}s"))?;
    Ok(format!(
        "{DIAG_INSTANCES} instances each of distance, rollout, rank, entropy; worst abs {worst:.1e} <= {DIAG_TOL:e}; \
         rank k exact on {rank_hits}/{DIAG_INSTANCES} ({exhausted} exhausted on both sides); {secs:.1}s < {DIAG_BUDGET_S}s"
    ))
}

// ---------------------------------------------------------------------------
// 5. SAM contract

fn tiny_teacher() -> TeacherConfig {
    TeacherConfig {
        blocks_per_stage: 1,
        widths: [4, 8, 8],
        n_classes: 5,
        logit_scale: 30.0,
        bn_momentum: 0.1,
    }
}

fn criterion_5() -> Check {
    let mut rng = seed::rng(5, &[]);
    let mut worst_norm: f64 = 0.0;
    for trial in 0..20 {
        let mut store = ParamStore::<f64>::new();
        let dims = rng.random_range(1..6);
        for i in 0..dims {
            let n = rng.random_range(1..8);
            store.push(format!("p{i}"), Tensor::from_fn([n], |_| rng.random_range(-2.0..2.0)), ParamKind::Weight);
        }
        let target: Vec<Vec<f64>> = store.entries().iter().map(|e| e.value.data().iter().map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let rho = rng.random_range(0.001..0.5);
        let mut opt = Sgd::<f64>::new(0.9, 0.0);
        let out = sam_step(&mut store, &mut opt, 0.1, rho, |p| {
            let mut loss = 0.0;
            let mut grads = Vec::new();
            for (e, t) in p.entries().iter().zip(&target) {
                let g: Vec<f64> = e.value.data().iter().zip(t).map(|(w, t)| (w - t).powi(3)).collect();
                loss += e.value.data().iter().zip(t).map(|(w, t)| (w - t).powi(4) / 4.0).sum::<f64>();
                grads.push(Some(Tensor::new([g.len()], g).unwrap()));
            }
            Ok((loss, grads, ()))
        })
        .map_err(|e| e.to_string())?;
        let err = (out.perturbation_norm - rho).abs() / rho;
        worst_norm = worst_norm.max(err);
        ensure(err <= 1e-9, || format!("trial {trial}: norm {} vs rho {rho}", out.perturbation_norm))?;
    }

    let base = TeacherCnn::<f32>::new(tiny_teacher(), &mut seed::rng(50, &[])).map_err(|e| e.to_string())?;
    let x = Tensor::<f32>::from_fn([4, 3, 8, 8], |_| rng.random_range(-1.0..1.0));
    let y: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
    let loss_grads = |m: &TeacherCnn<f32>, p: &ParamStore<f32>| -> tdlt::Result<(f64, Vec<Option<Tensor<f32>>>, ())> {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let out = m.forward_with(p, &mut tape, &b, &x, true)?;
        let l = tdlt::losses::ldam_loss(&mut tape, out.logits, &y, &[50, 20, 10, 5, 2], &Default::default(), None)?;
        let v = tape.value(l).item() as f64;
        tape.backward(l)?;
        Ok((v, p.grads(&tape, &b), ()))
    };
    let mut with_sam = base.clone();
    let mut plain = base.clone();
    let mut o1 = Sgd::<f32>::new(0.9, 5e-4);
    let mut o2 = Sgd::<f32>::new(0.9, 5e-4);
    for step in 0..10 {
        let mut p1 = std::mem::take(&mut with_sam.params);
        sam_step(&mut p1, &mut o1, 0.05, 0.0, |p| loss_grads(&with_sam, p)).map_err(|e| e.to_string())?;
        with_sam.params = p1;
        let (_, g, _) = loss_grads(&plain, &plain.params).map_err(|e| e.to_string())?;
        o2.step(&mut plain.params, &g, 0.05).map_err(|e| e.to_string())?;
        let same = with_sam
            .params
            .entries()
            .iter()
            .zip(plain.params.entries())
            .all(|(a, b)| a.value.data().iter().zip(b.value.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        ensure(same, || format!("trajectories diverge at step {step}"))?;
    }
    Ok(format!(
        "perturbation norm matches rho within {worst_norm:.1e} relative over 20 trials; rho=0 is bit-identical to plain SGD over 10 steps"
    ))
}

// ---------------------------------------------------------------------------
// 6. Trend reproduction at desk scale

const TREND_SEEDS: [u64; 3] = [0, 1, 2];

fn criterion_6() -> Status {
    let data = std::env::var_os("TDLT_DATA_DIR").map(PathBuf::from);
    let Some(data) = data.filter(|d| d.join("data_batch_1.bin").exists()) else {
        return Status::Blocked(
            "needs the CIFAR-10 binary batches in TDLT_DATA_DIR (not available offline here); \
             run with TDLT_RUN_TRENDS=1 once present"
                .into(),
        );
    };
    if std::env::var("TDLT_RUN_TRENDS").as_deref() != Ok("1") {
        return Status::Blocked("CIFAR-10 found; set TDLT_RUN_TRENDS=1 to spend the multi-hour budget".into());
    }
    match catch_unwind(AssertUnwindSafe(|| trend_protocol(&data))) {
        Ok(Ok(msg)) => Status::Pass(msg),
        Ok(Err(msg)) => Status::Fail(msg),
        Err(p) => Status::Fail(panic_text(p)),
    }
}

fn trend_protocol(data: &Path) -> Check {
    let raw = load_cifar10(data).map_err(|e| e.to_string())?;
    let desk = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let (mut a, mut b, mut c, mut d, mut e) = (0, 0, 0, 0, 0);
    let mut notes = Vec::new();
    for s in TREND_SEEDS {
        let cfg = TrainConfig::load(Some(&desk), &[("seed".into(), s.to_string())]).map_err(|e| e.to_string())?;
        let ws = Workspace::prepare(&cfg, &raw).map_err(|e| e.to_string())?;
        let teacher = train_teacher(&cfg, &ws, &mut |_, _| Ok(())).map_err(|e| e.to_string())?;
        let mut cos = Vec::new();
        let mut state = StudentState::new(&cfg, &ws.seeds).map_err(|e| e.to_string())?;
        train_student(&cfg, &ws, &teacher, &mut state, cfg.epochs, &mut |_, m| {
            cos.push(m.eval.cosine_cls_dist);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
        let r = evaluate_student(&state.student, &ws.eval, &ws.norm, &ws.ds.groups).map_err(|e| e.to_string())?;
        a += (r.dist.tail > r.cls.tail && r.cls.head > r.dist.head) as usize;
        b += (r.averaged.overall >= r.cls.overall.max(r.dist.overall) - 0.02) as usize;
        c += (cos.last() > cos.first()) as usize;
        let ent = entropy_report(
            &teacher,
            &ws.eval.images,
            &ws.eval.labels,
            &ws.norm,
            &cfg.augment.strong,
            &cfg.augment.mix,
            1000,
            seed::derive(ws.seeds.augment, &[9]),
        )
        .map_err(|e| e.to_string())?;
        d += (ent.ood_mean > ent.in_dist_mean) as usize;
        let mut off = cfg.clone();
        off.toggles.ood_distill = false;
        let mut st_off = StudentState::new(&off, &ws.seeds).map_err(|e| e.to_string())?;
        train_student(&off, &ws, &teacher, &mut st_off, off.epochs, &mut |_, _| Ok(())).map_err(|e| e.to_string())?;
        let r_off = evaluate_student(&st_off.student, &ws.eval, &ws.norm, &ws.ds.groups).map_err(|e| e.to_string())?;
        e += (r.averaged.tail > r_off.averaged.tail) as usize;
        notes.push(format!(
            "seed {s}: tail cls {:.3} dist {:.3}, head cls {:.3} dist {:.3}",
            r.cls.tail, r.dist.tail, r.cls.head, r.dist.head
        ));
    }
    let n = TREND_SEEDS.len();
    let summary = format!("(a) {a}/{n} (b) {b}/{n} (c) {c}/{n} (d) {d}/{n} (e) {e}/{n}; {}", notes.join("; "));
    ensure(a * 3 >= 2 * n && b == n && c == n && d == n && e * 3 >= 2 * n, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 7. Determinism and persistence

fn criterion_7() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    let synth = Command::new(bin())
        .args(["dataset", "synth", "--dir", data.to_str().unwrap(), "--per-class", "16", "--test-per-class", "4"])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(synth.status.success(), || String::from_utf8_lossy(&synth.stderr).into_owned())?;
    let cfg = fixture("toy.toml");
    let cfg = cfg.to_str().unwrap();
    let run = |args: &[&str], out: &Path| -> std::result::Result<(), String> {
        let mut full = vec!["--config", cfg];
        full.extend_from_slice(args);
        let o = tdlt(&full, &data, out);
        ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())
    };
    let t = dir.path().join("teacher");
    run(&["train-teacher"], &t)?;
    let teacher = t.join("teacher.ckpt");
    let teacher = teacher.to_str().unwrap();
    let (r1, r2, r3) = (dir.path().join("r1"), dir.path().join("r2"), dir.path().join("r3"));
    run(&["train-student", "--teacher", teacher], &r1)?;
    run(&["train-student", "--teacher", teacher], &r2)?;
    let m1 = std::fs::read(r1.join("student_metrics.csv")).map_err(|e| e.to_string())?;
    let m2 = std::fs::read(r2.join("student_metrics.csv")).map_err(|e| e.to_string())?;
    ensure(m1 == m2, || "repeated seeded runs wrote different metrics".into())?;
    let rows = String::from_utf8_lossy(&m1).lines().count() - 1;

    run(&["train-student", "--teacher", teacher, "--stop-after", "1"], &r3)?;
    let partial = r3.join("student.ckpt");
    run(&["train-student", "--teacher", teacher, "--resume", partial.to_str().unwrap()], &r3)?;
    let m3 = std::fs::read(r3.join("student_metrics.csv")).map_err(|e| e.to_string())?;
    ensure(m1 == m3, || "resumed run wrote different metrics".into())?;
    let c1 = std::fs::read(r1.join("student.ckpt")).map_err(|e| e.to_string())?;
    let c3 = std::fs::read(r3.join("student.ckpt")).map_err(|e| e.to_string())?;
    ensure(c1 == c3, || "resumed run ended with a different checkpoint".into())?;

    let ck = r1.join("student.ckpt");
    let (state, meta) = load_student_state(&ck, 0.05).map_err(|e| e.to_string())?;
    let again = dir.path().join("again.ckpt");
    save_student_state(&again, &state, &meta).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&again).map_err(|e| e.to_string())?;
    ensure(bytes == c1, || "checkpoint save/load/save is not byte-identical".into())?;
    let meta2: CheckpointMeta = tdlt::distill::read_meta(&again).map_err(|e| e.to_string())?;
    ensure(meta2 == meta && matches!(meta.model, ModelSpec::Student(_)), || "sidecar changed".into())?;
    Ok(format!(
        "two seeded runs and an interrupted+resumed run wrote identical {rows}-row metrics and checkpoints; \
         checkpoint reload/resave is byte-identical"
    ))
}

// ---------------------------------------------------------------------------

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

fn guarded(f: fn() -> Check) -> Status {
    match catch_unwind(f) {
        Ok(Ok(msg)) => Status::Pass(msg),
        Ok(Err(msg)) => Status::Fail(msg),
        Err(p) => Status::Fail(panic_text(p)),
    }
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(u8, &str, Box<dyn Fn() -> Status>); 7] = [
        (1, "gradient suite", Box::new(|| guarded(criterion_1))),
        (2, "dataset reproduction", Box::new(|| guarded(criterion_2))),
        (3, "DRW correctness", Box::new(|| guarded(criterion_3))),
        (4, "diagnostic oracles", Box::new(|| guarded(criterion_4))),
        (5, "SAM contract", Box::new(|| guarded(criterion_5))),
        (6, "desk-scale trend reproduction", Box::new(criterion_6)),
        (7, "determinism and persistence", Box::new(|| guarded(criterion_7))),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria.iter() {
        let label = format!("criterion {id} ({name})");
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let status = run();
        let secs = t0.elapsed().as_secs_f64();
        match status {
            Status::Pass(m) => println!("ACCEPTANCE {label}: PASS [{secs:.1}s] {m}"),
            Status::Fail(m) => {
                failed += 1;
                println!("ACCEPTANCE {label}: FAIL [{secs:.1}s] {m}");
            }
            Status::Blocked(m) => println!("ACCEPTANCE {label}: BLOCKED {m}"),
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
