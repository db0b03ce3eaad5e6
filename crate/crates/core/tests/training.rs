//! End-to-end behaviour of the training loops on tiny synthetic data.

use tdlt::config::TrainConfig;
use tdlt::data::synth::{generate, SynthSpec};
use tdlt::data::RawDataset;
use tdlt::distill::{
    crt_retrain, distill_step, load_student_state, save_student_state, train_student, train_teacher,
    CheckpointMeta, DistillBatch, EpochMetrics, ModelSpec, StudentState, Workspace,
};
use tdlt::losses::DrwSchedule;
use tdlt::models::{DualTokenVit, TeacherCnn};

fn raw(n_classes: usize, per_class: usize) -> RawDataset {
    generate(&SynthSpec {
        n_classes,
        train_per_class: per_class,
        test_per_class: 4,
        noise: 12.0,
        seed: 5,
    })
}

fn tiny(n_classes: usize) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.seed = 11;
    c.epochs = 3;
    c.batch_size = 16;
    c.dataset.n_max = 16;
    c.dataset.rho = 8.0;
    c.dataset.kind = if n_classes == 10 { "cifar10".into() } else { "counts".into() };
    c.student.embed_dim = 16;
    c.student.depth = 1;
    c.student.n_heads = 2;
    c.student.patch_size = 8;
    c.student.mlp_ratio = 2;
    c.student.n_classes = n_classes;
    c.teacher.blocks_per_stage = 1;
    c.teacher.widths = [4, 8, 8];
    c.teacher.n_classes = n_classes;
    c.teacher_train.epochs = 2;
    c.teacher_train.batch_size = 16;
    c.teacher_train.warmup_epochs = 0;
    c.optim.warmup_epochs = 1;
    c.crt.epochs = 1;
    c.crt.batch_size = 16;
    c
}

fn setup(cfg: &TrainConfig) -> Workspace {
    Workspace::prepare(cfg, &raw(cfg.student.n_classes, cfg.dataset.n_max)).unwrap()
}

fn teacher_for(cfg: &TrainConfig, ws: &Workspace) -> TeacherCnn<f32> {
    train_teacher(cfg, ws, &mut |_, _| Ok(())).unwrap()
}

fn run_student(cfg: &TrainConfig, ws: &Workspace, teacher: &TeacherCnn<f32>) -> (StudentState, Vec<String>) {
    let mut state = StudentState::new(cfg, &ws.seeds).unwrap();
    let mut rows = Vec::new();
    train_student(cfg, ws, teacher, &mut state, cfg.epochs, &mut |_, m: &EpochMetrics| {
        rows.push(m.to_csv_row());
        Ok(())
    })
    .unwrap();
    (state, rows)
}

fn params_equal(a: &DualTokenVit<f32>, b: &DualTokenVit<f32>) -> bool {
    a.params.entries().iter().zip(b.params.entries()).all(|(x, y)| x.value == y.value)
}

#[test]
fn sam_toggle_off_matches_zero_radius() {
    let mut off = tiny(10);
    off.toggles.sam_teacher = false;
    let mut zero = off.clone();
    zero.toggles.sam_teacher = true;
    zero.teacher_train.rho_sam = 0.0;
    let ws = setup(&off);
    let a = teacher_for(&off, &ws);
    let b = teacher_for(&zero, &ws);
    assert_eq!(a.params, b.params);
    let c = teacher_for(&tiny(10), &ws);
    assert_ne!(a.params, c.params, "a nonzero radius must change the trajectory");
}

#[test]
fn teacher_fits_two_separable_classes() {
    let mut cfg = tiny(2);
    cfg.dataset.rho = 1.0;
    cfg.dataset.n_max = 8;
    cfg.teacher_train.epochs = 50;
    cfg.teacher_train.lr = 0.05;
    cfg.teacher_train.rho_sam = 0.0;
    let ws = Workspace::prepare(&cfg, &raw(2, 8)).unwrap();
    let mut last = None;
    train_teacher(&cfg, &ws, &mut |_, row| {
        last = Some(*row);
        Ok(())
    })
    .unwrap();
    assert_eq!(last.unwrap().train_acc, 1.0);
}

#[test]
fn student_run_is_deterministic_and_leaves_teacher_untouched() {
    let cfg = tiny(10);
    let ws = setup(&cfg);
    let teacher = teacher_for(&cfg, &ws);
    let before = teacher.params.digest(|_| true);
    let (s1, r1) = run_student(&cfg, &ws, &teacher);
    assert_eq!(teacher.params.digest(|_| true), before);
    let (s2, r2) = run_student(&cfg, &ws, &teacher);
    assert_eq!(r1, r2);
    assert_eq!(r1.len(), cfg.epochs);
    assert!(params_equal(&s1.student, &s2.student));
    for row in &r1 {
        let cols: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        for &acc in &cols[4..10] {
            assert!((0.0..=1.0).contains(&acc), "{row}");
        }
    }
}

#[test]
fn zero_epochs_keeps_initialization() {
    let mut cfg = tiny(10);
    cfg.epochs = 0;
    cfg.drw_epoch = Some(0);
    let ws = setup(&cfg);
    let teacher = TeacherCnn::new(cfg.teacher.clone(), &mut tdlt::seed::rng(0, &[])).unwrap();
    let (state, rows) = run_student(&cfg, &ws, &teacher);
    assert!(rows.is_empty());
    let init = StudentState::new(&cfg, &ws.seeds).unwrap();
    assert!(params_equal(&state.student, &init.student));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let cfg = tiny(10);
    let ws = setup(&cfg);
    let teacher = teacher_for(&cfg, &ws);
    let (full, full_rows) = run_student(&cfg, &ws, &teacher);

    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("s.ckpt");
    let mut state = StudentState::new(&cfg, &ws.seeds).unwrap();
    let mut rows = Vec::new();
    train_student(&cfg, &ws, &teacher, &mut state, 1, &mut |_, m| {
        rows.push(m.to_csv_row());
        Ok(())
    })
    .unwrap();
    let meta = CheckpointMeta {
        model: ModelSpec::Student(cfg.student.clone()),
        normalizer: ws.norm,
        split: ws.descriptor(),
        epochs_done: state.epochs_done,
        config: cfg.to_toml_string().unwrap(),
    };
    save_student_state(&ck, &state, &meta).unwrap();
    drop(state);
    let (mut resumed, _) = load_student_state(&ck, cfg.optim.weight_decay).unwrap();
    assert_eq!(resumed.epochs_done, 1);
    train_student(&cfg, &ws, &teacher, &mut resumed, cfg.epochs, &mut |_, m| {
        rows.push(m.to_csv_row());
        Ok(())
    })
    .unwrap();
    assert_eq!(rows, full_rows);
    assert!(params_equal(&resumed.student, &full.student));
}

#[test]
fn drw_toggle_is_inert_before_reweighting_starts() {
    let mut on = tiny(10);
    on.drw_epoch = Some(on.epochs);
    let mut off = on.clone();
    off.toggles.drw = false;
    let ws = setup(&on);
    let teacher = teacher_for(&on, &ws);
    let (_, a) = run_student(&on, &ws, &teacher);
    let (_, b) = run_student(&off, &ws, &teacher);
    assert_eq!(a, b);
}

#[test]
fn ood_toggle_changes_only_teacher_view() {
    let mut on = tiny(10);
    on.epochs = 1;
    on.drw_epoch = Some(1);
    let mut off = on.clone();
    off.toggles.ood_distill = false;
    let ws = setup(&on);
    let teacher = teacher_for(&on, &ws);
    let drw = DrwSchedule::new(0.9999, 1, ws.ds.class_counts.clone(), false).unwrap();
    let idx: Vec<usize> = (0..16).collect();
    let step = |cfg: &TrainConfig| {
        let mut st = StudentState::new(cfg, &ws.seeds).unwrap();
        let batch = DistillBatch {
            split: &ws.ds.train,
            indices: &idx,
            epoch: 0,
            step: 0,
            lr: 1e-3,
        };
        distill_step(cfg, &ws.seeds, &ws.norm, &drw, &teacher, &mut st, batch).unwrap()
    };
    let (a, b) = (step(&on), step(&off));
    // The CLS term never sees the teacher.
    assert_eq!(a.loss_cls, b.loss_cls);
    assert_eq!(a, step(&on));
}

#[test]
fn class_count_mismatch_is_a_config_error() {
    let cfg = tiny(10);
    let ws = setup(&cfg);
    let mut tc = cfg.teacher.clone();
    tc.n_classes = 4;
    let teacher = TeacherCnn::new(tc, &mut tdlt::seed::rng(0, &[])).unwrap();
    let drw = DrwSchedule::new(0.9999, 1, ws.ds.class_counts.clone(), false).unwrap();
    let mut st = StudentState::new(&cfg, &ws.seeds).unwrap();
    let idx = [0usize, 1];
    let err = distill_step(
        &cfg,
        &ws.seeds,
        &ws.norm,
        &drw,
        &teacher,
        &mut st,
        DistillBatch {
            split: &ws.ds.train,
            indices: &idx,
            epoch: 0,
            step: 0,
            lr: 1e-3,
        },
    )
    .unwrap_err();
    assert!(matches!(err, tdlt::Error::Config(_)), "{err}");
}

#[test]
fn crt_freezes_trunk_and_retrains_heads() {
    let cfg = tiny(10);
    let ws = setup(&cfg);
    let student = StudentState::new(&cfg, &ws.seeds).unwrap().student;
    let trunk = |s: &DualTokenVit<f32>| s.params.digest(|n| !DualTokenVit::<f32>::is_head_param(n));
    let heads = |s: &DualTokenVit<f32>| s.params.digest(DualTokenVit::<f32>::is_head_param);

    let mut zero = cfg.clone();
    zero.crt.epochs = 0;
    let reset = crt_retrain(&zero, &ws, &student).unwrap();
    assert_eq!(trunk(&reset), trunk(&student));
    let mut fresh = student.clone();
    fresh.reset_heads(&mut tdlt::seed::rng(ws.seeds.init, &[3]));
    assert_eq!(heads(&reset), heads(&fresh));
    assert_ne!(heads(&reset), heads(&student));

    let trained = crt_retrain(&cfg, &ws, &student).unwrap();
    assert_eq!(trunk(&trained), trunk(&student));
    assert_ne!(heads(&trained), heads(&reset));
}

#[test]
fn crt_narrows_recall_gap_on_biased_heads() {
    let mut cfg = tiny(2);
    cfg.dataset.rho = 1.0;
    cfg.dataset.n_max = 16;
    cfg.crt.epochs = 30;
    cfg.crt.lr = 1e-2;
    let ws = Workspace::prepare(&cfg, &raw(2, 16)).unwrap();
    let mut student = StudentState::new(&cfg, &ws.seeds).unwrap().student;
    // Bias both heads hard toward class 0.
    for name in ["head_cls.b", "head_dist.b"] {
        let id = student.params.index_of(name).unwrap();
        student.params.get_mut(id).data_mut().copy_from_slice(&[50.0, -50.0]);
    }
    let recall_gap = |s: &DualTokenVit<f32>| {
        let preds = tdlt::distill::infer(s, &tdlt::data::to_tensor(&ws.ds.train.images, &ws.norm)).unwrap();
        let mut hit = [0.0f64; 2];
        let mut tot = [0.0f64; 2];
        for (p, &y) in preds.averaged.iter().zip(&ws.ds.train.labels) {
            tot[y] += 1.0;
            hit[y] += (*p == y) as u8 as f64;
        }
        (hit[0] / tot[0] - hit[1] / tot[1]).abs()
    };
    let before = recall_gap(&student);
    let after = recall_gap(&crt_retrain(&cfg, &ws, &student).unwrap());
    assert_eq!(before, 1.0);
    assert!(after < before, "gap {before} -> {after}");
}
