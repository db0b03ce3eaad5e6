use std::path::{Path, PathBuf};

use tdlt::config::TrainConfig;
use tdlt::data::synth::{generate, write_cifar_layout, SynthSpec};
use tdlt::data::{load_cifar10, to_tensor, write_manifest_csv, Group, RawDataset};
use tdlt::diagnostics::{
    attention_rollout, cls_dist_divergence, entropy_report, feature_rank, mean_attention_distance, write_pgm, write_text,
    TokenKind,
};
use tdlt::distill::{
    ablate, crt_retrain, evaluate_student, evaluate_teacher, load_student, load_student_state, load_teacher, read_meta,
    save_student_state, save_teacher, train_student, train_teacher, CheckpointMeta, EvalReport, MetricsCsv, ModelSpec,
    StudentState, Workspace, ABLATION_HEADER, STUDENT_HEADER, TEACHER_HEADER,
};
use tdlt::manifest::{sha256_hex, RunManifest};
use tdlt::models::{DualTokenVit, TeacherCnn};
use tdlt::seed::{self, SeedPlan};
use tdlt::{Error, Result, Tensor};

use crate::{Cli, Cmd, Common, DatasetCmd, DiagnoseCmd, TokenArg};

/// Prefix tokens ahead of the patch tokens: CLS then DIST.
const PREFIX_TOKENS: usize = 2;

pub fn dispatch(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.cmd {
        Cmd::Dataset(DatasetCmd::Synth {
            dir,
            per_class,
            test_per_class,
            noise,
            synth_seed,
        }) => synth(dir, *per_class, *test_per_class, *noise, *synth_seed),
        Cmd::Dataset(DatasetCmd::Build { csv }) => dataset_build(c, csv.as_deref()),
        Cmd::TrainTeacher => train_teacher_cmd(c),
        Cmd::TrainStudent {
            teacher,
            resume,
            stop_after,
        } => train_student_cmd(c, teacher, resume.as_deref(), *stop_after),
        Cmd::Crt { student } => crt_cmd(c, student),
        Cmd::Eval { checkpoint } => eval_cmd(c, checkpoint),
        Cmd::Diagnose(d) => diagnose(c, d),
        Cmd::Ablate => ablate_cmd(c),
    }
}

/// A run in progress: effective configuration, data and manifest.
struct Session {
    cfg: TrainConfig,
    ws: Workspace,
    manifest: RunManifest,
    out: PathBuf,
}

impl Session {
    /// `base` is the configuration stored with a checkpoint, used when no
    /// `--config` file is given.
    fn open(c: &Common, command: &str, base: Option<&str>) -> Result<Self> {
        let overrides = c.overrides()?;
        let cfg = match (&c.config, base) {
            (None, Some(text)) => TrainConfig::load_str(text, &overrides)?,
            (path, _) => TrainConfig::load(path.as_deref(), &overrides)?,
        };
        let out = c.out.clone();
        let mut manifest = RunManifest::start(
            &out.join(format!("{command}.manifest.json")),
            command,
            cfg.snapshot(),
            SeedPlan::new(cfg.seed),
            cfg.scale_notes(),
        )?;
        let raw = load_raw(c)?;
        let ws = Workspace::prepare(&cfg, &raw)?;
        manifest.record_timing("load_data", manifest.elapsed());
        let csv = out.join("dataset.csv");
        let bytes = write_manifest_csv(&csv, &ws.ds)?;
        manifest.dataset_digest = Some(sha256_hex(&bytes));
        manifest.record_file(&csv);
        manifest.write()?;
        Ok(Session { cfg, ws, manifest, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn emit(&mut self, path: &Path) -> Result<()> {
        self.manifest.record_file(path);
        self.manifest.write()
    }

    fn meta(&self, model: ModelSpec, epochs_done: usize) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            model,
            normalizer: self.ws.norm,
            split: self.ws.descriptor(),
            epochs_done,
            config: self.cfg.to_toml_string()?,
        })
    }

    fn finish(mut self) -> Result<()> {
        let t = self.manifest.elapsed();
        self.manifest.record_timing("total", t);
        self.manifest.write()
    }
}

fn load_raw(c: &Common) -> Result<RawDataset> {
    let dir = c
        .data_dir
        .as_deref()
        .ok_or_else(|| Error::Config("no data directory: pass --data-dir or set TDLT_DATA_DIR".into()))?;
    load_cifar10(dir)
}

fn synth(dir: &Path, per_class: usize, test_per_class: usize, noise: f64, synth_seed: u64) -> Result<()> {
    let raw = generate(&SynthSpec {
        n_classes: 10,
        train_per_class: per_class,
        test_per_class,
        noise,
        seed: synth_seed,
    });
    write_cifar_layout(dir, &raw)?;
    println!("wrote {} training and {} test images to {}", raw.train.len(), raw.test.len(), dir.display());
    Ok(())
}

fn dataset_build(c: &Common, csv: Option<&Path>) -> Result<()> {
    let mut s = Session::open(c, "dataset", None)?;
    if let Some(p) = csv {
        let bytes = write_manifest_csv(p, &s.ws.ds)?;
        s.manifest.dataset_digest = Some(sha256_hex(&bytes));
        s.emit(p)?;
    }
    let ds = &s.ws.ds;
    println!("training images: {}", ds.train.len());
    for (class, count, group) in ds.manifest_rows() {
        println!("class {class}: {count} ({group})");
    }
    s.finish()
}

fn train_teacher_cmd(c: &Common) -> Result<()> {
    let mut s = Session::open(c, "train-teacher", None)?;
    let metrics_path = s.path("teacher_metrics.csv");
    let metrics = MetricsCsv::create(&metrics_path, TEACHER_HEADER)?;
    s.emit(&metrics_path)?;
    let teacher = train_teacher(&s.cfg, &s.ws, &mut |_, row| metrics.append(&row.to_csv_row()))?;
    s.manifest.record_timing("train", s.manifest.elapsed());
    let ck = s.path("teacher.ckpt");
    let epochs = s.cfg.teacher_train.epochs;
    save_teacher(&ck, &teacher, &s.meta(ModelSpec::Teacher(teacher.config.clone()), epochs)?)?;
    s.emit(&ck)?;
    s.emit(&tdlt::distill::meta_path(&ck))?;
    s.finish()
}

fn train_student_cmd(c: &Common, teacher_path: &Path, resume: Option<&Path>, stop_after: Option<usize>) -> Result<()> {
    let base = match resume {
        Some(p) => Some(read_meta(p)?.config),
        None => None,
    };
    let mut s = Session::open(c, "train-student", base.as_deref())?;
    let (teacher, _) = load_teacher(teacher_path)?;
    let metrics_path = s.path("student_metrics.csv");
    let mut state = match resume {
        Some(p) => load_student_state(p, s.cfg.optim.weight_decay)?.0,
        None => StudentState::new(&s.cfg, &s.ws.seeds)?,
    };
    let metrics = match resume {
        Some(_) => MetricsCsv::resume(&metrics_path, STUDENT_HEADER, state.epochs_done)?,
        None => MetricsCsv::create(&metrics_path, STUDENT_HEADER)?,
    };
    s.emit(&metrics_path)?;
    let until = stop_after.unwrap_or(s.cfg.epochs);
    let every = s.cfg.checkpoint_every;
    let mut periodic = Vec::new();
    {
        let s_ref = &s;
        train_student(&s.cfg, &s.ws, &teacher, &mut state, until, &mut |st, m| {
            metrics.append(&m.to_csv_row())?;
            if every > 0 && st.epochs_done % every == 0 {
                let p = s_ref.path(&format!("checkpoints/student_epoch{:04}.ckpt", st.epochs_done));
                save_student_state(&p, st, &s_ref.meta(ModelSpec::Student(st.student.config.clone()), st.epochs_done)?)?;
                periodic.push(p);
            }
            Ok(())
        })?;
    }
    for p in periodic {
        s.emit(&p)?;
        s.emit(&tdlt::distill::meta_path(&p))?;
    }
    s.manifest.record_timing("train", s.manifest.elapsed());
    let ck = s.path("student.ckpt");
    save_student_state(&ck, &state, &s.meta(ModelSpec::Student(state.student.config.clone()), state.epochs_done)?)?;
    s.emit(&ck)?;
    s.emit(&tdlt::distill::meta_path(&ck))?;
    s.finish()
}

fn report_csv(r: &EvalReport) -> String {
    let mut out = String::from("predictor,overall,head,mid,tail\n");
    for (name, a) in [("averaged", r.averaged), ("cls", r.cls), ("dist", r.dist)] {
        out.push_str(&format!("{name},{},{},{},{}\n", a.overall, a.head, a.mid, a.tail));
    }
    out
}

fn print_report(r: &EvalReport) {
    print!("{}", report_csv(r));
    println!("cosine_cls_dist {}", r.cosine_cls_dist);
}

fn crt_cmd(c: &Common, student_path: &Path) -> Result<()> {
    let (student, meta) = load_student(student_path)?;
    let mut s = Session::open(c, "crt", Some(&meta.config))?;
    s.ws.norm = meta.normalizer;
    let tuned = crt_retrain(&s.cfg, &s.ws, &student)?;
    let mut state = StudentState::new(&s.cfg, &s.ws.seeds)?;
    state.student = tuned;
    state.epochs_done = meta.epochs_done;
    let ck = s.path("student_crt.ckpt");
    save_student_state(&ck, &state, &s.meta(ModelSpec::Student(state.student.config.clone()), meta.epochs_done)?)?;
    s.emit(&ck)?;
    s.emit(&tdlt::distill::meta_path(&ck))?;
    let r = evaluate_student(&state.student, &s.ws.eval, &s.ws.norm, &s.ws.ds.groups)?;
    let p = s.path("crt_eval.csv");
    write_text(&p, &report_csv(&r))?;
    s.emit(&p)?;
    print_report(&r);
    s.finish()
}

fn eval_cmd(c: &Common, ck: &Path) -> Result<()> {
    let meta = read_meta(ck)?;
    let mut s = Session::open(c, "eval", Some(&meta.config))?;
    s.ws.norm = meta.normalizer;
    let p = s.path("eval.csv");
    match meta.model {
        ModelSpec::Student(_) => {
            let (student, _) = load_student(ck)?;
            let r = evaluate_student(&student, &s.ws.eval, &s.ws.norm, &s.ws.ds.groups)?;
            write_text(&p, &report_csv(&r))?;
            print_report(&r);
        }
        ModelSpec::Teacher(_) => {
            let (teacher, _) = load_teacher(ck)?;
            let a = evaluate_teacher(&teacher, &s.ws.eval, &s.ws.norm, &s.ws.ds.groups)?;
            let text = format!("predictor,overall,head,mid,tail\nteacher,{},{},{},{}\n", a.overall, a.head, a.mid, a.tail);
            write_text(&p, &text)?;
            print!("{text}");
        }
    }
    s.emit(&p)?;
    s.finish()
}

fn student_session(c: &Common, command: &str, ck: &Path) -> Result<(Session, DualTokenVit<f32>)> {
    let (student, meta) = load_student(ck)?;
    let mut s = Session::open(c, command, Some(&meta.config))?;
    s.ws.norm = meta.normalizer;
    Ok((s, student))
}

fn teacher_session(c: &Common, command: &str, ck: &Path) -> Result<(Session, TeacherCnn<f32>)> {
    let (teacher, meta) = load_teacher(ck)?;
    let mut s = Session::open(c, command, Some(&meta.config))?;
    s.ws.norm = meta.normalizer;
    Ok((s, teacher))
}

/// Pre-head CLS and DIST features as `[N, D]` matrices.
fn features(student: &DualTokenVit<f32>, s: &Session, images: &[tdlt::data::Image]) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let d = student.config.embed_dim;
    let (mut fc, mut fd) = (Vec::new(), Vec::new());
    for chunk in images.chunks(100) {
        let e = student.eval(&to_tensor(chunk, &s.ws.norm), false)?;
        fc.extend(e.features_cls.data().iter().map(|&v| v as f64));
        fd.extend(e.features_dist.data().iter().map(|&v| v as f64));
    }
    Ok((Tensor::new([images.len(), d], fc)?, Tensor::new([images.len(), d], fd)?))
}

fn diagnose(c: &Common, cmd: &DiagnoseCmd) -> Result<()> {
    match cmd {
        DiagnoseCmd::Locality { student, images } => {
            let (mut s, model) = student_session(c, "diagnose-locality", student)?;
            let n = (*images).min(s.ws.eval.len());
            let e = model.eval(&to_tensor(&s.ws.eval.images[..n], &s.ws.norm), true)?;
            let rec = e.attention.ok_or_else(|| Error::Numeric("no attention was captured".into()))?;
            let v = &model.config;
            let profile = mean_attention_distance(&rec, v.patch_size, v.image_size, PREFIX_TOKENS)?;
            let p = s.path("locality.csv");
            write_text(&p, &profile.to_csv())?;
            s.emit(&p)?;
            for (b, m) in profile.block_means().iter().enumerate() {
                println!("block {b}: {m:.3} px");
            }
            s.finish()
        }
        DiagnoseCmd::Rollout {
            student,
            image,
            token,
            scale,
        } => {
            let (mut s, model) = student_session(c, "diagnose-rollout", student)?;
            let img = s
                .ws
                .eval
                .images
                .get(*image)
                .ok_or_else(|| Error::Index(format!("image {image} out of range for {} held-out images", s.ws.eval.len())))?;
            let e = model.eval(&to_tensor(std::slice::from_ref(img), &s.ws.norm), true)?;
            let rec = e.attention.ok_or_else(|| Error::Numeric("no attention was captured".into()))?;
            let (target, tag) = match token {
                TokenArg::Cls => (0, "cls"),
                TokenArg::Dist => (1, "dist"),
            };
            let r = attention_rollout(&rec, 0, target, PREFIX_TOKENS)?;
            let pgm = s.path(&format!("rollout_{image}_{tag}.pgm"));
            write_pgm(&pgm, &r.saliency, *scale)?;
            let (g, _) = r.saliency.dims2()?;
            let mut csv = String::from("row,col,saliency\n");
            for (i, v) in r.saliency.data().iter().enumerate() {
                csv.push_str(&format!("{},{},{v}\n", i / g, i % g));
            }
            let p = s.path(&format!("rollout_{image}_{tag}.csv"));
            write_text(&p, &csv)?;
            s.emit(&pgm)?;
            s.emit(&p)?;
            s.finish()
        }
        DiagnoseCmd::Rank { student, tol } => {
            let (mut s, model) = student_session(c, "diagnose-rank", student)?;
            let eval = s.ws.eval.clone();
            let tail = s.ws.ds.classes_in(Group::Tail);
            let d = model.config.embed_dim;
            let mut per_block: Vec<[Vec<f64>; 2]> = vec![[Vec::new(), Vec::new()]; model.config.depth];
            let mut last = [Vec::new(), Vec::new()];
            for chunk in eval.images.chunks(100) {
                let e = model.eval(&to_tensor(chunk, &s.ws.norm), true)?;
                let tokens = e.block_tokens.ok_or_else(|| Error::Numeric("no block tokens were captured".into()))?;
                for (blk, t) in per_block.iter_mut().zip(&tokens) {
                    for row in t.data().chunks(2 * d) {
                        blk[0].extend_from_slice(&row[..d]);
                        blk[1].extend_from_slice(&row[d..]);
                    }
                }
                last[0].extend(e.features_cls.data().iter().map(|&v| v as f64));
                last[1].extend(e.features_dist.data().iter().map(|&v| v as f64));
            }
            let labelled = per_block
                .into_iter()
                .enumerate()
                .map(|(i, f)| (i.to_string(), f))
                .chain(std::iter::once(("final".to_string(), last)));
            let mut csv = String::from("block,token_kind,k,tol,exhausted\n");
            for (block, [fc, fd]) in labelled {
                for (kind, f) in [(TokenKind::Cls, fc), (TokenKind::Dist, fd)] {
                    let all = tdlt::diagnostics::FeatureMatrix::new(Tensor::new([eval.len(), d], f)?, eval.labels.clone(), kind)?;
                    let min = all.select(&tail);
                    let r = feature_rank(&all.rows, &min.rows, *tol)?;
                    csv.push_str(&format!("{block},{kind},{},{tol},{}\n", r.k, r.exhausted));
                }
            }
            let p = s.path("rank.csv");
            write_text(&p, &csv)?;
            s.emit(&p)?;
            print!("{csv}");
            s.finish()
        }
        DiagnoseCmd::Entropy { teacher, samples } => {
            let (mut s, model) = teacher_session(c, "diagnose-entropy", teacher)?;
            let a = &s.cfg.augment;
            let summary = entropy_report(
                &model,
                &s.ws.eval.images,
                &s.ws.eval.labels,
                &s.ws.norm,
                &a.strong,
                &a.mix,
                *samples,
                seed::derive(s.ws.seeds.augment, &[9]),
            )?;
            let p = s.path("entropy.csv");
            write_text(&p, &summary.to_csv())?;
            s.emit(&p)?;
            print!("{}", summary.to_csv());
            s.finish()
        }
        DiagnoseCmd::Divergence { student } => {
            let (mut s, model) = student_session(c, "diagnose-divergence", student)?;
            let images = s.ws.eval.images.clone();
            let (fc, fd) = features(&model, &s, &images)?;
            let d = cls_dist_divergence(&fc, &fd)?;
            let text = format!("mean_cosine_distance,used,excluded\n{},{},{}\n", d.mean, d.used, d.excluded);
            let p = s.path("divergence.csv");
            write_text(&p, &text)?;
            s.emit(&p)?;
            print!("{text}");
            s.finish()
        }
    }
}

fn ablate_cmd(c: &Common) -> Result<()> {
    let mut s = Session::open(c, "ablate", None)?;
    let p = s.path("ablation.csv");
    let csv = MetricsCsv::create(&p, ABLATION_HEADER)?;
    s.emit(&p)?;
    ablate(&s.cfg, &s.ws, &mut |row| csv.append(&row.to_csv_row()))?;
    s.finish()
}
