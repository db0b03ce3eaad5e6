//! Checkpoints with a JSON sidecar, and append-only metrics CSVs.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::student::StudentState;
use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::manifest::write_atomic;
use crate::models::{DualTokenVit, TeacherCnn, TeacherConfig, VitConfig};
use crate::optim::{AdamW, Optimizer};
use crate::seed;
use crate::tensor::{read_checkpoint, write_checkpoint};

const TEACHER_PREFIX: &str = "teacher.";
const STUDENT_PREFIX: &str = "student.";
const OPT_PREFIX: &str = "adamw.";

/// Which long-tailed subset a model was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDescriptor {
    pub rho: f64,
    pub n_max: usize,
    pub split_seed: u64,
    pub class_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Teacher(TeacherConfig),
    Student(VitConfig),
}

/// Stored beside every checkpoint as `<checkpoint>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    /// Input standardization shared by teacher and student.
    pub normalizer: Normalizer,
    pub split: SplitDescriptor,
    pub epochs_done: usize,
    /// Training configuration as TOML.
    pub config: String,
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_meta(checkpoint: &Path, meta: &CheckpointMeta) -> Result<()> {
    let text = serde_json::to_string_pretty(meta).map_err(|e| Error::Numeric(e.to_string()))?;
    write_atomic(&meta_path(checkpoint), text.as_bytes())
}

pub fn read_meta(checkpoint: &Path) -> Result<CheckpointMeta> {
    if !checkpoint.exists() {
        return Err(Error::io(checkpoint, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let p = meta_path(checkpoint);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: p, msg: e.to_string() })
}

pub fn save_teacher(path: &Path, teacher: &TeacherCnn<f32>, meta: &CheckpointMeta) -> Result<()> {
    write_checkpoint(path, &teacher.params.to_checkpoint(TEACHER_PREFIX))?;
    write_meta(path, meta)
}

pub fn load_teacher(path: &Path) -> Result<(TeacherCnn<f32>, CheckpointMeta)> {
    let meta = read_meta(path)?;
    let ModelSpec::Teacher(cfg) = &meta.model else {
        return Err(Error::Config(format!("{} is not a teacher checkpoint", path.display())));
    };
    let ck = read_checkpoint(path)?;
    let mut teacher = TeacherCnn::new(cfg.clone(), &mut seed::rng(0, &[]))?;
    teacher.params.load_checkpoint(&ck, TEACHER_PREFIX)?;
    Ok((teacher, meta))
}

/// Student weights and optimizer state.
pub fn save_student_state(path: &Path, state: &StudentState, meta: &CheckpointMeta) -> Result<()> {
    let mut ck = state.student.params.to_checkpoint(STUDENT_PREFIX);
    state.opt.save(OPT_PREFIX, &mut ck);
    write_checkpoint(path, &ck)?;
    write_meta(path, meta)
}

fn student_from(path: &Path) -> Result<(DualTokenVit<f32>, crate::tensor::Checkpoint, CheckpointMeta)> {
    let meta = read_meta(path)?;
    let ModelSpec::Student(cfg) = &meta.model else {
        return Err(Error::Config(format!("{} is not a student checkpoint", path.display())));
    };
    let ck = read_checkpoint(path)?;
    let mut student = DualTokenVit::new(cfg.clone(), &mut seed::rng(0, &[]))?;
    student.params.load_checkpoint(&ck, STUDENT_PREFIX)?;
    Ok((student, ck, meta))
}

pub fn load_student(path: &Path) -> Result<(DualTokenVit<f32>, CheckpointMeta)> {
    let (student, _, meta) = student_from(path)?;
    Ok((student, meta))
}

/// Restores a run for resuming. `weight_decay` is not stored and comes from
/// the configuration.
pub fn load_student_state(path: &Path, weight_decay: f64) -> Result<(StudentState, CheckpointMeta)> {
    let (student, ck, meta) = student_from(path)?;
    let mut opt = AdamW::new(weight_decay);
    opt.load(OPT_PREFIX, &ck)?;
    Ok((
        StudentState {
            student,
            opt,
            epochs_done: meta.epochs_done,
        },
        meta,
    ))
}

/// A CSV file with a fixed header, appended one flushed row at a time.
#[derive(Clone, Debug)]
pub struct MetricsCsv {
    path: PathBuf,
}

impl MetricsCsv {
    /// Truncates `path` to just the header.
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        write_atomic(path, format!("{header}\n").as_bytes())?;
        Ok(MetricsCsv { path: path.to_path_buf() })
    }

    /// Keeps the header and the first `rows` data rows of an existing file.
    pub fn resume(path: &Path, header: &str, rows: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(header) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: "metrics header does not match".into(),
            });
        }
        let kept: Vec<&str> = lines.take(rows).collect();
        if kept.len() < rows {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("expected {rows} rows to resume from, found {}", kept.len()),
            });
        }
        let mut out = format!("{header}\n");
        for l in kept {
            out.push_str(l);
            out.push('\n');
        }
        write_atomic(path, out.as_bytes())?;
        Ok(MetricsCsv { path: path.to_path_buf() })
    }

    pub fn append(&self, row: &str) -> Result<()> {
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{row}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
