//! Training configuration: a TOML file with dotted sections, overridable by
//! `section.key=value` pairs, validated after merging.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetKind, MixConfig, StrongRecipe};
use crate::error::{Error, Result};
use crate::losses::LdamParams;
use crate::models::{TeacherConfig, VitConfig};
use crate::optim::OptimizerKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: String,
    pub rho: f64,
    pub n_max: usize,
    /// Per-class cap on validation images used for per-epoch metrics; 0 keeps all.
    pub eval_per_class: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: "cifar10".into(),
            rho: 100.0,
            n_max: 5000,
            eval_per_class: 0,
        }
    }
}

impl DatasetSpec {
    pub fn kind(&self) -> Result<DatasetKind> {
        DatasetKind::parse(&self.kind, None).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSpec {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub epsilon_smooth: f64,
}

impl Default for OptimSpec {
    fn default() -> Self {
        OptimSpec {
            lr: 5e-4,
            min_lr: 1e-5,
            warmup_epochs: 5,
            weight_decay: 0.05,
            epsilon_smooth: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub strong: StrongRecipe,
    pub mix: MixConfig,
    /// Keep Mixup/CutMix on after re-weighting starts.
    pub mix_during_drw: bool,
    /// Copies of each sampled image per student epoch (1 = off).
    pub repeats: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            strong: StrongRecipe::default(),
            mix: MixConfig::default(),
            mix_during_drw: false,
            repeats: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrwSpec {
    pub beta: f64,
    pub normalize: bool,
}

impl Default for DrwSpec {
    fn default() -> Self {
        DrwSpec {
            beta: 0.9999,
            normalize: false,
        }
    }
}

/// The three switchable ingredients of the distillation recipe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    /// Teacher labels come from the student's augmented, mixed view rather
    /// than a weak view of the same images.
    pub ood_distill: bool,
    pub drw: bool,
    pub sam_teacher: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            ood_distill: true,
            drw: true,
            sam_teacher: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherTrainSpec {
    pub epochs: usize,
    /// Defaults to 80% of `epochs`.
    pub drw_epoch: Option<usize>,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub rho_sam: f64,
    pub ldam: LdamParams,
    pub drw_beta: f64,
    pub drw_normalize: bool,
}

impl Default for TeacherTrainSpec {
    fn default() -> Self {
        TeacherTrainSpec {
            epochs: 200,
            drw_epoch: None,
            batch_size: 128,
            optimizer: OptimizerKind::Sgd,
            lr: 0.1,
            min_lr: 0.0,
            warmup_epochs: 5,
            momentum: 0.9,
            weight_decay: 2e-4,
            rho_sam: 0.05,
            ldam: LdamParams::default(),
            drw_beta: 0.9999,
            drw_normalize: true,
        }
    }
}

impl TeacherTrainSpec {
    pub fn drw_epoch(&self) -> usize {
        self.drw_epoch.unwrap_or(self.epochs * 4 / 5)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrtSpec {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for CrtSpec {
    fn default() -> Self {
        CrtSpec {
            epochs: 10,
            lr: 1e-3,
            batch_size: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// First re-weighted epoch (0-based); defaults to 90% of `epochs`.
    pub drw_epoch: Option<usize>,
    pub batch_size: usize,
    /// Threads used for augmentation; results do not depend on it.
    pub workers: usize,
    /// Save a resumable checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub dataset: DatasetSpec,
    pub student: VitConfig,
    pub teacher: TeacherConfig,
    pub optim: OptimSpec,
    pub augment: AugmentSpec,
    pub drw: DrwSpec,
    pub toggles: Toggles,
    pub teacher_train: TeacherTrainSpec,
    pub crt: CrtSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 100,
            drw_epoch: None,
            batch_size: 64,
            workers: 1,
            checkpoint_every: 0,
            dataset: DatasetSpec::default(),
            student: VitConfig::default(),
            teacher: TeacherConfig::default(),
            optim: OptimSpec::default(),
            augment: AugmentSpec::default(),
            drw: DrwSpec::default(),
            toggles: Toggles::default(),
            teacher_train: TeacherTrainSpec::default(),
            crt: CrtSpec::default(),
        }
    }
}

fn cfg_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `a.b.c = value` inside `table`, creating intermediate tables.
pub fn set_dotted(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key:?}: {p:?} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

impl TrainConfig {
    /// Student re-weighting start, 0-based.
    pub fn drw_epoch(&self) -> usize {
        self.drw_epoch.unwrap_or(self.epochs * 9 / 10)
    }

    /// File contents (if any) merged with `key=value` overrides, then
    /// validated. Later overrides win.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        Self::merge(table, overrides)
    }

    /// As [`Self::load`] with the file contents given directly.
    pub fn load_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        Self::merge(toml::from_str::<toml::Table>(text).map_err(cfg_err)?, overrides)
    }

    fn merge(mut table: toml::Table, overrides: &[(String, String)]) -> Result<Self> {
        for (k, v) in overrides {
            set_dotted(&mut table, k, v)?;
        }
        Self::from_table(table)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_table(toml::from_str::<toml::Table>(text).map_err(cfg_err)?)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: TrainConfig = toml::Value::Table(table).try_into().map_err(cfg_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The effective configuration as JSON, for run manifests.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("configuration is plain data")
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(cfg_err)
    }

    pub fn validate(&self) -> Result<()> {
        if self.drw_epoch() > self.epochs {
            return Err(Error::Config(format!(
                "drw_epoch {} exceeds epochs {}",
                self.drw_epoch(),
                self.epochs
            )));
        }
        if self.teacher_train.drw_epoch() > self.teacher_train.epochs {
            return Err(Error::Config(format!(
                "teacher_train.drw_epoch {} exceeds teacher_train.epochs {}",
                self.teacher_train.drw_epoch(),
                self.teacher_train.epochs
            )));
        }
        if self.batch_size == 0 || self.teacher_train.batch_size == 0 || self.crt.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.student.n_classes != self.teacher.n_classes {
            return Err(Error::Config(format!(
                "student has {} classes but teacher has {}",
                self.student.n_classes, self.teacher.n_classes
            )));
        }
        if !(self.drw.beta > 0.0 && self.drw.beta < 1.0) || !(self.teacher_train.drw_beta > 0.0 && self.teacher_train.drw_beta < 1.0) {
            return Err(Error::Config("drw beta must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.optim.epsilon_smooth) {
            return Err(Error::Config("optim.epsilon_smooth must lie in [0, 1)".into()));
        }
        if self.dataset.rho < 1.0 {
            return Err(Error::Config(format!("dataset.rho must be ≥ 1, got {}", self.dataset.rho)));
        }
        if self.teacher_train.rho_sam < 0.0 {
            return Err(Error::Config("teacher_train.rho_sam must be ≥ 0".into()));
        }
        self.dataset.kind()?;
        self.student.validate()?;
        if self.student.image_size != crate::data::IMAGE_SIDE {
            return Err(Error::Config(format!(
                "student.image_size must be {} for this data format",
                crate::data::IMAGE_SIDE
            )));
        }
        Ok(())
    }

    /// Ways this configuration is smaller than the full-scale recipe.
    pub fn scale_notes(&self) -> Vec<String> {
        let mut notes = Vec::new();
        if self.epochs < 1200 {
            notes.push(format!("student epochs {} (full recipe: 1200)", self.epochs));
        }
        let d = &self.student;
        if d.embed_dim < 768 || d.depth < 12 {
            notes.push(format!(
                "student ViT dim {} depth {} heads {} patch {} at {}px (full recipe: ViT-B at 224px)",
                d.embed_dim, d.depth, d.n_heads, d.patch_size, d.image_size
            ));
        }
        notes.push(format!(
            "strong augmentation is crop/flip/jitter/erase instead of AutoAugment; repeated augmentation {}",
            if self.augment.repeats > 1 { format!("x{}", self.augment.repeats) } else { "off".into() }
        ));
        if self.teacher_train.epochs < 200 {
            notes.push(format!("teacher epochs {} (full recipe: 200)", self.teacher_train.epochs));
        }
        notes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_recipe_defaults() {
        let c = TrainConfig::from_toml_str("").unwrap();
        assert_eq!(c.optim.lr, 5e-4);
        assert_eq!(c.optim.warmup_epochs, 5);
        assert_eq!(c.augment.mix.mixup_alpha, 0.8);
        assert_eq!(c.augment.mix.cutmix_alpha, 1.0);
        assert_eq!(c.optim.epsilon_smooth, 0.1);
        assert_eq!(c.augment.strong.jitter_strength, 0.3);
        assert_eq!(c.drw_epoch(), 90);
        assert!(!c.augment.mix_during_drw);
        assert_eq!(c.teacher_train.drw_epoch(), 160);
    }

    #[test]
    fn override_beats_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[dataset]\nrho = 100.0\n").unwrap();
        let c = TrainConfig::load(Some(&p), &[("dataset.rho".into(), "50".into())]).unwrap();
        assert_eq!(c.dataset.rho, 50.0);
    }

    #[test]
    fn late_drw_rejected() {
        let e = TrainConfig::from_toml_str("epochs = 100\ndrw_epoch = 200\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn unknown_key_names_the_key() {
        let e = TrainConfig::from_toml_str("[optim]\nlearning_rate = 1.0\n").unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
    }

    #[test]
    fn roundtrips_through_toml() {
        let mut c = TrainConfig::default();
        c.drw_epoch = Some(7);
        c.toggles.sam_teacher = false;
        c.augment.strong.crop_scale = (0.5, 0.9);
        let back = TrainConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn override_values_are_typed() {
        let mut t = toml::Table::new();
        set_dotted(&mut t, "toggles.drw", "false").unwrap();
        set_dotted(&mut t, "dataset.kind", "cifar100").unwrap();
        set_dotted(&mut t, "epochs", "3").unwrap();
        assert_eq!(t["toggles"]["drw"], toml::Value::Boolean(false));
        assert_eq!(t["dataset"]["kind"], toml::Value::String("cifar100".into()));
        assert_eq!(t["epochs"], toml::Value::Integer(3));
    }
}
