//! `tdlt`: build long-tailed splits, train the teacher and the dual-token
//! student, re-train heads, evaluate, run diagnostics and the toggle grid.

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "tdlt", version, about = "Long-tailed dual-token ViT distillation from a CNN teacher")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Configuration sources, applied in order: file, `--set`, named flags.
#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set student.depth=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long, env = "TDLT_DATA_DIR", global = true)]
    data_dir: Option<PathBuf>,
    /// Output directory for checkpoints, metrics and manifests.
    #[arg(long, env = "TDLT_OUT_DIR", global = true, default_value = "runs")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// First epoch (0-based) of deferred re-weighting for the student.
    #[arg(long, global = true)]
    drw_epoch: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    checkpoint_every: Option<usize>,
    #[arg(long, global = true)]
    rho: Option<f64>,
    #[arg(long, global = true)]
    n_max: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    eval_per_class: Option<usize>,
    #[arg(long, global = true)]
    teacher_epochs: Option<usize>,
    #[arg(long, global = true)]
    ood_distill: Option<bool>,
    #[arg(long, global = true)]
    drw: Option<bool>,
    #[arg(long, global = true)]
    sam_teacher: Option<bool>,
}

impl Common {
    /// `--set` pairs followed by the named flags, as dotted overrides.
    fn overrides(&self) -> Result<Vec<(String, String)>, tdlt::Error> {
        let mut out = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| tdlt::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("drw_epoch", self.drw_epoch.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("workers", self.workers.map(|v| v.to_string()));
        push("checkpoint_every", self.checkpoint_every.map(|v| v.to_string()));
        push("dataset.rho", self.rho.map(float));
        push("dataset.n_max", self.n_max.map(|v| v.to_string()));
        push("dataset.eval_per_class", self.eval_per_class.map(|v| v.to_string()));
        push("optim.lr", self.lr.map(float));
        push("teacher_train.epochs", self.teacher_epochs.map(|v| v.to_string()));
        push("toggles.ood_distill", self.ood_distill.map(|v| v.to_string()));
        push("toggles.drw", self.drw.map(|v| v.to_string()));
        push("toggles.sam_teacher", self.sam_teacher.map(|v| v.to_string()));
        Ok(out)
    }
}

/// TOML float literal (`50` would parse as an integer).
fn float(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Build or synthesize datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Train the CNN teacher with the margin loss, re-weighting and SAM.
    TrainTeacher,
    /// Distill the dual-token student from a trained teacher.
    TrainStudent {
        #[arg(long)]
        teacher: PathBuf,
        /// Continue from a student checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs (the schedule still spans `epochs`).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Re-train both heads of a student on a frozen trunk with class-balanced sampling.
    Crt {
        #[arg(long)]
        student: PathBuf,
    },
    /// Grouped accuracy of a teacher or student checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Analyses of trained models.
    #[command(subcommand)]
    Diagnose(DiagnoseCmd),
    /// Run the 2×2×2 grid over ood_distill, drw and sam_teacher.
    Ablate,
}

#[derive(Subcommand, Debug)]
enum DatasetCmd {
    /// Decimate CIFAR-10 to a long-tailed split and write its class manifest.
    Build {
        /// Manifest path; defaults to `<out>/dataset.csv`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write procedural images in the CIFAR-10 binary layout.
    Synth {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 5000)]
        per_class: usize,
        #[arg(long, default_value_t = 1000)]
        test_per_class: usize,
        #[arg(long, default_value_t = 24.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        synth_seed: u64,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum TokenArg {
    Cls,
    Dist,
}

#[derive(Subcommand, Debug)]
enum DiagnoseCmd {
    /// Mean attention distance per block and head.
    Locality {
        #[arg(long)]
        student: PathBuf,
        #[arg(long, default_value_t = 64)]
        images: usize,
    },
    /// Attention rollout saliency for one held-out image.
    Rollout {
        #[arg(long)]
        student: PathBuf,
        #[arg(long, default_value_t = 0)]
        image: usize,
        #[arg(long, value_enum, default_value_t = TokenArg::Cls)]
        token: TokenArg,
        /// Pixels per patch cell in the written image.
        #[arg(long, default_value_t = 8)]
        scale: usize,
    },
    /// Principal directions of all training features needed for tail-class features.
    Rank {
        #[arg(long)]
        student: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        tol: f64,
    },
    /// Teacher prediction entropy on weak versus strong-and-mixed views.
    Entropy {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
    /// Mean CLS–DIST cosine distance on held-out images.
    Divergence {
        #[arg(long)]
        student: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
