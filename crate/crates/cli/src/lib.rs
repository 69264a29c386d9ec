//! Command-line driver: teacher pre-training, distillation, gradient checks,
//! mask exports and held-out evaluation.
//!
//! Exit codes are a stable contract: 0 ok, 2 configuration, 3 runtime,
//! 4 artifact mismatch, 5 gradient check failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use amd_core::config::{RunConfig, PRESETS};
use amd_core::distill::Term;
use amd_core::trainer::{
    evaluate_alignment, gradcheck, student_params, teacher_params, Checkpoint, CheckpointKind, GradcheckOptions,
    MetricRecord, Trainer,
};
use amd_core::Error;

pub mod masks;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;
pub const EXIT_ARTIFACT: u8 = 4;
pub const EXIT_GRADCHECK: u8 = 5;

#[derive(Parser, Debug)]
#[command(name = "amd", version, about = "Asymmetric masked distillation for masked-autoencoder pre-training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pre-train the teacher architecture as a plain masked autoencoder
    PretrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distill a student from a frozen pre-trained teacher
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic gradients of one loss term against finite differences
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "total")]
        term: Term,
        /// Probe every coordinate instead of a seeded sample per tensor
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = GradcheckOptions::default().probes_per_tensor)]
        probes: usize,
        /// Refuse to run above this many probed coordinates
        #[arg(long, default_value_t = GradcheckOptions::default().max_coords)]
        max_coords: usize,
    },
    /// Write student/teacher visibility masks as graymaps plus a JSON sidecar per sample
    ExportMasks {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mean direct-alignment error of a student against a teacher on held-out samples
    Eval {
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a preset (or a config file after merging) as JSON
    PrintConfig {
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// A failed command: the exit code plus the reason.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code,
            error: error.into(),
        }
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

/// Exit code for a core error raised outside of config loading.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Divisibility { .. } => EXIT_CONFIG,
        Error::CorruptHeader(_) | Error::Truncated { .. } | Error::HashMismatch(_) => EXIT_ARTIFACT,
        e if e.is_artifact_mismatch() => EXIT_ARTIFACT,
        _ => EXIT_RUNTIME,
    }
}

fn classify(err: Error) -> Failure {
    Failure::new(exit_code(&err), err)
}

/// Load and validate a config file; every failure here is a configuration error.
pub fn load_config(path: &Path, seed: Option<u64>) -> CmdResult<RunConfig> {
    if !path.exists() {
        return Err(Failure::new(EXIT_CONFIG, anyhow!("config file not found: {}", path.display())));
    }
    let mut cfg = RunConfig::load(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    cfg.validate()
        .with_context(|| format!("config {}", path.display()))
        .map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> CmdResult<Checkpoint> {
    Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(|e| Failure::new(EXIT_ARTIFACT, e))
}

/// Metrics stream written next to a checkpoint: `run.ckpt` → `run.metrics.jsonl`.
pub fn metrics_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("metrics.jsonl")
}

fn create(path: &Path) -> CmdResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(|e| Failure::new(EXIT_RUNTIME, e))
}

/// Train to completion, streaming metrics. If training aborts, the last good
/// state is still written to `out` before the failure is reported.
fn train(mut trainer: Trainer, out: &Path) -> CmdResult {
    let mut metrics = create(&metrics_path(out))?;
    let outcome = trainer.run(|record: &MetricRecord| {
        serde_json::to_writer(&mut metrics, record)?;
        metrics
            .write_all(b"\n")
            .map_err(|e| Error::Io {
                path: metrics_path(out),
                source: e,
            })
    });
    metrics
        .flush()
        .with_context(|| format!("writing {}", metrics_path(out).display()))
        .map_err(|e| Failure::new(EXIT_RUNTIME, e))?;
    let saved = trainer
        .checkpoint()
        .save(out)
        .with_context(|| format!("saving checkpoint {}", out.display()));
    match outcome {
        Ok(()) => {
            saved.map_err(|e| Failure::new(EXIT_RUNTIME, e))?;
            eprintln!("wrote {} after {} steps", out.display(), trainer.state().step);
            Ok(())
        }
        Err(e) => {
            let note = match saved {
                Ok(()) => format!("last good state (step {}) saved to {}", trainer.state().step, out.display()),
                Err(save) => format!("could not save the last good state: {save:#}"),
            };
            Err(Failure::new(exit_code(&e), anyhow::Error::new(e).context(note)))
        }
    }
}

fn pretrain_teacher(config: &Path, out: &Path, seed: Option<u64>) -> CmdResult {
    let cfg = load_config(config, seed)?;
    train(Trainer::pretrain(&cfg).map_err(classify)?, out)
}

fn distill(config: &Path, teacher: &Path, out: &Path, seed: Option<u64>) -> CmdResult {
    let cfg = load_config(config, seed)?;
    let ckpt = load_checkpoint(teacher)?;
    let teacher = teacher_params(&cfg, &ckpt)
        .with_context(|| format!("teacher {} does not fit the config", teacher.display()))
        .map_err(|e| Failure::new(EXIT_ARTIFACT, e))?;
    train(Trainer::distill(&cfg, &teacher).map_err(classify)?, out)
}

fn run_gradcheck(config: &Path, opts: &GradcheckOptions, stdout: &mut impl Write) -> CmdResult {
    let cfg = load_config(config, None)?;
    let report = gradcheck(&cfg, opts).map_err(classify)?;
    let io = |e: std::io::Error| Failure::new(EXIT_RUNTIME, e);
    if report.empty {
        writeln!(stdout, "empty term: {} is identically zero for this config", opts.term).map_err(io)?;
        return Ok(());
    }
    writeln!(stdout, "{:<32} {:>12} {:>7}  worst tensor", "group", "max rel err", "coords").map_err(io)?;
    for g in &report.groups {
        writeln!(stdout, "{:<32} {:>12.3e} {:>7}  {}", g.group, g.max_rel, g.coords, g.worst_tensor).map_err(io)?;
    }
    writeln!(
        stdout,
        "term {}: max relative error {:.3e} over {} coordinates (floor {:.2e}, tolerance {:.0e})",
        opts.term,
        report.max_rel(),
        report.probed,
        report.floor,
        report.tolerance
    )
    .map_err(io)?;
    if report.passed() {
        return Ok(());
    }
    let worst = report.worst().expect("a failing report has groups");
    Err(Failure::new(
        EXIT_GRADCHECK,
        anyhow!(
            "gradient check failed: `{}` has relative error {:.3e} > {:.0e}",
            worst.worst_tensor,
            worst.max_rel,
            report.tolerance
        ),
    ))
}

#[derive(Serialize)]
struct LayerScore {
    student_layer: usize,
    teacher_layer: usize,
    mean_error: f64,
}

#[derive(Serialize)]
struct EvalReport {
    samples: usize,
    seed: u64,
    layers: Vec<LayerScore>,
    mean: f64,
}

fn eval(student: &Path, teacher: &Path, samples: usize, seed: Option<u64>, stdout: &mut impl Write) -> CmdResult {
    if samples == 0 {
        return Err(Failure::new(EXIT_CONFIG, anyhow!("--samples must be at least 1")));
    }
    let student_ckpt = load_checkpoint(student)?;
    if student_ckpt.kind != CheckpointKind::Student {
        return Err(Failure::new(
            EXIT_ARTIFACT,
            anyhow!("{} is not a student checkpoint", student.display()),
        ));
    }
    let mut cfg: RunConfig = serde_json::from_value(student_ckpt.config.clone())
        .with_context(|| format!("config stored in {}", student.display()))
        .map_err(|e| Failure::new(EXIT_ARTIFACT, e))?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    let teacher_ckpt = load_checkpoint(teacher)?;
    let context = || format!("{} and {} are incompatible", student.display(), teacher.display());
    let teacher = teacher_params(&cfg, &teacher_ckpt)
        .with_context(context)
        .map_err(|e| Failure::new(EXIT_ARTIFACT, e))?;
    let params = student_params(&cfg, &student_ckpt)
        .with_context(context)
        .map_err(|e| Failure::new(EXIT_ARTIFACT, e))?;
    if let Some(expected) = &student_ckpt.teacher_hash {
        let found = amd_core::distill::teacher_encoder(&teacher).content_hash();
        if &found != expected {
            return Err(Failure::new(
                EXIT_ARTIFACT,
                anyhow::Error::new(Error::TeacherMismatch {
                    expected: expected.clone(),
                    found,
                })
                .context(context()),
            ));
        }
    }
    let means = evaluate_alignment(&cfg, &params, &teacher, samples).map_err(classify)?;
    let report = EvalReport {
        samples,
        seed: cfg.train.seed,
        layers: cfg
            .model
            .alignment
            .layer_pairs
            .iter()
            .zip(&means)
            .map(|(&(s, t), &m)| LayerScore {
                student_layer: s,
                teacher_layer: t,
                mean_error: m,
            })
            .collect(),
        mean: means.iter().sum::<f64>() / means.len() as f64,
    };
    serde_json::to_writer_pretty(&mut *stdout, &report).map_err(|e| Failure::new(EXIT_RUNTIME, e))?;
    writeln!(stdout).map_err(|e| Failure::new(EXIT_RUNTIME, e))
}

fn print_config(preset: Option<&str>, config: Option<&Path>, stdout: &mut impl Write) -> CmdResult {
    let cfg = match (preset, config) {
        (_, Some(path)) => load_config(path, None)?,
        (name, None) => RunConfig::preset(name.unwrap_or(PRESETS[0])).map_err(classify)?,
    };
    serde_json::to_writer_pretty(&mut *stdout, &cfg.to_json()).map_err(|e| Failure::new(EXIT_RUNTIME, e))?;
    writeln!(stdout).map_err(|e| Failure::new(EXIT_RUNTIME, e))
}

/// Run one command, writing its report to `stdout`.
pub fn execute(cli: Cli, stdout: &mut impl Write) -> CmdResult {
    match cli.command {
        Command::PretrainTeacher { config, out, seed } => pretrain_teacher(&config, &out, seed),
        Command::Distill {
            config,
            teacher,
            out,
            seed,
        } => distill(&config, &teacher, &out, seed),
        Command::Gradcheck {
            config,
            term,
            full,
            probes,
            max_coords,
        } => {
            let opts = GradcheckOptions {
                term,
                full,
                probes_per_tensor: probes,
                max_coords,
                ..GradcheckOptions::default()
            };
            run_gradcheck(&config, &opts, stdout)
        }
        Command::ExportMasks {
            config,
            count,
            out,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let written = masks::export(&cfg, count, &out)
                .with_context(|| format!("exporting masks to {}", out.display()))
                .map_err(|e| Failure::new(EXIT_RUNTIME, e))?;
            eprintln!("wrote {written} files to {}", out.display());
            Ok(())
        }
        Command::Eval {
            student,
            teacher,
            samples,
            seed,
        } => eval(&student, &teacher, samples, seed, stdout),
        Command::PrintConfig { preset, config } => print_config(preset.as_deref(), config.as_deref(), stdout),
    }
}
