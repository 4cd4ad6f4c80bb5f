//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation error (bad arguments, config or
//! input format), 2 runtime failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{parse_config, BlobsConfig, ConfigError, DatasetConfig, RunConfig};
use crate::data::{load_datasets, save_datasets, synth_blobs, DataError, Dataset};
use crate::evidence::{bpa_from_confusion, ConfusionMatrix};
use crate::gradcheck::{run_suite, GradcheckError};
use crate::heads::HeadKind;
use crate::trainer::{fit_state, format_sig, RunState, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ubpa", version, about = "Evidence-scaled multi-objective training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train from a JSON config; writes metrics.csv and checkpoints to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory with MNIST/CIFAR-10 files, or a saved dataset container.
        #[arg(long, env = "UBPA_DATA_DIR")]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config; `false` pins Γ to 1.
        #[arg(long)]
        unified: Option<bool>,
        /// Also write the train/test data to `<out>/data.ubpa`.
        #[arg(long)]
        save_data: bool,
    },
    /// Print per-objective and combined test error of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = "UBPA_DATA_DIR")]
        data_dir: Option<PathBuf>,
    },
    /// Print masses and Γ for a confusion matrix CSV (rows = true class).
    Bpa {
        #[arg(long)]
        confusion: PathBuf,
    },
    /// Run the finite-difference gradient suite for one head.
    Gradcheck {
        #[arg(long)]
        head: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic blobs dataset container.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 300)]
        per_class: usize,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 6.0)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidParameter(_) | DataError::Unsatisfiable(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => c.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Invalid(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<GradcheckError> for CliError {
    fn from(e: GradcheckError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Runs `argv` (program name first) writing to the given streams; returns
/// the process exit code.
pub fn run_command_with(argv: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    return EXIT_OK;
                }
                _ => EXIT_VALIDATION,
            };
            let _ = write!(err, "{e}");
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.code()
        }
    }
}

/// [`run_command_with`] on the process's standard streams.
pub fn run_command(argv: &[String]) -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_command_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

fn load_data(cfg: &RunConfig, data_dir: Option<&Path>) -> Result<(Dataset, Dataset), CliError> {
    match data_dir {
        Some(p) if p.is_file() => Ok(load_datasets(p)?),
        Some(p) if matches!(cfg.dataset, DatasetConfig::Blobs(_)) && p.join("data.ubpa").is_file() => {
            Ok(load_datasets(&p.join("data.ubpa"))?)
        }
        _ => Ok(cfg.load_data(data_dir)?),
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<(), CliError> {
    let w = |out: &mut dyn Write, line: String| -> Result<(), CliError> {
        writeln!(out, "{line}").map_err(|e| CliError::Runtime(e.to_string()))
    };
    match cmd {
        Command::Train {
            config,
            data_dir,
            out: out_dir,
            unified,
            save_data,
        } => {
            let mut cfg = parse_config(&config)?;
            if let Some(u) = unified {
                cfg.unified = u;
            }
            let out_dir = out_dir
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| CliError::Validation("no output directory (--out)".into()))?;
            let (train, test) = load_data(&cfg, data_dir.as_deref())?;
            fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
            if save_data {
                save_datasets(&out_dir.join("data.ubpa"), &train, &test)?;
            }
            let mut state = RunState::from_config(&cfg)?;
            fit_state(&mut state, &cfg, &train, &test, Some(&out_dir), &mut |s| {
                let rows = &s.metrics[s.metrics.len() - s.objectives.len() - 1..];
                let parts: Vec<String> = rows
                    .iter()
                    .map(|r| format!("{} val {:.2}%", r.objective, r.val_err_pct))
                    .collect();
                let _ = writeln!(out, "epoch {}: {}", s.epoch, parts.join(", "));
            })?;
            w(out, format!("wrote {}", out_dir.join("metrics.csv").display()))
        }
        Command::Eval { checkpoint, data_dir } => {
            let (state, cfg) = RunState::load_checkpoint(&checkpoint)?;
            let (_, test) = load_data(&cfg, data_dir.as_deref())?;
            let ev = state.evaluate(&test)?;
            w(out, "objective,test_err_pct".into())?;
            for (o, cm) in state.objectives.iter().zip(&ev.per_objective) {
                w(out, format!("{},{}", o.kind, format_sig(cm.error_pct(), 12)))?;
            }
            w(out, format!("combined,{}", format_sig(ev.combined.error_pct(), 12)))
        }
        Command::Bpa { confusion } => {
            let text = fs::read_to_string(&confusion).map_err(|e| io_err(&confusion, e))?;
            let cm = ConfusionMatrix::from_csv(&text).map_err(|e| CliError::Validation(e.to_string()))?;
            let bpa = bpa_from_confusion(&cm);
            let masses: Vec<String> = bpa.masses.iter().map(|m| format_sig(*m, 12)).collect();
            w(out, format!("masses: {}", masses.join(" ")))?;
            w(out, format!("gamma: {}", format_sig(bpa.gamma, 12)))?;
            w(out, format!("degenerate: {}", bpa.degenerate))
        }
        Command::Gradcheck { head, seed } => {
            let kind = HeadKind::parse(&head)
                .ok_or_else(|| CliError::Validation(format!("unknown head `{head}` (softmax, svm, lda)")))?;
            let reports = run_suite(kind, seed)?;
            let mut worst: f64 = 0.0;
            let mut ok = true;
            for r in &reports {
                w(
                    out,
                    format!(
                        "{}: max relative error {:.3e} (tolerance {:.0e}, {} checked, {} skipped)",
                        r.target, r.max_rel_err, r.tolerance, r.checked, r.skipped
                    ),
                )?;
                worst = worst.max(r.max_rel_err);
                ok &= r.passed();
            }
            w(out, format!("max relative error: {worst:.3e}"))?;
            if ok {
                Ok(())
            } else {
                Err(CliError::Runtime("gradient check exceeded tolerance".into()))
            }
        }
        Command::Synth {
            out: path,
            classes,
            per_class,
            dim,
            separation,
            seed,
        } => {
            let b = BlobsConfig {
                classes,
                per_class,
                dim,
                separation,
                seed: Some(seed),
            };
            let (train, test) = synth_blobs(seed, b.classes, b.per_class, b.dim, b.separation)?;
            save_datasets(&path, &train, &test)?;
            w(
                out,
                format!("wrote {} ({} train, {} test)", path.display(), train.len(), test.len()),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let argv: Vec<String> = std::iter::once("ubpa").chain(args.iter().copied()).map(String::from).collect();
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run_command_with(&argv, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn bpa_worked_example() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("cm.csv");
        fs::write(&f, "8,2\n1,9\n").unwrap();
        let (code, out, _) = run(&["bpa", "--confusion", f.to_str().unwrap()]);
        assert_eq!(code, 0);
        assert!(out.contains("masses: 0.491277041172 0.508722958828"), "{out}");
        assert!(out.contains("gamma: 0.707214380525"), "{out}");
    }

    #[test]
    fn unknown_subcommand_is_validation_error() {
        assert_eq!(run(&["frobnicate"]).0, EXIT_VALIDATION);
        assert_eq!(run(&["gradcheck", "--head", "tree"]).0, EXIT_VALIDATION);
    }

    #[test]
    fn missing_file_is_runtime_error() {
        let (code, _, err) = run(&["bpa", "--confusion", "/nonexistent/cm.csv"]);
        assert_eq!(code, EXIT_RUNTIME);
        assert!(err.contains("nonexistent"));
    }

    #[test]
    fn gradcheck_softmax() {
        let (code, out, _) = run(&["gradcheck", "--head", "softmax", "--seed", "1"]);
        assert_eq!(code, 0, "{out}");
        assert!(out.contains("max relative error"));
    }
}
