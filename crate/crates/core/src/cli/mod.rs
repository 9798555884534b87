//! Command-line front end: `gen-data`, `train-teacher`, `distill-student`,
//! `eval`, `oracle-check` and `sweep`.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error.
//! `KDLT_THREADS` caps the worker pool. Existing outputs are never replaced
//! unless `--force` is given.

pub mod checkpoint;
pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::harness::{self, EvalReport};
use crate::par;
use crate::seqlabel::oracle;
use crate::synthdata;
use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "kdlt", version, about = "Low-resolution text recognition by teacher-student distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(e) = self.epochs {
            overrides.push(format!("epochs={e}"));
        }
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic paired dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Easy, medium and hard fractions.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [1.0, 1.0, 1.0])]
        ratios: Vec<f64>,
        #[arg(long)]
        force: bool,
    },
    /// Train a teacher on high-resolution images.
    TrainTeacher {
        /// Dataset directory or manifest; defaults to `train_data` from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        force: bool,
    },
    /// Distill a low-resolution student from a frozen teacher.
    DistillStudent {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        force: bool,
    },
    /// Word accuracy per subset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the key=value report here as well as to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Cross-check beam search and label revision against brute force.
    OracleCheck {
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Accuracy under increasing blur and noise.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.5, 1.0, 1.5, 2.0])]
        blur: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.025, 0.05, 0.075, 0.1])]
        noise: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn write_output(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn data_path(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.train_data.clone())
        .ok_or_else(|| Error::Config("no dataset given (--data or train_data)".into()))
}

fn echo_config(out: &mut dyn Write, cfg: &RunConfig) -> Result<()> {
    writeln!(out, "# effective configuration\n{cfg}").map_err(|e| Error::io("writing stdout", e))
}

/// Runs one parsed command, writing human-readable output to `out`.
pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    let io = |e| Error::io("writing stdout", e);
    match command {
        Command::GenData {
            out: dir,
            n,
            seed,
            ratios,
            force,
        } => {
            refuse_overwrite(&dir.join(synthdata::MANIFEST_FILE), force)?;
            let ratios: [f64; 3] = ratios
                .try_into()
                .map_err(|_| Error::Config("--ratios needs three values".into()))?;
            let manifest = synthdata::generate_dataset(&dir, n, &ratios, seed)?;
            writeln!(out, "wrote {n} samples to {}", manifest.display()).map_err(io)?;
        }
        Command::TrainTeacher {
            data,
            out: ckpt,
            metrics,
            cfg,
            force,
        } => {
            let cfg = cfg.resolve()?;
            refuse_overwrite(&ckpt, force)?;
            if let Some(m) = &metrics {
                refuse_overwrite(m, force)?;
            }
            echo_config(out, &cfg)?;
            let samples = synthdata::load_dataset(&data_path(&data, &cfg)?)?;
            let (model, history) = harness::train_teacher(&samples, &cfg.train, |m| {
                let _ = writeln!(out, "epoch {m}");
            })?;
            checkpoint::save(&model, &ckpt)?;
            if let Some(m) = &metrics {
                write_output(m, &harness::metrics_csv(&history))?;
            }
            writeln!(out, "saved teacher to {}", ckpt.display()).map_err(io)?;
        }
        Command::DistillStudent {
            data,
            teacher,
            out: ckpt,
            metrics,
            cfg,
            force,
        } => {
            let cfg = cfg.resolve()?;
            refuse_overwrite(&ckpt, force)?;
            if let Some(m) = &metrics {
                refuse_overwrite(m, force)?;
            }
            echo_config(out, &cfg)?;
            let teacher = checkpoint::load(&teacher)?;
            let samples = synthdata::load_dataset(&data_path(&data, &cfg)?)?;
            let (model, history) = harness::distill_student(&samples, &teacher, &cfg.train, |m| {
                let _ = writeln!(out, "epoch {m}");
            })?;
            checkpoint::save(&model, &ckpt)?;
            if let Some(m) = &metrics {
                write_output(m, &harness::metrics_csv(&history))?;
            }
            writeln!(out, "saved student to {}", ckpt.display()).map_err(io)?;
        }
        Command::Eval {
            ckpt,
            data,
            report,
            force,
        } => {
            if let Some(r) = &report {
                refuse_overwrite(r, force)?;
            }
            let model = checkpoint::load(&ckpt)?;
            let samples = synthdata::load_dataset(&data)?;
            let rep: EvalReport = harness::evaluate(&model, &samples)?;
            write!(out, "{rep}").map_err(io)?;
            if let Some(r) = &report {
                write_output(r, &rep.to_string())?;
            }
        }
        Command::OracleCheck { trials, seed } => {
            let beam = oracle::beam_trials(trials, seed)?;
            let identity = oracle::identity_trials(trials, seed ^ 0x1d)?;
            let fallback = oracle::fallback_trials(trials, seed ^ 0xfb)?;
            for (name, o) in [("beam", beam), ("identity", identity), ("fallback", fallback)] {
                writeln!(
                    out,
                    "{name}: {} trials, {} failures, max deviation {:.3e}",
                    o.trials, o.failures, o.max_deviation
                )
                .map_err(io)?;
            }
            let max = beam.max_deviation.max(identity.max_deviation);
            writeln!(out, "max deviation {max:.3e}").map_err(io)?;
            if !(beam.passed() && identity.passed() && fallback.passed()) {
                return Err(Error::State("oracle check failed".into()));
            }
        }
        Command::Sweep {
            ckpt,
            data,
            out: csv,
            blur,
            noise,
            seed,
            force,
        } => {
            refuse_overwrite(&csv, force)?;
            let model = checkpoint::load(&ckpt)?;
            let samples = synthdata::load_dataset(&data)?;
            let rows = harness::robustness_sweep(&model, &samples, &blur, &noise, seed)?;
            let text = harness::sweep_csv(&rows);
            write_output(&csv, &text)?;
            write!(out, "{text}").map_err(io)?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn dispatch<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{rendered}")
            } else {
                write!(err, "{rendered}")
            };
            return if code == 0 { 0 } else { 2 };
        }
    };
    par::init_threads(par::threads_from_env());
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}
