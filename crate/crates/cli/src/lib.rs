//! Batch front end: train, predict, eval, cv and cholesky-report.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use kcrf::atomic::write_atomic;
use kcrf::config::TrainConfig;
use kcrf::crossval::cross_validate;
use kcrf::data::{load_dataset, load_file, LineSlot};
use kcrf::lowrank::{candidate_anchors, incomplete_cholesky, Tolerance};
use kcrf::metrics::evaluate;
use kcrf::model::{fit, Model};
use kcrf::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "kcrf", version, about = "Kernel conditional random fields for sequence labeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model on labeled sequences and write it as JSON.
    Train {
        /// Labeled data file.
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Where to write the model.
        #[arg(long)]
        model: PathBuf,
        /// Write the per-iteration optimizer log (tab-separated) here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Decode the most probable labeling of every sequence.
    Predict {
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Output file; defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a model on labeled data.
    Eval {
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// k-fold cross-validation over sequences.
    Cv {
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        /// Shuffle sequences before assigning folds.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pivot order and captured Gram trace of the incomplete Cholesky basis.
    CholeskyReport {
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// JSON training configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> kcrf::Result<TrainConfig> {
        match &self.config {
            Some(path) => TrainConfig::load(path),
            None => Ok(TrainConfig::default()),
        }
    }
}

/// Failure of a command, carrying its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numerical(_) | Error::DegenerateKernel(_) | Error::Size { .. } => EXIT_NUMERICAL,
            _ => EXIT_INPUT,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: String) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message,
    }
}

fn internal(e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_INPUT,
        message: e.to_string(),
    }
}

fn emit(out: Option<&Path>, text: &str, stdout: &mut dyn Write) -> Result<(), Failure> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes())?,
        None => stdout.write_all(text.as_bytes()).map_err(|e| Failure {
            code: EXIT_INPUT,
            message: format!("writing output: {e}"),
        })?,
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns the exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if code == EXIT_OK {
                stdout.write_all(rendered.as_bytes())
            } else {
                stderr.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    match execute(cli.command, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}

fn execute(command: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), Failure> {
    match command {
        Command::Train {
            data,
            config,
            model,
            log,
        } => {
            let config = config.load()?;
            let data = load_dataset(&data)?;
            let outcome = fit(&data, &config)?;
            outcome.model.save(&model)?;
            if let Some(path) = log {
                let mut buf = Vec::new();
                outcome.state.write_log(&mut buf).map_err(internal)?;
                write_atomic(&path, &buf)?;
            }
            let objective = outcome.state.final_objective().unwrap_or(f64::NAN);
            let text = format!(
                "objective\t{objective:.10}\nconverged\t{}\niterations\t{}\nbasis_rank\t{}\n",
                outcome.state.converged,
                outcome.state.iteration,
                outcome.factor.rank()
            );
            emit(None, &text, stdout)?;
            if !outcome.state.converged {
                let _ = writeln!(
                    stderr,
                    "warning: stopped after {} iterations without reaching gradient_tolerance (remaining bound {:.3e})",
                    outcome.state.iteration,
                    outcome.state.block_bounds.sum()
                );
            }
            Ok(())
        }
        Command::Predict { data, model, out } => {
            let model = Model::load(&model)?;
            let parsed = load_file(&data, Some(&model.alphabet))?;
            let predictions = model.predict_dataset(&parsed.dataset)?;
            let mut text = String::new();
            for slot in &parsed.layout {
                match *slot {
                    LineSlot::Blank => text.push('\n'),
                    LineSlot::Position { sequence, position } => {
                        let label = predictions[sequence][position];
                        let _ = writeln!(text, "{}", model.alphabet.name(label).unwrap_or("?"));
                    }
                }
            }
            emit(out.as_deref(), &text, stdout)
        }
        Command::Eval { data, model, out } => {
            let model = Model::load(&model)?;
            let parsed = load_file(&data, Some(&model.alphabet))?;
            parsed.dataset.require_labeled()?;
            let predictions = model.predict_dataset(&parsed.dataset)?;
            let gold: Vec<Vec<usize>> = parsed
                .dataset
                .sequences
                .iter()
                .map(|s| s.require_labels().map(<[usize]>::to_vec))
                .collect::<kcrf::Result<_>>()?;
            let metrics = evaluate(&gold, &predictions, &model.alphabet)?;
            emit(out.as_deref(), &metrics.to_string(), stdout)
        }
        Command::Cv {
            data,
            config,
            folds,
            seed,
            out,
        } => {
            let config = config.load()?;
            let data = load_dataset(&data)?;
            if folds < 2 || folds > data.len() {
                return Err(usage(format!(
                    "--folds must be between 2 and the number of sequences ({}), got {folds}",
                    data.len()
                )));
            }
            let report = cross_validate(&data, &config, folds, seed)?;
            for fold in report.folds.iter().filter(|f| !f.outcome.state.converged) {
                let _ = writeln!(stderr, "warning: fold {} did not converge", fold.fold);
            }
            emit(out.as_deref(), &report.to_string(), stdout)
        }
        Command::CholeskyReport { data, config, out } => {
            let config = config.load()?;
            let data = load_dataset(&data)?;
            let spec = config.kernel_spec();
            let candidates = candidate_anchors(&data, &spec);
            let factor = incomplete_cholesky(
                &candidates,
                &spec,
                data.n_labels(),
                config.rank_budget,
                Tolerance::Relative(config.residual_tol),
            )?;
            let mut buf = Vec::new();
            factor.write_report(&mut buf).map_err(internal)?;
            emit(out.as_deref(), &String::from_utf8_lossy(&buf), stdout)
        }
    }
}
