use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tia::env::BackgroundMode;
use tia::error::Error;
use tia::nn::Checkpoint;
use tia::trainer::{self, AgentVariant, DiagnoseThresholds, LoadedAgent, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "tia", version, about = "Train and inspect paired task/distractor world-model agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an agent from a config file.
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        variant: Option<AgentVariant>,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        /// Continue the run saved in --out.
        #[arg(long)]
        resume: bool,
        /// Print every n-th metrics record to stderr.
        #[arg(long, default_value_t = 10)]
        print_every: usize,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        episodes: usize,
        /// Evaluate under a different background than training used.
        #[arg(long)]
        background: Option<BackgroundMode>,
        #[arg(long)]
        texture_seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write decomposition strips for a few real frames.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value = "render")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Return and reward-NLL plots from one or more metrics logs.
    Plot {
        /// Glob pattern of metrics logs.
        #[arg(long)]
        logs: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a metrics log for reconstruction takeover.
    Diagnose {
        #[arg(long)]
        log: PathBuf,
        /// Records to inspect; defaults to the last tenth of the log.
        #[arg(long)]
        window: Option<usize>,
        /// Take thresholds from this training config instead of the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train {
            config,
            seed,
            variant,
            out,
            resume,
            print_every,
        } => {
            let mut trainer = if resume {
                Trainer::resume(&out, None)?
            } else {
                let path = config.ok_or_else(|| Error::Config("--config is required".into()))?;
                let mut c = TrainConfig::from_file(&path)?;
                if let Some(s) = seed {
                    c.seed = s;
                }
                if let Some(v) = variant {
                    c.agent_variant = v;
                }
                Trainer::new(c, Some(&out))?
            };
            let mut seen = 0usize;
            let result = trainer.run_with(|r| {
                if seen % print_every.max(1) == 0 {
                    eprintln!(
                        "step {:>7}  return {:>7.2}  task_nll {:.3}  dist_nll {}  mean_nll {:.3}  mask {}",
                        r.env_step,
                        r.episodic_return,
                        r.task_reward_nll,
                        r.distractor_reward_nll.map_or("-".into(), |v| format!("{v:.3}")),
                        r.mean_predictor_nll,
                        r.mask_coverage.map_or("-".into(), |v| format!("{v:.3}")),
                    );
                }
                seen += 1;
            })?;
            emit(format_args!(
                "finished at env step {} with {} records in {}",
                trainer.state().env_step,
                result.metrics.len(),
                out.display()
            ))?;
        }
        Command::Eval {
            ckpt,
            episodes,
            background,
            texture_seed,
            seed,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let mut env = TrainConfig::from_toml(&ckpt.config)?.env;
            if let Some(b) = background {
                env.background_mode = b;
            }
            if let Some(t) = texture_seed {
                env.texture_seed = t;
            }
            let summary = trainer::evaluate(&ckpt, &env, episodes, seed)?;
            emit(serde_json::to_string_pretty(&summary)?)?;
        }
        Command::Render { ckpt, frames, out, seed } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let env = LoadedAgent::from_checkpoint(&ckpt)?.config.env;
            for path in trainer::render_report(&ckpt, &env, frames, seed, &out)? {
                emit(path.display())?;
            }
        }
        Command::Plot { logs, out } => {
            let paths: Vec<PathBuf> = glob::glob(&logs)
                .map_err(|e| Error::Config(format!("bad glob pattern: {e}")))?
                .collect::<Result<_, _>>()
                .map_err(|e| Error::Io(e.into()))?;
            if paths.is_empty() {
                return Err(Error::Config(format!("no files match {logs}")));
            }
            for f in trainer::plot(&paths, &out)?.files {
                emit(f.display())?;
            }
        }
        Command::Diagnose { log, window, config } => {
            let thresholds = match config {
                Some(path) => TrainConfig::from_file(&path)?.thresholds(),
                None => DiagnoseThresholds::default(),
            };
            let records = trainer::read_log(&log)?;
            let window = window.unwrap_or((records.len() / 10).max(trainer::diagnose::MIN_WINDOW));
            let report = trainer::diagnose(&records, window, &thresholds)?;
            emit(serde_json::to_string_pretty(&report)?)?;
        }
    }
    Ok(())
}

/// Writes one line to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(line: impl std::fmt::Display) -> Result<(), Error> {
    match writeln!(std::io::stdout().lock(), "{line}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Diverged { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
