use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lrf_cli::pipeline::{cmd_analyze, cmd_eval, cmd_gen, cmd_sweep, cmd_train};
use lrf_cli::{exit_code, RunConfig, UsageError};
use lrf_core::exec::Execution;
use lrf_core::LrfVariant;

#[derive(Parser)]
#[command(name = "lrf", version, about = "Layer-wise representation fusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Sets both model.seed and train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides out_dir).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Run on the calling thread only.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn resolve(&self) -> anyhow::Result<(RunConfig, Execution)> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        for s in &self.overrides {
            cfg.set(s)?;
        }
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        let exec = if self.sequential {
            Execution::Sequential
        } else {
            Execution::default()
        };
        Ok((cfg, exec))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes log.jsonl and last/best checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from last.ckpt in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Decode splits and write metrics.json.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to best.ckpt in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated splits.
        #[arg(long, default_value = "test,cg_test", value_delimiter = ',')]
        split: Vec<String>,
        /// Score this prediction JSONL file instead of decoding.
        #[arg(long, value_name = "PATH")]
        predictions: Option<PathBuf>,
    },
    /// Write CTER breakdowns and fuse-attention probabilities as CSV.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Skip fuse_probs.csv (required for models without fuse-attention).
        #[arg(long)]
        skip_fuse_probs: bool,
    },
    /// Train and evaluate several variants over several seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variants (overrides sweep.variants).
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
}

fn print<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(value)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen { common } => {
            let (cfg, _) = common.resolve()?;
            print(&cmd_gen(&cfg)?)
        }
        Command::Train { common, resume } => {
            let (cfg, exec) = common.resolve()?;
            print(&cmd_train(&cfg, resume, exec)?)
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            predictions,
        } => {
            let (cfg, exec) = common.resolve()?;
            print(&cmd_eval(
                &cfg,
                checkpoint.as_deref(),
                &split,
                predictions.as_deref(),
                exec,
            )?)
        }
        Command::Analyze {
            common,
            checkpoint,
            skip_fuse_probs,
        } => {
            let (cfg, exec) = common.resolve()?;
            let a = cmd_analyze(&cfg, checkpoint.as_deref(), skip_fuse_probs, exec)?;
            print(&a.cter)
        }
        Command::Sweep { common, variants } => {
            let (mut cfg, exec) = common.resolve()?;
            if let Some(v) = variants {
                cfg.sweep.variants = v
                    .iter()
                    .map(|s| s.parse::<LrfVariant>().map_err(|e| UsageError(e.to_string())))
                    .collect::<Result<_, _>>()?;
            }
            print(&cmd_sweep(&cfg, exec)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
