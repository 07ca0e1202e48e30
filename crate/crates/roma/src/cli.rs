//! Argument parsing. Flags override the config file.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use roma_core::rncl::LossKind;

use crate::commands;
use crate::config::{RunConfig, SplitName};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "roma", version, about = "Point cloud / text matching on synthetic scenes")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset directory.
    Gen {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        noise_rate: Option<f64>,
        #[arg(long)]
        num_scenes: Option<usize>,
    },
    /// Train a model on the training split.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training log path; defaults to trainlog.jsonl next to the checkpoint.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, value_parser = parse_loss)]
        loss: Option<LossKind>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Metrics JSON path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = parse_split)]
        split: Option<SplitName>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        configurations: Option<usize>,
        /// Perturb one op's analytic gradient to exercise the failure path.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Tabulate the per-pair loss and its gradient.
    LossScan {
        /// Comma-separated alpha values.
        #[arg(long, value_delimiter = ',')]
        alpha: Option<Vec<f64>>,
        #[arg(long)]
        grid: Option<usize>,
        /// CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-token attention weights for chosen samples.
    AttnDump {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Scene ids, comma-separated.
        #[arg(long, value_delimiter = ',')]
        scene: Vec<usize>,
        /// Text ids, comma-separated.
        #[arg(long, value_delimiter = ',')]
        text: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    LossKind::ALL
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| format!("expected one of contrastive, complementary, rnc; got {s}"))
}

fn parse_split(s: &str) -> Result<SplitName, String> {
    match s {
        "train" => Ok(SplitName::Train),
        "val" => Ok(SplitName::Val),
        "test" => Ok(SplitName::Test),
        _ => Err(format!("expected train, val or test; got {s}")),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, value: Option<PathBuf>) {
    if value.is_some() {
        *slot = value;
    }
}

/// The effective configuration: file first, then flags.
pub fn effective_config(cli: Cli) -> CliResult<(RunConfig, Command)> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    let paths = &mut cfg.paths;
    match &cli.command {
        Command::Gen {
            out,
            noise_rate,
            num_scenes,
        } => {
            set_path(&mut paths.data_dir, out.clone());
            set(&mut cfg.data.noise_rate, *noise_rate);
            set(&mut cfg.generator.num_scenes, *num_scenes);
        }
        Command::Train {
            data,
            out,
            log,
            loss,
            alpha,
            tau,
            epochs,
            learning_rate,
            batch_size,
        } => {
            set_path(&mut paths.data_dir, data.clone());
            set_path(&mut paths.checkpoint, out.clone());
            set_path(&mut paths.trainlog, log.clone());
            set(&mut cfg.train.loss.kind, *loss);
            set(&mut cfg.train.loss.alpha, *alpha);
            set(&mut cfg.train.loss.tau, *tau);
            set(&mut cfg.train.epochs, *epochs);
            set(&mut cfg.train.learning_rate, *learning_rate);
            set(&mut cfg.train.batch_size, *batch_size);
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            split,
        } => {
            set_path(&mut paths.checkpoint, checkpoint.clone());
            set_path(&mut paths.data_dir, data.clone());
            set_path(&mut paths.metrics, out.clone());
            set(&mut cfg.eval.split, *split);
        }
        Command::Gradcheck {
            configurations,
            corrupt,
        } => {
            set(&mut cfg.gradcheck.configurations, *configurations);
            if corrupt.is_some() {
                cfg.gradcheck.corrupt = corrupt.clone();
            }
        }
        Command::LossScan { alpha, grid, out } => {
            set(&mut cfg.loss_scan.alphas, alpha.clone());
            set(&mut cfg.loss_scan.grid, *grid);
            set_path(&mut paths.loss_scan, out.clone());
        }
        Command::AttnDump {
            checkpoint,
            data,
            scene,
            text,
            out,
        } => {
            set_path(&mut paths.checkpoint, checkpoint.clone());
            set_path(&mut paths.data_dir, data.clone());
            set_path(&mut paths.attn_dump, out.clone());
            if !scene.is_empty() || !text.is_empty() {
                cfg.attn_dump.scenes = scene.clone();
                cfg.attn_dump.texts = text.clone();
            }
        }
    }
    cfg.validate()?;
    Ok((cfg, cli.command))
}

/// Parses `args` (including the program name), runs the command and returns
/// its report.
pub fn run<I, T>(args: I) -> CliResult<String>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            return Ok(e.to_string().trim_end().to_owned());
        }
        Err(e) => {
            let text = e.to_string();
            let text = text.strip_prefix("error: ").unwrap_or(&text);
            return Err(CliError::Usage(text.trim_end().to_owned()));
        }
    };
    let (cfg, command) = effective_config(cli)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker threads: {e}")))?;
    pool.install(|| match command {
        Command::Gen { .. } => commands::cmd_gen(&cfg),
        Command::Train { .. } => commands::cmd_train(&cfg),
        Command::Eval { .. } => commands::cmd_eval(&cfg),
        Command::Gradcheck { .. } => commands::cmd_gradcheck(&cfg),
        Command::LossScan { .. } => commands::cmd_loss_scan(&cfg),
        Command::AttnDump { .. } => commands::cmd_attn_dump(&cfg),
    })
}
