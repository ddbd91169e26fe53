use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtlab_cli::commands::{cmd_concentration, cmd_diagnose, cmd_eval, cmd_generate, cmd_pq, cmd_train};
use mtlab_cli::{CliError, Console, ExperimentConfig};

#[derive(Parser)]
#[command(name = "mtlab", version, about = "Shared-encoder multi-task learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Omit the timestamp header line from stdout.
    #[arg(long)]
    no_timestamp: bool,
}

impl Common {
    fn config(&self) -> Result<Option<ExperimentConfig>, CliError> {
        let Some(path) = &self.config else { return Ok(None) };
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(Some(cfg))
    }

    fn config_or_default(&self) -> Result<ExperimentConfig, CliError> {
        Ok(self.config()?.unwrap_or_else(|| ExperimentConfig { seed: self.seed.unwrap_or(0), ..Default::default() }))
    }

    fn console<'a>(&self, out: &'a mut dyn std::io::Write) -> Console<'a> {
        Console { out, timestamp: !self.no_timestamp }
    }

    fn out_dir(&self, cfg: Option<&ExperimentConfig>, fallback: PathBuf) -> PathBuf {
        self.out.clone().or_else(|| cfg.map(|c| c.out_dir.clone())).unwrap_or(fallback)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write one dataset file per task plus a manifest.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train the shared encoder and task decoders.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-task accuracy or PQ on the eval splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Smoothed loss, consecutive gradient cosines and the task-pair matrix of a run.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 10)]
        window: usize,
        /// Rolling window per matrix cell; 0 averages every pair.
        #[arg(long, default_value_t = 10)]
        matrix_window: usize,
    },
    /// Panoptic quality of a predicted mask file against a ground-truth file.
    Pq {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        class_aware: bool,
    },
    /// Cosine similarity spread of random vector pairs against dimension.
    Concentration {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "4,16,100,1024,10000")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 100_000)]
        pairs: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Generate { common } => {
            let cfg = common.config_or_default()?;
            let out = common.out_dir(Some(&cfg), cfg.out_dir.clone());
            cmd_generate(&cfg, &out, &mut common.console(&mut stdout))?;
        }
        Command::Train { common, resume } => {
            let cfg = common.config_or_default()?;
            let out = common.out_dir(Some(&cfg), cfg.out_dir.clone());
            cmd_train(&cfg, &out, resume.as_deref(), &mut common.console(&mut stdout))?;
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.config()?;
            let fallback = checkpoint.parent().map(PathBuf::from).unwrap_or_default();
            let out = common.out_dir(cfg.as_ref(), fallback);
            cmd_eval(&checkpoint, cfg.as_ref(), &out, &mut common.console(&mut stdout))?;
        }
        Command::Diagnose { common, run, window, matrix_window } => {
            let out = common.out.clone().unwrap_or_else(|| run.clone());
            let matrix_window = (matrix_window > 0).then_some(matrix_window);
            cmd_diagnose(&run, window, matrix_window, &out, &mut common.console(&mut stdout))?;
        }
        Command::Pq { common, pred, gt, class_aware } => {
            cmd_pq(&pred, &gt, class_aware, &mut common.console(&mut stdout))?;
        }
        Command::Concentration { common, dims, pairs } => {
            let cfg = common.config()?;
            let seed = common.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
            let out = common.out_dir(cfg.as_ref(), PathBuf::from("out"));
            cmd_concentration(&dims, pairs, seed, &out, &mut common.console(&mut stdout))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mtlab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
