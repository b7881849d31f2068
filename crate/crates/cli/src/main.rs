use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use odced_cli::commands::{
    coarsen_cmd, evaluate_baselines, evaluate_files, gen_data, predict_cmd, train_cmd, verify_cmd, write_table,
};
use odced_cli::{CliError, CliResult, RunConfig};

/// Fine-grained origin-destination demand forecasting.
#[derive(Parser)]
#[command(name = "odced", version, propagate_version = true)]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one config entry, e.g. `--set train.max_epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: Vec<String>) -> CliResult<RunConfig> {
        let mut sets = self.set.clone();
        sets.extend(extra);
        RunConfig::load(self.config.as_deref(), &sets)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic city: grid, OD tensor, POI matrix and planted communities.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Map cells to super-cells by label propagation.
    Coarsen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        od: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        /// Assignment CSV; the coarse tensor and a JSON report are written beside it.
        #[arg(long)]
        out: PathBuf,
        /// Reference assignment to score with the adjusted Rand index.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Train on a data directory and write the best checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch history CSV; `history.csv` beside the checkpoint by default.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Forecast the slots following an OD history file.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a forecast file, or compare baselines on a data directory's test split.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, requires_all = ["truth", "out"], conflicts_with = "baselines")]
        pred: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// JSON report for `--pred`, CSV table for `--baselines` (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated subset of ha, ols, lasso.
        #[arg(long, value_delimiter = ',', requires = "data")]
        baselines: Option<Vec<String>>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Add a trained checkpoint to the baseline table.
        #[arg(long, requires = "baselines")]
        ckpt: Option<PathBuf>,
    },
    /// Run the built-in gradient, invariance, ZINB and oracle checks.
    Verify,
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { cfg, out, seed } => {
            let cfg = cfg.load(seed.map(|s| format!("data.seed={s}")).into_iter().collect())?;
            gen_data(&cfg, &out)
        }
        Command::Coarsen {
            cfg,
            od,
            grid,
            out,
            truth,
        } => coarsen_cmd(&cfg.load(Vec::new())?, &od, &grid, &out, truth.as_deref()).map(|_| ()),
        Command::Train {
            cfg,
            data,
            out,
            history,
            seed,
        } => {
            let cfg = cfg.load(seed.map(|s| format!("train.seed={s}")).into_iter().collect())?;
            let history = history.unwrap_or_else(|| out.parent().unwrap_or(Path::new(".")).join("history.csv"));
            train_cmd(&cfg, &data, &out, &history)
        }
        Command::Predict { ckpt, history, out } => predict_cmd(&ckpt, &history, &out),
        Command::Evaluate {
            cfg,
            pred,
            truth,
            out,
            baselines,
            data,
            ckpt,
        } => match (pred, baselines) {
            (Some(pred), None) => {
                let (truth, out) = (truth.expect("required by clap"), out.expect("required by clap"));
                evaluate_files(&pred, &truth, &out).map(|_| ())
            }
            (None, Some(methods)) => {
                let cfg = cfg.load(Vec::new())?;
                let rows = evaluate_baselines(&cfg, &data.expect("required by clap"), &methods, ckpt.as_deref())?;
                write_table(&rows, out.as_deref())
            }
            _ => Err(CliError::Usage("evaluate needs either --pred/--truth/--out or --baselines/--data".into())),
        },
        Command::Verify => verify_cmd().map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
