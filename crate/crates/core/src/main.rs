use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use osslab::data::{generate, load_dataset, save_dataset};
use osslab::error::{Error, Result};
use osslab::eval::Evaluator;
use osslab::harness::checkpoint::load_checkpoint;
use osslab::harness::experiments::{ablate, sweep, SweepAxis};
use osslab::harness::plot::{emit_plot_data, load_run_log};
use osslab::harness::run::train;
use osslab::harness::TrainingConfig;
use osslab::subspace::ScoreKind;

#[derive(Parser)]
#[command(
    name = "osslab",
    version,
    about = "Open-set semi-supervised learning lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file in `key = value` format; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides as `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0..)]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainingConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainingConfig::load(p)?,
            None => TrainingConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset to a file.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one run.
    Train {
        #[arg(long, default_value = "runs")]
        out_root: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// One run per value of a config axis.
    Sweep {
        /// pi, ood_fraction, w_self, w_sub or K_p.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, default_value = "runs")]
        out_root: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Loss grid, decision rules and warm-up score comparison.
    Ablate {
        #[arg(long, default_value = "runs")]
        out_root: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint's EMA model on a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Score kind; all kinds when omitted.
        #[arg(long)]
        score: Option<String>,
    },
    /// Export plot-ready files for a run directory.
    EmitPlotData {
        #[arg(long)]
        run_dir: PathBuf,
        /// Defaults to `<run_dir>/plot`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn eval_cmd(checkpoint: &Path, dataset: &Path, score: Option<&str>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let ds = load_dataset(dataset)?;
    let kinds = match score {
        Some(name) => vec![ScoreKind::from_name(name)
            .ok_or_else(|| Error::Config(format!("unknown score '{name}'")))?],
        None => ScoreKind::ALL.to_vec(),
    };
    let pool = ds.training_pool();
    let ev = Evaluator::new(
        &ck.state.optim.ema_params,
        &pool.labeled,
        &ds.test_id,
        &ds.test_ood,
    )?;
    print_json(&ev.reports(&kinds, ck.state.step)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { out, cfg } => {
            let cfg = cfg.resolve()?;
            let ds = generate(&cfg.dataset_spec())?;
            save_dataset(&ds, &out)?;
            println!(
                "wrote {} ({} labeled, {} unlabeled)",
                out.display(),
                ds.labeled.len(),
                ds.unlabeled.len()
            );
        }
        Command::Train { out_root, cfg } => {
            let outcome = train(&cfg.resolve()?, Some(&out_root))?;
            print_json(&outcome.summary)?;
        }
        Command::Sweep {
            axis,
            values,
            out_root,
            cfg,
        } => {
            let axis = SweepAxis::from_key(&axis)
                .ok_or_else(|| Error::Config(format!("unknown sweep axis '{axis}'")))?;
            let rows = sweep(&cfg.resolve()?, axis, &values, Some(&out_root))?;
            print!("{}", osslab::harness::experiments::sweep_table(axis, &rows));
        }
        Command::Ablate { out_root, cfg } => {
            let report = ablate(&cfg.resolve()?, Some(&out_root))?;
            print!("{}", report.table());
        }
        Command::Eval {
            checkpoint,
            dataset,
            score,
        } => eval_cmd(&checkpoint, &dataset, score.as_deref())?,
        Command::EmitPlotData { run_dir, out } => {
            let log = load_run_log(&run_dir)?;
            let files = emit_plot_data(&log, &out.unwrap_or_else(|| run_dir.join("plot")))?;
            print_json(&[files.metrics, files.histograms, files.beta_curves])?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
