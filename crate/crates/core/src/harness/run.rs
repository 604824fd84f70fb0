//! Single training runs and their run directories.
//!
//! A run directory `<out_root>/<hash12>-seed<seed>/` holds `config.txt`,
//! `metrics.csv`, `evals.csv`, `snapshots.jsonl`, `checkpoint.txt` and
//! `summary.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::config::{TrainingConfig, KEYS};
use super::trainer::{RunLog, TrainState, Trainer};
use crate::data::generate;
use crate::error::Result;
use crate::eval::EvalReport;
use crate::subspace::ScoreKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_name: String,
    pub seed: u64,
    pub steps: usize,
    pub accuracy: f64,
    /// Final AUROC per score kind.
    pub auroc: BTreeMap<String, f64>,
    pub score_kind: String,
    pub primary_auroc: f64,
    /// Final `[α_id, β_id, α_ood, β_ood]`.
    pub beta: [f64; 4],
    pub config: BTreeMap<String, String>,
}

impl RunSummary {
    pub fn new(cfg: &TrainingConfig, state: &TrainState, finals: &[EvalReport]) -> Self {
        let auroc: BTreeMap<String, f64> = finals
            .iter()
            .map(|r| (r.score_kind.name().to_string(), r.auroc))
            .collect();
        Self {
            run_name: cfg.run_name(),
            seed: cfg.seed,
            steps: state.step,
            accuracy: finals
                .first()
                .map(|r| r.closed_set_accuracy)
                .unwrap_or(f64::NAN),
            primary_auroc: auroc
                .get(cfg.score_kind.name())
                .copied()
                .unwrap_or(f64::NAN),
            auroc,
            score_kind: cfg.score_kind.name().to_string(),
            beta: state.mixture.params_array(),
            config: KEYS
                .iter()
                .map(|k| (k.to_string(), cfg.get(k).expect("known key")))
                .collect(),
        }
    }

    pub fn auroc_of(&self, kind: ScoreKind) -> f64 {
        self.auroc.get(kind.name()).copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub log: RunLog,
    pub state: TrainState,
    pub run_dir: Option<PathBuf>,
    pub seconds: f64,
}

pub fn run_dir(cfg: &TrainingConfig, out_root: &Path) -> PathBuf {
    out_root.join(cfg.run_name())
}

fn write_outputs(
    dir: &Path,
    cfg: &TrainingConfig,
    log: &RunLog,
    state: &TrainState,
    checkpoint: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    log.write(dir)?;
    save_checkpoint(cfg, state, &dir.join(checkpoint))
}

/// Hook called by [`train_with`] at chosen steps, before evaluation.
pub type StepHook<'h> = dyn FnMut(&Trainer<'_>) -> Result<()> + 'h;

/// Trains `cfg` to completion, writing a run directory under `out_root`
/// when given. On failure the logs so far and the last valid state are
/// written before the error is returned.
pub fn train(cfg: &TrainingConfig, out_root: Option<&Path>) -> Result<RunOutcome> {
    train_with(cfg, out_root, &[], &mut |_| Ok(()))
}

/// [`train`] that pauses at each step count in `pauses` to call `hook`.
pub fn train_with(
    cfg: &TrainingConfig,
    out_root: Option<&Path>,
    pauses: &[usize],
    hook: &mut StepHook<'_>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let dataset = generate(&cfg.dataset_spec())?;
    let pool = dataset.training_pool();
    let mut trainer = Trainer::new(cfg.clone(), &dataset, &pool)?;
    let dir = out_root.map(|r| run_dir(cfg, r));

    let mut stops: Vec<usize> = pauses
        .iter()
        .copied()
        .filter(|&p| p <= cfg.total_steps)
        .collect();
    stops.push(cfg.total_steps);
    stops.sort_unstable();
    stops.dedup();
    let mut result = Ok(());
    for stop in stops {
        result = trainer.run_until(stop);
        if result.is_err() {
            break;
        }
        if stop < cfg.total_steps || pauses.contains(&stop) {
            result = hook(&trainer);
            if result.is_err() {
                break;
            }
        }
    }
    if let Err(e) = result {
        log::error!(
            "run {} failed at step {}: {e}",
            cfg.run_name(),
            trainer.state.step
        );
        if let Some(dir) = &dir {
            write_outputs(
                dir,
                cfg,
                &trainer.log,
                &trainer.state,
                "last_valid_checkpoint.txt",
            )?;
        }
        return Err(e);
    }

    let summary = RunSummary::new(cfg, &trainer.state, &trainer.log.final_evals());
    if let Some(dir) = &dir {
        write_outputs(dir, cfg, &trainer.log, &trainer.state, "checkpoint.txt")?;
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary)?,
        )?;
    }
    let seconds = start.elapsed().as_secs_f64();
    log::info!("run {} finished in {seconds:.1}s", cfg.run_name());
    Ok(RunOutcome {
        summary,
        log: trainer.log,
        state: trainer.state,
        run_dir: dir,
        seconds,
    })
}
