//! Sweeps over one configuration axis and the ablation matrix.
//!
//! Member runs execute one after another; results are keyed by the swept
//! value or the arm, and a failing member is recorded without stopping the
//! others.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::config::{RuleKind, TrainingConfig};
use super::run::{run_dir, train, train_with, RunSummary};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::subspace::ScoreKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    Pi,
    OodFraction,
    WSelf,
    WSub,
    WarmupSteps,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::Pi,
        SweepAxis::OodFraction,
        SweepAxis::WSelf,
        SweepAxis::WSub,
        SweepAxis::WarmupSteps,
    ];

    /// The configuration key the axis sets.
    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::Pi => "pi",
            SweepAxis::OodFraction => "ood_fraction",
            SweepAxis::WSelf => "w_self",
            SweepAxis::WSub => "w_sub",
            SweepAxis::WarmupSteps => "K_p",
        }
    }

    pub fn from_key(s: &str) -> Option<Self> {
        SweepAxis::ALL.into_iter().find(|a| a.key() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub outcome: std::result::Result<RunSummary, String>,
}

fn member(base: &TrainingConfig, key: &str, value: &str) -> Result<TrainingConfig> {
    let mut cfg = base.clone();
    cfg.set(key, value)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run_member(
    cfg: Result<TrainingConfig>,
    out_root: Option<&Path>,
) -> std::result::Result<RunSummary, String> {
    let cfg = cfg.map_err(|e| e.to_string())?;
    train(&cfg, out_root)
        .map(|o| o.summary)
        .map_err(|e| e.to_string())
}

/// One independent run per value of `axis`.
pub fn sweep(
    base: &TrainingConfig,
    axis: SweepAxis,
    values: &[String],
    out_root: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    for v in values {
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => {}
            _ => {
                return Err(Error::Config(format!(
                    "sweep value '{v}' is not a finite number"
                )))
            }
        }
    }
    let rows: Vec<SweepRow> = values
        .iter()
        .map(|v| SweepRow {
            value: v.clone(),
            outcome: run_member(member(base, axis.key(), v), out_root),
        })
        .collect();
    if let Some(root) = out_root {
        std::fs::create_dir_all(root)?;
        std::fs::write(
            root.join(format!("sweep-{}.csv", axis.key())),
            sweep_table(axis, &rows),
        )?;
    }
    Ok(rows)
}

fn summary_columns() -> String {
    let kinds: Vec<String> = ScoreKind::ALL
        .iter()
        .map(|k| format!("auroc_{}", k.name()))
        .collect();
    format!("run_name,accuracy,{},error", kinds.join(","))
}

fn summary_cells(outcome: &std::result::Result<RunSummary, String>) -> String {
    match outcome {
        Ok(s) => {
            let aurocs: Vec<String> = ScoreKind::ALL
                .iter()
                .map(|&k| s.auroc_of(k).to_string())
                .collect();
            format!("{},{},{},", s.run_name, s.accuracy, aurocs.join(","))
        }
        Err(e) => format!(
            ",,{},\"{}\"",
            vec![""; ScoreKind::ALL.len()].join(","),
            e.replace('"', "'")
        ),
    }
}

pub fn sweep_table(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut out = format!("{},{}\n", axis.key(), summary_columns());
    for r in rows {
        writeln!(out, "{},{}", r.value, summary_cells(&r.outcome)).unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub use_self: bool,
    pub use_sub: bool,
    pub outcome: std::result::Result<RunSummary, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleRow {
    pub rule: RuleKind,
    pub outcome: std::result::Result<RunSummary, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// `{ℓ_self, ℓ_sub}` on/off, with the sampled-mask rule.
    pub grid: Vec<GridCell>,
    /// All losses on, one row per decision rule.
    pub rules: Vec<RuleRow>,
    /// Every score kind on the full arm's EMA model at the end of warm-up.
    pub warmup_scores: std::result::Result<Vec<EvalReport>, String>,
}

impl AblationReport {
    pub fn cell(&self, use_self: bool, use_sub: bool) -> Option<&RunSummary> {
        self.grid
            .iter()
            .find(|c| c.use_self == use_self && c.use_sub == use_sub)
            .and_then(|c| c.outcome.as_ref().ok())
    }

    pub fn rule(&self, rule: RuleKind) -> Option<&RunSummary> {
        self.rules
            .iter()
            .find(|r| r.rule == rule)
            .and_then(|r| r.outcome.as_ref().ok())
    }

    pub fn table(&self) -> String {
        let mut out = format!("arm,{}\n", summary_columns());
        for c in &self.grid {
            writeln!(
                out,
                "grid_self{}_sub{},{}",
                c.use_self as u8,
                c.use_sub as u8,
                summary_cells(&c.outcome)
            )
            .unwrap();
        }
        for r in &self.rules {
            writeln!(out, "rule_{},{}", r.rule.name(), summary_cells(&r.outcome)).unwrap();
        }
        out
    }
}

/// Runs the loss grid, the decision rules and the warm-up score comparison.
/// The full arm (both losses, sampled masks) is trained once and shared by
/// all three.
pub fn ablate(base: &TrainingConfig, out_root: Option<&Path>) -> Result<AblationReport> {
    base.validate()?;
    let full = TrainingConfig {
        drop_self: false,
        drop_sub: false,
        decision: RuleKind::Sampled,
        ..base.clone()
    };

    let mut warmup: std::result::Result<Vec<EvalReport>, String> =
        Err("warm-up checkpoint not reached".into());
    let kp = full.warmup_steps;
    let full_outcome = {
        let mut hook = |t: &super::trainer::Trainer<'_>| -> Result<()> {
            let ev = t.evaluator()?;
            warmup = Ok(ev.reports(&ScoreKind::ALL, t.state.step)?);
            if let Some(root) = out_root {
                let dir = run_dir(&full, root);
                std::fs::create_dir_all(&dir)?;
                save_checkpoint(&full, &t.state, &dir.join("warmup_checkpoint.txt"))?;
            }
            Ok(())
        };
        train_with(&full, out_root, &[kp], &mut hook)
            .map(|o| o.summary)
            .map_err(|e| e.to_string())
    };

    let mut grid = Vec::new();
    for (use_self, use_sub) in [(true, true), (true, false), (false, true), (false, false)] {
        let outcome = if use_self && use_sub {
            full_outcome.clone()
        } else {
            let cfg = TrainingConfig {
                drop_self: !use_self,
                drop_sub: !use_sub,
                ..full.clone()
            };
            run_member(Ok(cfg), out_root)
        };
        grid.push(GridCell {
            use_self,
            use_sub,
            outcome,
        });
    }
    let mut rules = Vec::new();
    for rule in RuleKind::ALL {
        let outcome = if rule == RuleKind::Sampled {
            full_outcome.clone()
        } else {
            run_member(
                Ok(TrainingConfig {
                    decision: rule,
                    ..full.clone()
                }),
                out_root,
            )
        };
        rules.push(RuleRow { rule, outcome });
    }
    let report = AblationReport {
        grid,
        rules,
        warmup_scores: warmup,
    };
    if let Some(root) = out_root {
        std::fs::create_dir_all(root)?;
        std::fs::write(root.join("ablation.csv"), report.table())?;
        std::fs::write(
            root.join("ablation.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_keys_are_config_keys() {
        let mut cfg = TrainingConfig::default();
        for axis in SweepAxis::ALL {
            cfg.set(axis.key(), "1").unwrap();
            assert_eq!(SweepAxis::from_key(axis.key()), Some(axis));
        }
    }

    #[test]
    fn non_numeric_values_are_rejected() {
        let cfg = TrainingConfig::default();
        assert!(sweep(&cfg, SweepAxis::Pi, &["abc".into()], None).is_err());
        assert!(sweep(&cfg, SweepAxis::Pi, &[], None).is_err());
    }

    #[test]
    fn failed_members_are_recorded() {
        let row = SweepRow {
            value: "2".into(),
            outcome: run_member(member(&TrainingConfig::default(), "pi", "2"), None),
        };
        assert!(row.outcome.is_err());
        let table = sweep_table(SweepAxis::Pi, &[row]);
        assert_eq!(table.lines().count(), 2);
    }
}
