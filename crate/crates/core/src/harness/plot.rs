//! Plot-ready exports.
//!
//! `metrics_long.csv` has one `metric,step,value` row per logged number.
//! `histograms.csv` holds `step,bin,lo,hi,id_count,ood_count` for every
//! score snapshot, and `beta_curves.csv` holds
//! `step,s,id_density,ood_density,mixture_density` on a 256-point grid over
//! `[0, 1]` for every snapshot that carries mixture parameters.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use super::trainer::{RunLog, StepRecord, EVALS_HEADER, METRICS_HEADER};
use crate::betamix::{beta_pdf, clamp_score, BetaParams};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, ScoreSnapshot};
use crate::losses::LossBreakdown;
use crate::subspace::ScoreKind;

pub const CURVE_POINTS: usize = 256;

/// One row of `metrics_long.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct LongRow {
    pub metric: String,
    pub step: usize,
    pub value: f64,
}

pub fn long_rows(log: &RunLog) -> Vec<LongRow> {
    let mut rows = Vec::new();
    let mut push = |metric: &str, step: usize, value: f64| {
        rows.push(LongRow {
            metric: metric.to_string(),
            step,
            value,
        })
    };
    for r in &log.steps {
        let l = &r.loss;
        for (name, v) in [
            ("loss_total", l.total),
            ("loss_sup", l.sup),
            ("loss_semi", l.semi),
            ("loss_self", l.self_sup),
            ("loss_sub", l.sub),
            ("loss_reg", l.reg),
        ] {
            push(name, r.step, v);
        }
    }
    for r in &log.evals {
        if r.score_kind == ScoreKind::Subspace {
            push("accuracy", r.step, r.closed_set_accuracy);
        }
        push(&format!("auroc_{}", r.score_kind.name()), r.step, r.auroc);
    }
    rows
}

/// Grid points `i / 255`, clamped like scores are before density evaluation.
pub fn curve_grid() -> Vec<f64> {
    (0..CURVE_POINTS)
        .map(|i| i as f64 / (CURVE_POINTS - 1) as f64)
        .collect()
}

/// `(s, id density, ood density, π-weighted mixture density)` rows.
pub fn beta_curve(params: [f64; 4], pi: f64) -> Result<Vec<[f64; 4]>> {
    let id = BetaParams::new(params[0], params[1])?;
    let ood = BetaParams::new(params[2], params[3])?;
    curve_grid()
        .into_iter()
        .map(|s| {
            let c = clamp_score(s);
            let a = beta_pdf(id, c)?;
            let b = beta_pdf(ood, c)?;
            Ok([s, a, b, pi * a + (1.0 - pi) * b])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotFiles {
    pub metrics: PathBuf,
    pub histograms: PathBuf,
    pub beta_curves: PathBuf,
}

pub fn emit_plot_data(log: &RunLog, out_dir: &Path) -> Result<PlotFiles> {
    if log.steps.is_empty() {
        return Err(Error::InvalidInput("run log has no steps".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut metrics = String::from("metric,step,value\n");
    for r in long_rows(log) {
        writeln!(metrics, "{},{},{}", r.metric, r.step, r.value).unwrap();
    }
    let mut hist = String::from("step,bin,lo,hi,id_count,ood_count\n");
    let mut curves = String::from("step,s,id_density,ood_density,mixture_density\n");
    for snap in &log.snapshots {
        let bins = snap.id_hist.len();
        let width = (snap.hi - snap.lo) / bins as f64;
        for b in 0..bins {
            let lo = snap.lo + b as f64 * width;
            writeln!(
                hist,
                "{},{b},{lo},{},{},{}",
                snap.step,
                lo + width,
                snap.id_hist[b],
                snap.ood_hist[b]
            )
            .unwrap();
        }
        if let Some((params, pi)) = snap.beta {
            for [s, a, b, m] in beta_curve(params, pi)? {
                writeln!(curves, "{},{s},{a},{b},{m}", snap.step).unwrap();
            }
        }
    }
    let files = PlotFiles {
        metrics: out_dir.join("metrics_long.csv"),
        histograms: out_dir.join("histograms.csv"),
        beta_curves: out_dir.join("beta_curves.csv"),
    };
    std::fs::write(&files.metrics, metrics)?;
    std::fs::write(&files.histograms, hist)?;
    std::fs::write(&files.beta_curves, curves)?;
    Ok(files)
}

fn csv_lines(path: &Path, header: &str) -> Result<Vec<(usize, String)>> {
    let f = std::fs::File::open(path)?;
    let mut lines = BufReader::new(f).lines();
    let first = lines.next().transpose()?.unwrap_or_default();
    if first.trim() != header {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected header '{header}'"),
        });
    }
    let mut out = Vec::new();
    for (i, l) in lines.enumerate() {
        let l = l?;
        if !l.trim().is_empty() {
            out.push((i + 2, l));
        }
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, name: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        msg: format!("line {line}: bad {name} '{v}'"),
    })
}

pub fn read_long_metrics(path: &Path) -> Result<Vec<LongRow>> {
    csv_lines(path, "metric,step,value")?
        .into_iter()
        .map(|(n, l)| {
            let parts: Vec<&str> = l.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("line {n}: expected 3 fields"),
                });
            }
            Ok(LongRow {
                metric: parts[0].to_string(),
                step: field(path, n, "step", parts[1])?,
                value: field(path, n, "value", parts[2])?,
            })
        })
        .collect()
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<StepRecord>> {
    csv_lines(path, METRICS_HEADER)?
        .into_iter()
        .map(|(n, l)| {
            let p: Vec<&str> = l.split(',').collect();
            if p.len() != 20 {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("line {n}: expected 20 fields"),
                });
            }
            let f = |i: usize, name: &str| field::<f64>(path, n, name, p[i]);
            let hash = |i: usize| {
                u64::from_str_radix(p[i], 16).map_err(|_| Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("line {n}: bad hash '{}'", p[i]),
                })
            };
            Ok(StepRecord {
                step: field(path, n, "step", p[0])?,
                lr: f(1, "lr")?,
                loss: LossBreakdown {
                    total: f(2, "loss_total")?,
                    sup: f(3, "loss_sup")?,
                    semi: f(4, "loss_semi")?,
                    self_sup: f(5, "loss_self")?,
                    sub: f(6, "loss_sub")?,
                    reg: f(7, "loss_reg")?,
                    pseudo_label_count: field(path, n, "pseudo_labels", p[8])?,
                    degenerate_self: 0,
                    semi_gates_hash: hash(18)?,
                    sub_gates_hash: hash(19)?,
                },
                mask_rate: f(9, "mask_rate")?,
                beta: [
                    f(10, "alpha_id")?,
                    f(11, "beta_id")?,
                    f(12, "alpha_ood")?,
                    f(13, "beta_ood")?,
                ],
                basis_rank: field(path, n, "basis_rank", p[14])?,
                imm_id_mass: f(15, "imm_id_mass")?,
                imm_ood_mass: f(16, "imm_ood_mass")?,
                threshold: if p[17].is_empty() {
                    None
                } else {
                    Some(f(17, "threshold")?)
                },
            })
        })
        .collect()
}

pub fn read_evals_csv(path: &Path) -> Result<Vec<EvalReport>> {
    csv_lines(path, EVALS_HEADER)?
        .into_iter()
        .map(|(n, l)| {
            let p: Vec<&str> = l.split(',').collect();
            if p.len() != 6 {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("line {n}: expected 6 fields"),
                });
            }
            let kind = ScoreKind::from_name(p[1]).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                msg: format!("line {n}: unknown score '{}'", p[1]),
            })?;
            Ok(EvalReport {
                step: field(path, n, "step", p[0])?,
                score_kind: kind,
                closed_set_accuracy: field(path, n, "accuracy", p[2])?,
                auroc: field(path, n, "auroc", p[3])?,
                num_id: field(path, n, "num_id", p[4])?,
                num_ood: field(path, n, "num_ood", p[5])?,
            })
        })
        .collect()
}

/// Reads the log files of a run directory back.
pub fn load_run_log(dir: &Path) -> Result<RunLog> {
    let steps = read_metrics_csv(&dir.join("metrics.csv"))?;
    let evals_path = dir.join("evals.csv");
    let evals = if evals_path.exists() {
        read_evals_csv(&evals_path)?
    } else {
        Vec::new()
    };
    let snap_path = dir.join("snapshots.jsonl");
    let mut snapshots = Vec::new();
    if snap_path.exists() {
        for (i, line) in BufReader::new(std::fs::File::open(&snap_path)?)
            .lines()
            .enumerate()
        {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: ScoreSnapshot = serde_json::from_str(&line).map_err(|e| Error::Format {
                path: snap_path.clone(),
                msg: format!("line {}: {e}", i + 1),
            })?;
            snapshots.push(s);
        }
    }
    Ok(RunLog {
        steps,
        evals,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: usize) -> StepRecord {
        StepRecord {
            step,
            lr: 0.03,
            loss: LossBreakdown {
                sup: 1.5,
                total: 1.25,
                self_sup: -0.25,
                semi_gates_hash: 7,
                sub_gates_hash: 7,
                ..Default::default()
            },
            beta: [10.0, 2.0, 2.0, 10.0],
            mask_rate: 0.5,
            basis_rank: 3,
            imm_id_mass: 1.0,
            imm_ood_mass: 2.0,
            threshold: None,
        }
    }

    #[test]
    fn curve_integrates_to_one() {
        let rows = beta_curve([10.0, 2.0, 2.0, 10.0], 0.5).unwrap();
        assert_eq!(rows.len(), CURVE_POINTS);
        for col in 1..4 {
            let area: f64 = rows
                .windows(2)
                .map(|w| 0.5 * (w[0][col] + w[1][col]) * (w[1][0] - w[0][0]))
                .sum();
            assert!((area - 1.0).abs() < 1e-3, "column {col}: {area}");
        }
    }

    #[test]
    fn loss_only_log_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let log = RunLog {
            steps: vec![record(0), record(1)],
            ..Default::default()
        };
        let files = emit_plot_data(&log, dir.path()).unwrap();
        let rows = read_long_metrics(&files.metrics).unwrap();
        assert!(rows.iter().all(|r| r.metric.starts_with("loss_")));
        assert_eq!(rows, long_rows(&log));

        log.write(dir.path()).unwrap();
        let back = load_run_log(dir.path()).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn empty_log_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_plot_data(&RunLog::default(), dir.path()).is_err());
    }
}
