//! Closed-set accuracy, rank-based AUROC and score snapshots.

use serde::{Deserialize, Serialize};

use crate::betamix::BetaMixtureModel;
use crate::data::{LabeledItem, Sample};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::argmax;
use crate::nn::{forward_batch, MlpParams};
use crate::subspace::{alt_score, compute_basis, ClassMeanTable, IdSubspaceBasis, ScoreKind};

pub const SNAPSHOT_BINS: usize = 64;

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if probs.rows() == 0 || probs.rows() != labels.len() {
        return Err(Error::InvalidInput(
            "accuracy: need a nonempty batch with one label per row".into(),
        ));
    }
    let hits = probs
        .iter_rows()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mann–Whitney statistic from average ranks: the probability that an ID
/// score exceeds an OOD score, ties counting one half. Ranks are kept
/// doubled so the statistic is an exact integer.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::InvalidInput(
            "auroc: both score lists must be nonempty".into(),
        ));
    }
    if id_scores.iter().chain(ood_scores).any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("auroc: NaN score".into()));
    }
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the average (i+j+2)/2
        let doubled = (i + j + 2) as u128;
        let ids = all[i..=j].iter().filter(|e| e.1).count() as u128;
        rank_sum2 += doubled * ids;
        i = j + 1;
    }
    let n = id_scores.len() as u128;
    let m = ood_scores.len() as u128;
    let u2 = rank_sum2 - n * (n + 1);
    Ok(u2 as f64 / (2 * n * m) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: usize,
    pub score_kind: ScoreKind,
    pub closed_set_accuracy: f64,
    pub auroc: f64,
    pub num_id: usize,
    pub num_ood: usize,
}

/// Per-class means of the clean labeled inputs' features under `params`.
pub fn labeled_class_means(
    params: &MlpParams,
    labeled: &[LabeledItem],
    momentum: f64,
) -> Result<ClassMeanTable> {
    let arch = params.arch();
    let mut table = ClassMeanTable::new(arch.num_classes, arch.feature_dim, momentum)?;
    if labeled.is_empty() {
        return Ok(table);
    }
    let x = Matrix::from_rows(&labeled.iter().map(|l| l.x.as_slice()).collect::<Vec<_>>());
    let trace = forward_batch(params, &x, false)?;
    let labels: Vec<usize> = labeled.iter().map(|l| l.y).collect();
    // a first sighting sets the mean to the batch mean exactly
    table.update(trace.features(), &labels)?;
    Ok(table)
}

/// Features, logits and class probabilities of a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub features: Matrix,
    pub logits: Matrix,
    pub probs: Matrix,
}

pub fn embed(params: &MlpParams, samples: &[Sample]) -> Result<Embedded> {
    let x = Matrix::from_rows(&samples.iter().map(|s| s.x.as_slice()).collect::<Vec<_>>());
    let mut trace = forward_batch(params, &x, false)?;
    let features = trace.post.pop().expect("backbone has at least one layer");
    Ok(Embedded {
        features,
        logits: trace.logits,
        probs: trace.probs,
    })
}

/// Scores every row of `e` with `kind`.
pub fn score_rows(
    kind: ScoreKind,
    e: &Embedded,
    table: &ClassMeanTable,
    basis: &IdSubspaceBasis,
) -> Result<Vec<f64>> {
    (0..e.features.rows())
        .map(|i| alt_score(kind, e.features.row(i), Some(e.logits.row(i)), table, basis))
        .collect()
}

/// A model under evaluation: the parameters plus the class-mean table and
/// basis its subspace scores are measured against.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub table: ClassMeanTable,
    pub basis: IdSubspaceBasis,
    pub id: Embedded,
    pub ood: Embedded,
    pub id_labels: Vec<usize>,
}

impl Evaluator {
    /// Class means are recomputed from the labeled set under `params`.
    pub fn new(
        params: &MlpParams,
        labeled: &[LabeledItem],
        test_id: &[Sample],
        test_ood: &[Sample],
    ) -> Result<Self> {
        if test_id.is_empty() || test_ood.is_empty() {
            return Err(Error::InvalidInput(
                "evaluation needs nonempty ID and OOD test sets".into(),
            ));
        }
        let table = labeled_class_means(params, labeled, 0.0)?;
        let basis = compute_basis(&table)?;
        let id_labels = test_id
            .iter()
            .map(|s| {
                s.label
                    .ok_or_else(|| Error::InvalidInput("ID test sample without a label".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            table,
            basis,
            id: embed(params, test_id)?,
            ood: embed(params, test_ood)?,
            id_labels,
        })
    }

    pub fn accuracy(&self) -> Result<f64> {
        accuracy(&self.id.probs, &self.id_labels)
    }

    pub fn scores(&self, kind: ScoreKind) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((
            score_rows(kind, &self.id, &self.table, &self.basis)?,
            score_rows(kind, &self.ood, &self.table, &self.basis)?,
        ))
    }

    pub fn report(&self, kind: ScoreKind, step: usize) -> Result<EvalReport> {
        let (id, ood) = self.scores(kind)?;
        Ok(EvalReport {
            step,
            score_kind: kind,
            closed_set_accuracy: self.accuracy()?,
            auroc: auroc(&id, &ood)?,
            num_id: id.len(),
            num_ood: ood.len(),
        })
    }

    pub fn reports(&self, kinds: &[ScoreKind], step: usize) -> Result<Vec<EvalReport>> {
        kinds.iter().map(|&k| self.report(k, step)).collect()
    }

    pub fn snapshot(
        &self,
        kind: ScoreKind,
        step: usize,
        mixture: Option<&BetaMixtureModel>,
    ) -> Result<ScoreSnapshot> {
        let (id, ood) = self.scores(kind)?;
        Ok(ScoreSnapshot::new(kind, step, id, ood, mixture))
    }
}

/// Counts of `values` in `bins` equal-width bins over `[lo, hi]`; values
/// at or beyond the ends land in the end bins.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let b = if width > 0.0 {
            ((v - lo) / width).floor()
        } else {
            0.0
        };
        let b = if b.is_nan() || b < 0.0 {
            0
        } else {
            (b as usize).min(bins - 1)
        };
        counts[b] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSnapshot {
    pub score_kind: ScoreKind,
    pub step: usize,
    pub lo: f64,
    pub hi: f64,
    pub id_hist: Vec<usize>,
    pub ood_hist: Vec<usize>,
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
    /// `[α_id, β_id, α_ood, β_ood]` and `π` of the mixture at that step.
    pub beta: Option<([f64; 4], f64)>,
}

impl ScoreSnapshot {
    /// Subspace scores are binned over `[0, 1]`; other kinds over the
    /// observed range.
    pub fn new(
        kind: ScoreKind,
        step: usize,
        id: Vec<f64>,
        ood: Vec<f64>,
        mixture: Option<&BetaMixtureModel>,
    ) -> Self {
        let (lo, hi) = if kind == ScoreKind::Subspace {
            (0.0, 1.0)
        } else {
            let lo = id.iter().chain(&ood).copied().fold(f64::INFINITY, f64::min);
            let hi = id
                .iter()
                .chain(&ood)
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            if lo.is_finite() && hi > lo {
                (lo, hi)
            } else {
                (0.0, 1.0)
            }
        };
        Self {
            score_kind: kind,
            step,
            lo,
            hi,
            id_hist: histogram(&id, lo, hi, SNAPSHOT_BINS),
            ood_hist: histogram(&ood, lo, hi, SNAPSHOT_BINS),
            id_scores: id,
            ood_scores: ood,
            beta: mixture.map(|m| (m.params_array(), m.pi)),
        }
    }
}
