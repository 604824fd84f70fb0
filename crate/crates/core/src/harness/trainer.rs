//! The training loop.
//!
//! Within step `k` the order is: forward passes; subspace scores and ID
//! posteriors from the basis and mixture left by step `k−1`; the ID/OOD
//! decision; losses and gradient; the SGD update; the class-mean update
//! from the step's labeled features (computed before the SGD update) and a
//! fresh basis; the batch IMM update from the step's scores; the parameter
//! EMA. Before the first class-mean update there is no basis: scoring, the
//! IMM update and the subspace term are skipped and decisions fall back to
//! the prior `π`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainingConfig;
use crate::betamix::{imm_batch_step, posterior_id, BetaMixtureModel};
use crate::data::{BatchStream, OpenSetDataset, TrainingPool};
use crate::decide::{decide, sample_mask, Decision, DecisionRule};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, Evaluator, ScoreSnapshot};
use crate::linalg::Matrix;
use crate::losses::{objective, EffectiveWeights, LossBreakdown, StepTargets};
use crate::nn::{forward_batch, MlpParams};
use crate::optim::{ema_update, sgd_step, OptimizerState};
use crate::rng::{self, StreamRng};
use crate::subspace::{compute_basis, subspace_score, ClassMeanTable, IdSubspaceBasis, ScoreKind};

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Index of the next step to run.
    pub step: usize,
    pub params: MlpParams,
    pub optim: OptimizerState,
    pub means: ClassMeanTable,
    pub mixture: BetaMixtureModel,
    pub rule: DecisionRule,
}

impl TrainState {
    pub fn initial(cfg: &TrainingConfig) -> Result<Self> {
        let params = MlpParams::init_seeded(&cfg.architecture(), cfg.seed);
        let optim = OptimizerState::new(&params, cfg.sgd_momentum, cfg.ema_momentum)?;
        Ok(Self {
            step: 0,
            means: ClassMeanTable::new(cfg.num_id_classes, cfg.feature_dim, cfg.lambda_means)?,
            mixture: cfg.initial_mixture()?,
            rule: cfg.decision_rule(),
            params,
            optim,
        })
    }

    /// Basis of the current class means; `None` before any mean exists.
    pub fn basis(&self) -> Result<Option<IdSubspaceBasis>> {
        if self.means.num_initialized() == 0 {
            return Ok(None);
        }
        compute_basis(&self.means).map(Some)
    }
}

/// One row of the per-step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// `[α_id, β_id, α_ood, β_ood]` after the step.
    pub beta: [f64; 4],
    /// Fraction of the unlabeled batch treated as ID (mean weight for the
    /// weighted rule).
    pub mask_rate: f64,
    pub basis_rank: usize,
    pub imm_id_mass: f64,
    pub imm_ood_mass: f64,
    /// EMA threshold of the Otsu rule, when in use.
    pub threshold: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,lr,loss_total,loss_sup,loss_semi,loss_self,loss_sub,loss_reg,pseudo_labels,mask_rate,alpha_id,beta_id,alpha_ood,beta_ood,basis_rank,imm_id_mass,imm_ood_mass,threshold,semi_gates_hash,sub_gates_hash";
pub const EVALS_HEADER: &str = "step,score_kind,accuracy,auroc,num_id,num_ood";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},",
            self.step,
            self.lr,
            l.total,
            l.sup,
            l.semi,
            l.self_sup,
            l.sub,
            l.reg,
            l.pseudo_label_count,
            self.mask_rate,
            self.beta[0],
            self.beta[1],
            self.beta[2],
            self.beta[3],
            self.basis_rank,
            self.imm_id_mass,
            self.imm_ood_mass
        )
        .unwrap();
        if let Some(t) = self.threshold {
            write!(s, "{t}").unwrap();
        }
        write!(s, ",{:016x},{:016x}", l.semi_gates_hash, l.sub_gates_hash).unwrap();
        s
    }
}

pub fn eval_csv_row(r: &EvalReport) -> String {
    format!(
        "{},{},{},{},{},{}",
        r.step,
        r.score_kind.name(),
        r.closed_set_accuracy,
        r.auroc,
        r.num_id,
        r.num_ood
    )
}

/// Append-only record of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalReport>,
    pub snapshots: Vec<ScoreSnapshot>,
}

impl RunLog {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::with_capacity(256 * (self.steps.len() + 1));
        out.push_str(METRICS_HEADER);
        out.push('\n');
        for r in &self.steps {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn evals_csv(&self) -> String {
        let mut out = String::from(EVALS_HEADER);
        out.push('\n');
        for r in &self.evals {
            out.push_str(&eval_csv_row(r));
            out.push('\n');
        }
        out
    }

    /// Reports of the last evaluation.
    pub fn final_evals(&self) -> Vec<EvalReport> {
        let Some(last) = self.evals.last().map(|r| r.step) else {
            return Vec::new();
        };
        self.evals
            .iter()
            .filter(|r| r.step == last)
            .cloned()
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        std::fs::write(dir.join("evals.csv"), self.evals_csv())?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("snapshots.jsonl"))?);
        for s in &self.snapshots {
            serde_json::to_writer(&mut f, s)?;
            writeln!(f)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Scores of each row; zero-norm features score 0.
fn row_scores(features: &Matrix, basis: &IdSubspaceBasis) -> Vec<f64> {
    features
        .iter_rows()
        .map(|z| subspace_score(z, basis).unwrap_or(0.0))
        .collect()
}

pub struct Trainer<'a> {
    pub cfg: TrainingConfig,
    pub state: TrainState,
    pub log: RunLog,
    dataset: &'a OpenSetDataset,
    pool: &'a TrainingPool,
    stream: BatchStream<'a>,
    mask_rng: StreamRng,
    basis: Option<IdSubspaceBasis>,
}

impl<'a> Trainer<'a> {
    /// `pool` must be `dataset.training_pool()`.
    pub fn new(
        cfg: TrainingConfig,
        dataset: &'a OpenSetDataset,
        pool: &'a TrainingPool,
    ) -> Result<Self> {
        cfg.validate()?;
        let stream = BatchStream::new(pool, cfg.batch_size, cfg.mu, cfg.augmentation(), cfg.seed)?;
        let state = TrainState::initial(&cfg)?;
        Ok(Self {
            mask_rng: rng::stream(cfg.seed, rng::STREAM_MASKS),
            cfg,
            state,
            log: RunLog::default(),
            dataset,
            pool,
            stream,
            basis: None,
        })
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.cfg.total_steps
    }

    fn effective_weights(&self, k: usize) -> EffectiveWeights {
        self.cfg
            .loss_weights()
            .effective(self.cfg.ablation(), self.cfg.schedule().in_warmup(k))
    }

    /// Runs step `state.step` and appends its record.
    pub fn step(&mut self) -> Result<&StepRecord> {
        let k = self.state.step;
        if k >= self.cfg.total_steps {
            return Err(Error::InvalidInput(format!(
                "step {k} beyond K = {}",
                self.cfg.total_steps
            )));
        }
        let batch = self.stream.next().expect("batch stream is infinite");
        let weights = self.effective_weights(k);
        let st = &mut self.state;

        let lab = forward_batch(&st.params, &Matrix::from_rows(&batch.labeled_weak), false)?;
        let weak = forward_batch(&st.params, &Matrix::from_rows(&batch.unlabeled_weak), false)?;
        let strong = forward_batch(
            &st.params,
            &Matrix::from_rows(&batch.unlabeled_strong),
            true,
        )?;

        let scores = self.basis.as_ref().map(|b| {
            (
                row_scores(weak.features(), b),
                row_scores(lab.features(), b),
            )
        });
        let decision = match &scores {
            Some((su, _)) => {
                let post: Vec<f64> = su
                    .iter()
                    .map(|&s| posterior_id(&st.mixture, s, true))
                    .collect();
                decide(
                    &mut st.rule,
                    su,
                    &post,
                    self.cfg.otsu_bins,
                    &mut self.mask_rng,
                )?
            }
            None => {
                let prior = vec![st.mixture.pi; batch.unlabeled_weak.len()];
                match st.rule {
                    DecisionRule::DirectWeight => Decision::Weights(prior),
                    _ => Decision::Mask(sample_mask(&prior, &mut self.mask_rng)),
                }
            }
        };
        let gates = decision.gates();

        let targets = StepTargets {
            labels: &batch.labels,
            weak_probs: &weak.probs,
            weak_features: weak.features(),
            basis: self.basis.as_ref(),
            gates: &gates,
            tau: self.cfg.tau,
        };
        let (loss, grad) = objective(&st.params, &lab, &weak, &strong, &targets, &weights)?;
        if !loss.total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at step {k}: {loss:?}"
            )));
        }
        let lr = self.cfg.schedule().lr(k)?;
        sgd_step(&mut st.params, &grad, &mut st.optim, lr)?;

        st.means.update(lab.features(), &batch.labels)?;
        let basis = compute_basis(&st.means)?;

        let (mut id_mass, mut ood_mass) = (0.0, 0.0);
        if let Some((su, sl)) = &scores {
            let (next, report) = imm_batch_step(&st.mixture, su, sl);
            st.mixture = next;
            id_mass = report.id_mass;
            ood_mass = report.ood_mass;
        }
        ema_update(&mut st.optim, &st.params)?;
        st.step += 1;

        let record = StepRecord {
            step: k,
            lr,
            loss,
            beta: st.mixture.params_array(),
            mask_rate: gates.id_rate(),
            basis_rank: basis.rank(),
            imm_id_mass: id_mass,
            imm_ood_mass: ood_mass,
            threshold: match st.rule {
                DecisionRule::OtsuThreshold { threshold, .. } => Some(threshold),
                _ => None,
            },
        };
        self.basis = Some(basis);
        self.log.steps.push(record);
        Ok(self.log.steps.last().expect("just pushed"))
    }

    /// Evaluator over the EMA parameters.
    pub fn evaluator(&self) -> Result<Evaluator> {
        Evaluator::new(
            &self.state.optim.ema_params,
            &self.pool.labeled,
            &self.dataset.test_id,
            &self.dataset.test_ood,
        )
    }

    /// Evaluates every score kind at the current step and logs the reports
    /// plus a subspace-score snapshot.
    pub fn evaluate(&mut self) -> Result<Vec<EvalReport>> {
        let ev = self.evaluator()?;
        let reports = ev.reports(&ScoreKind::ALL, self.state.step)?;
        let snap = ev.snapshot(
            ScoreKind::Subspace,
            self.state.step,
            Some(&self.state.mixture),
        )?;
        self.log.evals.extend(reports.iter().cloned());
        self.log.snapshots.push(snap);
        Ok(reports)
    }

    /// Runs until `state.step == target`, evaluating every `eval_every`
    /// steps and at `K`.
    pub fn run_until(&mut self, target: usize) -> Result<()> {
        let target = target.min(self.cfg.total_steps);
        while self.state.step < target {
            self.step()?;
            let s = self.state.step;
            if s.is_multiple_of(self.cfg.eval_every) || s == self.cfg.total_steps {
                self.evaluate()?;
                log::info!("step {s}: {}", self.progress_line());
            }
        }
        Ok(())
    }

    fn progress_line(&self) -> String {
        let finals = self.log.final_evals();
        let acc = finals
            .first()
            .map(|r| r.closed_set_accuracy)
            .unwrap_or(f64::NAN);
        let au = |k: ScoreKind| {
            finals
                .iter()
                .find(|r| r.score_kind == k)
                .map(|r| r.auroc)
                .unwrap_or(f64::NAN)
        };
        format!(
            "acc {acc:.4} auroc subspace {:.4} energy {:.4}",
            au(ScoreKind::Subspace),
            au(ScoreKind::Energy)
        )
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.cfg.total_steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;

    fn small() -> TrainingConfig {
        TrainingConfig {
            samples_per_class: 40,
            labeled_per_class: 8,
            test_per_class: 10,
            num_id_classes: 3,
            num_ood_clusters: 2,
            input_dim: 6,
            hidden: vec![8],
            feature_dim: 4,
            batch_size: 8,
            mu: 2,
            total_steps: 30,
            warmup_steps: 10,
            eval_every: 10,
            ..TrainingConfig::default()
        }
    }

    fn run(cfg: &TrainingConfig) -> RunLog {
        let ds = generate(&cfg.dataset_spec()).unwrap();
        let pool = ds.training_pool();
        let mut t = Trainer::new(cfg.clone(), &ds, &pool).unwrap();
        t.run().unwrap();
        t.log
    }

    #[test]
    fn warmup_never_logs_semi_or_sub() {
        let log = run(&small());
        for r in &log.steps {
            if r.step < 10 {
                assert_eq!((r.loss.semi, r.loss.sub), (0.0, 0.0));
                assert_eq!((r.loss.semi_gates_hash, r.loss.sub_gates_hash), (0, 0));
            } else {
                assert_eq!(r.loss.semi_gates_hash, r.loss.sub_gates_hash);
                assert_ne!(r.loss.sub, 0.0);
            }
        }
        assert_eq!(log.evals.len(), 3 * ScoreKind::ALL.len());
    }

    #[test]
    fn pure_warmup_run() {
        let cfg = TrainingConfig {
            warmup_steps: 30,
            ..small()
        };
        let log = run(&cfg);
        assert!(log
            .steps
            .iter()
            .all(|r| r.loss.semi == 0.0 && r.loss.sub == 0.0));
    }

    #[test]
    fn identical_seeds_identical_logs() {
        let a = run(&small());
        let b = run(&small());
        assert_eq!(a.metrics_csv(), b.metrics_csv());
        assert_eq!(a.evals_csv(), b.evals_csv());
        let c = run(&TrainingConfig { seed: 1, ..small() });
        assert_ne!(a.metrics_csv(), c.metrics_csv());
    }

    #[test]
    fn first_step_has_no_imm_update() {
        let log = run(&small());
        let init = small().initial_mixture().unwrap().params_array();
        assert_eq!(log.steps[0].beta, init);
        assert_eq!(log.steps[0].imm_id_mass, 0.0);
        assert_ne!(log.steps[1].beta, init);
    }
}
