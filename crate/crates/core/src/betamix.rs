//! Two-component Beta mixture over scores in `(0, 1)`, fitted with the
//! iterated method of moments (IMM): an E-step computing posterior ID
//! weights, then an MM-step matching weighted first and second moments.
//!
//! [`imm_batch_step`] runs one E/MM step on a training batch and blends the
//! result into the running parameters with an EMA. [`fit_reference`] iterates
//! the same E/MM steps on a whole dataset until the parameters settle, and
//! serves as the offline oracle for the batch version.

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Scores are clamped into `(SCORE_CLAMP, 1 − SCORE_CLAMP)` before any
/// density evaluation.
pub const SCORE_CLAMP: f64 = 1e-6;
/// Floor applied to `alpha`/`beta` when the moment fit is over-dispersed.
pub const PARAM_FLOOR: f64 = 1e-2;
/// Minimum variance used by the moment fit; identical scores would
/// otherwise produce infinite parameters.
pub const MIN_VARIANCE: f64 = 1e-10;
/// Components with less total unlabeled weight than this are not refit.
pub const MIN_COMPONENT_MASS: f64 = 1e-6;
/// Components whose weights amount to fewer effective samples than this,
/// `(Σw)² / Σw²`, are not refit: a fit dominated by one or two scores has
/// a near-zero variance and an unbounded concentration.
pub const MIN_EFFECTIVE_SAMPLES: f64 = 8.0;

/// Kish effective sample size of a weight vector.
pub fn effective_samples(weights: &[f64]) -> f64 {
    let (mut sum, mut sq) = (0.0, 0.0);
    for w in weights {
        sum += w;
        sq += w * w;
    }
    if sq > 0.0 {
        sum * sum / sq
    } else {
        0.0
    }
}

pub fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "Beta parameters must be positive and finite, got ({alpha}, {beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn variance(&self) -> f64 {
        let t = self.alpha + self.beta;
        self.alpha * self.beta / (t * t * (t + 1.0))
    }

    pub fn moments(&self) -> MomentPair {
        MomentPair {
            mean: self.mean(),
            variance: self.variance(),
        }
    }
}

fn ln_beta_fn(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Beta density at `s`, evaluated in log space.
pub fn beta_pdf(p: BetaParams, s: f64) -> Result<f64> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::InvalidInput(format!(
            "beta_pdf needs 0 < s < 1, got {s}"
        )));
    }
    let log_density =
        (p.alpha - 1.0) * s.ln() + (p.beta - 1.0) * (-s).ln_1p() - ln_beta_fn(p.alpha, p.beta);
    Ok(log_density.exp())
}

/// Weighted first and second central moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentPair {
    pub mean: f64,
    pub variance: f64,
}

impl MomentPair {
    /// Whether a Beta distribution with these moments exists.
    pub fn is_beta_feasible(&self) -> bool {
        self.mean > 0.0
            && self.mean < 1.0
            && self.variance > 0.0
            && self.variance < self.mean * (1.0 - self.mean)
    }
}

pub fn weighted_moments(scores: &[f64], weights: &[f64]) -> Result<MomentPair> {
    if scores.len() != weights.len() {
        return Err(Error::InvalidInput(
            "scores and weights differ in length".into(),
        ));
    }
    let mut total = 0.0;
    let mut acc = 0.0;
    for (s, w) in scores.iter().zip(weights) {
        total += w;
        acc += w * s;
    }
    if total <= 0.0 {
        return Err(Error::EmptyComponent);
    }
    let mean = acc / total;
    let mut var = 0.0;
    for (s, w) in scores.iter().zip(weights) {
        var += w * (s - mean) * (s - mean);
    }
    Ok(MomentPair {
        mean,
        variance: var / total,
    })
}

/// Result of a moment fit; `clamped` reports that a guard kicked in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentFit {
    pub params: BetaParams,
    pub clamped: bool,
}

/// Closed-form Beta parameters from a mean and variance.
///
/// With `k = μ(1 − μ)/σ² − 1`, `α = μ k` and `β = (1 − μ) k`. When `k ≤ 0` the
/// variance is too large for any Beta; the smaller parameter is then set to
/// [`PARAM_FLOOR`] and the other chosen so that `α / (α + β) = μ`.
pub fn method_of_moments(m: MomentPair) -> MomentFit {
    let mut clamped = false;
    let mean = if m.mean.is_finite() {
        m.mean.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    } else {
        0.5
    };
    if mean != m.mean {
        clamped = true;
    }
    let variance = if m.variance.is_finite() && m.variance >= MIN_VARIANCE {
        m.variance
    } else {
        clamped = true;
        MIN_VARIANCE
    };
    let k = mean * (1.0 - mean) / variance - 1.0;
    let params = if k > 0.0 {
        BetaParams {
            alpha: mean * k,
            beta: (1.0 - mean) * k,
        }
    } else {
        clamped = true;
        if mean <= 0.5 {
            BetaParams {
                alpha: PARAM_FLOOR,
                beta: PARAM_FLOOR * (1.0 - mean) / mean,
            }
        } else {
            BetaParams {
                alpha: PARAM_FLOOR * mean / (1.0 - mean),
                beta: PARAM_FLOOR,
            }
        }
    };
    MomentFit { params, clamped }
}

/// Mixture of an ID and an OOD Beta component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaMixtureModel {
    pub id: BetaParams,
    pub ood: BetaParams,
    /// Prior proportion of ID data.
    pub pi: f64,
    /// Denominator regularizer of the posterior used for mask sampling.
    pub epsilon: f64,
    /// EMA momentum of the batch IMM update.
    pub lambda: f64,
}

impl BetaMixtureModel {
    /// ID near 1 (`Beta(10, 2)`), OOD near 0 (`Beta(2, 10)`).
    pub fn with_default_init(pi: f64, epsilon: f64, lambda: f64) -> Result<Self> {
        Self::new(
            BetaParams {
                alpha: 10.0,
                beta: 2.0,
            },
            BetaParams {
                alpha: 2.0,
                beta: 10.0,
            },
            pi,
            epsilon,
            lambda,
        )
    }

    pub fn new(
        id: BetaParams,
        ood: BetaParams,
        pi: f64,
        epsilon: f64,
        lambda: f64,
    ) -> Result<Self> {
        BetaParams::new(id.alpha, id.beta)?;
        BetaParams::new(ood.alpha, ood.beta)?;
        if !(pi > 0.0 && pi < 1.0) {
            return Err(Error::Config(format!(
                "pi must lie strictly inside (0,1), got {pi}"
            )));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be nonnegative, got {epsilon}"
            )));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!(
                "lambda must lie in [0,1], got {lambda}"
            )));
        }
        Ok(Self {
            id,
            ood,
            pi,
            epsilon,
            lambda,
        })
    }

    /// `[alpha_id, beta_id, alpha_ood, beta_ood]`.
    pub fn params_array(&self) -> [f64; 4] {
        [self.id.alpha, self.id.beta, self.ood.alpha, self.ood.beta]
    }
}

/// Posterior probability that a sample with score `s` is ID.
///
/// `s` is clamped into the open unit interval first. The regularized form
/// adds `epsilon` to the denominator and is meant for mask sampling only.
pub fn posterior_id(model: &BetaMixtureModel, s: f64, regularized: bool) -> f64 {
    let s = clamp_score(s);
    let id = model.pi * beta_pdf(model.id, s).unwrap_or(0.0);
    let ood = (1.0 - model.pi) * beta_pdf(model.ood, s).unwrap_or(0.0);
    let eps = if regularized { model.epsilon } else { 0.0 };
    let denom = id + ood + eps;
    if denom == 0.0 || !denom.is_finite() {
        warn!("posterior_id: densities under/overflowed at s={s}; falling back to prior");
        return model.pi;
    }
    (id / denom).clamp(0.0, 1.0)
}

/// Diagnostics of one batch IMM step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImmStepReport {
    pub id_mass: f64,
    pub ood_mass: f64,
    pub id_updated: bool,
    pub ood_updated: bool,
    pub clamped: bool,
}

/// One E-step and one MM-step on the current batch, blended in with the
/// model's EMA momentum. Labeled scores enter the ID moments at weight one.
pub fn imm_batch_step(
    model: &BetaMixtureModel,
    unlabeled_scores: &[f64],
    labeled_scores: &[f64],
) -> (BetaMixtureModel, ImmStepReport) {
    let s: Vec<f64> = unlabeled_scores.iter().map(|&v| clamp_score(v)).collect();
    let sl: Vec<f64> = labeled_scores.iter().map(|&v| clamp_score(v)).collect();

    // E-step
    let w_id: Vec<f64> = s.iter().map(|&v| posterior_id(model, v, false)).collect();
    let w_ood: Vec<f64> = w_id.iter().map(|w| 1.0 - w).collect();

    // MM-step, ID: labeled at weight 1 pooled with unlabeled at w_id
    let mut id_total = 0.0;
    let mut id_acc = 0.0;
    for &v in &sl {
        id_total += 1.0;
        id_acc += v;
    }
    let mut id_mass = 0.0;
    for (&v, &w) in s.iter().zip(&w_id) {
        id_total += w;
        id_acc += w * v;
        id_mass += w;
    }
    let mu_id = id_acc / id_total;
    let mut id_sq = 0.0;
    for &v in &sl {
        id_sq += (v - mu_id) * (v - mu_id);
    }
    for (&v, &w) in s.iter().zip(&w_id) {
        id_sq += w * (v - mu_id) * (v - mu_id);
    }
    let var_id = id_sq / id_total;

    // MM-step, OOD: unlabeled at w_ood
    let mut ood_mass = 0.0;
    let mut ood_acc = 0.0;
    for (&v, &w) in s.iter().zip(&w_ood) {
        ood_mass += w;
        ood_acc += w * v;
    }
    let mu_ood = ood_acc / ood_mass;
    let mut ood_sq = 0.0;
    for (&v, &w) in s.iter().zip(&w_ood) {
        ood_sq += w * (v - mu_ood) * (v - mu_ood);
    }
    let var_ood = ood_sq / ood_mass;

    let lambda = model.lambda;
    let ema = |old: BetaParams, new: BetaParams| BetaParams {
        alpha: lambda * old.alpha + (1.0 - lambda) * new.alpha,
        beta: lambda * old.beta + (1.0 - lambda) * new.beta,
    };
    let mut next = *model;
    let mut clamped = false;
    let id_ess = effective_samples(
        &sl.iter()
            .map(|_| 1.0)
            .chain(w_id.iter().copied())
            .collect::<Vec<_>>(),
    );
    let id_updated = id_mass >= MIN_COMPONENT_MASS && id_ess >= MIN_EFFECTIVE_SAMPLES;
    if id_updated {
        let fit = method_of_moments(MomentPair {
            mean: mu_id,
            variance: var_id,
        });
        clamped |= fit.clamped;
        next.id = ema(model.id, fit.params);
    }
    let ood_updated =
        ood_mass >= MIN_COMPONENT_MASS && effective_samples(&w_ood) >= MIN_EFFECTIVE_SAMPLES;
    if ood_updated {
        let fit = method_of_moments(MomentPair {
            mean: mu_ood,
            variance: var_ood,
        });
        clamped |= fit.clamped;
        next.ood = ema(model.ood, fit.params);
    }
    (
        next,
        ImmStepReport {
            id_mass,
            ood_mass,
            id_updated,
            ood_updated,
            clamped,
        },
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceFit {
    pub model: BetaMixtureModel,
    pub iterations: usize,
    pub converged: bool,
    /// Largest parameter change in the final iteration.
    pub last_change: f64,
}

/// One full-data IMM iteration with no EMA, built from the generic moment
/// routines.
pub fn reference_iteration(
    model: &BetaMixtureModel,
    scores: &[f64],
    labeled_scores: &[f64],
) -> BetaMixtureModel {
    let s: Vec<f64> = scores.iter().map(|&v| clamp_score(v)).collect();
    let w_id: Vec<f64> = s.iter().map(|&v| posterior_id(model, v, false)).collect();
    let w_ood: Vec<f64> = w_id.iter().map(|w| 1.0 - w).collect();

    let mut pooled: Vec<f64> = labeled_scores.iter().map(|&v| clamp_score(v)).collect();
    let mut pooled_w = vec![1.0; pooled.len()];
    pooled.extend_from_slice(&s);
    pooled_w.extend_from_slice(&w_id);

    let mut next = *model;
    let id_mass: f64 = w_id.iter().sum();
    if id_mass >= MIN_COMPONENT_MASS && effective_samples(&pooled_w) >= MIN_EFFECTIVE_SAMPLES {
        if let Ok(m) = weighted_moments(&pooled, &pooled_w) {
            next.id = method_of_moments(m).params;
        }
    }
    let ood_mass: f64 = w_ood.iter().sum();
    if ood_mass >= MIN_COMPONENT_MASS && effective_samples(&w_ood) >= MIN_EFFECTIVE_SAMPLES {
        if let Ok(m) = weighted_moments(&s, &w_ood) {
            next.ood = method_of_moments(m).params;
        }
    }
    next
}

/// Full-dataset IMM from the default initialization until the largest
/// parameter change drops below `tol` or `max_iters` is reached. On
/// non-convergence the last iterate is returned with `converged = false`.
pub fn fit_reference(
    scores: &[f64],
    labeled_scores: &[f64],
    pi: f64,
    max_iters: usize,
    tol: f64,
) -> Result<ReferenceFit> {
    if scores.len() < 10 {
        return Err(Error::InvalidInput(format!(
            "fit_reference needs at least 10 scores, got {}",
            scores.len()
        )));
    }
    let mut model = BetaMixtureModel::with_default_init(pi, 0.0, 0.0)?;
    let mut last_change = f64::INFINITY;
    for it in 1..=max_iters {
        let next = reference_iteration(&model, scores, labeled_scores);
        last_change = model
            .params_array()
            .iter()
            .zip(next.params_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        model = next;
        if last_change < tol {
            return Ok(ReferenceFit {
                model,
                iterations: it,
                converged: true,
                last_change,
            });
        }
    }
    warn!(
        "fit_reference: no convergence after {max_iters} iterations (last change {last_change:e})"
    );
    Ok(ReferenceFit {
        model,
        iterations: max_iters,
        converged: false,
        last_change,
    })
}
