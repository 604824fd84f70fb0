//! The five loss terms, their gradients with respect to network outputs, and
//! the weighted objective.
//!
//! Stop-gradient rules: weak-view predictions and features are constants for
//! the pseudo-label and self-supervision terms; the subspace basis is a
//! constant for the subspace term, which differentiates through the weak-view
//! features only.

use serde::{Deserialize, Serialize};

use crate::decide::LossGates;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::nn::{backward, ForwardTrace, MlpParams, Upstream};
use crate::subspace::{score_with_gradient, IdSubspaceBasis};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_semi: f64,
    pub w_self: f64,
    pub w_sub: f64,
    pub w_reg: f64,
    /// Confidence threshold of the pseudo-label term.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_semi: 1.0,
            w_self: 1.0,
            w_sub: 1.0,
            w_reg: 5e-4,
            tau: 0.95,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w_semi", self.w_semi),
            ("w_self", self.w_self),
            ("w_sub", self.w_sub),
            ("w_reg", self.w_reg),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and nonnegative, got {w}"
                )));
            }
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!(
                "tau must lie in (0,1], got {}",
                self.tau
            )));
        }
        Ok(())
    }

    /// Weights actually applied at a step. Warm-up zeroes the pseudo-label
    /// and subspace terms; the ablation flags zero their terms throughout.
    pub fn effective(&self, flags: AblationFlags, warmup: bool) -> EffectiveWeights {
        EffectiveWeights {
            semi: if warmup { 0.0 } else { self.w_semi },
            self_sup: if flags.drop_self { 0.0 } else { self.w_self },
            sub: if warmup || flags.drop_sub {
                0.0
            } else {
                self.w_sub
            },
            reg: self.w_reg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AblationFlags {
    pub drop_self: bool,
    pub drop_sub: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveWeights {
    pub semi: f64,
    pub self_sup: f64,
    pub sub: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub semi: f64,
    pub self_sup: f64,
    pub sub: f64,
    pub reg: f64,
    pub total: f64,
    pub pseudo_label_count: usize,
    /// Self-supervision terms dropped for zero-norm vectors.
    pub degenerate_self: usize,
    /// Fingerprints of the gates the pseudo-label and subspace terms were
    /// evaluated with; zero when the term was skipped.
    pub semi_gates_hash: u64,
    pub sub_gates_hash: u64,
}

fn log_softmax_row(row: &[f64]) -> (f64, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    (max, lse)
}

/// Cross-entropy of `target` under `logits`, and `softmax − onehot`.
fn cross_entropy_row(logits: &[f64], target: usize, grad: &mut [f64], scale: f64) -> f64 {
    let (_, lse) = log_softmax_row(logits);
    for (j, (g, l)) in grad.iter_mut().zip(logits).enumerate() {
        let p = (l - lse).exp();
        *g = scale * (p - if j == target { 1.0 } else { 0.0 });
    }
    lse - logits[target]
}

/// Index of the largest entry, ties broken toward the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Mean cross-entropy over the labeled batch; gradient w.r.t. the logits.
pub fn loss_sup(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    if labels.len() != n || n == 0 {
        return Err(Error::InvalidInput(
            "loss_sup: labels must match a nonempty batch".into(),
        ));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::InvalidInput(format!(
            "loss_sup: label {y} out of range"
        )));
    }
    let mut grad = Matrix::zeros(n, logits.cols());
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        total += cross_entropy_row(logits.row(i), y, grad.row_mut(i), scale);
    }
    Ok((total * scale, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiLoss {
    pub value: f64,
    pub count: usize,
    /// Gradient w.r.t. the strong-view logits.
    pub grad: Matrix,
}

/// Pseudo-label loss averaged over all `μB` samples. A sample contributes
/// when its weak-view confidence exceeds `tau`; its term is scaled by
/// `gates.semi_weight` (the ID mask, or the ID probability).
pub fn loss_semi(
    weak_probs: &Matrix,
    strong_logits: &Matrix,
    gates: &LossGates,
    tau: f64,
) -> Result<SemiLoss> {
    let n = weak_probs.rows();
    if strong_logits.rows() != n || gates.len() != n || strong_logits.cols() != weak_probs.cols() {
        return Err(Error::InvalidInput(
            "loss_semi: batch shapes disagree".into(),
        ));
    }
    let mut grad = Matrix::zeros(n, strong_logits.cols());
    if n == 0 {
        return Ok(SemiLoss {
            value: 0.0,
            count: 0,
            grad,
        });
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..n {
        let weight = gates.semi_weight[i];
        let probs = weak_probs.row(i);
        let pseudo = argmax(probs);
        if !(probs[pseudo] > tau) || weight == 0.0 {
            continue;
        }
        count += 1;
        total +=
            weight * cross_entropy_row(strong_logits.row(i), pseudo, grad.row_mut(i), weight * inv);
    }
    Ok(SemiLoss {
        value: total * inv,
        count,
        grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfLoss {
    pub value: f64,
    /// Terms skipped because `h(z̃)` or `z` had zero norm.
    pub degenerate: usize,
    /// Gradient w.r.t. `h(z̃)`.
    pub grad: Matrix,
}

/// Negative mean cosine between `h(z̃)` and the weak-view features.
pub fn loss_self(strong_projection: &Matrix, weak_features: &Matrix) -> Result<SelfLoss> {
    if !strong_projection.same_shape(weak_features) {
        return Err(Error::InvalidInput("loss_self: shapes disagree".into()));
    }
    let n = strong_projection.rows();
    let mut grad = Matrix::zeros(n, strong_projection.cols());
    if n == 0 {
        return Ok(SelfLoss {
            value: 0.0,
            degenerate: 0,
            grad,
        });
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    let mut degenerate = 0;
    for i in 0..n {
        let u = strong_projection.row(i);
        let z = weak_features.row(i);
        let un = norm(u);
        let zn = norm(z);
        if un == 0.0 || zn == 0.0 {
            degenerate += 1;
            continue;
        }
        let cos = dot(u, z) / (un * zn);
        total += cos;
        // d cos / du = z / (|u||z|) − cos u / |u|²
        let a = -inv / (un * zn);
        let b = inv * cos / (un * un);
        for ((g, ui), zi) in grad.row_mut(i).iter_mut().zip(u).zip(z) {
            *g = a * zi + b * ui;
        }
    }
    Ok(SelfLoss {
        value: -total * inv,
        degenerate,
        grad,
    })
}

/// `(1/μB) Σ sub_coef[i] · s(z_i)` and its gradient w.r.t. the features.
pub fn loss_sub(
    weak_features: &Matrix,
    basis: &IdSubspaceBasis,
    gates: &LossGates,
) -> Result<(f64, Matrix)> {
    let n = weak_features.rows();
    if gates.len() != n {
        return Err(Error::InvalidInput(
            "loss_sub: gates and batch differ in length".into(),
        ));
    }
    if weak_features.cols() != basis.dim() {
        return Err(Error::InvalidInput(
            "loss_sub: feature and basis dimensions differ".into(),
        ));
    }
    let mut grad = Matrix::zeros(n, weak_features.cols());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let coef = gates.sub_coef[i];
        let (s, g) = score_with_gradient(weak_features.row(i), basis);
        total += coef * s;
        for (o, gi) in grad.row_mut(i).iter_mut().zip(&g) {
            *o = coef * inv * gi;
        }
    }
    Ok((total * inv, grad))
}

/// `½ |θ|²`; its gradient is `θ`.
pub fn loss_reg(params: &MlpParams) -> f64 {
    0.5 * params.squared_norm()
}

/// `sup + w_semi·semi + w_self·self + w_sub·sub + w_reg·reg`.
pub fn total_loss(parts: &LossBreakdown, w: &EffectiveWeights) -> LossBreakdown {
    let total = parts.sup
        + w.semi * parts.semi
        + w.self_sup * parts.self_sup
        + w.sub * parts.sub
        + w.reg * parts.reg;
    LossBreakdown { total, ..*parts }
}

/// Constant inputs of one step's objective: labels, weak-view targets
/// (already detached), the basis, and the loss gates.
#[derive(Debug, Clone, Copy)]
pub struct StepTargets<'a> {
    pub labels: &'a [usize],
    pub weak_probs: &'a Matrix,
    pub weak_features: &'a Matrix,
    pub basis: Option<&'a IdSubspaceBasis>,
    pub gates: &'a LossGates,
    pub tau: f64,
}

/// Evaluates the weighted objective on one step's forward traces and
/// returns its parameter gradient. Terms with zero effective weight are
/// neither evaluated nor differentiated; the subspace term is also skipped
/// while no basis exists.
pub fn objective(
    params: &MlpParams,
    labeled: &ForwardTrace,
    weak: &ForwardTrace,
    strong: &ForwardTrace,
    targets: &StepTargets<'_>,
    weights: &EffectiveWeights,
) -> Result<(LossBreakdown, MlpParams)> {
    let mut parts = LossBreakdown::default();
    let mut grad = params.zeros_like();

    let (sup, d_sup) = loss_sup(&labeled.logits, targets.labels)?;
    parts.sup = sup;
    backward(
        params,
        labeled,
        Upstream {
            logits: Some(&d_sup),
            ..Default::default()
        },
        &mut grad,
    )?;

    let mut d_strong_logits = None;
    if weights.semi != 0.0 {
        let semi = loss_semi(
            targets.weak_probs,
            &strong.logits,
            targets.gates,
            targets.tau,
        )?;
        parts.semi = semi.value;
        parts.pseudo_label_count = semi.count;
        parts.semi_gates_hash = targets.gates.fingerprint();
        let mut g = semi.grad;
        for v in g.as_mut_slice() {
            *v *= weights.semi;
        }
        d_strong_logits = Some(g);
    }
    let mut d_projection = None;
    if weights.self_sup != 0.0 {
        let projection = strong.projection.as_ref().ok_or_else(|| {
            Error::InvalidInput("strong-view trace lacks the projection head".into())
        })?;
        let s = loss_self(projection, targets.weak_features)?;
        parts.self_sup = s.value;
        parts.degenerate_self = s.degenerate;
        let mut g = s.grad;
        for v in g.as_mut_slice() {
            *v *= weights.self_sup;
        }
        d_projection = Some(g);
    }
    if d_strong_logits.is_some() || d_projection.is_some() {
        let up = Upstream {
            features: None,
            logits: d_strong_logits.as_ref(),
            projection: d_projection.as_ref(),
        };
        backward(params, strong, up, &mut grad)?;
    }
    if weights.sub != 0.0 {
        if let Some(basis) = targets.basis {
            let (sub, mut d_feat) = loss_sub(weak.features(), basis, targets.gates)?;
            parts.sub = sub;
            parts.sub_gates_hash = targets.gates.fingerprint();
            for v in d_feat.as_mut_slice() {
                *v *= weights.sub;
            }
            backward(
                params,
                weak,
                Upstream {
                    features: Some(&d_feat),
                    ..Default::default()
                },
                &mut grad,
            )?;
        }
    }
    if weights.reg != 0.0 {
        parts.reg = loss_reg(params);
        grad.add_scaled(weights.reg, params);
    }
    Ok((total_loss(&parts, weights), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subspace::{compute_basis, ClassMeanTable};

    #[test]
    fn sup_examples() {
        let logits = Matrix::from_rows(&[[0.0, 0.0, 0.0, 0.0]]);
        let (v, _) = loss_sup(&logits, &[2]).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-15);
        let confident = Matrix::from_rows(&[[800.0, 0.0, 0.0]]);
        let (v, _) = loss_sup(&confident, &[0]).unwrap();
        assert_eq!(v, 0.0);
        assert!(loss_sup(&logits, &[4]).is_err());
    }

    #[test]
    fn semi_examples() {
        let weak = Matrix::from_rows(&[[0.5, 0.5], [0.9, 0.1]]);
        let strong = Matrix::from_rows(&[[0.3, 0.1], [0.2, 0.4]]);
        let none = loss_semi(&weak, &strong, &LossGates::all_id(2), 0.95).unwrap();
        assert_eq!((none.value, none.count), (0.0, 0));

        let weak = Matrix::from_rows(&[[0.99, 0.01], [0.98, 0.02]]);
        let mask = crate::decide::MaskBatch {
            m_id: vec![false, false],
            p_id: vec![0.1, 0.1],
        };
        let ood = loss_semi(&weak, &strong, &LossGates::from_mask(&mask), 0.95).unwrap();
        assert_eq!(ood.value, 0.0);
        assert!(ood.grad.as_slice().iter().all(|&g| g == 0.0));

        let weak = Matrix::from_rows(&[[0.99, 0.01], [0.6, 0.4], [0.5, 0.5], [0.2, 0.8]]);
        let strong = Matrix::from_rows(&[[0.0, 1.0], [0.0, 0.0], [3.0, 0.0], [0.0, 0.0]]);
        let one = loss_semi(&weak, &strong, &LossGates::all_id(4), 0.95).unwrap();
        let q = 1.0 / (1.0 + 1f64.exp());
        assert_eq!(one.count, 1);
        assert!((one.value - (-q.ln() / 4.0)).abs() < 1e-15);
    }

    #[test]
    fn self_examples() {
        let z = Matrix::from_rows(&[[1.0, 2.0, 0.0], [0.0, -1.0, 3.0]]);
        let s = loss_self(&z, &z).unwrap();
        assert!((s.value + 1.0).abs() < 1e-15);
        let u = Matrix::from_rows(&[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
        let w = Matrix::from_rows(&[[1.0, 1.0, 0.0], [0.0, 2.0, 5.0]]);
        assert_eq!(loss_self(&u, &w).unwrap().value, 0.0);
        let zero = Matrix::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let d = loss_self(&zero, &z).unwrap();
        assert_eq!(d.degenerate, 1);
        assert!(d.value.is_finite());
    }

    #[test]
    fn sub_examples() {
        let t = ClassMeanTable::from_means(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], 0.9)
            .unwrap();
        let b = compute_basis(&t).unwrap();
        let z = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        let mask = crate::decide::MaskBatch {
            m_id: vec![true, false],
            p_id: vec![0.9, 0.1],
        };
        let (v, _) = loss_sub(&z, &b, &LossGates::from_mask(&mask)).unwrap();
        assert!((v + 0.5).abs() < 1e-15);
        let zz = Matrix::from_rows(&[[1.0, 1.0, 2f64.sqrt()], [0.3, 0.0, 0.0]]);
        let (all_id, _) = loss_sub(&zz, &b, &LossGates::all_id(2)).unwrap();
        let mean_s = (1.0 / 2f64.sqrt() + 1.0) / 2.0;
        assert!((all_id + mean_s).abs() < 1e-12);
        let ood = crate::decide::MaskBatch {
            m_id: vec![false, false],
            p_id: vec![0.0, 0.0],
        };
        let (all_ood, _) = loss_sub(&zz, &b, &LossGates::from_mask(&ood)).unwrap();
        assert!((all_ood - mean_s).abs() < 1e-12);
    }

    #[test]
    fn reg_examples() {
        let arch = crate::nn::Architecture {
            input_dim: 1,
            hidden: vec![],
            feature_dim: 1,
            num_classes: 1,
            activation: crate::nn::Activation::Tanh,
        };
        let mut p = MlpParams::zeros(&arch);
        assert_eq!(loss_reg(&p), 0.0);
        p.values_mut()[0] = 2.0;
        assert_eq!(loss_reg(&p), 2.0);
    }

    #[test]
    fn warmup_and_zero_weights() {
        let w = LossWeights {
            w_semi: 1.0,
            w_self: 0.5,
            w_sub: 1.0,
            w_reg: 0.1,
            tau: 0.95,
        };
        let eff = w.effective(AblationFlags::default(), true);
        assert_eq!((eff.semi, eff.sub), (0.0, 0.0));
        let parts = LossBreakdown {
            sup: 1.0,
            semi: 2.0,
            self_sup: -0.5,
            sub: 0.3,
            reg: 4.0,
            ..Default::default()
        };
        let b = total_loss(&parts, &eff);
        assert!((b.total - (1.0 + 0.5 * -0.5 + 0.1 * 4.0)).abs() < 1e-12);
        let zero = EffectiveWeights {
            semi: 0.0,
            self_sup: 0.0,
            sub: 0.0,
            reg: 0.0,
        };
        assert_eq!(total_loss(&parts, &zero).total, 1.0);
        let flags = AblationFlags {
            drop_self: true,
            drop_sub: true,
        };
        let eff = w.effective(flags, false);
        assert_eq!((eff.semi, eff.self_sup, eff.sub), (1.0, 0.0, 0.0));
    }

    #[test]
    fn breakdown_identity() {
        let parts = LossBreakdown {
            sup: 0.7,
            semi: 0.2,
            self_sup: -0.9,
            sub: -0.4,
            reg: 33.0,
            ..Default::default()
        };
        let w = EffectiveWeights {
            semi: 1.0,
            self_sup: 0.3,
            sub: 1.0,
            reg: 5e-4,
        };
        let b = total_loss(&parts, &w);
        let expect =
            b.sup + w.semi * b.semi + w.self_sup * b.self_sup + w.sub * b.sub + w.reg * b.reg;
        assert!((b.total - expect).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_lower_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
