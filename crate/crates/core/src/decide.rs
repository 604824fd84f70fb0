//! Turning posterior ID probabilities into what the losses consume.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampled ID/OOD masks of one unlabeled batch. The OOD mask is the
/// complement of the ID mask by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskBatch {
    pub m_id: Vec<bool>,
    /// Posteriors the masks were drawn from.
    pub p_id: Vec<f64>,
}

impl MaskBatch {
    pub fn len(&self) -> usize {
        self.m_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m_id.is_empty()
    }

    pub fn m_ood(&self, i: usize) -> bool {
        !self.m_id[i]
    }

    pub fn id_rate(&self) -> f64 {
        if self.m_id.is_empty() {
            return 0.0;
        }
        self.m_id.iter().filter(|&&m| m).count() as f64 / self.m_id.len() as f64
    }
}

/// `m_id[i] = 1{p[i] ≥ X_i}` with `X_i ~ U(0, 1]` drawn independently.
pub fn sample_mask<R: Rng + ?Sized>(p_id: &[f64], rng: &mut R) -> MaskBatch {
    let m_id = p_id
        .iter()
        .map(|&p| {
            // 1 - U[0,1) lies in (0,1], so p = 0 never passes and p = 1 always does
            let x = 1.0 - rng.random::<f64>();
            p >= x
        })
        .collect();
    MaskBatch {
        m_id,
        p_id: p_id.to_vec(),
    }
}

/// Classic Otsu threshold on an equal-width histogram over `[0, 1]`.
///
/// Candidate thresholds are the interior bin edges; the edge maximizing the
/// between-class variance wins, ties going to the lower edge. With a single
/// distinct score that score is returned; with every score in one bin their
/// mean is returned.
pub fn otsu_threshold(scores: &[f64], num_bins: usize) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidInput(
            "otsu_threshold needs at least one score".into(),
        ));
    }
    if num_bins < 2 {
        return Err(Error::InvalidInput(
            "otsu_threshold needs at least two bins".into(),
        ));
    }
    let first = scores[0];
    if scores.iter().all(|&s| s == first) {
        return Ok(first);
    }
    let mut hist = vec![0usize; num_bins];
    for &s in scores {
        hist[bin_index(s, num_bins)] += 1;
    }
    let width = 1.0 / num_bins as f64;
    let total = scores.len() as f64;
    let sum_total: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &h)| (i as f64 + 0.5) * width * h as f64)
        .sum();
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    let mut best = (f64::NEG_INFINITY, 0usize);
    // threshold at edge k splits bins [0, k) and [k, num_bins)
    for k in 1..num_bins {
        let h = hist[k - 1] as f64;
        w0 += h;
        sum0 += (k as f64 - 0.5) * width * h;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_total - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, k);
        }
    }
    if best.0 <= 0.0 {
        return Ok(scores.iter().sum::<f64>() / total);
    }
    Ok(best.1 as f64 * width)
}

pub(crate) fn bin_index(s: f64, num_bins: usize) -> usize {
    ((s.clamp(0.0, 1.0) * num_bins as f64) as usize).min(num_bins - 1)
}

pub const DEFAULT_OTSU_BINS: usize = 128;

/// How unlabeled samples are assigned to ID/OOD for the losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DecisionRule {
    /// Bernoulli masks drawn from the posteriors.
    SampledMask,
    /// Hard threshold on raw scores, tracked as an EMA of per-batch Otsu
    /// thresholds.
    OtsuThreshold { threshold: f64, momentum: f64 },
    /// The posteriors themselves, used as soft weights.
    DirectWeight,
}

impl DecisionRule {
    pub fn name(&self) -> &'static str {
        match self {
            DecisionRule::SampledMask => "sampled",
            DecisionRule::OtsuThreshold { .. } => "otsu",
            DecisionRule::DirectWeight => "weighted",
        }
    }
}

/// Per-sample coefficients the losses apply.
///
/// `sub_coef[i]` multiplies the subspace score of sample `i` (`m_ood − m_id`
/// or `1 − 2p`); `semi_weight[i]` gates or scales its pseudo-label term
/// (`m_id` or `p`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossGates {
    pub sub_coef: Vec<f64>,
    pub semi_weight: Vec<f64>,
}

impl LossGates {
    pub fn from_mask(mask: &MaskBatch) -> Self {
        let sub_coef = mask
            .m_id
            .iter()
            .map(|&m| if m { -1.0 } else { 1.0 })
            .collect();
        let semi_weight = mask
            .m_id
            .iter()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect();
        Self {
            sub_coef,
            semi_weight,
        }
    }

    pub fn from_weights(p_id: &[f64]) -> Self {
        Self {
            sub_coef: p_id.iter().map(|p| 1.0 - 2.0 * p).collect(),
            semi_weight: p_id.to_vec(),
        }
    }

    pub fn all_id(n: usize) -> Self {
        Self {
            sub_coef: vec![-1.0; n],
            semi_weight: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.sub_coef.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sub_coef.is_empty()
    }

    /// Mean of `semi_weight`: the ID rate for masks, mean `p` for weights.
    pub fn id_rate(&self) -> f64 {
        if self.semi_weight.is_empty() {
            return 0.0;
        }
        self.semi_weight.iter().sum::<f64>() / self.semi_weight.len() as f64
    }

    /// FNV-1a over the bit patterns of both coefficient vectors.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.sub_coef.iter().chain(&self.semi_weight) {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
        h
    }
}

/// Outcome of [`decide`].
#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Mask(MaskBatch),
    Weights(Vec<f64>),
}

impl Decision {
    pub fn gates(&self) -> LossGates {
        match self {
            Decision::Mask(m) => LossGates::from_mask(m),
            Decision::Weights(p) => LossGates::from_weights(p),
        }
    }
}

/// Applies `rule` to one unlabeled batch. `scores` are the raw scores (used
/// by the Otsu rule), `posteriors` the regularized ID posteriors. The Otsu
/// rule updates its EMA threshold in place before thresholding.
pub fn decide<R: Rng + ?Sized>(
    rule: &mut DecisionRule,
    scores: &[f64],
    posteriors: &[f64],
    num_bins: usize,
    rng: &mut R,
) -> Result<Decision> {
    match rule {
        DecisionRule::SampledMask => Ok(Decision::Mask(sample_mask(posteriors, rng))),
        DecisionRule::OtsuThreshold {
            threshold,
            momentum,
        } => {
            let t = otsu_threshold(scores, num_bins)?;
            *threshold = *momentum * *threshold + (1.0 - *momentum) * t;
            let thr = *threshold;
            let m_id = scores.iter().map(|&s| s >= thr).collect();
            Ok(Decision::Mask(MaskBatch {
                m_id,
                p_id: posteriors.to_vec(),
            }))
        }
        DecisionRule::DirectWeight => Ok(Decision::Weights(posteriors.to_vec())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Between-class variance at every interior edge computed straight from
    /// the sample list, using the bin-center value of each sample.
    fn brute_force_otsu(scores: &[f64], bins: usize) -> f64 {
        let width = 1.0 / bins as f64;
        let centers: Vec<f64> = scores
            .iter()
            .map(|&s| (bin_index(s, bins) as f64 + 0.5) * width)
            .collect();
        let mut best = (f64::NEG_INFINITY, 0.0);
        for k in 1..bins {
            let edge = k as f64 * width;
            let lo: Vec<f64> = centers.iter().copied().filter(|&c| c < edge).collect();
            let hi: Vec<f64> = centers.iter().copied().filter(|&c| c >= edge).collect();
            if lo.is_empty() || hi.is_empty() {
                continue;
            }
            let m0 = lo.iter().sum::<f64>() / lo.len() as f64;
            let m1 = hi.iter().sum::<f64>() / hi.len() as f64;
            let v = lo.len() as f64 * hi.len() as f64 * (m0 - m1).powi(2);
            if v > best.0 * (1.0 + 1e-12) {
                best = (v, edge);
            }
        }
        best.1
    }

    #[test]
    fn degenerate_probabilities() {
        let mut r = rng::stream(0, "mask");
        for _ in 0..1000 {
            let m = sample_mask(&[1.0, 0.0], &mut r);
            assert!(m.m_id[0]);
            assert!(!m.m_id[1]);
            assert!(m.m_ood(1));
        }
    }

    #[test]
    fn mask_rate_is_binomial() {
        let mut r = rng::stream(1, "mask");
        let n = 100_000;
        let p = vec![0.3; n];
        let rate = sample_mask(&p, &mut r).id_rate();
        assert!((rate - 0.3).abs() < 3.0 * (0.3f64 * 0.7 / n as f64).sqrt());
    }

    #[test]
    fn otsu_two_point_clusters() {
        let s = [0.1, 0.1, 0.9, 0.9];
        let t = otsu_threshold(&s, DEFAULT_OTSU_BINS).unwrap();
        assert!(t > 0.1 && t < 0.9);
        assert!((t - brute_force_otsu(&s, DEFAULT_OTSU_BINS)).abs() < 1e-15);
    }

    #[test]
    fn otsu_matches_brute_force_on_clusters() {
        use rand::Rng;
        let mut r = rng::stream(2, "otsu");
        for trial in 0..20 {
            let mut s: Vec<f64> = (0..100)
                .map(|_| (0.2 + 0.05 * (r.random::<f64>() - 0.5)).clamp(0.0, 1.0))
                .collect();
            s.extend((0..100).map(|_| (0.8 + 0.05 * (r.random::<f64>() - 0.5)).clamp(0.0, 1.0)));
            let t = otsu_threshold(&s, DEFAULT_OTSU_BINS).unwrap();
            assert!(t > 0.2 && t < 0.8, "trial {trial}: {t}");
            assert!((t - brute_force_otsu(&s, DEFAULT_OTSU_BINS)).abs() < 1e-15);
        }
    }

    #[test]
    fn otsu_degenerate_inputs() {
        assert_eq!(otsu_threshold(&[0.42, 0.42, 0.42], 128).unwrap(), 0.42);
        let t = otsu_threshold(&[0.5001, 0.5002], 128).unwrap();
        assert!((t - 0.50015).abs() < 1e-12);
        assert!(otsu_threshold(&[], 128).is_err());
    }

    #[test]
    fn direct_weight_half_gives_zero_sub_coefficients() {
        let mut r = rng::stream(3, "d");
        let mut rule = DecisionRule::DirectWeight;
        let d = decide(&mut rule, &[0.3, 0.6], &[0.5, 0.5], 128, &mut r).unwrap();
        let g = d.gates();
        assert_eq!(g.sub_coef, vec![0.0, 0.0]);
        assert_eq!(g.semi_weight, vec![0.5, 0.5]);
    }

    #[test]
    fn otsu_momentum_one_freezes_threshold() {
        let mut r = rng::stream(4, "d");
        let mut rule = DecisionRule::OtsuThreshold {
            threshold: 0.37,
            momentum: 1.0,
        };
        let d = decide(&mut rule, &[0.1, 0.2, 0.8, 0.9], &[0.5; 4], 128, &mut r).unwrap();
        assert_eq!(
            rule,
            DecisionRule::OtsuThreshold {
                threshold: 0.37,
                momentum: 1.0
            }
        );
        match d {
            Decision::Mask(m) => assert_eq!(m.m_id, vec![false, false, true, true]),
            Decision::Weights(_) => panic!("otsu yields masks"),
        }
    }

    #[test]
    fn sampled_rule_equals_direct_sampling() {
        let p = [0.2, 0.9, 0.5, 0.7, 0.01];
        let mut r1 = rng::stream(5, "d");
        let mut r2 = rng::stream(5, "d");
        let mut rule = DecisionRule::SampledMask;
        let d = decide(&mut rule, &[0.0; 5], &p, 128, &mut r1).unwrap();
        assert_eq!(d, Decision::Mask(sample_mask(&p, &mut r2)));
    }

    #[test]
    fn mask_gates_are_complementary() {
        let mut r = rng::stream(6, "d");
        let m = sample_mask(&[0.1, 0.5, 0.9, 0.3], &mut r);
        let g = LossGates::from_mask(&m);
        for i in 0..m.len() {
            let id = if m.m_id[i] { 1.0 } else { 0.0 };
            let ood = if m.m_ood(i) { 1.0 } else { 0.0 };
            assert_eq!(id + ood, 1.0);
            assert_eq!(g.sub_coef[i], ood - id);
            assert_eq!(g.semi_weight[i], id);
        }
    }
}
