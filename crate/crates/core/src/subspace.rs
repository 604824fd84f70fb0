//! ID subspace from EMA class means, and the scores built on it.
//!
//! The score of a feature `z` is the cosine of its angle to the span of the
//! class means: `s(z) = (P z · z) / (|P z| |z|)` with `P = Q Qᵀ` the orthogonal
//! projector onto the span. Since `P z · z = |Qᵀ z|²`, the score lies in
//! `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};

/// Relative pivot magnitude below which a QR column is treated as dependent.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Per-class EMA feature means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMeanTable {
    dim: usize,
    momentum: f64,
    means: Vec<Vec<f64>>,
    initialized: Vec<bool>,
}

impl ClassMeanTable {
    pub fn new(num_classes: usize, dim: usize, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "class-mean momentum {momentum} outside [0,1]"
            )));
        }
        Ok(Self {
            dim,
            momentum,
            means: vec![vec![0.0; dim]; num_classes],
            initialized: vec![false; num_classes],
        })
    }

    /// Builds a table with every listed mean already initialized.
    pub fn from_means(means: Vec<Vec<f64>>, momentum: f64) -> Result<Self> {
        let dim = means.first().map_or(0, Vec::len);
        if means.iter().any(|m| m.len() != dim) {
            return Err(Error::InvalidInput("class means differ in length".into()));
        }
        let mut t = Self::new(means.len(), dim, momentum)?;
        t.initialized = vec![true; means.len()];
        t.means = means;
        Ok(t)
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        &self.means[class]
    }

    pub fn is_initialized(&self, class: usize) -> bool {
        self.initialized[class]
    }

    pub fn initialized_means(&self) -> impl Iterator<Item = &[f64]> {
        self.means
            .iter()
            .zip(&self.initialized)
            .filter(|(_, &ok)| ok)
            .map(|(m, _)| m.as_slice())
    }

    pub fn num_initialized(&self) -> usize {
        self.initialized.iter().filter(|&&b| b).count()
    }

    /// `c ← λ c + (1 − λ) · batch mean` for every class present in the batch.
    /// A class seen for the first time takes its batch mean directly.
    pub fn update(&mut self, features: &Matrix, labels: &[usize]) -> Result<()> {
        if features.rows() != labels.len() {
            return Err(Error::InvalidInput(
                "features and labels differ in length".into(),
            ));
        }
        if features.cols() != self.dim {
            return Err(Error::InvalidInput(format!(
                "features have {} columns, table expects {}",
                features.cols(),
                self.dim
            )));
        }
        let c = self.num_classes();
        let mut sums = vec![vec![0.0; self.dim]; c];
        let mut counts = vec![0usize; c];
        for (row, &y) in features.iter_rows().zip(labels) {
            if y >= c {
                return Err(Error::InvalidInput(format!(
                    "label {y} out of range for {c} classes"
                )));
            }
            counts[y] += 1;
            for (s, v) in sums[y].iter_mut().zip(row) {
                *s += v;
            }
        }
        let lambda = self.momentum;
        for (cls, (sum, &count)) in sums.iter().zip(&counts).enumerate() {
            if count == 0 {
                continue;
            }
            let mean = self.means[cls].as_mut_slice();
            if self.initialized[cls] {
                for (m, s) in mean.iter_mut().zip(sum) {
                    *m = lambda * *m + (1.0 - lambda) * (s / count as f64);
                }
            } else {
                for (m, s) in mean.iter_mut().zip(sum) {
                    *m = s / count as f64;
                }
                self.initialized[cls] = true;
            }
        }
        Ok(())
    }
}

/// Orthonormal basis `Q` (D x r, stored column by column) of the ID subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdSubspaceBasis {
    dim: usize,
    columns: Vec<Vec<f64>>,
}

impl IdSubspaceBasis {
    /// Wraps columns the caller guarantees to be orthonormal.
    pub fn from_orthonormal_columns(columns: Vec<Vec<f64>>) -> Result<Self> {
        let dim = columns.first().map_or(0, Vec::len);
        if columns.is_empty() || dim == 0 {
            return Err(Error::SubspaceUndefined);
        }
        if columns.iter().any(|c| c.len() != dim) {
            return Err(Error::InvalidInput("basis columns differ in length".into()));
        }
        Ok(Self { dim, columns })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    /// `Qᵀ z`.
    pub fn coordinates(&self, z: &[f64]) -> Vec<f64> {
        self.columns.iter().map(|q| dot(q, z)).collect()
    }

    /// `Q a`.
    pub fn combine(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (q, &a) in self.columns.iter().zip(coords) {
            for (o, v) in out.iter_mut().zip(q) {
                *o += a * v;
            }
        }
        out
    }

    /// `Q Qᵀ z`.
    pub fn project(&self, z: &[f64]) -> Vec<f64> {
        self.combine(&self.coordinates(z))
    }
}

/// Householder QR with column pivoting of the initialized class means.
/// Columns whose pivot falls below [`RANK_TOLERANCE`] times the largest pivot
/// are dropped; the leading `r` columns of `Q` form the basis.
pub fn compute_basis(table: &ClassMeanTable) -> Result<IdSubspaceBasis> {
    let mut cols: Vec<Vec<f64>> = table.initialized_means().map(<[f64]>::to_vec).collect();
    if cols.is_empty() {
        return Err(Error::SubspaceUndefined);
    }
    let d = table.dim();
    let steps = cols.len().min(d);
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut first_pivot = 0.0;
    for j in 0..steps {
        // pivot: remaining column with the largest trailing norm
        let (best, best_norm) = (j..cols.len())
            .map(|c| (c, norm(&cols[c][j..])))
            .fold((j, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if j == 0 {
            first_pivot = best_norm;
        }
        if best_norm == 0.0 || best_norm < RANK_TOLERANCE * first_pivot {
            break;
        }
        cols.swap(j, best);
        let x = &cols[j][j..];
        let alpha = if x[0] >= 0.0 { -best_norm } else { best_norm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vnorm = norm(&v);
        if vnorm > 0.0 {
            for e in &mut v {
                *e /= vnorm;
            }
        }
        for col in cols.iter_mut().skip(j) {
            let tail = &mut col[j..];
            let f = 2.0 * dot(&v, tail);
            for (t, vi) in tail.iter_mut().zip(&v) {
                *t -= f * vi;
            }
        }
        reflectors.push(v);
    }
    let rank = reflectors.len();
    if rank == 0 {
        return Err(Error::SubspaceUndefined);
    }
    // Q e_k = H_0 H_1 ... H_{r-1} e_k
    let mut columns = Vec::with_capacity(rank);
    for k in 0..rank {
        let mut e = vec![0.0; d];
        e[k] = 1.0;
        for (j, v) in reflectors.iter().enumerate().rev() {
            let tail = &mut e[j..];
            let f = 2.0 * dot(v, tail);
            for (t, vi) in tail.iter_mut().zip(v) {
                *t -= f * vi;
            }
        }
        columns.push(e);
    }
    Ok(IdSubspaceBasis { dim: d, columns })
}

/// Cosine of the angle between `z` and the subspace. Zero when `z` is
/// orthogonal to it; a zero-norm `z` is an error.
pub fn subspace_score(z: &[f64], basis: &IdSubspaceBasis) -> Result<f64> {
    let zn = norm(z);
    if zn == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let proj = basis.project(z);
    let pn = norm(&proj);
    if pn == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(&proj, z) / (pn * zn)).clamp(0.0, 1.0))
}

/// Score and its gradient with respect to `z`, the basis held constant.
/// Returns `(0, 0)` for zero-norm `z` or `z` orthogonal to the subspace.
pub fn score_with_gradient(z: &[f64], basis: &IdSubspaceBasis) -> (f64, Vec<f64>) {
    let zn = norm(z);
    let coords = basis.coordinates(z);
    let cn = norm(&coords);
    if zn == 0.0 || cn == 0.0 {
        return (0.0, vec![0.0; z.len()]);
    }
    // s = |Qᵀz| / |z|;  ds/dz = Q Qᵀ z / (|Qᵀz| |z|) − |Qᵀz| z / |z|³
    let proj = basis.combine(&coords);
    let s = cn / zn;
    let a = 1.0 / (cn * zn);
    let b = cn / (zn * zn * zn);
    let grad = proj.iter().zip(z).map(|(p, zi)| a * p - b * zi).collect();
    (s, grad)
}

/// Scores compared in the ablations. Higher always means "more ID".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoreKind {
    Subspace,
    MinEuclidToMean,
    ResidualToSubspace,
    MaxCosineToMean,
    Msp,
    Energy,
    MaxLogit,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 7] = [
        ScoreKind::Subspace,
        ScoreKind::MinEuclidToMean,
        ScoreKind::ResidualToSubspace,
        ScoreKind::MaxCosineToMean,
        ScoreKind::Msp,
        ScoreKind::Energy,
        ScoreKind::MaxLogit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Subspace => "subspace",
            ScoreKind::MinEuclidToMean => "min_euclid",
            ScoreKind::ResidualToSubspace => "residual",
            ScoreKind::MaxCosineToMean => "max_cosine",
            ScoreKind::Msp => "msp",
            ScoreKind::Energy => "energy",
            ScoreKind::MaxLogit => "max_logit",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        ScoreKind::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn needs_logits(self) -> bool {
        matches!(
            self,
            ScoreKind::Msp | ScoreKind::Energy | ScoreKind::MaxLogit
        )
    }
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Free energy `−log Σ exp(logit)`. Lower for ID; [`ScoreKind::Energy`]
/// reports its negation.
pub fn energy(logits: &[f64]) -> f64 {
    -log_sum_exp(logits)
}

/// Evaluates `kind` for one sample.
pub fn alt_score(
    kind: ScoreKind,
    z: &[f64],
    logits: Option<&[f64]>,
    table: &ClassMeanTable,
    basis: &IdSubspaceBasis,
) -> Result<f64> {
    let need_logits = || {
        logits
            .ok_or_else(|| Error::InvalidInput(format!("score '{}' requires logits", kind.name())))
    };
    match kind {
        ScoreKind::Subspace => subspace_score(z, basis),
        ScoreKind::MinEuclidToMean => table
            .initialized_means()
            .map(|c| {
                c.iter()
                    .zip(z)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .reduce(f64::min)
            .map(|d| -d)
            .ok_or(Error::SubspaceUndefined),
        ScoreKind::ResidualToSubspace => {
            let proj = basis.project(z);
            Ok(-proj
                .iter()
                .zip(z)
                .map(|(p, v)| (v - p) * (v - p))
                .sum::<f64>()
                .sqrt())
        }
        ScoreKind::MaxCosineToMean => {
            let zn = norm(z);
            if zn == 0.0 {
                return Err(Error::ZeroNorm);
            }
            table
                .initialized_means()
                .map(|c| {
                    let cn = norm(c);
                    if cn == 0.0 {
                        0.0
                    } else {
                        dot(z, c) / (zn * cn)
                    }
                })
                .reduce(f64::max)
                .ok_or(Error::SubspaceUndefined)
        }
        ScoreKind::Msp => {
            let l = need_logits()?;
            let lse = log_sum_exp(l);
            Ok(l.iter().map(|v| (v - lse).exp()).fold(0.0, f64::max))
        }
        ScoreKind::Energy => Ok(-energy(need_logits()?)),
        ScoreKind::MaxLogit => Ok(need_logits()?
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn momentum_one_keeps_table() {
        let mut t = ClassMeanTable::from_means(vec![vec![1.0, 0.0], vec![0.0, 2.0]], 1.0).unwrap();
        let before = t.clone();
        t.update(&Matrix::from_rows(&[[5.0, 5.0], [3.0, -1.0]]), &[0, 1])
            .unwrap();
        assert_eq!(t, before);
    }

    #[test]
    fn momentum_zero_takes_batch_mean() {
        let mut t = ClassMeanTable::from_means(vec![vec![1.0, 0.0], vec![0.0, 2.0]], 0.0).unwrap();
        t.update(&Matrix::from_rows(&[[4.0, 2.0], [2.0, 4.0]]), &[0, 0])
            .unwrap();
        assert_eq!(t.mean(0), &[3.0, 3.0]);
        assert_eq!(t.mean(1), &[0.0, 2.0]);
    }

    #[test]
    fn ema_update_matches_hand_value() {
        let mut t = ClassMeanTable::from_means(vec![vec![1.0, 0.0]], 0.9).unwrap();
        t.update(&Matrix::from_rows(&[[0.0, 1.0]]), &[0]).unwrap();
        assert!((t.mean(0)[0] - 0.9).abs() < 1e-15);
        assert!((t.mean(0)[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn first_sighting_initializes_directly() {
        let mut t = ClassMeanTable::new(3, 2, 0.999).unwrap();
        t.update(&Matrix::from_rows(&[[2.0, 4.0]]), &[1]).unwrap();
        assert!(t.is_initialized(1));
        assert!(!t.is_initialized(0));
        assert_eq!(t.mean(1), &[2.0, 4.0]);
        assert_eq!(t.num_initialized(), 1);
    }

    #[test]
    fn bad_label_is_rejected() {
        let mut t = ClassMeanTable::new(2, 2, 0.5).unwrap();
        assert!(t.update(&Matrix::from_rows(&[[1.0, 1.0]]), &[2]).is_err());
        assert!(ClassMeanTable::new(2, 2, 1.5).is_err());
    }

    #[test]
    fn basis_of_standard_vectors() {
        let t = ClassMeanTable::from_means(vec![e(3, 0), e(3, 1)], 0.9).unwrap();
        let b = compute_basis(&t).unwrap();
        assert_eq!(b.rank(), 2);
        for q in b.columns() {
            assert!(q[2].abs() < 1e-15);
        }
    }

    #[test]
    fn empty_table_has_no_basis() {
        let t = ClassMeanTable::new(3, 4, 0.9).unwrap();
        assert!(matches!(compute_basis(&t), Err(Error::SubspaceUndefined)));
        let zeros = ClassMeanTable::from_means(vec![vec![0.0; 3]], 0.9).unwrap();
        assert!(matches!(
            compute_basis(&zeros),
            Err(Error::SubspaceUndefined)
        ));
    }

    #[test]
    fn score_hand_example() {
        let t = ClassMeanTable::from_means(vec![e(3, 0), e(3, 1)], 0.9).unwrap();
        let b = compute_basis(&t).unwrap();
        let s = subspace_score(&[1.0, 1.0, 2f64.sqrt()], &b).unwrap();
        assert!((s - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((subspace_score(&[0.3, -2.0, 0.0], &b).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(subspace_score(&[0.0, 0.0, 5.0], &b).unwrap(), 0.0);
        assert!(matches!(
            subspace_score(&[0.0; 3], &b),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let t = ClassMeanTable::from_means(
            vec![vec![1.0, 0.5, 0.0, -0.2], vec![0.1, 1.0, 0.3, 0.0]],
            0.9,
        )
        .unwrap();
        let b = compute_basis(&t).unwrap();
        let z = vec![0.4, -0.7, 1.1, 0.9];
        let (_, g) = score_with_gradient(&z, &b);
        let h = 1e-6;
        for i in 0..z.len() {
            let mut up = z.clone();
            up[i] += h;
            let mut dn = z.clone();
            dn[i] -= h;
            let fd =
                (subspace_score(&up, &b).unwrap() - subspace_score(&dn, &b).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn orientation_favors_points_near_means() {
        let t = ClassMeanTable::from_means(
            vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]],
            0.9,
        )
        .unwrap();
        let b = compute_basis(&t).unwrap();
        let near = subspace_score(&[0.9, 0.1, 0.05, 0.0], &b).unwrap();
        let far = subspace_score(&[0.0, 0.05, 1.0, 0.7], &b).unwrap();
        assert!(near > far);
    }

    #[test]
    fn alternative_scores() {
        let t = ClassMeanTable::from_means(vec![vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]], 0.9)
            .unwrap();
        let b = compute_basis(&t).unwrap();
        let z = [0.0, 2.0, 0.0];
        assert_eq!(
            alt_score(ScoreKind::MinEuclidToMean, &z, None, &t, &b).unwrap(),
            0.0
        );
        assert!(
            (alt_score(ScoreKind::MaxCosineToMean, &z, None, &t, &b).unwrap() - 1.0).abs() < 1e-15
        );
        let r = alt_score(
            ScoreKind::ResidualToSubspace,
            &[1.0, 1.0, 3.0],
            None,
            &t,
            &b,
        )
        .unwrap();
        assert!((r + 3.0).abs() < 1e-12);
        let logits = [0.7, 0.7, 0.7, 0.7];
        assert!(
            (alt_score(ScoreKind::Msp, &z, Some(&logits), &t, &b).unwrap() - 0.25).abs() < 1e-15
        );
        assert!((energy(&[0.0, 0.0]) + 2f64.ln()).abs() < 1e-15);
        assert!(
            (alt_score(ScoreKind::Energy, &z, Some(&[0.0, 0.0]), &t, &b).unwrap() - 2f64.ln())
                .abs()
                < 1e-15
        );
        assert_eq!(
            alt_score(ScoreKind::MaxLogit, &z, Some(&[0.1, 3.0, -1.0]), &t, &b).unwrap(),
            3.0
        );
        assert!(alt_score(ScoreKind::Energy, &z, None, &t, &b).is_err());
    }

    #[test]
    fn score_kind_names_round_trip() {
        for k in ScoreKind::ALL {
            assert_eq!(ScoreKind::from_name(k.name()), Some(k));
        }
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(
            means in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 6), 1..5),
            z in proptest::collection::vec(-3.0f64..3.0, 6),
        ) {
            let t = ClassMeanTable::from_means(means, 0.9).unwrap();
            if let Ok(b) = compute_basis(&t) {
                let p1 = b.project(&z);
                let p2 = b.project(&p1);
                for (a, c) in p1.iter().zip(&p2) {
                    prop_assert!((a - c).abs() < 1e-10);
                }
            }
        }
    }
}
