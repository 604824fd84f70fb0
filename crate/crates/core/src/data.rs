//! Synthetic open-set datasets, augmentation analogues and batch streams.
//!
//! ID classes and OOD clusters are isotropic Gaussians around centers that
//! are rejection-sampled to be pairwise at least `cluster_separation` apart.
//! The unlabeled pool holds every ID sample (including copies of the labeled
//! ones, without labels) plus enough OOD samples to hit `ood_fraction`.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

const MAX_CENTER_RETRIES: usize = 1000;

/// Parameters of a synthetic open-set problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub input_dim: usize,
    pub num_id_classes: usize,
    pub num_ood_clusters: usize,
    pub samples_per_class: usize,
    pub labeled_per_class: usize,
    /// Fraction of OOD samples in the unlabeled pool.
    pub ood_fraction: f64,
    /// Intra-cluster standard deviation.
    pub cluster_spread: f64,
    /// Minimum distance between any two cluster centers.
    pub cluster_separation: f64,
    /// Test samples per ID class and per OOD cluster.
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            input_dim: 32,
            num_id_classes: 8,
            num_ood_clusters: 8,
            samples_per_class: 500,
            labeled_per_class: 40,
            ood_fraction: 0.5,
            cluster_spread: 1.0,
            cluster_separation: 4.0,
            test_per_class: 100,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("input_dim", self.input_dim),
            ("num_id_classes", self.num_id_classes),
            ("num_ood_clusters", self.num_ood_clusters),
            ("samples_per_class", self.samples_per_class),
            ("labeled_per_class", self.labeled_per_class),
            ("test_per_class", self.test_per_class),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.labeled_per_class > self.samples_per_class {
            return Err(Error::Config(
                "labeled_per_class must not exceed samples_per_class".into(),
            ));
        }
        if !(self.ood_fraction > 0.0 && self.ood_fraction < 1.0) {
            return Err(Error::Config(
                "ood_fraction must lie strictly inside (0,1)".into(),
            ));
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::Config("cluster_spread must be positive".into()));
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation.is_finite()) {
            return Err(Error::Config("cluster_separation must be positive".into()));
        }
        Ok(())
    }

    /// Number of OOD samples in the unlabeled pool.
    pub fn num_unlabeled_ood(&self) -> usize {
        let n_id = (self.num_id_classes * self.samples_per_class) as f64;
        (n_id * self.ood_fraction / (1.0 - self.ood_fraction)).round() as usize
    }
}

/// One data point. `label` is `None` for OOD samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: Option<usize>,
}

impl Sample {
    pub fn is_id(&self) -> bool {
        self.label.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Labeled,
    Unlabeled,
    TestId,
    TestOod,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::Labeled,
        Split::Unlabeled,
        Split::TestId,
        Split::TestOod,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::TestId => "test_id",
            Split::TestOod => "test_ood",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Split::ALL.into_iter().find(|s| s.tag() == tag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetDataset {
    pub input_dim: usize,
    pub num_classes: usize,
    pub labeled: Vec<Sample>,
    /// ID and OOD samples; labels are retained for evaluation only.
    pub unlabeled: Vec<Sample>,
    pub test_id: Vec<Sample>,
    pub test_ood: Vec<Sample>,
}

impl OpenSetDataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Labeled => &self.labeled,
            Split::Unlabeled => &self.unlabeled,
            Split::TestId => &self.test_id,
            Split::TestOod => &self.test_ood,
        }
    }

    /// The label-free view the training loop is allowed to see.
    pub fn training_pool(&self) -> TrainingPool {
        TrainingPool {
            input_dim: self.input_dim,
            labeled: self
                .labeled
                .iter()
                .map(|s| LabeledItem {
                    x: s.x.clone(),
                    y: s.label.expect("labeled split holds ID samples only"),
                })
                .collect(),
            unlabeled: self.unlabeled.iter().map(|s| s.x.clone()).collect(),
        }
    }

    /// Fraction of OOD samples in the unlabeled split.
    pub fn unlabeled_ood_fraction(&self) -> f64 {
        let ood = self.unlabeled.iter().filter(|s| !s.is_id()).count();
        ood as f64 / self.unlabeled.len() as f64
    }
}

fn draw_centers(spec: &DatasetSpec, rng: &mut StreamRng) -> Result<Vec<Vec<f64>>> {
    let total = spec.num_id_classes + spec.num_ood_clusters;
    // typical center norm equals the separation; pairwise distances then
    // concentrate around sqrt(2) times the separation
    let scale = spec.cluster_separation / (spec.input_dim as f64).sqrt();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(total);
    for idx in 0..total {
        let mut placed = false;
        for _ in 0..MAX_CENTER_RETRIES {
            let cand: Vec<f64> = (0..spec.input_dim)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let ok = centers.iter().all(|c| {
                let d2: f64 = c.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= spec.cluster_separation
            });
            if ok {
                centers.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Infeasible(format!(
                "could not place center {idx} at separation {} after {MAX_CENTER_RETRIES} retries",
                spec.cluster_separation
            )));
        }
    }
    Ok(centers)
}

fn gaussian_point(center: &[f64], spread: f64, rng: &mut StreamRng) -> Vec<f64> {
    center
        .iter()
        .map(|c| c + spread * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Generates the dataset described by `spec`; deterministic in `spec.seed`.
pub fn generate(spec: &DatasetSpec) -> Result<OpenSetDataset> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, rng::STREAM_DATA);
    let centers = draw_centers(spec, &mut rng)?;
    let (id_centers, ood_centers) = centers.split_at(spec.num_id_classes);

    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (c, center) in id_centers.iter().enumerate() {
        for i in 0..spec.samples_per_class {
            let s = Sample {
                x: gaussian_point(center, spec.cluster_spread, &mut rng),
                label: Some(c),
            };
            if i < spec.labeled_per_class {
                labeled.push(s.clone());
            }
            unlabeled.push(s);
        }
    }
    let n_ood = spec.num_unlabeled_ood();
    for i in 0..n_ood {
        let center = &ood_centers[i % ood_centers.len()];
        unlabeled.push(Sample {
            x: gaussian_point(center, spec.cluster_spread, &mut rng),
            label: None,
        });
    }
    unlabeled.shuffle(&mut rng);

    let mut test_id = Vec::new();
    for (c, center) in id_centers.iter().enumerate() {
        for _ in 0..spec.test_per_class {
            test_id.push(Sample {
                x: gaussian_point(center, spec.cluster_spread, &mut rng),
                label: Some(c),
            });
        }
    }
    let mut test_ood = Vec::new();
    for center in ood_centers {
        for _ in 0..spec.test_per_class {
            test_ood.push(Sample {
                x: gaussian_point(center, spec.cluster_spread, &mut rng),
                label: None,
            });
        }
    }

    Ok(OpenSetDataset {
        input_dim: spec.input_dim,
        num_classes: spec.num_id_classes,
        labeled,
        unlabeled,
        test_id,
        test_ood,
    })
}

/// Jitter scales of the weak and strong views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub sigma_weak: f64,
    pub sigma_strong: f64,
    pub p_drop: f64,
}

impl Augmentation {
    /// Defaults relative to the cluster spread: 0.1 and 0.5 of it, 20% dropout.
    pub fn for_spread(cluster_spread: f64) -> Self {
        Self {
            sigma_weak: 0.1 * cluster_spread,
            sigma_strong: 0.5 * cluster_spread,
            p_drop: 0.2,
        }
    }

    pub fn weak<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        weak_augment(x, self.sigma_weak, rng)
    }

    pub fn strong<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        strong_augment(x, self.sigma_strong, self.p_drop, rng)
    }
}

/// Isotropic Gaussian jitter with standard deviation `sigma`.
fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn weak_augment<R: Rng + ?Sized>(x: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    if sigma == 0.0 {
        return x.to_vec();
    }
    x.iter()
        .map(|v| v + sigma * gaussian(rng))
        .collect::<Vec<f64>>()
}

/// Larger jitter followed by independent per-coordinate dropout.
pub fn strong_augment<R: Rng + ?Sized>(
    x: &[f64],
    sigma: f64,
    p_drop: f64,
    rng: &mut R,
) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let noise: f64 = if sigma == 0.0 {
                0.0
            } else {
                sigma * gaussian(rng)
            };
            let dropped = p_drop > 0.0 && rng.random::<f64>() < p_drop;
            if dropped {
                0.0
            } else {
                v + noise
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledItem {
    pub x: Vec<f64>,
    pub y: usize,
}

/// What the trainer may read: labeled pairs and bare unlabeled inputs.
/// Unlabeled entries carry no label or ID flag by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPool {
    pub input_dim: usize,
    pub labeled: Vec<LabeledItem>,
    pub unlabeled: Vec<Vec<f64>>,
}

/// One training step's worth of inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Weakly augmented labeled inputs.
    pub labeled_weak: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Indices into the labeled pool.
    pub labeled_index: Vec<usize>,
    pub unlabeled_weak: Vec<Vec<f64>>,
    pub unlabeled_strong: Vec<Vec<f64>>,
    /// Indices into the unlabeled pool, for evaluation-side bookkeeping.
    pub unlabeled_index: Vec<usize>,
}

/// Reshuffling cursor over `0..n`; draws wrap into a fresh permutation.
#[derive(Debug, Clone)]
struct EpochCursor {
    order: Vec<usize>,
    pos: usize,
}

impl EpochCursor {
    fn new(n: usize, rng: &mut StreamRng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut StreamRng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Infinite stream of (labeled batch of `B`, unlabeled batch of `mu * B`).
pub struct BatchStream<'a> {
    pool: &'a TrainingPool,
    batch_size: usize,
    unlabeled_size: usize,
    aug: Augmentation,
    order_rng: StreamRng,
    aug_rng: StreamRng,
    labeled_cursor: EpochCursor,
    unlabeled_cursor: EpochCursor,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        pool: &'a TrainingPool,
        batch_size: usize,
        mu: usize,
        aug: Augmentation,
        seed: u64,
    ) -> Result<Self> {
        if pool.labeled.is_empty() || pool.unlabeled.is_empty() {
            return Err(Error::InvalidInput(
                "empty labeled or unlabeled pool".into(),
            ));
        }
        if batch_size == 0 || mu == 0 {
            return Err(Error::InvalidInput(
                "batch size and mu must be positive".into(),
            ));
        }
        let unlabeled_size = batch_size * mu;
        if batch_size > pool.labeled.len() || unlabeled_size > pool.unlabeled.len() {
            return Err(Error::InvalidInput(format!(
                "batch sizes ({batch_size}, {unlabeled_size}) exceed pool sizes ({}, {})",
                pool.labeled.len(),
                pool.unlabeled.len()
            )));
        }
        let mut order_rng = rng::stream(seed, rng::STREAM_BATCHES);
        let labeled_cursor = EpochCursor::new(pool.labeled.len(), &mut order_rng);
        let unlabeled_cursor = EpochCursor::new(pool.unlabeled.len(), &mut order_rng);
        Ok(Self {
            pool,
            batch_size,
            unlabeled_size,
            aug,
            order_rng,
            aug_rng: rng::stream(seed, rng::STREAM_AUGMENT),
            labeled_cursor,
            unlabeled_cursor,
        })
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let li = self
            .labeled_cursor
            .take(self.batch_size, &mut self.order_rng);
        let ui = self
            .unlabeled_cursor
            .take(self.unlabeled_size, &mut self.order_rng);
        let labeled_weak = li
            .iter()
            .map(|&i| self.aug.weak(&self.pool.labeled[i].x, &mut self.aug_rng))
            .collect();
        let labels = li.iter().map(|&i| self.pool.labeled[i].y).collect();
        let mut unlabeled_weak = Vec::with_capacity(ui.len());
        let mut unlabeled_strong = Vec::with_capacity(ui.len());
        for &i in &ui {
            let x = &self.pool.unlabeled[i];
            unlabeled_weak.push(self.aug.weak(x, &mut self.aug_rng));
            unlabeled_strong.push(self.aug.strong(x, &mut self.aug_rng));
        }
        Some(Batch {
            labeled_weak,
            labels,
            labeled_index: li,
            unlabeled_weak,
            unlabeled_strong,
            unlabeled_index: ui,
        })
    }
}

/// Convenience wrapper matching the stream signature used by the harness.
pub fn batches<'a>(
    pool: &'a TrainingPool,
    batch_size: usize,
    mu: usize,
    aug: Augmentation,
    seed: u64,
) -> Result<BatchStream<'a>> {
    BatchStream::new(pool, batch_size, mu, aug, seed)
}

pub const DATASET_MAGIC: &str = "# osslab-dataset v1";

/// Writes the columnar text format:
///
/// ```text
/// # osslab-dataset v1
/// # input_dim=<d> num_classes=<C>
/// x0,...,x<d-1>,label,is_id,split
/// <coordinates>,<label or -1>,<0|1>,<labeled|unlabeled|test_id|test_ood>
/// ```
pub fn write_dataset<W: Write>(ds: &OpenSetDataset, mut w: W) -> Result<()> {
    writeln!(w, "{DATASET_MAGIC}")?;
    writeln!(
        w,
        "# input_dim={} num_classes={}",
        ds.input_dim, ds.num_classes
    )?;
    let mut header = String::new();
    for j in 0..ds.input_dim {
        write!(header, "x{j},").unwrap();
    }
    header.push_str("label,is_id,split");
    writeln!(w, "{header}")?;
    let mut line = String::new();
    for split in Split::ALL {
        for s in ds.split(split) {
            line.clear();
            for v in &s.x {
                write!(line, "{v},").unwrap();
            }
            let label = s.label.map_or(-1, |l| l as i64);
            write!(line, "{label},{},{}", u8::from(s.is_id()), split.tag()).unwrap();
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

pub fn save_dataset(ds: &OpenSetDataset, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: R, origin: &Path) -> Result<OpenSetDataset> {
    let fail = |msg: String| Error::Format {
        path: origin.to_path_buf(),
        msg,
    };
    let mut lines = BufReader::new(r).lines();
    let magic = lines.next().transpose()?.unwrap_or_default();
    if magic.trim() != DATASET_MAGIC {
        return Err(fail(format!("expected '{DATASET_MAGIC}', found '{magic}'")));
    }
    let meta = lines.next().transpose()?.unwrap_or_default();
    let mut input_dim = None;
    let mut num_classes = None;
    for kv in meta.trim_start_matches('#').split_whitespace() {
        match kv.split_once('=') {
            Some(("input_dim", v)) => input_dim = v.parse::<usize>().ok(),
            Some(("num_classes", v)) => num_classes = v.parse::<usize>().ok(),
            _ => return Err(fail(format!("unknown metadata '{kv}'"))),
        }
    }
    let (input_dim, num_classes) = match (input_dim, num_classes) {
        (Some(d), Some(c)) => (d, c),
        _ => return Err(fail("missing input_dim or num_classes".into())),
    };
    let _header = lines.next().transpose()?;
    let mut ds = OpenSetDataset {
        input_dim,
        num_classes,
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        test_id: Vec::new(),
        test_ood: Vec::new(),
    };
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != input_dim + 3 {
            return Err(fail(format!(
                "row {}: expected {} fields, found {}",
                lineno + 1,
                input_dim + 3,
                fields.len()
            )));
        }
        let x = fields[..input_dim]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| fail(format!("row {}: {e}", lineno + 1)))?;
        let label: i64 = fields[input_dim]
            .parse()
            .map_err(|e| fail(format!("row {}: {e}", lineno + 1)))?;
        let is_id = match fields[input_dim + 1] {
            "1" => true,
            "0" => false,
            other => return Err(fail(format!("row {}: bad is_id '{other}'", lineno + 1))),
        };
        let label = if label >= 0 {
            Some(label as usize)
        } else {
            None
        };
        if label.is_some() != is_id || label.is_some_and(|l| l >= num_classes) {
            return Err(fail(format!(
                "row {}: label and is_id disagree",
                lineno + 1
            )));
        }
        let split = Split::from_tag(fields[input_dim + 2])
            .ok_or_else(|| fail(format!("row {}: unknown split", lineno + 1)))?;
        let sample = Sample { x, label };
        match split {
            Split::Labeled => ds.labeled.push(sample),
            Split::Unlabeled => ds.unlabeled.push(sample),
            Split::TestId => ds.test_id.push(sample),
            Split::TestOod => ds.test_ood.push(sample),
        }
    }
    Ok(ds)
}

pub fn load_dataset(path: &Path) -> Result<OpenSetDataset> {
    let f = std::fs::File::open(path)?;
    read_dataset(f, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            input_dim: 6,
            num_id_classes: 4,
            num_ood_clusters: 4,
            samples_per_class: 125,
            labeled_per_class: 10,
            ood_fraction: 0.5,
            cluster_spread: 0.5,
            cluster_separation: 4.0,
            test_per_class: 20,
            seed: 11,
        }
    }

    #[test]
    fn unlabeled_ood_fraction_matches_spec() {
        let ds = generate(&small_spec()).unwrap();
        assert_eq!(ds.unlabeled.len(), 1000);
        let ood = ds.unlabeled.iter().filter(|s| !s.is_id()).count();
        assert!((ood as i64 - 500).abs() <= 1);

        let mut spec = small_spec();
        spec.ood_fraction = 0.3;
        let ds = generate(&spec).unwrap();
        let target = spec.ood_fraction * ds.unlabeled.len() as f64;
        let ood = ds.unlabeled.iter().filter(|s| !s.is_id()).count() as f64;
        assert!((ood - target).abs() <= 1.0);
    }

    #[test]
    fn labeled_set_is_class_balanced() {
        let spec = small_spec();
        let ds = generate(&spec).unwrap();
        for c in 0..spec.num_id_classes {
            let n = ds.labeled.iter().filter(|s| s.label == Some(c)).count();
            assert_eq!(n, spec.labeled_per_class);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a, b);
        let mut other = small_spec();
        other.seed += 1;
        assert_ne!(a, generate(&other).unwrap());
    }

    #[test]
    fn infeasible_separation_is_reported() {
        let mut spec = small_spec();
        spec.input_dim = 1;
        spec.cluster_separation = 50.0;
        assert!(matches!(generate(&spec), Err(Error::Infeasible(_))));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small_spec();
        spec.labeled_per_class = spec.samples_per_class + 1;
        assert!(spec.validate().is_err());
        let mut spec = small_spec();
        spec.ood_fraction = 1.0;
        assert!(spec.validate().is_err());
        let mut spec = small_spec();
        spec.num_ood_clusters = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn zero_noise_augmentations_are_identity() {
        let mut rng = rng::stream(1, "t");
        let x = vec![1.0, -2.0, 3.5];
        assert_eq!(weak_augment(&x, 0.0, &mut rng), x);
        assert_eq!(strong_augment(&x, 0.0, 0.0, &mut rng), x);
        assert_eq!(strong_augment(&x, 0.3, 1.0, &mut rng), vec![0.0; 3]);
        assert_eq!(weak_augment(&x, 0.7, &mut rng).len(), 3);
    }

    #[test]
    fn weak_jitter_is_centered() {
        let mut rng = rng::stream(2, "t");
        let x = vec![0.5, -1.0, 2.0, 0.0];
        let sigma = 0.3;
        let n = 10_000;
        let mut mean = vec![0.0; x.len()];
        for _ in 0..n {
            for (m, v) in mean.iter_mut().zip(weak_augment(&x, sigma, &mut rng)) {
                *m += v / n as f64;
            }
        }
        for (m, v) in mean.iter().zip(&x) {
            assert!((m - v).abs() < 3.0 * sigma / 100.0, "{m} vs {v}");
        }
    }

    #[test]
    fn strong_dropout_rate_matches() {
        let mut rng = rng::stream(3, "t");
        let x = vec![1.0; 10];
        let p = 0.2;
        let draws = 10_000;
        let mut zeros = 0usize;
        for _ in 0..draws {
            zeros += strong_augment(&x, 0.0, p, &mut rng)
                .iter()
                .filter(|v| **v == 0.0)
                .count();
        }
        let n = (draws * x.len()) as f64;
        let rate = zeros as f64 / n;
        let sd = (p * (1.0 - p) / n).sqrt();
        assert!((rate - p).abs() < 3.0 * sd, "rate {rate}");
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let ds = generate(&small_spec()).unwrap();
        let pool = ds.training_pool();
        let aug = Augmentation::for_spread(0.5);
        let a: Vec<Batch> = batches(&pool, 4, 2, aug, 5).unwrap().take(3).collect();
        let b: Vec<Batch> = batches(&pool, 4, 2, aug, 5).unwrap().take(3).collect();
        assert_eq!(a, b);
        for batch in &a {
            assert_eq!(batch.labeled_weak.len(), 4);
            assert_eq!(batch.labels.len(), 4);
            assert_eq!(batch.unlabeled_weak.len(), 8);
            assert_eq!(batch.unlabeled_strong.len(), 8);
        }
    }

    #[test]
    fn every_labeled_sample_appears_within_one_epoch() {
        let ds = generate(&small_spec()).unwrap();
        let pool = ds.training_pool();
        let n = pool.labeled.len();
        let b = 7;
        let steps = n.div_ceil(b);
        let mut seen = vec![0usize; n];
        for batch in batches(&pool, b, 1, Augmentation::for_spread(0.5), 9)
            .unwrap()
            .take(steps)
        {
            for i in batch.labeled_index {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c >= 1));
    }

    #[test]
    fn oversized_batches_are_rejected() {
        let ds = generate(&small_spec()).unwrap();
        let pool = ds.training_pool();
        assert!(batches(
            &pool,
            pool.labeled.len() + 1,
            1,
            Augmentation::for_spread(0.5),
            0
        )
        .is_err());
        let empty = TrainingPool {
            input_dim: 6,
            labeled: vec![],
            unlabeled: vec![],
        };
        assert!(batches(&empty, 1, 1, Augmentation::for_spread(0.5), 0).is_err());
    }

    #[test]
    fn nearest_center_classifier_is_perfect_on_tight_clusters() {
        let mut spec = small_spec();
        spec.cluster_spread = 0.1;
        spec.cluster_separation = 10.0;
        let ds = generate(&spec).unwrap();
        // estimate centers from the labeled split, then classify test_id
        let mut centers = vec![vec![0.0; spec.input_dim]; spec.num_id_classes];
        for s in &ds.labeled {
            let c = s.label.unwrap();
            for (a, v) in centers[c].iter_mut().zip(&s.x) {
                *a += v / spec.labeled_per_class as f64;
            }
        }
        for s in &ds.test_id {
            let best = (0..centers.len())
                .min_by(|&a, &b| {
                    let da: f64 = centers[a]
                        .iter()
                        .zip(&s.x)
                        .map(|(c, x)| (c - x).powi(2))
                        .sum();
                    let db: f64 = centers[b]
                        .iter()
                        .zip(&s.x)
                        .map(|(c, x)| (c - x).powi(2))
                        .sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(Some(best), s.label);
        }
    }

    #[test]
    fn export_import_round_trip() {
        let ds = generate(&small_spec()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn malformed_dataset_is_rejected() {
        let text = "# osslab-dataset v1\n# input_dim=2 num_classes=2\nx0,x1,label,is_id,split\n1,2,5,1,labeled\n";
        assert!(read_dataset(text.as_bytes(), Path::new("mem")).is_err());
        assert!(read_dataset("nope\n".as_bytes(), Path::new("mem")).is_err());
    }
}
