//! Small MLP with a feature backbone `f`, a linear classifier `g` and a
//! bias-free linear projection head `h`.
//!
//! All parameters live in one flat vector addressed through [`Layout`], which
//! keeps the optimizer, EMA, L2 term and gradient checker layout-agnostic.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, Matrix};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Layer sizes. Every backbone layer, the feature layer included, uses
/// `activation`; the heads are linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden: vec![64, 64],
            feature_dim: 16,
            num_classes: 8,
            activation: Activation::Tanh,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        if self.feature_dim < self.num_classes {
            return Err(Error::Config(format!(
                "feature_dim ({}) must be at least num_classes ({})",
                self.feature_dim, self.num_classes
            )));
        }
        Ok(())
    }

    /// Input and output sizes of each backbone layer.
    pub fn backbone_dims(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![self.input_dim];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(self.feature_dim);
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn layout(&self) -> Layout {
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize, blocks: &mut Vec<Block>| {
            blocks.push(Block {
                name,
                offset,
                rows,
                cols,
            });
            offset += rows * cols;
        };
        let mut backbone = Vec::new();
        for (i, (fan_in, fan_out)) in self.backbone_dims().into_iter().enumerate() {
            let w = blocks.len();
            push(format!("backbone.{i}.weight"), fan_in, fan_out, &mut blocks);
            push(format!("backbone.{i}.bias"), 1, fan_out, &mut blocks);
            backbone.push(DenseLayout {
                weight: w,
                bias: Some(w + 1),
            });
        }
        let w = blocks.len();
        push(
            "head.weight".into(),
            self.feature_dim,
            self.num_classes,
            &mut blocks,
        );
        push("head.bias".into(), 1, self.num_classes, &mut blocks);
        let head = DenseLayout {
            weight: w,
            bias: Some(w + 1),
        };
        let w = blocks.len();
        push(
            "proj.weight".into(),
            self.feature_dim,
            self.feature_dim,
            &mut blocks,
        );
        let proj = DenseLayout {
            weight: w,
            bias: None,
        };
        Layout {
            total: offset,
            blocks,
            backbone,
            head,
            proj,
        }
    }
}

/// A named contiguous row-major tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseLayout {
    pub weight: usize,
    pub bias: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub total: usize,
    pub blocks: Vec<Block>,
    pub backbone: Vec<DenseLayout>,
    pub head: DenseLayout,
    pub proj: DenseLayout,
}

/// Weights and biases of `f`, `g` and `h` in one flat vector. Gradients use
/// the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    arch: Architecture,
    layout: Layout,
    values: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(arch: &Architecture) -> Self {
        let layout = arch.layout();
        let values = vec![0.0; layout.total];
        Self {
            arch: arch.clone(),
            layout,
            values,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let mut p = Self::zeros(arch);
        let weight_blocks: Vec<usize> = p
            .layout
            .backbone
            .iter()
            .chain([&p.layout.head, &p.layout.proj])
            .map(|d| d.weight)
            .collect();
        for bi in weight_blocks {
            let block = p.layout.blocks[bi].clone();
            let a = (6.0 / (block.rows + block.cols) as f64).sqrt();
            for v in &mut p.values[block.range()] {
                *v = rng.random_range(-a..=a);
            }
        }
        p
    }

    pub fn init_seeded(arch: &Architecture, seed: u64) -> Self {
        Self::init(arch, &mut rng::stream(seed, rng::STREAM_INIT))
    }

    pub fn from_values(arch: &Architecture, values: Vec<f64>) -> Result<Self> {
        let layout = arch.layout();
        if values.len() != layout.total {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, got {}",
                layout.total,
                values.len()
            )));
        }
        Ok(Self {
            arch: arch.clone(),
            layout,
            values,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            layout: self.layout.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn block(&self, index: usize) -> &[f64] {
        &self.values[self.layout.blocks[index].range()]
    }

    pub fn block_mut(&mut self, index: usize) -> &mut [f64] {
        let r = self.layout.blocks[index].range();
        &mut self.values[r]
    }

    pub fn block_by_name(&self, name: &str) -> Option<&[f64]> {
        let i = self.layout.blocks.iter().position(|b| b.name == name)?;
        Some(self.block(i))
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.arch == other.arch
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn add_scaled(&mut self, scale: f64, other: &MlpParams) {
        assert!(self.same_shape(other), "parameter shape mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * *b;
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Everything the backward pass needs, plus the user-facing outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Matrix,
    /// Pre-activations of each backbone layer.
    pub pre: Vec<Matrix>,
    /// Outputs of each backbone layer; the last entry is the feature matrix.
    pub post: Vec<Matrix>,
    pub logits: Matrix,
    pub probs: Matrix,
    /// `h(z)` when requested.
    pub projection: Option<Matrix>,
}

impl ForwardTrace {
    pub fn features(&self) -> &Matrix {
        self.post.last().expect("backbone has at least one layer")
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

fn dense_forward(x: &Matrix, w: &[f64], b: Option<&[f64]>, out_dim: usize) -> Matrix {
    let n = x.rows();
    let mut y = Matrix::zeros(n, out_dim);
    if let Some(b) = b {
        for i in 0..n {
            y.row_mut(i).copy_from_slice(b);
        }
        gemm(
            n,
            x.cols(),
            out_dim,
            1.0,
            x.as_slice(),
            false,
            w,
            false,
            1.0,
            y.as_mut_slice(),
        );
    } else {
        gemm(
            n,
            x.cols(),
            out_dim,
            1.0,
            x.as_slice(),
            false,
            w,
            false,
            0.0,
            y.as_mut_slice(),
        );
    }
    y
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Forward pass over a batch (one sample per row).
pub fn forward_batch(
    params: &MlpParams,
    x: &Matrix,
    with_projection: bool,
) -> Result<ForwardTrace> {
    let arch = &params.arch;
    if x.cols() != arch.input_dim {
        return Err(Error::InvalidInput(format!(
            "input has {} columns, network expects {}",
            x.cols(),
            arch.input_dim
        )));
    }
    let layout = &params.layout;
    let dims = arch.backbone_dims();
    let n_layers = dims.len();
    let mut pre = Vec::with_capacity(n_layers);
    let mut post: Vec<Matrix> = Vec::with_capacity(n_layers);
    for (l, (dl, &(_, out_dim))) in layout.backbone.iter().zip(&dims).enumerate() {
        let input = if l == 0 { x } else { &post[l - 1] };
        let z = dense_forward(
            input,
            params.block(dl.weight),
            dl.bias.map(|b| params.block(b)),
            out_dim,
        );
        let act = arch.activation;
        let mut a = z.clone();
        if act != Activation::Identity {
            for v in a.as_mut_slice() {
                *v = act.apply(*v);
            }
        }
        pre.push(z);
        post.push(a);
    }
    let features = &post[n_layers - 1];
    let head = layout.head;
    let logits = dense_forward(
        features,
        params.block(head.weight),
        head.bias.map(|b| params.block(b)),
        arch.num_classes,
    );
    let projection = with_projection.then(|| {
        dense_forward(
            features,
            params.block(layout.proj.weight),
            None,
            arch.feature_dim,
        )
    });
    if !features.is_finite()
        || !logits.is_finite()
        || projection.as_ref().is_some_and(|p| !p.is_finite())
    {
        return Err(Error::Numerical(
            "non-finite activations in forward pass".into(),
        ));
    }
    let probs = softmax_rows(&logits);
    Ok(ForwardTrace {
        input: x.clone(),
        pre,
        post,
        logits,
        probs,
        projection,
    })
}

/// Forward pass for a single input vector.
pub fn forward(params: &MlpParams, x: &[f64]) -> Result<ForwardTrace> {
    forward_batch(params, &Matrix::from_rows(&[x]), true)
}

/// Upstream gradients on the three forward outputs. `None` marks an output
/// as constant: nothing flows back through it.
#[derive(Debug, Clone, Copy, Default)]
pub struct Upstream<'a> {
    pub features: Option<&'a Matrix>,
    pub logits: Option<&'a Matrix>,
    pub projection: Option<&'a Matrix>,
}

fn column_sums_into(m: &Matrix, out: &mut [f64]) {
    for row in m.iter_rows() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Accumulates exact parameter gradients into `grad`.
pub fn backward(
    params: &MlpParams,
    trace: &ForwardTrace,
    upstream: Upstream<'_>,
    grad: &mut MlpParams,
) -> Result<()> {
    if !params.same_shape(grad) {
        return Err(Error::InvalidInput("gradient buffer shape mismatch".into()));
    }
    let arch = &params.arch;
    let layout = &params.layout;
    let n = trace.batch_size();
    let d = arch.feature_dim;
    let check = |m: &Matrix, cols: usize, what: &str| -> Result<()> {
        if m.rows() != n || m.cols() != cols {
            Err(Error::InvalidInput(format!(
                "upstream {what} has shape {}x{}, expected {n}x{cols}",
                m.rows(),
                m.cols()
            )))
        } else {
            Ok(())
        }
    };
    let features = trace.features();
    let mut d_features: Option<Matrix> = None;

    if let Some(dp) = upstream.projection {
        check(dp, d, "projection")?;
        if trace.projection.is_none() {
            return Err(Error::InvalidInput(
                "trace was recorded without projection".into(),
            ));
        }
        let wi = layout.proj.weight;
        gemm(
            d,
            n,
            d,
            1.0,
            features.as_slice(),
            true,
            dp.as_slice(),
            false,
            1.0,
            grad.block_mut(wi),
        );
        let mut dz = Matrix::zeros(n, d);
        gemm(
            n,
            d,
            d,
            1.0,
            dp.as_slice(),
            false,
            params.block(wi),
            true,
            0.0,
            dz.as_mut_slice(),
        );
        d_features = Some(dz);
    }
    if let Some(dl) = upstream.logits {
        let c = arch.num_classes;
        check(dl, c, "logits")?;
        let head = layout.head;
        gemm(
            d,
            n,
            c,
            1.0,
            features.as_slice(),
            true,
            dl.as_slice(),
            false,
            1.0,
            grad.block_mut(head.weight),
        );
        if let Some(b) = head.bias {
            column_sums_into(dl, grad.block_mut(b));
        }
        let dz = d_features.get_or_insert_with(|| Matrix::zeros(n, d));
        gemm(
            n,
            c,
            d,
            1.0,
            dl.as_slice(),
            false,
            params.block(head.weight),
            true,
            1.0,
            dz.as_mut_slice(),
        );
    }
    if let Some(df) = upstream.features {
        check(df, d, "features")?;
        match d_features.as_mut() {
            Some(dz) => dz.add_assign(df),
            None => d_features = Some(df.clone()),
        }
    }
    let Some(mut delta) = d_features else {
        return Ok(());
    };

    let dims = arch.backbone_dims();
    let n_layers = dims.len();
    for l in (0..n_layers).rev() {
        let (fan_in, fan_out) = dims[l];
        let act = arch.activation;
        if act != Activation::Identity {
            for (g, a) in delta
                .as_mut_slice()
                .iter_mut()
                .zip(trace.post[l].as_slice())
            {
                *g *= act.derivative_from_output(*a);
            }
        }
        let input = if l == 0 {
            &trace.input
        } else {
            &trace.post[l - 1]
        };
        let dl = layout.backbone[l];
        gemm(
            fan_in,
            n,
            fan_out,
            1.0,
            input.as_slice(),
            true,
            delta.as_slice(),
            false,
            1.0,
            grad.block_mut(dl.weight),
        );
        if let Some(b) = dl.bias {
            column_sums_into(&delta, grad.block_mut(b));
        }
        if l > 0 {
            let mut prev = Matrix::zeros(n, fan_in);
            gemm(
                n,
                fan_out,
                fan_in,
                1.0,
                delta.as_slice(),
                false,
                params.block(dl.weight),
                true,
                0.0,
                prev.as_mut_slice(),
            );
            delta = prev;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Minimum number of coordinates checked (all, if the model is smaller).
    pub min_coords: usize,
    /// Denominator floor of the relative error: entries smaller than this
    /// in magnitude are compared on an absolute scale.
    pub scale_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            min_coords: 200,
            scale_floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

fn choose_coords(params: &MlpParams, cfg: &GradCheckConfig, rng: &mut StreamRng) -> Vec<usize> {
    let total = params.len();
    if total <= cfg.min_coords {
        return (0..total).collect();
    }
    // a few from every block, then uniform draws up to the minimum
    let mut coords: Vec<usize> = Vec::new();
    for block in &params.layout.blocks {
        let k = block.len().min(8);
        coords.extend(
            sample(rng, block.len(), k)
                .into_iter()
                .map(|i| block.offset + i),
        );
    }
    let mut chosen: BTreeSet<usize> = coords.into_iter().collect();
    while chosen.len() < cfg.min_coords {
        chosen.insert(rng.random_range(0..total));
    }
    chosen.into_iter().collect()
}

/// Compares `analytic` with central differences of `loss` coordinate-wise.
pub fn grad_check<F>(
    params: &MlpParams,
    analytic: &MlpParams,
    mut loss: F,
    cfg: GradCheckConfig,
) -> GradCheckReport
where
    F: FnMut(&MlpParams) -> f64,
{
    assert!(params.same_shape(analytic));
    let mut rng = rng::stream(cfg.seed, "grad_check");
    let coords = choose_coords(params, &cfg, &mut rng);
    let mut probe = params.clone();
    let mut worst = (0.0_f64, 0usize);
    for &i in &coords {
        let orig = probe.values[i];
        probe.values[i] = orig + cfg.step;
        let up = loss(&probe);
        probe.values[i] = orig - cfg.step;
        let down = loss(&probe);
        probe.values[i] = orig;
        let numeric = (up - down) / (2.0 * cfg.step);
        let a = analytic.values[i];
        let denom = a.abs().max(numeric.abs()).max(cfg.scale_floor);
        let rel = (a - numeric).abs() / denom;
        if rel > worst.0 || rel.is_nan() {
            worst = (if rel.is_nan() { f64::INFINITY } else { rel }, i);
        }
    }
    GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        checked: coords.len(),
        passed: worst.0 < cfg.tolerance,
    }
}

pub const PARAMS_MAGIC: &str = "# osslab-params v1";

fn arch_line(arch: &Architecture) -> String {
    let hidden: Vec<String> = arch.hidden.iter().map(|h| h.to_string()).collect();
    format!(
        "arch input_dim={} hidden={} feature_dim={} num_classes={} activation={}",
        arch.input_dim,
        hidden.join(","),
        arch.feature_dim,
        arch.num_classes,
        arch.activation.name()
    )
}

fn parse_arch_line(line: &str) -> std::result::Result<Architecture, String> {
    let rest = line.strip_prefix("arch ").ok_or("expected 'arch' line")?;
    let mut arch = Architecture {
        hidden: Vec::new(),
        ..Architecture::default()
    };
    for kv in rest.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or(format!("bad field '{kv}'"))?;
        let num = |v: &str| v.parse::<usize>().map_err(|e| format!("{k}: {e}"));
        match k {
            "input_dim" => arch.input_dim = num(v)?,
            "feature_dim" => arch.feature_dim = num(v)?,
            "num_classes" => arch.num_classes = num(v)?,
            "hidden" if v.is_empty() => arch.hidden.clear(),
            "hidden" => {
                arch.hidden = v
                    .split(',')
                    .map(num)
                    .collect::<std::result::Result<_, _>>()?
            }
            "activation" => {
                arch.activation =
                    Activation::from_name(v).ok_or(format!("unknown activation '{v}'"))?
            }
            _ => return Err(format!("unknown field '{k}'")),
        }
    }
    Ok(arch)
}

/// Text layout: a magic line, an `arch` line, then one `tensor <name> <rows>
/// <cols>` header per block followed by its rows, values comma separated and
/// printed in shortest round-trip form.
pub fn write_params<W: Write>(params: &MlpParams, mut w: W) -> Result<()> {
    writeln!(w, "{PARAMS_MAGIC}")?;
    writeln!(w, "{}", arch_line(&params.arch))?;
    let mut line = String::new();
    for (bi, block) in params.layout.blocks.iter().enumerate() {
        writeln!(w, "tensor {} {} {}", block.name, block.rows, block.cols)?;
        for row in params.block(bi).chunks(block.cols) {
            line.clear();
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    line.push(',');
                }
                write!(line, "{v}").unwrap();
            }
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

/// Parses the format written by [`write_params`] from a line iterator,
/// consuming exactly the lines that belong to it.
pub fn read_params_lines<I>(lines: &mut I, origin: &Path) -> Result<MlpParams>
where
    I: Iterator<Item = std::io::Result<String>>,
{
    let fail = |msg: String| Error::Format {
        path: origin.to_path_buf(),
        msg,
    };
    let magic = lines.next().transpose()?.unwrap_or_default();
    if magic.trim() != PARAMS_MAGIC {
        return Err(fail(format!("expected '{PARAMS_MAGIC}', found '{magic}'")));
    }
    let arch_text = lines.next().transpose()?.unwrap_or_default();
    let arch = parse_arch_line(arch_text.trim()).map_err(fail)?;
    arch.validate()?;
    let mut params = MlpParams::zeros(&arch);
    for bi in 0..params.layout.blocks.len() {
        let block = params.layout.blocks[bi].clone();
        let header = lines.next().transpose()?.unwrap_or_default();
        let expect = format!("tensor {} {} {}", block.name, block.rows, block.cols);
        if header.trim() != expect {
            return Err(fail(format!("expected '{expect}', found '{header}'")));
        }
        let dst = params.block_mut(bi);
        for r in 0..block.rows {
            let row = lines
                .next()
                .transpose()?
                .ok_or_else(|| fail(format!("{}: truncated", block.name)))?;
            let vals: Vec<&str> = row.trim().split(',').collect();
            if vals.len() != block.cols {
                return Err(fail(format!(
                    "{} row {r}: expected {} values",
                    block.name, block.cols
                )));
            }
            for (c, v) in vals.iter().enumerate() {
                dst[r * block.cols + c] = v
                    .parse()
                    .map_err(|e| fail(format!("{} row {r}: {e}", block.name)))?;
            }
        }
    }
    Ok(params)
}

pub fn read_params<R: Read>(r: R, origin: &Path) -> Result<MlpParams> {
    let mut lines = BufReader::new(r).lines();
    read_params_lines(&mut lines, origin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny_arch() -> Architecture {
        Architecture {
            input_dim: 5,
            hidden: vec![7, 6],
            feature_dim: 4,
            num_classes: 3,
            activation: Activation::Tanh,
        }
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = rng::stream(seed, "input");
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect(),
        )
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let arch = tiny_arch();
        let p = MlpParams::zeros(&arch);
        let t = forward(&p, &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!(t.logits.as_slice().iter().all(|&v| v == 0.0));
        for &q in t.probs.as_slice() {
            assert!((q - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_backbone_passes_input_through() {
        let arch = Architecture {
            input_dim: 3,
            hidden: vec![],
            feature_dim: 3,
            num_classes: 2,
            activation: Activation::Identity,
        };
        let mut p = MlpParams::zeros(&arch);
        let w = p.layout.backbone[0].weight;
        let block = p.block_mut(w);
        for i in 0..3 {
            block[i * 3 + i] = 1.0;
        }
        let x = [0.3, -1.2, 4.0];
        let t = forward(&p, &x).unwrap();
        assert_eq!(t.features().row(0), &x);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let arch = Architecture::default();
        let p = MlpParams::init_seeded(&arch, 3);
        let x = random_input(100, arch.input_dim, 4);
        let t = forward_batch(&p, &x, false).unwrap();
        for row in t.probs.iter_rows() {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let p = MlpParams::zeros(&tiny_arch());
        assert!(forward(&p, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let p = MlpParams::init_seeded(&tiny_arch(), 1);
        assert!(matches!(
            forward(&p, &[f64::NAN, 0.0, 0.0, 0.0, 0.0]),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let arch = tiny_arch();
        let p = MlpParams::init_seeded(&arch, 5);
        let x = random_input(4, arch.input_dim, 6);
        let t = forward_batch(&p, &x, true).unwrap();
        let mut g = p.zeros_like();
        let zl = Matrix::zeros(4, 3);
        let zf = Matrix::zeros(4, 4);
        backward(
            &p,
            &t,
            Upstream {
                features: Some(&zf),
                logits: Some(&zl),
                projection: Some(&zf),
            },
            &mut g,
        )
        .unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_squared_logits_bias_gradient_equals_logits() {
        let arch = tiny_arch();
        let p = MlpParams::init_seeded(&arch, 8);
        let x = random_input(1, arch.input_dim, 9);
        let t = forward_batch(&p, &x, false).unwrap();
        let mut g = p.zeros_like();
        backward(
            &p,
            &t,
            Upstream {
                logits: Some(&t.logits),
                ..Default::default()
            },
            &mut g,
        )
        .unwrap();
        let bias = g.block_by_name("head.bias").unwrap();
        for (b, l) in bias.iter().zip(t.logits.row(0)) {
            assert!((b - l).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let arch = tiny_arch();
        let p = MlpParams::init_seeded(&arch, 1);
        let t = forward_batch(&p, &random_input(2, 5, 1), false).unwrap();
        let bad = Matrix::zeros(3, 3);
        let mut g = p.zeros_like();
        assert!(backward(
            &p,
            &t,
            Upstream {
                logits: Some(&bad),
                ..Default::default()
            },
            &mut g
        )
        .is_err());
        let dp = Matrix::zeros(2, 4);
        assert!(backward(
            &p,
            &t,
            Upstream {
                projection: Some(&dp),
                ..Default::default()
            },
            &mut g
        )
        .is_err());
    }

    /// Fixed random linear functional of all three outputs; its gradient
    /// through every layer is checked against central differences.
    #[test]
    fn backward_matches_finite_differences() {
        let arch = tiny_arch();
        let p = MlpParams::init_seeded(&arch, 10);
        let x = random_input(6, arch.input_dim, 11);
        let cf = random_input(6, 4, 12);
        let cl = random_input(6, 3, 13);
        let cp = random_input(6, 4, 14);
        let loss = |q: &MlpParams| {
            let t = forward_batch(q, &x, true).unwrap();
            let f: f64 = t
                .features()
                .as_slice()
                .iter()
                .zip(cf.as_slice())
                .map(|(a, b)| a * b)
                .sum();
            let l: f64 = t
                .logits
                .as_slice()
                .iter()
                .zip(cl.as_slice())
                .map(|(a, b)| a * b)
                .sum();
            let h: f64 = t
                .projection
                .unwrap()
                .as_slice()
                .iter()
                .zip(cp.as_slice())
                .map(|(a, b)| a * b)
                .sum();
            f + l + h
        };
        let t = forward_batch(&p, &x, true).unwrap();
        let mut g = p.zeros_like();
        backward(
            &p,
            &t,
            Upstream {
                features: Some(&cf),
                logits: Some(&cl),
                projection: Some(&cp),
            },
            &mut g,
        )
        .unwrap();
        let report = grad_check(&p, &g, loss, GradCheckConfig::default());
        assert!(report.passed, "{report:?}");
        assert_eq!(report.checked, p.len().min(report.checked));
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        let arch = Architecture::default();
        let p = MlpParams::init_seeded(&arch, 2);
        let report = grad_check(
            &p,
            &p,
            |q| 0.5 * q.squared_norm(),
            GradCheckConfig::default(),
        );
        assert!(report.checked >= 200);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn constant_output_receives_no_gradient() {
        // features marked constant: only head/proj receive gradient from
        // logits when the backbone path is cut at the features
        let arch = tiny_arch();
        let p = MlpParams::init_seeded(&arch, 3);
        let x = random_input(3, arch.input_dim, 4);
        let t = forward_batch(&p, &x, true).unwrap();
        let mut g = p.zeros_like();
        backward(&p, &t, Upstream::default(), &mut g).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn params_text_round_trip() {
        let p = MlpParams::init_seeded(&Architecture::default(), 21);
        let mut buf = Vec::new();
        write_params(&p, &mut buf).unwrap();
        let back = read_params(buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn glorot_bounds_hold() {
        let arch = Architecture::default();
        let p = MlpParams::init_seeded(&arch, 1);
        for block in &p.layout.blocks {
            let vals = &p.values[block.range()];
            if block.name.ends_with("bias") {
                assert!(vals.iter().all(|&v| v == 0.0));
            } else {
                let a = (6.0 / (block.rows + block.cols) as f64).sqrt();
                assert!(vals.iter().all(|&v| v.abs() <= a));
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_normalizes(row in proptest::collection::vec(-50.0f64..50.0, 1..10)) {
            let m = Matrix::from_rows(&[row]);
            let s: f64 = softmax_rows(&m).as_slice().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
