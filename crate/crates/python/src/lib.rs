//! Python bindings for the `osslab` core crate.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use osslab::betamix::{self, BetaMixtureModel as CoreMixture, BetaParams as CoreBeta, MomentPair};
use osslab::data::{generate, load_dataset, save_dataset};
use osslab::eval::{self, Evaluator};
use osslab::harness::checkpoint::load_checkpoint;
use osslab::harness::run;
use osslab::harness::TrainingConfig;
use osslab::optim::Schedule;
use osslab::subspace::{self, ClassMeanTable, ScoreKind};
use osslab::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Parses a JSON string with Python's `json` module.
fn json_value<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| to_py(e.into()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn score_kind(name: &str) -> PyResult<ScoreKind> {
    ScoreKind::from_name(name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown score kind '{name}'")))
}

#[pyclass(name = "BetaParams", module = "osslab_py", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyBetaParams {
    inner: CoreBeta,
}

#[pymethods]
impl PyBetaParams {
    #[new]
    fn new(alpha: f64, beta: f64) -> PyResult<Self> {
        Ok(Self {
            inner: CoreBeta::new(alpha, beta).map_err(to_py)?,
        })
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    fn variance(&self) -> f64 {
        self.inner.variance()
    }

    /// Density at `s`, which must lie strictly inside (0, 1).
    fn pdf(&self, s: f64) -> PyResult<f64> {
        betamix::beta_pdf(self.inner, s).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "BetaParams(alpha={}, beta={})",
            self.inner.alpha, self.inner.beta
        )
    }
}

/// Two-component Beta mixture over scores, updated one batch at a time.
#[pyclass(name = "BetaMixture", module = "osslab_py", skip_from_py_object)]
#[derive(Clone)]
struct PyBetaMixture {
    inner: CoreMixture,
}

#[pymethods]
impl PyBetaMixture {
    /// Starts from the default ID/OOD guesses unless `id` and `ood` are given.
    #[new]
    #[pyo3(signature = (pi=0.5, epsilon=0.1, momentum=0.97, id=None, ood=None))]
    fn new(
        pi: f64,
        epsilon: f64,
        momentum: f64,
        id: Option<PyBetaParams>,
        ood: Option<PyBetaParams>,
    ) -> PyResult<Self> {
        let inner = match (id, ood) {
            (None, None) => CoreMixture::with_default_init(pi, epsilon, momentum),
            (Some(i), Some(o)) => CoreMixture::new(i.inner, o.inner, pi, epsilon, momentum),
            _ => {
                return Err(PyValueError::new_err(
                    "give both id and ood components or neither",
                ))
            }
        };
        Ok(Self {
            inner: inner.map_err(to_py)?,
        })
    }

    #[getter]
    fn id(&self) -> PyBetaParams {
        PyBetaParams {
            inner: self.inner.id,
        }
    }

    #[getter]
    fn ood(&self) -> PyBetaParams {
        PyBetaParams {
            inner: self.inner.ood,
        }
    }

    #[getter]
    fn pi(&self) -> f64 {
        self.inner.pi
    }

    /// `[alpha_id, beta_id, alpha_ood, beta_ood]`.
    fn params(&self) -> [f64; 4] {
        self.inner.params_array()
    }

    #[pyo3(signature = (score, regularized=false))]
    fn posterior(&self, score: f64, regularized: bool) -> f64 {
        betamix::posterior_id(&self.inner, betamix::clamp_score(score), regularized)
    }

    /// One E-step and moment step on a batch; returns whether each
    /// component was refit.
    #[pyo3(signature = (unlabeled, labeled=Vec::new()))]
    fn step(&mut self, unlabeled: Vec<f64>, labeled: Vec<f64>) -> (bool, bool) {
        let (next, report) = betamix::imm_batch_step(&self.inner, &unlabeled, &labeled);
        self.inner = next;
        (report.id_updated, report.ood_updated)
    }

    fn __repr__(&self) -> String {
        let [a, b, c, d] = self.inner.params_array();
        format!(
            "BetaMixture(id=({a}, {b}), ood=({c}, {d}), pi={})",
            self.inner.pi
        )
    }
}

/// Full-data fit from the default initialization.
#[pyfunction]
#[pyo3(signature = (scores, labeled=Vec::new(), pi=0.5, max_iters=1000, tol=1e-8))]
fn fit_mixture(
    scores: Vec<f64>,
    labeled: Vec<f64>,
    pi: f64,
    max_iters: usize,
    tol: f64,
) -> PyResult<(PyBetaMixture, bool)> {
    let fit = betamix::fit_reference(&scores, &labeled, pi, max_iters, tol).map_err(to_py)?;
    Ok((PyBetaMixture { inner: fit.model }, fit.converged))
}

/// Weighted mean and population variance.
#[pyfunction]
fn weighted_moments(scores: Vec<f64>, weights: Vec<f64>) -> PyResult<(f64, f64)> {
    let m = betamix::weighted_moments(&scores, &weights).map_err(to_py)?;
    Ok((m.mean, m.variance))
}

/// Beta parameters matching a mean and variance, and whether they were clamped.
#[pyfunction]
fn method_of_moments(mean: f64, variance: f64) -> (PyBetaParams, bool) {
    let fit = betamix::method_of_moments(MomentPair { mean, variance });
    (PyBetaParams { inner: fit.params }, fit.clamped)
}

/// Cosine of the angle between `z` and the span of `means`.
#[pyfunction]
fn subspace_score(z: Vec<f64>, means: Vec<Vec<f64>>) -> PyResult<f64> {
    let table = ClassMeanTable::from_means(means, 0.0).map_err(to_py)?;
    let basis = subspace::compute_basis(&table).map_err(to_py)?;
    subspace::subspace_score(&z, &basis).map_err(to_py)
}

/// Orthonormal basis of the span of `means`, one column per entry.
#[pyfunction]
fn subspace_basis(means: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let table = ClassMeanTable::from_means(means, 0.0).map_err(to_py)?;
    Ok(subspace::compute_basis(&table)
        .map_err(to_py)?
        .columns()
        .to_vec())
}

#[pyfunction]
fn auroc(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> PyResult<f64> {
    eval::auroc(&id_scores, &ood_scores).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (scores, bins=128))]
fn otsu_threshold(scores: Vec<f64>, bins: usize) -> PyResult<f64> {
    osslab::decide::otsu_threshold(&scores, bins).map_err(to_py)
}

/// Bernoulli ID masks drawn from posteriors with a seeded generator.
#[pyfunction]
fn sample_mask(p_id: Vec<f64>, seed: u64) -> Vec<bool> {
    let mut rng = osslab::rng::stream(seed, osslab::rng::STREAM_MASKS);
    osslab::decide::sample_mask(&p_id, &mut rng).m_id
}

/// Learning rate at step `k` of the warm-up plus cosine schedule.
#[pyfunction]
#[pyo3(signature = (k, eta0=0.03, total_steps=20000, warmup_steps=2000, gamma=0.625))]
fn learning_rate(
    k: usize,
    eta0: f64,
    total_steps: usize,
    warmup_steps: usize,
    gamma: f64,
) -> PyResult<f64> {
    let s = Schedule {
        eta0,
        total_steps,
        warmup_steps,
        gamma,
    };
    s.validate().map_err(to_py)?;
    s.lr(k).map_err(to_py)
}

/// Training configuration; keyword arguments override defaults.
#[pyclass(name = "Config", module = "osslab_py", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: TrainingConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<Self> {
        let mut inner = TrainingConfig::default();
        if let Some(kw) = overrides {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                inner.set(&key, &v.str()?.to_string()).map_err(to_py)?;
            }
        }
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: TrainingConfig::load(&path).map_err(to_py)?,
        })
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner.get(key).map_err(to_py)
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        self.inner
            .set(key, &value.str()?.to_string())
            .map_err(to_py)
    }

    fn run_name(&self) -> String {
        self.inner.run_name()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("Config({})", self.inner.run_name())
    }
}

/// Trains one run and returns its summary as a dict.
#[pyfunction]
#[pyo3(signature = (config, out_root=None))]
fn train<'py>(
    py: Python<'py>,
    config: &PyConfig,
    out_root: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let outcome = run::train(&config.inner, out_root.as_deref()).map_err(to_py)?;
    json_value(py, &outcome.summary)
}

/// Writes the dataset a configuration describes.
#[pyfunction]
fn generate_dataset(config: &PyConfig, path: PathBuf) -> PyResult<()> {
    let ds = generate(&config.inner.dataset_spec()).map_err(to_py)?;
    save_dataset(&ds, &path).map_err(to_py)
}

/// Evaluates a checkpoint's EMA model on a dataset file; one dict per score kind.
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, scores=None))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    dataset: PathBuf,
    scores: Option<Vec<String>>,
) -> PyResult<Bound<'py, PyAny>> {
    let ck = load_checkpoint(&checkpoint).map_err(to_py)?;
    let ds = load_dataset(&dataset).map_err(to_py)?;
    let kinds = match scores {
        Some(names) => names
            .iter()
            .map(|n| score_kind(n))
            .collect::<PyResult<Vec<_>>>()?,
        None => ScoreKind::ALL.to_vec(),
    };
    let pool = ds.training_pool();
    let ev = Evaluator::new(
        &ck.state.optim.ema_params,
        &pool.labeled,
        &ds.test_id,
        &ds.test_ood,
    )
    .map_err(to_py)?;
    json_value(py, &ev.reports(&kinds, ck.state.step).map_err(to_py)?)
}

#[pymodule]
fn osslab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBetaParams>()?;
    m.add_class::<PyBetaMixture>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(fit_mixture, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_moments, m)?)?;
    m.add_function(wrap_pyfunction!(method_of_moments, m)?)?;
    m.add_function(wrap_pyfunction!(subspace_score, m)?)?;
    m.add_function(wrap_pyfunction!(subspace_basis, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(otsu_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(sample_mask, m)?)?;
    m.add_function(wrap_pyfunction!(learning_rate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
