//! Python bindings: statistics, spectral and decomposition helpers, synthetic
//! data, single pipelines and whole experiments.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use combts::datasets::{apply_split, standardize, SeriesDataset, SplitPolicy};
use combts::embeddings::{EmbeddingKind, EmbeddingSpec};
use combts::encoders::{EncoderKind, EncoderSpec};
use combts::harness::commands::{cmd_report, cmd_run, cmd_significance, cmd_validate_config};
use combts::harness::synthetic::{generate, SyntheticSpec};
use combts::numcore::{dft_real, idft_real, Graph, Tensor};
use combts::pipeline::{train, Model, PipelineConfig, TrainSettings};
use combts::protocol::RunStatus;
use combts::transforms::{multiscale_downsample, revin_forward, trend_seasonal, TransformKind, TransformSpec};
use combts::{stats, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::MissingFile(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn series_tensor(x: &[f64]) -> combts::Result<Tensor> {
    Tensor::new(&[1, 1, x.len(), 1], x.to_vec())
}

// ---- statistics

#[pyfunction]
pub fn mu_hat(losses: Vec<f64>) -> PyResult<f64> {
    stats::mu_hat(&losses).map_err(py_err)
}

#[pyfunction]
pub fn sigma_hat(losses: Vec<f64>) -> PyResult<f64> {
    stats::sigma_hat(&losses).map_err(py_err)
}

#[pyfunction]
pub fn l_best(losses: Vec<f64>) -> PyResult<f64> {
    stats::l_best(&losses).map_err(py_err)
}

/// `(low, high)` of the 95% t interval of the mean.
#[pyfunction]
pub fn ci95(losses: Vec<f64>) -> PyResult<(f64, f64)> {
    stats::ci95(&losses).map_err(py_err)
}

#[pyfunction]
pub fn student_t_quantile(p: f64, nu: f64) -> PyResult<f64> {
    if !(p > 0.0 && p < 1.0 && nu > 0.0) {
        return Err(PyValueError::new_err("need 0 < p < 1 and nu > 0"));
    }
    Ok(stats::student_t_quantile(p, nu))
}

/// One-tailed test that `x` is smaller than `y`: `(u, p, exact)`.
#[pyfunction]
pub fn mann_whitney(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64, bool)> {
    let t = stats::mann_whitney_one_tailed(&x, &y).map_err(py_err)?;
    Ok((t.u, t.p, t.exact))
}

// ---- spectral and transforms

/// DFT of a real sequence as `(re, im)` pairs.
#[pyfunction]
pub fn dft(x: Vec<f64>) -> Vec<(f64, f64)> {
    dft_real(&x).into_iter().map(|c| (c.re, c.im)).collect()
}

/// Real part of the inverse DFT of `(re, im)` pairs.
#[pyfunction]
pub fn idft(spectrum: Vec<(f64, f64)>) -> Vec<f64> {
    let c: Vec<_> = spectrum
        .into_iter()
        .map(|(re, im)| combts::numcore::Complex64::new(re, im))
        .collect();
    idft_real(&c)
}

/// `(trend, seasonal)` of a single series.
#[pyfunction]
#[pyo3(signature = (series, kernel=25))]
pub fn decompose(series: Vec<f64>, kernel: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let out = trend_seasonal(&series_tensor(&series).map_err(py_err)?, kernel).map_err(py_err)?;
    Ok((out.trend.into_data(), out.seasonal.into_data()))
}

/// Average-pooled copies of a series, finest first.
#[pyfunction]
#[pyo3(signature = (series, levels=3, factor=2))]
pub fn multiscale(series: Vec<f64>, levels: usize, factor: usize) -> PyResult<Vec<Vec<f64>>> {
    let scales = multiscale_downsample(&series_tensor(&series).map_err(py_err)?, levels, factor).map_err(py_err)?;
    Ok(scales.into_iter().map(Tensor::into_data).collect())
}

/// `(normalized, mean, std)` of one window.
#[pyfunction]
#[pyo3(signature = (series, eps=1e-5))]
pub fn revin(series: Vec<f64>, eps: f64) -> PyResult<(Vec<f64>, f64, f64)> {
    let mut g = Graph::new();
    let x = g.constant(series_tensor(&series).map_err(py_err)?);
    let (y, state) = revin_forward(&mut g, x, eps, None).map_err(py_err)?;
    Ok((g.value(y).data().to_vec(), state.mean.data()[0], state.std.data()[0]))
}

// ---- data

/// Synthetic periodic series as rows of `variates` values.
#[pyfunction]
#[pyo3(signature = (length, variates=1, period=24, harmonics=1, amplitude=1.0, trend=0.0, noise=0.0, seed=0))]
#[allow(clippy::too_many_arguments)]
pub fn synthetic(
    length: usize,
    variates: usize,
    period: usize,
    harmonics: usize,
    amplitude: f64,
    trend: f64,
    noise: f64,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let spec = SyntheticSpec {
        length,
        variates,
        period,
        harmonics,
        amplitude,
        trend,
        noise,
        seed,
    };
    let ds = generate("synthetic", &spec).map_err(py_err)?;
    Ok(ds.values().chunks(variates).map(<[f64]>::to_vec).collect())
}

// ---- pipelines

/// One assembled pipeline.
#[pyclass(name = "Model")]
pub struct PyModel {
    inner: Model,
    config: PipelineConfig,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (
        lookback, horizon, variates, transform="none", embedding="patch", encoder="transformer",
        latent_dim=64, layers=1, cycle_len=24, seed=0
    ))]
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        lookback: usize,
        horizon: usize,
        variates: usize,
        transform: &str,
        embedding: &str,
        encoder: &str,
        latent_dim: usize,
        layers: usize,
        cycle_len: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let tf: TransformKind = transform.parse().map_err(py_err)?;
        let emb: EmbeddingKind = embedding.parse().map_err(py_err)?;
        let enc: EncoderKind = encoder.parse().map_err(py_err)?;
        let mut transform = TransformSpec::new(tf);
        transform.cycle_len = cycle_len;
        let config = PipelineConfig {
            transform,
            embedding: EmbeddingSpec::new(emb, latent_dim),
            encoder: EncoderSpec::new(enc, layers),
            lookback,
            horizon,
            variates,
        };
        let inner = Model::assemble(&config, seed).map_err(py_err)?;
        Ok(Self { inner, config })
    }

    #[getter]
    pub fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Token axis the encoder mixes over: `"L"` (time tokens) or `"C"` (variates).
    #[getter]
    pub fn attention_axis(&self) -> &'static str {
        self.inner.attention_axis().as_str()
    }

    /// Forecasts for windows shaped `[batch][variate][lookback]`; `starts` are
    /// the absolute time indices of each window (used by the cycle transform).
    #[pyo3(signature = (windows, starts=None))]
    pub fn predict(&self, windows: Vec<Vec<Vec<f64>>>, starts: Option<Vec<usize>>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let (n, t, p) = (self.config.variates, self.config.lookback, self.config.horizon);
        let b = windows.len();
        let mut flat = Vec::with_capacity(b * n * t);
        for w in &windows {
            if w.len() != n || w.iter().any(|s| s.len() != t) {
                return Err(PyValueError::new_err(format!("each window must be {n} x {t}")));
            }
            flat.extend(w.iter().flatten());
        }
        let starts = starts.unwrap_or_else(|| vec![0; b]);
        let x = Tensor::new(&[b, n, t, 1], flat).map_err(py_err)?;
        let y = self.inner.predict(&x, &starts).map_err(py_err)?;
        Ok(y.data()
            .chunks(n * p)
            .map(|batch| batch.chunks(p).map(<[f64]>::to_vec).collect())
            .collect())
    }

    /// Trains on rows `[time][variate]` split 0.7/0.1/0.2 after
    /// standardization; returns `(test_mse, test_mae, best_epoch)`.
    #[pyo3(signature = (rows, learning_rate=1e-3, epochs=30, patience=3, batch_size=32, seed=0))]
    pub fn fit(
        &mut self,
        rows: Vec<Vec<f64>>,
        learning_rate: f64,
        epochs: usize,
        patience: usize,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<(f64, f64, usize)> {
        let n = self.config.variates;
        if rows.iter().any(|r| r.len() != n) {
            return Err(PyValueError::new_err(format!("every row needs {n} values")));
        }
        let ds = SeriesDataset::new("python", rows.into_iter().flatten().collect(), n).map_err(py_err)?;
        let ds = apply_split(ds, SplitPolicy::Ratio { train: 0.7, val: 0.1 }).map_err(py_err)?;
        let (ds, _) = standardize(&ds).map_err(py_err)?;
        let settings = TrainSettings {
            learning_rate,
            batch_size,
            epochs,
            patience,
            seed,
            max_steps: None,
        };
        let out = train(&mut self.inner, &ds, &settings).map_err(py_err)?;
        Ok((out.test_mse, out.test_mae, out.best_epoch))
    }
}

// ---- experiments

/// `(config_hash, plan_hash, runs)` of a config file.
#[pyfunction]
pub fn validate_config(path: PathBuf) -> PyResult<(String, String, usize)> {
    let v = cmd_validate_config(&path, &mut std::io::sink()).map_err(py_err)?;
    Ok((v.config_hash, v.plan_hash, v.runs))
}

/// Runs (or resumes) an experiment; returns `(plan_hash, ok, diverged, failed)`.
#[pyfunction]
#[pyo3(signature = (config, out=None, parallelism=1, data_dir=None))]
pub fn run_experiment(
    py: Python<'_>,
    config: PathBuf,
    out: Option<PathBuf>,
    parallelism: usize,
    data_dir: Option<PathBuf>,
) -> PyResult<(String, usize, usize, usize)> {
    let outcome = py
        .detach(|| {
            cmd_run(
                &config,
                data_dir.as_deref(),
                parallelism,
                out.as_deref(),
                false,
                &mut std::io::sink(),
            )
        })
        .map_err(py_err)?;
    Ok((
        outcome.plan.hash.clone(),
        outcome.count(RunStatus::Ok),
        outcome.count(RunStatus::Diverged),
        outcome.count(RunStatus::Failed),
    ))
}

/// Report of a run directory or log as text.
#[pyfunction]
#[pyo3(signature = (log, group_by="eo"))]
pub fn report(log: PathBuf, group_by: &str) -> PyResult<String> {
    let mut buf = Vec::new();
    cmd_report(&log, group_by, &mut buf).map_err(py_err)?;
    Ok(String::from_utf8_lossy(&buf).into_owned())
}

/// `(scope, pairs, u, p, significant)`.
pub type SignificanceRow = (String, usize, f64, f64, bool);

/// Rows for "a beats b".
#[pyfunction]
#[pyo3(signature = (log, a, b, alpha=0.05))]
pub fn significance(log: PathBuf, a: &str, b: &str, alpha: f64) -> PyResult<Vec<SignificanceRow>> {
    let rows = cmd_significance(Path::new(&log), a, b, alpha, &mut std::io::sink()).map_err(py_err)?;
    Ok(rows
        .into_iter()
        .map(|r| (r.scope, r.pairs, r.test.u, r.test.p, r.significant))
        .collect())
}

#[pymodule]
fn combts_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(mu_hat, m)?)?;
    m.add_function(wrap_pyfunction!(sigma_hat, m)?)?;
    m.add_function(wrap_pyfunction!(l_best, m)?)?;
    m.add_function(wrap_pyfunction!(ci95, m)?)?;
    m.add_function(wrap_pyfunction!(student_t_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(mann_whitney, m)?)?;
    m.add_function(wrap_pyfunction!(dft, m)?)?;
    m.add_function(wrap_pyfunction!(idft, m)?)?;
    m.add_function(wrap_pyfunction!(decompose, m)?)?;
    m.add_function(wrap_pyfunction!(multiscale, m)?)?;
    m.add_function(wrap_pyfunction!(revin, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(significance, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
