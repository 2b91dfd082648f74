//! Python bindings: DSP, statistics and the run pipeline. Structured results
//! cross the boundary as JSON strings.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use voxrel_core::dsp::{log_mel_spectrogram, DspConfig, Waveform};
use voxrel_core::model::Variant;
use voxrel_core::pipeline::{run_pipeline, synthesize, Preset, RunConfig, Stage};
use voxrel_core::stats::{self, ScoredCohort};
use voxrel_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::Shape(_) | Error::Config(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn config(toml: Option<&str>, preset: &str) -> PyResult<RunConfig> {
    let p = Preset::parse(preset).map_err(py_err)?;
    RunConfig::layered(p, toml.unwrap_or("")).map_err(py_err)
}

/// Effective configuration as TOML.
#[pyfunction]
#[pyo3(signature = (config_toml=None, preset="toy"))]
fn resolve_config(config_toml: Option<&str>, preset: &str) -> PyResult<String> {
    Ok(config(config_toml, preset)?.to_toml())
}

/// Hex SHA-256 that artifacts of this configuration carry.
#[pyfunction]
#[pyo3(signature = (config_toml=None, preset="toy"))]
fn config_hash(config_toml: Option<&str>, preset: &str) -> PyResult<String> {
    Ok(config(config_toml, preset)?.provenance().config_hash)
}

/// Log-mel spectrogram with the default front end; returns
/// `(n_mels, n_frames, values)` with values mel-major.
#[pyfunction]
fn log_mel(samples: Vec<f32>, sample_rate: u32) -> PyResult<(usize, usize, Vec<f32>)> {
    let w = Waveform::new(samples, sample_rate).map_err(py_err)?;
    let spec = log_mel_spectrogram(&w, &DspConfig::default()).map_err(py_err)?;
    Ok((spec.n_mels, spec.n_frames, spec.values))
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    let c = ScoredCohort::new(scores, labels).map_err(py_err)?;
    stats::auc(&c).map_err(py_err)
}

/// `(auc_a, auc_b, z, p_value)` for two correlated ROC curves.
#[pyfunction]
fn delong(scores_a: Vec<f64>, scores_b: Vec<f64>, labels: Vec<u8>) -> PyResult<(f64, f64, f64, f64)> {
    let r = stats::delong_test(&scores_a, &scores_b, &labels).map_err(py_err)?;
    Ok((r.auc_a, r.auc_b, r.z, r.p_value))
}

/// `(u, p_value)`; exact for small samples, normal approximation otherwise.
#[pyfunction]
fn mann_whitney(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64)> {
    let r = stats::mann_whitney_u(&x, &y).map_err(py_err)?;
    Ok((r.u, r.p_value))
}

/// Writes a synthetic corpus to `out_dir`; returns the number of speakers.
#[pyfunction]
#[pyo3(signature = (out_dir, config_toml=None, preset="toy", seed=None))]
fn synth(py: Python<'_>, out_dir: PathBuf, config_toml: Option<&str>, preset: &str, seed: Option<u64>) -> PyResult<usize> {
    let mut cfg = config(config_toml, preset)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    py.detach(|| {
        let corpus = synthesize(&cfg)?;
        corpus.write(&out_dir)?;
        Ok(corpus.speeches.len())
    })
    .map_err(py_err)
}

/// Runs the pipeline into `out_dir`. A full run returns the summary JSON; a
/// single `stage` returns None.
#[pyfunction]
#[pyo3(signature = (out_dir, config_toml=None, preset="toy", seed=None, stage=None, variant=None))]
fn pipeline(
    py: Python<'_>,
    out_dir: PathBuf,
    config_toml: Option<&str>,
    preset: &str,
    seed: Option<u64>,
    stage: Option<&str>,
    variant: Option<&str>,
) -> PyResult<Option<String>> {
    let mut cfg = config(config_toml, preset)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let stage = stage.map(Stage::parse).transpose().map_err(py_err)?;
    let variant = variant.map(Variant::parse).transpose().map_err(py_err)?;
    let summary = py
        .detach(|| run_pipeline(&cfg, &out_dir, stage, variant))
        .map_err(py_err)?;
    summary
        .map(|s| serde_json::to_string(&s).map_err(|e| PyRuntimeError::new_err(e.to_string())))
        .transpose()
}

#[pymodule]
fn voxrel(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(log_mel, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(delong, m)?)?;
    m.add_function(wrap_pyfunction!(mann_whitney, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(pipeline, m)?)?;
    Ok(())
}
