//! Python bindings. Arrays cross the boundary as nested lists of floats.

use std::path::PathBuf;

use coala::audio::{conform, extract_patch, logmel as logmel_matrix, AudioClip};
use coala::cca::{cca_similarity as cca, CcaOptions};
use coala::checkpoint::Checkpoint;
use coala::objectives::{bce_value, contrastive_terms, kl_value, Denominator};
use coala::tensor::Tensor;
use coala::CoalaError;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: CoalaError) -> PyErr {
    match e {
        CoalaError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f32>]) -> PyResult<Tensor<f32>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Tensor::new(&[rows.len(), cols], rows.concat()).map_err(py_err)
}

fn clip(samples: Vec<f32>, sample_rate: u32) -> PyResult<AudioClip> {
    AudioClip::new(samples, sample_rate).map(|c| conform(&c)).map_err(py_err)
}

/// Canonical form of a raw tag, or None for stop words and empty tags.
#[pyfunction]
fn normalize_tag(raw: &str) -> Option<String> {
    coala::tags::normalize_tag(raw)
}

/// `(tag, clip count)` pairs in index order.
#[pyfunction]
#[pyo3(signature = (clips, size = 1000))]
fn build_vocabulary(clips: Vec<Vec<String>>, size: usize) -> PyResult<Vec<(String, usize)>> {
    let v = coala::tags::build_vocabulary(&clips, size).map_err(py_err)?;
    Ok(v.tags().iter().cloned().zip(v.doc_frequency().iter().copied()).collect())
}

/// Log-mel spectrogram of a clip after resampling and trimming/padding to 10 s,
/// as `frames x 96`.
#[pyfunction]
fn logmel(samples: Vec<f32>, sample_rate: u32) -> PyResult<Vec<Vec<f64>>> {
    let m = logmel_matrix(&clip(samples, sample_rate)?);
    Ok((0..m.rows).map(|r| m.row(r).to_vec()).collect())
}

/// Highest-energy 96-frame patch: `(frame offset, 9216 values in [0, 1])`.
#[pyfunction]
fn max_energy_patch(samples: Vec<f32>, sample_rate: u32) -> PyResult<(usize, Vec<f32>)> {
    let p = extract_patch(&logmel_matrix(&clip(samples, sample_rate)?), "").map_err(py_err)?;
    Ok((p.frame_offset, p.values))
}

/// Summed contrastive loss between paired projection rows.
#[pyfunction]
#[pyo3(signature = (audio, tags, temperature = 0.1, include_positive = false))]
fn contrastive_loss(audio: Vec<Vec<f32>>, tags: Vec<Vec<f32>>, temperature: f64, include_positive: bool) -> PyResult<f64> {
    let denom = if include_positive {
        Denominator::IncludePositive
    } else {
        Denominator::ExcludePositive
    };
    let rows = contrastive_terms(&matrix(&audio)?, &matrix(&tags)?, temperature, denom).map_err(py_err)?;
    Ok(rows.iter().sum())
}

#[pyfunction]
fn generalized_kl(target: Vec<f32>, reconstruction: Vec<f32>) -> PyResult<f64> {
    if target.len() != reconstruction.len() {
        return Err(PyValueError::new_err("length mismatch"));
    }
    kl_value(&target, &reconstruction).map_err(py_err)
}

#[pyfunction]
fn binary_cross_entropy(target: Vec<f32>, prediction: Vec<f32>) -> PyResult<f64> {
    if target.len() != prediction.len() {
        return Err(PyValueError::new_err("length mismatch"));
    }
    Ok(bce_value(&target, &prediction))
}

/// Mean canonical correlation between two views with the same rows.
#[pyfunction]
#[pyo3(signature = (x, y, energy = Some(0.99)))]
fn cca_similarity(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, energy: Option<f64>) -> PyResult<f64> {
    let opts = CcaOptions {
        energy,
        ..CcaOptions::default()
    };
    cca(&x, &y, &opts).map(|r| r.similarity).map_err(py_err)
}

/// Flattened encoder latents of `96 x 96` patches under a saved checkpoint.
#[pyfunction]
fn embed(checkpoint: PathBuf, patches: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
    let ck = Checkpoint::load(&checkpoint).map_err(py_err)?;
    let mut model = coala::train::load_model(&ck).map_err(py_err)?;
    let refs: Vec<&[f32]> = patches.iter().map(Vec::as_slice).collect();
    coala::train::embed_patches(&mut model, &refs).map_err(py_err)
}

/// Runs the command line with `args` (without the program name); returns
/// the exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    coala::cli::run(std::iter::once("coala".to_string()).chain(args))
}

#[pymodule]
fn pycoala(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(normalize_tag, m)?)?;
    m.add_function(wrap_pyfunction!(build_vocabulary, m)?)?;
    m.add_function(wrap_pyfunction!(logmel, m)?)?;
    m.add_function(wrap_pyfunction!(max_energy_patch, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(generalized_kl, m)?)?;
    m.add_function(wrap_pyfunction!(binary_cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(cca_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("EMBEDDING_DIM", coala::net::NetConfig::default().embedding_dim())?;
    Ok(())
}
