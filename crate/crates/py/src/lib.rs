//! Python bindings: framing, alignment, batch scoring, the contrastive loss,
//! recall@k, embedding stores, gradient checks and toy training.
//!
//! Matrices cross the boundary as lists of rows; numpy arrays are accepted
//! anywhere a nested sequence of floats is.

use std::collections::BTreeMap;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tempalign_core::contrastive::{grad_check as core_grad_check, GradCheckReport, GradCheckSizes};
use tempalign_core::framing::DEFAULT_REF_WINDOW;
use tempalign_core::retrieval::{Recalls, RetrievalReport, DEFAULT_KS};
use tempalign_core::store;
use tempalign_core::toy::{
    pipeline_grad_check, save_checkpoint, synth_dataset, PipelineCheckSizes, SynthConfig,
    TrainConfig, TrainData, Trainer,
};
use tempalign_core::{
    recall_at_k as core_recall_at_k, unfold, EmbeddingRecord, Error, FrameTensor, KernelParams,
    Matrix, Modality, ScoreMatrix,
};

create_exception!(
    tempalign,
    TempalignError,
    PyException,
    "Invalid data or a failed computation."
);
create_exception!(
    tempalign,
    DivergenceError,
    TempalignError,
    "Training produced non-finite values."
);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::InvalidK(_) => PyValueError::new_err(e.to_string()),
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        Error::Divergence { .. } => DivergenceError::new_err(e.to_string()),
        e => TempalignError::new_err(e.to_string()),
    }
}

/// Fusion weights, similarity mode and temperature.
#[pyclass(
    module = "tempalign",
    name = "FusionConfig",
    get_all,
    set_all,
    skip_from_py_object
)]
#[derive(Debug, Clone, Copy)]
struct PyFusion {
    gamma_kernel: f64,
    gamma_temporal: f64,
    normalize: bool,
    temperature: f64,
}

#[pymethods]
impl PyFusion {
    #[new]
    #[pyo3(signature = (gamma_kernel=0.5, gamma_temporal=0.5, normalize=true, temperature=1.0))]
    fn new(
        gamma_kernel: f64,
        gamma_temporal: f64,
        normalize: bool,
        temperature: f64,
    ) -> PyResult<Self> {
        let f = Self {
            gamma_kernel,
            gamma_temporal,
            normalize,
            temperature,
        };
        f.core().validate().map_err(py_err)?;
        Ok(f)
    }

    fn __repr__(&self) -> String {
        format!(
            "FusionConfig(gamma_kernel={}, gamma_temporal={}, normalize={}, temperature={})",
            self.gamma_kernel,
            self.gamma_temporal,
            if self.normalize { "True" } else { "False" },
            self.temperature
        )
    }
}

impl PyFusion {
    fn core(&self) -> tempalign_core::FusionConfig {
        tempalign_core::FusionConfig {
            gamma_kernel: self.gamma_kernel,
            gamma_temporal: self.gamma_temporal,
            normalize: self.normalize,
            temperature: self.temperature,
        }
    }
}

fn fusion_of(config: Option<PyRef<'_, PyFusion>>) -> tempalign_core::FusionConfig {
    config.map_or_else(tempalign_core::FusionConfig::default, |c| c.core())
}

/// Kernel size, stride and frame count for one sequence length.
#[pyclass(
    module = "tempalign",
    name = "KernelParams",
    get_all,
    frozen,
    skip_from_py_object
)]
#[derive(Debug, Clone, Copy)]
struct PyKernelParams {
    steps: usize,
    kernel: usize,
    stride: usize,
    frames: usize,
}

#[pymethods]
impl PyKernelParams {
    fn __repr__(&self) -> String {
        format!(
            "KernelParams(steps={}, kernel={}, stride={}, frames={})",
            self.steps, self.kernel, self.stride, self.frames
        )
    }
}

impl From<KernelParams> for PyKernelParams {
    fn from(p: KernelParams) -> Self {
        Self {
            steps: p.steps,
            kernel: p.kernel,
            stride: p.stride,
            frames: p.frames,
        }
    }
}

/// Frame geometry for a sequence of `steps` timesteps.
#[pyfunction]
#[pyo3(signature = (steps, eta_kernel=6.0, eta_stride=3.0, ref_window=DEFAULT_REF_WINDOW))]
fn kernel_params(
    steps: usize,
    eta_kernel: f64,
    eta_stride: f64,
    ref_window: f64,
) -> PyResult<PyKernelParams> {
    KernelParams::with_ref_window(steps, eta_kernel, eta_stride, ref_window)
        .map(Into::into)
        .map_err(py_err)
}

/// Similarity grid, both attention maps and the pooled scores of one pair.
#[pyclass(module = "tempalign", name = "Alignment", get_all, frozen)]
struct PyAlignment {
    params: PyKernelParams,
    similarity: Vec<Vec<f64>>,
    kernel_attention: Vec<Vec<f64>>,
    temporal_attention: Vec<Vec<f64>>,
    kernel_score: f64,
    temporal_score: f64,
    score: f64,
}

#[pymethods]
impl PyAlignment {
    fn __repr__(&self) -> String {
        format!(
            "Alignment(kernel_score={}, temporal_score={}, score={})",
            self.kernel_score, self.temporal_score, self.score
        )
    }
}

fn flatten(sequence: &[Vec<f64>]) -> PyResult<(Vec<f64>, usize)> {
    let dim = sequence.first().map_or(0, Vec::len);
    if dim == 0 {
        return Err(TempalignError::new_err(
            "sequence must be a non-empty list of non-empty rows",
        ));
    }
    if let Some(row) = sequence.iter().find(|r| r.len() != dim) {
        return Err(py_err(Error::DimensionMismatch {
            expected: dim,
            found: row.len(),
        }));
    }
    Ok((sequence.concat(), dim))
}

fn frames_of(
    sequence: &[Vec<f64>],
    eta_kernel: f64,
    eta_stride: f64,
    ref_window: f64,
) -> PyResult<(FrameTensor, KernelParams)> {
    let (flat, dim) = flatten(sequence)?;
    let params = KernelParams::with_ref_window(sequence.len(), eta_kernel, eta_stride, ref_window)
        .map_err(py_err)?;
    Ok((unfold(&flat, dim, &params).map_err(py_err)?, params))
}

/// Frame a `T x D` sequence and score it against one text vector.
#[pyfunction]
#[pyo3(signature = (sequence, text, eta_kernel=6.0, eta_stride=3.0, ref_window=DEFAULT_REF_WINDOW, config=None))]
fn align(
    sequence: Vec<Vec<f64>>,
    text: Vec<f64>,
    eta_kernel: f64,
    eta_stride: f64,
    ref_window: f64,
    config: Option<PyRef<'_, PyFusion>>,
) -> PyResult<PyAlignment> {
    let (frames, params) = frames_of(&sequence, eta_kernel, eta_stride, ref_window)?;
    let res = tempalign_core::align(&frames, &text, &fusion_of(config)).map_err(py_err)?;
    Ok(PyAlignment {
        params: params.into(),
        similarity: res.similarity.to_rows(),
        kernel_attention: res.kernel_attention.to_rows(),
        temporal_attention: res.temporal_attention.to_rows(),
        kernel_score: res.kernel_score,
        temporal_score: res.temporal_score,
        score: res.score,
    })
}

/// Fused score of every sequence against every text; rows are sequences.
#[pyfunction]
#[pyo3(signature = (sequences, texts, eta_kernel=6.0, eta_stride=3.0, ref_window=DEFAULT_REF_WINDOW, config=None, workers=1))]
#[allow(clippy::too_many_arguments)]
fn batch_scores(
    py: Python<'_>,
    sequences: Vec<Vec<Vec<f64>>>,
    texts: Vec<Vec<f64>>,
    eta_kernel: f64,
    eta_stride: f64,
    ref_window: f64,
    config: Option<PyRef<'_, PyFusion>>,
    workers: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let frames = sequences
        .iter()
        .map(|s| frames_of(s, eta_kernel, eta_stride, ref_window).map(|(f, _)| f))
        .collect::<PyResult<Vec<_>>>()?;
    let cfg = fusion_of(config);
    py.detach(|| tempalign_core::batch_scores(&frames, &texts, &cfg, workers))
        .map(|s| s.matrix().to_rows())
        .map_err(py_err)
}

fn score_matrix(scores: &[Vec<f64>]) -> PyResult<ScoreMatrix> {
    let n = scores.len();
    if let Some(row) = scores.iter().find(|r| r.len() != n) {
        return Err(py_err(Error::DimensionMismatch {
            expected: n,
            found: row.len(),
        }));
    }
    ScoreMatrix::new(Matrix::from_rows(scores)).map_err(py_err)
}

/// Contrastive loss of a square score matrix whose diagonal holds the matched pairs.
#[pyfunction]
#[pyo3(signature = (scores, symmetric=false))]
fn nce_loss(scores: Vec<Vec<f64>>, symmetric: bool) -> PyResult<f64> {
    tempalign_core::nce_loss(&score_matrix(&scores)?, symmetric).map_err(py_err)
}

fn recalls_dict<'py>(py: Python<'py>, recalls: &Recalls) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for &(k, r) in &recalls.0 {
        d.set_item(k, r)?;
    }
    Ok(d)
}

fn report_dict<'py>(py: Python<'py>, report: &RetrievalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("n", report.n)?;
    d.set_item("recalls", recalls_dict(py, &report.recalls)?)?;
    d.set_item("ties_broken", report.ties_broken)?;
    Ok(d)
}

/// Recall@k in both directions: `{"t2a": {...}, "a2t": {...}}`.
#[pyfunction]
#[pyo3(signature = (scores, ks=DEFAULT_KS.to_vec()))]
fn recall_at_k<'py>(
    py: Python<'py>,
    scores: Vec<Vec<f64>>,
    ks: Vec<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let (t2a, a2t) = core_recall_at_k(&score_matrix(&scores)?, &ks).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("t2a", report_dict(py, &t2a)?)?;
    d.set_item("a2t", report_dict(py, &a2t)?)?;
    Ok(d)
}

/// One stored embedding: a `steps x dim` sequence, one row for text.
#[pyclass(module = "tempalign", name = "Record", frozen)]
struct PyRecord(EmbeddingRecord);

#[pymethods]
impl PyRecord {
    #[new]
    #[pyo3(signature = (id, rows, modality="audio"))]
    fn new(id: String, rows: Vec<Vec<f64>>, modality: &str) -> PyResult<Self> {
        let modality = match modality {
            "audio" => Modality::Audio,
            "text" => Modality::Text,
            other => {
                return Err(PyValueError::new_err(format!(
                    "modality must be 'audio' or 'text', got '{other}'"
                )))
            }
        };
        let (flat, dim) = flatten(&rows)?;
        EmbeddingRecord::new(id, modality, rows.len(), dim, flat)
            .map(Self)
            .map_err(py_err)
    }

    #[getter]
    fn id(&self) -> &str {
        self.0.id()
    }

    #[getter]
    fn modality(&self) -> &'static str {
        self.0.modality().name()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.steps()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn rows(&self) -> Vec<Vec<f64>> {
        self.0
            .data()
            .chunks(self.0.dim())
            .map(<[f64]>::to_vec)
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Record(id={:?}, modality='{}', steps={}, dim={})",
            self.0.id(),
            self.0.modality().name(),
            self.0.steps(),
            self.0.dim()
        )
    }
}

/// Write records to a store file; values are stored as float32. Returns bytes written.
#[pyfunction]
fn write_store(path: std::path::PathBuf, records: Vec<PyRef<'_, PyRecord>>) -> PyResult<usize> {
    let records: Vec<EmbeddingRecord> = records.iter().map(|r| r.0.clone()).collect();
    store::write_store(&records, path).map_err(py_err)
}

/// All records of a store file, in file order.
#[pyfunction]
fn read_store(path: std::path::PathBuf) -> PyResult<Vec<PyRecord>> {
    let s = store::read_store(path).map_err(py_err)?;
    Ok(s.records().iter().cloned().map(PyRecord).collect())
}

fn grad_report_dict<'py>(
    py: Python<'py>,
    report: &GradCheckReport,
) -> PyResult<Bound<'py, PyDict>> {
    let groups: BTreeMap<&str, f64> = report
        .groups
        .iter()
        .map(|g| (g.group.as_str(), g.max_relative_error))
        .collect();
    let d = PyDict::new(py);
    d.set_item("seed", report.seed)?;
    d.set_item("passed", report.passed)?;
    d.set_item("max_error", report.max_error())?;
    d.set_item("groups", groups)?;
    Ok(d)
}

/// Central-difference check of the analytic gradients on a seeded random batch.
///
/// With `pipeline`, the check runs through the adapter and projection as well.
#[pyfunction]
#[pyo3(signature = (seed=0, epsilon=1e-5, tolerance=1e-6, pipeline=false, symmetric=false, config=None))]
fn grad_check<'py>(
    py: Python<'py>,
    seed: u64,
    epsilon: f64,
    tolerance: f64,
    pipeline: bool,
    symmetric: bool,
    config: Option<PyRef<'py, PyFusion>>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = fusion_of(config);
    let report = py
        .detach(|| {
            if pipeline {
                pipeline_grad_check(
                    seed,
                    &PipelineCheckSizes::default(),
                    cfg,
                    symmetric,
                    epsilon,
                    tolerance,
                )
            } else if symmetric {
                Err(Error::Config(
                    "symmetric is only supported with pipeline=True".into(),
                ))
            } else {
                core_grad_check(seed, &GradCheckSizes::default(), cfg, epsilon, tolerance)
            }
        })
        .map_err(py_err)?;
    grad_report_dict(py, &report)
}

/// Train the linear toy model on synthetic data.
///
/// Returns `{"step_losses", "t2a", "a2t", "report"}` where `report` is the
/// JSONL training log; `checkpoint` also saves the final model.
#[pyfunction]
#[pyo3(signature = (seed=0, dim=16, epochs=None, max_steps=None, lr=None, batch_size=None, workers=1, checkpoint=None))]
#[allow(clippy::too_many_arguments)]
fn train_toy<'py>(
    py: Python<'py>,
    seed: u64,
    dim: usize,
    epochs: Option<usize>,
    max_steps: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    workers: usize,
    checkpoint: Option<std::path::PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let synth = SynthConfig {
        dim,
        seed,
        ..SynthConfig::default()
    };
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        seed,
        epochs: epochs.unwrap_or(defaults.epochs),
        max_steps,
        lr: lr.unwrap_or(defaults.lr),
        batch_size: batch_size.unwrap_or(defaults.batch_size),
        workers,
        ..defaults
    };
    let (report, model) = py
        .detach(|| -> tempalign_core::Result<_> {
            let data = TrainData::from_synth(synth_dataset(&synth)?, &synth);
            let mut trainer = Trainer::new(cfg, data, dim)?;
            let report = trainer.run()?;
            Ok((report, trainer.into_model()))
        })
        .map_err(py_err)?;
    if let Some(path) = checkpoint {
        save_checkpoint(&model, path).map_err(py_err)?;
    }
    let last = report.last();
    let d = PyDict::new(py);
    d.set_item("step_losses", &report.step_losses)?;
    d.set_item("t2a", recalls_dict(py, &last.recalls.t2a)?)?;
    d.set_item("a2t", recalls_dict(py, &last.recalls.a2t)?)?;
    d.set_item("report", report.to_jsonl())?;
    Ok(d)
}

#[pymodule]
fn tempalign(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TempalignError", m.py().get_type::<TempalignError>())?;
    m.add("DivergenceError", m.py().get_type::<DivergenceError>())?;
    m.add_class::<PyFusion>()?;
    m.add_class::<PyKernelParams>()?;
    m.add_class::<PyAlignment>()?;
    m.add_class::<PyRecord>()?;
    m.add_function(wrap_pyfunction!(kernel_params, m)?)?;
    m.add_function(wrap_pyfunction!(align, m)?)?;
    m.add_function(wrap_pyfunction!(batch_scores, m)?)?;
    m.add_function(wrap_pyfunction!(nce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(read_store, m)?)?;
    m.add_function(wrap_pyfunction!(write_store, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    Ok(())
}
