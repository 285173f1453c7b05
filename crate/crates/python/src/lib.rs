//! Python bindings: manifests, synthesis, ingestion, baselines, the
//! counterfactual fusion primitives, fairness metrics and the experiment
//! harness.

use std::collections::BTreeMap;
use std::path::PathBuf;

use cfdebias::baselines::{self, LambdaSampler};
use cfdebias::corpus::{self, CorpusManifest, IngestOptions, SynthConfig, CELLS};
use cfdebias::counterfactual;
use cfdebias::datamodel::{DepressionLabel, GenderCode, LogitVector, PredictionRecord};
use cfdebias::dsp;
use cfdebias::fairness::{self, Averaging};
use cfdebias::harness::{self, Checkpoint, ExperimentConfig, ReportFormat};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_averaging(name: &str) -> PyResult<Averaging> {
    serde_json::from_value(serde_json::Value::String(name.to_string())).map_err(|_| err(format!("unknown averaging '{name}'")))
}

fn cell_key(g: GenderCode, l: DepressionLabel) -> String {
    format!(
        "{}_{}",
        if g == GenderCode::FEMALE { "female" } else { "male" },
        if l.is_depressed() { "depressed" } else { "non_depressed" }
    )
}

/// Session manifest of one split.
#[pyclass(name = "Manifest", module = "cfdebias_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyManifest {
    inner: CorpusManifest,
}

#[pymethods]
impl PyManifest {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyManifest { inner: CorpusManifest::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn split_name(&self) -> String {
        self.inner.split_name.clone()
    }

    #[getter]
    fn session_ids(&self) -> Vec<String> {
        self.inner.records.iter().map(|r| r.session_id.clone()).collect()
    }

    /// Session counts keyed `female_depressed`, `male_non_depressed`, ...
    fn distribution(&self) -> BTreeMap<String, usize> {
        CELLS.iter().map(|&(g, l)| (cell_key(g, l), self.inner.distribution.get(g, l))).collect()
    }

    fn content_hash(&self) -> PyResult<String> {
        self.inner.content_hash().map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Manifest(split_name={:?}, sessions={})", self.inner.split_name, self.inner.len())
    }
}

/// Performance and fairness metrics of one run.
#[pyclass(name = "Report", module = "cfdebias_py", get_all, skip_from_py_object)]
#[derive(Clone)]
pub struct PyReport {
    f1: f64,
    accuracy: f64,
    recall: f64,
    male_f1: f64,
    female_f1: f64,
    ea: f64,
    /// `None` when no male session is predicted depressed.
    di: Option<f64>,
}

impl From<fairness::FairnessReport> for PyReport {
    fn from(r: fairness::FairnessReport) -> Self {
        PyReport { f1: r.f1, accuracy: r.accuracy, recall: r.recall, male_f1: r.male_f1, female_f1: r.female_f1, ea: r.ea, di: r.di }
    }
}

#[pymethods]
impl PyReport {
    fn to_dict(&self) -> BTreeMap<&'static str, Option<f64>> {
        BTreeMap::from([
            ("f1", Some(self.f1)),
            ("accuracy", Some(self.accuracy)),
            ("recall", Some(self.recall)),
            ("male_f1", Some(self.male_f1)),
            ("female_f1", Some(self.female_f1)),
            ("ea", Some(self.ea)),
            ("di", self.di),
        ])
    }

    fn __repr__(&self) -> String {
        let di = self.di.map_or("NA".to_string(), |d| format!("{d:.3}"));
        format!("Report(f1={:.3}, accuracy={:.3}, ea={:.3}, di={di})", self.f1, self.accuracy, self.ea)
    }
}

/// Outcome of a trained and evaluated configuration.
#[pyclass(name = "RunResult", module = "cfdebias_py")]
pub struct PyRunResult {
    inner: harness::RunResult,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn report(&self) -> PyReport {
        self.inner.report.into()
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash.clone()
    }

    #[getter]
    fn backbone(&self) -> &'static str {
        self.inner.backbone.label()
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.inner.method.label()
    }

    #[getter]
    fn checkpoint(&self) -> Option<PathBuf> {
        self.inner.checkpoint.clone()
    }

    /// `(session_id, gender, true_label, predicted_label)` per test session.
    fn predictions(&self) -> Vec<(String, u8, u8, u8)> {
        self.inner
            .predictions
            .iter()
            .map(|p| (p.session_id.clone(), p.gender.value(), p.true_label.value(), p.predicted_label.value()))
            .collect()
    }
}

/// Experiment configuration, built from JSON.
#[pyclass(name = "ExperimentConfig", module = "cfdebias_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyExperimentConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyExperimentConfig {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: ExperimentConfig = serde_json::from_str(text).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(PyExperimentConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyExperimentConfig { inner: ExperimentConfig::load(&path).map_err(err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(err)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    /// Trains, evaluates and, with an output directory, persists the run.
    fn run(&self, py: Python<'_>) -> PyResult<PyRunResult> {
        let cfg = self.inner.clone();
        let inner = py.detach(move || harness::run_experiment(&cfg)).map_err(err)?;
        Ok(PyRunResult { inner })
    }

    /// Trains and writes the checkpoint into `out_dir`; returns its path.
    fn train(&self, py: Python<'_>, out_dir: PathBuf) -> PyResult<PathBuf> {
        let cfg = self.inner.clone();
        py.detach(move || {
            let ckpt = harness::train(&cfg)?;
            harness::save_checkpoint(&ckpt, &out_dir)
        })
        .map_err(err)
    }
}

/// Writes `train_combined.json` and `test.json` for a synthetic corpus.
/// `config_json` overrides fields of the default synthesis config.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json=None))]
fn synthesize(out_dir: PathBuf, config_json: Option<&str>) -> PyResult<(PyManifest, PyManifest)> {
    let cfg: SynthConfig = match config_json {
        Some(t) => serde_json::from_str(t).map_err(err)?,
        None => SynthConfig::default(),
    };
    let (train, test) = corpus::generate_synthetic(&cfg).map_err(err)?;
    std::fs::create_dir_all(&out_dir).map_err(err)?;
    for m in [&train, &test] {
        m.save(&out_dir.join(format!("{}.json", m.split_name))).map_err(err)?;
    }
    Ok((PyManifest { inner: train }, PyManifest { inner: test }))
}

/// Builds manifests from a DAIC-WOZ tree.
#[pyfunction]
#[pyo3(signature = (root, threshold=10, male_code=1, exclude=Vec::new()))]
fn ingest_daicwoz(root: PathBuf, threshold: u32, male_code: u8, exclude: Vec<String>) -> PyResult<(PyManifest, PyManifest)> {
    let (spec, scores) = corpus::load_daicwoz_splits(&root).map_err(err)?;
    let opts = IngestOptions { phq_threshold: threshold, male_code, exclude };
    let out = corpus::ingest_daicwoz(&root, &spec, &scores, &opts).map_err(err)?;
    Ok((PyManifest { inner: out.train_combined }, PyManifest { inner: out.test }))
}

/// Random per-cell down-sampling to the smallest cell.
#[pyfunction]
fn sub_sample(manifest: &PyManifest, seed: u64) -> PyResult<PyManifest> {
    Ok(PyManifest { inner: baselines::sub_sample(&manifest.inner, seed).map_err(err)? })
}

/// Per-cell feature mixing up to the largest cell, with λ ~ Beta(alpha, beta).
#[pyfunction]
#[pyo3(signature = (manifest, seed, alpha=1.0, beta=1.0))]
fn balance_by_augmentation(manifest: &PyManifest, seed: u64, alpha: f64, beta: f64) -> PyResult<PyManifest> {
    let sampler = LambdaSampler::Beta { alpha, beta };
    Ok(PyManifest { inner: baselines::balance_by_augmentation(&manifest.inner, seed, &sampler).map_err(err)? })
}

/// `log σ(D_g + D_F)` per class.
#[pyfunction]
fn fuse(d_g: (f64, f64), d_f: (f64, f64)) -> (f64, f64) {
    let f = counterfactual::fuse(&LogitVector::new(d_g.0, d_g.1), &LogitVector::new(d_f.0, d_f.1));
    (f[0], f[1])
}

/// Total indirect effect: factual minus counterfactual fused scores.
#[pyfunction]
fn tie(fused_factual: (f64, f64), fused_counterfactual: (f64, f64)) -> (f64, f64) {
    let t = counterfactual::tie(
        &LogitVector::new(fused_factual.0, fused_factual.1),
        &LogitVector::new(fused_counterfactual.0, fused_counterfactual.1),
    );
    (t[0], t[1])
}

/// Metrics over per-session `(gender, true, predicted)` codes, gender
/// 0 = male, 1 = female.
#[pyfunction]
#[pyo3(signature = (genders, true_labels, predicted_labels, averaging="macro"))]
fn fairness_report(genders: Vec<u8>, true_labels: Vec<u8>, predicted_labels: Vec<u8>, averaging: &str) -> PyResult<PyReport> {
    if genders.len() != true_labels.len() || genders.len() != predicted_labels.len() {
        return Err(err("genders, true_labels and predicted_labels must have equal length"));
    }
    let records = genders
        .iter()
        .zip(&true_labels)
        .zip(&predicted_labels)
        .enumerate()
        .map(|(i, ((&g, &t), &p))| {
            Ok(PredictionRecord {
                session_id: i.to_string(),
                gender: GenderCode::new(g).map_err(err)?,
                true_label: DepressionLabel::new(t).map_err(err)?,
                predicted_label: DepressionLabel::new(p).map_err(err)?,
                tie_scores: None,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let report = fairness::FairnessReport::from_records(&records, parse_averaging(averaging)?).map_err(err)?;
    Ok(report.into())
}

/// Evaluates a saved checkpoint on a test manifest.
#[pyfunction]
fn evaluate(py: Python<'_>, checkpoint: PathBuf, test: &PyManifest) -> PyResult<PyRunResult> {
    let manifest = test.inner.clone();
    let inner = py
        .detach(move || {
            let ckpt = Checkpoint::load(&checkpoint)?;
            harness::evaluate(&ckpt, &manifest)
        })
        .map_err(err)?;
    Ok(PyRunResult { inner })
}

/// Comparison table of every run stored under `run_dir`.
#[pyfunction]
#[pyo3(signature = (run_dir, format="text"))]
fn report(run_dir: PathBuf, format: &str) -> PyResult<String> {
    let format: ReportFormat = format.parse().map_err(err)?;
    let runs = harness::collect_runs(&run_dir).map_err(err)?;
    harness::emit_report(&runs, format).map_err(err)
}

/// Number of clips of `length` frames at `stride` in `frames` frames.
#[pyfunction]
fn clip_count(frames: usize, length: usize, stride: usize) -> usize {
    dsp::clip_count(frames, length, stride)
}

/// Magnitude STFT as a list of frequency rows.
#[pyfunction]
fn stft_spectrogram(audio: Vec<f64>, sample_rate: u32, n_fft: usize, hop: usize) -> PyResult<Vec<Vec<f64>>> {
    let s = dsp::stft_spectrogram(&audio, sample_rate, n_fft, hop).map_err(err)?;
    Ok(s.data.rows().into_iter().map(|r| r.to_vec()).collect())
}

#[pymodule]
fn cfdebias_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyManifest>()?;
    m.add_class::<PyReport>()?;
    m.add_class::<PyRunResult>()?;
    m.add_class::<PyExperimentConfig>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(ingest_daicwoz, m)?)?;
    m.add_function(wrap_pyfunction!(sub_sample, m)?)?;
    m.add_function(wrap_pyfunction!(balance_by_augmentation, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(tie, m)?)?;
    m.add_function(wrap_pyfunction!(fairness_report, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(clip_count, m)?)?;
    m.add_function(wrap_pyfunction!(stft_spectrogram, m)?)?;
    Ok(())
}
