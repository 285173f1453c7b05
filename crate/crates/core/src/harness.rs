//! Experiment orchestration: configuration, training, evaluation,
//! checkpoints and report rendering.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Tensor, Var};
use crate::backbones::{self, NetvladConfig, StaConfig};
use crate::baselines::{self, LambdaSampler};
use crate::corpus::{CorpusManifest, Distribution};
use crate::counterfactual::{self, ClassWeights, CounterfactualParam, EpsilonMode};
use crate::datamodel::{self, DepressionLabel, GenderCode, LogitVector, PredictionRecord, SessionRecord};
use crate::dsp::{self, MelConfig, NormStats, StftConfig};
use crate::error::{Error, Result};
use crate::fairness::{Averaging, FairnessReport, REPORT_COLUMNS};
use crate::nn::{self, Adam, AdamConfig, Bound, MlpConfig, ModelState};

pub const EPSILON_PARAM: &str = "epsilon";
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Sta,
    Netvlad,
    Tabular,
}

impl BackboneKind {
    pub fn label(self) -> &'static str {
        match self {
            BackboneKind::Sta => "STA",
            BackboneKind::Netvlad => "NetVLAD",
            BackboneKind::Tabular => "Tabular",
        }
    }

    pub fn is_audio(self) -> bool {
        self != BackboneKind::Tabular
    }
}

/// Debiasing condition. Declaration order is the report row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    None,
    Subsample,
    Mixfeat,
    Counterfactual,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::None, Method::Subsample, Method::Mixfeat, Method::Counterfactual];

    pub fn label(self) -> &'static str {
        match self {
            Method::None => "None",
            Method::Subsample => "Sub-sampling",
            Method::Mixfeat => "Data Augmentation",
            Method::Counterfactual => "Counterfactual Inference",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusPaths {
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub name: String,
    /// Defaults to 1e-3 for the tabular backbone and 1e-4 for audio ones.
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            name: "adam".into(),
            learning_rate: None,
            batch_size: 16,
            epochs: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricOptions {
    pub averaging: Averaging,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOptions {
    pub head_hidden: Vec<usize>,
    pub sta: StaConfig,
    pub netvlad: NetvladConfig,
    pub stft: StftConfig,
    pub mel: MelConfig,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            head_hidden: vec![32],
            sta: StaConfig::default(),
            netvlad: NetvladConfig::default(),
            stft: StftConfig::default(),
            mel: MelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub backbone: BackboneKind,
    pub method: Method,
    pub corpus: CorpusPaths,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub metrics: MetricOptions,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub epsilon_mode: EpsilonMode,
    #[serde(default)]
    pub class_weighting: bool,
    #[serde(default)]
    pub mixfeat: LambdaSampler,
    #[serde(default)]
    pub model: ModelOptions,
    /// Write a per-sample branch log next to the predictions.
    #[serde(default)]
    pub debug_log: bool,
}

impl ExperimentConfig {
    pub fn new(backbone: BackboneKind, method: Method, train: impl Into<PathBuf>, test: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            backbone,
            method,
            corpus: CorpusPaths {
                train: train.into(),
                test: test.into(),
            },
            optimizer: OptimizerConfig::default(),
            seed: 0,
            metrics: MetricOptions::default(),
            output_dir: None,
            epsilon_mode: EpsilonMode::default(),
            class_weighting: false,
            mixfeat: LambdaSampler::default(),
            model: ModelOptions::default(),
            debug_log: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if o.epochs < 1 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if o.batch_size < 1 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !o.name.eq_ignore_ascii_case("adam") {
            return Err(Error::config(format!("unsupported optimizer {}", o.name)));
        }
        let lr = self.learning_rate();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.model.head_hidden.contains(&0) {
            return Err(Error::config("head hidden sizes must be positive"));
        }
        if self.method == Method::Mixfeat {
            self.mixfeat.validate()?;
        }
        match self.backbone {
            BackboneKind::Sta => {
                self.model.sta.validate()?;
                if self.model.sta.freq_bins != self.model.stft.n_fft / 2 + 1
                    || self.model.sta.clip_frames != self.model.stft.clip_length
                {
                    return Err(Error::config("STA clip shape must match the STFT settings"));
                }
            }
            BackboneKind::Netvlad => {
                self.model.netvlad.validate()?;
                if self.model.netvlad.input_dim != self.model.mel.n_mels {
                    return Err(Error::config("NetVLAD input_dim must equal n_mels"));
                }
            }
            BackboneKind::Tabular => {}
        }
        Ok(())
    }

    pub fn learning_rate(&self) -> f64 {
        self.optimizer.learning_rate.unwrap_or(if self.backbone.is_audio() { 1e-4 } else { 1e-3 })
    }

    /// SHA-256 of the configuration with the output directory cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Records every file the harness opens.
#[derive(Debug, Default)]
pub struct AccessLog {
    paths: Mutex<Vec<PathBuf>>,
}

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, path: &Path) {
        self.paths.lock().expect("access log").push(path.to_path_buf());
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.paths.lock().expect("access log").clone()
    }

    pub fn touched(&self, path: &Path) -> bool {
        self.paths.lock().expect("access log").iter().any(|p| p == path)
    }
}

pub fn load_manifest(path: &Path, log: &AccessLog) -> Result<CorpusManifest> {
    log.record(path);
    CorpusManifest::load(path)
}

// ---------------------------------------------------------------------------
// Backbone factory

/// Per-session model input after preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub enum SessionInput {
    /// Precomputed ALF (tabular backbone).
    Pooled(Array1<f64>),
    /// Normalized STA spectrogram clips.
    Clips(Vec<Array2<f64>>),
    /// Log-Mel clips, one per participant turn.
    Segments(Vec<Array2<f64>>),
    /// MixFeat record: the ALFs of two other inputs mixed with `lambda`.
    Mixed { a: usize, b: usize, lambda: f64 },
}

/// Architecture of the acoustic branch and fusion head. Every method builds
/// its model from this one factory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub alf_dim: usize,
    pub head: MlpConfig,
    pub sta: StaConfig,
    pub netvlad: NetvladConfig,
}

impl BackboneSpec {
    /// `tabular_dim` is the feature width of a tabular corpus.
    pub fn new(cfg: &ExperimentConfig, tabular_dim: Option<usize>) -> Result<Self> {
        let alf_dim = match cfg.backbone {
            BackboneKind::Sta => backbones::STA_ALF_DIM,
            BackboneKind::Netvlad => cfg.model.netvlad.gru_hidden,
            BackboneKind::Tabular => tabular_dim.ok_or_else(|| Error::config("tabular backbone needs a feature dimension"))?,
        };
        let head = MlpConfig::new(alf_dim + 1, cfg.model.head_hidden.clone());
        head.validate()?;
        Ok(BackboneSpec {
            kind: cfg.backbone,
            alf_dim,
            head,
            sta: cfg.model.sta.clone(),
            netvlad: cfg.model.netvlad.clone(),
        })
    }

    /// Acoustic branch and head parameters.
    pub fn init(&self, seed: u64) -> ModelState {
        let mut state = ModelState::new(seed);
        let mut rng = nn::seeded_rng(seed, 0);
        match self.kind {
            BackboneKind::Sta => backbones::init_sta(&mut state, &mut rng, &self.sta),
            BackboneKind::Netvlad => backbones::init_netvlad(&mut state, &mut rng, &self.netvlad),
            BackboneKind::Tabular => {}
        }
        nn::init_mlp(&mut state, &mut rng, "head", &self.head);
        state
    }

    /// ALF of input `i` as a `1 × alf_dim` node.
    pub fn alf_graph(&self, g: &mut Graph, bound: &Bound, inputs: &[SessionInput], i: usize) -> Result<Var> {
        let out = match &inputs[i] {
            SessionInput::Pooled(v) => g.constant(v.clone().insert_axis(ndarray::Axis(0))),
            SessionInput::Clips(clips) => {
                if clips.is_empty() {
                    return Err(Error::invalid("session has no spectrogram clips"));
                }
                let rows = clips
                    .iter()
                    .map(|c| backbones::sta_forward_graph(g, bound, &self.sta, c))
                    .collect::<Result<Vec<_>>>()?;
                let seq = g.concat_rows(&rows);
                backbones::eep_graph(g, seq)?
            }
            SessionInput::Segments(segs) => {
                if segs.is_empty() {
                    return Err(Error::invalid("session has no participant segments"));
                }
                let rows = segs
                    .iter()
                    .map(|m| backbones::netvlad_clip_graph(g, bound, &self.netvlad, m))
                    .collect::<Result<Vec<_>>>()?;
                let seq = g.concat_rows(&rows);
                nn::gru(g, bound, "vlad.gru", seq)?
            }
            SessionInput::Mixed { a, b, lambda } => {
                if matches!(inputs[*a], SessionInput::Mixed { .. }) || matches!(inputs[*b], SessionInput::Mixed { .. }) {
                    return Err(Error::invalid("mixed input with mixed parents"));
                }
                let va = self.alf_graph(g, bound, inputs, *a)?;
                let vb = self.alf_graph(g, bound, inputs, *b)?;
                let sa = g.scale(va, *lambda);
                let sb = g.scale(vb, 1.0 - *lambda);
                g.add(sa, sb)
            }
        };
        if g.shape(out) != (1, self.alf_dim) {
            return Err(Error::shape(format!("1×{} ALF", self.alf_dim), format!("{:?}", g.shape(out))));
        }
        Ok(out)
    }
}

/// Full model parameters for a method: acoustic branch and head, plus the
/// gender branch and ε for the counterfactual method.
pub fn init_model(spec: &BackboneSpec, method: Method, mode: EpsilonMode, seed: u64) -> ModelState {
    let mut state = spec.init(seed);
    if method == Method::Counterfactual {
        for (name, value) in backbones::init_gender_branch(seed).iter() {
            state.insert(name, value.clone());
        }
        let eps = CounterfactualParam::init(CounterfactualParam::expected_len(mode, &spec.head), seed);
        state.insert(EPSILON_PARAM, eps.as_row());
    }
    state
}

/// ε stored in a model state.
pub fn epsilon_of(state: &ModelState) -> Result<CounterfactualParam> {
    Ok(CounterfactualParam {
        epsilon: state.get(EPSILON_PARAM)?.iter().copied().collect(),
    })
}

// ---------------------------------------------------------------------------
// Data preparation

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSplit {
    pub ids: Vec<String>,
    pub genders: Vec<GenderCode>,
    pub labels: Vec<DepressionLabel>,
    pub inputs: Vec<SessionInput>,
}

impl PreparedSplit {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn session_error(r: &SessionRecord, message: impl Into<String>) -> Error {
    Error::Session {
        session_id: r.session_id.clone(),
        message: message.into(),
    }
}

/// Feature width shared by every record of a tabular manifest.
pub fn tabular_dim(manifest: &CorpusManifest) -> Result<Option<usize>> {
    let mut dim = None;
    for r in &manifest.records {
        let f = r
            .features
            .as_ref()
            .ok_or_else(|| session_error(r, "tabular backbone needs feature sequences"))?;
        match dim {
            None => dim = Some(f.dim()),
            Some(d) if d != f.dim() => return Err(Error::shape(format!("feature dim {d}"), f.dim())),
            _ => {}
        }
    }
    Ok(dim)
}

/// Turns manifest records into model inputs. STA statistics are fitted
/// here when `stats` is `None`, which is only done for training data.
pub fn prepare_split(
    manifest: &CorpusManifest,
    cfg: &ExperimentConfig,
    stats: Option<&NormStats>,
    log: &AccessLog,
) -> Result<(PreparedSplit, Option<NormStats>)> {
    let records = &manifest.records;
    let mut index_of: HashMap<&str, usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        index_of.insert(&r.session_id, i);
    }
    let mut inputs: Vec<Option<SessionInput>> = vec![None; records.len()];
    let mut spectrograms: Vec<(usize, dsp::Spectrogram)> = Vec::new();

    for (i, r) in records.iter().enumerate() {
        if r.augmented && r.features.is_none() {
            continue;
        }
        match cfg.backbone {
            BackboneKind::Tabular => {
                let f = r
                    .features
                    .as_ref()
                    .ok_or_else(|| session_error(r, "tabular backbone needs feature sequences"))?;
                inputs[i] = Some(SessionInput::Pooled(f.mean_pool()));
            }
            BackboneKind::Sta | BackboneKind::Netvlad => {
                let audio = r
                    .audio_path
                    .as_ref()
                    .ok_or_else(|| session_error(r, "audio backbone needs audio_path"))?;
                log.record(audio);
                let (samples, rate) = dsp::read_wav(audio)?;
                if cfg.backbone == BackboneKind::Sta {
                    spectrograms.push((i, dsp::sta_spectrogram(&samples, rate, &cfg.model.stft)?));
                } else {
                    let tpath = r
                        .transcript_path
                        .as_ref()
                        .ok_or_else(|| session_error(r, "NetVLAD backbone needs transcript_path"))?;
                    log.record(tpath);
                    let rows = dsp::read_transcript(tpath)?;
                    let segs = dsp::netvlad_segments(&samples, rate, &rows, &cfg.model.mel)?;
                    if segs.is_empty() {
                        return Err(session_error(r, "no participant speech in transcript"));
                    }
                    inputs[i] = Some(SessionInput::Segments(segs));
                }
            }
        }
    }

    let mut fitted = None;
    if cfg.backbone == BackboneKind::Sta {
        let stats = match stats {
            Some(s) => s.clone(),
            None => {
                let s = NormStats::fit(spectrograms.iter().map(|(_, s)| &s.data))?;
                fitted = Some(s.clone());
                s
            }
        };
        for (i, spec) in &spectrograms {
            inputs[*i] = Some(SessionInput::Clips(dsp::sta_clips(spec, &stats, &cfg.model.stft)?));
        }
    }

    for (i, r) in records.iter().enumerate() {
        if inputs[i].is_some() {
            continue;
        }
        let (pa, pb) = r
            .parents
            .as_ref()
            .ok_or_else(|| session_error(r, "augmented record without parents"))?;
        let lookup = |id: &str| {
            index_of
                .get(id)
                .copied()
                .filter(|&k| !records[k].augmented)
                .ok_or_else(|| session_error(r, format!("parent {id} not found")))
        };
        inputs[i] = Some(SessionInput::Mixed {
            a: lookup(pa)?,
            b: lookup(pb)?,
            lambda: r.lambda.ok_or_else(|| session_error(r, "augmented record without lambda"))?,
        });
    }

    Ok((
        PreparedSplit {
            ids: records.iter().map(|r| r.session_id.clone()).collect(),
            genders: records.iter().map(|r| r.gender).collect(),
            labels: records.iter().map(|r| r.label).collect(),
            inputs: inputs.into_iter().map(|x| x.expect("every input assigned")).collect(),
        },
        fitted,
    ))
}

/// Applies the method's training-data transformation.
pub fn transform_training(manifest: &CorpusManifest, cfg: &ExperimentConfig) -> Result<CorpusManifest> {
    match cfg.method {
        Method::None | Method::Counterfactual => Ok(manifest.clone()),
        Method::Subsample => baselines::sub_sample(manifest, cfg.seed),
        Method::Mixfeat => baselines::balance_by_augmentation(manifest, cfg.seed, &cfg.mixfeat),
    }
}

/// Inverse-frequency class weights `n / (2 n_c)`.
pub fn class_weights(labels: &[DepressionLabel]) -> Result<ClassWeights> {
    let mut counts = [0usize; 2];
    for l in labels {
        counts[l.index()] += 1;
    }
    if counts.contains(&0) {
        return Err(Error::invalid("class weighting needs both classes in training data"));
    }
    let n = labels.len() as f64;
    Ok([n / (2.0 * counts[0] as f64), n / (2.0 * counts[1] as f64)])
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Sidecar metadata of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub corpus_hash: String,
    /// Epoch (1-based) whose weights were kept.
    pub epoch: usize,
    pub epochs_run: usize,
    pub train_loss: f64,
    pub loss_history: Vec<f64>,
    pub spec: BackboneSpec,
    pub train_distribution: Distribution,
    pub train_size: usize,
    pub norm_stats: Option<NormStats>,
    pub params: Vec<ParamShape>,
}

pub const CHECKPOINT_FORMAT: &str = "cfdebias-f64le-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub state: ModelState,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Checkpoint {
    /// Writes the weight blob at `path` and metadata at `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = self.meta.clone();
        meta.params.clear();
        let mut blob = Vec::with_capacity(self.state.num_params() * 8);
        for (name, t) in self.state.iter() {
            meta.params.push(ParamShape {
                name: name.to_string(),
                rows: t.nrows(),
                cols: t.ncols(),
            });
            for v in t.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, blob).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&meta)? + "\n";
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!("unknown checkpoint format {}", meta.format)));
        }
        let blob = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let expected: usize = meta.params.iter().map(|p| p.rows * p.cols * 8).sum();
        if blob.len() != expected {
            return Err(Error::shape(format!("{expected} checkpoint bytes"), blob.len()));
        }
        let mut state = ModelState::new(meta.seed);
        let mut offset = 0;
        for p in &meta.params {
            let n = p.rows * p.cols;
            let values: Vec<f64> = blob[offset..offset + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset += n * 8;
            state.insert(p.name.clone(), Tensor::from_shape_vec((p.rows, p.cols), values).expect("shape"));
        }
        Ok(Checkpoint { meta, state })
    }
}

/// Loss of one mini-batch on a fresh graph, with the parameter bindings.
fn batch_objective(
    spec: &BackboneSpec,
    cfg: &ExperimentConfig,
    state: &ModelState,
    data: &PreparedSplit,
    batch: &[usize],
    weights: Option<ClassWeights>,
) -> Result<(Graph, Bound, Var)> {
    let mut g = Graph::new();
    let bound = state.bind(&mut g, true);
    let rows = batch
        .iter()
        .map(|&i| spec.alf_graph(&mut g, &bound, &data.inputs, i))
        .collect::<Result<Vec<_>>>()?;
    let alf = g.concat_rows(&rows);
    let genders: Vec<GenderCode> = batch.iter().map(|&i| data.genders[i]).collect();
    let labels: Vec<DepressionLabel> = batch.iter().map(|&i| data.labels[i]).collect();
    let d_f = backbones::fusion_head_graph(&mut g, &bound, &spec.head, alf, &genders)?;
    let loss = if cfg.method == Method::Counterfactual {
        let d_g = backbones::gender_branch_graph(&mut g, &bound, &genders)?;
        let eps = bound.var(EPSILON_PARAM)?;
        counterfactual::counterfactual_objective(&mut g, d_g, d_f, &bound, &spec.head, eps, cfg.epsilon_mode, &labels, weights)?
            .total
    } else {
        counterfactual::cross_entropy_graph(&mut g, d_f, &labels, weights)?
    };
    Ok((g, bound, loss))
}

/// Trains a model, reading only the training manifest.
pub fn train_traced(cfg: &ExperimentConfig, log: &AccessLog) -> Result<Checkpoint> {
    cfg.validate()?;
    let raw = load_manifest(&cfg.corpus.train, log)?;
    train_on(cfg, &raw, log)
}

pub fn train(cfg: &ExperimentConfig) -> Result<Checkpoint> {
    train_traced(cfg, &AccessLog::new())
}

/// Trains on an already loaded training manifest.
pub fn train_on(cfg: &ExperimentConfig, raw: &CorpusManifest, log: &AccessLog) -> Result<Checkpoint> {
    cfg.validate()?;
    if raw.is_empty() {
        return Err(Error::invalid("training manifest is empty"));
    }
    if raw.records.iter().any(|r| r.augmented) {
        return Err(Error::invalid("training manifest already contains augmented records"));
    }
    let dim = if cfg.backbone == BackboneKind::Tabular { tabular_dim(raw)? } else { None };
    let spec = BackboneSpec::new(cfg, dim)?;
    let manifest = transform_training(raw, cfg)?;
    let (data, norm_stats) = prepare_split(&manifest, cfg, None, log)?;
    let weights = if cfg.class_weighting { Some(class_weights(&data.labels)?) } else { None };

    let mut state = init_model(&spec, cfg.method, cfg.epsilon_mode, cfg.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate()));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = nn::seeded_rng(cfg.seed, 3);
    let mut history = Vec::with_capacity(cfg.optimizer.epochs);
    let mut best: Option<(f64, usize, ModelState)> = None;

    for epoch in 1..=cfg.optimizer.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.optimizer.batch_size) {
            let (g, bound, loss) = batch_objective(&spec, cfg, &state, &data, batch, weights)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::invalid(format!("non-finite training loss at epoch {epoch}")));
            }
            total += value * batch.len() as f64;
            let grads = g.backward(loss);
            let grads = bound.gradients(&grads, &state);
            adam.step(&mut state, &grads);
        }
        let mean = total / data.len() as f64;
        history.push(mean);
        if best.as_ref().is_none_or(|(b, _, _)| mean < *b) {
            best = Some((mean, epoch, state.clone()));
        }
    }
    let (train_loss, epoch, state) = best.expect("at least one epoch");
    Ok(Checkpoint {
        meta: CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            config: cfg.clone(),
            seed: cfg.seed,
            corpus_hash: raw.content_hash()?,
            epoch,
            epochs_run: cfg.optimizer.epochs,
            train_loss,
            loss_history: history,
            spec,
            train_distribution: manifest.distribution,
            train_size: manifest.len(),
            norm_stats,
            params: Vec::new(),
        },
        state,
    })
}

// ---------------------------------------------------------------------------
// Evaluation

/// Branch outputs for one evaluated session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebugEntry {
    pub session_id: String,
    pub d_g: Option<LogitVector>,
    pub d_f_factual: LogitVector,
    pub d_eps: Option<LogitVector>,
    pub fused_factual: Option<LogitVector>,
    pub fused_counterfactual: Option<LogitVector>,
    pub tie: Option<LogitVector>,
    pub prediction: DepressionLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config_hash: String,
    pub backbone: BackboneKind,
    pub method: Method,
    pub report: FairnessReport,
    pub predictions: Vec<PredictionRecord>,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_seconds: f64,
}

impl RunResult {
    /// Checks that the stored report equals one recomputed from the log.
    pub fn verify(&self, averaging: Averaging) -> Result<()> {
        let again = FairnessReport::from_records(&self.predictions, averaging)?;
        if again != self.report {
            return Err(Error::invalid("stored report differs from its prediction log"));
        }
        Ok(())
    }
}

fn row_logits(t: &Tensor, i: usize) -> Result<LogitVector> {
    LogitVector::from_view(t.row(i))
}

/// Predictions and branch outputs for a prepared split.
pub fn predict(ckpt: &Checkpoint, data: &PreparedSplit) -> Result<(Vec<PredictionRecord>, Vec<DebugEntry>)> {
    let spec = &ckpt.meta.spec;
    let cfg = &ckpt.meta.config;
    let cf = cfg.method == Method::Counterfactual;
    let mut preds = Vec::with_capacity(data.len());
    let mut debug = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let bound = ckpt.state.bind(&mut g, false);
        let rows = chunk
            .iter()
            .map(|&i| spec.alf_graph(&mut g, &bound, &data.inputs, i))
            .collect::<Result<Vec<_>>>()?;
        let alf = g.concat_rows(&rows);
        let genders: Vec<GenderCode> = chunk.iter().map(|&i| data.genders[i]).collect();
        let d_f = backbones::fusion_head_graph(&mut g, &bound, &spec.head, alf, &genders)?;
        let (d_g, d_eps) = if cf {
            let d_g = backbones::gender_branch_graph(&mut g, &bound, &genders)?;
            let eps = bound.var(EPSILON_PARAM)?;
            let d_eps = counterfactual::counterfactual_logits_graph(&mut g, &bound, &spec.head, eps, cfg.epsilon_mode)?;
            (Some(d_g), Some(row_logits(g.value(d_eps), 0)?))
        } else {
            (None, None)
        };
        for (k, &i) in chunk.iter().enumerate() {
            let df = row_logits(g.value(d_f), k)?;
            let entry = match (d_g, d_eps) {
                (Some(dg), Some(de)) => {
                    let effect = counterfactual::assemble(row_logits(g.value(dg), k)?, df, de);
                    let tie = effect.tie();
                    DebugEntry {
                        session_id: data.ids[i].clone(),
                        d_g: Some(effect.branches.d_g),
                        d_f_factual: df,
                        d_eps: Some(de),
                        fused_factual: Some(effect.fused_factual),
                        fused_counterfactual: Some(effect.fused_counterfactual),
                        tie: Some(tie),
                        prediction: counterfactual::predict_tie(&tie),
                    }
                }
                _ => DebugEntry {
                    session_id: data.ids[i].clone(),
                    d_g: None,
                    d_f_factual: df,
                    d_eps: None,
                    fused_factual: None,
                    fused_counterfactual: None,
                    tie: None,
                    prediction: counterfactual::predict_factual(&df),
                },
            };
            preds.push(PredictionRecord {
                session_id: entry.session_id.clone(),
                gender: data.genders[i],
                true_label: data.labels[i],
                predicted_label: entry.prediction,
                tie_scores: entry.tie,
            });
            debug.push(entry);
        }
    }
    Ok((preds, debug))
}

/// Evaluates a checkpoint on a test manifest.
pub fn evaluate_with_debug(
    ckpt: &Checkpoint,
    test: &CorpusManifest,
    log: &AccessLog,
) -> Result<(RunResult, Vec<DebugEntry>)> {
    let start = Instant::now();
    let cfg = &ckpt.meta.config;
    if test.is_empty() {
        return Err(Error::invalid("test manifest is empty"));
    }
    if let Some(r) = test.records.iter().find(|r| r.augmented) {
        return Err(session_error(r, "augmented records cannot be evaluated"));
    }
    if cfg.backbone == BackboneKind::Tabular {
        let dim = tabular_dim(test)?.unwrap_or(0);
        if dim != ckpt.meta.spec.alf_dim {
            return Err(Error::shape(format!("feature dim {}", ckpt.meta.spec.alf_dim), dim));
        }
    }
    if cfg.backbone == BackboneKind::Sta && ckpt.meta.norm_stats.is_none() {
        return Err(Error::invalid("STA checkpoint lacks normalization statistics"));
    }
    let (data, _) = prepare_split(test, cfg, ckpt.meta.norm_stats.as_ref(), log)?;
    let (predictions, debug) = predict(ckpt, &data)?;
    let report = FairnessReport::from_records(&predictions, cfg.metrics.averaging)?;
    Ok((
        RunResult {
            config_hash: cfg.hash(),
            backbone: cfg.backbone,
            method: cfg.method,
            report,
            predictions,
            checkpoint: None,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        },
        debug,
    ))
}

pub fn evaluate(ckpt: &Checkpoint, test: &CorpusManifest) -> Result<RunResult> {
    Ok(evaluate_with_debug(ckpt, test, &AccessLog::new())?.0)
}

// ---------------------------------------------------------------------------
// Persistence

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const RUN_FILE: &str = "run.json";
pub const DEBUG_FILE: &str = "debug.jsonl";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join(CHECKPOINT_FILE);
    ckpt.save(&path)?;
    Ok(path)
}

/// Writes the prediction log, single-row report, run record and optional
/// debug log into `dir`.
pub fn write_run(dir: &Path, result: &RunResult, debug: Option<&[DebugEntry]>) -> Result<()> {
    ensure_dir(dir)?;
    datamodel::write_jsonl_file(&dir.join(PREDICTIONS_FILE), &result.predictions)?;
    let report = emit_report(std::slice::from_ref(result), ReportFormat::Json)?;
    let rp = dir.join(REPORT_FILE);
    std::fs::write(&rp, report).map_err(|e| Error::io(&rp, e))?;
    let run = dir.join(RUN_FILE);
    std::fs::write(&run, serde_json::to_string_pretty(result)? + "\n").map_err(|e| Error::io(&run, e))?;
    if let Some(entries) = debug {
        datamodel::write_jsonl_file(&dir.join(DEBUG_FILE), entries)?;
    }
    Ok(())
}

pub fn load_run(path: &Path) -> Result<RunResult> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Every `run.json` below `dir`, in path order.
pub fn collect_runs(dir: &Path) -> Result<Vec<RunResult>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, out)?;
            } else if p.file_name().is_some_and(|n| n == RUN_FILE) {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut paths = Vec::new();
    walk(dir, &mut paths)?;
    paths.iter().map(|p| load_run(p)).collect()
}

/// Trains, evaluates and, with an output directory, persists one run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    let start = Instant::now();
    let log = AccessLog::new();
    let ckpt = train_traced(cfg, &log)?;
    let ckpt_path = match &cfg.output_dir {
        Some(dir) => Some(save_checkpoint(&ckpt, dir)?),
        None => None,
    };
    let test = load_manifest(&cfg.corpus.test, &log)?;
    let (mut result, debug) = evaluate_with_debug(&ckpt, &test, &log)?;
    result.checkpoint = ckpt_path;
    result.wall_clock_seconds = start.elapsed().as_secs_f64();
    if let Some(dir) = &cfg.output_dir {
        write_run(dir, &result, cfg.debug_log.then_some(debug.as_slice()))?;
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// Comparison grid and reports

/// A list of runs, given explicitly and/or as `base` crossed with
/// `backbones × methods`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    #[serde(default)]
    pub base: Option<ExperimentConfig>,
    #[serde(default)]
    pub backbones: Vec<BackboneKind>,
    #[serde(default)]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub runs: Vec<ExperimentConfig>,
}

impl GridConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Explicit runs followed by the crossed ones. Crossed runs write to
    /// `<base output>/<backbone>-<method>`.
    pub fn expand(&self) -> Vec<ExperimentConfig> {
        let mut out = self.runs.clone();
        if let Some(base) = &self.base {
            let backbones = if self.backbones.is_empty() { vec![base.backbone] } else { self.backbones.clone() };
            let methods = if self.methods.is_empty() { vec![base.method] } else { self.methods.clone() };
            for &b in &backbones {
                for &m in &methods {
                    let mut c = base.clone();
                    c.backbone = b;
                    c.method = m;
                    c.output_dir = base.output_dir.as_ref().map(|d| {
                        d.join(format!("{}-{}", serde_plain(&b), serde_plain(&m)))
                    });
                    out.push(c);
                }
            }
        }
        out
    }
}

fn serde_plain<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Runs every configuration; all must share one test manifest.
pub fn compare(configs: &[ExperimentConfig]) -> Result<Vec<RunResult>> {
    let first = configs.first().ok_or_else(|| Error::config("comparison needs at least one configuration"))?;
    if let Some(c) = configs.iter().find(|c| c.corpus.test != first.corpus.test) {
        return Err(Error::config(format!(
            "configurations use different test manifests: {} vs {}",
            first.corpus.test.display(),
            c.corpus.test.display()
        )));
    }
    for c in configs {
        c.validate()?;
    }
    configs.iter().map(run_experiment).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Text,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::config(format!("unknown report format {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub backbone: BackboneKind,
    pub method: Method,
    pub config_hash: String,
    #[serde(flatten)]
    pub report: FairnessReport,
}

/// Rows grouped by backbone with methods in fixed order. Timing is not
/// included, so rendering is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl ComparisonTable {
    pub fn from_results(results: &[RunResult]) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::invalid("no results to report"));
        }
        let mut rows: Vec<ReportRow> = results
            .iter()
            .map(|r| ReportRow {
                backbone: r.backbone,
                method: r.method,
                config_hash: r.config_hash.clone(),
                report: r.report,
            })
            .collect();
        rows.sort_by_key(|r| (r.backbone, r.method));
        Ok(ComparisonTable {
            columns: REPORT_COLUMNS.iter().map(|c| c.to_string()).collect(),
            rows,
        })
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Json => Ok(serde_json::to_string_pretty(self)? + "\n"),
            ReportFormat::Text => Ok(self.render_text()),
        }
    }

    fn render_text(&self) -> String {
        let mut header = vec!["Backbone".to_string(), "Method".to_string()];
        header.extend(self.columns.iter().cloned());
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = vec![r.backbone.label().to_string(), r.method.label().to_string()];
                cells.extend(r.report.cells());
                cells
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                std::iter::once(&header[c])
                    .chain(body.iter().map(|row| &row[c]))
                    .map(|s| s.chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .enumerate()
                .map(|(c, s)| if c < 2 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
                .collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(&header);
        for row in &body {
            out.push_str(&line(row));
        }
        out
    }

    pub fn parse_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Renders results as an aligned text table or JSON.
pub fn emit_report(results: &[RunResult], format: ReportFormat) -> Result<String> {
    ComparisonTable::from_results(results)?.render(format)
}

/// Per-method results keyed for quick lookup.
pub fn by_method(results: &[RunResult]) -> BTreeMap<(BackboneKind, Method), &RunResult> {
    results.iter().map(|r| ((r.backbone, r.method), r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SynthConfig, SPLIT_TEST, SPLIT_TRAIN};

    fn tiny_corpus(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
        let cfg = SynthConfig { n_train: 80, n_test: 40, feature_dim: 4, seed, ..Default::default() };
        let (train, test) = generate_synthetic(&cfg).unwrap();
        let (tp, sp) = (dir.join("train.json"), dir.join("test.json"));
        train.save(&tp).unwrap();
        test.save(&sp).unwrap();
        (tp, sp)
    }

    fn tiny_config(method: Method, train: &Path, test: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(BackboneKind::Tabular, method, train, test);
        c.optimizer.epochs = 3;
        c.model.head_hidden = vec![8];
        c
    }

    #[test]
    fn zero_epochs_rejected() {
        let mut c = tiny_config(Method::Counterfactual, Path::new("a"), Path::new("b"));
        c.optimizer.epochs = 0;
        assert!(matches!(train(&c), Err(Error::Config(_))));
    }

    #[test]
    fn method_order_and_labels() {
        let mut m = vec![Method::Counterfactual, Method::None, Method::Mixfeat, Method::Subsample];
        m.sort();
        assert_eq!(m, Method::ALL.to_vec());
        assert_eq!(Method::Mixfeat.label(), "Data Augmentation");
    }

    #[test]
    fn none_and_counterfactual_share_branch_init() {
        let spec = BackboneSpec {
            kind: BackboneKind::Tabular,
            alf_dim: 5,
            head: MlpConfig::new(6, vec![4]),
            sta: StaConfig::default(),
            netvlad: NetvladConfig::default(),
        };
        let a = init_model(&spec, Method::None, EpsilonMode::Head, 7);
        let b = init_model(&spec, Method::Counterfactual, EpsilonMode::Head, 7);
        for (name, t) in a.iter() {
            assert_eq!(b.get(name).unwrap(), t);
        }
        assert_eq!(b.get(EPSILON_PARAM).unwrap().dim(), (1, 6));
        assert!(b.names().any(|n| n.starts_with("gender.")));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (tp, sp) = tiny_corpus(dir.path(), 1);
        let ckpt = train(&tiny_config(Method::Counterfactual, &tp, &sp)).unwrap();
        let path = save_checkpoint(&ckpt, dir.path()).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.state, ckpt.state);
        assert_eq!(back.meta.params.len(), ckpt.state.names().count());
        std::fs::write(&path, [0u8; 3]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn evaluate_rejects_shape_mismatch_and_augmented() {
        let dir = tempfile::tempdir().unwrap();
        let (tp, sp) = tiny_corpus(dir.path(), 2);
        let ckpt = train(&tiny_config(Method::None, &tp, &sp)).unwrap();
        let other = generate_synthetic(&SynthConfig { n_train: 10, n_test: 10, feature_dim: 6, ..Default::default() }).unwrap().1;
        assert!(matches!(evaluate(&ckpt, &other), Err(Error::Shape { .. })));
        let mut test = CorpusManifest::load(&sp).unwrap();
        test.records[0].augmented = true;
        test.records[0].parents = Some(("a".into(), "b".into()));
        assert!(evaluate(&ckpt, &test).is_err());
        assert!(evaluate(&ckpt, &CorpusManifest::empty(SPLIT_TEST)).is_err());
    }

    #[test]
    fn subsample_training_size() {
        let dir = tempfile::tempdir().unwrap();
        let train_m = generate_synthetic(&SynthConfig { feature_dim: 4, seed: 3, ..Default::default() }).unwrap().0;
        assert_eq!(train_m.split_name, SPLIT_TRAIN);
        let tp = dir.path().join("t.json");
        train_m.save(&tp).unwrap();
        let mut c = tiny_config(Method::Subsample, &tp, &tp);
        c.optimizer.epochs = 1;
        assert_eq!(train(&c).unwrap().meta.train_size, 76);
        c.method = Method::Mixfeat;
        assert_eq!(train(&c).unwrap().meta.train_size, 240);
    }

    #[test]
    fn report_rendering() {
        let rep = FairnessReport { f1: 0.5, accuracy: 0.6, recall: 0.55, male_f1: 0.4, female_f1: 0.7, ea: 0.05, di: None };
        let mk = |b, m| RunResult {
            config_hash: "h".into(),
            backbone: b,
            method: m,
            report: rep,
            predictions: Vec::new(),
            checkpoint: None,
            wall_clock_seconds: 1.0,
        };
        let results = vec![mk(BackboneKind::Netvlad, Method::Counterfactual), mk(BackboneKind::Sta, Method::Mixfeat), mk(BackboneKind::Sta, Method::None)];
        let text = emit_report(&results, ReportFormat::Text).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].contains("F1-score  Accuracy  Recall  Male-F1  Female-F1     EA  DI"), "{}", lines[0]);
        assert!(lines[1].starts_with("STA       None"));
        assert!(lines[2].contains("Data Augmentation"));
        assert!(lines[3].starts_with("NetVLAD"));
        assert!(lines[3].ends_with("NA"));
        let json = emit_report(&results, ReportFormat::Json).unwrap();
        let again = ComparisonTable::parse_json(&json).unwrap().render(ReportFormat::Json).unwrap();
        assert_eq!(json, again);
        assert!(emit_report(&[], ReportFormat::Text).is_err());
    }

    #[test]
    fn grid_expansion() {
        let mut base = tiny_config(Method::None, Path::new("tr"), Path::new("te"));
        base.output_dir = Some("out".into());
        let grid = GridConfig {
            base: Some(base),
            backbones: vec![BackboneKind::Sta, BackboneKind::Netvlad],
            methods: Method::ALL.to_vec(),
            runs: Vec::new(),
        };
        let runs = grid.expand();
        assert_eq!(runs.len(), 8);
        assert_eq!(runs[7].output_dir.as_deref(), Some(Path::new("out/netvlad-counterfactual")));
        let mut bad = runs.clone();
        bad[1].corpus.test = "elsewhere".into();
        assert!(compare(&bad).is_err());
        assert!(compare(&[]).is_err());
    }
}
