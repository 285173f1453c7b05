//! Acoustic backbones and the classification heads.
//!
//! Two audio pipelines produce an audio-level feature (ALF) per session:
//!
//! * STA: every 129×64 spectrogram clip goes through a CNN branch and an LSTM
//!   branch, the per-frame outputs are summed and attention-pooled into a
//!   64-dim segment feature, and segment features are aggregated with
//!   eigenvector pooling (EEP).
//! * NetVLAD: every transcript-aligned Mel clip is projected frame by frame,
//!   aggregated by NetVLAD into 256 dims, and the clip sequence is summarised
//!   by the final GRU state.
//!
//! The tabular backbone mean-pools precomputed feature rows and is used for
//! desk-scale experiments. All three feed the same fusion head, which sees the
//! ALF with the scalar gender appended.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var, GATHER_ZERO};
use crate::datamodel::{FeatureSequence, GenderCode, LogitVector};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, MlpConfig, ModelState};

pub const STA_ALF_DIM: usize = 64;
pub const NETVLAD_ALF_DIM: usize = 256;
pub const STA_FREQ_BINS: usize = 129;
pub const STA_CLIP_FRAMES: usize = 64;

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StaConfig {
    pub cnn_channels: Vec<usize>,
    pub lstm_hidden: usize,
    pub aslf_dim: usize,
    pub attention_dim: usize,
    pub freq_bins: usize,
    pub clip_frames: usize,
}

impl Default for StaConfig {
    fn default() -> Self {
        StaConfig {
            cnn_channels: vec![4, 8],
            lstm_hidden: 32,
            aslf_dim: STA_ALF_DIM,
            attention_dim: 32,
            freq_bins: STA_FREQ_BINS,
            clip_frames: STA_CLIP_FRAMES,
        }
    }
}

impl StaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.aslf_dim != STA_ALF_DIM {
            return Err(Error::config(format!("STA aslf_dim must be {STA_ALF_DIM}")));
        }
        if self.cnn_channels.is_empty() || self.cnn_channels.contains(&0) {
            return Err(Error::config("STA needs at least one non-empty CNN layer"));
        }
        if self.lstm_hidden == 0 || self.attention_dim == 0 || self.freq_bins == 0 || self.clip_frames == 0 {
            return Err(Error::config("STA sizes must be positive"));
        }
        Ok(())
    }

    /// Frequency rows left after the stride-2 convolutions.
    fn conv_heights(&self) -> Vec<usize> {
        let mut h = self.freq_bins;
        let mut out = Vec::new();
        for _ in &self.cnn_channels {
            h = (h + 2 - 3) / 2 + 1;
            out.push(h);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetvladConfig {
    /// Rows of each input Mel clip.
    pub input_dim: usize,
    pub local_dim: usize,
    pub n_clusters: usize,
    pub aslf_dim: usize,
    pub gru_hidden: usize,
}

impl Default for NetvladConfig {
    fn default() -> Self {
        NetvladConfig {
            input_dim: 64,
            local_dim: 64,
            n_clusters: 4,
            aslf_dim: NETVLAD_ALF_DIM,
            gru_hidden: NETVLAD_ALF_DIM,
        }
    }
}

impl NetvladConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters * self.local_dim != self.aslf_dim {
            return Err(Error::config(format!(
                "NetVLAD needs n_clusters × local_dim = aslf_dim ({} × {} ≠ {})",
                self.n_clusters, self.local_dim, self.aslf_dim
            )));
        }
        if self.n_clusters == 0 || self.local_dim == 0 || self.input_dim == 0 || self.gru_hidden == 0 {
            return Err(Error::config("NetVLAD sizes must be positive"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// STA

pub fn init_sta(state: &mut ModelState, rng: &mut rand_chacha::ChaCha8Rng, cfg: &StaConfig) {
    let mut cin = 1;
    for (i, &cout) in cfg.cnn_channels.iter().enumerate() {
        nn::init_dense(state, rng, &format!("sta.conv{i}"), 9 * cin, cout);
        cin = cout;
    }
    let last_h = *cfg.conv_heights().last().unwrap_or(&cfg.freq_bins);
    nn::init_dense(state, rng, "sta.cnn_proj", cin * last_h, cfg.aslf_dim);
    nn::init_lstm(state, rng, "sta.lstm", cfg.freq_bins, cfg.lstm_hidden);
    nn::init_dense(state, rng, "sta.lstm_proj", cfg.lstm_hidden, cfg.aslf_dim);
    init_attention(state, rng, "sta.att", cfg.aslf_dim, cfg.attention_dim);
}

pub fn init_attention(
    state: &mut ModelState,
    rng: &mut rand_chacha::ChaCha8Rng,
    prefix: &str,
    dim: usize,
    attention_dim: usize,
) {
    nn::init_dense(state, rng, &format!("{prefix}.proj"), dim, attention_dim);
    state.insert(format!("{prefix}.v"), nn::fan_in_uniform(rng, attention_dim, 1));
}

/// 3×3 convolution, padding 1, stride 2 along frequency and 1 along time.
/// `x` holds positions `(h, w)` row-major with channels as columns.
fn conv2d(g: &mut Graph, bound: &Bound, name: &str, x: Var, h: usize, w: usize) -> Result<(Var, usize)> {
    let cin = g.shape(x).1;
    let ho = (h + 2 - 3) / 2 + 1;
    let mut index = Vec::with_capacity(ho * w * 9 * cin);
    for oh in 0..ho {
        for ow in 0..w {
            for c in 0..cin {
                for kh in 0..3 {
                    for kw in 0..3 {
                        let ih = (oh * 2 + kh) as isize - 1;
                        let iw = (ow + kw) as isize - 1;
                        if ih < 0 || iw < 0 || ih as usize >= h || iw as usize >= w {
                            index.push(GATHER_ZERO);
                        } else {
                            index.push(((ih as usize * w + iw as usize) * cin + c) as u32);
                        }
                    }
                }
            }
        }
    }
    let cols = g.gather(x, Arc::from(index), ho * w, 9 * cin);
    let y = nn::dense(g, bound, name, cols)?;
    Ok((g.relu(y), ho))
}

/// Softmax attention over frame scores `v·tanh(W f_t + b)`; returns `1 × d`.
pub fn attention_pool_graph(g: &mut Graph, bound: &Bound, prefix: &str, frames: Var) -> Result<Var> {
    let proj = nn::dense(g, bound, &format!("{prefix}.proj"), frames)?;
    let act = g.tanh(proj);
    let v = bound.var(&format!("{prefix}.v"))?;
    let scores = g.matmul(act, v);
    let scores_row = g.transpose(scores);
    let weights = g.softmax_rows(scores_row);
    Ok(g.matmul(weights, frames))
}

/// Attention weights and pooled output for `frames` (T × d).
pub fn attention_pool(frames: &Array2<f64>, state: &ModelState, prefix: &str) -> Result<(Array1<f64>, Array1<f64>)> {
    if frames.nrows() == 0 {
        return Err(Error::invalid("attention pooling needs at least one frame"));
    }
    let mut g = Graph::new();
    let bound = state.bind(&mut g, false);
    let x = g.constant(frames.clone());
    let proj = nn::dense(&mut g, &bound, &format!("{prefix}.proj"), x)?;
    let act = g.tanh(proj);
    let v = bound.var(&format!("{prefix}.v"))?;
    let scores = g.matmul(act, v);
    let scores_row = g.transpose(scores);
    let weights = g.softmax_rows(scores_row);
    let pooled = g.matmul(weights, x);
    Ok((g.value(weights).row(0).to_owned(), g.value(pooled).row(0).to_owned()))
}

/// Segment-level feature of one spectrogram clip (`freq_bins × clip_frames`).
pub fn sta_forward_graph(g: &mut Graph, bound: &Bound, cfg: &StaConfig, clip: &Array2<f64>) -> Result<Var> {
    if clip.dim() != (cfg.freq_bins, cfg.clip_frames) {
        return Err(Error::shape(
            format!("{}×{} clip", cfg.freq_bins, cfg.clip_frames),
            format!("{}×{}", clip.nrows(), clip.ncols()),
        ));
    }
    let (fh, fw) = (cfg.freq_bins, cfg.clip_frames);
    let flat = clip.as_standard_layout().iter().copied().collect::<Vec<_>>();
    let image = g.constant(Tensor::from_shape_vec((fh * fw, 1), flat).expect("clip shape"));

    let mut x = image;
    let mut h = fh;
    for i in 0..cfg.cnn_channels.len() {
        let (y, ho) = conv2d(g, bound, &format!("sta.conv{i}"), x, h, fw)?;
        x = y;
        h = ho;
    }
    // (h, t, c) → row t, column c·h + h_idx
    let channels = g.shape(x).1;
    let mut index = Vec::with_capacity(fw * channels * h);
    for t in 0..fw {
        for c in 0..channels {
            for hi in 0..h {
                index.push(((hi * fw + t) * channels + c) as u32);
            }
        }
    }
    let per_frame = g.gather(x, Arc::from(index), fw, channels * h);
    let spatial = nn::dense(g, bound, "sta.cnn_proj", per_frame)?;

    let frames_in = g.constant(clip.t().as_standard_layout().into_owned());
    let hidden = nn::lstm(g, bound, "sta.lstm", frames_in)?;
    let temporal = nn::dense(g, bound, "sta.lstm_proj", hidden)?;

    let fused = g.add(spatial, temporal);
    attention_pool_graph(g, bound, "sta.att", fused)
}

pub fn sta_forward(clip: &Array2<f64>, state: &ModelState, cfg: &StaConfig) -> Result<Array1<f64>> {
    let mut g = Graph::new();
    let bound = state.bind(&mut g, false);
    let out = sta_forward_graph(&mut g, &bound, cfg, clip)?;
    Ok(g.value(out).row(0).to_owned())
}

// ---------------------------------------------------------------------------
// Eigenvector pooling

/// Time weights from the leading eigenvector of the Gram matrix `X Xᵀ`.
///
/// The eigenproblem is solved on the `d × d` matrix `Xᵀ X`, whose non-zero
/// spectrum is shared. When the leading eigenvalue is repeated, the weight
/// vector is the projection of the all-ones vector onto the leading
/// eigenspace. The result is sign-fixed and scaled to sum to one; a weight
/// vector whose sum is below 1e-8 falls back to uniform weights.
#[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail
pub fn eep_weights(x: &Array2<f64>) -> Result<Array1<f64>> {
    let (t, d) = x.dim();
    if t == 0 || d == 0 {
        return Err(Error::invalid("eigenvector pooling needs a non-empty sequence"));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("eigenvector pooling input contains non-finite values"));
    }
    let uniform = Array1::from_elem(t, 1.0 / t as f64);
    if t == 1 {
        return Ok(uniform);
    }
    let gram_d = x.t().dot(x);
    let m = DMatrix::from_fn(d, d, |i, j| gram_d[[i, j]]);
    let eig = SymmetricEigen::new(m);
    let lmax = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lmax > 1e-300) {
        return Ok(uniform);
    }
    let mut projection = Array1::<f64>::zeros(t);
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < lmax * (1.0 - 1e-9) {
            continue;
        }
        let v = Array1::from_iter(eig.eigenvectors.column(k).iter().copied());
        let u = x.dot(&v) / lambda.sqrt();
        let along_ones = u.sum();
        projection.scaled_add(along_ones, &u);
    }
    let total = projection.sum();
    if total.abs().sqrt() < 1e-8 {
        return Ok(uniform);
    }
    Ok(projection / total)
}

/// Weighted sum of the rows of `x` with [`eep_weights`].
pub fn eep_aggregate(x: &Array2<f64>) -> Result<Array1<f64>> {
    let w = eep_weights(x)?;
    Ok(x.t().dot(&w))
}

/// Graph version; the eigenvector weights are treated as constants.
pub fn eep_graph(g: &mut Graph, seq: Var) -> Result<Var> {
    let w = eep_weights(g.value(seq))?;
    let t = w.len();
    let w = g.constant(w.into_shape_with_order((1, t)).expect("row"));
    Ok(g.matmul(w, seq))
}

// ---------------------------------------------------------------------------
// NetVLAD

pub fn init_netvlad(state: &mut ModelState, rng: &mut rand_chacha::ChaCha8Rng, cfg: &NetvladConfig) {
    nn::init_dense(state, rng, "vlad.proj", cfg.input_dim, cfg.local_dim);
    init_vlad_core(state, rng, "vlad", cfg.local_dim, cfg.n_clusters);
    nn::init_gru(state, rng, "vlad.gru", cfg.aslf_dim, cfg.gru_hidden);
}

pub fn init_vlad_core(state: &mut ModelState, rng: &mut rand_chacha::ChaCha8Rng, prefix: &str, dim: usize, k: usize) {
    nn::init_dense(state, rng, &format!("{prefix}.assign"), dim, k);
    state.insert(format!("{prefix}.centers"), nn::fan_in_uniform(rng, 1, k * dim).into_shape_with_order((k, dim)).expect("centers"));
}

/// Soft-assigned residual sums `V(k) = Σ_i a_k(x_i)(x_i − c_k)` (K × d),
/// before any normalization.
pub fn netvlad_residuals_graph(g: &mut Graph, bound: &Bound, prefix: &str, locals: Var) -> Result<Var> {
    let logits = nn::dense(g, bound, &format!("{prefix}.assign"), locals)?;
    let assign = g.softmax_rows(logits);
    let centers = bound.var(&format!("{prefix}.centers"))?;
    let (_, d) = g.shape(locals);
    if g.shape(centers).1 != d {
        return Err(Error::shape(format!("local dim {}", g.shape(centers).1), d));
    }
    let assign_t = g.transpose(assign);
    let weighted = g.matmul(assign_t, locals);
    let mass = g.sum_rows(assign);
    let mass_col = g.transpose(mass);
    let shifted = g.mul_col(centers, mass_col);
    Ok(g.sub(weighted, shifted))
}

/// NetVLAD descriptor: intra-normalized residuals, flattened, globally
/// normalized. Returns `1 × K·d`.
pub fn netvlad_graph(g: &mut Graph, bound: &Bound, prefix: &str, locals: Var) -> Result<Var> {
    let residuals = netvlad_residuals_graph(g, bound, prefix, locals)?;
    let intra = g.l2_normalize_rows(residuals, NORM_EPS);
    let (k, d) = g.shape(intra);
    let flat = g.reshape(intra, 1, k * d);
    Ok(g.l2_normalize_rows(flat, NORM_EPS))
}

pub fn netvlad_residuals(locals: &Array2<f64>, state: &ModelState, prefix: &str) -> Result<Array2<f64>> {
    if locals.nrows() == 0 {
        return Err(Error::invalid("NetVLAD needs at least one local feature"));
    }
    let mut g = Graph::new();
    let bound = state.bind(&mut g, false);
    let x = g.constant(locals.clone());
    let out = netvlad_residuals_graph(&mut g, &bound, prefix, x)?;
    Ok(g.value(out).clone())
}

/// NetVLAD descriptor of `locals` (N × d) using the `vlad.*` core of `state`.
pub fn netvlad_aggregate(locals: &Array2<f64>, state: &ModelState, cfg: &NetvladConfig) -> Result<Array1<f64>> {
    cfg.validate()?;
    if locals.nrows() == 0 {
        return Err(Error::invalid("NetVLAD needs at least one local feature"));
    }
    if locals.ncols() != cfg.local_dim {
        return Err(Error::shape(format!("local dim {}", cfg.local_dim), locals.ncols()));
    }
    let mut g = Graph::new();
    let bound = state.bind(&mut g, false);
    let x = g.constant(locals.clone());
    let out = netvlad_graph(&mut g, &bound, "vlad", x)?;
    Ok(g.value(out).row(0).to_owned())
}

/// Segment feature of one Mel clip (`input_dim × frames`).
pub fn netvlad_clip_graph(g: &mut Graph, bound: &Bound, cfg: &NetvladConfig, mel: &Array2<f64>) -> Result<Var> {
    if mel.nrows() != cfg.input_dim || mel.ncols() == 0 {
        return Err(Error::shape(format!("{} × T Mel clip", cfg.input_dim), format!("{}×{}", mel.nrows(), mel.ncols())));
    }
    let frames = g.constant(mel.t().as_standard_layout().into_owned());
    let locals = nn::dense(g, bound, "vlad.proj", frames)?;
    netvlad_graph(g, bound, "vlad", locals)
}

pub fn gru_aggregate(seq: &Array2<f64>, state: &ModelState, name: &str) -> Result<Array1<f64>> {
    if seq.nrows() == 0 {
        return Err(Error::invalid("GRU aggregation needs at least one segment"));
    }
    let mut g = Graph::new();
    let bound = state.bind(&mut g, false);
    let x = g.constant(seq.clone());
    let h = nn::gru(&mut g, &bound, name, x)?;
    Ok(g.value(h).row(0).to_owned())
}

// ---------------------------------------------------------------------------
// Heads

pub fn gender_branch_config() -> MlpConfig {
    MlpConfig::new(1, vec![16])
}

pub fn init_gender_branch(seed: u64) -> ModelState {
    let mut state = ModelState::new(seed);
    let mut rng = nn::seeded_rng(seed, 1);
    nn::init_mlp(&mut state, &mut rng, "gender", &gender_branch_config());
    state
}

pub fn gender_column(g: &mut Graph, genders: &[GenderCode]) -> Var {
    let col = Tensor::from_shape_fn((genders.len(), 1), |(i, _)| genders[i].as_input());
    g.constant(col)
}

/// Gender-only logits `D_g` for a batch (B × 2).
pub fn gender_branch_graph(g: &mut Graph, bound: &Bound, genders: &[GenderCode]) -> Result<Var> {
    let x = gender_column(g, genders);
    nn::mlp(g, bound, "gender", &gender_branch_config(), x)
}

pub fn gender_branch(gender: GenderCode, state: &ModelState) -> Result<LogitVector> {
    let mut g = Graph::new();
    let bound = state.bind(&mut g, false);
    let out = gender_branch_graph(&mut g, &bound, &[gender])?;
    LogitVector::from_view(g.value(out).row(0))
}

/// Fusion head over `[alf, g]` for a batch; `alf` is B × (input_dim − 1).
pub fn fusion_head_graph(g: &mut Graph, bound: &Bound, cfg: &MlpConfig, alf: Var, genders: &[GenderCode]) -> Result<Var> {
    let (rows, dim) = g.shape(alf);
    if dim + 1 != cfg.input_dim {
        return Err(Error::shape(format!("ALF of length {}", cfg.input_dim - 1), dim));
    }
    if rows != genders.len() {
        return Err(Error::shape(format!("{rows} gender codes"), genders.len()));
    }
    let gcol = gender_column(g, genders);
    let fused = g.concat_cols(alf, gcol);
    nn::mlp(g, bound, "head", cfg, fused)
}

/// Applies the head MLP to an already fused input (1 × input_dim).
pub fn head_graph(g: &mut Graph, bound: &Bound, cfg: &MlpConfig, fused: Var) -> Result<Var> {
    if g.shape(fused).1 != cfg.input_dim {
        return Err(Error::shape(format!("fused input of length {}", cfg.input_dim), g.shape(fused).1));
    }
    nn::mlp(g, bound, "head", cfg, fused)
}

pub fn fusion_head(alf: &Array1<f64>, gender: GenderCode, state: &ModelState, cfg: &MlpConfig) -> Result<LogitVector> {
    let mut g = Graph::new();
    let bound = state.bind(&mut g, false);
    let x = g.constant(alf.clone().insert_axis(ndarray::Axis(0)));
    let out = fusion_head_graph(&mut g, &bound, cfg, x, &[gender])?;
    LogitVector::from_view(g.value(out).row(0))
}

/// Mean-pools the feature rows, then applies the fusion head.
pub fn tabular_backbone(features: &FeatureSequence, gender: GenderCode, state: &ModelState, cfg: &MlpConfig) -> Result<LogitVector> {
    if features.dim() + 1 != cfg.input_dim {
        return Err(Error::shape(format!("feature dim {}", cfg.input_dim - 1), features.dim()));
    }
    fusion_head(&features.mean_pool(), gender, state, cfg)
}
