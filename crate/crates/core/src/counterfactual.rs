//! Two-branch causal model with counterfactual (TIE) inference.
//!
//! A gender-only branch produces `D_g`, the fusion branch produces
//! `D_F = M_F(g, c)`, and the two are combined as `log σ(D_g + D_F)`. The
//! counterfactual world, where neither gender nor acoustic cues reach the
//! fusion branch, is represented by one global learnable vector ε passed
//! through the fusion head. Inference subtracts the counterfactual fused
//! scores from the factual ones.
//!
//! Training routes gradients in two ways: the classification loss updates
//! both branches, while the KL term updates ε only. The factual target, the
//! gender logits and the head weights all enter the KL term detached.

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Graph, Tensor, Var};
use crate::backbones;
use crate::datamodel::{DepressionLabel, GenderCode, LogitVector};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, MlpConfig, ModelState};

/// Where ε lives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonMode {
    /// ε is a fused-feature vector passed through the fusion head.
    #[default]
    Head,
    /// ε is used directly as the counterfactual logit pair.
    Logit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualParam {
    pub epsilon: Vec<f64>,
}

impl CounterfactualParam {
    /// Uniform in [-0.01, 0.01].
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = nn::seeded_rng(seed, 2);
        CounterfactualParam {
            epsilon: (0..dim).map(|_| rng.random_range(-0.01..=0.01)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.epsilon.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epsilon.is_empty()
    }

    pub fn as_row(&self) -> Tensor {
        Tensor::from_shape_vec((1, self.epsilon.len()), self.epsilon.clone()).expect("row")
    }

    pub fn is_finite(&self) -> bool {
        self.epsilon.iter().all(|v| v.is_finite())
    }

    pub fn expected_len(mode: EpsilonMode, head: &MlpConfig) -> usize {
        match mode {
            EpsilonMode::Head => head.input_dim,
            EpsilonMode::Logit => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchLogits {
    pub d_g: LogitVector,
    pub d_f_factual: LogitVector,
    pub d_f_counterfactual: LogitVector,
}

/// Branch outputs together with both fused score pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalEffect {
    pub branches: BranchLogits,
    pub fused_factual: LogitVector,
    pub fused_counterfactual: LogitVector,
}

impl TotalEffect {
    pub fn tie(&self) -> LogitVector {
        tie(&self.fused_factual, &self.fused_counterfactual)
    }
}

/// `log σ(d_g + d_f)`, componentwise.
pub fn fuse(d_g: &LogitVector, d_f: &LogitVector) -> LogitVector {
    LogitVector([
        autodiff::log_sigmoid(d_g[0] + d_f[0]),
        autodiff::log_sigmoid(d_g[1] + d_f[1]),
    ])
}

/// Total indirect effect: factual minus counterfactual fused scores.
pub fn tie(fused_factual: &LogitVector, fused_counterfactual: &LogitVector) -> LogitVector {
    LogitVector([
        fused_factual[0] - fused_counterfactual[0],
        fused_factual[1] - fused_counterfactual[1],
    ])
}

fn cross_entropy(logits: &LogitVector, label: DepressionLabel) -> f64 {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[label.index()]
}

/// Cross-entropy of the gender branch plus cross-entropy of the fused scores.
pub fn loss_cls(d_g: &LogitVector, fused_factual: &LogitVector, label: DepressionLabel) -> f64 {
    cross_entropy(d_g, label) + cross_entropy(fused_factual, label)
}

/// `(1/|D|) Σ_d −p(d|g,c) log p(d|g,c̄)` with both distributions the softmax
/// of the respective fused scores.
pub fn loss_kl(fused_factual: &LogitVector, fused_counterfactual: &LogitVector) -> f64 {
    let p = fused_factual.softmax();
    let m = fused_counterfactual[0].max(fused_counterfactual[1]);
    let lse = m + ((fused_counterfactual[0] - m).exp() + (fused_counterfactual[1] - m).exp()).ln();
    let terms: f64 = (0..2)
        .map(|d| {
            if p[d] == 0.0 {
                0.0
            } else {
                -p[d] * (fused_counterfactual[d] - lse)
            }
        })
        .sum();
    terms / 2.0
}

pub fn loss_total(l_cls: f64, l_kl: f64) -> f64 {
    l_cls + l_kl
}

/// Argmax of the TIE scores, ties to Non-depressed.
pub fn predict_tie(tie_scores: &LogitVector) -> DepressionLabel {
    tie_scores.argmax()
}

/// Argmax of the plain fusion-branch logits, ties to Non-depressed.
pub fn predict_factual(logits: &LogitVector) -> DepressionLabel {
    logits.argmax()
}

/// Counterfactual logits `D_ε` as a `1 × 2` node.
pub fn counterfactual_logits_graph(
    g: &mut Graph,
    head: &Bound,
    head_cfg: &MlpConfig,
    eps: Var,
    mode: EpsilonMode,
) -> Result<Var> {
    let expected = CounterfactualParam::expected_len(mode, head_cfg);
    if g.shape(eps) != (1, expected) {
        return Err(Error::shape(format!("epsilon of length {expected}"), g.shape(eps).1));
    }
    match mode {
        EpsilonMode::Head => backbones::head_graph(g, head, head_cfg, eps),
        EpsilonMode::Logit => Ok(eps),
    }
}

/// `D_{F_{ḡ,c̄}}`: the fusion head applied to ε. The acoustic backbone is
/// not involved.
pub fn counterfactual_branch(
    eps: &CounterfactualParam,
    head_state: &ModelState,
    head_cfg: &MlpConfig,
    mode: EpsilonMode,
) -> Result<LogitVector> {
    let mut g = Graph::new();
    let head = head_state.bind(&mut g, false);
    let e = g.constant(eps.as_row());
    let out = counterfactual_logits_graph(&mut g, &head, head_cfg, e, mode)?;
    LogitVector::from_view(g.value(out).row(0))
}

/// All branch outputs and fused scores for one sample with a given ALF.
pub fn total_effect_logits(
    gender: GenderCode,
    alf: &Array1<f64>,
    gender_state: &ModelState,
    fusion_state: &ModelState,
    head_cfg: &MlpConfig,
    eps: &CounterfactualParam,
    mode: EpsilonMode,
) -> Result<TotalEffect> {
    let d_g = backbones::gender_branch(gender, gender_state)?;
    let d_f_factual = backbones::fusion_head(alf, gender, fusion_state, head_cfg)?;
    let d_f_counterfactual = counterfactual_branch(eps, fusion_state, head_cfg, mode)?;
    Ok(assemble(d_g, d_f_factual, d_f_counterfactual))
}

pub fn assemble(d_g: LogitVector, d_f_factual: LogitVector, d_f_counterfactual: LogitVector) -> TotalEffect {
    TotalEffect {
        branches: BranchLogits {
            d_g,
            d_f_factual,
            d_f_counterfactual,
        },
        fused_factual: fuse(&d_g, &d_f_factual),
        fused_counterfactual: fuse(&d_g, &d_f_counterfactual),
    }
}

/// Per-class weights applied in the cross-entropy terms.
pub type ClassWeights = [f64; 2];

/// Weighted mean cross-entropy of `logits` (B × 2) against `labels`.
pub fn cross_entropy_graph(
    g: &mut Graph,
    logits: Var,
    labels: &[DepressionLabel],
    weights: Option<ClassWeights>,
) -> Result<Var> {
    let (rows, cols) = g.shape(logits);
    if cols != 2 || rows != labels.len() || rows == 0 {
        return Err(Error::shape(format!("{} × 2 logits", labels.len()), format!("{rows}×{cols}")));
    }
    let w = weights.unwrap_or([1.0, 1.0]);
    let mut mask = Tensor::zeros((rows, 2));
    let mut total = 0.0;
    for (i, label) in labels.iter().enumerate() {
        mask[[i, label.index()]] = w[label.index()];
        total += w[label.index()];
    }
    let mask = g.constant(mask);
    let logp = g.log_softmax_rows(logits);
    let picked = g.mul(logp, mask);
    let s = g.sum_all(picked);
    Ok(g.scale(s, -1.0 / total))
}

/// The KL term given detached inputs: `target_fused` and `d_g` must be
/// constants; `d_eps` is the `1 × 2` counterfactual logit row.
pub fn kl_graph(g: &mut Graph, target_fused: Var, d_g: Var, d_eps: Var) -> Result<(Var, Var)> {
    let (rows, cols) = g.shape(target_fused);
    if cols != 2 || g.shape(d_g) != (rows, 2) || g.shape(d_eps) != (1, 2) {
        return Err(Error::shape("matching B × 2 inputs", format!("{rows}×{cols}")));
    }
    let target = g.softmax_rows(target_fused);
    let pre = g.add_row(d_g, d_eps);
    let fused_cf = g.log_sigmoid(pre);
    let logq = g.log_softmax_rows(fused_cf);
    let prod = g.mul(target, logq);
    let s = g.sum_all(prod);
    let loss = g.scale(s, -1.0 / (2.0 * rows as f64));
    Ok((fused_cf, loss))
}

/// Graph nodes of one counterfactual training objective.
#[derive(Debug, Clone, Copy)]
pub struct CfTerms {
    pub d_g: Var,
    pub d_f: Var,
    pub fused_factual: Var,
    pub fused_counterfactual: Var,
    pub d_eps: Var,
    pub loss_cls: Var,
    pub loss_kl: Var,
    pub total: Var,
}

/// Builds `L_cls + L_kl` for a batch.
///
/// `d_g` and `d_f` are the live branch logits (B × 2). `fusion` is the live
/// binding of the fusion branch; its `head.*` parameters are re-read as
/// detached copies for the counterfactual path, so the KL term's gradient
/// reaches `eps` only.
#[allow(clippy::too_many_arguments)]
pub fn counterfactual_objective(
    g: &mut Graph,
    d_g: Var,
    d_f: Var,
    fusion: &Bound,
    head_cfg: &MlpConfig,
    eps: Var,
    mode: EpsilonMode,
    labels: &[DepressionLabel],
    weights: Option<ClassWeights>,
) -> Result<CfTerms> {
    let pre = g.add(d_g, d_f);
    let fused_factual = g.log_sigmoid(pre);
    let ce_g = cross_entropy_graph(g, d_g, labels, weights)?;
    let ce_f = cross_entropy_graph(g, fused_factual, labels, weights)?;
    let loss_cls = g.add(ce_g, ce_f);

    let head_frozen = fusion.detached(g, "head.");
    let d_eps = counterfactual_logits_graph(g, &head_frozen, head_cfg, eps, mode)?;
    let target = g.detach(fused_factual);
    let d_g_frozen = g.detach(d_g);
    let (fused_counterfactual, loss_kl) = kl_graph(g, target, d_g_frozen, d_eps)?;
    let total = g.add(loss_cls, loss_kl);
    Ok(CfTerms {
        d_g,
        d_f,
        fused_factual,
        fused_counterfactual,
        d_eps,
        loss_cls,
        loss_kl,
        total,
    })
}
