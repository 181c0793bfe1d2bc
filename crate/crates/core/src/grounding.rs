//! Cross-modal alignment scores and the joint objective.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroundingError {
    #[error("contrastive loss needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("score matrix must be square, got {0:?}")]
    NotSquare(Vec<usize>),
    #[error("{what}: {left} marginals for {right} embeddings")]
    Mismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, GroundingError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// Also pair single-position spans (marginal 1).
    pub include_unit_spans: bool,
    /// Divide by the total marginal mass of both sides.
    pub normalize: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            include_unit_spans: false,
            normalize: true,
        }
    }
}

impl AlignConfig {
    /// Total marginal mass over the spans in play for a length-`n` sequence.
    pub fn mass(&self, n: usize) -> f64 {
        let inner = n.saturating_sub(1) as f64;
        if self.include_unit_spans {
            inner + n as f64
        } else {
            inner
        }
    }

    pub fn normalizer(&self, m: usize, n: usize) -> f64 {
        if self.normalize {
            self.mass(m) * self.mass(n)
        } else {
            1.0
        }
    }
}

/// Prepends `n` unit marginals to `[spans]` marginals when unit spans are on.
pub fn with_unit_spans(g: &Graph, cfg: &AlignConfig, n: usize, marginals: Var) -> Result<Var> {
    if !cfg.include_unit_spans {
        return Ok(marginals);
    }
    let ones = g.constant(Tensor::filled(&[n], 1.0));
    Ok(g.concat(&[ones, marginals], 0)?)
}

/// `S(w, v) = Σ_j Σ_k m_w[j] m_v[k] cos(e_w[j], e_v[k]) / norm`.
pub fn alignment_score(
    g: &Graph,
    lang_marginals: Var,
    vis_marginals: Var,
    lang_embed: Var,
    vis_embed: Var,
    norm: f64,
) -> Result<Var> {
    let (j, k) = (g.value(lang_marginals).len(), g.value(vis_marginals).len());
    let (je, ke) = (g.shape(lang_embed)[0], g.shape(vis_embed)[0]);
    if j != je {
        return Err(GroundingError::Mismatch {
            what: "language",
            left: j,
            right: je,
        });
    }
    if k != ke {
        return Err(GroundingError::Mismatch {
            what: "vision",
            left: k,
            right: ke,
        });
    }
    let cos = g.cosine_matrix(lang_embed, vis_embed)?;
    let mw = g.reshape(lang_marginals, &[1, j])?;
    let mv = g.reshape(vis_marginals, &[k, 1])?;
    let left = g.matmul(mw, cos)?;
    let s = g.matmul(left, mv)?;
    let s = g.reshape(s, &[])?;
    Ok(g.scale(s, 1.0 / norm)?)
}

/// One side of a batch: span marginals `[J]` and span embeddings `[J, d]`.
#[derive(Clone, Copy, Debug)]
pub struct SpanSet {
    pub marginals: Var,
    pub embed: Var,
    /// Sequence length the spans come from.
    pub len: usize,
}

/// `Σ_j m_j ê_j` as a `[1, d]` row, with `ê_j` the unit-normalised embedding.
pub fn pooled_embedding(g: &Graph, set: &SpanSet, what: &'static str) -> Result<Var> {
    let j = g.value(set.marginals).len();
    let je = g.shape(set.embed)[0];
    if j != je {
        return Err(GroundingError::Mismatch {
            what,
            left: j,
            right: je,
        });
    }
    let unit = g.normalize_rows(set.embed)?;
    let m = g.reshape(set.marginals, &[1, j])?;
    Ok(g.matmul(m, unit)?)
}

/// All `B × B` alignment scores at once. Cosine is a dot product of unit
/// vectors, so each score is `pooled_w · pooled_v / norm`.
pub fn score_matrix(g: &Graph, cfg: &AlignConfig, lang: &[SpanSet], vis: &[SpanSet]) -> Result<Var> {
    if lang.len() != vis.len() {
        return Err(GroundingError::Mismatch {
            what: "batch",
            left: lang.len(),
            right: vis.len(),
        });
    }
    let pool = |sets: &[SpanSet], what| -> Result<Var> {
        let rows = sets
            .iter()
            .map(|s| pooled_embedding(g, s, what))
            .collect::<Result<Vec<_>>>()?;
        Ok(g.concat(&rows, 0)?)
    };
    let b = lang.len();
    let a = pool(lang, "language")?;
    let v = pool(vis, "vision")?;
    let raw = g.matmul(a, g.transpose(v)?)?;
    let mut inv = Tensor::zeros(&[b, b]);
    for i in 0..b {
        for k in 0..b {
            inv.data_mut()[i * b + k] = 1.0 / cfg.normalizer(lang[i].len, vis[k].len);
        }
    }
    let inv = g.constant(inv);
    Ok(g.mul(raw, inv)?)
}

/// Bidirectional hinge loss over a `[B, B]` matrix with `S[i][m] = S(w_i, v_m)`,
/// averaged by `2B(B−1)`.
pub fn contrastive_loss(g: &Graph, scores: Var, delta: f64) -> Result<Var> {
    let shape = g.shape(scores);
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(GroundingError::NotSquare(shape));
    }
    let b = shape[0];
    if b < 2 {
        return Err(GroundingError::BatchTooSmall(b));
    }
    let eye = g.constant(Tensor::identity(b));
    let diag = g.mul(scores, eye)?;
    let ones = g.constant(Tensor::filled(&[b, b], 1.0));
    // row i filled with S[i][i]
    let d = g.matmul(diag, ones)?;
    let off = g.constant(Tensor::new(
        vec![b, b],
        (0..b * b).map(|x| if x / b == x % b { 0.0 } else { 1.0 }).collect(),
    )?);
    let st = g.transpose(scores)?;
    let mut parts = Vec::new();
    for m in [st, scores] {
        let t = g.sub(m, d)?;
        let t = g.add_scalar(t, delta)?;
        let t = g.relu(t)?;
        let t = g.mul(t, off)?;
        parts.push(g.sum(t)?);
    }
    let total = g.add(parts[0], parts[1])?;
    Ok(g.scale(total, 1.0 / (2 * b * (b - 1)) as f64)?)
}

/// Plain-value version of [`contrastive_loss`].
pub fn contrastive_loss_value(scores: &[Vec<f64>], delta: f64) -> f64 {
    let b = scores.len();
    let mut total = 0.0;
    for i in 0..b {
        for m in 0..b {
            if m != i {
                total += (scores[m][i] - scores[i][i] + delta).max(0.0);
                total += (scores[i][m] - scores[i][i] + delta).max(0.0);
            }
        }
    }
    total / (2 * b * (b - 1)) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lang: f64,
    pub vis: f64,
    pub contrastive: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lang: 1.0,
            vis: 1.0,
            contrastive: 1.0,
        }
    }
}

/// The three loss terms, their weights and the weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub lang: f64,
    pub vis: f64,
    pub contrastive: f64,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossBundle {
    pub fn new(lang: f64, vis: f64, contrastive: f64, weights: LossWeights) -> Self {
        LossBundle {
            lang,
            vis,
            contrastive,
            weights,
            total: weights.lang * lang + weights.vis * vis + weights.contrastive * contrastive,
        }
    }
}

/// Weighted sum on the tape; terms with zero weight are left out.
pub fn total_loss(g: &Graph, terms: [Option<Var>; 3], weights: &LossWeights) -> Result<Var> {
    let ws = [weights.lang, weights.vis, weights.contrastive];
    let mut parts = Vec::new();
    for (t, w) in terms.into_iter().zip(ws) {
        if let Some(t) = t {
            if w != 0.0 {
                parts.push(g.scale(t, w)?);
            }
        }
    }
    if parts.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    Ok(g.add_n(&parts)?)
}
