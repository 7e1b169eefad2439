//! Span masking and the masked-prediction objective: a cosine-similarity
//! predictor head over discrete units and the negative log-likelihood summed
//! over masked frames.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{FeatureSeq, FrameLabels};
use crate::numkit::{log_softmax_rows, Graph, NumkitError, Tensor, VarId};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("mask length {mask} does not match frame count {frames}")]
    MaskLengthMismatch { mask: usize, frames: usize },
    #[error("label length {labels} does not match frame count {frames}")]
    LabelLengthMismatch { labels: usize, frames: usize },
    #[error("label id {id} out of range for {num_units} units")]
    LabelOutOfRange { id: usize, num_units: usize },
    #[error("feature dim {feature} does not match head input dim {head}")]
    DimMismatch { feature: usize, head: usize },
    #[error("predictor head invalid: {0}")]
    BadHead(String),
    #[error(transparent)]
    Numkit(#[from] NumkitError),
}

/// Span-mask sampling parameters: every frame is independently selected as a
/// span start with probability `start_prob`, masking the next `span_len`
/// frames.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaskSpec {
    pub start_prob: f64,
    pub span_len: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            start_prob: 0.08,
            span_len: 10,
        }
    }
}

/// Boolean mask over the frames of one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    flags: Vec<bool>,
}

impl MaskSet {
    pub fn from_flags(flags: Vec<bool>) -> Self {
        Self { flags }
    }

    pub fn none(len: usize) -> Self {
        Self {
            flags: vec![false; len],
        }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn is_masked(&self, t: usize) -> bool {
        self.flags[t]
    }

    pub fn num_masked(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        self.flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }
}

/// Sample a span mask. Spans may overlap (the union is masked) and are
/// truncated at the sequence end. Reproducible bit-exactly per seed.
pub fn sample_mask(num_frames: usize, spec: &MaskSpec, seed: u64) -> MaskSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flags = vec![false; num_frames];
    for start in 0..num_frames {
        if rng.random::<f64>() < spec.start_prob {
            let end = (start + spec.span_len).min(num_frames);
            for f in &mut flags[start..end] {
                *f = true;
            }
        }
    }
    MaskSet { flags }
}

/// Projection, code embeddings, and temperature of the unit predictor.
#[derive(Debug, Clone)]
pub struct PredictorHead {
    pub projection: Tensor,      // model_dim x embed_dim
    pub code_embeddings: Tensor, // num_units x embed_dim
    pub temperature: f64,
}

impl PredictorHead {
    pub fn new(
        projection: Tensor,
        code_embeddings: Tensor,
        temperature: f64,
    ) -> Result<Self, ObjectiveError> {
        if projection.rank() != 2 || code_embeddings.rank() != 2 {
            return Err(ObjectiveError::BadHead("projection and embeddings must be 2-D".into()));
        }
        if projection.shape()[1] != code_embeddings.shape()[1] {
            return Err(ObjectiveError::BadHead(format!(
                "embed dims differ: projection {:?} vs embeddings {:?}",
                projection.shape(),
                code_embeddings.shape()
            )));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(ObjectiveError::BadHead(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self {
            projection,
            code_embeddings,
            temperature,
        })
    }

    /// Seeded Gaussian init.
    pub fn init(
        model_dim: usize,
        embed_dim: usize,
        num_units: usize,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, ObjectiveError> {
        Self::new(
            Tensor::randn(vec![model_dim, embed_dim], 0.1, rng),
            Tensor::randn(vec![num_units, embed_dim], 0.1, rng),
            temperature,
        )
    }

    pub fn model_dim(&self) -> usize {
        self.projection.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.shape()[1]
    }

    pub fn num_units(&self) -> usize {
        self.code_embeddings.shape()[0]
    }
}

fn check_dims(h: &FeatureSeq, head: &PredictorHead) -> Result<(), ObjectiveError> {
    if h.dim() != head.model_dim() {
        return Err(ObjectiveError::DimMismatch {
            feature: h.dim(),
            head: head.model_dim(),
        });
    }
    Ok(())
}

/// Cosine-similarity logits `sim(W h_t, e_c) / temperature` for every frame
/// and unit.
fn cosine_logits(h: &FeatureSeq, head: &PredictorHead) -> Result<Tensor, ObjectiveError> {
    check_dims(h, head)?;
    let proj = h.frames().matmul(&head.projection)?;
    let (t_len, e_dim) = (proj.rows(), proj.cols());
    let c_len = head.num_units();
    let emb = &head.code_embeddings;
    let mut emb_norms = vec![0.0; c_len];
    for c in 0..c_len {
        let n: f64 = emb.row(c).iter().map(|v| v * v).sum();
        if n == 0.0 {
            return Err(ObjectiveError::Numkit(NumkitError::ZeroNorm));
        }
        emb_norms[c] = n.sqrt();
    }
    let mut logits = vec![0.0; t_len * c_len];
    for t in 0..t_len {
        let p = proj.row(t);
        let pn: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        if pn == 0.0 {
            return Err(ObjectiveError::Numkit(NumkitError::ZeroNorm));
        }
        for c in 0..c_len {
            let mut dot = 0.0;
            let e = emb.row(c);
            for d in 0..e_dim {
                dot += p[d] * e[d];
            }
            logits[t * c_len + c] = dot / (pn * emb_norms[c]) / head.temperature;
        }
    }
    Ok(Tensor::from_vec(vec![t_len, c_len], logits)?)
}

/// Distribution over units per frame: row-wise softmax of the cosine logits.
pub fn unit_distribution(h: &FeatureSeq, head: &PredictorHead) -> Result<Tensor, ObjectiveError> {
    let logits = cosine_logits(h, head)?;
    Ok(crate::numkit::softmax_rows(&logits, 1.0)?)
}

/// Masked-prediction loss: `-sum over masked t of log p(z_t | h_t)`.
/// Returns 0 when the mask is empty.
pub fn masked_nll(
    h: &FeatureSeq,
    z: &FrameLabels,
    m: &MaskSet,
    head: &PredictorHead,
) -> Result<f64, ObjectiveError> {
    if z.len() != h.num_frames() {
        return Err(ObjectiveError::LabelLengthMismatch {
            labels: z.len(),
            frames: h.num_frames(),
        });
    }
    if m.len() != h.num_frames() {
        return Err(ObjectiveError::MaskLengthMismatch {
            mask: m.len(),
            frames: h.num_frames(),
        });
    }
    for &id in z.ids() {
        if id >= head.num_units() {
            return Err(ObjectiveError::LabelOutOfRange {
                id,
                num_units: head.num_units(),
            });
        }
    }
    let logits = cosine_logits(h, head)?;
    let logp = log_softmax_rows(&logits, 1.0)?;
    let mut loss = 0.0;
    for (t, &id) in z.ids().iter().enumerate() {
        if m.is_masked(t) {
            loss -= logp.at2(t, id);
        }
    }
    Ok(loss)
}

/// Per-frame argmax of the unit distribution; ties break to the lowest id.
pub fn predict_units(h: &FeatureSeq, head: &PredictorHead) -> Result<FrameLabels, ObjectiveError> {
    let logits = cosine_logits(h, head)?;
    let c_len = head.num_units();
    let mut ids = Vec::with_capacity(logits.rows());
    for t in 0..logits.rows() {
        let row = logits.row(t);
        let mut best = 0;
        for c in 1..c_len {
            if row[c] > row[best] {
                best = c;
            }
        }
        ids.push(best);
    }
    Ok(FrameLabels::new("", ids, c_len).expect("argmax ids are in range"))
}

// ---------------------------------------------------------------------------
// Graph builders for training.
// ---------------------------------------------------------------------------

/// Graph-resident head parameters.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub projection: VarId,
    pub embeddings: VarId,
    pub temperature: f64,
}

/// Normalize the rows of a 2-D node to unit L2 norm.
pub fn normalize_rows_graph(g: &mut Graph, x: VarId) -> Result<VarId, NumkitError> {
    let cols = g.value(x).cols();
    let sq = g.mul(x, x)?;
    let rs = g.row_sum(sq)?;
    let norm = g.sqrt(rs)?;
    let inv = g.recip(norm)?;
    let invb = g.broadcast_col(inv, cols)?;
    g.mul(x, invb)
}

/// Cosine logits node: `T x C` matrix of `cos(W h_t, e_c) / temperature`.
pub fn cosine_logits_graph(g: &mut Graph, h: VarId, head: &HeadVars) -> Result<VarId, NumkitError> {
    let proj = g.matmul(h, head.projection)?;
    let pn = normalize_rows_graph(g, proj)?;
    let en = normalize_rows_graph(g, head.embeddings)?;
    let et = g.transpose(en)?;
    let cos = g.matmul(pn, et)?;
    g.scale(cos, 1.0 / head.temperature)
}

/// Differentiable unit distribution (Eq. 1 path) as a graph node.
pub fn unit_distribution_graph(
    g: &mut Graph,
    h: VarId,
    head: &HeadVars,
) -> Result<VarId, NumkitError> {
    let logits = cosine_logits_graph(g, h, head)?;
    g.softmax(logits, 1.0)
}

/// Differentiable masked NLL as a graph node (scalar).
pub fn masked_nll_graph(
    g: &mut Graph,
    h: VarId,
    z: &FrameLabels,
    m: &MaskSet,
    head: &HeadVars,
) -> Result<VarId, ObjectiveError> {
    let t_len = g.value(h).rows();
    if z.len() != t_len {
        return Err(ObjectiveError::LabelLengthMismatch {
            labels: z.len(),
            frames: t_len,
        });
    }
    if m.len() != t_len {
        return Err(ObjectiveError::MaskLengthMismatch {
            mask: m.len(),
            frames: t_len,
        });
    }
    let num_units = g.value(head.embeddings).rows();
    let mut coords = Vec::with_capacity(m.num_masked());
    for (t, &id) in z.ids().iter().enumerate() {
        if id >= num_units {
            return Err(ObjectiveError::LabelOutOfRange { id, num_units });
        }
        if m.is_masked(t) {
            coords.push((t, id));
        }
    }
    let logits = cosine_logits_graph(g, h, head)?;
    let logp = g.log_softmax(logits, 1.0)?;
    let picked = g.gather_sum(logp, Rc::new(coords))?;
    Ok(g.scale(picked, -1.0)?)
}
