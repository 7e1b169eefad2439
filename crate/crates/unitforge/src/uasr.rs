//! Adversarial unsupervised phoneme labeling: a convolutional generator maps
//! feature frames to phoneme distributions and a convolutional discriminator
//! scores them against unpaired phoneme text. Training combines the
//! adversarial game with a gradient penalty on the discriminator and three
//! generator-side regularizers (segment smoothness, phoneme diversity, and an
//! auxiliary cluster-prediction task).
//!
//! After training, only the generator is used: run at stride 1 with
//! deduplication disabled it emits one phoneme id per input frame, which is
//! exactly the frame-aligned target sequence masked-prediction training needs.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{FeatureSeq, FrameLabels};
use crate::numkit::{
    adam_step, AdamConfig, AdamState, Graph, NumkitError, Tensor, VarId,
};
use crate::units::kmeans::{kmeans_fit, KMeansModel};

#[derive(Debug, Error)]
pub enum UasrError {
    #[error("bad uasr config: {0}")]
    BadConfig(String),
    #[error("empty {0}")]
    EmptyInput(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sequence of {frames} frames is shorter than the generator receptive field {receptive_field}")]
    TooShort {
        frames: usize,
        receptive_field: usize,
    },
    #[error("non-finite loss at step {step} in {term}")]
    NonFinite { step: usize, term: &'static str },
    #[error(transparent)]
    Numkit(#[from] NumkitError),
    #[error("k-means for the auxiliary task failed: {0}")]
    Aux(String),
}

/// Loss weights of the adversarial objective: gradient penalty, segment
/// smoothness, phoneme diversity, and the auxiliary self-supervised task.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct UasrWeights {
    pub lambda_gp: f64,
    pub gamma_sp: f64,
    pub eta_pd: f64,
    pub delta_ss: f64,
}

impl Default for UasrWeights {
    fn default() -> Self {
        Self {
            lambda_gp: 1.5,
            gamma_sp: 0.5,
            eta_pd: 3.0,
            delta_ss: 0.3,
        }
    }
}

impl UasrWeights {
    pub fn validate(&self) -> Result<(), UasrError> {
        for (name, v) in [
            ("lambda_gp", self.lambda_gp),
            ("gamma_sp", self.gamma_sp),
            ("eta_pd", self.eta_pd),
            ("delta_ss", self.delta_ss),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(UasrError::BadConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unpaired phoneme id sequences with no alignment to any audio.
#[derive(Debug, Clone)]
pub struct UnpairedText {
    sequences: Vec<Vec<usize>>,
    vocab_size: usize,
}

impl UnpairedText {
    pub fn new(sequences: Vec<Vec<usize>>, vocab_size: usize) -> Result<Self, UasrError> {
        if sequences.is_empty() {
            return Err(UasrError::EmptyInput("text corpus"));
        }
        for seq in &sequences {
            if seq.is_empty() {
                return Err(UasrError::EmptyInput("text sequence"));
            }
            if let Some(&id) = seq.iter().find(|&&id| id >= vocab_size) {
                return Err(UasrError::BadConfig(format!(
                    "text id {id} out of range for vocab {vocab_size}"
                )));
            }
        }
        Ok(Self {
            sequences,
            vocab_size,
        })
    }

    pub fn sequences(&self) -> &[Vec<usize>] {
        &self.sequences
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

/// Insert the silence token at each boundary (both ends included) with
/// probability `p_sil`, preserving the original order.
pub fn insert_silence(
    seq: &[usize],
    silence_id: usize,
    p_sil: f64,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(2 * seq.len() + 1);
    for &id in seq {
        if rng.random::<f64>() < p_sil {
            out.push(silence_id);
        }
        out.push(id);
    }
    if rng.random::<f64>() < p_sil {
        out.push(silence_id);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UasrConfig {
    /// Generator output classes (the phoneme inventory size).
    pub inventory_size: usize,
    pub silence_id: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    /// Generator conv kernel width; its receptive field in frames.
    pub kernel: usize,
    /// Stride used during adversarial training; inference overrides it to 1.
    pub train_stride: usize,
    pub disc_hidden: usize,
    pub disc_kernel: usize,
    /// Cluster count for the auxiliary self-supervised task.
    pub aux_clusters: usize,
    pub weights: UasrWeights,
    pub p_sil: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub gen_lr: f64,
    pub disc_lr: f64,
    pub adam: AdamConfig,
}

impl UasrConfig {
    pub fn desk(feature_dim: usize) -> Self {
        Self {
            inventory_size: 40,
            silence_id: 0,
            feature_dim,
            hidden_dim: 64,
            kernel: 4,
            train_stride: 3,
            disc_hidden: 48,
            disc_kernel: 3,
            aux_clusters: 16,
            weights: UasrWeights::default(),
            p_sil: 0.25,
            steps: 400,
            batch_size: 8,
            gen_lr: 4e-4,
            disc_lr: 3e-4,
            adam: AdamConfig {
                beta1: 0.5,
                beta2: 0.98,
                eps: 1e-6,
                weight_decay: 1e-4,
            },
        }
    }

    pub fn validate(&self) -> Result<(), UasrError> {
        if self.inventory_size == 0 || self.silence_id >= self.inventory_size {
            return Err(UasrError::BadConfig("bad inventory/silence".into()));
        }
        if self.kernel == 0 || self.train_stride == 0 || self.disc_kernel == 0 {
            return Err(UasrError::BadConfig("kernels and strides must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_sil) {
            return Err(UasrError::BadConfig(format!("p_sil {} outside [0,1]", self.p_sil)));
        }
        self.weights.validate()?;
        Ok(())
    }
}

/// Convolutional generator: strided conv + relu + 1x1 conv to inventory
/// logits, plus a linear head over the hidden layer for the auxiliary task.
#[derive(Debug, Clone)]
pub struct Generator {
    pub hidden_w: Tensor, // kernel x D x H
    pub hidden_b: Tensor, // 1 x H
    pub out_w: Tensor,    // H x C
    pub out_b: Tensor,    // 1 x C
    pub aux_w: Tensor,    // H x K
    pub aux_b: Tensor,    // 1 x K
    pub train_stride: usize,
}

impl Generator {
    pub fn init(cfg: &UasrConfig, rng: &mut impl Rng) -> Self {
        let (d, h, c, k) = (
            cfg.feature_dim,
            cfg.hidden_dim,
            cfg.inventory_size,
            cfg.kernel,
        );
        Self {
            hidden_w: Tensor::randn(vec![k, d, h], 1.0 / ((k * d) as f64).sqrt(), rng),
            hidden_b: Tensor::zeros(vec![1, h]),
            out_w: Tensor::randn(vec![h, c], 1.0 / (h as f64).sqrt(), rng),
            out_b: Tensor::zeros(vec![1, c]),
            aux_w: Tensor::randn(vec![h, cfg.aux_clusters], 1.0 / (h as f64).sqrt(), rng),
            aux_b: Tensor::zeros(vec![1, cfg.aux_clusters]),
            train_stride: cfg.train_stride,
        }
    }

    pub fn receptive_field(&self) -> usize {
        self.hidden_w.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.out_w.shape()[1]
    }

    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.hidden_w,
            &self.hidden_b,
            &self.out_w,
            &self.out_b,
            &self.aux_w,
            &self.aux_b,
        ]
    }

    fn tensors_vec(&self) -> Vec<Tensor> {
        self.tensors().into_iter().cloned().collect()
    }

    fn set_tensors(&mut self, tensors: Vec<Tensor>) {
        let mut it = tensors.into_iter();
        self.hidden_w = it.next().unwrap();
        self.hidden_b = it.next().unwrap();
        self.out_w = it.next().unwrap();
        self.out_b = it.next().unwrap();
        self.aux_w = it.next().unwrap();
        self.aux_b = it.next().unwrap();
    }
}

/// Generator parameters as graph leaves.
#[derive(Debug, Clone, Copy)]
pub struct GenVars {
    pub hidden_w: VarId,
    pub hidden_b: VarId,
    pub out_w: VarId,
    pub out_b: VarId,
    pub aux_w: VarId,
    pub aux_b: VarId,
}

impl GenVars {
    pub fn insert(g: &mut Graph, gen: &Generator) -> Self {
        Self {
            hidden_w: g.leaf(gen.hidden_w.clone()),
            hidden_b: g.leaf(gen.hidden_b.clone()),
            out_w: g.leaf(gen.out_w.clone()),
            out_b: g.leaf(gen.out_b.clone()),
            aux_w: g.leaf(gen.aux_w.clone()),
            aux_b: g.leaf(gen.aux_b.clone()),
        }
    }

    fn all(&self) -> Vec<VarId> {
        vec![
            self.hidden_w,
            self.hidden_b,
            self.out_w,
            self.out_b,
            self.aux_w,
            self.aux_b,
        ]
    }
}

/// Forward through the generator at `stride`: returns `(logits, hidden)`
/// nodes of shapes `T' x C` and `T' x H`.
pub fn generator_forward_graph(
    g: &mut Graph,
    vars: &GenVars,
    frames: VarId,
    stride: usize,
) -> Result<(VarId, VarId), UasrError> {
    let t_len = g.value(frames).rows();
    let k = g.value(vars.hidden_w).shape()[0];
    if t_len < k {
        return Err(UasrError::TooShort {
            frames: t_len,
            receptive_field: k,
        });
    }
    let conv = g.conv1d(frames, vars.hidden_w, stride)?;
    let rows = g.value(conv).rows();
    let hb = g.broadcast_row(vars.hidden_b, rows)?;
    let pre = g.add(conv, hb)?;
    let hidden = g.relu(pre)?;
    let logits = g.matmul(hidden, vars.out_w)?;
    let ob = g.broadcast_row(vars.out_b, rows)?;
    let logits = g.add(logits, ob)?;
    Ok((logits, hidden))
}

/// Plain-value generator logits. `stride_override` switches the inference
/// stride without touching the weights.
pub fn generator_forward(
    gen: &Generator,
    feats: &FeatureSeq,
    stride_override: Option<usize>,
) -> Result<Tensor, UasrError> {
    let stride = stride_override.unwrap_or(gen.train_stride);
    if stride == 0 {
        return Err(UasrError::BadConfig("stride must be positive".into()));
    }
    let mut g = Graph::new();
    let vars = GenVars::insert(&mut g, gen);
    let frames = g.leaf(feats.frames().clone());
    let (logits, _) = generator_forward_graph(&mut g, &vars, frames, stride)?;
    Ok(g.value(logits).clone())
}

/// Convolutional discriminator over phoneme-probability sequences.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub w1: Tensor, // kernel x C x H
    pub b1: Tensor, // 1 x H
    pub w2: Tensor, // H x 1
    pub b2: Tensor, // 1 x 1
}

impl Discriminator {
    pub fn init(cfg: &UasrConfig, rng: &mut impl Rng) -> Self {
        let (c, h, k) = (cfg.inventory_size, cfg.disc_hidden, cfg.disc_kernel);
        Self {
            w1: Tensor::randn(vec![k, c, h], 1.0 / ((k * c) as f64).sqrt(), rng),
            b1: Tensor::zeros(vec![1, h]),
            w2: Tensor::randn(vec![h, 1], 1.0 / (h as f64).sqrt(), rng),
            b2: Tensor::zeros(vec![1, 1]),
        }
    }

    pub fn receptive_field(&self) -> usize {
        self.w1.shape()[0]
    }

    fn tensors_vec(&self) -> Vec<Tensor> {
        vec![
            self.w1.clone(),
            self.b1.clone(),
            self.w2.clone(),
            self.b2.clone(),
        ]
    }

    fn set_tensors(&mut self, tensors: Vec<Tensor>) {
        let mut it = tensors.into_iter();
        self.w1 = it.next().unwrap();
        self.b1 = it.next().unwrap();
        self.w2 = it.next().unwrap();
        self.b2 = it.next().unwrap();
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DiscVars {
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
}

impl DiscVars {
    pub fn insert(g: &mut Graph, d: &Discriminator) -> Self {
        Self {
            w1: g.leaf(d.w1.clone()),
            b1: g.leaf(d.b1.clone()),
            w2: g.leaf(d.w2.clone()),
            b2: g.leaf(d.b2.clone()),
        }
    }

    fn all(&self) -> Vec<VarId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

/// Scalar realness logit for one probability sequence: conv + tanh + linear,
/// mean-pooled over time.
pub fn disc_score_graph(g: &mut Graph, vars: &DiscVars, probs: VarId) -> Result<VarId, UasrError> {
    let t_len = g.value(probs).rows();
    let k = g.value(vars.w1).shape()[0];
    if t_len < k {
        return Err(UasrError::TooShort {
            frames: t_len,
            receptive_field: k,
        });
    }
    let conv = g.conv1d(probs, vars.w1, 1)?;
    let rows = g.value(conv).rows();
    let b1 = g.broadcast_row(vars.b1, rows)?;
    let pre = g.add(conv, b1)?;
    let act = g.tanh(pre)?;
    let scores = g.matmul(act, vars.w2)?;
    let pooled = g.sum_all(scores)?;
    let pooled = g.scale(pooled, 1.0 / rows as f64)?;
    Ok(g.add(pooled, vars.b2)?)
}

/// Sum of squared differences between adjacent output frames.
pub fn segment_smoothness_graph(g: &mut Graph, probs: VarId) -> Result<VarId, UasrError> {
    let t_len = g.value(probs).rows();
    if t_len < 2 {
        return Err(UasrError::ShapeMismatch(format!(
            "segment smoothness needs >= 2 frames, got {t_len}"
        )));
    }
    let a = g.slice_rows(probs, 0, t_len - 1)?;
    let b = g.slice_rows(probs, 1, t_len - 1)?;
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    Ok(g.sum_all(sq)?)
}

/// Negative entropy of the batch-averaged class usage; bounded below by
/// `-ln(C)`, maximized (0) when all mass sits on one class.
pub fn phoneme_diversity_graph(g: &mut Graph, probs_batch: &[VarId]) -> Result<VarId, UasrError> {
    if probs_batch.is_empty() {
        return Err(UasrError::EmptyInput("probability batch"));
    }
    let mut total: Option<VarId> = None;
    let mut frames = 0usize;
    for &p in probs_batch {
        frames += g.value(p).rows();
        let s = g.col_sum(p)?;
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let mean = g.scale(total.expect("nonempty batch"), 1.0 / frames as f64)?;
    // The shift keeps ln finite when a class has exactly zero mass; for any
    // softmax output it is far below one ulp.
    let shifted = g.add_scalar(mean, 1e-300)?;
    let logp = g.ln(shifted)?;
    let plogp = g.mul(mean, logp)?;
    Ok(g.sum_all(plogp)?)
}

/// Mean cross-entropy of predicting per-position cluster ids from the
/// generator's hidden layer.
pub fn aux_ssl_loss_graph(
    g: &mut Graph,
    hidden: VarId,
    aux_w: VarId,
    aux_b: VarId,
    targets: &[usize],
) -> Result<VarId, UasrError> {
    let rows = g.value(hidden).rows();
    if targets.len() != rows {
        return Err(UasrError::ShapeMismatch(format!(
            "{} aux targets for {} hidden frames",
            targets.len(),
            rows
        )));
    }
    let k = g.value(aux_w).cols();
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(UasrError::ShapeMismatch(format!(
            "aux target {bad} out of range for {k} clusters"
        )));
    }
    let logits = g.matmul(hidden, aux_w)?;
    let b = g.broadcast_row(aux_b, rows)?;
    let logits = g.add(logits, b)?;
    let logp = g.log_softmax(logits, 1.0)?;
    let coords: Vec<(usize, usize)> = targets.iter().enumerate().map(|(i, &t)| (i, t)).collect();
    let picked = g.gather_sum(logp, Rc::new(coords))?;
    Ok(g.scale(picked, -1.0 / rows as f64)?)
}

/// WGAN-style gradient penalty `(||grad_x D(x_interp)||_2 - 1)^2` at a random
/// interpolate of one real/fake pair. Differentiable in the discriminator
/// parameters because gradients are graph nodes themselves.
pub fn gradient_penalty_pair_graph(
    g: &mut Graph,
    vars: &DiscVars,
    real: &Tensor,
    fake: &Tensor,
    alpha: f64,
) -> Result<VarId, UasrError> {
    if real.shape() != fake.shape() {
        return Err(UasrError::ShapeMismatch(format!(
            "gradient penalty on {:?} vs {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    let r = g.leaf(real.clone());
    let f = g.leaf(fake.clone());
    let ra = g.scale(r, alpha)?;
    let fa = g.scale(f, 1.0 - alpha)?;
    let interp = g.add(ra, fa)?;
    let score = disc_score_graph(g, vars, interp)?;
    let grad = g.backward(score, &[interp])?[0];
    let sq = g.mul(grad, grad)?;
    let norm_sq = g.sum_all(sq)?;
    let norm = g.sqrt(norm_sq)?;
    let centered = g.add_scalar(norm, -1.0)?;
    Ok(g.mul(centered, centered)?)
}

/// Mean gradient penalty over a batch of same-shape real/fake pairs.
pub fn gradient_penalty(
    d: &Discriminator,
    real_batch: &[Tensor],
    fake_batch: &[Tensor],
    rng: &mut impl Rng,
) -> Result<f64, UasrError> {
    if real_batch.is_empty() || real_batch.len() != fake_batch.len() {
        return Err(UasrError::ShapeMismatch(format!(
            "{} real vs {} fake sequences",
            real_batch.len(),
            fake_batch.len()
        )));
    }
    let mut g = Graph::new();
    let vars = DiscVars::insert(&mut g, d);
    let mut acc = 0.0;
    for (r, f) in real_batch.iter().zip(fake_batch) {
        let alpha: f64 = rng.random();
        let pen = gradient_penalty_pair_graph(&mut g, &vars, r, f, alpha)?;
        acc += g.value(pen).scalar_value()?;
    }
    Ok(acc / real_batch.len() as f64)
}

/// One-hot probability matrix for a phoneme id sequence.
pub fn one_hot(seq: &[usize], num_classes: usize) -> Result<Tensor, UasrError> {
    let mut data = vec![0.0; seq.len() * num_classes];
    for (t, &id) in seq.iter().enumerate() {
        if id >= num_classes {
            return Err(UasrError::BadConfig(format!(
                "id {id} out of range for {num_classes} classes"
            )));
        }
        data[t * num_classes + id] = 1.0;
    }
    Ok(Tensor::from_vec(vec![seq.len(), num_classes], data)
        .expect("one_hot shape is consistent"))
}

/// Per-step loss breakdown. `d_total` and `g_total` are the scalars actually
/// optimized; the term fields are unweighted.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub d_total: f64,
    pub d_real: f64,
    pub d_fake: f64,
    pub grad_pen: f64,
    pub g_total: f64,
    pub g_adv: f64,
    pub seg_smooth: f64,
    pub pho_div: f64,
    pub aux_ssl: f64,
}

/// Trained models plus the per-step loss log.
#[derive(Debug, Clone)]
pub struct TrainedUasr {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub log: Vec<StepReport>,
}

/// Divergence failure carrying the last finite checkpoint.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: UasrError,
    pub last_good: Option<Box<TrainedUasr>>,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl std::error::Error for TrainFailure {}

/// One discriminator update followed by one generator update.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_step(
    audio: &[StepInput<'_>],
    text: &[Vec<usize>],
    gen: &mut Generator,
    disc: &mut Discriminator,
    gen_state: &mut AdamState,
    disc_state: &mut AdamState,
    cfg: &UasrConfig,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StepReport, UasrError> {
    if audio.is_empty() || text.is_empty() {
        return Err(UasrError::EmptyInput("batch"));
    }
    let w = &cfg.weights;
    let c_classes = cfg.inventory_size;

    // Silence-augmented one-hot real sequences for this step.
    let reals: Vec<Tensor> = text
        .iter()
        .map(|seq| {
            let with_sil = insert_silence(seq, cfg.silence_id, cfg.p_sil, rng);
            one_hot(&with_sil, c_classes)
        })
        .collect::<Result<_, _>>()?;

    // Detached fake probabilities for the discriminator update.
    let fakes: Vec<Tensor> = audio
        .iter()
        .map(|inp| {
            let logits = generator_forward(gen, inp.feats, None)?;
            Ok(crate::numkit::softmax_rows(&logits, 1.0)?)
        })
        .collect::<Result<_, UasrError>>()?;

    // -- discriminator update ------------------------------------------------
    let (d_total, d_real_mean, d_fake_mean, gp_mean) = {
        let mut g = Graph::new();
        let dv = DiscVars::insert(&mut g, disc);
        let n = reals.len().min(fakes.len());
        let mut loss_acc: Option<VarId> = None;
        let mut gp_acc: Option<VarId> = None;
        let (mut real_sum, mut fake_sum) = (0.0, 0.0);
        let min_len = disc.receptive_field();
        for i in 0..n {
            let (real, fake) = (&reals[i], &fakes[i]);
            let keep = real.rows().min(fake.rows());
            if keep < min_len {
                return Err(UasrError::TooShort {
                    frames: keep,
                    receptive_field: min_len,
                });
            }
            let real_c = crop_rows(real, keep);
            let fake_c = crop_rows(fake, keep);
            let r = g.leaf(real_c.clone());
            let f = g.leaf(fake_c.clone());
            let s_real = disc_score_graph(&mut g, &dv, r)?;
            let s_fake = disc_score_graph(&mut g, &dv, f)?;
            real_sum += g.value(s_real).scalar_value()?;
            fake_sum += g.value(s_fake).scalar_value()?;
            let neg_real = g.scale(s_real, -1.0)?;
            let l_real = g.softplus(neg_real)?;
            let l_fake = g.softplus(s_fake)?;
            let pair = g.add(l_real, l_fake)?;
            loss_acc = Some(match loss_acc {
                Some(acc) => g.add(acc, pair)?,
                None => pair,
            });
            let alpha: f64 = rng.random();
            let pen = gradient_penalty_pair_graph(&mut g, &dv, &real_c, &fake_c, alpha)?;
            gp_acc = Some(match gp_acc {
                Some(acc) => g.add(acc, pen)?,
                None => pen,
            });
        }
        let adv = g.scale(loss_acc.expect("nonempty batch"), 1.0 / n as f64)?;
        let gp = g.scale(gp_acc.expect("nonempty batch"), 1.0 / n as f64)?;
        let gp_w = g.scale(gp, w.lambda_gp)?;
        let total = g.add(adv, gp_w)?;
        let wrt = dv.all();
        let grad_ids = g.backward(total, &wrt)?;
        let grads: Vec<Tensor> = grad_ids.iter().map(|&id| g.value(id).clone()).collect();
        let mut params = disc.tensors_vec();
        adam_step(&mut params, &grads, disc_state, cfg.disc_lr)?;
        disc.set_tensors(params);
        (
            g.value(total).scalar_value()?,
            real_sum / n as f64,
            fake_sum / n as f64,
            g.value(gp).scalar_value()?,
        )
    };

    // -- generator update ----------------------------------------------------
    let (g_total, g_adv, sp, pd, ss) = {
        let mut g = Graph::new();
        let gv = GenVars::insert(&mut g, gen);
        let dv = DiscVars::insert(&mut g, disc);
        let mut fake_probs = Vec::with_capacity(audio.len());
        let mut adv_acc: Option<VarId> = None;
        let mut sp_acc: Option<VarId> = None;
        let mut sp_boundaries = 0usize;
        let mut ss_acc: Option<VarId> = None;
        for inp in audio {
            let frames = g.leaf(inp.feats.frames().clone());
            let (logits, hidden) = generator_forward_graph(&mut g, &gv, frames, gen.train_stride)?;
            let probs = g.softmax(logits, 1.0)?;
            fake_probs.push(probs);
            let score = disc_score_graph(&mut g, &dv, probs)?;
            let neg = g.scale(score, -1.0)?;
            let adv = g.softplus(neg)?;
            adv_acc = Some(match adv_acc {
                Some(acc) => g.add(acc, adv)?,
                None => adv,
            });
            let rows = g.value(probs).rows();
            if rows >= 2 {
                let s = segment_smoothness_graph(&mut g, probs)?;
                sp_boundaries += rows - 1;
                sp_acc = Some(match sp_acc {
                    Some(acc) => g.add(acc, s)?,
                    None => s,
                });
            }
            let aux = aux_ssl_loss_graph(&mut g, hidden, gv.aux_w, gv.aux_b, &inp.aux_targets)?;
            ss_acc = Some(match ss_acc {
                Some(acc) => g.add(acc, aux)?,
                None => aux,
            });
        }
        let n = audio.len() as f64;
        let adv = g.scale(adv_acc.expect("nonempty"), 1.0 / n)?;
        let sp = match sp_acc {
            Some(acc) => g.scale(acc, 1.0 / sp_boundaries.max(1) as f64)?,
            None => g.leaf(Tensor::scalar(0.0)),
        };
        let pd = phoneme_diversity_graph(&mut g, &fake_probs)?;
        let ss = g.scale(ss_acc.expect("nonempty"), 1.0 / n)?;
        let sp_w = g.scale(sp, w.gamma_sp)?;
        let pd_w = g.scale(pd, w.eta_pd)?;
        let ss_w = g.scale(ss, w.delta_ss)?;
        let t1 = g.add(adv, sp_w)?;
        let t2 = g.add(t1, pd_w)?;
        let total = g.add(t2, ss_w)?;
        let wrt = gv.all();
        let grad_ids = g.backward(total, &wrt)?;
        let grads: Vec<Tensor> = grad_ids.iter().map(|&id| g.value(id).clone()).collect();
        let mut params = gen.tensors_vec();
        adam_step(&mut params, &grads, gen_state, cfg.gen_lr)?;
        gen.set_tensors(params);
        (
            g.value(total).scalar_value()?,
            g.value(adv).scalar_value()?,
            g.value(sp).scalar_value()?,
            g.value(pd).scalar_value()?,
            g.value(ss).scalar_value()?,
        )
    };

    let report = StepReport {
        step,
        d_total,
        d_real: d_real_mean,
        d_fake: d_fake_mean,
        grad_pen: gp_mean,
        g_total,
        g_adv,
        seg_smooth: sp,
        pho_div: pd,
        aux_ssl: ss,
    };
    for (term, v) in [
        ("d_total", report.d_total),
        ("g_total", report.g_total),
    ] {
        if !v.is_finite() {
            return Err(UasrError::NonFinite { step, term });
        }
    }
    Ok(report)
}

/// One audio item of a training batch: the features plus precomputed
/// auxiliary cluster targets aligned to the generator's hidden positions at
/// the training stride.
pub struct StepInput<'a> {
    pub feats: &'a FeatureSeq,
    pub aux_targets: Vec<usize>,
}

/// Cluster id of the input frame at the center of each conv window.
pub fn aux_targets_for(
    feats: &FeatureSeq,
    model: &KMeansModel,
    kernel: usize,
    stride: usize,
) -> Vec<usize> {
    let t = feats.num_frames();
    if t < kernel {
        return Vec::new();
    }
    let t_out = (t - kernel) / stride + 1;
    let offset = (kernel - 1) / 2;
    (0..t_out)
        .map(|j| model.nearest(feats.frame(j * stride + offset)))
        .collect()
}

/// Train the adversarial labeler. Deterministic per seed; on NaN divergence
/// the error carries the last finite models.
pub fn train_uasr(
    corpus: &[FeatureSeq],
    text: &UnpairedText,
    cfg: &UasrConfig,
    seed: u64,
) -> Result<TrainedUasr, TrainFailure> {
    let wrap = |error: UasrError| TrainFailure {
        error,
        last_good: None,
    };
    cfg.validate().map_err(wrap)?;
    if corpus.is_empty() {
        return Err(wrap(UasrError::EmptyInput("audio corpus")));
    }
    if text.vocab_size() != cfg.inventory_size {
        return Err(wrap(UasrError::BadConfig(format!(
            "text vocab {} != inventory {}",
            text.vocab_size(),
            cfg.inventory_size
        ))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Fit the auxiliary cluster model on a subsample of input frames.
    let mut points = Vec::new();
    let dim = corpus[0].dim();
    for feats in corpus {
        for t in 0..feats.num_frames() {
            points.extend_from_slice(feats.frame(t));
        }
    }
    let n_points = points.len() / dim;
    let k = cfg.aux_clusters.min(n_points);
    let aux_model = kmeans_fit(&points, dim, k, seed ^ 0x9e3779b97f4a7c15, 25, 1e-9)
        .map_err(|e| wrap(UasrError::Aux(e.to_string())))?;
    let aux_targets: Vec<Vec<usize>> = corpus
        .iter()
        .map(|f| aux_targets_for(f, &aux_model, cfg.kernel, cfg.train_stride))
        .collect();

    let mut gen = Generator::init(cfg, &mut rng);
    let mut disc = Discriminator::init(cfg, &mut rng);
    let mut gen_state = AdamState::new(&gen.tensors_vec(), cfg.adam.clone());
    let mut disc_state = AdamState::new(&disc.tensors_vec(), cfg.adam.clone());

    let mut log = Vec::with_capacity(cfg.steps);
    let mut last_good: Option<Box<TrainedUasr>> = None;
    for step in 0..cfg.steps {
        let batch_idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..corpus.len()))
            .collect();
        let text_idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..text.sequences().len()))
            .collect();
        let audio: Vec<StepInput> = batch_idx
            .iter()
            .map(|&i| StepInput {
                feats: &corpus[i],
                aux_targets: aux_targets[i].clone(),
            })
            .collect();
        let batch_text: Vec<Vec<usize>> = text_idx
            .iter()
            .map(|&i| text.sequences()[i].clone())
            .collect();
        match adversarial_step(
            &audio,
            &batch_text,
            &mut gen,
            &mut disc,
            &mut gen_state,
            &mut disc_state,
            cfg,
            step,
            &mut rng,
        ) {
            Ok(report) => {
                log.push(report);
                last_good = Some(Box::new(TrainedUasr {
                    generator: gen.clone(),
                    discriminator: disc.clone(),
                    log: log.clone(),
                }));
            }
            Err(error) => {
                return Err(TrainFailure { error, last_good });
            }
        }
    }
    Ok(TrainedUasr {
        generator: gen,
        discriminator: disc,
        log,
    })
}

fn crop_rows(t: &Tensor, rows: usize) -> Tensor {
    let cols = t.cols();
    Tensor::from_vec(vec![rows, cols], t.data()[..rows * cols].to_vec())
        .expect("crop shape is consistent")
}

/// Frame-level phoneme labels: run the generator at stride 1 with
/// deduplication disabled, then pad by edge replication so the output is
/// exactly frame-aligned with the input.
pub fn frame_phoneme_labels(gen: &Generator, feats: &FeatureSeq) -> Result<FrameLabels, UasrError> {
    let logits = generator_forward(gen, feats, Some(1))?;
    let c = logits.cols();
    let mut core: Vec<usize> = Vec::with_capacity(logits.rows());
    for t in 0..logits.rows() {
        let row = logits.row(t);
        let mut best = 0;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        core.push(best);
    }
    let t_full = feats.num_frames();
    let missing = t_full - core.len();
    let front = missing / 2;
    let back = missing - front;
    let mut ids = Vec::with_capacity(t_full);
    ids.extend(std::iter::repeat(core[0]).take(front));
    ids.extend_from_slice(&core);
    ids.extend(std::iter::repeat(*core.last().unwrap()).take(back));
    Ok(FrameLabels::new("", ids, c).expect("argmax ids in range"))
}
