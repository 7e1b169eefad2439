//! Synthetic oracle corpus with known phone and triphone-state alignments,
//! unit-quality metrics against that ground truth, and the end-to-end study
//! that compares SSL target pipelines on equal footing.
//!
//! The context-coupling knob is what makes context-dependent units testable:
//! with coupling above zero the emission distribution of a phone genuinely
//! depends on its neighbors, so a good context-dependent labeling carries
//! measurably more information about the true triphone states than the best
//! context-independent one.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneConfig, BackboneError};
use crate::corpus::{FeatureSeq, FrameLabels, PhonemeInventory};
use crate::numkit::{
    adam_step, AdamConfig, AdamState, Graph, NumkitError, Tensor,
};
use crate::pretrain::{
    masked_prediction_accuracy, pretrain, PretrainConfig, PretrainError, PretrainedModel,
};
use crate::uasr::{frame_phoneme_labels, train_uasr, UasrConfig, UasrError, UnpairedText};
use crate::units::{
    accumulate_triphone_stats, build_lt_vocab, grow_tying_tree, kmeans_fit, label_lt, label_pc,
    label_pp, label_pt, merge_stats, singleton_questions, train_bpe, TriphoneKey, TyingConfig,
    UnitsError,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("bad synth config: {0}")]
    BadConfig(String),
    #[error("label sets are not aligned: {0}")]
    NotAligned(String),
    #[error("single-class truth: a probe needs at least two classes")]
    SingleClassTruth,
    #[error("empty input")]
    Empty,
    #[error(transparent)]
    Numkit(#[from] NumkitError),
    #[error(transparent)]
    Units(#[from] UnitsError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error("uasr training failed: {0}")]
    Uasr(String),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("serialization failed: {0}")]
    Serde(String),
}

impl From<UasrError> for EvalError {
    fn from(e: UasrError) -> Self {
        EvalError::Uasr(e.to_string())
    }
}

/// How phone-to-phone transition probabilities are produced.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum BigramSpec {
    /// Uniform over all other phones.
    Uniform,
    /// Log-normal row weights with the given log-std; larger values give
    /// peakier, more structured transitions.
    Seeded { log_std: f64 },
    /// Explicit row-stochastic matrix.
    Explicit(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HmmSynthConfig {
    /// Inventory size including silence (silence is id 0).
    pub inventory_size: usize,
    pub feature_dim: usize,
    /// Scale of the per-phone base emission means.
    pub emission_spread: f64,
    /// Base emission noise; each phone gets a value in [0.8, 1.2] times this.
    pub emission_std: f64,
    /// How strongly the left/right context phones shift the emission mean.
    pub context_coupling: f64,
    pub min_duration: usize,
    /// Probability of ending a phone's duration at each extra frame.
    pub duration_geom_p: f64,
    /// Hard cap on extra frames beyond `min_duration`.
    pub max_extra_frames: usize,
    pub bigram: BigramSpec,
    pub utterances: usize,
    pub min_phones: usize,
    pub max_phones: usize,
    pub seed: u64,
}

impl HmmSynthConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            inventory_size: 40,
            feature_dim: 16,
            emission_spread: 1.5,
            emission_std: 0.35,
            context_coupling: 0.6,
            min_duration: 2,
            duration_geom_p: 0.45,
            max_extra_frames: 8,
            bigram: BigramSpec::Seeded { log_std: 1.0 },
            utterances: 200,
            min_phones: 12,
            max_phones: 28,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.inventory_size < 2 {
            return Err(EvalError::BadConfig("need at least two phones".into()));
        }
        if self.feature_dim == 0 || self.utterances == 0 {
            return Err(EvalError::BadConfig("zero-sized corpus".into()));
        }
        if self.min_duration == 0 {
            return Err(EvalError::BadConfig("durations must be >= 1".into()));
        }
        if !(self.duration_geom_p > 0.0 && self.duration_geom_p <= 1.0) {
            return Err(EvalError::BadConfig(format!(
                "duration_geom_p {} outside (0, 1]",
                self.duration_geom_p
            )));
        }
        if self.min_phones == 0 || self.max_phones < self.min_phones {
            return Err(EvalError::BadConfig("bad phones-per-utterance range".into()));
        }
        if let BigramSpec::Explicit(rows) = &self.bigram {
            if rows.len() != self.inventory_size {
                return Err(EvalError::BadConfig("bigram matrix has wrong size".into()));
            }
            for (i, row) in rows.iter().enumerate() {
                if row.len() != self.inventory_size {
                    return Err(EvalError::BadConfig(format!("bigram row {i} has wrong size")));
                }
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&p| !(p.is_finite() && p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                    return Err(EvalError::BadConfig(format!(
                        "bigram row {i} is not a probability distribution"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One synthesized utterance with its ground-truth alignments.
#[derive(Debug, Clone)]
pub struct OracleUtterance {
    pub feats: FeatureSeq,
    pub phones: FrameLabels,
    pub states: FrameLabels,
}

/// Synthetic corpus with per-frame phone and triphone-state ground truth.
#[derive(Debug, Clone)]
pub struct OracleCorpus {
    pub inventory: PhonemeInventory,
    pub utterances: Vec<OracleUtterance>,
    /// Dense state id -> triphone key, sorted.
    pub state_keys: Vec<TriphoneKey>,
    /// Row-stochastic transition matrix actually used.
    pub bigram: Vec<Vec<f64>>,
}

impl OracleCorpus {
    pub fn num_states(&self) -> usize {
        self.state_keys.len()
    }

    pub fn features(&self) -> Vec<FeatureSeq> {
        self.utterances.iter().map(|u| u.feats.clone()).collect()
    }

    pub fn phone_labels(&self) -> Vec<FrameLabels> {
        self.utterances.iter().map(|u| u.phones.clone()).collect()
    }

    pub fn state_labels(&self) -> Vec<FrameLabels> {
        self.utterances.iter().map(|u| u.states.clone()).collect()
    }
}

/// Materialize the transition matrix: zero diagonal (no self loops, so run
/// structure equals phone occurrence structure), rows normalized.
pub fn materialize_bigram(cfg: &HmmSynthConfig) -> Result<Vec<Vec<f64>>, EvalError> {
    let n = cfg.inventory_size;
    let mut rows = match &cfg.bigram {
        BigramSpec::Uniform => vec![vec![1.0; n]; n],
        BigramSpec::Seeded { log_std } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xb16_7a3);
            (0..n)
                .map(|_| {
                    (0..n)
                        .map(|_| {
                            let z: f64 = rng.sample(StandardNormal);
                            (log_std * z).exp()
                        })
                        .collect()
                })
                .collect()
        }
        BigramSpec::Explicit(rows) => rows.clone(),
    };
    for (i, row) in rows.iter_mut().enumerate() {
        row[i] = 0.0;
        let sum: f64 = row.iter().sum();
        if sum <= 0.0 {
            return Err(EvalError::BadConfig(format!("bigram row {i} has no mass")));
        }
        for p in row.iter_mut() {
            *p /= sum;
        }
    }
    Ok(rows)
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let mut r = rng.random::<f64>();
    for (i, &p) in probs.iter().enumerate() {
        if r < p {
            return i;
        }
        r -= p;
    }
    probs.len() - 1
}

/// Sample one phone sequence (bracketed by silence) from the bigram chain.
fn sample_phone_chain(
    bigram: &[Vec<f64>],
    n_phones: usize,
    silence_id: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut seq = vec![silence_id];
    let mut cur = silence_id;
    for _ in 0..n_phones {
        cur = sample_categorical(&bigram[cur], rng);
        seq.push(cur);
    }
    if *seq.last().unwrap() != silence_id {
        seq.push(silence_id);
    }
    seq
}

/// Generate the oracle corpus: phone chains from the bigram, geometric-tailed
/// durations, and context-coupled Gaussian emissions, with ground truth
/// recorded per frame.
pub fn synth_corpus(cfg: &HmmSynthConfig) -> Result<OracleCorpus, EvalError> {
    cfg.validate()?;
    let n = cfg.inventory_size;
    let silence = 0usize;
    let inventory = PhonemeInventory::synthetic(n);
    let bigram = materialize_bigram(cfg)?;

    let mut param_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let d = cfg.feature_dim;
    let means: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..d)
                .map(|_| {
                    let z: f64 = param_rng.sample(StandardNormal);
                    z * cfg.emission_spread
                })
                .collect()
        })
        .collect();
    let stds: Vec<f64> = (0..n)
        .map(|_| cfg.emission_std * (0.8 + 0.4 * param_rng.random::<f64>()))
        .collect();
    let ctx_vec = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        z
                    })
                    .collect()
            })
            .collect()
    };
    let left_ctx = ctx_vec(&mut param_rng);
    let right_ctx = ctx_vec(&mut param_rng);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    struct RawUtt {
        keys: Vec<TriphoneKey>,
        durations: Vec<usize>,
        frames: Tensor,
        phone_ids: Vec<usize>,
    }
    let mut raw = Vec::with_capacity(cfg.utterances);
    let mut all_keys: BTreeMap<TriphoneKey, usize> = BTreeMap::new();
    for _ in 0..cfg.utterances {
        let n_steps = rng.random_range(cfg.min_phones..=cfg.max_phones);
        let seq = sample_phone_chain(&bigram, n_steps, silence, &mut rng);
        let mut keys = Vec::with_capacity(seq.len());
        for (i, &c) in seq.iter().enumerate() {
            let l = if i == 0 { silence } else { seq[i - 1] };
            let r = if i + 1 == seq.len() { silence } else { seq[i + 1] };
            keys.push(TriphoneKey::new(l, c, r));
        }
        let durations: Vec<usize> = seq
            .iter()
            .map(|_| {
                let mut extra = 0usize;
                while extra < cfg.max_extra_frames && rng.random::<f64>() > cfg.duration_geom_p {
                    extra += 1;
                }
                cfg.min_duration + extra
            })
            .collect();
        let total: usize = durations.iter().sum();
        let mut data = Vec::with_capacity(total * d);
        let mut phone_ids = Vec::with_capacity(total);
        for (key, &dur) in keys.iter().zip(&durations) {
            let c = key.center;
            for _ in 0..dur {
                for dd in 0..d {
                    let mean = means[c][dd]
                        + cfg.context_coupling
                            * (left_ctx[key.left][dd] + right_ctx[key.right][dd]);
                    let z: f64 = rng.sample(StandardNormal);
                    data.push(mean + stds[c] * z);
                }
                phone_ids.push(c);
            }
        }
        for key in &keys {
            all_keys.entry(*key).or_insert(0);
        }
        raw.push(RawUtt {
            keys,
            durations,
            frames: Tensor::from_vec(vec![total, d], data)?,
            phone_ids,
        });
    }

    let state_keys: Vec<TriphoneKey> = all_keys.keys().copied().collect();
    for (i, key) in state_keys.iter().enumerate() {
        *all_keys.get_mut(key).unwrap() = i;
    }
    let n_states = state_keys.len();

    let mut utterances = Vec::with_capacity(raw.len());
    for (u, r) in raw.into_iter().enumerate() {
        let id = format!("utt{u:04}");
        let mut state_ids = Vec::with_capacity(r.phone_ids.len());
        for (key, &dur) in r.keys.iter().zip(&r.durations) {
            let s = all_keys[key];
            state_ids.extend(std::iter::repeat(s).take(dur));
        }
        let feats = FeatureSeq::new(r.frames, 50.0)?;
        let phones = FrameLabels::new(id.clone(), r.phone_ids, n)?;
        let states = FrameLabels::new(id, state_ids, n_states)?;
        utterances.push(OracleUtterance {
            feats,
            phones,
            states,
        });
    }
    Ok(OracleCorpus {
        inventory,
        utterances,
        state_keys,
        bigram,
    })
}

/// Sample unpaired phoneme text from the same bigram chain, with silence
/// removed (training reinserts it stochastically).
pub fn sample_text(cfg: &HmmSynthConfig, sequences: usize, seed: u64) -> Result<UnpairedText, EvalError> {
    cfg.validate()?;
    let bigram = materialize_bigram(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(sequences);
    while out.len() < sequences {
        let n_steps = rng.random_range(cfg.min_phones..=cfg.max_phones);
        let seq: Vec<usize> = sample_phone_chain(&bigram, n_steps, 0, &mut rng)
            .into_iter()
            .filter(|&p| p != 0)
            .collect();
        if !seq.is_empty() {
            out.push(seq);
        }
    }
    Ok(UnpairedText::new(out, cfg.inventory_size)?)
}

// ---------------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------------

fn joint_counts(
    units: &[FrameLabels],
    truth: &[FrameLabels],
) -> Result<BTreeMap<(usize, usize), u64>, EvalError> {
    if units.len() != truth.len() || units.is_empty() {
        return Err(EvalError::NotAligned(format!(
            "{} unit sets vs {} truth sets",
            units.len(),
            truth.len()
        )));
    }
    let mut counts = BTreeMap::new();
    for (u, t) in units.iter().zip(truth) {
        if u.len() != t.len() {
            return Err(EvalError::NotAligned(format!(
                "utterance `{}`: {} unit frames vs {} truth frames",
                u.utt_id,
                u.len(),
                t.len()
            )));
        }
        for (&a, &b) in u.ids().iter().zip(t.ids()) {
            *counts.entry((a, b)).or_insert(0u64) += 1;
        }
    }
    Ok(counts)
}

/// Frame purity: each cluster votes for its modal truth label.
pub fn purity(units: &[FrameLabels], truth: &[FrameLabels]) -> Result<f64, EvalError> {
    let counts = joint_counts(units, truth)?;
    let mut per_cluster: BTreeMap<usize, BTreeMap<usize, u64>> = BTreeMap::new();
    let mut total = 0u64;
    for (&(u, t), &c) in &counts {
        *per_cluster.entry(u).or_default().entry(t).or_insert(0) += c;
        total += c;
    }
    let hits: u64 = per_cluster
        .values()
        .map(|m| m.values().copied().max().unwrap_or(0))
        .sum();
    Ok(hits as f64 / total as f64)
}

fn entropy_from_counts(counts: &BTreeMap<usize, u64>, total: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `I(U;T) / max(H(U), H(T))`.
///
/// When both labelings are single-class the score is 1 (identical trivial
/// partitions); when only one is degenerate it is 0.
pub fn nmi(units: &[FrameLabels], truth: &[FrameLabels]) -> Result<f64, EvalError> {
    let joint = joint_counts(units, truth)?;
    let mut mu: BTreeMap<usize, u64> = BTreeMap::new();
    let mut mt: BTreeMap<usize, u64> = BTreeMap::new();
    let mut total = 0u64;
    for (&(u, t), &c) in &joint {
        *mu.entry(u).or_insert(0) += c;
        *mt.entry(t).or_insert(0) += c;
        total += c;
    }
    let n = total as f64;
    let hu = entropy_from_counts(&mu, n);
    let ht = entropy_from_counts(&mt, n);
    if hu == 0.0 && ht == 0.0 {
        return Ok(1.0);
    }
    if hu == 0.0 || ht == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (&(u, t), &c) in &joint {
        let p = c as f64 / n;
        let pu = mu[&u] as f64 / n;
        let pt = mt[&t] as f64 / n;
        mi += p * (p / (pu * pt)).ln();
    }
    Ok((mi.max(0.0) / hu.max(ht)).clamp(0.0, 1.0))
}

/// Effective number of distinct units actually used: `exp(H(usage))`.
pub fn effective_vocab(units: &[FrameLabels]) -> f64 {
    let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
    let mut total = 0u64;
    for u in units {
        for &id in u.ids() {
            *counts.entry(id).or_insert(0) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    entropy_from_counts(&counts, total as f64).exp()
}

/// Train/test split of utterance indices, 80/20, seeded.
fn probe_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let cut = ((n as f64) * 0.8).ceil() as usize;
    let cut = cut.clamp(1, n.saturating_sub(1).max(1));
    let (train, test) = idx.split_at(cut.min(n));
    (train.to_vec(), test.to_vec())
}

const PROBE_EPOCHS: usize = 40;
const PROBE_LR: f64 = 0.05;
const PROBE_MAX_FRAMES: usize = 20_000;

/// Accuracy of a single linear softmax classifier trained on frozen
/// representations with a fixed 80/20 utterance split.
pub fn linear_probe(
    reprs: &[FeatureSeq],
    truth: &[FrameLabels],
    seed: u64,
) -> Result<f64, EvalError> {
    if reprs.is_empty() || reprs.len() != truth.len() {
        return Err(EvalError::NotAligned(format!(
            "{} representation sets vs {} truth sets",
            reprs.len(),
            truth.len()
        )));
    }
    let classes = truth[0].vocab_size();
    let mut seen = std::collections::BTreeSet::new();
    for t in truth {
        seen.extend(t.ids().iter().copied());
    }
    if seen.len() < 2 {
        return Err(EvalError::SingleClassTruth);
    }
    let dim = reprs[0].dim();
    let (train_utts, test_utts) = probe_split(reprs.len(), seed);
    let gather = |utts: &[usize]| -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for &u in utts {
            for t in 0..reprs[u].num_frames() {
                x.extend_from_slice(reprs[u].frame(t));
                y.push(truth[u].ids()[t]);
            }
        }
        (x, y)
    };
    let (mut x_train, mut y_train) = gather(&train_utts);
    let (x_test, y_test) = gather(&test_utts);
    if y_train.is_empty() || y_test.is_empty() {
        return Err(EvalError::Empty);
    }
    // Deterministic cap keeps the probe cheap on large corpora.
    if y_train.len() > PROBE_MAX_FRAMES {
        x_train.truncate(PROBE_MAX_FRAMES * dim);
        y_train.truncate(PROBE_MAX_FRAMES);
    }

    let n_train = y_train.len();
    let x = Tensor::from_vec(vec![n_train, dim], x_train)?;
    let coords: std::rc::Rc<Vec<(usize, usize)>> =
        std::rc::Rc::new(y_train.iter().enumerate().map(|(i, &c)| (i, c)).collect());
    let mut w = Tensor::zeros(vec![dim, classes]);
    let mut b = Tensor::zeros(vec![1, classes]);
    let mut state = AdamState::new(
        &[w.clone(), b.clone()],
        AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
    );
    for _ in 0..PROBE_EPOCHS {
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let wi = g.leaf(w.clone());
        let bi = g.leaf(b.clone());
        let logits = g.matmul(xi, wi)?;
        let bb = g.broadcast_row(bi, n_train)?;
        let logits = g.add(logits, bb)?;
        let logp = g.log_softmax(logits, 1.0)?;
        let picked = g.gather_sum(logp, coords.clone())?;
        let loss = g.scale(picked, -1.0 / n_train as f64)?;
        let grads = g.backward(loss, &[wi, bi])?;
        let gw = g.value(grads[0]).clone();
        let gb = g.value(grads[1]).clone();
        let mut params = vec![w, b];
        adam_step(&mut params, &[gw, gb], &mut state, PROBE_LR)?;
        b = params.pop().unwrap();
        w = params.pop().unwrap();
    }

    // Test accuracy.
    let n_test = y_test.len();
    let xt = Tensor::from_vec(vec![n_test, dim], x_test)?;
    let logits = xt.matmul(&w)?;
    let mut correct = 0usize;
    for (i, &target) in y_test.iter().enumerate() {
        let row = logits.row(i);
        let mut best = 0usize;
        for c in 1..classes {
            if row[c] + b.data()[c] > row[best] + b.data()[best] {
                best = c;
            }
        }
        if best == target {
            correct += 1;
        }
    }
    Ok(correct as f64 / n_test as f64)
}

// ---------------------------------------------------------------------------
// The target-comparison study.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Mono,
    Lt,
    Pt,
    Pp,
    Pc,
}

impl Pipeline {
    pub fn name(&self) -> &'static str {
        match self {
            Pipeline::Mono => "mono",
            Pipeline::Lt => "lt",
            Pipeline::Pt => "pt",
            Pipeline::Pp => "pp",
            Pipeline::Pc => "pc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mono" => Some(Pipeline::Mono),
            "lt" => Some(Pipeline::Lt),
            "pt" => Some(Pipeline::Pt),
            "pp" => Some(Pipeline::Pp),
            "pc" => Some(Pipeline::Pc),
            _ => None,
        }
    }

    pub fn all() -> [Pipeline; 5] {
        [
            Pipeline::Mono,
            Pipeline::Lt,
            Pipeline::Pt,
            Pipeline::Pp,
            Pipeline::Pc,
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub seed: u64,
    pub uasr: UasrConfig,
    pub text_sequences: usize,
    pub lt_top_k: usize,
    pub tying: TyingConfig,
    pub bpe_vocab: usize,
    pub pc_clusters: usize,
    /// Transformer layer used for the clustering features; defaults to the
    /// middle layer when absent.
    pub pc_layer: Option<usize>,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
}

impl StudyConfig {
    pub fn desk(feature_dim: usize, seed: u64) -> Self {
        Self {
            seed,
            uasr: UasrConfig::desk(feature_dim),
            text_sequences: 300,
            lt_top_k: 500,
            tying: TyingConfig {
                max_leaves: 80,
                min_gain: 4.0,
                min_occupancy: 30.0,
            },
            bpe_vocab: 120,
            pc_clusters: 60,
            pc_layer: None,
            backbone: BackboneConfig::desk_features(feature_dim),
            pretrain: PretrainConfig::desk(600),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineMetrics {
    pub vocab_size: usize,
    pub frame_purity: f64,
    pub inverse_purity: f64,
    pub nmi_phones: f64,
    pub nmi_states: f64,
    pub effective_vocab: f64,
    /// Absent when no trained checkpoint is available to evaluate.
    pub masked_pred_accuracy: Option<f64>,
    pub probe_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineRow {
    pub pipeline: String,
    pub error: Option<String>,
    pub metrics: Option<PipelineMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub rows: Vec<PipelineRow>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String, EvalError> {
        serde_json::to_string_pretty(self).map_err(|e| EvalError::Serde(e.to_string()))
    }

    pub fn row(&self, pipeline: Pipeline) -> Option<&PipelineRow> {
        self.rows.iter().find(|r| r.pipeline == pipeline.name())
    }

    /// Aligned plain-text table, one row per pipeline.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<6} {:>6} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9} {:>9}\n",
            "units", "vocab", "purity", "inv_pur", "nmi_ph", "nmi_st", "eff_voc", "mask_acc", "probe"
        ));
        for row in &self.rows {
            match (&row.metrics, &row.error) {
                (Some(m), _) => {
                    let opt = |v: Option<f64>| match v {
                        Some(x) => format!("{x:.4}"),
                        None => "-".to_string(),
                    };
                    out.push_str(&format!(
                        "{:<6} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>9.1} {:>9} {:>9}\n",
                        row.pipeline,
                        m.vocab_size,
                        m.frame_purity,
                        m.inverse_purity,
                        m.nmi_phones,
                        m.nmi_states,
                        m.effective_vocab,
                        opt(m.masked_pred_accuracy),
                        opt(m.probe_accuracy)
                    ))
                }
                (None, Some(e)) => out.push_str(&format!("{:<6} ERROR: {}\n", row.pipeline, e)),
                (None, None) => out.push_str(&format!("{:<6} ERROR: unknown\n", row.pipeline)),
            }
        }
        out
    }
}

/// Generated unit targets for every requested pipeline plus the shared mono
/// backbone (needed both as a row and as the feature extractor for PC).
struct StudyState {
    targets: BTreeMap<&'static str, Vec<FrameLabels>>,
    mono_model: Option<PretrainedModel>,
}

/// Run the full study: train the unsupervised labeler, derive every
/// requested unit inventory, pre-train one backbone per inventory, and score
/// everything against the oracle. A pipeline failure produces an error row
/// instead of aborting the report.
pub fn compare_targets(
    corpus: &OracleCorpus,
    text: &UnpairedText,
    pipelines: &[Pipeline],
    cfg: &StudyConfig,
) -> Result<MetricsReport, EvalError> {
    if corpus.utterances.is_empty() {
        return Err(EvalError::Empty);
    }
    let feats = corpus.features();
    let phone_truth = corpus.phone_labels();
    let state_truth = corpus.state_labels();
    let silence = corpus.inventory.silence_id();
    let base = corpus.inventory.len();

    let mut rows = Vec::new();
    let mut state = StudyState {
        targets: BTreeMap::new(),
        mono_model: None,
    };

    // Stage 1: the unsupervised labeler everything else derives from.
    let mono_labels: Result<Vec<FrameLabels>, EvalError> = (|| {
        let trained =
            train_uasr(&feats, text, &cfg.uasr, cfg.seed).map_err(|f| EvalError::Uasr(f.to_string()))?;
        let mut labels = Vec::with_capacity(feats.len());
        for (i, f) in feats.iter().enumerate() {
            let mut l = frame_phoneme_labels(&trained.generator, f)?;
            l.utt_id = corpus.utterances[i].phones.utt_id.clone();
            labels.push(l);
        }
        Ok(labels)
    })();

    let mono_labels = match mono_labels {
        Ok(l) => l,
        Err(e) => {
            // Nothing downstream can run; report every requested row as failed.
            let msg = e.to_string();
            for p in pipelines {
                rows.push(PipelineRow {
                    pipeline: p.name().to_string(),
                    error: Some(format!("mono labeling failed: {msg}")),
                    metrics: None,
                });
            }
            return Ok(MetricsReport {
                seed: cfg.seed,
                rows,
            });
        }
    };

    // Stage 2: derive targets per pipeline, then train and score.
    for &p in pipelines {
        let result = build_targets(p, corpus, &mono_labels, &feats, cfg, &mut state, silence, base)
            .and_then(|targets| {
                score_pipeline(p, corpus, &targets, &feats, &phone_truth, &state_truth, cfg, &mut state)
            });
        match result {
            Ok(metrics) => rows.push(PipelineRow {
                pipeline: p.name().to_string(),
                error: None,
                metrics: Some(metrics),
            }),
            Err(e) => rows.push(PipelineRow {
                pipeline: p.name().to_string(),
                error: Some(e.to_string()),
                metrics: None,
            }),
        }
    }
    Ok(MetricsReport {
        seed: cfg.seed,
        rows,
    })
}

#[allow(clippy::too_many_arguments)]
fn build_targets(
    p: Pipeline,
    corpus: &OracleCorpus,
    mono: &[FrameLabels],
    feats: &[FeatureSeq],
    cfg: &StudyConfig,
    state: &mut StudyState,
    silence: usize,
    base: usize,
) -> Result<Vec<FrameLabels>, EvalError> {
    if let Some(t) = state.targets.get(p.name()) {
        return Ok(t.clone());
    }
    let targets: Vec<FrameLabels> = match p {
        Pipeline::Mono => mono.to_vec(),
        Pipeline::Lt => {
            let runs: Vec<_> = mono
                .iter()
                .map(crate::corpus::dedup_runs)
                .collect::<Result<_, _>>()?;
            let vocab = build_lt_vocab(runs.iter(), cfg.lt_top_k, base, silence);
            mono.iter()
                .map(|l| label_lt(l, &vocab))
                .collect::<Result<_, _>>()?
        }
        Pipeline::Pt => {
            let mut stats = BTreeMap::new();
            for (f, l) in feats.iter().zip(mono) {
                merge_stats(&mut stats, accumulate_triphone_stats(f, l, silence)?);
            }
            let questions = singleton_questions(base);
            let outcome = grow_tying_tree(&stats, &questions, base, &cfg.tying)?;
            mono.iter()
                .map(|l| label_pt(l, &outcome.tree, silence))
                .collect::<Result<_, _>>()?
        }
        Pipeline::Pp => {
            let seqs: Vec<Vec<usize>> = mono
                .iter()
                .map(|l| Ok(crate::corpus::dedup_runs(l)?.symbols().to_vec()))
                .collect::<Result<_, EvalError>>()?;
            let names = corpus.inventory.symbols().to_vec();
            let model = train_bpe(&seqs, cfg.bpe_vocab, base, silence, &names)?;
            mono.iter()
                .map(|l| label_pp(l, &model))
                .collect::<Result<_, _>>()?
        }
        Pipeline::Pc => {
            let mono_model = ensure_mono_model(corpus, mono, cfg, state)?;
            let layer = cfg
                .pc_layer
                .unwrap_or(cfg.backbone.context.num_layers / 2)
                .min(cfg.backbone.context.num_layers - 1);
            let mut reprs = Vec::with_capacity(feats.len());
            for f in feats {
                reprs.push(mono_model.backbone.extract_layer(f, layer)?);
            }
            let dim = reprs[0].dim();
            let mut points = Vec::new();
            for r in &reprs {
                points.extend_from_slice(r.frames().data());
            }
            let model = kmeans_fit(&points, dim, cfg.pc_clusters, cfg.seed ^ 0x9c, 15, 1e-6)?;
            reprs
                .iter()
                .zip(mono)
                .map(|(r, l)| {
                    let mut out = label_pc(r, &model)?;
                    out.utt_id = l.utt_id.clone();
                    Ok(out)
                })
                .collect::<Result<_, EvalError>>()?
        }
    };
    state.targets.insert(p.name(), targets.clone());
    Ok(targets)
}

fn ensure_mono_model(
    corpus: &OracleCorpus,
    mono: &[FrameLabels],
    cfg: &StudyConfig,
    state: &mut StudyState,
) -> Result<PretrainedModel, EvalError> {
    if let Some(m) = &state.mono_model {
        return Ok(m.clone());
    }
    let feats = corpus.features();
    let out = pretrain(&feats, mono, &cfg.backbone, &cfg.pretrain, cfg.seed)
        .map_err(|f| EvalError::Pretrain(f.error))?;
    state.mono_model = Some(out.model.clone());
    Ok(out.model)
}

#[allow(clippy::too_many_arguments)]
fn score_pipeline(
    p: Pipeline,
    corpus: &OracleCorpus,
    targets: &[FrameLabels],
    feats: &[FeatureSeq],
    phone_truth: &[FrameLabels],
    state_truth: &[FrameLabels],
    cfg: &StudyConfig,
    state: &mut StudyState,
) -> Result<PipelineMetrics, EvalError> {
    let model = if p == Pipeline::Mono {
        ensure_mono_model(corpus, targets, cfg, state)?
    } else {
        let out = pretrain(feats, targets, &cfg.backbone, &cfg.pretrain, cfg.seed)
            .map_err(|f| EvalError::Pretrain(f.error))?;
        out.model
    };

    let masked_acc = masked_prediction_accuracy(
        &model,
        feats,
        targets,
        &cfg.pretrain.mask,
        cfg.seed ^ 0xacc,
    )?;

    let last = cfg.backbone.context.num_layers - 1;
    let mut reprs = Vec::with_capacity(feats.len());
    for f in feats {
        reprs.push(model.backbone.extract_layer(f, last)?);
    }
    let probe_acc = linear_probe(&reprs, phone_truth, cfg.seed ^ 0x940be)?;

    Ok(PipelineMetrics {
        vocab_size: targets[0].vocab_size(),
        frame_purity: purity(targets, phone_truth)?,
        inverse_purity: purity(phone_truth, targets)?,
        nmi_phones: nmi(targets, phone_truth)?,
        nmi_states: nmi(targets, state_truth)?,
        effective_vocab: effective_vocab(targets),
        masked_pred_accuracy: Some(masked_acc),
        probe_accuracy: Some(probe_acc),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::validate_alignment;

    fn small_cfg() -> HmmSynthConfig {
        HmmSynthConfig {
            inventory_size: 8,
            feature_dim: 4,
            utterances: 12,
            min_phones: 6,
            max_phones: 10,
            ..HmmSynthConfig::desk(3)
        }
    }

    fn labels(ids: &[usize], vocab: usize) -> FrameLabels {
        FrameLabels::new("u", ids.to_vec(), vocab).unwrap()
    }

    #[test]
    fn corpus_is_aligned_and_deterministic() {
        let cfg = small_cfg();
        let a = synth_corpus(&cfg).unwrap();
        for u in &a.utterances {
            validate_alignment(&u.phones, &u.feats).unwrap();
            validate_alignment(&u.states, &u.feats).unwrap();
        }
        let b = synth_corpus(&cfg).unwrap();
        for (x, y) in a.utterances.iter().zip(&b.utterances) {
            assert_eq!(x.feats, y.feats);
            assert_eq!(x.phones, y.phones);
            assert_eq!(x.states, y.states);
        }
        assert!(a.num_states() > cfg.inventory_size);
    }

    #[test]
    fn zero_coupling_makes_context_irrelevant() {
        let cfg = HmmSynthConfig {
            context_coupling: 0.0,
            emission_std: 0.05,
            utterances: 120,
            ..small_cfg()
        };
        let corpus = synth_corpus(&cfg).unwrap();
        // Collect per-(center, left-context-parity) means of dimension 0 for
        // one phone: with zero coupling they must agree up to noise.
        let mut by_state: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        for u in &corpus.utterances {
            for t in 0..u.feats.num_frames() {
                let s = u.states.ids()[t];
                let e = by_state.entry(s).or_insert((0.0, 0.0));
                e.0 += u.feats.frame(t)[0];
                e.1 += 1.0;
            }
        }
        // Group states by center phone and compare their means.
        let mut by_center: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (s, (sum, n)) in &by_state {
            if *n < 30.0 {
                continue;
            }
            let key = corpus.state_keys[*s];
            by_center.entry(key.center).or_default().push(sum / n);
        }
        let mut checked = 0;
        for (_, means) in by_center {
            if means.len() >= 2 {
                let spread = means
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
                    - means.iter().cloned().fold(f64::INFINITY, f64::min);
                assert!(spread < 0.15, "context shifted a zero-coupling mean by {spread}");
                checked += 1;
            }
        }
        assert!(checked > 0, "no center phone had two well-sampled states");
    }

    #[test]
    fn phone_frequencies_match_stationary_distribution() {
        let cfg = HmmSynthConfig {
            utterances: 320,
            min_phones: 280,
            max_phones: 320,
            min_duration: 1,
            duration_geom_p: 0.9,
            max_extra_frames: 2,
            ..small_cfg()
        };
        let corpus = synth_corpus(&cfg).unwrap();
        let n = cfg.inventory_size;
        // Power-iteration oracle for the stationary distribution.
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..4000 {
            let mut next = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    next[j] += pi[i] * corpus.bigram[i][j];
                }
            }
            pi = next;
        }
        let mut counts = vec![0u64; n];
        let mut total = 0u64;
        for u in &corpus.utterances {
            for &id in u.phones.ids() {
                counts[id] += 1;
                total += 1;
            }
        }
        assert!(total > 100_000, "need 1e5 frames, got {total}");
        for c in 0..n {
            let freq = counts[c] as f64 / total as f64;
            assert!(
                (freq - pi[c]).abs() <= 0.02,
                "phone {c}: freq {freq:.4} vs stationary {:.4}",
                pi[c]
            );
        }
    }

    #[test]
    fn purity_cases() {
        let t = labels(&[0, 0, 1, 1, 2, 2], 3);
        assert_eq!(purity(&[t.clone()], &[t.clone()]).unwrap(), 1.0);
        // Single cluster: purity is the modal phone frequency.
        let single = labels(&[0; 6], 1);
        assert!((purity(&[single], &[t.clone()]).unwrap() - 2.0 / 6.0).abs() < 1e-12);
        // Hand tally on a 20-frame case: cluster 0 sees [0x5, 1x2],
        // cluster 1 sees [1x8], cluster 2 sees [0x1, 2x4].
        let units = labels(&[0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2], 3);
        let truth = labels(&[0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 2, 2, 2, 2], 3);
        // max per cluster: 5 + 8 + 4 = 17.
        assert!((purity(&[units], &[truth]).unwrap() - 17.0 / 20.0).abs() < 1e-12);
        // Units refining truth gives purity 1.
        let refined = labels(&[0, 1, 1, 2, 3, 3], 4);
        let coarse = labels(&[0, 0, 0, 1, 1, 1], 2);
        assert_eq!(purity(&[refined], &[coarse]).unwrap(), 1.0);
    }

    #[test]
    fn nmi_cases() {
        let t = labels(&[0, 0, 1, 1, 2, 2], 3);
        assert_eq!(nmi(&[t.clone()], &[t.clone()]).unwrap(), 1.0);
        // Bijective relabeling keeps NMI at 1.
        let perm = labels(&[2, 2, 0, 0, 1, 1], 3);
        assert!((nmi(&[perm], &[t.clone()]).unwrap() - 1.0).abs() < 1e-12);
        // Degenerate rules.
        let flat = labels(&[0; 6], 1);
        assert_eq!(nmi(&[flat.clone()], &[flat.clone()]).unwrap(), 1.0);
        assert_eq!(nmi(&[flat], &[t]).unwrap(), 0.0);
        // Independent labelings on 10^4 frames stay near zero.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..8)).collect();
        let b: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..8)).collect();
        let score = nmi(&[labels(&a, 8)], &[labels(&b, 8)]).unwrap();
        assert!(score <= 0.05, "independent NMI {score}");
        // Misalignment errors.
        assert!(nmi(&[labels(&[0, 1], 2)], &[labels(&[0], 2)]).is_err());
    }

    #[test]
    fn effective_vocab_counts_usage() {
        let uniform = labels(&[0, 1, 2, 3], 4);
        assert!((effective_vocab(&[uniform]) - 4.0).abs() < 1e-9);
        let skewed = labels(&[0, 0, 0, 0], 4);
        assert!((effective_vocab(&[skewed]) - 1.0).abs() < 1e-9);
    }

    fn separable_reprs(n_utts: usize, seed: u64) -> (Vec<FeatureSeq>, Vec<FrameLabels>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reprs = Vec::new();
        let mut truth = Vec::new();
        for u in 0..n_utts {
            let t = 30;
            let mut data = Vec::new();
            let mut ids = Vec::new();
            for _ in 0..t {
                let c = rng.random_range(0..2usize);
                let base = if c == 0 { -2.0 } else { 2.0 };
                data.push(base + 0.1 * rng.random::<f64>());
                data.push(0.5);
                ids.push(c);
            }
            reprs.push(
                FeatureSeq::new(Tensor::from_vec(vec![t, 2], data).unwrap(), 50.0).unwrap(),
            );
            truth.push(FrameLabels::new(format!("u{u}"), ids, 2).unwrap());
        }
        (reprs, truth)
    }

    #[test]
    fn probe_separates_separable_data() {
        let (reprs, truth) = separable_reprs(10, 4);
        let acc = linear_probe(&reprs, &truth, 1).unwrap();
        assert!(acc >= 0.99, "separable accuracy {acc}");
        // Deterministic per seed.
        assert_eq!(
            linear_probe(&reprs, &truth, 1).unwrap().to_bits(),
            acc.to_bits()
        );
        // Shuffled labels drop to chance.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shuffled: Vec<FrameLabels> = truth
            .iter()
            .map(|t| {
                let ids: Vec<usize> = t.ids().iter().map(|_| rng.random_range(0..2)).collect();
                FrameLabels::new(t.utt_id.clone(), ids, 2).unwrap()
            })
            .collect();
        let acc = linear_probe(&reprs, &shuffled, 1).unwrap();
        assert!((0.3..0.7).contains(&acc), "shuffled accuracy {acc}");
        // Single-class truth errors.
        let flat: Vec<FrameLabels> = truth
            .iter()
            .map(|t| FrameLabels::new(t.utt_id.clone(), vec![0; t.len()], 2).unwrap())
            .collect();
        assert!(matches!(
            linear_probe(&reprs, &flat, 1),
            Err(EvalError::SingleClassTruth)
        ));
    }

    #[test]
    fn study_smoke_test_produces_rows() {
        let synth = HmmSynthConfig {
            inventory_size: 8,
            feature_dim: 6,
            utterances: 16,
            min_phones: 8,
            max_phones: 12,
            ..HmmSynthConfig::desk(11)
        };
        let corpus = synth_corpus(&synth).unwrap();
        let text = sample_text(&synth, 40, 12).unwrap();
        let mut cfg = StudyConfig::desk(6, 11);
        cfg.uasr.inventory_size = 8;
        cfg.uasr.steps = 20;
        cfg.uasr.batch_size = 4;
        cfg.uasr.aux_clusters = 6;
        cfg.tying = TyingConfig {
            max_leaves: 20,
            min_gain: 1.0,
            min_occupancy: 5.0,
        };
        cfg.lt_top_k = 30;
        cfg.bpe_vocab = 20;
        cfg.pretrain.steps = 12;
        cfg.pretrain.schedule = crate::numkit::ScheduleConfig::pretrain(1e-3, 12);
        cfg.backbone = BackboneConfig {
            encoder: None,
            input_dim: 6,
            context: crate::backbone::ContextConfig {
                num_layers: 1,
                model_dim: 16,
                ffn_dim: 32,
                num_heads: 2,
            },
            max_positions: 256,
        };
        let report =
            compare_targets(&corpus, &text, &[Pipeline::Mono, Pipeline::Lt], &cfg).unwrap();
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            assert!(row.error.is_none(), "{}: {:?}", row.pipeline, row.error);
            let m = row.metrics.as_ref().unwrap();
            assert!(m.frame_purity > 0.0 && m.frame_purity <= 1.0);
            assert!(m.nmi_states >= 0.0 && m.nmi_states <= 1.0);
        }
        let table = report.render_table();
        assert!(table.contains("mono"));
        assert!(table.contains("lt"));
        // Deterministic serialization.
        let again = compare_targets(&corpus, &text, &[Pipeline::Mono, Pipeline::Lt], &cfg).unwrap();
        assert_eq!(report.to_json().unwrap(), again.to_json().unwrap());
    }
}
