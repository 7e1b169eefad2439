//! Masked-prediction pre-training of the backbone against frame-aligned
//! discrete targets: per utterance the loss is summed over masked frames,
//! then averaged over the batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneError};
use crate::corpus::{FeatureSeq, FrameLabels};
use crate::numkit::{
    adam_step, lr_at, AdamConfig, AdamState, Graph, NumkitError, ScheduleConfig, Tensor,
};
use crate::objective::{
    masked_nll_graph, predict_units, sample_mask, HeadVars, MaskSpec, ObjectiveError,
    PredictorHead,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("corpus and targets differ in length: {feats} vs {labels}")]
    CorpusMismatch { feats: usize, labels: usize },
    #[error("utterance {index}: labels have {labels} frames, features {frames}")]
    NotAligned {
        index: usize,
        labels: usize,
        frames: usize,
    },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Numkit(#[from] NumkitError),
}

/// Training failure carrying the last finite model.
#[derive(Debug)]
pub struct PretrainFailure {
    pub error: PretrainError,
    pub last_good: Option<Box<PretrainedModel>>,
}

impl std::fmt::Display for PretrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl std::error::Error for PretrainFailure {}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Utterances longer than this are cropped to a seeded random window.
    pub max_frames: usize,
    pub embed_dim: usize,
    pub temperature: f64,
    pub mask: MaskSpec,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
}

impl PretrainConfig {
    pub fn desk(steps: usize) -> Self {
        Self {
            steps,
            batch_size: 4,
            max_frames: 128,
            embed_dim: 48,
            temperature: 0.1,
            mask: MaskSpec::default(),
            schedule: ScheduleConfig::pretrain(2e-3, steps as u64),
            adam: AdamConfig::default(),
        }
    }
}

/// A trained backbone plus its predictor head.
#[derive(Debug, Clone)]
pub struct PretrainedModel {
    pub backbone: Backbone,
    pub head: PredictorHead,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: PretrainedModel,
    pub loss_log: Vec<f64>,
}

/// Train a fresh backbone on `(features, target)` pairs.
pub fn pretrain(
    feats: &[FeatureSeq],
    targets: &[FrameLabels],
    backbone_cfg: &BackboneConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome, PretrainFailure> {
    let fail = |error: PretrainError| PretrainFailure {
        error,
        last_good: None,
    };
    if feats.is_empty() {
        return Err(fail(PretrainError::EmptyCorpus));
    }
    if feats.len() != targets.len() {
        return Err(fail(PretrainError::CorpusMismatch {
            feats: feats.len(),
            labels: targets.len(),
        }));
    }
    for (i, (f, l)) in feats.iter().zip(targets).enumerate() {
        if f.num_frames() != l.len() {
            return Err(fail(PretrainError::NotAligned {
                index: i,
                labels: l.len(),
                frames: f.num_frames(),
            }));
        }
    }
    let num_units = targets[0].vocab_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut backbone = Backbone::init(backbone_cfg.clone(), seed).map_err(|e| fail(e.into()))?;
    let mut head = PredictorHead::init(
        backbone_cfg.context.model_dim,
        cfg.embed_dim,
        num_units,
        cfg.temperature,
        &mut rng,
    )
    .map_err(|e| fail(e.into()))?;

    let n_backbone = backbone.params().len();
    let init_params: Vec<Tensor> = backbone
        .params()
        .iter()
        .cloned()
        .chain([head.projection.clone(), head.code_embeddings.clone()])
        .collect();
    let mut state = AdamState::new(&init_params, cfg.adam.clone());

    let mut loss_log = Vec::with_capacity(cfg.steps);
    let mut last_good: Option<Box<PretrainedModel>> = None;
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let vars = backbone.graph_vars(&mut g);
        let head_vars = HeadVars {
            projection: g.leaf(head.projection.clone()),
            embeddings: g.leaf(head.code_embeddings.clone()),
            temperature: head.temperature,
        };
        let mut batch_loss = None;
        let mut step_ok = Ok(());
        for _ in 0..cfg.batch_size {
            let idx = rng.random_range(0..feats.len());
            let (f, z) = crop(&feats[idx], &targets[idx], cfg.max_frames, &mut rng);
            let mask = sample_mask(f.num_frames(), &cfg.mask, rng.random());
            let result = (|| -> Result<(), PretrainError> {
                let outs = backbone.features_forward_graph(&mut g, &vars, &f, &mask)?;
                let h = *outs.last().expect("at least one layer");
                let loss = masked_nll_graph(&mut g, h, &z, &mask, &head_vars)?;
                batch_loss = Some(match batch_loss {
                    Some(acc) => g.add(acc, loss)?,
                    None => loss,
                });
                Ok(())
            })();
            if let Err(e) = result {
                step_ok = Err(e);
                break;
            }
        }
        let step_result = step_ok.and_then(|_| {
            let total = g.scale(batch_loss.expect("nonempty batch"), 1.0 / cfg.batch_size as f64)?;
            let loss_value = g.value(total).scalar_value()?;
            let mut wrt = vars.clone();
            wrt.push(head_vars.projection);
            wrt.push(head_vars.embeddings);
            let grad_ids = g.backward(total, &wrt)?;
            let grads: Vec<Tensor> = grad_ids.iter().map(|&id| g.value(id).clone()).collect();
            let mut params: Vec<Tensor> = backbone
                .params()
                .iter()
                .cloned()
                .chain([head.projection.clone(), head.code_embeddings.clone()])
                .collect();
            let lr = lr_at(step as u64, &cfg.schedule)?;
            adam_step(&mut params, &grads, &mut state, lr)?;
            for (slot, new) in backbone.params_mut().iter_mut().zip(params.iter()) {
                *slot = new.clone();
            }
            head.projection = params[n_backbone].clone();
            head.code_embeddings = params[n_backbone + 1].clone();
            Ok(loss_value)
        });
        match step_result {
            Ok(loss_value) if loss_value.is_finite() => {
                loss_log.push(loss_value);
                last_good = Some(Box::new(PretrainedModel {
                    backbone: backbone.clone(),
                    head: head.clone(),
                }));
            }
            Ok(_) => {
                return Err(PretrainFailure {
                    error: PretrainError::Divergence { step },
                    last_good,
                });
            }
            Err(error) => {
                return Err(PretrainFailure { error, last_good });
            }
        }
    }
    Ok(PretrainOutcome {
        model: PretrainedModel {
            backbone,
            head,
        },
        loss_log,
    })
}

fn crop(
    feats: &FeatureSeq,
    labels: &FrameLabels,
    max_frames: usize,
    rng: &mut ChaCha8Rng,
) -> (FeatureSeq, FrameLabels) {
    let t = feats.num_frames();
    if t <= max_frames {
        return (feats.clone(), labels.clone());
    }
    let start = rng.random_range(0..=t - max_frames);
    let d = feats.dim();
    let data = feats.frames().data()[start * d..(start + max_frames) * d].to_vec();
    let cropped = FeatureSeq::new(
        Tensor::from_vec(vec![max_frames, d], data).expect("crop shape"),
        feats.frame_rate(),
    )
    .expect("crop keeps invariants");
    let ids = labels.ids()[start..start + max_frames].to_vec();
    let cropped_labels =
        FrameLabels::new(labels.utt_id.clone(), ids, labels.vocab_size()).expect("crop ids valid");
    (cropped, cropped_labels)
}

/// Fraction of masked frames whose argmax prediction matches the target,
/// evaluated with fresh seeded masks.
pub fn masked_prediction_accuracy(
    model: &PretrainedModel,
    feats: &[FeatureSeq],
    targets: &[FrameLabels],
    mask: &MaskSpec,
    seed: u64,
) -> Result<f64, PretrainError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (i, (f, z)) in feats.iter().zip(targets).enumerate() {
        let m = sample_mask(f.num_frames(), mask, seed.wrapping_add(i as u64));
        let mut g = Graph::new();
        let vars = model.backbone.graph_vars(&mut g);
        let outs = model.backbone.features_forward_graph(&mut g, &vars, f, &m)?;
        let h = FeatureSeq::new(
            g.value(*outs.last().expect("layers")).clone(),
            f.frame_rate(),
        )
        .map_err(|e| PretrainError::Backbone(e.into()))?;
        let pred = predict_units(&h, &model.head)?;
        for t in 0..f.num_frames() {
            if m.is_masked(t) {
                total += 1;
                if pred.ids()[t] == z.ids()[t] {
                    correct += 1;
                }
            }
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    })
}
