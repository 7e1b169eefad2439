//! Run configuration: one JSON document holding a master seed, paths, and two
//! named presets. The "desk" preset is small enough to train end to end; the
//! "paper" preset pins the full-size hyperparameters (mask p=0.08 / l=10,
//! peak lr 5e-4 with 8%/92% warmup/decay, weight decay 0.01, 500-unit
//! vocabularies) so they stay inspectable even though training them at full
//! scale is out of reach here.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::evalsynth::{HmmSynthConfig, StudyConfig};
use crate::numkit::{AdamConfig, ScheduleConfig};
use crate::pretrain::PretrainConfig;
use crate::uasr::UasrConfig;
use crate::units::TyingConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PresetConfig {
    pub synth: HmmSynthConfig,
    pub text_sequences: usize,
    pub uasr: UasrConfig,
    pub lt_top_k: usize,
    pub tying: TyingConfig,
    pub bpe_vocab: usize,
    pub pc_clusters: usize,
    pub pc_layer: Option<usize>,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
}

impl PresetConfig {
    /// Small preset that actually runs end to end in minutes.
    pub fn desk(seed: u64) -> Self {
        let synth = HmmSynthConfig::desk(seed);
        Self {
            text_sequences: 300,
            uasr: UasrConfig::desk(synth.feature_dim),
            lt_top_k: 500,
            tying: TyingConfig {
                max_leaves: 80,
                min_gain: 4.0,
                min_occupancy: 30.0,
            },
            bpe_vocab: 120,
            pc_clusters: 60,
            pc_layer: None,
            backbone: BackboneConfig::desk_features(synth.feature_dim),
            pretrain: PretrainConfig::desk(600),
            synth,
        }
    }

    /// Full-size hyperparameters for inspection and shape checks.
    pub fn paper(seed: u64) -> Self {
        let synth = HmmSynthConfig::desk(seed);
        let uasr = UasrConfig::desk(synth.feature_dim);
        Self {
            text_sequences: 300,
            uasr,
            lt_top_k: 500,
            tying: TyingConfig {
                max_leaves: 500,
                min_gain: 4.0,
                min_occupancy: 20.0,
            },
            bpe_vocab: 500,
            pc_clusters: 500,
            pc_layer: None,
            backbone: BackboneConfig::paper(),
            pretrain: PretrainConfig {
                steps: 400_000,
                batch_size: 4,
                max_frames: 780,
                embed_dim: 256,
                temperature: 0.1,
                mask: crate::objective::MaskSpec {
                    start_prob: 0.08,
                    span_len: 10,
                },
                schedule: ScheduleConfig::pretrain(5e-4, 400_000),
                adam: AdamConfig {
                    beta1: 0.9,
                    beta2: 0.98,
                    eps: 1e-6,
                    weight_decay: 0.01,
                },
            },
            synth,
        }
    }

    pub fn study_config(&self, seed: u64) -> StudyConfig {
        StudyConfig {
            seed,
            uasr: self.uasr.clone(),
            text_sequences: self.text_sequences,
            lt_top_k: self.lt_top_k,
            tying: self.tying.clone(),
            bpe_vocab: self.bpe_vocab,
            pc_clusters: self.pc_clusters,
            pc_layer: self.pc_layer,
            backbone: self.backbone.clone(),
            pretrain: self.pretrain.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    /// Which entry of `presets` is active.
    pub preset: String,
    pub presets: BTreeMap<String, PresetConfig>,
}

impl RunConfig {
    pub fn default_config(corpus_dir: PathBuf, out_dir: PathBuf, seed: u64) -> Self {
        let mut presets = BTreeMap::new();
        presets.insert("desk".to_string(), PresetConfig::desk(seed));
        presets.insert("paper".to_string(), PresetConfig::paper(seed));
        Self {
            seed,
            paths: Paths {
                corpus_dir,
                out_dir,
            },
            preset: "desk".to_string(),
            presets,
        }
    }

    pub fn active(&self) -> Result<&PresetConfig, String> {
        self.presets
            .get(&self.preset)
            .ok_or_else(|| format!("preset `{}` not found in config", self.preset))
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let raw = fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&raw).map_err(|e| format!("bad config {}: {e}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<(), String> {
        let json = serde_json::to_string_pretty(self).map_err(|e| e.to_string())?;
        fs::write(path, json + "\n").map_err(|e| e.to_string())
    }
}

/// Stable per-stage seed derivation from the master seed (FNV-1a over the
/// stage tag, mixed with the seed).
pub fn stage_seed(master: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ master.rotate_left(17)
}
