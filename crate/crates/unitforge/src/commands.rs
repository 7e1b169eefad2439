//! Command implementations behind the CLI: everything reads one RunConfig,
//! derives stage seeds from the master seed, and writes byte-deterministic
//! artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::backbone::Backbone;
use crate::config::{stage_seed, PresetConfig, RunConfig};
use crate::corpus::{
    self, read_unit_file, write_feature_file, write_unit_file, write_vocab_file, FeatureSeq,
    FrameLabels, PhonemeInventory,
};
use crate::evalsynth::{
    self, compare_targets, effective_vocab, linear_probe, nmi, purity, sample_text, MetricsReport,
    OracleCorpus, Pipeline, PipelineMetrics, PipelineRow,
};
use crate::numkit::{load_tensors, save_tensors, Tensor};
use crate::objective::PredictorHead;
use crate::pretrain::{masked_prediction_accuracy, pretrain, PretrainedModel};
use crate::uasr::{frame_phoneme_labels, train_uasr, Generator, UasrConfig};
use crate::units::{
    accumulate_triphone_stats, build_lt_vocab, grow_tying_tree, kmeans_fit, label_lt, label_pc,
    label_pp, label_pt, merge_stats, singleton_questions, train_bpe,
};

/// Command failures map onto process exit codes: 2 for I/O and config
/// problems, 3 for a missing prerequisite artifact, 4 for numeric divergence.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("missing prerequisite: {what}; run `unitforge {needed}` first")]
    MissingPrereq { what: String, needed: String },
    #[error("numeric divergence: {0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::MissingPrereq { .. } => 3,
            CliError::Divergence(_) => 4,
        }
    }

    fn io(e: impl std::fmt::Display) -> Self {
        CliError::Io(e.to_string())
    }
}

fn active(cfg: &RunConfig) -> Result<&PresetConfig, CliError> {
    cfg.active().map_err(CliError::Config)
}

// ---------------------------------------------------------------------------
// Corpus directory layout.
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct CorpusManifest {
    seed: u64,
    frame_rate: f64,
    feature_dim: usize,
    inventory: Vec<String>,
    silence_id: usize,
    n_states: usize,
    utterances: Vec<UttEntry>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct UttEntry {
    id: String,
    frames: usize,
    file: String,
}

const CORPUS_MANIFEST: &str = "manifest.json";

pub fn write_corpus(dir: &Path, corpus: &OracleCorpus, text_lines: &[String], seed: u64) -> Result<(), CliError> {
    fs::create_dir_all(dir.join("feats")).map_err(CliError::io)?;
    let mut entries = Vec::new();
    for u in &corpus.utterances {
        let file = format!("feats/{}.feat", u.phones.utt_id);
        write_feature_file(&dir.join(&file), &u.feats).map_err(CliError::io)?;
        entries.push(UttEntry {
            id: u.phones.utt_id.clone(),
            frames: u.feats.num_frames(),
            file,
        });
    }
    let manifest = CorpusManifest {
        seed,
        frame_rate: 50.0,
        feature_dim: corpus.utterances[0].feats.dim(),
        inventory: corpus.inventory.symbols().to_vec(),
        silence_id: corpus.inventory.silence_id(),
        n_states: corpus.num_states(),
        utterances: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(CliError::io)?;
    fs::write(dir.join(CORPUS_MANIFEST), json + "\n").map_err(CliError::io)?;

    write_vocab_file(&dir.join("phones.vocab"), corpus.inventory.symbols()).map_err(CliError::io)?;
    let state_names: Vec<String> = corpus
        .state_keys
        .iter()
        .map(|k| k.display(corpus.inventory.symbols()))
        .collect();
    write_vocab_file(&dir.join("states.vocab"), &state_names).map_err(CliError::io)?;
    write_unit_file(&dir.join("truth_phones.units"), &corpus.phone_labels())
        .map_err(CliError::io)?;
    write_unit_file(&dir.join("truth_states.units"), &corpus.state_labels())
        .map_err(CliError::io)?;
    fs::write(dir.join("text.txt"), text_lines.join("\n") + "\n").map_err(CliError::io)?;
    Ok(())
}

/// On-disk corpus handle: features plus ground truth, loaded lazily by the
/// commands that need them.
pub struct LoadedCorpus {
    pub inventory: PhonemeInventory,
    pub feats: Vec<FeatureSeq>,
    pub truth_phones: Vec<FrameLabels>,
    pub truth_states: Vec<FrameLabels>,
    pub text: Vec<Vec<usize>>,
}

pub fn load_corpus(dir: &Path) -> Result<LoadedCorpus, CliError> {
    let manifest_path = dir.join(CORPUS_MANIFEST);
    if !manifest_path.exists() {
        return Err(CliError::MissingPrereq {
            what: format!("corpus manifest {}", manifest_path.display()),
            needed: "synth".to_string(),
        });
    }
    let raw = fs::read_to_string(&manifest_path).map_err(CliError::io)?;
    let manifest: CorpusManifest = serde_json::from_str(&raw).map_err(CliError::io)?;
    let inventory = PhonemeInventory::new(manifest.inventory.clone(), manifest.silence_id)
        .map_err(CliError::io)?;
    let mut feats = Vec::with_capacity(manifest.utterances.len());
    for e in &manifest.utterances {
        feats.push(
            corpus::read_feature_file(&dir.join(&e.file), manifest.frame_rate)
                .map_err(CliError::io)?,
        );
    }
    let truth_phones =
        read_unit_file(&dir.join("truth_phones.units"), inventory.len()).map_err(CliError::io)?;
    let truth_states =
        read_unit_file(&dir.join("truth_states.units"), manifest.n_states).map_err(CliError::io)?;
    let text_raw = fs::read_to_string(dir.join("text.txt")).map_err(CliError::io)?;
    let mut text = Vec::new();
    for line in text_raw.lines() {
        if line.is_empty() {
            continue;
        }
        let mut seq = Vec::new();
        for name in line.split_whitespace() {
            let id = inventory
                .id_of(name)
                .ok_or_else(|| CliError::Io(format!("unknown phone `{name}` in text.txt")))?;
            seq.push(id);
        }
        text.push(seq);
    }
    Ok(LoadedCorpus {
        inventory,
        feats,
        truth_phones,
        truth_states,
        text,
    })
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub fn cmd_synth(cfg: &RunConfig) -> Result<(), CliError> {
    let preset = active(cfg)?;
    let mut synth_cfg = preset.synth.clone();
    synth_cfg.seed = stage_seed(cfg.seed, "synth");
    let corpus = evalsynth::synth_corpus(&synth_cfg).map_err(CliError::io)?;
    let text = sample_text(&synth_cfg, preset.text_sequences, stage_seed(cfg.seed, "text"))
        .map_err(CliError::io)?;
    let names = corpus.inventory.symbols();
    let text_lines: Vec<String> = text
        .sequences()
        .iter()
        .map(|seq| {
            seq.iter()
                .map(|&id| names[id].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    write_corpus(&cfg.paths.corpus_dir, &corpus, &text_lines, synth_cfg.seed)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train-uasr
// ---------------------------------------------------------------------------

const UASR_DIR: &str = "uasr";
const UASR_CONFIG: &str = "uasr.json";

fn save_generator(dir: &Path, gen: &Generator, cfg: &UasrConfig) -> Result<(), CliError> {
    let tensors: Vec<(String, &Tensor)> = vec![
        ("hidden_w".into(), &gen.hidden_w),
        ("hidden_b".into(), &gen.hidden_b),
        ("out_w".into(), &gen.out_w),
        ("out_b".into(), &gen.out_b),
        ("aux_w".into(), &gen.aux_w),
        ("aux_b".into(), &gen.aux_b),
    ];
    save_tensors(dir, &tensors).map_err(CliError::io)?;
    let json = serde_json::to_string_pretty(cfg).map_err(CliError::io)?;
    fs::write(dir.join(UASR_CONFIG), json + "\n").map_err(CliError::io)?;
    Ok(())
}

pub fn load_generator(dir: &Path) -> Result<(Generator, UasrConfig), CliError> {
    let cfg_path = dir.join(UASR_CONFIG);
    if !cfg_path.exists() {
        return Err(CliError::MissingPrereq {
            what: format!("uasr checkpoint {}", dir.display()),
            needed: "train-uasr".to_string(),
        });
    }
    let raw = fs::read_to_string(&cfg_path).map_err(CliError::io)?;
    let cfg: UasrConfig = serde_json::from_str(&raw).map_err(CliError::io)?;
    let mut tensors = load_tensors(dir).map_err(CliError::io)?;
    let mut take = |name: &str| -> Result<Tensor, CliError> {
        tensors
            .remove(name)
            .ok_or_else(|| CliError::Io(format!("uasr checkpoint missing tensor `{name}`")))
    };
    let gen = Generator {
        hidden_w: take("hidden_w")?,
        hidden_b: take("hidden_b")?,
        out_w: take("out_w")?,
        out_b: take("out_b")?,
        aux_w: take("aux_w")?,
        aux_b: take("aux_b")?,
        train_stride: cfg.train_stride,
    };
    Ok((gen, cfg))
}

pub fn cmd_train_uasr(cfg: &RunConfig) -> Result<(), CliError> {
    let preset = active(cfg)?;
    let corpus = load_corpus(&cfg.paths.corpus_dir)?;
    let text = crate::uasr::UnpairedText::new(corpus.text.clone(), corpus.inventory.len())
        .map_err(CliError::io)?;
    let mut uasr_cfg = preset.uasr.clone();
    uasr_cfg.inventory_size = corpus.inventory.len();
    uasr_cfg.silence_id = corpus.inventory.silence_id();
    uasr_cfg.feature_dim = corpus.feats[0].dim();
    let out_dir = cfg.paths.out_dir.join(UASR_DIR);
    match train_uasr(&corpus.feats, &text, &uasr_cfg, stage_seed(cfg.seed, "uasr")) {
        Ok(trained) => {
            save_generator(&out_dir, &trained.generator, &uasr_cfg)?;
            let log = serde_json::to_string_pretty(&trained.log).map_err(CliError::io)?;
            fs::write(out_dir.join("loss_log.json"), log + "\n").map_err(CliError::io)?;
            Ok(())
        }
        Err(failure) => {
            let message = failure.to_string();
            if let Some(last) = failure.last_good {
                save_generator(&out_dir, &last.generator, &uasr_cfg)?;
                let log = serde_json::to_string_pretty(&last.log).map_err(CliError::io)?;
                fs::write(out_dir.join("loss_log.json"), log + "\n").map_err(CliError::io)?;
            }
            Err(CliError::Divergence(message))
        }
    }
}

// ---------------------------------------------------------------------------
// gen-units
// ---------------------------------------------------------------------------

fn units_path(cfg: &RunConfig, p: Pipeline) -> PathBuf {
    cfg.paths.out_dir.join("units").join(format!("{}.units", p.name()))
}

fn read_units(cfg: &RunConfig, p: Pipeline, vocab_size: usize) -> Result<Vec<FrameLabels>, CliError> {
    let path = units_path(cfg, p);
    if !path.exists() {
        return Err(CliError::MissingPrereq {
            what: format!("unit file {}", path.display()),
            needed: format!("gen-units --type {}", p.name()),
        });
    }
    read_unit_file(&path, vocab_size).map_err(CliError::io)
}

/// Vocab size of an on-disk unit file (max id + 1): unit files do not carry
/// their vocab, the matching model file does, so this is only used as a
/// fallback for evaluation.
fn infer_vocab(path: &Path) -> Result<usize, CliError> {
    let labels = read_unit_file(path, usize::MAX).map_err(CliError::io)?;
    Ok(labels
        .iter()
        .flat_map(|l| l.ids().iter().copied())
        .max()
        .map(|m| m + 1)
        .unwrap_or(1))
}

pub fn cmd_gen_units(cfg: &RunConfig, pipeline: Pipeline) -> Result<(), CliError> {
    let preset = active(cfg)?;
    let corpus = load_corpus(&cfg.paths.corpus_dir)?;
    let units_dir = cfg.paths.out_dir.join("units");
    let models_dir = cfg.paths.out_dir.join("models");
    fs::create_dir_all(&units_dir).map_err(CliError::io)?;
    fs::create_dir_all(&models_dir).map_err(CliError::io)?;
    let silence = corpus.inventory.silence_id();
    let base = corpus.inventory.len();

    let mono = |cfg: &RunConfig| -> Result<Vec<FrameLabels>, CliError> {
        read_units(cfg, Pipeline::Mono, base)
    };

    let (labels, names): (Vec<FrameLabels>, Vec<String>) = match pipeline {
        Pipeline::Mono => {
            let (generator, _) = load_generator(&cfg.paths.out_dir.join(UASR_DIR))?;
            let mut labels = Vec::with_capacity(corpus.feats.len());
            for (f, truth) in corpus.feats.iter().zip(&corpus.truth_phones) {
                let mut l = frame_phoneme_labels(&generator, f).map_err(CliError::io)?;
                l.utt_id = truth.utt_id.clone();
                labels.push(l);
            }
            (labels, corpus.inventory.symbols().to_vec())
        }
        Pipeline::Lt => {
            let mono = mono(cfg)?;
            let runs: Vec<_> = mono
                .iter()
                .map(corpus::dedup_runs)
                .collect::<Result<_, _>>()
                .map_err(CliError::io)?;
            let vocab = build_lt_vocab(runs.iter(), preset.lt_top_k, base, silence);
            let labels = mono
                .iter()
                .map(|l| label_lt(l, &vocab))
                .collect::<Result<_, _>>()
                .map_err(CliError::io)?;
            let names = vocab.token_names(corpus.inventory.symbols());
            let json = serde_json::to_string_pretty(&vocab).map_err(CliError::io)?;
            fs::write(models_dir.join("lt.json"), json + "\n").map_err(CliError::io)?;
            (labels, names)
        }
        Pipeline::Pt => {
            let mono = mono(cfg)?;
            let mut stats = BTreeMap::new();
            for (f, l) in corpus.feats.iter().zip(&mono) {
                merge_stats(
                    &mut stats,
                    accumulate_triphone_stats(f, l, silence).map_err(CliError::io)?,
                );
            }
            let questions = singleton_questions(base);
            let outcome = grow_tying_tree(&stats, &questions, base, &preset.tying)
                .map_err(CliError::io)?;
            outcome
                .tree
                .save(&models_dir.join("pt.json"))
                .map_err(CliError::io)?;
            let labels = mono
                .iter()
                .map(|l| label_pt(l, &outcome.tree, silence))
                .collect::<Result<_, _>>()
                .map_err(CliError::io)?;
            let names = (0..outcome.tree.n_states).map(|s| format!("s{s:04}")).collect();
            (labels, names)
        }
        Pipeline::Pp => {
            let mono = mono(cfg)?;
            let seqs: Vec<Vec<usize>> = mono
                .iter()
                .map(|l| Ok(corpus::dedup_runs(l).map_err(CliError::io)?.symbols().to_vec()))
                .collect::<Result<_, CliError>>()?;
            let model = train_bpe(
                &seqs,
                preset.bpe_vocab,
                base,
                silence,
                corpus.inventory.symbols(),
            )
            .map_err(CliError::io)?;
            model.save(&models_dir.join("pp.json")).map_err(CliError::io)?;
            let labels = mono
                .iter()
                .map(|l| label_pp(l, &model))
                .collect::<Result<_, _>>()
                .map_err(CliError::io)?;
            (labels, model.names().to_vec())
        }
        Pipeline::Pc => {
            let ckpt = checkpoint_dir(cfg, Pipeline::Mono);
            if !ckpt.join("head").join("head.json").exists() {
                return Err(CliError::MissingPrereq {
                    what: format!("trained checkpoint {}", ckpt.display()),
                    needed: "pretrain --type mono".to_string(),
                });
            }
            let model = load_pretrained(&ckpt)?;
            let layers = model.backbone.config.context.num_layers;
            let layer = preset.pc_layer.unwrap_or(layers / 2).min(layers - 1);
            let mut reprs = Vec::with_capacity(corpus.feats.len());
            for f in &corpus.feats {
                reprs.push(model.backbone.extract_layer(f, layer).map_err(CliError::io)?);
            }
            let dim = reprs[0].dim();
            let mut points = Vec::new();
            for r in &reprs {
                points.extend_from_slice(r.frames().data());
            }
            let km = kmeans_fit(
                &points,
                dim,
                preset.pc_clusters,
                stage_seed(cfg.seed, "pc"),
                15,
                1e-6,
            )
            .map_err(CliError::io)?;
            km.save(&models_dir, "pc").map_err(CliError::io)?;
            let labels: Vec<FrameLabels> = reprs
                .iter()
                .zip(&corpus.truth_phones)
                .map(|(r, truth)| {
                    let mut l = label_pc(r, &km).map_err(CliError::io)?;
                    l.utt_id = truth.utt_id.clone();
                    Ok(l)
                })
                .collect::<Result<_, CliError>>()?;
            let names = (0..km.k()).map(|c| format!("c{c:04}")).collect();
            (labels, names)
        }
    };

    write_unit_file(&units_path(cfg, pipeline), &labels).map_err(CliError::io)?;
    write_vocab_file(
        &units_dir.join(format!("{}.vocab", pipeline.name())),
        &names,
    )
    .map_err(CliError::io)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

fn checkpoint_dir(cfg: &RunConfig, p: Pipeline) -> PathBuf {
    cfg.paths.out_dir.join("checkpoints").join(p.name())
}

fn save_pretrained(dir: &Path, model: &PretrainedModel) -> Result<(), CliError> {
    model.backbone.save(&dir.join("backbone")).map_err(CliError::io)?;
    let head_dir = dir.join("head");
    save_tensors(
        &head_dir,
        &[
            ("projection".into(), &model.head.projection),
            ("embeddings".into(), &model.head.code_embeddings),
        ],
    )
    .map_err(CliError::io)?;
    let meta = serde_json::json!({ "temperature": model.head.temperature });
    fs::write(
        head_dir.join("head.json"),
        serde_json::to_string_pretty(&meta).map_err(CliError::io)? + "\n",
    )
    .map_err(CliError::io)?;
    Ok(())
}

pub fn load_pretrained(dir: &Path) -> Result<PretrainedModel, CliError> {
    let backbone = Backbone::load(&dir.join("backbone")).map_err(CliError::io)?;
    let head_dir = dir.join("head");
    let raw = fs::read_to_string(head_dir.join("head.json")).map_err(CliError::io)?;
    let meta: serde_json::Value = serde_json::from_str(&raw).map_err(CliError::io)?;
    let temperature = meta["temperature"].as_f64().unwrap_or(0.1);
    let mut tensors = load_tensors(&head_dir).map_err(CliError::io)?;
    let projection = tensors
        .remove("projection")
        .ok_or_else(|| CliError::Io("head checkpoint missing projection".into()))?;
    let embeddings = tensors
        .remove("embeddings")
        .ok_or_else(|| CliError::Io("head checkpoint missing embeddings".into()))?;
    let head = PredictorHead::new(projection, embeddings, temperature).map_err(CliError::io)?;
    Ok(PretrainedModel { backbone, head })
}

pub fn cmd_pretrain(cfg: &RunConfig, pipeline: Pipeline) -> Result<(), CliError> {
    let preset = active(cfg)?;
    let corpus = load_corpus(&cfg.paths.corpus_dir)?;
    let vocab = infer_vocab(&units_path(cfg, pipeline)).or(Err(CliError::MissingPrereq {
        what: format!("unit file {}", units_path(cfg, pipeline).display()),
        needed: format!("gen-units --type {}", pipeline.name()),
    }))?;
    let targets = read_units(cfg, pipeline, vocab)?;
    let dir = checkpoint_dir(cfg, pipeline);
    let seed = stage_seed(cfg.seed, &format!("pretrain-{}", pipeline.name()));
    match pretrain(&corpus.feats, &targets, &preset.backbone, &preset.pretrain, seed) {
        Ok(out) => {
            save_pretrained(&dir, &out.model)?;
            let log = serde_json::to_string_pretty(&out.loss_log).map_err(CliError::io)?;
            fs::write(dir.join("loss_log.json"), log + "\n").map_err(CliError::io)?;
            Ok(())
        }
        Err(failure) => {
            let message = failure.to_string();
            if let Some(last) = failure.last_good {
                save_pretrained(&dir, &last)?;
            }
            Err(CliError::Divergence(message))
        }
    }
}

// ---------------------------------------------------------------------------
// eval and report
// ---------------------------------------------------------------------------

pub fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = load_corpus(&cfg.paths.corpus_dir)?;
    let mut rows = Vec::new();
    for p in Pipeline::all() {
        let path = units_path(cfg, p);
        if !path.exists() {
            continue;
        }
        let row = eval_pipeline(cfg, &corpus, p).unwrap_or_else(|e| PipelineRow {
            pipeline: p.name().to_string(),
            error: Some(e.to_string()),
            metrics: None,
        });
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::MissingPrereq {
            what: "any unit file under units/".to_string(),
            needed: "gen-units --type mono".to_string(),
        });
    }
    let report = MetricsReport {
        seed: cfg.seed,
        rows,
    };
    let json = report.to_json().map_err(CliError::io)?;
    fs::write(cfg.paths.out_dir.join("report.json"), json + "\n").map_err(CliError::io)?;
    Ok(())
}

fn eval_pipeline(
    cfg: &RunConfig,
    corpus: &LoadedCorpus,
    p: Pipeline,
) -> Result<PipelineRow, CliError> {
    let preset = active(cfg)?;
    let path = units_path(cfg, p);
    let vocab = infer_vocab(&path)?;
    let units = read_unit_file(&path, vocab).map_err(CliError::io)?;
    let mut metrics = PipelineMetrics {
        vocab_size: vocab,
        frame_purity: purity(&units, &corpus.truth_phones).map_err(CliError::io)?,
        inverse_purity: purity(&corpus.truth_phones, &units).map_err(CliError::io)?,
        nmi_phones: nmi(&units, &corpus.truth_phones).map_err(CliError::io)?,
        nmi_states: nmi(&units, &corpus.truth_states).map_err(CliError::io)?,
        effective_vocab: effective_vocab(&units),
        masked_pred_accuracy: None,
        probe_accuracy: None,
    };
    let ckpt = checkpoint_dir(cfg, p);
    if ckpt.join("head").join("head.json").exists() {
        let model = load_pretrained(&ckpt)?;
        metrics.masked_pred_accuracy = Some(
            masked_prediction_accuracy(
                &model,
                &corpus.feats,
                &units,
                &preset.pretrain.mask,
                stage_seed(cfg.seed, "eval-mask"),
            )
            .map_err(CliError::io)?,
        );
        let last = model.backbone.config.context.num_layers - 1;
        let mut reprs = Vec::with_capacity(corpus.feats.len());
        for f in &corpus.feats {
            reprs.push(model.backbone.extract_layer(f, last).map_err(CliError::io)?);
        }
        metrics.probe_accuracy = Some(
            linear_probe(&reprs, &corpus.truth_phones, stage_seed(cfg.seed, "eval-probe"))
                .map_err(CliError::io)?,
        );
    }
    Ok(PipelineRow {
        pipeline: p.name().to_string(),
        error: None,
        metrics: Some(metrics),
    })
}

pub fn cmd_report(cfg: &RunConfig) -> Result<String, CliError> {
    let path = cfg.paths.out_dir.join("report.json");
    if !path.exists() {
        return Err(CliError::MissingPrereq {
            what: format!("report {}", path.display()),
            needed: "eval".to_string(),
        });
    }
    let raw = fs::read_to_string(&path).map_err(CliError::io)?;
    let report: MetricsReport = serde_json::from_str(&raw).map_err(CliError::io)?;
    let table = report.render_table();
    fs::write(cfg.paths.out_dir.join("report.txt"), &table).map_err(CliError::io)?;
    Ok(table)
}

/// The full in-process study (used by the acceptance suite and exposed for
/// scripting): synthesize, train, and compare in one call.
pub fn run_study(
    preset: &PresetConfig,
    pipelines: &[Pipeline],
    seed: u64,
) -> Result<MetricsReport, CliError> {
    let mut synth_cfg = preset.synth.clone();
    synth_cfg.seed = stage_seed(seed, "synth");
    let corpus = evalsynth::synth_corpus(&synth_cfg).map_err(CliError::io)?;
    let text = sample_text(&synth_cfg, preset.text_sequences, stage_seed(seed, "text"))
        .map_err(CliError::io)?;
    let study = preset.study_config(seed);
    compare_targets(&corpus, &text, pipelines, &study).map_err(CliError::io)
}
