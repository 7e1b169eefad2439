//! Core data types shared by every pipeline: phoneme inventories, utterances,
//! frame-level features and labels, run-length transforms, and the on-disk
//! unit/vocab/feature file formats.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::numkit::Tensor;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty label sequence")]
    EmptyLabels,
    #[error("phoneme inventory invalid: {0}")]
    BadInventory(String),
    #[error("utterance `{0}` has no samples")]
    EmptyUtterance(String),
    #[error("utterance `{0}` contains non-finite samples")]
    NonFiniteSamples(String),
    #[error("run-length sequence invalid: {0}")]
    BadRuns(String),
    #[error("label id {id} out of range for vocab size {vocab_size}")]
    LabelOutOfRange { id: usize, vocab_size: usize },
    #[error("alignment mismatch for `{utt_id}`: {label_frames} label frames vs {feature_frames} feature frames")]
    AlignmentMismatch {
        utt_id: String,
        label_frames: usize,
        feature_frames: usize,
    },
    #[error("feature sequence invalid: {0}")]
    BadFeatures(String),
    #[error("malformed {kind} file at line {line}: {msg}")]
    MalformedFile {
        kind: &'static str,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered phone-name inventory with a designated silence token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeInventory {
    symbols: Vec<String>,
    silence_id: usize,
}

impl PhonemeInventory {
    pub fn new(symbols: Vec<String>, silence_id: usize) -> Result<Self, CorpusError> {
        if symbols.is_empty() {
            return Err(CorpusError::BadInventory("no symbols".into()));
        }
        if silence_id >= symbols.len() {
            return Err(CorpusError::BadInventory(format!(
                "silence_id {} out of range for {} symbols",
                silence_id,
                symbols.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &symbols {
            if !seen.insert(s.clone()) {
                return Err(CorpusError::BadInventory(format!("duplicate symbol `{s}`")));
            }
        }
        Ok(Self {
            symbols,
            silence_id,
        })
    }

    /// Inventory of `n` synthetic phones: silence at id 0, then `p01`, `p02`, ...
    pub fn synthetic(n: usize) -> Self {
        let mut symbols = Vec::with_capacity(n);
        symbols.push("sil".to_string());
        for i in 1..n {
            symbols.push(format!("p{i:02}"));
        }
        Self {
            symbols,
            silence_id: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn silence_id(&self) -> usize {
        self.silence_id
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == name)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }
}

impl Default for PhonemeInventory {
    /// 39 phones plus silence, the vocabulary used throughout.
    fn default() -> Self {
        Self::synthetic(40)
    }
}

/// Raw waveform at 16 kHz.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    samples: Vec<f64>,
}

pub const SAMPLE_RATE_HZ: f64 = 16_000.0;

impl Utterance {
    pub fn new(id: impl Into<String>, samples: Vec<f64>) -> Result<Self, CorpusError> {
        let id = id.into();
        if samples.is_empty() {
            return Err(CorpusError::EmptyUtterance(id));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(CorpusError::NonFiniteSamples(id));
        }
        Ok(Self { id, samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// A T x D frame matrix plus its frame rate. Frame rate is per-sequence, not
/// global: uasr inputs and backbone outputs may run at different rates.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeq {
    frames: Tensor,
    frame_rate: f64,
}

impl FeatureSeq {
    pub fn new(frames: Tensor, frame_rate: f64) -> Result<Self, CorpusError> {
        if frames.rank() != 2 {
            return Err(CorpusError::BadFeatures(format!(
                "expected a 2-D frame matrix, got rank {}",
                frames.rank()
            )));
        }
        let (t, d) = (frames.shape()[0], frames.shape()[1]);
        if t == 0 || d == 0 {
            return Err(CorpusError::BadFeatures(format!("degenerate shape {t}x{d}")));
        }
        if !frames.data().iter().all(|v| v.is_finite()) {
            return Err(CorpusError::BadFeatures("non-finite values".into()));
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(CorpusError::BadFeatures(format!("bad frame rate {frame_rate}")));
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let d = self.dim();
        &self.frames.data()[t * d..(t + 1) * d]
    }
}

/// Per-frame discrete unit ids: the SSL target sequence for one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameLabels {
    pub utt_id: String,
    ids: Vec<usize>,
    vocab_size: usize,
}

impl FrameLabels {
    pub fn new(
        utt_id: impl Into<String>,
        ids: Vec<usize>,
        vocab_size: usize,
    ) -> Result<Self, CorpusError> {
        for &id in &ids {
            if id >= vocab_size {
                return Err(CorpusError::LabelOutOfRange { id, vocab_size });
            }
        }
        Ok(Self {
            utt_id: utt_id.into(),
            ids,
            vocab_size,
        })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Deduplicated symbol sequence with run lengths; the bridge between the
/// frame-level and phone-level views of a labeling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLengthSeq {
    pub utt_id: String,
    symbols: Vec<usize>,
    lengths: Vec<usize>,
    vocab_size: usize,
}

impl RunLengthSeq {
    pub fn new(
        utt_id: impl Into<String>,
        symbols: Vec<usize>,
        lengths: Vec<usize>,
        vocab_size: usize,
    ) -> Result<Self, CorpusError> {
        if symbols.len() != lengths.len() {
            return Err(CorpusError::BadRuns(format!(
                "{} symbols vs {} lengths",
                symbols.len(),
                lengths.len()
            )));
        }
        if symbols.is_empty() {
            return Err(CorpusError::BadRuns("empty run sequence".into()));
        }
        if lengths.iter().any(|&l| l == 0) {
            return Err(CorpusError::BadRuns("zero-length run".into()));
        }
        for w in symbols.windows(2) {
            if w[0] == w[1] {
                return Err(CorpusError::BadRuns(format!(
                    "adjacent equal symbols {}",
                    w[0]
                )));
            }
        }
        for &s in &symbols {
            if s >= vocab_size {
                return Err(CorpusError::LabelOutOfRange {
                    id: s,
                    vocab_size,
                });
            }
        }
        Ok(Self {
            utt_id: utt_id.into(),
            symbols,
            lengths,
            vocab_size,
        })
    }

    pub fn symbols(&self) -> &[usize] {
        &self.symbols
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn total_frames(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Collapse consecutive identical frame labels into (symbol, run length) pairs.
pub fn dedup_runs(labels: &FrameLabels) -> Result<RunLengthSeq, CorpusError> {
    if labels.is_empty() {
        return Err(CorpusError::EmptyLabels);
    }
    let mut symbols = Vec::new();
    let mut lengths = Vec::new();
    for &id in labels.ids() {
        match symbols.last() {
            Some(&last) if last == id => *lengths.last_mut().unwrap() += 1,
            _ => {
                symbols.push(id);
                lengths.push(1);
            }
        }
    }
    RunLengthSeq::new(labels.utt_id.clone(), symbols, lengths, labels.vocab_size())
}

/// Inverse of [`dedup_runs`]: restore the frame-aligned label sequence.
pub fn expand_runs(runs: &RunLengthSeq) -> Result<FrameLabels, CorpusError> {
    let mut ids = Vec::with_capacity(runs.total_frames());
    for (&sym, &len) in runs.symbols().iter().zip(runs.lengths()) {
        ids.extend(std::iter::repeat(sym).take(len));
    }
    FrameLabels::new(runs.utt_id.clone(), ids, runs.vocab_size())
}

/// Check that a labeling is frame-aligned with a feature sequence and in range.
pub fn validate_alignment(labels: &FrameLabels, feats: &FeatureSeq) -> Result<(), CorpusError> {
    if labels.len() != feats.num_frames() {
        return Err(CorpusError::AlignmentMismatch {
            utt_id: labels.utt_id.clone(),
            label_frames: labels.len(),
            feature_frames: feats.num_frames(),
        });
    }
    for &id in labels.ids() {
        if id >= labels.vocab_size() {
            return Err(CorpusError::LabelOutOfRange {
                id,
                vocab_size: labels.vocab_size(),
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// File formats. These are bit-exact contracts: unit files are one
// `<utt_id>\t<space-separated ids>` line per utterance, vocab files are one
// `<id>\t<name>` line per token, feature files are a binary (T, D) header of
// little-endian u64 followed by T*D little-endian f64.
// ---------------------------------------------------------------------------

pub fn write_unit_file(path: &Path, labels: &[FrameLabels]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for l in labels {
        let ids: Vec<String> = l.ids().iter().map(|i| i.to_string()).collect();
        writeln!(w, "{}\t{}", l.utt_id, ids.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_unit_file(path: &Path, vocab_size: usize) -> Result<Vec<FrameLabels>, CorpusError> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (id, rest) = line.split_once('\t').ok_or(CorpusError::MalformedFile {
            kind: "unit",
            line: lineno + 1,
            msg: "missing tab separator".into(),
        })?;
        let mut ids = Vec::new();
        for tok in rest.split_whitespace() {
            let v: usize = tok.parse().map_err(|_| CorpusError::MalformedFile {
                kind: "unit",
                line: lineno + 1,
                msg: format!("bad id `{tok}`"),
            })?;
            ids.push(v);
        }
        out.push(FrameLabels::new(id, ids, vocab_size)?);
    }
    Ok(out)
}

pub fn write_vocab_file(path: &Path, names: &[String]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (id, name) in names.iter().enumerate() {
        writeln!(w, "{id}\t{name}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_vocab_file(path: &Path) -> Result<Vec<String>, CorpusError> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut entries = BTreeMap::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (id, name) = line.split_once('\t').ok_or(CorpusError::MalformedFile {
            kind: "vocab",
            line: lineno + 1,
            msg: "missing tab separator".into(),
        })?;
        let id: usize = id.parse().map_err(|_| CorpusError::MalformedFile {
            kind: "vocab",
            line: lineno + 1,
            msg: format!("bad id `{id}`"),
        })?;
        entries.insert(id, name.to_string());
    }
    let mut names = Vec::with_capacity(entries.len());
    for (expect, (id, name)) in entries.into_iter().enumerate() {
        if id != expect {
            return Err(CorpusError::MalformedFile {
                kind: "vocab",
                line: 0,
                msg: format!("ids not dense: missing {expect}"),
            });
        }
        names.push(name);
    }
    Ok(names)
}

pub fn write_feature_file(path: &Path, feats: &FeatureSeq) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let (t, d) = (feats.num_frames() as u64, feats.dim() as u64);
    w.write_all(&t.to_le_bytes())?;
    w.write_all(&d.to_le_bytes())?;
    for v in feats.frames().data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_file(path: &Path, frame_rate: f64) -> Result<FeatureSeq, CorpusError> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let t = u64::from_le_bytes(buf8) as usize;
    r.read_exact(&mut buf8)?;
    let d = u64::from_le_bytes(buf8) as usize;
    let mut data = Vec::with_capacity(t * d);
    for _ in 0..t * d {
        r.read_exact(&mut buf8)?;
        data.push(f64::from_le_bytes(buf8));
    }
    let frames = Tensor::from_vec(vec![t, d], data)
        .map_err(|e| CorpusError::BadFeatures(e.to_string()))?;
    FeatureSeq::new(frames, frame_rate)
}
