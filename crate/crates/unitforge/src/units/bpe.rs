//! Alignment-preserving pair merging over deduplicated phone sequences.
//!
//! Training repeatedly merges the most frequent adjacent token pair into a
//! new token. Labeling reapplies the merge list to an utterance's run
//! symbols and then writes each resulting piece id back onto every frame of
//! the runs it covers, so frame alignment survives tokenization. Silence
//! never participates in a merge.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::UnitsError;
use crate::corpus::{dedup_runs, FrameLabels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub new_id: usize,
}

/// Ordered merge list plus the full token name table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpeModel {
    pub base_size: usize,
    pub silence_id: usize,
    merges: Vec<Merge>,
    names: Vec<String>,
}

impl BpeModel {
    pub fn vocab_size(&self) -> usize {
        self.base_size + self.merges.len()
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Apply the merges in recorded order to a token sequence, tracking how
    /// many original symbols each output token covers.
    pub fn encode(&self, symbols: &[usize]) -> Vec<(usize, usize)> {
        let mut seq: Vec<(usize, usize)> = symbols.iter().map(|&s| (s, 1)).collect();
        for m in &self.merges {
            let mut out = Vec::with_capacity(seq.len());
            let mut i = 0;
            while i < seq.len() {
                if i + 1 < seq.len() && seq[i].0 == m.left && seq[i + 1].0 == m.right {
                    out.push((m.new_id, seq[i].1 + seq[i + 1].1));
                    i += 2;
                } else {
                    out.push(seq[i]);
                    i += 1;
                }
            }
            seq = out;
        }
        seq
    }

    pub fn save(&self, path: &Path) -> Result<(), UnitsError> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| UnitsError::Serde(e.to_string()))?;
        fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, UnitsError> {
        let raw = fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| UnitsError::Serde(e.to_string()))
    }
}

/// Count adjacent pairs across the working corpus, skipping any pair that
/// touches silence.
fn count_pairs(corpus: &[Vec<usize>], silence_id: usize) -> std::collections::BTreeMap<(usize, usize), u64> {
    let mut counts = std::collections::BTreeMap::new();
    for seq in corpus {
        for w in seq.windows(2) {
            if w[0] == silence_id || w[1] == silence_id {
                continue;
            }
            *counts.entry((w[0], w[1])).or_insert(0u64) += 1;
        }
    }
    counts
}

fn apply_merge(seq: &[usize], m: &Merge) -> Vec<usize> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == m.left && seq[i + 1] == m.right {
            out.push(m.new_id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

/// Train a merge list on deduplicated symbol sequences until `vocab_target`
/// tokens exist or no pair occurs at least twice. Ties on count go to the
/// lexicographically smallest pair.
pub fn train_bpe(
    corpora: &[Vec<usize>],
    vocab_target: usize,
    base_size: usize,
    silence_id: usize,
    base_names: &[String],
) -> Result<BpeModel, UnitsError> {
    if corpora.is_empty() || corpora.iter().all(|s| s.is_empty()) {
        return Err(UnitsError::EmptyInput("bpe corpora"));
    }
    if base_names.len() != base_size {
        return Err(UnitsError::InvalidArgument(format!(
            "{} base names for base size {base_size}",
            base_names.len()
        )));
    }
    if vocab_target < base_size {
        return Err(UnitsError::InvalidArgument(format!(
            "vocab target {vocab_target} below base size {base_size}"
        )));
    }
    for seq in corpora {
        if let Some(&bad) = seq.iter().find(|&&s| s >= base_size) {
            return Err(UnitsError::InvalidArgument(format!(
                "symbol {bad} out of range for base size {base_size}"
            )));
        }
    }
    let mut working: Vec<Vec<usize>> = corpora.to_vec();
    let mut names: Vec<String> = base_names.to_vec();
    let mut merges = Vec::new();
    while base_size + merges.len() < vocab_target {
        let counts = count_pairs(&working, silence_id);
        // Highest count wins; the BTreeMap gives lexicographic pair order, so
        // taking a strictly-greater max keeps the smallest pair on ties.
        let mut best: Option<((usize, usize), u64)> = None;
        for (pair, count) in counts {
            if count >= 2 && best.map(|(_, c)| count > c).unwrap_or(true) {
                best = Some((pair, count));
            }
        }
        let Some(((left, right), _)) = best else { break };
        let new_id = base_size + merges.len();
        let m = Merge {
            left,
            right,
            new_id,
        };
        for seq in &mut working {
            *seq = apply_merge(seq, &m);
        }
        names.push(format!("{}+{}", names[left], names[right]));
        merges.push(m);
    }
    Ok(BpeModel {
        base_size,
        silence_id,
        merges,
        names,
    })
}

/// Relabel frames with phoneme-piece ids: deduplicate, merge the run
/// symbols, and give every frame of a covered run its piece id. Pieces never
/// split a run and silence frames keep the silence id.
pub fn label_pp(labels: &FrameLabels, model: &BpeModel) -> Result<FrameLabels, UnitsError> {
    if labels.vocab_size() != model.base_size {
        return Err(UnitsError::WrongBaseVocab {
            got: labels.vocab_size(),
            want: model.base_size,
        });
    }
    let runs = dedup_runs(labels)?;
    let tokens = model.encode(runs.symbols());
    let mut ids = Vec::with_capacity(labels.len());
    let mut run_idx = 0usize;
    for (token, covered) in tokens {
        for _ in 0..covered {
            let len = runs.lengths()[run_idx];
            ids.extend(std::iter::repeat(token).take(len));
            run_idx += 1;
        }
    }
    debug_assert_eq!(run_idx, runs.symbols().len());
    Ok(FrameLabels::new(
        labels.utt_id.clone(),
        ids,
        model.vocab_size(),
    )?)
}
