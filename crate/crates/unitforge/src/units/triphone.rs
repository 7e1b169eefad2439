//! Logical triphones: (left, center, right) phone triples over run-length
//! sequences, and the ranked vocabulary that keeps the most frequent triples
//! as new tokens while everything else falls back to its center monophone.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::UnitsError;
use crate::corpus::{dedup_runs, FrameLabels, RunLengthSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TriphoneKey {
    pub left: usize,
    pub center: usize,
    pub right: usize,
}

impl TriphoneKey {
    pub fn new(left: usize, center: usize, right: usize) -> Self {
        Self {
            left,
            center,
            right,
        }
    }

    /// Kaldi-style display name `left-center+right` over inventory names.
    pub fn display(&self, names: &[String]) -> String {
        format!(
            "{}-{}+{}",
            names[self.left], names[self.center], names[self.right]
        )
    }
}

/// One triphone key per run; sequence edges use silence as context.
pub fn runs_to_triphones(runs: &RunLengthSeq, silence_id: usize) -> Vec<TriphoneKey> {
    let syms = runs.symbols();
    (0..syms.len())
        .map(|i| {
            let left = if i == 0 { silence_id } else { syms[i - 1] };
            let right = if i + 1 == syms.len() {
                silence_id
            } else {
                syms[i + 1]
            };
            TriphoneKey::new(left, syms[i], right)
        })
        .collect()
}

/// Ranked triphone vocabulary: monophone ids stay `[0, base_size)`, selected
/// triphones get ids `[base_size, base_size + K)` in rank order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct LogicalTriphoneVocab {
    pub base_size: usize,
    pub silence_id: usize,
    selected: Vec<TriphoneKey>,
    #[serde(skip)]
    lookup: BTreeMap<TriphoneKey, usize>,
}

impl LogicalTriphoneVocab {
    pub fn new(base_size: usize, silence_id: usize, selected: Vec<TriphoneKey>) -> Self {
        let lookup = selected
            .iter()
            .enumerate()
            .map(|(rank, &key)| (key, base_size + rank))
            .collect();
        Self {
            base_size,
            silence_id,
            selected,
            lookup,
        }
    }

    /// Rebuild the lookup after deserialization.
    pub fn rebuild(self) -> Self {
        Self::new(self.base_size, self.silence_id, self.selected)
    }

    pub fn vocab_size(&self) -> usize {
        self.base_size + self.selected.len()
    }

    pub fn selected(&self) -> &[TriphoneKey] {
        &self.selected
    }

    pub fn id_of(&self, key: &TriphoneKey) -> Option<usize> {
        self.lookup.get(key).copied()
    }

    /// Token names for the vocab file: inventory names for the base ids,
    /// `l-c+r` for selected triphones.
    pub fn token_names(&self, inventory_names: &[String]) -> Vec<String> {
        let mut names: Vec<String> = inventory_names.to_vec();
        for key in &self.selected {
            names.push(key.display(inventory_names));
        }
        names
    }
}

/// Select the `k` most frequent triphones over the corpus (ties resolved by
/// lexicographic key order). Silence-center triples are skipped: they always
/// collapse back to the silence token during labeling, so keeping them would
/// waste vocabulary slots.
pub fn build_lt_vocab<'a>(
    corpus: impl IntoIterator<Item = &'a RunLengthSeq>,
    k: usize,
    base_size: usize,
    silence_id: usize,
) -> LogicalTriphoneVocab {
    let mut counts: BTreeMap<TriphoneKey, u64> = BTreeMap::new();
    for runs in corpus {
        for key in runs_to_triphones(runs, silence_id) {
            if key.center == silence_id {
                continue;
            }
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(TriphoneKey, u64)> = counts.into_iter().collect();
    // Descending count; the BTreeMap iteration already gives lexicographic
    // order inside each count class, and sort_by is stable.
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    let selected = ranked.into_iter().take(k).map(|(key, _)| key).collect();
    LogicalTriphoneVocab::new(base_size, silence_id, selected)
}

/// Relabel frames with triphone ids where selected, center monophones
/// otherwise. Silence-center frames always keep the silence id.
pub fn label_lt(
    labels: &FrameLabels,
    vocab: &LogicalTriphoneVocab,
) -> Result<FrameLabels, UnitsError> {
    if labels.vocab_size() != vocab.base_size {
        return Err(UnitsError::WrongBaseVocab {
            got: labels.vocab_size(),
            want: vocab.base_size,
        });
    }
    let runs = dedup_runs(labels)?;
    let keys = runs_to_triphones(&runs, vocab.silence_id);
    let mut ids = Vec::with_capacity(labels.len());
    for (key, &len) in keys.iter().zip(runs.lengths()) {
        let id = if key.center == vocab.silence_id {
            vocab.silence_id
        } else {
            vocab.id_of(key).unwrap_or(key.center)
        };
        ids.extend(std::iter::repeat(id).take(len));
    }
    Ok(FrameLabels::new(
        labels.utt_id.clone(),
        ids,
        vocab.vocab_size(),
    )?)
}
