//! Decision-tree state tying: one binary tree per center phone, grown by
//! greedy likelihood gain over a shared leaf budget, with a single diagonal
//! Gaussian per node as the likelihood model.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::triphone::{runs_to_triphones, TriphoneKey};
use super::UnitsError;
use crate::corpus::{dedup_runs, validate_alignment, FeatureSeq, FrameLabels};

const VARIANCE_FLOOR: f64 = 1e-6;

/// Sufficient statistics of a diagonal Gaussian: frame count, per-dimension
/// sum and sum of squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussStats {
    pub n: f64,
    pub sum: Vec<f64>,
    pub sumsq: Vec<f64>,
}

impl GaussStats {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0.0,
            sum: vec![0.0; dim],
            sumsq: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    pub fn add_frame(&mut self, x: &[f64]) {
        self.n += 1.0;
        for (d, &v) in x.iter().enumerate() {
            self.sum[d] += v;
            self.sumsq[d] += v * v;
        }
    }

    pub fn merge(&mut self, other: &GaussStats) {
        self.n += other.n;
        for d in 0..self.sum.len() {
            self.sum[d] += other.sum[d];
            self.sumsq[d] += other.sumsq[d];
        }
    }

    /// `L(S) = -(n/2) * sum_d (ln var_d + ln 2pi + 1)` with floored variances.
    pub fn log_likelihood(&self) -> f64 {
        if self.n == 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for d in 0..self.sum.len() {
            let mean = self.sum[d] / self.n;
            let var = (self.sumsq[d] / self.n - mean * mean).max(VARIANCE_FLOOR);
            acc += var.ln() + (2.0 * std::f64::consts::PI).ln() + 1.0;
        }
        -(self.n / 2.0) * acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContextSide {
    Left,
    Right,
}

/// A phonetic question: does the left (or right) context phone belong to this
/// set?
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub side: ContextSide,
    pub phones: BTreeSet<usize>,
}

impl Question {
    pub fn answer(&self, key: &TriphoneKey) -> bool {
        let phone = match self.side {
            ContextSide::Left => key.left,
            ContextSide::Right => key.right,
        };
        self.phones.contains(&phone)
    }
}

/// All singleton questions over an inventory: "left == p?" and "right == p?"
/// for every phone. Broader phone-class questions can be appended by config.
pub fn singleton_questions(n_phones: usize) -> Vec<Question> {
    let mut out = Vec::with_capacity(2 * n_phones);
    for side in [ContextSide::Left, ContextSide::Right] {
        for p in 0..n_phones {
            out.push(Question {
                side,
                phones: BTreeSet::from([p]),
            });
        }
    }
    out
}

/// Accumulate per-frame features into the statistics of the frame's run
/// triphone.
pub fn accumulate_triphone_stats(
    feats: &FeatureSeq,
    labels: &FrameLabels,
    silence_id: usize,
) -> Result<BTreeMap<TriphoneKey, GaussStats>, UnitsError> {
    validate_alignment(labels, feats)?;
    let runs = dedup_runs(labels)?;
    let keys = runs_to_triphones(&runs, silence_id);
    let mut out: BTreeMap<TriphoneKey, GaussStats> = BTreeMap::new();
    let mut t = 0usize;
    for (key, &len) in keys.iter().zip(runs.lengths()) {
        let stats = out
            .entry(*key)
            .or_insert_with(|| GaussStats::new(feats.dim()));
        for _ in 0..len {
            stats.add_frame(feats.frame(t));
            t += 1;
        }
    }
    Ok(out)
}

/// Merge two accumulated maps (additive across utterances).
pub fn merge_stats(
    into: &mut BTreeMap<TriphoneKey, GaussStats>,
    from: BTreeMap<TriphoneKey, GaussStats>,
) {
    for (key, stats) in from {
        match into.get_mut(&key) {
            Some(acc) => acc.merge(&stats),
            None => {
                into.insert(key, stats);
            }
        }
    }
}

/// Likelihood gain of splitting `members` by `question`:
/// `L(yes) + L(no) - L(parent)`. Errors when either side is empty.
pub fn split_gain(
    members: &[(TriphoneKey, GaussStats)],
    question: &Question,
) -> Result<f64, UnitsError> {
    if members.is_empty() {
        return Err(UnitsError::EmptyInput("members"));
    }
    let dim = members[0].1.dim();
    let mut yes = GaussStats::new(dim);
    let mut no = GaussStats::new(dim);
    let mut parent = GaussStats::new(dim);
    for (key, stats) in members {
        parent.merge(stats);
        if question.answer(key) {
            yes.merge(stats);
        } else {
            no.merge(stats);
        }
    }
    if yes.n == 0.0 || no.n == 0.0 {
        return Err(UnitsError::DegenerateQuestion);
    }
    Ok(yes.log_likelihood() + no.log_likelihood() - parent.log_likelihood())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TyingConfig {
    pub max_leaves: usize,
    pub min_gain: f64,
    /// Minimum frame count on each side of an accepted split.
    pub min_occupancy: f64,
}

impl Default for TyingConfig {
    fn default() -> Self {
        Self {
            max_leaves: 500,
            min_gain: 1.0,
            min_occupancy: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf {
        state: usize,
    },
    Split {
        question: Question,
        yes: Box<TreeNode>,
        no: Box<TreeNode>,
    },
}

/// One routing tree per center phone; every possible triphone key routes to
/// exactly one of the `n_states` dense tied-state ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiedStateTree {
    pub n_phones: usize,
    pub n_states: usize,
    trees: Vec<TreeNode>,
}

impl TiedStateTree {
    pub fn route(&self, key: &TriphoneKey) -> usize {
        let mut node = &self.trees[key.center];
        loop {
            match node {
                TreeNode::Leaf { state } => return *state,
                TreeNode::Split { question, yes, no } => {
                    node = if question.answer(key) { yes } else { no };
                }
            }
        }
    }

    pub fn tree_for(&self, center: usize) -> &TreeNode {
        &self.trees[center]
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

/// Growth result: the tree plus the total log-likelihood after the initial
/// state and after every accepted split.
#[derive(Debug, Clone)]
pub struct TyingOutcome {
    pub tree: TiedStateTree,
    pub ll_trace: Vec<f64>,
}

struct BuildNode {
    members: Vec<(TriphoneKey, GaussStats)>,
    split: Option<(Question, usize, usize)>,
}

/// Greedy global best-gain splitting across all center-phone trees under a
/// shared leaf budget. Growth stops when the budget is reached or no split
/// clears `min_gain` and `min_occupancy`; the final state count may fall
/// below the budget.
pub fn grow_tying_tree(
    stats: &BTreeMap<TriphoneKey, GaussStats>,
    questions: &[Question],
    n_phones: usize,
    cfg: &TyingConfig,
) -> Result<TyingOutcome, UnitsError> {
    if stats.is_empty() {
        return Err(UnitsError::EmptyInput("triphone statistics"));
    }
    if cfg.max_leaves < n_phones {
        return Err(UnitsError::InvalidArgument(format!(
            "leaf budget {} below the {} center-phone roots",
            cfg.max_leaves, n_phones
        )));
    }
    if !(cfg.min_gain >= 0.0) {
        return Err(UnitsError::InvalidArgument(format!(
            "min_gain must be >= 0, got {}",
            cfg.min_gain
        )));
    }

    let mut nodes: Vec<BuildNode> = Vec::new();
    let mut roots = Vec::with_capacity(n_phones);
    for center in 0..n_phones {
        let members: Vec<(TriphoneKey, GaussStats)> = stats
            .iter()
            .filter(|(k, _)| k.center == center)
            .map(|(k, s)| (*k, s.clone()))
            .collect();
        roots.push(nodes.len());
        nodes.push(BuildNode {
            members,
            split: None,
        });
    }

    // Best admissible split per leaf, computed when the leaf appears.
    let best_split = |members: &[(TriphoneKey, GaussStats)]| -> Option<(f64, usize)> {
        if members.len() < 2 {
            return None;
        }
        let mut best: Option<(f64, usize)> = None;
        for (qi, q) in questions.iter().enumerate() {
            let mut yes_n = 0.0;
            let mut no_n = 0.0;
            for (key, s) in members {
                if q.answer(key) {
                    yes_n += s.n;
                } else {
                    no_n += s.n;
                }
            }
            if yes_n < cfg.min_occupancy || no_n < cfg.min_occupancy || yes_n == 0.0 || no_n == 0.0
            {
                continue;
            }
            let gain = split_gain(members, q).expect("both sides nonempty");
            if gain >= cfg.min_gain && best.map(|(g, _)| gain > g).unwrap_or(true) {
                best = Some((gain, qi));
            }
        }
        best
    };

    let mut leaves: Vec<usize> = roots.clone();
    let mut leaf_best: BTreeMap<usize, Option<(f64, usize)>> = leaves
        .iter()
        .map(|&id| (id, best_split(&nodes[id].members)))
        .collect();

    let mut total_ll: f64 = leaves
        .iter()
        .map(|&id| pooled_ll(&nodes[id].members))
        .sum();
    let mut trace = vec![total_ll];

    while leaves.len() < cfg.max_leaves {
        // Global best candidate; ties go to the lowest node id (stable and
        // deterministic because node ids follow creation order).
        let mut chosen: Option<(f64, usize, usize)> = None;
        for &id in &leaves {
            if let Some((gain, qi)) = leaf_best[&id] {
                let better = match chosen {
                    None => true,
                    Some((g, _, _)) => gain > g,
                };
                if better {
                    chosen = Some((gain, id, qi));
                }
            }
        }
        let Some((gain, id, qi)) = chosen else { break };
        let q = questions[qi].clone();
        let members = std::mem::take(&mut nodes[id].members);
        let (yes_members, no_members): (Vec<_>, Vec<_>) =
            members.into_iter().partition(|(k, _)| q.answer(k));
        let yes_id = nodes.len();
        nodes.push(BuildNode {
            members: yes_members,
            split: None,
        });
        let no_id = nodes.len();
        nodes.push(BuildNode {
            members: no_members,
            split: None,
        });
        nodes[id].split = Some((q, yes_id, no_id));
        leaves.retain(|&l| l != id);
        leaf_best.remove(&id);
        for child in [yes_id, no_id] {
            leaves.push(child);
            leaf_best.insert(child, best_split(&nodes[child].members));
        }
        total_ll += gain;
        trace.push(total_ll);
    }

    // Dense state ids: centers in order, yes-branch first.
    let mut next_state = 0usize;
    let mut trees = Vec::with_capacity(n_phones);
    for &root in &roots {
        trees.push(freeze(&nodes, root, &mut next_state));
    }
    Ok(TyingOutcome {
        tree: TiedStateTree {
            n_phones,
            n_states: next_state,
            trees,
        },
        ll_trace: trace,
    })
}

fn pooled_ll(members: &[(TriphoneKey, GaussStats)]) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    let mut pooled = GaussStats::new(members[0].1.dim());
    for (_, s) in members {
        pooled.merge(s);
    }
    pooled.log_likelihood()
}

fn freeze(nodes: &[BuildNode], id: usize, next_state: &mut usize) -> TreeNode {
    match &nodes[id].split {
        Some((q, yes, no)) => TreeNode::Split {
            question: q.clone(),
            yes: Box::new(freeze(nodes, *yes, next_state)),
            no: Box::new(freeze(nodes, *no, next_state)),
        },
        None => {
            let state = *next_state;
            *next_state += 1;
            TreeNode::Leaf { state }
        }
    }
}

/// Map every frame to the tied state of its run triphone.
pub fn label_pt(
    labels: &FrameLabels,
    tree: &TiedStateTree,
    silence_id: usize,
) -> Result<FrameLabels, UnitsError> {
    if labels.vocab_size() != tree.n_phones {
        return Err(UnitsError::WrongBaseVocab {
            got: labels.vocab_size(),
            want: tree.n_phones,
        });
    }
    let runs = dedup_runs(labels)?;
    let keys = runs_to_triphones(&runs, silence_id);
    let mut ids = Vec::with_capacity(labels.len());
    for (key, &len) in keys.iter().zip(runs.lengths()) {
        let state = tree.route(key);
        ids.extend(std::iter::repeat(state).take(len));
    }
    Ok(FrameLabels::new(
        labels.utt_id.clone(),
        ids,
        tree.n_states,
    )?)
}
