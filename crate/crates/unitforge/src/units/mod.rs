//! The four context-dependent unit generators: logical triphones, decision
//! tree state tying (physical triphones), alignment-preserving phoneme-piece
//! merging, and k-means clustering of learned representations.

pub mod bpe;
pub mod kmeans;
pub mod triphone;
pub mod tying;

pub use bpe::{label_pp, train_bpe, BpeModel};
pub use kmeans::{kmeans_fit, label_pc, KMeansModel};
pub use triphone::{build_lt_vocab, label_lt, runs_to_triphones, LogicalTriphoneVocab, TriphoneKey};
pub use tying::{
    accumulate_triphone_stats, grow_tying_tree, label_pt, merge_stats, singleton_questions,
    split_gain, ContextSide, GaussStats, Question, TiedStateTree, TyingConfig, TyingOutcome,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum UnitsError {
    #[error("empty {0}")]
    EmptyInput(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("labels use vocab {got}, expected the base inventory of {want}")]
    WrongBaseVocab { got: usize, want: usize },
    #[error("need at least {k} points for k-means, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("point dim {got} does not match model dim {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("degenerate question: one side is empty")]
    DegenerateQuestion,
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("serialization failed: {0}")]
    Serde(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
