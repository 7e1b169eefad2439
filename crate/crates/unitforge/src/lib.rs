//! unitforge: frame-aligned discrete-unit discovery and masked-prediction
//! pre-training at desk scale.
//!
//! The toolkit covers the whole pipeline: a synthetic oracle corpus with known
//! phone and triphone-state alignments, an adversarial unsupervised phoneme
//! labeler that produces frame-level monophone units, four context-dependent
//! unit refinements (logical triphones, tied states, phoneme pieces, k-means
//! clusters), a small convolutional + transformer backbone trained with the
//! masked-prediction objective, and metrics that compare the unit inventories
//! against the oracle's ground truth.

pub mod corpus;
pub mod evalsynth;
pub mod backbone;
pub mod commands;
pub mod config;
pub mod numkit;
pub mod uasr;
pub mod units;
pub mod objective;
pub mod pretrain;
