//! Preference optimization on post-edited machine translation at desk scale.
//!
//! A reverse-mode autodiff tape drives a tiny decoder-only language model,
//! trained with SFT, DPO, IPO, CPO or dCPO on synthetic (source, MT,
//! post-edit) triples. Corpus-level BLEU, chrF and TER, a trainer with
//! early stopping, and the log-probability analyses round it out.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod rng;
pub mod tensor;

pub mod model;
pub mod vocab;

pub mod objectives;

pub mod corpus;
pub mod dataset;
pub mod metrics;

pub mod analysis;
pub mod experiment;
pub mod trainer;

pub use analysis::{PairScoreRecord, PreferenceSummary, SignificanceReport};
pub use autodiff::{Graph, Var};
pub use corpus::{ApeTriple, CorpusSpec, Split};
pub use error::{Error, Result};
pub use experiment::{Condition, ExperimentConfig, RunReport};
pub use metrics::MetricReport;
pub use model::{greedy_decode, score, LmParams, ModelConfig, ScoredSequence};
pub use objectives::{LossBreakdown, ObjectiveConfig, ObjectiveKind, PairScores, PreferencePair};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, TrainState};
pub use vocab::Vocabulary;
