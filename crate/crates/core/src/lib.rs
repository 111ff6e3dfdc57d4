//! Speculative decoding with test-time adaptive ensemble drafting.
//!
//! A target [`SequenceModel`] is accelerated by drafting blocks of tokens from
//! cheaper [`DraftSource`]s and verifying them against the target. Drafting
//! can use one source, an adaptively weighted mixture of several
//! ([`tabed`]), or a token tree ([`tree`]). The [`oracle`] module holds the
//! brute-force checkers used to confirm the engine never changes the
//! target's output law.

pub mod decode;
pub mod dist;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod oracle;
pub mod report;
pub mod selftest;
pub mod session;
pub mod tabed;
pub mod tree;

pub use decode::{
    draft_block, verify_greedy, verify_stochastic, DecodeConfig, DecodeMode, DraftBlock, VerificationResult,
};
pub use dist::{
    kl_divergence, residual_distribution, sample, top_d, tvd, weighted_average, Distribution, Rng, WeightVector,
};
pub use error::{Error, Result};
pub use metrics::{block_efficiency, expected_speedup, LatencyModel, LatencyPreset, RunRecords};
pub use models::{
    make_transform, train_kgram, Context, DraftSource, KgramModel, Segment, SegmentKind, SequenceModel,
    SyntheticOracle, TokenId, Transform,
};
pub use experiment::{run_experiment, ExperimentConfig, RunReport};
pub use report::{compare_report, ComparisonTable};
pub use session::{decode_session, run_session, Drafter, Pipeline, SessionOutput};
pub use tabed::{
    accumulated_error, select_weight, tabed_draft, update_history, HistoryCache, SelectionCriterion, WeightPolicy,
    Window,
};
pub use tree::{build_tree, verify_tree_greedy, TokenTree, TreeVerifyResult};
