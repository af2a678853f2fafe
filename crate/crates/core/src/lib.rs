// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoding-time attention steering for a small causal transformer.
//!
//! The crate bundles a forward/decode engine with per-head attention hooks
//! ([`engine`]), a profiler that averages attention over real and
//! hallucinated object tokens ([`profiler`]), the steering algorithms
//! ([`intervention`]), caption metrics ([`metrics`]), and a synthetic
//! experiment harness ([`harness`]).

pub mod engine;
pub mod error;
pub mod harness;
pub mod intervention;
pub mod metrics;
pub mod profiler;
pub mod rng;
pub mod sequence;

pub use engine::{decode, forward_step, DecodeConfig, GenerationRecord, ModelSpec, ModelWeights, Strategy};
pub use error::{Error, Result};
pub use intervention::{InterventionConfig, Mode};
pub use profiler::{AttentionProfile, ThresholdSpec};
pub use sequence::{build_segmented_sequence, SegmentedSequence, Span, TokenId, Vocabulary};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/sequences.md")]
    mod sequences {}
    #[doc = include_str!("../../../book/src/engine.md")]
    mod engine {}
    #[doc = include_str!("../../../book/src/profiling.md")]
    mod profiling {}
    #[doc = include_str!("../../../book/src/interventions.md")]
    mod interventions {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
