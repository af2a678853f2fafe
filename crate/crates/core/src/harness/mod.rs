// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic captioning worlds and the experiments run on them.
//!
//! A world is a hand-wired attention-only model together with images whose
//! ground-truth objects are known, so every emitted object can be labeled.

mod experiment;
mod world;

pub use experiment::{
    build_profile_for_world, caption_records, comparison_csv, decode_images, label_record,
    labeled_records_for_world, replay_trigger_counts, run_comparison, sweep, sweep_csv,
    ComparisonOptions, ComparisonReport, ComparisonRow, Method, SweepRow, SweepSpec,
    SWEEP_CSV_HEADER,
};
pub use world::{synthesize_world, KeyScores, World, WorldImage, WorldSpec};
