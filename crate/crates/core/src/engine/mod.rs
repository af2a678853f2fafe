// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward inference for a small attention-only causal transformer.
//!
//! Each layer adds the output of `H` attention heads to the residual stream;
//! there is no MLP and no normalization. For every layer and head the engine
//! exposes the last query position's pre-softmax scores ([`LogitRow`]) and
//! weights ([`AttentionRow`]) to an [`AttentionHook`], which may replace the
//! row before it mixes the value vectors. The rows actually used are captured
//! into an [`AttentionMap`] per decode step.

mod decode;
mod model;
mod weights_file;

pub use decode::{decode, decode_with_hook, DecodeConfig, GenerationRecord, Strategy};
pub use model::{forward_step, LayerWeights, ModelSpec, ModelWeights, StepOutput};
pub use weights_file::{load_weights, save_weights, WEIGHTS_FORMAT, WEIGHTS_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::SegmentSpans;

/// Pre-softmax attention scores of the last query position for one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogitRow(pub Vec<f64>);

impl LogitRow {
    /// The scores.
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Number of key positions.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// True for a row over zero keys.
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Post-softmax attention weights of the last query position for one head.
///
/// Weights are non-negative and sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttentionRow(pub Vec<f64>);

impl AttentionRow {
    /// The weights.
    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    /// Number of key positions.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// True for a row over zero keys.
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Sum of the weights.
    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    /// True if every weight is non-negative and the row sums to one within `tol`.
    pub fn is_stochastic(&self, tol: f64) -> bool {
        self.0.iter().all(|&w| w >= 0.0 && w.is_finite()) && (self.total() - 1.0).abs() <= tol
    }
}

/// Attention rows of every layer and head for one decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    /// Decode step, equal to the number of tokens generated before it.
    pub step: usize,
    /// Sequence length at capture time.
    pub len: usize,
    /// `rows[layer][head]`.
    pub rows: Vec<Vec<AttentionRow>>,
}

impl AttentionMap {
    /// Number of layers.
    pub fn n_layers(&self) -> usize {
        self.rows.len()
    }

    /// Number of heads per layer.
    pub fn n_heads(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Row for `(layer, head)`.
    pub fn row(&self, layer: usize, head: usize) -> &AttentionRow {
        &self.rows[layer][head]
    }
}

/// Callback that may replace attention rows during a forward pass.
///
/// For each layer the engine first calls [`observe_layer`](Self::observe_layer)
/// with the un-intervened rows of every head, then [`adjust`](Self::adjust)
/// once per head. The returned row is what mixes the values.
pub trait AttentionHook {
    /// Sees the natural rows of all heads of `layer` before any adjustment.
    fn observe_layer(
        &mut self,
        _layer: usize,
        _rows: &[AttentionRow],
        _spans: &SegmentSpans,
    ) -> Result<()> {
        Ok(())
    }

    /// Returns the row to use for `(layer, head)`.
    fn adjust(
        &mut self,
        layer: usize,
        head: usize,
        logits: &LogitRow,
        row: AttentionRow,
        spans: &SegmentSpans,
    ) -> Result<AttentionRow>;
}

/// Hook that returns every row unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityHook;

impl AttentionHook for IdentityHook {
    fn adjust(
        &mut self,
        _layer: usize,
        _head: usize,
        _logits: &LogitRow,
        row: AttentionRow,
        _spans: &SegmentSpans,
    ) -> Result<AttentionRow> {
        Ok(row)
    }
}

/// Scaled dot products `query · key_i / sqrt(d_k)` for every key.
pub fn attention_logits<K: AsRef<[f64]>>(query: &[f64], keys: &[K], d_k: usize) -> Result<LogitRow> {
    if keys.is_empty() {
        return Err(Error::DimensionMismatch("no keys".into()));
    }
    if d_k == 0 {
        return Err(Error::DimensionMismatch("d_k must be positive".into()));
    }
    let scale = 1.0 / (d_k as f64).sqrt();
    keys.iter()
        .enumerate()
        .map(|(i, key)| {
            let key = key.as_ref();
            if key.len() != query.len() {
                return Err(Error::DimensionMismatch(format!(
                    "key {i} has width {} but query has width {}",
                    key.len(),
                    query.len()
                )));
            }
            Ok(dot(query, key) * scale)
        })
        .collect::<Result<Vec<_>>>()
        .map(LogitRow)
}

/// Numerically stable softmax: `exp(v_i - max v) / sum_j exp(v_j - max v)`.
pub fn softmax_row(logits: &LogitRow) -> Result<AttentionRow> {
    let values = logits.values();
    if values.is_empty() {
        return Err(Error::DimensionMismatch("softmax over an empty row".into()));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("attention logit {bad}")));
    }
    Ok(AttentionRow(softmax(values)))
}

pub(crate) fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for w in &mut out {
        *w /= total;
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
