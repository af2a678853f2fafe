// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{softmax, AttentionHook, AttentionMap, AttentionRow, LogitRow};
use crate::error::{Error, Result};
use crate::sequence::SegmentedSequence;

fn default_max_tokens() -> usize {
    512
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Number of layers `L`.
    pub n_layers: usize,
    /// Heads per layer `H`.
    pub n_heads: usize,
    /// Residual width; equals `n_heads * d_k`.
    pub d_model: usize,
    /// Per-head query/key/value width.
    pub d_k: usize,
    /// Vocabulary size.
    pub vocab_size: usize,
    /// Rows of the positional embedding table, i.e. the context length.
    pub max_positions: usize,
    /// Default decode cap.
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
}

impl ModelSpec {
    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_layers == 0 || self.n_heads == 0 {
            return bad("model needs at least one layer and one head".into());
        }
        if self.d_k == 0 || self.d_model != self.n_heads * self.d_k {
            return bad(format!(
                "d_model ({}) must equal n_heads ({}) * d_k ({})",
                self.d_model, self.n_heads, self.d_k
            ));
        }
        if self.vocab_size == 0 || self.max_positions == 0 || self.max_tokens == 0 {
            return bad("vocab_size, max_positions and max_tokens must be positive".into());
        }
        Ok(())
    }
}

/// Projection matrices of one layer, with heads stored side by side.
///
/// Head `h` owns columns `h*d_k .. (h+1)*d_k` of `w_q`, `w_k`, `w_v` and the
/// same rows of `w_o`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// `d_model x (H*d_k)`.
    pub w_q: Array2<f64>,
    /// `d_model x (H*d_k)`.
    pub w_k: Array2<f64>,
    /// `d_model x (H*d_k)`.
    pub w_v: Array2<f64>,
    /// `(H*d_k) x d_model`.
    pub w_o: Array2<f64>,
}

impl LayerWeights {
    /// All-zero layer for `spec`.
    pub fn zeros(spec: &ModelSpec) -> Self {
        let hd = spec.n_heads * spec.d_k;
        LayerWeights {
            w_q: Array2::zeros((spec.d_model, hd)),
            w_k: Array2::zeros((spec.d_model, hd)),
            w_v: Array2::zeros((spec.d_model, hd)),
            w_o: Array2::zeros((hd, spec.d_model)),
        }
    }
}

/// Parameters of the attention-only transformer.
///
/// Values are kept in `f64` for computation but are always exactly
/// representable as `f32`, so the weights file round-trips bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    spec: ModelSpec,
    token_embedding: Array2<f64>,
    position_embedding: Array2<f64>,
    layers: Vec<LayerWeights>,
    unembedding: Array2<f64>,
}

fn round_f32(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v as f32 as f64);
}

fn check_shape(name: &str, a: &Array2<f64>, rows: usize, cols: usize) -> Result<()> {
    if a.dim() != (rows, cols) {
        return Err(Error::ShapeMismatch(format!(
            "{name}: expected {rows}x{cols}, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite() || !(*v as f32).is_finite()) {
        return Err(Error::NonFinite(format!("{name} contains a non-finite entry")));
    }
    Ok(())
}

impl ModelWeights {
    /// Assembles weights, validating shapes and finiteness and rounding every
    /// entry to `f32` precision.
    pub fn from_parts(
        spec: ModelSpec,
        mut token_embedding: Array2<f64>,
        mut position_embedding: Array2<f64>,
        mut layers: Vec<LayerWeights>,
        mut unembedding: Array2<f64>,
    ) -> Result<Self> {
        spec.validate()?;
        let (d, hd) = (spec.d_model, spec.n_heads * spec.d_k);
        check_shape("token_embedding", &token_embedding, spec.vocab_size, d)?;
        check_shape("position_embedding", &position_embedding, spec.max_positions, d)?;
        check_shape("unembedding", &unembedding, d, spec.vocab_size)?;
        if layers.len() != spec.n_layers {
            return Err(Error::ShapeMismatch(format!(
                "expected {} layers, got {}",
                spec.n_layers,
                layers.len()
            )));
        }
        for (l, layer) in layers.iter().enumerate() {
            check_shape(&format!("layer {l} w_q"), &layer.w_q, d, hd)?;
            check_shape(&format!("layer {l} w_k"), &layer.w_k, d, hd)?;
            check_shape(&format!("layer {l} w_v"), &layer.w_v, d, hd)?;
            check_shape(&format!("layer {l} w_o"), &layer.w_o, hd, d)?;
        }
        round_f32(&mut token_embedding);
        round_f32(&mut position_embedding);
        round_f32(&mut unembedding);
        for layer in &mut layers {
            round_f32(&mut layer.w_q);
            round_f32(&mut layer.w_k);
            round_f32(&mut layer.w_v);
            round_f32(&mut layer.w_o);
        }
        Ok(ModelWeights {
            spec,
            token_embedding,
            position_embedding,
            layers,
            unembedding,
        })
    }

    /// All-zero weights for `spec`.
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let layers = (0..spec.n_layers).map(|_| LayerWeights::zeros(&spec)).collect();
        Self::from_parts(
            spec.clone(),
            Array2::zeros((spec.vocab_size, spec.d_model)),
            Array2::zeros((spec.max_positions, spec.d_model)),
            layers,
            Array2::zeros((spec.d_model, spec.vocab_size)),
        )
    }

    /// Weights drawn uniformly from `[-scale, scale]` with the crate's seeded
    /// generator. Used for property tests and smoke runs.
    pub fn random(spec: ModelSpec, seed: u64, scale: f64) -> Result<Self> {
        spec.validate()?;
        let mut rng = crate::rng::seeded(seed);
        let mut draw = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| (crate::rng::uniform(&mut rng) * 2.0 - 1.0) * scale)
        };
        let hd = spec.n_heads * spec.d_k;
        let tok = draw(spec.vocab_size, spec.d_model);
        let pos = draw(spec.max_positions, spec.d_model);
        let layers = (0..spec.n_layers)
            .map(|_| LayerWeights {
                w_q: draw(spec.d_model, hd),
                w_k: draw(spec.d_model, hd),
                w_v: draw(spec.d_model, hd),
                w_o: draw(hd, spec.d_model),
            })
            .collect();
        let un = draw(spec.d_model, spec.vocab_size);
        Self::from_parts(spec, tok, pos, layers, un)
    }

    /// Architecture of these weights.
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// `vocab_size x d_model`.
    pub fn token_embedding(&self) -> &Array2<f64> {
        &self.token_embedding
    }

    /// `max_positions x d_model`.
    pub fn position_embedding(&self) -> &Array2<f64> {
        &self.position_embedding
    }

    /// Per-layer projections.
    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    /// `d_model x vocab_size`.
    pub fn unembedding(&self) -> &Array2<f64> {
        &self.unembedding
    }

    pub(crate) fn head_cols(&self, head: usize) -> std::ops::Range<usize> {
        head * self.spec.d_k..(head + 1) * self.spec.d_k
    }

    /// `W_Q` of one head, `d_model x d_k`.
    pub fn w_q(&self, layer: usize, head: usize) -> ArrayView2<'_, f64> {
        self.layers[layer].w_q.slice(s![.., self.head_cols(head)])
    }

    /// `W_K` of one head, `d_model x d_k`.
    pub fn w_k(&self, layer: usize, head: usize) -> ArrayView2<'_, f64> {
        self.layers[layer].w_k.slice(s![.., self.head_cols(head)])
    }

    /// `W_V` of one head, `d_model x d_k`.
    pub fn w_v(&self, layer: usize, head: usize) -> ArrayView2<'_, f64> {
        self.layers[layer].w_v.slice(s![.., self.head_cols(head)])
    }

    /// `W_O` of one head, `d_k x d_model`.
    pub fn w_o(&self, layer: usize, head: usize) -> ArrayView2<'_, f64> {
        self.layers[layer].w_o.slice(s![self.head_cols(head), ..])
    }
}

/// Result of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Next-token logits.
    pub logits: Vec<f64>,
    /// Softmax of `logits`.
    pub distribution: Vec<f64>,
    /// Rows actually used, after the hook.
    pub map: AttentionMap,
    /// Rows before the hook; `None` when no hook ran.
    pub pre_map: Option<AttentionMap>,
}

/// Runs the model over `seq` and returns the next-token distribution.
///
/// All positions are recomputed every call (no KV cache). Only the last
/// query position's rows go through `hook`; earlier positions use plain
/// causal attention.
pub fn forward_step(
    weights: &ModelWeights,
    seq: &SegmentedSequence,
    mut hook: Option<&mut dyn AttentionHook>,
) -> Result<StepOutput> {
    let spec = weights.spec();
    let len = seq.len();
    if len == 0 {
        return Err(Error::EmptyPrompt);
    }
    if len > spec.max_positions {
        return Err(Error::InvalidConfig(format!(
            "sequence length {len} exceeds max_positions {}",
            spec.max_positions
        )));
    }
    if let Some(bad) = seq.tokens().iter().find(|t| t.index() >= spec.vocab_size) {
        return Err(Error::InvalidConfig(format!(
            "token {bad} outside vocabulary of size {}",
            spec.vocab_size
        )));
    }

    let spans = seq.spans();
    let d_k = spec.d_k;
    let scale = 1.0 / (d_k as f64).sqrt();
    let last = len - 1;

    let mut x = Array2::<f64>::zeros((len, spec.d_model));
    for (i, tok) in seq.tokens().iter().enumerate() {
        let mut row = x.row_mut(i);
        row += &weights.token_embedding.row(tok.index());
        row += &weights.position_embedding.row(i);
    }

    let mut used_rows = Vec::with_capacity(spec.n_layers);
    let mut natural_rows = Vec::with_capacity(spec.n_layers);

    for (l, layer) in weights.layers.iter().enumerate() {
        let final_layer = l + 1 == spec.n_layers;
        let q = x.dot(&layer.w_q);
        let k = x.dot(&layer.w_k);
        let v = x.dot(&layer.w_v);
        let mut mixed = Array2::<f64>::zeros((len, spec.n_heads * d_k));

        let mut logit_rows = Vec::with_capacity(spec.n_heads);
        let mut rows = Vec::with_capacity(spec.n_heads);
        for h in 0..spec.n_heads {
            let cols = weights.head_cols(h);
            let qh = q.slice(s![.., cols.clone()]);
            let kh = k.slice(s![.., cols.clone()]);
            let vh = v.slice(s![.., cols.clone()]);

            // Earlier positions only feed later layers, so the final layer
            // can skip them.
            if !final_layer {
                for i in 0..last {
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| qh.row(i).dot(&kh.row(j)) * scale)
                        .collect();
                    let w = softmax(&scores);
                    let mut out = mixed.slice_mut(s![i, cols.clone()]);
                    for (j, wj) in w.iter().enumerate() {
                        out.scaled_add(*wj, &vh.row(j));
                    }
                }
            }

            let scores: Vec<f64> = (0..len)
                .map(|j| qh.row(last).dot(&kh.row(j)) * scale)
                .collect();
            if scores.iter().any(|s| !s.is_finite()) {
                return Err(Error::NumericOverflow);
            }
            rows.push(AttentionRow(softmax(&scores)));
            logit_rows.push(LogitRow(scores));
        }

        let final_rows = match hook.as_deref_mut() {
            Some(hook) => {
                hook.observe_layer(l, &rows, &spans)?;
                let mut adjusted = Vec::with_capacity(spec.n_heads);
                for (h, row) in rows.iter().enumerate() {
                    let out = hook.adjust(l, h, &logit_rows[h], row.clone(), &spans)?;
                    if out.len() != len {
                        return Err(Error::DimensionMismatch(format!(
                            "hook returned a row of length {} for length {len}",
                            out.len()
                        )));
                    }
                    adjusted.push(out);
                }
                natural_rows.push(rows);
                adjusted
            }
            None => rows,
        };

        for (h, row) in final_rows.iter().enumerate() {
            let cols = weights.head_cols(h);
            let vh = v.slice(s![.., cols.clone()]);
            let out: Array1<f64> = Array1::from(row.0.clone()).dot(&vh);
            mixed.slice_mut(s![last, cols]).assign(&out);
        }
        used_rows.push(final_rows);

        x += &mixed.dot(&layer.w_o);
    }

    let hidden = x.index_axis(Axis(0), last);
    let logits: Vec<f64> = hidden.dot(&weights.unembedding).to_vec();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow);
    }
    let distribution = softmax(&logits);
    let step = seq.generated_len();
    let pre_map = hook.is_some().then_some(AttentionMap {
        step,
        len,
        rows: natural_rows,
    });
    Ok(StepOutput {
        logits,
        distribution,
        map: AttentionMap {
            step,
            len,
            rows: used_rows,
        },
        pre_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::IdentityHook;
    use crate::sequence::{build_segmented_sequence, TokenId};

    fn spec(l: usize, h: usize, d_k: usize) -> ModelSpec {
        ModelSpec {
            n_layers: l,
            n_heads: h,
            d_model: h * d_k,
            d_k,
            vocab_size: 11,
            max_positions: 32,
            max_tokens: 8,
        }
    }

    #[test]
    fn spec_validation() {
        assert!(spec(2, 2, 4).validate().is_ok());
        let mut bad = spec(2, 2, 4);
        bad.d_model = 7;
        assert!(bad.validate().is_err());
        bad = spec(2, 2, 4);
        bad.n_layers = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn identity_hook_matches_no_hook() {
        let w = ModelWeights::random(spec(3, 2, 4), 1, 0.7).unwrap();
        let seq = build_segmented_sequence(
            &[TokenId(1), TokenId(2)],
            &[TokenId(3), TokenId(4), TokenId(5)],
            &[TokenId(6)],
        )
        .unwrap();
        let plain = forward_step(&w, &seq, None).unwrap();
        let mut id = IdentityHook;
        let hooked = forward_step(&w, &seq, Some(&mut id)).unwrap();
        assert_eq!(plain.distribution, hooked.distribution);
        assert_eq!(plain.logits, hooked.logits);
        assert_eq!(plain.map, hooked.map);
        assert_eq!(hooked.pre_map.as_ref(), Some(&plain.map));
    }

    #[test]
    fn singleton_sequence_has_unit_attention() {
        let w = ModelWeights::random(spec(1, 1, 4), 2, 1.0).unwrap();
        let seq = build_segmented_sequence(&[TokenId(3)], &[], &[]).unwrap();
        let out = forward_step(&w, &seq, None).unwrap();
        assert_eq!(out.map.rows[0][0].weights(), &[1.0]);
    }

    #[test]
    fn zero_weights_give_uniform_distribution() {
        let w = ModelWeights::zeros(spec(2, 2, 3)).unwrap();
        let seq = build_segmented_sequence(&[TokenId(1)], &[TokenId(2)], &[]).unwrap();
        let out = forward_step(&w, &seq, None).unwrap();
        for p in &out.distribution {
            assert!((p - 1.0 / 11.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rows_are_stochastic_and_causal() {
        let w = ModelWeights::random(spec(2, 3, 2), 3, 1.5).unwrap();
        let seq = build_segmented_sequence(&[TokenId(0)], &[TokenId(1), TokenId(2)], &[TokenId(3)]).unwrap();
        let out = forward_step(&w, &seq, None).unwrap();
        assert_eq!(out.map.len, 4);
        for layer in &out.map.rows {
            for row in layer {
                assert_eq!(row.len(), 4);
                assert!(row.is_stochastic(1e-9));
            }
        }
    }

    #[test]
    fn huge_weights_report_overflow() {
        let mut s = spec(4, 1, 2);
        s.vocab_size = 3;
        let big = 3.0e38;
        let tok = Array2::from_elem((3, 2), big);
        let pos = Array2::zeros((32, 2));
        let layer = LayerWeights {
            w_q: Array2::zeros((2, 2)),
            w_k: Array2::zeros((2, 2)),
            w_v: Array2::from_elem((2, 2), big),
            w_o: Array2::from_elem((2, 2), big),
        };
        let un = Array2::zeros((2, 3));
        let w = ModelWeights::from_parts(s, tok, pos, vec![layer; 4], un).unwrap();
        let seq = build_segmented_sequence(&[TokenId(1)], &[], &[]).unwrap();
        assert!(matches!(forward_step(&w, &seq, None), Err(Error::NumericOverflow)));
    }

    #[test]
    fn out_of_vocab_token_is_rejected() {
        let w = ModelWeights::zeros(spec(1, 1, 2)).unwrap();
        let seq = build_segmented_sequence(&[TokenId(99)], &[], &[]).unwrap();
        assert!(forward_step(&w, &seq, None).is_err());
    }
}
