// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention steering during decoding.
//!
//! Three modes are available besides [`Mode::None`]:
//!
//! - [`Mode::Iat`] adds `alpha * |v|` to every pre-softmax score `v` over the
//!   generated text `T_p`, then re-applies softmax.
//! - [`Mode::Pai`] does the same over the image tokens `V`.
//! - [`Mode::AdaIat`] leaves scores alone. When a layer's natural attention
//!   to `T_p` (summed over heads) falls strictly below the profile threshold,
//!   it scales the post-softmax `T_p` weights of head `h` by
//!   `1 + alpha * M[l][h]` and renormalizes the row.
//!
//! All modes act only on layers inside the configured inclusive range.

use serde::{Deserialize, Serialize};

use crate::engine::{softmax_row, AttentionHook, AttentionMap, AttentionRow, LogitRow, ModelSpec};
use crate::error::{Error, Result};
use crate::profiler::{AttentionProfile, ThresholdSpec};
use crate::sequence::{SegmentSpans, Segment, Span};

/// Default layer fractions, the 5..=18 band of a 32-layer model.
pub const DEFAULT_LAYER_FRACTIONS: (f64, f64) = (5.0 / 32.0, 18.0 / 32.0);

/// Which steering algorithm runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// No intervention.
    #[default]
    None,
    /// Pre-softmax amplification over generated text.
    Iat,
    /// Pre-softmax amplification over image tokens.
    Pai,
    /// Threshold-triggered post-softmax amplification over generated text.
    #[serde(rename = "adaiat")]
    AdaIat,
}

impl Mode {
    /// `alpha` used when none is given.
    pub fn default_alpha(self) -> f64 {
        match self {
            Mode::None => 0.0,
            Mode::Iat | Mode::Pai => 0.8,
            Mode::AdaIat => 6.0,
        }
    }

    /// Segment the mode amplifies unless overridden.
    pub fn default_segment(self) -> Segment {
        match self {
            Mode::Pai => Segment::Image,
            _ => Segment::Generated,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Mode::None),
            "iat" => Ok(Mode::Iat),
            "pai" => Ok(Mode::Pai),
            "adaiat" => Ok(Mode::AdaIat),
            _ => Err(Error::InvalidConfig(format!("unknown mode '{s}'"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::None => "none",
            Mode::Iat => "iat",
            Mode::Pai => "pai",
            Mode::AdaIat => "adaiat",
        })
    }
}

/// Intervention settings.
///
/// The layer range is either absolute (`layer_lo..=layer_hi`) or given as
/// fractions of the depth, mapped to `floor(lo * L)..=floor(hi * L)`. With
/// neither set, [`DEFAULT_LAYER_FRACTIONS`] applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionConfig {
    /// Algorithm.
    #[serde(default)]
    pub mode: Mode,
    /// Amplification factor.
    #[serde(default)]
    pub alpha: f64,
    /// Threshold coefficient; when set, overrides the profile's own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// First intervened layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_lo: Option<usize>,
    /// Last intervened layer, inclusive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_hi: Option<usize>,
    /// First intervened layer as a fraction of depth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_frac_lo: Option<f64>,
    /// Last intervened layer as a fraction of depth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_frac_hi: Option<f64>,
    /// Amplified segment; defaults per mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_segment: Option<Segment>,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl InterventionConfig {
    fn with_mode(mode: Mode, alpha: f64) -> Self {
        InterventionConfig {
            mode,
            alpha,
            beta: None,
            layer_lo: None,
            layer_hi: None,
            layer_frac_lo: None,
            layer_frac_hi: None,
            target_segment: None,
        }
    }

    /// No intervention.
    pub fn none() -> Self {
        Self::with_mode(Mode::None, 0.0)
    }

    /// Score amplification over generated text.
    pub fn iat(alpha: f64) -> Self {
        Self::with_mode(Mode::Iat, alpha)
    }

    /// Score amplification over image tokens.
    pub fn pai(alpha: f64) -> Self {
        Self::with_mode(Mode::Pai, alpha)
    }

    /// Adaptive amplification; needs a profile at decode time.
    pub fn adaiat(alpha: f64) -> Self {
        Self::with_mode(Mode::AdaIat, alpha)
    }

    /// Sets an absolute inclusive layer range.
    pub fn layers(mut self, lo: usize, hi: usize) -> Self {
        self.layer_lo = Some(lo);
        self.layer_hi = Some(hi);
        self.layer_frac_lo = None;
        self.layer_frac_hi = None;
        self
    }

    /// Sets a fractional layer range.
    pub fn layer_fractions(mut self, lo: f64, hi: f64) -> Self {
        self.layer_lo = None;
        self.layer_hi = None;
        self.layer_frac_lo = Some(lo);
        self.layer_frac_hi = Some(hi);
        self
    }

    /// Sets the threshold coefficient.
    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = Some(beta);
        self
    }

    /// Segment that gets amplified.
    pub fn segment(&self) -> Segment {
        self.target_segment.unwrap_or(self.mode.default_segment())
    }

    /// Inclusive layer range for a model with `n_layers` layers.
    pub fn resolve_layers(&self, n_layers: usize) -> Result<(usize, usize)> {
        let bad = |m: String| Error::InvalidConfig(m);
        if n_layers == 0 {
            return Err(bad("model has no layers".into()));
        }
        let (lo, hi) = match (self.layer_lo, self.layer_hi, self.layer_frac_lo, self.layer_frac_hi) {
            (Some(lo), Some(hi), None, None) => (lo, hi),
            (None, None, flo, fhi) => {
                let (dlo, dhi) = DEFAULT_LAYER_FRACTIONS;
                let (flo, fhi) = match (flo, fhi) {
                    (Some(a), Some(b)) => (a, b),
                    (None, None) => (dlo, dhi),
                    _ => return Err(bad("layer_frac_lo and layer_frac_hi must be set together".into())),
                };
                if !(0.0..=1.0).contains(&flo) || !(0.0..=1.0).contains(&fhi) {
                    return Err(bad(format!("layer fractions must lie in [0, 1], got {flo}, {fhi}")));
                }
                let to_layer = |f: f64| ((f * n_layers as f64).floor() as usize).min(n_layers - 1);
                (to_layer(flo), to_layer(fhi))
            }
            (Some(_), Some(_), _, _) => {
                return Err(bad("give either absolute or fractional layers, not both".into()))
            }
            _ => return Err(bad("layer_lo and layer_hi must be set together".into())),
        };
        if lo > hi || hi >= n_layers {
            return Err(bad(format!(
                "layer range {lo}..={hi} invalid for {n_layers} layers"
            )));
        }
        Ok((lo, hi))
    }

    /// Checks ranges against a model depth.
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.mode == Mode::None {
            return Ok(());
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if let Some(beta) = self.beta {
            ThresholdSpec { beta }.validate()?;
        }
        self.resolve_layers(n_layers)?;
        Ok(())
    }
}

/// Adds `alpha * |v_i|` to every score inside `span`.
pub fn iat_amplify(logits: &LogitRow, span: Span, alpha: f64) -> Result<LogitRow> {
    span.check_within(logits.len())?;
    let mut out = logits.clone();
    for v in &mut out.0[span.range()] {
        *v += alpha * v.abs();
    }
    Ok(out)
}

/// True when attention to generated text is below the threshold (strictly).
pub fn should_trigger(layer_aggregate: f64, threshold: f64) -> bool {
    threshold > layer_aggregate
}

/// Scales the weights inside `span` by `1 + alpha * m_lh` and renormalizes.
pub fn adaiat_amplify(row: &AttentionRow, span: Span, alpha: f64, m_lh: f64) -> Result<AttentionRow> {
    span.check_within(row.len())?;
    if !(m_lh >= 0.0 && m_lh.is_finite()) {
        return Err(Error::InvalidConfig(format!("head ratio must be finite and >= 0, got {m_lh}")));
    }
    let factor = 1.0 + alpha * m_lh;
    if factor == 1.0 || span.is_empty() {
        return Ok(row.clone());
    }
    if !factor.is_finite() {
        return Err(Error::NumericOverflow);
    }
    let mut w = row.0.clone();
    for x in &mut w[span.range()] {
        *x *= factor;
    }
    let total: f64 = w.iter().sum();
    assert!(total > 0.0, "amplified attention row sums to zero");
    if !total.is_finite() {
        return Err(Error::NumericOverflow);
    }
    for x in &mut w {
        *x /= total;
    }
    Ok(AttentionRow(w))
}

/// `sum_h mean_{i in span} row_h[i]` for one layer's rows.
pub fn layer_aggregate(rows: &[AttentionRow], span: Span) -> f64 {
    if span.is_empty() {
        return 0.0;
    }
    let width = span.len() as f64;
    rows.iter()
        .map(|r| r.weights()[span.range()].iter().sum::<f64>() / width)
        .sum()
}

/// A config with its layer range resolved and, for adaptive mode, its profile
/// re-thresholded.
#[derive(Debug, Clone)]
struct Resolved {
    mode: Mode,
    alpha: f64,
    lo: usize,
    hi: usize,
    segment: Segment,
    profile: Option<AttentionProfile>,
}

impl Resolved {
    fn new(cfg: &InterventionConfig, profile: Option<&AttentionProfile>, n_layers: usize) -> Result<Self> {
        cfg.validate(n_layers)?;
        let (lo, hi) = if cfg.mode == Mode::None {
            (0, 0)
        } else {
            cfg.resolve_layers(n_layers)?
        };
        let profile = if cfg.mode == Mode::AdaIat {
            let p = profile.ok_or(Error::ProfileRequired)?;
            if p.n_layers != n_layers {
                return Err(Error::ShapeMismatch(format!(
                    "profile has {} layers but model has {n_layers}",
                    p.n_layers
                )));
            }
            Some(match cfg.beta {
                Some(beta) if beta != p.beta => p.with_beta(ThresholdSpec { beta })?,
                _ => p.clone(),
            })
        } else {
            None
        };
        Ok(Resolved {
            mode: cfg.mode,
            alpha: cfg.alpha,
            lo,
            hi,
            segment: cfg.segment(),
            profile,
        })
    }

    fn in_range(&self, layer: usize) -> bool {
        self.lo <= layer && layer <= self.hi
    }

    fn fires(&self, layer: usize, aggregate: f64, spans: &SegmentSpans) -> bool {
        let p = self.profile.as_ref().expect("adaptive mode carries a profile");
        self.in_range(layer) && !spans.generated.is_empty() && should_trigger(aggregate, p.t[layer])
    }

    fn apply(
        &self,
        layer: usize,
        head: usize,
        logits: &LogitRow,
        row: AttentionRow,
        spans: &SegmentSpans,
        fired: bool,
    ) -> Result<AttentionRow> {
        match self.mode {
            Mode::None => Ok(row),
            Mode::Iat | Mode::Pai => {
                if !self.in_range(layer) || self.alpha == 0.0 {
                    return Ok(row);
                }
                let span = spans.get(self.segment);
                if span.is_empty() {
                    return Ok(row);
                }
                softmax_row(&iat_amplify(logits, span, self.alpha)?)
            }
            Mode::AdaIat => {
                if !fired {
                    return Ok(row);
                }
                let p = self.profile.as_ref().expect("adaptive mode carries a profile");
                if head >= p.n_heads {
                    return Err(Error::ShapeMismatch(format!(
                        "head {head} outside profile with {} heads",
                        p.n_heads
                    )));
                }
                adaiat_amplify(&row, spans.get(self.segment), self.alpha, p.ratio(layer, head))
            }
        }
    }
}

/// Returns the row to use for `(layer, head)` under `cfg`.
///
/// `layer_aggregates[l]` is this step's head-summed mean attention to `T_p`
/// from the un-intervened rows of layer `l`; it has one entry per layer.
#[allow(clippy::too_many_arguments)]
pub fn apply_intervention(
    cfg: &InterventionConfig,
    profile: Option<&AttentionProfile>,
    layer: usize,
    head: usize,
    logits: &LogitRow,
    row: AttentionRow,
    spans: &SegmentSpans,
    layer_aggregates: &[f64],
) -> Result<AttentionRow> {
    if cfg.mode == Mode::None {
        return Ok(row);
    }
    let n_layers = layer_aggregates.len();
    if layer >= n_layers {
        return Err(Error::DimensionMismatch(format!(
            "layer {layer} outside {n_layers} aggregates"
        )));
    }
    let r = Resolved::new(cfg, profile, n_layers)?;
    let fired = r.mode == Mode::AdaIat && r.fires(layer, layer_aggregates[layer], spans);
    r.apply(layer, head, logits, row, spans, fired)
}

/// Decode hook running one intervention config.
#[derive(Debug, Clone)]
pub struct InterventionHook {
    resolved: Resolved,
    fired: Vec<bool>,
    aggregates: Vec<f64>,
    trigger_events: usize,
}

impl InterventionHook {
    /// Resolves `cfg` against the model; adaptive mode needs `profile`.
    pub fn new(cfg: InterventionConfig, profile: Option<AttentionProfile>, spec: &ModelSpec) -> Result<Self> {
        let resolved = Resolved::new(&cfg, profile.as_ref(), spec.n_layers)?;
        if let Some(p) = &resolved.profile {
            p.check_model(spec)?;
        }
        Ok(InterventionHook {
            resolved,
            fired: vec![false; spec.n_layers],
            aggregates: vec![0.0; spec.n_layers],
            trigger_events: 0,
        })
    }

    /// `(step, layer)` pairs where the adaptive trigger fired so far.
    pub fn trigger_events(&self) -> usize {
        self.trigger_events
    }

    /// Aggregates observed at the most recent step, one per layer.
    pub fn last_aggregates(&self) -> &[f64] {
        &self.aggregates
    }
}

impl AttentionHook for InterventionHook {
    fn observe_layer(&mut self, layer: usize, rows: &[AttentionRow], spans: &SegmentSpans) -> Result<()> {
        if self.resolved.mode != Mode::AdaIat {
            return Ok(());
        }
        let agg = layer_aggregate(rows, spans.generated);
        self.aggregates[layer] = agg;
        let fired = self.resolved.fires(layer, agg, spans);
        self.fired[layer] = fired;
        if fired {
            self.trigger_events += 1;
        }
        Ok(())
    }

    fn adjust(
        &mut self,
        layer: usize,
        head: usize,
        logits: &LogitRow,
        row: AttentionRow,
        spans: &SegmentSpans,
    ) -> Result<AttentionRow> {
        let fired = self.fired.get(layer).copied().unwrap_or(false);
        self.resolved.apply(layer, head, logits, row, spans, fired)
    }
}

/// One adaptive trigger firing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TriggerEvent {
    /// Index of the record the map came from.
    pub record: usize,
    /// Decode step.
    pub step: usize,
    /// Layer.
    pub layer: usize,
}

/// Replays the adaptive trigger over captured un-intervened maps.
///
/// Entry `r` of `maps` pairs the maps of record `r` with its prompt spans.
/// Thresholds come from `profile` at coefficient `beta`.
pub fn replay_triggers(
    maps: &[(&[AttentionMap], SegmentSpans)],
    profile: &AttentionProfile,
    beta: f64,
    layers: (usize, usize),
) -> Result<Vec<TriggerEvent>> {
    let p = profile.with_beta(ThresholdSpec { beta })?;
    let mut out = Vec::new();
    for (record, (record_maps, prompt_spans)) in maps.iter().enumerate() {
        for map in record_maps.iter() {
            if map.step == 0 {
                continue;
            }
            let start = prompt_spans.generated.start;
            let generated = Span::new(start, start + map.step);
            generated.check_within(map.len)?;
            for layer in layers.0..=layers.1.min(map.n_layers().saturating_sub(1)) {
                let agg = layer_aggregate(&map.rows[layer], generated);
                if should_trigger(agg, p.t[layer]) {
                    out.push(TriggerEvent {
                        record,
                        step: map.step,
                        layer,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiler::{aggregate_heads, ratio_matrix, threshold_vector, DEFAULT_EPSILON, PROFILE_VERSION};
    use proptest::prelude::*;

    fn spans(a: usize, m: usize, b: usize, n: usize) -> SegmentSpans {
        SegmentSpans {
            system: Span::new(0, a),
            image: Span::new(a, a + m),
            instruction: Span::new(a + m, a + m + b),
            generated: Span::new(a + m + b, a + m + b + n),
        }
    }

    fn profile(l: usize, h: usize, r: f64, hall: f64) -> AttentionProfile {
        let mut p = AttentionProfile {
            version: PROFILE_VERSION,
            n_layers: l,
            n_heads: h,
            beta: 0.5,
            epsilon: DEFAULT_EPSILON,
            n_r: 1,
            n_h: 1,
            a_r_tp: vec![r; l * h],
            a_h_tp: vec![hall; l * h],
            a_r_v: vec![0.0; l * h],
            a_h_v: vec![0.0; l * h],
            m: vec![],
            layer_sums_r: vec![],
            layer_sums_h: vec![],
            t: vec![],
        };
        p.layer_sums_r = aggregate_heads(&p.real_tp());
        p.layer_sums_h = aggregate_heads(&p.hallucinated_tp());
        p.m = ratio_matrix(&p);
        p.t = threshold_vector(&p, ThresholdSpec { beta: 0.5 });
        p
    }

    #[test]
    fn iat_examples() {
        let v = LogitRow(vec![2.0, -2.0, 0.0, 5.0]);
        let out = iat_amplify(&v, Span::new(0, 3), 0.5).unwrap();
        assert_eq!(out.values(), &[3.0, -1.0, 0.0, 5.0]);
        assert_eq!(iat_amplify(&v, Span::new(0, 4), 0.0).unwrap(), v);
        assert!(iat_amplify(&v, Span::new(2, 5), 1.0).is_err());
    }

    #[test]
    fn trigger_is_strict() {
        assert!(should_trigger(0.2, 0.3));
        assert!(!should_trigger(0.3, 0.3));
        assert!(!should_trigger(0.5, 0.1));
    }

    #[test]
    fn adaiat_examples() {
        let row = AttentionRow(vec![0.5, 0.5]);
        let out = adaiat_amplify(&row, Span::new(1, 2), 1.0, 1.0).unwrap();
        assert!((out.weights()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((out.weights()[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(adaiat_amplify(&row, Span::new(1, 2), 0.0, 3.0).unwrap(), row);
        let skew = AttentionRow(vec![0.1, 0.6, 0.3]);
        let whole = adaiat_amplify(&skew, Span::new(0, 3), 4.0, 2.5).unwrap();
        for (a, b) in whole.weights().iter().zip(skew.weights()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn none_mode_returns_row_untouched() {
        let row = AttentionRow(vec![0.25, 0.75]);
        let out = apply_intervention(
            &InterventionConfig::none(),
            None,
            0,
            0,
            &LogitRow(vec![0.0, 1.0]),
            row.clone(),
            &spans(1, 1, 0, 0),
            &[0.0],
        )
        .unwrap();
        assert_eq!(out, row);
    }

    #[test]
    fn iat_outside_range_is_unchanged() {
        let cfg = InterventionConfig::iat(2.0).layers(1, 2);
        let logits = LogitRow(vec![0.3, 1.0, 2.0]);
        let row = softmax_row(&logits).unwrap();
        let sp = spans(1, 1, 0, 1);
        let out = apply_intervention(&cfg, None, 0, 0, &logits, row.clone(), &sp, &[0.0; 4]).unwrap();
        assert_eq!(out, row);
        let inside = apply_intervention(&cfg, None, 1, 0, &logits, row.clone(), &sp, &[0.0; 4]).unwrap();
        assert!(inside.weights()[2] > row.weights()[2]);
    }

    #[test]
    fn pai_targets_image_tokens() {
        let cfg = InterventionConfig::pai(1.0).layers(0, 0);
        let logits = LogitRow(vec![0.5, 1.0, 1.0, 0.5]);
        let row = softmax_row(&logits).unwrap();
        let sp = spans(1, 2, 0, 1);
        let out = apply_intervention(&cfg, None, 0, 0, &logits, row.clone(), &sp, &[0.0]).unwrap();
        let mass = |r: &AttentionRow| r.weights()[1] + r.weights()[2];
        assert!(mass(&out) > mass(&row));
    }

    #[test]
    fn adaiat_requires_profile() {
        let cfg = InterventionConfig::adaiat(6.0).layers(0, 0);
        let logits = LogitRow(vec![0.0, 0.0]);
        let row = softmax_row(&logits).unwrap();
        let err = apply_intervention(&cfg, None, 0, 0, &logits, row, &spans(1, 0, 0, 1), &[0.0]).unwrap_err();
        assert_eq!(err.to_string(), "profile required");
    }

    #[test]
    fn adaiat_fires_only_below_threshold_and_past_step_zero() {
        let p = profile(1, 2, 0.4, 0.2);
        // T = 0.2*2 + 0.5*(0.8-0.4) = 0.6 over two heads.
        assert!((p.t[0] - 0.6).abs() < 1e-15);
        let cfg = InterventionConfig::adaiat(1.0).layers(0, 0);
        let logits = LogitRow(vec![0.0; 3]);
        let row = AttentionRow(vec![0.4, 0.3, 0.3]);
        let sp = spans(1, 1, 0, 1);
        let low = apply_intervention(&cfg, Some(&p), 0, 1, &logits, row.clone(), &sp, &[0.59]).unwrap();
        // M = 2, factor 3 on index 2: [0.4, 0.3, 0.9] / 1.6.
        assert!((low.weights()[2] - 0.9 / 1.6).abs() < 1e-15);
        let at = apply_intervention(&cfg, Some(&p), 0, 1, &logits, row.clone(), &sp, &[p.t[0]]).unwrap();
        assert_eq!(at, row);
        let n0 = apply_intervention(&cfg, Some(&p), 0, 1, &logits, row.clone(), &spans(1, 2, 0, 0), &[0.0]).unwrap();
        assert_eq!(n0, row);
    }

    #[test]
    fn layer_resolution() {
        let c = InterventionConfig::iat(1.0);
        assert_eq!(c.resolve_layers(32).unwrap(), (5, 18));
        assert_eq!(c.clone().layer_fractions(0.25, 0.75).resolve_layers(4).unwrap(), (1, 3));
        assert_eq!(c.clone().layer_fractions(0.0, 1.0).resolve_layers(4).unwrap(), (0, 3));
        assert!(c.clone().layers(3, 2).resolve_layers(8).is_err());
        assert!(c.clone().layers(0, 8).resolve_layers(8).is_err());
        let mut both = c.layers(0, 1);
        both.layer_frac_lo = Some(0.1);
        both.layer_frac_hi = Some(0.2);
        assert!(both.resolve_layers(8).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let c = InterventionConfig::adaiat(6.0).with_beta(0.3).layers(1, 2);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(text, r#"{"mode":"adaiat","alpha":6.0,"beta":0.3,"layer_lo":1,"layer_hi":2}"#);
        assert_eq!(serde_json::from_str::<InterventionConfig>(&text).unwrap(), c);
        let pai: InterventionConfig = serde_json::from_str(r#"{"mode":"pai","alpha":0.5}"#).unwrap();
        assert_eq!(pai.segment(), Segment::Image);
    }

    fn span_mass(row: &AttentionRow, span: Span) -> f64 {
        row.weights()[span.range()].iter().sum()
    }

    proptest! {
        #[test]
        fn outputs_stay_stochastic(
            v in prop::collection::vec(-20.0f64..20.0, 4..24),
            alpha in prop::sample::select(vec![0.0, 0.5, 0.8, 6.0]),
            mode in prop::sample::select(vec![Mode::None, Mode::Iat, Mode::Pai, Mode::AdaIat]),
            m in 0.0f64..5.0,
        ) {
            let n = v.len();
            let sp = spans(1, 2, 1, n - 4);
            let logits = LogitRow(v);
            let row = softmax_row(&logits).unwrap();
            let mut p = profile(1, 1, m, 1.0);
            p.t = vec![10.0];
            let cfg = InterventionConfig { mode, alpha, ..InterventionConfig::none() }.layers(0, 0);
            let out = apply_intervention(&cfg, Some(&p), 0, 0, &logits, row, &sp, &[0.0]).unwrap();
            prop_assert!(out.is_stochastic(1e-9));
        }

        #[test]
        fn iat_span_mass_grows_with_alpha(
            v in prop::collection::vec(-8.0f64..8.0, 3..20),
            pos in 0.1f64..8.0,
            a in 0.0f64..3.0,
            da in 0.01f64..1.0,
        ) {
            let n = v.len();
            let span = Span::new(1, n);
            let mut v = v;
            v[n - 1] = pos;
            let l = LogitRow(v);
            let lo = softmax_row(&iat_amplify(&l, span, a).unwrap()).unwrap();
            let hi = softmax_row(&iat_amplify(&l, span, a + da).unwrap()).unwrap();
            prop_assert!(span_mass(&hi, span) >= span_mass(&lo, span) - 1e-12);
        }

        #[test]
        fn adaiat_whole_row_is_neutral(
            raw in prop::collection::vec(0.01f64..1.0, 1..30),
            alpha in 0.0f64..10.0,
            m in 0.0f64..5.0,
        ) {
            let total: f64 = raw.iter().sum();
            let row = AttentionRow(raw.iter().map(|x| x / total).collect());
            let out = adaiat_amplify(&row, Span::new(0, row.len()), alpha, m).unwrap();
            for (a, b) in out.weights().iter().zip(row.weights()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn trigger_set_grows_with_beta(
            r in 0.3f64..0.6,
            h in 0.0f64..0.3,
            aggs in prop::collection::vec(0.0f64..1.5, 1..40),
            b1 in 0.0f64..1.0,
            db in 0.0f64..1.0,
        ) {
            let p = profile(1, 2, r, h);
            let t1 = p.with_beta(ThresholdSpec { beta: b1 }).unwrap().t[0];
            let t2 = p.with_beta(ThresholdSpec { beta: b1 + db }).unwrap().t[0];
            for a in aggs {
                if should_trigger(a, t1) {
                    prop_assert!(should_trigger(a, t2));
                }
            }
        }
    }
}
