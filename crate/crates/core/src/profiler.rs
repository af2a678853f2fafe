// SPDX-License-Identifier: MIT OR Apache-2.0

//! Averaged attention statistics over labeled object tokens.
//!
//! For each decode step that emitted an object token, the attention map is
//! reduced per `(layer, head)` to the mean weight per token of a segment
//! ([`aggregate_segment_attention`]); these are averaged separately over
//! real and hallucinated objects. From the `T_p` averages the profile derives
//! the per-head amplification ratio `M = A_r / max(A_h, eps)` and the
//! per-layer trigger threshold `T = S_h + beta * (S_r - S_h)`, where `S_*`
//! are the head sums of the averaged maps ([`aggregate_heads`]).

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{AttentionMap, GenerationRecord, ModelSpec};
use crate::error::{Error, Result};
use crate::sequence::{SegmentSpans, Span};

/// Profile file version written and accepted by this build.
pub const PROFILE_VERSION: u32 = 1;

/// Denominator floor used by [`ratio_matrix`].
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Whether an object token names something that is in the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    /// Present in the ground truth.
    Real,
    /// Absent from the ground truth.
    Hallucinated,
}

/// One object-token step with its label.
#[derive(Debug, Clone, Copy)]
pub struct LabeledStep<'a> {
    /// Attention captured while predicting the object token.
    pub map: &'a AttentionMap,
    /// Real or hallucinated.
    pub label: Label,
    /// Segment boundaries at that step.
    pub spans: SegmentSpans,
}

/// An `L x H` matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMatrix {
    /// Rows.
    pub n_layers: usize,
    /// Columns.
    pub n_heads: usize,
    /// `values[l * n_heads + h]`.
    pub values: Vec<f64>,
}

impl HeadMatrix {
    /// All-zero matrix.
    pub fn zeros(n_layers: usize, n_heads: usize) -> Self {
        HeadMatrix {
            n_layers,
            n_heads,
            values: vec![0.0; n_layers * n_heads],
        }
    }

    /// Entry `(layer, head)`.
    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.values[layer * self.n_heads + head]
    }

    /// Row `layer`.
    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.values[layer * self.n_heads..(layer + 1) * self.n_heads]
    }
}

/// Mean attention per token of a segment, for every `(layer, head)`.
pub type SegmentAggregate = HeadMatrix;

/// Reduces a map to `(1/|span|) * sum_{i in span} A(l,h)(i)`; zero for an empty span.
pub fn aggregate_segment_attention(map: &AttentionMap, span: Span) -> Result<SegmentAggregate> {
    span.check_within(map.len)?;
    let (n_layers, n_heads) = (map.n_layers(), map.n_heads());
    let mut out = HeadMatrix::zeros(n_layers, n_heads);
    if span.is_empty() {
        return Ok(out);
    }
    let width = span.len() as f64;
    for (l, layer) in map.rows.iter().enumerate() {
        for (h, row) in layer.iter().enumerate() {
            if row.len() != map.len {
                return Err(Error::ShapeMismatch(format!(
                    "row ({l}, {h}) has length {} but map length is {}",
                    row.len(),
                    map.len
                )));
            }
            let total: f64 = row.weights()[span.range()].iter().sum();
            out.values[l * n_heads + h] = total / width;
        }
    }
    Ok(out)
}

/// Sums a segment aggregate over heads, one value per layer.
pub fn aggregate_heads(seg: &SegmentAggregate) -> Vec<f64> {
    (0..seg.n_layers)
        .map(|l| seg.layer(l).iter().sum())
        .collect()
}

/// Balanced coefficient for the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    /// Interpolation weight between hallucinated (0) and real (1) levels.
    pub beta: f64,
}

impl Default for ThresholdSpec {
    fn default() -> Self {
        ThresholdSpec { beta: 0.5 }
    }
}

impl ThresholdSpec {
    /// Errors unless `beta` is finite and non-negative.
    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::InvalidConfig(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Averaged attention statistics plus the derived `M` and `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    /// File format version.
    pub version: u32,
    /// Layers `L`.
    #[serde(rename = "L")]
    pub n_layers: usize,
    /// Heads per layer `H`.
    #[serde(rename = "H")]
    pub n_heads: usize,
    /// Coefficient used for `t`.
    pub beta: f64,
    /// Denominator floor used for `m`.
    pub epsilon: f64,
    /// Real-object steps averaged.
    pub n_r: usize,
    /// Hallucinated-object steps averaged.
    pub n_h: usize,
    /// Mean `T_p` aggregate over real steps, row-major `L x H`.
    pub a_r_tp: Vec<f64>,
    /// Mean `T_p` aggregate over hallucinated steps.
    pub a_h_tp: Vec<f64>,
    /// Mean `V` aggregate over real steps.
    pub a_r_v: Vec<f64>,
    /// Mean `V` aggregate over hallucinated steps.
    pub a_h_v: Vec<f64>,
    /// Amplification ratio matrix.
    pub m: Vec<f64>,
    /// Head sums of `a_r_tp`, one per layer.
    pub layer_sums_r: Vec<f64>,
    /// Head sums of `a_h_tp`.
    pub layer_sums_h: Vec<f64>,
    /// Trigger threshold per layer.
    pub t: Vec<f64>,
}

impl AttentionProfile {
    fn matrix(&self, values: &[f64]) -> HeadMatrix {
        HeadMatrix {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            values: values.to_vec(),
        }
    }

    /// `a_r_tp` as a matrix.
    pub fn real_tp(&self) -> HeadMatrix {
        self.matrix(&self.a_r_tp)
    }

    /// `a_h_tp` as a matrix.
    pub fn hallucinated_tp(&self) -> HeadMatrix {
        self.matrix(&self.a_h_tp)
    }

    /// `M[layer][head]`.
    pub fn ratio(&self, layer: usize, head: usize) -> f64 {
        self.m[layer * self.n_heads + head]
    }

    /// Same profile with `t` recomputed for another `beta`.
    pub fn with_beta(&self, spec: ThresholdSpec) -> Result<Self> {
        spec.validate()?;
        let mut p = self.clone();
        p.beta = spec.beta;
        p.t = threshold_vector(self, spec);
        Ok(p)
    }

    /// Errors unless `L` and `H` match the model.
    pub fn check_model(&self, spec: &ModelSpec) -> Result<()> {
        if self.n_layers != spec.n_layers || self.n_heads != spec.n_heads {
            return Err(Error::ShapeMismatch(format!(
                "profile is {}x{} but model is {}x{}",
                self.n_layers, self.n_heads, spec.n_layers, spec.n_heads
            )));
        }
        Ok(())
    }

    fn check_shapes(&self) -> Result<()> {
        let lh = self.n_layers * self.n_heads;
        let mats = [
            ("a_r_tp", self.a_r_tp.len()),
            ("a_h_tp", self.a_h_tp.len()),
            ("a_r_v", self.a_r_v.len()),
            ("a_h_v", self.a_h_v.len()),
            ("m", self.m.len()),
        ];
        for (name, n) in mats {
            if n != lh {
                return Err(Error::ShapeMismatch(format!(
                    "{name} has {n} entries, expected L*H = {lh}"
                )));
            }
        }
        for (name, n) in [
            ("layer_sums_r", self.layer_sums_r.len()),
            ("layer_sums_h", self.layer_sums_h.len()),
            ("t", self.t.len()),
        ] {
            if n != self.n_layers {
                return Err(Error::ShapeMismatch(format!(
                    "{name} has {n} entries, expected L = {}",
                    self.n_layers
                )));
            }
        }
        Ok(())
    }
}

/// Running sums and counts; finalizing divides once.
///
/// Partial accumulators over disjoint shards can be [`merge`](Self::merge)d.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileAccumulator {
    n_layers: usize,
    n_heads: usize,
    sum_r_tp: Vec<f64>,
    sum_h_tp: Vec<f64>,
    sum_r_v: Vec<f64>,
    sum_h_v: Vec<f64>,
    n_r: usize,
    n_h: usize,
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

impl ProfileAccumulator {
    /// Empty accumulator for an `L x H` model.
    pub fn new(n_layers: usize, n_heads: usize) -> Self {
        let z = vec![0.0; n_layers * n_heads];
        ProfileAccumulator {
            n_layers,
            n_heads,
            sum_r_tp: z.clone(),
            sum_h_tp: z.clone(),
            sum_r_v: z.clone(),
            sum_h_v: z,
            n_r: 0,
            n_h: 0,
        }
    }

    /// Adds one labeled step.
    pub fn add(&mut self, step: &LabeledStep<'_>) -> Result<()> {
        if step.map.n_layers() != self.n_layers || step.map.n_heads() != self.n_heads {
            return Err(Error::ShapeMismatch(format!(
                "map is {}x{} but profile is {}x{}",
                step.map.n_layers(),
                step.map.n_heads(),
                self.n_layers,
                self.n_heads
            )));
        }
        let tp = aggregate_segment_attention(step.map, step.spans.generated)?;
        let v = aggregate_segment_attention(step.map, step.spans.image)?;
        match step.label {
            Label::Real => {
                add_into(&mut self.sum_r_tp, &tp.values);
                add_into(&mut self.sum_r_v, &v.values);
                self.n_r += 1;
            }
            Label::Hallucinated => {
                add_into(&mut self.sum_h_tp, &tp.values);
                add_into(&mut self.sum_h_v, &v.values);
                self.n_h += 1;
            }
        }
        Ok(())
    }

    /// Folds another partial accumulator into this one.
    pub fn merge(&mut self, other: &ProfileAccumulator) -> Result<()> {
        if (other.n_layers, other.n_heads) != (self.n_layers, self.n_heads) {
            return Err(Error::ShapeMismatch("cannot merge profiles of different shape".into()));
        }
        add_into(&mut self.sum_r_tp, &other.sum_r_tp);
        add_into(&mut self.sum_h_tp, &other.sum_h_tp);
        add_into(&mut self.sum_r_v, &other.sum_r_v);
        add_into(&mut self.sum_h_v, &other.sum_h_v);
        self.n_r += other.n_r;
        self.n_h += other.n_h;
        Ok(())
    }

    /// Steps seen so far, `(n_r, n_h)`.
    pub fn counts(&self) -> (usize, usize) {
        (self.n_r, self.n_h)
    }

    /// Divides the sums and derives `M` and `T`.
    pub fn finalize(&self, spec: ThresholdSpec) -> Result<AttentionProfile> {
        spec.validate()?;
        if self.n_r == 0 || self.n_h == 0 {
            return Err(Error::InsufficientLabeledData {
                n_r: self.n_r,
                n_h: self.n_h,
            });
        }
        let mean = |s: &[f64], n: usize| s.iter().map(|v| v / n as f64).collect::<Vec<_>>();
        let mut p = AttentionProfile {
            version: PROFILE_VERSION,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            beta: spec.beta,
            epsilon: DEFAULT_EPSILON,
            n_r: self.n_r,
            n_h: self.n_h,
            a_r_tp: mean(&self.sum_r_tp, self.n_r),
            a_h_tp: mean(&self.sum_h_tp, self.n_h),
            a_r_v: mean(&self.sum_r_v, self.n_r),
            a_h_v: mean(&self.sum_h_v, self.n_h),
            m: Vec::new(),
            layer_sums_r: Vec::new(),
            layer_sums_h: Vec::new(),
            t: Vec::new(),
        };
        p.layer_sums_r = aggregate_heads(&p.real_tp());
        p.layer_sums_h = aggregate_heads(&p.hallucinated_tp());
        p.m = ratio_matrix(&p);
        p.t = threshold_vector(&p, spec);
        Ok(p)
    }
}

/// Averages labeled steps into a finished profile.
pub fn accumulate_profile<'a>(
    n_layers: usize,
    n_heads: usize,
    steps: impl IntoIterator<Item = LabeledStep<'a>>,
    spec: ThresholdSpec,
) -> Result<AttentionProfile> {
    let mut acc = ProfileAccumulator::new(n_layers, n_heads);
    for step in steps {
        acc.add(&step)?;
    }
    acc.finalize(spec)
}

/// `M[l][h] = a_r_tp[l][h] / max(a_h_tp[l][h], epsilon)`.
pub fn ratio_matrix(profile: &AttentionProfile) -> Vec<f64> {
    profile
        .a_r_tp
        .iter()
        .zip(&profile.a_h_tp)
        .map(|(r, h)| r / h.max(profile.epsilon))
        .collect()
}

/// `T[l] = S_h[l] + beta * (S_r[l] - S_h[l])`.
pub fn threshold_vector(profile: &AttentionProfile, spec: ThresholdSpec) -> Vec<f64> {
    profile
        .layer_sums_h
        .iter()
        .zip(&profile.layer_sums_r)
        .map(|(h, r)| h + spec.beta * (r - h))
        .collect()
}

/// Writes the profile as JSON with a fixed field order.
pub fn save_profile(profile: &AttentionProfile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(profile)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Parses profile JSON, checking the version and internal shapes.
pub fn parse_profile(text: &str) -> Result<AttentionProfile> {
    #[derive(Deserialize)]
    struct VersionOnly {
        version: u32,
    }
    let v: VersionOnly =
        serde_json::from_str(text).map_err(|e| Error::CorruptProfile(e.to_string()))?;
    if v.version != PROFILE_VERSION {
        return Err(Error::VersionMismatch {
            expected: PROFILE_VERSION,
            found: v.version,
        });
    }
    let p: AttentionProfile =
        serde_json::from_str(text).map_err(|e| Error::CorruptProfile(e.to_string()))?;
    p.check_shapes()?;
    Ok(p)
}

/// Reads a profile file.
pub fn load_profile(path: impl AsRef<Path>) -> Result<AttentionProfile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_profile(&text)
}

/// Reads a profile file and checks it against a model.
pub fn load_profile_for(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<AttentionProfile> {
    let p = load_profile(path)?;
    p.check_model(spec)?;
    Ok(p)
}

/// Matrices available for heatmap export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapMatrix {
    /// Mean `T_p` attention over real objects.
    RealTp,
    /// Mean `T_p` attention over hallucinated objects.
    HallucinatedTp,
    /// Ratio matrix `M`.
    Ratio,
}

impl std::str::FromStr for HeatmapMatrix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a_r_tp" => Ok(HeatmapMatrix::RealTp),
            "a_h_tp" => Ok(HeatmapMatrix::HallucinatedTp),
            "m" => Ok(HeatmapMatrix::Ratio),
            _ => Err(Error::UnknownMatrix(s.to_string())),
        }
    }
}

/// Renders one profile matrix as `layer,head,value` CSV with 9 significant digits.
pub fn heatmap_csv(profile: &AttentionProfile, which: HeatmapMatrix) -> Result<String> {
    let values = match which {
        HeatmapMatrix::RealTp => &profile.a_r_tp,
        HeatmapMatrix::HallucinatedTp => &profile.a_h_tp,
        HeatmapMatrix::Ratio => &profile.m,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "head", "value"])?;
    for l in 0..profile.n_layers {
        for h in 0..profile.n_heads {
            let v = values[l * profile.n_heads + h];
            w.write_record([l.to_string(), h.to_string(), format!("{v:.8e}")])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is ascii"))
}

/// Writes [`heatmap_csv`] to `path`.
pub fn export_heatmap(
    profile: &AttentionProfile,
    which: HeatmapMatrix,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, heatmap_csv(profile, which)?).map_err(|e| Error::io(path, e))
}

/// Label of one generated token in a labeled record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectLabel {
    /// Index into the record's generated tokens (and maps).
    pub step_index: usize,
    /// Real or hallucinated.
    pub label: Label,
}

/// One line of the labeled-record ingestion format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRecord {
    /// The generation with captured maps.
    #[serde(flatten)]
    pub record: GenerationRecord,
    /// Labels for the object-token steps.
    pub object_labels: Vec<ObjectLabel>,
}

impl LabeledRecord {
    /// Labeled steps, with spans reconstructed from the prompt.
    pub fn steps(&self) -> Result<Vec<LabeledStep<'_>>> {
        let base = self.record.prompt.spans();
        self.object_labels
            .iter()
            .map(|ol| {
                let map = self.record.maps.get(ol.step_index).ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "label refers to step {} but record has {} maps",
                        ol.step_index,
                        self.record.maps.len()
                    ))
                })?;
                let start = base.generated.start;
                let spans = SegmentSpans {
                    generated: Span::new(start, start + map.step),
                    ..base
                };
                if spans.len() != map.len {
                    return Err(Error::ShapeMismatch(format!(
                        "map at step {} has length {} but prompt implies {}",
                        map.step,
                        map.len,
                        spans.len()
                    )));
                }
                Ok(LabeledStep {
                    map,
                    label: ol.label,
                    spans,
                })
            })
            .collect()
    }
}

/// Reads labeled records, one JSON object per line.
pub fn load_labeled_records(path: impl AsRef<Path>) -> Result<Vec<LabeledRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Builds a profile from labeled records.
pub fn profile_from_records(records: &[LabeledRecord], spec: ThresholdSpec) -> Result<AttentionProfile> {
    let first = records
        .iter()
        .find_map(|r| r.record.maps.first())
        .ok_or(Error::InsufficientLabeledData { n_r: 0, n_h: 0 })?;
    let mut acc = ProfileAccumulator::new(first.n_layers(), first.n_heads());
    for r in records {
        for step in r.steps()? {
            acc.add(&step)?;
        }
    }
    acc.finalize(spec)
}
