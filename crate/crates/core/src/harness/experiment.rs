// SPDX-License-Identifier: MIT OR Apache-2.0

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::world::{World, WorldImage};
use crate::engine::{decode, DecodeConfig, GenerationRecord};
use crate::error::{Error, Result};
use crate::intervention::{replay_triggers, InterventionConfig, Mode};
use crate::metrics::{evaluate, Annotations, CaptionRecord, EvalOptions, MetricReport};
use crate::profiler::{
    profile_from_records, AttentionProfile, Label, LabeledRecord, ObjectLabel, ThresholdSpec,
};
use crate::rng;

impl World {
    /// Greedy decoding that stops at the world's end token.
    pub fn greedy_config(&self) -> DecodeConfig {
        DecodeConfig {
            stop_token: Some(self.stop_token),
            ..DecodeConfig::greedy(self.spec.max_tokens)
        }
    }
}

/// Decodes every image; image `i` samples with sub-seed `(dcfg.seed, i)`.
pub fn decode_images(
    world: &World,
    images: &[WorldImage],
    dcfg: &DecodeConfig,
    icfg: &InterventionConfig,
    profile: Option<&AttentionProfile>,
) -> Result<Vec<GenerationRecord>> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, img)| decode_one(world, i, img, dcfg, icfg, profile))
        .collect()
}

fn decode_one(
    world: &World,
    i: usize,
    img: &WorldImage,
    dcfg: &DecodeConfig,
    icfg: &InterventionConfig,
    profile: Option<&AttentionProfile>,
) -> Result<GenerationRecord> {
    let cfg = DecodeConfig {
        seed: rng::derive_seed(dcfg.seed, i as u64),
        ..dcfg.clone()
    };
    let mut rec = decode(&world.weights, &img.prompt, &cfg, icfg, profile)?;
    rec.image_id = Some(img.image.image_id.clone());
    rec.text = Some(world.vocab.detokenize(&rec.tokens));
    Ok(rec)
}

/// Labels each emitted object token real or hallucinated against `ann`.
pub fn label_record(world: &World, record: GenerationRecord, ann: &Annotations) -> Result<LabeledRecord> {
    let id = record.image_id.clone().unwrap_or_default();
    let gt = ann.get(&id).ok_or_else(|| Error::MissingAnnotation(id.clone()))?;
    let object_labels = record
        .tokens
        .iter()
        .enumerate()
        .filter_map(|(k, t)| {
            world.object_of(*t).map(|o| ObjectLabel {
                step_index: k,
                label: if gt.contains(o) { Label::Real } else { Label::Hallucinated },
            })
        })
        .collect();
    Ok(LabeledRecord {
        record,
        object_labels,
    })
}

/// Decodes the profiling images with capture and labels their objects.
pub fn labeled_records_for_world(world: &World, dcfg: &DecodeConfig) -> Result<Vec<LabeledRecord>> {
    let cfg = DecodeConfig {
        capture_attention: true,
        ..dcfg.clone()
    };
    let ann = world.profile_annotations();
    decode_images(world, &world.profile_images, &cfg, &InterventionConfig::none(), None)?
        .into_iter()
        .map(|r| label_record(world, r, &ann))
        .collect()
}

/// Profiles baseline decoding on the world's profiling images.
pub fn build_profile_for_world(
    world: &World,
    dcfg: &DecodeConfig,
    threshold: ThresholdSpec,
) -> Result<AttentionProfile> {
    profile_from_records(&labeled_records_for_world(world, dcfg)?, threshold)
}

/// Extracts objects from decoded captions.
pub fn caption_records(world: &World, records: &[GenerationRecord]) -> Vec<CaptionRecord> {
    let vocab = world.object_vocabulary();
    records
        .iter()
        .map(|r| {
            let text = r.text.clone().unwrap_or_else(|| world.vocab.detokenize(&r.tokens));
            CaptionRecord::new(r.image_id.clone().unwrap_or_default(), text, &vocab)
        })
        .collect()
}

/// A named intervention config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Method {
    /// Row label.
    pub name: String,
    /// Config.
    #[serde(flatten)]
    pub config: InterventionConfig,
}

impl Method {
    /// Builds a method.
    pub fn new(name: impl Into<String>, config: InterventionConfig) -> Self {
        Method {
            name: name.into(),
            config,
        }
    }
}

/// One method's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    /// Method name.
    pub name: String,
    /// Config used.
    pub config: InterventionConfig,
    /// Metrics.
    pub report: MetricReport,
    /// Mean generated tokens per caption.
    pub mean_tokens: f64,
    /// Adaptive trigger firings summed over captions.
    pub trigger_events: usize,
    /// Mean wall time per generated token, when timing was requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ms_per_token: Option<f64>,
}

/// Methods compared on one world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// One row per method, in request order.
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    /// Row by method name.
    pub fn row(&self, name: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Options for [`run_comparison`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComparisonOptions {
    /// Decode serially and record ms/token.
    pub timing: bool,
    /// Metric switches.
    pub eval: EvalOptions,
}

fn run_method(
    world: &World,
    profile: Option<&AttentionProfile>,
    method: &Method,
    dcfg: &DecodeConfig,
    opts: &ComparisonOptions,
) -> Result<ComparisonRow> {
    let (records, ms) = if opts.timing {
        let start = Instant::now();
        let recs = world
            .images
            .iter()
            .enumerate()
            .map(|(i, img)| decode_one(world, i, img, dcfg, &method.config, profile))
            .collect::<Result<Vec<_>>>()?;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        let tokens: usize = recs.iter().map(|r| r.tokens.len()).sum();
        (recs, Some(elapsed / tokens.max(1) as f64))
    } else {
        (decode_images(world, &world.images, dcfg, &method.config, profile)?, None)
    };
    let caps = caption_records(world, &records);
    let report = evaluate(&caps, &world.annotations(), &opts.eval)?;
    let tokens: usize = records.iter().map(|r| r.tokens.len()).sum();
    Ok(ComparisonRow {
        name: method.name.clone(),
        config: method.config.clone(),
        report,
        mean_tokens: tokens as f64 / records.len().max(1) as f64,
        trigger_events: records.iter().map(|r| r.trigger_events).sum(),
        ms_per_token: ms,
    })
}

/// Decodes every evaluation image under every method and scores each.
pub fn run_comparison(
    world: &World,
    profile: Option<&AttentionProfile>,
    methods: &[Method],
    dcfg: &DecodeConfig,
    opts: &ComparisonOptions,
) -> Result<ComparisonReport> {
    if profile.is_none() && methods.iter().any(|m| m.config.mode == Mode::AdaIat) {
        return Err(Error::ProfileRequired);
    }
    let rows = methods
        .iter()
        .map(|m| run_method(world, profile, m, dcfg, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonReport { rows })
}

/// `method,C_S,C_I,F1,D_1,mean_tokens,trigger_events`, plus `ms_per_token`
/// when any row was timed.
pub fn comparison_csv(report: &ComparisonReport) -> Result<String> {
    let timed = report.rows.iter().any(|r| r.ms_per_token.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method", "C_S", "C_I", "F1", "D_1", "mean_tokens", "trigger_events"];
    if timed {
        header.push("ms_per_token");
    }
    w.write_record(&header)?;
    for r in &report.rows {
        let mut rec = vec![
            r.name.clone(),
            r.report.c_s.to_string(),
            r.report.c_i.to_string(),
            r.report.f1.to_string(),
            r.report.d_1.to_string(),
            r.mean_tokens.to_string(),
            r.trigger_events.to_string(),
        ];
        if timed {
            rec.push(r.ms_per_token.map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    finish_csv(w)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is ascii"))
}

/// Grid for [`sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    /// Mode of every cell.
    pub mode: Mode,
    /// Amplification factors.
    pub alphas: Vec<f64>,
    /// Threshold coefficients.
    pub betas: Vec<f64>,
    /// Inclusive layer ranges.
    pub layers: Vec<(usize, usize)>,
}

/// One cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Mode.
    pub mode: Mode,
    /// Amplification factor.
    pub alpha: f64,
    /// Threshold coefficient.
    pub beta: f64,
    /// Inclusive layer range.
    pub layers: (usize, usize),
    /// Metrics.
    pub report: MetricReport,
    /// Adaptive trigger firings.
    pub trigger_events: usize,
}

/// Evaluates every `(alpha, beta, layers)` cell, in that nesting order.
pub fn sweep(
    world: &World,
    profile: Option<&AttentionProfile>,
    dcfg: &DecodeConfig,
    spec: &SweepSpec,
) -> Result<Vec<SweepRow>> {
    if spec.alphas.is_empty() || spec.betas.is_empty() || spec.layers.is_empty() {
        return Err(Error::InvalidConfig("sweep grids must be non-empty".into()));
    }
    let mut cells = Vec::new();
    for &alpha in &spec.alphas {
        for &beta in &spec.betas {
            for &(lo, hi) in &spec.layers {
                cells.push((alpha, beta, (lo, hi)));
            }
        }
    }
    let opts = ComparisonOptions::default();
    cells
        .into_iter()
        .map(|(alpha, beta, layers)| {
            let config = InterventionConfig {
                mode: spec.mode,
                alpha,
                beta: Some(beta),
                ..InterventionConfig::none()
            }
            .layers(layers.0, layers.1);
            let row = run_method(world, profile, &Method::new(spec.mode.to_string(), config), dcfg, &opts)?;
            Ok(SweepRow {
                mode: spec.mode,
                alpha,
                beta,
                layers,
                report: row.report,
                trigger_events: row.trigger_events,
            })
        })
        .collect()
}

/// Header of [`sweep_csv`].
pub const SWEEP_CSV_HEADER: [&str; 8] = ["mode", "alpha", "beta", "layers", "C_S", "C_I", "F1", "D_1"];

/// Sweep rows as CSV, layers written `lo-hi`.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SWEEP_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.mode.to_string(),
            r.alpha.to_string(),
            r.beta.to_string(),
            format!("{}-{}", r.layers.0, r.layers.1),
            r.report.c_s.to_string(),
            r.report.c_i.to_string(),
            r.report.f1.to_string(),
            r.report.d_1.to_string(),
        ])?;
    }
    finish_csv(w)
}

/// Trigger events per `beta`, replayed over baseline decodes of the
/// evaluation images.
pub fn replay_trigger_counts(
    world: &World,
    profile: &AttentionProfile,
    dcfg: &DecodeConfig,
    betas: &[f64],
    layers: (usize, usize),
) -> Result<Vec<usize>> {
    let cfg = DecodeConfig {
        capture_attention: true,
        ..dcfg.clone()
    };
    let recs = decode_images(world, &world.images, &cfg, &InterventionConfig::none(), None)?;
    let maps: Vec<_> = recs
        .iter()
        .map(|r| (r.maps.as_slice(), r.prompt.spans()))
        .collect();
    betas
        .iter()
        .map(|&b| Ok(replay_triggers(&maps, profile, b, layers)?.len()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{synthesize_world, WorldSpec};

    fn small_world() -> World {
        synthesize_world(&WorldSpec {
            n_images: 12,
            n_profile_images: 24,
            ..WorldSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn profile_has_both_labels() {
        let w = small_world();
        let p = build_profile_for_world(&w, &w.greedy_config(), ThresholdSpec::default()).unwrap();
        assert!(p.n_r > 0 && p.n_h > 0);
        let again = build_profile_for_world(&w, &w.greedy_config(), ThresholdSpec::default()).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn zero_prior_world_cannot_be_profiled() {
        let w = synthesize_world(&WorldSpec {
            prior_strength: 0.0,
            n_images: 2,
            n_profile_images: 10,
            ..WorldSpec::default()
        })
        .unwrap();
        let err = build_profile_for_world(&w, &w.greedy_config(), ThresholdSpec::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientLabeledData { n_h: 0, .. }));
    }

    #[test]
    fn baseline_rows_do_not_depend_on_company() {
        let w = small_world();
        let dcfg = w.greedy_config();
        let only = run_comparison(&w, None, &[Method::new("none", InterventionConfig::none())], &dcfg, &Default::default()).unwrap();
        assert_eq!(only.rows.len(), 1);
        let both = run_comparison(
            &w,
            None,
            &[
                Method::new("a", InterventionConfig::none()),
                Method::new("pai", InterventionConfig::pai(1.0).layers(0, 3)),
                Method::new("b", InterventionConfig::none()),
            ],
            &dcfg,
            &Default::default(),
        )
        .unwrap();
        assert_eq!(both.rows[0].report, only.rows[0].report);
        assert_eq!(both.rows[2].report, only.rows[0].report);
    }

    #[test]
    fn adaiat_without_profile_is_refused() {
        let w = small_world();
        let err = run_comparison(&w, None, &[Method::new("ada", InterventionConfig::adaiat(6.0))], &w.greedy_config(), &Default::default())
            .unwrap_err();
        assert_eq!(err.to_string(), "profile required");
    }

    #[test]
    fn sweep_shape_and_zero_alpha() {
        let w = small_world();
        let dcfg = w.greedy_config();
        let base = run_comparison(&w, None, &[Method::new("none", InterventionConfig::none())], &dcfg, &Default::default()).unwrap();
        let spec = SweepSpec {
            mode: Mode::Iat,
            alphas: vec![0.0, 0.5, 1.0],
            betas: vec![0.5],
            layers: vec![(0, 1), (1, 3)],
        };
        let rows = sweep(&w, None, &dcfg, &spec).unwrap();
        assert_eq!(rows.len(), 6);
        for r in rows.iter().filter(|r| r.alpha == 0.0) {
            assert_eq!(r.report, base.rows[0].report);
        }
        let csv = sweep_csv(&rows).unwrap();
        assert!(csv.starts_with("mode,alpha,beta,layers,C_S,C_I,F1,D_1\n"));
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.contains(",0-1,"));
    }
}
