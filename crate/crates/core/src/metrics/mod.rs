// SPDX-License-Identifier: MIT OR Apache-2.0

//! Caption evaluation.
//!
//! - `C_S`: share of captions with at least one object absent from the
//!   image's ground truth.
//! - `C_I`: share of object mentions that are absent.
//! - Object precision, recall and F1 against the ground truth.
//! - Distinct-n, per caption and averaged; self-BLEU over the corpus.
//! - `C_O`: hallucinated over judged objects, from external judgments.
//!
//! Every ratio in a [`MetricReport`] comes with the integer counts it was
//! computed from.

mod diversity;
mod objects;

pub use diversity::{distinct_n, mean_distinct_n, self_bleu, sentence_bleu};
pub use objects::{
    attach_judgments, chair_scores, extract_objects, f1_counts, f1_objects, load_annotations,
    load_judgments, open_chair, open_chair_counts, AnnotatedImage, Annotations, CaptionRecord,
    ChairCounts, F1Counts, F1Score, JudgedObject, Judgment, MentionCounting, ObjectVocabulary,
    OpenChairCounts,
};

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Evaluation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Counting of repeated mentions for `C_I`.
    #[serde(default)]
    pub mention_counting: MentionCounting,
    /// Average F1 per caption instead of pooling counts.
    #[serde(default)]
    pub macro_f1: bool,
    /// Extra distinct-n orders beyond 1.
    #[serde(default)]
    pub distinct_orders: Vec<usize>,
    /// Also compute self-BLEU.
    #[serde(default = "yes")]
    pub self_bleu: bool,
}

fn yes() -> bool {
    true
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mention_counting: MentionCounting::PerCaption,
            macro_f1: false,
            distinct_orders: Vec::new(),
            self_bleu: true,
        }
    }
}

/// All metrics of one method on one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Sentence-level hallucination rate.
    #[serde(rename = "C_S")]
    pub c_s: f64,
    /// Instance-level hallucination rate.
    #[serde(rename = "C_I")]
    pub c_i: f64,
    /// Open-vocabulary rate, when judgments were given.
    #[serde(rename = "C_O", skip_serializing_if = "Option::is_none", default)]
    pub c_o: Option<f64>,
    /// Object precision.
    pub precision: f64,
    /// Object recall.
    pub recall: f64,
    /// Object F1.
    #[serde(rename = "F1")]
    pub f1: f64,
    /// Mean per-caption distinct-1.
    #[serde(rename = "D_1")]
    pub d_1: f64,
    /// Mean per-caption distinct-n for extra orders, keyed by n.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub d_n: BTreeMap<usize, f64>,
    /// Self-BLEU, when computed.
    #[serde(rename = "B_self", skip_serializing_if = "Option::is_none", default)]
    pub b_self: Option<f64>,
    /// Counts behind `C_S` and `C_I`.
    pub chair_counts: ChairCounts,
    /// Counts behind precision and recall.
    pub f1_counts: F1Counts,
    /// Counts behind `C_O`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub open_chair_counts: Option<OpenChairCounts>,
}

/// Scores a corpus of extracted captions.
pub fn evaluate(records: &[CaptionRecord], ann: &Annotations, opts: &EvalOptions) -> Result<MetricReport> {
    let chair = chair_scores(records, ann, opts.mention_counting)?;
    let f1c = f1_counts(records, ann)?;
    let f1 = if opts.macro_f1 {
        f1_objects(records, ann, true)?
    } else {
        f1c.score()
    };
    let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    let d_1 = mean_distinct_n(&texts, 1)?;
    let d_n = opts
        .distinct_orders
        .iter()
        .filter(|&&n| n != 1)
        .map(|&n| Ok((n, mean_distinct_n(&texts, n)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let b_self = if opts.self_bleu && texts.len() >= 2 {
        Some(self_bleu(&texts)?)
    } else {
        None
    };
    let oc = records
        .iter()
        .any(|r| !r.judgments.is_empty())
        .then(|| open_chair_counts(records.iter().flat_map(|r| r.judgments.values())));
    let c_o = match &oc {
        Some(c) => Some(c.c_o()?),
        None => None,
    };
    Ok(MetricReport {
        c_s: chair.c_s(),
        c_i: chair.c_i(),
        c_o,
        precision: f1.precision,
        recall: f1.recall,
        f1: f1.f1,
        d_1,
        d_n,
        b_self,
        chair_counts: chair,
        f1_counts: f1c,
        open_chair_counts: oc,
    })
}

/// Header of [`report_csv`].
pub const REPORT_CSV_HEADER: [&str; 9] = ["method", "C_S", "C_I", "C_O", "precision", "recall", "F1", "D_1", "B_self"];

/// One CSV row per method, in the given order.
pub fn report_csv(rows: &[(String, MetricReport)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_CSV_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (name, r) in rows {
        w.write_record([
            name.clone(),
            r.c_s.to_string(),
            r.c_i.to_string(),
            opt(r.c_o),
            r.precision.to_string(),
            r.recall.to_string(),
            r.f1.to_string(),
            r.d_1.to_string(),
            opt(r.b_self),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is ascii"))
}

/// One caption line: `{image_id, text}`; other fields are ignored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionLine {
    /// Image id.
    pub image_id: String,
    /// Caption text.
    pub text: String,
}

/// Reads caption JSON lines.
pub fn load_captions(path: impl AsRef<Path>) -> Result<Vec<CaptionLine>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
