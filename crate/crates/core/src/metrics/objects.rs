// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{tokenize_text, Span};

/// Closed object vocabulary with a surface-phrase synonym map.
///
/// Matching is lowercase and token-based; longer phrases win.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectVocabulary {
    canonicals: BTreeSet<String>,
    phrases: HashMap<Vec<String>, String>,
    longest: usize,
}

impl ObjectVocabulary {
    /// Builds a vocabulary; every canonical also matches itself.
    pub fn new<I, S>(canonicals: I, synonyms: &BTreeMap<String, String>) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let canonicals: BTreeSet<String> = canonicals
            .into_iter()
            .map(|c| c.into().to_lowercase())
            .collect();
        let mut phrases = HashMap::new();
        for c in &canonicals {
            let toks = tokenize_text(c);
            if toks.is_empty() {
                return Err(Error::InvalidConfig("empty object name".into()));
            }
            phrases.insert(toks, c.clone());
        }
        for (phrase, canon) in synonyms {
            let canon = canon.to_lowercase();
            if !canonicals.contains(&canon) {
                return Err(Error::InvalidConfig(format!(
                    "synonym '{phrase}' maps to unknown object '{canon}'"
                )));
            }
            let toks = tokenize_text(phrase);
            if toks.is_empty() {
                return Err(Error::InvalidConfig("empty synonym phrase".into()));
            }
            phrases.insert(toks, canon);
        }
        let longest = phrases.keys().map(Vec::len).max().unwrap_or(0);
        Ok(ObjectVocabulary {
            canonicals,
            phrases,
            longest,
        })
    }

    /// Vocabulary whose canonicals are the values of a synonym map.
    pub fn from_synonyms(synonyms: &BTreeMap<String, String>) -> Result<Self> {
        let canon: BTreeSet<String> = synonyms.values().cloned().collect();
        Self::new(canon, synonyms)
    }

    /// Reads a `{phrase: canonical}` JSON file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: BTreeMap<String, String> = serde_json::from_str(&text)?;
        Self::from_synonyms(&map)
    }

    /// Canonical object names.
    pub fn canonicals(&self) -> &BTreeSet<String> {
        &self.canonicals
    }

    /// True if `object` is a canonical name.
    pub fn contains(&self, object: &str) -> bool {
        self.canonicals.contains(object)
    }

    /// Drops one surface phrase; canonicals stay.
    pub fn without_phrase(&self, phrase: &str) -> Self {
        let mut out = self.clone();
        out.phrases.remove(&tokenize_text(phrase));
        out.longest = out.phrases.keys().map(Vec::len).max().unwrap_or(0);
        out
    }

    /// Every match as `(token span, canonical)`, left to right, longest first.
    pub fn matches(&self, tokens: &[String]) -> Vec<(Span, String)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let max = self.longest.min(tokens.len() - i);
            let hit = (1..=max)
                .rev()
                .find_map(|k| self.phrases.get(&tokens[i..i + k]).map(|c| (k, c)));
            match hit {
                Some((k, c)) => {
                    out.push((Span::new(i, i + k), c.clone()));
                    i += k;
                }
                None => i += 1,
            }
        }
        out
    }

    /// Canonical mentions in order, repeats kept.
    pub fn mentions(&self, caption: &str) -> Vec<String> {
        self.matches(&tokenize_text(caption))
            .into_iter()
            .map(|(_, c)| c)
            .collect()
    }
}

/// Canonical objects in `caption`, first-occurrence order, each at most once.
pub fn extract_objects(caption: &str, vocab: &ObjectVocabulary) -> Vec<String> {
    let mut seen = BTreeSet::new();
    vocab
        .mentions(caption)
        .into_iter()
        .filter(|c| seen.insert(c.clone()))
        .collect()
}

/// Ground-truth objects of one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    /// Image id.
    pub image_id: String,
    /// Canonical objects present.
    pub objects: BTreeSet<String>,
}

/// Ground truth for a whole corpus, keyed by image id.
pub type Annotations = BTreeMap<String, BTreeSet<String>>;

/// Reads `{image_id: [objects]}` and checks objects against `vocab`.
pub fn load_annotations(path: impl AsRef<Path>, vocab: &ObjectVocabulary) -> Result<Annotations> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ann: Annotations = serde_json::from_str(&text)?;
    for (id, objs) in &ann {
        if let Some(o) = objs.iter().find(|o| !vocab.contains(o)) {
            return Err(Error::InvalidConfig(format!(
                "image '{id}' lists '{o}', which is not in the object vocabulary"
            )));
        }
    }
    Ok(ann)
}

/// Label an external judge gave one mentioned object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Judgment {
    /// In the image.
    Real,
    /// Not in the image.
    Hallucinated,
    /// The judge could not decide.
    Uncertain,
}

/// One line of a judgment file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgedObject {
    /// Image the caption describes.
    pub image_id: String,
    /// Object phrase as judged.
    pub object: String,
    /// The label.
    pub judgment: Judgment,
}

/// Reads judgment JSON lines.
pub fn load_judgments(path: impl AsRef<Path>) -> Result<Vec<JudgedObject>> {
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

/// A caption with its extracted objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    /// Image the caption describes.
    pub image_id: String,
    /// Caption text.
    pub text: String,
    /// Canonical mentions in order, repeats kept.
    pub mentions: Vec<String>,
    /// Open-vocabulary judgments keyed by object, when available.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub judgments: BTreeMap<String, Judgment>,
}

impl CaptionRecord {
    /// Extracts mentions from `text`.
    pub fn new(image_id: impl Into<String>, text: impl Into<String>, vocab: &ObjectVocabulary) -> Self {
        let text = text.into();
        CaptionRecord {
            image_id: image_id.into(),
            mentions: vocab.mentions(&text),
            text,
            judgments: BTreeMap::new(),
        }
    }

    /// Mentioned objects, each once.
    pub fn objects(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.mentions
            .iter()
            .map(String::as_str)
            .filter(|c| seen.insert(*c))
            .collect()
    }
}

/// Attaches judgments to records by image id.
pub fn attach_judgments(records: &mut [CaptionRecord], judgments: &[JudgedObject]) {
    let mut by_image: HashMap<&str, Vec<&JudgedObject>> = HashMap::new();
    for j in judgments {
        by_image.entry(&j.image_id).or_default().push(j);
    }
    for r in records {
        if let Some(js) = by_image.get(r.image_id.as_str()) {
            for j in js {
                r.judgments.insert(j.object.clone(), j.judgment);
            }
        }
    }
}

/// How repeated mentions inside one caption count toward `C_I`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MentionCounting {
    /// Each object once per caption.
    #[default]
    PerCaption,
    /// Every mention.
    Every,
}

/// Integer counts behind `C_S` and `C_I`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ChairCounts {
    /// Captions scored.
    pub captions: u64,
    /// Captions with at least one hallucinated object.
    pub hallucinated_captions: u64,
    /// Object mentions.
    pub mentions: u64,
    /// Hallucinated object mentions.
    pub hallucinated_mentions: u64,
}

impl ChairCounts {
    fn add(self, o: Self) -> Self {
        ChairCounts {
            captions: self.captions + o.captions,
            hallucinated_captions: self.hallucinated_captions + o.hallucinated_captions,
            mentions: self.mentions + o.mentions,
            hallucinated_mentions: self.hallucinated_mentions + o.hallucinated_mentions,
        }
    }

    /// Sentence-level hallucination rate.
    pub fn c_s(&self) -> f64 {
        ratio(self.hallucinated_captions, self.captions)
    }

    /// Instance-level hallucination rate.
    pub fn c_i(&self) -> f64 {
        ratio(self.hallucinated_mentions, self.mentions)
    }
}

pub(crate) fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn ground_truth<'a>(ann: &'a Annotations, id: &str) -> Result<&'a BTreeSet<String>> {
    ann.get(id).ok_or_else(|| Error::MissingAnnotation(id.to_string()))
}

/// CHAIR counts over a corpus.
pub fn chair_scores(
    records: &[CaptionRecord],
    ann: &Annotations,
    counting: MentionCounting,
) -> Result<ChairCounts> {
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    records
        .par_iter()
        .map(|r| {
            let gt = ground_truth(ann, &r.image_id)?;
            let objs: Vec<&str> = match counting {
                MentionCounting::PerCaption => r.objects(),
                MentionCounting::Every => r.mentions.iter().map(String::as_str).collect(),
            };
            let hall = objs.iter().filter(|o| !gt.contains(**o)).count() as u64;
            Ok(ChairCounts {
                captions: 1,
                hallucinated_captions: (hall > 0) as u64,
                mentions: objs.len() as u64,
                hallucinated_mentions: hall,
            })
        })
        .try_reduce(ChairCounts::default, |a, b| Ok(a.add(b)))
}

/// Integer counts behind object precision and recall.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct F1Counts {
    /// Sum of `|extracted ∩ ground truth|`.
    pub matched: u64,
    /// Sum of `|extracted|`.
    pub extracted: u64,
    /// Sum of `|ground truth|`.
    pub ground_truth: u64,
}

/// Precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    /// Precision.
    pub precision: f64,
    /// Recall.
    pub recall: f64,
    /// Harmonic mean; 0 when both are 0.
    pub f1: f64,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl F1Counts {
    /// Corpus-micro scores.
    pub fn score(&self) -> F1Score {
        let precision = ratio(self.matched, self.extracted);
        let recall = ratio(self.matched, self.ground_truth);
        F1Score {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

fn per_image_f1(r: &CaptionRecord, ann: &Annotations) -> Result<F1Counts> {
    let gt = ground_truth(ann, &r.image_id)?;
    let objs = r.objects();
    Ok(F1Counts {
        matched: objs.iter().filter(|o| gt.contains(**o)).count() as u64,
        extracted: objs.len() as u64,
        ground_truth: gt.len() as u64,
    })
}

/// Object F1 counts summed over the corpus.
pub fn f1_counts(records: &[CaptionRecord], ann: &Annotations) -> Result<F1Counts> {
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    records
        .par_iter()
        .map(|r| per_image_f1(r, ann))
        .try_reduce(F1Counts::default, |a, b| {
            Ok(F1Counts {
                matched: a.matched + b.matched,
                extracted: a.extracted + b.extracted,
                ground_truth: a.ground_truth + b.ground_truth,
            })
        })
}

/// Object precision/recall/F1, corpus-micro or averaged per caption.
pub fn f1_objects(records: &[CaptionRecord], ann: &Annotations, macro_average: bool) -> Result<F1Score> {
    if !macro_average {
        return Ok(f1_counts(records, ann)?.score());
    }
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let scores = records
        .iter()
        .map(|r| per_image_f1(r, ann).map(|c| c.score()))
        .collect::<Result<Vec<_>>>()?;
    let n = scores.len() as f64;
    Ok(F1Score {
        precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
    })
}

/// Integer counts behind `C_O`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OpenChairCounts {
    /// Objects judged hallucinated.
    pub hallucinated: u64,
    /// Objects judged real.
    pub real: u64,
    /// Objects judged uncertain, excluded from the ratio.
    pub uncertain: u64,
}

impl OpenChairCounts {
    /// `hallucinated / (hallucinated + real)`.
    pub fn c_o(&self) -> Result<f64> {
        let den = self.hallucinated + self.real;
        if den == 0 {
            return Err(Error::NoJudgedObjects);
        }
        Ok(self.hallucinated as f64 / den as f64)
    }
}

/// Tallies judgments.
pub fn open_chair_counts<'a>(judgments: impl IntoIterator<Item = &'a Judgment>) -> OpenChairCounts {
    let mut c = OpenChairCounts::default();
    for j in judgments {
        match j {
            Judgment::Real => c.real += 1,
            Judgment::Hallucinated => c.hallucinated += 1,
            Judgment::Uncertain => c.uncertain += 1,
        }
    }
    c
}

/// Open-vocabulary hallucination rate over judged records.
pub fn open_chair(records: &[CaptionRecord]) -> Result<f64> {
    open_chair_counts(records.iter().flat_map(|r| r.judgments.values())).c_o()
}
