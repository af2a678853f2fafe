// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use attn_steer::metrics::{
    attach_judgments, chair_scores, distinct_n, evaluate, f1_counts, load_annotations, load_captions,
    load_judgments, open_chair, open_chair_counts, self_bleu, CaptionRecord, EvalOptions, F1Counts, MentionCounting,
    ObjectVocabulary, OpenChairCounts,
};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/metrics").join(name)
}

fn corpus() -> (Vec<CaptionRecord>, attn_steer::metrics::Annotations) {
    let vocab = ObjectVocabulary::load(fixture("synonyms.json")).unwrap();
    let ann = load_annotations(fixture("annotations.json"), &vocab).unwrap();
    let recs = load_captions(fixture("captions.jsonl"))
        .unwrap()
        .into_iter()
        .map(|c| CaptionRecord::new(c.image_id, c.text, &vocab))
        .collect();
    (recs, ann)
}

#[test]
fn chair_fixture() {
    // Captions 3 and 5 hallucinate (boat, cat): 2 of 5 captions. Distinct
    // mentions per caption are 3 + 1 + 2 + 1 + 1 = 8, two of them absent.
    let (recs, ann) = corpus();
    let c = chair_scores(&recs, &ann, MentionCounting::PerCaption).unwrap();
    assert_eq!((c.captions, c.hallucinated_captions, c.mentions, c.hallucinated_mentions), (5, 2, 8, 2));
    assert_eq!(c.c_s(), 0.4);
    assert_eq!(c.c_i(), 0.25);
    // "cat" twice in caption 5 counts twice when every mention counts.
    let every = chair_scores(&recs, &ann, MentionCounting::Every).unwrap();
    assert_eq!((every.mentions, every.hallucinated_mentions), (9, 3));
}

#[test]
fn f1_fixture() {
    let (recs, ann) = corpus();
    let c = f1_counts(&recs, &ann).unwrap();
    assert_eq!(c, F1Counts { matched: 6, extracted: 8, ground_truth: 12 });
    let s = c.score();
    assert_eq!((s.precision, s.recall), (0.75, 0.5));
    assert!((s.f1 - 0.6).abs() < 1e-15);
}

#[test]
fn open_chair_fixture() {
    let (mut recs, _) = corpus();
    attach_judgments(&mut recs, &load_judgments(fixture("judgments.jsonl")).unwrap());
    let c = open_chair_counts(recs.iter().flat_map(|r| r.judgments.values()));
    assert_eq!(c, OpenChairCounts { hallucinated: 3, real: 9, uncertain: 5 });
    assert_eq!(open_chair(&recs).unwrap(), 0.25);
}

#[test]
fn report_agrees_with_parts() {
    let (recs, ann) = corpus();
    let r = evaluate(&recs, &ann, &EvalOptions::default()).unwrap();
    assert_eq!((r.c_s, r.c_i), (0.4, 0.25));
    assert!(r.c_o.is_none());
    let json = serde_json::to_value(&r).unwrap();
    for key in ["C_S", "C_I", "F1", "D_1", "B_self", "chair_counts", "f1_counts"] {
        assert!(json.get(key).is_some(), "{key}");
    }
}

#[test]
fn diversity_fixtures() {
    assert_eq!(distinct_n("the cat the cat", 1).unwrap(), 0.5);
    assert_eq!(self_bleu(&["a dog runs on the beach", "a dog runs on the beach"]).unwrap(), 1.0);
    assert_eq!(self_bleu(&["a dog runs on the beach", "two cats sleep in sunny windows"]).unwrap(), 0.0);
}
