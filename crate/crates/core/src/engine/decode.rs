// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::{forward_step, AttentionHook, AttentionMap, ModelWeights};
use crate::error::{Error, Result};
use crate::intervention::{InterventionConfig, InterventionHook, Mode};
use crate::profiler::AttentionProfile;
use crate::rng;
use crate::sequence::{append_generated, SegmentedSequence, TokenId};

/// How the next token is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Argmax, ties broken by the lowest token id.
    #[default]
    Greedy,
    /// Draw from the temperature-scaled distribution.
    Sample,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_max_tokens() -> usize {
    512
}

/// Decoding settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Greedy or sampled decoding.
    #[serde(default)]
    pub strategy: Strategy,
    /// Softmax temperature; sampling only.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Seed of the sampling generator; sampling only.
    #[serde(default)]
    pub seed: u64,
    /// Maximum number of generated tokens.
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    /// Token that ends generation; it is not appended to the output.
    #[serde(default)]
    pub stop_token: Option<TokenId>,
    /// Record one attention map per generated token.
    #[serde(default)]
    pub capture_attention: bool,
    /// Also record the rows as they were before intervention.
    #[serde(default)]
    pub capture_pre_intervention: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            temperature: 1.0,
            seed: 0,
            max_tokens: 512,
            stop_token: None,
            capture_attention: false,
            capture_pre_intervention: false,
        }
    }
}

impl DecodeConfig {
    /// Greedy decoding capped at `max_tokens`.
    pub fn greedy(max_tokens: usize) -> Self {
        DecodeConfig {
            max_tokens,
            ..Self::default()
        }
    }

    /// Checks field ranges.
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::InvalidConfig("max_tokens must be at least 1".into()));
        }
        if self.strategy == Strategy::Sample && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Output of one decode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    /// Prompt as given, with `n = 0`.
    pub prompt: SegmentedSequence,
    /// Generated tokens, stop token excluded.
    pub tokens: Vec<TokenId>,
    /// Map `k` predicted token `k`; empty unless capture was requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub maps: Vec<AttentionMap>,
    /// Rows before intervention, when requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pre_maps: Vec<AttentionMap>,
    /// Decoding settings used.
    pub decode: DecodeConfig,
    /// Intervention used, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervention: Option<InterventionConfig>,
    /// Number of (step, layer) pairs where the adaptive trigger fired.
    #[serde(default)]
    pub trigger_events: usize,
    /// Image the prompt describes, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    /// Detokenized output, when a vocabulary is at hand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// Decodes from `prompt` under an intervention config.
///
/// `profile` is required when `icfg.mode` is [`Mode::AdaIat`].
pub fn decode(
    weights: &ModelWeights,
    prompt: &SegmentedSequence,
    dcfg: &DecodeConfig,
    icfg: &InterventionConfig,
    profile: Option<&AttentionProfile>,
) -> Result<GenerationRecord> {
    let mut record = if icfg.mode == Mode::None {
        decode_with_hook(weights, prompt, dcfg, None)?
    } else {
        let mut hook = InterventionHook::new(icfg.clone(), profile.cloned(), weights.spec())?;
        let mut record = decode_with_hook(weights, prompt, dcfg, Some(&mut hook))?;
        record.trigger_events = hook.trigger_events();
        record
    };
    record.intervention = Some(icfg.clone());
    Ok(record)
}

/// Decodes from `prompt`, passing every forward step through `hook`.
pub fn decode_with_hook(
    weights: &ModelWeights,
    prompt: &SegmentedSequence,
    dcfg: &DecodeConfig,
    mut hook: Option<&mut dyn AttentionHook>,
) -> Result<GenerationRecord> {
    dcfg.validate()?;
    let max_positions = weights.spec().max_positions;
    let mut rng = rng::seeded(dcfg.seed);
    let mut seq = prompt.clone();
    let mut tokens = Vec::new();
    let mut maps = Vec::new();
    let mut pre_maps = Vec::new();

    while tokens.len() < dcfg.max_tokens && seq.len() < max_positions {
        let step_hook: Option<&mut dyn AttentionHook> = match hook {
            Some(ref mut h) => Some(&mut **h),
            None => None,
        };
        let out = forward_step(weights, &seq, step_hook)?;
        let next = match dcfg.strategy {
            Strategy::Greedy => argmax(&out.logits),
            Strategy::Sample => sample(&out.logits, dcfg.temperature, &mut rng),
        };
        if dcfg.stop_token == Some(next) {
            break;
        }
        if dcfg.capture_attention {
            maps.push(out.map);
            if dcfg.capture_pre_intervention {
                if let Some(pre) = out.pre_map {
                    pre_maps.push(pre);
                }
            }
        }
        tokens.push(next);
        seq = append_generated(&seq, next);
    }

    Ok(GenerationRecord {
        prompt: prompt.clone(),
        tokens,
        maps,
        pre_maps,
        decode: dcfg.clone(),
        intervention: None,
        trigger_events: 0,
        image_id: None,
        text: None,
    })
}

fn argmax(logits: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    TokenId(best as u32)
}

fn sample(logits: &[f64], temperature: f64, rng: &mut rng::Rng) -> TokenId {
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    let probs = super::softmax(&scaled);
    let u = rng::uniform(rng);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return TokenId(i as u32);
        }
    }
    // Rounding left `acc` just below one: take the last token with mass.
    let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    TokenId(last as u32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{IdentityHook, ModelSpec};
    use crate::sequence::build_segmented_sequence;

    fn model() -> ModelWeights {
        let spec = ModelSpec {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_k: 4,
            vocab_size: 13,
            max_positions: 40,
            max_tokens: 16,
        };
        ModelWeights::random(spec, 5, 0.9).unwrap()
    }

    fn prompt() -> SegmentedSequence {
        build_segmented_sequence(
            &[TokenId(1)],
            &[TokenId(2), TokenId(3), TokenId(4)],
            &[TokenId(5), TokenId(6)],
        )
        .unwrap()
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), TokenId(1));
        assert_eq!(argmax(&[2.0, 2.0]), TokenId(0));
    }

    #[test]
    fn greedy_is_deterministic_and_capped() {
        let w = model();
        let mut cfg = DecodeConfig::greedy(3);
        cfg.capture_attention = true;
        let a = decode(&w, &prompt(), &cfg, &InterventionConfig::none(), None).unwrap();
        let b = decode(&w, &prompt(), &cfg, &InterventionConfig::none(), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.len(), 3);
        assert_eq!(a.maps.len(), 3);
        for (k, m) in a.maps.iter().enumerate() {
            assert_eq!(m.len, prompt().len() + k);
            assert_eq!(m.step, k);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let w = model();
        let cfg = DecodeConfig {
            strategy: Strategy::Sample,
            temperature: 2.0,
            seed: 17,
            max_tokens: 12,
            ..DecodeConfig::default()
        };
        let a = decode_with_hook(&w, &prompt(), &cfg, None).unwrap();
        let b = decode_with_hook(&w, &prompt(), &cfg, None).unwrap();
        assert_eq!(a.tokens, b.tokens);
        let differs = (0..20u64).any(|s| {
            let other = DecodeConfig { seed: s, ..cfg.clone() };
            decode_with_hook(&w, &prompt(), &other, None).unwrap().tokens != a.tokens
        });
        assert!(differs, "twenty seeds all produced the same sample");
    }

    #[test]
    fn stop_token_ends_generation_without_emitting() {
        let w = model();
        let free = decode_with_hook(&w, &prompt(), &DecodeConfig::greedy(5), None).unwrap();
        let stop = free.tokens[2];
        let cfg = DecodeConfig {
            stop_token: Some(stop),
            ..DecodeConfig::greedy(5)
        };
        let cut = decode_with_hook(&w, &prompt(), &cfg, None).unwrap();
        let first = free.tokens.iter().position(|&t| t == stop).unwrap();
        assert_eq!(cut.tokens, free.tokens[..first]);
    }

    #[test]
    fn identity_hook_is_neutral_over_a_decode() {
        let w = model();
        let mut cfg = DecodeConfig::greedy(8);
        cfg.capture_attention = true;
        let plain = decode_with_hook(&w, &prompt(), &cfg, None).unwrap();
        let mut id = IdentityHook;
        let hooked = decode_with_hook(&w, &prompt(), &cfg, Some(&mut id)).unwrap();
        assert_eq!(plain.tokens, hooked.tokens);
        assert_eq!(plain.maps, hooked.maps);
    }

    #[test]
    fn context_limit_stops_decoding() {
        let mut w = model();
        let spec = ModelSpec {
            max_positions: 8,
            ..w.spec().clone()
        };
        w = ModelWeights::random(spec, 5, 0.9).unwrap();
        let rec = decode_with_hook(&w, &prompt(), &DecodeConfig::greedy(50), None).unwrap();
        assert_eq!(rec.tokens.len(), 8 - prompt().len());
    }

    #[test]
    fn adaiat_needs_a_profile() {
        let w = model();
        let cfg = InterventionConfig::adaiat(6.0);
        let err = decode(&w, &prompt(), &DecodeConfig::greedy(2), &cfg, None).unwrap_err();
        assert_eq!(err.to_string(), "profile required");
    }
}
