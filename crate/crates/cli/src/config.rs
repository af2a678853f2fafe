// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use attn_steer::metrics::EvalOptions;
use attn_steer::{DecodeConfig, InterventionConfig, ThresholdSpec};
use serde::Deserialize;

use crate::CliError;

/// Experiment manifest. Every field is optional; command-line flags win.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub weights: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub world: Option<PathBuf>,
    pub records: Option<PathBuf>,
    pub generations: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
    pub judgments: Option<PathBuf>,
    pub profile: Option<PathBuf>,
    pub methods: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub decode: Option<DecodeConfig>,
    pub intervention: Option<InterventionConfig>,
    pub threshold: Option<ThresholdSpec>,
    pub eval: Option<EvalOptions>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
}

impl RunConfig {
    /// Reads a manifest and checks that the input paths it names exist.
    /// Relative paths resolve against the working directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(attn_steer::Error::from)?;
        let inputs = [
            &cfg.weights,
            &cfg.vocab,
            &cfg.prompts,
            &cfg.world,
            &cfg.records,
            &cfg.generations,
            &cfg.annotations,
            &cfg.synonyms,
            &cfg.judgments,
            &cfg.profile,
            &cfg.methods,
        ];
        for p in inputs.into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
        }
        Ok(cfg)
    }
}

/// Flag value, else config value.
pub fn pick<T: Clone>(flag: &Option<T>, cfg: &Option<T>) -> Option<T> {
    flag.clone().or_else(|| cfg.clone())
}

/// Parses `lo-hi`.
pub fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once('-').ok_or_else(|| format!("expected lo-hi, got '{s}'"))?;
    let lo = a.trim().parse().map_err(|_| format!("bad layer '{a}'"))?;
    let hi = b.trim().parse().map_err(|_| format!("bad layer '{b}'"))?;
    Ok((lo, hi))
}
