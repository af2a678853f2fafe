// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use attn_steer::engine::{load_weights, save_weights};
use attn_steer::harness::{
    build_profile_for_world, comparison_csv, run_comparison, sweep, sweep_csv, synthesize_world,
    ComparisonOptions, Method, SweepSpec, World, WorldSpec,
};
use attn_steer::metrics::{
    attach_judgments, evaluate, load_annotations, load_captions, load_judgments, report_csv,
    CaptionRecord, MentionCounting, ObjectVocabulary,
};
use attn_steer::profiler::{
    export_heatmap, load_labeled_records, load_profile, load_profile_for, profile_from_records,
    ratio_matrix, save_profile,
};
use attn_steer::sequence::Segment;
use attn_steer::{
    build_segmented_sequence, decode, rng, AttentionProfile, DecodeConfig, InterventionConfig, Mode,
    ModelWeights, SegmentedSequence, ThresholdSpec, Vocabulary,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{pick, RunConfig};
use crate::{
    Cli, CliError, Command, CompareArgs, DecodeArgs, EvaluateArgs, GenerateArgs, HeatmapArgs,
    InterventionArgs, ProfileArgs, SweepArgs, SynthArgs,
};

type Res<T> = Result<T, CliError>;

pub fn run(cli: Cli) -> Res<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(j) = cli.jobs.or(cfg.jobs) {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let ctx = Ctx {
        seed: cli.seed.or(cfg.seed),
        cfg,
    };
    match cli.command {
        Command::Profile(a) => ctx.profile(a),
        Command::Generate(a) => ctx.generate(a),
        Command::Evaluate(a) => ctx.evaluate(a),
        Command::Sweep(a) => ctx.sweep(a),
        Command::ExportHeatmap(a) => ctx.export_heatmap(a),
        Command::Compare(a) => ctx.compare(a),
        Command::SynthWorld(a) => ctx.synth_world(a),
    }
}

struct Ctx {
    cfg: RunConfig,
    seed: Option<u64>,
}

fn require(v: Option<PathBuf>, flag: &str) -> Res<PathBuf> {
    v.ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Res<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn pretty<T: Serialize>(v: &T) -> Res<String> {
    Ok(serde_json::to_string_pretty(v).map_err(attn_steer::Error::from)? + "\n")
}

fn load_world(path: &Path) -> Res<World> {
    Ok(synthesize_world(&WorldSpec::load(path)?)?)
}

/// One prompt as words per segment.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PromptLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_id: Option<String>,
    #[serde(default)]
    system: Vec<String>,
    #[serde(default)]
    image: Vec<String>,
    #[serde(default)]
    instruction: Vec<String>,
}

impl PromptLine {
    fn from_sequence(id: &str, seq: &SegmentedSequence, vocab: &Vocabulary) -> Self {
        let spans = seq.spans();
        let words = |s: Segment| -> Vec<String> {
            seq.tokens()[spans.get(s).range()]
                .iter()
                .map(|t| vocab.decode(*t).unwrap_or_default().to_string())
                .collect()
        };
        PromptLine {
            image_id: Some(id.to_string()),
            system: words(Segment::System),
            image: words(Segment::Image),
            instruction: words(Segment::Instruction),
        }
    }
}

fn load_prompts(path: &Path, vocab: &Vocabulary) -> Res<Vec<(Option<String>, SegmentedSequence)>> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PromptLine = serde_json::from_str(&line).map_err(attn_steer::Error::from)?;
        let seq = build_segmented_sequence(
            &vocab.encode_all(&p.system)?,
            &vocab.encode_all(&p.image)?,
            &vocab.encode_all(&p.instruction)?,
        )?;
        out.push((p.image_id, seq));
    }
    Ok(out)
}

impl Ctx {
    fn decode_config(&self, base: DecodeConfig, args: &DecodeArgs) -> Res<DecodeConfig> {
        let mut d = match &self.cfg.decode {
            Some(c) => DecodeConfig {
                stop_token: c.stop_token.or(base.stop_token),
                ..c.clone()
            },
            None => base,
        };
        if let Some(m) = args.max_tokens {
            d.max_tokens = m;
        }
        if let Some(s) = args.strategy {
            d.strategy = s;
        }
        if let Some(t) = args.temperature {
            d.temperature = t;
        }
        if let Some(s) = self.seed {
            d.seed = s;
        }
        d.validate()?;
        Ok(d)
    }

    fn threshold(&self, beta: Option<f64>) -> Res<ThresholdSpec> {
        let spec = match beta {
            Some(beta) => ThresholdSpec { beta },
            None => self.cfg.threshold.unwrap_or_default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    fn intervention(&self, a: &InterventionArgs) -> InterventionConfig {
        let mut c = self.cfg.intervention.clone().unwrap_or_else(InterventionConfig::none);
        if let Some(m) = a.mode {
            if m != c.mode {
                c.mode = m;
                c.alpha = m.default_alpha();
            }
        }
        if let Some(alpha) = a.alpha {
            c.alpha = alpha;
        }
        if let Some(b) = a.beta {
            c.beta = Some(b);
        }
        if let Some((lo, hi)) = a.layers {
            c = c.layers(lo, hi);
        }
        c
    }

    /// Loads `--profile`, or profiles the world when none is given.
    fn world_profile(&self, flag: &Option<PathBuf>, world: &World, dcfg: &DecodeConfig) -> Res<AttentionProfile> {
        match pick(flag, &self.cfg.profile) {
            Some(p) => Ok(load_profile_for(p, world.weights.spec())?),
            None => Ok(build_profile_for_world(world, dcfg, self.threshold(None)?)?),
        }
    }

    fn profile(&self, a: ProfileArgs) -> Res<()> {
        let spec = self.threshold(a.beta)?;
        let out = require(pick(&a.out, &self.cfg.out), "out")?;
        let profile = if let Some(rec) = pick(&a.records, &self.cfg.records) {
            profile_from_records(&load_labeled_records(rec)?, spec)?
        } else if let Some(w) = pick(&a.world, &self.cfg.world) {
            let world = load_world(&w)?;
            let dcfg = self.decode_config(world.greedy_config(), &a.decode)?;
            build_profile_for_world(&world, &dcfg, spec)?
        } else {
            return Err(CliError::Usage("--records or --world is required".into()));
        };
        save_profile(&profile, &out)?;
        let m = ratio_matrix(&profile);
        let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        println!("n_r {}", profile.n_r);
        println!("n_h {}", profile.n_h);
        println!("m_min {lo}");
        println!("m_max {hi}");
        println!("t {:?}", profile.t);
        Ok(())
    }

    fn generate(&self, a: GenerateArgs) -> Res<()> {
        let out = require(pick(&a.out, &self.cfg.out), "out")?;
        let (weights, vocab, prompts, base): (ModelWeights, Vocabulary, _, _) =
            if let Some(w) = pick(&a.world, &self.cfg.world) {
                let world = load_world(&w)?;
                let prompts: Vec<_> = world
                    .images
                    .iter()
                    .map(|i| (Some(i.image.image_id.clone()), i.prompt.clone()))
                    .collect();
                let base = world.greedy_config();
                (world.weights, world.vocab, prompts, base)
            } else {
                let weights = load_weights(require(pick(&a.weights, &self.cfg.weights), "weights")?)?;
                let vocab = Vocabulary::load(require(pick(&a.vocab, &self.cfg.vocab), "vocab")?)?;
                let prompts = load_prompts(&require(pick(&a.prompts, &self.cfg.prompts), "prompts")?, &vocab)?;
                (weights, vocab, prompts, DecodeConfig::default())
            };
        let mut dcfg = self.decode_config(base, &a.decode)?;
        if let Some(w) = &a.stop_token {
            dcfg.stop_token = Some(
                vocab
                    .encode(w)
                    .ok_or_else(|| CliError::Usage(format!("stop token '{w}' is not in the vocabulary")))?,
            );
        }
        dcfg.capture_attention |= a.capture;
        let icfg = self.intervention(&a.intervention);
        icfg.validate(weights.spec().n_layers)?;
        let profile = match (icfg.mode, pick(&a.intervention.profile, &self.cfg.profile)) {
            (Mode::AdaIat, Some(p)) => Some(load_profile_for(p, weights.spec())?),
            (Mode::AdaIat, None) => return Err(attn_steer::Error::ProfileRequired.into()),
            _ => None,
        };
        let records = prompts
            .par_iter()
            .enumerate()
            .map(|(i, (id, prompt))| {
                let cfg = DecodeConfig {
                    seed: rng::derive_seed(dcfg.seed, i as u64),
                    ..dcfg.clone()
                };
                let mut rec = decode(&weights, prompt, &cfg, &icfg, profile.as_ref())?;
                rec.image_id = id.clone();
                rec.text = Some(vocab.detokenize(&rec.tokens));
                Ok(rec)
            })
            .collect::<attn_steer::Result<Vec<_>>>()?;
        let mut text = String::new();
        for r in &records {
            text.push_str(&serde_json::to_string(r).map_err(attn_steer::Error::from)?);
            text.push('\n');
        }
        write_file(&out, text)
    }

    fn evaluate(&self, a: EvaluateArgs) -> Res<()> {
        let world = pick(&a.world, &self.cfg.world).map(|w| load_world(&w)).transpose()?;
        let vocab = match (pick(&a.synonyms, &self.cfg.synonyms), &world) {
            (Some(p), _) => ObjectVocabulary::load(p)?,
            (None, Some(w)) => w.object_vocabulary(),
            (None, None) => return Err(CliError::Usage("--synonyms or --world is required".into())),
        };
        let ann = match (pick(&a.annotations, &self.cfg.annotations), &world) {
            (Some(p), _) => load_annotations(p, &vocab)?,
            (None, Some(w)) => w.annotations(),
            (None, None) => return Err(CliError::Usage("--annotations or --world is required".into())),
        };
        let gens = require(pick(&a.generations, &self.cfg.generations), "generations")?;
        let mut records: Vec<CaptionRecord> = load_captions(gens)?
            .into_iter()
            .map(|c| CaptionRecord::new(c.image_id, c.text, &vocab))
            .collect();
        if a.open_chair {
            let j = require(pick(&a.judgments, &self.cfg.judgments), "judgments")?;
            attach_judgments(&mut records, &load_judgments(j)?);
        }
        let mut opts = self.cfg.eval.clone().unwrap_or_default();
        opts.macro_f1 |= a.macro_f1;
        if a.every_mention {
            opts.mention_counting = MentionCounting::Every;
        }
        opts.distinct_orders.extend(a.distinct.iter().copied());
        if a.no_self_bleu {
            opts.self_bleu = false;
        }
        let report = evaluate(&records, &ann, &opts)?;
        let csv = report_csv(&[(a.method.clone(), report.clone())])?;
        if let Some(out) = pick(&a.out, &self.cfg.out) {
            write_file(&out, pretty(&report)?)?;
        }
        if let Some(path) = &a.csv {
            write_file(path, &csv)?;
        }
        print!("{csv}");
        Ok(())
    }

    fn sweep(&self, a: SweepArgs) -> Res<()> {
        let world = load_world(&require(pick(&a.world, &self.cfg.world), "world")?)?;
        let out = require(pick(&a.out, &self.cfg.out), "out")?;
        let dcfg = self.decode_config(world.greedy_config(), &a.decode)?;
        let profile = match a.mode {
            Mode::AdaIat => Some(self.world_profile(&a.profile, &world, &dcfg)?),
            _ => None,
        };
        let spec = SweepSpec {
            mode: a.mode,
            alphas: a.alphas,
            betas: a.betas,
            layers: a.layers,
        };
        let rows = sweep(&world, profile.as_ref(), &dcfg, &spec)?;
        write_file(&out, sweep_csv(&rows)?)
    }

    fn export_heatmap(&self, a: HeatmapArgs) -> Res<()> {
        let profile = load_profile(require(pick(&a.profile, &self.cfg.profile), "profile")?)?;
        let out = require(pick(&a.out, &self.cfg.out), "out")?;
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        Ok(export_heatmap(&profile, a.matrix, &out)?)
    }

    fn compare(&self, a: CompareArgs) -> Res<()> {
        let world = load_world(&require(pick(&a.world, &self.cfg.world), "world")?)?;
        let out = require(pick(&a.out, &self.cfg.out), "out")?;
        let methods: Vec<Method> = match pick(&a.methods, &self.cfg.methods) {
            Some(p) => {
                let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
                serde_json::from_str(&text).map_err(attn_steer::Error::from)?
            }
            None => [Mode::None, Mode::Iat, Mode::Pai, Mode::AdaIat]
                .into_iter()
                .map(|m| {
                    Method::new(
                        m.to_string(),
                        InterventionConfig {
                            mode: m,
                            alpha: m.default_alpha(),
                            ..InterventionConfig::none()
                        },
                    )
                })
                .collect(),
        };
        let dcfg = self.decode_config(world.greedy_config(), &a.decode)?;
        let profile = if methods.iter().any(|m| m.config.mode == Mode::AdaIat) {
            Some(self.world_profile(&a.profile, &world, &dcfg)?)
        } else {
            None
        };
        let opts = ComparisonOptions {
            timing: a.timing,
            eval: self.cfg.eval.clone().unwrap_or_default(),
        };
        let report = run_comparison(&world, profile.as_ref(), &methods, &dcfg, &opts)?;
        write_file(&out.join("comparison.json"), pretty(&report)?)?;
        let csv = comparison_csv(&report)?;
        write_file(&out.join("comparison.csv"), &csv)?;
        print!("{csv}");
        Ok(())
    }

    fn synth_world(&self, a: SynthArgs) -> Res<()> {
        let spec = match pick(&a.world, &self.cfg.world) {
            Some(p) => WorldSpec::load(p)?,
            None => WorldSpec::default(),
        };
        let out = require(pick(&a.out, &self.cfg.out), "out")?;
        let world = synthesize_world(&spec)?;
        std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        write_file(&out.join("world.json"), pretty(&spec)?)?;
        save_weights(&world.weights, out.join("weights.bin"))?;
        world.vocab.save(out.join("vocab.json"))?;
        let prompts = |imgs: &[attn_steer::harness::WorldImage]| -> Res<String> {
            let mut s = String::new();
            for i in imgs {
                let line = PromptLine::from_sequence(&i.image.image_id, &i.prompt, &world.vocab);
                s.push_str(&serde_json::to_string(&line).map_err(attn_steer::Error::from)?);
                s.push('\n');
            }
            Ok(s)
        };
        write_file(&out.join("prompts.jsonl"), prompts(&world.images)?)?;
        write_file(&out.join("profile_prompts.jsonl"), prompts(&world.profile_images)?)?;
        write_file(&out.join("annotations.json"), pretty(&world.annotations())?)?;
        write_file(&out.join("profile_annotations.json"), pretty(&world.profile_annotations())?)?;
        let synonyms: BTreeMap<&str, &str> = spec.objects.iter().map(|o| (o.as_str(), o.as_str())).collect();
        write_file(&out.join("synonyms.json"), pretty(&synonyms)?)?;
        let stop = world.vocab.decode(world.stop_token).unwrap_or_default();
        println!("stop_token {stop}");
        Ok(())
    }
}
