// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array2;
use rand::seq::{index, IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::engine::{LayerWeights, ModelSpec, ModelWeights};
use crate::error::{Error, Result};
use crate::metrics::{Annotations, AnnotatedImage, ObjectVocabulary};
use crate::rng;
use crate::sequence::{build_segmented_sequence, SegmentedSequence, TokenId, Vocabulary};

/// Attention score each head gives to a key, by the key's token type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyScores {
    /// `<sys>`.
    pub system: f64,
    /// The scene token carrying the co-occurrence prior.
    pub scene: f64,
    /// Image tokens.
    pub image: f64,
    /// Instruction words.
    pub instruction: f64,
    /// Generated words.
    pub text: f64,
}

impl Default for KeyScores {
    fn default() -> Self {
        KeyScores {
            system: 0.0,
            scene: 1.5,
            image: 1.0,
            instruction: 0.0,
            text: 1.0,
        }
    }
}

fn default_objects() -> Vec<String> {
    [
        "dog", "cat", "car", "tree", "chair", "table", "cup", "bird", "bench", "bike", "boat", "kite",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn default_instruction() -> Vec<String> {
    ["describe", "the", "image"].iter().map(|s| s.to_string()).collect()
}

fn default_opener() -> String {
    "showing".into()
}

macro_rules! default_fn {
    ($name:ident, $ty:ty, $v:expr) => {
        fn $name() -> $ty {
            $v
        }
    };
}

default_fn!(default_scenes, usize, 3);
default_fn!(default_typical, usize, 5);
default_fn!(default_images, usize, 60);
default_fn!(default_objects_per_image, usize, 3);
default_fn!(default_typical_present, usize, 2);
default_fn!(default_image_tokens, usize, 6);
default_fn!(default_strength, f64, 8.0);
default_fn!(default_inhibition, f64, 20.0);
default_fn!(default_stop_bias, f64, 0.6);
default_fn!(default_layers, usize, 4);
default_fn!(default_heads, usize, 4);
default_fn!(default_jitter, f64, 0.3);
default_fn!(default_world_max_tokens, usize, 12);

/// Recipe for a synthetic captioning world.
///
/// Each image shows a few objects and belongs to a scene. Attention to the
/// scene token pushes the scene's typical objects whether or not they are
/// present (`prior_strength`), attention to image tokens pushes the present
/// objects (`evidence_strength`), and attention to each generated object
/// word pushes that object down (`repeat_inhibition`). The end-of-caption
/// logit is the constant `stop_bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    /// Object words.
    #[serde(default = "default_objects")]
    pub objects: Vec<String>,
    /// Instruction words, which also serve as filler vocabulary.
    #[serde(default = "default_instruction")]
    pub instruction: Vec<String>,
    /// Word every caption starts with.
    #[serde(default = "default_opener")]
    pub opener: String,
    /// Number of scenes.
    #[serde(default = "default_scenes")]
    pub n_scenes: usize,
    /// Objects with a nonzero prior in each scene.
    #[serde(default = "default_typical")]
    pub typical_per_scene: usize,
    /// Evaluation images.
    #[serde(default = "default_images")]
    pub n_images: usize,
    /// Separate images used only for profiling.
    #[serde(default = "default_images")]
    pub n_profile_images: usize,
    /// Objects present in each image.
    #[serde(default = "default_objects_per_image")]
    pub objects_per_image: usize,
    /// How many of the present objects are typical for the scene.
    #[serde(default = "default_typical_present")]
    pub typical_present: usize,
    /// Image tokens per prompt; the ones not naming an object are background.
    #[serde(default = "default_image_tokens")]
    pub image_tokens: usize,
    /// `p`: weight of the scene prior.
    #[serde(default = "default_strength")]
    pub prior_strength: f64,
    /// `e`: weight of image evidence.
    #[serde(default = "default_strength")]
    pub evidence_strength: f64,
    /// `r`: weight of repeat inhibition.
    #[serde(default = "default_inhibition")]
    pub repeat_inhibition: f64,
    /// Constant end-of-caption logit.
    #[serde(default = "default_stop_bias")]
    pub stop_bias: f64,
    /// Layers.
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    /// Heads per layer.
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    /// Base key scores per token type.
    #[serde(default)]
    pub key_scores: KeyScores,
    /// Half-width of the uniform per-head perturbation of key scores.
    #[serde(default = "default_jitter")]
    pub head_jitter: f64,
    /// Decode cap stored in the model spec.
    #[serde(default = "default_world_max_tokens")]
    pub max_tokens: usize,
    /// Seed for every random choice.
    #[serde(default)]
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl WorldSpec {
    /// Reads a spec from JSON.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks ranges and counts.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.objects.len() < 2 {
            return bad("world needs at least two objects");
        }
        let strengths = [self.prior_strength, self.evidence_strength, self.repeat_inhibition];
        if strengths.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("prior, evidence and inhibition strengths must be finite and >= 0");
        }
        if self.instruction.is_empty() {
            return bad("instruction must have at least one word");
        }
        if self.n_scenes == 0 || self.n_layers == 0 || self.n_heads == 0 || self.max_tokens == 0 {
            return bad("scenes, layers, heads and max_tokens must be positive");
        }
        if self.typical_per_scene > self.objects.len() {
            return bad("typical_per_scene exceeds the object count");
        }
        if self.typical_present > self.objects_per_image.min(self.typical_per_scene) {
            return bad("typical_present exceeds objects_per_image or typical_per_scene");
        }
        if self.objects_per_image - self.typical_present > self.objects.len() - self.typical_per_scene {
            return bad("not enough atypical objects for objects_per_image");
        }
        if self.image_tokens < self.objects_per_image {
            return bad("image_tokens must cover objects_per_image");
        }
        if !self.head_jitter.is_finite() || self.head_jitter < 0.0 || !self.stop_bias.is_finite() {
            return bad("head_jitter and stop_bias must be finite, jitter >= 0");
        }
        Ok(())
    }
}

/// One image of a world: its ground truth and its prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldImage {
    /// Ground truth.
    pub image: AnnotatedImage,
    /// Scene index.
    pub scene: usize,
    /// `S + V + U` prompt.
    pub prompt: SegmentedSequence,
}

/// A synthesized world.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    /// The recipe.
    pub spec: WorldSpec,
    /// Model weights.
    pub weights: ModelWeights,
    /// Token strings.
    pub vocab: Vocabulary,
    /// Evaluation images.
    pub images: Vec<WorldImage>,
    /// Profiling images.
    pub profile_images: Vec<WorldImage>,
    /// Object word to token.
    pub object_tokens: BTreeMap<String, TokenId>,
    /// End-of-caption token.
    pub stop_token: TokenId,
    /// Prior weight of each object per scene.
    pub priors: Vec<Vec<f64>>,
}

impl World {
    /// The world's objects as a closed vocabulary.
    pub fn object_vocabulary(&self) -> ObjectVocabulary {
        ObjectVocabulary::new(self.spec.objects.iter().cloned(), &BTreeMap::new())
            .expect("object words are non-empty and distinct")
    }

    /// Ground truth of the evaluation images.
    pub fn annotations(&self) -> Annotations {
        to_annotations(&self.images)
    }

    /// Ground truth of the profiling images.
    pub fn profile_annotations(&self) -> Annotations {
        to_annotations(&self.profile_images)
    }

    /// Object named by `token`, if any.
    pub fn object_of(&self, token: TokenId) -> Option<&str> {
        let w = self.vocab.decode(token)?;
        self.object_tokens.contains_key(w).then_some(w)
    }
}

fn to_annotations(images: &[WorldImage]) -> Annotations {
    images
        .iter()
        .map(|i| (i.image.image_id.clone(), i.image.objects.clone()))
        .collect()
}

/// Token indices and residual-stream coordinates of a world.
struct Layout {
    n_obj: usize,
    n_scenes: usize,
    vocab_size: usize,
    // token ids
    sys: usize,
    eos: usize,
    opener: usize,
    instr0: usize,
    scene0: usize,
    img0: usize,
    img_bg: usize,
    word0: usize,
    // residual dims
    dim_const: usize,
    dim_type: usize,
    dim_img: usize,
    dim_word: usize,
    dim_scene: usize,
    dim_logit: usize,
    used: usize,
}

const TYPE_SYS: usize = 0;
const TYPE_SCENE: usize = 1;
const TYPE_IMG: usize = 2;
const TYPE_INSTR: usize = 3;
const TYPE_TEXT: usize = 4;

impl Layout {
    fn new(spec: &WorldSpec) -> Self {
        let n_obj = spec.objects.len();
        let n_instr = spec.instruction.len();
        let sys = 0;
        let eos = 1;
        let opener = 2;
        let instr0 = 3;
        let scene0 = instr0 + n_instr;
        let img0 = scene0 + spec.n_scenes;
        let img_bg = img0 + n_obj;
        let word0 = img_bg + 1;
        let vocab_size = word0 + n_obj;
        let dim_const = 0;
        let dim_type = 1;
        let dim_img = dim_type + 5;
        let dim_word = dim_img + n_obj;
        let dim_scene = dim_word + n_obj;
        let dim_logit = dim_scene + spec.n_scenes;
        let used = dim_logit + vocab_size;
        Layout {
            n_obj,
            n_scenes: spec.n_scenes,
            vocab_size,
            sys,
            eos,
            opener,
            instr0,
            scene0,
            img0,
            img_bg,
            word0,
            dim_const,
            dim_type,
            dim_img,
            dim_word,
            dim_scene,
            dim_logit,
            used,
        }
    }

    fn words(&self, spec: &WorldSpec) -> Vec<String> {
        let mut w = vec!["<sys>".to_string(), "<eos>".to_string(), spec.opener.clone()];
        w.extend(spec.instruction.iter().cloned());
        w.extend((0..self.n_scenes).map(|k| format!("<scene{k}>")));
        w.extend(spec.objects.iter().map(|o| format!("<img:{o}>")));
        w.push("<img:bg>".into());
        w.extend(spec.objects.iter().cloned());
        w
    }

    fn token_type(&self, t: usize) -> usize {
        if t == self.sys {
            TYPE_SYS
        } else if (self.scene0..self.img0).contains(&t) {
            TYPE_SCENE
        } else if (self.img0..=self.img_bg).contains(&t) {
            TYPE_IMG
        } else if (self.instr0..self.scene0).contains(&t) {
            TYPE_INSTR
        } else {
            TYPE_TEXT
        }
    }

    fn is_object_word(&self, t: usize) -> bool {
        (self.word0..self.word0 + self.n_obj).contains(&t)
    }
}

/// Logit offset that keeps non-object tokens out of captions.
const SUPPRESS: f64 = 30.0;

/// Builds weights, prompts and ground truth from a spec.
pub fn synthesize_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let lay = Layout::new(spec);
    let vocab = Vocabulary::new(lay.words(spec))?;
    let (n_obj, h_count, l_count) = (lay.n_obj, spec.n_heads, spec.n_layers);

    let mut scene_rng = rng::seeded(rng::derive_seed(spec.seed, 0));
    let priors: Vec<Vec<f64>> = (0..spec.n_scenes)
        .map(|_| {
            let mut p = vec![0.0; n_obj];
            for o in index::sample(&mut scene_rng, n_obj, spec.typical_per_scene) {
                p[o] = 0.5 + 0.5 * rng::uniform(&mut scene_rng);
            }
            p
        })
        .collect();

    let d_k = (lay.used.div_ceil(h_count)).max(n_obj + 1);
    let d_model = d_k * h_count;

    let prompt_len = 2 + spec.image_tokens + spec.instruction.len();
    let mspec = ModelSpec {
        n_layers: l_count,
        n_heads: h_count,
        d_model,
        d_k,
        vocab_size: lay.vocab_size,
        max_positions: prompt_len + spec.max_tokens + 1,
        max_tokens: spec.max_tokens,
    };

    let mut tok = Array2::<f64>::zeros((lay.vocab_size, d_model));
    for t in 0..lay.vocab_size {
        tok[[t, lay.dim_const]] = 1.0;
        tok[[t, lay.dim_type + lay.token_type(t)]] = 1.0;
        tok[[t, lay.dim_logit + lay.eos]] = spec.stop_bias;
        for u in 0..lay.vocab_size {
            if u != lay.eos && !lay.is_object_word(u) {
                tok[[t, lay.dim_logit + u]] = -SUPPRESS;
            }
        }
    }
    for i in 0..spec.instruction.len() {
        tok[[lay.instr0 + i, lay.dim_logit + lay.opener]] = SUPPRESS * 2.0;
    }
    for k in 0..lay.n_scenes {
        tok[[lay.scene0 + k, lay.dim_scene + k]] = 1.0;
    }
    for o in 0..n_obj {
        tok[[lay.img0 + o, lay.dim_img + o]] = 1.0;
        tok[[lay.word0 + o, lay.dim_word + o]] = 1.0;
    }
    let pos = Array2::<f64>::zeros((mspec.max_positions, d_model));

    let mut head_rng = rng::seeded(rng::derive_seed(spec.seed, 1));
    let ks = spec.key_scores;
    let base = [ks.system, ks.scene, ks.image, ks.instruction, ks.text];
    let out_scale = 1.0 / (h_count * l_count) as f64;
    let q_scale = (d_k as f64).sqrt();
    let mut layers = Vec::with_capacity(l_count);
    for _ in 0..l_count {
        let mut lw = LayerWeights::zeros(&mspec);
        for h in 0..h_count {
            let c0 = h * d_k;
            lw.w_q[[lay.dim_const, c0]] = q_scale;
            for (ty, b) in base.iter().enumerate() {
                let jitter = (rng::uniform(&mut head_rng) * 2.0 - 1.0) * spec.head_jitter;
                lw.w_k[[lay.dim_type + ty, c0]] = b + jitter;
            }
            for o in 0..n_obj {
                let c = c0 + 1 + o;
                for (k, prior) in priors.iter().enumerate() {
                    lw.w_v[[lay.dim_scene + k, c]] = spec.prior_strength * prior[o];
                }
                lw.w_v[[lay.dim_img + o, c]] = spec.evidence_strength;
                lw.w_v[[lay.dim_word + o, c]] = -spec.repeat_inhibition;
                lw.w_o[[c, lay.dim_logit + lay.word0 + o]] = out_scale;
            }
        }
        layers.push(lw);
    }

    let mut un = Array2::<f64>::zeros((d_model, lay.vocab_size));
    for t in 0..lay.vocab_size {
        un[[lay.dim_logit + t, t]] = 1.0;
    }
    let weights = ModelWeights::from_parts(mspec, tok, pos, layers, un)?;

    let make_images = |stream: u64, count: usize, prefix: &str| -> Result<Vec<WorldImage>> {
        let mut r = rng::seeded(rng::derive_seed(spec.seed, stream));
        (0..count)
            .map(|i| {
                let scene = (rng::uniform(&mut r) * lay.n_scenes as f64) as usize % lay.n_scenes;
                let typical: Vec<usize> = (0..n_obj).filter(|&o| priors[scene][o] > 0.0).collect();
                let atypical: Vec<usize> = (0..n_obj).filter(|&o| priors[scene][o] == 0.0).collect();
                let mut present: Vec<usize> = typical
                    .choose_multiple(&mut r, spec.typical_present)
                    .copied()
                    .collect();
                present.extend(
                    atypical
                        .choose_multiple(&mut r, spec.objects_per_image - spec.typical_present)
                        .copied(),
                );
                let mut img: Vec<TokenId> = present.iter().map(|&o| TokenId((lay.img0 + o) as u32)).collect();
                img.resize(spec.image_tokens, TokenId(lay.img_bg as u32));
                img.shuffle(&mut r);
                let system = [TokenId(lay.sys as u32), TokenId((lay.scene0 + scene) as u32)];
                let instr: Vec<TokenId> = (0..spec.instruction.len())
                    .map(|j| TokenId((lay.instr0 + j) as u32))
                    .collect();
                let prompt = build_segmented_sequence(&system, &img, &instr)?;
                let objects: BTreeSet<String> = present.iter().map(|&o| spec.objects[o].clone()).collect();
                Ok(WorldImage {
                    image: AnnotatedImage {
                        image_id: format!("{prefix}{i:04}"),
                        objects,
                    },
                    scene,
                    prompt,
                })
            })
            .collect()
    };
    let images = make_images(2, spec.n_images, "img")?;
    let profile_images = make_images(3, spec.n_profile_images, "prof")?;

    let object_tokens = spec
        .objects
        .iter()
        .enumerate()
        .map(|(o, w)| (w.clone(), TokenId((lay.word0 + o) as u32)))
        .collect();

    Ok(World {
        spec: spec.clone(),
        weights,
        vocab,
        images,
        profile_images,
        object_tokens,
        stop_token: TokenId(lay.eos as u32),
        priors,
    })
}
