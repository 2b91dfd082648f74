use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Sentence block + speech block + head on the speech cls.
    Speech,
    /// Sentence block + head on the sentence cls; speeches scored by vote ratio.
    Segment,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Speech => "speech",
            Variant::Segment => "segment",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "speech" => Ok(Variant::Speech),
            "segment" => Ok(Variant::Segment),
            other => Err(Error::InvalidArgument(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub sentence_layers: usize,
    pub speech_layers: usize,
    pub frame_width: usize,
    pub n_mels: usize,
    pub target_frames: usize,
    pub max_sentences: usize,
    pub dropout: f64,
    pub freeze_prefix_layers: usize,
    pub seed: u64,
    pub init_std: f64,
    /// Inputs are mapped through `(x - input_mean) / input_std` before the
    /// patch projection.
    pub input_mean: f64,
    pub input_std: f64,
    /// Value substituted for frames beyond `valid_frames`, so padding contents
    /// never reach the model.
    pub pad_value: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            sentence_layers: 4,
            speech_layers: 2,
            frame_width: 2,
            n_mels: 128,
            target_frames: 256,
            max_sentences: 12,
            dropout: 0.1,
            freeze_prefix_layers: 0,
            seed: 0,
            init_std: 0.02,
            input_mean: 0.0,
            input_std: 1.0,
            pad_value: (1e-10f64).ln(),
        }
    }
}

impl ModelConfig {
    pub fn paper_scale() -> Self {
        ModelConfig {
            d_model: 768,
            n_heads: 12,
            sentence_layers: 12,
            speech_layers: 6,
            target_frames: 1024,
            max_sentences: 42,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.frame_width == 0 || self.target_frames == 0 || self.target_frames % self.frame_width != 0 {
            return bad("frame_width must divide target_frames");
        }
        if self.n_mels == 0 || self.max_sentences == 0 {
            return bad("n_mels and max_sentences must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.freeze_prefix_layers > self.sentence_layers {
            return bad("freeze_prefix_layers exceeds sentence_layers");
        }
        if !(self.init_std > 0.0 && self.input_std > 0.0) || !self.input_mean.is_finite() || !self.pad_value.is_finite() {
            return bad("init_std and input_std must be positive, constants finite");
        }
        Ok(())
    }

    /// Frame tokens per sentence (excluding cls).
    pub fn frame_tokens(&self) -> usize {
        self.target_frames / self.frame_width
    }

    pub fn patch_dim(&self) -> usize {
        self.n_mels * self.frame_width
    }
}

/// Parameter slots of one transformer layer: `(weight, bias)` or `(gamma, beta)`.
#[derive(Debug, Clone)]
pub struct LayerSlots {
    pub ln1: (usize, usize),
    pub qkv: (usize, usize),
    pub proj: (usize, usize),
    pub ln2: (usize, usize),
    pub fc1: (usize, usize),
    pub fc2: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct EncoderSlots {
    pub layers: Vec<LayerSlots>,
    pub norm: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct SpeechSlots {
    pub cls: usize,
    pub pos: usize,
    pub encoder: EncoderSlots,
}

/// Index map from named parameters to positions in a flat tensor list.
#[derive(Debug, Clone)]
pub struct Layout {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub patch: (usize, usize),
    pub sentence_cls: usize,
    pub sentence_pos: usize,
    pub sentence: EncoderSlots,
    pub speech: Option<SpeechSlots>,
    pub head: (usize, usize),
}

/// How each tensor is initialised.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.inits.push(init);
        self.names.len() - 1
    }

    fn pair(&mut self, prefix: &str, a: (&str, &[usize], Init), b: (&str, &[usize], Init)) -> (usize, usize) {
        let i = self.add(format!("{prefix}.{}", a.0), a.1, a.2);
        let j = self.add(format!("{prefix}.{}", b.0), b.1, b.2);
        (i, j)
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) -> (usize, usize) {
        self.pair(prefix, ("weight", &[din, dout], Init::Normal), ("bias", &[dout], Init::Zeros))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> (usize, usize) {
        self.pair(prefix, ("gamma", &[d], Init::Ones), ("beta", &[d], Init::Zeros))
    }

    fn encoder(&mut self, prefix: &str, d: usize, n_layers: usize) -> EncoderSlots {
        let layers = (0..n_layers)
            .map(|l| {
                let p = format!("{prefix}.layers.{l}");
                LayerSlots {
                    ln1: self.norm(&format!("{p}.ln1"), d),
                    qkv: self.linear(&format!("{p}.attn.qkv"), d, 3 * d),
                    proj: self.linear(&format!("{p}.attn.proj"), d, d),
                    ln2: self.norm(&format!("{p}.ln2"), d),
                    fc1: self.linear(&format!("{p}.mlp.fc1"), d, 4 * d),
                    fc2: self.linear(&format!("{p}.mlp.fc2"), 4 * d, d),
                }
            })
            .collect();
        EncoderSlots {
            layers,
            norm: self.norm(&format!("{prefix}.norm"), d),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig, variant: Variant) -> Self {
        Self::build(cfg, variant).0
    }

    fn build(cfg: &ModelConfig, variant: Variant) -> (Self, Vec<Init>) {
        let d = cfg.d_model;
        let mut b = Builder {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
        };
        let patch = b.linear("sentence.patch", cfg.patch_dim(), d);
        let sentence_cls = b.add("sentence.cls".into(), &[d], Init::Normal);
        let sentence_pos = b.add("sentence.pos".into(), &[1 + cfg.frame_tokens(), d], Init::Normal);
        let sentence = b.encoder("sentence", d, cfg.sentence_layers);
        let speech = (variant == Variant::Speech).then(|| SpeechSlots {
            cls: b.add("speech.cls".into(), &[d], Init::Normal),
            pos: b.add("speech.pos".into(), &[cfg.max_sentences, d], Init::Normal),
            encoder: b.encoder("speech", d, cfg.speech_layers),
        });
        let head = b.linear("head", d, 2);
        (
            Layout {
                names: b.names,
                shapes: b.shapes,
                patch,
                sentence_cls,
                sentence_pos,
                sentence,
                speech,
                head,
            },
            b.inits,
        )
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn zeros<T: Real>(&self) -> Vec<Tensor<T>> {
        self.shapes.iter().map(|s| Tensor::zeros(s)).collect()
    }

    /// Slots belonging to the first `k` sentence-encoder layers.
    pub fn frozen_slots(&self, k: usize) -> Vec<usize> {
        self.sentence
            .layers
            .iter()
            .take(k)
            .flat_map(|s| [s.ln1, s.qkv, s.proj, s.ln2, s.fc1, s.fc2])
            .flat_map(|(a, b)| [a, b])
            .collect()
    }
}

/// Scaled-normal initialisation; biases and LayerNorm shifts start at zero,
/// LayerNorm gains at one.
pub fn init_params<T: Real>(cfg: &ModelConfig, variant: Variant) -> (Layout, Vec<Tensor<T>>) {
    let (layout, inits) = Layout::build(cfg, variant);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.init_std).expect("positive std");
    let params = layout
        .shapes
        .iter()
        .zip(&inits)
        .map(|(shape, init)| match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::filled(shape, T::one()),
            Init::Normal => {
                let mut t = Tensor::zeros(shape);
                t.data.iter_mut().for_each(|v| *v = T::of(normal.sample(&mut rng)));
                t
            }
        })
        .collect();
    (layout, params)
}
