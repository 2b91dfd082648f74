//! Hierarchical frame-based spectrogram transformer.
//!
//! A sentence block encodes each log-Mel spectrogram as a sequence of
//! `n_mels x frame_width` slices behind a learned cls token; a speech block
//! encodes the sequence of sentence cls outputs behind its own cls token, and
//! a linear head maps the speech cls output to two logits (normal, depressed).
//! The segment variant drops the speech block and classifies each sentence.
//!
//! Forward passes run inside a [`Pass`], which keeps the activations needed
//! for [`Pass::backward`] and exposes attention probabilities and their
//! gradients as an [`AttentionTrace`].

mod checkpoint;
mod engine;
mod params;
mod tensor;
mod train;

#[cfg(test)]
mod tests;

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, TrainMeta};
pub use engine::AttnNudge;
pub use params::{init_params, EncoderSlots, LayerSlots, Layout, ModelConfig, SpeechSlots, Variant};
pub use tensor::{matmul, Real, Tensor};
pub use train::{evaluate_loss, train, LabeledSpeech, TrainConfig, TrainReport};

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use engine::{encoder_backward, encoder_forward, Ctx, Dims, EncoderCache};

/// One sentence as the model sees it: a padded spectrogram plus an optional
/// set of frame tokens removed by ablation. Spectrogram data is shared, never
/// copied or modified by ablation.
#[derive(Debug, Clone)]
pub struct SentenceInput {
    pub spec: Arc<MelSpectrogram>,
    /// Per frame token (excluding cls); `true` masks the token.
    pub removed: Option<Arc<Vec<bool>>>,
}

impl SentenceInput {
    pub fn new(spec: Arc<MelSpectrogram>) -> Self {
        SentenceInput { spec, removed: None }
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let s = &self.spec;
        if s.n_mels != cfg.n_mels || s.n_frames != cfg.target_frames {
            return Err(Error::InvalidArgument(format!(
                "spectrogram is {}x{}, model expects {}x{}",
                s.n_mels, s.n_frames, cfg.n_mels, cfg.target_frames
            )));
        }
        if s.valid_frames > s.n_frames {
            return Err(Error::Shape("valid_frames exceeds n_frames".into()));
        }
        if let Some(r) = &self.removed {
            if r.len() != cfg.frame_tokens() {
                return Err(Error::Shape(format!(
                    "removal mask has {} entries, expected {}",
                    r.len(),
                    cfg.frame_tokens()
                )));
            }
        }
        Ok(())
    }

    /// Activity of every token (cls first). A frame token is active when at
    /// least one of its frames is valid and it has not been removed.
    pub fn token_mask(&self, cfg: &ModelConfig) -> Result<Vec<bool>> {
        self.check(cfg)?;
        let fw = cfg.frame_width;
        let valid = self.spec.valid_frames;
        let mut m = Vec::with_capacity(1 + cfg.frame_tokens());
        m.push(true);
        for t in 0..cfg.frame_tokens() {
            let removed = self.removed.as_ref().is_some_and(|r| r[t]);
            m.push(t * fw < valid && !removed);
        }
        Ok(m)
    }

    /// Copy with additional frame tokens masked.
    pub fn with_removed_tokens(&self, tokens: &[usize], cfg: &ModelConfig) -> Result<Self> {
        let n = cfg.frame_tokens();
        let mut r = match &self.removed {
            Some(r) => r.as_ref().clone(),
            None => vec![false; n],
        };
        for &t in tokens {
            if t >= n {
                return Err(Error::InvalidArgument(format!("token {t} out of range {n}")));
            }
            r[t] = true;
        }
        Ok(SentenceInput {
            spec: Arc::clone(&self.spec),
            removed: Some(Arc::new(r)),
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct SpeechInput {
    pub sentences: Vec<SentenceInput>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassLogits {
    /// Index 0 normal, index 1 depressed.
    pub logits: [f64; 2],
}

impl ClassLogits {
    pub fn normal(&self) -> f64 {
        self.logits[0]
    }

    pub fn depressed(&self) -> f64 {
        self.logits[1]
    }

    pub fn probability_depressed(&self) -> f64 {
        1.0 / (1.0 + (self.logits[0] - self.logits[1]).exp())
    }

    /// Depressed (1) only when its logit is strictly larger.
    pub fn predicted_class(&self) -> usize {
        usize::from(self.logits[1] > self.logits[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockId {
    Sentence(usize),
    Speech,
}

/// Attention probabilities (and, after a backward pass, their gradients) for
/// one block. Matrices are stored over active tokens only; the `full_*`
/// accessors expand them to all token positions with zeros at masked ones.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrace {
    pub n_tokens: usize,
    pub active: Vec<usize>,
    pub n_heads: usize,
    /// Per layer, `[head][query][key]` over active tokens.
    pub attn: Vec<Vec<f64>>,
    pub grad: Option<Vec<Vec<f64>>>,
}

impl BlockTrace {
    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    pub fn n_layers(&self) -> usize {
        self.attn.len()
    }

    pub fn token_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.n_tokens];
        self.active.iter().for_each(|&i| m[i] = true);
        m
    }

    fn expand(&self, compact: &[f64], head: usize) -> Vec<f64> {
        let na = self.n_active();
        let n = self.n_tokens;
        let mut full = vec![0.0; n * n];
        let h = &compact[head * na * na..(head + 1) * na * na];
        for (r, &i) in self.active.iter().enumerate() {
            for (c, &j) in self.active.iter().enumerate() {
                full[i * n + j] = h[r * na + c];
            }
        }
        full
    }

    pub fn full_attention(&self, layer: usize, head: usize) -> Vec<f64> {
        self.expand(&self.attn[layer], head)
    }

    pub fn full_grad(&self, layer: usize, head: usize) -> Option<Vec<f64>> {
        self.grad.as_ref().map(|g| self.expand(&g[layer], head))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub sentences: Vec<BlockTrace>,
    pub speech: Option<BlockTrace>,
}

/// Token sequence produced by [`Model::embed_sentence`].
#[derive(Debug, Clone)]
pub struct EmbeddedSentence<T> {
    /// `n_tokens x d_model`, cls at row 0.
    pub tokens: Vec<T>,
    pub mask: Vec<bool>,
}

/// Scalar differentiated by [`Pass::backward`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Raw logit of the given class.
    Logit(usize),
    /// Cross-entropy against the given label.
    CrossEntropy(usize),
}

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub variant: Variant,
    pub layout: Layout,
    pub params: Vec<Tensor<T>>,
}

struct SentenceState<T> {
    n_full: usize,
    active: Vec<usize>,
    patches: Vec<T>,
    enc: EncoderCache<T>,
    grad_attn: Option<Vec<Vec<T>>>,
}

struct SpeechState<T> {
    sentences: Vec<SentenceState<T>>,
    enc: EncoderCache<T>,
    grad_attn: Option<Vec<Vec<T>>>,
}

enum Body<T> {
    Speech(SpeechState<T>),
    Segment(SentenceState<T>),
}

struct State<T> {
    body: Body<T>,
    rep: Vec<T>,
    logits: [T; 2],
}

/// Options for one forward pass.
#[derive(Default)]
pub struct PassOptions<'a> {
    /// Enables dropout (training) when present.
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub nudge: Option<(BlockId, AttnNudge)>,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig, variant: Variant) -> Result<Self> {
        cfg.validate()?;
        let (layout, params) = init_params::<T>(&cfg, variant);
        Ok(Model {
            config: cfg,
            variant,
            layout,
            params,
        })
    }

    /// Same weights in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            variant: self.variant,
            layout: self.layout.clone(),
            params: self.params.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|t| t.numel()).sum()
    }

    pub fn pass(&self) -> Pass<'_, T> {
        Pass {
            model: self,
            state: None,
        }
    }

    fn dims(&self) -> Dims {
        Dims {
            d: self.config.d_model,
            heads: self.config.n_heads,
        }
    }

    fn patch_values(&self, s: &SentenceInput, token: usize, out: &mut [T]) {
        let cfg = &self.config;
        let fw = cfg.frame_width;
        let spec = &s.spec;
        let mean = cfg.input_mean;
        let inv = 1.0 / cfg.input_std;
        for mel in 0..cfg.n_mels {
            for w in 0..fw {
                let f = token * fw + w;
                let x = if f < spec.valid_frames {
                    spec.values[mel * spec.n_frames + f] as f64
                } else {
                    cfg.pad_value
                };
                out[mel * fw + w] = T::of((x - mean) * inv);
            }
        }
    }

    /// Full token sequence (masked rows included) and activity mask.
    pub fn embed_sentence(&self, s: &SentenceInput) -> Result<EmbeddedSentence<T>> {
        let mask = s.token_mask(&self.config)?;
        let all: Vec<usize> = (0..mask.len()).collect();
        let (tokens, _) = self.embed_rows(s, &all);
        Ok(EmbeddedSentence { tokens, mask })
    }

    /// Embeds the given token positions (0 = cls). Returns embeddings and the
    /// raw patch rows for non-cls positions.
    fn embed_rows(&self, s: &SentenceInput, rows: &[usize]) -> (Vec<T>, Vec<T>) {
        let d = self.config.d_model;
        let pd = self.config.patch_dim();
        let p = &self.params;
        let l = &self.layout;
        let n_patch = rows.iter().filter(|&&r| r > 0).count();
        let mut patches = vec![T::zero(); n_patch * pd];
        let mut k = 0;
        for &r in rows.iter().filter(|&&r| r > 0) {
            self.patch_values(s, r - 1, &mut patches[k * pd..(k + 1) * pd]);
            k += 1;
        }
        let mut proj = vec![T::zero(); n_patch * d];
        matmul(n_patch, pd, d, &patches, false, &p[l.patch.0].data, false, T::zero(), &mut proj);
        let pos = &p[l.sentence_pos].data;
        let mut x = vec![T::zero(); rows.len() * d];
        let mut k = 0;
        for (i, &r) in rows.iter().enumerate() {
            let row = &mut x[i * d..(i + 1) * d];
            if r == 0 {
                row.copy_from_slice(&p[l.sentence_cls].data);
            } else {
                for c in 0..d {
                    row[c] = proj[k * d + c] + p[l.patch.1].data[c];
                }
                k += 1;
            }
            for c in 0..d {
                row[c] += pos[r * d + c];
            }
        }
        (x, patches)
    }

    /// Runs either encoder over a full token sequence with a key mask.
    /// Output rows of masked tokens are zero.
    pub fn encoder_forward(&self, block: BlockId, tokens: &[T], mask: &[bool]) -> Result<(Vec<T>, BlockTrace)> {
        let d = self.config.d_model;
        let n = mask.len();
        if tokens.len() != n * d {
            return Err(Error::Shape(format!("tokens hold {} values, expected {}", tokens.len(), n * d)));
        }
        let slots = self.encoder_slots(block)?;
        let active: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        if active.is_empty() {
            return Err(Error::InvalidArgument("all tokens masked".into()));
        }
        let mut x = Vec::with_capacity(active.len() * d);
        active.iter().for_each(|&i| x.extend_from_slice(&tokens[i * d..(i + 1) * d]));
        let enc = encoder_forward(&self.params, slots, self.dims(), x, active.len(), &mut Ctx::inference(), block_name(block))?;
        let mut out = vec![T::zero(); n * d];
        for (r, &i) in active.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&enc.out[r * d..(r + 1) * d]);
        }
        let trace = make_trace(n, active, self.config.n_heads, &enc, None);
        Ok((out, trace))
    }

    fn encoder_slots(&self, block: BlockId) -> Result<&EncoderSlots> {
        match block {
            BlockId::Sentence(_) => Ok(&self.layout.sentence),
            BlockId::Speech => self
                .layout
                .speech
                .as_ref()
                .map(|s| &s.encoder)
                .ok_or_else(|| Error::InvalidArgument("segment model has no speech block".into())),
        }
    }

    fn sentence_forward(&self, s: &SentenceInput, idx: usize, opts: &mut PassOptions<'_>) -> Result<SentenceState<T>> {
        let mask = s.token_mask(&self.config)?;
        let active: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let (x, patches) = self.embed_rows(s, &active);
        let block = BlockId::Sentence(idx);
        let mut ctx = Ctx {
            dropout: self.config.dropout,
            rng: opts.rng.as_deref_mut(),
            nudge: opts.nudge.and_then(|(b, n)| (b == block).then_some(n)),
        };
        let enc = encoder_forward(&self.params, &self.layout.sentence, self.dims(), x, active.len(), &mut ctx, "sentence")?;
        Ok(SentenceState {
            n_full: mask.len(),
            active,
            patches,
            enc,
            grad_attn: None,
        })
    }

    fn head(&self, rep: &[T]) -> [T; 2] {
        let d = self.config.d_model;
        let w = &self.params[self.layout.head.0].data;
        let b = &self.params[self.layout.head.1].data;
        let mut out = [b[0], b[1]];
        for c in 0..d {
            out[0] += rep[c] * w[c * 2];
            out[1] += rep[c] * w[c * 2 + 1];
        }
        out
    }

    /// Speech-block input: speech cls followed by sentence embeddings plus
    /// their positional embeddings.
    fn speech_tokens<'a>(&self, rows: impl ExactSizeIterator<Item = &'a [T]>) -> Vec<T> {
        let d = self.config.d_model;
        let sp = self.layout.speech.as_ref().expect("speech model");
        let mut x = vec![T::zero(); (rows.len() + 1) * d];
        x[..d].copy_from_slice(&self.params[sp.cls].data);
        let pos = &self.params[sp.pos].data;
        for (j, r) in rows.enumerate() {
            for c in 0..d {
                x[(j + 1) * d + c] = r[c] + pos[j * d + c];
            }
        }
        x
    }

    /// Sentence cls output, as fed to the speech block before positional
    /// embeddings. A sentence with every frame masked encodes cls alone.
    pub fn sentence_embedding(&self, s: &SentenceInput) -> Result<Vec<T>> {
        let st = self.sentence_forward(s, 0, &mut PassOptions::default())?;
        Ok(st.enc.out[..self.config.d_model].to_vec())
    }

    /// Speech block and head over precomputed sentence embeddings (truncated
    /// to `max_sentences`). Matches [`Model::speech_forward`] exactly.
    pub fn speech_from_embeddings(&self, embeddings: &[&[T]]) -> Result<ClassLogits> {
        let sp = self
            .layout
            .speech
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("segment model has no speech block".into()))?;
        if embeddings.is_empty() {
            return Err(Error::InvalidArgument("speech has no sentences".into()));
        }
        let d = self.config.d_model;
        if embeddings.iter().any(|e| e.len() != d) {
            return Err(Error::Shape(format!("sentence embeddings must have {d} values")));
        }
        let used = &embeddings[..embeddings.len().min(self.config.max_sentences)];
        let x = self.speech_tokens(used.iter().copied());
        let enc = encoder_forward(&self.params, &sp.encoder, self.dims(), x, used.len() + 1, &mut Ctx::inference(), "speech")?;
        Ok(logits_of(self.head(&enc.out[..d])))
    }

    /// Logits and full attention trace for one speech.
    pub fn speech_forward(&self, speech: &SpeechInput) -> Result<(ClassLogits, AttentionTrace)> {
        let mut pass = self.pass();
        let logits = pass.forward_speech(speech, PassOptions::default())?;
        Ok((logits, pass.trace()?))
    }

    /// Sentence block plus head on the sentence cls output.
    pub fn segment_forward(&self, sentence: &SentenceInput) -> Result<ClassLogits> {
        self.pass().forward_segment(sentence, PassOptions::default())
    }

    /// Fraction of sentences classified depressed.
    pub fn segment_vote_probability(&self, speech: &SpeechInput) -> Result<f64> {
        if speech.sentences.is_empty() {
            return Err(Error::InvalidArgument("speech has no sentences".into()));
        }
        let mut votes = 0usize;
        for s in &speech.sentences {
            votes += self.segment_forward(s)?.predicted_class();
        }
        Ok(votes as f64 / speech.sentences.len() as f64)
    }

    /// Speech-level depression score: softmax probability for the speech
    /// variant, vote ratio for the segment variant.
    pub fn score(&self, speech: &SpeechInput) -> Result<f64> {
        match self.variant {
            Variant::Speech => Ok(self.speech_forward_logits(speech)?.probability_depressed()),
            Variant::Segment => self.segment_vote_probability(speech),
        }
    }

    pub fn speech_forward_logits(&self, speech: &SpeechInput) -> Result<ClassLogits> {
        self.pass().forward_speech(speech, PassOptions::default())
    }
}

fn block_name(b: BlockId) -> &'static str {
    match b {
        BlockId::Sentence(_) => "sentence",
        BlockId::Speech => "speech",
    }
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.f64()).collect()
}

fn make_trace<T: Real>(
    n_full: usize,
    active: Vec<usize>,
    heads: usize,
    enc: &EncoderCache<T>,
    grad: Option<&Vec<Vec<T>>>,
) -> BlockTrace {
    BlockTrace {
        n_tokens: n_full,
        active,
        n_heads: heads,
        attn: enc.layers.iter().map(|l| to_f64(&l.attn)).collect(),
        grad: grad.map(|g| g.iter().map(|x| to_f64(x)).collect()),
    }
}

fn logits_of<T: Real>(l: [T; 2]) -> ClassLogits {
    ClassLogits {
        logits: [l[0].f64(), l[1].f64()],
    }
}

/// Per-pass state: activations of the last forward pass, gradients of the
/// last backward pass.
pub struct Pass<'m, T: Real> {
    model: &'m Model<T>,
    state: Option<State<T>>,
}

impl<'m, T: Real> Pass<'m, T> {
    pub fn model(&self) -> &'m Model<T> {
        self.model
    }

    pub fn forward_speech(&mut self, speech: &SpeechInput, mut opts: PassOptions<'_>) -> Result<ClassLogits> {
        self.state = None;
        let m = self.model;
        let cfg = &m.config;
        let sp = m
            .layout
            .speech
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("segment model has no speech block".into()))?;
        if speech.sentences.is_empty() {
            return Err(Error::InvalidArgument("speech has no sentences".into()));
        }
        let d = cfg.d_model;
        let used = &speech.sentences[..speech.sentences.len().min(cfg.max_sentences)];
        let mut sentences = Vec::with_capacity(used.len());
        for (j, s) in used.iter().enumerate() {
            sentences.push(m.sentence_forward(s, j, &mut opts)?);
        }
        let n = used.len() + 1;
        let x = m.speech_tokens(sentences.iter().map(|st| &st.enc.out[..d]));
        let mut ctx = Ctx {
            dropout: cfg.dropout,
            rng: opts.rng.as_deref_mut(),
            nudge: opts.nudge.and_then(|(b, n)| (b == BlockId::Speech).then_some(n)),
        };
        let enc = encoder_forward(&m.params, &sp.encoder, m.dims(), x, n, &mut ctx, "speech")?;
        let rep = enc.out[..d].to_vec();
        let logits = m.head(&rep);
        self.state = Some(State {
            body: Body::Speech(SpeechState {
                sentences,
                enc,
                grad_attn: None,
            }),
            rep,
            logits,
        });
        Ok(logits_of(logits))
    }

    pub fn forward_segment(&mut self, sentence: &SentenceInput, mut opts: PassOptions<'_>) -> Result<ClassLogits> {
        self.state = None;
        let m = self.model;
        let mask = sentence.token_mask(&m.config)?;
        if !mask[1..].iter().any(|&a| a) {
            return Err(Error::InvalidArgument("sentence has no unmasked frames".into()));
        }
        let st = m.sentence_forward(sentence, 0, &mut opts)?;
        let rep = st.enc.out[..m.config.d_model].to_vec();
        let logits = m.head(&rep);
        self.state = Some(State {
            body: Body::Segment(st),
            rep,
            logits,
        });
        Ok(logits_of(logits))
    }

    pub fn logits(&self) -> Result<ClassLogits> {
        Ok(logits_of(self.state()?.logits))
    }

    fn state(&self) -> Result<&State<T>> {
        self.state
            .as_ref()
            .ok_or_else(|| Error::State("no forward pass recorded".into()))
    }

    /// Reverse pass for `objective`. Parameter gradients are accumulated into
    /// `grads` (laid out like the model's parameters) when given; attention
    /// gradients are always recorded. Returns the objective value.
    pub fn backward(&mut self, objective: Objective, grads: Option<&mut [Tensor<T>]>) -> Result<f64> {
        self.backward_weighted(objective, 1.0, grads)
    }

    /// As [`Pass::backward`] with the objective scaled by `weight`.
    pub fn backward_weighted(
        &mut self,
        objective: Objective,
        weight: f64,
        mut grads: Option<&mut [Tensor<T>]>,
    ) -> Result<f64> {
        let m = self.model;
        let d = m.config.d_model;
        let dims = m.dims();
        let st = self
            .state
            .as_mut()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        if let Some(g) = &grads {
            if g.len() != m.params.len() {
                return Err(Error::Shape("gradient buffer does not match parameters".into()));
            }
        }
        let l = logits_of(st.logits).logits;
        let (value, dl) = match objective {
            Objective::Logit(c) if c < 2 => {
                let mut dl = [0.0; 2];
                dl[c] = 1.0;
                (l[c], dl)
            }
            Objective::CrossEntropy(c) if c < 2 => {
                let mx = l[0].max(l[1]);
                let lse = mx + ((l[0] - mx).exp() + (l[1] - mx).exp()).ln();
                let p = [(l[0] - lse).exp(), (l[1] - lse).exp()];
                let mut dl = p;
                dl[c] -= 1.0;
                (lse - l[c], dl)
            }
            _ => return Err(Error::InvalidArgument("class index out of range".into())),
        };
        let dl = [T::of(dl[0] * weight), T::of(dl[1] * weight)];

        let hw = &m.params[m.layout.head.0].data;
        if let Some(g) = grads.as_deref_mut() {
            for c in 0..d {
                g[m.layout.head.0].data[c * 2] += st.rep[c] * dl[0];
                g[m.layout.head.0].data[c * 2 + 1] += st.rep[c] * dl[1];
            }
            g[m.layout.head.1].data[0] += dl[0];
            g[m.layout.head.1].data[1] += dl[1];
        }
        let drep: Vec<T> = (0..d).map(|c| hw[c * 2] * dl[0] + hw[c * 2 + 1] * dl[1]).collect();

        match &mut st.body {
            Body::Segment(s) => {
                sentence_backward(m, s, &drep, grads.as_deref_mut(), dims);
            }
            Body::Speech(sp) => {
                let slots = m.layout.speech.as_ref().expect("speech model");
                let n = sp.enc.n;
                let mut dout = vec![T::zero(); n * d];
                dout[..d].copy_from_slice(&drep);
                let (dx, ga) = encoder_backward(&m.params, &slots.encoder, dims, &sp.enc, &dout, grads.as_deref_mut());
                sp.grad_attn = Some(ga);
                if let Some(g) = grads.as_deref_mut() {
                    for c in 0..d {
                        g[slots.cls].data[c] += dx[c];
                    }
                    for j in 1..n {
                        for c in 0..d {
                            g[slots.pos].data[(j - 1) * d + c] += dx[j * d + c];
                        }
                    }
                }
                for (j, s) in sp.sentences.iter_mut().enumerate() {
                    sentence_backward(m, s, &dx[(j + 1) * d..(j + 2) * d], grads.as_deref_mut(), dims);
                }
            }
        }
        Ok(value * weight)
    }

    pub fn block_trace(&self, block: BlockId) -> Result<BlockTrace> {
        let st = self.state()?;
        let heads = self.model.config.n_heads;
        match (&st.body, block) {
            (Body::Speech(sp), BlockId::Speech) => {
                Ok(make_trace(sp.enc.n, (0..sp.enc.n).collect(), heads, &sp.enc, sp.grad_attn.as_ref()))
            }
            (Body::Speech(sp), BlockId::Sentence(j)) if j < sp.sentences.len() => {
                Ok(sentence_trace(&sp.sentences[j], heads))
            }
            (Body::Segment(s), BlockId::Sentence(0)) => Ok(sentence_trace(s, heads)),
            _ => Err(Error::InvalidArgument(format!("block {block:?} not in this pass"))),
        }
    }

    pub fn n_sentences(&self) -> Result<usize> {
        Ok(match &self.state()?.body {
            Body::Speech(sp) => sp.sentences.len(),
            Body::Segment(_) => 1,
        })
    }

    pub fn trace(&self) -> Result<AttentionTrace> {
        let st = self.state()?;
        let heads = self.model.config.n_heads;
        Ok(match &st.body {
            Body::Speech(sp) => AttentionTrace {
                sentences: sp.sentences.iter().map(|s| sentence_trace(s, heads)).collect(),
                speech: Some(make_trace(sp.enc.n, (0..sp.enc.n).collect(), heads, &sp.enc, sp.grad_attn.as_ref())),
            },
            Body::Segment(s) => AttentionTrace {
                sentences: vec![sentence_trace(s, heads)],
                speech: None,
            },
        })
    }

    /// Sentence cls outputs fed to the speech block (before positional
    /// embeddings), one row of `d_model` per sentence.
    pub fn sentence_embeddings(&self) -> Result<Vec<Vec<f64>>> {
        let d = self.model.config.d_model;
        Ok(match &self.state()?.body {
            Body::Speech(sp) => sp.sentences.iter().map(|s| to_f64(&s.enc.out[..d])).collect(),
            Body::Segment(s) => vec![to_f64(&s.enc.out[..d])],
        })
    }
}

fn sentence_trace<T: Real>(s: &SentenceState<T>, heads: usize) -> BlockTrace {
    make_trace(s.n_full, s.active.clone(), heads, &s.enc, s.grad_attn.as_ref())
}

fn sentence_backward<T: Real>(
    m: &Model<T>,
    s: &mut SentenceState<T>,
    dcls: &[T],
    mut grads: Option<&mut [Tensor<T>]>,
    dims: Dims,
) {
    let d = dims.d;
    let n = s.enc.n;
    let mut dout = vec![T::zero(); n * d];
    dout[..d].copy_from_slice(dcls);
    let (dx, ga) = encoder_backward(&m.params, &m.layout.sentence, dims, &s.enc, &dout, grads.as_deref_mut());
    s.grad_attn = Some(ga);
    let Some(g) = grads else { return };
    let l = &m.layout;
    let pd = m.config.patch_dim();
    for (r, &pos) in s.active.iter().enumerate() {
        for c in 0..d {
            g[l.sentence_pos].data[pos * d + c] += dx[r * d + c];
        }
    }
    for c in 0..d {
        g[l.sentence_cls].data[c] += dx[c];
    }
    let np = n - 1;
    if np > 0 {
        let dp = &dx[d..];
        matmul(pd, np, d, &s.patches, true, dp, false, T::one(), &mut g[l.patch.0].data);
        for r in 0..np {
            for c in 0..d {
                g[l.patch.1].data[c] += dp[r * d + c];
            }
        }
    }
}
