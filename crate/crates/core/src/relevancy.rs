//! Gradient-weighted attention relevancy.
//!
//! Each block's relevancy map starts as the identity and absorbs, layer by
//! layer, the head-averaged positive part of `gradA ⊙ A`. The cls row of the
//! speech block ranks sentences; the cls row of a sentence block scores its
//! frames.

use serde::{Deserialize, Serialize};

use crate::acoustics::{merge_spans, Span};
use crate::dsp::{DspConfig, MelSpectrogram};
use crate::error::{Error, Result};
use crate::model::{BlockId, BlockTrace, Model, Objective, PassOptions, SpeechInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Speech,
    Sentence,
}

/// `mean_h max(gradA_h ⊙ A_h, 0)` for head-stacked `[heads][n][n]` inputs.
pub fn weighted_attention(attn: &[f64], grad: &[f64], heads: usize, n: usize) -> Result<Vec<f64>> {
    if heads == 0 || attn.len() != heads * n * n || grad.len() != attn.len() {
        return Err(Error::InvalidArgument(format!(
            "attention ({}) and gradient ({}) must both hold {heads}x{n}x{n} values",
            attn.len(),
            grad.len()
        )));
    }
    let mut out = vec![0.0; n * n];
    for h in 0..heads {
        let o = h * n * n;
        for (i, v) in out.iter_mut().enumerate() {
            *v += (attn[o + i] * grad[o + i]).max(0.0);
        }
    }
    out.iter_mut().for_each(|v| *v /= heads as f64);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevancyMap {
    pub n: usize,
    /// Row-major `n x n`.
    pub r: Vec<f64>,
    pub block: BlockKind,
}

impl RelevancyMap {
    pub fn identity(n: usize, block: BlockKind) -> Self {
        let mut r = vec![0.0; n * n];
        (0..n).for_each(|i| r[i * n + i] = 1.0);
        RelevancyMap { n, r, block }
    }

    /// `R <- R + Ā R`.
    pub fn propagate(&mut self, abar: &[f64]) -> Result<()> {
        let n = self.n;
        if abar.len() != n * n {
            return Err(Error::InvalidArgument(format!("Ā holds {} values, expected {}", abar.len(), n * n)));
        }
        let mut prod = vec![0.0; n * n];
        crate::model::matmul(n, n, n, abar, false, &self.r, false, 0.0, &mut prod);
        self.r.iter_mut().zip(&prod).for_each(|(r, p)| *r += p);
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.r[i * self.n..(i + 1) * self.n]
    }
}

/// Relevancy map over a block's active tokens (compact indices), propagated
/// through every recorded layer in forward order.
pub fn block_relevancy(trace: &BlockTrace, kind: BlockKind) -> Result<RelevancyMap> {
    let grad = trace
        .grad
        .as_ref()
        .ok_or_else(|| Error::State("attention gradients missing; run backward first".into()))?;
    let n = trace.n_active();
    let mut r = RelevancyMap::identity(n, kind);
    for (a, g) in trace.attn.iter().zip(grad) {
        r.propagate(&weighted_attention(a, g, trace.n_heads, n)?)?;
    }
    Ok(r)
}

/// Cls-row relevancy at every token position of the block except cls itself.
/// Masked positions score 0.
pub fn cls_scores(trace: &BlockTrace, kind: BlockKind) -> Result<Vec<f64>> {
    let r = block_relevancy(trace, kind)?;
    if trace.active.first() != Some(&0) {
        return Err(Error::InvalidArgument("cls token is not active".into()));
    }
    let mut out = vec![0.0; trace.n_tokens - 1];
    for (c, &pos) in trace.active.iter().enumerate().skip(1) {
        out[pos - 1] = r.row(0)[c];
    }
    Ok(out)
}

/// Per-sentence relevancy from the speech block.
pub fn speech_relevancy(speech_trace: &BlockTrace) -> Result<Vec<f64>> {
    cls_scores(speech_trace, BlockKind::Speech)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScores {
    /// One entry per spectrogram column; `None` for masked or padding frames.
    pub scores: Vec<Option<f64>>,
    /// All present scores were equal, so min-max normalisation was undefined
    /// and zeros were reported.
    pub degenerate: bool,
}

impl FrameScores {
    /// Frames scoring strictly above `tau`.
    pub fn above(&self, tau: f64) -> Vec<usize> {
        self.scores
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.filter(|&v| v > tau).map(|_| i))
            .collect()
    }
}

/// Min-max normalises present entries to [0, 1].
pub fn min_max(raw: &[Option<f64>]) -> FrameScores {
    let present = raw.iter().flatten();
    let lo = present.clone().cloned().fold(f64::INFINITY, f64::min);
    let hi = present.cloned().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = !(hi > lo);
    let scores = raw
        .iter()
        .map(|s| s.map(|v| if degenerate { 0.0 } else { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) }))
        .collect();
    FrameScores { scores, degenerate }
}

/// Normalised per-frame relevancy for one sentence block. Token scores fan out
/// to the `frame_width` frames each token covers; frames beyond
/// `valid_frames` and frames of masked tokens are absent.
pub fn sentence_frame_relevancy(trace: &BlockTrace, frame_width: usize, valid_frames: usize) -> Result<FrameScores> {
    let tokens = cls_scores(trace, BlockKind::Sentence)?;
    let mask = trace.token_mask();
    let n_frames = tokens.len() * frame_width;
    let raw: Vec<Option<f64>> = (0..n_frames)
        .map(|f| {
            let t = f / frame_width;
            (mask[t + 1] && f < valid_frames).then_some(tokens[t])
        })
        .collect();
    Ok(min_max(&raw))
}

/// Sentence indices by descending score, ties to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpretConfig {
    pub k: usize,
    pub tau: f64,
    /// Fixed class to explain; the predicted class when absent.
    pub target_class: Option<usize>,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        InterpretConfig {
            k: 5,
            tau: 0.3,
            target_class: None,
        }
    }
}

impl InterpretConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || !self.tau.is_finite() || self.target_class.is_some_and(|c| c > 1) {
            return Err(Error::Config("interpret: k must be positive, tau finite, target 0 or 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceInterpretation {
    pub index: usize,
    pub score: f64,
    pub frames: FrameScores,
    pub relevant_frames: Vec<usize>,
    /// Merged waveform sample spans `[start, end)`.
    pub spans: Vec<Span>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretationResult {
    pub target_class: usize,
    pub logits: [f64; 2],
    pub sentence_scores: Vec<f64>,
    pub top_sentences: Vec<usize>,
    pub sentences: Vec<SentenceInterpretation>,
    pub k: usize,
    pub tau: f64,
    pub note: Option<String>,
}

impl InterpretationResult {
    /// Merged spans in milliseconds, per top sentence.
    pub fn spans_ms(&self, sample_rate: u32) -> Vec<Vec<(f64, f64)>> {
        let sr = sample_rate as f64 / 1000.0;
        self.sentences
            .iter()
            .map(|s| s.spans.iter().map(|&(a, b)| (a as f64 / sr, b as f64 / sr)).collect())
            .collect()
    }
}

/// Speech ranking, top-k sentence frame scores, thresholded frames and their
/// waveform spans from one forward/backward pass of a speech model.
pub fn interpret(
    model: &Model<f32>,
    speech: &SpeechInput,
    cfg: &InterpretConfig,
    dsp: &DspConfig,
) -> Result<InterpretationResult> {
    cfg.validate()?;
    let mut pass = model.pass();
    let logits = pass.forward_speech(speech, PassOptions::default())?;
    let target = cfg.target_class.unwrap_or(logits.predicted_class());
    pass.backward(Objective::Logit(target), None)?;
    let sentence_scores = speech_relevancy(&pass.block_trace(BlockId::Speech)?)?;
    let n = sentence_scores.len();
    let note = (n < cfg.k).then(|| format!("speech has {n} sentences, fewer than k = {}; all used", cfg.k));
    let top = top_k(&sentence_scores, cfg.k);
    let mut sentences = Vec::with_capacity(top.len());
    for &j in &top {
        let spec: &MelSpectrogram = &speech.sentences[j].spec;
        let trace = pass.block_trace(BlockId::Sentence(j))?;
        let frames = sentence_frame_relevancy(&trace, model.config.frame_width, spec.valid_frames)?;
        let relevant_frames = frames.above(cfg.tau);
        let spans = merge_spans(&relevant_frames, spec.valid_frames, dsp)?;
        sentences.push(SentenceInterpretation {
            index: j,
            score: sentence_scores[j],
            frames,
            relevant_frames,
            spans,
        });
    }
    Ok(InterpretationResult {
        target_class: target,
        logits: logits.logits,
        sentence_scores,
        top_sentences: top,
        sentences,
        k: cfg.k,
        tau: cfg.tau,
        note,
    })
}
