//! Faithfulness curves: accuracy as relevant (or random) sentences and frames
//! are removed.
//!
//! Each speaker is explained once, against its predicted class, and the
//! resulting order is used for every step. Removing a sentence drops it from
//! the speech-block sequence; removing frames masks their tokens in the
//! sentence block, exactly as padding is masked.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockId, LabeledSpeech, Model, ModelConfig, Objective, PassOptions, SentenceInput, SpeechInput};
use crate::relevancy::{sentence_frame_relevancy, speech_relevancy, top_k};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    RelevantSentences,
    RandomSentences,
    RelevantFrames,
    RandomFrames,
}

impl PerturbMode {
    pub const ALL: [PerturbMode; 4] = [
        PerturbMode::RelevantSentences,
        PerturbMode::RandomSentences,
        PerturbMode::RelevantFrames,
        PerturbMode::RandomFrames,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCurve {
    pub mode: PerturbMode,
    /// Sentences affected so far.
    pub x: Vec<usize>,
    /// Dev accuracy at each step.
    pub y: Vec<f64>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    /// Sentences added to the removal set per step.
    pub k_step: usize,
    pub tau: f64,
    /// Share of a sentence's active frame tokens removed by the random-frame
    /// baseline.
    pub random_fraction: f64,
    pub seeds: Vec<u64>,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            k_step: 2,
            tau: 0.3,
            random_fraction: 0.3,
            seeds: (0..5).collect(),
        }
    }
}

impl PerturbConfig {
    pub fn paper_scale() -> Self {
        PerturbConfig {
            k_step: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_step == 0 || !self.tau.is_finite() || !(0.0..=1.0).contains(&self.random_fraction) || self.seeds.is_empty()
        {
            return Err(Error::Config(
                "perturb: k_step > 0, finite tau, random_fraction in [0, 1] and at least one seed required".into(),
            ));
        }
        Ok(())
    }
}

/// Drops the listed sentences; survivors keep their relative order.
pub fn ablate_sentences(speech: &SpeechInput, indices: &[usize]) -> Result<SpeechInput> {
    let n = speech.sentences.len();
    let mut drop = vec![false; n];
    for &i in indices {
        if i >= n {
            return Err(Error::InvalidArgument(format!("sentence {i} out of range {n}")));
        }
        drop[i] = true;
    }
    Ok(SpeechInput {
        sentences: speech
            .sentences
            .iter()
            .zip(&drop)
            .filter(|(_, &d)| !d)
            .map(|(s, _)| s.clone())
            .collect(),
    })
}

/// Masks every frame token containing one of `frames`. Spectrogram data is
/// shared with the input, untouched.
pub fn ablate_frames(sentence: &SentenceInput, frames: &[usize], cfg: &ModelConfig) -> Result<SentenceInput> {
    let valid = sentence.spec.valid_frames;
    if let Some(&f) = frames.iter().find(|&&f| f >= valid) {
        return Err(Error::InvalidArgument(format!("frame {f} outside {valid} valid frames")));
    }
    let mut tokens: Vec<usize> = frames.iter().map(|f| f / cfg.frame_width).collect();
    tokens.dedup();
    sentence.with_removed_tokens(&tokens, cfg)
}

/// Model score, or `prior` when no sentence is left.
pub fn score_or_prior(model: &Model<f32>, speech: &SpeechInput, prior: f64) -> Result<f64> {
    if speech.sentences.is_empty() {
        Ok(prior)
    } else {
        model.score(speech)
    }
}

fn step_points(n_max: usize, k: usize) -> Vec<usize> {
    let mut x: Vec<usize> = (0..=n_max).step_by(k).collect();
    if *x.last().expect("non-empty") != n_max {
        x.push(n_max);
    }
    x
}

/// Cached per-speaker quantities for the suite.
struct SpeakerCache {
    label: usize,
    base: Vec<Vec<f32>>,
    relevant_order: Vec<usize>,
    relevant_ablated: Vec<Vec<f32>>,
    active_tokens: Vec<Vec<usize>>,
}

fn speaker_cache(model: &Model<f32>, s: &LabeledSpeech, tau: f64) -> Result<SpeakerCache> {
    let cfg = &model.config;
    let n = s.input.sentences.len().min(cfg.max_sentences);
    let sentences = &s.input.sentences[..n];
    let mut pass = model.pass();
    let logits = pass.forward_speech(&s.input, PassOptions::default())?;
    pass.backward(Objective::Logit(logits.predicted_class()), None)?;
    let scores = speech_relevancy(&pass.block_trace(BlockId::Speech)?)?;
    let relevant_order = top_k(&scores, n);
    let base: Vec<Vec<f32>> = pass.sentence_embeddings()?.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();
    let mut relevant_ablated = Vec::with_capacity(n);
    let mut active_tokens = Vec::with_capacity(n);
    for (j, sent) in sentences.iter().enumerate() {
        let trace = pass.block_trace(BlockId::Sentence(j))?;
        let frames = sentence_frame_relevancy(&trace, cfg.frame_width, sent.spec.valid_frames)?;
        let ablated = ablate_frames(sent, &frames.above(tau), cfg)?;
        relevant_ablated.push(model.sentence_embedding(&ablated)?);
        active_tokens.push(trace.active[1..].iter().map(|&p| p - 1).collect());
    }
    Ok(SpeakerCache {
        label: s.label,
        base,
        relevant_order,
        relevant_ablated,
        active_tokens,
    })
}

fn rows_score(model: &Model<f32>, rows: &[&[f32]], prior: f64) -> Result<f64> {
    if rows.is_empty() {
        Ok(prior)
    } else {
        Ok(model.speech_from_embeddings(rows)?.probability_depressed())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSuite {
    pub curves: Vec<PerturbationCurve>,
    pub baseline_accuracy: f64,
    pub n_speakers: usize,
    pub threshold: f64,
    pub seeds: Vec<u64>,
}

impl PerturbationSuite {
    pub fn curve(&self, mode: PerturbMode) -> Option<&PerturbationCurve> {
        self.curves.iter().find(|c| c.mode == mode)
    }
}

/// All four curves for a speech model over `dev`. A speaker counts as
/// predicted depressed when its score is at least `prevalence`; the same
/// value is the score of a speech with every sentence removed.
pub fn perturbation_suite(
    model: &Model<f32>,
    dev: &[LabeledSpeech],
    prevalence: f64,
    cfg: &PerturbConfig,
) -> Result<PerturbationSuite> {
    cfg.validate()?;
    if dev.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let caches = dev
        .iter()
        .map(|s| speaker_cache(model, s, cfg.tau))
        .collect::<Result<Vec<_>>>()?;
    let n_max = caches.iter().map(|c| c.base.len()).max().unwrap_or(0);
    let xs = step_points(n_max, cfg.k_step);
    let correct = |score: f64, label: usize| usize::from(score >= prevalence) == label;

    let mut hits = vec![vec![0.0f64; xs.len()]; 4];
    for (i, c) in caches.iter().enumerate() {
        let n = c.base.len();
        // Relevant curves.
        for (step, &x) in xs.iter().enumerate() {
            let x = x.min(n);
            let removed = &c.relevant_order[..x];
            let kept: Vec<&[f32]> = (0..n).filter(|j| !removed.contains(j)).map(|j| c.base[j].as_slice()).collect();
            hits[0][step] += f64::from(u8::from(correct(rows_score(model, &kept, prevalence)?, c.label)));
            let rows: Vec<&[f32]> = (0..n)
                .map(|j| if removed.contains(&j) { c.relevant_ablated[j].as_slice() } else { c.base[j].as_slice() })
                .collect();
            hits[2][step] += f64::from(u8::from(correct(rows_score(model, &rows, prevalence)?, c.label)));
        }
        // Random baselines; hit counts summed over seeds, averaged below.
        for &seed in &cfg.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut random_ablated = Vec::with_capacity(n);
            for j in 0..n {
                let act = &c.active_tokens[j];
                let k = (cfg.random_fraction * act.len() as f64).round() as usize;
                let pick: Vec<usize> = index::sample(&mut rng, act.len(), k).into_iter().map(|t| act[t]).collect();
                let sent = dev[i].input.sentences[j].with_removed_tokens(&pick, &model.config)?;
                random_ablated.push(model.sentence_embedding(&sent)?);
            }
            for (step, &x) in xs.iter().enumerate() {
                let removed = &order[..x.min(n)];
                let kept: Vec<&[f32]> = (0..n).filter(|j| !removed.contains(j)).map(|j| c.base[j].as_slice()).collect();
                if correct(rows_score(model, &kept, prevalence)?, c.label) {
                    hits[1][step] += 1.0;
                }
                let rows: Vec<&[f32]> = (0..n)
                    .map(|j| if removed.contains(&j) { random_ablated[j].as_slice() } else { c.base[j].as_slice() })
                    .collect();
                if correct(rows_score(model, &rows, prevalence)?, c.label) {
                    hits[3][step] += 1.0;
                }
            }
        }
    }
    let nd = dev.len() as f64;
    let curves = PerturbMode::ALL
        .iter()
        .zip(hits)
        .map(|(&mode, h)| {
            let denom = match mode {
                PerturbMode::RandomSentences | PerturbMode::RandomFrames => nd * cfg.seeds.len() as f64,
                _ => nd,
            };
            (mode, h.iter().map(|v| v / denom).collect())
        })
        .map(|(mode, y)| PerturbationCurve {
            mode,
            x: xs.clone(),
            y,
            threshold: prevalence,
        })
        .collect::<Vec<_>>();
    let baseline_accuracy = curves[0].y[0];
    Ok(PerturbationSuite {
        curves,
        baseline_accuracy,
        n_speakers: dev.len(),
        threshold: prevalence,
        seeds: cfg.seeds.clone(),
    })
}
