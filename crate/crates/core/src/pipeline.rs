//! End-to-end orchestration: configuration layering, data preparation and the
//! synth → train → evaluate → interpret → features → perturb stages.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::acoustics::{
    cohort_feature_table, compare_features, write_feature_csv, AcousticFeatureRow, CohortSpeaker,
    FeatureComparison, Outcome,
};
use crate::dsp::{pad_or_truncate, DspConfig, MelFrontend};
use crate::error::{Error, Result};
use crate::model::{train, Checkpoint, LabeledSpeech, Model, ModelConfig, SentenceInput, SpeechInput, TrainConfig, TrainMeta, Variant};
use crate::perturb::{perturbation_suite, PerturbConfig, PerturbationSuite};
use crate::provenance::Provenance;
use crate::relevancy::{interpret, InterpretConfig, InterpretationResult};
use crate::stats::{auc, bootstrap_auc_ci, delong_test, roc_points, DeLongResult, ScoredCohort};
use crate::synthcorpus::{generate_corpus, Corpus, Speech, Split, SynthConfig};

pub const CORPUS_DIR: &str = "corpus";
pub const SUMMARY_FILE: &str = "summary.json";
pub const STATUS_FILE: &str = "status.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const INTERPRETATIONS_FILE: &str = "interpretations.json";
pub const FEATURES_FILE: &str = "features.csv";
pub const SIGNIFICANCE_FILE: &str = "feature_significance.json";
pub const PERTURBATION_FILE: &str = "perturbation.json";

pub fn checkpoint_file(variant: Variant) -> String {
    format!("{}.ckpt", variant.name())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Toy,
    PaperScale,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper-scale" => Ok(Preset::PaperScale),
            _ => Err(Error::Config(format!("unknown preset {s:?} (toy, paper-scale)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_bootstrap: usize,
    /// Two-sided level of the bootstrap intervals.
    pub ci_level: f64,
    /// Family-wise level for the feature comparison.
    pub alpha: f64,
    /// Number of comparisons for the Bonferroni tiers; defaults to the
    /// number of compared features.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bonferroni_m: Option<usize>,
    /// Decision threshold on the depressed probability; defaults to the
    /// corpus prevalence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decision_threshold: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_bootstrap: 5000,
            ci_level: 0.95,
            alpha: 0.05,
            bonferroni_m: None,
            decision_threshold: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_bootstrap > 0
            && self.ci_level > 0.0
            && self.ci_level < 1.0
            && self.alpha > 0.0
            && self.alpha < 1.0
            && self.bonferroni_m != Some(0)
            && self.decision_threshold.is_none_or(|t| (0.0..=1.0).contains(&t));
        if ok {
            Ok(())
        } else {
            Err(Error::Config("eval: invalid settings".into()))
        }
    }
}

/// Every knob of a run in one file. Sections are layered over a preset, and
/// unknown keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory; not part of the provenance hash.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub dsp: DspConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub interpret: InterpretConfig,
    pub eval: EvalConfig,
    pub perturb: PerturbConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Toy)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Toy => RunConfig {
                seed: 0,
                out_dir: None,
                dsp: DspConfig::default(),
                synth: SynthConfig::default(),
                model: ModelConfig::default(),
                train: TrainConfig::default(),
                interpret: InterpretConfig::default(),
                eval: EvalConfig::default(),
                perturb: PerturbConfig::default(),
            },
            Preset::PaperScale => RunConfig {
                seed: 0,
                out_dir: None,
                dsp: DspConfig::paper_scale(),
                synth: SynthConfig::paper_scale(),
                model: ModelConfig::paper_scale(),
                train: TrainConfig::paper_scale(),
                interpret: InterpretConfig::default(),
                eval: EvalConfig::default(),
                perturb: PerturbConfig::paper_scale(),
            },
        }
    }

    /// `text` (TOML) overrides `preset` key by key.
    pub fn layered(preset: Preset, text: &str) -> Result<Self> {
        let over: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, over);
        let cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(preset: Preset, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::layered(preset, &text).map_err(|e| Error::format(path, e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dsp.validate()?;
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.interpret.validate()?;
        self.eval.validate()?;
        self.perturb.validate()?;
        if self.dsp.n_mels != self.model.n_mels || self.dsp.target_frames != self.model.target_frames {
            return Err(Error::Config(
                "dsp.n_mels/target_frames must equal model.n_mels/target_frames".into(),
            ));
        }
        if self.interpret.target_class.is_some() {
            return Err(Error::Config(
                "interpret.target_class is chosen per speaker by the pipeline; leave it unset".into(),
            ));
        }
        Ok(())
    }

    /// The configuration as embedded in artifacts (without the output path).
    pub fn canonical(&self) -> RunConfig {
        RunConfig {
            out_dir: None,
            ..self.clone()
        }
    }

    pub fn provenance(&self) -> Provenance {
        let json = serde_json::to_string(&self.canonical()).expect("config serializes");
        Provenance::new(&json, self.seed)
    }
}

/// Model-ready view of one speaker.
#[derive(Debug, Clone)]
pub struct PreparedSpeaker {
    /// Position in `Corpus::speeches`.
    pub corpus_index: usize,
    pub speaker_id: String,
    pub label: usize,
    pub covariate: u8,
    pub marked: Vec<bool>,
    pub input: SpeechInput,
}

impl PreparedSpeaker {
    pub fn labeled(&self) -> LabeledSpeech {
        LabeledSpeech {
            input: self.input.clone(),
            label: self.label,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub train: Vec<PreparedSpeaker>,
    pub dev: Vec<PreparedSpeaker>,
    pub prevalence: f64,
}

pub fn prepare_speech(speech: &Speech, frontend: &MelFrontend) -> Result<SpeechInput> {
    let dsp = frontend.config();
    let sentences = speech
        .sentences
        .iter()
        .map(|s| {
            let spec = frontend.compute(&s.waveform)?;
            Ok(SentenceInput::new(Arc::new(pad_or_truncate(&spec, dsp.target_frames, dsp.pad_value()))))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpeechInput { sentences })
}

pub fn prepare(corpus: &Corpus, frontend: &MelFrontend) -> Result<PreparedCorpus> {
    let mut out = PreparedCorpus {
        train: Vec::new(),
        dev: Vec::new(),
        prevalence: corpus.prevalence(),
    };
    for (i, s) in corpus.speeches.iter().enumerate() {
        let Some(split) = s.split else { continue };
        let p = PreparedSpeaker {
            corpus_index: i,
            speaker_id: s.profile.speaker_id.clone(),
            label: s.label().index(),
            covariate: s.profile.sex_covariate,
            marked: s.sentences.iter().map(|x| x.marked).collect(),
            input: prepare_speech(s, frontend)?,
        };
        match split {
            Split::Train => out.train.push(p),
            Split::Dev => out.dev.push(p),
        }
    }
    if out.train.is_empty() || out.dev.is_empty() {
        return Err(Error::InvalidArgument("corpus needs both train and dev speakers".into()));
    }
    Ok(out)
}

pub fn synthesize(cfg: &RunConfig) -> Result<Corpus> {
    let mut corpus = generate_corpus(&cfg.synth, cfg.seed)?;
    corpus.manifest.provenance = Some(cfg.provenance());
    Ok(corpus)
}

pub fn train_variant(cfg: &RunConfig, data: &PreparedCorpus, variant: Variant) -> Result<Checkpoint> {
    let train_set: Vec<LabeledSpeech> = data.train.iter().map(PreparedSpeaker::labeled).collect();
    let dev_set: Vec<LabeledSpeech> = data.dev.iter().map(PreparedSpeaker::labeled).collect();
    let mut ck = train(&cfg.model, variant, &cfg.train, &train_set, &dev_set, cfg.seed)?.checkpoint;
    ck.meta.provenance = Some(cfg.provenance());
    Ok(ck)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub auc: f64,
    pub ci: (f64, f64),
    /// (false positive rate, true positive rate), plot-ready.
    pub roc: Vec<(f64, f64)>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub provenance: Provenance,
    pub n_dev: usize,
    pub n_positive: usize,
    pub speaker_ids: Vec<String>,
    pub labels: Vec<u8>,
    pub segment: ScoreReport,
    pub speech: ScoreReport,
    /// Segment (a) versus speech (b).
    pub delong: DeLongResult,
}

fn score_report(model: &Model<f32>, dev: &[PreparedSpeaker], labels: &[u8], eval: &EvalConfig, seed: u64) -> Result<ScoreReport> {
    let scores = dev.iter().map(|s| model.score(&s.input)).collect::<Result<Vec<_>>>()?;
    let cohort = ScoredCohort::new(scores.clone(), labels.to_vec())?;
    Ok(ScoreReport {
        auc: auc(&cohort)?,
        ci: bootstrap_auc_ci(&cohort, eval.n_bootstrap, 1.0 - eval.ci_level, seed)?,
        roc: roc_points(&cohort)?,
        scores,
    })
}

pub fn evaluate(cfg: &RunConfig, dev: &[PreparedSpeaker], segment: &Model<f32>, speech: &Model<f32>) -> Result<EvaluationReport> {
    if segment.variant != Variant::Segment || speech.variant != Variant::Speech {
        return Err(Error::InvalidArgument("evaluate expects a segment and a speech checkpoint".into()));
    }
    let labels: Vec<u8> = dev.iter().map(|s| s.label as u8).collect();
    let seg = score_report(segment, dev, &labels, &cfg.eval, cfg.seed)?;
    let sp = score_report(speech, dev, &labels, &cfg.eval, cfg.seed)?;
    let delong = delong_test(&seg.scores, &sp.scores, &labels)?;
    Ok(EvaluationReport {
        provenance: cfg.provenance(),
        n_dev: dev.len(),
        n_positive: labels.iter().filter(|&&l| l == 1).count(),
        speaker_ids: dev.iter().map(|s| s.speaker_id.clone()).collect(),
        labels,
        segment: seg,
        speech: sp,
        delong,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerInterpretation {
    pub speaker_id: String,
    pub label: usize,
    pub score: f64,
    pub outcome: Outcome,
    /// How many of the top sentences carry a planted marker.
    pub marked_in_top: usize,
    pub spans_ms: Vec<Vec<(f64, f64)>>,
    pub result: InterpretationResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretSummary {
    pub threshold: f64,
    pub k: usize,
    pub tau: f64,
    pub n_tp: usize,
    pub n_tn: usize,
    pub n_fp: usize,
    pub n_fn: usize,
    /// Mean share of marked sentences among the top sentences of true
    /// positives; absent without true positives.
    pub tp_marked_precision: Option<f64>,
    /// Marked share expected from a random choice of sentences.
    pub chance_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretReport {
    pub provenance: Provenance,
    pub summary: InterpretSummary,
    pub speakers: Vec<SpeakerInterpretation>,
}

pub fn decision_threshold(cfg: &RunConfig, prevalence: f64) -> f64 {
    cfg.eval.decision_threshold.unwrap_or(prevalence)
}

/// Explains each speaker's thresholded prediction: depressed for predicted
/// positives, normal for predicted negatives.
pub fn interpret_speaker(
    model: &Model<f32>,
    sp: &PreparedSpeaker,
    threshold: f64,
    icfg: &InterpretConfig,
    dsp: &DspConfig,
) -> Result<SpeakerInterpretation> {
    let score = model.score(&sp.input)?;
    let predicted = usize::from(score >= threshold);
    let cfg = InterpretConfig {
        target_class: Some(predicted),
        ..*icfg
    };
    let result = interpret(model, &sp.input, &cfg, dsp)?;
    Ok(SpeakerInterpretation {
        speaker_id: sp.speaker_id.clone(),
        label: sp.label,
        score,
        outcome: Outcome::of(sp.label, predicted),
        marked_in_top: result.top_sentences.iter().filter(|&&j| sp.marked.get(j) == Some(&true)).count(),
        spans_ms: result.spans_ms(dsp.sample_rate),
        result,
    })
}

pub fn interpret_cohort(cfg: &RunConfig, speech: &Model<f32>, dev: &[PreparedSpeaker], prevalence: f64) -> Result<InterpretReport> {
    let threshold = decision_threshold(cfg, prevalence);
    let speakers = dev
        .iter()
        .map(|s| interpret_speaker(speech, s, threshold, &cfg.interpret, &cfg.dsp))
        .collect::<Result<Vec<_>>>()?;
    let count = |o: Outcome| speakers.iter().filter(|s| s.outcome == o).count();
    let tps: Vec<f64> = speakers
        .iter()
        .filter(|s| s.outcome == Outcome::TP && !s.result.top_sentences.is_empty())
        .map(|s| s.marked_in_top as f64 / s.result.top_sentences.len() as f64)
        .collect();
    let summary = InterpretSummary {
        threshold,
        k: cfg.interpret.k,
        tau: cfg.interpret.tau,
        n_tp: count(Outcome::TP),
        n_tn: count(Outcome::TN),
        n_fp: count(Outcome::FP),
        n_fn: count(Outcome::FN),
        tp_marked_precision: (!tps.is_empty()).then(|| tps.iter().sum::<f64>() / tps.len() as f64),
        chance_precision: cfg.synth.marker_density,
    };
    Ok(InterpretReport {
        provenance: cfg.provenance(),
        summary,
        speakers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub provenance: Provenance,
    /// Decision threshold behind the outcomes, when known.
    pub threshold: Option<f64>,
    pub n_rows: usize,
    pub n_empty_spans: usize,
    pub comparison: FeatureComparison,
}

pub fn feature_rows(
    cfg: &RunConfig,
    speech: &Model<f32>,
    corpus: &Corpus,
    dev: &[PreparedSpeaker],
    prevalence: f64,
) -> Result<Vec<AcousticFeatureRow>> {
    let frontend = MelFrontend::new(&cfg.dsp)?;
    let speakers: Vec<CohortSpeaker<'_>> = dev
        .iter()
        .map(|s| CohortSpeaker {
            speaker_id: &s.speaker_id,
            label: s.label,
            covariate: s.covariate,
            input: &s.input,
            waveforms: corpus.speeches[s.corpus_index].sentences.iter().map(|x| &x.waveform).collect(),
        })
        .collect();
    cohort_feature_table(speech, &speakers, decision_threshold(cfg, prevalence), &cfg.interpret, &frontend)
}

pub fn feature_report(cfg: &RunConfig, rows: &[AcousticFeatureRow], threshold: Option<f64>) -> Result<FeatureReport> {
    Ok(FeatureReport {
        provenance: cfg.provenance(),
        threshold,
        n_rows: rows.len(),
        n_empty_spans: rows.iter().filter(|r| r.empty_spans).count(),
        comparison: compare_features(rows, cfg.eval.alpha, cfg.eval.bonferroni_m)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbReport {
    pub provenance: Provenance,
    pub suite: PerturbationSuite,
}

pub fn perturb(cfg: &RunConfig, speech: &Model<f32>, dev: &[PreparedSpeaker], prevalence: f64) -> Result<PerturbReport> {
    let dev: Vec<LabeledSpeech> = dev.iter().map(PreparedSpeaker::labeled).collect();
    let threshold = decision_threshold(cfg, prevalence);
    Ok(PerturbReport {
        provenance: cfg.provenance(),
        suite: perturbation_suite(speech, &dev, threshold, &cfg.perturb)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub n_speakers: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub prevalence: f64,
    pub sentences_per_speaker: usize,
    pub marked_per_depressed_speaker: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub speech: TrainMeta,
    pub segment: TrainMeta,
}

/// Everything a run reports, in one deterministic document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub provenance: Provenance,
    pub config: RunConfig,
    pub corpus: CorpusSummary,
    pub training: TrainingSummary,
    pub evaluation: EvaluationReport,
    pub interpretation: InterpretSummary,
    pub features: FeatureReport,
    pub perturbation: PerturbationSuite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synth,
    Train,
    Evaluate,
    Interpret,
    Features,
    Perturb,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Synth,
        Stage::Train,
        Stage::Evaluate,
        Stage::Interpret,
        Stage::Features,
        Stage::Perturb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Interpret => "interpret",
            Stage::Features => "features",
            Stage::Perturb => "perturb",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Progress marker kept next to the artifacts; a failed run names the stage
/// that failed and keeps everything written before it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub provenance: Option<Provenance>,
    pub completed: Vec<String>,
    pub failed: Option<StageFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub error: String,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

/// Artifacts of one run directory, loaded lazily by single-stage runs.
struct Run<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    frontend: MelFrontend,
    corpus: Option<Corpus>,
    data: Option<PreparedCorpus>,
    models: [Option<Model<f32>>; 2],
    metas: [Option<TrainMeta>; 2],
    status: Status,
}

fn slot(v: Variant) -> usize {
    match v {
        Variant::Speech => 0,
        Variant::Segment => 1,
    }
}

impl<'a> Run<'a> {
    fn corpus(&mut self) -> Result<&Corpus> {
        if self.corpus.is_none() {
            self.corpus = Some(Corpus::read(&self.out.join(CORPUS_DIR))?);
        }
        Ok(self.corpus.as_ref().expect("loaded"))
    }

    fn data(&mut self) -> Result<()> {
        if self.data.is_none() {
            self.corpus()?;
            let corpus = self.corpus.as_ref().expect("loaded");
            self.data = Some(prepare(corpus, &self.frontend)?);
        }
        Ok(())
    }

    fn model(&mut self, v: Variant) -> Result<()> {
        if self.models[slot(v)].is_none() {
            let ck = Checkpoint::load(&self.out.join(checkpoint_file(v)))?;
            self.metas[slot(v)] = Some(ck.meta.clone());
            self.models[slot(v)] = Some(ck.to_model()?);
        }
        Ok(())
    }

    fn run_stage(&mut self, stage: Stage, variant: Option<Variant>) -> Result<Option<StageOutput>> {
        let cfg = self.cfg;
        match stage {
            Stage::Synth => {
                let corpus = synthesize(cfg)?;
                corpus.write(&self.out.join(CORPUS_DIR))?;
                // Later stages read the written corpus back, so they see the
                // 16-bit samples every single-stage run sees.
                self.corpus = None;
                self.data = None;
                Ok(None)
            }
            Stage::Train => {
                self.data()?;
                let variants = match variant {
                    Some(v) => vec![v],
                    None => vec![Variant::Speech, Variant::Segment],
                };
                for v in variants {
                    let ck = train_variant(cfg, self.data.as_ref().expect("loaded"), v)?;
                    ck.save(&self.out.join(checkpoint_file(v)))?;
                    self.metas[slot(v)] = Some(ck.meta.clone());
                    self.models[slot(v)] = Some(ck.to_model()?);
                }
                Ok(None)
            }
            Stage::Evaluate => {
                self.data()?;
                self.model(Variant::Speech)?;
                self.model(Variant::Segment)?;
                let [Some(speech), Some(segment)] = &self.models else { unreachable!() };
                let rep = evaluate(cfg, &self.data.as_ref().expect("loaded").dev, segment, speech)?;
                write_json(&self.out.join(EVALUATION_FILE), &rep)?;
                Ok(Some(StageOutput::Evaluation(rep)))
            }
            Stage::Interpret => {
                self.data()?;
                self.model(Variant::Speech)?;
                let data = self.data.as_ref().expect("loaded");
                let speech = self.models[0].as_ref().expect("loaded");
                let rep = interpret_cohort(cfg, speech, &data.dev, data.prevalence)?;
                write_json(&self.out.join(INTERPRETATIONS_FILE), &rep)?;
                Ok(Some(StageOutput::Interpret(rep.summary)))
            }
            Stage::Features => {
                self.data()?;
                self.model(Variant::Speech)?;
                let data = self.data.as_ref().expect("loaded");
                let corpus = self.corpus.as_ref().expect("loaded");
                let speech = self.models[0].as_ref().expect("loaded");
                let rows = feature_rows(cfg, speech, corpus, &data.dev, data.prevalence)?;
                write_feature_csv(&rows, &self.out.join(FEATURES_FILE), Some(&cfg.provenance()))?;
                let rep = feature_report(cfg, &rows, Some(decision_threshold(cfg, data.prevalence)))?;
                write_json(&self.out.join(SIGNIFICANCE_FILE), &rep)?;
                Ok(Some(StageOutput::Features(rep)))
            }
            Stage::Perturb => {
                self.data()?;
                self.model(Variant::Speech)?;
                let data = self.data.as_ref().expect("loaded");
                let speech = self.models[0].as_ref().expect("loaded");
                let rep = perturb(cfg, speech, &data.dev, data.prevalence)?;
                write_json(&self.out.join(PERTURBATION_FILE), &rep)?;
                Ok(Some(StageOutput::Perturb(rep.suite)))
            }
        }
    }

    fn mark(&mut self, stage: Stage, outcome: &Result<Option<StageOutput>>) -> Result<()> {
        match outcome {
            Ok(_) => self.status.completed.push(stage.name().to_string()),
            Err(e) => {
                self.status.failed = Some(StageFailure {
                    stage: stage.name().to_string(),
                    error: e.to_string(),
                })
            }
        }
        write_json(&self.out.join(STATUS_FILE), &self.status)
    }
}

enum StageOutput {
    Evaluation(EvaluationReport),
    Interpret(InterpretSummary),
    Features(FeatureReport),
    Perturb(PerturbationSuite),
}

/// Runs one stage (`only`) against artifacts already in `out`, or the whole
/// pipeline. A full run returns and writes the summary.
pub fn run_pipeline(cfg: &RunConfig, out: &Path, only: Option<Stage>, variant: Option<Variant>) -> Result<Option<Summary>> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut run = Run {
        cfg,
        out,
        frontend: MelFrontend::new(&cfg.dsp)?,
        corpus: None,
        data: None,
        models: [None, None],
        metas: [None, None],
        status: Status {
            provenance: Some(cfg.provenance()),
            ..Status::default()
        },
    };
    if variant.is_some() && only != Some(Stage::Train) {
        return Err(Error::Config("a variant only applies to the train stage".into()));
    }
    if let Some(stage) = only {
        let res = run.run_stage(stage, variant);
        run.mark(stage, &res)?;
        res?;
        return Ok(None);
    }

    let mut evaluation = None;
    let mut interpretation = None;
    let mut features = None;
    let mut perturbation = None;
    for stage in Stage::ALL {
        log::info!("stage {}", stage.name());
        let res = run.run_stage(stage, None);
        run.mark(stage, &res)?;
        match res? {
            Some(StageOutput::Evaluation(r)) => evaluation = Some(r),
            Some(StageOutput::Interpret(r)) => interpretation = Some(r),
            Some(StageOutput::Features(r)) => features = Some(r),
            Some(StageOutput::Perturb(r)) => perturbation = Some(r),
            None => {}
        }
    }
    let corpus = run.corpus.as_ref().expect("synthesized");
    let data = run.data.as_ref().expect("prepared");
    let [Some(speech_meta), Some(segment_meta)] = run.metas.clone() else {
        unreachable!("both variants trained")
    };
    let summary = Summary {
        provenance: cfg.provenance(),
        config: cfg.canonical(),
        corpus: CorpusSummary {
            n_speakers: corpus.speeches.len(),
            n_train: data.train.len(),
            n_dev: data.dev.len(),
            prevalence: data.prevalence,
            sentences_per_speaker: cfg.synth.sentences_per_speaker,
            marked_per_depressed_speaker: cfg.synth.marked_count(cfg.synth.sentences_per_speaker),
        },
        training: TrainingSummary {
            speech: speech_meta,
            segment: segment_meta,
        },
        evaluation: evaluation.expect("evaluated"),
        interpretation: interpretation.expect("interpreted"),
        features: features.expect("features"),
        perturbation: perturbation.expect("perturbed"),
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(Some(summary))
}
