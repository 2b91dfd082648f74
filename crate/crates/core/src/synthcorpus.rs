//! Synthetic labelled speech corpus with planted low-pitch, low-loudness markers.
//!
//! Each speaker talks in harmonic "sentences" (8 harmonics over a slowly
//! wandering F0). Depressed speakers carry markers in a random subset of their
//! sentences: F0 scaled by `marker_f0_ratio` and level dropped by
//! `marker_db_drop`. Normal speakers never carry markers.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::{MelFrontend, MelSpectrogram, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::provenance::Provenance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Depressed,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Depressed => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 1 {
            Label::Depressed
        } else {
            Label::Normal
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub prevalence: f64,
    pub sentences_per_speaker: usize,
    pub marker_density: f64,
    pub marker_f0_ratio: f64,
    pub marker_db_drop: f64,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    /// Lower edge of the base-F0 range for covariate group 0.
    pub f0_low_hz: f64,
    pub f0_range_hz: f64,
    /// Added to the base F0 of covariate group 1.
    pub covariate_f0_shift_hz: f64,
    pub loudness_db_mean: f64,
    /// Half-width of the uniform per-speaker loudness draw.
    pub loudness_db_spread: f64,
    /// Standard deviation of the per-sentence level jitter.
    pub sentence_jitter_db: f64,
    pub noise_rel_db: f64,
    pub fade_ms: f64,
    pub min_gap_ms: u64,
    pub max_gap_ms: u64,
    pub split_ratio: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_speakers: 200,
            prevalence: 0.527,
            sentences_per_speaker: 12,
            marker_density: 0.3,
            marker_f0_ratio: 0.8,
            marker_db_drop: 6.0,
            min_duration_s: 1.0,
            max_duration_s: 3.0,
            f0_low_hz: 110.0,
            f0_range_hz: 70.0,
            covariate_f0_shift_hz: 60.0,
            loudness_db_mean: -24.0,
            loudness_db_spread: 3.0,
            sentence_jitter_db: 1.0,
            noise_rel_db: -40.0,
            fade_ms: 20.0,
            min_gap_ms: 200,
            max_gap_ms: 600,
            split_ratio: 0.8,
        }
    }
}

impl SynthConfig {
    pub fn paper_scale() -> Self {
        SynthConfig {
            sentences_per_speaker: 42,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.n_speakers == 0 || self.sentences_per_speaker == 0 {
            return bad("n_speakers and sentences_per_speaker must be positive");
        }
        if !(0.0..=1.0).contains(&self.prevalence) || !(0.0..=1.0).contains(&self.marker_density)
        {
            return bad("prevalence and marker_density must lie in [0, 1]");
        }
        if !(0.5 <= self.min_duration_s
            && self.min_duration_s <= self.max_duration_s
            && self.max_duration_s <= 10.0)
        {
            return bad("sentence durations must satisfy 0.5 <= min <= max <= 10 s");
        }
        if self.marker_f0_ratio <= 0.0 || self.min_gap_ms > self.max_gap_ms {
            return bad("marker_f0_ratio must be positive and min_gap_ms <= max_gap_ms");
        }
        if !(0.0 < self.split_ratio && self.split_ratio < 1.0) {
            return bad("split_ratio must lie in (0, 1)");
        }
        Ok(())
    }

    /// Number of marked sentences for a depressed speaker with `n` sentences.
    pub fn marked_count(&self, n: usize) -> usize {
        if self.marker_density <= 0.0 {
            0
        } else {
            ((self.marker_density * n as f64).round() as usize).clamp(1, n)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub label: Label,
    pub sex_covariate: u8,
    pub base_f0: f64,
    pub base_loudness_db: f64,
    pub n_sentences: usize,
    pub marker_density: f64,
}

#[derive(Debug, Clone)]
pub struct Sentence {
    pub waveform: Waveform,
    pub start_ms: u64,
    pub end_ms: u64,
    pub marked: bool,
    spectrogram: OnceLock<MelSpectrogram>,
}

impl Sentence {
    pub fn new(waveform: Waveform, start_ms: u64, marked: bool) -> Self {
        let end_ms = start_ms + waveform.duration_ms().round() as u64;
        Sentence {
            waveform,
            start_ms,
            end_ms,
            marked,
            spectrogram: OnceLock::new(),
        }
    }

    /// Unpadded log-Mel spectrogram, computed on first use.
    pub fn spectrogram(&self, frontend: &MelFrontend) -> Result<&MelSpectrogram> {
        if let Some(s) = self.spectrogram.get() {
            return Ok(s);
        }
        let s = frontend.compute(&self.waveform)?;
        Ok(self.spectrogram.get_or_init(|| s))
    }
}

#[derive(Debug, Clone)]
pub struct Speech {
    pub sentences: Vec<Sentence>,
    pub profile: SpeakerProfile,
    pub split: Option<Split>,
}

impl Speech {
    pub fn label(&self) -> Label {
        self.profile.label
    }
}

/// Generates one sentence with timestamps starting at 0 ms.
pub fn synth_sentence(
    profile: &SpeakerProfile,
    marked: bool,
    duration_s: f64,
    cfg: &SynthConfig,
    rng: &mut impl Rng,
) -> Result<Sentence> {
    if !(0.5..=10.0).contains(&duration_s) {
        return Err(Error::InvalidArgument(format!(
            "sentence duration {duration_s} s outside [0.5, 10]"
        )));
    }
    let sr = SAMPLE_RATE as f64;
    let duration_ms = (duration_s * 1000.0).round() as usize;
    let n = duration_ms * SAMPLE_RATE as usize / 1000;

    // F0 contour: mean-reverting random walk, one knot per 10 ms, within +-3%.
    let step = Normal::new(0.0, 0.004).expect("valid normal");
    let n_knots = duration_ms / 10 + 2;
    let mut knots = Vec::with_capacity(n_knots);
    let mut dev = 0.0f64;
    for _ in 0..n_knots {
        knots.push(dev);
        dev = (0.98 * dev + step.sample(rng)).clamp(-0.03, 0.03);
    }
    let jitter_db = if cfg.sentence_jitter_db > 0.0 {
        Normal::new(0.0, cfg.sentence_jitter_db)
            .expect("valid normal")
            .sample(rng)
    } else {
        0.0
    };
    let noise: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();

    let ratio = if marked { cfg.marker_f0_ratio } else { 1.0 };
    let drop = if marked { cfg.marker_db_drop } else { 0.0 };
    let f0_base = profile.base_f0 * ratio;
    let mut phase = 0.0f64;
    let mut harmonic = vec![0.0f64; n];
    for (i, h) in harmonic.iter_mut().enumerate() {
        let pos = i as f64 / (sr * 0.010);
        let k = pos.floor() as usize;
        let frac = pos - k as f64;
        let d = knots[k] * (1.0 - frac) + knots[k + 1] * frac;
        let f0 = f0_base * (1.0 + d);
        *h = (1..=8)
            .filter(|&m| m as f64 * f0 < sr / 2.0)
            .map(|m| (m as f64 * phase).sin() / m as f64)
            .sum();
        phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
    }
    let rms = |x: &[f64]| (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    let target = 10f64.powf((profile.base_loudness_db + jitter_db - drop) / 20.0);
    let gain = target / rms(&harmonic).max(1e-12);
    let noise_gain = target * 10f64.powf(cfg.noise_rel_db / 20.0) / rms(&noise).max(1e-12);

    let fade = ((cfg.fade_ms / 1000.0 * sr) as usize).min(n / 2).max(1);
    let samples = (0..n)
        .map(|i| {
            let edge = i.min(n - 1 - i);
            let env = if edge < fade {
                0.5 - 0.5 * (PI * edge as f64 / fade as f64).cos()
            } else {
                1.0
            };
            ((harmonic[i] * gain + noise[i] * noise_gain) * env).clamp(-1.0, 1.0) as f32
        })
        .collect();
    Ok(Sentence::new(Waveform::new(samples, SAMPLE_RATE)?, 0, marked))
}

fn speaker_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const LABEL_STREAM: u64 = u64::MAX;
const SPLIT_STREAM: u64 = u64::MAX - 1;

fn speaker_id(i: usize) -> String {
    format!("spk{i:04}")
}

/// Generates one speaker's speech from its own `(seed, index)` stream.
pub fn synth_speech(profile: SpeakerProfile, index: usize, cfg: &SynthConfig, seed: u64) -> Result<Speech> {
    let mut rng = speaker_rng(seed, index as u64);
    let n = profile.n_sentences;
    let mut marked = vec![false; n];
    if profile.label == Label::Depressed {
        let k = cfg.marked_count(n);
        for i in rand::seq::index::sample(&mut rng, n, k) {
            marked[i] = true;
        }
    }
    let mut t = 0u64;
    let mut sentences = Vec::with_capacity(n);
    for &m in &marked {
        t += rng.random_range(cfg.min_gap_ms..=cfg.max_gap_ms);
        let dur = rng.random_range(cfg.min_duration_s..=cfg.max_duration_s);
        let mut s = synth_sentence(&profile, m, dur, cfg, &mut rng)?;
        let len_ms = s.end_ms - s.start_ms;
        s.start_ms = t;
        s.end_ms = t + len_ms;
        t = s.end_ms;
        sentences.push(s);
    }
    Ok(Speech {
        sentences,
        profile,
        split: None,
    })
}

/// Speaker profiles with exactly `round(prevalence * n)` depressed speakers.
pub fn draw_profiles(cfg: &SynthConfig, seed: u64) -> Vec<SpeakerProfile> {
    let mut rng = speaker_rng(seed, LABEL_STREAM);
    let n = cfg.n_speakers;
    let n_dep = (cfg.prevalence * n as f64).round() as usize;
    let mut labels: Vec<Label> = (0..n)
        .map(|i| if i < n_dep { Label::Depressed } else { Label::Normal })
        .collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let sex = rng.random_range(0..2u8);
            let base_f0 = cfg.f0_low_hz
                + rng.random_range(0.0..=cfg.f0_range_hz)
                + sex as f64 * cfg.covariate_f0_shift_hz;
            let base_loudness_db = cfg.loudness_db_mean
                + rng.random_range(-cfg.loudness_db_spread..=cfg.loudness_db_spread);
            SpeakerProfile {
                speaker_id: speaker_id(i),
                label,
                sex_covariate: sex,
                base_f0,
                base_loudness_db,
                n_sentences: cfg.sentences_per_speaker,
                marker_density: if label == Label::Depressed {
                    cfg.marker_density
                } else {
                    0.0
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub path: String,
    pub start_ms: u64,
    pub end_ms: u64,
    pub marked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerRecord {
    pub speaker_id: String,
    pub label: Label,
    pub covariate: u8,
    pub split: Option<Split>,
    pub sentences: Vec<SentenceRecord>,
    pub base_f0_hz: f64,
    pub base_loudness_db: f64,
    pub marker_density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub config: SynthConfig,
    pub speakers: Vec<SpeakerRecord>,
    pub provenance: Option<Provenance>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CORPUS_FILE: &str = "corpus.json";

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    seed: u64,
    config: SynthConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

impl CorpusManifest {
    /// Header JSON (seed + config) and the JSON Lines speaker records.
    pub fn to_strings(&self) -> (String, String) {
        let header = serde_json::to_string_pretty(&CorpusHeader {
            seed: self.seed,
            config: self.config.clone(),
            provenance: self.provenance.clone(),
        })
        .expect("serializable");
        let mut lines = String::new();
        for s in &self.speakers {
            lines.push_str(&serde_json::to_string(s).expect("serializable"));
            lines.push('\n');
        }
        (header, lines)
    }

    pub fn parse(header: &str, lines: &str) -> std::result::Result<Self, serde_json::Error> {
        let h: CorpusHeader = serde_json::from_str(header)?;
        let speakers = lines
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(CorpusManifest {
            seed: h.seed,
            config: h.config,
            speakers,
            provenance: h.provenance,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let (header, lines) = self.to_strings();
        let p = dir.join(CORPUS_FILE);
        fs::write(&p, header).map_err(|e| Error::io(&p, e))?;
        let p = dir.join(MANIFEST_FILE);
        let mut f = BufWriter::new(fs::File::create(&p).map_err(|e| Error::io(&p, e))?);
        f.write_all(lines.as_bytes())
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(&p, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(CORPUS_FILE);
        let header = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let p = dir.join(MANIFEST_FILE);
        let f = fs::File::open(&p).map_err(|e| Error::io(&p, e))?;
        let mut lines = String::new();
        for line in BufReader::new(f).lines() {
            lines.push_str(&line.map_err(|e| Error::io(&p, e))?);
            lines.push('\n');
        }
        Self::parse(&header, &lines).map_err(|e| Error::format(dir, e))
    }
}

/// In-memory corpus: speeches in speaker order plus their manifest.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub speeches: Vec<Speech>,
}

fn sentence_path(speaker: &str, j: usize) -> String {
    format!("wav/{speaker}/{j:03}.wav")
}

/// Generates all speakers and a stratified train/dev split. Deterministic in `seed`.
pub fn generate_corpus(cfg: &SynthConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let profiles = draw_profiles(cfg, seed);
    let speeches = profiles
        .into_iter()
        .enumerate()
        .map(|(i, p)| synth_speech(p, i, cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    let speakers = speeches
        .iter()
        .map(|s| SpeakerRecord {
            speaker_id: s.profile.speaker_id.clone(),
            label: s.profile.label,
            covariate: s.profile.sex_covariate,
            split: None,
            sentences: s
                .sentences
                .iter()
                .enumerate()
                .map(|(j, x)| SentenceRecord {
                    path: sentence_path(&s.profile.speaker_id, j),
                    start_ms: x.start_ms,
                    end_ms: x.end_ms,
                    marked: x.marked,
                })
                .collect(),
            base_f0_hz: s.profile.base_f0,
            base_loudness_db: s.profile.base_loudness_db,
            marker_density: s.profile.marker_density,
        })
        .collect();
    let mut manifest = CorpusManifest {
        seed,
        config: cfg.clone(),
        speakers,
        provenance: None,
    };
    let mut rng = speaker_rng(seed, SPLIT_STREAM);
    let report = split_corpus(&mut manifest, cfg.split_ratio, &mut rng)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let mut corpus = Corpus {
        manifest,
        speeches,
    };
    corpus.sync_splits();
    Ok(corpus)
}

impl Corpus {
    fn sync_splits(&mut self) {
        for (s, r) in self.speeches.iter_mut().zip(&self.manifest.speakers) {
            s.split = r.split;
        }
    }

    pub fn split(&self, which: Split) -> impl Iterator<Item = &Speech> {
        self.speeches.iter().filter(move |s| s.split == Some(which))
    }

    pub fn prevalence(&self) -> f64 {
        let dep = self
            .speeches
            .iter()
            .filter(|s| s.label() == Label::Depressed)
            .count();
        dep as f64 / self.speeches.len().max(1) as f64
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (speech, rec) in self.speeches.iter().zip(&self.manifest.speakers) {
            let spk_dir = dir.join("wav").join(&rec.speaker_id);
            fs::create_dir_all(&spk_dir).map_err(|e| Error::io(&spk_dir, e))?;
            for (s, r) in speech.sentences.iter().zip(&rec.sentences) {
                s.waveform.write_wav(&dir.join(&r.path))?;
            }
        }
        self.manifest.write(dir)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest = CorpusManifest::read(dir)?;
        let speeches = manifest
            .speakers
            .iter()
            .map(|rec| {
                let sentences = rec
                    .sentences
                    .iter()
                    .map(|r| {
                        let path: PathBuf = dir.join(&r.path);
                        let w = Waveform::read_wav(&path)?;
                        let mut s = Sentence::new(w, r.start_ms, r.marked);
                        s.end_ms = r.end_ms;
                        Ok(s)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Speech {
                    profile: SpeakerProfile {
                        speaker_id: rec.speaker_id.clone(),
                        label: rec.label,
                        sex_covariate: rec.covariate,
                        base_f0: rec.base_f0_hz,
                        base_loudness_db: rec.base_loudness_db,
                        n_sentences: sentences.len(),
                        marker_density: rec.marker_density,
                    },
                    sentences,
                    split: rec.split,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus { manifest, speeches })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitReport {
    pub n_train: usize,
    pub n_dev: usize,
    /// Only one class present.
    pub degenerate: bool,
    pub warnings: Vec<String>,
}

/// Speaker-disjoint train/dev split stratified on (label, covariate).
///
/// Strata with fewer than two speakers are pooled together. The train count is
/// `round(ratio * n)` overall, distributed over strata by largest remainder.
pub fn split_corpus(
    manifest: &mut CorpusManifest,
    ratio: f64,
    rng: &mut impl Rng,
) -> Result<SplitReport> {
    let n = manifest.speakers.len();
    if n < 10 {
        return Err(Error::InvalidArgument(format!(
            "need at least 10 speakers to split, got {n}"
        )));
    }
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut report = SplitReport::default();
    let mut strata: BTreeMap<(Label, u8), Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.speakers.iter().enumerate() {
        strata.entry((s.label, s.covariate)).or_default().push(i);
    }
    let classes: std::collections::BTreeSet<Label> =
        manifest.speakers.iter().map(|s| s.label).collect();
    if classes.len() < 2 {
        report.degenerate = true;
        report.warnings.push("split: only one class present".into());
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut pooled = Vec::new();
    for (key, members) in strata {
        if members.len() < 2 {
            report
                .warnings
                .push(format!("split: stratum {key:?} has {} speaker(s); pooled", members.len()));
            pooled.extend(members);
        } else {
            groups.push(members);
        }
    }
    if !pooled.is_empty() {
        groups.push(pooled);
    }

    let total_train = (ratio * n as f64).round() as usize;
    let quotas: Vec<f64> = groups.iter().map(|g| ratio * g.len() as f64).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut remaining = total_train.saturating_sub(alloc.iter().sum());
    for &g in order.iter().cycle().take(order.len() * 2) {
        if remaining == 0 {
            break;
        }
        if alloc[g] < groups[g].len() {
            alloc[g] += 1;
            remaining -= 1;
        }
    }

    for (members, k) in groups.iter_mut().zip(alloc) {
        members.shuffle(rng);
        for (pos, &i) in members.iter().enumerate() {
            manifest.speakers[i].split = Some(if pos < k { Split::Train } else { Split::Dev });
        }
    }
    report.n_train = manifest
        .speakers
        .iter()
        .filter(|s| s.split == Some(Split::Train))
        .count();
    report.n_dev = n - report.n_train;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustics::{f0_autocorr, rms_loudness_db};

    fn profile(base_f0: f64) -> SpeakerProfile {
        SpeakerProfile {
            speaker_id: "t".into(),
            label: Label::Depressed,
            sex_covariate: 0,
            base_f0,
            base_loudness_db: -24.0,
            n_sentences: 1,
            marker_density: 0.3,
        }
    }

    fn whole(s: &Sentence) -> (usize, usize) {
        (0, s.waveform.len())
    }

    #[test]
    fn pitch_follows_marker() {
        let cfg = SynthConfig::default();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plain = synth_sentence(&profile(150.0), false, 2.0, &cfg, &mut rng).unwrap();
            let f0 = f0_autocorr(&plain.waveform, whole(&plain)).unwrap().f0_hz.unwrap();
            assert!((f0 - 150.0).abs() <= 5.0, "{f0}");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let marked = synth_sentence(&profile(150.0), true, 2.0, &cfg, &mut rng).unwrap();
            let f0 = f0_autocorr(&marked.waveform, whole(&marked)).unwrap().f0_hz.unwrap();
            assert!((f0 - 120.0).abs() <= 5.0, "{f0}");
        }
    }

    #[test]
    fn marker_drops_level_by_six_db() {
        let cfg = SynthConfig::default();
        for seed in 0..5 {
            let a = synth_sentence(&profile(180.0), false, 1.5, &cfg, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap();
            let b = synth_sentence(&profile(180.0), true, 1.5, &cfg, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap();
            let d = rms_loudness_db(&a.waveform, whole(&a)).unwrap()
                - rms_loudness_db(&b.waveform, whole(&b)).unwrap();
            assert!((d - 6.0).abs() <= 0.5, "{d}");
        }
    }

    #[test]
    fn marked_twin_is_strictly_lower() {
        let cfg = SynthConfig::default();
        for seed in 0..20u64 {
            let p = profile(110.0 + 6.5 * seed as f64);
            let dur = 1.0 + 0.1 * seed as f64;
            let a = synth_sentence(&p, false, dur, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = synth_sentence(&p, true, dur, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let fa = f0_autocorr(&a.waveform, whole(&a)).unwrap().f0_hz.unwrap();
            let fb = f0_autocorr(&b.waveform, whole(&b)).unwrap().f0_hz.unwrap();
            assert!(fb < fa);
            assert!(rms_loudness_db(&b.waveform, whole(&b)).unwrap() < rms_loudness_db(&a.waveform, whole(&a)).unwrap());
        }
    }

    #[test]
    fn duration_bounds() {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(synth_sentence(&profile(150.0), false, 0.4, &cfg, &mut rng).is_err());
        let s = synth_sentence(&profile(150.0), false, 0.5, &cfg, &mut rng).unwrap();
        assert_eq!(s.waveform.len(), 8000);
        assert_eq!(s.end_ms - s.start_ms, 500);
    }

    #[test]
    fn prevalence_count() {
        let cfg = SynthConfig::default();
        let profiles = draw_profiles(&cfg, 3);
        let dep = profiles.iter().filter(|p| p.label == Label::Depressed).count();
        assert!(dep == 105 || dep == 106);
        assert!(profiles
            .iter()
            .filter(|p| p.label == Label::Normal)
            .all(|p| p.marker_density == 0.0));
    }

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_speakers: 20,
            sentences_per_speaker: 3,
            min_duration_s: 0.5,
            max_duration_s: 0.8,
            ..Default::default()
        }
    }

    #[test]
    fn corpus_is_deterministic_and_round_trips() {
        let cfg = small_cfg();
        let a = generate_corpus(&cfg, 11).unwrap();
        let b = generate_corpus(&cfg, 11).unwrap();
        assert_eq!(a.manifest.to_strings(), b.manifest.to_strings());
        let (h, l) = a.manifest.to_strings();
        assert_eq!(CorpusManifest::parse(&h, &l).unwrap(), a.manifest);

        for s in &a.speeches {
            for w in s.sentences.windows(2) {
                assert!(w[0].end_ms < w[1].start_ms);
            }
            let marked = s.sentences.iter().filter(|x| x.marked).count();
            match s.label() {
                Label::Normal => assert_eq!(marked, 0),
                Label::Depressed => assert_eq!(marked, cfg.marked_count(3)),
            }
        }

        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path()).unwrap();
        let back = Corpus::read(dir.path()).unwrap();
        assert_eq!(back.manifest, a.manifest);
        assert_eq!(back.speeches[3].sentences[1].waveform.len(), a.speeches[3].sentences[1].waveform.len());
        assert_eq!(back.speeches[3].split, a.speeches[3].split);
    }

    #[test]
    fn no_markers_without_density() {
        let cfg = SynthConfig {
            marker_density: 0.0,
            ..small_cfg()
        };
        let c = generate_corpus(&cfg, 1).unwrap();
        assert!(c.speeches.iter().all(|s| s.sentences.iter().all(|x| !x.marked)));
    }

    fn manifest_with(labels: &[(Label, u8)]) -> CorpusManifest {
        CorpusManifest {
            seed: 0,
            config: SynthConfig::default(),
            provenance: None,
            speakers: labels
                .iter()
                .enumerate()
                .map(|(i, &(label, covariate))| SpeakerRecord {
                    speaker_id: speaker_id(i),
                    label,
                    covariate,
                    split: None,
                    sentences: vec![],
                    base_f0_hz: 150.0,
                    base_loudness_db: -24.0,
                    marker_density: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn split_200_is_160_40_and_stratified() {
        let cfg = SynthConfig::default();
        for seed in 0..100u64 {
            let profiles = draw_profiles(&cfg, seed);
            let mut m = manifest_with(
                &profiles
                    .iter()
                    .map(|p| (p.label, p.sex_covariate))
                    .collect::<Vec<_>>(),
            );
            let r = split_corpus(&mut m, 0.8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!((r.n_train, r.n_dev), (160, 40));
            let frac = |f: &dyn Fn(&SpeakerRecord) -> bool, split: Option<Split>| {
                let members: Vec<_> = m
                    .speakers
                    .iter()
                    .filter(|s| split.is_none() || s.split == split)
                    .collect();
                members.iter().filter(|s| f(s)).count() as f64 / members.len() as f64
            };
            let is_dep = |s: &SpeakerRecord| s.label == Label::Depressed;
            let is_one = |s: &SpeakerRecord| s.covariate == 1;
            for split in [Some(Split::Train), Some(Split::Dev)] {
                assert!((frac(&is_dep, split) - frac(&is_dep, None)).abs() <= 0.05);
                assert!((frac(&is_one, split) - frac(&is_one, None)).abs() <= 0.05);
            }
        }
    }

    #[test]
    fn split_edge_cases() {
        let mut m = manifest_with(&[(Label::Normal, 0); 5]);
        assert!(split_corpus(&mut m, 0.8, &mut ChaCha8Rng::seed_from_u64(0)).is_err());

        let mut m = manifest_with(&[(Label::Normal, 0); 12]);
        let r = split_corpus(&mut m, 0.8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.n_train + r.n_dev, 12);

        let mut labels = vec![(Label::Normal, 0); 11];
        labels.push((Label::Depressed, 1));
        let mut m = manifest_with(&labels);
        let r = split_corpus(&mut m, 0.8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(!r.degenerate);
        assert_eq!(r.warnings.len(), 1);
        assert!(m.speakers.iter().all(|s| s.split.is_some()));
    }
}
