//! Interpretable acoustic descriptors measured over relevant waveform spans.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::{frame_sample_span, DspConfig, MelFrontend, Waveform};
use crate::error::{Error, Result};
use crate::model::{Model, SpeechInput};
use crate::provenance::Provenance;
use crate::relevancy::{interpret, InterpretConfig};
use crate::stats::{bonferroni_thresholds, mann_whitney_u, residualize_standardize, tier, Tier};

/// Half-open sample range `[start, end)`.
pub type Span = (usize, usize);

pub const LOUDNESS_FLOOR_DB: f64 = -120.0;
pub const F0_MIN_HZ: f64 = 50.0;
pub const F0_MAX_HZ: f64 = 400.0;
pub const VOICING_THRESHOLD: f64 = 0.5;

/// Union of the sample spans of `frames`, sorted, with touching spans merged.
pub fn merge_spans(frames: &[usize], valid_frames: usize, cfg: &DspConfig) -> Result<Vec<Span>> {
    let mut spans = frames
        .iter()
        .map(|&f| frame_sample_span(f, valid_frames, cfg))
        .collect::<Result<Vec<_>>>()?;
    spans.sort_unstable();
    let mut merged: Vec<Span> = Vec::with_capacity(spans.len());
    for (s, e) in spans {
        match merged.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    Ok(merged)
}

fn span_slice<'a>(w: &'a Waveform, span: Span) -> Result<&'a [f32]> {
    let (s, e) = span;
    if s >= e {
        return Err(Error::InvalidArgument(format!("empty span [{s}, {e})")));
    }
    if e > w.len() {
        return Err(Error::InvalidArgument(format!(
            "span [{s}, {e}) exceeds waveform of {} samples",
            w.len()
        )));
    }
    Ok(&w.samples[s..e])
}

/// RMS level in dBFS, floored at -120 dB.
pub fn rms_loudness_db(w: &Waveform, span: Span) -> Result<f64> {
    let x = span_slice(w, span)?;
    let ms = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64;
    Ok(20.0 * ms.sqrt().max(1e-6).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitchEstimate {
    /// `None` when the autocorrelation peak is below the voicing threshold.
    pub f0_hz: Option<f64>,
    /// Normalized autocorrelation at the chosen lag.
    pub confidence: f64,
}

/// Normalized-autocorrelation pitch estimate over a span of at least 40 ms.
///
/// The shortest-lag local maximum within 90% of the global peak is taken, which
/// keeps strong upper harmonics and sub-octave repeats from winning.
pub fn f0_autocorr(w: &Waveform, span: Span) -> Result<PitchEstimate> {
    let x = span_slice(w, span)?;
    let sr = w.sample_rate as f64;
    let min_len = (0.040 * sr).round() as usize;
    if x.len() < min_len {
        return Err(Error::InvalidArgument(format!(
            "pitch span of {} samples is shorter than 40 ms",
            x.len()
        )));
    }
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64;
    let x: Vec<f64> = x.iter().map(|&v| v as f64 - mean).collect();
    let n = x.len();
    let min_lag = (sr / F0_MAX_HZ).floor() as usize;
    let max_lag = ((sr / F0_MIN_HZ).ceil() as usize).min(n - 1);

    // prefix energy for the per-lag normalization
    let mut cum = vec![0.0; n + 1];
    for i in 0..n {
        cum[i + 1] = cum[i] + x[i] * x[i];
    }
    // one extra lag on each side for the parabolic fit
    let lo = min_lag.saturating_sub(1).max(1);
    let hi = (max_lag + 1).min(n - 1);
    let mut r = vec![0.0; hi + 1];
    for lag in lo..=hi {
        let dot: f64 = x[..n - lag].iter().zip(&x[lag..]).map(|(a, b)| a * b).sum();
        let e0 = cum[n - lag];
        let e1 = cum[n] - cum[lag];
        let denom = (e0 * e1).sqrt();
        r[lag] = if denom > 0.0 { dot / denom } else { 0.0 };
    }
    let search = min_lag.max(lo + 1)..=max_lag.min(hi - 1);
    let best = search
        .clone()
        .map(|l| r[l])
        .fold(f64::NEG_INFINITY, f64::max);
    if !(best > 0.0) {
        return Ok(PitchEstimate {
            f0_hz: None,
            confidence: best.max(0.0),
        });
    }
    let lag = search
        .clone()
        .find(|&l| r[l] >= 0.9 * best && r[l] >= r[l - 1] && r[l] >= r[l + 1])
        .unwrap_or_else(|| search.clone().max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap());
    let peak = r[lag];
    let (y0, y1, y2) = (r[lag - 1], r[lag], r[lag + 1]);
    let curv = y0 - 2.0 * y1 + y2;
    let offset = if curv < 0.0 {
        (0.5 * (y0 - y2) / curv).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let f0 = sr / (lag as f64 + offset);
    Ok(PitchEstimate {
        f0_hz: (peak >= VOICING_THRESHOLD).then_some(f0),
        confidence: peak,
    })
}

/// Zero crossings per second.
pub fn zero_crossing_rate(w: &Waveform, span: Span) -> Result<f64> {
    let x = span_slice(w, span)?;
    let crossings = x
        .windows(2)
        .filter(|p| (p[0] >= 0.0) != (p[1] >= 0.0))
        .count();
    Ok(crossings as f64 * w.sample_rate as f64 / x.len() as f64)
}

/// Power-weighted mean frequency over the analysis frames inside `span`.
pub fn spectral_centroid_hz(frontend: &MelFrontend, w: &Waveform, span: Span) -> Result<f64> {
    let x = span_slice(w, span)?;
    let cfg = frontend.config();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let (mut num, mut den) = (0.0, 0.0);
    let mut visit = |frame: &[f32]| {
        for (k, p) in frontend.power_spectrum(frame).iter().enumerate() {
            num += k as f64 * bin_hz * p;
            den += p;
        }
    };
    if x.len() < cfg.win_length {
        visit(x);
    } else {
        for t in 0..cfg.frame_count(x.len()) {
            let s = t * cfg.hop_length;
            visit(&x[s..s + cfg.win_length]);
        }
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Aggregated descriptors over a set of spans from one or more waveforms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanFeatures {
    pub loudness_db: f64,
    pub f0_hz: Option<f64>,
    pub voiced_fraction: f64,
    pub spectral_centroid_hz: f64,
    pub zcr: f64,
    pub total_span_ms: f64,
}

/// Measures loudness, pitch, centroid and ZCR over every `(waveform, span)`.
///
/// Loudness is the RMS level of all span samples pooled; pitch is the mean over
/// voiced 40 ms windows (20 ms hop); centroid and ZCR are length-weighted means.
/// Returns `None` when there are no spans.
pub fn span_features(
    frontend: &MelFrontend,
    spans: &[(&Waveform, Span)],
) -> Result<Option<SpanFeatures>> {
    if spans.is_empty() {
        return Ok(None);
    }
    let (mut sq, mut n_samples) = (0.0, 0usize);
    let (mut centroid, mut zcr) = (0.0, 0.0);
    let (mut f0_sum, mut voiced, mut windows) = (0.0, 0usize, 0usize);
    let mut total_ms = 0.0;
    for &(w, span) in spans {
        let x = span_slice(w, span)?;
        let len = x.len();
        sq += x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        n_samples += len;
        centroid += spectral_centroid_hz(frontend, w, span)? * len as f64;
        zcr += zero_crossing_rate(w, span)? * len as f64;
        total_ms += len as f64 * 1000.0 / w.sample_rate as f64;

        let win = (0.040 * w.sample_rate as f64).round() as usize;
        let hop = win / 2;
        let mut s = span.0;
        while s + win <= span.1 {
            let est = f0_autocorr(w, (s, s + win))?;
            windows += 1;
            if let Some(f0) = est.f0_hz {
                f0_sum += f0;
                voiced += 1;
            }
            s += hop;
        }
    }
    let rms = (sq / n_samples as f64).sqrt();
    Ok(Some(SpanFeatures {
        loudness_db: 20.0 * rms.max(1e-6).log10(),
        f0_hz: (voiced > 0).then(|| f0_sum / voiced as f64),
        voiced_fraction: if windows > 0 {
            voiced as f64 / windows as f64
        } else {
            0.0
        },
        spectral_centroid_hz: centroid / n_samples as f64,
        zcr: zcr / n_samples as f64,
        total_span_ms: total_ms,
    }))
}

/// Classification outcome at a fixed decision threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    TP,
    TN,
    FP,
    FN,
}

impl Outcome {
    pub fn of(label: usize, predicted: usize) -> Self {
        match (label, predicted) {
            (1, 1) => Outcome::TP,
            (0, 0) => Outcome::TN,
            (0, _) => Outcome::FP,
            _ => Outcome::FN,
        }
    }
}

/// One speaker's features over the relevant spans of its top sentences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticFeatureRow {
    pub speaker_id: String,
    pub outcome: Outcome,
    pub label: u8,
    pub score: f64,
    pub covariate: u8,
    pub loudness_db: Option<f64>,
    pub f0_hz: Option<f64>,
    pub voiced_fraction: Option<f64>,
    pub spectral_centroid_hz: Option<f64>,
    pub zcr: Option<f64>,
    pub total_span_ms: f64,
    /// No relevant frames were found; the row is excluded from comparisons.
    pub empty_spans: bool,
}

pub const FEATURE_NAMES: [&str; 5] = ["loudness_db", "f0_hz", "voiced_fraction", "spectral_centroid_hz", "zcr"];

impl AcousticFeatureRow {
    pub fn feature(&self, name: &str) -> Option<f64> {
        match name {
            "loudness_db" => self.loudness_db,
            "f0_hz" => self.f0_hz,
            "voiced_fraction" => self.voiced_fraction,
            "spectral_centroid_hz" => self.spectral_centroid_hz,
            "zcr" => self.zcr,
            _ => None,
        }
    }
}

/// Everything the cohort table needs about one speaker.
pub struct CohortSpeaker<'a> {
    pub speaker_id: &'a str,
    pub label: usize,
    pub covariate: u8,
    pub input: &'a SpeechInput,
    /// Sentence waveforms, aligned with `input.sentences`.
    pub waveforms: Vec<&'a Waveform>,
}

/// Classifies each speaker at `threshold`, explains the predicted class and
/// measures the relevant spans of the top-k sentences.
pub fn cohort_feature_table(
    model: &Model<f32>,
    speakers: &[CohortSpeaker<'_>],
    threshold: f64,
    icfg: &InterpretConfig,
    frontend: &MelFrontend,
) -> Result<Vec<AcousticFeatureRow>> {
    let dsp = frontend.config();
    let mut rows = Vec::with_capacity(speakers.len());
    for sp in speakers {
        if sp.waveforms.len() != sp.input.sentences.len() {
            return Err(Error::Shape(format!("{}: waveforms and sentences differ in count", sp.speaker_id)));
        }
        let score = model.score(sp.input)?;
        let predicted = usize::from(score >= threshold);
        let cfg = InterpretConfig {
            target_class: Some(predicted),
            ..*icfg
        };
        let res = interpret(model, sp.input, &cfg, dsp)?;
        let spans: Vec<(&Waveform, Span)> = res
            .sentences
            .iter()
            .flat_map(|s| s.spans.iter().map(move |&span| (sp.waveforms[s.index], span)))
            .collect();
        let f = span_features(frontend, &spans)?;
        rows.push(AcousticFeatureRow {
            speaker_id: sp.speaker_id.to_string(),
            outcome: Outcome::of(sp.label, predicted),
            label: sp.label as u8,
            score,
            covariate: sp.covariate,
            loudness_db: f.map(|f| f.loudness_db),
            f0_hz: f.and_then(|f| f.f0_hz),
            voiced_fraction: f.map(|f| f.voiced_fraction),
            spectral_centroid_hz: f.map(|f| f.spectral_centroid_hz),
            zcr: f.map(|f| f.zcr),
            total_span_ms: f.map_or(0.0, |f| f.total_span_ms),
            empty_spans: f.is_none(),
        });
    }
    Ok(rows)
}

/// Writes the table with one header row. `provenance`, when given, goes on a
/// leading `#` comment line.
pub fn write_feature_csv(rows: &[AcousticFeatureRow], path: &Path, provenance: Option<&Provenance>) -> Result<()> {
    let mut file = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    if let Some(p) = provenance {
        writeln!(file, "# config_hash={} seed={}", p.config_hash, p.seed).map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_feature_csv(path: &Path) -> Result<Vec<AcousticFeatureRow>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::format(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format(path, e))
}

/// TP-vs-TN comparison of one residualised, standardised feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTest {
    pub feature: String,
    pub n_tp: usize,
    pub n_tn: usize,
    pub tp_mean: f64,
    pub tn_mean: f64,
    pub u: f64,
    pub p_value: f64,
    pub tier: Tier,
    /// Plot-ready per-speaker values.
    pub tp_values: Vec<f64>,
    pub tn_values: Vec<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureComparison {
    pub m: usize,
    pub alpha: f64,
    pub thresholds: [f64; 3],
    pub tests: Vec<FeatureTest>,
}

impl FeatureComparison {
    pub fn test(&self, feature: &str) -> Option<&FeatureTest> {
        self.tests.iter().find(|t| t.feature == feature)
    }
}

/// Mann-Whitney U per feature between true positives and true negatives,
/// after removing the covariate's group means and standardising over both
/// groups. Tiers use `m` comparisons (default: number of features).
pub fn compare_features(rows: &[AcousticFeatureRow], alpha: f64, m: Option<usize>) -> Result<FeatureComparison> {
    let m = m.unwrap_or(FEATURE_NAMES.len());
    let thresholds = bonferroni_thresholds(m, alpha);
    let mut tests = Vec::new();
    for name in FEATURE_NAMES {
        let used: Vec<(&AcousticFeatureRow, f64)> = rows
            .iter()
            .filter(|r| !r.empty_spans && matches!(r.outcome, Outcome::TP | Outcome::TN))
            .filter_map(|r| r.feature(name).map(|v| (r, v)))
            .collect();
        let values: Vec<f64> = used.iter().map(|(_, v)| *v).collect();
        let cov: Vec<u8> = used.iter().map(|(r, _)| r.covariate).collect();
        let mut test = FeatureTest {
            feature: name.to_string(),
            n_tp: used.iter().filter(|(r, _)| r.outcome == Outcome::TP).count(),
            n_tn: used.iter().filter(|(r, _)| r.outcome == Outcome::TN).count(),
            tp_mean: f64::NAN,
            tn_mean: f64::NAN,
            u: f64::NAN,
            p_value: 1.0,
            tier: Tier::NotSignificant,
            tp_values: Vec::new(),
            tn_values: Vec::new(),
            note: None,
        };
        match residualize_standardize(&values, &cov) {
            Err(e) => test.note = Some(e.to_string()),
            Ok(res) => {
                if res.degenerate {
                    test.note = Some("no residual variance".into());
                }
                for ((r, _), z) in used.iter().zip(&res.values) {
                    if r.outcome == Outcome::TP {
                        test.tp_values.push(*z);
                    } else {
                        test.tn_values.push(*z);
                    }
                }
                let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
                test.tp_mean = mean(&test.tp_values);
                test.tn_mean = mean(&test.tn_values);
                match mann_whitney_u(&test.tp_values, &test.tn_values) {
                    Ok(mw) => {
                        test.u = mw.u;
                        test.p_value = mw.p_value;
                        test.tier = tier(mw.p_value, thresholds);
                    }
                    Err(e) => test.note = Some(e.to_string()),
                }
            }
        }
        tests.push(test);
    }
    Ok(FeatureComparison {
        m,
        alpha,
        thresholds,
        tests,
    })
}
