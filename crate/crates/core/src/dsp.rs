//! Log-Mel frontend: Hamming-windowed STFT, HTK Mel filterbank, frame geometry.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono PCM signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        let w = Waveform {
            samples,
            sample_rate,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::InvalidArgument("empty waveform".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = self.samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_ms(&self) -> f64 {
        self.samples.len() as f64 * 1000.0 / self.sample_rate as f64
    }

    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 {
            return Err(Error::format(
                path,
                format!(
                    "expected 16-bit mono PCM, got {} channel(s) at {} bits",
                    spec.channels, spec.bits_per_sample
                ),
            ));
        }
        if spec.sample_rate != SAMPLE_RATE {
            return Err(Error::format(
                path,
                format!("expected {SAMPLE_RATE} Hz, got {}", spec.sample_rate),
            ));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| wav_error(path, e))?;
        Waveform::new(samples, spec.sample_rate).map_err(|e| Error::format(path, e))
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
        for &s in &self.samples {
            let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(q).map_err(|e| wav_error(path, e))?;
        }
        writer.finalize().map_err(|e| wav_error(path, e))
    }
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub target_frames: usize,
    /// Standardize model inputs with train-split mean/std.
    pub standardize: bool,
}

impl Default for DspConfig {
    fn default() -> Self {
        DspConfig {
            sample_rate: SAMPLE_RATE,
            win_length: 400,
            hop_length: 160,
            n_fft: 512,
            n_mels: 128,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
            target_frames: 256,
            standardize: false,
        }
    }
}

impl DspConfig {
    pub fn paper_scale() -> Self {
        DspConfig {
            target_frames: 1024,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.sample_rate == 0 || self.hop_length == 0 || self.win_length == 0 {
            return bad("sample_rate, hop_length and win_length must be positive");
        }
        if self.win_length > self.n_fft {
            return bad("win_length must not exceed n_fft");
        }
        if self.fmax > self.sample_rate as f64 / 2.0 || self.fmin < 0.0 || self.fmin >= self.fmax
        {
            return bad("need 0 <= fmin < fmax <= sample_rate/2");
        }
        if self.n_mels == 0 {
            return bad("n_mels must be positive");
        }
        if self.target_frames == 0 || self.target_frames % 2 != 0 {
            return bad("target_frames must be a positive even number");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }

    /// Value written into padded columns; identical to a floored silent cell.
    pub fn pad_value(&self) -> f32 {
        self.log_floor.ln() as f32
    }

    /// Number of analysis frames for `len` samples (no centering).
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.win_length {
            0
        } else {
            1 + (len - self.win_length) / self.hop_length
        }
    }
}

/// Log-Mel matrix stored mel-major: `values[mel * n_frames + frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub n_mels: usize,
    pub n_frames: usize,
    pub valid_frames: usize,
    pub values: Vec<f32>,
}

impl MelSpectrogram {
    pub const FRAME_HOP_MS: f64 = 10.0;
    pub const FRAME_WIN_MS: f64 = 25.0;

    #[inline]
    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.n_frames + frame]
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.n_mels * self.n_frames {
            return Err(Error::Shape(format!(
                "{} values for {}x{} spectrogram",
                self.values.len(),
                self.n_mels,
                self.n_frames
            )));
        }
        if self.valid_frames == 0 || self.valid_frames > self.n_frames {
            return Err(Error::InvalidArgument(format!(
                "valid_frames {} outside 1..={}",
                self.valid_frames, self.n_frames
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite spectrogram cell".into()));
        }
        Ok(())
    }

    /// Header of three little-endian u32 (n_mels, n_frames, valid_frames), then
    /// little-endian f32 cells in row-major order.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for v in [self.n_mels, self.n_frames, self.valid_frames] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut word = [0u8; 4];
        let mut header = [0usize; 3];
        for h in header.iter_mut() {
            r.read_exact(&mut word)
                .map_err(|e| Error::InvalidArgument(format!("spectrogram header: {e}")))?;
            *h = u32::from_le_bytes(word) as usize;
        }
        let [n_mels, n_frames, valid_frames] = header;
        let mut values = Vec::with_capacity(n_mels * n_frames);
        for _ in 0..n_mels * n_frames {
            r.read_exact(&mut word)
                .map_err(|e| Error::InvalidArgument(format!("spectrogram body: {e}")))?;
            values.push(f32::from_le_bytes(word));
        }
        let spec = MelSpectrogram {
            n_mels,
            n_frames,
            valid_frames,
            values,
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub fn hamming_window(n: usize) -> Result<Vec<f64>> {
    match n {
        0 => Err(Error::InvalidArgument("window length must be >= 1".into())),
        1 => Ok(vec![1.0]),
        _ => {
            let denom = (n - 1) as f64;
            Ok((0..n)
                .map(|k| 0.54 - 0.46 * (2.0 * PI * k as f64 / denom).cos())
                .collect())
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters, peak weight 1, on the one-sided FFT grid.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// Center frequency of each filter in Hz.
    pub centers_hz: Vec<f64>,
    /// Per filter: first FFT bin and its weights.
    filters: Vec<(usize, Vec<f64>)>,
}

impl MelFilterbank {
    pub fn new(cfg: &DspConfig) -> Self {
        let n_bins = cfg.n_fft / 2 + 1;
        let lo = hz_to_mel(cfg.fmin);
        let hi = hz_to_mel(cfg.fmax);
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        let filters = (0..cfg.n_mels)
            .map(|m| {
                let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
                let mut first = None;
                let mut weights = Vec::new();
                for k in 0..n_bins {
                    let f = k as f64 * bin_hz;
                    let w = if f > left && f < center {
                        (f - left) / (center - left)
                    } else if f >= center && f < right {
                        (right - f) / (right - center)
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        first.get_or_insert(k);
                        weights.push(w);
                    } else if first.is_some() {
                        break;
                    }
                }
                (first.unwrap_or(0), weights)
            })
            .collect();
        MelFilterbank {
            centers_hz: edges[1..=cfg.n_mels].to_vec(),
            filters,
        }
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (o, (start, w)) in out.iter_mut().zip(&self.filters) {
            *o = w.iter().zip(&power[*start..]).map(|(a, b)| a * b).sum();
        }
    }
}

/// Reusable analysis state for one [`DspConfig`].
pub struct MelFrontend {
    cfg: DspConfig,
    window: Vec<f64>,
    bank: MelFilterbank,
    fft: Arc<dyn Fft<f64>>,
}

impl MelFrontend {
    pub fn new(cfg: &DspConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(MelFrontend {
            window: hamming_window(cfg.win_length)?,
            bank: MelFilterbank::new(cfg),
            fft: FftPlanner::new().plan_fft_forward(cfg.n_fft),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &DspConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    /// One-sided power spectrum |X_k|^2, k = 0..=n_fft/2, of a Hamming-windowed,
    /// zero-padded frame.
    pub fn power_spectrum(&self, frame: &[f32]) -> Vec<f64> {
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
            b.re = x as f64 * w;
        }
        self.fft.process(&mut buf);
        buf[..self.cfg.n_fft / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr())
            .collect()
    }

    /// Unpadded log-Mel spectrogram (`valid_frames == n_frames`).
    pub fn compute(&self, w: &Waveform) -> Result<MelSpectrogram> {
        w.validate()?;
        let cfg = &self.cfg;
        let n_frames = cfg.frame_count(w.len());
        if n_frames == 0 {
            return Err(Error::InvalidArgument(format!(
                "waveform of {} samples is shorter than one {}-sample window",
                w.len(),
                cfg.win_length
            )));
        }
        let mut values = vec![0f32; cfg.n_mels * n_frames];
        let mut mel = vec![0f64; cfg.n_mels];
        for t in 0..n_frames {
            let start = t * cfg.hop_length;
            let power = self.power_spectrum(&w.samples[start..start + cfg.win_length]);
            self.bank.apply(&power, &mut mel);
            for (m, e) in mel.iter().enumerate() {
                values[m * n_frames + t] = e.max(cfg.log_floor).ln() as f32;
            }
        }
        Ok(MelSpectrogram {
            n_mels: cfg.n_mels,
            n_frames,
            valid_frames: n_frames,
            values,
        })
    }
}

pub fn log_mel_spectrogram(w: &Waveform, cfg: &DspConfig) -> Result<MelSpectrogram> {
    MelFrontend::new(cfg)?.compute(w)
}

/// Right-pads with `pad_value` or right-truncates to exactly `target_frames` columns.
pub fn pad_or_truncate(spec: &MelSpectrogram, target_frames: usize, pad_value: f32) -> MelSpectrogram {
    if spec.n_frames == target_frames {
        return spec.clone();
    }
    let keep = spec.n_frames.min(target_frames);
    let mut values = vec![pad_value; spec.n_mels * target_frames];
    for m in 0..spec.n_mels {
        let src = &spec.values[m * spec.n_frames..m * spec.n_frames + keep];
        values[m * target_frames..m * target_frames + keep].copy_from_slice(src);
    }
    MelSpectrogram {
        n_mels: spec.n_mels,
        n_frames: target_frames,
        valid_frames: spec.valid_frames.min(target_frames),
        values,
    }
}

/// Waveform sample range `[start, end)` covered by analysis frame `frame_idx`.
pub fn frame_sample_span(
    frame_idx: usize,
    valid_frames: usize,
    cfg: &DspConfig,
) -> Result<(usize, usize)> {
    if frame_idx >= valid_frames {
        return Err(Error::InvalidArgument(format!(
            "frame {frame_idx} lies in padding (valid frames: {valid_frames})"
        )));
    }
    let start = frame_idx * cfg.hop_length;
    Ok((start, start + cfg.win_length))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tone(freq: f64, amp: f64, secs: f64) -> Waveform {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        let samples = (0..n)
            .map(|i| (amp * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin()) as f32)
            .collect();
        Waveform::new(samples, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn hamming_endpoints_and_midpoint() {
        let w = hamming_window(400).unwrap();
        assert!((w[0] - 0.08).abs() < 1e-12);
        let w = hamming_window(401).unwrap();
        assert!((w[200] - 1.0).abs() < 1e-12);
        assert_eq!(hamming_window(1).unwrap(), vec![1.0]);
        assert!(hamming_window(0).is_err());
    }

    #[test]
    fn hamming_sum_matches_closed_form() {
        // sum_k cos(2 pi k/(n-1)) over k = 0..n-1 equals 1 (the k = n-1 term
        // completes a full period), so the sum is 0.54 n - 0.46.
        let w = hamming_window(400).unwrap();
        let direct: f64 = w.iter().sum();
        assert!((direct - (0.54 * 400.0 - 0.46)).abs() < 1e-9);
        assert!((direct - 215.54).abs() < 1e-9);
    }

    #[test]
    fn half_second_gives_48_frames() {
        let w = Waveform::new(vec![0.0; 8000], SAMPLE_RATE).unwrap();
        let s = log_mel_spectrogram(&w, &DspConfig::default()).unwrap();
        assert_eq!(s.n_frames, 48);
        assert_eq!(s.valid_frames, 48);
        assert_eq!(s.n_mels, 128);
    }

    #[test]
    fn silence_hits_the_floor() {
        let w = Waveform::new(vec![0.0; 16000], SAMPLE_RATE).unwrap();
        let cfg = DspConfig::default();
        let s = log_mel_spectrogram(&w, &cfg).unwrap();
        let floor = (1e-10f64).ln() as f32;
        assert!(s.values.iter().all(|&v| v == floor));
        assert_eq!(cfg.pad_value(), floor);
    }

    #[test]
    fn too_short_is_rejected() {
        let w = Waveform::new(vec![0.1; 399], SAMPLE_RATE).unwrap();
        assert!(matches!(
            log_mel_spectrogram(&w, &DspConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn tone_peaks_at_nearest_center() {
        let cfg = DspConfig::default();
        let s = log_mel_spectrogram(&tone(1000.0, 0.5, 1.0), &cfg).unwrap();
        // centers from the HTK formula, computed independently of MelFilterbank
        let (lo, hi) = (0.0, 2595.0 * (1.0f64 + 8000.0 / 700.0).log10());
        let centers: Vec<f64> = (1..=128)
            .map(|i| {
                let mel = lo + (hi - lo) * i as f64 / 129.0;
                700.0 * (10f64.powf(mel / 2595.0) - 1.0)
            })
            .collect();
        let expected = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
            .unwrap()
            .0;
        let mean_energy: Vec<f64> = (0..128)
            .map(|m| (0..s.n_frames).map(|t| s.get(m, t) as f64).sum::<f64>())
            .collect();
        let argmax = mean_energy
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, expected);
    }

    #[test]
    fn pad_and_truncate_geometry() {
        let cfg = DspConfig::default();
        let w = Waveform::new(vec![0.01; 8000], SAMPLE_RATE).unwrap();
        let s = log_mel_spectrogram(&w, &cfg).unwrap();
        let p = pad_or_truncate(&s, 256, cfg.pad_value());
        assert_eq!((p.n_mels, p.n_frames, p.valid_frames), (128, 256, 48));
        for m in 0..128 {
            assert!((48..256).all(|t| p.get(m, t) == cfg.pad_value()));
            assert!((0..48).all(|t| p.get(m, t) == s.get(m, t)));
        }
        assert_eq!(pad_or_truncate(&s, 48, cfg.pad_value()), s);

        let long = MelSpectrogram {
            n_mels: 128,
            n_frames: 1500,
            valid_frames: 1500,
            values: vec![0.5; 128 * 1500],
        };
        let t = pad_or_truncate(&long, 1024, cfg.pad_value());
        assert_eq!((t.n_frames, t.valid_frames), (1024, 1024));
    }

    #[test]
    fn frame_spans() {
        let cfg = DspConfig::default();
        assert_eq!(frame_sample_span(0, 48, &cfg).unwrap(), (0, 400));
        assert_eq!(frame_sample_span(10, 48, &cfg).unwrap(), (1600, 2000));
        assert!(frame_sample_span(48, 48, &cfg).is_err());
    }

    #[test]
    fn parseval_against_direct_dft() {
        let cfg = DspConfig {
            win_length: 48,
            hop_length: 16,
            n_fft: 64,
            n_mels: 8,
            ..Default::default()
        };
        let fe = MelFrontend::new(&cfg).unwrap();
        let frame: Vec<f32> = (0..48).map(|i| ((i * 37 % 11) as f32 - 5.0) / 7.0).collect();
        let win = hamming_window(48).unwrap();
        let x: Vec<f64> = frame.iter().zip(&win).map(|(a, b)| *a as f64 * b).collect();
        let energy: f64 = x.iter().map(|v| v * v).sum();
        // direct O(N^2) DFT over the zero-padded frame
        let n = 64;
        let direct: Vec<f64> = (0..n)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, v) in x.iter().enumerate() {
                    let ang = -2.0 * PI * (k * t) as f64 / n as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                re * re + im * im
            })
            .collect();
        let one_sided = fe.power_spectrum(&frame);
        for k in 0..=n / 2 {
            assert!((one_sided[k] - direct[k]).abs() <= 1e-9 * (1.0 + direct[k]));
        }
        let total: f64 = one_sided[0]
            + one_sided[n / 2]
            + 2.0 * one_sided[1..n / 2].iter().sum::<f64>();
        assert!(((total / n as f64) - energy).abs() / energy < 1e-3);
    }

    #[test]
    fn serialization_round_trip() {
        let s = MelSpectrogram {
            n_mels: 2,
            n_frames: 3,
            valid_frames: 2,
            values: vec![1.0, -2.5, 3.0, 0.0, 1e-3, -23.0],
        };
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 24);
        assert_eq!(&buf[..4], &2u32.to_le_bytes());
        assert_eq!(MelSpectrogram::read_from(buf.as_slice()).unwrap(), s);
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let w = tone(200.0, 0.3, 0.1);
        w.write_wav(&path).unwrap();
        let r = Waveform::read_wav(&path).unwrap();
        assert_eq!(r.len(), w.len());
        assert!(r
            .samples
            .iter()
            .zip(&w.samples)
            .all(|(a, b)| (a - b).abs() < 1.0 / 16000.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn frame_count_formula(len in 400usize..20_000) {
            let cfg = DspConfig::default();
            let w = Waveform::new(vec![0.0; len], SAMPLE_RATE).unwrap();
            let s = log_mel_spectrogram(&w, &cfg).unwrap();
            prop_assert_eq!(s.n_frames, 1 + (len - 400) / 160);
        }

        #[test]
        fn louder_never_lowers_cells(scale in 1.0f32..8.0, seed in 0u64..1000) {
            let cfg = DspConfig::default();
            let fe = MelFrontend::new(&cfg).unwrap();
            let samples: Vec<f32> = (0..2000u64)
                .map(|i| (((i * 2654435761 + seed * 97) % 1000) as f32 / 1000.0 - 0.5) * 0.1)
                .collect();
            let a = fe.compute(&Waveform::new(samples.clone(), SAMPLE_RATE).unwrap()).unwrap();
            let b = fe
                .compute(&Waveform::new(samples.iter().map(|s| s * scale).collect(), SAMPLE_RATE).unwrap())
                .unwrap();
            let floor = cfg.pad_value();
            for (x, y) in a.values.iter().zip(&b.values) {
                if *x > floor {
                    prop_assert!(*y >= *x - 1e-5);
                }
            }
        }

        #[test]
        fn pad_idempotent(frames in 1usize..600, target in (1usize..400).prop_map(|t| t * 2)) {
            let s = MelSpectrogram {
                n_mels: 4,
                n_frames: frames,
                valid_frames: frames,
                values: (0..4 * frames).map(|i| i as f32).collect(),
            };
            let once = pad_or_truncate(&s, target, -23.0);
            prop_assert_eq!(once.n_frames, target);
            prop_assert_eq!(once.values.len(), 4 * target);
            prop_assert_eq!(once.valid_frames, frames.min(target));
            prop_assert_eq!(pad_or_truncate(&once, target, -23.0), once);
        }
    }
}
