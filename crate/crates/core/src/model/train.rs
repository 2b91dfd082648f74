use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, TrainMeta};
use super::params::{ModelConfig, Variant};
use super::tensor::Tensor;
use super::{Model, Objective, PassOptions, SpeechInput};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Speakers whose gradients are summed before each update.
    pub accum_steps: usize,
    /// Updates over which the learning rate ramps up linearly before the
    /// linear decay to zero.
    pub warmup_updates: usize,
    pub max_epochs: usize,
    /// Epochs without dev-loss improvement before stopping.
    pub patience: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Estimate input mean/std from the training split and store them in the
    /// model config.
    pub standardize_inputs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            accum_steps: 8,
            warmup_updates: 20,
            max_epochs: 8,
            patience: 1,
            clip_norm: 1.0,
            standardize_inputs: true,
        }
    }
}

impl TrainConfig {
    pub fn paper_scale() -> Self {
        TrainConfig {
            lr: 3e-5,
            accum_steps: 72,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.accum_steps > 0
            && self.max_epochs > 0
            && self.patience > 0
            && self.clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("train: invalid optimiser settings".into()))
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledSpeech {
    pub input: SpeechInput,
    /// 0 normal, 1 depressed.
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub updates: usize,
}

/// Mean cross-entropy per speaker. Segment models average over each
/// speaker's sentences first.
pub fn evaluate_loss(model: &Model<f32>, data: &[LabeledSpeech]) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for s in data {
        total += speaker_loss(model, s)?;
    }
    Ok(total / data.len() as f64)
}

fn speaker_loss(model: &Model<f32>, s: &LabeledSpeech) -> Result<f64> {
    let ce = |l: super::ClassLogits| {
        let x = l.logits;
        let m = x[0].max(x[1]);
        m + ((x[0] - m).exp() + (x[1] - m).exp()).ln() - x[s.label]
    };
    match model.variant {
        Variant::Speech => Ok(ce(model.speech_forward_logits(&s.input)?)),
        Variant::Segment => {
            let n = s.input.sentences.len().min(model.config.max_sentences);
            let mut t = 0.0;
            for sent in &s.input.sentences[..n] {
                t += ce(model.segment_forward(sent)?);
            }
            Ok(t / n as f64)
        }
    }
}

fn input_stats(data: &[LabeledSpeech]) -> (f64, f64) {
    let (mut n, mut s, mut ss) = (0u64, 0.0f64, 0.0f64);
    for sp in data {
        for sent in &sp.input.sentences {
            let spec = &sent.spec;
            for mel in 0..spec.n_mels {
                for &v in &spec.values[mel * spec.n_frames..mel * spec.n_frames + spec.valid_frames] {
                    n += 1;
                    s += v as f64;
                    ss += (v as f64) * (v as f64);
                }
            }
        }
    }
    if n < 2 {
        return (0.0, 1.0);
    }
    let mean = s / n as f64;
    let var = (ss / n as f64 - mean * mean).max(0.0);
    (mean, if var > 0.0 { var.sqrt() } else { 1.0 })
}

struct Adam {
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    t: i32,
}

/// Trains `variant` from scratch and returns the weights from the epoch with
/// the lowest dev loss.
pub fn train(
    model_cfg: &ModelConfig,
    variant: Variant,
    tcfg: &TrainConfig,
    train_set: &[LabeledSpeech],
    dev_set: &[LabeledSpeech],
    seed: u64,
) -> Result<TrainReport> {
    tcfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut cfg = model_cfg.clone();
    cfg.seed = seed;
    if tcfg.standardize_inputs {
        let (m, s) = input_stats(train_set);
        cfg.input_mean = m;
        cfg.input_std = s;
    }
    let mut model = Model::<f32>::new(cfg, variant)?;
    let frozen = model.layout.frozen_slots(model.config.freeze_prefix_layers);
    let trainable: Vec<bool> = (0..model.params.len()).map(|i| !frozen.contains(&i)).collect();

    let mut grads = model.layout.zeros::<f32>();
    let mut adam = Adam {
        m: model.layout.zeros(),
        v: model.layout.zeros(),
        t: 0,
    };
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    order_rng.set_stream(1);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
    drop_rng.set_stream(2);

    let per_epoch = train_set.len().div_ceil(tcfg.accum_steps);
    let total_updates = (per_epoch * tcfg.max_epochs) as f64;
    let mut meta = TrainMeta {
        seed,
        ..TrainMeta::default()
    };
    let mut best = (f64::INFINITY, model.params.clone());
    let mut bad_epochs = 0;
    let mut step = 0usize;
    let mut updates = 0usize;

    for epoch in 1..=tcfg.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        let mut pending = 0usize;
        for (pos, &i) in order.iter().enumerate() {
            let s = &train_set[i];
            let loss = speaker_step(&model, s, &mut grads, &mut drop_rng)?;
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Divergence { seed, step });
            }
            epoch_loss += loss;
            pending += 1;
            if pending == tcfg.accum_steps || pos + 1 == order.len() {
                let lr = schedule(tcfg, updates, total_updates);
                apply_update(&mut model.params, &mut grads, &mut adam, tcfg, lr, pending, &trainable);
                if model.params.iter().any(|t| t.data.iter().any(|v| !v.is_finite())) {
                    return Err(Error::Divergence { seed, step });
                }
                updates += 1;
                pending = 0;
            }
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let dev_loss = if dev_set.is_empty() {
            train_loss
        } else {
            evaluate_loss(&model, dev_set)?
        };
        if !dev_loss.is_finite() {
            return Err(Error::Divergence { seed, step });
        }
        log::info!("{} epoch {epoch}: train loss {train_loss:.4}, dev loss {dev_loss:.4}", variant.name());
        meta.epochs_run = epoch;
        meta.train_loss_history.push(train_loss);
        meta.dev_loss_history.push(dev_loss);
        if dev_loss < best.0 {
            best = (dev_loss, model.params.clone());
            meta.best_epoch = epoch;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= tcfg.patience {
                break;
            }
        }
    }
    model.params = best.1;
    Ok(TrainReport {
        checkpoint: Checkpoint::from_model(&model, meta),
        updates,
    })
}

/// Linear warm-up to `lr`, then linear decay towards zero at the end of the
/// last epoch.
fn schedule(tcfg: &TrainConfig, update: usize, total: f64) -> f64 {
    let w = tcfg.warmup_updates;
    if update < w {
        return tcfg.lr * (update + 1) as f64 / w as f64;
    }
    let span = (total - w as f64).max(1.0);
    tcfg.lr * (1.0 - (update - w) as f64 / span)
}

/// Forward/backward for one speaker with dropout; accumulates into `grads`.
fn speaker_step(
    model: &Model<f32>,
    s: &LabeledSpeech,
    grads: &mut [Tensor<f32>],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut pass = model.pass();
    match model.variant {
        Variant::Speech => {
            pass.forward_speech(&s.input, PassOptions { rng: Some(rng), nudge: None })?;
            pass.backward(Objective::CrossEntropy(s.label), Some(grads))
        }
        Variant::Segment => {
            let n = s.input.sentences.len().min(model.config.max_sentences);
            if n == 0 {
                return Err(Error::InvalidArgument("speech has no sentences".into()));
            }
            let w = 1.0 / n as f64;
            let mut loss = 0.0;
            for sent in &s.input.sentences[..n] {
                pass.forward_segment(sent, PassOptions { rng: Some(&mut *rng), nudge: None })?;
                loss += pass.backward_weighted(Objective::CrossEntropy(s.label), w, Some(&mut *grads))?;
            }
            Ok(loss)
        }
    }
}

fn apply_update(
    params: &mut [Tensor<f32>],
    grads: &mut [Tensor<f32>],
    adam: &mut Adam,
    tcfg: &TrainConfig,
    lr: f64,
    count: usize,
    trainable: &[bool],
) {
    let inv = 1.0 / count as f64;
    let mut scale = inv;
    if tcfg.clip_norm > 0.0 {
        let sq: f64 = grads
            .iter()
            .zip(trainable)
            .filter(|(_, &t)| t)
            .flat_map(|(g, _)| g.data.iter())
            .map(|&v| (v as f64 * inv).powi(2))
            .sum();
        let norm = sq.sqrt();
        if norm > tcfg.clip_norm {
            scale *= tcfg.clip_norm / norm;
        }
    }
    adam.t += 1;
    let b1 = tcfg.beta1;
    let b2 = tcfg.beta2;
    let c1 = 1.0 - b1.powi(adam.t);
    let c2 = 1.0 - b2.powi(adam.t);
    for (i, p) in params.iter_mut().enumerate() {
        if !trainable[i] {
            grads[i].fill_zero();
            continue;
        }
        let g = &mut grads[i].data;
        let m = &mut adam.m[i].data;
        let v = &mut adam.v[i].data;
        for k in 0..p.data.len() {
            let gk = g[k] as f64 * scale;
            let mk = b1 * m[k] as f64 + (1.0 - b1) * gk;
            let vk = b2 * v[k] as f64 + (1.0 - b2) * gk * gk;
            m[k] = mk as f32;
            v[k] = vk as f32;
            let pk = p.data[k] as f64;
            let upd = (mk / c1) / ((vk / c2).sqrt() + tcfg.eps) + tcfg.weight_decay * pk;
            p.data[k] = (pk - lr * upd) as f32;
            g[k] = 0.0;
        }
    }
}
