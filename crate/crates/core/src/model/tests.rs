use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dsp::MelSpectrogram;

pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        sentence_layers: 1,
        speech_layers: 1,
        frame_width: 2,
        n_mels: 6,
        target_frames: 4,
        max_sentences: 4,
        dropout: 0.0,
        init_std: 0.5,
        ..ModelConfig::default()
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 4,
        sentence_layers: 2,
        speech_layers: 2,
        n_mels: 8,
        target_frames: 12,
        max_sentences: 5,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

fn random_spec(cfg: &ModelConfig, valid: usize, rng: &mut ChaCha8Rng) -> Arc<MelSpectrogram> {
    let n = cfg.target_frames;
    let mut values = vec![cfg.pad_value as f32; cfg.n_mels * n];
    for mel in 0..cfg.n_mels {
        for f in 0..valid {
            values[mel * n + f] = rng.random_range(-2.0..2.0);
        }
    }
    Arc::new(MelSpectrogram {
        n_mels: cfg.n_mels,
        n_frames: n,
        valid_frames: valid,
        values,
    })
}

fn random_speech(cfg: &ModelConfig, n: usize, rng: &mut ChaCha8Rng) -> SpeechInput {
    SpeechInput {
        sentences: (0..n)
            .map(|_| {
                let valid = rng.random_range(1..=cfg.target_frames);
                SentenceInput::new(random_spec(cfg, valid, rng))
            })
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Dense reference evaluator: full token set, explicit -inf key masking, no
// shared code with the engine beyond parameter lookup by name.

fn param<'a>(m: &'a Model<f64>, name: &str) -> &'a [f64] {
    &m.params[m.layout.index_of(name).unwrap_or_else(|| panic!("{name}"))].data
}

fn ref_ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mu = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * g[i] + b[i])
        .collect()
}

fn ref_lin(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let dout = b.len();
    (0..dout)
        .map(|o| b[o] + x.iter().enumerate().map(|(i, v)| v * w[i * dout + o]).sum::<f64>())
        .collect()
}

fn ref_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn ref_encoder(m: &Model<f64>, prefix: &str, layers: usize, mut x: Vec<Vec<f64>>, mask: &[bool]) -> Vec<Vec<f64>> {
    let d = m.config.d_model;
    let h = m.config.n_heads;
    let dh = d / h;
    let n = x.len();
    for l in 0..layers {
        let p = |s: &str| param(m, &format!("{prefix}.layers.{l}.{s}"));
        let h1: Vec<Vec<f64>> = x.iter().map(|r| ref_ln(r, p("ln1.gamma"), p("ln1.beta"))).collect();
        let qkv: Vec<Vec<f64>> = h1.iter().map(|r| ref_lin(r, p("attn.qkv.weight"), p("attn.qkv.bias"))).collect();
        let mut o = vec![vec![0.0; d]; n];
        for hh in 0..h {
            for i in 0..n {
                let mut logits = vec![f64::NEG_INFINITY; n];
                for j in 0..n {
                    if mask[j] {
                        let s: f64 = (0..dh).map(|e| qkv[i][hh * dh + e] * qkv[j][d + hh * dh + e]).sum();
                        logits[j] = s / (dh as f64).sqrt();
                    }
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                for j in 0..n {
                    for e in 0..dh {
                        o[i][hh * dh + e] += ex[j] / z * qkv[j][2 * d + hh * dh + e];
                    }
                }
            }
        }
        for i in 0..n {
            let a = ref_lin(&o[i], p("attn.proj.weight"), p("attn.proj.bias"));
            x[i].iter_mut().zip(&a).for_each(|(v, a)| *v += a);
            let h2 = ref_ln(&x[i], p("ln2.gamma"), p("ln2.beta"));
            let f: Vec<f64> = ref_lin(&h2, p("mlp.fc1.weight"), p("mlp.fc1.bias"))
                .into_iter()
                .map(ref_gelu)
                .collect();
            let f2 = ref_lin(&f, p("mlp.fc2.weight"), p("mlp.fc2.bias"));
            x[i].iter_mut().zip(&f2).for_each(|(v, a)| *v += a);
        }
    }
    x.iter()
        .map(|r| ref_ln(r, param(m, &format!("{prefix}.norm.gamma")), param(m, &format!("{prefix}.norm.beta"))))
        .collect()
}

fn ref_sentence_cls(m: &Model<f64>, s: &SentenceInput) -> Vec<f64> {
    let c = &m.config;
    let d = c.d_model;
    let fw = c.frame_width;
    let spec = &s.spec;
    let pos = param(m, "sentence.pos");
    let mut toks = vec![param(m, "sentence.cls").iter().zip(&pos[..d]).map(|(a, b)| a + b).collect::<Vec<_>>()];
    let mut mask = vec![true];
    for t in 0..c.frame_tokens() {
        let mut patch = vec![0.0; c.n_mels * fw];
        for mel in 0..c.n_mels {
            for w in 0..fw {
                let f = t * fw + w;
                let v = if f < spec.valid_frames { spec.get(mel, f) as f64 } else { c.pad_value };
                patch[mel * fw + w] = (v - c.input_mean) / c.input_std;
            }
        }
        let e = ref_lin(&patch, param(m, "sentence.patch.weight"), param(m, "sentence.patch.bias"));
        toks.push(e.iter().zip(&pos[(t + 1) * d..(t + 2) * d]).map(|(a, b)| a + b).collect());
        let removed = s.removed.as_ref().is_some_and(|r| r[t]);
        mask.push(t * fw < spec.valid_frames && !removed);
    }
    ref_encoder(m, "sentence", c.sentence_layers, toks, &mask)[0].clone()
}

fn ref_speech_logits(m: &Model<f64>, sp: &SpeechInput) -> [f64; 2] {
    let d = m.config.d_model;
    let pos = param(m, "speech.pos");
    let mut toks = vec![param(m, "speech.cls").to_vec()];
    for (j, s) in sp.sentences.iter().take(m.config.max_sentences).enumerate() {
        let e = ref_sentence_cls(m, s);
        toks.push(e.iter().zip(&pos[j * d..(j + 1) * d]).map(|(a, b)| a + b).collect());
    }
    let mask = vec![true; toks.len()];
    let out = ref_encoder(m, "speech", m.config.speech_layers, toks, &mask);
    let l = ref_lin(&out[0], param(m, "head.weight"), param(m, "head.bias"));
    [l[0], l[1]]
}

// ---------------------------------------------------------------------------

#[test]
fn speech_forward_matches_dense_reference() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..3 {
        let m = Model::<f64>::new(ModelConfig { seed, ..cfg.clone() }, Variant::Speech).unwrap();
        let sp = random_speech(&cfg, 3 + seed as usize, &mut rng);
        let got = m.speech_forward_logits(&sp).unwrap().logits;
        let want = ref_speech_logits(&m, &sp);
        for c in 0..2 {
            assert!((got[c] - want[c]).abs() < 1e-9, "{got:?} vs {want:?}");
        }
        // 32-bit engine against the 64-bit reference.
        let got32 = m.cast::<f32>().speech_forward_logits(&sp).unwrap().logits;
        for c in 0..2 {
            assert!((got32[c] - want[c]).abs() < 1e-4);
        }
    }
}

#[test]
fn segment_forward_matches_dense_reference() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let m = Model::<f64>::new(cfg.clone(), Variant::Segment).unwrap();
    for _ in 0..5 {
        let valid = rng.random_range(1..=cfg.target_frames);
        let s = SentenceInput::new(random_spec(&cfg, valid, &mut rng));
        let got = m.segment_forward(&s).unwrap().logits;
        let cls = ref_sentence_cls(&m, &s);
        let want = ref_lin(&cls, param(&m, "head.weight"), param(&m, "head.bias"));
        assert!((got[0] - want[0]).abs() < 1e-9 && (got[1] - want[1]).abs() < 1e-9);
    }
}

#[test]
fn embed_shapes_and_mask() {
    let cfg = ModelConfig::default();
    let m = Model::<f32>::new(cfg.clone(), Variant::Speech).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = SentenceInput::new(random_spec(&cfg, 48, &mut rng));
    let e = m.embed_sentence(&s).unwrap();
    assert_eq!(e.mask.len(), 129);
    assert_eq!(e.tokens.len(), 129 * 64);
    assert!(e.mask[..=24].iter().all(|&a| a));
    assert!(e.mask[25..].iter().all(|&a| !a));
    // odd valid count keeps the half-valid token
    let s = SentenceInput::new(random_spec(&cfg, 49, &mut rng));
    assert!(s.token_mask(&cfg).unwrap()[25]);

    let bad = Arc::new(MelSpectrogram {
        n_mels: 128,
        n_frames: 200,
        valid_frames: 200,
        values: vec![0.0; 128 * 200],
    });
    assert!(matches!(m.embed_sentence(&SentenceInput::new(bad)), Err(Error::InvalidArgument(_))));
}

#[test]
fn encoder_attention_examples() {
    let cfg = small_config();
    let m = Model::<f64>::new(cfg.clone(), Variant::Speech).unwrap();
    let d = cfg.d_model;
    let n = 5;
    let row: Vec<f64> = (0..d).map(|i| (i as f64 * 0.37).sin()).collect();
    let toks: Vec<f64> = (0..n).flat_map(|_| row.clone()).collect();
    let (_, tr) = m.encoder_forward(BlockId::Speech, &toks, &[true; 5]).unwrap();
    for v in tr.full_attention(0, 1) {
        assert!((v - 0.2).abs() < 1e-12);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let toks: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mask = [false, false, true, false, false];
    let (out, tr) = m.encoder_forward(BlockId::Speech, &toks, &mask).unwrap();
    let a = tr.full_attention(1, 0);
    for i in 0..n {
        for j in 0..n {
            let want = if i == 2 && j == 2 { 1.0 } else { 0.0 };
            assert!((a[i * n + j] - want).abs() < 1e-12);
        }
    }
    assert!(out[..d].iter().all(|&v| v == 0.0));
    assert!(m.encoder_forward(BlockId::Speech, &toks, &[false; 5]).is_err());
}

#[test]
fn attention_rows_sum_to_one_and_masked_zero() {
    let cfg = small_config();
    let m = Model::<f32>::new(cfg.clone(), Variant::Speech).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sp = random_speech(&cfg, 4, &mut rng);
    let (_, tr) = m.speech_forward(&sp).unwrap();
    let blocks = tr.sentences.iter().chain(tr.speech.iter());
    for b in blocks {
        let mask = b.token_mask();
        let n = b.n_tokens;
        for l in 0..b.n_layers() {
            for h in 0..b.n_heads {
                let a = b.full_attention(l, h);
                for i in 0..n {
                    let row = &a[i * n..(i + 1) * n];
                    if mask[i] {
                        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                    }
                    for j in 0..n {
                        if !mask[j] || !mask[i] {
                            assert_eq!(row[j], 0.0);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn padding_contents_do_not_matter() {
    let cfg = small_config();
    let m = Model::<f32>::new(cfg.clone(), Variant::Speech).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let sp = random_speech(&cfg, 3, &mut rng);
    let base = m.speech_forward_logits(&sp).unwrap();
    let mut noisy = sp.clone();
    for s in &mut noisy.sentences {
        let mut spec = (*s.spec).clone();
        for mel in 0..spec.n_mels {
            for f in spec.valid_frames..spec.n_frames {
                spec.values[mel * spec.n_frames + f] = rng.random_range(-50.0..50.0);
            }
        }
        s.spec = Arc::new(spec);
    }
    assert_eq!(m.speech_forward_logits(&noisy).unwrap(), base);
}

#[test]
fn positional_embeddings_break_permutation_symmetry() {
    let cfg = small_config();
    let m = Model::<f64>::new(cfg.clone(), Variant::Speech).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sp = random_speech(&cfg, 4, &mut rng);
    let mut perm = sp.clone();
    perm.sentences.reverse();
    assert_ne!(m.speech_forward_logits(&sp).unwrap(), m.speech_forward_logits(&perm).unwrap());

    let dup = SpeechInput {
        sentences: vec![sp.sentences[0].clone(); cfg.max_sentences],
    };
    let mut pass = m.pass();
    pass.forward_speech(&dup, PassOptions::default()).unwrap();
    let e = pass.sentence_embeddings().unwrap();
    assert!(e.iter().all(|r| r == &e[0]));
}

#[test]
fn truncates_to_max_sentences() {
    let cfg = small_config();
    let m = Model::<f32>::new(cfg.clone(), Variant::Speech).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let long = random_speech(&cfg, cfg.max_sentences + 3, &mut rng);
    let mut short = long.clone();
    short.sentences.truncate(cfg.max_sentences);
    let (l, tr) = m.speech_forward(&long).unwrap();
    assert_eq!(l, m.speech_forward_logits(&short).unwrap());
    assert_eq!(tr.speech.unwrap().n_tokens, cfg.max_sentences + 1);
    assert!(m.speech_forward(&SpeechInput::default()).is_err());
}

#[test]
fn segment_path_shares_sentence_block() {
    let cfg = small_config();
    let speech = Model::<f64>::new(cfg.clone(), Variant::Speech).unwrap();
    let mut seg = Model::<f64>::new(cfg.clone(), Variant::Segment).unwrap();
    for (i, name) in seg.layout.names.clone().iter().enumerate() {
        seg.params[i] = speech.params[speech.layout.index_of(name).unwrap()].clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sp = random_speech(&cfg, 2, &mut rng);
    let mut pass = speech.pass();
    pass.forward_speech(&sp, PassOptions::default()).unwrap();
    let e = pass.sentence_embeddings().unwrap();
    let want = ref_lin(&e[1], param(&seg, "head.weight"), param(&seg, "head.bias"));
    let got = seg.segment_forward(&sp.sentences[1]).unwrap().logits;
    assert_eq!(got, [want[0], want[1]]);
}

#[test]
fn segment_votes() {
    let cfg = small_config();
    let mut m = Model::<f32>::new(cfg.clone(), Variant::Segment).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let sp = random_speech(&cfg, 12, &mut rng);
    let count = sp
        .sentences
        .iter()
        .filter(|s| m.segment_forward(s).unwrap().predicted_class() == 1)
        .count();
    assert_eq!(m.segment_vote_probability(&sp).unwrap(), count as f64 / 12.0);
    let (hw, hb) = m.layout.head;
    m.params[hw].fill_zero();
    m.params[hb].data = vec![0.0, 1.0];
    assert_eq!(m.segment_vote_probability(&sp).unwrap(), 1.0);
    assert!(m.segment_vote_probability(&SpeechInput::default()).is_err());

    let empty = SentenceInput::new(random_spec(&cfg, 4, &mut rng))
        .with_removed_tokens(&[0, 1], &cfg)
        .unwrap();
    assert!(matches!(m.segment_forward(&empty), Err(Error::InvalidArgument(_))));
}

#[test]
fn backward_requires_forward() {
    let m = Model::<f64>::new(tiny_config(), Variant::Speech).unwrap();
    let mut pass = m.pass();
    assert!(matches!(pass.backward(Objective::Logit(1), None), Err(Error::State(_))));
    assert!(matches!(pass.trace(), Err(Error::State(_))));
}

#[test]
fn zero_head_gives_zero_attention_gradients() {
    let cfg = small_config();
    let mut m = Model::<f64>::new(cfg.clone(), Variant::Speech).unwrap();
    m.params[m.layout.head.0].fill_zero();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sp = random_speech(&cfg, 3, &mut rng);
    let mut pass = m.pass();
    pass.forward_speech(&sp, PassOptions::default()).unwrap();
    pass.backward(Objective::Logit(1), None).unwrap();
    let tr = pass.trace().unwrap();
    for b in tr.sentences.iter().chain(tr.speech.iter()) {
        for g in b.grad.as_ref().unwrap() {
            assert!(g.iter().all(|&v| v == 0.0));
        }
    }
}

/// Relative error with a floor on the denominator: near-zero gradients are
/// compared absolutely at the scale of the floor.
pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn tiny_speech(cfg: &ModelConfig, seed: u64) -> SpeechInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SpeechInput {
        sentences: (0..2)
            .map(|_| SentenceInput::new(random_spec(cfg, cfg.target_frames, &mut rng)))
            .collect(),
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let cfg = tiny_config();
    for variant in [Variant::Speech, Variant::Segment] {
        let mut m = Model::<f64>::new(cfg.clone(), variant).unwrap();
        let sp = tiny_speech(&cfg, 21);
        let f = |m: &Model<f64>| match variant {
            Variant::Speech => m.speech_forward_logits(&sp).unwrap().logits[1],
            Variant::Segment => m.segment_forward(&sp.sentences[0]).unwrap().logits[1],
        };
        let mut grads = m.layout.zeros::<f64>();
        let mut pass = m.pass();
        match variant {
            Variant::Speech => pass.forward_speech(&sp, PassOptions::default()).unwrap(),
            Variant::Segment => pass.forward_segment(&sp.sentences[0], PassOptions::default()).unwrap(),
        };
        pass.backward(Objective::Logit(1), Some(&mut grads)).unwrap();
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for t in 0..m.params.len() {
            for k in 0..m.params[t].data.len() {
                let orig = m.params[t].data[k];
                m.params[t].data[k] = orig + eps;
                let up = f(&m);
                m.params[t].data[k] = orig - eps;
                let dn = f(&m);
                m.params[t].data[k] = orig;
                let fd = (up - dn) / (2.0 * eps);
                worst = worst.max(rel_err(grads[t].data[k], fd));
            }
        }
        assert!(worst < 1e-6, "{variant:?}: worst relative error {worst:e}");
    }
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let cfg = tiny_config();
    let mut m = Model::<f64>::new(cfg.clone(), Variant::Speech).unwrap();
    let sp = tiny_speech(&cfg, 22);
    let loss = |m: &Model<f64>| {
        let l = m.speech_forward_logits(&sp).unwrap().logits;
        let mx = l[0].max(l[1]);
        mx + ((l[0] - mx).exp() + (l[1] - mx).exp()).ln() - l[0]
    };
    let mut grads = m.layout.zeros::<f64>();
    let mut pass = m.pass();
    pass.forward_speech(&sp, PassOptions::default()).unwrap();
    let v = pass.backward(Objective::CrossEntropy(0), Some(&mut grads)).unwrap();
    assert!((v - loss(&m)).abs() < 1e-12);
    let t = m.layout.patch.0;
    for k in (0..m.params[t].data.len()).step_by(7) {
        let orig = m.params[t].data[k];
        m.params[t].data[k] = orig + 1e-5;
        let up = loss(&m);
        m.params[t].data[k] = orig - 1e-5;
        let dn = loss(&m);
        m.params[t].data[k] = orig;
        assert!(rel_err(grads[t].data[k], (up - dn) / 2e-5) < 1e-6);
    }
}

#[test]
fn attention_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let m = Model::<f64>::new(cfg.clone(), Variant::Speech).unwrap();
    let sp = tiny_speech(&cfg, 23);
    let mut pass = m.pass();
    pass.forward_speech(&sp, PassOptions::default()).unwrap();
    pass.backward(Objective::Logit(1), None).unwrap();
    let tr = pass.trace().unwrap();
    let blocks = [BlockId::Sentence(0), BlockId::Sentence(1), BlockId::Speech];
    let mut worst = 0.0f64;
    for b in blocks {
        let bt = match b {
            BlockId::Speech => tr.speech.clone().unwrap(),
            BlockId::Sentence(j) => tr.sentences[j].clone(),
        };
        let n = bt.n_active();
        let grad = bt.grad.as_ref().unwrap();
        for layer in 0..bt.n_layers() {
            for head in 0..bt.n_heads {
                for row in 0..n {
                    for col in 0..n {
                        let eval = |delta: f64| {
                            let mut p = m.pass();
                            let nudge = AttnNudge { layer, head, row, col, delta };
                            p.forward_speech(&sp, PassOptions { rng: None, nudge: Some((b, nudge)) })
                                .unwrap()
                                .logits[1]
                        };
                        let fd = (eval(1e-5) - eval(-1e-5)) / 2e-5;
                        let g = grad[layer][(head * n + row) * n + col];
                        worst = worst.max(rel_err(g, fd));
                    }
                }
            }
        }
    }
    assert!(worst < 1e-6, "worst relative error {worst:e}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = small_config();
    let m = Model::<f32>::new(cfg.clone(), Variant::Speech).unwrap();
    let ck = Checkpoint::from_model(
        &m,
        TrainMeta {
            seed: 3,
            epochs_run: 2,
            best_epoch: 1,
            train_loss_history: vec![0.7, 0.6],
            dev_loss_history: vec![0.69, 0.71],
            provenance: Some(crate::provenance::Provenance::new("{}", 3)),
        },
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let m2 = back.to_model().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sp = random_speech(&cfg, 3, &mut rng);
    let a = m.speech_forward_logits(&sp).unwrap().logits;
    let b = m2.speech_forward_logits(&sp).unwrap().logits;
    assert_eq!(a[0].to_bits(), b[0].to_bits());
    assert_eq!(a[1].to_bits(), b[1].to_bits());

    let mut bytes = ck.to_bytes().unwrap();
    bytes[0] = b'X';
    assert!(Checkpoint::from_bytes(&bytes, &path).is_err());
    let bytes = ck.to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], &path).is_err());
}

fn toy_data(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<LabeledSpeech> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let mut sp = random_speech(cfg, 3, &mut rng);
            // class signal: shift every valid value
            for s in &mut sp.sentences {
                let mut spec = (*s.spec).clone();
                for mel in 0..spec.n_mels {
                    for f in 0..spec.valid_frames {
                        spec.values[mel * spec.n_frames + f] += label as f32 * 1.5;
                    }
                }
                s.spec = Arc::new(spec);
            }
            LabeledSpeech { input: sp, label }
        })
        .collect()
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let cfg = small_config();
    let data = toy_data(&cfg, 6, 1);
    let tcfg = TrainConfig {
        lr: 0.0,
        max_epochs: 1,
        standardize_inputs: false,
        ..TrainConfig::default()
    };
    let rep = train(&cfg, Variant::Speech, &tcfg, &data, &data, 5).unwrap();
    let init = Model::<f32>::new(ModelConfig { seed: 5, ..cfg }, Variant::Speech).unwrap();
    assert_eq!(rep.checkpoint.tensors, init.params);
}

#[test]
fn training_is_deterministic_and_learns() {
    let cfg = small_config();
    let data = toy_data(&cfg, 24, 2);
    let dev = toy_data(&cfg, 8, 3);
    let tcfg = TrainConfig {
        max_epochs: 6,
        accum_steps: 2,
        patience: 6,
        ..TrainConfig::default()
    };
    for variant in [Variant::Speech, Variant::Segment] {
        let a = train(&cfg, variant, &tcfg, &data, &dev, 9).unwrap();
        let b = train(&cfg, variant, &tcfg, &data, &dev, 9).unwrap();
        assert_eq!(a.checkpoint.meta.dev_loss_history, b.checkpoint.meta.dev_loss_history);
        assert_eq!(a.checkpoint.tensors, b.checkpoint.tensors);
        let h = &a.checkpoint.meta.dev_loss_history;
        let best = h.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(best < h[0] * 0.8, "{variant:?}: {h:?}");
    }
}

#[test]
fn early_stopping_keeps_best_epoch() {
    let cfg = small_config();
    let data = toy_data(&cfg, 8, 4);
    let tcfg = TrainConfig {
        lr: 0.05,
        max_epochs: 10,
        accum_steps: 1,
        patience: 1,
        ..TrainConfig::default()
    };
    let rep = train(&cfg, Variant::Speech, &tcfg, &data, &data, 1).unwrap();
    let meta = &rep.checkpoint.meta;
    let h = &meta.dev_loss_history;
    let best = h.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(h[meta.best_epoch - 1], best);
    if meta.epochs_run < 10 {
        assert!(h[meta.epochs_run - 1] >= h[meta.epochs_run - 2]);
    }
    let m = rep.checkpoint.to_model().unwrap();
    assert!((evaluate_loss(&m, &data).unwrap() - best).abs() < 1e-12);
}
