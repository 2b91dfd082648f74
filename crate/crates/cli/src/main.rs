use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use voxrel_core::acoustics::{read_feature_csv, write_feature_csv};
use voxrel_core::dsp::MelFrontend;
use voxrel_core::model::{Checkpoint, Model, Variant};
use voxrel_core::pipeline::{
    self, decision_threshold, evaluate, feature_report, feature_rows, interpret_speaker, prepare, run_pipeline,
    train_variant, write_json, PreparedCorpus, Preset, RunConfig, Stage,
};
use voxrel_core::synthcorpus::Corpus;

#[derive(Parser)]
#[command(name = "voxrel", version, about = "Speech-level depression detection with attention relevancy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PresetArg::Toy)]
    preset: PresetArg,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, ValueEnum)]
enum PresetArg {
    Toy,
    PaperScale,
}

#[derive(Copy, Clone, ValueEnum)]
enum VariantArg {
    Speech,
    Segment,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Speech => Variant::Speech,
            VariantArg::Segment => Variant::Segment,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum StageArg {
    Synth,
    Train,
    Evaluate,
    Interpret,
    Features,
    Perturb,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Synth => Stage::Synth,
            StageArg::Train => Stage::Train,
            StageArg::Evaluate => Stage::Evaluate,
            StageArg::Interpret => Stage::Interpret,
            StageArg::Features => Stage::Features,
            StageArg::Perturb => Stage::Perturb,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (WAV files + manifest).
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model variant on a corpus.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = VariantArg::Speech)]
        variant: VariantArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dev-set AUCs, bootstrap intervals and the DeLong comparison.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Segment-level checkpoint.
        #[arg(long)]
        ckpt_a: PathBuf,
        /// Speech-level checkpoint.
        #[arg(long)]
        ckpt_b: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Relevant sentences, frames and spans for one speaker.
    Interpret {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        speaker: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Acoustic features of the relevant spans, one row per dev speaker.
    Features {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// True-positive vs true-negative tests on a feature table.
    CompareFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Relevant-vs-random ablation curves.
    Perturb {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// All stages end to end, or a single stage against an existing run
    /// directory.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Run directory; falls back to `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
        /// Restricts `--stage train` to one variant.
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
    /// Print the effective configuration as TOML.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let preset = match c.preset {
        PresetArg::Toy => Preset::Toy,
        PresetArg::PaperScale => Preset::PaperScale,
    };
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(preset, p)?,
        None => RunConfig::preset(preset),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path, cfg: &RunConfig, want: Option<Variant>) -> Result<Model<f32>> {
    let ck = Checkpoint::load(path)?;
    if let Some(v) = want {
        if ck.variant != v {
            bail!("{}: expected a {} checkpoint, found {}", path.display(), v.name(), ck.variant.name());
        }
    }
    if ck.config.n_mels != cfg.dsp.n_mels || ck.config.target_frames != cfg.dsp.target_frames {
        bail!("{}: checkpoint geometry does not match the dsp configuration", path.display());
    }
    Ok(ck.to_model()?)
}

fn load_corpus(dir: &Path, cfg: &RunConfig) -> Result<(Corpus, PreparedCorpus)> {
    let corpus = Corpus::read(dir).with_context(|| format!("reading corpus {}", dir.display()))?;
    let data = prepare(&corpus, &MelFrontend::new(&cfg.dsp)?)?;
    Ok((corpus, data))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, out } => {
            let cfg = load_config(&common)?;
            let corpus = pipeline::synthesize(&cfg)?;
            corpus.write(&out)?;
            log::info!("wrote {} speakers to {}", corpus.speeches.len(), out.display());
        }
        Command::Train { common, corpus, variant, out } => {
            let cfg = load_config(&common)?;
            let (_, data) = load_corpus(&corpus, &cfg)?;
            let ck = train_variant(&cfg, &data, variant.into())?;
            ck.save(&out)?;
            log::info!(
                "best epoch {} of {}; wrote {}",
                ck.meta.best_epoch,
                ck.meta.epochs_run,
                out.display()
            );
        }
        Command::Evaluate { common, ckpt_a, ckpt_b, corpus, out } => {
            let cfg = load_config(&common)?;
            let seg = load_model(&ckpt_a, &cfg, Some(Variant::Segment))?;
            let speech = load_model(&ckpt_b, &cfg, Some(Variant::Speech))?;
            let (_, data) = load_corpus(&corpus, &cfg)?;
            let rep = evaluate(&cfg, &data.dev, &seg, &speech)?;
            write_json(&out, &rep)?;
            log::info!(
                "segment AUC {:.3}, speech AUC {:.3}, DeLong p {:.4}",
                rep.segment.auc,
                rep.speech.auc,
                rep.delong.p_value
            );
        }
        Command::Interpret { common, ckpt, corpus, speaker, k, tau, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(k) = k {
                cfg.interpret.k = k;
            }
            if let Some(t) = tau {
                cfg.interpret.tau = t;
            }
            cfg.validate()?;
            let model = load_model(&ckpt, &cfg, Some(Variant::Speech))?;
            let (_, data) = load_corpus(&corpus, &cfg)?;
            let sp = data
                .train
                .iter()
                .chain(&data.dev)
                .find(|s| s.speaker_id == speaker)
                .with_context(|| format!("speaker {speaker:?} not in corpus"))?;
            let threshold = decision_threshold(&cfg, data.prevalence);
            let res = interpret_speaker(&model, sp, threshold, &cfg.interpret, &cfg.dsp)?;
            write_json(
                &out,
                &serde_json::json!({ "provenance": cfg.provenance(), "threshold": threshold, "speaker": res }),
            )?;
        }
        Command::Features { common, ckpt, corpus, out } => {
            let cfg = load_config(&common)?;
            let model = load_model(&ckpt, &cfg, Some(Variant::Speech))?;
            let (corpus, data) = load_corpus(&corpus, &cfg)?;
            let rows = feature_rows(&cfg, &model, &corpus, &data.dev, data.prevalence)?;
            write_feature_csv(&rows, &out, Some(&cfg.provenance()))?;
            log::info!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::CompareFeatures { common, table, out } => {
            let cfg = load_config(&common)?;
            let rows = read_feature_csv(&table)?;
            let rep = feature_report(&cfg, &rows, None)?;
            write_json(&out, &rep)?;
            for t in &rep.comparison.tests {
                log::info!("{}: p = {:.3e} {}", t.feature, t.p_value, t.tier.stars());
            }
        }
        Command::Perturb { common, ckpt, corpus, out } => {
            let cfg = load_config(&common)?;
            let model = load_model(&ckpt, &cfg, Some(Variant::Speech))?;
            let (_, data) = load_corpus(&corpus, &cfg)?;
            let rep = pipeline::perturb(&cfg, &model, &data.dev, data.prevalence)?;
            write_json(&out, &rep)?;
        }
        Command::Pipeline { common, out, stage, variant } => {
            let cfg = load_config(&common)?;
            let Some(out) = out.or_else(|| cfg.out_dir.clone()) else {
                bail!("no output directory: pass --out or set out_dir in the config");
            };
            if variant.is_some() && !matches!(stage, Some(StageArg::Train)) {
                bail!("--variant requires --stage train");
            }
            let summary = run_pipeline(&cfg, &out, stage.map(Into::into), variant.map(Into::into))?;
            if let Some(s) = summary {
                log::info!(
                    "speech AUC {:.3}, segment AUC {:.3}; summary in {}",
                    s.evaluation.speech.auc,
                    s.evaluation.segment.auc,
                    out.join(pipeline::SUMMARY_FILE).display()
                );
            }
        }
        Command::Config { common } => {
            print!("{}", load_config(&common)?.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
