//! Single-binary command line for the pipeline: synthetic corpus generation,
//! the three training stages, and task evaluation, tied together by one JSON
//! run configuration per invocation.
//!
//! Exit codes: 0 success, 1 environment or IO failure, 2 configuration or
//! usage error. Human-readable progress goes to stderr; machine-readable
//! output (sample counts, evaluation reports) goes to stdout. Every command
//! is deterministic in (config, seed): re-running reproduces its outputs
//! byte for byte.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use slt_core::data::{generate_corpus, load_corpus, save_corpus, Corpus};
use slt_core::metrics::Task;
use slt_core::pipeline::{
    evaluate, load_checkpoint, pretrain_translation, pretrain_visual, save_checkpoint,
    train_joint, EvalOptions, JointInit, Stage, TrainOutcome,
};
use slt_core::{Error, Result};

use config::{EffectiveConfig, EffectiveData, RunConfig};

#[derive(Parser)]
#[command(name = "slt", version, about = "Sign language translation pipeline runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic gloss/text corpus with feature files and
    /// train/dev/test manifests.
    GenData {
        /// Run configuration (JSON); the `data` section applies.
        #[arg(long)]
        config: PathBuf,
        /// Output corpus directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the visual encoder with CTC on gloss sequences.
    PretrainVisual(TrainArgs),
    /// Pretrain the gloss-to-text translation network.
    PretrainTranslation(TrainArgs),
    /// Train the full stack through the visual-language mapper.
    TrainJoint {
        #[command(flatten)]
        args: TrainArgs,
        /// Checkpoint from pretrain-visual.
        #[arg(long)]
        init_visual: Option<PathBuf>,
        /// Checkpoint from pretrain-translation.
        #[arg(long)]
        init_translation: Option<PathBuf>,
        /// Explicitly waive progressive pretraining and start from scratch.
        #[arg(long)]
        allow_scratch: bool,
    },
    /// Score a checkpoint on the test split of a corpus.
    Evaluate {
        #[arg(long)]
        task: TaskArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus directory holding train/dev/test manifests.
        #[arg(long)]
        data: PathBuf,
        /// Text beam width (default 4).
        #[arg(long)]
        beam_width: Option<usize>,
        /// Length-penalty exponent for beam scores (default 1.0).
        #[arg(long)]
        length_penalty: Option<f64>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Corpus directory holding train/dev/test manifests.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint, metrics, and effective config.
    #[arg(long)]
    out: PathBuf,
    /// Override the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    #[value(name = "sign2gloss")]
    Sign2Gloss,
    #[value(name = "gloss2text")]
    Gloss2Text,
    #[value(name = "sign2gloss2text")]
    Sign2Gloss2Text,
    #[value(name = "sign2text")]
    Sign2Text,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Sign2Gloss => Task::Sign2Gloss,
            TaskArg::Gloss2Text => Task::Gloss2Text,
            TaskArg::Sign2Gloss2Text => Task::Sign2Gloss2Text,
            TaskArg::Sign2Text => Task::Sign2Text,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2u8 } else { 1u8 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::PretrainVisual(args) => {
            let (cfg, corpus) = load_run(&args)?;
            let train_cfg = resolved_train_cfg(&cfg, Stage::PretrainVisual, &args);
            let outcome = pretrain_visual(&corpus, &cfg.visual_cfg(), &train_cfg)?;
            let effective = EffectiveConfig {
                visual: Some(outcome.model.visual_cfg.clone()),
                train: Some(train_cfg),
                ..EffectiveConfig::default()
            };
            finish_training(&args.out, &outcome, &effective)
        }
        Command::PretrainTranslation(args) => {
            let (cfg, corpus) = load_run(&args)?;
            let train_cfg = resolved_train_cfg(&cfg, Stage::PretrainTranslation, &args);
            let outcome = pretrain_translation(&corpus, &cfg.translation_cfg(), &train_cfg)?;
            let effective = EffectiveConfig {
                translation: Some(outcome.model.translation_cfg.clone()),
                train: Some(train_cfg),
                ..EffectiveConfig::default()
            };
            finish_training(&args.out, &outcome, &effective)
        }
        Command::TrainJoint { args, init_visual, init_translation, allow_scratch } => {
            let from_checkpoints = init_visual.is_some() && init_translation.is_some();
            let from_scratch =
                init_visual.is_none() && init_translation.is_none() && allow_scratch;
            if !from_checkpoints && !from_scratch {
                return Err(Error::Config(
                    "train-joint needs both --init-visual and --init-translation; \
                     pass --allow-scratch to waive progressive pretraining"
                        .to_string(),
                ));
            }
            let (cfg, corpus) = load_run(&args)?;
            let train_cfg = resolved_train_cfg(&cfg, Stage::TrainJoint, &args);
            // The mapper bridges whatever encoder and translator actually
            // run, so its widths resolve against the loaded checkpoints.
            let (init, visual_cfg, translation_cfg) = match (init_visual, init_translation) {
                (Some(v), Some(t)) => {
                    let visual = load_checkpoint(&v)?;
                    let translation = load_checkpoint(&t)?;
                    let vcfg = visual.visual_cfg.clone();
                    let tcfg = translation.translation_cfg.clone();
                    (JointInit::Pretrained { visual, translation }, vcfg, tcfg)
                }
                _ => {
                    let vcfg = cfg.visual_cfg();
                    let tcfg = cfg.translation_cfg();
                    (
                        JointInit::Scratch {
                            visual_cfg: vcfg.clone(),
                            translation_cfg: tcfg.clone(),
                        },
                        vcfg,
                        tcfg,
                    )
                }
            };
            let mapper_cfg = cfg.mapper_cfg(&visual_cfg, &translation_cfg);
            let outcome = train_joint(&corpus, init, &mapper_cfg, &train_cfg)?;
            let effective = EffectiveConfig {
                visual: Some(outcome.model.visual_cfg.clone()),
                translation: Some(outcome.model.translation_cfg.clone()),
                mapper: outcome.model.mapper_cfg.clone(),
                train: Some(train_cfg),
                ..EffectiveConfig::default()
            };
            finish_training(&args.out, &outcome, &effective)
        }
        Command::Evaluate { task, checkpoint, data, beam_width, length_penalty } => {
            let model = load_checkpoint(&checkpoint)?;
            let corpus = load_corpus_dir(&data)?;
            let defaults = EvalOptions::default();
            let opts = EvalOptions {
                beam_width: beam_width.unwrap_or(defaults.beam_width),
                length_penalty: length_penalty.unwrap_or(defaults.length_penalty),
            };
            let report = evaluate(&model, &corpus, task.into(), &opts)?;
            println!("{}", serde_json::to_string(&report).expect("in-memory serialization"));
            Ok(())
        }
    }
}

fn gen_data(config_path: &Path, out: &Path) -> Result<()> {
    let mut cfg = RunConfig::load(config_path)?;
    cfg.apply_seed_override()?;
    let spec = cfg.synthetic_spec();
    let (n_train, n_dev, n_test) = cfg.split_sizes();
    let corpus = generate_corpus(&spec, n_train, n_dev, n_test)?;
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    save_corpus(out, &corpus)?;
    let effective = EffectiveConfig {
        data: Some(EffectiveData { spec, n_train, n_dev, n_test }),
        ..EffectiveConfig::default()
    };
    write_effective_config(out, &effective)?;
    eprintln!("wrote corpus to {}", out.display());
    println!(
        "{}",
        serde_json::json!({
            "train": corpus.train.len(),
            "dev": corpus.dev.len(),
            "test": corpus.test.len(),
        })
    );
    Ok(())
}

fn load_run(args: &TrainArgs) -> Result<(RunConfig, Corpus)> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.apply_seed_override()?;
    let corpus = load_corpus_dir(&args.data)?;
    Ok((cfg, corpus))
}

fn resolved_train_cfg(
    cfg: &RunConfig,
    stage: Stage,
    args: &TrainArgs,
) -> slt_core::pipeline::TrainConfig {
    let mut train_cfg = cfg.train_cfg(stage);
    if let Some(epochs) = args.epochs {
        train_cfg.epochs = epochs;
    }
    train_cfg
}

fn load_corpus_dir(dir: &Path) -> Result<Corpus> {
    Ok(Corpus {
        train: load_corpus(&dir.join("train.jsonl"))?,
        dev: load_corpus(&dir.join("dev.jsonl"))?,
        test: load_corpus(&dir.join("test.jsonl"))?,
    })
}

/// Writes checkpoint, per-epoch metrics JSONL, and the effective config, and
/// narrates the run on stderr.
fn finish_training(out: &Path, outcome: &TrainOutcome, effective: &EffectiveConfig) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    save_checkpoint(&outcome.model, &out.join("checkpoint.sltc"))?;
    let mut metrics = String::new();
    for log in &outcome.epochs {
        metrics.push_str(&serde_json::to_string(log).expect("in-memory serialization"));
        metrics.push('\n');
    }
    write_file(&out.join("metrics.jsonl"), &metrics)?;
    write_effective_config(out, effective)?;
    for log in &outcome.epochs {
        let dev = match (log.dev_wer, log.dev_bleu4) {
            (Some(wer), _) => format!("dev_wer {:.4}", wer),
            (None, Some(bleu)) => format!("dev_bleu4 {:.2}", bleu),
            (None, None) => String::new(),
        };
        eprintln!(
            "{} epoch {:>3}: lr {:.2e} loss {:.4} {dev}",
            log.stage, log.epoch, log.lr, log.train_loss
        );
    }
    match outcome.best_epoch {
        Some(best) => eprintln!("kept epoch {best}; wrote {}", out.join("checkpoint.sltc").display()),
        None => eprintln!("no epochs ran; wrote the initialization to {}", out.join("checkpoint.sltc").display()),
    }
    Ok(())
}

fn write_effective_config(out: &Path, effective: &EffectiveConfig) -> Result<()> {
    let mut body = serde_json::to_string_pretty(effective).expect("in-memory serialization");
    body.push('\n');
    write_file(&out.join("config.json"), &body)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
