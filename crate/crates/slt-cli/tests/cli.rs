//! End-to-end tests driving the compiled `slt` binary: corpus generation,
//! the three training stages, evaluation output, determinism, and the exit
//! code contract (1 for environment problems, 2 for usage problems).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use slt_core::ctc::GlossVocab;
use slt_core::data::load_corpus;
use slt_core::pipeline::load_checkpoint;
use slt_core::rng::derive_rng;
use slt_core::visual::{VisualEncoder, VisualEncoderConfig};
use slt_core::ParamStore;
use tempfile::TempDir;

const TINY_CONFIG: &str = r#"{
  "data": {"vocab_size": 5, "frames_per_gloss": 8, "feature_dim": 6,
           "noise_sigma": 0.05, "seed": 1, "n_train": 4, "n_dev": 2, "n_test": 2},
  "visual": {"backbone_dim": 8, "repr_dim": 6},
  "translation": {"layers_enc": 1, "layers_dec": 1, "d_model": 8, "heads": 2, "max_len": 32},
  "train": {"epochs": 1, "batch_size": 4, "lr_translation": 0.001, "seed": 7}
}"#;

fn slt() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_slt"));
    // The override must come from the test, never from the outer shell.
    cmd.env_remove("SLT_SEED");
    cmd
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        stdout(out),
        stderr(out)
    );
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out)
    );
}

/// Every file below `root`, keyed by relative path.
fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Temp directory holding a config file and a freshly generated corpus.
struct Fixture {
    _dir: TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

impl Fixture {
    fn new() -> Fixture {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("run.json");
        fs::write(&config, TINY_CONFIG).unwrap();
        let data = root.join("data");
        let out = slt()
            .arg("gen-data")
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&data)
            .output()
            .unwrap();
        assert_ok(&out);
        Fixture { _dir: dir, root, config, data }
    }

    fn train(&self, subcommand: &str, out_name: &str, extra: &[&str]) -> (Output, PathBuf) {
        let out_dir = self.root.join(out_name);
        let mut cmd = slt();
        cmd.arg(subcommand)
            .arg("--config")
            .arg(&self.config)
            .arg("--data")
            .arg(&self.data)
            .arg("--out")
            .arg(&out_dir);
        for arg in extra {
            cmd.arg(arg);
        }
        (cmd.output().unwrap(), out_dir)
    }

    fn evaluate(&self, task: &str, checkpoint: &Path) -> Output {
        slt()
            .arg("evaluate")
            .arg("--task")
            .arg(task)
            .arg("--checkpoint")
            .arg(checkpoint)
            .arg("--data")
            .arg(&self.data)
            .output()
            .unwrap()
    }
}

#[test]
fn gen_data_writes_manifests_counts_and_the_effective_config() {
    let f = Fixture::new();
    // Regenerate explicitly to inspect the process output.
    let data = f.root.join("data2");
    let out = slt()
        .arg("gen-data")
        .arg("--config")
        .arg(&f.config)
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap();
    assert_ok(&out);

    let counts: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(counts["train"], 4);
    assert_eq!(counts["dev"], 2);
    assert_eq!(counts["test"], 2);

    for name in ["train.jsonl", "dev.jsonl", "test.jsonl", "config.json"] {
        assert!(data.join(name).is_file(), "{name} missing");
    }
    let echoed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["data"]["vocab_size"], 5);
    assert_eq!(echoed["data"]["n_train"], 4);

    // Manifests resolve to loadable feature files.
    assert_eq!(load_corpus(&data.join("train.jsonl")).unwrap().len(), 4);
    assert_eq!(load_corpus(&data.join("test.jsonl")).unwrap().len(), 2);
}

#[test]
fn gen_data_rejects_unknown_config_keys() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("run.json");
    fs::write(&config, r#"{"data": {"vocub_size": 5}}"#).unwrap();
    let out = slt()
        .arg("gen-data")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("data"))
        .output()
        .unwrap();
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("vocub_size"), "{}", stderr(&out));
}

#[test]
fn gen_data_is_byte_reproducible() {
    let f = Fixture::new();
    let again = f.root.join("again");
    let out = slt()
        .arg("gen-data")
        .arg("--config")
        .arg(&f.config)
        .arg("--out")
        .arg(&again)
        .output()
        .unwrap();
    assert_ok(&out);
    assert_eq!(tree_bytes(&f.data), tree_bytes(&again));
}

#[test]
fn seed_env_var_overrides_the_config() {
    let f = Fixture::new();

    let via_env = f.root.join("via_env");
    let out = slt()
        .arg("gen-data")
        .arg("--config")
        .arg(&f.config)
        .arg("--out")
        .arg(&via_env)
        .env("SLT_SEED", "99")
        .output()
        .unwrap();
    assert_ok(&out);

    let config99 = f.root.join("run99.json");
    fs::write(&config99, TINY_CONFIG.replace("\"seed\": 1", "\"seed\": 99")).unwrap();
    let via_config = f.root.join("via_config");
    let out = slt()
        .arg("gen-data")
        .arg("--config")
        .arg(&config99)
        .arg("--out")
        .arg(&via_config)
        .output()
        .unwrap();
    assert_ok(&out);

    assert_eq!(tree_bytes(&via_env), tree_bytes(&via_config));
    assert_ne!(
        fs::read(via_env.join("train.jsonl")).unwrap(),
        fs::read(f.data.join("train.jsonl")).unwrap()
    );

    let out = slt()
        .arg("gen-data")
        .arg("--config")
        .arg(&f.config)
        .arg("--out")
        .arg(f.root.join("bad_seed"))
        .env("SLT_SEED", "twelve")
        .output()
        .unwrap();
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("SLT_SEED"), "{}", stderr(&out));
}

#[test]
fn pretrain_visual_rerun_is_byte_identical() {
    let f = Fixture::new();
    let (out, dir1) = f.train("pretrain-visual", "v1", &[]);
    assert_ok(&out);
    assert!(stderr(&out).contains("pretrain_visual epoch"), "{}", stderr(&out));
    let (out, dir2) = f.train("pretrain-visual", "v2", &[]);
    assert_ok(&out);

    for name in ["checkpoint.sltc", "metrics.jsonl", "config.json"] {
        assert_eq!(
            fs::read(dir1.join(name)).unwrap(),
            fs::read(dir2.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
    let metrics = fs::read_to_string(dir1.join("metrics.jsonl")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 1);
    let log: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(log["epoch"], 0);
    assert!(log["dev_wer"].is_number());
}

#[test]
fn zero_epochs_keeps_the_seeded_initialization() {
    let f = Fixture::new();
    let (out, dir) = f.train("pretrain-visual", "init_only", &["--epochs", "0"]);
    assert_ok(&out);
    assert_eq!(fs::read_to_string(dir.join("metrics.jsonl")).unwrap(), "");

    let model = load_checkpoint(&dir.join("checkpoint.sltc")).unwrap();

    // Rebuild the initialization the trainer performs: gloss labels from all
    // three splits, encoder dimensions from the config, train seed 7.
    let mut labels = BTreeSet::new();
    for name in ["train.jsonl", "dev.jsonl", "test.jsonl"] {
        for t in load_corpus(&f.data.join(name)).unwrap() {
            labels.extend(t.gloss);
        }
    }
    let vocab = GlossVocab::new(labels.into_iter().collect()).unwrap();
    let cfg = VisualEncoderConfig {
        input_dim: 6,
        backbone_dim: 8,
        repr_dim: 6,
        vocab_size: vocab.size(),
        backbone_blocks: 2,
        freeze_backbone: false,
    };
    let mut expected = ParamStore::new();
    VisualEncoder::new(cfg)
        .unwrap()
        .init_params(&mut expected, &mut derive_rng(7, "init/visual"));

    assert!(model.params.prefix_identical(&expected, ""));
}

#[test]
fn train_joint_requires_inits_or_an_explicit_waiver() {
    let f = Fixture::new();
    let (out, _) = f.train("train-joint", "joint", &[]);
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("--allow-scratch"), "{}", stderr(&out));

    // One flag without the other is the same usage error.
    let (out, _) = f.train(
        "train-joint",
        "joint",
        &["--init-visual", "does-not-matter.sltc"],
    );
    assert_exit(&out, 2);
}

#[test]
fn the_three_stage_recipe_runs_through_the_cli() {
    let f = Fixture::new();
    let (out, vdir) = f.train("pretrain-visual", "visual", &[]);
    assert_ok(&out);
    let (out, tdir) = f.train("pretrain-translation", "translation", &[]);
    assert_ok(&out);

    let visual_ckpt = vdir.join("checkpoint.sltc");
    let translation_ckpt = tdir.join("checkpoint.sltc");
    let (out, jdir) = f.train(
        "train-joint",
        "joint",
        &[
            "--init-visual",
            visual_ckpt.to_str().unwrap(),
            "--init-translation",
            translation_ckpt.to_str().unwrap(),
        ],
    );
    assert_ok(&out);

    let model = load_checkpoint(&jdir.join("checkpoint.sltc")).unwrap();
    assert_eq!(model.stages, ["pretrain_visual", "pretrain_translation", "train_joint"]);
    assert!(model.mapper_cfg.is_some());

    let out = f.evaluate("sign2text", &jdir.join("checkpoint.sltc"));
    assert_ok(&out);
    let text = stdout(&out);
    assert_eq!(text.trim().lines().count(), 1, "one JSON line expected:\n{text}");
    let report: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(report["task"], "sign2text");
    assert_eq!(report["split"], "test");
    assert_eq!(report["n_samples"], 2);
    let bleu = report["bleu"].as_array().unwrap();
    assert_eq!(bleu.len(), 4);
    assert!(bleu.iter().all(serde_json::Value::is_number));
    assert!(report["rouge"].is_number());
    assert!(report.get("wer").is_none());
    assert_eq!(report["decode"]["beam_width"], 4);
    assert_eq!(report["decode"]["length_penalty"], 1.0);
}

#[test]
fn evaluate_sign2gloss_reports_wer_and_the_width_sweep() {
    let f = Fixture::new();
    let (out, vdir) = f.train("pretrain-visual", "visual", &[]);
    assert_ok(&out);

    let out = f.evaluate("sign2gloss", &vdir.join("checkpoint.sltc"));
    assert_ok(&out);
    let report: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(report["task"], "sign2gloss");
    assert!(report["wer"].is_number());
    assert!(report.get("bleu").is_none());
    let width = report["decode"]["ctc_width"].as_u64().unwrap();
    assert!((1..=10).contains(&width));
    // One dev score per swept width.
    assert_eq!(report["decode"]["dev_wer_by_width"].as_object().unwrap().len(), 10);
}

#[test]
fn evaluate_rejects_unknown_tasks_and_missing_components() {
    let f = Fixture::new();
    let (out, vdir) = f.train("pretrain-visual", "visual", &[]);
    assert_ok(&out);
    let ckpt = vdir.join("checkpoint.sltc");

    let out = f.evaluate("dance", &ckpt);
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("sign2gloss2text"), "{}", stderr(&out));

    // A visual-only checkpoint cannot serve the end-to-end task.
    let out = f.evaluate("sign2text", &ckpt);
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("mapper"), "{}", stderr(&out));
}

#[test]
fn missing_data_directory_is_an_environment_error() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("run.json");
    fs::write(&config, TINY_CONFIG).unwrap();
    let out = slt()
        .arg("pretrain-visual")
        .arg("--config")
        .arg(&config)
        .arg("--data")
        .arg(dir.path().join("nowhere"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_exit(&out, 1);
    assert!(stderr(&out).contains("train.jsonl"), "{}", stderr(&out));
}

#[test]
fn corrupt_checkpoint_is_an_environment_error() {
    let f = Fixture::new();
    let bad = f.root.join("bad.sltc");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let out = f.evaluate("sign2gloss", &bad);
    assert_exit(&out, 1);
}
