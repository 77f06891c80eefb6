use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn rationale(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rationale"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("RATIONALE_OUT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn ok(o: Output) -> Output {
    assert_eq!(
        code(&o),
        0,
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn arrays(ckpt: &Path) -> Value {
    json(ckpt)["arrays"].clone()
}

#[test]
fn generate_tiny_writes_files_with_stable_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let mut hashes = Vec::new();
    for name in ["first", "second"] {
        ok(rationale(
            tmp.path(),
            &["--preset", "tiny", "generate", "--name", name],
        ));
        let dir = tmp.path().join("worlds").join(name);
        for f in ["train.jsonl", "test.jsonl", "manifest.json"] {
            assert!(dir.join(f).exists(), "{f} missing");
        }
        hashes.push(json(&dir.join("manifest.json"))["hash"].clone());
    }
    assert_eq!(hashes[0], hashes[1]);
    assert!(hashes[0].as_str().is_some_and(|h| h.len() == 64));
}

#[test]
fn saved_world_is_reloaded_and_trained_on() {
    let tmp = tempfile::tempdir().unwrap();
    ok(rationale(
        tmp.path(),
        &["--preset", "tiny", "generate", "--name", "w"],
    ));
    let dataset = tmp.path().join("worlds").join("w");
    let d = dataset.to_str().unwrap();
    ok(rationale(
        tmp.path(),
        &["--dataset", d, "--epochs", "1", "train"],
    ));
    let cfg = json(&tmp.path().join("run").join("effective_config.json"));
    assert_eq!(cfg["dataset"].as_str(), Some(d));

    // A tampered split no longer matches the recorded hash.
    let train = dataset.join("train.jsonl");
    let mut text = fs::read_to_string(&train).unwrap();
    text.push('\n');
    fs::write(&train, text).unwrap();
    let o = rationale(tmp.path(), &["--dataset", d, "--epochs", "1", "train"]);
    assert_ne!(code(&o), 0);
}

#[test]
fn invalid_spec_exits_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("bad.toml");
    fs::write(
        &spec,
        "n_categories = 0\nn_rationales = 4\nsignature_size = 2\nrationales_per_image = 1\n\
         patch_count = 4\npatch_dim = 4\nevidence_strength = 3.0\nnoise_sigma = 0.0\n\
         distractor_rate = 0.0\ntrain_per_category = 2\ntest_per_category = 1\nseed = 0\n",
    )
    .unwrap();
    let o = rationale(tmp.path(), &["generate", "--spec", spec.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("categories"));
}

#[test]
fn missing_files_exit_with_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.toml");
    let o = rationale(
        tmp.path(),
        &["--config", missing.to_str().unwrap(), "train"],
    );
    assert_eq!(code(&o), 4);
    let ckpt = tmp.path().join("nope.json");
    let o = rationale(
        tmp.path(),
        &[
            "--preset",
            "tiny",
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 4);
}

#[test]
fn unknown_dataset_is_rejected_before_running() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rationale(tmp.path(), &["--dataset", "/definitely/not/here", "train"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn deep_mode_with_one_image_layer_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("deep.toml");
    fs::write(&cfg, "preset = \"tiny\"\n[model]\nn_image_layers = 1\n").unwrap();
    let o = rationale(
        tmp.path(),
        &["--config", cfg.to_str().unwrap(), "--mode", "deep", "train"],
    );
    assert_eq!(code(&o), 2);
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn diverging_training_exits_with_numeric_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rationale(
        tmp.path(),
        &[
            "--preset", "tiny", "--epochs", "2", "train", "--lr", "1e300",
        ],
    );
    assert_eq!(code(&o), 3);
    let dump = json(&tmp.path().join("run").join("nan_dump.json"));
    assert!(dump["batch_ids"]
        .as_array()
        .is_some_and(|ids| !ids.is_empty()));
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ok(rationale(tmp.path(), &["gradcheck"]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
    assert!(tmp.path().join("run").join("gradcheck.json").exists());
}

#[test]
fn zero_learning_rate_leaves_parameters_at_init() {
    let tmp = tempfile::tempdir().unwrap();
    ok(rationale(
        tmp.path(),
        &["--preset", "tiny", "--epochs", "2", "train", "--lr", "0"],
    ));
    let run = tmp.path().join("run");
    assert_eq!(
        arrays(&run.join("init_checkpoint.json")),
        arrays(&run.join("checkpoint.json"))
    );
}

#[test]
fn resumed_run_reproduces_next_epoch_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let train = |run_id: &str, epochs: &str, resume: Option<&PathBuf>| {
        let mut args = vec![
            "--preset", "tiny", "--run-id", run_id, "--epochs", epochs, "train", "--scope", "all",
        ];
        let path;
        if let Some(p) = resume {
            path = p.to_str().unwrap().to_owned();
            args.extend(["--resume", path.as_str()]);
        }
        ok(rationale(tmp.path(), &args));
    };
    train("straight", "3", None);
    train("split", "2", None);
    let ckpt = tmp.path().join("split").join("checkpoint.json");
    train("split", "3", Some(&ckpt));

    let log =
        |run: &str| fs::read_to_string(tmp.path().join(run).join("train_log.ndjson")).unwrap();
    assert_eq!(log("straight"), log("split"));
    assert_eq!(log("split").lines().count(), 3);
    assert_eq!(
        arrays(&tmp.path().join("straight").join("checkpoint.json")),
        arrays(&tmp.path().join("split").join("checkpoint.json"))
    );
}

#[test]
fn eval_after_training_recovers_train_split_with_default_k() {
    let tmp = tempfile::tempdir().unwrap();
    for seed in ["0", "1", "2"] {
        let run_id = format!("s{seed}");
        ok(rationale(
            tmp.path(),
            &[
                "--preset", "tiny", "--seed", seed, "--run-id", &run_id, "train",
            ],
        ));
        let ckpt = tmp.path().join(&run_id).join("checkpoint.json");
        ok(rationale(
            tmp.path(),
            &[
                "--preset",
                "tiny",
                "--seed",
                seed,
                "--run-id",
                &run_id,
                "eval",
                "--train-split",
                "--checkpoint",
                ckpt.to_str().unwrap(),
            ],
        ));
        let report = json(&tmp.path().join(&run_id).join("eval").join("report.json"));
        let cell = &report["cells"][0];
        assert_eq!(cell["k"], 5);
        let counts: u64 = cell["quad"]["counts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap())
            .sum();
        assert_eq!(counts, cell["quad"]["n"].as_u64().unwrap());
        let rr = cell["quad"]["rr"].as_f64().unwrap();
        assert!(rr >= 0.95, "seed {seed}: train-split RR {rr}");
    }
}

#[test]
fn eval_rejects_checkpoint_from_another_model() {
    let tmp = tempfile::tempdir().unwrap();
    ok(rationale(
        tmp.path(),
        &["--preset", "tiny", "--epochs", "1", "train"],
    ));
    let ckpt = tmp.path().join("run").join("checkpoint.json");
    let o = rationale(
        tmp.path(),
        &[
            "--preset",
            "small",
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn ablate_emits_seven_rows() {
    let tmp = tempfile::tempdir().unwrap();
    ok(rationale(
        tmp.path(),
        &["--preset", "tiny", "--epochs", "1", "ablate"],
    ));
    let csv =
        fs::read_to_string(tmp.path().join("run").join("ablation").join("ablation.csv")).unwrap();
    let labels: Vec<_> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap())
        .collect();
    assert_eq!(labels, ["ECOR", "AB1", "AB2", "AB3", "AB4", "AB5", "AB6"]);
}

#[test]
fn zeroshot_grid_and_env_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_rationale"))
        .args([
            "--preset",
            "tiny",
            "--epochs",
            "2",
            "zeroshot",
            "--b-categories",
            "2",
        ])
        .env("RATIONALE_OUT", tmp.path())
        .output()
        .unwrap();
    ok(o);
    let csv =
        fs::read_to_string(tmp.path().join("run").join("zeroshot").join("zeroshot.csv")).unwrap();
    let datasets: Vec<_> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(datasets, ["A", "A->B", "untrained->A", "untrained->B"]);
}

#[test]
fn shipped_config_loads_and_flags_override_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/small.toml");
    ok(rationale(
        tmp.path(),
        &[
            "--config",
            cfg.to_str().unwrap(),
            "--preset",
            "tiny",
            "--epochs",
            "1",
            "--seed",
            "4",
            "train",
        ],
    ));
    let effective = json(&tmp.path().join("small-ecor").join("effective_config.json"));
    assert_eq!(effective["preset"], "tiny");
    assert_eq!(effective["train"]["epochs"], 1);
    assert_eq!(effective["train"]["seed"], 4);
    assert_eq!(effective["k"], 5);
}
