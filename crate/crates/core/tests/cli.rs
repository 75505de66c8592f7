//! End-to-end tests of the `peseg` binary: exit codes, output layout, and
//! the wiring between commands (checkpoints feeding later stages).

use std::path::Path;
use std::process::{Command, Output};

use peseg::data::load_masks;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_peseg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should run")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn assert_exit(args: &[&str], code: i32) -> String {
    let out = run(args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "command {:?}: stderr {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(
        err.lines().filter(|l| l.starts_with("error: ")).count() <= 1,
        "multi-line error report: {err}"
    );
    err
}

fn write_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "model": {
            "input_size": 32, "stem_channels": 6, "branch_widths": [4, 6, 8],
            "blocks_per_module": 1, "modules_per_stage": [1, 1, 1],
            "fused_channels": 8,
            "carafe": {"sigma": 2, "k_up": 5, "k_enc": 3, "c_mid": 4}
        },
        "discriminator": {"channel_widths": [4, 6, 1]},
        "training": {"epochs": 1, "batch_size": 4, "seg_lr": 0.01, "seed": 7},
        "phantom": {
            "image_size": 32, "n_slices_per_patient": 2,
            "lesion_radius_range": [1, 3]
        },
        "patients": 2
    });
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn usage_and_config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    // clap usage error
    assert_exit(&["synth", "--no-such-flag"], 2);

    // malformed JSON
    let bad = root.join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_exit(&["synth", "--config", bad.to_str().unwrap()], 2);

    // unknown key anywhere in the config
    let typo = root.join("typo.json");
    std::fs::write(&typo, r#"{"model": {"stem_chanels": 8}}"#).unwrap();
    let err = assert_exit(&["synth", "--config", typo.to_str().unwrap()], 2);
    assert!(err.contains("stem_chanels"), "should name the bad key: {err}");

    // phantom spec violating its own bounds (radius > image_size / 8)
    let bad_spec = root.join("spec.json");
    std::fs::write(
        &bad_spec,
        r#"{"phantom": {"image_size": 32, "lesion_radius_range": [2, 9]}}"#,
    )
    .unwrap();
    assert_exit(&["synth", "--config", bad_spec.to_str().unwrap()], 2);

    // train with no labeled source configured at all
    assert_exit(&["train"], 2);

    // eval without --pred
    assert_exit(&["eval", "--gt", root.to_str().unwrap()], 2);

    // bad domain-shift spec
    assert_exit(&["synth", "--domain-shift", "offset=1,bogus=2"], 2);
}

#[test]
fn missing_data_exits_3_and_missing_pretrain_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let gone = root.join("nope");
    let gone_s = gone.to_str().unwrap();

    assert_exit(&["train", "--labeled", gone_s], 3);
    assert_exit(&["predict", "--checkpoint", gone_s, "--input", gone_s], 3);
    assert_exit(&["eval", "--pred", gone_s, "--gt", gone_s], 3);

    // train-semi / finetune without an init checkpoint are pipeline errors.
    assert_exit(&["train-semi", "--labeled", gone_s, "--unlabeled", gone_s], 4);
    assert_exit(&["finetune", "--unlabeled", gone_s], 4);
}

#[test]
fn pipeline_wiring_and_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = write_config(root);
    let p = |s: &str| root.join(s).to_str().unwrap().to_owned();

    // synth: per-patient slice/mask trees plus a dataset descriptor.
    let synth_out = run_ok(&["synth", "--config", &cfg, "--out", &p("data")]);
    assert!(synth_out.contains("patients=2"), "{synth_out}");
    let ds: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("data/dataset.json")).unwrap())
            .unwrap();
    assert_eq!(ds["patients"].as_array().unwrap().len(), 2);
    let first_patient = ds["patients"][0].as_str().unwrap().to_owned();
    assert!(root.join("data").join(&first_patient).join("slices/0000.png").exists());
    assert!(root.join("data").join(&first_patient).join("masks/0000.png").exists());

    // train: epoch lines mirrored to train.log, manifest without lineage.
    let train_out = run_ok(&["train", "--config", &cfg, "--labeled", &p("data"), "--out", &p("t")]);
    assert!(train_out.contains("epoch 1/1 seg="), "{train_out}");
    let log = std::fs::read_to_string(root.join("t/train.log")).unwrap();
    assert!(train_out.contains(log.trim()), "log lines should mirror stdout");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("t/checkpoint/manifest.json")).unwrap())
            .unwrap();
    assert!(manifest.get("init_hash").is_none(), "cold start has no lineage");
    let train_hash = manifest["manifest_hash"].as_str().unwrap().to_owned();

    // Different seed must give different weights.
    run_ok(&[
        "train", "--config", &cfg, "--labeled", &p("data"), "--seed", "99", "--out", &p("t99"),
    ]);
    assert_ne!(
        std::fs::read(root.join("t/checkpoint/seg.params")).unwrap(),
        std::fs::read(root.join("t99/checkpoint/seg.params")).unwrap(),
        "seed flag had no effect"
    );

    // train-semi: records which checkpoint it started from.
    let semi_out = run_ok(&[
        "train-semi", "--config", &cfg, "--labeled", &p("data"), "--unlabeled", &p("data"),
        "--init", &p("t/checkpoint"), "--out", &p("s"),
    ]);
    assert!(semi_out.contains("disc="), "semi epochs report disc loss: {semi_out}");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("s/checkpoint/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["init_hash"].as_str().unwrap(), train_hash);
    assert!(root.join("s/checkpoint/disc.params").exists());

    // predict: raw then post-processed; cleanup may only remove pixels.
    run_ok(&[
        "predict", "--config", &cfg, "--checkpoint", &p("s/checkpoint"),
        "--input", &p("data"), "--out", &p("raw"),
    ]);
    let post_out = run_ok(&[
        "predict", "--config", &cfg, "--checkpoint", &p("s/checkpoint"),
        "--input", &p("data"), "--postprocess", "--overlay", "--out", &p("post"),
    ]);
    assert!(post_out.contains("2 masks"), "{post_out}");
    assert!(root.join("post").join(&first_patient).join("overlay/0000.png").exists());
    let raw = load_masks(&root.join("raw").join(&first_patient).join("masks")).unwrap();
    let post = load_masks(&root.join("post").join(&first_patient).join("masks")).unwrap();
    assert_eq!(raw.len(), post.len());
    for (r, q) in raw.iter().zip(&post) {
        for (a, b) in r.iter().zip(q.iter()) {
            assert!(b <= a, "post-processing added pixels");
        }
    }

    // eval: headline line plus a parseable report.
    let eval_out = run_ok(&["eval", "--pred", &p("raw"), "--gt", &p("data"), "--out", &p("e")]);
    let line = eval_out.lines().last().unwrap();
    assert!(line.starts_with("miou="), "{eval_out}");
    assert!(line.contains(" dice="), "{eval_out}");
    assert!(line.contains(" sensitivity="), "{eval_out}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("e/metrics.json")).unwrap())
            .unwrap();
    assert_eq!(report["aggregation"], "slice");
    assert_eq!(report["per_slice"].as_array().unwrap().len(), 4);
    assert!(report["aggregate"]["dice"].is_number());

    // Shape-mismatched predictions are a data error.
    assert_exit(&["eval", "--pred", &p("t"), "--gt", &p("data")], 3);
}
