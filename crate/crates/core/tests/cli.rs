mod fixture;

use std::time::Duration;

use fixture::cli::{code, ok, platescope, toy_pipeline};
use platescope::config::RunConfig;

fn stderr(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn toy_pipeline_beats_three_times_chance() {
    let dir = tempfile::tempdir().unwrap();
    let smoke = toy_pipeline(dir.path());
    assert!(smoke.elapsed < Duration::from_secs(300), "took {:?}", smoke.elapsed);
    assert!(smoke.accuracy > 0.375, "accuracy {}", smoke.accuracy);
    for f in ["member0.ckpt", "member1.ckpt", "stats.json", "train_log.json", "pseudo_labels.json", "eval.json"] {
        assert!(dir.path().join("run").join(f).exists(), "missing {f}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let p = |n: &str| d.path().join(n).display().to_string();
        ok(&["generate", "--preset", "toy", "--set", "synthetic.seed=5", "--out", &p("data")]);
        ok(&["train", "--preset", "toy", "--set", "train.total_epochs=4", "--dataset", &p("data"), "--out", &p("run")]);
        ok(&["evaluate", "--checkpoints", &p("run"), "--dataset", &p("data")]);
    }
    for f in ["data/images.bin", "data/manifest.json", "run/member0.ckpt", "run/member1.ckpt", "run/predictions.json", "run/train_log.json"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn dump_defaults_round_trips() {
    let out = ok(&["config", "--dump-defaults", "--preset", "toy"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(RunConfig::from_json(&text).unwrap(), RunConfig::toy());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, &text).unwrap();
    let again = ok(&["config", "--dump-defaults", "--preset", "default", "--config", path.to_str().unwrap()]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn usage_errors_exit_with_code_3() {
    let out = platescope(&["train", "--bogus"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("Usage"));
    assert_eq!(code(&platescope(&["explode"])), 3);
    let out = platescope(&["config", "--set", "train.nope=1"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("error code=3 kind=config"));
}

#[test]
fn malformed_config_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{ \"train\": { \"batch_size\": ").unwrap();
    assert_eq!(code(&platescope(&["config", "--config", path.to_str().unwrap()])), 3);
    std::fs::write(&path, r#"{"train": {"ema_decay": 2.0}}"#).unwrap();
    assert_eq!(code(&platescope(&["config", "--config", path.to_str().unwrap()])), 3);
}

#[test]
fn missing_files_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere").display().to_string();
    let out = platescope(&["train", "--preset", "toy", "--dataset", &missing, "--out", &missing]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("error code=2 kind=io"));
    let out = platescope(&["config", "--config", &missing]);
    assert_eq!(code(&out), 2);
}

#[test]
fn broken_invariants_exit_with_code_4() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).display().to_string();
    ok(&["generate", "--preset", "toy", "--out", &p("data")]);
    // predictions that leave out the hidden-label wells
    std::fs::write(dir.path().join("preds.json"), r#"{"0": [1.0, 0, 0, 0, 0, 0, 0, 0]}"#).unwrap();
    let out = platescope(&["postprocess", "--predictions", &p("preds.json"), "--manifest", &p("data"), "--out", &p("o.csv")]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("kind=invariant"));

    let images = dir.path().join("data/images.bin");
    let mut bytes = std::fs::read(&images).unwrap();
    let k = bytes.len() / 2;
    bytes[k] ^= 0xff;
    std::fs::write(&images, bytes).unwrap();
    let out = platescope(&["train", "--preset", "toy", "--dataset", &p("data"), "--out", &p("run")]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("kind=format"));
}
