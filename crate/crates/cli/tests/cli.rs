use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const KPVP: &str = env!("CARGO_BIN_EXE_kpvp");

fn kpvp(args: &[&str]) -> Output {
    Command::new(KPVP)
        .args(args)
        .env("RUST_LOG", "warn")
        .env("KPVP_DETERMINISTIC", "1")
        .output()
        .expect("run kpvp")
}

fn ok(args: &[&str]) {
    let out = kpvp(args);
    assert!(out.status.success(), "kpvp {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
[hyper]
keypoints = 2
image_size = [16, 16]
batch_size = 2
horizon = 4
action_count = 2
latent_dim = 2

[translator]
base_channels = 2
depth = 1
detector_strides = [1]
detector_residual_blocks = 0
discriminator_blocks = 1
perceptual_layers = [0, 1]

[motion]
hidden = 4
discriminator_channels = 2

[augment]
flip = false
rotation_degrees = 0.0
crop = false
color_strength = 0.0

[train]
translator_steps = 2
motion_steps = 2
log_every = 1
"#;

#[test]
fn usage_errors_exit_one() {
    assert_eq!(kpvp(&[]).status.code(), Some(1));
    assert_eq!(kpvp(&["synth", "--kind", "moving_disc"]).status.code(), Some(1));
    assert_eq!(kpvp(&["no-such-command"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = kpvp(&[
        "synth", "--kind", "spirals", "--count", "2", "--length", "3", "--size", "8x8", "--classes", "1", "--seed",
        "0", "--out", s(&dir.path().join("d")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    assert_eq!(kpvp(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = kpvp(&[
        "train-translator", "--config", s(&cfg), "--data", s(&dir.path().join("absent")), "--out",
        s(&dir.path().join("ck")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = kpvp(&["eval", "--bundle", s(&dir.path().join("nope.kpvp")), "--data", s(dir.path()), "--report", "r.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[hyper]\nkeypoints = 0\n").unwrap();
    let out = kpvp(&["train-translator", "--config", s(&cfg), "--data", s(dir.path()), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn full_pipeline_on_a_tiny_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let cfg = p("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    ok(&[
        "synth", "--kind", "two_part_pendulum", "--count", "10", "--length", "6", "--size", "16x16", "--classes", "2",
        "--seed", "3", "--out", s(&p("data")),
    ]);
    assert!(p("data/actions.txt").exists() && p("data/splits/test.txt").exists());

    ok(&["train-translator", "--config", s(&cfg), "--data", s(&p("data")), "--out", s(&p("s1"))]);
    for f in ["bundle.kpvp", "metrics.jsonl", "config.toml"] {
        assert!(p("s1").join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(p("s1/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    // Predicting before stage 2 is a state error.
    let frame = p("data/videos/clip_00000/frame_000001.png");
    let out = kpvp(&[
        "predict", "--bundle", s(&p("s1/bundle.kpvp")), "--image", s(&frame), "--action", "swing_right", "--frames",
        "3", "--seed", "1", "--out", s(&p("early")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    ok(&["extract-keypoints", "--ckpt", s(&p("s1/bundle.kpvp")), "--data", s(&p("data")), "--out", s(&p("labels.json"))]);
    let labels: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("labels.json")).unwrap()).unwrap();
    assert_eq!(labels["records"].as_array().unwrap().len(), 9);

    ok(&[
        "train-motion", "--config", s(&cfg), "--labels", s(&p("labels.json")), "--ckpt", s(&p("s1/bundle.kpvp")),
        "--out", s(&p("s2")),
    ]);
    let bundle = p("s2/bundle.kpvp");

    for run in ["a", "b"] {
        ok(&[
            "predict", "--bundle", s(&bundle), "--image", s(&frame), "--action", "swing_left", "--frames", "5", "--seed",
            "4", "--out", s(&p(run)), "--diagnostics",
        ]);
    }
    for t in 1..=5 {
        let name = format!("frame_{t:06}.png");
        assert_eq!(fs::read(p("a").join(&name)).unwrap(), fs::read(p("b").join(&name)).unwrap());
        assert!(p("a").join(format!("mask_{t:06}.png")).exists());
        assert!(p("a").join(format!("synth_{t:06}.png")).exists());
    }
    assert!(!p("a/frame_000006.png").exists());
    assert!(p("a/contact_sheet.png").exists() && p("a/keypoints.json").exists());

    let out = kpvp(&[
        "predict", "--bundle", s(&bundle), "--image", s(&frame), "--action", "jump", "--frames", "2", "--seed", "1",
        "--out", s(&p("c")),
    ]);
    assert_eq!(out.status.code(), Some(1));

    ok(&["eval", "--bundle", s(&bundle), "--data", s(&p("data")), "--report", s(&p("report.json"))]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("report.json")).unwrap()).unwrap();
    let names: Vec<&str> = report["metrics"].as_array().unwrap().iter().map(|m| m["metric"].as_str().unwrap()).collect();
    for m in ["reconstruction_l1", "keypoint_tracking_error_px"] {
        assert!(names.contains(&m), "{m} missing from {names:?}");
    }
    assert_eq!(report["bundle_digest"].as_str().unwrap().len(), 64);
}
