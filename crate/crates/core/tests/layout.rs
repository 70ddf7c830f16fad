//! On-disk dataset layout, synthetic generation and bundle files.

use std::fs;
use std::path::Path;

use kpvp_core::config::Config;
use kpvp_core::data::{
    dataset_digest, generate_synthetic_dataset, load_dataset, render_synthetic_clip, write_frame, DatasetSpec,
    SynthKind, SynthSpec, ALL_SPLIT,
};
use kpvp_core::motion::extract_pseudo_labels;
use kpvp_core::pipeline::{load_bundle, predict_video, save_bundle};
use kpvp_core::translator::detect_keypoints;
use kpvp_core::{ActionCode, Error, Frame, ModelBundle};

fn spec(kind: SynthKind, count: usize, length: usize, classes: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        kind,
        count,
        length,
        image_size: [24, 32],
        classes,
        seed,
    }
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synthetic_dataset_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let s = spec(SynthKind::BouncingShapes, 4, 5, 2, 21);
    generate_synthetic_dataset(&s, a.path()).unwrap();
    generate_synthetic_dataset(&s, b.path()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
    assert_eq!(dataset_digest(a.path()).unwrap(), dataset_digest(b.path()).unwrap());
}

#[test]
fn synthetic_round_trip_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec(SynthKind::MovingDisc, 3, 4, 2, 5);
    generate_synthetic_dataset(&s, dir.path()).unwrap();
    let data = load_dataset(&DatasetSpec::new(dir.path(), ALL_SPLIT, [24, 32])).unwrap();
    assert_eq!(data.clips.len(), 3);
    for (i, clip) in data.clips.iter().enumerate() {
        let rendered = render_synthetic_clip(&s, i);
        assert_eq!(clip.action.index(), Some(rendered.action));
        for (t, f) in rendered.frames.iter().enumerate() {
            let loaded = clip.frame(t).unwrap();
            let worst = f
                .pixels()
                .data()
                .iter()
                .zip(loaded.pixels().data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(worst <= 1.0 / 255.0 + 1e-6, "clip {i} frame {t}: {worst}");
        }
        let centers = clip.centers.as_ref().unwrap();
        for (got, want) in centers.iter().zip(&rendered.centers) {
            for (g, w) in got.iter().zip(want) {
                // centers are stored with four decimals
                assert!((g[0] - w[0]).abs() <= 5e-5 && (g[1] - w[1]).abs() <= 5e-5);
            }
        }
    }
}

#[test]
fn class_trajectories_differ() {
    for kind in [SynthKind::MovingDisc, SynthKind::TwoPartPendulum, SynthKind::BouncingShapes] {
        let s = SynthSpec {
            image_size: [64, 64],
            ..spec(kind, 2, 20, 2, 7)
        };
        let (a, b) = (render_synthetic_clip(&s, 0), render_synthetic_clip(&s, 1));
        assert_ne!(a.action, b.action);
        let gap: f64 = a
            .centers
            .iter()
            .zip(&b.centers)
            .map(|(p, q)| ((p[0][0] - q[0][0]).powi(2) + (p[0][1] - q[0][1]).powi(2)).sqrt())
            .sum::<f64>()
            / a.centers.len() as f64;
        assert!(gap > 5.0, "{kind}: mean gap {gap} px");
    }
}

#[test]
fn loader_handles_empty_and_short_clips() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("actions.txt"), "walk\nrun\n").unwrap();
    fs::create_dir_all(root.join("videos")).unwrap();
    let spec = DatasetSpec::new(root, ALL_SPLIT, [4, 4]);
    assert!(load_dataset(&spec).unwrap().clips.is_empty());

    let clip = root.join("videos/one");
    fs::create_dir_all(&clip).unwrap();
    write_frame(&Frame::filled(4, 4, [0.0; 3]), &clip.join("frame_000001.png")).unwrap();
    fs::write(clip.join("meta"), "action: run\nnum_frames: 1\n").unwrap();
    let err = load_dataset(&spec).unwrap_err();
    assert!(matches!(err, Error::Data { .. }) && err.to_string().contains("too short"), "{err}");

    write_frame(&Frame::filled(4, 4, [0.0; 3]), &clip.join("frame_000003.png")).unwrap();
    fs::write(clip.join("meta"), "action: run\nnum_frames: 2\n").unwrap();
    assert!(load_dataset(&spec).unwrap_err().to_string().contains("contiguous"));

    fs::rename(clip.join("frame_000003.png"), clip.join("frame_000002.png")).unwrap();
    fs::write(clip.join("meta"), "action: swim\nnum_frames: 2\n").unwrap();
    assert!(load_dataset(&spec).unwrap_err().to_string().contains("unknown action"));

    fs::write(clip.join("meta"), "action: run\nnum_frames: 2\n").unwrap();
    let data = load_dataset(&spec).unwrap();
    assert_eq!(data.clips[0].action, ActionCode::one_hot(1, 2).unwrap());

    fs::remove_file(clip.join("meta")).unwrap();
    assert!(load_dataset(&spec).unwrap_err().to_string().contains("missing metadata"));
}

#[test]
fn loader_order_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(&spec(SynthKind::MovingDisc, 12, 3, 2, 1), dir.path()).unwrap();
    let ids = || -> Vec<String> {
        load_dataset(&DatasetSpec::new(dir.path(), "train", [24, 32]))
            .unwrap()
            .clips
            .into_iter()
            .map(|c| c.id)
            .collect()
    };
    let first = ids();
    assert_eq!(first.len(), 11);
    assert!(first.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(first, ids());
}

fn small_bundle() -> ModelBundle {
    let mut cfg = Config::default();
    cfg.hyper.keypoints = 3;
    cfg.hyper.image_size = [24, 32];
    cfg.hyper.action_count = 2;
    cfg.hyper.latent_dim = 4;
    cfg.hyper.horizon = 5;
    cfg.translator.base_channels = 4;
    cfg.translator.depth = 2;
    cfg.translator.discriminator_blocks = 2;
    cfg.motion.hidden = 8;
    cfg.motion.discriminator_channels = 4;
    let mut b = ModelBundle::new(cfg, vec!["a".into(), "b".into()]).unwrap();
    b.stage1 = Some(b.stage1_nets().unwrap().init(3));
    b.stage2 = Some(b.stage2_nets().unwrap().init(4));
    b
}

#[test]
fn pseudo_labels_are_framewise_detections() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(&spec(SynthKind::TwoPartPendulum, 2, 5, 2, 9), dir.path()).unwrap();
    let data = load_dataset(&DatasetSpec::new(dir.path(), ALL_SPLIT, [24, 32])).unwrap();
    let bundle = small_bundle();
    let (nets, p) = bundle.require_stage1().unwrap();
    for clip in &data.clips {
        let seq = extract_pseudo_labels(clip, &nets.detector, &p.detector).unwrap();
        assert_eq!(seq.len(), 5);
        for (t, k) in seq.frames().iter().enumerate() {
            assert_eq!(*k, detect_keypoints(&clip.frame(t).unwrap(), &nets.detector, &p.detector).unwrap());
        }
        assert_eq!(seq, extract_pseudo_labels(clip, &nets.detector, &p.detector).unwrap());
    }
}

#[test]
fn saved_bundles_reproduce_predictions_and_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = small_bundle();
    let (p1, p2) = (dir.path().join("a.kpvp"), dir.path().join("b.kpvp"));
    save_bundle(&bundle, &p1).unwrap();
    let loaded = load_bundle(&p1).unwrap();
    save_bundle(&loaded, &p2).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

    let v0 = render_synthetic_clip(&spec(SynthKind::MovingDisc, 1, 2, 2, 0), 0).frames[0].clone();
    let a = ActionCode::one_hot(0, 2).unwrap();
    let before = predict_video(&v0, &a, 6, &bundle, 17, true).unwrap();
    let after = predict_video(&v0, &a, 6, &loaded, 17, true).unwrap();
    assert_eq!(before.frames, after.frames);
    assert_eq!(before.keypoints, after.keypoints);
    let d = after.diagnostics.unwrap();
    assert_eq!((d.masks.len(), d.synthesized.len()), (6, 6));
    assert!(d.masks.iter().all(|m| m.values().data().iter().all(|v| (0.0..=1.0).contains(v))));

    let mut bytes = fs::read(&p1).unwrap();
    bytes.truncate(bytes.len() - 7);
    fs::write(&p2, &bytes).unwrap();
    assert!(matches!(load_bundle(&p2), Err(Error::Checkpoint(_))));
}
