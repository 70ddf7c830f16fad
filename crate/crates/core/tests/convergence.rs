//! Small training runs whose outcomes are the convergence oracles.

use kpvp_core::config::{Config, MotionConfig};
use kpvp_core::motion::{
    decode_motion, encode_motion, MotionExample, MotionTrainer, Stage2Metrics, Stage2Nets,
};
use kpvp_core::translator::{Stage1Nets, TranslatorTrainer};
use kpvp_core::{ActionCode, Frame, HyperParams, KeypointSequence, KeypointSet, LatentCode};

fn blob(h: usize, w: usize, cx: f32, cy: f32) -> Frame {
    Frame::from_fn(h, w, |y, x, c| {
        let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
        let bg = -0.6 + 0.1 * ((x + 2 * y) as f32 * 0.4).sin();
        let fg = (-d2 / 6.0).exp();
        (bg + 1.5 * fg * [1.0, 0.7, 0.4][c]).clamp(-1.0, 1.0)
    })
    .unwrap()
}

#[test]
fn translator_overfits_a_single_pair() {
    let mut cfg = Config::default();
    cfg.hyper.keypoints = 2;
    cfg.hyper.image_size = [16, 16];
    cfg.hyper.learning_rate = 1e-3;
    cfg.translator.base_channels = 4;
    cfg.translator.depth = 2;
    cfg.translator.discriminator_blocks = 2;
    cfg.translator.detector_residual_blocks = 1;
    let nets = Stage1Nets::new(&cfg).unwrap();
    let params = nets.init(3);
    let mut trainer = TranslatorTrainer::new(nets, params, &cfg.hyper).unwrap();
    let pair = vec![(blob(16, 16, 4.0, 5.0), blob(16, 16, 11.0, 9.0))];
    let mut at10 = None;
    let mut last = 0.0;
    for s in 1..=500 {
        let m = trainer.step(&pair).unwrap();
        if s == 10 {
            at10 = Some(m.perceptual);
        }
        last = m.perceptual;
    }
    let at10 = at10.unwrap();
    assert!(last <= 0.5 * at10, "perceptual {at10} at step 10 -> {last} at step 500");
}

fn sequence(t: usize, phase: f64, radius: f64) -> KeypointSequence {
    let frames = (0..=t)
        .map(|i| {
            let a = phase + 0.35 * i as f64;
            KeypointSet::new(vec![
                [radius * a.cos(), radius * a.sin()],
                [-0.3 + 0.05 * i as f64, 0.2 * (a * 0.5).sin()],
            ])
            .unwrap()
        })
        .collect();
    KeypointSequence::new(frames).unwrap()
}

fn motion_setup(t: usize, lr: f64) -> (HyperParams, MotionConfig) {
    let hyper = HyperParams {
        keypoints: 2,
        horizon: t,
        latent_dim: 4,
        action_count: 2,
        learning_rate: lr,
        ..HyperParams::default()
    };
    let cfg = MotionConfig {
        hidden: 32,
        discriminator_channels: 8,
        ..MotionConfig::default()
    };
    (hyper, cfg)
}

fn train(examples: &[MotionExample], hyper: &HyperParams, cfg: &MotionConfig, steps: usize) -> (MotionTrainer, Vec<Stage2Metrics>) {
    let nets = Stage2Nets::new(hyper, cfg).unwrap();
    let params = nets.init(5);
    let mut trainer = MotionTrainer::new(nets, params, hyper, 9).unwrap();
    let log = (0..steps).map(|_| trainer.step(examples).unwrap()).collect();
    (trainer, log)
}

fn posterior_reconstruction(trainer: &MotionTrainer, ex: &MotionExample, t: usize) -> KeypointSequence {
    let net = &trainer.nets().motion;
    let p = &trainer.params().motion;
    let q = encode_motion(&ex.sequence, &ex.action, net, p).unwrap();
    let k0 = &ex.sequence.frames()[0];
    let future = decode_motion(&LatentCode(q.mean().to_vec()), k0, &ex.action, t, net, p).unwrap();
    let mut frames = vec![k0.clone()];
    frames.extend(future.frames().iter().cloned());
    KeypointSequence::new(frames).unwrap()
}

#[test]
fn motion_overfits_a_single_sequence() {
    let t = 8;
    let (hyper, cfg) = motion_setup(t, 1e-3);
    let ex = MotionExample {
        sequence: sequence(t, 0.4, 0.6),
        action: ActionCode::one_hot(1, 2).unwrap(),
    };
    let (trainer, log) = train(std::slice::from_ref(&ex), &hyper, &cfg, 2000);
    let recon = posterior_reconstruction(&trainer, &ex, t);
    let l1 = recon.mean_l1(&ex.sequence).unwrap();
    assert!(l1 < 0.05, "posterior reconstruction L1 {l1}");
    let tail = &log[log.len() - 200..];
    let kl = tail.iter().map(|m| m.kl).sum::<f64>() / tail.len() as f64;
    assert!(kl.is_finite() && kl > 0.0 && kl < 10.0, "KL plateau {kl}");
}

#[test]
fn trained_encoder_separates_sequences_and_reconstructs_them() {
    let t = 6;
    let (hyper, cfg) = motion_setup(t, 1e-3);
    let examples: Vec<MotionExample> = (0..6)
        .map(|i| MotionExample {
            sequence: sequence(t, i as f64 * 1.1, 0.3 + 0.08 * i as f64),
            action: ActionCode::one_hot(i % 2, 2).unwrap(),
        })
        .collect();
    let (trainer, _) = train(&examples, &hyper, &cfg, 1500);
    let net = &trainer.nets().motion;
    let p = &trainer.params().motion;
    let q0 = encode_motion(&examples[0].sequence, &examples[0].action, net, p).unwrap();
    let q2 = encode_motion(&examples[2].sequence, &examples[2].action, net, p).unwrap();
    let gap: f64 = q0.mean().iter().zip(q2.mean()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(gap > 0.0);

    // Baseline: L1 between distinct training sequences.
    let mut between = Vec::new();
    for (i, a) in examples.iter().enumerate() {
        for b in &examples[i + 1..] {
            between.push(a.sequence.mean_l1(&b.sequence).unwrap());
        }
    }
    let mean = between.iter().sum::<f64>() / between.len() as f64;
    let std = (between.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / between.len() as f64).sqrt();
    for ex in &examples {
        let l1 = posterior_reconstruction(&trainer, ex, t).mean_l1(&ex.sequence).unwrap();
        assert!(l1 < mean - std, "reconstruction {l1} vs baseline {mean} - {std}");
    }
}
