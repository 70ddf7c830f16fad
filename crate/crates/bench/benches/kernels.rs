use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use kpvp_core::config::Config;
use kpvp_core::evaluation::{frechet_distance, FeatureSource};
use kpvp_core::keypoint::{render_gaussian_maps, soft_argmax_var};
use kpvp_core::pipeline::predict_video;
use kpvp_core::{ActionCode, FeatureSet, Frame, KeypointSet, ModelBundle, Tape, Tensor};

fn wave(n: usize, scale: f64) -> impl Fn(usize) -> f64 {
    move |i| ((i * 7919 % n) as f64 * scale).sin()
}

fn conv(c: &mut Criterion) {
    let x = Tensor::<f32>::from_fn(vec![8, 16, 32, 32], |i| wave(1013, 0.01)(i) as f32);
    let w = Tensor::<f32>::from_fn(vec![32, 16, 3, 3], |i| wave(97, 0.1)(i) as f32 * 0.1);
    c.bench_function("conv2d_fwd_bwd_8x16x32x32", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let (xv, wv) = (tape.leaf(x.clone()), tape.leaf(w.clone()));
            let y = xv.conv2d(&wv, 1, 1).sqr().sum_all();
            black_box(tape.backward(&y));
        })
    });
}

fn keypoints(c: &mut Criterion) {
    let logits = Tensor::<f32>::from_fn(vec![8, 40, 32, 32], |i| wave(1021, 0.02)(i) as f32);
    c.bench_function("soft_argmax_8x40x32x32", |b| {
        b.iter(|| {
            let tape = Tape::new();
            black_box(soft_argmax_var(&tape.constant(logits.clone())).value().clone());
        })
    });
    let k = KeypointSet::new((0..40).map(|i| [(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect()).unwrap();
    c.bench_function("gaussian_maps_40x128x128", |b| {
        b.iter(|| black_box(render_gaussian_maps(&k, 128, 128, 0.1).unwrap()))
    });
}

fn predict(c: &mut Criterion) {
    let mut cfg = Config::default();
    cfg.hyper.keypoints = 4;
    cfg.hyper.image_size = [64, 64];
    cfg.hyper.action_count = 2;
    cfg.hyper.latent_dim = 8;
    cfg.translator.base_channels = 8;
    cfg.translator.depth = 3;
    cfg.translator.discriminator_blocks = 3;
    cfg.motion.hidden = 64;
    cfg.motion.discriminator_channels = 16;
    let mut bundle = ModelBundle::new(cfg, vec!["a".into(), "b".into()]).unwrap();
    bundle.stage1 = Some(bundle.stage1_nets().unwrap().init(1));
    bundle.stage2 = Some(bundle.stage2_nets().unwrap().init(2));
    let v0 = Frame::from_fn(64, 64, |y, x, ch| ((y * 3 + x * 5 + ch) % 11) as f32 / 5.5 - 1.0).unwrap();
    let a = ActionCode::one_hot(1, 2).unwrap();
    c.bench_function("predict_16_frames_64x64", |b| {
        b.iter(|| black_box(predict_video(&v0, &a, 16, &bundle, 7, false).unwrap()))
    });
}

fn frechet(c: &mut Criterion) {
    let rows = |shift: f64| -> Vec<Vec<f64>> {
        (0..256).map(|i| (0..64).map(|j| ((i * 64 + j) as f64 * 0.618).sin() + shift).collect()).collect()
    };
    let a = FeatureSet::new(&rows(0.0), FeatureSource::Real).unwrap();
    let b = FeatureSet::new(&rows(0.3), FeatureSource::Generated).unwrap();
    c.bench_function("frechet_256x64", |bch| bch.iter(|| black_box(frechet_distance(&a, &b).unwrap())));
}

criterion_group!(benches, conv, keypoints, predict, frechet);
criterion_main!(benches);
