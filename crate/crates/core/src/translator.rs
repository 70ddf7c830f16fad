//! Stage 1: keypoint detector, analogical image translator, image
//! discriminator, perceptual loss and the alternating trainer.
//!
//! Images travel through the networks as `[N, 3, H, W]` tensors; [`Frame`] is
//! the `H x W x 3` value type used at API boundaries.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Element, Tape, Tensor, Var};
use crate::config::{Config, HyperParams, TranslatorConfig};
use crate::error::{Error, Result};
use crate::keypoint::{gaussian_maps_var, soft_argmax_var, KeypointSet};
use crate::nn::{Adam, Binder, Conv2d, Linear, NetParams, ParamStore, StepDecay, LEAK};

/// Layout version of every stage-1 parameter collection.
pub const STAGE1_VERSION: u32 = 1;

/// Probability floor inside the adversarial logarithms.
pub const PROB_FLOOR: f64 = 1e-7;

// ---------------------------------------------------------------------------
// Frames

/// An RGB image, `H x W x 3`, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pixels: Tensor<f32>,
}

impl Frame {
    /// Rejects non-finite values; clamps the rest into `[-1, 1]`.
    pub fn new(pixels: Tensor<f32>) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[2] != 3 || s[0] == 0 || s[1] == 0 {
            return Err(Error::invalid(format!("frame must be H x W x 3, got {s:?}")));
        }
        if !pixels.all_finite() {
            return Err(Error::invalid("frame contains non-finite pixels"));
        }
        Ok(Self {
            pixels: pixels.map(|v| v.clamp(-1.0, 1.0)),
        })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        Self::new(Tensor::from_fn(vec![h, w, 3], |i| f(i / (3 * w), (i / 3) % w, i % 3)))
    }

    pub fn filled(h: usize, w: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(h, w, |_, _, c| rgb[c]).expect("constant frame is valid")
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn pixels(&self) -> &Tensor<f32> {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels.data()[(y * self.width() + x) * 3 + c]
    }

    /// Planar `3 x H x W` copy of the pixels.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.height() * self.width();
        let mut out = vec![0.0; 3 * plane];
        for (p, px) in self.pixels.data().chunks(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c];
            }
        }
        out
    }

    pub fn from_chw(h: usize, w: usize, chw: &[f32]) -> Result<Self> {
        let plane = h * w;
        if chw.len() != 3 * plane {
            return Err(Error::invalid("planar buffer does not match frame size"));
        }
        Self::from_fn(h, w, |y, x, c| chw[c * plane + y * w + x])
    }

    /// Mean absolute per-channel difference.
    pub fn mean_abs_diff(&self, other: &Frame) -> Result<f64> {
        if self.pixels.shape() != other.pixels.shape() {
            return Err(Error::invalid("frames differ in shape"));
        }
        let total: f64 = self
            .pixels
            .data()
            .iter()
            .zip(other.pixels.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok(total / self.pixels.len() as f64)
    }
}

/// Stacks frames into an `[N, 3, H, W]` batch.
pub fn frames_to_batch<E: Element>(frames: &[&Frame]) -> Result<Tensor<E>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("cannot batch zero frames"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(frames.len() * 3 * h * w);
    for f in frames {
        if f.height() != h || f.width() != w {
            return Err(Error::invalid("frames in a batch must share one size"));
        }
        data.extend(f.to_chw().into_iter().map(|v| E::lit(v as f64)));
    }
    Ok(Tensor::from_parts(vec![frames.len(), 3, h, w], data))
}

/// Splits an `[N, 3, H, W]` batch into frames.
pub fn batch_to_frames<E: Element>(batch: &Tensor<E>) -> Result<Vec<Frame>> {
    let s = batch.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::invalid(format!("expected [N, 3, H, W], got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    batch
        .data()
        .chunks(3 * h * w)
        .map(|c| {
            let v: Vec<f32> = c.iter().map(|x| x.to_f32().unwrap()).collect();
            Frame::from_chw(h, w, &v)
        })
        .collect()
}

/// Soft background gate `H x W x 1` in `[0, 1]`; 1 keeps the input pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundMask {
    values: Tensor<f32>,
}

impl BackgroundMask {
    pub fn new(values: Tensor<f32>) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[2] != 1 {
            return Err(Error::invalid(format!("mask must be H x W x 1, got {s:?}")));
        }
        if values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("mask values must lie in [0, 1]"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    /// Mean of `1 - m`, the share of the image synthesized rather than copied.
    pub fn coverage(&self) -> f64 {
        1.0 - self.values.data().iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    fn from_batch<E: Element>(batch: &Tensor<E>) -> Result<Vec<Self>> {
        let s = batch.shape();
        let (h, w) = (s[2], s[3]);
        batch
            .data()
            .chunks(h * w)
            .map(|c| {
                let v = c.iter().map(|x| x.to_f32().unwrap()).collect();
                Self::new(Tensor::new(vec![h, w, 1], v)?)
            })
            .collect()
    }
}

fn keypoints_to_batch<E: Element>(sets: &[&KeypointSet]) -> Tensor<E> {
    let k = sets[0].len();
    let data = sets
        .iter()
        .flat_map(|s| s.coords().iter().flat_map(|c| [E::lit(c[0]), E::lit(c[1])]))
        .collect();
    Tensor::from_parts(vec![sets.len(), k, 2], data)
}

fn batch_to_keypoints<E: Element>(t: &Tensor<E>) -> Result<Vec<KeypointSet>> {
    (0..t.shape()[0])
        .map(|i| KeypointSet::from_tensor(&t.index_outer(i)))
        .collect()
}

fn check_image(batch_shape: &[usize], size: [usize; 2], what: &str) -> Result<()> {
    if batch_shape.len() != 4 || batch_shape[1] != 3 || batch_shape[2..] != size {
        return Err(Error::config(format!(
            "{what}: images are {:?}, network expects 3 x {} x {}",
            &batch_shape[1..],
            size[0],
            size[1]
        )));
    }
    Ok(())
}

fn lrelu<'t, E: Element>(x: &Var<'t, E>) -> Var<'t, E> {
    x.leaky_relu(LEAK)
}

fn one_minus<'t, E: Element>(x: &Var<'t, E>) -> Var<'t, E> {
    x.neg().add_scalar(E::one())
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Detector

/// Init gain of the detector head. A peaked initial softmax makes the
/// untrained keypoints follow salient image structure.
const HEAD_GAIN: f64 = 10.0;

/// Output channel of the translator that carries the mask logit.
const MASK_CHANNEL: usize = 3;

/// Initial mask logit bias. Starting near m = 0 keeps the blend from
/// settling on a copy of the reference frame before the keypoints carry
/// any signal.
const MASK_BIAS_INIT: f64 = -4.0;

/// Keypoint detector: strided convolution blocks, residual blocks and a 1x1
/// head producing K logit maps, followed by soft-argmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub keypoints: usize,
    pub image_size: [usize; 2],
    blocks: Vec<Conv2d>,
    residual: Vec<[Conv2d; 2]>,
    head: Conv2d,
}

impl Detector {
    pub fn new(hyper: &HyperParams, cfg: &TranslatorConfig) -> Self {
        let c = cfg.base_channels;
        let mut blocks = Vec::new();
        let mut ch_in = 3;
        let mut ch = c;
        for (i, &s) in cfg.detector_strides.iter().enumerate() {
            if s == 2 && i > 0 {
                ch = (ch * 2).min(8 * c);
            }
            blocks.push(Conv2d::new(format!("det.block{i}"), ch_in, ch, 3, s));
            ch_in = ch;
        }
        let residual = (0..cfg.detector_residual_blocks)
            .map(|i| {
                [
                    Conv2d::new(format!("det.res{i}.a"), ch_in, ch_in, 3, 1),
                    Conv2d::new(format!("det.res{i}.b"), ch_in, ch_in, 3, 1),
                ]
            })
            .collect();
        Self {
            keypoints: hyper.keypoints,
            image_size: hyper.image_size,
            blocks,
            residual,
            head: Conv2d::new("det.head", ch_in, hyper.keypoints, 1, 1),
        }
    }

    /// Spatial size of the logit maps.
    pub fn logit_size(&self) -> [usize; 2] {
        let stride: usize = self.blocks.iter().map(|b| b.stride).product();
        [self.image_size[0] / stride, self.image_size[1] / stride]
    }

    pub fn init<E: Element>(&self, seed: u64) -> NetParams<E> {
        let mut rng = init_rng(seed);
        let mut store = ParamStore::new();
        for b in &self.blocks {
            b.init(&mut store, 1.0, &mut rng);
        }
        for [a, b] in &self.residual {
            a.init(&mut store, 1.0, &mut rng);
            b.init(&mut store, 0.1, &mut rng);
        }
        self.head.init(&mut store, HEAD_GAIN, &mut rng);
        NetParams::new(STAGE1_VERSION, store)
    }

    pub fn check<E: Element>(&self, p: &NetParams<E>) -> Result<()> {
        p.check_against(&self.init(0), "detector")
    }

    /// `[N, 3, H, W] -> [N, K, h', w']`.
    pub fn logits<'t, E: Element>(&self, p: &Binder<'t, '_, E>, x: &Var<'t, E>) -> Var<'t, E> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = lrelu(&b.forward(p, &h));
        }
        for [a, b] in &self.residual {
            h = h.add(&b.forward(p, &lrelu(&a.forward(p, &h))));
        }
        self.head.forward(p, &h)
    }

    /// `[N, 3, H, W] -> [N, K, 2]` normalized keypoints.
    pub fn keypoints<'t, E: Element>(&self, p: &Binder<'t, '_, E>, x: &Var<'t, E>) -> Var<'t, E> {
        soft_argmax_var(&self.logits(p, x))
    }

    /// Detects keypoints on each frame independently.
    pub fn detect(&self, params: &NetParams<f32>, frames: &[&Frame]) -> Result<Vec<KeypointSet>> {
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        let batch = frames_to_batch::<f32>(frames)?;
        check_image(batch.shape(), self.image_size, "detector")?;
        let tape = Tape::new();
        let p = Binder::frozen(&tape, &params.store);
        let k = self.keypoints(&p, &tape.constant(batch));
        batch_to_keypoints(k.value())
    }
}

/// Keypoints of a single frame.
pub fn detect_keypoints(v: &Frame, detector: &Detector, params: &NetParams<f32>) -> Result<KeypointSet> {
    detector.check(params)?;
    Ok(detector.detect(params, &[v])?.remove(0))
}

// ---------------------------------------------------------------------------
// Translator

/// How the blend mask is produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskMode {
    /// Predicted by the network (or zero when the mask is disabled).
    Learned,
    /// A constant mask; used to probe the blend.
    Fixed(f64),
}

/// Encoder-decoder with skip connections mapping `v ⊕ d(k_ref) ⊕ d(k_tgt)`
/// to a synthesized image and a background mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Translator {
    pub keypoints: usize,
    pub image_size: [usize; 2],
    pub sigma: f64,
    pub use_mask: bool,
    pub use_reference_keypoints: bool,
    pub multiscale_maps: bool,
    stem: Conv2d,
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
    out: Conv2d,
}

/// Graph outputs of one translation.
pub struct Translation<'t, E: Element> {
    /// `[N, 1, H, W]`
    pub mask: Var<'t, E>,
    /// `[N, 3, H, W]`
    pub synth: Var<'t, E>,
    /// `mask * v + (1 - mask) * synth`
    pub blended: Var<'t, E>,
}

impl Translator {
    pub fn new(hyper: &HyperParams, cfg: &TranslatorConfig) -> Self {
        let c = cfg.base_channels;
        let k = hyper.keypoints;
        let width = |level: usize| (c << level.min(3)).max(1);
        let mut down = Vec::new();
        let mut up = Vec::new();
        for i in 0..cfg.depth {
            down.push(Conv2d::new(format!("tr.down{i}"), width(i), width(i + 1), 3, 2));
            let maps = if cfg.multiscale_maps { 2 * k } else { 0 };
            up.push(Conv2d::new(
                format!("tr.up{i}"),
                width(i + 1) + width(i) + maps,
                width(i),
                3,
                1,
            ));
        }
        Self {
            keypoints: k,
            image_size: hyper.image_size,
            sigma: hyper.sigma,
            use_mask: cfg.use_mask,
            use_reference_keypoints: cfg.use_reference_keypoints,
            multiscale_maps: cfg.multiscale_maps,
            stem: Conv2d::new("tr.stem", 3 + 2 * k, c, 3, 1),
            down,
            up,
            out: Conv2d::new("tr.out", c, 4, 3, 1),
        }
    }

    pub fn init<E: Element>(&self, seed: u64) -> NetParams<E> {
        let mut rng = init_rng(seed);
        let mut store = ParamStore::new();
        self.stem.init(&mut store, 1.0, &mut rng);
        for c in self.down.iter().chain(&self.up) {
            c.init(&mut store, 1.0, &mut rng);
        }
        self.out.init(&mut store, 0.5, &mut rng);
        if let Some(bias) = store.get_mut("tr.out.bias") {
            bias.data_mut()[MASK_CHANNEL] = E::from_f64(MASK_BIAS_INIT).expect("finite");
        }
        NetParams::new(STAGE1_VERSION, store)
    }

    pub fn check<E: Element>(&self, p: &NetParams<E>) -> Result<()> {
        p.check_against(&self.init(0), "translator")
    }

    fn maps<'t, E: Element>(&self, k_ref: &Var<'t, E>, k_tgt: &Var<'t, E>, h: usize, w: usize) -> Var<'t, E> {
        let tgt = gaussian_maps_var(k_tgt, h, w, self.sigma);
        let reference = if self.use_reference_keypoints {
            gaussian_maps_var(k_ref, h, w, self.sigma)
        } else {
            tgt.tape().constant(Tensor::zeros(tgt.shape().to_vec()))
        };
        Var::concat(&[&reference, &tgt], 1)
    }

    /// `v [N, 3, H, W]`, keypoints `[N, K, 2]`.
    pub fn forward<'t, E: Element>(
        &self,
        p: &Binder<'t, '_, E>,
        v: &Var<'t, E>,
        k_ref: &Var<'t, E>,
        k_tgt: &Var<'t, E>,
        mode: MaskMode,
    ) -> Translation<'t, E> {
        let [h, w] = self.image_size;
        let x = Var::concat(&[v, &self.maps(k_ref, k_tgt, h, w)], 1);
        let mut skips = vec![lrelu(&self.stem.forward(p, &x))];
        for d in &self.down {
            let next = lrelu(&d.forward(p, skips.last().unwrap()));
            skips.push(next);
        }
        let mut y = skips.pop().unwrap();
        for (i, u) in self.up.iter().enumerate().rev() {
            let skip = &skips[i];
            let up = y.upsample_nearest(2);
            y = if self.multiscale_maps {
                let m = self.maps(k_ref, k_tgt, skip.shape()[2], skip.shape()[3]);
                Var::concat(&[&up, skip, &m], 1)
            } else {
                Var::concat(&[&up, skip], 1)
            };
            y = lrelu(&u.forward(p, &y));
        }
        let raw = self.out.forward(p, &y);
        let synth = raw.narrow(1, 0, 3).tanh();
        let n = v.shape()[0];
        let constant = |value: f64| v.tape().constant(Tensor::full(vec![n, 1, h, w], E::lit(value)));
        let mask = match mode {
            MaskMode::Fixed(m) => constant(m),
            MaskMode::Learned if self.use_mask => raw.narrow(1, MASK_CHANNEL, 1).sigmoid(),
            MaskMode::Learned => constant(0.0),
        };
        let blended = Var::blend(&mask, v, &synth);
        Translation {
            mask,
            synth,
            blended,
        }
    }
}

/// Value-level outputs of [`translate`].
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationResult {
    pub mask: BackgroundMask,
    pub synth: Frame,
    pub blended: Frame,
}

/// Translates `v` from the pose `k_ref` to the pose `k_tgt`.
pub fn translate(
    v: &Frame,
    k_ref: &KeypointSet,
    k_tgt: &KeypointSet,
    translator: &Translator,
    params: &NetParams<f32>,
    mode: MaskMode,
) -> Result<TranslationResult> {
    let mut out = translate_batch(v, k_ref, &[k_tgt], translator, params, mode)?;
    Ok(out.remove(0))
}

/// Translates one reference frame to several target poses in one batch.
pub fn translate_batch(
    v: &Frame,
    k_ref: &KeypointSet,
    targets: &[&KeypointSet],
    translator: &Translator,
    params: &NetParams<f32>,
    mode: MaskMode,
) -> Result<Vec<TranslationResult>> {
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    let k = translator.keypoints;
    if k_ref.len() != k || targets.iter().any(|t| t.len() != k) {
        return Err(Error::config(format!("translator expects {k} keypoints per set")));
    }
    translator.check(params)?;
    let n = targets.len();
    let refs: Vec<&Frame> = vec![v; n];
    let batch = frames_to_batch::<f32>(&refs)?;
    check_image(batch.shape(), translator.image_size, "translator")?;
    let tape = Tape::new();
    let p = Binder::frozen(&tape, &params.store);
    let kr = tape.constant(keypoints_to_batch(&vec![k_ref; n]));
    let kt = tape.constant(keypoints_to_batch(targets));
    let t = translator.forward(&p, &tape.constant(batch), &kr, &kt, mode);
    let masks = BackgroundMask::from_batch(t.mask.value())?;
    let synth = batch_to_frames(t.synth.value())?;
    let blended = batch_to_frames(t.blended.value())?;
    Ok(masks
        .into_iter()
        .zip(synth)
        .zip(blended)
        .map(|((mask, synth), blended)| TranslationResult {
            mask,
            synth,
            blended,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Image discriminator

/// Strided convolutional real/fake classifier with a sigmoid output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDiscriminator {
    pub image_size: [usize; 2],
    blocks: Vec<Conv2d>,
    head: Linear,
}

impl ImageDiscriminator {
    pub fn new(hyper: &HyperParams, cfg: &TranslatorConfig) -> Self {
        let c = cfg.base_channels;
        let mut blocks = Vec::new();
        let mut ch_in = 3;
        for i in 0..cfg.discriminator_blocks {
            let ch = c << i.min(3);
            blocks.push(Conv2d::new(format!("dim.block{i}"), ch_in, ch, 3, 2));
            ch_in = ch;
        }
        let f = 1usize << cfg.discriminator_blocks;
        let [h, w] = hyper.image_size;
        Self {
            image_size: hyper.image_size,
            blocks,
            head: Linear::new("dim.head", ch_in * (h / f) * (w / f), 1),
        }
    }

    pub fn init<E: Element>(&self, seed: u64) -> NetParams<E> {
        let mut rng = init_rng(seed);
        let mut store = ParamStore::new();
        for b in &self.blocks {
            b.init(&mut store, 1.0, &mut rng);
        }
        self.head.init(&mut store, 0.5, &mut rng);
        NetParams::new(STAGE1_VERSION, store)
    }

    pub fn check<E: Element>(&self, p: &NetParams<E>) -> Result<()> {
        p.check_against(&self.init(0), "image discriminator")
    }

    /// Probability that each image of `[N, 3, H, W]` is real: `[N, 1]`.
    pub fn forward<'t, E: Element>(&self, p: &Binder<'t, '_, E>, x: &Var<'t, E>) -> Var<'t, E> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = lrelu(&b.forward(p, &h));
        }
        let n = h.shape()[0];
        let flat: usize = h.shape()[1..].iter().product();
        self.head.forward(p, &h.reshape(&[n, flat])).sigmoid()
    }
}

// ---------------------------------------------------------------------------
// Perceptual features

/// A differentiable image feature pyramid. Layer 0 is the image itself.
pub trait FeatureExtractor<E: Element> {
    fn num_layers(&self) -> usize;

    /// Layers `0..=deepest` of `x [N, 3, H, W]`.
    fn features<'t>(&self, x: &Var<'t, E>, deepest: usize) -> Vec<Var<'t, E>>;
}

/// Only layer 0, the raw image.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl<E: Element> FeatureExtractor<E> for IdentityExtractor {
    fn num_layers(&self) -> usize {
        1
    }

    fn features<'t>(&self, x: &Var<'t, E>, _deepest: usize) -> Vec<Var<'t, E>> {
        vec![x.clone()]
    }
}

/// Frozen, seeded, randomly initialized 5-block convolutional pyramid.
#[derive(Clone, Debug)]
pub struct RandomConvPyramid<E: Element = f32> {
    blocks: Vec<Conv2d>,
    params: ParamStore<E>,
}

impl<E: Element> RandomConvPyramid<E> {
    pub const WIDTHS: [usize; 5] = [8, 16, 32, 32, 32];

    pub fn new(seed: u64) -> Self {
        let mut rng = init_rng(seed);
        let mut store = ParamStore::<f64>::new();
        let mut ch_in = 3;
        let blocks: Vec<Conv2d> = Self::WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &ch)| {
                let b = Conv2d::new(format!("phi.block{i}"), ch_in, ch, 3, if i == 0 { 1 } else { 2 });
                ch_in = ch;
                b
            })
            .collect();
        for b in &blocks {
            b.init(&mut store, 1.0, &mut rng);
        }
        Self {
            blocks,
            params: store.cast(),
        }
    }
}

impl<E: Element> FeatureExtractor<E> for RandomConvPyramid<E> {
    fn num_layers(&self) -> usize {
        self.blocks.len() + 1
    }

    fn features<'t>(&self, x: &Var<'t, E>, deepest: usize) -> Vec<Var<'t, E>> {
        let p = Binder::frozen(x.tape(), &self.params);
        let mut out = vec![x.clone()];
        for b in self.blocks.iter().take(deepest) {
            let next = lrelu(&b.forward(&p, out.last().unwrap()));
            out.push(next);
        }
        out
    }
}

/// Mean over `layers` of the mean absolute feature difference.
pub fn perceptual_loss_var<'t, E: Element, P: FeatureExtractor<E> + ?Sized>(
    phi: &P,
    layers: &[usize],
    a: &Var<'t, E>,
    b: &Var<'t, E>,
) -> Var<'t, E> {
    let deepest = *layers.iter().max().expect("at least one perceptual layer");
    let fa = phi.features(a, deepest);
    let fb = phi.features(b, deepest);
    let mut total: Option<Var<'t, E>> = None;
    for &l in layers {
        let term = fa[l].sub(&fb[l]).abs().mean_all();
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    total
        .unwrap()
        .scale(E::one() / E::from_usize(layers.len()).unwrap())
}

/// [`perceptual_loss_var`] on two frames.
pub fn perceptual_loss<P: FeatureExtractor<f64> + ?Sized>(
    a: &Frame,
    b: &Frame,
    phi: &P,
    layers: &[usize],
) -> Result<f64> {
    if a.pixels().shape() != b.pixels().shape() {
        return Err(Error::config("perceptual loss: frames differ in shape"));
    }
    if layers.is_empty() {
        return Err(Error::config("perceptual loss: no layers selected"));
    }
    if let Some(&l) = layers.iter().find(|&&l| l >= phi.num_layers()) {
        return Err(Error::config(format!(
            "perceptual loss: layer {l} not provided by an extractor with {} layers",
            phi.num_layers()
        )));
    }
    let tape = Tape::new();
    let va = tape.constant(frames_to_batch(&[a])?);
    let vb = tape.constant(frames_to_batch(&[b])?);
    Ok(perceptual_loss_var(phi, layers, &va, &vb).value().item())
}

// ---------------------------------------------------------------------------
// Losses

/// `-log D(real) - log(1 - D(fake))`, averaged over the batch.
pub fn discriminator_loss<'t, E: Element>(d_real: &Var<'t, E>, d_fake: &Var<'t, E>) -> Var<'t, E> {
    d_real
        .log_clamped(PROB_FLOOR)
        .add(&one_minus(d_fake).log_clamped(PROB_FLOOR))
        .mean_all()
        .neg()
}

/// `-log D(fake)`, averaged over the batch.
pub fn adversarial_loss<'t, E: Element>(d_fake: &Var<'t, E>) -> Var<'t, E> {
    d_fake.log_clamped(PROB_FLOOR).mean_all().neg()
}

/// Scalar stage-1 losses of one (generated, target) image pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TranslatorLossValues {
    pub discriminator: f64,
    pub generator: f64,
    pub perceptual: f64,
}

/// `L_D = -log D(v_tgt) - log(1 - D(v_hat))` and
/// `L_QT = -log D(v_hat) + lambda1 * perceptual(v_hat, v_tgt)`.
pub fn translator_losses<P: FeatureExtractor<f64> + ?Sized>(
    v_hat: &Frame,
    v_tgt: &Frame,
    disc: &ImageDiscriminator,
    d_params: &NetParams<f64>,
    phi: &P,
    layers: &[usize],
    lambda1: f64,
) -> Result<TranslatorLossValues> {
    disc.check(d_params)?;
    let perceptual = if lambda1 == 0.0 {
        0.0
    } else {
        perceptual_loss(v_hat, v_tgt, phi, layers)?
    };
    let tape = Tape::new();
    let p = Binder::frozen(&tape, &d_params.store);
    let fake = tape.constant(frames_to_batch(&[v_hat])?);
    let real = tape.constant(frames_to_batch(&[v_tgt])?);
    check_image(fake.shape(), disc.image_size, "image discriminator")?;
    let (d_fake, d_real) = (disc.forward(&p, &fake), disc.forward(&p, &real));
    Ok(TranslatorLossValues {
        discriminator: discriminator_loss(&d_real, &d_fake).value().item(),
        generator: adversarial_loss(&d_fake).value().item() + lambda1 * perceptual,
        perceptual,
    })
}

// ---------------------------------------------------------------------------
// Stage-1 model and trainer

/// The three stage-1 architectures plus the perceptual-loss settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Nets {
    pub detector: Detector,
    pub translator: Translator,
    pub discriminator: ImageDiscriminator,
    pub perceptual_layers: Vec<usize>,
    pub perceptual_seed: u64,
}

/// Trained (or initial) parameters of the stage-1 networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Params<E: Element = f32> {
    pub detector: NetParams<E>,
    pub translator: NetParams<E>,
    pub discriminator: NetParams<E>,
}

impl Stage1Nets {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            detector: Detector::new(&cfg.hyper, &cfg.translator),
            translator: Translator::new(&cfg.hyper, &cfg.translator),
            discriminator: ImageDiscriminator::new(&cfg.hyper, &cfg.translator),
            perceptual_layers: cfg.translator.perceptual_layers.clone(),
            perceptual_seed: cfg.translator.perceptual_seed,
        })
    }

    pub fn init<E: Element>(&self, seed: u64) -> Stage1Params<E> {
        Stage1Params {
            detector: self.detector.init(seed),
            translator: self.translator.init(seed.wrapping_add(1)),
            discriminator: self.discriminator.init(seed.wrapping_add(2)),
        }
    }

    pub fn check<E: Element>(&self, p: &Stage1Params<E>) -> Result<()> {
        self.detector.check(&p.detector)?;
        self.translator.check(&p.translator)?;
        self.discriminator.check(&p.discriminator)
    }

    pub fn extractor<E: Element>(&self) -> RandomConvPyramid<E> {
        RandomConvPyramid::new(self.perceptual_seed)
    }
}

/// Generator-side graph of one stage-1 step.
pub struct GeneratorPass<'t, E: Element> {
    pub k_ref: Var<'t, E>,
    pub k_tgt: Var<'t, E>,
    pub translation: Translation<'t, E>,
}

/// Detects keypoints on both images and translates `v` to the pose of `v_tgt`.
pub fn generator_pass<'t, E: Element>(
    nets: &Stage1Nets,
    q: &Binder<'t, '_, E>,
    t: &Binder<'t, '_, E>,
    v: &Var<'t, E>,
    v_tgt: &Var<'t, E>,
    mode: MaskMode,
) -> GeneratorPass<'t, E> {
    let k_ref = nets.detector.keypoints(q, v);
    let k_tgt = nets.detector.keypoints(q, v_tgt);
    let translation = nets.translator.forward(t, v, &k_ref, &k_tgt, mode);
    GeneratorPass {
        k_ref,
        k_tgt,
        translation,
    }
}

/// Scalars recorded after every stage-1 step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Metrics {
    pub step: u64,
    pub learning_rate: f64,
    /// `L_D_im`
    pub discriminator: f64,
    /// `L_QT`
    pub generator: f64,
    pub adversarial: f64,
    pub perceptual: f64,
    /// Mean absolute error of the blended image against the target.
    pub l1: f64,
    /// Mean of `1 - m`.
    pub mask_coverage: f64,
}

fn finite(step: u64, term: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { step, term, value })
    }
}

/// Alternating stage-1 optimizer: one discriminator update, then one
/// detector+translator update, per step.
pub struct TranslatorTrainer {
    nets: Stage1Nets,
    params: Stage1Params<f32>,
    phi: RandomConvPyramid<f32>,
    schedule: StepDecay,
    lambda1: f64,
    opt_q: Adam<f32>,
    opt_t: Adam<f32>,
    opt_d: Adam<f32>,
    step: u64,
}

impl TranslatorTrainer {
    pub fn new(nets: Stage1Nets, params: Stage1Params<f32>, hyper: &HyperParams) -> Result<Self> {
        nets.check(&params)?;
        Ok(Self {
            phi: nets.extractor(),
            nets,
            params,
            schedule: hyper.schedule(),
            lambda1: hyper.lambda1,
            opt_q: Adam::new(hyper.beta1, hyper.beta2),
            opt_t: Adam::new(hyper.beta1, hyper.beta2),
            opt_d: Adam::new(hyper.beta1, hyper.beta2),
            step: 0,
        })
    }

    /// Continues counting from `step` (schedule included).
    pub fn with_step(mut self, step: u64) -> Self {
        self.step = step;
        self
    }

    pub fn nets(&self) -> &Stage1Nets {
        &self.nets
    }

    pub fn params(&self) -> &Stage1Params<f32> {
        &self.params
    }

    pub fn into_params(self) -> Stage1Params<f32> {
        self.params
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update on a batch of `(v, v')` pairs from the same clips.
    pub fn step(&mut self, pairs: &[(Frame, Frame)]) -> Result<Stage1Metrics> {
        if pairs.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        let v = frames_to_batch::<f32>(&pairs.iter().map(|p| &p.0).collect::<Vec<_>>())?;
        let v_tgt = frames_to_batch::<f32>(&pairs.iter().map(|p| &p.1).collect::<Vec<_>>())?;
        check_image(v.shape(), self.nets.translator.image_size, "training batch")?;
        let step = self.step;
        let lr = self.schedule.rate_at(step);

        let tape = Tape::new();
        let q = Binder::trainable(&tape, &self.params.detector.store);
        let t = Binder::trainable(&tape, &self.params.translator.store);
        let vv = tape.constant(v);
        let vt = tape.constant(v_tgt);
        let pass = generator_pass(&self.nets, &q, &t, &vv, &vt, MaskMode::Learned);
        let v_hat = &pass.translation.blended;

        // Discriminator update on the detached generation.
        let d_loss = {
            let dtape = Tape::new();
            let d = Binder::trainable(&dtape, &self.params.discriminator.store);
            let fake = dtape.constant(v_hat.value().clone());
            let real = dtape.constant(vt.value().clone());
            let disc = &self.nets.discriminator;
            let loss = discriminator_loss(&disc.forward(&d, &real), &disc.forward(&d, &fake));
            let value = finite(step, "L_D_im", loss.value().item() as f64)?;
            let grads = d.gradients(&dtape.backward(&loss));
            drop(d);
            self.opt_d
                .update(&mut self.params.discriminator.store, &grads, lr);
            value
        };

        let d = Binder::frozen(&tape, &self.params.discriminator.store);
        let adv = adversarial_loss(&self.nets.discriminator.forward(&d, v_hat));
        let perc = perceptual_loss_var(&self.phi, &self.nets.perceptual_layers, v_hat, &vt);
        let g_loss = adv.add(&perc.scale(self.lambda1 as f32));
        let l1 = v_hat.value().data().iter().zip(vt.value().data());
        let l1 = l1.map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / vt.value().len() as f64;
        let coverage = 1.0 - pass.translation.mask.value().mean() as f64;
        let metrics = Stage1Metrics {
            step,
            learning_rate: lr,
            discriminator: d_loss,
            generator: finite(step, "L_QT", g_loss.value().item() as f64)?,
            adversarial: finite(step, "adversarial", adv.value().item() as f64)?,
            perceptual: finite(step, "perceptual", perc.value().item() as f64)?,
            l1,
            mask_coverage: coverage,
        };
        let grads = tape.backward(&g_loss);
        let gq = q.gradients(&grads);
        let gt = t.gradients(&grads);
        drop((q, t, d));
        self.opt_q.update(&mut self.params.detector.store, &gq, lr);
        self.opt_t.update(&mut self.params.translator.store, &gt, lr);
        self.step += 1;
        Ok(metrics)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;

    fn tiny_config(h: usize) -> Config {
        let mut cfg = Config::default();
        cfg.hyper.keypoints = 2;
        cfg.hyper.image_size = [h, h];
        cfg.hyper.batch_size = 2;
        cfg.translator.base_channels = 3;
        cfg.translator.depth = 0;
        cfg.translator.detector_strides = vec![1];
        cfg.translator.detector_residual_blocks = 0;
        cfg.translator.discriminator_blocks = 1;
        cfg.translator.perceptual_layers = vec![0, 1, 2];
        cfg
    }

    fn pattern(h: usize, w: usize, phase: f32) -> Frame {
        Frame::from_fn(h, w, |y, x, c| {
            ((x as f32 * 0.7 + y as f32 * 0.3 + c as f32 + phase).sin() * 0.8).clamp(-1.0, 1.0)
        })
        .unwrap()
    }

    #[test]
    fn frame_planar_round_trip() {
        let f = pattern(4, 5, 0.3);
        assert_eq!(Frame::from_chw(4, 5, &f.to_chw()).unwrap(), f);
        let batch = frames_to_batch::<f32>(&[&f, &f]).unwrap();
        assert_eq!(batch.shape(), &[2, 3, 4, 5]);
        assert_eq!(batch_to_frames(&batch).unwrap(), vec![f.clone(), f]);
    }

    #[test]
    fn frame_rejects_non_finite_and_clamps() {
        assert!(Frame::new(Tensor::full([2, 2, 3], f32::NAN)).is_err());
        let f = Frame::new(Tensor::full([2, 2, 3], 3.0)).unwrap();
        assert!(f.pixels().data().iter().all(|&v| v == 1.0));
    }

    fn default_small() -> (Stage1Nets, Stage1Params<f32>) {
        let mut cfg = Config::default();
        cfg.hyper.keypoints = 3;
        cfg.hyper.image_size = [32, 32];
        cfg.translator.base_channels = 4;
        cfg.translator.depth = 2;
        cfg.translator.discriminator_blocks = 2;
        let nets = Stage1Nets::new(&cfg).unwrap();
        let params = nets.init(11);
        (nets, params)
    }

    #[test]
    fn detector_emits_k_normalized_points_deterministically() {
        let (nets, params) = default_small();
        let f = pattern(32, 32, 0.0);
        let a = detect_keypoints(&f, &nets.detector, &params.detector).unwrap();
        let b = detect_keypoints(&f, &nets.detector, &params.detector).unwrap();
        assert_eq!(a.len(), 3);
        assert!(a.coords().iter().flatten().all(|c| (-1.0..=1.0).contains(c)));
        assert_eq!(a, b);
        assert_eq!(nets.detector.logit_size(), [8, 8]);
    }

    #[test]
    fn detector_ignores_constant_logit_offset() {
        let (nets, params) = default_small();
        let f = pattern(32, 32, 1.0);
        let before = detect_keypoints(&f, &nets.detector, &params.detector).unwrap();
        let mut shifted = params.detector.clone();
        let bias = shifted.store.get_mut("det.head.bias").unwrap();
        bias.data_mut().iter_mut().for_each(|b| *b += 3.0);
        let after = detect_keypoints(&f, &nets.detector, &shifted).unwrap();
        for (a, b) in before.coords().iter().zip(after.coords()) {
            assert!((a[0] - b[0]).abs() < 1e-5 && (a[1] - b[1]).abs() < 1e-5);
        }
    }

    #[test]
    fn detector_rejects_wrong_image_size() {
        let (nets, params) = default_small();
        let f = pattern(16, 16, 0.0);
        assert!(matches!(
            detect_keypoints(&f, &nets.detector, &params.detector),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn blend_laws_hold_exactly() {
        let (nets, params) = default_small();
        let v = pattern(32, 32, 0.5);
        let k = KeypointSet::new(vec![[0.1, -0.2], [0.5, 0.5], [-0.7, 0.3]]).unwrap();
        let k2 = KeypointSet::new(vec![[0.0, 0.0], [0.2, 0.5], [-0.1, 0.9]]).unwrap();
        let keep = translate(&v, &k, &k2, &nets.translator, &params.translator, MaskMode::Fixed(1.0)).unwrap();
        assert_eq!(keep.blended, v);
        let synth = translate(&v, &k, &k2, &nets.translator, &params.translator, MaskMode::Fixed(0.0)).unwrap();
        assert_eq!(synth.blended, synth.synth);
        let learned = translate(&v, &k, &k2, &nets.translator, &params.translator, MaskMode::Learned).unwrap();
        assert!(learned.mask.values().data().iter().all(|m| (0.0..=1.0).contains(m)));
    }

    #[test]
    fn half_mask_interpolates() {
        let tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::full([1, 1, 1, 1], 0.5));
        let v = tape.constant(Tensor::full([1, 3, 1, 1], 0.2));
        let s = tape.constant(Tensor::full([1, 3, 1, 1], 0.6));
        let out = Var::blend(&m, &v, &s);
        assert!(out.value().data().iter().all(|&x| (x - 0.4).abs() < 1e-15));
    }

    #[test]
    fn translator_rejects_keypoint_count_mismatch() {
        let (nets, params) = default_small();
        let v = pattern(32, 32, 0.5);
        let k = KeypointSet::new(vec![[0.1, -0.2]]).unwrap();
        let r = translate(&v, &k, &k, &nets.translator, &params.translator, MaskMode::Learned);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn perceptual_loss_closed_forms() {
        let a = Frame::filled(4, 4, [0.25; 3]);
        let b = Frame::filled(4, 4, [-0.25; 3]);
        let id = IdentityExtractor;
        assert!((perceptual_loss(&a, &b, &id, &[0]).unwrap() - 0.5).abs() < 1e-12);
        let phi = RandomConvPyramid::<f64>::new(3);
        let (x, y) = (pattern(8, 8, 0.0), pattern(8, 8, 2.0));
        let all = [0, 1, 2, 3, 4, 5];
        assert_eq!(perceptual_loss(&x, &x, &phi, &all).unwrap(), 0.0);
        let xy = perceptual_loss(&x, &y, &phi, &all).unwrap();
        let yx = perceptual_loss(&y, &x, &phi, &all).unwrap();
        assert!(xy > 0.0 && (xy - yx).abs() < 1e-12);
        assert!(perceptual_loss(&x, &a, &phi, &all).is_err());
        assert!(perceptual_loss(&x, &y, &id, &[1]).is_err());
    }

    fn half_discriminator(cfg: &Config) -> (ImageDiscriminator, NetParams<f64>) {
        let disc = ImageDiscriminator::new(&cfg.hyper, &cfg.translator);
        let mut p = disc.init::<f64>(0);
        let names: Vec<String> = p.store.iter().map(|(n, _)| n.clone()).collect();
        for n in names {
            p.store.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        (disc, p)
    }

    #[test]
    fn losses_at_an_undecided_discriminator() {
        let cfg = tiny_config(8);
        let (disc, p) = half_discriminator(&cfg);
        let (a, b) = (pattern(8, 8, 0.0), pattern(8, 8, 1.0));
        let phi = RandomConvPyramid::<f64>::new(1);
        let same = translator_losses(&a, &a, &disc, &p, &phi, &[0, 1], 1.0).unwrap();
        assert!((same.discriminator - 2.0 * std::f64::consts::LN_2).abs() < 1e-6);
        assert!((same.generator - std::f64::consts::LN_2).abs() < 1e-6);
        let no_perc = translator_losses(&a, &b, &disc, &p, &phi, &[0, 1], 0.0).unwrap();
        let other = translator_losses(&a, &b, &disc, &p, &IdentityExtractor, &[0], 0.0).unwrap();
        assert_eq!(no_perc.generator, other.generator);
    }

    #[test]
    fn stage1_losses_match_finite_differences() {
        let cfg = tiny_config(8);
        let nets = Stage1Nets::new(&cfg).unwrap();
        let p: Stage1Params<f64> = nets.init(5);
        let phi = RandomConvPyramid::<f64>::new(9);
        let v = frames_to_batch::<f64>(&[&pattern(8, 8, 0.0), &pattern(8, 8, 0.9)]).unwrap();
        let vt = frames_to_batch::<f64>(&[&pattern(8, 8, 0.4), &pattern(8, 8, 1.7)]).unwrap();
        let layers = nets.perceptual_layers.clone();
        let stores = [p.detector.store, p.translator.store, p.discriminator.store];
        let report = check_param_gradients(&stores, 1e-6, 24, |b| {
            let tape = b[0].tape();
            let (v, vt) = (tape.constant(v.clone()), tape.constant(vt.clone()));
            let pass = generator_pass(&nets, &b[0], &b[1], &v, &vt, MaskMode::Learned);
            let fake = &pass.translation.blended;
            let d_fake = nets.discriminator.forward(&b[2], fake);
            let d_real = nets.discriminator.forward(&b[2], &vt);
            let g = adversarial_loss(&d_fake).add(&perceptual_loss_var(&phi, &layers, fake, &vt));
            g.add(&discriminator_loss(&d_real, &d_fake))
        });
        report.assert_close(1e-3);
    }

    #[test]
    fn one_step_updates_every_parameter() {
        let (nets, params) = default_small();
        let mut trainer = TranslatorTrainer::new(nets, params.clone(), &HyperParams::default()).unwrap();
        let pairs = vec![
            (pattern(32, 32, 0.0), pattern(32, 32, 0.6)),
            (pattern(32, 32, 1.0), pattern(32, 32, 2.0)),
        ];
        let m = trainer.step(&pairs).unwrap();
        assert!(m.discriminator.is_finite() && m.generator.is_finite() && m.perceptual.is_finite());
        let after = trainer.params();
        for (before, after) in [
            (&params.detector, &after.detector),
            (&params.translator, &after.translator),
            (&params.discriminator, &after.discriminator),
        ] {
            for (name, t) in before.store.iter() {
                assert_ne!(t, after.store.get(name).unwrap(), "{name} did not move");
            }
        }
    }
}
