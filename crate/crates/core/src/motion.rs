//! Stage 2: conditional recurrent VAE over keypoint sequences, the sequence
//! discriminator, pseudo-label extraction and the alternating trainer.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Element, Tape, Tensor, Var};
use crate::config::{HyperParams, MotionConfig};
use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::keypoint::KeypointSet;
use crate::nn::{Adam, Binder, Linear, LstmCell, LstmState, NetParams, ParamStore, StepDecay, LEAK};
use crate::translator::{Detector, Frame, PROB_FLOOR};

/// Layout version of the stage-2 parameter collections.
pub const STAGE2_VERSION: u32 = 1;

/// One-hot action vector of length C, or all zeros when unconditioned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionCode {
    classes: usize,
    index: Option<usize>,
}

impl ActionCode {
    pub fn one_hot(index: usize, classes: usize) -> Result<Self> {
        if index >= classes {
            return Err(Error::invalid(format!(
                "action index {index} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            classes,
            index: Some(index),
        })
    }

    pub fn unconditioned(classes: usize) -> Self {
        Self {
            classes,
            index: None,
        }
    }

    pub fn index(&self) -> Option<usize> {
        self.index
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn to_vec<E: Element>(&self) -> Vec<E> {
        (0..self.classes)
            .map(|i| if Some(i) == self.index { E::one() } else { E::zero() })
            .collect()
    }

    pub fn to_tensor<E: Element>(&self) -> Tensor<E> {
        Tensor::from_parts(vec![self.classes], self.to_vec())
    }
}

// ---------------------------------------------------------------------------
// Sequences and latents

/// Keypoint sets of consecutive frames; all share one K.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<KeypointSet>", into = "Vec<KeypointSet>")]
pub struct KeypointSequence {
    frames: Vec<KeypointSet>,
}

impl TryFrom<Vec<KeypointSet>> for KeypointSequence {
    type Error = Error;

    fn try_from(frames: Vec<KeypointSet>) -> Result<Self> {
        Self::new(frames)
    }
}

impl From<KeypointSequence> for Vec<KeypointSet> {
    fn from(s: KeypointSequence) -> Self {
        s.frames
    }
}

impl KeypointSequence {
    /// An empty sequence is allowed; non-empty ones must share one K.
    pub fn new(frames: Vec<KeypointSet>) -> Result<Self> {
        if let Some(first) = frames.first() {
            if frames.iter().any(|f| f.len() != first.len()) {
                return Err(Error::invalid("keypoint sequence mixes keypoint counts"));
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[KeypointSet] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn keypoints(&self) -> usize {
        self.frames.first().map_or(0, KeypointSet::len)
    }

    /// Frames `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::invalid(format!(
                "window {start}..{} exceeds sequence of {}",
                start + len,
                self.len()
            )));
        }
        Ok(Self {
            frames: self.frames[start..start + len].to_vec(),
        })
    }

    /// All coordinates, frame-major: `[x0, y0, x1, y1, ...]`.
    pub fn flatten(&self) -> Vec<f64> {
        self.frames
            .iter()
            .flat_map(|f| f.coords().iter().flatten().copied())
            .collect()
    }

    /// Rebuilds from `[L, K, 2]` values.
    pub fn from_flat(values: &[f64], keypoints: usize) -> Result<Self> {
        if keypoints == 0 || values.len() % (2 * keypoints) != 0 {
            return Err(Error::invalid("flat sequence does not divide into frames"));
        }
        let frames = values
            .chunks(2 * keypoints)
            .map(|c| KeypointSet::new(c.chunks(2).map(|p| [p[0], p[1]]).collect()))
            .collect::<Result<_>>()?;
        Self::new(frames)
    }

    /// Mean absolute coordinate difference.
    pub fn mean_l1(&self, other: &Self) -> Result<f64> {
        if self.len() != other.len() || self.keypoints() != other.keypoints() {
            return Err(Error::invalid("sequences differ in shape"));
        }
        let (a, b) = (self.flatten(), other.flatten());
        if a.is_empty() {
            return Ok(0.0);
        }
        Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
    }
}

/// Diagonal Gaussian `q(z | sequence, condition)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPosterior {
    mean: Vec<f64>,
    logvar: Vec<f64>,
}

impl LatentPosterior {
    pub fn new(mean: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mean.len() != logvar.len() || mean.is_empty() {
            return Err(Error::invalid("posterior mean and logvar must be equally long and non-empty"));
        }
        if mean.iter().chain(&logvar).any(|v| !v.is_finite()) || logvar.iter().any(|v| v.exp() <= 0.0) {
            return Err(Error::Numeric("posterior parameters are not finite".into()));
        }
        Ok(Self { mean, logvar })
    }

    /// The prior `N(0, I)`.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            logvar: vec![0.0; dim],
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn logvar(&self) -> &[f64] {
        &self.logvar
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// A latent sample `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode(pub Vec<f64>);

/// `z = mean + exp(logvar / 2) * noise`.
pub fn reparameterize(p: &LatentPosterior, noise: &[f64]) -> Result<LatentCode> {
    if noise.len() != p.dim() {
        return Err(Error::invalid(format!(
            "noise has {} entries, latent dimension is {}",
            noise.len(),
            p.dim()
        )));
    }
    Ok(LatentCode(
        p.mean
            .iter()
            .zip(&p.logvar)
            .zip(noise)
            .map(|((m, lv), n)| m + (lv / 2.0).exp() * n)
            .collect(),
    ))
}

/// `KL(N(mean, diag exp(logvar)) || N(0, I))`.
pub fn kl_divergence(p: &LatentPosterior) -> f64 {
    0.5 * p
        .mean
        .iter()
        .zip(&p.logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Batch mean of the closed-form KL for `[N, D]` mean and logvar.
pub fn kl_var<'t, E: Element>(mean: &Var<'t, E>, logvar: &Var<'t, E>) -> Var<'t, E> {
    let n = mean.shape()[0];
    mean.sqr()
        .add(&logvar.exp())
        .sub(logvar)
        .add_scalar(-E::one())
        .sum_all()
        .scale(E::lit(0.5 / n as f64))
}

// ---------------------------------------------------------------------------
// Networks

/// Recurrent conditional VAE over keypoint trajectories.
///
/// The condition `(k0, a)` is appended to every encoder and decoder input;
/// the decoder state is initialized from `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionNet {
    pub keypoints: usize,
    pub actions: usize,
    pub latent_dim: usize,
    pub horizon: usize,
    pub hidden: usize,
    pub predict_deltas: bool,
    encoder: LstmCell,
    to_latent: Linear,
    from_latent: Linear,
    decoder: LstmCell,
    to_output: Linear,
}

/// Largest magnitude of a coordinate fed to `atanh` in delta mode.
const EDGE: f64 = 0.999;

impl MotionNet {
    pub fn new(hyper: &HyperParams, cfg: &MotionConfig) -> Self {
        let k2 = 2 * hyper.keypoints;
        let cond = k2 + hyper.action_count;
        let h = cfg.hidden;
        Self {
            keypoints: hyper.keypoints,
            actions: hyper.action_count,
            latent_dim: hyper.latent_dim,
            horizon: hyper.horizon,
            hidden: h,
            predict_deltas: cfg.predict_deltas,
            encoder: LstmCell::new("enc.lstm", k2 + cond, h),
            to_latent: Linear::new("enc.latent", h, 2 * hyper.latent_dim),
            from_latent: Linear::new("dec.init", hyper.latent_dim, 2 * h),
            decoder: LstmCell::new("dec.lstm", k2 + cond, h),
            to_output: Linear::new("dec.out", h, k2),
        }
    }

    pub fn init<E: Element>(&self, seed: u64) -> NetParams<E> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, &mut rng);
        self.to_latent.init(&mut store, 0.5, &mut rng);
        self.from_latent.init(&mut store, 1.0, &mut rng);
        self.decoder.init(&mut store, &mut rng);
        self.to_output.init(&mut store, 0.1, &mut rng);
        NetParams::new(STAGE2_VERSION, store)
    }

    pub fn check<E: Element>(&self, p: &NetParams<E>) -> Result<()> {
        p.check_against(&self.init(0), "motion generator")
    }

    /// `[N, 2K + C]` from initial keypoints `[N, 2K]` and actions `[N, C]`.
    pub fn condition<'t, E: Element>(k0: &Var<'t, E>, actions: &Var<'t, E>) -> Var<'t, E> {
        Var::concat(&[k0, actions], 1)
    }

    /// Encodes `seq [N, L, 2K]` (frames `1..L` are consumed) into
    /// `(mean, logvar)`, each `[N, latent]`.
    pub fn encode<'t, E: Element>(
        &self,
        p: &Binder<'t, '_, E>,
        seq: &Var<'t, E>,
        cond: &Var<'t, E>,
    ) -> (Var<'t, E>, Var<'t, E>) {
        let (n, l, k2) = (seq.shape()[0], seq.shape()[1], seq.shape()[2]);
        let mut state = self.encoder.zero_state(p.tape(), n);
        for t in 1..l {
            let frame = seq.narrow(1, t, 1).reshape(&[n, k2]);
            state = self.encoder.step(p, &Var::concat(&[&frame, cond], 1), &state);
        }
        let stats = self.to_latent.forward(p, &state.h);
        let d = self.latent_dim;
        (stats.narrow(1, 0, d), stats.narrow(1, d, d))
    }

    /// Unrolls the decoder `steps` times from `k0 [N, 2K]`; returns `[N, steps, 2K]`.
    pub fn decode<'t, E: Element>(
        &self,
        p: &Binder<'t, '_, E>,
        z: &Var<'t, E>,
        k0: &Var<'t, E>,
        cond: &Var<'t, E>,
        steps: usize,
    ) -> Var<'t, E> {
        let (n, k2) = (k0.shape()[0], k0.shape()[1]);
        let init = self.from_latent.forward(p, z);
        let h = self.hidden;
        let mut state = LstmState {
            h: init.narrow(1, 0, h).tanh(),
            c: init.narrow(1, h, h),
        };
        let edge = E::lit(EDGE);
        let pre0 = k0.value().map(|v| v.max(-edge).min(edge).atanh());
        let mut pre = p.tape().constant(pre0);
        let mut prev = k0.clone();
        let mut outputs = Vec::with_capacity(steps);
        for _ in 0..steps {
            state = self.decoder.step(p, &Var::concat(&[&prev, cond], 1), &state);
            let head = self.to_output.forward(p, &state.h);
            let frame = if self.predict_deltas {
                pre = pre.add(&head);
                pre.tanh()
            } else {
                head.tanh()
            };
            outputs.push(frame.reshape(&[n, 1, k2]));
            prev = frame;
        }
        let refs: Vec<&Var<'t, E>> = outputs.iter().collect();
        Var::concat(&refs, 1)
    }
}

/// Temporal convolutional classifier over `(sequence, k0, a)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceDiscriminator {
    pub length: usize,
    layers: Vec<Linear>,
    head: Linear,
}

/// Temporal kernel width.
const KERNEL: usize = 3;

impl SequenceDiscriminator {
    pub fn new(hyper: &HyperParams, cfg: &MotionConfig) -> Self {
        let k2 = 2 * hyper.keypoints;
        let input = 2 * k2 + hyper.action_count;
        let c = cfg.discriminator_channels;
        let length = hyper.horizon + 1;
        Self {
            length,
            layers: vec![
                Linear::new("dseq.conv0", KERNEL * input, c),
                Linear::new("dseq.conv1", KERNEL * c, c),
            ],
            head: Linear::new("dseq.head", length * c, 1),
        }
    }

    pub fn init<E: Element>(&self, seed: u64) -> NetParams<E> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for l in &self.layers {
            l.init(&mut store, 1.0, &mut rng);
        }
        self.head.init(&mut store, 0.5, &mut rng);
        NetParams::new(STAGE2_VERSION, store)
    }

    pub fn check<E: Element>(&self, p: &NetParams<E>) -> Result<()> {
        p.check_against(&self.init(0), "sequence discriminator")
    }

    /// Same-padded width-3 convolution over time of `x [N, L, C]`.
    fn temporal_conv<'t, E: Element>(layer: &Linear, p: &Binder<'t, '_, E>, x: &Var<'t, E>) -> Var<'t, E> {
        let (n, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let pad = x.tape().constant(Tensor::zeros(vec![n, 1, c]));
        let padded = Var::concat(&[&pad, x, &pad], 1);
        let taps: Vec<Var<'t, E>> = (0..KERNEL).map(|k| padded.narrow(1, k, l)).collect();
        let window = Var::concat(&taps.iter().collect::<Vec<_>>(), 2);
        let out = layer.forward(p, &window.reshape(&[n * l, KERNEL * c]));
        out.reshape(&[n, l, out.shape()[1]]).leaky_relu(LEAK)
    }

    /// Probability that each full sequence `[N, L, 2K]` is real: `[N, 1]`.
    pub fn forward<'t, E: Element>(
        &self,
        p: &Binder<'t, '_, E>,
        seq: &Var<'t, E>,
        cond: &Var<'t, E>,
    ) -> Var<'t, E> {
        let (n, l) = (seq.shape()[0], seq.shape()[1]);
        assert_eq!(l, self.length, "sequence discriminator expects {} frames", self.length);
        let c = cond.shape()[1];
        let tiled: Vec<Var<'t, E>> = (0..l).map(|_| cond.reshape(&[n, 1, c])).collect();
        let tiled = Var::concat(&tiled.iter().collect::<Vec<_>>(), 1);
        let mut h = Var::concat(&[seq, &tiled], 2);
        for layer in &self.layers {
            h = Self::temporal_conv(layer, p, &h);
        }
        let flat: usize = h.shape()[1..].iter().product();
        self.head.forward(p, &h.reshape(&[n, flat])).sigmoid()
    }
}

/// Stage-2 architectures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Nets {
    pub motion: MotionNet,
    pub discriminator: SequenceDiscriminator,
}

/// Stage-2 parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Params<E: Element = f32> {
    pub motion: NetParams<E>,
    pub discriminator: NetParams<E>,
}

impl Stage2Nets {
    pub fn new(hyper: &HyperParams, cfg: &MotionConfig) -> Result<Self> {
        hyper.validate()?;
        cfg.validate()?;
        Ok(Self {
            motion: MotionNet::new(hyper, cfg),
            discriminator: SequenceDiscriminator::new(hyper, cfg),
        })
    }

    pub fn init<E: Element>(&self, seed: u64) -> Stage2Params<E> {
        Stage2Params {
            motion: self.motion.init(seed),
            discriminator: self.discriminator.init(seed.wrapping_add(1)),
        }
    }

    pub fn check<E: Element>(&self, p: &Stage2Params<E>) -> Result<()> {
        self.motion.check(&p.motion)?;
        self.discriminator.check(&p.discriminator)
    }
}

// ---------------------------------------------------------------------------
// Value-level operations

pub fn sequences_tensor<E: Element>(seqs: &[&KeypointSequence]) -> Tensor<E> {
    let (l, k) = (seqs[0].len(), seqs[0].keypoints());
    let data = seqs.iter().flat_map(|s| s.flatten()).map(E::lit).collect();
    Tensor::from_parts(vec![seqs.len(), l, 2 * k], data)
}

pub fn rows_tensor<E: Element>(rows: &[Vec<f64>]) -> Tensor<E> {
    let width = rows[0].len();
    Tensor::from_parts(vec![rows.len(), width], rows.iter().flatten().map(|&v| E::lit(v)).collect())
}

fn flat_keypoints(k: &KeypointSet) -> Vec<f64> {
    k.coords().iter().flatten().copied().collect()
}

impl MotionNet {
    fn check_condition(&self, k0: &KeypointSet, a: &ActionCode) -> Result<()> {
        if k0.len() != self.keypoints {
            return Err(Error::invalid(format!(
                "expected {} keypoints, got {}",
                self.keypoints,
                k0.len()
            )));
        }
        if a.classes() != self.actions {
            return Err(Error::invalid(format!(
                "expected an action code over {} classes, got {}",
                self.actions,
                a.classes()
            )));
        }
        Ok(())
    }
}

/// Posterior of a length `T + 1` sequence given its first frame and action.
pub fn encode_motion(
    seq: &KeypointSequence,
    a: &ActionCode,
    net: &MotionNet,
    params: &NetParams<f32>,
) -> Result<LatentPosterior> {
    if seq.len() != net.horizon + 1 {
        return Err(Error::invalid(format!(
            "sequence has {} frames, the model expects T + 1 = {}",
            seq.len(),
            net.horizon + 1
        )));
    }
    net.check_condition(&seq.frames()[0], a)?;
    net.check(params)?;
    let tape = Tape::new();
    let p = Binder::frozen(&tape, &params.store);
    let s = tape.constant(sequences_tensor::<f32>(&[seq]));
    let k0 = tape.constant(rows_tensor(&[flat_keypoints(&seq.frames()[0])]));
    let cond = MotionNet::condition(&k0, &tape.constant(rows_tensor(&[a.to_vec()])));
    let (mean, logvar) = net.encode(&p, &s, &cond);
    let f = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).collect();
    LatentPosterior::new(f(mean.value()), f(logvar.value()))
}

/// Decodes `steps` future frames (excluding `k0`).
pub fn decode_motion(
    z: &LatentCode,
    k0: &KeypointSet,
    a: &ActionCode,
    steps: usize,
    net: &MotionNet,
    params: &NetParams<f32>,
) -> Result<KeypointSequence> {
    Ok(decode_batch(&[z.clone()], &[k0], &[*a], steps, net, params)?.remove(0))
}

/// Batched [`decode_motion`].
pub fn decode_batch(
    zs: &[LatentCode],
    k0s: &[&KeypointSet],
    actions: &[ActionCode],
    steps: usize,
    net: &MotionNet,
    params: &NetParams<f32>,
) -> Result<Vec<KeypointSequence>> {
    if steps < 1 {
        return Err(Error::invalid("the horizon must be at least 1"));
    }
    if zs.len() != k0s.len() || zs.len() != actions.len() {
        return Err(Error::invalid("decode batch inputs differ in length"));
    }
    if zs.is_empty() {
        return Ok(Vec::new());
    }
    for ((z, k0), a) in zs.iter().zip(k0s).zip(actions) {
        if z.0.len() != net.latent_dim {
            return Err(Error::invalid(format!("latent code must have {} entries", net.latent_dim)));
        }
        net.check_condition(k0, a)?;
    }
    net.check(params)?;
    let tape = Tape::new();
    let p = Binder::frozen(&tape, &params.store);
    let z = tape.constant(rows_tensor(&zs.iter().map(|z| z.0.clone()).collect::<Vec<_>>()));
    let k0 = tape.constant(rows_tensor(&k0s.iter().map(|k| flat_keypoints(k)).collect::<Vec<_>>()));
    let acts = tape.constant(rows_tensor(&actions.iter().map(|a| a.to_vec()).collect::<Vec<_>>()));
    let out = net.decode(&p, &z, &k0, &MotionNet::condition(&k0, &acts), steps);
    let per = steps * 2 * net.keypoints;
    out.value()
        .data()
        .chunks(per)
        .map(|c| {
            let v: Vec<f64> = c.iter().map(|&x| (x as f64).clamp(-1.0, 1.0)).collect();
            KeypointSequence::from_flat(&v, net.keypoints)
        })
        .collect()
}

/// Standard-normal latent draw from a seeded generator.
pub fn sample_latent(dim: usize, seed: u64) -> LatentCode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentCode((0..dim).map(|_| rng.sample(StandardNormal)).collect())
}

/// Draws `z ~ N(0, I)` with `seed` and decodes `steps` frames.
pub fn sample_motion(
    k0: &KeypointSet,
    a: &ActionCode,
    steps: usize,
    net: &MotionNet,
    params: &NetParams<f32>,
    seed: u64,
) -> Result<KeypointSequence> {
    decode_motion(&sample_latent(net.latent_dim, seed), k0, a, steps, net, params)
}

/// The decoder's modal trajectory (`z = 0`).
pub fn modal_motion(
    k0: &KeypointSet,
    a: &ActionCode,
    steps: usize,
    net: &MotionNet,
    params: &NetParams<f32>,
) -> Result<KeypointSequence> {
    decode_motion(&LatentCode(vec![0.0; net.latent_dim]), k0, a, steps, net, params)
}

/// Runs the detector on every frame of a clip.
pub fn extract_pseudo_labels(clip: &VideoClip, detector: &Detector, params: &NetParams<f32>) -> Result<KeypointSequence> {
    if clip.is_empty() {
        return Err(Error::invalid(format!("clip {} has no frames", clip.id)));
    }
    detector.check(params)?;
    let frames = clip.frames()?;
    let mut out = Vec::with_capacity(frames.len());
    // Small chunks bound memory; results do not depend on the chunking.
    for chunk in frames.chunks(16) {
        let refs: Vec<&Frame> = chunk.iter().collect();
        out.extend(detector.detect(params, &refs)?);
    }
    KeypointSequence::new(out)
}

// ---------------------------------------------------------------------------
// Losses

/// `-log D(real) - log(1 - D(fake))`, batch mean.
pub fn sequence_discriminator_loss<'t, E: Element>(d_real: &Var<'t, E>, d_fake: &Var<'t, E>) -> Var<'t, E> {
    crate::translator::discriminator_loss(d_real, d_fake)
}

/// Parts of the motion objective.
pub struct MotionLossTerms<'t, E: Element> {
    pub kl: Var<'t, E>,
    pub l1: Var<'t, E>,
    /// `-log D_seq(fake)`
    pub adversarial: Var<'t, E>,
    /// `KL + lambda2 * L1 + lambda3 * adversarial`
    pub total: Var<'t, E>,
}

pub fn motion_loss_terms<'t, E: Element>(
    mean: &Var<'t, E>,
    logvar: &Var<'t, E>,
    recon: &Var<'t, E>,
    target: &Var<'t, E>,
    d_fake: &Var<'t, E>,
    lambda2: f64,
    lambda3: f64,
) -> MotionLossTerms<'t, E> {
    let kl = kl_var(mean, logvar);
    let l1 = recon.sub(target).abs().mean_all();
    let adversarial = d_fake.log_clamped(PROB_FLOOR).mean_all().neg();
    let total = kl
        .add(&l1.scale(E::lit(lambda2)))
        .add(&adversarial.scale(E::lit(lambda3)));
    MotionLossTerms {
        kl,
        l1,
        adversarial,
        total,
    }
}

/// Scalar stage-2 losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionLossValues {
    pub discriminator: f64,
    pub generator: f64,
    pub kl: f64,
    pub l1: f64,
}

/// `L_D_seq` and `L_M` for one true/reconstructed pair of `T + 1` frame
/// sequences (both starting at `k0`).
#[allow(clippy::too_many_arguments)]
pub fn motion_losses(
    seq_true: &KeypointSequence,
    seq_recon: &KeypointSequence,
    posterior: &LatentPosterior,
    a: &ActionCode,
    disc: &SequenceDiscriminator,
    d_params: &NetParams<f64>,
    lambda2: f64,
    lambda3: f64,
) -> Result<MotionLossValues> {
    if seq_true.len() != seq_recon.len() || seq_true.keypoints() != seq_recon.keypoints() {
        return Err(Error::invalid("true and reconstructed sequences differ in shape"));
    }
    if seq_true.len() != disc.length {
        return Err(Error::invalid(format!("sequence discriminator expects {} frames", disc.length)));
    }
    disc.check(d_params)?;
    let tape = Tape::<f64>::new();
    let p = Binder::frozen(&tape, &d_params.store);
    let real = tape.constant(sequences_tensor(&[seq_true]));
    let fake = tape.constant(sequences_tensor(&[seq_recon]));
    let k0 = tape.constant(rows_tensor(&[flat_keypoints(&seq_true.frames()[0])]));
    let cond = MotionNet::condition(&k0, &tape.constant(rows_tensor(&[a.to_vec()])));
    let (d_real, d_fake) = (disc.forward(&p, &real, &cond), disc.forward(&p, &fake, &cond));
    let d = posterior.dim();
    let mean = tape.constant(Tensor::from_parts(vec![1, d], posterior.mean().to_vec()));
    let logvar = tape.constant(Tensor::from_parts(vec![1, d], posterior.logvar().to_vec()));
    let l = seq_true.len();
    let terms = motion_loss_terms(
        &mean,
        &logvar,
        &fake.narrow(1, 1, l - 1),
        &real.narrow(1, 1, l - 1),
        &d_fake,
        lambda2,
        lambda3,
    );
    Ok(MotionLossValues {
        discriminator: sequence_discriminator_loss(&d_real, &d_fake).value().item(),
        generator: terms.total.value().item(),
        kl: terms.kl.value().item(),
        l1: terms.l1.value().item(),
    })
}

// ---------------------------------------------------------------------------
// Training

/// One training example: a `T + 1` frame pseudo-label window and its action.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionExample {
    pub sequence: KeypointSequence,
    pub action: ActionCode,
}

/// Scalars recorded after every stage-2 step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Metrics {
    pub step: u64,
    pub learning_rate: f64,
    /// `L_D_seq`
    pub discriminator: f64,
    /// `L_M`
    pub generator: f64,
    pub kl: f64,
    pub l1: f64,
    pub adversarial: f64,
}

fn finite(step: u64, term: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { step, term, value })
    }
}

/// Alternating stage-2 optimizer: one `D_seq` update, then one `M` update.
pub struct MotionTrainer {
    nets: Stage2Nets,
    params: Stage2Params<f32>,
    schedule: StepDecay,
    lambda2: f64,
    lambda3: f64,
    opt_m: Adam<f32>,
    opt_d: Adam<f32>,
    rng: ChaCha8Rng,
    step: u64,
}

impl MotionTrainer {
    pub fn new(nets: Stage2Nets, params: Stage2Params<f32>, hyper: &HyperParams, seed: u64) -> Result<Self> {
        nets.check(&params)?;
        Ok(Self {
            nets,
            params,
            schedule: hyper.schedule(),
            lambda2: hyper.lambda2,
            lambda3: hyper.lambda3,
            opt_m: Adam::new(hyper.beta1, hyper.beta2),
            opt_d: Adam::new(hyper.beta1, hyper.beta2),
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
        })
    }

    pub fn with_step(mut self, step: u64) -> Self {
        self.step = step;
        self
    }

    pub fn nets(&self) -> &Stage2Nets {
        &self.nets
    }

    pub fn params(&self) -> &Stage2Params<f32> {
        &self.params
    }

    pub fn into_params(self) -> Stage2Params<f32> {
        self.params
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, batch: &[MotionExample]) -> Result<Stage2Metrics> {
        let net = &self.nets.motion;
        if batch.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        for ex in batch {
            if ex.sequence.len() != net.horizon + 1 {
                return Err(Error::invalid(format!(
                    "training sequences must have T + 1 = {} frames",
                    net.horizon + 1
                )));
            }
            net.check_condition(&ex.sequence.frames()[0], &ex.action)?;
        }
        let (n, l, d) = (batch.len(), net.horizon + 1, net.latent_dim);
        let step = self.step;
        let lr = self.schedule.rate_at(step);
        let seqs: Vec<&KeypointSequence> = batch.iter().map(|e| &e.sequence).collect();
        let noise: Vec<f32> = (0..n * d).map(|_| self.rng.sample(StandardNormal)).collect();

        let tape = Tape::new();
        let m = Binder::trainable(&tape, &self.params.motion.store);
        let real = tape.constant(sequences_tensor::<f32>(&seqs));
        let k0 = real.narrow(1, 0, 1).reshape(&[n, 2 * net.keypoints]);
        let acts = tape.constant(rows_tensor(&batch.iter().map(|e| e.action.to_vec()).collect::<Vec<_>>()));
        let cond = MotionNet::condition(&k0, &acts);
        let (mean, logvar) = net.encode(&m, &real, &cond);
        let eps = tape.constant(Tensor::from_parts(vec![n, d], noise));
        let z = mean.add(&logvar.scale(0.5).exp().mul(&eps));
        let recon = net.decode(&m, &z, &k0, &cond, l - 1);
        let fake = Var::concat(&[&k0.reshape(&[n, 1, 2 * net.keypoints]), &recon], 1);

        let disc = &self.nets.discriminator;
        let d_loss = {
            let dtape = Tape::new();
            let dp = Binder::trainable(&dtape, &self.params.discriminator.store);
            let real = dtape.constant(real.value().clone());
            let fake = dtape.constant(fake.value().clone());
            let cond = dtape.constant(cond.value().clone());
            let loss = sequence_discriminator_loss(&disc.forward(&dp, &real, &cond), &disc.forward(&dp, &fake, &cond));
            let value = finite(step, "L_D_seq", loss.value().item() as f64)?;
            let grads = dp.gradients(&dtape.backward(&loss));
            drop(dp);
            self.opt_d.update(&mut self.params.discriminator.store, &grads, lr);
            value
        };

        let dp = Binder::frozen(&tape, &self.params.discriminator.store);
        let d_fake = disc.forward(&dp, &fake, &cond);
        let target = real.narrow(1, 1, l - 1);
        let terms = motion_loss_terms(&mean, &logvar, &recon, &target, &d_fake, self.lambda2, self.lambda3);
        let metrics = Stage2Metrics {
            step,
            learning_rate: lr,
            discriminator: d_loss,
            generator: finite(step, "L_M", terms.total.value().item() as f64)?,
            kl: finite(step, "KL", terms.kl.value().item() as f64)?,
            l1: finite(step, "L1", terms.l1.value().item() as f64)?,
            adversarial: finite(step, "adversarial", terms.adversarial.value().item() as f64)?,
        };
        let grads = m.gradients(&tape.backward(&terms.total));
        drop((m, dp));
        self.opt_m.update(&mut self.params.motion.store, &grads, lr);
        self.step += 1;
        Ok(metrics)
    }
}

// ---------------------------------------------------------------------------
// Pseudo-label file

/// Identifies the pseudo-label JSON document.
pub const LABELS_FORMAT: &str = "kpvp-pseudo-labels";
pub const LABELS_VERSION: u32 = 1;

/// Keypoint trajectory of one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub video_id: String,
    pub action: String,
    pub action_index: usize,
    /// `[frames][K][2]` normalized coordinates.
    pub keypoints: KeypointSequence,
}

/// The pseudo-label file: every record plus the detector that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabels {
    pub format: String,
    pub version: u32,
    pub detector_digest: String,
    pub keypoints: usize,
    pub actions: Vec<String>,
    pub records: Vec<PseudoLabelRecord>,
}

impl PseudoLabels {
    pub fn new(detector_digest: String, keypoints: usize, actions: Vec<String>) -> Self {
        Self {
            format: LABELS_FORMAT.into(),
            version: LABELS_VERSION,
            detector_digest,
            keypoints,
            actions,
            records: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("labels serialize");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let labels: Self = serde_json::from_str(&text)
            .map_err(|e| Error::data(path, format!("malformed pseudo-label file: {e}")))?;
        if labels.format != LABELS_FORMAT || labels.version != LABELS_VERSION {
            return Err(Error::data(
                path,
                format!("unsupported pseudo-label format {} v{}", labels.format, labels.version),
            ));
        }
        for r in &labels.records {
            if r.keypoints.keypoints() != labels.keypoints || r.action_index >= labels.actions.len() {
                return Err(Error::data(path, format!("record {} is inconsistent", r.video_id)));
            }
        }
        Ok(labels)
    }

    /// Training windows of `length` frames. With `stride = None` only the
    /// window starting at frame 0 is taken from each record.
    pub fn windows(&self, length: usize, stride: Option<usize>) -> Result<Vec<MotionExample>> {
        let mut out = Vec::new();
        for r in &self.records {
            let action = ActionCode::one_hot(r.action_index, self.actions.len())?;
            if r.keypoints.len() < length {
                continue;
            }
            let last = r.keypoints.len() - length;
            let starts: Vec<usize> = match stride {
                Some(s) => (0..=last).step_by(s.max(1)).collect(),
                None => vec![0],
            };
            for s in starts {
                out.push(MotionExample {
                    sequence: r.keypoints.window(s, length)?,
                    action,
                });
            }
        }
        Ok(out)
    }
}
