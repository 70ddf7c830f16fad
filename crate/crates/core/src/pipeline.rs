//! Model bundles, their on-disk format, and end-to-end prediction.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::config::Config;
use crate::data::{augment, sample_frame_pair, Dataset};
use crate::error::{Error, Result};
use crate::keypoint::KeypointSet;
use crate::motion::{
    extract_pseudo_labels, sample_motion, ActionCode, KeypointSequence, MotionTrainer, PseudoLabelRecord,
    PseudoLabels, Stage2Metrics, Stage2Nets, Stage2Params,
};
use crate::nn::{NetParams, ParamStore};
use crate::translator::{
    detect_keypoints, translate_batch, BackgroundMask, Frame, MaskMode, Stage1Metrics, Stage1Nets, Stage1Params,
    TranslationResult, TranslatorTrainer,
};

/// First bytes of every bundle file.
pub const BUNDLE_MAGIC: &[u8; 8] = b"KPVPBNDL";
/// Bumped whenever the byte layout changes.
pub const BUNDLE_FORMAT_VERSION: u32 = 1;

/// Environment switch for single-threaded, bit-reproducible execution.
pub const DETERMINISTIC_ENV: &str = "KPVP_DETERMINISTIC";

pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

/// Everything needed to run or resume the two-stage model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: Config,
    /// Action class names; index = class id.
    pub actions: Vec<String>,
    pub stage1: Option<Stage1Params<f32>>,
    pub stage2: Option<Stage2Params<f32>>,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
}

impl ModelBundle {
    /// An untrained bundle. `actions` may be empty until stage 2.
    pub fn new(config: Config, actions: Vec<String>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            actions,
            stage1: None,
            stage2: None,
            stage1_steps: 0,
            stage2_steps: 0,
        })
    }

    pub fn stage1_nets(&self) -> Result<Stage1Nets> {
        Stage1Nets::new(&self.config)
    }

    pub fn stage2_nets(&self) -> Result<Stage2Nets> {
        Stage2Nets::new(&self.config.hyper, &self.config.motion)
    }

    pub fn require_stage1(&self) -> Result<(Stage1Nets, &Stage1Params<f32>)> {
        let p = self
            .stage1
            .as_ref()
            .ok_or_else(|| Error::State("bundle has no trained detector/translator".into()))?;
        Ok((self.stage1_nets()?, p))
    }

    pub fn require_stage2(&self) -> Result<(Stage2Nets, &Stage2Params<f32>)> {
        let p = self
            .stage2
            .as_ref()
            .ok_or_else(|| Error::State("bundle has no trained motion generator".into()))?;
        Ok((self.stage2_nets()?, p))
    }

    /// Cross-part consistency: one K, one image size, one class count.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if let Some(p) = &self.stage1 {
            self.stage1_nets()?.check(p)?;
        }
        if let Some(p) = &self.stage2 {
            self.stage2_nets()?.check(p)?;
            if self.actions.len() != self.config.hyper.action_count {
                return Err(Error::State(format!(
                    "bundle lists {} action names but the motion model has {} classes",
                    self.actions.len(),
                    self.config.hyper.action_count
                )));
            }
        }
        Ok(())
    }

    pub fn action_code(&self, name: &str) -> Result<ActionCode> {
        let index = self
            .actions
            .iter()
            .position(|a| a == name)
            .ok_or_else(|| Error::invalid(format!("unknown action {name:?}; known: {}", self.actions.join(", "))))?;
        ActionCode::one_hot(index, self.actions.len())
    }

    fn collections(&self) -> Vec<(&'static str, &NetParams<f32>)> {
        let mut out = Vec::new();
        if let Some(p) = &self.stage1 {
            out.push(("detector", &p.detector));
            out.push(("translator", &p.translator));
            out.push(("image_discriminator", &p.discriminator));
        }
        if let Some(p) = &self.stage2 {
            out.push(("motion", &p.motion));
            out.push(("sequence_discriminator", &p.discriminator));
        }
        out
    }

    /// The serialized file contents.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let collections = self.collections();
        let header = Header {
            config: self.config.clone(),
            actions: self.actions.clone(),
            stage1_steps: self.stage1_steps,
            stage2_steps: self.stage2_steps,
            collections: collections
                .iter()
                .map(|(name, p)| CollectionHeader {
                    name: (*name).into(),
                    version: p.version,
                    tensors: p
                        .store
                        .iter()
                        .map(|(n, t)| TensorHeader {
                            name: n.clone(),
                            shape: t.shape().to_vec(),
                        })
                        .collect(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&BUNDLE_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, p) in &collections {
            for (_, t) in p.store.iter() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const PREFIX: usize = 8 + 4 + 8;
        const TRAILER: usize = 32;
        let corrupt = |m: String| Error::Checkpoint(m);
        if bytes.len() < PREFIX + TRAILER {
            return Err(corrupt(format!("file truncated: only {} bytes", bytes.len())));
        }
        if &bytes[..8] != BUNDLE_MAGIC {
            return Err(corrupt("not a model bundle (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != BUNDLE_FORMAT_VERSION {
            return Err(corrupt(format!(
                "bundle format version {version} is not supported (this build reads version {BUNDLE_FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if header_len > bytes.len() - PREFIX - TRAILER {
            return Err(corrupt("file truncated inside the header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[PREFIX..PREFIX + header_len])
            .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
        let scalars: usize = header
            .collections
            .iter()
            .flat_map(|c| &c.tensors)
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        let expected = PREFIX + header_len + 4 * scalars + TRAILER;
        if bytes.len() != expected {
            return Err(corrupt(format!(
                "file truncated or padded: expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - TRAILER);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(corrupt("digest mismatch: the file is corrupted".into()));
        }

        let mut offset = PREFIX + header_len;
        let mut params = std::collections::BTreeMap::new();
        for c in &header.collections {
            let mut store = ParamStore::new();
            for t in &c.tensors {
                let n: usize = t.shape.iter().product();
                let data = body[offset..offset + 4 * n]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                offset += 4 * n;
                store.insert(t.name.clone(), Tensor::new(t.shape.clone(), data)?);
            }
            params.insert(c.name.clone(), NetParams::new(c.version, store));
        }
        let mut take = |name: &str| params.remove(name);
        let stage1 = match (take("detector"), take("translator"), take("image_discriminator")) {
            (Some(detector), Some(translator), Some(discriminator)) => Some(Stage1Params {
                detector,
                translator,
                discriminator,
            }),
            (None, None, None) => None,
            _ => return Err(corrupt("incomplete stage-1 parameter set".into())),
        };
        let stage2 = match (take("motion"), take("sequence_discriminator")) {
            (Some(motion), Some(discriminator)) => Some(Stage2Params { motion, discriminator }),
            (None, None) => None,
            _ => return Err(corrupt("incomplete stage-2 parameter set".into())),
        };
        if let Some(name) = params.keys().next() {
            return Err(corrupt(format!("unknown parameter collection {name:?}")));
        }
        let bundle = Self {
            config: header.config,
            actions: header.actions,
            stage1,
            stage2,
            stage1_steps: header.stage1_steps,
            stage2_steps: header.stage2_steps,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Hex SHA-256 of the serialized bundle (the file trailer).
    pub fn digest(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        Ok(hex::encode(&bytes[bytes.len() - 32..]))
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: Config,
    actions: Vec<String>,
    stage1_steps: u64,
    stage2_steps: u64,
    collections: Vec<CollectionHeader>,
}

#[derive(Serialize, Deserialize)]
struct CollectionHeader {
    name: String,
    version: u32,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

/// Writes the bundle atomically (temporary file + rename).
pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let bytes = bundle.to_bytes()?;
    let tmp = path.with_extension("partial");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelBundle::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Hex SHA-256 of a bundle file as stored.
pub fn bundle_file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

// ---------------------------------------------------------------------------
// Training drivers

/// Trains the detector, translator and image discriminator from scratch on
/// `data` for `steps` updates. `on_step` sees every metrics record.
pub fn train_translator(
    config: &Config,
    data: &Dataset,
    steps: u64,
    mut on_step: impl FnMut(&Stage1Metrics),
) -> Result<ModelBundle> {
    if data.clips.is_empty() {
        return Err(Error::data(&data.root, "no training clips"));
    }
    let mut config = config.clone();
    config.hyper.action_count = data.actions.len().max(1);
    let mut bundle = ModelBundle::new(config, data.actions.clone())?;
    let cfg = &bundle.config;
    let nets = bundle.stage1_nets()?;
    let params = nets.init(cfg.train.init_seed);
    let mut trainer = TranslatorTrainer::new(nets, params, &cfg.hyper)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.seed);
    for _ in 0..steps {
        let mut batch = Vec::with_capacity(cfg.hyper.batch_size);
        for _ in 0..cfg.hyper.batch_size {
            let clip = &data.clips[rng.random_range(0..data.clips.len())];
            let (v, v2) = sample_frame_pair(clip, cfg.translator.pair_max_gap, &mut rng)?;
            batch.push(augment(&v, &v2, &mut rng, &cfg.augment)?);
        }
        on_step(&trainer.step(&batch)?);
    }
    bundle.stage1_steps = trainer.steps();
    bundle.stage1 = Some(trainer.into_params());
    Ok(bundle)
}

/// Runs the bundle's detector over every clip.
pub fn extract_dataset_labels(bundle: &ModelBundle, data: &Dataset) -> Result<PseudoLabels> {
    let (nets, p) = bundle.require_stage1()?;
    let mut labels = PseudoLabels::new(p.detector.digest(), bundle.config.hyper.keypoints, data.actions.clone());
    for clip in &data.clips {
        let action_index = clip
            .action
            .index()
            .ok_or_else(|| Error::data(&data.root, format!("clip {} has no action label", clip.id)))?;
        labels.records.push(PseudoLabelRecord {
            video_id: clip.id.clone(),
            action: data.actions[action_index].clone(),
            action_index,
            keypoints: extract_pseudo_labels(clip, &nets.detector, &p.detector)?,
        });
    }
    Ok(labels)
}

/// Trains the motion generator and sequence discriminator on pseudo-labels,
/// returning `bundle` extended with stage 2. The motion-specific sections of
/// `config` replace those of the bundle.
pub fn train_motion(
    bundle: &ModelBundle,
    config: &Config,
    labels: &PseudoLabels,
    steps: u64,
    mut on_step: impl FnMut(&Stage2Metrics),
) -> Result<ModelBundle> {
    let (_, p1) = bundle.require_stage1()?;
    let digest = p1.detector.digest();
    if labels.detector_digest != digest {
        log::warn!(
            "pseudo-labels were extracted by detector {} but the bundle holds {}",
            labels.detector_digest,
            digest
        );
    }
    if labels.keypoints != bundle.config.hyper.keypoints {
        return Err(Error::invalid(format!(
            "pseudo-labels have {} keypoints, the bundle {}",
            labels.keypoints, bundle.config.hyper.keypoints
        )));
    }
    let mut out = bundle.clone();
    let cfg = &mut out.config;
    cfg.motion = config.motion.clone();
    cfg.train = config.train.clone();
    cfg.hyper.horizon = config.hyper.horizon;
    cfg.hyper.latent_dim = config.hyper.latent_dim;
    cfg.hyper.lambda2 = config.hyper.lambda2;
    cfg.hyper.lambda3 = config.hyper.lambda3;
    cfg.hyper.learning_rate = config.hyper.learning_rate;
    cfg.hyper.batch_size = config.hyper.batch_size;
    cfg.hyper.beta1 = config.hyper.beta1;
    cfg.hyper.beta2 = config.hyper.beta2;
    cfg.hyper.lr_decay = config.hyper.lr_decay;
    cfg.hyper.lr_decay_every = config.hyper.lr_decay_every;
    cfg.hyper.action_count = labels.actions.len();
    out.actions = labels.actions.clone();
    out.config.validate()?;

    let examples = labels.windows(out.config.hyper.horizon + 1, Some(out.config.train.window_stride))?;
    if examples.is_empty() {
        return Err(Error::invalid(format!(
            "no pseudo-label sequence has the T + 1 = {} frames needed for training",
            out.config.hyper.horizon + 1
        )));
    }
    let nets = out.stage2_nets()?;
    let params = nets.init(out.config.train.init_seed);
    let mut trainer = MotionTrainer::new(nets, params, &out.config.hyper, out.config.data.seed ^ 0x5151)?;
    let mut rng = ChaCha8Rng::seed_from_u64(out.config.data.seed);
    for _ in 0..steps {
        let batch: Vec<_> = (0..out.config.hyper.batch_size)
            .map(|_| examples[rng.random_range(0..examples.len())].clone())
            .collect();
        on_step(&trainer.step(&batch)?);
    }
    out.stage2_steps = trainer.steps();
    out.stage2 = Some(trainer.into_params());
    out.validate()?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Inference

/// Frames translated per batch. Fixed so that results do not depend on
/// how chunks are scheduled.
const CHUNK: usize = 8;

/// Translates `v0` to each pose of `kseq`, always from the reference `(v0, k0)`.
pub fn translate_sequence(
    v0: &Frame,
    k0: &KeypointSet,
    kseq: &KeypointSequence,
    bundle: &ModelBundle,
) -> Result<Vec<TranslationResult>> {
    let (nets, p) = bundle.require_stage1()?;
    if kseq.is_empty() {
        return Ok(Vec::new());
    }
    let k = bundle.config.hyper.keypoints;
    if k0.len() != k || kseq.keypoints() != k {
        return Err(Error::invalid(format!(
            "the bundle uses {k} keypoints; got {} and {}",
            k0.len(),
            kseq.keypoints()
        )));
    }
    let targets: Vec<&KeypointSet> = kseq.frames().iter().collect();
    let chunks: Vec<&[&KeypointSet]> = targets.chunks(CHUNK).collect();
    let run = |c: &[&KeypointSet]| translate_batch(v0, k0, c, &nets.translator, &p.translator, MaskMode::Learned);
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let results: Vec<Result<Vec<TranslationResult>>> = if deterministic_mode() || threads < 2 || chunks.len() < 2 {
        chunks.iter().map(|c| run(c)).collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunks.iter().map(|c| s.spawn(|| run(c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("translation worker panicked"))
                .collect()
        })
    };
    let mut out = Vec::with_capacity(kseq.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Output of [`predict_video`].
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `T` generated frames (the input frame is not included).
    pub frames: Vec<Frame>,
    pub initial_keypoints: KeypointSet,
    pub keypoints: KeypointSequence,
    pub diagnostics: Option<Diagnostics>,
}

/// Per-frame intermediate results.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    pub masks: Vec<BackgroundMask>,
    /// Synthesized images before blending.
    pub synthesized: Vec<Frame>,
}

/// Detects `k0` on `v0`, samples `T` future keypoint frames for action `a`
/// with `seed`, and translates `v0` to each of them.
pub fn predict_video(
    v0: &Frame,
    a: &ActionCode,
    horizon: usize,
    bundle: &ModelBundle,
    seed: u64,
    diagnostics: bool,
) -> Result<Prediction> {
    if horizon < 1 {
        return Err(Error::invalid("the number of frames must be at least 1"));
    }
    let (s1, p1) = bundle.require_stage1()?;
    let (s2, p2) = bundle.require_stage2()?;
    let k0 = detect_keypoints(v0, &s1.detector, &p1.detector)?;
    let kseq = sample_motion(&k0, a, horizon, &s2.motion, &p2.motion, seed)?;
    let results = translate_sequence(v0, &k0, &kseq, bundle)?;
    let mut frames = Vec::with_capacity(horizon);
    let mut masks = Vec::new();
    let mut synthesized = Vec::new();
    for r in results {
        frames.push(r.blended);
        if diagnostics {
            masks.push(r.mask);
            synthesized.push(r.synth);
        }
    }
    Ok(Prediction {
        frames,
        initial_keypoints: k0,
        keypoints: kseq,
        diagnostics: diagnostics.then_some(Diagnostics { masks, synthesized }),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::config::Config;

    pub(crate) fn tiny_bundle() -> ModelBundle {
        let mut cfg = Config::default();
        cfg.hyper.keypoints = 2;
        cfg.hyper.image_size = [16, 16];
        cfg.hyper.action_count = 2;
        cfg.hyper.latent_dim = 3;
        cfg.hyper.horizon = 4;
        cfg.translator.base_channels = 2;
        cfg.translator.depth = 1;
        cfg.translator.discriminator_blocks = 2;
        cfg.translator.detector_residual_blocks = 0;
        cfg.motion.hidden = 5;
        cfg.motion.discriminator_channels = 2;
        let mut b = ModelBundle::new(cfg, vec!["left".into(), "right".into()]).unwrap();
        b.stage1 = Some(b.stage1_nets().unwrap().init(1));
        b.stage2 = Some(b.stage2_nets().unwrap().init(2));
        b.stage1_steps = 12;
        b.stage2_steps = 34;
        b
    }

    fn frame() -> Frame {
        Frame::from_fn(16, 16, |y, x, c| ((y * 3 + x * 5 + c) % 7) as f32 / 3.5 - 1.0).unwrap()
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let b = tiny_bundle();
        let bytes = b.to_bytes().unwrap();
        let back = ModelBundle::from_bytes(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let bytes = tiny_bundle().to_bytes().unwrap();
        for cut in [0, 10, 30, bytes.len() / 2, bytes.len() - 1] {
            let err = ModelBundle::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_)), "{cut}: {err}");
        }
        let mut flipped = bytes.clone();
        let i = bytes.len() - 100;
        flipped[i] ^= 0x40;
        let err = ModelBundle::from_bytes(&flipped).unwrap_err();
        assert!(err.to_string().contains("digest"), "{err}");
        let mut future = bytes;
        future[8] = 9;
        let err = ModelBundle::from_bytes(&future).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn untrained_bundles_refuse_to_predict() {
        let mut b = tiny_bundle();
        b.stage2 = None;
        let a = b.action_code("left").unwrap();
        assert!(matches!(predict_video(&frame(), &a, 3, &b, 0, false), Err(Error::State(_))));
        assert!(b.action_code("up").is_err());
    }

    #[test]
    fn prediction_shapes_and_determinism() {
        let b = tiny_bundle();
        let a = b.action_code("right").unwrap();
        let p = predict_video(&frame(), &a, 11, &b, 5, true).unwrap();
        assert_eq!(p.frames.len(), 11);
        assert_eq!(p.keypoints.len(), 11);
        let d = p.diagnostics.as_ref().unwrap();
        assert_eq!((d.masks.len(), d.synthesized.len()), (11, 11));
        assert_eq!(p, predict_video(&frame(), &a, 11, &b, 5, true).unwrap());
        assert!(predict_video(&frame(), &a, 0, &b, 5, false).is_err());
    }

    #[test]
    fn translate_sequence_lengths() {
        let b = tiny_bundle();
        let k0 = KeypointSet::new(vec![[0.1, 0.2], [-0.3, 0.4]]).unwrap();
        let empty = KeypointSequence::new(Vec::new()).unwrap();
        assert!(translate_sequence(&frame(), &k0, &empty, &b).unwrap().is_empty());
        let seq = KeypointSequence::new(vec![k0.clone(); 19]).unwrap();
        assert_eq!(translate_sequence(&frame(), &k0, &seq, &b).unwrap().len(), 19);
        let three = KeypointSequence::new(vec![KeypointSet::new(vec![[0.0, 0.0]; 3]).unwrap()]).unwrap();
        assert!(matches!(
            translate_sequence(&frame(), &k0, &three, &b),
            Err(Error::InvalidInput(_))
        ));
    }
}
