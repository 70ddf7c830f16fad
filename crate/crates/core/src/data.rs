//! Frame-directory datasets, stage-1 pair sampling, augmentation and the
//! synthetic video generators.
//!
//! On-disk layout:
//!
//! ```text
//! root/actions.txt                 one class name per line, index = line number
//! root/splits/<split>.txt          optional, one clip id per line
//! root/videos/<id>/frame_000001.png ...
//! root/videos/<id>/meta            "action: <name>" and "num_frames: <n>"
//! root/videos/<id>/centers         synthetic only: "x y" per frame per object
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ImageBuffer, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::config::AugmentConfig;
use crate::error::{Error, Result};
use crate::motion::ActionCode;
use crate::translator::Frame;

/// Split name that selects every clip regardless of split files.
pub const ALL_SPLIT: &str = "all";

// ---------------------------------------------------------------------------
// Image I/O

/// 8-bit value to the working range.
pub fn decode_u8(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

/// Working-range value to 8 bits, rounding to nearest.
pub fn encode_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn read_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(decode_u8).collect();
    Frame::new(Tensor::new(vec![h as usize, w as usize, 3], data)?)
}

pub fn frame_to_image(frame: &Frame) -> RgbImage {
    let raw = frame.pixels().data().iter().map(|&v| encode_u8(v)).collect();
    ImageBuffer::<Rgb<u8>, _>::from_raw(frame.width() as u32, frame.height() as u32, raw)
        .expect("buffer matches dimensions")
}

pub fn write_frame(frame: &Frame, path: &Path) -> Result<()> {
    frame_to_image(frame)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Writes `frames` side by side as one PNG strip.
pub fn write_contact_sheet(frames: &[Frame], path: &Path) -> Result<()> {
    let first = frames.first().ok_or_else(|| Error::invalid("contact sheet needs at least one frame"))?;
    let (h, w) = (first.height(), first.width());
    if frames.iter().any(|f| f.height() != h || f.width() != w) {
        return Err(Error::invalid("contact sheet frames differ in size"));
    }
    let mut sheet = RgbImage::new((w * frames.len()) as u32, h as u32);
    for (i, f) in frames.iter().enumerate() {
        image::imageops::replace(&mut sheet, &frame_to_image(f), (i * w) as i64, 0);
    }
    sheet
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{:06}.png", index + 1)
}

// ---------------------------------------------------------------------------
// Clips and datasets

#[derive(Clone, Debug)]
enum FrameSource {
    Memory(Vec<Frame>),
    Disk(Vec<PathBuf>),
}

/// An ordered run of frames with its action label.
#[derive(Clone, Debug)]
pub struct VideoClip {
    pub id: String,
    pub action: ActionCode,
    source: FrameSource,
    /// Per frame, the pixel centers of every object (synthetic sets only).
    pub centers: Option<Vec<Vec<[f64; 2]>>>,
}

impl VideoClip {
    pub fn from_frames(id: impl Into<String>, action: ActionCode, frames: Vec<Frame>) -> Result<Self> {
        let id = id.into();
        if frames.len() < 2 {
            return Err(Error::invalid(format!("clip {id} is too short: {} frame(s)", frames.len())));
        }
        let s = frames[0].pixels().shape().to_vec();
        if frames.iter().any(|f| f.pixels().shape() != &s[..]) {
            return Err(Error::invalid(format!("clip {id} mixes frame sizes")));
        }
        Ok(Self {
            id,
            action,
            source: FrameSource::Memory(frames),
            centers: None,
        })
    }

    pub fn with_centers(mut self, centers: Vec<Vec<[f64; 2]>>) -> Result<Self> {
        if centers.len() != self.len() {
            return Err(Error::invalid("one center list per frame is required"));
        }
        self.centers = Some(centers);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        match &self.source {
            FrameSource::Memory(f) => f.len(),
            FrameSource::Disk(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frame `index`, decoded on demand for clips loaded from disk.
    pub fn frame(&self, index: usize) -> Result<Frame> {
        match &self.source {
            FrameSource::Memory(f) => f
                .get(index)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("frame {index} out of range"))),
            FrameSource::Disk(p) => {
                let path = p
                    .get(index)
                    .ok_or_else(|| Error::invalid(format!("frame {index} out of range")))?;
                read_frame(path)
            }
        }
    }

    pub fn frames(&self) -> Result<Vec<Frame>> {
        (0..self.len()).map(|i| self.frame(i)).collect()
    }
}

/// Where and what to load.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub split: String,
    pub image_size: [usize; 2],
    /// Expected number of classes; `None` accepts whatever `actions.txt` lists.
    pub action_count: Option<usize>,
    pub augment: AugmentConfig,
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>, split: impl Into<String>, image_size: [usize; 2]) -> Self {
        Self {
            root: root.into(),
            split: split.into(),
            image_size,
            action_count: None,
            augment: AugmentConfig::disabled(),
        }
    }
}

/// Clips of one split, sorted by id.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub actions: Vec<String>,
    pub clips: Vec<VideoClip>,
}

impl Dataset {
    pub fn action_index(&self, name: &str) -> Option<usize> {
        self.actions.iter().position(|a| a == name)
    }
}

pub fn read_actions(root: &Path) -> Result<Vec<String>> {
    let path = root.join("actions.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::data(&path, format!("cannot read: {e}")))?;
    let actions: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if actions.is_empty() {
        return Err(Error::data(&path, "no action classes listed"));
    }
    Ok(actions)
}

fn parse_meta(path: &Path) -> Result<(String, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::data(path, format!("missing metadata: {e}")))?;
    let mut fields = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| Error::data(path, format!("malformed line {line:?}")))?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    let action = fields
        .remove("action")
        .ok_or_else(|| Error::data(path, "missing field `action`"))?;
    let n = fields
        .remove("num_frames")
        .ok_or_else(|| Error::data(path, "missing field `num_frames`"))?
        .parse()
        .map_err(|_| Error::data(path, "num_frames is not an integer"))?;
    Ok((action, n))
}

fn parse_centers(path: &Path, frames: usize) -> Result<Vec<Vec<[f64; 2]>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: Vec<f64> = line
            .split_whitespace()
            .map(f64::from_str)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::data(path, format!("malformed center line {line:?}")))?;
        if v.len() != 2 {
            return Err(Error::data(path, format!("expected `x y`, got {line:?}")));
        }
        points.push([v[0], v[1]]);
    }
    if points.is_empty() || points.len() % frames != 0 {
        return Err(Error::data(
            path,
            format!("{} center lines do not divide into {frames} frames", points.len()),
        ));
    }
    let per = points.len() / frames;
    Ok(points.chunks(per).map(<[_]>::to_vec).collect())
}

fn load_clip(dir: &Path, actions: &[String], size: [usize; 2]) -> Result<VideoClip> {
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::data(dir, "clip directory name is not UTF-8"))?
        .to_string();
    let (action_name, n) = parse_meta(&dir.join("meta"))?;
    let index = actions
        .iter()
        .position(|a| *a == action_name)
        .ok_or_else(|| Error::data(dir, format!("unknown action {action_name:?}")))?;
    let mut numbers = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let name = entry.map_err(|e| Error::io(dir, e))?.file_name();
        let name = name.to_string_lossy();
        if let Some(num) = name.strip_prefix("frame_").and_then(|r| r.strip_suffix(".png")) {
            let num: usize = num
                .parse()
                .map_err(|_| Error::data(dir, format!("bad frame file name {name}")))?;
            numbers.push(num);
        }
    }
    numbers.sort_unstable();
    if numbers.iter().enumerate().any(|(i, &n)| n != i + 1) {
        return Err(Error::data(dir, "frame numbering is not contiguous from 1"));
    }
    if numbers.len() != n {
        return Err(Error::data(
            dir,
            format!("meta declares {n} frames, found {}", numbers.len()),
        ));
    }
    if n < 2 {
        return Err(Error::data(dir, format!("clip is too short: {n} frame(s)")));
    }
    let first = dir.join(frame_file_name(0));
    let (w, h) = image::image_dimensions(&first).map_err(|source| Error::Image {
        path: first.clone(),
        source,
    })?;
    if [h as usize, w as usize] != size {
        return Err(Error::data(
            dir,
            format!("frames are {h}x{w}, configured image size is {}x{}", size[0], size[1]),
        ));
    }
    let centers_path = dir.join("centers");
    let centers = if centers_path.exists() {
        Some(parse_centers(&centers_path, n)?)
    } else {
        None
    };
    Ok(VideoClip {
        id,
        action: ActionCode::one_hot(index, actions.len())?,
        source: FrameSource::Disk((0..n).map(|i| dir.join(frame_file_name(i))).collect()),
        centers,
    })
}

fn read_split(root: &Path, split: &str) -> Result<Option<Vec<String>>> {
    if split == ALL_SPLIT {
        return Ok(None);
    }
    let path = root.join("splits").join(format!("{split}.txt"));
    let text = fs::read_to_string(&path).map_err(|e| Error::data(&path, format!("unknown split: {e}")))?;
    let ids: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if ids.is_empty() {
        return Err(Error::data(&path, "split lists no clips"));
    }
    Ok(Some(ids))
}

/// Loads the clips of a split. Frames are decoded when accessed.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if !spec.root.is_dir() {
        return Err(Error::data(&spec.root, "dataset root does not exist"));
    }
    spec.augment.validate()?;
    let actions = read_actions(&spec.root)?;
    if let Some(c) = spec.action_count {
        if c != actions.len() {
            return Err(Error::data(
                spec.root.join("actions.txt"),
                format!("lists {} classes, configuration expects {c}", actions.len()),
            ));
        }
    }
    let videos = spec.root.join("videos");
    let mut dirs = Vec::new();
    if videos.is_dir() {
        for entry in fs::read_dir(&videos).map_err(|e| Error::io(&videos, e))? {
            let path = entry.map_err(|e| Error::io(&videos, e))?.path();
            if path.is_dir() {
                dirs.push(path);
            }
        }
    }
    dirs.sort();
    let wanted = read_split(&spec.root, &spec.split)?;
    if let Some(ids) = &wanted {
        if let Some(missing) = ids.iter().find(|id| !videos.join(id).is_dir()) {
            return Err(Error::data(&videos, format!("split clip {missing} not found")));
        }
        dirs.retain(|d| ids.iter().any(|id| d.ends_with(id)));
    }
    let clips = dirs
        .iter()
        .map(|d| load_clip(d, &actions, spec.image_size))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        root: spec.root.clone(),
        actions,
        clips,
    })
}

/// SHA-256 over every file below `root`, with relative paths, in sorted order.
pub fn dataset_digest(root: &Path) -> Result<String> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

// ---------------------------------------------------------------------------
// Pair sampling

/// Two distinct frame indices with `|i - j| <= max_gap`, uniform over all
/// admissible ordered pairs.
pub fn sample_pair_indices<R: Rng>(len: usize, max_gap: Option<usize>, rng: &mut R) -> (usize, usize) {
    assert!(len >= 2, "pair sampling needs at least two frames");
    let gap = max_gap.unwrap_or(len - 1).clamp(1, len - 1);
    loop {
        let i = rng.random_range(0..len);
        let d = rng.random_range(1..=gap);
        let j = if rng.random_bool(0.5) {
            i.checked_add(d)
        } else {
            i.checked_sub(d)
        };
        if let Some(j) = j.filter(|&j| j < len) {
            return (i, j);
        }
    }
}

/// Draws a stage-1 training pair `(v, v')` from one clip.
pub fn sample_frame_pair<R: Rng>(
    clip: &VideoClip,
    max_gap: Option<usize>,
    rng: &mut R,
) -> Result<(Frame, Frame)> {
    let (i, j) = sample_pair_indices(clip.len(), max_gap, rng);
    Ok((clip.frame(i)?, clip.frame(j)?))
}

// ---------------------------------------------------------------------------
// Augmentation

/// One draw of the random augmentation, applied identically to both frames
/// of a pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub flip: bool,
    /// Radians, counter-clockwise.
    pub angle: f64,
    /// Crop side as a fraction of the frame.
    pub crop: f64,
    /// Crop origin as a fraction of the remaining room, per axis `[x, y]`.
    pub crop_offset: [f64; 2],
    pub gains: [f64; 3],
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            flip: false,
            angle: 0.0,
            crop: 1.0,
            crop_offset: [0.0, 0.0],
            gains: [1.0; 3],
        }
    }

    pub fn draw<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut t = Self::identity();
        if cfg.flip {
            t.flip = rng.random_bool(cfg.flip_probability);
        }
        if cfg.rotation_degrees > 0.0 {
            t.angle = rng
                .random_range(-cfg.rotation_degrees..=cfg.rotation_degrees)
                .to_radians();
        }
        if cfg.crop {
            t.crop = rng.random_range(cfg.crop_fraction..=1.0);
            t.crop_offset = [rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)];
        }
        if cfg.color_strength > 0.0 {
            let s = cfg.color_strength;
            for g in &mut t.gains {
                *g = rng.random_range(1.0 - s..=1.0 + s);
            }
        }
        Ok(t)
    }

    fn is_geometric_identity(&self) -> bool {
        self.angle == 0.0 && self.crop == 1.0
    }

    pub fn apply(&self, frame: &Frame) -> Frame {
        let (h, w) = (frame.height(), frame.width());
        let src = frame.pixels().data();
        let mut out = vec![0f32; h * w * 3];
        if self.is_geometric_identity() {
            for y in 0..h {
                for x in 0..w {
                    let sx = if self.flip { w - 1 - x } else { x };
                    let (d, s) = ((y * w + x) * 3, (y * w + sx) * 3);
                    out[d..d + 3].copy_from_slice(&src[s..s + 3]);
                }
            }
        } else {
            let (cw, ch) = (self.crop * (w - 1) as f64, self.crop * (h - 1) as f64);
            let x0 = self.crop_offset[0] * ((w - 1) as f64 - cw);
            let y0 = self.crop_offset[1] * ((h - 1) as f64 - ch);
            let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
            let (sin, cos) = self.angle.sin_cos();
            for y in 0..h {
                for x in 0..w {
                    let mut u = x0 + x as f64 / (w - 1).max(1) as f64 * cw;
                    let v = y0 + y as f64 / (h - 1).max(1) as f64 * ch;
                    if self.flip {
                        u = (w - 1) as f64 - u;
                    }
                    let (dx, dy) = (u - cx, v - cy);
                    let sx = cx + cos * dx + sin * dy;
                    let sy = cy - sin * dx + cos * dy;
                    let d = (y * w + x) * 3;
                    bilinear(src, h, w, sx, sy, &mut out[d..d + 3]);
                }
            }
        }
        if self.gains != [1.0; 3] {
            for px in out.chunks_mut(3) {
                for (c, v) in px.iter_mut().enumerate() {
                    let unit = (*v as f64 + 1.0) / 2.0 * self.gains[c];
                    *v = (unit * 2.0 - 1.0).clamp(-1.0, 1.0) as f32;
                }
            }
        }
        Frame::new(Tensor::new(vec![h, w, 3], out).expect("shape preserved"))
            .expect("finite pixels")
    }
}

/// Bilinear sample with edge replication.
fn bilinear(src: &[f32], h: usize, w: usize, x: f64, y: f64, out: &mut [f32]) {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    for c in 0..3 {
        let p = |yy: usize, xx: usize| src[(yy * w + xx) * 3 + c];
        let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
        let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
        out[c] = top * (1.0 - fy) + bottom * fy;
    }
}

/// Applies one shared random transform to both frames of a pair.
pub fn augment<R: Rng>(v: &Frame, v2: &Frame, rng: &mut R, cfg: &AugmentConfig) -> Result<(Frame, Frame)> {
    if v.pixels().shape() != v2.pixels().shape() {
        return Err(Error::invalid("augment: frames differ in shape"));
    }
    let t = Transform::draw(cfg, rng)?;
    Ok((t.apply(v), t.apply(v2)))
}

// ---------------------------------------------------------------------------
// Synthetic videos

/// Synthetic dataset families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// One bright disc; the class selects its motion law.
    MovingDisc,
    /// Two linked bobs; the class selects the swing direction.
    TwoPartPendulum,
    /// A disc and a square bouncing off the walls; the class selects the
    /// heading.
    BouncingShapes,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moving_disc" => Ok(Self::MovingDisc),
            "two_part_pendulum" => Ok(Self::TwoPartPendulum),
            "bouncing_shapes" => Ok(Self::BouncingShapes),
            other => Err(Error::config(format!(
                "unknown synthetic kind {other:?} (moving_disc, two_part_pendulum, bouncing_shapes)"
            ))),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MovingDisc => "moving_disc",
            Self::TwoPartPendulum => "two_part_pendulum",
            Self::BouncingShapes => "bouncing_shapes",
        })
    }
}

impl SynthKind {
    pub fn action_names(&self, classes: usize) -> Vec<String> {
        let base: &[&str] = match self {
            Self::MovingDisc => &["horizontal", "orbit", "vertical", "diagonal"],
            Self::TwoPartPendulum => &["swing_right", "swing_left"],
            Self::BouncingShapes => &["east", "north", "west", "south"],
        };
        (0..classes)
            .map(|c| match base.get(c) {
                Some(name) => name.to_string(),
                None => format!("law{c}"),
            })
            .collect()
    }
}

/// Parameters of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub count: usize,
    pub length: usize,
    pub image_size: [usize; 2],
    pub classes: usize,
    pub seed: u64,
}

/// One rendered clip before it is written out.
#[derive(Clone, Debug)]
pub struct SynthClip {
    pub frames: Vec<Frame>,
    pub centers: Vec<Vec<[f64; 2]>>,
    pub action: usize,
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<f32>,
}

impl Canvas {
    /// Static smooth texture, darker than any foreground object.
    fn background<R: Rng>(h: usize, w: usize, rng: &mut R) -> Self {
        let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.75..-0.35));
        let waves: Vec<(f64, f64, f64, usize, f32)> = (0..4)
            .map(|_| {
                (
                    rng.random_range(0.5..3.0) * std::f64::consts::TAU / w as f64,
                    rng.random_range(0.5..3.0) * std::f64::consts::TAU / h as f64,
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0..3),
                    rng.random_range(0.05..0.15),
                )
            })
            .collect();
        let mut px = vec![0f32; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut v = base[c];
                    for &(fx, fy, ph, ch, amp) in &waves {
                        let s = (fx * x as f64 + fy * y as f64 + ph).sin() as f32;
                        v += if ch == c { amp * s } else { 0.3 * amp * s };
                    }
                    px[(y * w + x) * 3 + c] = v.clamp(-1.0, -0.1);
                }
            }
        }
        Self { h, w, px }
    }

    /// Paints `color` with per-pixel coverage `alpha(x, y)` over a bounding box.
    fn paint(&mut self, bbox: [f64; 4], color: [f32; 3], alpha: impl Fn(f64, f64) -> f64) {
        let x0 = bbox[0].floor().max(0.0) as usize;
        let y0 = bbox[1].floor().max(0.0) as usize;
        let x1 = (bbox[2].ceil() as usize).min(self.w - 1);
        let y1 = (bbox[3].ceil() as usize).min(self.h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let a = alpha(x as f64, y as f64).clamp(0.0, 1.0) as f32;
                if a > 0.0 {
                    let p = &mut self.px[(y * self.w + x) * 3..(y * self.w + x) * 3 + 3];
                    for c in 0..3 {
                        p[c] = (1.0 - a) * p[c] + a * color[c];
                    }
                }
            }
        }
    }

    fn disc(&mut self, center: [f64; 2], r: f64, color: [f32; 3]) {
        let bbox = [center[0] - r - 1.0, center[1] - r - 1.0, center[0] + r + 1.0, center[1] + r + 1.0];
        self.paint(bbox, color, |x, y| {
            let d = ((x - center[0]).powi(2) + (y - center[1]).powi(2)).sqrt();
            r + 0.5 - d
        });
    }

    fn square(&mut self, center: [f64; 2], half: f64, color: [f32; 3]) {
        let bbox = [center[0] - half - 1.0, center[1] - half - 1.0, center[0] + half + 1.0, center[1] + half + 1.0];
        self.paint(bbox, color, |x, y| {
            let d = (x - center[0]).abs().max((y - center[1]).abs());
            half + 0.5 - d
        });
    }

    fn segment(&mut self, a: [f64; 2], b: [f64; 2], width: f64, color: [f32; 3]) {
        let bbox = [
            a[0].min(b[0]) - width - 1.0,
            a[1].min(b[1]) - width - 1.0,
            a[0].max(b[0]) + width + 1.0,
            a[1].max(b[1]) + width + 1.0,
        ];
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len2 = (dx * dx + dy * dy).max(1e-12);
        self.paint(bbox, color, |x, y| {
            let t = (((x - a[0]) * dx + (y - a[1]) * dy) / len2).clamp(0.0, 1.0);
            let d = ((x - a[0] - t * dx).powi(2) + (y - a[1] - t * dy).powi(2)).sqrt();
            width / 2.0 + 0.5 - d
        });
    }

    fn into_frame(self) -> Frame {
        Frame::new(Tensor::new(vec![self.h, self.w, 3], self.px).expect("canvas shape"))
            .expect("finite canvas")
    }
}

fn bright_color<R: Rng>(rng: &mut R) -> [f32; 3] {
    let mut c: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.55..1.0));
    c[rng.random_range(0..3)] = 1.0;
    c
}

fn moving_disc_clip<R: Rng>(spec: &SynthSpec, action: usize, rng: &mut R) -> SynthClip {
    let [h, w] = spec.image_size;
    let (hf, wf) = (h as f64, w as f64);
    let r = (0.08 * hf.min(wf)).max(1.5);
    let margin = r + 1.5;
    let (xmin, xmax) = (margin, wf - 1.0 - margin);
    let (ymin, ymax) = (margin, hf - 1.0 - margin);
    let (mx, my) = ((xmin + xmax) / 2.0, (ymin + ymax) / 2.0);
    let (ax, ay) = ((xmax - xmin) / 2.0, (ymax - ymin) / 2.0);
    let amp = rng.random_range(0.5..1.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let omega = rng.random_range(0.8..1.6) * std::f64::consts::TAU / spec.length.max(2) as f64;
    let off: [f64; 2] = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
    let law = action % 4;
    let centers: Vec<[f64; 2]> = (0..spec.length)
        .map(|t| {
            let s = (omega * t as f64 + phase).sin();
            let c = (omega * t as f64 + phase).cos();
            let (u, v) = match law {
                0 => (amp * s, off[1]),
                1 => (amp * 0.8 * c, amp * 0.8 * s),
                2 => (off[0], amp * s),
                _ => (amp * s * 0.8, amp * s * 0.8),
            };
            [mx + ax * u.clamp(-1.0, 1.0), my + ay * v.clamp(-1.0, 1.0)]
        })
        .collect();
    let bg = Canvas::background(h, w, rng);
    let color = bright_color(rng);
    let frames = centers
        .iter()
        .map(|&c| {
            let mut canvas = Canvas {
                h,
                w,
                px: bg.px.clone(),
            };
            canvas.disc(c, r, color);
            canvas.into_frame()
        })
        .collect();
    SynthClip {
        frames,
        centers: centers.into_iter().map(|c| vec![c]).collect(),
        action,
    }
}

fn pendulum_clip<R: Rng>(spec: &SynthSpec, action: usize, rng: &mut R) -> SynthClip {
    let [h, w] = spec.image_size;
    let (hf, wf) = (h as f64, w as f64);
    let size = hf.min(wf);
    let r = (0.07 * size).max(1.5);
    let pivot = [wf / 2.0 + rng.random_range(-0.05..0.05) * wf, 0.18 * hf];
    let l1 = rng.random_range(0.24..0.3) * size;
    let l2 = rng.random_range(0.18..0.24) * size;
    // Direction: even classes swing right, odd classes left; higher classes
    // swing wider.
    let dir = if action % 2 == 0 { 1.0 } else { -1.0 };
    let tier = (action / 2) as f64;
    let a1 = rng.random_range(0.7..0.9) + 0.15 * tier;
    let a2 = rng.random_range(0.4..0.6) + 0.1 * tier;
    let start = rng.random_range(-0.1..0.1);
    let half = std::f64::consts::PI / (spec.length.max(2) - 1) as f64;
    let clampx = |p: [f64; 2]| [p[0].clamp(r + 1.0, wf - 2.0 - r), p[1].clamp(r + 1.0, hf - 2.0 - r)];
    let mut centers = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        let s = (half * t as f64).sin();
        let th1 = start + dir * a1 * s;
        let th2 = th1 + dir * a2 * (half * t as f64 * 1.5).sin();
        let b1 = clampx([pivot[0] + l1 * th1.sin(), pivot[1] + l1 * th1.cos()]);
        let b2 = clampx([b1[0] + l2 * th2.sin(), b1[1] + l2 * th2.cos()]);
        centers.push(vec![b1, b2]);
    }
    let bg = Canvas::background(h, w, rng);
    let rod = [0.2f32, 0.2, 0.2];
    let (c1, c2) = (bright_color(rng), bright_color(rng));
    let frames = centers
        .iter()
        .map(|c| {
            let mut canvas = Canvas {
                h,
                w,
                px: bg.px.clone(),
            };
            canvas.segment(pivot, c[0], 1.5, rod);
            canvas.segment(c[0], c[1], 1.5, rod);
            canvas.disc(c[0], r, c1);
            canvas.disc(c[1], r * 0.85, c2);
            canvas.into_frame()
        })
        .collect();
    SynthClip {
        frames,
        centers,
        action,
    }
}

fn bouncing_clip<R: Rng>(spec: &SynthSpec, action: usize, rng: &mut R) -> SynthClip {
    let [h, w] = spec.image_size;
    let (hf, wf) = (h as f64, w as f64);
    let r = (0.07 * hf.min(wf)).max(1.5);
    let lo = r + 1.5;
    let hi = [wf - 1.0 - lo, hf - 1.0 - lo];
    let heading = action as f64 * std::f64::consts::TAU / spec.classes.max(1) as f64;
    let speed = 0.04 * hf.min(wf);
    let mut objects: Vec<([f64; 2], [f64; 2])> = (0..2)
        .map(|i| {
            let a = heading + rng.random_range(-0.4..0.4) + i as f64 * 0.3;
            (
                [rng.random_range(lo..hi[0]), rng.random_range(lo..hi[1])],
                [speed * a.cos(), -speed * a.sin()],
            )
        })
        .collect();
    let mut centers = Vec::with_capacity(spec.length);
    for _ in 0..spec.length {
        centers.push(objects.iter().map(|o| o.0).collect::<Vec<_>>());
        for (p, v) in &mut objects {
            for a in 0..2 {
                p[a] += v[a];
                if p[a] < lo {
                    p[a] = 2.0 * lo - p[a];
                    v[a] = -v[a];
                }
                if p[a] > hi[a] {
                    p[a] = 2.0 * hi[a] - p[a];
                    v[a] = -v[a];
                }
                p[a] = p[a].clamp(lo, hi[a]);
            }
        }
    }
    let bg = Canvas::background(h, w, rng);
    let (c1, c2) = (bright_color(rng), bright_color(rng));
    let frames = centers
        .iter()
        .map(|c| {
            let mut canvas = Canvas {
                h,
                w,
                px: bg.px.clone(),
            };
            canvas.disc(c[0], r, c1);
            canvas.square(c[1], r * 0.9, c2);
            canvas.into_frame()
        })
        .collect();
    SynthClip {
        frames,
        centers,
        action,
    }
}

/// Renders clip `index` of a synthetic dataset. Classes are assigned round-robin.
pub fn render_synthetic_clip(spec: &SynthSpec, index: usize) -> SynthClip {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let action = index % spec.classes;
    match spec.kind {
        SynthKind::MovingDisc => moving_disc_clip(spec, action, &mut rng),
        SynthKind::TwoPartPendulum => pendulum_clip(spec, action, &mut rng),
        SynthKind::BouncingShapes => bouncing_clip(spec, action, &mut rng),
    }
}

pub fn clip_id(index: usize) -> String {
    format!("clip_{index:05}")
}

/// Number of clips held out in the `test` split: the last tenth.
pub fn held_out_count(count: usize) -> usize {
    if count < 2 {
        0
    } else {
        (count / 10).max(1)
    }
}

/// Writes a synthetic dataset in the standard layout under `out`.
pub fn generate_synthetic_dataset(spec: &SynthSpec, out: &Path) -> Result<()> {
    if spec.length < 2 {
        return Err(Error::config("synthetic clips need at least 2 frames"));
    }
    if spec.classes == 0 || spec.count == 0 {
        return Err(Error::config("synthetic datasets need at least one class and one clip"));
    }
    let [h, w] = spec.image_size;
    if h < 8 || w < 8 {
        return Err(Error::config("synthetic frames must be at least 8x8"));
    }
    let videos = out.join("videos");
    fs::create_dir_all(&videos).map_err(|e| Error::io(&videos, e))?;
    let names = spec.kind.action_names(spec.classes);
    let write = |path: PathBuf, text: String| fs::write(&path, text).map_err(|e| Error::io(&path, e));
    write(out.join("actions.txt"), names.iter().map(|n| format!("{n}\n")).collect())?;
    for i in 0..spec.count {
        let clip = render_synthetic_clip(spec, i);
        let dir = videos.join(clip_id(i));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (t, f) in clip.frames.iter().enumerate() {
            write_frame(f, &dir.join(frame_file_name(t)))?;
        }
        write(
            dir.join("meta"),
            format!("action: {}\nnum_frames: {}\n", names[clip.action], spec.length),
        )?;
        let centers: String = clip
            .centers
            .iter()
            .flatten()
            .map(|c| format!("{:.4} {:.4}\n", c[0], c[1]))
            .collect();
        write(dir.join("centers"), centers)?;
    }
    let splits = out.join("splits");
    fs::create_dir_all(&splits).map_err(|e| Error::io(&splits, e))?;
    let test = held_out_count(spec.count);
    let ids = |r: std::ops::Range<usize>| r.map(|i| clip_id(i) + "\n").collect::<String>();
    write(splits.join("train.txt"), ids(0..spec.count - test))?;
    write(splits.join("test.txt"), ids(spec.count - test..spec.count))?;
    let spec_path = out.join("synth.json");
    write(spec_path, serde_json::to_string_pretty(spec).expect("spec serializes"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn spec(kind: SynthKind, classes: usize) -> SynthSpec {
        SynthSpec {
            kind,
            count: 6,
            length: 8,
            image_size: [32, 32],
            classes,
            seed: 7,
        }
    }

    #[test]
    fn quantization_round_trip_is_within_one_step() {
        for p in 0..=255u8 {
            assert_eq!(encode_u8(decode_u8(p)), p);
        }
        assert_eq!(encode_u8(-1.0), 0);
        assert_eq!(encode_u8(1.0), 255);
    }

    #[test]
    fn pair_sampling_respects_gap_and_distinctness() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let (i, j) = sample_pair_indices(10, Some(1), &mut rng);
            assert_ne!(i, j);
            assert_eq!(i.abs_diff(j), 1);
        }
        for _ in 0..100 {
            let p = sample_pair_indices(2, None, &mut rng);
            assert!(p == (0, 1) || p == (1, 0));
        }
    }

    #[test]
    fn pair_sampling_covers_every_admissible_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seen = BTreeSet::new();
        for _ in 0..10_000 {
            seen.insert(sample_pair_indices(10, None, &mut rng));
        }
        assert_eq!(seen.len(), 90);
    }

    fn test_frame() -> Frame {
        Frame::from_fn(12, 10, |y, x, c| ((x * 3 + y * 7 + c * 11) % 17) as f32 / 8.5 - 1.0).unwrap()
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let f = test_frame();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = augment(&f, &f, &mut rng, &AugmentConfig::disabled()).unwrap();
        assert_eq!(a, f);
        assert_eq!(b, f);
    }

    #[test]
    fn flip_is_an_involution() {
        let f = test_frame();
        let t = Transform {
            flip: true,
            ..Transform::identity()
        };
        assert_ne!(t.apply(&f), f);
        assert_eq!(t.apply(&t.apply(&f)), f);
    }

    #[test]
    fn augmentation_shares_one_draw_and_keeps_size() {
        let f = test_frame();
        let mut cfg = AugmentConfig::default();
        for fraction in [0.05, 0.5, 0.85, 0.99] {
            cfg.crop_fraction = fraction;
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let (a, b) = augment(&f, &f, &mut rng, &cfg).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.pixels().shape(), f.pixels().shape());
        }
        for bad in [0.0, 1.0, 1.5, -0.2] {
            cfg.crop_fraction = bad;
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            assert!(matches!(augment(&f, &f, &mut rng, &cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn synthetic_rendering_is_deterministic() {
        for kind in [SynthKind::MovingDisc, SynthKind::TwoPartPendulum, SynthKind::BouncingShapes] {
            let s = spec(kind, 2);
            let (a, b) = (render_synthetic_clip(&s, 3), render_synthetic_clip(&s, 3));
            assert_eq!(a.frames, b.frames);
            assert_eq!(a.centers, b.centers);
        }
    }

    #[test]
    fn centers_stay_inside_the_frame() {
        for kind in [SynthKind::MovingDisc, SynthKind::TwoPartPendulum, SynthKind::BouncingShapes] {
            let s = SynthSpec {
                count: 12,
                classes: 4,
                length: 30,
                ..spec(kind, 4)
            };
            for i in 0..s.count {
                for c in render_synthetic_clip(&s, i).centers.iter().flatten() {
                    assert!(c[0] >= 0.0 && c[0] <= 31.0 && c[1] >= 0.0 && c[1] <= 31.0, "{kind}: {c:?}");
                }
            }
        }
    }

    #[test]
    fn disc_center_matches_bright_centroid() {
        let s = SynthSpec {
            image_size: [64, 64],
            length: 20,
            ..spec(SynthKind::MovingDisc, 2)
        };
        for i in 0..s.count {
            let clip = render_synthetic_clip(&s, i);
            for (f, c) in clip.frames.iter().zip(&clip.centers) {
                // Weight by how far each pixel rises above the background ceiling.
                let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
                for y in 0..64 {
                    for x in 0..64 {
                        let lum = (0..3).map(|ch| f.get(y, x, ch)).fold(f32::MIN, f32::max);
                        let wgt = (lum as f64 + 0.1).max(0.0);
                        sx += wgt * x as f64;
                        sy += wgt * y as f64;
                        sw += wgt;
                    }
                }
                let (cx, cy) = (sx / sw, sy / sw);
                let err = ((cx - c[0][0]).powi(2) + (cy - c[0][1]).powi(2)).sqrt();
                assert!(err < 0.5, "clip {i}: centroid ({cx:.2}, {cy:.2}) vs {:?}", c[0]);
            }
        }
    }

    #[test]
    fn unknown_kind_is_a_config_error() {
        assert!(matches!("spiral".parse::<SynthKind>(), Err(Error::Config(_))));
        assert_eq!("two_part_pendulum".parse::<SynthKind>().unwrap(), SynthKind::TwoPartPendulum);
    }
}
