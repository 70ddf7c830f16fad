//! The keypoint bottleneck: spatial softmax, soft-argmax coordinates,
//! coordinate normalization and Gaussian map rendering.
//!
//! Conventions: `x` is the column and `y` the row. Pixel coordinates live on
//! `[0, W-1] x [0, H-1]`; normalized coordinates are the affine image of that
//! lattice on `[-1, 1]^2`. Map stacks are stored channel-major (`[K, H, W]`).
//!
//! Every operation exists twice: as a differentiable graph op over batches
//! (`*_var`) used inside the networks, and as a plain value function. The value
//! functions evaluate the graph ops on an untracked tape, so both share one
//! implementation.

use std::f64::consts::PI;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

const SUM_TOLERANCE: f64 = 1e-4;

/// Per-keypoint spatial probability maps, `[K, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMapStack {
    values: Tensor<f64>,
}

impl ProbabilityMapStack {
    /// Wraps `[K, H, W]` values after checking they are non-negative and that
    /// every channel sums to one.
    pub fn new(values: Tensor<f64>) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::invalid(format!(
                "probability maps must be [K, H, W], got {:?}",
                values.shape()
            )));
        }
        let plane = values.shape()[1] * values.shape()[2];
        for (k, ch) in values.data().chunks(plane).enumerate() {
            if ch.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::invalid(format!("channel {k} has negative or NaN mass")));
            }
            let total: f64 = ch.iter().sum();
            if (total - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::invalid(format!("channel {k} sums to {total}, not 1")));
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor<f64> {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn at(&self, k: usize, y: usize, x: usize) -> f64 {
        self.values.data()[(k * self.height() + y) * self.width() + x]
    }
}

/// `K` keypoints in normalized coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct KeypointSet {
    coords: Vec<[f64; 2]>,
}

impl KeypointSet {
    pub fn new(coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("a keypoint set needs at least one keypoint"));
        }
        for (i, c) in coords.iter().enumerate() {
            if c.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
                return Err(Error::invalid(format!(
                    "keypoint {i} = {c:?} is outside [-1, 1]"
                )));
            }
        }
        Ok(Self { coords })
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// `[K, 2]` tensor in `(x, y)` order.
    pub fn to_tensor<E: Element>(&self) -> Tensor<E> {
        Tensor::from_fn(vec![self.coords.len(), 2], |i| E::lit(self.coords[i / 2][i % 2]))
    }

    /// Reads `[K, 2]` values, clamping float round-off just past the boundary.
    pub fn from_tensor<E: Element>(t: &Tensor<E>) -> Result<Self> {
        if t.rank() != 2 || t.shape()[1] != 2 {
            return Err(Error::invalid(format!("keypoints must be [K, 2], got {:?}", t.shape())));
        }
        let coords = t
            .data()
            .chunks(2)
            .map(|c| {
                let f = |v: E| v.to_f64().unwrap_or(f64::NAN);
                [f(c[0]).clamp(-1.0, 1.0), f(c[1]).clamp(-1.0, 1.0)]
            })
            .collect::<Vec<_>>();
        if coords.iter().flatten().any(|v| v.is_nan()) {
            return Err(Error::Numeric("keypoint tensor contains NaN".into()));
        }
        Self::new(coords)
    }
}

impl TryFrom<Vec<[f64; 2]>> for KeypointSet {
    type Error = Error;

    fn try_from(v: Vec<[f64; 2]>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<KeypointSet> for Vec<[f64; 2]> {
    fn from(k: KeypointSet) -> Self {
        k.coords
    }
}

/// Per-keypoint Gaussian maps, `[K, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMapStack {
    values: Tensor<f64>,
    sigma: f64,
}

impl GaussianMapStack {
    pub fn values(&self) -> &Tensor<f64> {
        &self.values
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `1 / (sigma * sqrt(2 pi))`, the largest value any entry can take.
    pub fn peak(&self) -> f64 {
        gaussian_peak(self.sigma)
    }

    pub fn at(&self, k: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.values.shape()[1], self.values.shape()[2]);
        self.values.data()[(k * h + y) * w + x]
    }
}

pub fn gaussian_peak(sigma: f64) -> f64 {
    1.0 / (sigma * (2.0 * PI).sqrt())
}

/// Normalized coordinate of lattice index `i` on an axis with `n` samples.
#[inline]
pub fn lattice_coord(i: usize, n: usize) -> f64 {
    2.0 * i as f64 / (n - 1) as f64 - 1.0
}

// ---------------------------------------------------------------------------
// Graph operations

/// Softmax over all spatial positions of each channel: `[N, K, H, W]` in and out.
pub fn spatial_softmax_var<'t, E: Element>(logits: &Var<'t, E>) -> Var<'t, E> {
    let s = logits.shape().to_vec();
    assert_eq!(s.len(), 4, "spatial softmax expects [N, K, H, W]");
    logits
        .reshape(&[s[0] * s[1], s[2] * s[3]])
        .softmax_last()
        .reshape(&s)
}

/// Expected pixel coordinates of `[N, K, H, W]` probability maps: `[N, K, 2]`.
pub fn expected_coordinates_var<'t, E: Element>(probs: &Var<'t, E>) -> Var<'t, E> {
    let s = probs.shape().to_vec();
    assert_eq!(s.len(), 4, "expected coordinates need [N, K, H, W]");
    let (h, w) = (s[2], s[3]);
    let grid = Tensor::from_fn(vec![h * w, 2], |i| {
        let (pos, axis) = (i / 2, i % 2);
        E::from_usize(if axis == 0 { pos % w } else { pos / w }).unwrap()
    });
    let grid = probs.tape().constant(grid);
    probs
        .reshape(&[s[0] * s[1], h * w])
        .matmul(&grid)
        .reshape(&[s[0], s[1], 2])
}

/// Per-axis affine map `x -> ax * x + bx`, `y -> ay * y + by` on `[..., 2]` tensors.
fn affine_xy<'t, E: Element>(v: &Var<'t, E>, scale: [f64; 2], shift: [f64; 2]) -> Var<'t, E> {
    assert_eq!(v.shape().last(), Some(&2), "coordinates must end in an axis of 2");
    let a = [E::lit(scale[0]), E::lit(scale[1])];
    let b = [E::lit(shift[0]), E::lit(shift[1])];
    let out = Tensor::from_fn(v.shape().to_vec(), |i| {
        v.value().data()[i] * a[i % 2] + b[i % 2]
    });
    let slot = v.slot();
    let n = out.len();
    v.tape().record(out, &[v], move |g, sink| {
        sink.accumulate(slot, n, |gx| {
            for (i, (d, &gv)) in gx.iter_mut().zip(g.data()).enumerate() {
                *d += gv * a[i % 2];
            }
        });
    })
}

/// Pixel coordinates on an `h x w` lattice to normalized coordinates.
pub fn normalize_var<'t, E: Element>(pixels: &Var<'t, E>, h: usize, w: usize) -> Var<'t, E> {
    let sx = 2.0 / (w - 1) as f64;
    let sy = 2.0 / (h - 1) as f64;
    affine_xy(pixels, [sx, sy], [-1.0, -1.0])
}

/// Soft-argmax keypoints of detector logits: `[N, K, H, W] -> [N, K, 2]`, normalized.
pub fn soft_argmax_var<'t, E: Element>(logits: &Var<'t, E>) -> Var<'t, E> {
    let (h, w) = (logits.shape()[2], logits.shape()[3]);
    let probs = spatial_softmax_var(logits);
    normalize_var(&expected_coordinates_var(&probs), h, w)
}

/// Renders `[N, K, 2]` normalized keypoints into `[N, K, h, w]` Gaussian maps
/// `exp(-|u - k|^2 / (2 sigma^2)) / (sigma sqrt(2 pi))` over the normalized lattice.
pub fn gaussian_maps_var<'t, E: Element>(
    kps: &Var<'t, E>,
    h: usize,
    w: usize,
    sigma: f64,
) -> Var<'t, E> {
    let s = kps.shape().to_vec();
    assert!(s.len() == 3 && s[2] == 2, "keypoints must be [N, K, 2], got {s:?}");
    assert!(h >= 2 && w >= 2 && sigma > 0.0);
    let (n, k) = (s[0], s[1]);
    let gx: Rc<Vec<E>> = Rc::new((0..w).map(|i| E::lit(lattice_coord(i, w))).collect());
    let gy: Rc<Vec<E>> = Rc::new((0..h).map(|i| E::lit(lattice_coord(i, h))).collect());
    let peak = E::lit(gaussian_peak(sigma));
    let inv2s2 = E::lit(1.0 / (2.0 * sigma * sigma));
    let kv = kps.value_rc();
    let mut out = Vec::with_capacity(n * k * h * w);
    for c in kv.data().chunks(2) {
        let (cx, cy) = (c[0], c[1]);
        for &yy in gy.iter() {
            let dy2 = (yy - cy) * (yy - cy);
            for &xx in gx.iter() {
                let dx = xx - cx;
                out.push(peak * (-(dx * dx + dy2) * inv2s2).exp());
            }
        }
    }
    let out = Tensor::from_parts(vec![n, k, h, w], out);
    let maps = Rc::new(out.clone());
    let slot = kps.slot();
    let inv_s2 = E::lit(1.0 / (sigma * sigma));
    kps.tape().record(out, &[kps], move |g, sink| {
        sink.accumulate(slot, n * k * 2, |gk| {
            let plane = h * w;
            for idx in 0..n * k {
                let (cx, cy) = (kv.data()[2 * idx], kv.data()[2 * idx + 1]);
                let (mut ax, mut ay) = (E::zero(), E::zero());
                let mv = &maps.data()[idx * plane..(idx + 1) * plane];
                let gv = &g.data()[idx * plane..(idx + 1) * plane];
                for (yi, &yy) in gy.iter().enumerate() {
                    for (xi, &xx) in gx.iter().enumerate() {
                        let t = gv[yi * w + xi] * mv[yi * w + xi];
                        ax += t * (xx - cx);
                        ay += t * (yy - cy);
                    }
                }
                gk[2 * idx] += ax * inv_s2;
                gk[2 * idx + 1] += ay * inv_s2;
            }
        });
    })
}

// ---------------------------------------------------------------------------
// Value functions

/// Spatial softmax of `[K, H, W]` logits.
pub fn spatial_softmax(logits: &Tensor<f64>) -> Result<ProbabilityMapStack> {
    if logits.rank() != 3 {
        return Err(Error::invalid(format!(
            "logits must be [K, H, W], got {:?}",
            logits.shape()
        )));
    }
    if !logits.all_finite() {
        return Err(Error::invalid("logits contain non-finite values"));
    }
    let s = logits.shape();
    let batched = logits.clone().reshape(vec![1, s[0], s[1], s[2]])?;
    let tape = Tape::new();
    let p = spatial_softmax_var(&tape.constant(batched));
    let values = p.value().clone().reshape(s.to_vec())?;
    Ok(ProbabilityMapStack { values })
}

/// Expected pixel coordinates `sum_u u * l_u` of every channel.
pub fn expected_coordinates(maps: &ProbabilityMapStack) -> Result<Vec<[f64; 2]>> {
    // Re-check: callers may have built the stack before mutating upstream data.
    let checked = ProbabilityMapStack::new(maps.values.clone())?;
    let s = checked.values.shape().to_vec();
    let tape = Tape::new();
    let v = tape.constant(checked.values.reshape(vec![1, s[0], s[1], s[2]])?);
    let coords = expected_coordinates_var(&v);
    Ok(coords
        .value()
        .data()
        .chunks(2)
        .map(|c| [c[0], c[1]])
        .collect())
}

/// Maps pixel coordinates on an `h x w` lattice onto `[-1, 1]^2`.
pub fn normalize_keypoints(pixels: &[[f64; 2]], h: usize, w: usize) -> Result<KeypointSet> {
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("normalization needs h, w >= 2, got {h}x{w}")));
    }
    let (mx, my) = ((w - 1) as f64, (h - 1) as f64);
    let coords = pixels
        .iter()
        .map(|&[x, y]| {
            if !(0.0..=mx).contains(&x) || !(0.0..=my).contains(&y) {
                return Err(Error::invalid(format!(
                    "pixel ({x}, {y}) outside [0, {mx}] x [0, {my}]"
                )));
            }
            Ok([2.0 * x / mx - 1.0, 2.0 * y / my - 1.0])
        })
        .collect::<Result<Vec<_>>>()?;
    KeypointSet::new(coords)
}

/// Inverse of [`normalize_keypoints`].
pub fn denormalize_keypoints(kps: &KeypointSet, h: usize, w: usize) -> Result<Vec<[f64; 2]>> {
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("normalization needs h, w >= 2, got {h}x{w}")));
    }
    let (mx, my) = ((w - 1) as f64, (h - 1) as f64);
    Ok(kps
        .coords()
        .iter()
        .map(|&[x, y]| [(x + 1.0) * mx / 2.0, (y + 1.0) * my / 2.0])
        .collect())
}

/// Renders one Gaussian map per keypoint on an `h x w` normalized lattice.
pub fn render_gaussian_maps(
    kps: &KeypointSet,
    h: usize,
    w: usize,
    sigma: f64,
) -> Result<GaussianMapStack> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("map size must be at least 2x2, got {h}x{w}")));
    }
    let tape = Tape::new();
    let k = kps.len();
    let t = kps.to_tensor::<f64>().reshape(vec![1, k, 2])?;
    let maps = gaussian_maps_var(&tape.constant(t), h, w, sigma);
    Ok(GaussianMapStack {
        values: maps.value().clone().reshape(vec![k, h, w])?,
        sigma,
    })
}
