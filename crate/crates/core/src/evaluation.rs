//! Metrics: Fréchet distance, keypoint tracking error, action consistency
//! and reconstruction scores, plus the `eval` report.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::keypoint::denormalize_keypoints;
use crate::motion::{extract_pseudo_labels, sample_motion, ActionCode, KeypointSequence};
use crate::pipeline::{predict_video, ModelBundle};
use crate::translator::{
    frames_to_batch, perceptual_loss, translate_batch, FeatureExtractor, Frame, MaskMode, RandomConvPyramid,
};

// ---------------------------------------------------------------------------
// Fréchet distance

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Real,
    Generated,
}

/// `N x D` feature vectors, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    values: DMatrix<f64>,
    pub source: FeatureSource,
}

impl FeatureSet {
    pub fn new(rows: &[Vec<f64>], source: FeatureSource) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if d == 0 {
            return Err(Error::invalid("feature set is empty"));
        }
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("feature rows differ in length"));
        }
        Self::from_matrix(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]), source)
    }

    pub fn from_matrix(values: DMatrix<f64>, source: FeatureSource) -> Result<Self> {
        let (n, d) = values.shape();
        if d == 0 || n < d + 1 {
            return Err(Error::invalid(format!(
                "{n} samples of dimension {d}: covariance estimation needs at least D + 1"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature set contains non-finite values"));
        }
        Ok(Self { values, source })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mean(&self) -> DVector<f64> {
        self.values.row_mean().transpose()
    }

    /// Unbiased sample covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.values.row_mean();
        let mut centered = self.values.clone();
        for mut row in centered.row_iter_mut() {
            row -= &mu;
        }
        let c = centered.transpose() * &centered / (self.len() as f64 - 1.0);
        (&c + c.transpose()) * 0.5
    }
}

/// Largest tolerated imaginary part of an eigenvalue of `Σ_A Σ_B`,
/// relative to the largest eigenvalue magnitude (at least 1).
pub const IMAGINARY_TOLERANCE: f64 = 1e-6;

/// `Tr((Σ_A Σ_B)^{1/2})` from the eigenvalues of the product.
fn trace_sqrt_product(sa: &DMatrix<f64>, sb: &DMatrix<f64>) -> Result<f64> {
    let eig = (sa * sb).complex_eigenvalues();
    let scale = eig.iter().map(|l| l.norm()).fold(1.0, f64::max);
    let mut total = 0.0;
    for l in eig.iter() {
        if l.im.abs() > IMAGINARY_TOLERANCE * scale {
            return Err(Error::Numeric(format!(
                "covariance product has a complex eigenvalue {} + {}i",
                l.re, l.im
            )));
        }
        total += l.re.max(0.0).sqrt();
    }
    Ok(total)
}

/// `‖μ_A − μ_B‖² + Tr(Σ_A + Σ_B − 2 (Σ_A Σ_B)^{1/2})`, clamped at zero.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (sa, sb) = (a.covariance(), b.covariance());
    let offset = (a.mean() - b.mean()).norm_squared();
    let d = offset + sa.trace() + sb.trace() - 2.0 * trace_sqrt_product(&sa, &sb)?;
    Ok(d.max(0.0))
}

// ---------------------------------------------------------------------------
// Keypoint tracking

/// Sum of nearest-keypoint distances and the number of centers they cover.
fn tracking_totals(pred: &KeypointSequence, truth: &[Vec<[f64; 2]>], h: usize, w: usize) -> Result<(f64, usize)> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predicted frames but {} ground-truth frames",
            pred.len(),
            truth.len()
        )));
    }
    let (mut sum, mut count) = (0.0, 0);
    for (k, centers) in pred.frames().iter().zip(truth) {
        if centers.is_empty() {
            continue;
        }
        let px = denormalize_keypoints(k, h, w)?;
        if px.is_empty() {
            return Err(Error::invalid("a frame has no predicted keypoints"));
        }
        for c in centers {
            sum += px
                .iter()
                .map(|p| (p[0] - c[0]).hypot(p[1] - c[1]))
                .fold(f64::INFINITY, f64::min);
            count += 1;
        }
    }
    Ok((sum, count))
}

/// Mean over frames and true centers of the pixel distance to the nearest
/// predicted keypoint.
pub fn keypoint_tracking_error(pred: &KeypointSequence, truth: &[Vec<[f64; 2]>], h: usize, w: usize) -> Result<f64> {
    let (sum, count) = tracking_totals(pred, truth, h, w)?;
    if count == 0 {
        return Err(Error::invalid("no ground-truth centers"));
    }
    Ok(sum / count as f64)
}

/// [`keypoint_tracking_error`] pooled over several clips, weighting every
/// center equally.
pub fn pooled_tracking_error(items: &[(KeypointSequence, &[Vec<[f64; 2]>])], h: usize, w: usize) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0);
    for (pred, truth) in items {
        let (s, c) = tracking_totals(pred, truth, h, w)?;
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(Error::invalid("no ground-truth centers"));
    }
    Ok(sum / count as f64)
}

// ---------------------------------------------------------------------------
// Action consistency

/// Nearest class centroid in per-dimension z-scored feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct NearestCentroid {
    mean: Vec<f64>,
    scale: Vec<f64>,
    centroids: Vec<Option<Vec<f64>>>,
}

impl NearestCentroid {
    /// Fits on flattened sequences with class labels in `0..classes`.
    pub fn fit(samples: &[(KeypointSequence, usize)], classes: usize) -> Result<Self> {
        let rows: Vec<(Vec<f64>, usize)> = samples.iter().map(|(s, c)| (s.flatten(), *c)).collect();
        let d = rows.first().map_or(0, |r| r.0.len());
        if d == 0 {
            return Err(Error::invalid("no samples to fit class centroids on"));
        }
        if rows.iter().any(|r| r.0.len() != d) {
            return Err(Error::invalid("fitting sequences differ in shape"));
        }
        if let Some((_, c)) = rows.iter().find(|r| r.1 >= classes) {
            return Err(Error::invalid(format!("label {c} is outside 0..{classes}")));
        }
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r.0[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let var = rows.iter().map(|r| (r.0[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut sums = vec![(vec![0.0; d], 0usize); classes];
        for (x, c) in &rows {
            for j in 0..d {
                sums[*c].0[j] += (x[j] - mean[j]) / scale[j];
            }
            sums[*c].1 += 1;
        }
        let centroids: Vec<Option<Vec<f64>>> = sums
            .into_iter()
            .map(|(s, k)| (k > 0).then(|| s.into_iter().map(|v| v / k as f64).collect()))
            .collect();
        if centroids.iter().flatten().count() < 2 {
            return Err(Error::invalid("at least two classes are needed to fit centroids"));
        }
        Ok(Self { mean, scale, centroids })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn predict(&self, seq: &KeypointSequence) -> Result<usize> {
        let x = seq.flatten();
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "sequence has {} values, the classifier expects {}",
                x.len(),
                self.dim()
            )));
        }
        let z: Vec<f64> = x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect();
        let mut best = (f64::INFINITY, 0);
        for (c, centroid) in self.centroids.iter().enumerate() {
            if let Some(centroid) = centroid {
                let d: f64 = z.iter().zip(centroid).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
        }
        Ok(best.1)
    }
}

/// Fraction of sequences whose nearest centroid is their conditioning action.
pub fn action_consistency(classifier: &NearestCentroid, samples: &[(KeypointSequence, ActionCode)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let mut hits = 0;
    for (seq, a) in samples {
        let label = a
            .index()
            .ok_or_else(|| Error::invalid("action consistency needs labeled samples"))?;
        if classifier.predict(seq)? == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

// ---------------------------------------------------------------------------
// Reconstruction

/// Averages over held-out `(reference, target)` translations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub l1: f64,
    pub perceptual: f64,
    /// Mean of `1 - m`.
    pub mask_coverage: f64,
    pub pairs: usize,
}

/// Running sums behind a [`ReconstructionReport`].
#[derive(Clone, Debug, Default)]
pub struct ReconstructionScores {
    l1: f64,
    perceptual: f64,
    coverage: f64,
    pairs: usize,
}

impl ReconstructionScores {
    pub fn add(&mut self, l1: f64, perceptual: f64, coverage: f64) {
        self.l1 += l1;
        self.perceptual += perceptual;
        self.coverage += coverage;
        self.pairs += 1;
    }

    pub fn report(&self) -> Result<ReconstructionReport> {
        if self.pairs == 0 {
            return Err(Error::invalid("no pairs were scored"));
        }
        let n = self.pairs as f64;
        Ok(ReconstructionReport {
            l1: self.l1 / n,
            perceptual: self.perceptual / n,
            mask_coverage: self.coverage / n,
            pairs: self.pairs,
        })
    }
}

/// Translates the first frame of every clip to the detected pose of each
/// later frame and scores the result against that frame.
pub fn reconstruction_report(bundle: &ModelBundle, clips: &[VideoClip], mode: MaskMode) -> Result<ReconstructionReport> {
    if clips.is_empty() {
        return Err(Error::invalid("reconstruction report on an empty dataset"));
    }
    let (nets, p) = bundle.require_stage1()?;
    let phi = nets.extractor::<f64>();
    let mut scores = ReconstructionScores::default();
    for clip in clips {
        let frames = clip.frames()?;
        let kps = extract_pseudo_labels(clip, &nets.detector, &p.detector)?;
        let targets: Vec<_> = kps.frames()[1..].iter().collect();
        let out = translate_batch(&frames[0], &kps.frames()[0], &targets, &nets.translator, &p.translator, mode)?;
        for (r, truth) in out.iter().zip(&frames[1..]) {
            scores.add(
                r.blended.mean_abs_diff(truth)?,
                perceptual_loss(&r.blended, truth, &phi, &nets.perceptual_layers)?,
                r.mask.coverage(),
            );
        }
    }
    scores.report()
}

/// Detected keypoints of every clip against its ground-truth centers.
pub fn tracking_report(bundle: &ModelBundle, clips: &[VideoClip]) -> Result<(f64, usize)> {
    let (nets, p) = bundle.require_stage1()?;
    let [h, w] = bundle.config.hyper.image_size;
    let mut items = Vec::new();
    for clip in clips {
        if let Some(c) = &clip.centers {
            items.push((extract_pseudo_labels(clip, &nets.detector, &p.detector)?, c.as_slice()));
        }
    }
    let frames = items.iter().map(|(s, _)| s.len()).sum();
    Ok((pooled_tracking_error(&items, h, w)?, frames))
}

// ---------------------------------------------------------------------------
// Toy video features

/// Frozen random video embedding: pooled random-pyramid features per frame,
/// summarized by their temporal mean and mean absolute temporal difference,
/// then randomly projected to `dim` values.
///
/// Values are only comparable between runs that use the same seed and dim.
#[derive(Clone, Debug)]
pub struct ToyVideoFeatures {
    pyramid: RandomConvPyramid<f32>,
    projection: DMatrix<f64>,
}

impl ToyVideoFeatures {
    pub const DEFAULT_DIM: usize = 8;
    pub const DEFAULT_SEED: u64 = 0x0f1d;

    pub fn new(seed: u64, dim: usize) -> Self {
        let width = 2 * RandomConvPyramid::<f32>::WIDTHS[RandomConvPyramid::<f32>::WIDTHS.len() - 1];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let projection = DMatrix::from_fn(dim, width, |_, _| rng.sample::<f64, _>(StandardNormal) / (width as f64).sqrt());
        Self {
            pyramid: RandomConvPyramid::new(seed),
            projection,
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.nrows()
    }

    /// Embeds a clip of at least two frames.
    pub fn embed(&self, frames: &[Frame]) -> Result<Vec<f64>> {
        if frames.len() < 2 {
            return Err(Error::invalid("video features need at least two frames"));
        }
        let refs: Vec<&Frame> = frames.iter().collect();
        let tape = Tape::new();
        let x = tape.constant(frames_to_batch::<f32>(&refs)?);
        let feats = self.pyramid.features(&x, self.pyramid.num_layers() - 1);
        let last = feats.last().expect("pyramid has layers").value();
        let (n, c) = (last.shape()[0], last.shape()[1]);
        let area: usize = last.shape()[2..].iter().product();
        let pooled: Vec<Vec<f64>> = last
            .data()
            .chunks(c * area)
            .map(|f| f.chunks(area).map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() / area as f64).collect())
            .collect();
        let mut summary = vec![0.0; 2 * c];
        for t in 0..n {
            for j in 0..c {
                summary[j] += pooled[t][j] / n as f64;
                if t + 1 < n {
                    summary[c + j] += (pooled[t + 1][j] - pooled[t][j]).abs() / (n - 1) as f64;
                }
            }
        }
        Ok((&self.projection * DVector::from_vec(summary)).iter().copied().collect())
    }
}

// ---------------------------------------------------------------------------
// Report

/// One line of the evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub samples: usize,
}

/// The `eval` output document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bundle_digest: String,
    pub dataset_digest: String,
    pub metrics: Vec<MetricRecord>,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn get(&self, metric: &str) -> Option<&MetricRecord> {
        self.metrics.iter().find(|m| m.metric == metric)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Knobs of [`evaluate_bundle`].
#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub seed: u64,
    /// Number of sampled motion sequences scored for action consistency.
    pub motion_samples: usize,
    pub feature_dim: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            motion_samples: 200,
            feature_dim: ToyVideoFeatures::DEFAULT_DIM,
        }
    }
}

/// Samples `count` motion sequences, cycling over clips and classes, and
/// scores them against centroids fit on the clips' pseudo-labels.
pub fn motion_consistency(
    bundle: &ModelBundle,
    clips: &[VideoClip],
    count: usize,
    seed: u64,
) -> Result<(f64, usize)> {
    let (s1, p1) = bundle.require_stage1()?;
    let (s2, p2) = bundle.require_stage2()?;
    let horizon = bundle.config.hyper.horizon;
    let classes = bundle.config.hyper.action_count;
    let mut fit = Vec::new();
    for clip in clips {
        if clip.len() < horizon + 1 {
            continue;
        }
        let label = clip
            .action
            .index()
            .ok_or_else(|| Error::invalid(format!("clip {} has no action label", clip.id)))?;
        let seq = extract_pseudo_labels(clip, &s1.detector, &p1.detector)?;
        fit.push((seq.window(0, horizon + 1)?, label));
    }
    let classifier = NearestCentroid::fit(&fit, classes)?;
    let mut samples = Vec::with_capacity(count);
    for s in 0..count {
        let (start, _) = &fit[(s / classes) % fit.len()];
        let a = ActionCode::one_hot(s % classes, classes)?;
        let k0 = &start.frames()[0];
        let future = sample_motion(k0, &a, horizon, &s2.motion, &p2.motion, seed.wrapping_add(s as u64))?;
        let mut frames = vec![k0.clone()];
        frames.extend(future.frames().iter().cloned());
        samples.push((KeypointSequence::new(frames)?, a));
    }
    Ok((action_consistency(&classifier, &samples)?, samples.len()))
}

/// Every metric the bundle's trained stages support on `clips`.
pub fn evaluate_bundle(
    bundle: &ModelBundle,
    bundle_digest: String,
    clips: &[VideoClip],
    dataset_digest: String,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::invalid("evaluation dataset is empty"));
    }
    let mut metrics = Vec::new();
    let mut notes = vec!["toy_fvd uses a frozen random video embedding; values are comparable only between runs of this tool".to_string()];
    let mut push = |metric: &str, value: f64, samples: usize| {
        metrics.push(MetricRecord {
            metric: metric.into(),
            value,
            samples,
        })
    };
    if bundle.stage1.is_some() {
        let r = reconstruction_report(bundle, clips, MaskMode::Learned)?;
        push("reconstruction_l1", r.l1, r.pairs);
        push("reconstruction_perceptual", r.perceptual, r.pairs);
        push("mask_coverage", r.mask_coverage, r.pairs);
        if clips.iter().any(|c| c.centers.is_some()) {
            let (err, frames) = tracking_report(bundle, clips)?;
            push("keypoint_tracking_error_px", err, frames);
        }
    } else {
        notes.push("stage 1 is untrained; no metrics".into());
    }
    if bundle.stage2.is_some() {
        let distinct: std::collections::BTreeSet<_> = clips.iter().filter_map(|c| c.action.index()).collect();
        if distinct.len() >= 2 {
            let (acc, n) = motion_consistency(bundle, clips, opts.motion_samples, opts.seed)?;
            push("action_consistency", acc, n);
        } else {
            notes.push("action_consistency skipped: fewer than two classes in the evaluation split".into());
        }
        let phi = ToyVideoFeatures::new(ToyVideoFeatures::DEFAULT_SEED, opts.feature_dim);
        if clips.len() > phi.dim() {
            let (mut real, mut fake) = (Vec::new(), Vec::new());
            for (i, clip) in clips.iter().enumerate() {
                let frames = clip.frames()?;
                real.push(phi.embed(&frames)?);
                let pred = predict_video(&frames[0], &clip.action, clip.len() - 1, bundle, opts.seed + i as u64, false)?;
                let mut video = vec![frames[0].clone()];
                video.extend(pred.frames);
                fake.push(phi.embed(&video)?);
            }
            let d = frechet_distance(
                &FeatureSet::new(&real, FeatureSource::Real)?,
                &FeatureSet::new(&fake, FeatureSource::Generated)?,
            )?;
            push("toy_fvd", d, clips.len());
        } else {
            notes.push(format!("toy_fvd skipped: needs more than {} clips", phi.dim()));
        }
    } else {
        notes.push("stage 2 is untrained; motion metrics skipped".into());
    }
    Ok(EvalReport {
        bundle_digest,
        dataset_digest,
        metrics,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keypoint::KeypointSet;
    use proptest::prelude::*;
    use rand::Rng;

    fn gaussian_rows(n: usize, d: usize, seed: u64, scale: f64, shift: f64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| shift + scale * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    }

    fn set(rows: &[Vec<f64>]) -> FeatureSet {
        FeatureSet::new(rows, FeatureSource::Real).unwrap()
    }

    /// Independent route through the symmetric matrix `√Σ_A Σ_B √Σ_A`.
    fn frechet_symmetric(a: &FeatureSet, b: &FeatureSet) -> f64 {
        let (sa, sb) = (a.covariance(), b.covariance());
        let e = sa.clone().symmetric_eigen();
        let root = &e.eigenvectors
            * DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()))
            * e.eigenvectors.transpose();
        let m = &root * &sb * &root;
        let inner = m.clone().symmetric_eigen().eigenvalues.map(|v| v.max(0.0).sqrt()).sum();
        (a.mean() - b.mean()).norm_squared() + sa.trace() + sb.trace() - 2.0 * inner
    }

    #[test]
    fn frechet_identical_sets_is_zero() {
        let a = set(&gaussian_rows(50, 4, 1, 1.0, 0.0));
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
    }

    #[test]
    fn frechet_mean_offset_only() {
        let rows = gaussian_rows(60, 3, 2, 1.0, 0.0);
        let d = [0.5, -1.0, 2.0];
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(d).map(|(v, s)| v + s).collect()).collect();
        let got = frechet_distance(&set(&rows), &set(&shifted)).unwrap();
        assert!((got - 5.25).abs() < 1e-6, "{got}");
    }

    #[test]
    fn frechet_one_dimensional_scale() {
        let a = set(&gaussian_rows(20_000, 1, 3, 1.0, 0.0));
        let b = set(&gaussian_rows(20_000, 1, 4, 2.0, 0.0));
        let got = frechet_distance(&a, &b).unwrap();
        assert!((got - 1.0).abs() < 0.1, "{got}");
    }

    #[test]
    fn frechet_agrees_with_symmetric_route() {
        for seed in 0..5 {
            let a = set(&gaussian_rows(40, 6, seed, 1.0, 0.0));
            let b = set(&gaussian_rows(45, 6, seed + 100, 1.5, 0.3));
            let x = frechet_distance(&a, &b).unwrap();
            let y = frechet_symmetric(&a, &b);
            assert!((x - y).abs() < 1e-8 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn frechet_input_errors() {
        assert!(FeatureSet::new(&gaussian_rows(3, 3, 0, 1.0, 0.0), FeatureSource::Real).is_err());
        let a = set(&gaussian_rows(10, 2, 0, 1.0, 0.0));
        let b = set(&gaussian_rows(10, 3, 0, 1.0, 0.0));
        assert!(matches!(frechet_distance(&a, &b), Err(Error::InvalidInput(_))));
    }

    fn orthogonal(d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        m.qr().q()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn frechet_is_symmetric_and_non_negative(seed in 0u64..1000, scale in 0.2f64..3.0, shift in -2.0f64..2.0) {
            let a = set(&gaussian_rows(30, 4, seed, 1.0, 0.0));
            let b = set(&gaussian_rows(35, 4, seed + 1, scale, shift));
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-6 * (1.0 + ab));
        }

        #[test]
        fn frechet_is_rotation_invariant(seed in 0u64..1000, shift in -2.0f64..2.0) {
            let a = gaussian_rows(30, 4, seed, 1.0, 0.0);
            let b = gaussian_rows(30, 4, seed + 7, 1.7, shift);
            let q = orthogonal(4, seed);
            let rotate = |rows: &[Vec<f64>]| {
                let m = DMatrix::from_fn(rows.len(), 4, |i, j| rows[i][j]) * q.transpose();
                FeatureSet::from_matrix(m, FeatureSource::Real).unwrap()
            };
            let plain = frechet_distance(&set(&a), &set(&b)).unwrap();
            let rotated = frechet_distance(&rotate(&a), &rotate(&b)).unwrap();
            prop_assert!((plain - rotated).abs() < 1e-5 * (1.0 + plain));
        }

        #[test]
        fn tracking_error_ignores_keypoint_order(
            pts in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 3),
            centers in prop::collection::vec((0.0f64..31.0, 0.0f64..31.0), 2),
            rot in 0usize..3,
        ) {
            let coords: Vec<[f64; 2]> = pts.iter().map(|&(x, y)| [x, y]).collect();
            let mut permuted = coords.clone();
            permuted.rotate_left(rot);
            permuted.swap(0, 1);
            let truth = vec![centers.iter().map(|&(x, y)| [x, y]).collect::<Vec<_>>()];
            let a = KeypointSequence::new(vec![KeypointSet::new(coords).unwrap()]).unwrap();
            let b = KeypointSequence::new(vec![KeypointSet::new(permuted).unwrap()]).unwrap();
            let ea = keypoint_tracking_error(&a, &truth, 32, 32).unwrap();
            let eb = keypoint_tracking_error(&b, &truth, 32, 32).unwrap();
            prop_assert!((ea - eb).abs() < 1e-12);
        }

        #[test]
        fn consistency_is_a_fraction(labels in prop::collection::vec(0usize..3, 4..20), seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut seq = || KeypointSequence::new(vec![KeypointSet::new(vec![[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]]).unwrap()]).unwrap();
            let mut fit: Vec<(KeypointSequence, usize)> = labels.iter().map(|&c| (seq(), c)).collect();
            fit.push((seq(), 0));
            fit.push((seq(), 1));
            let clf = NearestCentroid::fit(&fit, 3).unwrap();
            let samples: Vec<_> = labels.iter().map(|&c| (seq(), ActionCode::one_hot(c, 3).unwrap())).collect();
            let acc = action_consistency(&clf, &samples).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
        }
    }

    fn one_point(x: f64, y: f64) -> KeypointSequence {
        KeypointSequence::new(vec![KeypointSet::new(vec![[x, y]]).unwrap()]).unwrap()
    }

    #[test]
    fn tracking_error_examples() {
        // 33 x 33 image: normalized 0 is pixel 16.
        let truth = vec![vec![[16.0, 16.0]]; 3];
        let exact = KeypointSequence::new(vec![KeypointSet::new(vec![[0.0, 0.0], [0.5, 0.5]]).unwrap(); 3]).unwrap();
        assert_eq!(keypoint_tracking_error(&exact, &truth, 33, 33).unwrap(), 0.0);
        let off = KeypointSequence::new(vec![KeypointSet::new(vec![[3.0 / 16.0, 4.0 / 16.0]]).unwrap(); 3]).unwrap();
        assert!((keypoint_tracking_error(&off, &truth, 33, 33).unwrap() - 5.0).abs() < 1e-12);
        assert!(keypoint_tracking_error(&off, &[vec![], vec![], vec![]], 33, 33).is_err());
    }

    #[test]
    fn centroid_examples() {
        let fit = vec![(one_point(-0.5, 0.0), 0), (one_point(0.5, 0.0), 1)];
        let clf = NearestCentroid::fit(&fit, 2).unwrap();
        let a = |c| ActionCode::one_hot(c, 2).unwrap();
        let exact = vec![(one_point(-0.5, 0.0), a(0)), (one_point(0.5, 0.0), a(1))];
        assert_eq!(action_consistency(&clf, &exact).unwrap(), 1.0);
        assert!(NearestCentroid::fit(&fit[..1], 2).is_err());
        assert!(NearestCentroid::fit(&[(one_point(0.1, 0.0), 1), (one_point(0.2, 0.0), 1)], 2).is_err());
    }

    #[test]
    fn shuffled_labels_score_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fit: Vec<_> = (0..200).map(|i| (one_point(if i % 2 == 0 { -0.5 } else { 0.5 }, 0.0), i % 2)).collect();
        let clf = NearestCentroid::fit(&fit, 2).unwrap();
        let samples: Vec<_> = (0..1000)
            .map(|i| {
                let x = if i % 2 == 0 { -0.5 } else { 0.5 };
                (one_point(x, 0.0), ActionCode::one_hot(rng.random_range(0..2), 2).unwrap())
            })
            .collect();
        let acc = action_consistency(&clf, &samples).unwrap();
        assert!((acc - 0.5).abs() < 0.05, "{acc}");
    }

    #[test]
    fn reconstruction_score_hooks() {
        let f = Frame::from_fn(8, 8, |y, x, c| ((y + 2 * x + c) % 5) as f32 / 2.5 - 1.0).unwrap();
        let phi = RandomConvPyramid::<f64>::new(1);
        let mut s = ReconstructionScores::default();
        s.add(f.mean_abs_diff(&f).unwrap(), perceptual_loss(&f, &f, &phi, &[0, 1, 2]).unwrap(), 0.0);
        let r = s.report().unwrap();
        assert_eq!((r.l1, r.perceptual, r.mask_coverage, r.pairs), (0.0, 0.0, 0.0, 1));
        assert!(ReconstructionScores::default().report().is_err());
    }

    #[test]
    fn forced_full_mask_has_zero_coverage() {
        let bundle = crate::pipeline::tests::tiny_bundle();
        let frames: Vec<Frame> = (0..3)
            .map(|t| Frame::from_fn(16, 16, |y, x, c| ((y + x * t + c) % 4) as f32 / 2.0 - 1.0).unwrap())
            .collect();
        let clip = VideoClip::from_frames("c", ActionCode::one_hot(0, 2).unwrap(), frames).unwrap();
        let r = reconstruction_report(&bundle, &[clip], MaskMode::Fixed(1.0)).unwrap();
        assert_eq!(r.mask_coverage, 0.0);
        assert_eq!(r.pairs, 2);
        assert!(reconstruction_report(&bundle, &[], MaskMode::Learned).is_err());
    }

    #[test]
    fn toy_features_are_deterministic() {
        let phi = ToyVideoFeatures::new(3, 5);
        let frames: Vec<Frame> = (0..4)
            .map(|t| Frame::from_fn(16, 16, |y, x, c| ((y * t + x + c) % 6) as f32 / 3.0 - 1.0).unwrap())
            .collect();
        let a = phi.embed(&frames).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, phi.embed(&frames).unwrap());
        assert!(phi.embed(&frames[..1]).is_err());
    }
}
