//! World-frame tracking and reconstruction metrics: alignment (global median
//! scale or similarity), APD within distance thresholds and end-point error,
//! over all points and over the dynamic subset.
//!
//! Scoring iterates points in order and, within a point, frames in order. Per
//! pair the aligned prediction is `s·(R x) + t` evaluated row by row and the
//! error is `sqrt((dx² + dy²) + dz²)`; sums accumulate left to right.

use std::fmt;
use std::str::FromStr;

use nalgebra::Matrix3;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pointmap, Tracks3, Vec3};

/// Frames scored per sequence.
pub const EVAL_WINDOW: usize = 64;
pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.1, 0.3, 0.5, 1.0];
/// Ground-truth depth band kept for reconstruction scoring, meters.
pub const RECON_DEPTH_RANGE: (f64, f64) = (0.1, 5.0);
pub const MEDIAN_STATISTIC: &str =
    "median Euclidean norm about the world origin over all valid points and frames; lower-middle element for even counts";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("prediction and ground truth have different shapes")]
    ShapeMismatch,
    #[error("median prediction norm is zero")]
    ZeroMedian,
    #[error("points are collinear or coincident; similarity is undetermined")]
    DegenerateCovariance,
    #[error("dynamic subset requested but no valid dynamic point exists")]
    EmptyDynamicSubset,
    #[error("no pixel is valid in both prediction and ground truth")]
    NoOverlap,
    #[error("no valid (point, frame) pair to score")]
    NoValidPairs,
    #[error("thresholds must be positive, finite and strictly ascending")]
    InvalidThresholds,
    #[error("subsample target must be at least 1")]
    InvalidTarget,
    #[error("unknown alignment mode {0:?}")]
    UnknownMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentMode {
    Median,
    Sim3,
}

impl fmt::Display for AlignmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlignmentMode::Median => "median",
            AlignmentMode::Sim3 => "sim3",
        })
    }
}

impl FromStr for AlignmentMode {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "median" => Ok(AlignmentMode::Median),
            "sim3" => Ok(AlignmentMode::Sim3),
            other => Err(MetricError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds(Vec<f64>);

impl Thresholds {
    pub fn new(deltas: Vec<f64>) -> Result<Self, MetricError> {
        let ok = !deltas.is_empty()
            && deltas.iter().all(|d| *d > 0.0 && d.is_finite())
            && deltas.windows(2).all(|w| w[0] < w[1]);
        ok.then_some(Self(deltas)).ok_or(MetricError::InvalidThresholds)
    }

    pub fn deltas(&self) -> &[f64] {
        &self.0
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Self(DEFAULT_THRESHOLDS.to_vec())
    }
}

/// `x ↦ s·R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Similarity {
    pub fn identity() -> Self {
        Self::from_scale(1.0)
    }

    pub fn from_scale(scale: f64) -> Self {
        Self {
            scale,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn from_parts(scale: f64, rotation: &Matrix3<f64>, translation: &Vec3) -> Self {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = rotation[(i, j)];
            }
        }
        Self {
            scale,
            rotation: r,
            translation: [translation.x, translation.y, translation.z],
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let r = &self.rotation;
        Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2])
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        let r = &self.rotation;
        let s = self.scale;
        let t = &self.translation;
        Vec3::new(
            s * (r[0][0] * x.x + r[0][1] * x.y + r[0][2] * x.z) + t[0],
            s * (r[1][0] * x.x + r[1][1] * x.y + r[1][2] * x.z) + t[1],
            s * (r[2][0] * x.x + r[2][1] * x.y + r[2][2] * x.z) + t[2],
        )
    }
}

fn norm(x: &Vec3) -> f64 {
    ((x.x * x.x + x.y * x.y) + x.z * x.z).sqrt()
}

fn distance(a: &Vec3, b: &Vec3) -> f64 {
    let (dx, dy, dz) = (a.x - b.x, a.y - b.y, a.z - b.z);
    ((dx * dx + dy * dy) + dz * dz).sqrt()
}

/// Lower-middle median.
fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

/// Global median-scale factor `median‖gt‖ / median‖pred‖`.
pub fn median_scale(pred: &[Vec3], gt: &[Vec3]) -> Result<f64, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::ShapeMismatch);
    }
    if pred.is_empty() {
        return Err(MetricError::NoValidPairs);
    }
    let mp = median(pred.iter().map(norm).collect());
    if mp < 1e-12 {
        return Err(MetricError::ZeroMedian);
    }
    Ok(median(gt.iter().map(norm).collect()) / mp)
}

pub fn median_scale_align(pred: &[Vec3], gt: &[Vec3]) -> Result<(Vec<Vec3>, f64), MetricError> {
    let s = median_scale(pred, gt)?;
    Ok((pred.iter().map(|p| p * s).collect(), s))
}

/// Least-squares similarity taking `pred` onto `gt` (Umeyama).
pub fn umeyama(pred: &[Vec3], gt: &[Vec3]) -> Result<Similarity, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::ShapeMismatch);
    }
    let n = pred.len();
    if n < 3 {
        return Err(MetricError::DegenerateCovariance);
    }
    let inv_n = 1.0 / n as f64;
    let mu_p = pred.iter().sum::<Vec3>() * inv_n;
    let mu_g = gt.iter().sum::<Vec3>() * inv_n;
    let mut var_p = 0.0;
    let mut cov = Matrix3::zeros();
    for (p, g) in pred.iter().zip(gt) {
        let (dp, dg) = (p - mu_p, g - mu_g);
        var_p += dp.norm_squared();
        cov += dg * dp.transpose();
    }
    var_p *= inv_n;
    cov *= inv_n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(var_p > 0.0) || !(sv[1] > 1e-12 * sv[0]) {
        return Err(MetricError::DegenerateCovariance);
    }
    let mut d = Matrix3::identity();
    if u.determinant() * vt.determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    // The sign flip belongs on the smallest singular value.
    let (k_min, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("three singular values");
    let mut s_diag = Matrix3::identity();
    s_diag[(k_min, k_min)] = d[(2, 2)];
    let r = u * s_diag * vt;
    let trace_ds: f64 = (0..3).map(|i| svd.singular_values[i] * s_diag[(i, i)]).sum();
    let scale = trace_ds / var_p;
    let t = mu_g - r * mu_p * scale;
    Ok(Similarity::from_parts(scale, &r, &t))
}

pub fn umeyama_sim3_align(pred: &[Vec3], gt: &[Vec3]) -> Result<(Vec<Vec3>, Similarity), MetricError> {
    let sim = umeyama(pred, gt)?;
    Ok((pred.iter().map(|p| sim.apply(p)).collect(), sim))
}

/// Fits the alignment of the given mode.
pub fn fit_alignment(mode: AlignmentMode, pred: &[Vec3], gt: &[Vec3]) -> Result<Similarity, MetricError> {
    match mode {
        AlignmentMode::Median => median_scale(pred, gt).map(Similarity::from_scale),
        AlignmentMode::Sim3 => umeyama(pred, gt),
    }
}

/// Scores of one subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub apd_percent: f64,
    pub epe_meters: f64,
    pub per_threshold: Vec<f64>,
    pub num_pairs: usize,
}

/// APD and EPE over already-aligned `(pred, gt)` pairs.
pub fn score_pairs(pairs: &[(Vec3, Vec3)], thr: &Thresholds) -> Result<SubsetMetrics, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::NoValidPairs);
    }
    let deltas = thr.deltas();
    let mut counts = vec![0usize; deltas.len()];
    let mut sum = 0.0;
    for (p, g) in pairs {
        let e = distance(p, g);
        sum += e;
        for (c, d) in counts.iter_mut().zip(deltas) {
            if e < *d {
                *c += 1;
            }
        }
    }
    let n = pairs.len() as f64;
    let per_threshold: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let apd_percent = 100.0 * (per_threshold.iter().sum::<f64>() / deltas.len() as f64);
    Ok(SubsetMetrics {
        apd_percent,
        epe_meters: sum / n,
        per_threshold,
        num_pairs: pairs.len(),
    })
}

fn check_tracks(pred: &Tracks3, gt: &Tracks3) -> Result<(), MetricError> {
    if pred.num_points() != gt.num_points() || pred.num_frames() != gt.num_frames() {
        return Err(MetricError::ShapeMismatch);
    }
    Ok(())
}

/// `(pred, gt, point)` for every pair visible in both, first `window` frames.
fn valid_track_pairs(pred: &Tracks3, gt: &Tracks3, window: usize) -> Vec<(Vec3, Vec3, usize)> {
    let frames = gt.num_frames().min(window);
    let mut out = Vec::new();
    for n in 0..gt.num_points() {
        for t in 0..frames {
            if gt.is_visible(n, t) && pred.is_visible(n, t) {
                out.push((pred.position(n, t), gt.position(n, t), n));
            }
        }
    }
    out
}

/// APD over aligned tracks in the evaluation window.
pub fn apd_3d(pred: &Tracks3, gt: &Tracks3, thr: &Thresholds) -> Result<SubsetMetrics, MetricError> {
    check_tracks(pred, gt)?;
    let pairs: Vec<(Vec3, Vec3)> = valid_track_pairs(pred, gt, EVAL_WINDOW).into_iter().map(|(p, g, _)| (p, g)).collect();
    score_pairs(&pairs, thr)
}

/// Mean end-point error over aligned tracks in the evaluation window.
pub fn epe(pred: &Tracks3, gt: &Tracks3) -> Result<f64, MetricError> {
    Ok(apd_3d(pred, gt, &Thresholds::default())?.epe_meters)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DynamicSubset {
    Skip,
    IfPresent,
    Require,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mode: AlignmentMode,
    pub thresholds: Thresholds,
    pub window: usize,
    pub dynamic: DynamicSubset,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: AlignmentMode::Median,
            thresholds: Thresholds::default(),
            window: EVAL_WINDOW,
            dynamic: DynamicSubset::IfPresent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub mode: AlignmentMode,
    pub fitted: Similarity,
    pub statistic: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub alignment: AlignmentReport,
    pub thresholds: Vec<f64>,
    pub all: SubsetMetrics,
    pub dynamic: Option<SubsetMetrics>,
    pub num_points: usize,
    pub num_frames: usize,
}

fn alignment_report(mode: AlignmentMode, fitted: Similarity) -> AlignmentReport {
    let statistic = match mode {
        AlignmentMode::Median => MEDIAN_STATISTIC.to_string(),
        AlignmentMode::Sim3 => "least-squares similarity (Umeyama) over all valid points and frames".to_string(),
    };
    AlignmentReport { mode, fitted, statistic }
}

/// Tracking metrics. The alignment is fitted on every valid pair and the same
/// transform scores both the full set and the dynamic subset.
pub fn eval_tracking(
    pred: &Tracks3,
    gt: &Tracks3,
    dynamic_mask: &[bool],
    opts: &EvalOptions,
) -> Result<MetricReport, MetricError> {
    check_tracks(pred, gt)?;
    if dynamic_mask.len() != gt.num_points() {
        return Err(MetricError::ShapeMismatch);
    }
    let pairs = valid_track_pairs(pred, gt, opts.window);
    if pairs.is_empty() {
        return Err(MetricError::NoValidPairs);
    }
    let p: Vec<Vec3> = pairs.iter().map(|x| x.0).collect();
    let g: Vec<Vec3> = pairs.iter().map(|x| x.1).collect();
    let fitted = fit_alignment(opts.mode, &p, &g)?;
    let aligned: Vec<(Vec3, Vec3, usize)> = pairs.iter().map(|(p, g, n)| (fitted.apply(p), *g, *n)).collect();
    let all: Vec<(Vec3, Vec3)> = aligned.iter().map(|(p, g, _)| (*p, *g)).collect();
    let dyn_pairs: Vec<(Vec3, Vec3)> = aligned
        .iter()
        .filter(|(_, _, n)| dynamic_mask[*n])
        .map(|(p, g, _)| (*p, *g))
        .collect();
    let dynamic = match opts.dynamic {
        DynamicSubset::Skip => None,
        DynamicSubset::IfPresent if dyn_pairs.is_empty() => None,
        DynamicSubset::Require if dyn_pairs.is_empty() => return Err(MetricError::EmptyDynamicSubset),
        _ => Some(score_pairs(&dyn_pairs, &opts.thresholds)?),
    };
    Ok(MetricReport {
        task: "track".to_string(),
        alignment: alignment_report(opts.mode, fitted),
        thresholds: opts.thresholds.deltas().to_vec(),
        all: score_pairs(&all, &opts.thresholds)?,
        dynamic,
        num_points: gt.num_points(),
        num_frames: gt.num_frames().min(opts.window),
    })
}

/// Reconstruction metrics over per-pixel point pairs pooled across frames,
/// keeping pixels whose ground-truth depth lies in [`RECON_DEPTH_RANGE`].
pub fn eval_recon(
    pred: &[Pointmap],
    gt: &[Pointmap],
    gt_depth: &[Vec<f64>],
    opts: &EvalOptions,
) -> Result<MetricReport, MetricError> {
    if pred.len() != gt.len() || gt_depth.len() != gt.len() {
        return Err(MetricError::ShapeMismatch);
    }
    let frames = gt.len().min(opts.window);
    let (lo, hi) = RECON_DEPTH_RANGE;
    let mut pairs = Vec::new();
    for j in 0..frames {
        let (p, g, d) = (&pred[j], &gt[j], &gt_depth[j]);
        if !p.same_shape(g) || d.len() != g.len() {
            return Err(MetricError::ShapeMismatch);
        }
        for (i, z) in d.iter().enumerate() {
            if p.is_valid(i) && g.is_valid(i) && *z >= lo && *z <= hi {
                pairs.push((p.points()[i], g.points()[i]));
            }
        }
    }
    if pairs.is_empty() {
        return Err(MetricError::NoOverlap);
    }
    let p: Vec<Vec3> = pairs.iter().map(|x| x.0).collect();
    let g: Vec<Vec3> = pairs.iter().map(|x| x.1).collect();
    let fitted = fit_alignment(opts.mode, &p, &g)?;
    let aligned: Vec<(Vec3, Vec3)> = pairs.iter().map(|(p, g)| (fitted.apply(p), *g)).collect();
    Ok(MetricReport {
        task: "recon".to_string(),
        alignment: alignment_report(opts.mode, fitted),
        thresholds: opts.thresholds.deltas().to_vec(),
        all: score_pairs(&aligned, &opts.thresholds)?,
        dynamic: None,
        num_points: pairs.len(),
        num_frames: frames,
    })
}

/// Seeded uniform subsample of query points without replacement, kept in
/// ascending index order. Returns the selection and the chosen indices.
pub fn subsample_queries(tracks: &Tracks3, target: usize, seed: u64) -> Result<(Tracks3, Vec<usize>), MetricError> {
    let idx = subsample_indices(tracks.num_points(), target, seed)?;
    Ok((tracks.select_points(&idx), idx))
}

pub fn subsample_indices(n: usize, target: usize, seed: u64) -> Result<Vec<usize>, MetricError> {
    if target == 0 {
        return Err(MetricError::InvalidTarget);
    }
    if target >= n {
        return Ok((0..n).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, n, target).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

impl MetricReport {
    pub fn csv_header(thresholds: &[f64]) -> String {
        let mut cols: Vec<String> = ["dataset", "sequence", "task", "mode", "subset", "apd_percent", "epe_meters"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        cols.extend(thresholds.iter().map(|d| format!("apd@{d}")));
        cols.push("num_pairs".into());
        cols.push("scale".into());
        for i in 0..3 {
            for j in 0..3 {
                cols.push(format!("r{i}{j}"));
            }
        }
        cols.extend(["t0", "t1", "t2", "num_points", "num_frames", "fingerprint"].map(String::from));
        cols.join(",")
    }

    /// One CSV row per reported subset.
    pub fn csv_rows(&self, dataset: &str, sequence: &str, fingerprint: &str) -> Vec<String> {
        let subsets = std::iter::once(("all", &self.all)).chain(self.dynamic.as_ref().map(|d| ("dynamic", d)));
        subsets
            .map(|(name, m)| {
                let mut cols = vec![
                    dataset.to_string(),
                    sequence.to_string(),
                    self.task.clone(),
                    self.alignment.mode.to_string(),
                    name.to_string(),
                    m.apd_percent.to_string(),
                    m.epe_meters.to_string(),
                ];
                cols.extend(m.per_threshold.iter().map(f64::to_string));
                cols.push(m.num_pairs.to_string());
                let a = &self.alignment.fitted;
                cols.push(a.scale.to_string());
                cols.extend(a.rotation.iter().flatten().map(f64::to_string));
                cols.extend(a.translation.iter().map(f64::to_string));
                cols.push(self.num_points.to_string());
                cols.push(self.num_frames.to_string());
                cols.push(fingerprint.to_string());
                cols.join(",")
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::so3_exp;
    use proptest::prelude::*;
    use rand::Rng;

    fn tracks_from(points: &[Vec<Vec3>]) -> Tracks3 {
        let mut t = Tracks3::new(points.len(), points[0].len());
        for (n, row) in points.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                t.set(n, j, *p, true);
            }
        }
        t
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.5..6.0)))
            .collect()
    }

    fn random_similarity(rng: &mut ChaCha8Rng) -> Similarity {
        let r = so3_exp(&Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)));
        let t = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        Similarity::from_parts(rng.random_range(0.2..5.0), &r, &t)
    }

    #[test]
    fn median_examples() {
        let gt = vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 2.0, 0.0), Vec3::new(0.0, 0.0, 3.0)];
        let doubled: Vec<Vec3> = gt.iter().map(|p| p * 2.0).collect();
        let (aligned, s) = median_scale_align(&doubled, &gt).unwrap();
        assert_eq!(s, 0.5);
        assert_eq!(aligned, gt);
        assert_eq!(median_scale(&gt, &gt).unwrap(), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cloud = random_cloud(&mut rng, 101);
        let pred: Vec<Vec3> = cloud.iter().map(|p| p * 1.3).collect();
        let base = median_scale(&pred, &cloud).unwrap();
        let mut with_outlier = pred.clone();
        with_outlier[17] = Vec3::new(1e3, 0.0, 0.0);
        // One far outlier moves the median by at most one rank.
        let mut norms: Vec<f64> = pred.iter().map(|p| p.norm()).collect();
        norms.sort_by(f64::total_cmp);
        let shifted = median_scale(&with_outlier, &cloud).unwrap();
        assert!((shifted - base).abs() <= (base - median(cloud.iter().map(norm).collect()) / norms[51]).abs() + 1e-9);

        let mut g2 = cloud.clone();
        g2[17] = Vec3::new(1e3, 0.0, 0.0);
        let p2: Vec<Vec3> = g2.iter().map(|p| p * 1.3).collect();
        let mut p3 = p2.clone();
        p3[17] = Vec3::new(2e3, 0.0, 0.0);
        assert!((median_scale(&p2, &g2).unwrap() - median_scale(&p3, &g2).unwrap()).abs() < 1e-9);

        assert_eq!(median(vec![4.0, 1.0, 3.0, 2.0]), 2.0);
        assert_eq!(median_scale(&[Vec3::zeros()], &[Vec3::x()]), Err(MetricError::ZeroMedian));
    }

    #[test]
    fn umeyama_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = random_cloud(&mut rng, 30);
        let sim = umeyama(&cloud, &cloud).unwrap();
        assert!((sim.scale - 1.0).abs() < 1e-12);
        assert!((sim.rotation_matrix() - Matrix3::identity()).abs().max() < 1e-12);
        assert!(sim.translation.iter().all(|t| t.abs() < 1e-12));

        // A reflected copy still yields a proper rotation.
        let mirrored: Vec<Vec3> = cloud.iter().map(|p| Vec3::new(-p.x, p.y, p.z)).collect();
        let sim = umeyama(&cloud, &mirrored).unwrap();
        assert!((sim.rotation_matrix().determinant() - 1.0).abs() < 1e-12);

        let line: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.5)).collect();
        assert_eq!(umeyama(&line, &line), Err(MetricError::DegenerateCovariance));
        assert_eq!(umeyama(&cloud[..2], &cloud[..2]), Err(MetricError::DegenerateCovariance));
    }

    #[test]
    fn umeyama_recovers_random_similarities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let gt = random_cloud(&mut rng, 20);
            let truth = random_similarity(&mut rng);
            let inv_pred: Vec<Vec3> = gt.iter().map(|p| truth.apply(p)).collect();
            let (aligned, _) = umeyama_sim3_align(&inv_pred, &gt).unwrap();
            let residual = aligned.iter().zip(&gt).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(residual < 1e-9, "{residual}");
        }
    }

    #[test]
    fn umeyama_beats_random_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_cloud(&mut rng, 40);
        let pred: Vec<Vec3> = random_cloud(&mut rng, 40);
        let sse = |s: &Similarity| pred.iter().zip(&gt).map(|(p, g)| (s.apply(p) - g).norm_squared()).sum::<f64>();
        let best = sse(&umeyama(&pred, &gt).unwrap());
        for _ in 0..100 {
            assert!(best <= sse(&random_similarity(&mut rng)));
        }
    }

    #[test]
    fn apd_and_epe_examples() {
        let gt = tracks_from(&[vec![Vec3::new(1.0, 2.0, 3.0); 3]]);
        let thr = Thresholds::default();
        let m = apd_3d(&gt, &gt, &thr).unwrap();
        assert_eq!((m.apd_percent, m.epe_meters), (100.0, 0.0));

        let off = tracks_from(&[vec![Vec3::new(1.2, 2.0, 3.0); 3]]);
        let m = apd_3d(&off, &gt, &thr).unwrap();
        assert_eq!(m.per_threshold, vec![0.0, 1.0, 1.0, 1.0]);
        assert_eq!(m.apd_percent, 75.0);

        let far = tracks_from(&[vec![Vec3::new(5.0, 2.0, 3.0); 3]]);
        assert_eq!(apd_3d(&far, &gt, &thr).unwrap().apd_percent, 0.0);

        let shifted = tracks_from(&[vec![Vec3::new(1.3, 2.0, 3.0); 3]]);
        assert!((epe(&shifted, &gt).unwrap() - 0.3).abs() < 1e-15);

        let gt2 = tracks_from(&[vec![Vec3::zeros()], vec![Vec3::x()]]);
        let pred2 = tracks_from(&[vec![Vec3::new(0.1, 0.0, 0.0)], vec![Vec3::new(1.0, 0.3, 0.0)]]);
        assert!((epe(&pred2, &gt2).unwrap() - 0.2).abs() < 1e-15);

        let short = Tracks3::new(1, 2);
        assert_eq!(apd_3d(&short, &gt, &thr), Err(MetricError::ShapeMismatch));
    }

    #[test]
    fn window_limits_frames() {
        let mut gt = Tracks3::new(1, 70);
        let mut pred = Tracks3::new(1, 70);
        for t in 0..70 {
            gt.set(0, t, Vec3::new(1.0, 1.0, 1.0), true);
            let off = if t < 64 { 0.0 } else { 10.0 };
            pred.set(0, t, Vec3::new(1.0 + off, 1.0, 1.0), true);
        }
        assert_eq!(apd_3d(&pred, &gt, &Thresholds::default()).unwrap().apd_percent, 100.0);
    }

    #[test]
    fn threshold_validation() {
        assert!(Thresholds::new(vec![0.1, 0.3]).is_ok());
        assert!(Thresholds::new(vec![0.3, 0.1]).is_err());
        assert!(Thresholds::new(vec![0.0, 0.1]).is_err());
        assert!(Thresholds::new(vec![]).is_err());
        assert!(Thresholds::new(vec![0.1, 0.1]).is_err());
    }

    #[test]
    fn dynamic_subset_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec<Vec3>> = (0..5).map(|_| random_cloud(&mut rng, 4)).collect();
        let gt = tracks_from(&pts);
        let opts = EvalOptions { dynamic: DynamicSubset::Require, ..Default::default() };
        assert_eq!(eval_tracking(&gt, &gt, &[false; 5], &opts), Err(MetricError::EmptyDynamicSubset));
        let rep = eval_tracking(&gt, &gt, &[false; 5], &EvalOptions::default()).unwrap();
        assert!(rep.dynamic.is_none());
        let rep = eval_tracking(&gt, &gt, &[true, false, false, false, true], &opts).unwrap();
        let d = rep.dynamic.unwrap();
        assert_eq!((d.apd_percent, d.epe_meters, d.num_pairs), (100.0, 0.0, 8));
        assert_eq!((rep.all.apd_percent, rep.all.epe_meters), (100.0, 0.0));
    }

    #[test]
    fn recon_examples() {
        use crate::geometry::FrameTag;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_cloud(&mut rng, 12);
        let depth: Vec<f64> = pts.iter().map(|p| p.z).collect();
        let gt = Pointmap::new(4, 3, pts.clone(), vec![true; 12], FrameTag::reconstruction(0, 0)).unwrap();
        let rep = eval_recon(std::slice::from_ref(&gt), std::slice::from_ref(&gt), std::slice::from_ref(&depth), &EvalOptions::default()).unwrap();
        assert_eq!((rep.all.apd_percent, rep.all.epe_meters), (100.0, 0.0));
        let kept = depth.iter().filter(|d| (0.1..=5.0).contains(*d)).count();
        assert_eq!(rep.num_points, kept);

        let scaled = Pointmap::new(4, 3, pts.iter().map(|p| p * 1.5).collect(), vec![true; 12], FrameTag::reconstruction(0, 0)).unwrap();
        let rep = eval_recon(&[scaled], std::slice::from_ref(&gt), std::slice::from_ref(&depth), &EvalOptions::default()).unwrap();
        assert!(rep.all.epe_meters < 1e-12);

        let empty = Pointmap::empty(4, 3, FrameTag::reconstruction(0, 0));
        assert_eq!(eval_recon(&[empty], &[gt], &[depth], &EvalOptions::default()), Err(MetricError::NoOverlap));
    }

    #[test]
    fn subsampling() {
        let t = Tracks3::new(5000, 2);
        let (s, idx) = subsample_queries(&t, 1000, 1).unwrap();
        assert_eq!(s.num_points(), 1000);
        assert_eq!(idx, subsample_queries(&t, 1000, 1).unwrap().1);
        assert_ne!(idx, subsample_queries(&t, 1000, 2).unwrap().1);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        let small = Tracks3::new(7, 2);
        assert_eq!(subsample_queries(&small, 7, 3).unwrap().0, small);
        assert_eq!(subsample_queries(&small, 70, 3).unwrap().0, small);
        assert_eq!(subsample_queries(&small, 0, 3), Err(MetricError::InvalidTarget));
    }

    #[test]
    fn csv_rows_follow_header() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = tracks_from(&(0..4).map(|_| random_cloud(&mut rng, 3)).collect::<Vec<_>>());
        let rep = eval_tracking(&gt, &gt, &[true, false, true, false], &EvalOptions::default()).unwrap();
        let header = MetricReport::csv_header(&rep.thresholds);
        let rows = rep.csv_rows("synthetic", "seq", "abc");
        assert_eq!(rows.len(), 2);
        for r in rows {
            assert_eq!(r.split(',').count(), header.split(',').count());
        }
    }

    proptest! {
        #[test]
        fn apd_is_monotone_and_report_arithmetic_exact(
            errs in prop::collection::vec(0.0..2.0f64, 1..50),
        ) {
            let pairs: Vec<(Vec3, Vec3)> = errs.iter().map(|e| (Vec3::new(*e, 0.0, 0.0), Vec3::zeros())).collect();
            let m = score_pairs(&pairs, &Thresholds::default()).unwrap();
            prop_assert!(m.per_threshold.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(m.apd_percent, 100.0 * (m.per_threshold.iter().sum::<f64>() / 4.0));
            prop_assert!((0.0..=100.0).contains(&m.apd_percent));
        }

        #[test]
        fn median_mode_is_scale_invariant(seed in 0u64..1000, k in 0.1..10.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = tracks_from(&(0..6).map(|_| random_cloud(&mut rng, 5)).collect::<Vec<_>>());
            let pred = tracks_from(&(0..6).map(|_| random_cloud(&mut rng, 5)).collect::<Vec<_>>());
            let mut scaled = pred.clone();
            for n in 0..6 { for t in 0..5 { scaled.set(n, t, pred.position(n, t) * k, true); } }
            let a = eval_tracking(&pred, &gt, &[false; 6], &EvalOptions::default()).unwrap();
            let b = eval_tracking(&scaled, &gt, &[false; 6], &EvalOptions::default()).unwrap();
            prop_assert!((a.all.apd_percent - b.all.apd_percent).abs() <= 1e-9);
            prop_assert!((a.all.epe_meters - b.all.epe_meters).abs() <= 1e-9);
        }

        #[test]
        fn sim3_mode_is_similarity_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = tracks_from(&(0..6).map(|_| random_cloud(&mut rng, 5)).collect::<Vec<_>>());
            let pred = tracks_from(&(0..6).map(|_| random_cloud(&mut rng, 5)).collect::<Vec<_>>());
            let sim = random_similarity(&mut rng);
            let mut moved = pred.clone();
            for n in 0..6 { for t in 0..5 { moved.set(n, t, sim.apply(&pred.position(n, t)), true); } }
            let opts = EvalOptions { mode: AlignmentMode::Sim3, ..Default::default() };
            let a = eval_tracking(&pred, &gt, &[false; 6], &opts).unwrap();
            let b = eval_tracking(&moved, &gt, &[false; 6], &opts).unwrap();
            prop_assert!((a.all.apd_percent - b.all.apd_percent).abs() <= 1e-9);
            prop_assert!((a.all.epe_meters - b.all.epe_meters).abs() <= 1e-9);
        }
    }
}
