//! Self-supervision losses for adapting tracking pointmaps against 2D tracks
//! and monocular depth, with analytic gradients.
//!
//! Every loss returns its value together with gradients with respect to the
//! 3D points it reads. Pose gradients are left perturbations `(ω, v)` of the
//! world-to-camera pose, ready to be pushed through the camera solver.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraError;
use crate::geometry::{GeometryError, Intrinsics, Pixel, PixelGrid, Pointmap, PoseSE3, Tracks2, Vec2, Vec3, MIN_DEPTH};
use crate::lie::Twist;

/// Radius below which a reprojected track is too close to the center to
/// define a scale ratio.
pub const MIN_RADIUS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("no visible track survives in this frame")]
    AllOccluded,
    #[error("no pixel is valid in both the pointmap and the depth supervision")]
    NoOverlap,
    #[error("every overlapping pixel projects to non-positive depth")]
    NonPositiveProjectedDepth,
    #[error("mask selects no valid pixel")]
    EmptyMask,
    #[error("point cloud has zero mean norm")]
    DegenerateScale,
    #[error("inputs have inconsistent shapes")]
    ShapeMismatch,
    #[error("loss weights must be finite and nonnegative")]
    InvalidWeights,
    #[error("track {0} is not visible in the anchor frame")]
    InvisibleAtAnchor(usize),
    #[error("depth {depth} at frame {frame}, pixel {index} is not positive and finite")]
    InvalidDepth { frame: usize, index: usize, depth: f64 },
    #[error("total loss {loss:e} at step {step} exceeds ten times the initial {initial:e}")]
    DivergenceDetected { step: usize, loss: f64, initial: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<LossError>,
    },
}

impl LossError {
    fn in_frame(self, frame: usize) -> Self {
        LossError::Frame {
            frame,
            source: Box::new(self),
        }
    }
}

/// Pseudo ground-truth 2D tracks of the anchor query pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSupervision {
    pub tracks2d: Tracks2,
    pub queries: Vec<Pixel>,
    grid: PixelGrid,
    query_indices: Vec<usize>,
    correspondence: Vec<Option<usize>>,
}

impl TrackSupervision {
    pub fn new(tracks2d: Tracks2, queries: Vec<Pixel>, grid: PixelGrid) -> Result<Self, LossError> {
        if tracks2d.num_points() != queries.len() {
            return Err(LossError::ShapeMismatch);
        }
        let query_indices = queries.iter().map(|&q| grid.index_of(q)).collect::<Result<Vec<_>, _>>()?;
        let t = tracks2d.num_frames();
        let mut correspondence = vec![None; queries.len() * t];
        for n in 0..queries.len() {
            if t > 0 && !tracks2d.is_visible(n, 0) {
                return Err(LossError::InvisibleAtAnchor(n));
            }
            for j in 0..t {
                if tracks2d.is_visible(n, j) {
                    correspondence[n * t + j] = grid
                        .pixel_at(tracks2d.position(n, j))
                        .map(|p| p.row * grid.width + p.col);
                }
            }
        }
        Ok(Self {
            tracks2d,
            queries,
            grid,
            query_indices,
            correspondence,
        })
    }

    pub fn num_points(&self) -> usize {
        self.queries.len()
    }

    pub fn num_frames(&self) -> usize {
        self.tracks2d.num_frames()
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    /// Pixel index of each query in the anchor frame.
    pub fn query_indices(&self) -> &[usize] {
        &self.query_indices
    }

    pub fn is_visible(&self, n: usize, j: usize) -> bool {
        self.tracks2d.is_visible(n, j)
    }

    /// Pixel index `n′` of frame `j` that query `n` lands on, if visible
    /// and inside the image.
    pub fn correspondence(&self, n: usize, j: usize) -> Option<usize> {
        self.correspondence[n * self.num_frames() + j]
    }
}

/// Per-frame monocular depth maps of arbitrary scale.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthSupervision {
    grid: PixelGrid,
    pub depth: Vec<Vec<f64>>,
    pub valid: Vec<Vec<bool>>,
}

impl DepthSupervision {
    pub fn new(grid: PixelGrid, depth: Vec<Vec<f64>>, valid: Vec<Vec<bool>>) -> Result<Self, LossError> {
        if depth.len() != valid.len() {
            return Err(LossError::ShapeMismatch);
        }
        for (frame, (d, v)) in depth.iter().zip(&valid).enumerate() {
            if d.len() != grid.len() || v.len() != grid.len() {
                return Err(LossError::ShapeMismatch);
            }
            for (index, (&z, &ok)) in d.iter().zip(v).enumerate() {
                if ok && !(z > 0.0 && z.is_finite()) {
                    return Err(LossError::InvalidDepth { frame, index, depth: z });
                }
            }
        }
        Ok(Self { grid, depth, valid })
    }

    pub fn num_frames(&self) -> usize {
        self.depth.len()
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub traj: f64,
    pub depth: f64,
    pub align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            traj: 1.0,
            depth: 10.0,
            align: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if [self.traj, self.depth, self.align].iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(LossError::InvalidWeights)
        }
    }

    pub fn combine(&self, traj: f64, depth: f64, align: f64) -> f64 {
        self.traj * traj + self.depth * depth + self.align * align
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameLoss {
    pub traj: f64,
    pub depth: f64,
    pub align: f64,
    pub total: f64,
}

/// Loss terms averaged over frames, and per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub traj: f64,
    pub depth: f64,
    pub align: f64,
    pub total: f64,
    pub per_frame: Vec<FrameLoss>,
}

/// Projects each query's tracking point into the frame's camera. Points at
/// or behind the camera plane come back as `None`.
pub fn reproject_tracks(
    tracking_pm: &Pointmap,
    pose: &PoseSE3,
    k: &Intrinsics,
    queries: &[Pixel],
) -> Result<Vec<Option<Vec2>>, LossError> {
    let grid = tracking_pm.grid();
    queries
        .iter()
        .map(|&q| {
            let i = grid.index_of(q)?;
            Ok(tracking_pm
                .get(i)
                .and_then(|x| k.project(&pose.transform(&x)).ok()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajLoss {
    pub value: f64,
    pub scale: f64,
    /// Gradient with respect to each prediction; zero for unused entries.
    pub grad: Vec<Vec2>,
    pub used: usize,
    /// Visible pairs dropped because the prediction sat on the center.
    pub dropped: usize,
}

/// Scale-invariant reprojection loss about `center`.
///
/// `s = mean ‖g − c‖ / ‖p − c‖` over used pairs, and the loss is
/// `mean ‖s (p − c) − (g − c)‖²`.
pub fn traj_loss(pred: &[Vec2], gt: &[Vec2], center: Vec2, visible: &[bool]) -> Result<TrajLoss, LossError> {
    if pred.len() != gt.len() || pred.len() != visible.len() {
        return Err(LossError::ShapeMismatch);
    }
    let mut used = Vec::new();
    let mut dropped = 0;
    for i in 0..pred.len() {
        if !visible[i] {
            continue;
        }
        if (pred[i] - center).norm() < MIN_RADIUS {
            dropped += 1;
        } else {
            used.push(i);
        }
    }
    if used.is_empty() {
        return Err(LossError::AllOccluded);
    }
    let n = used.len() as f64;
    let scale = used
        .iter()
        .map(|&i| (gt[i] - center).norm() / (pred[i] - center).norm())
        .sum::<f64>()
        / n;
    let mut value = 0.0;
    let mut ds = 0.0;
    let mut grad = vec![Vec2::zeros(); pred.len()];
    for &i in &used {
        let d = pred[i] - center;
        let e = d * scale - (gt[i] - center);
        value += e.norm_squared();
        ds += e.dot(&d);
        grad[i] = e * (2.0 * scale / n);
    }
    value /= n;
    ds *= 2.0 / n;
    for &i in &used {
        let d = pred[i] - center;
        let r = d.norm();
        let rho = (gt[i] - center).norm();
        grad[i] += d * (-ds * rho / (n * r * r * r));
    }
    Ok(TrajLoss {
        value,
        scale,
        grad,
        used: used.len(),
        dropped,
    })
}

/// Least-squares scale between two depth lists: `α* = Σ z m / Σ z²` and the
/// mean squared residual after scaling, with gradient w.r.t. `z`.
pub fn scale_aligned_depth_error(z: &[f64], m: &[f64]) -> Result<(f64, f64, Vec<f64>), LossError> {
    if z.len() != m.len() {
        return Err(LossError::ShapeMismatch);
    }
    if z.is_empty() {
        return Err(LossError::NoOverlap);
    }
    let n = z.len() as f64;
    let s: f64 = z.iter().map(|v| v * v).sum();
    let p: f64 = z.iter().zip(m).map(|(a, b)| a * b).sum();
    if !(s > 0.0) {
        return Err(LossError::NonPositiveProjectedDepth);
    }
    let alpha = p / s;
    let mut value = 0.0;
    let mut dalpha = 0.0;
    for (a, b) in z.iter().zip(m) {
        let r = alpha * a - b;
        value += r * r;
        dalpha += r * a;
    }
    value /= n;
    dalpha *= 2.0 / n;
    let grad = z
        .iter()
        .zip(m)
        .map(|(a, b)| 2.0 / n * alpha * (alpha * a - b) + dalpha * (b * s - 2.0 * a * p) / (s * s))
        .collect();
    Ok((value, alpha, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthLoss {
    pub value: f64,
    pub alpha: f64,
    /// Gradient with respect to each recon point (zero where unused).
    pub grad: Vec<Vec3>,
    /// Left-perturbation gradient with respect to the pose.
    pub pose_grad: Twist,
    pub used: usize,
    /// Overlapping pixels skipped for non-positive projected depth.
    pub masked: usize,
}

/// Scale-aligned depth loss between a frame's reconstruction pointmap, seen
/// from its camera, and a monocular depth map.
pub fn depth_loss(
    recon_pm: &Pointmap,
    pose: &PoseSE3,
    mono: &[f64],
    mono_valid: &[bool],
) -> Result<DepthLoss, LossError> {
    if mono.len() != recon_pm.len() || mono_valid.len() != recon_pm.len() {
        return Err(LossError::ShapeMismatch);
    }
    let mut idx = Vec::new();
    let mut ys = Vec::new();
    let mut masked = 0;
    for i in recon_pm.valid_indices() {
        if !mono_valid[i] {
            continue;
        }
        let y = pose.transform(&recon_pm.points()[i]);
        if y.z > MIN_DEPTH {
            idx.push(i);
            ys.push(y);
        } else {
            masked += 1;
        }
    }
    if idx.is_empty() {
        return Err(if masked > 0 {
            LossError::NonPositiveProjectedDepth
        } else {
            LossError::NoOverlap
        });
    }
    let z: Vec<f64> = ys.iter().map(|y| y.z).collect();
    let m: Vec<f64> = idx.iter().map(|&i| mono[i]).collect();
    let (value, alpha, gz) = scale_aligned_depth_error(&z, &m)?;
    let row = pose.rotation().row(2).transpose();
    let mut grad = vec![Vec3::zeros(); recon_pm.len()];
    let mut pose_grad = Twist::zeros();
    for ((&i, y), g) in idx.iter().zip(&ys).zip(&gz) {
        grad[i] = row * *g;
        let gy = Vec3::new(0.0, 0.0, *g);
        let c = y.cross(&gy);
        pose_grad += Twist::new(c.x, c.y, c.z, gy.x, gy.y, gy.z);
    }
    Ok(DepthLoss {
        value,
        alpha,
        grad,
        pose_grad,
        used: idx.len(),
        masked,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignLoss {
    pub value: f64,
    pub pairs: usize,
    pub grad_tracking: Vec<Vec3>,
    pub grad_recon: Vec<Vec3>,
    /// Set when no pair was visible; the loss is then 0.
    pub no_visible_pairs: bool,
}

/// Sum of squared distances between each visible query's tracking point and
/// the reconstruction point at the pixel its track lands on.
pub fn align_loss(
    tracking_pm: &Pointmap,
    recon_pm: &Pointmap,
    sup: &TrackSupervision,
    frame: usize,
) -> Result<AlignLoss, LossError> {
    if !tracking_pm.same_shape(recon_pm) || tracking_pm.grid() != sup.grid() || frame >= sup.num_frames() {
        return Err(LossError::ShapeMismatch);
    }
    let mut value = 0.0;
    let mut pairs = 0;
    let mut grad_tracking = vec![Vec3::zeros(); tracking_pm.len()];
    let mut grad_recon = vec![Vec3::zeros(); recon_pm.len()];
    for (n, &q) in sup.query_indices().iter().enumerate() {
        let Some(np) = sup.correspondence(n, frame) else {
            continue;
        };
        let (Some(xt), Some(xr)) = (tracking_pm.get(q), recon_pm.get(np)) else {
            continue;
        };
        let d = xt - xr;
        value += d.norm_squared();
        pairs += 1;
        grad_tracking[q] += d * 2.0;
        grad_recon[np] -= d * 2.0;
    }
    Ok(AlignLoss {
        value,
        pairs,
        grad_tracking,
        grad_recon,
        no_visible_pairs: pairs == 0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedLoss {
    pub value: f64,
    pub grad: Vec<Vec3>,
}

/// Scale-normalized regression of a pointmap onto ground truth. Each cloud is
/// divided by its own mean point norm over the selected pixels.
pub fn supervised_pointmap_loss(pred: &Pointmap, gt: &Pointmap, mask: &[bool]) -> Result<SupervisedLoss, LossError> {
    if !pred.same_shape(gt) || mask.len() != pred.len() {
        return Err(LossError::ShapeMismatch);
    }
    let sel: Vec<usize> = (0..pred.len())
        .filter(|&i| mask[i] && pred.is_valid(i) && gt.is_valid(i))
        .collect();
    if sel.is_empty() {
        return Err(LossError::EmptyMask);
    }
    let m = sel.len() as f64;
    let (p, g) = (pred.points(), gt.points());
    let mu_p = sel.iter().map(|&i| p[i].norm()).sum::<f64>() / m;
    let mu_g = sel.iter().map(|&i| g[i].norm()).sum::<f64>() / m;
    if !(mu_p > 0.0 && mu_g > 0.0) {
        return Err(LossError::DegenerateScale);
    }
    let mut value = 0.0;
    let mut dmu = 0.0;
    let mut grad = vec![Vec3::zeros(); pred.len()];
    for &i in &sel {
        let e = p[i] / mu_p - g[i] / mu_g;
        value += e.norm_squared();
        dmu -= e.dot(&p[i]);
        grad[i] = e * (2.0 / (m * mu_p));
    }
    value /= m;
    dmu *= 2.0 / (m * mu_p * mu_p);
    for &i in &sel {
        let r = p[i].norm();
        if r > 0.0 {
            grad[i] += p[i] * (dmu / (m * r));
        }
    }
    Ok(SupervisedLoss { value, grad })
}

/// Everything the combined loss reads for one sequence.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub tracking: &'a [Pointmap],
    pub recon: &'a [Pointmap],
    pub poses: &'a [PoseSE3],
    pub intrinsics: &'a Intrinsics,
    pub tracks: &'a TrackSupervision,
    pub depth: &'a DepthSupervision,
}

impl LossInputs<'_> {
    fn check(&self) -> Result<usize, LossError> {
        let t = self.tracking.len();
        if t == 0 {
            return Err(GeometryError::EmptyVideo.into());
        }
        if self.recon.len() != t
            || self.poses.len() != t
            || self.tracks.num_frames() != t
            || self.depth.num_frames() != t
        {
            return Err(LossError::ShapeMismatch);
        }
        let grid = self.tracks.grid();
        if self.depth.grid() != grid
            || self.tracking.iter().chain(self.recon).any(|pm| pm.grid() != grid)
        {
            return Err(LossError::ShapeMismatch);
        }
        Ok(t)
    }
}

/// Combined loss with gradients for every input that can move.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub breakdown: LossBreakdown,
    pub grad_tracking: Vec<Vec<Vec3>>,
    pub grad_recon: Vec<Vec<Vec3>>,
    /// Left-perturbation gradients of each frame's pose.
    pub grad_pose: Vec<Twist>,
}

struct FrameTerms {
    loss: FrameLoss,
    grad_tracking: Vec<Vec3>,
    grad_recon: Vec<Vec3>,
    grad_pose: Twist,
}

fn frame_terms(inp: &LossInputs, w: &LossWeights, j: usize, scale: f64) -> Result<FrameTerms, LossError> {
    let k = inp.intrinsics;
    let pose = &inp.poses[j];
    let tracking = &inp.tracking[j];
    let sup = inp.tracks;
    let len = tracking.len();

    // Trajectory term.
    let qidx = sup.query_indices();
    let mut pred = vec![Vec2::zeros(); qidx.len()];
    let mut cam = vec![Vec3::zeros(); qidx.len()];
    let mut visible = vec![false; qidx.len()];
    let mut gt = vec![Vec2::zeros(); qidx.len()];
    for (n, &i) in qidx.iter().enumerate() {
        gt[n] = sup.tracks2d.position(n, j);
        if !sup.is_visible(n, j) {
            continue;
        }
        if let Some(x) = tracking.get(i) {
            let y = pose.transform(&x);
            if let Ok(p) = k.project(&y) {
                pred[n] = p;
                cam[n] = y;
                visible[n] = true;
            }
        }
    }
    let traj = traj_loss(&pred, &gt, k.principal_point(), &visible)?;
    let rt = pose.rotation().transpose();
    let mut grad_tracking = vec![Vec3::zeros(); len];
    let mut grad_pose = Twist::zeros();
    let wt = w.traj * scale;
    for (n, &i) in qidx.iter().enumerate() {
        if !visible[n] {
            continue;
        }
        let gy = k.projection_jacobian(&cam[n]).transpose() * (traj.grad[n] * wt);
        grad_tracking[i] += rt * gy;
        let c = cam[n].cross(&gy);
        grad_pose += Twist::new(c.x, c.y, c.z, gy.x, gy.y, gy.z);
    }

    // Depth term.
    let depth = depth_loss(&inp.recon[j], pose, &inp.depth.depth[j], &inp.depth.valid[j])?;
    let wd = w.depth * scale;
    let mut grad_recon: Vec<Vec3> = depth.grad.iter().map(|g| g * wd).collect();
    grad_pose += depth.pose_grad * wd;

    // Alignment term.
    let align = align_loss(tracking, &inp.recon[j], sup, j)?;
    let wa = w.align * scale;
    for i in 0..len {
        grad_tracking[i] += align.grad_tracking[i] * wa;
        grad_recon[i] += align.grad_recon[i] * wa;
    }

    Ok(FrameTerms {
        loss: FrameLoss {
            traj: traj.value,
            depth: depth.value,
            align: align.value,
            total: w.combine(traj.value, depth.value, align.value),
        },
        grad_tracking,
        grad_recon,
        grad_pose,
    })
}

/// Weighted trajectory, depth and alignment losses, each averaged over
/// frames, with gradients of the total.
pub fn total_loss(inputs: &LossInputs, weights: &LossWeights) -> Result<TotalLoss, LossError> {
    weights.validate()?;
    let t = inputs.check()?;
    let scale = 1.0 / t as f64;
    let frames = (0..t)
        .into_par_iter()
        .map(|j| frame_terms(inputs, weights, j, scale).map_err(|e| e.in_frame(j)))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = |f: fn(&FrameLoss) -> f64| frames.iter().map(|fr| f(&fr.loss)).sum::<f64>() * scale;
    let (traj, depth, align) = (mean(|l| l.traj), mean(|l| l.depth), mean(|l| l.align));
    let mut out = TotalLoss {
        breakdown: LossBreakdown {
            traj,
            depth,
            align,
            total: weights.combine(traj, depth, align),
            per_frame: frames.iter().map(|f| f.loss).collect(),
        },
        grad_tracking: Vec::with_capacity(t),
        grad_recon: Vec::with_capacity(t),
        grad_pose: Vec::with_capacity(t),
    };
    for f in frames {
        out.grad_tracking.push(f.grad_tracking);
        out.grad_recon.push(f.grad_recon);
        out.grad_pose.push(f.grad_pose);
    }
    Ok(out)
}
