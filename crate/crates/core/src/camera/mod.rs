//! Camera recovery from reconstruction-branch pointmaps.
//!
//! Intrinsics come from a robust focal fit on the anchor pointmap; per-frame
//! extrinsics from RANSAC-PnP over the 2D–3D correspondences every valid pixel
//! provides, followed by one differentiable Gauss-Newton step whose increment
//! carries gradients back to the 3D points.

mod focal;
mod pnp;
mod refine;

pub use focal::{estimate_focal_weiszfeld, DEFAULT_WEISZFELD_ITERATIONS};
pub use pnp::{minimal_pose, polish_pose, solve_pnp_ransac};
pub use refine::{
    gauss_newton_refine, normal_equations, pose_gradient_wrt_points, twist_gradient,
    NormalEquations,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Intrinsics, PixelGrid, Pointmap, PoseSE3, Vec2, Vec3};
use crate::lie::Twist;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("need at least {needed} valid pixels with positive depth, found {found}")]
    InsufficientValidPoints { needed: usize, found: usize },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("need at least {needed} correspondences, got {found}")]
    TooFewCorrespondences { needed: usize, found: usize },
    #[error("best RANSAC hypothesis has {inliers} inliers, below the minimum sample {min_sample}")]
    NoConsensus { inliers: usize, min_sample: usize },
    #[error("damped normal equations are singular (reciprocal condition {rcond:e})")]
    SingularNormalEquations { rcond: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("correspondence buffers disagree in length")]
    LengthMismatch,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<CameraError>,
    },
}

impl CameraError {
    pub fn in_frame(self, frame: usize) -> Self {
        CameraError::Frame {
            frame,
            source: Box::new(self),
        }
    }
}

/// Pixel ↔ world point pairs with optional nonnegative weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondences2D3D {
    pub pixels: Vec<Vec2>,
    pub points: Vec<Vec3>,
    pub weights: Option<Vec<f64>>,
}

impl Correspondences2D3D {
    pub const MIN_LEN: usize = 4;

    pub fn new(pixels: Vec<Vec2>, points: Vec<Vec3>, weights: Option<Vec<f64>>) -> Result<Self, CameraError> {
        if pixels.len() != points.len() || weights.as_ref().is_some_and(|w| w.len() != pixels.len()) {
            return Err(CameraError::LengthMismatch);
        }
        if pixels.len() < Self::MIN_LEN {
            return Err(CameraError::TooFewCorrespondences {
                needed: Self::MIN_LEN,
                found: pixels.len(),
            });
        }
        if weights.as_ref().is_some_and(|w| w.iter().any(|&x| !(x >= 0.0))) {
            return Err(CameraError::InvalidConfig("weights must be nonnegative"));
        }
        Ok(Self { pixels, points, weights })
    }

    /// Every valid pixel center paired with its 3D point. Also returns the
    /// pixel index of each correspondence.
    pub fn from_pointmap(pm: &Pointmap) -> Result<(Self, Vec<usize>), CameraError> {
        let grid = pm.grid();
        let indices: Vec<usize> = pm.valid_indices().collect();
        let pixels = indices.iter().map(|&i| grid.coordinate_of_index(i)).collect();
        let points = indices.iter().map(|&i| pm.points()[i]).collect();
        Ok((Self::new(pixels, points, None)?, indices))
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    /// Keeps the entries selected by `mask`.
    pub fn restrict(&self, mask: &[bool]) -> Result<Self, CameraError> {
        let keep: Vec<usize> = mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect();
        Self::new(
            keep.iter().map(|&i| self.pixels[i]).collect(),
            keep.iter().map(|&i| self.points[i]).collect(),
            self.weights.as_ref().map(|w| keep.iter().map(|&i| w[i]).collect()),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Pixels.
    pub inlier_threshold: f64,
    pub min_sample: usize,
    pub seed: u64,
    pub confidence: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 256,
            inlier_threshold: 2.0,
            min_sample: 6,
            seed: 0,
            confidence: 0.999,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), CameraError> {
        if self.min_sample < 6 {
            return Err(CameraError::InvalidConfig("min_sample must be at least 6"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(CameraError::InvalidConfig("confidence must lie in (0, 1)"));
        }
        if !(self.inlier_threshold > 0.0) || self.max_iterations == 0 {
            return Err(CameraError::InvalidConfig("threshold and iteration count must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GNConfig {
    /// Added to the normal-equation diagonal as `damping · trace(JᵀJ) / 6`.
    pub damping: f64,
    pub num_steps: usize,
}

impl Default for GNConfig {
    fn default() -> Self {
        Self {
            damping: 1e-9,
            num_steps: 1,
        }
    }
}

impl GNConfig {
    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.damping >= 0.0) || self.num_steps == 0 {
            return Err(CameraError::InvalidConfig("damping must be >= 0 and num_steps >= 1"));
        }
        Ok(())
    }
}

/// A camera pose together with how it was obtained.
///
/// `pose = exp(increment) · base`; `base` is the detached solution and only
/// `increment` depends differentiably on the 3D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: PoseSE3,
    pub base: PoseSE3,
    pub increment: Twist,
    pub inliers: Vec<bool>,
    pub rms_reprojection_error: f64,
}

impl PoseEstimate {
    /// A detached estimate with zero increment.
    pub fn detached(pose: PoseSE3, inliers: Vec<bool>, rms_reprojection_error: f64) -> Self {
        Self {
            pose,
            base: pose,
            increment: Twist::zeros(),
            inliers,
            rms_reprojection_error,
        }
    }

    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Root-mean-square reprojection error over masked entries in front of the
/// camera. Returns 0 for an empty selection.
pub fn rms_reprojection_error(
    pose: &PoseSE3,
    corr: &Correspondences2D3D,
    k: &Intrinsics,
    mask: Option<&[bool]>,
) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..corr.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        if let Ok(p) = k.project(&pose.transform(&corr.points[i])) {
            sum += (corr.pixels[i] - p).norm_squared();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSolverConfig {
    pub ransac: RansacConfig,
    pub gn: GNConfig,
    pub focal_iterations: usize,
}

impl Default for CameraSolverConfig {
    fn default() -> Self {
        Self {
            ransac: RansacConfig::default(),
            gn: GNConfig::default(),
            focal_iterations: DEFAULT_WEISZFELD_ITERATIONS,
        }
    }
}

/// Camera of one frame plus the pixel index behind every correspondence.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameCamera {
    pub estimate: PoseEstimate,
    /// Pixel index of each inlier correspondence used by the final GN step.
    pub support: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraSolution {
    pub intrinsics: Intrinsics,
    pub frames: Vec<FrameCamera>,
}

impl CameraSolution {
    pub fn poses(&self) -> Vec<PoseSE3> {
        self.frames.iter().map(|f| f.estimate.pose).collect()
    }
}

/// Per-frame seed so frames can be solved in any order.
pub(crate) fn frame_seed(seed: u64, frame: usize) -> u64 {
    seed ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Correspondences of a pointmap restricted to an estimate's inliers.
pub fn inlier_support(
    corr: &Correspondences2D3D,
    pixel_indices: &[usize],
    inliers: &[bool],
) -> Result<(Correspondences2D3D, Vec<usize>), CameraError> {
    let support = pixel_indices
        .iter()
        .zip(inliers)
        .filter_map(|(&p, &m)| m.then_some(p))
        .collect();
    Ok((corr.restrict(inliers)?, support))
}

/// Shared focal from the anchor pointmap, then one pose per frame. Frame 0 is
/// the world frame and gets the identity.
pub fn solve_cameras_for_video(
    recon_pointmaps: &[Pointmap],
    grid: PixelGrid,
    cfg: &CameraSolverConfig,
) -> Result<CameraSolution, CameraError> {
    cfg.ransac.validate()?;
    cfg.gn.validate()?;
    let Some(anchor) = recon_pointmaps.first() else {
        return Err(GeometryError::EmptyVideo.into());
    };
    let world = anchor.tag.coord_frame;
    for (j, pm) in recon_pointmaps.iter().enumerate() {
        pm.ensure_reconstruction().map_err(|e| CameraError::from(e).in_frame(j))?;
        if pm.tag.coord_frame != world || pm.width() != grid.width || pm.height() != grid.height {
            return Err(CameraError::from(GeometryError::DimensionMismatch).in_frame(j));
        }
    }
    let intrinsics = estimate_focal_weiszfeld(anchor, grid, cfg.focal_iterations).map_err(|e| e.in_frame(0))?;

    let frames = recon_pointmaps
        .par_iter()
        .enumerate()
        .map(|(j, pm)| solve_frame(j, pm, &intrinsics, cfg).map_err(|e| e.in_frame(j)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CameraSolution { intrinsics, frames })
}

fn solve_frame(
    j: usize,
    pm: &Pointmap,
    k: &Intrinsics,
    cfg: &CameraSolverConfig,
) -> Result<FrameCamera, CameraError> {
    let (corr, pixel_indices) = Correspondences2D3D::from_pointmap(pm)?;
    if j == 0 {
        let pose = PoseSE3::identity();
        let rms = rms_reprojection_error(&pose, &corr, k, None);
        return Ok(FrameCamera {
            estimate: PoseEstimate::detached(pose, vec![true; corr.len()], rms),
            support: pixel_indices,
        });
    }
    let ransac = RansacConfig {
        seed: frame_seed(cfg.ransac.seed, j),
        ..cfg.ransac
    };
    let detached = solve_pnp_ransac(&corr, k, &ransac)?;
    let (inlier_corr, support) = inlier_support(&corr, &pixel_indices, &detached.inliers)?;
    let estimate = gauss_newton_refine(&detached, &inlier_corr, k, &cfg.gn)?;
    Ok(FrameCamera { estimate, support })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::FrameTag;
    use crate::oracle::{generate_scene_with, render, Preset, SceneOptions};

    #[test]
    fn recovers_oracle_cameras_on_every_preset() {
        let opts = SceneOptions { num_frames: 12, ..Default::default() };
        for preset in Preset::ALL {
            let seq = render(&generate_scene_with(preset, 21, &opts)).unwrap();
            let sol = solve_cameras_for_video(&seq.recon_pointmaps, seq.grid, &CameraSolverConfig::default()).unwrap();
            assert!((sol.intrinsics.focal - seq.intrinsics.focal).abs() / seq.intrinsics.focal < 1e-9, "{preset}");
            assert_eq!(sol.intrinsics.principal_point(), seq.intrinsics.principal_point());
            assert!(sol.frames[0].estimate.pose.is_identity());
            for (f, gt) in sol.frames.iter().zip(&seq.cameras) {
                assert!(f.estimate.pose.rotation_distance(gt) < 1e-8, "{preset}");
                assert!(f.estimate.pose.translation_distance(gt) < 1e-8, "{preset}");
                assert_eq!(f.support.len(), f.estimate.inlier_count());
            }
        }
    }

    #[test]
    fn video_errors_carry_the_frame() {
        let seq = render(&generate_scene_with(Preset::DynCamStaticScene, 2, &SceneOptions { num_frames: 3, ..Default::default() })).unwrap();
        let mut recon = seq.recon_pointmaps.clone();
        recon[2] = Pointmap::empty(seq.grid.width, seq.grid.height, FrameTag::reconstruction(0, 2));
        let err = solve_cameras_for_video(&recon, seq.grid, &CameraSolverConfig::default()).unwrap_err();
        assert!(matches!(err, CameraError::Frame { frame: 2, .. }), "{err}");
        recon[2] = seq.tracking_pointmaps[2].clone();
        let err = solve_cameras_for_video(&recon, seq.grid, &CameraSolverConfig::default()).unwrap_err();
        assert!(matches!(err, CameraError::Frame { frame: 2, .. }));
        assert!(matches!(
            solve_cameras_for_video(&[], seq.grid, &CameraSolverConfig::default()),
            Err(CameraError::Geometry(GeometryError::EmptyVideo))
        ));
    }

    #[test]
    fn solving_is_deterministic_across_thread_counts() {
        let seq = render(&generate_scene_with(Preset::DynCamDynScene, 4, &SceneOptions { num_frames: 8, ..Default::default() })).unwrap();
        let cfg = CameraSolverConfig::default();
        let a = solve_cameras_for_video(&seq.recon_pointmaps, seq.grid, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| solve_cameras_for_video(&seq.recon_pointmaps, seq.grid, &cfg).unwrap());
        assert_eq!(a, b);
    }
}
