//! Test-time adaptation: gradient descent on the tracking pointmaps (and
//! optionally the reconstruction pointmaps) against the self-supervision
//! losses.

use serde::{Deserialize, Serialize};

use crate::camera::{
    gauss_newton_refine, pose_gradient_wrt_points, solve_cameras_for_video, twist_gradient, CameraSolution,
    CameraSolverConfig, Correspondences2D3D, FrameCamera, PoseEstimate,
};
use crate::geometry::{Pointmap, PoseSE3};
use crate::losses::{total_loss, DepthSupervision, LossBreakdown, LossError, LossInputs, LossWeights, TrackSupervision};

/// Loss growth over the first evaluation that counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptState {
    /// Free per-frame stand-ins for the tracking branch.
    pub tracking_params: Vec<Pointmap>,
    pub recon_pointmaps: Vec<Pointmap>,
    pub freeze_recon: bool,
    pub step_size: f64,
    pub steps: usize,
    pub cosine_decay: bool,
    pub seed: u64,
}

impl AdaptState {
    pub fn new(tracking_params: Vec<Pointmap>, recon_pointmaps: Vec<Pointmap>) -> Self {
        Self {
            tracking_params,
            recon_pointmaps,
            freeze_recon: true,
            step_size: 1e-2,
            steps: 500,
            cosine_decay: false,
            seed: 0,
        }
    }

    fn learning_rate(&self, step: usize) -> f64 {
        if self.cosine_decay && self.steps > 0 {
            let progress = step as f64 / self.steps as f64;
            0.5 * self.step_size * (1.0 + (std::f64::consts::PI * progress).cos())
        } else {
            self.step_size
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub state: AdaptState,
    /// Loss before each update.
    pub trace: Vec<LossBreakdown>,
    /// Loss after the last update; `None` when no step ran.
    pub final_loss: Option<LossBreakdown>,
    /// Cameras the final loss was evaluated with.
    pub cameras: Option<CameraSolution>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptStep {
    pub step: usize,
    pub traj: f64,
    pub depth: f64,
    pub align: f64,
    pub total: f64,
}

impl AdaptOutcome {
    /// Trace rows plus the final evaluation as the last row.
    pub fn rows(&self) -> Vec<AdaptStep> {
        self.trace
            .iter()
            .chain(self.final_loss.as_ref())
            .enumerate()
            .map(|(step, b)| AdaptStep {
                step,
                traj: b.traj,
                depth: b.depth,
                align: b.align,
                total: b.total,
            })
            .collect()
    }
}

fn support_correspondences(recon: &Pointmap, support: &[usize]) -> Result<Correspondences2D3D, LossError> {
    let grid = recon.grid();
    Ok(Correspondences2D3D::new(
        support.iter().map(|&i| grid.coordinate_of_index(i)).collect(),
        support.iter().map(|&i| recon.points()[i]).collect(),
        None,
    )?)
}

/// One warm-started differentiable GN step per frame from the previous
/// poses, on the step-0 inlier pixels.
fn resolve_cameras(
    recon: &[Pointmap],
    prev: &CameraSolution,
    cfg: &CameraSolverConfig,
) -> Result<CameraSolution, LossError> {
    let mut frames = Vec::with_capacity(prev.frames.len());
    for (j, (pm, f)) in recon.iter().zip(&prev.frames).enumerate() {
        if j == 0 {
            frames.push(f.clone());
            continue;
        }
        let corr = support_correspondences(pm, &f.support)?;
        let prior = PoseEstimate::detached(f.estimate.pose, f.estimate.inliers.clone(), f.estimate.rms_reprojection_error);
        let estimate = gauss_newton_refine(&prior, &corr, &prev.intrinsics, &cfg.gn)
            .map_err(|e| LossError::from(e.in_frame(j)))?;
        frames.push(FrameCamera {
            estimate,
            support: f.support.clone(),
        });
    }
    Ok(CameraSolution {
        intrinsics: prev.intrinsics,
        frames,
    })
}

fn evaluate(
    state: &AdaptState,
    cams: &CameraSolution,
    tracks: &TrackSupervision,
    depth: &DepthSupervision,
    weights: &LossWeights,
) -> Result<crate::losses::TotalLoss, LossError> {
    let poses: Vec<PoseSE3> = cams.poses();
    total_loss(
        &LossInputs {
            tracking: &state.tracking_params,
            recon: &state.recon_pointmaps,
            poses: &poses,
            intrinsics: &cams.intrinsics,
            tracks,
            depth,
        },
        weights,
    )
}

/// Runs `state.steps` gradient-descent updates on the total loss.
///
/// With `freeze_recon` the cameras are solved once and reused, and only the
/// tracking parameters move. Otherwise the reconstruction pointmaps are
/// optimized too, each step re-solves the poses with one differentiable
/// Gauss-Newton step, and pose gradients flow back into the reconstruction
/// points through that step.
pub fn tta_optimize(
    state: AdaptState,
    tracks: &TrackSupervision,
    depth: &DepthSupervision,
    weights: &LossWeights,
    solver: &CameraSolverConfig,
) -> Result<AdaptOutcome, LossError> {
    weights.validate()?;
    if state.steps == 0 {
        return Ok(AdaptOutcome {
            state,
            trace: Vec::new(),
            final_loss: None,
            cameras: None,
        });
    }
    if state.tracking_params.len() != state.recon_pointmaps.len() {
        return Err(LossError::ShapeMismatch);
    }
    let grid = tracks.grid();
    let mut state = state;
    let mut cams = solve_cameras_for_video(&state.recon_pointmaps, grid, solver)?;
    let mut trace = Vec::with_capacity(state.steps);
    let mut initial = None;

    for step in 0..state.steps {
        if step > 0 && !state.freeze_recon {
            cams = resolve_cameras(&state.recon_pointmaps, &cams, solver)?;
        }
        let loss = evaluate(&state, &cams, tracks, depth, weights)?;
        let total = loss.breakdown.total;
        let first = *initial.get_or_insert(total);
        if !(total <= DIVERGENCE_FACTOR * first) {
            return Err(LossError::DivergenceDetected {
                step,
                loss: total,
                initial: first,
            });
        }
        let lr = state.learning_rate(step);
        for (pm, g) in state.tracking_params.iter_mut().zip(&loss.grad_tracking) {
            pm.descend(g, lr);
        }
        if !state.freeze_recon {
            for (j, pm) in state.recon_pointmaps.iter_mut().enumerate() {
                let mut g = loss.grad_recon[j].clone();
                if j > 0 {
                    let f = &cams.frames[j];
                    let upstream = twist_gradient(&f.estimate.increment, &loss.grad_pose[j]);
                    let corr = support_correspondences(pm, &f.support)?;
                    let through_pose = pose_gradient_wrt_points(&f.estimate, &corr, &cams.intrinsics, &solver.gn, &upstream)
                        .map_err(|e| LossError::from(e.in_frame(j)))?;
                    for (&i, gp) in f.support.iter().zip(&through_pose) {
                        g[i] += gp;
                    }
                }
                pm.descend(&g, lr);
            }
        }
        trace.push(loss.breakdown);
    }

    if !state.freeze_recon {
        cams = resolve_cameras(&state.recon_pointmaps, &cams, solver)?;
    }
    let final_loss = evaluate(&state, &cams, tracks, depth, weights)?.breakdown;
    Ok(AdaptOutcome {
        state,
        trace,
        final_loss: Some(final_loss),
        cameras: Some(cams),
    })
}

/// Mean displacement of valid tracking points between two parameter sets.
pub fn mean_displacement(a: &[Pointmap], b: &[Pointmap]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (pa, pb) in a.iter().zip(b) {
        for i in pa.valid_indices() {
            sum += (pa.points()[i] - pb.points()[i]).norm();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
