//! Central finite-difference checks of every analytic gradient: the
//! differentiable PnP step and each loss term.
//!
//! Relative error per coordinate is `|a − n| / max(|a|, |n|, floor)` with
//! `floor = 1e-3 · max_k max(|a_k|, |n_k|)` over the instance, so coordinates
//! that are tiny compared with the rest of the gradient do not dominate.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{
    gauss_newton_refine, pose_gradient_wrt_points, twist_gradient, CameraError, Correspondences2D3D, GNConfig,
    PoseEstimate,
};
use crate::geometry::{FrameTag, GeometryError, Intrinsics, Pixel, PixelGrid, Pointmap, PoseSE3, Tracks2, Vec2, Vec3};
use crate::lie::Twist;
use crate::losses::{
    align_loss, depth_loss, supervised_pointmap_loss, traj_loss, LossError, TrackSupervision,
};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Pnp,
    Traj,
    Depth,
    Align,
    Supervised,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Pnp,
        Component::Traj,
        Component::Depth,
        Component::Align,
        Component::Supervised,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Component::Pnp => "pnp",
            Component::Traj => "traj",
            Component::Depth => "depth",
            Component::Align => "align",
            Component::Supervised => "supervised",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown component {s:?}"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("at least one trial is required")]
    NoTrials,
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub trials: usize,
    /// Negates the analytic gradient of this component, to confirm the check
    /// notices.
    pub sign_flip: Option<Component>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 50,
            sign_flip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentResult {
    pub component: Component,
    pub max_relative_error: f64,
    pub trials: usize,
    pub coordinates: usize,
}

impl ComponentResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

/// Max relative error between analytic and numeric gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let floor = 1e-3 * scale;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn central<F: FnMut(f64) -> Result<f64, GradCheckError>>(mut f: F) -> Result<f64, GradCheckError> {
    Ok((f(FD_STEP)? - f(-FD_STEP)?) / (2.0 * FD_STEP))
}

fn vec3s(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn random_vec3(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vec3 {
    Vec3::new(rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi))
}

/// Analytic and numeric gradient of one trial.
type Trial = (Vec<f64>, Vec<f64>);

fn pnp_trial(rng: &mut ChaCha8Rng) -> Result<Trial, GradCheckError> {
    let k = Intrinsics::new(rng.random_range(200.0..400.0), 160.0, 120.0)?;
    let pose = PoseSE3::from_axis_angle(random_vec3(rng, -0.2, 0.2), random_vec3(rng, -0.3, 0.3));
    let inv = pose.inverse();
    let n = rng.random_range(12..30);
    let mut pixels = Vec::with_capacity(n);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let c = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.8..0.8), rng.random_range(2.0..5.0));
        points.push(inv.transform(&c));
        let noise = Vec2::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * 3.0;
        pixels.push(k.project(&c)? + noise);
    }
    let corr = Correspondences2D3D::new(pixels, points, None)?;
    let cfg = GNConfig {
        damping: 10f64.powf(rng.random_range(-9.0..-2.0)),
        num_steps: 1,
    };
    let start = pose.left_update(&(Twist::from_fn(|_, _| rng.random::<f64>() - 0.5) * 0.01));
    let prior = PoseEstimate::detached(start, vec![true; n], 0.0);
    let est = gauss_newton_refine(&prior, &corr, &k, &cfg)?;

    // Downstream loss: squared reprojection of probe points at fixed targets.
    let probes: Vec<(Vec3, Vec2)> = (0..3)
        .map(|_| {
            let z = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(2.5..4.0));
            let t = Vec2::new(rng.random_range(100.0..220.0), rng.random_range(60.0..180.0));
            (z, t)
        })
        .collect();
    let probe_loss = |p: &PoseSE3| -> Result<f64, GradCheckError> {
        let mut l = 0.0;
        for (z, t) in &probes {
            l += (k.project(&p.transform(z))? - t).norm_squared();
        }
        Ok(l)
    };
    let mut g_eps = Twist::zeros();
    for (z, t) in &probes {
        let y = est.pose.transform(z);
        let gy = k.projection_jacobian(&y).transpose() * ((k.project(&y)? - t) * 2.0);
        let c = y.cross(&gy);
        g_eps += Twist::new(c.x, c.y, c.z, gy.x, gy.y, gy.z);
    }
    let upstream = twist_gradient(&est.increment, &g_eps);
    let analytic = vec3s(&pose_gradient_wrt_points(&est, &corr, &k, &cfg, &upstream)?);

    let base = PoseEstimate::detached(est.base, vec![true; n], 0.0);
    let mut numeric = Vec::with_capacity(3 * n);
    for i in 0..n {
        for a in 0..3 {
            numeric.push(central(|h| {
                let mut c = corr.clone();
                c.points[i][a] += h;
                probe_loss(&gauss_newton_refine(&base, &c, &k, &cfg)?.pose)
            })?);
        }
    }
    Ok((analytic, numeric))
}

fn traj_trial(rng: &mut ChaCha8Rng) -> Result<Trial, GradCheckError> {
    let n = rng.random_range(3..20);
    let center = Vec2::new(32.0, 24.0);
    let pred: Vec<Vec2> = (0..n)
        .map(|_| center + Vec2::new(rng.random_range(-30.0..30.0), rng.random_range(-20.0..20.0)))
        .collect();
    let gt: Vec<Vec2> = pred
        .iter()
        .map(|p| center + (p - center) * rng.random_range(0.5..2.0) + Vec2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
        .collect();
    let mut visible: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
    visible[0] = true;
    let analytic: Vec<f64> = traj_loss(&pred, &gt, center, &visible)?
        .grad
        .iter()
        .flat_map(|g| [g.x, g.y])
        .collect();
    let mut numeric = Vec::with_capacity(2 * n);
    for i in 0..n {
        for a in 0..2 {
            numeric.push(central(|h| {
                let mut p = pred.clone();
                p[i][a] += h;
                Ok(traj_loss(&p, &gt, center, &visible)?.value)
            })?);
        }
    }
    Ok((analytic, numeric))
}

fn random_pointmap(rng: &mut ChaCha8Rng, grid: PixelGrid, tag: FrameTag, invalid: f64) -> Result<Pointmap, GradCheckError> {
    let points = (0..grid.len())
        .map(|_| Vec3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0), rng.random_range(1.0..6.0)))
        .collect();
    let valid = (0..grid.len()).map(|_| !rng.random_bool(invalid)).collect();
    Ok(Pointmap::new(grid.width, grid.height, points, valid, tag)?)
}

fn perturbed(pm: &Pointmap, i: usize, a: usize, h: f64) -> Pointmap {
    let mut out = pm.clone();
    out.map_valid(|j, mut p| {
        if j == i {
            p[a] += h;
        }
        p
    });
    out
}

fn depth_trial(rng: &mut ChaCha8Rng) -> Result<Trial, GradCheckError> {
    let grid = PixelGrid::new(6, 5);
    let pose = PoseSE3::from_axis_angle(random_vec3(rng, -0.1, 0.1), random_vec3(rng, -0.2, 0.2));
    let recon = random_pointmap(rng, grid, FrameTag::reconstruction(0, 0), 0.1)?;
    let mono: Vec<f64> = recon
        .points()
        .iter()
        .map(|p| pose.transform(p).z * rng.random_range(0.6..0.9) + rng.random_range(-0.2..0.2))
        .collect();
    let mono_valid: Vec<bool> = (0..grid.len()).map(|_| rng.random_bool(0.9)).collect();
    let loss = depth_loss(&recon, &pose, &mono, &mono_valid)?;
    let mut analytic = vec3s(&loss.grad);
    analytic.extend(loss.pose_grad.iter());

    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..grid.len() {
        for a in 0..3 {
            numeric.push(central(|h| Ok(depth_loss(&perturbed(&recon, i, a, h), &pose, &mono, &mono_valid)?.value))?);
        }
    }
    for k in 0..6 {
        numeric.push(central(|h| {
            let mut xi = Twist::zeros();
            xi[k] = h;
            Ok(depth_loss(&recon, &pose.left_update(&xi), &mono, &mono_valid)?.value)
        })?);
    }
    Ok((analytic, numeric))
}

fn align_trial(rng: &mut ChaCha8Rng) -> Result<Trial, GradCheckError> {
    let grid = PixelGrid::new(6, 5);
    let tracking = random_pointmap(rng, grid, FrameTag::tracking(0, 1), 0.1)?;
    let recon = random_pointmap(rng, grid, FrameTag::reconstruction(0, 1), 0.1)?;
    let n = 8;
    let mut queries = Vec::with_capacity(n);
    let mut tracks = Tracks2::new(n, 2);
    for q in 0..n {
        let px = Pixel::new(rng.random_range(0..grid.height), rng.random_range(0..grid.width));
        queries.push(px);
        tracks.set(q, 0, grid.coordinate(px), true);
        let pos = Vec2::new(rng.random_range(0.0..grid.width as f64), rng.random_range(0.0..grid.height as f64));
        tracks.set(q, 1, pos, rng.random_bool(0.8));
    }
    let sup = TrackSupervision::new(tracks, queries, grid)?;
    let loss = align_loss(&tracking, &recon, &sup, 1)?;
    let mut analytic = vec3s(&loss.grad_tracking);
    analytic.extend(vec3s(&loss.grad_recon));
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..grid.len() {
        for a in 0..3 {
            numeric.push(central(|h| Ok(align_loss(&perturbed(&tracking, i, a, h), &recon, &sup, 1)?.value))?);
        }
    }
    for i in 0..grid.len() {
        for a in 0..3 {
            numeric.push(central(|h| Ok(align_loss(&tracking, &perturbed(&recon, i, a, h), &sup, 1)?.value))?);
        }
    }
    Ok((analytic, numeric))
}

fn supervised_trial(rng: &mut ChaCha8Rng) -> Result<Trial, GradCheckError> {
    let grid = PixelGrid::new(5, 4);
    let tag = FrameTag::reconstruction(0, 0);
    let pred = random_pointmap(rng, grid, tag, 0.1)?;
    let gt = random_pointmap(rng, grid, tag, 0.1)?;
    let mask: Vec<bool> = (0..grid.len()).map(|_| rng.random_bool(0.85)).collect();
    let analytic = vec3s(&supervised_pointmap_loss(&pred, &gt, &mask)?.grad);
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..grid.len() {
        for a in 0..3 {
            numeric.push(central(|h| Ok(supervised_pointmap_loss(&perturbed(&pred, i, a, h), &gt, &mask)?.value))?);
        }
    }
    Ok((analytic, numeric))
}

/// Runs `cfg.trials` randomized instances of one component.
pub fn check_component(component: Component, cfg: &GradCheckConfig) -> Result<ComponentResult, GradCheckError> {
    if cfg.trials == 0 {
        return Err(GradCheckError::NoTrials);
    }
    let stream = Component::ALL.iter().position(|c| *c == component).unwrap_or(0) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut max_err = 0.0f64;
    let mut coordinates = 0;
    for _ in 0..cfg.trials {
        let (mut analytic, numeric) = match component {
            Component::Pnp => pnp_trial(&mut rng)?,
            Component::Traj => traj_trial(&mut rng)?,
            Component::Depth => depth_trial(&mut rng)?,
            Component::Align => align_trial(&mut rng)?,
            Component::Supervised => supervised_trial(&mut rng)?,
        };
        if cfg.sign_flip == Some(component) {
            analytic.iter_mut().for_each(|v| *v = -*v);
        }
        coordinates += analytic.len();
        max_err = max_err.max(relative_error(&analytic, &numeric));
    }
    Ok(ComponentResult {
        component,
        max_relative_error: max_err,
        trials: cfg.trials,
        coordinates,
    })
}

pub fn check_all(cfg: &GradCheckConfig) -> Result<Vec<ComponentResult>, GradCheckError> {
    Component::ALL.iter().map(|c| check_component(*c, cfg)).collect()
}
