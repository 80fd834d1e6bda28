//! Synthetic dynamic scenes with exactly known geometry.
//!
//! Scenes are made of analytic shapes: a static room (or a single plane) plus
//! rigid bodies that move along per-frame trajectories. Rendering casts one
//! ray per pixel center, so every reconstruction pointmap entry projects back
//! onto its pixel center exactly and camera recovery is noise free.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    FrameTag, GeometryError, Intrinsics, Pixel, PixelGrid, Pointmap, PoseSE3, Tracks2, Tracks3, Vec2, Vec3,
    MIN_DEPTH,
};
use crate::losses::{DepthSupervision, LossError, TrackSupervision};

const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("no scene surface is visible from the anchor camera")]
    EmptyRaster,
    #[error("invalid scene: {0}")]
    InvalidSpec(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    StaticCamDynScene,
    DynCamStaticScene,
    DynCamDynScene,
    DegeneratePlanar,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::StaticCamDynScene,
        Preset::DynCamStaticScene,
        Preset::DynCamDynScene,
        Preset::DegeneratePlanar,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::StaticCamDynScene => "static-cam-dyn-scene",
            Preset::DynCamStaticScene => "dyn-cam-static-scene",
            Preset::DynCamDynScene => "dyn-cam-dyn-scene",
            Preset::DegeneratePlanar => "degenerate-planar",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = OracleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| OracleError::UnknownPreset(s.to_string()))
    }
}

/// An analytic surface. Rays report the first hit with `t > 0`.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// Inside faces of an axis-aligned box.
    Room { min: Vec3, max: Vec3 },
    Plane { point: Vec3, normal: Vec3 },
    Sphere { center: Vec3, radius: f64 },
    /// Box with the given half extents, rotated about its center.
    Cuboid { center: Vec3, axis_angle: Vec3, half_extents: Vec3 },
}

impl Shape {
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        match self {
            Shape::Room { min, max } => {
                let mut t = f64::INFINITY;
                for a in 0..3 {
                    if d[a] > 0.0 {
                        t = t.min((max[a] - o[a]) / d[a]);
                    } else if d[a] < 0.0 {
                        t = t.min((min[a] - o[a]) / d[a]);
                    }
                }
                (t.is_finite() && t > HIT_EPS).then_some(t)
            }
            Shape::Plane { point, normal } => {
                let denom = normal.dot(d);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = normal.dot(&(point - o)) / denom;
                (t > HIT_EPS).then_some(t)
            }
            Shape::Sphere { center, radius } => {
                let oc = o - center;
                let a = d.norm_squared();
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [(-b - s) / a, (-b + s) / a].into_iter().find(|&t| t > HIT_EPS)
            }
            Shape::Cuboid {
                center,
                axis_angle,
                half_extents,
            } => {
                let rt = crate::lie::so3_exp(axis_angle).transpose();
                let (lo, ld) = (rt * (o - center), rt * d);
                let (mut near, mut far) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if ld[a] == 0.0 {
                        if lo[a].abs() > half_extents[a] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (-half_extents[a] - lo[a]) / ld[a];
                    let t2 = (half_extents[a] - lo[a]) / ld[a];
                    near = near.max(t1.min(t2));
                    far = far.min(t1.max(t2));
                }
                if near > far {
                    return None;
                }
                [near, far].into_iter().find(|&t| t > HIT_EPS)
            }
        }
    }
}

/// A rigid body: its shape as placed at frame 0, and per-frame motions
/// `B_j` mapping frame-0 positions to frame-`j` positions (`B_0 = I`).
#[derive(Debug, Clone, PartialEq)]
pub struct Body {
    pub shape: Shape,
    pub trajectory: Vec<PoseSE3>,
}

impl Body {
    pub fn is_moving(&self) -> bool {
        self.trajectory.iter().any(|b| !b.is_identity())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub static_shapes: Vec<Shape>,
    pub bodies: Vec<Body>,
    /// World-to-camera pose of every frame; the anchor camera is the world.
    pub camera_path: Vec<PoseSE3>,
    pub intrinsics: Intrinsics,
    pub grid: PixelGrid,
    pub num_frames: usize,
    pub seed: u64,
    pub label: String,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), OracleError> {
        if self.num_frames == 0 {
            return Err(GeometryError::EmptyVideo.into());
        }
        if self.grid.is_empty() {
            return Err(OracleError::InvalidSpec("empty image"));
        }
        if self.camera_path.len() != self.num_frames {
            return Err(OracleError::InvalidSpec("camera path length differs from frame count"));
        }
        if self.bodies.iter().any(|b| b.trajectory.len() != self.num_frames) {
            return Err(OracleError::InvalidSpec("body trajectory length differs from frame count"));
        }
        Ok(())
    }

    fn cast(&self, o: &Vec3, d: &Vec3, frame: usize) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |t: f64, object: usize| {
            if best.as_ref().is_none_or(|b| t < b.t) {
                best = Some(Hit { t, object });
            }
        };
        for (k, shape) in self.static_shapes.iter().enumerate() {
            if let Some(t) = shape.intersect(o, d) {
                consider(t, k);
            }
        }
        for (k, body) in self.bodies.iter().enumerate() {
            let inv = body.trajectory[frame].inverse();
            let (lo, ld) = (inv.transform(o), inv.rotation() * d);
            if let Some(t) = body.shape.intersect(&lo, &ld) {
                consider(t, self.static_shapes.len() + k);
            }
        }
        best
    }

    fn body_of(&self, object: usize) -> Option<&Body> {
        object.checked_sub(self.static_shapes.len()).map(|k| &self.bodies[k])
    }
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    object: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneOptions {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    /// Focal length as a multiple of the image width.
    pub focal_ratio: f64,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            width: 64,
            height: 48,
            num_frames: 24,
            focal_ratio: 0.9,
        }
    }
}

pub fn generate_scene(preset: Preset, seed: u64) -> SceneSpec {
    generate_scene_with(preset, seed, &SceneOptions::default())
}

/// Deterministic scene for a preset and seed.
pub fn generate_scene_with(preset: Preset, seed: u64, opts: &SceneOptions) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (preset as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    let grid = PixelGrid::new(opts.width, opts.height);
    let t = opts.num_frames;
    let intrinsics = Intrinsics::centered(opts.focal_ratio * opts.width as f64, grid)
        .expect("positive focal ratio and width");

    let moving_camera = !matches!(preset, Preset::StaticCamDynScene);
    let camera_path = if moving_camera {
        camera_orbit(&mut rng, t)
    } else {
        vec![PoseSE3::identity(); t]
    };

    let (static_shapes, bodies) = match preset {
        Preset::DegeneratePlanar => {
            let normal = Vec3::new(rng.random_range(0.1..0.2), rng.random_range(-0.15..-0.05), -1.0).normalize();
            (vec![Shape::Plane { point: Vec3::new(0.0, 0.0, 4.0), normal }], Vec::new())
        }
        _ => {
            let room = Shape::Room {
                min: Vec3::new(-4.0, -3.0, -3.0),
                max: Vec3::new(4.0, 1.5, 7.0),
            };
            let moving = !matches!(preset, Preset::DynCamStaticScene);
            (vec![room], random_bodies(&mut rng, t, moving))
        }
    };

    SceneSpec {
        static_shapes,
        bodies,
        camera_path,
        intrinsics,
        grid,
        num_frames: t,
        seed,
        label: preset.name().to_string(),
    }
}

fn camera_orbit(rng: &mut ChaCha8Rng, frames: usize) -> Vec<PoseSE3> {
    let a = rng.random_range(0.2..0.4);
    let b = rng.random_range(0.05..0.15);
    let w = rng.random_range(0.03..0.06);
    let yaw = rng.random_range(0.05..0.1);
    let pitch = rng.random_range(0.02..0.05);
    (0..frames)
        .map(|j| {
            if j == 0 {
                return PoseSE3::identity();
            }
            let p = w * j as f64;
            let center = Vec3::new(a * p.sin(), b * (1.0 - p.cos()), 0.01 * j as f64);
            // Camera-to-world rotation; the pose stores its inverse.
            let cam_to_world = crate::lie::so3_exp(&Vec3::new(pitch * (1.0 - p.cos()), yaw * p.sin(), 0.0));
            let r = cam_to_world.transpose();
            PoseSE3::new(r, -(r * center)).expect("exp yields a rotation")
        })
        .collect()
}

fn random_bodies(rng: &mut ChaCha8Rng, frames: usize, moving: bool) -> Vec<Body> {
    let mut bodies = Vec::new();
    let count = rng.random_range(2..=3);
    for k in 0..count {
        let center = Vec3::new(
            -1.6 + 1.6 * k as f64 + rng.random_range(-0.3..0.3),
            rng.random_range(-0.6..0.4),
            rng.random_range(3.0..5.0),
        );
        let shape = if k % 2 == 0 {
            Shape::Sphere {
                center,
                radius: rng.random_range(0.35..0.6),
            }
        } else {
            Shape::Cuboid {
                center,
                axis_angle: Vec3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)),
                half_extents: Vec3::new(rng.random_range(0.25..0.5), rng.random_range(0.25..0.5), rng.random_range(0.25..0.5)),
            }
        };
        let dir: [f64; 3] = UnitSphere.sample(rng);
        let speed = rng.random_range(0.01..0.03);
        let velocity = Vec3::from(dir) * speed;
        let spin = Vec3::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
        let trajectory = (0..frames)
            .map(|j| {
                if !moving || j == 0 {
                    return PoseSE3::identity();
                }
                let r = crate::lie::so3_exp(&(spin * j as f64));
                PoseSE3::new(r, center + velocity * j as f64 - r * center).expect("exp yields a rotation")
            })
            .collect();
        bodies.push(Body { shape, trajectory });
    }
    bodies
}

/// Parameters a corrupted sequence was produced with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub noise_std: f64,
    pub drift_per_frame: f64,
    pub seed: u64,
    pub drift_direction: [f64; 3],
    pub include_recon: bool,
}

/// Everything the ideal two-branch predictor would output for a video, plus
/// the ground truth it was rendered from.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSequence {
    pub grid: PixelGrid,
    /// Tracking branch `¹X¹ⱼ`.
    pub tracking_pointmaps: Vec<Pointmap>,
    /// Reconstruction branch `¹Xʲⱼ`, world coordinates.
    pub recon_pointmaps: Vec<Pointmap>,
    pub cameras: Vec<PoseSE3>,
    pub intrinsics: Intrinsics,
    /// Anchor pixels the tracks start from.
    pub queries: Vec<Pixel>,
    pub tracks3d_world: Tracks3,
    pub tracks2d: Tracks2,
    /// Camera-plane depth per pixel; 0 where the recon pointmap is invalid.
    pub depth: Vec<Vec<f64>>,
    pub dynamic_mask: Vec<bool>,
    pub corruption: Option<CorruptionRecord>,
    pub label: String,
}

impl RenderedSequence {
    pub fn num_frames(&self) -> usize {
        self.tracking_pointmaps.len()
    }

    /// 2D tracks as pseudo ground truth for adaptation.
    pub fn track_supervision(&self) -> Result<TrackSupervision, OracleError> {
        Ok(TrackSupervision::new(self.tracks2d.clone(), self.queries.clone(), self.grid)?)
    }

    /// Depth maps as monocular-depth supervision.
    pub fn depth_supervision(&self) -> Result<DepthSupervision, OracleError> {
        let valid = self.recon_pointmaps.iter().map(|pm| pm.valid().to_vec()).collect();
        Ok(DepthSupervision::new(self.grid, self.depth.clone(), valid)?)
    }
}

struct FrameRender {
    recon: Pointmap,
    depth: Vec<f64>,
    objects: Vec<Option<usize>>,
}

fn render_frame(spec: &SceneSpec, j: usize) -> Result<FrameRender, OracleError> {
    let pose = spec.camera_path[j];
    let center = pose.center();
    let rt = pose.rotation().transpose();
    let n = spec.grid.len();
    let mut points = vec![Vec3::zeros(); n];
    let mut valid = vec![false; n];
    let mut depth = vec![0.0; n];
    let mut objects = vec![None; n];
    for i in 0..n {
        let m = spec.intrinsics.normalize(&spec.grid.coordinate_of_index(i));
        let d = rt * Vec3::new(m.x, m.y, 1.0);
        if let Some(hit) = spec.cast(&center, &d, j) {
            points[i] = center + d * hit.t;
            valid[i] = true;
            depth[i] = hit.t;
            objects[i] = Some(hit.object);
        }
    }
    let recon = Pointmap::new(
        spec.grid.width,
        spec.grid.height,
        points,
        valid,
        FrameTag::reconstruction(0, j),
    )?;
    Ok(FrameRender { recon, depth, objects })
}

/// Renders both pointmap branches, depths, tracks and visibility.
///
/// A query is visible in frame `j` when the ray through its exact projection
/// hits the same object at the same depth and the pixel containing the
/// projection shows that object too.
pub fn render(spec: &SceneSpec) -> Result<RenderedSequence, OracleError> {
    spec.validate()?;
    let frames = (0..spec.num_frames)
        .into_par_iter()
        .map(|j| render_frame(spec, j))
        .collect::<Result<Vec<_>, _>>()?;
    let anchor = &frames[0];
    if anchor.recon.num_valid() == 0 {
        return Err(OracleError::EmptyRaster);
    }
    let grid = spec.grid;
    let query_idx: Vec<usize> = anchor.recon.valid_indices().collect();
    let queries: Vec<Pixel> = query_idx.iter().map(|&i| grid.pixel_of_index(i)).collect();
    let dynamic_mask: Vec<bool> = query_idx
        .iter()
        .map(|&i| {
            let obj = anchor.objects[i].expect("valid pixel has an object");
            spec.body_of(obj).is_some_and(Body::is_moving)
        })
        .collect();

    let tracking_pointmaps: Vec<Pointmap> = (0..spec.num_frames)
        .map(|j| {
            if j == 0 {
                let mut pm = anchor.recon.clone();
                pm.tag = FrameTag::tracking(0, 0);
                return pm;
            }
            let mut pm = anchor.recon.clone();
            pm.tag = FrameTag::tracking(0, j);
            pm.map_valid(|i, x| {
                let obj = anchor.objects[i].expect("valid pixel has an object");
                match spec.body_of(obj) {
                    Some(body) => body.trajectory[j].transform(&x),
                    None => x,
                }
            });
            pm
        })
        .collect();

    let nq = queries.len();
    let per_frame: Vec<Vec<(Vec2, bool)>> = (0..spec.num_frames)
        .into_par_iter()
        .map(|j| {
            let pose = spec.camera_path[j];
            let center = pose.center();
            let rt = pose.rotation().transpose();
            query_idx
                .iter()
                .map(|&i| {
                    let x = tracking_pointmaps[j].points()[i];
                    let obj = anchor.objects[i];
                    let y = pose.transform(&x);
                    let Ok(p) = spec.intrinsics.project(&y) else {
                        return (Vec2::zeros(), false);
                    };
                    if j == 0 {
                        return (p, true);
                    }
                    let Some(px) = grid.pixel_at(p) else {
                        return (p, false);
                    };
                    let same_pixel_object = frames[j].objects[px.row * grid.width + px.col] == obj;
                    let m = spec.intrinsics.normalize(&p);
                    let d = rt * Vec3::new(m.x, m.y, 1.0);
                    let same_surface = spec
                        .cast(&center, &d, j)
                        .is_some_and(|h| Some(h.object) == obj && (h.t - y.z).abs() <= 1e-6 * (1.0 + y.z));
                    (p, same_pixel_object && same_surface && y.z > MIN_DEPTH)
                })
                .collect()
        })
        .collect();

    let mut tracks2d = Tracks2::new(nq, spec.num_frames);
    let mut tracks3d = Tracks3::new(nq, spec.num_frames);
    for (n, &i) in query_idx.iter().enumerate() {
        for j in 0..spec.num_frames {
            let (p, vis) = per_frame[j][n];
            tracks2d.set(n, j, p, vis);
            tracks3d.set(n, j, tracking_pointmaps[j].points()[i], vis);
        }
    }
    tracks2d.dynamic = dynamic_mask.clone();
    tracks3d.dynamic = dynamic_mask.clone();

    let mut recon_pointmaps = Vec::with_capacity(frames.len());
    let mut depth = Vec::with_capacity(frames.len());
    for f in frames {
        recon_pointmaps.push(f.recon);
        depth.push(f.depth);
    }
    Ok(RenderedSequence {
        grid,
        tracking_pointmaps,
        recon_pointmaps,
        cameras: spec.camera_path.clone(),
        intrinsics: spec.intrinsics,
        queries,
        tracks3d_world: tracks3d,
        tracks2d,
        depth,
        dynamic_mask,
        corruption: None,
        label: spec.label.clone(),
    })
}

/// Adds seeded Gaussian noise and a drift growing linearly with the frame
/// index to the tracking pointmaps (and optionally the reconstruction
/// pointmaps). Ground-truth tracks, cameras and depths are left alone.
pub fn corrupt(
    seq: &RenderedSequence,
    noise_std: f64,
    drift_per_frame: f64,
    seed: u64,
    include_recon: bool,
) -> Result<RenderedSequence, OracleError> {
    if !(noise_std >= 0.0 && drift_per_frame >= 0.0) {
        return Err(OracleError::InvalidSpec("noise and drift must be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir: [f64; 3] = UnitSphere.sample(&mut rng);
    let mut out = seq.clone();
    out.corruption = Some(CorruptionRecord {
        noise_std,
        drift_per_frame,
        seed,
        drift_direction: dir,
        include_recon,
    });
    if noise_std == 0.0 && drift_per_frame == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, noise_std).expect("finite std");
    let dir = Vec3::from(dir);
    let mut perturb = |pms: &mut [Pointmap]| {
        for (j, pm) in pms.iter_mut().enumerate() {
            let drift = dir * (drift_per_frame * j as f64);
            pm.map_valid(|_, x| {
                let noise = Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
                x + noise + drift
            });
        }
    };
    perturb(&mut out.tracking_pointmaps);
    if include_recon {
        perturb(&mut out.recon_pointmaps);
    }
    Ok(out)
}
