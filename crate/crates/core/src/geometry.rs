//! Pointmaps with frame/time semantics, pinhole projection, rigid poses and
//! anchor-frame chaining of a video into image pairs.
//!
//! A pointmap `ᵃXᵇₜ` holds the 3D points of the content seen in frame `b`,
//! placed where they are at time `t`, expressed in the camera coordinates of
//! frame `a`. Frame indices are zero-based; frame 0 is the anchor whose camera
//! is the world frame.

use nalgebra::{Matrix3, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{self, Twist};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type FrameId = usize;

/// Camera-plane depths at or below this are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive camera depth {depth}")]
    NonPositiveDepth { depth: f64 },
    #[error("video has no frames")]
    EmptyVideo,
    #[error("query pixel ({row}, {col}) outside {width}x{height} grid")]
    QueryOutOfBounds {
        row: usize,
        col: usize,
        width: usize,
        height: usize,
    },
    #[error("pointmap buffers hold {points} points and {valid} mask entries, expected {expected}")]
    SizeMismatch {
        points: usize,
        valid: usize,
        expected: usize,
    },
    #[error("valid point {index} is not finite")]
    NonFinitePoint { index: usize },
    #[error("pointmap tag {found:?} violates the {expected} contract")]
    TagMismatch { found: FrameTag, expected: &'static str },
    #[error("pointmaps have inconsistent dimensions")]
    DimensionMismatch,
    #[error("rotation is not orthonormal with det +1 (error {error:e})")]
    InvalidRotation { error: f64 },
    #[error("focal length must be positive and finite, got {0}")]
    InvalidFocal(f64),
}

/// `(coordinate frame a, content frame b, time t)` of a pointmap `ᵃXᵇₜ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameTag {
    pub coord_frame: FrameId,
    pub content_frame: FrameId,
    pub time: FrameId,
}

impl FrameTag {
    /// Tracking-branch tag `ᵃXᵃⱼ`: anchor content advanced to time `j`.
    pub fn tracking(anchor: FrameId, time: FrameId) -> Self {
        Self {
            coord_frame: anchor,
            content_frame: anchor,
            time,
        }
    }

    /// Reconstruction-branch tag `ᵃXʲⱼ`: frame `j` content at its own time.
    pub fn reconstruction(anchor: FrameId, frame: FrameId) -> Self {
        Self {
            coord_frame: anchor,
            content_frame: frame,
            time: frame,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.content_frame == self.coord_frame
    }

    pub fn is_reconstruction(&self) -> bool {
        self.content_frame == self.time
    }
}

/// Row/column address of a pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
}

impl Pixel {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Pixel lattice of an image. Pixel `(r, c)` sits at `(c + 0.5, r + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelGrid {
    pub width: usize,
    pub height: usize,
}

impl PixelGrid {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coordinate(&self, px: Pixel) -> Vec2 {
        Vec2::new(px.col as f64 + 0.5, px.row as f64 + 0.5)
    }

    pub fn coordinate_of_index(&self, index: usize) -> Vec2 {
        self.coordinate(self.pixel_of_index(index))
    }

    pub fn coordinates(&self) -> Vec<Vec2> {
        (0..self.len()).map(|i| self.coordinate_of_index(i)).collect()
    }

    pub fn pixel_of_index(&self, index: usize) -> Pixel {
        Pixel::new(index / self.width, index % self.width)
    }

    pub fn index_of(&self, px: Pixel) -> Result<usize, GeometryError> {
        if px.row >= self.height || px.col >= self.width {
            return Err(GeometryError::QueryOutOfBounds {
                row: px.row,
                col: px.col,
                width: self.width,
                height: self.height,
            });
        }
        Ok(px.row * self.width + px.col)
    }

    /// Pixel containing a continuous image position, if inside the image.
    pub fn pixel_at(&self, pos: Vec2) -> Option<Pixel> {
        if !(pos.x >= 0.0 && pos.y >= 0.0) {
            return None;
        }
        let (col, row) = (pos.x.floor() as usize, pos.y.floor() as usize);
        (col < self.width && row < self.height).then_some(Pixel::new(row, col))
    }

    /// Image center; the principal point of estimated intrinsics.
    pub fn center(&self) -> Vec2 {
        Vec2::new(self.width as f64 / 2.0, self.height as f64 / 2.0)
    }
}

/// H×W grid of 3D points with a validity mask and a frame tag.
///
/// Invalid entries always hold `(0, 0, 0)` so bulk arithmetic stays finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointmap {
    width: usize,
    height: usize,
    points: Vec<Vec3>,
    valid: Vec<bool>,
    pub tag: FrameTag,
}

impl Pointmap {
    pub fn new(
        width: usize,
        height: usize,
        mut points: Vec<Vec3>,
        valid: Vec<bool>,
        tag: FrameTag,
    ) -> Result<Self, GeometryError> {
        let expected = width * height;
        if points.len() != expected || valid.len() != expected {
            return Err(GeometryError::SizeMismatch {
                points: points.len(),
                valid: valid.len(),
                expected,
            });
        }
        for (index, (p, &v)) in points.iter_mut().zip(&valid).enumerate() {
            if v {
                if !p.iter().all(|c| c.is_finite()) {
                    return Err(GeometryError::NonFinitePoint { index });
                }
            } else {
                *p = Vec3::zeros();
            }
        }
        Ok(Self {
            width,
            height,
            points,
            valid,
            tag,
        })
    }

    /// A pointmap with every pixel invalid.
    pub fn empty(width: usize, height: usize, tag: FrameTag) -> Self {
        Self {
            width,
            height,
            points: vec![Vec3::zeros(); width * height],
            valid: vec![false; width * height],
            tag,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn grid(&self) -> PixelGrid {
        PixelGrid::new(self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, index: usize) -> bool {
        self.valid[index]
    }

    pub fn get(&self, index: usize) -> Option<Vec3> {
        self.valid[index].then(|| self.points[index])
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.valid
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| v.then_some(i))
    }

    /// Sets a point and marks it valid.
    pub fn set(&mut self, index: usize, p: Vec3) -> Result<(), GeometryError> {
        if !p.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::NonFinitePoint { index });
        }
        self.points[index] = p;
        self.valid[index] = true;
        Ok(())
    }

    pub fn invalidate(&mut self, index: usize) {
        self.points[index] = Vec3::zeros();
        self.valid[index] = false;
    }

    /// Rewrites every valid point through `f(index, point)`.
    pub fn map_valid(&mut self, mut f: impl FnMut(usize, Vec3) -> Vec3) {
        for (i, (p, &v)) in self.points.iter_mut().zip(&self.valid).enumerate() {
            if v {
                *p = f(i, *p);
            }
        }
    }

    /// `x ← x − step · g` on valid entries (a gradient descent step).
    pub fn descend(&mut self, grad: &[Vec3], step: f64) {
        debug_assert_eq!(grad.len(), self.points.len());
        for ((p, g), &v) in self.points.iter_mut().zip(grad).zip(&self.valid) {
            if v {
                *p -= g * step;
            }
        }
    }

    pub fn same_shape(&self, other: &Pointmap) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Checks the tracking-branch contract `ᵃXᵃₜ` for the given anchor.
    pub fn ensure_tracking(&self, anchor: FrameId) -> Result<(), GeometryError> {
        if self.tag.coord_frame == anchor && self.tag.is_tracking() {
            Ok(())
        } else {
            Err(GeometryError::TagMismatch {
                found: self.tag,
                expected: "tracking-branch",
            })
        }
    }

    /// Checks the reconstruction-branch contract `ᵃXʲⱼ`.
    pub fn ensure_reconstruction(&self) -> Result<(), GeometryError> {
        if self.tag.is_reconstruction() {
            Ok(())
        } else {
            Err(GeometryError::TagMismatch {
                found: self.tag,
                expected: "reconstruction-branch",
            })
        }
    }
}

/// Pinhole intrinsics with square pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(focal: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(GeometryError::InvalidFocal(focal));
        }
        Ok(Self { focal, cx, cy })
    }

    /// Principal point at the image center.
    pub fn centered(focal: f64, grid: PixelGrid) -> Result<Self, GeometryError> {
        let c = grid.center();
        Self::new(focal, c.x, c.y)
    }

    pub fn principal_point(&self) -> Vec2 {
        Vec2::new(self.cx, self.cy)
    }

    /// Projects a camera-frame point.
    pub fn project(&self, y: &Vec3) -> Result<Vec2, GeometryError> {
        if y.z <= MIN_DEPTH {
            return Err(GeometryError::NonPositiveDepth { depth: y.z });
        }
        Ok(Vec2::new(
            self.focal * y.x / y.z + self.cx,
            self.focal * y.y / y.z + self.cy,
        ))
    }

    /// Normalized image coordinates `K⁻¹ [u v 1]ᵀ` (first two components).
    pub fn normalize(&self, pixel: &Vec2) -> Vec2 {
        Vec2::new(
            (pixel.x - self.cx) / self.focal,
            (pixel.y - self.cy) / self.focal,
        )
    }

    /// Camera-frame point at depth `z` along the ray through `pixel`.
    pub fn backproject(&self, pixel: &Vec2, z: f64) -> Vec3 {
        let m = self.normalize(pixel);
        Vec3::new(m.x * z, m.y * z, z)
    }

    /// Jacobian of the projection with respect to the camera-frame point.
    pub fn projection_jacobian(&self, y: &Vec3) -> nalgebra::Matrix2x3<f64> {
        let iz = 1.0 / y.z;
        let f = self.focal;
        nalgebra::Matrix2x3::new(
            f * iz,
            0.0,
            -f * y.x * iz * iz,
            0.0,
            f * iz,
            -f * y.y * iz * iz,
        )
    }
}

/// Rigid world-to-camera transform `Y = R·X + T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    rotation: Mat3,
    translation: Vec3,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub const ORTHONORMAL_TOLERANCE: f64 = 1e-9;

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        let error = rotation_error(&rotation);
        if !(error <= Self::ORTHONORMAL_TOLERANCE) || !translation.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::InvalidRotation { error });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Builds a pose from a near-rotation, projecting it onto SO(3) first.
    pub fn from_nearly_orthonormal(rotation: &Mat3, translation: Vec3) -> Self {
        Self {
            rotation: lie::project_to_so3(rotation),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: t,
        }
    }

    /// Rotation given as an axis-angle vector, then translation.
    pub fn from_axis_angle(axis_angle: Vec3, translation: Vec3) -> Self {
        Self {
            rotation: lie::so3_exp(&axis_angle),
            translation,
        }
    }

    /// `exp` of a twist.
    pub fn exp(xi: &Twist) -> Self {
        let (rotation, translation) = lie::se3_exp(xi);
        Self {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Mat3::identity() && self.translation == Vec3::zeros()
    }

    pub fn transform(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `exp(δ) · self`, re-orthonormalized.
    pub fn left_update(&self, xi: &Twist) -> PoseSE3 {
        let updated = PoseSE3::exp(xi).compose(self);
        PoseSE3::from_nearly_orthonormal(&updated.rotation, updated.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Angle of the relative rotation to `other`, radians.
    pub fn rotation_distance(&self, other: &PoseSE3) -> f64 {
        lie::rotation_angle(&(self.rotation.transpose() * other.rotation))
    }

    pub fn translation_distance(&self, other: &PoseSE3) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Row-major 3×4 `[R | T]`.
    pub fn to_rows(&self) -> [[f64; 4]; 3] {
        let mut rows = [[0.0; 4]; 3];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().take(3).enumerate() {
                *v = self.rotation[(i, j)];
            }
            row[3] = self.translation[i];
        }
        rows
    }
}

fn rotation_error(r: &Mat3) -> f64 {
    let ortho = (r.transpose() * r - Mat3::identity()).abs().max();
    ortho.max((r.determinant() - 1.0).abs())
}

/// Projects a world point through a pose and intrinsics.
pub fn project(k: &Intrinsics, pose: &PoseSE3, x: &Vec3) -> Result<Vec2, GeometryError> {
    k.project(&pose.transform(x))
}

/// Applies a rigid transform to every valid point; the result is expressed in
/// `target_frame`'s coordinates.
pub fn transform_points(pose: &PoseSE3, pm: &Pointmap, target_frame: FrameId) -> Pointmap {
    let mut out = pm.clone();
    out.map_valid(|_, p| pose.transform(&p));
    out.tag.coord_frame = target_frame;
    out
}

/// An (anchor, other) frame pair fed to the two-branch predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePair {
    pub anchor_index: FrameId,
    pub other_index: FrameId,
}

/// Pairs every frame with the first one: `(0,0), (0,1), …, (0,T−1)`.
pub fn build_video_pairs(num_frames: usize) -> Result<Vec<FramePair>, GeometryError> {
    if num_frames == 0 {
        return Err(GeometryError::EmptyVideo);
    }
    Ok((0..num_frames)
        .map(|j| FramePair {
            anchor_index: 0,
            other_index: j,
        })
        .collect())
}

/// What a pair predictor returns for `(Iᵢ, Iⱼ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairFormulation {
    /// Both pointmaps at time `j`: `ⁱXⁱⱼ, ⁱXʲⱼ` (tracking + reconstruction).
    SharedTime,
    /// Static-scene two-view reconstruction: `ⁱXⁱᵢ, ⁱXʲᵢ`.
    FrozenTime,
    /// Each frame at its own time: `ⁱXⁱᵢ, ⁱXʲⱼ` (no temporal correspondence).
    OwnTime,
}

impl PairFormulation {
    pub fn output_tags(&self, pair: FramePair) -> [FrameTag; 2] {
        let (i, j) = (pair.anchor_index, pair.other_index);
        let tag = |b, t| FrameTag {
            coord_frame: i,
            content_frame: b,
            time: t,
        };
        match self {
            Self::SharedTime => [tag(i, j), tag(j, j)],
            Self::FrozenTime => [tag(i, i), tag(j, i)],
            Self::OwnTime => [tag(i, i), tag(j, j)],
        }
    }
}

/// Anything that maps an image pair to `(tracking, reconstruction)` pointmaps.
pub trait PairPredictor {
    fn predict(&self, pair: FramePair) -> Result<(Pointmap, Pointmap), GeometryError>;
}

/// Runs a predictor over a video chained to the first frame.
pub fn predict_video<P: PairPredictor + ?Sized>(
    predictor: &P,
    num_frames: usize,
) -> Result<(Vec<Pointmap>, Vec<Pointmap>), GeometryError> {
    let pairs = build_video_pairs(num_frames)?;
    let mut tracking = Vec::with_capacity(pairs.len());
    let mut recon = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let (t, r) = predictor.predict(pair)?;
        let expected = PairFormulation::SharedTime.output_tags(pair);
        for (pm, tag) in [(&t, expected[0]), (&r, expected[1])] {
            if pm.tag != tag {
                return Err(GeometryError::TagMismatch {
                    found: pm.tag,
                    expected: "shared-time pair output",
                });
            }
        }
        tracking.push(t);
        recon.push(r);
    }
    Ok((tracking, recon))
}

/// `N` points × `T` frames of `D`-dimensional positions with per-entry
/// visibility and per-point dynamic labels. Storage is point-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet<const D: usize> {
    num_points: usize,
    num_frames: usize,
    positions: Vec<SVector<f64, D>>,
    visible: Vec<bool>,
    pub dynamic: Vec<bool>,
}

pub type Tracks2 = TrackSet<2>;
pub type Tracks3 = TrackSet<3>;

impl<const D: usize> TrackSet<D> {
    pub fn new(num_points: usize, num_frames: usize) -> Self {
        Self {
            num_points,
            num_frames,
            positions: vec![SVector::zeros(); num_points * num_frames],
            visible: vec![false; num_points * num_frames],
            dynamic: vec![false; num_points],
        }
    }

    pub fn num_points(&self) -> usize {
        self.num_points
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    fn idx(&self, n: usize, t: usize) -> usize {
        debug_assert!(n < self.num_points && t < self.num_frames);
        n * self.num_frames + t
    }

    pub fn position(&self, n: usize, t: usize) -> SVector<f64, D> {
        self.positions[self.idx(n, t)]
    }

    pub fn is_visible(&self, n: usize, t: usize) -> bool {
        self.visible[self.idx(n, t)]
    }

    pub fn set(&mut self, n: usize, t: usize, p: SVector<f64, D>, visible: bool) {
        let i = self.idx(n, t);
        self.positions[i] = p;
        self.visible[i] = visible;
    }

    pub fn set_visible(&mut self, n: usize, t: usize, visible: bool) {
        let i = self.idx(n, t);
        self.visible[i] = visible;
    }

    /// Keeps the listed points (in the given order), all frames.
    pub fn select_points(&self, indices: &[usize]) -> Self {
        let mut out = Self::new(indices.len(), self.num_frames);
        for (k, &n) in indices.iter().enumerate() {
            for t in 0..self.num_frames {
                out.set(k, t, self.position(n, t), self.is_visible(n, t));
            }
            out.dynamic[k] = self.dynamic[n];
        }
        out
    }

    /// Keeps the first `frames` frames.
    pub fn truncate_frames(&self, frames: usize) -> Self {
        let frames = frames.min(self.num_frames);
        let mut out = Self::new(self.num_points, frames);
        for n in 0..self.num_points {
            for t in 0..frames {
                out.set(n, t, self.position(n, t), self.is_visible(n, t));
            }
        }
        out.dynamic = self.dynamic.clone();
        out
    }
}

/// Reads each query pixel across the tracking pointmaps `ᵃXᵃ₀ … ᵃXᵃₜ`,
/// giving world-frame 3D trajectories.
pub fn assemble_trajectories(
    tracking_pointmaps: &[Pointmap],
    queries: &[Pixel],
) -> Result<Tracks3, GeometryError> {
    let Some(first) = tracking_pointmaps.first() else {
        return Err(GeometryError::EmptyVideo);
    };
    let anchor = first.tag.coord_frame;
    for pm in tracking_pointmaps {
        pm.ensure_tracking(anchor)?;
        if !pm.same_shape(first) {
            return Err(GeometryError::DimensionMismatch);
        }
    }
    let grid = first.grid();
    let indices = queries
        .iter()
        .map(|&q| grid.index_of(q))
        .collect::<Result<Vec<_>, _>>()?;
    let mut tracks = Tracks3::new(queries.len(), tracking_pointmaps.len());
    for (n, &idx) in indices.iter().enumerate() {
        for (t, pm) in tracking_pointmaps.iter().enumerate() {
            tracks.set(n, t, pm.points()[idx], pm.is_valid(idx));
        }
    }
    Ok(tracks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn project_examples() {
        let k = Intrinsics::new(1.0, 0.0, 0.0).unwrap();
        let p = project(&k, &PoseSE3::identity(), &Vec3::new(2.0, 4.0, 2.0)).unwrap();
        assert_eq!(p, Vec2::new(1.0, 2.0));

        let k = Intrinsics::new(100.0, 50.0, 50.0).unwrap();
        let p = project(&k, &PoseSE3::identity(), &Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(p, Vec2::new(50.0, 50.0));

        let k = Intrinsics::new(500.0, 320.0, 240.0).unwrap();
        let pose = PoseSE3::from_translation(Vec3::new(0.0, 0.0, 1.0));
        let p = project(&k, &pose, &Vec3::new(0.1, -0.2, 1.0)).unwrap();
        assert_relative_eq!(p, Vec2::new(345.0, 190.0), epsilon = 1e-12);
    }

    #[test]
    fn project_rejects_points_behind_camera() {
        let k = Intrinsics::new(1.0, 0.0, 0.0).unwrap();
        for z in [0.0, -1.0, 1e-13] {
            assert!(matches!(
                project(&k, &PoseSE3::identity(), &Vec3::new(0.0, 0.0, z)),
                Err(GeometryError::NonPositiveDepth { .. })
            ));
        }
    }

    fn single_point_map(p: Vec3) -> Pointmap {
        Pointmap::new(1, 1, vec![p], vec![true], FrameTag::tracking(0, 0)).unwrap()
    }

    #[test]
    fn transform_examples() {
        let pm = single_point_map(Vec3::new(0.3, -0.1, 2.0));
        assert_eq!(transform_points(&PoseSE3::identity(), &pm, 0), pm);

        let pm = single_point_map(Vec3::zeros());
        let moved = transform_points(&PoseSE3::from_translation(Vec3::x()), &pm, 3);
        assert_eq!(moved.points()[0], Vec3::x());
        assert_eq!(moved.tag.coord_frame, 3);
        assert_eq!(moved.valid(), pm.valid());

        let rz = PoseSE3::from_axis_angle(Vec3::z() * std::f64::consts::FRAC_PI_2, Vec3::zeros());
        let out = transform_points(&rz, &single_point_map(Vec3::x()), 0);
        assert_relative_eq!(out.points()[0], Vec3::y(), epsilon = 1e-12);
    }

    #[test]
    fn invalid_points_are_zeroed_and_untouched() {
        let pm = Pointmap::new(
            2,
            1,
            vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(f64::NAN, 0.0, 0.0)],
            vec![true, false],
            FrameTag::tracking(0, 0),
        )
        .unwrap();
        assert_eq!(pm.points()[1], Vec3::zeros());
        let moved = transform_points(&PoseSE3::from_translation(Vec3::x()), &pm, 0);
        assert_eq!(moved.points()[1], Vec3::zeros());
        assert!(Pointmap::new(1, 1, vec![Vec3::new(f64::INFINITY, 0.0, 0.0)], vec![true], FrameTag::tracking(0, 0)).is_err());
        assert!(matches!(
            Pointmap::new(2, 2, vec![Vec3::zeros(); 3], vec![true; 4], FrameTag::tracking(0, 0)),
            Err(GeometryError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn video_pairs() {
        assert_eq!(build_video_pairs(0), Err(GeometryError::EmptyVideo));
        let p = build_video_pairs(1).unwrap();
        assert_eq!(p, vec![FramePair { anchor_index: 0, other_index: 0 }]);
        let p = build_video_pairs(3).unwrap();
        assert_eq!(p.iter().map(|p| (p.anchor_index, p.other_index)).collect::<Vec<_>>(), vec![(0, 0), (0, 1), (0, 2)]);
        let p = build_video_pairs(64).unwrap();
        assert_eq!(p.len(), 64);
        assert!(p.iter().all(|p| p.anchor_index == 0));
    }

    #[test]
    fn pair_formulations_tag_outputs() {
        let pair = FramePair { anchor_index: 0, other_index: 5 };
        let [t, r] = PairFormulation::SharedTime.output_tags(pair);
        assert!(t.is_tracking() && t.time == 5);
        assert!(r.is_reconstruction() && r.content_frame == 5);
        let [a, b] = PairFormulation::FrozenTime.output_tags(pair);
        assert_eq!((a.time, b.time), (0, 0));
        let [a, b] = PairFormulation::OwnTime.output_tags(pair);
        assert_eq!((a.time, b.time), (0, 5));
        // With i = j all three formulations coincide.
        let same = FramePair { anchor_index: 0, other_index: 0 };
        assert_eq!(PairFormulation::SharedTime.output_tags(same), PairFormulation::FrozenTime.output_tags(same));
        assert_eq!(PairFormulation::SharedTime.output_tags(same), PairFormulation::OwnTime.output_tags(same));
    }

    #[test]
    fn tag_contracts_are_checked() {
        let mut pm = single_point_map(Vec3::zeros());
        pm.tag = FrameTag::reconstruction(0, 2);
        assert!(pm.ensure_tracking(0).is_err());
        assert!(pm.ensure_reconstruction().is_ok());
        pm.tag = FrameTag::tracking(0, 2);
        assert!(pm.ensure_reconstruction().is_err());
        assert!(pm.ensure_tracking(1).is_err());
    }

    #[test]
    fn trajectories_from_static_and_single_frame() {
        let pm = single_point_map(Vec3::new(0.1, 0.2, 3.0));
        let frames: Vec<Pointmap> = (0..4)
            .map(|t| {
                let mut p = pm.clone();
                p.tag = FrameTag::tracking(0, t);
                p
            })
            .collect();
        let tr = assemble_trajectories(&frames, &[Pixel::new(0, 0)]).unwrap();
        for t in 0..4 {
            assert_eq!(tr.position(0, t), pm.points()[0]);
            assert!(tr.is_visible(0, t));
        }
        let tr = assemble_trajectories(&frames[..1], &[Pixel::new(0, 0)]).unwrap();
        assert_eq!(tr.num_frames(), 1);
        assert!(matches!(
            assemble_trajectories(&frames, &[Pixel::new(1, 0)]),
            Err(GeometryError::QueryOutOfBounds { .. })
        ));
    }

    #[test]
    fn pixel_grid_convention() {
        let g = PixelGrid::new(4, 3);
        assert_eq!(g.coordinate(Pixel::new(2, 1)), Vec2::new(1.5, 2.5));
        assert_eq!(g.pixel_at(Vec2::new(1.99, 2.0)), Some(Pixel::new(2, 1)));
        assert_eq!(g.pixel_at(Vec2::new(4.0, 0.0)), None);
        assert_eq!(g.pixel_at(Vec2::new(-0.1, 0.0)), None);
        assert_eq!(g.center(), Vec2::new(2.0, 1.5));
    }

    fn arb_pose() -> impl Strategy<Value = PoseSE3> {
        (prop::array::uniform3(-2.0..2.0f64), prop::array::uniform3(-3.0..3.0f64))
            .prop_map(|(w, t)| PoseSE3::from_axis_angle(Vec3::from(w), Vec3::from(t)))
    }

    proptest! {
        #[test]
        fn project_backproject_identity(
            f in 10.0..2000.0f64, cx in -100.0..800.0f64, cy in -100.0..800.0f64,
            u in -500.0..1500.0f64, v in -500.0..1500.0f64, d in 0.01..100.0f64,
        ) {
            let k = Intrinsics::new(f, cx, cy).unwrap();
            let p = Vec2::new(u, v);
            let back = k.project(&k.backproject(&p, d)).unwrap();
            prop_assert!((back - p).norm() < 1e-9);
        }

        #[test]
        fn transforms_compose(p1 in arb_pose(), p2 in arb_pose(), x in prop::array::uniform3(-5.0..5.0f64)) {
            let pm = single_point_map(Vec3::from(x));
            let twice = transform_points(&p2, &transform_points(&p1, &pm, 0), 0);
            let once = transform_points(&p2.compose(&p1), &pm, 0);
            prop_assert!((twice.points()[0] - once.points()[0]).norm() < 1e-9);
        }

        #[test]
        fn rotations_stay_valid(p in arb_pose(), xi in prop::array::uniform6(-0.5..0.5f64)) {
            let updated = p.left_update(&Twist::from_row_slice(&xi));
            prop_assert!(PoseSE3::new(*updated.rotation(), *updated.translation()).is_ok());
        }

        #[test]
        fn video_pairs_total(n in 1usize..500) {
            let pairs = build_video_pairs(n).unwrap();
            prop_assert_eq!(pairs.len(), n);
            prop_assert_eq!(pairs, build_video_pairs(n).unwrap());
        }
    }
}
