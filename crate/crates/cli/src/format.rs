//! On-disk sequence format "worldtrack-seq/1": a JSON manifest plus one raw
//! little-endian array file per role. Invalid pointmap entries and depths are
//! stored as NaN.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use worldtrack::geometry::{
    FrameTag, GeometryError, Intrinsics, Pixel, PixelGrid, Pointmap, PoseSE3, Tracks2, Tracks3, Vec2, Vec3,
};
use worldtrack::losses::{DepthSupervision, LossError, TrackSupervision};
use worldtrack::oracle::RenderedSequence;

pub const FORMAT_VERSION: &str = "worldtrack-seq/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: invalid manifest: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("unsupported format version {0:?}")]
    Version(String),
    #[error("array {role}: expected {expected} bytes, found {found}")]
    Length { role: String, expected: usize, found: usize },
    #[error("array {role}: unexpected shape {shape:?} or element type")]
    Shape { role: String, shape: Vec<usize> },
    #[error("sequence has no {0} array")]
    MissingRole(&'static str),
    #[error("array {role}: {reason}")]
    Content { role: &'static str, reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32le")]
    F32,
    #[serde(rename = "u8")]
    U8,
}

impl Dtype {
    pub fn size(&self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub path: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub version: String,
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub arrays: BTreeMap<String, ArrayEntry>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

pub mod role {
    pub const TRACKING: &str = "tracking_pointmaps";
    pub const RECON: &str = "recon_pointmaps";
    pub const DEPTH: &str = "depth";
    pub const TRACKS2D: &str = "tracks2d";
    pub const TRACKS3D: &str = "tracks3d";
    pub const VISIBILITY: &str = "visibility";
    pub const DYNAMIC: &str = "dynamic_mask";
    pub const INTRINSICS: &str = "intrinsics";
    pub const CAMERAS: &str = "cameras";
}

/// Point tracks sharing one visibility mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceTracks {
    pub tracks2d: Tracks2,
    pub tracks3d: Tracks3,
    pub dynamic_mask: Vec<bool>,
}

/// In-memory form of a sequence directory. Every role is optional.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub grid: PixelGrid,
    pub num_frames: usize,
    pub tracking: Option<Vec<Pointmap>>,
    pub recon: Option<Vec<Pointmap>>,
    /// NaN where no depth is available.
    pub depth: Option<Vec<Vec<f64>>>,
    pub tracks: Option<SequenceTracks>,
    pub intrinsics: Option<Intrinsics>,
    /// World-to-camera `[R | T]` rows as stored.
    pub cameras: Option<Vec<[[f64; 4]; 3]>>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Sequence {
    pub fn from_rendered(seq: &RenderedSequence, meta: BTreeMap<String, serde_json::Value>) -> Self {
        let depth = seq
            .depth
            .iter()
            .zip(&seq.recon_pointmaps)
            .map(|(d, pm)| d.iter().zip(pm.valid()).map(|(z, v)| if *v { *z } else { f64::NAN }).collect())
            .collect();
        let mut tracks3d = seq.tracks3d_world.clone();
        for n in 0..tracks3d.num_points() {
            for t in 0..tracks3d.num_frames() {
                tracks3d.set_visible(n, t, seq.tracks2d.is_visible(n, t));
            }
        }
        Self {
            grid: seq.grid,
            num_frames: seq.num_frames(),
            tracking: Some(seq.tracking_pointmaps.clone()),
            recon: Some(seq.recon_pointmaps.clone()),
            depth: Some(depth),
            tracks: Some(SequenceTracks {
                tracks2d: seq.tracks2d.clone(),
                tracks3d,
                dynamic_mask: seq.dynamic_mask.clone(),
            }),
            intrinsics: Some(seq.intrinsics),
            cameras: Some(seq.cameras.iter().map(PoseSE3::to_rows).collect()),
            meta,
        }
    }

    pub fn poses(&self) -> Result<Vec<PoseSE3>, FormatError> {
        let rows = self.cameras.as_ref().ok_or(FormatError::MissingRole(role::CAMERAS))?;
        Ok(rows
            .iter()
            .map(|r| {
                let m = nalgebra::Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]);
                PoseSE3::from_nearly_orthonormal(&m, Vec3::new(r[0][3], r[1][3], r[2][3]))
            })
            .collect())
    }

    pub fn tracking(&self) -> Result<&[Pointmap], FormatError> {
        self.tracking.as_deref().ok_or(FormatError::MissingRole(role::TRACKING))
    }

    pub fn recon(&self) -> Result<&[Pointmap], FormatError> {
        self.recon.as_deref().ok_or(FormatError::MissingRole(role::RECON))
    }

    pub fn depth(&self) -> Result<&[Vec<f64>], FormatError> {
        self.depth.as_deref().ok_or(FormatError::MissingRole(role::DEPTH))
    }

    pub fn tracks(&self) -> Result<&SequenceTracks, FormatError> {
        self.tracks.as_ref().ok_or(FormatError::MissingRole(role::TRACKS2D))
    }

    /// Query pixels, read from the frame-0 track positions.
    pub fn queries(&self) -> Result<Vec<Pixel>, FormatError> {
        let t = &self.tracks()?.tracks2d;
        (0..t.num_points())
            .map(|n| {
                self.grid.pixel_at(t.position(n, 0)).ok_or(FormatError::Content {
                    role: role::TRACKS2D,
                    reason: format!("query {n} lies outside the image"),
                })
            })
            .collect()
    }

    pub fn track_supervision(&self) -> Result<TrackSupervision, FormatError> {
        Ok(TrackSupervision::new(self.tracks()?.tracks2d.clone(), self.queries()?, self.grid)?)
    }

    pub fn depth_supervision(&self) -> Result<DepthSupervision, FormatError> {
        let depth = self.depth()?;
        let valid = depth.iter().map(|d| d.iter().map(|z| z.is_finite()).collect()).collect();
        let values = depth
            .iter()
            .map(|d| d.iter().map(|z| if z.is_finite() { *z } else { 0.0 }).collect())
            .collect();
        Ok(DepthSupervision::new(self.grid, values, valid)?)
    }
}

fn push_f32(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&(v as f32).to_le_bytes());
}

fn encode_pointmaps(pms: &[Pointmap]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(pms.iter().map(|p| p.len() * 12).sum());
    for pm in pms {
        for (p, v) in pm.points().iter().zip(pm.valid()) {
            for c in p.iter() {
                push_f32(&mut buf, if *v { *c } else { f64::NAN });
            }
        }
    }
    buf
}

fn track_positions<const D: usize>(t: &worldtrack::geometry::TrackSet<D>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(t.num_points() * t.num_frames() * D * 4);
    for n in 0..t.num_points() {
        for j in 0..t.num_frames() {
            for c in t.position(n, j).iter() {
                push_f32(&mut buf, *c);
            }
        }
    }
    buf
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| FormatError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

/// Writes the sequence into `dir` and returns the manifest path.
pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<PathBuf, FormatError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (w, h, t) = (seq.grid.width, seq.grid.height, seq.num_frames);
    let mut arrays: Vec<(&str, Dtype, Vec<usize>, Vec<u8>)> = Vec::new();
    if let Some(pms) = &seq.tracking {
        arrays.push((role::TRACKING, Dtype::F32, vec![t, h, w, 3], encode_pointmaps(pms)));
    }
    if let Some(pms) = &seq.recon {
        arrays.push((role::RECON, Dtype::F32, vec![t, h, w, 3], encode_pointmaps(pms)));
    }
    if let Some(depth) = &seq.depth {
        let mut buf = Vec::with_capacity(t * w * h * 4);
        depth.iter().flatten().for_each(|z| push_f32(&mut buf, *z));
        arrays.push((role::DEPTH, Dtype::F32, vec![t, h, w], buf));
    }
    if let Some(tr) = &seq.tracks {
        let n = tr.tracks2d.num_points();
        arrays.push((role::TRACKS2D, Dtype::F32, vec![n, t, 2], track_positions(&tr.tracks2d)));
        arrays.push((role::TRACKS3D, Dtype::F32, vec![n, t, 3], track_positions(&tr.tracks3d)));
        let vis = (0..n)
            .flat_map(|i| (0..t).map(move |j| (i, j)))
            .map(|(i, j)| tr.tracks2d.is_visible(i, j) as u8)
            .collect();
        arrays.push((role::VISIBILITY, Dtype::U8, vec![n, t], vis));
        arrays.push((role::DYNAMIC, Dtype::U8, vec![n], tr.dynamic_mask.iter().map(|d| *d as u8).collect()));
    }
    if let Some(k) = &seq.intrinsics {
        let mut buf = Vec::new();
        [k.focal, k.cx, k.cy].iter().for_each(|v| push_f32(&mut buf, *v));
        arrays.push((role::INTRINSICS, Dtype::F32, vec![3], buf));
    }
    if let Some(cams) = &seq.cameras {
        let mut buf = Vec::new();
        cams.iter().flatten().flatten().for_each(|v| push_f32(&mut buf, *v));
        arrays.push((role::CAMERAS, Dtype::F32, vec![cams.len(), 3, 4], buf));
    }

    let mut manifest = SequenceManifest {
        version: FORMAT_VERSION.to_string(),
        width: w,
        height: h,
        num_frames: t,
        arrays: BTreeMap::new(),
        meta: seq.meta.clone(),
    };
    for (name, dtype, shape, bytes) in arrays {
        let file = format!("{name}.bin");
        write_atomic(&dir.join(&file), &bytes)?;
        manifest.arrays.insert(name.to_string(), ArrayEntry { path: file, dtype, shape });
    }
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    write_atomic(&path, &json)?;
    Ok(path)
}

pub fn read_manifest(dir: &Path) -> Result<SequenceManifest, FormatError> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let manifest: SequenceManifest =
        serde_json::from_slice(&bytes).map_err(|source| FormatError::Json { path: path.clone(), source })?;
    if manifest.version != FORMAT_VERSION {
        return Err(FormatError::Version(manifest.version));
    }
    Ok(manifest)
}

struct Loader<'a> {
    dir: &'a Path,
    manifest: &'a SequenceManifest,
}

impl Loader<'_> {
    /// Raw bytes of a role after checking its shape and length.
    fn bytes(&self, name: &str, dtype: Dtype, shape: &[usize]) -> Result<Option<Vec<u8>>, FormatError> {
        let Some(entry) = self.manifest.arrays.get(name) else {
            return Ok(None);
        };
        if entry.dtype != dtype || entry.shape != shape {
            return Err(FormatError::Shape { role: name.to_string(), shape: entry.shape.clone() });
        }
        let path = self.dir.join(&entry.path);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let expected = shape.iter().product::<usize>() * dtype.size();
        if bytes.len() != expected {
            return Err(FormatError::Length { role: name.to_string(), expected, found: bytes.len() });
        }
        Ok(Some(bytes))
    }

    fn floats(&self, name: &str, shape: &[usize]) -> Result<Option<Vec<f64>>, FormatError> {
        Ok(self.bytes(name, Dtype::F32, shape)?.map(|b| {
            b.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()
        }))
    }

    fn first_dim(&self, name: &str) -> Option<usize> {
        self.manifest.arrays.get(name).and_then(|e| e.shape.first().copied())
    }
}

fn decode_pointmaps(v: &[f64], grid: PixelGrid, frames: usize, tag: impl Fn(usize) -> FrameTag) -> Result<Vec<Pointmap>, FormatError> {
    let per = grid.len() * 3;
    (0..frames)
        .map(|j| {
            let chunk = &v[j * per..(j + 1) * per];
            let points: Vec<Vec3> = chunk.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
            let valid = points.iter().map(|p| p.iter().all(|c| c.is_finite())).collect();
            Ok(Pointmap::new(grid.width, grid.height, points, valid, tag(j))?)
        })
        .collect()
}

/// Loads a sequence directory. Tracking pointmaps are tagged `(0, 0, j)` and
/// reconstruction pointmaps `(0, j, j)`.
pub fn read_sequence(dir: &Path) -> Result<Sequence, FormatError> {
    let manifest = read_manifest(dir)?;
    let ld = Loader { dir, manifest: &manifest };
    let (w, h, t) = (manifest.width, manifest.height, manifest.num_frames);
    let grid = PixelGrid::new(w, h);

    let tracking = match ld.floats(role::TRACKING, &[t, h, w, 3])? {
        Some(v) => Some(decode_pointmaps(&v, grid, t, |j| FrameTag::tracking(0, j))?),
        None => None,
    };
    let recon = match ld.floats(role::RECON, &[t, h, w, 3])? {
        Some(v) => Some(decode_pointmaps(&v, grid, t, |j| FrameTag::reconstruction(0, j))?),
        None => None,
    };
    let depth = ld
        .floats(role::DEPTH, &[t, h, w])?
        .map(|v| v.chunks_exact(w * h).map(|c| c.to_vec()).collect());

    let tracks = match ld.first_dim(role::TRACKS2D) {
        None => None,
        Some(n) => {
            let p2 = ld.floats(role::TRACKS2D, &[n, t, 2])?.expect("present");
            let p3 = ld.floats(role::TRACKS3D, &[n, t, 3])?.ok_or(FormatError::MissingRole(role::TRACKS3D))?;
            let vis = ld.bytes(role::VISIBILITY, Dtype::U8, &[n, t])?.ok_or(FormatError::MissingRole(role::VISIBILITY))?;
            let dynamic: Vec<bool> = ld
                .bytes(role::DYNAMIC, Dtype::U8, &[n])?
                .ok_or(FormatError::MissingRole(role::DYNAMIC))?
                .iter()
                .map(|b| *b != 0)
                .collect();
            let mut tracks2d = Tracks2::new(n, t);
            let mut tracks3d = Tracks3::new(n, t);
            for i in 0..n {
                for j in 0..t {
                    let k = i * t + j;
                    let v = vis[k] != 0;
                    tracks2d.set(i, j, Vec2::new(p2[2 * k], p2[2 * k + 1]), v);
                    tracks3d.set(i, j, Vec3::new(p3[3 * k], p3[3 * k + 1], p3[3 * k + 2]), v);
                }
            }
            tracks2d.dynamic = dynamic.clone();
            tracks3d.dynamic = dynamic.clone();
            Some(SequenceTracks { tracks2d, tracks3d, dynamic_mask: dynamic })
        }
    };
    let intrinsics = match ld.floats(role::INTRINSICS, &[3])? {
        Some(v) => Some(Intrinsics::new(v[0], v[1], v[2])?),
        None => None,
    };
    let cameras = match ld.first_dim(role::CAMERAS) {
        None => None,
        Some(m) => {
            let v = ld.floats(role::CAMERAS, &[m, 3, 4])?.expect("present");
            Some(
                v.chunks_exact(12)
                    .map(|c| [[c[0], c[1], c[2], c[3]], [c[4], c[5], c[6], c[7]], [c[8], c[9], c[10], c[11]]])
                    .collect(),
            )
        }
    };
    Ok(Sequence {
        grid,
        num_frames: t,
        tracking,
        recon,
        depth,
        tracks,
        intrinsics,
        cameras,
        meta: manifest.meta.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use worldtrack::oracle::{generate_scene_with, render, Preset, SceneOptions};

    fn sample() -> Sequence {
        let opts = SceneOptions { width: 16, height: 12, num_frames: 4, ..Default::default() };
        let seq = render(&generate_scene_with(Preset::DynCamDynScene, 1, &opts)).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("preset".to_string(), serde_json::json!("dyn-cam-dyn-scene"));
        Sequence::from_rendered(&seq, meta)
    }

    fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect()
    }

    #[test]
    fn write_read_write_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        write_sequence(&a, &sample()).unwrap();
        let loaded = read_sequence(&a).unwrap();
        write_sequence(&b, &loaded).unwrap();
        assert_eq!(dir_bytes(&a), dir_bytes(&b));
    }

    #[test]
    fn load_restores_contents() {
        let tmp = tempfile::tempdir().unwrap();
        let seq = sample();
        write_sequence(tmp.path(), &seq).unwrap();
        let loaded = read_sequence(tmp.path()).unwrap();
        assert_eq!(loaded.grid, seq.grid);
        assert_eq!(loaded.queries().unwrap(), seq.queries().unwrap());
        let (r0, r1) = (seq.recon().unwrap(), loaded.recon().unwrap());
        for (a, b) in r0.iter().zip(r1) {
            assert_eq!(a.valid(), b.valid());
            for (p, q) in a.points().iter().zip(b.points()) {
                assert!((p - q).norm() < 1e-5);
            }
        }
        assert_eq!(r1[2].tag, FrameTag::reconstruction(0, 2));
        assert_eq!(loaded.tracking().unwrap()[3].tag, FrameTag::tracking(0, 3));
        assert_eq!(loaded.tracks().unwrap().dynamic_mask, seq.tracks().unwrap().dynamic_mask);
        let d = loaded.depth_supervision().unwrap();
        assert_eq!(d.num_frames(), 4);
        let cams = loaded.poses().unwrap();
        for (a, b) in cams.iter().zip(&seq.poses().unwrap()) {
            assert!(a.rotation_distance(b) < 1e-6 && a.translation_distance(b) < 1e-5);
        }
        assert_eq!(loaded.meta, seq.meta);
    }

    #[test]
    fn damaged_inputs_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        write_sequence(tmp.path(), &sample()).unwrap();
        let depth = tmp.path().join("depth.bin");
        let mut bytes = fs::read(&depth).unwrap();
        bytes.pop();
        fs::write(&depth, bytes).unwrap();
        assert!(matches!(read_sequence(tmp.path()), Err(FormatError::Length { .. })));

        let path = tmp.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace(FORMAT_VERSION, "worldtrack-seq/9");
        fs::write(&path, text).unwrap();
        assert!(matches!(read_sequence(tmp.path()), Err(FormatError::Version(_))));
        assert!(matches!(read_sequence(&tmp.path().join("missing")), Err(FormatError::Io { .. })));
    }

    #[test]
    fn roles_are_optional() {
        let tmp = tempfile::tempdir().unwrap();
        let mut seq = sample();
        seq.cameras = None;
        seq.tracks = None;
        write_sequence(tmp.path(), &seq).unwrap();
        let loaded = read_sequence(tmp.path()).unwrap();
        assert!(loaded.cameras.is_none());
        assert!(matches!(loaded.tracks(), Err(FormatError::MissingRole(_))));
    }
}
