use super::CameraError;
use crate::geometry::{Intrinsics, PixelGrid, Pointmap, Vec2, MIN_DEPTH};

pub const DEFAULT_WEISZFELD_ITERATIONS: usize = 10;
const MIN_POINTS: usize = 10;
const RESIDUAL_FLOOR: f64 = 1e-8;

/// Robust (L1) focal length with the principal point fixed at the image
/// center.
///
/// Minimizes `Σ ‖uₙ − f·qₙ‖` where `uₙ` is the pixel relative to the center and
/// `qₙ = (x/z, y/z)`, by iteratively reweighted least squares seeded with the
/// plain least-squares focal.
pub fn estimate_focal_weiszfeld(
    pm: &Pointmap,
    grid: PixelGrid,
    iterations: usize,
) -> Result<Intrinsics, CameraError> {
    let center = grid.center();
    let mut pairs: Vec<(Vec2, Vec2)> = Vec::with_capacity(pm.num_valid());
    for i in pm.valid_indices() {
        let p = pm.points()[i];
        if p.z > MIN_DEPTH {
            let u = grid.coordinate_of_index(i) - center;
            pairs.push((u, Vec2::new(p.x / p.z, p.y / p.z)));
        }
    }
    if pairs.len() < MIN_POINTS {
        return Err(CameraError::InsufficientValidPoints {
            needed: MIN_POINTS,
            found: pairs.len(),
        });
    }

    let weighted = |w: &dyn Fn(&Vec2, &Vec2) -> f64| {
        let (mut num, mut den) = (0.0, 0.0);
        for (u, q) in &pairs {
            let wn = w(u, q);
            num += wn * u.dot(q);
            den += wn * q.norm_squared();
        }
        (num, den)
    };

    let (num, den) = weighted(&|_, _| 1.0);
    if den < 1e-12 {
        return Err(CameraError::DegenerateGeometry("all points lie on the optical axis"));
    }
    let mut focal = num / den;
    for _ in 0..iterations {
        let f = focal;
        let (num, den) = weighted(&|u, q| 1.0 / (u - q * f).norm().max(RESIDUAL_FLOOR));
        if den <= 0.0 {
            break;
        }
        focal = num / den;
    }
    Ok(Intrinsics::centered(focal, grid)?)
}
