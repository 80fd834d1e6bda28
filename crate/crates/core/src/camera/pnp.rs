use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::refine::{normal_equations, solve_damped};
use super::{rms_reprojection_error, CameraError, Correspondences2D3D, PoseEstimate, RansacConfig};
use crate::geometry::{Intrinsics, PoseSE3, Vec2, Vec3, MIN_DEPTH};
use crate::lie::project_to_so3;

/// Variance ratio below which a sample is treated as coplanar.
const PLANAR_RATIO: f64 = 1e-6;
const POLISH_ITERATIONS: usize = 50;

/// Pose from a handful of exact correspondences given in normalized image
/// coordinates. Coplanar samples go through a homography, everything else
/// through the linear 3×4 projection estimate. Returns `None` on degenerate
/// samples or when most points would land behind the camera.
pub fn minimal_pose(normalized: &[Vec2], points: &[Vec3]) -> Option<PoseSE3> {
    let n = points.len();
    if n < 4 || normalized.len() != n {
        return None;
    }
    let mean = points.iter().sum::<Vec3>() / n as f64;
    let cov = points
        .iter()
        .map(|p| (p - mean) * (p - mean).transpose())
        .sum::<Matrix3<f64>>()
        / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let largest = eig.eigenvalues[order[0]];
    if !(largest > 0.0) {
        return None;
    }
    let pose = if eig.eigenvalues[order[2]] / largest < PLANAR_RATIO {
        let e1 = eig.eigenvectors.column(order[0]).into_owned();
        let e2 = eig.eigenvectors.column(order[1]).into_owned();
        planar_pose(normalized, points, &mean, &e1, &e2)?
    } else {
        if n < 6 {
            return None;
        }
        dlt_pose(normalized, points, &mean)?
    };
    let in_front = points.iter().filter(|p| pose.transform(p).z > MIN_DEPTH).count();
    (2 * in_front > n).then_some(pose)
}

fn null_vector(a: &DMatrix<f64>) -> Option<nalgebra::DVector<f64>> {
    // Square up so the thin SVD always exposes the full right null space.
    let ata = a.transpose() * a;
    let svd = ata.svd(false, true);
    let vt = svd.v_t?;
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    Some(vt.row(k).transpose())
}

fn dlt_pose(normalized: &[Vec2], points: &[Vec3], mean: &Vec3) -> Option<PoseSE3> {
    let n = points.len();
    let scale = points.iter().map(|p| (p - mean).norm()).sum::<f64>() / n as f64 / 3f64.sqrt();
    if !(scale > 0.0) {
        return None;
    }
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (m, p)) in normalized.iter().zip(points).enumerate() {
        let q = (p - mean) / scale;
        let xh = [q.x, q.y, q.z, 1.0];
        for c in 0..4 {
            a[(2 * i, c)] = xh[c];
            a[(2 * i, 8 + c)] = -m.x * xh[c];
            a[(2 * i + 1, 4 + c)] = xh[c];
            a[(2 * i + 1, 8 + c)] = -m.y * xh[c];
        }
    }
    let v = null_vector(&a)?;
    let mut m3 = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
    let mut col = Vector3::new(v[3], v[7], v[11]);
    // Undo the point normalization: P' [(X−μ)/s; 1] = (M/s) X + (c − M μ / s).
    m3 /= scale;
    col -= m3 * mean;
    let det = m3.determinant();
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    if det < 0.0 {
        m3 = -m3;
        col = -col;
    }
    let r = project_to_so3(&m3);
    let lambda = (r.transpose() * m3).trace() / 3.0;
    if !(lambda > 0.0) {
        return None;
    }
    Some(PoseSE3::from_nearly_orthonormal(&r, col / lambda))
}

fn planar_pose(normalized: &[Vec2], points: &[Vec3], mean: &Vec3, e1: &Vec3, e2: &Vec3) -> Option<PoseSE3> {
    let n = points.len();
    let plane: Vec<Vec2> = points.iter().map(|p| Vec2::new((p - mean).dot(e1), (p - mean).dot(e2))).collect();
    let scale = plane.iter().map(|q| q.norm()).sum::<f64>() / n as f64 / 2f64.sqrt();
    if !(scale > 0.0) {
        return None;
    }
    let mut a = DMatrix::<f64>::zeros(2 * n, 9);
    for (i, (m, q)) in normalized.iter().zip(&plane).enumerate() {
        let xh = [q.x / scale, q.y / scale, 1.0];
        for c in 0..3 {
            a[(2 * i, c)] = xh[c];
            a[(2 * i, 6 + c)] = -m.x * xh[c];
            a[(2 * i + 1, 3 + c)] = xh[c];
            a[(2 * i + 1, 6 + c)] = -m.y * xh[c];
        }
    }
    let v = null_vector(&a)?;
    let h1 = Vector3::new(v[0], v[3], v[6]) / scale;
    let h2 = Vector3::new(v[1], v[4], v[7]) / scale;
    let h3 = Vector3::new(v[2], v[5], v[8]);
    let mut lambda = (h1.norm() + h2.norm()) / 2.0;
    if !(lambda > 0.0) {
        return None;
    }
    // The plane origin sits at camera position h3/λ and must be in front.
    if h3.z < 0.0 {
        lambda = -lambda;
    }
    let (r1, r2, t_origin) = (h1 / lambda, h2 / lambda, h3 / lambda);
    let q = project_to_so3(&Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]));
    let e = Matrix3::from_columns(&[*e1, *e2, e1.cross(e2)]);
    let r = q * e.transpose();
    Some(PoseSE3::from_nearly_orthonormal(&r, t_origin - r * mean))
}

/// Squared reprojection error, or `None` behind the camera.
fn reprojection_sq(pose: &PoseSE3, k: &Intrinsics, pixel: &Vec2, x: &Vec3) -> Option<f64> {
    k.project(&pose.transform(x)).ok().map(|p| (pixel - p).norm_squared())
}

fn score(pose: &PoseSE3, corr: &Correspondences2D3D, k: &Intrinsics, thr2: f64) -> (usize, f64) {
    let (mut count, mut cost) = (0usize, 0.0);
    for (px, x) in corr.pixels.iter().zip(&corr.points) {
        match reprojection_sq(pose, k, px, x) {
            Some(e) if e < thr2 => {
                count += 1;
                cost += e;
            }
            _ => cost += thr2,
        }
    }
    (count, cost)
}

fn inlier_mask(pose: &PoseSE3, corr: &Correspondences2D3D, k: &Intrinsics, thr2: f64) -> Vec<bool> {
    corr.pixels
        .iter()
        .zip(&corr.points)
        .map(|(px, x)| reprojection_sq(pose, k, px, x).is_some_and(|e| e < thr2))
        .collect()
}

fn required_iterations(inliers: usize, total: usize, sample: usize, confidence: f64) -> usize {
    let w = inliers as f64 / total as f64;
    let p_good = w.powi(sample as i32);
    if p_good >= 1.0 {
        return 1;
    }
    if p_good <= 0.0 {
        return usize::MAX;
    }
    let k = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if k.is_finite() {
        k.ceil().max(1.0) as usize
    } else {
        usize::MAX
    }
}

/// Robust pose from 2D–3D correspondences: seeded RANSAC over minimal
/// samples, then Levenberg-Marquardt polishing on the consensus set. The
/// result is detached (zero increment).
pub fn solve_pnp_ransac(
    corr: &Correspondences2D3D,
    k: &Intrinsics,
    cfg: &RansacConfig,
) -> Result<PoseEstimate, CameraError> {
    cfg.validate()?;
    let n = corr.len();
    if n < cfg.min_sample {
        return Err(CameraError::TooFewCorrespondences {
            needed: cfg.min_sample,
            found: n,
        });
    }
    let normalized: Vec<Vec2> = corr.pixels.iter().map(|p| k.normalize(p)).collect();
    let thr2 = cfg.inlier_threshold * cfg.inlier_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, f64, PoseSE3)> = None;
    let mut needed = cfg.max_iterations;
    let mut iteration = 0;
    let (mut sample_m, mut sample_x) = (Vec::with_capacity(cfg.min_sample), Vec::with_capacity(cfg.min_sample));
    while iteration < needed.min(cfg.max_iterations) {
        iteration += 1;
        sample_m.clear();
        sample_x.clear();
        for i in index::sample(&mut rng, n, cfg.min_sample) {
            sample_m.push(normalized[i]);
            sample_x.push(corr.points[i]);
        }
        let Some(pose) = minimal_pose(&sample_m, &sample_x) else {
            continue;
        };
        let (count, cost) = score(&pose, corr, k, thr2);
        let better = best.as_ref().is_none_or(|&(c, e, _)| count > c || (count == c && cost < e));
        if better {
            best = Some((count, cost, pose));
            needed = required_iterations(count, n, cfg.min_sample, cfg.confidence);
        }
    }
    let (count, _, pose) = best.unwrap_or((0, f64::INFINITY, PoseSE3::identity()));
    if count < cfg.min_sample {
        return Err(CameraError::NoConsensus {
            inliers: count,
            min_sample: cfg.min_sample,
        });
    }

    let mut mask = inlier_mask(&pose, corr, k, thr2);
    let mut pose = polish_pose(&pose, &corr.restrict(&mask)?, k);
    let refreshed = inlier_mask(&pose, corr, k, thr2);
    if refreshed.iter().filter(|&&b| b).count() >= cfg.min_sample {
        mask = refreshed;
        pose = polish_pose(&pose, &corr.restrict(&mask)?, k);
        mask = inlier_mask(&pose, corr, k, thr2);
    }
    let rms = rms_reprojection_error(&pose, corr, k, Some(&mask));
    Ok(PoseEstimate::detached(pose, mask, rms))
}

/// Levenberg-Marquardt on the weighted reprojection error, with the damping
/// scaled to the normal-equation trace. Never increases the cost.
pub fn polish_pose(init: &PoseSE3, corr: &Correspondences2D3D, k: &Intrinsics) -> PoseSE3 {
    let mut pose = *init;
    let mut ne = normal_equations(&pose, corr, k);
    let mut mu = 1e-6;
    for _ in 0..POLISH_ITERATIONS {
        if ne.cost == 0.0 {
            break;
        }
        let Ok((delta, _)) = solve_damped(&ne, mu) else {
            mu *= 10.0;
            if mu > 1e10 {
                break;
            }
            continue;
        };
        let candidate = pose.left_update(&delta);
        let next = normal_equations(&candidate, corr, k);
        if next.cost < ne.cost && next.used == ne.used {
            let gain = ne.cost - next.cost;
            pose = candidate;
            let converged = gain <= 1e-15 * ne.cost || delta.norm() < 1e-14;
            ne = next;
            mu = (mu * 0.1).max(1e-12);
            if converged {
                break;
            }
        } else {
            mu *= 10.0;
            if mu > 1e10 {
                break;
            }
        }
    }
    pose
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> (PoseSE3, Vec<Vec3>) {
        let pose = PoseSE3::from_axis_angle(
            Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
            Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
        );
        let inv = pose.inverse();
        let points = (0..n)
            .map(|_| {
                let cam = Vec3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0), rng.random_range(2.0..6.0));
                inv.transform(&cam)
            })
            .collect();
        (pose, points)
    }

    fn observe(k: &Intrinsics, pose: &PoseSE3, points: &[Vec3]) -> Vec<Vec2> {
        points.iter().map(|x| k.project(&pose.transform(x)).unwrap()).collect()
    }

    #[test]
    fn minimal_solvers_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Intrinsics::new(500.0, 320.0, 240.0).unwrap();
        for _ in 0..20 {
            let (pose, pts) = random_scene(&mut rng, 6);
            let m: Vec<Vec2> = observe(&k, &pose, &pts).iter().map(|p| k.normalize(p)).collect();
            let est = minimal_pose(&m, &pts).unwrap();
            assert!(est.rotation_distance(&pose) < 1e-8);
            assert!(est.translation_distance(&pose) < 1e-8);
        }
        // Coplanar points.
        for _ in 0..20 {
            let (pose, _) = random_scene(&mut rng, 0);
            let normal = Vec3::new(0.2, -0.1, 1.0).normalize();
            let inv = pose.inverse();
            let pts: Vec<Vec3> = (0..6)
                .map(|_| {
                    let mut p = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0);
                    p.z = 4.0 - (normal.x * p.x + normal.y * p.y) / normal.z;
                    inv.transform(&p)
                })
                .collect();
            let m: Vec<Vec2> = observe(&k, &pose, &pts).iter().map(|p| k.normalize(p)).collect();
            let est = minimal_pose(&m, &pts).unwrap();
            assert!(est.rotation_distance(&pose) < 1e-8);
            assert!(est.translation_distance(&pose) < 1e-8);
        }
    }

    #[test]
    fn identity_from_exact_grid() {
        let k = Intrinsics::new(500.0, 320.0, 240.0).unwrap();
        let mut points = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                for d in [2.0, 3.0, 5.0] {
                    points.push(Vec3::new(-0.6 + 0.4 * i as f64, -0.5 + 0.3 * j as f64, d));
                }
            }
        }
        let pixels = observe(&k, &PoseSE3::identity(), &points);
        let corr = Correspondences2D3D::new(pixels, points, None).unwrap();
        let est = solve_pnp_ransac(&corr, &k, &RansacConfig::default()).unwrap();
        assert!(est.pose.rotation_distance(&PoseSE3::identity()) < 1e-10);
        assert!(est.pose.translation().norm() < 1e-10);
        assert_eq!(est.inlier_count(), corr.len());
    }

    #[test]
    fn robust_to_gross_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = Intrinsics::new(500.0, 320.0, 240.0).unwrap();
        for _ in 0..10 {
            let (pose, pts) = random_scene(&mut rng, 200);
            let mut pixels = observe(&k, &pose, &pts);
            let noise = Normal::new(0.0, 0.3).unwrap();
            let mut outlier = vec![false; pixels.len()];
            for (i, p) in pixels.iter_mut().enumerate() {
                if i % 5 == 0 {
                    *p += Vec2::new(rng.random_range(40.0..120.0), rng.random_range(-120.0..-40.0));
                    outlier[i] = true;
                } else {
                    *p += Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                }
            }
            let corr = Correspondences2D3D::new(pixels, pts, None).unwrap();
            let est = solve_pnp_ransac(&corr, &k, &RansacConfig { seed: 5, ..Default::default() }).unwrap();
            assert!(est.pose.rotation_distance(&pose) < 5e-3, "{}", est.pose.rotation_distance(&pose));
            assert!(est.pose.translation_distance(&pose) < 2e-2);
            assert!(est.inliers.iter().zip(&outlier).all(|(&i, &o)| !(i && o)));
        }
    }

    #[test]
    fn ransac_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = Intrinsics::new(400.0, 100.0, 80.0).unwrap();
        let (pose, pts) = random_scene(&mut rng, 50);
        let mut pixels = observe(&k, &pose, &pts);
        for p in pixels.iter_mut().step_by(3) {
            *p += Vec2::new(30.0, 30.0);
        }
        let corr = Correspondences2D3D::new(pixels, pts, None).unwrap();
        let cfg = RansacConfig { seed: 9, ..Default::default() };
        assert_eq!(solve_pnp_ransac(&corr, &k, &cfg).unwrap(), solve_pnp_ransac(&corr, &k, &cfg).unwrap());
    }

    #[test]
    fn errors() {
        let k = Intrinsics::new(400.0, 100.0, 80.0).unwrap();
        let pts: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64 * 0.1, 0.2, 3.0)).collect();
        let px = observe(&k, &PoseSE3::identity(), &pts);
        let corr = Correspondences2D3D::new(px, pts, None).unwrap();
        assert!(matches!(
            solve_pnp_ransac(&corr, &k, &RansacConfig::default()),
            Err(CameraError::TooFewCorrespondences { needed: 6, found: 5 })
        ));
        assert!(matches!(
            Correspondences2D3D::new(vec![Vec2::zeros(); 3], vec![Vec3::zeros(); 3], None),
            Err(CameraError::TooFewCorrespondences { .. })
        ));
        assert!(matches!(
            Correspondences2D3D::new(vec![Vec2::zeros(); 4], vec![Vec3::zeros(); 5], None),
            Err(CameraError::LengthMismatch)
        ));

        // Pixels unrelated to the points: no pose explains six of them.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, pts) = random_scene(&mut rng, 40);
        let px: Vec<Vec2> = (0..40)
            .map(|_| Vec2::new(rng.random_range(0.0..2000.0), rng.random_range(0.0..2000.0)))
            .collect();
        let corr = Correspondences2D3D::new(px, pts, None).unwrap();
        let cfg = RansacConfig { inlier_threshold: 0.01, ..Default::default() };
        assert!(matches!(solve_pnp_ransac(&corr, &k, &cfg), Err(CameraError::NoConsensus { .. })));
    }

    #[test]
    fn adaptive_iteration_count() {
        assert_eq!(required_iterations(100, 100, 6, 0.999), 1);
        assert_eq!(required_iterations(0, 100, 6, 0.999), usize::MAX);
        let half = required_iterations(50, 100, 6, 0.999);
        assert!((400..500).contains(&half), "{half}");
    }
}
