//! One damped Gauss-Newton step on the reprojection error, and its exact
//! derivative with respect to the 3D points.

use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::{Matrix6, SymmetricEigen, Vector6};

use super::{rms_reprojection_error, CameraError, Correspondences2D3D, GNConfig, PoseEstimate};
use crate::geometry::{Intrinsics, PoseSE3, Vec2, Vec3, MIN_DEPTH};
use crate::lie::{se3_left_jacobian, Twist};

const MIN_RCOND: f64 = 1e-14;

trait Scalar: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self> {
    fn cst(v: f64) -> Self;
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
}

/// Forward-mode dual number with three tangent directions.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Dual3 {
    v: f64,
    d: [f64; 3],
}

impl Dual3 {
    fn var(v: f64, k: usize) -> Self {
        let mut d = [0.0; 3];
        d[k] = 1.0;
        Self { v, d }
    }
}

impl Scalar for Dual3 {
    fn cst(v: f64) -> Self {
        Self { v, d: [0.0; 3] }
    }
}

impl Add for Dual3 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: [self.d[0] + o.d[0], self.d[1] + o.d[1], self.d[2] + o.d[2]],
        }
    }
}

impl Sub for Dual3 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            v: self.v - o.v,
            d: [self.d[0] - o.d[0], self.d[1] - o.d[1], self.d[2] - o.d[2]],
        }
    }
}

#[allow(clippy::suspicious_arithmetic_impl)]
impl Mul for Dual3 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let d = std::array::from_fn(|k| self.d[k] * o.v + self.v * o.d[k]);
        Self { v: self.v * o.v, d }
    }
}

impl Div for Dual3 {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let v = self.v * inv;
        let d = std::array::from_fn(|k| (self.d[k] - v * o.d[k]) * inv);
        Self { v, d }
    }
}

impl Neg for Dual3 {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            v: -self.v,
            d: [-self.d[0], -self.d[1], -self.d[2]],
        }
    }
}

/// Residual `F = x − π(K Y)` and its Jacobian with respect to a left twist
/// perturbation of the pose, at camera-frame point `Y`.
fn residual_jacobian<S: Scalar>(y: [S; 3], pixel: &Vec2, k: &Intrinsics) -> ([S; 2], [[S; 6]; 2]) {
    let f = S::cst(k.focal);
    let iz = S::cst(1.0) / y[2];
    let (xz, yz) = (y[0] * iz, y[1] * iz);
    let res = [
        S::cst(pixel.x) - (f * xz + S::cst(k.cx)),
        S::cst(pixel.y) - (f * yz + S::cst(k.cy)),
    ];
    // A = ∂π/∂Y; dY/dε = [−[Y]× | I]; J = −A·dY/dε.
    let a = [
        [f * iz, S::cst(0.0), -(f * xz * iz)],
        [S::cst(0.0), f * iz, -(f * yz * iz)],
    ];
    let z = S::cst(0.0);
    let neg_skew = [[z, y[2], -y[1]], [-y[2], z, y[0]], [y[1], -y[0], z]];
    let mut jac = [[z; 6]; 2];
    for r in 0..2 {
        for c in 0..3 {
            let mut rot = z;
            for m in 0..3 {
                rot = rot + a[r][m] * neg_skew[m][c];
            }
            jac[r][c] = -rot;
            jac[r][c + 3] = -a[r][c];
        }
    }
    (res, jac)
}

fn as_f64_point(y: &Vec3) -> [f64; 3] {
    [y.x, y.y, y.z]
}

/// Weighted Gauss-Newton system `H = Σ w JᵀJ`, `b = Σ w JᵀF` at a pose.
/// Points at or behind the camera plane are left out (`used` is false).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub h: Matrix6<f64>,
    pub b: Vector6<f64>,
    pub cost: f64,
    pub used: Vec<bool>,
}

pub fn normal_equations(pose: &PoseSE3, corr: &Correspondences2D3D, k: &Intrinsics) -> NormalEquations {
    let mut h = Matrix6::zeros();
    let mut b = Vector6::zeros();
    let mut cost = 0.0;
    let mut used = Vec::with_capacity(corr.len());
    for i in 0..corr.len() {
        let y = pose.transform(&corr.points[i]);
        if y.z <= MIN_DEPTH {
            used.push(false);
            continue;
        }
        used.push(true);
        let w = corr.weight(i);
        let (res, jac) = residual_jacobian(as_f64_point(&y), &corr.pixels[i], k);
        for r in 0..2 {
            for p in 0..6 {
                b[p] += w * jac[r][p] * res[r];
                for q in p..6 {
                    h[(p, q)] += w * jac[r][p] * jac[r][q];
                }
            }
            cost += w * res[r] * res[r];
        }
    }
    for p in 0..6 {
        for q in 0..p {
            h[(p, q)] = h[(q, p)];
        }
    }
    NormalEquations { h, b, cost, used }
}

/// `ΔP = −(H + ε I)⁻¹ b` with `ε = damping · tr(H) / 6`. Returns `ΔP` and the
/// damped matrix.
pub(crate) fn solve_damped(ne: &NormalEquations, damping: f64) -> Result<(Twist, Matrix6<f64>), CameraError> {
    let mut hd = ne.h;
    let eps = damping * ne.h.trace() / 6.0;
    for i in 0..6 {
        hd[(i, i)] += eps;
    }
    let eig = SymmetricEigen::new(hd);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let rcond = min / max;
    if !(rcond >= MIN_RCOND) {
        return Err(CameraError::SingularNormalEquations {
            rcond: if rcond.is_nan() { 0.0 } else { rcond },
        });
    }
    if ne.b.iter().all(|&v| v == 0.0) {
        return Ok((Twist::zeros(), hd));
    }
    let chol = hd
        .cholesky()
        .ok_or(CameraError::SingularNormalEquations { rcond })?;
    Ok((-chol.solve(&ne.b), hd))
}

fn apply(pose: &PoseSE3, delta: &Twist) -> PoseSE3 {
    if delta.iter().all(|&v| v == 0.0) {
        *pose
    } else {
        pose.left_update(delta)
    }
}

/// Refines a detached pose with `num_steps` damped Gauss-Newton steps. All
/// steps but the last are detached; the last one is recorded as the
/// differentiable increment on top of `base`.
///
/// `corr` should hold only the inliers of `prior`.
pub fn gauss_newton_refine(
    prior: &PoseEstimate,
    corr: &Correspondences2D3D,
    k: &Intrinsics,
    cfg: &GNConfig,
) -> Result<PoseEstimate, CameraError> {
    cfg.validate()?;
    let mut base = prior.pose;
    for _ in 1..cfg.num_steps {
        let (delta, _) = solve_damped(&normal_equations(&base, corr, k), cfg.damping)?;
        base = apply(&base, &delta);
    }
    let (increment, _) = solve_damped(&normal_equations(&base, corr, k), cfg.damping)?;
    let pose = apply(&base, &increment);
    Ok(PoseEstimate {
        pose,
        base,
        increment,
        inliers: prior.inliers.clone(),
        rms_reprojection_error: rms_reprojection_error(&pose, corr, k, None),
    })
}

/// Gradient of a loss with respect to the 3D points of `corr`, given the
/// loss gradient `upstream = ∂L/∂ΔP` with respect to the increment of
/// `estimate`. Points left out of the step get zero gradient.
///
/// Uses the adjoint of the damped normal equations: with `λ = H_d⁻¹ u`, the
/// point gradient is `−Rᵀ ∇_Y φ` where
/// `φ = w[(Jλ)·F + (Jλ)·(JΔP)] + (damping/6)·w·‖J‖²·(λ·ΔP)`.
pub fn pose_gradient_wrt_points(
    estimate: &PoseEstimate,
    corr: &Correspondences2D3D,
    k: &Intrinsics,
    cfg: &GNConfig,
    upstream: &Twist,
) -> Result<Vec<Vec3>, CameraError> {
    let ne = normal_equations(&estimate.base, corr, k);
    let (_, hd) = solve_damped(&ne, cfg.damping)?;
    let lambda = hd
        .cholesky()
        .ok_or(CameraError::SingularNormalEquations { rcond: 0.0 })?
        .solve(upstream);
    let delta = estimate.increment;
    let trace_coeff = cfg.damping / 6.0 * lambda.dot(&delta);
    let rt = estimate.base.rotation().transpose();
    let grads = (0..corr.len())
        .map(|i| {
            if !ne.used[i] {
                return Vec3::zeros();
            }
            let y = estimate.base.transform(&corr.points[i]);
            let yd = [Dual3::var(y.x, 0), Dual3::var(y.y, 1), Dual3::var(y.z, 2)];
            let (res, jac) = residual_jacobian(yd, &corr.pixels[i], k);
            let w = corr.weight(i);
            let mut phi = Dual3::cst(0.0);
            for r in 0..2 {
                let mut jl = Dual3::cst(0.0);
                let mut jd = Dual3::cst(0.0);
                let mut jj = Dual3::cst(0.0);
                for p in 0..6 {
                    jl = jl + jac[r][p] * Dual3::cst(lambda[p]);
                    jd = jd + jac[r][p] * Dual3::cst(delta[p]);
                    jj = jj + jac[r][p] * jac[r][p];
                }
                phi = phi + jl * (res[r] + jd) + jj * Dual3::cst(trace_coeff);
            }
            let g = Vec3::new(phi.d[0], phi.d[1], phi.d[2]) * w;
            -(rt * g)
        })
        .collect();
    Ok(grads)
}

/// Chain rule from the left-perturbation gradient of the final pose
/// `exp(ΔP)·base` to the gradient with respect to `ΔP`.
pub fn twist_gradient(increment: &Twist, perturbation_grad: &Twist) -> Twist {
    se3_left_jacobian(increment).transpose() * perturbation_grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::RansacConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene(seed: u64, n: usize, noise: f64) -> (Intrinsics, PoseSE3, Correspondences2D3D) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = Intrinsics::new(300.0, 160.0, 120.0).unwrap();
        let pose = PoseSE3::from_axis_angle(Vec3::new(0.05, -0.1, 0.02), Vec3::new(0.2, -0.1, 0.3));
        let inv = pose.inverse();
        let mut pixels = Vec::new();
        let mut points = Vec::new();
        for _ in 0..n {
            let c = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.8..0.8), rng.random_range(2.0..5.0));
            points.push(inv.transform(&c));
            let p = k.project(&c).unwrap();
            let jitter = Vec2::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * (2.0 * noise);
            pixels.push(p + jitter);
        }
        (k, pose, Correspondences2D3D::new(pixels, points, None).unwrap())
    }

    fn loss_of(pose: &PoseSE3, probes: &[Vec3], targets: &[Vec2], k: &Intrinsics) -> f64 {
        probes
            .iter()
            .zip(targets)
            .map(|(z, t)| (k.project(&pose.transform(z)).unwrap() - t).norm_squared())
            .sum()
    }

    #[test]
    fn zero_residuals_leave_pose_unchanged() {
        let (k, pose, corr) = scene(1, 30, 0.0);
        let corr = Correspondences2D3D::new(
            corr.points.iter().map(|x| k.project(&pose.transform(x)).unwrap()).collect(),
            corr.points.clone(),
            None,
        )
        .unwrap();
        let ne = normal_equations(&pose, &corr, &k);
        assert!(ne.cost < 1e-20);
        let prior = PoseEstimate::detached(pose, vec![true; corr.len()], 0.0);
        let est = gauss_newton_refine(&prior, &corr, &k, &GNConfig::default()).unwrap();
        assert!(est.increment.norm() < 1e-12);
        assert!(est.pose.rotation_distance(&pose) < 1e-12);
        assert!(est.pose.translation_distance(&pose) < 1e-12);
    }

    #[test]
    fn step_reduces_cost_from_perturbed_start() {
        let (k, pose, corr) = scene(2, 60, 0.0);
        let start = pose.left_update(&Twist::new(0.01, -0.02, 0.01, 0.03, 0.02, -0.01));
        let prior = PoseEstimate::detached(start, vec![true; corr.len()], 0.0);
        let before = normal_equations(&start, &corr, &k).cost;
        let one = gauss_newton_refine(&prior, &corr, &k, &GNConfig::default()).unwrap();
        let after = normal_equations(&one.pose, &corr, &k).cost;
        assert!(after < before * 1e-2);
        let three = gauss_newton_refine(&prior, &corr, &k, &GNConfig { num_steps: 3, ..Default::default() }).unwrap();
        assert!(three.pose.rotation_distance(&pose) < 1e-9);
        assert_ne!(three.base, start);
    }

    #[test]
    fn huge_damping_freezes_the_pose() {
        let (k, pose, corr) = scene(3, 40, 1.0);
        let prior = PoseEstimate::detached(pose, vec![true; corr.len()], 0.0);
        let est = gauss_newton_refine(&prior, &corr, &k, &GNConfig { damping: 1e12, num_steps: 1 }).unwrap();
        assert!(est.increment.norm() < 1e-10);
    }

    #[test]
    fn collinear_points_are_singular() {
        let k = Intrinsics::new(300.0, 160.0, 120.0).unwrap();
        let points: Vec<Vec3> = (0..10).map(|i| Vec3::new(-0.5 + 0.1 * i as f64, 0.2, 3.0 + 0.1 * i as f64)).collect();
        let pixels = points.iter().map(|x| k.project(x).unwrap() + Vec2::new(0.5, -0.3)).collect();
        let corr = Correspondences2D3D::new(pixels, points, None).unwrap();
        let prior = PoseEstimate::detached(PoseSE3::identity(), vec![true; 10], 0.0);
        assert!(matches!(
            gauss_newton_refine(&prior, &corr, &k, &GNConfig { damping: 0.0, num_steps: 1 }),
            Err(CameraError::SingularNormalEquations { .. })
        ));
    }

    #[test]
    fn dual_numbers_differentiate() {
        let x = Dual3::var(2.0, 0);
        let y = Dual3::var(3.0, 1);
        let f = x * y / (x + Dual3::cst(1.0)) - (-y);
        assert!((f.v - 5.0).abs() < 1e-15);
        assert!((f.d[0] - 3.0 / 9.0).abs() < 1e-15);
        assert!((f.d[1] - (2.0 / 3.0 + 1.0)).abs() < 1e-15);
        assert_eq!(f.d[2], 0.0);
    }

    /// End-to-end check: perturb each 3D point, redo the differentiable step
    /// from the same detached base, and compare against the adjoint gradient.
    #[test]
    fn point_gradient_matches_finite_differences() {
        for (seed, damping) in [(4u64, 1e-9), (5, 1e-2)] {
            let (k, pose, corr) = scene(seed, 25, 2.0);
            let cfg = GNConfig { damping, num_steps: 1 };
            let start = pose.left_update(&Twist::new(0.004, 0.003, -0.002, 0.01, -0.01, 0.02));
            let prior = PoseEstimate::detached(start, vec![true; corr.len()], 0.0);
            let est = gauss_newton_refine(&prior, &corr, &k, &cfg).unwrap();
            let probes = [Vec3::new(0.3, 0.2, 3.0), Vec3::new(-0.5, 0.1, 4.0), Vec3::new(0.0, -0.4, 2.5)];
            let targets = [Vec2::new(150.0, 100.0), Vec2::new(120.0, 140.0), Vec2::new(170.0, 90.0)];

            // Left-perturbation gradient of the probe loss at the final pose.
            let mut g_eps = Twist::zeros();
            for (z, t) in probes.iter().zip(&targets) {
                let y = est.pose.transform(z);
                let gp = (k.project(&y).unwrap() - t) * 2.0;
                let gy = k.projection_jacobian(&y).transpose() * gp;
                let c = y.cross(&gy);
                g_eps += Twist::new(c.x, c.y, c.z, gy.x, gy.y, gy.z);
            }
            let u = twist_gradient(&est.increment, &g_eps);
            let grads = pose_gradient_wrt_points(&est, &corr, &k, &cfg, &u).unwrap();

            let h = 1e-5;
            let eval = |c: &Correspondences2D3D| {
                let ne = normal_equations(&est.base, c, &k);
                let (d, _) = solve_damped(&ne, damping).unwrap();
                loss_of(&PoseSE3::exp(&d).compose(&est.base), &probes, &targets, &k)
            };
            for n in [0usize, 7, 19] {
                for (a, &an) in grads[n].iter().enumerate().take(3) {
                    let mut cp = corr.clone();
                    cp.points[n][a] += h;
                    let mut cm = corr.clone();
                    cm.points[n][a] -= h;
                    let fd = (eval(&cp) - eval(&cm)) / (2.0 * h);
                    let scale = fd.abs().max(an.abs()).max(1e-6);
                    assert!((fd - an).abs() / scale < 1e-4, "seed {seed} point {n} axis {a}: {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn refine_after_ransac_is_consistent() {
        let (k, pose, corr) = scene(6, 80, 0.5);
        let det = crate::camera::solve_pnp_ransac(&corr, &k, &RansacConfig::default()).unwrap();
        let inl = corr.restrict(&det.inliers).unwrap();
        let est = gauss_newton_refine(&det, &inl, &k, &GNConfig::default()).unwrap();
        assert_eq!(est.base, det.pose);
        // The detached solution is already a local minimum.
        assert!(est.increment.norm() < 1e-6);
        assert!(est.pose.rotation_distance(&pose) < 1e-2);
    }
}
