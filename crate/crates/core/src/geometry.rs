//! Pinhole cameras, SE(3) poses, PnP with RANSAC and pose-error metrics.
//!
//! Poses are world-from-camera (`T_wc`): a camera-frame point `p_c` maps to
//! the world as `R p_c + t`, so `t` is the camera center.

use nalgebra::{DMatrix, Matrix3, Matrix6, Rotation3, Vector2, Vector3, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Depth at or below which a camera-frame point counts as behind the camera.
pub const Z_MIN: f64 = 0.1;
/// Correspondences consumed by one DLT hypothesis.
pub const PNP_MIN_POINTS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("need at least {needed} correspondences, got {got}")]
    NotEnoughCorrespondences { needed: usize, got: usize },
    #[error("degenerate correspondence configuration")]
    Degenerate,
    #[error("non-finite reprojection cost")]
    NonFiniteCost,
    #[error("localization failed: best hypothesis had {best_inliers} inliers")]
    LocalizationFailed { best_inliers: usize },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "fx={fx} fy={fy} cx={cx} cy={cy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn focal_mean(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }

    /// Unit-norm viewing ray through `pixel`, in the camera frame.
    pub fn ray(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0).normalize()
    }
}

/// Rigid world-from-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, rejecting rotations that are not orthonormal with det +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let p = Self {
            rotation,
            translation,
        };
        if !p.is_valid(1e-6) {
            return Err(GeometryError::InvalidPose(format!(
                "RᵀR deviation {:.3e}, det {:.9}",
                p.orthonormality_error(),
                rotation.determinant()
            )));
        }
        Ok(p)
    }

    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::new(axis_angle).into_inner(),
            translation,
        }
    }

    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max()
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.rotation.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
            && self.orthonormality_error() <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &PoseSE3) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// World point into this camera's frame.
    pub fn to_camera(&self, y_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (y_world - self.translation)
    }

    /// Re-orthonormalizes the rotation (polar projection).
    pub fn orthonormalized(&self) -> Self {
        Self {
            rotation: nearest_rotation(&self.rotation),
            translation: self.translation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence2D3D {
    pub pixel: Vector2<f64>,
    pub point: Vector3<f64>,
    pub sigma: Option<f64>,
}

impl Correspondence2D3D {
    pub fn new(pixel: Vector2<f64>, point: Vector3<f64>) -> Self {
        Self {
            pixel,
            point,
            sigma: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub z_cam: f64,
}

impl Projection {
    pub fn in_front(&self) -> bool {
        self.z_cam > Z_MIN
    }
}

/// Pinhole projection of a world point. The pixel is meaningless when
/// `z_cam ≤ Z_MIN`; callers check [`Projection::in_front`].
pub fn project(k: &Intrinsics, t_wc: &PoseSE3, y_world: &Vector3<f64>) -> Projection {
    let pc = t_wc.to_camera(y_world);
    Projection {
        pixel: Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy),
        z_cam: pc.z,
    }
}

/// World point at camera depth `depth` along the ray through `pixel`.
pub fn backproject(k: &Intrinsics, t_wc: &PoseSE3, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
    let pc = Vector3::new((pixel.x - k.cx) / k.fx * depth, (pixel.y - k.cy) / k.fy * depth, depth);
    t_wc.transform_point(&pc)
}

pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    r
}

/// Linear six-point (or more) PnP: DLT estimate of the 3×4 camera matrix on
/// normalized image coordinates, decomposed into the nearest rotation and a
/// translation, returned as world-from-camera.
pub fn pnp_minimal(corrs: &[Correspondence2D3D], k: &Intrinsics) -> Result<PoseSE3, GeometryError> {
    let n = corrs.len();
    if n < PNP_MIN_POINTS {
        return Err(GeometryError::NotEnoughCorrespondences {
            needed: PNP_MIN_POINTS,
            got: n,
        });
    }
    let centroid = corrs.iter().fold(Vector3::zeros(), |a, c| a + c.point) / n as f64;
    let mean_dist = corrs.iter().map(|c| (c.point - centroid).norm()).sum::<f64>() / n as f64;
    if !(mean_dist > 1e-12) {
        return Err(GeometryError::Degenerate);
    }
    let s = 3f64.sqrt() / mean_dist;
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, c) in corrs.iter().enumerate() {
        let x = (c.point - centroid) * s;
        let mx = (c.pixel.x - k.cx) / k.fx;
        let my = (c.pixel.y - k.cy) / k.fy;
        let h = [x.x, x.y, x.z, 1.0];
        for j in 0..4 {
            a[(2 * i, j)] = h[j];
            a[(2 * i, 8 + j)] = -mx * h[j];
            a[(2 * i + 1, 4 + j)] = h[j];
            a[(2 * i + 1, 8 + j)] = -my * h[j];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or(GeometryError::Degenerate)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    if order.len() < 12 {
        return Err(GeometryError::Degenerate);
    }
    let sv = &svd.singular_values;
    let largest = sv[order[0]];
    if !(largest > 0.0) || sv[order[10]] < 1e-8 * largest {
        return Err(GeometryError::Degenerate);
    }
    let v = vt.row(order[11]);
    let mn = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
    let pn = Vector3::new(v[3], v[7], v[11]);
    let mut m = mn * s;
    let mut p = pn - m * centroid;
    if m.determinant() < 0.0 {
        m = -m;
        p = -p;
    }
    let svd3 = m.svd(true, true);
    let scale = svd3.singular_values.sum() / 3.0;
    if !(scale > 0.0) {
        return Err(GeometryError::Degenerate);
    }
    let r_cw = nearest_rotation(&m);
    let t_cw = p / scale;
    let pose = PoseSE3 {
        rotation: r_cw,
        translation: t_cw,
    }
    .inverse();
    if !pose.is_valid(1e-6) {
        return Err(GeometryError::Degenerate);
    }
    Ok(pose)
}

/// Summed squared reprojection error; points at or behind the camera
/// contribute a large constant penalty so such poses are never preferred.
pub fn reprojection_cost(pose: &PoseSE3, corrs: &[Correspondence2D3D], k: &Intrinsics) -> f64 {
    corrs
        .iter()
        .map(|c| {
            let pc = pose.to_camera(&c.point);
            if pc.z <= 1e-9 {
                return BEHIND_PENALTY;
            }
            let u = k.fx * pc.x / pc.z + k.cx - c.pixel.x;
            let v = k.fy * pc.y / pc.z + k.cy - c.pixel.y;
            u * u + v * v
        })
        .sum()
}

const BEHIND_PENALTY: f64 = 1e8;

/// Levenberg–Marquardt refinement of the summed squared reprojection error.
/// Increments are left-multiplied axis-angle/translation updates of the
/// camera-from-world transform; a step is only accepted if it lowers the cost.
pub fn refine_pose(
    pose0: &PoseSE3,
    corrs: &[Correspondence2D3D],
    k: &Intrinsics,
    iters: usize,
) -> Result<PoseSE3, GeometryError> {
    if !pose0.is_valid(1e-6) {
        return Err(GeometryError::InvalidPose("initial pose".into()));
    }
    let mut cw = pose0.inverse();
    let mut cost = reprojection_cost(pose0, corrs, k);
    if !cost.is_finite() {
        return Err(GeometryError::NonFiniteCost);
    }
    let mut lambda = 1e-4;
    for _ in 0..iters {
        if cost < 1e-24 {
            break;
        }
        let mut h = Matrix6::<f64>::zeros();
        let mut b = Vector6::<f64>::zeros();
        for c in corrs {
            let pc = cw.rotation * c.point + cw.translation;
            if pc.z <= 1e-9 {
                continue;
            }
            let iz = 1.0 / pc.z;
            let ru = k.fx * pc.x * iz + k.cx - c.pixel.x;
            let rv = k.fy * pc.y * iz + k.cy - c.pixel.y;
            // d(u, v)/d(p_c)
            let ju = Vector3::new(k.fx * iz, 0.0, -k.fx * pc.x * iz * iz);
            let jv = Vector3::new(0.0, k.fy * iz, -k.fy * pc.y * iz * iz);
            // d(p_c)/d(ω) = −[p_c]ₓ, d(p_c)/d(v) = I
            let row = |j: &Vector3<f64>| {
                let w = pc.cross(j);
                Vector6::new(w.x, w.y, w.z, j.x, j.y, j.z)
            };
            let (a, bb) = (row(&ju), row(&jv));
            h += a * a.transpose() + bb * bb.transpose();
            b += a * ru + bb * rv;
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let Some(delta) = damped.cholesky().map(|ch| ch.solve(&(-b))) else {
                lambda *= 10.0;
                continue;
            };
            let rot = Rotation3::new(Vector3::new(delta[0], delta[1], delta[2])).into_inner();
            let cand = PoseSE3 {
                rotation: nearest_rotation(&(rot * cw.rotation)),
                translation: rot * cw.translation + Vector3::new(delta[3], delta[4], delta[5]),
            };
            let c_wc = cand.inverse();
            let new_cost = reprojection_cost(&c_wc, corrs, k);
            if !new_cost.is_finite() {
                return Err(GeometryError::NonFiniteCost);
            }
            if new_cost < cost {
                let small = delta.norm() < 1e-15;
                cw = cand;
                cost = new_cost;
                lambda = (lambda * 0.1).max(1e-12);
                improved = !small;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Ok(cw.inverse())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub inlier_thresh_px: f64,
    pub max_iters: usize,
    pub refine_iters: usize,
    /// Adaptive termination confidence; 1.0 always runs `max_iters` hypotheses.
    pub confidence: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_thresh_px: 10.0,
            max_iters: 1024,
            refine_iters: 20,
            confidence: 0.9999,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub pose: PoseSE3,
    pub inliers: Vec<bool>,
    pub n_inliers: usize,
    pub hypotheses: usize,
}

fn inlier_mask(pose: &PoseSE3, corrs: &[Correspondence2D3D], k: &Intrinsics, thresh: f64) -> Vec<bool> {
    let t2 = thresh * thresh;
    corrs
        .iter()
        .map(|c| {
            let p = project(k, pose, &c.point);
            p.in_front() && (p.pixel - c.pixel).norm_squared() < t2
        })
        .collect()
}

fn select(corrs: &[Correspondence2D3D], mask: &[bool]) -> Vec<Correspondence2D3D> {
    corrs.iter().zip(mask).filter(|(_, &m)| m).map(|(c, _)| *c).collect()
}

/// Hypothesize-and-verify PnP. Each hypothesis is a DLT fit to six sampled
/// correspondences scored by its inlier count (ties keep the earlier
/// hypothesis); the winner is refined on its inliers.
pub fn ransac_pnp(
    corrs: &[Correspondence2D3D],
    k: &Intrinsics,
    cfg: &RansacConfig,
    seed: u64,
) -> Result<RansacResult, GeometryError> {
    let n = corrs.len();
    if n < PNP_MIN_POINTS {
        return Err(GeometryError::NotEnoughCorrespondences {
            needed: PNP_MIN_POINTS,
            got: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, PoseSE3)> = None;
    let mut needed = cfg.max_iters;
    let mut hypotheses = 0;
    let mut sample_buf = Vec::with_capacity(PNP_MIN_POINTS);
    while hypotheses < needed.min(cfg.max_iters) {
        hypotheses += 1;
        sample_buf.clear();
        sample_buf.extend(sample(&mut rng, n, PNP_MIN_POINTS).iter().map(|i| corrs[i]));
        let Ok(pose) = pnp_minimal(&sample_buf, k) else { continue };
        let count = inlier_mask(&pose, corrs, k, cfg.inlier_thresh_px).iter().filter(|&&m| m).count();
        if best.as_ref().map_or(true, |(b, _)| count > *b) {
            best = Some((count, pose));
            if cfg.confidence < 1.0 {
                let w = count as f64 / n as f64;
                let p_good = w.powi(PNP_MIN_POINTS as i32);
                if p_good >= 1.0 {
                    needed = hypotheses;
                } else if p_good > 0.0 {
                    let req = ((1.0 - cfg.confidence).ln() / (1.0 - p_good).ln()).ceil();
                    needed = if req.is_finite() { req as usize } else { cfg.max_iters };
                }
            }
        }
    }
    let (best_count, mut pose) = best.unwrap_or((0, PoseSE3::identity()));
    if best_count < PNP_MIN_POINTS {
        return Err(GeometryError::LocalizationFailed { best_inliers: best_count });
    }
    let mut mask = inlier_mask(&pose, corrs, k, cfg.inlier_thresh_px);
    for _ in 0..2 {
        let inl = select(corrs, &mask);
        if inl.len() < PNP_MIN_POINTS {
            break;
        }
        let refined = refine_pose(&pose, &inl, k, cfg.refine_iters)?;
        let new_mask = inlier_mask(&refined, corrs, k, cfg.inlier_thresh_px);
        let done = new_mask == mask;
        pose = refined;
        mask = new_mask;
        if done {
            break;
        }
    }
    let n_inliers = mask.iter().filter(|&&m| m).count();
    if n_inliers < PNP_MIN_POINTS {
        return Err(GeometryError::LocalizationFailed { best_inliers: n_inliers });
    }
    Ok(RansacResult {
        pose,
        inliers: mask,
        n_inliers,
        hypotheses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    /// Camera-center distance in scene units.
    pub trans: f64,
    /// Relative rotation angle in degrees.
    pub rot_deg: f64,
}

/// Translation and rotation error of `est` relative to `gt`. The angle is
/// `arccos((tr(R_gtᵀ R_est) − 1) / 2)`, evaluated through `atan2` for accuracy
/// near zero.
pub fn pose_error(est: &PoseSE3, gt: &PoseSE3) -> PoseError {
    let a = &gt.rotation;
    let b = &est.rotation;
    // r = aᵀ b, formed so that swapping a and b yields exactly rᵀ
    let mut r = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = a[(0, i)] * b[(0, j)] + a[(1, i)] * b[(1, j)] + a[(2, i)] * b[(2, j)];
        }
    }
    let cos = ((r[0][0] + r[1][1] + r[2][2]) - 1.0) * 0.5;
    let sx = r[2][1] - r[1][2];
    let sy = r[0][2] - r[2][0];
    let sz = r[1][0] - r[0][1];
    let sin = 0.5 * (sx * sx + sy * sy + sz * sz).sqrt();
    let angle = sin.atan2(cos.clamp(-1.0, 1.0));
    PoseError {
        trans: (est.translation - gt.translation).norm(),
        rot_deg: angle.to_degrees(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn k0() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> PoseSE3 {
        let aa = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let t = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        PoseSE3::from_axis_angle(aa, t)
    }

    /// Points in front of the camera, generated in its frame.
    fn scene_for(pose: &PoseSE3, k: &Intrinsics, n: usize, rng: &mut ChaCha8Rng) -> Vec<Correspondence2D3D> {
        (0..n)
            .map(|_| {
                let px = Vector2::new(rng.gen_range(0.0..2.0 * k.cx), rng.gen_range(0.0..2.0 * k.cy));
                let depth = rng.gen_range(2.0..6.0);
                let y = backproject(k, pose, &px, depth);
                Correspondence2D3D::new(project(k, pose, &y).pixel, y)
            })
            .collect()
    }

    #[test]
    fn project_examples() {
        let k = k0();
        let p = project(&k, &PoseSE3::identity(), &Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(p.pixel, Vector2::new(50.0, 50.0));
        assert_eq!(p.z_cam, 2.0);
        let p = project(&k, &PoseSE3::identity(), &Vector3::new(1.0, 0.0, 2.0));
        assert_eq!(p.pixel, Vector2::new(100.0, 50.0));
        let behind = project(&k, &PoseSE3::identity(), &Vector3::new(0.0, 0.0, -1.0));
        assert!(!behind.in_front());
    }

    #[test]
    fn project_backproject_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = k0();
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let pc = Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(0.5..8.0));
            let y = pose.transform_point(&pc);
            let p = project(&k, &pose, &y);
            let back = backproject(&k, &pose, &p.pixel, p.z_cam);
            assert!((back - y).norm() < 1e-9);
        }
    }

    #[test]
    fn dlt_recovers_noiseless_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = k0();
        for n in [6, 20] {
            for _ in 0..20 {
                let gt = random_pose(&mut rng);
                let corrs = scene_for(&gt, &k, n, &mut rng);
                let est = pnp_minimal(&corrs, &k).unwrap();
                let e = pose_error(&est, &gt);
                assert!(e.rot_deg < 1e-5, "rot {}", e.rot_deg);
                assert!(e.trans < 1e-6, "trans {}", e.trans);
            }
        }
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let k = k0();
        let pose = PoseSE3::identity();
        let corrs: Vec<_> = (0..8)
            .map(|i| {
                let y = Vector3::new(0.1 * i as f64, 0.05 * i as f64, 3.0 + 0.2 * i as f64);
                Correspondence2D3D::new(project(&k, &pose, &y).pixel, y)
            })
            .collect();
        assert_eq!(pnp_minimal(&corrs, &k), Err(GeometryError::Degenerate));
        assert!(matches!(
            pnp_minimal(&corrs[..5], &k),
            Err(GeometryError::NotEnoughCorrespondences { .. })
        ));
    }

    #[test]
    fn refine_fixed_point_and_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = k0();
        let gt = random_pose(&mut rng);
        let corrs = scene_for(&gt, &k, 50, &mut rng);
        let same = refine_pose(&gt, &corrs, &k, 20).unwrap();
        let e = pose_error(&same, &gt);
        assert!(e.trans < 1e-9 && e.rot_deg < 1e-7);

        let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
        let delta = PoseSE3::from_axis_angle(axis * 2f64.to_radians(), Vector3::new(0.05, 0.0, 0.0));
        let pert = gt.compose(&delta);
        let out = refine_pose(&pert, &corrs, &k, 20).unwrap();
        let e = pose_error(&out, &gt);
        assert!(e.trans < 1e-6 && e.rot_deg < 1e-6, "{e:?}");
    }

    #[test]
    fn refine_never_increases_cost_with_pixel_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = k0();
        for _ in 0..10 {
            let gt = random_pose(&mut rng);
            let mut corrs = scene_for(&gt, &k, 40, &mut rng);
            for c in &mut corrs {
                let nx: f64 = StandardNormal.sample(&mut rng);
                let ny: f64 = StandardNormal.sample(&mut rng);
                c.pixel += Vector2::new(nx, ny) * 0.5;
            }
            let start = gt.compose(&PoseSE3::from_axis_angle(Vector3::new(0.01, 0.02, -0.01), Vector3::new(0.02, -0.01, 0.03)));
            let before = reprojection_cost(&start, &corrs, &k);
            let after = reprojection_cost(&refine_pose(&start, &corrs, &k, 20).unwrap(), &corrs, &k);
            assert!(after <= before);
        }
    }

    #[test]
    fn ransac_rejects_gross_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = Intrinsics::new(128.0, 128.0, 128.0, 128.0).unwrap();
        let gt = random_pose(&mut rng);
        let mut corrs = scene_for(&gt, &k, 100, &mut rng);
        let mut is_outlier = vec![false; 100];
        for (i, c) in corrs.iter_mut().enumerate().take(30) {
            c.pixel = Vector2::new(rng.gen_range(0.0..256.0), rng.gen_range(0.0..256.0));
            is_outlier[i] = true;
        }
        let res = ransac_pnp(&corrs, &k, &RansacConfig::default(), 7).unwrap();
        let e = pose_error(&res.pose, &gt);
        assert!(e.trans < 1e-3 && e.rot_deg < 0.01, "{e:?}");
        let rejected = (0..100).filter(|&i| is_outlier[i] && !res.inliers[i]).count();
        assert!(rejected as f64 >= 0.95 * 30.0);
        let again = ransac_pnp(&corrs, &k, &RansacConfig::default(), 7).unwrap();
        assert_eq!(again.inliers, res.inliers);
    }

    #[test]
    fn ransac_all_inliers_matches_direct_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = k0();
        let gt = random_pose(&mut rng);
        let corrs = scene_for(&gt, &k, 30, &mut rng);
        let direct = refine_pose(&pnp_minimal(&corrs, &k).unwrap(), &corrs, &k, 20).unwrap();
        let res = ransac_pnp(&corrs, &k, &RansacConfig::default(), 1).unwrap();
        let e = pose_error(&res.pose, &direct);
        assert!(e.trans < 1e-9 && e.rot_deg < 1e-9, "{e:?}");
        assert!(matches!(
            ransac_pnp(&corrs[..5], &k, &RansacConfig::default(), 1),
            Err(GeometryError::NotEnoughCorrespondences { .. })
        ));
    }

    #[test]
    fn pose_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_pose(&mut rng);
        let e = pose_error(&p, &p);
        assert_eq!(e.trans, 0.0);
        assert!(e.rot_deg.abs() < 1e-12);
        let rz = PoseSE3::from_axis_angle(Vector3::z() * 10f64.to_radians(), Vector3::zeros());
        let e = pose_error(&rz, &PoseSE3::identity());
        assert!((e.rot_deg - 10.0).abs() < 1e-10);
        assert_eq!(e.trans, 0.0);
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let qa = UnitQuaternion::from_matrix(&a.rotation);
            let qb = UnitQuaternion::from_matrix(&b.rotation);
            let w = (qa.inverse() * qb).w.abs().min(1.0);
            let oracle = (2.0 * w.acos()).to_degrees();
            let e = pose_error(&a, &b);
            assert!((e.rot_deg - oracle).abs() < 1e-8);
            assert_eq!(e.rot_deg, pose_error(&b, &a).rot_deg);
        }
    }
}
