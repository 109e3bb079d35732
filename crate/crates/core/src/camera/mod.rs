//! Pinhole cameras, perspective-n-point pose estimation and rig calibration
//! from head landmarks.

mod head;

pub use head::{calibrate_rig_from_head, Calibration};

use std::path::Path;

use nalgebra::{DMatrix, Matrix2x3, Matrix3, Matrix3x4, Matrix4, SMatrix, SVector, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::{axis_angle_to_matrix, check_rotation, skew};

pub const RIG_FORMAT_VERSION: u32 = 1;
pub const MIN_PNP_POINTS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Centered principal point, focal length of `max(w, h)` pixels.
    pub fn default_for(width: u32, height: u32) -> Self {
        let f = width.max(height) as f64;
        Intrinsics {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::Config(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    /// Pixel coordinates and their Jacobian with respect to a camera-space point.
    /// The caller guarantees positive depth.
    pub fn project_with_jacobian(&self, p: &Vector3<f64>) -> (Vector2<f64>, Matrix2x3<f64>) {
        let iz = 1.0 / p.z;
        let u = Vector2::new(self.fx * p.x * iz + self.cx, self.fy * p.y * iz + self.cy);
        let jac = Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz * iz,
        );
        (u, jac)
    }

    fn to_bearing(&self, u: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((u.x - self.cx) / self.fx, (u.y - self.cy) / self.fy)
    }
}

/// World-to-camera rigid transform: `x_cam = rotation * x_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }
}

/// Pinhole camera without distortion; looks down its +z axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl Camera {
    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.pose.apply(x)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.pose.rotation.transpose() * self.pose.translation)
    }

    /// A camera at `eye` looking at `target`, with image rows pointing along `-up`.
    pub fn look_at(intrinsics: Intrinsics, eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let z = (target - eye).normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(Error::Degenerate("viewing direction parallel to up vector".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(Camera {
            intrinsics,
            pose: Pose {
                rotation,
                translation: -(rotation * eye),
            },
        })
    }
}

/// Projects a world point to pixels.
pub fn project(camera: &Camera, point: &Vector3<f64>) -> Result<Vector2<f64>> {
    let p = camera.to_camera(point);
    if !(p.z > 0.0) {
        return Err(Error::BehindCamera { depth: p.z });
    }
    Ok(camera.intrinsics.project_with_jacobian(&p).0)
}

/// Ordered cameras of a capture setup. Cameras listed in `disabled` have no
/// usable pose and are ignored when fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    pub cameras: Vec<Camera>,
    pub calibrated: bool,
    pub disabled: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RigFile {
    format_version: u32,
    calibrated: bool,
    #[serde(default)]
    disabled: Vec<usize>,
    cameras: Vec<CameraRecord>,
}

impl Rig {
    pub fn new(cameras: Vec<Camera>, calibrated: bool) -> Self {
        Rig {
            cameras,
            calibrated,
            disabled: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn is_enabled(&self, camera: usize) -> bool {
        !self.disabled.contains(&camera)
    }

    pub fn select(&self, cameras: &[usize]) -> Result<Rig> {
        if let Some(&c) = cameras.iter().find(|&&c| c >= self.len()) {
            return Err(Error::Shape(format!("camera {c} out of range")));
        }
        Ok(Rig {
            cameras: cameras.iter().map(|&c| self.cameras[c]).collect(),
            calibrated: self.calibrated,
            disabled: cameras
                .iter()
                .enumerate()
                .filter(|(_, c)| self.disabled.contains(c))
                .map(|(i, _)| i)
                .collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::Config("rig has no cameras".into()));
        }
        for (i, c) in self.cameras.iter().enumerate() {
            c.intrinsics
                .validate()
                .map_err(|e| Error::Config(format!("camera {i}: {e}")))?;
            check_rotation(&c.pose.rotation)
                .map_err(|e| Error::Config(format!("camera {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = RigFile {
            format_version: RIG_FORMAT_VERSION,
            calibrated: self.calibrated,
            disabled: self.disabled.clone(),
            cameras: self
                .cameras
                .iter()
                .map(|c| {
                    let r = c.pose.rotation;
                    CameraRecord {
                        fx: c.intrinsics.fx,
                        fy: c.intrinsics.fy,
                        cx: c.intrinsics.cx,
                        cy: c.intrinsics.cy,
                        width: c.intrinsics.width,
                        height: c.intrinsics.height,
                        rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
                        translation: c.pose.translation.into(),
                    }
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: RigFile = serde_json::from_str(text)?;
        if file.format_version != RIG_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported rig format_version {}",
                file.format_version
            )));
        }
        let rig = Rig {
            calibrated: file.calibrated,
            disabled: file.disabled,
            cameras: file
                .cameras
                .iter()
                .map(|c| Camera {
                    intrinsics: Intrinsics {
                        fx: c.fx,
                        fy: c.fy,
                        cx: c.cx,
                        cy: c.cy,
                        width: c.width,
                        height: c.height,
                    },
                    pose: Pose {
                        rotation: Matrix3::from_fn(|i, j| c.rotation[i][j]),
                        translation: Vector3::from(c.translation),
                    },
                })
                .collect(),
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

fn check_correspondences(points3d: &[Vector3<f64>], points2d: &[Vector2<f64>]) -> Result<()> {
    if points3d.len() != points2d.len() {
        return Err(Error::Shape(format!(
            "{} world points but {} image points",
            points3d.len(),
            points2d.len()
        )));
    }
    if points3d.len() < MIN_PNP_POINTS {
        return Err(Error::InsufficientData(format!(
            "pose estimation needs at least {MIN_PNP_POINTS} points, got {}",
            points3d.len()
        )));
    }
    Ok(())
}

/// Similarity transform bringing points to zero mean and the given mean radius.
fn normalize_points<const D: usize>(points: &[SVector<f64, D>], radius: f64) -> Result<(SVector<f64, D>, f64)> {
    let n = points.len() as f64;
    let centroid = points.iter().fold(SVector::<f64, D>::zeros(), |a, p| a + p) / n;
    let mean_dist = points.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n;
    if !(mean_dist > 1e-12) {
        return Err(Error::InsufficientData("all points coincide".into()));
    }
    Ok((centroid, radius / mean_dist))
}

/// Linear pose estimate from normalized image coordinates.
fn dlt(points3d: &[Vector3<f64>], bearings: &[Vector2<f64>]) -> Result<Pose> {
    let (c3, s3) = normalize_points(points3d, 3f64.sqrt())?;
    let cov = points3d
        .iter()
        .fold(Matrix3::zeros(), |a, p| a + (p - c3) * (p - c3).transpose());
    let eig = cov.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 1e-12 * hi) {
        return Err(Error::InsufficientData("points are coplanar or collinear".into()));
    }
    let (c2, s2) = normalize_points(bearings, 2f64.sqrt())?;
    let mut a = DMatrix::zeros(2 * points3d.len(), 12);
    for (i, (x, b)) in points3d.iter().zip(bearings).enumerate() {
        let xn = (x - c3) * s3;
        let xh = [xn.x, xn.y, xn.z, 1.0];
        let bn = (b - c2) * s2;
        for k in 0..4 {
            a[(2 * i, k)] = xh[k];
            a[(2 * i, 8 + k)] = -bn.x * xh[k];
            a[(2 * i + 1, 4 + k)] = xh[k];
            a[(2 * i + 1, 8 + k)] = -bn.y * xh[k];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .ok_or_else(|| Error::Numeric("empty SVD".into()))?;
    let p_norm = Matrix3x4::from_fn(|r, c| v_t[(idx, 4 * r + c)]);
    let t3 = Matrix4::new(
        s3, 0.0, 0.0, -s3 * c3.x, 0.0, s3, 0.0, -s3 * c3.y, 0.0, 0.0, s3, -s3 * c3.z, 0.0, 0.0, 0.0, 1.0,
    );
    let t2_inv = Matrix3::new(1.0 / s2, 0.0, c2.x, 0.0, 1.0 / s2, c2.y, 0.0, 0.0, 1.0);
    let mut p = t2_inv * p_norm * t3;
    let m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into();
    if m.determinant() < 0.0 {
        p = -p;
    }
    let m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into();
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Numeric("SVD did not converge".into())),
    };
    let mut rotation = u * v_t;
    if rotation.determinant() < 0.0 {
        return Err(Error::Degenerate("linear pose estimate has a reflection".into()));
    }
    let scale = svd.singular_values.sum() / 3.0;
    if !(scale > 0.0) {
        return Err(Error::Degenerate("linear pose estimate has zero scale".into()));
    }
    // Re-orthonormalize against accumulated rounding.
    let svd = rotation.svd(true, true);
    if let (Some(u), Some(v_t)) = (svd.u, svd.v_t) {
        rotation = u * v_t;
    }
    let translation = Vector3::new(p[(0, 3)], p[(1, 3)], p[(2, 3)]) / scale;
    Ok(Pose { rotation, translation })
}

fn reprojection_cost(pose: &Pose, intr: &Intrinsics, points3d: &[Vector3<f64>], points2d: &[Vector2<f64>]) -> Option<f64> {
    let mut cost = 0.0;
    for (x, u) in points3d.iter().zip(points2d) {
        let p = pose.apply(x);
        if !(p.z > 0.0) {
            return None;
        }
        cost += (intr.project_with_jacobian(&p).0 - u).norm_squared();
    }
    Some(cost)
}

/// Levenberg-damped Gauss-Newton on the pixel reprojection error, with
/// rotation updates applied on the left.
fn refine(pose: Pose, intr: &Intrinsics, points3d: &[Vector3<f64>], points2d: &[Vector2<f64>]) -> Pose {
    let mut pose = pose;
    let Some(mut cost) = reprojection_cost(&pose, intr, points3d, points2d) else {
        return pose;
    };
    let mut damping = 1e-6;
    for _ in 0..100 {
        let mut jtj = SMatrix::<f64, 6, 6>::zeros();
        let mut jtr = SVector::<f64, 6>::zeros();
        for (x, u) in points3d.iter().zip(points2d) {
            let rx = pose.rotation * x;
            let p = rx + pose.translation;
            let (proj, jp) = intr.project_with_jacobian(&p);
            let r = proj - u;
            let mut j = SMatrix::<f64, 2, 6>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * -skew(&rx)));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&jp);
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let mut improved = false;
        while damping < 1e12 {
            let mut lhs = jtj;
            for i in 0..6 {
                lhs[(i, i)] += damping * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = lhs.cholesky().map(|c| c.solve(&-jtr)) else {
                damping *= 10.0;
                continue;
            };
            let omega = Vector3::new(step[0], step[1], step[2]);
            let candidate = Pose {
                rotation: axis_angle_to_matrix(&omega) * pose.rotation,
                translation: pose.translation + Vector3::new(step[3], step[4], step[5]),
            };
            match reprojection_cost(&candidate, intr, points3d, points2d) {
                Some(c) if c <= cost => {
                    let done = step.norm() < 1e-15 || cost - c <= 1e-16 * cost.max(1e-300);
                    pose = candidate;
                    cost = c;
                    damping = (damping * 0.1).max(1e-12);
                    improved = !done;
                    break;
                }
                _ => damping *= 10.0,
            }
        }
        if !improved {
            break;
        }
    }
    pose
}

/// Camera pose from at least six 2D-3D correspondences: normalized DLT, then
/// reprojection refinement.
pub fn pnp_estimate(points3d: &[Vector3<f64>], points2d: &[Vector2<f64>], intrinsics: &Intrinsics) -> Result<Pose> {
    check_correspondences(points3d, points2d)?;
    intrinsics.validate()?;
    let bearings: Vec<Vector2<f64>> = points2d.iter().map(|u| intrinsics.to_bearing(u)).collect();
    let pose = dlt(points3d, &bearings)?;
    Ok(refine(pose, intrinsics, points3d, points2d))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub threshold_px: f64,
    pub max_iterations: usize,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            threshold_px: 3.0,
            max_iterations: 500,
            min_inliers: MIN_PNP_POINTS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacPose {
    pub pose: Pose,
    pub inliers: Vec<usize>,
}

fn inliers_of(pose: &Pose, intr: &Intrinsics, points3d: &[Vector3<f64>], points2d: &[Vector2<f64>], threshold: f64) -> Vec<usize> {
    (0..points3d.len())
        .filter(|&i| {
            let p = pose.apply(&points3d[i]);
            p.z > 0.0 && (intr.project_with_jacobian(&p).0 - points2d[i]).norm() <= threshold
        })
        .collect()
}

/// Outlier-robust [`pnp_estimate`] using minimal six-point samples.
pub fn pnp_ransac(
    points3d: &[Vector3<f64>],
    points2d: &[Vector2<f64>],
    intrinsics: &Intrinsics,
    config: &RansacConfig,
) -> Result<RansacPose> {
    check_correspondences(points3d, points2d)?;
    intrinsics.validate()?;
    let n = points3d.len();
    let bearings: Vec<Vector2<f64>> = points2d.iter().map(|u| intrinsics.to_bearing(u)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..config.max_iterations {
        let sample = rand::seq::index::sample(&mut rng, n, MIN_PNP_POINTS).into_vec();
        let p3: Vec<Vector3<f64>> = sample.iter().map(|&i| points3d[i]).collect();
        let b: Vec<Vector2<f64>> = sample.iter().map(|&i| bearings[i]).collect();
        let Ok(pose) = dlt(&p3, &b) else { continue };
        let inl = inliers_of(&pose, intrinsics, points3d, points2d, config.threshold_px);
        if inl.len() > best.len() {
            best = inl;
            if best.len() == n {
                break;
            }
        }
    }
    let needed = config.min_inliers.max(MIN_PNP_POINTS);
    if best.len() < needed {
        return Err(Error::NoConsensus {
            best: best.len(),
            needed,
        });
    }
    let p3: Vec<Vector3<f64>> = best.iter().map(|&i| points3d[i]).collect();
    let p2: Vec<Vector2<f64>> = best.iter().map(|&i| points2d[i]).collect();
    let pose = pnp_estimate(&p3, &p2, intrinsics)?;
    let inliers = inliers_of(&pose, intrinsics, points3d, points2d, config.threshold_px);
    Ok(RansacPose { pose, inliers })
}
