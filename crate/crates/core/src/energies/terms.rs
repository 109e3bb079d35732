//! Individual energy terms. Each term has a kernel that evaluates one frame and
//! optionally accumulates gradients, plus a standalone entry point.

use nalgebra::{Matrix3, Vector3};

use super::CameraParams;
use crate::camera::{Camera, Rig};
use crate::error::{Error, Result};
use crate::model::kinematics::{add_pose_blendshapes, fk_forward, group_vector, skin_forward, Posed};
use crate::model::{local_rotations, regress, shaped_template, FrameParams, HullFace, ModelDefinition, Parameters};
use crate::observations::{Landmark2d, ObservationSet};
use crate::priors::{GmmPrior, PosePrior};

/// Depth (meters) below which a landmark counts as behind the camera.
pub const MIN_DEPTH: f64 = 0.01;
/// Weight of the squared depth violation `(MIN_DEPTH - z)^2` per landmark.
pub const BEHIND_CAMERA_WEIGHT: f64 = 1e6;

/// Posed state of one frame.
pub(crate) struct FrameEval {
    pub locals: Vec<Matrix3<f64>>,
    pub posed: Posed,
    pub unposed: Vec<Vector3<f64>>,
    pub verts: Vec<Vector3<f64>>,
}

pub(crate) fn eval_frame(
    model: &ModelDefinition,
    shaped: &[Vector3<f64>],
    rest: &[Vector3<f64>],
    frame: &FrameParams,
) -> FrameEval {
    let locals = local_rotations(&frame.pose);
    let posed = fk_forward(model, &locals, rest, &frame.translation());
    let mut unposed = shaped.to_vec();
    model.expression.accumulate(&frame.expression, &mut unposed);
    add_pose_blendshapes(model, &locals, &mut unposed);
    let verts = skin_forward(model, &unposed, &posed);
    FrameEval {
        locals,
        posed,
        unposed,
        verts,
    }
}

/// Gradient of one camera's parameters; the rotation part is kept as a matrix
/// gradient until the end.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CameraGrad {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub log_focal: f64,
}

impl Default for CameraGrad {
    fn default() -> Self {
        CameraGrad {
            rotation: Matrix3::zeros(),
            translation: Vector3::zeros(),
            log_focal: 0.0,
        }
    }
}

impl CameraGrad {
    pub fn add(&mut self, other: &CameraGrad) {
        self.rotation += other.rotation;
        self.translation += other.translation;
        self.log_focal += other.log_focal;
    }
}

pub(crate) struct LandmarkGrad<'a> {
    pub scale: f64,
    pub verts: &'a mut [Vector3<f64>],
    pub cameras: &'a mut [CameraGrad],
}

/// Reprojection energy of one frame: `sum |x - mu|^2 / (2 sigma^2)` plus the
/// behind-camera hinge.
pub(crate) fn landmark_frame(
    model: &ModelDefinition,
    verts: &[Vector3<f64>],
    views: &[Vec<Landmark2d>],
    cameras: &[Camera],
    enabled: &[bool],
    mut grad: Option<LandmarkGrad<'_>>,
) -> Result<f64> {
    let mut total = 0.0;
    for (c, view) in views.iter().enumerate() {
        if !enabled[c] || view.is_empty() {
            continue;
        }
        let cam = &cameras[c];
        let rot = cam.pose.rotation;
        let intr = &cam.intrinsics;
        for obs in view {
            let (_, anchor) = model
                .landmark(obs.id)
                .ok_or_else(|| Error::Format(format!("landmark id {} out of range", obs.id)))?;
            let point = model.anchor_point(anchor, verts);
            let xc = rot * point + cam.pose.translation;
            let behind = xc.z < MIN_DEPTH;
            let clamped = Vector3::new(xc.x, xc.y, xc.z.max(MIN_DEPTH));
            let (uv, mut jac) = intr.project_with_jacobian(&clamped);
            if behind {
                jac.column_mut(2).fill(0.0);
            }
            let inv_var = 1.0 / (obs.sigma * obs.sigma);
            let res = uv - nalgebra::Vector2::new(obs.x, obs.y);
            total += 0.5 * res.norm_squared() * inv_var;
            let violation = MIN_DEPTH - xc.z;
            if behind {
                total += BEHIND_CAMERA_WEIGHT * violation * violation;
            }
            if let Some(g) = grad.as_mut() {
                let d_uv = res * (inv_var * g.scale);
                let mut d_xc = jac.transpose() * d_uv;
                if behind {
                    d_xc.z -= 2.0 * BEHIND_CAMERA_WEIGHT * violation * g.scale;
                }
                let d_point = rot.transpose() * d_xc;
                let face = model.faces[anchor.face];
                for (v, w) in face.iter().zip(anchor.weights) {
                    g.verts[*v] += d_point * w;
                }
                let cg = &mut g.cameras[c];
                cg.rotation += d_xc * point.transpose();
                cg.translation += d_xc;
                cg.log_focal += d_uv.x * (uv.x - intr.cx) + d_uv.y * (uv.y - intr.cy);
            }
        }
    }
    Ok(total)
}

/// Penetration depth of `x` inside the convex hull with the given outward
/// faces over `points`: the distance to the nearest face plane when inside,
/// otherwise 0.
pub fn hull_penetration(points: &[Vector3<f64>], faces: &[HullFace], x: &Vector3<f64>) -> f64 {
    hull_depth(points, faces, x).map_or(0.0, |(d, _)| d)
}

/// Depth and index of the nearest face when `x` is strictly inside.
fn hull_depth(points: &[Vector3<f64>], faces: &[HullFace], x: &Vector3<f64>) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, HullFace([a, b, c])) in faces.iter().enumerate() {
        let pa = points[*a];
        let n = (points[*b] - pa).cross(&(points[*c] - pa)).normalize();
        let depth = -n.dot(&(x - pa));
        if depth <= 0.0 {
            return None;
        }
        if best.is_none_or(|(d, _)| depth < d) {
            best = Some((depth, i));
        }
    }
    best
}

pub(crate) struct IntersectGrad<'a> {
    pub scale: f64,
    pub verts: &'a mut [Vector3<f64>],
    /// Gradient on each sphere's center, in sphere order.
    pub centers: &'a mut [Vector3<f64>],
}

pub(crate) fn sphere_centers(model: &ModelDefinition, posed: &Posed, rest: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    model.spheres.iter().map(|s| posed.joint_position(s.joint, rest)).collect()
}

/// Sphere and convex-hull intersection penalties of one posed frame.
pub(crate) fn intersect_frame(
    model: &ModelDefinition,
    verts: &[Vector3<f64>],
    centers: &[Vector3<f64>],
    mut grad: Option<IntersectGrad<'_>>,
) -> f64 {
    let mut total = 0.0;
    for (s, (sphere, center)) in model.spheres.iter().zip(centers).enumerate() {
        for &v in &sphere.vertices {
            let d = verts[v] - center;
            let dist = d.norm();
            let gap = dist - sphere.radius;
            total += gap * gap;
            if let Some(g) = grad.as_mut() {
                if dist > 0.0 {
                    let dv = d * (2.0 * gap / dist * g.scale);
                    g.verts[v] += dv;
                    g.centers[s] -= dv;
                }
            }
        }
    }
    for (hull, faces) in &model.hulls {
        for &v in &hull.vertices {
            let x = verts[v];
            let Some((depth, face)) = hull_depth(verts, faces, &x) else {
                continue;
            };
            total += depth * depth;
            if let Some(g) = grad.as_mut() {
                let HullFace([a, b, c]) = faces[face];
                let pa = verts[a];
                let e1 = verts[b] - pa;
                let e2 = verts[c] - pa;
                let u = e1.cross(&e2);
                let len = u.norm();
                let n = u / len;
                let w = x - pa;
                let g_u = -(w - n * n.dot(&w)) / len;
                let d_e1 = e2.cross(&g_u);
                let d_e2 = g_u.cross(&e1);
                let k = 2.0 * depth * g.scale;
                g.verts[v] -= n * k;
                g.verts[b] += d_e1 * k;
                g.verts[c] += d_e2 * k;
                g.verts[a] += (n - d_e1 - d_e2) * k;
            }
        }
    }
    total
}

/// The quartic range barrier of one coefficient.
pub fn expression_barrier(t: f64, low: f64, high: f64) -> f64 {
    if t < low {
        (low - t).powi(4)
    } else if t > high {
        (t - high).powi(4)
    } else {
        0.0
    }
}

fn expression_barrier_grad(t: f64, low: f64, high: f64) -> f64 {
    if t < low {
        -4.0 * (low - t).powi(3)
    } else if t > high {
        4.0 * (t - high).powi(3)
    } else {
        0.0
    }
}

/// `sum_f (|psi_f|_1 + sum_i barrier(psi_f,i))`, with gradients when requested.
pub(crate) fn expression_term(params: &Parameters, low: f64, high: f64, mut grad: Option<(f64, &mut [Vec<f64>])>) -> f64 {
    let mut total = 0.0;
    for (f, frame) in params.frames.iter().enumerate() {
        for (i, &t) in frame.expression.iter().enumerate() {
            total += t.abs() + expression_barrier(t, low, high);
            if let Some((scale, g)) = grad.as_mut() {
                let sign = if t > 0.0 {
                    1.0
                } else if t < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                g[f][i] += (sign + expression_barrier_grad(t, low, high)) * *scale;
            }
        }
    }
    total
}

/// Standing height of a shaped, unposed mesh along the vertical axis.
pub fn model_height(model: &ModelDefinition, shaped: &[Vector3<f64>]) -> Result<f64> {
    let anchors = model
        .height_anchors
        .as_ref()
        .ok_or_else(|| Error::Config("model defines no height anchors".into()))?;
    Ok(model.anchor_point(&anchors.top, shaped).y - model.anchor_point(&anchors.bottom, shaped).y)
}

/// `(height - target)^2`, adding `scale` times its gradient into `grad`.
pub(crate) fn height_term(
    model: &ModelDefinition,
    shaped: &[Vector3<f64>],
    target: f64,
    grad: Option<(f64, &mut [Vector3<f64>])>,
) -> Result<f64> {
    let gap = model_height(model, shaped)? - target;
    if let Some((scale, g)) = grad {
        let anchors = model.height_anchors.as_ref().expect("checked by model_height");
        let k = 2.0 * gap * scale;
        for (anchor, sign) in [(&anchors.top, 1.0), (&anchors.bottom, -1.0)] {
            for (v, w) in model.faces[anchor.face].iter().zip(anchor.weights) {
                g[*v].y += sign * k * w;
            }
        }
    }
    Ok(gap * gap)
}

/// Camera regularizer over stacked parameter vectors.
pub(crate) fn camera_term(
    current: &[CameraParams],
    initial: &[CameraParams],
    enabled: &[bool],
    grad: Option<(f64, &mut [CameraParams])>,
) -> f64 {
    let mut total = 0.0;
    let mut grad = grad;
    for (c, (cur, init)) in current.iter().zip(initial).enumerate() {
        if !enabled[c] {
            continue;
        }
        let mut diffs = [0.0; 7];
        for k in 0..3 {
            diffs[k] = cur.rotation[k] - init.rotation[k];
            diffs[3 + k] = cur.translation[k] - init.translation[k];
        }
        diffs[6] = cur.log_focal - init.log_focal;
        total += diffs.iter().map(|d| d * d).sum::<f64>();
        if let Some((scale, g)) = grad.as_mut() {
            for k in 0..3 {
                g[c].rotation[k] += 2.0 * diffs[k] * *scale;
                g[c].translation[k] += 2.0 * diffs[3 + k] * *scale;
            }
            g[c].log_focal += 2.0 * diffs[6] * *scale;
        }
    }
    total
}

fn shaped_and_frames(model: &ModelDefinition, params: &Parameters) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>, Vec<FrameEval>)> {
    let shaped = shaped_template(model, params)?;
    let rest = regress(model, &shaped);
    let frames = crate::par::map_slice(&params.frames, |f| eval_frame(model, &shaped, &rest, f));
    Ok((shaped, rest, frames))
}

pub fn e_landmarks(model: &ModelDefinition, params: &Parameters, rig: &Rig, obs: &ObservationSet) -> Result<f64> {
    if obs.num_frames() != params.num_frames() || obs.num_cameras() != rig.len() {
        return Err(Error::Shape("observations do not match the parameters or rig".into()));
    }
    let (_, _, frames) = shaped_and_frames(model, params)?;
    let enabled: Vec<bool> = (0..rig.len()).map(|c| rig.is_enabled(c)).collect();
    let mut total = 0.0;
    for (f, fe) in frames.iter().enumerate() {
        total += landmark_frame(model, &fe.verts, &obs.frames[f], &rig.cameras, &enabled, None)?;
    }
    Ok(total)
}

pub fn e_shape(params: &Parameters, body: &GmmPrior, face: &GmmPrior) -> Result<f64> {
    Ok(-body.log_prob(&params.body_shape)? - face.log_prob(&params.face_shape)?)
}

pub fn e_expression(params: &Parameters, low: f64, high: f64) -> f64 {
    expression_term(params, low, high, None)
}

/// `-alpha_b sum log p(q_b) - alpha_h sum log p(q_h)` over frames (and hands).
pub fn e_pose(
    model: &ModelDefinition,
    params: &Parameters,
    body: Option<&PosePrior>,
    hand: Option<&PosePrior>,
    alpha_body: f64,
    alpha_hand: f64,
) -> Result<f64> {
    let shaped = shaped_template(model, params)?;
    let rest = regress(model, &shaped);
    let mut total = 0.0;
    let locals: Vec<Vec<Matrix3<f64>>> = params.frames.iter().map(|f| local_rotations(&f.pose)).collect();
    if let (Some(prior), true) = (body, alpha_body != 0.0) {
        for l in &locals {
            total -= alpha_body * prior.log_prob(&group_vector(model, &model.pose_groups.body, l, &rest))?;
        }
    }
    if let (Some(prior), true) = (hand, alpha_hand != 0.0) {
        for l in &locals {
            for group in &model.pose_groups.hands {
                total -= alpha_hand * prior.log_prob(&group_vector(model, group, l, &rest))?;
            }
        }
    }
    Ok(total)
}

/// Temporal smoothness over `vertices` (all when `None`).
pub(crate) fn temporal_value(frames: &[FrameEval], vertices: Option<&[usize]>) -> f64 {
    let mut total = 0.0;
    for pair in frames.windows(2) {
        let (a, b) = (&pair[0].verts, &pair[1].verts);
        total += match vertices {
            Some(vs) => vs.iter().map(|&v| (b[v] - a[v]).norm_squared()).sum::<f64>(),
            None => a.iter().zip(b).map(|(x, y)| (y - x).norm_squared()).sum::<f64>(),
        };
    }
    total
}

pub fn e_temporal(model: &ModelDefinition, params: &Parameters) -> Result<f64> {
    if params.num_frames() < 2 {
        params.validate(model)?;
        return Ok(0.0);
    }
    let (_, _, frames) = shaped_and_frames(model, params)?;
    Ok(temporal_value(&frames, None))
}

pub fn e_intersect(model: &ModelDefinition, params: &Parameters) -> Result<f64> {
    if model.spheres.is_empty() && model.hulls.is_empty() {
        params.validate(model)?;
        return Ok(0.0);
    }
    let (_, rest, frames) = shaped_and_frames(model, params)?;
    Ok(frames
        .iter()
        .map(|fe| intersect_frame(model, &fe.verts, &sphere_centers(model, &fe.posed, &rest), None))
        .sum())
}

pub fn e_camera(rig: &Rig, rig_init: &Rig) -> Result<f64> {
    if rig.len() != rig_init.len() {
        return Err(Error::Shape(format!(
            "rig has {} cameras, initial rig has {}",
            rig.len(),
            rig_init.len()
        )));
    }
    let cur: Vec<CameraParams> = rig.cameras.iter().map(CameraParams::from_camera).collect::<Result<_>>()?;
    let init: Vec<CameraParams> = rig_init.cameras.iter().map(CameraParams::from_camera).collect::<Result<_>>()?;
    let enabled: Vec<bool> = (0..rig.len()).map(|c| rig.is_enabled(c) && rig_init.is_enabled(c)).collect();
    Ok(camera_term(&cur, &init, &enabled, None))
}

pub fn e_height(model: &ModelDefinition, params: &Parameters, target: f64) -> Result<f64> {
    let shaped = shaped_template(model, params)?;
    height_term(model, &shaped, target, None)
}
