//! Forward and reverse-mode passes of forward kinematics, skinning and pose
//! normalization. The reverse passes are shared by the fitting objective.
//!
//! Joint transforms are kept rest-relative: joint `k` maps a rest-pose point
//! `x` to `rot[k] * x + offset[k]`. With an identity pose every offset is
//! exactly zero, which keeps zero-parameter evaluation bit-exact.

use nalgebra::{Matrix3, Vector3};

use super::ModelDefinition;

#[derive(Debug, Clone)]
pub(crate) struct Posed {
    pub rot: Vec<Matrix3<f64>>,
    pub offset: Vec<Vector3<f64>>,
}

impl Posed {
    pub fn joint_position(&self, k: usize, rest: &[Vector3<f64>]) -> Vector3<f64> {
        self.rot[k] * rest[k] + self.offset[k]
    }
}

pub(crate) fn fk_forward(
    model: &ModelDefinition,
    locals: &[Matrix3<f64>],
    rest: &[Vector3<f64>],
    translation: &Vector3<f64>,
) -> Posed {
    let k = model.num_joints();
    let mut rot = vec![Matrix3::identity(); k];
    let mut offset = vec![Vector3::zeros(); k];
    for &j in &model.topo_order {
        match model.parents[j] {
            None => {
                rot[j] = locals[j];
                offset[j] = (rest[j] - locals[j] * rest[j]) + translation;
            }
            Some(p) => {
                rot[j] = rot[p] * locals[j];
                offset[j] = offset[p] + (rot[p] * rest[j] - rot[j] * rest[j]);
            }
        }
    }
    Posed { rot, offset }
}

pub(crate) struct FkGrad {
    pub locals: Vec<Matrix3<f64>>,
    pub rest: Vec<Vector3<f64>>,
    pub translation: Vector3<f64>,
}

/// Reverse pass of [`fk_forward`]. Consumes the upstream gradients.
pub(crate) fn fk_backward(
    model: &ModelDefinition,
    locals: &[Matrix3<f64>],
    rest: &[Vector3<f64>],
    posed: &Posed,
    mut d_rot: Vec<Matrix3<f64>>,
    mut d_offset: Vec<Vector3<f64>>,
) -> FkGrad {
    let k = model.num_joints();
    let mut d_locals = vec![Matrix3::zeros(); k];
    let mut d_rest = vec![Vector3::zeros(); k];
    let mut d_trans = Vector3::zeros();
    for &j in model.topo_order.iter().rev() {
        let db = d_offset[j];
        let mut dg = d_rot[j];
        match model.parents[j] {
            None => {
                d_rest[j] += db - locals[j].transpose() * db;
                dg -= db * rest[j].transpose();
                d_locals[j] = dg;
                d_trans += db;
            }
            Some(p) => {
                let gp = posed.rot[p];
                d_offset[p] += db;
                d_rot[p] += db * rest[j].transpose();
                d_rest[j] += gp.transpose() * db - posed.rot[j].transpose() * db;
                dg -= db * rest[j].transpose();
                d_rot[p] += dg * locals[j].transpose();
                d_locals[j] = gp.transpose() * dg;
            }
        }
    }
    FkGrad {
        locals: d_locals,
        rest: d_rest,
        translation: d_trans,
    }
}

/// Linear blend skinning in delta form: `x + sum_k w_k ((G_k - I) x + b_k)`.
pub(crate) fn skin_forward(
    model: &ModelDefinition,
    unposed: &[Vector3<f64>],
    posed: &Posed,
) -> Vec<Vector3<f64>> {
    let deltas: Vec<Matrix3<f64>> = posed.rot.iter().map(|g| g - Matrix3::identity()).collect();
    unposed
        .iter()
        .zip(&model.vertex_weights)
        .map(|(x, ws)| {
            let mut acc = Vector3::zeros();
            for &(k, w) in ws {
                acc += (deltas[k] * x + posed.offset[k]) * w;
            }
            x + acc
        })
        .collect()
}

/// Reverse pass of [`skin_forward`]: returns the gradient on the unposed
/// vertices and accumulates into the joint transform gradients.
pub(crate) fn skin_backward(
    model: &ModelDefinition,
    unposed: &[Vector3<f64>],
    posed: &Posed,
    d_vertices: &[Vector3<f64>],
    d_rot: &mut [Matrix3<f64>],
    d_offset: &mut [Vector3<f64>],
) -> Vec<Vector3<f64>> {
    let deltas_t: Vec<Matrix3<f64>> = posed
        .rot
        .iter()
        .map(|g| (g - Matrix3::identity()).transpose())
        .collect();
    let mut d_unposed = Vec::with_capacity(unposed.len());
    for ((x, ws), dv) in unposed.iter().zip(&model.vertex_weights).zip(d_vertices) {
        let mut dx = *dv;
        if dv.x != 0.0 || dv.y != 0.0 || dv.z != 0.0 {
            for &(k, w) in ws {
                let wdv = dv * w;
                dx += deltas_t[k] * wdv;
                d_rot[k] += wdv * x.transpose();
                d_offset[k] += wdv;
            }
        }
        d_unposed.push(dx);
    }
    d_unposed
}

/// Joints driving pose blendshapes: every non-root joint in index order.
pub(crate) fn pose_feature_joints(model: &ModelDefinition) -> impl Iterator<Item = usize> + '_ {
    (0..model.num_joints()).filter(|&j| model.parents[j].is_some())
}

/// Adds the pose-corrective offsets driven by `(R_k - I)`, row-major.
pub(crate) fn add_pose_blendshapes(
    model: &ModelDefinition,
    locals: &[Matrix3<f64>],
    out: &mut [Vector3<f64>],
) {
    if model.pose_blendshapes.is_empty() {
        return;
    }
    for (slot, j) in pose_feature_joints(model).enumerate() {
        let dev = locals[j] - Matrix3::identity();
        for r in 0..3 {
            for c in 0..3 {
                let idx = 9 * slot + 3 * r + c;
                let coeff = dev[(r, c)];
                if coeff == 0.0 || model.pose_blendshapes.is_zero_component(idx) {
                    continue;
                }
                for (v, d) in model.pose_blendshapes.component(idx) {
                    out[*v] += d * coeff;
                }
            }
        }
    }
}

pub(crate) fn pose_blendshapes_backward(
    model: &ModelDefinition,
    d_unposed: &[Vector3<f64>],
    d_locals: &mut [Matrix3<f64>],
) {
    if model.pose_blendshapes.is_empty() {
        return;
    }
    for (slot, j) in pose_feature_joints(model).enumerate() {
        for r in 0..3 {
            for c in 0..3 {
                let idx = 9 * slot + 3 * r + c;
                let g: f64 = model
                    .pose_blendshapes
                    .component(idx)
                    .iter()
                    .map(|(v, d)| d.dot(&d_unposed[*v]))
                    .sum();
                d_locals[j][(r, c)] += g;
            }
        }
    }
}

/// Group-local kinematics with the group root fixed at the origin with
/// identity orientation.
pub(crate) struct GroupPose {
    pub rot: Vec<Matrix3<f64>>,
    pub pos: Vec<Vector3<f64>>,
}

pub(crate) fn group_forward(
    model: &ModelDefinition,
    group: &[usize],
    locals: &[Matrix3<f64>],
    rest: &[Vector3<f64>],
) -> GroupPose {
    let mut rot = vec![Matrix3::identity(); group.len()];
    let mut pos = vec![Vector3::zeros(); group.len()];
    for i in 1..group.len() {
        let j = group[i];
        let p = model.parents[j].expect("validated group member has a parent");
        let pi = group[..i].iter().position(|&g| g == p).expect("validated group order");
        rot[i] = rot[pi] * locals[j];
        pos[i] = pos[pi] + rot[pi] * (rest[j] - rest[p]);
    }
    GroupPose { rot, pos }
}

/// Length of the normalized pose vector of a group with `n` joints.
pub fn group_vector_len(n: usize) -> usize {
    18 * n
}

/// Normalized pose vector `[6D locals, positions, rotations]` of a group.
pub(crate) fn group_vector(
    model: &ModelDefinition,
    group: &[usize],
    locals: &[Matrix3<f64>],
    rest: &[Vector3<f64>],
) -> Vec<f64> {
    let gp = group_forward(model, group, locals, rest);
    let n = group.len();
    let mut q = Vec::with_capacity(group_vector_len(n));
    for (i, &j) in group.iter().enumerate() {
        let r = if i == 0 { Matrix3::identity() } else { locals[j] };
        q.extend_from_slice(&crate::rotation::matrix_to_rot6d(&r));
    }
    for p in &gp.pos {
        q.extend_from_slice(&[p.x, p.y, p.z]);
    }
    for r in &gp.rot {
        for a in 0..3 {
            for b in 0..3 {
                q.push(r[(a, b)]);
            }
        }
    }
    q
}

/// Reverse pass of [`group_vector`]; accumulates into local-rotation and rest
/// joint gradients.
pub(crate) fn group_vector_backward(
    model: &ModelDefinition,
    group: &[usize],
    locals: &[Matrix3<f64>],
    rest: &[Vector3<f64>],
    dq: &[f64],
    d_locals: &mut [Matrix3<f64>],
    d_rest: &mut [Vector3<f64>],
) {
    let n = group.len();
    let gp = group_forward(model, group, locals, rest);
    let mut d_rot = vec![Matrix3::zeros(); n];
    let mut d_pos = vec![Vector3::zeros(); n];
    for i in 0..n {
        let base = 6 * n + 3 * i;
        d_pos[i] = Vector3::new(dq[base], dq[base + 1], dq[base + 2]);
        let base = 9 * n + 9 * i;
        for a in 0..3 {
            for b in 0..3 {
                d_rot[i][(a, b)] = dq[base + 3 * a + b];
            }
        }
    }
    for i in (1..n).rev() {
        let j = group[i];
        let p = model.parents[j].expect("validated group member has a parent");
        let pi = group[..i].iter().position(|&g| g == p).expect("validated group order");
        let dt = d_pos[i];
        d_pos[pi] += dt;
        d_rot[pi] += dt * (rest[j] - rest[p]).transpose();
        let back = gp.rot[pi].transpose() * dt;
        d_rest[j] += back;
        d_rest[p] -= back;
        let dg = d_rot[i];
        d_rot[pi] += dg * locals[j].transpose();
        d_locals[j] += gp.rot[pi].transpose() * dg;
        // 6D part: first two columns of the local rotation.
        let b6 = 6 * i;
        for r in 0..3 {
            d_locals[j][(r, 0)] += dq[b6 + r];
            d_locals[j][(r, 1)] += dq[b6 + 3 + r];
        }
    }
}
