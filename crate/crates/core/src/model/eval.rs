use nalgebra::{Matrix3, Vector3};

use super::kinematics::{
    add_pose_blendshapes, fk_forward, group_vector, skin_forward, Posed,
};
use super::{LandmarkSet, ModelDefinition, Parameters};
use crate::error::{Error, Result};
use crate::rotation::axis_angle_to_matrix;

/// World-space joint translations and rotations.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTransforms {
    pub translations: Vec<Vector3<f64>>,
    pub rotations: Vec<Matrix3<f64>>,
}

/// Template plus the identity-dependent blendshapes (body, face, hand).
pub fn shaped_template(model: &ModelDefinition, params: &Parameters) -> Result<Vec<Vector3<f64>>> {
    params.validate(model)?;
    let mut out = model.template.clone();
    model.body_shape.accumulate(&params.body_shape, &mut out);
    model.face_shape.accumulate(&params.face_shape, &mut out);
    model.hand_shape.accumulate(&params.hand_shape, &mut out);
    Ok(out)
}

pub(crate) fn local_rotations(pose: &[[f64; 3]]) -> Vec<Matrix3<f64>> {
    pose.iter()
        .map(|a| axis_angle_to_matrix(&Vector3::from(*a)))
        .collect()
}

pub(crate) fn regress(model: &ModelDefinition, vertices: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    model
        .regressor
        .iter()
        .map(|row| {
            row.iter()
                .fold(Vector3::zeros(), |acc, (v, w)| acc + vertices[*v] * *w)
        })
        .collect()
}

/// Unposed mesh of one frame: shaped template, expression and pose correctives.
pub fn evaluate_template(
    model: &ModelDefinition,
    params: &Parameters,
    frame: usize,
) -> Result<Vec<Vector3<f64>>> {
    let fp = params.frame(frame)?;
    let mut out = shaped_template(model, params)?;
    model.expression.accumulate(&fp.expression, &mut out);
    add_pose_blendshapes(model, &local_rotations(&fp.pose), &mut out);
    Ok(out)
}

/// Rest joint locations of the shaped (expression-free, unposed) body.
pub fn regress_joints(model: &ModelDefinition, params: &Parameters) -> Result<Vec<Vector3<f64>>> {
    Ok(regress(model, &shaped_template(model, params)?))
}

fn posed_frame(
    model: &ModelDefinition,
    params: &Parameters,
    frame: usize,
    rest: &[Vector3<f64>],
) -> Result<(Vec<Matrix3<f64>>, Posed)> {
    let fp = params.frame(frame)?;
    let locals = local_rotations(&fp.pose);
    let posed = fk_forward(model, &locals, rest, &fp.translation());
    Ok((locals, posed))
}

pub fn forward_kinematics(
    model: &ModelDefinition,
    params: &Parameters,
    frame: usize,
) -> Result<JointTransforms> {
    let rest = regress_joints(model, params)?;
    let (_, posed) = posed_frame(model, params, frame, &rest)?;
    Ok(JointTransforms {
        translations: (0..rest.len()).map(|k| posed.joint_position(k, &rest)).collect(),
        rotations: posed.rot,
    })
}

/// Linear blend skinning of `unposed` by world joint transforms about the rest joints.
pub fn skin(
    model: &ModelDefinition,
    unposed: &[Vector3<f64>],
    joints: &JointTransforms,
    rest_joints: &[Vector3<f64>],
) -> Result<Vec<Vector3<f64>>> {
    if unposed.len() != model.num_vertices()
        || joints.rotations.len() != model.num_joints()
        || joints.translations.len() != model.num_joints()
        || rest_joints.len() != model.num_joints()
    {
        return Err(Error::Shape("skinning inputs do not match the model".into()));
    }
    let posed = Posed {
        offset: (0..rest_joints.len())
            .map(|k| joints.translations[k] - joints.rotations[k] * rest_joints[k])
            .collect(),
        rot: joints.rotations.clone(),
    };
    Ok(skin_forward(model, unposed, &posed))
}

/// The full mesh generating function for one frame.
pub fn evaluate_mesh(
    model: &ModelDefinition,
    params: &Parameters,
    frame: usize,
) -> Result<Vec<Vector3<f64>>> {
    let fp = params.frame(frame)?;
    let shaped = shaped_template(model, params)?;
    let rest = regress(model, &shaped);
    let (locals, posed) = posed_frame(model, params, frame, &rest)?;
    let mut unposed = shaped;
    model.expression.accumulate(&fp.expression, &mut unposed);
    add_pose_blendshapes(model, &locals, &mut unposed);
    Ok(skin_forward(model, &unposed, &posed))
}

/// 3D landmark positions of one set on the given vertices.
pub fn extract_landmarks(
    model: &ModelDefinition,
    vertices: &[Vector3<f64>],
    set: LandmarkSet,
) -> Result<Vec<Vector3<f64>>> {
    if vertices.len() != model.num_vertices() {
        return Err(Error::Shape(format!(
            "got {} vertices, model has {}",
            vertices.len(),
            model.num_vertices()
        )));
    }
    Ok(model
        .landmark_set(set)
        .iter()
        .map(|a| model.anchor_point(a, vertices))
        .collect())
}

/// Root-normalized pose vector over every joint (parents first): 6D local
/// rotations, then joint positions, then joint rotations, with the root
/// placed at the origin with identity orientation.
pub fn normalize_pose(model: &ModelDefinition, params: &Parameters, frame: usize) -> Result<Vec<f64>> {
    let group = model.topo_order.clone();
    normalize_pose_group(model, params, frame, &group)
}

/// Same as [`normalize_pose`] restricted to a joint group rooted at its first member.
pub fn normalize_pose_group(
    model: &ModelDefinition,
    params: &Parameters,
    frame: usize,
    group: &[usize],
) -> Result<Vec<f64>> {
    let rest = regress_joints(model, params)?;
    let locals = local_rotations(&params.frame(frame)?.pose);
    Ok(group_vector(model, group, &locals, &rest))
}
