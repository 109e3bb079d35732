use nalgebra::{Matrix3, Vector3};

use super::terms::{
    camera_term, eval_frame, expression_term, height_term, intersect_frame, landmark_frame, sphere_centers,
    temporal_value, CameraGrad, FrameEval, IntersectGrad, LandmarkGrad,
};
use super::{CameraParams, EnergyTerms, EnergyWeights, Priors, StageMask, State};
use crate::camera::{Camera, Intrinsics, Rig};
use crate::error::{Error, Result};
use crate::model::kinematics::{fk_backward, group_vector, group_vector_backward, pose_blendshapes_backward, skin_backward};
use crate::model::{regress, shaped_template, ModelDefinition};
use crate::observations::ObservationSet;
use crate::rotation::axis_angle_backward;

/// A fitting problem: model, observations, camera setup, priors and weights.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    pub model: &'a ModelDefinition,
    pub observations: &'a ObservationSet,
    /// Per-camera intrinsics supplying principal point, image size and aspect ratio.
    pub intrinsics: Vec<Intrinsics>,
    pub enabled: Vec<bool>,
    /// Camera parameters the camera regularizer pulls towards.
    pub camera_init: Vec<CameraParams>,
    pub priors: &'a Priors,
    pub weights: EnergyWeights,
    /// Frames whose landmarks enter the data term.
    pub landmark_frames: Vec<bool>,
    /// Vertices covered by the temporal term; all when `None`.
    pub temporal_vertices: Option<Vec<usize>>,
}

impl<'a> Problem<'a> {
    pub fn new(
        model: &'a ModelDefinition,
        observations: &'a ObservationSet,
        rig: &Rig,
        priors: &'a Priors,
        weights: EnergyWeights,
    ) -> Result<Self> {
        weights.validate()?;
        if observations.num_cameras() != rig.len() {
            return Err(Error::Shape(format!(
                "observations have {} cameras, rig has {}",
                observations.num_cameras(),
                rig.len()
            )));
        }
        observations.validate(model.num_landmarks())?;
        let check = |what: &str, dim: Option<usize>, want: usize| match dim {
            Some(d) if d != want => Err(Error::Shape(format!("{what} prior has dimension {d}, model needs {want}"))),
            _ => Ok(()),
        };
        check("body shape", priors.body_shape.as_ref().map(|p| p.dim), model.dims.body_shape)?;
        check("face shape", priors.face_shape.as_ref().map(|p| p.dim), model.dims.face_shape)?;
        Ok(Problem {
            model,
            observations,
            intrinsics: rig.cameras.iter().map(|c| c.intrinsics).collect(),
            enabled: (0..rig.len()).map(|c| rig.is_enabled(c)).collect(),
            camera_init: rig.cameras.iter().map(CameraParams::from_camera).collect::<Result<_>>()?,
            priors,
            weights,
            landmark_frames: vec![true; observations.num_frames()],
            temporal_vertices: None,
        })
    }

    pub fn cameras(&self, state: &State) -> Vec<Camera> {
        state
            .cameras
            .iter()
            .zip(&self.intrinsics)
            .map(|(p, k)| p.to_camera(k))
            .collect()
    }
}

/// Objective value, its unweighted terms and the gradient over the free parameters.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub terms: EnergyTerms,
    pub gradient: State,
}

struct FrameGrad {
    landmarks: f64,
    intersection: f64,
    shaped: Vec<Vector3<f64>>,
    expression: Vec<f64>,
    pose: Vec<[f64; 3]>,
    translation: Vector3<f64>,
    cameras: Vec<CameraGrad>,
}

struct Shared<'p> {
    problem: &'p Problem<'p>,
    cameras: Vec<Camera>,
    rest: Vec<Vector3<f64>>,
    frames: Vec<FrameEval>,
    /// Upstream gradient on the body group vector of each frame.
    body_dq: Option<Vec<Vec<f64>>>,
    /// Upstream gradient per frame and hand group.
    hand_dq: Option<Vec<Vec<Vec<f64>>>>,
}

fn frame_backward(sh: &Shared<'_>, state: &State, f: usize) -> Result<FrameGrad> {
    let p = sh.problem;
    let model = p.model;
    let w = &p.weights;
    let fe = &sh.frames[f];
    let n = model.num_vertices();
    let k = model.num_joints();
    let mut d_verts = vec![Vector3::zeros(); n];

    if w.temporal != 0.0 && sh.frames.len() > 1 {
        let mut add = |v: usize| {
            let mut g = Vector3::zeros();
            if f > 0 {
                g += fe.verts[v] - sh.frames[f - 1].verts[v];
            }
            if f + 1 < sh.frames.len() {
                g -= sh.frames[f + 1].verts[v] - fe.verts[v];
            }
            d_verts[v] += g * (2.0 * w.temporal);
        };
        match &p.temporal_vertices {
            Some(vs) => vs.iter().for_each(|&v| add(v)),
            None => (0..n).for_each(add),
        }
    }

    let mut cameras = vec![CameraGrad::default(); sh.cameras.len()];
    let mut landmarks = 0.0;
    if w.landmarks != 0.0 && p.landmark_frames[f] {
        landmarks = landmark_frame(
            model,
            &fe.verts,
            &p.observations.frames[f],
            &sh.cameras,
            &p.enabled,
            Some(LandmarkGrad {
                scale: w.landmarks,
                verts: &mut d_verts,
                cameras: &mut cameras,
            }),
        )?;
    }

    let mut intersection = 0.0;
    let mut d_centers = vec![Vector3::zeros(); model.spheres.len()];
    let centers = sphere_centers(model, &fe.posed, &sh.rest);
    if w.intersection != 0.0 {
        intersection = intersect_frame(
            model,
            &fe.verts,
            &centers,
            Some(IntersectGrad {
                scale: w.intersection,
                verts: &mut d_verts,
                centers: &mut d_centers,
            }),
        );
    }

    let mut d_rot = vec![Matrix3::zeros(); k];
    let mut d_offset = vec![Vector3::zeros(); k];
    let d_unposed = skin_backward(model, &fe.unposed, &fe.posed, &d_verts, &mut d_rot, &mut d_offset);
    let mut d_rest_extra = vec![Vector3::zeros(); k];
    for (sphere, dc) in model.spheres.iter().zip(&d_centers) {
        let j = sphere.joint;
        d_rot[j] += dc * sh.rest[j].transpose();
        d_offset[j] += dc;
        d_rest_extra[j] += fe.posed.rot[j].transpose() * dc;
    }
    let fk = fk_backward(model, &fe.locals, &sh.rest, &fe.posed, d_rot, d_offset);
    let mut d_locals = fk.locals;
    let mut d_rest = fk.rest;
    for (a, b) in d_rest.iter_mut().zip(&d_rest_extra) {
        *a += b;
    }
    pose_blendshapes_backward(model, &d_unposed, &mut d_locals);
    if let Some(dq) = &sh.body_dq {
        group_vector_backward(
            model,
            &model.pose_groups.body,
            &fe.locals,
            &sh.rest,
            &dq[f],
            &mut d_locals,
            &mut d_rest,
        );
    }
    if let Some(dq) = &sh.hand_dq {
        for (group, g) in model.pose_groups.hands.iter().zip(&dq[f]) {
            group_vector_backward(model, group, &fe.locals, &sh.rest, g, &mut d_locals, &mut d_rest);
        }
    }
    let frame = &state.params.frames[f];
    let pose = frame
        .pose
        .iter()
        .zip(&d_locals)
        .map(|(a, d)| axis_angle_backward(&Vector3::from(*a), d).into())
        .collect();
    let expression = model.expression.project(&d_unposed);
    let mut shaped = d_unposed;
    for (row, dr) in model.regressor.iter().zip(&d_rest) {
        for &(v, wt) in row {
            shaped[v] += dr * wt;
        }
    }
    Ok(FrameGrad {
        landmarks,
        intersection,
        shaped,
        expression,
        pose,
        translation: fk.translation,
        cameras,
    })
}

/// Negative log-density of the per-frame group vectors and its upstream gradient.
fn pose_prior_term(
    prior: &crate::priors::PosePrior,
    vectors: &[Vec<f64>],
    alpha: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let refs: Vec<&[f64]> = vectors.iter().map(Vec::as_slice).collect();
    let (lp, grads) = prior.log_prob_with_grad(&refs)?;
    let nll = -lp.iter().sum::<f64>();
    let dq = grads
        .into_iter()
        .map(|g| g.into_iter().map(|v| -alpha * v).collect())
        .collect();
    Ok((nll, dq))
}

/// Weighted objective and its gradient over the parameters freed by `mask`.
pub fn total_objective(problem: &Problem<'_>, state: &State, mask: &StageMask) -> Result<Evaluation> {
    let model = problem.model;
    let w = &problem.weights;
    let num_frames = state.params.num_frames();
    if problem.observations.num_frames() != num_frames || problem.landmark_frames.len() != num_frames {
        return Err(Error::Shape(format!(
            "parameters have {num_frames} frames, observations have {}",
            problem.observations.num_frames()
        )));
    }
    if state.cameras.len() != problem.intrinsics.len() {
        return Err(Error::Shape("camera parameter count does not match the rig".into()));
    }
    let shaped = shaped_template(model, &state.params)?;
    let rest = regress(model, &shaped);
    let frames = crate::par::map_slice(&state.params.frames, |fp| eval_frame(model, &shaped, &rest, fp));
    let mut terms = EnergyTerms::default();

    let mut body_dq = None;
    if let (Some(prior), true) = (&problem.priors.body_pose, w.pose_body != 0.0) {
        let qs: Vec<Vec<f64>> = frames
            .iter()
            .map(|fe| group_vector(model, &model.pose_groups.body, &fe.locals, &rest))
            .collect();
        let (nll, dq) = pose_prior_term(prior, &qs, w.pose_body)?;
        terms.pose_body = nll;
        body_dq = Some(dq);
    }
    let mut hand_dq = None;
    let hands = model.pose_groups.hands.len();
    if let (Some(prior), true, true) = (&problem.priors.hand_pose, w.pose_hand != 0.0, hands > 0) {
        let qs: Vec<Vec<f64>> = frames
            .iter()
            .flat_map(|fe| {
                model
                    .pose_groups
                    .hands
                    .iter()
                    .map(|g| group_vector(model, g, &fe.locals, &rest))
            })
            .collect();
        let (nll, dq) = pose_prior_term(prior, &qs, w.pose_hand)?;
        terms.pose_hand = nll;
        hand_dq = Some(dq.chunks(hands).map(<[Vec<f64>]>::to_vec).collect::<Vec<_>>());
    }

    let shared = Shared {
        problem,
        cameras: problem.cameras(state),
        rest,
        frames,
        body_dq,
        hand_dq,
    };
    let per_frame = crate::par::map_range(num_frames, |f| frame_backward(&shared, state, f));

    let mut gradient = state.zeros_like();
    let mut d_shaped = vec![Vector3::zeros(); model.num_vertices()];
    let mut camera_grads = vec![CameraGrad::default(); state.cameras.len()];
    for (f, fg) in per_frame.into_iter().enumerate() {
        let fg = fg?;
        terms.landmarks += fg.landmarks;
        terms.intersection += fg.intersection;
        for (a, b) in d_shaped.iter_mut().zip(&fg.shaped) {
            *a += b;
        }
        let out = &mut gradient.params.frames[f];
        out.expression = fg.expression;
        out.pose = fg.pose;
        out.translation = fg.translation.into();
        for (a, b) in camera_grads.iter_mut().zip(&fg.cameras) {
            a.add(b);
        }
    }
    if w.temporal != 0.0 {
        terms.temporal = temporal_value(&shared.frames, problem.temporal_vertices.as_deref());
    }
    if w.expression != 0.0 {
        let mut d_expr: Vec<Vec<f64>> = gradient.params.frames.iter().map(|f| f.expression.clone()).collect();
        terms.expression = expression_term(
            &state.params,
            w.barrier_low,
            w.barrier_high,
            Some((w.expression, &mut d_expr)),
        );
        for (out, d) in gradient.params.frames.iter_mut().zip(d_expr) {
            out.expression = d;
        }
    }
    if w.height != 0.0 {
        let target = w.target_height.expect("validated weights carry a target height");
        terms.height = height_term(model, &shaped, target, Some((w.height, &mut d_shaped)))?;
    }

    gradient.params.body_shape = model.body_shape.project(&d_shaped);
    gradient.params.face_shape = model.face_shape.project(&d_shaped);
    gradient.params.hand_shape = model.hand_shape.project(&d_shaped);
    if w.shape != 0.0 {
        for (prior, coeffs, grad) in [
            (&problem.priors.body_shape, &state.params.body_shape, &mut gradient.params.body_shape),
            (&problem.priors.face_shape, &state.params.face_shape, &mut gradient.params.face_shape),
        ] {
            if let Some(prior) = prior {
                let (lp, g) = prior.log_prob_with_grad(coeffs)?;
                terms.shape -= lp;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a -= w.shape * b;
                }
            }
        }
    }

    for (c, cg) in camera_grads.iter().enumerate() {
        let out = &mut gradient.cameras[c];
        out.rotation = axis_angle_backward(&Vector3::from(state.cameras[c].rotation), &cg.rotation).into();
        out.translation = cg.translation.into();
        out.log_focal = cg.log_focal;
    }
    if w.camera != 0.0 {
        terms.camera = camera_term(
            &state.cameras,
            &problem.camera_init,
            &problem.enabled,
            Some((w.camera, &mut gradient.cameras)),
        );
    }

    mask.restrict(model, &mut gradient, &problem.enabled);
    let value = terms.total(w);
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective is not finite ({value})")));
    }
    Ok(Evaluation { value, terms, gradient })
}
