//! Rig calibration from face landmarks.

use nalgebra::{Matrix3, Vector2, Vector3};

use super::{pnp_estimate, Camera, Intrinsics, Pose, Rig, MIN_PNP_POINTS};
use crate::error::{Error, Result};
use crate::model::{evaluate_template, regress_joints, LandmarkAnchor, LandmarkSet, ModelDefinition, Parameters};
use crate::observations::ObservationSet;
use crate::optim::{lbfgs_minimize, LbfgsConfig};
use crate::rotation::{axis_angle_backward, axis_angle_to_matrix, matrix_to_axis_angle};

/// Outcome of [`calibrate_rig_from_head`]. Failed cameras are listed and
/// marked disabled in the rig.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub rig: Rig,
    pub frame: usize,
    pub failures: Vec<(usize, String)>,
}

const MIN_DEPTH: f64 = 0.01;
const BEHIND_PENALTY: f64 = 1e6;
const REFINE_ITERATIONS: usize = 500;

/// Share of a face landmark carried by one joint: the landmark is the sum of
/// `rotation * (moment - weight * pivot) + weight * pivot` over its parts,
/// with the head part fixed to the identity.
struct Part {
    /// Index into the articulated joints; `None` for the head itself.
    joint: Option<usize>,
    weight: f64,
    moment: Vector3<f64>,
    /// Derivative of `moment` with respect to each face-shape and expression coefficient.
    basis: Vec<Vector3<f64>>,
}

/// Face landmarks as a function of the head's articulated children (such as
/// a jaw) and of the face-shape and expression coefficients, in the rest
/// frame of the head.
struct HeadModel {
    pivots: Vec<Vector3<f64>>,
    /// Per face landmark; empty when it also follows joints outside the head.
    parts: Vec<Vec<Part>>,
    coefficients: usize,
}

impl HeadModel {
    fn new(model: &ModelDefinition, params: &Parameters) -> Result<Self> {
        let anchors = model.landmark_set(LandmarkSet::Face);
        let joint_weight = |joint: usize, anchor: &LandmarkAnchor| -> f64 {
            let face = model.faces[anchor.face];
            (0..3).map(|k| anchor.weights[k] * model.skinning_weight(joint, face[k])).sum()
        };
        let head = (0..model.num_joints())
            .map(|j| (j, anchors.iter().map(|a| joint_weight(j, a)).sum::<f64>()))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(j, _)| j)
            .ok_or_else(|| Error::InvalidModel("model has no joints".into()))?;
        let children: Vec<usize> = (0..model.num_joints())
            .filter(|&j| model.parents[j] == Some(head) && anchors.iter().any(|a| joint_weight(j, a) > 0.0))
            .collect();

        let rest = evaluate_template(model, params, 0)?;
        let shape = params.face_shape.len();
        let coefficients = shape + model.dims.expression;
        let displacements = (0..coefficients)
            .map(|i| {
                let mut unit = params.clone();
                if i < shape {
                    unit.face_shape[i] += 1.0;
                } else {
                    unit.frames[0].expression[i - shape] = 1.0;
                }
                Ok(evaluate_template(model, &unit, 0)?
                    .iter()
                    .zip(&rest)
                    .map(|(m, r)| m - r)
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        let joints = regress_joints(model, params)?;

        let members: Vec<(Option<usize>, usize)> =
            std::iter::once((None, head)).chain(children.iter().enumerate().map(|(i, &j)| (Some(i), j))).collect();
        let parts = anchors
            .iter()
            .map(|anchor| {
                let face = model.faces[anchor.face];
                let parts: Vec<Part> = members
                    .iter()
                    .filter_map(|&(slot, joint)| {
                        let weight = joint_weight(joint, anchor);
                        if weight == 0.0 {
                            return None;
                        }
                        let share = |k: usize| anchor.weights[k] * model.skinning_weight(joint, face[k]);
                        Some(Part {
                            joint: slot,
                            weight,
                            moment: (0..3).map(|k| rest[face[k]] * share(k)).sum(),
                            basis: displacements
                                .iter()
                                .map(|d| (0..3).map(|k| d[face[k]] * share(k)).sum())
                                .collect(),
                        })
                    })
                    .collect();
                let covered: f64 = parts.iter().map(|p| p.weight).sum();
                if covered < 1.0 - 1e-9 {
                    Vec::new()
                } else {
                    parts
                }
            })
            .collect();
        Ok(HeadModel {
            pivots: children.iter().map(|&j| joints[j]).collect(),
            parts,
            coefficients,
        })
    }

    /// Landmarks that follow the head alone.
    fn is_rigid(&self, landmark: usize) -> bool {
        let parts = &self.parts[landmark];
        !parts.is_empty() && parts.iter().all(|p| p.joint.is_none())
    }

    fn is_modelled(&self, landmark: usize) -> bool {
        !self.parts[landmark].is_empty()
    }

    fn points(&self, rotations: &[Matrix3<f64>], offsets: &[f64]) -> Vec<Vector3<f64>> {
        self.parts
            .iter()
            .map(|parts| {
                parts
                    .iter()
                    .map(|p| {
                        let moment = p.moment + p.basis.iter().zip(offsets).map(|(b, k)| b * *k).sum::<Vector3<f64>>();
                        match p.joint {
                            None => moment,
                            Some(j) => {
                                let pivot = self.pivots[j] * p.weight;
                                rotations[j] * (moment - pivot) + pivot
                            }
                        }
                    })
                    .sum()
            })
            .collect()
    }

    /// Accumulates gradients on the joint rotation matrices and on the
    /// coefficients from gradients on the landmarks.
    fn backward(
        &self,
        rotations: &[Matrix3<f64>],
        offsets: &[f64],
        d_points: &[Vector3<f64>],
        d_rotations: &mut [Matrix3<f64>],
        d_offsets: &mut [f64],
    ) {
        for (parts, d_p) in self.parts.iter().zip(d_points) {
            if d_p.iter().all(|v| *v == 0.0) {
                continue;
            }
            for p in parts {
                let d_moment = match p.joint {
                    None => *d_p,
                    Some(j) => {
                        let moment =
                            p.moment + p.basis.iter().zip(offsets).map(|(b, k)| b * *k).sum::<Vector3<f64>>();
                        d_rotations[j] += d_p * (moment - self.pivots[j] * p.weight).transpose();
                        rotations[j].transpose() * d_p
                    }
                };
                for (d, b) in d_offsets.iter_mut().zip(&p.basis) {
                    *d += b.dot(&d_moment);
                }
            }
        }
    }
}

/// Frame where the most cameras see at least six face landmarks; ties go to
/// the larger total landmark count, then the earlier frame.
fn calibration_frame(obs: &ObservationSet, face_ids: std::ops::Range<usize>) -> usize {
    let mut best = (0usize, 0usize);
    let mut frame = 0;
    for (f, views) in obs.frames.iter().enumerate() {
        let counts: Vec<usize> = views
            .iter()
            .map(|v| v.iter().filter(|l| face_ids.contains(&l.id)).count())
            .collect();
        let usable = counts.iter().filter(|&&c| c >= MIN_PNP_POINTS).count();
        let total = counts.iter().sum();
        if (usable, total) > best {
            best = (usable, total);
            frame = f;
        }
    }
    frame
}

/// One camera's face observations: landmark index within the face set,
/// pixel position and sigma.
type FaceView = Vec<(usize, Vector2<f64>, f64)>;

/// Camera poses, head joint rotations and coefficients refined together.
struct Refinement<'a> {
    intrinsics: Vec<Intrinsics>,
    views: Vec<&'a FaceView>,
    head: &'a HeadModel,
}

impl Refinement<'_> {
    fn joints(&self) -> usize {
        self.head.pivots.len()
    }

    fn cams(&self) -> usize {
        6 * self.views.len()
    }

    fn len(&self) -> usize {
        self.cams() + 3 * self.joints() + self.head.coefficients
    }

    /// Data term plus unit Gaussian priors on everything but the cameras.
    fn evaluate(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let (cams, joints) = (self.cams(), self.joints());
        let priors = &x[cams..];
        let mut value = 0.5 * priors.iter().map(|v| v * v).sum::<f64>();
        let mut grad = vec![0.0; cams];
        grad.extend_from_slice(priors);

        let joint_axes: Vec<Vector3<f64>> =
            (0..joints).map(|j| Vector3::new(x[cams + 3 * j], x[cams + 3 * j + 1], x[cams + 3 * j + 2])).collect();
        let rotations: Vec<Matrix3<f64>> = joint_axes.iter().map(axis_angle_to_matrix).collect();
        let offsets = &x[cams + 3 * joints..];
        let points = self.head.points(&rotations, offsets);
        let mut d_points = vec![Vector3::zeros(); points.len()];
        for (slot, view) in self.views.iter().enumerate() {
            let w = Vector3::new(x[6 * slot], x[6 * slot + 1], x[6 * slot + 2]);
            let t = Vector3::new(x[6 * slot + 3], x[6 * slot + 4], x[6 * slot + 5]);
            let rot = axis_angle_to_matrix(&w);
            let mut d_rot = Matrix3::zeros();
            let mut d_t = Vector3::zeros();
            for &(l, uv, sigma) in view.iter() {
                let p = rot * points[l] + t;
                let (proj, mut jac) =
                    self.intrinsics[slot].project_with_jacobian(&Vector3::new(p.x, p.y, p.z.max(MIN_DEPTH)));
                let r = (proj - uv) / sigma;
                value += 0.5 * r.norm_squared();
                let mut d_p = Vector3::zeros();
                if p.z < MIN_DEPTH {
                    jac.set_column(2, &Vector2::zeros());
                    let gap = MIN_DEPTH - p.z;
                    value += BEHIND_PENALTY * gap * gap;
                    d_p.z -= 2.0 * BEHIND_PENALTY * gap;
                }
                d_p += jac.transpose() * (r / sigma);
                d_t += d_p;
                d_rot += d_p * points[l].transpose();
                d_points[l] += rot.transpose() * d_p;
            }
            grad[6 * slot..6 * slot + 3].copy_from_slice(axis_angle_backward(&w, &d_rot).as_slice());
            grad[6 * slot + 3..6 * slot + 6].copy_from_slice(d_t.as_slice());
        }
        let mut d_rotations = vec![Matrix3::zeros(); joints];
        let mut d_offsets = vec![0.0; self.head.coefficients];
        self.head.backward(&rotations, offsets, &d_points, &mut d_rotations, &mut d_offsets);
        for j in 0..joints {
            let d_w = axis_angle_backward(&joint_axes[j], &d_rotations[j]);
            for k in 0..3 {
                grad[cams + 3 * j + k] += d_w[k];
            }
        }
        for (g, d) in grad[cams + 3 * joints..].iter_mut().zip(&d_offsets) {
            *g += d;
        }
        (value, grad)
    }
}

/// Refines every camera with observations together with the head.
fn refine(cameras: &mut [Camera], views: &[FaceView], head: &HeadModel) -> Result<()> {
    let active: Vec<usize> = (0..cameras.len()).filter(|&c| !views[c].is_empty()).collect();
    let problem = Refinement {
        intrinsics: active.iter().map(|&c| cameras[c].intrinsics).collect(),
        views: active.iter().map(|&c| &views[c]).collect(),
        head,
    };
    let mut x0 = Vec::with_capacity(problem.len());
    for &c in &active {
        let w = matrix_to_axis_angle(&cameras[c].pose.rotation)?;
        x0.extend(w.iter().chain(cameras[c].pose.translation.iter()));
    }
    x0.resize(problem.len(), 0.0);
    let config = LbfgsConfig {
        max_iterations: REFINE_ITERATIONS,
        ..LbfgsConfig::default()
    };
    let result = lbfgs_minimize(|x: &[f64]| Ok(problem.evaluate(x)), &x0, &config)?;
    for (slot, &c) in active.iter().enumerate() {
        let v = &result.x[6 * slot..6 * slot + 6];
        cameras[c].pose = Pose {
            rotation: axis_angle_to_matrix(&Vector3::new(v[0], v[1], v[2])),
            translation: Vector3::new(v[3], v[4], v[5]),
        };
    }
    Ok(())
}

/// Estimates every camera's pose relative to the (shape-adjusted) template
/// head from 2D face landmarks. The world frame is the model's rest frame,
/// so the head defines origin, orientation and scale.
///
/// Each camera is first placed by PnP on the landmarks that follow the head
/// rigidly; all cameras are then refined together with the head's
/// articulated children and its face-shape and expression coefficients.
pub fn calibrate_rig_from_head(
    obs: &ObservationSet,
    model: &ModelDefinition,
    face_shape: &[f64],
    intrinsics: &[Intrinsics],
) -> Result<Calibration> {
    if intrinsics.len() != obs.num_cameras() {
        return Err(Error::Shape(format!(
            "{} intrinsics for {} cameras",
            intrinsics.len(),
            obs.num_cameras()
        )));
    }
    if obs.num_frames() == 0 || obs.num_cameras() == 0 {
        return Err(Error::InsufficientData("no observations to calibrate from".into()));
    }
    let mut params = Parameters::zeros(model, 1);
    if face_shape.len() != params.face_shape.len() {
        return Err(Error::Shape(format!(
            "face shape guess has length {}, expected {}",
            face_shape.len(),
            params.face_shape.len()
        )));
    }
    params.face_shape.copy_from_slice(face_shape);
    let head = HeadModel::new(model, &params)?;
    let rest = head.points(&vec![Matrix3::identity(); head.pivots.len()], &vec![0.0; head.coefficients]);
    let offset = model.landmark_offset(LandmarkSet::Face);
    let face_ids = offset..offset + rest.len();
    let frame = calibration_frame(obs, face_ids.clone());

    let face_view = |c: usize, keep: &dyn Fn(usize) -> bool| -> FaceView {
        obs.view(frame, c)
            .iter()
            .filter(|l| face_ids.contains(&l.id) && keep(l.id - offset))
            .map(|l| (l.id - offset, Vector2::new(l.x, l.y), l.sigma))
            .collect()
    };
    let results = crate::par::map_range(obs.num_cameras(), |c| {
        let mut view = face_view(c, &|l| head.is_rigid(l));
        if view.len() < MIN_PNP_POINTS {
            view = face_view(c, &|l| head.is_modelled(l));
        }
        if view.len() < MIN_PNP_POINTS {
            return Err(format!("observes only {} face landmarks in frame {frame}", view.len()));
        }
        let (p3, p2): (Vec<Vector3<f64>>, Vec<Vector2<f64>>) = view.iter().map(|&(l, uv, _)| (rest[l], uv)).unzip();
        pnp_estimate(&p3, &p2, &intrinsics[c]).map_err(|e| e.to_string())
    });
    let mut cameras = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (c, r) in results.into_iter().enumerate() {
        let pose = r.unwrap_or_else(|msg| {
            failures.push((c, msg));
            Pose::identity()
        });
        cameras.push(Camera {
            intrinsics: intrinsics[c],
            pose,
        });
    }
    if failures.len() == cameras.len() {
        return Err(Error::Calibration { failures });
    }
    // Rigid landmarks first, so the articulated joints start from a sound rig.
    let keeps: [&dyn Fn(usize) -> bool; 2] = [&|l| head.is_rigid(l), &|l| head.is_modelled(l)];
    for keep in keeps {
        let views: Vec<FaceView> = (0..cameras.len())
            .map(|c| {
                if failures.iter().any(|(f, _)| *f == c) {
                    Vec::new()
                } else {
                    face_view(c, keep)
                }
            })
            .collect();
        refine(&mut cameras, &views, &head)?;
    }
    let rig = Rig {
        cameras,
        calibrated: false,
        disabled: failures.iter().map(|(c, _)| *c).collect(),
    };
    Ok(Calibration { rig, frame, failures })
}
