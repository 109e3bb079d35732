//! Fitting energies and the total objective with its analytic gradient.

mod objective;
mod terms;

pub use objective::{total_objective, Evaluation, Problem};
pub use terms::{
    e_camera, e_expression, e_height, e_intersect, e_landmarks, e_pose, e_shape, e_temporal, expression_barrier,
    hull_penetration, model_height, BEHIND_CAMERA_WEIGHT, MIN_DEPTH,
};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Intrinsics, Pose, Rig};
use crate::error::{Error, Result};
use crate::model::{ModelDefinition, Parameters};
use crate::priors::{GmmPrior, PosePrior};
use crate::rotation::{axis_angle_to_matrix, matrix_to_axis_angle};

/// Nonnegative weight of every energy term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyWeights {
    pub landmarks: f64,
    pub shape: f64,
    pub expression: f64,
    pub pose_body: f64,
    pub pose_hand: f64,
    pub temporal: f64,
    pub intersection: f64,
    pub camera: f64,
    pub height: f64,
    /// Subject height in meters for the height term.
    pub target_height: Option<f64>,
    pub barrier_low: f64,
    pub barrier_high: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        EnergyWeights {
            landmarks: 1.0,
            shape: 1e-3,
            expression: 1e-2,
            pose_body: 1e-3,
            pose_hand: 1e-3,
            temporal: 50.0,
            intersection: 1.0,
            camera: 1e2,
            height: 0.0,
            target_height: None,
            barrier_low: 0.0,
            barrier_high: 1.0,
        }
    }
}

impl EnergyWeights {
    /// Only the landmark term.
    pub fn landmarks_only() -> Self {
        EnergyWeights {
            shape: 0.0,
            expression: 0.0,
            pose_body: 0.0,
            pose_hand: 0.0,
            temporal: 0.0,
            intersection: 0.0,
            camera: 0.0,
            ..EnergyWeights::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("landmarks", self.landmarks),
            ("shape", self.shape),
            ("expression", self.expression),
            ("pose_body", self.pose_body),
            ("pose_hand", self.pose_hand),
            ("temporal", self.temporal),
            ("intersection", self.intersection),
            ("camera", self.camera),
            ("height", self.height),
        ];
        if let Some((name, w)) = all.iter().find(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("weight `{name}` must be finite and >= 0, got {w}")));
        }
        if !(self.barrier_low <= self.barrier_high) {
            return Err(Error::Config("barrier_low must not exceed barrier_high".into()));
        }
        if self.height > 0.0 && !self.target_height.is_some_and(|h| h.is_finite() && h > 0.0) {
            return Err(Error::Config("the height term needs a positive target_height".into()));
        }
        Ok(())
    }
}

/// Learned densities available to the objective. Missing priors drop their term.
#[derive(Debug, Clone, Default)]
pub struct Priors {
    pub body_shape: Option<GmmPrior>,
    pub face_shape: Option<GmmPrior>,
    pub body_pose: Option<PosePrior>,
    pub hand_pose: Option<PosePrior>,
}

/// Unweighted value of every term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyTerms {
    pub landmarks: f64,
    pub shape: f64,
    pub expression: f64,
    pub pose_body: f64,
    pub pose_hand: f64,
    pub temporal: f64,
    pub intersection: f64,
    pub camera: f64,
    pub height: f64,
}

impl EnergyTerms {
    /// Weighted sum in a fixed order; zero-weight terms are skipped.
    pub fn total(&self, w: &EnergyWeights) -> f64 {
        [
            (w.landmarks, self.landmarks),
            (w.shape, self.shape),
            (w.expression, self.expression),
            (w.pose_body, self.pose_body),
            (w.pose_hand, self.pose_hand),
            (w.temporal, self.temporal),
            (w.intersection, self.intersection),
            (w.camera, self.camera),
            (w.height, self.height),
        ]
        .iter()
        .filter(|(w, _)| *w != 0.0)
        .fold(0.0, |acc, (w, v)| acc + w * v)
    }
}

/// Optimizable camera parameters: axis-angle rotation, translation and log focal length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    pub log_focal: f64,
}

impl CameraParams {
    pub fn from_camera(camera: &Camera) -> Result<Self> {
        let w = matrix_to_axis_angle(&camera.pose.rotation)?;
        Ok(CameraParams {
            rotation: [w.x, w.y, w.z],
            translation: camera.pose.translation.into(),
            log_focal: camera.intrinsics.fx.ln(),
        })
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        axis_angle_to_matrix(&Vector3::from(self.rotation))
    }

    /// Camera with these parameters; `base` supplies the principal point,
    /// image size and aspect ratio.
    pub fn to_camera(&self, base: &Intrinsics) -> Camera {
        let fx = self.log_focal.exp();
        Camera {
            intrinsics: Intrinsics {
                fx,
                fy: fx * base.fy / base.fx,
                ..*base
            },
            pose: Pose {
                rotation: self.rotation_matrix(),
                translation: Vector3::from(self.translation),
            },
        }
    }
}

/// Everything the optimizer moves: model parameters and camera parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub params: Parameters,
    pub cameras: Vec<CameraParams>,
}

impl State {
    pub fn new(params: Parameters, rig: &Rig) -> Result<Self> {
        Ok(State {
            params,
            cameras: rig.cameras.iter().map(CameraParams::from_camera).collect::<Result<_>>()?,
        })
    }

    /// Same shapes with every entry zero; used for gradients.
    pub fn zeros_like(&self) -> Self {
        let mut params = self.params.clone();
        for v in params
            .body_shape
            .iter_mut()
            .chain(params.face_shape.iter_mut())
            .chain(params.hand_shape.iter_mut())
        {
            *v = 0.0;
        }
        for f in &mut params.frames {
            f.expression.iter_mut().for_each(|v| *v = 0.0);
            f.pose.iter_mut().for_each(|p| *p = [0.0; 3]);
            f.translation = [0.0; 3];
        }
        State {
            params,
            cameras: vec![
                CameraParams {
                    rotation: [0.0; 3],
                    translation: [0.0; 3],
                    log_focal: 0.0,
                };
                self.cameras.len()
            ],
        }
    }

    /// Rebuilds a rig from the camera parameters.
    pub fn rig(&self, template: &Rig) -> Rig {
        let mut rig = template.clone();
        for (cam, p) in rig.cameras.iter_mut().zip(&self.cameras) {
            *cam = p.to_camera(&cam.intrinsics);
        }
        rig
    }
}

/// Which parameter blocks are free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageMask {
    pub body_shape: bool,
    pub face_shape: bool,
    pub hand_shape: bool,
    pub expression: bool,
    /// Non-root joint rotations.
    pub pose: bool,
    pub root_rotation: bool,
    pub translation: bool,
    pub extrinsics: bool,
    pub focal: bool,
}

impl StageMask {
    pub fn all() -> Self {
        StageMask {
            body_shape: true,
            face_shape: true,
            hand_shape: true,
            expression: true,
            pose: true,
            root_rotation: true,
            translation: true,
            extrinsics: true,
            focal: true,
        }
    }

    /// Global rigid placement only.
    pub fn global() -> Self {
        StageMask {
            root_rotation: true,
            translation: true,
            ..StageMask::default()
        }
    }

    /// Every model parameter, no cameras.
    pub fn model() -> Self {
        StageMask {
            extrinsics: false,
            focal: false,
            ..StageMask::all()
        }
    }

    fn is_root(model: &ModelDefinition, joint: usize) -> bool {
        model.parents[joint].is_none()
    }

    /// Visits every free scalar of `state` in a fixed order.
    fn visit(&self, model: &ModelDefinition, state: &mut State, enabled: &[bool], mut f: impl FnMut(&mut f64)) {
        let p = &mut state.params;
        if self.body_shape {
            p.body_shape.iter_mut().for_each(&mut f);
        }
        if self.face_shape {
            p.face_shape.iter_mut().for_each(&mut f);
        }
        if self.hand_shape {
            p.hand_shape.iter_mut().for_each(&mut f);
        }
        for frame in &mut p.frames {
            if self.expression {
                frame.expression.iter_mut().for_each(&mut f);
            }
            for (j, rot) in frame.pose.iter_mut().enumerate() {
                let free = if Self::is_root(model, j) { self.root_rotation } else { self.pose };
                if free {
                    rot.iter_mut().for_each(&mut f);
                }
            }
            if self.translation {
                frame.translation.iter_mut().for_each(&mut f);
            }
        }
        for (cam, on) in state.cameras.iter_mut().zip(enabled) {
            if !on {
                continue;
            }
            if self.extrinsics {
                cam.rotation.iter_mut().chain(cam.translation.iter_mut()).for_each(&mut f);
            }
            if self.focal {
                f(&mut cam.log_focal);
            }
        }
    }

    /// Free parameters as a flat vector.
    pub fn pack(&self, model: &ModelDefinition, state: &State, enabled: &[bool]) -> Vec<f64> {
        let mut out = Vec::new();
        let mut copy = state.clone();
        self.visit(model, &mut copy, enabled, |v| out.push(*v));
        out
    }

    /// Writes a flat vector back into the free parameters of `state`.
    pub fn unpack(&self, model: &ModelDefinition, x: &[f64], state: &mut State, enabled: &[bool]) {
        let mut it = x.iter();
        self.visit(model, state, enabled, |v| *v = *it.next().expect("vector matches the mask"));
    }

    /// Zeros every entry of a gradient outside the mask.
    pub fn restrict(&self, model: &ModelDefinition, grad: &mut State, enabled: &[bool]) {
        let kept = self.pack(model, grad, enabled);
        let mut zeroed = grad.zeros_like();
        self.unpack(model, &kept, &mut zeroed, enabled);
        *grad = zeroed;
    }
}
