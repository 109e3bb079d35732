use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::ModelDefinition;
use crate::error::{Error, Result};

/// Per-frame articulation and expression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameParams {
    pub expression: Vec<f64>,
    /// One axis-angle rotation per joint, root first in joint-index order.
    pub pose: Vec<[f64; 3]>,
    pub translation: [f64; 3],
}

impl FrameParams {
    pub fn zeros(model: &ModelDefinition) -> Self {
        FrameParams {
            expression: vec![0.0; model.dims.expression],
            pose: vec![[0.0; 3]; model.num_joints()],
            translation: [0.0; 3],
        }
    }

    pub fn joint_rotation(&self, joint: usize) -> Vector3<f64> {
        Vector3::from(self.pose[joint])
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }
}

/// Model parameters for a whole sequence: shapes are shared by every frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub body_shape: Vec<f64>,
    pub face_shape: Vec<f64>,
    pub hand_shape: Vec<f64>,
    pub frames: Vec<FrameParams>,
}

impl Parameters {
    pub fn zeros(model: &ModelDefinition, frames: usize) -> Self {
        Parameters {
            body_shape: vec![0.0; model.dims.body_shape],
            face_shape: vec![0.0; model.dims.face_shape],
            hand_shape: vec![0.0; model.dims.hand_shape],
            frames: (0..frames).map(|_| FrameParams::zeros(model)).collect(),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Checks every coefficient block against the model's dimensions.
    pub fn validate(&self, model: &ModelDefinition) -> Result<()> {
        let d = &model.dims;
        let check = |what: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Shape(format!("{what} has length {got}, expected {want}")))
            }
        };
        check("body shape", self.body_shape.len(), d.body_shape)?;
        check("face shape", self.face_shape.len(), d.face_shape)?;
        check("hand shape", self.hand_shape.len(), d.hand_shape)?;
        for (f, frame) in self.frames.iter().enumerate() {
            check(&format!("frame {f} expression"), frame.expression.len(), d.expression)?;
            check(&format!("frame {f} pose"), frame.pose.len(), model.num_joints())?;
        }
        let finite = self
            .body_shape
            .iter()
            .chain(&self.face_shape)
            .chain(&self.hand_shape)
            .chain(self.frames.iter().flat_map(|f| {
                f.expression
                    .iter()
                    .chain(f.pose.iter().flatten())
                    .chain(f.translation.iter())
            }))
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(())
    }

    pub(crate) fn frame(&self, frame: usize) -> Result<&FrameParams> {
        self.frames.get(frame).ok_or_else(|| {
            Error::Shape(format!(
                "frame {frame} out of range for {} frames",
                self.frames.len()
            ))
        })
    }
}
