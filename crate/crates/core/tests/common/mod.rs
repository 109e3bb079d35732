#![allow(dead_code)]

use bodyfit::model::{
    build_model, LandmarkAnchor, ModelConfig, ModelDefinition, ModelDims, ModelFile, Parameters,
    MODEL_FORMAT_VERSION,
};
use bodyfit::camera::{Camera, Intrinsics, Rig};
use bodyfit::model::evaluate_mesh;
use bodyfit::observations::{Landmark2d, ObservationSet};
use bodyfit::priors::{FlowConfig, FlowModel, GmmPrior, Linear};
use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

pub fn desk() -> &'static ModelDefinition {
    static MODEL: OnceLock<ModelDefinition> = OnceLock::new();
    MODEL.get_or_init(|| build_model(&ModelConfig::desk()).unwrap())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_axis_angle(rng: &mut ChaCha8Rng, max_angle: f64) -> Vector3<f64> {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    )
    .normalize();
    axis * rng.random_range(0.0..max_angle)
}

/// Rotation matrix from nalgebra, independent of the crate's own Rodrigues map.
pub fn oracle_rotation(a: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(*a).into_inner()
}

pub fn random_params(model: &ModelDefinition, frames: usize, rng: &mut ChaCha8Rng, pose_scale: f64) -> Parameters {
    let mut p = Parameters::zeros(model, frames);
    for x in p.body_shape.iter_mut().chain(&mut p.face_shape).chain(&mut p.hand_shape) {
        *x = rng.random_range(-1.0..1.0);
    }
    for f in &mut p.frames {
        for x in &mut f.expression {
            *x = rng.random_range(-1.0..1.0);
        }
        for j in &mut f.pose {
            let a = random_axis_angle(rng, pose_scale);
            *j = [a.x, a.y, a.z];
        }
        f.translation = [
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        ];
    }
    p
}

/// Two joints, six vertices: the root at the origin and a child at (1,0,0).
pub fn two_link_file() -> ModelFile {
    let template = vec![
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [1.0, 1.0, 0.0],
        [2.0, 0.0, 0.0],
        [2.0, 1.0, 0.0],
    ];
    let n = template.len();
    let basis = |scale: f64| -> Vec<Vec<[f64; 3]>> {
        vec![(0..n).map(|v| [scale * v as f64, 0.0, scale]).collect()]
    };
    let mut regressor = vec![vec![0.0; n]; 2];
    regressor[0][0] = 1.0;
    regressor[1][1] = 1.0;
    let skin0: Vec<f64> = (0..n).map(|v| if v < 3 { 1.0 } else { 0.0 }).collect();
    let skin1: Vec<f64> = skin0.iter().map(|w| 1.0 - w).collect();
    ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        name: "two-link".into(),
        dims: ModelDims {
            body_shape: 1,
            face_shape: 1,
            hand_shape: 1,
            expression: 1,
            joints: 2,
            vertices: n,
        },
        template_vertices: template,
        faces: vec![[0, 1, 2], [1, 3, 2], [1, 4, 5]],
        body_shape_basis: basis(0.01),
        face_shape_basis: basis(0.02),
        hand_shape_basis: basis(0.03),
        expression_basis: basis(0.04),
        pose_blendshapes: vec![],
        skinning_weights: vec![skin0, skin1],
        joint_regressor: regressor,
        parents: vec![None, Some(0)],
        joint_names: vec!["root".into(), "child".into()],
        landmarks_body: vec![LandmarkAnchor {
            face: 0,
            weights: [1.0, 0.0, 0.0],
        }],
        landmarks_hand: vec![],
        landmarks_face: vec![],
        intersection_spheres: vec![],
        intersection_hulls: vec![],
        pose_groups: Default::default(),
        height_anchors: None,
    }
}

pub fn random_spd(r: &mut impl Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| r.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.3
}

pub fn random_gmm(r: &mut impl Rng, g: usize, d: usize) -> GmmPrior {
    let raw: Vec<f64> = (0..g).map(|_| r.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    GmmPrior::new(
        raw.iter().map(|w| w / total).collect(),
        (0..g).map(|_| DVector::from_fn(d, |_, _| r.random_range(-2.0..2.0))).collect(),
        (0..g).map(|_| random_spd(r, d)).collect(),
    )
    .unwrap()
}

pub fn random_flow(dim: usize, layers: usize, seed: u64) -> FlowModel {
    let mut r = rng(seed);
    let config = FlowConfig {
        layers,
        hidden: 8,
        ..FlowConfig::default()
    };
    let mut flow = FlowModel::new(dim, &config, &mut r).unwrap();
    for layer in &mut flow.layers {
        for net in [&mut layer.scale_net, &mut layer.shift_net] {
            let last = &net.layers[2];
            let mut lin = Linear::random(last.inputs(), last.outputs(), &mut r);
            lin.weight *= 0.5;
            lin.bias = DVector::from_fn(last.outputs(), |_, _| r.random_range(-0.3..0.3));
            net.layers[2] = lin;
        }
    }
    flow
}

/// `count` cameras on a ring of radius `radius` around the origin, looking at
/// the body center.
pub fn ring_rig(count: usize, radius: f64) -> Rig {
    let cams = (0..count)
        .map(|i| {
            let angle = i as f64 * std::f64::consts::TAU / count as f64;
            let eye = Vector3::new(radius * angle.sin(), 0.1, radius * angle.cos());
            Camera::look_at(
                Intrinsics::default_for(512, 512),
                eye,
                Vector3::zeros(),
                Vector3::y(),
            )
            .unwrap()
        })
        .collect();
    Rig::new(cams, true)
}

/// Exact projections of every model landmark in every frame and camera.
pub fn perfect_observations(model: &ModelDefinition, params: &Parameters, rig: &Rig, sigma: f64) -> ObservationSet {
    let sizes = rig.cameras.iter().map(|c| (c.intrinsics.width, c.intrinsics.height)).collect();
    let mut obs = ObservationSet::empty(params.num_frames(), sizes);
    for f in 0..params.num_frames() {
        let verts = evaluate_mesh(model, params, f).unwrap();
        for (c, cam) in rig.cameras.iter().enumerate() {
            for id in 0..model.num_landmarks() {
                let (_, anchor) = model.landmark(id).unwrap();
                let p = cam.to_camera(&model.anchor_point(anchor, &verts));
                let k = &cam.intrinsics;
                obs.frames[f][c].push(Landmark2d {
                    id,
                    x: k.fx * p.x / p.z + k.cx,
                    y: k.fy * p.y / p.z + k.cy,
                    sigma,
                });
            }
        }
    }
    obs
}
