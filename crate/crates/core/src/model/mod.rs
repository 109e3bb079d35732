//! The parametric body model: definition, file format and evaluation.

mod builder;
mod eval;
pub(crate) mod kinematics;
mod params;

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use builder::{build_model, ModelConfig, SkeletonPreset};
pub use eval::{
    evaluate_mesh, evaluate_template, extract_landmarks, forward_kinematics, normalize_pose,
    normalize_pose_group, regress_joints, shaped_template, skin, JointTransforms,
};
pub use params::{FrameParams, Parameters};
pub(crate) use eval::{local_rotations, regress};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Coefficient and skeleton sizes of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub body_shape: usize,
    pub face_shape: usize,
    pub hand_shape: usize,
    pub expression: usize,
    pub joints: usize,
    pub vertices: usize,
}

impl ModelDims {
    /// Reference sizes of the full-scale production model.
    pub const FULL_SCALE: ModelDims = ModelDims {
        body_shape: 300,
        face_shape: 256,
        hand_shape: 9,
        expression: 224,
        joints: 54,
        vertices: 12943,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandmarkSet {
    Body,
    Hand,
    Face,
}

impl LandmarkSet {
    pub const ALL: [LandmarkSet; 3] = [LandmarkSet::Body, LandmarkSet::Hand, LandmarkSet::Face];

    pub fn index(self) -> usize {
        match self {
            LandmarkSet::Body => 0,
            LandmarkSet::Hand => 1,
            LandmarkSet::Face => 2,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "body" => Ok(LandmarkSet::Body),
            "hand" => Ok(LandmarkSet::Hand),
            "face" => Ok(LandmarkSet::Face),
            _ => Err(Error::Lookup {
                kind: "landmark set",
                name: name.to_string(),
            }),
        }
    }
}

/// A point on the mesh surface: a triangle and barycentric weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkAnchor {
    pub face: usize,
    pub weights: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpherePrimitive {
    /// The sphere center follows this joint's world position.
    pub joint: usize,
    pub radius: f64,
    pub vertices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HullPrimitive {
    pub hull_vertices: Vec<usize>,
    pub vertices: Vec<usize>,
}

/// Joint subsets used by the pose priors. Each group lists its root first and
/// every other member after its parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PoseGroups {
    pub body: Vec<usize>,
    #[serde(default)]
    pub hands: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeightAnchors {
    pub top: LandmarkAnchor,
    pub bottom: LandmarkAnchor,
}

/// On-disk representation. Every array is a row-major nested list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub name: String,
    pub dims: ModelDims,
    pub template_vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub body_shape_basis: Vec<Vec<[f64; 3]>>,
    pub face_shape_basis: Vec<Vec<[f64; 3]>>,
    pub hand_shape_basis: Vec<Vec<[f64; 3]>>,
    pub expression_basis: Vec<Vec<[f64; 3]>>,
    pub pose_blendshapes: Vec<Vec<[f64; 3]>>,
    pub skinning_weights: Vec<Vec<f64>>,
    pub joint_regressor: Vec<Vec<f64>>,
    pub parents: Vec<Option<usize>>,
    pub joint_names: Vec<String>,
    pub landmarks_body: Vec<LandmarkAnchor>,
    pub landmarks_hand: Vec<LandmarkAnchor>,
    pub landmarks_face: Vec<LandmarkAnchor>,
    #[serde(default)]
    pub intersection_spheres: Vec<SpherePrimitive>,
    #[serde(default)]
    pub intersection_hulls: Vec<HullPrimitive>,
    #[serde(default)]
    pub pose_groups: PoseGroups,
    #[serde(default)]
    pub height_anchors: Option<HeightAnchors>,
}

/// Linear vertex-displacement basis with a sparse view for evaluation.
/// Coefficients are always accumulated in basis order, then vertex order.
#[derive(Debug, Clone)]
pub struct Basis {
    vertices: usize,
    sparse: Vec<Vec<(usize, Vector3<f64>)>>,
}

impl Basis {
    fn from_dense(dense: &[Vec<[f64; 3]>], vertices: usize, what: &str) -> Result<Self> {
        let mut sparse = Vec::with_capacity(dense.len());
        for (i, b) in dense.iter().enumerate() {
            if b.len() != vertices {
                return Err(Error::InvalidModel(format!(
                    "{what} component {i} has {} vertices, expected {vertices}",
                    b.len()
                )));
            }
            let entries: Vec<(usize, Vector3<f64>)> = b
                .iter()
                .enumerate()
                .filter(|(_, d)| d.iter().any(|&x| x != 0.0))
                .map(|(v, d)| (v, Vector3::from(*d)))
                .collect();
            if entries.iter().any(|(_, d)| !d.iter().all(|x| x.is_finite())) {
                return Err(Error::InvalidModel(format!("{what} has non-finite entries")));
            }
            sparse.push(entries);
        }
        Ok(Basis { vertices, sparse })
    }

    fn to_dense(&self) -> Vec<Vec<[f64; 3]>> {
        self.sparse
            .iter()
            .map(|entries| {
                let mut dense = vec![[0.0; 3]; self.vertices];
                for (v, d) in entries {
                    dense[*v] = [d.x, d.y, d.z];
                }
                dense
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.sparse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sparse.is_empty()
    }

    /// Displacement of component `i` at every vertex it touches.
    pub fn component(&self, i: usize) -> &[(usize, Vector3<f64>)] {
        &self.sparse[i]
    }

    /// `out += sum_i coeffs[i] * basis_i`.
    pub fn accumulate(&self, coeffs: &[f64], out: &mut [Vector3<f64>]) {
        for (c, entries) in coeffs.iter().zip(&self.sparse) {
            if *c == 0.0 {
                continue;
            }
            for (v, d) in entries {
                out[*v] += d * *c;
            }
        }
    }

    /// Gradient of a scalar with respect to the coefficients, given its
    /// gradient with respect to the displaced vertices.
    pub fn project(&self, grad: &[Vector3<f64>]) -> Vec<f64> {
        self.sparse
            .iter()
            .map(|entries| entries.iter().map(|(v, d)| d.dot(&grad[*v])).sum())
            .collect()
    }

    pub fn is_zero_component(&self, i: usize) -> bool {
        self.sparse[i].is_empty()
    }
}

/// Plane of a convex hull face, stored as three hull vertices ordered so the
/// cross product points outward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HullFace(pub [usize; 3]);

/// A validated, immutable model.
#[derive(Debug, Clone)]
pub struct ModelDefinition {
    pub name: String,
    pub dims: ModelDims,
    pub template: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub body_shape: Basis,
    pub face_shape: Basis,
    pub hand_shape: Basis,
    pub expression: Basis,
    pub pose_blendshapes: Basis,
    /// Per vertex, the joints with nonzero weight, in joint order.
    pub vertex_weights: Vec<Vec<(usize, f64)>>,
    /// Per joint, the nonzero regressor entries in vertex order.
    pub regressor: Vec<Vec<(usize, f64)>>,
    pub parents: Vec<Option<usize>>,
    pub joint_names: Vec<String>,
    /// Joints ordered so every parent precedes its children.
    pub topo_order: Vec<usize>,
    pub landmarks: [Vec<LandmarkAnchor>; 3],
    pub spheres: Vec<SpherePrimitive>,
    pub hulls: Vec<(HullPrimitive, Vec<HullFace>)>,
    pub pose_groups: PoseGroups,
    pub height_anchors: Option<HeightAnchors>,
    skinning_dense: Vec<Vec<f64>>,
    regressor_dense: Vec<Vec<f64>>,
    hash: String,
}

impl ModelDefinition {
    pub fn from_file(file: ModelFile) -> Result<Self> {
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model format_version {}",
                file.format_version
            )));
        }
        let n = file.template_vertices.len();
        let k = file.parents.len();
        let dims = file.dims;
        let expect = |what: &str, got: usize, want: usize| -> Result<()> {
            if got != want {
                Err(Error::InvalidModel(format!("{what}: got {got}, expected {want}")))
            } else {
                Ok(())
            }
        };
        expect("vertex count", n, dims.vertices)?;
        expect("joint count", k, dims.joints)?;
        expect("body shape components", file.body_shape_basis.len(), dims.body_shape)?;
        expect("face shape components", file.face_shape_basis.len(), dims.face_shape)?;
        expect("hand shape components", file.hand_shape_basis.len(), dims.hand_shape)?;
        expect("expression components", file.expression_basis.len(), dims.expression)?;
        if !file.pose_blendshapes.is_empty() {
            expect("pose blendshapes", file.pose_blendshapes.len(), 9 * k.saturating_sub(1))?;
        }
        expect("skinning weight rows", file.skinning_weights.len(), k)?;
        expect("joint regressor rows", file.joint_regressor.len(), k)?;
        if !file.joint_names.is_empty() {
            expect("joint names", file.joint_names.len(), k)?;
        }
        if file
            .template_vertices
            .iter()
            .any(|v| !v.iter().all(|x| x.is_finite()))
        {
            return Err(Error::InvalidModel("non-finite template vertex".into()));
        }
        for f in &file.faces {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::InvalidModel(format!("face {f:?} references a missing vertex")));
            }
        }

        let mut vertex_weights = vec![Vec::new(); n];
        for (j, row) in file.skinning_weights.iter().enumerate() {
            expect("skinning weight columns", row.len(), n)?;
            for (v, &w) in row.iter().enumerate() {
                if !(w >= 0.0) || !w.is_finite() {
                    return Err(Error::InvalidModel(format!(
                        "skinning weight ({j}, {v}) = {w} is negative or non-finite"
                    )));
                }
                if w > 0.0 {
                    vertex_weights[v].push((j, w));
                }
            }
        }
        for (v, ws) in vertex_weights.iter().enumerate() {
            let s: f64 = ws.iter().map(|(_, w)| w).sum();
            if (s - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(Error::InvalidModel(format!(
                    "skinning weights of vertex {v} sum to {s}"
                )));
            }
        }
        let mut regressor = Vec::with_capacity(k);
        for (j, row) in file.joint_regressor.iter().enumerate() {
            expect("joint regressor columns", row.len(), n)?;
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > WEIGHT_SUM_TOL || !s.is_finite() {
                return Err(Error::InvalidModel(format!(
                    "joint regressor row {j} sums to {s}"
                )));
            }
            regressor.push(
                row.iter()
                    .enumerate()
                    .filter(|(_, w)| **w != 0.0)
                    .map(|(v, w)| (v, *w))
                    .collect(),
            );
        }
        let topo_order = topological_order(&file.parents)?;

        let landmarks = [
            file.landmarks_body.clone(),
            file.landmarks_hand.clone(),
            file.landmarks_face.clone(),
        ];
        let anchors = landmarks
            .iter()
            .flatten()
            .chain(file.height_anchors.iter().flat_map(|h| [&h.top, &h.bottom]));
        for a in anchors {
            validate_anchor(a, file.faces.len())?;
        }
        for s in &file.intersection_spheres {
            if s.joint >= k || !(s.radius > 0.0) || s.vertices.iter().any(|&v| v >= n) {
                return Err(Error::InvalidPrimitive(format!(
                    "sphere on joint {} is malformed",
                    s.joint
                )));
            }
        }
        let mut hulls = Vec::new();
        for h in &file.intersection_hulls {
            if h.hull_vertices.iter().chain(&h.vertices).any(|&v| v >= n) {
                return Err(Error::InvalidPrimitive("hull references a missing vertex".into()));
            }
            let pts: Vec<Vector3<f64>> = h
                .hull_vertices
                .iter()
                .map(|&v| Vector3::from(file.template_vertices[v]))
                .collect();
            let faces = convex_hull_faces(&pts)?
                .into_iter()
                .map(|HullFace([a, b, c])| {
                    HullFace([h.hull_vertices[a], h.hull_vertices[b], h.hull_vertices[c]])
                })
                .collect();
            hulls.push((h.clone(), faces));
        }
        let groups = &file.pose_groups;
        for g in std::iter::once(&groups.body).chain(&groups.hands) {
            validate_group(g, &file.parents)?;
        }
        if groups.hands.windows(2).any(|w| w[0].len() != w[1].len()) {
            return Err(Error::InvalidModel("hand pose groups differ in size".into()));
        }

        let body_shape = Basis::from_dense(&file.body_shape_basis, n, "body shape basis")?;
        let face_shape = Basis::from_dense(&file.face_shape_basis, n, "face shape basis")?;
        let hand_shape = Basis::from_dense(&file.hand_shape_basis, n, "hand shape basis")?;
        let expression = Basis::from_dense(&file.expression_basis, n, "expression basis")?;
        let pose_blendshapes = if file.pose_blendshapes.is_empty() {
            Basis::from_dense(&vec![Vec::new(); 0], n, "pose blendshapes")?
        } else {
            Basis::from_dense(&file.pose_blendshapes, n, "pose blendshapes")?
        };
        let joint_names = if file.joint_names.is_empty() {
            (0..k).map(|j| format!("joint{j}")).collect()
        } else {
            file.joint_names.clone()
        };

        let mut model = ModelDefinition {
            name: file.name,
            dims,
            template: file.template_vertices.iter().map(|v| Vector3::from(*v)).collect(),
            faces: file.faces,
            body_shape,
            face_shape,
            hand_shape,
            expression,
            pose_blendshapes,
            vertex_weights,
            regressor,
            parents: file.parents,
            joint_names,
            topo_order,
            landmarks,
            spheres: file.intersection_spheres,
            hulls,
            pose_groups: file.pose_groups,
            height_anchors: file.height_anchors,
            skinning_dense: file.skinning_weights,
            regressor_dense: file.joint_regressor,
            hash: String::new(),
        };
        model.hash = file_hash(&model.to_file())?;
        Ok(model)
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            name: self.name.clone(),
            dims: self.dims,
            template_vertices: self.template.iter().map(|v| [v.x, v.y, v.z]).collect(),
            faces: self.faces.clone(),
            body_shape_basis: self.body_shape.to_dense(),
            face_shape_basis: self.face_shape.to_dense(),
            hand_shape_basis: self.hand_shape.to_dense(),
            expression_basis: self.expression.to_dense(),
            pose_blendshapes: self.pose_blendshapes.to_dense(),
            skinning_weights: self.skinning_dense.clone(),
            joint_regressor: self.regressor_dense.clone(),
            parents: self.parents.clone(),
            joint_names: self.joint_names.clone(),
            landmarks_body: self.landmarks[0].clone(),
            landmarks_hand: self.landmarks[1].clone(),
            landmarks_face: self.landmarks[2].clone(),
            intersection_spheres: self.spheres.clone(),
            intersection_hulls: self.hulls.iter().map(|(h, _)| h.clone()).collect(),
            pose_groups: self.pose_groups.clone(),
            height_anchors: self.height_anchors,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: ModelFile = serde_json::from_str(&text)?;
        Self::from_file(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(&self.to_file())?)?;
        Ok(())
    }

    /// SHA-256 of the canonical serialization; identifies the model in every
    /// artifact derived from it.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn landmark_set(&self, set: LandmarkSet) -> &[LandmarkAnchor] {
        &self.landmarks[set.index()]
    }

    /// Landmarks are addressed globally as body, then hand, then face.
    pub fn landmark_offset(&self, set: LandmarkSet) -> usize {
        self.landmarks[..set.index()].iter().map(Vec::len).sum()
    }

    /// Hand landmarks are stored left hand first, then right hand.
    pub fn hand_landmarks_per_hand(&self) -> usize {
        let hands = self.pose_groups.hands.len().max(1);
        self.landmarks[1].len() / hands
    }

    pub fn num_landmarks(&self) -> usize {
        self.landmarks.iter().map(Vec::len).sum()
    }

    pub fn landmark(&self, id: usize) -> Option<(LandmarkSet, &LandmarkAnchor)> {
        let mut rest = id;
        for set in LandmarkSet::ALL {
            let anchors = self.landmark_set(set);
            if rest < anchors.len() {
                return Some((set, &anchors[rest]));
            }
            rest -= anchors.len();
        }
        None
    }

    /// Position of an anchor on a set of vertices.
    pub fn anchor_point(&self, anchor: &LandmarkAnchor, vertices: &[Vector3<f64>]) -> Vector3<f64> {
        let f = self.faces[anchor.face];
        vertices[f[0]] * anchor.weights[0]
            + vertices[f[1]] * anchor.weights[1]
            + vertices[f[2]] * anchor.weights[2]
    }

    pub fn skinning_weight(&self, joint: usize, vertex: usize) -> f64 {
        self.skinning_dense[joint][vertex]
    }

    pub fn joint_index(&self, name: &str) -> Result<usize> {
        self.joint_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Lookup {
                kind: "joint",
                name: name.to_string(),
            })
    }
}

fn file_hash(file: &ModelFile) -> Result<String> {
    let bytes = serde_json::to_vec(file)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn validate_anchor(a: &LandmarkAnchor, faces: usize) -> Result<()> {
    if a.face >= faces {
        return Err(Error::InvalidModel(format!("anchor references face {}", a.face)));
    }
    let s: f64 = a.weights.iter().sum();
    if a.weights.iter().any(|&w| !(w >= 0.0)) || (s - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::InvalidModel(format!(
            "anchor weights {:?} are not a barycentric combination",
            a.weights
        )));
    }
    Ok(())
}

fn validate_group(group: &[usize], parents: &[Option<usize>]) -> Result<()> {
    for (i, &j) in group.iter().enumerate() {
        if j >= parents.len() {
            return Err(Error::InvalidModel(format!("pose group references joint {j}")));
        }
        if i > 0 {
            let ok = parents[j].is_some_and(|p| group[..i].contains(&p));
            if !ok {
                return Err(Error::InvalidModel(format!(
                    "pose group member {j} does not follow its parent"
                )));
            }
        }
    }
    Ok(())
}

/// Orders joints parents-first; rejects cycles and forests.
pub(crate) fn topological_order(parents: &[Option<usize>]) -> Result<Vec<usize>> {
    let k = parents.len();
    let roots = parents.iter().filter(|p| p.is_none()).count();
    if roots != 1 {
        return Err(Error::InvalidModel(format!(
            "kinematic tree must have exactly one root, found {roots}"
        )));
    }
    let mut children = vec![Vec::new(); k];
    let mut root = 0;
    for (j, p) in parents.iter().enumerate() {
        match p {
            Some(p) if *p >= k => {
                return Err(Error::InvalidModel(format!("joint {j} has missing parent {p}")))
            }
            Some(p) => children[*p].push(j),
            None => root = j,
        }
    }
    let mut order = Vec::with_capacity(k);
    let mut stack = vec![root];
    while let Some(j) = stack.pop() {
        order.push(j);
        stack.extend(children[j].iter().rev());
    }
    if order.len() != k {
        return Err(Error::InvalidModel("kinematic tree contains a cycle".into()));
    }
    Ok(order)
}

/// Brute-force convex hull of a small point set as oriented face triples.
pub fn convex_hull_faces(points: &[Vector3<f64>]) -> Result<Vec<HullFace>> {
    let n = points.len();
    if n < 4 {
        return Err(Error::InvalidPrimitive(format!(
            "convex hull needs at least 4 vertices, got {n}"
        )));
    }
    let scale = points
        .iter()
        .flat_map(|p| points.iter().map(move |q| (p - q).norm()))
        .fold(0.0, f64::max);
    let eps = 1e-9 * scale.max(1e-12);
    let mut faces = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                let normal = (points[b] - points[a]).cross(&(points[c] - points[a]));
                let len = normal.norm();
                if len <= eps * scale {
                    continue;
                }
                let unit = normal / len;
                let side: Vec<f64> = points.iter().map(|p| unit.dot(&(p - points[a]))).collect();
                let above = side.iter().any(|&s| s > eps);
                let below = side.iter().any(|&s| s < -eps);
                match (above, below) {
                    (true, true) => {}
                    (false, true) => faces.push(HullFace([a, b, c])),
                    (true, false) => faces.push(HullFace([a, c, b])),
                    (false, false) => {}
                }
            }
        }
    }
    if faces.is_empty() {
        return Err(Error::InvalidPrimitive("hull vertices are coplanar".into()));
    }
    Ok(faces)
}
