//! Procedurally generated capsule bodies, so everything can be exercised
//! without proprietary model assets.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    topological_order, HeightAnchors, HullPrimitive, LandmarkAnchor, ModelDefinition, ModelDims,
    ModelFile, PoseGroups, SpherePrimitive, MODEL_FORMAT_VERSION,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkeletonPreset {
    /// 20 joints: torso, limbs, one finger segment per hand and a jaw.
    Desk,
    /// 54 joints: 22 body, 15 per hand and 2 eyes.
    FullScale,
}

/// Recipe for [`build_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub format_version: u32,
    pub skeleton: SkeletonPreset,
    pub body_shape: usize,
    pub face_shape: usize,
    pub hand_shape: usize,
    pub expression: usize,
    pub body_landmarks: usize,
    pub hand_landmarks_per_hand: usize,
    pub face_landmarks: usize,
    /// Vertices around each capsule ring.
    pub sectors: usize,
    /// Rings along each capsule.
    pub rings: usize,
    pub pose_correctives: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            format_version: MODEL_FORMAT_VERSION,
            skeleton: SkeletonPreset::Desk,
            body_shape: 8,
            face_shape: 6,
            hand_shape: 2,
            expression: 10,
            body_landmarks: 200,
            hand_landmarks_per_hand: 20,
            face_landmarks: 60,
            sectors: 8,
            rings: 4,
            pose_correctives: true,
            seed: 1,
        }
    }

    /// Full-scale coefficient and landmark counts on a coarse mesh.
    pub fn full_scale() -> Self {
        ModelConfig {
            format_version: MODEL_FORMAT_VERSION,
            skeleton: SkeletonPreset::FullScale,
            body_shape: 300,
            face_shape: 256,
            hand_shape: 9,
            expression: 224,
            body_landmarks: 1428,
            hand_landmarks_per_hand: 141,
            face_landmarks: 744,
            sectors: 8,
            rings: 3,
            pose_correctives: true,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Region {
    Body,
    Head,
    Hand(usize),
    Teeth,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Geometry {
    Capsule { tail: [f64; 3], radius: f64 },
    Sphere { radius: f64 },
    Box { half: [f64; 3] },
    None,
}

#[derive(Debug, Clone)]
struct JointSpec {
    name: String,
    parent: Option<usize>,
    pos: [f64; 3],
    geometry: Geometry,
    region: Region,
    corrective: bool,
}

fn joint(name: &str, parent: Option<usize>, pos: [f64; 3], geometry: Geometry, region: Region) -> JointSpec {
    JointSpec {
        name: name.to_string(),
        parent,
        pos,
        geometry,
        region,
        corrective: false,
    }
}

fn capsule(tail: [f64; 3], radius: f64) -> Geometry {
    Geometry::Capsule { tail, radius }
}


fn desk_skeleton() -> Vec<JointSpec> {
    use Region::*;
    let mut j = vec![
        joint("pelvis", None, [0.0, 0.95, 0.0], capsule([0.0, 1.10, 0.0], 0.14), Body),
        joint("spine", Some(0), [0.0, 1.10, 0.0], capsule([0.0, 1.30, 0.0], 0.15), Body),
        joint("chest", Some(1), [0.0, 1.30, 0.0], capsule([0.0, 1.48, 0.0], 0.16), Body),
        joint("neck", Some(2), [0.0, 1.50, 0.0], capsule([0.0, 1.56, 0.0], 0.05), Body),
        joint("head", Some(3), [0.0, 1.65, 0.0], Geometry::Sphere { radius: 0.11 }, Head),
    ];
    for (side, s) in [(0usize, 1.0), (1, -1.0)] {
        let name = if side == 0 { "l" } else { "r" };
        let at = |x: f64| [s * x, 1.45, 0.0];
        let base = j.len();
        j.push(joint(&format!("{name}_shoulder"), Some(2), at(0.18), capsule(at(0.45), 0.05), Body));
        j.push(joint(&format!("{name}_elbow"), Some(base), at(0.45), capsule(at(0.70), 0.04), Body));
        j.push(joint(&format!("{name}_wrist"), Some(base + 1), at(0.70), capsule(at(0.78), 0.035), Hand(side)));
        j[base + 1].corrective = true;
    }
    for (side, s) in [(0usize, 1.0), (1, -1.0)] {
        let name = if side == 0 { "l" } else { "r" };
        let x = s * 0.10;
        let base = j.len();
        j.push(joint(&format!("{name}_hip"), Some(0), [x, 0.92, 0.0], capsule([x, 0.50, 0.0], 0.07), Body));
        j.push(joint(&format!("{name}_knee"), Some(base), [x, 0.50, 0.0], capsule([x, 0.08, 0.0], 0.05), Body));
        j.push(joint(&format!("{name}_ankle"), Some(base + 1), [x, 0.08, 0.0], capsule([x, 0.03, 0.15], 0.04), Body));
        j[base + 1].corrective = true;
    }
    j.push(joint("l_fingers", Some(7), [0.78, 1.45, 0.0], capsule([0.88, 1.45, 0.0], 0.025), Hand(0)));
    j.push(joint("r_fingers", Some(10), [-0.78, 1.45, 0.0], capsule([-0.88, 1.45, 0.0], 0.025), Hand(1)));
    j.push(joint("jaw", Some(4), [0.0, 1.60, 0.05], Geometry::Box { half: [0.03, 0.015, 0.015] }, Teeth));
    j
}

fn full_skeleton() -> Vec<JointSpec> {
    use Region::*;
    let mut j: Vec<JointSpec> = Vec::new();
    let push = |j: &mut Vec<JointSpec>, spec: JointSpec| {
        j.push(spec);
        j.len() - 1
    };
    let pelvis = push(&mut j, joint("pelvis", None, [0.0, 0.95, 0.0], capsule([0.0, 1.05, 0.0], 0.14), Body));
    let mut hips = [0; 2];
    for (side, s) in [(0usize, 1.0), (1, -1.0)] {
        let name = if side == 0 { "l" } else { "r" };
        hips[side] = push(
            &mut j,
            joint(&format!("{name}_hip"), Some(pelvis), [s * 0.10, 0.92, 0.0], capsule([s * 0.10, 0.50, 0.0], 0.07), Body),
        );
    }
    let spine1 = push(&mut j, joint("spine1", Some(pelvis), [0.0, 1.05, 0.0], capsule([0.0, 1.18, 0.0], 0.145), Body));
    let mut knees = [0; 2];
    for (side, s) in [(0usize, 1.0), (1, -1.0)] {
        let name = if side == 0 { "l" } else { "r" };
        let x = s * 0.10;
        knees[side] = push(&mut j, joint(&format!("{name}_knee"), Some(hips[side]), [x, 0.50, 0.0], capsule([x, 0.08, 0.0], 0.05), Body));
        j[knees[side]].corrective = true;
    }
    let spine2 = push(&mut j, joint("spine2", Some(spine1), [0.0, 1.18, 0.0], capsule([0.0, 1.32, 0.0], 0.15), Body));
    let mut ankles = [0; 2];
    for (side, s) in [(0usize, 1.0), (1, -1.0)] {
        let name = if side == 0 { "l" } else { "r" };
        let x = s * 0.10;
        ankles[side] = push(&mut j, joint(&format!("{name}_ankle"), Some(knees[side]), [x, 0.08, 0.0], capsule([x, 0.04, 0.10], 0.04), Body));
    }
    let spine3 = push(&mut j, joint("spine3", Some(spine2), [0.0, 1.32, 0.0], capsule([0.0, 1.48, 0.0], 0.16), Body));
    for (side, s) in [(0usize, 1.0), (1, -1.0)] {
        let name = if side == 0 { "l" } else { "r" };
        let x = s * 0.10;
        push(&mut j, joint(&format!("{name}_foot"), Some(ankles[side]), [x, 0.04, 0.10], capsule([x, 0.03, 0.16], 0.03), Body));
    }
    let neck = push(&mut j, joint("neck", Some(spine3), [0.0, 1.50, 0.0], capsule([0.0, 1.56, 0.0], 0.05), Body));
    let mut collars = [0; 2];
    for (side, s) in [(0usize, 1.0), (1, -1.0)] {
        let name = if side == 0 { "l" } else { "r" };
        collars[side] = push(
            &mut j,
            joint(&format!("{name}_collar"), Some(spine3), [s * 0.05, 1.45, 0.0], capsule([s * 0.18, 1.45, 0.0], 0.05), Body),
        );
    }
    let head = push(&mut j, joint("head", Some(neck), [0.0, 1.65, 0.0], Geometry::Sphere { radius: 0.11 }, Head));
    let mut shoulders = [0; 2];
    for (side, s) in [(0usize, 1.0), (1, -1.0)] {
        let name = if side == 0 { "l" } else { "r" };
        shoulders[side] = push(
            &mut j,
            joint(&format!("{name}_shoulder"), Some(collars[side]), [s * 0.18, 1.45, 0.0], capsule([s * 0.45, 1.45, 0.0], 0.05), Body),
        );
    }
    let mut elbows = [0; 2];
    for (side, s) in [(0usize, 1.0), (1, -1.0)] {
        let name = if side == 0 { "l" } else { "r" };
        elbows[side] = push(
            &mut j,
            joint(&format!("{name}_elbow"), Some(shoulders[side]), [s * 0.45, 1.45, 0.0], capsule([s * 0.70, 1.45, 0.0], 0.04), Body),
        );
        j[elbows[side]].corrective = true;
    }
    let mut wrists = [0; 2];
    for (side, s) in [(0usize, 1.0), (1, -1.0)] {
        let name = if side == 0 { "l" } else { "r" };
        wrists[side] = push(
            &mut j,
            joint(&format!("{name}_wrist"), Some(elbows[side]), [s * 0.70, 1.45, 0.0], capsule([s * 0.78, 1.45, 0.0], 0.035), Hand(side)),
        );
    }
    for (side, s) in [(0usize, 1.0), (1, -1.0)] {
        let name = if side == 0 { "l" } else { "r" };
        for finger in 0..5 {
            let z = -0.03 + 0.015 * finger as f64;
            let mut parent = wrists[side];
            for seg in 0..3 {
                let x0 = 0.78 + 0.025 * seg as f64;
                let pos = [s * x0, 1.45, z];
                let tail = [s * (x0 + 0.025), 1.45, z];
                parent = push(
                    &mut j,
                    joint(&format!("{name}_finger{finger}_{seg}"), Some(parent), pos, capsule(tail, 0.008), Hand(side)),
                );
            }
        }
    }
    for (side, s) in [(0usize, 1.0), (1, -1.0)] {
        let name = if side == 0 { "l" } else { "r" };
        push(&mut j, joint(&format!("{name}_eye"), Some(head), [s * 0.035, 1.67, 0.075], Geometry::None, Head));
    }
    j
}

struct MeshBuilder {
    verts: Vec<Vector3<f64>>,
    faces: Vec<[usize; 3]>,
    region: Vec<Region>,
    weights: Vec<Vec<(usize, f64)>>,
    /// Per joint, vertices that regress its rest location.
    anchor_ring: Vec<Vec<usize>>,
}

impl MeshBuilder {
    fn add(&mut self, p: Vector3<f64>, region: Region, weights: Vec<(usize, f64)>) -> usize {
        self.verts.push(p);
        self.region.push(region);
        self.weights.push(weights);
        self.verts.len() - 1
    }
}

fn perpendicular_frame(axis: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let reference = if axis.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
    let u = axis.cross(&reference).normalize();
    let v = axis.cross(&u).normalize();
    (u, v)
}

fn blend_weights(j: usize, parent: Option<usize>, t: f64) -> Vec<(usize, f64)> {
    match parent {
        Some(p) if t < 0.25 => {
            let wj = 0.5 + 0.5 * (t / 0.25);
            let mut w = vec![(p, 1.0 - wj), (j, wj)];
            w.sort_by_key(|x| x.0);
            w
        }
        _ => vec![(j, 1.0)],
    }
}

fn build_capsule(mb: &mut MeshBuilder, cfg: &ModelConfig, j: usize, spec: &JointSpec, tail: [f64; 3], radius: f64) {
    let head = Vector3::from(spec.pos);
    let tail = Vector3::from(tail);
    let axis = (tail - head).normalize();
    let (u, v) = perpendicular_frame(&axis);
    let sectors = cfg.sectors.max(3);
    let rings = cfg.rings.max(2);
    let mut ring_ids = Vec::with_capacity(rings);
    for r in 0..rings {
        let t = r as f64 / (rings - 1) as f64;
        let center = head + (tail - head) * t;
        let ids: Vec<usize> = (0..sectors)
            .map(|s| {
                let a = 2.0 * PI * s as f64 / sectors as f64;
                let p = center + (u * a.cos() + v * a.sin()) * radius;
                mb.add(p, spec.region, blend_weights(j, spec.parent, t))
            })
            .collect();
        ring_ids.push(ids);
    }
    for r in 0..rings - 1 {
        for s in 0..sectors {
            let s2 = (s + 1) % sectors;
            let (a, b, c, d) = (ring_ids[r][s], ring_ids[r][s2], ring_ids[r + 1][s2], ring_ids[r + 1][s]);
            mb.faces.push([a, b, c]);
            mb.faces.push([a, c, d]);
        }
    }
    let cap = mb.add(tail + axis * radius * 0.5, spec.region, vec![(j, 1.0)]);
    let last = &ring_ids[rings - 1];
    for s in 0..sectors {
        mb.faces.push([last[s], last[(s + 1) % sectors], cap]);
    }
    mb.anchor_ring[j] = ring_ids[0].clone();
}

fn build_sphere(
    mb: &mut MeshBuilder,
    j: usize,
    spec: &JointSpec,
    radius: f64,
    jaw: Option<usize>,
) -> Vec<usize> {
    let c = Vector3::from(spec.pos);
    let sectors = 10;
    let lat_rings = 7;
    let weights_at = |p: &Vector3<f64>| -> Vec<(usize, f64)> {
        let rel = p - c;
        if let Some(jaw) = jaw {
            if rel.y < -0.03 && rel.z > 0.02 {
                let mut w = vec![(j, 0.4), (jaw, 0.6)];
                w.sort_by_key(|x| x.0);
                return w;
            }
        }
        match spec.parent {
            Some(p) if rel.y < -0.085 => {
                let mut w = vec![(p, 0.5), (j, 0.5)];
                w.sort_by_key(|x| x.0);
                w
            }
            _ => vec![(j, 1.0)],
        }
    };
    let north = c + Vector3::y() * radius;
    let north_id = mb.add(north, Region::Head, weights_at(&north));
    let mut rings = Vec::new();
    for i in 1..=lat_rings {
        let lat = PI * i as f64 / (lat_rings + 1) as f64;
        let ids: Vec<usize> = (0..sectors)
            .map(|s| {
                let a = 2.0 * PI * s as f64 / sectors as f64;
                let p = c + Vector3::new(lat.sin() * a.sin(), lat.cos(), lat.sin() * a.cos()) * radius;
                mb.add(p, Region::Head, weights_at(&p))
            })
            .collect();
        rings.push(ids);
    }
    let south = c - Vector3::y() * radius;
    let south_id = mb.add(south, Region::Head, weights_at(&south));
    for s in 0..sectors {
        let s2 = (s + 1) % sectors;
        mb.faces.push([north_id, rings[0][s2], rings[0][s]]);
        for r in 0..lat_rings - 1 {
            let (a, b, cc, d) = (rings[r][s], rings[r][s2], rings[r + 1][s2], rings[r + 1][s]);
            mb.faces.push([a, cc, b]);
            mb.faces.push([a, d, cc]);
        }
        mb.faces.push([south_id, rings[lat_rings - 1][s], rings[lat_rings - 1][s2]]);
    }
    // The equator ring is centered exactly on the joint.
    mb.anchor_ring[j] = rings[lat_rings / 2].clone();
    let mut all = vec![north_id];
    all.extend(rings.into_iter().flatten());
    all.push(south_id);
    all
}

fn build_box(mb: &mut MeshBuilder, j: usize, spec: &JointSpec, half: [f64; 3]) -> Vec<usize> {
    let c = Vector3::from(spec.pos);
    let ids: Vec<usize> = (0..8)
        .map(|i| {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            let p = c + Vector3::new(sx * half[0], sy * half[1], sz * half[2]);
            mb.add(p, Region::Teeth, vec![(j, 1.0)])
        })
        .collect();
    let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
    for q in quads {
        mb.faces.push([ids[q[0]], ids[q[1]], ids[q[2]]]);
        mb.faces.push([ids[q[0]], ids[q[2]], ids[q[3]]]);
    }
    mb.anchor_ring[j] = ids.clone();
    ids
}

/// Smooth random displacement field.
struct SmoothField {
    terms: Vec<(Vector3<f64>, Vector3<f64>, f64)>,
}

impl SmoothField {
    fn random(rng: &mut ChaCha8Rng, amplitude: f64, max_freq: f64) -> Self {
        let terms = (0..3)
            .map(|_| {
                let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let freq = Vector3::new(
                    rng.random_range(-max_freq..max_freq),
                    rng.random_range(-max_freq..max_freq),
                    rng.random_range(-max_freq..max_freq),
                );
                (dir * (amplitude / 3.0_f64.sqrt()), freq, rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        SmoothField { terms }
    }

    fn at(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.terms
            .iter()
            .fold(Vector3::zeros(), |acc, (d, f, phase)| acc + d * (f.dot(p) + phase).sin())
    }
}

fn to_dense(n: usize, f: impl Fn(usize) -> Vector3<f64>) -> Vec<[f64; 3]> {
    (0..n)
        .map(|v| {
            let d = f(v);
            [d.x, d.y, d.z]
        })
        .collect()
}

fn random_barycentric(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let r1: f64 = rng.random::<f64>().sqrt();
    let r2: f64 = rng.random();
    let a = 1.0 - r1;
    let b = r1 * (1.0 - r2);
    [a, b, 1.0 - a - b]
}

fn sample_anchors(rng: &mut ChaCha8Rng, faces: &[usize], count: usize) -> Result<Vec<LandmarkAnchor>> {
    if count > 0 && faces.is_empty() {
        return Err(Error::Config("no faces available for a landmark set".into()));
    }
    Ok((0..count)
        .map(|i| {
            // Cycle through faces so coverage is even, randomizing the
            // position within each face.
            let face = faces[(i * 7919 + rng.random_range(0..faces.len())) % faces.len()];
            LandmarkAnchor {
                face,
                weights: random_barycentric(rng),
            }
        })
        .collect())
}

fn vertex_anchor(faces: &[[usize; 3]], vertex: usize) -> Result<LandmarkAnchor> {
    for (i, f) in faces.iter().enumerate() {
        if let Some(slot) = f.iter().position(|&v| v == vertex) {
            let mut weights = [0.0; 3];
            weights[slot] = 1.0;
            return Ok(LandmarkAnchor { face: i, weights });
        }
    }
    Err(Error::Config(format!("vertex {vertex} belongs to no face")))
}

/// Builds a capsule-body model from a recipe. Deterministic given the config.
pub fn build_model(cfg: &ModelConfig) -> Result<ModelDefinition> {
    let skeleton = match cfg.skeleton {
        SkeletonPreset::Desk => desk_skeleton(),
        SkeletonPreset::FullScale => full_skeleton(),
    };
    let k = skeleton.len();
    let parents: Vec<Option<usize>> = skeleton.iter().map(|s| s.parent).collect();
    let topo = topological_order(&parents)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mb = MeshBuilder {
        verts: Vec::new(),
        faces: Vec::new(),
        region: Vec::new(),
        weights: Vec::new(),
        anchor_ring: vec![Vec::new(); k],
    };
    let jaw = skeleton.iter().position(|s| s.region == Region::Teeth);
    let mut head_info = None;
    let mut teeth = Vec::new();
    for (j, spec) in skeleton.iter().enumerate() {
        match spec.geometry {
            Geometry::Capsule { tail, radius } => build_capsule(&mut mb, cfg, j, spec, tail, radius),
            Geometry::Sphere { radius } => {
                let ids = build_sphere(&mut mb, j, spec, radius, jaw);
                head_info = Some((j, Vector3::from(spec.pos), radius, ids));
            }
            Geometry::Box { half } => teeth = build_box(&mut mb, j, spec, half),
            Geometry::None => {}
        }
    }
    let n = mb.verts.len();
    let (head_joint, head_center, head_radius, head_ids) =
        head_info.ok_or_else(|| Error::Config("skeleton has no head".into()))?;

    // Joints without geometry regress from their nearest vertices.
    for (j, spec) in skeleton.iter().enumerate() {
        if mb.anchor_ring[j].is_empty() {
            let p = Vector3::from(spec.pos);
            let mut by_dist: Vec<usize> = (0..n).collect();
            by_dist.sort_by(|&a, &b| (mb.verts[a] - p).norm().total_cmp(&(mb.verts[b] - p).norm()));
            mb.anchor_ring[j] = by_dist[..4].to_vec();
        }
    }
    let mut regressor = vec![vec![0.0; n]; k];
    for (j, ring) in mb.anchor_ring.iter().enumerate() {
        let w = 1.0 / ring.len() as f64;
        for &v in ring {
            regressor[j][v] += w;
        }
    }
    let mut skinning = vec![vec![0.0; n]; k];
    for (v, ws) in mb.weights.iter().enumerate() {
        for &(j, w) in ws {
            skinning[j][v] += w;
        }
    }

    // Facial feature vertices on the head sphere.
    let rel = |v: usize| mb.verts[v] - head_center;
    let eyelids: Vec<usize> = head_ids
        .iter()
        .copied()
        .filter(|&v| {
            let r = rel(v);
            r.z > 0.06 && r.y > 0.005 && r.y < 0.05 && mb.weights[v].len() == 1
        })
        .collect();
    let lips: Vec<usize> = head_ids
        .iter()
        .copied()
        .filter(|&v| {
            let r = rel(v);
            r.z > 0.07 && r.y > -0.07 && r.y < -0.02
        })
        .collect();
    let front_head = |v: usize| -> f64 {
        if mb.region[v] != Region::Head || eyelids.contains(&v) {
            return 0.0;
        }
        (rel(v).z / head_radius).max(0.0)
    };

    let find_joint = |name: &str| skeleton.iter().position(|s| s.name == name);
    let neck = skeleton[head_joint].parent.unwrap_or(head_joint);
    let neck_pos = Vector3::from(skeleton[neck].pos);
    let wrists: Vec<usize> = ["l_wrist", "r_wrist"].iter().filter_map(|n| find_joint(n)).collect();
    let wrist_pos: Vec<Vector3<f64>> = wrists.iter().map(|&w| Vector3::from(skeleton[w].pos)).collect();
    let attach = |v: usize| -> Vector3<f64> {
        match mb.region[v] {
            Region::Body => mb.verts[v],
            Region::Head | Region::Teeth => neck_pos,
            Region::Hand(side) => wrist_pos[side],
        }
    };

    let mut body_basis = Vec::with_capacity(cfg.body_shape);
    for i in 0..cfg.body_shape {
        if i == 0 {
            body_basis.push(to_dense(n, |v| attach(v) * 0.06));
        } else {
            let field = SmoothField::random(&mut rng, 0.015, 6.0);
            body_basis.push(to_dense(n, |v| field.at(&attach(v))));
        }
    }
    let mut face_basis = Vec::with_capacity(cfg.face_shape);
    for _ in 0..cfg.face_shape {
        let field = SmoothField::random(&mut rng, 0.008, 25.0);
        face_basis.push(to_dense(n, |v| field.at(&mb.verts[v]) * front_head(v)));
    }
    let mut hand_basis = Vec::with_capacity(cfg.hand_shape);
    for i in 0..cfg.hand_shape {
        let field = SmoothField::random(&mut rng, 0.003, 30.0);
        hand_basis.push(to_dense(n, |v| match mb.region[v] {
            Region::Hand(side) => {
                let d = mb.verts[v] - wrist_pos[side];
                match i {
                    0 => d * 0.1,
                    1 => {
                        let along = Vector3::new(d.x, 0.0, 0.0);
                        along * 0.15
                    }
                    _ => field.at(&mb.verts[v]),
                }
            }
            _ => Vector3::zeros(),
        }));
    }
    let mut expr_basis = Vec::with_capacity(cfg.expression);
    for i in 0..cfg.expression {
        let field = SmoothField::random(&mut rng, 0.006, 30.0);
        expr_basis.push(to_dense(n, |v| match i {
            0 => {
                if eyelids.contains(&v) {
                    let normal = rel(v).normalize();
                    let down = -Vector3::y();
                    (down - normal * normal.dot(&down)).normalize() * 0.012
                } else {
                    Vector3::zeros()
                }
            }
            1 if jaw.is_some() => {
                if lips.contains(&v) {
                    Vector3::new(0.0, 0.0, -0.03)
                } else {
                    Vector3::zeros()
                }
            }
            _ => field.at(&mb.verts[v]) * front_head(v),
        }));
    }
    let mut pose_blendshapes = Vec::new();
    if cfg.pose_correctives {
        for j in (0..k).filter(|&j| parents[j].is_some()) {
            let near: Vec<(usize, f64)> = if skeleton[j].corrective {
                let p = Vector3::from(skeleton[j].pos);
                (0..n)
                    .filter_map(|v| {
                        let d = (mb.verts[v] - p).norm();
                        (d < 0.08).then(|| (v, 1.0 - d / 0.08))
                    })
                    .collect()
            } else {
                Vec::new()
            };
            for _ in 0..9 {
                let dirs: Vec<Vector3<f64>> = near
                    .iter()
                    .map(|_| {
                        Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                            * 0.004
                    })
                    .collect();
                let mut dense = vec![[0.0; 3]; n];
                for ((v, falloff), d) in near.iter().zip(&dirs) {
                    let d = d * *falloff;
                    dense[*v] = [d.x, d.y, d.z];
                }
                pose_blendshapes.push(dense);
            }
        }
    }

    // Landmarks.
    let face_region = |f: &[usize; 3]| mb.region[f[0]];
    let body_faces: Vec<usize> = (0..mb.faces.len()).filter(|&i| face_region(&mb.faces[i]) == Region::Body).collect();
    let front_faces: Vec<usize> = (0..mb.faces.len())
        .filter(|&i| {
            let f = mb.faces[i];
            face_region(&f) == Region::Head
                && f.iter().map(|&v| rel(v).z).sum::<f64>() / 3.0 > 0.02
        })
        .collect();
    let landmarks_body = sample_anchors(&mut rng, &body_faces, cfg.body_landmarks)?;
    let mut landmarks_hand = Vec::new();
    for side in 0..wrists.len() {
        let hand_faces: Vec<usize> = (0..mb.faces.len())
            .filter(|&i| face_region(&mb.faces[i]) == Region::Hand(side))
            .collect();
        landmarks_hand.extend(sample_anchors(&mut rng, &hand_faces, cfg.hand_landmarks_per_hand)?);
    }
    let landmarks_face = sample_anchors(&mut rng, &front_faces, cfg.face_landmarks)?;

    let top = head_ids[0];
    let bottom = (0..n)
        .min_by(|&a, &b| mb.verts[a].y.total_cmp(&mb.verts[b].y))
        .unwrap_or(0);
    let height_anchors = HeightAnchors {
        top: vertex_anchor(&mb.faces, top)?,
        bottom: vertex_anchor(&mb.faces, bottom)?,
    };

    let mut spheres = Vec::new();
    if let Some(eye_l) = find_joint("l_eye") {
        for eye in [eye_l, eye_l + 1] {
            let c = Vector3::from(skeleton[eye].pos);
            let verts: Vec<usize> = head_ids.iter().copied().filter(|&v| (mb.verts[v] - c).norm() < 0.06).collect();
            if !verts.is_empty() {
                let radius = verts.iter().map(|&v| (mb.verts[v] - c).norm()).sum::<f64>() / verts.len() as f64;
                spheres.push(SpherePrimitive { joint: eye, radius, vertices: verts });
            }
        }
    } else if !eyelids.is_empty() {
        spheres.push(SpherePrimitive {
            joint: head_joint,
            radius: head_radius,
            vertices: eyelids.clone(),
        });
    }
    let mut hulls = Vec::new();
    if !teeth.is_empty() && !lips.is_empty() {
        hulls.push(HullPrimitive {
            hull_vertices: teeth.clone(),
            vertices: lips.clone(),
        });
    }

    let hand_members: Vec<Vec<usize>> = wrists
        .iter()
        .map(|&w| {
            topo.iter()
                .copied()
                .filter(|&j| is_descendant_or_self(&parents, j, w))
                .collect()
        })
        .collect();
    let excluded = |j: usize| {
        matches!(skeleton[j].region, Region::Teeth)
            || (skeleton[j].region == Region::Head && j != head_joint)
            || hand_members.iter().any(|h| h[1..].contains(&j))
    };
    let body_group: Vec<usize> = topo.iter().copied().filter(|&j| !excluded(j)).collect();

    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        name: match cfg.skeleton {
            SkeletonPreset::Desk => "desk".into(),
            SkeletonPreset::FullScale => "full-scale".into(),
        },
        dims: ModelDims {
            body_shape: cfg.body_shape,
            face_shape: cfg.face_shape,
            hand_shape: cfg.hand_shape,
            expression: cfg.expression,
            joints: k,
            vertices: n,
        },
        template_vertices: mb.verts.iter().map(|v| [v.x, v.y, v.z]).collect(),
        faces: mb.faces,
        body_shape_basis: body_basis,
        face_shape_basis: face_basis,
        hand_shape_basis: hand_basis,
        expression_basis: expr_basis,
        pose_blendshapes,
        skinning_weights: skinning,
        joint_regressor: regressor,
        parents,
        joint_names: skeleton.iter().map(|s| s.name.clone()).collect(),
        landmarks_body,
        landmarks_hand,
        landmarks_face,
        intersection_spheres: spheres,
        intersection_hulls: hulls,
        pose_groups: PoseGroups {
            body: body_group,
            hands: hand_members,
        },
        height_anchors: Some(height_anchors),
    };
    ModelDefinition::from_file(file)
}

fn is_descendant_or_self(parents: &[Option<usize>], mut j: usize, ancestor: usize) -> bool {
    loop {
        if j == ancestor {
            return true;
        }
        match parents[j] {
            Some(p) => j = p,
            None => return false,
        }
    }
}
