mod common;

use bodyfit::model::{
    build_model, evaluate_mesh, evaluate_template, extract_landmarks, forward_kinematics,
    normalize_pose, regress_joints, skin, JointTransforms, LandmarkAnchor, LandmarkSet,
    ModelConfig, ModelDefinition, Parameters,
};
use bodyfit::Error;
use common::*;
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::Rng;

fn dense_regress(model: &ModelDefinition, verts: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let file = model.to_file();
    file.joint_regressor
        .iter()
        .map(|row| {
            let mut acc = Vector3::zeros();
            for (v, w) in row.iter().enumerate() {
                acc += verts[v] * *w;
            }
            acc
        })
        .collect()
}

fn naive_unposed(model: &ModelDefinition, p: &Parameters, frame: usize) -> Vec<Vector3<f64>> {
    let file = model.to_file();
    let fp = &p.frames[frame];
    let mut out: Vec<Vector3<f64>> = file.template_vertices.iter().map(|v| Vector3::from(*v)).collect();
    let blocks = [
        (&file.body_shape_basis, &p.body_shape),
        (&file.face_shape_basis, &p.face_shape),
        (&file.hand_shape_basis, &p.hand_shape),
        (&file.expression_basis, &fp.expression),
    ];
    for (basis, coeffs) in blocks {
        for (comp, c) in basis.iter().zip(coeffs.iter()) {
            for (v, d) in comp.iter().enumerate() {
                out[v] += Vector3::from(*d) * *c;
            }
        }
    }
    if !file.pose_blendshapes.is_empty() {
        let mut slot = 0;
        for j in 0..model.num_joints() {
            if model.parents[j].is_none() {
                continue;
            }
            let dev = oracle_rotation(&Vector3::from(fp.pose[j])) - Matrix3::identity();
            for r in 0..3 {
                for c in 0..3 {
                    for (v, d) in file.pose_blendshapes[9 * slot + 3 * r + c].iter().enumerate() {
                        out[v] += Vector3::from(*d) * dev[(r, c)];
                    }
                }
            }
            slot += 1;
        }
    }
    out
}

/// World transforms by explicit recursion over the tree.
fn oracle_fk(model: &ModelDefinition, p: &Parameters, frame: usize) -> (Vec<Matrix3<f64>>, Vec<Vector3<f64>>) {
    let rest = dense_regress(model, &naive_unposed_shape_only(model, p));
    let fp = &p.frames[frame];
    let k = model.num_joints();
    let mut rot = vec![Matrix3::identity(); k];
    let mut pos = vec![Vector3::zeros(); k];
    fn visit(
        j: usize,
        model: &ModelDefinition,
        fp: &bodyfit::model::FrameParams,
        rest: &[Vector3<f64>],
        rot: &mut [Matrix3<f64>],
        pos: &mut [Vector3<f64>],
    ) {
        let local = oracle_rotation(&Vector3::from(fp.pose[j]));
        match model.parents[j] {
            None => {
                rot[j] = local;
                pos[j] = rest[j] + Vector3::from(fp.translation);
            }
            Some(p) => {
                rot[j] = rot[p] * local;
                pos[j] = pos[p] + rot[p] * (rest[j] - rest[p]);
            }
        }
        for c in 0..model.num_joints() {
            if model.parents[c] == Some(j) {
                visit(c, model, fp, rest, rot, pos);
            }
        }
    }
    let root = model.parents.iter().position(|p| p.is_none()).unwrap();
    visit(root, model, fp, &rest, &mut rot, &mut pos);
    (rot, pos)
}

fn naive_unposed_shape_only(model: &ModelDefinition, p: &Parameters) -> Vec<Vector3<f64>> {
    let mut q = p.clone();
    for f in &mut q.frames {
        f.expression.iter_mut().for_each(|x| *x = 0.0);
        f.pose.iter_mut().for_each(|a| *a = [0.0; 3]);
    }
    naive_unposed(model, &q, 0)
}

fn oracle_skin(
    model: &ModelDefinition,
    unposed: &[Vector3<f64>],
    rot: &[Matrix3<f64>],
    pos: &[Vector3<f64>],
    rest: &[Vector3<f64>],
) -> Vec<Vector3<f64>> {
    (0..unposed.len())
        .map(|v| {
            let mut acc = Vector3::zeros();
            for k in 0..model.num_joints() {
                let w = model.skinning_weight(k, v);
                acc += (rot[k] * (unposed[v] - rest[k]) + pos[k]) * w;
            }
            acc
        })
        .collect()
}

fn max_diff(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

#[test]
fn desk_model_has_expected_dimensions() {
    let m = desk();
    assert_eq!(m.num_joints(), 20);
    assert_eq!(
        (m.dims.body_shape, m.dims.face_shape, m.dims.hand_shape, m.dims.expression),
        (8, 6, 2, 10)
    );
    assert!((500..=800).contains(&m.num_vertices()), "{}", m.num_vertices());
    assert_eq!(m.pose_blendshapes.len(), 9 * 19);
    assert_eq!(m.pose_groups.hands.len(), 2);
    assert!(!m.spheres.is_empty() && !m.hulls.is_empty());
}

#[test]
fn full_scale_config_reports_reference_sizes() {
    let m = build_model(&ModelConfig::full_scale()).unwrap();
    assert_eq!(m.num_joints(), 54);
    assert_eq!(
        (m.dims.body_shape, m.dims.face_shape, m.dims.hand_shape, m.dims.expression),
        (300, 256, 9, 224)
    );
    assert_eq!(m.landmark_set(LandmarkSet::Body).len(), 1428);
    assert_eq!(m.landmark_set(LandmarkSet::Hand).len(), 2 * 141);
    assert_eq!(m.hand_landmarks_per_hand(), 141);
    assert_eq!(m.landmark_set(LandmarkSet::Face).len(), 744);
    let p = Parameters::zeros(&m, 1);
    assert_eq!(evaluate_mesh(&m, &p, 0).unwrap(), m.template);
}

#[test]
fn builder_is_deterministic() {
    let a = build_model(&ModelConfig::desk()).unwrap();
    assert_eq!(a.hash(), desk().hash());
    let mut cfg = ModelConfig::desk();
    cfg.seed = 2;
    assert_ne!(build_model(&cfg).unwrap().hash(), a.hash());
}

#[test]
fn file_round_trip_preserves_hash() {
    let dir = tempdir();
    let path = dir.join("model.json");
    desk().save(&path).unwrap();
    let loaded = ModelDefinition::load(&path).unwrap();
    assert_eq!(loaded.hash(), desk().hash());
    assert_eq!(loaded.template, desk().template);
}

fn tempdir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("bodyfit-model-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn loader_rejects_invalid_files() {
    let mut f = two_link_file();
    f.skinning_weights[0][0] = 0.5;
    assert!(matches!(ModelDefinition::from_file(f), Err(Error::InvalidModel(_))));

    let mut f = two_link_file();
    f.joint_regressor[1][1] = 0.9;
    assert!(ModelDefinition::from_file(f).is_err());

    let mut f = two_link_file();
    f.parents = vec![Some(1), Some(0)];
    assert!(ModelDefinition::from_file(f).is_err());

    let mut f = two_link_file();
    f.landmarks_body[0].weights = [0.7, 0.7, -0.4];
    assert!(ModelDefinition::from_file(f).is_err());

    let mut f = two_link_file();
    f.format_version = 2;
    assert!(matches!(ModelDefinition::from_file(f), Err(Error::Format(_))));

    let mut f = two_link_file();
    f.skinning_weights[1][3] = -0.0001;
    f.skinning_weights[0][3] = 1.0001;
    assert!(ModelDefinition::from_file(f).is_err());
}

#[test]
fn zero_parameters_give_template_bit_for_bit() {
    let m = desk();
    let p = Parameters::zeros(m, 2);
    assert_eq!(evaluate_template(m, &p, 1).unwrap(), m.template);
    assert_eq!(evaluate_mesh(m, &p, 0).unwrap(), m.template);
}

#[test]
fn unit_shape_coefficient_adds_its_basis() {
    let m = desk();
    let file = m.to_file();
    for i in 0..m.dims.body_shape {
        let mut p = Parameters::zeros(m, 1);
        p.body_shape[i] = 1.0;
        let got = evaluate_template(m, &p, 0).unwrap();
        for v in 0..m.num_vertices() {
            assert_eq!(got[v], m.template[v] + Vector3::from(file.body_shape_basis[i][v]));
        }
    }
}

#[test]
fn template_matches_naive_summation() {
    let m = desk();
    let mut r = rng(11);
    for _ in 0..5 {
        let p = random_params(m, 2, &mut r, 1.0);
        for f in 0..2 {
            let got = evaluate_template(m, &p, f).unwrap();
            assert!(max_diff(&got, &naive_unposed(m, &p, f)) < 1e-12);
        }
    }
}

#[test]
fn shape_errors_on_dimension_mismatch() {
    let m = desk();
    let mut p = Parameters::zeros(m, 1);
    p.body_shape.push(0.0);
    assert!(matches!(evaluate_template(m, &p, 0), Err(Error::Shape(_))));
    let mut p = Parameters::zeros(m, 1);
    p.frames[0].pose.pop();
    assert!(matches!(evaluate_mesh(m, &p, 0), Err(Error::Shape(_))));
    let p = Parameters::zeros(m, 1);
    assert!(evaluate_mesh(m, &p, 3).is_err());
}

#[test]
fn regressed_joints_match_dense_product_and_are_affine() {
    let m = desk();
    let zero = Parameters::zeros(m, 1);
    let j0 = regress_joints(m, &zero).unwrap();
    assert!(max_diff(&j0, &dense_regress(m, &m.template)) < 1e-12);

    let mut r = rng(3);
    let p1 = random_params(m, 1, &mut r, 1.0);
    let p2 = random_params(m, 1, &mut r, 1.0);
    let mut sum = p1.clone();
    for (a, b) in sum.body_shape.iter_mut().zip(&p2.body_shape) {
        *a += b;
    }
    for (a, b) in sum.face_shape.iter_mut().zip(&p2.face_shape) {
        *a += b;
    }
    for (a, b) in sum.hand_shape.iter_mut().zip(&p2.hand_shape) {
        *a += b;
    }
    let j1 = regress_joints(m, &p1).unwrap();
    let j2 = regress_joints(m, &p2).unwrap();
    let j12 = regress_joints(m, &sum).unwrap();
    for k in 0..m.num_joints() {
        assert!(((j12[k] - j0[k]) - ((j1[k] - j0[k]) + (j2[k] - j0[k]))).amax() < 1e-12);
    }
    let oracle = dense_regress(m, &naive_unposed_shape_only(m, &p1));
    assert!(max_diff(&j1, &oracle) < 1e-12);
    // Expression and pose do not move the rest joints.
    let mut p3 = p1.clone();
    p3.frames[0].expression.iter_mut().for_each(|x| *x += 1.0);
    assert_eq!(regress_joints(m, &p3).unwrap(), j1);
}

#[test]
fn identity_pose_kinematics() {
    let m = desk();
    let mut r = rng(5);
    let mut p = random_params(m, 1, &mut r, 1.0);
    p.frames[0].pose.iter_mut().for_each(|a| *a = [0.0; 3]);
    p.frames[0].translation = [0.0; 3];
    let jt = forward_kinematics(m, &p, 0).unwrap();
    let rest = regress_joints(m, &p).unwrap();
    assert!(max_diff(&jt.translations, &rest) < 1e-15);
    assert!(jt.rotations.iter().all(|r| *r == Matrix3::identity()));
}

#[test]
fn two_link_chain_rotates_child() {
    let m = ModelDefinition::from_file(two_link_file()).unwrap();
    let mut p = Parameters::zeros(&m, 1);
    p.frames[0].pose[0] = [0.0, 0.0, std::f64::consts::FRAC_PI_2];
    let jt = forward_kinematics(&m, &p, 0).unwrap();
    assert!((jt.translations[1] - Vector3::new(0.0, 1.0, 0.0)).amax() < 1e-15);
    assert!((jt.translations[0]).amax() < 1e-15);
}

#[test]
fn leaf_rotation_is_product_of_ancestors() {
    let m = desk();
    let mut r = rng(9);
    let p = random_params(m, 1, &mut r, 2.0);
    let jt = forward_kinematics(m, &p, 0).unwrap();
    let (rot, pos) = oracle_fk(m, &p, 0);
    for k in 0..m.num_joints() {
        assert!((jt.rotations[k] - rot[k]).amax() < 1e-12);
        assert!((jt.translations[k] - pos[k]).amax() < 1e-12);
        let rt = jt.rotations[k];
        assert!((rt.transpose() * rt - Matrix3::identity()).amax() < 1e-9);
        assert!((rt.determinant() - 1.0).abs() < 1e-9);
    }
    // Explicit product down to the left finger tip.
    let leaf = m.joint_index("l_fingers").unwrap();
    let mut chain = vec![leaf];
    while let Some(parent) = m.parents[*chain.last().unwrap()] {
        chain.push(parent);
    }
    let product = chain
        .iter()
        .rev()
        .fold(Matrix3::identity(), |acc, &j| acc * oracle_rotation(&Vector3::from(p.frames[0].pose[j])));
    assert!((jt.rotations[leaf] - product).amax() < 1e-12);
}

#[test]
fn identity_transforms_leave_vertices_unchanged() {
    let m = desk();
    let rest = regress_joints(m, &Parameters::zeros(m, 1)).unwrap();
    let jt = JointTransforms {
        translations: rest.clone(),
        rotations: vec![Matrix3::identity(); m.num_joints()],
    };
    let mut r = rng(1);
    let verts: Vec<Vector3<f64>> = m
        .template
        .iter()
        .map(|v| v + Vector3::new(r.random_range(-0.1..0.1), 0.0, 0.0))
        .collect();
    assert_eq!(skin(m, &verts, &jt, &rest).unwrap(), verts);
}

#[test]
fn rigid_single_joint_skinning() {
    let m = ModelDefinition::from_file(two_link_file()).unwrap();
    let rest = vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)];
    let rz = oracle_rotation(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
    let jt = JointTransforms {
        translations: vec![Vector3::zeros(), rz * rest[1]],
        rotations: vec![rz, rz],
    };
    let out = skin(&m, &m.template, &jt, &rest).unwrap();
    assert!((out[1] - Vector3::new(0.0, 1.0, 0.0)).amax() < 1e-15);
}

#[test]
fn skinning_matches_brute_force() {
    let m = desk();
    let mut r = rng(21);
    for _ in 0..5 {
        let p = random_params(m, 1, &mut r, 1.5);
        let unposed = evaluate_template(m, &p, 0).unwrap();
        let rest = regress_joints(m, &p).unwrap();
        let jt = forward_kinematics(m, &p, 0).unwrap();
        let got = skin(m, &unposed, &jt, &rest).unwrap();
        let want = oracle_skin(m, &unposed, &jt.rotations, &jt.translations, &rest);
        assert!(max_diff(&got, &want) < 1e-12);
    }
}

#[test]
fn mesh_is_composition_of_parts() {
    let m = desk();
    let mut r = rng(8);
    let p = random_params(m, 3, &mut r, 1.0);
    for f in 0..3 {
        let unposed = evaluate_template(m, &p, f).unwrap();
        let rest = regress_joints(m, &p).unwrap();
        let jt = forward_kinematics(m, &p, f).unwrap();
        let composed = skin(m, &unposed, &jt, &rest).unwrap();
        let mesh = evaluate_mesh(m, &p, f).unwrap();
        assert!(max_diff(&mesh, &composed) < 1e-14);
        assert_eq!(mesh, evaluate_mesh(m, &p, f).unwrap());
    }
}

#[test]
fn fk_joints_equal_skinned_virtual_joints() {
    let m = desk();
    let mut r = rng(12);
    let p = random_params(m, 1, &mut r, 2.0);
    let rest = regress_joints(m, &p).unwrap();
    let jt = forward_kinematics(m, &p, 0).unwrap();
    let (rot, pos) = oracle_fk(m, &p, 0);
    for k in 0..m.num_joints() {
        // Weight-1 virtual vertex at the rest joint, skinned by joint k.
        let skinned = rot[k] * (rest[k] - rest[k]) + pos[k];
        assert!((jt.translations[k] - skinned).amax() < 1e-10);
    }
}

#[test]
fn landmark_extraction() {
    let m = ModelDefinition::from_file(two_link_file()).unwrap();
    let verts = m.template.clone();
    let lm = extract_landmarks(&m, &verts, LandmarkSet::Body).unwrap();
    assert_eq!(lm[0], verts[0]);
    let centroid = LandmarkAnchor {
        face: 0,
        weights: [1.0 / 3.0; 3],
    };
    let c = m.anchor_point(&centroid, &verts);
    assert!((c - (verts[0] + verts[1] + verts[2]) / 3.0).amax() < 1e-15);
    assert!(extract_landmarks(&m, &verts[..3], LandmarkSet::Body).is_err());
    assert!(matches!(LandmarkSet::parse("tail"), Err(Error::Lookup { .. })));

    let d = desk();
    assert_eq!(d.landmark_set(LandmarkSet::Body).len(), 200);
    assert_eq!(d.landmark_set(LandmarkSet::Hand).len(), 40);
    assert_eq!(d.landmark_set(LandmarkSet::Face).len(), 60);
    assert_eq!(d.num_landmarks(), 300);
    assert_eq!(d.landmark(200).unwrap().0, LandmarkSet::Hand);
    assert_eq!(d.landmark(260).unwrap().0, LandmarkSet::Face);
    assert!(d.landmark(300).is_none());
}

#[test]
fn normalized_pose_ignores_global_rigid_motion() {
    let m = desk();
    let mut r = rng(31);
    let p = random_params(m, 1, &mut r, 1.0);
    let q = normalize_pose(m, &p, 0).unwrap();
    assert_eq!(q.len(), 6 * 20 + 3 * 20 + 9 * 20);
    for _ in 0..20 {
        let mut moved = p.clone();
        let a = random_axis_angle(&mut r, 3.0);
        moved.frames[0].pose[0] = [a.x, a.y, a.z];
        moved.frames[0].translation = [r.random_range(-2.0..2.0), 0.3, r.random_range(-2.0..2.0)];
        let q2 = normalize_pose(m, &moved, 0).unwrap();
        let diff = q.iter().zip(&q2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10);
    }
    let mut root_free = p.clone();
    root_free.frames[0].pose[0] = [0.0; 3];
    root_free.frames[0].translation = [0.0; 3];
    assert_eq!(normalize_pose(m, &root_free, 0).unwrap(), q);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mesh_is_linear_in_each_coefficient(block in 0usize..4, idx in 0usize..16, base in -1.0f64..1.0) {
        let m = desk();
        let mut p = Parameters::zeros(m, 1);
        let file = m.to_file();
        let (basis, len) = match block {
            0 => (&file.body_shape_basis, m.dims.body_shape),
            1 => (&file.face_shape_basis, m.dims.face_shape),
            2 => (&file.hand_shape_basis, m.dims.hand_shape),
            _ => (&file.expression_basis, m.dims.expression),
        };
        let i = idx % len;
        let h = 1e-4;
        let set = |p: &mut Parameters, value: f64| match block {
            0 => p.body_shape[i] = value,
            1 => p.face_shape[i] = value,
            2 => p.hand_shape[i] = value,
            _ => p.frames[0].expression[i] = value,
        };
        set(&mut p, base);
        let a = evaluate_template(m, &p, 0).unwrap();
        set(&mut p, base + h);
        let b = evaluate_template(m, &p, 0).unwrap();
        for v in 0..m.num_vertices() {
            let fd = (b[v] - a[v]) / h;
            prop_assert!((fd - Vector3::from(basis[i][v])).amax() < 1e-9);
        }
    }

    #[test]
    fn skinning_weights_and_regressor_are_normalized(v in 0usize..600, j in 0usize..20) {
        let m = desk();
        let v = v % m.num_vertices();
        let s: f64 = (0..m.num_joints()).map(|k| m.skinning_weight(k, v)).sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
        let r: f64 = m.regressor[j].iter().map(|(_, w)| w).sum();
        prop_assert!((r - 1.0).abs() < 1e-9);
    }
}
