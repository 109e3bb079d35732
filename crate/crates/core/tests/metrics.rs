mod common;

use bodyfit::metrics::{
    f_score, fit_joint_mapping, point_error, procrustes_align, pve_t_sc, pve_t_sc_meshes,
    AlignMode, Similarity,
};
use bodyfit::model::{evaluate_mesh, forward_kinematics, Parameters};
use common::*;
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::Rng;

fn random_points(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
        .collect()
}

fn residual(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum()
}

#[test]
fn procrustes_identity_and_exact_similarity() {
    let mut r = rng(1);
    let src = random_points(&mut r, 20);
    let (sim, aligned) = procrustes_align(&src, &src, true).unwrap();
    assert!((sim.rotation - nalgebra::Matrix3::identity()).amax() < 1e-12);
    assert!((sim.scale - 1.0).abs() < 1e-12 && sim.translation.norm() < 1e-12);
    assert!(residual(&aligned, &src) < 1e-24);

    let rot = oracle_rotation(&random_axis_angle(&mut r, 3.0));
    let t = Vector3::new(0.5, -2.0, 1.0);
    let tgt: Vec<Vector3<f64>> = src.iter().map(|p| rot * p * 2.0 + t).collect();
    let (sim, aligned) = procrustes_align(&src, &tgt, true).unwrap();
    assert!((sim.scale - 2.0).abs() < 1e-12);
    assert!(residual(&aligned, &tgt) < 1e-20);
}

#[test]
fn procrustes_rejects_degenerate_sets() {
    let line: Vec<Vector3<f64>> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
    assert!(procrustes_align(&line, &line, true).is_err());
    let pts = vec![Vector3::zeros(); 2];
    assert!(procrustes_align(&pts, &pts, false).is_err());
}

#[test]
fn procrustes_beats_random_similarities() {
    let mut r = rng(2);
    for _ in 0..10 {
        let src = random_points(&mut r, 15);
        let tgt = random_points(&mut r, 15);
        let (_, aligned) = procrustes_align(&src, &tgt, true).unwrap();
        let best = residual(&aligned, &tgt);
        for _ in 0..100 {
            let probe = Similarity {
                rotation: oracle_rotation(&random_axis_angle(&mut r, 3.14)),
                translation: Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)),
                scale: r.random_range(0.1..2.0),
            };
            let moved: Vec<Vector3<f64>> = src.iter().map(|p| probe.apply(p)).collect();
            assert!(best <= residual(&moved, &tgt) + 1e-12);
        }
    }
}

#[test]
fn point_error_examples() {
    let mut r = rng(3);
    let gt = random_points(&mut r, 10);
    for mode in [AlignMode::None, AlignMode::Pelvis, AlignMode::Procrustes] {
        assert!(point_error(&gt, &gt, mode, Some(0)).unwrap() < 1e-9);
    }
    let t = Vector3::new(0.003, 0.004, 0.0);
    let shifted: Vec<Vector3<f64>> = gt.iter().map(|p| p + t).collect();
    assert!((point_error(&shifted, &gt, AlignMode::None, None).unwrap() - 5.0).abs() < 1e-9);
    assert!(point_error(&shifted, &gt, AlignMode::Pelvis, Some(0)).unwrap() < 1e-9);
    assert!(point_error(&shifted, &gt, AlignMode::Pelvis, None).is_err());
    assert!(point_error(&shifted[..3], &gt, AlignMode::None, None).is_err());

    let pred = random_points(&mut r, 10);
    let (_, aligned) = procrustes_align(&pred, &gt, true).unwrap();
    let mean = aligned.iter().zip(&gt).map(|(a, b)| (a - b).norm()).sum::<f64>() / 10.0 * 1000.0;
    assert!((point_error(&pred, &gt, AlignMode::Procrustes, None).unwrap() - mean).abs() < 1e-9);
}

/// A prediction as produced by a world-space pose estimator: the truth turned
/// about its pelvis (point 0, placed at the centroid), shifted by a global
/// offset and perturbed per point.
fn estimator_like_pair(r: &mut rand_chacha::ChaCha8Rng) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let mut gt: Vec<Vector3<f64>> = random_points(r, 24).iter().map(|p| p * 0.5).collect();
    gt[0] = gt[1..].iter().fold(Vector3::zeros(), |a, p| a + p) / 23.0;
    let rot = oracle_rotation(&random_axis_angle(r, 0.5));
    let dir = random_axis_angle(r, 1.0).normalize();
    let t = dir * r.random_range(0.05..0.3);
    let noise = r.random_range(0.0..0.01);
    let pred = gt
        .iter()
        .map(|p| {
            let jitter = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
            gt[0] + rot * (p - gt[0]) + t + jitter * noise
        })
        .collect();
    (pred, gt)
}

#[test]
fn alignment_mode_ordering() {
    let mut r = rng(4);
    for _ in 0..100 {
        let (pred, gt) = estimator_like_pair(&mut r);
        let none = point_error(&pred, &gt, AlignMode::None, Some(0)).unwrap();
        let pelvis = point_error(&pred, &gt, AlignMode::Pelvis, Some(0)).unwrap();
        let pa = point_error(&pred, &gt, AlignMode::Procrustes, Some(0)).unwrap();
        assert!(pa <= pelvis + 1e-9 && pelvis <= none + 1e-9, "{pa} {pelvis} {none}");
    }
}

#[test]
fn pelvis_alignment_can_increase_error() {
    // Only the pelvis is wrong: anchoring on it moves every other point.
    let gt: Vec<Vector3<f64>> = (0..5).map(|i| Vector3::new(i as f64, (i * i) as f64, 0.0)).collect();
    let mut pred = gt.clone();
    pred[0].x += 0.1;
    let none = point_error(&pred, &gt, AlignMode::None, Some(0)).unwrap();
    let pelvis = point_error(&pred, &gt, AlignMode::Pelvis, Some(0)).unwrap();
    assert!(pelvis > none);
}

#[test]
fn pve_t_sc_examples() {
    let m = desk();
    let mut r = rng(5);
    let a = random_params(m, 1, &mut r, 0.5);
    assert!(pve_t_sc(m, &a, &a).unwrap() < 1e-9);

    let mesh = bodyfit::model::shaped_template(m, &a).unwrap();
    let big: Vec<Vector3<f64>> = mesh.iter().map(|p| p * 1.1 + Vector3::new(0.2, 0.0, 0.0)).collect();
    assert!(pve_t_sc_meshes(&mesh, &big).unwrap() < 1e-9);
    assert!(pve_t_sc_meshes(&big, &mesh).unwrap() < 1e-9);

    for _ in 0..5 {
        let b = random_params(m, 1, &mut r, 0.5);
        let pa = bodyfit::model::shaped_template(m, &a).unwrap();
        let pb = bodyfit::model::shaped_template(m, &b).unwrap();
        let ca = pa.iter().fold(Vector3::zeros(), |s, p| s + p) / pa.len() as f64;
        let cb = pb.iter().fold(Vector3::zeros(), |s, p| s + p) / pb.len() as f64;
        let unscaled = pa
            .iter()
            .zip(&pb)
            .map(|(x, y)| ((x - ca) - (y - cb)).norm())
            .sum::<f64>()
            / pa.len() as f64
            * 1000.0;
        let sc = pve_t_sc(m, &a, &b).unwrap();
        assert!(sc <= unscaled + 1e-9);
        // Scale search oracle: no probe scale does better.
        for k in 0..50 {
            let s = 0.8 + 0.008 * k as f64;
            let probe = pa
                .iter()
                .zip(&pb)
                .map(|(x, y)| ((x - ca) * s - (y - cb)).norm())
                .sum::<f64>()
                / pa.len() as f64
                * 1000.0;
            assert!(sc <= probe + 1e-9);
        }
    }
    let mut bad = a.clone();
    bad.body_shape.pop();
    assert!(pve_t_sc(m, &bad, &a).is_err());
}

#[test]
fn f_score_boundary_cases() {
    let mut r = rng(6);
    let gt = random_points(&mut r, 40);
    assert_eq!(f_score(&gt, &gt, 5.0).unwrap(), 1.0);
    assert_eq!(f_score(&gt, &gt, 1e-6).unwrap(), 1.0);
    let far: Vec<Vector3<f64>> = gt.iter().map(|p| p + Vector3::new(10.0, 0.0, 0.0)).collect();
    assert_eq!(f_score(&far, &gt, 10.0).unwrap(), 0.0);
    let half: Vec<Vector3<f64>> = gt
        .iter()
        .enumerate()
        .map(|(i, p)| if i % 2 == 0 { *p } else { p + Vector3::new(10.0, 0.0, 0.0) })
        .collect();
    assert_eq!(f_score(&half, &gt, 5.0).unwrap(), 0.5);
    assert!(f_score(&[], &gt, 5.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn f_score_symmetric_and_monotone(seed in 0u64..1000, t1 in 0.1f64..50.0, t2 in 0.1f64..50.0) {
        let mut r = rng(seed);
        let a: Vec<Vector3<f64>> = random_points(&mut r, 30).iter().map(|p| p * 0.05).collect();
        let b: Vec<Vector3<f64>> = random_points(&mut r, 25).iter().map(|p| p * 0.05).collect();
        prop_assert_eq!(f_score(&a, &b, t1).unwrap(), f_score(&b, &a, t1).unwrap());
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(f_score(&a, &b, lo).unwrap() <= f_score(&a, &b, hi).unwrap());
    }
}

fn posed_sequence(frames: usize, seed: u64) -> (Vec<Vec<Vector3<f64>>>, Vec<Vec<Vector3<f64>>>) {
    let m = desk();
    let mut r = rng(seed);
    let p = random_params(m, frames, &mut r, 0.6);
    let meshes: Vec<Vec<Vector3<f64>>> = (0..frames).map(|f| evaluate_mesh(m, &p, f).unwrap()).collect();
    let joints = (0..frames)
        .map(|f| forward_kinematics(m, &p, f).unwrap().translations)
        .collect();
    (meshes, joints)
}

#[test]
fn coincident_and_midpoint_joints() {
    let (meshes, _) = posed_sequence(20, 1);
    let joints: Vec<Vec<Vector3<f64>>> = meshes.iter().map(|v| vec![v[10]]).collect();
    let map = fit_joint_mapping(&meshes, &joints, 4).unwrap();
    assert_eq!(map.joints[0].vertices, vec![10]);
    assert_eq!(map.joints[0].weights, vec![1.0]);
    assert!(map.joints[0].residual < 1e-12);

    // Every vertex moves independently except two that share a rigid motion.
    let mut r = rng(17);
    let frames = 20;
    let n = 60;
    let cloud: Vec<Vec<Vector3<f64>>> = (0..frames).map(|_| random_points(&mut r, n)).collect();
    let offset = Vector3::new(0.01, 0.0, 0.0);
    let meshes: Vec<Vec<Vector3<f64>>> = cloud
        .iter()
        .map(|v| {
            let rot = oracle_rotation(&random_axis_angle(&mut r, 3.0));
            let mut v = v.clone();
            v[7] = v[3] + rot * offset;
            v
        })
        .collect();
    let joints: Vec<Vec<Vector3<f64>>> = meshes.iter().map(|v| vec![(v[3] + v[7]) * 0.5]).collect();
    let map = fit_joint_mapping(&meshes, &joints, 4).unwrap();
    let fit = &map.joints[0];
    assert!(fit.residual < 1e-9);
    let mut pairs: Vec<(usize, f64)> = fit.vertices.iter().copied().zip(fit.weights.iter().copied()).collect();
    pairs.sort_by_key(|p| p.0);
    assert_eq!(pairs.len(), 2, "{pairs:?}");
    assert_eq!(pairs[0].0, 3);
    assert_eq!(pairs[1].0, 7);
    assert!((pairs[0].1 - 0.5).abs() < 1e-9 && (pairs[1].1 - 0.5).abs() < 1e-9);
}

#[test]
fn planted_four_vertex_mappings_are_recovered() {
    let (meshes, real_joints) = posed_sequence(40, 2);
    let m = desk();
    let mut r = rng(3);
    let n = m.num_vertices();
    // Four vertices around each rest joint with random affine weights.
    let rest = bodyfit::model::regress_joints(m, &Parameters::zeros(m, 1)).unwrap();
    let planted: Vec<(Vec<usize>, Vec<f64>)> = rest
        .iter()
        .map(|j| {
            let mut near: Vec<usize> = (0..n).collect();
            near.sort_by(|&a, &b| (m.template[a] - j).norm().total_cmp(&(m.template[b] - j).norm()));
            near.truncate(16);
            let pick = rand::seq::index::sample(&mut r, near.len(), 4).into_vec();
            let verts: Vec<usize> = pick.iter().map(|&i| near[i]).collect();
            let mut w: Vec<f64> = (0..3).map(|_| r.random_range(-0.2..0.6)).collect();
            w.push(1.0 - w.iter().sum::<f64>());
            (verts, w)
        })
        .collect();
    let joints: Vec<Vec<Vector3<f64>>> = meshes
        .iter()
        .map(|v| {
            planted
                .iter()
                .map(|(idx, w)| idx.iter().zip(w).fold(Vector3::zeros(), |a, (&i, &wt)| a + v[i] * wt))
                .collect()
        })
        .collect();
    let map = fit_joint_mapping(&meshes, &joints, 4).unwrap();
    // Upper arm length as the limb scale.
    let limb = (real_joints[0][5] - real_joints[0][6]).norm();
    for fit in &map.joints {
        assert!(fit.residual <= 1e-6 * limb, "{}", fit.residual);
        assert!((fit.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(fit.vertices.len() <= 4);
    }
}

#[test]
fn mapping_residual_is_non_increasing_in_k() {
    let (meshes, joints) = posed_sequence(30, 4);
    let mut previous = vec![f64::INFINITY; joints[0].len()];
    for k in 1..=5 {
        let map = fit_joint_mapping(&meshes, &joints, k).unwrap();
        for (j, fit) in map.joints.iter().enumerate() {
            assert!(fit.residual <= previous[j] + 1e-12, "joint {j} k {k}");
            previous[j] = fit.residual;
        }
    }
    assert!(fit_joint_mapping(&meshes[..3], &joints[..3], 4).is_err());
}

#[test]
fn stacked_parameters_have_consistent_shape() {
    let m = desk();
    let p = Parameters::zeros(m, 2);
    assert_eq!(pve_t_sc(m, &p, &p).unwrap(), 0.0);
}
