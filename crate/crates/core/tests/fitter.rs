mod common;

use bodyfit::energies::{EnergyWeights, Priors};
use bodyfit::fitter::{
    fit_sequence, fitted_meshes, init_global_pnp, ExternalInit, FitConfig, FitResult, FitSettings, Stage,
};
use bodyfit::metrics::{evaluate_sequence, point_error, AlignMode};
use bodyfit::model::Parameters;
use bodyfit::optim::Termination;
use bodyfit::rotation::{axis_angle_to_matrix, rotation_geodesic};
use bodyfit::synth::{generate_sequence, Sequence, SynthConfig};
use bodyfit::Error;
use common::{desk, perfect_observations, ring_rig};
use nalgebra::Vector3;

fn mean_vertex_error_m(a: &Parameters, b: &Parameters, mode: AlignMode) -> f64 {
    let pa = fitted_meshes(desk(), a).unwrap();
    let pb = fitted_meshes(desk(), b).unwrap();
    let total: f64 = pa.iter().zip(&pb).map(|(x, y)| point_error(x, y, mode, None).unwrap()).sum();
    total / pa.len() as f64 / 1000.0
}

fn sequence(seed: u64, frames: usize, cameras: usize) -> Sequence {
    generate_sequence(desk(), &SynthConfig { seed, frames, cameras, ..SynthConfig::default() }).unwrap()
}

fn fit(seq: &Sequence, config: &FitConfig) -> FitResult {
    fit_sequence(
        desk(),
        &seq.observations,
        Some(&seq.rig),
        &Priors::default(),
        &EnergyWeights::default(),
        config,
        None,
    )
    .unwrap()
}

#[test]
fn pnp_recovers_a_rigid_placement() {
    let model = desk();
    let rig = ring_rig(4, 2.5);
    let root = model.topo_order[0];
    for (seed, (rot, trans)) in [
        (Vector3::new(0.2, -0.4, 0.1), Vector3::new(0.1, -0.05, 0.2)),
        (Vector3::new(-0.3, 0.9, 0.05), Vector3::new(-0.2, 0.1, -0.1)),
    ]
    .into_iter()
    .enumerate()
    {
        let mut truth = Parameters::zeros(model, 1);
        truth.frames[0].pose[root] = rot.into();
        truth.frames[0].translation = trans.into();
        let obs = perfect_observations(model, &truth, &rig, 1.0);
        let (r, t) = init_global_pnp(model, &obs, &rig, &Parameters::zeros(model, 1), 0).unwrap();
        let angle = rotation_geodesic(&axis_angle_to_matrix(&r), &axis_angle_to_matrix(&rot));
        assert!(angle < 1e-5, "seed {seed}: {angle}");
        assert!((t - trans).norm() < 1e-5, "seed {seed}: {}", (t - trans).norm());
    }
}

#[test]
fn pnp_of_an_identity_placement_is_identity() {
    let model = desk();
    let rig = ring_rig(3, 2.5);
    let zeros = Parameters::zeros(model, 1);
    let obs = perfect_observations(model, &zeros, &rig, 1.0);
    let (r, t) = init_global_pnp(model, &obs, &rig, &zeros, 0).unwrap();
    assert!(r.norm() < 1e-6 && t.norm() < 1e-6, "{r} {t}");
}

#[test]
fn pnp_needs_six_landmarks() {
    let model = desk();
    let rig = ring_rig(2, 2.5);
    let zeros = Parameters::zeros(model, 1);
    let mut obs = perfect_observations(model, &zeros, &rig, 1.0);
    for view in &mut obs.frames[0] {
        view.truncate(5);
    }
    assert!(matches!(init_global_pnp(model, &obs, &rig, &zeros, 0), Err(Error::InitFailure(_))));
}

#[test]
fn fit_seeded_at_ground_truth_stays_there() {
    let model = desk();
    let cfg = SynthConfig { frames: 4, noise_px: 0.0, occlusion_fraction: 0.0, seed: 2, ..SynthConfig::default() };
    let seq = generate_sequence(model, &cfg).unwrap();
    let external = ExternalInit { views: vec![Some(seq.params.clone()); cfg.cameras] };
    let result = fit_sequence(
        model,
        &seq.observations,
        Some(&seq.rig),
        &Priors::default(),
        &EnergyWeights::landmarks_only(),
        &FitConfig::default(),
        Some(&external),
    )
    .unwrap();
    assert_eq!(result.external_view, Some(0));
    let model_stage = result.stages.iter().find(|s| s.stage == Stage::Model).unwrap();
    assert!(model_stage.trace[0] < 1e-6, "{:?}", &model_stage.trace[..1]);
    let fitted = fitted_meshes(model, &result.params).unwrap();
    let truth = fitted_meshes(model, &seq.params).unwrap();
    for (a, b) in fitted.iter().zip(&truth) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).norm() < 1e-4);
        }
    }
}

#[test]
fn multi_view_fit_recovers_the_sequence() {
    let seq = sequence(21, 8, 4);
    let result = fit(&seq, &FitConfig { model_iterations: 600, ..FitConfig::default() });
    let err = mean_vertex_error_m(&result.params, &seq.params, AlignMode::None);
    assert!(err <= 5e-3, "{err}");
}

#[test]
fn single_view_fit_halves_the_initial_error() {
    let seq = sequence(4, 8, 1);
    let init = fit(&seq, &FitConfig { global_iterations: 0, model_iterations: 0, camera_iterations: 0, ..FitConfig::default() });
    let fitted = fit(&seq, &FitConfig::default());
    let pelvis_aligned = |p: &Parameters| evaluate_sequence(desk(), p, &seq.params, "").unwrap().get("mpvpe").unwrap();
    let before = pelvis_aligned(&init.params);
    let after = pelvis_aligned(&fitted.params);
    assert!(after <= 0.5 * before, "before {before} after {after}");
}

#[test]
fn stage_traces_never_increase() {
    let seq = sequence(5, 6, 2);
    let result = fit(&seq, &FitConfig::default());
    assert_eq!(result.stages.iter().map(|s| s.stage).collect::<Vec<_>>(), [Stage::Global, Stage::Model, Stage::Cameras]);
    for stage in &result.stages {
        assert_eq!(stage.trace.len(), stage.iterations + 1);
        for w in stage.trace.windows(2) {
            assert!(w[1] <= w[0], "{:?}: {} > {}", stage.stage, w[1], w[0]);
        }
    }
    assert_eq!(result.stages[0].frame_terminations.len(), 6);
}

#[test]
fn stage_masks_leave_other_parameters_untouched() {
    let seq = sequence(6, 4, 2);
    let base = FitConfig { model_iterations: 20, ..FitConfig::default() };

    // The global stage only moves the root rotation and translation.
    let global = fit(&seq, &FitConfig { model_iterations: 0, camera_iterations: 0, ..base.clone() });
    let zeros = Parameters::zeros(desk(), 4);
    let root = desk().topo_order[0];
    assert_eq!(global.params.body_shape, zeros.body_shape);
    assert_eq!(global.params.face_shape, zeros.face_shape);
    for (f, z) in global.params.frames.iter().zip(&zeros.frames) {
        assert_eq!(f.expression, z.expression);
        for j in (0..desk().num_joints()).filter(|&j| j != root) {
            assert_eq!(f.pose[j], z.pose[j]);
        }
    }

    // Camera refinement moves the cameras and nothing else.
    let frozen = fit(&seq, &FitConfig { camera_iterations: 0, ..base.clone() });
    let refined = fit(&seq, &base);
    assert_eq!(frozen.params, refined.params);
    assert_eq!(frozen.rig, seq.rig);
    assert_ne!(refined.rig, seq.rig);

    let no_cameras = fit(&seq, &FitConfig { refine_cameras: false, ..base });
    assert_eq!(no_cameras.rig, seq.rig);
    assert_eq!(no_cameras.stages.len(), 2);
}

#[test]
fn fitting_is_deterministic() {
    let seq = sequence(8, 4, 2);
    let cfg = FitConfig { model_iterations: 30, ..FitConfig::default() };
    let a = fit(&seq, &cfg).to_json("m", "c").unwrap();
    let b = fit(&seq, &cfg).to_json("m", "c").unwrap();
    assert_eq!(a, b);
}

#[test]
fn result_file_round_trips() {
    let seq = sequence(9, 3, 2);
    let result = fit(&seq, &FitConfig { model_iterations: 10, camera_iterations: 5, ..FitConfig::default() });
    let text = result.to_json(desk().hash(), "abc").unwrap();
    let (back, hash) = FitResult::from_json(&text).unwrap();
    assert_eq!(hash, desk().hash());
    assert_eq!(back, result);
    let bumped = text.replacen("\"format_version\": 1", "\"format_version\": 9", 1);
    assert!(matches!(FitResult::from_json(&bumped), Err(Error::Format(_))));
}

#[test]
fn settings_round_trip_and_validate() {
    let settings = FitSettings::default();
    let text = settings.to_json().unwrap();
    assert_eq!(FitSettings::from_json(&text).unwrap(), settings);
    assert_eq!(settings.hash().unwrap(), FitSettings::from_json(&text).unwrap().hash().unwrap());

    let partial = FitSettings::from_json(r#"{"format_version": 1, "fit": {"model_iterations": 7}}"#).unwrap();
    assert_eq!(partial.fit.model_iterations, 7);
    assert_eq!(partial.weights, EnergyWeights::default());

    for bad in [
        r#"{"format_version": 2}"#,
        r#"{"format_version": 1, "fit": {"c1": 0.95}}"#,
        r#"{"format_version": 1, "weights": {"shape": -1.0}}"#,
        r#"{"format_version": 1, "fit": {"unknown": 1}}"#,
    ] {
        assert!(matches!(FitSettings::from_json(bad), Err(Error::Config(_))), "{bad}");
    }
}

#[test]
fn observations_for_another_model_are_refused() {
    let mut seq = sequence(10, 2, 1);
    seq.observations.model_hash = Some("0".repeat(64));
    let err = fit_sequence(desk(), &seq.observations, Some(&seq.rig), &Priors::default(), &EnergyWeights::default(), &FitConfig::default(), None);
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn low_confidence_frames_are_skipped() {
    let mut seq = sequence(11, 4, 2);
    for view in &mut seq.observations.frames[2] {
        for l in view {
            l.sigma = 40.0;
        }
    }
    let result = fit(&seq, &FitConfig { model_iterations: 20, ..FitConfig::default() });
    assert_eq!(result.skipped_frames, vec![2]);
}

#[test]
fn frames_without_landmarks_borrow_a_neighbouring_placement() {
    let mut seq = sequence(12, 4, 2);
    for view in &mut seq.observations.frames[0] {
        view.clear();
    }
    let cfg = FitConfig { global_iterations: 0, model_iterations: 0, camera_iterations: 0, ..FitConfig::default() };
    let result = fit(&seq, &cfg);
    assert_eq!(result.init_failures.len(), 1);
    assert_eq!(result.init_failures[0].0, 0);
    assert_eq!(result.params.frames[0].translation, result.params.frames[1].translation);
    assert_eq!(result.params.frames[0].pose[0], result.params.frames[1].pose[0]);
}

#[test]
fn missing_rig_uses_default_camera_or_calibrates() {
    let model = desk();
    let single = sequence(13, 3, 1);
    let result = fit_sequence(model, &single.observations, None, &Priors::default(), &EnergyWeights::default(), &FitConfig { model_iterations: 10, ..FitConfig::default() }, None).unwrap();
    assert!(result.rig.calibrated);
    assert_eq!(result.rig.cameras[0].intrinsics.cx, 256.0);

    let multi = sequence(13, 3, 3);
    let result = fit_sequence(model, &multi.observations, None, &Priors::default(), &EnergyWeights::default(), &FitConfig { model_iterations: 10, ..FitConfig::default() }, None).unwrap();
    assert!(!result.rig.calibrated);
    assert_eq!(result.rig.len(), 3);
    assert!(result.stages.iter().all(|s| s.termination != Termination::NoFreeParameters));
}
