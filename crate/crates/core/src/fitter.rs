//! The staged fitting pipeline: PnP placement, global refinement, joint model
//! fit and optional camera refinement.

use std::io::Write;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{calibrate_rig_from_head, pnp_estimate, pnp_ransac, Intrinsics, Pose, RansacConfig, Rig, MIN_PNP_POINTS};
use crate::energies::{total_objective, EnergyWeights, Priors, Problem, StageMask, State};
use crate::error::{Error, Result};
use crate::model::{regress_joints, FrameParams, ModelDefinition, Parameters};
use crate::observations::ObservationSet;
use crate::priors::GmmPrior;
use crate::optim::{lbfgs_minimize, LbfgsConfig, Termination};
use crate::rotation::{axis_angle_to_matrix, matrix_to_axis_angle};

pub const SETTINGS_FORMAT_VERSION: u32 = 1;
pub const RESULT_FORMAT_VERSION: u32 = 1;

/// Image size the confidence threshold is expressed for.
const REFERENCE_IMAGE_SIZE: f64 = 512.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub global_iterations: usize,
    pub model_iterations: usize,
    pub camera_iterations: usize,
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
    pub gradient_tolerance: f64,
    pub relative_decrease_tolerance: f64,
    pub refine_cameras: bool,
    pub refine_focal: bool,
    pub use_external_init: bool,
    /// Also free the shape coefficients during camera refinement.
    pub refine_shape_with_cameras: bool,
    /// Frames whose median landmark sigma exceeds this (pixels on a 512-pixel
    /// image, scaled with the image size) are left out of the data term.
    pub confidence_threshold_px: f64,
    /// Restricts the temporal term to these vertices.
    pub temporal_vertices: Option<Vec<usize>>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            global_iterations: 30,
            model_iterations: 200,
            camera_iterations: 50,
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            gradient_tolerance: 1e-6,
            relative_decrease_tolerance: 1e-12,
            refine_cameras: true,
            refine_focal: true,
            use_external_init: true,
            refine_shape_with_cameras: false,
            confidence_threshold_px: 25.0,
            temporal_vertices: None,
        }
    }
}

impl FitConfig {
    pub fn optimizer(&self, max_iterations: usize) -> LbfgsConfig {
        LbfgsConfig {
            max_iterations,
            memory: self.memory,
            c1: self.c1,
            c2: self.c2,
            gradient_tolerance: self.gradient_tolerance,
            relative_decrease_tolerance: self.relative_decrease_tolerance,
            ..LbfgsConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer(0).validate()?;
        if !(self.confidence_threshold_px > 0.0) {
            return Err(Error::Config("confidence_threshold_px must be positive".into()));
        }
        Ok(())
    }
}

/// Versioned settings file: energy weights plus fitting configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSettings {
    pub format_version: u32,
    #[serde(default)]
    pub weights: EnergyWeights,
    #[serde(default)]
    pub fit: FitConfig,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            format_version: SETTINGS_FORMAT_VERSION,
            weights: EnergyWeights::default(),
            fit: FitConfig::default(),
        }
    }
}

impl FitSettings {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != SETTINGS_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported settings format_version {}",
                self.format_version
            )));
        }
        self.weights.validate()?;
        self.fit.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let settings: FitSettings =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("settings file: {e}")))?;
        settings.validate()?;
        Ok(settings)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// SHA-256 of the compact serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

/// Per-view parameter estimates from an external regressor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExternalInit {
    /// One entry per camera; `None` where the view has no estimate.
    pub views: Vec<Option<Parameters>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Global,
    Model,
    Cameras,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    /// Objective at the start and after every accepted step. The global stage
    /// solves frames independently and reports the per-step sum.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Per-frame terminations of the global stage.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frame_terminations: Vec<Termination>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: Parameters,
    pub rig: Rig,
    pub stages: Vec<StageReport>,
    /// Frames whose PnP initialization failed, with the reason.
    pub init_failures: Vec<(usize, String)>,
    /// Frames left out of the data term for low confidence.
    pub skipped_frames: Vec<usize>,
    /// Camera chosen for external initialization.
    pub external_view: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameRecord {
    frame: usize,
    pose: Vec<[f64; 3]>,
    translation: [f64; 3],
    expression: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResultFile {
    format_version: u32,
    model_hash: String,
    config_hash: String,
    body_shape: Vec<f64>,
    face_shape: Vec<f64>,
    hand_shape: Vec<f64>,
    frames: Vec<FrameRecord>,
    rig: serde_json::Value,
    stages: Vec<StageReport>,
    init_failures: Vec<(usize, String)>,
    skipped_frames: Vec<usize>,
    external_view: Option<usize>,
}

impl FitResult {
    pub fn to_json(&self, model_hash: &str, config_hash: &str) -> Result<String> {
        let file = ResultFile {
            format_version: RESULT_FORMAT_VERSION,
            model_hash: model_hash.into(),
            config_hash: config_hash.into(),
            body_shape: self.params.body_shape.clone(),
            face_shape: self.params.face_shape.clone(),
            hand_shape: self.params.hand_shape.clone(),
            frames: self
                .params
                .frames
                .iter()
                .enumerate()
                .map(|(frame, f)| FrameRecord {
                    frame,
                    pose: f.pose.clone(),
                    translation: f.translation,
                    expression: f.expression.clone(),
                })
                .collect(),
            rig: serde_json::from_str(&self.rig.to_json()?)?,
            stages: self.stages.clone(),
            init_failures: self.init_failures.clone(),
            skipped_frames: self.skipped_frames.clone(),
            external_view: self.external_view,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Parses a result file, returning the result and its model hash.
    pub fn from_json(text: &str) -> Result<(Self, String)> {
        let file: ResultFile = serde_json::from_str(text)?;
        if file.format_version != RESULT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported result format_version {}",
                file.format_version
            )));
        }
        if file.frames.iter().enumerate().any(|(i, f)| f.frame != i) {
            return Err(Error::Format("result frames must be listed in order".into()));
        }
        let params = Parameters {
            body_shape: file.body_shape,
            face_shape: file.face_shape,
            hand_shape: file.hand_shape,
            frames: file
                .frames
                .into_iter()
                .map(|f| FrameParams {
                    expression: f.expression,
                    pose: f.pose,
                    translation: f.translation,
                })
                .collect(),
        };
        let rig = Rig::from_json(&serde_json::to_string(&file.rig)?)?;
        Ok((
            FitResult {
                params,
                rig,
                stages: file.stages,
                init_failures: file.init_failures,
                skipped_frames: file.skipped_frames,
                external_view: file.external_view,
            },
            file.model_hash,
        ))
    }
}

/// Writes a mesh as Wavefront OBJ.
pub fn write_obj(model: &ModelDefinition, vertices: &[Vector3<f64>], mut out: impl Write) -> Result<()> {
    for v in vertices {
        writeln!(out, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for [a, b, c] in &model.faces {
        writeln!(out, "f {} {} {}", a + 1, b + 1, c + 1)?;
    }
    Ok(())
}

/// Enabled cameras seeing at least six landmarks in `frame`, most confident
/// first: lowest mean sigma, then more landmarks, then lower index.
fn pnp_cameras(obs: &ObservationSet, rig: &Rig, frame: usize) -> Vec<usize> {
    let mut ranked: Vec<(usize, f64, usize)> = (0..obs.num_cameras())
        .filter_map(|c| {
            let view = obs.view(frame, c);
            (rig.is_enabled(c) && view.len() >= MIN_PNP_POINTS)
                .then(|| (c, view.iter().map(|l| l.sigma).sum::<f64>() / view.len() as f64, view.len()))
        })
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(b.2.cmp(&a.2)).then(a.0.cmp(&b.0)));
    ranked.into_iter().map(|(c, _, _)| c).collect()
}

/// Median sigma-normalized reprojection error of a world-space placement of
/// the rest-root landmarks over every enabled camera; landmarks behind a
/// camera count as infinitely far.
fn placement_score(
    obs: &ObservationSet,
    rig: &Rig,
    frame: usize,
    points: &[Option<Vector3<f64>>],
    rot: &nalgebra::Matrix3<f64>,
    shift: &Vector3<f64>,
) -> f64 {
    let mut residuals = Vec::new();
    for c in (0..obs.num_cameras()).filter(|&c| rig.is_enabled(c)) {
        let cam = &rig.cameras[c];
        for l in obs.view(frame, c) {
            let Some(p) = points.get(l.id).copied().flatten() else { continue };
            let pc = cam.to_camera(&(rot * p + shift));
            if !(pc.z > 0.0) {
                residuals.push(f64::INFINITY);
                continue;
            }
            let uv = cam.intrinsics.project_with_jacobian(&pc).0;
            residuals.push((uv - Vector2::new(l.x, l.y)).norm() / l.sigma);
        }
    }
    if residuals.is_empty() {
        return f64::INFINITY;
    }
    residuals.sort_by(f64::total_cmp);
    residuals[residuals.len() / 2]
}

/// Root rotation (axis-angle) and translation placing the body of `frame` so
/// its landmarks match the observations.
///
/// The 3D points are the model landmarks at the current shape, expression and
/// non-root pose with the root at rest. Each eligible camera proposes a
/// placement by PnP, discarded if it puts any of its landmarks behind that
/// camera; the one with the lowest median reprojection error over all cameras
/// wins, ties going to the most confident camera.
pub fn init_global_pnp(
    model: &ModelDefinition,
    obs: &ObservationSet,
    rig: &Rig,
    params: &Parameters,
    frame: usize,
) -> Result<(Vector3<f64>, Vector3<f64>)> {
    if frame >= params.num_frames() || frame >= obs.num_frames() {
        return Err(Error::Shape(format!("frame {frame} out of range")));
    }
    let cameras = pnp_cameras(obs, rig, frame);
    if cameras.is_empty() {
        return Err(Error::InitFailure(format!(
            "frame {frame}: no camera observes at least {MIN_PNP_POINTS} landmarks"
        )));
    }
    let root = model.topo_order[0];
    let mut rest_frame = params.clone();
    rest_frame.frames = vec![params.frames[frame].clone()];
    rest_frame.frames[0].pose[root] = [0.0; 3];
    rest_frame.frames[0].translation = [0.0; 3];
    let mesh = crate::model::evaluate_mesh(model, &rest_frame, 0)?;
    let points: Vec<Option<Vector3<f64>>> = (0..model.num_landmarks())
        .map(|id| model.landmark(id).map(|(_, anchor)| model.anchor_point(anchor, &mesh)))
        .collect();

    let mut best: Option<(f64, nalgebra::Matrix3<f64>, Vector3<f64>)> = None;
    let mut last_error = None;
    for camera in cameras {
        let view = obs.view(frame, camera);
        let mut p3 = Vec::with_capacity(view.len());
        let mut p2 = Vec::with_capacity(view.len());
        for l in view {
            let p = points
                .get(l.id)
                .copied()
                .flatten()
                .ok_or_else(|| Error::Format(format!("landmark id {} out of range", l.id)))?;
            p3.push(p);
            p2.push(Vector2::new(l.x, l.y));
        }
        let intr: &Intrinsics = &rig.cameras[camera].intrinsics;
        let ransac = RansacConfig {
            seed: frame as u64,
            ..RansacConfig::default()
        };
        let placed: Pose = match pnp_ransac(&p3, &p2, intr, &ransac).map(|r| r.pose) {
            Ok(pose) => pose,
            Err(_) => match pnp_estimate(&p3, &p2, intr) {
                Ok(pose) => pose,
                Err(e) => {
                    last_error = Some(e.to_string());
                    continue;
                }
            },
        };
        if p3.iter().any(|p| !(placed.apply(p).z > 0.0)) {
            last_error = Some(format!("camera {camera} PnP placed landmarks behind it"));
            continue;
        }
        let cam = &rig.cameras[camera].pose;
        let rot = cam.rotation.transpose() * placed.rotation;
        let shift = cam.rotation.transpose() * (placed.translation - cam.translation);
        let score = placement_score(obs, rig, frame, &points, &rot, &shift);
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, rot, shift));
        }
    }
    let Some((_, rot, shift)) = best else {
        let reason = last_error.unwrap_or_else(|| "PnP failed".into());
        return Err(Error::InitFailure(format!("frame {frame}: {reason}")));
    };
    let joint = regress_joints(model, params)?[root];
    let translation = shift + rot * joint - joint;
    Ok((matrix_to_axis_angle(&rot)?, translation))
}

/// Median sigma per frame over all views; `None` for frames without observations.
fn frame_confidence(obs: &ObservationSet) -> Vec<Option<f64>> {
    obs.frames
        .iter()
        .map(|views| {
            let mut s: Vec<f64> = views.iter().flatten().map(|l| l.sigma).collect();
            if s.is_empty() {
                return None;
            }
            s.sort_by(f64::total_cmp);
            let n = s.len();
            Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
        })
        .collect()
}

/// Lowest mean sigma over all of a view's observations; ties go to the first camera.
fn external_view(obs: &ObservationSet, init: &ExternalInit) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (c, p) in init.views.iter().enumerate() {
        if p.is_none() {
            continue;
        }
        let (sum, count) = obs
            .frames
            .iter()
            .flat_map(|views| views.get(c).into_iter().flatten())
            .fold((0.0, 0usize), |(s, n), l| (s + l.sigma, n + 1));
        let mean = if count == 0 { f64::INFINITY } else { sum / count as f64 };
        if best.is_none_or(|(_, m)| mean < m) {
            best = Some((c, mean));
        }
    }
    best.map(|(c, _)| c)
}

fn run_stage(
    problem: &Problem<'_>,
    state: &mut State,
    mask: &StageMask,
    optimizer: &LbfgsConfig,
) -> Result<crate::optim::LbfgsResult> {
    let model = problem.model;
    let enabled = problem.enabled.clone();
    let x0 = mask.pack(model, state, &enabled);
    let template = state.clone();
    let mut objective = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut probe = template.clone();
        mask.unpack(model, x, &mut probe, &enabled);
        let eval = total_objective(problem, &probe, mask)?;
        Ok((eval.value, mask.pack(model, &eval.gradient, &enabled)))
    };
    let result = lbfgs_minimize(&mut objective, &x0, optimizer)?;
    mask.unpack(model, &result.x, state, &enabled);
    Ok(result)
}

fn report(stage: Stage, r: &crate::optim::LbfgsResult) -> StageReport {
    StageReport {
        stage,
        trace: r.trace.clone(),
        iterations: r.iterations,
        evaluations: r.evaluations,
        termination: r.termination,
        frame_terminations: Vec::new(),
    }
}

/// Rig to fit with: the given one, calibrated from the head when it has
/// several uncalibrated cameras, or a default single camera.
fn prepare_rig(
    model: &ModelDefinition,
    obs: &ObservationSet,
    rig: Option<&Rig>,
    params: &Parameters,
) -> Result<Rig> {
    let rig = match rig {
        Some(r) => r.clone(),
        None => {
            let cams = obs
                .image_sizes
                .iter()
                .map(|&(w, h)| crate::camera::Camera {
                    intrinsics: Intrinsics::default_for(w, h),
                    pose: Pose::identity(),
                })
                .collect();
            Rig::new(cams, obs.num_cameras() == 1)
        }
    };
    rig.validate()?;
    if rig.len() != obs.num_cameras() {
        return Err(Error::Shape(format!(
            "rig has {} cameras, observations have {}",
            rig.len(),
            obs.num_cameras()
        )));
    }
    if rig.len() > 1 && !rig.calibrated {
        let intrinsics: Vec<Intrinsics> = rig.cameras.iter().map(|c| c.intrinsics).collect();
        return Ok(calibrate_rig_from_head(obs, model, &params.face_shape, &intrinsics)?.rig);
    }
    Ok(rig)
}

/// Fits the model to a whole sequence of observations.
pub fn fit_sequence(
    model: &ModelDefinition,
    obs: &ObservationSet,
    rig: Option<&Rig>,
    priors: &Priors,
    weights: &EnergyWeights,
    config: &FitConfig,
    external: Option<&ExternalInit>,
) -> Result<FitResult> {
    config.validate()?;
    weights.validate()?;
    let frames = obs.num_frames();
    if frames == 0 {
        return Err(Error::InsufficientData("no frames to fit".into()));
    }
    obs.validate(model.num_landmarks())?;
    if let Some(hash) = &obs.model_hash {
        if hash != model.hash() {
            return Err(Error::Config("observations were produced for a different model".into()));
        }
    }

    let mut params = Parameters::zeros(model, frames);
    let mut chosen_view = None;
    if let (Some(init), true) = (external, config.use_external_init) {
        if init.views.len() != obs.num_cameras() {
            return Err(Error::Shape("external init needs one entry per camera".into()));
        }
        if let Some(view) = external_view(obs, init) {
            let seed = init.views[view].as_ref().expect("chosen view has an estimate");
            seed.validate(model)?;
            if seed.num_frames() != frames {
                return Err(Error::Shape("external init frame count differs from the observations".into()));
            }
            let root = model.topo_order[0];
            params.body_shape.clone_from(&seed.body_shape);
            params.face_shape.clone_from(&seed.face_shape);
            params.hand_shape.clone_from(&seed.hand_shape);
            for (dst, src) in params.frames.iter_mut().zip(&seed.frames) {
                dst.expression.clone_from(&src.expression);
                for (j, rot) in src.pose.iter().enumerate() {
                    if j != root {
                        dst.pose[j] = *rot;
                    }
                }
            }
            chosen_view = Some(view);
        }
    }

    let rig = prepare_rig(model, obs, rig, &params)?;

    // Placement of every frame, falling back to the nearest earlier success.
    let root = model.topo_order[0];
    let placements = crate::par::map_range(frames, |f| init_global_pnp(model, obs, &rig, &params, f));
    let mut init_failures = Vec::new();
    let mut last_ok: Option<(Vector3<f64>, Vector3<f64>)> = None;
    let mut pending = Vec::new();
    for (f, placement) in placements.into_iter().enumerate() {
        match placement {
            Ok(p) => {
                for g in pending.drain(..) {
                    set_root(&mut params, g, root, &p);
                }
                set_root(&mut params, f, root, &p);
                last_ok = Some(p);
            }
            Err(e) => {
                init_failures.push((f, e.to_string()));
                match &last_ok {
                    Some(p) => set_root(&mut params, f, root, p),
                    None => pending.push(f),
                }
            }
        }
    }

    // Stage 1: per-frame global placement against the landmarks alone.
    let stage1_weights = EnergyWeights {
        landmarks: weights.landmarks,
        ..EnergyWeights::landmarks_only()
    };
    let no_priors = Priors::default();
    let optimizer = config.optimizer(config.global_iterations);
    let solved = crate::par::map_range(frames, |f| -> Result<(FrameParams, crate::optim::LbfgsResult)> {
        let sub_obs = ObservationSet {
            image_sizes: obs.image_sizes.clone(),
            frames: vec![obs.frames[f].clone()],
            model_hash: None,
        };
        let mut sub_params = params.clone();
        sub_params.frames = vec![params.frames[f].clone()];
        let problem = Problem::new(model, &sub_obs, &rig, &no_priors, stage1_weights.clone())?;
        let mut state = State::new(sub_params, &rig)?;
        let result = run_stage(&problem, &mut state, &StageMask::global(), &optimizer)?;
        Ok((state.params.frames.remove(0), result))
    });
    let mut stage1 = StageReport {
        stage: Stage::Global,
        trace: Vec::new(),
        iterations: 0,
        evaluations: 0,
        termination: Termination::GradientTolerance,
        frame_terminations: Vec::new(),
    };
    let mut traces = Vec::with_capacity(frames);
    for (f, solved) in solved.into_iter().enumerate() {
        let (mut frame, result) = solved?;
        // Keep the root rotation angle within pi; the fit may have wound past it.
        let rot = Vector3::from(frame.pose[root]);
        let wrapped = matrix_to_axis_angle(&axis_angle_to_matrix(&rot))?;
        frame.pose[root] = [wrapped.x, wrapped.y, wrapped.z];
        params.frames[f] = frame;
        stage1.iterations = stage1.iterations.max(result.iterations);
        stage1.evaluations += result.evaluations;
        stage1.frame_terminations.push(result.termination);
        traces.push(result.trace);
    }
    let longest = traces.iter().map(Vec::len).max().unwrap_or(0);
    stage1.trace = (0..longest)
        .map(|i| traces.iter().map(|t| t[i.min(t.len() - 1)]).sum())
        .collect();
    stage1.termination = stage1
        .frame_terminations
        .iter()
        .copied()
        .find(|t| *t == Termination::LineSearchFailure)
        .or_else(|| stage1.frame_terminations.iter().copied().find(|t| *t == Termination::IterationCap))
        .unwrap_or(Termination::GradientTolerance);
    if stage1.frame_terminations.iter().all(|t| *t == Termination::RelativeDecrease) {
        stage1.termination = Termination::RelativeDecrease;
    }

    // Stage 2: the whole sequence jointly, cameras fixed.
    let (w_img, h_img) = obs.image_sizes.iter().fold((0u32, 0u32), |(a, b), &(w, h)| (a.max(w), b.max(h)));
    let threshold = config.confidence_threshold_px * f64::from(w_img.max(h_img)) / REFERENCE_IMAGE_SIZE;
    let confidence = frame_confidence(obs);
    let skipped_frames: Vec<usize> = (0..frames)
        .filter(|&f| confidence[f].is_some_and(|s| s > threshold))
        .collect();
    let stage2_weights = EnergyWeights {
        camera: 0.0,
        ..weights.clone()
    };
    // Shape coefficients without a learned prior are held to a standard normal.
    let priors = Priors {
        body_shape: priors.body_shape.clone().or_else(|| Some(GmmPrior::standard(model.dims.body_shape))),
        face_shape: priors.face_shape.clone().or_else(|| Some(GmmPrior::standard(model.dims.face_shape))),
        ..priors.clone()
    };
    let mut problem = Problem::new(model, obs, &rig, &priors, stage2_weights)?;
    problem.temporal_vertices.clone_from(&config.temporal_vertices);
    for &f in &skipped_frames {
        problem.landmark_frames[f] = false;
    }
    let mut state = State::new(params, &rig)?;
    let r2 = run_stage(&problem, &mut state, &StageMask::model(), &config.optimizer(config.model_iterations))?;
    let mut stages = vec![stage1, report(Stage::Model, &r2)];

    // Stage 3: camera refinement, the only stage with the camera term.
    let multi_view = rig.len() > 1;
    let mask = StageMask {
        extrinsics: multi_view && config.refine_cameras,
        focal: !multi_view && config.refine_focal,
        body_shape: config.refine_shape_with_cameras,
        face_shape: config.refine_shape_with_cameras,
        hand_shape: config.refine_shape_with_cameras,
        ..StageMask::default()
    };
    let mut final_rig = rig.clone();
    if mask.extrinsics || mask.focal {
        problem.weights = weights.clone();
        let r3 = run_stage(&problem, &mut state, &mask, &config.optimizer(config.camera_iterations))?;
        stages.push(report(Stage::Cameras, &r3));
        let refined = state.rig(&rig);
        for (c, (cam, new)) in final_rig.cameras.iter_mut().zip(refined.cameras).enumerate() {
            if !rig.is_enabled(c) || state.cameras[c] == problem.camera_init[c] {
                continue;
            }
            if mask.extrinsics {
                cam.pose = new.pose;
            }
            if mask.focal {
                cam.intrinsics = new.intrinsics;
            }
        }
    }

    Ok(FitResult {
        params: state.params,
        rig: final_rig,
        stages,
        init_failures,
        skipped_frames,
        external_view: chosen_view,
    })
}

fn set_root(params: &mut Parameters, frame: usize, root: usize, placement: &(Vector3<f64>, Vector3<f64>)) {
    let (rot, trans) = placement;
    params.frames[frame].pose[root] = [rot.x, rot.y, rot.z];
    params.frames[frame].translation = [trans.x, trans.y, trans.z];
}

/// Vertices of every frame of a fitted sequence.
pub fn fitted_meshes(model: &ModelDefinition, params: &Parameters) -> Result<Vec<Vec<Vector3<f64>>>> {
    crate::par::map_range(params.num_frames(), |f| crate::model::evaluate_mesh(model, params, f))
        .into_iter()
        .collect()
}
