//! Seeded synthetic sequences with known ground truth.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Intrinsics, Rig};
use crate::error::{Error, Result};
use crate::model::{evaluate_mesh, ModelDefinition, Parameters};
use crate::observations::{Landmark2d, ObservationSet};
use crate::priors::GmmPrior;

/// Smallest reported sigma in pixels.
pub const SIGMA_FLOOR: f64 = 0.5;
pub const GROUND_TRUTH_FORMAT_VERSION: u32 = 1;

/// Stationary standard deviations of the damped random walk per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    /// Non-root joint rotations, radians per axis.
    pub joint: f64,
    /// Root rotation, radians per axis.
    pub root: f64,
    /// Root translation, meters per axis.
    pub translation: f64,
    /// Expression coefficients (kept inside [0, 1]).
    pub expression: f64,
    /// Per-frame pull towards the rest value, in (0, 1].
    pub reversion: f64,
    /// Per-frame velocity carry-over in [0, 1); larger is smoother.
    pub persistence: f64,
    /// Hard bound on joint rotation components, radians.
    pub joint_limit: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            joint: 0.25,
            root: 0.15,
            translation: 0.1,
            expression: 0.25,
            reversion: 0.05,
            persistence: 0.8,
            joint_limit: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ShapeSource {
    /// Draw from a standard-normal GMM scaled by `scale`.
    Prior { scale: f64 },
    Fixed {
        body_shape: Vec<f64>,
        face_shape: Vec<f64>,
        hand_shape: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub frames: usize,
    pub cameras: usize,
    pub ring_radius: f64,
    pub height_jitter: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub noise_px: f64,
    pub occlusion_fraction: f64,
    /// Noise multiplier for occluded landmarks.
    pub occlusion_factor: f64,
    /// Whether occluded landmarks report their inflated sigma.
    pub inflate_occluded_sigma: bool,
    pub motion: MotionConfig,
    pub shape: ShapeSource,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            frames: 30,
            cameras: 4,
            ring_radius: 2.5,
            height_jitter: 0.1,
            image_width: 512,
            image_height: 512,
            noise_px: 1.0,
            occlusion_fraction: 0.1,
            occlusion_factor: 5.0,
            inflate_occluded_sigma: true,
            motion: MotionConfig::default(),
            shape: ShapeSource::Prior { scale: 1.0 },
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.frames == 0 || self.cameras == 0 {
            return bad("need at least one frame and one camera");
        }
        if !(self.noise_px >= 0.0 && self.noise_px.is_finite()) {
            return bad("noise_px must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.occlusion_fraction) {
            return bad("occlusion_fraction must lie in [0, 1]");
        }
        if !(self.occlusion_factor >= 1.0) {
            return bad("occlusion_factor must be >= 1");
        }
        if !(self.ring_radius > 0.0) || !(self.height_jitter >= 0.0) {
            return bad("ring_radius must be positive and height_jitter nonnegative");
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image size must be positive");
        }
        let m = &self.motion;
        if [m.joint, m.root, m.translation, m.expression, m.joint_limit].iter().any(|v| !(*v >= 0.0))
            || !(m.reversion > 0.0 && m.reversion <= 1.0)
            || !(0.0..1.0).contains(&m.persistence)
        {
            return bad("motion amplitudes must be >= 0, reversion in (0, 1] and persistence in [0, 1)");
        }
        if let ShapeSource::Prior { scale } = self.shape {
            if !(scale >= 0.0) {
                return bad("shape scale must be >= 0");
            }
        }
        Ok(())
    }
}

/// A synthetic sequence and everything needed to score a fit of it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub params: Parameters,
    pub rig: Rig,
    pub observations: ObservationSet,
}

/// Mean-reverting walk driven by a persistent velocity, so consecutive
/// frames move smoothly. Stationary deviation is `amplitude`.
struct Walk {
    keep: f64,
    persistence: f64,
    velocity_step: f64,
    velocity_scale: f64,
}

impl Walk {
    fn new(amplitude: f64, reversion: f64, persistence: f64) -> Self {
        let keep = 1.0 - reversion;
        let kp = keep * persistence;
        let velocity_scale = amplitude * ((1.0 - keep * keep) * (1.0 - kp) / (1.0 + kp)).sqrt();
        Walk {
            keep,
            persistence,
            velocity_step: velocity_scale * (1.0 - persistence * persistence).sqrt(),
            velocity_scale,
        }
    }

    fn start(&self, amplitude: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let x: f64 = rng.sample(StandardNormal);
        let v: f64 = rng.sample(StandardNormal);
        (amplitude * x, self.velocity_scale * v)
    }

    fn next(&self, (x, v): (f64, f64), rng: &mut ChaCha8Rng) -> (f64, f64) {
        let noise: f64 = rng.sample(StandardNormal);
        let v = self.persistence * v + self.velocity_step * noise;
        (self.keep * x + v, v)
    }
}

fn sample_shape(dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if dim == 0 {
        return Ok(Vec::new());
    }
    let draw = GmmPrior::standard(dim).sample(rng);
    Ok(draw.iter().map(|v| v * scale).collect())
}

fn animate(model: &ModelDefinition, config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Parameters> {
    let m = &config.motion;
    let mut params = Parameters::zeros(model, config.frames);
    match &config.shape {
        ShapeSource::Prior { scale } => {
            params.body_shape = sample_shape(model.dims.body_shape, *scale, rng)?;
            params.face_shape = sample_shape(model.dims.face_shape, *scale, rng)?;
            params.hand_shape = sample_shape(model.dims.hand_shape, *scale, rng)?;
        }
        ShapeSource::Fixed {
            body_shape,
            face_shape,
            hand_shape,
        } => {
            params.body_shape.clone_from(body_shape);
            params.face_shape.clone_from(face_shape);
            params.hand_shape.clone_from(hand_shape);
        }
    }
    params.validate(model)?;

    let root = model.topo_order[0];
    let joints = model.num_joints();
    let expr = model.dims.expression;
    // One walker per scalar: joint rotations, translation, expression.
    let amplitude: Vec<f64> = (0..joints)
        .flat_map(|j| [if j == root { m.root } else { m.joint }; 3])
        .chain([m.translation; 3])
        .chain(std::iter::repeat_n(m.expression, expr))
        .collect();
    let walks: Vec<Walk> = amplitude.iter().map(|&a| Walk::new(a, m.reversion, m.persistence)).collect();
    let mut state: Vec<(f64, f64)> = walks.iter().zip(&amplitude).map(|(w, &a)| w.start(a, rng)).collect();
    let expression_center = 0.3;
    for f in 0..config.frames {
        if f > 0 {
            for (x, w) in state.iter_mut().zip(&walks) {
                *x = w.next(*x, rng);
            }
        }
        let frame = &mut params.frames[f];
        for j in 0..joints {
            let limit = if j == root { std::f64::consts::FRAC_PI_2 } else { m.joint_limit };
            for k in 0..3 {
                frame.pose[j][k] = state[3 * j + k].0.clamp(-limit, limit);
            }
        }
        for k in 0..3 {
            frame.translation[k] = state[3 * joints + k].0;
        }
        for i in 0..expr {
            frame.expression[i] = (expression_center + state[3 * joints + 3 + i].0).clamp(0.0, 1.0);
        }
    }
    Ok(params)
}

fn ring(model: &ModelDefinition, config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Rig> {
    let center = model.template.iter().sum::<Vector3<f64>>() / model.num_vertices() as f64;
    let intrinsics = Intrinsics::default_for(config.image_width, config.image_height);
    let cameras = (0..config.cameras)
        .map(|c| {
            let angle = c as f64 * std::f64::consts::TAU / config.cameras as f64;
            let lift = if config.height_jitter > 0.0 {
                rng.random_range(-config.height_jitter..=config.height_jitter)
            } else {
                0.0
            };
            let eye = center
                + Vector3::new(config.ring_radius * angle.sin(), lift, config.ring_radius * angle.cos());
            Camera::look_at(intrinsics, eye, center, Vector3::y())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Rig::new(cameras, true))
}

/// Ground-truth parameters alone, drawn exactly as [`generate_sequence`] draws them.
pub fn sample_motion(model: &ModelDefinition, config: &SynthConfig) -> Result<Parameters> {
    config.validate()?;
    animate(model, config, &mut ChaCha8Rng::seed_from_u64(config.seed))
}

/// Ground truth, a camera ring and noisy landmark observations.
pub fn generate_sequence(model: &ModelDefinition, config: &SynthConfig) -> Result<Sequence> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = animate(model, config, &mut rng)?;
    let rig = ring(model, config, &mut rng)?;
    let noise_seed: u64 = rng.random();

    let sizes = vec![(config.image_width, config.image_height); config.cameras];
    let frames = crate::par::map_range(config.frames, |f| -> Result<Vec<Vec<Landmark2d>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        rng.set_stream(f as u64);
        let verts = evaluate_mesh(model, &params, f)?;
        let points: Vec<Vector3<f64>> = (0..model.num_landmarks())
            .map(|id| {
                let (_, anchor) = model.landmark(id).expect("id below the landmark count");
                model.anchor_point(anchor, &verts)
            })
            .collect();
        rig.cameras
            .iter()
            .enumerate()
            .map(|(c, cam)| {
                let mut inside = 0;
                let mut view = Vec::with_capacity(points.len());
                for (id, p) in points.iter().enumerate() {
                    let pc = cam.to_camera(p);
                    if !(pc.z > 0.0) {
                        return Err(Error::Config(format!(
                            "camera {c} does not see the body in frame {f}: landmark {id} is behind it"
                        )));
                    }
                    let (uv, _) = cam.intrinsics.project_with_jacobian(&pc);
                    if uv.x >= 0.0
                        && uv.y >= 0.0
                        && uv.x < f64::from(config.image_width)
                        && uv.y < f64::from(config.image_height)
                    {
                        inside += 1;
                    }
                    let occluded = config.occlusion_fraction > 0.0 && rng.random_bool(config.occlusion_fraction);
                    let factor = if occluded { config.occlusion_factor } else { 1.0 };
                    let noise = config.noise_px * factor;
                    let (dx, dy): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                    let reported = config.noise_px.max(SIGMA_FLOOR)
                        * if occluded && config.inflate_occluded_sigma { factor } else { 1.0 };
                    view.push(Landmark2d {
                        id,
                        x: uv.x + noise * dx,
                        y: uv.y + noise * dy,
                        sigma: reported,
                    });
                }
                if 2 * inside < points.len() {
                    return Err(Error::Config(format!(
                        "camera {c} sees fewer than half of the landmarks in frame {f}"
                    )));
                }
                Ok(view)
            })
            .collect()
    });
    let mut observations = ObservationSet::empty(config.frames, sizes);
    for (f, views) in frames.into_iter().enumerate() {
        observations.frames[f] = views?;
    }
    observations.model_hash = Some(model.hash().to_string());
    Ok(Sequence {
        params,
        rig,
        observations,
    })
}

/// Removes a seeded random subset of landmark records.
pub fn corrupt_observations(obs: &ObservationSet, seed: u64, drop_fraction: f64) -> Result<ObservationSet> {
    if !(0.0..=1.0).contains(&drop_fraction) {
        return Err(Error::Config("drop_fraction must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = obs.clone();
    for view in out.frames.iter_mut().flatten() {
        view.retain(|_| !rng.random_bool(drop_fraction));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroundTruthFile {
    format_version: u32,
    model_hash: String,
    params: Parameters,
}

/// Writes ground-truth parameters tagged with the model hash.
pub fn save_ground_truth(path: impl AsRef<Path>, params: &Parameters, model_hash: &str) -> Result<()> {
    let file = GroundTruthFile {
        format_version: GROUND_TRUTH_FORMAT_VERSION,
        model_hash: model_hash.into(),
        params: params.clone(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Reads ground-truth parameters and their model hash.
pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<(Parameters, String)> {
    let file: GroundTruthFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if file.format_version != GROUND_TRUTH_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported ground-truth format_version {}",
            file.format_version
        )));
    }
    Ok((file.params, file.model_hash))
}
