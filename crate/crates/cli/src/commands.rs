use std::path::Path;

use bodyfit::camera::{calibrate_rig_from_head, Intrinsics};
use bodyfit::fitter::{fit_sequence, fitted_meshes, write_obj, FitResult, FitSettings};
use bodyfit::metrics::{evaluate_sequence, view_count_sweep};
use bodyfit::model::{build_model, normalize_pose_group, ModelConfig};
use bodyfit::priors::{FlowConfig, GmmPrior, PosePrior};
use bodyfit::synth::{
    corrupt_observations, generate_sequence, load_ground_truth, sample_motion, save_ground_truth, SynthConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::args::*;
use crate::error::CliError;
use crate::files;

fn core(path: &Path) -> impl Fn(bodyfit::Error) -> CliError + '_ {
    move |e| CliError::in_file(path, e)
}

pub fn toy_model(args: ToyModelArgs) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        }
        None => match args.preset {
            Preset::Desk => ModelConfig::desk(),
            Preset::FullScale => ModelConfig::full_scale(),
        },
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let model = build_model(&config)?;
    files::ensure_parent(&args.out)?;
    model.save(&args.out).map_err(core(&args.out))?;
    println!(
        "model {}: {} vertices, {} joints, {} landmarks, hash {}",
        args.out.display(),
        model.num_vertices(),
        model.num_joints(),
        model.num_landmarks(),
        model.hash()
    );
    Ok(())
}

pub fn synth(args: SynthArgs) -> Result<(), CliError> {
    let model = files::model(&args.model)?;
    let mut config: SynthConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(v) = args.frames {
        config.frames = v;
    }
    if let Some(v) = args.cams {
        config.cameras = v;
    }
    if let Some(v) = args.noise_px {
        config.noise_px = v;
    }
    if let Some(v) = args.occlusion {
        config.occlusion_fraction = v;
    }
    if let Some(v) = args.image_size {
        config.image_width = v;
        config.image_height = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if args.no_sigma_inflation {
        config.inflate_occluded_sigma = false;
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if !(0.0..=1.0).contains(&args.drop) {
        return Err(CliError::Usage("--drop must lie in [0, 1]".into()));
    }

    let seq = generate_sequence(&model, &config)?;
    let obs = if args.drop > 0.0 {
        corrupt_observations(&seq.observations, config.seed ^ 0x5eed, args.drop)?
    } else {
        seq.observations
    };
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))?;
    let gt = args.out.join("gt.json");
    let rig = args.out.join("rig.json");
    let obs_path = args.out.join("obs.jsonl");
    save_ground_truth(&gt, &seq.params, model.hash()).map_err(core(&gt))?;
    seq.rig.save(&rig).map_err(core(&rig))?;
    obs.save(&obs_path).map_err(core(&obs_path))?;
    println!(
        "wrote {} frames from {} cameras to {}",
        config.frames,
        config.cameras,
        args.out.display()
    );
    Ok(())
}

pub fn samples(args: SamplesArgs) -> Result<(), CliError> {
    let model = files::model(&args.model)?;
    if args.count == 0 {
        return Err(CliError::Usage("--count must be positive".into()));
    }
    let samples: Vec<Vec<f64>> = match args.kind {
        SampleKind::BodyPose | SampleKind::HandPose => {
            let config = SynthConfig {
                seed: args.seed,
                frames: args.count,
                ..SynthConfig::default()
            };
            let params = sample_motion(&model, &config)?;
            let groups: Vec<&Vec<usize>> = if args.kind == SampleKind::BodyPose {
                vec![&model.pose_groups.body]
            } else {
                model.pose_groups.hands.iter().collect()
            };
            if groups.iter().all(|g| g.is_empty()) {
                return Err(CliError::Data("the model defines no joints for this pose group".into()));
            }
            let mut out = Vec::new();
            for f in 0..args.count {
                for group in groups.iter().filter(|g| !g.is_empty()) {
                    out.push(normalize_pose_group(&model, &params, f, group)?);
                }
            }
            out
        }
        SampleKind::BodyShape | SampleKind::FaceShape => {
            let dim = if args.kind == SampleKind::BodyShape {
                model.dims.body_shape
            } else {
                model.dims.face_shape
            };
            if dim == 0 {
                return Err(CliError::Data("the model has no coefficients of this kind".into()));
            }
            let prior = GmmPrior::standard(dim);
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            (0..args.count).map(|_| prior.sample(&mut rng)).collect()
        }
    };
    let kind = match args.kind {
        SampleKind::BodyPose => "body_pose",
        SampleKind::HandPose => "hand_pose",
        SampleKind::BodyShape => "body_shape",
        SampleKind::FaceShape => "face_shape",
    };
    files::ensure_parent(&args.out)?;
    files::write_samples(&args.out, kind, &samples)?;
    println!("wrote {} {kind} samples of dimension {}", samples.len(), samples[0].len());
    Ok(())
}

pub fn train_prior(args: TrainPriorArgs) -> Result<(), CliError> {
    let samples = files::read_samples(&args.samples)?;
    files::ensure_parent(&args.out)?;
    match args.kind {
        PriorKind::Flow => {
            let config = FlowConfig {
                layers: args.layers,
                hidden: args.hidden,
                epochs: args.epochs,
                batch_size: args.batch_size,
                learning_rate: args.learning_rate,
                seed: args.seed,
                ..FlowConfig::default()
            };
            let (prior, report) = PosePrior::train(&samples, &config)?;
            if !report.final_nll.is_finite() {
                return Err(bodyfit::Error::TrainingFailure(format!("final NLL is {}", report.final_nll)).into());
            }
            prior.save(&args.out).map_err(core(&args.out))?;
            println!("initial NLL {:.6}", report.initial_nll);
            println!("final NLL {:.6}", report.final_nll);
        }
        PriorKind::Gmm => {
            if args.components == 0 {
                return Err(CliError::Usage("--components must be positive".into()));
            }
            let fit = GmmPrior::fit(&samples, args.components, args.seed)?;
            let total = *fit.log_likelihood.last().expect("EM records the initial likelihood");
            let nll = -total / samples.len() as f64;
            if !nll.is_finite() {
                return Err(bodyfit::Error::TrainingFailure(format!("final NLL is {nll}")).into());
            }
            fit.prior.save(&args.out).map_err(core(&args.out))?;
            println!("EM iterations {}", fit.log_likelihood.len() - 1);
            println!("final NLL {nll:.6}");
        }
    }
    Ok(())
}

pub fn calibrate(args: CalibrateArgs) -> Result<(), CliError> {
    let model = files::model(&args.model)?;
    let obs = files::observations(&args.obs, &model)?;
    let intrinsics: Vec<Intrinsics> = match &args.intrinsics {
        Some(path) => files::rig(path)?.cameras.iter().map(|c| c.intrinsics).collect(),
        None => obs.image_sizes.iter().map(|&(w, h)| Intrinsics::default_for(w, h)).collect(),
    };
    let face_shape = vec![0.0; model.dims.face_shape];
    let calibration = calibrate_rig_from_head(&obs, &model, &face_shape, &intrinsics)?;
    for (camera, reason) in &calibration.failures {
        eprintln!("warning: camera {camera} not calibrated: {reason}");
    }
    files::ensure_parent(&args.out)?;
    calibration.rig.save(&args.out).map_err(core(&args.out))?;
    println!(
        "calibrated {} of {} cameras from frame {}",
        calibration.rig.len() - calibration.failures.len(),
        calibration.rig.len(),
        calibration.frame
    );
    Ok(())
}

fn stage_summary(result: &FitResult) {
    for stage in &result.stages {
        let first = stage.trace.first().copied().unwrap_or(f64::NAN);
        let last = stage.trace.last().copied().unwrap_or(f64::NAN);
        println!(
            "stage {:?}: objective {first:.6e} -> {last:.6e}, {} iterations, {:?}",
            stage.stage, stage.iterations, stage.termination
        );
    }
    for (frame, reason) in &result.init_failures {
        eprintln!("warning: frame {frame} initialization failed: {reason}");
    }
    if !result.skipped_frames.is_empty() {
        eprintln!("warning: low-confidence frames skipped: {:?}", result.skipped_frames);
    }
}

pub fn fit(args: FitArgs) -> Result<(), CliError> {
    let model = files::model(&args.model)?;
    let obs = files::observations(&args.obs, &model)?;
    let rig = args.rig.as_deref().map(files::rig).transpose()?;
    let settings = files::settings(args.inputs.weights.as_deref())?;
    let priors = files::priors(&args.inputs)?;
    let result = fit_sequence(&model, &obs, rig.as_ref(), &priors, &settings.weights, &settings.fit, None)?;
    stage_summary(&result);
    files::write_text(&args.out, &result.to_json(model.hash(), &settings.hash()?)?)?;
    if let Some(dir) = &args.meshes {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        for (f, vertices) in fitted_meshes(&model, &result.params)?.iter().enumerate() {
            let path = dir.join(format!("frame_{f:04}.obj"));
            let file = std::fs::File::create(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            write_obj(&model, vertices, std::io::BufWriter::new(file)).map_err(core(&path))?;
        }
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Parses `k` or an inclusive range `a..b`.
fn parse_views(spec: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::Usage(format!("--views expects k or a..b, got {spec:?}"));
    let number = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let counts: Vec<usize> = match spec.split_once("..") {
        Some((a, b)) => (number(a)?..=number(b.trim_start_matches('='))?).collect(),
        None => vec![number(spec)?],
    };
    if counts.is_empty() || counts.contains(&0) {
        return Err(bad());
    }
    Ok(counts)
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let model = files::model(&args.model)?;
    if !args.result.is_file() {
        return Err(CliError::Data(format!("result not found: {}", args.result.display())));
    }
    let text = std::fs::read_to_string(&args.result)?;
    let (result, result_hash) = FitResult::from_json(&text).map_err(core(&args.result))?;
    files::same_model(&args.result, &result_hash, &model)?;
    let config_hash = serde_json::from_str::<serde_json::Value>(&text)?
        .get("config_hash")
        .and_then(|v| v.as_str())
        .unwrap_or_default()
        .to_string();
    if !args.gt.is_file() {
        return Err(CliError::Data(format!("ground truth not found: {}", args.gt.display())));
    }
    let (gt, gt_hash) = load_ground_truth(&args.gt).map_err(core(&args.gt))?;
    files::same_model(&args.gt, &gt_hash, &model)?;

    let mut report = evaluate_sequence(&model, &result.params, &gt, &config_hash).map_err(|e| match e {
        bodyfit::Error::Shape(msg) => CliError::Data(format!("result and ground truth differ: {msg}")),
        other => other.into(),
    })?;
    if let Some(spec) = &args.views {
        let counts = parse_views(spec)?;
        let (obs_path, rig_path) = (args.obs.as_deref().expect("clap"), args.rig.as_deref().expect("clap"));
        let obs = files::observations(obs_path, &model)?;
        let rig = files::rig(rig_path)?;
        let settings: FitSettings = files::settings(args.inputs.weights.as_deref())?;
        let priors = files::priors(&args.inputs)?;
        report.view_sweep =
            view_count_sweep(&model, &obs, &rig, &priors, &settings.weights, &settings.fit, &gt, &counts)?;
    }
    for m in &report.metrics {
        println!("{:<14} {:>12.6} {}", m.name, m.value, m.unit);
    }
    for v in &report.view_sweep {
        println!("views {}: median mpjpe {:.6} mm over {} subsets", v.views, v.median_mpjpe, v.subsets.len());
    }
    files::write_text(&args.report, &serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

pub fn init_config(args: InitConfigArgs) -> Result<(), CliError> {
    files::write_text(&args.out, &FitSettings::default().to_json()?)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
