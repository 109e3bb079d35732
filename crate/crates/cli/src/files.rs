use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use bodyfit::camera::Rig;
use bodyfit::energies::Priors;
use bodyfit::fitter::FitSettings;
use bodyfit::model::ModelDefinition;
use bodyfit::observations::ObservationSet;
use bodyfit::priors::{GmmPrior, PosePrior};
use serde::{Deserialize, Serialize};

use crate::args::FitInputs;
use crate::error::CliError;

pub const CONFIG_DIR_ENV: &str = "BODYFIT_CONFIG_DIR";
pub const DEFAULT_SETTINGS_FILE: &str = "default.weights";
pub const SAMPLES_FORMAT_VERSION: u32 = 1;

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{what} not found: {}", path.display())))
    }
}

fn load<T>(path: &Path, what: &str, f: impl FnOnce(&Path) -> bodyfit::Result<T>) -> Result<T, CliError> {
    require(path, what)?;
    f(path).map_err(|e| CliError::in_file(path, e))
}

pub fn model(path: &Path) -> Result<ModelDefinition, CliError> {
    load(path, "model", |p| ModelDefinition::load(p))
}

/// Observations, refused when they were produced for another model.
pub fn observations(path: &Path, model: &ModelDefinition) -> Result<ObservationSet, CliError> {
    let obs = load(path, "observations", |p| ObservationSet::load(p))?;
    if let Some(hash) = &obs.model_hash {
        same_model(path, hash, model)?;
    }
    Ok(obs)
}

pub fn rig(path: &Path) -> Result<Rig, CliError> {
    load(path, "rig", |p| Rig::load(p))
}

pub fn same_model(path: &Path, hash: &str, model: &ModelDefinition) -> Result<(), CliError> {
    if hash == model.hash() {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "{} was produced for a different model (model hash {hash}, expected {})",
            path.display(),
            model.hash()
        )))
    }
}

/// The explicit settings file, else the config-directory default, else built-in defaults.
pub fn settings(explicit: Option<&Path>) -> Result<FitSettings, CliError> {
    let path = match explicit {
        Some(p) => Some(p.to_path_buf()),
        None => std::env::var_os(CONFIG_DIR_ENV)
            .map(|dir| PathBuf::from(dir).join(DEFAULT_SETTINGS_FILE))
            .filter(|p| p.is_file()),
    };
    match path {
        Some(p) => load(&p, "settings file", |p| FitSettings::load(p)),
        None => Ok(FitSettings::default()),
    }
}

pub fn priors(inputs: &FitInputs) -> Result<Priors, CliError> {
    let flow = |p: &Option<PathBuf>| p.as_deref().map(|p| load(p, "prior", |p| PosePrior::load(p))).transpose();
    let gmm = |p: &Option<PathBuf>| p.as_deref().map(|p| load(p, "prior", |p| GmmPrior::load(p))).transpose();
    Ok(Priors {
        body_pose: flow(&inputs.body_prior)?,
        hand_pose: flow(&inputs.hand_prior)?,
        body_shape: gmm(&inputs.body_shape_prior)?,
        face_shape: gmm(&inputs.face_shape_prior)?,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SamplesHeader {
    format_version: u32,
    kind: String,
    dim: usize,
    count: usize,
}

/// JSON Lines: a header record, then one array per sample.
pub fn write_samples(path: &Path, kind: &str, samples: &[Vec<f64>]) -> Result<(), CliError> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    let header = SamplesHeader {
        format_version: SAMPLES_FORMAT_VERSION,
        kind: kind.into(),
        dim: samples.first().map_or(0, Vec::len),
        count: samples.len(),
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for s in samples {
        writeln!(out, "{}", serde_json::to_string(s)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    require(path, "samples file")?;
    let bad = |msg: String| CliError::Data(format!("{}: {msg}", path.display()));
    let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
    let header: SamplesHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?).map_err(|e| bad(format!("header: {e}")))?,
        None => return Err(bad("empty file".into())),
    };
    if header.format_version != SAMPLES_FORMAT_VERSION {
        return Err(bad(format!("unsupported format_version {}", header.format_version)));
    }
    let mut samples = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Vec<f64> = serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
        if sample.len() != header.dim {
            return Err(bad(format!("line {} has {} values, expected {}", i + 2, sample.len(), header.dim)));
        }
        samples.push(sample);
    }
    if samples.len() != header.count {
        return Err(bad(format!("{} samples, header says {}", samples.len(), header.count)));
    }
    Ok(samples)
}

pub fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

/// Writes `text` after creating any missing parent directory.
pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
