use thiserror::Error;

/// Errors produced anywhere in the fitting stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("ransac found no consensus (best inlier count {best}, needed {needed})")]
    NoConsensus { best: usize, needed: usize },
    #[error("rig calibration failed: {}", format_camera_failures(.failures))]
    Calibration { failures: Vec<(usize, String)> },
    #[error("initialization failed: {0}")]
    InitFailure(String),
    #[error("unknown {kind}: {name}")]
    Lookup { kind: &'static str, name: String },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid primitive: {0}")]
    InvalidPrimitive(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("training failed: {0}")]
    TrainingFailure(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_camera_failures(failures: &[(usize, String)]) -> String {
    failures
        .iter()
        .map(|(cam, msg)| format!("camera {cam}: {msg}"))
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    /// True for errors caused by numerical breakdown rather than bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::TrainingFailure(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
