use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ball is not moving into the surface (n.v = {0:e})")]
    NotApproaching(f64),
    #[error("normal velocity too small to divide by ({0:e})")]
    DegenerateNormalVelocity(f64),
    #[error("zero-length vector cannot be normalized")]
    ZeroVector,
    #[error("invalid surface parameters: {0}")]
    InvalidParams(String),
    #[error("ball starts interpenetrating the plane (signed gap {0:e} m)")]
    Interpenetrating(f64),
    #[error("no impact within {0} s")]
    NoImpact(f64),
    #[error("ball re-contacts the surface {0:.4} s after impact")]
    Recontact(f64),
    #[error("pre-impact flight of {available:.4} s is shorter than the {needed:.4} s window")]
    ShortFlight { available: f64, needed: f64 },
    #[error("no valid bounce after {0} attempts")]
    RetriesExhausted(usize),
    #[error("empty point set")]
    EmptyFrame,
    #[error("degenerate sample set: {0}")]
    Degenerate(String),
    #[error("insufficient frames: {0}")]
    InsufficientFrames(String),
    #[error("no predicted impact with the plane")]
    NoPredictedImpact,
    #[error("trajectory has {got} frames, model expects {expected}")]
    FrameCount { got: usize, expected: usize },
    #[error("empty decoder database")]
    EmptyDatabase,
    #[error("decoder database was built with a different post-trajectory encoder")]
    StaleDatabase,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cell ({x}, {y}) outside {width}x{height} grid")]
    CellOutOfRange {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("projected point lies outside the scene grid")]
    OutsideGrid,
    #[error("bounce {0} has no resolvable impact cell")]
    MissingCell(usize),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("metric input: {0}")]
    Metric(String),
    #[error(transparent)]
    Nn(#[from] rebound_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
