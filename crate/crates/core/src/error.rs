use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("pan-tilt ({pan:.6}, {tilt:.6}) rad outside limits (±{pan_limit:.6}, ±{tilt_limit:.6})")]
    LimitViolation {
        pan: f64,
        tilt: f64,
        pan_limit: f64,
        tilt_limit: f64,
    },
    #[error("point is behind the camera (depth {0:.6} m)")]
    BehindCamera(f64),
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("mean viewing direction has near-zero norm (opposing views)")]
    DegenerateNormal,
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("pose refinement needs at least 6 observations, got {0}")]
    Underconstrained(usize),
    #[error("normal equations are singular (degenerate geometry)")]
    DegenerateGeometry,
    #[error("trajectory needs at least two poses")]
    ShortTrajectory,
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
