use thiserror::Error;

use crate::train::TrainReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("multidegree count C({n_max}+{d},{d})-1 overflows usize")]
    CountOverflow { d: usize, n_max: usize },

    #[error("target is not permutation invariant: permutation {permutation:?} changes the value by {residual:e}")]
    InvarianceViolation { permutation: Vec<usize>, residual: f64 },

    #[error("performer gram value {lambda:e} is outside [1e-300, 1e300]; resample the feature vectors")]
    Conditioning { lambda: f64 },

    #[error("grid of {required} cells exceeds the table budget of {limit}")]
    Budget { required: u128, limit: u128 },

    #[error("token coordinate {value} is outside [0, 1)")]
    Domain { value: f64 },

    #[error("performer heads never materialize an attention matrix")]
    UnsupportedInspection,

    #[error("reference values have zero norm")]
    ZeroNorm,

    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        last_report: Box<TrainReport>,
    },

    #[error("unknown target function `{0}`")]
    UnknownTarget(String),

    #[error("least squares solve failed: {0}")]
    Solver(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
