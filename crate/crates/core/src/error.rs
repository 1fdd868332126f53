use thiserror::Error;

#[derive(Debug, Error)]
pub enum FbsdeError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("evaluator `{evaluator}` produced a non-finite value at {point}")]
    EvaluatorFailure { evaluator: &'static str, point: String },

    #[error("time {t} is outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("time step too large: dt * L_f_y = {product} must be < 1")]
    StepSize { product: f64 },

    #[error(
        "implicit v relation did not contract within {iterations} iterations at time index \
         {time_index}, node {node:?} (last update {last_update:e}, observed contraction ratio \
         {ratio:.4}); the z-coupling is near-singular"
    )]
    ImplicitNotContracting {
        time_index: usize,
        node: Vec<f64>,
        iterations: usize,
        last_update: f64,
        ratio: f64,
    },

    #[error("non-finite field value at time index {time_index}, node {node:?}")]
    NonFinite { time_index: usize, node: Vec<f64> },

    #[error("missing Lipschitz constant {0}: declare it on the coefficient set or supply an audit")]
    MissingConstant(&'static str),

    #[error("forward simulation diverged on {paths} of {total} paths")]
    Divergent { paths: usize, total: usize },

    #[error("unknown benchmark `{name}`; valid names: {valid}")]
    UnknownBenchmark { name: String, valid: String },

    #[error("benchmark `{0}` is expected to blow up; no converged reference comparison exists")]
    ExpectedBlowUp(String),

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<FbsdeError>,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FbsdeError {
    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        FbsdeError::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, FbsdeError>;
