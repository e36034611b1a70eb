use thiserror::Error;

/// Crate-wide error type. Numeric kernels report the offending graph node so
/// failures in composed objectives stay debuggable.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: String,
        detail: String,
    },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: String },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("gaussian fusion error: {0}")]
    Gaussian(String),

    #[error("quadrature grid too coarse: estimated relative error {est:.3e}")]
    QuadratureTooCoarse { est: f64 },

    #[error("episode sampling error: {0}")]
    Episode(String),

    #[error("gridworld error: {0}")]
    Gridworld(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("degenerate encoder: Var[mean] = {0:.3e}")]
    DegenerateEncoder(f64),

    #[error("training aborted at step {step} (episode seed {episode_seed:#018x}): {detail}")]
    TrainAbort {
        step: u64,
        episode_seed: u64,
        detail: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("self-test failure in suite '{suite}': {detail}")]
    SelftestFailed { suite: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;
