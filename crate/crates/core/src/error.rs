use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the solver pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("not plurisubharmonic at {point:?}: minimum eigenvalue estimate {min_eig:.3e}")]
    NotPlurisubharmonic { point: Vec<f64>, min_eig: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("grid needs {required} lattice points, budget is {budget}")]
    BudgetExceeded { required: usize, budget: usize },

    #[error("grid spacing {h} leaves no interior points")]
    EmptyGrid { h: f64 },

    #[error("boundary projection did not converge after {iterations} iterations (last iterate {last:?})")]
    ProjectionDiverged { iterations: usize, last: Vec<f64> },

    #[error("initial data is not evaluable on the mollification region: {0}")]
    DomainTooTight(String),

    #[error("boundary ramp infeasible after {halvings} halvings of eps_m")]
    RampInfeasible { halvings: usize },

    #[error("linear solver stalled after {iterations} iterations, residual {residual:.3e}")]
    SolverStall {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("subsolution search failed: {reason} at {point:?}")]
    SubsolutionInfeasible { reason: String, point: Vec<f64> },

    #[error("collar {{d <= {delta}}} contains no grid points")]
    CollarEmpty { delta: f64 },

    #[error("step rejected at t = {t}: {reason}")]
    StepRejected {
        t: f64,
        reason: String,
        residuals: Vec<f64>,
    },

    #[error("flow aborted at t = {t}: {reason}")]
    FlowAborted {
        t: f64,
        reason: String,
        partial: Box<crate::flow::Trajectory>,
    },

    #[error("time window ({lo}, {hi}) contains fewer than two snapshots")]
    WindowEmpty { lo: f64, hi: f64 },

    #[error("comparison premise violated: {what} at {point:?}, t = {t} (excess {excess:.3e})")]
    PremiseViolated {
        what: String,
        point: Vec<f64>,
        t: f64,
        excess: f64,
    },

    #[error("radial reference needs radial data: {0}")]
    NotRadial(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
