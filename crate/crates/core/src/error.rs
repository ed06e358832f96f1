use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("Newton iteration did not converge at step {step:?}: residual {residual:e} after {iterations} iterations")]
    NewtonDivergence {
        step: Option<usize>,
        residual: f64,
        iterations: usize,
    },

    #[error("population collapse (1 - eps*n = {margin:e}) at step {step:?}")]
    PopulationCollapse { step: Option<usize>, margin: f64 },

    #[error("state {0:?} is the total-extinction state, where the field is not differentiable")]
    ExtinctionState([f64; 2]),

    #[error("steady state with total population zero cannot be mapped to frequency variables")]
    EmptyPopulation,

    #[error("no coexistence regime: xi = {xi} is outside (1 - s_h, 1) = ({lower}, 1)")]
    NoCoexistence { xi: f64, lower: f64 },

    #[error("flux cap M = {m} does not exceed max(-f/g) = {max_neg_fg}; threshold budget undefined")]
    InsufficientFlux { m: f64, max_neg_fg: f64 },

    #[error("horizon T = {horizon} is not larger than C/M = {release_time}")]
    HorizonTooShort { horizon: f64, release_time: f64 },

    #[error("f + M g = {value:e} is not positive at p = {p}")]
    NonPositiveSpeed { p: f64, value: f64 },

    #[error("quadrature did not reach tolerance {tol:e} (estimate {estimate:e})")]
    Quadrature { tol: f64, estimate: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    InvalidConfig(Vec<String>),

    #[error("run exceeded its wall-clock budget of {0} s")]
    TimedOut(f64),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Configuration problems versus numerical failures, for CLI exit codes.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter(_)
                | Error::InvalidConfig(_)
                | Error::NoCoexistence { .. }
                | Error::HorizonTooShort { .. }
                | Error::GridMismatch(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
