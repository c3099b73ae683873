use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid segment: {0}")]
    InvalidSegment(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("{what} = {value} is not on the grid (step {step})")]
    OffGrid {
        what: &'static str,
        value: f64,
        step: f64,
    },

    #[error("times out of order: {0}")]
    TimeOrder(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("solution blew up at s = {time} (|X| = {magnitude:e})")]
    BlowUp { time: f64, magnitude: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("picard iteration did not converge after {iterations} iterations (last weighted gap {gap:e})")]
    NotConverged { iterations: usize, gap: f64 },

    #[error("control enumeration needs {required} evaluations, budget is {budget}")]
    BudgetExceeded { required: u128, budget: u64 },

    #[error("HJB residual is undefined at the terminal time t = {0}")]
    TerminalTime(f64),

    #[error("touching condition violated: extension at t = {time} exceeds the touching value by {excess:e}")]
    TouchingViolated { time: f64, excess: f64 },

    #[error("empty candidate set")]
    EmptyCandidates,

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// Short machine-readable code used by the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidSegment(_) => "invalid_segment",
            Error::GridMismatch(_) => "grid_mismatch",
            Error::OffGrid { .. } => "off_grid",
            Error::TimeOrder(_) => "time_order",
            Error::InvalidProblem(_) => "invalid_problem",
            Error::BlowUp { .. } => "blow_up",
            Error::NonFinite(_) => "non_finite",
            Error::NotConverged { .. } => "not_converged",
            Error::BudgetExceeded { .. } => "budget_exceeded",
            Error::TerminalTime(_) => "terminal_time",
            Error::TouchingViolated { .. } => "touching_violated",
            Error::EmptyCandidates => "empty_candidates",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }

    /// Process exit status for the CLI. Zero is never returned.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_) => 3,
            Error::InvalidProblem(_) | Error::InvalidSegment(_) => 4,
            Error::GridMismatch(_) | Error::OffGrid { .. } | Error::TimeOrder(_) => 5,
            Error::BlowUp { .. } | Error::NonFinite(_) | Error::NotConverged { .. } => 6,
            Error::BudgetExceeded { .. } => 7,
            Error::TerminalTime(_) | Error::TouchingViolated { .. } | Error::EmptyCandidates => 8,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
