use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid Fock space: nmax must be at least 1, got {0}")]
    InvalidSpace(usize),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("truncation guard tripped: {0}")]
    Truncation(String),

    #[error("state has (numerically) zero norm")]
    ZeroNorm,

    #[error("step size guard tripped: {0}")]
    StepSize(String),

    #[error("model has {0} collapse operators; unravelings require exactly one")]
    MultiChannelUnsupported(usize),

    #[error("local-oscillator amplitude must be nonzero for the ostensible jump unraveling")]
    ZeroGamma,

    #[error("operator is not Hermitian (max deviation {0:e})")]
    NotHermitian(f64),

    #[error("effect is not positive (min eigenvalue {0:e})")]
    Positivity(f64),

    #[error("Gaussian effect is degenerate: 1 - exp(-t) - |S| = {0:e}")]
    DegenerateEffect(f64),

    #[error("linear inversion is ill-conditioned: {0}")]
    IllConditioned(String),

    #[error("ensemble needs at least two trajectories, got {0}")]
    EmptyEnsemble(usize),

    #[error("jump branch has zero probability (state annihilated by c + gamma)")]
    ZeroJumpRate,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    /// Short name of the numerical guard, if this error is one.
    pub fn guard_name(&self) -> Option<&'static str> {
        match self {
            Error::Truncation(_) => Some("truncation"),
            Error::StepSize(_) => Some("step-size"),
            Error::ZeroNorm => Some("zero-norm"),
            Error::Positivity(_) => Some("positivity"),
            Error::DegenerateEffect(_) => Some("degenerate-effect"),
            Error::IllConditioned(_) => Some("ill-conditioned"),
            Error::ZeroJumpRate => Some("zero-jump-rate"),
            _ => None,
        }
    }
}
