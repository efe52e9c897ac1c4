use thiserror::Error;

/// Errors raised while constructing or solving the approximation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not square ({rows}x{cols})")]
    NonSquareMatrix { rows: usize, cols: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unstable representation: dominant eigenvalue real part {dev:.6e} is not negative")]
    UnstableRepresentation { dev: f64 },

    #[error("density is negative ({value:.3e}) at x = {x:.6}")]
    NegativeDensity { x: f64, value: f64 },

    #[error("initial vector sums to {sum:.12} (atoms at zero are not supported)")]
    AtomAtZero { sum: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no catalog entry for order {order} ({detail})")]
    MissingCatalogEntry { order: usize, detail: String },

    #[error("catalog parse error: {0}")]
    CatalogFormat(String),

    #[error("negative argument {0}")]
    NegativeArgument(f64),

    #[error("t-point window (2 eps, delta - eps) = ({lo:.6}, {hi:.6}) is empty")]
    WindowEmpty { lo: f64, hi: f64 },

    #[error("singular basis: condition number {condition:.3e}")]
    SingularBasis { condition: f64 },

    #[error("matrix exponential overflow: {0}")]
    Overflow(String),

    #[error("bad generator: {0}")]
    BadGenerator(String),

    #[error("phase {phase} has zero rate")]
    ZeroRate { phase: usize },

    #[error("upper bound must be positive, got {0}")]
    NonpositiveBound(f64),

    #[error("point ({x}, phase {phase}) is outside the model domain")]
    OutOfDomain { x: f64, phase: usize },

    #[error("quadrature failed: estimated error {estimate:.3e} exceeds {tolerance:.3e}")]
    QuadratureFailure { estimate: f64, tolerance: f64 },

    #[error("inadmissible start: {0}")]
    InadmissibleStart(String),

    #[error("solver diverged at t = {t}: {detail}")]
    SolverDivergence { t: f64, detail: String },

    #[error("generator is reducible: {0}")]
    Reducible(String),

    #[error("singular linear solve")]
    SingularSolve,

    #[error("x = {x} lies outside cell {level} for phase {phase}")]
    OutOfCell { level: usize, phase: usize, x: f64 },

    #[error("bad interval [{a1}, {a2}]")]
    BadInterval { a1: f64, a2: f64 },

    #[error("orbit normalization underflow ({0:.3e})")]
    NormalizationUnderflow(f64),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Name of the variant, for diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonSquareMatrix { .. } => "NonSquareMatrix",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::UnstableRepresentation { .. } => "UnstableRepresentation",
            Error::NegativeDensity { .. } => "NegativeDensity",
            Error::AtomAtZero { .. } => "AtomAtZero",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::MissingCatalogEntry { .. } => "MissingCatalogEntry",
            Error::CatalogFormat(_) => "CatalogFormat",
            Error::NegativeArgument(_) => "NegativeArgument",
            Error::WindowEmpty { .. } => "WindowEmpty",
            Error::SingularBasis { .. } => "SingularBasis",
            Error::Overflow(_) => "Overflow",
            Error::BadGenerator(_) => "BadGenerator",
            Error::ZeroRate { .. } => "ZeroRate",
            Error::NonpositiveBound(_) => "NonpositiveBound",
            Error::OutOfDomain { .. } => "OutOfDomain",
            Error::QuadratureFailure { .. } => "QuadratureFailure",
            Error::InadmissibleStart(_) => "InadmissibleStart",
            Error::SolverDivergence { .. } => "SolverDivergence",
            Error::Reducible(_) => "Reducible",
            Error::SingularSolve => "SingularSolve",
            Error::OutOfCell { .. } => "OutOfCell",
            Error::BadInterval { .. } => "BadInterval",
            Error::NormalizationUnderflow(_) => "NormalizationUnderflow",
            Error::Config(_) => "Config",
            Error::Io(_) => "Io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
