use thiserror::Error;

/// Errors raised while building or running the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("A is not in unstable-first block form: {0}")]
    NotBlockOrdered(String),

    #[error("unstable eigenvalue {eigenvalue} has geometric multiplicity {multiplicity} (must be 1)")]
    DerogatoryUnstable { eigenvalue: f64, multiplicity: usize },

    #[error("A is singular (smallest singular value {0:e})")]
    SingularA(f64),

    #[error("(A, C) is not observable (observability rank {rank} < {n})")]
    NotObservable { rank: usize, n: usize },

    #[error("A has non-real eigenvalues; the modal transform requires a real spectrum")]
    ComplexSpectrum,

    #[error("Riccati iteration did not converge after {iterations} iterations (last change {change:e})")]
    NoConvergence { iterations: usize, change: f64 },

    #[error(
        "A - KCA violates the distinct-eigenvalue assumption: {0}. \
         Remediation: since (A, CA) is observable when A is invertible, the poles of A - KCA \
         can be freely assigned by choosing a different gain K"
    )]
    DistinctSpectrumViolated(String),

    #[error("eigenvector matrix V is ill-conditioned (condition number {0:e})")]
    IllConditionedV(f64),

    #[error("A - pi I is singular for pi = {0}")]
    SingularShift(String),

    #[error("G_i structure check failed for sensor {sensor}: relative residual {residual:e}")]
    StructureMismatch { sensor: usize, residual: f64 },

    #[error("rank of G_i^U for sensor {sensor} is {rank}, expected {expected}")]
    RankDeficient { sensor: usize, rank: usize, expected: usize },

    #[error("transform P_{sensor} is ill-conditioned (condition number {cond:e})")]
    IllConditionedP { sensor: usize, cond: f64 },

    #[error("matrix is not Hermitian positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("normal equations are singular")]
    SingularNormalEquations,

    #[error("regularization weight must be finite and non-negative, got {0}")]
    InvalidGamma(f64),

    #[error("attack horizon must be at least one step")]
    EmptyHorizon,

    #[error("undetectable-attack certificate is invalid: {0}")]
    CertificateInvalid(String),

    #[error("eigenvalue modulus {0} is below one; the undetectable construction needs an unstable mode")]
    NotUnstable(f64),

    #[error("io error: {0}")]
    Io(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Short machine-readable tag, used by the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::InvalidInput(_) => "InvalidInput",
            Error::NotBlockOrdered(_) => "NotBlockOrdered",
            Error::DerogatoryUnstable { .. } => "DerogatoryUnstable",
            Error::SingularA(_) => "SingularA",
            Error::NotObservable { .. } => "NotObservable",
            Error::ComplexSpectrum => "ComplexSpectrum",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::DistinctSpectrumViolated(_) => "DistinctSpectrumViolated",
            Error::IllConditionedV(_) => "IllConditionedV",
            Error::SingularShift(_) => "SingularShift",
            Error::StructureMismatch { .. } => "StructureMismatch",
            Error::RankDeficient { .. } => "RankDeficient",
            Error::IllConditionedP { .. } => "IllConditionedP",
            Error::NotPositiveDefinite(_) => "NotPositiveDefinite",
            Error::SingularNormalEquations => "SingularNormalEquations",
            Error::InvalidGamma(_) => "InvalidGamma",
            Error::EmptyHorizon => "EmptyHorizon",
            Error::CertificateInvalid(_) => "CertificateInvalid",
            Error::NotUnstable(_) => "NotUnstable",
            Error::Io(_) => "Io",
            Error::Config(_) => "Config",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
