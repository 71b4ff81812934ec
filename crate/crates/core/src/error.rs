use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("degenerate triangle {index}: area {area:e} below tolerance {tolerance:e}")]
    DegenerateTriangle {
        index: usize,
        area: f64,
        tolerance: f64,
    },

    #[error("diffusion tensor on triangle {0} is not symmetric positive definite")]
    NonSpdDiffusion(usize),

    #[error("invalid PDE coefficients: {0}")]
    InvalidCoefficients(String),

    #[error("point ({0}, {1}) lies outside the mesh")]
    OutsideMesh(f64, f64),

    #[error("invalid spline basis: {0}")]
    InvalidBasis(String),

    #[error("time {time} outside the basis interval [0, {t_end}]")]
    TimeOutOfRange { time: f64, t_end: f64 },

    #[error("invalid observations: {0}")]
    InvalidObservations(String),

    #[error("duplicate observation at location {loc}, time {time}")]
    DuplicateObservation { loc: usize, time: usize },

    #[error("fixed-effects design is rank deficient (rank {rank} < {q})")]
    RankDeficientDesign { rank: usize, q: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is singular or not positive definite: {0}")]
    Singular(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model is oversaturated: edf {edf} >= {n_obs} observations")]
    Oversaturated { edf: f64, n_obs: usize },

    #[error("every grid point failed to fit (first failure: {0})")]
    AllGridPointsFailed(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by numerics rather than malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular(_) | Error::Oversaturated { .. } | Error::AllGridPointsFailed(_)
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Csv(_))
    }
}
