use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("derivative order {order} exceeds the supported depth {max}")]
    UnsupportedOrder { order: usize, max: usize },

    #[error("integration diverged: particle {particle} became non-finite at t = {time}")]
    Divergence { particle: usize, time: f64 },

    #[error("time step {dt:e} violates the stability limit; admissible dt <= {admissible:e}")]
    Stability { dt: f64, admissible: f64 },

    #[error("density reaches the boundary: mass {mass:e} within {cells} cells of the edge of axis {axis}")]
    BoundaryLeak { axis: usize, cells: usize, mass: f64 },

    #[error("stale density grid: total mass {mass} deviates from 1")]
    StaleGrid { mass: f64 },

    #[error("velocity unrecoverable: every cell is below the density floor")]
    Unrecoverable,

    #[error("bins too sparse: only {usable_fraction:.3} of samples fall in bins with >= {min_count} entries; try bin width {suggested_width:e}")]
    SparseBins {
        usable_fraction: f64,
        min_count: usize,
        suggested_width: f64,
    },

    #[error("series truncation diagnostic {diagnostic:e} exceeds {limit:e}")]
    Truncation { diagnostic: f64, limit: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
