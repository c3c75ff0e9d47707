use std::fmt;

use thiserror::Error;

use crate::search::PruneCounts;

/// Why a candidate set of unknown distances was excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InfeasibleCause {
    /// `d11^2 - s31^2` is negative: no real lateral offset for the first source.
    Lateral,
    /// One of the three radicands feeding the first row of the mixing matrix is negative.
    MixingRadicand,
}

impl fmt::Display for InfeasibleCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InfeasibleCause::Lateral => f.write_str("negative lateral radicand for s1"),
            InfeasibleCause::MixingRadicand => f.write_str("negative mixing-row radicand"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate gauge: {0}")]
    DegenerateGauge(String),

    #[error("infeasible candidate: {0}")]
    Infeasible(InfeasibleCause),

    #[error("first source too close to the r1-r2 axis (s21 = {0:e} m)")]
    NearCollinearGauge(f64),

    #[error("first four sources nearly coplanar (condition number {0:e})")]
    DegenerateSources(f64),

    #[error("mixing matrix is singular")]
    SingularMixing,

    #[error("no feasible candidate ({0})")]
    NoSolution(PruneCounts),

    #[error("empty search: inverted bounds for {0}")]
    EmptySearch(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors that come from the geometry of the instance rather than from a
    /// particular candidate or from I/O.
    pub fn is_degenerate_geometry(&self) -> bool {
        matches!(
            self,
            Error::DegenerateGauge(_) | Error::DegenerateSources(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
