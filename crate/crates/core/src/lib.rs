//! Joint localization of sensors and sources in 3D from a matrix of
//! time-of-arrival ranges.
//!
//! The pipeline is:
//!
//! 1. [`factorize`]: build the relative inner-product matrix from squared ranges and
//!    take its rank-3 factorization.
//! 2. [`reconstruct`]: given four distances (sensor 1 to sensor 2, and source 1 to
//!    sources 2, 3 and 4), recover every position in closed form.
//! 3. [`search`]: bound those four distances with the triangle inequality and grid
//!    search whichever of them are unknown, scoring candidates by the residual of the
//!    range equations the closed form did not consume.
//!
//! [`scene`] generates synthetic scenes and fixes the coordinate gauge, and
//! [`evaluate`] runs seeded Monte-Carlo sweeps over all of the above.
//!
//! With the default `parallel` feature, candidate and trial evaluation is spread over
//! a rayon pool. Results are bit-identical to the sequential path.

pub mod error;
pub mod evaluate;
pub mod factorize;
mod par;
pub mod reconstruct;
pub mod scene;
pub mod search;

pub use error::{Error, InfeasibleCause, Result};
pub use evaluate::{em_error, run_trials, BenchConfig, BenchReport, BenchRow};
pub use factorize::{build_relative_matrix, rank3_factors, rank_defect, Factorization};
pub use par::configure_threads;
pub use reconstruct::{solve_given_unknowns, SignPattern, Solution, UnknownDistances};
pub use scene::{
    canonicalize, compute_ranges, generate_scene, GaugeTransform, NoiseConfig, Perturb,
    RangeMatrix, Scene,
};
pub use search::{
    classical_feasibility, distance_bounds, grid_search, Bounds, ScenarioKind, ScenarioSpec,
    SearchConfig, SearchResult, Strategy,
};

/// A point in 3D, meters.
pub type Point = nalgebra::Vector3<f64>;

/// Speed of sound used when none is given, m/s.
pub const DEFAULT_SPEED_OF_SOUND: f64 = 340.0;
