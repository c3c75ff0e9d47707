//! Closed-form reconstruction of every sensor and source from four distances.
//!
//! In the canonical gauge (`r1 = 0`, `r2 = (0, 0, alpha)`, `s1 = (0, s21, s31)`) the
//! law of cosines fixes the z coordinate of every source from `alpha` alone, and the
//! three rows of the mixing matrix `C` (with `R^T = U C^-1`, `-2 S = C V`) follow from
//! `alpha` and the source-1 distances `beta`, `gamma`, `eta`:
//!
//! * `C3 = U[0,:] / alpha`
//! * `C2 = (w V13^-1 - s31 C3) / s21`, `w_k = dist_k^2 - d(1,k+1)^2 + d(1,1)^2`
//! * `C1 V[:,k] = -2 x(s_{k+2})`, known up to sign from `|s_j|^2 = d(1,j)^2`
//!
//! Mirroring in x flips all three signs of the first row at once, so only four sign
//! patterns are distinct. The pattern that best reproduces the measured ranges wins.

use std::fmt;

use nalgebra::{DMatrix, Matrix3, RowVector3};
use serde::{Deserialize, Serialize};

use crate::factorize::Factorization;
use crate::scene::RangeMatrix;
use crate::{Error, InfeasibleCause, Point, Result};

/// Radicands in `[-RADICAND_TOLERANCE * max(1, d11^2), 0]` are clamped to zero.
pub const RADICAND_TOLERANCE: f64 = 1e-9;
/// Smallest accepted lateral offset `s21` of the first source, meters.
pub const MIN_LATERAL_OFFSET: f64 = 1e-6;
/// Largest accepted condition number of the leading 3x3 block of `V`.
pub const V_CONDITION_CAP: f64 = 1e12;
/// `C` counts as singular when `|det C| < MIXING_DET_FACTOR * (max row norm)^3`.
pub const MIXING_DET_FACTOR: f64 = 1e-12;
/// Range-residual gap under which two sign patterns are considered tied.
pub const SIGN_TIE_TOLERANCE: f64 = 1e-12;

/// Distances `|r1 - r2|`, `|s1 - s2|`, `|s1 - s3|`, `|s1 - s4|` in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnknownDistances {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
}

impl UnknownDistances {
    pub fn new(alpha: f64, beta: f64, gamma: f64, eta: f64) -> Result<Self> {
        let u = UnknownDistances {
            alpha,
            beta,
            gamma,
            eta,
        };
        if u.as_array().iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::invalid(format!(
                "unknown distances must be positive, got {u:?}"
            )));
        }
        Ok(u)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.alpha, self.beta, self.gamma, self.eta]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        UnknownDistances {
            alpha: a[0],
            beta: a[1],
            gamma: a[2],
            eta: a[3],
        }
    }
}

/// Signs of the x coordinates of `s2`, `s3`, `s4`. The first is always `+`: the
/// mirror image is the same range data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SignPattern {
    #[serde(rename = "+,+,+")]
    PlusPlusPlus,
    #[serde(rename = "+,+,-")]
    PlusPlusMinus,
    #[serde(rename = "+,-,+")]
    PlusMinusPlus,
    #[serde(rename = "+,-,-")]
    PlusMinusMinus,
}

impl SignPattern {
    /// In tie-break order.
    pub const ALL: [SignPattern; 4] = [
        SignPattern::PlusPlusPlus,
        SignPattern::PlusPlusMinus,
        SignPattern::PlusMinusPlus,
        SignPattern::PlusMinusMinus,
    ];

    pub fn signs(self) -> [f64; 3] {
        match self {
            SignPattern::PlusPlusPlus => [1.0, 1.0, 1.0],
            SignPattern::PlusPlusMinus => [1.0, 1.0, -1.0],
            SignPattern::PlusMinusPlus => [1.0, -1.0, 1.0],
            SignPattern::PlusMinusMinus => [1.0, -1.0, -1.0],
        }
    }

    /// Pattern whose signs match the given x coordinates (`x1` is taken as `+`).
    pub fn from_x_signs(_x1: f64, x2: f64, x3: f64) -> SignPattern {
        match (x2 >= 0.0, x3 >= 0.0) {
            (true, true) => SignPattern::PlusPlusPlus,
            (true, false) => SignPattern::PlusPlusMinus,
            (false, true) => SignPattern::PlusMinusPlus,
            (false, false) => SignPattern::PlusMinusMinus,
        }
    }
}

impl fmt::Display for SignPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.signs().map(|x| if x > 0.0 { '+' } else { '-' });
        write!(f, "{},{},{}", s[0], s[1], s[2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    pub c: Matrix3<f64>,
    pub sign_pattern: SignPattern,
}

/// Estimated positions in the canonical gauge.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub sensors: Vec<Point>,
    pub sources: Vec<Point>,
    pub unknowns: UnknownDistances,
    pub sign_pattern: SignPattern,
    /// Residual of the range equations not used by the closed form (m^2 scale).
    pub residual_er: f64,
    /// Root of the summed squared differences between measured and implied ranges, m.
    pub range_rms: f64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

fn radicand_tolerance(ranges: &RangeMatrix) -> f64 {
    RADICAND_TOLERANCE * ranges.squared(0, 0).max(1.0)
}

fn clamp_radicand(value: f64, tol: f64, cause: InfeasibleCause) -> Result<f64> {
    if value >= 0.0 {
        Ok(value)
    } else if value >= -tol {
        Ok(0.0)
    } else {
        Err(Error::Infeasible(cause))
    }
}

/// z coordinate of every source, `(alpha^2 + d(1,j)^2 - d(2,j)^2) / (2 alpha)`.
pub fn third_coordinates(alpha: f64, ranges: &RangeMatrix) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    if ranges.sensor_count() < 2 {
        return Err(Error::invalid("need at least two sensors"));
    }
    Ok((0..ranges.source_count())
        .map(|j| third_coordinate(alpha, ranges, j))
        .collect())
}

#[inline]
fn third_coordinate(alpha: f64, ranges: &RangeMatrix, j: usize) -> f64 {
    (alpha * alpha + ranges.squared(0, j) - ranges.squared(1, j)) / (2.0 * alpha)
}

/// y coordinate of the first source, `sqrt(d(1,1)^2 - s31^2)`.
pub fn first_source_lateral(alpha: f64, ranges: &RangeMatrix) -> Result<f64> {
    check_alpha(alpha)?;
    let s31 = third_coordinate(alpha, ranges, 0);
    lateral_from(s31, ranges)
}

fn lateral_from(s31: f64, ranges: &RangeMatrix) -> Result<f64> {
    let radicand = ranges.squared(0, 0) - s31 * s31;
    clamp_radicand(radicand, radicand_tolerance(ranges), InfeasibleCause::Lateral).map(f64::sqrt)
}

/// Third row of the mixing matrix, `U[0,:] / alpha`.
pub fn c3_row(alpha: f64, fact: &Factorization) -> Result<RowVector3<f64>> {
    check_alpha(alpha)?;
    let u = fact.u();
    Ok(RowVector3::new(u[(0, 0)], u[(0, 1)], u[(0, 2)]) / alpha)
}

fn leading_inverse(fact: &Factorization) -> Result<Matrix3<f64>> {
    let cond = fact.v_condition();
    if cond.is_nan() || cond > V_CONDITION_CAP {
        return Err(Error::DegenerateSources(cond));
    }
    fact.v_leading()
        .try_inverse()
        .ok_or(Error::DegenerateSources(f64::INFINITY))
}

fn distance_terms(unknowns: &UnknownDistances, ranges: &RangeMatrix) -> [f64; 3] {
    let d11 = ranges.squared(0, 0);
    let dists = [unknowns.beta, unknowns.gamma, unknowns.eta];
    std::array::from_fn(|k| dists[k] * dists[k] - ranges.squared(0, k + 1) + d11)
}

#[inline]
fn c2_from(
    w: [f64; 3],
    v_inv: &Matrix3<f64>,
    s21: f64,
    s31: f64,
    c3: &RowVector3<f64>,
) -> RowVector3<f64> {
    (RowVector3::from(w) * v_inv - c3 * s31) / s21
}

fn check_lateral(s21: f64) -> Result<()> {
    if s21.is_nan() || s21 < MIN_LATERAL_OFFSET {
        return Err(Error::NearCollinearGauge(s21));
    }
    Ok(())
}

/// Second row of the mixing matrix.
pub fn c2_row(
    unknowns: &UnknownDistances,
    fact: &Factorization,
    ranges: &RangeMatrix,
    s21: f64,
    s31: f64,
    c3: &RowVector3<f64>,
) -> Result<RowVector3<f64>> {
    check_lateral(s21)?;
    let v_inv = leading_inverse(fact)?;
    Ok(c2_from(
        distance_terms(unknowns, ranges),
        &v_inv,
        s21,
        s31,
        c3,
    ))
}

/// `4 (d(1,k+2)^2 - s3_{k+2}^2) - (C2 V[:,k] - 2 s21)^2` for `k = 0..3`, clamped.
fn mixing_radicands(
    c2: &RowVector3<f64>,
    v_leading: &Matrix3<f64>,
    ranges: &RangeMatrix,
    s3: &[f64],
    s21: f64,
) -> Result<[f64; 3]> {
    let tol = radicand_tolerance(ranges);
    let proj = c2 * v_leading;
    let mut out = [0.0; 3];
    for k in 0..3 {
        let j = k + 1;
        let lhs = proj[k] - 2.0 * s21;
        let raw = 4.0 * (ranges.squared(0, j) - s3[j] * s3[j]) - lhs * lhs;
        out[k] = clamp_radicand(raw, tol, InfeasibleCause::MixingRadicand)?;
    }
    Ok(out)
}

/// First row for one sign pattern, or `None` when the pattern duplicates an earlier
/// one because a radicand is exactly zero.
#[inline]
fn c1_from(
    roots: &[f64; 3],
    pattern: SignPattern,
    v_inv: &Matrix3<f64>,
) -> Option<RowVector3<f64>> {
    let signs = pattern.signs();
    if (0..3).any(|k| signs[k] < 0.0 && roots[k] == 0.0) {
        return None;
    }
    // C1 V[:,k] = -2 x(s_{k+2}); the pattern carries the sign of x.
    let target = RowVector3::new(
        -signs[0] * roots[0],
        -signs[1] * roots[1],
        -signs[2] * roots[2],
    );
    Some(target * v_inv)
}

/// Every distinct candidate mixing matrix for the given unknowns, in sign-pattern order.
pub fn c1_row_candidates(
    unknowns: &UnknownDistances,
    fact: &Factorization,
    ranges: &RangeMatrix,
    s3: &[f64],
    s21: f64,
    c2: &RowVector3<f64>,
    c3: &RowVector3<f64>,
) -> Result<Vec<MixingMatrix>> {
    let _ = unknowns;
    if s3.len() < 4 || ranges.source_count() < 4 {
        return Err(Error::invalid("need at least four sources"));
    }
    let v_inv = leading_inverse(fact)?;
    let radicands = mixing_radicands(c2, &fact.v_leading(), ranges, s3, s21)?;
    let roots = radicands.map(f64::sqrt);
    Ok(SignPattern::ALL
        .iter()
        .filter_map(|&p| {
            c1_from(&roots, p, &v_inv).map(|c1| MixingMatrix {
                c: Matrix3::from_rows(&[c1, *c2, *c3]),
                sign_pattern: p,
            })
        })
        .collect())
}

fn mixing_inverse(c: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let scale = (0..3).map(|r| c.row(r).norm()).fold(0.0, f64::max);
    let det = c.determinant();
    if scale == 0.0 || det.is_nan() || det.abs() < MIXING_DET_FACTOR * scale.powi(3) {
        return None;
    }
    c.try_inverse()
}

/// Writes positions implied by `c` into the buffers. `cinv` must be `c^-1`.
fn place(
    c: &Matrix3<f64>,
    cinv: &Matrix3<f64>,
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    s1: &Point,
    sensors: &mut Vec<Point>,
    sources: &mut Vec<Point>,
) {
    sensors.clear();
    sensors.push(Point::zeros());
    for i in 0..u.nrows() {
        let row = RowVector3::new(u[(i, 0)], u[(i, 1)], u[(i, 2)]);
        sensors.push((row * cinv).transpose());
    }
    sources.clear();
    sources.push(*s1);
    for j in 0..v.ncols() {
        let col = Point::new(v[(0, j)], v[(1, j)], v[(2, j)]);
        sources.push(s1 - (c * col) * 0.5);
    }
}

fn range_residual(sensors: &[Point], sources: &[Point], ranges: &RangeMatrix) -> f64 {
    let mut sum = 0.0;
    for (i, r) in sensors.iter().enumerate() {
        for (j, s) in sources.iter().enumerate() {
            let e = ranges.get(i, j) - (r - s).norm();
            sum += e * e;
        }
    }
    sum.sqrt()
}

fn er_from(sensors: &[Point], sources: &[Point], ranges: &RangeMatrix) -> f64 {
    let d11 = ranges.squared(0, 0);
    let s1 = &sources[0];
    let sensor_term: f64 = sensors
        .iter()
        .enumerate()
        .skip(2)
        .map(|(i, r)| {
            let e = ranges.squared(i, 0) - d11 - r.dot(r) + 2.0 * r.dot(s1);
            e * e
        })
        .sum();
    let mut er = sensor_term.sqrt();
    if sources.len() >= 5 {
        let source_term: f64 = sources
            .iter()
            .enumerate()
            .skip(4)
            .map(|(j, s)| {
                let e = ranges.squared(0, j) - s.dot(s);
                e * e
            })
            .sum();
        er += source_term.sqrt();
    }
    er
}

/// Positions from a complete mixing matrix.
pub fn assemble_positions(
    mixing: &MixingMatrix,
    fact: &Factorization,
    s1: &Point,
    ranges: &RangeMatrix,
    unknowns: &UnknownDistances,
) -> Result<Solution> {
    let cinv = mixing_inverse(&mixing.c).ok_or(Error::SingularMixing)?;
    let mut sensors = Vec::with_capacity(ranges.sensor_count());
    let mut sources = Vec::with_capacity(ranges.source_count());
    place(&mixing.c, &cinv, fact.u(), fact.v(), s1, &mut sensors, &mut sources);
    let range_rms = range_residual(&sensors, &sources, ranges);
    let residual_er = er_from(&sensors, &sources, ranges);
    Ok(Solution {
        sensors,
        sources,
        unknowns: *unknowns,
        sign_pattern: mixing.sign_pattern,
        residual_er,
        range_rms,
    })
}

/// Residual of the equations left unused by the closed form:
/// `sqrt(sum_{i>=3} (d(i,1)^2 - d(1,1)^2 - |r_i|^2 + 2 r_i.s1)^2)` plus, when there are
/// five or more sources, `sqrt(sum_{j>=5} (d(1,j)^2 - |s_j|^2)^2)`.
pub fn residual_er(sol: &Solution, ranges: &RangeMatrix) -> f64 {
    er_from(&sol.sensors, &sol.sources, ranges)
}

/// Quantities that depend on `alpha` only.
#[derive(Debug, Clone)]
pub(crate) struct AlphaStage {
    pub alpha: f64,
    pub s3: Vec<f64>,
    pub s21: f64,
    pub c3: RowVector3<f64>,
    /// `C3 V13`, used for the per-axis radicand shortcut.
    c3v: RowVector3<f64>,
}

/// Reusable position buffers for the evaluation kernel.
#[derive(Debug, Default)]
pub(crate) struct Scratch {
    sensors: Vec<Point>,
    sources: Vec<Point>,
    best_sensors: Vec<Point>,
    best_sources: Vec<Point>,
}

/// Score of one candidate tuple under its best sign pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Scored {
    pub sign_pattern: SignPattern,
    pub residual_er: f64,
    pub range_rms: f64,
}

/// Everything about an instance that does not depend on the unknowns.
pub(crate) struct Reconstructor<'a> {
    ranges: &'a RangeMatrix,
    fact: &'a Factorization,
    v_leading: Matrix3<f64>,
    v_inv: Matrix3<f64>,
}

impl<'a> Reconstructor<'a> {
    pub fn new(ranges: &'a RangeMatrix, fact: &'a Factorization) -> Result<Self> {
        let (m, n) = (ranges.sensor_count(), ranges.source_count());
        if m < 4 || n < 4 {
            return Err(Error::invalid(format!(
                "solver needs M >= 4 and N >= 4, got {m}x{n}"
            )));
        }
        if fact.u().nrows() != m - 1 || fact.v().ncols() != n - 1 {
            return Err(Error::invalid("factorization does not match range matrix"));
        }
        Ok(Reconstructor {
            ranges,
            fact,
            v_leading: fact.v_leading(),
            v_inv: leading_inverse(fact)?,
        })
    }

    pub fn stage(&self, alpha: f64) -> Result<AlphaStage> {
        let s3 = third_coordinates(alpha, self.ranges)?;
        let s21 = lateral_from(s3[0], self.ranges)?;
        check_lateral(s21)?;
        let c3 = c3_row(alpha, self.fact)?;
        Ok(AlphaStage {
            alpha,
            s21,
            c3v: c3 * self.v_leading,
            c3,
            s3,
        })
    }

    /// Radicand `k` (0 for beta, 1 for gamma, 2 for eta) as a function of that
    /// distance alone. Equal to the full-chain radicand up to rounding.
    pub fn axis_radicand(&self, stage: &AlphaStage, k: usize, dist: f64) -> f64 {
        let j = k + 1;
        let d11 = self.ranges.squared(0, 0);
        let w = dist * dist - self.ranges.squared(0, j) + d11;
        let proj = (w - stage.s3[0] * stage.c3v[k]) / stage.s21;
        let lhs = proj - 2.0 * stage.s21;
        4.0 * (self.ranges.squared(0, j) - stage.s3[j] * stage.s3[j]) - lhs * lhs
    }

    pub fn radicand_tolerance(&self) -> f64 {
        radicand_tolerance(self.ranges)
    }

    /// Full closed-form chain for one tuple; on success the winning positions are left
    /// in `scratch.best_*`.
    pub fn evaluate(
        &self,
        stage: &AlphaStage,
        unknowns: &UnknownDistances,
        scratch: &mut Scratch,
    ) -> Result<Scored> {
        let s31 = stage.s3[0];
        let c2 = c2_from(
            distance_terms(unknowns, self.ranges),
            &self.v_inv,
            stage.s21,
            s31,
            &stage.c3,
        );
        let radicands = mixing_radicands(&c2, &self.v_leading, self.ranges, &stage.s3, stage.s21)?;
        let roots = radicands.map(f64::sqrt);
        let s1 = Point::new(0.0, stage.s21, s31);

        let mut best: Option<(SignPattern, f64)> = None;
        for pattern in SignPattern::ALL {
            let Some(c1) = c1_from(&roots, pattern, &self.v_inv) else {
                continue;
            };
            let c = Matrix3::from_rows(&[c1, c2, stage.c3]);
            let Some(cinv) = mixing_inverse(&c) else {
                continue;
            };
            place(
                &c,
                &cinv,
                self.fact.u(),
                self.fact.v(),
                &s1,
                &mut scratch.sensors,
                &mut scratch.sources,
            );
            let rms = range_residual(&scratch.sensors, &scratch.sources, self.ranges);
            let better = match best {
                None => true,
                Some((_, current)) => rms < current - SIGN_TIE_TOLERANCE,
            };
            if better {
                best = Some((pattern, rms));
                std::mem::swap(&mut scratch.sensors, &mut scratch.best_sensors);
                std::mem::swap(&mut scratch.sources, &mut scratch.best_sources);
            }
        }
        let (sign_pattern, range_rms) = best.ok_or(Error::SingularMixing)?;
        Ok(Scored {
            sign_pattern,
            residual_er: er_from(&scratch.best_sensors, &scratch.best_sources, self.ranges),
            range_rms,
        })
    }

    pub fn solve(&self, unknowns: &UnknownDistances) -> Result<Solution> {
        let stage = self.stage(unknowns.alpha)?;
        let mut scratch = Scratch::default();
        let scored = self.evaluate(&stage, unknowns, &mut scratch)?;
        Ok(Solution {
            sensors: scratch.best_sensors,
            sources: scratch.best_sources,
            unknowns: *unknowns,
            sign_pattern: scored.sign_pattern,
            residual_er: scored.residual_er,
            range_rms: scored.range_rms,
        })
    }
}

/// Runs the whole chain for fixed unknowns and keeps the sign pattern that best
/// reproduces the measured ranges.
pub fn solve_given_unknowns(
    unknowns: &UnknownDistances,
    ranges: &RangeMatrix,
    fact: &Factorization,
) -> Result<Solution> {
    Reconstructor::new(ranges, fact)?.solve(unknowns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorize::factorize;
    use crate::scene::tests::scene_k;
    use crate::scene::{canonicalize, compute_ranges, generate_scene, NoiseConfig, Perturb};
    use crate::Scene;

    fn setup(scene: &Scene) -> (RangeMatrix, Factorization) {
        let ranges = compute_ranges(scene, 340.0).unwrap();
        let fact = factorize(&ranges).unwrap();
        (ranges, fact)
    }

    fn max_position_error(sol: &Solution, truth: &Scene) -> f64 {
        sol.sensors
            .iter()
            .zip(&truth.sensors)
            .chain(sol.sources.iter().zip(&truth.sources))
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    fn truth_pattern(truth: &Scene) -> SignPattern {
        let s = &truth.sources;
        SignPattern::from_x_signs(s[1].x, s[2].x, s[3].x)
    }

    #[test]
    fn third_coordinates_cases() {
        let r = RangeMatrix::new(DMatrix::from_row_slice(2, 2, &[0.7, 0.0, 0.7, 1.0]), 340.0).unwrap();
        let s3 = third_coordinates(1.0, &r).unwrap();
        assert!((s3[0] - 0.5).abs() < 1e-15);
        assert_eq!(s3[1], 0.0);
        assert!(third_coordinates(0.0, &r).is_err());
        assert!(third_coordinates(-1.0, &r).is_err());

        let (ranges, _) = setup(&scene_k());
        let s3 = third_coordinates(0.8, &ranges).unwrap();
        for (z, s) in s3.iter().zip(&scene_k().sources) {
            assert!((z - s.z).abs() < 1e-12);
        }
        assert!((s3[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn first_source_lateral_cases() {
        let (ranges, _) = setup(&scene_k());
        assert!((first_source_lateral(0.8, &ranges).unwrap() - 0.5).abs() < 1e-12);

        // d11 = 0.5, d21 = 0.5, alpha = 1: s31 = 0.5 = d11 exactly.
        let edge = RangeMatrix::new(DMatrix::from_row_slice(2, 1, &[0.5, 0.5]), 340.0).unwrap();
        assert_eq!(first_source_lateral(1.0, &edge).unwrap(), 0.0);

        // s31 = (4 + 0.25 - 0.25) / 4 = 1 > d11.
        assert!(matches!(
            first_source_lateral(2.0, &edge),
            Err(Error::Infeasible(InfeasibleCause::Lateral))
        ));
    }

    #[test]
    fn c3_row_cases() {
        let (_, fact) = setup(&scene_k());
        let c3 = c3_row(0.8, &fact).unwrap();
        let half = c3_row(1.6, &fact).unwrap();
        assert_eq!(half, c3 / 2.0);
        assert!(c3_row(0.0, &fact).is_err());

        let k = scene_k();
        let proj = c3 * fact.v_leading();
        for j in 0..3 {
            let expected = -2.0 * (k.sources[j + 1].z - k.sources[0].z);
            assert!((proj[j] - expected).abs() < 1e-10);
        }

        let zero = factorize(&RangeMatrix::new(DMatrix::zeros(4, 4), 340.0).unwrap()).unwrap();
        // U is an arbitrary basis here, but V vanishes and so does the projection.
        assert_eq!((c3_row(1.0, &zero).unwrap() * zero.v()).amax(), 0.0);
    }

    fn scene_k_unknowns() -> UnknownDistances {
        UnknownDistances::new(0.8, 0.57f64.sqrt(), 0.72f64.sqrt(), 0.24f64.sqrt()).unwrap()
    }

    #[test]
    fn scene_k_unknowns_match_geometry() {
        let u = scene_k().unknown_distances().unwrap();
        let expected = scene_k_unknowns();
        for (a, b) in u.as_array().iter().zip(expected.as_array()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn c2_row_cases() {
        let k = scene_k();
        let (ranges, fact) = setup(&k);
        let u = scene_k_unknowns();
        let c3 = c3_row(u.alpha, &fact).unwrap();
        let c2 = c2_row(&u, &fact, &ranges, 0.5, 0.4, &c3).unwrap();
        let proj = c2 * fact.v_leading();
        for j in 0..3 {
            let expected = -2.0 * (k.sources[j + 1].y - k.sources[0].y);
            assert!((proj[j] - expected).abs() < 1e-9, "{j}: {} vs {expected}", proj[j]);
        }

        assert!(matches!(
            c2_row(&u, &fact, &ranges, 0.0, 0.4, &c3),
            Err(Error::NearCollinearGauge(_))
        ));

        // Finite-difference continuity in beta.
        let h = 1e-3;
        let mut bumped = u;
        bumped.beta += h;
        let c2b = c2_row(&bumped, &fact, &ranges, 0.5, 0.4, &c3).unwrap();
        let mut half = u;
        half.beta += h / 2.0;
        let c2h = c2_row(&half, &fact, &ranges, 0.5, 0.4, &c3).unwrap();
        let full_step = (c2b - c2).norm();
        assert!(full_step > 0.0);
        // Linear in beta^2: halving the step roughly halves the change.
        assert!(((c2h - c2).norm() / full_step - 0.5).abs() < 1e-2);
        let slope = 2.0 * u.beta * fact.v_leading().try_inverse().unwrap().row(0).norm() / 0.5;
        assert!(full_step <= 1.01 * slope * h + 1e-12);
    }

    #[test]
    fn c1_candidates_include_truth() {
        let k = scene_k();
        let (ranges, fact) = setup(&k);
        let u = scene_k_unknowns();
        let s3 = third_coordinates(u.alpha, &ranges).unwrap();
        let s21 = first_source_lateral(u.alpha, &ranges).unwrap();
        let c3 = c3_row(u.alpha, &fact).unwrap();
        let c2 = c2_row(&u, &fact, &ranges, s21, s3[0], &c3).unwrap();
        let cands = c1_row_candidates(&u, &fact, &ranges, &s3, s21, &c2, &c3).unwrap();
        assert_eq!(cands.len(), 4);
        let expected: Vec<f64> = (1..4).map(|j| -2.0 * (k.sources[j].x - k.sources[0].x)).collect();
        let matching: Vec<_> = cands
            .iter()
            .filter(|m| {
                let proj = m.c.row(0) * fact.v_leading();
                (0..3).all(|j| (proj[j] - expected[j]).abs() < 1e-9)
            })
            .collect();
        assert_eq!(matching.len(), 1);
        assert_eq!(matching[0].sign_pattern, truth_pattern(&k));
    }

    #[test]
    fn zero_radicands_collapse_to_one_candidate() {
        let k = scene_k();
        let (ranges, fact) = setup(&k);
        let u = scene_k_unknowns();
        let s21 = 0.5;
        // s3_j = d(1,j) zeroes the first term; C2 V = 2 s21 zeroes the second.
        let s3: Vec<f64> = (0..4).map(|j| ranges.get(0, j)).collect();
        let c2 = RowVector3::new(2.0 * s21, 2.0 * s21, 2.0 * s21) * fact.v_leading().try_inverse().unwrap();
        let c3 = c3_row(u.alpha, &fact).unwrap();
        let cands = c1_row_candidates(&u, &fact, &ranges, &s3, s21, &c2, &c3).unwrap();
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].sign_pattern, SignPattern::PlusPlusPlus);
        assert!(cands[0].c.row(0).norm() < 1e-12);
    }

    #[test]
    fn oversized_beta_is_infeasible() {
        let (ranges, fact) = setup(&scene_k());
        let mut u = scene_k_unknowns();
        u.beta = 5.0;
        let s3 = third_coordinates(u.alpha, &ranges).unwrap();
        let c3 = c3_row(u.alpha, &fact).unwrap();
        let c2 = c2_row(&u, &fact, &ranges, 0.5, s3[0], &c3).unwrap();
        assert!(matches!(
            c1_row_candidates(&u, &fact, &ranges, &s3, 0.5, &c2, &c3),
            Err(Error::Infeasible(InfeasibleCause::MixingRadicand))
        ));
        assert!(matches!(
            solve_given_unknowns(&u, &ranges, &fact),
            Err(Error::Infeasible(InfeasibleCause::MixingRadicand))
        ));
    }

    #[test]
    fn assemble_recovers_scene_k() {
        let k = scene_k();
        let (ranges, fact) = setup(&k);
        let u = scene_k_unknowns();
        let s3 = third_coordinates(u.alpha, &ranges).unwrap();
        let s21 = first_source_lateral(u.alpha, &ranges).unwrap();
        let c3 = c3_row(u.alpha, &fact).unwrap();
        let c2 = c2_row(&u, &fact, &ranges, s21, s3[0], &c3).unwrap();
        let cands = c1_row_candidates(&u, &fact, &ranges, &s3, s21, &c2, &c3).unwrap();
        let right = cands.iter().find(|m| m.sign_pattern == truth_pattern(&k)).unwrap();
        let s1 = Point::new(0.0, s21, s3[0]);
        let sol = assemble_positions(right, &fact, &s1, &ranges, &u).unwrap();
        assert!(max_position_error(&sol, &k) < 1e-9);
        assert!(sol.sensors[1].x.abs() < 1e-9 && sol.sensors[1].y.abs() < 1e-9);
        assert!((sol.sensors[1].z - u.alpha).abs() < 1e-9);

        let singular = MixingMatrix {
            c: Matrix3::from_rows(&[c2, c2, c3]),
            sign_pattern: SignPattern::PlusPlusPlus,
        };
        assert!(matches!(
            assemble_positions(&singular, &fact, &s1, &ranges, &u),
            Err(Error::SingularMixing)
        ));
        let zero = MixingMatrix {
            c: Matrix3::zeros(),
            sign_pattern: SignPattern::PlusPlusPlus,
        };
        assert!(assemble_positions(&zero, &fact, &s1, &ranges, &u).is_err());
    }

    #[test]
    fn residual_er_cases() {
        let k = scene_k();
        let (ranges, fact) = setup(&k);
        let sol = solve_given_unknowns(&scene_k_unknowns(), &ranges, &fact).unwrap();
        assert!(sol.residual_er <= 1e-10);
        assert!(sol.range_rms <= 1e-10);

        // M = N = 4: the residual is sqrt(e3^2 + e4^2), nothing else.
        let mut moved = sol.clone();
        moved.sensors[2] += Point::new(0.1, 0.0, 0.0);
        let d11 = ranges.squared(0, 0);
        let manual = (2..4)
            .map(|i| {
                let r = moved.sensors[i];
                let s1 = moved.sources[0];
                (ranges.squared(i, 0) - d11 - r.dot(&r) + 2.0 * r.dot(&s1)).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        let er = residual_er(&moved, &ranges);
        assert!((er - manual).abs() < 1e-15);
        assert!(er > sol.residual_er);
    }

    #[test]
    fn solve_scene_k_exactly() {
        let k = scene_k();
        let (ranges, fact) = setup(&k);
        let sol = solve_given_unknowns(&scene_k_unknowns(), &ranges, &fact).unwrap();
        assert!(max_position_error(&sol, &k) <= 1e-9);
        assert_eq!(sol.sign_pattern, truth_pattern(&k));
        assert_eq!(sol.sensors[0], Point::zeros());
    }

    #[test]
    fn small_range_noise_gives_small_error() {
        let k = scene_k();
        let ranges = compute_ranges(&k, 340.0).unwrap().perturb(&NoiseConfig::new(1e-6, 2).unwrap());
        let fact = factorize(&ranges).unwrap();
        let sol = solve_given_unknowns(&scene_k_unknowns(), &ranges, &fact).unwrap();
        let em = crate::evaluate::em_error(&sol, &k).unwrap();
        assert!((1e-7..=1e-3).contains(&em), "EM {em}");
    }

    #[test]
    fn alpha_outside_bounds_does_worse() {
        let k = scene_k();
        let (ranges, fact) = setup(&k);
        let bounds = crate::search::distance_bounds(&ranges).unwrap();
        let truth = solve_given_unknowns(&scene_k_unknowns(), &ranges, &fact).unwrap();
        for alpha in [bounds.alpha.lo * 0.5, bounds.alpha.hi * 1.5] {
            let mut u = scene_k_unknowns();
            u.alpha = alpha;
            match solve_given_unknowns(&u, &ranges, &fact) {
                Err(_) => {}
                Ok(sol) => assert!(sol.residual_er > truth.residual_er),
            }
        }
    }

    #[test]
    fn sign_convention_of_factors_does_not_matter() {
        let (canon, _) = canonicalize(&generate_scene(6, 7, [1.0; 3], 5).unwrap()).unwrap();
        let (ranges, fact) = setup(&canon);
        let u = canon.unknown_distances().unwrap();
        for k in 0..3 {
            let flipped = fact.with_flipped_component(k);
            let sol = solve_given_unknowns(&u, &ranges, &flipped).unwrap();
            assert!(sol.residual_er <= 1e-9);
            assert!(max_position_error(&sol, &canon) <= 1e-9);
        }
    }

    #[test]
    fn too_few_sensors_rejected() {
        let s = generate_scene(3, 5, [1.0; 3], 1).unwrap();
        let ranges = compute_ranges(&s, 340.0).unwrap();
        let d = crate::factorize::build_relative_matrix(&ranges).unwrap();
        assert!(crate::factorize::rank3_factors(&d).is_err());
    }

    #[test]
    fn sign_pattern_display() {
        assert_eq!(SignPattern::PlusMinusPlus.to_string(), "+,-,+");
        assert_eq!(
            serde_json::to_string(&SignPattern::PlusPlusMinus).unwrap(),
            "\"+,+,-\""
        );
    }
}
