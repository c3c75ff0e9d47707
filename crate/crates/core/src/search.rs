//! Triangle-inequality bounds on the four distances and the bounded grid search over
//! whichever of them are unknown.
//!
//! Candidates are scored by the residual `Er` of the range equations the closed form
//! leaves unused. Pruning is separable: for a fixed `alpha`, feasibility of each of
//! `beta`, `gamma`, `eta` depends on that distance alone, so infeasible values are
//! dropped per axis before the Cartesian product is enumerated.
//!
//! Work is split into fixed-size chunks whose results are folded in order, so the
//! parallel and sequential paths return bit-identical results.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::factorize::{factorize, Factorization};
use crate::par;
use crate::reconstruct::{AlphaStage, Reconstructor, Scratch, Solution, UnknownDistances};
use crate::scene::RangeMatrix;
use crate::{Error, InfeasibleCause, Result};

/// Er gap under which two candidates are considered tied.
pub const ER_TIE_TOLERANCE: f64 = 1e-12;

/// Work items per parallel chunk. Fixed so chunking never depends on thread count.
const CHUNK: usize = 16;

const AXIS_NAMES: [&str; 4] = ["alpha", "beta", "gamma", "eta"];

/// Closed interval, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn is_inverted(&self) -> bool {
        self.lo > self.hi
    }
}

/// Triangle-inequality bounds for `alpha`, `beta`, `gamma`, `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub alpha: Interval,
    pub beta: Interval,
    pub gamma: Interval,
    pub eta: Interval,
}

impl Bounds {
    pub fn as_array(&self) -> [Interval; 4] {
        [self.alpha, self.beta, self.gamma, self.eta]
    }

    pub fn contains(&self, u: &UnknownDistances) -> bool {
        self.as_array()
            .iter()
            .zip(u.as_array())
            .all(|(b, x)| b.contains(x))
    }
}

fn pair_bound(pairs: impl Iterator<Item = (f64, f64)>) -> Interval {
    pairs.fold(
        Interval {
            lo: 0.0,
            hi: f64::INFINITY,
        },
        |acc, (a, b)| Interval {
            lo: acc.lo.max((a - b).abs()),
            hi: acc.hi.min(a + b),
        },
    )
}

/// `|r1 r2|` is bounded by every source's ranges to sensors 1 and 2; `|s1 s_k|` by
/// every sensor's ranges to sources 1 and k. Inverted bounds are returned as-is.
pub fn distance_bounds(ranges: &RangeMatrix) -> Result<Bounds> {
    let (m, n) = (ranges.sensor_count(), ranges.source_count());
    if m < 2 || n < 4 {
        return Err(Error::invalid(format!(
            "bounds need M >= 2 and N >= 4, got {m}x{n}"
        )));
    }
    let alpha = pair_bound((0..n).map(|j| (ranges.get(0, j), ranges.get(1, j))));
    let source = |k: usize| pair_bound((0..m).map(|i| (ranges.get(i, 0), ranges.get(i, k))));
    Ok(Bounds {
        alpha,
        beta: source(1),
        gamma: source(2),
        eta: source(3),
    })
}

/// Which of the four distances are known in advance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    /// All four known: the closed form is applied directly.
    AllKnown,
    /// An extra sensor sits on source 1, giving `beta`, `gamma`, `eta`.
    Colocated,
    /// `alpha` and `beta` known.
    TwoDistances,
    /// `alpha` known.
    OneSensorDistance,
    NoPrior,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::AllKnown,
        ScenarioKind::Colocated,
        ScenarioKind::TwoDistances,
        ScenarioKind::OneSensorDistance,
        ScenarioKind::NoPrior,
    ];

    /// Known flags in `(alpha, beta, gamma, eta)` order.
    pub fn known_mask(self) -> [bool; 4] {
        match self {
            ScenarioKind::AllKnown => [true; 4],
            ScenarioKind::Colocated => [false, true, true, true],
            ScenarioKind::TwoDistances => [true, true, false, false],
            ScenarioKind::OneSensorDistance => [true, false, false, false],
            ScenarioKind::NoPrior => [false; 4],
        }
    }

    pub fn known_count(self) -> usize {
        self.known_mask().iter().filter(|k| **k).count()
    }

    pub fn label(self) -> &'static str {
        match self {
            ScenarioKind::AllKnown => "all-known",
            ScenarioKind::Colocated => "colocated",
            ScenarioKind::TwoDistances => "two-distances",
            ScenarioKind::OneSensorDistance => "one-sensor-distance",
            ScenarioKind::NoPrior => "no-prior",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scenario {s:?}")))
    }
}

/// A scenario together with the values of its known distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// `(alpha, beta, gamma, eta)`; `Some` exactly where the scenario says known.
    pub known: [Option<f64>; 4],
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, known: [Option<f64>; 4]) -> Result<Self> {
        for ((value, expected), name) in known.iter().zip(kind.known_mask()).zip(AXIS_NAMES) {
            match (value, expected) {
                (Some(v), true) if v.is_finite() && *v > 0.0 => {}
                (Some(v), true) => {
                    return Err(Error::invalid(format!(
                        "known {name} must be positive, got {v}"
                    )))
                }
                (None, true) => {
                    return Err(Error::invalid(format!(
                        "scenario {kind} needs a value for {name}"
                    )))
                }
                (Some(_), false) => {
                    return Err(Error::invalid(format!(
                        "scenario {kind} does not take a value for {name}"
                    )))
                }
                (None, false) => {}
            }
        }
        Ok(ScenarioSpec { kind, known })
    }

    pub fn no_prior() -> Self {
        ScenarioSpec {
            kind: ScenarioKind::NoPrior,
            known: [None; 4],
        }
    }

    /// Takes the known values for `kind` from a full set of distances.
    pub fn from_distances(kind: ScenarioKind, distances: &UnknownDistances) -> Result<Self> {
        let values = distances.as_array();
        let mask = kind.known_mask();
        Self::new(kind, std::array::from_fn(|k| mask[k].then_some(values[k])))
    }

    pub fn unknown_count(&self) -> usize {
        4 - self.kind.known_count()
    }
}

/// Equation-counting check from rigidity: `MN >= 3(M + N) - 6 - k` with `k` known
/// distances, i.e. `(M - 3)(N - 3) >= 3 - k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FeasibilityReport {
    pub product: i64,
    pub required: i64,
    pub satisfied: bool,
    /// `M + N - 6`, the number of range equations left over for scoring.
    pub valid_equations: i64,
    pub searched_unknowns: usize,
}

pub fn classical_feasibility(m: usize, n: usize, scenario: ScenarioKind) -> FeasibilityReport {
    let (m, n) = (m as i64, n as i64);
    let product = (m - 3) * (n - 3);
    let required = 3 - scenario.known_count() as i64;
    FeasibilityReport {
        product,
        required,
        satisfied: product >= required,
        valid_equations: m + n - 6,
        searched_unknowns: 4 - scenario.known_count(),
    }
}

/// `(M, N)` pairs with `4 <= M, N <= max` that satisfy the counting condition while
/// neither `(M - 1, N)` nor `(M, N - 1)` does.
pub fn minimal_configurations(scenario: ScenarioKind, max: usize) -> Vec<(usize, usize)> {
    let ok = |m: usize, n: usize| classical_feasibility(m, n, scenario).satisfied;
    let mut out = Vec::new();
    for m in 4..=max {
        for n in 4..=max {
            if ok(m, n) && !ok(m - 1, n) && !ok(m, n - 1) {
                out.push((m, n));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Exhaustive for up to two unknowns, coarse-to-fine beyond.
    #[default]
    Auto,
    Exhaustive,
    CoarseToFine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Final grid spacing, meters.
    pub step: f64,
    pub strategy: Strategy,
    /// First-level spacing for coarse-to-fine, meters.
    pub coarse_step: f64,
    pub refine_levels: usize,
    /// Candidates kept between coarse-to-fine levels.
    pub top_k: usize,
    /// Use the worker pool when the `parallel` feature is enabled.
    pub parallel: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            step: 1e-3,
            strategy: Strategy::Auto,
            coarse_step: 1e-2,
            refine_levels: 2,
            top_k: 32,
            parallel: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::invalid("step must be positive"));
        }
        if !(self.coarse_step.is_finite() && self.coarse_step >= self.step) {
            return Err(Error::invalid("coarse_step must be >= step"));
        }
        if self.refine_levels < 1 {
            return Err(Error::invalid("refine_levels must be >= 1"));
        }
        if self.top_k < 1 {
            return Err(Error::invalid("top_k must be >= 1"));
        }
        Ok(())
    }

    /// Strategy actually used for a search over `unknowns` distances.
    pub fn resolved_strategy(&self, unknowns: usize) -> Strategy {
        match self.strategy {
            Strategy::Auto if unknowns <= 2 => Strategy::Exhaustive,
            Strategy::Auto => Strategy::CoarseToFine,
            s => s,
        }
    }

    /// Grid spacing of refinement level `level` (level 0 is the coarse pass).
    ///
    /// The spacing shrinks by `sqrt(coarse_step / step)` per level and bottoms out at
    /// `step`, so with the default two levels the last pass runs at `step`. The ladder
    /// does not depend on `refine_levels`, which makes a run with more levels a strict
    /// extension of one with fewer.
    pub fn level_step(&self, level: usize) -> f64 {
        let ratio = (self.coarse_step / self.step).sqrt();
        (self.coarse_step / ratio.powi(level as i32)).max(self.step)
    }
}

/// Candidates excluded per cause, counted in tuples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PruneCounts {
    /// No real lateral offset for `s1` at this `alpha`.
    pub lateral: u64,
    /// `s1` too close to the `r1`-`r2` axis at this `alpha`.
    pub collinear: u64,
    /// Negative radicand in the first mixing row.
    pub radicand: u64,
    /// Every sign pattern gave a singular mixing matrix.
    pub singular: u64,
}

impl PruneCounts {
    pub fn total(&self) -> u64 {
        self.lateral + self.collinear + self.radicand + self.singular
    }

    fn add(&mut self, other: &PruneCounts) {
        self.lateral += other.lateral;
        self.collinear += other.collinear;
        self.radicand += other.radicand;
        self.singular += other.singular;
    }

    /// Books `count` tuples against the cause of `err`. Anything that is not a
    /// per-candidate failure is handed back.
    fn record(&mut self, err: Error, count: u64) -> Result<()> {
        match err {
            Error::Infeasible(InfeasibleCause::Lateral) => self.lateral += count,
            Error::Infeasible(InfeasibleCause::MixingRadicand) => self.radicand += count,
            Error::NearCollinearGauge(_) => self.collinear += count,
            Error::SingularMixing => self.singular += count,
            other => return Err(other),
        }
        Ok(())
    }
}

impl fmt::Display for PruneCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "lateral={},collinear={},radicand={},singular={}",
            self.lateral, self.collinear, self.radicand, self.singular
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub solution: Solution,
    pub bounds: Bounds,
    pub strategy: Strategy,
    /// Tuples run through the full closed-form chain.
    pub evaluated: u64,
    pub pruned: PruneCounts,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    tuple: [f64; 4],
    er: f64,
}

fn tuple_cmp(a: &[f64; 4], b: &[f64; 4]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Strict total order used for the top-k pool.
fn rank_cmp(a: &Candidate, b: &Candidate) -> Ordering {
    a.er.total_cmp(&b.er).then_with(|| tuple_cmp(&a.tuple, &b.tuple))
}

/// Winner rule: lower Er, with Er within [`ER_TIE_TOLERANCE`] broken by the
/// lexicographically smaller tuple.
fn beats(a: &Candidate, b: &Candidate) -> bool {
    if (a.er - b.er).abs() <= ER_TIE_TOLERANCE {
        tuple_cmp(&a.tuple, &b.tuple).is_lt()
    } else {
        a.er < b.er
    }
}

#[derive(Debug, Default)]
struct Tally {
    best: Option<Candidate>,
    top: Vec<Candidate>,
    evaluated: u64,
    counts: PruneCounts,
}

impl Tally {
    fn offer(&mut self, c: Candidate, keep: usize) {
        match &self.best {
            Some(b) if !beats(&c, b) => {}
            _ => self.best = Some(c),
        }
        if keep == 0 {
            return;
        }
        if self.top.len() == keep && rank_cmp(&c, self.top.last().unwrap()).is_ge() {
            return;
        }
        if let Err(pos) = self.top.binary_search_by(|x| rank_cmp(x, &c)) {
            self.top.insert(pos, c);
            self.top.truncate(keep);
        }
    }

    fn merge(&mut self, other: Tally, keep: usize) {
        self.evaluated += other.evaluated;
        self.counts.add(&other.counts);
        if let Some(b) = other.best {
            match &self.best {
                Some(cur) if !beats(&b, cur) => {}
                _ => self.best = Some(b),
            }
        }
        for c in other.top {
            // `best` was already folded above; only the pool needs the entries.
            if keep > 0 {
                if self.top.len() == keep && rank_cmp(&c, self.top.last().unwrap()).is_ge() {
                    continue;
                }
                if let Err(pos) = self.top.binary_search_by(|x| rank_cmp(x, &c)) {
                    self.top.insert(pos, c);
                    self.top.truncate(keep);
                }
            }
        }
    }
}

/// Cartesian product of candidate values, one list per distance.
struct Product {
    axes: [Vec<f64>; 4],
}

/// Per-`alpha` state plus the per-axis values that survive radicand pruning.
struct StageEntry {
    stage: AlphaStage,
    feasible: [Vec<f64>; 3],
}

struct Kernel<'a> {
    recon: Reconstructor<'a>,
    parallel: bool,
}

impl Kernel<'_> {
    fn evaluate(&self, products: &[Product], keep: usize) -> Result<Tally> {
        let tol = self.recon.radicand_tolerance();
        let alpha_items: Vec<(usize, f64)> = products
            .iter()
            .enumerate()
            .flat_map(|(p, prod)| prod.axes[0].iter().map(move |a| (p, *a)))
            .collect();

        let staged = par::map_each(&alpha_items, self.parallel, |&(p, alpha)| {
            let prod = &products[p];
            let inner: u64 = prod.axes[1..].iter().map(|a| a.len() as u64).product();
            match self.recon.stage(alpha) {
                Err(e) => Err((e, inner)),
                Ok(stage) => {
                    let feasible: [Vec<f64>; 3] = std::array::from_fn(|k| {
                        prod.axes[k + 1]
                            .iter()
                            .copied()
                            .filter(|&x| self.recon.axis_radicand(&stage, k, x) >= -tol)
                            .collect()
                    });
                    let kept: u64 = feasible.iter().map(|f| f.len() as u64).product();
                    Ok((
                        StageEntry {
                            stage,
                            feasible,
                        },
                        inner - kept,
                    ))
                }
            }
        });

        let mut total = Tally::default();
        let mut entries = Vec::new();
        for item in staged {
            match item {
                Err((e, count)) => total.counts.record(e, count)?,
                Ok((entry, pruned)) => {
                    total.counts.radicand += pruned;
                    entries.push(entry);
                }
            }
        }

        let work: Vec<(usize, usize, usize)> = entries
            .iter()
            .enumerate()
            .flat_map(|(e, entry)| {
                let nb = entry.feasible[0].len();
                let ng = entry.feasible[1].len();
                (0..nb).flat_map(move |b| (0..ng).map(move |g| (e, b, g)))
            })
            .collect();

        let tallies = par::map_chunks(&work, CHUNK, self.parallel, |chunk| {
            let mut tally = Tally::default();
            let mut scratch = Scratch::default();
            for &(e, b, g) in chunk {
                let entry = &entries[e];
                let beta = entry.feasible[0][b];
                let gamma = entry.feasible[1][g];
                for &eta in &entry.feasible[2] {
                    let unknowns = UnknownDistances {
                        alpha: entry.stage.alpha,
                        beta,
                        gamma,
                        eta,
                    };
                    tally.evaluated += 1;
                    match self.recon.evaluate(&entry.stage, &unknowns, &mut scratch) {
                        Ok(scored) => tally.offer(
                            Candidate {
                                tuple: unknowns.as_array(),
                                er: scored.residual_er,
                            },
                            keep,
                        ),
                        Err(err) => tally.counts.record(err, 1)?,
                    }
                }
            }
            Ok::<_, Error>(tally)
        });

        for t in tallies {
            total.merge(t?, keep);
        }
        Ok(total)
    }
}

/// Inclusive grid `lo, lo + step, ...` whose last point is clamped to `hi`.
pub fn grid_points(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    if hi <= lo {
        return vec![lo];
    }
    let count = ((hi - lo) / step - 1e-9).ceil().max(0.0) as usize;
    (0..=count)
        .map(|k| (lo + k as f64 * step).min(hi))
        .collect()
}

fn neighborhood(center: f64, radius: f64, step: f64, bounds: &Interval) -> Vec<f64> {
    let half = (radius / step - 1e-9).ceil().max(1.0) as i64;
    let mut out: Vec<f64> = (-half..=half)
        .map(|i| (center + i as f64 * step).clamp(bounds.lo, bounds.hi))
        .collect();
    out.dedup();
    out
}

/// Bounded grid search over the unknown distances of `scenario`.
pub fn grid_search(
    ranges: &RangeMatrix,
    scenario: &ScenarioSpec,
    config: &SearchConfig,
) -> Result<SearchResult> {
    let fact = factorize(ranges)?;
    grid_search_with(ranges, &fact, scenario, config)
}

/// [`grid_search`] with a precomputed factorization.
pub fn grid_search_with(
    ranges: &RangeMatrix,
    fact: &Factorization,
    scenario: &ScenarioSpec,
    config: &SearchConfig,
) -> Result<SearchResult> {
    config.validate()?;
    let recon = Reconstructor::new(ranges, fact)?;
    let bounds = distance_bounds(ranges)?;
    let intervals = bounds.as_array();
    for k in 0..4 {
        if scenario.known[k].is_none() && intervals[k].is_inverted() {
            return Err(Error::EmptySearch(AXIS_NAMES[k]));
        }
    }

    let kernel = Kernel {
        recon,
        parallel: config.parallel,
    };
    let strategy = config.resolved_strategy(scenario.unknown_count());
    let axis = |k: usize, step: f64| -> Vec<f64> {
        match scenario.known[k] {
            Some(v) => vec![v],
            None => grid_points(intervals[k].lo, intervals[k].hi, step),
        }
    };

    let tally = match strategy {
        Strategy::CoarseToFine => {
            let coarse = Product {
                axes: std::array::from_fn(|k| axis(k, config.level_step(0))),
            };
            let mut tally = kernel.evaluate(&[coarse], config.top_k)?;
            for level in 1..=config.refine_levels {
                let radius = config.level_step(level - 1);
                let step = config.level_step(level);
                let products: Vec<Product> = tally
                    .top
                    .iter()
                    .map(|c| Product {
                        axes: std::array::from_fn(|k| match scenario.known[k] {
                            Some(v) => vec![v],
                            None => neighborhood(c.tuple[k], radius, step, &intervals[k]),
                        }),
                    })
                    .collect();
                let refined = kernel.evaluate(&products, config.top_k)?;
                tally.merge(refined, config.top_k);
            }
            tally
        }
        _ => {
            let full = Product {
                axes: std::array::from_fn(|k| axis(k, config.step)),
            };
            kernel.evaluate(&[full], 0)?
        }
    };

    let best = tally.best.ok_or(Error::NoSolution(tally.counts))?;
    let solution = kernel
        .recon
        .solve(&UnknownDistances::from_array(best.tuple))?;
    Ok(SearchResult {
        solution,
        bounds,
        strategy,
        evaluated: tally.evaluated,
        pruned: tally.counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reconstruct::solve_given_unknowns;
    use crate::scene::tests::scene_k;
    use crate::scene::{canonicalize, compute_ranges, generate_scene};
    use crate::Scene;
    use nalgebra::DMatrix;

    fn canon(m: usize, n: usize, seed: u64) -> Scene {
        canonicalize(&generate_scene(m, n, [1.0; 3], seed).unwrap()).unwrap().0
    }

    #[test]
    fn one_sensor_bound_is_single_triangle() {
        let r = RangeMatrix::new(DMatrix::from_row_slice(1, 4, &[0.3, 0.5, 0.2, 0.9]), 340.0).unwrap();
        let beta = pair_bound((0..1).map(|i| (r.get(i, 0), r.get(i, 1))));
        assert!((beta.lo - 0.2).abs() < 1e-15);
        assert!((beta.hi - 0.8).abs() < 1e-15);
    }

    #[test]
    fn scene_k_alpha_bounds() {
        let k = scene_k();
        let ranges = compute_ranges(&k, 340.0).unwrap();
        let b = distance_bounds(&ranges).unwrap();
        // Direct recomputation from coordinates.
        let (lo, hi) = (0..4).fold((0.0_f64, f64::INFINITY), |(lo, hi), j| {
            let d1 = (k.sensors[0] - k.sources[j]).norm();
            let d2 = (k.sensors[1] - k.sources[j]).norm();
            (lo.max((d1 - d2).abs()), hi.min(d1 + d2))
        });
        assert!((b.alpha.lo - lo).abs() < 1e-15 && (b.alpha.hi - hi).abs() < 1e-15);
        assert!((b.alpha.lo - 0.5657).abs() < 1e-4, "{}", b.alpha.lo);
        assert!((b.alpha.hi - 1.2806).abs() < 1e-4, "{}", b.alpha.hi);
        assert!(b.contains(&k.unknown_distances().unwrap()));
    }

    #[test]
    fn bounds_need_four_sources() {
        let r = RangeMatrix::new(DMatrix::from_element(3, 3, 1.0), 340.0).unwrap();
        assert!(distance_bounds(&r).is_err());
    }

    #[test]
    fn feasibility_table() {
        let r = classical_feasibility(4, 6, ScenarioKind::NoPrior);
        assert!(r.satisfied && r.product == 3);
        let r = classical_feasibility(4, 4, ScenarioKind::NoPrior);
        assert!(!r.satisfied);
        assert_eq!(r.valid_equations, 2);
        let r = classical_feasibility(5, 5, ScenarioKind::NoPrior);
        assert!(r.satisfied && r.product == 4);
        assert!(!classical_feasibility(4, 4, ScenarioKind::OneSensorDistance).satisfied);
        assert!(classical_feasibility(4, 5, ScenarioKind::OneSensorDistance).satisfied);
        assert_eq!(
            minimal_configurations(ScenarioKind::NoPrior, 10),
            vec![(4, 6), (5, 5), (6, 4)]
        );
    }

    #[test]
    fn grid_endpoints() {
        let g = grid_points(0.1, 0.35, 0.1);
        assert_eq!(g.len(), 4);
        assert_eq!(g[0], 0.1);
        assert_eq!(*g.last().unwrap(), 0.35);
        assert_eq!(grid_points(0.2, 0.2, 0.1), vec![0.2]);
        let g = grid_points(0.0, 1.0, 0.25);
        assert_eq!(g, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn scenario_validation() {
        assert!(ScenarioSpec::new(ScenarioKind::Colocated, [None, Some(1.0), Some(1.0), Some(1.0)]).is_ok());
        assert!(ScenarioSpec::new(ScenarioKind::Colocated, [Some(1.0), Some(1.0), Some(1.0), Some(1.0)]).is_err());
        assert!(ScenarioSpec::new(ScenarioKind::TwoDistances, [Some(1.0), None, None, None]).is_err());
        assert!(ScenarioSpec::new(ScenarioKind::OneSensorDistance, [Some(-1.0), None, None, None]).is_err());
        assert_eq!("no-prior".parse::<ScenarioKind>().unwrap(), ScenarioKind::NoPrior);
        assert!("nothing".parse::<ScenarioKind>().is_err());
    }

    #[test]
    fn all_known_is_a_single_evaluation() {
        let truth = canon(5, 6, 3);
        let ranges = compute_ranges(&truth, 340.0).unwrap();
        let spec = ScenarioSpec::from_distances(ScenarioKind::AllKnown, &truth.unknown_distances().unwrap()).unwrap();
        let res = grid_search(&ranges, &spec, &SearchConfig::default()).unwrap();
        assert_eq!(res.evaluated, 1);
        assert!(crate::evaluate::em_error(&res.solution, &truth).unwrap() <= 1e-9);
    }

    #[test]
    fn colocated_search_on_scene_k() {
        let k = scene_k();
        let ranges = compute_ranges(&k, 340.0).unwrap();
        let spec = ScenarioSpec::from_distances(ScenarioKind::Colocated, &k.unknown_distances().unwrap()).unwrap();
        let res = grid_search(&ranges, &spec, &SearchConfig::default()).unwrap();
        assert_eq!(res.strategy, Strategy::Exhaustive);
        let em = crate::evaluate::em_error(&res.solution, &k).unwrap();
        assert!(em <= 0.05, "EM {em}");
    }

    #[test]
    fn exhaustive_matches_independent_scan() {
        let truth = canon(5, 5, 12);
        let ranges = compute_ranges(&truth, 340.0).unwrap();
        let fact = factorize(&ranges).unwrap();
        let u = truth.unknown_distances().unwrap();
        let spec = ScenarioSpec::from_distances(ScenarioKind::Colocated, &u).unwrap();
        let config = SearchConfig {
            step: 2e-3,
            ..SearchConfig::default()
        };
        let res = grid_search(&ranges, &spec, &config).unwrap();

        let b = distance_bounds(&ranges).unwrap();
        let mut best = f64::INFINITY;
        for alpha in grid_points(b.alpha.lo, b.alpha.hi, config.step) {
            let cand = UnknownDistances { alpha, ..u };
            if let Ok(sol) = solve_given_unknowns(&cand, &ranges, &fact) {
                best = best.min(sol.residual_er);
            }
        }
        assert!((res.solution.residual_er - best).abs() <= 1e-12);
    }

    #[test]
    fn inverted_bounds_are_an_empty_search() {
        let truth = canon(4, 4, 2);
        let mut m = compute_ranges(&truth, 340.0).unwrap().matrix().clone();
        // Make |d11 - d21| exceed d13 + d23.
        m[(0, 0)] = 3.0;
        m[(1, 0)] = 0.1;
        let ranges = RangeMatrix::new(m, 340.0).unwrap();
        let err = grid_search(&ranges, &ScenarioSpec::no_prior(), &SearchConfig::default()).unwrap_err();
        assert!(matches!(err, Error::EmptySearch("alpha")));
    }

    #[test]
    fn level_ladder() {
        let c = SearchConfig::default();
        assert_eq!(c.level_step(0), 1e-2);
        assert!((c.level_step(1) - 10f64.powf(-2.5)).abs() < 1e-15);
        assert!((c.level_step(2) - 1e-3).abs() < 1e-15);
        assert_eq!(c.level_step(3), 1e-3);
    }

    #[test]
    fn config_validation() {
        let ok = SearchConfig::default();
        assert!(ok.validate().is_ok());
        assert!(SearchConfig { step: 0.0, ..ok }.validate().is_err());
        assert!(SearchConfig { coarse_step: 1e-4, ..ok }.validate().is_err());
        assert!(SearchConfig { refine_levels: 0, ..ok }.validate().is_err());
        assert!(SearchConfig { top_k: 0, ..ok }.validate().is_err());
    }

    #[test]
    fn top_k_pool_is_sorted_and_unique() {
        let mut t = Tally::default();
        for (i, er) in [0.5, 0.1, 0.3, 0.1, 0.2].iter().enumerate() {
            t.offer(Candidate { tuple: [i as f64; 4], er: *er }, 3);
        }
        t.offer(Candidate { tuple: [1.0; 4], er: 0.1 }, 3);
        let ers: Vec<f64> = t.top.iter().map(|c| c.er).collect();
        assert_eq!(ers, vec![0.1, 0.1, 0.2]);
        assert_eq!(t.best.unwrap().tuple, [1.0; 4]);
    }
}
