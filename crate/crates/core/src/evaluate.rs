//! Localization error and seeded Monte-Carlo sweeps.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::par;
use crate::reconstruct::Solution;
use crate::scene::{canonicalize, compute_ranges, generate_scene, NoiseConfig, Perturb, Scene};
use crate::search::{grid_search, ScenarioKind, ScenarioSpec, SearchConfig};
use crate::{Error, Point, Result, DEFAULT_SPEED_OF_SOUND};

/// Header of the CSV produced by [`BenchReport::write_csv`].
pub const CSV_HEADER: [&str; 10] = [
    "M",
    "N",
    "sigma",
    "scenario",
    "mean_em_m",
    "median_em_m",
    "failures",
    "trials",
    "mean_runtime_s",
    "seed",
];

fn mean_point_error(sensors: &[Point], sources: &[Point], truth: &Scene, flip: f64) -> f64 {
    let err = |est: &Point, tru: &Point| (Point::new(flip * est.x, est.y, est.z) - tru).norm();
    let total: f64 = sensors
        .iter()
        .zip(&truth.sensors)
        .chain(sources.iter().zip(&truth.sources))
        .map(|(e, t)| err(e, t))
        .sum();
    total / (sensors.len() + sources.len()) as f64
}

/// Mean per-point distance between an estimate and the canonical truth.
///
/// Ranges cannot tell a scene from its mirror image across `x = 0`, so the smaller of
/// the errors of the estimate and of its mirror is returned.
pub fn em_error(estimate: &Solution, truth: &Scene) -> Result<f64> {
    if estimate.sensors.len() != truth.sensors.len()
        || estimate.sources.len() != truth.sources.len()
    {
        return Err(Error::invalid(format!(
            "estimate is {}x{} but truth is {}x{}",
            estimate.sensors.len(),
            estimate.sources.len(),
            truth.sensors.len(),
            truth.sources.len()
        )));
    }
    let direct = mean_point_error(&estimate.sensors, &estimate.sources, truth, 1.0);
    let mirrored = mean_point_error(&estimate.sensors, &estimate.sources, truth, -1.0);
    Ok(direct.min(mirrored))
}

/// A Monte-Carlo sweep over sensor counts, source counts and noise levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Inclusive `(lo, hi)` sensor counts.
    pub m_range: (usize, usize),
    /// Inclusive `(lo, hi)` source counts.
    pub n_range: (usize, usize),
    /// Only run cells with `M == N`.
    pub paired: bool,
    /// Range noise standard deviations, meters.
    pub sigmas: Vec<f64>,
    pub trials: usize,
    pub scenario: ScenarioKind,
    pub search: SearchConfig,
    /// Room side lengths, meters.
    pub room: [f64; 3],
    pub speed_of_sound: f64,
    pub base_seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            m_range: (4, 10),
            n_range: (4, 10),
            paired: false,
            sigmas: vec![0.0],
            trials: 30,
            scenario: ScenarioKind::AllKnown,
            search: SearchConfig::default(),
            room: [1.0; 3],
            speed_of_sound: DEFAULT_SPEED_OF_SOUND,
            base_seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("M", self.m_range), ("N", self.n_range)] {
            if lo < 4 || lo > hi {
                return Err(Error::invalid(format!(
                    "{name} range must satisfy 4 <= lo <= hi, got {lo}..{hi}"
                )));
            }
        }
        if self.trials < 1 {
            return Err(Error::invalid("trials must be >= 1"));
        }
        if let Some(s) = self.sigmas.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::invalid(format!("sigma must be >= 0, got {s}")));
        }
        if self.sigmas.is_empty() {
            return Err(Error::invalid("at least one sigma is required"));
        }
        if !(self.speed_of_sound.is_finite() && self.speed_of_sound > 0.0) {
            return Err(Error::invalid("speed of sound must be positive"));
        }
        self.search.validate()
    }

    /// `(M, N)` cells in row order.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        let (m_lo, m_hi) = self.m_range;
        let (n_lo, n_hi) = self.n_range;
        (m_lo..=m_hi)
            .flat_map(|m| (n_lo..=n_hi).map(move |n| (m, n)))
            .filter(|(m, n)| !self.paired || m == n)
            .collect()
    }
}

/// Aggregate of the trials in one `(M, N, sigma)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub m: usize,
    pub n: usize,
    pub sigma: f64,
    pub scenario: ScenarioKind,
    /// Mean over successful trials; NaN when every trial failed.
    pub mean_em: f64,
    pub median_em: f64,
    pub failures: usize,
    pub trials: usize,
    pub mean_runtime_s: f64,
    pub seed: u64,
    /// EM of each successful trial, in trial order.
    pub ems: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// Writes one line per row under [`CSV_HEADER`]. Runtimes are only filled in when
    /// `timing` is set, so reruns with the same config are byte-identical by default.
    pub fn write_csv<W: Write>(&self, writer: W, timing: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.m.to_string(),
                r.n.to_string(),
                format!("{:?}", r.sigma),
                r.scenario.to_string(),
                format!("{:?}", r.mean_em),
                format!("{:?}", r.median_em),
                r.failures.to_string(),
                r.trials.to_string(),
                if timing {
                    format!("{:?}", r.mean_runtime_s)
                } else {
                    String::new()
                },
                r.seed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self, timing: bool) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, timing)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable hash of a word sequence.
fn mix(words: &[u64]) -> u64 {
    words.iter().fold(0, |h, w| splitmix64(h ^ w))
}

const SCENE_STREAM: u64 = 1;
const RANGE_STREAM: u64 = 2;
const KNOWN_STREAM: u64 = 3;

/// Seeds for one trial. The scene seed ignores sigma, so every noise level in a sweep
/// sees the same scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialSeeds {
    pub scene: u64,
    pub ranges: u64,
    pub known: u64,
}

impl TrialSeeds {
    pub fn new(base: u64, m: usize, n: usize, sigma: f64, trial: usize) -> Self {
        let (m, n, t, s) = (m as u64, n as u64, trial as u64, sigma.to_bits());
        TrialSeeds {
            scene: base ^ mix(&[SCENE_STREAM, m, n, t]),
            ranges: base ^ mix(&[RANGE_STREAM, m, n, s, t]),
            known: base ^ mix(&[KNOWN_STREAM, m, n, s, t]),
        }
    }
}

struct TrialOutcome {
    em: Option<f64>,
    runtime_s: f64,
}

fn run_trial(config: &BenchConfig, m: usize, n: usize, sigma: f64, trial: usize) -> TrialOutcome {
    let start = Instant::now();
    let em = solve_trial(config, m, n, sigma, trial).ok();
    TrialOutcome {
        em,
        runtime_s: start.elapsed().as_secs_f64(),
    }
}

fn solve_trial(config: &BenchConfig, m: usize, n: usize, sigma: f64, trial: usize) -> Result<f64> {
    let seeds = TrialSeeds::new(config.base_seed, m, n, sigma, trial);
    let scene = generate_scene(m, n, config.room, seeds.scene)?;
    let (truth, _) = canonicalize(&scene)?;
    let ranges = compute_ranges(&truth, config.speed_of_sound)?
        .perturb(&NoiseConfig::new(sigma, seeds.ranges)?);
    let known = truth
        .unknown_distances()?
        .perturb(&NoiseConfig::new(sigma, seeds.known)?);
    let spec = ScenarioSpec::from_distances(config.scenario, &known)?;
    let result = grid_search(&ranges, &spec, &config.search)?;
    em_error(&result.solution, &truth)
}

fn median(sorted: &[f64]) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    }
}

/// Runs every trial of every cell. Failed trials are counted per row and left out of
/// the EM statistics. Rows are sorted by `(M, N, sigma)`.
pub fn run_trials(config: &BenchConfig) -> Result<BenchReport> {
    config.validate()?;
    let mut sigmas = config.sigmas.clone();
    sigmas.sort_by(f64::total_cmp);
    sigmas.dedup();

    let cells: Vec<(usize, usize, f64)> = config
        .cells()
        .into_iter()
        .flat_map(|(m, n)| sigmas.iter().map(move |&s| (m, n, s)))
        .collect();
    let work: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..config.trials).map(move |t| (c, t)))
        .collect();
    let outcomes = par::map_each(&work, config.search.parallel, |&(c, t)| {
        let (m, n, s) = cells[c];
        run_trial(config, m, n, s, t)
    });

    let rows = cells
        .iter()
        .zip(outcomes.chunks(config.trials))
        .map(|(&(m, n, sigma), trials)| {
            let ems: Vec<f64> = trials.iter().filter_map(|o| o.em).collect();
            let mut sorted = ems.clone();
            sorted.sort_by(f64::total_cmp);
            let mean_em = if ems.is_empty() {
                f64::NAN
            } else {
                ems.iter().sum::<f64>() / ems.len() as f64
            };
            BenchRow {
                m,
                n,
                sigma,
                scenario: config.scenario,
                mean_em,
                median_em: median(&sorted),
                failures: trials.len() - ems.len(),
                trials: trials.len(),
                mean_runtime_s: trials.iter().map(|o| o.runtime_s).sum::<f64>()
                    / trials.len() as f64,
                seed: config.base_seed,
                ems,
            }
        })
        .collect();
    Ok(BenchReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reconstruct::{SignPattern, UnknownDistances};
    use crate::scene::tests::scene_k;

    fn as_solution(scene: &Scene) -> Solution {
        Solution {
            sensors: scene.sensors.clone(),
            sources: scene.sources.clone(),
            unknowns: UnknownDistances::from_array([1.0; 4]),
            sign_pattern: SignPattern::PlusPlusPlus,
            residual_er: 0.0,
            range_rms: 0.0,
        }
    }

    #[test]
    fn em_of_truth_is_zero() {
        let k = scene_k();
        assert_eq!(em_error(&as_solution(&k), &k).unwrap(), 0.0);
    }

    #[test]
    fn uniform_offset_gives_its_length() {
        let k = scene_k();
        let delta = Point::new(0.0, 0.1, 0.0);
        let mut est = as_solution(&k);
        est.sensors.iter_mut().chain(est.sources.iter_mut()).for_each(|p| *p += delta);
        assert!((em_error(&est, &k).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn mirror_scores_zero() {
        let k = scene_k();
        let est = as_solution(&k.mirrored_x());
        assert_eq!(em_error(&est, &k).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let k = scene_k();
        let mut est = as_solution(&k);
        est.sources.pop();
        assert!(matches!(em_error(&est, &k), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn seeds_share_scenes_across_sigma() {
        let a = TrialSeeds::new(5, 4, 6, 0.0, 2);
        let b = TrialSeeds::new(5, 4, 6, 1e-2, 2);
        assert_eq!(a.scene, b.scene);
        assert_ne!(a.ranges, b.ranges);
        assert_ne!(a.ranges, a.known);
        assert_ne!(a.scene, TrialSeeds::new(5, 4, 6, 0.0, 3).scene);
        assert_ne!(a.scene, TrialSeeds::new(5, 6, 4, 0.0, 2).scene);
    }

    #[test]
    fn splitmix_reference_value() {
        // First output of the reference generator seeded with 0.
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn median_cases() {
        assert!(median(&[]).is_nan());
        assert_eq!(median(&[1.0, 3.0, 7.0]), 3.0);
        assert_eq!(median(&[1.0, 3.0]), 2.0);
    }

    #[test]
    fn config_rejects_bad_input() {
        let ok = BenchConfig::default();
        assert!(ok.validate().is_ok());
        assert!(BenchConfig { trials: 0, ..ok.clone() }.validate().is_err());
        assert!(BenchConfig { m_range: (3, 5), ..ok.clone() }.validate().is_err());
        assert!(BenchConfig { n_range: (6, 5), ..ok.clone() }.validate().is_err());
        assert!(BenchConfig { sigmas: vec![-1.0], ..ok.clone() }.validate().is_err());
        assert!(BenchConfig { sigmas: vec![], ..ok }.validate().is_err());
    }

    #[test]
    fn paired_cells() {
        let c = BenchConfig {
            m_range: (4, 6),
            n_range: (4, 6),
            paired: true,
            ..BenchConfig::default()
        };
        assert_eq!(c.cells(), vec![(4, 4), (5, 5), (6, 6)]);
        assert_eq!(BenchConfig { paired: false, ..c }.cells().len(), 9);
    }

    #[test]
    fn all_known_sweep_is_exact_and_reproducible() {
        let config = BenchConfig {
            m_range: (4, 6),
            n_range: (4, 6),
            trials: 4,
            sigmas: vec![1e-4, 0.0],
            base_seed: 11,
            ..BenchConfig::default()
        };
        let a = run_trials(&config).unwrap();
        assert_eq!(a.rows.len(), 18);
        assert!(a.rows.windows(2).all(|w| (w[0].m, w[0].n, w[0].sigma) < (w[1].m, w[1].n, w[1].sigma)));
        for row in a.rows.iter().filter(|r| r.sigma == 0.0) {
            assert_eq!(row.failures, 0);
            assert!(row.mean_em <= 1e-9, "{row:?}");
        }
        let b = run_trials(&config).unwrap();
        assert_eq!(a.to_csv_string(false).unwrap(), b.to_csv_string(false).unwrap());
        let ems = |r: &BenchReport| r.rows.iter().map(|x| x.ems.clone()).collect::<Vec<_>>();
        assert_eq!(ems(&a), ems(&b));
    }

    #[test]
    fn all_known_error_is_scale_free() {
        for side in [1.0, 10.0] {
            let config = BenchConfig {
                m_range: (5, 5),
                n_range: (5, 5),
                trials: 5,
                room: [side; 3],
                ..BenchConfig::default()
            };
            let row = &run_trials(&config).unwrap().rows[0];
            assert!(row.mean_em <= 1e-9 * side, "side {side}: {}", row.mean_em);
        }
    }

    #[test]
    fn csv_layout() {
        let report = BenchReport {
            rows: vec![BenchRow {
                m: 4,
                n: 5,
                sigma: 1e-6,
                scenario: ScenarioKind::Colocated,
                mean_em: 0.25,
                median_em: 0.5,
                failures: 1,
                trials: 3,
                mean_runtime_s: 0.125,
                seed: 9,
                ems: vec![0.0, 0.5],
            }],
        };
        let text = report.to_csv_string(false).unwrap();
        assert_eq!(
            text,
            "M,N,sigma,scenario,mean_em_m,median_em_m,failures,trials,mean_runtime_s,seed\n\
             4,5,1e-6,colocated,0.25,0.5,1,3,,9\n"
        );
        assert!(report.to_csv_string(true).unwrap().contains(",0.125,9"));
    }
}
