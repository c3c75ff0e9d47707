//! Synthetic scenes, the canonical coordinate gauge, range simulation and seeded noise.
//!
//! All randomness goes through [`ChaCha8Rng`] seeded from a `u64`, which produces the
//! same stream on every platform, so scenes and noisy ranges are reproducible from
//! their seed alone.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::reconstruct::UnknownDistances;
use crate::{Error, Point, Result};

/// Perpendicular distance of s1 from the r1-r2 line below which the gauge is undefined.
pub const COLLINEAR_TOLERANCE: f64 = 1e-9;

/// Ground-truth positions of `M` sensors and `N` sources, meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub sensors: Vec<Point>,
    pub sources: Vec<Point>,
    /// Room side lengths the scene was drawn in, if known.
    pub room: Option<[f64; 3]>,
}

/// On-disk layout of a scene. Field names are part of the file format.
#[derive(Debug, Serialize, Deserialize)]
struct SceneFile {
    sensors: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rooms_m: Option<[f64; 3]>,
    sources: Vec<[f64; 3]>,
}

impl Scene {
    pub fn new(sensors: Vec<Point>, sources: Vec<Point>) -> Result<Self> {
        let scene = Scene {
            sensors,
            sources,
            room: None,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn sensor_count(&self) -> usize {
        self.sensors.len()
    }

    pub fn source_count(&self) -> usize {
        self.sources.len()
    }

    fn validate(&self) -> Result<()> {
        let finite = self
            .sensors
            .iter()
            .chain(&self.sources)
            .all(|p| p.iter().all(|c| c.is_finite()));
        if !finite {
            return Err(Error::invalid("scene coordinates must be finite"));
        }
        Ok(())
    }

    /// The four distances the closed-form reconstruction is parameterized by.
    ///
    /// Requires at least 2 sensors and 4 sources.
    pub fn unknown_distances(&self) -> Result<UnknownDistances> {
        if self.sensors.len() < 2 || self.sources.len() < 4 {
            return Err(Error::invalid(
                "need at least 2 sensors and 4 sources for the four distances",
            ));
        }
        let s = &self.sources;
        Ok(UnknownDistances {
            alpha: (self.sensors[0] - self.sensors[1]).norm(),
            beta: (s[0] - s[1]).norm(),
            gamma: (s[0] - s[2]).norm(),
            eta: (s[0] - s[3]).norm(),
        })
    }

    /// Scene with every x coordinate negated.
    pub fn mirrored_x(&self) -> Scene {
        let flip = |p: &Point| Point::new(-p.x, p.y, p.z);
        Scene {
            sensors: self.sensors.iter().map(flip).collect(),
            sources: self.sources.iter().map(flip).collect(),
            room: self.room,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = SceneFile {
            sensors: self.sensors.iter().map(|p| [p.x, p.y, p.z]).collect(),
            rooms_m: self.room,
            sources: self.sources.iter().map(|p| [p.x, p.y, p.z]).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SceneFile = serde_json::from_str(text)?;
        let scene = Scene {
            sensors: file.sensors.iter().map(|c| Point::from(*c)).collect(),
            sources: file.sources.iter().map(|c| Point::from(*c)).collect(),
            room: file.rooms_m,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Rigid motion (plus optional x-mirror) taking a scene into the canonical gauge.
///
/// `apply(p) = F * rotation * (p + translation)` where `F = diag(-1, 1, 1)` when
/// `reflected`, identity otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct GaugeTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub reflected: bool,
}

impl GaugeTransform {
    pub fn identity() -> Self {
        GaugeTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            reflected: false,
        }
    }

    pub fn apply(&self, p: &Point) -> Point {
        let mut q = self.rotation * (p + self.translation);
        if self.reflected {
            q.x = -q.x;
        }
        q
    }

    /// Maps a canonical-gauge point back to the original frame.
    pub fn invert(&self, q: &Point) -> Point {
        let mut q = *q;
        if self.reflected {
            q.x = -q.x;
        }
        self.rotation.transpose() * q - self.translation
    }
}

/// Places `r1` at the origin, `r2` on the +z axis and `s1` in the x = 0 half-plane
/// with positive y. The remaining mirror freedom is fixed by requiring the x
/// coordinate of `s2` to be non-negative (ties fall through to `s3`, `s4`, then `r3`).
pub fn canonicalize(scene: &Scene) -> Result<(Scene, GaugeTransform)> {
    if scene.sensors.len() < 2 || scene.sources.is_empty() {
        return Err(Error::invalid(
            "canonicalize needs at least 2 sensors and 1 source",
        ));
    }
    let r1 = scene.sensors[0];
    let axis = scene.sensors[1] - r1;
    let axis_len = axis.norm();
    if axis_len <= 0.0 {
        return Err(Error::DegenerateGauge("r1 and r2 coincide".into()));
    }
    let ez = axis / axis_len;
    let rel = scene.sources[0] - r1;
    let lateral = rel - ez * rel.dot(&ez);
    let lateral_len = lateral.norm();
    if lateral_len < COLLINEAR_TOLERANCE {
        return Err(Error::DegenerateGauge(format!(
            "s1 lies on the r1-r2 line (offset {lateral_len:e} m)"
        )));
    }
    let ey = lateral / lateral_len;
    let ex = ey.cross(&ez);
    let rotation = Matrix3::from_rows(&[ex.transpose(), ey.transpose(), ez.transpose()]);

    let mut transform = GaugeTransform {
        rotation,
        translation: -r1,
        reflected: false,
    };
    let rotated: Vec<Point> = scene.sources.iter().map(|p| transform.apply(p)).collect();
    let tie_breakers = rotated
        .iter()
        .skip(1)
        .take(3)
        .chain(
            scene
                .sensors
                .get(2)
                .map(|r3| transform.apply(r3))
                .as_ref(),
        )
        .map(|p| p.x)
        .collect::<Vec<_>>();
    transform.reflected = tie_breakers
        .iter()
        .find(|x| x.abs() > 1e-12)
        .is_some_and(|x| *x < 0.0);

    let canonical = Scene {
        sensors: scene.sensors.iter().map(|p| transform.apply(p)).collect(),
        sources: scene.sources.iter().map(|p| transform.apply(p)).collect(),
        room: scene.room,
    };
    Ok((canonical, transform))
}

/// Draws every coordinate i.i.d. uniform on `[0, side]`; sensors first, then sources.
pub fn generate_scene(m: usize, n: usize, room: [f64; 3], seed: u64) -> Result<Scene> {
    if m == 0 || n == 0 {
        return Err(Error::invalid("need at least one sensor and one source"));
    }
    if room.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::invalid(format!(
            "room sides must be positive, got {room:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |count: usize| -> Vec<Point> {
        (0..count)
            .map(|_| {
                Point::new(
                    rng.random_range(0.0..=room[0]),
                    rng.random_range(0.0..=room[1]),
                    rng.random_range(0.0..=room[2]),
                )
            })
            .collect()
    };
    let sensors = draw(m);
    let sources = draw(n);
    Ok(Scene {
        sensors,
        sources,
        room: Some(room),
    })
}

/// `M x N` sensor-to-source ranges (meters) and the speed of sound that converts them
/// to times of arrival.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeMatrix {
    ranges: DMatrix<f64>,
    speed_of_sound: f64,
}

impl RangeMatrix {
    pub fn new(ranges: DMatrix<f64>, speed_of_sound: f64) -> Result<Self> {
        if !(speed_of_sound.is_finite() && speed_of_sound > 0.0) {
            return Err(Error::invalid(format!(
                "speed of sound must be positive, got {speed_of_sound}"
            )));
        }
        if ranges.iter().any(|d| !d.is_finite()) {
            return Err(Error::invalid("ranges must be finite"));
        }
        Ok(RangeMatrix {
            ranges,
            speed_of_sound,
        })
    }

    /// Builds ranges from times of arrival, `d = c * t`.
    pub fn from_toa(toa: &DMatrix<f64>, speed_of_sound: f64) -> Result<Self> {
        Self::new(toa * speed_of_sound, speed_of_sound)
    }

    pub fn toa(&self) -> DMatrix<f64> {
        &self.ranges / self.speed_of_sound
    }

    pub fn sensor_count(&self) -> usize {
        self.ranges.nrows()
    }

    pub fn source_count(&self) -> usize {
        self.ranges.ncols()
    }

    pub fn speed_of_sound(&self) -> f64 {
        self.speed_of_sound
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.ranges
    }

    /// Range between sensor `i` and source `j`, both zero-based.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.ranges[(i, j)]
    }

    #[inline]
    pub fn squared(&self, i: usize, j: usize) -> f64 {
        let d = self.ranges[(i, j)];
        d * d
    }

    /// Parses headerless CSV, one row per sensor, one column per source.
    pub fn read_csv<R: Read>(reader: R, speed_of_sound: f64) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let row = record
                .iter()
                .map(|field| {
                    field
                        .parse::<f64>()
                        .map_err(|e| Error::invalid(format!("bad range value {field:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if m == 0 || n == 0 {
            return Err(Error::invalid("empty range matrix"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Self::new(DMatrix::from_row_slice(m, n, &flat), speed_of_sound)
    }

    pub fn read_csv_path(path: impl AsRef<Path>, speed_of_sound: f64) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, speed_of_sound)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(writer);
        for i in 0..self.sensor_count() {
            wtr.write_record((0..self.source_count()).map(|j| format!("{:?}", self.get(i, j))))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn compute_ranges(scene: &Scene, speed_of_sound: f64) -> Result<RangeMatrix> {
    let m = scene.sensors.len();
    let n = scene.sources.len();
    let ranges = DMatrix::from_fn(m, n, |i, j| (scene.sensors[i] - scene.sources[j]).norm());
    RangeMatrix::new(ranges, speed_of_sound)
}

/// Additive zero-mean Gaussian noise with standard deviation `sigma` (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
        }
        Ok(NoiseConfig { sigma, seed })
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Values that can receive independent Gaussian perturbations per entry.
///
/// Noise is added, never clamped: a noisy range may come out negative.
pub trait Perturb: Sized + Clone {
    fn perturb(&self, noise: &NoiseConfig) -> Self;
}

impl Perturb for RangeMatrix {
    fn perturb(&self, noise: &NoiseConfig) -> Self {
        if noise.sigma == 0.0 {
            return self.clone();
        }
        let mut rng = noise.rng();
        let mut out = self.clone();
        // Row-major draw order, independent of the storage layout.
        for i in 0..out.sensor_count() {
            for j in 0..out.source_count() {
                let z: f64 = rng.sample(StandardNormal);
                out.ranges[(i, j)] += noise.sigma * z;
            }
        }
        out
    }
}

impl Perturb for UnknownDistances {
    fn perturb(&self, noise: &NoiseConfig) -> Self {
        if noise.sigma == 0.0 {
            return *self;
        }
        let mut rng = noise.rng();
        let mut next = || -> f64 { noise.sigma * rng.sample::<f64, _>(StandardNormal) };
        UnknownDistances {
            alpha: self.alpha + next(),
            beta: self.beta + next(),
            gamma: self.gamma + next(),
            eta: self.eta + next(),
        }
    }
}
