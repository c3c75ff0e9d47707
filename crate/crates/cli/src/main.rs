use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use jssl::evaluate::TrialSeeds;
use jssl::search::{grid_search_with, PruneCounts};
use jssl::{
    canonicalize, compute_ranges, em_error, generate_scene, run_trials, BenchConfig, NoiseConfig,
    Perturb, RangeMatrix, ScenarioKind, ScenarioSpec, Scene, SearchConfig, SignPattern, Strategy,
    UnknownDistances, DEFAULT_SPEED_OF_SOUND,
};
use serde::Serialize;
use serde_json::json;

const EXIT_USAGE: u8 = 2;
const EXIT_NO_SOLUTION: u8 = 3;
const EXIT_DEGENERATE: u8 = 4;

#[derive(Parser)]
#[command(name = "jssl", version, about = "Joint sensor and source localization from TOA ranges")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random scene as JSON.
    Gen(GenArgs),
    /// Solve one instance from a scene or a range matrix.
    Solve(SolveArgs),
    /// Run a seeded Monte-Carlo sweep and write a CSV report.
    Bench(BenchArgs),
}

#[derive(Args, Serialize)]
struct GenArgs {
    #[arg(long)]
    sensors: usize,
    #[arg(long)]
    sources: usize,
    /// Room side lengths in meters, `a,b,c`.
    #[arg(long, value_parser = parse_room, default_value = "1,1,1")]
    room: [f64; 3],
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum StrategyArg {
    Auto,
    Exhaustive,
    #[value(alias = "coarse-to-fine")]
    Coarse,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Auto => Strategy::Auto,
            StrategyArg::Exhaustive => Strategy::Exhaustive,
            StrategyArg::Coarse => Strategy::CoarseToFine,
        }
    }
}

#[derive(Args, Serialize)]
struct SearchArgs {
    /// Final grid step, meters.
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    #[arg(long, value_enum, default_value = "auto")]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 1e-2)]
    coarse_step: f64,
    #[arg(long, default_value_t = 2)]
    refine_levels: usize,
    #[arg(long, default_value_t = 32)]
    top_k: usize,
    /// Evaluate candidates on a single thread.
    #[arg(long)]
    sequential: bool,
}

impl SearchArgs {
    fn config(&self) -> SearchConfig {
        SearchConfig {
            step: self.step,
            strategy: self.strategy.into(),
            coarse_step: self.coarse_step,
            refine_levels: self.refine_levels,
            top_k: self.top_k,
            parallel: !self.sequential,
        }
    }
}

#[derive(Args, Serialize)]
struct SolveArgs {
    /// Scene JSON; the truth is canonicalized and its ranges computed.
    #[arg(long, conflicts_with = "ranges", required_unless_present = "ranges")]
    scene: Option<PathBuf>,
    /// Headerless range CSV in meters, one row per sensor.
    #[arg(long)]
    ranges: Option<PathBuf>,
    #[arg(long, value_parser = parse_scenario)]
    scenario: ScenarioKind,
    /// Range noise standard deviation, meters.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Speed of sound, m/s.
    #[arg(long = "c", default_value_t = DEFAULT_SPEED_OF_SOUND)]
    speed_of_sound: f64,
    /// Known sensor 1 to sensor 2 distance (with --ranges).
    #[arg(long)]
    alpha: Option<f64>,
    /// Known source 1 to source 2 distance (with --ranges).
    #[arg(long)]
    beta: Option<f64>,
    /// Known source 1 to source 3 distance (with --ranges).
    #[arg(long)]
    gamma: Option<f64>,
    /// Known source 1 to source 4 distance (with --ranges).
    #[arg(long)]
    eta: Option<f64>,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    #[arg(long, value_parser = parse_scenario)]
    scenario: ScenarioKind,
    /// Sensor counts, `lo..hi` inclusive or a single value.
    #[arg(long, value_parser = parse_count_range, default_value = "4..10")]
    m: (usize, usize),
    /// Source counts, `lo..hi` inclusive or a single value.
    #[arg(long, value_parser = parse_count_range, default_value = "4..10")]
    n: (usize, usize),
    /// Only run cells with M == N.
    #[arg(long)]
    paired: bool,
    /// Comma-separated noise levels, meters.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    sigmas: Vec<f64>,
    #[arg(long, default_value_t = 30)]
    trials: usize,
    #[arg(long, value_parser = parse_room, default_value = "1,1,1")]
    room: [f64; 3],
    #[arg(long = "c", default_value_t = DEFAULT_SPEED_OF_SOUND)]
    speed_of_sound: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    search: SearchArgs,
    /// Fill in the mean_runtime_s column.
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_room(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [a, b, c] if parts.iter().all(|x| x.is_finite() && *x > 0.0) => Ok([a, b, c]),
        [_, _, _] => Err("room sides must be positive".into()),
        _ => Err(format!("expected three comma-separated sides, got {}", parts.len())),
    }
}

fn parse_scenario(s: &str) -> Result<ScenarioKind, String> {
    s.parse().map_err(|e: jssl::Error| e.to_string())
}

fn parse_count_range(s: &str) -> Result<(usize, usize), String> {
    let num = |p: &str| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}"));
    match s.split_once("..") {
        Some((lo, hi)) => Ok((num(lo)?, num(hi.trim_start_matches('='))?)),
        None => num(s).map(|v| (v, v)),
    }
}

/// A failure together with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<jssl::Error>() {
            Some(jssl::Error::InvalidArgument(_)) => EXIT_USAGE,
            Some(jssl::Error::NoSolution(_) | jssl::Error::EmptySearch(_)) => EXIT_NO_SOLUTION,
            Some(e) if e.is_degenerate_geometry() => EXIT_DEGENERATE,
            _ => 1,
        };
        Failure { code, error }
    }
}

impl From<jssl::Error> for Failure {
    fn from(e: jssl::Error) -> Self {
        anyhow::Error::new(e).into()
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: anyhow::anyhow!(msg.into()),
    }
}

fn write_output(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn write_manifest(
    out: &Path,
    command: &str,
    config: serde_json::Value,
    seed: u64,
    started: Instant,
) -> anyhow::Result<()> {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    let path = PathBuf::from(name);
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": config,
        "seed": seed,
        "started_unix_s": SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64() - started.elapsed().as_secs_f64())
            .unwrap_or(0.0),
        "wall_clock_s": started.elapsed().as_secs_f64(),
        "outputs": [out.display().to_string()],
    });
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen(args: &GenArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let scene = generate_scene(args.sensors, args.sources, args.room, args.seed)?;
    write_output(args.out.as_deref(), &(scene.to_json()? + "\n"))?;
    if let Some(out) = &args.out {
        write_manifest(out, "gen", serde_json::to_value(args).map_err(anyhow::Error::from)?, args.seed, started)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SolutionFile {
    sensors: Vec<[f64; 3]>,
    sources: Vec<[f64; 3]>,
    unknowns: UnknownDistances,
    sign_pattern: SignPattern,
    er: f64,
    range_rms_m: f64,
    em_m: Option<f64>,
    strategy: Strategy,
    evaluated: u64,
    pruned: PruneCounts,
}

fn cmd_solve(args: &SolveArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let c = args.speed_of_sound;
    let given = [args.alpha, args.beta, args.gamma, args.eta];

    let (clean, truth, known) = match (&args.scene, &args.ranges) {
        (Some(path), _) => {
            if given.iter().any(Option::is_some) {
                return Err(usage("--alpha/--beta/--gamma/--eta only apply with --ranges"));
            }
            let (truth, _) = canonicalize(&Scene::read(path)?)?;
            let clean = compute_ranges(&truth, c)?;
            let distances = truth.unknown_distances()?;
            (clean, Some(truth), Some(distances))
        }
        (None, Some(path)) => (RangeMatrix::read_csv_path(path, c)?, None, None),
        (None, None) => return Err(usage("one of --scene or --ranges is required")),
    };

    let seeds = TrialSeeds::new(args.seed, clean.sensor_count(), clean.source_count(), args.sigma, 0);
    let ranges = clean.perturb(&NoiseConfig::new(args.sigma, seeds.ranges)?);
    let spec = match known {
        Some(d) => {
            let noisy = d.perturb(&NoiseConfig::new(args.sigma, seeds.known)?);
            ScenarioSpec::from_distances(args.scenario, &noisy)?
        }
        None => ScenarioSpec::new(args.scenario, given).map_err(|e| {
            usage(format!(
                "{e}; without a scene, known distances must be passed as flags"
            ))
        })?,
    };

    let fact = jssl::factorize::factorize(&ranges)?;
    let result = grid_search_with(&ranges, &fact, &spec, &args.search.config())?;
    let em = truth
        .as_ref()
        .map(|t| em_error(&result.solution, t))
        .transpose()?;

    let sol = &result.solution;
    let file = SolutionFile {
        sensors: sol.sensors.iter().map(|p| [p.x, p.y, p.z]).collect(),
        sources: sol.sources.iter().map(|p| [p.x, p.y, p.z]).collect(),
        unknowns: sol.unknowns,
        sign_pattern: sol.sign_pattern,
        er: sol.residual_er,
        range_rms_m: sol.range_rms,
        em_m: em,
        strategy: result.strategy,
        evaluated: result.evaluated,
        pruned: result.pruned,
    };
    let text = serde_json::to_string_pretty(&file).map_err(anyhow::Error::from)? + "\n";
    write_output(args.out.as_deref(), &text)?;
    if let Some(out) = &args.out {
        write_manifest(out, "solve", serde_json::to_value(args).map_err(anyhow::Error::from)?, args.seed, started)?;
    }
    let em_text = em.map_or_else(|| "n/a".to_string(), |e| format!("{e:e}"));
    println!("EM={em_text} Er={:e} pruned={}", sol.residual_er, result.pruned);
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let config = BenchConfig {
        m_range: args.m,
        n_range: args.n,
        paired: args.paired,
        sigmas: args.sigmas.clone(),
        trials: args.trials,
        scenario: args.scenario,
        search: args.search.config(),
        room: args.room,
        speed_of_sound: args.speed_of_sound,
        base_seed: args.seed,
    };
    let report = run_trials(&config)?;
    write_output(args.out.as_deref(), &report.to_csv_string(args.timing)?)?;
    if let Some(out) = &args.out {
        let resolved = json!({ "bench": config, "timing": args.timing });
        write_manifest(out, "bench", resolved, args.seed, started)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        jssl::configure_threads(threads);
    }
    let outcome = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
