//! The `jsqd` command line: flag parsing, `--config` merging and dispatch.
//!
//! Every subcommand writes one artifact (CSV or JSON) to `--out`, or to
//! stdout when `--out` is absent, and a one-line summary to stderr.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::fluid::{buffer_gap_report, integrate_fluid, stationary_profile, BufferedProfile, FluidOpts};
use crate::mdp::{
    run_lln_experiment, run_mdp_experiment, DeviationEvent, Functional, InitialCondition, MdpConfig,
};
use crate::occupancy::{FiniteQVector, ModelParams};
use crate::path::PLPath;
use crate::rate::{
    convergence_study, family_trajectory, harmonic, rate_buffered, rate_i, rate_stationary, BufferedMode,
    Family, RateBreakdown, Reference,
};
use crate::report::{fmt_f64, write_atomic};
use crate::sim::{par_replicas, simulate_occupancy_ctmc, simulate_server_level, Recording, SimConfig};

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_D: u32 = 2;
pub const DEFAULT_T: f64 = 10.0;
pub const DEFAULT_DEPTH: usize = 24;

#[derive(Parser, Debug)]
#[command(name = "jsqd", version, about = "JSQ(d) simulation, fluid limits and rate functions")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Simulate the n-server system and record the occupancy trajectory.
    Simulate(SubArgs<SimulateArgs>),
    /// Integrate the fluid limit.
    Fluid(SubArgs<FluidArgs>),
    /// Stationary profile, buffered fixed point and the buffer gap table.
    Stationary(SubArgs<StationaryArgs>),
    /// Evaluate the rate function of a path read from JSON.
    Rate(SubArgs<RateArgs>),
    /// Buffered-rate convergence study over K for a test path family.
    ConvergeK(SubArgs<ConvergeArgs>),
    /// Monte Carlo deviation probabilities (or sup distances with --lln).
    Mdp(SubArgs<MdpArgs>),
}

#[derive(Args, Debug)]
struct SubArgs<T: Args> {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    args: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Start {
    Empty,
    Stationary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineKind {
    Server,
    Occupancy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FamilyArg {
    #[value(name = "A", alias = "a")]
    A,
    #[value(name = "B", alias = "b")]
    B,
    #[value(name = "C", alias = "c")]
    C,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::A => Family::A,
            FamilyArg::B => Family::B,
            FamilyArg::C => Family::C,
        }
    }
}

/// Merges flag values over `--config` values, field by field.
macro_rules! merge_fields {
    ($ty:ty { $($f:ident),* $(,)? }) => {
        impl $ty {
            fn merge(self, other: Self) -> Self {
                Self { $($f: self.$f.or(other.$f)),* }
            }
        }
    };
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct Common {
    /// Arrival rate per server, per unit time [default: 0.5]
    #[arg(long)]
    lambda: Option<f64>,
    /// Number of queues sampled per arrival [default: 2]
    #[arg(long)]
    d: Option<u32>,
    /// Buffer size K (jobs per server, including the one in service) [default: none]
    #[arg(long)]
    buffer: Option<u32>,
    /// Truncation depth J (levels stored) [default: 24]
    #[arg(long)]
    depth: Option<usize>,
    /// Random seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format [default: csv]
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Worker threads, 0 = one per core [default: 0]
    #[arg(long)]
    threads: Option<usize>,
    /// JSON file of flag values (keys are flag names); flags given on the command line win
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}
merge_fields!(Common { lambda, d, buffer, depth, seed, out, format, threads, config });

#[derive(Args, Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct SimulateArgs {
    /// Number of servers (required)
    #[arg(long)]
    n: Option<u64>,
    /// Horizon, model time units [default: 10]
    #[arg(long)]
    t_max: Option<f64>,
    /// Initial state [default: empty]
    #[arg(long, value_enum)]
    init: Option<Start>,
    /// Simulation engine [default: server]
    #[arg(long, value_enum)]
    engine: Option<EngineKind>,
    /// Recording grid spacing, model time units [default: t-max / 100]
    #[arg(long)]
    record_dt: Option<f64>,
    /// Independent replicas; above 1 the artifact holds one terminal state per replica [default: 1]
    #[arg(long)]
    replicas: Option<u64>,
}
merge_fields!(SimulateArgs { n, t_max, init, engine, record_dt, replicas });

#[derive(Args, Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct FluidArgs {
    /// Horizon, model time units [default: 10]
    #[arg(long)]
    t_max: Option<f64>,
    /// Initial state [default: empty]
    #[arg(long, value_enum)]
    init: Option<Start>,
    /// Output grid intervals [default: 1000]
    #[arg(long)]
    intervals: Option<usize>,
    /// Maximal RK4 step, model time units [default: 0.001]
    #[arg(long)]
    step: Option<f64>,
    /// Step-halving error tolerance [default: 1e-8]
    #[arg(long)]
    tolerance: Option<f64>,
}
merge_fields!(FluidArgs { t_max, init, intervals, step, tolerance });

#[derive(Args, Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct StationaryArgs {
    /// Emit the buffer gap table for K = 1..=gap-kmax instead of the profile
    #[arg(long)]
    gap_kmax: Option<usize>,
}
merge_fields!(StationaryArgs { gap_kmax });

#[derive(Args, Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct RateArgs {
    /// Path JSON (a serialized PLPath: T, grid_points, coords, values) (required)
    #[arg(long)]
    path: Option<PathBuf>,
    /// Reference fluid path JSON; the stationary profile when absent
    #[arg(long)]
    reference: Option<PathBuf>,
    /// With --buffer: rate against the buffered fixed point or the unbuffered profile [default: buffered]
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}
merge_fields!(RateArgs { path, reference, mode });

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Buffered,
    Truncated,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct ConvergeArgs {
    /// Test path family (required)
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    /// Largest buffer K [default: 10]
    #[arg(long)]
    kmax: Option<usize>,
    /// Horizon, model time units [default: 2]
    #[arg(long)]
    t_max: Option<f64>,
    /// Path grid intervals [default: 2000]
    #[arg(long)]
    intervals: Option<usize>,
}
merge_fields!(ConvergeArgs { family, kmax, t_max, intervals });

#[derive(Args, Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct MdpArgs {
    /// Comma-separated system sizes, strictly increasing [default: 500,2000,8000]
    #[arg(long, value_delimiter = ',')]
    n_list: Option<Vec<u64>>,
    /// Speed exponent, a(n) = n^-gamma, in (0, 0.5) [default: 0.3]
    #[arg(long)]
    gamma: Option<f64>,
    /// Replicas per n [default: 1000]
    #[arg(long)]
    replicas: Option<u64>,
    /// Tracked level j [default: 1]
    #[arg(long)]
    coordinate: Option<usize>,
    /// Event threshold delta on the a(n) sqrt(n) scale [default: 1]
    #[arg(long)]
    delta: Option<f64>,
    /// Deviation functional [default: sup]
    #[arg(long, value_enum)]
    functional: Option<FunctionalArg>,
    /// Horizon, model time units [default: 10]
    #[arg(long)]
    t_max: Option<f64>,
    /// Initial fluid state, rounded for each n [default: empty]
    #[arg(long, value_enum)]
    init: Option<Start>,
    /// Report sup-time l2 distances to the fluid path instead of event probabilities
    #[arg(long)]
    #[serde(skip)]
    lln: bool,
}

impl MdpArgs {
    fn merge(self, other: Self) -> Self {
        Self {
            n_list: self.n_list.or(other.n_list),
            gamma: self.gamma.or(other.gamma),
            replicas: self.replicas.or(other.replicas),
            coordinate: self.coordinate.or(other.coordinate),
            delta: self.delta.or(other.delta),
            functional: self.functional.or(other.functional),
            t_max: self.t_max.or(other.t_max),
            init: self.init.or(other.init),
            lln: self.lln,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FunctionalArg {
    Sup,
    Terminal,
}

/// A fully resolved and validated invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub params: ModelParams,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub threads: usize,
    pub job: Job,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Job {
    Simulate {
        n: u64,
        horizon: f64,
        init: Start,
        engine: EngineKind,
        record_dt: f64,
        replicas: u64,
    },
    Fluid {
        horizon: f64,
        init: Start,
        opts: FluidOpts,
    },
    Stationary {
        gap_kmax: Option<usize>,
    },
    Rate {
        path: PathBuf,
        reference: Option<PathBuf>,
        mode: BufferedMode,
    },
    ConvergeK {
        family: Family,
        kmax: usize,
        horizon: f64,
        intervals: usize,
    },
    Mdp {
        config: MdpConfig,
        lln: bool,
    },
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or values; exit status 2.
    Usage(String),
    /// `--help` and `--version`, or clap's own rendering of a usage error.
    Clap(clap::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Clap(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn load_config<T: for<'de> Deserialize<'de> + Default>(
    file: &Option<PathBuf>,
    sub: &str,
) -> Result<(Common, T), CliError> {
    let Some(file) = file else {
        return Ok((Common::default(), T::default()));
    };
    let text = std::fs::read_to_string(file).map_err(|e| usage(format!("--config {}: {e}", file.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("--config {}: {e}", file.display())))?;
    let obj = value
        .as_object()
        .ok_or_else(|| usage(format!("--config {}: expected a JSON object", file.display())))?;
    let cmd = Cli::command();
    let known: Vec<String> = cmd
        .find_subcommand(sub)
        .expect("subcommand exists")
        .get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string))
        .collect();
    if let Some(key) = obj.keys().find(|k| !known.contains(k) || *k == "config") {
        return Err(usage(format!("--config {}: unknown key {key:?}", file.display())));
    }
    let parse = |e: serde_json::Error| usage(format!("--config {}: {e}", file.display()));
    let common = serde_json::from_value(value.clone()).map_err(parse)?;
    let args = serde_json::from_value(value).map_err(parse)?;
    Ok((common, args))
}

fn resolve<T: for<'de> Deserialize<'de> + Default>(
    sub: &str,
    mut a: SubArgs<T>,
    merge: fn(T, T) -> T,
) -> Result<(Common, T), CliError>
where
    T: Args,
{
    let (file_common, file_args) = load_config::<T>(&a.common.config, sub)?;
    let config = a.common.config.take();
    let common = Common { config, ..a.common.merge(file_common) };
    Ok((common, merge(a.args, file_args)))
}

fn positive(flag: &str, x: f64) -> Result<f64, CliError> {
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(usage(format!("--{flag}: must be a positive number, got {x}")))
    }
}

fn require_subcritical(params: &ModelParams) -> Result<(), CliError> {
    if !(params.lambda < 1.0) {
        return Err(usage("--lambda: lambda must be < 1 for stationary-profile rates"));
    }
    Ok(())
}

/// Parses and validates an argument vector (including the program name).
pub fn parse_args<I, T>(argv: I) -> Result<CliConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = Cli::command().try_get_matches_from(argv).map_err(CliError::Clap)?;
    let cli = Cli::from_arg_matches(&matches).map_err(CliError::Clap)?;
    let (common, job) = match cli.command {
        Sub::Simulate(a) => {
            let (c, a) = resolve("simulate", a, SimulateArgs::merge)?;
            let horizon = positive("t-max", a.t_max.unwrap_or(DEFAULT_T))?;
            let n = a.n.ok_or_else(|| usage("--n: required for simulate"))?;
            let record_dt = positive("record-dt", a.record_dt.unwrap_or(horizon / 100.0))?;
            let replicas = a.replicas.unwrap_or(1);
            if replicas == 0 {
                return Err(usage("--replicas: must be at least 1"));
            }
            let job = Job::Simulate {
                n,
                horizon,
                init: a.init.unwrap_or(Start::Empty),
                engine: a.engine.unwrap_or(EngineKind::Server),
                record_dt,
                replicas,
            };
            (c, job)
        }
        Sub::Fluid(a) => {
            let (c, a) = resolve("fluid", a, FluidArgs::merge)?;
            let d = FluidOpts::default();
            let opts = FluidOpts {
                step: a.step.unwrap_or(d.step),
                tolerance: a.tolerance.unwrap_or(d.tolerance),
                intervals: a.intervals.unwrap_or(d.intervals),
            };
            opts.validate().map_err(|e| usage(e.to_string()))?;
            let job = Job::Fluid {
                horizon: positive("t-max", a.t_max.unwrap_or(DEFAULT_T))?,
                init: a.init.unwrap_or(Start::Empty),
                opts,
            };
            (c, job)
        }
        Sub::Stationary(a) => {
            let (c, a) = resolve("stationary", a, StationaryArgs::merge)?;
            (c, Job::Stationary { gap_kmax: a.gap_kmax })
        }
        Sub::Rate(a) => {
            let (c, a) = resolve("rate", a, RateArgs::merge)?;
            let path = a.path.ok_or_else(|| usage("--path: required for rate"))?;
            let mode = match a.mode.unwrap_or(ModeArg::Buffered) {
                ModeArg::Buffered => BufferedMode::Buffered,
                ModeArg::Truncated => BufferedMode::Truncated,
            };
            (c, Job::Rate { path, reference: a.reference, mode })
        }
        Sub::ConvergeK(a) => {
            let (c, a) = resolve("converge-k", a, ConvergeArgs::merge)?;
            let family = a.family.ok_or_else(|| usage("--family: required for converge-k"))?;
            let job = Job::ConvergeK {
                family: family.into(),
                kmax: a.kmax.unwrap_or(10),
                horizon: positive("t-max", a.t_max.unwrap_or(2.0))?,
                intervals: a.intervals.unwrap_or(2000).max(1),
            };
            (c, job)
        }
        Sub::Mdp(a) => {
            let (c, a) = resolve("mdp", a, MdpArgs::merge)?;
            let gamma = a.gamma.unwrap_or(0.3);
            if !(gamma > 0.0 && gamma < 0.5) {
                return Err(usage("--gamma: gamma must lie in (0, 0.5)"));
            }
            let config = MdpConfig {
                n_list: a.n_list.unwrap_or_else(|| vec![500, 2000, 8000]),
                gamma,
                replicas: a.replicas.unwrap_or(1000),
                event: DeviationEvent {
                    coordinate: a.coordinate.unwrap_or(1),
                    threshold: a.delta.unwrap_or(1.0),
                    functional: match a.functional.unwrap_or(FunctionalArg::Sup) {
                        FunctionalArg::Sup => Functional::Sup,
                        FunctionalArg::Terminal => Functional::Terminal,
                    },
                },
                params: ModelParams::new(DEFAULT_LAMBDA, DEFAULT_D),
                horizon: positive("t-max", a.t_max.unwrap_or(DEFAULT_T))?,
                seed: 0,
                init: match a.init.unwrap_or(Start::Empty) {
                    Start::Empty => InitialCondition::Empty,
                    Start::Stationary => InitialCondition::Stationary,
                },
            };
            (c, Job::Mdp { config, lln: a.lln })
        }
    };

    let mut params = ModelParams::new(common.lambda.unwrap_or(DEFAULT_LAMBDA), common.d.unwrap_or(DEFAULT_D))
        .with_depth(common.depth.unwrap_or(DEFAULT_DEPTH));
    if let Some(k) = common.buffer {
        params = params.with_buffer(k);
    }
    params.validate().map_err(|e| usage(e.to_string()))?;
    let seed = common.seed.unwrap_or(0);
    let mut job = job;
    match &mut job {
        Job::Stationary { .. } | Job::ConvergeK { .. } => require_subcritical(&params)?,
        Job::Rate { reference: None, .. } => require_subcritical(&params)?,
        Job::Fluid { init: Start::Stationary, .. } => require_subcritical(&params)?,
        Job::Simulate { init: Start::Stationary, .. } => require_subcritical(&params)?,
        Job::Mdp { config, lln } => {
            config.params = params.clone();
            config.seed = seed;
            if config.init == InitialCondition::Stationary {
                require_subcritical(&params)?;
            }
            config.validate().map_err(|e| usage(e.to_string()))?;
            if !*lln && config.replicas < crate::mdp::MIN_MDP_REPLICAS {
                return Err(usage(format!("--replicas: must be >= {}", crate::mdp::MIN_MDP_REPLICAS)));
            }
        }
        _ => {}
    }
    if let Job::Simulate { n, .. } = &job {
        if *n < params.d as u64 {
            return Err(usage("--n: must be at least d"));
        }
    }
    Ok(CliConfig {
        params,
        seed,
        out: common.out,
        format: common.format.unwrap_or(Format::Csv),
        threads: common.threads.unwrap_or(0),
        job,
    })
}

/// The artifact and a one-line summary.
pub struct Output {
    pub artifact: String,
    pub summary: String,
}

fn start_state(start: Start, params: &ModelParams) -> crate::Result<crate::QVector> {
    match start {
        Start::Empty => Ok(crate::QVector::empty(params.depth)),
        Start::Stationary => stationary_profile(params, params.depth),
    }
}

fn read_path(file: &Path) -> crate::Result<PLPath> {
    let text = std::fs::read_to_string(file).map_err(|source| Error::Io {
        path: file.display().to_string(),
        source,
    })?;
    let p: PLPath = serde_json::from_str(&text)?;
    p.validate()?;
    Ok(p)
}

fn to_json<T: Serialize>(x: &T) -> crate::Result<String> {
    let mut s = serde_json::to_string_pretty(x)?;
    s.push('\n');
    Ok(s)
}

fn csv_path(p: &PLPath, prefix: &str) -> String {
    let mut buf = Vec::new();
    p.write_csv(&mut buf, prefix).expect("writing to memory");
    String::from_utf8(buf).expect("utf8 csv")
}

fn rate_csv(r: &RateBreakdown) -> String {
    let mut s = String::from("j,term\n");
    for (j, t) in r.per_coordinate.iter().enumerate().skip(1) {
        s.push_str(&format!("{j},{}\n", fmt_f64(*t)));
    }
    s.push_str(&format!("total,{}\n", fmt_f64(r.total)));
    s
}

/// Runs a validated configuration and renders its artifact.
pub fn dispatch(config: &CliConfig) -> crate::Result<Output> {
    let params = &config.params;
    let json = config.format == Format::Json;
    match &config.job {
        Job::Simulate {
            n,
            horizon,
            init,
            engine,
            record_dt,
            replicas,
        } => {
            let q0 = start_state(*init, params)?;
            let base = SimConfig::new(*n, params.clone(), *horizon, config.seed)
                .with_init(FiniteQVector::round_from(&q0, *n))
                .with_record(Recording::Grid(*record_dt));
            let run = |c: &SimConfig| match engine {
                EngineKind::Server => simulate_server_level(c),
                EngineKind::Occupancy => simulate_occupancy_ctmc(c),
            };
            if *replicas == 1 {
                let traj = run(&base)?;
                let s = traj.summary();
                let summary = format!(
                    "simulate: n={n} T={horizon} arrivals={} departures={} drops={}",
                    s.events.arrivals, s.events.departures, s.events.drops
                );
                let artifact = if json {
                    to_json(&traj)?
                } else {
                    let mut buf = Vec::new();
                    traj.write_csv(&mut buf).expect("writing to memory");
                    String::from_utf8(buf).expect("utf8 csv")
                };
                return Ok(Output { artifact, summary });
            }
            let summaries = par_replicas(*replicas, |r| {
                let c = base.clone().with_stream(r).with_record(Recording::Terminal);
                run(&c).map(|t| t.summary())
            })
            .into_iter()
            .collect::<crate::Result<Vec<_>>>()?;
            let artifact = if json {
                to_json(&summaries)?
            } else {
                let mut s = String::from("replica,arrivals,departures,drops,max_length");
                for j in 1..=params.depth {
                    s.push_str(&format!(",Q{j}"));
                }
                s.push('\n');
                for (r, e) in summaries.iter().enumerate() {
                    s.push_str(&format!(
                        "{r},{},{},{},{}",
                        e.events.arrivals, e.events.departures, e.events.drops, e.max_length
                    ));
                    for j in 1..=params.depth {
                        s.push_str(&format!(",{}", fmt_f64(e.terminal.get(j))));
                    }
                    s.push('\n');
                }
                s
            };
            Ok(Output {
                artifact,
                summary: format!("simulate: n={n} T={horizon} replicas={replicas}"),
            })
        }
        Job::Fluid { horizon, init, opts } => {
            let q0 = start_state(*init, params)?;
            let sol = integrate_fluid(&q0, params, opts, *horizon)?;
            let summary = format!(
                "fluid: T={horizon} error estimate {:e}, closure residual {:e}",
                sol.error_estimate, sol.closure_residual
            );
            let artifact = if json { to_json(&sol.path)? } else { csv_path(&sol.path, "Q") };
            Ok(Output { artifact, summary })
        }
        Job::Stationary { gap_kmax: Some(kmax) } => {
            let report = buffer_gap_report(params, 1..=*kmax)?;
            let artifact = if json {
                to_json(&report)?
            } else {
                let mut s = String::from("K,e,ratio,constant,ordered,e_below\n");
                for r in &report.rows {
                    s.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        r.k,
                        fmt_f64(r.e),
                        fmt_f64(r.ratio),
                        fmt_f64(r.constant),
                        r.ordered as u8,
                        r.e_below as u8
                    ));
                }
                s
            };
            Ok(Output {
                artifact,
                summary: format!("stationary: gap table K=1..={kmax}, fitted C {}", fmt_f64(report.fitted_c)),
            })
        }
        Job::Stationary { gap_kmax: None } => {
            let profile = stationary_profile(params, params.depth)?;
            let buffered = match params.buffer {
                Some(k) => Some(BufferedProfile::new(params, k as usize)?),
                None => None,
            };
            let summary = match &buffered {
                Some(b) => format!("stationary: Q*_1({}) = {}", b.k, fmt_f64(b.value(1))),
                None => format!("stationary: Q*_1 = {}", fmt_f64(profile.get(1))),
            };
            let artifact = if json {
                #[derive(Serialize)]
                struct Profiles {
                    lambda: f64,
                    d: u32,
                    profile: Vec<f64>,
                    #[serde(skip_serializing_if = "Option::is_none")]
                    buffer: Option<u32>,
                    #[serde(skip_serializing_if = "Option::is_none")]
                    buffered: Option<Vec<f64>>,
                    #[serde(skip_serializing_if = "Option::is_none")]
                    e: Option<f64>,
                }
                to_json(&Profiles {
                    lambda: params.lambda,
                    d: params.d,
                    profile: profile.values().to_vec(),
                    buffer: params.buffer,
                    buffered: buffered.as_ref().map(|b| (0..=params.depth).map(|j| b.value(j)).collect()),
                    e: buffered.as_ref().map(|b| b.e()),
                })?
            } else {
                let mut s = String::from("j,Q_star");
                if buffered.is_some() {
                    s.push_str(",Q_star_K");
                }
                s.push('\n');
                for j in 1..=params.depth {
                    s.push_str(&format!("{j},{}", fmt_f64(profile.get(j))));
                    if let Some(b) = &buffered {
                        s.push_str(&format!(",{}", fmt_f64(b.value(j))));
                    }
                    s.push('\n');
                }
                s
            };
            Ok(Output { artifact, summary })
        }
        Job::Rate { path, reference, mode } => {
            let eta = read_path(path)?;
            let r = match (reference, params.buffer) {
                (Some(q), _) => rate_i(&eta, &read_path(q)?, params)?,
                (None, Some(k)) => rate_buffered(&eta, k as usize, params, *mode)?,
                (None, None) => rate_stationary(&eta, &Reference::stationary(params, eta.depth())?, params)?,
            };
            let summary = format!("rate: I = {}", fmt_f64(r.total));
            let artifact = if json { to_json(&r)? } else { rate_csv(&r) };
            Ok(Output { artifact, summary })
        }
        Job::ConvergeK {
            family,
            kmax,
            horizon,
            intervals,
        } => {
            let depth = params.depth;
            let q = family_trajectory(*family, &harmonic(depth), *horizon, params, depth, *intervals)?;
            let report = convergence_study(&q, *kmax, params)?;
            let artifact = if json { to_json(&report)? } else { report.to_csv() };
            Ok(Output {
                artifact,
                summary: format!("converge-k: family {family:?}, K=2..={kmax}; {}", report.notes.join("; ")),
            })
        }
        Job::Mdp { config: mdp, lln } => {
            let report = if *lln { run_lln_experiment(mdp)? } else { run_mdp_experiment(mdp)? };
            let artifact = if json { to_json(&report)? } else { report.to_csv() };
            Ok(Output {
                artifact,
                summary: format!("{}: {} rows; {}", report.experiment, report.rows.len(), report.notes.join("; ")),
            })
        }
    }
}

fn exit_status(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// Full command-line entry point; returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let config = match parse_args(argv) {
        Ok(c) => c,
        Err(CliError::Clap(e)) => {
            let _ = e.print();
            return e.exit_code();
        }
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(config.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: --threads: {e}");
            return 2;
        }
    };
    let result = pool.install(|| dispatch(&config)).and_then(|out| {
        match &config.out {
            Some(p) => write_atomic(p, out.artifact.as_bytes())?,
            None => print!("{}", out.artifact),
        }
        eprintln!("{}", out.summary);
        Ok(())
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_status(&e)
        }
    }
}
