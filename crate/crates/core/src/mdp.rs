//! Monte Carlo experiments comparing the simulator with the fluid limit:
//! law-of-large-numbers distances and moderate-deviation event probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fluid::{integrate_fluid, stationary_profile, FluidOpts};
use crate::occupancy::{FiniteQVector, ModelParams, QVector};
use crate::path::PLPath;
use crate::report::{fmt_f64, inf_as_string};
use crate::sim::{drive, par_replicas, replica_rng, Event, Observer, OccupancyChain};
use crate::stats::{median, quantile, Wilson, Z95};

/// `a(n) = n^{-gamma}` for `gamma` in `(0, 1/2)`.
pub fn an_schedule(n: u64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok((n as f64).powf(-gamma))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 0.5) {
        return Err(Error::config("gamma must lie in (0, 0.5)"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialCondition {
    Empty,
    Stationary,
    Given(QVector),
}

impl InitialCondition {
    pub fn qvector(&self, params: &ModelParams) -> Result<QVector> {
        match self {
            InitialCondition::Empty => Ok(QVector::empty(params.depth)),
            InitialCondition::Stationary => stationary_profile(params, params.depth),
            InitialCondition::Given(q) => Ok(q.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Functional {
    /// `sup_t |Q^n_j(t) - Q_j(t)|`.
    Sup,
    /// `|Q^n_j(T) - Q_j(T)|`.
    Terminal,
}

/// The deviation event `a(n) sqrt(n) F(Q^n_j - Q_j) >= threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationEvent {
    pub coordinate: usize,
    pub threshold: f64,
    pub functional: Functional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpConfig {
    pub n_list: Vec<u64>,
    pub gamma: f64,
    pub replicas: u64,
    pub event: DeviationEvent,
    pub params: ModelParams,
    pub horizon: f64,
    pub seed: u64,
    pub init: InitialCondition,
}

/// Smallest replica count accepted by [`run_mdp_experiment`].
pub const MIN_MDP_REPLICAS: u64 = 100;

impl MdpConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        check_gamma(self.gamma)?;
        if self.n_list.is_empty() || self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("n_list must be nonempty and strictly increasing"));
        }
        if self.n_list[0] < self.params.d as u64 {
            return Err(Error::config("every n must be at least d"));
        }
        if self.replicas == 0 {
            return Err(Error::config("replicas must be positive"));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::config("horizon must be positive"));
        }
        let j = self.event.coordinate;
        if j < 1 || j > self.params.depth {
            return Err(Error::config(format!("event coordinate must lie in 1..={}", self.params.depth)));
        }
        if !(self.event.threshold >= 0.0) {
            return Err(Error::config("event threshold must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpRow {
    pub n: u64,
    pub a_n: f64,
    /// `a(n) sqrt(n)`.
    pub scale: f64,
    pub replicas: u64,
    pub successes: u64,
    pub p: f64,
    pub lower: f64,
    pub upper: f64,
    /// `a(n)^2 ln p`; `-inf` without successes.
    #[serde(with = "inf_as_string")]
    pub a2_log_p: f64,
    /// `a(n)^2 ln(upper)`.
    pub a2_log_upper: f64,
    /// No successes: only the upper bound is informative.
    pub rare: bool,
    /// Median and 90% quantile of `sqrt(n) F(Q^n_j - Q_j)`.
    pub fluct_q50: f64,
    pub fluct_q90: f64,
    /// The same quantiles at scale `a(n) sqrt(n)`.
    pub scaled_q50: f64,
    pub scaled_q90: f64,
    /// Median over replicas of `sup_t ||Q^n(t) - Q(t)||` over levels `1..=J`.
    pub median_sup_l2: f64,
}

impl MdpRow {
    pub fn wilson(&self) -> Wilson {
        Wilson {
            estimate: self.p,
            lower: self.lower,
            upper: self.upper,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpReport {
    pub experiment: String,
    pub gamma: f64,
    pub horizon: f64,
    pub event: DeviationEvent,
    pub rows: Vec<MdpRow>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl MdpReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "n,a_n,scale,replicas,successes,p,lower,upper,a2_log_p,a2_log_upper,rare,fluct_q50,fluct_q90,scaled_q50,scaled_q90,median_sup_l2\n",
        );
        for r in &self.rows {
            let cells = [
                r.n.to_string(),
                fmt_f64(r.a_n),
                fmt_f64(r.scale),
                r.replicas.to_string(),
                r.successes.to_string(),
                fmt_f64(r.p),
                fmt_f64(r.lower),
                fmt_f64(r.upper),
                fmt_f64(r.a2_log_p),
                fmt_f64(r.a2_log_upper),
                (r.rare as u8).to_string(),
                fmt_f64(r.fluct_q50),
                fmt_f64(r.fluct_q90),
                fmt_f64(r.scaled_q50),
                fmt_f64(r.scaled_q90),
                fmt_f64(r.median_sup_l2),
            ];
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn medians(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.median_sup_l2).collect()
    }
}

/// Exact supremum of the deviation from a piecewise-linear fluid path.
///
/// Between jumps the simulated state is constant and the fluid path is
/// affine between grid knots, so both `|.|` and the `l2` norm attain their
/// maxima at jump times or knots; those are the only points evaluated.
pub struct Deviation<'a> {
    fluid: &'a PLPath,
    inv_n: f64,
    coordinate: usize,
    track_l2: bool,
    next_knot: usize,
    pub sup_coordinate: f64,
    pub sup_l2: f64,
    pub terminal_coordinate: f64,
}

impl<'a> Deviation<'a> {
    pub fn new(fluid: &'a PLPath, n: u64, coordinate: usize, track_l2: bool) -> Self {
        Self {
            fluid,
            inv_n: 1.0 / n as f64,
            coordinate,
            track_l2,
            next_knot: 0,
            sup_coordinate: 0.0,
            sup_l2: 0.0,
            terminal_coordinate: 0.0,
        }
    }

    fn eval(&mut self, m: usize, s: f64, counts: &[u64]) {
        let c = |i: usize| counts.get(i).copied().unwrap_or(0) as f64 * self.inv_n;
        let j = self.coordinate;
        let dev = (c(j) - self.fluid.lerp(m, s, j)).abs();
        self.sup_coordinate = self.sup_coordinate.max(dev);
        if self.track_l2 {
            let sq: f64 = (1..=self.fluid.depth())
                .map(|i| (c(i) - self.fluid.lerp(m, s, i)).powi(2))
                .sum();
            self.sup_l2 = self.sup_l2.max(sq.sqrt());
        }
    }

    fn knots_before(&mut self, t: f64, counts: &[u64], inclusive: bool) {
        let last = self.fluid.intervals();
        while self.next_knot <= last {
            let tk = self.fluid.time(self.next_knot);
            if tk > t || (!inclusive && tk == t) {
                break;
            }
            let (m, s) = if self.next_knot == last { (last - 1, 1.0) } else { (self.next_knot, 0.0) };
            self.eval(m, s, counts);
            self.next_knot += 1;
        }
    }
}

impl Observer for Deviation<'_> {
    fn start(&mut self, counts: &[u64]) {
        self.eval(0, 0.0, counts);
        self.next_knot = 1;
    }

    fn before_jump(&mut self, t: f64, counts: &[u64]) {
        self.knots_before(t, counts, false);
        let (m, s) = self.fluid.locate(t);
        self.eval(m, s, counts);
    }

    fn after_jump(&mut self, t: f64, _event: Event, counts: &[u64]) {
        let (m, s) = self.fluid.locate(t);
        self.eval(m, s, counts);
    }

    fn finish(&mut self, horizon: f64, counts: &[u64]) {
        self.knots_before(horizon, counts, true);
        let j = self.coordinate;
        let last = self.fluid.intervals();
        let c = counts.get(j).copied().unwrap_or(0) as f64 * self.inv_n;
        self.terminal_coordinate = (c - self.fluid.lerp(last - 1, 1.0, j)).abs();
    }
}

/// Per-replica outcome.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Sample {
    functional: f64,
    sup_l2: f64,
}

fn fluid_reference(config: &MdpConfig) -> Result<(QVector, PLPath)> {
    let q0 = config.init.qvector(&config.params)?;
    let intervals = ((config.horizon / 0.01).ceil() as usize).max(10);
    let opts = FluidOpts {
        intervals,
        ..FluidOpts::default()
    };
    let fluid = integrate_fluid(&q0, &config.params, &opts, config.horizon)?;
    Ok((q0, fluid.path))
}

fn sample_n(config: &MdpConfig, n_index: usize, q0: &QVector, fluid: &PLPath, track_l2: bool) -> Vec<Sample> {
    let n = config.n_list[n_index];
    let init = FiniteQVector::round_from(q0, n);
    let stream_base = (n_index as u64) << 40;
    par_replicas(config.replicas, |r| {
        let mut chain = OccupancyChain::new(&init, &config.params);
        let mut rng = replica_rng(config.seed, stream_base | r);
        let mut dev = Deviation::new(fluid, n, config.event.coordinate, track_l2);
        drive(&mut chain, &mut rng, config.horizon, &mut dev);
        Sample {
            functional: match config.event.functional {
                Functional::Sup => dev.sup_coordinate,
                Functional::Terminal => dev.terminal_coordinate,
            },
            sup_l2: dev.sup_l2,
        }
    })
}

fn summarize(config: &MdpConfig, n: u64, samples: &[Sample]) -> MdpRow {
    let a_n = (n as f64).powf(-config.gamma);
    let sqrt_n = (n as f64).sqrt();
    let scale = a_n * sqrt_n;
    let successes = samples
        .iter()
        .filter(|s| scale * s.functional >= config.event.threshold)
        .count() as u64;
    let w = Wilson::new(successes, config.replicas, Z95);
    let a2 = a_n * a_n;
    let fluct: Vec<f64> = samples.iter().map(|s| sqrt_n * s.functional).collect();
    let l2: Vec<f64> = samples.iter().map(|s| s.sup_l2).collect();
    MdpRow {
        n,
        a_n,
        scale,
        replicas: config.replicas,
        successes,
        p: w.estimate,
        lower: w.lower,
        upper: w.upper,
        a2_log_p: a2 * w.estimate.ln(),
        a2_log_upper: a2 * w.upper.ln(),
        rare: successes == 0,
        fluct_q50: median(&fluct),
        fluct_q90: quantile(&fluct, 0.9),
        scaled_q50: a_n * median(&fluct),
        scaled_q90: a_n * quantile(&fluct, 0.9),
        median_sup_l2: median(&l2),
    }
}

fn run(config: &MdpConfig, experiment: &str, track_l2: bool) -> Result<MdpReport> {
    let (q0, fluid) = fluid_reference(config)?;
    let rows = config
        .n_list
        .iter()
        .enumerate()
        .map(|(i, &n)| summarize(config, n, &sample_n(config, i, &q0, &fluid, track_l2)))
        .collect();
    Ok(MdpReport {
        experiment: experiment.into(),
        gamma: config.gamma,
        horizon: config.horizon,
        event: config.event,
        rows,
        notes: Vec::new(),
    })
}

/// Sup-time `l2` distance between simulated and fluid paths, per `n`.
pub fn run_lln_experiment(config: &MdpConfig) -> Result<MdpReport> {
    config.validate()?;
    let mut report = run(config, "lln", true)?;
    let medians = report.medians();
    let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
    report.notes.push(format!(
        "median sup distance {} in n",
        if decreasing { "decreases" } else { "does not decrease" }
    ));
    if report.rows.len() >= 2 {
        let ns: Vec<f64> = report.rows.iter().map(|r| r.n as f64).collect();
        report.notes.push(format!("log-log slope {}", crate::stats::log_log_slope(&ns, &medians)));
    }
    Ok(report)
}

/// Estimates `p_n = P(a(n) sqrt(n) F(Q^n_j - Q_j) >= threshold)` per `n`.
pub fn run_mdp_experiment(config: &MdpConfig) -> Result<MdpReport> {
    config.validate()?;
    if config.replicas < MIN_MDP_REPLICAS {
        return Err(Error::config(format!("replicas must be >= {MIN_MDP_REPLICAS}")));
    }
    let mut report = run(config, "mdp", false)?;
    let rare: Vec<String> = report.rows.iter().filter(|r| r.rare).map(|r| r.n.to_string()).collect();
    if !rare.is_empty() {
        report.notes.push(format!("rare: no successes at n = {}", rare.join(", ")));
    }
    Ok(report)
}
