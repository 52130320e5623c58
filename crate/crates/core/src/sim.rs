//! Exact simulation of the n-server JSQ(d) system.
//!
//! Two engines share one Gillespie driver: [`ServerSystem`] tracks every
//! queue and samples `d` servers per arrival, [`OccupancyChain`] evolves the
//! counts `N_i` directly with the routing probabilities. Both have the same
//! occupancy law.

use num_rational::BigRational;
use num_traits::{FromPrimitive, Zero};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::occupancy::{binom_ratio, binom_ratio_f64, routing_rate_finite, FiniteQVector, ModelParams, QVector};
use crate::path::PLPath;
use crate::report::fmt_f64;

/// Largest system [`arrival_routing_distribution`] will enumerate.
pub const MAX_ENUMERATION: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recording {
    /// Left-continuous snapshots on a uniform grid of the given spacing.
    Grid(f64),
    /// A snapshot after every event.
    AllEvents,
    /// Initial and terminal states only.
    Terminal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: u64,
    pub params: ModelParams,
    pub horizon: f64,
    pub init: FiniteQVector,
    pub seed: u64,
    /// Replica stream; runs with equal `(seed, stream)` are identical.
    #[serde(default)]
    pub stream: u64,
    pub record: Recording,
}

impl SimConfig {
    /// Empty start with grid recording at spacing `horizon / 100`.
    pub fn new(n: u64, params: ModelParams, horizon: f64, seed: u64) -> Self {
        let init = FiniteQVector::empty(n, params.depth);
        Self {
            n,
            params,
            horizon,
            init,
            seed,
            stream: 0,
            record: Recording::Grid(horizon / 100.0),
        }
    }

    pub fn with_init(mut self, init: FiniteQVector) -> Self {
        self.init = init;
        self
    }

    pub fn with_record(mut self, record: Recording) -> Self {
        self.record = record;
        self
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if (self.params.d as u64) > self.n {
            return Err(Error::config(format!("d = {} exceeds n = {}", self.params.d, self.n)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::config(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.init.n() != self.n {
            return Err(Error::config(format!(
                "initial state has n = {}, config has n = {}",
                self.init.n(),
                self.n
            )));
        }
        if let Some(k) = self.params.buffer {
            if self.init.count(k as usize + 1) > 0 {
                return Err(Error::config(format!("initial state has queues longer than the buffer {k}")));
            }
        }
        if let Recording::Grid(dt) = self.record {
            if !(dt > 0.0 && dt <= self.horizon) {
                return Err(Error::config(format!("recording step must lie in (0, horizon], got {dt}")));
            }
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        replica_rng(self.seed, self.stream)
    }
}

/// Independent generator for replica `stream` of a seeded experiment.
pub fn replica_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs `f` on replicas `0..replicas` in parallel and collects in index order.
pub fn par_replicas<T: Send>(replicas: u64, f: impl Fn(u64) -> T + Sync + Send) -> Vec<T> {
    (0..replicas).into_par_iter().map(f).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Event {
    /// An arrival joined a queue of length `level - 1`, incrementing `N_level`.
    Arrival { level: usize },
    /// An arrival found every sampled queue at the buffer and left.
    Drop,
    /// A service completion at a queue of length `level`, decrementing `N_level`.
    Departure { level: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub arrivals: u64,
    pub departures: u64,
    pub drops: u64,
}

impl EventCounts {
    fn tally(&mut self, event: Event) {
        match event {
            Event::Arrival { .. } => self.arrivals += 1,
            Event::Departure { .. } => self.departures += 1,
            Event::Drop => self.drops += 1,
        }
    }
}

/// A CTMC on occupancy counts driven by [`drive`].
pub trait Engine {
    /// Total event rate in the current state (dropped arrivals included).
    fn total_rate(&self) -> f64;
    fn fire<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Event;
    /// `N_0, N_1, ...`; always ends with a zero.
    fn counts(&self) -> &[u64];
}

/// Hooks called by [`drive`] around each jump.
pub trait Observer {
    fn start(&mut self, _counts: &[u64]) {}
    /// Left limit at a jump time.
    fn before_jump(&mut self, _t: f64, _counts: &[u64]) {}
    fn after_jump(&mut self, _t: f64, _event: Event, _counts: &[u64]) {}
    fn finish(&mut self, _horizon: f64, _counts: &[u64]) {}
}

impl Observer for () {}

/// Gillespie loop: exponential holding times at the total rate, then one jump.
pub fn drive<E: Engine, R: Rng + ?Sized, O: Observer>(engine: &mut E, rng: &mut R, horizon: f64, obs: &mut O) -> EventCounts {
    let mut counts = EventCounts::default();
    let mut t = 0.0;
    obs.start(engine.counts());
    loop {
        let rate = engine.total_rate();
        if rate <= 0.0 {
            break;
        }
        let u: f64 = rng.gen();
        t += -(-u).ln_1p() / rate;
        if t > horizon {
            break;
        }
        obs.before_jump(t, engine.counts());
        let event = engine.fire(rng);
        counts.tally(event);
        obs.after_jump(t, event, engine.counts());
    }
    obs.finish(horizon, engine.counts());
    counts
}

fn grow(counts: &mut Vec<u64>, level: usize) {
    if counts.len() <= level + 1 {
        counts.resize(level + 2, 0);
    }
}

/// Occupancy-level chain: `N_i -> N_i + 1` at rate `n lambda R_i`,
/// `N_i -> N_i - 1` at rate `N_i - N_{i+1}`.
#[derive(Clone, Debug)]
pub struct OccupancyChain {
    n: u64,
    lambda: f64,
    d: u32,
    buffer: Option<usize>,
    counts: Vec<u64>,
}

impl OccupancyChain {
    pub fn new(init: &FiniteQVector, params: &ModelParams) -> Self {
        let mut counts = init.counts().to_vec();
        while counts.len() > 2 && counts[counts.len() - 2] == 0 {
            counts.pop();
        }
        if *counts.last().unwrap() != 0 {
            counts.push(0);
        }
        Self {
            n: init.n(),
            lambda: params.lambda,
            d: params.d,
            buffer: params.buffer.map(|k| k as usize),
            counts,
        }
    }

    fn sampled_tail(&self, i: usize) -> f64 {
        binom_ratio_f64(self.counts.get(i).copied().unwrap_or(0), self.n, self.d)
    }

    /// Arrival probabilities by level (index 0 unused) and the drop probability,
    /// computed from the same quantities the sampler uses.
    pub fn arrival_distribution(&self) -> (Vec<f64>, f64) {
        let top = self.counts.len();
        let mut p = vec![0.0; top + 1];
        for (i, pi) in p.iter_mut().enumerate().skip(1) {
            *pi = self.sampled_tail(i - 1) - self.sampled_tail(i);
        }
        let mut drop = 0.0;
        if let Some(k) = self.buffer {
            drop = self.sampled_tail(k);
            for pi in p.iter_mut().skip(k + 1) {
                *pi = 0.0;
            }
        }
        (p, drop)
    }

    pub fn state(&self, depth: usize) -> FiniteQVector {
        snapshot(self.n, &self.counts, depth)
    }
}

impl Engine for OccupancyChain {
    fn total_rate(&self) -> f64 {
        self.n as f64 * self.lambda + self.counts[1] as f64
    }

    fn fire<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Event {
        let arrival_rate = self.n as f64 * self.lambda;
        if rng.gen::<f64>() * self.total_rate() < arrival_rate {
            // joins level m + 1 where m = #{i >= 1 : C(N_i, d)/C(n, d) > u}
            let u: f64 = rng.gen();
            let mut level = 1;
            while self.sampled_tail(level) > u {
                level += 1;
            }
            if self.buffer.is_some_and(|k| level > k) {
                return Event::Drop;
            }
            grow(&mut self.counts, level);
            self.counts[level] += 1;
            Event::Arrival { level }
        } else {
            // the busy server of rank v (longest first) has length #{i >= 1 : N_i > v}
            let v = rng.gen_range(0..self.counts[1]);
            let mut level = 1;
            while self.counts[level + 1] > v {
                level += 1;
            }
            self.counts[level] -= 1;
            Event::Departure { level }
        }
    }

    fn counts(&self) -> &[u64] {
        &self.counts
    }
}

/// Server-level system: explicit queue lengths, `d` distinct servers sampled
/// per arrival, uniform tie-break among the shortest sampled queues.
#[derive(Clone, Debug)]
pub struct ServerSystem {
    lambda: f64,
    d: usize,
    buffer: Option<u32>,
    lengths: Vec<u32>,
    busy: Vec<u32>,
    /// Position of each server in `busy`, `u32::MAX` when idle.
    slot: Vec<u32>,
    perm: Vec<u32>,
    counts: Vec<u64>,
}

impl ServerSystem {
    pub fn new(init: &FiniteQVector, params: &ModelParams) -> Self {
        Self::from_lengths(&init.to_lengths(), params)
    }

    pub fn from_lengths(lengths: &[u32], params: &ModelParams) -> Self {
        let n = lengths.len();
        let mut busy = Vec::new();
        let mut slot = vec![u32::MAX; n];
        let mut counts = vec![n as u64, 0];
        for (s, &l) in lengths.iter().enumerate() {
            if l > 0 {
                slot[s] = busy.len() as u32;
                busy.push(s as u32);
            }
            grow(&mut counts, l as usize);
            for c in counts.iter_mut().take(l as usize + 1).skip(1) {
                *c += 1;
            }
        }
        Self {
            lambda: params.lambda,
            d: params.d as usize,
            buffer: params.buffer,
            lengths: lengths.to_vec(),
            busy,
            slot,
            perm: (0..n as u32).collect(),
            counts,
        }
    }

    pub fn lengths(&self) -> &[u32] {
        &self.lengths
    }
}

impl Engine for ServerSystem {
    fn total_rate(&self) -> f64 {
        self.lengths.len() as f64 * self.lambda + self.busy.len() as f64
    }

    fn fire<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Event {
        let n = self.lengths.len();
        let arrival_rate = n as f64 * self.lambda;
        if rng.gen::<f64>() * self.total_rate() < arrival_rate {
            // partial Fisher-Yates: perm[..d] is a uniform d-subset
            for k in 0..self.d {
                let j = rng.gen_range(k..n);
                self.perm.swap(k, j);
            }
            let mut best = self.perm[0] as usize;
            let mut ties = 1u32;
            for &s in &self.perm[1..self.d] {
                let s = s as usize;
                if self.lengths[s] < self.lengths[best] {
                    best = s;
                    ties = 1;
                } else if self.lengths[s] == self.lengths[best] {
                    ties += 1;
                    if rng.gen_range(0..ties) == 0 {
                        best = s;
                    }
                }
            }
            if self.buffer.is_some_and(|k| self.lengths[best] >= k) {
                return Event::Drop;
            }
            let old = self.lengths[best];
            self.lengths[best] = old + 1;
            let level = old as usize + 1;
            grow(&mut self.counts, level);
            self.counts[level] += 1;
            if old == 0 {
                self.slot[best] = self.busy.len() as u32;
                self.busy.push(best as u32);
            }
            Event::Arrival { level }
        } else {
            let b = rng.gen_range(0..self.busy.len());
            let s = self.busy[b] as usize;
            let level = self.lengths[s] as usize;
            self.counts[level] -= 1;
            self.lengths[s] -= 1;
            if self.lengths[s] == 0 {
                let last = self.busy.pop().unwrap();
                if b < self.busy.len() {
                    self.busy[b] = last;
                    self.slot[last as usize] = b as u32;
                }
                self.slot[s] = u32::MAX;
            }
            Event::Departure { level }
        }
    }

    fn counts(&self) -> &[u64] {
        &self.counts
    }
}

fn snapshot(n: u64, counts: &[u64], depth: usize) -> FiniteQVector {
    let v = (0..=depth).map(|i| counts.get(i).copied().unwrap_or(0)).collect();
    FiniteQVector::new(n, v).expect("engine keeps counts monotone")
}

/// Simulated path of `N_0..N_J` (levels above the depth are not recorded).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub horizon: f64,
    pub times: Vec<f64>,
    pub states: Vec<FiniteQVector>,
    pub events: EventCounts,
    /// Longest queue reached during the run.
    pub max_length: usize,
}

impl Trajectory {
    pub fn terminal(&self) -> &FiniteQVector {
        self.states.last().expect("trajectory has an initial state")
    }

    /// Right-continuous state at time `t`.
    pub fn state_at(&self, t: f64) -> &FiniteQVector {
        let idx = self.times.partition_point(|&s| s <= t);
        &self.states[idx.saturating_sub(1)]
    }

    /// Scaled path on the recording grid; needs uniform grid recording.
    pub fn to_path(&self) -> Result<PLPath> {
        let values = self.states.iter().map(|s| s.to_qvector().into_values()).collect();
        let path = PLPath::new(self.horizon, values)?;
        let uniform = self
            .times
            .iter()
            .enumerate()
            .all(|(m, &t)| (t - path.time(m)).abs() <= 1e-9 * self.horizon);
        if !uniform {
            return Err(Error::Shape("trajectory was not recorded on a uniform grid".into()));
        }
        Ok(path)
    }

    /// CSV with header `t,Q1,...,QJ` and scaled values.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        let depth = self.states[0].depth();
        let mut header = String::from("t");
        for j in 1..=depth {
            header.push_str(&format!(",Q{j}"));
        }
        writeln!(w, "{header}")?;
        for (t, s) in self.times.iter().zip(&self.states) {
            let q = s.to_qvector();
            let mut line = fmt_f64(*t);
            for j in 1..=depth {
                line.push(',');
                line.push_str(&fmt_f64(q.get(j)));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn summary(&self) -> EventSummary {
        EventSummary {
            horizon: self.horizon,
            n: self.states[0].n(),
            events: self.events,
            max_length: self.max_length,
            terminal: self.terminal().to_qvector(),
        }
    }
}

/// Event-count summary emitted next to a trajectory CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSummary {
    pub horizon: f64,
    pub n: u64,
    #[serde(flatten)]
    pub events: EventCounts,
    pub max_length: usize,
    pub terminal: QVector,
}

struct Recorder {
    n: u64,
    depth: usize,
    mode: Recording,
    grid_step: f64,
    next_grid: usize,
    grid_points: usize,
    times: Vec<f64>,
    states: Vec<FiniteQVector>,
    max_length: usize,
}

impl Recorder {
    fn new(config: &SimConfig) -> Self {
        let (grid_step, grid_points) = match config.record {
            Recording::Grid(dt) => {
                let m = (config.horizon / dt).round().max(1.0) as usize;
                (config.horizon / m as f64, m + 1)
            }
            _ => (config.horizon, 2),
        };
        Self {
            n: config.n,
            depth: config.params.depth,
            mode: config.record,
            grid_step,
            next_grid: 0,
            grid_points,
            times: Vec::new(),
            states: Vec::new(),
            max_length: 0,
        }
    }

    fn push(&mut self, t: f64, counts: &[u64]) {
        self.times.push(t);
        self.states.push(snapshot(self.n, counts, self.depth));
    }

    fn fill_grid_before(&mut self, t: f64, counts: &[u64], inclusive: bool) {
        while self.next_grid < self.grid_points {
            let g = self.next_grid as f64 * self.grid_step;
            if g > t || (!inclusive && g == t) {
                break;
            }
            self.push(g, counts);
            self.next_grid += 1;
        }
    }

    fn longest(counts: &[u64]) -> usize {
        counts.iter().rposition(|&c| c > 0).unwrap_or(0)
    }
}

impl Observer for Recorder {
    fn start(&mut self, counts: &[u64]) {
        self.max_length = Self::longest(counts);
        self.push(0.0, counts);
        self.next_grid = 1;
    }

    fn before_jump(&mut self, t: f64, counts: &[u64]) {
        if let Recording::Grid(_) = self.mode {
            self.fill_grid_before(t, counts, false);
        }
    }

    fn after_jump(&mut self, t: f64, _event: Event, counts: &[u64]) {
        self.max_length = self.max_length.max(Self::longest(counts));
        if let Recording::AllEvents = self.mode {
            self.push(t, counts);
        }
    }

    fn finish(&mut self, horizon: f64, counts: &[u64]) {
        match self.mode {
            Recording::Grid(_) => {
                let last = self.grid_points - 1;
                while self.next_grid < last {
                    let g = self.next_grid as f64 * self.grid_step;
                    self.push(g, counts);
                    self.next_grid += 1;
                }
                self.push(horizon, counts);
            }
            Recording::AllEvents | Recording::Terminal => self.push(horizon, counts),
        }
    }
}

fn run<E: Engine>(mut engine: E, config: &SimConfig) -> Trajectory {
    let mut rng = config.rng();
    let mut rec = Recorder::new(config);
    let events = drive(&mut engine, &mut rng, config.horizon, &mut rec);
    Trajectory {
        horizon: config.horizon,
        times: rec.times,
        states: rec.states,
        events,
        max_length: rec.max_length,
    }
}

/// Simulates the system queue by queue.
pub fn simulate_server_level(config: &SimConfig) -> Result<Trajectory> {
    config.validate()?;
    Ok(run(ServerSystem::new(&config.init, &config.params), config))
}

/// Simulates the occupancy chain directly.
pub fn simulate_occupancy_ctmc(config: &SimConfig) -> Result<Trajectory> {
    config.validate()?;
    Ok(run(OccupancyChain::new(&config.init, &config.params), config))
}

/// Exact routing law of one arrival, by level, plus the drop mass.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDistribution {
    /// `levels[i]` is the probability of incrementing `N_i`; index 0 unused.
    pub levels: Vec<BigRational>,
    pub drop: BigRational,
}

impl RoutingDistribution {
    pub fn total(&self) -> BigRational {
        self.levels.iter().fold(self.drop.clone(), |acc, p| acc + p)
    }
}

/// Brute-force routing law: enumerates every `d`-subset of servers.
pub fn arrival_routing_distribution(lengths: &[u32], d: u32, buffer: Option<u32>) -> Result<RoutingDistribution> {
    let n = lengths.len();
    let d = d as usize;
    if n > MAX_ENUMERATION {
        return Err(Error::domain(format!(
            "refusing to enumerate subsets of {n} servers (limit {MAX_ENUMERATION})"
        )));
    }
    if d == 0 || d > n {
        return Err(Error::domain(format!("need 1 <= d <= n, got d = {d}, n = {n}")));
    }
    let top = *lengths.iter().max().unwrap_or(&0) as usize + 1;
    let mut hits = vec![0u64; top + 1];
    let mut drops = 0u64;
    let mut total = 0u64;
    let mut subset: Vec<usize> = (0..d).collect();
    loop {
        let shortest = subset.iter().map(|&s| lengths[s]).min().unwrap();
        if buffer.is_some_and(|k| shortest >= k) {
            drops += 1;
        } else {
            hits[shortest as usize + 1] += 1;
        }
        total += 1;
        // next combination in lexicographic order
        let Some(i) = (0..d).rev().find(|&i| subset[i] < n - d + i) else {
            break;
        };
        subset[i] += 1;
        for j in i + 1..d {
            subset[j] = subset[j - 1] + 1;
        }
    }
    let frac = |k: u64| BigRational::new(k.into(), total.into());
    Ok(RoutingDistribution {
        levels: hits.into_iter().map(frac).collect(),
        drop: frac(drops),
    })
}

/// Exact jump rates of the occupancy chain in state `q`.
#[derive(Clone, Debug, PartialEq)]
pub struct JumpRates {
    /// `up[i] = n lambda R^n_i(q)`; index 0 unused.
    pub up: Vec<BigRational>,
    /// `down[i] = n (q_i - q_{i+1})`; index 0 unused.
    pub down: Vec<BigRational>,
}

pub fn occupancy_jump_rates(q: &FiniteQVector, params: &ModelParams) -> Result<JumpRates> {
    let lambda = BigRational::from_f64(params.lambda).ok_or_else(|| Error::domain("lambda is not finite"))?;
    let n = BigRational::from_integer(q.n().into());
    let depth = q.depth();
    let mut up = vec![BigRational::zero(); depth + 2];
    let mut down = vec![BigRational::zero(); depth + 2];
    for i in 1..=depth + 1 {
        up[i] = &n * &lambda * routing_rate_finite(q, i, params)?;
        down[i] = BigRational::from_integer((q.count(i) - q.count(i + 1)).into());
    }
    Ok(JumpRates { up, down })
}

/// `C(N_i, d)/C(n, d)`, the chance that all `d` sampled queues hold `>= i` jobs.
pub fn sampled_tail_exact(q: &FiniteQVector, i: usize, d: u32) -> Result<BigRational> {
    binom_ratio(q.count(i), q.n(), d as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::One;

    fn rat(a: i64, b: i64) -> BigRational {
        BigRational::new(a.into(), b.into())
    }

    #[test]
    fn routing_oracle_examples() {
        let r = arrival_routing_distribution(&[2, 1, 0], 2, None).unwrap();
        assert_eq!(r.levels[1], rat(2, 3));
        assert_eq!(r.levels[2], rat(1, 3));
        assert!(r.levels[3].is_zero());
        let r = arrival_routing_distribution(&[3, 3, 3, 3], 2, None).unwrap();
        assert!(r.levels[4].is_one());
        let r = arrival_routing_distribution(&[2, 2, 0], 2, Some(2)).unwrap();
        assert_eq!(r.drop, rat(1, 3));
        assert!(r.total().is_one());
        assert!(arrival_routing_distribution(&[0; 26], 2, None).is_err());
    }

    #[test]
    fn chain_matches_routing_rates() {
        let params = ModelParams::new(0.5, 2).with_depth(6);
        let q = FiniteQVector::from_lengths(&[2, 1, 0], 6).unwrap();
        let chain = OccupancyChain::new(&q, &params);
        let (p, drop) = chain.arrival_distribution();
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-15 && (p[2] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(drop, 0.0);
        let rates = occupancy_jump_rates(&q, &params).unwrap();
        assert_eq!(rates.up[1], rat(1, 1));
        assert_eq!(rates.down[1], rat(1, 1));
        assert_eq!(rates.down[2], rat(1, 1));
    }

    #[test]
    fn full_buffer_only_departs() {
        let params = ModelParams::new(0.9, 2).with_buffer(2).with_depth(4);
        let init = FiniteQVector::all_length(20, 2, 4);
        let config = SimConfig::new(20, params, 1.0, 3)
            .with_init(init.clone())
            .with_record(Recording::AllEvents);
        let chain = OccupancyChain::new(&init, &config.params);
        let (p, drop) = chain.arrival_distribution();
        assert!(p.iter().all(|&x| x == 0.0));
        assert_eq!(drop, 1.0);
        for traj in [simulate_occupancy_ctmc(&config).unwrap(), simulate_server_level(&config).unwrap()] {
            assert!(traj.max_length <= 2);
            assert!(traj.events.drops > 0);
        }
    }

    #[test]
    fn all_events_moves_one_coordinate() {
        let params = ModelParams::new(0.7, 2).with_depth(10);
        let config = SimConfig::new(30, params, 5.0, 1).with_record(Recording::AllEvents);
        let traj = simulate_server_level(&config).unwrap();
        assert_eq!(traj.times[0], 0.0);
        for w in traj.states.windows(2).take(traj.states.len() - 2) {
            let diff: u64 = w[0].counts().iter().zip(w[1].counts()).map(|(a, b)| a.abs_diff(*b)).sum();
            assert_eq!(diff, 1);
        }
        assert_eq!(traj.events.drops, 0);
        assert!(traj.times.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn grid_recording_is_uniform() {
        let params = ModelParams::new(0.5, 2);
        let config = SimConfig::new(50, params, 2.0, 9).with_record(Recording::Grid(0.1));
        let traj = simulate_occupancy_ctmc(&config).unwrap();
        assert_eq!(traj.times.len(), 21);
        let path = traj.to_path().unwrap();
        assert_eq!(path.intervals(), 20);
        let mut csv = Vec::new();
        traj.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("t,Q1,Q2,"));
    }

    #[test]
    fn same_seed_same_run() {
        let params = ModelParams::new(0.8, 3);
        let config = SimConfig::new(40, params, 3.0, 42).with_record(Recording::AllEvents);
        assert_eq!(simulate_server_level(&config).unwrap(), simulate_server_level(&config).unwrap());
        let other = simulate_server_level(&config.clone().with_stream(1)).unwrap();
        assert_ne!(other, simulate_server_level(&config).unwrap());
    }

    #[test]
    fn rejects_bad_configs() {
        let config = SimConfig::new(2, ModelParams::new(0.5, 3), 1.0, 0);
        assert!(simulate_server_level(&config).is_err());
        let config = SimConfig::new(5, ModelParams::new(0.5, 2), 1.0, 0).with_init(FiniteQVector::empty(6, 24));
        assert!(simulate_occupancy_ctmc(&config).is_err());
    }
}
