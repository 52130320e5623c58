//! Occupancy states of the n-server system and the drifts that drive them.
//!
//! A state is described by its tail profile `q_i` = fraction of servers with
//! at least `i` jobs, truncated at a finite depth `J` (entries past `J` are
//! taken to be zero). The finite-n chain lives on the lattice `{0, 1/n, ..., 1}`
//! and is stored as integer counts; the mean-field limit works with reals.
//!
//! Routing probabilities for finite n are computed as exact rationals so that
//! `sum_i R_i = 1` holds without rounding. Everything else is `f64`.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DEPTH: usize = 24;

const MEASURE_TOL: f64 = 1e-12;

/// Tail-occupancy profile `q = (q_0, ..., q_J)` with `q_0 = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QVector {
    values: Vec<f64>,
}

impl QVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidState("need at least q_0 and q_1".into()));
        }
        if values[0] != 1.0 {
            return Err(Error::InvalidState(format!("q_0 = {} (must be 1)", values[0])));
        }
        for (i, &v) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidState(format!("q_{i} = {v} outside [0, 1]")));
            }
        }
        if let Some(i) = values.windows(2).position(|w| w[1] > w[0]) {
            return Err(Error::InvalidState(format!(
                "not nonincreasing at {i}: {} < {}",
                values[i],
                values[i + 1]
            )));
        }
        Ok(Self { values })
    }

    /// The empty system: `q = e_0`.
    pub fn empty(depth: usize) -> Self {
        let mut values = vec![0.0; depth + 1];
        values[0] = 1.0;
        Self { values }
    }

    /// Truncation depth `J` (index of the last stored coordinate).
    pub fn depth(&self) -> usize {
        self.values.len() - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `q_i`, with zero past the truncation depth.
    pub fn get(&self, i: usize) -> f64 {
        self.values.get(i).copied().unwrap_or(0.0)
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// True when every coordinate above `k` vanishes.
    pub fn is_buffered(&self, k: usize) -> bool {
        self.values.iter().skip(k + 1).all(|&v| v == 0.0)
    }
}

impl TryFrom<Vec<f64>> for QVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        QVector::new(values)
    }
}

impl From<QVector> for Vec<f64> {
    fn from(q: QVector) -> Self {
        q.values
    }
}

/// Occupancy measure `mu_i` = fraction of servers with exactly `i` jobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MuVector {
    values: Vec<f64>,
}

impl MuVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidState("empty measure".into()));
        }
        for (i, &v) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidState(format!("mu_{i} = {v} outside [0, 1]")));
            }
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > MEASURE_TOL {
            return Err(Error::InvalidMeasure { sum });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl TryFrom<Vec<f64>> for MuVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        MuVector::new(values)
    }
}

impl From<MuVector> for Vec<f64> {
    fn from(mu: MuVector) -> Self {
        mu.values
    }
}

/// Tail sums `q_i = sum_{j >= i} mu_j`.
pub fn mu_to_q(mu: &MuVector) -> QVector {
    let m = mu.values();
    let mut values = vec![0.0; m.len().max(2)];
    let mut acc = 0.0;
    for i in (0..m.len()).rev() {
        acc += m[i];
        values[i] = acc.clamp(0.0, 1.0);
    }
    values[0] = 1.0;
    // summation order can leave a one-ulp inversion near the top
    for i in 1..values.len() {
        if values[i] > values[i - 1] {
            values[i] = values[i - 1];
        }
    }
    QVector { values }
}

/// Differences `mu_i = q_i - q_{i+1}` with `q_{J+1} = 0`.
pub fn q_to_mu(q: &QVector) -> MuVector {
    let v = q.values();
    let values = (0..v.len())
        .map(|i| v[i] - q.get(i + 1))
        .collect::<Vec<_>>();
    MuVector { values }
}

/// Model parameters shared by the finite system and its limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Arrival rate per server.
    pub lambda: f64,
    /// Number of servers sampled per arrival.
    pub d: u32,
    /// Optional buffer size `K`.
    #[serde(default)]
    pub buffer: Option<u32>,
    /// Truncation depth `J`.
    pub depth: usize,
}

impl ModelParams {
    pub fn new(lambda: f64, d: u32) -> Self {
        Self {
            lambda,
            d,
            buffer: None,
            depth: DEFAULT_DEPTH,
        }
    }

    pub fn with_buffer(mut self, k: u32) -> Self {
        self.buffer = Some(k);
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.d < 1 {
            return Err(Error::config("d must be >= 1"));
        }
        if self.depth < 1 {
            return Err(Error::config("depth must be >= 1"));
        }
        if let Some(k) = self.buffer {
            if k < 1 {
                return Err(Error::config("buffer must be >= 1"));
            }
            if self.depth < k as usize + 2 {
                return Err(Error::config(format!(
                    "depth {} must be >= buffer + 2 = {}",
                    self.depth,
                    k + 2
                )));
            }
        }
        Ok(())
    }

    /// `lambda_0 = max(lambda, 1)`.
    pub fn lambda0(&self) -> f64 {
        self.lambda.max(1.0)
    }

    pub(crate) fn buffer_level(&self) -> Option<usize> {
        self.buffer.map(|k| k as usize)
    }

    /// Number of active coordinates `1..=top` for the drift.
    pub(crate) fn top(&self, depth: usize) -> usize {
        match self.buffer_level() {
            Some(k) => k.min(depth),
            None => depth,
        }
    }
}

/// Integer occupancy counts `N_i = #{servers with >= i jobs}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiniteQVector {
    n: u64,
    counts: Vec<u64>,
}

impl FiniteQVector {
    pub fn new(n: u64, counts: Vec<u64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidState("n must be positive".into()));
        }
        if counts.len() < 2 {
            return Err(Error::InvalidState("need at least N_0 and N_1".into()));
        }
        if counts[0] != n {
            return Err(Error::InvalidState(format!("N_0 = {} (must equal n = {n})", counts[0])));
        }
        if let Some(i) = counts.windows(2).position(|w| w[1] > w[0]) {
            return Err(Error::InvalidState(format!("counts not nonincreasing at {i}")));
        }
        Ok(Self { n, counts })
    }

    pub fn empty(n: u64, depth: usize) -> Self {
        let mut counts = vec![0; depth + 1];
        counts[0] = n;
        Self { n, counts }
    }

    /// Every server holds exactly `m` jobs.
    pub fn all_length(n: u64, m: usize, depth: usize) -> Self {
        let counts = (0..=depth).map(|i| if i <= m { n } else { 0 }).collect();
        Self { n, counts }
    }

    /// Occupancy of an explicit vector of queue lengths.
    pub fn from_lengths(lengths: &[u32], depth: usize) -> Result<Self> {
        let n = lengths.len() as u64;
        if n == 0 {
            return Err(Error::InvalidState("no servers".into()));
        }
        let mut counts = vec![0u64; depth + 1];
        for &l in lengths {
            for c in counts.iter_mut().take((l as usize).min(depth) + 1) {
                *c += 1;
            }
        }
        Ok(Self { n, counts })
    }

    /// Nearest lattice state to `q`: largest-remainder rounding of `n * mu`,
    /// then tail sums, which keeps the counts monotone and `N_0 = n`.
    pub fn round_from(q: &QVector, n: u64) -> Self {
        let mu = q_to_mu(q);
        let scaled: Vec<f64> = mu.values().iter().map(|&m| m * n as f64).collect();
        let mut floors: Vec<u64> = scaled.iter().map(|&s| s.floor() as u64).collect();
        let assigned: u64 = floors.iter().sum();
        let mut remaining = n.saturating_sub(assigned);
        let mut order: Vec<usize> = (0..scaled.len()).collect();
        // stable: ties go to the lower level
        order.sort_by(|&a, &b| {
            let ra = scaled[a] - scaled[a].floor();
            let rb = scaled[b] - scaled[b].floor();
            rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
        });
        for &i in order.iter().cycle() {
            if remaining == 0 {
                break;
            }
            floors[i] += 1;
            remaining -= 1;
        }
        let mut counts = vec![0u64; floors.len()];
        let mut acc = 0;
        for i in (0..floors.len()).rev() {
            acc += floors[i];
            counts[i] = acc;
        }
        debug_assert_eq!(counts[0], n);
        Self { n, counts }
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn depth(&self) -> usize {
        self.counts.len() - 1
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// `N_i`, zero past the stored depth.
    pub fn count(&self, i: usize) -> u64 {
        self.counts.get(i).copied().unwrap_or(0)
    }

    pub fn to_qvector(&self) -> QVector {
        let n = self.n as f64;
        QVector {
            values: self.counts.iter().map(|&c| c as f64 / n).collect(),
        }
    }

    /// Queue lengths of a canonical server assignment (longest queues first).
    pub fn to_lengths(&self) -> Vec<u32> {
        let mut lengths = vec![0u32; self.n as usize];
        for i in 1..self.counts.len() {
            for l in lengths.iter_mut().take(self.counts[i] as usize) {
                *l = i as u32;
            }
        }
        lengths
    }
}

/// `C(m, d) / C(n, d)` as an exact rational; zero when `m < d`.
pub fn binom_ratio(m: u64, n: u64, d: u64) -> Result<BigRational> {
    if m > n {
        return Err(Error::domain(format!("binom_ratio: m = {m} exceeds n = {n}")));
    }
    if n < d {
        return Err(Error::domain(format!("binom_ratio: n = {n} smaller than d = {d}")));
    }
    if m < d {
        return Ok(BigRational::zero());
    }
    let mut num = BigInt::one();
    let mut den = BigInt::one();
    for k in 0..d {
        num *= BigInt::from(m - k);
        den *= BigInt::from(n - k);
    }
    Ok(BigRational::new(num, den))
}

/// Floating counterpart of [`binom_ratio`] without domain checks.
pub(crate) fn binom_ratio_f64(m: u64, n: u64, d: u32) -> f64 {
    let d = d as u64;
    if m < d {
        return 0.0;
    }
    let mut r = 1.0;
    for k in 0..d {
        r *= (m - k) as f64 / (n - k) as f64;
    }
    r
}

fn check_sampling(q: &FiniteQVector, params: &ModelParams) -> Result<()> {
    if (params.d as u64) > q.n() {
        return Err(Error::domain(format!("d = {} exceeds n = {}", params.d, q.n())));
    }
    Ok(())
}

/// Probability that an arrival joins a queue currently holding `i - 1` jobs,
/// i.e. increments `Q_i`. Sampling is without replacement.
pub fn routing_rate_finite(q: &FiniteQVector, i: usize, params: &ModelParams) -> Result<BigRational> {
    if i == 0 {
        return Err(Error::domain("routing level 0 is fixed (Q_0 = 1)"));
    }
    check_sampling(q, params)?;
    if let Some(k) = params.buffer_level() {
        if i > k {
            return Ok(BigRational::zero());
        }
    }
    let d = params.d as u64;
    Ok(binom_ratio(q.count(i - 1), q.n(), d)? - binom_ratio(q.count(i), q.n(), d)?)
}

/// Probability that an arrival is discarded (buffered systems only).
pub fn drop_probability_finite(q: &FiniteQVector, params: &ModelParams) -> Result<BigRational> {
    check_sampling(q, params)?;
    match params.buffer_level() {
        Some(k) => binom_ratio(q.count(k), q.n(), params.d as u64),
        None => Ok(BigRational::zero()),
    }
}

/// Routing probabilities `R_1..R_{top}` in floating point, index 0 unused.
pub(crate) fn routing_rates_f64(q: &FiniteQVector, params: &ModelParams) -> Vec<f64> {
    let depth = q.depth();
    let top = params.top(depth + 1);
    let mut r = vec![0.0; depth + 2];
    for (i, ri) in r.iter_mut().enumerate().take(top + 1).skip(1) {
        *ri = binom_ratio_f64(q.count(i - 1), q.n(), params.d)
            - binom_ratio_f64(q.count(i), q.n(), params.d);
    }
    r
}

/// Finite-n drift `b^n_i = lambda R^n_i - (q_i - q_{i+1})`, indexed `0..=J`
/// with component 0 identically zero.
pub fn drift_finite(q: &FiniteQVector, params: &ModelParams) -> Vec<f64> {
    let depth = q.depth();
    let qs = q.to_qvector();
    let r = routing_rates_f64(q, params);
    let top = params.top(depth);
    let mut b = vec![0.0; depth + 1];
    for i in 1..=top {
        let next = if Some(i) == params.buffer_level() { 0.0 } else { qs.get(i + 1) };
        b[i] = params.lambda * r[i] - (qs.get(i) - next);
    }
    b
}

/// Mean-field drift on an arbitrary (not necessarily valid) vector.
pub fn drift_limit_raw(q: &[f64], params: &ModelParams) -> Vec<f64> {
    let depth = q.len() - 1;
    let top = params.top(depth);
    let d = params.d as i32;
    let at = |i: usize| q.get(i).copied().unwrap_or(0.0);
    let mut b = vec![0.0; depth + 1];
    for i in 1..=top {
        let next = if Some(i) == params.buffer_level() { 0.0 } else { at(i + 1) };
        b[i] = params.lambda * (at(i - 1).powi(d) - at(i).powi(d)) - (at(i) - next);
    }
    b
}

/// `b_i(q) = lambda (q_{i-1}^d - q_i^d) - (q_i - q_{i+1})`.
pub fn drift_limit(q: &QVector, params: &ModelParams) -> Vec<f64> {
    drift_limit_raw(q.values(), params)
}

/// Linearization `Db(q)[p]` on raw slices. `p[0]` is ignored.
pub fn linearized_drift_raw(q: &[f64], p: &[f64], params: &ModelParams) -> Vec<f64> {
    let depth = q.len().max(p.len()) - 1;
    let top = params.top(depth);
    let ld = params.lambda * params.d as f64;
    let dm1 = params.d as i32 - 1;
    let qa = |i: usize| q.get(i).copied().unwrap_or(0.0);
    let pa = |i: usize| if i == 0 { 0.0 } else { p.get(i).copied().unwrap_or(0.0) };
    let mut out = vec![0.0; depth + 1];
    for i in 1..=top {
        let next = if Some(i) == params.buffer_level() { 0.0 } else { pa(i + 1) };
        out[i] = ld * qa(i - 1).powi(dm1) * pa(i - 1) - (ld * qa(i).powi(dm1) + 1.0) * pa(i) + next;
    }
    out
}

/// `Db(q)[p] = lambda d T_{-1}(q^{d-1} p) - (lambda d q^{d-1} + 1) p + T_{+1} p`.
pub fn linearized_drift(q: &QVector, p: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    if p.first().copied().unwrap_or(0.0) != 0.0 {
        return Err(Error::domain("perturbation must have p_0 = 0"));
    }
    Ok(linearized_drift_raw(q.values(), p, params))
}

/// `theta_b(qbar, q) = b(qbar) - b(q) - Db(q)[qbar - q]`.
pub fn taylor_remainder(qbar: &QVector, q: &QVector, params: &ModelParams) -> Vec<f64> {
    let depth = qbar.depth().max(q.depth());
    let delta: Vec<f64> = (0..=depth).map(|i| qbar.get(i) - q.get(i)).collect();
    let pad = |v: &QVector| (0..=depth).map(|i| v.get(i)).collect::<Vec<_>>();
    let bq = drift_limit_raw(&pad(qbar), params);
    let b = drift_limit_raw(&pad(q), params);
    let lin = linearized_drift_raw(&pad(q), &delta, params);
    (0..=depth).map(|i| bq[i] - b[i] - lin[i]).collect()
}

/// `(x^k - y^k) / (x^d - y^d)` for `0 <= y < x <= 1`, `1 <= k < d`.
pub fn monotone_ratio(x: f64, y: f64, k: u32, d: u32) -> Result<f64> {
    if !(1 <= k && k < d) {
        return Err(Error::domain(format!("need 1 <= k < d, got k = {k}, d = {d}")));
    }
    if x == y {
        return Err(Error::domain("x == y is a removable singularity"));
    }
    if !(0.0 <= y && y < x && x <= 1.0) {
        return Err(Error::domain(format!("need 0 <= y < x <= 1, got x = {x}, y = {y}")));
    }
    Ok((x.powi(k as i32) - y.powi(k as i32)) / (x.powi(d as i32) - y.powi(d as i32)))
}

/// Euclidean norm over stored coordinates.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let x = a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
pub(crate) fn rational_to_f64(r: &BigRational) -> f64 {
    use num_traits::ToPrimitive;
    r.to_f64().unwrap_or(f64::NAN)
}

/// The inequalities satisfied by the drifts, as checkable `lhs <= rhs` pairs.
pub mod bounds {
    use super::*;

    #[derive(Clone, Copy, Debug, PartialEq)]
    pub struct BoundCheck {
        pub lhs: f64,
        pub rhs: f64,
    }

    impl BoundCheck {
        pub fn holds(&self, slack: f64) -> bool {
            self.lhs <= self.rhs + slack
        }
    }

    /// `C_n = prod_{k=1}^{d-1} n / (n - k)`.
    pub fn sampling_constant(n: u64, d: u32) -> f64 {
        (1..d as u64).map(|k| n as f64 / (n - k) as f64).product()
    }

    /// `|b^n(q) - b^n(qbar)| <= (2 lambda d C_n + 2) |q - qbar|`.
    pub fn finite_lipschitz(q: &FiniteQVector, qbar: &FiniteQVector, params: &ModelParams) -> BoundCheck {
        let lhs = l2_distance(&drift_finite(q, params), &drift_finite(qbar, params));
        let cn = sampling_constant(q.n(), params.d);
        let dist = l2_distance(q.to_qvector().values(), qbar.to_qvector().values());
        BoundCheck {
            lhs,
            rhs: (2.0 * params.lambda * params.d as f64 * cn + 2.0) * dist,
        }
    }

    /// `|b(q) - b(qbar)| <= (2 lambda d + 2) |q - qbar|`.
    pub fn limit_lipschitz(q: &QVector, qbar: &QVector, params: &ModelParams) -> BoundCheck {
        let lhs = l2_distance(&drift_limit(q, params), &drift_limit(qbar, params));
        BoundCheck {
            lhs,
            rhs: (2.0 * params.lambda * params.d as f64 + 2.0) * l2_distance(q.values(), qbar.values()),
        }
    }

    /// `|b^n(q) - b(q)| <= (4 lambda d^2 / n) |q|`, valid for `n >= 2d`.
    pub fn finite_limit_gap(q: &FiniteQVector, params: &ModelParams) -> BoundCheck {
        let qs = q.to_qvector();
        let lhs = l2_distance(&drift_finite(q, params), &drift_limit(&qs, params));
        let d = params.d as f64;
        BoundCheck {
            lhs,
            rhs: 4.0 * params.lambda * d * d / q.n() as f64 * l2_norm(qs.values()),
        }
    }

    /// Per-coordinate form `|b^n_i - b_i| <= 2 lambda d^2 (q_{i-1} + q_i) / n`.
    pub fn finite_limit_gap_at(q: &FiniteQVector, i: usize, params: &ModelParams) -> BoundCheck {
        let qs = q.to_qvector();
        let bn = drift_finite(q, params);
        let b = drift_limit(&qs, params);
        let d = params.d as f64;
        BoundCheck {
            lhs: (bn.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0)).abs(),
            rhs: 2.0 * params.lambda * d * d * (qs.get(i - 1) + qs.get(i)) / q.n() as f64,
        }
    }

    /// Total jump intensity `sum_i [lambda R_i + (q_i - q_{i+1})] <= lambda (d^2 + d)/2 + 1`.
    pub fn total_event_rate(q: &FiniteQVector, params: &ModelParams) -> BoundCheck {
        let qs = q.to_qvector();
        let r = routing_rates_f64(q, params);
        let lhs: f64 = (1..=q.depth())
            .map(|i| params.lambda * r[i] + (qs.get(i) - qs.get(i + 1)))
            .sum();
        let d = params.d as f64;
        BoundCheck {
            lhs,
            rhs: params.lambda * (d * d + d) / 2.0 + 1.0,
        }
    }

    /// `|Db(q)[p]| <= (2 lambda d + 2) |p|`.
    pub fn linearization_norm(q: &QVector, p: &[f64], params: &ModelParams) -> BoundCheck {
        let out = linearized_drift_raw(q.values(), p, params);
        let p_norm = l2_norm(&p.iter().skip(1).copied().collect::<Vec<_>>());
        BoundCheck {
            lhs: l2_norm(&out),
            rhs: (2.0 * params.lambda * params.d as f64 + 2.0) * p_norm,
        }
    }

    /// `|theta_b(qbar, q)| <= lambda d (d - 1) |qbar - q|^2`.
    pub fn remainder_norm(qbar: &QVector, q: &QVector, params: &ModelParams) -> BoundCheck {
        let d = params.d as f64;
        let dist = l2_distance(qbar.values(), q.values());
        BoundCheck {
            lhs: l2_norm(&taylor_remainder(qbar, q, params)),
            rhs: params.lambda * d * (d - 1.0) * dist * dist,
        }
    }
}

#[cfg(test)]
pub(crate) fn ratio_sum(values: impl Iterator<Item = BigRational>) -> BigRational {
    values.fold(BigRational::zero(), |acc, v| acc + v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rat(a: i64, b: i64) -> BigRational {
        BigRational::new(a.into(), b.into())
    }

    #[test]
    fn mu_to_q_partial_sums() {
        let q = mu_to_q(&MuVector::new(vec![0.5, 0.3, 0.2]).unwrap());
        assert_eq!(q.values()[0], 1.0);
        assert!((q.values()[1] - 0.5).abs() < 1e-15);
        assert!((q.values()[2] - 0.2).abs() < 1e-15);

        let q = mu_to_q(&MuVector::new(vec![1.0, 0.0, 0.0]).unwrap());
        assert_eq!(q.values(), &[1.0, 0.0, 0.0]);

        let q = mu_to_q(&MuVector::new(vec![0.25; 4]).unwrap());
        assert_eq!(q.values(), &[1.0, 0.75, 0.5, 0.25]);
    }

    #[test]
    fn measure_must_sum_to_one() {
        assert!(matches!(
            MuVector::new(vec![0.5, 0.3]),
            Err(Error::InvalidMeasure { .. })
        ));
    }

    #[test]
    fn q_to_mu_differences() {
        let mu = q_to_mu(&QVector::new(vec![1.0, 0.5, 0.2]).unwrap());
        let expect = [0.5, 0.3, 0.2];
        for (a, b) in mu.values().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(q_to_mu(&QVector::new(vec![1.0, 0.0, 0.0]).unwrap()).values(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn qvector_rejects_bad_states() {
        assert!(QVector::new(vec![0.9, 0.5]).is_err());
        assert!(QVector::new(vec![1.0, 0.2, 0.5]).is_err());
        assert!(QVector::new(vec![1.0, 1.2]).is_err());
        assert!(FiniteQVector::new(3, vec![3, 1, 2]).is_err());
        assert!(FiniteQVector::new(3, vec![2, 1]).is_err());
    }

    #[test]
    fn binom_ratio_values() {
        assert_eq!(binom_ratio(2, 3, 2).unwrap(), rat(1, 3));
        assert_eq!(binom_ratio(1, 3, 2).unwrap(), rat(0, 1));
        assert_eq!(binom_ratio(7, 7, 3).unwrap(), rat(1, 1));
        assert!(binom_ratio(4, 3, 2).is_err());
        assert!(binom_ratio(1, 1, 2).is_err());
    }

    #[test]
    fn routing_rates_small_state() {
        // lengths (2, 1, 0)
        let q = FiniteQVector::new(3, vec![3, 2, 1, 0]).unwrap();
        let p = ModelParams::new(0.5, 2).with_depth(3);
        assert_eq!(routing_rate_finite(&q, 1, &p).unwrap(), rat(2, 3));
        assert_eq!(routing_rate_finite(&q, 2, &p).unwrap(), rat(1, 3));
        assert_eq!(routing_rate_finite(&q, 3, &p).unwrap(), rat(0, 1));
        assert!(routing_rate_finite(&q, 0, &p).is_err());
    }

    #[test]
    fn routing_rates_empty_state() {
        let q = FiniteQVector::empty(5, 4);
        let p = ModelParams::new(0.5, 3).with_depth(4);
        assert_eq!(routing_rate_finite(&q, 1, &p).unwrap(), rat(1, 1));
        for i in 2..=4 {
            assert_eq!(routing_rate_finite(&q, i, &p).unwrap(), rat(0, 1));
        }
    }

    #[test]
    fn drift_finite_empty_state() {
        let q = FiniteQVector::empty(10, 5);
        let b = drift_finite(&q, &ModelParams::new(0.5, 2).with_depth(5));
        assert_eq!(b[1], 0.5);
        assert!(b[2..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn drift_limit_hand_values() {
        let p = ModelParams::new(0.5, 2).with_depth(4);
        let b = drift_limit(&QVector::new(vec![1.0, 1.0, 0.0, 0.0, 0.0]).unwrap(), &p);
        assert_eq!(b, vec![0.0, -1.0, 0.5, 0.0, 0.0]);
        let b = drift_limit(&QVector::empty(4), &p);
        assert_eq!(b, vec![0.0, 0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn linearized_drift_at_stationary_unit_vector() {
        let p = ModelParams::new(0.5, 2).with_depth(6);
        let qstar = crate::fluid::stationary_profile(&p, 6).unwrap();
        let mut e1 = vec![0.0; 7];
        e1[1] = 1.0;
        let out = linearized_drift(&qstar, &e1, &p).unwrap();
        assert!((out[1] + 1.5).abs() < 1e-15);
        assert!((out[2] - 0.5).abs() < 1e-15);
        assert!(out[3..].iter().all(|&x| x == 0.0));
        assert!(linearized_drift(&qstar, &[0.0; 7], &p).unwrap().iter().all(|&x| x == 0.0));
        assert!(linearized_drift(&qstar, &[1.0, 0.0], &p).is_err());
    }

    #[test]
    fn taylor_remainder_vanishes_on_diagonal() {
        let p = ModelParams::new(0.7, 3).with_depth(4);
        let q = QVector::new(vec![1.0, 0.6, 0.3, 0.1, 0.0]).unwrap();
        assert!(taylor_remainder(&q, &q, &p).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn monotone_ratio_values() {
        let f = monotone_ratio(0.5, 0.25, 1, 2).unwrap();
        assert!((f - 1.0 / 0.75).abs() < 1e-15);
        let x: f64 = 0.3;
        assert!((monotone_ratio(x, 0.0, 2, 5).unwrap() - x.powi(-3)).abs() < 1e-12);
        assert!(monotone_ratio(0.4, 0.4, 1, 2).is_err());
        assert!(monotone_ratio(0.4, 0.1, 2, 2).is_err());
        assert!(monotone_ratio(0.4, 0.5, 1, 2).is_err());
    }

    #[test]
    fn buffered_drift_cuts_at_k() {
        let p = ModelParams::new(0.5, 2).with_buffer(2).with_depth(5);
        let q = QVector::new(vec![1.0, 0.8, 0.4, 0.0, 0.0, 0.0]).unwrap();
        let b = drift_limit(&q, &p);
        assert!((b[2] - (0.5 * (0.64 - 0.16) - 0.4)).abs() < 1e-15);
        assert!(b[3..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn round_from_preserves_lattice() {
        let p = ModelParams::new(0.5, 2).with_depth(10);
        let qstar = crate::fluid::stationary_profile(&p, 10).unwrap();
        let r = FiniteQVector::round_from(&qstar, 1000);
        assert_eq!(r.counts()[0], 1000);
        assert_eq!(r.counts()[1], 500);
        assert_eq!(r.counts()[2], 125);
        assert_eq!(r.counts()[3], 8);
        assert!(l2_distance(r.to_qvector().values(), qstar.values()) <= 10.0 / 1000.0);
    }

    fn finite_state(max_n: u64, depth: usize) -> impl Strategy<Value = FiniteQVector> {
        (2..=max_n).prop_flat_map(move |n| {
            prop::collection::vec(0..=n, depth).prop_map(move |mut v| {
                v.sort_unstable_by(|a, b| b.cmp(a));
                let mut counts = vec![n];
                counts.extend(v);
                FiniteQVector::new(n, counts).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn q_mu_round_trip(raw in prop::collection::vec(0.0f64..1.0, 2..12)) {
            let total: f64 = raw.iter().sum::<f64>() + 1e-9;
            let mut v: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let rest: f64 = 1.0 - v.iter().sum::<f64>();
            v[0] += rest;
            let mu = MuVector::new(v.clone()).unwrap();
            let back = q_to_mu(&mu_to_q(&mu));
            for (a, b) in back.values().iter().zip(&v) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn routing_sums_to_one(q in finite_state(30, 6), d in 1u32..4) {
            prop_assume!(d as u64 <= q.n());
            let p = ModelParams::new(0.5, d).with_depth(6);
            let total = ratio_sum((1..=q.depth() + 1).map(|i| routing_rate_finite(&q, i, &p).unwrap()));
            prop_assert_eq!(total, BigRational::one());
            let floats = routing_rates_f64(&q, &p);
            for i in 1..=q.depth() {
                let exact = rational_to_f64(&routing_rate_finite(&q, i, &p).unwrap());
                prop_assert!((floats[i] - exact).abs() < 1e-12);
            }
        }

        #[test]
        fn buffered_routing_plus_drop_is_one(q in finite_state(20, 6), k in 1u32..4) {
            let p = ModelParams::new(0.5, 2).with_buffer(k).with_depth(6);
            prop_assume!(2 <= q.n());
            let total = ratio_sum((1..=6).map(|i| routing_rate_finite(&q, i, &p).unwrap()))
                + drop_probability_finite(&q, &p).unwrap();
            prop_assert_eq!(total, BigRational::one());
        }

        #[test]
        fn total_event_rate_bounded(q in finite_state(40, 8), d in 1u32..5, lambda in 0.0f64..2.0) {
            prop_assume!(d as u64 <= q.n());
            let p = ModelParams::new(lambda, d).with_depth(8);
            prop_assert!(bounds::total_event_rate(&q, &p).holds(1e-12));
        }

        #[test]
        fn finite_drift_close_to_limit_per_coordinate(q in finite_state(60, 8), d in 2u32..4, lambda in 0.1f64..1.0) {
            prop_assume!(2 * d as u64 <= q.n());
            let p = ModelParams::new(lambda, d).with_depth(8);
            for i in 1..=8 {
                prop_assert!(bounds::finite_limit_gap_at(&q, i, &p).holds(1e-12));
            }
        }

        #[test]
        fn linearization_and_remainder_bounds(
            a in prop::collection::vec(0.0f64..1.0, 6),
            b in prop::collection::vec(0.0f64..1.0, 6),
            d in 2u32..5,
            lambda in 0.1f64..1.0,
        ) {
            let mk = |mut v: Vec<f64>| {
                v.sort_by(|x, y| y.partial_cmp(x).unwrap());
                let mut q = vec![1.0];
                q.extend(v);
                QVector::new(q).unwrap()
            };
            let (q, qbar) = (mk(a), mk(b));
            let p = ModelParams::new(lambda, d).with_depth(6);
            prop_assert!(bounds::remainder_norm(&qbar, &q, &p).holds(1e-12));
            let delta: Vec<f64> = (0..7).map(|i| qbar.get(i) - q.get(i)).collect();
            prop_assert!(bounds::linearization_norm(&q, &delta, &p).holds(1e-12));

            // b(qbar) - b(q) = Db(q)[qbar - q] + theta_b(qbar, q)
            let lhs: Vec<f64> = drift_limit(&qbar, &p).iter().zip(drift_limit(&q, &p)).map(|(x, y)| x - y).collect();
            let lin = linearized_drift(&q, &delta, &p).unwrap();
            let rem = taylor_remainder(&qbar, &q, &p);
            for i in 0..7 {
                prop_assert!((lhs[i] - lin[i] - rem[i]).abs() < 1e-13);
            }

            if d == 2 {
                for i in 1..7 {
                    let closed = lambda * (delta[i - 1].powi(2) - delta[i].powi(2));
                    prop_assert!((rem[i] - closed).abs() < 1e-14);
                }
            }
        }

        #[test]
        fn monotone_ratio_decreasing(k in 1u32..5, extra in 1u32..5, y in 0.0f64..0.9, dx in 0.001f64..0.1, step in 0.001f64..0.05) {
            let d = k + extra;
            let x1 = (y + dx).min(1.0);
            let x2 = (x1 + step).min(1.0);
            prop_assume!(x2 > x1);
            prop_assert!(monotone_ratio(x1, y, k, d).unwrap() >= monotone_ratio(x2, y, k, d).unwrap() - 1e-12);
            let y2 = (y + step).min(x1 - 1e-6);
            prop_assume!(y2 > y);
            prop_assert!(monotone_ratio(x1, y, k, d).unwrap() >= monotone_ratio(x1, y2, k, d).unwrap() - 1e-12);
        }
    }
}
