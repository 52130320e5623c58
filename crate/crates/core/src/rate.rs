//! The moderate-deviation rate function and its buffered variants.
//!
//! `I(eta) = 1/2 sum_j int phi_j^2 / denom_j dt`, where `phi_j` is the
//! residual of `eta` against the linearized fluid dynamics and
//! `denom_j = lambda (Q_{j-1}^d - Q_j^d) + (Q_j - Q_{j+1})` is the local event
//! rate. Slopes are forward differences on each subinterval; integrals use
//! 3-point Gauss-Legendre nodes with linear interpolation.
//!
//! For stationary references ([`Reference`]) the integrand is evaluated in
//! log space, which keeps every coordinate accurate far below `f64` range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fluid::{ln_one_minus_exp, BufferedProfile, LogStationary};
use crate::occupancy::{linearized_drift_raw, ModelParams};
use crate::path::{Control, PLPath};
use crate::report::{inf_as_string, inf_vec, ExperimentReport};
use crate::stats::spearman;

/// Gauss-Legendre nodes and weights on `[0, 1]`.
const GL3: [(f64, f64); 3] = [
    (0.1127016653792583, 5.0 / 18.0),
    (0.5, 8.0 / 18.0),
    (0.8872983346207417, 5.0 / 18.0),
];

/// Relative tolerances for the zero-denominator test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateOpts {
    /// `denom_j` counts as zero when below this fraction of its terms' magnitude.
    pub denom_tol: f64,
    /// `phi_j` counts as zero when below this fraction of its terms' magnitude.
    pub zero_tol: f64,
}

impl Default for RateOpts {
    fn default() -> Self {
        Self {
            denom_tol: 1e-14,
            zero_tol: 1e-12,
        }
    }
}

/// Last included coordinate contribution above which depth is deemed too shallow.
pub const TRUNCATION_LIMIT: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateBreakdown {
    #[serde(with = "inf_as_string")]
    pub total: f64,
    /// Contribution of coordinate `j` at index `j`; index 0 is always 0.
    #[serde(with = "inf_vec")]
    pub per_coordinate: Vec<f64>,
    /// Where a nonzero residual met a vanishing event rate.
    #[serde(default)]
    pub reason: Option<String>,
    /// Contribution of the deepest included coordinate.
    #[serde(default)]
    pub truncation: f64,
}

impl RateBreakdown {
    fn from_terms(per_coordinate: Vec<f64>, reason: Option<String>) -> Self {
        let total = if reason.is_some() {
            f64::INFINITY
        } else {
            per_coordinate.iter().sum()
        };
        let truncation = per_coordinate.last().copied().unwrap_or(0.0);
        Self {
            total,
            per_coordinate,
            reason,
            truncation,
        }
    }

    fn infinite(reason: String) -> Self {
        Self {
            total: f64::INFINITY,
            per_coordinate: Vec::new(),
            reason: Some(reason),
            truncation: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }

    /// Whether the deepest coordinate contributes less than [`TRUNCATION_LIMIT`].
    pub fn truncation_ok(&self) -> bool {
        self.truncation.abs() < TRUNCATION_LIMIT
    }
}

fn check_pair(eta: &PLPath, q: &PLPath, what: &str) -> Result<()> {
    eta.validate()?;
    q.validate()?;
    eta.require_same_grid(q, what)
}

/// Residual `phi_j` and its term magnitude at one point.
fn residual(j: usize, slope: f64, eta: &[f64], q: &[f64], params: &ModelParams, cut: usize) -> (f64, f64) {
    let ld = params.lambda * params.d as f64;
    let dm1 = params.d as i32 - 1;
    let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
    let up = ld * at(q, j - 1).powi(dm1) * if j == 1 { 0.0 } else { at(eta, j - 1) };
    let stay = (ld * at(q, j).powi(dm1) + 1.0) * at(eta, j);
    let next = if j >= cut { 0.0 } else { at(eta, j + 1) };
    let phi = slope - up + stay - next;
    (phi, slope.abs() + up.abs() + stay.abs() + next.abs())
}

/// Event rate `denom_j` and its term magnitude.
fn event_rate(j: usize, q: &[f64], params: &ModelParams, cut: usize) -> (f64, f64) {
    let d = params.d as i32;
    let at = |i: usize| q.get(i).copied().unwrap_or(0.0);
    let a = params.lambda * at(j - 1).powi(d);
    let b = params.lambda * at(j).powi(d);
    let next = if j >= cut { 0.0 } else { at(j + 1) };
    (a - b + at(j) - next, a + b + at(j) + next)
}

/// Highest coordinate carried by the dynamics for a path of depth `depth`.
fn top_coordinate(params: &ModelParams, depth: usize) -> usize {
    match params.buffer {
        Some(k) => (k as usize).min(depth),
        None => depth,
    }
}

/// The reduced control `phi = eta' - Db(Q)[eta]` at grid points (central
/// differences inside, one-sided at the ends).
pub fn phi_from_path(eta: &PLPath, q: &PLPath, params: &ModelParams) -> Result<Control> {
    check_pair(eta, q, "phi_from_path")?;
    let e = eta.materialized();
    let depth = e.depth();
    let top = top_coordinate(params, depth);
    let cut = params.buffer.map_or(usize::MAX, |k| k as usize);
    let last = e.intervals();
    let values = (0..e.grid_points())
        .map(|m| {
            let row = e.row(m);
            let qrow = q.row(m);
            let mut phi = vec![0.0; depth + 1];
            for (j, p) in phi.iter_mut().enumerate().take(top + 1).skip(1) {
                let slope = match m {
                    0 => e.slope(0, j),
                    m if m == last => e.slope(last - 1, j),
                    m => 0.5 * (e.slope(m - 1, j) + e.slope(m, j)),
                };
                *p = residual(j, slope, &row, &qrow, params, cut).0;
            }
            phi
        })
        .collect();
    Control::new(PLPath::new(e.horizon(), values)?)
}

/// `I(eta)` along the reference path `q` (typically a fluid solution).
pub fn rate_i(eta: &PLPath, q: &PLPath, params: &ModelParams) -> Result<RateBreakdown> {
    rate_i_with(eta, q, params, &RateOpts::default())
}

pub fn rate_i_with(eta: &PLPath, q: &PLPath, params: &ModelParams, opts: &RateOpts) -> Result<RateBreakdown> {
    check_pair(eta, q, "rate_I")?;
    let e = eta.materialized();
    let depth = e.depth();
    let top = top_coordinate(params, depth);
    let cut = params.buffer.map_or(usize::MAX, |k| k as usize);
    let h = e.step();
    let mut terms = vec![0.0; top + 1];
    let mut reason = None;
    for m in 0..e.intervals() {
        let slopes: Vec<f64> = (0..=depth).map(|j| e.slope(m, j)).collect();
        for &(s, w) in &GL3 {
            let t = e.time(m) + s * h;
            let row: Vec<f64> = (0..=depth).map(|j| e.lerp(m, s, j)).collect();
            let qrow: Vec<f64> = (0..=depth + 1).map(|j| q.lerp(m, s, j)).collect();
            for j in 1..=top {
                let (phi, phi_scale) = residual(j, slopes[j], &row, &qrow, params, cut);
                let (den, den_scale) = event_rate(j, &qrow, params, cut);
                if den <= opts.denom_tol * den_scale {
                    if phi.abs() > opts.zero_tol * phi_scale && reason.is_none() {
                        reason = Some(format!(
                            "coordinate {j} at t = {t}: residual {phi:e} where the event rate vanishes"
                        ));
                        terms[j] = f64::INFINITY;
                    }
                    continue;
                }
                terms[j] += 0.5 * h * w * phi * phi / den;
            }
        }
    }
    Ok(RateBreakdown::from_terms(terms, reason))
}

/// `1/2 sum_j int phi_j^2 / denom_j` for a given control, same quadrature.
pub fn control_cost(phi: &Control, q: &PLPath, params: &ModelParams) -> Result<f64> {
    check_pair(phi, q, "control_cost")?;
    let top = top_coordinate(params, phi.depth());
    let cut = params.buffer.map_or(usize::MAX, |k| k as usize);
    let h = phi.step();
    let mut total = 0.0;
    for m in 0..phi.intervals() {
        for &(s, w) in &GL3 {
            let qrow: Vec<f64> = (0..=phi.depth() + 1).map(|j| q.lerp(m, s, j)).collect();
            for j in 1..=top {
                let f = phi.lerp(m, s, j);
                if f == 0.0 {
                    continue;
                }
                let (den, _) = event_rate(j, &qrow, params, cut);
                if den <= 0.0 {
                    return Ok(f64::INFINITY);
                }
                total += 0.5 * h * w * f * f / den;
            }
        }
    }
    Ok(total)
}

/// Solves `z = eps + int Db(Q)[z] ds + int phi ds` by RK4 on the shared grid.
///
/// Written as `w = z - eps` with `w' = Db(Q)[w + eps] + phi`, `w(0) = 0`,
/// so `eps` need not be differentiable. Without `eps` this is the
/// linearized ODE `eta' = Db(Q)[eta] + phi`, `eta(0) = 0`.
pub fn solve_controlled_ode(phi: &Control, q: &PLPath, params: &ModelParams, eps: Option<&PLPath>) -> Result<PLPath> {
    check_pair(phi, q, "solve_controlled_ode")?;
    if let Some(e) = eps {
        e.validate()?;
        phi.require_same_grid(e, "solve_controlled_ode (epsilon)")?;
    }
    let depth = phi.depth();
    let h = phi.step();
    let point = |m: usize, s: f64, w: &[f64]| -> Vec<f64> {
        let qrow: Vec<f64> = (0..=depth).map(|j| q.lerp(m, s, j)).collect();
        let z: Vec<f64> = (0..=depth)
            .map(|j| w[j] + eps.map_or(0.0, |e| e.lerp(m, s, j)))
            .collect();
        let mut out = linearized_drift_raw(&qrow, &z, params);
        out.resize(depth + 1, 0.0);
        for (j, o) in out.iter_mut().enumerate().skip(1) {
            *o += phi.lerp(m, s, j);
        }
        out[0] = 0.0;
        out
    };
    let mut w = vec![0.0; depth + 1];
    let mut values = Vec::with_capacity(phi.grid_points());
    let shift = |m: usize, w: &[f64]| -> Vec<f64> {
        let m_ = m.min(phi.intervals());
        (0..=depth).map(|j| w[j] + eps.map_or(0.0, |e| e.at(m_, j))).collect()
    };
    values.push(shift(0, &w));
    for m in 0..phi.intervals() {
        let k1 = point(m, 0.0, &w);
        let w2: Vec<f64> = (0..=depth).map(|j| w[j] + 0.5 * h * k1[j]).collect();
        let k2 = point(m, 0.5, &w2);
        let w3: Vec<f64> = (0..=depth).map(|j| w[j] + 0.5 * h * k2[j]).collect();
        let k3 = point(m, 0.5, &w3);
        let w4: Vec<f64> = (0..=depth).map(|j| w[j] + h * k3[j]).collect();
        let k4 = point(m, 1.0, &w4);
        for j in 0..=depth {
            w[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        values.push(shift(m + 1, &w));
    }
    PLPath::new(phi.horizon(), values)
}

/// Rate of an occupancy-measure deviation `eta_tilde` through the tail sums
/// `eta_i = sum_{j >= i} eta_tilde_j`.
pub fn rate_i_mu(eta_tilde: &PLPath, q: &PLPath, params: &ModelParams) -> Result<RateBreakdown> {
    check_pair(eta_tilde, q, "rate_I_mu")?;
    let e = eta_tilde.materialized();
    let depth = e.depth();
    let mut values = Vec::with_capacity(e.grid_points());
    for m in 0..e.grid_points() {
        let row = e.row(m);
        let mut tail = vec![0.0; depth + 1];
        let mut acc = 0.0;
        for j in (0..=depth).rev() {
            acc += row[j];
            tail[j] = acc;
        }
        let scale: f64 = row.iter().map(|x| x.abs()).sum();
        if tail[0].abs() > 1e-12 * scale {
            return Ok(RateBreakdown::infinite(format!(
                "mass not conserved: sum of eta_tilde is {} at t = {}",
                tail[0],
                e.time(m)
            )));
        }
        tail[0] = 0.0;
        values.push(tail);
    }
    rate_i(&PLPath::new(e.horizon(), values)?, q, params)
}

/// A time-constant reference profile held in log form.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    /// `ln Q_j` for `j = 0..=depth + 1`; `-inf` for empty levels.
    ln_q: Vec<f64>,
    buffer: Option<usize>,
}

impl Reference {
    /// The unbuffered stationary profile `Q*` through level `depth + 1`.
    pub fn stationary(params: &ModelParams, depth: usize) -> Result<Self> {
        let s = LogStationary::new(params, depth + 1)?;
        Ok(Self {
            ln_q: (0..=depth + 1).map(|j| s.ln(j)).collect(),
            buffer: None,
        })
    }

    /// The buffered fixed point `Q*(K)`.
    pub fn buffered(params: &ModelParams, k: usize) -> Result<Self> {
        let b = BufferedProfile::new(params, k)?;
        Ok(Self {
            ln_q: (0..=k + 1).map(|j| b.ln(j)).collect(),
            buffer: Some(k),
        })
    }

    fn ln(&self, j: usize) -> f64 {
        self.ln_q.get(j).copied().unwrap_or(f64::NEG_INFINITY)
    }

    pub fn value(&self, j: usize) -> f64 {
        self.ln(j).exp()
    }

    /// Materialized profile as a constant path.
    pub fn to_path(&self, t_max: f64, intervals: usize) -> Result<PLPath> {
        let row: Vec<f64> = self.ln_q.iter().map(|l| l.exp()).collect();
        PLPath::constant(&row, t_max, intervals)
    }

    /// `ln denom_j`.
    fn ln_event_rate(&self, j: usize, lambda: f64, d: f64) -> f64 {
        let ln_diff = |a: f64, b: f64| {
            if b == f64::NEG_INFINITY {
                a
            } else if b >= a {
                f64::NEG_INFINITY
            } else {
                a + ln_one_minus_exp(b - a)
            }
        };
        let arrivals = ln_diff(lambda.ln() + d * self.ln(j - 1), lambda.ln() + d * self.ln(j));
        let next = if self.buffer == Some(j) { f64::NEG_INFINITY } else { self.ln(j + 1) };
        let services = ln_diff(self.ln(j), next);
        crate::fluid::ln_add_exp(arrivals, services)
    }
}

/// `x^{d-1}` from `ln x`, with `0^0 = 1`.
fn pow_dm1(ln_x: f64, d: u32) -> f64 {
    if d == 1 {
        1.0
    } else {
        ((d - 1) as f64 * ln_x).exp()
    }
}

/// `I(eta)` against a constant reference, evaluated in log space.
///
/// Equal to [`rate_i`] against the materialized reference whenever the
/// latter is representable; also exact where `Q_j` or `eta_j` underflow.
pub fn rate_stationary(eta: &PLPath, reference: &Reference, params: &ModelParams) -> Result<RateBreakdown> {
    eta.validate()?;
    let depth = eta.depth();
    let top = match reference.buffer {
        Some(k) => k.min(depth),
        None => depth,
    };
    let lambda = params.lambda;
    let d = params.d as f64;
    let ld = lambda * d;
    let h = eta.step();
    let sigma = |j: usize| if j > depth { f64::NEG_INFINITY } else { eta.log_scale_at(j) };
    let raw = |m: usize, s: f64, j: usize| {
        if j > depth {
            0.0
        } else {
            let a = eta.raw(m, j);
            a + (eta.raw(m + 1, j) - a) * s
        }
    };
    let mut terms = vec![0.0; top + 1];
    let mut reason = None;
    for j in 1..=top {
        let ln_den = reference.ln_event_rate(j, lambda, d);
        let has_next = reference.buffer != Some(j);
        if ln_den == f64::NEG_INFINITY {
            let moves = (0..eta.grid_points()).any(|m| {
                eta.raw(m, j) != 0.0 || (j > 1 && eta.raw(m, j - 1) != 0.0) || (has_next && j < depth && eta.raw(m, j + 1) != 0.0)
            });
            if moves {
                reason.get_or_insert_with(|| format!("coordinate {j}: path moves where the event rate vanishes"));
                terms[j] = f64::INFINITY;
            }
            continue;
        }
        let half = 0.5 * ln_den;
        let a = (sigma(j) - half).exp();
        let kappa = ld * pow_dm1(reference.ln(j), params.d) + 1.0;
        let b = if j == 1 {
            0.0
        } else {
            ld * ((d - 1.0) * reference.ln(j - 1) + sigma(j - 1) - half).exp()
        };
        let c = if has_next { (sigma(j + 1) - half).exp() } else { 0.0 };
        let mut acc = 0.0;
        for m in 0..eta.intervals() {
            let slope = (eta.raw(m + 1, j) - eta.raw(m, j)) / h;
            for &(s, w) in &GL3 {
                let v = a * (slope + kappa * raw(m, s, j)) - b * raw(m, s, j - 1) - c * raw(m, s, j + 1);
                acc += w * v * v;
            }
        }
        terms[j] = 0.5 * h * acc;
    }
    Ok(RateBreakdown::from_terms(terms, reason))
}

/// Which stationary rate [`rate_buffered`] evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BufferedMode {
    /// `I^{Q*(K)}(q^K)`: truncated path against the buffered fixed point.
    Buffered,
    /// `I^{Q*}(q^K)`: truncated path against the unbuffered profile.
    Truncated,
}

fn require_stationary_lambda(params: &ModelParams) -> Result<()> {
    if !(params.lambda < 1.0) {
        return Err(Error::domain("lambda must be < 1 for stationary-profile rates"));
    }
    Ok(())
}

/// Rate of the truncated path `q^K` (coordinates above `K` zeroed).
pub fn rate_buffered(q: &PLPath, k: usize, params: &ModelParams, mode: BufferedMode) -> Result<RateBreakdown> {
    require_stationary_lambda(params)?;
    if k < 1 {
        return Err(Error::domain("K must be >= 1"));
    }
    let qk = q.truncated(k);
    match mode {
        BufferedMode::Buffered => rate_stationary(&qk, &Reference::buffered(params, k)?, params),
        BufferedMode::Truncated => {
            let depth = qk.depth().max(k + 1);
            let padded = pad_depth(&qk, depth)?;
            rate_stationary(&padded, &Reference::stationary(params, depth)?, params)
        }
    }
}

fn pad_depth(p: &PLPath, depth: usize) -> Result<PLPath> {
    if p.depth() >= depth {
        return Ok(p.clone());
    }
    let values = p
        .raw_values()
        .iter()
        .map(|row| {
            let mut r = row.clone();
            r.resize(depth + 1, 0.0);
            r
        })
        .collect();
    let out = PLPath::new(p.horizon(), values)?;
    match p.log_scale() {
        Some(ls) => {
            let mut ls = ls.to_vec();
            ls.resize(depth + 1, 0.0);
            out.with_log_scale(ls)
        }
        None => Ok(out),
    }
}

/// `int |q_K' + q_K - q_{K+1}|^2 / (2 Q*_K) dt`.
pub fn tail_criterion(q: &PLPath, k: usize, params: &ModelParams) -> Result<f64> {
    require_stationary_lambda(params)?;
    if k < 1 || k + 1 > q.depth() {
        return Err(Error::domain(format!("need 1 <= K <= depth - 1, got K = {k}, depth = {}", q.depth())));
    }
    q.validate()?;
    let s = LogStationary::new(params, k)?;
    let half = 0.5 * s.ln(k);
    let a = (q.log_scale_at(k) - half).exp();
    let c = (q.log_scale_at(k + 1) - half).exp();
    let h = q.step();
    let mut acc = 0.0;
    for m in 0..q.intervals() {
        let slope = (q.raw(m + 1, k) - q.raw(m, k)) / h;
        for &(sn, w) in &GL3 {
            let lerp = |j: usize| q.raw(m, j) + (q.raw(m + 1, j) - q.raw(m, j)) * sn;
            let v = a * (slope + lerp(k)) - c * lerp(k + 1);
            acc += w * v * v;
        }
    }
    Ok(0.5 * h * acc)
}

/// The three test trajectories of the convergence study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    /// Monotone on `[0, 1]` and `[1, 2]`.
    A,
    /// Tent supported on `[0, 2/j]`.
    B,
    /// Rise on `[0, 1/j]`, fall on `[1/j, T]`.
    C,
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Family::A),
            "B" | "b" => Ok(Family::B),
            "C" | "c" => Ok(Family::C),
            _ => Err(Error::config(format!("unknown family {s:?} (expected A, B or C)"))),
        }
    }
}

impl Family {
    /// Shape `g_j(t)` with `q_j = c_j sqrt(Q*_j) g_j`.
    pub fn shape(self, j: usize, t: f64) -> f64 {
        let jf = j as f64;
        match self {
            Family::A => {
                let r = 1.0 - 1.0 / jf;
                if t <= 1.0 {
                    r * t
                } else {
                    r * (2.0 - t)
                }
            }
            Family::B => {
                if t <= 1.0 / jf {
                    t
                } else if t <= 2.0 / jf {
                    2.0 / jf - t
                } else {
                    0.0
                }
            }
            Family::C => {
                if t <= 1.0 / jf {
                    t
                } else {
                    2.0 / jf - t
                }
            }
        }
    }
}

/// `c_j = 1/j`.
pub fn harmonic(depth: usize) -> Vec<f64> {
    (0..=depth).map(|j| if j == 0 { 0.0 } else { 1.0 / j as f64 }).collect()
}

/// `q_j(t) = c_j sqrt(Q*_j) g_j(t)`, stored with log scale `ln sqrt(Q*_j)`.
pub fn family_trajectory(
    kind: Family,
    coeffs: &[f64],
    t_max: f64,
    params: &ModelParams,
    depth: usize,
    intervals: usize,
) -> Result<PLPath> {
    require_stationary_lambda(params)?;
    if coeffs.len() <= depth {
        return Err(Error::Shape(format!("need {} coefficients, got {}", depth + 1, coeffs.len())));
    }
    let s = LogStationary::new(params, depth)?;
    let scale: Vec<f64> = (0..=depth).map(|j| if j == 0 { 0.0 } else { 0.5 * s.ln(j) }).collect();
    PLPath::from_fn(t_max, intervals, |t| {
        (0..=depth)
            .map(|j| if j == 0 { 0.0 } else { coeffs[j] * kind.shape(j, t) })
            .collect()
    })?
    .with_log_scale(scale)
}

/// Tabulates `I^{Q*(K)}(q^K)`, `I^{Q*}(q^K)`, the tail criterion and their
/// gaps to `I^{Q*}(q)` for `K = 2..=k_max`.
pub fn convergence_study(q: &PLPath, k_max: usize, params: &ModelParams) -> Result<ExperimentReport> {
    require_stationary_lambda(params)?;
    if k_max < 2 || k_max + 1 > q.depth() {
        return Err(Error::config(format!(
            "kmax must lie in [2, depth - 1] = [2, {}]",
            q.depth().saturating_sub(1)
        )));
    }
    let full = rate_stationary(q, &Reference::stationary(params, q.depth())?, params)?;
    let mut report = ExperimentReport::new(
        "convergence",
        &["K", "I_buffered", "I_truncated", "I_full", "gap", "gap_truncated", "criterion"],
    );
    for k in 2..=k_max {
        let buffered = rate_buffered(q, k, params, BufferedMode::Buffered)?.total;
        let truncated = rate_buffered(q, k, params, BufferedMode::Truncated)?.total;
        let criterion = tail_criterion(q, k, params)?;
        report.push(vec![
            k as f64,
            buffered,
            truncated,
            full.total,
            (buffered - full.total).abs(),
            (truncated - full.total).abs(),
            criterion,
        ]);
    }
    let gap = report.column("gap").unwrap();
    let crit = report.column("criterion").unwrap();
    report.notes.push(format!("spearman(gap, criterion) = {}", spearman(&gap, &crit)));
    report.notes.push(format!(
        "depth {} truncation term {:e} ({})",
        q.depth(),
        full.truncation,
        if full.truncation_ok() { "ok" } else { "above 1e-10" }
    ));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fluid::stationary_profile;

    fn setup(depth: usize, intervals: usize) -> (ModelParams, PLPath) {
        let params = ModelParams::new(0.5, 2);
        let q = stationary_profile(&params, depth + 1).unwrap();
        (params, PLPath::constant(q.values(), 1.0, intervals).unwrap())
    }

    fn ramp(depth: usize, intervals: usize) -> PLPath {
        PLPath::from_fn(1.0, intervals, |t| {
            let mut v = vec![0.0; depth + 1];
            v[1] = 0.1 * t;
            v
        })
        .unwrap()
    }

    #[test]
    fn ramp_residual_by_hand() {
        let (params, q) = setup(4, 10);
        let eta = ramp(4, 10);
        let phi = phi_from_path(&eta, &q, &params).unwrap();
        for m in 0..=10 {
            let t = phi.time(m);
            assert!((phi.at(m, 1) - 0.1 * (1.0 + 1.5 * t)).abs() < 1e-14);
            assert!((phi.at(m, 2) + 0.05 * t).abs() < 1e-15);
            assert_eq!(phi.at(m, 3), 0.0);
        }
    }

    #[test]
    fn ramp_rate_closed_form() {
        // 1/2 (0.0325 / 0.75 + (0.0025/3) / 0.234375)
        let expected: f64 = 0.5 * (0.0325 / 0.75 + (0.0025 / 3.0) / 0.234375);
        assert!((expected - 0.0234444).abs() < 1e-6);
        let (params, q) = setup(6, 50);
        let r = rate_i(&ramp(6, 50), &q, &params).unwrap();
        assert!((r.total - expected).abs() < 1e-12, "{}", r.total);
        let reference = Reference::stationary(&params, 6).unwrap();
        let s = rate_stationary(&ramp(6, 50), &reference, &params).unwrap();
        assert!((s.total - expected).abs() < 1e-12, "{}", s.total);
    }

    #[test]
    fn zero_path_zero_rate() {
        let (params, q) = setup(5, 20);
        let zero = PLPath::zeros(6, 1.0, 20).unwrap();
        assert_eq!(rate_i(&zero, &q, &params).unwrap().total, 0.0);
        let phi = phi_from_path(&zero, &q, &params).unwrap();
        assert!(phi.raw_values().iter().flatten().all(|&x| x == 0.0));
        let eta = solve_controlled_ode(&phi, &q, &params, None).unwrap();
        assert!(eta.raw_values().iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn controlled_ode_small_time() {
        let (params, q) = setup(5, 100);
        let q = PLPath::constant(&q.row(0), 0.01, 100).unwrap();
        let phi = Control::new(
            PLPath::constant(&[0.0, 1.0, 0.0, 0.0, 0.0, 0.0], 0.01, 100).unwrap(),
        )
        .unwrap();
        let eta = solve_controlled_ode(&phi, &q, &params, None).unwrap();
        let t: f64 = 0.01;
        assert!((eta.at(100, 1) - (t - 0.75 * t * t)).abs() < 1e-6);
    }

    #[test]
    fn epsilon_forcing_shifts_start() {
        let (params, q) = setup(3, 20);
        let zero = Control::new(PLPath::zeros(4, 1.0, 20).unwrap()).unwrap();
        let eps = PLPath::constant(&[0.0, 0.01, 0.0, 0.0], 1.0, 20).unwrap();
        let z = solve_controlled_ode(&zero, &q, &params, Some(&eps)).unwrap();
        assert_eq!(z.at(0, 1), 0.01);
        // z_1' = -1.5 z_1 + z_2 near t = 0
        assert!(z.at(1, 1) < 0.01);
    }

    #[test]
    fn mu_rate_matches_tail_sums() {
        let (params, q) = setup(6, 50);
        let mu = PLPath::from_fn(1.0, 50, |t| {
            let mut v = vec![0.0; 7];
            v[0] = -0.1 * t;
            v[1] = 0.1 * t;
            v
        })
        .unwrap();
        let a = rate_i_mu(&mu, &q, &params).unwrap();
        let b = rate_i(&ramp(6, 50), &q, &params).unwrap();
        assert!((a.total - b.total).abs() < 1e-15);
        let leaky = PLPath::from_fn(1.0, 50, |t| {
            let mut v = vec![0.0; 7];
            v[0] = 0.01;
            v[1] = 0.1 * t;
            v
        })
        .unwrap();
        let r = rate_i_mu(&leaky, &q, &params).unwrap();
        assert!(!r.is_finite());
        assert!(r.reason.unwrap().contains("mass not conserved"));
    }

    #[test]
    fn vanishing_rate_is_infinite() {
        let params = ModelParams::new(0.5, 2);
        // empty system: level 2 has no events
        let q = PLPath::constant(&[1.0, 0.0, 0.0, 0.0], 1.0, 10).unwrap();
        let eta = PLPath::from_fn(1.0, 10, |t| vec![0.0, 0.0, 0.1 * t, 0.0]).unwrap();
        let r = rate_i(&eta, &q, &params).unwrap();
        assert!(!r.is_finite());
        assert!(r.reason.as_deref().unwrap().starts_with("coordinate 2"));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"total\":\"inf\""));
        let back: RateBreakdown = serde_json::from_str(&json).unwrap();
        assert!(back.total.is_infinite());
    }

    #[test]
    fn event_rate_is_twice_the_gap_at_stationarity() {
        let params = ModelParams::new(0.5, 2);
        let r = Reference::stationary(&params, 30).unwrap();
        let s = LogStationary::new(&params, 31).unwrap();
        for j in 1..=30 {
            let got = r.ln_event_rate(j, 0.5, 2.0);
            let want = 2f64.ln() + s.ln_gap(j);
            assert!((got - want).abs() < 1e-12 * want.abs().max(1.0), "j {j}: {got} vs {want}");
        }
    }

    #[test]
    fn buffered_k1_terms() {
        let params = ModelParams::new(0.5, 2);
        let eta = PLPath::from_fn(1.0, 40, |t| vec![0.0, 0.1 * t, 0.0, 0.0]).unwrap();
        let q1 = 2f64.sqrt() - 1.0;
        // phi_1 = 0.1 + (2 * 0.5 * Q*_1(1) + 1) * 0.1 t, denom 2 Q*_1(1)
        let k = 1.0 + q1;
        let want = 0.5 * 0.01 * (1.0 + k + k * k / 3.0) / (2.0 * q1);
        let b = rate_buffered(&eta, 1, &params, BufferedMode::Buffered).unwrap();
        assert!((b.total - want).abs() < 1e-12, "{} vs {want}", b.total);
        // unbuffered j = 1 term: 0.0325 / 0.75 / 2
        let u = rate_stationary(&eta, &Reference::stationary(&params, 3).unwrap(), &params).unwrap();
        assert!((u.per_coordinate[1] - 0.0325 / 1.5).abs() < 1e-12);
        // the denominators differ by (Q*_1 - Q*_2) / Q*_1(1) = 0.375 / 0.41421
        let ratio = (0.5 - 0.125) / q1;
        assert!((ratio - 0.375 / 0.41421356).abs() < 1e-8);
    }

    #[test]
    fn families_are_continuous_and_supported() {
        let params = ModelParams::new(0.5, 2);
        let q = family_trajectory(Family::A, &harmonic(8), 2.0, &params, 8, 2000).unwrap();
        assert!((0..=2000).all(|m| q.at(m, 1) == 0.0));
        assert!((q.at(1000, 2) - 0.5 * 0.125f64.sqrt() * 0.5).abs() < 1e-15);
        let b = family_trajectory(Family::B, &harmonic(8), 2.0, &params, 8, 2000).unwrap();
        for j in 1..=8 {
            for m in 0..=2000 {
                if b.time(m) >= 2.0 / j as f64 {
                    assert_eq!(b.raw(m, j), 0.0);
                }
            }
        }
        for kind in [Family::A, Family::B, Family::C] {
            for j in 1..6 {
                for &t in &[1.0, 1.0 / j as f64, 2.0 / j as f64] {
                    let l = kind.shape(j, t - 1e-12);
                    let r = kind.shape(j, t + 1e-12);
                    assert!((l - r).abs() < 1e-9, "{kind:?} j {j} t {t}");
                }
            }
        }
    }

    #[test]
    fn scaled_and_materialized_agree() {
        let params = ModelParams::new(0.5, 2);
        let q = family_trajectory(Family::C, &harmonic(6), 2.0, &params, 6, 400).unwrap();
        let reference = Reference::stationary(&params, 6).unwrap();
        let a = rate_stationary(&q, &reference, &params).unwrap();
        let qpath = reference.to_path(2.0, 400).unwrap();
        let b = rate_i(&q, &qpath, &params).unwrap();
        assert!((a.total - b.total).abs() < 1e-10 * a.total, "{} vs {}", a.total, b.total);
    }

    #[test]
    fn deep_family_paths_stay_finite() {
        let params = ModelParams::new(0.5, 2);
        let q = family_trajectory(Family::B, &harmonic(40), 2.0, &params, 40, 2000).unwrap();
        let r = rate_stationary(&q, &Reference::stationary(&params, 40).unwrap(), &params).unwrap();
        assert!(r.is_finite() && r.total > 0.0);
        assert!(r.per_coordinate[40] > 0.0);
    }

    #[test]
    fn zero_path_study_is_zero() {
        let params = ModelParams::new(0.5, 2);
        let q = PLPath::zeros(12, 2.0, 100).unwrap();
        let report = convergence_study(&q, 10, &params).unwrap();
        assert_eq!(report.rows.len(), 9);
        assert!(report.rows.iter().all(|r| r[1..].iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn stationary_lambda_guard() {
        let params = ModelParams::new(1.2, 2);
        let q = PLPath::zeros(5, 1.0, 10).unwrap();
        let err = rate_buffered(&q, 3, &params, BufferedMode::Buffered).unwrap_err();
        assert!(err.to_string().contains("lambda must be < 1 for stationary-profile rates"));
    }
}
