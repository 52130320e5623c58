//! Mean-field fluid limit: RK4 integration of `Q' = b(Q)`, the closed-form
//! stationary profile, and the fixed point of the buffered system.
//!
//! The stationary tails decay doubly exponentially, so both profiles are also
//! available in log form ([`LogStationary`], [`BufferedProfile`]); those keep
//! full relative precision at levels where `Q*_j` underflows `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::occupancy::{drift_limit_raw, l2_norm, ModelParams, QVector};
use crate::path::PLPath;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluidOpts {
    /// RK4 step `h`.
    pub step: f64,
    /// Bound on the step-halving error estimate (max norm over the grid).
    pub tolerance: f64,
    /// Number of output subintervals on `[0, T]`.
    pub intervals: usize,
}

impl Default for FluidOpts {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-8,
            intervals: 1000,
        }
    }
}

impl FluidOpts {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(Error::config("fluid step must be positive"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::config("fluid tolerance must be positive"));
        }
        if self.intervals == 0 {
            return Err(Error::config("need at least one output interval"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FluidSolution {
    pub path: PLPath,
    /// `|y_h - y_{h/2}| * 16/15`, max over grid points and coordinates.
    pub error_estimate: f64,
    /// `lambda (q_{J-1}^d - q_J^d) + q_J` at the final time (0 when buffered).
    pub closure_residual: f64,
}

const CLOSURE_LIMIT: f64 = 1e-13;

fn rk4_step(y: &mut [f64], h: f64, params: &ModelParams) {
    let n = y.len();
    let k1 = drift_limit_raw(y, params);
    let y2: Vec<f64> = (0..n).map(|i| y[i] + 0.5 * h * k1[i]).collect();
    let k2 = drift_limit_raw(&y2, params);
    let y3: Vec<f64> = (0..n).map(|i| y[i] + 0.5 * h * k2[i]).collect();
    let k3 = drift_limit_raw(&y3, params);
    let y4: Vec<f64> = (0..n).map(|i| y[i] + h * k3[i]).collect();
    let k4 = drift_limit_raw(&y4, params);
    for i in 0..n {
        y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

fn integrate_grid(q0: &[f64], params: &ModelParams, horizon: f64, intervals: usize, substeps: usize) -> Vec<Vec<f64>> {
    let h = horizon / intervals as f64 / substeps as f64;
    let mut y = q0.to_vec();
    let mut out = Vec::with_capacity(intervals + 1);
    out.push(y.clone());
    for _ in 0..intervals {
        for _ in 0..substeps {
            rk4_step(&mut y, h, params);
        }
        out.push(y.clone());
    }
    out
}

/// Integrates the fluid ODE from `q0` over `[0, horizon]` with fixed-step RK4.
///
/// The run is repeated with half the step; if the difference exceeds
/// `opts.tolerance` a [`Error::RefineStep`] carrying a suggested step is
/// returned. Coordinates above the truncation depth are held at zero.
pub fn integrate_fluid(q0: &QVector, params: &ModelParams, opts: &FluidOpts, horizon: f64) -> Result<FluidSolution> {
    params.validate()?;
    opts.validate()?;
    if !(horizon > 0.0) {
        return Err(Error::config("horizon must be positive"));
    }
    let depth = params.depth;
    let mut start: Vec<f64> = (0..=depth).map(|i| q0.get(i)).collect();
    if let Some(k) = params.buffer {
        for v in start.iter_mut().skip(k as usize + 1) {
            *v = 0.0;
        }
    }
    let dt = horizon / opts.intervals as f64;
    let substeps = (dt / opts.step).ceil().max(1.0) as usize;
    let coarse = integrate_grid(&start, params, horizon, opts.intervals, substeps);
    let fine = integrate_grid(&start, params, horizon, opts.intervals, 2 * substeps);
    let diff = coarse
        .iter()
        .zip(&fine)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    let estimate = diff * 16.0 / 15.0;
    let h = dt / substeps as f64;
    if estimate > opts.tolerance {
        return Err(Error::RefineStep {
            estimate,
            tolerance: opts.tolerance,
            suggested: 0.9 * h * (opts.tolerance / estimate).powf(0.25),
        });
    }
    let last = coarse.last().expect("grid has points");
    let closure_residual = if params.buffer.is_some() {
        0.0
    } else {
        let d = params.d as i32;
        params.lambda * (last[depth - 1].powi(d) - last[depth].powi(d)) + last[depth]
    };
    if closure_residual.abs() >= CLOSURE_LIMIT {
        return Err(Error::DepthTooSmall {
            depth,
            residual: closure_residual,
        });
    }
    Ok(FluidSolution {
        path: PLPath::new(horizon, coarse)?,
        error_estimate: estimate,
        closure_residual,
    })
}

/// `||Q(t)||^2 <= 2 ||Q(0)||^2 exp(8 (lambda d + 1)^2 t)` along a path.
pub fn growth_bound_holds(path: &PLPath, params: &ModelParams) -> bool {
    let q0 = l2_norm(&path.row(0)).powi(2);
    let c = 8.0 * (params.lambda * params.d as f64 + 1.0).powi(2);
    (0..path.grid_points()).all(|m| l2_norm(&path.row(m)).powi(2) <= 2.0 * q0 * (c * path.time(m)).exp())
}

fn require_subcritical(params: &ModelParams) -> Result<()> {
    if !(params.lambda < 1.0) {
        return Err(Error::domain(format!(
            "stationary profile needs lambda < 1, got {}",
            params.lambda
        )));
    }
    if !(params.lambda > 0.0) {
        return Err(Error::domain("stationary profile needs lambda > 0"));
    }
    Ok(())
}

/// `(d^j - 1) / (d - 1) = sum_{k<j} d^k`, with the `d = 1` limit `j`.
fn stationary_exponent(d: u32, j: usize) -> f64 {
    let d = d as f64;
    let mut acc = 0.0;
    let mut pow = 1.0;
    for _ in 0..j {
        acc += pow;
        pow *= d;
    }
    acc
}

/// Natural logs of the unbuffered stationary profile, `ln Q*_j = e_j ln lambda`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogStationary {
    pub lambda: f64,
    pub d: u32,
    ln_q: Vec<f64>,
}

impl LogStationary {
    pub fn new(params: &ModelParams, depth: usize) -> Result<Self> {
        require_subcritical(params)?;
        let ln_lambda = params.lambda.ln();
        let ln_q = (0..=depth)
            .map(|j| stationary_exponent(params.d, j) * ln_lambda)
            .collect();
        Ok(Self {
            lambda: params.lambda,
            d: params.d,
            ln_q,
        })
    }

    pub fn depth(&self) -> usize {
        self.ln_q.len() - 1
    }

    /// `ln Q*_j`.
    pub fn ln(&self, j: usize) -> f64 {
        self.ln_q[j]
    }

    /// `ln (Q*_j - Q*_{j+1})`.
    pub fn ln_gap(&self, j: usize) -> f64 {
        self.ln_q[j] + ln_one_minus_exp(self.ln_q[j + 1] - self.ln_q[j])
    }

    pub fn value(&self, j: usize) -> f64 {
        self.ln_q[j].exp()
    }
}

/// `ln(1 - e^x)` for `x <= 0`.
pub fn ln_one_minus_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// Closed-form stationary profile `Q*_j = lambda^{(d^j - 1)/(d - 1)}`.
pub fn stationary_profile(params: &ModelParams, depth: usize) -> Result<QVector> {
    let log = LogStationary::new(params, depth)?;
    let mut values: Vec<f64> = (0..=depth).map(|j| params.lambda.powf(stationary_exponent(params.d, j))).collect();
    values[0] = 1.0;
    debug_assert!(values.iter().zip(&log.ln_q).all(|(v, l)| !v.is_normal() || (v.ln() - l).abs() < 1e-9 * l.abs().max(1.0)));
    QVector::new(values)
}

/// Fixed point of the buffered fluid ODE in relative form.
///
/// With `Q*_j(K) = Q*_j (1 - s_j)` the fixed-point recursion becomes
/// `s_j = 1 - (1 - s_{j-1})^d + x Q*_{K+1} / Q*_j`, where
/// `x = e / Q*_{K+1}` and `e = lambda (Q*_K(K))^d`; `x` solves
/// `d ln(1 - s_K(x)) = ln x` and is found by bisection on `[0, 1]`.
/// The deficits are kept as `ln s_j` since they fall far below `f64` range
/// at low levels once `K` is moderately large.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferedProfile {
    pub k: usize,
    unbuffered: LogStationary,
    ln_deficit: Vec<f64>,
    x: f64,
}

/// `ln(e^a + e^b)`.
pub fn ln_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(1 - (1 - s)^d)` from `ln s`.
fn ln_carry(ln_s: f64, d: f64) -> f64 {
    if ln_s == f64::NEG_INFINITY {
        return ln_s;
    }
    if ln_s < -700.0 {
        // 1 - (1 - s)^d = d s (1 + O(s)) and s is below 1e-304 here
        return d.ln() + ln_s;
    }
    (-(d * (-ln_s.exp()).ln_1p()).exp_m1()).ln()
}

impl BufferedProfile {
    pub fn new(params: &ModelParams, k: usize) -> Result<Self> {
        require_subcritical(params)?;
        if k < 1 {
            return Err(Error::domain("buffer must be >= 1"));
        }
        let unbuffered = LogStationary::new(params, k + 2)?;
        let d = params.d as f64;
        let ln_deficits = |x: f64| -> Option<Vec<f64>> {
            let mut ls = vec![f64::NEG_INFINITY; k + 1];
            for j in 1..=k {
                let inject = x.ln() + unbuffered.ln(k + 1) - unbuffered.ln(j);
                ls[j] = ln_add_exp(ln_carry(ls[j - 1], d), inject);
                if !(ls[j] < 0.0) {
                    return None;
                }
            }
            Some(ls)
        };
        let residual = |x: f64| match ln_deficits(x) {
            // log form keeps the sign when s_K is below machine epsilon
            Some(ls) => d * (-ls[k].exp()).ln_1p() - x.ln(),
            None => -1.0,
        };
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        if !(residual(lo) > 0.0) {
            return Err(Error::Internal("buffered fixed point: no sign change".into()));
        }
        if residual(hi) < 0.0 {
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if residual(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        } else {
            // s_K underflows: x = 1 to working precision
            lo = 1.0;
        }
        let x = 0.5 * (lo + hi);
        let ln_deficit =
            ln_deficits(x).ok_or_else(|| Error::Internal("buffered fixed point left the feasible set".into()))?;
        Ok(Self {
            k,
            unbuffered,
            ln_deficit,
            x,
        })
    }

    /// The unbuffered profile this one is measured against.
    pub fn unbuffered(&self) -> &LogStationary {
        &self.unbuffered
    }

    /// Relative deficit `s_j = 1 - Q*_j(K)/Q*_j` for `0 <= j <= K`.
    pub fn deficit(&self, j: usize) -> f64 {
        self.ln_deficit[j].exp()
    }

    /// `ln s_j`.
    pub fn ln_deficit(&self, j: usize) -> f64 {
        self.ln_deficit[j]
    }

    /// `ln Q*_j(K)`; `-inf` above `K`.
    pub fn ln(&self, j: usize) -> f64 {
        if j > self.k {
            f64::NEG_INFINITY
        } else {
            self.unbuffered.ln(j) + (-self.deficit(j)).ln_1p()
        }
    }

    /// `ln (Q*_j(K) - Q*_{j+1}(K))`, with `Q*_{K+1}(K) = 0`.
    pub fn ln_gap(&self, j: usize) -> f64 {
        if j >= self.k {
            self.ln(j)
        } else {
            self.ln(j) + ln_one_minus_exp(self.ln(j + 1) - self.ln(j))
        }
    }

    pub fn value(&self, j: usize) -> f64 {
        self.ln(j).exp()
    }

    /// `e(K) = lambda (Q*_K(K))^d`.
    pub fn e(&self) -> f64 {
        self.x * self.unbuffered.value(self.k + 1)
    }

    /// `ln e(K)`.
    pub fn ln_e(&self) -> f64 {
        self.x.ln() + self.unbuffered.ln(self.k + 1)
    }

    /// `max_j (Q*_j - Q*_j(K)) / Q*_K`, computed in log space.
    pub fn gap_ratio(&self) -> f64 {
        self.ln_gap_ratio().exp()
    }

    pub fn ln_gap_ratio(&self) -> f64 {
        (1..=self.k)
            .map(|j| self.ln_deficit[j] + self.unbuffered.ln(j) - self.unbuffered.ln(self.k))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `gap_ratio / (Q*_K)^{d-1}`.
    pub fn gap_constant(&self) -> f64 {
        let d = self.unbuffered.d as f64;
        (self.ln_gap_ratio() - (d - 1.0) * self.unbuffered.ln(self.k)).exp()
    }
}

/// Materialized buffered stationary profile `Q*(K)` padded to `params.depth`.
pub fn stationary_profile_buffered(params: &ModelParams) -> Result<QVector> {
    let k = params
        .buffer
        .ok_or_else(|| Error::domain("buffered profile needs a buffer size"))? as usize;
    let profile = BufferedProfile::new(params, k)?;
    let depth = params.depth.max(k + 1);
    let mut values = vec![0.0; depth + 1];
    values[0] = 1.0;
    for (j, v) in values.iter_mut().enumerate().take(k + 1).skip(1) {
        *v = profile.value(j);
    }
    QVector::new(values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub k: usize,
    pub e: f64,
    /// `max_j (Q*_j - Q*_j(K)) / Q*_K`.
    pub ratio: f64,
    /// `ratio / (Q*_K)^{d-1}`.
    pub constant: f64,
    /// Whether `0 < Q*_j(K) < Q*_j` for all `1 <= j <= K`.
    pub ordered: bool,
    /// Whether `e(K) < lambda (Q*_K)^d`.
    pub e_below: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryReport {
    pub profile: Vec<f64>,
    pub buffered: Vec<f64>,
    /// Per-level gaps `Q*_j - Q*_j(K)` at the largest K of the range.
    pub gaps: Vec<f64>,
    /// `e(K)` at the largest K of the range.
    pub e: f64,
    /// Smallest constant making the gap bound hold over the range.
    #[serde(rename = "fitted_C")]
    pub fitted_c: f64,
    pub rows: Vec<GapRow>,
}

/// Tabulates the buffered fixed point against the unbuffered one over `ks`.
pub fn buffer_gap_report(params: &ModelParams, ks: std::ops::RangeInclusive<usize>) -> Result<StationaryReport> {
    require_subcritical(params)?;
    let k_max = *ks.end();
    if ks.is_empty() || *ks.start() < 1 {
        return Err(Error::config("K range must be nonempty and start at 1 or above"));
    }
    let depth = params.depth.max(k_max + 2);
    let profile = stationary_profile(params, depth)?;
    let mut rows = Vec::new();
    let mut last = None;
    for k in ks {
        let b = BufferedProfile::new(params, k)?;
        let ordered = (1..=k).all(|j| b.ln_deficit(j) > f64::NEG_INFINITY && b.ln_deficit(j) < 0.0);
        // e(K) = lambda (Q*_K)^d (1 - s_K)^d, so the strict inequality is s_K > 0
        let e_below = b.ln_deficit(k) > f64::NEG_INFINITY;
        rows.push(GapRow {
            k,
            e: b.e(),
            ratio: b.gap_ratio(),
            constant: b.gap_constant(),
            ordered,
            e_below,
        });
        last = Some(b);
    }
    let last = last.expect("range is nonempty");
    let buffered: Vec<f64> = (0..=depth).map(|j| if j <= k_max { last.value(j) } else { 0.0 }).collect();
    let gaps = (1..=k_max).map(|j| (last.ln_deficit(j) + last.unbuffered().ln(j)).exp()).collect();
    let fitted_c = rows.iter().map(|r| r.constant).fold(0.0, f64::max);
    Ok(StationaryReport {
        profile: profile.into_values(),
        buffered,
        gaps,
        e: last.e(),
        fitted_c,
        rows,
    })
}
