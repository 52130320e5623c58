//! Piecewise-linear trajectories on a uniform time grid.
//!
//! Values are stored time-major: `values[m][j]` is coordinate `j` at
//! `t_m = m * T / M`. A path may carry a per-coordinate natural-log scale so
//! that coordinates far below `f64` range (e.g. `sqrt(Q*_j)` multiples for
//! large `j`) keep their relative precision; the materialized value is
//! `values[m][j] * exp(log_scale[j])`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PLPath {
    #[serde(rename = "T")]
    t_max: f64,
    grid_points: usize,
    coords: usize,
    values: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    log_scale: Option<Vec<f64>>,
}

impl PLPath {
    pub fn new(t_max: f64, values: Vec<Vec<f64>>) -> Result<Self> {
        if !(t_max > 0.0 && t_max.is_finite()) {
            return Err(Error::InvalidPath(format!("horizon must be positive, got {t_max}")));
        }
        if values.len() < 2 {
            return Err(Error::InvalidPath("need at least two grid points".into()));
        }
        let coords = values[0].len();
        if coords == 0 || values.iter().any(|row| row.len() != coords) {
            return Err(Error::InvalidPath("ragged or empty rows".into()));
        }
        Ok(Self {
            t_max,
            grid_points: values.len(),
            coords,
            values,
            log_scale: None,
        })
    }

    /// Samples `f(t)` at the `intervals + 1` grid points of `[0, t_max]`.
    pub fn from_fn(t_max: f64, intervals: usize, f: impl Fn(f64) -> Vec<f64>) -> Result<Self> {
        let h = t_max / intervals as f64;
        let values = (0..=intervals).map(|m| f(m as f64 * h)).collect();
        Self::new(t_max, values)
    }

    /// A path frozen at `value`.
    pub fn constant(value: &[f64], t_max: f64, intervals: usize) -> Result<Self> {
        Self::new(t_max, vec![value.to_vec(); intervals + 1])
    }

    pub fn zeros(coords: usize, t_max: f64, intervals: usize) -> Result<Self> {
        Self::new(t_max, vec![vec![0.0; coords]; intervals + 1])
    }

    /// Attaches a per-coordinate log scale.
    pub fn with_log_scale(mut self, log_scale: Vec<f64>) -> Result<Self> {
        if log_scale.len() != self.coords {
            return Err(Error::Shape(format!(
                "log scale has {} entries, path has {} coordinates",
                log_scale.len(),
                self.coords
            )));
        }
        self.log_scale = Some(log_scale);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.grid_points || self.values.iter().any(|r| r.len() != self.coords) {
            return Err(Error::InvalidPath("header does not match values".into()));
        }
        for (m, row) in self.values.iter().enumerate() {
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidPath(format!("non-finite value at grid point {m}, coordinate {j}")));
            }
        }
        if let Some(ls) = &self.log_scale {
            if ls.len() != self.coords || ls.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(Error::InvalidPath("bad log scale".into()));
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.t_max
    }

    /// Number of subintervals `M`.
    pub fn intervals(&self) -> usize {
        self.grid_points - 1
    }

    pub fn grid_points(&self) -> usize {
        self.grid_points
    }

    pub fn coords(&self) -> usize {
        self.coords
    }

    /// Highest coordinate index `J`.
    pub fn depth(&self) -> usize {
        self.coords - 1
    }

    pub fn step(&self) -> f64 {
        self.t_max / self.intervals() as f64
    }

    pub fn time(&self, m: usize) -> f64 {
        m as f64 * self.step()
    }

    /// Stored (unscaled) rows.
    pub fn raw_values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn log_scale(&self) -> Option<&[f64]> {
        self.log_scale.as_deref()
    }

    /// Natural log of the scale of coordinate `j` (0 when unscaled).
    pub fn log_scale_at(&self, j: usize) -> f64 {
        self.log_scale.as_ref().map_or(0.0, |s| s[j])
    }

    /// Stored mantissa of coordinate `j` at grid point `m`; zero past the depth.
    pub fn raw(&self, m: usize, j: usize) -> f64 {
        self.values[m].get(j).copied().unwrap_or(0.0)
    }

    /// Materialized value of coordinate `j` at grid point `m`; zero past the depth.
    pub fn at(&self, m: usize, j: usize) -> f64 {
        let v = self.raw(m, j);
        match &self.log_scale {
            Some(s) if j < self.coords => v * s[j].exp(),
            _ => v,
        }
    }

    /// Materialized row at grid point `m`.
    pub fn row(&self, m: usize) -> Vec<f64> {
        (0..self.coords).map(|j| self.at(m, j)).collect()
    }

    /// Linear interpolation inside subinterval `m` at local fraction `s` in `[0, 1]`.
    pub fn lerp(&self, m: usize, s: f64, j: usize) -> f64 {
        let a = self.at(m, j);
        let b = self.at(m + 1, j);
        a + (b - a) * s
    }

    /// Forward difference on subinterval `m`.
    pub fn slope(&self, m: usize, j: usize) -> f64 {
        (self.at(m + 1, j) - self.at(m, j)) / self.step()
    }

    /// Value at an arbitrary time by linear interpolation.
    pub fn sample(&self, t: f64) -> Vec<f64> {
        let (m, s) = self.locate(t);
        (0..self.coords).map(|j| self.lerp(m, s, j)).collect()
    }

    pub(crate) fn locate(&self, t: f64) -> (usize, f64) {
        let h = self.step();
        let t = t.clamp(0.0, self.t_max);
        let m = ((t / h).floor() as usize).min(self.intervals() - 1);
        (m, (t - m as f64 * h) / h)
    }

    /// True when both paths live on the same grid.
    pub fn same_grid(&self, other: &PLPath) -> bool {
        self.grid_points == other.grid_points && (self.t_max - other.t_max).abs() <= 1e-12 * self.t_max
    }

    pub(crate) fn require_same_grid(&self, other: &PLPath, what: &str) -> Result<()> {
        if !self.same_grid(other) {
            return Err(Error::Shape(format!(
                "{what}: grids differ ({} points on [0, {}] vs {} on [0, {}])",
                self.grid_points, self.t_max, other.grid_points, other.t_max
            )));
        }
        Ok(())
    }

    /// Scales every value by `c` (the log scale is kept).
    pub fn scaled(&self, c: f64) -> PLPath {
        let mut out = self.clone();
        for row in &mut out.values {
            for v in row.iter_mut() {
                *v *= c;
            }
        }
        out
    }

    /// Materialized copy without a log scale.
    pub fn materialized(&self) -> PLPath {
        let values = (0..self.grid_points).map(|m| self.row(m)).collect();
        PLPath {
            t_max: self.t_max,
            grid_points: self.grid_points,
            coords: self.coords,
            values,
            log_scale: None,
        }
    }

    /// Copy with coordinates above `k` zeroed.
    pub fn truncated(&self, k: usize) -> PLPath {
        let mut out = self.clone();
        for row in &mut out.values {
            for v in row.iter_mut().skip(k + 1) {
                *v = 0.0;
            }
        }
        out
    }

    /// CSV with header `t,<prefix>1,...,<prefix>J`; coordinate 0 is omitted.
    pub fn write_csv<W: Write>(&self, mut w: W, prefix: &str) -> std::io::Result<()> {
        let mut header = String::from("t");
        for j in 1..self.coords {
            header.push_str(&format!(",{prefix}{j}"));
        }
        writeln!(w, "{header}")?;
        for m in 0..self.grid_points {
            let mut line = crate::report::fmt_f64(self.time(m));
            for j in 1..self.coords {
                line.push(',');
                line.push_str(&crate::report::fmt_f64(self.at(m, j)));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Reduced control `phi_j(t)` on a path grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Control(PLPath);

impl Control {
    pub fn new(path: PLPath) -> Result<Self> {
        path.validate()?;
        Ok(Self(path))
    }

    pub fn path(&self) -> &PLPath {
        &self.0
    }

    pub fn into_path(self) -> PLPath {
        self.0
    }
}

impl std::ops::Deref for Control {
    type Target = PLPath;

    fn deref(&self) -> &PLPath {
        &self.0
    }
}
