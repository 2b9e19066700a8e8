//! Uniform time grids, vector-valued signals and seeded input families.
//!
//! A [`Signal`] stores one vector per grid point in a flat row-major buffer.
//! Between grid points it is read by linear interpolation and it is zero
//! before the start of its grid.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if n_steps < 2 {
            return Err(Error::InvalidParameter(format!(
                "n_steps must be >= 2, got {n_steps}"
            )));
        }
        if !(t_end > t_start) || !t_start.is_finite() || !t_end.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "grid needs t_end > t_start, got [{t_start}, {t_end}]"
            )));
        }
        Ok(Self {
            t_start,
            t_end,
            n_steps,
        })
    }

    pub fn h(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_steps as f64
    }

    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t_end
        } else {
            self.t_start + k as f64 * self.h()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.t(k)).collect()
    }

    /// Index of the last grid point at or before `t` (clamped to the grid).
    pub fn index_at_or_before(&self, t: f64) -> usize {
        let x = (t - self.t_start) / self.h();
        let k = (x + 1e-9).floor();
        if k <= 0.0 {
            0
        } else {
            (k as usize).min(self.n_steps)
        }
    }

    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.n_steps == other.n_steps
            && (self.t_start - other.t_start).abs() <= 1e-12 * (1.0 + self.t_start.abs())
            && (self.t_end - other.t_end).abs() <= 1e-12 * (1.0 + self.t_end.abs())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl Signal {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("signal dimension is 0".into()));
        }
        if values.len() != grid.len() * dim {
            return Err(Error::DimensionMismatch(format!(
                "expected {} values for {} points x dim {}, got {}",
                grid.len() * dim,
                grid.len(),
                dim,
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Instability {
                step: k / dim,
                t: grid.t(k / dim),
            });
        }
        Ok(Self { grid, dim, values })
    }

    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self {
            grid,
            dim,
            values: vec![0.0; grid.len() * dim],
        }
    }

    pub fn from_fn(grid: TimeGrid, dim: usize, mut f: impl FnMut(f64, &mut [f64])) -> Result<Self> {
        let mut values = vec![0.0; grid.len() * dim];
        for (k, row) in values.chunks_mut(dim).enumerate() {
            f(grid.t(k), row);
        }
        Self::new(grid, dim, values)
    }

    /// Builds a signal from per-component columns.
    pub fn from_columns(grid: TimeGrid, cols: &[Vec<f64>]) -> Result<Self> {
        let dim = cols.len();
        let n = grid.len();
        if cols.iter().any(|c| c.len() != n) {
            return Err(Error::DimensionMismatch("column length differs from grid".into()));
        }
        let mut values = vec![0.0; n * dim];
        for (i, c) in cols.iter().enumerate() {
            for (k, v) in c.iter().enumerate() {
                values[k * dim + i] = *v;
            }
        }
        Self::new(grid, dim, values)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn component(&self, i: usize) -> Vec<f64> {
        self.values.iter().skip(i).step_by(self.dim).copied().collect()
    }

    /// Linear interpolation; zero before the grid start.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let g = &self.grid;
        let h = g.h();
        if t > g.t_end + 1e-12 * h.max(g.t_end.abs()) {
            return Err(Error::OutOfDomain {
                t,
                start: g.t_start,
                end: g.t_end,
            });
        }
        if t < g.t_start {
            out.iter_mut().for_each(|o| *o = 0.0);
            return Ok(());
        }
        let x = ((t - g.t_start) / h).min(g.n_steps as f64);
        let k = (x.floor() as usize).min(g.n_steps - 1);
        let f = x - k as f64;
        let (a, b) = (self.at(k), self.at(k + 1));
        for i in 0..self.dim {
            out[i] = if f == 0.0 { a[i] } else { a[i] + f * (b[i] - a[i]) };
        }
        Ok(())
    }

    /// Max-norm over all grid points.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Signal {
        Signal {
            grid: self.grid,
            dim: self.dim,
            values: self.values.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn with_grid(&self, grid: TimeGrid) -> Result<Signal> {
        if grid.n_steps != self.grid.n_steps {
            return Err(Error::DimensionMismatch("regridding changes point count".into()));
        }
        Ok(Signal {
            grid,
            dim: self.dim,
            values: self.values.clone(),
        })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim).map(|i| format!("x{i}")));
        wr.write_record(&header)?;
        for k in 0..self.len() {
            let mut rec = vec![fmt17(self.grid.t(k))];
            rec.extend(self.at(k).iter().map(|v| fmt17(*v)));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Reads a signal written by [`Signal::write_csv`]; the grid is recovered from
    /// the first and last time stamps and checked for uniformity.
    pub fn read_csv<R: Read>(r: R) -> Result<Signal> {
        let mut rd = csv::Reader::from_reader(r);
        let dim = rd.headers()?.len().saturating_sub(1);
        if dim == 0 {
            return Err(Error::InvalidParameter("csv has no value columns".into()));
        }
        let mut ts = Vec::new();
        let mut vals = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidParameter(format!("bad number '{s}': {e}")))
            };
            ts.push(parse(&rec[0])?);
            for i in 0..dim {
                vals.push(parse(&rec[i + 1])?);
            }
        }
        if ts.len() < 3 {
            return Err(Error::InvalidParameter("csv needs at least 3 rows".into()));
        }
        let grid = TimeGrid::new(ts[0], *ts.last().unwrap(), ts.len() - 1)?;
        let h = grid.h();
        for (k, t) in ts.iter().enumerate() {
            if (t - grid.t(k)).abs() > 1e-9 * h.max(1.0) {
                return Err(Error::InvalidParameter(format!("non-uniform time at row {k}")));
            }
        }
        Signal::new(grid, dim, vals)
    }
}

/// Formats with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Value of `u` at `t_query`, zero before the grid start.
pub fn zero_extend(u: &Signal, t_query: f64) -> Result<Vec<f64>> {
    u.eval(t_query)
}

/// Extends `u` to `[t_start - t0, t_end]` by a linear ramp from 0 to `u(t_start)`.
/// `t0` must be a whole number of grid steps.
pub fn ramp_extend(u: &Signal, t0: f64) -> Result<Signal> {
    if !(t0 > 0.0) {
        return Err(Error::InvalidParameter(format!("ramp length must be > 0, got {t0}")));
    }
    let g = u.grid();
    let h = g.h();
    let m = (t0 / h).round();
    if m < 1.0 || (m * h - t0).abs() > 1e-9 * t0 {
        return Err(Error::InvalidParameter(format!(
            "ramp length {t0} is not a multiple of the grid step {h}"
        )));
    }
    let m = m as usize;
    let grid = TimeGrid {
        t_start: g.t_start - t0,
        t_end: g.t_end,
        n_steps: g.n_steps + m,
    };
    let d = u.dim();
    let u0 = u.at(0);
    let mut values = Vec::with_capacity(grid.len() * d);
    for k in 0..m {
        let f = k as f64 / m as f64;
        values.extend(u0.iter().map(|v| f * v));
    }
    values.extend_from_slice(u.values());
    Signal::new(grid, d, values)
}

/// Max over grid points of the max-norm of `a - b`.
pub fn sup_distance(a: &Signal, b: &Signal) -> Result<f64> {
    if !a.grid().same_as(b.grid()) || a.dim() != b.dim() {
        return Err(Error::DimensionMismatch("signals do not share grid and dimension".into()));
    }
    Ok(a.values()
        .iter()
        .zip(b.values())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs())))
}

/// Same as [`sup_distance`] restricted to grid points with `t >= t_from`.
pub fn sup_distance_from(a: &Signal, b: &Signal, t_from: f64) -> Result<f64> {
    if !a.grid().same_as(b.grid()) || a.dim() != b.dim() {
        return Err(Error::DimensionMismatch("signals do not share grid and dimension".into()));
    }
    let g = a.grid();
    let mut m: f64 = 0.0;
    for k in 0..a.len() {
        if g.t(k) >= t_from - 1e-12 {
            for (x, y) in a.at(k).iter().zip(b.at(k)) {
                m = m.max((x - y).abs());
            }
        }
    }
    Ok(m)
}

/// A seeded, indexable family of input signals on a common grid.
///
/// `sample(i)` must be a pure function of the family parameters and `i`.
pub trait InputFamily: Sync {
    fn dim(&self) -> usize;
    fn grid(&self) -> TimeGrid;
    fn sample(&self, index: u64) -> Signal;
    /// An a-priori bound on the sup-norm of every sample.
    fn sup_bound(&self) -> f64;
    /// Earliest time at which outputs are scored (the grid start by default).
    fn score_from(&self) -> f64 {
        self.grid().t_start
    }

    fn samples(&self, start: u64, count: usize) -> Vec<Signal> {
        (0..count as u64).map(|i| self.sample(start + i)).collect()
    }
}

/// Random sine series `u(t) = sum_k a_k sin(k pi t / T)` with `|a_k| <= A / k^2`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct InputEnsemble {
    pub dim: usize,
    pub t_end: f64,
    pub n_steps: usize,
    pub k_max: usize,
    pub amp: f64,
    pub seed: u64,
}

impl Default for InputEnsemble {
    fn default() -> Self {
        Self {
            dim: 1,
            t_end: 1.0,
            n_steps: 1000,
            k_max: 8,
            amp: 1.0,
            seed: 7,
        }
    }
}

impl InputEnsemble {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.k_max == 0 {
            return Err(Error::InvalidParameter("ensemble dim and k_max must be >= 1".into()));
        }
        if !(self.t_end > 0.0) || !(self.amp >= 0.0) || !self.amp.is_finite() {
            return Err(Error::InvalidParameter("ensemble needs T > 0 and finite amp >= 0".into()));
        }
        TimeGrid::new(0.0, self.t_end, self.n_steps)?;
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Coefficients `a[i][k-1]` of sample `index`.
    pub fn coefficients(&self, index: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        (0..self.dim)
            .map(|_| {
                (1..=self.k_max)
                    .map(|k| {
                        let b = self.amp / (k * k) as f64;
                        if b == 0.0 {
                            0.0
                        } else {
                            rng.gen_range(-b..=b)
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Evaluates a sine series with the given coefficients on this ensemble's grid.
    pub fn series(&self, coeffs: &[Vec<f64>]) -> Signal {
        let grid = self.grid();
        let t_end = self.t_end;
        Signal::from_fn(grid, coeffs.len(), |t, row| {
            for (i, a) in coeffs.iter().enumerate() {
                row[i] = a
                    .iter()
                    .enumerate()
                    .map(|(k, ak)| ak * ((k + 1) as f64 * std::f64::consts::PI * t / t_end).sin())
                    .sum();
            }
        })
        .expect("sine series is finite")
    }
}

impl InputFamily for InputEnsemble {
    fn dim(&self) -> usize {
        self.dim
    }

    fn grid(&self) -> TimeGrid {
        TimeGrid {
            t_start: 0.0,
            t_end: self.t_end,
            n_steps: self.n_steps,
        }
    }

    fn sample(&self, index: u64) -> Signal {
        self.series(&self.coefficients(index))
    }

    fn sup_bound(&self) -> f64 {
        self.amp * (1..=self.k_max).map(|k| 1.0 / (k * k) as f64).sum::<f64>()
    }
}

/// Draws `count` samples with indices `0..count`.
pub fn sample_ensemble(ens: &InputEnsemble, count: usize) -> Result<Vec<Signal>> {
    if count == 0 {
        return Err(Error::InvalidParameter("count must be >= 1".into()));
    }
    ens.validate()?;
    Ok(ens.samples(0, count))
}

/// Sine-series samples plus a random constant offset, ramp-extended over
/// `[-t0, 0]` so that every sample starts from zero.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WarmupFamily {
    pub base: InputEnsemble,
    pub offset_amp: f64,
    pub t0: f64,
}

impl InputFamily for WarmupFamily {
    fn dim(&self) -> usize {
        self.base.dim
    }

    fn grid(&self) -> TimeGrid {
        let h = self.base.t_end / self.base.n_steps as f64;
        let m = (self.t0 / h).round() as usize;
        TimeGrid {
            t_start: -(m as f64) * h,
            t_end: self.base.t_end,
            n_steps: self.base.n_steps + m,
        }
    }

    fn sample(&self, index: u64) -> Signal {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base.seed ^ 0x5eed_0ff5e7);
        rng.set_stream(index);
        let offs: Vec<f64> = (0..self.base.dim)
            .map(|_| {
                if self.offset_amp == 0.0 {
                    0.0
                } else {
                    rng.gen_range(-self.offset_amp..=self.offset_amp)
                }
            })
            .collect();
        let u = self.base.sample(index);
        let d = u.dim();
        let shifted = Signal::new(
            *u.grid(),
            d,
            u.values()
                .iter()
                .enumerate()
                .map(|(j, v)| v + offs[j % d])
                .collect(),
        )
        .expect("finite");
        ramp_extend(&shifted, self.t0).expect("ramp length validated at construction")
    }

    fn sup_bound(&self) -> f64 {
        self.base.sup_bound() + self.offset_amp
    }

    fn score_from(&self) -> f64 {
        0.0
    }
}
