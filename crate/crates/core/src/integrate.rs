//! Fixed-step integrators for second-order systems `ÿ = a(t, y, ẏ)` started
//! from rest, recorded on a uniform grid.

use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::signal::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    VelocityVerlet,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub method: Method,
    pub substeps_per_grid_point: usize,
    /// Upper bound on `h·ω` for the fastest local frequency; substeps are
    /// raised automatically to respect it.
    pub max_omega_step: f64,
    /// Solve multi-layer systems one layer at a time from stored grid values
    /// of the previous layer instead of stepping the stacked state.
    pub layerwise: bool,
    /// Integrate scalar oscillators with `w < 0` by propagating `ÿ = w y` exactly
    /// and treating the remainder `σ(x) − x` by a trapezoidal predictor–corrector.
    /// Accurate when the activation is nearly linear along the trajectory, at
    /// one step per grid interval regardless of the frequency.
    #[serde(default)]
    pub exponential: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            substeps_per_grid_point: 1,
            max_omega_step: 0.1,
            layerwise: false,
            exponential: false,
        }
    }
}

impl IntegratorConfig {
    pub fn rk4(substeps: usize) -> Self {
        Self {
            method: Method::Rk4,
            substeps_per_grid_point: substeps,
            ..Default::default()
        }
    }

    pub fn verlet(substeps: usize) -> Self {
        Self {
            method: Method::VelocityVerlet,
            substeps_per_grid_point: substeps,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.substeps_per_grid_point == 0 {
            return Err(Error::InvalidParameter("substeps must be >= 1".into()));
        }
        if !(self.max_omega_step > 0.0) {
            return Err(Error::InvalidParameter("max_omega_step must be > 0".into()));
        }
        Ok(())
    }

    /// Substeps per grid interval for a system whose fastest frequency is `omega_max`.
    pub fn substeps_for(&self, grid_h: f64, omega_max: f64) -> usize {
        let need = (grid_h * omega_max / self.max_omega_step - 1e-9).ceil();
        let need = if need.is_finite() && need > 0.0 { need as usize } else { 1 };
        self.substeps_per_grid_point.max(need)
    }
}

/// A second-order system; the acceleration may depend on time through forcing.
pub trait SecondOrderSystem {
    fn dim(&self) -> usize;
    fn accel(&self, t: f64, y: &[f64], v: &[f64], a: &mut [f64]);
}

/// Positions and velocities on the grid, row-major `(n_steps + 1) × dim`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dim: usize,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
}

struct Work {
    k: [Vec<f64>; 8],
    ytmp: Vec<f64>,
    vtmp: Vec<f64>,
}

impl Work {
    fn new(m: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; m]),
            ytmp: vec![0.0; m],
            vtmp: vec![0.0; m],
        }
    }
}

fn rk4_step<S: SecondOrderSystem + ?Sized>(
    sys: &S,
    t: f64,
    h: f64,
    y: &mut [f64],
    v: &mut [f64],
    w: &mut Work,
) {
    let m = y.len();
    let [ky1, kv1, ky2, kv2, ky3, kv3, ky4, kv4] = &mut w.k;
    ky1.copy_from_slice(v);
    sys.accel(t, y, v, kv1);
    for i in 0..m {
        w.ytmp[i] = y[i] + 0.5 * h * ky1[i];
        w.vtmp[i] = v[i] + 0.5 * h * kv1[i];
    }
    ky2.copy_from_slice(&w.vtmp);
    sys.accel(t + 0.5 * h, &w.ytmp, &w.vtmp, kv2);
    for i in 0..m {
        w.ytmp[i] = y[i] + 0.5 * h * ky2[i];
        w.vtmp[i] = v[i] + 0.5 * h * kv2[i];
    }
    ky3.copy_from_slice(&w.vtmp);
    sys.accel(t + 0.5 * h, &w.ytmp, &w.vtmp, kv3);
    for i in 0..m {
        w.ytmp[i] = y[i] + h * ky3[i];
        w.vtmp[i] = v[i] + h * kv3[i];
    }
    ky4.copy_from_slice(&w.vtmp);
    sys.accel(t + h, &w.ytmp, &w.vtmp, kv4);
    for i in 0..m {
        y[i] += h / 6.0 * (ky1[i] + 2.0 * ky2[i] + 2.0 * ky3[i] + ky4[i]);
        v[i] += h / 6.0 * (kv1[i] + 2.0 * kv2[i] + 2.0 * kv3[i] + kv4[i]);
    }
}

/// One velocity-Verlet step. `acc` holds `a(t, y, ·)` on entry and
/// `a(t + h, y₁, ·)` on exit. Velocity-dependent systems see the half-step
/// velocity in the second evaluation.
fn verlet_step<S: SecondOrderSystem + ?Sized>(
    sys: &S,
    t: f64,
    h: f64,
    y: &mut [f64],
    v: &mut [f64],
    acc: &mut [f64],
) {
    for i in 0..y.len() {
        v[i] += 0.5 * h * acc[i];
        y[i] += h * v[i];
    }
    sys.accel(t + h, y, v, acc);
    for i in 0..y.len() {
        v[i] += 0.5 * h * acc[i];
    }
}

fn check_finite(y: &[f64], v: &[f64], step: usize, t: f64) -> Result<()> {
    if y.iter().chain(v).all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Instability { step, t })
    }
}

/// Integrates from `(y0, v0)` at `grid.t_start`, recording every grid point.
pub fn integrate_from<S: SecondOrderSystem + ?Sized>(
    sys: &S,
    grid: &TimeGrid,
    method: Method,
    substeps: usize,
    y0: &[f64],
    v0: &[f64],
) -> Result<Trajectory> {
    let m = sys.dim();
    let n = grid.n_steps;
    let h = grid.h() / substeps as f64;
    let mut y = y0.to_vec();
    let mut v = v0.to_vec();
    let mut out = Trajectory {
        dim: m,
        y: Vec::with_capacity((n + 1) * m),
        v: Vec::with_capacity((n + 1) * m),
    };
    out.y.extend_from_slice(&y);
    out.v.extend_from_slice(&v);
    let mut work = Work::new(m);
    let mut acc = vec![0.0; m];
    if method == Method::VelocityVerlet {
        sys.accel(grid.t_start, &y, &v, &mut acc);
    }
    for k in 0..n {
        let t0 = grid.t(k);
        for s in 0..substeps {
            let t = t0 + s as f64 * h;
            match method {
                Method::Rk4 => rk4_step(sys, t, h, &mut y, &mut v, &mut work),
                Method::VelocityVerlet => verlet_step(sys, t, h, &mut y, &mut v, &mut acc),
            }
        }
        check_finite(&y, &v, k + 1, grid.t(k + 1))?;
        out.y.extend_from_slice(&y);
        out.v.extend_from_slice(&v);
    }
    Ok(out)
}

/// Integrates from rest.
pub fn integrate<S: SecondOrderSystem + ?Sized>(
    sys: &S,
    grid: &TimeGrid,
    method: Method,
    substeps: usize,
) -> Result<Trajectory> {
    let z = vec![0.0; sys.dim()];
    integrate_from(sys, grid, method, substeps, &z, &z)
}

/// Verlet forward over the grid from rest, then backward with negated steps;
/// returns the max-norm of the recovered initial state.
pub fn verlet_round_trip<S: SecondOrderSystem + ?Sized>(
    sys: &S,
    grid: &TimeGrid,
    substeps: usize,
) -> Result<f64> {
    let m = sys.dim();
    let total = grid.n_steps * substeps;
    let h = grid.h() / substeps as f64;
    let mut y = vec![0.0; m];
    let mut v = vec![0.0; m];
    let mut acc = vec![0.0; m];
    let tk = |i: usize| grid.t_start + i as f64 * h;
    sys.accel(tk(0), &y, &v, &mut acc);
    for i in 0..total {
        verlet_step(sys, tk(i), h, &mut y, &mut v, &mut acc);
        check_finite(&y, &v, i + 1, tk(i + 1))?;
    }
    // The acceleration cached at the end is exactly the one a backward step needs.
    for i in (1..=total).rev() {
        let t = tk(i);
        for j in 0..m {
            v[j] -= 0.5 * h * acc[j];
            y[j] -= h * v[j];
        }
        sys.accel(tk(i - 1), &y, &v, &mut acc);
        for j in 0..m {
            v[j] -= 0.5 * h * acc[j];
        }
        check_finite(&y, &v, i - 1, t)?;
    }
    Ok(y.iter().chain(&v).fold(0.0, |a, b| a.max(b.abs())))
}

/// Scalar oscillator `ÿ = σ(w·y + f_in(t)) + f_out(t)` from rest, with both
/// forcings given on the grid and read by linear interpolation.
///
/// This is the per-oscillator kernel of layer-by-layer simulation; each call
/// chooses its own substep count from `|w|`.
pub fn scalar_oscillator(
    act: Activation,
    w: f64,
    f_in: &[f64],
    f_out: Option<&[f64]>,
    grid_h: f64,
    cfg: &IntegratorConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if cfg.exponential && w < 0.0 {
        let m = cfg.substeps_per_grid_point;
        return match act {
            Activation::Tanh => exponential_kernel(|x| x.tanh() - x, w, f_in, f_out, grid_h, m),
            Activation::Sine => exponential_kernel(|x| x.sin() - x, w, f_in, f_out, grid_h, m),
            Activation::Identity => exponential_kernel(|_| 0.0, w, f_in, f_out, grid_h, m),
        };
    }
    let m = cfg.substeps_for(grid_h, w.abs().sqrt());
    match act {
        Activation::Tanh => scalar_kernel(f64::tanh, w, f_in, f_out, grid_h, m, cfg.method),
        Activation::Sine => scalar_kernel(f64::sin, w, f_in, f_out, grid_h, m, cfg.method),
        Activation::Identity => scalar_kernel(|x| x, w, f_in, f_out, grid_h, m, cfg.method),
    }
}

#[inline(always)]
fn scalar_kernel<F: Fn(f64) -> f64>(
    sigma: F,
    w: f64,
    f_in: &[f64],
    f_out: Option<&[f64]>,
    grid_h: f64,
    m: usize,
    method: Method,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = f_in.len();
    let h = grid_h / m as f64;
    let inv_m = 1.0 / m as f64;
    let mut ys = Vec::with_capacity(n);
    let mut vs = Vec::with_capacity(n);
    let (mut y, mut v) = (0.0f64, 0.0f64);
    ys.push(0.0);
    vs.push(0.0);
    let zero = [0.0, 0.0];
    for k in 0..n.saturating_sub(1) {
        let (a0, a1) = (f_in[k], f_in[k + 1]);
        let (b0, b1) = match f_out {
            Some(fo) => (fo[k], fo[k + 1]),
            None => (zero[0], zero[1]),
        };
        let da = a1 - a0;
        let db = b1 - b0;
        let acc = |s: f64, y: f64| sigma(w * y + a0 + s * da) + b0 + s * db;
        match method {
            Method::Rk4 => {
                for j in 0..m {
                    let s0 = j as f64 * inv_m;
                    let sm = (j as f64 + 0.5) * inv_m;
                    let s1 = (j + 1) as f64 * inv_m;
                    let k1v = acc(s0, y);
                    let k1y = v;
                    let k2v = acc(sm, y + 0.5 * h * k1y);
                    let k2y = v + 0.5 * h * k1v;
                    let k3v = acc(sm, y + 0.5 * h * k2y);
                    let k3y = v + 0.5 * h * k2v;
                    let k4v = acc(s1, y + h * k3y);
                    let k4y = v + h * k3v;
                    y += h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
                    v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
                }
            }
            Method::VelocityVerlet => {
                let mut a = acc(0.0, y);
                for j in 0..m {
                    v += 0.5 * h * a;
                    y += h * v;
                    a = acc((j + 1) as f64 * inv_m, y);
                    v += 0.5 * h * a;
                }
            }
        }
        if !(y.is_finite() && v.is_finite()) {
            return Err(Error::Instability {
                step: k + 1,
                t: (k + 1) as f64 * grid_h,
            });
        }
        ys.push(y);
        vs.push(v);
    }
    Ok((ys, vs))
}

/// Exact one-step propagator of `ÿ = −ω² y + u` for `u` linear over a step.
#[derive(Debug, Clone, Copy)]
pub struct HarmonicStep {
    omega: f64,
    inv_h: f64,
    c: f64,
    ws: f64,
    k1: f64,
    k2: f64,
    k3: f64,
}

impl HarmonicStep {
    pub fn new(omega: f64, h: f64) -> Self {
        let x = omega * h;
        let (sn, c) = x.sin_cos();
        let half = (0.5 * x).sin();
        let k3 = if x.abs() < 0.1 {
            let x2 = x * x;
            h * h * h * (1.0 / 6.0 - x2 / 120.0 + x2 * x2 / 5040.0 - x2 * x2 * x2 / 362_880.0)
        } else {
            (x - sn) / (omega * omega * omega)
        };
        Self {
            omega,
            inv_h: 1.0 / h,
            c,
            ws: omega * sn,
            k1: sn / omega,
            k2: 2.0 * half * half / (omega * omega),
            k3,
        }
    }

    #[inline]
    pub fn step(&self, y: &mut f64, v: &mut f64, u0: f64, u1: f64) {
        let b = (u1 - u0) * self.inv_h;
        let y1 = self.c * *y + self.k1 * *v + u0 * self.k2 + b * self.k3;
        let v1 = -self.ws * *y + self.c * *v + u0 * self.k1 + b * self.k2;
        *y = y1;
        *v = v1;
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }
}

/// `ÿ = −ω² y + g(t)` with `g = f_in + f_out + r(w y + f_in)`, `r = σ − id`:
/// each substep propagates exactly for `g` linear in time, with `g` at the
/// step end predicted from the frozen remainder and corrected once.
fn exponential_kernel<R: Fn(f64) -> f64>(
    rem: R,
    w: f64,
    f_in: &[f64],
    f_out: Option<&[f64]>,
    grid_h: f64,
    m: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = f_in.len();
    let h = grid_h / m as f64;
    let st = HarmonicStep::new((-w).sqrt(), h);
    let inv_m = 1.0 / m as f64;
    let mut ys = Vec::with_capacity(n);
    let mut vs = Vec::with_capacity(n);
    let (mut y, mut v) = (0.0f64, 0.0f64);
    ys.push(0.0);
    vs.push(0.0);
    let lin = |k: usize, s: f64| -> (f64, f64) {
        let a = f_in[k] + s * (f_in[k + 1] - f_in[k]);
        let b = f_out.map_or(0.0, |fo| fo[k] + s * (fo[k + 1] - fo[k]));
        (a, a + b)
    };
    let mut r0 = rem(f_in[0]);
    for k in 0..n.saturating_sub(1) {
        for j in 0..m {
            let (_, l0) = lin(k, j as f64 * inv_m);
            let (a1, l1) = lin(k, (j + 1) as f64 * inv_m);
            let g0 = l0 + r0;
            let (mut yp, mut vp) = (y, v);
            st.step(&mut yp, &mut vp, g0, l1 + r0);
            let r1 = rem(w * yp + a1);
            st.step(&mut y, &mut v, g0, l1 + r1);
            r0 = rem(w * y + a1);
        }
        if !(y.is_finite() && v.is_finite()) {
            return Err(Error::Instability {
                step: k + 1,
                t: (k + 1) as f64 * grid_h,
            });
        }
        ys.push(y);
        vs.push(v);
    }
    Ok((ys, vs))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Harmonic {
        w2: f64,
    }

    impl SecondOrderSystem for Harmonic {
        fn dim(&self) -> usize {
            1
        }
        fn accel(&self, t: f64, y: &[f64], _v: &[f64], a: &mut [f64]) {
            a[0] = -self.w2 * y[0] + (2.0 * t).sin();
        }
    }

    fn exact(t: f64) -> f64 {
        // ÿ = -9y + sin 2t from rest.
        ((2.0 * t).sin() - (2.0 / 3.0) * (3.0 * t).sin()) / 5.0
    }

    fn error_for(method: Method, n: usize) -> f64 {
        let g = TimeGrid::new(0.0, 2.0, n).unwrap();
        let tr = integrate(&Harmonic { w2: 9.0 }, &g, method, 1).unwrap();
        (0..g.len()).map(|k| (tr.y[k] - exact(g.t(k))).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn convergence_orders() {
        let r = error_for(Method::Rk4, 50) / error_for(Method::Rk4, 100);
        assert!(r > 14.0, "rk4 ratio {r}");
        let r = error_for(Method::VelocityVerlet, 100) / error_for(Method::VelocityVerlet, 200);
        assert!(r > 3.8, "verlet ratio {r}");
    }

    #[test]
    fn scalar_kernel_matches_generic() {
        let g = TimeGrid::new(0.0, 2.0, 200).unwrap();
        let f: Vec<f64> = g.times().iter().map(|t| (2.0 * t).sin()).collect();
        let zeros = vec![0.0; f.len()];
        let cfg = IntegratorConfig::rk4(4);
        let (ys, _) =
            scalar_oscillator(Activation::Identity, -9.0, &zeros, Some(&f), g.h(), &cfg).unwrap();
        let e = (0..g.len()).map(|k| (ys[k] - exact(g.t(k))).abs()).fold(0.0, f64::max);
        // Linear interpolation of the forcing costs O(h²).
        assert!(e < 1e-5, "{e}");
        let (ys2, _) =
            scalar_oscillator(Activation::Identity, -9.0, &f, None, g.h(), &cfg).unwrap();
        let d = ys.iter().zip(&ys2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-14);
    }

    #[test]
    fn round_trip_is_roundoff_level() {
        let g = TimeGrid::new(0.0, 3.0, 300).unwrap();
        let r = verlet_round_trip(&Harmonic { w2: 9.0 }, &g, 2).unwrap();
        assert!(r < 1e-12, "{r}");
    }

    #[test]
    fn substep_rule() {
        let c = IntegratorConfig::default();
        assert_eq!(c.substeps_for(1e-3, 50.0), 1);
        assert_eq!(c.substeps_for(1e-3, 1000.0), 10);
        assert_eq!(c.substeps_for(1e-3, 1001.0), 11);
    }

    #[test]
    fn instability_is_reported() {
        let g = TimeGrid::new(0.0, 100.0, 100).unwrap();
        let f = vec![1.0; 101];
        let err = scalar_oscillator(Activation::Identity, 1e3, &f, None, g.h(), &IntegratorConfig {
            max_omega_step: 1e9,
            ..Default::default()
        });
        assert!(matches!(err, Err(Error::Instability { .. })));
    }

    #[test]
    fn exponential_kernel_tracks_fine_rk4() {
        let n = 201;
        let h = 0.01;
        let f: Vec<f64> = (0..n).map(|k| 0.3 * (3.0 * k as f64 * h).sin()).collect();
        let fine = IntegratorConfig {
            max_omega_step: 0.005,
            ..Default::default()
        };
        let expo = IntegratorConfig {
            exponential: true,
            ..Default::default()
        };
        for act in Activation::ALL {
            for w in [-4.0, -400.0, -1e4] {
                let (a, _) = scalar_oscillator(act, w, &f, None, h, &fine).unwrap();
                let (b, _) = scalar_oscillator(act, w, &f, None, h, &expo).unwrap();
                let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                let d = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
                assert!(d <= 1e-3 * scale, "{act:?} w = {w}: {d} vs {scale}");
                if act == Activation::Identity {
                    assert!(d <= 1e-9 * scale, "{d}");
                }
            }
        }
    }
}
