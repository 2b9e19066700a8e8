//! Windowed sine transform `L_t u(ω) = ∫₀ᵗ u(t−τ) sin(ωτ) dτ`, its
//! realization by forced harmonic oscillators, and banks of calibrated
//! nonlinear oscillators that emulate it.

use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
pub use crate::integrate::HarmonicStep;
use crate::integrate::{scalar_oscillator, IntegratorConfig};
use crate::signal::{InputFamily, Signal};

/// Index offset of the calibration sub-sample within an input family.
pub const CALIBRATION_BASE: u64 = 1 << 40;
/// Size of the calibration sub-sample.
pub const CALIBRATION_COUNT: usize = 8;

/// Composite Simpson on the grid refined 4×; `t` is absolute time and the
/// window starts at the grid start.
pub fn windowed_sine_transform(u: &Signal, omega: f64, t: f64) -> Result<Vec<f64>> {
    let g = u.grid();
    if t < g.t_start - 1e-12 || t > g.t_end + 1e-12 * (1.0 + g.t_end.abs()) {
        return Err(Error::OutOfDomain {
            t,
            start: g.t_start,
            end: g.t_end,
        });
    }
    let width = (t - g.t_start).max(0.0);
    let p = u.dim();
    let mut acc = vec![0.0; p];
    if width == 0.0 {
        return Ok(acc);
    }
    let mut n = 4 * ((width / g.h()) - 1e-9).ceil().max(1.0) as usize;
    if n % 2 == 1 {
        n += 1;
    }
    let dt = width / n as f64;
    let mut buf = vec![0.0; p];
    for i in 0..=n {
        let tau = i as f64 * dt;
        let wgt = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        u.eval_into((t - tau).max(g.t_start), &mut buf)?;
        let s = (omega * tau).sin() * wgt;
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += s * b;
        }
    }
    acc.iter_mut().for_each(|a| *a *= dt / 3.0);
    Ok(acc)
}

/// `L_{t_k} u(ω_j)` at every grid point for the piecewise-linear input,
/// laid out row-major as `(n_steps + 1) × (p·N)` with channel `i·N + j`.
pub fn exact_transforms(u: &Signal, omegas: &[f64]) -> Vec<f64> {
    let steps: Vec<HarmonicStep> = omegas.iter().map(|w| HarmonicStep::new(*w, u.grid().h())).collect();
    exact_transforms_with(u, &steps)
}

pub fn exact_transforms_with(u: &Signal, steps: &[HarmonicStep]) -> Vec<f64> {
    let p = u.dim();
    let nw = steps.len();
    let width = p * nw;
    let n = u.len();
    let mut out = vec![0.0; n * width];
    let mut y = vec![0.0; width];
    let mut v = vec![0.0; width];
    for k in 1..n {
        let (u0, u1) = (u.at(k - 1), u.at(k));
        let row = &mut out[k * width..(k + 1) * width];
        for i in 0..p {
            for (j, st) in steps.iter().enumerate() {
                let c = i * nw + j;
                st.step(&mut y[c], &mut v[c], u0[i], u1[i]);
                row[c] = st.omega() * y[c];
            }
        }
    }
    out
}

/// `ÿ = −ω² y + u` from rest, componentwise; `ω·y(t) ≈ L_t u(ω)`.
pub fn harmonic_response(u: &Signal, omega: f64, cfg: &IntegratorConfig) -> Result<Signal> {
    if omega == 0.0 || !omega.is_finite() {
        return Err(Error::InvalidParameter("frequency must be finite and nonzero".into()));
    }
    cfg.validate()?;
    let h = u.grid().h();
    let zeros = vec![0.0; u.len()];
    let mut cols = Vec::with_capacity(u.dim());
    for i in 0..u.dim() {
        let f = u.component(i);
        let (ys, _) = scalar_oscillator(Activation::Identity, -omega * omega, &zeros, Some(&f), h, cfg)?;
        cols.push(ys);
    }
    Signal::from_columns(*u.grid(), &cols)
}

/// One nonlinear transform channel `ÿ = σ(−ω² y + s u)` with readout `(ω/s)·y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineLayerParams {
    pub omega: f64,
    pub s: f64,
    /// Calibration error reached at `s`.
    pub achieved_err: f64,
}

impl SineLayerParams {
    pub fn new(omega: f64, s: f64) -> Result<Self> {
        if omega == 0.0 || !omega.is_finite() {
            return Err(Error::InvalidParameter("frequency must be finite and nonzero".into()));
        }
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::InvalidParameter("scale must be positive".into()));
        }
        Ok(Self {
            omega,
            s,
            achieved_err: f64::NAN,
        })
    }

    pub fn w(&self) -> f64 {
        -self.omega * self.omega
    }

    pub fn v(&self) -> f64 {
        self.s
    }

    /// Readout weight producing the transform value.
    pub fn readout(&self) -> f64 {
        self.omega / self.s
    }
}

/// Transform estimate of one channel for every component of `u`.
pub fn run_channel(
    params: &SineLayerParams,
    act: Activation,
    u: &Signal,
    cfg: &IntegratorConfig,
) -> Result<Vec<Vec<f64>>> {
    let h = u.grid().h();
    let r = params.readout();
    (0..u.dim())
        .map(|i| {
            let f: Vec<f64> = u.component(i).iter().map(|x| params.s * x).collect();
            let (ys, _) = scalar_oscillator(act, params.w(), &f, None, h, cfg)?;
            Ok(ys.into_iter().map(|y| r * y).collect())
        })
        .collect()
}

fn channel_error(
    params: &SineLayerParams,
    act: Activation,
    inputs: &[Signal],
    exact: &[Vec<f64>],
    cfg: &IntegratorConfig,
) -> Result<f64> {
    let mut err: f64 = 0.0;
    for (u, ex) in inputs.iter().zip(exact) {
        let p = u.dim();
        let est = run_channel(params, act, u, cfg)?;
        for (i, col) in est.iter().enumerate() {
            for (k, v) in col.iter().enumerate() {
                err = err.max((v - ex[k * p + i]).abs());
            }
        }
    }
    Ok(err)
}

/// Error of the channel on `inputs` for each scale in `scales`.
pub fn calibration_sweep(
    omega: f64,
    act: Activation,
    inputs: &[Signal],
    scales: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<(f64, f64)>> {
    let exact: Vec<Vec<f64>> = inputs.iter().map(|u| exact_transforms(u, &[omega])).collect();
    scales
        .iter()
        .map(|s| {
            let p = SineLayerParams::new(omega, *s)?;
            Ok((*s, channel_error(&p, act, inputs, &exact, cfg)?))
        })
        .collect()
}

/// Halves `s` from 1 until the channel error on the calibration sample is at most `tol`.
pub fn calibrate_scale(
    omega: f64,
    family: &dyn InputFamily,
    act: Activation,
    tol: f64,
    cfg: &IntegratorConfig,
) -> Result<SineLayerParams> {
    let inputs = family.samples(CALIBRATION_BASE, CALIBRATION_COUNT);
    calibrate_scale_on(omega, &inputs, act, tol, cfg)
}

pub fn calibrate_scale_on(
    omega: f64,
    inputs: &[Signal],
    act: Activation,
    tol: f64,
    cfg: &IntegratorConfig,
) -> Result<SineLayerParams> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter("tolerance must be positive".into()));
    }
    let exact: Vec<Vec<f64>> = inputs.iter().map(|u| exact_transforms(u, &[omega])).collect();
    let eval = |s: f64| -> Result<SineLayerParams> {
        let mut p = SineLayerParams::new(omega, s)?;
        p.achieved_err = channel_error(&p, act, inputs, &exact, cfg)?;
        Ok(p)
    };
    // The nonlinear error scales like s², so a miss by a factor r skips about
    // log4(r) halvings at once. The result is then walked back up so that it is
    // the first halving of 1 that meets `tol`, as plain halving would return.
    let mut s = 1.0;
    let mut failed_at = f64::INFINITY;
    let mut p = eval(s)?;
    while p.achieved_err > tol {
        failed_at = s;
        let ratio = p.achieved_err / tol;
        let skip = if ratio.is_finite() { (0.5 * ratio.log2()).floor().max(1.0) as i32 } else { 1 };
        s *= 0.5f64.powi(skip);
        if s < 1e-12 {
            return Err(Error::Unachievable {
                tol,
                reason: format!(
                    "scale underflow at ω = {omega}; last error {:e}, refine the integrator",
                    p.achieved_err
                ),
            });
        }
        p = eval(s)?;
    }
    while 2.0 * s < failed_at.min(2.0) {
        let up = eval(2.0 * s)?;
        if up.achieved_err > tol {
            break;
        }
        s *= 2.0;
        p = up;
    }
    Ok(p)
}

/// Calibrated channels sharing one activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBank {
    pub act: Activation,
    pub channels: Vec<SineLayerParams>,
}

impl FrequencyBank {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::InvalidParameter("empty frequency bank".into()));
        }
        for (i, a) in self.channels.iter().enumerate() {
            SineLayerParams::new(a.omega, a.s)?;
            if self.channels[..i].iter().any(|b| b.omega == a.omega) {
                return Err(Error::InvalidParameter(format!("duplicate frequency {}", a.omega)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn omegas(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.omega).collect()
    }

    pub fn max_calibration_error(&self) -> f64 {
        self.channels.iter().fold(0.0, |m, c| m.max(c.achieved_err))
    }

    /// Calibrates every frequency to per-channel tolerance `tol` on `inputs`.
    pub fn calibrate(
        omegas: &[f64],
        inputs: &[Signal],
        act: Activation,
        tol: f64,
        cfg: &IntegratorConfig,
    ) -> Result<Self> {
        let channels = omegas
            .iter()
            .map(|w| calibrate_scale_on(*w, inputs, act, tol, cfg))
            .collect::<Result<Vec<_>>>()?;
        let bank = Self { act, channels };
        bank.validate()?;
        Ok(bank)
    }
}

/// Bank outputs `(L_t u_i(ω_j))_{i,j}` (channel `i·N + j`) followed by the exact channel `t²/4`,
/// with `t` measured from the grid start.
pub fn eval_bank(bank: &FrequencyBank, u: &Signal, cfg: &IntegratorConfig) -> Result<Signal> {
    bank.validate()?;
    let g = *u.grid();
    let p = u.dim();
    let nw = bank.len();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); p * nw + 1];
    for (j, ch) in bank.channels.iter().enumerate() {
        for (i, col) in run_channel(ch, bank.act, u, cfg)?.into_iter().enumerate() {
            cols[i * nw + j] = col;
        }
    }
    cols[p * nw] = (0..g.len())
        .map(|k| {
            let t = g.t(k) - g.t_start;
            0.25 * t * t
        })
        .collect();
    Signal::from_columns(g, &cols)
}

/// Exact counterpart of [`eval_bank`] (same channel layout).
pub fn eval_bank_exact(omegas: &[f64], u: &Signal) -> Result<Signal> {
    let g = *u.grid();
    let width = u.dim() * omegas.len();
    let tr = exact_transforms(u, omegas);
    let mut vals = Vec::with_capacity(g.len() * (width + 1));
    for k in 0..g.len() {
        vals.extend_from_slice(&tr[k * width..(k + 1) * width]);
        let t = g.t(k) - g.t_start;
        vals.push(0.25 * t * t);
    }
    Signal::new(g, width + 1, vals)
}
