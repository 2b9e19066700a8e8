//! Recovering the recent past of a signal from finitely many windowed sine
//! transform values.
//!
//! With `F(s) = u(t − s)` for lags `s ∈ [0, t]`, extended oddly and by zero,
//! the Fourier transform of `F` is `−2i·L_t u(ω)`. Averaging `F` forward over
//! a smooth bump of width `ε` and inverting on a truncated frequency grid gives
//!
//! ```text
//! u(t − s) ≈ Σ_j α_j L_t u(ω_j) sin(ω_j s − ϑ_j)
//! ```
//!
//! with `α_j = (Δω/π)|ρ̂_ε(ω_j)|` and `ϑ_j = arg ρ̂_ε(ω_j)`. The frequencies sit on
//! the offset grid `±(j + ½)Δω`; `Δω` is chosen so that the periodic images of
//! the odd extension never overlap the reconstruction window.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::TargetOperator;
use crate::signal::{InputFamily, Signal};
use crate::transform::{exact_transforms_with, HarmonicStep};

/// Sample index ranges used by plan building.
pub const PROBE_BASE: u64 = 1 << 41;
pub const PROBE_COUNT: usize = 64;
pub const FRESH_BASE: u64 = 1 << 42;
pub const FRESH_COUNT: usize = 32;

const BUMP_NODES: usize = 20_000;
const TABLE_STEP: f64 = 0.05;
const TABLE_MAX: f64 = 400.0;

fn bump(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        0.0
    } else {
        (-1.0 / (x * (1.0 - x))).exp()
    }
}

fn simpson_weight(i: usize, n: usize) -> f64 {
    if i == 0 || i == n {
        1.0
    } else if i % 2 == 1 {
        4.0
    } else {
        2.0
    }
}

struct BumpTables {
    z: f64,
    /// `(2/π)∫_ξ^∞ |ρ̂|/ξ'` on `ξ = k·TABLE_STEP` (the ξ = 0 entry is unused).
    jump_tail: Vec<f64>,
    /// `∫_ξ^∞ |ρ̂|` on the same grid.
    tail: Vec<f64>,
}

fn tables() -> &'static BumpTables {
    static T: OnceLock<BumpTables> = OnceLock::new();
    T.get_or_init(|| {
        let n = BUMP_NODES;
        let dx = 1.0 / n as f64;
        let mass: f64 = (0..=n).map(|i| simpson_weight(i, n) * bump(i as f64 * dx)).sum::<f64>() * dx / 3.0;
        let z = 1.0 / mass;
        let m = (TABLE_MAX / TABLE_STEP).round() as usize;
        let abs_hat: Vec<f64> = (0..=m)
            .map(|k| base_hat_with(z, k as f64 * TABLE_STEP).norm())
            .collect();
        let mut jump_tail = vec![0.0; m + 1];
        let mut tail = vec![0.0; m + 1];
        for k in (0..m).rev() {
            let (x0, x1) = (k as f64 * TABLE_STEP, (k + 1) as f64 * TABLE_STEP);
            tail[k] = tail[k + 1] + 0.5 * TABLE_STEP * (abs_hat[k] + abs_hat[k + 1]);
            if k > 0 {
                jump_tail[k] = jump_tail[k + 1]
                    + 0.5 * TABLE_STEP * (abs_hat[k] / x0 + abs_hat[k + 1] / x1) * 2.0
                        / std::f64::consts::PI;
            }
        }
        BumpTables {
            z,
            jump_tail,
            tail,
        }
    })
}

/// `∫₀¹ Zρ(x) e^{−iξx} dx` by Simpson; the node count grows with `|ξ|`.
fn base_hat_with(z: f64, xi: f64) -> Complex64 {
    let n = (512usize).max((16.0 * xi.abs()).ceil() as usize * 2);
    let dx = 1.0 / n as f64;
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 1..n {
        let x = i as f64 * dx;
        let (s, c) = (xi * x).sin_cos();
        acc += Complex64::new(c, -s) * (simpson_weight(i, n) * bump(x));
    }
    acc * (z * dx / 3.0)
}

fn interp_table(tab: &[f64], xi: f64) -> f64 {
    let x = xi.abs() / TABLE_STEP;
    let k = x.floor() as usize;
    if k + 1 >= tab.len() {
        return 0.0;
    }
    let f = x - k as f64;
    tab[k] * (1.0 - f) + tab[k + 1] * f
}

/// `(2/π)∫_Ξ^∞ |ρ̂(ξ)|/ξ dξ` for the unit-width bump: the relative truncation
/// error of a reconstruction whose transform decays like `u(t)/ω`.
pub fn jump_tail_factor(xi: f64) -> f64 {
    interp_table(&tables().jump_tail, xi.max(TABLE_STEP))
}

/// Smooth unit-mass bump of width `eps` supported on `[0, eps]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mollifier {
    pub eps: f64,
}

impl Mollifier {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::InvalidParameter("mollifier width must be > 0".into()));
        }
        Ok(Self { eps })
    }

    pub fn normalization(&self) -> f64 {
        tables().z
    }

    pub fn density(&self, x: f64) -> f64 {
        tables().z * bump(x / self.eps) / self.eps
    }

    /// `∫_{|ω|>L} |ρ̂_ε(ω)| dω`.
    pub fn tail_integral(&self, l: f64) -> f64 {
        2.0 / self.eps * interp_table(&tables().tail, self.eps * l)
    }

    /// Forward average `∫ u(t − s) ρ_ε(s) ds` at every grid point, zero before the start.
    pub fn smooth_past(&self, u: &Signal) -> Signal {
        const NODES: usize = 32;
        let ds = self.eps / NODES as f64;
        let mut w: Vec<f64> = (0..=NODES)
            .map(|i| simpson_weight(i, NODES) * self.density(i as f64 * ds))
            .collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        let g = *u.grid();
        let d = u.dim();
        let mut buf = vec![0.0; d];
        Signal::from_fn(g, d, |t, row| {
            row.iter_mut().for_each(|r| *r = 0.0);
            for (i, wi) in w.iter().enumerate() {
                if *wi == 0.0 {
                    continue;
                }
                u.eval_into(t - i as f64 * ds, &mut buf).expect("query inside the grid");
                for (r, b) in row.iter_mut().zip(&buf) {
                    *r += wi * b;
                }
            }
        })
        .expect("finite")
    }
}

/// `∫₀^ε ρ_ε(τ) e^{−iωτ} dτ`.
pub fn mollifier_hat(moll: &Mollifier, omega: f64) -> Complex64 {
    base_hat_with(tables().z, moll.eps * omega)
}

/// One validation pass of the plan builder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanAttempt {
    pub n: usize,
    pub eps_moll: f64,
    pub l_cut: f64,
    pub validated_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionPlan {
    /// Frequencies in ascending order, symmetric about 0.
    pub omegas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub thetas: Vec<f64>,
    /// Reconstruction window in lag.
    pub window: f64,
    pub eps_moll: f64,
    /// Largest `|ω_j|`.
    pub l_cut: f64,
    pub d_omega: f64,
    pub target_err: f64,
    /// Error on the fresh validation sample, if validated.
    pub validated_err: Option<f64>,
    pub history: Vec<PlanAttempt>,
}

impl ReconstructionPlan {
    /// Coefficients for `n_half` positive frequencies `(j + ½)·d_omega`.
    pub fn from_grid(eps_moll: f64, d_omega: f64, n_half: usize, window: f64, target_err: f64) -> Result<Self> {
        if n_half == 0 || !(d_omega > 0.0) {
            return Err(Error::InvalidParameter("need n_half >= 1 and Δω > 0".into()));
        }
        let moll = Mollifier::new(eps_moll)?;
        let n = 2 * n_half;
        let mut omegas = Vec::with_capacity(n);
        for j in (0..n_half).rev() {
            omegas.push(-(j as f64 + 0.5) * d_omega);
        }
        for j in 0..n_half {
            omegas.push((j as f64 + 0.5) * d_omega);
        }
        let mut alphas = Vec::with_capacity(n);
        let mut thetas = Vec::with_capacity(n);
        for w in &omegas {
            let r = mollifier_hat(&moll, *w);
            alphas.push(d_omega / std::f64::consts::PI * r.norm());
            thetas.push(r.arg());
        }
        Ok(Self {
            l_cut: (n_half as f64 - 0.5) * d_omega,
            omegas,
            alphas,
            thetas,
            window,
            eps_moll,
            d_omega,
            target_err,
            validated_err: None,
            history: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.omegas.len()
    }

    pub fn n_half(&self) -> usize {
        self.omegas.len() / 2
    }

    /// Positive frequencies.
    pub fn positive_omegas(&self) -> Vec<f64> {
        self.omegas[self.n_half()..].to_vec()
    }

    /// Positive-frequency weights with the mirrored term folded in (`2α_j`) and phases.
    pub fn folded(&self) -> (Vec<f64>, Vec<f64>) {
        let h = self.n_half();
        (
            self.alphas[h..].iter().map(|a| 2.0 * a).collect(),
            self.thetas[h..].to_vec(),
        )
    }

    /// `Σ_j α_j β_j sin(ω_j (t − τ) − ϑ_j)` over the full frequency set; `beta[j][i]`
    /// is component `i` at frequency `omegas[j]`.
    pub fn reconstruct(&self, beta: &[Vec<f64>], t: f64, tau: f64) -> Result<Vec<f64>> {
        if tau > t + 1e-12 {
            return Err(Error::InvalidParameter(format!("τ = {tau} exceeds t = {t}")));
        }
        if beta.len() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} transform values, got {}",
                self.n(),
                beta.len()
            )));
        }
        let p = beta.first().map_or(0, |b| b.len());
        let mut out = vec![0.0; p];
        for (j, b) in beta.iter().enumerate() {
            let s = self.alphas[j] * (self.omegas[j] * (t - tau) - self.thetas[j]).sin();
            for (o, x) in out.iter_mut().zip(b) {
                *o += s * x;
            }
        }
        Ok(out)
    }

    /// Same as [`reconstruct`](Self::reconstruct) from positive-frequency values only.
    pub fn reconstruct_folded(&self, beta_pos: &[Vec<f64>], t: f64, tau: f64) -> Result<Vec<f64>> {
        if tau > t + 1e-12 {
            return Err(Error::InvalidParameter(format!("τ = {tau} exceeds t = {t}")));
        }
        let (a2, th) = self.folded();
        let p = beta_pos.first().map_or(0, |b| b.len());
        let mut out = vec![0.0; p];
        for (j, b) in beta_pos.iter().enumerate() {
            let s = a2[j] * (self.omegas[self.n_half() + j] * (t - tau) - th[j]).sin();
            for (o, x) in out.iter_mut().zip(b) {
                *o += s * x;
            }
        }
        Ok(out)
    }

    /// `S[l][j] = 2α_j sin(ω_j·l·h − ϑ_j)` for lags `l = 0..n_lags`, positive frequencies.
    pub fn lag_table(&self, h: f64, n_lags: usize) -> DMatrix<f64> {
        let (a2, th) = self.folded();
        let w = self.positive_omegas();
        DMatrix::from_fn(n_lags, w.len(), |l, j| a2[j] * (w[j] * l as f64 * h - th[j]).sin())
    }

    pub fn harmonic_steps(&self, h: f64) -> Vec<HarmonicStep> {
        self.positive_omegas().iter().map(|w| HarmonicStep::new(*w, h)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Validation history as CSV `n,eps_moll,l_cut,validated_err`.
    pub fn history_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["n", "eps_moll", "l_cut", "validated_err"])?;
        for a in &self.history {
            w.write_record([
                a.n.to_string(),
                crate::signal::fmt17(a.eps_moll),
                crate::signal::fmt17(a.l_cut),
                crate::signal::fmt17(a.validated_err),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
            .expect("utf8"))
    }
}

/// Knobs of the plan builder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanOptions {
    /// Share of the target given to the mollification error.
    pub moll_share: f64,
    /// Share of the target given to frequency truncation.
    pub tail_share: f64,
    pub n_cap: usize,
    /// Validate at every `t_stride`-th grid time (the last time is always included).
    pub max_validation_times: usize,
    /// Margin on the alias-free frequency spacing.
    pub spacing_margin: f64,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            moll_share: 0.6,
            tail_share: 0.3,
            n_cap: 8192,
            max_validation_times: 200,
            spacing_margin: 1.02,
        }
    }
}

/// Largest mollifier width (on a geometric ladder) whose measured smoothing error
/// on `probe` is within `budget`.
pub fn choose_mollifier_width(probe: &[Signal], budget: f64) -> Result<(f64, f64)> {
    let duration = probe[0].grid().duration();
    let h = probe[0].grid().h();
    let mut eps = 0.2 * duration;
    loop {
        let moll = Mollifier::new(eps)?;
        let err = probe
            .iter()
            .map(|u| crate::signal::sup_distance(&moll.smooth_past(u), u).expect("same grid"))
            .fold(0.0, f64::max);
        if err <= budget {
            return Ok((eps, err));
        }
        eps *= 0.8;
        if eps < 0.05 * h {
            return Err(Error::Unachievable {
                tol: budget,
                reason: "mollifier width fell far below the grid step".into(),
            });
        }
    }
}

/// Smallest `Ξ` (on a 0.5 ladder) with `bound·g(Ξ) ≤ budget`.
pub fn choose_tail_scale(bound: f64, budget: f64) -> f64 {
    let mut xi = 4.0;
    while xi < TABLE_MAX - 1.0 && bound * jump_tail_factor(xi) > budget {
        xi += 0.5;
    }
    xi
}

/// Worst reconstruction error over `samples`, lags `[0, window]` and (strided) grid times.
pub fn validation_error(plan: &ReconstructionPlan, samples: &[Signal], max_times: usize) -> f64 {
    validation_error_by_time(plan, samples, max_times)
        .iter()
        .fold(0.0, |m, (_, e)| m.max(*e))
}

/// Per-time worst error (over samples and lags) at the validated grid times.
pub fn validation_error_by_time(
    plan: &ReconstructionPlan,
    samples: &[Signal],
    max_times: usize,
) -> Vec<(usize, f64)> {
    let g = *samples[0].grid();
    let h = g.h();
    let n_lags = ((plan.window / h) + 1e-9).floor() as usize + 1;
    let table = plan.lag_table(h, n_lags);
    let steps = plan.harmonic_steps(h);
    let nw = steps.len();
    let stride = (g.n_steps / max_times.max(1)).max(1);
    let mut times: Vec<usize> = (stride..=g.n_steps).step_by(stride).collect();
    if times.last() != Some(&g.n_steps) {
        times.push(g.n_steps);
    }
    let mut worst = vec![0.0f64; times.len()];
    for u in samples {
        let p = u.dim();
        let tr = exact_transforms_with(u, &steps);
        for i in 0..p {
            // Columns: transform vectors at the validated times.
            let b = DMatrix::from_fn(nw, times.len(), |j, c| tr[times[c] * p * nw + i * nw + j]);
            let r = &table * &b;
            for (c, &k) in times.iter().enumerate() {
                for l in 0..n_lags {
                    let truth = if l <= k { u.at(k - l)[i] } else { 0.0 };
                    worst[c] = worst[c].max((r[(l, c)] - truth).abs());
                }
            }
        }
    }
    times.into_iter().zip(worst).collect()
}

/// Builds and validates a plan from explicit probe and validation samples.
pub fn build_plan_from_samples(
    probe: &[Signal],
    fresh: &[Signal],
    sup_bound: f64,
    window: f64,
    target_err: f64,
    opts: &PlanOptions,
) -> Result<ReconstructionPlan> {
    if !(target_err > 0.0) {
        return Err(Error::InvalidParameter("target error must be > 0".into()));
    }
    if probe.is_empty() || fresh.is_empty() {
        return Err(Error::InvalidParameter("need probe and validation samples".into()));
    }
    let g = *probe[0].grid();
    let duration = g.duration();
    if !(window > 0.0) || window > duration + 1e-12 {
        return Err(Error::InvalidParameter(format!(
            "window {window} outside (0, {duration}]"
        )));
    }
    let (mut eps, _) = choose_mollifier_width(probe, opts.moll_share * target_err)?;
    let xi = choose_tail_scale(sup_bound, opts.tail_share * target_err);
    let mut l_min = xi / eps;
    let mut shrunk = false;
    let mut capped = false;
    let mut history = Vec::new();
    loop {
        let d_omega = 2.0 * std::f64::consts::PI / (opts.spacing_margin * (duration + window + eps));
        let mut n_half = (l_min / d_omega + 0.5).ceil().max(1.0) as usize;
        // The tail bound is worst-case; validation at the cap decides before giving up.
        if 2 * n_half > opts.n_cap && !capped && opts.n_cap >= 2 {
            capped = true;
            n_half = opts.n_cap / 2;
        } else if 2 * n_half > opts.n_cap {
            return Err(Error::Unachievable {
                tol: target_err,
                reason: format!(
                    "frequency count {} exceeds the cap {} (history: {:?})",
                    2 * n_half,
                    opts.n_cap,
                    history
                ),
            });
        }
        let mut plan = ReconstructionPlan::from_grid(eps, d_omega, n_half, window, target_err)?;
        let err = validation_error(&plan, fresh, opts.max_validation_times);
        history.push(PlanAttempt {
            n: plan.n(),
            eps_moll: eps,
            l_cut: plan.l_cut,
            validated_err: err,
        });
        if err <= target_err {
            plan.validated_err = Some(err);
            plan.history = history;
            return Ok(plan);
        }
        if !shrunk {
            shrunk = true;
            eps *= 0.8;
            l_min = xi / eps;
        } else {
            l_min *= 2.0;
        }
    }
}

/// Plan for `family` with reconstruction window `window` (in lag) validated to `target_err`.
pub fn build_plan(family: &dyn InputFamily, window: f64, target_err: f64) -> Result<ReconstructionPlan> {
    build_plan_with(family, window, target_err, &PlanOptions::default())
}

pub fn build_plan_with(
    family: &dyn InputFamily,
    window: f64,
    target_err: f64,
    opts: &PlanOptions,
) -> Result<ReconstructionPlan> {
    let probe = family.samples(PROBE_BASE, PROBE_COUNT);
    let fresh = family.samples(FRESH_BASE, FRESH_COUNT);
    build_plan_from_samples(&probe, &fresh, family.sup_bound(), window, target_err, opts)
}

/// The readout map `Ψ(β; t) = Φ(R(β; t))(t)` of a plan and an operator.
#[derive(Debug, Clone)]
pub struct PsiOracle {
    pub plan: ReconstructionPlan,
    pub op: TargetOperator,
    grid: crate::signal::TimeGrid,
    table: DMatrix<f64>,
    table_t: DMatrix<f64>,
}

impl PsiOracle {
    /// Precomputes the lag table for signals on `grid`; the plan window must cover it.
    pub fn new(plan: ReconstructionPlan, op: TargetOperator, grid: crate::signal::TimeGrid) -> Result<Self> {
        if plan.window + 1e-9 < grid.duration() {
            return Err(Error::InvalidParameter(
                "readout map needs a plan whose window covers the whole interval".into(),
            ));
        }
        let table = plan.lag_table(grid.h(), grid.len());
        let table_t = table.transpose();
        Ok(Self {
            plan,
            op,
            grid,
            table,
            table_t,
        })
    }

    pub fn grid(&self) -> &crate::signal::TimeGrid {
        &self.grid
    }

    pub fn n_half(&self) -> usize {
        self.plan.n_half()
    }

    /// Reconstructed history `R(β; t_k)` on the grid (zero after `t_k`); `beta` uses the
    /// bank layout (component-major, positive frequencies).
    pub fn reconstruct_signal(&self, beta: &[f64], k: usize) -> Result<Signal> {
        let nw = self.n_half();
        let p = self.op.p;
        if beta.len() < p * nw {
            return Err(Error::DimensionMismatch(format!(
                "expected {} transform values, got {}",
                p * nw,
                beta.len()
            )));
        }
        let mut vals = vec![0.0; self.grid.len() * p];
        for i in 0..p {
            let b = &beta[i * nw..(i + 1) * nw];
            for l in 0..=k {
                // Column `l` of the transposed table is contiguous.
                let col = &self.table_t.as_slice()[l * nw..(l + 1) * nw];
                vals[(k - l) * p + i] = col.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        Signal::new(self.grid, p, vals)
    }

    pub fn eval_index(&self, beta: &[f64], k: usize) -> Result<Vec<f64>> {
        let r = self.reconstruct_signal(beta, k)?;
        Ok(self.op.apply(&r)?.at(k).to_vec())
    }

    /// `Ψ(x(t_k); t_k)` for every `k` in `ks`, reconstructing all histories of
    /// one component with a single matrix product.
    pub fn eval_along(&self, x: &Signal, ks: &[usize]) -> Result<Vec<Vec<f64>>> {
        let nw = self.n_half();
        let p = self.op.p;
        if x.dim() < p * nw {
            return Err(Error::DimensionMismatch(format!(
                "expected {} transform values, got {}",
                p * nw,
                x.dim()
            )));
        }
        if let Some(&k) = ks.iter().find(|&&k| k >= self.grid.len() || k >= x.len()) {
            return Err(Error::InvalidParameter(format!("grid index {k} out of range")));
        }
        let n = self.grid.len();
        let recon: Vec<DMatrix<f64>> = (0..p)
            .map(|i| {
                let b = DMatrix::from_fn(nw, ks.len(), |j, c| x.at(ks[c])[i * nw + j]);
                &self.table * b
            })
            .collect();
        let mut out = Vec::with_capacity(ks.len());
        let mut vals = vec![0.0; n * p];
        for (c, &k) in ks.iter().enumerate() {
            vals.iter_mut().for_each(|v| *v = 0.0);
            for (i, r) in recon.iter().enumerate() {
                let col = r.column(c);
                for l in 0..=k {
                    vals[(k - l) * p + i] = col[l];
                }
            }
            let sig = Signal::new(self.grid, p, vals.clone())?;
            out.push(self.op.apply(&sig)?.at(k).to_vec());
        }
        Ok(out)
    }
}

/// `Ψ(β; t)` for a grid time `t`.
pub fn psi_eval(po: &PsiOracle, beta: &[f64], t: f64) -> Result<Vec<f64>> {
    let g = po.grid();
    if t < g.t_start - 1e-12 || t > g.t_end + 1e-12 {
        return Err(Error::OutOfDomain {
            t,
            start: g.t_start,
            end: g.t_end,
        });
    }
    let x = (t - g.t_start) / g.h();
    let k = x.round();
    if (x - k).abs() > 1e-6 {
        return Err(Error::InvalidParameter(format!("t = {t} is not a grid time")));
    }
    po.eval_index(beta, k as usize)
}
