//! Coupled pendula `Mθ̈ = −(K + C) sin θ + F`, the change of variables
//! `θ = W y` with `W = M⁻¹(K + C)` giving `ÿ = −sin(W y) + (K + C)⁻¹F`, and
//! mass-ordered couplings whose one-way truncation is a multi-layer oscillator.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::integrate::{integrate_from, IntegratorConfig, Method, SecondOrderSystem, Trajectory};
use crate::linalg::{condition_number, rowmajor, spectral_norm, vector};
use crate::oscillator::{Layer, MultiLayerOscillator};
use crate::signal::{fmt17, Signal, TimeGrid};

/// Largest accepted condition number of `K + C`.
pub const MAX_CONDITION: f64 = 1e8;
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Ordering parameters of the default sweep.
pub const DEFAULT_SWEEP: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FKSystem {
    /// Diagonal of `M`.
    pub mass: Vec<f64>,
    /// Diagonal of `K`.
    pub k_spring: Vec<f64>,
    #[serde(with = "rowmajor")]
    pub coupling: DMatrix<f64>,
    /// Forcing `F(t)`; absent means `F ≡ 0`. Not serialized.
    #[serde(skip)]
    pub forcing: Option<Signal>,
}

impl FKSystem {
    pub fn new(mass: Vec<f64>, k_spring: Vec<f64>, coupling: DMatrix<f64>, forcing: Option<Signal>) -> Result<Self> {
        let s = Self {
            mass,
            k_spring,
            coupling,
            forcing,
        };
        s.validate()?;
        Ok(s)
    }

    /// Pendula of length `ℓ` under gravity `g`: `k = μ g/ℓ`.
    pub fn pendula(mass: Vec<f64>, g_over_l: f64, coupling: DMatrix<f64>) -> Result<Self> {
        let k = mass.iter().map(|m| m * g_over_l).collect();
        Self::new(mass, k, coupling, None)
    }

    /// Fills the diagonal of `c` so that every row sums to zero.
    pub fn with_row_sum_rule(mut c: DMatrix<f64>) -> DMatrix<f64> {
        for i in 0..c.nrows() {
            c[(i, i)] = 0.0;
            let s: f64 = c.row(i).iter().sum();
            c[(i, i)] = -s;
        }
        c
    }

    pub fn n(&self) -> usize {
        self.mass.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 || self.k_spring.len() != n || self.coupling.shape() != (n, n) {
            return Err(Error::DimensionMismatch("M, K and C must share one size".into()));
        }
        if self.mass.iter().chain(&self.k_spring).any(|x| !(*x > 0.0) || !x.is_finite()) {
            return Err(Error::InvalidParameter("masses and spring constants must be positive".into()));
        }
        let scale = self.coupling.amax().max(1.0);
        if (&self.coupling - self.coupling.transpose()).amax() > ROW_SUM_TOL * scale {
            return Err(Error::InvalidParameter("C must be symmetric".into()));
        }
        let r = self.row_sum_residual();
        if r > ROW_SUM_TOL * scale {
            return Err(Error::InvalidParameter(format!("C row sums reach {r:e}")));
        }
        if let Some(f) = &self.forcing {
            if f.dim() != n {
                return Err(Error::DimensionMismatch(format!("forcing has {} components, expected {n}", f.dim())));
            }
        }
        Ok(())
    }

    pub fn row_sum_residual(&self) -> f64 {
        self.coupling
            .row_iter()
            .map(|r| r.iter().sum::<f64>().abs())
            .fold(0.0, f64::max)
    }

    /// `K + C`.
    pub fn stiffness(&self) -> DMatrix<f64> {
        &self.coupling + DMatrix::from_diagonal(&DVector::from_column_slice(&self.k_spring))
    }

    /// `M⁻¹(K + C)`.
    pub fn weight(&self) -> DMatrix<f64> {
        let mut w = self.stiffness();
        for (i, m) in self.mass.iter().enumerate() {
            w.row_mut(i).unscale_mut(*m);
        }
        w
    }

    /// `½ θ̇ᵀMθ̇ + Σ kᵢ(1 − cos θᵢ)`.
    pub fn energy(&self, theta: &[f64], dtheta: &[f64]) -> f64 {
        let kin: f64 = self.mass.iter().zip(dtheta).map(|(m, v)| 0.5 * m * v * v).sum();
        let pot: f64 = self.k_spring.iter().zip(theta).map(|(k, t)| k * (1.0 - t.cos())).sum();
        kin + pot
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_covers(f: &Signal, grid: &TimeGrid) -> Result<()> {
    let g = f.grid();
    let slack = 1e-9 * grid.h();
    if g.t_start > grid.t_start + slack || g.t_end < grid.t_end - slack {
        return Err(Error::OutOfDomain {
            t: grid.t_end,
            start: g.t_start,
            end: g.t_end,
        });
    }
    Ok(())
}

/// Forcing read by linear interpolation, clamped to its grid.
fn add_forcing(f: &Signal, map: Option<&DMatrix<f64>>, t: f64, buf: &mut [f64], a: &mut [f64]) {
    let g = f.grid();
    f.eval_into(t.clamp(g.t_start, g.t_end), buf).expect("time clamped to the grid");
    match map {
        None => a.iter_mut().zip(buf.iter()).for_each(|(x, b)| *x += b),
        Some(m) => {
            for (i, x) in a.iter_mut().enumerate() {
                *x += m.row(i).iter().zip(buf.iter()).map(|(p, q)| p * q).sum::<f64>();
            }
        }
    }
}

/// `ẍ = −G sin(H x) + P F(t)`; in angle form `G = M⁻¹(K + C)`, `H = I`, `P = M⁻¹`.
struct SineSystem<'a> {
    g: DMatrix<f64>,
    h: Option<DMatrix<f64>>,
    forcing: Option<(&'a Signal, Option<DMatrix<f64>>)>,
}

impl SecondOrderSystem for SineSystem<'_> {
    fn dim(&self) -> usize {
        self.g.nrows()
    }

    fn accel(&self, t: f64, y: &[f64], _v: &[f64], a: &mut [f64]) {
        let n = y.len();
        let s: Vec<f64> = match &self.h {
            None => y.iter().map(|x| x.sin()).collect(),
            Some(h) => (0..n).map(|i| h.row(i).iter().zip(y).map(|(p, q)| p * q).sum::<f64>().sin()).collect(),
        };
        for (i, ai) in a.iter_mut().enumerate() {
            *ai = -self.g.row(i).iter().zip(&s).map(|(p, q)| p * q).sum::<f64>();
        }
        if let Some((f, map)) = &self.forcing {
            let mut buf = vec![0.0; f.dim()];
            add_forcing(f, map.as_ref(), t, &mut buf, a);
        }
    }
}

fn substeps(cfg: &IntegratorConfig, grid: &TimeGrid, w: &DMatrix<f64>) -> usize {
    cfg.substeps_for(grid.h(), spectral_norm(w).sqrt())
}

fn angle_system(sys: &FKSystem) -> SineSystem<'_> {
    let minv = DMatrix::from_diagonal(&DVector::from_iterator(sys.n(), sys.mass.iter().map(|m| 1.0 / m)));
    SineSystem {
        g: sys.weight(),
        h: None,
        forcing: sys.forcing.as_ref().map(|f| (f, Some(minv))),
    }
}

/// Angles and angular velocities on `grid`.
pub fn fk_trajectory(
    sys: &FKSystem,
    theta0: &[f64],
    dtheta0: &[f64],
    grid: &TimeGrid,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    sys.validate()?;
    cfg.validate()?;
    if theta0.len() != sys.n() || dtheta0.len() != sys.n() {
        return Err(Error::DimensionMismatch(format!("initial state must have {} components", sys.n())));
    }
    if let Some(f) = &sys.forcing {
        check_covers(f, grid)?;
    }
    let ode = angle_system(sys);
    integrate_from(&ode, grid, cfg.method, substeps(cfg, grid, &ode.g), theta0, dtheta0)
}

pub fn simulate_fk(
    sys: &FKSystem,
    theta0: &[f64],
    dtheta0: &[f64],
    grid: &TimeGrid,
    cfg: &IntegratorConfig,
) -> Result<Signal> {
    let tr = fk_trajectory(sys, theta0, dtheta0, grid, cfg)?;
    Signal::new(*grid, sys.n(), tr.y)
}

/// `θ = W y` with `W = M⁻¹(K + C)`, so that `ÿ = −sin(W y) + (K + C)⁻¹F`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeOfVariables {
    #[serde(with = "rowmajor")]
    pub w: DMatrix<f64>,
    /// `(K + C)⁻¹`, applied to the forcing.
    #[serde(with = "rowmajor")]
    pub forcing_map: DMatrix<f64>,
    /// 2-norm condition number of `K + C`.
    pub condition: f64,
    #[serde(skip)]
    pub forcing: Option<Signal>,
}

pub fn change_variables(sys: &FKSystem) -> Result<ChangeOfVariables> {
    sys.validate()?;
    let kc = sys.stiffness();
    let condition = condition_number(&kc);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Singular(format!("K + C has condition number {condition:e}")));
    }
    let forcing_map = kc
        .try_inverse()
        .ok_or_else(|| Error::Singular("K + C is not invertible".into()))?;
    Ok(ChangeOfVariables {
        w: sys.weight(),
        forcing_map,
        condition,
        forcing: sys.forcing.clone(),
    })
}

impl ChangeOfVariables {
    pub fn to_angles(&self, y: &[f64]) -> Vec<f64> {
        (&self.w * DVector::from_column_slice(y)).as_slice().to_vec()
    }

    pub fn from_angles(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.w
            .clone()
            .lu()
            .solve(&DVector::from_column_slice(theta))
            .map(|v| v.as_slice().to_vec())
            .ok_or_else(|| Error::Singular("W is not invertible".into()))
    }

    pub fn simulate(&self, y0: &[f64], dy0: &[f64], grid: &TimeGrid, cfg: &IntegratorConfig) -> Result<Signal> {
        cfg.validate()?;
        let n = self.w.nrows();
        if y0.len() != n || dy0.len() != n {
            return Err(Error::DimensionMismatch(format!("initial state must have {n} components")));
        }
        if let Some(f) = &self.forcing {
            check_covers(f, grid)?;
        }
        let ode = SineSystem {
            g: DMatrix::identity(n, n),
            h: Some(self.w.clone()),
            forcing: self.forcing.as_ref().map(|f| (f, Some(self.forcing_map.clone()))),
        };
        let tr = integrate_from(&ode, grid, cfg.method, substeps(cfg, grid, &self.w), y0, dy0)?;
        Signal::new(*grid, n, tr.y)
    }

    /// Angle trajectory `W y(t)`.
    pub fn angles(&self, y: &Signal) -> Result<Signal> {
        let g = *y.grid();
        let mut vals = Vec::with_capacity(y.values().len());
        for k in 0..y.len() {
            vals.extend(self.to_angles(y.at(k)));
        }
        Signal::new(g, y.dim(), vals)
    }
}

/// Layer sizes and magnitudes of a mass-ordered coupling. Layer 1 is the
/// input layer; the state vector lists layers `L, …, 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrderedCouplingSpec {
    /// Widths of layers `1, …, L`.
    pub widths: Vec<usize>,
    pub eps_order: f64,
    /// `μ^ℓ = mu_base·ε^ℓ`.
    pub mu_base: f64,
    /// Entries of `C^ℓ` are `c_base·ε^ℓ·U(−1, 1)`.
    pub c_base: f64,
    pub g_over_l: f64,
    pub seed: u64,
}

impl Default for OrderedCouplingSpec {
    fn default() -> Self {
        Self {
            widths: vec![3, 3, 3],
            eps_order: 0.1,
            mu_base: 1.0,
            c_base: 0.5,
            g_over_l: 4.0,
            seed: 0,
        }
    }
}

impl OrderedCouplingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidParameter("need at least one layer, all widths >= 1".into()));
        }
        if !(self.eps_order > 0.0 && self.eps_order < 1.0) {
            return Err(Error::InvalidParameter("ε_order must lie in (0, 1)".into()));
        }
        if !(self.mu_base > 0.0) || !(self.g_over_l > 0.0) || !(self.c_base >= 0.0) {
            return Err(Error::InvalidParameter("mu_base, g/ℓ must be > 0 and c_base >= 0".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.widths.len()
    }

    pub fn n(&self) -> usize {
        self.widths.iter().sum()
    }

    /// First state index of layer `l` (1-based).
    pub fn offset(&self, l: usize) -> usize {
        self.widths[l..].iter().sum()
    }

    /// Layer (1-based) of state index `i`.
    pub fn layer_of(&self, i: usize) -> usize {
        (1..=self.layers())
            .find(|&l| i >= self.offset(l) && i < self.offset(l) + self.widths[l - 1])
            .expect("index inside the state")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMagnitudes {
    pub layer: usize,
    pub mass: f64,
    /// `max |C_ii|/μ^ℓ`.
    pub rho: f64,
    /// `max |C^ℓ|/μ^ℓ` (one-way coupling from layer `ℓ − 1`).
    pub forward: f64,
    /// `max |C^{ℓ+1}|/μ^ℓ` (feedback from layer `ℓ + 1`).
    pub feedback: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderedCoupling {
    pub spec: OrderedCouplingSpec,
    pub system: FKSystem,
    pub magnitudes: Vec<LayerMagnitudes>,
    /// Largest feedback entry of `M⁻¹C`.
    pub max_offdiag_ratio: f64,
    pub condition: f64,
    /// Smallest eigenvalue of `M^{-1/2}(K + C)M^{-1/2}`.
    pub min_mode: f64,
    pub positive_definite: bool,
}

pub fn build_ordered_coupling(spec: &OrderedCouplingSpec) -> Result<OrderedCoupling> {
    spec.validate()?;
    let n = spec.n();
    let eps = spec.eps_order;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut c = DMatrix::zeros(n, n);
    for l in 2..=spec.layers() {
        let scale = spec.c_base * eps.powi(l as i32);
        let (r0, c0) = (spec.offset(l), spec.offset(l - 1));
        for i in 0..spec.widths[l - 1] {
            for j in 0..spec.widths[l - 2] {
                // Drawn before scaling so every ε sees the same pattern.
                let x: f64 = rng.gen_range(-1.0..=1.0);
                c[(r0 + i, c0 + j)] = scale * x;
                c[(c0 + j, r0 + i)] = scale * x;
            }
        }
    }
    let c = FKSystem::with_row_sum_rule(c);
    let mass: Vec<f64> = (0..n).map(|i| spec.mu_base * eps.powi(spec.layer_of(i) as i32)).collect();
    let system = FKSystem::pendula(mass, spec.g_over_l, c)?;
    let cov = change_variables(&system)?;

    let mut magnitudes = Vec::new();
    let mut max_offdiag_ratio: f64 = 0.0;
    for l in 1..=spec.layers() {
        let (r0, w) = (spec.offset(l), spec.widths[l - 1]);
        let mu = spec.mu_base * eps.powi(l as i32);
        let mut m = LayerMagnitudes {
            layer: l,
            mass: mu,
            rho: 0.0,
            forward: 0.0,
            feedback: 0.0,
        };
        for i in r0..r0 + w {
            m.rho = m.rho.max(system.coupling[(i, i)].abs() / mu);
            for j in 0..n {
                let lj = spec.layer_of(j);
                let r = system.coupling[(i, j)].abs() / mu;
                if lj + 1 == l {
                    m.forward = m.forward.max(r);
                } else if lj == l + 1 {
                    m.feedback = m.feedback.max(r);
                }
            }
        }
        max_offdiag_ratio = max_offdiag_ratio.max(m.feedback);
        magnitudes.push(m);
    }
    let sqrt_minv = DVector::from_iterator(n, system.mass.iter().map(|m| 1.0 / m.sqrt()));
    let sym = DMatrix::from_diagonal(&sqrt_minv) * system.stiffness() * DMatrix::from_diagonal(&sqrt_minv);
    let min_mode = sym.symmetric_eigenvalues().min();
    Ok(OrderedCoupling {
        spec: spec.clone(),
        system,
        magnitudes,
        max_offdiag_ratio,
        condition: cov.condition,
        min_mode,
        positive_definite: min_mode > 0.0,
    })
}

impl OrderedCoupling {
    /// `W` with the feedback blocks (layer `ℓ + 1` into layer `ℓ`) removed.
    pub fn truncated_weight(&self) -> DMatrix<f64> {
        let mut w = self.system.weight();
        let n = w.nrows();
        for i in 0..n {
            for j in 0..n {
                if self.spec.layer_of(j) > self.spec.layer_of(i) {
                    w[(i, j)] = 0.0;
                }
            }
        }
        w
    }

    /// The truncated system as a multi-layer oscillator with `σ = sin`:
    /// `ÿ¹ = sin(−w¹ ⊙ y¹) + f` and `ÿ^ℓ = sin(−w^ℓ ⊙ y^ℓ − V^ℓ y^{ℓ−1})`, read out
    /// as layer `L`.
    pub fn reduced_multilayer(&self) -> Result<MultiLayerOscillator> {
        let w = self.truncated_weight();
        let s = &self.spec;
        let mut layers = Vec::new();
        for l in 1..=s.layers() {
            let (r0, width) = (s.offset(l), s.widths[l - 1]);
            let diag = DVector::from_iterator(width, (0..width).map(|i| -w[(r0 + i, r0 + i)]));
            let layer = if l == 1 {
                Layer {
                    w: diag,
                    v: DMatrix::identity(width, width),
                    b: DVector::zeros(width),
                    force_outside: true,
                }
            } else {
                let c0 = s.offset(l - 1);
                Layer {
                    w: diag,
                    v: -w.view((r0, c0), (width, s.widths[l - 2])).into_owned(),
                    b: DVector::zeros(width),
                    force_outside: false,
                }
            };
            layers.push(layer);
        }
        let top = *s.widths.last().unwrap();
        let osc = MultiLayerOscillator {
            input_dim: s.widths[0],
            layers,
            a: DMatrix::identity(top, top),
            c: DVector::zeros(top),
            act: Activation::Sine,
        };
        osc.validate()?;
        Ok(osc)
    }

    /// Lifts a layer-1 forcing to the full state.
    fn lift(&self, f: &Signal) -> Result<Signal> {
        let s = &self.spec;
        if f.dim() != s.widths[0] {
            return Err(Error::DimensionMismatch(format!(
                "forcing drives layer 1 with {} components, got {}",
                s.widths[0],
                f.dim()
            )));
        }
        let (n, r0) = (s.n(), s.offset(1));
        let mut vals = vec![0.0; f.len() * n];
        for k in 0..f.len() {
            vals[k * n + r0..k * n + r0 + f.dim()].copy_from_slice(f.at(k));
        }
        Signal::new(*f.grid(), n, vals)
    }
}

/// Layer-1 forcing `a·sin(νt + i)` on `grid`.
pub fn sine_forcing(spec: &OrderedCouplingSpec, grid: TimeGrid, amplitude: f64, nu: f64) -> Result<Signal> {
    Signal::from_fn(grid, spec.widths[0], |t, row| {
        for (i, r) in row.iter_mut().enumerate() {
            *r = amplitude * (nu * t + i as f64).sin();
        }
    })
}

pub fn default_fk_grid() -> TimeGrid {
    TimeGrid {
        t_start: 0.0,
        t_end: 10.0,
        n_steps: 1000,
    }
}

/// Default layer-1 forcing on the default grid.
pub fn default_forcing(spec: &OrderedCouplingSpec) -> Result<Signal> {
    sine_forcing(spec, default_fk_grid(), 0.5, 1.3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub eps_order: f64,
    /// Sup deviation between full and truncated `y` trajectories.
    pub deviation: f64,
    pub deviation_at_start: f64,
    pub max_offdiag_ratio: f64,
    pub row_sum_residual: f64,
    #[serde(with = "vector")]
    pub final_state_gap: DVector<f64>,
}

/// Simulates `ÿ = −sin(W y) + f` and its truncation from rest with the same
/// steps; `forcing` acts on layer 1 in `y` coordinates.
pub fn compare_reduction(spec: &OrderedCouplingSpec, forcing: &Signal, cfg: &IntegratorConfig) -> Result<ReductionReport> {
    cfg.validate()?;
    let oc = build_ordered_coupling(spec)?;
    let f = oc.lift(forcing)?;
    let grid = *f.grid();
    let w = oc.system.weight();
    let steps = substeps(cfg, &grid, &w);
    let n = spec.n();
    let z = vec![0.0; n];
    let run = |h: DMatrix<f64>| -> Result<Trajectory> {
        let ode = SineSystem {
            g: DMatrix::identity(n, n),
            h: Some(h),
            forcing: Some((&f, None)),
        };
        integrate_from(&ode, &grid, cfg.method, steps, &z, &z)
    };
    let full = run(w)?;
    let cut = run(oc.truncated_weight())?;
    let gap = |k: usize| -> Vec<f64> { (0..n).map(|i| full.y[k * n + i] - cut.y[k * n + i]).collect() };
    let mut deviation: f64 = 0.0;
    for k in 0..grid.len() {
        deviation = gap(k).iter().fold(deviation, |m, d| m.max(d.abs()));
    }
    Ok(ReductionReport {
        eps_order: spec.eps_order,
        deviation,
        deviation_at_start: gap(0).iter().fold(0.0, |m: f64, d| m.max(d.abs())),
        max_offdiag_ratio: oc.max_offdiag_ratio,
        row_sum_residual: oc.system.row_sum_residual(),
        final_state_gap: DVector::from_vec(gap(grid.n_steps)),
    })
}

/// `compare_reduction` at each ordering parameter, one thread per point.
pub fn sweep_reduction(
    spec: &OrderedCouplingSpec,
    eps_list: &[f64],
    forcing: &Signal,
    cfg: &IntegratorConfig,
) -> Result<Vec<ReductionReport>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = eps_list
            .iter()
            .map(|&e| {
                let s = OrderedCouplingSpec {
                    eps_order: e,
                    ..spec.clone()
                };
                scope.spawn(move || compare_reduction(&s, forcing, cfg))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    })
}

/// Columns `eps_order, D, max_offdiag_ratio`.
pub fn sweep_csv(reports: &[ReductionReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["eps_order", "D", "max_offdiag_ratio"])?;
    for r in reports {
        w.write_record([fmt17(r.eps_order), fmt17(r.deviation), fmt17(r.max_offdiag_ratio)])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Sup over the grid of `|E_h(t) − E_ref(t)|` for the unforced system under
/// velocity Verlet with `substeps` per grid interval, against RK4 at 16× the steps.
pub fn energy_drift(sys: &FKSystem, theta0: &[f64], grid: &TimeGrid, substeps: usize) -> Result<f64> {
    let free = FKSystem {
        forcing: None,
        ..sys.clone()
    };
    let z = vec![0.0; free.n()];
    let run = |method: Method, s: usize| {
        let cfg = IntegratorConfig {
            method,
            substeps_per_grid_point: s,
            max_omega_step: f64::INFINITY,
            ..Default::default()
        };
        fk_trajectory(&free, theta0, &z, grid, &cfg)
    };
    let fine = run(Method::Rk4, 16 * substeps)?;
    let coarse = run(Method::VelocityVerlet, substeps)?;
    let n = free.n();
    let mut worst: f64 = 0.0;
    for k in 0..grid.len() {
        let r = k * n..(k + 1) * n;
        let e = free.energy(&coarse.y[r.clone()], &coarse.v[r.clone()]);
        let e_ref = free.energy(&fine.y[r.clone()], &fine.v[r]);
        worst = worst.max((e - e_ref).abs());
    }
    Ok(worst)
}

/// `drift(h)/drift(h/2)`; about 4 for a second-order method.
pub fn energy_halving_ratio(sys: &FKSystem, theta0: &[f64], grid: &TimeGrid, substeps: usize) -> Result<f64> {
    Ok(energy_drift(sys, theta0, grid, substeps)? / energy_drift(sys, theta0, grid, 2 * substeps)?)
}
