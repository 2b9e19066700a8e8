//! General, multi-layer and damped oscillator networks driven by an input
//! signal from rest, with their block embedding, layer energies and
//! reversibility check.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::integrate::{
    integrate, scalar_oscillator, verlet_round_trip, IntegratorConfig, Method, SecondOrderSystem,
    Trajectory,
};
use crate::linalg::{all_finite, rowmajor, spectral_radius, vector};
use crate::signal::{Signal, TimeGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `ÿ = σ(W y + V u + b)`, `z = A y + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralOscillator {
    #[serde(with = "rowmajor")]
    pub w: DMatrix<f64>,
    #[serde(with = "rowmajor")]
    pub v: DMatrix<f64>,
    #[serde(with = "vector")]
    pub b: DVector<f64>,
    #[serde(with = "rowmajor")]
    pub a: DMatrix<f64>,
    #[serde(with = "vector")]
    pub c: DVector<f64>,
    pub act: Activation,
}

impl GeneralOscillator {
    pub fn hidden_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.w.nrows();
        let ok = self.w.ncols() == m
            && self.v.nrows() == m
            && self.b.len() == m
            && self.a.ncols() == m
            && self.c.len() == self.a.nrows();
        if !ok {
            return Err(Error::DimensionMismatch("general oscillator shapes".into()));
        }
        if ![&self.w, &self.v, &self.a].iter().all(|m| all_finite(m))
            || !self.b.iter().chain(self.c.iter()).all(|x| x.is_finite())
        {
            return Err(Error::InvalidParameter("non-finite oscillator entry".into()));
        }
        Ok(())
    }
}

/// One layer `ÿ = σ(w ⊙ y + V y_prev + b)`, or with `force_outside`
/// `ÿ = σ(w ⊙ y + b) + V y_prev`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    #[serde(with = "vector")]
    pub w: DVector<f64>,
    #[serde(with = "rowmajor")]
    pub v: DMatrix<f64>,
    #[serde(with = "vector")]
    pub b: DVector<f64>,
    #[serde(default)]
    pub force_outside: bool,
}

impl Layer {
    pub fn width(&self) -> usize {
        self.w.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiLayerOscillator {
    pub input_dim: usize,
    pub layers: Vec<Layer>,
    #[serde(with = "rowmajor")]
    pub a: DMatrix<f64>,
    #[serde(with = "vector")]
    pub c: DVector<f64>,
    pub act: Activation,
}

impl MultiLayerOscillator {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidParameter("need at least one layer".into()));
        }
        let mut prev = self.input_dim;
        for (i, l) in self.layers.iter().enumerate() {
            let m = l.w.len();
            if l.v.nrows() != m || l.v.ncols() != prev || l.b.len() != m {
                return Err(Error::DimensionMismatch(format!("layer {}", i + 1)));
            }
            if !all_finite(&l.v) || !l.w.iter().chain(l.b.iter()).all(|x| x.is_finite()) {
                return Err(Error::InvalidParameter(format!("non-finite entry in layer {}", i + 1)));
            }
            prev = m;
        }
        if self.a.ncols() != prev || self.c.len() != self.a.nrows() {
            return Err(Error::DimensionMismatch("readout".into()));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers.iter().map(|l| l.width()).sum()
    }

    pub fn output_dim(&self) -> usize {
        self.a.nrows()
    }

    fn omega_max(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter())
            .fold(0.0f64, |m, w| m.max(w.abs()))
            .sqrt()
    }
}

/// `ÿ = σ(W y + 𝒲 ẏ + V u + b) − γ y − ε ẏ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoRNNSystem {
    #[serde(with = "rowmajor")]
    pub w: DMatrix<f64>,
    #[serde(with = "rowmajor")]
    pub w_vel: DMatrix<f64>,
    #[serde(with = "rowmajor")]
    pub v: DMatrix<f64>,
    #[serde(with = "vector")]
    pub b: DVector<f64>,
    pub gamma: f64,
    pub eps_damp: f64,
    pub act: Activation,
}

impl CoRNNSystem {
    pub fn validate(&self) -> Result<()> {
        let m = self.w.nrows();
        if self.w.ncols() != m
            || self.w_vel.shape() != (m, m)
            || self.v.nrows() != m
            || self.b.len() != m
        {
            return Err(Error::DimensionMismatch("CoRNN shapes".into()));
        }
        if !(self.gamma >= 0.0) || !(self.eps_damp >= 0.0) {
            return Err(Error::InvalidParameter("damping constants must be >= 0".into()));
        }
        Ok(())
    }
}

/// Grid values of an affine map `M u + b`, read by linear interpolation.
struct GridForcing {
    t_start: f64,
    inv_h: f64,
    n_steps: usize,
    dim: usize,
    values: Vec<f64>,
}

impl GridForcing {
    fn affine(u: &Signal, m: &DMatrix<f64>, b: Option<&DVector<f64>>) -> Self {
        let dim = m.nrows();
        // Columns of `M Uᵀ` are the forcing vectors at successive grid points.
        let ut = DMatrix::from_column_slice(u.dim(), u.len(), u.values());
        let mut p = m * ut;
        if let Some(b) = b {
            for mut col in p.column_iter_mut() {
                col += b;
            }
        }
        let values = p.as_slice().to_vec();
        let g = u.grid();
        Self {
            t_start: g.t_start,
            inv_h: 1.0 / g.h(),
            n_steps: g.n_steps,
            dim,
            values,
        }
    }

    #[inline]
    fn add_into(&self, t: f64, out: &mut [f64]) {
        let x = ((t - self.t_start) * self.inv_h).clamp(0.0, self.n_steps as f64);
        let k = (x.floor() as usize).min(self.n_steps - 1);
        let f = x - k as f64;
        let a = &self.values[k * self.dim..(k + 1) * self.dim];
        let b = &self.values[(k + 1) * self.dim..(k + 2) * self.dim];
        for i in 0..self.dim {
            out[i] += a[i] + f * (b[i] - a[i]);
        }
    }
}

fn matvec_add(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    for (j, xj) in x.iter().enumerate() {
        if *xj != 0.0 {
            let col = m.column(j);
            for (o, mij) in out.iter_mut().zip(col.iter()) {
                *o += mij * xj;
            }
        }
    }
}

struct GeneralSys<'a> {
    osc: &'a GeneralOscillator,
    forcing: GridForcing,
}

impl SecondOrderSystem for GeneralSys<'_> {
    fn dim(&self) -> usize {
        self.osc.hidden_dim()
    }

    fn accel(&self, t: f64, y: &[f64], _v: &[f64], a: &mut [f64]) {
        a.iter_mut().for_each(|x| *x = 0.0);
        self.forcing.add_into(t, a);
        matvec_add(&self.osc.w, y, a);
        for x in a.iter_mut() {
            *x = self.osc.act.eval(*x);
        }
    }
}

fn check_input(u: &Signal, p: usize) -> Result<()> {
    if u.dim() != p {
        return Err(Error::DimensionMismatch(format!(
            "input has dimension {}, system expects {p}",
            u.dim()
        )));
    }
    Ok(())
}

fn readout(grid: TimeGrid, m: usize, ys: &[f64], a: &DMatrix<f64>, c: &DVector<f64>) -> Result<Signal> {
    let q = a.nrows();
    let mut vals = Vec::with_capacity(grid.len() * q);
    for k in 0..grid.len() {
        let y = &ys[k * m..(k + 1) * m];
        for i in 0..q {
            let mut s = c[i];
            for (j, yj) in y.iter().enumerate() {
                s += a[(i, j)] * yj;
            }
            vals.push(s);
        }
    }
    Signal::new(grid, q, vals)
}

/// Hidden trajectory and output of a general oscillator started from rest.
pub fn simulate_general(
    osc: &GeneralOscillator,
    u: &Signal,
    cfg: &IntegratorConfig,
) -> Result<(Signal, Signal)> {
    let (tr, _) = simulate_general_trajectory(osc, u, cfg)?;
    let grid = *u.grid();
    let m = osc.hidden_dim();
    let out = readout(grid, m, &tr.y, &osc.a, &osc.c)?;
    Ok((Signal::new(grid, m, tr.y)?, out))
}

/// Positions and velocities; also returns the substep count used.
pub fn simulate_general_trajectory(
    osc: &GeneralOscillator,
    u: &Signal,
    cfg: &IntegratorConfig,
) -> Result<(Trajectory, usize)> {
    osc.validate()?;
    cfg.validate()?;
    check_input(u, osc.input_dim())?;
    let sys = GeneralSys {
        osc,
        forcing: GridForcing::affine(u, &osc.v, Some(&osc.b)),
    };
    let substeps = cfg.substeps_for(u.grid().h(), spectral_radius(&osc.w).sqrt());
    Ok((integrate(&sys, u.grid(), cfg.method, substeps)?, substeps))
}

/// The stacked multi-layer state, layer 1 first.
struct StackedSys<'a> {
    osc: &'a MultiLayerOscillator,
    offsets: Vec<usize>,
    input: GridForcing,
}

impl<'a> StackedSys<'a> {
    fn new(osc: &'a MultiLayerOscillator, u: &Signal) -> Self {
        let mut offsets = vec![0];
        for l in &osc.layers {
            offsets.push(offsets.last().unwrap() + l.width());
        }
        let eye = DMatrix::identity(osc.input_dim, osc.input_dim);
        Self {
            osc,
            offsets,
            input: GridForcing::affine(u, &eye, None),
        }
    }
}

impl SecondOrderSystem for StackedSys<'_> {
    fn dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    fn accel(&self, t: f64, y: &[f64], _v: &[f64], a: &mut [f64]) {
        let mut u = vec![0.0; self.osc.input_dim];
        self.input.add_into(t, &mut u);
        let act = self.osc.act;
        for (l, layer) in self.osc.layers.iter().enumerate() {
            let (lo, hi) = (self.offsets[l], self.offsets[l + 1]);
            let prev: &[f64] = if l == 0 {
                &u
            } else {
                &y[self.offsets[l - 1]..lo]
            };
            let out = &mut a[lo..hi];
            out.iter_mut().for_each(|x| *x = 0.0);
            matvec_add(&layer.v, prev, out);
            for (i, o) in out.iter_mut().enumerate() {
                let inner = layer.w[i] * y[lo + i] + layer.b[i];
                *o = if layer.force_outside {
                    act.eval(inner) + *o
                } else {
                    act.eval(inner + *o)
                };
            }
        }
    }
}

/// Per-layer hidden signals (layer 1 first) and the readout of the last layer.
pub fn simulate_multilayer(
    osc: &MultiLayerOscillator,
    u: &Signal,
    cfg: &IntegratorConfig,
) -> Result<(Vec<Signal>, Signal)> {
    osc.validate()?;
    cfg.validate()?;
    check_input(u, osc.input_dim)?;
    let grid = *u.grid();
    let layers = if cfg.layerwise {
        simulate_layerwise(osc, u, cfg)?
    } else {
        let tr = simulate_multilayer_trajectory(osc, u, cfg)?;
        split_layers(osc, grid, &tr.y)?
    };
    let last = layers.last().unwrap();
    let out = readout(grid, last.dim(), last.values(), &osc.a, &osc.c)?;
    Ok((layers, out))
}

/// Stacked positions and velocities (layer 1 first) from the coupled stepper.
pub fn simulate_multilayer_trajectory(
    osc: &MultiLayerOscillator,
    u: &Signal,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    osc.validate()?;
    check_input(u, osc.input_dim)?;
    let sys = StackedSys::new(osc, u);
    let substeps = cfg.substeps_for(u.grid().h(), osc.omega_max());
    integrate(&sys, u.grid(), cfg.method, substeps)
}

fn split_layers(osc: &MultiLayerOscillator, grid: TimeGrid, ys: &[f64]) -> Result<Vec<Signal>> {
    let m: usize = osc.hidden_dim();
    let mut out = Vec::new();
    let mut off = 0;
    for l in &osc.layers {
        let w = l.width();
        let mut vals = Vec::with_capacity(grid.len() * w);
        for k in 0..grid.len() {
            vals.extend_from_slice(&ys[k * m + off..k * m + off + w]);
        }
        out.push(Signal::new(grid, w, vals)?);
        off += w;
    }
    Ok(out)
}

/// Solves the layers in order; each oscillator is integrated on its own with
/// forcing from grid values of the previous layer.
fn simulate_layerwise(
    osc: &MultiLayerOscillator,
    u: &Signal,
    cfg: &IntegratorConfig,
) -> Result<Vec<Signal>> {
    let mut out: Vec<Signal> = Vec::with_capacity(osc.layers.len());
    for layer in &osc.layers {
        let s = simulate_layer(layer, osc.act, out.last().unwrap_or(u), cfg)?;
        out.push(s);
    }
    Ok(out)
}

/// Hidden states of one layer driven by `prev` on its grid, each oscillator
/// integrated on its own from rest.
pub fn simulate_layer(layer: &Layer, act: Activation, prev: &Signal, cfg: &IntegratorConfig) -> Result<Signal> {
    if layer.v.ncols() != prev.dim() {
        return Err(Error::DimensionMismatch(format!(
            "layer reads {} inputs, got {}",
            layer.v.ncols(),
            prev.dim()
        )));
    }
    let grid = *prev.grid();
    let h = grid.h();
    let n = grid.len();
    let forcing = GridForcing::affine(prev, &layer.v, None);
    let m = layer.width();
    let mut cols = Vec::with_capacity(m);
    for i in 0..m {
        let f: Vec<f64> = (0..n).map(|k| forcing.values[k * m + i]).collect();
        let (ys, _) = if layer.force_outside {
            let bias = vec![layer.b[i]; n];
            scalar_oscillator(act, layer.w[i], &bias, Some(&f), h, cfg)?
        } else {
            let fin: Vec<f64> = f.iter().map(|x| x + layer.b[i]).collect();
            scalar_oscillator(act, layer.w[i], &fin, None, h, cfg)?
        };
        cols.push(ys);
    }
    Signal::from_columns(grid, &cols)
}

/// Stacks `[y^L, …, y^1]` into a single general oscillator.
pub fn embed_multilayer_to_general(osc: &MultiLayerOscillator) -> Result<GeneralOscillator> {
    osc.validate()?;
    if osc.layers.iter().any(|l| l.force_outside) {
        return Err(Error::InvalidParameter(
            "forcing outside the activation has no block embedding".into(),
        ));
    }
    let m = osc.hidden_dim();
    let nl = osc.layers.len();
    // Offset of layer l (0-based) in the stacked order, deepest layer first.
    let mut off = vec![0; nl];
    let mut acc = 0;
    for l in (0..nl).rev() {
        off[l] = acc;
        acc += osc.layers[l].width();
    }
    let mut w = DMatrix::zeros(m, m);
    let mut v = DMatrix::zeros(m, osc.input_dim);
    let mut b = DVector::zeros(m);
    for (l, layer) in osc.layers.iter().enumerate() {
        let o = off[l];
        for i in 0..layer.width() {
            w[(o + i, o + i)] = layer.w[i];
            b[o + i] = layer.b[i];
        }
        if l == 0 {
            v.view_mut((o, 0), layer.v.shape()).copy_from(&layer.v);
        } else {
            w.view_mut((o, off[l - 1]), layer.v.shape()).copy_from(&layer.v);
        }
    }
    let mut a = DMatrix::zeros(osc.a.nrows(), m);
    a.view_mut((0, off[nl - 1]), osc.a.shape()).copy_from(&osc.a);
    Ok(GeneralOscillator {
        w,
        v,
        b,
        a,
        c: osc.c.clone(),
        act: osc.act,
    })
}

struct CoRNNSys<'a> {
    sys: &'a CoRNNSystem,
    forcing: GridForcing,
}

impl SecondOrderSystem for CoRNNSys<'_> {
    fn dim(&self) -> usize {
        self.sys.w.nrows()
    }

    fn accel(&self, t: f64, y: &[f64], v: &[f64], a: &mut [f64]) {
        a.iter_mut().for_each(|x| *x = 0.0);
        self.forcing.add_into(t, a);
        matvec_add(&self.sys.w, y, a);
        matvec_add(&self.sys.w_vel, v, a);
        for i in 0..a.len() {
            a[i] = self.sys.act.eval(a[i]) - self.sys.gamma * y[i] - self.sys.eps_damp * v[i];
        }
    }
}

pub fn simulate_cornn(sys: &CoRNNSystem, u: &Signal, cfg: &IntegratorConfig) -> Result<Signal> {
    Ok(Signal::new(
        *u.grid(),
        sys.w.nrows(),
        simulate_cornn_trajectory(sys, u, cfg)?.y,
    )?)
}

pub fn simulate_cornn_trajectory(
    sys: &CoRNNSystem,
    u: &Signal,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    sys.validate()?;
    cfg.validate()?;
    check_input(u, sys.v.ncols())?;
    let s = CoRNNSys {
        sys,
        forcing: GridForcing::affine(u, &sys.v, Some(&sys.b)),
    };
    let stiff = spectral_radius(&sys.w) + sys.gamma;
    let substeps = cfg.substeps_for(u.grid().h(), stiff.sqrt());
    integrate(&s, u.grid(), cfg.method, substeps)
}

/// Energy of layer `layer` (1-based) with the previous-layer state frozen at `forcing`:
/// `H = ½|ẏ|² − Σ σ̂(w_i y_i + (V y_prev)_i + b_i) / w_i`, plus `−(V y_prev)·y`
/// when the forcing sits outside the activation.
pub fn hamiltonian(
    osc: &MultiLayerOscillator,
    layer: usize,
    y: &[f64],
    ydot: &[f64],
    forcing: &[f64],
) -> Result<f64> {
    if layer == 0 || layer > osc.layers.len() {
        return Err(Error::InvalidParameter(format!("no layer {layer}")));
    }
    let l = &osc.layers[layer - 1];
    let m = l.width();
    if y.len() != m || ydot.len() != m || forcing.len() != l.v.ncols() {
        return Err(Error::DimensionMismatch("hamiltonian arguments".into()));
    }
    if l.w.iter().any(|w| *w == 0.0) {
        return Err(Error::InvalidParameter("energy needs every w_i != 0".into()));
    }
    let mut vf = vec![0.0; m];
    matvec_add(&l.v, forcing, &mut vf);
    let kinetic = 0.5 * ydot.iter().map(|v| v * v).sum::<f64>();
    let mut pot = 0.0;
    for i in 0..m {
        if l.force_outside {
            pot -= osc.act.antiderivative(l.w[i] * y[i] + l.b[i]) / l.w[i] + vf[i] * y[i];
        } else {
            pot -= osc.act.antiderivative(l.w[i] * y[i] + vf[i] + l.b[i]) / l.w[i];
        }
    }
    Ok(kinetic + pot)
}

/// Acceleration of layer `layer` (1-based) for the given state and previous-layer values.
pub fn layer_accel(osc: &MultiLayerOscillator, layer: usize, y: &[f64], forcing: &[f64]) -> Vec<f64> {
    let l = &osc.layers[layer - 1];
    let mut vf = vec![0.0; l.width()];
    matvec_add(&l.v, forcing, &mut vf);
    (0..l.width())
        .map(|i| {
            if l.force_outside {
                osc.act.eval(l.w[i] * y[i] + l.b[i]) + vf[i]
            } else {
                osc.act.eval(l.w[i] * y[i] + vf[i] + l.b[i])
            }
        })
        .collect()
}

/// Verlet forward over the grid, then backward; max-norm of the recovered
/// initial position and velocity.
pub fn reverse_check(osc: &MultiLayerOscillator, u: &Signal, cfg: &IntegratorConfig) -> Result<f64> {
    osc.validate()?;
    check_input(u, osc.input_dim)?;
    if cfg.method != Method::VelocityVerlet {
        return Err(Error::InvalidParameter(
            "reversibility check needs the velocity Verlet method".into(),
        ));
    }
    let sys = StackedSys::new(osc, u);
    let substeps = cfg.substeps_for(u.grid().h(), osc.omega_max());
    verlet_round_trip(&sys, u.grid(), substeps)
}

/// Random stable instance with input dimension 2, two outputs and 1 to 3
/// oscillators per layer: `w ∈ (−9, −1)`, `V, A` entries in `(−1, 1)`,
/// `b ∈ (−0.3, 0.3)`.
pub fn random_multilayer(seed: u64, layers: usize, act: Activation) -> MultiLayerOscillator {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
    let vec = |rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64| DVector::from_fn(n, |_, _| rng.gen_range(lo..hi));
    let p = 2;
    let mut prev = p;
    let mut ls = Vec::new();
    for _ in 0..layers {
        let m = rng.gen_range(1..4);
        ls.push(Layer {
            w: vec(&mut rng, m, -9.0, -1.0),
            v: mat(&mut rng, m, prev),
            b: vec(&mut rng, m, -0.3, 0.3),
            force_outside: false,
        });
        prev = m;
    }
    MultiLayerOscillator {
        input_dim: p,
        layers: ls,
        a: mat(&mut rng, 2, prev),
        c: vec(&mut rng, 2, -1.0, 1.0),
        act,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{InputEnsemble, InputFamily};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn input(p: usize) -> Signal {
        InputEnsemble {
            dim: p,
            t_end: 2.0,
            n_steps: 400,
            ..Default::default()
        }
        .sample(1)
    }

    #[test]
    fn rest_is_a_fixed_point() {
        let mut osc = random_multilayer(1, 3, Activation::Tanh);
        for l in &mut osc.layers {
            l.b.fill(0.0);
        }
        let u = Signal::zeros(TimeGrid::new(0.0, 1.0, 50).unwrap(), 2);
        let (layers, out) = simulate_multilayer(&osc, &u, &IntegratorConfig::default()).unwrap();
        assert!(layers.iter().all(|s| s.sup_norm() == 0.0));
        for k in 0..out.len() {
            assert_eq!(out.at(k), osc.c.as_slice());
        }
        let g = embed_multilayer_to_general(&osc).unwrap();
        let (hid, out) = simulate_general(&g, &u, &IntegratorConfig::verlet(2)).unwrap();
        assert_eq!(hid.sup_norm(), 0.0);
        assert_eq!(out.at(50), osc.c.as_slice());
    }

    #[test]
    fn single_layer_embedding_is_direct() {
        let osc = random_multilayer(3, 1, Activation::Identity);
        let g = embed_multilayer_to_general(&osc).unwrap();
        assert_eq!(g.w, DMatrix::from_diagonal(&osc.layers[0].w));
        assert_eq!(g.v, osc.layers[0].v);
    }

    #[test]
    fn embedding_sparsity_pattern() {
        let osc = random_multilayer(5, 3, Activation::Tanh);
        let g = embed_multilayer_to_general(&osc).unwrap();
        let widths: Vec<usize> = osc.layers.iter().map(|l| l.width()).collect();
        // Block index of each stacked row: deepest layer first.
        let mut block = Vec::new();
        for l in (0..3).rev() {
            block.extend(std::iter::repeat(l).take(widths[l]));
        }
        for i in 0..g.w.nrows() {
            for j in 0..g.w.ncols() {
                let allowed = (block[i] == block[j] && i == j) || block[j] + 1 == block[i];
                if !allowed {
                    assert_eq!(g.w[(i, j)], 0.0, "({i},{j})");
                }
            }
            if block[i] != 0 {
                assert!(g.v.row(i).iter().all(|x| *x == 0.0));
            }
        }
    }

    #[test]
    fn embedding_equivalence_on_random_instances() {
        for seed in 0..6 {
            for nl in 1..=3 {
                let osc = random_multilayer(seed, nl, Activation::Tanh);
                let u = input(2);
                for cfg in [IntegratorConfig::rk4(2), IntegratorConfig::verlet(2)] {
                    let (_, o1) = simulate_multilayer(&osc, &u, &cfg).unwrap();
                    let g = embed_multilayer_to_general(&osc).unwrap();
                    let (_, o2) = simulate_general(&g, &u, &cfg).unwrap();
                    let d = crate::signal::sup_distance(&o1, &o2).unwrap();
                    assert!(d <= 1e-9, "seed {seed} L {nl}: {d}");
                }
            }
        }
    }

    #[test]
    fn layerwise_agrees_with_coupled() {
        let osc = random_multilayer(11, 3, Activation::Sine);
        let u = input(2);
        let (_, a) = simulate_multilayer(&osc, &u, &IntegratorConfig::rk4(4)).unwrap();
        let cfg = IntegratorConfig {
            layerwise: true,
            ..IntegratorConfig::rk4(4)
        };
        let (_, b) = simulate_multilayer(&osc, &u, &cfg).unwrap();
        let d = crate::signal::sup_distance(&a, &b).unwrap();
        // Differences come only from interpolating the previous layer between grid points.
        assert!(d < 1e-4, "{d}");
    }

    #[test]
    fn force_outside_has_no_embedding() {
        let mut osc = random_multilayer(2, 2, Activation::Tanh);
        osc.layers[1].force_outside = true;
        assert!(embed_multilayer_to_general(&osc).is_err());
        let (_, out) = simulate_multilayer(&osc, &input(2), &IntegratorConfig::default()).unwrap();
        assert!(out.sup_norm().is_finite());
    }

    #[test]
    fn cornn_reduces_to_general() {
        let osc = random_multilayer(4, 2, Activation::Tanh);
        let g = embed_multilayer_to_general(&osc).unwrap();
        let m = g.hidden_dim();
        let sys = CoRNNSystem {
            w: g.w.clone(),
            w_vel: DMatrix::zeros(m, m),
            v: g.v.clone(),
            b: g.b.clone(),
            gamma: 0.0,
            eps_damp: 0.0,
            act: g.act,
        };
        let u = input(2);
        let cfg = IntegratorConfig::rk4(2);
        let y1 = simulate_cornn(&sys, &u, &cfg).unwrap();
        let (y2, _) = simulate_general(&g, &u, &cfg).unwrap();
        assert!(crate::signal::sup_distance(&y1, &y2).unwrap() <= 1e-9);
    }

    fn cornn_energy(sys: &CoRNNSystem, y: &[f64], v: &[f64]) -> f64 {
        // Valid for W = -I, 𝒲 = 0 and u ≡ 0.
        let mut e = 0.5 * v.iter().map(|x| x * x).sum::<f64>();
        for i in 0..y.len() {
            e += 0.5 * sys.gamma * y[i] * y[i] + sys.act.antiderivative(-y[i] + sys.b[i]);
        }
        e
    }

    #[test]
    fn damped_cornn_dissipates() {
        let m = 3;
        let sys = CoRNNSystem {
            w: -DMatrix::identity(m, m),
            w_vel: DMatrix::zeros(m, m),
            v: DMatrix::zeros(m, 1),
            b: DVector::from_vec(vec![0.3, -0.2, 0.1]),
            gamma: 2.0,
            eps_damp: 1.0,
            act: Activation::Tanh,
        };
        let u = Signal::zeros(TimeGrid::new(0.0, 10.0, 1000).unwrap(), 1);
        let tr = simulate_cornn_trajectory(&sys, &u, &IntegratorConfig::rk4(4)).unwrap();
        let mut last = f64::INFINITY;
        let mut vmax: f64 = 0.0;
        for k in 0..u.len() {
            let e = cornn_energy(&sys, &tr.y[k * m..(k + 1) * m], &tr.v[k * m..(k + 1) * m]);
            assert!(e <= last + 1e-12);
            last = e;
            vmax = vmax.max(tr.v[k * m..(k + 1) * m].iter().fold(0.0, |a, b| a.max(b.abs())));
        }
        let vend = tr.v[1000 * m..].iter().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(vend < 0.05 * vmax);

        let rest = CoRNNSystem {
            b: DVector::zeros(m),
            ..sys
        };
        assert_eq!(simulate_cornn(&rest, &u, &IntegratorConfig::rk4(1)).unwrap().sup_norm(), 0.0);
    }

    #[test]
    fn rest_energy_is_zero() {
        let mut osc = random_multilayer(6, 2, Activation::Tanh);
        for l in &mut osc.layers {
            l.b.fill(0.0);
        }
        for act in Activation::ALL {
            osc.act = act;
            let m = osc.layers[1].width();
            let p = osc.layers[1].v.ncols();
            let h = hamiltonian(&osc, 2, &vec![0.0; m], &vec![0.0; m], &vec![0.0; p]).unwrap();
            assert_eq!(h, 0.0);
        }
    }

    #[test]
    fn hamiltonian_gradient_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut worst: f64 = 0.0;
        for trial in 0..100 {
            let act = Activation::ALL[trial % 3];
            let osc = random_multilayer(trial as u64, 2, act);
            let layer = 1 + trial % 2;
            let l = &osc.layers[layer - 1];
            let m = l.width();
            let y: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f: Vec<f64> = (0..l.v.ncols()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let acc = layer_accel(&osc, layer, &y, &f);
            let d = 1e-5;
            for i in 0..m {
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[i] += d;
                ym[i] -= d;
                let dhdy = (hamiltonian(&osc, layer, &yp, &v, &f).unwrap()
                    - hamiltonian(&osc, layer, &ym, &v, &f).unwrap())
                    / (2.0 * d);
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[i] += d;
                vm[i] -= d;
                let dhdv = (hamiltonian(&osc, layer, &y, &vp, &f).unwrap()
                    - hamiltonian(&osc, layer, &y, &vm, &f).unwrap())
                    / (2.0 * d);
                worst = worst.max((-dhdy - acc[i]).abs()).max((dhdv - v[i]).abs());
            }
        }
        assert!(worst <= 1e-6, "{worst}");
    }

    #[test]
    fn hamiltonian_rejects_zero_weight() {
        let mut osc = random_multilayer(6, 1, Activation::Tanh);
        osc.layers[0].w[0] = 0.0;
        let m = osc.layers[0].width();
        assert!(hamiltonian(&osc, 1, &vec![0.0; m], &vec![0.0; m], &[0.0, 0.0]).is_err());
    }

    fn energy_drift(n: usize) -> f64 {
        let osc = random_multilayer(8, 1, Activation::Tanh);
        let frozen = [0.4, -0.7];
        let grid = TimeGrid::new(0.0, 5.0, n).unwrap();
        let u = Signal::from_fn(grid, 2, |_, r| r.copy_from_slice(&frozen)).unwrap();
        let cfg = IntegratorConfig {
            max_omega_step: 10.0,
            ..IntegratorConfig::verlet(1)
        };
        let tr = simulate_multilayer_trajectory(&osc, &u, &cfg).unwrap();
        let m = osc.layers[0].width();
        let e = |k: usize| {
            hamiltonian(&osc, 1, &tr.y[k * m..(k + 1) * m], &tr.v[k * m..(k + 1) * m], &frozen)
                .unwrap()
        };
        let e0 = e(0);
        (0..grid.len()).map(|k| (e(k) - e0).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn verlet_energy_drift_is_second_order() {
        let r = energy_drift(250) / energy_drift(500);
        assert!(r > 3.5 && r < 4.5, "{r}");
    }

    #[test]
    fn reversibility() {
        for seed in 0..4 {
            let osc = random_multilayer(seed, 3, Activation::Tanh);
            let r = reverse_check(&osc, &input(2), &IntegratorConfig::verlet(2)).unwrap();
            assert!(r <= 1e-10, "{r}");
        }
        let osc = random_multilayer(0, 2, Activation::Tanh);
        assert!(reverse_check(&osc, &input(2), &IntegratorConfig::rk4(1)).is_err());
    }

    #[test]
    fn reversibility_does_not_grow_with_horizon() {
        let osc = random_multilayer(2, 2, Activation::Sine);
        let short = InputEnsemble { dim: 2, t_end: 1.0, n_steps: 200, ..Default::default() }.sample(0);
        let long = InputEnsemble { dim: 2, t_end: 8.0, n_steps: 1600, ..Default::default() }.sample(0);
        let cfg = IntegratorConfig::verlet(1);
        let a = reverse_check(&osc, &short, &cfg).unwrap();
        let b = reverse_check(&osc, &long, &cfg).unwrap();
        assert!(a <= 1e-10 && b <= 1e-10, "{a} {b}");
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let osc = random_multilayer(21, 3, Activation::Sine);
        let s = serde_json::to_string(&osc).unwrap();
        assert!(s.contains("\"act\":\"sine\""));
        let back: MultiLayerOscillator = serde_json::from_str(&s).unwrap();
        assert_eq!(back, osc);
        let g = embed_multilayer_to_general(&osc).unwrap();
        let back: GeneralOscillator = serde_json::from_str(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn rk4_self_convergence() {
        let osc = random_multilayer(12, 2, Activation::Tanh);
        let g = embed_multilayer_to_general(&osc).unwrap();
        let u = input(2);
        let run = |s: usize, m: Method| {
            let cfg = IntegratorConfig {
                method: m,
                substeps_per_grid_point: s,
                max_omega_step: 100.0,
                ..Default::default()
            };
            simulate_general(&g, &u, &cfg).unwrap().1
        };
        let reference = run(64, Method::Rk4);
        let e1 = crate::signal::sup_distance(&run(1, Method::Rk4), &reference).unwrap();
        let e2 = crate::signal::sup_distance(&run(2, Method::Rk4), &reference).unwrap();
        assert!(e1 / e2 >= 14.0, "rk4 {}", e1 / e2);
        let v1 = crate::signal::sup_distance(&run(2, Method::VelocityVerlet), &reference).unwrap();
        let v2 = crate::signal::sup_distance(&run(4, Method::VelocityVerlet), &reference).unwrap();
        assert!(v1 / v2 >= 3.8, "verlet {}", v1 / v2);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let osc = random_multilayer(1, 2, Activation::Tanh);
        let u = Signal::zeros(TimeGrid::new(0.0, 1.0, 10).unwrap(), 3);
        assert!(matches!(
            simulate_multilayer(&osc, &u, &IntegratorConfig::default()),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
