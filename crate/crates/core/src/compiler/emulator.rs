//! Two-layer oscillator emulating a shallow network `v ↦ Σσ(Λv + γ)`.
//!
//! The first layer integrates `ÿ₁ = σ(Λv + γ)` and `ÿ₂ = σ(γ)` from rest, so
//! `ζ = Σ(y₁ − y₂)` has second derivative `Σσ(Λv + γ) − Σσ(γ)`. The second layer
//! is a sine-transform bank on `ζ` whose readout is the backward difference
//! `(ζ(t) − 2ζ(t − Δ) + ζ(t − 2Δ))/Δ²` assembled from delay combinations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::delay::delay_combination;
use super::{ReadoutNet, EMULATOR_BASE, HELDOUT_BASE};
use crate::error::{Error, Result};
use crate::integrate::{scalar_oscillator, IntegratorConfig};
use crate::oscillator::{simulate_layer, Layer, MultiLayerOscillator};
use crate::reconstruction::ReconstructionPlan;
use crate::signal::{sup_distance, InputFamily, Signal};
use crate::transform::{exact_transforms, FrequencyBank};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmulatorOptions {
    /// Candidate difference spacings as fractions of the interval length.
    pub fd_fractions: Vec<f64>,
    /// Mollifier width of the difference plan as a fraction of the interval length.
    pub eps_fraction: f64,
    /// Candidate tail scales `Ξ = L_cut·ε`.
    pub xi_ladder: Vec<f64>,
    /// The smallest `Ξ` within this relative margin of the best proxy error is kept.
    pub xi_slack: f64,
    /// Share of the tolerance given to the oscillator bank.
    pub bank_share: f64,
    pub calibration_inputs: usize,
    pub validation_inputs: usize,
    pub cfg: IntegratorConfig,
}

impl Default for EmulatorOptions {
    fn default() -> Self {
        Self {
            fd_fractions: vec![1.0 / 20.0, 1.0 / 40.0, 1.0 / 80.0, 1.0 / 160.0],
            eps_fraction: 0.01,
            xi_ladder: vec![40.0, 50.0, 60.0, 80.0, 100.0],
            xi_slack: 0.05,
            bank_share: 0.1,
            calibration_inputs: 16,
            validation_inputs: 16,
            cfg: IntegratorConfig {
                layerwise: true,
                exponential: true,
                ..Default::default()
            },
        }
    }
}

impl EmulatorOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = !self.fd_fractions.is_empty()
            && self.fd_fractions.iter().all(|f| *f > 0.0 && *f <= 0.5)
            && self.eps_fraction > 0.0
            && !self.xi_ladder.is_empty()
            && self.xi_ladder.iter().all(|x| *x > 0.0)
            && self.xi_slack >= 0.0
            && self.bank_share > 0.0
            && self.bank_share < 1.0
            && self.calibration_inputs > 0;
        if ok {
            self.cfg.validate()
        } else {
            Err(Error::InvalidParameter("bad emulator options".into()))
        }
    }
}

/// Proxy error of one `(Δ, Ξ)` pair, from exact transforms of the calibration `ζ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdCandidate {
    pub fd_dt: f64,
    pub xi: f64,
    pub n_half: usize,
    pub proxy_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NNEmulator {
    pub net: ReadoutNet,
    pub fd_dt: f64,
    /// Reconstruction plan behind the difference readout (window `2Δ`).
    pub plan: ReconstructionPlan,
    pub bank: FrequencyBank,
    /// `c_k = (B_k(0) − 2B_k(Δ) + B_k(2Δ))/Δ²`.
    pub coeffs: Vec<f64>,
    pub sweep: Vec<FdCandidate>,
    pub tol: f64,
    /// Sup error on the held-out inputs, if any were given.
    pub validated_err: Option<f64>,
}

/// Weights turning transform values of `ζ` into its backward second difference at spacing `dt`.
pub fn fd_coefficients(plan: &ReconstructionPlan, dt: f64) -> Vec<f64> {
    let b0 = delay_combination(plan, 0.0);
    let b1 = delay_combination(plan, dt);
    let b2 = delay_combination(plan, 2.0 * dt);
    let inv = 1.0 / (dt * dt);
    (0..b0.len()).map(|k| (b0[k] - 2.0 * b1[k] + b2[k]) * inv).collect()
}

impl NNEmulator {
    pub fn hidden(&self) -> usize {
        self.net.hidden()
    }

    /// Layer reading `in_map · x` (an identity map for the emulator on its own):
    /// rows `0..H` carry `Λ in_map` and bias `γ`, rows `H..2H` only the bias.
    pub fn first_layer(&self, in_map: &DMatrix<f64>) -> Result<Layer> {
        let h = self.hidden();
        let d = self.net.input_dim();
        if in_map.nrows() != d {
            return Err(Error::DimensionMismatch(format!(
                "input map has {} rows, the network reads {d}",
                in_map.nrows()
            )));
        }
        let mut v = DMatrix::zeros(2 * h, in_map.ncols());
        v.rows_mut(0, h).copy_from(&(&self.net.lambda * in_map));
        let mut b = DVector::zeros(2 * h);
        b.rows_mut(0, h).copy_from(&self.net.gamma);
        b.rows_mut(h, h).copy_from(&self.net.gamma);
        Ok(Layer {
            w: DVector::zeros(2 * h),
            v,
            b,
            force_outside: false,
        })
    }

    /// Bank on `ζ_i`: oscillator `i·N + k` has `w = −ω_k²` and reads `s_k[Σ_i, −Σ_i]`.
    pub fn second_layer(&self) -> Layer {
        let q = self.net.output_dim();
        let h = self.hidden();
        let n = self.bank.len();
        let mut w = DVector::zeros(q * n);
        let mut v = DMatrix::zeros(q * n, 2 * h);
        for i in 0..q {
            for (k, ch) in self.bank.channels.iter().enumerate() {
                let r = i * n + k;
                w[r] = ch.w();
                for j in 0..h {
                    let x = ch.s * self.net.sigma[(i, j)];
                    v[(r, j)] = x;
                    v[(r, h + j)] = -x;
                }
            }
        }
        Layer {
            w,
            v,
            b: DVector::zeros(q * n),
            force_outside: false,
        }
    }

    /// `A[i, i·N + k] = c_k ω_k / s_k` and `c = Σσ(γ)`.
    pub fn readout(&self) -> (DMatrix<f64>, DVector<f64>) {
        let q = self.net.output_dim();
        let n = self.bank.len();
        let mut a = DMatrix::zeros(q, q * n);
        for i in 0..q {
            for (k, ch) in self.bank.channels.iter().enumerate() {
                a[(i, i * n + k)] = self.coeffs[k] * ch.readout();
            }
        }
        (a, self.net.offset())
    }

    pub fn oscillator(&self) -> Result<MultiLayerOscillator> {
        let d = self.net.input_dim();
        let (a, c) = self.readout();
        let osc = MultiLayerOscillator {
            input_dim: d,
            layers: vec![self.first_layer(&DMatrix::identity(d, d))?, self.second_layer()],
            a,
            c,
            act: self.net.act,
        };
        osc.validate()?;
        Ok(osc)
    }

    /// `ζ = Σ(y₁ − y₂)` along `v`.
    pub fn zeta(&self, v: &Signal, cfg: &IntegratorConfig) -> Result<Signal> {
        zeta_of(&self.net, v, cfg)
    }

    /// Emulator output along `v`. The second layer is driven through `ζ`, which
    /// is the same forcing as `V y` with `V` from [`second_layer`](Self::second_layer).
    pub fn run(&self, v: &Signal, cfg: &IntegratorConfig) -> Result<Signal> {
        let z = self.zeta(v, cfg)?;
        self.run_on_zeta(&z, cfg)
    }

    fn run_on_zeta(&self, z: &Signal, cfg: &IntegratorConfig) -> Result<Signal> {
        let g = *z.grid();
        let q = z.dim();
        let c = self.net.offset();
        let mut out = vec![0.0; g.len() * q];
        for k in 0..g.len() {
            out[k * q..(k + 1) * q].copy_from_slice(c.as_slice());
        }
        for i in 0..q {
            let zi = z.component(i);
            if zi.iter().all(|x| *x == 0.0) {
                continue;
            }
            for (k, ch) in self.bank.channels.iter().enumerate() {
                let f: Vec<f64> = zi.iter().map(|x| ch.s * x).collect();
                let (ys, _) = scalar_oscillator(self.bank.act, ch.w(), &f, None, g.h(), cfg)?;
                let r = self.coeffs[k] * ch.readout();
                for (t, y) in ys.iter().enumerate() {
                    out[t * q + i] += r * y;
                }
            }
        }
        Signal::new(g, q, out)
    }

    /// Direct evaluation `Σσ(Λv + γ)`.
    pub fn target(&self, v: &Signal) -> Result<Signal> {
        self.net.eval_signal(v)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn zeta_of(net: &ReadoutNet, v: &Signal, cfg: &IntegratorConfig) -> Result<Signal> {
    let h = net.hidden();
    let layer = Layer {
        w: DVector::zeros(2 * h),
        v: {
            let mut m = DMatrix::zeros(2 * h, net.input_dim());
            m.rows_mut(0, h).copy_from(&net.lambda);
            m
        },
        b: {
            let mut b = DVector::zeros(2 * h);
            b.rows_mut(0, h).copy_from(&net.gamma);
            b.rows_mut(h, h).copy_from(&net.gamma);
            b
        },
        force_outside: false,
    };
    let y = simulate_layer(&layer, net.act, v, cfg)?;
    let mut diff = DMatrix::zeros(h, y.len());
    for k in 0..y.len() {
        let row = y.at(k);
        for j in 0..h {
            diff[(j, k)] = row[j] - row[h + j];
        }
    }
    let z = &net.sigma * diff;
    Signal::new(*v.grid(), net.output_dim(), z.as_slice().to_vec())
}

/// Plan for the difference readout: spacing `2π/(margin·(T + 2Δ_max + ε))` and
/// `Ξ/ε` as the frequency cutoff.
fn fd_plan(eps: f64, d_omega: f64, xi: f64, window: f64, tol: f64) -> Result<ReconstructionPlan> {
    let n_half = ((xi / eps) / d_omega + 0.5).ceil().max(1.0) as usize;
    ReconstructionPlan::from_grid(eps, d_omega, n_half, window, tol)
}

/// Chooses `(Δ, Ξ)` by proxy error, calibrates the bank on the calibration `ζ`
/// and validates on `held`. Returns the emulator and its outputs on `held`;
/// the error may exceed `tol`, which is left for the caller to judge.
pub fn build_nn_emulator_on(
    net: &ReadoutNet,
    cal: &[Signal],
    held: &[Signal],
    tol: f64,
    opts: &EmulatorOptions,
) -> Result<(NNEmulator, Vec<Signal>)> {
    net.validate()?;
    opts.validate()?;
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter("tolerance must be > 0".into()));
    }
    if cal.is_empty() {
        return Err(Error::InvalidParameter("need calibration inputs".into()));
    }
    let g = *cal[0].grid();
    let duration = g.duration();
    let eps = opts.eps_fraction * duration;
    let fd_max = opts.fd_fractions.iter().cloned().fold(0.0, f64::max) * duration;
    let d_omega = 2.0 * std::f64::consts::PI / (1.02 * (duration + 2.0 * fd_max + eps));
    let xi_max = opts.xi_ladder.iter().cloned().fold(0.0, f64::max);
    let big = fd_plan(eps, d_omega, xi_max, 2.0 * fd_max, tol)?;
    let omegas = big.positive_omegas();
    let q = net.output_dim();
    let n_max = omegas.len();

    let zetas: Vec<Signal> = cal.iter().map(|v| zeta_of(net, v, &opts.cfg)).collect::<Result<_>>()?;
    let targets: Vec<Signal> = cal.iter().map(|v| net.eval_signal(v)).collect::<Result<_>>()?;
    let transforms: Vec<Vec<f64>> = zetas.iter().map(|z| exact_transforms(z, &omegas)).collect();
    let offset = net.offset();

    let mut ladder: Vec<(f64, usize)> = opts
        .xi_ladder
        .iter()
        .map(|xi| (*xi, ((xi / eps) / d_omega + 0.5).ceil().max(1.0) as usize))
        .collect();
    ladder.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut sweep = Vec::new();
    let mut best: Option<(FdCandidate, Vec<f64>)> = None;
    for frac in &opts.fd_fractions {
        let dt = frac * duration;
        let coeffs = fd_coefficients(&big, dt);
        // Proxy error for every cutoff in the ladder via prefix sums over frequencies.
        let mut errs = vec![0.0f64; ladder.len()];
        for (tr, tg) in transforms.iter().zip(&targets) {
            for t in 0..g.len() {
                for i in 0..q {
                    let row = &tr[t * q * n_max + i * n_max..t * q * n_max + (i + 1) * n_max];
                    let want = tg.at(t)[i] - offset[i];
                    let mut acc = 0.0;
                    let mut j = 0;
                    for (l, (_, n)) in ladder.iter().enumerate() {
                        while j < *n {
                            acc += coeffs[j] * row[j];
                            j += 1;
                        }
                        errs[l] = errs[l].max((acc - want).abs());
                    }
                }
            }
        }
        let lowest = errs.iter().cloned().fold(f64::INFINITY, f64::min);
        let pick = errs.iter().position(|e| *e <= lowest * (1.0 + opts.xi_slack)).unwrap_or(0);
        for (l, (xi, n)) in ladder.iter().enumerate() {
            sweep.push(FdCandidate {
                fd_dt: dt,
                xi: *xi,
                n_half: *n,
                proxy_err: errs[l],
            });
        }
        let cand = FdCandidate {
            fd_dt: dt,
            xi: ladder[pick].0,
            n_half: ladder[pick].1,
            proxy_err: errs[pick],
        };
        if best.as_ref().map_or(true, |(b, _)| cand.proxy_err < b.proxy_err) {
            best = Some((cand, coeffs[..cand.n_half].to_vec()));
        }
    }
    let (choice, coeffs) = best.expect("sweep is not empty");
    let plan = fd_plan(eps, d_omega, choice.xi, 2.0 * choice.fd_dt, tol)?;
    let weight: f64 = coeffs.iter().map(|c| c.abs()).sum();
    let channel_tol = opts.bank_share * tol / weight.max(1e-300);
    let bank = FrequencyBank::calibrate(&plan.positive_omegas(), &zetas, net.act, channel_tol, &opts.cfg)?;
    let mut emu = NNEmulator {
        net: net.clone(),
        fd_dt: choice.fd_dt,
        plan,
        bank,
        coeffs,
        sweep,
        tol,
        validated_err: None,
    };
    let mut outs = Vec::with_capacity(held.len());
    let mut worst: f64 = 0.0;
    for v in held {
        let out = emu.run(v, &opts.cfg)?;
        worst = worst.max(sup_distance(&out, &emu.target(v)?)?);
        outs.push(out);
    }
    if !held.is_empty() {
        emu.validated_err = Some(worst);
    }
    Ok((emu, outs))
}

/// Emulator of `net` on inputs from `family`, validated on held-out samples;
/// fails with the best achieved error when no spacing meets `tol`.
pub fn build_nn_emulator(net: &ReadoutNet, family: &dyn InputFamily, tol: f64) -> Result<NNEmulator> {
    build_nn_emulator_with(net, family, tol, &EmulatorOptions::default())
}

pub fn build_nn_emulator_with(
    net: &ReadoutNet,
    family: &dyn InputFamily,
    tol: f64,
    opts: &EmulatorOptions,
) -> Result<NNEmulator> {
    if family.dim() != net.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "network reads {} inputs, family has dimension {}",
            net.input_dim(),
            family.dim()
        )));
    }
    let cal = family.samples(EMULATOR_BASE, opts.calibration_inputs);
    let held = family.samples(HELDOUT_BASE, opts.validation_inputs);
    let (emu, _) = build_nn_emulator_on(net, &cal, &held, tol, opts)?;
    match emu.validated_err {
        Some(e) if e > tol => Err(Error::Unachievable {
            tol,
            reason: format!(
                "best difference spacing {} validated at {e:e}",
                emu.fd_dt
            ),
        }),
        _ => Ok(emu),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;
    use crate::oscillator::simulate_multilayer;
    use crate::signal::InputEnsemble;

    fn random_net(h: usize, d: usize, q: usize, seed: u64) -> ReadoutNet {
        ReadoutNet::random(h, d, q, 0.5, Activation::Tanh, seed).unwrap()
    }

    fn quick() -> EmulatorOptions {
        EmulatorOptions {
            fd_fractions: vec![1.0 / 20.0, 1.0 / 40.0],
            xi_ladder: vec![30.0, 40.0],
            eps_fraction: 0.02,
            validation_inputs: 4,
            ..Default::default()
        }
    }

    fn small_ens() -> InputEnsemble {
        InputEnsemble {
            n_steps: 300,
            ..Default::default()
        }
    }

    #[test]
    fn zero_sigma_gives_zero_output() {
        let mut net = random_net(4, 1, 1, 1);
        net.sigma.fill(0.0);
        let e = small_ens();
        let emu = build_nn_emulator_with(&net, &e, 0.05, &quick()).unwrap();
        let out = emu.run(&e.sample(3), &quick().cfg).unwrap();
        assert!(out.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_input_gives_constant_offset() {
        let net = random_net(4, 1, 1, 2);
        let e = small_ens();
        let emu = build_nn_emulator_with(&net, &e, 0.05, &quick()).unwrap();
        let z = Signal::zeros(e.grid(), 1);
        let out = emu.run(&z, &quick().cfg).unwrap();
        let c = net.offset()[0];
        assert!(out.values().iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn difference_of_quadratic_is_exact() {
        let dw = 2.0 * std::f64::consts::PI / (1.02 * 1.2);
        let plan = ReconstructionPlan::from_grid(0.01, dw, 300, 0.1, 0.1).unwrap();
        let c = fd_coefficients(&plan, 0.05);
        let b0 = delay_combination(&plan, 0.0);
        let b1 = delay_combination(&plan, 0.05);
        let b2 = delay_combination(&plan, 0.1);
        let beta: Vec<f64> = (0..plan.n_half()).map(|j| 1.0 / (1.0 + j as f64)).collect();
        let dot = |w: &[f64]| w.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
        let fd = (dot(&b0) - 2.0 * dot(&b1) + dot(&b2)) / 0.0025;
        assert!((dot(&c) - fd).abs() < 1e-9 * fd.abs().max(1.0));
    }

    #[test]
    fn structured_run_matches_layer_simulation() {
        let net = random_net(3, 2, 2, 5);
        let e = InputEnsemble {
            dim: 2,
            n_steps: 200,
            ..Default::default()
        };
        let emu = build_nn_emulator_with(&net, &e, 0.5, &quick()).unwrap();
        let u = e.sample(9);
        let cfg = quick().cfg;
        let fast = emu.run(&u, &cfg).unwrap();
        let (_, full) = simulate_multilayer(&emu.oscillator().unwrap(), &u, &cfg).unwrap();
        let d = sup_distance(&fast, &full).unwrap();
        assert!(d < 1e-9 * (1.0 + full.sup_norm()), "{d}");
    }

    #[test]
    fn random_small_network_within_tolerance() {
        let net = random_net(4, 1, 1, 11);
        let e = small_ens();
        let emu = build_nn_emulator_with(&net, &e, 0.05, &quick()).unwrap();
        assert!(emu.validated_err.unwrap() <= 0.05);
        assert!(emu.sweep.iter().all(|c| c.proxy_err.is_finite()));
        let js = emu.to_json().unwrap();
        let back: NNEmulator = serde_json::from_str(&js).unwrap();
        assert_eq!(back.coeffs, emu.coeffs);
    }
}
