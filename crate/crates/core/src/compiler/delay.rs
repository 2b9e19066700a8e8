//! Time-delay networks: a single layer of sine-transform oscillators whose
//! readout recombines the transform values into `u(t − Δ)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{bank_layer, HELDOUT_BASE};
use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::integrate::IntegratorConfig;
use crate::operators::TargetOperator;
use crate::oscillator::{simulate_multilayer, MultiLayerOscillator};
use crate::reconstruction::{build_plan, ReconstructionPlan};
use crate::signal::{sup_distance, InputFamily, Signal};
use crate::transform::{FrequencyBank, CALIBRATION_BASE, CALIBRATION_COUNT};

/// Number of held-out inputs a delay network is validated on.
pub const DELAY_VALIDATION_COUNT: usize = 16;
/// Share of the tolerance given to the reconstruction plan; the rest goes to the bank.
pub const DELAY_PLAN_SHARE: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayNetwork {
    pub delay: f64,
    pub input_dim: usize,
    pub plan: ReconstructionPlan,
    pub bank: FrequencyBank,
    /// `B_j = 2α_j sin(ω_j Δ − ϑ_j)` over the positive frequencies.
    pub combination: Vec<f64>,
    pub tol: f64,
    /// Sup error on the held-out inputs.
    pub validated_err: f64,
}

/// Weights recombining positive-frequency transform values into the value at lag `delay`.
pub fn delay_combination(plan: &ReconstructionPlan, delay: f64) -> Vec<f64> {
    let (a2, th) = plan.folded();
    plan.positive_omegas()
        .iter()
        .zip(a2.iter().zip(&th))
        .map(|(w, (a, t))| a * (w * delay - t).sin())
        .collect()
}

impl DelayNetwork {
    pub fn validate(&self) -> Result<()> {
        if !(self.delay >= 0.0) {
            return Err(Error::InvalidParameter("delay must be >= 0".into()));
        }
        if self.combination.len() != self.bank.len() || self.bank.len() != self.plan.n_half() {
            return Err(Error::DimensionMismatch("delay network bank and plan disagree".into()));
        }
        self.bank.validate()
    }

    /// The network as a one-layer oscillator with readout `A[i, i·N + j] = B_j ω_j / s_j`.
    pub fn oscillator(&self) -> Result<MultiLayerOscillator> {
        self.validate()?;
        let p = self.input_dim;
        let n = self.bank.len();
        let layer = bank_layer(&self.bank, p, false);
        let mut a = DMatrix::zeros(p, p * n);
        for i in 0..p {
            for (j, ch) in self.bank.channels.iter().enumerate() {
                a[(i, i * n + j)] = self.combination[j] * ch.readout();
            }
        }
        let osc = MultiLayerOscillator {
            input_dim: p,
            layers: vec![layer],
            a,
            c: DVector::zeros(p),
            act: self.bank.act,
        };
        osc.validate()?;
        Ok(osc)
    }

    pub fn run(&self, u: &Signal, cfg: &IntegratorConfig) -> Result<Signal> {
        let cfg = IntegratorConfig { layerwise: true, ..*cfg };
        Ok(simulate_multilayer(&self.oscillator()?, u, &cfg)?.1)
    }

    /// Sup error against the exact delay over `inputs`.
    pub fn error_on(&self, inputs: &[Signal], cfg: &IntegratorConfig) -> Result<f64> {
        let op = TargetOperator::delay(self.input_dim, self.delay)?;
        let mut worst: f64 = 0.0;
        for u in inputs {
            worst = worst.max(sup_distance(&self.run(u, cfg)?, &op.apply(u)?)?);
        }
        Ok(worst)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Delay network for `family` with tanh channels and the default integrator.
pub fn build_delay_network(family: &dyn InputFamily, delay: f64, tol: f64) -> Result<DelayNetwork> {
    build_delay_network_with(family, delay, tol, Activation::Tanh, &IntegratorConfig::default())
}

/// Builds a plan at window `max(Δ, h)`, calibrates the bank so that its error
/// after recombination stays within the remaining share of `tol`, and validates
/// on held-out inputs.
pub fn build_delay_network_with(
    family: &dyn InputFamily,
    delay: f64,
    tol: f64,
    act: Activation,
    cfg: &IntegratorConfig,
) -> Result<DelayNetwork> {
    let g = family.grid();
    if !(delay >= 0.0) || delay > g.duration() + 1e-12 {
        return Err(Error::InvalidParameter(format!(
            "delay {delay} outside [0, {}]",
            g.duration()
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter("tolerance must be > 0".into()));
    }
    let window = delay.max(g.h()).min(g.duration());
    let plan = build_plan(family, window, DELAY_PLAN_SHARE * tol)?;
    let combination = delay_combination(&plan, delay);
    let weight: f64 = combination.iter().map(|b| b.abs()).sum();
    let channel_tol = (1.0 - DELAY_PLAN_SHARE) * tol / weight.max(1e-300);
    let cal = family.samples(CALIBRATION_BASE, CALIBRATION_COUNT);
    let bank = FrequencyBank::calibrate(&plan.positive_omegas(), &cal, act, channel_tol, cfg)?;
    let mut net = DelayNetwork {
        delay,
        input_dim: family.dim(),
        plan,
        bank,
        combination,
        tol,
        validated_err: f64::NAN,
    };
    let held = family.samples(HELDOUT_BASE, DELAY_VALIDATION_COUNT);
    net.validated_err = net.error_on(&held, cfg)?;
    if net.validated_err > tol {
        return Err(Error::Unachievable {
            tol,
            reason: format!("delay network validated at {:e}", net.validated_err),
        });
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::InputEnsemble;

    fn ens() -> InputEnsemble {
        InputEnsemble {
            n_steps: 400,
            ..Default::default()
        }
    }

    #[test]
    fn zero_delay_reproduces_input() {
        let e = ens();
        let tol = 0.1 * e.sup_bound();
        let net = build_delay_network(&e, 0.0, tol).unwrap();
        assert!(net.validated_err <= tol);
        let u = e.sample(5);
        let d = sup_distance(&net.run(&u, &IntegratorConfig::default()).unwrap(), &u).unwrap();
        assert!(d <= tol, "{d}");
    }

    #[test]
    fn shifted_sine_matches_analytic_shift() {
        let e = ens();
        let tol = 0.1 * e.sup_bound();
        let delay = 0.2;
        let net = build_delay_network(&e, delay, tol).unwrap();
        let u = Signal::from_fn(e.grid(), 1, |t, r| r[0] = (3.0 * std::f64::consts::PI * t).sin()).unwrap();
        let out = net.run(&u, &IntegratorConfig::default()).unwrap();
        let mut worst: f64 = 0.0;
        for k in 0..u.len() {
            let t = u.grid().t(k);
            let want = if t < delay { 0.0 } else { (3.0 * std::f64::consts::PI * (t - delay)).sin() };
            worst = worst.max((out.at(k)[0] - want).abs());
        }
        assert!(worst <= tol, "{worst}");
    }

    #[test]
    fn looser_tolerance_gives_larger_error() {
        let e = ens();
        let b = e.sup_bound();
        let tight = build_delay_network(&e, 0.2, 0.05 * b).unwrap();
        let loose = build_delay_network(&e, 0.2, 0.5 * b).unwrap();
        assert!(loose.plan.n() <= tight.plan.n());
        assert!(loose.validated_err >= tight.validated_err, "{} {}", loose.validated_err, tight.validated_err);
    }

    #[test]
    fn combination_reconstructs_at_lag() {
        let dw = 2.0 * std::f64::consts::PI / (1.02 * 1.3);
        let plan = ReconstructionPlan::from_grid(0.05, dw, 40, 0.2, 0.1).unwrap();
        let b = delay_combination(&plan, 0.15);
        let beta: Vec<Vec<f64>> = (0..plan.n_half()).map(|j| vec![(j as f64 * 0.37).cos()]).collect();
        let via_plan = plan.reconstruct_folded(&beta, 0.9, 0.75).unwrap()[0];
        let direct: f64 = b.iter().zip(&beta).map(|(x, y)| x * y[0]).sum();
        assert!((via_plan - direct).abs() < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_delay() {
        let e = InputEnsemble {
            n_steps: 50,
            ..Default::default()
        };
        assert!(build_delay_network(&e, 1.5, 0.1).is_err());
        assert!(build_delay_network(&e, -0.1, 0.1).is_err());
        assert!(build_delay_network(&e, 0.1, 0.0).is_err());
    }
}
