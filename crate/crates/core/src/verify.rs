//! Named property suites with machine-readable results, one per module plus
//! the compile and function-approximation runs.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::compiler::{
    approximate_function, build_delay_network, build_nn_emulator, compile_operator, probe_points, CompileConfig,
    FunctionSpec, LinearRampFamily, ReadoutNet,
};
use crate::error::{Error, Result};
use crate::fk::{
    build_ordered_coupling, change_variables, default_forcing, energy_halving_ratio, simulate_fk, sweep_reduction,
    OrderedCouplingSpec, DEFAULT_SWEEP,
};
use crate::integrate::{IntegratorConfig, Method};
use crate::operators::TargetOperator;
use crate::oscillator::{
    embed_multilayer_to_general, hamiltonian, layer_accel, random_multilayer, reverse_check, simulate_cornn,
    simulate_general, simulate_multilayer, CoRNNSystem,
};
use crate::reconstruction::build_plan;
use crate::signal::{ramp_extend, sup_distance, InputEnsemble, InputFamily, Signal, TimeGrid};
use crate::transform::{
    calibrate_scale, calibration_sweep, harmonic_response, windowed_sine_transform, CALIBRATION_BASE,
    CALIBRATION_COUNT,
};

pub const SUITES: [&str; 10] = [
    "signals",
    "lemma1",
    "calibration",
    "structure",
    "reconstruction",
    "delay",
    "emulator",
    "compile",
    "approx",
    "fk",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    AtMost,
    AtLeast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: Bound,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: Bound::AtMost,
            threshold,
            passed: value <= threshold,
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: Bound::AtLeast,
            threshold,
            passed: value >= threshold,
        }
    }

    pub fn holds(name: impl Into<String>, ok: bool) -> Self {
        Self::at_least(name, if ok { 1.0 } else { 0.0 }, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Check>,
    /// Error that stopped the suite early, if any.
    pub error: Option<String>,
    pub passed: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub suites: Vec<SuiteReport>,
    pub passed: bool,
}

/// Suite names from a comma-separated filter; `all` expands to every suite.
pub fn resolve_suites(filter: &str) -> Result<Vec<&'static str>> {
    let names: Vec<&str> = filter.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        return Err(Error::InvalidParameter("empty suite filter".into()));
    }
    let mut out = Vec::new();
    for n in names {
        if n == "all" {
            out.extend(SUITES);
        } else if let Some(s) = SUITES.iter().find(|s| **s == n) {
            out.push(*s);
        } else {
            return Err(Error::InvalidParameter(format!(
                "unknown suite {n:?}; known: all, {}",
                SUITES.join(", ")
            )));
        }
    }
    out.dedup();
    Ok(out)
}

pub fn run_suites(filter: &str, seed: u64) -> Result<VerifyReport> {
    let suites: Vec<SuiteReport> = resolve_suites(filter)?.into_iter().map(|s| run_suite(s, seed)).collect();
    let passed = suites.iter().all(|s| s.passed);
    Ok(VerifyReport { seed, suites, passed })
}

pub fn run_suite(name: &str, seed: u64) -> SuiteReport {
    let start = Instant::now();
    let mut checks = Vec::new();
    let res = match name {
        "signals" => signals(seed, &mut checks),
        "lemma1" => lemma1(seed, &mut checks),
        "calibration" => calibration(seed, &mut checks),
        "structure" => structure(seed, &mut checks),
        "reconstruction" => reconstruction(seed, &mut checks),
        "delay" => delay(seed, &mut checks),
        "emulator" => emulator(seed, &mut checks),
        "compile" => compile(seed, &mut checks),
        "approx" => approx(seed, &mut checks),
        "fk" => fk(seed, &mut checks),
        other => Err(Error::InvalidParameter(format!("unknown suite {other:?}"))),
    };
    let error = res.err().map(|e| e.to_string());
    SuiteReport {
        suite: name.to_string(),
        passed: error.is_none() && !checks.is_empty() && checks.iter().all(|c| c.passed),
        checks,
        error,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn ensemble(seed: u64) -> InputEnsemble {
    InputEnsemble {
        seed,
        ..Default::default()
    }
}

fn signals(seed: u64, out: &mut Vec<Check>) -> Result<()> {
    let e = ensemble(seed);
    let xs = e.samples(0, 20);
    let at_zero = xs.iter().map(|u| u.at(0).iter().fold(0.0f64, |m, v| m.max(v.abs()))).fold(0.0, f64::max);
    out.push(Check::at_most("samples vanish at t = 0", at_zero, 0.0));
    let mut violation: f64 = 0.0;
    for a in 0..xs.len() {
        for b in 0..xs.len() {
            let dab = sup_distance(&xs[a], &xs[b])?;
            violation = violation.max((dab - sup_distance(&xs[b], &xs[a])?).abs());
            for c in xs.iter().take(6) {
                violation = violation.max(sup_distance(&xs[a], c)? - dab - sup_distance(&xs[b], c)?);
            }
        }
        violation = violation.max(sup_distance(&xs[a], &xs[a])?);
    }
    out.push(Check::at_most("sup distance metric violations", violation, 1e-15));
    let h = e.grid().h();
    let mut mismatched = 0usize;
    for u in &xs {
        let r = ramp_extend(u, 10.0 * h)?;
        let tail = &r.values()[10 * u.dim()..];
        mismatched += tail.iter().zip(u.values()).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    }
    out.push(Check::at_most("ramp extension leaves [0, T] unchanged (mismatches)", mismatched as f64, 0.0));
    let bound = e.sup_bound();
    let worst = xs.iter().map(Signal::sup_norm).fold(0.0, f64::max);
    out.push(Check::at_most("samples stay within the ensemble bound", worst, bound));
    Ok(())
}

fn lemma1(seed: u64, out: &mut Vec<Check>) -> Result<()> {
    let e = ensemble(seed);
    let cfg = IntegratorConfig::default();
    for omega in [1.0, 3.0, 10.0] {
        let mut err: f64 = 0.0;
        for u in e.samples(0, 20) {
            let y = harmonic_response(&u, omega, &cfg)?;
            for k in 0..u.len() {
                let l = windowed_sine_transform(&u, omega, u.grid().t(k))?[0];
                err = err.max((omega * y.at(k)[0] - l).abs());
            }
        }
        out.push(Check::at_most(format!("ω = {omega}: |ω y − L_t u|"), err, 1e-5));
    }
    Ok(())
}

fn calibration(seed: u64, out: &mut Vec<Check>) -> Result<()> {
    let e = ensemble(seed);
    let cfg = IntegratorConfig::default();
    let inputs = e.samples(CALIBRATION_BASE, CALIBRATION_COUNT);
    let scales: Vec<f64> = (0..10).map(|k| 0.5f64.powi(k)).collect();
    for act in [Activation::Tanh, Activation::Sine] {
        for omega in [1.0, 3.0, 10.0] {
            let p = calibrate_scale(omega, &e, act, 1e-3, &cfg)?;
            out.push(Check::at_most(format!("{act:?} ω = {omega}: calibrated error"), p.achieved_err, 1e-3));
            let sweep = calibration_sweep(omega, act, &inputs, &scales, &cfg)?;
            let rise = sweep.windows(2).map(|w| w[1].1 - w[0].1).fold(f64::NEG_INFINITY, f64::max);
            out.push(Check::at_most(format!("{act:?} ω = {omega}: largest error rise when halving s"), rise, 0.0));
        }
    }
    Ok(())
}

fn structure(seed: u64, out: &mut Vec<Check>) -> Result<()> {
    let u = InputEnsemble {
        dim: 2,
        t_end: 2.0,
        n_steps: 400,
        seed,
        ..Default::default()
    }
    .sample(1);
    let mut embed: f64 = 0.0;
    let mut cornn: f64 = 0.0;
    let mut reverse: f64 = 0.0;
    for s in 0..6 {
        for nl in 1..=3 {
            let osc = random_multilayer(seed.wrapping_mul(31).wrapping_add(s), nl, Activation::Tanh);
            let g = embed_multilayer_to_general(&osc)?;
            for cfg in [IntegratorConfig::rk4(2), IntegratorConfig::verlet(2)] {
                let (_, a) = simulate_multilayer(&osc, &u, &cfg)?;
                let (hid, b) = simulate_general(&g, &u, &cfg)?;
                embed = embed.max(sup_distance(&a, &b)?);
                if cfg.method == Method::Rk4 {
                    let m = g.hidden_dim();
                    let sys = CoRNNSystem {
                        w: g.w.clone(),
                        w_vel: nalgebra::DMatrix::zeros(m, m),
                        v: g.v.clone(),
                        b: g.b.clone(),
                        gamma: 0.0,
                        eps_damp: 0.0,
                        act: g.act,
                    };
                    cornn = cornn.max(sup_distance(&simulate_cornn(&sys, &u, &cfg)?, &hid)?);
                }
            }
            reverse = reverse.max(reverse_check(&osc, &u, &IntegratorConfig::verlet(2))?);
        }
    }
    out.push(Check::at_most("multi-layer vs embedded general oscillator", embed, 1e-9));
    out.push(Check::at_most("CoRNN with γ = ε = 0 vs general oscillator", cornn, 1e-9));
    out.push(Check::at_most("Verlet forward/backward residual", reverse, 1e-10));
    out.push(Check::at_most("Hamiltonian gradient identity", hamiltonian_gradient_error(seed)?, 1e-6));

    let mut rest = random_multilayer(seed, 3, Activation::Tanh);
    rest.layers.iter_mut().for_each(|l| l.b.fill(0.0));
    let z = Signal::zeros(*u.grid(), 2);
    let (layers, _) = simulate_multilayer(&rest, &z, &IntegratorConfig::default())?;
    out.push(Check::at_most(
        "rest stays at rest",
        layers.iter().map(Signal::sup_norm).fold(0.0, f64::max),
        0.0,
    ));

    let (r_rk4, r_verlet) = convergence_ratios(seed)?;
    out.push(Check::at_least("RK4 error ratio per step halving", r_rk4, 14.0));
    out.push(Check::at_least("Verlet error ratio per step halving", r_verlet, 3.8));
    Ok(())
}

/// Largest deviation of `(−∂H/∂y, ∂H/∂ẏ)` from `(ÿ, ẏ)` by central differences
/// at 100 random states.
pub fn hamiltonian_gradient_error(seed: u64) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x4a11);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let act = Activation::ALL[trial % 3];
        let osc = random_multilayer(seed.wrapping_add(trial as u64), 2, act);
        let layer = 1 + trial % 2;
        let l = &osc.layers[layer - 1];
        let m = l.width();
        let y: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f: Vec<f64> = (0..l.v.ncols()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let acc = layer_accel(&osc, layer, &y, &f);
        let d = 1e-5;
        for i in 0..m {
            let shift = |x: &[f64], by: f64| {
                let mut x = x.to_vec();
                x[i] += by;
                x
            };
            let dhdy = (hamiltonian(&osc, layer, &shift(&y, d), &v, &f)?
                - hamiltonian(&osc, layer, &shift(&y, -d), &v, &f)?)
                / (2.0 * d);
            let dhdv = (hamiltonian(&osc, layer, &y, &shift(&v, d), &f)?
                - hamiltonian(&osc, layer, &y, &shift(&v, -d), &f)?)
                / (2.0 * d);
            worst = worst.max((-dhdy - acc[i]).abs()).max((dhdv - v[i]).abs());
        }
    }
    Ok(worst)
}

/// Global-error ratios `e(h)/e(h/2)` of RK4 and velocity Verlet on a random
/// two-layer instance, against RK4 at `h/64`.
pub fn convergence_ratios(seed: u64) -> Result<(f64, f64)> {
    let osc = random_multilayer(seed ^ 0xc0, 2, Activation::Tanh);
    let u = InputEnsemble {
        dim: 2,
        t_end: 2.0,
        n_steps: 100,
        seed,
        ..Default::default()
    }
    .sample(2);
    let run = |method: Method, substeps: usize| -> Result<Signal> {
        let cfg = IntegratorConfig {
            method,
            substeps_per_grid_point: substeps,
            max_omega_step: f64::INFINITY,
            ..Default::default()
        };
        Ok(simulate_multilayer(&osc, &u, &cfg)?.1)
    };
    let reference = run(Method::Rk4, 128)?;
    let ratio = |method: Method, s: usize| -> Result<f64> {
        Ok(sup_distance(&run(method, s)?, &reference)? / sup_distance(&run(method, 2 * s)?, &reference)?)
    };
    Ok((ratio(Method::Rk4, 1)?, ratio(Method::VelocityVerlet, 2)?))
}

fn reconstruction(seed: u64, out: &mut Vec<Check>) -> Result<()> {
    let e = ensemble(seed);
    let b = e.sup_bound();
    let window = e.grid().duration();
    let plan = build_plan(&e, window, 0.05 * b)?;
    let loose = plan.validated_err.unwrap_or(f64::INFINITY);
    out.push(Check::at_most("plan at 0.05·B: validated error", loose, 0.05 * b));
    let tight = build_plan(&e, window, 0.005 * b)?;
    let tight_err = tight.validated_err.unwrap_or(f64::INFINITY);
    out.push(Check::at_most("plan at 0.005·B: validated error", tight_err, 0.005 * b));
    out.push(Check::holds("tighter target uses more frequencies", tight.n() > plan.n()));
    out.push(Check::holds("tighter target lowers the validated error", tight_err < loose));
    Ok(())
}

fn delay(seed: u64, out: &mut Vec<Check>) -> Result<()> {
    let e = ensemble(seed);
    let tol = 0.05 * e.sup_bound();
    let delay = 0.2 * e.t_end;
    let net = build_delay_network(&e, delay, tol)?;
    out.push(Check::at_most("held-out error of the 0.2T delay", net.validated_err, tol));
    let nu = 3.0 * std::f64::consts::PI;
    let u = Signal::from_fn(e.grid(), 1, |t, r| r[0] = (nu * t).sin())?;
    let z = net.run(&u, &IntegratorConfig::default())?;
    let shifted = Signal::from_fn(e.grid(), 1, |t, r| r[0] = if t < delay { 0.0 } else { (nu * (t - delay)).sin() })?;
    out.push(Check::at_most("single sine against its analytic shift", sup_distance(&z, &shifted)?, tol));
    Ok(())
}

fn emulator(seed: u64, out: &mut Vec<Check>) -> Result<()> {
    let e = ensemble(seed);
    let net = ReadoutNet::random(4, 1, 1, 0.5, Activation::Tanh, seed)?;
    let emu = build_nn_emulator(&net, &e, 0.05)?;
    out.push(Check::at_most(
        "H = 4 emulator held-out error",
        emu.validated_err.unwrap_or(f64::INFINITY),
        0.05,
    ));
    Ok(())
}

fn compile(seed: u64, out: &mut Vec<Check>) -> Result<()> {
    let e = ensemble(seed);
    let config = CompileConfig {
        seed,
        ..Default::default()
    };
    let op = TargetOperator::delay(1, 0.2 * e.t_end)?;
    let c = compile_operator(&op, &e, &config)?;
    out.push(Check::at_most("end-to-end error", c.end_to_end_err, c.eps_total));
    out.push(Check::at_most("end-to-end vs 1.1 × stage sum", c.end_to_end_err, 1.1 * c.stage_sum()));
    out.push(Check::at_most("compiled network causality", c.network_causality_violation, 1e-9));
    out.push(Check::at_most("structured run vs full network", c.network_check, 1e-8));
    out.push(Check::at_most("embedded vs multi-layer run", c.embed_check, 1e-9 * (1.0 + c.network.c.amax())));
    Ok(())
}

fn approx(seed: u64, out: &mut Vec<Check>) -> Result<()> {
    let fam = LinearRampFamily::new(vec![-1.0], vec![1.0], 2000, seed)?;
    let spec = FunctionSpec::Identity;
    let config = CompileConfig {
        seed,
        ..Default::default()
    };
    let a = approximate_function(spec.name(), spec.closure(), 1, &fam, 0.1, &config)?;
    let err = a.probe(&*spec.closure(), &probe_points(&fam.lo, &fam.hi, 16))?;
    out.push(Check::at_most("F(ξ) = ξ on 16 probe points", err, 0.1));
    Ok(())
}

fn fk(seed: u64, out: &mut Vec<Check>) -> Result<()> {
    let spec = OrderedCouplingSpec {
        seed,
        ..Default::default()
    };
    let f = default_forcing(&spec)?;
    let reps = sweep_reduction(&spec, &DEFAULT_SWEEP, &f, &IntegratorConfig::default())?;
    let residual = reps.iter().map(|r| r.row_sum_residual).fold(0.0, f64::max);
    out.push(Check::at_most("C row sums", residual, 1e-12));
    let rise = reps.windows(2).map(|w| w[1].deviation - w[0].deviation).fold(f64::NEG_INFINITY, f64::max);
    out.push(Check::at_most("largest rise of D along the sweep", rise, 0.0));
    let d = |e: f64| reps.iter().find(|r| r.eps_order == e).map(|r| r.deviation).unwrap_or(f64::NAN);
    out.push(Check::at_most("D(0.05)/D(0.1)", d(0.05) / d(0.1), 0.7));

    let oc = build_ordered_coupling(&spec)?;
    let n = oc.system.n();
    let theta0: Vec<f64> = (0..n).map(|i| 0.3 * ((i as f64) * 1.7).sin()).collect();
    let grid = TimeGrid::new(0.0, 10.0, 200)?;
    out.push(Check::at_least(
        "Verlet energy error ratio per step halving",
        energy_halving_ratio(&oc.system, &theta0, &grid, 1)?,
        3.5,
    ));

    let cov = change_variables(&oc.system)?;
    let g = TimeGrid::new(0.0, 5.0, 500)?;
    let cfg = IntegratorConfig::rk4(4);
    let th = simulate_fk(&oc.system, &theta0, &vec![0.0; n], &g, &cfg)?;
    let y = cov.simulate(&cov.from_angles(&theta0)?, &vec![0.0; n], &g, &cfg)?;
    out.push(Check::at_most("θ = W y round trip", sup_distance(&cov.angles(&y)?, &th)?, 1e-7));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_filter() {
        assert!(resolve_suites("").is_err());
        assert!(resolve_suites(" , ").is_err());
        assert!(resolve_suites("nope").is_err());
        assert_eq!(resolve_suites("all").unwrap().len(), SUITES.len());
        assert_eq!(resolve_suites("lemma1,fk").unwrap(), vec!["lemma1", "fk"]);
    }

    #[test]
    fn fast_suites_pass() {
        for s in ["signals", "lemma1", "structure", "fk"] {
            let r = run_suite(s, 0);
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn report_serializes() {
        let r = run_suites("signals", 3).unwrap();
        let v: serde_json::Value = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(v["suites"][0]["suite"], "signals");
        assert!(v["passed"].as_bool().unwrap());
    }
}
