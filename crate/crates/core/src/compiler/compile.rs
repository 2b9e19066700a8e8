//! Assembly of a three-layer oscillator approximating a causal operator:
//! sine-transform bank (layer 1), then the emulator of the fitted readout
//! network (layers 2–3).
//!
//! Stage errors are measured on the same held-out inputs as the terms of
//!
//! ```text
//! Φ(u) − z = (Φ(u) − Ψ(x̂)) + (Ψ(x̂) − Ψ(x)) + (Ψ(x) − N(x)) + (N(x) − z)
//! ```
//!
//! with `x̂` the exact transforms, `x` the bank outputs, `N` the readout net and
//! `z` the network output, so the end-to-end error never exceeds their sum.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::emulator::{build_nn_emulator_on, EmulatorOptions, NNEmulator};
use super::readout::{fit_on, fit_with_features, scored_indices, training_set};
use super::{bank_layer, bank_readout, BetaSource, FitOptions, FitReport, ReadoutNet, EMULATOR_BASE, HELDOUT_BASE};
use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::integrate::IntegratorConfig;
use crate::operators::{check_causality, CausalityReport, TargetOperator};
use crate::oscillator::{embed_multilayer_to_general, simulate_general, simulate_multilayer, MultiLayerOscillator};
use crate::reconstruction::{build_plan_with, PlanOptions, PsiOracle, ReconstructionPlan};
use crate::signal::{fmt17, InputFamily, Signal, TimeGrid};
use crate::transform::{eval_bank, eval_bank_exact, FrequencyBank, CALIBRATION_BASE, CALIBRATION_COUNT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompileConfig {
    /// Total error budget; when absent, `eps_fraction` times the family's sup bound.
    pub eps_total: Option<f64>,
    pub eps_fraction: f64,
    pub act: Activation,
    pub fit: FitOptions,
    pub emulator: EmulatorOptions,
    pub plan: PlanOptions,
    pub cfg: IntegratorConfig,
    pub causality_probes: usize,
    pub validation_inputs: usize,
    /// Stages A–C are scored every `score_stride` grid points.
    pub score_stride: usize,
    /// Attempts at tightening the bank when stage B misses its budget.
    pub bank_retries: usize,
    /// Reconstruction plans rebuilt at a tighter target when stage A misses.
    pub plan_retries: usize,
    /// Grid steps of the embedded-network cross simulation.
    pub cross_check_steps: usize,
    pub seed: u64,
}

impl Default for CompileConfig {
    fn default() -> Self {
        Self {
            eps_total: None,
            eps_fraction: 0.1,
            act: Activation::Tanh,
            fit: FitOptions::default(),
            emulator: EmulatorOptions::default(),
            plan: PlanOptions::default(),
            cfg: IntegratorConfig {
                layerwise: true,
                exponential: true,
                ..Default::default()
            },
            causality_probes: 8,
            validation_inputs: 16,
            score_stride: 1,
            bank_retries: 4,
            plan_retries: 2,
            cross_check_steps: 2,
            seed: 0,
        }
    }
}

impl CompileConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.eps_total {
            if !(e > 0.0) {
                return Err(Error::InvalidParameter("eps_total must be > 0".into()));
            }
        }
        if !(self.eps_fraction > 0.0) || self.causality_probes == 0 || self.validation_inputs == 0 || self.score_stride == 0 {
            return Err(Error::InvalidParameter(
                "need eps_fraction > 0 and at least one probe, validation input and score stride".into(),
            ));
        }
        self.fit.validate()?;
        self.emulator.validate()?;
        self.cfg.validate()
    }

    pub fn eps_for(&self, family: &dyn InputFamily) -> f64 {
        self.eps_total.unwrap_or(self.eps_fraction * family.sup_bound())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub description: String,
    pub achieved: f64,
    /// Nominal share `ε/4`.
    pub budget: f64,
    /// Sum of achieved errors up to this stage.
    pub cumulative: f64,
    pub cumulative_budget: f64,
    pub passed: bool,
}

/// One row of the held-out validation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub input_id: String,
    pub t: f64,
    pub target: f64,
    pub predicted: f64,
    pub abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledOscillator {
    pub operator: String,
    pub p: usize,
    pub q: usize,
    pub eps_total: f64,
    pub network: MultiLayerOscillator,
    pub plan: ReconstructionPlan,
    pub bank: FrequencyBank,
    pub readout: ReadoutNet,
    pub fit: FitReport,
    /// `‖Σ‖‖Λ‖·sup|σ′|` of the preliminary fit on exact transforms.
    pub lipschitz: f64,
    pub emulator: NNEmulator,
    pub fd_dt: f64,
    pub stages: Vec<StageReport>,
    /// Held-out sup error of the network output.
    pub end_to_end_err: f64,
    pub ledger_consistent: bool,
    pub causality: CausalityReport,
    /// Output change on `[start, t*]` after perturbing one input beyond `t*`.
    pub network_causality_violation: f64,
    /// Difference between the layered simulation of the network and the
    /// emulator path used for validation.
    pub network_check: f64,
    /// Difference between the embedded general oscillator and the coupled
    /// multi-layer simulation over the first grid steps.
    pub embed_check: f64,
    pub integrator: IntegratorConfig,
    #[serde(skip)]
    pub validation: Vec<ValidationRow>,
}

impl CompiledOscillator {
    pub fn stage_sum(&self) -> f64 {
        self.stages.iter().map(|s| s.achieved).sum()
    }

    /// Network output along `u`.
    pub fn run(&self, u: &Signal) -> Result<Signal> {
        Ok(simulate_multilayer(&self.network, u, &self.integrator)?.1)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn validation_csv(&self) -> Result<String> {
        validation_csv(&self.validation)
    }

    pub fn stage_csv(&self) -> Result<String> {
        stage_csv(&self.stages)
    }
}

pub fn validation_csv(rows: &[ValidationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["input_id", "t", "target", "predicted", "abs_err"])?;
    for r in rows {
        w.write_record([
            r.input_id.clone(),
            fmt17(r.t),
            fmt17(r.target),
            fmt17(r.predicted),
            fmt17(r.abs_err),
        ])?;
    }
    into_string(w)
}

pub fn stage_csv(stages: &[StageReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["stage", "achieved", "budget", "cumulative", "cumulative_budget", "passed"])?;
    for s in stages {
        w.write_record([
            s.stage.clone(),
            fmt17(s.achieved),
            fmt17(s.budget),
            fmt17(s.cumulative),
            fmt17(s.cumulative_budget),
            s.passed.to_string(),
        ])?;
    }
    into_string(w)
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Stage reports so far and, when every stage met its budget, the network.
#[derive(Debug, Clone)]
pub struct CompileOutcome {
    pub stages: Vec<StageReport>,
    pub compiled: Option<CompiledOscillator>,
    /// The first missed budget, if any.
    pub miss: Option<(String, f64, f64)>,
}

impl CompileOutcome {
    pub fn into_result(self) -> Result<CompiledOscillator> {
        match (self.compiled, self.miss) {
            (Some(c), None) => Ok(c),
            (_, Some((stage, achieved, budget))) => Err(Error::BudgetMiss { stage, achieved, budget }),
            (None, None) => Err(Error::InvalidParameter("compilation produced no network".into())),
        }
    }
}

struct Ledger {
    eps: f64,
    stages: Vec<StageReport>,
}

impl Ledger {
    /// Records a stage; returns whether the running total is within `k·ε/4`.
    fn push(&mut self, stage: &str, description: &str, achieved: f64) -> bool {
        let k = self.stages.len() + 1;
        let cumulative = self.stages.last().map_or(0.0, |s| s.cumulative) + achieved;
        let cumulative_budget = k as f64 * self.eps / 4.0;
        let passed = cumulative <= cumulative_budget;
        self.stages.push(StageReport {
            stage: stage.into(),
            description: description.into(),
            achieved,
            budget: self.eps / 4.0,
            cumulative,
            cumulative_budget,
            passed,
        });
        passed
    }

    /// What is left for the next stage.
    fn remaining(&self) -> f64 {
        let k = self.stages.len() + 1;
        k as f64 * self.eps / 4.0 - self.stages.last().map_or(0.0, |s| s.cumulative)
    }

    fn fail(self) -> CompileOutcome {
        let last = self.stages.last().expect("a stage was recorded");
        let miss = Some((last.stage.clone(), last.cumulative, last.cumulative_budget));
        CompileOutcome {
            stages: self.stages,
            compiled: None,
            miss,
        }
    }
}

/// Readout-map values along `x` at grid indices `ks`.
fn psi_along(po: &PsiOracle, x: &Signal, ks: &[usize]) -> Result<Vec<Vec<f64>>> {
    po.eval_along(x, ks)
}

fn max_diff_at(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

fn rows_at(s: &Signal, ks: &[usize]) -> Vec<Vec<f64>> {
    ks.iter().map(|&k| s.at(k).to_vec()).collect()
}

struct HeldOut {
    phi: Vec<Signal>,
    x_exact: Vec<Signal>,
    psi_exact: Vec<Vec<Vec<f64>>>,
}

fn stage_b_error(po: &PsiOracle, held: &HeldOut, xb: &[Signal], ks: &[usize]) -> Result<(f64, Vec<Vec<Vec<f64>>>)> {
    let mut worst: f64 = 0.0;
    let mut psi_bank = Vec::with_capacity(xb.len());
    for (x, pe) in xb.iter().zip(&held.psi_exact) {
        let pb = psi_along(po, x, ks)?;
        worst = worst.max(max_diff_at(pe, &pb));
        psi_bank.push(pb);
    }
    Ok((worst, psi_bank))
}

/// Truncation of `u` to its first `steps` grid intervals.
fn head(u: &Signal, steps: usize) -> Result<Signal> {
    let g = u.grid();
    let n = steps.min(g.n_steps).max(1);
    let grid = TimeGrid::new(g.t_start, g.t(n), n)?;
    Signal::new(grid, u.dim(), u.values()[..(n + 1) * u.dim()].to_vec())
}

fn perturbed_after(u: &Signal, cut: usize) -> Result<Signal> {
    let d = u.dim();
    let mut vals = u.values().to_vec();
    for (k, chunk) in vals.chunks_mut(d).enumerate().skip(cut + 1) {
        for (i, v) in chunk.iter_mut().enumerate() {
            *v += 0.5 * (1.0 + (k * 7 + i) as f64).sin();
        }
    }
    Signal::new(*u.grid(), d, vals)
}

/// Compiles `op` over `family`; any stage missing its budget stops the pipeline
/// and is reported in the outcome.
pub fn compile_operator_report(
    op: &TargetOperator,
    family: &dyn InputFamily,
    config: &CompileConfig,
) -> Result<CompileOutcome> {
    config.validate()?;
    if family.dim() != op.p {
        return Err(Error::DimensionMismatch(format!(
            "operator reads {} components, inputs have {}",
            op.p,
            family.dim()
        )));
    }
    let eps = config.eps_for(family);
    let causality = check_causality(op, family, config.causality_probes, config.seed)?;
    let grid = family.grid();
    let cfg = config.cfg;
    let mut ledger = Ledger {
        eps,
        stages: Vec::new(),
    };
    let ks = scored_indices(family, config.score_stride);
    let k0 = ks[0];
    let inputs = family.samples(HELDOUT_BASE, config.validation_inputs);

    // Stage A: reconstruction plan and the readout map. The plan target is
    // tightened when the operator amplifies the reconstruction error.
    let mut target_a = eps / 4.0;
    let mut attempt = 0;
    let (plan, omegas, po, held, err_a) = loop {
        // A retry only happens after a miss, so an unreachable plan is a stage-A miss either way.
        let plan = match build_plan_with(family, grid.duration(), target_a, &config.plan) {
            Ok(p) => p,
            Err(Error::Unachievable { reason, .. }) => {
                ledger.push("A", &format!("reconstruction plan unavailable: {reason}"), f64::INFINITY);
                return Ok(ledger.fail());
            }
            Err(e) => return Err(e),
        };
        let omegas = plan.positive_omegas();
        let po = PsiOracle::new(plan.clone(), op.clone(), grid)?;
        let mut held = HeldOut {
            phi: Vec::new(),
            x_exact: Vec::new(),
            psi_exact: Vec::new(),
        };
        let mut err_a: f64 = 0.0;
        for u in &inputs {
            let phi = op.apply(u)?;
            let xe = eval_bank_exact(&omegas, u)?;
            let pe = psi_along(&po, &xe, &ks)?;
            err_a = err_a.max(max_diff_at(&rows_at(&phi, &ks), &pe));
            held.phi.push(phi);
            held.x_exact.push(xe);
            held.psi_exact.push(pe);
        }
        if err_a <= eps / 4.0 || attempt >= config.plan_retries {
            break (plan, omegas, po, held, err_a);
        }
        attempt += 1;
        target_a /= (1.2 * err_a * 4.0 / eps).max(1.5);
    };
    if !ledger.push("A", "reconstruction: Φ(u) vs Ψ(exact transforms)", err_a) {
        return Ok(ledger.fail());
    }

    // Preliminary readout on exact transforms fixes Λ, γ and the Lipschitz factor.
    let fit_opts = FitOptions {
        act: config.act,
        seed: config.seed ^ config.fit.seed,
        ..config.fit
    };
    let exact_set = training_set(&po, family, BetaSource::Exact(&omegas), fit_opts.samples, fit_opts.time_stride)?;
    let (pre, _) = fit_on(&exact_set, &fit_opts)?;
    let lipschitz = pre.lipschitz() * config.act.deriv_bound();

    // Stage B: calibrated bank.
    let budget_b = ledger.remaining();
    let width = (op.p * omegas.len()) as f64;
    let mut channel_tol = budget_b / lipschitz.max(1e-12) / width.sqrt();
    let cal = family.samples(CALIBRATION_BASE, CALIBRATION_COUNT);
    let mut attempt = 0;
    let (bank, x_bank, psi_bank, err_b) = loop {
        let bank = FrequencyBank::calibrate(&omegas, &cal, config.act, channel_tol, &cfg)?;
        let xb: Vec<Signal> = inputs.iter().map(|u| eval_bank(&bank, u, &cfg)).collect::<Result<_>>()?;
        let (e, pb) = stage_b_error(&po, &held, &xb, &ks)?;
        if e <= budget_b || attempt >= config.bank_retries {
            break (bank, xb, pb, e);
        }
        attempt += 1;
        channel_tol /= (1.2 * e / budget_b).max(2.0);
    };
    if !ledger.push("B", "transform bank: Ψ(exact) vs Ψ(bank)", err_b) {
        return Ok(ledger.fail());
    }

    // Stage C: readout refit on bank features with the same Λ, γ; widen if it stalls.
    let budget_c = ledger.remaining();
    let bank_set = training_set(&po, family, BetaSource::Bank(&bank, &cfg), fit_opts.samples, fit_opts.time_stride)?;
    let stage_c = |net: &ReadoutNet| -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (x, pb) in x_bank.iter().zip(&psi_bank) {
            let n = net.eval_signal(x)?;
            worst = worst.max(max_diff_at(pb, &rows_at(&n, &ks)));
        }
        Ok(worst)
    };
    let (mut net, mut fit) = fit_with_features(&bank_set, pre.lambda.clone(), pre.gamma.clone(), &fit_opts)?;
    let mut err_c = stage_c(&net)?;
    let mut hidden = fit_opts.hidden;
    while err_c > budget_c && hidden * 2 <= fit_opts.max_hidden {
        hidden *= 2;
        let opts = FitOptions { hidden, ..fit_opts };
        let (n2, f2) = fit_on(&bank_set, &opts)?;
        let e2 = stage_c(&n2)?;
        if e2 < err_c {
            net = n2;
            fit = f2;
            err_c = e2;
        }
    }
    if !ledger.push("C", "readout network: Ψ(bank) vs N(bank)", err_c) {
        return Ok(ledger.fail());
    }

    // Stage D: emulator of N on the bank features.
    let budget_d = ledger.remaining();
    let cal_x: Vec<Signal> = family
        .samples(EMULATOR_BASE, config.emulator.calibration_inputs)
        .iter()
        .map(|u| eval_bank(&bank, u, &cfg))
        .collect::<Result<_>>()?;
    let emu_opts = EmulatorOptions {
        cfg,
        ..config.emulator.clone()
    };
    let (emulator, outputs) = build_nn_emulator_on(&net, &cal_x, &x_bank, budget_d, &emu_opts)?;
    let mut err_d: f64 = 0.0;
    let mut end_to_end: f64 = 0.0;
    let mut validation = Vec::new();
    let q = op.q;
    for (i, ((x, z), phi)) in x_bank.iter().zip(&outputs).zip(&held.phi).enumerate() {
        let n = net.eval_signal(x)?;
        for k in k0..grid.len() {
            for j in 0..q {
                let (zv, nv, pv) = (z.at(k)[j], n.at(k)[j], phi.at(k)[j]);
                err_d = err_d.max((nv - zv).abs());
                end_to_end = end_to_end.max((pv - zv).abs());
                validation.push(ValidationRow {
                    input_id: if q == 1 { i.to_string() } else { format!("{i}:{j}") },
                    t: grid.t(k),
                    target: pv,
                    predicted: zv,
                    abs_err: (pv - zv).abs(),
                });
            }
        }
    }
    let d_ok = ledger.push("D", "emulator: N(bank) vs network output", err_d);

    // Assemble the three-layer network and check it against the validation path.
    let p = op.p;
    let first = bank_layer(&bank, p, true);
    let a1 = DMatrix::from_diagonal(&bank_readout(&bank, p, true));
    let (a, c) = emulator.readout();
    let network = MultiLayerOscillator {
        input_dim: p,
        layers: vec![first, emulator.first_layer(&a1)?, emulator.second_layer()],
        a,
        c,
        act: config.act,
    };
    network.validate()?;
    let probe = &inputs[0];
    let full = simulate_multilayer(&network, probe, &cfg)?.1;
    let network_check = crate::signal::sup_distance(&full, &outputs[0])?;
    let cut = grid.n_steps / 2;
    let moved = simulate_multilayer(&network, &perturbed_after(probe, cut)?, &cfg)?.1;
    let mut network_causality_violation: f64 = 0.0;
    for k in 0..=cut {
        for (x, y) in full.at(k).iter().zip(moved.at(k)) {
            network_causality_violation = network_causality_violation.max((x - y).abs());
        }
    }
    let embed_check = {
        let short = head(probe, config.cross_check_steps)?;
        let coupled = IntegratorConfig {
            layerwise: false,
            exponential: false,
            ..cfg
        };
        let general = embed_multilayer_to_general(&network)?;
        let (_, zg) = simulate_general(&general, &short, &coupled)?;
        let (_, zm) = simulate_multilayer(&network, &short, &coupled)?;
        crate::signal::sup_distance(&zg, &zm)?
    };

    let stage_sum: f64 = ledger.stages.iter().map(|s| s.achieved).sum();
    let ledger_consistent = end_to_end <= 1.1 * stage_sum;
    let compiled = CompiledOscillator {
        operator: op.name.clone(),
        p,
        q,
        eps_total: eps,
        network,
        plan,
        bank,
        readout: net,
        fit,
        lipschitz,
        fd_dt: emulator.fd_dt,
        emulator,
        stages: ledger.stages.clone(),
        end_to_end_err: end_to_end,
        ledger_consistent,
        causality,
        network_causality_violation,
        network_check,
        embed_check,
        integrator: cfg,
        validation,
    };
    let miss = if !d_ok {
        let last = ledger.stages.last().unwrap();
        Some((last.stage.clone(), last.cumulative, last.cumulative_budget))
    } else if end_to_end > eps {
        Some(("end-to-end".to_string(), end_to_end, eps))
    } else {
        None
    };
    Ok(CompileOutcome {
        stages: ledger.stages,
        compiled: Some(compiled),
        miss,
    })
}

pub fn compile_operator(op: &TargetOperator, family: &dyn InputFamily, config: &CompileConfig) -> Result<CompiledOscillator> {
    compile_operator_report(op, family, config)?.into_result()
}
