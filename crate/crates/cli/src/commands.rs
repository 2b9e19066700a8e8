use neurosc::compiler::{
    approximate_function_report, compile_operator_report, probe_points, stage_csv, CompileOutcome, FunctionApproximator,
    LinearRampFamily,
};
use neurosc::fk::{
    build_ordered_coupling, default_fk_grid, energy_halving_ratio, sine_forcing, sweep_csv, sweep_reduction,
};
use neurosc::operators::TargetOperator;
use neurosc::oscillator::{random_multilayer, simulate_multilayer};
use neurosc::reconstruction::{build_plan, PsiOracle};
use neurosc::signal::{fmt17, InputEnsemble, InputFamily, Signal, TimeGrid, WarmupFamily};
use neurosc::transform::{
    calibrate_scale, calibration_sweep, eval_bank_exact, harmonic_response, windowed_sine_transform, CALIBRATION_BASE,
    CALIBRATION_COUNT,
};
use neurosc::verify::run_suites;
use serde_json::json;

use crate::config::{FamilySpec, InputSpec, NetworkSpec, Resolved};
use crate::output::Artifacts;
use crate::svg::Series;
use crate::CliError;

fn signal_csv(s: &Signal) -> Result<String, CliError> {
    let mut buf = Vec::new();
    s.write_csv(&mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

fn records(header: Vec<String>, rows: Vec<Vec<String>>) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).map_err(neurosc::error::Error::from)?;
    for r in rows {
        w.write_record(&r).map_err(neurosc::error::Error::from)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn component_series(s: &Signal, prefix: &str) -> Vec<Series> {
    let ts = s.grid().times();
    (0..s.dim())
        .map(|i| Series::new(format!("{prefix}{i}"), ts.iter().copied().zip(s.component(i)).collect()))
        .collect()
}

fn config_err(what: &str) -> impl Fn(neurosc::error::Error) -> CliError + '_ {
    move |e| CliError::Config(format!("{what}: {e}"))
}

pub fn simulate(run: &Resolved, art: &mut Artifacts) -> Result<(), CliError> {
    let sec = &run.config.simulate;
    let net = match &sec.network {
        NetworkSpec::Random { layers, act, zero_bias } => {
            if *layers == 0 {
                return Err(CliError::Config("simulate.network.layers must be >= 1".into()));
            }
            let mut o = random_multilayer(run.seed, *layers, *act);
            if *zero_bias {
                o.layers.iter_mut().for_each(|l| l.b.fill(0.0));
            }
            o
        }
        NetworkSpec::Explicit { oscillator } => oscillator.clone(),
    };
    net.validate().map_err(config_err("simulate.network"))?;
    let ens = InputEnsemble {
        dim: net.input_dim,
        ..run.config.ensemble.clone()
    };
    let u = match sec.input {
        InputSpec::Ensemble { index } => ens.sample(index),
        InputSpec::Zero => Signal::zeros(ens.grid(), net.input_dim),
    };
    let (layers, z) = simulate_multilayer(&net, &u, &run.config.integrator)?;
    let cols: Vec<Vec<f64>> = layers.iter().flat_map(|l| (0..l.dim()).map(|i| l.component(i))).collect();
    let hidden = Signal::from_columns(*u.grid(), &cols)?;
    art.text("input.csv", signal_csv(&u)?);
    art.text("hidden.csv", signal_csv(&hidden)?);
    art.text("output.csv", signal_csv(&z)?);
    art.json("network.json", &net)?;
    art.chart("output.svg", "network output", "t", "z", &component_series(&z, "z"), false);
    art.summary(json!({
        "hidden_dim": net.hidden_dim(),
        "output_sup": z.sup_norm(),
        "hidden_sup": hidden.sup_norm(),
    }));
    Ok(())
}

pub fn transform(run: &Resolved, art: &mut Artifacts) -> Result<(), CliError> {
    let sec = &run.config.transform;
    let ens = &run.config.ensemble;
    let cfg = run.config.integrator;
    if sec.omegas.iter().any(|w| !(*w > 0.0)) || !(sec.tol > 0.0) {
        return Err(CliError::Config("transform needs ω > 0 and tol > 0".into()));
    }
    let scales: Vec<f64> = (0..sec.sweep_points as i32).map(|k| 0.5f64.powi(k)).collect();
    let cal_inputs = ens.samples(CALIBRATION_BASE, CALIBRATION_COUNT);
    let probe = ens.samples(0, sec.identity_inputs);
    let mut rows = Vec::new();
    let mut sweep_rows = Vec::new();
    let mut charts = Vec::new();
    let mut results = Vec::new();
    for &omega in &sec.omegas {
        let p = calibrate_scale(omega, ens, sec.act, sec.tol, &cfg)?;
        let mut identity: f64 = 0.0;
        for u in &probe {
            let y = harmonic_response(u, omega, &cfg)?;
            for k in 0..u.len() {
                let l = windowed_sine_transform(u, omega, u.grid().t(k))?;
                for (a, b) in y.at(k).iter().zip(&l) {
                    identity = identity.max((omega * a - b).abs());
                }
            }
        }
        let sweep = calibration_sweep(omega, sec.act, &cal_inputs, &scales, &cfg)?;
        rows.push(vec![fmt17(omega), fmt17(p.s), fmt17(p.achieved_err), fmt17(identity)]);
        sweep_rows.extend(sweep.iter().map(|(s, e)| vec![fmt17(omega), fmt17(*s), fmt17(*e)]));
        charts.push(Series::new(format!("ω = {omega}"), sweep.clone()));
        results.push(json!({"omega": omega, "s": p.s, "achieved_err": p.achieved_err, "identity_err": identity}));
    }
    art.text(
        "calibration.csv",
        records(
            ["omega", "s", "achieved_err", "identity_err"].map(String::from).to_vec(),
            rows,
        )?,
    );
    art.text("sweep.csv", records(["omega", "s", "err"].map(String::from).to_vec(), sweep_rows)?);
    art.json("calibration.json", &results)?;
    art.chart("sweep.svg", "calibration sweep", "s", "error", &charts, true);
    art.summary(json!({ "layers": results }));
    Ok(())
}

pub fn reconstruct(run: &Resolved, art: &mut Artifacts) -> Result<(), CliError> {
    let sec = &run.config.reconstruct;
    let ens = &run.config.ensemble;
    let grid = ens.grid();
    if !(sec.target_fraction > 0.0) {
        return Err(CliError::Config("reconstruct.target_fraction must be > 0".into()));
    }
    let target = sec.target_fraction * ens.sup_bound();
    let window = sec.window.unwrap_or(grid.duration());
    let plan = build_plan(ens, window, target)?;
    art.json("plan.json", &plan)?;
    art.text("history.csv", plan.history_csv()?);
    if window + 1e-9 >= grid.duration() {
        let u = ens.sample(sec.sample_index);
        let po = PsiOracle::new(plan.clone(), TargetOperator::identity(ens.dim), grid)?;
        let x = eval_bank_exact(&plan.positive_omegas(), &u)?;
        let last = u.len() - 1;
        let rec = po.reconstruct_signal(x.at(last), last)?;
        let n = rec.len().min(u.len());
        let mut header = vec!["t".to_string()];
        header.extend((0..ens.dim).map(|i| format!("u{i}")));
        header.extend((0..ens.dim).map(|i| format!("rec{i}")));
        let rows = (0..n)
            .map(|k| {
                let mut r = vec![fmt17(grid.t(k))];
                r.extend(u.at(k).iter().chain(rec.at(k)).map(|v| fmt17(*v)));
                r
            })
            .collect();
        art.text("reconstruction.csv", records(header, rows)?);
        let mut series = component_series(&u, "u");
        series.extend(component_series(&rec, "reconstructed "));
        art.chart("reconstruction.svg", "history reconstruction at t = T", "t", "u", &series, false);
    }
    art.summary(json!({
        "n": plan.n(),
        "target_err": target,
        "validated_err": plan.validated_err,
        "l_cut": plan.l_cut,
        "eps_moll": plan.eps_moll,
    }));
    Ok(())
}

fn stage_summary(out: &CompileOutcome) -> serde_json::Value {
    json!({
        "stages": out.stages,
        "miss": out.miss.as_ref().map(|(s, a, b)| json!({"stage": s, "achieved": a, "budget": b})),
        "end_to_end_err": out.compiled.as_ref().map(|c| c.end_to_end_err),
        "ledger_consistent": out.compiled.as_ref().map(|c| c.ledger_consistent),
        "network_causality_violation": out.compiled.as_ref().map(|c| c.network_causality_violation),
        "network_check": out.compiled.as_ref().map(|c| c.network_check),
        "embed_check": out.compiled.as_ref().map(|c| c.embed_check),
        "eps_total": out.compiled.as_ref().map(|c| c.eps_total),
    })
}

fn log_stages(command: &str, out: &CompileOutcome) {
    for s in &out.stages {
        eprintln!(
            "[{command}] stage {}: {:.3e} (cumulative {:.3e} / {:.3e}) {}",
            s.stage,
            s.achieved,
            s.cumulative,
            s.cumulative_budget,
            if s.passed { "ok" } else { "MISS" }
        );
    }
}

fn budget_error(out: &CompileOutcome) -> Option<CliError> {
    out.miss.as_ref().map(|(stage, a, b)| CliError::Budget(format!("stage {stage}: achieved {a:e} > budget {b:e}")))
}

pub fn compile(run: &Resolved, art: &mut Artifacts) -> Result<(), CliError> {
    let sec = &run.config.compile;
    let op = sec.operator.build().map_err(config_err("compile.operator"))?;
    let ens = run.config.ensemble.clone();
    let family: Box<dyn InputFamily> = match sec.family {
        FamilySpec::Ensemble => Box::new(ens),
        FamilySpec::Warmup { offset_amp, t0 } => {
            if !(t0 > 0.0) || !(offset_amp >= 0.0) {
                return Err(CliError::Config("compile.family needs t0 > 0 and offset_amp >= 0".into()));
            }
            Box::new(WarmupFamily {
                base: ens,
                offset_amp,
                t0,
            })
        }
    };
    let out = compile_operator_report(&op, family.as_ref(), &sec.settings)?;
    log_stages("compile", &out);
    art.text("stages.csv", stage_csv(&out.stages)?);
    art.json("summary.json", &stage_summary(&out))?;
    if let Some(c) = &out.compiled {
        art.json("compiled.json", c)?;
        art.text("validation.csv", c.validation_csv()?);
        let first: Vec<_> = c.validation.iter().filter(|r| r.input_id == "0" || r.input_id == "0:0").collect();
        art.chart(
            "validation.svg",
            "held-out input 0",
            "t",
            "output",
            &[
                Series::new("target", first.iter().map(|r| (r.t, r.target)).collect()),
                Series::new("network", first.iter().map(|r| (r.t, r.predicted)).collect()),
            ],
            false,
        );
    }
    art.summary(stage_summary(&out));
    budget_error(&out).map_or(Ok(()), Err)
}

pub fn approx_fn(run: &Resolved, art: &mut Artifacts) -> Result<(), CliError> {
    let sec = &run.config.approx;
    let fam = LinearRampFamily::new(sec.lo.clone(), sec.hi.clone(), sec.n_steps, run.seed)
        .map_err(config_err("approx box"))?;
    if !(sec.eps > 0.0) || sec.probe_count == 0 {
        return Err(CliError::Config("approx needs eps > 0 and probe_count >= 1".into()));
    }
    let p = fam.dim();
    let q = sec.function.output_dim(p);
    let f = sec.function.closure();
    let out = approximate_function_report(sec.function.name(), f.clone(), q, &fam, sec.eps, &sec.settings)?;
    log_stages("approx-fn", &out);
    art.text("stages.csv", stage_csv(&out.stages)?);
    let mut summary = stage_summary(&out);
    let mut probe_err = None;
    if let Some(c) = &out.compiled {
        let approx = FunctionApproximator {
            compiled: c.clone(),
            family: fam.clone(),
        };
        let mut header: Vec<String> = (0..p).map(|i| format!("xi{i}")).collect();
        header.extend((0..q).map(|j| format!("target{j}")));
        header.extend((0..q).map(|j| format!("approx{j}")));
        header.push("abs_err".into());
        let mut rows = Vec::new();
        let mut worst: f64 = 0.0;
        for x in probe_points(&fam.lo, &fam.hi, sec.probe_count) {
            let want = f(&x);
            let got = approx.eval(&x)?;
            let e = want.iter().zip(&got).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(e);
            rows.push(x.iter().chain(&want).chain(&got).chain([&e]).map(|v| fmt17(*v)).collect());
        }
        art.text("probe.csv", records(header, rows)?);
        art.json("compiled.json", c)?;
        probe_err = Some(worst);
        eprintln!("[approx-fn] probe error {worst:.3e} (ε = {})", sec.eps);
    }
    summary["probe_err"] = json!(probe_err);
    summary["function"] = json!(sec.function);
    art.json("summary.json", &summary)?;
    art.summary(summary);
    if let Some(e) = budget_error(&out) {
        return Err(e);
    }
    match probe_err {
        Some(e) if e > sec.eps => Err(CliError::Budget(format!("probe: achieved {e:e} > budget {:e}", sec.eps))),
        _ => Ok(()),
    }
}

pub fn fk_sweep(run: &Resolved, art: &mut Artifacts) -> Result<(), CliError> {
    let sec = &run.config.fk;
    let spec = &sec.structure;
    spec.validate().map_err(config_err("fk.structure"))?;
    if sec.eps_list.is_empty() || sec.eps_list.iter().any(|e| !(*e > 0.0)) {
        return Err(CliError::Config("fk.eps_list needs positive entries".into()));
    }
    let forcing = sine_forcing(spec, default_fk_grid(), sec.forcing_amp, sec.forcing_freq)?;
    let reports = sweep_reduction(spec, &sec.eps_list, &forcing, &run.config.integrator)?;
    let oc = build_ordered_coupling(spec)?;
    let n = oc.system.n();
    let theta0: Vec<f64> = (0..n).map(|i| 0.3 * ((i as f64) * 1.7).sin()).collect();
    let energy_ratio = energy_halving_ratio(&oc.system, &theta0, &TimeGrid::new(0.0, 10.0, 200)?, 1)?;
    art.text("sweep.csv", sweep_csv(&reports)?);
    art.json("reports.json", &reports)?;
    art.json("system.json", &oc.system)?;
    art.chart(
        "sweep.svg",
        "full vs truncated deviation",
        "ε",
        "D",
        &[Series::new("D", reports.iter().map(|r| (r.eps_order, r.deviation)).collect())],
        true,
    );
    for r in &reports {
        eprintln!("[fk-sweep] ε = {}: D = {:.3e}", r.eps_order, r.deviation);
    }
    art.summary(json!({
        "deviation": reports.iter().map(|r| json!({"eps_order": r.eps_order, "D": r.deviation})).collect::<Vec<_>>(),
        "max_row_sum_residual": reports.iter().map(|r| r.row_sum_residual).fold(0.0, f64::max),
        "energy_halving_ratio": energy_ratio,
        "condition": oc.condition,
    }));
    Ok(())
}

pub fn verify(run: &Resolved, art: &mut Artifacts, suite: &str) -> Result<(), CliError> {
    let report = run_suites(suite, run.seed).map_err(|e| CliError::Config(e.to_string()))?;
    let body = serde_json::to_string_pretty(&report).map_err(|e| CliError::Config(e.to_string()))?;
    println!("{body}");
    art.json("verify.json", &report)?;
    art.summary(json!({ "passed": report.passed }));
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<_> = report.suites.iter().filter(|s| !s.passed).map(|s| s.suite.as_str()).collect();
        Err(CliError::Failed(format!("failing suites: {}", failed.join(", "))))
    }
}
