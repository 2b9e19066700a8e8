//! Causal operator oracles `Φ: C([0,T]; R^p) → C([0,T]; R^q)` and an
//! empirical causality probe.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{InputFamily, Signal};

type Oracle = dyn Fn(&Signal) -> Result<Signal> + Send + Sync;

/// Named operator oracle acting on whole signals; output shares the input grid.
#[derive(Clone)]
pub struct TargetOperator {
    pub name: String,
    pub p: usize,
    pub q: usize,
    oracle: Arc<Oracle>,
}

impl fmt::Debug for TargetOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TargetOperator({}, p={}, q={})", self.name, self.p, self.q)
    }
}

/// Serializable description of the built-in operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorSpec {
    Zero { dim: usize },
    Identity { dim: usize },
    Delay { dim: usize, delay: f64 },
    Integral { dim: usize },
    DampedOde { dim: usize, rate: f64 },
    Anticausal { dim: usize, lead: f64 },
}

impl OperatorSpec {
    pub fn build(&self) -> Result<TargetOperator> {
        match *self {
            OperatorSpec::Zero { dim } => Ok(TargetOperator::zero(dim)),
            OperatorSpec::Identity { dim } => Ok(TargetOperator::identity(dim)),
            OperatorSpec::Delay { dim, delay } => TargetOperator::delay(dim, delay),
            OperatorSpec::Integral { dim } => Ok(TargetOperator::integral(dim)),
            OperatorSpec::DampedOde { dim, rate } => TargetOperator::damped_ode(dim, rate),
            OperatorSpec::Anticausal { dim, lead } => TargetOperator::anticausal(dim, lead),
        }
    }
}

impl TargetOperator {
    pub fn new(
        name: impl Into<String>,
        p: usize,
        q: usize,
        oracle: impl Fn(&Signal) -> Result<Signal> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            p,
            q,
            oracle: Arc::new(oracle),
        }
    }

    pub fn apply(&self, u: &Signal) -> Result<Signal> {
        if u.dim() != self.p {
            return Err(Error::DimensionMismatch(format!(
                "operator {} expects input dimension {}, got {}",
                self.name,
                self.p,
                u.dim()
            )));
        }
        let out = (self.oracle)(u)?;
        if out.dim() != self.q || !out.grid().same_as(u.grid()) {
            return Err(Error::DimensionMismatch(format!(
                "operator {} returned a signal of the wrong shape",
                self.name
            )));
        }
        Ok(out)
    }

    pub fn zero(dim: usize) -> Self {
        Self::new("zero", dim, dim, move |u| Ok(Signal::zeros(*u.grid(), dim)))
    }

    pub fn identity(dim: usize) -> Self {
        Self::new("identity", dim, dim, |u| Ok(u.clone()))
    }

    /// `u(t − d)`, zero before the grid start.
    pub fn delay(dim: usize, d: f64) -> Result<Self> {
        if !(d >= 0.0) {
            return Err(Error::InvalidParameter("delay must be >= 0".into()));
        }
        Ok(Self::new(format!("delay({d})"), dim, dim, move |u| {
            let g = *u.grid();
            let shift = d / g.h();
            let whole = shift.round();
            if (shift - whole).abs() < 1e-9 {
                let m = whole as usize;
                let mut vals = vec![0.0; u.values().len()];
                if m < u.len() {
                    let off = m * u.dim();
                    vals[off..].copy_from_slice(&u.values()[..u.values().len() - off]);
                }
                Signal::new(g, u.dim(), vals)
            } else {
                Signal::from_fn(g, u.dim(), |t, row| {
                    u.eval_into(t - d, row).expect("query before the end");
                })
            }
        }))
    }

    /// Running integral from the grid start (trapezoid, exact for piecewise-linear inputs).
    pub fn integral(dim: usize) -> Self {
        Self::new("integral", dim, dim, |u| {
            let h = u.grid().h();
            let d = u.dim();
            let mut vals = vec![0.0; u.values().len()];
            for k in 1..u.len() {
                for i in 0..d {
                    vals[k * d + i] = vals[(k - 1) * d + i] + 0.5 * h * (u.at(k - 1)[i] + u.at(k)[i]);
                }
            }
            Signal::new(*u.grid(), d, vals)
        })
    }

    /// Solution of `ż = −a z + u`, `z(start) = 0`, exact for piecewise-linear inputs.
    pub fn damped_ode(dim: usize, a: f64) -> Result<Self> {
        if !(a > 0.0) {
            return Err(Error::InvalidParameter("decay rate must be > 0".into()));
        }
        Ok(Self::new(format!("damped_ode({a})"), dim, dim, move |u| {
            let h = u.grid().h();
            let e = (-a * h).exp();
            let c1 = -(-a * h).exp_m1() / a;
            let c2 = h / a - c1 / a;
            let d = u.dim();
            let mut vals = vec![0.0; u.values().len()];
            for k in 1..u.len() {
                for i in 0..d {
                    let (u0, u1) = (u.at(k - 1)[i], u.at(k)[i]);
                    vals[k * d + i] = e * vals[(k - 1) * d + i] + u0 * c1 + (u1 - u0) / h * c2;
                }
            }
            Signal::new(*u.grid(), d, vals)
        }))
    }

    /// `u(min(t + d, T))`: not causal, used to exercise the causality probe.
    pub fn anticausal(dim: usize, d: f64) -> Result<Self> {
        if !(d > 0.0) {
            return Err(Error::InvalidParameter("lead must be > 0".into()));
        }
        Ok(Self::new(format!("anticausal({d})"), dim, dim, move |u| {
            let end = u.grid().t_end;
            Signal::from_fn(*u.grid(), u.dim(), |t, row| {
                u.eval_into((t + d).min(end), row).expect("inside the grid");
            })
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalityReport {
    pub probes: usize,
    pub max_violation: f64,
    pub passed: bool,
}

/// Index offset of causality probes within an input family.
pub const CAUSALITY_BASE: u64 = 1 << 44;
pub const CAUSALITY_TOL: f64 = 1e-9;

/// Compares `Φ(u)` and `Φ(v)` on `[start, t*]` for `v` equal to `u` up to a random
/// cut `t*` and perturbed afterwards.
pub fn check_causality(
    op: &TargetOperator,
    family: &dyn InputFamily,
    probes: usize,
    seed: u64,
) -> Result<CausalityReport> {
    if probes == 0 {
        return Err(Error::InvalidParameter("need at least one probe".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..probes {
        let u = family.sample(CAUSALITY_BASE + i as u64);
        let g = *u.grid();
        let cut = rng.gen_range(1..g.n_steps);
        let d = u.dim();
        let mut vals = u.values().to_vec();
        let amp = 1.0 + u.sup_norm();
        for k in cut + 1..u.len() {
            for j in 0..d {
                vals[k * d + j] += amp * rng.gen_range(-1.0..1.0);
            }
        }
        let v = Signal::new(g, d, vals)?;
        let (a, b) = (op.apply(&u)?, op.apply(&v)?);
        for k in 0..=cut {
            for (x, y) in a.at(k).iter().zip(b.at(k)) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    let report = CausalityReport {
        probes,
        max_violation: worst,
        passed: worst <= CAUSALITY_TOL,
    };
    if report.passed {
        Ok(report)
    } else {
        Err(Error::OperatorRejected(format!(
            "{} is not causal: violation {:e}",
            op.name, worst
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{InputEnsemble, TimeGrid};

    fn ens() -> InputEnsemble {
        InputEnsemble::default()
    }

    #[test]
    fn causal_operators_pass() {
        for op in [
            TargetOperator::delay(1, 0.2).unwrap(),
            TargetOperator::delay(1, 0.2005).unwrap(),
            TargetOperator::integral(1),
            TargetOperator::damped_ode(1, 1.0).unwrap(),
            TargetOperator::identity(1),
            TargetOperator::zero(1),
        ] {
            let r = check_causality(&op, &ens(), 8, 3).unwrap();
            assert_eq!(r.max_violation, 0.0, "{}", op.name);
        }
    }

    #[test]
    fn anticausal_is_rejected() {
        let op = TargetOperator::anticausal(1, 0.1).unwrap();
        match check_causality(&op, &ens(), 4, 3) {
            Err(Error::OperatorRejected(msg)) => assert!(msg.contains("violation")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn operators_preserve_zero() {
        let z = Signal::zeros(ens().grid(), 1);
        for spec in [
            OperatorSpec::Delay { dim: 1, delay: 0.2 },
            OperatorSpec::Integral { dim: 1 },
            OperatorSpec::DampedOde { dim: 1, rate: 1.0 },
        ] {
            assert_eq!(spec.build().unwrap().apply(&z).unwrap().sup_norm(), 0.0);
        }
    }

    #[test]
    fn delay_shifts_exactly() {
        let u = ens().sample(2);
        let out = TargetOperator::delay(1, 0.2).unwrap().apply(&u).unwrap();
        for k in 0..u.len() {
            let want = if k >= 200 { u.at(k - 200)[0] } else { 0.0 };
            assert_eq!(out.at(k)[0], want);
        }
    }

    #[test]
    fn integral_and_ode_match_references() {
        let g = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let u = Signal::from_fn(g, 1, |t, r| r[0] = (3.0 * t).sin()).unwrap();
        let int = TargetOperator::integral(1).apply(&u).unwrap();
        let ode = TargetOperator::damped_ode(1, 1.0).unwrap().apply(&u).unwrap();
        for k in (0..g.len()).step_by(50) {
            let t = g.t(k);
            let exact_int = (1.0 - (3.0 * t).cos()) / 3.0;
            assert!((int.at(k)[0] - exact_int).abs() < 1e-6);
            // z = ∫ e^{-(t-s)} sin 3s ds in closed form.
            let exact_ode = ((3.0 * t).sin() - 3.0 * (3.0 * t).cos() + 3.0 * (-t).exp()) / 10.0;
            assert!((ode.at(k)[0] - exact_ode).abs() < 1e-6, "{k}");
        }
        // Fine RK4 reference for a sampled input.
        let s = ens().sample(5);
        let z = TargetOperator::damped_ode(1, 1.0).unwrap().apply(&s).unwrap();
        let f = |t: f64, z: f64| -z + s.eval(t.min(1.0)).unwrap()[0];
        let (mut zr, sub) = (0.0, 10);
        let hs = s.grid().h() / sub as f64;
        for k in 0..s.grid().n_steps {
            for j in 0..sub {
                let t = s.grid().t(k) + j as f64 * hs;
                let k1 = f(t, zr);
                let k2 = f(t + 0.5 * hs, zr + 0.5 * hs * k1);
                let k3 = f(t + 0.5 * hs, zr + 0.5 * hs * k2);
                let k4 = f(t + hs, zr + hs * k3);
                zr += hs / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            assert!((zr - z.at(k + 1)[0]).abs() < 1e-10);
        }
        assert!(z.sup_norm() < s.sup_norm() + 1e-12);
    }
}
