//! Function approximation through operator compilation: a map `F: Rᵖ → R^q`
//! becomes the causal operator `Φ(u)(t) = (t − 1)₊ F(u(1))` on `[0, 2]`,
//! evaluated on ramps `u_ξ(t) = tξ`, so that `Φ(u_ξ)(2) = F(ξ)`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::compile::{compile_operator_report, CompileConfig, CompileOutcome, CompiledOscillator};
use crate::error::{Error, Result};
use crate::operators::TargetOperator;
use crate::signal::{InputFamily, Signal, TimeGrid};

/// Interval length of the ramp inputs.
pub const RAMP_T_END: f64 = 2.0;
/// Time at which the ramp is read.
pub const RAMP_READ_TIME: f64 = 1.0;

/// Ramps `tξ` with `ξ` uniform in the box `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRampFamily {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub t_end: f64,
    pub n_steps: usize,
    pub seed: u64,
}

impl LinearRampFamily {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, n_steps: usize, seed: u64) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() || lo.iter().zip(&hi).any(|(a, b)| !(a <= b)) {
            return Err(Error::InvalidParameter("box needs matching, ordered bounds".into()));
        }
        TimeGrid::new(0.0, RAMP_T_END, n_steps)?;
        Ok(Self {
            lo,
            hi,
            t_end: RAMP_T_END,
            n_steps,
            seed,
        })
    }

    pub fn point(&self, index: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| if a == b { *a } else { rng.gen_range(*a..=*b) })
            .collect()
    }

    pub fn ramp(&self, xi: &[f64]) -> Result<Signal> {
        if xi.len() != self.lo.len() {
            return Err(Error::DimensionMismatch(format!(
                "point has {} components, the box has {}",
                xi.len(),
                self.lo.len()
            )));
        }
        Signal::from_fn(self.grid(), xi.len(), |t, row| {
            for (r, x) in row.iter_mut().zip(xi) {
                *r = t * x;
            }
        })
    }
}

impl InputFamily for LinearRampFamily {
    fn dim(&self) -> usize {
        self.lo.len()
    }

    fn grid(&self) -> TimeGrid {
        TimeGrid {
            t_start: 0.0,
            t_end: self.t_end,
            n_steps: self.n_steps,
        }
    }

    fn sample(&self, index: u64) -> Signal {
        self.ramp(&self.point(index)).expect("point matches the box")
    }

    fn sup_bound(&self) -> f64 {
        let m = self.lo.iter().chain(&self.hi).fold(0.0f64, |m, x| m.max(x.abs()));
        self.t_end * m
    }
}

type PointFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// `Φ(u)(t) = 0` for `t < 1` and `(t − 1)F(u(1))` afterwards.
pub fn function_operator(name: &str, p: usize, q: usize, f: Arc<PointFn>) -> TargetOperator {
    TargetOperator::new(format!("function({name})"), p, q, move |u| {
        let g = *u.grid();
        let at = u.eval(RAMP_READ_TIME.min(g.t_end))?;
        let y = f(&at);
        if y.len() != q {
            return Err(Error::DimensionMismatch(format!("function returned {} values, expected {q}", y.len())));
        }
        Signal::from_fn(g, q, |t, row| {
            let s = (t - RAMP_READ_TIME).max(0.0);
            for (r, v) in row.iter_mut().zip(&y) {
                *r = s * v;
            }
        })
    })
}

/// Built-in point functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunctionSpec {
    Constant { value: Vec<f64> },
    Identity,
    /// Product of all components.
    Product,
}

impl FunctionSpec {
    pub fn output_dim(&self, p: usize) -> usize {
        match self {
            FunctionSpec::Constant { value } => value.len(),
            FunctionSpec::Identity => p,
            FunctionSpec::Product => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FunctionSpec::Constant { .. } => "constant",
            FunctionSpec::Identity => "identity",
            FunctionSpec::Product => "product",
        }
    }

    pub fn closure(&self) -> Arc<PointFn> {
        match self.clone() {
            FunctionSpec::Constant { value } => Arc::new(move |_| value.clone()),
            FunctionSpec::Identity => Arc::new(|x| x.to_vec()),
            FunctionSpec::Product => Arc::new(|x| vec![x.iter().product()]),
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        (self.closure())(x)
    }
}

/// A compiled network read at `t = 2` on ramp inputs.
#[derive(Debug, Clone)]
pub struct FunctionApproximator {
    pub compiled: CompiledOscillator,
    pub family: LinearRampFamily,
}

impl FunctionApproximator {
    pub fn eval(&self, xi: &[f64]) -> Result<Vec<f64>> {
        let z = self.compiled.run(&self.family.ramp(xi)?)?;
        Ok(z.at(z.len() - 1).to_vec())
    }

    /// Largest deviation from `f` over `points`.
    pub fn probe(&self, f: &PointFn, points: &[Vec<f64>]) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for x in points {
            let got = self.eval(x)?;
            for (a, b) in got.iter().zip(f(x)) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    }
}

/// `count` points on a regular grid of the box (about `count^(1/p)` per axis).
pub fn probe_points(lo: &[f64], hi: &[f64], count: usize) -> Vec<Vec<f64>> {
    let p = lo.len();
    let per = ((count as f64).powf(1.0 / p as f64).round() as usize).max(2);
    let mut out = Vec::new();
    let mut idx = vec![0usize; p];
    loop {
        out.push(
            (0..p)
                .map(|i| lo[i] + (hi[i] - lo[i]) * idx[i] as f64 / (per - 1) as f64)
                .collect(),
        );
        let mut i = 0;
        loop {
            if i == p {
                return out;
            }
            idx[i] += 1;
            if idx[i] < per {
                break;
            }
            idx[i] = 0;
            i += 1;
        }
    }
}

/// Compiles `f` over ramps with `ξ` in `[lo, hi]` at total error `eps`; the
/// outcome keeps the stage reports when a budget is missed.
pub fn approximate_function_report(
    name: &str,
    f: Arc<PointFn>,
    q: usize,
    family: &LinearRampFamily,
    eps: f64,
    config: &CompileConfig,
) -> Result<CompileOutcome> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter("ε must be > 0".into()));
    }
    let op = function_operator(name, family.dim(), q, f);
    let config = CompileConfig {
        eps_total: Some(eps),
        ..config.clone()
    };
    compile_operator_report(&op, family, &config)
}

pub fn approximate_function(
    name: &str,
    f: Arc<PointFn>,
    q: usize,
    family: &LinearRampFamily,
    eps: f64,
    config: &CompileConfig,
) -> Result<FunctionApproximator> {
    let compiled = approximate_function_report(name, f, q, family, eps, config)?.into_result()?;
    Ok(FunctionApproximator {
        compiled,
        family: family.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::{EmulatorOptions, FitOptions};
    use crate::operators::check_causality;

    #[test]
    fn ramps_and_bound() {
        let fam = LinearRampFamily::new(vec![-1.0, 0.0], vec![1.0, 0.5], 100, 3).unwrap();
        assert_eq!(fam.sup_bound(), 2.0);
        let u = fam.sample(4);
        let xi = fam.point(4);
        assert!(xi[0].abs() <= 1.0 && (0.0..=0.5).contains(&xi[1]));
        assert_eq!(u.at(100), &[2.0 * xi[0], 2.0 * xi[1]][..]);
        assert_eq!(u.at(0), &[0.0, 0.0][..]);
        assert!(LinearRampFamily::new(vec![1.0], vec![0.0], 10, 0).is_err());
    }

    #[test]
    fn operator_reads_the_ramp_at_one() {
        let fam = LinearRampFamily::new(vec![-1.0, -1.0], vec![1.0, 1.0], 200, 1).unwrap();
        let op = function_operator("product", 2, 1, FunctionSpec::Product.closure());
        let u = fam.ramp(&[0.5, -0.6]).unwrap();
        let out = op.apply(&u).unwrap();
        assert!((out.at(200)[0] + 0.3).abs() < 1e-12);
        assert_eq!(out.at(50)[0], 0.0);
        assert!(check_causality(&op, &fam, 8, 2).unwrap().passed);
    }

    #[test]
    fn probe_grid_covers_corners() {
        let pts = probe_points(&[-1.0, -1.0], &[1.0, 1.0], 16);
        assert_eq!(pts.len(), 16);
        assert!(pts.contains(&vec![-1.0, -1.0]) && pts.contains(&vec![1.0, 1.0]));
        assert_eq!(probe_points(&[-1.0], &[1.0], 16).len(), 16);
    }

    #[test]
    fn constant_function_is_reproduced() {
        let fam = LinearRampFamily::new(vec![-1.0], vec![1.0], 200, 5).unwrap();
        let config = CompileConfig {
            validation_inputs: 4,
            fit: FitOptions {
                samples: 32,
                time_stride: 10,
                hidden: 32,
                max_hidden: 64,
                ..Default::default()
            },
            emulator: EmulatorOptions {
                fd_fractions: vec![1.0 / 20.0, 1.0 / 40.0],
                xi_ladder: vec![30.0, 40.0],
                eps_fraction: 0.02,
                ..Default::default()
            },
            ..Default::default()
        };
        let spec = FunctionSpec::Constant { value: vec![0.3] };
        let approx = approximate_function("constant", spec.closure(), 1, &fam, 0.2, &config).unwrap();
        for x in [-1.0, 0.2, 0.9] {
            let v = approx.eval(&[x]).unwrap()[0];
            assert!((v - 0.3).abs() <= 0.2, "{x}: {v}");
        }
    }
}
