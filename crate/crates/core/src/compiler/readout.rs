//! Shallow readout networks `x ↦ Σ σ(Λx + γ)` fitted by random features and
//! ridge regression against the readout map of a reconstruction plan.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FIT_BASE;
use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::integrate::IntegratorConfig;
use crate::linalg::{rowmajor, spectral_norm, vector};
use crate::reconstruction::PsiOracle;
use crate::signal::{InputFamily, Signal};
use crate::transform::{eval_bank, eval_bank_exact, FrequencyBank};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutNet {
    /// `q × H`.
    #[serde(with = "rowmajor")]
    pub sigma: DMatrix<f64>,
    /// `H × d`.
    #[serde(with = "rowmajor")]
    pub lambda: DMatrix<f64>,
    #[serde(with = "vector")]
    pub gamma: DVector<f64>,
    pub act: Activation,
}

impl ReadoutNet {
    /// `H` hidden units on `d` inputs and `q` outputs with every entry uniform in `[−scale, scale]`.
    pub fn random(h: usize, d: usize, q: usize, scale: f64, act: Activation, seed: u64) -> Result<Self> {
        if !(scale >= 0.0) {
            return Err(Error::InvalidParameter("scale must be >= 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-scale..=scale));
        let sigma = draw(q, h);
        let lambda = draw(h, d);
        let gamma = DVector::from_column_slice(draw(h, 1).as_slice());
        Self::new(sigma, lambda, gamma, act)
    }

    pub fn new(sigma: DMatrix<f64>, lambda: DMatrix<f64>, gamma: DVector<f64>, act: Activation) -> Result<Self> {
        let net = Self {
            sigma,
            lambda,
            gamma,
            act,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.lambda.nrows();
        if h == 0 || self.sigma.ncols() != h || self.gamma.len() != h {
            return Err(Error::DimensionMismatch(format!(
                "readout net: Σ is {}x{}, Λ is {}x{}, γ has {}",
                self.sigma.nrows(),
                self.sigma.ncols(),
                h,
                self.lambda.ncols(),
                self.gamma.len()
            )));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.lambda.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let pre = &self.lambda * DVector::from_column_slice(x) + &self.gamma;
        let hid = pre.map(|v| self.act.eval(v));
        (&self.sigma * hid).as_slice().to_vec()
    }

    /// `Σσ(γ)`, the output at `x = 0`.
    pub fn offset(&self) -> DVector<f64> {
        &self.sigma * self.gamma.map(|v| self.act.eval(v))
    }

    /// `‖Σ‖·‖Λ‖·sup|σ'|`.
    pub fn lipschitz(&self) -> f64 {
        spectral_norm(&self.sigma) * spectral_norm(&self.lambda) * self.act.deriv_bound()
    }

    /// Pointwise evaluation along a signal.
    pub fn eval_signal(&self, x: &Signal) -> Result<Signal> {
        if x.dim() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "readout expects {} inputs, signal has {}",
                self.input_dim(),
                x.dim()
            )));
        }
        let xm = DMatrix::from_row_slice(x.len(), x.dim(), x.values());
        let out = self.forward(&xm);
        let mut vals = Vec::with_capacity(out.len());
        for k in 0..out.nrows() {
            vals.extend(out.row(k).iter());
        }
        Signal::new(*x.grid(), self.output_dim(), vals)
    }

    /// Rows of `x` through the network.
    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        hidden_features(x, &self.lambda, &self.gamma, self.act) * self.sigma.transpose()
    }
}

fn hidden_features(x: &DMatrix<f64>, lambda: &DMatrix<f64>, gamma: &DVector<f64>, act: Activation) -> DMatrix<f64> {
    let mut f = x * lambda.transpose();
    for mut row in f.row_iter_mut() {
        for (v, g) in row.iter_mut().zip(gamma.iter()) {
            *v = act.eval(*v + g);
        }
    }
    f
}

/// Where the transform values fed to the readout come from.
#[derive(Debug, Clone, Copy)]
pub enum BetaSource<'a> {
    /// Exact transforms at the given positive frequencies.
    Exact(&'a [f64]),
    /// A calibrated oscillator bank.
    Bank(&'a FrequencyBank, &'a IntegratorConfig),
}

impl BetaSource<'_> {
    /// Transform values and the `t²/4` channel along `u`.
    pub fn features(&self, u: &Signal) -> Result<Signal> {
        match self {
            BetaSource::Exact(w) => eval_bank_exact(w, u),
            BetaSource::Bank(b, cfg) => eval_bank(b, u, cfg),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub hidden: usize,
    /// Width cap when the width is doubled after a stalled fit.
    pub max_hidden: usize,
    /// Ridge weight on the mean-squared loss.
    pub ridge: f64,
    /// Number of training inputs.
    pub samples: usize,
    /// Training pairs are taken every `time_stride` grid points.
    pub time_stride: usize,
    pub holdout_frac: f64,
    /// Largest centred pre-activation magnitude on the training set.
    pub preact_span: f64,
    /// Amplitude of the random part of `γ`.
    pub bias_jitter: f64,
    pub act: Activation,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            hidden: 256,
            max_hidden: 1024,
            ridge: 1e-8,
            samples: 128,
            time_stride: 20,
            holdout_frac: 0.2,
            preact_span: 2.0,
            bias_jitter: 1.0,
            act: Activation::Tanh,
            seed: 0,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.samples < 2 || self.time_stride == 0 {
            return Err(Error::InvalidParameter(
                "fit needs hidden >= 1, samples >= 2 and time_stride >= 1".into(),
            ));
        }
        if !(self.ridge >= 0.0) || !(self.preact_span > 0.0) || !(self.bias_jitter >= 0.0) || !(0.0..1.0).contains(&self.holdout_frac) {
            return Err(Error::InvalidParameter("bad ridge, feature scale or holdout_frac".into()));
        }
        Ok(())
    }
}

/// `(β, t)` pairs with readout-map targets; rows are grouped by input.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub group: Vec<usize>,
    pub n_inputs: usize,
}

/// Grid indices from the scoring start, every `stride` points, always including the end.
pub fn scored_indices(family: &dyn InputFamily, stride: usize) -> Vec<usize> {
    let g = family.grid();
    let from = family.score_from();
    let k0 = (0..g.len()).find(|k| g.t(*k) >= from - 1e-9).unwrap_or(0);
    let mut ks: Vec<usize> = (k0..g.len()).step_by(stride.max(1)).collect();
    if ks.last() != Some(&g.n_steps) {
        ks.push(g.n_steps);
    }
    ks
}

pub fn training_set(
    po: &PsiOracle,
    family: &dyn InputFamily,
    source: BetaSource<'_>,
    samples: usize,
    stride: usize,
) -> Result<TrainingSet> {
    let ks = scored_indices(family, stride);
    let inputs: Vec<Signal> = family.samples(FIT_BASE, samples);
    training_set_from(po, &inputs, source, &ks)
}

pub fn training_set_from(
    po: &PsiOracle,
    inputs: &[Signal],
    source: BetaSource<'_>,
    ks: &[usize],
) -> Result<TrainingSet> {
    let q = po.op.q;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut group = Vec::new();
    let mut d = 0;
    for (i, u) in inputs.iter().enumerate() {
        let x = source.features(u)?;
        d = x.dim();
        for (&k, y) in ks.iter().zip(po.eval_along(&x, ks)?) {
            xs.extend_from_slice(x.at(k));
            ys.extend(y);
            group.push(i);
        }
    }
    let n = group.len();
    Ok(TrainingSet {
        x: DMatrix::from_row_slice(n, d, &xs),
        y: DMatrix::from_row_slice(n, q, &ys),
        group,
        n_inputs: inputs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub hidden: usize,
    pub ridge: f64,
    pub train_err: f64,
    /// Max residual on the held-out inputs.
    pub fit_err: f64,
    pub train_pairs: usize,
    pub holdout_pairs: usize,
}

/// Random `Λ, γ`: entries of `Λ` uniform in `[−r, r]`, `r` set so the largest centred
/// pre-activation on `x` is `preact_span`; `γ` recentres at the data mean.
pub fn draw_features(x: &DMatrix<f64>, hidden: usize, preact_span: f64, bias_jitter: f64, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = x.ncols();
    let mut lambda = DMatrix::from_fn(hidden, d, |_, _| rng.gen_range(-1.0..=1.0));
    let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
    let mut centred = x.clone();
    for mut row in centred.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(mu.iter()) {
            *v -= m;
        }
    }
    let pre = &centred * lambda.transpose();
    let span = pre.amax();
    let r = if span > 0.0 { preact_span / span } else { 1.0 };
    lambda *= r;
    let shift = &lambda * mu;
    let gamma = DVector::from_fn(hidden, |h, _| bias_jitter * rng.gen_range(-1.0..=1.0) - shift[h]);
    (lambda, gamma)
}

/// Ridge solution `Σ` of `min ‖FΣᵀ − Y‖²/n + λ‖Σ‖²`.
pub fn solve_readout(f: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let n = f.nrows().max(1) as f64;
    let ft = f.transpose();
    let mut a = &ft * f / n;
    for i in 0..a.nrows() {
        a[(i, i)] += ridge;
    }
    let b = &ft * y / n;
    let chol = a.cholesky().ok_or_else(|| {
        Error::Singular("normal equations of the readout fit are singular; raise the ridge weight".into())
    })?;
    Ok(chol.solve(&b).transpose())
}

fn split(set: &TrainingSet, holdout_frac: f64) -> usize {
    let n = set.n_inputs;
    let held = ((n as f64 * holdout_frac).round() as usize).clamp(1, n - 1);
    n - held
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Fits `Σ` for fixed features; training inputs precede the held-out ones.
pub fn fit_with_features(
    set: &TrainingSet,
    lambda: DMatrix<f64>,
    gamma: DVector<f64>,
    opts: &FitOptions,
) -> Result<(ReadoutNet, FitReport)> {
    if set.n_inputs < 2 {
        return Err(Error::InvalidParameter("need at least two training inputs".into()));
    }
    let n_train = split(set, opts.holdout_frac);
    let (tr, ho): (Vec<usize>, Vec<usize>) = (0..set.group.len()).partition(|r| set.group[*r] < n_train);
    let (xt, yt) = (select_rows(&set.x, &tr), select_rows(&set.y, &tr));
    let (xh, yh) = (select_rows(&set.x, &ho), select_rows(&set.y, &ho));
    let f = hidden_features(&xt, &lambda, &gamma, opts.act);
    let sigma = solve_readout(&f, &yt, opts.ridge)?;
    let net = ReadoutNet::new(sigma, lambda, gamma, opts.act)?;
    let report = FitReport {
        hidden: net.hidden(),
        ridge: opts.ridge,
        train_err: max_abs_diff(&(f * net.sigma.transpose()), &yt),
        fit_err: max_abs_diff(&net.forward(&xh), &yh),
        train_pairs: tr.len(),
        holdout_pairs: ho.len(),
    };
    Ok((net, report))
}

/// Draws features on the training rows of `set` and fits `Σ`.
pub fn fit_on(set: &TrainingSet, opts: &FitOptions) -> Result<(ReadoutNet, FitReport)> {
    opts.validate()?;
    let n_train = split(set, opts.holdout_frac);
    let tr: Vec<usize> = (0..set.group.len()).filter(|r| set.group[*r] < n_train).collect();
    let (lambda, gamma) = draw_features(&select_rows(&set.x, &tr), opts.hidden, opts.preact_span, opts.bias_jitter, opts.seed);
    fit_with_features(set, lambda, gamma, opts)
}

/// Fits a readout net of width `hidden` to the readout map of `po` on `samples`
/// inputs of `family`, with transform values from `source`.
pub fn fit_readout(
    po: &PsiOracle,
    family: &dyn InputFamily,
    source: BetaSource<'_>,
    hidden: usize,
    ridge: f64,
    samples: usize,
    seed: u64,
) -> Result<(ReadoutNet, FitReport)> {
    let opts = FitOptions {
        hidden,
        ridge,
        samples,
        seed,
        ..Default::default()
    };
    opts.validate()?;
    let set = training_set(po, family, source, samples, opts.time_stride)?;
    fit_on(&set, &opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::TargetOperator;
    use crate::reconstruction::ReconstructionPlan;
    use crate::signal::InputEnsemble;

    fn small() -> (InputEnsemble, ReconstructionPlan) {
        let e = InputEnsemble {
            n_steps: 200,
            ..Default::default()
        };
        let dw = 2.0 * std::f64::consts::PI / (1.02 * 2.05);
        (e, ReconstructionPlan::from_grid(0.05, dw, 60, 1.0, 0.1).unwrap())
    }

    fn oracle(op: TargetOperator) -> (InputEnsemble, PsiOracle) {
        let (e, plan) = small();
        let po = PsiOracle::new(plan, op, e.grid()).unwrap();
        (e, po)
    }

    #[test]
    fn zero_operator_gives_zero_readout() {
        let (e, po) = oracle(TargetOperator::zero(1));
        let w = po.plan.positive_omegas();
        let (net, rep) = fit_readout(&po, &e, BetaSource::Exact(&w), 32, 1e-8, 16, 1).unwrap();
        assert_eq!(net.sigma.amax(), 0.0);
        assert_eq!(rep.fit_err, 0.0);
    }

    #[test]
    fn same_seed_same_net() {
        let (e, po) = oracle(TargetOperator::integral(1));
        let w = po.plan.positive_omegas();
        let a = fit_readout(&po, &e, BetaSource::Exact(&w), 32, 1e-8, 12, 9).unwrap();
        let b = fit_readout(&po, &e, BetaSource::Exact(&w), 32, 1e-8, 12, 9).unwrap();
        assert_eq!(a.0, b.0);
        let c = fit_readout(&po, &e, BetaSource::Exact(&w), 32, 1e-8, 12, 10).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn linear_target_improves_with_width() {
        let (e, po) = oracle(TargetOperator::delay(1, 0.2).unwrap());
        let w = po.plan.positive_omegas();
        let set = training_set(&po, &e, BetaSource::Exact(&w), 128, 10).unwrap();
        let fit = |h| {
            let o = FitOptions {
                hidden: h,
                seed: 3,
                ..Default::default()
            };
            fit_on(&set, &o).unwrap().1.fit_err
        };
        let (e32, e256) = (fit(32), fit(256));
        assert!(e256 * 2.0 <= e32, "{e32} {e256}");
    }

    #[test]
    fn singular_without_ridge() {
        let f = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let y = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        assert!(matches!(solve_readout(&f, &y, 0.0), Err(Error::Singular(_))));
        assert!(solve_readout(&f, &y, 1e-6).is_ok());
    }

    #[test]
    fn feature_scale_and_eval_agree() {
        let x = DMatrix::from_fn(50, 3, |i, j| (i as f64 * 0.1 + j as f64).sin());
        let (l, g) = draw_features(&x, 16, 2.0, 0.5, 4);
        let mu = DVector::from_fn(3, |j, _| x.column(j).mean());
        let pre = DMatrix::from_fn(50, 16, |i, h| (l.row(h) * (x.row(i).transpose() - &mu))[0]);
        assert!((pre.amax() - 2.0).abs() < 1e-12);
        let net = ReadoutNet::new(DMatrix::from_element(1, 16, 0.5), l, g, Activation::Tanh).unwrap();
        let row: Vec<f64> = x.row(7).iter().copied().collect();
        let direct = net.eval(&row)[0];
        let batched = net.forward(&x)[(7, 0)];
        assert!((direct - batched).abs() < 1e-13);
    }
}
