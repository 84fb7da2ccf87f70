//! Neural backward solver: at each step `k = N−1, …, 0` a control network is
//! trained to maximize the next-step value of the transition (minus a penalty
//! for exceeding the drawdown budget), then a value network is regressed on
//! the resulting next-step values.
//!
//! Training inputs are drawn from `ρ ~ U(q, 1)` and `B̂_k ~ N(b₀, Σ₀ − Σ_k)`;
//! the innovation is `ε̃ ~ N(0, Σ_k + Γ)` and the transitions are
//!
//! ```text
//! ρ' = min(1, ρ(1 + Σᵢ aⁱ(e^{bⁱ+ε̃ⁱ} − 1)))      B̂' = b + K_{k+1} ε̃
//! ```

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dp_grid::PriorMode;
use crate::error::{Error, Result};
use crate::filter::{bhat_marginal, kalman_gain, sigma_closed_form};
use crate::linalg;
use crate::market::{admissible_budget, project_feasible, MarketParams};
use crate::neural::{AdamState, DenseNet, Init, Tape};
use crate::policy::Policy;
use crate::rng::{substream, StreamRng};

pub const STACK_FORMAT: &str = "ddlearn-policy-stack";
pub const STACK_VERSION: u32 = 1;

/// Hinge penalty `K · max(|a|₁ − (1 − q/r), 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub k: f64,
}

impl Default for PenaltySpec {
    fn default() -> Self {
        Self { k: 0.3 }
    }
}

pub fn penalty(a: &[f64], r: f64, spec: &PenaltySpec, q: f64) -> f64 {
    let excess = a.iter().map(|w| w.abs()).sum::<f64>() - (1.0 - q / r);
    spec.k * excess.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Epochs at step `N−1`.
    pub epochs_last: usize,
    /// Epochs at steps `0..N−1`.
    pub epochs: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub validation_size: usize,
    pub lr_control_last: f64,
    pub lr_control: f64,
    pub lr_value_last: f64,
    pub lr_value: f64,
    pub l2: f64,
    pub penalty: PenaltySpec,
    /// Start step `k` from the networks trained at `k + 1`.
    pub warm_start: bool,
    /// Innovation draws per training sample.
    pub eps_draws: usize,
    pub control_init: Init,
    pub value_init: Init,
    /// Upper end of the value network output range; `None` uses `2/p`.
    pub value_output_scale: Option<f64>,
    /// Train the value networks for the zero control (diagnostic).
    pub force_zero_control: bool,
    pub prior: PriorMode,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs_last: 2000,
            epochs: 500,
            batch_size: 300,
            batches_per_epoch: 100,
            validation_size: 1000,
            lr_control_last: 5e-3,
            lr_control: 6.25e-4,
            lr_value_last: 1e-3,
            lr_value: 5e-4,
            l2: 1e-3,
            penalty: PenaltySpec::default(),
            warm_start: true,
            eps_draws: 1,
            control_init: Init::Uniform01,
            value_init: Init::HeUniform,
            value_output_scale: None,
            force_zero_control: false,
            prior: PriorMode::Bayesian,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    /// Epoch budgets divided by `factor` (at least one epoch each).
    pub fn reduced(mut self, factor: usize) -> Self {
        self.epochs_last = (self.epochs_last / factor).max(1);
        self.epochs = (self.epochs / factor).max(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.epochs_last, self.epochs, self.batch_size, self.batches_per_epoch, self.validation_size, self.eps_draws];
        let rates = [self.lr_control_last, self.lr_control, self.lr_value_last, self.lr_value];
        if counts.contains(&0) || rates.iter().any(|r| !(*r > 0.0)) || !(self.penalty.k > 0.0) || self.l2 < 0.0 {
            return Err(Error::Parameter("training sizes, learning rates and penalty must be positive".into()));
        }
        Ok(())
    }
}

/// Validation diagnostics of one backward step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub k: usize,
    pub control_loss: f64,
    pub value_loss: f64,
    /// Control loss of the warm-start networks before training (`None` without warm start).
    pub warm_control_loss: Option<f64>,
    /// Share of validation states with `|a|₁ > 1 − q/r + 0.01`.
    pub infeasible_fraction: f64,
    /// Largest decrease of the value network along a probe grid in `r` at `b₀`.
    pub max_value_decrease: f64,
}

/// Per-step sampling laws and filter gain.
struct StepLaw {
    d: usize,
    q: f64,
    p: f64,
    b0: DVector<f64>,
    bhat_factor: DMatrix<f64>,
    innov_factor: DMatrix<f64>,
    gain: DMatrix<f64>,
}

impl StepLaw {
    fn new(params: &MarketParams, prior: PriorMode, k: usize) -> Result<Self> {
        let d = params.d;
        let (bhat_factor, innov_cov, gain) = match prior {
            PriorMode::Bayesian => {
                let sigma_k = sigma_closed_form(&params.sigma0, &params.gamma, k)?;
                let gain = kalman_gain(&sigma_k, &params.gamma)?;
                (
                    linalg::psd_sqrt(&bhat_marginal(&params.sigma0, &params.gamma, k)?),
                    sigma_k + &params.gamma,
                    gain,
                )
            }
            PriorMode::Dirac => (DMatrix::zeros(d, d), params.gamma.clone(), DMatrix::zeros(d, d)),
        };
        Ok(Self {
            d,
            q: params.q,
            p: params.p,
            b0: params.b0.clone(),
            bhat_factor,
            innov_factor: linalg::cholesky_lower(&innov_cov, "innovation covariance")?,
            gain,
        })
    }

    /// One training sample: `(ρ, b, ε̃)` packed as `[ρ, b.., ε..]`.
    fn sample(&self, rng: &mut StreamRng, out: &mut Vec<f64>) {
        let d = self.d;
        out.clear();
        out.push(rng.random_range(self.q..1.0));
        let xi: Vec<f64> = (0..2 * d).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..d {
            out.push(self.b0[i] + (0..d).map(|j| self.bhat_factor[(i, j)] * xi[j]).sum::<f64>());
        }
        for i in 0..d {
            out.push((0..=i).map(|j| self.innov_factor[(i, j)] * xi[d + j]).sum::<f64>());
        }
    }

    fn next_b(&self, b: &[f64], eps: &[f64], out: &mut [f64]) {
        for i in 0..self.d {
            out[i] = b[i] + (0..self.d).map(|j| self.gain[(i, j)] * eps[j]).sum::<f64>();
        }
    }
}

/// `V̂_{k+1}`: terminal utility or a trained value network.
enum NextValue<'a> {
    Terminal { p: f64 },
    Net(&'a DenseNet),
}

impl NextValue<'_> {
    /// Value at `(ρ', b')` and its derivative in `ρ'`.
    fn eval(&self, input: &[f64], tape: &mut Tape, dinput: &mut [f64]) -> (f64, f64) {
        match self {
            NextValue::Terminal { p } => {
                let r = input[0].max(1e-8);
                (r.powf(*p) / p, r.powf(p - 1.0))
            }
            NextValue::Net(net) => {
                net.forward_tape(input, tape);
                let v = tape.output()[0];
                net.backward(tape, &[1.0], None, Some(dinput));
                (v, dinput[0])
            }
        }
    }

    fn value(&self, input: &[f64], tape: &mut Tape) -> f64 {
        match self {
            NextValue::Terminal { p } => input[0].max(1e-8).powf(*p) / p,
            NextValue::Net(net) => {
                net.forward_tape(input, tape);
                tape.output()[0]
            }
        }
    }
}

struct Scratch {
    sample: Vec<f64>,
    input: Vec<f64>,
    next_input: Vec<f64>,
    growth: Vec<f64>,
    dinput: Vec<f64>,
    dout: Vec<f64>,
    tape_a: Tape,
    tape_v: Tape,
}

impl Scratch {
    fn new(d: usize) -> Self {
        Self {
            sample: Vec::with_capacity(2 * d + 1),
            input: vec![0.0; d + 1],
            next_input: vec![0.0; d + 1],
            growth: vec![0.0; d],
            dinput: vec![0.0; d + 1],
            dout: vec![0.0; d],
            tape_a: Tape::default(),
            tape_v: Tape::default(),
        }
    }

    /// Unpacks the drawn sample into network input, growth increments and `b'`.
    fn prepare(&mut self, law: &StepLaw) {
        let d = law.d;
        let (rho, rest) = self.sample.split_first().unwrap();
        let (b, eps) = rest.split_at(d);
        self.input[0] = *rho;
        self.input[1..].copy_from_slice(b);
        for i in 0..d {
            self.growth[i] = (b[i] + eps[i]).exp_m1();
        }
        law.next_b(b, eps, &mut self.next_input[1..]);
    }
}

/// Control loss of one sample and, when `backprop` is set, its gradient into `grad`.
fn control_sample(
    control: &DenseNet,
    next: &NextValue<'_>,
    law: &StepLaw,
    pen: &PenaltySpec,
    s: &mut Scratch,
    backprop: Option<(&mut [f64], f64)>,
) -> (f64, bool) {
    let d = law.d;
    let rho = s.input[0];
    control.forward_tape(&s.input, &mut s.tape_a);
    let a = s.tape_a.output();
    let gross = 1.0 + a.iter().zip(&s.growth).map(|(w, g)| w * g).sum::<f64>();
    let uncapped = rho * gross;
    s.next_input[0] = uncapped.min(1.0);
    let (v, dv) = next.eval(&s.next_input, &mut s.tape_v, &mut s.dinput);
    // A new maximum rescales the value by the running-maximum growth.
    let (v, dv) = if uncapped < 1.0 {
        (v, dv)
    } else {
        let lift = uncapped.powf(law.p);
        (lift * v, law.p * lift / uncapped * v)
    };
    let budget = 1.0 - law.q / rho;
    let l1: f64 = a.iter().map(|w| w.abs()).sum();
    let violated = l1 > budget;
    let loss = penalty(a, rho, pen, law.q) - v;
    let infeasible = l1 > budget + 0.01;
    if let Some((grad, scale)) = backprop {
        let dr = dv * rho;
        for i in 0..d {
            let dpen = if violated { pen.k * a[i].signum() } else { 0.0 };
            s.dout[i] = scale * (dpen - dr * s.growth[i]);
        }
        control.backward(&s.tape_a, &s.dout, Some(grad), None);
    }
    (loss, infeasible)
}

/// Regression target `V̂_{k+1}(ρ', b')` under the (projected) trained control.
fn value_target(control: Option<&DenseNet>, next: &NextValue<'_>, law: &StepLaw, s: &mut Scratch) -> f64 {
    let rho = s.input[0];
    let gross = match control {
        Some(c) => {
            c.forward_tape(&s.input, &mut s.tape_a);
            let a = project_feasible(s.tape_a.output(), admissible_budget(law.q, rho).unwrap_or(0.0));
            1.0 + a.iter().zip(&s.growth).map(|(w, g)| w * g).sum::<f64>()
        }
        None => 1.0,
    };
    let uncapped = rho * gross;
    s.next_input[0] = uncapped.min(1.0);
    uncapped.max(1.0).powf(law.p) * next.value(&s.next_input, &mut s.tape_v)
}

fn fresh_nets(params: &MarketParams, cfg: &TrainingConfig) -> (DenseNet, DenseNet) {
    let d = params.d;
    let q = params.q;
    let mut shift = vec![0.5 * (1.0 + q)];
    let mut scale = vec![12f64.sqrt() / (1.0 - q)];
    let spread = bhat_marginal(&params.sigma0, &params.gamma, params.n_steps).ok();
    for i in 0..d {
        shift.push(params.b0[i]);
        let sd = match (cfg.prior, &spread) {
            (PriorMode::Bayesian, Some(m)) => m[(i, i)].max(0.0).sqrt(),
            _ => 0.0,
        };
        scale.push(if sd > 0.0 { 1.0 / sd } else { 1.0 });
    }
    let mut rng = substream(cfg.seed, "init", 0);
    let control = DenseNet::control(d, cfg.control_init, cfg.l2, &mut rng)
        .with_input_standardization(shift.clone(), scale.clone());
    let vscale = cfg.value_output_scale.unwrap_or(2.0 / params.p);
    let value = DenseNet::value(d, cfg.value_init, cfg.l2, &mut rng)
        .with_input_standardization(shift, scale)
        .with_output_map(0.0, vscale);
    (control, value)
}

fn validation_control_loss(control: &DenseNet, next: &NextValue<'_>, law: &StepLaw, cfg: &TrainingConfig, rng: &mut StreamRng, s: &mut Scratch) -> (f64, f64) {
    let mut total = 0.0;
    let mut bad = 0usize;
    for _ in 0..cfg.validation_size {
        law.sample(rng, &mut s.sample);
        s.prepare(law);
        let (l, infeasible) = control_sample(control, next, law, &cfg.penalty, s, None);
        total += l;
        bad += infeasible as usize;
    }
    let n = cfg.validation_size as f64;
    (total / n, bad as f64 / n)
}

/// Trains the control and value networks of step `k`.
pub fn train_step(
    k: usize,
    value_next: Option<&DenseNet>,
    warm: Option<(&DenseNet, &DenseNet)>,
    cfg: &TrainingConfig,
    params: &MarketParams,
) -> Result<(DenseNet, DenseNet, StepReport)> {
    cfg.validate()?;
    if k >= params.n_steps {
        return Err(Error::Parameter(format!("step {k} outside 0..{}", params.n_steps)));
    }
    let law = StepLaw::new(params, cfg.prior, k)?;
    let next = match value_next {
        Some(net) => NextValue::Net(net),
        None => NextValue::Terminal { p: params.p },
    };
    let last = k + 1 == params.n_steps;
    let (epochs, lr_c, lr_v) = if last {
        (cfg.epochs_last, cfg.lr_control_last, cfg.lr_value_last)
    } else {
        (cfg.epochs, cfg.lr_control, cfg.lr_value)
    };
    let (mut control, mut value) = match warm {
        Some((c, v)) if cfg.warm_start => (c.clone(), v.clone()),
        _ => fresh_nets(params, cfg),
    };
    let mut s = Scratch::new(params.d);
    let mut rng = substream(cfg.seed, "solver", k as u64);
    let mut val_rng = substream(cfg.seed, "validation", k as u64);
    let diverged = |what: &str, v: f64| Error::Diverged { step: k, detail: format!("{what} loss is {v}") };

    let warm_control_loss = if warm.is_some() && cfg.warm_start && !cfg.force_zero_control {
        Some(validation_control_loss(&control, &next, &law, cfg, &mut substream(cfg.seed, "warm-check", k as u64), &mut s).0)
    } else {
        None
    };

    // controls
    let mut control_loss = f64::NAN;
    let mut infeasible_fraction = 0.0;
    if !cfg.force_zero_control {
        let mut adam = AdamState::new(control.n_params(), lr_c);
        let mut g = vec![0.0; control.n_params()];
        let n = (cfg.batch_size * cfg.eps_draws) as f64;
        for _ in 0..epochs {
            for _ in 0..cfg.batches_per_epoch {
                g.iter_mut().for_each(|v| *v = 0.0);
                let mut total = 0.0;
                for _ in 0..cfg.batch_size {
                    law.sample(&mut rng, &mut s.sample);
                    for draw in 0..cfg.eps_draws {
                        if draw > 0 {
                            // fresh innovation for the same state
                            let mut extra = Vec::new();
                            law.sample(&mut rng, &mut extra);
                            let d = params.d;
                            s.sample[1 + d..].copy_from_slice(&extra[1 + d..]);
                        }
                        s.prepare(&law);
                        let (l, _) = control_sample(&control, &next, &law, &cfg.penalty, &mut s, Some((&mut g, 1.0 / n)));
                        total += l;
                    }
                }
                if !total.is_finite() {
                    return Err(diverged("control", total));
                }
                control.add_l2_grad(&mut g);
                adam.step(&mut control.params, &g);
            }
        }
        let (l, frac) = validation_control_loss(&control, &next, &law, cfg, &mut val_rng, &mut s);
        if !l.is_finite() {
            return Err(diverged("control validation", l));
        }
        control_loss = l;
        infeasible_fraction = frac;
    }
    let trained_control = (!cfg.force_zero_control).then_some(&control);

    // value function
    let mut adam = AdamState::new(value.n_params(), lr_v);
    let mut g = vec![0.0; value.n_params()];
    let mut tape = Tape::default();
    let n = cfg.batch_size as f64;
    for _ in 0..epochs {
        for _ in 0..cfg.batches_per_epoch {
            g.iter_mut().for_each(|v| *v = 0.0);
            let mut total = 0.0;
            for _ in 0..cfg.batch_size {
                law.sample(&mut rng, &mut s.sample);
                s.prepare(&law);
                let y = value_target(trained_control, &next, &law, &mut s);
                value.forward_tape(&s.input, &mut tape);
                let resid = tape.output()[0] - y;
                total += resid * resid;
                value.backward(&tape, &[2.0 * resid / n], Some(&mut g), None);
            }
            if !total.is_finite() {
                return Err(diverged("value", total));
            }
            value.add_l2_grad(&mut g);
            adam.step(&mut value.params, &g);
        }
    }
    let mut value_loss = 0.0;
    for _ in 0..cfg.validation_size {
        law.sample(&mut val_rng, &mut s.sample);
        s.prepare(&law);
        let y = value_target(trained_control, &next, &law, &mut s);
        value.forward_tape(&s.input, &mut tape);
        value_loss += (tape.output()[0] - y).powi(2);
    }
    value_loss /= cfg.validation_size as f64;
    if !value_loss.is_finite() {
        return Err(diverged("value validation", value_loss));
    }

    let mut input = params.b0.iter().copied().collect::<Vec<_>>();
    input.insert(0, params.q);
    let mut max_value_decrease = 0.0f64;
    let mut prev = f64::NEG_INFINITY;
    for i in 0..=20 {
        input[0] = params.q + (1.0 - params.q) * i as f64 / 20.0;
        value.forward_tape(&input, &mut tape);
        let v = tape.output()[0];
        max_value_decrease = max_value_decrease.max(prev - v);
        prev = v;
    }

    Ok((
        control,
        value,
        StepReport { k, control_loss, value_loss, warm_control_loss, infeasible_fraction, max_value_decrease },
    ))
}

/// Trained control and value networks for every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyStack {
    pub format: String,
    pub version: u32,
    pub d: usize,
    pub n_steps: usize,
    pub p: f64,
    pub q: f64,
    pub params_hash: String,
    pub config: TrainingConfig,
    #[serde(skip)]
    pub controls: Vec<DenseNet>,
    #[serde(skip)]
    pub values: Vec<DenseNet>,
    pub reports: Vec<StepReport>,
}

/// FNV-1a hash of the parameters' JSON form, as hex.
pub fn params_hash(params: &MarketParams) -> String {
    let bytes = serde_json::to_vec(params).unwrap_or_default();
    let h = bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3));
    format!("{h:016x}")
}

/// Runs the backward loop `k = N−1, …, 0`.
pub fn solve(params: &MarketParams, cfg: &TrainingConfig) -> Result<PolicyStack> {
    solve_with_progress(params, cfg, |_| {})
}

pub fn solve_with_progress<F: FnMut(&StepReport)>(params: &MarketParams, cfg: &TrainingConfig, mut progress: F) -> Result<PolicyStack> {
    params.validate()?;
    cfg.validate()?;
    let n = params.n_steps;
    let mut controls: Vec<Option<DenseNet>> = vec![None; n];
    let mut values: Vec<Option<DenseNet>> = vec![None; n];
    let mut reports = Vec::with_capacity(n);
    for k in (0..n).rev() {
        let next = values.get(k + 1).and_then(Option::as_ref);
        let warm = match (controls.get(k + 1).and_then(Option::as_ref), next) {
            (Some(c), Some(v)) => Some((c, v)),
            _ => None,
        };
        let (c, v, rep) = train_step(k, next, warm, cfg, params)?;
        progress(&rep);
        controls[k] = Some(c);
        values[k] = Some(v);
        reports.push(rep);
    }
    reports.reverse();
    Ok(PolicyStack {
        format: STACK_FORMAT.to_string(),
        version: STACK_VERSION,
        d: params.d,
        n_steps: n,
        p: params.p,
        q: params.q,
        params_hash: params_hash(params),
        config: cfg.clone(),
        controls: controls.into_iter().map(Option::unwrap).collect(),
        values: values.into_iter().map(Option::unwrap).collect(),
        reports,
    })
}

impl PolicyStack {
    pub fn value(&self, k: usize, r: f64, bhat: &[f64]) -> f64 {
        let mut x = Vec::with_capacity(self.d + 1);
        x.push(r);
        x.extend_from_slice(bhat);
        let mut tape = Tape::default();
        self.values[k].forward_tape(&x, &mut tape);
        tape.output()[0]
    }

    /// Writes `manifest.json` and `step_XX_{control,value}.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for k in 0..self.n_steps {
            self.controls[k].save(&dir.join(format!("step_{k:02}_control.json")))?;
            self.values[k].save(&dir.join(format!("step_{k:02}_value.json")))?;
        }
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut stack: Self = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        if stack.format != STACK_FORMAT || stack.version != STACK_VERSION {
            return Err(Error::Parameter(format!("unsupported policy stack {} v{}", stack.format, stack.version)));
        }
        for k in 0..stack.n_steps {
            stack.controls.push(DenseNet::load(&dir.join(format!("step_{k:02}_control.json")))?);
            stack.values.push(DenseNet::load(&dir.join(format!("step_{k:02}_value.json")))?);
        }
        Ok(stack)
    }
}

impl Policy for PolicyStack {
    fn dim(&self) -> usize {
        self.d
    }

    fn weights(&self, k: usize, r: f64, bhat: &[f64]) -> Vec<f64> {
        if self.config.force_zero_control {
            return vec![0.0; self.d];
        }
        let mut x = Vec::with_capacity(self.d + 1);
        x.push(r);
        x.extend_from_slice(bhat);
        let mut tape = Tape::default();
        self.controls[k].forward_tape(&x, &mut tape);
        tape.output().to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn penalty_examples() {
        let spec = PenaltySpec { k: 0.3 };
        assert_eq!(penalty(&[0.1, 0.1, 0.1], 1.0, &spec, 0.7), 0.0);
        assert_eq!(penalty(&[0.0; 3], 0.8, &spec, 0.7), 0.0);
        let v = penalty(&[0.2, 0.15, 0.05], 1.0, &spec, 0.7);
        let expected = 0.3 * ((0.2f64 + 0.15 + 0.05) - (1.0 - 0.7));
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.03).abs() < 1e-12);
    }

    #[test]
    fn reduced_budget_and_validation() {
        let c = TrainingConfig::default().reduced(10);
        assert_eq!((c.epochs_last, c.epochs), (200, 50));
        let bad = TrainingConfig { batch_size: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
