//! Market model: parameters, wealth and running-maximum dynamics, and the
//! admissible control set imposed by the drawdown floor.
//!
//! Weights are proportions of current wealth invested in each risky asset; the
//! remainder sits in a riskless asset with zero return. With ratio `r = x/z`
//! between wealth and its running maximum, a weight vector `a` keeps wealth
//! above `q·z` for every possible return if and only if `a ≥ 0` and
//! `Σa ≤ 1 − q/r`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Slack used when comparing a weight sum against the admissible budget.
pub const BUDGET_TOL: f64 = 1e-12;

/// Per-step model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    pub d: usize,
    pub n_steps: usize,
    /// Horizon in years.
    pub horizon: f64,
    /// CRRA exponent, `U(x) = x^p / p`.
    pub p: f64,
    /// Drawdown floor: wealth must stay above `q` times its running maximum.
    pub q: f64,
    /// Prior mean of the per-step drift.
    pub b0: DVector<f64>,
    /// Prior covariance of the per-step drift.
    pub sigma0: DMatrix<f64>,
    /// Per-step noise covariance.
    pub gamma: DMatrix<f64>,
    pub x0: f64,
}

impl MarketParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_steps: usize,
        horizon: f64,
        p: f64,
        q: f64,
        b0: DVector<f64>,
        sigma0: DMatrix<f64>,
        gamma: DMatrix<f64>,
        x0: f64,
    ) -> Result<Self> {
        let params = Self {
            d: b0.len(),
            n_steps,
            horizon,
            p,
            q,
            b0,
            sigma0,
            gamma,
            x0,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(m.to_string()));
        if self.d == 0 || self.b0.len() != self.d {
            return bad("drift dimension must be positive and match d");
        }
        if self.n_steps == 0 {
            return bad("N must be at least 1");
        }
        if !(self.horizon > 0.0) {
            return bad("horizon must be positive");
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return bad("p must lie in (0,1)");
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return bad("q must lie in (0,1)");
        }
        if !(self.x0 > 0.0) {
            return bad("x0 must be positive");
        }
        if self.b0.iter().any(|v| !v.is_finite()) {
            return bad("b0 must be finite");
        }
        for (m, name) in [(&self.sigma0, "Sigma0"), (&self.gamma, "Gamma")] {
            linalg::check_square(m, self.d, name)?;
            if !linalg::is_symmetric(m, 1e-12 * m.amax().max(1.0)) {
                return Err(Error::Parameter(format!("{name} must be symmetric")));
            }
            if linalg::min_eigenvalue(m) <= 0.0 {
                return Err(Error::Parameter(format!("{name} must be positive definite")));
            }
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Same market with the prior covariance multiplied by `unc`.
    pub fn with_prior_scale(&self, unc: f64) -> Result<Self> {
        if !(unc > 0.0) {
            return Err(Error::Parameter(format!("unc must be positive, got {unc}")));
        }
        let mut out = self.clone();
        out.sigma0 *= unc;
        Ok(out)
    }

    pub fn with_q(&self, q: f64) -> Result<Self> {
        let mut out = self.clone();
        out.q = q;
        out.validate()?;
        Ok(out)
    }

    pub fn budget_at(&self, r: f64) -> Result<f64> {
        admissible_budget(self.q, r)
    }
}

/// Annualized inputs as they are usually quoted, before time discretization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnualInputs {
    pub horizon: f64,
    pub n_steps: usize,
    pub p: f64,
    pub q: f64,
    pub drift_mean: Vec<f64>,
    pub drift_cov: Vec<Vec<f64>>,
    pub noise_vol: Vec<f64>,
    pub noise_corr: Vec<Vec<f64>>,
    pub x0: f64,
}

impl AnnualInputs {
    /// The three-asset experiment: one-year horizon, 24 rebalancing dates.
    pub fn table2() -> Self {
        Self {
            horizon: 1.0,
            n_steps: 24,
            p: 0.8,
            q: 0.7,
            drift_mean: vec![0.05, 0.025, 0.12],
            drift_cov: vec![
                vec![0.04, 0.0, 0.0],
                vec![0.0, 0.0225, 0.0],
                vec![0.0, 0.0, 0.01],
            ],
            noise_vol: vec![0.08, 0.04, 0.22],
            noise_corr: vec![
                vec![1.0, -0.1, 0.2],
                vec![-0.1, 1.0, -0.25],
                vec![0.2, -0.25, 1.0],
            ],
            x0: 1.0,
        }
    }

    /// `diag(vol) · corr · diag(vol)` after validating the correlation matrix.
    pub fn noise_cov(&self) -> Result<DMatrix<f64>> {
        let d = self.noise_vol.len();
        if let Some(v) = self.noise_vol.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Parameter(format!("noise volatility must be positive, got {v}")));
        }
        let corr = linalg::dmat(&self.noise_corr)?;
        linalg::check_square(&corr, d, "noise correlation")?;
        for i in 0..d {
            if (corr[(i, i)] - 1.0).abs() > 1e-12 {
                return Err(Error::Parameter("correlation matrix must have unit diagonal".into()));
            }
        }
        if !linalg::is_symmetric(&corr, 1e-12) {
            return Err(Error::Parameter("correlation matrix must be symmetric".into()));
        }
        if !linalg::is_psd(&corr, 1e-12) {
            return Err(Error::Parameter("correlation matrix must be positive semi-definite".into()));
        }
        let vol = DMatrix::from_diagonal(&linalg::dvec(&self.noise_vol));
        Ok(&vol * corr * &vol)
    }

    /// Per-step parameters with `Δt = T/N`: drift mean `b·Δt`, drift covariance
    /// `Σ₀·Δt²`, noise covariance `Γ·Δt`.
    pub fn to_params(&self) -> Result<MarketParams> {
        let d = self.drift_mean.len();
        if self.n_steps == 0 || !(self.horizon > 0.0) {
            return Err(Error::Parameter("horizon and N must be positive".into()));
        }
        let dt = self.horizon / self.n_steps as f64;
        let sigma0 = linalg::dmat(&self.drift_cov)?;
        linalg::check_square(&sigma0, d, "drift covariance")?;
        let gamma = self.noise_cov()?;
        linalg::check_square(&gamma, d, "noise covariance")?;
        MarketParams::new(
            self.n_steps,
            self.horizon,
            self.p,
            self.q,
            linalg::dvec(&self.drift_mean) * dt,
            sigma0 * (dt * dt),
            gamma * dt,
            self.x0,
        )
    }
}

/// Wealth `x`, running maximum `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WealthState {
    pub x: f64,
    pub z: f64,
}

impl WealthState {
    pub fn new(x0: f64) -> Self {
        Self { x: x0, z: x0 }
    }

    pub fn ratio(&self) -> f64 {
        self.x / self.z
    }

    pub fn is_valid(&self, q: f64) -> bool {
        self.x > 0.0 && self.x <= self.z && self.x >= q * self.z * (1.0 - BUDGET_TOL)
    }
}

/// Per-step log-returns of the risky assets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnSample(pub Vec<f64>);

impl ReturnSample {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        linalg::dvec(&self.0)
    }
}

/// Maximum total weight allowed at ratio `r`: `1 − q/r`.
pub fn admissible_budget(q: f64, r: f64) -> Result<f64> {
    if !(r >= q * (1.0 - BUDGET_TOL) && r <= 1.0 + BUDGET_TOL) {
        return Err(Error::Domain(format!("ratio {r} outside [{q}, 1]")));
    }
    Ok((1.0 - q / r).max(0.0))
}

pub fn is_admissible(a: &[f64], budget: f64) -> bool {
    a.iter().all(|&w| w >= 0.0) && a.iter().sum::<f64>() <= budget + BUDGET_TOL
}

/// Clamp negative components to zero, then scale down so that the total does
/// not exceed `budget`.
pub fn project_feasible(a: &[f64], budget: f64) -> Vec<f64> {
    let mut out: Vec<f64> = a.iter().map(|w| if w.is_finite() { w.max(0.0) } else { 0.0 }).collect();
    let budget = budget.max(0.0);
    let sum: f64 = out.iter().sum();
    if sum > budget {
        let s = if sum > 0.0 { budget / sum } else { 0.0 };
        out.iter_mut().for_each(|w| *w *= s);
        // rounding can leave the scaled sum one ulp above the budget
        let mut total: f64 = out.iter().sum();
        while total > budget {
            if let Some(m) = out.iter_mut().max_by(|x, y| x.total_cmp(y)) {
                *m = (*m - (total - budget)).max(0.0);
            }
            total = out.iter().sum();
        }
    }
    out
}

/// Gross portfolio growth `1 + aᵀ(e^R − 1)`.
pub fn growth_factor(a: &[f64], logret: &[f64]) -> f64 {
    1.0 + a
        .iter()
        .zip(logret)
        .map(|(w, r)| w * r.exp_m1())
        .sum::<f64>()
}

/// One rebalancing period: wealth, running maximum and ratio after returns `ret`.
pub fn wealth_step(state: WealthState, a: &[f64], ret: &ReturnSample, q: f64) -> Result<WealthState> {
    if a.len() != ret.0.len() {
        return Err(Error::Shape { expected: ret.0.len(), got: a.len() });
    }
    let budget = admissible_budget(q, state.ratio())?;
    if !is_admissible(a, budget) {
        return Err(Error::ConstraintViolation { sum: a.iter().sum(), budget });
    }
    let x = state.x * growth_factor(a, &ret.0);
    Ok(WealthState { x, z: state.z.max(x) })
}

/// Ratio recursion `min(1, r·(1 + aᵀ(e^R − 1)))`.
pub fn ratio_step(r: f64, a: &[f64], logret: &[f64]) -> f64 {
    (r * growth_factor(a, logret)).min(1.0)
}

/// Equally weighted admissible policy: the cushion `x − q z` is split evenly.
pub fn ew_policy(state: &WealthState, q: f64, d: usize) -> Result<Vec<f64>> {
    let budget = admissible_budget(q, state.ratio())?;
    Ok(vec![budget / d as f64; d])
}

/// Draws `R = drift + L·ξ` with `L` the Cholesky factor of the noise covariance.
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    chol: DMatrix<f64>,
}

impl NoiseSampler {
    pub fn new(gamma: &DMatrix<f64>) -> Result<Self> {
        Ok(Self { chol: linalg::cholesky_lower(gamma, "noise covariance")? })
    }

    pub fn dim(&self) -> usize {
        self.chol.nrows()
    }

    pub fn noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.dim();
        let xi: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        (0..d)
            .map(|i| (0..=i).map(|j| self.chol[(i, j)] * xi[j]).sum())
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, drift: &[f64]) -> ReturnSample {
        let eps = self.noise(rng);
        ReturnSample(drift.iter().zip(eps).map(|(b, e)| b + e).collect())
    }
}

pub fn sample_returns<R: Rng + ?Sized>(rng: &mut R, drift: &[f64], gamma: &DMatrix<f64>) -> Result<ReturnSample> {
    Ok(NoiseSampler::new(gamma)?.sample(rng, drift))
}
