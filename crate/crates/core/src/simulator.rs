//! Monte-Carlo evaluation of strategies on shared return paths, performance
//! metrics, and the prior-uncertainty and drawdown-floor studies.
//!
//! Path `i` always draws from substream `i` of the `"paths"` stream: first the
//! drift `B` (from the prior, or fixed at `b₀`), then the `N` noise vectors.
//! Every strategy run with the same seed therefore sees identical `(B, ε)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp_grid::{self, GridConfig, MertonSolution, PriorMode};
use crate::error::{Error, Result};
use crate::filter::gain_schedule;
use crate::hybrid_now::{self, TrainingConfig};
use crate::linalg;
use crate::market::{wealth_step, MarketParams, NoiseSampler, ReturnSample, WealthState};
use crate::policy::{feasible_weights, ConstantPolicy, EqualWeightPolicy, Policy};
use crate::rng::substream;
use crate::simplex::SimplexSearch;

/// How the strategy's drift estimate evolves along a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    /// Kalman posterior mean, starting from `b₀`.
    Kalman,
    /// Stays at `b₀`.
    Frozen,
}

#[derive(Clone)]
pub struct Strategy {
    pub name: String,
    pub policy: Arc<dyn Policy>,
    pub filter: FilterMode,
}

impl std::fmt::Debug for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Strategy").field("name", &self.name).field("filter", &self.filter).finish()
    }
}

impl Strategy {
    pub fn learning(policy: Arc<dyn Policy>) -> Self {
        Self { name: "learning".into(), policy, filter: FilterMode::Kalman }
    }

    pub fn non_learning(policy: Arc<dyn Policy>) -> Self {
        Self { name: "non-learning".into(), policy, filter: FilterMode::Frozen }
    }

    pub fn equal_weight(q: f64, d: usize) -> Self {
        Self { name: "ew".into(), policy: Arc::new(EqualWeightPolicy { q, d }), filter: FilterMode::Frozen }
    }

    pub fn merton(weights: Vec<f64>) -> Self {
        Self { name: "merton".into(), policy: Arc::new(ConstantPolicy { weights }), filter: FilterMode::Frozen }
    }

    pub fn zero(d: usize) -> Self {
        Self { name: "zero".into(), policy: Arc::new(ConstantPolicy { weights: vec![0.0; d] }), filter: FilterMode::Frozen }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub n_paths: usize,
    pub seed: u64,
    /// Draw `B` per path from `N(b₀, Σ₀)`; otherwise `B = b₀`.
    pub draw_drift: bool,
}

impl SimOptions {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        Self { n_paths, seed, draw_drift: true }
    }
}

/// Simulated trajectories of one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEnsemble {
    pub strategy: String,
    pub seed: u64,
    pub n_steps: usize,
    pub d: usize,
    pub q: f64,
    pub x0: f64,
    /// `wealth[path][k]`, `k = 0..=N`.
    pub wealth: Vec<Vec<f64>>,
    pub maxima: Vec<Vec<f64>>,
    pub ratios: Vec<Vec<f64>>,
    /// `weights[path][k * d + i]`, `k < N`.
    pub weights: Vec<Vec<f64>>,
    pub drift: Vec<Vec<f64>>,
    /// `bhat[path][k * d + i]`, `k = 0..=N`.
    pub bhat: Vec<Vec<f64>>,
}

impl PathEnsemble {
    pub fn n_paths(&self) -> usize {
        self.wealth.len()
    }

    pub fn terminal(&self) -> Vec<f64> {
        self.wealth.iter().map(|w| *w.last().unwrap()).collect()
    }

    /// Per-path maximum drawdown `min_k X_k/Z_k − 1` on the rebalancing grid.
    pub fn max_drawdowns(&self) -> Vec<f64> {
        self.wealth
            .iter()
            .zip(&self.maxima)
            .map(|(x, z)| x.iter().zip(z).map(|(x, z)| x / z - 1.0).fold(0.0, f64::min))
            .collect()
    }

    /// `min over paths and k of X_k − q Z_k`.
    pub fn min_cushion(&self) -> f64 {
        self.wealth
            .iter()
            .zip(&self.maxima)
            .flat_map(|(x, z)| x.iter().zip(z).map(|(x, z)| x - self.q * z))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn maxima_nondecreasing(&self) -> bool {
        self.maxima.iter().all(|z| z.windows(2).all(|w| w[1] >= w[0]))
    }

    pub fn mean_wealth(&self) -> Vec<f64> {
        (0..=self.n_steps)
            .map(|k| self.wealth.iter().map(|w| w[k]).sum::<f64>() / self.n_paths() as f64)
            .collect()
    }

    /// `mean_weights()[k][i]`.
    pub fn mean_weights(&self) -> Vec<Vec<f64>> {
        let n = self.n_paths() as f64;
        (0..self.n_steps)
            .map(|k| {
                (0..self.d)
                    .map(|i| self.weights.iter().map(|w| w[k * self.d + i]).sum::<f64>() / n)
                    .collect()
            })
            .collect()
    }

    /// `(t, mean, lo95, hi95)` of wealth, bands `mean ± 1.96·sd` across paths.
    pub fn wealth_bands(&self, horizon: f64) -> Vec<[f64; 4]> {
        let n = self.n_paths() as f64;
        (0..=self.n_steps)
            .map(|k| {
                let xs: Vec<f64> = self.wealth.iter().map(|w| w[k]).collect();
                let m = xs.iter().sum::<f64>() / n;
                let sd = if n > 1.0 { (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
                let t = horizon * k as f64 / self.n_steps as f64;
                [t, m, m - 1.96 * sd, m + 1.96 * sd]
            })
            .collect()
    }
}

struct PathDraw {
    drift: Vec<f64>,
    returns: Vec<ReturnSample>,
}

fn draw_path(params: &MarketParams, prior_l: &DMatrix<f64>, noise: &NoiseSampler, seed: u64, i: usize, draw_drift: bool) -> PathDraw {
    let d = params.d;
    let mut rng = substream(seed, "paths", i as u64);
    let xi: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let drift: Vec<f64> = if draw_drift {
        (0..d)
            .map(|r| params.b0[r] + (0..=r).map(|c| prior_l[(r, c)] * xi[c]).sum::<f64>())
            .collect()
    } else {
        params.b0.iter().copied().collect()
    };
    let returns = (0..params.n_steps).map(|_| noise.sample(&mut rng, &drift)).collect();
    PathDraw { drift, returns }
}

pub fn simulate(strategy: &Strategy, params: &MarketParams, opts: &SimOptions) -> Result<PathEnsemble> {
    params.validate()?;
    if opts.n_paths == 0 {
        return Err(Error::Parameter("at least one path is required".into()));
    }
    if strategy.policy.dim() != params.d {
        return Err(Error::MissingPolicy(format!(
            "strategy '{}' has dimension {} but the market has {}",
            strategy.name,
            strategy.policy.dim(),
            params.d
        )));
    }
    let d = params.d;
    let n = params.n_steps;
    let q = params.q;
    let prior_l = linalg::cholesky_lower(&params.sigma0, "prior covariance")?;
    let noise = NoiseSampler::new(&params.gamma)?;
    let gains = match strategy.filter {
        FilterMode::Kalman => gain_schedule(params)?,
        FilterMode::Frozen => Vec::new(),
    };
    type PathOut = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);
    let paths: Vec<Result<PathOut>> = (0..opts.n_paths)
        .into_par_iter()
        .map(|i| {
            let draw = draw_path(params, &prior_l, &noise, opts.seed, i, opts.draw_drift);
            let mut state = WealthState::new(params.x0);
            let mut bhat: DVector<f64> = params.b0.clone();
            let mut xs = vec![state.x];
            let mut zs = vec![state.z];
            let mut rs = vec![state.ratio()];
            let mut ws = Vec::with_capacity(n * d);
            let mut bs: Vec<f64> = bhat.iter().copied().collect();
            for (k, ret) in draw.returns.iter().enumerate() {
                let a = feasible_weights(strategy.policy.as_ref(), q, k, state.ratio(), bhat.as_slice());
                state = wealth_step(state, &a, ret, q)?;
                ws.extend_from_slice(&a);
                if strategy.filter == FilterMode::Kalman {
                    let innov = ret.to_dvector() - &bhat;
                    bhat += &gains[k] * innov;
                }
                xs.push(state.x);
                zs.push(state.z);
                rs.push(state.ratio());
                bs.extend(bhat.iter().copied());
            }
            Ok((xs, zs, rs, ws, draw.drift, bs))
        })
        .collect();
    let mut ens = PathEnsemble {
        strategy: strategy.name.clone(),
        seed: opts.seed,
        n_steps: n,
        d,
        q,
        x0: params.x0,
        wealth: Vec::with_capacity(opts.n_paths),
        maxima: Vec::with_capacity(opts.n_paths),
        ratios: Vec::with_capacity(opts.n_paths),
        weights: Vec::with_capacity(opts.n_paths),
        drift: Vec::with_capacity(opts.n_paths),
        bhat: Vec::with_capacity(opts.n_paths),
    };
    for p in paths {
        let (x, z, r, w, b, bh) = p?;
        ens.wealth.push(x);
        ens.maxima.push(z);
        ens.ratios.push(r);
        ens.weights.push(w);
        ens.drift.push(b);
        ens.bhat.push(bh);
    }
    Ok(ens)
}

/// Summary statistics of one strategy. Ratios are `None` when undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyMetrics {
    pub strategy: String,
    pub n_paths: usize,
    /// `mean(X_T)/x₀ − 1`.
    pub avg_performance: f64,
    /// Unbiased standard deviation of `X_T/x₀`.
    pub std_terminal: f64,
    pub sharpe: Option<f64>,
    pub avg_md: f64,
    pub worst_md: f64,
    pub calmar: Option<f64>,
}

pub fn metrics(ens: &PathEnsemble) -> Result<StrategyMetrics> {
    let n = ens.n_paths();
    if n == 0 {
        return Err(Error::Parameter("empty ensemble".into()));
    }
    let xt: Vec<f64> = ens.terminal().iter().map(|x| x / ens.x0).collect();
    let mean = xt.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (xt.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let perf = mean - 1.0;
    let md = ens.max_drawdowns();
    let avg_md = md.iter().sum::<f64>() / n as f64;
    let worst_md = md.iter().copied().fold(0.0, f64::min);
    Ok(StrategyMetrics {
        strategy: ens.strategy.clone(),
        n_paths: n,
        avg_performance: perf,
        std_terminal: std,
        sharpe: (std > 0.0).then(|| perf / std),
        avg_md,
        worst_md,
        calmar: (avg_md < 0.0).then(|| perf / avg_md.abs()),
    })
}

/// Differences `left − right`; ratio columns are relative improvements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub left: String,
    pub right: String,
    pub performance_diff: f64,
    pub std_diff: f64,
    pub sharpe_rel: Option<f64>,
    pub avg_md_diff: f64,
    pub worst_md_diff: f64,
    pub calmar_rel: Option<f64>,
}

pub fn compare(left: &StrategyMetrics, right: &StrategyMetrics) -> Comparison {
    let rel = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) if b != 0.0 => Some(a / b - 1.0),
        _ => None,
    };
    Comparison {
        left: left.strategy.clone(),
        right: right.strategy.clone(),
        performance_diff: left.avg_performance - right.avg_performance,
        std_diff: left.std_terminal - right.std_terminal,
        sharpe_rel: rel(left.sharpe, right.sharpe),
        avg_md_diff: left.avg_md - right.avg_md,
        worst_md_diff: left.worst_md - right.worst_md,
        calmar_rel: rel(left.calmar, right.calmar),
    }
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub seed: u64,
    pub strategies: Vec<StrategyMetrics>,
    pub comparisons: Vec<Comparison>,
}

impl MetricsReport {
    /// Metrics of every ensemble plus pairwise comparisons of consecutive entries
    /// against the first one.
    pub fn from_ensembles(ensembles: &[PathEnsemble], seed: u64) -> Result<Self> {
        let strategies = ensembles.iter().map(metrics).collect::<Result<Vec<_>>>()?;
        let comparisons = strategies.iter().skip(1).map(|s| compare(&strategies[0], s)).collect();
        Ok(Self { schema_version: REPORT_SCHEMA_VERSION, seed, strategies, comparisons })
    }

    pub fn get(&self, name: &str) -> Option<&StrategyMetrics> {
        self.strategies.iter().find(|s| s.strategy == name)
    }
}

/// Mean wealth difference `left − right` at each rebalancing date.
pub fn excess_series(left: &PathEnsemble, right: &PathEnsemble) -> Vec<f64> {
    left.mean_wealth().iter().zip(right.mean_wealth()).map(|(a, b)| a - b).collect()
}

/// Produces a feedback policy for a market under a prior.
pub trait PolicySolver: Sync {
    fn solve(&self, params: &MarketParams, prior: PriorMode) -> Result<Arc<dyn Policy>>;
}

impl PolicySolver for GridConfig {
    fn solve(&self, params: &MarketParams, prior: PriorMode) -> Result<Arc<dyn Policy>> {
        Ok(Arc::new(dp_grid::solve_backward(params, &self.clone().with_prior(prior))?))
    }
}

impl PolicySolver for TrainingConfig {
    fn solve(&self, params: &MarketParams, prior: PriorMode) -> Result<Arc<dyn Policy>> {
        let cfg = TrainingConfig { prior, ..self.clone() };
        Ok(Arc::new(hybrid_now::solve(params, &cfg)?))
    }
}

/// Learning and Non-Learning evaluated on the same paths.
#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub learning: PathEnsemble,
    pub non_learning: PathEnsemble,
}

impl PairOutcome {
    pub fn report(&self) -> Result<MetricsReport> {
        MetricsReport::from_ensembles(&[self.learning.clone(), self.non_learning.clone()], self.learning.seed)
    }

    pub fn excess(&self) -> Vec<f64> {
        excess_series(&self.learning, &self.non_learning)
    }
}

pub fn compare_learning(
    params: &MarketParams,
    learning: Arc<dyn Policy>,
    non_learning: Arc<dyn Policy>,
    opts: &SimOptions,
) -> Result<PairOutcome> {
    Ok(PairOutcome {
        learning: simulate(&Strategy::learning(learning), params, opts)?,
        non_learning: simulate(&Strategy::non_learning(non_learning), params, opts)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityConfig {
    pub unc: Vec<f64>,
    /// Learning and Non-Learning share `(B, ε)` draws per path index.
    pub paired: bool,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self { unc: vec![1.0 / 6.0, 1.0, 3.0, 6.0, 12.0], paired: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySlice {
    pub unc: f64,
    pub learning: StrategyMetrics,
    pub non_learning: StrategyMetrics,
    /// Mean wealth of Learning minus Non-Learning, per date.
    pub excess: Vec<f64>,
}

impl SensitivitySlice {
    pub fn performance_gap(&self) -> f64 {
        self.learning.avg_performance - self.non_learning.avg_performance
    }
}

/// For each `unc`, solve both strategies on the prior `N(b₀, unc·Σ₀)` and
/// evaluate them on paths drawn from that prior.
pub fn sensitivity_sweep(
    cfg: &SensitivityConfig,
    params: &MarketParams,
    solver: &dyn PolicySolver,
    opts: &SimOptions,
) -> Result<Vec<SensitivitySlice>> {
    let non_learning = solver.solve(params, PriorMode::Dirac)?;
    cfg.unc
        .iter()
        .map(|&unc| {
            let scaled = params.with_prior_scale(unc)?;
            let learning = solver.solve(&scaled, PriorMode::Bayesian)?;
            sensitivity_slice(&scaled, unc, learning, non_learning.clone(), cfg.paired, opts)
        })
        .collect()
}

/// One `unc` slice with already solved policies (`params` carries the scaled prior).
pub fn sensitivity_slice(
    params: &MarketParams,
    unc: f64,
    learning: Arc<dyn Policy>,
    non_learning: Arc<dyn Policy>,
    paired: bool,
    opts: &SimOptions,
) -> Result<SensitivitySlice> {
    let l = simulate(&Strategy::learning(learning), params, opts)?;
    let nl_opts = if paired { *opts } else { SimOptions { seed: opts.seed.wrapping_add(1), ..*opts } };
    let nl = simulate(&Strategy::non_learning(non_learning), params, &nl_opts)?;
    Ok(SensitivitySlice { unc, learning: metrics(&l)?, non_learning: metrics(&nl)?, excess: excess_series(&l, &nl) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSlice {
    pub q: f64,
    pub mean_wealth: Vec<f64>,
    /// `mean_weights[k][i]`.
    pub mean_weights: Vec<Vec<f64>>,
    /// `sup_k max_i |mean weight − Merton weight|`.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub merton: MertonSolution,
    pub merton_mean_wealth: Vec<f64>,
    pub slices: Vec<ConvergenceSlice>,
}

/// Non-Learning strategies for a range of floors `q` with the drift fixed at
/// `b₀`, compared against the constant Merton weights.
pub fn convergence_study(
    q_values: &[f64],
    params: &MarketParams,
    solver: &dyn PolicySolver,
    merton_quad_order: usize,
    search: &SimplexSearch,
    opts: &SimOptions,
) -> Result<ConvergenceReport> {
    let opts = SimOptions { draw_drift: false, ..*opts };
    let merton = dp_grid::merton_solve(params, merton_quad_order, search)?;
    // A vanishing floor leaves the Merton weights untouched by the projection.
    let merton_market = params.with_q(1e-12)?;
    let m_ens = simulate(&Strategy::merton(merton.a_m.clone()), &merton_market, &opts)?;
    let slices = q_values
        .iter()
        .map(|&q| {
            let pq = params.with_q(q)?;
            let policy = solver.solve(&pq, PriorMode::Dirac)?;
            let ens = simulate(&Strategy::non_learning(policy), &pq, &opts)?;
            let mw = ens.mean_weights();
            let distance = mw
                .iter()
                .flat_map(|row| row.iter().zip(&merton.a_m).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            Ok(ConvergenceSlice { q, mean_wealth: ens.mean_wealth(), mean_weights: mw, distance })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConvergenceReport { merton, merton_mean_wealth: m_ens.mean_wealth(), slices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::AnnualInputs;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn table2() -> MarketParams {
        AnnualInputs::table2().to_params().unwrap()
    }

    #[test]
    fn zero_strategy_is_flat() {
        let p = table2();
        let ens = simulate(&Strategy::zero(3), &p, &SimOptions::new(20, 1)).unwrap();
        assert!(ens.wealth.iter().flatten().all(|x| *x == 1.0));
        let m = metrics(&ens).unwrap();
        assert_eq!(m.avg_md, 0.0);
        assert_eq!(m.sharpe, None);
        assert_eq!(m.calmar, None);
    }

    #[test]
    fn metric_examples() {
        let mut ens = simulate(&Strategy::zero(1), &MarketParams::new(
            2, 1.0, 0.8, 0.5, linalg::dvec(&[0.0]), DMatrix::identity(1, 1) * 1e-4, DMatrix::identity(1, 1) * 1e-4, 1.0,
        ).unwrap(), &SimOptions::new(2, 0)).unwrap();
        // monotone path
        ens.wealth = vec![vec![1.0, 1.05, 1.1]];
        ens.maxima = vec![vec![1.0, 1.05, 1.1]];
        let m = metrics(&ens).unwrap();
        assert_eq!(m.avg_md, 0.0);
        assert_eq!(m.calmar, None);
        // symmetric pair
        ens.wealth = vec![vec![1.0, 1.0, 1.1], vec![1.0, 1.0, 0.9]];
        ens.maxima = vec![vec![1.0, 1.0, 1.1], vec![1.0, 1.0, 1.0]];
        let m = metrics(&ens).unwrap();
        assert!(m.avg_performance.abs() < 1e-15);
        assert!((m.std_terminal - 0.1 * 2f64.sqrt()).abs() < 1e-14);
        assert!(m.sharpe.unwrap().abs() < 1e-13);
        assert!((m.avg_md - (-0.05)).abs() < 1e-15);
        assert!((m.worst_md - (-0.1)).abs() < 1e-15);
    }

    #[test]
    fn shared_draws_across_strategies() {
        let p = table2();
        let opts = SimOptions::new(50, 9);
        let a = simulate(&Strategy::equal_weight(p.q, 3), &p, &opts).unwrap();
        let b = simulate(&Strategy::merton(vec![0.0, 0.0, 1.0]), &p, &opts).unwrap();
        assert_eq!(a.drift, b.drift);
        let c = simulate(&Strategy::equal_weight(p.q, 3), &p, &opts).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn merton_weights_are_projected_and_constant_when_unconstrained() {
        let p = table2();
        let ens = simulate(&Strategy::merton(vec![0.0, 0.0, 1.0]), &p, &SimOptions::new(30, 2)).unwrap();
        assert!(ens.min_cushion() >= -1e-10);
        let free = simulate(&Strategy::merton(vec![0.0, 0.2, 0.8]), &p.with_q(1e-12).unwrap(), &SimOptions::new(30, 2)).unwrap();
        for w in &free.weights {
            for k in 0..p.n_steps {
                assert!((w[k * 3 + 1] - 0.2).abs() < 1e-9 && (w[k * 3 + 2] - 0.8).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn kalman_filter_runs_in_the_loop() {
        let p = table2();
        let ens = simulate(&Strategy::learning(Arc::new(EqualWeightPolicy { q: p.q, d: 3 })), &p, &SimOptions::new(5, 3)).unwrap();
        assert_eq!(ens.bhat[0].len(), 3 * (p.n_steps + 1));
        assert_ne!(ens.bhat[0][3 * p.n_steps], p.b0[0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = table2();
        let err = simulate(&Strategy::zero(2), &p, &SimOptions::new(5, 3)).unwrap_err();
        assert!(matches!(err, Error::MissingPolicy(_)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn constant_weights_respect_the_floor(
            seed in any::<u64>(),
            q in 0.05f64..0.95,
            weights in proptest::collection::vec(0.0f64..2.0, 3),
        ) {
            let p = table2().with_q(q).unwrap();
            let ens = simulate(&Strategy::merton(weights), &p, &SimOptions::new(20, seed)).unwrap();
            prop_assert!(ens.min_cushion() >= -1e-10);
            prop_assert!(ens.maxima_nondecreasing());
            prop_assert!(ens.ratios.iter().flatten().all(|r| *r >= q * (1.0 - 1e-12) && *r <= 1.0));
            for (row, ratios) in ens.weights.iter().zip(&ens.ratios) {
                for k in 0..p.n_steps {
                    let a = &row[k * p.d..(k + 1) * p.d];
                    prop_assert!(a.iter().sum::<f64>() <= 1.0 - q / ratios[k] + 1e-12);
                }
            }
        }
    }
}
