//! Tensor-grid backward induction for the reduced value function `w̃_k(r, b)`
//! of the Gaussian problem, and the constrained Merton problem.
//!
//! The backward system is
//!
//! ```text
//! w̃_N(r, b) = r^p / p
//! w̃_k(r, b) = sup_{a ∈ A^q(r)} E[ w̃_{k+1}( min(1, r(1 + aᵀ(e^{b+ε̃} − 1))), b + K_{k+1} ε̃ ) ]
//! ```
//!
//! with `ε̃ ~ N(0, Σ_k + Γ)`. The expectation uses a tensorized Gauss–Hermite
//! rule; the supremum uses [`crate::simplex::maximize`]. Off-grid values are
//! multilinear interpolations, with `r` clamped to `[q, 1]` and `b` clamped to
//! the grid box. The full value function follows from
//! `ṽ_k(x, z, b) = z^p w̃_k(x/z, b)`.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{kalman_gain, sigma_closed_form};
use crate::linalg;
use crate::market::{admissible_budget, project_feasible, MarketParams};
use crate::policy::Policy;
use crate::quadrature::GaussianRule;
use crate::simplex::{self, SimplexSearch};

pub const GRID_FORMAT: &str = "ddlearn-value-grid";
pub const GRID_VERSION: u32 = 1;

/// Prior used by the solver: the Gaussian prior (learning investor) or a
/// point mass at `b₀` (the drift is taken as known and never updated).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMode {
    Bayesian,
    Dirac,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub r_nodes: usize,
    /// Nodes per drift dimension.
    pub b_nodes: usize,
    /// Half-width of the drift box in posterior-mean standard deviations.
    pub b_width_sd: f64,
    pub quad_order: usize,
    pub search: SimplexSearch,
    pub prior: PriorMode,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            r_nodes: 41,
            b_nodes: 11,
            b_width_sd: 4.0,
            quad_order: 8,
            search: SimplexSearch::default(),
            prior: PriorMode::Bayesian,
        }
    }
}

impl GridConfig {
    pub fn with_prior(mut self, prior: PriorMode) -> Self {
        self.prior = prior;
        self
    }
}

/// Rectilinear grid over the drift estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BGrid {
    pub axes: Vec<Vec<f64>>,
}

impl BGrid {
    pub fn point(center: &[f64]) -> Self {
        Self { axes: center.iter().map(|c| vec![*c]).collect() }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node(&self, mut flat: usize) -> Vec<f64> {
        self.axes
            .iter()
            .map(|ax| {
                let i = flat % ax.len();
                flat /= ax.len();
                ax[i]
            })
            .collect()
    }

    /// Multilinear interpolation stencil: `(flat index, weight)` pairs.
    pub fn stencil(&self, b: &[f64], out: &mut Vec<(usize, f64)>) {
        out.clear();
        out.push((0, 1.0));
        let mut stride = 1;
        for (ax, &v) in self.axes.iter().zip(b) {
            let n = ax.len();
            if n > 1 {
                let (i, t) = locate(ax, v);
                let len = out.len();
                for c in 0..len {
                    let (f, w) = out[c];
                    out[c] = (f + i * stride, w * (1.0 - t));
                    out.push((f + (i + 1) * stride, w * t));
                }
            }
            stride *= n;
        }
    }
}

/// Cell index and fractional position of `v` on a sorted axis, clamped.
fn locate(ax: &[f64], v: f64) -> (usize, f64) {
    let n = ax.len();
    if v <= ax[0] {
        return (0, 0.0);
    }
    if v >= ax[n - 1] {
        return (n - 2, 1.0);
    }
    let i = ax.partition_point(|x| *x <= v).saturating_sub(1).min(n - 2);
    (i, (v - ax[i]) / (ax[i + 1] - ax[i]))
}

fn uniform(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|i| {
            if i == n - 1 {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

/// Tabulated reduced value function and argmax policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueGrid {
    pub format: String,
    pub version: u32,
    pub d: usize,
    pub n_steps: usize,
    pub p: f64,
    pub q: f64,
    pub prior: PriorMode,
    pub b0: Vec<f64>,
    /// Uniform grid on `[q, 1]`.
    pub r_nodes: Vec<f64>,
    /// Drift grid per step `k = 0..=N`.
    pub b_grids: Vec<BGrid>,
    /// `values[k][b * nr + i] = w̃_k(r_i, b)`.
    pub values: Vec<Vec<f64>>,
    /// `policy[k][(b * nr + i) * d + j]`, for `k < N`.
    pub policy: Vec<Vec<f64>>,
}

/// Monotonicity and concavity diagnostics along `r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeReport {
    pub min_first_diff: f64,
    pub max_second_diff: f64,
}

impl ValueGrid {
    pub fn nr(&self) -> usize {
        self.r_nodes.len()
    }

    fn r_cell(&self, r: f64) -> (usize, f64) {
        locate(&self.r_nodes, r.clamp(self.q, 1.0))
    }

    /// `w̃_k(r, b)` by multilinear interpolation.
    pub fn value(&self, k: usize, r: f64, b: &[f64]) -> f64 {
        let nr = self.nr();
        let (i, t) = self.r_cell(r);
        let mut st = Vec::with_capacity(1 << self.d);
        self.b_grids[k].stencil(b, &mut st);
        st.iter()
            .map(|&(f, w)| {
                let row = &self.values[k][f * nr..(f + 1) * nr];
                w * (row[i] + t * (row[i + 1] - row[i]))
            })
            .sum()
    }

    /// `ṽ_k(x, z, b) = z^p w̃_k(x/z, b)`.
    pub fn value_xz(&self, k: usize, x: f64, z: f64, b: &[f64]) -> f64 {
        z.powf(self.p) * self.value(k, x / z, b)
    }

    /// Interpolated argmax weights, projected onto `{a ≥ 0, Σa ≤ 1 − q/r}`.
    pub fn eval_policy(&self, k: usize, r: f64, bhat: &[f64]) -> Vec<f64> {
        let d = self.d;
        let nr = self.nr();
        let r = r.clamp(self.q, 1.0);
        let (i, t) = self.r_cell(r);
        let mut st = Vec::with_capacity(1 << d);
        self.b_grids[k].stencil(bhat, &mut st);
        let mut a = vec![0.0; d];
        for &(f, w) in &st {
            for (c, tw) in [(i, 1.0 - t), (i + 1, t)] {
                if tw == 0.0 {
                    continue;
                }
                let base = (f * nr + c) * d;
                for j in 0..d {
                    a[j] += w * tw * self.policy[k][base + j];
                }
            }
        }
        let budget = admissible_budget(self.q, r).unwrap_or(0.0);
        project_feasible(&a, budget)
    }

    pub fn shape_report(&self) -> ShapeReport {
        let nr = self.nr();
        let mut rep = ShapeReport { min_first_diff: f64::INFINITY, max_second_diff: f64::NEG_INFINITY };
        for vals in &self.values {
            for row in vals.chunks(nr) {
                for i in 1..nr {
                    rep.min_first_diff = rep.min_first_diff.min(row[i] - row[i - 1]);
                    if i + 1 < nr {
                        rep.max_second_diff = rep.max_second_diff.max(row[i + 1] - 2.0 * row[i] + row[i - 1]);
                    }
                }
            }
        }
        rep
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let grid: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if grid.format != GRID_FORMAT || grid.version != GRID_VERSION {
            return Err(Error::Grid(format!(
                "unsupported grid file {} v{}",
                grid.format, grid.version
            )));
        }
        Ok(grid)
    }
}

impl Policy for ValueGrid {
    fn dim(&self) -> usize {
        self.d
    }

    fn weights(&self, k: usize, r: f64, bhat: &[f64]) -> Vec<f64> {
        self.eval_policy(k, r, bhat)
    }
}

/// Drift box at step `k`: `b₀ ± width·sd` with `sd² = diag(Σ₀ − Σ_k)`.
fn b_grid_at(params: &MarketParams, cfg: &GridConfig, k: usize) -> Result<BGrid> {
    if cfg.prior == PriorMode::Dirac || k == 0 {
        return Ok(BGrid::point(params.b0.as_slice()));
    }
    let var = crate::filter::bhat_marginal(&params.sigma0, &params.gamma, k)?;
    let axes = (0..params.d)
        .map(|i| {
            let sd = var[(i, i)].max(0.0).sqrt();
            let c = params.b0[i];
            if sd <= 1e-300 {
                vec![c]
            } else {
                uniform(c - cfg.b_width_sd * sd, c + cfg.b_width_sd * sd, cfg.b_nodes)
            }
        })
        .collect();
    Ok(BGrid { axes })
}

/// Per-drift-node data shared by every `r` node: growth increments `e^{b+ε_j} − 1`
/// and the next-step value row `w̃_{k+1}(·, b + Kε_j)` for each quadrature node.
struct NodeKernel {
    g: Vec<f64>,
    f: Vec<f64>,
}

struct StepContext<'a> {
    d: usize,
    q: f64,
    p: f64,
    nr: usize,
    h_inv: f64,
    rule: &'a GaussianRule,
}

impl StepContext<'_> {
    #[inline]
    fn objective(&self, kern: &NodeKernel, r: f64, a: &[f64]) -> f64 {
        let d = self.d;
        let nr = self.nr;
        let mut acc = 0.0;
        for (j, w) in self.rule.weights.iter().enumerate() {
            let gj = &kern.g[j * d..(j + 1) * d];
            let mut s = 1.0;
            for i in 0..d {
                s += a[i] * gj[i];
            }
            let y = r * s;
            let fj = &kern.f[j * nr..(j + 1) * nr];
            if y >= 1.0 {
                // new running maximum: z' = z·y
                acc += w * y.powf(self.p) * fj[nr - 1];
            } else {
                let t = ((y - self.q) * self.h_inv).max(0.0);
                let i0 = (t as usize).min(nr - 2);
                let fr = t - i0 as f64;
                acc += w * (fj[i0] + fr * (fj[i0 + 1] - fj[i0]));
            }
        }
        acc
    }
}

/// Fills `w̃_k` and the argmax policy for `k = N−1, …, 0`.
pub fn solve_backward(params: &MarketParams, cfg: &GridConfig) -> Result<ValueGrid> {
    params.validate()?;
    if cfg.r_nodes < 2 || cfg.b_nodes == 0 || cfg.quad_order == 0 {
        return Err(Error::Grid("grid needs at least 2 r-nodes, 1 b-node and a positive quadrature order".into()));
    }
    if !(cfg.search.step > 0.0) {
        return Err(Error::Grid("simplex step must be positive".into()));
    }
    let d = params.d;
    let n = params.n_steps;
    let q = params.q;
    let p = params.p;
    let r_nodes = uniform(q, 1.0, cfg.r_nodes);
    let nr = r_nodes.len();
    let h_inv = (nr - 1) as f64 / (1.0 - q);

    let mut b_grids = Vec::with_capacity(n + 1);
    for k in 0..n {
        b_grids.push(b_grid_at(params, cfg, k)?);
    }
    b_grids.push(BGrid::point(params.b0.as_slice()));

    let mut values: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
    let mut policy: Vec<Vec<f64>> = vec![Vec::new(); n];
    values[n] = r_nodes.iter().map(|r| r.powf(p) / p).collect();

    for k in (0..n).rev() {
        let (cov, gain) = match cfg.prior {
            PriorMode::Bayesian => {
                let sigma_k = sigma_closed_form(&params.sigma0, &params.gamma, k)?;
                let gain = kalman_gain(&sigma_k, &params.gamma)?;
                (sigma_k + &params.gamma, gain)
            }
            PriorMode::Dirac => (params.gamma.clone(), DMatrix::zeros(d, d)),
        };
        let rule = GaussianRule::new(&cov, cfg.quad_order)?;
        let m = rule.len();
        let shifts: Vec<Vec<f64>> = (0..m)
            .map(|j| (&gain * linalg::dvec(rule.node(j))).iter().copied().collect())
            .collect();
        let next_grid = &b_grids[k + 1];
        let next_vals = &values[k + 1];
        let grid = &b_grids[k];
        let ctx = StepContext { d, q, p, nr, h_inv, rule: &rule };

        let columns: Vec<(Vec<f64>, Vec<f64>)> = (0..grid.len())
            .into_par_iter()
            .map(|bi| {
                let b = grid.node(bi);
                let mut g = Vec::with_capacity(m * d);
                let mut f = vec![0.0; m * nr];
                let mut st = Vec::with_capacity(1 << d);
                let mut bn = vec![0.0; d];
                for j in 0..m {
                    let eps = rule.node(j);
                    for i in 0..d {
                        g.push((b[i] + eps[i]).exp_m1());
                        bn[i] = b[i] + shifts[j][i];
                    }
                    next_grid.stencil(&bn, &mut st);
                    let fj = &mut f[j * nr..(j + 1) * nr];
                    for &(flat, w) in &st {
                        let row = &next_vals[flat * nr..(flat + 1) * nr];
                        for (o, v) in fj.iter_mut().zip(row) {
                            *o += w * v;
                        }
                    }
                }
                let kern = NodeKernel { g, f };
                let mut col_v = Vec::with_capacity(nr);
                let mut col_a = Vec::with_capacity(nr * d);
                for &r in &r_nodes {
                    let budget = admissible_budget(q, r).unwrap_or(0.0);
                    let (a, v) = simplex::maximize(d, budget, &cfg.search, |a| ctx.objective(&kern, r, a));
                    col_v.push(v);
                    col_a.extend(a);
                }
                (col_v, col_a)
            })
            .collect();

        let mut vk = Vec::with_capacity(grid.len() * nr);
        let mut pk = Vec::with_capacity(grid.len() * nr * d);
        for (v, a) in columns {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite value at step {k}")));
            }
            vk.extend(v);
            pk.extend(a);
        }
        values[k] = vk;
        policy[k] = pk;
    }

    Ok(ValueGrid {
        format: GRID_FORMAT.to_string(),
        version: GRID_VERSION,
        d,
        n_steps: n,
        p,
        q,
        prior: cfg.prior,
        b0: params.b0.iter().copied().collect(),
        r_nodes,
        b_grids,
        values,
        policy,
    })
}

/// Known-drift, `q = 0` problem: `v^M_k(x) = S^{N−k} x^p / p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MertonSolution {
    /// `S = sup_{a ≥ 0, Σa ≤ 1} E[(1 + aᵀ(e^{b₀+ε} − 1))^p]`.
    pub s: f64,
    pub a_m: Vec<f64>,
    pub n_steps: usize,
    pub p: f64,
}

impl MertonSolution {
    pub fn value(&self, k: usize, x: f64) -> f64 {
        self.s.powi((self.n_steps - k) as i32) * x.powf(self.p) / self.p
    }

    pub fn values(&self, x: f64) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.value(k, x)).collect()
    }
}

/// Expected power growth `E[(1 + aᵀ(e^{b₀+ε} − 1))^p]` under a quadrature rule.
pub fn merton_objective(rule: &GaussianRule, b0: &[f64], p: f64, a: &[f64]) -> f64 {
    rule.expect(|eps| {
        let s: f64 = 1.0 + a.iter().zip(b0.iter().zip(eps)).map(|(w, (b, e))| w * (b + e).exp_m1()).sum::<f64>();
        s.max(0.0).powf(p)
    })
}

pub fn merton_solve(params: &MarketParams, quad_order: usize, search: &SimplexSearch) -> Result<MertonSolution> {
    let rule = GaussianRule::new(&params.gamma, quad_order)?;
    let b0: Vec<f64> = params.b0.iter().copied().collect();
    let (a_m, s) = simplex::maximize(params.d, 1.0, search, |a| merton_objective(&rule, &b0, params.p, a));
    Ok(MertonSolution { s, a_m, n_steps: params.n_steps, p: params.p })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::AnnualInputs;

    fn one_asset(b: f64, var: f64, prior_var: f64, q: f64, n: usize) -> MarketParams {
        MarketParams::new(
            n,
            n as f64,
            0.8,
            q,
            linalg::dvec(&[b]),
            DMatrix::from_element(1, 1, prior_var),
            DMatrix::from_element(1, 1, var),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn stencil_weights_sum_to_one_and_clamp() {
        let g = BGrid { axes: vec![vec![0.0, 1.0, 2.0], vec![-1.0, 1.0]] };
        let mut st = Vec::new();
        g.stencil(&[0.5, 0.0], &mut st);
        assert_eq!(st.len(), 4);
        assert!((st.iter().map(|s| s.1).sum::<f64>() - 1.0).abs() < 1e-15);
        g.stencil(&[5.0, -7.0], &mut st);
        let at: f64 = st.iter().map(|&(f, w)| w * g.node(f)[0]).sum();
        assert!((at - 2.0).abs() < 1e-15);
        assert_eq!(g.node(4), vec![1.0, 1.0]);
    }

    #[test]
    fn terminal_slice_is_utility() {
        let params = one_asset(0.01, 0.01, 0.001, 0.5, 2);
        let grid = solve_backward(&params, &GridConfig { r_nodes: 11, b_nodes: 3, ..Default::default() }).unwrap();
        assert!((grid.value(2, 1.0, &[0.3]) - 1.25).abs() < 1e-15);
        for (i, r) in grid.r_nodes.iter().enumerate() {
            assert!((grid.values[2][i] - r.powf(0.8) / 0.8).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_noise_negative_drift_stays_riskless() {
        let params = one_asset(-0.02, 1e-14, 1e-14, 0.6, 3);
        let cfg = GridConfig { r_nodes: 9, prior: PriorMode::Dirac, ..Default::default() };
        let grid = solve_backward(&params, &cfg).unwrap();
        for k in 0..3 {
            for (i, r) in grid.r_nodes.iter().enumerate() {
                assert_eq!(grid.policy[k][i], 0.0);
                assert!((grid.values[k][i] - r.powf(0.8) / 0.8).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn policy_is_feasible_and_exact_at_nodes() {
        let params = one_asset(0.03, 0.01, 0.0006, 0.5, 3);
        let grid = solve_backward(&params, &GridConfig { r_nodes: 11, b_nodes: 5, ..Default::default() }).unwrap();
        assert_eq!(grid.eval_policy(1, 0.5, &[0.03]), vec![0.0]);
        let node_b = grid.b_grids[1].node(2);
        let i = 7;
        let stored = grid.policy[1][2 * grid.nr() + i];
        let got = grid.eval_policy(1, grid.r_nodes[i], &node_b);
        assert!((got[0] - stored).abs() < 1e-14);
        for s in 0..200 {
            let r = 0.5 + 0.5 * (s as f64 * 0.618).fract();
            let b = 0.03 + 0.05 * ((s as f64 * 0.377).fract() - 0.5);
            let a = grid.eval_policy(2, r, &[b]);
            assert!(a[0] >= 0.0 && a[0] <= 1.0 - 0.5 / r + 1e-12);
        }
    }

    #[test]
    fn value_bounded_by_riskless_and_merton() {
        let params = one_asset(0.04, 0.02, 0.001, 0.3, 4);
        let search = SimplexSearch::default();
        let m = merton_solve(&params, 12, &search).unwrap();
        let grid = solve_backward(&params, &GridConfig { prior: PriorMode::Dirac, quad_order: 12, ..Default::default() }).unwrap();
        for k in 0..=4 {
            for (i, r) in grid.r_nodes.iter().enumerate() {
                let v = grid.values[k][i];
                assert!(v >= r.powf(0.8) / 0.8 - 1e-12);
                assert!(v <= m.value(k, *r) + 1e-9, "k={k} r={r}");
            }
        }
    }

    #[test]
    fn homogeneity_of_assembled_value() {
        let params = one_asset(0.03, 0.01, 0.0006, 0.5, 2);
        let grid = solve_backward(&params, &GridConfig { r_nodes: 11, b_nodes: 5, ..Default::default() }).unwrap();
        for &(x, z) in &[(0.8, 1.0), (1.3, 1.7), (2.0, 2.5)] {
            let v1 = grid.value_xz(0, x, z, &[0.03]);
            let v2 = grid.value_xz(0, 2.0 * x, 2.0 * z, &[0.03]);
            assert!((v2 - 2f64.powf(0.8) * v1).abs() < 1e-13);
        }
    }

    #[test]
    fn merton_zero_noise_negative_drift() {
        let params = MarketParams::new(
            5,
            1.0,
            0.8,
            0.5,
            linalg::dvec(&[-0.01, -0.02]),
            DMatrix::identity(2, 2) * 1e-4,
            DMatrix::identity(2, 2) * 1e-14,
            1.0,
        )
        .unwrap();
        let m = merton_solve(&params, 8, &SimplexSearch::default()).unwrap();
        assert!((m.s - 1.0).abs() < 1e-12);
        assert_eq!(m.a_m, vec![0.0, 0.0]);
        assert!((m.value(0, 2.0) - 2f64.powf(0.8) / 0.8).abs() < 1e-12);
    }

    #[test]
    fn merton_value_structure() {
        let params = AnnualInputs::table2().to_params().unwrap();
        let m = merton_solve(&params, 8, &SimplexSearch::default()).unwrap();
        assert!(m.s >= 1.0);
        assert!(m.a_m.iter().all(|w| *w >= 0.0) && m.a_m.iter().sum::<f64>() <= 1.0 + 1e-12);
        for x in [0.5, 1.0, 3.0] {
            assert!((m.value(0, x) / m.value(1, x) - m.s).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_file_round_trip() {
        let params = one_asset(0.03, 0.01, 0.0006, 0.5, 2);
        let grid = solve_backward(&params, &GridConfig { r_nodes: 5, b_nodes: 3, ..Default::default() }).unwrap();
        let dir = std::env::temp_dir().join(format!("ddlearn-grid-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("g.json");
        grid.save(&path).unwrap();
        assert_eq!(ValueGrid::load(&path).unwrap(), grid);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn empty_grid_rejected() {
        let params = one_asset(0.03, 0.01, 0.0006, 0.5, 2);
        assert!(solve_backward(&params, &GridConfig { r_nodes: 1, ..Default::default() }).is_err());
        assert!(solve_backward(&params, &GridConfig { b_nodes: 0, ..Default::default() }).is_err());
    }
}
