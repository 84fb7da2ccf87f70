//! Experiment configuration: one TOML file with `market`, `solver` and `run` tables.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ddlearn_core::market::AnnualInputs;
use ddlearn_core::{GridConfig, MarketParams, TrainingConfig};
use serde::{Deserialize, Serialize};

/// Annualized market inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub d: usize,
    /// Horizon `T` in years.
    pub horizon: f64,
    /// Rebalancing dates `N`.
    pub n_steps: usize,
    /// Simulated trajectories.
    pub n_paths: usize,
    pub p: f64,
    pub q: f64,
    pub drift_mean: Vec<f64>,
    pub drift_cov: Vec<Vec<f64>>,
    pub noise_vol: Vec<f64>,
    pub noise_corr: Vec<Vec<f64>>,
    /// Printed noise covariance, compared against `diag(vol)·corr·diag(vol)` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_cov_check: Option<Vec<Vec<f64>>>,
    pub x0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMethod {
    Grid,
    Hybrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub method: SolverMethod,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub training: TrainingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<String>,
    #[serde(default = "default_unc")]
    pub unc: Vec<f64>,
    #[serde(default = "default_q_values")]
    pub q_values: Vec<f64>,
    /// Draw the drift per path from the prior; `false` fixes it at the prior mean.
    #[serde(default = "default_true")]
    pub draw_drift: bool,
}

fn default_strategies() -> Vec<String> {
    ["learning", "non-learning", "ew", "merton"].iter().map(|s| s.to_string()).collect()
}

fn default_unc() -> Vec<f64> {
    vec![1.0 / 6.0, 1.0, 3.0, 6.0, 12.0]
}

fn default_q_values() -> Vec<f64> {
    vec![0.7, 0.4, 0.1]
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub market: MarketSection,
    pub solver: SolverSection,
    pub run: RunSection,
}

pub const STRATEGIES: [&str; 4] = ["learning", "non-learning", "ew", "merton"];

impl ExperimentConfig {
    /// Three assets, one year, 24 dates, 1000 paths.
    pub fn table2() -> Self {
        let a = AnnualInputs::table2();
        Self {
            market: MarketSection {
                d: 3,
                horizon: a.horizon,
                n_steps: a.n_steps,
                n_paths: 1000,
                p: a.p,
                q: a.q,
                drift_mean: a.drift_mean,
                drift_cov: a.drift_cov,
                noise_vol: a.noise_vol,
                noise_corr: a.noise_corr,
                noise_cov_check: Some(vec![
                    vec![0.0064, -0.00032, 0.00352],
                    vec![-0.00032, 0.0016, -0.0022],
                    vec![0.00352, -0.0022, 0.0484],
                ]),
                x0: a.x0,
            },
            solver: SolverSection { method: SolverMethod::Grid, grid: GridConfig::default(), training: TrainingConfig::default() },
            run: RunSection {
                seed: 2021,
                out_dir: PathBuf::from("runs/table2"),
                strategies: default_strategies(),
                unc: default_unc(),
                q_values: default_q_values(),
                draw_drift: true,
            },
        }
    }

    pub fn annual_inputs(&self) -> AnnualInputs {
        let m = &self.market;
        AnnualInputs {
            horizon: m.horizon,
            n_steps: m.n_steps,
            p: m.p,
            q: m.q,
            drift_mean: m.drift_mean.clone(),
            drift_cov: m.drift_cov.clone(),
            noise_vol: m.noise_vol.clone(),
            noise_corr: m.noise_corr.clone(),
            x0: m.x0,
        }
    }

    /// Per-step market parameters.
    pub fn market_params(&self) -> Result<MarketParams> {
        self.annual_inputs().to_params().context("market")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.market;
        check_len("market.drift_mean", m.drift_mean.len(), m.d)?;
        check_square("market.drift_cov", &m.drift_cov, m.d)?;
        check_len("market.noise_vol", m.noise_vol.len(), m.d)?;
        check_square("market.noise_corr", &m.noise_corr, m.d)?;
        for (i, v) in m.noise_vol.iter().enumerate() {
            if !(*v > 0.0) {
                bail!("market.noise_vol[{i}]: volatility must be positive, got {v}");
            }
        }
        if m.n_paths == 0 {
            bail!("market.n_paths: at least one path is required");
        }
        let gamma = self.annual_inputs().noise_cov().context("market.noise_corr")?;
        if let Some(check) = &m.noise_cov_check {
            check_square("market.noise_cov_check", check, m.d)?;
            for i in 0..m.d {
                for j in 0..m.d {
                    if (gamma[(i, j)] - check[i][j]).abs() > 1e-12 {
                        bail!(
                            "market.noise_cov_check[{i}][{j}]: assembled covariance {} differs from {}",
                            gamma[(i, j)],
                            check[i][j]
                        );
                    }
                }
            }
        }
        self.market_params()?;
        self.solver.training.validate().context("solver.training")?;
        if self.solver.grid.r_nodes < 2 || self.solver.grid.b_nodes == 0 || self.solver.grid.quad_order == 0 {
            bail!("solver.grid: need r_nodes >= 2, b_nodes >= 1, quad_order >= 1");
        }
        for (i, s) in self.run.strategies.iter().enumerate() {
            if !STRATEGIES.contains(&s.as_str()) {
                bail!("run.strategies[{i}]: unknown strategy '{s}' (expected one of {STRATEGIES:?})");
            }
        }
        for (i, u) in self.run.unc.iter().enumerate() {
            if !(*u > 0.0) {
                bail!("run.unc[{i}]: uncertainty scale must be positive, got {u}");
            }
        }
        for (i, q) in self.run.q_values.iter().enumerate() {
            if !(*q > 0.0 && *q < 1.0) {
                bail!("run.q_values[{i}]: floor must lie in (0,1), got {q}");
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_len(key: &str, got: usize, d: usize) -> Result<()> {
    if got != d {
        bail!("{key}: expected {d} entries, got {got}");
    }
    Ok(())
}

fn check_square(key: &str, m: &[Vec<f64>], d: usize) -> Result<()> {
    check_len(key, m.len(), d)?;
    for (i, row) in m.iter().enumerate() {
        check_len(&format!("{key}[{i}]"), row.len(), d)?;
    }
    Ok(())
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ExperimentConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))
}
