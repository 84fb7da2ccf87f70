//! Subcommands. Each writes its artifacts plus `manifest-<name>.json` into the
//! output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ddlearn_core::dp_grid::{self, MertonSolution};
use ddlearn_core::filter::compare_filters;
use ddlearn_core::hybrid_now;
use ddlearn_core::simulator::{self, convergence_study, sensitivity_slice, ConvergenceReport, SensitivitySlice};
use ddlearn_core::{
    MarketParams, MetricsReport, PathEnsemble, Policy, PolicySolver, PolicyStack, PriorMode, SimOptions, Strategy,
    ValueGrid,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{load_config, ExperimentConfig, SolverMethod};
use crate::output::{csv_row, write_file};

#[derive(Debug, Parser)]
#[command(name = "ddlearn", version, about = "Drawdown-constrained portfolio experiments with drift learning")]
pub struct Cli {
    /// Experiment file (TOML). Defaults to the built-in three-asset preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `run.out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for the solvers and the simulator.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Record that every reduction runs in a fixed order (always the case) in the manifest.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PriorArg {
    Bayesian,
    Dirac,
}

impl From<PriorArg> for PriorMode {
    fn from(p: PriorArg) -> Self {
        match p {
            PriorArg::Bayesian => PriorMode::Bayesian,
            PriorArg::Dirac => PriorMode::Dirac,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Learning,
    NonLearning,
    Ew,
    Merton,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Kalman covariance recursion vs closed form, and particle vs Kalman posterior mean.
    FilterCheck {
        #[arg(long, default_value_t = 100_000)]
        atoms: usize,
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
    /// Tensor-grid backward induction; writes `grid-<prior>.json`.
    SolveGrid {
        #[arg(long, value_enum, default_value_t = PriorArg::Bayesian)]
        prior: PriorArg,
    },
    /// Neural backward solver; writes the policy stack `hybrid-<prior>/`.
    SolveHybrid {
        #[arg(long, value_enum, default_value_t = PriorArg::Bayesian)]
        prior: PriorArg,
        /// Divide the epoch counts by this factor.
        #[arg(long, default_value_t = 1)]
        reduce: usize,
    },
    /// Constrained Merton constant weights and value; writes `merton.json`.
    Merton,
    /// Monte-Carlo evaluation on shared paths; writes per-strategy CSVs and `metrics.json`.
    Simulate {
        #[arg(long, value_enum, default_value_t = StrategyArg::All)]
        strategy: StrategyArg,
        /// Learning policy: a grid file or a policy-stack directory.
        #[arg(long)]
        learning_policy: Option<PathBuf>,
        /// Non-Learning policy: a grid file or a policy-stack directory.
        #[arg(long)]
        non_learning_policy: Option<PathBuf>,
        /// Solve missing Learning/Non-Learning policies with the configured solver.
        #[arg(long)]
        solve: bool,
        /// Include per-step weights in the per-path CSV.
        #[arg(long)]
        weights: bool,
    },
    /// Learning vs Non-Learning across prior scales `run.unc`.
    Sensitivity,
    /// Non-Learning strategies for `run.q_values` against the Merton weights.
    Convergence,
    /// Summarises `metrics.json` and `sensitivity.json` into `report.md`.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::FilterCheck { .. } => "filter-check",
            Command::SolveGrid { .. } => "solve-grid",
            Command::SolveHybrid { .. } => "solve-hybrid",
            Command::Merton => "merton",
            Command::Simulate { .. } => "simulate",
            Command::Sensitivity => "sensitivity",
            Command::Convergence => "convergence",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: u64,
    pub config_sha256: String,
    pub threads: Option<usize>,
    pub deterministic: bool,
    pub outputs: Vec<OutputEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Ctx {
    cfg: ExperimentConfig,
    params: MarketParams,
    seed: u64,
    out: PathBuf,
    outputs: Vec<OutputEntry>,
}

impl Ctx {
    fn emit(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(name);
        write_file(&path, bytes)?;
        self.record(name, bytes);
        Ok(path)
    }

    fn record(&mut self, name: &str, bytes: &[u8]) {
        self.outputs.retain(|e| e.file != name);
        self.outputs.push(OutputEntry { file: name.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
    }

    /// Records every file below `dir` (relative names, sorted).
    fn record_dir(&mut self, dir: &str) -> Result<()> {
        let mut names: Vec<_> = std::fs::read_dir(self.out.join(dir))?
            .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect::<std::io::Result<_>>()?;
        names.sort();
        for n in names {
            let rel = format!("{dir}/{n}");
            let bytes = std::fs::read(self.out.join(&rel))?;
            self.record(&rel, &bytes);
        }
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.emit(name, text.as_bytes())
    }

    fn solver(&self) -> Box<dyn PolicySolver> {
        match self.cfg.solver.method {
            SolverMethod::Grid => Box::new(self.cfg.solver.grid.clone()),
            SolverMethod::Hybrid => {
                Box::new(hybrid_now::TrainingConfig { seed: self.seed, ..self.cfg.solver.training.clone() })
            }
        }
    }

    fn sim_options(&self) -> SimOptions {
        SimOptions { n_paths: self.cfg.market.n_paths, seed: self.seed, draw_drift: self.cfg.run.draw_drift }
    }

    fn merton(&self) -> Result<MertonSolution> {
        Ok(dp_grid::merton_solve(&self.params, self.cfg.solver.grid.quad_order, &self.cfg.solver.grid.search)?)
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run_from_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run(Cli::try_parse_from(args)?)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        // A pool may already exist when called repeatedly from tests; that is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::table2(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.run.out_dir = out.clone();
    }
    cfg.validate()?;
    let params = cfg.market_params()?;
    let config_sha256 = sha256_hex(cfg.to_toml()?.as_bytes());
    let mut ctx = Ctx { seed: cfg.run.seed, out: cfg.run.out_dir.clone(), cfg, params, outputs: Vec::new() };
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;

    match &cli.command {
        Command::FilterCheck { atoms, steps } => filter_check(&mut ctx, *atoms, *steps)?,
        Command::SolveGrid { prior } => solve_grid(&mut ctx, (*prior).into())?,
        Command::SolveHybrid { prior, reduce } => solve_hybrid(&mut ctx, (*prior).into(), *reduce)?,
        Command::Merton => merton(&mut ctx)?,
        Command::Simulate { strategy, learning_policy, non_learning_policy, solve, weights } => simulate(
            &mut ctx,
            *strategy,
            learning_policy.as_deref(),
            non_learning_policy.as_deref(),
            *solve,
            *weights,
        )?,
        Command::Sensitivity => sensitivity(&mut ctx)?,
        Command::Convergence => convergence(&mut ctx)?,
        Command::Report => report(&mut ctx)?,
    }

    let manifest = Manifest {
        tool: "ddlearn".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: cli.command.name().into(),
        seed: ctx.seed,
        config_sha256,
        threads: cli.threads,
        deterministic: cli.deterministic,
        outputs: std::mem::take(&mut ctx.outputs),
    };
    let name = format!("manifest-{}.json", manifest.subcommand);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_file(&ctx.out.join(name), text.as_bytes())?;
    Ok(())
}

fn filter_check(ctx: &mut Ctx, atoms: usize, steps: usize) -> Result<()> {
    let cmp = compare_filters(&ctx.params, steps, atoms, ctx.seed)?;
    println!("sigma recursion vs closed form: max abs error {:.3e}", cmp.sigma_max_error);
    println!("particle vs kalman after {steps} steps: max |z| = {:.3} (ESS {:.0})", cmp.max_z(), cmp.ess);
    ctx.json("filter_check.json", &cmp)?;
    Ok(())
}

fn prior_tag(prior: PriorMode) -> &'static str {
    match prior {
        PriorMode::Bayesian => "bayesian",
        PriorMode::Dirac => "dirac",
    }
}

fn solve_grid(ctx: &mut Ctx, prior: PriorMode) -> Result<()> {
    let grid = dp_grid::solve_backward(&ctx.params, &ctx.cfg.solver.grid.clone().with_prior(prior))?;
    let shape = grid.shape_report();
    println!(
        "w0(1, b0) = {:.10}; min first difference {:.3e}; max second difference {:.3e}",
        grid.value(0, 1.0, ctx.params.b0.as_slice()),
        shape.min_first_diff,
        shape.max_second_diff
    );
    let bytes = serde_json::to_vec(&grid)?;
    ctx.emit(&format!("grid-{}.json", prior_tag(prior)), &bytes)?;
    Ok(())
}

fn solve_hybrid(ctx: &mut Ctx, prior: PriorMode, reduce: usize) -> Result<()> {
    if reduce == 0 {
        bail!("--reduce must be positive");
    }
    let cfg = hybrid_now::TrainingConfig { prior, seed: ctx.seed, ..ctx.cfg.solver.training.clone() }.reduced(reduce);
    let stack = hybrid_now::solve_with_progress(&ctx.params, &cfg, |rep| {
        eprintln!(
            "step {:2}: control loss {:.6e}, value loss {:.3e}, infeasible {:.3}",
            rep.k, rep.control_loss, rep.value_loss, rep.infeasible_fraction
        )
    })?;
    let dir = format!("hybrid-{}", prior_tag(prior));
    stack.save(&ctx.out.join(&dir))?;
    ctx.record_dir(&dir)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct MertonOutput<'a> {
    s: f64,
    a_m: &'a [f64],
    n_steps: usize,
    p: f64,
    /// `v^M_0(1) = S^N / p`.
    v0: f64,
}

fn merton(ctx: &mut Ctx) -> Result<()> {
    let m = ctx.merton()?;
    let out = MertonOutput { s: m.s, a_m: &m.a_m, n_steps: m.n_steps, p: m.p, v0: m.value(0, 1.0) };
    println!("S = {:.12}, a_M = {:?}, v0(1) = {:.12}", out.s, out.a_m, out.v0);
    ctx.json("merton.json", &out)?;
    Ok(())
}

/// Loads a grid file or a policy-stack directory and checks it matches the market.
pub fn load_policy(path: &Path, params: &MarketParams) -> Result<Arc<dyn Policy>> {
    let (d, q, n): (usize, f64, usize);
    let policy: Arc<dyn Policy> = if path.is_dir() {
        let stack = PolicyStack::load(path).with_context(|| format!("loading policy stack {}", path.display()))?;
        (d, q, n) = (stack.d, stack.q, stack.n_steps);
        Arc::new(stack)
    } else {
        let grid = ValueGrid::load(path).with_context(|| format!("loading grid {}", path.display()))?;
        (d, q, n) = (grid.d, grid.q, grid.n_steps);
        Arc::new(grid)
    };
    if d != params.d || n != params.n_steps || (q - params.q).abs() > 1e-12 {
        bail!(
            "policy {} was solved for d={d}, N={n}, q={q} but the market has d={}, N={}, q={}",
            path.display(),
            params.d,
            params.n_steps,
            params.q
        );
    }
    Ok(policy)
}

fn resolve_policy(ctx: &Ctx, name: &str, path: Option<&Path>, solve: bool, prior: PriorMode) -> Result<Arc<dyn Policy>> {
    match (path, solve) {
        (Some(p), _) => load_policy(p, &ctx.params),
        (None, true) => Ok(ctx.solver().solve(&ctx.params, prior)?),
        (None, false) => Err(anyhow!(
            "strategy '{name}' needs a policy: pass --{name}-policy <grid file | policy dir> (from solve-grid/solve-hybrid) or --solve"
        )),
    }
}

fn simulate(
    ctx: &mut Ctx,
    which: StrategyArg,
    learning: Option<&Path>,
    non_learning: Option<&Path>,
    solve: bool,
    weights: bool,
) -> Result<()> {
    let names: Vec<String> = match which {
        StrategyArg::All => ctx.cfg.run.strategies.clone(),
        StrategyArg::Learning => vec!["learning".into()],
        StrategyArg::NonLearning => vec!["non-learning".into()],
        StrategyArg::Ew => vec!["ew".into()],
        StrategyArg::Merton => vec!["merton".into()],
    };
    let opts = ctx.sim_options();
    let mut ensembles = Vec::new();
    for name in &names {
        let strategy = match name.as_str() {
            "learning" => Strategy::learning(resolve_policy(ctx, name, learning, solve, PriorMode::Bayesian)?),
            "non-learning" => Strategy::non_learning(resolve_policy(ctx, name, non_learning, solve, PriorMode::Dirac)?),
            "ew" => Strategy::equal_weight(ctx.params.q, ctx.params.d),
            "merton" => Strategy::merton(ctx.merton()?.a_m),
            other => bail!("unknown strategy '{other}'"),
        };
        let ens = simulator::simulate(&strategy, &ctx.params, &opts)?;
        write_ensemble(ctx, &ens, weights)?;
        ensembles.push(ens);
    }
    let report = MetricsReport::from_ensembles(&ensembles, ctx.seed)?;
    for m in &report.strategies {
        println!(
            "{:>13}: perf {:+.4}%  std {:.4}%  avg MD {:+.4}%  worst MD {:+.4}%",
            m.strategy,
            100.0 * m.avg_performance,
            100.0 * m.std_terminal,
            100.0 * m.avg_md,
            100.0 * m.worst_md
        );
    }
    ctx.json("metrics.json", &report)?;
    Ok(())
}

fn write_ensemble(ctx: &mut Ctx, ens: &PathEnsemble, weights: bool) -> Result<()> {
    let d = ens.d;
    let mut header: Vec<String> = vec!["path".into()];
    header.extend((1..=d).map(|i| format!("drift_{i}")));
    header.push("terminal_wealth".into());
    header.push("max_drawdown".into());
    if weights {
        for k in 0..ens.n_steps {
            header.extend((1..=d).map(|i| format!("a_{k}_{i}")));
        }
    }
    let mut text = header.join(",") + "\n";
    let md = ens.max_drawdowns();
    for (i, (x, mdi)) in ens.terminal().iter().zip(&md).enumerate() {
        let mut row = ens.drift[i].clone();
        row.push(*x);
        row.push(*mdi);
        if weights {
            row.extend_from_slice(&ens.weights[i]);
        }
        text += &format!("{i},{}\n", csv_row(&row));
    }
    ctx.emit(&format!("paths-{}.csv", ens.strategy), text.as_bytes())?;

    let mut bands = String::from("t,mean,lo95,hi95\n");
    for row in ens.wealth_bands(ctx.params.horizon) {
        bands += &csv_row(&row);
        bands.push('\n');
    }
    ctx.emit(&format!("bands-{}.csv", ens.strategy), bands.as_bytes())?;

    let mut w = String::from("t");
    for i in 1..=d {
        write!(w, ",a_{i}")?;
    }
    w.push('\n');
    for (k, row) in ens.mean_weights().iter().enumerate() {
        let t = ctx.params.horizon * k as f64 / ens.n_steps as f64;
        let mut vals = vec![t];
        vals.extend_from_slice(row);
        w += &csv_row(&vals);
        w.push('\n');
    }
    ctx.emit(&format!("weights-{}.csv", ens.strategy), w.as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityOutput {
    pub schema_version: u32,
    pub seed: u64,
    pub slices: Vec<SensitivitySlice>,
}

fn sensitivity(ctx: &mut Ctx) -> Result<()> {
    let solver = ctx.solver();
    let opts = ctx.sim_options();
    let non_learning = solver.solve(&ctx.params, PriorMode::Dirac)?;
    let mut slices = Vec::new();
    for &unc in &ctx.cfg.run.unc {
        let scaled = ctx.params.with_prior_scale(unc)?;
        let learning = solver.solve(&scaled, PriorMode::Bayesian)?;
        let slice = sensitivity_slice(&scaled, unc, learning, non_learning.clone(), true, &opts)?;
        println!("unc {unc:>8.4}: learning - non-learning performance {:+.4}%", 100.0 * slice.performance_gap());
        slices.push(slice);
    }
    let mut text = String::from("t");
    for s in &slices {
        write!(text, ",unc_{}", s.unc)?;
    }
    text.push('\n');
    for k in 0..=ctx.params.n_steps {
        let mut row = vec![ctx.params.horizon * k as f64 / ctx.params.n_steps as f64];
        row.extend(slices.iter().map(|s| s.excess[k]));
        text += &csv_row(&row);
        text.push('\n');
    }
    ctx.emit("excess.csv", text.as_bytes())?;
    ctx.json("sensitivity.json", &SensitivityOutput { schema_version: simulator::REPORT_SCHEMA_VERSION, seed: ctx.seed, slices })?;
    Ok(())
}

fn convergence(ctx: &mut Ctx) -> Result<()> {
    let solver = ctx.solver();
    let opts = ctx.sim_options();
    let grid = &ctx.cfg.solver.grid;
    let rep: ConvergenceReport =
        convergence_study(&ctx.cfg.run.q_values, &ctx.params, solver.as_ref(), grid.quad_order, &grid.search, &opts)?;
    for s in &rep.slices {
        println!("q {:.3}: sup distance of mean weights to Merton {:.4}", s.q, s.distance);
    }
    let n = ctx.params.n_steps;
    let horizon = ctx.params.horizon;
    let t = |k: usize| horizon * k as f64 / n as f64;

    let mut wealth = String::from("t,merton");
    for s in &rep.slices {
        write!(wealth, ",q_{}", s.q)?;
    }
    wealth.push('\n');
    for k in 0..=n {
        let mut row = vec![t(k), rep.merton_mean_wealth[k]];
        row.extend(rep.slices.iter().map(|s| s.mean_wealth[k]));
        wealth += &csv_row(&row);
        wealth.push('\n');
    }
    ctx.emit("convergence-wealth.csv", wealth.as_bytes())?;

    let d = ctx.params.d;
    let mut weights = String::from("t");
    for i in 1..=d {
        write!(weights, ",merton_a_{i}")?;
    }
    for s in &rep.slices {
        for i in 1..=d {
            write!(weights, ",q_{}_a_{i}", s.q)?;
        }
    }
    weights.push('\n');
    for k in 0..n {
        let mut row = vec![t(k)];
        row.extend_from_slice(&rep.merton.a_m);
        for s in &rep.slices {
            row.extend_from_slice(&s.mean_weights[k]);
        }
        weights += &csv_row(&row);
        weights.push('\n');
    }
    ctx.emit("convergence-weights.csv", weights.as_bytes())?;
    ctx.json("convergence.json", &rep)?;
    Ok(())
}

fn pct(x: f64) -> String {
    format!("{:+.2}%", 100.0 * x)
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.3}"))
}

fn report(ctx: &mut Ctx) -> Result<()> {
    let metrics_path = ctx.out.join("metrics.json");
    let text = std::fs::read_to_string(&metrics_path)
        .with_context(|| format!("{} not found; run `simulate` first", metrics_path.display()))?;
    let metrics: MetricsReport = serde_json::from_str(&text)?;
    let mut md = String::from("# Results\n\n");
    writeln!(md, "Seed {}, {} paths.\n", metrics.seed, metrics.strategies.first().map_or(0, |s| s.n_paths))?;
    md += "| strategy | avg performance | std | Sharpe | avg MD | worst MD | Calmar |\n";
    md += "|---|---|---|---|---|---|---|\n";
    for m in &metrics.strategies {
        writeln!(
            md,
            "| {} | {} | {:.2}% | {} | {} | {} | {} |",
            m.strategy,
            pct(m.avg_performance),
            100.0 * m.std_terminal,
            opt(m.sharpe),
            pct(m.avg_md),
            pct(m.worst_md),
            opt(m.calmar)
        )?;
    }
    if !metrics.comparisons.is_empty() {
        md += "\n| comparison | performance | std | Sharpe (rel) | avg MD | worst MD | Calmar (rel) |\n";
        md += "|---|---|---|---|---|---|---|\n";
        for c in &metrics.comparisons {
            writeln!(
                md,
                "| {} - {} | {} | {} | {} | {} | {} | {} |",
                c.left,
                c.right,
                pct(c.performance_diff),
                pct(c.std_diff),
                opt(c.sharpe_rel),
                pct(c.avg_md_diff),
                pct(c.worst_md_diff),
                opt(c.calmar_rel)
            )?;
        }
    }
    let sens_path = ctx.out.join("sensitivity.json");
    if sens_path.exists() {
        let sens: SensitivityOutput = serde_json::from_str(&std::fs::read_to_string(&sens_path)?)?;
        md += "\n## Prior uncertainty\n\n| unc | learning perf | non-learning perf | gap | learning avg MD | non-learning avg MD |\n";
        md += "|---|---|---|---|---|---|\n";
        for s in &sens.slices {
            writeln!(
                md,
                "| {:.4} | {} | {} | {} | {} | {} |",
                s.unc,
                pct(s.learning.avg_performance),
                pct(s.non_learning.avg_performance),
                pct(s.performance_gap()),
                pct(s.learning.avg_md),
                pct(s.non_learning.avg_md)
            )?;
        }
    }
    print!("{md}");
    ctx.emit("report.md", md.as_bytes())?;
    Ok(())
}
