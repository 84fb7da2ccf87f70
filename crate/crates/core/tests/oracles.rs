//! Cross-checks against independent computations: Monte-Carlo sampling,
//! scalar closed forms, finite differences and brute-force optimization.

use std::sync::Arc;

use ddlearn_core::dp_grid::{self, GridConfig, PriorMode};
use ddlearn_core::filter::{bhat_marginal, compare_filters, kalman_step, KalmanState};
use ddlearn_core::market::{AnnualInputs, NoiseSampler};
use ddlearn_core::neural::{self, DenseNet, Init};
use ddlearn_core::rng::substream;
use ddlearn_core::simplex::SimplexSearch;
use ddlearn_core::simulator::{simulate, SimOptions, Strategy};
use ddlearn_core::{linalg, MarketParams};
use rand::Rng;
use rand_distr::StandardNormal;

fn table2() -> MarketParams {
    AnnualInputs::table2().to_params().unwrap()
}

#[test]
fn particle_filter_tracks_kalman_mean() {
    let cmp = compare_filters(&table2(), 5, 20_000, 11).unwrap();
    assert!(cmp.max_z() < 4.0, "{cmp:?}");
    assert!(cmp.sigma_max_error < 1e-12);
}

#[test]
fn bhat_sample_covariance_matches_marginal() {
    let p = table2();
    let k = 6;
    let n = 100_000;
    let d = p.d;
    let prior_l = linalg::cholesky_lower(&p.sigma0, "prior").unwrap();
    let noise = NoiseSampler::new(&p.gamma).unwrap();
    let mut rng = substream(5, "marginal", 0);
    let mut sum = vec![0.0; d];
    let mut sq = vec![vec![0.0; d]; d];
    for _ in 0..n {
        let xi: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..d).map(|i| p.b0[i] + (0..=i).map(|j| prior_l[(i, j)] * xi[j]).sum::<f64>()).collect();
        let mut st = KalmanState::from_params(&p);
        for _ in 0..k {
            st = kalman_step(&st, &noise.sample(&mut rng, &b), &p.gamma).unwrap();
        }
        for i in 0..d {
            let di = st.bhat[i] - p.b0[i];
            sum[i] += di;
            for (j, cell) in sq[i].iter_mut().enumerate() {
                *cell += di * (st.bhat[j] - p.b0[j]);
            }
        }
    }
    let want = bhat_marginal(&p.sigma0, &p.gamma, k).unwrap();
    for i in 0..d {
        // mean zero within 5 standard errors
        assert!((sum[i] / n as f64).abs() < 5.0 * (want[(i, i)] / n as f64).sqrt());
        let var = sq[i][i] / n as f64;
        assert!((var / want[(i, i)] - 1.0).abs() < 0.03, "coordinate {i}: {var} vs {}", want[(i, i)]);
    }
}

#[test]
fn network_gradients_match_finite_differences() {
    let mut rng = substream(3, "fd", 0);
    for (d, out) in [(1, 1), (2, 2), (3, 3), (3, 1)] {
        let net = DenseNet::new(neural::architecture(d, out), Init::HeUniform, 1e-3, &mut rng)
            .with_input_standardization(vec![0.8; d + 1], vec![2.0; d + 1]);
        let batch: Vec<Vec<f64>> = (0..4).map(|_| (0..=d).map(|_| rng.random_range(-1.0..2.0)).collect()).collect();
        let coef: Vec<f64> = (0..out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |o: &[f64]| -> (f64, Vec<f64>) {
            let l = o.iter().zip(&coef).map(|(a, c)| c * a * a).sum();
            (l, o.iter().zip(&coef).map(|(a, c)| 2.0 * c * a).collect())
        };
        let (_, g) = neural::grad(&net, &batch, |_, o| loss(o)).unwrap();
        let total = |n: &DenseNet| -> f64 {
            batch.iter().map(|x| loss(&n.forward(x).unwrap()).0).sum::<f64>() / batch.len() as f64 + n.l2_penalty()
        };
        for _ in 0..25 {
            let i = rng.random_range(0..net.n_params());
            let h = 1e-5;
            let mut plus = net.clone();
            plus.params[i] += h;
            let mut minus = net.clone();
            minus.params[i] -= h;
            let fd = (total(&plus) - total(&minus)) / (2.0 * h);
            let scale = g[i].abs().max(fd.abs()).max(1e-7);
            assert!((g[i] - fd).abs() / scale < 1e-4, "param {i}: analytic {} vs fd {fd}", g[i]);
        }
    }
}

/// `E[(1 + a(e^{b+ε} − 1))^p]` by plain Monte Carlo.
fn merton_mc(p: &MarketParams, a: &[f64], n: usize, seed: u64) -> (f64, f64) {
    let noise = NoiseSampler::new(&p.gamma).unwrap();
    let mut rng = substream(seed, "merton-mc", 0);
    let b: Vec<f64> = p.b0.iter().copied().collect();
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let r = noise.sample(&mut rng, &b);
        let g: f64 = 1.0 + a.iter().zip(&r.0).map(|(w, x)| w * x.exp_m1()).sum::<f64>();
        let v = g.powf(p.p);
        s += v;
        s2 += v * v;
    }
    let m = s / n as f64;
    (m, ((s2 / n as f64 - m * m) / n as f64).sqrt())
}

#[test]
fn merton_constant_matches_monte_carlo() {
    let p = table2();
    let sol = dp_grid::merton_solve(&p, 8, &SimplexSearch::default()).unwrap();
    let (mc, se) = merton_mc(&p, &sol.a_m, 10_000_000, 1);
    assert!((mc - sol.s).abs() < 4.0 * se, "quadrature {} vs mc {mc} ± {se}", sol.s);
    // no feasible corner beats the reported optimum beyond sampling error
    for e in 0..3 {
        let mut a = vec![0.0; 3];
        a[e] = 1.0;
        let (alt, se_alt) = merton_mc(&p, &a, 1_000_000, 2 + e as u64);
        assert!(alt <= sol.s + 4.0 * se_alt, "corner {e}: {alt} > {}", sol.s);
    }
}

/// Scalar brute force for `d = 1`, `N = 2`: fine action grids and nested
/// Monte Carlo with common random numbers.
fn nested_oracle(p: &MarketParams, n_outer: usize, n_inner: usize) -> f64 {
    let (s0, g) = (p.sigma0[(0, 0)], p.gamma[(0, 0)]);
    let (b0, q, pw) = (p.b0[0], p.q, p.p);
    let gain1 = s0 / (s0 + g);
    let s1 = s0 * g / (s0 + g);
    let mut rng = substream(9, "nested", 0);
    let outer: Vec<f64> = (0..n_outer).map(|_| (s0 + g).sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
    let inner: Vec<f64> = (0..n_inner).map(|_| (s1 + g).sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
    let m = |a: f64, b1: f64| -> f64 {
        inner.iter().map(|e| (1.0 + a * (b1 + e).exp_m1()).powf(pw)).sum::<f64>() / n_inner as f64
    };
    // per outer draw: m on a fine action grid in [0, 1 − q]
    let acts: Vec<f64> = (0..=200).map(|i| (1.0 - q) * i as f64 / 200.0).collect();
    let tables: Vec<Vec<f64>> = outer.iter().map(|e| acts.iter().map(|a| m(*a, b0 + gain1 * e)).collect()).collect();
    // best value with budget c: maximum over grid actions ≤ c
    let best = |table: &[f64], c: f64| -> f64 {
        table.iter().zip(&acts).filter(|(_, a)| **a <= c + 1e-15).map(|(v, _)| *v).fold(f64::MIN, f64::max)
    };
    let mut top = f64::MIN;
    for i in 0..=200 {
        let a0 = (1.0 - q) * i as f64 / 200.0;
        let v: f64 = outer
            .iter()
            .zip(&tables)
            .map(|(e, table)| {
                let y = 1.0 + a0 * (b0 + e).exp_m1();
                let r1 = y.min(1.0);
                y.max(1.0).powf(pw) * r1.powf(pw) / pw * best(table, 1.0 - q / r1)
            })
            .sum::<f64>()
            / n_outer as f64;
        top = top.max(v);
    }
    top
}

#[test]
fn two_step_grid_value_matches_brute_force() {
    let p = AnnualInputs {
        horizon: 2.0,
        n_steps: 2,
        p: 0.8,
        q: 0.5,
        drift_mean: vec![0.12],
        drift_cov: vec![vec![0.01]],
        noise_vol: vec![0.22],
        noise_corr: vec![vec![1.0]],
        x0: 1.0,
    }
    .to_params()
    .unwrap();
    let cfg = GridConfig { r_nodes: 201, b_nodes: 61, quad_order: 24, ..GridConfig::default() };
    let grid = dp_grid::solve_backward(&p, &cfg).unwrap();
    let w0 = grid.value(0, 1.0, p.b0.as_slice());
    let oracle = nested_oracle(&p, 1000, 1000);
    assert!((w0 / oracle - 1.0).abs() < 0.01, "grid {w0} vs oracle {oracle}");
}

#[test]
fn dirac_grid_policy_tends_to_merton_as_floor_vanishes() {
    let p = table2().with_q(1e-6).unwrap();
    let cfg = GridConfig { r_nodes: 101, b_nodes: 1, ..GridConfig::default() }.with_prior(PriorMode::Dirac);
    let grid = dp_grid::solve_backward(&p, &cfg).unwrap();
    let m = dp_grid::merton_solve(&p, cfg.quad_order, &cfg.search).unwrap();
    for k in 0..p.n_steps {
        let a = grid.eval_policy(k, 1.0, p.b0.as_slice());
        for (x, y) in a.iter().zip(&m.a_m) {
            assert!((x - y).abs() < 0.02, "k {k}: {a:?} vs {:?}", m.a_m);
        }
    }
    let rel = grid.value(0, 1.0, p.b0.as_slice()) / m.value(0, 1.0) - 1.0;
    assert!(rel.abs() < 1e-3, "{rel}");
}

#[test]
fn doubling_initial_wealth_doubles_every_path() {
    let p = table2();
    let mut p2 = p.clone();
    p2.x0 = 2.0;
    let opts = SimOptions::new(200, 4);
    for s in [Strategy::equal_weight(p.q, 3), Strategy::merton(vec![0.0, 0.0, 1.0])] {
        let a = simulate(&s, &p, &opts).unwrap();
        let b = simulate(&s, &p2, &opts).unwrap();
        for (x, y) in a.wealth.iter().flatten().zip(b.wealth.iter().flatten()) {
            assert_eq!(2.0 * x, *y);
        }
        assert_eq!(a.weights, b.weights);
    }
}

#[test]
fn learning_strategy_runs_on_grid_policy() {
    let p = AnnualInputs { n_steps: 4, ..AnnualInputs::table2() }.to_params().unwrap();
    let cfg = GridConfig { r_nodes: 6, b_nodes: 3, quad_order: 3, ..GridConfig::default() };
    let grid = Arc::new(dp_grid::solve_backward(&p, &cfg).unwrap());
    let ens = simulate(&Strategy::learning(grid), &p, &SimOptions::new(300, 8)).unwrap();
    assert!(ens.min_cushion() >= -1e-10);
    assert!(ens.maxima_nondecreasing());
    assert!(ens.ratios.iter().flatten().all(|r| *r >= p.q - 1e-12 && *r <= 1.0));
}
