//! Maximization of a concave objective over the scaled simplex
//! `{a ∈ ℝ^d : a ≥ 0, Σa ≤ budget}`.
//!
//! A lattice search with spacing `step` locates the best cell, then coordinate
//! moves (`±h·eᵢ` and transfers `h·(eᵢ − eⱼ)`) refine it with `h` halved each
//! round. Ties go to the candidate with the smallest total weight.

use serde::{Deserialize, Serialize};

use crate::market::BUDGET_TOL;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimplexSearch {
    /// Lattice spacing in weight units.
    pub step: f64,
    /// Refinement rounds; the move length starts at `step/2` and halves.
    pub rounds: usize,
}

impl Default for SimplexSearch {
    fn default() -> Self {
        Self { step: 0.05, rounds: 3 }
    }
}

fn better(val: f64, sum: f64, best: f64, best_sum: f64) -> bool {
    let tol = 1e-14 * best.abs().max(1e-300);
    val > best + tol || (val >= best - tol && sum < best_sum - 1e-15)
}

/// Lattice points `step·m`, `m ∈ ℕ^d`, with total at most `budget`, plus the
/// scaled vertices `budget·eᵢ`.
pub fn lattice(d: usize, budget: f64, step: f64) -> Vec<Vec<f64>> {
    let m = ((budget + BUDGET_TOL) / step).floor().max(0.0) as usize;
    let mut out = Vec::new();
    let mut idx = vec![0usize; d];
    loop {
        out.push(idx.iter().map(|&i| i as f64 * step).collect());
        // next composition with total ≤ m
        let mut k = 0;
        loop {
            if k == d {
                if budget > 0.0 {
                    for i in 0..d {
                        let mut v = vec![0.0; d];
                        v[i] = budget;
                        out.push(v);
                    }
                }
                return out;
            }
            idx[k] += 1;
            if idx.iter().sum::<usize>() <= m {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Returns the maximizer and the maximum.
pub fn maximize<F: FnMut(&[f64]) -> f64>(d: usize, budget: f64, cfg: &SimplexSearch, mut f: F) -> (Vec<f64>, f64) {
    let zero = vec![0.0; d];
    let mut best = zero.clone();
    let mut best_val = f(&zero);
    if budget <= 0.0 || d == 0 {
        return (best, best_val);
    }
    let mut best_sum = 0.0;
    for cand in lattice(d, budget, cfg.step).into_iter().skip(1) {
        let v = f(&cand);
        let s: f64 = cand.iter().sum();
        if better(v, s, best_val, best_sum) {
            best = cand;
            best_val = v;
            best_sum = s;
        }
    }
    refine(d, budget, cfg, &mut f, best, best_val)
}

/// Coordinate refinement from `start` (assumed feasible).
pub fn refine<F: FnMut(&[f64]) -> f64>(
    d: usize,
    budget: f64,
    cfg: &SimplexSearch,
    f: &mut F,
    start: Vec<f64>,
    start_val: f64,
) -> (Vec<f64>, f64) {
    let mut cur = start;
    let mut cur_val = start_val;
    let mut cand = vec![0.0; d];
    let mut h = cfg.step / 2.0;
    for _ in 0..cfg.rounds {
        for _ in 0..64 {
            let sum: f64 = cur.iter().sum();
            let room = (budget - sum).max(0.0);
            let mut best_move: Option<(Vec<f64>, f64)> = None;
            let consider = |cand: &[f64], f: &mut F, best_move: &mut Option<(Vec<f64>, f64)>| {
                let v = f(cand);
                let s: f64 = cand.iter().sum();
                let (ref_val, ref_sum) = match best_move {
                    Some((b, bv)) => (*bv, b.iter().sum::<f64>()),
                    None => (cur_val, sum),
                };
                if better(v, s, ref_val, ref_sum) {
                    *best_move = Some((cand.to_vec(), v));
                }
            };
            for i in 0..d {
                let up = h.min(room);
                if up > 1e-15 {
                    cand.copy_from_slice(&cur);
                    cand[i] += up;
                    consider(&cand, f, &mut best_move);
                }
                let down = h.min(cur[i]);
                if down > 1e-15 {
                    cand.copy_from_slice(&cur);
                    cand[i] -= down;
                    consider(&cand, f, &mut best_move);
                    for j in 0..d {
                        if j != i {
                            cand.copy_from_slice(&cur);
                            cand[i] -= down;
                            cand[j] += down;
                            consider(&cand, f, &mut best_move);
                        }
                    }
                }
            }
            match best_move {
                Some((a, v)) => {
                    cur = a;
                    cur_val = v;
                }
                None => break,
            }
        }
        h /= 2.0;
    }
    (cur, cur_val)
}
