//! Gauss–Hermite rules and their tensorized form for expectations under a
//! multivariate normal law.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;

/// Nodes and weights of the `n`-point physicists' Gauss–Hermite rule,
/// `∫ f(x) e^{−x²} dx ≈ Σ wᵢ f(xᵢ)`. Nodes are returned in increasing order.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "quadrature order must be positive");
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        // Asymptotic starting guesses for the largest roots, then from previous roots.
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            // Orthonormal Hermite recurrence.
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[m - 1] = 0.0;
    }
    let mut pairs: Vec<(f64, f64)> = x.into_iter().zip(w).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Tensor-product rule for `E[f(ε)]`, `ε ~ N(0, C)`.
#[derive(Debug, Clone)]
pub struct GaussianRule {
    pub d: usize,
    /// Nodes, row-major `m × d`.
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussianRule {
    /// Whitens with the Cholesky factor of `cov`; `order` points per dimension.
    pub fn new(cov: &DMatrix<f64>, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::Parameter("quadrature order must be positive".into()));
        }
        let l = linalg::cholesky_lower(cov, "quadrature covariance")?;
        Ok(Self::from_factor(&l, order))
    }

    /// Same, with an explicit square-root factor `L` (`L Lᵀ = C`).
    pub fn from_factor(l: &DMatrix<f64>, order: usize) -> Self {
        let d = l.nrows();
        let (x, w) = gauss_hermite(order);
        let sqrt2 = std::f64::consts::SQRT_2;
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        let m = order.pow(d as u32);
        let mut nodes = Vec::with_capacity(m * d);
        let mut weights = Vec::with_capacity(m);
        let mut idx = vec![0usize; d];
        let mut z = vec![0.0; d];
        for _ in 0..m {
            let mut wt = 1.0;
            for (k, &i) in idx.iter().enumerate() {
                z[k] = sqrt2 * x[i];
                wt *= w[i] * inv_sqrt_pi;
            }
            for r in 0..d {
                nodes.push((0..=r).map(|c| l[(r, c)] * z[c]).sum());
            }
            weights.push(wt);
            for slot in idx.iter_mut() {
                *slot += 1;
                if *slot < order {
                    break;
                }
                *slot = 0;
            }
        }
        Self { d, nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, j: usize) -> &[f64] {
        &self.nodes[j * self.d..(j + 1) * self.d]
    }

    pub fn expect<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> f64 {
        (0..self.len()).map(|j| self.weights[j] * f(self.node(j))).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_rules() {
        let (x, w) = gauss_hermite(2);
        assert!((x[1] - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((w[0] - std::f64::consts::PI.sqrt() / 2.0).abs() < 1e-14);
        let (x, _) = gauss_hermite(3);
        assert!(x[1].abs() < 1e-15);
        assert!((x[2] - 1.5f64.sqrt()).abs() < 1e-14);
        for n in 1..=20 {
            let (_, w) = gauss_hermite(n);
            let s: f64 = w.iter().sum();
            assert!((s - std::f64::consts::PI.sqrt()).abs() < 1e-13, "n={n}");
        }
    }

    #[test]
    fn gaussian_moments_are_exact() {
        let cov = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.2]);
        let rule = GaussianRule::new(&cov, 8).unwrap();
        assert_eq!(rule.len(), 64);
        assert!((rule.expect(|_| 1.0) - 1.0).abs() < 1e-14);
        assert!(rule.expect(|e| e[0]).abs() < 1e-15);
        assert!((rule.expect(|e| e[0] * e[1]) - 0.1).abs() < 1e-14);
        assert!((rule.expect(|e| e[1].powi(4)) - 3.0 * 0.04).abs() < 1e-14);
        // lognormal mean
        let m = rule.expect(|e| e[0].exp());
        assert!((m - 0.25f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_spd() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianRule::new(&cov, 4).is_err());
    }

    proptest! {
        #[test]
        fn polynomial_moments_are_exact(order in 1usize..10, var in 0.01f64..2.0) {
            let rule = GaussianRule::new(&DMatrix::from_element(1, 1, var), order).unwrap();
            // E[e^{2j}] = var^j (2j−1)!!, odd moments vanish; exact up to degree 2·order − 1
            let mut double_fact = 1.0;
            for deg in 0..2 * order {
                let got = rule.expect(|e| e[0].powi(deg as i32));
                let want = if deg % 2 == 1 {
                    0.0
                } else {
                    if deg > 0 {
                        double_fact *= (deg - 1) as f64;
                    }
                    var.powi(deg as i32 / 2) * double_fact
                };
                let scale = rule.expect(|e| e[0].abs().powi(deg as i32)).max(1.0);
                prop_assert!((got - want).abs() < 1e-12 * scale, "degree {}: {} vs {}", deg, got, want);
            }
        }
    }
}
