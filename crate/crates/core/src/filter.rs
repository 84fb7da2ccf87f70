//! Posterior inference on the unknown drift.
//!
//! With a Gaussian prior `N(b₀, Σ₀)` and Gaussian noise `N(0, Γ)` the posterior
//! after `k` observed returns is `N(B̂_k, Σ_k)` and follows the Kalman
//! recursion below; `Σ_k` is deterministic and has the closed form
//! `Σ₀ (Γ + kΣ₀)⁻¹ Γ`. The particle filter implements the general reweighting
//! recursion `μ_k(db) ∝ g(R_k − b) μ_{k−1}(db)` for arbitrary priors and is used
//! to cross-check the Kalman filter.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, symmetrize};
use crate::market::{MarketParams, ReturnSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalmanState {
    pub k: usize,
    pub bhat: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// Gain used to produce this state (zero at the prior).
    pub gain: DMatrix<f64>,
    /// Covariance of the innovation that produced this state, `Σ_{k−1} + Γ`.
    pub innov_cov: DMatrix<f64>,
}

impl KalmanState {
    pub fn prior(b0: &DVector<f64>, sigma0: &DMatrix<f64>) -> Self {
        let d = b0.len();
        Self {
            k: 0,
            bhat: b0.clone(),
            sigma: sigma0.clone(),
            gain: DMatrix::zeros(d, d),
            innov_cov: DMatrix::zeros(d, d),
        }
    }

    pub fn from_params(params: &MarketParams) -> Self {
        Self::prior(&params.b0, &params.sigma0)
    }
}

/// `K = Σ (Σ + Γ)⁻¹`.
pub fn kalman_gain(sigma: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    linalg::mul_spd_inverse(sigma, &(sigma + gamma), "Sigma + Gamma")
}

/// One Kalman update with the return observed over the next period.
pub fn kalman_step(prev: &KalmanState, ret: &ReturnSample, gamma: &DMatrix<f64>) -> Result<KalmanState> {
    let d = prev.bhat.len();
    if ret.0.len() != d {
        return Err(Error::Shape { expected: d, got: ret.0.len() });
    }
    let gain = kalman_gain(&prev.sigma, gamma)?;
    let innovation = ret.to_dvector() - &prev.bhat;
    let bhat = &prev.bhat + &gain * innovation;
    let sigma = symmetrize(&(&prev.sigma - &gain * &prev.sigma));
    Ok(KalmanState {
        k: prev.k + 1,
        bhat,
        sigma,
        gain,
        innov_cov: &prev.sigma + gamma,
    })
}

/// `Σ_k = Σ₀ (Γ + kΣ₀)⁻¹ Γ`.
pub fn sigma_closed_form(sigma0: &DMatrix<f64>, gamma: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    if k == 0 {
        return Ok(sigma0.clone());
    }
    let m = gamma + sigma0 * k as f64;
    let lu = m.clone().lu();
    let solved = lu
        .solve(gamma)
        .ok_or_else(|| Error::Numeric("Gamma + k Sigma0 is singular".into()))?;
    Ok(symmetrize(&(sigma0 * solved)))
}

/// Covariance of the posterior mean `B̂_k` under the prior: `Σ₀ − Σ_k`.
pub fn bhat_marginal(sigma0: &DMatrix<f64>, gamma: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&(sigma0 - sigma_closed_form(sigma0, gamma, k)?)))
}

/// Gains `K_1, …, K_N` of the Gaussian filter; they do not depend on data.
pub fn gain_schedule(params: &MarketParams) -> Result<Vec<DMatrix<f64>>> {
    (0..params.n_steps)
        .map(|k| kalman_gain(&sigma_closed_form(&params.sigma0, &params.gamma, k)?, &params.gamma))
        .collect()
}

/// Gaussian noise log-density `log g(r)`, precomputed from `Γ`.
#[derive(Debug, Clone)]
pub struct GaussianDensity {
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianDensity {
    pub fn new(gamma: &DMatrix<f64>) -> Result<Self> {
        let chol = linalg::cholesky_lower(gamma, "noise covariance")?;
        let d = chol.nrows() as f64;
        let log_det: f64 = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            chol,
            log_norm: -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det),
        })
    }

    pub fn log_density(&self, r: &[f64]) -> f64 {
        // forward substitution: L y = r, quadratic form = |y|²
        let d = self.chol.nrows();
        let mut y = [0.0f64; 16];
        let mut y_vec;
        let y: &mut [f64] = if d <= 16 {
            &mut y[..d]
        } else {
            y_vec = vec![0.0; d];
            &mut y_vec
        };
        for i in 0..d {
            let s: f64 = (0..i).map(|j| self.chol[(i, j)] * y[j]).sum();
            y[i] = (r[i] - s) / self.chol[(i, i)];
        }
        self.log_norm - 0.5 * y.iter().map(|v| v * v).sum::<f64>()
    }
}

/// Weighted atoms approximating the posterior of the drift. Weights are kept
/// as logarithms; `normalized` means they exponentiate to a probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleMeasure {
    pub d: usize,
    /// Atom locations, row-major `n × d`.
    pub atoms: Vec<f64>,
    pub log_weights: Vec<f64>,
    pub normalized: bool,
}

impl ParticleMeasure {
    pub fn from_atoms(d: usize, atoms: Vec<f64>) -> Result<Self> {
        if d == 0 || atoms.is_empty() || !atoms.len().is_multiple_of(d) {
            return Err(Error::Parameter("atom array must be a non-empty multiple of d".into()));
        }
        let n = atoms.len() / d;
        Ok(Self {
            d,
            atoms,
            log_weights: vec![-(n as f64).ln(); n],
            normalized: true,
        })
    }

    /// Single atom at `b0`: the prior of an investor who takes the drift as known.
    pub fn dirac(b0: &[f64]) -> Self {
        Self {
            d: b0.len(),
            atoms: b0.to_vec(),
            log_weights: vec![0.0],
            normalized: true,
        }
    }

    /// `n` equally weighted draws from `N(mean, cov)`.
    pub fn sample_gaussian<R: Rng + ?Sized>(rng: &mut R, mean: &DVector<f64>, cov: &DMatrix<f64>, n: usize) -> Result<Self> {
        let d = mean.len();
        let l = linalg::cholesky_lower(cov, "prior covariance")?;
        let mut atoms = Vec::with_capacity(n * d);
        let mut xi = vec![0.0; d];
        for _ in 0..n {
            xi.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            for i in 0..d {
                atoms.push(mean[i] + (0..=i).map(|j| l[(i, j)] * xi[j]).sum::<f64>());
            }
        }
        Self::from_atoms(d, atoms)
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.d..(i + 1) * self.d]
    }

    pub fn weights(&self) -> Vec<f64> {
        let m = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = self.log_weights.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let w = self.weights();
        let mut m = vec![0.0; self.d];
        for (i, wi) in w.iter().enumerate() {
            for (mj, aj) in m.iter_mut().zip(self.atom(i)) {
                *mj += wi * aj;
            }
        }
        m
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let w = self.weights();
        let m = self.mean();
        let mut c = DMatrix::zeros(self.d, self.d);
        for (i, wi) in w.iter().enumerate() {
            let a = self.atom(i);
            for r in 0..self.d {
                for s in 0..self.d {
                    c[(r, s)] += wi * (a[r] - m[r]) * (a[s] - m[s]);
                }
            }
        }
        c
    }

    /// Effective sample size `1 / Σ wᵢ²`.
    pub fn ess(&self) -> f64 {
        1.0 / self.weights().iter().map(|w| w * w).sum::<f64>()
    }

    /// Systematic resampling to equal weights.
    pub fn resample_systematic<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let n = self.len();
        let w = self.weights();
        let u0: f64 = rng.random::<f64>() / n as f64;
        let mut atoms = Vec::with_capacity(self.atoms.len());
        let mut cum = 0.0;
        let mut j = 0;
        for i in 0..n {
            let u = u0 + i as f64 / n as f64;
            while j + 1 < n && cum + w[j] < u {
                cum += w[j];
                j += 1;
            }
            atoms.extend_from_slice(self.atom(j));
        }
        Self {
            d: self.d,
            atoms,
            log_weights: vec![-(n as f64).ln(); n],
            normalized: true,
        }
    }
}

/// Reweights every atom by the noise density of the observed return and
/// renormalizes. Atoms are not moved.
pub fn particle_step(mu: &ParticleMeasure, ret: &ReturnSample, density: &GaussianDensity) -> Result<ParticleMeasure> {
    if ret.0.len() != mu.d {
        return Err(Error::Shape { expected: mu.d, got: ret.0.len() });
    }
    let mut resid = vec![0.0; mu.d];
    let mut logw: Vec<f64> = (0..mu.len())
        .map(|i| {
            for (r, (x, b)) in resid.iter_mut().zip(ret.0.iter().zip(mu.atom(i))) {
                *r = x - b;
            }
            mu.log_weights[i] + density.log_density(&resid)
        })
        .collect();
    let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::Degenerate);
    }
    let log_sum = m + logw.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logw.iter_mut().for_each(|l| *l -= log_sum);
    Ok(ParticleMeasure {
        d: mu.d,
        atoms: mu.atoms.clone(),
        log_weights: logw,
        normalized: true,
    })
}

/// Kalman and particle posterior means after the same observed returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterComparison {
    pub n_steps: usize,
    pub n_atoms: usize,
    pub drift: Vec<f64>,
    pub kalman_mean: Vec<f64>,
    pub particle_mean: Vec<f64>,
    /// Delta-method standard error of the self-normalized particle mean.
    pub std_err: Vec<f64>,
    pub ess: f64,
    /// `max_k max_ij |Σ_k(recursion) − Σ_k(closed form)|` for `k = 1..=N`.
    pub sigma_max_error: f64,
}

impl FilterComparison {
    /// Largest `|particle − kalman| / std_err` over coordinates.
    pub fn max_z(&self) -> f64 {
        self.kalman_mean
            .iter()
            .zip(&self.particle_mean)
            .zip(&self.std_err)
            .map(|((k, p), s)| (k - p).abs() / s)
            .fold(0.0, f64::max)
    }
}

/// Draws `B` from the prior and `n_steps` returns, then runs both filters on
/// them. The particle prior is `n_atoms` draws from `N(b₀, Σ₀)`.
pub fn compare_filters(params: &MarketParams, n_steps: usize, n_atoms: usize, seed: u64) -> Result<FilterComparison> {
    params.validate()?;
    let d = params.d;
    let mut rng = crate::rng::substream(seed, "filter-check", 0);
    let prior_l = linalg::cholesky_lower(&params.sigma0, "prior covariance")?;
    let xi = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let drift: Vec<f64> = (&params.b0 + &prior_l * xi).iter().copied().collect();
    let noise = crate::market::NoiseSampler::new(&params.gamma)?;
    let returns: Vec<ReturnSample> = (0..n_steps).map(|_| noise.sample(&mut rng, &drift)).collect();

    let mut kal = KalmanState::from_params(params);
    let mut atoms_rng = crate::rng::substream(seed, "filter-check", 1);
    let mut mu = ParticleMeasure::sample_gaussian(&mut atoms_rng, &params.b0, &params.sigma0, n_atoms)?;
    let density = GaussianDensity::new(&params.gamma)?;
    for ret in &returns {
        kal = kalman_step(&kal, ret, &params.gamma)?;
        mu = particle_step(&mu, ret, &density)?;
    }
    let mean = mu.mean();
    let w = mu.weights();
    let std_err = (0..d)
        .map(|j| {
            (0..mu.len())
                .map(|i| (w[i] * (mu.atom(i)[j] - mean[j])).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();

    let mut sigma = params.sigma0.clone();
    let mut sigma_max_error: f64 = 0.0;
    for k in 1..=params.n_steps {
        let gain = kalman_gain(&sigma, &params.gamma)?;
        sigma = symmetrize(&(&sigma - &gain * &sigma));
        let closed = sigma_closed_form(&params.sigma0, &params.gamma, k)?;
        sigma_max_error = sigma_max_error.max((&sigma - closed).abs().max());
    }
    Ok(FilterComparison {
        n_steps,
        n_atoms,
        drift,
        kalman_mean: kal.bhat.iter().copied().collect(),
        particle_mean: mean,
        std_err,
        ess: mu.ess(),
        sigma_max_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::market::{AnnualInputs, NoiseSampler};
    use crate::rng::substream;

    fn random_spd(rng: &mut impl Rng, d: usize, scale: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        (&a * a.transpose() + DMatrix::identity(d, d) * 0.5) * scale
    }

    #[test]
    fn scalar_symmetric_point() {
        let s0 = DMatrix::from_element(1, 1, 0.3);
        let st = KalmanState::prior(&DVector::from_element(1, 0.1), &s0);
        let next = kalman_step(&st, &ReturnSample(vec![0.5]), &s0).unwrap();
        assert!((next.gain[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((next.sigma[(0, 0)] - 0.15).abs() < 1e-15);
        assert!((next.innov_cov[(0, 0)] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn zero_innovation_keeps_mean() {
        let p = AnnualInputs::table2().to_params().unwrap();
        let st = KalmanState::from_params(&p);
        let next = kalman_step(&st, &ReturnSample(p.b0.iter().copied().collect()), &p.gamma).unwrap();
        assert!((next.bhat - p.b0).amax() < 1e-18);
    }

    #[test]
    fn closed_form_examples() {
        let mut rng = substream(3, "spd", 0);
        let s0 = random_spd(&mut rng, 3, 1.0);
        let g = random_spd(&mut rng, 3, 2.0);
        assert_eq!(sigma_closed_form(&s0, &g, 0).unwrap(), s0);
        let one = DMatrix::from_element(1, 1, 0.04);
        for k in 0..10 {
            let s = sigma_closed_form(&one, &one, k).unwrap();
            assert!((s[(0, 0)] - 0.04 / (1.0 + k as f64)).abs() < 1e-17);
        }
        // seven recursion steps
        let mut st = KalmanState::prior(&DVector::zeros(3), &s0);
        for _ in 0..7 {
            st = kalman_step(&st, &ReturnSample(vec![0.0; 3]), &g).unwrap();
        }
        let cf = sigma_closed_form(&s0, &g, 7).unwrap();
        assert!((st.sigma - cf).amax() < 1e-12);
    }

    #[test]
    fn recursion_matches_closed_form_on_random_inputs() {
        let mut rng = substream(5, "spd", 1);
        for _ in 0..20 {
            let d = rng.random_range(1..=4);
            let s0_scale = rng.random_range(0.01..2.0);
            let s0 = random_spd(&mut rng, d, s0_scale);
            let g_scale = rng.random_range(0.01..2.0);
            let g = random_spd(&mut rng, d, g_scale);
            let mut st = KalmanState::prior(&DVector::zeros(d), &s0);
            for k in 1..=100 {
                let prev = st.sigma.clone();
                st = kalman_step(&st, &ReturnSample(vec![0.0; d]), &g).unwrap();
                let cf = sigma_closed_form(&s0, &g, k).unwrap();
                let scale = s0.amax();
                assert!((&st.sigma - cf).amax() < 1e-12 * scale.max(1.0), "k={k}");
                assert!(linalg::is_psd(&(prev - &st.sigma), 1e-14 * scale));
            }
        }
    }

    #[test]
    fn marginal_of_posterior_mean() {
        let p = AnnualInputs::table2().to_params().unwrap();
        assert_eq!(bhat_marginal(&p.sigma0, &p.gamma, 0).unwrap().amax(), 0.0);
        let far = bhat_marginal(&p.sigma0, &p.gamma, 1_000_000).unwrap();
        assert!((far - &p.sigma0).amax() < 1e-4 * p.sigma0.amax());
        let mut prev = DMatrix::zeros(3, 3);
        for k in 0..=24 {
            let v = bhat_marginal(&p.sigma0, &p.gamma, k).unwrap();
            assert!(linalg::is_psd(&v, 1e-20));
            assert!(linalg::is_psd(&(&v - &prev), 1e-20));
            prev = v;
        }
    }

    #[test]
    fn dirac_and_flat_particles_are_unchanged() {
        let p = AnnualInputs::table2().to_params().unwrap();
        let dens = GaussianDensity::new(&p.gamma).unwrap();
        let b0: Vec<f64> = p.b0.iter().copied().collect();
        let mu = ParticleMeasure::dirac(&b0);
        let next = particle_step(&mu, &ReturnSample(vec![0.1, -0.2, 0.05]), &dens).unwrap();
        assert_eq!(next.weights(), vec![1.0]);
        assert_eq!(next.mean(), b0);

        let same = ParticleMeasure::from_atoms(3, b0.repeat(5)).unwrap();
        let next = particle_step(&same, &ReturnSample(vec![0.1, -0.2, 0.05]), &dens).unwrap();
        for w in next.weights() {
            assert!((w - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn log_weights_survive_extreme_returns() {
        let g = DMatrix::identity(1, 1) * 1e-6;
        let dens = GaussianDensity::new(&g).unwrap();
        let mu = ParticleMeasure::from_atoms(1, vec![0.0, 0.001, 0.002]).unwrap();
        let next = particle_step(&mu, &ReturnSample(vec![5.0]), &dens).unwrap();
        let w = next.weights();
        assert!(w.iter().all(|v| v.is_finite()));
        assert!((w[2] - 1.0).abs() < 1e-6);

        let mut inf = mu.clone();
        inf.log_weights = vec![f64::NEG_INFINITY; 3];
        assert!(matches!(particle_step(&inf, &ReturnSample(vec![0.0]), &dens), Err(Error::Degenerate)));
    }

    #[test]
    fn gaussian_density_matches_formula() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let dens = GaussianDensity::new(&g).unwrap();
        let r = [0.4, -0.7];
        let inv = g.clone().try_inverse().unwrap();
        let v = linalg::dvec(&r);
        let quad = (v.transpose() * inv * &v)[(0, 0)];
        let expected = -0.5 * quad - (2.0 * std::f64::consts::PI) .ln() - 0.5 * g.determinant().ln();
        assert!((dens.log_density(&r) - expected).abs() < 1e-13);
    }

    #[test]
    fn resampling_preserves_mean_roughly() {
        let mut rng = substream(9, "pf", 0);
        let mu = ParticleMeasure::sample_gaussian(&mut rng, &DVector::from_element(1, 1.0), &DMatrix::identity(1, 1), 20_000).unwrap();
        let dens = GaussianDensity::new(&DMatrix::identity(1, 1)).unwrap();
        let post = particle_step(&mu, &ReturnSample(vec![3.0]), &dens).unwrap();
        let res = post.resample_systematic(&mut rng);
        assert!((res.mean()[0] - post.mean()[0]).abs() < 0.02);
        assert!((res.ess() - 20_000.0).abs() < 1e-6);
    }

    #[test]
    fn innovation_covariance_is_sigma_plus_gamma() {
        // Over simulated paths the innovation R_{k+1} − B̂_k has covariance Σ_k + Γ.
        let p = AnnualInputs::table2().to_params().unwrap();
        let noise = NoiseSampler::new(&p.gamma).unwrap();
        let prior_l = linalg::cholesky_lower(&p.sigma0, "s0").unwrap();
        let gains = gain_schedule(&p).unwrap();
        let n = 100_000;
        let k_check = 3;
        let mut acc = DMatrix::<f64>::zeros(3, 3);
        for path in 0..n {
            let mut rng = substream(21, "innov", path);
            let xi: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let b = &p.b0 + &prior_l * linalg::dvec(&xi);
            let mut bhat = p.b0.clone();
            for k in 0..=k_check {
                let r = linalg::dvec(&noise.sample(&mut rng, b.as_slice()).0);
                let innov = &r - &bhat;
                if k == k_check {
                    acc += &innov * innov.transpose();
                }
                bhat += &gains[k] * innov;
            }
        }
        let cov = acc / n as f64;
        let target = sigma_closed_form(&p.sigma0, &p.gamma, k_check).unwrap() + &p.gamma;
        for i in 0..3 {
            for j in 0..3 {
                let se = ((target[(i, i)] * target[(j, j)] + target[(i, j)].powi(2)) / n as f64).sqrt();
                assert!((cov[(i, j)] - target[(i, j)]).abs() < 3.0 * se, "({i},{j})");
            }
        }
    }

    proptest! {
        #[test]
        fn recursion_tracks_closed_form_and_shrinks(seed in any::<u64>(), d in 1usize..4, steps in 1usize..30) {
            let mut rng = substream(seed, "prop-spd", 0);
            let s0 = random_spd(&mut rng, d, 0.01);
            let g = random_spd(&mut rng, d, 0.02);
            let mut st = KalmanState::prior(&DVector::zeros(d), &s0);
            for k in 1..=steps {
                let prev = st.sigma.clone();
                st = kalman_step(&st, &ReturnSample(vec![0.0; d]), &g).unwrap();
                let closed = sigma_closed_form(&s0, &g, k).unwrap();
                prop_assert!((&st.sigma - &closed).amax() < 1e-12 * s0.amax().max(1.0));
                prop_assert!((&st.sigma - st.sigma.transpose()).amax() == 0.0);
                // Loewner order: the posterior covariance never grows
                let drop = symmetrize(&(prev - &st.sigma));
                prop_assert!(drop.symmetric_eigenvalues().min() > -1e-14);
            }
        }
    }
}
