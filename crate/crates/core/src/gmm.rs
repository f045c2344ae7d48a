//! Gaussian mixtures with closed-form noisy marginals.
//!
//! For `x ~ sum_i w_i N(mu_i, Sigma_i)` observed as `x_t = x + sigma z`, every
//! quantity the detector relies on is available exactly: the noisy density,
//! its score, the MMSE denoiser and the full posterior covariance. These are
//! the oracles the rest of the crate is checked against.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::denoiser::{check_dim, Denoiser};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, SymEig};
use crate::rng::RngStream;

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-10;
const WEIGHT_SUM_TOL: f64 = 1e-9;

/// JSON form: weights, means and row-major covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct Component {
    log_weight: f64,
    mean: Vec<f64>,
    cov: Mat,
    /// Eigendecomposition of `cov`, eigenvalues clamped at zero.
    eig: SymEig,
}

impl Component {
    /// `(Sigma + s2 I)^{-1} r` and `log det(Sigma + s2 I)`.
    fn noisy_solve(&self, r: &[f64], s2: f64) -> Result<(Vec<f64>, f64, f64)> {
        let d = r.len();
        let u = &self.eig.vectors;
        let mut proj = vec![0.0; d];
        for (i, &ri) in r.iter().enumerate() {
            for (k, p) in proj.iter_mut().enumerate() {
                *p += u[(i, k)] * ri;
            }
        }
        let mut logdet = 0.0;
        let mut quad = 0.0;
        for (p, &e) in proj.iter_mut().zip(&self.eig.values) {
            let v = e + s2;
            if v <= f64::MIN_POSITIVE * 1e4 {
                return Err(Error::SingularCovariance);
            }
            logdet += v.ln();
            quad += *p * *p / v;
            *p /= v;
        }
        let mut out = vec![0.0; d];
        for (i, o) in out.iter_mut().enumerate() {
            *o = linalg::dot(u.row(i), &proj);
        }
        Ok((out, logdet, quad))
    }
}

/// Per-component pieces of the posterior at one `(x_t, sigma)`.
struct Posterior {
    /// Normalized responsibilities.
    resp: Vec<f64>,
    /// `(Sigma_i + sigma^2 I)^{-1} (mu_i - x_t)` per component.
    pulls: Vec<Vec<f64>>,
    log_marginal: f64,
}

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
    spec: GmmSpec,
}

/// Posterior mean and covariance of `x` given `x_t`.
#[derive(Debug, Clone)]
pub struct PosteriorStats {
    pub mean: Vec<f64>,
    pub cov: Mat,
}

impl GaussianMixture {
    pub fn from_spec(spec: GmmSpec) -> Result<Self> {
        let n = spec.weights.len();
        if n == 0 {
            return Err(Error::InvalidModel("mixture has no components".into()));
        }
        if spec.means.len() != n || spec.covariances.len() != n {
            return Err(Error::InvalidModel(format!(
                "{} weights, {} means, {} covariances",
                n,
                spec.means.len(),
                spec.covariances.len()
            )));
        }
        if let Some(w) = spec.weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidModel(format!("weights must be positive, got {w}")));
        }
        let total: f64 = spec.weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidModel(format!("weights sum to {total}, not 1")));
        }
        let dim = spec.means[0].len();
        if dim == 0 {
            return Err(Error::InvalidModel("zero-dimensional mixture".into()));
        }
        let mut components = Vec::with_capacity(n);
        for ((&w, mean), cov) in spec.weights.iter().zip(&spec.means).zip(&spec.covariances) {
            if mean.len() != dim {
                return Err(Error::DimMismatch { expected: dim, got: mean.len() });
            }
            if mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("mixture mean"));
            }
            let cov = Mat::from_row_major(dim, dim, cov.clone())
                .map_err(|_| Error::InvalidModel(format!("covariance must have {} entries", dim * dim)))?;
            if !cov.is_finite() {
                return Err(Error::NonFinite("mixture covariance"));
            }
            let scale = cov.max_abs().max(1.0);
            if cov.max_asymmetry() > SYMMETRY_TOL * scale {
                return Err(Error::InvalidModel("covariance is not symmetric".into()));
            }
            let mut eig = linalg::sym_eig(&cov)?;
            let min = eig.values.last().copied().unwrap_or(0.0);
            if min < -PSD_TOL * scale {
                return Err(Error::NotPsd(min));
            }
            eig.values.iter_mut().for_each(|v| *v = v.max(0.0));
            components.push(Component { log_weight: w.ln(), mean: mean.clone(), cov, eig });
        }
        Ok(GaussianMixture { dim, components, spec })
    }

    pub fn single(mean: Vec<f64>, cov: &Mat) -> Result<Self> {
        GaussianMixture::from_spec(GmmSpec {
            weights: vec![1.0],
            means: vec![mean],
            covariances: vec![cov.as_slice().to_vec()],
        })
    }

    /// `N(mean, var I)`.
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        GaussianMixture::single(mean, &Mat::identity(d).scale(var))
    }

    pub fn spec(&self) -> &GmmSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.log_weight.exp()).collect()
    }

    pub fn means(&self) -> Vec<&[f64]> {
        self.components.iter().map(|c| c.mean.as_slice()).collect()
    }

    pub fn covariances(&self) -> Vec<&Mat> {
        self.components.iter().map(|c| &c.cov).collect()
    }

    /// The same mixture with every mean moved by `delta`.
    pub fn shifted(&self, delta: &[f64]) -> Result<Self> {
        check_dim(self.dim, delta.len())?;
        let mut spec = self.spec.clone();
        for m in &mut spec.means {
            for (v, d) in m.iter_mut().zip(delta) {
                *v += d;
            }
        }
        GaussianMixture::from_spec(spec)
    }

    /// Overall mean and covariance of the clean distribution.
    pub fn moments(&self) -> (Vec<f64>, Mat) {
        let d = self.dim;
        let mut mean = vec![0.0; d];
        for c in &self.components {
            linalg::axpy(c.log_weight.exp(), &c.mean, &mut mean);
        }
        let mut cov = Mat::zeros(d, d);
        for c in &self.components {
            let w = c.log_weight.exp();
            cov = cov.add(&c.cov.scale(w));
            let dm = linalg::sub(&c.mean, &mean);
            cov.add_outer(w, &dm, &dm);
        }
        (mean, cov)
    }

    fn posterior(&self, x_t: &[f64], sigma: f64) -> Result<Posterior> {
        check_dim(self.dim, x_t.len())?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::BadRange(format!("sigma must be positive, got {sigma}")));
        }
        if x_t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("x_t"));
        }
        let s2 = sigma * sigma;
        let norm = 0.5 * self.dim as f64 * (2.0 * PI).ln();
        let mut logs = Vec::with_capacity(self.components.len());
        let mut pulls = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let r = linalg::sub(&c.mean, x_t);
            let (pull, logdet, quad) = c.noisy_solve(&r, s2)?;
            logs.push(c.log_weight - norm - 0.5 * (logdet + quad));
            pulls.push(pull);
        }
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        let log_marginal = max + sum.ln();
        let resp = logs.iter().map(|l| (l - log_marginal).exp()).collect();
        Ok(Posterior { resp, pulls, log_marginal })
    }

    /// `log p_sigma(x_t)` for the noisy marginal `p * N(0, sigma^2 I)`.
    pub fn noisy_logpdf(&self, x_t: &[f64], sigma: f64) -> Result<f64> {
        Ok(self.posterior(x_t, sigma)?.log_marginal)
    }

    /// Posterior component responsibilities at `x_t`.
    pub fn responsibilities(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        Ok(self.posterior(x_t, sigma)?.resp)
    }

    /// `grad log p_sigma(x_t)`.
    pub fn score(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        let post = self.posterior(x_t, sigma)?;
        let mut s = vec![0.0; self.dim];
        for (r, pull) in post.resp.iter().zip(&post.pulls) {
            linalg::axpy(*r, pull, &mut s);
        }
        Ok(s)
    }

    /// `E[x | x_t]`, computed through Tweedie's formula from [`Self::score`].
    pub fn denoise_mmse(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        let s = self.score(x_t, sigma)?;
        let s2 = sigma * sigma;
        Ok(x_t.iter().zip(&s).map(|(x, g)| x + s2 * g).collect())
    }

    /// Exact `Cov[x | x_t]` by the law of total covariance over components.
    pub fn posterior_cov(&self, x_t: &[f64], sigma: f64) -> Result<PosteriorStats> {
        let post = self.posterior(x_t, sigma)?;
        let s2 = sigma * sigma;
        let d = self.dim;
        let comp_means: Vec<Vec<f64>> = post
            .pulls
            .iter()
            .map(|pull| x_t.iter().zip(pull).map(|(x, p)| x + s2 * p).collect())
            .collect();
        let mut mbar = vec![0.0; d];
        for (r, m) in post.resp.iter().zip(&comp_means) {
            linalg::axpy(*r, m, &mut mbar);
        }
        let mut cov = Mat::zeros(d, d);
        for ((r, m), c) in post.resp.iter().zip(&comp_means).zip(&self.components) {
            if *r == 0.0 {
                continue;
            }
            // Gaussian posterior covariance: sigma^2 Sigma (Sigma + sigma^2 I)^{-1}.
            for (k, &e) in c.eig.values.iter().enumerate() {
                let u = c.eig.vectors.column(k);
                cov.add_outer(r * s2 * e / (e + s2), &u, &u);
            }
            let dm = linalg::sub(m, &mbar);
            cov.add_outer(*r, &dm, &dm);
        }
        let cov = cov.symmetrized();
        Ok(PosteriorStats { mean: self.denoise_mmse(x_t, sigma)?, cov })
    }

    /// `n` i.i.d. draws.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
        let weights: Vec<f64> = self.weights();
        let d = self.dim;
        (0..n)
            .map(|_| {
                let u = rng.uniform();
                let mut acc = 0.0;
                let mut pick = self.components.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                let c = &self.components[pick];
                let z: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
                let mut x = c.mean.clone();
                for (k, &e) in c.eig.values.iter().enumerate() {
                    let coef = e.sqrt() * z[k];
                    if coef == 0.0 {
                        continue;
                    }
                    for (i, xi) in x.iter_mut().enumerate() {
                        *xi += c.eig.vectors[(i, k)] * coef;
                    }
                }
                x
            })
            .collect()
    }

    fn as_single(&self) -> Result<&Component> {
        match self.components.as_slice() {
            [c] => Ok(c),
            _ => Err(Error::NotSingleGaussian),
        }
    }

    /// Mean and covariance of a single-component mixture.
    pub fn single_moments(&self) -> Result<(&[f64], &Mat)> {
        let c = self.as_single()?;
        Ok((&c.mean, &c.cov))
    }
}

impl Denoiser for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn denoise(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.denoise_mmse(x_t, sigma)
    }

    fn as_gmm(&self) -> Option<&GaussianMixture> {
        Some(self)
    }
}

/// `KL(p || q)` between two single Gaussians.
pub fn kl_gaussians(p: &GaussianMixture, q: &GaussianMixture) -> Result<f64> {
    let cp = p.as_single()?;
    let cq = q.as_single()?;
    check_dim(p.dim, q.dim)?;
    let d = p.dim as f64;
    let (q_inv, q_logdet) = linalg::spd_inverse_logdet(&cq.cov)?;
    let (_, p_logdet) = linalg::spd_inverse_logdet(&cp.cov)?;
    let tr = q_inv.matmul(&cp.cov)?.trace();
    let dm = linalg::sub(&cq.mean, &cp.mean);
    let maha = linalg::dot(&dm, &q_inv.matvec(&dm)?);
    Ok(0.5 * (tr + maha - d + q_logdet - p_logdet))
}

/// Central-difference step used by the finite-difference cross-checks.
pub fn fd_step(x: &[f64]) -> f64 {
    1e-4 * linalg::norm_inf(x).max(1.0)
}

/// Dense Jacobian of `f: R^d -> R^d` at `x` by central differences.
/// Entry `(i, j)` is `d f_i / d x_j`.
pub fn fd_jacobian(
    x: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<Mat> {
    let d = x.len();
    let mut jac = Mat::zeros(d, d);
    let mut xp = x.to_vec();
    for j in 0..d {
        xp[j] = x[j] + h;
        let fp = f(&xp)?;
        xp[j] = x[j] - h;
        let fm = f(&xp)?;
        xp[j] = x[j];
        for i in 0..d {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamId;
    use approx::assert_abs_diff_eq;

    fn std_normal_1d() -> GaussianMixture {
        GaussianMixture::isotropic(vec![0.0], 1.0).unwrap()
    }

    fn symmetric_pair() -> GaussianMixture {
        GaussianMixture::from_spec(GmmSpec {
            weights: vec![0.5, 0.5],
            means: vec![vec![1.0], vec![-1.0]],
            covariances: vec![vec![1.0], vec![1.0]],
        })
        .unwrap()
    }

    fn two_d_mixture() -> GaussianMixture {
        GaussianMixture::from_spec(GmmSpec {
            weights: vec![0.3, 0.7],
            means: vec![vec![1.0, -0.5], vec![-1.0, 0.8]],
            covariances: vec![vec![0.5, 0.2, 0.2, 0.4], vec![0.3, -0.1, -0.1, 0.6]],
        })
        .unwrap()
    }

    #[test]
    fn logpdf_of_standard_normal_at_zero() {
        let g = std_normal_1d();
        let want = -0.5 * (4.0 * PI).ln();
        assert_abs_diff_eq!(g.noisy_logpdf(&[0.0], 1.0).unwrap(), want, epsilon = 1e-14);
        assert_abs_diff_eq!(want, -1.265_512_123_484_645, epsilon = 1e-12);
    }

    #[test]
    fn logpdf_of_symmetric_pair_at_zero() {
        let want = -0.25 - 0.5 * (4.0 * PI).ln();
        assert_abs_diff_eq!(symmetric_pair().noisy_logpdf(&[0.0], 1.0).unwrap(), want, epsilon = 1e-14);
    }

    #[test]
    fn logpdf_translation_consistent() {
        let g = two_d_mixture();
        let delta = [2.5, -1.25];
        let moved = g.shifted(&delta).unwrap();
        let x = [0.3, 0.1];
        let xm = [x[0] + delta[0], x[1] + delta[1]];
        assert_abs_diff_eq!(
            g.noisy_logpdf(&x, 0.7).unwrap(),
            moved.noisy_logpdf(&xm, 0.7).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn score_examples() {
        assert_abs_diff_eq!(std_normal_1d().score(&[2.0], 1.0).unwrap()[0], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(symmetric_pair().score(&[0.0], 1.0).unwrap()[0], 0.0, epsilon = 1e-15);
        let isolated = GaussianMixture::from_spec(GmmSpec {
            weights: vec![0.5, 0.5],
            means: vec![vec![5.0, 5.0], vec![-5.0, -5.0]],
            covariances: vec![vec![1.0, 0.0, 0.0, 1.0]; 2],
        })
        .unwrap();
        let s = isolated.score(&[5.0, 5.0], 1e-3).unwrap();
        assert!(linalg::norm(&s) < 1e-6);
    }

    #[test]
    fn denoise_examples() {
        assert_abs_diff_eq!(std_normal_1d().denoise_mmse(&[2.0], 1.0).unwrap()[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(symmetric_pair().denoise_mmse(&[0.0], 1.0).unwrap()[0], 0.0, epsilon = 1e-15);
        let g = two_d_mixture();
        let x = [-0.8, 0.7];
        let out = g.denoise_mmse(&x, 1e-3).unwrap();
        assert!(linalg::norm(&linalg::sub(&out, &x)) < 1e-5);
    }

    #[test]
    fn tweedie_is_exact() {
        let g = two_d_mixture();
        let x = [0.4, -1.3];
        let sigma = 0.9;
        let s = g.score(&x, sigma).unwrap();
        let d = g.denoise_mmse(&x, sigma).unwrap();
        for i in 0..2 {
            assert_eq!(d[i], x[i] + sigma * sigma * s[i]);
        }
    }

    #[test]
    fn posterior_cov_of_standard_normal() {
        for x in [-3.0, 0.0, 2.0] {
            let st = std_normal_1d().posterior_cov(&[x], 1.0).unwrap();
            assert_abs_diff_eq!(st.cov[(0, 0)], 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn single_gaussian_cov_independent_of_position() {
        let cov = Mat::from_rows(&[vec![2.0, 0.3], vec![0.3, 0.5]]).unwrap();
        let g = GaussianMixture::single(vec![1.0, 1.0], &cov).unwrap();
        let a = g.posterior_cov(&[0.0, 0.0], 0.8).unwrap().cov;
        let b = g.posterior_cov(&[4.0, -7.0], 0.8).unwrap().cov;
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-14);
        }
    }

    #[test]
    fn posterior_cov_matches_denoiser_jacobian() {
        let g = two_d_mixture();
        for (x, sigma) in [([0.0, 0.0], 0.5), ([1.0, -0.4], 1.0), ([-2.0, 1.5], 0.3)] {
            let st = g.posterior_cov(&x, sigma).unwrap();
            let jac = fd_jacobian(&x, fd_step(&x), |y| g.denoise_mmse(y, sigma)).unwrap();
            let miyasawa = jac.symmetrized().scale(sigma * sigma);
            assert!(st.cov.sub(&miyasawa).max_abs() < 1e-4);
        }
    }

    #[test]
    fn sample_moments_and_determinism() {
        let g = std_normal_1d();
        let xs = g.sample(100_000, &mut RngStream::new(5, StreamId::default()));
        let mean = xs.iter().map(|x| x[0]).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.02);
        let again = g.sample(100_000, &mut RngStream::new(5, StreamId::default()));
        assert_eq!(xs, again);
    }

    #[test]
    fn zero_covariance_component_returns_its_mean() {
        let g = GaussianMixture::from_spec(GmmSpec {
            weights: vec![1.0],
            means: vec![vec![1.5, -2.0]],
            covariances: vec![vec![0.0; 4]],
        })
        .unwrap();
        for x in g.sample(50, &mut RngStream::from_seed(1)) {
            assert_eq!(x, vec![1.5, -2.0]);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad_weight = GmmSpec {
            weights: vec![1.0, 0.0],
            means: vec![vec![0.0], vec![1.0]],
            covariances: vec![vec![1.0], vec![1.0]],
        };
        assert!(matches!(GaussianMixture::from_spec(bad_weight), Err(Error::InvalidModel(_))));
        let asym = GmmSpec { weights: vec![1.0], means: vec![vec![0.0, 0.0]], covariances: vec![vec![1.0, 0.5, 0.0, 1.0]] };
        assert!(GaussianMixture::from_spec(asym).is_err());
        let not_psd = GmmSpec { weights: vec![1.0], means: vec![vec![0.0, 0.0]], covariances: vec![vec![1.0, 2.0, 2.0, 1.0]] };
        assert!(matches!(GaussianMixture::from_spec(not_psd), Err(Error::NotPsd(_))));
        assert!(matches!(std_normal_1d().score(&[0.0, 1.0], 1.0), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn kl_examples() {
        let n0 = std_normal_1d();
        assert_abs_diff_eq!(kl_gaussians(&n0, &n0).unwrap(), 0.0, epsilon = 1e-15);
        let n1 = GaussianMixture::isotropic(vec![1.0], 1.0).unwrap();
        assert_abs_diff_eq!(kl_gaussians(&n0, &n1).unwrap(), 0.5, epsilon = 1e-15);
        let wide = GaussianMixture::isotropic(vec![0.0], 4.0).unwrap();
        let want = 0.5 * (0.25 - 1.0 + 4f64.ln());
        assert_abs_diff_eq!(kl_gaussians(&n0, &wide).unwrap(), want, epsilon = 1e-14);
        assert_abs_diff_eq!(want, 0.318_147_180_559_945_3, epsilon = 1e-12);
        assert!(matches!(kl_gaussians(&symmetric_pair(), &n0), Err(Error::NotSingleGaussian)));
    }
}
