//! Leading eigenpairs of the posterior covariance `sigma^2 * dD/dx_t`.
//!
//! [`subspace_iteration`] never forms the Jacobian: each Jacobian-vector
//! product is a central secant `(D(x + c v) - D(x - c v)) / 2c`, followed by
//! QR re-orthonormalization of the block. [`exact_spectrum`] builds the
//! dense Jacobian instead and serves as the reference.

use serde::{Deserialize, Serialize};

use crate::denoiser::{check_dim, Denoiser};
use crate::error::{Error, Result};
use crate::gmm::{fd_jacobian, fd_step};
use crate::linalg::{self, Mat};
use crate::rng::{gaussian_vec, RngStream, StreamId};

/// Secant half-width for the Jacobian-vector products.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepSize {
    /// `c = factor * sigma`
    Relative(f64),
    Absolute(f64),
}

impl StepSize {
    pub fn at(self, sigma: f64) -> f64 {
        match self {
            StepSize::Relative(f) => f * sigma,
            StepSize::Absolute(c) => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralConfig {
    /// Number of eigenpairs.
    pub k: usize,
    /// Maximum number of subspace iterations.
    pub iters: usize,
    pub c: StepSize,
    /// Stop once every eigenvalue moves by less than this relative amount
    /// between iterations.
    pub early_stop: Option<f64>,
    pub seed: u64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig { k: 3, iters: 15, c: StepSize::Relative(1e-3), early_stop: Some(1e-4), seed: 0 }
    }
}

impl SpectralConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.k == 0 || self.k > dim {
            return Err(Error::Config(format!("k must be in 1..={dim}, got {}", self.k)));
        }
        if self.iters == 0 {
            return Err(Error::Config("iters must be at least 1".into()));
        }
        let c = match self.c {
            StepSize::Relative(f) | StepSize::Absolute(f) => f,
        };
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Config(format!("step size must be positive, got {c}")));
        }
        if let Some(tol) = self.early_stop {
            if !(tol > 0.0) {
                return Err(Error::Config(format!("early-stop tolerance must be positive, got {tol}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralResult {
    /// Descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
    /// Signed estimates before clamping, in the same order.
    pub raw_eigenvalues: Vec<f64>,
    /// `d x k`, orthonormal columns.
    pub eigenvectors: Mat,
    pub sigma: f64,
    /// `max_k ||Sigma v_k - lambda_k v_k|| / lambda_1` at the returned pairs.
    pub residual: f64,
    /// The same residual after every iteration.
    pub residual_history: Vec<f64>,
    pub iterations: usize,
    pub denoiser_calls: usize,
}

impl SpectralResult {
    pub fn top_sum(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }
}

/// `(D(x_t + c v) - D(x_t - c v)) / 2c`, two denoiser calls.
pub fn jvp<D: Denoiser + ?Sized>(denoiser: &D, x_t: &[f64], sigma: f64, v: &[f64], c: f64) -> Result<Vec<f64>> {
    check_dim(denoiser.dim(), v.len())?;
    check_dim(denoiser.dim(), x_t.len())?;
    if linalg::norm(v) == 0.0 {
        return Err(Error::BadRange("jvp direction must be nonzero".into()));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::BadRange(format!("jvp step must be positive, got {c}")));
    }
    let plus: Vec<f64> = x_t.iter().zip(v).map(|(x, vi)| x + c * vi).collect();
    let minus: Vec<f64> = x_t.iter().zip(v).map(|(x, vi)| x - c * vi).collect();
    let dp = denoiser.denoise(&plus, sigma)?;
    let dm = denoiser.denoise(&minus, sigma)?;
    let out: Vec<f64> = dp.iter().zip(&dm).map(|(a, b)| (a - b) / (2.0 * c)).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteDenoiserOutput);
    }
    Ok(out)
}

/// Subspace iteration seeded from `config.seed`.
pub fn subspace_iteration<D: Denoiser + ?Sized>(
    denoiser: &D,
    x_t: &[f64],
    sigma: f64,
    config: &SpectralConfig,
) -> Result<SpectralResult> {
    let mut rng = RngStream::new(config.seed, StreamId::default());
    subspace_iteration_with(denoiser, x_t, sigma, config, &mut rng)
}

/// Subspace iteration drawing its starting block from `rng`.
pub fn subspace_iteration_with<D: Denoiser + ?Sized>(
    denoiser: &D,
    x_t: &[f64],
    sigma: f64,
    config: &SpectralConfig,
    rng: &mut RngStream,
) -> Result<SpectralResult> {
    let d = denoiser.dim();
    check_dim(d, x_t.len())?;
    config.validate(d)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::BadRange(format!("sigma must be positive, got {sigma}")));
    }
    let c = config.c.at(sigma);
    if c > 0.1 * sigma {
        log::warn!("secant step {c:.3e} is large relative to sigma {sigma:.3e}");
    }
    let s2 = sigma * sigma;

    let start: Vec<Vec<f64>> = (0..config.k).map(|_| gaussian_vec(rng, d, sigma)).collect();
    let mut basis = linalg::qr_orthonormalize(&Mat::from_columns(&start)?)?;
    let mut calls = 0;
    let mut history = Vec::with_capacity(config.iters + 1);
    let mut previous: Option<Vec<f64>> = None;

    let apply = |basis: &Mat, calls: &mut usize| -> Result<Vec<Vec<f64>>> {
        let images = basis
            .columns()
            .iter()
            .map(|v| jvp(denoiser, x_t, sigma, v, c))
            .collect::<Result<Vec<_>>>()?;
        *calls += 2 * images.len();
        Ok(images)
    };

    for iteration in 1..=config.iters {
        let images = apply(&basis, &mut calls)?;
        let (ritz_basis, ritz_images) = ritz(&basis, &images)?;
        let estimates: Vec<f64> = ritz_images.iter().map(|w| s2 * linalg::norm(w)).collect();
        history.push(block_residual(&ritz_basis, &ritz_images, s2));

        if let (Some(tol), Some(prev)) = (config.early_stop, &previous) {
            let settled = estimates
                .iter()
                .zip(prev)
                .all(|(now, before)| (now - before).abs() <= tol * before.abs().max(f64::MIN_POSITIVE));
            if settled {
                return Ok(finish(ritz_basis, &ritz_images, sigma, history, iteration, calls));
            }
        }
        previous = Some(estimates);
        basis = linalg::qr_orthonormalize(&Mat::from_columns(&images)?)?;
    }

    let images = apply(&basis, &mut calls)?;
    let (ritz_basis, ritz_images) = ritz(&basis, &images)?;
    history.push(block_residual(&ritz_basis, &ritz_images, s2));
    Ok(finish(ritz_basis, &ritz_images, sigma, history, config.iters, calls))
}

/// Rotates the block onto the eigenvectors of the projected operator
/// `V^T J V`. The images are rotated by linearity, without new calls.
fn ritz(basis: &Mat, images: &[Vec<f64>]) -> Result<(Mat, Vec<Vec<f64>>)> {
    let w = Mat::from_columns(images)?;
    let projected = basis.transpose().matmul(&w)?;
    let q = linalg::sym_eig(&projected)?.vectors;
    Ok((basis.matmul(&q)?, w.matmul(&q)?.columns()))
}

fn rayleigh_signed(v: &[f64], w: &[f64], s2: f64) -> f64 {
    let mag = s2 * linalg::norm(w);
    if linalg::dot(v, w) < 0.0 {
        -mag
    } else {
        mag
    }
}

fn block_residual(basis: &Mat, images: &[Vec<f64>], s2: f64) -> f64 {
    let mut lead: f64 = 0.0;
    let mut worst: f64 = 0.0;
    for (k, w) in images.iter().enumerate() {
        let v = basis.column(k);
        let lambda = rayleigh_signed(&v, w, s2);
        lead = lead.max(lambda.abs());
        let r: f64 = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (s2 * wi - lambda * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(r);
    }
    if lead > 0.0 {
        worst / lead
    } else {
        worst
    }
}

fn finish(
    basis: Mat,
    images: &[Vec<f64>],
    sigma: f64,
    residual_history: Vec<f64>,
    iterations: usize,
    denoiser_calls: usize,
) -> SpectralResult {
    let s2 = sigma * sigma;
    let k = images.len();
    let raw: Vec<f64> =
        images.iter().enumerate().map(|(j, w)| rayleigh_signed(&basis.column(j), w, s2)).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]));

    let columns: Vec<Vec<f64>> = order
        .iter()
        .map(|&j| {
            let mut col = basis.column(j);
            linalg::canonical_sign(&mut col);
            col
        })
        .collect();
    let raw_eigenvalues: Vec<f64> = order.iter().map(|&j| raw[j]).collect();
    let residual = residual_history.last().copied().unwrap_or(f64::NAN);
    SpectralResult {
        eigenvalues: raw_eigenvalues.iter().map(|l| l.max(0.0)).collect(),
        raw_eigenvalues,
        eigenvectors: Mat::from_columns(&columns).expect("columns share the data dimension"),
        sigma,
        residual,
        residual_history,
        iterations,
        denoiser_calls,
    }
}

/// Largest dimension [`exact_spectrum`] will densify.
pub const DENSE_DIM_LIMIT: usize = 4096;

/// `sigma^2 * dD/dx_t` by central differences, before symmetrization.
pub fn posterior_cov_fd<D: Denoiser + ?Sized>(denoiser: &D, x_t: &[f64], sigma: f64) -> Result<Mat> {
    let d = denoiser.dim();
    check_dim(d, x_t.len())?;
    if d > DENSE_DIM_LIMIT {
        return Err(Error::DimTooLarge { dim: d, limit: DENSE_DIM_LIMIT });
    }
    let jac = fd_jacobian(x_t, fd_step(x_t), |y| denoiser.denoise(y, sigma))?;
    if !jac.is_finite() {
        return Err(Error::NonFiniteDenoiserOutput);
    }
    Ok(jac.scale(sigma * sigma))
}

/// Top-`k` eigenpairs of the symmetrized dense finite-difference covariance.
pub fn exact_spectrum<D: Denoiser + ?Sized>(denoiser: &D, x_t: &[f64], sigma: f64, k: usize) -> Result<SpectralResult> {
    let d = denoiser.dim();
    if k == 0 || k > d {
        return Err(Error::Config(format!("k must be in 1..={d}, got {k}")));
    }
    let cov = posterior_cov_fd(denoiser, x_t, sigma)?;
    let eig = linalg::sym_eig(&cov.symmetrized())?;
    let raw: Vec<f64> = eig.values[..k].to_vec();
    Ok(SpectralResult {
        eigenvalues: raw.iter().map(|l| l.max(0.0)).collect(),
        raw_eigenvalues: raw,
        eigenvectors: eig.leading_vectors(k),
        sigma,
        residual: 0.0,
        residual_history: Vec::new(),
        iterations: 0,
        denoiser_calls: 2 * d,
    })
}

/// How far the raw Jacobian is from its symmetric part along the leading
/// eigenvectors: `max_k ||Sigma u_k - lambda_k u_k|| / lambda_1`, with `Sigma`
/// the unsymmetrized finite-difference covariance.
pub fn jacobian_asymmetry<D: Denoiser + ?Sized>(denoiser: &D, x_t: &[f64], sigma: f64, k: usize) -> Result<f64> {
    let cov = posterior_cov_fd(denoiser, x_t, sigma)?;
    let eig = linalg::sym_eig(&cov.symmetrized())?;
    let lead = eig.values[0].abs().max(f64::MIN_POSITIVE);
    let mut worst: f64 = 0.0;
    for j in 0..k.min(eig.values.len()) {
        let u = eig.vectors.column(j);
        let applied = cov.matvec(&u)?;
        let r: f64 = applied
            .iter()
            .zip(&u)
            .map(|(a, ui)| (a - eig.values[j] * ui).powi(2))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(r / lead);
    }
    Ok(worst)
}
