//! Numerical checks of the identities the method relies on, against
//! Gaussian-mixture closed forms.
//!
//! Every check produces [`CheckEntry`] values; `passed` is exactly
//! `deviation <= tolerance`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{fd_jacobian, fd_step, kl_gaussians, GaussianMixture, GmmSpec};
use crate::linalg::{self, sym_eig, Mat, SymEig};
use crate::par::{try_map_indexed, Execution};
use crate::rng::{derive_seed, gaussian_vec, RngStream, StreamId};
use crate::spectral::{exact_spectrum, subspace_iteration_with, SpectralConfig, StepSize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckEntry {
    pub name: String,
    pub lhs: Option<f64>,
    pub rhs: Option<f64>,
    pub deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

impl CheckEntry {
    pub fn new(name: impl Into<String>, deviation: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        CheckEntry {
            name: name.into(),
            lhs: None,
            rhs: None,
            deviation,
            tolerance,
            // NaN deviations fail.
            passed: deviation <= tolerance,
            detail: detail.into(),
            extra: BTreeMap::new(),
        }
    }

    pub fn sides(mut self, lhs: f64, rhs: f64) -> Self {
        self.lhs = Some(lhs);
        self.rhs = Some(rhs);
        self
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.extra.insert(key.to_string(), value);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub entries: Vec<CheckEntry>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn table(&self) -> String {
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(4).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>12}  {:>10}  result", "check", "deviation", "tolerance");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{:<width$}  {:>12.4e}  {:>10.1e}  {}",
                e.name,
                e.deviation,
                e.tolerance,
                if e.passed { "pass" } else { "FAIL" }
            );
        }
        let passed = self.entries.iter().filter(|e| e.passed).count();
        let _ = writeln!(out, "{passed}/{} checks passed", self.entries.len());
        out
    }
}

/// Log-spaced noise-level grid for the quadratures, integrated in `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SigmaGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for SigmaGrid {
    fn default() -> Self {
        SigmaGrid { lo: 1e-3, hi: 1e3, points: 400 }
    }
}

impl SigmaGrid {
    pub fn nodes(&self) -> Result<Vec<f64>> {
        if !(self.lo > 0.0 && self.hi > self.lo && self.hi.is_finite()) || self.points < 2 {
            return Err(Error::BadRange(format!("bad sigma grid {self:?}")));
        }
        let (a, b) = (self.lo.ln(), self.hi.ln());
        let n = self.points - 1;
        Ok((0..=n).map(|i| (a + (b - a) * i as f64 / n as f64).exp()).collect())
    }

    /// The grid with a geometric midpoint inserted in every interval.
    pub fn refined(&self) -> SigmaGrid {
        SigmaGrid { points: 2 * self.points - 1, ..*self }
    }
}

pub fn trapezoid(nodes: &[f64], values: &[f64]) -> f64 {
    nodes.windows(2).zip(values.windows(2)).map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) * 0.5).sum()
}

struct Gaussian {
    mean: Vec<f64>,
    cov: Mat,
    eig: SymEig,
}

impl Gaussian {
    fn of(g: &GaussianMixture) -> Result<Self> {
        let (mean, cov) = g.single_moments()?;
        Ok(Gaussian { mean: mean.to_vec(), cov: cov.clone(), eig: sym_eig(cov)? })
    }

    /// `(Sigma + s2 I)^{-1}`
    fn noisy_precision(&self, s2: f64) -> Mat {
        self.eig.map_spectrum(|e| 1.0 / (e + s2))
    }
}

fn mean_sq_plus_trace(mean: &[f64], cov: &Mat) -> f64 {
    linalg::dot(mean, mean) + cov.trace()
}

/// `E_p ||x - D_model(x + sigma z)||^2` for Gaussian `p` and the exact
/// denoiser of Gaussian `model`.
fn mse_closed_form(p: &Gaussian, model: &Gaussian, sigma: f64) -> Result<f64> {
    let s2 = sigma * sigma;
    let d = p.mean.len();
    let shrink = model.eig.map_spectrum(|e| e / (e + s2));
    let keep = Mat::identity(d).sub(&shrink);
    let mean = keep.matvec(&linalg::sub(&p.mean, &model.mean))?;
    let cov = keep.matmul(&p.cov)?.matmul(&keep.transpose())?.add(&shrink.matmul(&shrink.transpose())?.scale(s2));
    Ok(mean_sq_plus_trace(&mean, &cov))
}

/// `E_p ||grad log p_sigma(x_t) - grad log q_sigma(x_t)||^2`, `x_t ~ p_sigma`.
fn score_gap_closed_form(p: &Gaussian, q: &Gaussian, sigma: f64) -> Result<f64> {
    let s2 = sigma * sigma;
    let d = p.mean.len();
    let pp = p.noisy_precision(s2);
    let pq = q.noisy_precision(s2);
    let a = pq.sub(&pp);
    let mean = pq.matvec(&linalg::sub(&p.mean, &q.mean))?;
    let noisy_cov = p.cov.add(&Mat::identity(d).scale(s2));
    let cov = a.matmul(&noisy_cov)?.matmul(&a.transpose())?;
    Ok(mean_sq_plus_trace(&mean, &cov))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quadrature {
    pub value: f64,
    /// Error estimate for `value` from one grid refinement.
    pub discretization: f64,
    /// Mass outside the grid, from the leading power laws at each end.
    pub tail: f64,
}

/// Integrates `f` over the grid; `f` must behave like `sigma^a` near zero
/// and `sigma^-b` at infinity with `a = 1`, `b = 3`, which holds for both
/// integrands here.
fn quadrature(grid: &SigmaGrid, f: impl Fn(f64) -> Result<f64>) -> Result<Quadrature> {
    let fine_nodes = grid.refined().nodes()?;
    let fine: Vec<f64> = fine_nodes.iter().map(|&s| f(s)).collect::<Result<_>>()?;
    let coarse_nodes: Vec<f64> = fine_nodes.iter().step_by(2).copied().collect();
    let coarse: Vec<f64> = fine.iter().step_by(2).copied().collect();
    let value = trapezoid(&coarse_nodes, &coarse);
    let refined = trapezoid(&fine_nodes, &fine);
    let (lo, hi) = (fine_nodes[0], fine_nodes[fine_nodes.len() - 1]);
    // int_0^lo c s ds = f(lo) lo / 2 and int_hi^inf c s^-3 ds = f(hi) hi / 2.
    let tail = (fine[0] * lo * 0.5).abs() + (fine[fine.len() - 1] * hi * 0.5).abs();
    Ok(Quadrature { value, discretization: (value - refined).abs() * 4.0 / 3.0, tail })
}

/// KL(p||q) against the integral of the excess denoising error weighted by
/// `sigma^-3`.
pub fn mse_gap_quadrature(p: &GaussianMixture, q: &GaussianMixture, grid: &SigmaGrid) -> Result<Quadrature> {
    let (gp, gq) = (Gaussian::of(p)?, Gaussian::of(q)?);
    quadrature(grid, |s| Ok((mse_closed_form(&gp, &gq, s)? - mse_closed_form(&gp, &gp, s)?) / (s * s * s)))
}

/// The same integral through the score gap weighted by `sigma`.
pub fn score_gap_quadrature(p: &GaussianMixture, q: &GaussianMixture, grid: &SigmaGrid) -> Result<Quadrature> {
    let (gp, gq) = (Gaussian::of(p)?, Gaussian::of(q)?);
    quadrature(grid, |s| Ok(score_gap_closed_form(&gp, &gq, s)? * s))
}

/// Monte-Carlo estimates of both denoising errors against the closed forms,
/// as the worst discrepancy in standard errors.
fn mse_closed_form_mc(p: &GaussianMixture, q: &GaussianMixture, sigmas: &[f64], n_mc: usize, seed: u64) -> Result<f64> {
    let (gp, gq) = (Gaussian::of(p)?, Gaussian::of(q)?);
    let mut worst: f64 = 0.0;
    for (j, &s) in sigmas.iter().enumerate() {
        let mut rng = RngStream::new(seed, StreamId::new(0, j as u64, 0));
        let xs = p.sample(n_mc, &mut rng);
        for (model, closed) in [(q, mse_closed_form(&gp, &gq, s)?), (p, mse_closed_form(&gp, &gp, s)?)] {
            let errs: Vec<f64> = xs
                .iter()
                .map(|x| {
                    let z = gaussian_vec(&mut rng, x.len(), s);
                    let x_t: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a + b).collect();
                    Ok(linalg::squared_distance(x, &model.denoise_mmse(&x_t, s)?))
                })
                .collect::<Result<_>>()?;
            let (m, se) = mean_and_se(&errs);
            worst = worst.max((m - closed).abs() / se.max(f64::MIN_POSITIVE));
        }
    }
    Ok(worst)
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

pub const KL_TOLERANCE: f64 = 2e-3;
pub const ROUTE_TOLERANCE: f64 = 1e-6;
/// Standard errors allowed between Monte-Carlo and closed-form expectations.
pub const MC_SIGMAS: f64 = 4.5;

pub fn verify_kl_identity(p: &GaussianMixture, q: &GaussianMixture, grid: &SigmaGrid, n_mc: usize, seed: u64) -> Result<Vec<CheckEntry>> {
    let kl = kl_gaussians(p, q)?;
    let quad = mse_gap_quadrature(p, q, grid)?;
    let mut out = vec![CheckEntry::new(
        "kl_excess_mse_vs_kl",
        (kl - quad.value).abs(),
        KL_TOLERANCE,
        format!("{} log-spaced points in [{:.0e}, {:.0e}]", grid.points, grid.lo, grid.hi),
    )
    .sides(kl, quad.value)
    .with("discretization_estimate", quad.discretization)
    .with("tail_estimate", quad.tail)];
    if n_mc > 1 {
        let z = mse_closed_form_mc(p, q, &[0.5, 1.0, 2.0], n_mc, seed)?;
        out.push(
            CheckEntry::new("kl_closed_form_vs_monte_carlo", z, MC_SIGMAS, format!("{n_mc} draws per noise level, deviation in standard errors"))
                .with("n_mc", n_mc as f64),
        );
    }
    Ok(out)
}

pub fn verify_score_route(p: &GaussianMixture, q: &GaussianMixture, grid: &SigmaGrid) -> Result<Vec<CheckEntry>> {
    let kl = kl_gaussians(p, q)?;
    let score = score_gap_quadrature(p, q, grid)?;
    let mse = mse_gap_quadrature(p, q, grid)?;
    Ok(vec![
        CheckEntry::new("score_gap_vs_kl", (kl - score.value).abs(), KL_TOLERANCE, "score-gap quadrature against exact KL")
            .sides(kl, score.value)
            .with("discretization_estimate", score.discretization)
            .with("tail_estimate", score.tail),
        CheckEntry::new("route_agreement", (score.value - mse.value).abs(), ROUTE_TOLERANCE, "score-gap route against excess-MSE route")
            .sides(score.value, mse.value),
    ])
}

/// Deviation from a flat spectrum at one point: `max_k lambda_k(Cov) / sigma^2`,
/// i.e. `max_k |mu_k / sigma^2 - 1|` over the eigenvalues `mu_k` of
/// `sigma^2 I - Cov`. Also returns the untransformed
/// `max_k |lambda_k(Cov) / sigma^2 - 1|`.
pub fn flattening_deviation(gmm: &GaussianMixture, x_t: &[f64], sigma: f64) -> Result<(f64, f64)> {
    let cov = gmm.posterior_cov(x_t, sigma)?.cov;
    let s2 = sigma * sigma;
    let eig = sym_eig(&cov)?;
    let flat = eig.values.iter().map(|l| (l / s2).abs()).fold(0.0, f64::max);
    let literal = eig.values.iter().map(|l| (l / s2 - 1.0).abs()).fold(0.0, f64::max);
    Ok((flat, literal))
}

/// Deviations per sigma (max over points), with a monotonicity check and a
/// bound on the value at the largest sigma.
pub fn verify_flattening(gmm: &GaussianMixture, sigmas: &[f64], points: &[Vec<f64>], tolerance: f64) -> Result<Vec<CheckEntry>> {
    if sigmas.is_empty() || points.is_empty() {
        return Err(Error::EmptyInput);
    }
    if sigmas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::BadRange("sigmas must be strictly increasing".into()));
    }
    let mut devs = Vec::with_capacity(sigmas.len());
    let mut literal = Vec::with_capacity(sigmas.len());
    for &s in sigmas {
        let mut worst = (0.0f64, 0.0f64);
        for x in points {
            let (f, l) = flattening_deviation(gmm, x, s)?;
            worst = (worst.0.max(f), worst.1.max(l));
        }
        devs.push(worst.0);
        literal.push(worst.1);
    }
    let increase = devs.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    let last = *devs.last().unwrap_or(&f64::NAN);
    let mut bound = CheckEntry::new(
        "flattening_bound",
        last,
        tolerance,
        format!("max_k lambda_k/sigma^2 at sigma = {}", sigmas[sigmas.len() - 1]),
    );
    let mut mono = CheckEntry::new("flattening_monotone", increase, 0.0, "largest increase between consecutive sigmas");
    for ((s, d), l) in sigmas.iter().zip(&devs).zip(&literal) {
        bound = bound.with(&format!("deviation_sigma_{s}"), *d).with(&format!("untransformed_sigma_{s}"), *l);
        mono = mono.with(&format!("deviation_sigma_{s}"), *d);
    }
    Ok(vec![bound, mono])
}

/// Trace of `V^T A V`.
fn projected_trace(a: &Mat, v: &Mat) -> Result<f64> {
    Ok(v.transpose().matmul(&a.matmul(v)?)?.trace())
}

pub fn random_orthonormal(rng: &mut RngStream, n: usize, k: usize) -> Result<Mat> {
    let cols: Vec<Vec<f64>> = (0..k).map(|_| gaussian_vec(rng, n, 1.0)).collect();
    linalg::qr_orthonormalize(&Mat::from_columns(&cols)?)
}

pub fn random_psd(rng: &mut RngStream, n: usize) -> Result<Mat> {
    let g = random_orthonormal(rng, n, n)?;
    let rank = 1 + rng.below(n);
    let diag: Vec<f64> = (0..n).map(|i| if i < rank { 0.1 + 3.0 * rng.uniform() } else { 0.0 }).collect();
    g.matmul(&Mat::from_diag(&diag))?.matmul(&g.transpose())
}

pub const KYFAN_BOUND_TOLERANCE: f64 = 1e-8;
pub const KYFAN_ATTAIN_TOLERANCE: f64 = 1e-10;

/// Random orthonormal `n x k` projections against the top-`k` eigenvalue sum.
pub fn verify_kyfan(matrix: &Mat, k: usize, trials: usize, seed: u64) -> Result<Vec<CheckEntry>> {
    if matrix.rows() != matrix.cols() {
        return Err(Error::NotSquare { rows: matrix.rows(), cols: matrix.cols() });
    }
    let n = matrix.rows();
    if k == 0 || k > n {
        return Err(Error::BadRange(format!("k must be in 1..={n}")));
    }
    let eig = sym_eig(matrix)?;
    let scale = eig.values[0].abs().max(1.0);
    let min = eig.values[n - 1];
    if min < -1e-10 * scale {
        return Err(Error::NotPsd(min));
    }
    let bound: f64 = eig.values[..k].iter().sum();
    let mut rng = RngStream::from_seed(seed);
    let mut excess = f64::NEG_INFINITY;
    for _ in 0..trials {
        let v = random_orthonormal(&mut rng, n, k)?;
        excess = excess.max(projected_trace(matrix, &v)? - bound);
    }
    let attained = projected_trace(matrix, &eig.leading_vectors(k))?;
    Ok(vec![
        CheckEntry::new("kyfan_bound", excess.max(0.0), KYFAN_BOUND_TOLERANCE, format!("{trials} random projections, n = {n}, k = {k}"))
            .with("max_trace_minus_bound", excess),
        CheckEntry::new("kyfan_attained", (attained - bound).abs(), KYFAN_ATTAIN_TOLERANCE, "leading eigenvectors").sides(attained, bound),
    ])
}

/// An analytic model with a noisy point to test at.
#[derive(Debug, Clone)]
pub struct Triple {
    pub gmm: GaussianMixture,
    pub x_t: Vec<f64>,
    pub sigma: f64,
}

/// Factor applied to component eigenvalues past `gap_after`.
pub const GAP_FACTOR: f64 = 0.3;

/// Mixture whose components have geometric covariance spectra (ratio in
/// `[0.5, 0.8]`), with an extra drop of [`GAP_FACTOR`] after the first
/// `gap_after` eigenvalues.
pub fn random_gmm(rng: &mut RngStream, dim: usize, max_components: usize, gap_after: usize) -> Result<GaussianMixture> {
    let n = 1 + rng.below(max_components.max(1));
    let raw: Vec<f64> = (0..n).map(|_| 0.5 + rng.uniform()).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let mut means = Vec::with_capacity(n);
    let mut covariances = Vec::with_capacity(n);
    for _ in 0..n {
        means.push(gaussian_vec(rng, dim, 2.0));
        let q = random_orthonormal(rng, dim, dim)?;
        let top = 0.5 + 1.5 * rng.uniform();
        let ratio = 0.5 + 0.3 * rng.uniform();
        let spectrum: Vec<f64> =
            (0..dim).map(|i| top * ratio.powi(i as i32) * if i >= gap_after { GAP_FACTOR } else { 1.0 }).collect();
        let cov = q.matmul(&Mat::from_diag(&spectrum))?.matmul(&q.transpose())?.symmetrized();
        covariances.push(cov.into_vec());
    }
    GaussianMixture::from_spec(GmmSpec { weights, means, covariances })
}

/// `count` triples with dimension in `dims`, `x_t` drawn from the noisy
/// marginal and `sigma` log-uniform in `sigma_range`. `gap_after` is passed
/// to [`random_gmm`]; `None` means no gap.
pub fn random_triples(
    seed: u64,
    count: usize,
    dims: (usize, usize),
    sigma_range: (f64, f64),
    gap_after: Option<usize>,
) -> Result<Vec<Triple>> {
    (0..count as u64)
        .map(|i| {
            let mut rng = RngStream::new(seed, StreamId::new(i, 0, 0));
            let dim = dims.0 + rng.below(dims.1 - dims.0 + 1);
            let gmm = random_gmm(&mut rng, dim, 3, gap_after.unwrap_or(dim))?;
            let sigma = (sigma_range.0.ln() + (sigma_range.1 / sigma_range.0).ln() * rng.uniform()).exp();
            let x = gmm.sample(1, &mut rng).remove(0);
            let z = gaussian_vec(&mut rng, dim, sigma);
            let x_t = x.iter().zip(&z).map(|(a, b)| a + b).collect();
            Ok(Triple { gmm, x_t, sigma })
        })
        .collect()
}

pub const MIYASAWA_TOLERANCE: f64 = 1e-4;

/// Largest entry of `a - b`, relative to the covariance scale when it
/// exceeds one.
fn cov_gap(a: &Mat, b: &Mat) -> f64 {
    a.sub(b).max_abs() / a.max_abs().max(1.0)
}

/// Tweedie's formula, and the posterior covariance against both the
/// score Hessian and the denoiser Jacobian by finite differences.
pub fn verify_miyasawa(triples: &[Triple]) -> Result<Vec<CheckEntry>> {
    if triples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (mut tweedie, mut hess, mut jac) = (0.0f64, 0.0f64, 0.0f64);
    for t in triples {
        let (g, x, s) = (&t.gmm, &t.x_t, t.sigma);
        let s2 = s * s;
        let d = g.dim();
        let score = g.score(x, s)?;
        let mean = g.denoise_mmse(x, s)?;
        let via_score: Vec<f64> = x.iter().zip(&score).map(|(a, b)| a + s2 * b).collect();
        tweedie = tweedie.max(linalg::norm_inf(&linalg::sub(&mean, &via_score)));

        let cov = g.posterior_cov(x, s)?.cov;
        let h = fd_step(x);
        let hessian = fd_jacobian(x, h, |y| g.score(y, s))?;
        let from_hessian = Mat::identity(d).add(&hessian.scale(s2)).scale(s2);
        hess = hess.max(cov_gap(&cov, &from_hessian));
        let jacobian = fd_jacobian(x, h, |y| g.denoise_mmse(y, s))?;
        jac = jac.max(cov_gap(&cov, &jacobian.scale(s2)));
    }
    let n = triples.len();
    Ok(vec![
        CheckEntry::new("miyasawa_tweedie", tweedie, 0.0, format!("posterior mean against x_t + sigma^2 score, {n} triples")),
        CheckEntry::new("miyasawa_hessian", hess, MIYASAWA_TOLERANCE, format!("covariance against sigma^2 (I + sigma^2 H), {n} triples")),
        CheckEntry::new("miyasawa_jacobian", jac, MIYASAWA_TOLERANCE, format!("covariance against sigma^2 dD/dx, {n} triples")),
    ])
}

pub const SPECTRAL_REL_TOLERANCE: f64 = 1e-2;
pub const DENSE_TOP_TOLERANCE: f64 = 1e-4;

/// Subspace iteration against the dense finite-difference spectrum, and the
/// dense spectrum's top eigenvalue against the analytic covariance.
pub fn verify_spectral(triples: &[Triple], k: usize, iters: usize, seed: u64) -> Result<Vec<CheckEntry>> {
    if triples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let cfg = SpectralConfig { k, iters, c: StepSize::Relative(1e-3), early_stop: None, seed };
    let (mut rel, mut top) = (0.0f64, 0.0f64);
    for (i, t) in triples.iter().enumerate() {
        let mut rng = RngStream::new(seed, StreamId::new(i as u64, 0, 0));
        let est = subspace_iteration_with(&t.gmm, &t.x_t, t.sigma, &cfg, &mut rng)?;
        let dense = exact_spectrum(&t.gmm, &t.x_t, t.sigma, k)?;
        for (a, b) in est.eigenvalues.iter().zip(&dense.eigenvalues) {
            rel = rel.max((a - b).abs() / b.abs().max(f64::MIN_POSITIVE));
        }
        let analytic = sym_eig(&t.gmm.posterior_cov(&t.x_t, t.sigma)?.cov)?.values[0];
        top = top.max((dense.eigenvalues[0] - analytic).abs() / analytic.abs().max(1.0));
    }
    let n = triples.len();
    Ok(vec![
        CheckEntry::new("spectral_vs_dense", rel, SPECTRAL_REL_TOLERANCE, format!("max relative eigenvalue error, k = {k}, {iters} iterations, {n} triples")),
        CheckEntry::new("dense_vs_analytic_top", top, DENSE_TOP_TOLERANCE, format!("top eigenvalue, {n} triples")),
    ])
}

/// Monte-Carlo denoising error against the mean posterior-covariance trace
/// over the same noisy points, in standard errors of the paired difference.
pub fn verify_mse_trace(gmm: &GaussianMixture, sigma: f64, pairs: usize, seed: u64, tolerance: f64) -> Result<CheckEntry> {
    if pairs < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: pairs });
    }
    let idx: Vec<u64> = (0..pairs as u64).collect();
    let rows = try_map_indexed(&idx, Execution::Parallel, |_, &i| {
        let mut rng = RngStream::new(seed, StreamId::new(i, 0, 0));
        let x = gmm.sample(1, &mut rng).remove(0);
        let z = gaussian_vec(&mut rng, x.len(), sigma);
        let x_t: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a + b).collect();
        let post = gmm.posterior_cov(&x_t, sigma)?;
        Ok((linalg::squared_distance(&x, &post.mean), post.cov.trace()))
    })?;
    let mse = rows.iter().map(|r| r.0).sum::<f64>() / pairs as f64;
    let tr = rows.iter().map(|r| r.1).sum::<f64>() / pairs as f64;
    let diffs: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
    let (_, se) = mean_and_se(&diffs);
    Ok(CheckEntry::new("mse_equals_expected_trace", (mse - tr).abs() / se, tolerance, format!("{pairs} pairs at sigma = {sigma}, deviation in standard errors"))
        .sides(mse, tr)
        .with("standard_error", se))
}

/// Settings for the full suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub seed: u64,
    pub grid: SigmaGrid,
    pub n_mc: usize,
    pub flattening_sigmas: Vec<f64>,
    pub flattening_tolerance: f64,
    pub kyfan_matrices: usize,
    pub kyfan_trials: usize,
    pub miyasawa_triples: usize,
    pub spectral_triples: usize,
    pub mse_pairs: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 0,
            grid: SigmaGrid::default(),
            n_mc: 20_000,
            flattening_sigmas: vec![10.0, 30.0, 100.0],
            flattening_tolerance: 0.05,
            kyfan_matrices: 20,
            kyfan_trials: 500,
            miyasawa_triples: 100,
            spectral_triples: 50,
            mse_pairs: 100_000,
        }
    }
}

/// Bounded two-component unit-variance mixture in 2-D.
pub fn flattening_mixture() -> Result<GaussianMixture> {
    GaussianMixture::from_spec(GmmSpec {
        weights: vec![0.5, 0.5],
        means: vec![vec![-2.0, 1.0], vec![2.0, -1.0]],
        covariances: vec![vec![1.0, 0.0, 0.0, 1.0]; 2],
    })
}

/// Points on a `[-3, 3]^2` lattice.
pub fn lattice_points() -> Vec<Vec<f64>> {
    let ticks: Vec<f64> = (0..7).map(|i| -3.0 + i as f64).collect();
    ticks.iter().flat_map(|&a| ticks.iter().map(move |&b| vec![a, b])).collect()
}

/// Mixture used by the denoising-error check.
pub fn mse_mixture() -> Result<GaussianMixture> {
    GaussianMixture::from_spec(GmmSpec {
        weights: vec![0.3, 0.7],
        means: vec![vec![-1.5, 0.5], vec![1.0, -0.5]],
        covariances: vec![vec![0.5, 0.2, 0.2, 0.4], vec![1.0, -0.3, -0.3, 0.6]],
    })
}

#[derive(Debug, Clone, Copy)]
enum Check {
    KlIdentity,
    ScoreRoute,
    Flattening,
    KyFan,
    Miyasawa,
    Spectral,
    MseTrace,
}

/// Runs every check concurrently and concatenates the entries in a fixed order.
pub fn run_suite(cfg: &SuiteConfig) -> Result<VerifyReport> {
    use Check::*;
    let checks = [KlIdentity, ScoreRoute, Flattening, KyFan, Miyasawa, Spectral, MseTrace];
    let seed = cfg.seed;
    let parts = try_map_indexed(&checks, Execution::Parallel, |i, check| -> Result<Vec<CheckEntry>> {
        let seed = derive_seed(seed, i as u64);
        let p = GaussianMixture::isotropic(vec![0.0], 1.0)?;
        let q = GaussianMixture::isotropic(vec![1.0], 1.0)?;
        match check {
            KlIdentity => verify_kl_identity(&p, &q, &cfg.grid, cfg.n_mc, seed),
            ScoreRoute => verify_score_route(&p, &q, &cfg.grid),
            Flattening => verify_flattening(&flattening_mixture()?, &cfg.flattening_sigmas, &lattice_points(), cfg.flattening_tolerance),
            KyFan => {
                let mut rng = RngStream::from_seed(seed);
                let (mut bound, mut attained) = (Vec::new(), Vec::new());
                for m in 0..cfg.kyfan_matrices {
                    let n = 2 + rng.below(15);
                    let a = random_psd(&mut rng, n)?;
                    let k = 1 + rng.below(n.min(4));
                    let mut e = verify_kyfan(&a, k, cfg.kyfan_trials, derive_seed(seed, m as u64))?;
                    attained.push(e.pop().expect("two entries"));
                    bound.push(e.pop().expect("two entries"));
                }
                Ok(vec![worst_of(bound, "kyfan_bound"), worst_of(attained, "kyfan_attained")])
            }
            Miyasawa => verify_miyasawa(&random_triples(seed, cfg.miyasawa_triples, (1, 8), (0.1, 3.0), None)?),
            Spectral => verify_spectral(&random_triples(seed, cfg.spectral_triples, (3, 16), (0.7, 3.0), Some(3))?, 3, 20, seed),
            MseTrace => Ok(vec![verify_mse_trace(&mse_mixture()?, 1.0, cfg.mse_pairs, seed, 3.0)?]),
        }
    })?;
    Ok(VerifyReport { entries: parts.into_iter().flatten().collect() })
}

/// Collapses repeated entries of one check into the worst case.
fn worst_of(entries: Vec<CheckEntry>, name: &str) -> CheckEntry {
    let n = entries.len();
    let mut worst = entries
        .into_iter()
        .max_by(|a, b| (a.deviation - a.tolerance).total_cmp(&(b.deviation - b.tolerance)))
        .unwrap_or_else(|| CheckEntry::new(name, f64::NAN, 0.0, "no cases"));
    worst.detail = format!("worst of {n}: {}", worst.detail);
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn gauss(mu: f64, var: f64) -> GaussianMixture {
        GaussianMixture::isotropic(vec![mu], var).unwrap()
    }

    #[test]
    fn integrands_match_gaussian_closed_form() {
        let (p, q) = (Gaussian::of(&gauss(0.0, 1.0)).unwrap(), Gaussian::of(&gauss(1.0, 1.0)).unwrap());
        for s in [1e-2, 0.3, 1.0, 4.0, 50.0] {
            let excess = mse_closed_form(&p, &q, s).unwrap() - mse_closed_form(&p, &p, s).unwrap();
            let want = s.powi(4) / (1.0 + s * s).powi(2);
            assert_relative_eq!(excess, want, max_relative = 1e-9);
            assert_relative_eq!(score_gap_closed_form(&p, &q, s).unwrap() * s, s / (1.0 + s * s).powi(2), max_relative = 1e-9);
            // MMSE of N(0,1) is the posterior variance.
            assert_relative_eq!(mse_closed_form(&p, &p, s).unwrap(), s * s / (1.0 + s * s), max_relative = 1e-12);
        }
    }

    #[test]
    fn unit_shift_pair() {
        let (p, q) = (gauss(0.0, 1.0), gauss(1.0, 1.0));
        let e = verify_kl_identity(&p, &q, &SigmaGrid::default(), 4000, 1).unwrap();
        assert!(e.iter().all(|c| c.passed), "{e:?}");
        assert!((e[0].rhs.unwrap() - 0.5).abs() < 2e-3);
        let e4 = verify_score_route(&p, &q, &SigmaGrid::default()).unwrap();
        assert!(e4.iter().all(|c| c.passed), "{e4:?}");
    }

    #[test]
    fn identical_pair_is_zero() {
        let p = gauss(0.3, 2.0);
        let q = mse_gap_quadrature(&p, &p, &SigmaGrid::default()).unwrap();
        assert!(q.value.abs() < 1e-15);
        assert!(score_gap_quadrature(&p, &p, &SigmaGrid::default()).unwrap().value.abs() < 1e-15);
    }

    #[test]
    fn refinement_within_estimate() {
        let (p, q) = (gauss(0.0, 1.0), gauss(1.0, 1.0));
        let g = SigmaGrid { points: 60, ..Default::default() };
        let coarse = mse_gap_quadrature(&p, &q, &g).unwrap();
        let fine = mse_gap_quadrature(&p, &q, &g.refined()).unwrap();
        assert!((coarse.value - fine.value).abs() < coarse.discretization);
        // Roughly second order: the true error is close to the estimate.
        assert!((coarse.value - 0.5).abs() < 2.0 * coarse.discretization + coarse.tail);
    }

    #[test]
    fn non_gaussian_rejected() {
        let m = flattening_mixture().unwrap();
        assert!(matches!(mse_gap_quadrature(&m, &m, &SigmaGrid::default()), Err(Error::NotSingleGaussian)));
    }

    #[test]
    fn single_gaussian_flattening() {
        let g = GaussianMixture::isotropic(vec![0.0, 0.0], 1.0).unwrap();
        for s in [0.5, 3.0, 10.0] {
            let (f, literal) = flattening_deviation(&g, &[0.4, -1.0], s).unwrap();
            assert_relative_eq!(f, 1.0 / (1.0 + s * s), epsilon = 1e-12);
            assert_relative_eq!(literal, s * s / (1.0 + s * s), epsilon = 1e-12);
        }
        assert!((flattening_deviation(&g, &[0.0, 0.0], 10.0).unwrap().0 - 0.0099).abs() < 1e-4);
    }

    #[test]
    fn flattening_mixture_flattens() {
        let e = verify_flattening(&flattening_mixture().unwrap(), &[10.0, 30.0, 100.0], &lattice_points(), 0.05).unwrap();
        assert!(e.iter().all(|c| c.passed), "{e:?}");
        let d10 = e[0].extra["deviation_sigma_10"];
        let d100 = e[0].extra["deviation_sigma_100"];
        assert!(d100 < d10);
    }

    #[test]
    fn flattening_rejects_unsorted() {
        assert!(verify_flattening(&flattening_mixture().unwrap(), &[3.0, 1.0], &lattice_points(), 0.05).is_err());
    }

    #[test]
    fn kyfan_examples() {
        let a = Mat::from_diag(&[3.0, 2.0, 1.0]);
        let e = verify_kyfan(&a, 2, 200, 4).unwrap();
        assert!(e.iter().all(|c| c.passed));
        assert_relative_eq!(e[1].lhs.unwrap(), 5.0, epsilon = 1e-12);

        let mut rng = RngStream::from_seed(9);
        let b = random_psd(&mut rng, 5).unwrap();
        for _ in 0..20 {
            let v = random_orthonormal(&mut rng, 5, 5).unwrap();
            assert_relative_eq!(projected_trace(&b, &v).unwrap(), b.trace(), epsilon = 1e-10);
        }

        let mut rng = RngStream::from_seed(10);
        let c = random_psd(&mut rng, 8).unwrap();
        assert!(verify_kyfan(&c, 3, 500, 2).unwrap().iter().all(|c| c.passed));

        let bad = Mat::from_diag(&[1.0, -0.5]);
        assert!(matches!(verify_kyfan(&bad, 1, 10, 0), Err(Error::NotPsd(_))));
    }

    #[test]
    fn miyasawa_single_gaussian_is_tight() {
        let cov = Mat::from_rows(&[vec![1.0, 0.3], vec![0.3, 0.5]]).unwrap();
        let g = GaussianMixture::single(vec![0.2, -0.1], &cov).unwrap();
        let t = Triple { gmm: g, x_t: vec![0.5, 0.7], sigma: 0.8 };
        let e = verify_miyasawa(&[t]).unwrap();
        assert_eq!(e[0].deviation, 0.0);
        assert!(e[1].deviation < 1e-8 && e[2].deviation < 1e-8, "{e:?}");
    }

    #[test]
    fn miyasawa_symmetric_point() {
        let g = GaussianMixture::from_spec(GmmSpec {
            weights: vec![0.5, 0.5],
            means: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            covariances: vec![vec![0.5, 0.0, 0.0, 0.5]; 2],
        })
        .unwrap();
        let post = g.posterior_cov(&[0.0, 0.0], 1.0).unwrap();
        assert!(linalg::norm_inf(&post.mean) < 1e-15);
        assert!(post.cov[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn miyasawa_random_triples() {
        let triples = random_triples(3, 20, (1, 6), (0.1, 3.0), None).unwrap();
        assert!(verify_miyasawa(&triples).unwrap().iter().all(|c| c.passed));
    }

    #[test]
    fn spectral_oracle_small() {
        let triples = random_triples(5, 6, (3, 8), (0.7, 3.0), Some(3)).unwrap();
        let e = verify_spectral(&triples, 3, 20, 1).unwrap();
        assert!(e.iter().all(|c| c.passed), "{e:?}");
    }

    #[test]
    fn mse_trace_small() {
        let e = verify_mse_trace(&mse_mixture().unwrap(), 1.0, 5000, 2, 3.0).unwrap();
        assert!(e.passed, "{e:?}");
    }

    #[test]
    fn report_table_and_json() {
        let r = VerifyReport { entries: vec![CheckEntry::new("a", 0.1, 0.2, ""), CheckEntry::new("b", f64::NAN, 1.0, "")] };
        assert!(!r.all_passed());
        assert!(r.table().contains("FAIL"));
        assert!(r.table().contains("1/2 checks passed"));
        serde_json::to_string(&r).unwrap();
        assert!(!VerifyReport::default().all_passed());
    }

    proptest! {
        #[test]
        fn routes_agree_for_any_gaussian_pair(
            mp in -2.0f64..2.0, mq in -2.0f64..2.0, vp in 0.2f64..3.0, vq in 0.2f64..3.0,
        ) {
            let (p, q) = (gauss(mp, vp), gauss(mq, vq));
            let g = SigmaGrid { points: 120, ..Default::default() };
            let a = mse_gap_quadrature(&p, &q, &g).unwrap().value;
            let b = score_gap_quadrature(&p, &q, &g).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }

        #[test]
        fn pass_iff_within_tolerance(d in 0.0f64..2.0, t in 0.0f64..2.0) {
            prop_assert_eq!(CheckEntry::new("x", d, t, "").passed, d <= t);
        }
    }
}
