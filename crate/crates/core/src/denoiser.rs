//! The denoiser contract shared by analytic and learned models.

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// A map `(x_t, sigma) -> x_hat` estimating the clean signal.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;

    fn denoise(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>>;

    /// The mixture behind this denoiser, when it is analytic.
    fn as_gmm(&self) -> Option<&crate::gmm::GaussianMixture> {
        None
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn denoise(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        (**self).denoise(x_t, sigma)
    }

    fn as_gmm(&self) -> Option<&crate::gmm::GaussianMixture> {
        (**self).as_gmm()
    }
}

impl<D: Denoiser + ?Sized + Send> Denoiser for Box<D> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn denoise(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        (**self).denoise(x_t, sigma)
    }

    fn as_gmm(&self) -> Option<&crate::gmm::GaussianMixture> {
        (**self).as_gmm()
    }
}

/// `D(x) = A x`, independent of the noise level.
#[derive(Debug, Clone)]
pub struct LinearDenoiser {
    matrix: Mat,
}

impl LinearDenoiser {
    pub fn new(matrix: Mat) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(Error::NotSquare { rows: matrix.rows(), cols: matrix.cols() });
        }
        Ok(LinearDenoiser { matrix })
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        LinearDenoiser { matrix: Mat::from_diag(diag) }
    }

    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }
}

impl Denoiser for LinearDenoiser {
    fn dim(&self) -> usize {
        self.matrix.rows()
    }

    fn denoise(&self, x_t: &[f64], _sigma: f64) -> Result<Vec<f64>> {
        self.matrix.matvec(x_t)
    }
}

/// Wraps a closure as a denoiser.
pub struct FnDenoiser<F> {
    dim: usize,
    f: F,
}

impl<F> FnDenoiser<F>
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnDenoiser { dim, f }
    }
}

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn denoise(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        check_dim(self.dim, x_t.len())?;
        Ok((self.f)(x_t, sigma))
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimMismatch { expected, got })
    }
}
