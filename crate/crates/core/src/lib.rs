//! EigenScore: out-of-distribution detection from the leading eigenvalues of
//! a diffusion denoiser's posterior covariance.
//!
//! The posterior covariance at a noisy input is `sigma^2` times the
//! denoiser Jacobian. Its top eigenvalues are estimated without forming the
//! Jacobian, by subspace iteration over finite-difference Jacobian-vector
//! products ([`spectral`]). Summed over noise levels and z-scored against
//! training statistics they give a per-sample OOD score ([`pipeline`]).
//! Gaussian mixtures ([`gmm`]) supply exact denoisers and covariances used
//! to check every step ([`verify`]).

pub mod denoiser;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod io;
pub mod linalg;
pub mod mlp;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod spectral;
pub mod verify;

pub use denoiser::Denoiser;
pub use error::{Error, Result};
