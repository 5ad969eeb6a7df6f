//! Gaussian kernels with a fixed list of bandwidths.
//!
//! A single Gaussian is `exp(−‖x−y‖² / (2σ²))`; the multi-bandwidth kernel is
//! the unweighted mean over the bandwidth list, so every value lies in
//! `(0, 1]`.

use alloc::vec::Vec;

use crate::error::{dim, Error, Result};
use crate::tensor::{self, Tensor};

/// Bandwidths used when none are configured.
pub const DEFAULT_SIGMAS: [f64; 4] = [2.0, 4.0, 8.0, 16.0];

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    sigmas: Vec<f64>,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            sigmas: DEFAULT_SIGMAS.to_vec(),
        }
    }
}

impl KernelSpec {
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(Error::Config("kernel bandwidth list is empty".into()));
        }
        if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Config(alloc::format!("kernel bandwidth {s} is not positive")));
        }
        Ok(Self { sigmas })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix(pub Tensor);

impl KernelMatrix {
    pub fn rows(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0.get2(r, c)
    }

    pub fn mean(&self) -> f64 {
        self.0.data().iter().sum::<f64>() / self.0.len() as f64
    }

    /// Entrywise product with another matrix of the same shape.
    pub fn hadamard(&self, other: &KernelMatrix) -> Result<KernelMatrix> {
        dim("hadamard rows", self.rows(), other.rows())?;
        dim("hadamard cols", self.cols(), other.cols())?;
        let data = self.0.data().iter().zip(other.0.data()).map(|(a, b)| a * b).collect();
        Ok(KernelMatrix(Tensor::matrix(self.rows(), self.cols(), data)?))
    }
}

pub fn gaussian_kernel(x: &[f64], y: &[f64], sigma: f64) -> Result<f64> {
    dim("kernel input", x.len(), y.len())?;
    Ok(gaussian_of_sq(tensor::sq_dist(x, y), sigma))
}

pub fn multi_kernel(x: &[f64], y: &[f64], spec: &KernelSpec) -> Result<f64> {
    dim("kernel input", x.len(), y.len())?;
    Ok(multi_gaussian_of_sq(tensor::sq_dist(x, y), spec.sigmas()))
}

/// Kernel values between every row of `a` and every row of `b`.
pub fn kernel_matrix(a: &Tensor, b: &Tensor, spec: &KernelSpec) -> Result<KernelMatrix> {
    let (n, da) = a.expect_matrix("kernel_matrix lhs")?;
    let (m, db) = b.expect_matrix("kernel_matrix rhs")?;
    dim("kernel_matrix feature width", da, db)?;
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            out.push(multi_gaussian_of_sq(tensor::sq_dist(a.row(i), b.row(j)), spec.sigmas()));
        }
    }
    Ok(KernelMatrix(Tensor::matrix(n, m, out)?))
}

#[inline]
fn gaussian_of_sq(sq: f64, sigma: f64) -> f64 {
    libm::exp(-sq / (2.0 * sigma * sigma))
}

/// Mean of the Gaussians over `sigmas` at squared distance `sq`. Shared by the
/// plain and the taped paths so both produce identical bits.
#[inline]
pub(crate) fn multi_gaussian_of_sq(sq: f64, sigmas: &[f64]) -> f64 {
    let s: f64 = sigmas.iter().map(|&sig| gaussian_of_sq(sq, sig)).sum();
    s / sigmas.len() as f64
}

/// Derivative of [`multi_gaussian_of_sq`] with respect to `sq`.
pub(crate) fn multi_gaussian_of_sq_deriv(sq: f64, sigmas: &[f64]) -> f64 {
    let s: f64 = sigmas
        .iter()
        .map(|&sig| {
            let c = 2.0 * sig * sig;
            -libm::exp(-sq / c) / c
        })
        .sum();
    s / sigmas.len() as f64
}
