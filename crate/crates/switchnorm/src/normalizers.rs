//! Plain normalization layers: normalize by one scope's statistics,
//! then re-scale and re-shift per channel.
//!
//! These serve both as standalone forward layers and as the one-hot
//! degeneration targets for the switchable layer. Only forward passes
//! live here; the switchable layer's backward subsumes the one-hot
//! cases.

use crate::error::{Result, SnError};
use crate::exec;
use crate::stats::{stats_direct, Scope};
use crate::tensor::Tensor4;

/// Per-channel scale and shift plus the stability constant.
#[derive(Debug, Clone)]
pub struct AffineParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl AffineParams {
    /// `gamma = 1`, `beta = 0` for `c` channels with the given epsilon.
    pub fn identity(c: usize, eps: f64) -> Result<Self> {
        Self::new(vec![1.0; c], vec![0.0; c], eps)
    }

    pub fn new(gamma: Vec<f64>, beta: Vec<f64>, eps: f64) -> Result<Self> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(SnError::Parameter(format!("eps must be > 0, got {eps}")));
        }
        if gamma.len() != beta.len() {
            return Err(SnError::Shape(format!(
                "gamma ({}) and beta ({}) lengths differ",
                gamma.len(),
                beta.len()
            )));
        }
        Ok(Self { gamma, beta, eps })
    }

    fn check_channels(&self, c: usize) -> Result<()> {
        if self.gamma.len() != c {
            return Err(SnError::Shape(format!(
                "affine parameters sized for {} channels, tensor has {c}",
                self.gamma.len()
            )));
        }
        Ok(())
    }
}

/// Conventional default for the stability constant.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Normalize `x` by the chosen scope's statistics:
/// `gamma_c * (x - mu) / sqrt(var + eps) + beta_c`.
///
/// `group_count` is required for [`Scope::Gn`] and must be absent
/// otherwise.
pub fn normalize_forward(
    x: &Tensor4,
    scope: Scope,
    params: &AffineParams,
    group_count: Option<usize>,
) -> Result<Tensor4> {
    let (_, c, h, w) = x.shape();
    params.check_channels(c)?;
    let stats = stats_direct(x, scope, group_count)?;
    let hw = h * w;
    let cs = c / group_count.unwrap_or(1).max(1);

    let mut out = x.clone();
    let src = x.as_slice();
    exec::for_each_chunk_mut(out.as_mut_slice(), hw, |chunk_idx, chunk| {
        // chunk_idx enumerates (n, c) pairs in row-major order
        let nn = chunk_idx / c;
        let cc = chunk_idx % c;
        let entry = match scope {
            Scope::In => chunk_idx,
            Scope::Ln => nn,
            Scope::Bn => cc,
            Scope::Gn => nn * stats.group_count.unwrap() + cc / cs,
        };
        let mu = stats.mu[entry];
        let rstd = 1.0 / (stats.var[entry] + params.eps).sqrt();
        let g = params.gamma[cc];
        let b = params.beta[cc];
        let base = chunk_idx * hw;
        for (k, o) in chunk.iter_mut().enumerate() {
            *o = g * (src[base + k] - mu) * rstd + b;
        }
    });
    Ok(out)
}
