//! Central-difference oracle for the switchable layer's backward pass.
//!
//! The scalar loss is `sum(d_out .* forward(x))`, a linear functional
//! of the output, so its analytic gradients are exactly the gradient
//! bundle returned by the backward pass.

use crate::error::Result;
use crate::snlayer::{sn_backward, sn_forward, ForwardMode, SnParams};
use crate::tensor::{Rng, Tensor4};

/// Max relative error per parameter group.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub input: f64,
    pub gamma: f64,
    pub beta: f64,
    pub lambda_mu: f64,
    pub lambda_var: f64,
}

impl GradCheckReport {
    pub fn groups(&self) -> [(&'static str, f64); 5] {
        [
            ("input", self.input),
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("lambda_mu", self.lambda_mu),
            ("lambda_var", self.lambda_var),
        ]
    }

    pub fn max(&self) -> f64 {
        self.groups()
            .iter()
            .map(|(_, v)| *v)
            .fold(0.0, f64::max)
    }
}

fn loss(x: &Tensor4, params: &SnParams, d_out: &Tensor4) -> Result<f64> {
    let (y, _) = sn_forward(x, params, ForwardMode::Train)?;
    Ok(y
        .as_slice()
        .iter()
        .zip(d_out.as_slice())
        .map(|(a, b)| a * b)
        .sum())
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Check every gradient group of `sn_backward` against central finite
/// differences of the seeded loss at the given configuration.
pub fn gradcheck_params(
    x: &Tensor4,
    d_out: &Tensor4,
    params: &SnParams,
    eps_fd: f64,
) -> Result<GradCheckReport> {
    if eps_fd.is_nan() || eps_fd <= 0.0 {
        return Err(crate::error::SnError::Parameter(format!(
            "finite-difference step must be > 0, got {eps_fd}"
        )));
    }
    let (_, cache) = sn_forward(x, params, ForwardMode::Train)?;
    let grads = sn_backward(d_out, &cache, params)?;

    let mut report = GradCheckReport {
        input: 0.0,
        gamma: 0.0,
        beta: 0.0,
        lambda_mu: 0.0,
        lambda_var: 0.0,
    };

    // input elements
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.as_slice()[i];
        xp.as_mut_slice()[i] = orig + eps_fd;
        let lp = loss(&xp, params, d_out)?;
        xp.as_mut_slice()[i] = orig - eps_fd;
        let lm = loss(&xp, params, d_out)?;
        xp.as_mut_slice()[i] = orig;
        let numeric = (lp - lm) / (2.0 * eps_fd);
        report.input = report.input.max(rel_err(grads.d_input.as_slice()[i], numeric));
    }

    // per-channel affine parameters
    for cc in 0..params.channels() {
        let mut p = params.clone();
        p.gamma[cc] += eps_fd;
        let lp = loss(x, &p, d_out)?;
        p.gamma[cc] -= 2.0 * eps_fd;
        let lm = loss(x, &p, d_out)?;
        let numeric = (lp - lm) / (2.0 * eps_fd);
        report.gamma = report.gamma.max(rel_err(grads.d_gamma[cc], numeric));

        let mut p = params.clone();
        p.beta[cc] += eps_fd;
        let lp = loss(x, &p, d_out)?;
        p.beta[cc] -= 2.0 * eps_fd;
        let lm = loss(x, &p, d_out)?;
        let numeric = (lp - lm) / (2.0 * eps_fd);
        report.beta = report.beta.max(rel_err(grads.d_beta[cc], numeric));
    }

    // control triplets
    for k in 0..3 {
        let mut p = params.clone();
        p.lambda_mu[k] += eps_fd;
        let lp = loss(x, &p, d_out)?;
        p.lambda_mu[k] -= 2.0 * eps_fd;
        let lm = loss(x, &p, d_out)?;
        let numeric = (lp - lm) / (2.0 * eps_fd);
        report.lambda_mu = report.lambda_mu.max(rel_err(grads.d_lambda_mu[k], numeric));

        let mut p = params.clone();
        p.lambda_var[k] += eps_fd;
        let lp = loss(x, &p, d_out)?;
        p.lambda_var[k] -= 2.0 * eps_fd;
        let lm = loss(x, &p, d_out)?;
        let numeric = (lp - lm) / (2.0 * eps_fd);
        report.lambda_var = report
            .lambda_var
            .max(rel_err(grads.d_lambda_var[k], numeric));
    }

    Ok(report)
}

/// Seeded gradient check: random input, random output gradient, and
/// perturbed parameters at the given shape.
pub fn gradcheck(
    shape: (usize, usize, usize, usize),
    seed: u64,
    eps_fd: f64,
) -> Result<GradCheckReport> {
    let (n, c, h, w) = shape;
    let mut rng = Rng::new(seed);
    let x = Tensor4::randn(&mut rng, n, c, h, w, 0.0, 1.0)?;
    let d_out = Tensor4::randn(&mut rng, n, c, h, w, 0.0, 1.0)?;
    let mut params = SnParams::new(c);
    for g in &mut params.gamma {
        *g = 1.0 + 0.3 * rng.normal();
    }
    for b in &mut params.beta {
        *b = 0.3 * rng.normal();
    }
    for k in 0..3 {
        params.lambda_mu[k] = 1.0 + 0.5 * rng.normal();
        params.lambda_var[k] = 1.0 + 0.5 * rng.normal();
    }
    gradcheck_params(&x, &d_out, &params, eps_fd)
}
