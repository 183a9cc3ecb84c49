//! Per-scope means and variances.
//!
//! `stats_direct` sums literally over each scope's pixel set with the
//! two-pass centered form. `stats_reuse` makes a single pass for the
//! per-(sample, channel) moments and derives the layer and batch
//! moments from them, which is how the switchable layer computes all
//! three scopes in `O(NCHW)`.
//!
//! Variances are population variances (divide by the pixel count, no
//! Bessel correction) throughout.

use crate::error::{Result, SnError};
use crate::exec;
use crate::tensor::Tensor4;

/// Pixel set over which one normalizer estimates its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Per (sample, channel) over `(H, W)`: instance statistics.
    In,
    /// Per sample over `(C, H, W)`: layer statistics.
    Ln,
    /// Per channel over `(N, H, W)`: batch statistics.
    Bn,
    /// Per (sample, channel group) over `(C/g, H, W)`: group statistics.
    Gn,
}

impl Scope {
    /// Number of (mean, variance) entry pairs for a tensor of this shape.
    pub fn entry_count(self, n: usize, c: usize, group_count: Option<usize>) -> usize {
        match self {
            Scope::In => n * c,
            Scope::Ln => n,
            Scope::Bn => c,
            Scope::Gn => n * group_count.unwrap_or(1),
        }
    }
}

/// Means and variances for one scope.
///
/// Entry ordering: `In` is row-major `(n, c)`, `Ln` is `n`, `Bn` is `c`,
/// `Gn` is row-major `(n, group)`.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub scope: Scope,
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    /// Present for `Gn` only.
    pub group_count: Option<usize>,
}

impl NormStats {
    /// Mean/variance of one contiguous slice (population convention,
    /// two-pass centered form).
    fn two_pass(values: impl Iterator<Item = f64> + Clone, count: usize) -> (f64, f64) {
        let sum: f64 = values.clone().sum();
        let mu = sum / count as f64;
        let ss: f64 = values.map(|v| (v - mu) * (v - mu)).sum();
        (mu, ss / count as f64)
    }
}

fn check_group_count(scope: Scope, c: usize, group_count: Option<usize>) -> Result<()> {
    match (scope, group_count) {
        (Scope::Gn, Some(g)) => {
            if g == 0 || c % g != 0 {
                Err(SnError::Config(format!(
                    "group count {g} must divide channel count {c}"
                )))
            } else {
                Ok(())
            }
        }
        (Scope::Gn, None) => Err(SnError::Config(
            "group statistics require a group count".into(),
        )),
        (_, Some(_)) => Err(SnError::Config(
            "group count is only meaningful for the group scope".into(),
        )),
        (_, None) => Ok(()),
    }
}

/// Statistics by literal summation over the scope's pixel set.
pub fn stats_direct(x: &Tensor4, scope: Scope, group_count: Option<usize>) -> Result<NormStats> {
    let (n, c, h, w) = x.shape();
    check_group_count(scope, c, group_count)?;
    let hw = h * w;
    let data = x.as_slice();

    let pairs: Vec<(f64, f64)> = match scope {
        Scope::In => exec::map_indexed(n * c, |e| {
            let base = e * hw;
            NormStats::two_pass(data[base..base + hw].iter().copied(), hw)
        }),
        Scope::Ln => exec::map_indexed(n, |e| {
            let base = e * c * hw;
            NormStats::two_pass(data[base..base + c * hw].iter().copied(), c * hw)
        }),
        Scope::Bn => exec::map_indexed(c, |ch| {
            let iter = (0..n).flat_map(move |nn| {
                let base = (nn * c + ch) * hw;
                data[base..base + hw].iter().copied()
            });
            NormStats::two_pass(iter, n * hw)
        }),
        Scope::Gn => {
            let g = group_count.unwrap();
            let cs = c / g;
            exec::map_indexed(n * g, |e| {
                let (nn, gg) = (e / g, e % g);
                let base = (nn * c + gg * cs) * hw;
                NormStats::two_pass(data[base..base + cs * hw].iter().copied(), cs * hw)
            })
        }
    };

    let (mu, var) = pairs.into_iter().unzip();
    Ok(NormStats {
        scope,
        mu,
        var,
        group_count,
    })
}

/// Instance, layer, and batch statistics from one pass over the data.
///
/// The per-(sample, channel) moments are accumulated as sum and sum of
/// squares; layer and batch moments are then channel/sample means of
/// `sigma^2 + mu^2` minus the squared aggregate mean. Agrees with
/// [`stats_direct`] to 1e-12 on unit-scale data.
pub fn stats_reuse(x: &Tensor4) -> (NormStats, NormStats, NormStats) {
    let (n, c, h, w) = x.shape();
    let hw = h * w;
    let data = x.as_slice();

    let in_pairs: Vec<(f64, f64)> = exec::map_indexed(n * c, |e| {
        let base = e * hw;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for &v in &data[base..base + hw] {
            sum += v;
            sumsq += v * v;
        }
        let mu = sum / hw as f64;
        (mu, (sumsq / hw as f64 - mu * mu).max(0.0))
    });
    let (mu_in, var_in): (Vec<f64>, Vec<f64>) = in_pairs.into_iter().unzip();

    // Layer scope: average the instance moments over channels.
    let mut mu_ln = vec![0.0; n];
    let mut var_ln = vec![0.0; n];
    for nn in 0..n {
        let mut m = 0.0;
        let mut second = 0.0;
        for cc in 0..c {
            let e = nn * c + cc;
            m += mu_in[e];
            second += var_in[e] + mu_in[e] * mu_in[e];
        }
        m /= c as f64;
        mu_ln[nn] = m;
        var_ln[nn] = (second / c as f64 - m * m).max(0.0);
    }

    // Batch scope: average the instance moments over samples.
    let mut mu_bn = vec![0.0; c];
    let mut var_bn = vec![0.0; c];
    for cc in 0..c {
        let mut m = 0.0;
        let mut second = 0.0;
        for nn in 0..n {
            let e = nn * c + cc;
            m += mu_in[e];
            second += var_in[e] + mu_in[e] * mu_in[e];
        }
        m /= n as f64;
        mu_bn[cc] = m;
        var_bn[cc] = (second / n as f64 - m * m).max(0.0);
    }

    (
        NormStats {
            scope: Scope::In,
            mu: mu_in,
            var: var_in,
            group_count: None,
        },
        NormStats {
            scope: Scope::Ln,
            mu: mu_ln,
            var: var_ln,
            group_count: None,
        },
        NormStats {
            scope: Scope::Bn,
            mu: mu_bn,
            var: var_bn,
            group_count: None,
        },
    )
}
