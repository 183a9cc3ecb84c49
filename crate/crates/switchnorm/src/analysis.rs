//! Numeric verification of the weight-normalization identities and
//! importance-weight reporting.
//!
//! After exact empirical whitening of a patch set, instance
//! normalization of a linear filter response collapses to the closed
//! form `gamma * w'x / ||w|| + beta`; that identity is checked to float
//! precision here. The corresponding layer-normalization closed form
//! (filter-norm sum in the denominator) only holds under additional
//! assumptions, so its discrepancy is reported, never asserted.

use crate::error::{Result, SnError};
use crate::normalizers::{normalize_forward, AffineParams};
use crate::snlayer::SnParams;
use crate::stats::Scope;
use crate::tensor::{Rng, Tensor4};

/// A patch set with exact empirical zero mean and identity sample
/// covariance (population convention), stored row-major `dim x count`.
#[derive(Debug, Clone)]
pub struct WhitenedPatches {
    pub dim: usize,
    pub count: usize,
    data: Vec<f64>,
}

impl WhitenedPatches {
    #[inline]
    fn at(&self, i: usize, p: usize) -> f64 {
        self.data[i * self.count + p]
    }
}

/// Draw `count` Gaussian patches of dimension `dim` and whiten them
/// empirically: subtract the sample mean, then solve against the
/// Cholesky factor of the sample covariance.
pub fn whiten_patches(rng: &mut Rng, dim: usize, count: usize) -> Result<WhitenedPatches> {
    if dim == 0 {
        return Err(SnError::Parameter("patch dimension must be >= 1".into()));
    }
    if count < dim + 1 {
        return Err(SnError::Parameter(format!(
            "whitening needs at least dim+1 = {} patches, got {count}",
            dim + 1
        )));
    }
    let mut data = vec![0.0; dim * count];
    for v in &mut data {
        *v = rng.normal();
    }

    // center each coordinate
    for i in 0..dim {
        let row = &mut data[i * count..(i + 1) * count];
        let mean = row.iter().sum::<f64>() / count as f64;
        for v in row.iter_mut() {
            *v -= mean;
        }
    }

    // sample covariance (population convention)
    let mut cov = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut s = 0.0;
            for p in 0..count {
                s += data[i * count + p] * data[j * count + p];
            }
            let v = s / count as f64;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    let chol = cholesky(&cov, dim)?;

    // z_p = L^{-1} x_p by forward substitution, column by column
    let mut out = vec![0.0; dim * count];
    for p in 0..count {
        for i in 0..dim {
            let mut s = data[i * count + p];
            for k in 0..i {
                s -= chol[i * dim + k] * out[k * count + p];
            }
            out[i * count + p] = s / chol[i * dim + i];
        }
    }

    Ok(WhitenedPatches {
        dim,
        count,
        data: out,
    })
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite
/// matrix, row-major `d x d`.
fn cholesky(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(SnError::Data(
                        "sample covariance is not positive definite".into(),
                    ));
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Ok(l)
}

/// Negligible against any nonzero filter norm while satisfying the
/// `eps > 0` contract; the closed forms carry no epsilon.
const IDENTITY_EPS: f64 = f64::MIN_POSITIVE;

/// Filter responses as a `(1, c_out, 1, count)` tensor.
fn filter_responses(patches: &WhitenedPatches, filters: &[f64], c_out: usize) -> Result<Tensor4> {
    let d = patches.dim;
    let mut h = vec![0.0; c_out * patches.count];
    for c in 0..c_out {
        for p in 0..patches.count {
            let mut s = 0.0;
            for i in 0..d {
                s += filters[c * d + i] * patches.at(i, p);
            }
            h[c * patches.count + p] = s;
        }
    }
    Tensor4::from_vec(1, c_out, 1, patches.count, h)
}

fn filter_norms(filters: &[f64], c_out: usize, d: usize) -> Vec<f64> {
    (0..c_out)
        .map(|c| {
            filters[c * d..(c + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Max absolute difference between instance normalization of the filter
/// responses and `gamma * w'x / ||w|| + beta` on whitened patches.
pub fn remark1_in_error_for_filters(
    patches: &WhitenedPatches,
    filters: &[f64],
    c_out: usize,
    gamma: f64,
    beta: f64,
) -> Result<f64> {
    if filters.len() != c_out * patches.dim {
        return Err(SnError::Shape(format!(
            "filter bank length {} does not match {c_out} filters of dim {}",
            filters.len(),
            patches.dim
        )));
    }
    let h = filter_responses(patches, filters, c_out)?;
    let params = AffineParams::new(vec![gamma; c_out], vec![beta; c_out], IDENTITY_EPS)?;
    let normalized = normalize_forward(&h, Scope::In, &params, None)?;

    let norms = filter_norms(filters, c_out, patches.dim);
    let mut worst: f64 = 0.0;
    for c in 0..c_out {
        for p in 0..patches.count {
            let closed = gamma * h.get(0, c, 0, p) / norms[c] + beta;
            worst = worst.max((normalized.get(0, c, 0, p) - closed).abs());
        }
    }
    Ok(worst)
}

/// Max absolute difference between layer normalization of the filter
/// responses and the filter-norm-sum closed form
/// `gamma * w_i'x / (||w_i|| + sum_{j != i} ||w_j||) + beta`.
pub fn remark1_ln_discrepancy_for_filters(
    patches: &WhitenedPatches,
    filters: &[f64],
    c_out: usize,
    gamma: f64,
    beta: f64,
) -> Result<f64> {
    if filters.len() != c_out * patches.dim {
        return Err(SnError::Shape(format!(
            "filter bank length {} does not match {c_out} filters of dim {}",
            filters.len(),
            patches.dim
        )));
    }
    let h = filter_responses(patches, filters, c_out)?;
    let params = AffineParams::new(vec![gamma; c_out], vec![beta; c_out], IDENTITY_EPS)?;
    let normalized = normalize_forward(&h, Scope::Ln, &params, None)?;

    let norms = filter_norms(filters, c_out, patches.dim);
    let norm_sum: f64 = norms.iter().sum();
    let mut worst: f64 = 0.0;
    for c in 0..c_out {
        for p in 0..patches.count {
            let closed = gamma * h.get(0, c, 0, p) / norm_sum + beta;
            worst = worst.max((normalized.get(0, c, 0, p) - closed).abs());
        }
    }
    Ok(worst)
}

/// Whiten seeded patches, apply a seeded filter bank, and return the
/// max absolute error of the instance-normalization closed form.
pub fn verify_remark1_in(
    rng: &mut Rng,
    c_out: usize,
    patch_dim: usize,
    patches: usize,
    gamma: f64,
    beta: f64,
) -> Result<f64> {
    let (whitened, filters) = remark1_setup(rng, c_out, patch_dim, patches)?;
    remark1_in_error_for_filters(&whitened, &filters, c_out, gamma, beta)
}

/// Same pipeline for the layer-normalization closed form; the returned
/// discrepancy is a report, not a bound.
pub fn verify_remark1_ln(
    rng: &mut Rng,
    c_out: usize,
    patch_dim: usize,
    patches: usize,
    gamma: f64,
    beta: f64,
) -> Result<f64> {
    let (whitened, filters) = remark1_setup(rng, c_out, patch_dim, patches)?;
    remark1_ln_discrepancy_for_filters(&whitened, &filters, c_out, gamma, beta)
}

fn remark1_setup(
    rng: &mut Rng,
    c_out: usize,
    patch_dim: usize,
    patches: usize,
) -> Result<(WhitenedPatches, Vec<f64>)> {
    if c_out == 0 {
        return Err(SnError::Parameter("filter count must be >= 1".into()));
    }
    let whitened = whiten_patches(rng, patch_dim, patches)?;
    let filters: Vec<f64> = (0..c_out * patch_dim).map(|_| rng.normal()).collect();
    Ok((whitened, filters))
}

// ── Importance-weight reporting ────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatKind {
    Mu,
    Var,
}

impl StatKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StatKind::Mu => "mu",
            StatKind::Var => "var",
        }
    }
}

#[derive(Debug, Clone)]
pub struct WeightRow {
    pub layer: String,
    pub stat: StatKind,
    /// `[in, ln, bn]`.
    pub w: [f64; 3],
}

/// Per-layer importance weights plus the arithmetic network averages.
#[derive(Debug, Clone)]
pub struct WeightReport {
    pub label: String,
    pub rows: Vec<WeightRow>,
    pub avg_mu: [f64; 3],
    pub avg_var: [f64; 3],
}

impl WeightReport {
    /// CSV with header `layer,stat,w_in,w_ln,w_bn`, one mean row and
    /// one variance row per layer, six decimal places.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,stat,w_in,w_ln,w_bn\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                row.layer,
                row.stat.as_str(),
                row.w[0],
                row.w[1],
                row.w[2]
            ));
        }
        out
    }
}

/// Softmax each layer's control triplets and average them across the
/// network.
pub fn report_weights<'a, I>(layers: I, label: &str) -> Result<WeightReport>
where
    I: IntoIterator<Item = (&'a str, &'a SnParams)>,
{
    let mut rows = Vec::new();
    let mut avg_mu = [0.0; 3];
    let mut avg_var = [0.0; 3];
    let mut count = 0usize;
    for (name, params) in layers {
        let wm = params.weights_mu()?;
        let wv = params.weights_var()?;
        rows.push(WeightRow {
            layer: name.to_string(),
            stat: StatKind::Mu,
            w: wm,
        });
        rows.push(WeightRow {
            layer: name.to_string(),
            stat: StatKind::Var,
            w: wv,
        });
        for k in 0..3 {
            avg_mu[k] += wm[k];
            avg_var[k] += wv[k];
        }
        count += 1;
    }
    if count == 0 {
        return Err(SnError::Parameter(
            "weight report needs at least one layer".into(),
        ));
    }
    for k in 0..3 {
        avg_mu[k] /= count as f64;
        avg_var[k] /= count as f64;
    }
    Ok(WeightReport {
        label: label.to_string(),
        rows,
        avg_mu,
        avg_var,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snlayer::sn_sparsify;

    #[test]
    fn whitened_patches_have_exact_empirical_moments() {
        let mut rng = Rng::new(70);
        let (d, p) = (6, 128);
        let z = whiten_patches(&mut rng, d, p).unwrap();
        for i in 0..d {
            let mean: f64 = (0..p).map(|k| z.at(i, k)).sum::<f64>() / p as f64;
            assert!(mean.abs() < 1e-12, "row {i} mean {mean}");
            for j in 0..d {
                let cov: f64 = (0..p).map(|k| z.at(i, k) * z.at(j, k)).sum::<f64>() / p as f64;
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((cov - expect).abs() < 1e-10, "cov[{i}][{j}] = {cov}");
            }
        }
    }

    #[test]
    fn whitening_needs_enough_patches() {
        let mut rng = Rng::new(1);
        assert!(matches!(
            whiten_patches(&mut rng, 8, 8),
            Err(SnError::Parameter(_))
        ));
        assert!(whiten_patches(&mut rng, 8, 9).is_ok());
    }

    #[test]
    fn unit_filter_reduces_instance_norm_to_raw_projection() {
        let mut rng = Rng::new(3);
        let z = whiten_patches(&mut rng, 4, 64).unwrap();
        // single unit-norm filter
        let filters = vec![0.5, 0.5, 0.5, 0.5];
        let err = remark1_in_error_for_filters(&z, &filters, 1, 1.0, 0.0).unwrap();
        assert!(err < 1e-8, "identity error {err}");
    }

    #[test]
    fn zero_gamma_collapses_to_beta() {
        let mut rng = Rng::new(4);
        let err = verify_remark1_in(&mut rng, 3, 6, 64, 0.0, -1.5).unwrap();
        assert!(err < 1e-12, "gamma=0 error {err}");
        let mut rng = Rng::new(4);
        let err = verify_remark1_ln(&mut rng, 3, 6, 64, 0.0, -1.5).unwrap();
        assert!(err < 1e-12);
    }

    #[test]
    fn instance_identity_holds_for_generic_affine() {
        let mut rng = Rng::new(5);
        let err = verify_remark1_in(&mut rng, 4, 8, 256, 2.0, -1.0).unwrap();
        assert!(err < 1e-8, "identity error {err}");
    }

    #[test]
    fn instance_identity_holds_across_seeds() {
        for seed in 0..10 {
            let mut rng = Rng::new(seed);
            let err = verify_remark1_in(&mut rng, 3, 8, 128, 1.3, 0.4).unwrap();
            assert!(err < 1e-8, "seed {seed}: identity error {err}");
        }
    }

    #[test]
    fn single_channel_layer_form_coincides_with_instance_form() {
        let in_err = verify_remark1_in(&mut Rng::new(17), 1, 5, 64, 1.7, 0.2).unwrap();
        let ln_err = verify_remark1_ln(&mut Rng::new(17), 1, 5, 64, 1.7, 0.2).unwrap();
        assert_eq!(in_err.to_bits(), ln_err.to_bits());
    }

    #[test]
    fn layer_form_discrepancy_is_reported_not_asserted() {
        // Orthogonal, equal-norm filters: the actual layer-norm
        // denominator is the RMS of the norms, the closed form uses the
        // sum, so a real gap is expected. Only finiteness is checked.
        let mut rng = Rng::new(23);
        let d = 4;
        let z = whiten_patches(&mut rng, d, 128).unwrap();
        let mut filters = vec![0.0; 2 * d];
        filters[0] = 1.5; // e_0 scaled
        filters[d + 1] = 1.5; // e_1 scaled
        let gap = remark1_ln_discrepancy_for_filters(&z, &filters, 2, 1.0, 0.0).unwrap();
        assert!(gap.is_finite());
        assert!(gap > 1e-4, "expected a visible gap, got {gap}");
    }

    #[test]
    fn report_at_init_averages_to_uniform() {
        let params = SnParams::new(4);
        let report = report_weights([("sn0", &params)], "init").unwrap();
        for k in 0..3 {
            assert!((report.avg_mu[k] - 1.0 / 3.0).abs() < 1e-12);
            assert!((report.avg_var[k] - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn report_averages_one_hot_layers() {
        let mut bn = SnParams::new(2);
        bn.lambda_mu = [0.0, 0.0, 1.0];
        bn.lambda_var = [0.0, 0.0, 1.0];
        let bn = sn_sparsify(&bn);
        let mut ln = SnParams::new(2);
        ln.lambda_mu = [0.0, 1.0, 0.0];
        ln.lambda_var = [0.0, 1.0, 0.0];
        let ln = sn_sparsify(&ln);
        let report = report_weights([("a", &bn), ("b", &ln)], "pair").unwrap();
        assert_eq!(report.avg_mu, [0.0, 0.5, 0.5]);
        assert_eq!(report.avg_var, [0.0, 0.5, 0.5]);
    }

    #[test]
    fn csv_has_two_rows_per_layer_and_rows_sum_to_one() {
        let layers: Vec<(String, SnParams)> = (0..5)
            .map(|i| {
                let mut p = SnParams::new(3);
                p.lambda_mu = [0.1 * i as f64, -0.2, 0.3];
                p.lambda_var = [0.0, 0.5 * i as f64, -0.1];
                (format!("sn{i}"), p)
            })
            .collect();
        let report =
            report_weights(layers.iter().map(|(n, p)| (n.as_str(), p)), "toy").unwrap();
        let csv = report.to_csv();
        let data_rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(data_rows.len(), 2 * layers.len());
        for row in &report.rows {
            let sum: f64 = row.w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-10);
            assert!(row.w.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn empty_report_is_rejected() {
        let empty: Vec<(&str, &SnParams)> = Vec::new();
        assert!(matches!(
            report_weights(empty, "x"),
            Err(SnError::Parameter(_))
        ));
    }
}
