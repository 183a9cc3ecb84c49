//! The switchable normalization layer.
//!
//! Forward: every pixel is normalized by a convex mixture of the
//! instance, layer, and batch statistics, with one softmax-derived
//! weight triplet for the means and an independent triplet for the
//! variances, then re-scaled and re-shifted per channel. Backward is
//! hand-derived and exact; the gradient-check harness is the arbiter.
//!
//! Weight triplets are ordered `[in, ln, bn]` everywhere.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Result, SnError};
use crate::exec;
use crate::stats::{stats_reuse, NormStats, Scope};
use crate::tensor::Tensor4;

/// Parameters of one switchable normalization layer: per-channel scale
/// and shift plus six control scalars (three for the mean mixture,
/// three for the variance mixture).
#[derive(Debug, Clone, PartialEq)]
pub struct SnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    /// Control parameters for the mean mixture, `[in, ln, bn]`.
    pub lambda_mu: [f64; 3],
    /// Control parameters for the variance mixture, `[in, ln, bn]`.
    pub lambda_var: [f64; 3],
    pub eps: f64,
    sparse_mu: Option<usize>,
    sparse_var: Option<usize>,
}

impl SnParams {
    /// Standard initialization: `gamma = 1`, `beta = 0`, every control
    /// parameter 1 (uniform mixture), `eps = 1e-5`.
    pub fn new(c: usize) -> Self {
        Self {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            lambda_mu: [1.0; 3],
            lambda_var: [1.0; 3],
            eps: crate::normalizers::DEFAULT_EPS,
            sparse_mu: None,
            sparse_var: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// True after [`sn_sparsify`]: the mixtures are frozen one-hot.
    pub fn is_sparse(&self) -> bool {
        self.sparse_mu.is_some()
    }

    /// Selected `(mean, variance)` normalizer indices when sparse.
    pub fn sparse_indices(&self) -> Option<(usize, usize)> {
        match (self.sparse_mu, self.sparse_var) {
            (Some(m), Some(v)) => Some((m, v)),
            _ => None,
        }
    }

    /// Importance weights for the mean mixture.
    pub fn weights_mu(&self) -> Result<[f64; 3]> {
        match self.sparse_mu {
            Some(k) => Ok(one_hot(k)),
            None => sn_weights(&self.lambda_mu),
        }
    }

    /// Importance weights for the variance mixture.
    pub fn weights_var(&self) -> Result<[f64; 3]> {
        match self.sparse_var {
            Some(k) => Ok(one_hot(k)),
            None => sn_weights(&self.lambda_var),
        }
    }

    fn validate(&self, c: usize) -> Result<()> {
        if self.gamma.len() != c || self.beta.len() != c {
            return Err(SnError::Shape(format!(
                "layer parameters sized for {} channels, tensor has {c}",
                self.gamma.len()
            )));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(SnError::Parameter(format!(
                "eps must be > 0, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

fn one_hot(k: usize) -> [f64; 3] {
    let mut w = [0.0; 3];
    w[k] = 1.0;
    w
}

/// Softmax over a control triplet with max subtraction, renormalized
/// by the computed sum.
pub fn sn_weights(lambda: &[f64; 3]) -> Result<[f64; 3]> {
    if lambda.iter().any(|v| !v.is_finite()) {
        return Err(SnError::Parameter(format!(
            "control parameters must be finite, got {lambda:?}"
        )));
    }
    let m = lambda.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = [
        (lambda[0] - m).exp(),
        (lambda[1] - m).exp(),
        (lambda[2] - m).exp(),
    ];
    let s = e[0] + e[1] + e[2];
    Ok([e[0] / s, e[1] / s, e[2] / s])
}

/// Collapse each control triplet to its argmax and freeze the layer
/// sparse: the derived weights become exactly one-hot and receive no
/// gradient. Ties select the first index (in before ln before bn).
pub fn sn_sparsify(params: &SnParams) -> SnParams {
    let argmax = |t: &[f64; 3]| {
        let mut best = 0;
        for k in 1..3 {
            if t[k] > t[best] {
                best = k;
            }
        }
        best
    };
    let mut out = params.clone();
    out.sparse_mu = Some(argmax(&params.lambda_mu));
    out.sparse_var = Some(argmax(&params.lambda_var));
    out
}

/// Frozen batch statistics used at test time.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceState {
    pub mode: InferenceMode,
    pub bn_mu: Vec<f64>,
    pub bn_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InferenceMode {
    /// Exponential moving average with the given momentum.
    MovingAverage { momentum: f64 },
    /// Arithmetic mean over the given number of frozen-network batches.
    BatchAverage { sample_batches: usize },
}

impl InferenceState {
    /// Fresh moving-average state (zero statistics) for `c` channels.
    pub fn moving_average(c: usize, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(SnError::Parameter(format!(
                "momentum must lie in (0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            mode: InferenceMode::MovingAverage { momentum },
            bn_mu: vec![0.0; c],
            bn_var: vec![0.0; c],
        })
    }

    pub fn channels(&self) -> usize {
        self.bn_mu.len()
    }
}

/// `running <- p*running + (1-p)*batch` for both mean and variance.
pub fn update_moving_average(state: &mut InferenceState, batch: &NormStats) -> Result<()> {
    let p = match state.mode {
        InferenceMode::MovingAverage { momentum } => momentum,
        _ => {
            return Err(SnError::State(
                "moving-average update on a batch-average state".into(),
            ))
        }
    };
    if batch.scope != Scope::Bn {
        return Err(SnError::State(format!(
            "moving-average update expects batch-scope statistics, got {:?}",
            batch.scope
        )));
    }
    if batch.mu.len() != state.bn_mu.len() {
        return Err(SnError::State(format!(
            "statistics sized for {} channels, state has {}",
            batch.mu.len(),
            state.bn_mu.len()
        )));
    }
    for (r, &b) in state.bn_mu.iter_mut().zip(&batch.mu) {
        *r = p * *r + (1.0 - p) * b;
    }
    for (r, &b) in state.bn_var.iter_mut().zip(&batch.var) {
        *r = p * *r + (1.0 - p) * b;
    }
    Ok(())
}

/// Forward-pass mode: training statistics or frozen batch statistics.
#[derive(Debug, Clone, Copy)]
pub enum ForwardMode<'a> {
    Train,
    Eval(&'a InferenceState),
}

/// Everything the backward pass needs, retained from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    train: bool,
    x: Tensor4,
    x_norm: Tensor4,
    mu_in: Vec<f64>,
    var_in: Vec<f64>,
    mu_ln: Vec<f64>,
    var_ln: Vec<f64>,
    mu_bn: Vec<f64>,
    var_bn: Vec<f64>,
    w_mu: [f64; 3],
    w_var: [f64; 3],
    mixed_mu: Vec<f64>,
    /// Mixed variance plus eps, per `(n, c)`.
    mixed_denom: Vec<f64>,
    params: SnParams,
}

impl ForwardCache {
    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Batch-scope statistics observed by this forward pass.
    pub fn batch_stats(&self) -> (&[f64], &[f64]) {
        (&self.mu_bn, &self.var_bn)
    }

    /// Instance-scope statistics observed by this forward pass.
    pub fn instance_stats(&self) -> (&[f64], &[f64]) {
        (&self.mu_in, &self.var_in)
    }

    /// Mixed mean and mixed variance plus eps, per `(n, c)`.
    pub fn mixed_stats(&self) -> (&[f64], &[f64]) {
        (&self.mixed_mu, &self.mixed_denom)
    }
}

/// Gradient bundle mirroring [`SnParams`] plus the input gradient.
#[derive(Debug, Clone)]
pub struct SnGrads {
    pub d_input: Tensor4,
    pub d_gamma: Vec<f64>,
    pub d_beta: Vec<f64>,
    pub d_lambda_mu: [f64; 3],
    pub d_lambda_var: [f64; 3],
}

/// Switchable normalization forward pass.
///
/// Training mode derives all three statistics scopes from the input via
/// the reuse formulation. Eval mode substitutes the frozen batch
/// statistics from the [`InferenceState`] while still computing the
/// instance and layer statistics from the sample itself.
pub fn sn_forward(
    x: &Tensor4,
    params: &SnParams,
    mode: ForwardMode,
) -> Result<(Tensor4, ForwardCache)> {
    let (n, c, h, w) = x.shape();
    params.validate(c)?;

    let (s_in, s_ln, s_bn) = stats_reuse(x);
    let (mu_in, var_in) = (s_in.mu, s_in.var);
    let (mu_ln, var_ln) = (s_ln.mu, s_ln.var);
    let (train, mu_bn, var_bn) = match mode {
        ForwardMode::Train => (true, s_bn.mu, s_bn.var),
        ForwardMode::Eval(state) => {
            if state.channels() != c {
                return Err(SnError::State(format!(
                    "inference state sized for {} channels, tensor has {c}",
                    state.channels()
                )));
            }
            (false, state.bn_mu.clone(), state.bn_var.clone())
        }
    };

    let w_mu = params.weights_mu()?;
    let w_var = params.weights_var()?;

    let mut mixed_mu = vec![0.0; n * c];
    let mut mixed_denom = vec![0.0; n * c];
    for nn in 0..n {
        for cc in 0..c {
            let e = nn * c + cc;
            mixed_mu[e] = w_mu[0] * mu_in[e] + w_mu[1] * mu_ln[nn] + w_mu[2] * mu_bn[cc];
            mixed_denom[e] = w_var[0] * var_in[e]
                + w_var[1] * var_ln[nn]
                + w_var[2] * var_bn[cc]
                + params.eps;
        }
    }

    let hw = h * w;
    let src = x.as_slice();
    let mut x_norm = Tensor4::zeros(n, c, h, w)?;
    exec::for_each_chunk_mut(x_norm.as_mut_slice(), hw, |e, chunk| {
        let mu = mixed_mu[e];
        let rstd = 1.0 / mixed_denom[e].sqrt();
        let base = e * hw;
        for (k, o) in chunk.iter_mut().enumerate() {
            *o = (src[base + k] - mu) * rstd;
        }
    });

    let mut y = Tensor4::zeros(n, c, h, w)?;
    let norm = x_norm.as_slice();
    exec::for_each_chunk_mut(y.as_mut_slice(), hw, |e, chunk| {
        let cc = e % c;
        let (g, b) = (params.gamma[cc], params.beta[cc]);
        let base = e * hw;
        for (k, o) in chunk.iter_mut().enumerate() {
            *o = g * norm[base + k] + b;
        }
    });

    let cache = ForwardCache {
        train,
        x: x.clone(),
        x_norm,
        mu_in,
        var_in,
        mu_ln,
        var_ln,
        mu_bn,
        var_bn,
        w_mu,
        w_var,
        mixed_mu,
        mixed_denom,
        params: params.clone(),
    };
    Ok((y, cache))
}

/// Switchable normalization backward pass: exact analytic gradients for
/// the input, the per-channel affine parameters, and both control
/// triplets. The mean mixture couples only through the mixed mean, the
/// variance mixture only through the mixed variance.
pub fn sn_backward(d_out: &Tensor4, cache: &ForwardCache, params: &SnParams) -> Result<SnGrads> {
    if !cache.train {
        return Err(SnError::State(
            "backward requires a cache from a train-mode forward".into(),
        ));
    }
    if cache.params != *params {
        return Err(SnError::State(
            "parameters do not match the ones used in the cached forward".into(),
        ));
    }
    if !d_out.same_shape(&cache.x) {
        return Err(SnError::Shape(format!(
            "output gradient shape {:?} does not match activations {:?}",
            d_out.shape(),
            cache.x.shape()
        )));
    }

    let (n, c, h, w) = cache.x.shape();
    let hw = h * w;
    let dy = d_out.as_slice();
    let xn = cache.x_norm.as_slice();
    let xv = cache.x.as_slice();

    // Per-(n, c) reductions of the output gradient.
    let sums: Vec<(f64, f64)> = exec::map_indexed(n * c, |e| {
        let base = e * hw;
        let mut s_dy_xn = 0.0;
        let mut s_dy = 0.0;
        for k in 0..hw {
            s_dy_xn += dy[base + k] * xn[base + k];
            s_dy += dy[base + k];
        }
        (s_dy_xn, s_dy)
    });

    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    // dL/d(mixed var) and dL/d(mixed mean), per (n, c).
    let mut g_sig = vec![0.0; n * c];
    let mut g_mu = vec![0.0; n * c];
    for nn in 0..n {
        for cc in 0..c {
            let e = nn * c + cc;
            let (s_dy_xn, s_dy) = sums[e];
            d_gamma[cc] += s_dy_xn;
            d_beta[cc] += s_dy;
            let gam = params.gamma[cc];
            let denom = cache.mixed_denom[e];
            g_sig[e] = -gam * s_dy_xn / (2.0 * denom);
            g_mu[e] = -gam * s_dy / denom.sqrt();
        }
    }

    // Row (per sample) and column (per channel) sums for the layer and
    // batch fan-out terms.
    let mut g_sig_row = vec![0.0; n];
    let mut g_mu_row = vec![0.0; n];
    let mut g_sig_col = vec![0.0; c];
    let mut g_mu_col = vec![0.0; c];
    for nn in 0..n {
        for cc in 0..c {
            let e = nn * c + cc;
            g_sig_row[nn] += g_sig[e];
            g_mu_row[nn] += g_mu[e];
            g_sig_col[cc] += g_sig[e];
            g_mu_col[cc] += g_mu[e];
        }
    }

    let w_mu = cache.w_mu;
    let w_var = cache.w_var;
    let inv_hw = 1.0 / hw as f64;
    let inv_chw = 1.0 / (c * hw) as f64;
    let inv_nhw = 1.0 / (n * hw) as f64;

    let mut d_input = Tensor4::zeros(n, c, h, w)?;
    let mu_in = &cache.mu_in;
    let mu_ln = &cache.mu_ln;
    let mu_bn = &cache.mu_bn;
    let mixed_denom = &cache.mixed_denom;
    exec::for_each_chunk_mut(d_input.as_mut_slice(), hw, |e, chunk| {
        let nn = e / c;
        let cc = e % c;
        let gam = params.gamma[cc];
        let rstd = 1.0 / mixed_denom[e].sqrt();
        let var_coef_in = 2.0 * w_var[0] * inv_hw * g_sig[e];
        let var_coef_ln = 2.0 * w_var[1] * inv_chw * g_sig_row[nn];
        let var_coef_bn = 2.0 * w_var[2] * inv_nhw * g_sig_col[cc];
        let mu_term = w_mu[0] * inv_hw * g_mu[e]
            + w_mu[1] * inv_chw * g_mu_row[nn]
            + w_mu[2] * inv_nhw * g_mu_col[cc];
        let base = e * hw;
        for (k, o) in chunk.iter_mut().enumerate() {
            let v = xv[base + k];
            *o = dy[base + k] * gam * rstd
                + var_coef_in * (v - mu_in[e])
                + var_coef_ln * (v - mu_ln[nn])
                + var_coef_bn * (v - mu_bn[cc])
                + mu_term;
        }
    });

    // Control-parameter gradients through the softmax Jacobian.
    let mut s = [0.0; 3];
    let mut t = [0.0; 3];
    for nn in 0..n {
        for cc in 0..c {
            let e = nn * c + cc;
            s[0] += g_mu[e] * mu_in[e];
            s[1] += g_mu[e] * mu_ln[nn];
            s[2] += g_mu[e] * mu_bn[cc];
            t[0] += g_sig[e] * cache.var_in[e];
            t[1] += g_sig[e] * cache.var_ln[nn];
            t[2] += g_sig[e] * cache.var_bn[cc];
        }
    }
    let softmax_back = |w: &[f64; 3], v: &[f64; 3]| {
        let dot = w[0] * v[0] + w[1] * v[1] + w[2] * v[2];
        [
            w[0] * (v[0] - dot),
            w[1] * (v[1] - dot),
            w[2] * (v[2] - dot),
        ]
    };
    let d_lambda_mu = if params.sparse_mu.is_some() {
        [0.0; 3]
    } else {
        softmax_back(&w_mu, &s)
    };
    let d_lambda_var = if params.sparse_var.is_some() {
        [0.0; 3]
    } else {
        softmax_back(&w_var, &t)
    };

    Ok(SnGrads {
        d_input,
        d_gamma,
        d_beta,
        d_lambda_mu,
        d_lambda_var,
    })
}

// ── Inference calibration ──────────────────────────────────────────

/// Anything that can stream minibatches through itself with frozen
/// parameters and report each switchable layer's observed batch
/// statistics, in network order.
pub trait BnStatsSource {
    fn sn_layer_count(&self) -> usize;

    /// Train-mode forward over `batch`; returns `(mu, var)` of the
    /// batch statistics seen by each switchable layer.
    fn collect_bn_stats(&mut self, batch: &Tensor4) -> Result<Vec<(Vec<f64>, Vec<f64>)>>;
}

/// A single layer is the one-layer network: its batch statistics are
/// those of the raw input batch.
impl BnStatsSource for SnParams {
    fn sn_layer_count(&self) -> usize {
        1
    }

    fn collect_bn_stats(&mut self, batch: &Tensor4) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        self.validate(batch.c())?;
        let (_, _, bn) = stats_reuse(batch);
        Ok(vec![(bn.mu, bn.var)])
    }
}

/// Two-step batch-average calibration: freeze the network, stream up to
/// `sample_batches` minibatches through it, and arithmetically average
/// the batch statistics observed by every switchable layer.
pub fn calibrate_batch_average<'a, S, I>(
    source: &mut S,
    batches: I,
    sample_batches: usize,
) -> Result<Vec<InferenceState>>
where
    S: BnStatsSource + ?Sized,
    I: IntoIterator<Item = &'a Tensor4>,
{
    if sample_batches == 0 {
        return Err(SnError::Parameter("sample_batches must be >= 1".into()));
    }
    let layers = source.sn_layer_count();
    let mut acc_mu: Vec<Vec<f64>> = Vec::new();
    let mut acc_var: Vec<Vec<f64>> = Vec::new();
    let mut used = 0usize;
    for batch in batches.into_iter().take(sample_batches) {
        let stats = source.collect_bn_stats(batch)?;
        if stats.len() != layers {
            return Err(SnError::State(format!(
                "network reported {} layers, expected {layers}",
                stats.len()
            )));
        }
        if used == 0 {
            for (mu, var) in &stats {
                acc_mu.push(mu.clone());
                acc_var.push(var.clone());
            }
        } else {
            for (l, (mu, var)) in stats.iter().enumerate() {
                for (a, b) in acc_mu[l].iter_mut().zip(mu) {
                    *a += b;
                }
                for (a, b) in acc_var[l].iter_mut().zip(var) {
                    *a += b;
                }
            }
        }
        used += 1;
    }
    if used == 0 {
        return Err(SnError::Data("calibration loader yielded no batches".into()));
    }
    let scale = 1.0 / used as f64;
    Ok(acc_mu
        .into_iter()
        .zip(acc_var)
        .map(|(mut mu, mut var)| {
            for v in &mut mu {
                *v *= scale;
            }
            for v in &mut var {
                *v *= scale;
            }
            InferenceState {
                mode: InferenceMode::BatchAverage {
                    sample_batches: used,
                },
                bn_mu: mu,
                bn_var: var,
            }
        })
        .collect())
}

// ── Parameter serialization ────────────────────────────────────────

/// Write `<base>.snt` (gamma and beta as a `(2, C, 1, 1)` tensor) and
/// `<base>.manifest` (plain text `key=value` lines: layer name, channel
/// count, eps, and six control values at 17 significant digits).
pub fn save_params(params: &SnParams, name: &str, base: &Path) -> Result<()> {
    if name.contains('=') || name.contains('\n') {
        return Err(SnError::Format(format!("invalid layer name {name:?}")));
    }
    let c = params.channels();
    let mut data = params.gamma.clone();
    data.extend_from_slice(&params.beta);
    let tensor = Tensor4::from_vec(2, c, 1, 1, data)?;
    tensor.write_snt(&snt_path(base))?;

    let sparse_str = |s: Option<usize>| match s {
        None => "none".to_string(),
        Some(k) => k.to_string(),
    };
    let mut manifest = String::new();
    manifest.push_str(&format!("name={name}\n"));
    manifest.push_str(&format!("c={c}\n"));
    manifest.push_str(&format!("eps={:.16e}\n", params.eps));
    for (key, v) in [
        ("lambda_mu_in", params.lambda_mu[0]),
        ("lambda_mu_ln", params.lambda_mu[1]),
        ("lambda_mu_bn", params.lambda_mu[2]),
        ("lambda_var_in", params.lambda_var[0]),
        ("lambda_var_ln", params.lambda_var[1]),
        ("lambda_var_bn", params.lambda_var[2]),
    ] {
        manifest.push_str(&format!("{key}={v:.16e}\n"));
    }
    manifest.push_str(&format!("sparse_mu={}\n", sparse_str(params.sparse_mu)));
    manifest.push_str(&format!("sparse_var={}\n", sparse_str(params.sparse_var)));

    let mut f = std::fs::File::create(manifest_path(base))?;
    f.write_all(manifest.as_bytes())?;
    Ok(())
}

/// Load a `(name, params)` pair written by [`save_params`].
pub fn load_params(base: &Path) -> Result<(String, SnParams)> {
    let mut text = String::new();
    std::fs::File::open(manifest_path(base))?.read_to_string(&mut text)?;
    let (name, mut params) = parse_manifest(&text)?;

    let tensor = Tensor4::read_snt(&snt_path(base))?;
    let c = params.channels();
    if tensor.shape() != (2, c, 1, 1) {
        return Err(SnError::Format(format!(
            "parameter tensor shape {:?} does not match manifest channel count {c}",
            tensor.shape()
        )));
    }
    params.gamma.copy_from_slice(&tensor.as_slice()[..c]);
    params.beta.copy_from_slice(&tensor.as_slice()[c..]);
    Ok((name, params))
}

fn snt_path(base: &Path) -> PathBuf {
    with_suffix(base, "snt")
}

fn manifest_path(base: &Path) -> PathBuf {
    with_suffix(base, "manifest")
}

fn with_suffix(base: &Path, ext: &str) -> PathBuf {
    let mut os = base.as_os_str().to_owned();
    os.push(".");
    os.push(ext);
    PathBuf::from(os)
}

/// Parse manifest text; gamma/beta are left at their defaults and are
/// filled in from the tensor file by [`load_params`].
pub fn parse_manifest(text: &str) -> Result<(String, SnParams)> {
    let mut name = None;
    let mut c = None;
    let mut eps = None;
    let mut lambda_mu = [f64::NAN; 3];
    let mut lambda_var = [f64::NAN; 3];
    let mut sparse_mu = None;
    let mut sparse_var = None;

    let parse_f64 = |key: &str, v: &str| -> Result<f64> {
        v.parse::<f64>()
            .map_err(|_| SnError::Format(format!("bad float for {key}: {v:?}")))
    };
    let parse_sparse = |key: &str, v: &str| -> Result<Option<usize>> {
        if v == "none" {
            Ok(None)
        } else {
            let k: usize = v
                .parse()
                .map_err(|_| SnError::Format(format!("bad index for {key}: {v:?}")))?;
            if k > 2 {
                return Err(SnError::Format(format!("{key} index {k} out of range")));
            }
            Ok(Some(k))
        }
    };

    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| SnError::Format(format!("manifest line without '=': {line:?}")))?;
        match key {
            "name" => name = Some(value.to_string()),
            "c" => {
                c = Some(value.parse::<usize>().map_err(|_| {
                    SnError::Format(format!("bad channel count: {value:?}"))
                })?)
            }
            "eps" => eps = Some(parse_f64(key, value)?),
            "lambda_mu_in" => lambda_mu[0] = parse_f64(key, value)?,
            "lambda_mu_ln" => lambda_mu[1] = parse_f64(key, value)?,
            "lambda_mu_bn" => lambda_mu[2] = parse_f64(key, value)?,
            "lambda_var_in" => lambda_var[0] = parse_f64(key, value)?,
            "lambda_var_ln" => lambda_var[1] = parse_f64(key, value)?,
            "lambda_var_bn" => lambda_var[2] = parse_f64(key, value)?,
            "sparse_mu" => sparse_mu = parse_sparse(key, value)?,
            "sparse_var" => sparse_var = parse_sparse(key, value)?,
            other => {
                return Err(SnError::Format(format!("unknown manifest key {other:?}")));
            }
        }
    }

    let name = name.ok_or_else(|| SnError::Format("manifest missing name".into()))?;
    let c = c.ok_or_else(|| SnError::Format("manifest missing channel count".into()))?;
    if c == 0 {
        return Err(SnError::Format("manifest channel count must be >= 1".into()));
    }
    let eps = eps.ok_or_else(|| SnError::Format("manifest missing eps".into()))?;
    if lambda_mu.iter().chain(&lambda_var).any(|v| v.is_nan()) {
        return Err(SnError::Format("manifest missing a control value".into()));
    }

    let mut params = SnParams::new(c);
    params.eps = eps;
    params.lambda_mu = lambda_mu;
    params.lambda_var = lambda_var;
    params.sparse_mu = sparse_mu;
    params.sparse_var = sparse_var;
    Ok((name, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalizers::{normalize_forward, AffineParams};
    use crate::stats::stats_direct;
    use crate::tensor::Rng;

    fn random_input(seed: u64, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
        Tensor4::randn(&mut Rng::new(seed), n, c, h, w, 0.0, 1.0).unwrap()
    }

    #[test]
    fn weights_of_equal_controls_are_uniform() {
        let w = sn_weights(&[1.0, 1.0, 1.0]).unwrap();
        for v in w {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_by_hand() {
        let w = sn_weights(&[2.0_f64.ln(), 0.0, 0.0]).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15);
        assert!((w[1] - 0.25).abs() < 1e-15);
        assert!((w[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn weights_survive_extreme_controls() {
        let w = sn_weights(&[1000.0, 0.0, 0.0]).unwrap();
        assert_eq!(w, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn weights_reject_non_finite_controls() {
        assert!(matches!(
            sn_weights(&[f64::NAN, 0.0, 0.0]),
            Err(SnError::Parameter(_))
        ));
        assert!(matches!(
            sn_weights(&[f64::INFINITY, 0.0, 0.0]),
            Err(SnError::Parameter(_))
        ));
    }

    #[test]
    fn saturated_controls_degenerate_to_instance_norm() {
        let x = random_input(7, 2, 3, 4, 4);
        let mut params = SnParams::new(3);
        params.gamma = vec![1.5, 0.5, 2.0];
        params.beta = vec![0.1, -0.2, 0.3];
        params.lambda_mu = [40.0, -40.0, -40.0];
        params.lambda_var = [40.0, -40.0, -40.0];
        let (y, _) = sn_forward(&x, &params, ForwardMode::Train).unwrap();

        let affine =
            AffineParams::new(params.gamma.clone(), params.beta.clone(), params.eps).unwrap();
        let reference = normalize_forward(&x, Scope::In, &affine, None).unwrap();
        assert!(y.max_abs_diff(&reference).unwrap() < 1e-10);
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let x = Tensor4::new(2, 3, 4, 4, 2.5).unwrap();
        let mut params = SnParams::new(3);
        params.beta = vec![0.4, -0.4, 1.0];
        let (y, _) = sn_forward(&x, &params, ForwardMode::Train).unwrap();
        for nn in 0..2 {
            for cc in 0..3 {
                for i in 0..4 {
                    for j in 0..4 {
                        assert_eq!(y.get(nn, cc, i, j), params.beta[cc]);
                    }
                }
            }
        }
    }

    /// Independent end-to-end evaluation of the mixture expression via
    /// three direct-summation statistics calls, never touching the
    /// reuse path.
    fn mixture_oracle(x: &Tensor4, params: &SnParams) -> Tensor4 {
        let (n, c, h, w) = x.shape();
        let s_in = stats_direct(x, Scope::In, None).unwrap();
        let s_ln = stats_direct(x, Scope::Ln, None).unwrap();
        let s_bn = stats_direct(x, Scope::Bn, None).unwrap();
        let wm = params.weights_mu().unwrap();
        let wv = params.weights_var().unwrap();
        let mut y = Tensor4::zeros(n, c, h, w).unwrap();
        for nn in 0..n {
            for cc in 0..c {
                let e = nn * c + cc;
                let mu = wm[0] * s_in.mu[e] + wm[1] * s_ln.mu[nn] + wm[2] * s_bn.mu[cc];
                let var = wv[0] * s_in.var[e] + wv[1] * s_ln.var[nn] + wv[2] * s_bn.var[cc];
                let rstd = 1.0 / (var + params.eps).sqrt();
                for i in 0..h {
                    for j in 0..w {
                        let v = params.gamma[cc] * (x.get(nn, cc, i, j) - mu) * rstd
                            + params.beta[cc];
                        y.set(nn, cc, i, j, v);
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_direct_statistics_oracle() {
        let x = random_input(13, 4, 3, 5, 5);
        let params = SnParams::new(3);
        let (y, _) = sn_forward(&x, &params, ForwardMode::Train).unwrap();
        let reference = mixture_oracle(&x, &params);
        assert!(y.max_abs_diff(&reference).unwrap() < 1e-12);
    }

    #[test]
    fn eval_state_channel_mismatch_is_a_state_error() {
        let x = random_input(3, 2, 3, 2, 2);
        let params = SnParams::new(3);
        let state = InferenceState {
            mode: InferenceMode::BatchAverage { sample_batches: 1 },
            bn_mu: vec![0.0; 4],
            bn_var: vec![1.0; 4],
        };
        assert!(matches!(
            sn_forward(&x, &params, ForwardMode::Eval(&state)),
            Err(SnError::State(_))
        ));
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let x = random_input(5, 2, 3, 3, 3);
        let params = SnParams::new(3);
        let (_, cache) = sn_forward(&x, &params, ForwardMode::Train).unwrap();
        let d_out = Tensor4::zeros(2, 3, 3, 3).unwrap();
        let g = sn_backward(&d_out, &cache, &params).unwrap();
        assert!(g.d_input.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.d_gamma.iter().all(|&v| v == 0.0));
        assert!(g.d_beta.iter().all(|&v| v == 0.0));
        assert_eq!(g.d_lambda_mu, [0.0; 3]);
        assert_eq!(g.d_lambda_var, [0.0; 3]);
    }

    #[test]
    fn zero_gamma_blocks_input_and_control_gradients() {
        let x = random_input(6, 2, 3, 3, 3);
        let mut params = SnParams::new(3);
        params.gamma = vec![0.0; 3];
        let (_, cache) = sn_forward(&x, &params, ForwardMode::Train).unwrap();
        let d_out = random_input(61, 2, 3, 3, 3);
        let g = sn_backward(&d_out, &cache, &params).unwrap();
        assert!(g.d_input.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(g.d_lambda_mu, [0.0; 3]);
        assert_eq!(g.d_lambda_var, [0.0; 3]);
        // beta still collects the raw output gradient per channel
        for cc in 0..3 {
            let mut expect = 0.0;
            for nn in 0..2 {
                for i in 0..3 {
                    for j in 0..3 {
                        expect += d_out.get(nn, cc, i, j);
                    }
                }
            }
            assert!((g.d_beta[cc] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn control_gradients_sum_to_zero_per_triplet() {
        let x = random_input(9, 3, 4, 4, 4);
        let mut params = SnParams::new(4);
        params.lambda_mu = [0.3, -0.2, 0.9];
        params.lambda_var = [-0.5, 0.1, 0.4];
        let (_, cache) = sn_forward(&x, &params, ForwardMode::Train).unwrap();
        let d_out = random_input(91, 3, 4, 4, 4);
        let g = sn_backward(&d_out, &cache, &params).unwrap();
        assert!(g.d_lambda_mu.iter().sum::<f64>().abs() < 1e-10);
        assert!(g.d_lambda_var.iter().sum::<f64>().abs() < 1e-10);
        assert!(g.d_lambda_mu.iter().any(|&v| v.abs() > 0.0));
    }

    #[test]
    fn backward_rejects_eval_cache_and_stale_params() {
        let x = random_input(2, 1, 2, 2, 2);
        let params = SnParams::new(2);
        let state = InferenceState {
            mode: InferenceMode::BatchAverage { sample_batches: 1 },
            bn_mu: vec![0.0; 2],
            bn_var: vec![1.0; 2],
        };
        let (_, eval_cache) = sn_forward(&x, &params, ForwardMode::Eval(&state)).unwrap();
        let d_out = Tensor4::zeros(x.n(), x.c(), x.h(), x.w()).unwrap();
        assert!(matches!(
            sn_backward(&d_out, &eval_cache, &params),
            Err(SnError::State(_))
        ));

        let (_, cache) = sn_forward(&x, &params, ForwardMode::Train).unwrap();
        let mut changed = params.clone();
        changed.lambda_mu[0] += 0.5;
        assert!(matches!(
            sn_backward(&d_out, &cache, &changed),
            Err(SnError::State(_))
        ));
    }

    #[test]
    fn sparsify_takes_the_argmax() {
        let mut params = SnParams::new(2);
        params.lambda_mu = [0.2, 0.5, 0.3];
        params.lambda_var = [0.1, 0.2, 0.9];
        let sparse = sn_sparsify(&params);
        assert_eq!(sparse.weights_mu().unwrap(), [0.0, 1.0, 0.0]);
        assert_eq!(sparse.weights_var().unwrap(), [0.0, 0.0, 1.0]);
        assert_eq!(sparse.sparse_indices(), Some((1, 2)));
        assert!(sparse.is_sparse());
    }

    #[test]
    fn sparsify_breaks_ties_toward_instance_norm() {
        let params = SnParams::new(2);
        let sparse = sn_sparsify(&params);
        assert_eq!(sparse.weights_mu().unwrap(), [1.0, 0.0, 0.0]);
        assert_eq!(sparse.weights_var().unwrap(), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn sparse_batch_selection_equals_plain_batch_norm() {
        let x = random_input(17, 3, 4, 3, 3);
        let mut params = SnParams::new(4);
        params.gamma = vec![1.2, 0.8, 1.0, 0.6];
        params.beta = vec![0.0, 0.5, -0.5, 0.25];
        params.lambda_mu = [0.0, 0.1, 0.7];
        params.lambda_var = [0.2, 0.1, 0.8];
        let sparse = sn_sparsify(&params);
        let (y, _) = sn_forward(&x, &sparse, ForwardMode::Train).unwrap();
        let affine =
            AffineParams::new(params.gamma.clone(), params.beta.clone(), params.eps).unwrap();
        let reference = normalize_forward(&x, Scope::Bn, &affine, None).unwrap();
        assert!(y.max_abs_diff(&reference).unwrap() < 1e-12);
    }

    #[test]
    fn sparse_layers_freeze_control_gradients() {
        let x = random_input(23, 2, 3, 3, 3);
        let sparse = sn_sparsify(&SnParams::new(3));
        let (_, cache) = sn_forward(&x, &sparse, ForwardMode::Train).unwrap();
        let d_out = random_input(24, 2, 3, 3, 3);
        let g = sn_backward(&d_out, &cache, &sparse).unwrap();
        assert_eq!(g.d_lambda_mu, [0.0; 3]);
        assert_eq!(g.d_lambda_var, [0.0; 3]);
        assert!(g.d_input.as_slice().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn calibration_of_a_constant_batch() {
        let mut params = SnParams::new(3);
        let batch = Tensor4::new(2, 3, 2, 2, 4.0).unwrap();
        let states = calibrate_batch_average(&mut params, [&batch], 1).unwrap();
        assert_eq!(states.len(), 1);
        assert_eq!(states[0].bn_mu, vec![4.0; 3]);
        assert_eq!(states[0].bn_var, vec![0.0; 3]);
        assert_eq!(
            states[0].mode,
            InferenceMode::BatchAverage { sample_batches: 1 }
        );
    }

    #[test]
    fn calibration_averages_batches_arithmetically() {
        let mut params = SnParams::new(1);
        let b1 = Tensor4::new(1, 1, 1, 2, 2.0).unwrap();
        let b2 = Tensor4::new(1, 1, 1, 2, 6.0).unwrap();
        let states = calibrate_batch_average(&mut params, [&b1, &b2], 2).unwrap();
        assert_eq!(states[0].bn_mu, vec![4.0]);
    }

    #[test]
    fn calibration_mean_obeys_the_standard_error_bound() {
        let mut params = SnParams::new(2);
        let mut rng = Rng::new(99);
        let (n, h, w) = (4, 3, 3);
        let gen_mean = 0.7;
        let batches: Vec<Tensor4> = (0..50)
            .map(|_| Tensor4::randn(&mut rng, n, 2, h, w, gen_mean, 1.0).unwrap())
            .collect();
        let states = calibrate_batch_average(&mut params, batches.iter(), 50).unwrap();
        let bound = 3.0 / ((50 * n * h * w) as f64).sqrt();
        for &m in &states[0].bn_mu {
            assert!(
                (m - gen_mean).abs() < bound,
                "calibrated mean {m} outside bound {bound}"
            );
        }
    }

    #[test]
    fn calibration_requires_data() {
        let mut params = SnParams::new(1);
        let empty: [&Tensor4; 0] = [];
        assert!(matches!(
            calibrate_batch_average(&mut params, empty, 5),
            Err(SnError::Data(_))
        ));
        let batch = Tensor4::new(1, 1, 1, 1, 0.0).unwrap();
        assert!(matches!(
            calibrate_batch_average(&mut params, [&batch], 0),
            Err(SnError::Parameter(_))
        ));
    }

    #[test]
    fn moving_average_single_step() {
        let mut state = InferenceState::moving_average(1, 0.9).unwrap();
        let batch = NormStats {
            scope: Scope::Bn,
            mu: vec![1.0],
            var: vec![1.0],
            group_count: None,
        };
        update_moving_average(&mut state, &batch).unwrap();
        assert!((state.bn_mu[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn moving_average_fixed_point_and_fold_oracle() {
        let mut state = InferenceState::moving_average(1, 0.8).unwrap();
        let fixed = NormStats {
            scope: Scope::Bn,
            mu: vec![2.0],
            var: vec![0.5],
            group_count: None,
        };
        for _ in 0..400 {
            update_moving_average(&mut state, &fixed).unwrap();
        }
        assert!((state.bn_mu[0] - 2.0).abs() < 1e-12);
        assert!((state.bn_var[0] - 0.5).abs() < 1e-12);

        // independent fold over a seeded stream
        let mut rng = Rng::new(5);
        let stream: Vec<(f64, f64)> = (0..40).map(|_| (rng.normal(), rng.normal().abs())).collect();
        let mut state = InferenceState::moving_average(1, 0.9).unwrap();
        for &(m, v) in &stream {
            let batch = NormStats {
                scope: Scope::Bn,
                mu: vec![m],
                var: vec![v],
                group_count: None,
            };
            update_moving_average(&mut state, &batch).unwrap();
        }
        let (mut fm, mut fv) = (0.0, 0.0);
        for &(m, v) in &stream {
            fm = 0.9 * fm + 0.1 * m;
            fv = 0.9 * fv + 0.1 * v;
        }
        assert!((state.bn_mu[0] - fm).abs() < 1e-12);
        assert!((state.bn_var[0] - fv).abs() < 1e-12);
    }

    #[test]
    fn moving_average_rejects_wrong_scope_and_mode() {
        let mut state = InferenceState::moving_average(1, 0.9).unwrap();
        let wrong_scope = NormStats {
            scope: Scope::In,
            mu: vec![0.0],
            var: vec![0.0],
            group_count: None,
        };
        assert!(matches!(
            update_moving_average(&mut state, &wrong_scope),
            Err(SnError::State(_))
        ));

        let mut ba_state = InferenceState {
            mode: InferenceMode::BatchAverage { sample_batches: 1 },
            bn_mu: vec![0.0],
            bn_var: vec![0.0],
        };
        let batch = NormStats {
            scope: Scope::Bn,
            mu: vec![0.0],
            var: vec![0.0],
            group_count: None,
        };
        assert!(matches!(
            update_moving_average(&mut ba_state, &batch),
            Err(SnError::State(_))
        ));
        assert!(matches!(
            InferenceState::moving_average(1, 1.0),
            Err(SnError::Parameter(_))
        ));
    }

    #[test]
    fn same_batch_calibration_reproduces_train_forward() {
        let x = random_input(31, 4, 3, 4, 4);
        let mut params = SnParams::new(3);
        params.lambda_mu = [0.6, 1.2, 0.9];
        params.lambda_var = [1.1, 0.7, 1.4];
        let states = calibrate_batch_average(&mut params, [&x], 1).unwrap();
        let (train_y, _) = sn_forward(&x, &params, ForwardMode::Train).unwrap();
        let (eval_y, _) = sn_forward(&x, &params, ForwardMode::Eval(&states[0])).unwrap();
        assert!(train_y.max_abs_diff(&eval_y).unwrap() < 1e-10);
    }

    #[test]
    fn params_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = SnParams::new(5);
        params.gamma = vec![1.0, 0.25, -0.5, 3.0, 1e-9];
        params.beta = vec![0.0, 0.1, -0.1, 2.5, -7.0];
        params.lambda_mu = [0.123_456_789_012_345_68, -4.0, 1.0 / 3.0];
        params.lambda_var = [9.87654321e-3, 2.0, -0.0001];
        params.eps = 3e-6;
        let base = dir.path().join("layer0");
        save_params(&params, "sn0", &base).unwrap();
        let (name, loaded) = load_params(&base).unwrap();
        assert_eq!(name, "sn0");
        assert_eq!(loaded, params);

        let sparse = sn_sparsify(&params);
        save_params(&sparse, "sn0s", &base).unwrap();
        let (_, loaded) = load_params(&base).unwrap();
        assert_eq!(loaded, sparse);
    }
}
