//! A small convolutional classifier: `{conv 3x3, switchable norm,
//! relu} x depth`, global average pooling, linear head. Convolution is
//! direct seven-loop with 'same' zero padding; fidelity over speed.

use crate::error::{Result, SnError};
use crate::exec;
use crate::snlayer::{
    sn_backward, sn_forward, BnStatsSource, ForwardCache, ForwardMode, InferenceState, SnGrads,
    SnParams,
};
use crate::tensor::{Rng, Tensor4};

/// 3x3 convolution weights, `(c_out, c_in, 3, 3)` row-major, no bias
/// (the normalization shift follows immediately).
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub weight: Vec<f64>,
}

impl ConvLayer {
    pub fn new(rng: &mut Rng, c_in: usize, c_out: usize) -> Self {
        let std = (2.0 / (9 * c_in) as f64).sqrt();
        let weight = (0..c_out * c_in * 9).map(|_| std * rng.normal()).collect();
        Self { c_in, c_out, weight }
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let (n, c_in, h, w) = x.shape();
        if c_in != self.c_in {
            return Err(SnError::Shape(format!(
                "conv expects {} input channels, got {c_in}",
                self.c_in
            )));
        }
        let hw = h * w;
        let src = x.as_slice();
        let weight = &self.weight;
        let c_out = self.c_out;
        let mut y = Tensor4::zeros(n, c_out, h, w)?;
        exec::for_each_chunk_mut(y.as_mut_slice(), hw, |e, chunk| {
            let nn = e / c_out;
            let oc = e % c_out;
            for yo in 0..h {
                for xo in 0..w {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        let wbase = (oc * c_in + ci) * 9;
                        let xbase = (nn * c_in + ci) * hw;
                        for u in 0..3 {
                            let yi = yo + u;
                            if yi < 1 || yi > h {
                                continue;
                            }
                            let yi = yi - 1;
                            for v in 0..3 {
                                let xi = xo + v;
                                if xi < 1 || xi > w {
                                    continue;
                                }
                                acc += src[xbase + yi * w + xi - 1] * weight[wbase + u * 3 + v];
                            }
                        }
                    }
                    chunk[yo * w + xo] = acc;
                }
            }
        });
        Ok(y)
    }

    /// Returns `(d_input, d_weight)`.
    pub fn backward(&self, x: &Tensor4, d_y: &Tensor4) -> Result<(Tensor4, Vec<f64>)> {
        let (n, c_in, h, w) = x.shape();
        let hw = h * w;
        let src = x.as_slice();
        let dy = d_y.as_slice();
        let weight = &self.weight;
        let c_out = self.c_out;

        let mut d_x = Tensor4::zeros(n, c_in, h, w)?;
        exec::for_each_chunk_mut(d_x.as_mut_slice(), hw, |e, chunk| {
            let nn = e / c_in;
            let ci = e % c_in;
            for yi in 0..h {
                for xi in 0..w {
                    let mut acc = 0.0;
                    for oc in 0..c_out {
                        let wbase = (oc * c_in + ci) * 9;
                        let ybase = (nn * c_out + oc) * hw;
                        for u in 0..3 {
                            let yo = yi + 1;
                            if yo < u || yo - u >= h {
                                continue;
                            }
                            let yo = yo - u;
                            for v in 0..3 {
                                let xo = xi + 1;
                                if xo < v || xo - v >= w {
                                    continue;
                                }
                                acc += dy[ybase + yo * w + xo - v] * weight[wbase + u * 3 + v];
                            }
                        }
                    }
                    chunk[yi * w + xi] = acc;
                }
            }
        });

        let blocks: Vec<[f64; 9]> = exec::map_indexed(c_out * c_in, |oci| {
            let oc = oci / c_in;
            let ci = oci % c_in;
            let mut block = [0.0; 9];
            for nn in 0..n {
                let ybase = (nn * c_out + oc) * hw;
                let xbase = (nn * c_in + ci) * hw;
                for yo in 0..h {
                    for xo in 0..w {
                        let g = dy[ybase + yo * w + xo];
                        if g == 0.0 {
                            continue;
                        }
                        for u in 0..3 {
                            let yi = yo + u;
                            if yi < 1 || yi > h {
                                continue;
                            }
                            let yi = yi - 1;
                            for v in 0..3 {
                                let xi = xo + v;
                                if xi < 1 || xi > w {
                                    continue;
                                }
                                block[u * 3 + v] += g * src[xbase + yi * w + xi - 1];
                            }
                        }
                    }
                }
            }
            block
        });
        let mut d_w = vec![0.0; c_out * c_in * 9];
        for (b, block) in blocks.iter().enumerate() {
            d_w[b * 9..(b + 1) * 9].copy_from_slice(block);
        }
        Ok((d_x, d_w))
    }
}

/// Forward-pass mode for the whole network.
#[derive(Debug, Clone, Copy)]
pub enum NetMode<'a> {
    Train,
    /// One frozen state per switchable layer, in network order.
    Eval(&'a [InferenceState]),
}

/// Activations retained for the backward pass.
pub struct NetCache {
    stage_inputs: Vec<Tensor4>,
    pub sn_caches: Vec<ForwardCache>,
    relu_outs: Vec<Tensor4>,
    pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Gradients for every trainable array in the network.
pub struct NetGrads {
    pub conv_w: Vec<Vec<f64>>,
    pub sn: Vec<SnGrads>,
    pub fc_w: Vec<f64>,
    pub fc_b: Vec<f64>,
}

/// The desk-scale stand-in for a deep backbone.
#[derive(Debug, Clone)]
pub struct ToyNet {
    pub convs: Vec<ConvLayer>,
    pub sn_layers: Vec<SnParams>,
    pub fc_w: Vec<f64>,
    pub fc_b: Vec<f64>,
    pub width: usize,
    pub classes: usize,
}

impl ToyNet {
    pub fn new(rng: &mut Rng, in_channels: usize, width: usize, depth: usize, classes: usize) -> Result<Self> {
        if depth == 0 || width == 0 || in_channels == 0 {
            return Err(SnError::Parameter(
                "depth, width and input channels must be >= 1".into(),
            ));
        }
        if classes < 2 {
            return Err(SnError::Parameter("need at least 2 classes".into()));
        }
        let mut convs = Vec::with_capacity(depth);
        let mut sn_layers = Vec::with_capacity(depth);
        for d in 0..depth {
            let c_in = if d == 0 { in_channels } else { width };
            convs.push(ConvLayer::new(rng, c_in, width));
            sn_layers.push(SnParams::new(width));
        }
        let fc_std = 1.0 / (width as f64).sqrt();
        let fc_w = (0..classes * width).map(|_| fc_std * rng.normal()).collect();
        let fc_b = vec![0.0; classes];
        Ok(Self {
            convs,
            sn_layers,
            fc_w,
            fc_b,
            width,
            classes,
        })
    }

    pub fn depth(&self) -> usize {
        self.convs.len()
    }

    pub fn layer_name(&self, idx: usize) -> String {
        format!("sn{idx}")
    }

    /// Logits as a flat `(N, classes)` buffer plus the backward cache.
    pub fn forward(&self, x: &Tensor4, mode: NetMode) -> Result<(Vec<f64>, NetCache)> {
        let depth = self.depth();
        if let NetMode::Eval(states) = mode {
            if states.len() != depth {
                return Err(SnError::State(format!(
                    "{} inference states supplied for {depth} layers",
                    states.len()
                )));
            }
        }
        let n = x.n();
        let mut stage_inputs = Vec::with_capacity(depth);
        let mut sn_caches = Vec::with_capacity(depth);
        let mut relu_outs = Vec::with_capacity(depth);
        let mut cur = x.clone();
        for d in 0..depth {
            let conv_out = self.convs[d].forward(&cur)?;
            stage_inputs.push(cur);
            let layer_mode = match mode {
                NetMode::Train => ForwardMode::Train,
                NetMode::Eval(states) => ForwardMode::Eval(&states[d]),
            };
            let (sn_out, cache) = sn_forward(&conv_out, &self.sn_layers[d], layer_mode)?;
            sn_caches.push(cache);
            let mut relu = sn_out;
            for v in relu.as_mut_slice() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            relu_outs.push(relu.clone());
            cur = relu;
        }

        // global average pool
        let (_, c, h, w) = cur.shape();
        let hw = (h * w) as f64;
        let src = cur.as_slice();
        let mut pooled = vec![0.0; n * c];
        for e in 0..n * c {
            let base = e * h * w;
            pooled[e] = src[base..base + h * w].iter().sum::<f64>() / hw;
        }

        // linear head
        let mut logits = vec![0.0; n * self.classes];
        for nn in 0..n {
            for k in 0..self.classes {
                let mut acc = self.fc_b[k];
                for cc in 0..self.width {
                    acc += self.fc_w[k * self.width + cc] * pooled[nn * self.width + cc];
                }
                logits[nn * self.classes + k] = acc;
            }
        }

        Ok((
            logits.clone(),
            NetCache {
                stage_inputs,
                sn_caches,
                relu_outs,
                pooled,
                logits,
            },
        ))
    }

    /// Backward from a logits gradient; requires a train-mode cache.
    pub fn backward(&self, cache: &NetCache, d_logits: &[f64]) -> Result<NetGrads> {
        let depth = self.depth();
        let n = cache.stage_inputs[0].n();
        if d_logits.len() != n * self.classes {
            return Err(SnError::Shape(format!(
                "logits gradient length {} does not match {}x{}",
                d_logits.len(),
                n,
                self.classes
            )));
        }

        // linear head
        let mut d_fc_w = vec![0.0; self.classes * self.width];
        let mut d_fc_b = vec![0.0; self.classes];
        let mut d_pooled = vec![0.0; n * self.width];
        for nn in 0..n {
            for k in 0..self.classes {
                let g = d_logits[nn * self.classes + k];
                d_fc_b[k] += g;
                for cc in 0..self.width {
                    d_fc_w[k * self.width + cc] += g * cache.pooled[nn * self.width + cc];
                    d_pooled[nn * self.width + cc] += g * self.fc_w[k * self.width + cc];
                }
            }
        }

        // unpool
        let last = &cache.relu_outs[depth - 1];
        let (_, c, h, w) = last.shape();
        let hw = h * w;
        let inv_hw = 1.0 / hw as f64;
        let mut d_cur = Tensor4::zeros(n, c, h, w)?;
        {
            let buf = d_cur.as_mut_slice();
            for e in 0..n * c {
                let g = d_pooled[e] * inv_hw;
                for k in 0..hw {
                    buf[e * hw + k] = g;
                }
            }
        }

        let mut conv_w = vec![Vec::new(); depth];
        let mut sn = Vec::with_capacity(depth);
        for d in (0..depth).rev() {
            // relu
            {
                let mask = cache.relu_outs[d].as_slice();
                let buf = d_cur.as_mut_slice();
                for (g, &m) in buf.iter_mut().zip(mask) {
                    if m == 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let grads = sn_backward(&d_cur, &cache.sn_caches[d], &self.sn_layers[d])?;
            let (d_x, d_w) = self.convs[d].backward(&cache.stage_inputs[d], &grads.d_input)?;
            sn.push(grads);
            conv_w[d] = d_w;
            d_cur = d_x;
        }
        sn.reverse();

        Ok(NetGrads {
            conv_w,
            sn,
            fc_w: d_fc_w,
            fc_b: d_fc_b,
        })
    }
}

impl BnStatsSource for ToyNet {
    fn sn_layer_count(&self) -> usize {
        self.depth()
    }

    fn collect_bn_stats(&mut self, batch: &Tensor4) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let (_, cache) = self.forward(batch, NetMode::Train)?;
        Ok(cache
            .sn_caches
            .iter()
            .map(|c| {
                let (mu, var) = c.batch_stats();
                (mu.to_vec(), var.to_vec())
            })
            .collect())
    }
}

/// Mean softmax cross-entropy over the batch.
///
/// Returns `(loss, accuracy, d_logits)` with the gradient already
/// scaled by `1/N`.
pub fn softmax_cross_entropy(
    logits: &[f64],
    labels: &[usize],
    classes: usize,
) -> Result<(f64, f64, Vec<f64>)> {
    let n = labels.len();
    if logits.len() != n * classes {
        return Err(SnError::Shape(format!(
            "logits length {} does not match {n}x{classes}",
            logits.len()
        )));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut d = vec![0.0; logits.len()];
    let inv_n = 1.0 / n as f64;
    for nn in 0..n {
        let row = &logits[nn * classes..(nn + 1) * classes];
        let label = labels[nn];
        if label >= classes {
            return Err(SnError::Data(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let log_sum = m + sum_exp.ln();
        loss += (log_sum - row[label]) * inv_n;
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(k, _)| k)
            .unwrap();
        if argmax == label {
            correct += 1;
        }
        for k in 0..classes {
            let p = (row[k] - log_sum).exp();
            d[nn * classes + k] = (p - if k == label { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok((loss, correct as f64 / n as f64, d))
}
