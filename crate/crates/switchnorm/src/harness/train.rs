//! SGD training loop with per-group weight decay and a metrics log.
//!
//! Filters and control parameters receive gradients in the same step
//! from the same minibatch; there is no bilevel split. Training is
//! single-threaded by contract so the metrics log is bitwise
//! reproducible per seed (the kernels underneath may parallelize
//! across output elements, which does not change any value).

use crate::error::{Result, SnError};
use crate::harness::data::Dataset;
use crate::harness::net::{softmax_cross_entropy, NetMode, ToyNet};
use crate::snlayer::{calibrate_batch_average, update_moving_average, InferenceState};
use crate::stats::{NormStats, Scope};
use crate::tensor::Rng;

/// How frozen batch statistics are produced for eval-mode forwards.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalMode {
    BatchAverage { sample_batches: usize },
    MovingAverage { momentum: f64 },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub minibatch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay_main: f64,
    pub weight_decay_affine: f64,
    pub weight_decay_lambda: f64,
    pub seed: u64,
    pub eval_mode: EvalMode,
    /// Optional single-step schedule: from this step on, the learning
    /// rate is multiplied by `lr_decay_factor`.
    pub lr_decay_at: Option<usize>,
    pub lr_decay_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            minibatch_size: 32,
            steps: 600,
            lr: 0.05,
            momentum: 0.9,
            weight_decay_main: 1e-4,
            weight_decay_affine: 1e-4,
            weight_decay_lambda: 0.0,
            seed: 0,
            eval_mode: EvalMode::BatchAverage { sample_batches: 50 },
            lr_decay_at: None,
            lr_decay_factor: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.minibatch_size == 0 {
            return Err(SnError::Parameter("minibatch size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(SnError::Parameter(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("weight_decay_main", self.weight_decay_main),
            ("weight_decay_affine", self.weight_decay_affine),
            ("weight_decay_lambda", self.weight_decay_lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SnError::Parameter(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if let EvalMode::MovingAverage { momentum } = self.eval_mode {
            if !(momentum > 0.0 && momentum < 1.0) {
                return Err(SnError::Parameter(format!(
                    "moving-average momentum must lie in (0, 1), got {momentum}"
                )));
            }
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(SnError::Parameter(format!(
                "lr decay factor must be finite and > 0, got {}",
                self.lr_decay_factor
            )));
        }
        Ok(())
    }

    /// Learning rate in effect at the given step.
    pub fn lr_at(&self, step_idx: usize) -> f64 {
        match self.lr_decay_at {
            Some(at) if step_idx >= at => self.lr * self.lr_decay_factor,
            _ => self.lr,
        }
    }

    fn ma_momentum(&self) -> f64 {
        match self.eval_mode {
            EvalMode::MovingAverage { momentum } => momentum,
            _ => 0.9,
        }
    }

    fn sample_batches(&self) -> usize {
        match self.eval_mode {
            EvalMode::BatchAverage { sample_batches } => sample_batches,
            _ => 50,
        }
    }
}

/// Importance weights of one layer at one step.
#[derive(Debug, Clone, Copy)]
pub struct WeightSnapshot {
    pub w_mu: [f64; 3],
    pub w_var: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub acc: f64,
    pub layer_weights: Vec<WeightSnapshot>,
}

/// Per-step training log.
#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    pub records: Vec<StepRecord>,
}

impl MetricsLog {
    /// CSV `step,loss,acc,layer,stat,w_in,w_ln,w_bn`: two rows per
    /// layer per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,acc,layer,stat,w_in,w_ln,w_bn\n");
        for r in &self.records {
            for (l, ws) in r.layer_weights.iter().enumerate() {
                for (stat, w) in [("mu", ws.w_mu), ("var", ws.w_var)] {
                    out.push_str(&format!(
                        "{},{:.6},{:.6},sn{l},{},{:.6},{:.6},{:.6}\n",
                        r.step, r.loss, r.acc, stat, w[0], w[1], w[2]
                    ));
                }
            }
        }
        out
    }
}

struct Velocities {
    conv: Vec<Vec<f64>>,
    gamma: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
    lambda_mu: Vec<[f64; 3]>,
    lambda_var: Vec<[f64; 3]>,
    fc_w: Vec<f64>,
    fc_b: Vec<f64>,
}

/// Optimizer state plus the moving-average inference statistics that
/// training keeps up to date on the side.
pub struct TrainState {
    vel: Velocities,
    pub moving_states: Vec<InferenceState>,
}

fn sgd_update(p: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64, wd: f64) {
    for i in 0..p.len() {
        let grad = g[i] + wd * p[i];
        v[i] = momentum * v[i] + grad;
        p[i] -= lr * v[i];
    }
}

impl TrainState {
    pub fn new(net: &ToyNet, ma_momentum: f64) -> Result<Self> {
        let vel = Velocities {
            conv: net.convs.iter().map(|c| vec![0.0; c.weight.len()]).collect(),
            gamma: net
                .sn_layers
                .iter()
                .map(|p| vec![0.0; p.gamma.len()])
                .collect(),
            beta: net
                .sn_layers
                .iter()
                .map(|p| vec![0.0; p.beta.len()])
                .collect(),
            lambda_mu: vec![[0.0; 3]; net.depth()],
            lambda_var: vec![[0.0; 3]; net.depth()],
            fc_w: vec![0.0; net.fc_w.len()],
            fc_b: vec![0.0; net.fc_b.len()],
        };
        let moving_states = net
            .sn_layers
            .iter()
            .map(|p| InferenceState::moving_average(p.channels(), ma_momentum))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { vel, moving_states })
    }

    /// One SGD step on one minibatch. Returns the step record.
    pub fn step(
        &mut self,
        net: &mut ToyNet,
        cfg: &TrainConfig,
        batch: &crate::tensor::Tensor4,
        labels: &[usize],
        step_idx: usize,
    ) -> Result<StepRecord> {
        let (logits, cache) = net.forward(batch, NetMode::Train)?;

        // With a single sample per minibatch the batch and instance
        // statistic paths see the same pixel sets; assert it rather
        // than special-casing the mixture.
        if batch.n() == 1 {
            for (l, sn_cache) in cache.sn_caches.iter().enumerate() {
                let (mu_i, var_i) = sn_cache.instance_stats();
                let (mu_b, var_b) = sn_cache.batch_stats();
                for (a, b) in mu_i.iter().zip(mu_b).chain(var_i.iter().zip(var_b)) {
                    assert!(
                        (a - b).abs() <= 1e-12,
                        "layer {l}: batch and instance statistics diverged at N=1"
                    );
                }
            }
        }

        let (loss, acc, d_logits) = softmax_cross_entropy(&logits, labels, net.classes)?;
        if !loss.is_finite() {
            return Err(SnError::Divergence {
                step: step_idx,
                reason: format!("loss became {loss}"),
            });
        }
        let grads = net.backward(&cache, &d_logits)?;

        let lr = cfg.lr_at(step_idx);
        for d in 0..net.depth() {
            sgd_update(
                &mut net.convs[d].weight,
                &grads.conv_w[d],
                &mut self.vel.conv[d],
                lr,
                cfg.momentum,
                cfg.weight_decay_main,
            );
            sgd_update(
                &mut net.sn_layers[d].gamma,
                &grads.sn[d].d_gamma,
                &mut self.vel.gamma[d],
                lr,
                cfg.momentum,
                cfg.weight_decay_affine,
            );
            sgd_update(
                &mut net.sn_layers[d].beta,
                &grads.sn[d].d_beta,
                &mut self.vel.beta[d],
                lr,
                cfg.momentum,
                cfg.weight_decay_affine,
            );
            if !net.sn_layers[d].is_sparse() {
                sgd_update(
                    &mut net.sn_layers[d].lambda_mu,
                    &grads.sn[d].d_lambda_mu,
                    &mut self.vel.lambda_mu[d],
                    lr,
                    cfg.momentum,
                    cfg.weight_decay_lambda,
                );
                sgd_update(
                    &mut net.sn_layers[d].lambda_var,
                    &grads.sn[d].d_lambda_var,
                    &mut self.vel.lambda_var[d],
                    lr,
                    cfg.momentum,
                    cfg.weight_decay_lambda,
                );
            }
        }
        sgd_update(
            &mut net.fc_w,
            &grads.fc_w,
            &mut self.vel.fc_w,
            lr,
            cfg.momentum,
            cfg.weight_decay_main,
        );
        sgd_update(
            &mut net.fc_b,
            &grads.fc_b,
            &mut self.vel.fc_b,
            lr,
            cfg.momentum,
            cfg.weight_decay_main,
        );

        // keep the moving-average inference statistics current
        for (state, sn_cache) in self.moving_states.iter_mut().zip(&cache.sn_caches) {
            let (mu, var) = sn_cache.batch_stats();
            let batch_stats = NormStats {
                scope: Scope::Bn,
                mu: mu.to_vec(),
                var: var.to_vec(),
                group_count: None,
            };
            update_moving_average(state, &batch_stats)?;
        }

        let layer_weights = net
            .sn_layers
            .iter()
            .map(|p| {
                Ok(WeightSnapshot {
                    w_mu: p.weights_mu()?,
                    w_var: p.weights_var()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(StepRecord {
            step: step_idx,
            loss,
            acc,
            layer_weights,
        })
    }
}

/// Shuffled-epoch minibatch sampler.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
    batch: usize,
}

impl BatchSampler {
    fn new(samples: usize, batch: usize, mut rng: Rng) -> Self {
        let mut order: Vec<usize> = (0..samples).collect();
        rng.shuffle(&mut order);
        Self {
            order,
            pos: 0,
            rng,
            batch,
        }
    }

    fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Train in place for `cfg.steps` minibatches; deterministic per seed.
pub fn train(net: &mut ToyNet, cfg: &TrainConfig, data: &Dataset) -> Result<MetricsLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(SnError::Data("empty dataset".into()));
    }
    let mut state = TrainState::new(net, cfg.ma_momentum())?;
    let mut sampler = BatchSampler::new(data.len(), cfg.minibatch_size, Rng::new(cfg.seed));
    let mut log = MetricsLog::default();
    for step_idx in 0..cfg.steps {
        let indices = sampler.next_indices();
        let (batch, labels) = data.gather(&indices)?;
        log.records
            .push(state.step(net, cfg, &batch, &labels, step_idx)?);
    }
    Ok(log)
}

/// Eval-mode accuracy over a whole dataset given frozen per-layer
/// statistics. Chunking does not affect the result: instance and
/// layer statistics are per sample and the batch statistics are
/// frozen.
pub fn evaluate(net: &ToyNet, data: &Dataset, states: &[InferenceState]) -> Result<f64> {
    if data.is_empty() {
        return Err(SnError::Data("empty dataset".into()));
    }
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < data.len() {
        let end = (start + 64).min(data.len());
        let indices: Vec<usize> = (start..end).collect();
        let (batch, labels) = data.gather(&indices)?;
        let (logits, _) = net.forward(&batch, NetMode::Eval(states))?;
        for (nn, &label) in labels.iter().enumerate() {
            let row = &logits[nn * net.classes..(nn + 1) * net.classes];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(k, _)| k)
                .unwrap();
            if argmax == label {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Eval accuracy under both calibration schemes at one checkpoint.
#[derive(Debug, Clone, Copy)]
pub struct InferenceComparison {
    pub step: usize,
    pub acc_batch_average: f64,
    pub acc_moving_average: f64,
}

/// Train while comparing batch-average against moving-average
/// calibration on `eval_data` at `checkpoints` evenly spaced points
/// (the final step is always a checkpoint).
pub fn train_with_inference_comparison(
    net: &mut ToyNet,
    cfg: &TrainConfig,
    data: &Dataset,
    eval_data: &Dataset,
    checkpoints: usize,
) -> Result<(MetricsLog, Vec<InferenceComparison>)> {
    cfg.validate()?;
    if checkpoints == 0 {
        return Err(SnError::Parameter("need at least one checkpoint".into()));
    }
    if data.is_empty() || eval_data.is_empty() {
        return Err(SnError::Data("empty dataset".into()));
    }
    let mut state = TrainState::new(net, cfg.ma_momentum())?;
    let mut sampler = BatchSampler::new(data.len(), cfg.minibatch_size, Rng::new(cfg.seed));
    // separate stream so calibration never perturbs the training walk
    let calib_seed = cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut log = MetricsLog::default();
    let mut comparisons = Vec::new();
    let interval = (cfg.steps / checkpoints).max(1);

    for step_idx in 0..cfg.steps {
        let indices = sampler.next_indices();
        let (batch, labels) = data.gather(&indices)?;
        log.records
            .push(state.step(net, cfg, &batch, &labels, step_idx)?);

        let is_checkpoint = (step_idx + 1) % interval == 0 || step_idx + 1 == cfg.steps;
        if is_checkpoint {
            let sample_batches = cfg.sample_batches();
            let mut calib_sampler = BatchSampler::new(
                data.len(),
                cfg.minibatch_size,
                Rng::new(calib_seed.wrapping_add(step_idx as u64)),
            );
            let mut calib_batches = Vec::with_capacity(sample_batches);
            for _ in 0..sample_batches {
                let (b, _) = data.gather(&calib_sampler.next_indices())?;
                calib_batches.push(b);
            }
            let ba_states = calibrate_batch_average(net, calib_batches.iter(), sample_batches)?;
            let acc_batch_average = evaluate(net, eval_data, &ba_states)?;
            let acc_moving_average = evaluate(net, eval_data, &state.moving_states)?;
            comparisons.push(InferenceComparison {
                step: step_idx,
                acc_batch_average,
                acc_moving_average,
            });
        }
    }
    Ok((log, comparisons))
}
