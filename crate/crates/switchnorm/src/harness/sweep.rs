//! Batch-size sweep: train identical networks at different minibatch
//! sizes and report how the learned importance weights move.

use crate::error::{Result, SnError};
use crate::exec;
use crate::harness::data::{synth_dataset, Dataset};
use crate::harness::net::ToyNet;
use crate::harness::train::{train, TrainConfig};
use crate::tensor::Rng;

/// Data and network sizing for one toy experiment; one seed fixes the
/// dataset and the initialization together so runs at different
/// minibatch sizes are paired.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub classes: usize,
    pub samples: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub net_width: usize,
    pub net_depth: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            samples: 512,
            channels: 3,
            height: 6,
            width: 6,
            noise: 1.0,
            net_width: 8,
            net_depth: 2,
        }
    }
}

impl ExperimentSpec {
    /// Dataset and freshly initialized network from one seed.
    pub fn build(&self, seed: u64) -> Result<(ToyNet, Dataset)> {
        let mut rng = Rng::new(seed);
        let data = synth_dataset(
            &mut rng,
            self.classes,
            self.samples,
            self.channels,
            self.height,
            self.width,
            self.noise,
        )?;
        let net = ToyNet::new(
            &mut rng,
            self.channels,
            self.net_width,
            self.net_depth,
            self.classes,
        )?;
        Ok((net, data))
    }

    /// Like [`build`](Self::build) but with an extra held-out set drawn
    /// from the same class patterns.
    pub fn build_with_eval(
        &self,
        seed: u64,
        eval_samples: usize,
    ) -> Result<(ToyNet, Dataset, Dataset)> {
        let mut rng = Rng::new(seed);
        let all = synth_dataset(
            &mut rng,
            self.classes,
            self.samples + eval_samples,
            self.channels,
            self.height,
            self.width,
            self.noise,
        )?;
        let (train, eval) = all.split(self.samples)?;
        let net = ToyNet::new(
            &mut rng,
            self.channels,
            self.net_width,
            self.net_depth,
            self.classes,
        )?;
        Ok((net, train, eval))
    }
}

/// One trained run of the sweep.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub size: usize,
    pub seed: u64,
    pub final_train_acc: f64,
    /// Network-averaged mean-mixture weights, `[in, ln, bn]`.
    pub avg_mu: [f64; 3],
    /// Network-averaged variance-mixture weights.
    pub avg_var: [f64; 3],
    /// Average of the two triplets; the directional summary uses this.
    pub avg_combined: [f64; 3],
    /// `(layer, w_mu, w_var)` triplets at the end of training.
    pub layers: Vec<(String, [f64; 3], [f64; 3])>,
    /// Worst |sum - 1| over every logged triplet of the run.
    pub simplex_max_dev: f64,
    /// Every logged weight stayed inside [0, 1].
    pub simplex_in_bounds: bool,
}

/// Sweep outcome: all runs plus the paired directional summary
/// comparing the largest and smallest minibatch sizes.
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub runs: Vec<RunSummary>,
    pub size_small: usize,
    pub size_large: usize,
    /// Mean over seeds of the combined network-averaged weight.
    pub w_bn_small: f64,
    pub w_bn_large: f64,
    pub w_ln_small: f64,
    pub w_ln_large: f64,
    /// Seeds where w_bn grew from the small to the large size.
    pub bn_up_seeds: usize,
    /// Seeds where w_ln shrank from the small to the large size.
    pub ln_down_seeds: usize,
    pub seeds_total: usize,
    pub direction_pass: bool,
}

impl SweepReport {
    /// CSV `size,seed,layer,stat,w_in,w_ln,w_bn` with one mean and one
    /// variance row per layer per run.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("size,seed,layer,stat,w_in,w_ln,w_bn\n");
        for run in &self.runs {
            for (layer, w_mu, w_var) in &run.layers {
                for (stat, w) in [("mu", w_mu), ("var", w_var)] {
                    out.push_str(&format!(
                        "{},{},{},{},{:.6},{:.6},{:.6}\n",
                        run.size, run.seed, layer, stat, w[0], w[1], w[2]
                    ));
                }
            }
        }
        out
    }

    pub fn summary_line(&self) -> String {
        format!(
            "w_bn_large={:.6} w_bn_small={:.6} direction={}",
            self.w_bn_large,
            self.w_bn_small,
            if self.direction_pass { "pass" } else { "fail" }
        )
    }
}

/// Train one network per `(size, seed)` pair and summarize the
/// direction of the learned batch and layer weights between the
/// smallest and largest sizes.
///
/// Direction passes when w_bn rises with the larger size in at least
/// 80% of seeds and w_ln falls in at least 60% (the paired per-seed
/// comparison on the combined network average).
pub fn batch_size_sweep(
    cfg: &TrainConfig,
    spec: &ExperimentSpec,
    sizes: &[usize],
    seeds: &[u64],
) -> Result<SweepReport> {
    cfg.validate()?;
    if sizes.len() < 2 {
        return Err(SnError::Parameter("sweep needs at least 2 sizes".into()));
    }
    if seeds.len() < 3 {
        return Err(SnError::Parameter("sweep needs at least 3 seeds".into()));
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(SnError::Parameter("minibatch sizes must be >= 1".into()));
    }

    // independent runs; parallelism across them does not affect values
    let jobs: Vec<(usize, u64)> = sizes
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let results: Vec<Result<RunSummary>> = exec::map_indexed(jobs.len(), |j| {
        let (size, seed) = jobs[j];
        run_one(cfg, spec, size, seed)
    });
    let mut runs = Vec::with_capacity(results.len());
    for r in results {
        runs.push(r?);
    }

    let size_small = *sizes.iter().min().unwrap();
    let size_large = *sizes.iter().max().unwrap();
    let find = |size: usize, seed: u64| {
        runs.iter()
            .find(|r| r.size == size && r.seed == seed)
            .expect("run exists for every (size, seed)")
    };

    let mut bn_up_seeds = 0usize;
    let mut ln_down_seeds = 0usize;
    let (mut bn_s, mut bn_l, mut ln_s, mut ln_l) = (0.0, 0.0, 0.0, 0.0);
    for &seed in seeds {
        let small = find(size_small, seed);
        let large = find(size_large, seed);
        if large.avg_combined[2] > small.avg_combined[2] {
            bn_up_seeds += 1;
        }
        if large.avg_combined[1] < small.avg_combined[1] {
            ln_down_seeds += 1;
        }
        bn_s += small.avg_combined[2];
        bn_l += large.avg_combined[2];
        ln_s += small.avg_combined[1];
        ln_l += large.avg_combined[1];
    }
    let count = seeds.len() as f64;
    let direction_pass =
        bn_up_seeds * 5 >= seeds.len() * 4 && ln_down_seeds * 5 >= seeds.len() * 3;

    Ok(SweepReport {
        runs,
        size_small,
        size_large,
        w_bn_small: bn_s / count,
        w_bn_large: bn_l / count,
        w_ln_small: ln_s / count,
        w_ln_large: ln_l / count,
        bn_up_seeds,
        ln_down_seeds,
        seeds_total: seeds.len(),
        direction_pass,
    })
}

fn run_one(cfg: &TrainConfig, spec: &ExperimentSpec, size: usize, seed: u64) -> Result<RunSummary> {
    let (mut net, data) = spec.build(seed)?;
    let run_cfg = TrainConfig {
        minibatch_size: size,
        seed,
        ..cfg.clone()
    };
    let log = train(&mut net, &run_cfg, &data)?;

    let mut simplex_max_dev: f64 = 0.0;
    let mut simplex_in_bounds = true;
    for record in &log.records {
        for ws in &record.layer_weights {
            for w in [ws.w_mu, ws.w_var] {
                simplex_max_dev = simplex_max_dev.max((w.iter().sum::<f64>() - 1.0).abs());
                if w.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    simplex_in_bounds = false;
                }
            }
        }
    }

    let mut avg_mu = [0.0; 3];
    let mut avg_var = [0.0; 3];
    let mut layers = Vec::with_capacity(net.depth());
    for (l, params) in net.sn_layers.iter().enumerate() {
        let wm = params.weights_mu()?;
        let wv = params.weights_var()?;
        for k in 0..3 {
            avg_mu[k] += wm[k];
            avg_var[k] += wv[k];
        }
        layers.push((net.layer_name(l), wm, wv));
    }
    let depth = net.depth() as f64;
    for k in 0..3 {
        avg_mu[k] /= depth;
        avg_var[k] /= depth;
    }
    let avg_combined = [
        0.5 * (avg_mu[0] + avg_var[0]),
        0.5 * (avg_mu[1] + avg_var[1]),
        0.5 * (avg_mu[2] + avg_var[2]),
    ];

    Ok(RunSummary {
        size,
        seed,
        final_train_acc: log.records.last().map(|r| r.acc).unwrap_or(0.0),
        avg_mu,
        avg_var,
        avg_combined,
        layers,
        simplex_max_dev,
        simplex_in_bounds,
    })
}
