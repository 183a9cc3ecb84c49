//! Command-line surface for the switchable normalization library:
//! verification oracles, the toy training harness, and report emission.
//!
//! Exit codes: 0 when the command and its numeric checks pass, 1 on a
//! failed check or internal error, 2 on usage errors.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use switchnorm::analysis::{report_weights, verify_remark1_in, verify_remark1_ln};
use switchnorm::harness::{
    batch_size_sweep, evaluate, gradcheck, train, train_with_inference_comparison, EvalMode,
    ExperimentSpec, TrainConfig,
};
use switchnorm::snlayer::{calibrate_batch_average, load_params, parse_manifest, SnParams};
use switchnorm::stats::{stats_direct, stats_reuse, Scope};
use switchnorm::tensor::{Rng, Tensor4};
use switchnorm::{Result, SnError};

#[derive(Debug, Clone, Copy)]
struct ShapeArg(usize, usize, usize, usize);

impl FromStr for ShapeArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 4 {
            return Err(format!("expected N,C,H,W, got {s:?}"));
        }
        let mut dims = [0usize; 4];
        for (d, p) in dims.iter_mut().zip(&parts) {
            *d = p
                .trim()
                .parse()
                .map_err(|_| format!("bad dimension {p:?}"))?;
        }
        Ok(ShapeArg(dims[0], dims[1], dims[2], dims[3]))
    }
}

impl fmt::Display for ShapeArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.0, self.1, self.2, self.3)
    }
}

#[derive(Debug, Clone)]
struct SizeList(Vec<usize>);

impl FromStr for SizeList {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let sizes = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad size {p:?}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if sizes.is_empty() {
            return Err("size list is empty".into());
        }
        Ok(SizeList(sizes))
    }
}

impl fmt::Display for SizeList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let strs: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", strs.join(","))
    }
}

#[derive(Parser)]
#[command(name = "switchnorm", version, about = "Switchable normalization tools")]
struct Cli {
    /// Directory for generated files.
    #[arg(long, global = true, default_value = "./out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check analytic layer gradients against central finite differences.
    Gradcheck {
        /// Input shape as N,C,H,W.
        #[arg(long, default_value_t = ShapeArg(2, 3, 4, 4))]
        shape: ShapeArg,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        eps_fd: f64,
        /// Max allowed relative error per parameter group.
        #[arg(long, default_value_t = 1e-5)]
        threshold: f64,
    },
    /// Verify the statistics-reuse path against direct summation on
    /// seeded random tensors.
    Equiv {
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Max allowed absolute difference.
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
    },
    /// Train the toy classifier and write the per-step metrics log.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train at several minibatch sizes and summarize how the learned
    /// weights move between the smallest and largest size.
    Sweep {
        /// Comma-separated minibatch sizes.
        #[arg(long, default_value_t = SizeList(vec![2, 32]))]
        sizes: SizeList,
        /// Number of seeds (0..n).
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Calibrate inference statistics on the toy task and compare
    /// batch-average against moving-average accuracy.
    Calibrate {
        /// Minibatches streamed through the frozen network.
        #[arg(long, default_value_t = 50)]
        sample_batches: usize,
        /// Moving-average momentum tracked during training.
        #[arg(long, default_value_t = 0.9)]
        ma_momentum: f64,
        /// Held-out samples for the accuracy comparison.
        #[arg(long, default_value_t = 256)]
        eval_samples: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Check the whitened-patch normalization identities.
    Remark1 {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        c_out: usize,
        #[arg(long, default_value_t = 8)]
        patch_dim: usize,
        #[arg(long, default_value_t = 256)]
        patches: usize,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
        /// Bound asserted on the instance-norm identity error.
        #[arg(long, default_value_t = 1e-8)]
        threshold: f64,
    },
    /// Summarize importance weights from saved layer parameters.
    WeightsReport {
        /// A `.manifest` file, a parameter base path, or a directory of
        /// manifests.
        #[arg(long)]
        params: PathBuf,
        #[arg(long, default_value = "report")]
        label: String,
    },
}

/// Flags shared by the training-based subcommands.
#[derive(Debug, clap::Args)]
struct RunArgs {
    #[arg(long, default_value_t = 600)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    wd_main: f64,
    #[arg(long, default_value_t = 1e-4)]
    wd_affine: f64,
    #[arg(long, default_value_t = 0.0)]
    wd_lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Step at which the learning rate is decayed once (off by default).
    #[arg(long)]
    lr_decay_at: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    lr_decay_factor: f64,
    /// Data noise level.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 512)]
    samples: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    /// Image height.
    #[arg(long, default_value_t = 6)]
    height: usize,
    /// Image width.
    #[arg(long, default_value_t = 6)]
    width: usize,
    #[arg(long, default_value_t = 8)]
    net_width: usize,
    #[arg(long, default_value_t = 2)]
    net_depth: usize,
}

impl RunArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            minibatch_size: self.batch,
            steps: self.steps,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay_main: self.wd_main,
            weight_decay_affine: self.wd_affine,
            weight_decay_lambda: self.wd_lambda,
            seed: self.seed,
            eval_mode: EvalMode::BatchAverage { sample_batches: 50 },
            lr_decay_at: self.lr_decay_at,
            lr_decay_factor: self.lr_decay_factor,
        }
    }

    fn spec(&self) -> ExperimentSpec {
        ExperimentSpec {
            classes: self.classes,
            samples: self.samples,
            channels: self.channels,
            height: self.height,
            width: self.width,
            noise: self.noise,
            net_width: self.net_width,
            net_depth: self.net_depth,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gradcheck {
            shape,
            seed,
            eps_fd,
            threshold,
        } => {
            let report = gradcheck((shape.0, shape.1, shape.2, shape.3), seed, eps_fd)?;
            for (group, err) in report.groups() {
                println!("{group} max_rel_err={err:.3e}");
            }
            Ok(report.max() < threshold)
        }

        Command::Equiv { trials, seed, tol } => {
            if trials == 0 {
                return Err(SnError::Parameter("trials must be >= 1".into()));
            }
            let mut worst: f64 = 0.0;
            for t in 0..trials {
                let mut rng = Rng::new(seed.wrapping_add(t as u64));
                let n = 1 + rng.below(8);
                let c = 1 + rng.below(16);
                let h = 1 + rng.below(8);
                let w = 1 + rng.below(8);
                let x = Tensor4::randn(&mut rng, n, c, h, w, 0.0, 1.0)?;
                let (ri, rl, rb) = stats_reuse(&x);
                for (reused, scope) in [(ri, Scope::In), (rl, Scope::Ln), (rb, Scope::Bn)] {
                    let direct = stats_direct(&x, scope, None)?;
                    for (a, b) in reused
                        .mu
                        .iter()
                        .zip(&direct.mu)
                        .chain(reused.var.iter().zip(&direct.var))
                    {
                        worst = worst.max((a - b).abs());
                    }
                }
            }
            println!("trials={trials} max_abs_diff={worst:.3e}");
            Ok(worst < tol)
        }

        Command::Train { run } => {
            let cfg = run.config();
            let (mut net, data) = run.spec().build(run.seed)?;
            let log = train(&mut net, &cfg, &data)?;
            let path = write_file(&cli.out, "metrics.csv", &log.to_csv())?;
            let last = log.records.last().expect("at least one step");
            println!(
                "steps={} final_loss={:.6} final_acc={:.6} metrics={}",
                cfg.steps,
                last.loss,
                last.acc,
                path.display()
            );
            Ok(true)
        }

        Command::Sweep { sizes, seeds, run } => {
            if seeds == 0 {
                return Err(SnError::Parameter("need at least one seed".into()));
            }
            let cfg = run.config();
            let seed_list: Vec<u64> = (0..seeds as u64).collect();
            let report = batch_size_sweep(&cfg, &run.spec(), &sizes.0, &seed_list)?;
            write_file(&cli.out, "sweep.csv", &report.to_csv())?;
            let mut summary = report.summary_line();
            summary.push('\n');
            write_file(&cli.out, "sweep_summary.txt", &summary)?;
            println!("{}", report.summary_line());
            Ok(report.direction_pass)
        }

        Command::Calibrate {
            sample_batches,
            ma_momentum,
            eval_samples,
            run,
        } => {
            let mut cfg = run.config();
            cfg.eval_mode = EvalMode::MovingAverage {
                momentum: ma_momentum,
            };
            let (mut net, train_data, eval_data) =
                run.spec().build_with_eval(run.seed, eval_samples)?;
            let (_, comparisons) =
                train_with_inference_comparison(&mut net, &cfg, &train_data, &eval_data, 1)?;
            let last = comparisons.last().expect("final checkpoint");

            // frozen statistics actually emitted by batch-average calibration
            let mut sampler_rng = Rng::new(run.seed.wrapping_add(0x5EED));
            let mut batches = Vec::with_capacity(sample_batches);
            for _ in 0..sample_batches {
                let indices: Vec<usize> = (0..cfg.minibatch_size)
                    .map(|_| sampler_rng.below(train_data.len()))
                    .collect();
                let (batch, _) = train_data.gather(&indices)?;
                batches.push(batch);
            }
            let states = calibrate_batch_average(&mut net, batches.iter(), sample_batches)?;
            let mut csv = String::from("layer,channel,bn_mu,bn_var\n");
            for (l, state) in states.iter().enumerate() {
                for (ch, (mu, var)) in state.bn_mu.iter().zip(&state.bn_var).enumerate() {
                    csv.push_str(&format!("sn{l},{ch},{mu:.12e},{var:.12e}\n"));
                }
            }
            let path = write_file(&cli.out, "calibration.csv", &csv)?;
            let acc_ba = evaluate(&net, &eval_data, &states)?;
            println!(
                "acc_batch_average={:.6} acc_moving_average={:.6} recalibrated_acc={:.6} stats={}",
                last.acc_batch_average,
                last.acc_moving_average,
                acc_ba,
                path.display()
            );
            Ok(true)
        }

        Command::Remark1 {
            seed,
            c_out,
            patch_dim,
            patches,
            gamma,
            beta,
            threshold,
        } => {
            let in_err =
                verify_remark1_in(&mut Rng::new(seed), c_out, patch_dim, patches, gamma, beta)?;
            let ln_gap =
                verify_remark1_ln(&mut Rng::new(seed), c_out, patch_dim, patches, gamma, beta)?;
            println!("in_identity_error={in_err:.3e}");
            println!("ln_discrepancy={ln_gap:.3e}");
            Ok(in_err < threshold)
        }

        Command::WeightsReport { params, label } => {
            let layers = load_layer_set(&params)?;
            let report = report_weights(layers.iter().map(|(n, p)| (n.as_str(), p)), &label)?;
            let path = write_file(&cli.out, "weights.csv", &report.to_csv())?;
            println!(
                "layers={} avg_mu=[{:.6},{:.6},{:.6}] avg_var=[{:.6},{:.6},{:.6}] csv={}",
                layers.len(),
                report.avg_mu[0],
                report.avg_mu[1],
                report.avg_mu[2],
                report.avg_var[0],
                report.avg_var[1],
                report.avg_var[2],
                path.display()
            );
            Ok(true)
        }
    }
}

/// Accepts a directory of manifests, a single `.manifest` file, or a
/// parameter base path (with the tensor file next to it).
fn load_layer_set(path: &Path) -> Result<Vec<(String, SnParams)>> {
    let mut layers = Vec::new();
    if path.is_dir() {
        let mut manifests: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "manifest").unwrap_or(false))
            .collect();
        manifests.sort();
        for m in manifests {
            layers.push(load_manifest_or_pair(&m)?);
        }
        if layers.is_empty() {
            return Err(SnError::Data(format!(
                "no .manifest files in {}",
                path.display()
            )));
        }
    } else {
        let manifest = if path.extension().map(|e| e == "manifest").unwrap_or(false) {
            path.to_path_buf()
        } else {
            PathBuf::from(format!("{}.manifest", path.display()))
        };
        layers.push(load_manifest_or_pair(&manifest)?);
    }
    Ok(layers)
}

/// Prefer the full tensor+manifest pair; fall back to the manifest
/// alone (the report only needs the control values).
fn load_manifest_or_pair(manifest: &Path) -> Result<(String, SnParams)> {
    let base = manifest.with_extension("");
    let snt = PathBuf::from(format!("{}.snt", base.display()));
    if snt.exists() {
        load_params(&base)
    } else {
        let text = std::fs::read_to_string(manifest)?;
        parse_manifest(&text)
    }
}
