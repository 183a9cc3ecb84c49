//! Desk-scale training harness: synthetic data, a small convolutional
//! classifier with switchable normalization after every convolution,
//! an SGD loop with per-group weight decay, a batch-size sweep, and
//! the finite-difference gradient oracle.

mod data;
mod gradcheck;
mod net;
mod sweep;
mod train;

pub use data::{synth_dataset, Dataset};
pub use gradcheck::{gradcheck, gradcheck_params, GradCheckReport};
pub use net::{softmax_cross_entropy, ConvLayer, NetCache, NetGrads, NetMode, ToyNet};
pub use sweep::{batch_size_sweep, ExperimentSpec, RunSummary, SweepReport};
pub use train::{
    evaluate, train, train_with_inference_comparison, EvalMode, InferenceComparison, MetricsLog,
    StepRecord, TrainConfig, TrainState, WeightSnapshot,
};
