//! Fine-tuning, evaluation, stability instrumentation, the gradient-variance
//! Monte-Carlo check and the stand-in pre-trainer.

mod finetune;
mod metrics;
mod optim;
mod pretrain;
mod stability;
mod variance;

pub use finetune::{
    evaluate, finetune, predict_all, probe_subset, train_step, write_trace_csv, EpochRecord, StabilityTrace,
    TrainConfig,
};
pub use metrics::{metrics, MetricsReport};
pub use optim::{lr_schedule, AdamW, AdamWConfig, OptimizerState};
pub use pretrain::{pretrain_proxy, univariate_pool, window_pool, PretrainConfig, PretrainReport};
pub use stability::{
    mean_std, run_label, stability_experiment, Arm, ArmSummary, CurvePoint, HeadComparison, StabilityConfig,
    StabilityResult, StabilitySummary,
};
pub use variance::{
    variance_law_mc, write_variance_csv, Coupling, VarianceLawParams, VarianceLawReport, MIN_TRIALS,
};
