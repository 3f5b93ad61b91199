//! End-to-end training, metric analogs, ablations and the command layer
//! behind the `emodiff` binary.

mod ablation;
pub mod commands;
mod generate;
mod metrics;
mod report;
mod train;

pub use ablation::{
    run_ablation_deterministic, run_ablation_weights, spearman, DeterministicAblation, WeightAblation, WeightCell,
};
pub use generate::{
    evaluate_clips, evaluation_clips, generate, prompt_source, request_for, summarize, EvalConfig, GenerationRequest,
    MetricSummary,
};
pub use metrics::{
    lip_noise_floor, metric_au_std, metric_blink_rate, metric_emo_sim, metric_lip_dist, EmotionProbe, MetricReport,
};
pub use report::{means_by_weight, metric_rows, plot_weight_curves, read_csv, write_csv, write_json, MetricRow};
pub use train::{
    denoiser_config, prompt_input, train_deterministic, train_diffusion, ConditioningCache, ModelSize, TrainConfig,
    TrainLog,
};
