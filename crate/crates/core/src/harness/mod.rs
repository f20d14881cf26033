//! Training, evaluation, ablation and benchmarking on top of the network.

pub mod ablate;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod report;
pub mod train;

pub use ablate::{ablate, parse_variants, write_ablation_csv, AblationRun, ABLATION_CSV};
pub use bench::{bench_inference, flops_estimate, median_p95, BenchReport, WARMUP};
pub use checkpoint::Checkpoint;
pub use config::{parse_kv, Preset, TrainConfig};
pub use data::{augmented_sample, make_sample, network_inputs, Augment, Sample};
pub use eval::{evaluate, read_eval_csv, score, summarize, write_eval_csv, EvalRow, Evaluation, EVAL_CSV};
pub use report::RunReport;
pub use train::{load_model, load_training_data, run, train, StepLog, TrainOutcome, Trainer, FINAL_CKPT, LOSS_CSV, REPORT_CSV};
