//! Synthetic tasks, optimization, training and evaluation loops, metrics
//! and checkpoint persistence.

pub mod batching;
pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod schedule;
pub mod task;
pub mod train;

pub use batching::{make_batches, Batch};
pub use checkpoint::{Checkpoint, NamedArray};
pub use config::TrainConfig;
pub use optim::{Adam, AdamConfig, StepReport};
pub use schedule::noam_lr;
pub use task::{generate_corpus, LanguageRule, MultilingualCorpus, ReversePolicy, Split, TaskOptions, TaskSpec};
pub use train::{
    evaluate, evaluate_checkpoint, evaluate_with_threads, hypothesis_symbols, metrics_csv, read_metrics, restore_model, train, worker_threads,
    write_metrics, LanguageMetrics, MetricsRow, Score, TrainOutcome,
};
