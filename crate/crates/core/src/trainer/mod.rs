//! PEFT fine-tuning on the synthetic vision-grounded QA task.

pub mod checkpoint;
pub mod dataset;
pub mod graph;
pub mod optimizer;
pub mod params;
pub mod train;

pub use checkpoint::{Checkpoint, ModelBundle, CHECKPOINT_VERSION};
pub use dataset::{gen_dataset, read_jsonl, write_jsonl, Dataset, DatasetSpec, QType, Sample, Vocab};
pub use graph::{batch_gradients, Method, TraceItem};
pub use optimizer::AdamW;
pub use params::{param_metas, trainable_flags, ParamGroup, ParamMeta};
pub use train::{
    evaluate, finite_diff_check, init_run, loss, predict_answer, resume, to_trace_item, train,
    visual_for_mode, EpochMetrics, EvalReport, MemVpSetup, TrainConfig, TrainJob, TrainOutcome,
    VisualMode,
};
