//! Corpus ingestion, batching, training loop, evaluation, checkpoints,
//! metrics and the ablation pipeline.

pub mod ablate;
pub mod analyze;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod estimate;
pub mod metrics;
pub mod train;

pub use ablate::{ablate_pretrained, run_ablation, AblateConfig, AblateReport, AblateSettings, Decomposition};
pub use analyze::{analyze_model, AnalysisOutput};
pub use checkpoint::{capture, restore, Checkpoint, CheckpointMeta, DType, TensorRecord};
pub use config::{DataConfig, FinetuneConfig, FreezeFlags, ScheduleConfig, TrainConfig};
pub use corpus::{
    decode_token_binary, encode_token_binary, ingest, split_tail, synthetic_text, Batcher, Corpus, CorpusFormat,
};
pub use estimate::EstimateConfig;
pub use metrics::{MetricsLog, MetricsRow, VERSION};
pub use train::{evaluate_checkpoint, finetune_model, DataSplit, Trainer};
