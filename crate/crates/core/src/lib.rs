//! Local-global spatio-temporal attention for clip classification.
//!
//! The model alternates two attention stages per block: local attention
//! inside non-overlapping space-time windows, then global attention where
//! every token queries a window-pooled summary of the whole clip. A
//! classification token rides along, skips the local stage, and feeds a
//! linear head. Training adds a compactness term to the cross-entropy that
//! evens out the non-target logits.
//!
//! Everything runs on a small scalar f64 tape: forward operations record
//! nodes, [`Tape::backward`] replays them in reverse, and the tape also
//! counts attention pairs and multiply-accumulates so the scaling claims of
//! the windowed design are testable as integers.
//!
//! The crate is deliberately desk-scale: deterministic seeding end to end,
//! synthetic datasets, and a byte-stable checkpoint container, so every
//! behavior is checkable on one core in seconds.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod export;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use attention::{
    cost_report, full_space_time_attention, merge, mhga, mhla, partition, window_pool,
    AttnParams, BlockParams, CostReport, MlpParams, PoolMode, PoolParams, WindowSpec, LN_EPS,
};
pub use checkpoint::{read_container, write_container, Container};
pub use config::RunSpec;
pub use embedding::{assemble, project, ClipFeatures, EmbedParams, TokenGrid};
pub use error::{Error, Result};
pub use eval::{cls_embeddings, evaluate_model, predictions, worker_count, WORKERS_ENV};
pub use export::{
    cost_csv, embeddings_csv, export_embeddings, history_csv, parse_cost_grid, write_text,
    CostConfig, COST_HEADER, HISTORY_HEADER,
};
pub use loss::{non_target_distribution, symmetric_uniform_kl, total_loss, LossBreakdown};
pub use metrics::{cls_distance_ratio, evaluate, Metrics};
pub use model::{ForwardOutput, Model, ModelConfig, Trace};
pub use synth::{generate, Dataset, SyntheticSpec};
pub use tape::{CostCounter, Gradients, Tape};
pub use tensor::Tensor;
pub use train::{
    gradcheck, train, EpochRecord, GradCheckEntry, GradCheckReport, RunHistory, TrainConfig,
    Trainer,
};
