//! Partitioned networks trained group by group from local critics, in
//! either a sequential schedule or a threaded pipeline.

mod model;
mod pipeline;
mod stage;
mod trainer;

pub use model::{critic_for, one_hot, run_eager, split_sizes, Architecture, PartitionedModel, Preset};
pub use pipeline::{LinkLog, PipelineReport, WorkerStats};
pub use stage::{ForwardOut, HeadStat, Stage, Targets};
pub use trainer::{StepInput, StepRecord, Trainer};
