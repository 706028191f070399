//! Joint training loop, sampling loop, optimizer, and checkpoint
//! persistence.

mod checkpoint;
mod optim;
mod sample;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, HashPolicy, OCK_MAGIC};
pub use optim::AdamW;
pub use sample::{sample, CondSource, SampleOutput};
pub use train::{
    to_signed, to_unit, EvalRecord, FrameMode, Nets, PerceptionInput, StepRecord, TrainConfig,
    TrainMode, Trainer,
};
