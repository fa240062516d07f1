//! Cross-entropy training with AdamW and a plateau scheduler, evaluation,
//! seed sweeps and frame-wise evaluation of continuous recordings.

mod continuous;
pub mod loss;
mod optim;
mod scheduler;
mod trainer;

pub use continuous::{eval_continuous, write_track, ContinuousEval, TrackRow};
pub use optim::{AdamState, AdamW};
pub use scheduler::{PlateauScheduler, SchedulerConfig};
pub use trainer::{
    batch_logits, batch_loss, confusion_accuracy, evaluate, loss_and_grads, mean_std, train, train_sweep,
    EpochRecord, Evaluation, Monitor, RunReport, StepOutput, TrainConfig, TrainOptions, TrainOutcome,
};
