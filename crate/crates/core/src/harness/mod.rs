//! Training, evaluation and sweeps.

pub mod eval;
pub mod optim;
pub mod train;

pub use eval::{evaluate, robustness_sweep, sweep_csv, EvalReport, SubsetScore, SweepAxis, SweepRow};
pub use optim::Adam;
pub use train::{
    distill_batch_loss, distill_student, metrics_csv, stack_images, teacher_cache, train_teacher, EpochMetrics,
    TeacherCache, TrainConfig, METRICS_HEADER,
};
