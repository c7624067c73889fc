//! Student optimization, EMA teacher, schedules, checkpoints and training logs.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod run;
pub mod step;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Method, TeacherTarget, TrainConfig};
pub use optim::{ema_update, lr_schedule, Sgd};
pub use run::{checkpoint_path, read_log, train_run, write_log, RunOutcome, TrainSession};
pub use step::{StepRecord, Trainer, TrainerState};
