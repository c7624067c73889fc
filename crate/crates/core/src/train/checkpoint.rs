use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SamplerState;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::{load_params, save_params, NetConfig};

use super::config::TrainConfig;
use super::optim::Sgd;
use super::step::{StepRecord, TrainerState};

pub const TRAINER_FILE: &str = "trainer.json";
pub const STUDENT_DIR: &str = "student";
pub const TEACHER_DIR: &str = "teacher";
pub const MOMENTUM_DIR: &str = "momentum";

/// Non-array part of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainerFile {
    step: usize,
    train: TrainConfig,
    losses: LossWeights,
    net: NetConfig,
    sampler: Option<SamplerState>,
    log: Vec<StepRecord>,
}

/// A loaded checkpoint: state plus the settings it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainerState,
    pub train: TrainConfig,
    pub losses: LossWeights,
    pub net: NetConfig,
    pub sampler: Option<SamplerState>,
}

/// Writes `student/`, `teacher/` and `momentum/` parameter directories plus `trainer.json`.
pub fn save_checkpoint(
    dir: &Path,
    state: &TrainerState,
    train: &TrainConfig,
    losses: &LossWeights,
    net: &NetConfig,
    sampler: Option<&SamplerState>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    save_params(&dir.join(STUDENT_DIR), &state.student, net, state.step)?;
    save_params(&dir.join(TEACHER_DIR), &state.teacher, net, state.step)?;
    save_params(&dir.join(MOMENTUM_DIR), &state.optimizer.buffers, net, state.step)?;
    let file = TrainerFile {
        step: state.step,
        train: train.clone(),
        losses: losses.clone(),
        net: net.clone(),
        sampler: sampler.cloned(),
        log: state.log.clone(),
    };
    let path = dir.join(TRAINER_FILE);
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::json("trainer state", e))?;
    fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a checkpoint written by [`save_checkpoint`]. With `expect`, the
/// stored network configuration must match.
pub fn load_checkpoint(dir: &Path, expect: Option<&NetConfig>) -> Result<Checkpoint> {
    let path = dir.join(TRAINER_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let file: TrainerFile = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    if let Some(cfg) = expect {
        if cfg != &file.net {
            return Err(Error::Fingerprint(format!(
                "checkpoint was written for {:?}, expected {:?}",
                file.net, cfg
            )));
        }
    }
    let (student, ms) = load_params(&dir.join(STUDENT_DIR), Some(&file.net))?;
    let (teacher, mt) = load_params(&dir.join(TEACHER_DIR), Some(&file.net))?;
    let (buffers, mm) = load_params(&dir.join(MOMENTUM_DIR), Some(&file.net))?;
    student.check_compatible(&teacher)?;
    student.check_compatible(&buffers)?;
    if [ms.step, mt.step, mm.step].iter().any(|&s| s != file.step) || file.log.len() != file.step {
        return Err(Error::Corrupt {
            path: dir.to_path_buf(),
            reason: format!("inconsistent step counts in checkpoint (trainer at {})", file.step),
        });
    }
    let optimizer = Sgd {
        momentum: file.train.momentum,
        weight_decay: file.train.weight_decay,
        buffers,
    };
    Ok(Checkpoint {
        state: TrainerState {
            step: file.step,
            student,
            teacher,
            optimizer,
            log: file.log,
        },
        train: file.train,
        losses: file.losses,
        net: file.net,
        sampler: file.sampler,
    })
}
