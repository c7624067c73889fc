use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{save_volume, Batch, DatasetSplit, TwoStreamSampler, VolumeKind};
use crate::error::{Error, Result};
use crate::rng::{stream_seed, Stream};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::step::{StepRecord, Trainer, TrainerState};

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final";

/// A trainer, its evolving state and the batch sampler that feeds it.
#[derive(Debug, Clone)]
pub struct TrainSession {
    pub trainer: Trainer,
    pub state: TrainerState,
    sampler: TwoStreamSampler,
}

/// Where a finished run left its artifacts.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub state: TrainerState,
}

fn sampler_for(trainer: &Trainer, split: &DatasetSplit) -> Result<TwoStreamSampler> {
    let c = &trainer.cfg;
    TwoStreamSampler::new(
        split,
        c.effective_batch_size(),
        c.labeled_per_batch,
        c.crop_shape(),
        c.augment,
        stream_seed(c.seed, Stream::Data, &[]),
    )
}

impl TrainSession {
    pub fn new(trainer: Trainer, split: &DatasetSplit) -> Result<Self> {
        split.validate()?;
        let sampler = sampler_for(&trainer, split)?;
        let state = trainer.init_state();
        Ok(Self { trainer, state, sampler })
    }

    /// Continues from a checkpoint. The trainer must use the checkpoint's network.
    pub fn resume(trainer: Trainer, split: &DatasetSplit, dir: &Path) -> Result<Self> {
        split.validate()?;
        let ck = load_checkpoint(dir, Some(trainer.net.config()))?;
        let mut sampler = sampler_for(&trainer, split)?;
        match &ck.sampler {
            Some(s) => sampler.restore(s)?,
            None => {
                return Err(Error::Corrupt {
                    path: dir.to_path_buf(),
                    reason: "checkpoint carries no sampler state".into(),
                })
            }
        }
        Ok(Self {
            trainer,
            state: ck.state,
            sampler,
        })
    }

    /// Draws the next batch and trains on it. A failed step leaves the state untouched.
    pub fn step(&mut self, split: &DatasetSplit) -> Result<(StepRecord, Batch)> {
        let batch = self.sampler.next_batch(split);
        let rec = self.trainer.train_step(&mut self.state, &batch)?;
        Ok((rec, batch))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(
            dir,
            &self.state,
            &self.trainer.cfg,
            &self.trainer.weights,
            self.trainer.net.config(),
            Some(&self.sampler.state()),
        )
    }

    /// Trains until `state.step == t_end`, writing periodic checkpoints under `out`.
    /// On a numerical failure the offending batch is dumped next to the error report.
    pub fn run_until(&mut self, split: &DatasetSplit, t_end: usize, out: Option<&Path>) -> Result<()> {
        let every = self.trainer.cfg.checkpoint_every;
        while self.state.step < t_end {
            let batch = self.sampler.next_batch(split);
            if let Err(e) = self.trainer.train_step(&mut self.state, &batch) {
                if let (Some(out), Error::Numerical { .. }) = (out, &e) {
                    dump_failure(out, self.state.step, &batch, &e)?;
                }
                return Err(e);
            }
            let t = self.state.step;
            if let Some(out) = out {
                if every > 0 && t.is_multiple_of(every) && t < t_end {
                    self.save(&checkpoint_path(out, &format!("step_{t:06}")))?;
                }
            }
        }
        Ok(())
    }
}

pub fn checkpoint_path(out: &Path, name: &str) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(name)
}

fn dump_failure(out: &Path, step: usize, batch: &Batch, err: &Error) -> Result<()> {
    let dir = out.join(format!("failure_step_{step:06}"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for (i, v) in batch.images.iter().enumerate() {
        save_volume(v, VolumeKind::Image, &dir.join(format!("input_{i}.raw")))?;
    }
    let path = dir.join("error.txt");
    fs::write(&path, err.to_string()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes the per-step CSV log.
pub fn write_log(path: &Path, records: &[StepRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    if records.is_empty() {
        w.write_record(["step", "lr", "lambda", "H", "loss_sup", "loss_cons", "sel_frac"])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Full run: `t_max` steps from a fresh state, periodic and final checkpoints, CSV log.
pub fn train_run(trainer: Trainer, split: &DatasetSplit, out: &Path) -> Result<RunOutcome> {
    let mut session = TrainSession::new(trainer, split)?;
    let t_max = session.trainer.cfg.t_max;
    session.run_until(split, t_max, Some(out))?;
    let final_checkpoint = checkpoint_path(out, FINAL_CHECKPOINT);
    session.save(&final_checkpoint)?;
    let log_path = out.join(LOG_FILE);
    write_log(&log_path, &session.state.log)?;
    Ok(RunOutcome {
        final_checkpoint,
        log_path,
        state: session.state,
    })
}
