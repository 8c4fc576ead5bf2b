//! Rotating cross-validation schedule, optimizer and training loop.

pub mod optim;
mod trainer;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use optim::{Adam, AdamConfig, StepOutcome};
pub use trainer::{
    evaluate, predict_record, run_full_schedule, Curves, EpochLog, PhaseContext, PhaseReport, ScheduleReport, TrainState,
    Trainer,
};

/// Partitions case ids into `k` disjoint groups whose sizes differ by at most
/// one. The larger groups come first.
pub fn split_dataset(cases: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k == 0 {
        return Err(Error::Config("cannot split into zero parts".into()));
    }
    let mut unique: Vec<String> = cases.to_vec();
    unique.sort();
    unique.dedup();
    if unique.len() < k {
        return Err(Error::Config(format!(
            "{} cases cannot be split into {k} case-level parts",
            unique.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    let (base, extra) = (unique.len() / k, unique.len() % k);
    let mut splits = Vec::with_capacity(k);
    let mut rest = unique.into_iter();
    for i in 0..k {
        let n = base + usize::from(i < extra);
        splits.push(rest.by_ref().take(n).collect());
    }
    Ok(splits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    /// Trains on four splits and validates on the fifth.
    Rotation,
    /// Trains on all data without validation.
    AllData,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub kind: PhaseKind,
    pub val_split: Option<usize>,
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseSchedule {
    /// Epoch budget of each rotation phase; phase `k` validates on split `k`.
    pub phases: Vec<usize>,
    /// Initial learning rate of each rotation phase.
    pub lrs: Vec<f64>,
    pub fine_tune_epochs: usize,
    pub fine_tune_lr: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub decay: f64,
    /// Epochs without a validation improvement above `min_delta` before a
    /// phase stops early.
    pub patience: usize,
    pub min_delta: f64,
    pub split_seed: u64,
    /// When false every phase trains on all data without validation, which is
    /// the only option for datasets with fewer cases than splits.
    pub rotate: bool,
    /// Zero the optimizer moments at every phase switch.
    pub reset_optimizer: bool,
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        PhaseSchedule {
            phases: vec![50, 40, 30, 20, 15],
            lrs: vec![1e-4, 9e-5, 8e-5, 6e-5, 5e-5],
            fine_tune_epochs: 10,
            fine_tune_lr: 4e-5,
            decay: 0.98,
            patience: 8,
            min_delta: 1e-4,
            split_seed: 0,
            rotate: true,
            reset_optimizer: false,
        }
    }
}

impl PhaseSchedule {
    pub const FOLDS: usize = 5;

    /// Epochs (5, 4, 3, 2, 2) + 2 at ten times the default learning rates.
    pub fn desk() -> Self {
        PhaseSchedule {
            phases: vec![5, 4, 3, 2, 2],
            lrs: vec![1e-3, 9e-4, 8e-4, 6e-4, 5e-4],
            fine_tune_epochs: 2,
            fine_tune_lr: 4e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.len() != self.lrs.len() {
            return Err(Error::Config(format!(
                "schedule has {} phase budgets but {} learning rates",
                self.phases.len(),
                self.lrs.len()
            )));
        }
        if self.rotate && self.phases.len() != Self::FOLDS {
            return Err(Error::Config(format!(
                "a rotating schedule needs exactly {} phases, got {}",
                Self::FOLDS,
                self.phases.len()
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if self.lrs.iter().chain([&self.fine_tune_lr]).any(|lr| !(*lr > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::Config("min_delta must be >= 0".into()));
        }
        Ok(())
    }

    /// All phases in execution order, the fine-tune last.
    pub fn specs(&self) -> Vec<PhaseSpec> {
        let mut specs: Vec<PhaseSpec> = self
            .phases
            .iter()
            .zip(&self.lrs)
            .enumerate()
            .map(|(k, (&epochs, &lr))| PhaseSpec {
                kind: if self.rotate { PhaseKind::Rotation } else { PhaseKind::AllData },
                val_split: self.rotate.then_some(k),
                epochs,
                lr,
            })
            .collect();
        if self.fine_tune_epochs > 0 {
            specs.push(PhaseSpec {
                kind: PhaseKind::AllData,
                val_split: None,
                epochs: self.fine_tune_epochs,
                lr: self.fine_tune_lr,
            });
        }
        specs
    }

    pub fn max_epochs(&self) -> usize {
        self.phases.iter().sum::<usize>() + self.fine_tune_epochs
    }

    pub fn lr_at(&self, lr0: f64, epoch: usize) -> f64 {
        lr0 * self.decay.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    /// Dynamic patch resampling; when false, full-size slices at batch `n0`.
    pub resample: bool,
    /// Iterations per epoch; `0` means `ceil(training slices / n0)`.
    pub epoch_iterations: usize,
    /// Write a resumable state every this many epochs; `0` disables.
    pub checkpoint_every: usize,
    /// Assemble batches on a worker thread.
    pub prefetch: bool,
    pub adam: AdamConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            resample: true,
            epoch_iterations: 0,
            checkpoint_every: 0,
            prefetch: false,
            adam: AdamConfig::default(),
        }
    }
}
