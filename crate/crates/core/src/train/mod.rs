//! Losses and the three training procedures: radiance-field fitting,
//! supervised pose regression and photometric refinement of the regressor.

mod field;
mod loss;
mod photometric;
mod refine;
mod regressor;

pub use field::{train_field, FieldTrainConfig, FieldTrainer, TrainedField};
pub use loss::{combined_loss, gt_loss, gt_loss_values, photometric_loss, photometric_loss_values, LossWeights};
pub use photometric::{photometric_pass, PhotometricPass, PixelBatch};
pub use refine::{refine_direct, refine_unlabeled, RefineConfig, RefineOutcome};
pub use regressor::{train_regressor, validation_loss, RegressorOutcome, TrainConfig};

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Random stream for one epoch. Each epoch draws from its own stream of the
/// run seed, so a run resumed at epoch `e` sees the numbers an uninterrupted
/// run would have seen.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Stream used for initialisation and anything else outside the epoch loop.
pub fn setup_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

/// Per-epoch losses of one training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub records: Vec<EpochRecord>,
}

impl LossTrace {
    pub fn push(&mut self, record: EpochRecord) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Smallest recorded validation loss and its epoch.
    pub fn best_val(&self) -> Option<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.val_loss.map(|v| (r.epoch, v)))
            .fold(None, |best, (e, v)| match best {
                Some((_, b)) if b <= v => best,
                _ => Some((e, v)),
            })
    }

    /// `epoch,train_loss,val_loss,lr`, one row per epoch; a missing
    /// validation loss is an empty field.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.records {
            let val = r.val_loss.map(|v| format!("{v:?}")).unwrap_or_default();
            let _ = writeln!(s, "{},{:?},{},{:?}", r.epoch, r.train_loss, val, r.lr);
        }
        s
    }
}

/// Early-stopping bookkeeping: the best validation loss so far and the
/// number of epochs since it last strictly improved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub stale: usize,
}

impl Default for EarlyStopState {
    fn default() -> Self {
        Self {
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }
}

impl EarlyStopState {
    /// Records a validation loss; true when it is a strict improvement.
    pub fn observe(&mut self, epoch: usize, val: f64) -> bool {
        if val < self.best {
            self.best = val;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn exhausted(&self, patience: usize) -> bool {
        self.stale >= patience
    }
}

/// Exponential interpolation from `start` at epoch 0 to `end` at the last epoch.
pub fn exponential_lr(start: f64, end: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return start;
    }
    let f = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    start * (end / start).powf(f)
}

pub(crate) fn check_split(name: &'static str, idx: &[usize]) -> Result<()> {
    if idx.is_empty() {
        return Err(Error::Empty(name));
    }
    Ok(())
}
