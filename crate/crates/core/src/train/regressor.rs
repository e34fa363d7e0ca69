use super::loss::gt_loss;
use super::{check_split, epoch_rng, EarlyStopState, EpochRecord, LossTrace};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::regressor::PoseRegressor;
use crate::scenes::{subsample_window, Dataset};
use crate::se3::Pose;
use photoreg_diff::{adam_step, AdamState, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Optimisation settings shared by supervised regression and refinement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Epochs without strict validation improvement before stopping.
    pub patience: usize,
    pub decay_factor: f64,
    /// Stale epochs between learning-rate decays.
    pub decay_interval: usize,
    pub max_epochs: usize,
    /// Pixels rendered per image when a photometric term is active.
    pub rays_per_image: usize,
    /// Keep every `window`-th training frame.
    pub window: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 4,
            patience: 200,
            decay_factor: 0.95,
            decay_interval: 50,
            max_epochs: 2000,
            rays_per_image: 1024,
            window: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Batch size 1 and learning rate 1e-5.
    pub fn refinement() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::invalid("training", "patience must be at least 1"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::invalid("training", format!("decay factor {} outside (0, 1]", self.decay_factor)));
        }
        if self.batch_size == 0 || self.decay_interval == 0 || self.max_epochs == 0 || self.rays_per_image == 0 || self.window == 0 {
            return Err(Error::invalid(
                "training",
                "batch_size, decay_interval, max_epochs, rays_per_image and window must be positive",
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("training", "learning rate must be positive"));
        }
        Ok(())
    }
}

/// Best-validation parameters and the full trace of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressorOutcome {
    pub regressor: PoseRegressor,
    pub trace: LossTrace,
    pub stop: EarlyStopState,
    pub epochs_run: usize,
}

/// Sum over the batch of `gt_loss`, one row of `out` per pose.
pub(crate) fn batch_gt_loss(g: &mut Graph, out: Var, truths: &[Pose]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (i, p) in truths.iter().enumerate() {
        let idx: Vec<usize> = (12 * i..12 * i + 12).collect();
        let row = g.gather(out, &idx);
        let l = gt_loss(g, p, row)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l),
        });
    }
    total.ok_or(Error::Empty("pose batch"))
}

/// Mean `gt_loss` of the regressor over the given frames.
pub fn validation_loss(regressor: &PoseRegressor, dataset: &Dataset, idx: &[usize]) -> Result<f64> {
    check_split("validation split", idx)?;
    let mut sum = 0.0;
    for chunk in idx.chunks(16) {
        let mut g = Graph::new();
        let vars = regressor.params.bind(&mut g, false);
        let x = g.constant(regressor.batch(&dataset.images(chunk))?);
        let y = regressor.forward(&mut g, &vars, x)?;
        let l = batch_gt_loss(&mut g, y, &dataset.poses(chunk))?;
        sum += g.value(l).item();
    }
    Ok(sum / idx.len() as f64)
}

/// One Adam step on the flat parameters of `r`.
pub(crate) fn apply_step(r: &mut PoseRegressor, grads: Tensor, adam: &mut AdamState) -> Result<()> {
    let mut params = Tensor::from_vec(r.params.values().to_vec());
    adam_step(&mut params, &grads, adam)?;
    r.params.set_values(params.into_data());
    Ok(())
}

/// Epoch loop with validation early stopping and plateau learning-rate
/// decay. `step` runs one optimisation step on a batch of frame indices and
/// returns its loss.
pub(crate) fn early_stopped_loop<F>(
    start: PoseRegressor,
    dataset: &Dataset,
    train: &[usize],
    config: &TrainConfig,
    mut step: F,
) -> Result<RegressorOutcome>
where
    F: FnMut(&mut PoseRegressor, &[usize], &mut AdamState, &mut rand_chacha::ChaCha8Rng) -> Result<f64>,
{
    config.validate()?;
    check_split("training split", train)?;
    let val = &dataset.splits.val;
    check_split("validation split", val)?;
    let mut current = start;
    let mut best = current.clone();
    let mut adam = AdamState::new(current.param_count(), config.lr);
    let mut stop = EarlyStopState::default();
    let mut trace = LossTrace::default();
    let mut epochs_run = 0;
    for epoch in 0..config.max_epochs {
        let mut rng = epoch_rng(config.seed, epoch);
        let mut order = train.to_vec();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            sum += step(&mut current, batch, &mut adam, &mut rng)? * batch.len() as f64;
        }
        let val_loss = validation_loss(&current, dataset, val)?;
        trace.push(EpochRecord {
            epoch,
            train_loss: sum / order.len() as f64,
            val_loss: Some(val_loss),
            lr: adam.lr,
        });
        epochs_run = epoch + 1;
        if stop.observe(epoch, val_loss) {
            best = current.clone();
        } else if stop.stale % config.decay_interval == 0 {
            adam.lr *= config.decay_factor;
        }
        if stop.exhausted(config.patience) {
            break;
        }
    }
    Ok(RegressorOutcome {
        regressor: best,
        trace,
        stop,
        epochs_run,
    })
}

/// Supervised training on `gt_loss`, averaged over each batch.
pub fn train_regressor(start: PoseRegressor, dataset: &Dataset, config: &TrainConfig) -> Result<RegressorOutcome> {
    let train = subsample_window(&dataset.splits.train, config.window)?;
    early_stopped_loop(start, dataset, &train, config, |r, batch, adam, _| {
        let images: Vec<&ImageTensor> = dataset.images(batch);
        let mut g = Graph::new();
        let vars = r.params.bind(&mut g, true);
        let x = g.constant(r.batch(&images)?);
        let y = r.forward(&mut g, &vars, x)?;
        let total = batch_gt_loss(&mut g, y, &dataset.poses(batch))?;
        let loss = g.scale(total, 1.0 / batch.len() as f64);
        g.backward(loss)?;
        let grads = r.params.collect_grads(&g, &vars);
        let value = g.value(loss).item();
        apply_step(r, grads, adam)?;
        Ok(value)
    })
}
