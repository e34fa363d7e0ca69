use super::photometric::{photometric_pass, PixelBatch};
use super::{check_split, epoch_rng, exponential_lr, setup_rng, EpochRecord, LossTrace};
use crate::encoding::EncodingSchedule;
use crate::error::{Error, Result};
use crate::field::{FieldConfig, NeuralField, RadianceField, RenderOptions};
use crate::scenes::{subsample_window, Dataset};
use photoreg_diff::{adam_step, AdamState, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldTrainConfig {
    pub epochs: usize,
    /// Pixels sampled from one image per optimisation step.
    pub rays_per_image: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Epoch `N` at which every encoding band is fully on.
    pub horizon: usize,
    /// False trains with every band on from the first epoch.
    pub coarse_to_fine: bool,
    /// Keep every `window`-th training frame.
    pub window: usize,
    /// Pixels per validation image for the validation loss; 0 skips validation.
    pub val_pixels: usize,
    pub render: RenderOptions,
    pub seed: u64,
}

impl Default for FieldTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4000,
            rays_per_image: 1024,
            lr_start: 5e-4,
            lr_end: 8e-5,
            horizon: 1200,
            coarse_to_fine: true,
            window: 1,
            val_pixels: 0,
            render: RenderOptions {
                bins: 128,
                jitter: true,
                ..RenderOptions::default()
            },
            seed: 0,
        }
    }
}

impl FieldTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.rays_per_image == 0 || self.horizon == 0 || self.window == 0 {
            return Err(Error::invalid("field training", "epochs, rays_per_image, horizon and window must be positive"));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::invalid("field training", "learning rates must be positive"));
        }
        self.render.validate()
    }

    fn schedules(&self, field: &FieldConfig) -> (EncodingSchedule, EncodingSchedule) {
        if self.coarse_to_fine {
            (
                EncodingSchedule::new(field.position_bands, self.horizon).expect("validated"),
                EncodingSchedule::new(field.direction_bands, self.horizon).expect("validated"),
            )
        } else {
            (EncodingSchedule::fixed(field.position_bands), EncodingSchedule::fixed(field.direction_bands))
        }
    }
}

/// A fitted field with the encoding schedules it was left at.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedField {
    pub field: RadianceField,
    pub position: EncodingSchedule,
    pub direction: EncodingSchedule,
}

impl TrainedField {
    pub fn model(&self) -> NeuralField<'_> {
        NeuralField {
            field: &self.field,
            position: self.position,
            direction: self.direction,
        }
    }
}

/// Resumable state of a field training run.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldTrainer {
    pub config: FieldTrainConfig,
    pub trained: TrainedField,
    pub adam: AdamState,
    /// Epochs completed.
    pub epoch: usize,
    pub trace: LossTrace,
}

impl FieldTrainer {
    pub fn new(config: FieldTrainConfig, field_config: FieldConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        field_config.validate()?;
        let field = RadianceField::new(field_config, dataset.bounds, &mut setup_rng(config.seed))?;
        let (position, direction) = config.schedules(&field.config);
        let adam = AdamState::new(field.param_count(), config.lr_start);
        Ok(Self {
            config,
            trained: TrainedField {
                field,
                position,
                direction,
            },
            adam,
            epoch: 0,
            trace: LossTrace::default(),
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// One pass over the (windowed) training frames: one optimisation step
    /// per frame on `rays_per_image` random pixels.
    pub fn run_epoch(&mut self, dataset: &Dataset) -> Result<&EpochRecord> {
        check_split("training split", &dataset.splits.train)?;
        let c = &self.config;
        let mut frames = subsample_window(&dataset.splits.train, c.window)?;
        let mut rng = epoch_rng(c.seed, self.epoch);
        frames.shuffle(&mut rng);
        let lr = exponential_lr(c.lr_start, c.lr_end, self.epoch, c.epochs);
        self.adam.lr = lr;
        let mut total = 0.0;
        for &i in &frames {
            let frame = &dataset.frames[i];
            let batch = PixelBatch::sample(&frame.image, c.rays_per_image, &mut rng);
            let pass = photometric_pass(
                &self.trained.model(),
                &frame.pose.flatten(),
                &dataset.intrinsics,
                &batch,
                &c.render,
                &mut rng,
                false,
                true,
            )?;
            total += pass.loss;
            let mut params = Tensor::from_vec(self.trained.field.params.values().to_vec());
            adam_step(&mut params, &Tensor::from_vec(pass.param_grad.expect("requested")), &mut self.adam)?;
            self.trained.field.params.set_values(params.into_data());
        }
        let val_loss = self.validation_loss(dataset)?;
        self.trace.push(EpochRecord {
            epoch: self.epoch,
            train_loss: total / frames.len() as f64,
            val_loss,
            lr,
        });
        self.epoch += 1;
        self.trained.position.advance_epoch();
        self.trained.direction.advance_epoch();
        Ok(self.trace.last().expect("just pushed"))
    }

    /// Mean photometric loss over a fixed pixel subset of each validation
    /// frame, rendered without jitter.
    pub fn validation_loss(&self, dataset: &Dataset) -> Result<Option<f64>> {
        let c = &self.config;
        if c.val_pixels == 0 || dataset.splits.val.is_empty() {
            return Ok(None);
        }
        let opts = RenderOptions {
            jitter: false,
            ..c.render
        };
        let mut pick = setup_rng(c.seed ^ 0x5EED_7A11);
        let mut sum = 0.0;
        for &i in &dataset.splits.val {
            let frame = &dataset.frames[i];
            let batch = PixelBatch::sample(&frame.image, c.val_pixels, &mut pick);
            let pass = photometric_pass(
                &self.trained.model(),
                &frame.pose.flatten(),
                &dataset.intrinsics,
                &batch,
                &opts,
                &mut pick,
                false,
                false,
            )?;
            sum += pass.loss;
        }
        Ok(Some(sum / dataset.splits.val.len() as f64))
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self, dataset: &Dataset) -> Result<()> {
        while !self.finished() {
            self.run_epoch(dataset)?;
        }
        Ok(())
    }
}

/// Fits a radiance field to the training frames of `dataset`.
pub fn train_field(dataset: &Dataset, config: FieldTrainConfig, field_config: FieldConfig) -> Result<(TrainedField, LossTrace)> {
    let mut t = FieldTrainer::new(config, field_config, dataset)?;
    t.run(dataset)?;
    Ok((t.trained, t.trace))
}
