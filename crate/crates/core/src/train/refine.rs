use super::loss::LossWeights;
use super::photometric::{photometric_pass, PixelBatch};
use super::regressor::{apply_step, batch_gt_loss, early_stopped_loop, RegressorOutcome, TrainConfig};
use crate::error::Result;
use crate::field::{RadianceModel, RenderOptions};
use crate::regressor::PoseRegressor;
use crate::scenes::{subsample_window, Dataset};
use crate::se3::PoseVector;
use photoreg_diff::{Graph, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub render: RenderOptions,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::refinement(),
            weights: LossWeights::default(),
            render: RenderOptions {
                bins: 128,
                ..RenderOptions::default()
            },
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.weights.validate()?;
        self.render.validate()
    }
}

pub type RefineOutcome = RegressorOutcome;

/// Fine-tunes the regressor on `λ₁·photometric + λ₂·gt_loss` with the field
/// frozen. Each image's raw prediction is rendered at a random pixel subset,
/// so the photometric gradient reaches all twelve pose entries.
pub fn refine_direct<M: RadianceModel + ?Sized>(
    start: PoseRegressor,
    model: &M,
    dataset: &Dataset,
    config: &RefineConfig,
) -> Result<RefineOutcome> {
    config.validate()?;
    let frames = subsample_window(&dataset.splits.train, config.train.window)?;
    refine_on(start, model, dataset, &frames, config.weights, config)
}

/// Photometric-only refinement on images whose poses are never read.
/// Early stopping still uses the labeled validation split.
pub fn refine_unlabeled<M: RadianceModel + ?Sized>(
    start: PoseRegressor,
    model: &M,
    dataset: &Dataset,
    images: &[usize],
    config: &RefineConfig,
) -> Result<RefineOutcome> {
    config.validate()?;
    let frames = subsample_window(images, config.train.window)?;
    refine_on(start, model, dataset, &frames, LossWeights::unlabeled(), config)
}

fn refine_on<M: RadianceModel + ?Sized>(
    start: PoseRegressor,
    model: &M,
    dataset: &Dataset,
    frames: &[usize],
    w: LossWeights,
    config: &RefineConfig,
) -> Result<RefineOutcome> {
    let k = &dataset.intrinsics;
    early_stopped_loop(start, dataset, frames, &config.train, |r, batch, adam, rng| {
        let b = batch.len() as f64;
        let mut g = Graph::new();
        let vars = r.params.bind(&mut g, true);
        let x = g.constant(r.batch(&dataset.images(batch))?);
        let y = r.forward(&mut g, &vars, x)?;
        let raw = g.value(y).data().to_vec();
        let mut terms = Vec::new();
        let mut photo = 0.0;
        let mut pose_term = 0.0;
        if w.photometric > 0.0 {
            // the photometric gradient wrt each predicted pose is computed on
            // separate render graphs and pulled back through the regressor
            // as a fixed cotangent: d/dΨ Σ ⟨p̂, ∂L/∂p̂⟩ = ∂L/∂Ψ
            let mut cotangent = Vec::with_capacity(raw.len());
            for (row, &i) in raw.chunks(12).zip(batch) {
                let pose: PoseVector = row.try_into().expect("twelve outputs");
                let pixels = PixelBatch::sample(&dataset.frames[i].image, config.train.rays_per_image, rng);
                let pass = photometric_pass(model, &pose, k, &pixels, &config.render, rng, true, false)?;
                photo += w.photometric * pass.loss;
                cotangent.extend(pass.pose_grad.expect("requested").map(|d| d * w.photometric / b));
            }
            let c = g.constant(Tensor::new([batch.len(), 12], cotangent));
            let prod = g.mul(y, c);
            terms.push(g.sum(prod));
        }
        if w.pose > 0.0 {
            let total = batch_gt_loss(&mut g, y, &dataset.poses(batch))?;
            let mean = g.scale(total, 1.0 / b);
            pose_term = w.pose * g.value(mean).item();
            terms.push(if w.pose == 1.0 { mean } else { g.scale(mean, w.pose) });
        }
        let objective = match terms[..] {
            [t] => t,
            [a, c] => g.add(a, c),
            _ => unreachable!("validated weights have a positive term"),
        };
        g.backward(objective)?;
        let grads = r.params.collect_grads(&g, &vars);
        apply_step(r, grads, adam)?;
        Ok(photo / b + pose_term)
    })
}
