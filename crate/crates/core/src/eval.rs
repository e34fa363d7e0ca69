//! Relocalization metrics and the photometric perturbation study.

use crate::error::{Error, Result};
use crate::field::{render, CameraIntrinsics, RadianceModel, RenderOptions};
use crate::image::ImageTensor;
use crate::se3::{perturb, rotation_error_deg, translation_error, Pose};
use crate::train::{photometric_loss_values, PixelBatch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Median of a list; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per frame, in scene units.
    pub translation_errors: Vec<f64>,
    /// Per frame, in degrees.
    pub rotation_errors: Vec<f64>,
    pub median_translation: f64,
    pub median_rotation: f64,
    pub mean_translation: f64,
    pub mean_rotation: f64,
    /// Free-form origin of the numbers (checkpoints, dataset, seed).
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

/// Per-frame errors of `predictions` against `truths` with their summaries.
pub fn pose_error_stats(predictions: &[Pose], truths: &[Pose]) -> Result<EvalReport> {
    if predictions.len() != truths.len() {
        return Err(Error::Shape {
            what: "pose lists",
            expected: truths.len().to_string(),
            got: predictions.len().to_string(),
        });
    }
    if truths.is_empty() {
        return Err(Error::Empty("pose lists"));
    }
    let t: Vec<f64> = predictions.iter().zip(truths).map(|(p, g)| translation_error(p, g)).collect();
    let r: Vec<f64> = predictions.iter().zip(truths).map(|(p, g)| rotation_error_deg(p, g)).collect();
    Ok(EvalReport {
        median_translation: median(&t).expect("non-empty"),
        median_rotation: median(&r).expect("non-empty"),
        mean_translation: mean(&t).expect("non-empty"),
        mean_rotation: mean(&r).expect("non-empty"),
        translation_errors: t,
        rotation_errors: r,
        provenance: BTreeMap::new(),
    })
}

/// Fractions of frames strictly below each threshold, counted per axis.
pub fn threshold_rates(report: &EvalReport, t_thresh: f64, r_thresh: f64) -> Result<(f64, f64)> {
    if !(t_thresh > 0.0 && r_thresh > 0.0) {
        return Err(Error::invalid("thresholds", "must be positive"));
    }
    let rate = |e: &[f64], th: f64| e.iter().filter(|&&x| x < th).count() as f64 / e.len().max(1) as f64;
    Ok((rate(&report.translation_errors, t_thresh), rate(&report.rotation_errors, r_thresh)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbKind {
    /// Magnitudes in scene units.
    Translation,
    /// Magnitudes in degrees.
    Rotation,
}

impl PerturbKind {
    /// Log-spaced default sweep: `[0.01, 1]` scene units or `[0.1°, 10°]`.
    pub fn default_magnitudes(self, points: usize) -> Vec<f64> {
        let (lo, hi): (f64, f64) = match self {
            PerturbKind::Translation => (0.01, 1.0),
            PerturbKind::Rotation => (0.1, 10.0),
        };
        if points <= 1 {
            return vec![lo];
        }
        (0..points)
            .map(|i| lo * (hi / lo).powf(i as f64 / (points - 1) as f64))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRateCurve {
    pub kind: PerturbKind,
    pub magnitudes: Vec<f64>,
    pub rates: Vec<f64>,
    pub trials: usize,
    /// Photometric loss of the render at the true pose.
    pub reference_loss: f64,
}

impl ErrorRateCurve {
    /// `magnitude,rate,trials` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("magnitude,rate,trials\n");
        for (m, r) in self.magnitudes.iter().zip(&self.rates) {
            let _ = writeln!(s, "{m:?},{r:?},{}", self.trials);
        }
        s
    }

    /// Rate at the magnitude closest to `m`.
    pub fn rate_at(&self, m: f64) -> Option<f64> {
        self.magnitudes
            .iter()
            .zip(&self.rates)
            .min_by(|a, b| (a.0 - m).abs().total_cmp(&(b.0 - m).abs()))
            .map(|(_, &r)| r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub trials: usize,
    /// Pixels compared per render; 0 uses the whole image.
    pub pixels: usize,
    pub render: RenderOptions,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            pixels: 0,
            render: RenderOptions::default(),
            seed: 0,
        }
    }
}

/// Fraction of perturbed poses whose render matches `image` strictly better
/// than the render at `truth`, per magnitude.
///
/// Sampling jitter is switched off so every render is a pure function of
/// the pose. Trial `j` at magnitude `i` draws its perturbation from its own
/// stream of `config.seed`.
#[allow(clippy::too_many_arguments)]
pub fn perturbation_study<M: RadianceModel + ?Sized>(
    model: &M,
    truth: &Pose,
    image: &ImageTensor,
    k: &CameraIntrinsics,
    kind: PerturbKind,
    magnitudes: &[f64],
    config: &PerturbConfig,
) -> Result<ErrorRateCurve> {
    if config.trials == 0 {
        return Err(Error::invalid("perturbation trials", "must be at least 1"));
    }
    if magnitudes.iter().any(|&m| !(m >= 0.0)) {
        return Err(Error::invalid("perturbation magnitudes", "must be non-negative"));
    }
    let opts = RenderOptions {
        jitter: false,
        ..config.render
    };
    let batch = if config.pixels == 0 {
        PixelBatch::full(image)
    } else {
        PixelBatch::sample(image, config.pixels, &mut ChaCha8Rng::seed_from_u64(config.seed))
    };
    let loss_at = |pose: &Pose| -> Result<f64> {
        // the rng is never drawn from without jitter
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let out = render(model, &pose.flatten(), k, &batch.pixels, &opts, &mut unused)?;
        photometric_loss_values(&out.rgb_flat(), &batch.target)
    };
    let reference = loss_at(truth)?;
    let mut rates = Vec::with_capacity(magnitudes.len());
    for (i, &m) in magnitudes.iter().enumerate() {
        let wins = (0..config.trials)
            .into_par_iter()
            .map(|j| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream((i * config.trials + j) as u64 + 1);
                let p = match kind {
                    PerturbKind::Translation => perturb(truth, m, 0.0, &mut rng),
                    PerturbKind::Rotation => perturb(truth, 0.0, m, &mut rng),
                };
                Ok(loss_at(&p)? < reference)
            })
            .collect::<Result<Vec<bool>>>()?;
        rates.push(wins.iter().filter(|&&w| w).count() as f64 / config.trials as f64);
    }
    Ok(ErrorRateCurve {
        kind,
        magnitudes: magnitudes.to_vec(),
        rates,
        trials: config.trials,
        reference_loss: reference,
    })
}
