//! Experiment configuration: one JSON document, every field optional.

use crate::error::{CliError, Result};
use photoreg_core::eval::PerturbKind;
use photoreg_core::field::{CameraIntrinsics, FieldConfig, RenderOptions};
use photoreg_core::regressor::RegressorConfig;
use photoreg_core::scenes::{SceneSpec, SplitSpec, TrajectoryKind, TrajectorySpec};
use photoreg_core::train::{FieldTrainConfig, RefineConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Seeds dataset generation and regressor initialisation.
    pub seed: u64,
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub camera: CameraConfig,
    pub splits: SplitSpec,
    /// Quadrature samples per ray for the ground-truth images.
    pub oracle_samples: usize,
    pub field: FieldConfig,
    pub field_training: FieldTrainConfig,
    pub regressor: RegressorConfig,
    pub regressor_training: TrainConfig,
    pub refine: RefineConfig,
    pub eval: EvalConfig,
    pub perturb: PerturbStudyConfig,
    pub ablation: AblationConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneSpec::toy(),
            trajectory: TrajectorySpec {
                kind: TrajectoryKind::Orbit { radius: 2.6, height: 0.9 },
                count: 56,
            },
            camera: CameraConfig::default(),
            splits: SplitSpec {
                test: 1.0 / 7.0,
                val: 1.0 / 7.0,
                unlabeled: 0.0,
            },
            oracle_samples: 512,
            field: FieldConfig::default(),
            field_training: FieldTrainConfig::default(),
            regressor: RegressorConfig::default(),
            regressor_training: TrainConfig::default(),
            refine: RefineConfig::default(),
            eval: EvalConfig::default(),
            perturb: PerturbStudyConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub fov_x_deg: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            fov_x_deg: 55.0,
            width: 64,
            height: 48,
            near: 0.5,
            far: 4.0,
        }
    }
}

impl CameraConfig {
    pub fn intrinsics(&self) -> photoreg_core::Result<CameraIntrinsics> {
        CameraIntrinsics::from_fov(self.fov_x_deg, self.width, self.height, self.near, self.far)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Scene units.
    pub translation_threshold: f64,
    pub rotation_threshold_deg: f64,
    /// Split evaluated when a command does not name one.
    pub split: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            translation_threshold: 0.05,
            rotation_threshold_deg: 5.0,
            split: "test".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbStudyConfig {
    pub kinds: Vec<PerturbKind>,
    /// Scene units; empty uses the default log-spaced sweep.
    pub translation_magnitudes: Vec<f64>,
    /// Degrees; empty uses the default log-spaced sweep.
    pub rotation_magnitudes: Vec<f64>,
    pub trials: usize,
    /// Pixels compared per render; 0 uses the whole frame.
    pub pixels: usize,
    pub seeds: Vec<u64>,
    pub render: RenderOptions,
    /// Frame whose pose and image anchor the study; defaults to the first test frame.
    pub frame: Option<usize>,
}

impl Default for PerturbStudyConfig {
    fn default() -> Self {
        Self {
            kinds: vec![PerturbKind::Translation, PerturbKind::Rotation],
            translation_magnitudes: Vec::new(),
            rotation_magnitudes: Vec::new(),
            trials: 100,
            pixels: 0,
            seeds: vec![0, 1, 2],
            render: RenderOptions {
                bins: 128,
                ..RenderOptions::default()
            },
            frame: None,
        }
    }
}

impl PerturbStudyConfig {
    pub fn magnitudes(&self, kind: PerturbKind) -> Vec<f64> {
        let given = match kind {
            PerturbKind::Translation => &self.translation_magnitudes,
            PerturbKind::Rotation => &self.rotation_magnitudes,
        };
        if given.is_empty() {
            let mut m = vec![0.0];
            m.extend(kind.default_magnitudes(9));
            m
        } else {
            given.clone()
        }
    }
}

/// Fixed full, fixed half and annealed encodings trained on a co-visible
/// subset of a walk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub trajectory: TrajectorySpec,
    /// Frame the others must overlap; defaults to the middle of the trajectory.
    pub reference: Option<usize>,
    pub threshold: f64,
    /// Monte Carlo points per overlap estimate.
    pub n_points: usize,
    pub test_fraction: f64,
    pub full_bands: usize,
    pub half_bands: usize,
    pub annealed_bands: usize,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            trajectory: TrajectorySpec {
                kind: TrajectoryKind::Walk {
                    inner_radius: 2.0,
                    outer_radius: 3.0,
                    step: 0.1,
                    gaze_step: 0.05,
                },
                count: 300,
            },
            reference: None,
            threshold: 0.85,
            n_points: 4096,
            test_fraction: 0.2,
            full_bands: 10,
            half_bands: 5,
            annealed_bands: 8,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl Config {
    /// Reads and validates a config file; `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            let c = Config::default();
            c.validate()?;
            return Ok(c);
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(path.display().to_string(), e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses config JSON; errors name the offending field path.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let config: Config = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let at = e.path().to_string();
            let inner = e.into_inner();
            if at == "." {
                CliError::config(origin, inner)
            } else {
                CliError::config(format!("{origin} at {at}"), inner)
            }
        })?;
        de.end().map_err(|e| CliError::config(origin, e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let at = |section: &'static str| move |e: photoreg_core::Error| CliError::config(section, e);
        self.scene.validate().map_err(at("scene"))?;
        self.trajectory.validate().map_err(at("trajectory"))?;
        self.camera.intrinsics().map_err(at("camera"))?;
        self.splits.validate().map_err(at("splits"))?;
        if self.oracle_samples < 512 {
            return Err(CliError::config("oracle_samples", "must be at least 512"));
        }
        self.field.validate().map_err(at("field"))?;
        self.field_training.validate().map_err(at("field_training"))?;
        self.regressor.validate().map_err(at("regressor"))?;
        if (self.regressor.input_width, self.regressor.input_height) != (self.camera.width, self.camera.height) {
            return Err(CliError::config("regressor", "input size must match the camera resolution"));
        }
        self.regressor_training.validate().map_err(at("regressor_training"))?;
        self.refine.validate().map_err(at("refine"))?;
        if !(self.eval.translation_threshold > 0.0 && self.eval.rotation_threshold_deg > 0.0) {
            return Err(CliError::config("eval", "thresholds must be positive"));
        }
        if !matches!(self.eval.split.as_str(), "train" | "val" | "test" | "unlabeled") {
            return Err(CliError::config("eval.split", format!("unknown split {:?}", self.eval.split)));
        }
        let p = &self.perturb;
        if p.trials == 0 || p.seeds.is_empty() || p.kinds.is_empty() {
            return Err(CliError::config("perturb", "needs at least one kind, one seed and one trial"));
        }
        if p.translation_magnitudes.iter().chain(&p.rotation_magnitudes).any(|&m| !(m >= 0.0)) {
            return Err(CliError::config("perturb", "magnitudes must be non-negative"));
        }
        p.render.validate().map_err(at("perturb.render"))?;
        let a = &self.ablation;
        a.trajectory.validate().map_err(at("ablation.trajectory"))?;
        if a.reference.is_some_and(|r| r >= a.trajectory.count) {
            return Err(CliError::config("ablation.reference", "outside the trajectory"));
        }
        if !(0.0..=1.0).contains(&a.threshold) || a.n_points == 0 {
            return Err(CliError::config("ablation", "threshold must lie in [0, 1] and n_points be positive"));
        }
        if !(0.0..1.0).contains(&a.test_fraction) {
            return Err(CliError::config("ablation.test_fraction", "must lie in [0, 1)"));
        }
        if a.full_bands == 0 || a.half_bands == 0 || a.annealed_bands == 0 || a.seeds.is_empty() {
            return Err(CliError::config("ablation", "band counts and the seed list must be non-empty"));
        }
        Ok(())
    }

    /// Canonical JSON of the resolved config.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }
}
