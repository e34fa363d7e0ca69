//! Procedural scenes made of constant-density primitives, a brute-force
//! renderer for them, and the datasets built from those renders.

mod dataset;
mod overlap;
mod sevenscenes;
mod trajectory;

pub use dataset::{auto_window, build_dataset, dataset_from_poses, subsample_window, Dataset, Frame, SplitSpec, Splits};
pub use overlap::{frustum_overlap, select_by_overlap, symmetric_overlap};
pub use sevenscenes::{export_sevenscenes, import_sevenscenes, SevenScenesImport};
pub use trajectory::{generate_trajectory, TrajectoryKind, TrajectorySpec};

use crate::error::{Error, Result};
use crate::field::{CameraIntrinsics, RadianceModel, SampleBatch, SceneBounds};
use crate::image::ImageTensor;
use crate::se3::{Pose, PoseVector};
use nalgebra::Vector3;
use photoreg_diff::{Graph, Tensor, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere { radius: f64 },
    /// Axis-aligned, given by its half extents.
    Box { half: [f64; 3] },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub density: f64,
    pub albedo: [f64; 3],
}

impl Primitive {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let c = Vector3::from(self.center);
        match self.shape {
            Shape::Sphere { radius } => (p - c).norm_squared() <= radius * radius,
            Shape::Box { half } => (0..3).all(|i| (p[i] - c[i]).abs() <= half[i]),
        }
    }

    fn extent(&self) -> [f64; 3] {
        match self.shape {
            Shape::Sphere { radius } => [radius; 3],
            Shape::Box { half } => half,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub bounds: SceneBounds,
    pub seed: u64,
}

impl SceneSpec {
    /// Three spheres resting over a slab inside `[-1, 1]³`.
    pub fn toy() -> Self {
        let sphere = |center, radius, density, albedo| Primitive {
            shape: Shape::Sphere { radius },
            center,
            density,
            albedo,
        };
        Self {
            primitives: vec![
                Primitive {
                    shape: Shape::Box { half: [0.75, 0.12, 0.75] },
                    center: [0.0, -0.55, 0.0],
                    density: 20.0,
                    albedo: [0.85, 0.78, 0.55],
                },
                sphere([-0.38, -0.08, 0.22], 0.35, 40.0, [0.9, 0.2, 0.15]),
                sphere([0.36, -0.13, -0.26], 0.3, 60.0, [0.15, 0.75, 0.3]),
                sphere([0.08, 0.42, 0.05], 0.25, 80.0, [0.2, 0.35, 0.95]),
            ],
            bounds: SceneBounds::cube(1.0),
            seed: 0,
        }
    }

    pub fn empty() -> Self {
        Self {
            primitives: Vec::new(),
            bounds: SceneBounds::cube(1.0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        SceneBounds::new(self.bounds.min, self.bounds.max)?;
        for (i, p) in self.primitives.iter().enumerate() {
            if !(p.density >= 0.0) {
                return Err(Error::invalid("scene", format!("primitive {i} has negative density")));
            }
            if p.albedo.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::invalid("scene", format!("primitive {i} albedo outside [0, 1]")));
            }
            let e = p.extent();
            if (0..3).any(|k| p.center[k] - e[k] < self.bounds.min[k] || p.center[k] + e[k] > self.bounds.max[k]) {
                return Err(Error::invalid("scene", format!("primitive {i} leaves the bounding box")));
            }
        }
        Ok(())
    }
}

/// Density and colour at `x`: densities of all primitives containing `x`
/// add up and the colour is their density-weighted mean albedo. Empty space
/// is `(0, black)`.
pub fn analytic_field(scene: &SceneSpec, x: &Vector3<f64>) -> (f64, [f64; 3]) {
    let mut sigma = 0.0;
    let mut rgb = [0.0; 3];
    for p in scene.primitives.iter().filter(|p| p.contains(x)) {
        sigma += p.density;
        for c in 0..3 {
            rgb[c] += p.density * p.albedo[c];
        }
    }
    if sigma > 0.0 {
        rgb.iter_mut().for_each(|c| *c /= sigma);
    }
    (sigma, rgb)
}

/// [`analytic_field`] exposed to the differentiable renderer. The output is
/// constant with respect to sample positions.
#[derive(Clone, Copy, Debug)]
pub struct AnalyticModel<'a> {
    pub scene: &'a SceneSpec,
}

impl RadianceModel for AnalyticModel<'_> {
    fn bounds(&self) -> SceneBounds {
        self.scene.bounds
    }

    fn bind(&self, _g: &mut Graph, _trainable: bool) -> Vec<Var> {
        Vec::new()
    }

    fn query(&self, g: &mut Graph, _params: &[Var], batch: &SampleBatch) -> Result<(Var, Var)> {
        let pts = g.value(batch.points).data();
        let n = pts.len() / 3;
        let mut sigma = Vec::with_capacity(n);
        let mut rgb = Vec::with_capacity(n * 3);
        for p in pts.chunks(3) {
            let (s, c) = analytic_field(self.scene, &Vector3::new(p[0], p[1], p[2]));
            sigma.push(s);
            rgb.extend(c);
        }
        Ok((g.constant(Tensor::new([n, 1], sigma)), g.constant(Tensor::new([n, 3], rgb))))
    }
}

/// Smallest quadrature size accepted by [`oracle_render`].
pub const MIN_ORACLE_SAMPLES: usize = 512;

/// Colour of one ray integrated with `samples` midpoint samples over `[near, far]`.
pub fn oracle_ray(scene: &SceneSpec, origin: &Vector3<f64>, dir: &Vector3<f64>, near: f64, far: f64, samples: usize) -> [f64; 3] {
    let step = (far - near) / samples as f64;
    let depths: Vec<f64> = (0..samples).map(|i| near + (i as f64 + 0.5) * step).collect();
    oracle_ray_at(scene, origin, dir, &depths, far)
}

/// Colour of one ray sampled at increasing `depths`, accumulating
/// transmittance as a running product. The last interval ends at `far`.
pub fn oracle_ray_at(scene: &SceneSpec, origin: &Vector3<f64>, dir: &Vector3<f64>, depths: &[f64], far: f64) -> [f64; 3] {
    let mut transmittance = 1.0;
    let mut out = [0.0; 3];
    for (i, &t) in depths.iter().enumerate() {
        let delta = depths.get(i + 1).copied().unwrap_or(far) - t;
        let (sigma, rgb) = analytic_field(scene, &(origin + t * dir));
        if sigma == 0.0 {
            continue;
        }
        let alpha = 1.0 - (-sigma * delta).exp();
        for c in 0..3 {
            out[c] += transmittance * alpha * rgb[c];
        }
        transmittance *= 1.0 - alpha;
    }
    out
}

/// Ground-truth image of `scene` seen from `pose`.
pub fn oracle_render(scene: &SceneSpec, pose: &Pose, k: &CameraIntrinsics, samples: usize) -> Result<ImageTensor> {
    if samples < MIN_ORACLE_SAMPLES {
        return Err(Error::invalid(
            "oracle samples",
            format!("{samples} < {MIN_ORACLE_SAMPLES}"),
        ));
    }
    k.validate()?;
    let rows: Vec<Vec<f64>> = (0..k.height)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(k.width * 3);
            for x in 0..k.width {
                let dir = (pose.rotation * k.camera_direction(x, y)).normalize();
                row.extend(oracle_ray(scene, &pose.translation, &dir, k.near, k.far, samples));
            }
            row
        })
        .collect();
    ImageTensor::new(k.width, k.height, rows.concat())
}

/// Convenience for the raw-vector pose used by the renderer.
pub fn oracle_render_vector(scene: &SceneSpec, pose: &PoseVector, k: &CameraIntrinsics, samples: usize) -> Result<ImageTensor> {
    oracle_render(scene, &Pose::from_vector(pose), k, samples)
}
