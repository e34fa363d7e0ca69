//! Novel-view synthesis: ray generation, the radiance-field MLP and the
//! emission-absorption renderer.
//!
//! Cameras are camera-to-world with `-z` forward and `+y` up; pixel `(x, y)`
//! is sampled through its centre `(x + 0.5, y + 0.5)`.

mod mlp;
mod render;

pub use mlp::{FieldConfig, NeuralField, RadianceField};
pub use render::{
    composite, psnr, render, render_graph, sample_depths, RadianceModel, RenderOptions, RenderOutput, RenderVars,
    SampleBatch, DISPARITY_EPS, PSNR_CAP,
};

use crate::error::{Error, Result};
use crate::se3::Pose;
use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl CameraIntrinsics {
    /// Principal point at the image centre.
    pub fn new(focal: f64, width: usize, height: usize, near: f64, far: f64) -> Result<Self> {
        let k = Self {
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            near,
            far,
        };
        k.validate()?;
        Ok(k)
    }

    /// Focal length from a horizontal field of view in degrees.
    pub fn from_fov(fov_x_deg: f64, width: usize, height: usize, near: f64, far: f64) -> Result<Self> {
        let focal = width as f64 / 2.0 / (fov_x_deg.to_radians() / 2.0).tan();
        Self::new(focal, width, height, near, far)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(Error::invalid("intrinsics", format!("focal length {} must be > 0", self.focal)));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid(
                "intrinsics",
                format!("bounds must satisfy 0 < near < far, got [{}, {}]", self.near, self.far),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("intrinsics", "image size must be non-zero"));
        }
        Ok(())
    }

    /// Same field of view at another resolution.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            focal: self.focal * sx,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..*self
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Every pixel, row-major.
    pub fn all_pixels(&self) -> Vec<(usize, usize)> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .collect()
    }

    /// Unnormalised camera-space direction through the centre of pixel `(x, y)`.
    pub fn camera_direction(&self, x: usize, y: usize) -> Vector3<f64> {
        Vector3::new(
            (x as f64 + 0.5 - self.cx) / self.focal,
            -(y as f64 + 0.5 - self.cy) / self.focal,
            -1.0,
        )
    }

    /// Continuous image coordinates of a camera-space point in front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z >= 0.0 {
            return None;
        }
        let depth = -p.z;
        Some((self.cx + self.focal * p.x / depth, self.cy - self.focal * p.y / depth))
    }

    pub fn check_pixel(&self, x: usize, y: usize) -> Result<()> {
        if x >= self.width || y >= self.height {
            return Err(Error::PixelOutOfBounds {
                x,
                y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }
}

/// Axis-aligned box mapped onto `[-1, 1]³` before encoding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SceneBounds {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|i| !(max[i] > min[i])) {
            return Err(Error::invalid("scene bounds", format!("{min:?} .. {max:?} is empty")));
        }
        Ok(Self { min, max })
    }

    pub fn cube(half: f64) -> Self {
        Self {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| 0.5 * (self.min[i] + self.max[i]))
    }

    pub fn half_extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| 0.5 * (self.max[i] - self.min[i]))
    }

    pub fn diameter(&self) -> f64 {
        let h = self.half_extent();
        2.0 * (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt()
    }

    pub fn normalize(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let (c, h) = (self.center(), self.half_extent());
        Vector3::new((p.x - c[0]) / h[0], (p.y - c[1]) / h[1], (p.z - c[2]) / h[2])
    }

    /// Bounds after the rigid map `p ↦ T p`, as the box around the moved corners.
    pub fn transformed(&self, t: &Pose) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for corner in 0..8 {
            let p = Vector3::new(
                if corner & 1 == 0 { self.min[0] } else { self.max[0] },
                if corner & 2 == 0 { self.min[1] } else { self.max[1] },
                if corner & 4 == 0 { self.min[2] } else { self.max[2] },
            );
            let q = t.transform_point(&p);
            for i in 0..3 {
                min[i] = min[i].min(q[i]);
                max[i] = max[i].max(q[i]);
            }
        }
        Self { min, max }
    }

    pub fn padded(&self, fraction: f64) -> Self {
        let h = self.half_extent();
        Self {
            min: [0, 1, 2].map(|i| self.min[i] - fraction * h[i]),
            max: [0, 1, 2].map(|i| self.max[i] + fraction * h[i]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn at(&self, depth: f64) -> Vector3<f64> {
        self.origin + depth * self.direction
    }
}

/// World-space rays through the given `(x, y)` pixels.
pub fn pixel_rays(pose: &Pose, k: &CameraIntrinsics, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
    pixels
        .iter()
        .map(|&(x, y)| {
            k.check_pixel(x, y)?;
            Ok(Ray {
                origin: pose.translation,
                direction: (pose.rotation * k.camera_direction(x, y)).normalize(),
            })
        })
        .collect()
}

/// `bins` depths in `[near, far]`, one per equal-width bin: the bin midpoint,
/// or a uniform draw inside the bin when `jitter` supplies a generator.
pub fn stratified_depths<R: Rng + ?Sized>(near: f64, far: f64, bins: usize, jitter: Option<&mut R>) -> Vec<f64> {
    let width = (far - near) / bins as f64;
    match jitter {
        None => (0..bins).map(|i| near + (i as f64 + 0.5) * width).collect(),
        Some(rng) => (0..bins)
            .map(|i| near + (i as f64 + rng.random::<f64>()) * width)
            .collect(),
    }
}
