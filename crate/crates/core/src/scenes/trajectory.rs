use super::SceneSpec;
use crate::error::{Error, Result};
use crate::se3::Pose;
use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TrajectoryKind {
    /// Evenly spaced on a horizontal ring around the scene centre, looking inward.
    Orbit { radius: f64, height: f64 },
    /// Forward-facing: centres on a horizontal segment in front of the scene,
    /// all looking at its centre.
    Sweep {
        distance: f64,
        half_width: f64,
        height: f64,
    },
    /// Random walk of the camera centre inside a spherical shell around the
    /// scene, above its centre, while the gaze point random-walks inside the
    /// central half of the bounds.
    Walk {
        inner_radius: f64,
        outer_radius: f64,
        step: f64,
        gaze_step: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub count: usize,
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("trajectory", "count must be at least 1"));
        }
        let bad = |r: &str| Err(Error::invalid("trajectory", r.to_string()));
        match self.kind {
            TrajectoryKind::Orbit { radius, .. } if !(radius > 0.0) => bad("orbit radius must be positive"),
            TrajectoryKind::Sweep { distance, .. } if !(distance > 0.0) => bad("sweep distance must be positive"),
            TrajectoryKind::Walk {
                inner_radius,
                outer_radius,
                step,
                gaze_step,
            } if !(inner_radius > 0.0 && outer_radius > inner_radius && step > 0.0 && gaze_step >= 0.0) => {
                bad("walk needs 0 < inner_radius < outer_radius and positive steps")
            }
            _ => Ok(()),
        }
    }
}

fn unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    let [x, y, z]: [f64; 3] = UnitSphere.sample(rng);
    Vector3::new(x, y, z)
}

/// Camera poses for `spec`; the rng is only used by walks.
pub fn generate_trajectory<R: Rng + ?Sized>(scene: &SceneSpec, spec: &TrajectorySpec, rng: &mut R) -> Result<Vec<Pose>> {
    spec.validate()?;
    let c = Vector3::from(scene.bounds.center());
    let up = Vector3::y();
    let n = spec.count;
    let poses = match spec.kind {
        TrajectoryKind::Orbit { radius, height } => (0..n)
            .map(|i| {
                let a = TAU * i as f64 / n as f64;
                let eye = c + Vector3::new(radius * a.sin(), height, radius * a.cos());
                Pose::look_at(eye, c, up)
            })
            .collect(),
        TrajectoryKind::Sweep {
            distance,
            half_width,
            height,
        } => (0..n)
            .map(|i| {
                let s = if n == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (n - 1) as f64 };
                let eye = c + Vector3::new(s * half_width, height, distance);
                Pose::look_at(eye, c, up)
            })
            .collect(),
        TrajectoryKind::Walk {
            inner_radius,
            outer_radius,
            step,
            gaze_step,
        } => {
            let reach = scene.bounds.half_extent().map(|h| 0.5 * h);
            let admissible = |p: &Vector3<f64>| {
                let r = (p - c).norm();
                r >= inner_radius && r <= outer_radius && p.y >= c.y
            };
            let mid = 0.5 * (inner_radius + outer_radius);
            let mut eye = loop {
                let d = unit(rng);
                let p = c + mid * Vector3::new(d.x, d.y.abs(), d.z);
                if admissible(&p) {
                    break p;
                }
            };
            let mut gaze = c;
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                if i > 0 {
                    for _ in 0..64 {
                        let p = eye + step * rng.random_range(0.5..=1.0) * unit(rng);
                        if admissible(&p) {
                            eye = p;
                            break;
                        }
                    }
                    gaze += gaze_step * rng.random_range(0.0..=1.0) * unit(rng);
                    for k in 0..3 {
                        gaze[k] = gaze[k].clamp(c[k] - reach[k], c[k] + reach[k]);
                    }
                }
                out.push(Pose::look_at(eye, gaze, up));
            }
            out
        }
    };
    Ok(poses)
}
