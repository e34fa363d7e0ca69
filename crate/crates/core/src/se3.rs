//! Rigid camera poses `[R | t]` stored as camera-to-world transforms.

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Row-major flattening of the 3×4 matrix `[R | t]`.
pub type PoseVector = [f64; 12];

/// Smallest singular value accepted by [`orthogonalize`].
pub const MIN_SINGULAR_VALUE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "PoseVector", from = "PoseVector")]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl From<Pose> for PoseVector {
    fn from(p: Pose) -> Self {
        p.flatten()
    }
}

impl From<PoseVector> for Pose {
    fn from(v: PoseVector) -> Self {
        Pose::from_vector(&v)
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    /// Camera at `eye` looking at `target`, `-z` forward and `+y` up.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let back = (eye - target).normalize();
        let mut right = up.cross(&back);
        if right.norm() < 1e-9 {
            right = Vector3::x().cross(&back);
        }
        let right = right.normalize();
        let true_up = back.cross(&right);
        let rotation = Matrix3::from_columns(&[right, true_up, back]);
        Self::new(rotation, eye)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    /// Inverse of a rigid transform (assumes an orthonormal rotation).
    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn flatten(&self) -> PoseVector {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        ]
    }

    /// Reads the 3×4 block verbatim; the rotation block is not checked.
    pub fn from_vector(v: &PoseVector) -> Pose {
        Pose::new(
            Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
            Vector3::new(v[3], v[7], v[11]),
        )
    }

    /// Reads a pose vector, optionally projecting the rotation block onto SO(3).
    pub fn unflatten(v: &PoseVector, orthogonalize_rotation: bool) -> Result<Pose> {
        let mut pose = Pose::from_vector(v);
        if orthogonalize_rotation {
            pose.rotation = orthogonalize(&pose.rotation)?;
        }
        Ok(pose)
    }

    /// `‖RᵀR − I‖_F`.
    pub fn orthogonality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.orthogonality_error() <= tol && (self.rotation.determinant() - 1.0).abs() <= tol
    }
}

/// Nearest rotation in Frobenius norm: `U Vᵀ` from `SVD(raw) = U Σ Vᵀ`, with
/// the column of `U` paired with the smallest singular value negated when
/// needed so that `det = +1`.
pub fn orthogonalize(raw: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if !raw.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("rotation block", "non-finite entries"));
    }
    let svd = raw.svd(true, true);
    let (mut u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = svd.singular_values;
    let smallest = (0..3)
        .min_by(|&a, &b| sv[a].total_cmp(&sv[b]))
        .expect("three singular values");
    if sv[smallest] < MIN_SINGULAR_VALUE {
        return Err(Error::DegenerateRotation(sv[smallest]));
    }
    if (u * v_t).determinant() < 0.0 {
        u.column_mut(smallest).neg_mut();
    }
    Ok(u * v_t)
}

/// Geodesic angle between two rotations, in degrees, within `[0, 180]`.
///
/// Evaluates `arccos((trace(RaᵀRb) − 1) / 2)` through `atan2` of the
/// relative rotation's sine and cosine, which keeps precision near zero.
pub fn rotation_error_deg(a: &Pose, b: &Pose) -> f64 {
    let rel = a.rotation.transpose() * b.rotation;
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let skew = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin = (skew.norm() / 2.0).min(1.0);
    sin.atan2(cos).to_degrees()
}

/// Euclidean distance between camera centres.
pub fn translation_error(a: &Pose, b: &Pose) -> f64 {
    (a.translation - b.translation).norm()
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    let [x, y, z]: [f64; 3] = UnitSphere.sample(rng);
    Vector3::new(x, y, z)
}

/// Offsets the camera centre by `trans_mag` along a uniformly random
/// direction and rotates it by `rot_mag_deg` about a uniformly random axis,
/// applied on the left of the rotation.
pub fn perturb<R: Rng + ?Sized>(pose: &Pose, trans_mag: f64, rot_mag_deg: f64, rng: &mut R) -> Pose {
    let dir = random_unit(rng);
    let axis = Unit::new_normalize(random_unit(rng));
    let mut out = *pose;
    if trans_mag != 0.0 {
        out.translation += dir * trans_mag;
    }
    if rot_mag_deg != 0.0 {
        let rot = Rotation3::from_axis_angle(&axis, rot_mag_deg.to_radians());
        out.rotation = rot.matrix() * pose.rotation;
    }
    out
}

/// Shifts all poses so their camera centres have zero mean.
///
/// Returns the recentred poses and the rigid transform `T` applied on the
/// left (`P' = T ∘ P`); `T.inverse()` maps results back.
pub fn recenter_poses(poses: &[Pose]) -> Result<(Vec<Pose>, Pose)> {
    if poses.is_empty() {
        return Err(Error::Empty("pose list"));
    }
    let mean = poses.iter().map(|p| p.translation).sum::<Vector3<f64>>() / poses.len() as f64;
    let transform = Pose::from_translation(-mean);
    let out = poses.iter().map(|p| transform.compose(p)).collect();
    Ok((out, transform))
}

/// One pose per line, twelve whitespace-separated reals, row-major `[R | t]`.
pub fn format_poses(poses: &[Pose]) -> String {
    let mut s = String::new();
    for p in poses {
        let v = p.flatten();
        let line: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

pub fn parse_poses(text: &str, origin: &Path) -> Result<Vec<Pose>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                reason: format!("{e}"),
            })?;
        let v: PoseVector = vals.try_into().map_err(|v: Vec<f64>| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            reason: format!("expected 12 values, found {}", v.len()),
        })?;
        out.push(Pose::from_vector(&v));
    }
    Ok(out)
}
