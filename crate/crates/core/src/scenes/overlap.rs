use crate::error::{Error, Result};
use crate::field::CameraIntrinsics;
use crate::se3::Pose;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Monte Carlo estimate of the fraction of camera `a`'s viewing frustum
/// (between the near and far bounds) that camera `b` also sees.
///
/// Points are drawn uniformly by volume: a uniform pixel position and a
/// depth with density proportional to its square.
pub fn frustum_overlap<R: Rng + ?Sized>(a: &Pose, b: &Pose, k: &CameraIntrinsics, n_points: usize, rng: &mut R) -> Result<f64> {
    if n_points == 0 {
        return Err(Error::invalid("overlap samples", "must be at least 1"));
    }
    let to_b = b.inverse();
    let (n3, f3) = (k.near.powi(3), k.far.powi(3));
    let mut inside = 0usize;
    for _ in 0..n_points {
        let u = rng.random_range(0.0..k.width as f64);
        let v = rng.random_range(0.0..k.height as f64);
        let z = (n3 + rng.random::<f64>() * (f3 - n3)).cbrt();
        let cam = Vector3::new((u - k.cx) / k.focal * z, -(v - k.cy) / k.focal * z, -z);
        let q = to_b.transform_point(&a.transform_point(&cam));
        let depth = -q.z;
        if depth < k.near || depth > k.far {
            continue;
        }
        if let Some((x, y)) = k.project(&q) {
            if (0.0..k.width as f64).contains(&x) && (0.0..k.height as f64).contains(&y) {
                inside += 1;
            }
        }
    }
    Ok(inside as f64 / n_points as f64)
}

/// The smaller of the two directed overlaps.
pub fn symmetric_overlap<R: Rng + ?Sized>(a: &Pose, b: &Pose, k: &CameraIntrinsics, n_points: usize, rng: &mut R) -> Result<f64> {
    let ab = frustum_overlap(a, b, k, n_points, rng)?;
    let ba = frustum_overlap(b, a, k, n_points, rng)?;
    Ok(ab.min(ba))
}

/// Indices of the poses whose symmetric overlap with `poses[reference]`
/// reaches `threshold`, in order. Each comparison draws from its own
/// generator seeded by `seed` and the index, so the result does not depend
/// on evaluation order.
pub fn select_by_overlap(
    poses: &[Pose],
    reference: usize,
    k: &CameraIntrinsics,
    threshold: f64,
    n_points: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let r = poses
        .get(reference)
        .ok_or_else(|| Error::invalid("overlap reference", format!("{reference} out of range")))?;
    let mut out = Vec::new();
    for (i, p) in poses.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        if i == reference || symmetric_overlap(r, p, k, n_points, &mut rng)? >= threshold {
            out.push(i);
        }
    }
    Ok(out)
}
