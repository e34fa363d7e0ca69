use super::{stratified_depths, CameraIntrinsics, SceneBounds};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::se3::PoseVector;
use photoreg_diff::{Graph, Tensor, Var};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Guard on the expected depth in the disparity quotient.
pub const DISPARITY_EPS: f64 = 1e-10;
/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderOptions {
    pub bins: usize,
    /// Draw one random depth per bin instead of the bin midpoint.
    pub jitter: bool,
    /// Evaluate the model only at samples inside its scene bounds; the rest get zero density.
    pub clip_to_bounds: bool,
    /// Rays per graph when rendering in parallel.
    pub chunk: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            bins: 64,
            jitter: false,
            clip_to_bounds: true,
            chunk: 128,
        }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::invalid("render bins", format!("{} < 2", self.bins)));
        }
        if self.chunk == 0 {
            return Err(Error::invalid("render chunk", "must be positive"));
        }
        Ok(())
    }
}

/// Samples handed to a [`RadianceModel`].
pub struct SampleBatch {
    /// World-space sample positions `[n, 3]`.
    pub points: Var,
    /// Positions mapped onto `[-1, 1]³` by the model's bounds `[n, 3]`.
    pub normalized: Var,
    /// Unit ray directions `[rays, 3]`.
    pub directions: Var,
    /// Row of `directions` each sample belongs to.
    pub sample_ray: Vec<usize>,
}

/// Anything that maps samples to density and colour on a graph.
pub trait RadianceModel: Sync {
    fn bounds(&self) -> SceneBounds;

    /// Places the model parameters on `g`, as leaves when `trainable`.
    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var>;

    /// Density `[n, 1]` and colour `[n, 3]`.
    fn query(&self, g: &mut Graph, params: &[Var], batch: &SampleBatch) -> Result<(Var, Var)>;
}

/// Graph handles for a batch of rendered rays.
pub struct RenderVars {
    /// `[rays, 3]`.
    pub rgb: Var,
    /// `[rays, bins]`.
    pub weights: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub rgb: Vec<[f64; 3]>,
    pub disparity: Vec<f64>,
    pub accumulation: Vec<f64>,
    /// Row-major `[rays, bins]`.
    pub weights: Vec<f64>,
    pub bins: usize,
}

impl RenderOutput {
    fn with_bins(bins: usize) -> Self {
        Self {
            rgb: Vec::new(),
            disparity: Vec::new(),
            accumulation: Vec::new(),
            weights: Vec::new(),
            bins,
        }
    }

    fn extend(&mut self, other: RenderOutput) {
        self.rgb.extend(other.rgb);
        self.disparity.extend(other.disparity);
        self.accumulation.extend(other.accumulation);
        self.weights.extend(other.weights);
    }

    /// Reassembles a full-frame render (pixels in row-major order).
    pub fn image(&self, width: usize, height: usize) -> Result<ImageTensor> {
        ImageTensor::new(width, height, self.rgb.iter().flatten().copied().collect())
    }

    pub fn rgb_flat(&self) -> Vec<f64> {
        self.rgb.iter().flatten().copied().collect()
    }
}

/// Depths for `rays` rays, row-major `[rays, bins]`.
pub fn sample_depths<R: Rng + ?Sized>(k: &CameraIntrinsics, rays: usize, opts: &RenderOptions, rng: &mut R) -> Vec<f64> {
    if opts.jitter {
        (0..rays)
            .flat_map(|_| stratified_depths(k.near, k.far, opts.bins, Some(&mut *rng)))
            .collect()
    } else {
        let row = stratified_depths::<R>(k.near, k.far, opts.bins, None);
        (0..rays).flat_map(|_| row.iter().copied()).collect()
    }
}

/// Emission-absorption compositing of `bins` samples per ray.
///
/// `sigma` is `[rays, bins]`, `rgb` is `[rays·bins, 3]` and `depths` is
/// row-major `[rays, bins]`; the last interval of each ray ends at `far`.
pub fn composite(g: &mut Graph, sigma: Var, rgb: Var, depths: &[f64], bins: usize, far: f64) -> RenderVars {
    let rays = depths.len() / bins;
    let mut delta = Vec::with_capacity(depths.len());
    for row in depths.chunks(bins) {
        delta.extend(row.windows(2).map(|w| w[1] - w[0]));
        delta.push(far - row[bins - 1]);
    }
    let delta = g.constant(Tensor::new([rays, bins], delta));
    let optical = g.mul(sigma, delta);
    let neg = g.neg(optical);
    let survive = g.exp(neg);
    let lost = g.neg(survive);
    let alpha = g.offset(lost, 1.0);
    let before = g.cumsum_rows(optical, true);
    let before = g.neg(before);
    let transmittance = g.exp(before);
    let weights = g.mul(transmittance, alpha);
    let flat = g.reshape(weights, &[rays * bins]);
    let weighted = g.scale_rows(rgb, flat);
    let rgb = g.sum_groups(weighted, bins);
    RenderVars { rgb, weights }
}

/// Renders `pixels` from the raw 12-entry `pose` node (row-major `[R | t]`)
/// with the given per-ray depths, differentiably in the pose and `params`.
#[allow(clippy::too_many_arguments)]
pub fn render_graph<M: RadianceModel + ?Sized>(
    g: &mut Graph,
    model: &M,
    params: &[Var],
    pose: Var,
    k: &CameraIntrinsics,
    pixels: &[(usize, usize)],
    depths: &[f64],
    opts: &RenderOptions,
) -> Result<RenderVars> {
    let (rays, bins) = (pixels.len(), opts.bins);
    if depths.len() != rays * bins {
        return Err(Error::Shape {
            what: "sample depths",
            expected: (rays * bins).to_string(),
            got: depths.len().to_string(),
        });
    }
    if g.value(pose).len() != 12 {
        return Err(Error::Shape {
            what: "pose vector",
            expected: "12".into(),
            got: g.value(pose).len().to_string(),
        });
    }
    let mut cam = Vec::with_capacity(rays * 3);
    for &(x, y) in pixels {
        k.check_pixel(x, y)?;
        cam.extend(k.camera_direction(x, y).iter());
    }
    let cam = g.constant(Tensor::new([rays, 3], cam));
    let rot_t = g.gather(pose, &[0, 4, 8, 1, 5, 9, 2, 6, 10]);
    let rot_t = g.reshape(rot_t, &[3, 3]);
    let dirs = g.matmul(cam, rot_t);
    let sq = g.mul(dirs, dirs);
    let len2 = g.row_sum(sq);
    let inv_len = g.powf(len2, -0.5);
    let dirs = g.scale_rows(dirs, inv_len);

    let origin = g.gather(pose, &[3, 7, 11]);
    let origin = g.reshape(origin, &[1, 3]);
    let origins = g.repeat_rows(origin, rays * bins);
    let along = g.repeat_rows(dirs, bins);
    let depth_var = g.constant(Tensor::new([rays * bins], depths.to_vec()));
    let offsets = g.scale_rows(along, depth_var);
    let points = g.add(origins, offsets);

    let bounds = model.bounds();
    let (c, h) = (bounds.center(), bounds.half_extent());
    let mut diag = vec![0.0; 9];
    for i in 0..3 {
        diag[4 * i] = 1.0 / h[i];
    }
    let diag = g.constant(Tensor::new([3, 3], diag));
    let shift = g.constant(Tensor::new([3], (0..3).map(|i| -c[i] / h[i]).collect()));
    let scaled = g.matmul(points, diag);
    let normalized = g.add_row_bias(scaled, shift);

    let n = rays * bins;
    let keep: Vec<usize> = if opts.clip_to_bounds {
        g.value(normalized)
            .data()
            .chunks(3)
            .enumerate()
            .filter(|(_, p)| p.iter().all(|v| v.abs() <= 1.0))
            .map(|(i, _)| i)
            .collect()
    } else {
        (0..n).collect()
    };

    let (sigma, color) = if keep.is_empty() {
        (g.constant(Tensor::zeros([n, 1])), g.constant(Tensor::zeros([n, 3])))
    } else {
        let all = keep.len() == n;
        let batch = SampleBatch {
            points: if all { points } else { g.gather_rows(points, &keep) },
            normalized: if all { normalized } else { g.gather_rows(normalized, &keep) },
            directions: dirs,
            sample_ray: keep.iter().map(|i| i / bins).collect(),
        };
        let (s, c) = model.query(g, params, &batch)?;
        if all {
            (s, c)
        } else {
            (g.scatter_rows(s, &keep, n), g.scatter_rows(c, &keep, n))
        }
    };
    let sigma = g.reshape(sigma, &[rays, bins]);
    Ok(composite(g, sigma, color, depths, bins, k.far))
}

fn chunk_output(g: &Graph, vars: &RenderVars, depths: &[f64], bins: usize) -> RenderOutput {
    let weights = g.value(vars.weights).data().to_vec();
    let mut out = RenderOutput::with_bins(bins);
    out.rgb = g.value(vars.rgb).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    for (w, d) in weights.chunks(bins).zip(depths.chunks(bins)) {
        let acc: f64 = w.iter().sum();
        let depth: f64 = w.iter().zip(d).map(|(a, b)| a * b).sum();
        out.accumulation.push(acc);
        out.disparity.push(acc / depth.max(DISPARITY_EPS));
    }
    out.weights = weights;
    out
}

/// Renders `pixels` at a fixed pose, splitting rays into chunks evaluated in
/// parallel and reassembled in input order. `rng` is only drawn from when
/// `opts.jitter` is set.
pub fn render<M: RadianceModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    pose: &PoseVector,
    k: &CameraIntrinsics,
    pixels: &[(usize, usize)],
    opts: &RenderOptions,
    rng: &mut R,
) -> Result<RenderOutput> {
    opts.validate()?;
    k.validate()?;
    let depths = sample_depths(k, pixels.len(), opts, rng);
    let parts: Vec<RenderOutput> = pixels
        .par_chunks(opts.chunk)
        .zip(depths.par_chunks(opts.chunk * opts.bins))
        .map(|(px, d)| {
            let mut g = Graph::new();
            let params = model.bind(&mut g, false);
            let pose = g.constant(Tensor::from_vec(pose.to_vec()));
            let vars = render_graph(&mut g, model, &params, pose, k, px, d, opts)?;
            Ok(chunk_output(&g, &vars, d, opts.bins))
        })
        .collect::<Result<_>>()?;
    let mut out = RenderOutput::with_bins(opts.bins);
    for p in parts {
        out.extend(p);
    }
    Ok(out)
}

/// `−10 · log10(MSE)` over all values, capped at [`PSNR_CAP`].
pub fn psnr(img: &[f64], reference: &[f64]) -> Result<f64> {
    if img.len() != reference.len() || img.is_empty() {
        return Err(Error::Shape {
            what: "psnr inputs",
            expected: reference.len().to_string(),
            got: img.len().to_string(),
        });
    }
    let mse = img.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / img.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}
