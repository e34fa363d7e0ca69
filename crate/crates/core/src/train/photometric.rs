use super::loss::photometric_loss;
use crate::error::{Error, Result};
use crate::field::{render_graph, sample_depths, CameraIntrinsics, RadianceModel, RenderOptions};
use crate::image::ImageTensor;
use crate::se3::PoseVector;
use photoreg_diff::{Graph, Tensor};
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

/// Pixels to render and their observed colours.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelBatch {
    pub pixels: Vec<(usize, usize)>,
    /// `3 · pixels.len()` values.
    pub target: Vec<f64>,
}

impl PixelBatch {
    /// Every pixel of `image`, row-major.
    pub fn full(image: &ImageTensor) -> Self {
        let pixels = (0..image.height())
            .flat_map(|y| (0..image.width()).map(move |x| (x, y)))
            .collect();
        Self {
            pixels,
            target: image.data().to_vec(),
        }
    }

    /// `count` distinct pixels drawn uniformly; the whole image if it has no more.
    pub fn sample<R: Rng + ?Sized>(image: &ImageTensor, count: usize, rng: &mut R) -> Self {
        let total = image.width() * image.height();
        if count >= total {
            return Self::full(image);
        }
        Self::at(image, index::sample(rng, total, count).into_iter().map(|i| (i % image.width(), i / image.width())).collect())
    }

    pub fn at(image: &ImageTensor, pixels: Vec<(usize, usize)>) -> Self {
        let target = pixels.iter().flat_map(|&(x, y)| image.pixel(x, y)).collect();
        Self { pixels, target }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Photometric loss of a render against a pixel batch, with the gradients
/// that were asked for.
#[derive(Clone, Debug, PartialEq)]
pub struct PhotometricPass {
    pub loss: f64,
    pub pose_grad: Option<PoseVector>,
    /// Flat, in the order of the model's bound parameters.
    pub param_grad: Option<Vec<f64>>,
}

/// Renders `batch` at the raw pose and evaluates the photometric loss,
/// splitting rays into chunks whose losses and gradients are summed in chunk
/// order, so the result does not depend on thread scheduling.
#[allow(clippy::too_many_arguments)]
pub fn photometric_pass<M: RadianceModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    pose: &PoseVector,
    k: &CameraIntrinsics,
    batch: &PixelBatch,
    opts: &RenderOptions,
    rng: &mut R,
    want_pose: bool,
    want_params: bool,
) -> Result<PhotometricPass> {
    opts.validate()?;
    if batch.is_empty() || batch.target.len() != 3 * batch.len() {
        return Err(Error::Shape {
            what: "pixel batch",
            expected: "a non-empty batch with one RGB target per pixel".into(),
            got: format!("{} pixels, {} target values", batch.len(), batch.target.len()),
        });
    }
    let n = batch.len();
    let depths = sample_depths(k, n, opts, rng);
    let parts: Vec<PhotometricPass> = batch
        .pixels
        .par_chunks(opts.chunk)
        .zip(batch.target.par_chunks(opts.chunk * 3))
        .zip(depths.par_chunks(opts.chunk * opts.bins))
        .map(|((px, target), d)| {
            let mut g = Graph::new();
            let params = model.bind(&mut g, want_params);
            let pose_var = if want_pose {
                g.leaf(Tensor::from_vec(pose.to_vec()))
            } else {
                g.constant(Tensor::from_vec(pose.to_vec()))
            };
            let vars = render_graph(&mut g, model, &params, pose_var, k, px, d, opts)?;
            let t = g.constant(Tensor::new([px.len(), 3], target.to_vec()));
            let chunk_loss = photometric_loss(&mut g, vars.rgb, t)?;
            // chunk means are reweighted so their sum is the mean over the batch
            let loss = g.scale(chunk_loss, px.len() as f64 / n as f64);
            let value = g.value(loss).item();
            if want_pose || want_params {
                g.backward(loss)?;
            }
            let pose_grad = want_pose.then(|| g.grad(pose_var).map_or([0.0; 12], |v| v.try_into().expect("12 entries")));
            let param_grad = want_params.then(|| {
                params
                    .iter()
                    .flat_map(|&p| match g.grad(p) {
                        Some(v) => v.to_vec(),
                        None => vec![0.0; g.value(p).len()],
                    })
                    .collect()
            });
            Ok(PhotometricPass {
                loss: value,
                pose_grad,
                param_grad,
            })
        })
        .collect::<Result<_>>()?;
    let mut total = PhotometricPass {
        loss: 0.0,
        pose_grad: want_pose.then_some([0.0; 12]),
        param_grad: None,
    };
    for p in parts {
        total.loss += p.loss;
        if let (Some(acc), Some(g)) = (total.pose_grad.as_mut(), p.pose_grad) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        if let Some(g) = p.param_grad {
            match total.param_grad.as_mut() {
                None => total.param_grad = Some(g),
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            }
        }
    }
    Ok(total)
}
