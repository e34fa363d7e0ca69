//! Absolute pose regression: a strided convolutional trunk, global average
//! pooling and one fully connected layer producing the 12 entries of `[R | t]`.

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::se3::{orthogonalize, Pose, PoseVector};
use photoreg_diff::{ConvGeom, Graph, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const CONV: ConvGeom = ConvGeom {
    kernel: 3,
    stride: 2,
    padding: 1,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressorConfig {
    pub input_width: usize,
    pub input_height: usize,
    /// Output channels of each 3×3, stride-2 convolution.
    pub channels: Vec<usize>,
    /// Half-width of the uniform initialisation of the output layer weights.
    pub head_init: f64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            input_width: 64,
            input_height: 48,
            channels: vec![16, 32, 64, 128],
            head_init: 1e-3,
        }
    }
}

impl RegressorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.input_height == 0 {
            return Err(Error::invalid("regressor", "input size must be non-zero"));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::invalid("regressor", "needs at least one convolution with non-zero width"));
        }
        Ok(())
    }
}

/// Mean of the flattened poses with the rotation block projected onto SO(3).
/// When the averaged rotation is too degenerate to project (a full orbit
/// cancels two of its axes), the input rotation nearest to it is used.
pub fn mean_pose(poses: &[Pose]) -> Result<Pose> {
    if poses.is_empty() {
        return Err(Error::Empty("pose list"));
    }
    let mut acc = [0.0; 12];
    for p in poses {
        for (a, v) in acc.iter_mut().zip(p.flatten()) {
            *a += v;
        }
    }
    let mean = acc.map(|a| a / poses.len() as f64);
    let mut pose = Pose::from_vector(&mean);
    pose.rotation = match orthogonalize(&pose.rotation) {
        Ok(r) => r,
        Err(_) => {
            let target = pose.rotation;
            poses
                .iter()
                .map(|p| p.rotation)
                .min_by(|a, b| (a - target).norm().total_cmp(&(b - target).norm()))
                .expect("non-empty")
        }
    };
    Ok(pose)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseRegressor {
    pub config: RegressorConfig,
    pub params: ParamSet,
}

impl PoseRegressor {
    /// He-uniform convolutions with zero biases; output weights uniform in
    /// `±head_init` and output bias `flatten(start)`.
    pub fn new<R: Rng + ?Sized>(config: RegressorConfig, start: &Pose, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut ci = 3;
        for (i, &co) in config.channels.iter().enumerate() {
            let fan_in = CONV.kernel * CONV.kernel * ci;
            let limit = (6.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * co).map(|_| rng.random_range(-limit..limit)).collect();
            params.push(format!("conv.{i}.w"), Tensor::new([fan_in, co], w));
            params.push(format!("conv.{i}.b"), Tensor::zeros([co]));
            ci = co;
        }
        let h = config.head_init;
        let w = (0..ci * 12)
            .map(|_| if h > 0.0 { rng.random_range(-h..h) } else { 0.0 })
            .collect();
        params.push("fc.w", Tensor::new([ci, 12], w));
        params.push("fc.b", Tensor::new([12], start.flatten().to_vec()));
        Ok(Self { config, params })
    }

    /// Every weight zero, output bias `flatten(start)`.
    pub fn constant(config: RegressorConfig, start: &Pose) -> Result<Self> {
        let mut r = Self::new(config, start, &mut ChaCha8Rng::seed_from_u64(0))?;
        let bias = r.params.range(r.params.slot("fc.b").expect("fc.b"));
        for (i, v) in r.params.values_mut().iter_mut().enumerate() {
            if !bias.contains(&i) {
                *v = 0.0;
            }
        }
        Ok(r)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Slot of the output layer's weight matrix.
    pub fn head_weight_slot(&self) -> usize {
        self.params.slot("fc.w").expect("fc.w")
    }

    /// Stacks images into an NHWC batch, checking their size.
    pub fn batch(&self, images: &[&ImageTensor]) -> Result<Tensor> {
        let (w, h) = (self.config.input_width, self.config.input_height);
        let mut data = Vec::with_capacity(images.len() * w * h * 3);
        for img in images {
            if img.width() != w || img.height() != h {
                return Err(Error::Shape {
                    what: "regressor input",
                    expected: format!("{w}x{h}"),
                    got: format!("{}x{}", img.width(), img.height()),
                });
            }
            data.extend_from_slice(img.data());
        }
        Ok(Tensor::new([images.len(), h, w, 3], data))
    }

    /// Raw `[b, 12]` output for an NHWC batch node.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], images: Var) -> Result<Var> {
        let n = self.config.channels.len();
        if vars.len() != 2 * n + 2 {
            return Err(Error::Shape {
                what: "regressor parameter tensors",
                expected: (2 * n + 2).to_string(),
                got: vars.len().to_string(),
            });
        }
        let shape = g.value(images).shape();
        if shape.len() != 4 || shape[1] != self.config.input_height || shape[2] != self.config.input_width || shape[3] != 3 {
            return Err(Error::Shape {
                what: "regressor input",
                expected: format!("[b, {}, {}, 3]", self.config.input_height, self.config.input_width),
                got: format!("{shape:?}"),
            });
        }
        let mut h = images;
        for i in 0..n {
            let y = g.conv2d(h, vars[2 * i], vars[2 * i + 1], CONV);
            h = g.relu(y);
        }
        let pooled = g.spatial_mean(h);
        let out = g.matmul(pooled, vars[2 * n]);
        Ok(g.add_row_bias(out, vars[2 * n + 1]))
    }

    pub fn forward_raw(&self, image: &ImageTensor) -> Result<PoseVector> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(self.batch(&[image])?);
        let y = self.forward(&mut g, &vars, x)?;
        Ok(g.value(y).data().try_into().expect("twelve outputs"))
    }

    /// Raw output with the rotation block projected onto SO(3).
    pub fn predict(&self, image: &ImageTensor) -> Result<Pose> {
        Pose::unflatten(&self.forward_raw(image)?, true)
    }
}
