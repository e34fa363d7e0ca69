use super::render::{RadianceModel, SampleBatch};
use super::SceneBounds;
use crate::encoding::{encode, EncodingSchedule};
use crate::error::{Error, Result};
use photoreg_diff::{Graph, ParamSet, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    /// Trunk layers.
    pub depth: usize,
    pub width: usize,
    /// Trunk layer whose input also receives the encoded position; ignored if `>= depth`.
    pub skip: Option<usize>,
    /// Hidden width of the colour branch.
    pub color_width: usize,
    pub position_bands: usize,
    pub direction_bands: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 64,
            skip: Some(4),
            color_width: 32,
            position_bands: 8,
            direction_bands: 4,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.color_width == 0 {
            return Err(Error::invalid("field", "depth, width and color_width must be positive"));
        }
        if self.position_bands == 0 || self.direction_bands == 0 {
            return Err(Error::invalid("field", "encoding band counts must be positive"));
        }
        Ok(())
    }

    pub fn position_dim(&self) -> usize {
        3 * (1 + 2 * self.position_bands)
    }

    pub fn direction_dim(&self) -> usize {
        3 * (1 + 2 * self.direction_bands)
    }

    fn skip_at(&self, layer: usize) -> bool {
        layer > 0 && self.skip == Some(layer)
    }

    /// `(name, fan_in, fan_out, he_init)` for every dense layer, in parameter order.
    fn layers(&self) -> Vec<(String, usize, usize, bool)> {
        let mut out = Vec::new();
        for i in 0..self.depth {
            let fan_in = if i == 0 { self.position_dim() } else { self.width }
                + if self.skip_at(i) { self.position_dim() } else { 0 };
            out.push((format!("trunk.{i}"), fan_in, self.width, true));
        }
        out.push(("sigma".into(), self.width, 1, false));
        out.push(("feature".into(), self.width, self.width, false));
        out.push(("color".into(), self.width + self.direction_dim(), self.color_width, true));
        out.push(("rgb".into(), self.color_width, 3, false));
        out
    }
}

/// MLP mapping encoded position and view direction to density and colour.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField {
    pub config: FieldConfig,
    pub bounds: SceneBounds,
    pub params: ParamSet,
}

impl RadianceField {
    /// He-uniform trunk, Glorot-uniform heads, zero biases.
    pub fn new<R: Rng + ?Sized>(config: FieldConfig, bounds: SceneBounds, rng: &mut R) -> Result<Self> {
        Self::build(config, bounds, |fan_in, fan_out, he| {
            let limit = if he {
                (6.0 / fan_in as f64).sqrt()
            } else {
                (6.0 / (fan_in + fan_out) as f64).sqrt()
            };
            (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect()
        })
    }

    pub fn zeros(config: FieldConfig, bounds: SceneBounds) -> Result<Self> {
        Self::build(config, bounds, |fan_in, fan_out, _| vec![0.0; fan_in * fan_out])
    }

    fn build(
        config: FieldConfig,
        bounds: SceneBounds,
        mut weights: impl FnMut(usize, usize, bool) -> Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, fan_in, fan_out, he) in config.layers() {
            params.push(format!("{name}.w"), Tensor::new([fan_in, fan_out], weights(fan_in, fan_out, he)));
            params.push(format!("{name}.b"), Tensor::zeros([fan_out]));
        }
        Ok(Self { config, bounds, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Density `[n, 1]` (softplus) and colour `[n, 3]` (sigmoid) for `n`
    /// encoded positions and the matching encoded directions.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], enc_pos: Var, enc_dir: Var) -> Result<(Var, Var)> {
        let c = &self.config;
        let check = |what: &'static str, got: &Tensor, want: usize| -> Result<()> {
            if got.shape().len() != 2 || got.cols() != want {
                return Err(Error::Shape {
                    what,
                    expected: format!("[n, {want}]"),
                    got: format!("{:?}", got.shape()),
                });
            }
            Ok(())
        };
        check("encoded position", g.value(enc_pos), c.position_dim())?;
        check("encoded direction", g.value(enc_dir), c.direction_dim())?;
        if g.value(enc_pos).rows() != g.value(enc_dir).rows() {
            return Err(Error::Shape {
                what: "encoded direction rows",
                expected: g.value(enc_pos).rows().to_string(),
                got: g.value(enc_dir).rows().to_string(),
            });
        }
        if vars.len() != self.params.count() {
            return Err(Error::Shape {
                what: "field parameter tensors",
                expected: self.params.count().to_string(),
                got: vars.len().to_string(),
            });
        }
        let dense = |g: &mut Graph, x: Var, layer: usize| {
            let y = g.matmul(x, vars[2 * layer]);
            g.add_row_bias(y, vars[2 * layer + 1])
        };
        let mut h = enc_pos;
        for i in 0..c.depth {
            if c.skip_at(i) {
                h = g.concat_cols(&[h, enc_pos]);
            }
            let y = dense(g, h, i);
            h = g.relu(y);
        }
        let sigma = dense(g, h, c.depth);
        let sigma = g.softplus(sigma);
        let feature = dense(g, h, c.depth + 1);
        let joined = g.concat_cols(&[feature, enc_dir]);
        let hidden = dense(g, joined, c.depth + 2);
        let hidden = g.relu(hidden);
        let rgb = dense(g, hidden, c.depth + 3);
        let rgb = g.sigmoid(rgb);
        Ok((sigma, rgb))
    }
}

/// A [`RadianceField`] paired with the encoding schedules it is evaluated with.
#[derive(Clone, Copy, Debug)]
pub struct NeuralField<'a> {
    pub field: &'a RadianceField,
    pub position: EncodingSchedule,
    pub direction: EncodingSchedule,
}

impl<'a> NeuralField<'a> {
    pub fn new(field: &'a RadianceField, position: EncodingSchedule, direction: EncodingSchedule) -> Result<Self> {
        let c = &field.config;
        if position.bands != c.position_bands || direction.bands != c.direction_bands {
            return Err(Error::invalid(
                "encoding schedule",
                format!(
                    "bands ({}, {}) do not match the field's ({}, {})",
                    position.bands, direction.bands, c.position_bands, c.direction_bands
                ),
            ));
        }
        Ok(Self {
            field,
            position,
            direction,
        })
    }

    /// All bands fully on.
    pub fn saturated(field: &'a RadianceField) -> Self {
        Self {
            field,
            position: EncodingSchedule::fixed(field.config.position_bands),
            direction: EncodingSchedule::fixed(field.config.direction_bands),
        }
    }
}

impl RadianceModel for NeuralField<'_> {
    fn bounds(&self) -> SceneBounds {
        self.field.bounds
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.field.params.bind(g, trainable)
    }

    fn query(&self, g: &mut Graph, params: &[Var], batch: &SampleBatch) -> Result<(Var, Var)> {
        let enc_pos = encode(g, batch.normalized, &self.position);
        let enc_dir = encode(g, batch.directions, &self.direction);
        let enc_dir = g.gather_rows(enc_dir, &batch.sample_ray);
        self.field.forward(g, params, enc_pos, enc_dir)
    }
}
