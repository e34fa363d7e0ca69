//! Fourier features with per-band weights that ramp in over training.

use crate::error::{Error, Result};
use photoreg_diff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Band count `m`, ramp horizon `N` (epochs) and the current epoch `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingSchedule {
    pub bands: usize,
    pub horizon: usize,
    pub epoch: usize,
}

/// `(1 − cos(π · clamp(α − k, 0, 1))) / 2`.
pub fn band_weight(k: usize, alpha: f64) -> f64 {
    let x = (alpha - k as f64).clamp(0.0, 1.0);
    (1.0 - (PI * x).cos()) / 2.0
}

impl EncodingSchedule {
    pub fn new(bands: usize, horizon: usize) -> Result<Self> {
        if bands == 0 {
            return Err(Error::invalid("encoding bands", "must be at least 1"));
        }
        if horizon == 0 {
            return Err(Error::invalid("encoding horizon", "must be at least 1"));
        }
        Ok(Self {
            bands,
            horizon,
            epoch: 0,
        })
    }

    /// Every band fully on from the start: the plain positional encoding.
    pub fn fixed(bands: usize) -> Self {
        Self {
            bands,
            horizon: 1,
            epoch: 1,
        }
    }

    /// `α_t = m·t / N`.
    pub fn alpha(&self) -> f64 {
        self.bands as f64 * self.epoch as f64 / self.horizon as f64
    }

    pub fn weights(&self) -> Vec<f64> {
        let a = self.alpha();
        (0..self.bands).map(|k| band_weight(k, a)).collect()
    }

    pub fn advance_epoch(&mut self) {
        self.epoch += 1;
    }

    /// Width of the encoding of a `dim`-vector: `dim · (1 + 2m)`.
    pub fn output_dim(&self, dim: usize) -> usize {
        dim * (1 + 2 * self.bands)
    }
}

/// Encodes each row of an `[n, d]` node as
/// `[p, w_0 sin(π p), w_0 cos(π p), …, w_{m−1} sin(2^{m−1} π p), w_{m−1} cos(2^{m−1} π p)]`.
///
/// Bands whose weight is zero are emitted as constant zeros.
pub fn encode(g: &mut Graph, p: Var, schedule: &EncodingSchedule) -> Var {
    let (n, d) = (g.value(p).rows(), g.value(p).cols());
    let mut parts = Vec::with_capacity(1 + 2 * schedule.bands);
    parts.push(p);
    for (k, w) in schedule.weights().into_iter().enumerate() {
        if w == 0.0 {
            let zeros = g.constant(Tensor::zeros([n, d]));
            parts.push(zeros);
            parts.push(zeros);
            continue;
        }
        let freq = (1u64 << k) as f64 * PI;
        let arg = g.scale(p, freq);
        for trig in [Graph::sin, Graph::cos] {
            let mut v = trig(g, arg);
            if w != 1.0 {
                v = g.scale(v, w);
            }
            parts.push(v);
        }
    }
    g.concat_cols(&parts)
}

/// Plain evaluation of [`encode`] for a single vector.
pub fn encode_values(p: &[f64], schedule: &EncodingSchedule) -> Vec<f64> {
    let mut out = p.to_vec();
    for (k, w) in schedule.weights().into_iter().enumerate() {
        let freq = (1u64 << k) as f64 * PI;
        out.extend(p.iter().map(|x| w * (freq * x).sin()));
        out.extend(p.iter().map(|x| w * (freq * x).cos()));
    }
    out
}
