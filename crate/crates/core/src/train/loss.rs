use crate::error::{Error, Result};
use crate::se3::Pose;
use photoreg_diff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Weights of the photometric and pose-supervision terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub photometric: f64,
    pub pose: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            photometric: 0.3,
            pose: 0.7,
        }
    }
}

impl LossWeights {
    /// Photometric term only, for images without poses.
    pub fn unlabeled() -> Self {
        Self {
            photometric: 1.0,
            pose: 0.0,
        }
    }

    pub fn pose_only() -> Self {
        Self {
            photometric: 0.0,
            pose: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.photometric >= 0.0 && self.pose >= 0.0 && self.photometric + self.pose > 0.0) {
            return Err(Error::invalid(
                "loss weights",
                format!("({}, {}) must be non-negative with a positive sum", self.photometric, self.pose),
            ));
        }
        Ok(())
    }
}

/// Mean over pixels of the squared RGB distance between `[n, 3]` nodes.
pub fn photometric_loss(g: &mut Graph, rendered: Var, target: Var) -> Result<Var> {
    let (a, b) = (g.value(rendered).shape(), g.value(target).shape());
    if a != b || a.len() != 2 || a[1] != 3 {
        return Err(Error::Shape {
            what: "photometric loss",
            expected: format!("{b:?} with 3 columns"),
            got: format!("{a:?}"),
        });
    }
    let n = a[0].max(1);
    let d = g.sub(rendered, target);
    let sq = g.mul(d, d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// [`photometric_loss`] on plain RGB triples.
pub fn photometric_loss_values(rendered: &[f64], target: &[f64]) -> Result<f64> {
    if rendered.len() != target.len() || rendered.len() % 3 != 0 {
        return Err(Error::Shape {
            what: "photometric loss",
            expected: target.len().to_string(),
            got: rendered.len().to_string(),
        });
    }
    let n = (rendered.len() / 3).max(1);
    Ok(rendered.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64)
}

/// Euclidean norm of `flatten(truth) − predicted` over the 12 entries of a
/// raw (not orthogonalised) prediction node of 12 elements.
pub fn gt_loss(g: &mut Graph, truth: &Pose, predicted: Var) -> Result<Var> {
    let shape = g.value(predicted).shape().to_vec();
    if g.value(predicted).len() != 12 {
        return Err(Error::Shape {
            what: "pose prediction",
            expected: "12 values".into(),
            got: format!("{shape:?}"),
        });
    }
    let t = g.constant(Tensor::new(shape, truth.flatten().to_vec()));
    let d = g.sub(predicted, t);
    Ok(g.norm(d))
}

pub fn gt_loss_values(truth: &Pose, predicted: &[f64; 12]) -> f64 {
    truth
        .flatten()
        .iter()
        .zip(predicted)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// `λ₁ · photometric + λ₂ · pose`.
pub fn combined_loss(g: &mut Graph, photometric: Var, pose: Var, w: &LossWeights) -> Var {
    let a = g.scale(photometric, w.photometric);
    let b = g.scale(pose, w.pose);
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use photoreg_diff::grad_check;

    #[test]
    fn photometric_reference_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full([4, 3], 1.0));
        let b = g.constant(Tensor::zeros([4, 3]));
        let same = photometric_loss(&mut g, a, a).unwrap();
        let opposite = photometric_loss(&mut g, a, b).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        assert_eq!(g.value(opposite).item(), 3.0);
        let c = g.constant(Tensor::zeros([3, 3]));
        assert!(photometric_loss(&mut g, a, c).is_err());
        assert_eq!(photometric_loss_values(&[1.0; 6], &[0.0; 6]).unwrap(), 3.0);
    }

    #[test]
    fn photometric_gradient() {
        let target = Tensor::new([2, 3], vec![0.1, 0.5, 0.9, 0.3, 0.2, 0.7]);
        let err = grad_check(
            |g, x| {
                let t = g.constant(target.clone());
                photometric_loss(g, x, t).unwrap()
            },
            &Tensor::new([2, 3], vec![0.4, 0.1, 0.6, 0.8, 0.9, 0.05]),
            1e-6,
        );
        assert!(err <= 1e-6, "{err:e}");
    }

    #[test]
    fn gt_loss_reference_values() {
        let p = Pose::look_at(Vector3::new(1.0, 2.0, 3.0), Vector3::zeros(), Vector3::y());
        let mut g = Graph::new();
        let exact = g.constant(Tensor::from_vec(p.flatten().to_vec()));
        let l = gt_loss(&mut g, &p, exact).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let mut shifted = p.flatten();
        shifted[3] += 1.0;
        assert_eq!(gt_loss_values(&p, &shifted), 1.0);
        let bad = g.constant(Tensor::zeros([11]));
        assert!(gt_loss(&mut g, &p, bad).is_err());
    }

    #[test]
    fn gt_loss_gradient_away_from_zero() {
        let p = Pose::look_at(Vector3::new(1.0, 2.0, 3.0), Vector3::zeros(), Vector3::y());
        let mut x = p.flatten();
        x.iter_mut().enumerate().for_each(|(i, v)| *v += 0.1 * (i as f64 - 5.5));
        let err = grad_check(|g, x| gt_loss(g, &p, x).unwrap(), &Tensor::from_vec(x.to_vec()), 1e-6);
        assert!(err <= 1e-6, "{err:e}");
    }

    #[test]
    fn combined_loss_is_bilinear() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(0.8));
        let b = g.constant(Tensor::scalar(2.5));
        let eval = |g: &mut Graph, w: LossWeights| {
            let v = combined_loss(g, a, b, &w);
            g.value(v).item()
        };
        assert_eq!(eval(&mut g, LossWeights::unlabeled()), 0.8);
        assert_eq!(eval(&mut g, LossWeights::pose_only()), 2.5);
        let w = LossWeights::default();
        assert_eq!((w.photometric, w.pose), (0.3, 0.7));
        let base = eval(&mut g, w);
        let doubled = eval(
            &mut g,
            LossWeights {
                photometric: 0.6,
                pose: 1.4,
            },
        );
        assert!((doubled - 2.0 * base).abs() < 1e-15);
        assert!(LossWeights { photometric: 0.0, pose: 0.0 }.validate().is_err());
    }
}
