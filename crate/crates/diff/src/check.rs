//! Central-difference gradient checking.

use crate::{Graph, Tensor, Var};

/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn evaluate<F>(f: &F, point: Tensor) -> f64
where
    F: Fn(&mut Graph, Var) -> Var,
{
    let mut g = Graph::new();
    let x = g.constant(point);
    let y = f(&mut g, x);
    g.value(y).item()
}

/// Maximum relative error between the tape gradient of a scalar function and
/// its central-difference estimate over every coordinate of `point`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> f64
where
    F: Fn(&mut Graph, Var) -> Var,
{
    let all: Vec<usize> = (0..point.len()).collect();
    grad_check_indices(f, point, step, &all)
}

/// Like [`grad_check`] but only over the listed coordinates.
pub fn grad_check_indices<F>(f: F, point: &Tensor, step: f64, indices: &[usize]) -> f64
where
    F: Fn(&mut Graph, Var) -> Var,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x);
    g.backward(y).expect("grad_check needs a scalar function");
    let analytic = g.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; point.len()]);

    indices
        .iter()
        .map(|&i| {
            let mut plus = point.clone();
            plus.data_mut()[i] += step;
            let mut minus = point.clone();
            minus.data_mut()[i] -= step;
            let numeric = (evaluate(&f, plus) - evaluate(&f, minus)) / (2.0 * step);
            relative_error(analytic[i], numeric)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_at_two() {
        let err = grad_check(
            |g, x| {
                let x2 = g.mul(x, x);
                g.mul(x2, x)
            },
            &Tensor::scalar(2.0),
            1e-4,
        );
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn affine_function_is_exact() {
        let err = grad_check(
            |g, x| {
                let y = g.scale(x, 3.5);
                let y = g.offset(y, -2.0);
                g.sum(y)
            },
            &Tensor::from_vec(vec![0.1, -4.0, 2.5]),
            1e-3,
        );
        assert!(err < 1e-9, "{err}");
    }
}
