use crate::{Graph, Tensor, Var};

/// Named tensors stored back to back in one flat buffer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    values: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its slot index.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.shapes.push(value.shape().to_vec());
        self.offsets.push(self.values.len());
        self.values.extend_from_slice(value.data());
        self.names.len() - 1
    }

    /// Number of tensors.
    pub fn count(&self) -> usize {
        self.names.len()
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn shape(&self, slot: usize) -> &[usize] {
        &self.shapes[slot]
    }

    pub fn range(&self, slot: usize) -> std::ops::Range<usize> {
        let start = self.offsets[slot];
        start..start + self.shapes[slot].iter().product::<usize>()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn tensor(&self, slot: usize) -> Tensor {
        Tensor::new(self.shapes[slot].clone(), self.values[self.range(slot)].to_vec())
    }

    /// `(name, shape)` pairs in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.names.iter().cloned().zip(self.shapes.iter().cloned()).collect()
    }

    /// Replaces all values; the length must match.
    pub fn set_values(&mut self, values: Vec<f64>) {
        assert_eq!(values.len(), self.values.len(), "parameter count mismatch");
        self.values = values;
    }

    /// Puts every tensor on the graph, as leaves when `trainable`, else as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        (0..self.count())
            .map(|slot| {
                let t = self.tensor(slot);
                if trainable {
                    g.leaf(t)
                } else {
                    g.constant(t)
                }
            })
            .collect()
    }

    /// Flat gradient buffer matching [`ParamSet::values`]; unreached slots are zero.
    pub fn collect_grads(&self, g: &Graph, vars: &[Var]) -> Tensor {
        let mut out = vec![0.0; self.values.len()];
        for (slot, &v) in vars.iter().enumerate() {
            if let Some(grad) = g.grad(v) {
                out[self.range(slot)].copy_from_slice(grad);
            }
        }
        Tensor::from_vec(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slots_are_contiguous() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        p.push("b", Tensor::from_vec(vec![5.0, 6.0]));
        assert_eq!(p.len(), 6);
        assert_eq!(p.range(1), 4..6);
        assert_eq!(p.tensor(1).data(), &[5.0, 6.0]);
        assert_eq!(p.slot("b"), Some(1));
    }

    #[test]
    fn grads_land_in_the_right_slots() {
        let mut p = ParamSet::new();
        p.push("a", Tensor::from_vec(vec![1.0, 2.0]));
        p.push("b", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let vars = p.bind(&mut g, true);
        let s = g.sum(vars[0]);
        let y = g.mul(s, vars[1]);
        g.backward(y).unwrap();
        assert_eq!(p.collect_grads(&g, &vars).data(), &[3.0, 3.0, 3.0]);
    }
}
