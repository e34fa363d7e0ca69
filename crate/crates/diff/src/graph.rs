//! Eager tape: every operation computes its value immediately and records
//! enough of its inputs to run the reverse sweep later.

use crate::gemm::gemm;
use crate::tensor::Tensor;
use crate::DiffError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a square-kernel 2-D convolution over NHWC tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn output_extent(&self, extent: usize) -> usize {
        (extent + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Softplus(Var),
    Sigmoid(Var),
    Powf(Var, f64),
    Sum(Var),
    Mean(Var),
    Norm(Var),
    RowSum(Var),
    ScaleRows(Var, Var),
    RepeatRows(Var, usize),
    SumGroups(Var, usize),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Reshape(Var),
    CumsumRows(Var, bool),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    SpatialMean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded computation graph.
///
/// Leaves created with [`Graph::leaf`] receive gradients from
/// [`Graph::backward`]; [`Graph::constant`] nodes do not, and any subgraph
/// that only depends on constants is skipped during the reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_reduced_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() >= 2 {
        shape[..shape.len() - 1].to_vec()
    } else {
        vec![1]
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last [`Graph::backward`] output with respect to a leaf.
    ///
    /// Returns `None` for constants, interior nodes, and before any backward
    /// pass.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, name: &str, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "{name}: shape mismatch {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// `c * a`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    /// `a + c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Adds a length-`c` bias to every row of an `[.., c]` tensor.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let c = ta.cols();
        assert_eq!(tb.len(), c, "add_row_bias: bias length {} vs {} columns", tb.len(), c);
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(bias);
        self.push(value, Op::AddRowBias(a, bias), rg)
    }

    /// `[n, k] × [k, m] → [n, m]`, leading axes of the left operand folded into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(tb.shape().len(), 2, "matmul: rhs must be rank 2, got {:?}", tb.shape());
        let (n, k) = (ta.rows(), ta.cols());
        let m = tb.shape()[1];
        assert_eq!(tb.shape()[0], k, "matmul: {:?} × {:?}", ta.shape(), tb.shape());
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        if shape.len() == 1 {
            shape = vec![1, m];
        }
        let value = Tensor::new(shape, out);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// Elementwise `a^p`.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::Powf(a, p), |x| x.powf(p))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Euclidean norm over all elements.
    pub fn norm(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Norm(a), rg)
    }

    /// Sum along the last axis.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let c = t.cols().max(1);
        let data = t.data().chunks(c).map(|r| r.iter().sum()).collect();
        let value = Tensor::new(row_reduced_shape(t.shape()), data);
        let rg = self.rg(a);
        self.push(value, Op::RowSum(a), rg)
    }

    /// Multiplies row `i` of `a` by `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let (ta, ts) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
        let c = ta.cols().max(1);
        assert_eq!(ts.len(), ta.rows(), "scale_rows: {} scales for {} rows", ts.len(), ta.rows());
        let mut data = ta.data().to_vec();
        for (row, &f) in data.chunks_mut(c).zip(ts.data()) {
            row.iter_mut().for_each(|x| *x *= f);
        }
        let value = Tensor::new(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(s);
        self.push(value, Op::ScaleRows(a, s), rg)
    }

    /// `[n, c] → [n·k, c]`, each row repeated `k` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let t = &self.nodes[a.0].value;
        let c = t.cols();
        let mut data = Vec::with_capacity(t.len() * k);
        for row in t.data().chunks(c.max(1)) {
            for _ in 0..k {
                data.extend_from_slice(row);
            }
        }
        let value = Tensor::new([t.rows() * k, c], data);
        let rg = self.rg(a);
        self.push(value, Op::RepeatRows(a, k), rg)
    }

    /// `[n·k, c] → [n, c]`, summing each run of `k` consecutive rows.
    pub fn sum_groups(&mut self, a: Var, k: usize) -> Var {
        let t = &self.nodes[a.0].value;
        let c = t.cols();
        assert!(k > 0 && t.rows() % k == 0, "sum_groups: {} rows not divisible by {k}", t.rows());
        let n = t.rows() / k;
        let mut data = vec![0.0; n * c];
        for (i, group) in t.data().chunks(k * c).enumerate() {
            let out = &mut data[i * c..(i + 1) * c];
            for row in group.chunks(c) {
                for (o, x) in out.iter_mut().zip(row) {
                    *o += x;
                }
            }
        }
        let value = Tensor::new([n, c], data);
        let rg = self.rg(a);
        self.push(value, Op::SumGroups(a, k), rg)
    }

    /// Concatenates `[n, c_i]` tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let n = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let t = &self.nodes[p.0].value;
                assert_eq!(t.rows(), n, "concat_cols: row mismatch {} vs {n}", t.rows());
                t.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = self.nodes[p.0].value.data();
            for i in 0..n {
                data[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new([n, total], data), Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Picks flat elements by index into a rank-1 result.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.nodes[a.0].value.data();
        let data = idx.iter().map(|&i| src[i]).collect();
        let rg = self.rg(a);
        self.push(Tensor::new([idx.len()], data), Op::Gather(a, idx.to_vec()), rg)
    }

    /// Picks rows by index.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = &self.nodes[a.0].value;
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        self.push(Tensor::new([idx.len(), c], data), Op::GatherRows(a, idx.to_vec()), rg)
    }

    /// Places row `i` of `a` at row `idx[i]` of an `[n, c]` zero tensor
    /// (rows sharing a target are summed).
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Var {
        let t = &self.nodes[a.0].value;
        let c = t.cols();
        assert_eq!(t.rows(), idx.len(), "scatter_rows: {} rows, {} indices", t.rows(), idx.len());
        let mut data = vec![0.0; n * c];
        for (row, &i) in t.data().chunks(c.max(1)).zip(idx) {
            for (o, x) in data[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o += x;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new([n, c], data), Op::ScatterRows(a, idx.to_vec()), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.nodes[a.0].value.clone().reshaped(shape.to_vec());
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Running sum along the last axis; `exclusive` shifts it so element `j`
    /// holds the sum of elements `< j`.
    pub fn cumsum_rows(&mut self, a: Var, exclusive: bool) -> Var {
        let t = &self.nodes[a.0].value;
        let c = t.cols().max(1);
        let mut data = vec![0.0; t.len()];
        for (out, row) in data.chunks_mut(c).zip(t.data().chunks(c)) {
            let mut acc = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                if exclusive {
                    *o = acc;
                    acc += x;
                } else {
                    acc += x;
                    *o = acc;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(value, Op::CumsumRows(a, exclusive), rg)
    }

    /// 2-D convolution, NHWC input `[b, h, w, ci]`, weight `[k·k·ci, co]`
    /// (kernel-row, kernel-col, channel ordering), bias `[co]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeom) -> Var {
        let x = &self.nodes[input.0].value;
        assert_eq!(x.shape().len(), 4, "conv2d: input must be NHWC, got {:?}", x.shape());
        let (b, h, w, ci) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let wt = &self.nodes[weight.0].value;
        let patch = geom.kernel * geom.kernel * ci;
        assert_eq!(wt.shape().len(), 2, "conv2d: weight must be rank 2");
        assert_eq!(wt.shape()[0], patch, "conv2d: weight rows {} vs patch {}", wt.shape()[0], patch);
        let co = wt.shape()[1];
        assert_eq!(self.nodes[bias.0].value.len(), co, "conv2d: bias length");
        let (ho, wo) = (geom.output_extent(h), geom.output_extent(w));
        let cols = im2col(x.data(), b, h, w, ci, ho, wo, geom);
        let rows = b * ho * wo;
        let mut out = vec![0.0; rows * co];
        for row in out.chunks_mut(co) {
            row.copy_from_slice(self.nodes[bias.0].value.data());
        }
        gemm(rows, patch, co, &cols, false, wt.data(), false, 1.0, &mut out);
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        self.push(
            Tensor::new([b, ho, wo, co], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
        )
    }

    /// Mean over the spatial axes of an NHWC tensor: `[b, h, w, c] → [b, c]`.
    pub fn spatial_mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        assert_eq!(t.shape().len(), 4, "spatial_mean: expected NHWC, got {:?}", t.shape());
        let (b, hw, c) = (t.shape()[0], t.shape()[1] * t.shape()[2], t.shape()[3]);
        let mut data = vec![0.0; b * c];
        for bi in 0..b {
            let out = &mut data[bi * c..(bi + 1) * c];
            for px in t.data()[bi * hw * c..(bi + 1) * hw * c].chunks(c) {
                for (o, x) in out.iter_mut().zip(px) {
                    *o += x;
                }
            }
            out.iter_mut().for_each(|o| *o /= hw as f64);
        }
        let rg = self.rg(a);
        self.push(Tensor::new([b, c], data), Op::SpatialMean(a), rg)
    }

    /// Reverse sweep from a one-element output.
    ///
    /// Leaf gradients from any previous call are discarded, not accumulated.
    pub fn backward(&mut self, output: Var) -> Result<(), DiffError> {
        let len = self.nodes[output.0].value.len();
        if len != 1 {
            return Err(DiffError::NonScalarOutput {
                shape: self.nodes[output.0].value.shape().to_vec(),
            });
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(output) {
            return Ok(());
        }
        self.grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot, &self.nodes);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Each arm adds the vector-Jacobian product into its inputs' slots.
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate(a, |s, _| add_into(s, g));
                self.accumulate(b, |s, _| add_into(s, g));
            }
            &Op::Sub(a, b) => {
                self.accumulate(a, |s, _| add_into(s, g));
                self.accumulate(b, |s, _| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            &Op::Mul(a, b) => {
                self.accumulate(a, |s, n| {
                    zip3(s, g, n[b.0].value.data(), |s, g, y| *s += g * y)
                });
                self.accumulate(b, |s, n| {
                    zip3(s, g, n[a.0].value.data(), |s, g, x| *s += g * x)
                });
            }
            &Op::Scale(a, c) => self.accumulate(a, |s, _| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)
            }),
            &Op::Offset(a) | &Op::Reshape(a) => self.accumulate(a, |s, _| add_into(s, g)),
            &Op::AddRowBias(a, b) => {
                self.accumulate(a, |s, _| add_into(s, g));
                self.accumulate(b, |s, _| {
                    let c = s.len().max(1);
                    for row in g.chunks(c) {
                        add_into(s, row);
                    }
                });
            }
            &Op::MatMul(a, b) => {
                let (n, k) = {
                    let t = &self.nodes[a.0].value;
                    (t.rows(), t.cols())
                };
                let m = self.nodes[b.0].value.shape()[1];
                // dA = G·Bᵀ, dB = Aᵀ·G
                self.accumulate(a, |s, nodes| {
                    gemm(n, m, k, g, false, nodes[b.0].value.data(), true, 1.0, s)
                });
                self.accumulate(b, |s, nodes| {
                    gemm(k, n, m, nodes[a.0].value.data(), true, g, false, 1.0, s)
                });
            }
            &Op::Relu(a) => self.accumulate(a, |s, n| {
                zip3(s, g, n[a.0].value.data(), |s, g, x| {
                    if x > 0.0 {
                        *s += g
                    }
                })
            }),
            &Op::Sin(a) => self.accumulate(a, |s, n| {
                zip3(s, g, n[a.0].value.data(), |s, g, x| *s += g * x.cos())
            }),
            &Op::Cos(a) => self.accumulate(a, |s, n| {
                zip3(s, g, n[a.0].value.data(), |s, g, x| *s -= g * x.sin())
            }),
            &Op::Exp(a) => self.accumulate(a, |s, n| {
                zip3(s, g, n[i].value.data(), |s, g, y| *s += g * y)
            }),
            &Op::Softplus(a) => self.accumulate(a, |s, n| {
                zip3(s, g, n[a.0].value.data(), |s, g, x| *s += g * sigmoid(x))
            }),
            &Op::Sigmoid(a) => self.accumulate(a, |s, n| {
                zip3(s, g, n[i].value.data(), |s, g, y| *s += g * y * (1.0 - y))
            }),
            &Op::Powf(a, p) => self.accumulate(a, |s, n| {
                zip3(s, g, n[a.0].value.data(), |s, g, x| *s += g * p * x.powf(p - 1.0))
            }),
            &Op::Sum(a) => self.accumulate(a, |s, _| s.iter_mut().for_each(|s| *s += g[0])),
            &Op::Mean(a) => self.accumulate(a, |s, _| {
                let scale = g[0] / s.len() as f64;
                s.iter_mut().for_each(|s| *s += scale)
            }),
            &Op::Norm(a) => {
                let norm = self.nodes[i].value.data()[0];
                if norm > 0.0 {
                    self.accumulate(a, |s, n| {
                        let k = g[0] / norm;
                        s.iter_mut()
                            .zip(n[a.0].value.data())
                            .for_each(|(s, x)| *s += k * x)
                    });
                }
            }
            &Op::RowSum(a) => self.accumulate(a, |s, n| {
                let c = n[a.0].value.cols().max(1);
                for (row, &gi) in s.chunks_mut(c).zip(g) {
                    row.iter_mut().for_each(|s| *s += gi);
                }
            }),
            &Op::ScaleRows(a, sc) => {
                let c = self.nodes[a.0].value.cols().max(1);
                self.accumulate(a, |s, n| {
                    let f = n[sc.0].value.data();
                    for ((srow, grow), &fi) in s.chunks_mut(c).zip(g.chunks(c)).zip(f) {
                        srow.iter_mut().zip(grow).for_each(|(s, g)| *s += g * fi);
                    }
                });
                self.accumulate(sc, |s, n| {
                    let x = n[a.0].value.data();
                    for ((si, grow), xrow) in s.iter_mut().zip(g.chunks(c)).zip(x.chunks(c)) {
                        *si += grow.iter().zip(xrow).map(|(g, x)| g * x).sum::<f64>();
                    }
                });
            }
            &Op::RepeatRows(a, k) => self.accumulate(a, |s, n| {
                let c = n[a.0].value.cols().max(1);
                for (srow, group) in s.chunks_mut(c).zip(g.chunks(c * k)) {
                    for grow in group.chunks(c) {
                        add_into(srow, grow);
                    }
                }
            }),
            &Op::SumGroups(a, k) => self.accumulate(a, |s, n| {
                let c = n[a.0].value.cols().max(1);
                for (group, grow) in s.chunks_mut(c * k).zip(g.chunks(c)) {
                    for srow in group.chunks_mut(c) {
                        add_into(srow, grow);
                    }
                }
            }),
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let total = self.nodes[i].value.cols();
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    self.accumulate(p, |s, _| {
                        for (r, srow) in s.chunks_mut(w.max(1)).enumerate() {
                            add_into(srow, &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::Gather(a, idx) => {
                let (a, idx) = (*a, idx.clone());
                self.accumulate(a, |s, _| {
                    for (&j, gi) in idx.iter().zip(g) {
                        s[j] += gi;
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let (a, idx) = (*a, idx.clone());
                self.accumulate(a, |s, n| {
                    let c = n[a.0].value.cols();
                    for (&j, grow) in idx.iter().zip(g.chunks(c.max(1))) {
                        add_into(&mut s[j * c..(j + 1) * c], grow);
                    }
                });
            }
            Op::ScatterRows(a, idx) => {
                let (a, idx) = (*a, idx.clone());
                self.accumulate(a, |s, n| {
                    let c = n[a.0].value.cols();
                    for (&j, srow) in idx.iter().zip(s.chunks_mut(c.max(1))) {
                        add_into(srow, &g[j * c..(j + 1) * c]);
                    }
                });
            }
            &Op::CumsumRows(a, exclusive) => self.accumulate(a, |s, n| {
                let c = n[a.0].value.cols().max(1);
                for (srow, grow) in s.chunks_mut(c).zip(g.chunks(c)) {
                    // reverse running sum of the upstream gradient
                    let mut acc = 0.0;
                    for j in (0..c).rev() {
                        if exclusive {
                            srow[j] += acc;
                            acc += grow[j];
                        } else {
                            acc += grow[j];
                            srow[j] += acc;
                        }
                    }
                }
            }),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                ..
            } => {
                let (input, weight, bias, geom) = (*input, *weight, *bias, *geom);
                let xs = self.nodes[input.0].value.shape().to_vec();
                let (b, h, w, ci) = (xs[0], xs[1], xs[2], xs[3]);
                let (ho, wo) = (geom.output_extent(h), geom.output_extent(w));
                let rows = b * ho * wo;
                let patch = geom.kernel * geom.kernel * ci;
                let co = self.nodes[weight.0].value.shape()[1];
                self.accumulate(bias, |s, _| {
                    for row in g.chunks(co) {
                        add_into(s, row);
                    }
                });
                self.accumulate(weight, |s, n| {
                    let Op::Conv2d { cols, .. } = &n[i].op else { unreachable!() };
                    gemm(patch, rows, co, cols, true, g, false, 1.0, s)
                });
                if self.nodes[input.0].requires_grad {
                    let mut dcols = vec![0.0; rows * patch];
                    gemm(
                        rows,
                        co,
                        patch,
                        g,
                        false,
                        self.nodes[weight.0].value.data(),
                        true,
                        0.0,
                        &mut dcols,
                    );
                    self.accumulate(input, |s, _| col2im(&dcols, s, b, h, w, ci, ho, wo, geom));
                }
            }
            &Op::SpatialMean(a) => self.accumulate(a, |s, n| {
                let sh = n[a.0].value.shape();
                let (b, hw, c) = (sh[0], sh[1] * sh[2], sh[3]);
                for bi in 0..b {
                    let grow = &g[bi * c..(bi + 1) * c];
                    for px in s[bi * hw * c..(bi + 1) * hw * c].chunks_mut(c) {
                        px.iter_mut()
                            .zip(grow)
                            .for_each(|(s, g)| *s += g / hw as f64);
                    }
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn zip3(s: &mut [f64], g: &[f64], x: &[f64], f: impl Fn(&mut f64, f64, f64)) {
    for ((s, &g), &x) in s.iter_mut().zip(g).zip(x) {
        f(s, g, x);
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeom,
) -> Vec<f64> {
    let k = geom.kernel;
    let patch = k * k * ci;
    let mut cols = vec![0.0; b * ho * wo * patch];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * patch;
                for ky in 0..k {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * w + ix as usize) * ci;
                        let dst = row + (ky * k + kx) * ci;
                        cols[dst..dst + ci].copy_from_slice(&x[src..src + ci]);
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    dx: &mut [f64],
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeom,
) {
    let k = geom.kernel;
    let patch = k * k * ci;
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * patch;
                for ky in 0..k {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + iy as usize) * w + ix as usize) * ci;
                        let src = row + (ky * k + kx) * ci;
                        add_into(&mut dx[dst..dst + ci], &cols[src..src + ci]);
                    }
                }
            }
        }
    }
}
