use std::collections::BTreeMap;

use super::kernels::{self, ConvDims, NormCache, RoiPlan};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: NormCache,
    },
    Softmax(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        dims: ConvDims,
    },
    RoiAlign {
        x: Var,
        plan: RoiPlan,
        channels: usize,
    },
    Reshape(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    L2NormRows(Var, Vec<f64>),
    FocalBce {
        scores: Var,
        labels: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-use reverse-mode tape.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for the backward sweep. Parameters pulled from a
/// [`ParamStore`] appear once per graph; frozen ones never require gradient.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    vars: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.vars.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a trainable parameter that participated in the graph.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }
}

fn matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::invalid(format!("{what}: expected a matrix, got shape {s:?}"))),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that collects gradient; used by checks on bare primitives.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store.get(name)?;
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix(self.value(a), "matmul lhs")?;
        let (k2, n) = matrix(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::invalid(format!(
                "matmul inner dimension: lhs has {k} columns, rhs has {k2} rows"
            )));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix(self.value(a), "matmul_nt lhs")?;
        let (n, k2) = matrix(self.value(b), "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::invalid(format!(
                "matmul_nt inner dimension: lhs has {k} columns, rhs has {k2} columns"
            )));
        }
        let out = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::invalid(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn row_broadcast(&mut self, a: Var, r: Var, add: bool) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(r).numel() != cols {
            return Err(Error::invalid(format!(
                "row broadcast: last dimension {cols} vs vector length {}",
                self.value(r).numel()
            )));
        }
        let rv = self.value(r).data().to_vec();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| if add { x + rv[i % cols] } else { x * rv[i % cols] })
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(r);
        let op = if add { Op::AddRow(a, r) } else { Op::MulRow(a, r) };
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
    }

    /// Adds a vector to every row (last-dimension broadcast).
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        self.row_broadcast(a, r, true)
    }

    /// Multiplies every row by a vector elementwise.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        self.row_broadcast(a, r, false)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    /// Multiplies by a one-element tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::invalid("mul_scalar: scale must have exactly one element"));
        }
        let c = self.value(s).data()[0];
        let out = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MulScalar(a, s), rg))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), kernels::gelu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let dim = self.value(x).cols();
        if dim < 2 {
            return Err(Error::invalid("layer_norm: last dimension must be at least 2"));
        }
        for (v, what) in [(gain, "gain"), (bias, "bias")] {
            if self.value(v).numel() != dim {
                return Err(Error::invalid(format!(
                    "layer_norm: {what} has {} entries, last dimension is {dim}",
                    self.value(v).numel()
                )));
            }
        }
        let (out, cache) = kernels::layer_norm(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            dim,
            eps,
        );
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_rows_masked(a, None)
    }

    /// Row softmax; masked-out entries get probability zero. Every row must
    /// keep at least one entry.
    pub fn softmax_rows_masked(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let n = self.value(a).cols();
        let out = kernels::softmax_rows(self.value(a).data(), n, mask);
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Softmax(a), rg)
    }

    /// Same-padded 2-D convolution of an `H×W×C_in` map with a
    /// `k×k×C_in×C_out` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (h, w, c_in) = match self.value(x).shape() {
            [h, w, c] => (*h, *w, *c),
            s => return Err(Error::invalid(format!("conv2d: input must be H×W×C, got {s:?}"))),
        };
        let (k, c_out) = match self.value(kernel).shape() {
            [k1, k2, ci, co] => {
                if k1 != k2 {
                    return Err(Error::invalid(format!(
                        "conv2d: kernel height {k1} differs from width {k2}"
                    )));
                }
                if k1 % 2 == 0 {
                    return Err(Error::invalid(format!("conv2d: kernel size {k1} is even")));
                }
                if *ci != c_in {
                    return Err(Error::invalid(format!(
                        "conv2d: kernel C_in {ci} does not match input channels {c_in}"
                    )));
                }
                (*k1, *co)
            }
            s => {
                return Err(Error::invalid(format!(
                    "conv2d: kernel must be k×k×C_in×C_out, got {s:?}"
                )))
            }
        };
        let dims = ConvDims {
            h,
            w,
            c_in,
            c_out,
            k,
        };
        let out = kernels::conv2d(self.value(x).data(), self.value(kernel).data(), dims);
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            Tensor::from_parts(vec![h, w, c_out], out),
            Op::Conv2d { x, kernel, dims },
            rg,
        ))
    }

    /// Bilinear region pooling of an `H×W×C` map into `s×s×C`.
    pub fn roi_align(
        &mut self,
        x: Var,
        bbox: [f64; 4],
        out_size: usize,
        samples: usize,
    ) -> Result<Var> {
        let (h, w, c) = match self.value(x).shape() {
            [h, w, c] => (*h, *w, *c),
            s => {
                return Err(Error::invalid(format!(
                    "roi_align: feature map must be H×W×C, got {s:?}"
                )))
            }
        };
        let plan = kernels::roi_align_plan(h, w, bbox, out_size, samples)?;
        let out = kernels::roi_align_apply(&plan, self.value(x).data(), c);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![out_size, out_size, c], out),
            Op::RoiAlign {
                x,
                plan,
                channels: c,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix(self.value(a), "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols: nothing to concatenate"))?;
        let (rows, _) = matrix(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix(self.value(p), "concat_cols")?;
            if r != rows {
                return Err(Error::invalid(format!(
                    "concat_cols: row count {r} differs from {rows}"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows: nothing to concatenate"))?;
        let (_, cols) = matrix(self.value(first), "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = matrix(self.value(p), "concat_rows")?;
            if c != cols {
                return Err(Error::invalid(format!(
                    "concat_rows: column count {c} differs from {cols}"
                )));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = matrix(self.value(a), "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::invalid(format!(
                "slice_rows: rows {start}..{} out of range for {m}",
                start + len
            )));
        }
        let out = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![len, n], out), Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = matrix(self.value(a), "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::invalid(format!(
                "slice_cols: columns {start}..{} out of range for {n}",
                start + len
            )));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![m, len], out), Op::SliceCols(a, start), rg))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = matrix(self.value(a), "gather_rows")?;
        if index.is_empty() {
            return Err(Error::invalid("gather_rows: empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::invalid(format!("gather_rows: row {bad} out of range for {m}")));
        }
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            out.extend_from_slice(self.value(a).row(i));
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![index.len(), n], out),
            Op::GatherRows(a, index.to_vec()),
            rg,
        ))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix(self.value(a), "l2_normalize_rows")?;
        let src = self.value(a).data();
        let mut norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::invalid(format!("l2_normalize_rows: row {i} is zero")));
            }
            norms.push(norm);
            out.extend(row.iter().map(|x| x / norm));
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::L2NormRows(a, norms), rg))
    }

    /// Mean binary focal loss over all entries of `scores` (probabilities).
    /// Probabilities are clamped to `[1e-12, 1 - 1e-12]`.
    pub fn focal_bce(&mut self, scores: Var, labels: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
        if self.value(scores).shape() != labels.shape() {
            return Err(Error::invalid(format!(
                "focal_bce: scores {:?} vs labels {:?}",
                self.value(scores).shape(),
                labels.shape()
            )));
        }
        let n = labels.numel() as f64;
        let total: f64 = self
            .value(scores)
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&p, &y)| focal_term(p, y, alpha, gamma).0)
            .sum();
        let rg = self.rg(scores);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::FocalBce {
                scores,
                labels: labels.data().to_vec(),
                alpha,
                gamma,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Reverse sweep from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward: root must be scalar, has shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let vars: Vec<Option<Tensor>> = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad)
                    .map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g))
            })
            .collect();
        let params = self
            .params
            .iter()
            .filter(|(_, v)| self.rg(**v))
            .map(|(name, v)| {
                let g = vars[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { vars, params })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.value(v).data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.rg(*a) {
                    self.accumulate(grads, *a, kernels::matmul_nt(g, val(*b), m, n, k));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, kernels::matmul_tn(val(*a), g, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[0];
                if self.rg(*a) {
                    self.accumulate(grads, *a, kernels::matmul(g, val(*b), m, n, k));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, kernels::matmul_tn(g, val(*a), m, n, k));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRow(a, r) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.rg(*r) {
                    let cols = self.value(*r).numel();
                    let mut dr = vec![0.0; cols];
                    for (i, x) in g.iter().enumerate() {
                        dr[i % cols] += x;
                    }
                    self.accumulate(grads, *r, dr);
                }
            }
            Op::MulRow(a, r) => {
                let cols = self.value(*r).numel();
                let rv = val(*r);
                if self.rg(*a) {
                    self.accumulate(
                        grads,
                        *a,
                        g.iter().enumerate().map(|(i, x)| x * rv[i % cols]).collect(),
                    );
                }
                if self.rg(*r) {
                    let av = val(*a);
                    let mut dr = vec![0.0; cols];
                    for (i, x) in g.iter().enumerate() {
                        dr[i % cols] += x * av[i];
                    }
                    self.accumulate(grads, *r, dr);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.iter().map(|x| x * c).collect()),
            Op::MulScalar(a, s) => {
                let c = val(*s)[0];
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.iter().map(|x| x * c).collect());
                }
                if self.rg(*s) {
                    let d = g.iter().zip(val(*a)).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, *s, vec![d]);
                }
            }
            Op::Gelu(a) => {
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(x, &u)| x * kernels::gelu_grad(u))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, g.iter().zip(y).map(|(x, t)| x * (1.0 - t * t)).collect());
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, g.iter().zip(y).map(|(x, s)| x * s * (1.0 - s)).collect());
            }
            Op::Exp(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, g.iter().zip(y).map(|(x, e)| x * e).collect());
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            } => {
                let dim = self.value(*gain).numel();
                let (dx, dg, db) = kernels::layer_norm_backward(g, val(*gain), cache, dim);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dg);
                self.accumulate(grads, *bias, db);
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.len() / n {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Conv2d { x, kernel, dims } => {
                let (dx, dk) = kernels::conv2d_backward(g, val(*x), val(*kernel), *dims);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *kernel, dk);
            }
            Op::RoiAlign { x, plan, channels } => {
                let len = self.value(*x).numel();
                self.accumulate(grads, *x, kernels::roi_align_backward(plan, g, len, *channels));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Transpose(a) => {
                let (m, n) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = g[j * m + i];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            d.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(grads, p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let n = node.value.cols();
                let mut d = vec![0.0; self.value(*a).numel()];
                d[start * n..start * n + g.len()].copy_from_slice(g);
                self.accumulate(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let (m, n) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let len = node.value.cols();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *a, d);
            }
            Op::GatherRows(a, index) => {
                let n = node.value.cols();
                let mut d = vec![0.0; self.value(*a).numel()];
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..n {
                        d[i * n + j] += g[k * n + j];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::L2NormRows(a, norms) => {
                let n = node.value.cols();
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[r * n + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::FocalBce {
                scores,
                labels,
                alpha,
                gamma,
            } => {
                let n = labels.len() as f64;
                let d = val(*scores)
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| g[0] * focal_term(p, y, *alpha, *gamma).1 / n)
                    .collect();
                self.accumulate(grads, *scores, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
        }
    }
}

pub(crate) const PROB_CLAMP: f64 = 1e-12;

/// Loss term and its derivative with respect to the (unclamped) probability.
pub(crate) fn focal_term(p: f64, y: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let clamped = !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p);
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let (loss, dloss) = if y > 0.5 {
        let q = 1.0 - p;
        let loss = -alpha * q.powf(gamma) * p.ln();
        let d = if gamma == 0.0 {
            -alpha / p
        } else {
            alpha * (gamma * q.powf(gamma - 1.0) * p.ln() - q.powf(gamma) / p)
        };
        (loss, d)
    } else {
        let q = 1.0 - p;
        let loss = -(1.0 - alpha) * p.powf(gamma) * q.ln();
        let d = if gamma == 0.0 {
            (1.0 - alpha) / q
        } else {
            -(1.0 - alpha) * (gamma * p.powf(gamma - 1.0) * q.ln() - p.powf(gamma) / q)
        };
        (loss, d)
    };
    (loss, if clamped { 0.0 } else { dloss })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_gradient_by_hand() {
        let mut g = Graph::new();
        let a = g.input(t(&[1, 2], &[1.0, 2.0]));
        let b = g.input(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.var(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.var(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_errors_name_the_dimension() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("inner dimension"), "{err}");
        let x = g.constant(Tensor::zeros(&[4, 4, 2]));
        let k = g.constant(Tensor::zeros(&[3, 3, 3, 1]));
        let err = g.conv2d(x, k).unwrap_err().to_string();
        assert!(err.contains("C_in"), "{err}");
        let k = g.constant(Tensor::zeros(&[2, 2, 2, 1]));
        assert!(g.conv2d(x, k).is_err());
    }

    #[test]
    fn frozen_params_collect_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("frozen", Tensor::filled(&[1, 2], 2.0), false).unwrap();
        store.insert("live", Tensor::filled(&[2, 1], 3.0), true).unwrap();
        let mut g = Graph::new();
        let f = g.param(&store, "frozen").unwrap();
        let l = g.param(&store, "live").unwrap();
        assert_eq!(g.param(&store, "live").unwrap(), l);
        let y = g.matmul(f, l).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.param("frozen").is_none());
        assert_eq!(grads.param("live").unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn reused_nodes_accumulate() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.var(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn focal_zero_gamma_half_alpha_is_half_bce() {
        for (p, y) in [(0.3, 1.0), (0.8, 0.0), (0.5, 1.0)] {
            let bce = if y > 0.5 { -f64::ln(p) } else { -f64::ln(1.0 - p) };
            let (l, _) = focal_term(p, y, 0.5, 0.0);
            assert!((l - 0.5 * bce).abs() < 1e-15);
        }
    }
}
