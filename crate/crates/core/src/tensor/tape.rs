//! Eager operation tape with reverse-mode gradient accumulation.

use super::{Array, Real};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf { requires_grad: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    LayerNorm { input: Var, eps: Real },
    Softmax { input: Var, mask: Option<Vec<bool>> },
    Gelu(Var),
    Tanh(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { input: Var, start: usize, end: usize },
    SliceCols { input: Var, start: usize, end: usize },
    Reshape(Var),
    GatherRows { input: Var, indices: Vec<usize> },
    LinCombRows { input: Var, entries: Vec<Vec<(usize, Real)>> },
    SumAll(Var),
    SmoothL1 { pred: Var, target: Array },
}

struct Node {
    value: Array,
    op: Op,
}

/// Records eager forward computation; replays it in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Array>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads[v.0].as_ref()
    }
}

macro_rules! shape_check {
    ($cond:expr, $($arg:tt)*) => {
        assert!($cond, "contract error: {}", format!($($arg)*));
    };
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(
            value,
            Op::Leaf {
                requires_grad: true,
            },
        )
    }

    /// Constant leaf: no gradient is accumulated.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(
            value,
            Op::Leaf {
                requires_grad: false,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        shape_check!(
            av.shape() == bv.shape(),
            "add shape mismatch {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Array::new(av.shape().to_vec(), data);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        shape_check!(
            av.shape() == bv.shape(),
            "sub shape mismatch {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Array::new(av.shape().to_vec(), data);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        shape_check!(
            av.shape() == bv.shape(),
            "mul shape mismatch {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Array::new(av.shape().to_vec(), data);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: Real) -> Var {
        let out = self.value(a).map(|v| v * k);
        self.push(out, Op::Scale(a, k))
    }

    /// Broadcast-add a `[1, d]` row to every row of `[n, d]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        shape_check!(
            av.ndim() == 2 && rv.shape() == [1, av.cols()],
            "add_row shape mismatch {:?} vs {:?}",
            av.shape(),
            rv.shape()
        );
        let cols = av.cols();
        let mut data = av.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += rv.data()[i % cols];
        }
        let out = Array::new(av.shape().to_vec(), data);
        self.push(out, Op::AddRow(a, row))
    }

    /// Broadcast-multiply every row of `[n, d]` by a `[1, d]` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        shape_check!(
            av.ndim() == 2 && rv.shape() == [1, av.cols()],
            "mul_row shape mismatch {:?} vs {:?}",
            av.shape(),
            rv.shape()
        );
        let cols = av.cols();
        let mut data = av.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v *= rv.data()[i % cols];
        }
        let out = Array::new(av.shape().to_vec(), data);
        self.push(out, Op::MulRow(a, row))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        shape_check!(
            av.ndim() == 2 && bv.ndim() == 2 && av.cols() == bv.rows(),
            "matmul shape mismatch {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let out = mm(av, bv);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value(a);
        shape_check!(av.ndim() == 2, "transpose expects 2D, got {:?}", av.shape());
        let (n, m) = (av.rows(), av.cols());
        let mut data = vec![0.0 as Real; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = av.at2(i, j);
            }
        }
        let out = Array::new(vec![m, n], data);
        self.push(out, Op::Transpose(a))
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layernorm(&mut self, a: Var) -> Var {
        let eps: Real = 1e-5;
        let av = self.value(a);
        shape_check!(av.ndim() == 2, "layernorm expects 2D, got {:?}", av.shape());
        let (n, d) = (av.rows(), av.cols());
        let mut data = vec![0.0 as Real; n * d];
        for i in 0..n {
            let row = av.row(i);
            let mean: Real = row.iter().sum::<Real>() / d as Real;
            let var: Real = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv;
            }
        }
        let out = Array::new(vec![n, d], data);
        self.push(out, Op::LayerNorm { input: a, eps })
    }

    /// Row-wise softmax over columns. Columns with `mask[j] == false` receive
    /// exactly zero probability (excluded before exponentiation).
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let av = self.value(a);
        shape_check!(av.ndim() == 2, "softmax expects 2D, got {:?}", av.shape());
        let (n, d) = (av.rows(), av.cols());
        if let Some(m) = mask {
            shape_check!(
                m.len() == d,
                "softmax mask length {} vs {} columns",
                m.len(),
                d
            );
            shape_check!(m.iter().any(|&v| v), "softmax: all columns masked");
        }
        let valid = |j: usize| mask.map_or(true, |m| m[j]);
        let mut data = vec![0.0 as Real; n * d];
        for i in 0..n {
            let row = av.row(i);
            let mut mx = Real::NEG_INFINITY;
            for j in 0..d {
                if valid(j) {
                    mx = mx.max(row[j]);
                }
            }
            let mut sum = 0.0 as Real;
            for j in 0..d {
                if valid(j) {
                    let e = (row[j] - mx).exp();
                    data[i * d + j] = e;
                    sum += e;
                }
            }
            for j in 0..d {
                data[i * d + j] /= sum;
            }
        }
        let out = Array::new(vec![n, d], data);
        self.push(
            out,
            Op::Softmax {
                input: a,
                mask: mask.map(|m| m.to_vec()),
            },
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_fwd);
        self.push(out, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.tanh());
        self.push(out, Op::Tanh(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        shape_check!(!parts.is_empty(), "concat_rows of zero parts");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            shape_check!(
                v.cols() == cols,
                "concat_rows column mismatch {} vs {}",
                v.cols(),
                cols
            );
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Array::new(vec![rows, cols], data);
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        shape_check!(!parts.is_empty(), "concat_cols of zero parts");
        let rows = self.value(parts[0]).rows();
        let total_cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = vec![0.0 as Real; rows * total_cols];
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            shape_check!(
                v.rows() == rows,
                "concat_cols row mismatch {} vs {}",
                v.rows(),
                rows
            );
            let c = v.cols();
            for i in 0..rows {
                data[i * total_cols + offset..i * total_cols + offset + c]
                    .copy_from_slice(v.row(i));
            }
            offset += c;
        }
        let out = Array::new(vec![rows, total_cols], data);
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        shape_check!(
            av.ndim() == 2 && start < end && end <= av.rows(),
            "slice_rows [{start}, {end}) out of {:?}",
            av.shape()
        );
        let cols = av.cols();
        let data = av.data()[start * cols..end * cols].to_vec();
        let out = Array::new(vec![end - start, cols], data);
        self.push(out, Op::SliceRows { input: a, start, end })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        shape_check!(
            av.ndim() == 2 && start < end && end <= av.cols(),
            "slice_cols [{start}, {end}) out of {:?}",
            av.shape()
        );
        let rows = av.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for i in 0..rows {
            data.extend_from_slice(&av.row(i)[start..end]);
        }
        let out = Array::new(vec![rows, end - start], data);
        self.push(out, Op::SliceCols { input: a, start, end })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a);
        shape_check!(
            shape.iter().product::<usize>() == av.len(),
            "reshape {:?} to {:?} changes element count",
            av.shape(),
            shape
        );
        let out = av.reshaped(shape);
        self.push(out, Op::Reshape(a))
    }

    /// Gather rows by index (rows may repeat).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let av = self.value(a);
        shape_check!(av.ndim() == 2, "gather_rows expects 2D, got {:?}", av.shape());
        let cols = av.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &idx in indices {
            shape_check!(idx < av.rows(), "gather_rows index {idx} out of {} rows", av.rows());
            data.extend_from_slice(av.row(idx));
        }
        let out = Array::new(vec![indices.len(), cols], data);
        self.push(
            out,
            Op::GatherRows {
                input: a,
                indices: indices.to_vec(),
            },
        )
    }

    /// Each output row is a fixed linear combination of input rows
    /// (bilinear sampling with constant weights).
    pub fn lin_comb_rows(&mut self, a: Var, entries: &[Vec<(usize, Real)>]) -> Var {
        let av = self.value(a);
        shape_check!(av.ndim() == 2, "lin_comb_rows expects 2D, got {:?}", av.shape());
        let cols = av.cols();
        let mut data = vec![0.0 as Real; entries.len() * cols];
        for (k, entry) in entries.iter().enumerate() {
            for &(idx, w) in entry {
                shape_check!(idx < av.rows(), "lin_comb_rows index {idx} out of {} rows", av.rows());
                let src = av.row(idx);
                for j in 0..cols {
                    data[k * cols + j] += w * src[j];
                }
            }
        }
        let out = Array::new(vec![entries.len(), cols], data);
        self.push(
            out,
            Op::LinCombRows {
                input: a,
                entries: entries.to_vec(),
            },
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: Real = self.value(a).data().iter().sum();
        self.push(Array::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as Real)
    }

    /// Mean smooth-L1 (beta = 1) between a prediction and a constant target.
    pub fn smooth_l1(&mut self, pred: Var, target: &Array) -> Var {
        let pv = self.value(pred);
        shape_check!(
            pv.shape() == target.shape(),
            "smooth_l1 shape mismatch {:?} vs {:?}",
            pv.shape(),
            target.shape()
        );
        let n = pv.len() as Real;
        let mut sum = 0.0 as Real;
        for (p, t) in pv.data().iter().zip(target.data()) {
            let r = p - t;
            sum += if r.abs() < 1.0 {
                0.5 * r * r
            } else {
                r.abs() - 0.5
            };
        }
        self.push(
            Array::scalar(sum / n),
            Op::SmoothL1 {
                pred,
                target: target.clone(),
            },
        )
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(
            self.value(loss).len(),
            1,
            "contract error: backward from non-scalar {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Array>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array::scalar(1.0));
        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            // Gradients of constants are never read; drop them.
            if let Op::Leaf {
                requires_grad: false,
            } = self.nodes[i].op
            {
                continue;
            }
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, i: usize, g: &Array, grads: &mut Vec<Option<Array>>) {
        let acc = |grads: &mut Vec<Option<Array>>, v: Var, delta: Array| {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let bd = self.value(*b).clone();
                let ad = self.value(*a).clone();
                let ga = Array::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(bd.data()).map(|(x, y)| x * y).collect(),
                );
                let gb = Array::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(ad.data()).map(|(x, y)| x * y).collect(),
                );
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Scale(a, k) => {
                acc(grads, *a, g.map(|v| v * k));
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                let cols = self.value(*row).cols();
                let mut rg = vec![0.0 as Real; cols];
                for (idx, v) in g.data().iter().enumerate() {
                    rg[idx % cols] += v;
                }
                acc(grads, *row, Array::new(vec![1, cols], rg));
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row).clone();
                let av = self.value(*a).clone();
                let cols = rv.cols();
                let ga = Array::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .enumerate()
                        .map(|(idx, v)| v * rv.data()[idx % cols])
                        .collect(),
                );
                let mut rg = vec![0.0 as Real; cols];
                for (idx, v) in g.data().iter().enumerate() {
                    rg[idx % cols] += v * av.data()[idx];
                }
                acc(grads, *a, ga);
                acc(grads, *row, Array::new(vec![1, cols], rg));
            }
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(grads, *a, mm_bt(g, bv));
                acc(grads, *b, mm_at(av, g));
            }
            Op::Transpose(a) => {
                let (n, m) = (g.rows(), g.cols());
                let mut data = vec![0.0 as Real; n * m];
                for r in 0..n {
                    for c in 0..m {
                        data[c * n + r] = g.at2(r, c);
                    }
                }
                acc(grads, *a, Array::new(vec![m, n], data));
            }
            Op::LayerNorm { input, eps } => {
                let x = self.value(*input);
                let (n, d) = (x.rows(), x.cols());
                let mut out = vec![0.0 as Real; n * d];
                for r in 0..n {
                    let row = x.row(r);
                    let mean: Real = row.iter().sum::<Real>() / d as Real;
                    let var: Real =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
                    let inv = 1.0 / (var + eps).sqrt();
                    let grow = g.row(r);
                    let y: Vec<Real> = row.iter().map(|v| (v - mean) * inv).collect();
                    let gmean: Real = grow.iter().sum::<Real>() / d as Real;
                    let gymean: Real = grow
                        .iter()
                        .zip(&y)
                        .map(|(gv, yv)| gv * yv)
                        .sum::<Real>()
                        / d as Real;
                    for c in 0..d {
                        out[r * d + c] = inv * (grow[c] - gmean - y[c] * gymean);
                    }
                }
                acc(grads, *input, Array::new(vec![n, d], out));
            }
            Op::Softmax { input, mask } => {
                let y = &self.nodes[i].value;
                let (n, d) = (y.rows(), y.cols());
                let valid = |j: usize| mask.as_ref().map_or(true, |m| m[j]);
                let mut out = vec![0.0 as Real; n * d];
                for r in 0..n {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: Real = (0..d)
                        .filter(|&j| valid(j))
                        .map(|j| yr[j] * gr[j])
                        .sum();
                    for c in 0..d {
                        if valid(c) {
                            out[r * d + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                }
                acc(grads, *input, Array::new(vec![n, d], out));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| gv * gelu_grad(v))
                    .collect();
                acc(grads, *a, Array::new(x.shape().to_vec(), data));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yv, &gv)| gv * (1.0 - yv * yv))
                    .collect();
                acc(grads, *a, Array::new(y.shape().to_vec(), data));
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    let data = g.data()[offset * cols..(offset + r) * cols].to_vec();
                    acc(grads, p, Array::new(vec![r, cols], data));
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut data = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        data.extend_from_slice(&g.row(r)[offset..offset + c]);
                    }
                    acc(grads, p, Array::new(vec![rows, c], data));
                    offset += c;
                    let _ = total;
                }
            }
            Op::SliceRows { input, start, end } => {
                let src = self.value(*input);
                let mut full = Array::zeros(src.shape());
                let cols = src.cols();
                full.data_mut()[start * cols..end * cols].copy_from_slice(g.data());
                acc(grads, *input, full);
            }
            Op::SliceCols { input, start, end } => {
                let src = self.value(*input);
                let mut full = Array::zeros(src.shape());
                let cols = src.cols();
                for r in 0..src.rows() {
                    let gr = g.row(r);
                    full.data_mut()[r * cols + start..r * cols + end].copy_from_slice(gr);
                }
                acc(grads, *input, full);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(grads, *a, g.reshaped(&shape));
            }
            Op::GatherRows { input, indices } => {
                let src = self.value(*input);
                let cols = src.cols();
                let mut full = Array::zeros(src.shape());
                for (k, &idx) in indices.iter().enumerate() {
                    let gr = g.row(k);
                    let dst = &mut full.data_mut()[idx * cols..(idx + 1) * cols];
                    for j in 0..cols {
                        dst[j] += gr[j];
                    }
                }
                acc(grads, *input, full);
            }
            Op::LinCombRows { input, entries } => {
                let src = self.value(*input);
                let cols = src.cols();
                let mut full = Array::zeros(src.shape());
                for (k, entry) in entries.iter().enumerate() {
                    let gr = g.row(k);
                    for &(idx, w) in entry {
                        let dst = &mut full.data_mut()[idx * cols..(idx + 1) * cols];
                        for j in 0..cols {
                            dst[j] += w * gr[j];
                        }
                    }
                }
                acc(grads, *input, full);
            }
            Op::SumAll(a) => {
                let shape = self.value(*a).shape().to_vec();
                let gv = g.scalar_value();
                acc(grads, *a, Array::full(&shape, gv));
            }
            Op::SmoothL1 { pred, target } => {
                let pv = self.value(*pred);
                let n = pv.len() as Real;
                let gv = g.scalar_value();
                let data = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(p, t)| {
                        let r = p - t;
                        gv * r.clamp(-1.0, 1.0) / n
                    })
                    .collect();
                acc(grads, *pred, Array::new(pv.shape().to_vec(), data));
            }
        }
    }
}

fn gelu_fwd(x: Real) -> Real {
    let c = (2.0 / std::f64::consts::PI).sqrt() as Real;
    let u = c * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: Real) -> Real {
    let c = (2.0 / std::f64::consts::PI).sqrt() as Real;
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x)
}

fn mm(a: &Array, b: &Array) -> Array {
    let (n, m) = (a.rows(), b.cols());
    let mut data = vec![0.0 as Real; n * m];
    for i in 0..n {
        let ar = a.row(i);
        let out = &mut data[i * m..(i + 1) * m];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = b.row(p);
            for j in 0..m {
                out[j] += av * br[j];
            }
        }
    }
    Array::new(vec![n, m], data)
}

/// a^T * b
fn mm_at(a: &Array, b: &Array) -> Array {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let _ = n;
    let mut data = vec![0.0 as Real; k * m];
    for i in 0..n {
        let ar = a.row(i);
        let br = b.row(i);
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out = &mut data[p * m..(p + 1) * m];
            for j in 0..m {
                out[j] += av * br[j];
            }
        }
    }
    Array::new(vec![k, m], data)
}

/// a * b^T
fn mm_bt(a: &Array, b: &Array) -> Array {
    let (n, k, m) = (a.rows(), a.cols(), b.rows());
    let mut data = vec![0.0 as Real; n * m];
    for i in 0..n {
        let ar = a.row(i);
        let out = &mut data[i * m..(i + 1) * m];
        for j in 0..m {
            let br = b.row(j);
            let mut s = 0.0 as Real;
            for p in 0..k {
                s += ar[p] * br[p];
            }
            out[j] = s;
        }
    }
    Array::new(vec![n, m], data)
}
