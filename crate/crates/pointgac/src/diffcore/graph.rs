//! Tape-based reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is an append-only arena of nodes; every operation records its
//! inputs so [`Graph::backward`] can sweep the tape in reverse. Graphs are
//! built per forward pass and dropped afterwards, which keeps ownership
//! simple and makes every pass deterministic: node order is program order.
//!
//! Every op validates shapes and checks its output for NaN/Inf; a non-finite
//! value is a fault and panics immediately rather than poisoning the run.

use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Tensor),
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Silu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    UnitRows { x: Var, norms: Vec<f64> },
    MaxRows { x: Var, argmax: Vec<usize> },
    MeanAll(Var),
    SumAll(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize, len: usize },
    GatherRows { x: Var, indices: Vec<usize> },
    ScatterRows { x: Var, indices: Vec<usize> },
    RepeatRow { x: Var, n: usize },
    Transpose(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    trainable: bool,
}

/// Computation tape. Single-owner, single-threaded by construction.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a trainable leaf (its gradient survives `backward`).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Register a non-trainable leaf (inputs, targets, frozen tables).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a leaf after `backward`; zero tensor if it was never
    /// reached by the sweep.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()),
            None => Tensor::zeros(node.value.shape().to_vec()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, trainable: bool) -> Var {
        if !value.is_finite() {
            panic!("non-finite value produced by {:?}", op_name(&op));
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(ta.shape(), tb.shape(), "invalid argument: add shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        self.push(t, Op::Add(a, b), false)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(ta.shape(), tb.shape(), "invalid argument: sub shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        self.push(t, Op::Sub(a, b), false)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(ta.shape(), tb.shape(), "invalid argument: mul shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        self.push(t, Op::Mul(a, b), false)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.val(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect());
        self.push(t, Op::Scale(a, c), false)
    }

    /// Add a constant to every element; gradient passes through unchanged.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ta = self.val(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x + c).collect());
        self.push(t, Op::AddScalar(a), false)
    }

    /// Elementwise product with a constant tensor that receives no gradient.
    pub fn mul_const(&mut self, a: Var, k: &Tensor) -> Var {
        let ta = self.val(a);
        assert_eq!(ta.shape(), k.shape(), "invalid argument: mul_const shape mismatch");
        let data = ta.data().iter().zip(k.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        self.push(t, Op::MulConst(a, k.clone()), false)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        assert_eq!(k, k2, "invalid argument: matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_acc(&mut out, ta.data(), tb.data(), m, k, n);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), false)
    }

    /// Broadcast-add a length-C vector to every row of an R×C matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(bias));
        let (r, c) = (ta.rows(), ta.cols());
        assert_eq!(tb.numel(), c, "invalid argument: add_row bias length");
        let mut data = ta.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += tb.data()[j];
            }
        }
        self.push(Tensor::matrix(r, c, data), Op::AddRow(a, bias), false)
    }

    /// Broadcast-multiply every row of an R×C matrix by a length-C vector.
    pub fn mul_row(&mut self, a: Var, gain: Var) -> Var {
        let (ta, tg) = (self.val(a), self.val(gain));
        let (r, c) = (ta.rows(), ta.cols());
        assert_eq!(tg.numel(), c, "invalid argument: mul_row gain length");
        let mut data = ta.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] *= tg.data()[j];
            }
        }
        self.push(Tensor::matrix(r, c, data), Op::MulRow(a, gain), false)
    }

    // ---- nonlinearities ----

    /// SiLU: x * sigmoid(x).
    pub fn silu(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let data = ta.data().iter().map(|&x| x * sigmoid(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        self.push(t, Op::Silu(a), false)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            softmax_into(&ta.data()[i * c..(i + 1) * c], &mut data[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(ta.shape().to_vec(), data);
        self.push(t, Op::SoftmaxRows(a), false)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &ta.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                data[i * c + j] = row[j] - lse;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data);
        self.push(t, Op::LogSoftmaxRows(a), false)
    }

    /// Per-row standardization: (x - mean) / sqrt(var + eps). Gain/bias are
    /// applied separately via `mul_row`/`add_row`.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.val(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &ta.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * is;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data);
        self.push(t, Op::LayerNormRows { x: a, inv_std }, false)
    }

    /// L2-normalize each row.
    pub fn unit_rows(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &ta.data()[i * c..(i + 1) * c];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(n > 0.0, "invalid argument: unit_rows on zero row");
            norms[i] = n;
            for j in 0..c {
                data[i * c + j] = row[j] / n;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data);
        self.push(t, Op::UnitRows { x: a, norms }, false)
    }

    /// Column-wise max over rows, producing a 1×C matrix. Ties route the
    /// gradient to the lowest row index.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let (r, c) = (ta.rows(), ta.cols());
        assert!(r >= 1, "invalid argument: max_rows on empty matrix");
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0usize; c];
        for i in 0..r {
            for j in 0..c {
                let v = ta.data()[i * c + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        self.push(Tensor::matrix(1, c, out), Op::MaxRows { x: a, argmax }, false)
    }

    // ---- reductions ----

    pub fn mean_all(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let m = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        self.push(Tensor::scalar(m), Op::MeanAll(a), false)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let s = ta.data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::SumAll(a), false)
    }

    // ---- structure ----

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "invalid argument: concat_rows of nothing");
        let c = self.val(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.val(p);
            assert_eq!(t.cols(), c, "invalid argument: concat_rows column mismatch");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push(Tensor::matrix(rows, c, data), Op::ConcatRows(parts.to_vec()), false)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "invalid argument: concat_cols of nothing");
        let r = self.val(parts[0]).rows();
        let total_c: usize = parts.iter().map(|&p| self.val(p).cols()).sum();
        let mut data = vec![0.0; r * total_c];
        let mut offset = 0;
        for &p in parts {
            let t = self.val(p);
            assert_eq!(t.rows(), r, "invalid argument: concat_cols row mismatch");
            let c = t.cols();
            for i in 0..r {
                data[i * total_c + offset..i * total_c + offset + c]
                    .copy_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        self.push(Tensor::matrix(r, total_c, data), Op::ConcatCols(parts.to_vec()), false)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.val(a);
        let (r, c) = (ta.rows(), ta.cols());
        assert!(start + len <= c, "invalid argument: slice_cols out of range");
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&ta.data()[i * c + start..i * c + start + len]);
        }
        self.push(Tensor::matrix(r, len, data), Op::SliceCols { x: a, start, len }, false)
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let ta = self.val(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            assert!(i < r, "invalid argument: gather_rows index {i} >= {r}");
            data.extend_from_slice(&ta.data()[i * c..(i + 1) * c]);
        }
        let t = Tensor::matrix(indices.len(), c, data);
        self.push(t, Op::GatherRows { x: a, indices: indices.to_vec() }, false)
    }

    /// Place row i of `a` at row `indices[i]` of a zero-filled `total`×C
    /// matrix. Indices must be distinct.
    pub fn scatter_rows(&mut self, a: Var, indices: &[usize], total: usize) -> Var {
        let ta = self.val(a);
        let c = ta.cols();
        assert_eq!(ta.rows(), indices.len(), "invalid argument: scatter_rows arity");
        let mut data = vec![0.0; total * c];
        for (i, &dst) in indices.iter().enumerate() {
            assert!(dst < total, "invalid argument: scatter_rows index {dst} >= {total}");
            data[dst * c..(dst + 1) * c].copy_from_slice(&ta.data()[i * c..(i + 1) * c]);
        }
        let t = Tensor::matrix(total, c, data);
        self.push(t, Op::ScatterRows { x: a, indices: indices.to_vec() }, false)
    }

    /// Tile a single row (1×C or length-C vector) n times.
    pub fn repeat_row(&mut self, a: Var, n: usize) -> Var {
        let ta = self.val(a);
        assert_eq!(ta.rows(), 1, "invalid argument: repeat_row needs a single row");
        let c = ta.cols();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(ta.data());
        }
        self.push(Tensor::matrix(n, c, data), Op::RepeatRow { x: a, n }, false)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = ta.data()[i * c + j];
            }
        }
        self.push(Tensor::matrix(c, r, data), Op::Transpose(a), false)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let ta = self.val(a);
        let numel: usize = shape.iter().product();
        assert_eq!(numel, ta.numel(), "invalid argument: reshape element count");
        let t = Tensor::new(shape, ta.data().to_vec());
        self.push(t, Op::Reshape(a), false)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar node. Gradients accumulate over all uses;
    /// calling it twice accumulates twice.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "invalid argument: backward from non-scalar"
        );
        self.accumulate(loss, &[1.0]);
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.nodes[idx].grad = Some(g);
        }
    }

    fn accumulate(&mut self, v: Var, g: &[f64]) {
        let node = &mut self.nodes[v.0];
        let slot = node
            .grad
            .get_or_insert_with(|| vec![0.0; node.value.numel()]);
        for (s, x) in slot.iter_mut().zip(g) {
            *s += x;
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // Ops are moved out temporarily to appease the borrow checker; they
        // are put back unchanged.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.val(*b).data())
                    .map(|(x, y)| x * y)
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(self.val(*a).data())
                    .map(|(x, y)| x * y)
                    .collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.accumulate(*a, &da);
            }
            Op::AddScalar(a) => self.accumulate(*a, g),
            Op::MulConst(a, k) => {
                let da: Vec<f64> = g.iter().zip(k.data()).map(|(x, y)| x * y).collect();
                self.accumulate(*a, &da);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let mut da = vec![0.0; m * k];
                matmul_nt_acc(&mut da, g, tb.data(), m, n, k);
                let mut db = vec![0.0; k * n];
                matmul_tn_acc(&mut db, ta.data(), g, k, m, n);
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::AddRow(a, bias) => {
                self.accumulate(*a, g);
                let c = self.val(*bias).numel();
                let r = g.len() / c;
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += g[i * c + j];
                    }
                }
                self.accumulate(*bias, &db);
            }
            Op::MulRow(a, gain) => {
                let ta = self.val(*a);
                let tg = self.val(*gain);
                let (r, c) = (ta.rows(), ta.cols());
                let mut da = vec![0.0; r * c];
                let mut dg = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[i * c + j] * tg.data()[j];
                        dg[j] += g[i * c + j] * ta.data()[i * c + j];
                    }
                }
                self.accumulate(*a, &da);
                self.accumulate(*gain, &dg);
            }
            Op::Silu(a) => {
                let da: Vec<f64> = self
                    .val(*a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| {
                        let s = sigmoid(x);
                        gy * (s + x * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let (r, c) = (y.rows(), y.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let yrow = &y.data()[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        da[i * c + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let (r, c) = (y.rows(), y.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let yrow = &y.data()[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..c {
                        da[i * c + j] = grow[j] - yrow[j].exp() * gsum;
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::LayerNormRows { x, inv_std, .. } => {
                let y = &self.nodes[idx].value;
                let (r, c) = (y.rows(), y.cols());
                let cf = c as f64;
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let yrow = &y.data()[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let gmean: f64 = grow.iter().sum::<f64>() / cf;
                    let gydot: f64 =
                        grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / cf;
                    for j in 0..c {
                        da[i * c + j] = inv_std[i] * (grow[j] - gmean - yrow[j] * gydot);
                    }
                }
                self.accumulate(*x, &da);
            }
            Op::UnitRows { x, norms } => {
                let y = &self.nodes[idx].value;
                let (r, c) = (y.rows(), y.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let yrow = &y.data()[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        da[i * c + j] = (grow[j] - yrow[j] * dot) / norms[i];
                    }
                }
                self.accumulate(*x, &da);
            }
            Op::MaxRows { x, argmax } => {
                let c = argmax.len();
                let r = self.val(*x).rows();
                let mut da = vec![0.0; r * c];
                for j in 0..c {
                    da[argmax[j] * c + j] = g[j];
                }
                self.accumulate(*x, &da);
            }
            Op::MeanAll(a) => {
                let n = self.val(*a).numel();
                let da = vec![g[0] / n as f64; n];
                self.accumulate(*a, &da);
            }
            Op::SumAll(a) => {
                let n = self.val(*a).numel();
                let da = vec![g[0]; n];
                self.accumulate(*a, &da);
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.val(p).numel();
                    let slice = g[offset..offset + len].to_vec();
                    self.accumulate(p, &slice);
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let r = self.val(parts[0]).rows();
                let total_c = g.len() / r;
                let mut offset = 0;
                for p in parts {
                    let c = self.val(p).cols();
                    let mut dp = vec![0.0; r * c];
                    for i in 0..r {
                        dp[i * c..(i + 1) * c]
                            .copy_from_slice(&g[i * total_c + offset..i * total_c + offset + c]);
                    }
                    self.accumulate(p, &dp);
                    offset += c;
                }
            }
            Op::SliceCols { x, start, len } => {
                let tx = self.val(*x);
                let (r, c) = (tx.rows(), tx.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.accumulate(*x, &da);
            }
            Op::GatherRows { x, indices } => {
                let tx = self.val(*x);
                let (r, c) = (tx.rows(), tx.cols());
                let mut da = vec![0.0; r * c];
                for (i, &src) in indices.iter().enumerate() {
                    for j in 0..c {
                        da[src * c + j] += g[i * c + j];
                    }
                }
                self.accumulate(*x, &da);
            }
            Op::ScatterRows { x, indices } => {
                let c = self.val(*x).cols();
                let mut da = vec![0.0; indices.len() * c];
                for (i, &dst) in indices.iter().enumerate() {
                    da[i * c..(i + 1) * c].copy_from_slice(&g[dst * c..(dst + 1) * c]);
                }
                self.accumulate(*x, &da);
            }
            Op::RepeatRow { x, n } => {
                let c = self.val(*x).cols();
                let mut da = vec![0.0; c];
                for i in 0..*n {
                    for j in 0..c {
                        da[j] += g[i * c + j];
                    }
                }
                self.accumulate(*x, &da);
            }
            Op::Transpose(a) => {
                let ta = self.val(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::Reshape(a) => self.accumulate(*a, g),
        }
        self.nodes[idx].op = op;
    }

    /// Leaves marked trainable, in registration order.
    pub fn trainable_leaves(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.trainable && matches!(n.op, Op::Leaf))
            .map(|(i, _)| Var(i))
            .collect()
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(_) => "add_scalar",
        Op::MulConst(..) => "mul_const",
        Op::MatMul(..) => "matmul",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::Silu(..) => "silu",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::LogSoftmaxRows(..) => "log_softmax_rows",
        Op::LayerNormRows { .. } => "layer_norm_rows",
        Op::UnitRows { .. } => "unit_rows",
        Op::MaxRows { .. } => "max_rows",
        Op::MeanAll(..) => "mean_all",
        Op::SumAll(..) => "sum_all",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols { .. } => "slice_cols",
        Op::GatherRows { .. } => "gather_rows",
        Op::ScatterRows { .. } => "scatter_rows",
        Op::RepeatRow { .. } => "repeat_row",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
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

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
