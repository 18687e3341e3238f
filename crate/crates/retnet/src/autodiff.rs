//! Reverse-mode automatic differentiation over the kernel set in [`ops`].
//!
//! A [`Graph`] is an eager tape: each builder method computes its result
//! immediately and records the op. `backward` walks the tape in reverse and
//! accumulates adjoints into every leaf marked as a parameter. The op set is
//! exactly what the sequence models in this crate need; there is no
//! general-purpose broadcasting.
//!
//! The companion oracle is [`finite_diff`]: central differences over the
//! same scalar-valued computation. Gradient correctness everywhere in this
//! crate is defined as agreement between the two.
//!
//! [`ops`]: crate::ops

use crate::error::{Error, Result};
use crate::ops::{self, Sign};
use crate::tensor::{Precision, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// `a[i][j] + v[j]`
    AddRowVec { a: NodeId, v: NodeId },
    /// `a[i][j] * v[j]`
    MulRowVec { a: NodeId, v: NodeId },
    /// `a[i][j] * col[i]` where `col` is a graph node of shape `[rows]`
    MulColVec { a: NodeId, col: NodeId },
    Scale { a: NodeId, c: f64 },
    /// Elementwise product with a constant tensor (no gradient to the mask).
    MulConst { a: NodeId, k: Tensor },
    AddConst { a: NodeId },
    /// Row `i` scaled by the constant `col[i]`.
    MulConstCol { a: NodeId, col: Vec<f64> },
    /// `[rows x cols] -> [rows]`
    RowSum { a: NodeId },
    /// `max(|x|, 1)` elementwise
    ClampAbsMin1 { a: NodeId },
    Recip { a: NodeId },
    RotateRows { a: NodeId, angles: Tensor, positions: Vec<usize>, sign: Sign },
    GroupNorm { a: NodeId, groups: usize, eps: f64 },
    Swish { a: NodeId },
    Gelu { a: NodeId },
    SoftmaxRows { a: NodeId },
    /// Gather rows of `table` by token id.
    Embed { table: NodeId, tokens: Vec<u32> },
    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    CrossEntropy { logits: NodeId, targets: Vec<u32> },
    SliceRows { a: NodeId, start: usize, len: usize },
    ConcatRows { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    Sum { a: NodeId },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | Add { a, b } | Sub { a, b } | Mul { a, b } => vec![*a, *b],
            AddRowVec { a, v } | MulRowVec { a, v } => vec![*a, *v],
            MulColVec { a, col } => vec![*a, *col],
            Scale { a, .. }
            | MulConst { a, .. }
            | AddConst { a }
            | MulConstCol { a, .. }
            | RowSum { a }
            | ClampAbsMin1 { a }
            | Recip { a }
            | RotateRows { a, .. }
            | GroupNorm { a, .. }
            | Swish { a }
            | Gelu { a }
            | SoftmaxRows { a }
            | SliceRows { a, .. }
            | SliceCols { a, .. }
            | Sum { a } => vec![*a],
            Embed { table, .. } => vec![*table],
            CrossEntropy { logits, .. } => vec![*logits],
            ConcatRows { parts } | ConcatCols { parts } => parts.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Eager tape. Confined to one thread; build, read the loss, call
/// [`Graph::backward`], then read leaf gradients.
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph { nodes: Vec::new(), precision }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. this node.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, id: NodeId) -> Tensor {
        let node = &self.nodes[id.0];
        let data = node
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; node.value.numel()]);
        Tensor::new(node.value.shape().to_vec(), data, Precision::Fp64).expect("grad shape")
    }

    fn push(&mut self, op: Op, mut value: Tensor) -> NodeId {
        debug_assert!(
            value.precision() == self.precision,
            "tensor precision must match the graph"
        );
        value.quantize_in_place();
        let requires_grad = op
            .inputs()
            .iter()
            .any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node { op, value, grad: None, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf: gradients accumulate here.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.nodes[id.0].requires_grad = true;
        id
    }

    /// Non-trainable leaf (inputs, masks, frozen state).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    // ── forward builders ────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_ex(a, false, b, false)
    }

    pub fn matmul_ex(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> NodeId {
        let v = ops::matmul_ex(self.value(a), ta, self.value(b), tb)
            .expect("graph matmul: shape mismatch");
        self.push(Op::MatMul { a, b, ta, tb }, v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.elementwise(a, b, "add", |x, y| x + y);
        self.push(Op::Add { a, b }, v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.elementwise(a, b, "sub", |x, y| x - y);
        self.push(Op::Sub { a, b }, v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.elementwise(a, b, "mul", |x, y| x * y);
        self.push(Op::Mul { a, b }, v)
    }

    fn elementwise(
        &self,
        a: NodeId,
        b: NodeId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "graph {what}: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data, self.precision).expect("same shape")
    }

    pub fn add_row_vec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let val = self.rowvec_apply(a, v, |x, y| x + y);
        self.push(Op::AddRowVec { a, v }, val)
    }

    pub fn mul_row_vec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let val = self.rowvec_apply(a, v, |x, y| x * y);
        self.push(Op::MulRowVec { a, v }, val)
    }

    fn rowvec_apply(&self, a: NodeId, v: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tv) = (self.value(a), self.value(v));
        let cols = ta.cols();
        assert_eq!(tv.numel(), cols, "graph row-vec op: vector length mismatch");
        let vd = tv.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| f(*x, vd[i % cols]))
            .collect();
        Tensor::new(ta.shape().to_vec(), data, self.precision).expect("same shape")
    }

    pub fn mul_col_vec(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let (ta, tc) = (self.value(a), self.value(col));
        let (rows, cols) = (ta.rows(), ta.cols());
        assert_eq!(tc.numel(), rows, "graph mul_col_vec: column length mismatch");
        let cd = tc.data();
        let mut data = Vec::with_capacity(ta.numel());
        for r in 0..rows {
            let m = cd[r];
            data.extend(ta.row(r).iter().map(|x| x * m));
        }
        let _ = cols;
        let v = Tensor::new(ta.shape().to_vec(), data, self.precision).expect("same shape");
        self.push(Op::MulColVec { a, col }, v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| c * x);
        self.push(Op::Scale { a, c }, v)
    }

    pub fn mul_const(&mut self, a: NodeId, k: Tensor) -> NodeId {
        let ta = self.value(a);
        assert_eq!(ta.shape(), k.shape(), "graph mul_const: shape mismatch");
        let data = ta.data().iter().zip(k.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data, self.precision).expect("same shape");
        self.push(Op::MulConst { a, k }, v)
    }

    pub fn add_const(&mut self, a: NodeId, k: Tensor) -> NodeId {
        let ta = self.value(a);
        assert_eq!(ta.shape(), k.shape(), "graph add_const: shape mismatch");
        let data = ta.data().iter().zip(k.data()).map(|(x, y)| x + y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data, self.precision).expect("same shape");
        self.push(Op::AddConst { a }, v)
    }

    pub fn mul_const_col(&mut self, a: NodeId, col: Vec<f64>) -> NodeId {
        let ta = self.value(a);
        let rows = ta.rows();
        assert_eq!(col.len(), rows, "graph mul_const_col: column length mismatch");
        let mut data = Vec::with_capacity(ta.numel());
        for r in 0..rows {
            let m = col[r];
            data.extend(ta.row(r).iter().map(|x| x * m));
        }
        let v = Tensor::new(ta.shape().to_vec(), data, self.precision).expect("same shape");
        self.push(Op::MulConstCol { a, col }, v)
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let data = (0..ta.rows()).map(|r| ta.row(r).iter().sum()).collect();
        let v = Tensor::new(vec![ta.rows()], data, self.precision).expect("rows");
        self.push(Op::RowSum { a }, v)
    }

    pub fn clamp_abs_min1(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.abs().max(1.0));
        self.push(Op::ClampAbsMin1 { a }, v)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(Op::Recip { a }, v)
    }

    pub fn rotate_rows(
        &mut self,
        a: NodeId,
        angles: Tensor,
        positions: Vec<usize>,
        sign: Sign,
    ) -> NodeId {
        let v = ops::rotate_rows(self.value(a), &angles, &positions, sign)
            .expect("graph rotate: bad shape");
        self.push(Op::RotateRows { a, angles, positions, sign }, v)
    }

    pub fn group_norm(&mut self, a: NodeId, groups: usize, eps: f64) -> NodeId {
        let v = ops::group_norm(self.value(a), groups, eps, None)
            .expect("graph group_norm: bad group count");
        self.push(Op::GroupNorm { a, groups, eps }, v)
    }

    pub fn swish(&mut self, a: NodeId) -> NodeId {
        let v = ops::swish(self.value(a));
        self.push(Op::Swish { a }, v)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = ops::gelu(self.value(a));
        self.push(Op::Gelu { a }, v)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = ops::softmax_rows(self.value(a));
        self.push(Op::SoftmaxRows { a }, v)
    }

    pub fn embed(&mut self, table: NodeId, tokens: &[u32]) -> NodeId {
        let tt = self.value(table);
        let cols = tt.cols();
        let mut data = Vec::with_capacity(tokens.len() * cols);
        for &t in tokens {
            data.extend_from_slice(tt.row(t as usize));
        }
        let v = Tensor::new(vec![tokens.len(), cols], data, self.precision).expect("embed");
        self.push(Op::Embed { table, tokens: tokens.to_vec() }, v)
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32]) -> NodeId {
        let lt = self.value(logits);
        assert_eq!(lt.rows(), targets.len(), "graph cross_entropy: length mismatch");
        let loss = ce_forward(lt, targets);
        let v = Tensor::new(vec![1], vec![loss], self.precision).expect("scalar");
        self.push(Op::CrossEntropy { logits, targets: targets.to_vec() }, v)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let ta = self.value(a);
        let cols = ta.cols();
        assert!(start + len <= ta.rows(), "graph slice_rows: out of range");
        let data = ta.data()[start * cols..(start + len) * cols].to_vec();
        let v = Tensor::new(vec![len, cols], data, self.precision).expect("slice");
        self.push(Op::SliceRows { a, start, len }, v)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(tp.cols(), cols, "graph concat_rows: column mismatch");
            rows += tp.rows();
            data.extend_from_slice(tp.data());
        }
        let v = Tensor::new(vec![rows, cols], data, self.precision).expect("concat");
        self.push(Op::ConcatRows { parts: parts.to_vec() }, v)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        assert!(start + len <= cols, "graph slice_cols: out of range");
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&ta.row(r)[start..start + len]);
        }
        let v = Tensor::new(vec![rows, len], data, self.precision).expect("slice");
        self.push(Op::SliceCols { a, start, len }, v)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let tp = self.value(p);
                assert_eq!(tp.rows(), rows, "graph concat_cols: row mismatch");
                data.extend_from_slice(tp.row(r));
            }
        }
        let v = Tensor::new(vec![rows, total], data, self.precision).expect("concat");
        self.push(Op::ConcatCols { parts: parts.to_vec() }, v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        let v = Tensor::new(vec![1], vec![s], self.precision).expect("scalar");
        self.push(Op::Sum { a }, v)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Rejects non-scalar nodes.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &grad);
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let numel = self.nodes[id.0].value.numel();
        let g = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; numel]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    fn propagate(&mut self, out: usize, op: &Op, grad: &[f64]) {
        match op {
            Op::Leaf => {}

            Op::MatMul { a, b, ta, tb } => {
                let gt = Tensor::new(
                    self.nodes[out].value.shape().to_vec(),
                    grad.to_vec(),
                    Precision::Fp64,
                )
                .expect("grad shape");
                if self.nodes[a.0].requires_grad {
                    let av = self.value(*a).clone();
                    let bv = self.value(*b).clone();
                    let da = if *ta {
                        ops::matmul_ex(&bv, *tb, &gt, true)
                    } else {
                        ops::matmul_ex(&gt, false, &bv, !*tb)
                    }
                    .expect("matmul backward");
                    let _ = av;
                    self.accumulate(*a, da.data());
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.value(*a).clone();
                    let db = if *tb {
                        ops::matmul_ex(&gt, true, &av, *ta)
                    } else {
                        ops::matmul_ex(&av, !*ta, &gt, false)
                    }
                    .expect("matmul backward");
                    self.accumulate(*b, db.data());
                }
            }

            Op::Add { a, b } => {
                self.accumulate(*a, grad);
                self.accumulate(*b, grad);
            }

            Op::Sub { a, b } => {
                self.accumulate(*a, grad);
                let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                self.accumulate(*b, &neg);
            }

            Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let bv = self.value(*b).data().to_vec();
                    let da: Vec<f64> = grad.iter().zip(&bv).map(|(g, y)| g * y).collect();
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.value(*a).data().to_vec();
                    let db: Vec<f64> = grad.iter().zip(&av).map(|(g, x)| g * x).collect();
                    self.accumulate(*b, &db);
                }
            }

            Op::AddRowVec { a, v } => {
                self.accumulate(*a, grad);
                if self.nodes[v.0].requires_grad {
                    let cols = self.value(*v).numel();
                    let mut dv = vec![0.0; cols];
                    for (i, g) in grad.iter().enumerate() {
                        dv[i % cols] += g;
                    }
                    self.accumulate(*v, &dv);
                }
            }

            Op::MulRowVec { a, v } => {
                let cols = self.value(*v).numel();
                if self.nodes[a.0].requires_grad {
                    let vd = self.value(*v).data().to_vec();
                    let da: Vec<f64> = grad
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * vd[i % cols])
                        .collect();
                    self.accumulate(*a, &da);
                }
                if self.nodes[v.0].requires_grad {
                    let ad = self.value(*a).data().to_vec();
                    let mut dv = vec![0.0; cols];
                    for (i, g) in grad.iter().enumerate() {
                        dv[i % cols] += g * ad[i];
                    }
                    self.accumulate(*v, &dv);
                }
            }

            Op::MulColVec { a, col } => {
                let (rows, cols) = {
                    let t = self.value(*a);
                    (t.rows(), t.cols())
                };
                if self.nodes[a.0].requires_grad {
                    let cd = self.value(*col).data().to_vec();
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            da[r * cols + c] = grad[r * cols + c] * cd[r];
                        }
                    }
                    self.accumulate(*a, &da);
                }
                if self.nodes[col.0].requires_grad {
                    let ad = self.value(*a).data().to_vec();
                    let mut dc = vec![0.0; rows];
                    for r in 0..rows {
                        for c in 0..cols {
                            dc[r] += grad[r * cols + c] * ad[r * cols + c];
                        }
                    }
                    self.accumulate(*col, &dc);
                }
            }

            Op::Scale { a, c } => {
                let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                self.accumulate(*a, &da);
            }

            Op::MulConst { a, k } => {
                let da: Vec<f64> = grad.iter().zip(k.data()).map(|(g, m)| g * m).collect();
                self.accumulate(*a, &da);
            }

            Op::AddConst { a } => {
                self.accumulate(*a, grad);
            }

            Op::MulConstCol { a, col } => {
                let cols = self.value(*a).cols();
                let da: Vec<f64> = grad
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * col[i / cols])
                    .collect();
                self.accumulate(*a, &da);
            }

            Op::RowSum { a } => {
                let (rows, cols) = {
                    let t = self.value(*a);
                    (t.rows(), t.cols())
                };
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] = grad[r];
                    }
                }
                self.accumulate(*a, &da);
            }

            Op::ClampAbsMin1 { a } => {
                let xs = self.value(*a).data().to_vec();
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&xs)
                    .map(|(g, x)| if x.abs() > 1.0 { g * x.signum() } else { 0.0 })
                    .collect();
                self.accumulate(*a, &da);
            }

            Op::Recip { a } => {
                let ys = self.nodes[out].value.data().to_vec();
                let da: Vec<f64> = grad.iter().zip(&ys).map(|(g, y)| -g * y * y).collect();
                self.accumulate(*a, &da);
            }

            Op::RotateRows { a, angles, positions, sign } => {
                // Orthogonal map: the adjoint is the inverse rotation.
                let gt = Tensor::new(
                    self.value(*a).shape().to_vec(),
                    grad.to_vec(),
                    Precision::Fp64,
                )
                .expect("grad shape");
                let da = ops::rotate_rows(&gt, angles, positions, sign.flip())
                    .expect("rotate backward");
                self.accumulate(*a, da.data());
            }

            Op::GroupNorm { a, groups, eps } => {
                let x = self.value(*a).clone();
                let (rows, cols) = (x.rows(), x.cols());
                let gsize = cols / groups;
                let xd = x.data();
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for g in 0..*groups {
                        let start = r * cols + g * gsize;
                        let block = &xd[start..start + gsize];
                        let gblock = &grad[start..start + gsize];
                        let m = gsize as f64;
                        let mean = block.iter().sum::<f64>() / m;
                        let var =
                            block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                        let floored = var <= eps * eps;
                        let denom = var.max(eps * eps).sqrt();
                        let gmean = gblock.iter().sum::<f64>() / m;
                        if floored {
                            // denominator is the constant eps
                            for i in 0..gsize {
                                da[start + i] = (gblock[i] - gmean) / denom;
                            }
                        } else {
                            let mut gdotx = 0.0;
                            for i in 0..gsize {
                                gdotx += gblock[i] * (block[i] - mean) / denom;
                            }
                            gdotx /= m;
                            for i in 0..gsize {
                                let xt = (block[i] - mean) / denom;
                                da[start + i] = (gblock[i] - gmean - xt * gdotx) / denom;
                            }
                        }
                    }
                }
                self.accumulate(*a, &da);
            }

            Op::Swish { a } => {
                let xs = self.value(*a).data().to_vec();
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&xs)
                    .map(|(g, x)| {
                        let s = ops::sigmoid_scalar(*x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.accumulate(*a, &da);
            }

            Op::Gelu { a } => {
                let xs = self.value(*a).data().to_vec();
                const C: f64 = 0.797_884_560_802_865_4;
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&xs)
                    .map(|(g, x)| {
                        let inner = C * (x + 0.044715 * x * x * x);
                        let t = inner.tanh();
                        let sech2 = 1.0 - t * t;
                        let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner)
                    })
                    .collect();
                self.accumulate(*a, &da);
            }

            Op::SoftmaxRows { a } => {
                let y = self.nodes[out].value.clone();
                let (rows, cols) = (y.rows(), y.cols());
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yrow = y.row(r);
                    let grow = &grad[r * cols..(r + 1) * cols];
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for c in 0..cols {
                        da[r * cols + c] = yrow[c] * (grow[c] - dot);
                    }
                }
                self.accumulate(*a, &da);
            }

            Op::Embed { table, tokens } => {
                if self.nodes[table.0].requires_grad {
                    let cols = self.value(*table).cols();
                    let numel = self.value(*table).numel();
                    let mut dt = vec![0.0; numel];
                    for (r, &tok) in tokens.iter().enumerate() {
                        let dst = tok as usize * cols;
                        for c in 0..cols {
                            dt[dst + c] += grad[r * cols + c];
                        }
                    }
                    self.accumulate(*table, &dt);
                }
            }

            Op::CrossEntropy { logits, targets } => {
                let lt = self.value(*logits).clone();
                let (rows, cols) = (lt.rows(), lt.cols());
                let scale = grad[0] / rows as f64;
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    let row = lt.row(r);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for c in 0..cols {
                        let p = (row[c] - max).exp() / sum;
                        let y = if c == targets[r] as usize { 1.0 } else { 0.0 };
                        da[r * cols + c] = scale * (p - y);
                    }
                }
                self.accumulate(*logits, &da);
            }

            Op::SliceRows { a, start, len } => {
                let cols = self.value(*a).cols();
                let numel = self.value(*a).numel();
                let mut da = vec![0.0; numel];
                da[start * cols..(start + len) * cols].copy_from_slice(grad);
                self.accumulate(*a, &da);
            }

            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let slice = grad[offset..offset + n].to_vec();
                    self.accumulate(p, &slice);
                    offset += n;
                }
            }

            Op::SliceCols { a, start, len } => {
                let (rows, cols) = {
                    let t = self.value(*a);
                    (t.rows(), t.cols())
                };
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..*len {
                        da[r * cols + start + c] = grad[r * len + c];
                    }
                }
                self.accumulate(*a, &da);
            }

            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let rows = self.value(parts[0]).rows();
                let mut offset = 0;
                for &p in parts {
                    let pcols = self.value(p).cols();
                    let mut dp = vec![0.0; rows * pcols];
                    for r in 0..rows {
                        for c in 0..pcols {
                            dp[r * pcols + c] = grad[r * total + offset + c];
                        }
                    }
                    self.accumulate(p, &dp);
                    offset += pcols;
                }
            }

            Op::Sum { a } => {
                let numel = self.value(*a).numel();
                let da = vec![grad[0]; numel];
                self.accumulate(*a, &da);
            }
        }
    }
}

/// Stable mean negative log-likelihood in nats.
fn ce_forward(logits: &Tensor, targets: &[u32]) -> f64 {
    let cols = logits.cols();
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t as usize];
        let _ = cols;
    }
    total / targets.len() as f64
}

/// Central-difference gradient estimate `(f(p+h) - f(p-h)) / 2h`, one
/// coordinate at a time, over every tensor in `params`.
///
/// This is the verification oracle for [`Graph::backward`]; it never touches
/// the tape. Use fp64 parameters.
pub fn finite_diff<F>(mut f: F, params: &[Tensor], step: f64) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let numel = params[pi].numel();
        let mut g = vec![0.0; numel];
        for i in 0..numel {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + step;
            let fp = f(&work);
            work[pi].data_mut()[i] = orig - step;
            let fm = f(&work);
            work[pi].data_mut()[i] = orig;
            g[i] = (fp - fm) / (2.0 * step);
        }
        grads.push(Tensor::new(params[pi].shape().to_vec(), g, Precision::Fp64).expect("shape"));
    }
    grads
}

/// Worst relative disagreement between two gradient sets. The denominator is
/// floored so that near-zero entries compare absolutely.
pub fn max_rel_err(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (x, y) in a.data().iter().zip(n.data()) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}
