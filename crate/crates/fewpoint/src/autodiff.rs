//! Dense-tensor reverse-mode automatic differentiation.
//!
//! Tensors are handles into an implicit computation graph: every operation
//! records its inputs, so a backward pass can traverse the graph in reverse
//! topological order. Backward passes are themselves built out of graph
//! operations, which is what enables second-order differentiation for the
//! critic op set (matmul, add, scale, leaky_relu, softmax, L1/L2 norm,
//! concat, reshape, mean): [`grad`] with `create_graph = true` returns
//! gradients that can be differentiated again.
//!
//! Gradients accumulate: calling [`backward`] twice without
//! [`Tensor::zero_grad`] doubles the stored gradients.
//!
//! Tensors are rank 1 or 2, row-major, `f64`. Graphs are confined to one
//! thread; distinct graphs may run on distinct threads.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// A node in the computation graph. Cloning is cheap (shared handle).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    values: RefCell<Vec<f64>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<Node>,
}

struct Node {
    kind: OpKind,
    inputs: Vec<Tensor>,
}

#[derive(Clone)]
enum OpKind {
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Matmul,
    Transpose,
    LeakyRelu { slope: f64 },
    Softmax { axis: usize },
    MaxPoolPoints { argmax: Vec<usize> },
    ScatterColArgmax { argmax: Vec<usize>, rows: usize },
    GatherColArgmax { argmax: Vec<usize> },
    GatherRows { idx: Vec<usize> },
    ScatterAddRows { idx: Vec<usize>, rows: usize },
    Concat1D,
    ConcatCols,
    ConcatRows,
    Slice1D { start: usize, len: usize },
    EmbedSlice1D { start: usize, total: usize },
    SliceCols { start: usize, len: usize },
    EmbedCols { start: usize, total: usize },
    SliceRows { start: usize, len: usize },
    EmbedRows { start: usize, total: usize },
    Reshape,
    Mean,
    SumAll,
    SumAxis { axis: usize },
    BroadcastRow { rows: usize },
    BroadcastCol { cols: usize },
    BroadcastScalar { shape: Vec<usize> },
    AddRowBias,
    Sqrt,
    Recip,
    Abs,
    Ln,
    Sigmoid,
    ClampConst { lo: f64, hi: f64 },
    TileRows { times: usize },
    SumTiles { times: usize },
    RepeatInterleaveRows { times: usize },
    SumGroups { times: usize },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::Matmul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::LeakyRelu { .. } => "leaky_relu",
            OpKind::Softmax { .. } => "softmax",
            OpKind::MaxPoolPoints { .. } => "max_pool_points",
            OpKind::ScatterColArgmax { .. } => "scatter_col_argmax",
            OpKind::GatherColArgmax { .. } => "gather_col_argmax",
            OpKind::GatherRows { .. } => "gather_rows",
            OpKind::ScatterAddRows { .. } => "scatter_add_rows",
            OpKind::Concat1D => "concat",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::Slice1D { .. } => "slice",
            OpKind::EmbedSlice1D { .. } => "embed_slice",
            OpKind::SliceCols { .. } => "slice_cols",
            OpKind::EmbedCols { .. } => "embed_cols",
            OpKind::SliceRows { .. } => "slice_rows",
            OpKind::EmbedRows { .. } => "embed_rows",
            OpKind::Reshape => "reshape",
            OpKind::Mean => "mean",
            OpKind::SumAll => "sum",
            OpKind::SumAxis { .. } => "sum_axis",
            OpKind::BroadcastRow { .. } => "broadcast_row",
            OpKind::BroadcastCol { .. } => "broadcast_col",
            OpKind::BroadcastScalar { .. } => "broadcast_scalar",
            OpKind::AddRowBias => "add_row_bias",
            OpKind::Sqrt => "sqrt",
            OpKind::Recip => "recip",
            OpKind::Abs => "abs",
            OpKind::Ln => "ln",
            OpKind::Sigmoid => "sigmoid",
            OpKind::ClampConst { .. } => "clamp",
            OpKind::TileRows { .. } => "tile_rows",
            OpKind::SumTiles { .. } => "sum_tiles",
            OpKind::RepeatInterleaveRows { .. } => "repeat_interleave_rows",
            OpKind::SumGroups { .. } => "sum_groups",
        }
    }

    /// Whether this op may appear in a graph differentiated with
    /// `create_graph` (the gradient-penalty path). Everything else is
    /// first-order only.
    fn second_order_capable(&self) -> bool {
        !matches!(
            self,
            OpKind::MaxPoolPoints { .. }
                | OpKind::ScatterColArgmax { .. }
                | OpKind::GatherColArgmax { .. }
                | OpKind::GatherRows { .. }
                | OpKind::ScatterAddRows { .. }
                | OpKind::Ln
                | OpKind::Sigmoid
                | OpKind::ClampConst { .. }
                | OpKind::TileRows { .. }
                | OpKind::SumTiles { .. }
                | OpKind::RepeatInterleaveRows { .. }
                | OpKind::SumGroups { .. }
        )
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.len() > 2 {
        return Err(Error::contract(format!(
            "tensor rank must be 1 or 2, got shape {shape:?}"
        )));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::contract(format!(
            "tensor extents must be positive, got shape {shape:?}"
        )));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::contract(format!(
            "shape {shape:?} implies {n} values, got {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    fn leaf(values: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Tensor> {
        check_shape(&shape, values.len())?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                values: RefCell::new(values),
                requires_grad: Cell::new(requires_grad),
                grad: RefCell::new(None),
                op: None,
            }),
        })
    }

    /// Constant leaf (no gradient tracking).
    pub fn from_vec(values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::leaf(values, shape.to_vec(), false)
    }

    /// Trainable leaf: participates in backward passes.
    pub fn param(values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::leaf(values, shape.to_vec(), true)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf(vec![v], vec![1], false).unwrap()
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(vec![0.0; n], shape)
    }

    pub fn filled(shape: &[usize], v: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(vec![v; n], shape)
    }

    /// Builds an [n, 3] tensor from 3-D points.
    pub fn from_points(points: &[[f64; 3]]) -> Result<Tensor> {
        let mut values = Vec::with_capacity(points.len() * 3);
        for p in points {
            values.extend_from_slice(p);
        }
        Tensor::from_vec(values, &[points.len(), 3])
    }

    fn make(kind: OpKind, inputs: Vec<Tensor>, shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                values: RefCell::new(values),
                requires_grad: Cell::new(requires_grad),
                grad: RefCell::new(None),
                op: Some(Node { kind, inputs }),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false // extents are positive by construction
    }

    /// Rows of a rank-2 tensor (1 for rank-1).
    pub fn rows(&self) -> usize {
        self.inner.shape[0]
    }

    /// Columns of a rank-2 tensor (its length for rank-1).
    pub fn cols(&self) -> usize {
        *self.inner.shape.last().unwrap()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.values.borrow().clone()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.inner.values.borrow()[0]
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Toggles gradient tracking. Affects graphs built after the call;
    /// used to freeze modules between optimization steps.
    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.requires_grad.set(flag);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Overwrites the stored values in place (same shape required).
    /// Intended for parameter updates between forward passes.
    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::contract(format!(
                "set_values: expected {} values, got {}",
                self.len(),
                values.len()
            )));
        }
        self.inner.values.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.inner.values.borrow().iter().all(|v| v.is_finite())
    }

    // ── elementwise and scalar ops ──────────────────────────────────────

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape_binary(rhs, "add")?;
        let out = zip_values(self, rhs, |a, b| a + b);
        Ok(Tensor::make(
            OpKind::Add,
            vec![self.clone(), rhs.clone()],
            self.shape(),
            out,
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape_binary(rhs, "sub")?;
        let out = zip_values(self, rhs, |a, b| a - b);
        Ok(Tensor::make(
            OpKind::Sub,
            vec![self.clone(), rhs.clone()],
            self.shape(),
            out,
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape_binary(rhs, "mul")?;
        let out = zip_values(self, rhs, |a, b| a * b);
        Ok(Tensor::make(
            OpKind::Mul,
            vec![self.clone(), rhs.clone()],
            self.shape(),
            out,
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.map_values(|v| c * v);
        Tensor::make(OpKind::Scale(c), vec![self.clone()], self.shape(), out)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.map_values(|v| v + c);
        Tensor::make(OpKind::AddScalar(c), vec![self.clone()], self.shape(), out)
    }

    /// Elementwise `max(x, slope * x)`. The subgradient at exactly 0 uses
    /// the positive branch (derivative 1). `slope` must lie in (0, 1).
    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::contract(format!(
                "leaky_relu slope must be in (0, 1), got {slope}"
            )));
        }
        let out = self.map_values(|v| if v >= 0.0 { v } else { slope * v });
        Ok(Tensor::make(
            OpKind::LeakyRelu { slope },
            vec![self.clone()],
            self.shape(),
            out,
        ))
    }

    pub fn sqrt(&self) -> Tensor {
        let out = self.map_values(f64::sqrt);
        Tensor::make(OpKind::Sqrt, vec![self.clone()], self.shape(), out)
    }

    pub fn recip(&self) -> Tensor {
        let out = self.map_values(|v| 1.0 / v);
        Tensor::make(OpKind::Recip, vec![self.clone()], self.shape(), out)
    }

    pub fn abs(&self) -> Tensor {
        let out = self.map_values(f64::abs);
        Tensor::make(OpKind::Abs, vec![self.clone()], self.shape(), out)
    }

    pub fn ln(&self) -> Tensor {
        let out = self.map_values(f64::ln);
        Tensor::make(OpKind::Ln, vec![self.clone()], self.shape(), out)
    }

    pub fn sigmoid(&self) -> Tensor {
        let out = self.map_values(|v| 1.0 / (1.0 + (-v).exp()));
        Tensor::make(OpKind::Sigmoid, vec![self.clone()], self.shape(), out)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let out = self.map_values(|v| v.clamp(lo, hi));
        Tensor::make(
            OpKind::ClampConst { lo, hi },
            vec![self.clone()],
            self.shape(),
            out,
        )
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// Matrix product of rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 || self.cols() != rhs.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let (m, k, n) = (self.rows(), self.cols(), rhs.cols());
        let a = self.inner.values.borrow();
        let b = rhs.inner.values.borrow();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        drop(a);
        drop(b);
        Ok(Tensor::make(
            OpKind::Matmul,
            vec![self.clone(), rhs.clone()],
            vec![m, n],
            out,
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::contract("transpose requires a rank-2 tensor"));
        }
        let (m, n) = (self.rows(), self.cols());
        let v = self.inner.values.borrow();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        drop(v);
        Ok(Tensor::make(
            OpKind::Transpose,
            vec![self.clone()],
            vec![n, m],
            out,
        ))
    }

    /// Adds a rank-1 bias to every row of a rank-2 tensor.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || bias.rank() != 1 || self.cols() != bias.len() {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: self.shape(),
                rhs: bias.shape(),
            });
        }
        let (m, n) = (self.rows(), self.cols());
        let x = self.inner.values.borrow();
        let b = bias.inner.values.borrow();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(x[i * n + j] + b[j]);
            }
        }
        drop(x);
        drop(b);
        Ok(Tensor::make(
            OpKind::AddRowBias,
            vec![self.clone(), bias.clone()],
            vec![m, n],
            out,
        ))
    }

    // ── reductions and normalization ────────────────────────────────────

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.inner.values.borrow().iter().sum();
        Tensor::make(OpKind::SumAll, vec![self.clone()], vec![1], vec![s])
    }

    pub fn mean(&self) -> Tensor {
        let v = self.inner.values.borrow();
        let s: f64 = v.iter().sum();
        let n = v.len() as f64;
        drop(v);
        Tensor::make(OpKind::Mean, vec![self.clone()], vec![1], vec![s / n])
    }

    /// Sums a rank-2 tensor along `axis` (0: down columns, 1: across rows).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if self.rank() != 2 || axis > 1 {
            return Err(Error::contract(format!(
                "sum_axis: rank-2 tensor and axis in {{0, 1}} required, got shape {:?} axis {axis}",
                self.shape()
            )));
        }
        let (m, n) = (self.rows(), self.cols());
        let v = self.inner.values.borrow();
        let out = if axis == 0 {
            let mut acc = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    acc[j] += v[i * n + j];
                }
            }
            acc
        } else {
            let mut acc = vec![0.0; m];
            for i in 0..m {
                for j in 0..n {
                    acc[i] += v[i * n + j];
                }
            }
            acc
        };
        drop(v);
        let len = out.len();
        Ok(Tensor::make(
            OpKind::SumAxis { axis },
            vec![self.clone()],
            vec![len],
            out,
        ))
    }

    /// Numerically stable softmax. Rank-1 tensors normalize over the whole
    /// vector; rank-2 tensors normalize along `axis` (0: each column sums
    /// to 1, 1: each row sums to 1).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if self.rank() == 1 {
            let v = self.inner.values.borrow();
            let out = stable_softmax(&v);
            drop(v);
            return Ok(Tensor::make(
                OpKind::Softmax { axis: 0 },
                vec![self.clone()],
                self.shape(),
                out,
            ));
        }
        if axis > 1 {
            return Err(Error::contract(format!("softmax: axis {axis} out of range")));
        }
        let (m, n) = (self.rows(), self.cols());
        let v = self.inner.values.borrow();
        let mut out = vec![0.0; m * n];
        if axis == 1 {
            for i in 0..m {
                let row = stable_softmax(&v[i * n..(i + 1) * n]);
                out[i * n..(i + 1) * n].copy_from_slice(&row);
            }
        } else {
            for j in 0..n {
                let col: Vec<f64> = (0..m).map(|i| v[i * n + j]).collect();
                let sm = stable_softmax(&col);
                for i in 0..m {
                    out[i * n + j] = sm[i];
                }
            }
        }
        drop(v);
        Ok(Tensor::make(
            OpKind::Softmax { axis },
            vec![self.clone()],
            self.shape(),
            out,
        ))
    }

    /// Columnwise max over the rows of an [n, d] tensor, yielding [d].
    /// Backward routes each column's gradient to the first row attaining
    /// the maximum.
    pub fn max_pool_points(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::contract("max_pool_points requires a rank-2 tensor"));
        }
        let (m, n) = (self.rows(), self.cols());
        if m == 0 {
            return Err(Error::degenerate("max_pool_points on empty input"));
        }
        let v = self.inner.values.borrow();
        let mut best = vec![f64::NEG_INFINITY; n];
        let mut argmax = vec![0usize; n];
        for i in 0..m {
            for j in 0..n {
                let x = v[i * n + j];
                if x > best[j] {
                    best[j] = x;
                    argmax[j] = i;
                }
            }
        }
        drop(v);
        Ok(Tensor::make(
            OpKind::MaxPoolPoints { argmax },
            vec![self.clone()],
            vec![n],
            best,
        ))
    }

    // ── shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, self.len())?;
        Ok(Tensor::make(
            OpKind::Reshape,
            vec![self.clone()],
            shape.to_vec(),
            self.to_vec(),
        ))
    }

    /// Gathers rows of a rank-2 tensor by index (duplicates allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::contract("gather_rows requires a rank-2 tensor"));
        }
        let (m, n) = (self.rows(), self.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::contract(format!(
                "gather_rows: index {bad} out of range for {m} rows"
            )));
        }
        let v = self.inner.values.borrow();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&v[i * n..(i + 1) * n]);
        }
        drop(v);
        Ok(Tensor::make(
            OpKind::GatherRows { idx: idx.to_vec() },
            vec![self.clone()],
            vec![idx.len(), n],
            out,
        ))
    }

    /// Repeats a whole [m, d] block `times` times → [times*m, d].
    pub fn tile_rows(&self, times: usize) -> Result<Tensor> {
        if self.rank() != 2 || times == 0 {
            return Err(Error::contract("tile_rows: rank-2 tensor, times >= 1"));
        }
        let (m, n) = (self.rows(), self.cols());
        let v = self.inner.values.borrow();
        let mut out = Vec::with_capacity(times * m * n);
        for _ in 0..times {
            out.extend_from_slice(&v);
        }
        drop(v);
        Ok(Tensor::make(
            OpKind::TileRows { times },
            vec![self.clone()],
            vec![times * m, n],
            out,
        ))
    }

    /// Repeats each row of an [m, d] tensor `times` times consecutively.
    pub fn repeat_interleave_rows(&self, times: usize) -> Result<Tensor> {
        if self.rank() != 2 || times == 0 {
            return Err(Error::contract(
                "repeat_interleave_rows: rank-2 tensor, times >= 1",
            ));
        }
        let (m, n) = (self.rows(), self.cols());
        let v = self.inner.values.borrow();
        let mut out = Vec::with_capacity(times * m * n);
        for i in 0..m {
            for _ in 0..times {
                out.extend_from_slice(&v[i * n..(i + 1) * n]);
            }
        }
        drop(v);
        Ok(Tensor::make(
            OpKind::RepeatInterleaveRows { times },
            vec![self.clone()],
            vec![m * times, n],
            out,
        ))
    }

    /// Broadcasts a rank-1 tensor [d] to [rows, d].
    pub fn broadcast_row(&self, rows: usize) -> Result<Tensor> {
        if self.rank() != 1 || rows == 0 {
            return Err(Error::contract("broadcast_row: rank-1 tensor, rows >= 1"));
        }
        let v = self.inner.values.borrow();
        let mut out = Vec::with_capacity(rows * v.len());
        for _ in 0..rows {
            out.extend_from_slice(&v);
        }
        let d = v.len();
        drop(v);
        Ok(Tensor::make(
            OpKind::BroadcastRow { rows },
            vec![self.clone()],
            vec![rows, d],
            out,
        ))
    }

    /// Broadcasts a rank-1 tensor [n] to [n, cols] (each value fills a row).
    pub fn broadcast_col(&self, cols: usize) -> Result<Tensor> {
        if self.rank() != 1 || cols == 0 {
            return Err(Error::contract("broadcast_col: rank-1 tensor, cols >= 1"));
        }
        let v = self.inner.values.borrow();
        let n = v.len();
        let mut out = Vec::with_capacity(n * cols);
        for &x in v.iter() {
            out.extend(std::iter::repeat(x).take(cols));
        }
        drop(v);
        Ok(Tensor::make(
            OpKind::BroadcastCol { cols },
            vec![self.clone()],
            vec![n, cols],
            out,
        ))
    }

    /// Broadcasts a scalar tensor to an arbitrary shape.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Result<Tensor> {
        if self.len() != 1 {
            return Err(Error::contract("broadcast_scalar requires a scalar tensor"));
        }
        check_shape(shape, shape.iter().product())?;
        let v = self.item();
        let n: usize = shape.iter().product();
        Ok(Tensor::make(
            OpKind::BroadcastScalar {
                shape: shape.to_vec(),
            },
            vec![self.clone()],
            shape.to_vec(),
            vec![v; n],
        ))
    }

    pub fn slice1d(&self, start: usize, len: usize) -> Result<Tensor> {
        if self.rank() != 1 || start + len > self.len() || len == 0 {
            return Err(Error::contract(format!(
                "slice out of range: [{start}, {})+{len} of {}",
                start,
                self.len()
            )));
        }
        let v = self.inner.values.borrow();
        let out = v[start..start + len].to_vec();
        drop(v);
        Ok(Tensor::make(
            OpKind::Slice1D { start, len },
            vec![self.clone()],
            vec![len],
            out,
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        if self.rank() != 2 || start + len > self.cols() || len == 0 {
            return Err(Error::contract("slice_cols out of range"));
        }
        let (m, n) = (self.rows(), self.cols());
        let v = self.inner.values.borrow();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&v[i * n + start..i * n + start + len]);
        }
        drop(v);
        Ok(Tensor::make(
            OpKind::SliceCols { start, len },
            vec![self.clone()],
            vec![m, len],
            out,
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        if self.rank() != 2 || start + len > self.rows() || len == 0 {
            return Err(Error::contract("slice_rows out of range"));
        }
        let n = self.cols();
        let v = self.inner.values.borrow();
        let out = v[start * n..(start + len) * n].to_vec();
        drop(v);
        Ok(Tensor::make(
            OpKind::SliceRows { start, len },
            vec![self.clone()],
            vec![len, n],
            out,
        ))
    }

    // ── norms (composites used by the critic path) ──────────────────────

    /// Euclidean norm as a scalar tensor: sqrt(sum(x²)).
    pub fn l2_norm(&self) -> Result<Tensor> {
        Ok(self.mul(self)?.sum().sqrt())
    }

    /// Sum of absolute values as a scalar tensor.
    pub fn l1_norm(&self) -> Tensor {
        self.abs().sum()
    }

    // ── helpers ─────────────────────────────────────────────────────────

    fn same_shape_binary(&self, rhs: &Tensor, op: &'static str) -> Result<()> {
        if self.inner.shape != rhs.inner.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        Ok(())
    }

    fn map_values(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.inner.values.borrow().iter().map(|&v| f(v)).collect()
    }
}

fn zip_values(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let av = a.inner.values.borrow();
    let bv = b.inner.values.borrow();
    av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn stable_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Concatenates rank-1 tensors end to end.
pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::degenerate("concat of zero tensors"));
    }
    let mut values = Vec::new();
    for p in parts {
        if p.rank() != 1 {
            return Err(Error::contract("concat requires rank-1 tensors"));
        }
        values.extend(p.to_vec());
    }
    let len = values.len();
    Ok(Tensor::make(
        OpKind::Concat1D,
        parts.to_vec(),
        vec![len],
        values,
    ))
}

/// Concatenates rank-2 tensors side by side (same row count).
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::degenerate("concat_cols of zero tensors"));
    }
    let m = parts[0].rows();
    for p in parts {
        if p.rank() != 2 || p.rows() != m {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: parts[0].shape(),
                rhs: p.shape(),
            });
        }
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut values = Vec::with_capacity(m * total);
    let borrowed: Vec<_> = parts.iter().map(|p| p.inner.values.borrow()).collect();
    for i in 0..m {
        for (p, v) in parts.iter().zip(&borrowed) {
            let n = p.cols();
            values.extend_from_slice(&v[i * n..(i + 1) * n]);
        }
    }
    drop(borrowed);
    Ok(Tensor::make(
        OpKind::ConcatCols,
        parts.to_vec(),
        vec![m, total],
        values,
    ))
}

/// Stacks rank-2 tensors vertically (same column count).
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::degenerate("concat_rows of zero tensors"));
    }
    let n = parts[0].cols();
    let mut values = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.rank() != 2 || p.cols() != n {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: parts[0].shape(),
                rhs: p.shape(),
            });
        }
        values.extend(p.to_vec());
        rows += p.rows();
    }
    Ok(Tensor::make(
        OpKind::ConcatRows,
        parts.to_vec(),
        vec![rows, n],
        values,
    ))
}

// ── backward machinery ──────────────────────────────────────────────────

/// Postorder over the requires_grad subgraph rooted at `root`
/// (inputs before outputs). Iterative to keep deep graphs off the stack.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    if !root.requires_grad() {
        return order;
    }
    let mut visited: HashSet<u64> = HashSet::new();
    visited.insert(root.id());
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    while let Some((t, i)) = stack.pop() {
        let n_inputs = t.inner.op.as_ref().map_or(0, |n| n.inputs.len());
        if i < n_inputs {
            stack.push((t.clone(), i + 1));
            let child = t.inner.op.as_ref().unwrap().inputs[i].clone();
            if child.requires_grad() && !visited.contains(&child.id()) {
                visited.insert(child.id());
                stack.push((child, 0));
            }
        } else {
            order.push(t);
        }
    }
    order
}

fn ensure_scalar(loss: &Tensor, what: &str) -> Result<()> {
    if loss.len() != 1 {
        return Err(Error::contract(format!(
            "{what} requires a scalar, got shape {:?}",
            loss.shape()
        )));
    }
    Ok(())
}

/// Builds the gradient tensors of `loss` with respect to every node in its
/// requires_grad subgraph. Returned map is keyed by node id.
fn build_grads(loss: &Tensor, create_graph: bool) -> Result<HashMap<u64, Tensor>> {
    let order = topo_order(loss);
    if create_graph {
        for t in &order {
            if let Some(node) = &t.inner.op {
                if !node.kind.second_order_capable() {
                    return Err(Error::Capability {
                        op: node.kind.name(),
                    });
                }
            }
        }
    }
    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    grads.insert(loss.id(), Tensor::filled(&loss.shape(), 1.0)?);
    for t in order.iter().rev() {
        let g = match grads.get(&t.id()) {
            Some(g) => g.clone(),
            None => continue,
        };
        let node = match &t.inner.op {
            Some(n) => n,
            None => continue,
        };
        let contributions = input_grads(t, node, &g)?;
        for (input, contribution) in node.inputs.iter().zip(contributions) {
            let c = match contribution {
                Some(c) => c,
                None => continue,
            };
            if !input.requires_grad() {
                continue;
            }
            match grads.remove(&input.id()) {
                Some(prev) => {
                    grads.insert(input.id(), prev.add(&c)?);
                }
                None => {
                    grads.insert(input.id(), c);
                }
            }
        }
    }
    Ok(grads)
}

/// Backpropagates from a scalar loss, accumulating into the `grad` buffer
/// of every reachable tensor with `requires_grad` set.
pub fn backward(loss: &Tensor) -> Result<()> {
    ensure_scalar(loss, "backward")?;
    let order = topo_order(loss);
    let grads = build_grads(loss, false)?;
    for t in &order {
        if let Some(g) = grads.get(&t.id()) {
            t.accumulate_grad(&g.inner.values.borrow());
        }
    }
    Ok(())
}

/// Gradients of a scalar `loss` with respect to `wrt`, returned as tensors.
/// With `create_graph = true` the result participates in the graph and can
/// be differentiated again; every op reachable from `loss` must then
/// support second-order differentiation, otherwise a capability error
/// naming the op is returned. Inputs not reached by the backward sweep get
/// zero gradients. Does not touch the `grad` accumulators.
pub fn grad(loss: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    ensure_scalar(loss, "grad")?;
    let grads = build_grads(loss, create_graph)?;
    wrt.iter()
        .map(|t| match grads.get(&t.id()) {
            Some(g) => Ok(g.clone()),
            None => Tensor::zeros(&t.shape()),
        })
        .collect()
}

/// Per-input gradient tensors for one node, built out of graph ops so the
/// result is itself differentiable where the op set allows.
fn input_grads(out: &Tensor, node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let ins = &node.inputs;
    Ok(match &node.kind {
        OpKind::Add => vec![Some(g.clone()), Some(g.clone())],
        OpKind::Sub => vec![Some(g.clone()), Some(g.neg())],
        OpKind::Mul => vec![Some(g.mul(&ins[1])?), Some(g.mul(&ins[0])?)],
        OpKind::Scale(c) => vec![Some(g.scale(*c))],
        OpKind::AddScalar(_) => vec![Some(g.clone())],
        OpKind::Matmul => {
            let da = g.matmul(&ins[1].transpose()?)?;
            let db = ins[0].transpose()?.matmul(g)?;
            vec![Some(da), Some(db)]
        }
        OpKind::Transpose => vec![Some(g.transpose()?)],
        OpKind::LeakyRelu { slope } => {
            let mask: Vec<f64> = ins[0]
                .inner
                .values
                .borrow()
                .iter()
                .map(|&v| if v >= 0.0 { 1.0 } else { *slope })
                .collect();
            let mask = Tensor::from_vec(mask, &ins[0].shape())?;
            vec![Some(g.mul(&mask)?)]
        }
        OpKind::Softmax { axis } => {
            // ds = s ⊙ (g − broadcast(sum(g ⊙ s, axis)))
            let gs = g.mul(out)?;
            let inner = if out.rank() == 1 {
                let r = gs.sum();
                g.sub(&r.broadcast_scalar(&out.shape())?)?
            } else if *axis == 1 {
                let r = gs.sum_axis(1)?;
                g.sub(&r.broadcast_col(out.cols())?)?
            } else {
                let r = gs.sum_axis(0)?;
                g.sub(&r.broadcast_row(out.rows())?)?
            };
            vec![Some(out.mul(&inner)?)]
        }
        OpKind::MaxPoolPoints { argmax } => {
            let rows = ins[0].rows();
            vec![Some(scatter_col_argmax(g, argmax, rows)?)]
        }
        OpKind::ScatterColArgmax { argmax, .. } => vec![Some(gather_col_argmax(g, argmax)?)],
        OpKind::GatherColArgmax { argmax } => {
            let rows = ins[0].rows();
            vec![Some(scatter_col_argmax(g, argmax, rows)?)]
        }
        OpKind::GatherRows { idx } => {
            let rows = ins[0].rows();
            vec![Some(scatter_add_rows(g, idx, rows)?)]
        }
        OpKind::ScatterAddRows { idx, .. } => vec![Some(g.gather_rows(idx)?)],
        OpKind::Concat1D => {
            let mut offset = 0;
            let mut parts = Vec::with_capacity(ins.len());
            for input in ins {
                parts.push(Some(g.slice1d(offset, input.len())?));
                offset += input.len();
            }
            parts
        }
        OpKind::ConcatCols => {
            let mut offset = 0;
            let mut parts = Vec::with_capacity(ins.len());
            for input in ins {
                parts.push(Some(g.slice_cols(offset, input.cols())?));
                offset += input.cols();
            }
            parts
        }
        OpKind::ConcatRows => {
            let mut offset = 0;
            let mut parts = Vec::with_capacity(ins.len());
            for input in ins {
                parts.push(Some(g.slice_rows(offset, input.rows())?));
                offset += input.rows();
            }
            parts
        }
        OpKind::Slice1D { start, len } => {
            vec![Some(embed_slice1d(g, *start, ins[0].len(), *len)?)]
        }
        OpKind::EmbedSlice1D { start, .. } => {
            vec![Some(g.slice1d(*start, ins[0].len())?)]
        }
        OpKind::SliceCols { start, len } => {
            vec![Some(embed_cols(g, *start, ins[0].cols(), *len)?)]
        }
        OpKind::EmbedCols { start, .. } => vec![Some(g.slice_cols(*start, ins[0].cols())?)],
        OpKind::SliceRows { start, len } => {
            vec![Some(embed_rows(g, *start, ins[0].rows(), *len)?)]
        }
        OpKind::EmbedRows { start, .. } => vec![Some(g.slice_rows(*start, ins[0].rows())?)],
        OpKind::Reshape => vec![Some(g.reshape(&ins[0].shape())?)],
        OpKind::Mean => {
            let n = ins[0].len() as f64;
            vec![Some(g.broadcast_scalar(&ins[0].shape())?.scale(1.0 / n))]
        }
        OpKind::SumAll => vec![Some(g.broadcast_scalar(&ins[0].shape())?)],
        OpKind::SumAxis { axis } => {
            let grad = if *axis == 0 {
                g.broadcast_row(ins[0].rows())?
            } else {
                g.broadcast_col(ins[0].cols())?
            };
            vec![Some(grad)]
        }
        OpKind::BroadcastRow { .. } => vec![Some(g.sum_axis(0)?)],
        OpKind::BroadcastCol { .. } => vec![Some(g.sum_axis(1)?)],
        OpKind::BroadcastScalar { .. } => vec![Some(g.sum())],
        OpKind::AddRowBias => vec![Some(g.clone()), Some(g.sum_axis(0)?)],
        OpKind::Sqrt => {
            // d sqrt(x) = g / (2 sqrt(x)); built from the output node so it
            // stays differentiable.
            vec![Some(g.mul(&out.recip().scale(0.5))?)]
        }
        OpKind::Recip => {
            // d (1/x) = -g / x² = -g · out²
            vec![Some(g.mul(&out.mul(out)?)?.scale(-1.0))]
        }
        OpKind::Abs => {
            let sign: Vec<f64> = ins[0]
                .inner
                .values
                .borrow()
                .iter()
                .map(|&v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let sign = Tensor::from_vec(sign, &ins[0].shape())?;
            vec![Some(g.mul(&sign)?)]
        }
        OpKind::Ln => {
            let inv: Vec<f64> = ins[0]
                .inner
                .values
                .borrow()
                .iter()
                .map(|&v| 1.0 / v)
                .collect();
            let inv = Tensor::from_vec(inv, &ins[0].shape())?;
            vec![Some(g.mul(&inv)?)]
        }
        OpKind::Sigmoid => {
            let one_minus = out.scale(-1.0).add_scalar(1.0);
            vec![Some(g.mul(&out.mul(&one_minus)?)?)]
        }
        OpKind::ClampConst { lo, hi } => {
            let mask: Vec<f64> = ins[0]
                .inner
                .values
                .borrow()
                .iter()
                .map(|&v| if v >= *lo && v <= *hi { 1.0 } else { 0.0 })
                .collect();
            let mask = Tensor::from_vec(mask, &ins[0].shape())?;
            vec![Some(g.mul(&mask)?)]
        }
        OpKind::TileRows { times } => vec![Some(sum_tiles(g, *times)?)],
        OpKind::SumTiles { times } => vec![Some(g.tile_rows(*times)?)],
        OpKind::RepeatInterleaveRows { times } => vec![Some(sum_groups(g, *times)?)],
        OpKind::SumGroups { times } => vec![Some(g.repeat_interleave_rows(*times)?)],
    })
}

// ── internal structural ops used only by backward builders ──────────────

fn scatter_col_argmax(g: &Tensor, argmax: &[usize], rows: usize) -> Result<Tensor> {
    let d = g.len();
    let gv = g.inner.values.borrow();
    let mut out = vec![0.0; rows * d];
    for j in 0..d {
        out[argmax[j] * d + j] += gv[j];
    }
    drop(gv);
    Ok(Tensor::make(
        OpKind::ScatterColArgmax {
            argmax: argmax.to_vec(),
            rows,
        },
        vec![g.clone()],
        vec![rows, d],
        out,
    ))
}

fn gather_col_argmax(g: &Tensor, argmax: &[usize]) -> Result<Tensor> {
    let d = g.cols();
    let gv = g.inner.values.borrow();
    let out: Vec<f64> = (0..d).map(|j| gv[argmax[j] * d + j]).collect();
    drop(gv);
    Ok(Tensor::make(
        OpKind::GatherColArgmax {
            argmax: argmax.to_vec(),
        },
        vec![g.clone()],
        vec![d],
        out,
    ))
}

fn scatter_add_rows(g: &Tensor, idx: &[usize], rows: usize) -> Result<Tensor> {
    let n = g.cols();
    let gv = g.inner.values.borrow();
    let mut out = vec![0.0; rows * n];
    for (k, &i) in idx.iter().enumerate() {
        for j in 0..n {
            out[i * n + j] += gv[k * n + j];
        }
    }
    drop(gv);
    Ok(Tensor::make(
        OpKind::ScatterAddRows {
            idx: idx.to_vec(),
            rows,
        },
        vec![g.clone()],
        vec![rows, n],
        out,
    ))
}

fn embed_slice1d(g: &Tensor, start: usize, total: usize, len: usize) -> Result<Tensor> {
    debug_assert_eq!(g.len(), len);
    let mut out = vec![0.0; total];
    out[start..start + len].copy_from_slice(&g.inner.values.borrow());
    Ok(Tensor::make(
        OpKind::EmbedSlice1D { start, total },
        vec![g.clone()],
        vec![total],
        out,
    ))
}

fn embed_cols(g: &Tensor, start: usize, total: usize, len: usize) -> Result<Tensor> {
    debug_assert_eq!(g.cols(), len);
    let m = g.rows();
    let gv = g.inner.values.borrow();
    let mut out = vec![0.0; m * total];
    for i in 0..m {
        out[i * total + start..i * total + start + len]
            .copy_from_slice(&gv[i * len..(i + 1) * len]);
    }
    drop(gv);
    Ok(Tensor::make(
        OpKind::EmbedCols { start, total },
        vec![g.clone()],
        vec![m, total],
        out,
    ))
}

fn embed_rows(g: &Tensor, start: usize, total: usize, len: usize) -> Result<Tensor> {
    debug_assert_eq!(g.rows(), len);
    let n = g.cols();
    let mut out = vec![0.0; total * n];
    out[start * n..(start + len) * n].copy_from_slice(&g.inner.values.borrow());
    Ok(Tensor::make(
        OpKind::EmbedRows { start, total },
        vec![g.clone()],
        vec![total, n],
        out,
    ))
}

fn sum_tiles(g: &Tensor, times: usize) -> Result<Tensor> {
    let m = g.rows() / times;
    let n = g.cols();
    let gv = g.inner.values.borrow();
    let mut out = vec![0.0; m * n];
    for t in 0..times {
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += gv[(t * m + i) * n + j];
            }
        }
    }
    drop(gv);
    Ok(Tensor::make(
        OpKind::SumTiles { times },
        vec![g.clone()],
        vec![m, n],
        out,
    ))
}

fn sum_groups(g: &Tensor, times: usize) -> Result<Tensor> {
    let m = g.rows() / times;
    let n = g.cols();
    let gv = g.inner.values.borrow();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for t in 0..times {
            for j in 0..n {
                out[i * n + j] += gv[(i * times + t) * n + j];
            }
        }
    }
    drop(gv);
    Ok(Tensor::make(
        OpKind::SumGroups { times },
        vec![g.clone()],
        vec![m, n],
        out,
    ))
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .field(
                "op",
                &self.inner.op.as_ref().map(|n| n.kind.name()).unwrap_or("leaf"),
            )
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(values: &[f64]) -> Tensor {
        Tensor::param(values.to_vec(), &[values.len()]).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let out = eye.matmul(&a).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_vec(vec![1.0, 0.0], &[1, 2]).unwrap();
        let b = Tensor::from_vec(vec![0.0, 5.0], &[2, 1]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.shape(), vec![1, 1]);
        assert_eq!(out.item(), 0.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[2, 3]).unwrap();
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "message should name shapes: {msg}");
    }

    #[test]
    fn leaky_relu_values_and_grad() {
        let x = t1(&[2.0, -1.0, -3.0]);
        let y = x.leaky_relu(0.2).unwrap();
        assert_eq!(y.to_vec(), vec![2.0, -0.2, -0.6000000000000001]);
        backward(&y.sum()).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.2, 0.2]);
    }

    #[test]
    fn leaky_relu_at_zero_uses_positive_branch() {
        let x = t1(&[0.0]);
        let y = x.leaky_relu(0.2).unwrap();
        backward(&y.sum()).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn leaky_relu_slope_contract() {
        let x = t1(&[1.0]);
        assert!(x.leaky_relu(1.5).is_err());
        assert!(x.leaky_relu(0.0).is_err());
    }

    #[test]
    fn max_pool_values_and_routing() {
        let x = Tensor::param(vec![1.0, 5.0, 3.0, 2.0], &[2, 2]).unwrap();
        let pooled = x.max_pool_points().unwrap();
        assert_eq!(pooled.to_vec(), vec![3.0, 5.0]);
        backward(&pooled.sum()).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn max_pool_single_row() {
        let x = Tensor::from_vec(vec![7.0, 7.0], &[1, 2]).unwrap();
        assert_eq!(x.max_pool_points().unwrap().to_vec(), vec![7.0, 7.0]);
    }

    #[test]
    fn max_pool_tie_routes_to_first_row() {
        let x = Tensor::param(vec![4.0, 4.0], &[2, 1]).unwrap();
        let pooled = x.max_pool_points().unwrap();
        backward(&pooled.sum()).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let a = Tensor::from_vec(vec![0.0, 0.0], &[2]).unwrap();
        let sa = a.softmax(0).unwrap().to_vec();
        assert!((sa[0] - 0.5).abs() < 1e-12 && (sa[1] - 0.5).abs() < 1e-12);
        let b = Tensor::from_vec(vec![1000.0, 1000.0], &[2]).unwrap();
        let sb = b.softmax(0).unwrap().to_vec();
        assert!(sb.iter().all(|v| v.is_finite()));
        assert!((sb[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_vec(vec![0.3, -1.0, 2.0, 0.1, 0.1, 5.0], &[2, 3]).unwrap();
        let s = x.softmax(1).unwrap();
        let v = s.to_vec();
        for i in 0..2 {
            let sum: f64 = v[i * 3..(i + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_square_and_accumulation() {
        let x = t1(&[3.0]);
        let loss = x.mul(&x).unwrap().sum();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
        // second backward without zeroing doubles the grad
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
        x.zero_grad();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = t1(&[1.0, 2.0]);
        let err = backward(&x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn shared_subexpression_sums_contributions() {
        // f(x) = x·x + x  →  f' = 2x + 1
        let x = t1(&[3.0]);
        let loss = x.mul(&x).unwrap().add(&x).unwrap().sum();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn purity_same_inputs_bitwise_identical() {
        let x = Tensor::from_vec(vec![0.1, -0.7, 2.3], &[3]).unwrap();
        let w = Tensor::from_vec(vec![0.5, 1.5, -0.25], &[3]).unwrap();
        let f = |x: &Tensor, w: &Tensor| {
            x.mul(w)
                .unwrap()
                .leaky_relu(0.2)
                .unwrap()
                .softmax(0)
                .unwrap()
                .to_vec()
        };
        assert_eq!(f(&x, &w), f(&x, &w));
    }

    #[test]
    fn grad_of_grad_unit_norm_linear_critic() {
        // D(x) = w·x with ‖w‖ = 1: penalty (‖∇D‖−1)² = 0 and ∂penalty/∂w = 0
        let w = Tensor::param(vec![1.0, 0.0], &[1, 2]).unwrap();
        let x = Tensor::param(vec![0.3, -0.4], &[2, 1]).unwrap();
        let d = w.matmul(&x).unwrap().reshape(&[1]).unwrap().sum();
        let gx = grad(&d, &[&x], true).unwrap().remove(0);
        let norm = gx.l2_norm().unwrap();
        let s = norm.add_scalar(-1.0);
        let penalty = s.mul(&s).unwrap();
        assert!(penalty.item().abs() < 1e-12);
        backward(&penalty).unwrap();
        let wg = w.grad().unwrap();
        assert!(wg.iter().all(|v| v.abs() < 1e-12), "grad {wg:?}");
    }

    #[test]
    fn grad_of_grad_scaled_linear_critic() {
        // w = [2, 0]: ‖∇D‖ = 2, penalty = 1, ∂penalty/∂w = 2(‖w‖−1)·w/‖w‖ = [2, 0]
        let w = Tensor::param(vec![2.0, 0.0], &[1, 2]).unwrap();
        let x = Tensor::param(vec![0.3, -0.4], &[2, 1]).unwrap();
        let d = w.matmul(&x).unwrap().reshape(&[1]).unwrap().sum();
        let gx = grad(&d, &[&x], true).unwrap().remove(0);
        let norm = gx.l2_norm().unwrap();
        let s = norm.add_scalar(-1.0);
        let penalty = s.mul(&s).unwrap();
        assert!((penalty.item() - 1.0).abs() < 1e-12);
        backward(&penalty).unwrap();
        let wg = w.grad().unwrap();
        assert!((wg[0] - 2.0).abs() < 1e-10 && wg[1].abs() < 1e-10, "grad {wg:?}");
    }

    #[test]
    fn create_graph_rejects_first_order_only_ops() {
        let x = Tensor::param(vec![1.0, 5.0, 3.0, 2.0], &[2, 2]).unwrap();
        let loss = x.max_pool_points().unwrap().sum();
        let err = grad(&loss, &[&x], true).unwrap_err();
        match err {
            Error::Capability { op } => assert_eq!(op, "max_pool_points"),
            other => panic!("expected capability error, got {other}"),
        }
        // plain first-order grad still works
        let g = grad(&loss, &[&x], false).unwrap().remove(0);
        assert_eq!(g.to_vec(), vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn frozen_leaf_gets_no_grad() {
        let x = t1(&[2.0]);
        x.set_requires_grad(false);
        let loss = x.mul(&x).unwrap().sum();
        assert!(backward(&loss).is_ok());
        assert!(x.grad().is_none());
    }

    #[test]
    fn concat_and_slice_roundtrip_grads() {
        let a = t1(&[1.0, 2.0]);
        let b = t1(&[3.0]);
        let c = concat(&[a.clone(), b.clone()]).unwrap();
        let loss = c.mul(&c).unwrap().sum();
        backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0, 4.0]);
        assert_eq!(b.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn reshape_preserves_grad_shape() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[4]).unwrap();
        let y = x.reshape(&[2, 2]).unwrap();
        backward(&y.mul(&y).unwrap().sum()).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0, 8.0]);
    }
}
