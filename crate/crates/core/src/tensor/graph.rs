//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape in exact reverse creation order, so gradient accumulation
//! is deterministic. `StopGradient` nodes pass values through unchanged and
//! drop the adjoint.

use std::ops::Index;

use crate::error::{Error, Result};

use super::matrix::Matrix;

/// Row norm below which `l2_normalize_rows` flags a row as degenerate.
pub const DEGENERATE_ROW_NORM: f64 = 1e-8;
/// Lower bound on the normalization denominator.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tensor {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Tensor {
    #[inline]
    pub fn id(self) -> usize {
        self.id
    }

    #[inline]
    pub fn shape(self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn rows(self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(self) -> usize {
        self.cols
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Param,
    Constant,
    StopGradient(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// `x (R×C) + b (1×C)` broadcast over rows.
    AddRow(usize, usize),
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulT(usize, usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    /// `R×C → R×1`
    SumRows(usize),
    /// `R×C, R×C → R×1`
    DotRows(usize, usize),
    L2NormalizeRows(usize),
    /// Mean over rows of `-log softmax(logits)[label]`.
    SoftmaxCrossEntropy(usize, Vec<usize>),
    /// Output `R×n` whose entry `(r, c)` is `src.flat[index[r*n + c]]`.
    Gather {
        src: usize,
        index: Vec<usize>,
        rows: usize,
        cols: usize,
    },
    ConcatRows(Vec<usize>),
    ClampMin(usize, f64),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Param | Op::Constant => vec![],
            Op::StopGradient(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::L2NormalizeRows(a)
            | Op::SoftmaxCrossEntropy(a, _)
            | Op::ClampMin(a, _)
            | Op::Gather { src: a, .. } => vec![*a],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::DotRows(a, b) => vec![*a, *b],
            Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
    /// Whether an adjoint can reach a `Param` leaf through this node.
    tracked: bool,
}

/// Recorded computation. Rebuilt for every forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by node id.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to `t`; explicit zeros when no adjoint reached it.
    pub fn get(&self, t: Tensor) -> Matrix {
        self.grads
            .get(t.id)
            .and_then(Option::as_ref)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(t.rows, t.cols))
    }

    pub fn reached(&self, t: Tensor) -> bool {
        matches!(self.grads.get(t.id), Some(Some(_)))
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(shape_err(op, a, b))
    }
}

fn normalize_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let n = x.row_norm(r).max(NORM_EPS);
        for v in out.row_mut(r) {
            *v /= n;
        }
    }
    out
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Forward evaluation of one op given the values of all earlier nodes.
fn eval<V>(op: &Op, values: &V) -> Result<Matrix>
where
    V: Index<usize, Output = Matrix> + ?Sized,
{
    let v = |i: &usize| &values[*i];
    Ok(match op {
        Op::Param | Op::Constant => unreachable!("leaves carry their own value"),
        Op::StopGradient(a) => v(a).clone(),
        Op::Add(a, b) => {
            same_shape("add", v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            same_shape("sub", v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            same_shape("mul", v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x * y)
        }
        Op::Scale(a, s) => v(a).map(|x| x * s),
        Op::AddRow(a, b) => {
            let (x, bias) = (v(a), v(b));
            if bias.rows() != 1 || bias.cols() != x.cols() {
                return Err(shape_err("add_row", x, bias));
            }
            let mut out = x.clone();
            for r in 0..x.rows() {
                for (o, b) in out.row_mut(r).iter_mut().zip(bias.as_slice()) {
                    *o += b;
                }
            }
            out
        }
        Op::MatMul(a, b) => v(a).matmul(v(b))?,
        Op::MatMulT(a, b) => v(a).matmul_t(v(b))?,
        Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Exp(a) => v(a).map(f64::exp),
        Op::Log(a) => {
            let x = v(a);
            if let Some(bad) = x.as_slice().iter().find(|&&x| !(x > 0.0)) {
                return Err(Error::Domain {
                    op: "log",
                    msg: format!("non-positive input {bad}"),
                });
            }
            x.map(f64::ln)
        }
        Op::Sum(a) => Matrix::scalar(v(a).sum()),
        Op::Mean(a) => {
            let x = v(a);
            if x.is_empty() {
                return Err(Error::Domain {
                    op: "mean",
                    msg: "empty input".into(),
                });
            }
            Matrix::scalar(x.sum() / x.len() as f64)
        }
        Op::SumRows(a) => {
            let x = v(a);
            Matrix::col_vector((0..x.rows()).map(|r| x.row(r).iter().sum()).collect())
        }
        Op::DotRows(a, b) => {
            same_shape("dot_rows", v(a), v(b))?;
            let (x, y) = (v(a), v(b));
            Matrix::col_vector(
                (0..x.rows())
                    .map(|r| x.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum())
                    .collect(),
            )
        }
        Op::L2NormalizeRows(a) => normalize_rows(v(a)),
        Op::SoftmaxCrossEntropy(a, labels) => {
            let x = v(a);
            if labels.len() != x.rows() || x.rows() == 0 {
                return Err(Error::Shape {
                    op: "softmax_cross_entropy",
                    lhs: x.shape(),
                    rhs: (labels.len(), 1),
                });
            }
            let mut total = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                if y >= x.cols() {
                    return Err(Error::Domain {
                        op: "softmax_cross_entropy",
                        msg: format!("label {y} out of range for {} classes", x.cols()),
                    });
                }
                let row = x.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - row[y];
            }
            Matrix::scalar(total / x.rows() as f64)
        }
        Op::Gather {
            src,
            index,
            rows,
            cols,
        } => {
            let s = v(src).as_slice();
            Matrix::new(*rows, *cols, index.iter().map(|&i| s[i]).collect())?
        }
        Op::ConcatRows(parts) => {
            let mats: Vec<&Matrix> = parts.iter().map(v).collect();
            Matrix::vstack(&mats)?
        }
        Op::ClampMin(a, floor) => v(a).map(|x| x.max(*floor)),
    })
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

    pub fn value(&self, t: Tensor) -> &Matrix {
        &self.nodes[t.id].value
    }

    fn push(&mut self, op: Op, value: Matrix, tracked: bool) -> Tensor {
        let (rows, cols) = value.shape();
        let id = self.nodes.len();
        self.nodes.push(Node { op, value, tracked });
        Tensor { id, rows, cols }
    }

    fn record(&mut self, op: Op) -> Result<Tensor> {
        let value = eval(&op, &NodeValues(&self.nodes))?;
        let tracked = op.parents().iter().any(|&p| self.nodes[p].tracked);
        Ok(self.push(op, value, tracked))
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> Tensor {
        self.push(Op::Param, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Tensor {
        self.push(Op::Constant, value, false)
    }

    pub fn stop_gradient(&mut self, x: Tensor) -> Tensor {
        let value = self.nodes[x.id].value.clone();
        self.push(Op::StopGradient(x.id), value, false)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.record(Op::Add(a.id, b.id))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.record(Op::Sub(a.id, b.id))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.record(Op::Mul(a.id, b.id))
    }

    pub fn scale(&mut self, a: Tensor, s: f64) -> Result<Tensor> {
        self.record(Op::Scale(a.id, s))
    }

    pub fn add_row(&mut self, x: Tensor, bias: Tensor) -> Result<Tensor> {
        self.record(Op::AddRow(x.id, bias.id))
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.record(Op::MatMul(a.id, b.id))
    }

    pub fn matmul_t(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.record(Op::MatMulT(a.id, b.id))
    }

    pub fn relu(&mut self, a: Tensor) -> Result<Tensor> {
        self.record(Op::Relu(a.id))
    }

    pub fn exp(&mut self, a: Tensor) -> Result<Tensor> {
        self.record(Op::Exp(a.id))
    }

    pub fn log(&mut self, a: Tensor) -> Result<Tensor> {
        self.record(Op::Log(a.id))
    }

    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        self.record(Op::Sum(a.id))
    }

    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        self.record(Op::Mean(a.id))
    }

    pub fn sum_rows(&mut self, a: Tensor) -> Result<Tensor> {
        self.record(Op::SumRows(a.id))
    }

    pub fn dot_rows(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.record(Op::DotRows(a.id, b.id))
    }

    pub fn l2_normalize_rows(&mut self, a: Tensor) -> Result<Tensor> {
        let x = &self.nodes[a.id].value;
        for r in 0..x.rows() {
            let n = x.row_norm(r);
            if n < DEGENERATE_ROW_NORM {
                log::debug!("l2_normalize_rows: row {r} has norm {n:e}");
            }
        }
        self.record(Op::L2NormalizeRows(a.id))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Tensor, labels: &[usize]) -> Result<Tensor> {
        self.record(Op::SoftmaxCrossEntropy(logits.id, labels.to_vec()))
    }

    /// Picks `cols[r][c]` from row `rows[r]` of `src`. All `cols[r]` must
    /// have the same length.
    pub fn gather(&mut self, src: Tensor, rows: &[usize], cols: &[Vec<usize>]) -> Result<Tensor> {
        let width = cols.first().map_or(0, Vec::len);
        if rows.len() != cols.len() {
            return Err(Error::Shape {
                op: "gather",
                lhs: src.shape(),
                rhs: (rows.len(), cols.len()),
            });
        }
        let mut index = Vec::with_capacity(rows.len() * width);
        for (&r, cs) in rows.iter().zip(cols) {
            if cs.len() != width || r >= src.rows || cs.iter().any(|&c| c >= src.cols) {
                return Err(Error::Shape {
                    op: "gather",
                    lhs: src.shape(),
                    rhs: (r, cs.len()),
                });
            }
            index.extend(cs.iter().map(|&c| r * src.cols + c));
        }
        self.record(Op::Gather {
            src: src.id,
            index,
            rows: rows.len(),
            cols: width,
        })
    }

    pub fn select_rows(&mut self, src: Tensor, rows: &[usize]) -> Result<Tensor> {
        let all: Vec<usize> = (0..src.cols).collect();
        let cols = vec![all; rows.len()];
        self.gather(src, rows, &cols)
    }

    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        self.record(Op::ConcatRows(parts.iter().map(|t| t.id).collect()))
    }

    pub fn clamp_min(&mut self, a: Tensor, floor: f64) -> Result<Tensor> {
        self.record(Op::ClampMin(a.id, floor))
    }

    /// Reverse sweep from a `1 × 1` loss.
    pub fn backward(&self, loss: Tensor) -> Result<Gradients> {
        if loss.shape() != (1, 1) {
            return Err(Error::NotScalar(loss.shape()));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.id].tracked {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Matrix::scalar(1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |i: usize| &self.nodes[i].value;
        let tracked = |i: usize| self.nodes[i].tracked;
        let mut acc = |i: usize, delta: Matrix| {
            if !self.nodes[i].tracked {
                return;
            }
            match &mut grads[i] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Param | Op::Constant | Op::StopGradient(_) => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                if tracked(*b) {
                    acc(*b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if tracked(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if tracked(*b) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, x) in db.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::MatMul(a, b) => {
                // y = a·b: da = g·bᵀ, db = aᵀ·g
                if tracked(*a) {
                    acc(*a, g.matmul_t(val(*b)).expect("shape checked in forward"));
                }
                if tracked(*b) {
                    acc(*b, val(*a).t_matmul(g).expect("shape checked in forward"));
                }
            }
            Op::MatMulT(a, b) => {
                // y = a·bᵀ: da = g·b, db = gᵀ·a
                if tracked(*a) {
                    acc(*a, g.matmul(val(*b)).expect("shape checked in forward"));
                }
                if tracked(*b) {
                    acc(*b, g.t_matmul(val(*a)).expect("shape checked in forward"));
                }
            }
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { 0.0 })),
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |d, y| d * y)),
            Op::Log(a) => acc(*a, g.zip_map(val(*a), |d, x| d / x)),
            Op::Sum(a) => {
                let x = val(*a);
                acc(*a, Matrix::filled(x.rows(), x.cols(), g.item()));
            }
            Op::Mean(a) => {
                let x = val(*a);
                acc(
                    *a,
                    Matrix::filled(x.rows(), x.cols(), g.item() / x.len() as f64),
                );
            }
            Op::SumRows(a) => {
                let x = val(*a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let gr = g.get(r, 0);
                    d.row_mut(r).iter_mut().for_each(|v| *v = gr);
                }
                acc(*a, d);
            }
            Op::DotRows(a, b) => {
                let row_scaled = |m: &Matrix| {
                    let mut d = m.clone();
                    for r in 0..m.rows() {
                        let gr = g.get(r, 0);
                        d.row_mut(r).iter_mut().for_each(|v| *v *= gr);
                    }
                    d
                };
                if tracked(*a) {
                    acc(*a, row_scaled(val(*b)));
                }
                if tracked(*b) {
                    acc(*b, row_scaled(val(*a)));
                }
            }
            Op::L2NormalizeRows(a) => {
                let x = val(*a);
                let y = &node.value;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = x.row_norm(r);
                    let gr = g.row(r);
                    if n > NORM_EPS {
                        let yr = y.row(r);
                        let proj: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((dv, &gv), &yv) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *dv = (gv - yv * proj) / n;
                        }
                    } else {
                        for (dv, &gv) in d.row_mut(r).iter_mut().zip(gr) {
                            *dv = gv / NORM_EPS;
                        }
                    }
                }
                acc(*a, d);
            }
            Op::SoftmaxCrossEntropy(a, labels) => {
                let x = val(*a);
                let scale = g.item() / x.rows() as f64;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for (r, &y) in labels.iter().enumerate() {
                    let p = softmax_row(x.row(r));
                    for (c, (dv, pv)) in d.row_mut(r).iter_mut().zip(p).enumerate() {
                        *dv = scale * (pv - if c == y { 1.0 } else { 0.0 });
                    }
                }
                acc(*a, d);
            }
            Op::Gather { src, index, .. } => {
                let (r, c) = val(*src).shape();
                let mut d = Matrix::zeros(r, c);
                let ds = d.as_mut_slice();
                for (&i, &gv) in index.iter().zip(g.as_slice()) {
                    ds[i] += gv;
                }
                acc(*src, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    if tracked(p) {
                        let slice = g.as_slice()[offset * c..(offset + r) * c].to_vec();
                        acc(p, Matrix::new(r, c, slice).expect("consistent shapes"));
                    }
                    offset += r;
                }
            }
            Op::ClampMin(a, floor) => {
                acc(*a, g.zip_map(val(*a), |d, x| if x >= *floor { d } else { 0.0 }))
            }
        }
    }

    /// Recomputes every node in creation order. `overrides` replaces leaf
    /// values; when `pin_stop_gradients` is set, stop-gradient nodes emit
    /// their recorded values instead of following their input.
    pub fn replay(
        &self,
        overrides: &[(Tensor, &Matrix)],
        pin_stop_gradients: bool,
    ) -> Result<Vec<Matrix>> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Param | Op::Constant => match overrides.iter().find(|(t, _)| t.id == id) {
                    Some((t, m)) => {
                        if m.shape() != t.shape() {
                            return Err(Error::Shape {
                                op: "replay",
                                lhs: t.shape(),
                                rhs: m.shape(),
                            });
                        }
                        (*m).clone()
                    }
                    None => node.value.clone(),
                },
                Op::StopGradient(_) if pin_stop_gradients => node.value.clone(),
                op => eval(op, &values)?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Ids of `Param` leaves from which `loss` is reachable without
    /// crossing a stop-gradient node.
    pub fn live_params(&self, loss: Tensor) -> Vec<usize> {
        let mut live = vec![false; self.nodes.len()];
        live[loss.id] = true;
        for id in (0..=loss.id).rev() {
            if !live[id] {
                continue;
            }
            if matches!(self.nodes[id].op, Op::StopGradient(_)) {
                continue;
            }
            for p in self.nodes[id].op.parents() {
                live[p] = true;
            }
        }
        (0..self.nodes.len())
            .filter(|&i| live[i] && matches!(self.nodes[i].op, Op::Param))
            .collect()
    }
}

struct NodeValues<'a>(&'a [Node]);

impl Index<usize> for NodeValues<'_> {
    type Output = Matrix;

    fn index(&self, i: usize) -> &Matrix {
        &self.0[i].value
    }
}
