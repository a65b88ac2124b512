use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result, Shape};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Softplus,
}

/// Elementwise scalar function returning `(f(x), f'(x))`.
pub type ScalarFn = fn(f64) -> (f64, f64);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    MatMul(Var, Var),
    Dense {
        x: Var,
        w: Var,
        b: Var,
        act: Activation,
    },
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Abs(Var),
    Elementwise(Var, ScalarFn),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    SumGroups(Var, usize),
    L2Norm(Var),
    Normalize3(Var),
    Cross3(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    CumprodExclusive(Var),
    PosEnc(Var, usize),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Dynamic computation graph recorded in creation order.
///
/// Nodes are appended as operations are applied, so the node list is always a
/// topological order; [`Graph::backward`] walks it in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::ShapeMismatch {
            op,
            left: a,
            right: b,
        }),
    }
}

fn broadcast_map(a: &Tensor, b: &Tensor, shape: Shape, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Tensor {
            rows: shape.0,
            cols: shape.1,
            data,
        };
    }
    let (rows, cols) = shape;
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let ra = if a.rows == 1 { 0 } else { r };
        let rb = if b.rows == 1 { 0 } else { r };
        for c in 0..cols {
            let x = a.data[ra * a.cols + if a.cols == 1 { 0 } else { c }];
            let y = b.data[rb * b.cols + if b.cols == 1 { 0 } else { c }];
            data.push(f(x, y));
        }
    }
    Tensor { rows, cols, data }
}

/// Sums `t` down to `shape` along broadcast dimensions.
fn reduce_to(t: Tensor, shape: Shape) -> Tensor {
    if t.shape() == shape {
        return t;
    }
    let mut out = Tensor::zeros(shape.0, shape.1);
    for r in 0..t.rows {
        let ro = if shape.0 == 1 { 0 } else { r };
        for c in 0..t.cols {
            let co = if shape.1 == 1 { 0 } else { c };
            out.data[ro * shape.1 + co] += t.data[r * t.cols + c];
        }
    }
    out
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Softplus => softplus(z),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Softplus => -(-y).exp_m1(),
        }
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
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free input that receives gradient but is not bound to a parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.val(v)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.val(v).shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.val(v).clone();
        self.constant(value)
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let shape = broadcast_shape(op, self.shape(a), self.shape(b))?;
        Ok(broadcast_map(self.val(a), self.val(b), shape, f))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("div", a, b, |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Div(a, b), rg))
    }

    /// `scale * a + offset`.
    pub fn affine(&mut self, a: Var, scale: f64, offset: f64) -> Var {
        let value = self.val(a).map(|x| scale * x + offset);
        let rg = self.rg(a);
        self.push(value, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let mut out = Tensor::zeros(sa.0, sb.1);
        gemm(self.val(a), false, self.val(b), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Fused `act(x W + b)` with `b` a `1 x m` row.
    pub fn dense(&mut self, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.1 != sw.0 {
            return Err(Error::ShapeMismatch {
                op: "dense",
                left: sx,
                right: sw,
            });
        }
        if sb != (1, sw.1) {
            return Err(Error::ShapeMismatch {
                op: "dense bias",
                left: sw,
                right: sb,
            });
        }
        let mut out = Tensor::zeros(sx.0, sw.1);
        gemm(self.val(x), false, self.val(w), false, &mut out, false);
        let bias = &self.val(b).data;
        for row in out.data.chunks_exact_mut(sw.1) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o = act.apply(*o + bv);
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Dense { x, w, b, act }, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.val(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Applies a smooth scalar function given with its derivative.
    pub fn elementwise(&mut self, a: Var, f: ScalarFn) -> Var {
        self.unary(a, |x| f(x).0, Op::Elementwise(a, f))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.val(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let n = t.len().max(1) as f64;
        let value = Tensor::scalar(t.sum() / n);
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Row sums: `n x c -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let data = if t.cols == 0 {
            vec![0.0; t.rows]
        } else {
            t.data.chunks_exact(t.cols).map(|r| r.iter().sum()).collect()
        };
        let value = Tensor {
            rows: t.rows,
            cols: 1,
            data,
        };
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a), rg)
    }

    /// Sums consecutive blocks of `group` rows: `(n*group) x c -> n x c`.
    pub fn sum_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let t = self.val(a);
        if group == 0 || t.rows % group != 0 {
            return Err(Error::ShapeMismatch {
                op: "sum_groups",
                left: t.shape(),
                right: (group, 1),
            });
        }
        let rows = t.rows / group;
        let mut out = Tensor::zeros(rows, t.cols);
        for r in 0..t.rows {
            let dst = r / group;
            for c in 0..t.cols {
                out.data[dst * t.cols + c] += t.data[r * t.cols + c];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SumGroups(a, group), rg))
    }

    /// Euclidean norm of each row: `n x c -> n x 1`.
    pub fn l2norm(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let data = t
            .data
            .chunks_exact(t.cols.max(1))
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let value = Tensor {
            rows: t.rows,
            cols: 1,
            data,
        };
        let rg = self.rg(a);
        self.push(value, Op::L2Norm(a), rg)
    }

    /// Scales each row of an `n x 3` tensor to unit length.
    pub fn normalize3(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        if t.cols != 3 {
            return Err(Error::ShapeMismatch {
                op: "normalize3",
                left: t.shape(),
                right: (t.rows, 3),
            });
        }
        let mut out = t.clone();
        for r in out.data.chunks_exact_mut(3) {
            let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            if n > 0.0 {
                r.iter_mut().for_each(|x| *x /= n);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Normalize3(a), rg))
    }

    /// Row-wise cross product of two `n x 3` tensors.
    pub fn cross3(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb || sa.1 != 3 {
            return Err(Error::ShapeMismatch {
                op: "cross3",
                left: sa,
                right: sb,
            });
        }
        let value = cross_rows(self.val(a), self.val(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Cross3(a, b), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.shape(p).0);
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]),
                    right: self.shape(p),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.val(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.shape(p).1);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.val(p);
            if t.cols != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(parts[0]),
                    right: t.shape(),
                });
            }
            rows += t.rows;
            data.extend_from_slice(&t.data);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.val(a);
        if start > end || end > t.cols {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: t.shape(),
                right: (start, end),
            });
        }
        let cols = end - start;
        let mut data = Vec::with_capacity(t.rows * cols);
        for r in 0..t.rows {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let value = Tensor {
            rows: t.rows,
            cols,
            data,
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    /// Selects rows by index (repeats allowed); gradients scatter-add back.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.val(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                left: t.shape(),
                right: (bad, t.cols),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * t.cols);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor {
            rows: idx.len(),
            cols: t.cols,
            data,
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.val(a);
        if t.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: t.shape(),
                right: (rows, cols),
            });
        }
        let value = Tensor {
            rows,
            cols,
            data: t.data.clone(),
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Exclusive running product along each row: `out[r][n] = prod_{k<n} a[r][k]`.
    pub fn cumprod_exclusive(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let mut out = Tensor::zeros(t.rows, t.cols);
        for (src, dst) in t
            .data
            .chunks_exact(t.cols.max(1))
            .zip(out.data.chunks_exact_mut(t.cols.max(1)))
        {
            let mut acc = 1.0;
            for (s, d) in src.iter().zip(dst.iter_mut()) {
                *d = acc;
                acc *= s;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::CumprodExclusive(a), rg)
    }

    /// Frequency encoding `[x, sin(2^k pi x), cos(2^k pi x)]_{k<levels}` per row.
    pub fn posenc(&mut self, a: Var, levels: usize) -> Var {
        let value = posenc_values(self.val(a), levels);
        let rg = self.rg(a);
        self.push(value, Op::PosEnc(a, levels), rg)
    }

    /// Reverse pass from a scalar root; leaf gradients are kept, intermediate
    /// gradients are released once propagated.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(Error::NonScalarRoot(shape));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.rg(root) {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let contributions = self.local_grads(i, &op, g);
            self.nodes[i].op = op;
            for (p, t) in contributions {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[p.0].grad {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(())
    }

    /// Gradients of bound parameters after [`Graph::backward`].
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(|(&id, &v)| self.nodes[v.0].grad.as_ref().map(|g| (id, g)))
    }

    /// Runs backward and accumulates parameter gradients into `store`.
    pub fn backward_into(&mut self, root: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(root)?;
        for (id, g) in self.param_grads() {
            store.accumulate_grad(id, g);
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, op: &Op, g: Tensor) -> Vec<(Var, Tensor)> {
        let out = &self.nodes[i].value;
        let unary = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<(Var, Tensor)> {
            let x = self.val(a);
            let data = g
                .data
                .iter()
                .zip(&x.data)
                .zip(&out.data)
                .map(|((&g, &x), &y)| f(g, x, y))
                .collect();
            vec![(
                a,
                Tensor {
                    rows: x.rows,
                    cols: x.cols,
                    data,
                },
            )]
        };
        match *op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let gb = reduce_to(g.clone(), sb);
                vec![(a, reduce_to(g, sa)), (b, gb)]
            }
            Op::Sub(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let gb = reduce_to(g.map(|x| -x), sb);
                vec![(a, reduce_to(g, sa)), (b, gb)]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                let shape = g.shape();
                let ga = self.rg(a).then(|| reduce_to(broadcast_map(&g, tb, shape, |g, y| g * y), ta.shape()));
                let gb = self.rg(b).then(|| reduce_to(broadcast_map(&g, ta, shape, |g, x| g * x), tb.shape()));
                [(a, ga), (b, gb)].into_iter().filter_map(|(v, t)| t.map(|t| (v, t))).collect()
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                let shape = g.shape();
                let ga = self.rg(a).then(|| reduce_to(broadcast_map(&g, tb, shape, |g, y| g / y), ta.shape()));
                let gb = self.rg(b).then(|| {
                    // d(a/b)/db = -out / b
                    let q = broadcast_map(&g, out, shape, |g, o| -g * o);
                    reduce_to(broadcast_map(&q, tb, shape, |q, y| q / y), tb.shape())
                });
                [(a, ga), (b, gb)].into_iter().filter_map(|(v, t)| t.map(|t| (v, t))).collect()
            }
            Op::Affine(a, s) => vec![(a, g.map(|x| x * s))],
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                let mut res = Vec::new();
                if self.rg(a) {
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    gemm(&g, false, tb, true, &mut ga, false);
                    res.push((a, ga));
                }
                if self.rg(b) {
                    let mut gb = Tensor::zeros(tb.rows, tb.cols);
                    gemm(ta, true, &g, false, &mut gb, false);
                    res.push((b, gb));
                }
                res
            }
            Op::Dense { x, w, b, act } => {
                let gz = if act == Activation::Identity {
                    g
                } else {
                    zip_map(&g, out, |g, y| g * act.derivative_from_output(y))
                };
                let (tx, tw) = (self.val(x), self.val(w));
                let mut res = Vec::new();
                if self.rg(x) {
                    let mut gx = Tensor::zeros(tx.rows, tx.cols);
                    gemm(&gz, false, tw, true, &mut gx, false);
                    res.push((x, gx));
                }
                if self.rg(w) {
                    let mut gw = Tensor::zeros(tw.rows, tw.cols);
                    gemm(tx, true, &gz, false, &mut gw, false);
                    res.push((w, gw));
                }
                if self.rg(b) {
                    res.push((b, reduce_to(gz, (1, tw.cols))));
                }
                res
            }
            Op::Exp(a) => unary(a, &|g, _, y| g * y),
            Op::Log(a) => unary(a, &|g, x, _| g / x),
            Op::Sin(a) => unary(a, &|g, x, _| g * x.cos()),
            Op::Cos(a) => unary(a, &|g, x, _| -g * x.sin()),
            Op::Sigmoid(a) => unary(a, &|g, _, y| g * y * (1.0 - y)),
            Op::Relu(a) => unary(a, &|g, x, _| if x > 0.0 { g } else { 0.0 }),
            Op::Softplus(a) => unary(a, &|g, x, _| g * sigmoid(x)),
            Op::Abs(a) => unary(a, &|g, x, _| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            }),
            Op::Elementwise(a, f) => unary(a, &|g, x, _| g * f(x).1),
            Op::Sum(a) => {
                let (r, c) = self.shape(a);
                vec![(a, Tensor::full(r, c, g.item()))]
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(a);
                let n = (r * c).max(1) as f64;
                vec![(a, Tensor::full(r, c, g.item() / n))]
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(a);
                let mut t = Tensor::zeros(r, c);
                for (row, &gv) in t.data.chunks_exact_mut(c.max(1)).zip(&g.data) {
                    row.iter_mut().for_each(|x| *x = gv);
                }
                vec![(a, t)]
            }
            Op::SumGroups(a, k) => {
                let (r, c) = self.shape(a);
                let mut t = Tensor::zeros(r, c);
                for row in 0..r {
                    t.row_mut(row).copy_from_slice(g.row(row / k));
                }
                vec![(a, t)]
            }
            Op::L2Norm(a) => {
                let x = self.val(a);
                let mut t = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let n = out.data[r];
                    if n > 0.0 {
                        let s = g.data[r] / n;
                        for c in 0..x.cols {
                            t.data[r * x.cols + c] = s * x.data[r * x.cols + c];
                        }
                    }
                }
                vec![(a, t)]
            }
            Op::Normalize3(a) => {
                let x = self.val(a);
                let mut t = Tensor::zeros(x.rows, 3);
                for r in 0..x.rows {
                    let xr = x.row(r);
                    let n = (xr[0] * xr[0] + xr[1] * xr[1] + xr[2] * xr[2]).sqrt();
                    if n == 0.0 {
                        continue;
                    }
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot = y[0] * gr[0] + y[1] * gr[1] + y[2] * gr[2];
                    for c in 0..3 {
                        t.data[r * 3 + c] = (gr[c] - y[c] * dot) / n;
                    }
                }
                vec![(a, t)]
            }
            Op::Cross3(a, b) => {
                let ga = cross_rows(self.val(b), &g);
                let gb = cross_rows(&g, self.val(a));
                vec![(a, ga), (b, gb)]
            }
            Op::ConcatCols(ref parts) => {
                let mut res = Vec::with_capacity(parts.len());
                let mut start = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.rg(p) {
                        let mut t = Tensor::zeros(r, c);
                        for row in 0..r {
                            t.row_mut(row).copy_from_slice(&g.row(row)[start..start + c]);
                        }
                        res.push((p, t));
                    }
                    start += c;
                }
                res
            }
            Op::ConcatRows(ref parts) => {
                let mut res = Vec::with_capacity(parts.len());
                let mut start = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.rg(p) {
                        let data = g.data[start * c..(start + r) * c].to_vec();
                        res.push((p, Tensor { rows: r, cols: c, data }));
                    }
                    start += r;
                }
                res
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(a);
                let mut t = Tensor::zeros(r, c);
                for row in 0..r {
                    t.row_mut(row)[start..start + g.cols].copy_from_slice(g.row(row));
                }
                vec![(a, t)]
            }
            Op::GatherRows(a, ref idx) => {
                let (r, c) = self.shape(a);
                let mut t = Tensor::zeros(r, c);
                for (k, &src) in idx.iter().enumerate() {
                    for col in 0..c {
                        t.data[src * c + col] += g.data[k * c + col];
                    }
                }
                vec![(a, t)]
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(a);
                vec![(
                    a,
                    Tensor {
                        rows: r,
                        cols: c,
                        data: g.data,
                    },
                )]
            }
            Op::CumprodExclusive(a) => {
                let x = self.val(a);
                let c = x.cols.max(1);
                let mut t = Tensor::zeros(x.rows, x.cols);
                for ((xr, (pr, gr)), tr) in x
                    .data
                    .chunks_exact(c)
                    .zip(out.data.chunks_exact(c).zip(g.data.chunks_exact(c)))
                    .zip(t.data.chunks_exact_mut(c))
                {
                    // tail[k] = sum_{n>k} g[n] prod_{k<j<n} x[j]
                    let mut tail = 0.0;
                    for k in (0..x.cols).rev() {
                        tr[k] = pr[k] * tail;
                        tail = gr[k] + xr[k] * tail;
                    }
                }
                vec![(a, t)]
            }
            Op::PosEnc(a, levels) => {
                let x = self.val(a);
                let d = x.cols;
                let w = out.cols;
                let mut t = Tensor::zeros(x.rows, d);
                for r in 0..x.rows {
                    let gr = &g.data[r * w..(r + 1) * w];
                    let yr = &out.data[r * w..(r + 1) * w];
                    let tr = &mut t.data[r * d..(r + 1) * d];
                    tr.copy_from_slice(&gr[..d]);
                    let mut freq = std::f64::consts::PI;
                    for k in 0..levels {
                        let s = d + 2 * d * k;
                        let co = s + d;
                        for j in 0..d {
                            tr[j] += freq * (gr[s + j] * yr[co + j] - gr[co + j] * yr[s + j]);
                        }
                        freq *= 2.0;
                    }
                }
                vec![(a, t)]
            }
        }
    }
}

fn cross_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows, 3);
    for ((x, y), o) in a
        .data
        .chunks_exact(3)
        .zip(b.data.chunks_exact(3))
        .zip(out.data.chunks_exact_mut(3))
    {
        o[0] = x[1] * y[2] - x[2] * y[1];
        o[1] = x[2] * y[0] - x[0] * y[2];
        o[2] = x[0] * y[1] - x[1] * y[0];
    }
    out
}

pub(crate) fn posenc_values(x: &Tensor, levels: usize) -> Tensor {
    let d = x.cols;
    let w = d * (1 + 2 * levels);
    let mut out = Tensor::zeros(x.rows, w);
    for r in 0..x.rows {
        let xr = x.row(r);
        let or = &mut out.data[r * w..(r + 1) * w];
        or[..d].copy_from_slice(xr);
        let mut freq = std::f64::consts::PI;
        for k in 0..levels {
            let s = d + 2 * d * k;
            for j in 0..d {
                let (sn, cs) = (freq * xr[j]).sin_cos();
                or[s + j] = sn;
                or[s + d + j] = cs;
            }
            freq *= 2.0;
        }
    }
    out
}
