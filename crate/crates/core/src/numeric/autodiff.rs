//! Tape-based reverse-mode differentiation over matrices.
//!
//! Nodes are appended to the tape in evaluation order, so the tape order is
//! already a topological order; the backward sweep walks it in reverse and
//! visits every node exactly once.
//!
//! ```
//! use crate_core::numeric::autodiff::value_and_grad;
//! use crate_core::Matrix;
//!
//! // f(x) = ½‖x‖²
//! let x = Matrix::column_vector(&[1.0, 2.0]);
//! let (v, g) = value_and_grad(&[x], |t, p| {
//!     let sq = t.mul(p[0], p[0])?;
//!     let s = t.sum(sq);
//!     Ok(t.scale(s, 0.5))
//! })
//! .unwrap();
//! assert_eq!(v, 2.5);
//! assert_eq!(g[0].as_slice(), &[1.0, 2.0]);
//! ```

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::numeric::decomp::{gram_solve, logdet_gram};
use crate::numeric::matrix::Matrix;
use crate::numeric::softmax::{causal_keep, log_softmax_columns, softmax_columns, CausalConvention};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable primitives the tape knows about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Offset,
    Transpose,
    SoftmaxColumns,
    LogSoftmaxColumns,
    CausalMask,
    LogdetGram,
    Relu,
    Abs,
    LayerNorm,
    Sum,
    Columns,
    Rows,
    HCat,
    VCat,
    AddColumn,
}

impl Primitive {
    pub const ALL: [Primitive; 20] = [
        Primitive::MatMul,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::Offset,
        Primitive::Transpose,
        Primitive::SoftmaxColumns,
        Primitive::LogSoftmaxColumns,
        Primitive::CausalMask,
        Primitive::LogdetGram,
        Primitive::Relu,
        Primitive::Abs,
        Primitive::LayerNorm,
        Primitive::Sum,
        Primitive::Columns,
        Primitive::Rows,
        Primitive::HCat,
        Primitive::VCat,
        Primitive::AddColumn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Offset => "offset",
            Primitive::Transpose => "transpose",
            Primitive::SoftmaxColumns => "softmax_columns",
            Primitive::LogSoftmaxColumns => "log_softmax_columns",
            Primitive::CausalMask => "causal_mask",
            Primitive::LogdetGram => "logdet_gram",
            Primitive::Relu => "relu",
            Primitive::Abs => "abs",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Sum => "sum",
            Primitive::Columns => "columns",
            Primitive::Rows => "rows",
            Primitive::HCat => "hcat",
            Primitive::VCat => "vcat",
            Primitive::AddColumn => "add_column",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Primitive::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnregisteredPrimitive(s.to_string()))
    }
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Offset(usize),
    Transpose(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Mask(usize, CausalConvention),
    LogdetGram { input: usize, scale: T, solved: Matrix<T> },
    Relu(usize),
    Abs(usize),
    LayerNorm { input: usize, gain: usize, bias: usize, xhat: Matrix<T>, inv_std: Vec<T> },
    Sum(usize),
    Columns { input: usize, start: usize },
    Rows { input: usize, start: usize },
    HCat(Vec<usize>),
    VCat(Vec<usize>),
    AddColumn(usize, usize),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records matrix operations for a single reverse sweep.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|&v| nodes[v].needs_grad)
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Matrix<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value[(0, 0)]
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Matrix<T>, &Matrix<T>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    fn with1<R>(&self, a: Var, f: impl FnOnce(&Matrix<T>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with2(a, b, |x, y| x.matmul(y))?;
        Ok(self.push(v, Op::MatMul(a.0, b.0), self.grad_of(&[a.0, b.0])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with2(a, b, |x, y| x.add(y))?;
        Ok(self.push(v, Op::Add(a.0, b.0), self.grad_of(&[a.0, b.0])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with2(a, b, |x, y| x.sub(y))?;
        Ok(self.push(v, Op::Sub(a.0, b.0), self.grad_of(&[a.0, b.0])))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with2(a, b, |x, y| x.hadamard(y))?;
        Ok(self.push(v, Op::Mul(a.0, b.0), self.grad_of(&[a.0, b.0])))
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let v = self.with1(a, |x| x.scale(s));
        self.push(v, Op::Scale(a.0, s), self.grad_of(&[a.0]))
    }

    /// Adds the constant `c` to every entry.
    pub fn offset(&self, a: Var, c: T) -> Var {
        let v = self.with1(a, |x| x.map(|e| e + c));
        self.push(v, Op::Offset(a.0), self.grad_of(&[a.0]))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let v = self.with1(a, Matrix::transpose);
        self.push(v, Op::Transpose(a.0), self.grad_of(&[a.0]))
    }

    pub fn softmax_columns(&self, a: Var) -> Result<Var> {
        let v = self.with1(a, softmax_columns)?;
        Ok(self.push(v, Op::Softmax(a.0), self.grad_of(&[a.0])))
    }

    pub fn log_softmax_columns(&self, a: Var) -> Result<Var> {
        let v = self.with1(a, log_softmax_columns)?;
        Ok(self.push(v, Op::LogSoftmax(a.0), self.grad_of(&[a.0])))
    }

    /// Replaces masked entries of a square matrix with `−∞`.
    pub fn causal_mask(&self, a: Var, convention: CausalConvention) -> Result<Var> {
        let v = self.with1(a, |x| crate::numeric::softmax::causal_mask(x, convention))?;
        Ok(self.push(v, Op::Mask(a.0, convention), self.grad_of(&[a.0])))
    }

    /// `log det(I + scale·ZᵀZ)` as a 1×1 node.
    pub fn logdet_gram(&self, z: Var, scale: T) -> Result<Var> {
        let (value, solved) = self.with1(z, |m| -> Result<_> {
            Ok((logdet_gram(m, scale)?, gram_solve(m, scale)?))
        })?;
        let needs = self.grad_of(&[z.0]);
        Ok(self.push(
            Matrix::filled(1, 1, value),
            Op::LogdetGram {
                input: z.0,
                scale,
                solved,
            },
            needs,
        ))
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.with1(a, |x| x.map(|e| e.max(T::zero())));
        self.push(v, Op::Relu(a.0), self.grad_of(&[a.0]))
    }

    pub fn abs(&self, a: Var) -> Var {
        let v = self.with1(a, |x| x.map(T::abs));
        self.push(v, Op::Abs(a.0), self.grad_of(&[a.0]))
    }

    /// Per-column standardization followed by the affine map `gain ⊙ x̂ + bias`
    /// (`gain`, `bias` are `d×1`).
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (out, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let (xv, g, b) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            let d = xv.rows();
            if g.shape() != (d, 1) || b.shape() != (d, 1) {
                return shape_err(format!(
                    "layer_norm: input has {d} rows but gain is {:?} and bias is {:?}",
                    g.shape(),
                    b.shape()
                ));
            }
            let (xhat, inv_std) = standardize_columns(xv, eps);
            let out = Matrix::from_fn(d, xv.cols(), |r, c| g[(r, 0)] * xhat[(r, c)] + b[(r, 0)]);
            (out, xhat, inv_std)
        };
        let needs = self.grad_of(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                input: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&self, a: Var) -> Var {
        let v = self.with1(a, |x| Matrix::filled(1, 1, x.sum()));
        self.push(v, Op::Sum(a.0), self.grad_of(&[a.0]))
    }

    pub fn columns(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.with1(a, |x| x.columns(start, len))?;
        Ok(self.push(v, Op::Columns { input: a.0, start }, self.grad_of(&[a.0])))
    }

    pub fn rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.with1(a, |x| x.row_block(start, len))?;
        Ok(self.push(v, Op::Rows { input: a.0, start }, self.grad_of(&[a.0])))
    }

    pub fn hcat(&self, parts: &[Var]) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Matrix<T>> = parts.iter().map(|p| &nodes[p.0].value).collect();
            Matrix::hcat(&refs)?
        };
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs = self.grad_of(&idx);
        Ok(self.push(v, Op::HCat(idx), needs))
    }

    pub fn vcat(&self, parts: &[Var]) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Matrix<T>> = parts.iter().map(|p| &nodes[p.0].value).collect();
            Matrix::vcat(&refs)?
        };
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs = self.grad_of(&idx);
        Ok(self.push(v, Op::VCat(idx), needs))
    }

    /// Adds the `d×1` vector `v` to every column of `a`.
    pub fn add_column(&self, a: Var, v: Var) -> Result<Var> {
        let out = self.with2(a, v, |x, col| {
            if col.cols() != 1 {
                return shape_err(format!("add_column expects a column vector, got {:?}", col.shape()));
            }
            x.add_column_broadcast(col.as_slice())
        })?;
        Ok(self.push(out, Op::AddColumn(a.0, v.0), self.grad_of(&[a.0, v.0])))
    }

    /// Applies an attribute-free primitive by name. Unknown names fail with
    /// `UnregisteredPrimitive` before anything is recorded.
    pub fn apply(&self, name: &str, inputs: &[Var]) -> Result<Var> {
        let prim: Primitive = name.parse()?;
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "primitive `{name}` takes {n} input(s), got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        match prim {
            Primitive::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            Primitive::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            Primitive::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            Primitive::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            Primitive::AddColumn => arity(2).and_then(|_| self.add_column(inputs[0], inputs[1])),
            Primitive::Transpose => arity(1).map(|_| self.transpose(inputs[0])),
            Primitive::SoftmaxColumns => arity(1).and_then(|_| self.softmax_columns(inputs[0])),
            Primitive::LogSoftmaxColumns => arity(1).and_then(|_| self.log_softmax_columns(inputs[0])),
            Primitive::Relu => arity(1).map(|_| self.relu(inputs[0])),
            Primitive::Abs => arity(1).map(|_| self.abs(inputs[0])),
            Primitive::Sum => arity(1).map(|_| self.sum(inputs[0])),
            Primitive::HCat => self.hcat(inputs),
            Primitive::VCat => self.vcat(inputs),
            Primitive::Scale
            | Primitive::Offset
            | Primitive::CausalMask
            | Primitive::LogdetGram
            | Primitive::LayerNorm
            | Primitive::Columns
            | Primitive::Rows => Err(Error::InvalidArgument(format!(
                "primitive `{name}` takes attributes; call the typed method"
            ))),
        }
    }

    /// Reverse sweep from a 1×1 output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[output.0].value.shape() != (1, 1) {
            return shape_err(format!(
                "backward needs a scalar output, got {:?}",
                nodes[output.0].value.shape()
            ));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=output.0).rev() {
            if !nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            propagate(&nodes, idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], nodes: &[Node<T>], target: usize, g: Matrix<T>) -> Result<()> {
    if !nodes[target].needs_grad {
        return Ok(());
    }
    match &mut grads[target] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn propagate<T: Scalar>(nodes: &[Node<T>], idx: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<()> {
    let out = &nodes[idx].value;
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if nodes[*a].needs_grad {
                accumulate(grads, nodes, *a, g.matmul_t(&nodes[*b].value)?)?;
            }
            if nodes[*b].needs_grad {
                accumulate(grads, nodes, *b, nodes[*a].value.t_matmul(g)?)?;
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone())?;
            accumulate(grads, nodes, *b, g.clone())?;
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone())?;
            accumulate(grads, nodes, *b, g.scale(-T::one()))?;
        }
        Op::Mul(a, b) => {
            if nodes[*a].needs_grad {
                accumulate(grads, nodes, *a, g.hadamard(&nodes[*b].value)?)?;
            }
            if nodes[*b].needs_grad {
                accumulate(grads, nodes, *b, g.hadamard(&nodes[*a].value)?)?;
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g.scale(*s))?,
        Op::Offset(a) => accumulate(grads, nodes, *a, g.clone())?,
        Op::Transpose(a) => accumulate(grads, nodes, *a, g.transpose())?,
        Op::Softmax(a) => {
            let (rows, cols) = out.shape();
            let mut dx = Matrix::zeros(rows, cols);
            for c in 0..cols {
                let inner: T = (0..rows).map(|r| out[(r, c)] * g[(r, c)]).sum();
                for r in 0..rows {
                    dx[(r, c)] = out[(r, c)] * (g[(r, c)] - inner);
                }
            }
            accumulate(grads, nodes, *a, dx)?;
        }
        Op::LogSoftmax(a) => {
            let (rows, cols) = out.shape();
            let mut dx = Matrix::zeros(rows, cols);
            for c in 0..cols {
                let total: T = (0..rows).map(|r| g[(r, c)]).sum();
                for r in 0..rows {
                    dx[(r, c)] = g[(r, c)] - out[(r, c)].exp() * total;
                }
            }
            accumulate(grads, nodes, *a, dx)?;
        }
        Op::Mask(a, conv) => {
            let dx = Matrix::from_fn(out.rows(), out.cols(), |r, c| {
                if causal_keep(*conv, r, c) {
                    g[(r, c)]
                } else {
                    T::zero()
                }
            });
            accumulate(grads, nodes, *a, dx)?;
        }
        Op::LogdetGram { input, scale, solved } => {
            let coeff = g[(0, 0)] * T::lit(2.0) * *scale;
            accumulate(grads, nodes, *input, solved.scale(coeff))?;
        }
        Op::Relu(a) => {
            let x = &nodes[*a].value;
            let dx = g.zip_map(x, |gi, xi| if xi > T::zero() { gi } else { T::zero() })?;
            accumulate(grads, nodes, *a, dx)?;
        }
        Op::Abs(a) => {
            let x = &nodes[*a].value;
            let dx = g.zip_map(x, |gi, xi| {
                if xi > T::zero() {
                    gi
                } else if xi < T::zero() {
                    -gi
                } else {
                    T::zero()
                }
            })?;
            accumulate(grads, nodes, *a, dx)?;
        }
        Op::LayerNorm {
            input,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let (d, n) = xhat.shape();
            let gain_v = &nodes[*gain].value;
            if nodes[*gain].needs_grad {
                let dg = Matrix::from_fn(d, 1, |r, _| (0..n).map(|c| g[(r, c)] * xhat[(r, c)]).sum());
                accumulate(grads, nodes, *gain, dg)?;
            }
            if nodes[*bias].needs_grad {
                accumulate(grads, nodes, *bias, Matrix::column_vector(&g.row_sums()))?;
            }
            if nodes[*input].needs_grad {
                let dn = T::lit(d as f64);
                let mut dx = Matrix::zeros(d, n);
                for c in 0..n {
                    let dxhat: Vec<T> = (0..d).map(|r| g[(r, c)] * gain_v[(r, 0)]).collect();
                    let s1: T = dxhat.iter().copied().sum();
                    let s2: T = (0..d).map(|r| dxhat[r] * xhat[(r, c)]).sum();
                    for r in 0..d {
                        dx[(r, c)] = inv_std[c] / dn * (dn * dxhat[r] - s1 - xhat[(r, c)] * s2);
                    }
                }
                accumulate(grads, nodes, *input, dx)?;
            }
        }
        Op::Sum(a) => {
            let (r, c) = nodes[*a].value.shape();
            accumulate(grads, nodes, *a, Matrix::filled(r, c, g[(0, 0)]))?;
        }
        Op::Columns { input, start } => {
            let (r, c) = nodes[*input].value.shape();
            let mut dx = Matrix::zeros(r, c);
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    dx[(i, start + j)] = g[(i, j)];
                }
            }
            accumulate(grads, nodes, *input, dx)?;
        }
        Op::Rows { input, start } => {
            let (r, c) = nodes[*input].value.shape();
            let mut dx = Matrix::zeros(r, c);
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    dx[(start + i, j)] = g[(i, j)];
                }
            }
            accumulate(grads, nodes, *input, dx)?;
        }
        Op::HCat(parts) => {
            let mut off = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                accumulate(grads, nodes, p, g.columns(off, w)?)?;
                off += w;
            }
        }
        Op::VCat(parts) => {
            let mut off = 0;
            for &p in parts {
                let h = nodes[p].value.rows();
                accumulate(grads, nodes, p, g.row_block(off, h)?)?;
                off += h;
            }
        }
        Op::AddColumn(a, v) => {
            accumulate(grads, nodes, *a, g.clone())?;
            accumulate(grads, nodes, *v, Matrix::column_vector(&g.row_sums()))?;
        }
    }
    Ok(())
}

/// Per-column standardization; returns `x̂` and `1/√(var + eps)` per column.
pub fn standardize_columns<T: Scalar>(x: &Matrix<T>, eps: T) -> (Matrix<T>, Vec<T>) {
    let (d, n) = x.shape();
    let dn = T::lit(d as f64);
    let mut xhat = Matrix::zeros(d, n);
    let mut inv_std = Vec::with_capacity(n);
    for c in 0..n {
        let mean = (0..d).map(|r| x[(r, c)]).sum::<T>() / dn;
        let var = (0..d).map(|r| (x[(r, c)] - mean) * (x[(r, c)] - mean)).sum::<T>() / dn;
        let is = T::one() / (var + eps).sqrt();
        for r in 0..d {
            xhat[(r, c)] = (x[(r, c)] - mean) * is;
        }
        inv_std.push(is);
    }
    (xhat, inv_std)
}

/// Gradients from one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; the zero matrix for constants and for
    /// nodes the output does not depend on.
    pub fn get(&self, v: Var) -> Matrix<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    /// Moves the gradient out, avoiding a copy.
    pub fn take(&mut self, v: Var) -> Matrix<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

/// Evaluates a scalar expression built on a fresh tape and returns its value
/// together with the gradient with respect to every input.
pub fn value_and_grad<T, F>(at: &[Matrix<T>], f: F) -> Result<(T, Vec<Matrix<T>>)>
where
    T: Scalar,
    F: FnOnce(&Tape<T>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = at.iter().map(|m| tape.param(m.clone())).collect();
    let out = f(&tape, &vars)?;
    if tape.shape(out) != (1, 1) {
        return shape_err(format!("expression is not scalar: {:?}", tape.shape(out)));
    }
    let value = tape.scalar(out);
    let mut grads = tape.backward(out)?;
    Ok((value, vars.iter().map(|&v| grads.take(v)).collect()))
}
