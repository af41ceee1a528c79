//! Forward and backward kernels for every recorded operation.
//!
//! All values are rank-2 `f64` arrays. Elementwise binary operations
//! broadcast a dimension of size 1 against the other operand; the backward
//! pass sums the incoming gradient over every broadcast axis.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    Silu,
    Softplus,
    Exp,
    /// Natural log; inputs must be strictly positive.
    Log,
    Sqrt,
    Square,
    /// Smooth Huber with threshold `delta`: quadratic inside, linear outside.
    Huber(f64),
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Silu => x * sigmoid(x),
            Activation::Softplus => softplus(x),
            Activation::Exp => x.exp(),
            Activation::Log => x.ln(),
            Activation::Sqrt => x.sqrt(),
            Activation::Square => x * x,
            Activation::Huber(delta) => huber(x, delta),
        }
    }

    /// Derivative given the input `x` and the already computed output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Softplus => sigmoid(x),
            Activation::Exp => y,
            Activation::Log => 1.0 / x,
            Activation::Sqrt => 0.5 / y,
            Activation::Square => 2.0 * x,
            Activation::Huber(delta) => {
                if x.abs() <= delta {
                    x
                } else {
                    delta * x.signum()
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    /// All entries to a 1x1 sum.
    Sum,
    /// All entries to a 1x1 mean.
    Mean,
    /// Each row to its sum (r x 1).
    RowSum,
    /// Each column to its sum (1 x c).
    ColSum,
    /// Consecutive blocks of `n` rows to their mean ((r/n) x c).
    GroupMean(usize),
    /// Numerically stable row-wise log-sum-exp (r x 1).
    LogSumExpRows,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dim {
    Rows,
    Cols,
}

/// Operation kinds that can be recorded on a tape.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    Offset(f64),
    Activation(Activation),
    Concat(Dim),
    Slice { dim: Dim, start: usize, len: usize },
    Reduce(Reduce),
    /// Repeat every row `n` times consecutively.
    RepeatRows(usize),
    Reshape { rows: usize, cols: usize },
    Transpose,
    /// Select rows by index (embedding lookup).
    Gather(Arc<[usize]>),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale(_) => "scale",
            OpKind::Offset(_) => "offset",
            OpKind::Activation(_) => "activation",
            OpKind::Concat(_) => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Reduce(_) => "reduce",
            OpKind::RepeatRows(_) => "repeat_rows",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Gather(_) => "gather",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => Some(2),
            OpKind::Concat(_) => None,
            _ => Some(1),
        }
    }
}

fn dims(a: &Array2<f64>) -> (usize, usize) {
    a.dim()
}

fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let one = |x: usize, y: usize| -> Option<usize> {
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
    match (one(a.0, b.0), one(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::shape(
            op,
            format!("cannot broadcast {}x{} with {}x{}", a.0, a.1, b.0, b.1),
        )),
    }
}

fn bview<'a>(a: &'a Array2<f64>, shape: (usize, usize)) -> ArrayView2<'a, f64> {
    a.broadcast(shape).expect("shape checked by broadcast_shape")
}

/// Sum `g` down to `shape`, undoing a rank-2 broadcast.
fn unbroadcast(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn binary(
    op: &'static str,
    a: &Array2<f64>,
    b: &Array2<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Array2<f64>> {
    let shape = broadcast_shape(op, dims(a), dims(b))?;
    let mut out = Array2::zeros(shape);
    Zip::from(&mut out)
        .and(&bview(a, shape))
        .and(&bview(b, shape))
        .for_each(|o, &x, &y| *o = f(x, y));
    Ok(out)
}

pub(crate) fn forward(kind: &OpKind, inputs: &[&Array2<f64>]) -> Result<Array2<f64>> {
    let name = kind.name();
    if let Some(n) = kind.arity() {
        if inputs.len() != n {
            return Err(Error::shape(
                name,
                format!("expected {n} inputs, got {}", inputs.len()),
            ));
        }
    } else if inputs.is_empty() {
        return Err(Error::shape(name, "needs at least one input"));
    }
    let x = inputs[0];
    let (r, c) = dims(x);
    Ok(match kind {
        OpKind::MatMul => {
            let b = inputs[1];
            if c != b.nrows() {
                return Err(Error::shape(
                    name,
                    format!("{}x{} times {}x{}", r, c, b.nrows(), b.ncols()),
                ));
            }
            x.dot(b)
        }
        OpKind::Add => binary(name, x, inputs[1], |a, b| a + b)?,
        OpKind::Sub => binary(name, x, inputs[1], |a, b| a - b)?,
        OpKind::Mul => binary(name, x, inputs[1], |a, b| a * b)?,
        OpKind::Div => binary(name, x, inputs[1], |a, b| a / b)?,
        OpKind::Scale(k) => x * *k,
        OpKind::Offset(k) => x + *k,
        OpKind::Activation(act) => x.mapv(|v| act.apply(v)),
        OpKind::Concat(dim) => {
            let axis = match dim {
                Dim::Rows => Axis(0),
                Dim::Cols => Axis(1),
            };
            let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
            ndarray::concatenate(axis, &views).map_err(|_| {
                let shapes: Vec<String> = inputs
                    .iter()
                    .map(|a| format!("{}x{}", a.nrows(), a.ncols()))
                    .collect();
                Error::shape(name, format!("incompatible parts along {dim:?}: {}", shapes.join(", ")))
            })?
        }
        OpKind::Slice { dim, start, len } => {
            let extent = match dim {
                Dim::Rows => r,
                Dim::Cols => c,
            };
            if start + len > extent || *len == 0 {
                return Err(Error::shape(
                    name,
                    format!("range {start}..{} of {dim:?} extent {extent}", start + len),
                ));
            }
            match dim {
                Dim::Rows => x.slice(s![*start..start + len, ..]).to_owned(),
                Dim::Cols => x.slice(s![.., *start..start + len]).to_owned(),
            }
        }
        OpKind::Reduce(red) => match red {
            Reduce::Sum => Array2::from_elem((1, 1), x.sum()),
            Reduce::Mean => {
                if x.is_empty() {
                    return Err(Error::shape(name, "mean of an empty tensor"));
                }
                Array2::from_elem((1, 1), x.sum() / x.len() as f64)
            }
            Reduce::RowSum => x.sum_axis(Axis(1)).insert_axis(Axis(1)),
            Reduce::ColSum => x.sum_axis(Axis(0)).insert_axis(Axis(0)),
            Reduce::GroupMean(n) => {
                if *n == 0 || r % n != 0 {
                    return Err(Error::shape(name, format!("{r} rows not divisible into groups of {n}")));
                }
                let groups = r / n;
                let mut out = Array2::zeros((groups, c));
                for (g, mut row) in out.outer_iter_mut().enumerate() {
                    let block = x.slice(s![g * n..(g + 1) * n, ..]);
                    row.assign(&(block.sum_axis(Axis(0)) / *n as f64));
                }
                out
            }
            Reduce::LogSumExpRows => {
                let mut out = Array2::zeros((r, 1));
                for (i, row) in x.outer_iter().enumerate() {
                    out[[i, 0]] = logsumexp(row.iter().copied());
                }
                out
            }
        },
        OpKind::RepeatRows(n) => {
            if *n == 0 {
                return Err(Error::shape(name, "repeat count must be positive"));
            }
            let mut out = Array2::zeros((r * n, c));
            for (i, row) in x.outer_iter().enumerate() {
                for k in 0..*n {
                    out.row_mut(i * n + k).assign(&row);
                }
            }
            out
        }
        OpKind::Reshape { rows, cols } => {
            if rows * cols != r * c {
                return Err(Error::shape(
                    name,
                    format!("cannot reshape {r}x{c} into {rows}x{cols}"),
                ));
            }
            let flat: Vec<f64> = x.iter().copied().collect();
            Array2::from_shape_vec((*rows, *cols), flat).expect("length checked")
        }
        OpKind::Transpose => x.t().to_owned(),
        OpKind::Gather(idx) => {
            if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
                return Err(Error::shape(name, format!("row index {bad} out of {r} rows")));
            }
            x.select(Axis(0), idx)
        }
    })
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Vector-Jacobian products for each input flagged in `needs`.
pub(crate) fn backward(
    kind: &OpKind,
    inputs: &[Arc<Array2<f64>>],
    output: &Array2<f64>,
    grad: &Array2<f64>,
    needs: &[bool],
) -> Vec<Option<Array2<f64>>> {
    let x = &*inputs[0];
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    match kind {
        OpKind::MatMul => {
            let b = &*inputs[1];
            vec![
                want(0).then(|| grad.dot(&b.t())),
                want(1).then(|| x.t().dot(grad)),
            ]
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let b = &*inputs[1];
            let shape = grad.dim();
            let av = bview(x, shape);
            let bv = bview(b, shape);
            let ga = want(0).then(|| {
                let g = match kind {
                    OpKind::Add | OpKind::Sub => grad.clone(),
                    OpKind::Mul => grad * &bv,
                    _ => grad / &bv,
                };
                unbroadcast(g, x.dim())
            });
            let gb = want(1).then(|| {
                let g = match kind {
                    OpKind::Add => grad.clone(),
                    OpKind::Sub => -grad,
                    OpKind::Mul => grad * &av,
                    _ => {
                        let mut g = grad.clone();
                        Zip::from(&mut g)
                            .and(&av)
                            .and(&bv)
                            .for_each(|g, &a, &b| *g = -*g * a / (b * b));
                        g
                    }
                };
                unbroadcast(g, b.dim())
            });
            vec![ga, gb]
        }
        OpKind::Scale(k) => vec![Some(grad * *k)],
        OpKind::Offset(_) => vec![Some(grad.clone())],
        OpKind::Activation(act) => {
            let mut g = grad.clone();
            Zip::from(&mut g)
                .and(x)
                .and(output)
                .for_each(|g, &xi, &yi| *g *= act.derivative(xi, yi));
            vec![Some(g)]
        }
        OpKind::Concat(dim) => {
            let mut offset = 0;
            inputs
                .iter()
                .enumerate()
                .map(|(i, part)| {
                    let (pr, pc) = part.dim();
                    let piece = match dim {
                        Dim::Rows => {
                            let v = grad.slice(s![offset..offset + pr, ..]);
                            offset += pr;
                            v
                        }
                        Dim::Cols => {
                            let v = grad.slice(s![.., offset..offset + pc]);
                            offset += pc;
                            v
                        }
                    };
                    want(i).then(|| piece.to_owned())
                })
                .collect()
        }
        OpKind::Slice { dim, start, len } => {
            let mut g = Array2::zeros(x.dim());
            match dim {
                Dim::Rows => g.slice_mut(s![*start..start + len, ..]).assign(grad),
                Dim::Cols => g.slice_mut(s![.., *start..start + len]).assign(grad),
            }
            vec![Some(g)]
        }
        OpKind::Reduce(red) => {
            let (r, c) = x.dim();
            let g = match red {
                Reduce::Sum => Array2::from_elem((r, c), grad[[0, 0]]),
                Reduce::Mean => Array2::from_elem((r, c), grad[[0, 0]] / (r * c) as f64),
                Reduce::RowSum => grad.broadcast((r, c)).expect("r x 1").to_owned(),
                Reduce::ColSum => grad.broadcast((r, c)).expect("1 x c").to_owned(),
                Reduce::GroupMean(n) => {
                    let mut g = Array2::zeros((r, c));
                    for (i, mut row) in g.outer_iter_mut().enumerate() {
                        row.assign(&(&grad.row(i / n) / *n as f64));
                    }
                    g
                }
                Reduce::LogSumExpRows => {
                    let mut g = Array2::zeros((r, c));
                    for i in 0..r {
                        let lse = output[[i, 0]];
                        let gi = grad[[i, 0]];
                        for j in 0..c {
                            g[[i, j]] = gi * (x[[i, j]] - lse).exp();
                        }
                    }
                    g
                }
            };
            vec![Some(g)]
        }
        OpKind::RepeatRows(n) => {
            let (r, c) = x.dim();
            let mut g = Array2::zeros((r, c));
            for (i, mut row) in g.outer_iter_mut().enumerate() {
                row.assign(&grad.slice(s![i * n..(i + 1) * n, ..]).sum_axis(Axis(0)));
            }
            vec![Some(g)]
        }
        OpKind::Reshape { .. } => {
            let flat: Vec<f64> = grad.iter().copied().collect();
            vec![Some(Array2::from_shape_vec(x.dim(), flat).expect("same length"))]
        }
        OpKind::Transpose => vec![Some(grad.t().to_owned())],
        OpKind::Gather(idx) => {
            let mut g = Array2::zeros(x.dim());
            for (k, &i) in idx.iter().enumerate() {
                let mut row = g.row_mut(i);
                row += &grad.row(k);
            }
            vec![Some(g)]
        }
    }
}
