//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape once in reverse. The primitive set is closed: anything outside
//! [`PRIMITIVES`] (plus the structural slicing/concatenation helpers) cannot be
//! recorded, and [`Graph::apply`] reports unknown names as
//! [`Error::UnsupportedPrimitive`].

use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Names accepted by [`Graph::apply`].
pub const PRIMITIVES: &[&str] = &[
    "affine", "matmul", "add", "sub", "mul", "tanh", "sigmoid", "softplus", "exp", "log", "sum",
    "mean", "square", "max",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    Max(usize, usize),
    SliceCols(usize, usize),
    ConcatCols(usize, usize),
    RepeatRows(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the root does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(&[r, c])
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(t) => t,
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(&[r, c])
            }
        }
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

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let value = value.as_matrix();
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let value = value.as_matrix();
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.shape();
        (s[0], s[1])
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let rg = self.rg(a.0);
        self.push(value, op, rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let value = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, f)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::MatMul(a.0, b.0), rg))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(Error::shape(format!(
                "add_row: {:?} onto {r}x{c}",
                self.dims(row)
            )));
        }
        let mut value = self.nodes[a.0].value.clone();
        let bias = self.nodes[row.0].value.data().to_vec();
        for chunk in value.data_mut().chunks_mut(c.max(1)) {
            for (v, b) in chunk.iter_mut().zip(&bias) {
                *v += b;
            }
        }
        let rg = self.rg(a.0) || self.rg(row.0);
        Ok(self.push(value, Op::AddRow(a.0, row.0), rg))
    }

    /// `x * w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a.0, b.0), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a.0, b.0), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a.0, b.0), "mul", |x, y| x * y)
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Max(a.0, b.0), "max", f64::max)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a.0, c), |x| x * c)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a.0), |x| x + c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a.0), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a.0), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a.0), |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.mean();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::Mean(a.0), rg)
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.nodes[a.0].value.data();
        let data: Vec<f64> = (0..r)
            .map(|i| src[i * c..(i + 1) * c].iter().sum())
            .collect();
        let rg = self.rg(a.0);
        self.push(
            Tensor {
                shape: vec![r, 1],
                data,
            },
            Op::SumCols(a.0),
            rg,
        )
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start > end || end > c {
            return Err(Error::shape(format!(
                "slice_cols {start}..{end} of {c} columns"
            )));
        }
        let src = self.nodes[a.0].value.data();
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let rg = self.rg(a.0);
        Ok(self.push(
            Tensor {
                shape: vec![r, w],
                data,
            },
            Op::SliceCols(a.0, start),
            rg,
        ))
    }

    /// `[a | b]` side by side.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ra != rb {
            return Err(Error::shape(format!("concat_cols: {ra} rows vs {rb} rows")));
        }
        let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&da[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&db[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            Tensor {
                shape: vec![ra, ca + cb],
                data,
            },
            Op::ConcatCols(a.0, b.0),
            rg,
        ))
    }

    /// Repeats every row `k` times consecutively: `r x c -> (r*k) x c`.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let (r, c) = self.dims(a);
        let src = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(r * k * c);
        for i in 0..r {
            for _ in 0..k {
                data.extend_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        let rg = self.rg(a.0);
        self.push(
            Tensor {
                shape: vec![r * k, c],
                data,
            },
            Op::RepeatRows(a.0, k),
            rg,
        )
    }

    /// Records a primitive by name.
    pub fn apply(&mut self, name: &str, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::Invalid(format!(
                    "`{name}` takes {n} inputs, got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        match name {
            "affine" => {
                arity(3)?;
                self.affine(inputs[0], inputs[1], inputs[2])
            }
            "matmul" | "add" | "sub" | "mul" | "max" => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match name {
                    "matmul" => self.matmul(a, b),
                    "add" => self.add(a, b),
                    "sub" => self.sub(a, b),
                    "mul" => self.mul(a, b),
                    _ => self.max(a, b),
                }
            }
            "tanh" | "sigmoid" | "softplus" | "exp" | "log" | "sum" | "mean" | "square" => {
                arity(1)?;
                let a = inputs[0];
                Ok(match name {
                    "tanh" => self.tanh(a),
                    "sigmoid" => self.sigmoid(a),
                    "softplus" => self.softplus(a),
                    "exp" => self.exp(a),
                    "log" => self.log(a),
                    "sum" => self.sum(a),
                    "mean" => self.mean(a),
                    _ => self.square(a),
                })
            }
            other => Err(Error::UnsupportedPrimitive(other.to_string())),
        }
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.dims(root) != (1, 1) {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got {:?}",
                self.dims(root)
            )));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = dims_of(&self.nodes[a].value);
                    let (_, nn) = dims_of(&self.nodes[b].value);
                    if self.rg(a) {
                        // dA = dC * B^T
                        let mut da = vec![0.0; m * k];
                        gemm(
                            m,
                            nn,
                            k,
                            g.data(),
                            (nn, 1),
                            self.nodes[b].value.data(),
                            (1, nn),
                            &mut da,
                            false,
                        );
                        accumulate(
                            &mut grads,
                            a,
                            Tensor {
                                shape: vec![m, k],
                                data: da,
                            },
                        );
                    }
                    if self.rg(b) {
                        // dB = A^T * dC
                        let mut db = vec![0.0; k * nn];
                        gemm(
                            k,
                            m,
                            nn,
                            self.nodes[a].value.data(),
                            (1, k),
                            g.data(),
                            (nn, 1),
                            &mut db,
                            false,
                        );
                        accumulate(
                            &mut grads,
                            b,
                            Tensor {
                                shape: vec![k, nn],
                                data: db,
                            },
                        );
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(row) {
                        let (_, c) = dims_of(&g);
                        let mut acc = vec![0.0; c];
                        for chunk in g.data().chunks(c.max(1)) {
                            for (s, v) in acc.iter_mut().zip(chunk) {
                                *s += v;
                            }
                        }
                        accumulate(
                            &mut grads,
                            row,
                            Tensor {
                                shape: vec![1, c],
                                data: acc,
                            },
                        );
                    }
                    if self.rg(a) {
                        accumulate(&mut grads, a, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(b) {
                        accumulate(&mut grads, b, g.clone());
                    }
                    if self.rg(a) {
                        accumulate(&mut grads, a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(b) {
                        accumulate(&mut grads, b, g.map(|x| -x));
                    }
                    if self.rg(a) {
                        accumulate(&mut grads, a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        accumulate(
                            &mut grads,
                            a,
                            g.zip_map(&self.nodes[b].value, |x, y| x * y)?,
                        );
                    }
                    if self.rg(b) {
                        accumulate(
                            &mut grads,
                            b,
                            g.zip_map(&self.nodes[a].value, |x, y| x * y)?,
                        );
                    }
                }
                Op::Max(a, b) => {
                    let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                    if self.rg(a) {
                        let d = zip3(&g, va, vb, |gg, x, y| if x >= y { gg } else { 0.0 });
                        accumulate(&mut grads, a, d);
                    }
                    if self.rg(b) {
                        let d = zip3(&g, va, vb, |gg, x, y| if x >= y { 0.0 } else { gg });
                        accumulate(&mut grads, b, d);
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, a, g.map(|x| x * c)),
                Op::Offset(a) => accumulate(&mut grads, a, g),
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |gg, y| gg * (1.0 - y * y))?;
                    accumulate(&mut grads, a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |gg, y| gg * y * (1.0 - y))?;
                    accumulate(&mut grads, a, d);
                }
                Op::Softplus(a) => {
                    let d = g.zip_map(&self.nodes[a].value, |gg, x| gg * sigmoid(x))?;
                    accumulate(&mut grads, a, d);
                }
                Op::Exp(a) => {
                    let d = g.zip_map(&node.value, |gg, y| gg * y)?;
                    accumulate(&mut grads, a, d);
                }
                Op::Log(a) => {
                    let d = g.zip_map(&self.nodes[a].value, |gg, x| gg / x)?;
                    accumulate(&mut grads, a, d);
                }
                Op::Square(a) => {
                    let d = g.zip_map(&self.nodes[a].value, |gg, x| 2.0 * gg * x)?;
                    accumulate(&mut grads, a, d);
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    let shape = self.nodes[a].value.shape().to_vec();
                    accumulate(&mut grads, a, Tensor::full(&shape, s));
                }
                Op::Mean(a) => {
                    let src = &self.nodes[a].value;
                    let s = g.data()[0] / src.len().max(1) as f64;
                    accumulate(&mut grads, a, Tensor::full(src.shape(), s));
                }
                Op::SumCols(a) => {
                    let (r, c) = dims_of(&self.nodes[a].value);
                    let mut data = Vec::with_capacity(r * c);
                    for &gi in g.data() {
                        data.extend(std::iter::repeat_n(gi, c));
                    }
                    accumulate(
                        &mut grads,
                        a,
                        Tensor {
                            shape: vec![r, c],
                            data,
                        },
                    );
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = dims_of(&self.nodes[a].value);
                    let (_, w) = dims_of(&g);
                    let mut data = vec![0.0; r * c];
                    for i in 0..r {
                        data[i * c + start..i * c + start + w]
                            .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    accumulate(
                        &mut grads,
                        a,
                        Tensor {
                            shape: vec![r, c],
                            data,
                        },
                    );
                }
                Op::ConcatCols(a, b) => {
                    let (r, ca) = dims_of(&self.nodes[a].value);
                    let (_, cb) = dims_of(&self.nodes[b].value);
                    let w = ca + cb;
                    if self.rg(a) {
                        let mut data = Vec::with_capacity(r * ca);
                        for i in 0..r {
                            data.extend_from_slice(&g.data()[i * w..i * w + ca]);
                        }
                        accumulate(
                            &mut grads,
                            a,
                            Tensor {
                                shape: vec![r, ca],
                                data,
                            },
                        );
                    }
                    if self.rg(b) {
                        let mut data = Vec::with_capacity(r * cb);
                        for i in 0..r {
                            data.extend_from_slice(&g.data()[i * w + ca..(i + 1) * w]);
                        }
                        accumulate(
                            &mut grads,
                            b,
                            Tensor {
                                shape: vec![r, cb],
                                data,
                            },
                        );
                    }
                }
                Op::RepeatRows(a, k) => {
                    let (r, c) = dims_of(&self.nodes[a].value);
                    let mut data = vec![0.0; r * c];
                    for i in 0..r {
                        let dst = &mut data[i * c..(i + 1) * c];
                        for j in 0..k {
                            let row = i * k + j;
                            for (d, v) in dst.iter_mut().zip(&g.data()[row * c..(row + 1) * c]) {
                                *d += v;
                            }
                        }
                    }
                    accumulate(
                        &mut grads,
                        a,
                        Tensor {
                            shape: vec![r, c],
                            data,
                        },
                    );
                }
            }
        }

        let mut shapes: Vec<(usize, usize)> =
            self.nodes.iter().map(|n| dims_of(&n.value)).collect();
        shapes.truncate(self.nodes.len());
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }
}

fn dims_of(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn zip3(g: &Tensor, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(a.data())
        .zip(b.data())
        .map(|((&gg, &x), &y)| f(gg, x, y))
        .collect();
    Tensor {
        shape: g.shape().to_vec(),
        data,
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Evaluates `loss_fn` on fresh parameter leaves and returns the loss value
/// together with one gradient per parameter, in order and in the
/// parameters' original shapes.
pub fn grad<F>(params: &[Tensor], loss_fn: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    let value = g.scalar(loss);
    let mut grads = g.backward(loss)?;
    let out = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take(v).reshape(p.shape().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((value, out))
}
