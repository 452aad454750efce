//! Define-by-run computation tape with graph-building reverse mode.
//!
//! Every primitive computes its value eagerly and is appended to the tape.
//! [`Tape::grad`] walks the tape backwards and records the adjoint
//! computation as ordinary tape nodes, so a gradient is itself a
//! differentiable expression and can be differentiated again.

use std::collections::BTreeMap;

use super::array::{
    broadcast_shape, broadcast_to, gemm, sum_to, transpose_last2, zip_broadcast, Array,
};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    Detach(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var, f64),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    Step(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    RecipOrZero(Var),
    Sum(Var),
    Mean(Var),
    NormLast(Var),
    BroadcastTo(Var, Vec<usize>),
    SumTo(Var, Vec<usize>),
    Reshape(Var, Vec<usize>),
    SliceLast { x: Var, start: usize, len: usize },
    PadLast { x: Var, start: usize, total: usize },
    ConcatLast(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::Detach(_) => "detach",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Relu(_) => "relu",
            Op::Step(_) => "step",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::RecipOrZero(_) => "recip",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::NormLast(_) => "norm",
            Op::BroadcastTo(..) => "broadcast",
            Op::SumTo(..) => "sum_to",
            Op::Reshape(..) => "reshape",
            Op::SliceLast { .. } => "slice",
            Op::PadLast { .. } => "pad",
            Op::ConcatLast(_) => "concat",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Detach(x)
            | Op::Neg(x)
            | Op::Scale(x, _)
            | Op::Offset(x, _)
            | Op::Transpose(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::Relu(x)
            | Op::Step(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sqrt(x)
            | Op::Square(x)
            | Op::RecipOrZero(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::NormLast(x)
            | Op::BroadcastTo(x, _)
            | Op::SumTo(x, _)
            | Op::Reshape(x, _)
            | Op::SliceLast { x, .. }
            | Op::PadLast { x, .. } => vec![*x],
            Op::ConcatLast(xs) => xs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Array,
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

/// A computation tape. Confined to one thread; build one per task.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Looks up a parameter registered with [`Tape::param`].
    pub fn param_var(&self, name: &str) -> Result<Var> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnboundParameter(name.to_string()))
    }

    /// Registers a named differentiable input.
    pub fn param(&mut self, name: &str, value: Array) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "parameter `{name}` bound twice"
            )));
        }
        let v = self.push(Op::Param, value)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(Array::scalar(x))
    }

    fn push(&mut self, op: Op, value: Array) -> Result<Var> {
        let id = self.nodes.len();
        if value.has_nan() {
            return Err(Error::NaN {
                node: id,
                op: op.name(),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(id))
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    // ---- primitives -------------------------------------------------------

    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(Op::Detach(x), value)
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(sa, sb)
            .ok_or_else(|| self.shape_err(op.name(), format!("{sa:?} vs {sb:?}")))?;
        let value = zip_broadcast(self.value(a), self.value(b), &out, f);
        self.push(op, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div(a, b), a, b, |x, y| x / y)
    }

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(op, value)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Neg(x), x, |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Op::Scale(x, c), x, |v| c * v)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Op::Offset(x, c), x, |v| v + c)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Tanh(x), x, f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sigmoid(x), x, sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Softplus(x), x, softplus)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Relu(x), x, |v| v.max(0.0))
    }

    /// Heaviside step, the (piecewise constant) derivative of relu.
    pub fn step(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Step(x), x, |v| if v > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Exp(x), x, f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Log(x), x, f64::ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sqrt(x), x, f64::sqrt)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Square(x), x, |v| v * v)
    }

    /// `1/x`, defined as 0 at `x == 0`.
    pub fn recip_or_zero(&mut self, x: Var) -> Result<Var> {
        self.unary(
            Op::RecipOrZero(x),
            x,
            |v| if v == 0.0 { 0.0 } else { 1.0 / v },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Array::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let a = self.value(x);
        let m = a.data().iter().sum::<f64>() / a.len() as f64;
        self.push(Op::Mean(x), Array::scalar(m))
    }

    /// Euclidean norm over the last axis; the last axis becomes size 1.
    pub fn norm_last(&mut self, x: Var) -> Result<Var> {
        let a = self.value(x);
        let k = *a
            .shape()
            .last()
            .ok_or_else(|| self.shape_err("norm", "rank 0".into()))?;
        let data: Vec<f64> = a
            .data()
            .chunks(k.max(1))
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        self.push(Op::NormLast(x), Array::from_parts(shape, data))
    }

    /// Sum over the last axis, keeping it as size 1.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        if let Some(last) = shape.last_mut() {
            *last = 1;
        }
        self.sum_to(x, &shape)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        if sx == shape {
            return Ok(x);
        }
        if broadcast_shape(sx, shape).as_deref() != Some(shape) {
            return Err(self.shape_err("broadcast", format!("{sx:?} to {shape:?}")));
        }
        let value = broadcast_to(self.value(x), shape);
        self.push(Op::BroadcastTo(x, shape.to_vec()), value)
    }

    pub fn sum_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        if sx == shape {
            return Ok(x);
        }
        if broadcast_shape(shape, sx).as_deref() != Some(sx) {
            return Err(self.shape_err("sum_to", format!("{sx:?} to {shape:?}")));
        }
        let value = sum_to(self.value(x), shape);
        self.push(Op::SumTo(x, shape.to_vec()), value)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let value = self
            .value(x)
            .clone()
            .reshaped(shape.to_vec())
            .map_err(|e| self.shape_err("reshape", e.to_string()))?;
        self.push(Op::Reshape(x, shape.to_vec()), value)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() < 2 {
            return Err(self.shape_err("transpose", "rank < 2".into()));
        }
        let value = transpose_last2(self.value(x));
        self.push(Op::Transpose(x), value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes the last two axes when the
    /// flag is set. Rank-2 by rank-2, or rank-3 by rank-3 with equal
    /// leading (batch) size.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let value = self.matmul_value(a, b, ta, tb)?;
        self.push(Op::MatMul { a, b, ta, tb }, value)
    }

    fn matmul_value(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Array> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = || self.shape_err("matmul", format!("{sa:?} x {sb:?} (ta={ta}, tb={tb})"));
        if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
            return Err(bad());
        }
        let r = sa.len();
        let batch = if r == 3 {
            if sa[0] != sb[0] {
                return Err(bad());
            }
            sa[0]
        } else {
            1
        };
        let (m, ka) = if ta {
            (sa[r - 1], sa[r - 2])
        } else {
            (sa[r - 2], sa[r - 1])
        };
        let (kb, n) = if tb {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if ka != kb {
            return Err(bad());
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                ka,
                n,
                &da[i * m * ka..(i + 1) * m * ka],
                ta,
                &db[i * ka * n..(i + 1) * ka * n],
                tb,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let shape = if r == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        Ok(Array::from_parts(shape, out))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let a = self.value(x);
        let k = *a.shape().last().unwrap_or(&1);
        if start + len > k {
            return Err(self.shape_err("slice", format!("{start}+{len} > {k}")));
        }
        let data: Vec<f64> = a
            .data()
            .chunks(k)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.push(
            Op::SliceLast { x, start, len },
            Array::from_parts(shape, data),
        )
    }

    /// Embeds `x` at `start` inside a zero-filled last axis of size `total`.
    pub fn pad_last(&mut self, x: Var, start: usize, total: usize) -> Result<Var> {
        let a = self.value(x);
        let k = *a.shape().last().unwrap_or(&1);
        if start + k > total {
            return Err(self.shape_err("pad", format!("{start}+{k} > {total}")));
        }
        let rows = a.len() / k.max(1);
        let mut data = vec![0.0; rows * total];
        for (r, row) in a.data().chunks(k.max(1)).enumerate() {
            data[r * total + start..r * total + start + k].copy_from_slice(row);
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = total;
        self.push(
            Op::PadLast { x, start, total },
            Array::from_parts(shape, data),
        )
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let value = self.concat_value(xs)?;
        self.push(Op::ConcatLast(xs.to_vec()), value)
    }

    fn concat_value(&self, xs: &[Var]) -> Result<Array> {
        let first = xs
            .first()
            .ok_or_else(|| self.shape_err("concat", "no inputs".into()))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(self.shape_err("concat", format!("{s:?} vs leading {lead:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(Array::from_parts(shape, data))
    }

    // ---- replay -----------------------------------------------------------

    fn recompute(&self, op: &Op, old: &Array) -> Result<Array> {
        let v = |x: &Var| self.value(*x);
        let un = |x: &Var, f: &dyn Fn(f64) -> f64| v(x).map(f);
        let bin = |a: &Var, b: &Var, f: &dyn Fn(f64, f64) -> f64| {
            zip_broadcast(v(a), v(b), old.shape(), f)
        };
        Ok(match op {
            Op::Constant | Op::Param => old.clone(),
            Op::Detach(x) => v(x).clone(),
            Op::Add(a, b) => bin(a, b, &|x, y| x + y),
            Op::Sub(a, b) => bin(a, b, &|x, y| x - y),
            Op::Mul(a, b) => bin(a, b, &|x, y| x * y),
            Op::Div(a, b) => bin(a, b, &|x, y| x / y),
            Op::Neg(x) => un(x, &|t| -t),
            Op::Scale(x, c) => un(x, &|t| c * t),
            Op::Offset(x, c) => un(x, &|t| t + c),
            Op::MatMul { a, b, ta, tb } => self.matmul_value(*a, *b, *ta, *tb)?,
            Op::Transpose(x) => transpose_last2(v(x)),
            Op::Tanh(x) => un(x, &f64::tanh),
            Op::Sigmoid(x) => un(x, &sigmoid),
            Op::Softplus(x) => un(x, &softplus),
            Op::Relu(x) => un(x, &|t| t.max(0.0)),
            Op::Step(x) => un(x, &|t| if t > 0.0 { 1.0 } else { 0.0 }),
            Op::Exp(x) => un(x, &f64::exp),
            Op::Log(x) => un(x, &f64::ln),
            Op::Sqrt(x) => un(x, &f64::sqrt),
            Op::Square(x) => un(x, &|t| t * t),
            Op::RecipOrZero(x) => un(x, &|t| if t == 0.0 { 0.0 } else { 1.0 / t }),
            Op::Sum(x) => Array::scalar(v(x).data().iter().sum()),
            Op::Mean(x) => Array::scalar(v(x).data().iter().sum::<f64>() / v(x).len() as f64),
            Op::NormLast(x) => {
                let k = *v(x).shape().last().unwrap();
                let data = v(x)
                    .data()
                    .chunks(k.max(1))
                    .map(|row| row.iter().map(|t| t * t).sum::<f64>().sqrt())
                    .collect();
                Array::from_parts(old.shape().to_vec(), data)
            }
            Op::BroadcastTo(x, s) => broadcast_to(v(x), s),
            Op::SumTo(x, s) => sum_to(v(x), s),
            Op::Reshape(x, s) => v(x).clone().reshaped(s.clone())?,
            Op::SliceLast { x, start, len } => {
                let k = *v(x).shape().last().unwrap();
                let data = v(x)
                    .data()
                    .chunks(k)
                    .flat_map(|row| row[*start..start + len].iter().copied())
                    .collect();
                Array::from_parts(old.shape().to_vec(), data)
            }
            Op::PadLast { x, start, total } => {
                let k = *v(x).shape().last().unwrap();
                let mut data = vec![0.0; old.len()];
                for (r, row) in v(x).data().chunks(k.max(1)).enumerate() {
                    data[r * total + start..r * total + start + k].copy_from_slice(row);
                }
                Array::from_parts(old.shape().to_vec(), data)
            }
            Op::ConcatLast(xs) => self.concat_value(xs)?,
        })
    }

    /// Re-executes every node with new parameter bindings and returns the
    /// value of `output`. Parameters not in `bindings` keep their values.
    /// Shapes are fixed when the tape is built.
    pub fn evaluate(&mut self, output: Var, bindings: &BTreeMap<String, Array>) -> Result<Array> {
        for (name, value) in bindings {
            let v = self.param_var(name)?;
            if self.shape(v) != value.shape() {
                return Err(Error::Shape {
                    node: v.0,
                    op: "param",
                    detail: format!("bound {:?}, tape has {:?}", value.shape(), self.shape(v)),
                });
            }
            self.nodes[v.0].value = value.clone();
        }
        for i in 0..self.nodes.len() {
            let value = self.recompute(&self.nodes[i].op, &self.nodes[i].value)?;
            if value.has_nan() {
                return Err(Error::NaN {
                    node: i,
                    op: self.nodes[i].op.name(),
                });
            }
            self.nodes[i].value = value;
        }
        Ok(self.value(output).clone())
    }

    // ---- reverse mode -----------------------------------------------------

    /// Gradients of the scalar `output` with respect to `wrt`, recorded as
    /// new tape nodes (so they can be differentiated again).
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.value(output).len() != 1 {
            return Err(Error::NonScalarOutput {
                node: output.0,
                shape: self.shape(output).to_vec(),
            });
        }
        let end = output.0 + 1;
        let mut needs = vec![false; end];
        for w in wrt {
            if w.0 < end {
                needs[w.0] = true;
            }
        }
        for i in 0..end {
            if needs[i] {
                continue;
            }
            needs[i] = match &self.nodes[i].op {
                Op::Detach(_) | Op::Constant | Op::Param => false,
                op => op.inputs().iter().any(|x| needs[x.0]),
            };
        }

        let mut adj: Vec<Option<Var>> = vec![None; end];
        let seed = Array::full(self.shape(output), 1.0);
        adj[output.0] = Some(self.constant(seed));
        for i in (0..end).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            for (input, contrib) in self.vjp(Var(i), &op, g, &needs)? {
                adj[input.0] = Some(match adj[input.0] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let z = Array::zeros(self.shape(*w));
                    self.constant(z)
                }
            })
            .collect())
    }

    fn vjp(&mut self, y: Var, op: &Op, g: Var, needs: &[bool]) -> Result<Vec<(Var, Var)>> {
        let need = |x: &Var| needs[x.0];
        let mut out = Vec::new();
        match op {
            Op::Constant | Op::Param | Op::Detach(_) | Op::Step(_) => {}
            Op::Add(a, b) => {
                if need(a) {
                    let s = self.shape(*a).to_vec();
                    out.push((*a, self.sum_to(g, &s)?));
                }
                if need(b) {
                    let s = self.shape(*b).to_vec();
                    out.push((*b, self.sum_to(g, &s)?));
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    let s = self.shape(*a).to_vec();
                    out.push((*a, self.sum_to(g, &s)?));
                }
                if need(b) {
                    let s = self.shape(*b).to_vec();
                    let n = self.neg(g)?;
                    out.push((*b, self.sum_to(n, &s)?));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    let s = self.shape(*a).to_vec();
                    let t = self.mul(g, *b)?;
                    out.push((*a, self.sum_to(t, &s)?));
                }
                if need(b) {
                    let s = self.shape(*b).to_vec();
                    let t = self.mul(g, *a)?;
                    out.push((*b, self.sum_to(t, &s)?));
                }
            }
            Op::Div(a, b) => {
                if need(a) {
                    let s = self.shape(*a).to_vec();
                    let t = self.div(g, *b)?;
                    out.push((*a, self.sum_to(t, &s)?));
                }
                if need(b) {
                    let s = self.shape(*b).to_vec();
                    let gy = self.mul(g, y)?;
                    let t = self.div(gy, *b)?;
                    let t = self.neg(t)?;
                    out.push((*b, self.sum_to(t, &s)?));
                }
            }
            Op::Neg(x) => out.push((*x, self.neg(g)?)),
            Op::Scale(x, c) => out.push((*x, self.scale(g, *c)?)),
            Op::Offset(x, _) => out.push((*x, g)),
            Op::MatMul { a, b, ta, tb } => {
                if need(a) {
                    let ga = if *ta {
                        self.matmul_t(*b, g, *tb, true)?
                    } else {
                        self.matmul_t(g, *b, false, !tb)?
                    };
                    out.push((*a, ga));
                }
                if need(b) {
                    let gb = if *tb {
                        self.matmul_t(g, *a, true, *ta)?
                    } else {
                        self.matmul_t(*a, g, !ta, false)?
                    };
                    out.push((*b, gb));
                }
            }
            Op::Transpose(x) => out.push((*x, self.transpose(g)?)),
            Op::Tanh(x) => {
                let sq = self.square(y)?;
                let d = self.scale(sq, -1.0)?;
                let d = self.offset(d, 1.0)?;
                out.push((*x, self.mul(g, d)?));
            }
            Op::Sigmoid(x) => {
                let one_minus = self.scale(y, -1.0)?;
                let one_minus = self.offset(one_minus, 1.0)?;
                let d = self.mul(y, one_minus)?;
                out.push((*x, self.mul(g, d)?));
            }
            Op::Softplus(x) => {
                let s = self.sigmoid(*x)?;
                out.push((*x, self.mul(g, s)?));
            }
            Op::Relu(x) => {
                let s = self.step(*x)?;
                out.push((*x, self.mul(g, s)?));
            }
            Op::Exp(x) => out.push((*x, self.mul(g, y)?)),
            Op::Log(x) => out.push((*x, self.div(g, *x)?)),
            Op::Sqrt(x) => {
                let h = self.scale(g, 0.5)?;
                out.push((*x, self.div(h, y)?));
            }
            Op::Square(x) => {
                let two_x = self.scale(*x, 2.0)?;
                out.push((*x, self.mul(g, two_x)?));
            }
            Op::RecipOrZero(x) => {
                let sq = self.square(y)?;
                let d = self.scale(sq, -1.0)?;
                out.push((*x, self.mul(g, d)?));
            }
            Op::Sum(x) => {
                let s = self.shape(*x).to_vec();
                let gs = self.reshape(g, &[])?;
                out.push((*x, self.broadcast_to(gs, &s)?));
            }
            Op::Mean(x) => {
                let s = self.shape(*x).to_vec();
                let n = self.value(*x).len() as f64;
                let gs = self.reshape(g, &[])?;
                let gs = self.scale(gs, 1.0 / n)?;
                out.push((*x, self.broadcast_to(gs, &s)?));
            }
            Op::NormLast(x) => {
                // d‖x‖/dx = x/‖x‖, with the zero subgradient at ‖x‖ = 0.
                let s = self.shape(*x).to_vec();
                let inv = self.recip_or_zero(y)?;
                let w = self.mul(g, inv)?;
                let w = self.broadcast_to(w, &s)?;
                out.push((*x, self.mul(w, *x)?));
            }
            Op::BroadcastTo(x, _) => {
                let s = self.shape(*x).to_vec();
                out.push((*x, self.sum_to(g, &s)?));
            }
            Op::SumTo(x, _) => {
                let s = self.shape(*x).to_vec();
                out.push((*x, self.broadcast_to(g, &s)?));
            }
            Op::Reshape(x, _) => {
                let s = self.shape(*x).to_vec();
                out.push((*x, self.reshape(g, &s)?));
            }
            Op::SliceLast { x, start, .. } => {
                let total = *self.shape(*x).last().unwrap();
                out.push((*x, self.pad_last(g, *start, total)?));
            }
            Op::PadLast { x, start, .. } => {
                let len = *self.shape(*x).last().unwrap();
                out.push((*x, self.slice_last(g, *start, len)?));
            }
            Op::ConcatLast(xs) => {
                let mut start = 0;
                for x in xs {
                    let len = *self.shape(*x).last().unwrap();
                    if need(x) {
                        out.push((*x, self.slice_last(g, start, len)?));
                    }
                    start += len;
                }
            }
        }
        Ok(out)
    }

    // ---- name-based API ---------------------------------------------------

    /// Gradients of scalar `output` keyed by parameter name.
    pub fn gradient(&mut self, output: Var, wrt: &[&str]) -> Result<BTreeMap<String, Array>> {
        let vars = wrt
            .iter()
            .map(|n| self.param_var(n))
            .collect::<Result<Vec<_>>>()?;
        let grads = self.grad(output, &vars)?;
        Ok(wrt
            .iter()
            .zip(grads)
            .map(|(n, g)| (n.to_string(), self.value(g).clone()))
            .collect())
    }

    /// Records the gradient-penalty term `mean_rows (‖∇_inner output‖₂ − 1)²`
    /// on the tape and returns it. Rows are the leading entries of the inner
    /// input; the norm runs over its last axis.
    pub fn gradient_norm_penalty(&mut self, output: Var, inner: Var) -> Result<Var> {
        let g = self.grad(output, &[inner])?[0];
        let n = self.norm_last(g)?;
        let d = self.offset(n, -1.0)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Gradient of the penalty `mean_rows (‖∇_inner output‖₂ − 1)²` with
    /// respect to the `outer` parameters.
    pub fn gradient_of_gradient_norm(
        &mut self,
        output: Var,
        inner: &str,
        outer: &[&str],
    ) -> Result<BTreeMap<String, Array>> {
        let inner = self.param_var(inner)?;
        let penalty = self.gradient_norm_penalty(output, inner)?;
        self.gradient(penalty, outer)
    }
}
