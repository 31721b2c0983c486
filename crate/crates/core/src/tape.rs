//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! Every operation appends a node holding its forward value and the indices
//! of its inputs. [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients; parameter leaves are keyed by their store name so
//! the optimizer can consume them directly.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{self, axis_extents, broadcast_map, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `scale * x + shift`
    Affine(Var, f64),
    Sigmoid(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Softmax(Var, usize),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Sum(Var, usize),
    SumAll(Var),
    GatherRows(Var, Vec<usize>),
    GatherFlat(Var, Vec<usize>),
    ScatterRows {
        src: Var,
        index: Vec<usize>,
        weight: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Affine(..) => "affine",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Abs(_) => "abs",
            Op::Clamp(..) => "clamp",
            Op::Softmax(..) => "softmax",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Sum(..) => "reduce_sum",
            Op::SumAll(_) => "sum_all",
            Op::GatherRows(..) => "gather_rows",
            Op::GatherFlat(..) => "gather_flat",
            Op::ScatterRows { .. } => "scatter_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of a parameter that participated in the forward pass.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    /// Gradients for every entry of `store`; parameters that did not take
    /// part in the forward pass get zeros of their own shape.
    pub fn dense(&self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        store
            .iter()
            .map(|(name, value)| {
                let g = self
                    .params
                    .get(name)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(value.shape()));
                (name.to_string(), g)
            })
            .collect()
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that never receives a named gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers `store[name]` as a trainable leaf; repeated calls return the
    /// same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.constant(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Cuts the gradient path: a constant holding `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::zip_broadcast("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::zip_broadcast("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b))
    }

    /// Element-wise product (same-rank broadcasting).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::zip_broadcast("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::zip_broadcast("div", self.value(a), self.value(b), |x, y| x / y)?;
        self.push(out, Op::Div(a, b))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().map(|v| scale * v + shift).collect(),
        );
        self.push(out, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Result<Var> {
        self.affine(a, scale, 0.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect());
        self.push(out, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, tensor::sigmoid_scalar, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// Square root; the backward pass assigns gradient 0 at exactly 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Clamps into `[lo, hi]`; gradient passes only inside the closed interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, |v| v.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = tensor::softmax(self.value(a), axis)?;
        self.push(out, Op::Softmax(a, axis))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = tensor::concat(&values, axis)?;
        self.push(out, Op::Concat(parts.to_vec(), axis))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = tensor::slice(self.value(a), axis, start, len)?;
        self.push(out, Op::Slice(a, axis, start))
    }

    /// Sums along `axis`, keeping it with extent 1.
    pub fn reduce_sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = tensor::reduce_sum(self.value(a), axis)?;
        self.push(out, Op::Sum(a, axis))
    }

    /// Sum of all entries as a `1 × 1` tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::from_parts(vec![1, 1], vec![total]), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Row lookup `table[ids]`; ids may repeat.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if ids.is_empty() || ids.iter().any(|&i| i >= t.rows()) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: ids.to_vec(),
            });
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(t.row_slice(i));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = ids.len();
        let out = Tensor::from_parts(shape, data);
        self.push(out, Op::GatherRows(table, ids.to_vec()))
    }

    /// Picks flat entries of `a` into an `n × 1` column.
    pub fn gather_flat(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if idx.is_empty() || idx.iter().any(|&i| i >= t.numel()) {
            return Err(Error::Shape {
                op: "gather_flat",
                lhs: t.shape().to_vec(),
                rhs: idx.to_vec(),
            });
        }
        let out = Tensor::from_parts(vec![idx.len(), 1], idx.iter().map(|&i| t.get(i)).collect());
        self.push(out, Op::GatherFlat(a, idx.to_vec()))
    }

    /// `out[index[i]] += weight[i] * src[i]` into a zero `out_rows × cols` matrix.
    pub fn scatter_rows(
        &mut self,
        src: Var,
        index: &[usize],
        weight: &[f64],
        out_rows: usize,
    ) -> Result<Var> {
        let s = self.value(src);
        if s.shape().len() != 2
            || index.len() != s.rows()
            || weight.len() != s.rows()
            || index.iter().any(|&i| i >= out_rows)
        {
            return Err(Error::Shape {
                op: "scatter_rows",
                lhs: s.shape().to_vec(),
                rhs: vec![index.len(), out_rows],
            });
        }
        let cols = s.cols();
        let mut data = vec![0.0; out_rows * cols];
        for (r, (&dst, &w)) in index.iter().zip(weight).enumerate() {
            for (o, v) in data[dst * cols..(dst + 1) * cols].iter_mut().zip(s.row_slice(r)) {
                *o += w * v;
            }
        }
        let out = Tensor::from_parts(vec![out_rows, cols], data);
        self.push(
            out,
            Op::ScatterRows {
                src,
                index: index.to_vec(),
                weight: weight.to_vec(),
            },
        )
    }

    /// Back-propagates from a one-element `loss`. Only nodes with a path
    /// from a parameter receive gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.value(loss).shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut needs = vec![false; loss.0 + 1];
        for &v in self.params.values() {
            if v.0 <= loss.0 {
                needs[v.0] = true;
            }
        }
        for i in 0..=loss.0 {
            if !needs[i] {
                needs[i] = inputs(&self.nodes[i].op).iter().any(|v| needs[v.0]);
            }
        }
        let mut grads = GradBuf {
            slots: vec![None; loss.0 + 1],
            needs,
        };
        if grads.needs[loss.0] {
            grads.slots[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads.slots[idx].take() else {
                continue;
            };
            self.propagate(&self.nodes[idx], &g, &mut grads);
            grads.slots[idx] = Some(g);
        }

        let params = self
            .params
            .iter()
            .filter_map(|(name, &v)| {
                let g = grads.slots.get_mut(v.0)?.take()?;
                Some((name.clone(), Tensor::from_parts(self.shape(v).to_vec(), g)))
            })
            .collect();
        Ok(Gradients { params })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut GradBuf) {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if grads.wants(*a) {
                    grads.add_owned(*a, tensor::matmul_a_bt(g, val(*b).data(), m, n, k));
                }
                if grads.wants(*b) {
                    grads.add_owned(*b, tensor::matmul_at_b(val(*a).data(), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).rows(), val(*a).cols());
                if grads.wants(*a) {
                    grads.add_owned(*a, tensor::transpose_raw(g, n, m));
                }
            }
            Op::Add(a, b) => {
                reduce_into(grads, *a, val(*a).shape(), out.shape(), g, |gi, _| gi);
                reduce_into(grads, *b, val(*b).shape(), out.shape(), g, |gi, _| gi);
            }
            Op::Sub(a, b) => {
                reduce_into(grads, *a, val(*a).shape(), out.shape(), g, |gi, _| gi);
                reduce_into(grads, *b, val(*b).shape(), out.shape(), g, |gi, _| -gi);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ia = source_index(av.shape(), out.shape());
                let ib = source_index(bv.shape(), out.shape());
                reduce_into(grads, *a, av.shape(), out.shape(), g, |gi, i| {
                    gi * bv.data()[ib(i)]
                });
                reduce_into(grads, *b, bv.shape(), out.shape(), g, |gi, i| {
                    gi * av.data()[ia(i)]
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ia = source_index(av.shape(), out.shape());
                let ib = source_index(bv.shape(), out.shape());
                reduce_into(grads, *a, av.shape(), out.shape(), g, |gi, i| {
                    gi / bv.data()[ib(i)]
                });
                reduce_into(grads, *b, bv.shape(), out.shape(), g, |gi, i| {
                    let d = bv.data()[ib(i)];
                    -gi * av.data()[ia(i)] / (d * d)
                });
            }
            Op::Affine(a, scale) => {
                grads.add_map(*a, g, |_, gi| gi * scale);
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                grads.add_map(*a, g, |i, gi| gi * y[i] * (1.0 - y[i]));
            }
            Op::Log(a) => {
                let x = val(*a).data();
                grads.add_map(*a, g, |i, gi| gi / x[i]);
            }
            Op::Sqrt(a) => {
                let y = out.data();
                grads.add_map(*a, g, |i, gi| if y[i] == 0.0 { 0.0 } else { gi / (2.0 * y[i]) });
            }
            Op::Abs(a) => {
                let x = val(*a).data();
                grads.add_map(*a, g, |i, gi| if x[i] == 0.0 { 0.0 } else { gi * x[i].signum() });
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a).data();
                grads.add_map(*a, g, |i, gi| if x[i] >= *lo && x[i] <= *hi { gi } else { 0.0 });
            }
            Op::Softmax(a, axis) => {
                if !grads.wants(*a) {
                    return;
                }
                let (outer, len, inner) = axis_extents(out.shape(), *axis);
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let dot: f64 = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..len {
                            d[at(i)] = y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
                grads.add_owned(*a, d);
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_extents(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if let Some(d) = grads.slot(p, val(p).numel()) {
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            let src = &g[base..base + len * inner];
                            let dst = &mut d[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(x, gi)| *x += gi);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice(a, axis, start) => {
                let (outer, full, inner) = axis_extents(val(*a).shape(), *axis);
                let len = out.shape()[*axis];
                if let Some(d) = grads.slot(*a, val(*a).numel()) {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        d[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, gi)| *x += gi);
                    }
                }
            }
            Op::Sum(a, axis) => {
                let (outer, len, inner) = axis_extents(val(*a).shape(), *axis);
                if let Some(d) = grads.slot(*a, val(*a).numel()) {
                    for o in 0..outer {
                        for i in 0..len {
                            let base = (o * len + i) * inner;
                            let src = &g[o * inner..(o + 1) * inner];
                            d[base..base + inner].iter_mut().zip(src).for_each(|(x, gi)| *x += gi);
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(d) = grads.slot(*a, val(*a).numel()) {
                    d.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::GatherRows(table, ids) => {
                let t = val(*table);
                let cols = t.cols();
                if let Some(d) = grads.slot(*table, t.numel()) {
                    for (r, &i) in ids.iter().enumerate() {
                        d[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(x, gi)| *x += gi);
                    }
                }
            }
            Op::GatherFlat(a, idx) => {
                if let Some(d) = grads.slot(*a, val(*a).numel()) {
                    for (gi, &i) in g.iter().zip(idx) {
                        d[i] += gi;
                    }
                }
            }
            Op::ScatterRows { src, index, weight } => {
                let cols = out.cols();
                if let Some(d) = grads.slot(*src, val(*src).numel()) {
                    for (r, (&dst, &w)) in index.iter().zip(weight).enumerate() {
                        d[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(&g[dst * cols..(dst + 1) * cols])
                            .for_each(|(x, gi)| *x += gi * w);
                    }
                }
            }
        }
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
        Op::Transpose(a)
        | Op::Affine(a, _)
        | Op::Sigmoid(a)
        | Op::Log(a)
        | Op::Sqrt(a)
        | Op::Abs(a)
        | Op::Clamp(a, ..)
        | Op::Softmax(a, _)
        | Op::Slice(a, ..)
        | Op::Sum(a, _)
        | Op::SumAll(a)
        | Op::GatherRows(a, _)
        | Op::GatherFlat(a, _) => vec![*a],
        Op::Concat(parts, _) => parts.clone(),
        Op::ScatterRows { src, .. } => vec![*src],
    }
}

/// Gradient accumulators, allocated lazily and only for nodes that lead
/// back to a parameter.
struct GradBuf {
    slots: Vec<Option<Vec<f64>>>,
    needs: Vec<bool>,
}

impl GradBuf {
    fn wants(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// The accumulator for `v`, zero-initialised on first use.
    fn slot(&mut self, v: Var, numel: usize) -> Option<&mut [f64]> {
        if !self.needs[v.0] {
            return None;
        }
        Some(self.slots[v.0].get_or_insert_with(|| vec![0.0; numel]))
    }

    fn add_owned(&mut self, v: Var, d: Vec<f64>) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.slots[v.0] {
            Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, x)| *a += x),
            slot @ None => *slot = Some(d),
        }
    }

    fn add_map(&mut self, v: Var, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.slots[v.0] {
            Some(acc) => acc.iter_mut().zip(g).enumerate().for_each(|(i, (a, &gi))| *a += f(i, gi)),
            slot @ None => *slot = Some(g.iter().enumerate().map(|(i, &gi)| f(i, gi)).collect()),
        }
    }
}

/// Maps an output index to the index of a broadcast operand.
fn source_index(src: &[usize], out: &[usize]) -> impl Fn(usize) -> usize {
    let map = (src != out).then(|| broadcast_map(src, out));
    move |i| map.as_ref().map_or(i, |m| m[i])
}

/// Accumulates `f(g[i], i)` into the (possibly broadcast) source of shape `src`.
fn reduce_into(
    grads: &mut GradBuf,
    v: Var,
    src: &[usize],
    out: &[usize],
    g: &[f64],
    f: impl Fn(f64, usize) -> f64,
) {
    if !grads.wants(v) {
        return;
    }
    if src == out {
        grads.add_map(v, g, |i, gi| f(gi, i));
        return;
    }
    let map = broadcast_map(src, out);
    let d = grads.slot(v, src.iter().product()).expect("checked above");
    for (i, &gi) in g.iter().enumerate() {
        d[map[i]] += f(gi, i);
    }
}
