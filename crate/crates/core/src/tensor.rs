//! Dense row-major `f64` tensors and the forward kernels shared by the tape.
//!
//! Every tensor holds finite values only. Kernels here are plain functions
//! over [`Tensor`]; [`crate::tape::Tape`] records them for differentiation.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting zero-sized axes, length mismatches and
    /// non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} must have positive extents"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::InvalidTensor(format!("non-finite entry {bad}")));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernel outputs; finiteness is checked by the
    /// tape in debug builds.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![1, 1], vec![value])
    }

    /// A `1 × n` row vector.
    pub fn row(values: &[f64]) -> Result<Self> {
        Tensor::new(vec![1, values.len()], values.to_vec())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidTensor("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of every axis after the first.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, idx: usize) -> f64 {
        self.data[idx]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::InvalidTensor(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Applies `f` entrywise, keeping the shape.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Overwrites one entry; used by optimizers and finite-difference probes.
    pub fn set(&mut self, idx: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::InvalidTensor(format!("non-finite entry {value}")));
        }
        self.data[idx] = value;
        Ok(())
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![axis],
        });
    }
    Ok(())
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g (m×n) · bᵀ` where `b` is `k × n`.
pub(crate) fn matmul_a_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` where `a` is `m × k` and `g` is `m × n`.
pub(crate) fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            out[p * n..(p + 1) * n]
                .iter_mut()
                .zip(g_row)
                .for_each(|(o, gi)| *o += av * gi);
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.require_matrix("matmul")?;
    let (k2, n) = b.require_matrix("matmul")?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(Tensor::from_parts(
        vec![m, n],
        matmul_raw(&a.data, &b.data, m, k, n),
    ))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.require_matrix("transpose")?;
    Ok(Tensor::from_parts(vec![n, m], transpose_raw(&a.data, m, n)))
}

/// Softmax along `axis`, stabilised by subtracting the per-slice maximum.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax", &x.shape, axis)?;
    let (outer, len, inner) = axis_extents(&x.shape, axis);
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * len + i) * inner + j;
            let max = (0..len).map(|i| x.data[at(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in 0..len {
                let e = (x.data[at(i)] - max).exp();
                out[at(i)] = e;
                total += e;
            }
            for i in 0..len {
                out[at(i)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape.clone(),
        x.data.iter().map(|&v| sigmoid_scalar(v)).collect(),
    )
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Output shape of a same-rank broadcast between `a` and `b`.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let err = || Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() != b.len() {
        return Err(err());
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(err()),
        })
        .collect()
}

/// For each flat index of `out`, the flat index of the broadcast source.
pub(crate) fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if src == out {
        return (0..n).collect();
    }
    let rank = out.len();
    let mut src_strides = vec![0usize; rank];
    let mut stride = 1;
    for d in (0..rank).rev() {
        src_strides[d] = if src[d] == 1 { 0 } else { stride };
        stride *= src[d];
    }
    let mut map = Vec::with_capacity(n);
    if rank == 2 {
        for i in 0..out[0] {
            let row = i * src_strides[0];
            map.extend((0..out[1]).map(|j| row + j * src_strides[1]));
        }
        return map;
    }
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

pub(crate) fn zip_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let shape = broadcast_shape(op, &a.shape, &b.shape)?;
    let data = if a.shape == b.shape {
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let ma = broadcast_map(&a.shape, &shape);
        let mb = broadcast_map(&b.shape, &shape);
        ma.iter()
            .zip(&mb)
            .map(|(&i, &j)| f(a.data[i], b.data[j]))
            .collect()
    };
    Ok(Tensor::from_parts(shape, data))
}

/// Element-wise (Hadamard) product with same-rank broadcasting.
pub fn elementwise_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast("mul", a, b, |x, y| x * y)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast("add", a, b, |x, y| x + y)
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidTensor("concat of zero tensors".into()))?;
    check_axis("concat", &first.shape, axis)?;
    for p in &parts[1..] {
        let same_rank = p.shape.len() == first.shape.len();
        let agree = same_rank
            && p.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(d, (x, y))| d == axis || x == y);
        if !agree {
            return Err(Error::Shape {
                op: "concat",
                lhs: first.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
    }
    let (outer, _, inner) = axis_extents(&first.shape, axis);
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, data))
}

/// Extracts `len` entries starting at `start` along `axis`.
pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    check_axis("slice", &x.shape, axis)?;
    if len == 0 || start + len > x.shape[axis] {
        return Err(Error::Shape {
            op: "slice",
            lhs: x.shape.clone(),
            rhs: vec![start, len],
        });
    }
    let (outer, full, inner) = axis_extents(&x.shape, axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        data.extend_from_slice(&x.data[base..base + len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, data))
}

/// Splits along `axis` into pieces of the given sizes (inverse of [`concat`]).
pub fn split(x: &Tensor, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let mut start = 0;
    let mut out = Vec::with_capacity(sizes.len());
    for &s in sizes {
        out.push(slice(x, axis, start, s)?);
        start += s;
    }
    if start != x.shape.get(axis).copied().unwrap_or(0) {
        return Err(Error::Shape {
            op: "split",
            lhs: x.shape.clone(),
            rhs: sizes.to_vec(),
        });
    }
    Ok(out)
}

/// Sums along `axis`, keeping it with extent 1.
pub fn reduce_sum(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("reduce_sum", &x.shape, axis)?;
    let (outer, len, inner) = axis_extents(&x.shape, axis);
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..len {
            let src = &x.data[(o * len + i) * inner..(o * len + i + 1) * inner];
            for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = x.shape.clone();
    shape[axis] = 1;
    Ok(Tensor::from_parts(shape, data))
}
