//! Differentiable operations. Every op validates shapes up front, computes
//! its forward value eagerly and registers a backward rule when any input
//! tracks gradients.

use super::tensor::{numel, Tensor};
use super::TensorError;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape { op, detail: format!("incompatible shapes {a:?} and {b:?}") }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index into a tensor of shape `src`
/// broadcast against it.
fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n = numel(out);
    let rank = out.len();
    let src_strides = strides(src);
    let mut eff = vec![0; rank];
    for i in 0..rank {
        if i + src.len() >= rank {
            let j = i + src.len() - rank;
            eff[i] = if src[j] == 1 { 0 } else { src_strides[j] };
        }
    }
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        idx.push(offset);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += eff[d];
            if counter[d] < out[d] {
                break;
            }
            offset -= eff[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

/// How an operand's elements line up with a broadcast output.
enum Layout {
    Same,
    /// The operand's shape is a trailing suffix of the output's, so it
    /// repeats every `k` elements (bias adds, row scaling).
    Tile(usize),
    Map(Vec<usize>),
}

impl Layout {
    fn new(src: &[usize], out: &[usize]) -> Self {
        if src == out {
            Layout::Same
        } else if src.len() <= out.len() && out[out.len() - src.len()..] == *src {
            Layout::Tile(numel(src))
        } else {
            Layout::Map(broadcast_index(src, out))
        }
    }

    fn index(&self, i: usize) -> usize {
        match self {
            Layout::Same => i,
            Layout::Tile(k) => i % k,
            Layout::Map(idx) => idx[i],
        }
    }

    /// Sums an output-shaped gradient back onto the operand.
    fn reduce(&self, g: Vec<f64>, len: usize) -> Vec<f64> {
        match self {
            Layout::Same => g,
            Layout::Tile(k) => {
                let mut out = vec![0.0; *k];
                for chunk in g.chunks_exact(*k) {
                    out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
                }
                out
            }
            Layout::Map(idx) => {
                let mut out = vec![0.0; len];
                for (v, &i) in g.iter().zip(idx) {
                    out[i] += v;
                }
                out
            }
        }
    }
}

/// `f(a[i], b[i])` over the broadcast output of length `n`.
fn zip_with(n: usize, la: &Layout, a: &[f64], lb: &Layout, b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (la, lb) {
        (Layout::Same, Layout::Same) => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        (Layout::Same, Layout::Tile(k)) => {
            let mut out = Vec::with_capacity(n);
            for chunk in a.chunks_exact(*k) {
                out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
            out
        }
        (Layout::Tile(k), Layout::Same) => {
            let mut out = Vec::with_capacity(n);
            for chunk in b.chunks_exact(*k) {
                out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
            out
        }
        _ => (0..n).map(|i| f(a[la.index(i)], b[lb.index(i)])).collect(),
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary(a: &Tensor, b: &Tensor, kind: Binary) -> Result<Tensor, TensorError> {
    let name = match kind {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
        Binary::Div => "div",
    };
    let out_shape =
        broadcast_shape(a.shape(), b.shape()).ok_or_else(|| shape_err(name, a.shape(), b.shape()))?;
    let la = Layout::new(a.shape(), &out_shape);
    let lb = Layout::new(b.shape(), &out_shape);
    let n = numel(&out_shape);
    let (ad, bd) = (a.data(), b.data());
    let data = match kind {
        Binary::Add => zip_with(n, &la, ad, &lb, bd, |x, y| x + y),
        Binary::Sub => zip_with(n, &la, ad, &lb, bd, |x, y| x - y),
        Binary::Mul => zip_with(n, &la, ad, &lb, bd, |x, y| x * y),
        Binary::Div => zip_with(n, &la, ad, &lb, bd, |x, y| x / y),
    };
    let (na, nb) = (a.numel(), b.numel());
    Ok(Tensor::from_op(
        out_shape,
        data,
        name,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _out, p| {
            let (ad, bd) = (p[0].data(), p[1].data());
            let same = Layout::Same;
            let ga = p[0].tracks_grad().then(|| {
                let local = match kind {
                    Binary::Add | Binary::Sub => g.to_vec(),
                    Binary::Mul => zip_with(n, &same, g, &lb, bd, |g, y| g * y),
                    Binary::Div => zip_with(n, &same, g, &lb, bd, |g, y| g / y),
                };
                la.reduce(local, na)
            });
            let gb = p[1].tracks_grad().then(|| {
                let local = match kind {
                    Binary::Add => g.to_vec(),
                    Binary::Sub => g.iter().map(|g| -g).collect(),
                    Binary::Mul => zip_with(n, &la, ad, &same, g, |x, g| g * x),
                    Binary::Div => {
                        let q = zip_with(n, &la, ad, &lb, bd, |x, y| -x / (y * y));
                        q.iter().zip(g).map(|(q, g)| q * g).collect()
                    }
                };
                lb.reduce(local, nb)
            });
            vec![ga, gb]
        }),
    ))
}

fn unary(
    x: &Tensor,
    name: &'static str,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        name,
        vec![x.clone()],
        Box::new(move |g, out, p| {
            let xs = p[0].data();
            vec![Some(g.iter().zip(xs).zip(out).map(|((g, &x), &y)| g * df(x, y)).collect())]
        }),
    )
}

/// `C = op(A) * op(B) + beta * C` over row-major slices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    // Row-major A is [m,k]; its transpose is read from storage [k,m].
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    gemm_strided(m, k, n, (a, rsa, csa), (b, rsb, csb), (c, n, 1), beta);
}

/// General strided product. Each operand is `(storage, row_stride, col_stride)`.
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    c: (&mut [f64], usize, usize),
    beta: f64,
) {
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(a.0.len() > last(m, k, a.1, a.2), "gemm: A out of bounds");
    assert!(b.0.len() > last(k, n, b.1, b.2), "gemm: B out of bounds");
    assert!(c.0.len() > last(m, n, c.1, c.2), "gemm: C out of bounds");
    // SAFETY: the asserts above bound every strided access, and `c` is a
    // unique borrow so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.0.as_mut_ptr(),
            c.1 as isize,
            c.2 as isize,
        );
    }
}

/// Concatenates along `axis`. All inputs must agree on every other extent.
pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor, TensorError> {
    let first = tensors
        .first()
        .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(TensorError::Axis { op: "concat", axis, rank });
    }
    for t in tensors {
        let ok = t.rank() == rank
            && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(shape_err("concat", first.shape(), t.shape()));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let widths: Vec<usize> = tensors.iter().map(|t| t.shape()[axis] * inner).collect();
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(outer * total);
    for o in 0..outer {
        for (t, &w) in tensors.iter().zip(&widths) {
            data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = tensors.iter().map(|t| t.shape()[axis]).sum();
    Ok(Tensor::from_op(
        shape,
        data,
        "concat",
        tensors.to_vec(),
        Box::new(move |g, _out, p| {
            let mut grads: Vec<Option<Vec<f64>>> = p
                .iter()
                .map(|t| t.tracks_grad().then(|| Vec::with_capacity(t.numel())))
                .collect();
            for o in 0..outer {
                let mut start = o * total;
                for (slot, &w) in grads.iter_mut().zip(&widths) {
                    if let Some(v) = slot {
                        v.extend_from_slice(&g[start..start + w]);
                    }
                    start += w;
                }
            }
            grads
        }),
    ))
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        binary(self, other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        binary(self, other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        binary(self, other, Binary::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        binary(self, other, Binary::Div)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        unary(self, "scale", |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        unary(self, "add_scalar", |x| x + s, |_, _| 1.0)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        // 0.5(1 + tanh(u)) = sigmoid(2u), so the gate costs one exp and is
        // reused by the backward pass.
        let x = self.data();
        let gate: Vec<f64> = x.iter().map(|&v| gelu_gate(v)).collect();
        let data = x.iter().zip(&gate).map(|(x, s)| x * s).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            "gelu",
            vec![self.clone()],
            Box::new(move |g, _, p| {
                let xs = p[0].data();
                let gx = g
                    .iter()
                    .zip(xs)
                    .zip(&gate)
                    .map(|((g, &x), &s)| {
                        let du = 2.0 * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
                        g * (s + x * s * (1.0 - s) * du)
                    })
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, "sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&self) -> Tensor {
        unary(self, "relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![self.data().iter().sum()],
            "sum",
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let inv = 1.0 / n as f64;
        Tensor::from_op(
            vec![1],
            vec![self.data().iter().sum::<f64>() * inv],
            "mean",
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0] * inv; n])]),
        )
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor, TensorError> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::Axis { op: "sum_axis", axis, rank });
        }
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        let x = self.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(Tensor::from_op(
            out_shape,
            data,
            "sum_axis",
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor, TensorError> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or(TensorError::Axis { op: "mean_axis", axis, rank: self.rank() })?;
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(shape_err("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            "reshape",
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor, TensorError> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank {
            return Err(TensorError::Contract(format!(
                "permute of rank-{rank} tensor needs {rank} axes, got {axes:?}"
            )));
        }
        for &a in axes {
            if a >= rank {
                return Err(TensorError::Axis { op: "permute", axis: a, rank });
            }
            if std::mem::replace(&mut seen[a], true) {
                return Err(TensorError::Contract(format!("permute axes repeat: {axes:?}")));
            }
        }
        let in_shape = self.shape();
        let in_strides = strides(in_shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.numel();
        // index[i] = flat input position feeding flat output position i
        let mut index = Vec::with_capacity(n);
        let mut counter = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..n {
            index.push(offset);
            for d in (0..rank).rev() {
                counter[d] += 1;
                offset += src_strides[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                offset -= src_strides[d] * counter[d];
                counter[d] = 0;
            }
        }
        let x = self.data();
        let data = index.iter().map(|&i| x[i]).collect();
        Ok(Tensor::from_op(
            out_shape,
            data,
            "permute",
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; n];
                for (gv, &i) in g.iter().zip(&index) {
                    gx[i] = *gv;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor, TensorError> {
        let rank = self.rank();
        for axis in [a, b] {
            if axis >= rank {
                return Err(TensorError::Axis { op: "transpose", axis, rank });
            }
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor, TensorError> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::Axis { op: "narrow", axis, rank });
        }
        let shape = self.shape();
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::Shape {
                op: "narrow",
                detail: format!("range {start}..{} out of extent {} in {shape:?}", start + len, shape[axis]),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let x = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op(
            out_shape,
            data,
            "narrow",
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; n];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    gx[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Gathers rows of a `[rows, width]` table: output is `[ids.len(), width]`.
    pub fn embedding_lookup(&self, ids: &[usize]) -> Result<Tensor, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::Shape {
                op: "embedding_lookup",
                detail: format!("table must be rank 2, got {:?}", self.shape()),
            });
        }
        if ids.is_empty() {
            return Err(TensorError::Contract("embedding_lookup with no ids".into()));
        }
        let (rows, width) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Shape {
                op: "embedding_lookup",
                detail: format!("id {bad} out of range for table {:?}", self.shape()),
            });
        }
        let x = self.data();
        let mut data = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            data.extend_from_slice(&x[i * width..(i + 1) * width]);
        }
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            vec![ids.len(), width],
            data,
            "embedding_lookup",
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; rows * width];
                for (r, &i) in ids.iter().enumerate() {
                    for (d, s) in gx[i * width..(i + 1) * width].iter_mut().zip(&g[r * width..]) {
                        *d += s;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Batched matrix product `[.., m, k] @ [.., k, n] -> [.., m, n]` with
    /// broadcasting over the leading batch extents.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shape(batch_a, batch_b).ok_or_else(|| shape_err("matmul", sa, sb))?;
        let nb = numel(&batch);
        let map_a = Layout::new(batch_a, &batch);
        let map_b = Layout::new(batch_b, &batch);
        let (a, b) = (self.data(), other.data());
        let mut data = vec![0.0; nb * m * n];
        let folded = batch_b.is_empty();
        if folded {
            // [.., m, k] @ [k, n]: one product with the batch folded into rows.
            gemm(nb * m, k, n, a, false, b, false, &mut data, 0.0);
        } else {
            for i in 0..nb {
                let ia = map_a.index(i);
                let ib = map_b.index(i);
                gemm(
                    m,
                    k,
                    n,
                    &a[ia * m * k..],
                    false,
                    &b[ib * k * n..],
                    false,
                    &mut data[i * m * n..],
                    0.0,
                );
            }
        }
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let (len_a, len_b) = (self.numel(), other.numel());
        Ok(Tensor::from_op(
            out_shape,
            data,
            "matmul",
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, p| {
                let (a, b) = (p[0].data(), p[1].data());
                let ga = p[0].tracks_grad().then(|| {
                    let mut ga = vec![0.0; len_a];
                    if folded {
                        gemm(nb * m, n, k, g, false, b, true, &mut ga, 0.0);
                    } else {
                        for i in 0..nb {
                            let ia = map_a.index(i);
                            let ib = map_b.index(i);
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..],
                                false,
                                &b[ib * k * n..],
                                true,
                                &mut ga[ia * m * k..],
                                1.0,
                            );
                        }
                    }
                    ga
                });
                let gb = p[1].tracks_grad().then(|| {
                    let mut gb = vec![0.0; len_b];
                    if folded {
                        gemm(k, nb * m, n, a, true, g, false, &mut gb, 0.0);
                    } else {
                        for i in 0..nb {
                            let ia = map_a.index(i);
                            let ib = map_b.index(i);
                            gemm(
                                k,
                                m,
                                n,
                                &a[ia * m * k..],
                                true,
                                &g[i * m * n..],
                                false,
                                &mut gb[ib * k * n..],
                                1.0,
                            );
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor, TensorError> {
        let d = *self.shape().last().expect("tensors have rank >= 1");
        let mut data = self.to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "softmax",
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`
    /// (both shaped `[d]`).
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor, TensorError> {
        let d = *self.shape().last().expect("tensors have rank >= 1");
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                detail: format!(
                    "input {:?} needs affine params [{d}], got {:?} and {:?}",
                    self.shape(),
                    gamma.shape(),
                    beta.shape()
                ),
            });
        }
        let x = self.data();
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for (h, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *h = (v - mu) * is;
            }
        }
        let (gm, bt) = (gamma.data(), beta.data());
        let mut data = Vec::with_capacity(x.len());
        for row in xhat.chunks_exact(d) {
            data.extend(row.iter().zip(gm).zip(bt).map(|((h, g), b)| h * g + b));
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "layer_norm",
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, _, p| {
                let gm = p[1].data();
                let gx = p[0].tracks_grad().then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let span = r * d..(r + 1) * d;
                        let dxhat: Vec<f64> = g[span.clone()].iter().zip(gm).map(|(a, b)| a * b).collect();
                        let h = &xhat[span.clone()];
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((o, dh), hv) in gx[span].iter_mut().zip(&dxhat).zip(h) {
                            *o = inv_std[r] * (dh - m1 - hv * m2);
                        }
                    }
                    gx
                });
                let ggamma = p[1].tracks_grad().then(|| {
                    let mut acc = vec![0.0; d];
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        acc.iter_mut().zip(gr).zip(hr).for_each(|((a, gv), h)| *a += gv * h);
                    }
                    acc
                });
                let gbeta = p[2].tracks_grad().then(|| {
                    let mut acc = vec![0.0; d];
                    for gr in g.chunks_exact(d) {
                        acc.iter_mut().zip(gr).for_each(|(a, gv)| *a += gv);
                    }
                    acc
                });
                vec![gx, ggamma, gbeta]
            }),
        ))
    }

    /// Mean binary cross-entropy between `self` (logits) and `targets`,
    /// evaluated as `max(x,0) - x*t + ln(1 + e^{-|x|})`.
    pub fn bce_with_logits(&self, targets: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape() != targets.shape() {
            return Err(shape_err("bce_with_logits", self.shape(), targets.shape()));
        }
        let n = self.numel() as f64;
        let total: f64 = self
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        Ok(Tensor::from_op(
            vec![1],
            vec![total / n],
            "bce_with_logits",
            vec![self.clone(), targets.clone()],
            Box::new(move |g, _, p| {
                let (x, t) = (p[0].data(), p[1].data());
                let gx = p[0].tracks_grad().then(|| {
                    x.iter().zip(t).map(|(&x, &t)| g[0] * (sigmoid(x) - t) / n).collect()
                });
                let gt = p[1].tracks_grad().then(|| x.iter().map(|&x| -g[0] * x / n).collect());
                vec![gx, gt]
            }),
        ))
    }
}

/// `0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_gate(x: f64) -> f64 {
    sigmoid(2.0 * SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
