use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{strides, DType, Tensor};
use crate::error::{contract_err, dim_err, Result};

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn broadcast_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || is_suffix(b.shape(), a.shape()) {
        Ok(a.shape().to_vec())
    } else if is_suffix(a.shape(), b.shape()) {
        Ok(b.shape().to_vec())
    } else {
        dim_err(format!(
            "{op}: shapes {:?} and {:?} are not suffix-broadcastable",
            a.shape(),
            b.shape()
        ))
    }
}

#[inline]
fn wrap(i: usize, n: usize, len: usize) -> usize {
    if len == n {
        i
    } else {
        i % len
    }
}

fn binary(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: fn(f64, f64) -> f64,
    da: fn(f64, f64, f64) -> f64,
    db: fn(f64, f64, f64) -> f64,
) -> Result<Tensor> {
    let shape = broadcast_shape(a, b, op)?;
    let n: usize = shape.iter().product();
    let (na, nb) = (a.numel(), b.numel());
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = (0..n)
        .map(|i| f(ad[wrap(i, n, na)], bd[wrap(i, n, nb)]))
        .collect();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        data,
        shape,
        a.dtype().join(b.dtype()),
        op,
        vec![a.clone(), b.clone()],
        Box::new(move |out, g| {
            let (ad, bd) = (ac.data(), bc.data());
            let n = out.len();
            let ga = ac.requires_grad().then(|| {
                let mut v = vec![0.0; na];
                for i in 0..n {
                    let (ia, ib) = (wrap(i, n, na), wrap(i, n, nb));
                    v[ia] += g[i] * da(ad[ia], bd[ib], out[i]);
                }
                v
            });
            let gb = bc.requires_grad().then(|| {
                let mut v = vec![0.0; nb];
                for i in 0..n {
                    let (ia, ib) = (wrap(i, n, na), wrap(i, n, nb));
                    v[ib] += g[i] * db(ad[ia], bd[ib], out[i]);
                }
                v
            });
            vec![ga, gb]
        }),
    ))
}

fn unary<F, D>(a: &Tensor, op: &'static str, f: F, df: D) -> Tensor
where
    F: Fn(f64) -> f64,
    D: Fn(f64, f64) -> f64 + Send + Sync + 'static,
{
    let data: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
    let ac = a.clone();
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        a.dtype(),
        op,
        vec![a.clone()],
        Box::new(move |out, g| {
            let v = ac
                .data()
                .iter()
                .zip(out)
                .zip(g)
                .map(|((&x, &y), &gi)| gi * df(x, y))
                .collect();
            vec![Some(v)]
        }),
    )
}

fn check_axis(t: &Tensor, axis: usize, op: &str) -> Result<()> {
    if axis >= t.rank() {
        return dim_err(format!(
            "{op}: axis {axis} out of range for shape {:?}",
            t.shape()
        ));
    }
    Ok(())
}

/// (outer, dim, inner) extents around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let rank = shape.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let last = rank - 1;
    let (last_extent, last_stride) = (out_shape[last], src_strides[last]);
    while out.len() < n {
        for j in 0..last_extent {
            out.push(data[off + j * last_stride]);
        }
        // advance all but the innermost index
        let mut d = last;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, "add", |x, y| x + y, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, "sub", |x, y| x - y, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, "mul", |x, y| x * y, |_, y, _| y, |x, _, _| x)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(
            self,
            other,
            "div",
            |x, y| x / y,
            |_, y, _| 1.0 / y,
            |_, y, z| -z / y,
        )
    }

    /// Elementwise maximum; ties send the gradient to `self`.
    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        binary(
            self,
            other,
            "maximum",
            f64::max,
            |x, y, _| if x >= y { 1.0 } else { 0.0 },
            |x, y, _| if x >= y { 0.0 } else { 1.0 },
        )
    }

    /// Elementwise minimum; ties send the gradient to `self`.
    pub fn minimum(&self, other: &Tensor) -> Result<Tensor> {
        binary(
            self,
            other,
            "minimum",
            f64::min,
            |x, y, _| if x <= y { 1.0 } else { 0.0 },
            |x, y, _| if x <= y { 0.0 } else { 1.0 },
        )
    }

    pub fn neg(&self) -> Tensor {
        unary(self, "neg", |x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary(self, "scale", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, "add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn relu(&self) -> Tensor {
        unary(
            self,
            "relu",
            |x| if x > 0.0 { x } else { 0.0 },
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(
            self,
            "sigmoid",
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn exp(&self) -> Tensor {
        unary(self, "exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, "ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(&self) -> Tensor {
        unary(self, "abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> Tensor {
        unary(self, "square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Tensor {
        unary(self, "sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    /// max(x, c) with zero gradient where the floor is active.
    pub fn clamp_min(&self, c: f64) -> Tensor {
        unary(
            self,
            "clamp_min",
            move |x| x.max(c),
            move |x, _| if x > c { 1.0 } else { 0.0 },
        )
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![s],
            vec![1],
            self.dtype(),
            "sum",
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, which is removed from the shape (rank-1 input gives `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis(self, axis, "sum_axis")?;
        let (outer, dim, inner) = split_at_axis(self.shape(), axis);
        let d = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..dim {
                let src = &d[(o * dim + k) * inner..(o * dim + k + 1) * inner];
                for (dst, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += x;
                }
            }
        }
        let mut shape: Vec<usize> = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_op(
            out,
            shape,
            self.dtype(),
            "sum_axis",
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut v = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    for k in 0..dim {
                        v[(o * dim + k) * inner..(o * dim + k + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(v)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return dim_err(format!(
                "reshape: cannot view {:?} as {shape:?}",
                self.shape()
            ));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            self.dtype(),
            "reshape",
            vec![self.clone()],
            Box::new(|_, g| vec![Some(g.to_vec())]),
        ))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return dim_err(format!(
                "permute: {perm:?} is not a permutation for shape {:?}",
                self.shape()
            ));
        }
        let (data, shape) = permute_data(self.data(), self.shape(), perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let out_shape = shape.clone();
        Ok(Tensor::from_op(
            data,
            shape,
            self.dtype(),
            "permute",
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(permute_data(g, &out_shape, &inverse).0)]),
        ))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        if a >= perm.len() || b >= perm.len() {
            return dim_err(format!(
                "transpose: axes ({a},{b}) invalid for {:?}",
                self.shape()
            ));
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return contract_err("concat of zero tensors");
        };
        check_axis(first, axis, "concat")?;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p
                    .shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return dim_err(format!(
                    "concat along {axis}: {:?} vs {:?}",
                    first.shape(),
                    p.shape()
                ));
            }
        }
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let dims: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = dims.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &d) in parts.iter().zip(&dims) {
                data.extend_from_slice(&p.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let dtype = parts.iter().fold(DType::F64, |acc, p| acc.join(p.dtype()));
        let parents: Vec<Tensor> = parts.iter().map(|&p| p.clone()).collect();
        let flags: Vec<bool> = parents.iter().map(|p| p.requires_grad()).collect();
        Ok(Tensor::from_op(
            data,
            shape,
            dtype,
            "concat",
            parents,
            Box::new(move |_, g| {
                let mut grads: Vec<Option<Vec<f64>>> = flags
                    .iter()
                    .zip(&dims)
                    .map(|(&f, &d)| f.then(|| Vec::with_capacity(outer * d * inner)))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (slot, &d) in grads.iter_mut().zip(&dims) {
                        let len = d * inner;
                        if let Some(v) = slot {
                            v.extend_from_slice(&g[off..off + len]);
                        }
                        off += len;
                    }
                }
                grads
            }),
        ))
    }

    /// Stacks equal-shaped tensors along a new axis.
    pub fn stack(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return contract_err("stack of zero tensors");
        };
        if axis > first.rank() {
            return dim_err(format!("stack: axis {axis} for rank {}", first.rank()));
        }
        let mut shape = first.shape().to_vec();
        shape.insert(axis, 1);
        let expanded = parts
            .iter()
            .map(|p| {
                if p.shape() != first.shape() {
                    return dim_err(format!(
                        "stack: {:?} vs {:?}",
                        first.shape(),
                        p.shape()
                    ));
                }
                p.reshape(&shape)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = expanded.iter().collect();
        Tensor::concat(&refs, axis)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis(self, axis, "narrow")?;
        let (outer, dim, inner) = split_at_axis(self.shape(), axis);
        if len == 0 || start + len > dim {
            return dim_err(format!(
                "narrow: [{start}, {}) outside extent {dim} of {:?}",
                start + len,
                self.shape()
            ));
        }
        let d = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&d[(o * dim + start) * inner..(o * dim + start + len) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            data,
            shape,
            self.dtype(),
            "narrow",
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut v = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    v[(o * dim + start) * inner..(o * dim + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(v)]
            }),
        ))
    }

    /// Gathers the given positions along `axis` (repeats allowed).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        check_axis(self, axis, "index_select")?;
        let (outer, dim, inner) = split_at_axis(self.shape(), axis);
        if indices.is_empty() {
            return dim_err("index_select: empty index list");
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= dim) {
            return dim_err(format!(
                "index_select: index {bad} out of range for extent {dim}"
            ));
        }
        let d = self.data();
        let k = indices.len();
        let mut data = Vec::with_capacity(outer * k * inner);
        for o in 0..outer {
            for &i in indices {
                data.extend_from_slice(&d[(o * dim + i) * inner..(o * dim + i + 1) * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = k;
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            data,
            shape,
            self.dtype(),
            "index_select",
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut v = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    for (j, &i) in idx.iter().enumerate() {
                        let dst = &mut v[(o * dim + i) * inner..(o * dim + i + 1) * inner];
                        let src = &g[(o * k + j) * inner..(o * k + j + 1) * inner];
                        for (a, b) in dst.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                vec![Some(v)]
            }),
        ))
    }

    /// For a tensor whose last axis has extent C, picks one entry per row:
    /// output `[rows]` with `out[r] = x[r, indices[r]]`.
    pub fn gather_last(&self, indices: &[usize]) -> Result<Tensor> {
        let c = *self.shape().last().expect("rank >= 1");
        let rows = self.numel() / c;
        if indices.len() != rows {
            return dim_err(format!(
                "gather_last: {} indices for {rows} rows of {:?}",
                indices.len(),
                self.shape()
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            return dim_err(format!("gather_last: index {bad} >= {c}"));
        }
        let d = self.data();
        let data = indices
            .iter()
            .enumerate()
            .map(|(r, &i)| d[r * c + i])
            .collect();
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            data,
            vec![rows],
            self.dtype(),
            "gather_last",
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut v = vec![0.0; rows * c];
                for (r, &i) in idx.iter().enumerate() {
                    v[r * c + i] += g[r];
                }
                vec![Some(v)]
            }),
        ))
    }

    /// Repeats the tensor along a new leading axis of extent `n`.
    pub fn expand_leading(&self, n: usize) -> Result<Tensor> {
        if n == 0 {
            return dim_err("expand_leading: zero extent");
        }
        let m = self.numel();
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            data.extend_from_slice(self.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape());
        Ok(Tensor::from_op(
            data,
            shape,
            self.dtype(),
            "expand_leading",
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut v = vec![0.0; m];
                for chunk in g.chunks(m) {
                    for (a, b) in v.iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
                vec![Some(v)]
            }),
        ))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis(self, axis, "softmax")?;
        let (outer, dim, inner) = split_at_axis(self.shape(), axis);
        let d = self.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * dim + k) * inner + i;
                let mx = (0..dim).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..dim {
                    let e = (d[at(k)] - mx).exp();
                    out[at(k)] = e;
                    s += e;
                }
                for k in 0..dim {
                    out[at(k)] /= s;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            self.dtype(),
            "softmax",
            vec![self.clone()],
            Box::new(move |y, g| {
                let mut v = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * dim + k) * inner + i;
                        let s: f64 = (0..dim).map(|k| y[at(k)] * g[at(k)]).sum();
                        for k in 0..dim {
                            v[at(k)] = y[at(k)] * (g[at(k)] - s);
                        }
                    }
                }
                vec![Some(v)]
            }),
        ))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis(self, axis, "log_softmax")?;
        let (outer, dim, inner) = split_at_axis(self.shape(), axis);
        let d = self.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * dim + k) * inner + i;
                let mx = (0..dim).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..dim).map(|k| (d[at(k)] - mx).exp()).sum();
                let lse = mx + s.ln();
                for k in 0..dim {
                    out[at(k)] = d[at(k)] - lse;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            self.dtype(),
            "log_softmax",
            vec![self.clone()],
            Box::new(move |y, g| {
                let mut v = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * dim + k) * inner + i;
                        let s: f64 = (0..dim).map(|k| g[at(k)]).sum();
                        for k in 0..dim {
                            v[at(k)] = g[at(k)] - y[at(k)].exp() * s;
                        }
                    }
                }
                vec![Some(v)]
            }),
        ))
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`
    /// (both of extent equal to the last axis).
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().expect("rank >= 1");
        if gamma.shape() != [d] || beta.shape() != [d] {
            return dim_err(format!(
                "layer_norm: width {d} vs gamma {:?} / beta {:?}",
                gamma.shape(),
                beta.shape()
            ));
        }
        let rows = self.numel() / d;
        let x = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gm[j] + bt[j];
            }
        }
        let dtype = self.dtype().join(gamma.dtype()).join(beta.dtype());
        let (xc, gc, bc) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            dtype,
            "layer_norm",
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |_, g| {
                let gm = gc.data();
                let gx = xc.requires_grad().then(|| {
                    let mut v = vec![0.0; rows * d];
                    for r in 0..rows {
                        let gh: Vec<f64> = (0..d).map(|j| g[r * d + j] * gm[j]).collect();
                        let h = &xhat[r * d..(r + 1) * d];
                        let m1 = gh.iter().sum::<f64>() / d as f64;
                        let m2 = gh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            v[r * d + j] = inv_std[r] * (gh[j] - m1 - h[j] * m2);
                        }
                    }
                    v
                });
                let ggamma = gc.requires_grad().then(|| {
                    let mut v = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            v[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    v
                });
                let gbeta = bc.requires_grad().then(|| {
                    let mut v = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            v[j] += g[r * d + j];
                        }
                    }
                    v
                });
                vec![gx, ggamma, gbeta]
            }),
        ))
    }

    /// Batched matrix product `[..., m, k] x [..., k, n]`. Leading batch
    /// extents follow the usual broadcasting rules (missing or 1 repeats).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self, other);
        if a.rank() < 2 || b.rank() < 2 {
            return dim_err(format!(
                "matmul needs rank >= 2, got {:?} x {:?}",
                a.shape(),
                b.shape()
            ));
        }
        let (m, k) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
        let (k2, n) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
        if k != k2 {
            return dim_err(format!(
                "matmul inner extents differ: {:?} x {:?}",
                a.shape(),
                b.shape()
            ));
        }
        let batch_a = &a.shape()[..a.rank() - 2];
        let batch_b = &b.shape()[..b.rank() - 2];

        // Fast path: a weight matrix applied to every row of `a`.
        if batch_b.is_empty() {
            let rows = a.numel() / k;
            let mut out = vec![0.0; rows * n];
            gemm_nn(rows, k, n, a.data(), b.data(), &mut out);
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            let (ac, bc) = (a.clone(), b.clone());
            return Ok(Tensor::from_op(
                out,
                shape,
                a.dtype().join(b.dtype()),
                "matmul",
                vec![a.clone(), b.clone()],
                Box::new(move |_, g| {
                    let ga = ac.requires_grad().then(|| {
                        let mut v = vec![0.0; rows * k];
                        gemm_nt(rows, n, k, g, bc.data(), &mut v);
                        v
                    });
                    let gb = bc.requires_grad().then(|| {
                        let mut v = vec![0.0; k * n];
                        gemm_tn(rows, k, n, ac.data(), g, &mut v);
                        v
                    });
                    vec![ga, gb]
                }),
            ));
        }

        let rank = batch_a.len().max(batch_b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(batch_a), pad(batch_b));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return dim_err(format!(
                    "matmul batch extents not broadcastable: {:?} x {:?}",
                    a.shape(),
                    b.shape()
                ));
            }
            batch.push(x.max(y));
        }
        let nbatch: usize = batch.iter().product();
        let (sa, sb) = (strides(&pa), strides(&pb));
        let mut pairs = Vec::with_capacity(nbatch);
        for lin in 0..nbatch {
            let (mut rem, mut ia, mut ib) = (lin, 0, 0);
            for d in (0..rank).rev() {
                let idx = rem % batch[d];
                rem /= batch[d];
                if pa[d] != 1 {
                    ia += idx * sa[d];
                }
                if pb[d] != 1 {
                    ib += idx * sb[d];
                }
            }
            pairs.push((ia, ib));
        }
        let mut out = vec![0.0; nbatch * m * n];
        for (lin, &(ia, ib)) in pairs.iter().enumerate() {
            gemm_nn(
                m,
                k,
                n,
                &a.data()[ia * m * k..(ia + 1) * m * k],
                &b.data()[ib * k * n..(ib + 1) * k * n],
                &mut out[lin * m * n..(lin + 1) * m * n],
            );
        }
        let mut shape = batch;
        shape.extend_from_slice(&[m, n]);
        let (ac, bc) = (a.clone(), b.clone());
        Ok(Tensor::from_op(
            out,
            shape,
            a.dtype().join(b.dtype()),
            "matmul",
            vec![a.clone(), b.clone()],
            Box::new(move |_, g| {
                let ga = ac.requires_grad().then(|| {
                    let mut v = vec![0.0; ac.numel()];
                    for (lin, &(ia, ib)) in pairs.iter().enumerate() {
                        gemm_nt(
                            m,
                            n,
                            k,
                            &g[lin * m * n..(lin + 1) * m * n],
                            &bc.data()[ib * k * n..(ib + 1) * k * n],
                            &mut v[ia * m * k..(ia + 1) * m * k],
                        );
                    }
                    v
                });
                let gb = bc.requires_grad().then(|| {
                    let mut v = vec![0.0; bc.numel()];
                    for (lin, &(ia, ib)) in pairs.iter().enumerate() {
                        gemm_tn(
                            m,
                            k,
                            n,
                            &ac.data()[ia * m * k..(ia + 1) * m * k],
                            &g[lin * m * n..(lin + 1) * m * n],
                            &mut v[ib * k * n..(ib + 1) * k * n],
                        );
                    }
                    v
                });
                vec![ga, gb]
            }),
        ))
    }

    /// im2col for 2-D convolution: `[B, C, H, W]` to
    /// `[B, Ho*Wo, C*kernel*kernel]`, columns ordered (channel, ky, kx).
    pub fn unfold2d(&self, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
        if self.rank() != 4 || kernel == 0 || stride == 0 {
            return dim_err(format!(
                "unfold2d: expects [B,C,H,W] and positive kernel/stride, got {:?}",
                self.shape()
            ));
        }
        let (b, c, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        if h + 2 * padding < kernel || w + 2 * padding < kernel {
            return dim_err(format!("unfold2d: kernel {kernel} larger than input {h}x{w}"));
        }
        let ho = (h + 2 * padding - kernel) / stride + 1;
        let wo = (w + 2 * padding - kernel) / stride + 1;
        let cols = c * kernel * kernel;
        // source offset per output cell, None for zero padding
        let mut map: Vec<Option<usize>> = Vec::with_capacity(b * ho * wo * cols);
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ci in 0..c {
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let y = (oy * stride + ky) as isize - padding as isize;
                                let x = (ox * stride + kx) as isize - padding as isize;
                                map.push(
                                    (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w)
                                        .then(|| ((bi * c + ci) * h + y as usize) * w + x as usize),
                                );
                            }
                        }
                    }
                }
            }
        }
        let d = self.data();
        let data = map.iter().map(|s| s.map_or(0.0, |i| d[i])).collect();
        let n_in = self.numel();
        Ok(Tensor::from_op(
            data,
            vec![b, ho * wo, cols],
            self.dtype(),
            "unfold2d",
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut v = vec![0.0; n_in];
                for (s, &gi) in map.iter().zip(g) {
                    if let Some(i) = s {
                        v[*i] += gi;
                    }
                }
                vec![Some(v)]
            }),
        ))
    }
}
