//! Forward kernels and backward rules for every differentiable op.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Batched matrix product with leading-dim broadcasting (equal or 1).
fn matmul_raw<E: Element>(
    a: &[E],
    ashape: &[usize],
    b: &[E],
    bshape: &[usize],
) -> Result<(Vec<E>, Vec<usize>)> {
    if ashape.len() < 2 || bshape.len() < 2 {
        return Err(Error::shape("matmul", format!("need >=2 dims, got {ashape:?} x {bshape:?}")));
    }
    let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
    let (k2, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", format!("inner dims disagree: {ashape:?} x {bshape:?}")));
    }
    let ab = &ashape[..ashape.len() - 2];
    let bb = &bshape[..bshape.len() - 2];
    let obatch = broadcast_batch(ab, bb)
        .ok_or_else(|| Error::shape("matmul", format!("batch dims incompatible: {ashape:?} x {bshape:?}")))?;
    let batch: usize = obatch.iter().product();
    let mut out = vec![E::zero(); batch * m * n];
    for_each_batch(ab, bb, &obatch, |bi, aoff, boff| {
        E::gemm(
            m,
            k,
            n,
            &a[aoff * m * k..aoff * m * k + m * k],
            &b[boff * k * n..boff * k * n + k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
        );
    });
    let mut oshape = obatch;
    oshape.push(m);
    oshape.push(n);
    Ok((out, oshape))
}

/// Broadcast two batch-dim lists (right-aligned; equal or 1 per dim).
fn broadcast_batch(ab: &[usize], bb: &[usize]) -> Option<Vec<usize>> {
    let rank = ab.len().max(bb.len());
    let mut obatch = vec![1usize; rank];
    for i in 0..rank {
        let da = if i < rank - ab.len() { 1 } else { ab[i - (rank - ab.len())] };
        let db = if i < rank - bb.len() { 1 } else { bb[i - (rank - bb.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        obatch[i] = da.max(db);
    }
    Some(obatch)
}

/// Visit every broadcast batch as (out index, a index, b index); broadcast
/// dims contribute stride 0, so repeated indices mean shared operands.
fn for_each_batch(ab: &[usize], bb: &[usize], obatch: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = obatch.len();
    let batch: usize = obatch.iter().product();
    let astr = strides(ab);
    let bstr = strides(bb);
    let mut idx = vec![0usize; rank];
    for bi in 0..batch {
        let mut aoff = 0usize;
        let mut boff = 0usize;
        for i in 0..rank {
            if i >= rank - ab.len() {
                let j = i - (rank - ab.len());
                if ab[j] != 1 {
                    aoff += idx[i] * astr[j];
                }
            }
            if i >= rank - bb.len() {
                let j = i - (rank - bb.len());
                if bb[j] != 1 {
                    boff += idx[i] * bstr[j];
                }
            }
        }
        f(bi, aoff, boff);
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < obatch[i] {
                break;
            }
            idx[i] = 0;
        }
    }
}

fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let dim = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, dim, inner)
}

impl<E: Element> Tensor<E> {
    /// Elementwise sum; `rhs` may be a trailing-dims broadcast of `self`.
    pub fn add(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape() == rhs.shape() {
            let out = self.data().iter().zip(rhs.data()).map(|(a, b)| *a + *b).collect();
            return Tensor::record("add", &[self, rhs], self.shape().to_vec(), out, |args| {
                vec![Some(args.out_grad.to_vec()), Some(args.out_grad.to_vec())]
            });
        }
        let (ls, rs) = (self.shape(), rhs.shape());
        if rs.len() <= ls.len() && &ls[ls.len() - rs.len()..] == rs {
            let bl = rhs.numel();
            let mut out = self.to_vec();
            for chunk in out.chunks_mut(bl) {
                for (o, b) in chunk.iter_mut().zip(rhs.data()) {
                    *o += *b;
                }
            }
            return Tensor::record("add", &[self, rhs], ls.to_vec(), out, move |args| {
                let mut db = vec![E::zero(); bl];
                for chunk in args.out_grad.chunks(bl) {
                    for (d, g) in db.iter_mut().zip(chunk) {
                        *d += *g;
                    }
                }
                vec![Some(args.out_grad.to_vec()), Some(db)]
            });
        }
        Err(Error::shape("add", format!("incompatible shapes {ls:?} + {rs:?}")))
    }

    pub fn sub(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(
                "sub",
                format!("shapes differ: {:?} - {:?}", self.shape(), rhs.shape()),
            ));
        }
        let out = self.data().iter().zip(rhs.data()).map(|(a, b)| *a - *b).collect();
        Tensor::record("sub", &[self, rhs], self.shape().to_vec(), out, |args| {
            vec![
                Some(args.out_grad.to_vec()),
                Some(args.out_grad.iter().map(|g| -*g).collect()),
            ]
        })
    }

    pub fn mul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(
                "mul",
                format!("shapes differ: {:?} * {:?}", self.shape(), rhs.shape()),
            ));
        }
        let out = self.data().iter().zip(rhs.data()).map(|(a, b)| *a * *b).collect();
        Tensor::record("mul", &[self, rhs], self.shape().to_vec(), out, |args| {
            let da = args.out_grad.iter().zip(args.inputs[1]).map(|(g, b)| *g * *b).collect();
            let db = args.out_grad.iter().zip(args.inputs[0]).map(|(g, a)| *g * *a).collect();
            vec![Some(da), Some(db)]
        })
    }

    pub fn div(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(
                "div",
                format!("shapes differ: {:?} / {:?}", self.shape(), rhs.shape()),
            ));
        }
        let out = self.data().iter().zip(rhs.data()).map(|(a, b)| *a / *b).collect();
        Tensor::record("div", &[self, rhs], self.shape().to_vec(), out, |args| {
            let da = args.out_grad.iter().zip(args.inputs[1]).map(|(g, b)| *g / *b).collect();
            let db = args
                .out_grad
                .iter()
                .zip(args.inputs[0].iter().zip(args.inputs[1]))
                .map(|(g, (a, b))| -*g * *a / (*b * *b))
                .collect();
            vec![Some(da), Some(db)]
        })
    }

    pub fn scale(&self, c: E) -> Result<Tensor<E>> {
        let out = self.data().iter().map(|v| *v * c).collect();
        Tensor::record("scale", &[self], self.shape().to_vec(), out, move |args| {
            vec![Some(args.out_grad.iter().map(|g| *g * c).collect())]
        })
    }

    pub fn add_scalar(&self, c: E) -> Result<Tensor<E>> {
        let out = self.data().iter().map(|v| *v + c).collect();
        Tensor::record("add_scalar", &[self], self.shape().to_vec(), out, |args| {
            vec![Some(args.out_grad.to_vec())]
        })
    }

    pub fn neg(&self) -> Result<Tensor<E>> {
        self.scale(-E::one())
    }

    /// Elementwise absolute value; subgradient 0 at exact ties.
    pub fn abs(&self) -> Result<Tensor<E>> {
        let out = self.data().iter().map(|v| v.abs()).collect();
        Tensor::record("abs", &[self], self.shape().to_vec(), out, |args| {
            let da = args
                .out_grad
                .iter()
                .zip(args.inputs[0])
                .map(|(g, x)| {
                    if *x > E::zero() {
                        *g
                    } else if *x < E::zero() {
                        -*g
                    } else {
                        E::zero()
                    }
                })
                .collect();
            vec![Some(da)]
        })
    }

    pub fn sum_all(&self) -> Result<Tensor<E>> {
        let s: E = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::record("sum_all", &[self], vec![1], vec![s], move |args| {
            vec![Some(vec![args.out_grad[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Result<Tensor<E>> {
        let n = self.numel();
        let inv = E::one() / E::from_f64(n as f64);
        let s: E = self.data().iter().copied().sum();
        Tensor::record("mean_all", &[self], vec![1], vec![s * inv], move |args| {
            vec![Some(vec![args.out_grad[0] * inv; n])]
        })
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.ndim() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {:?}", self.shape())));
        }
        let (outer, dim, inner) = lane_dims(self.shape(), axis);
        let mut out = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..dim {
                for i in 0..inner {
                    out[o * inner + i] += self.data()[(o * dim + j) * inner + i];
                }
            }
        }
        let mut oshape: Vec<usize> = self.shape().to_vec();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        Tensor::record("sum_axis", &[self], oshape, out, move |args| {
            let mut dx = vec![E::zero(); outer * dim * inner];
            for o in 0..outer {
                for j in 0..dim {
                    for i in 0..inner {
                        dx[(o * dim + j) * inner + i] = args.out_grad[o * inner + i];
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<E>> {
        let dim = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis} of {:?}", self.shape())))?;
        self.sum_axis(axis)?.scale(E::one() / E::from_f64(dim as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape(), shape),
            ));
        }
        Tensor::record_rc("reshape", &[self], shape.to_vec(), self.data_rc(), true, |args| {
            vec![Some(args.out_grad.to_vec())]
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<E>> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("invalid axes {axes:?} for {:?}", self.shape())));
        }
        let in_shape = self.shape().to_vec();
        let out = permute_raw(self.data(), &in_shape, axes);
        let oshape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let mut inverse = vec![0usize; nd];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let oshape_b = oshape.clone();
        Tensor::record("permute", &[self], oshape, out, move |args| {
            vec![Some(permute_raw(args.out_grad, &oshape_b, &inverse))]
        })
    }

    /// Transpose the last two axes.
    pub fn transpose2(&self) -> Result<Tensor<E>> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(Error::shape("transpose2", format!("{:?}", self.shape())));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    /// Contiguous sub-range along one axis.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} range {start}..{} of {:?}", start + len, shape),
            ));
        }
        let (outer, dim, inner) = lane_dims(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        Tensor::record("narrow", &[self], oshape, out, move |args| {
            let mut dx = vec![E::zero(); outer * dim * inner];
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                let src = o * len * inner;
                dx[dst..dst + len * inner].copy_from_slice(&args.out_grad[src..src + len * inner]);
            }
            vec![Some(dx)]
        })
    }

    /// Concatenate along one axis; all other dims must agree.
    pub fn concat(axis: usize, parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no tensors given".to_string()))?;
        let nd = first.ndim();
        if axis >= nd {
            return Err(Error::shape("concat", format!("axis {axis} of {:?}", first.shape())));
        }
        let mut total = 0usize;
        for p in parts {
            if p.ndim() != nd
                || (0..nd).any(|i| i != axis && p.shape()[i] != first.shape()[i])
            {
                return Err(Error::shape(
                    "concat",
                    format!("incompatible {:?} with {:?}", p.shape(), first.shape()),
                ));
            }
            total += p.shape()[axis];
        }
        let mut oshape = first.shape().to_vec();
        oshape[axis] = total;
        let (outer, _, inner) = lane_dims(&oshape, axis);
        let mut out = vec![E::zero(); outer * total * inner];
        let mut offset = 0usize;
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let d = p.shape()[axis];
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                let src = o * d * inner;
                out[dst..dst + d * inner].copy_from_slice(&p.data()[src..src + d * inner]);
            }
            offset += d;
            sizes.push(d);
        }
        Tensor::record("concat", parts, oshape, out, move |args| {
            let mut grads = Vec::with_capacity(sizes.len());
            let mut offset = 0usize;
            for &d in &sizes {
                let mut g = vec![E::zero(); outer * d * inner];
                for o in 0..outer {
                    let src = (o * total + offset) * inner;
                    let dst = o * d * inner;
                    g[dst..dst + d * inner].copy_from_slice(&args.out_grad[src..src + d * inner]);
                }
                grads.push(Some(g));
                offset += d;
            }
            grads
        })
    }

    /// Cyclic roll of the first two axes; content moves down by `dy` and
    /// right by `dx` (negative shifts move up/left).
    pub fn roll2d(&self, dy: isize, dx: isize) -> Result<Tensor<E>> {
        if self.ndim() < 2 {
            return Err(Error::shape("roll2d", format!("{:?}", self.shape())));
        }
        let (h, w) = (self.shape()[0], self.shape()[1]);
        let inner: usize = self.shape()[2..].iter().product();
        let out = roll2d_raw(self.data(), h, w, inner, dy, dx);
        Tensor::record("roll2d", &[self], self.shape().to_vec(), out, move |args| {
            vec![Some(roll2d_raw(args.out_grad, h, w, inner, -dy, -dx))]
        })
    }

    /// Batched matrix product; leading dims broadcast (equal or 1).
    pub fn matmul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        let ashape = self.shape().to_vec();
        let bshape = rhs.shape().to_vec();
        let (out, oshape) = matmul_raw(self.data(), &ashape, rhs.data(), &bshape)?;
        let (ash, bsh) = (ashape.clone(), bshape.clone());
        Tensor::record("matmul", &[self, rhs], oshape, out, move |args| {
            let (a, b, g) = (args.inputs[0], args.inputs[1], args.out_grad);
            let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
            let n = bsh[bsh.len() - 1];
            let ab = &ash[..ash.len() - 2];
            let bb = &bsh[..bsh.len() - 2];
            let obatch = broadcast_batch(ab, bb).expect("checked in forward");
            let mut da = vec![E::zero(); a.len()];
            let mut db = vec![E::zero(); b.len()];
            // dA += g·Bᵀ and dB += Aᵀ·g; transposes are stride swaps, and
            // broadcast operands accumulate in place across batches
            for_each_batch(ab, bb, &obatch, |bi, aoff, boff| {
                let gs = &g[bi * m * n..(bi + 1) * m * n];
                let bs = &b[boff * k * n..(boff + 1) * k * n];
                let asl = &a[aoff * m * k..(aoff + 1) * m * k];
                E::gemm_strided(
                    m, n, k,
                    gs, n as isize, 1,
                    bs, 1, n as isize,
                    &mut da[aoff * m * k..(aoff + 1) * m * k],
                );
                E::gemm_strided(
                    k, m, n,
                    asl, 1, k as isize,
                    gs, n as isize, 1,
                    &mut db[boff * k * n..(boff + 1) * k * n],
                );
            });
            vec![Some(da), Some(db)]
        })
    }

    /// Affine map over the last axis: `x·W + b` with `W: [in, out]`. Fused
    /// into one op: the output starts as broadcast bias rows and the product
    /// accumulates into it with a single gemm.
    pub fn linear(&self, w: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if w.ndim() != 2 || b.ndim() != 1 || b.shape()[0] != w.shape()[1] {
            return Err(Error::shape(
                "linear",
                format!("W {:?}, b {:?}", w.shape(), b.shape()),
            ));
        }
        let in_dim = *self.shape().last().unwrap();
        if in_dim != w.shape()[0] {
            return Err(Error::shape(
                "linear",
                format!("input {:?} vs W {:?}", self.shape(), w.shape()),
            ));
        }
        let out_dim = w.shape()[1];
        let rows = self.numel() / in_dim;
        let mut out = Vec::with_capacity(rows * out_dim);
        for _ in 0..rows {
            out.extend_from_slice(b.data());
        }
        E::gemm(rows, in_dim, out_dim, self.data(), w.data(), &mut out);
        let mut oshape = self.shape().to_vec();
        *oshape.last_mut().unwrap() = out_dim;
        Tensor::record("linear", &[self, w, b], oshape, out, move |args| {
            let (x, wd, g) = (args.inputs[0], args.inputs[1], args.out_grad);
            let mut dx = vec![E::zero(); rows * in_dim];
            E::gemm_strided(rows, out_dim, in_dim, g, out_dim as isize, 1, wd, 1, out_dim as isize, &mut dx);
            let mut dw = vec![E::zero(); in_dim * out_dim];
            E::gemm_strided(in_dim, rows, out_dim, x, 1, in_dim as isize, g, out_dim as isize, 1, &mut dw);
            let mut db = vec![E::zero(); out_dim];
            for grow in g.chunks_exact(out_dim) {
                for (d, v) in db.iter_mut().zip(grow) {
                    *d += *v;
                }
            }
            vec![Some(dx), Some(dw), Some(db)]
        })
    }

    /// Softmax along `axis`: exp(x - max) / sum.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.ndim() {
            return Err(Error::shape("softmax", format!("axis {axis} of {:?}", self.shape())));
        }
        let (outer, dim, inner) = lane_dims(self.shape(), axis);
        let x = self.data();
        let mut out = vec![E::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * dim + j) * inner + i;
                let mut mx = x[at(0)];
                for j in 1..dim {
                    if x[at(j)] > mx {
                        mx = x[at(j)];
                    }
                }
                if !mx.is_finite() {
                    return Err(Error::Contract(
                        "softmax: degenerate slice (no finite maximum)".into(),
                    ));
                }
                let mut sum = E::zero();
                for j in 0..dim {
                    let e = (x[at(j)] - mx).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..dim {
                    out[at(j)] /= sum;
                }
            }
        }
        Tensor::record("softmax", &[self], self.shape().to_vec(), out, move |args| {
            let y = args.output;
            let g = args.out_grad;
            let mut dx = vec![E::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * dim + j) * inner + i;
                    let mut dot = E::zero();
                    for j in 0..dim {
                        dot += g[at(j)] * y[at(j)];
                    }
                    for j in 0..dim {
                        dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Layer normalization over the last axis with biased variance.
    pub fn layer_norm(&self, gamma: &Tensor<E>, beta: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let c = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "0-d input".to_string()))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", self.shape(), gamma.shape(), beta.shape()),
            ));
        }
        let eps_e = E::from_f64(eps);
        let lanes = self.numel() / c;
        let x = self.data();
        let (g, b) = (gamma.data(), beta.data());
        let mut out = vec![E::zero(); x.len()];
        let inv_c = E::one() / E::from_f64(c as f64);
        for l in 0..lanes {
            let row = &x[l * c..(l + 1) * c];
            let mean: E = row.iter().copied().sum::<E>() * inv_c;
            let var: E = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<E>() * inv_c;
            let sinv = E::one() / (var + eps_e).sqrt();
            for j in 0..c {
                out[l * c + j] = (row[j] - mean) * sinv * g[j] + b[j];
            }
        }
        Tensor::record("layer_norm", &[self, gamma, beta], self.shape().to_vec(), out, move |args| {
            let (x, g) = (args.inputs[0], args.inputs[1]);
            let go = args.out_grad;
            let mut dx = vec![E::zero(); x.len()];
            let mut dg = vec![E::zero(); c];
            let mut db = vec![E::zero(); c];
            for l in 0..lanes {
                let row = &x[l * c..(l + 1) * c];
                let grow = &go[l * c..(l + 1) * c];
                let mean: E = row.iter().copied().sum::<E>() * inv_c;
                let var: E = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<E>() * inv_c;
                let sinv = E::one() / (var + eps_e).sqrt();
                let mut mean_h = E::zero();
                let mut mean_hx = E::zero();
                for j in 0..c {
                    let xn = (row[j] - mean) * sinv;
                    let h = grow[j] * g[j];
                    mean_h += h;
                    mean_hx += h * xn;
                    dg[j] += grow[j] * xn;
                    db[j] += grow[j];
                }
                mean_h *= inv_c;
                mean_hx *= inv_c;
                for j in 0..c {
                    let xn = (row[j] - mean) * sinv;
                    let h = grow[j] * g[j];
                    dx[l * c + j] = sinv * (h - mean_h - xn * mean_hx);
                }
            }
            vec![Some(dx), Some(dg), Some(db)]
        })
    }

    /// Exact Gaussian-CDF GELU: x·Φ(x).
    pub fn gelu(&self) -> Result<Tensor<E>> {
        let half = E::from_f64(0.5);
        let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        // keep Φ(x) for backward; erf is the expensive part of the rule
        let cdf: Vec<E> = self
            .data()
            .iter()
            .map(|&x| half * (E::one() + (x * inv_sqrt2).erf()))
            .collect();
        let out = self.data().iter().zip(&cdf).map(|(&x, &c)| x * c).collect();
        Tensor::record("gelu", &[self], self.shape().to_vec(), out, move |args| {
            let inv_sqrt_2pi = E::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
            let dx = args
                .out_grad
                .iter()
                .zip(args.inputs[0].iter().zip(&cdf))
                .map(|(g, (&x, &c))| {
                    let pdf = (-(x * x) * half).exp() * inv_sqrt_2pi;
                    *g * (c + x * pdf)
                })
                .collect();
            vec![Some(dx)]
        })
    }

    /// Correlate a fixed `k x k` kernel over every channel independently,
    /// valid padding. The kernel is a constant: no gradient flows to it.
    pub fn depthwise_conv2d(&self, kernel: &Tensor<E>) -> Result<Tensor<E>> {
        if self.ndim() != 3 {
            return Err(Error::shape("depthwise_conv2d", format!("input {:?}", self.shape())));
        }
        if kernel.ndim() != 2 || kernel.shape()[0] != kernel.shape()[1] {
            return Err(Error::shape("depthwise_conv2d", format!("kernel {:?}", kernel.shape())));
        }
        let (ch, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let k = kernel.shape()[0];
        if k > h || k > w {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("kernel {k}x{k} larger than input {h}x{w}"),
            ));
        }
        let (oh, ow) = (h - k + 1, w - k + 1);
        let x = self.data();
        let ker = kernel.data().to_vec();
        let mut out = vec![E::zero(); ch * oh * ow];
        for c in 0..ch {
            let plane = &x[c * h * w..(c + 1) * h * w];
            let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = E::zero();
                    for u in 0..k {
                        let row = &plane[(i + u) * w + j..(i + u) * w + j + k];
                        let krow = &ker[u * k..(u + 1) * k];
                        for (a, b) in row.iter().zip(krow) {
                            acc += *a * *b;
                        }
                    }
                    dst[i * ow + j] = acc;
                }
            }
        }
        let ker_b = ker.clone();
        Tensor::record(
            "depthwise_conv2d",
            &[self, kernel],
            vec![ch, oh, ow],
            out,
            move |args| {
                let g = args.out_grad;
                let mut dx = vec![E::zero(); ch * h * w];
                for c in 0..ch {
                    let gp = &g[c * oh * ow..(c + 1) * oh * ow];
                    let dp = &mut dx[c * h * w..(c + 1) * h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = gp[i * ow + j];
                            for u in 0..k {
                                for v in 0..k {
                                    dp[(i + u) * w + (j + v)] += gv * ker_b[u * k + v];
                                }
                            }
                        }
                    }
                }
                vec![Some(dx), None]
            },
        )
    }

    /// Select rows of a `[rows, cols]` table; backward scatter-adds, so a row
    /// referenced several times accumulates its gradient.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<E>> {
        if self.ndim() != 2 {
            return Err(Error::shape("gather_rows", format!("table {:?}", self.shape())));
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("index {bad} out of {rows} rows")));
        }
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&self.data()[i * cols..(i + 1) * cols]);
        }
        let idx: Rc<Vec<usize>> = Rc::new(indices.to_vec());
        let oshape = vec![indices.len(), cols];
        Tensor::record("gather_rows", &[self], oshape, out, move |args| {
            let mut dt = vec![E::zero(); rows * cols];
            for (l, &i) in idx.iter().enumerate() {
                for j in 0..cols {
                    dt[i * cols + j] += args.out_grad[l * cols + j];
                }
            }
            vec![Some(dt)]
        })
    }

    /// Clamp values into `[lo, hi]`, detaching from the tape. Metric/output
    /// plumbing only; not differentiable by design.
    pub fn clamped(&self, lo: E, hi: E) -> Tensor<E> {
        let out: Vec<E> = self.data().iter().map(|v| v.min(hi).max(lo)).collect();
        Tensor::from_vec(out, self.shape()).expect("same shape")
    }
}

fn permute_raw<E: Element>(x: &[E], in_shape: &[usize], axes: &[usize]) -> Vec<E> {
    let nd = in_shape.len();
    let in_str = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    // stride in the input for each output axis
    let step: Vec<usize> = axes.iter().map(|&a| in_str[a]).collect();
    // trailing axes that stay in place form contiguous runs we can memcpy
    let mut fixed = nd;
    while fixed > 0 && axes[fixed - 1] == fixed - 1 {
        fixed -= 1;
    }
    let run: usize = in_shape[fixed..].iter().product();
    if run > 1 {
        let mut out = Vec::with_capacity(x.len());
        let mut idx = vec![0usize; fixed];
        let mut off = 0usize;
        for _ in 0..x.len() / run {
            out.extend_from_slice(&x[off..off + run]);
            for i in (0..fixed).rev() {
                idx[i] += 1;
                off += step[i];
                if idx[i] < out_shape[i] {
                    break;
                }
                off -= out_shape[i] * step[i];
                idx[i] = 0;
            }
        }
        return out;
    }
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..x.len() {
        out.push(x[off]);
        for i in (0..nd).rev() {
            idx[i] += 1;
            off += step[i];
            if idx[i] < out_shape[i] {
                break;
            }
            off -= out_shape[i] * step[i];
            idx[i] = 0;
        }
    }
    out
}

fn roll2d_raw<E: Element>(x: &[E], h: usize, w: usize, inner: usize, dy: isize, dx: isize) -> Vec<E> {
    let mut out = vec![E::zero(); x.len()];
    let dy = dy.rem_euclid(h as isize) as usize;
    let dx = dx.rem_euclid(w as isize) as usize;
    for i in 0..h {
        let oi = (i + dy) % h;
        for j in 0..w {
            let oj = (j + dx) % w;
            let src = (i * w + j) * inner;
            let dst = (oi * w + oj) * inner;
            out[dst..dst + inner].copy_from_slice(&x[src..src + inner]);
        }
    }
    out
}
