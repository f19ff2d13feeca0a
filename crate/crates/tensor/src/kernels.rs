//! Forward kernels on plain tensors. The tape records these and supplies the
//! matching vector-Jacobian products.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{strides_of, Tensor};

/// Batch layout of a (possibly broadcast) batched matrix product.
#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    pub a_offsets: Vec<usize>,
    pub b_offsets: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatmulPlan> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != kb {
        return Err(mismatch());
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let rank = ab.len().max(bb.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(ab), pad(bb));
    let mut batch = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || y == 1 {
            batch.push(x);
        } else if x == 1 {
            batch.push(y);
        } else {
            return Err(mismatch());
        }
    }
    let (sa, sb) = (strides_of(&pa), strides_of(&pb));
    let total: usize = batch.iter().product();
    let mut a_offsets = Vec::with_capacity(total);
    let mut b_offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let mut oa = 0;
        let mut ob = 0;
        for ax in 0..rank {
            if pa[ax] != 1 {
                oa += idx[ax] * sa[ax];
            }
            if pb[ax] != 1 {
                ob += idx[ax] * sb[ax];
            }
        }
        a_offsets.push(oa * m * k);
        b_offsets.push(ob * k * n);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < batch[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    let mut out_shape = batch;
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulPlan {
        out_shape,
        a_offsets,
        b_offsets,
        m,
        k,
        n,
    })
}

pub(crate) fn matmul_with_plan<T: Element>(
    plan: &MatmulPlan,
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_b: bool,
) -> Tensor<T> {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![T::zero(); plan.a_offsets.len() * m * n];
    for (i, (&oa, &ob)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
        T::gemm(
            m,
            k,
            n,
            &a.data()[oa..oa + m * k],
            false,
            &b.data()[ob..ob + k * n],
            trans_b,
            &mut out[i * m * n..(i + 1) * m * n],
            false,
        );
    }
    Tensor::from_parts(plan.out_shape.clone(), out)
}

/// Batched matrix product `a[..., M, K] · b[..., K, N]` with broadcast leading dims.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let plan = matmul_plan(a.shape(), b.shape(), false)?;
    Ok(matmul_with_plan(&plan, a, b, false))
}

/// `a[..., M, K] · b[..., N, K]ᵀ`.
pub fn matmul_nt<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let plan = matmul_plan(a.shape(), b.shape(), true)?;
    Ok(matmul_with_plan(&plan, a, b, true))
}

pub(crate) fn linear_dims(x: &[usize], w: &[usize]) -> Result<(usize, usize, usize)> {
    if x.is_empty() || w.len() != 2 || x[x.len() - 1] != w[0] {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        });
    }
    let cin = w[0];
    let rows = x.iter().product::<usize>() / cin;
    Ok((rows, cin, w[1]))
}

/// Position-wise map `x[..., C_in] · w[C_in, C_out]` (no bias).
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cin, cout) = linear_dims(x.shape(), w.shape())?;
    let mut out = vec![T::zero(); rows * cout];
    T::gemm(rows, cin, cout, x.data(), false, w.data(), false, &mut out, false);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Ok(Tensor::from_parts(shape, out))
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::AxisOutOfRange { op, axis, rank });
    }
    Ok(())
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis("softmax", axis, x.rank())?;
    if !x.is_finite() {
        return Err(TensorError::NonFinite { op: "softmax" });
    }
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(src[base + j * inner]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (src[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                total += e;
            }
            let inv = T::one() / total;
            for j in 0..len {
                out[base + j * inner] *= inv;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn check_perm(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(TensorError::contract("permute", format!("{perm:?} is not a permutation of rank {rank}")));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(TensorError::contract("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    check_perm(perm, x.rank())?;
    let in_shape = x.shape();
    let in_strides = x.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let rank = perm.len();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());

    // Copy contiguous runs when the last axis stays put.
    let (chunk, outer_rank) = if rank > 0 && perm[rank - 1] == rank - 1 {
        (in_shape[rank - 1], rank - 1)
    } else {
        (1, rank)
    };
    let step: Vec<usize> = perm[..outer_rank].iter().map(|&p| in_strides[p]).collect();
    let dims = &out_shape[..outer_rank];
    let total: usize = dims.iter().product();
    let mut idx = vec![0usize; outer_rank];
    let mut off = 0usize;
    for _ in 0..total {
        out.extend_from_slice(&src[off..off + chunk]);
        for ax in (0..outer_rank).rev() {
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < dims[ax] {
                break;
            }
            off -= step[ax] * dims[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Slice `[start, start + len)` along `axis`.
pub fn narrow<T: Element>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    check_axis("narrow", axis, x.rank())?;
    let (outer, full, inner) = split_axis(x.shape(), axis);
    if len == 0 || start + len > full {
        return Err(TensorError::contract(
            "narrow",
            format!("range {start}..{} outside axis of length {full}", start + len),
        ));
    }
    let src = x.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&src[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

/// Zero padding along `axis`.
pub fn pad<T: Element>(x: &Tensor<T>, axis: usize, before: usize, after: usize) -> Result<Tensor<T>> {
    check_axis("pad", axis, x.rank())?;
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let new_len = len + before + after;
    let src = x.data();
    let mut out = vec![T::zero(); outer * new_len * inner];
    for o in 0..outer {
        let dst = (o * new_len + before) * inner;
        out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = new_len;
    Ok(Tensor::from_parts(shape, out))
}

/// Concatenation along `axis`; all other dims must agree.
pub fn concat<T: Element>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| TensorError::contract("concat", "no inputs"))?;
    check_axis("concat", axis, first.rank())?;
    for x in &xs[1..] {
        let ok = x.rank() == first.rank()
            && x
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let total_len: usize = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total_len * inner);
    for o in 0..outer {
        for x in xs {
            let l = x.shape()[axis] * inner;
            out.extend_from_slice(&x.data()[o * l..(o + 1) * l]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_len;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn expect_rank4(op: &'static str, t: &Tensor<impl Element>) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, h, w, c] => Ok([b, h, w, c]),
        _ => Err(TensorError::contract(op, format!("expected [B, H, W, C], got {:?}", t.shape()))),
    }
}

/// Nearest-neighbour upsampling of `[B, H, W, C]` by integer factors.
pub fn upsample<T: Element>(x: &Tensor<T>, fh: usize, fw: usize) -> Result<Tensor<T>> {
    let [b, h, w, c] = expect_rank4("upsample", x)?;
    let (ho, wo) = (h * fh, w * fw);
    let src = x.data();
    let mut out = Vec::with_capacity(b * ho * wo * c);
    for bi in 0..b {
        for y in 0..ho {
            for xo in 0..wo {
                let s = ((bi * h + y / fh) * w + xo / fw) * c;
                out.extend_from_slice(&src[s..s + c]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, ho, wo, c], out))
}

/// Non-overlapping average pooling of `[B, H, W, C]` by integer factors.
pub fn avg_pool<T: Element>(x: &Tensor<T>, fh: usize, fw: usize) -> Result<Tensor<T>> {
    let [b, h, w, c] = expect_rank4("avg_pool", x)?;
    if h % fh != 0 {
        return Err(TensorError::NotDivisible { op: "avg_pool", what: "H", size: h, by: fh });
    }
    if w % fw != 0 {
        return Err(TensorError::NotDivisible { op: "avg_pool", what: "W", size: w, by: fw });
    }
    let (ho, wo) = (h / fh, w / fw);
    let inv = T::one() / T::of((fh * fw) as f64);
    let src = x.data();
    let mut out = vec![T::zero(); b * ho * wo * c];
    for bi in 0..b {
        for y in 0..h {
            for xi in 0..w {
                let s = ((bi * h + y) * w + xi) * c;
                let d = ((bi * ho + y / fh) * wo + xi / fw) * c;
                for ch in 0..c {
                    out[d + ch] += src[s + ch];
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor::from_parts(vec![b, ho, wo, c], out))
}

/// Per-axis factors `(up, down)` taking `from` to `to`.
pub(crate) fn resample_factors(from: usize, to: usize) -> Result<(usize, usize)> {
    if to >= from && to.is_multiple_of(from) {
        Ok((to / from, 1))
    } else if to < from && from.is_multiple_of(to) {
        Ok((1, from / to))
    } else {
        Err(TensorError::UnsupportedRatio { from, to })
    }
}

/// Integer-ratio resampling of `[B, H, W, C]`: nearest-neighbour up, average-pool down.
pub fn resample<T: Element>(x: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    let [_, h, w, _] = expect_rank4("resample", x)?;
    let (uh, dh) = resample_factors(h, target.0)?;
    let (uw, dw) = resample_factors(w, target.1)?;
    let up = upsample(x, uh, uw)?;
    avg_pool(&up, dh, dw)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
}

pub(crate) fn conv_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    let err = || TensorError::ShapeMismatch {
        op: "conv2d",
        lhs: x.to_vec(),
        rhs: w.to_vec(),
    };
    let [b, h, wd, cin] = <[usize; 4]>::try_from(x).map_err(|_| err())?;
    let [kh, kw, wcin, cout] = <[usize; 4]>::try_from(w).map_err(|_| err())?;
    if cin != wcin || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(err());
    }
    Ok(ConvGeom {
        b,
        h,
        w: wd,
        cin,
        kh,
        kw,
        cout,
        ho: (h + 2 * pad - kh) / stride + 1,
        wo: (wd + 2 * pad - kw) / stride + 1,
        stride,
        pad,
    })
}

pub(crate) fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.kh * g.kw * g.cin;
    let mut cols = vec![T::zero(); g.b * g.ho * g.wo * patch];
    for bi in 0..g.b {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((bi * g.ho + oy) * g.wo + ox) * patch;
                for u in 0..g.kh {
                    let iy = (oy * g.stride + u) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for v in 0..g.kw {
                        let ix = (ox * g.stride + v) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let s = ((bi * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let d = row + (u * g.kw + v) * g.cin;
                        cols[d..d + g.cin].copy_from_slice(&x[s..s + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im<T: Element>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.kh * g.kw * g.cin;
    let mut x = vec![T::zero(); g.b * g.h * g.w * g.cin];
    for bi in 0..g.b {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((bi * g.ho + oy) * g.wo + ox) * patch;
                for u in 0..g.kh {
                    let iy = (oy * g.stride + u) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for v in 0..g.kw {
                        let ix = (ox * g.stride + v) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let d = ((bi * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let s = row + (u * g.kw + v) * g.cin;
                        for ch in 0..g.cin {
                            x[d + ch] += cols[s + ch];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-D convolution (cross-correlation) of `x[B, H, W, C_in]` with `w[kh, kw, C_in, C_out]`,
/// zero padding `pad` on every side.
pub fn conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = conv_geom(x.shape(), w.shape(), stride, pad)?;
    let cols = im2col(x.data(), &g);
    let rows = g.b * g.ho * g.wo;
    let mut out = vec![T::zero(); rows * g.cout];
    T::gemm(rows, g.kh * g.kw * g.cin, g.cout, &cols, false, w.data(), false, &mut out, false);
    Ok(Tensor::from_parts(vec![g.b, g.ho, g.wo, g.cout], out))
}

pub(crate) fn xcorr_dims(x: &[usize], z: &[usize]) -> Result<([usize; 4], [usize; 4])> {
    let err = || TensorError::ShapeMismatch {
        op: "depthwise_xcorr",
        lhs: x.to_vec(),
        rhs: z.to_vec(),
    };
    let xs = <[usize; 4]>::try_from(x).map_err(|_| err())?;
    let zs = <[usize; 4]>::try_from(z).map_err(|_| err())?;
    if xs[0] != zs[0] || xs[3] != zs[3] || zs[1] > xs[1] || zs[2] > xs[2] {
        return Err(err());
    }
    Ok((xs, zs))
}

/// Per-channel valid cross-correlation of `x[B, Hx, Wx, C]` with kernel `z[B, Hz, Wz, C]`.
pub fn depthwise_xcorr<T: Element>(x: &Tensor<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    let ([b, hx, wx, c], [_, hz, wz, _]) = xcorr_dims(x.shape(), z.shape())?;
    let (ho, wo) = (hx - hz + 1, wx - wz + 1);
    let (xd, zd) = (x.data(), z.data());
    let mut out = vec![T::zero(); b * ho * wo * c];
    for bi in 0..b {
        for i in 0..ho {
            for j in 0..wo {
                let o = ((bi * ho + i) * wo + j) * c;
                for u in 0..hz {
                    for v in 0..wz {
                        let xs = ((bi * hx + i + u) * wx + j + v) * c;
                        let zs = ((bi * hz + u) * wz + v) * c;
                        for ch in 0..c {
                            out[o + ch] += xd[xs + ch] * zd[zs + ch];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, ho, wo, c], out))
}

/// Layer normalization over the last axis. Returns `(y, x_hat, 1/σ)`.
pub(crate) fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let c = *x.shape().last().ok_or_else(|| TensorError::contract("layer_norm", "rank-0 input"))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let rows = x.numel() / c;
    let src = x.data();
    let mut y = vec![T::zero(); src.len()];
    let mut xhat = vec![T::zero(); src.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_c = T::one() / T::of(c as f64);
    for r in 0..rows {
        let row = &src[r * c..(r + 1) * c];
        let mean = row.iter().copied().sum::<T>() * inv_c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let rs = T::one() / (var + T::of(eps)).sqrt();
        rstd[r] = rs;
        for i in 0..c {
            let h = (row[i] - mean) * rs;
            xhat[r * c + i] = h;
            y[r * c + i] = h * gamma.data()[i] + beta.data()[i];
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), y), xhat, rstd))
}
