//! Differentiable kernels. Every op treats its inputs as row-major matrices
//! over the last dimension unless stated otherwise.

use std::ops::Range;
use std::rc::Rc;

use super::tensor::add_into;
use super::{Scalar, Tensor};
use crate::error::{EivenError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn shape_err(msg: String) -> EivenError {
    EivenError::Shape(msg)
}

fn require_matrix<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(shape_err(format!("{what} must be a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `a[m x k] . b[k x n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = require_matrix(a, "matmul lhs")?;
    let (k2, n) = require_matrix(b, "matmul rhs")?;
    if k != k2 {
        return Err(shape_err(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        &a.data(),
        (k, 1),
        &b.data(),
        (n, 1),
        T::zero(),
        &mut out,
        n,
    );
    Ok(Tensor::from_op(
        out,
        vec![m, n],
        "matmul",
        vec![a.clone(), b.clone()],
        move |g, p| {
            let (a, b) = (&p[0], &p[1]);
            if a.tracked() {
                let bd = b.data();
                // dA += dC . B^T
                a.accumulate(|acc| T::gemm(m, n, k, T::one(), g, (n, 1), &bd, (1, n), T::one(), acc, k));
            }
            if b.tracked() {
                let ad = a.data();
                // dB += A^T . dC
                b.accumulate(|acc| T::gemm(k, m, n, T::one(), &ad, (1, k), g, (n, 1), T::one(), acc, n));
            }
        },
    ))
}

/// `x . w + bias` for `x[.. x in]`, `w[in x out]`, `bias[out]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (fan_in, fan_out) = require_matrix(w, "linear weight")?;
    if x.rank() == 0 || x.cols() != fan_in {
        return Err(shape_err(format!(
            "linear input {:?} does not match weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if let Some(b) = bias {
        if b.numel() != fan_out {
            return Err(shape_err(format!(
                "linear bias {:?} does not match weight {:?}",
                b.shape(),
                w.shape()
            )));
        }
    }
    let rows = x.rows();
    let mut out = vec![T::zero(); rows * fan_out];
    if let Some(b) = bias {
        let bd = b.data();
        for row in out.chunks_exact_mut(fan_out) {
            row.copy_from_slice(&bd);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(
        rows,
        fan_in,
        fan_out,
        T::one(),
        &x.data(),
        (fan_in, 1),
        &w.data(),
        (fan_out, 1),
        beta,
        &mut out,
        fan_out,
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = fan_out;
    let mut parents = vec![x.clone(), w.clone()];
    parents.extend(bias.cloned());
    Ok(Tensor::from_op(out, shape, "linear", parents, move |g, p| {
        let (x, w) = (&p[0], &p[1]);
        if x.tracked() {
            let wd = w.data();
            x.accumulate(|acc| {
                T::gemm(
                    rows,
                    fan_out,
                    fan_in,
                    T::one(),
                    g,
                    (fan_out, 1),
                    &wd,
                    (1, fan_out),
                    T::one(),
                    acc,
                    fan_in,
                )
            });
        }
        if w.tracked() {
            let xd = x.data();
            w.accumulate(|acc| {
                T::gemm(
                    fan_in,
                    rows,
                    fan_out,
                    T::one(),
                    &xd,
                    (1, fan_in),
                    g,
                    (fan_out, 1),
                    T::one(),
                    acc,
                    fan_out,
                )
            });
        }
        if let Some(b) = p.get(2) {
            b.accumulate(|acc| {
                for row in g.chunks_exact(fan_out) {
                    add_into(acc, row);
                }
            });
        }
    }))
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    let out: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_op(
        out,
        a.shape().to_vec(),
        "add",
        vec![a.clone(), b.clone()],
        |g, p| {
            for t in p {
                t.accumulate(|acc| add_into(acc, g));
            }
        },
    ))
}

/// Adds `bias[d]` to every row of `x[.. x d]`.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.cols();
    if x.rank() == 0 || bias.numel() != d {
        return Err(shape_err(format!(
            "bias {:?} does not broadcast over {:?}",
            bias.shape(),
            x.shape()
        )));
    }
    let mut out = x.to_vec();
    {
        let bd = bias.data();
        for row in out.chunks_exact_mut(d) {
            add_into(row, &bd);
        }
    }
    Ok(Tensor::from_op(
        out,
        x.shape().to_vec(),
        "add_bias",
        vec![x.clone(), bias.clone()],
        move |g, p| {
            p[0].accumulate(|acc| add_into(acc, g));
            p[1].accumulate(|acc| {
                for row in g.chunks_exact(d) {
                    add_into(acc, row);
                }
            });
        },
    ))
}

/// Elementwise product.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "mul")?;
    let out: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    Ok(Tensor::from_op(
        out,
        a.shape().to_vec(),
        "mul",
        vec![a.clone(), b.clone()],
        |g, p| {
            let (a, b) = (&p[0], &p[1]);
            if a.tracked() {
                let bd = b.data();
                a.accumulate(|acc| {
                    acc.iter_mut()
                        .zip(g)
                        .zip(bd.iter())
                        .for_each(|((s, &g), &y)| *s += g * y)
                });
            }
            if b.tracked() {
                let ad = a.data();
                b.accumulate(|acc| {
                    acc.iter_mut()
                        .zip(g)
                        .zip(ad.iter())
                        .for_each(|((s, &g), &x)| *s += g * x)
                });
            }
        },
    ))
}

pub fn scale<T: Scalar>(x: &Tensor<T>, factor: T) -> Tensor<T> {
    let out = x.data().iter().map(|&v| v * factor).collect();
    Tensor::from_op(out, x.shape().to_vec(), "scale", vec![x.clone()], move |g, p| {
        p[0].accumulate(|acc| acc.iter_mut().zip(g).for_each(|(s, &g)| *s += g * factor));
    })
}

pub fn sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let total = x.data().iter().copied().sum();
    Tensor::from_op(vec![total], vec![], "sum", vec![x.clone()], |g, p| {
        let g0 = g[0];
        p[0].accumulate(|acc| acc.iter_mut().for_each(|s| *s += g0));
    })
}

pub fn mean<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = T::of(x.numel().max(1) as f64);
    scale(&sum(x), T::one() / n)
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Elementwise `z * sigmoid(z)`.
pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let out = x.data().iter().map(|&z| z * sigmoid(z)).collect();
    Tensor::from_op(out, x.shape().to_vec(), "silu", vec![x.clone()], |g, p| {
        let xd = p[0].data();
        p[0].accumulate(|acc| {
            for ((s, &g), &z) in acc.iter_mut().zip(g).zip(xd.iter()) {
                let sg = sigmoid(z);
                *s += g * sg * (T::one() + z * (T::one() - sg));
            }
        });
    })
}

/// Gated unit: splits the last dimension into halves `(a, b)` and returns
/// `silu(a) * b`.
pub fn silu_gate<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let width = x.cols();
    if x.rank() == 0 || width % 2 != 0 {
        return Err(shape_err(format!(
            "silu_gate needs an even last dimension, got shape {:?}",
            x.shape()
        )));
    }
    let half = width / 2;
    let rows = x.rows();
    let mut out = Vec::with_capacity(rows * half);
    {
        let xd = x.data();
        for row in xd.chunks_exact(width) {
            let (a, b) = row.split_at(half);
            out.extend(a.iter().zip(b).map(|(&a, &b)| a * sigmoid(a) * b));
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = half;
    Ok(Tensor::from_op(
        out,
        shape,
        "silu_gate",
        vec![x.clone()],
        move |g, p| {
            let xd = p[0].data();
            p[0].accumulate(|acc| {
                for ((acc_row, x_row), g_row) in acc
                    .chunks_exact_mut(width)
                    .zip(xd.chunks_exact(width))
                    .zip(g.chunks_exact(half))
                {
                    let (da, db) = acc_row.split_at_mut(half);
                    let (a, b) = x_row.split_at(half);
                    for j in 0..half {
                        let sg = sigmoid(a[j]);
                        let act = a[j] * sg;
                        da[j] += g_row[j] * b[j] * sg * (T::one() + a[j] * (T::one() - sg));
                        db[j] += g_row[j] * act;
                    }
                }
            });
        },
    ))
}

/// Per-row standardization followed by `gain * xhat + bias`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.cols();
    if x.rank() == 0 || d == 0 || gain.numel() != d || bias.numel() != d {
        return Err(shape_err(format!(
            "layer_norm input {:?} with gain {:?} and bias {:?}",
            x.shape(),
            gain.shape(),
            bias.shape()
        )));
    }
    let rows = x.rows();
    let eps = T::of(LAYER_NORM_EPS);
    let inv_d = T::one() / T::of(d as f64);
    let mut xhat = vec![T::zero(); rows * d];
    let mut rstd = vec![T::zero(); rows];
    let mut out = vec![T::zero(); rows * d];
    {
        let (xd, gd, bd) = (x.data(), gain.data(), bias.data());
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let s = T::one() / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mu) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        x.shape().to_vec(),
        "layer_norm",
        vec![x.clone(), gain.clone(), bias.clone()],
        move |g, p| {
            let (x, gain, bias) = (&p[0], &p[1], &p[2]);
            if x.tracked() {
                let gd = gain.data();
                x.accumulate(|acc| {
                    let mut dh = vec![T::zero(); d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            dh[j] = gr[j] * gd[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hr[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        let ar = &mut acc[r * d..(r + 1) * d];
                        for j in 0..d {
                            ar[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
            }
            gain.accumulate(|acc| {
                for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        acc[j] += gr[j] * hr[j];
                    }
                }
            });
            bias.accumulate(|acc| {
                for gr in g.chunks_exact(d) {
                    add_into(acc, gr);
                }
            });
        },
    ))
}

/// Multi-head scaled dot-product attention over packed sequences.
///
/// `qkv` is `[N x 3d]` with each row laid out as `[q | k | v]`; `segments`
/// partitions the `N` rows into independent sequences. Positions only attend
/// within their own segment, and additionally only to earlier positions when
/// `causal` is set. Returns `[N x d]`.
pub fn attention<T: Scalar>(
    qkv: &Tensor<T>,
    segments: &[Range<usize>],
    heads: usize,
    causal: bool,
) -> Result<Tensor<T>> {
    let (n, width) = require_matrix(qkv, "attention input")?;
    if heads == 0 || width % (3 * heads) != 0 {
        return Err(shape_err(format!(
            "attention input {:?} cannot be split into q, k, v over {heads} heads",
            qkv.shape()
        )));
    }
    let mut covered = 0;
    for s in segments {
        if s.start != covered || s.end < s.start {
            return Err(shape_err(format!(
                "attention segments must tile rows contiguously, got {segments:?}"
            )));
        }
        covered = s.end;
    }
    if covered != n {
        return Err(shape_err(format!("attention segments cover {covered} of {n} rows")));
    }
    let d = width / 3;
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let segments: Vec<Range<usize>> = segments.to_vec();
    let mut out = vec![T::zero(); n * d];
    // Softmax probabilities per (segment, head), kept for the backward pass.
    let mut probs: Vec<Vec<T>> = Vec::with_capacity(segments.len() * heads);
    {
        let qd = qkv.data();
        for seg in &segments {
            let len = seg.len();
            for h in 0..heads {
                let mut p = vec![T::zero(); len * len];
                if len > 0 {
                    let base = seg.start * width;
                    let q = &qd[base + h * dh..];
                    let k = &qd[base + d + h * dh..];
                    let v = &qd[base + 2 * d + h * dh..];
                    T::gemm(
                        len,
                        dh,
                        len,
                        scale,
                        q,
                        (width, 1),
                        k,
                        (1, width),
                        T::zero(),
                        &mut p,
                        len,
                    );
                    softmax_rows(&mut p, len, causal);
                    let o = &mut out[seg.start * d + h * dh..];
                    T::gemm(len, len, dh, T::one(), &p, (len, 1), v, (width, 1), T::zero(), o, d);
                }
                probs.push(p);
            }
        }
    }
    let probs = Rc::new(probs);
    Ok(Tensor::from_op(
        out,
        vec![n, d],
        "attention",
        vec![qkv.clone()],
        move |g, p| {
            let qkv = &p[0];
            let qd = qkv.data();
            qkv.accumulate(|acc| {
                for (si, seg) in segments.iter().enumerate() {
                    let len = seg.len();
                    if len == 0 {
                        continue;
                    }
                    let base = seg.start * width;
                    let mut dp = vec![T::zero(); len * len];
                    for h in 0..heads {
                        let pm = &probs[si * heads + h];
                        let q = &qd[base + h * dh..];
                        let k = &qd[base + d + h * dh..];
                        let v = &qd[base + 2 * d + h * dh..];
                        let go = &g[seg.start * d + h * dh..];
                        // dP = dO . V^T
                        T::gemm(
                            len,
                            dh,
                            len,
                            T::one(),
                            go,
                            (d, 1),
                            v,
                            (1, width),
                            T::zero(),
                            &mut dp,
                            len,
                        );
                        // dV += P^T . dO
                        T::gemm(
                            len,
                            len,
                            dh,
                            T::one(),
                            pm,
                            (1, len),
                            go,
                            (d, 1),
                            T::one(),
                            &mut acc[base + 2 * d + h * dh..],
                            width,
                        );
                        // dS = P * (dP - rowsum(dP * P)), scaled.
                        for r in 0..len {
                            let pr = &pm[r * len..(r + 1) * len];
                            let dr = &mut dp[r * len..(r + 1) * len];
                            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                            for (x, &pv) in dr.iter_mut().zip(pr) {
                                *x = pv * (*x - dot) * scale;
                            }
                        }
                        // dQ += dS . K ; dK += dS^T . Q
                        T::gemm(
                            len,
                            len,
                            dh,
                            T::one(),
                            &dp,
                            (len, 1),
                            k,
                            (width, 1),
                            T::one(),
                            &mut acc[base + h * dh..],
                            width,
                        );
                        T::gemm(
                            len,
                            len,
                            dh,
                            T::one(),
                            &dp,
                            (1, len),
                            q,
                            (width, 1),
                            T::one(),
                            &mut acc[base + d + h * dh..],
                            width,
                        );
                    }
                }
            });
        },
    ))
}

fn softmax_rows<T: Scalar>(s: &mut [T], len: usize, causal: bool) {
    for r in 0..len {
        let row = &mut s[r * len..(r + 1) * len];
        let visible = if causal { r + 1 } else { len };
        let max = row[..visible].iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for x in row[..visible].iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row[..visible].iter_mut() {
            *x /= total;
        }
        for x in row[visible..].iter_mut() {
            *x = T::zero();
        }
    }
}

/// Block-diagonal linear map: `x[.. x r]` is split into `groups` slices of
/// width `r / groups`, each mapped by its own `w[g]` of shape
/// `[r/groups x d/groups]`, and the results are concatenated to `[.. x d]`.
pub fn block_diag_linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if w.rank() != 3 {
        return Err(shape_err(format!(
            "block-diagonal weight must be [groups x in x out], got {:?}",
            w.shape()
        )));
    }
    let (groups, gin, gout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let r = x.cols();
    if x.rank() == 0 || r != groups * gin {
        return Err(shape_err(format!(
            "block-diagonal input {:?} does not match weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let rows = x.rows();
    let d = groups * gout;
    let mut out = vec![T::zero(); rows * d];
    {
        let (xd, wd) = (x.data(), w.data());
        for gi in 0..groups {
            T::gemm(
                rows,
                gin,
                gout,
                T::one(),
                &xd[gi * gin..],
                (r, 1),
                &wd[gi * gin * gout..],
                (gout, 1),
                T::zero(),
                &mut out[gi * gout..],
                d,
            );
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = d;
    Ok(Tensor::from_op(
        out,
        shape,
        "block_diag_linear",
        vec![x.clone(), w.clone()],
        move |g, p| {
            let (x, w) = (&p[0], &p[1]);
            if x.tracked() {
                let wd = w.data();
                x.accumulate(|acc| {
                    for gi in 0..groups {
                        T::gemm(
                            rows,
                            gout,
                            gin,
                            T::one(),
                            &g[gi * gout..],
                            (d, 1),
                            &wd[gi * gin * gout..],
                            (1, gout),
                            T::one(),
                            &mut acc[gi * gin..],
                            r,
                        );
                    }
                });
            }
            if w.tracked() {
                let xd = x.data();
                w.accumulate(|acc| {
                    for gi in 0..groups {
                        T::gemm(
                            gin,
                            rows,
                            gout,
                            T::one(),
                            &xd[gi * gin..],
                            (1, r),
                            &g[gi * gout..],
                            (d, 1),
                            T::one(),
                            &mut acc[gi * gin * gout..],
                            gout,
                        );
                    }
                });
            }
        },
    ))
}

/// Copies the selected rows of a matrix, in the given order.
pub fn select_rows<T: Scalar>(x: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let (n, d) = require_matrix(x, "select_rows input")?;
    if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
        return Err(shape_err(format!("row {bad} out of range for {:?}", x.shape())));
    }
    let mut out = Vec::with_capacity(rows.len() * d);
    {
        let xd = x.data();
        for &r in rows {
            out.extend_from_slice(&xd[r * d..(r + 1) * d]);
        }
    }
    let rows = rows.to_vec();
    Ok(Tensor::from_op(
        out,
        vec![rows.len(), d],
        "select_rows",
        vec![x.clone()],
        move |g, p| {
            p[0].accumulate(|acc| {
                for (i, &r) in rows.iter().enumerate() {
                    add_into(&mut acc[r * d..(r + 1) * d], &g[i * d..(i + 1) * d]);
                }
            });
        },
    ))
}

/// Adds the rows of each `part` into `base` at the listed row indices.
pub fn scatter_add_rows<T: Scalar>(base: &Tensor<T>, parts: &[(Tensor<T>, Vec<usize>)]) -> Result<Tensor<T>> {
    let (n, d) = require_matrix(base, "scatter base")?;
    let mut out = base.to_vec();
    for (part, idx) in parts {
        if part.rank() != 2 || part.cols() != d || part.rows() != idx.len() {
            return Err(shape_err(format!(
                "scatter part {:?} does not fit {} target rows of width {d}",
                part.shape(),
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&r| r >= n) {
            return Err(shape_err(format!(
                "scatter row {bad} out of range for {:?}",
                base.shape()
            )));
        }
        let pd = part.data();
        for (i, &r) in idx.iter().enumerate() {
            add_into(&mut out[r * d..(r + 1) * d], &pd[i * d..(i + 1) * d]);
        }
    }
    let indices: Vec<Vec<usize>> = parts.iter().map(|(_, idx)| idx.clone()).collect();
    let mut parents = vec![base.clone()];
    parents.extend(parts.iter().map(|(t, _)| t.clone()));
    Ok(Tensor::from_op(
        out,
        vec![n, d],
        "scatter_add_rows",
        parents,
        move |g, p| {
            p[0].accumulate(|acc| add_into(acc, g));
            for (part, idx) in p[1..].iter().zip(&indices) {
                part.accumulate(|acc| {
                    for (i, &r) in idx.iter().enumerate() {
                        add_into(&mut acc[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
        },
    ))
}

/// `sum_i weight_i * -log softmax(logits_i)[target_i]` over rows with a
/// nonzero weight. Rows with zero weight contribute neither loss nor gradient.
pub fn cross_entropy_weighted<T: Scalar>(logits: &Tensor<T>, targets: &[usize], weights: &[T]) -> Result<Tensor<T>> {
    let (rows, vocab) = require_matrix(logits, "cross-entropy logits")?;
    if targets.len() != rows || weights.len() != rows {
        return Err(shape_err(format!(
            "cross-entropy over {rows} rows given {} targets and {} weights",
            targets.len(),
            weights.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(shape_err(format!("target {bad} outside vocabulary of {vocab}")));
    }
    if weights.iter().all(|w| w.is_zero()) {
        return Err(EivenError::DegenerateLoss);
    }
    let mut total = T::zero();
    let mut probs: Vec<(usize, Vec<T>)> = Vec::new();
    {
        let ld = logits.data();
        for r in 0..rows {
            if weights[r].is_zero() {
                continue;
            }
            let row = &ld[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut p: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: T = p.iter().copied().sum();
            total += weights[r] * (z.ln() - (row[targets[r]] - max));
            p.iter_mut().for_each(|v| *v /= z);
            probs.push((r, p));
        }
    }
    let targets = targets.to_vec();
    let weights = weights.to_vec();
    Ok(Tensor::from_op(
        vec![total],
        vec![],
        "cross_entropy",
        vec![logits.clone()],
        move |g, p| {
            let g0 = g[0];
            p[0].accumulate(|acc| {
                for (r, pr) in &probs {
                    let w = weights[*r] * g0;
                    let ar = &mut acc[r * vocab..(r + 1) * vocab];
                    for (a, &pv) in ar.iter_mut().zip(pr) {
                        *a += w * pv;
                    }
                    ar[targets[*r]] -= w;
                }
            });
        },
    ))
}

/// Mean token negative log-likelihood over the positions where `mask` is set.
pub fn cross_entropy_masked<T: Scalar>(logits: &Tensor<T>, targets: &[usize], mask: &[bool]) -> Result<Tensor<T>> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(EivenError::DegenerateLoss);
    }
    let w = T::one() / T::of(count as f64);
    let weights: Vec<T> = mask.iter().map(|&m| if m { w } else { T::zero() }).collect();
    cross_entropy_weighted(logits, targets, &weights)
}
