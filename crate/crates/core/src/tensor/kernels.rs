//! Slice-level numeric kernels, forward and adjoint. Shapes are validated by
//! the callers in `ops`; these functions only index.

use super::{numel, strides, Float};
use crate::error::{Error, Result};

/// Strided `c (+)= a·b` with bounds validation before the unchecked call.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Float>(
    (m, k, n): (usize, usize, usize),
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    c: &mut [T],
    (rsc, csc): (usize, usize),
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last =
        |rows: usize, cols: usize, rs: usize, cs: usize| (rows.saturating_sub(1)) * rs + (cols.saturating_sub(1)) * cs;
    assert!(k == 0 || last(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || last(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c[i * rsc + j * csc] = T::zero();
                }
            }
        }
        return;
    }
    // SAFETY: the three asserts above bound every addressed element.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

/// NumPy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(format!("shapes {a:?} and {b:?} are not broadcastable"))),
        };
    }
    Ok(out)
}

/// Maps a flat output index to the flat index of a broadcast input.
pub(crate) enum Bcast {
    Same,
    /// Input equals a trailing block of the output, repeated.
    Cycle(usize),
    Map(Vec<usize>),
}

impl Bcast {
    pub(crate) fn new(out: &[usize], input: &[usize]) -> Self {
        if out == input {
            return Bcast::Same;
        }
        let n_in = numel(input);
        let rank = out.len();
        let padded: Vec<usize> = std::iter::repeat_n(1, rank - input.len())
            .chain(input.iter().copied())
            .collect();
        // Cycle when every broadcast axis precedes every kept axis.
        let first_kept = padded.iter().position(|&d| d != 1).unwrap_or(rank);
        if padded[first_kept..] == out[first_kept..] {
            return Bcast::Cycle(n_in.max(1));
        }
        let in_strides = strides(&padded);
        let eff: Vec<usize> = (0..rank)
            .map(|i| if padded[i] == 1 { 0 } else { in_strides[i] })
            .collect();
        let total = numel(out);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..total {
            map.push(off);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                off += eff[ax];
                if idx[ax] < out[ax] {
                    break;
                }
                off -= eff[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Bcast::Map(map)
    }

    #[inline]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cycle(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }
}

pub(crate) fn permute<T: Float>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        out.extend_from_slice(data);
        return out;
    }
    let inner = out_shape[rank - 1];
    let inner_step = step[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let mut done = 0;
    while done < total {
        let mut o = off;
        for _ in 0..inner {
            out.push(data[o]);
            o += inner_step;
        }
        done += inner;
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `(outer, len, inner)` decomposition around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

pub(crate) fn softmax<T: Float>(x: &[T], (outer, len, inner): (usize, usize, usize)) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                sum += e;
            }
            let inv = T::one() / sum;
            for j in 0..len {
                y[at(j)] *= inv;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<T: Float>(y: &[T], g: &[T], (outer, len, inner): (usize, usize, usize)) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot += g[at(j)] * y[at(j)];
            }
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    dx
}

pub(crate) struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm<T: Float>(x: &[T], d: usize, gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, LayerNormCache<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::one() / T::lit(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = gamma[j] * h + beta[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward<T: Float>(
    g: &[T],
    d: usize,
    gamma: &[T],
    cache: &LayerNormCache<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = g.len() / d;
    let mut dx = vec![T::zero(); g.len()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let inv_d = T::one() / T::lit(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let gr = &g[r * d..(r + 1) * d];
        let hr = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dh = T::zero();
        let mut mean_dh_h = T::zero();
        for j in 0..d {
            dgamma[j] += gr[j] * hr[j];
            dbeta[j] += gr[j];
            dxhat[j] = gr[j] * gamma[j];
            mean_dh += dxhat[j];
            mean_dh_h += dxhat[j] * hr[j];
        }
        mean_dh *= inv_d;
        mean_dh_h *= inv_d;
        let rs = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] = rs * (dxhat[j] - mean_dh - hr[j] * mean_dh_h);
        }
    }
    (dx, dgamma, dbeta)
}

/// Standard normal CDF `Φ(x)`.
#[inline]
pub(crate) fn normal_cdf<T: Float>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// `Φ(x) + x·φ(x)` given `cdf = Φ(x)`.
#[inline]
pub(crate) fn gelu_grad_from_cdf<T: Float>(x: T, cdf: T) -> T {
    let pdf = (T::lit(-0.5) * x * x).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Half-open bin `[floor(i·n/m), ceil((i+1)·n/m))` of adaptive pooling.
#[inline]
pub fn pool_bin(i: usize, n: usize, m: usize) -> (usize, usize) {
    (i * n / m, ((i + 1) * n).div_ceil(m))
}

pub(crate) fn adaptive_pool<T: Float>(x: &[T], batch: usize, n: usize, d: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * d];
    for b in 0..batch {
        for i in 0..m {
            let (s, e) = pool_bin(i, n, m);
            let inv = T::one() / T::lit((e - s) as f64);
            let dst = &mut out[(b * m + i) * d..(b * m + i + 1) * d];
            for t in s..e {
                let src = &x[(b * n + t) * d..(b * n + t + 1) * d];
                dst.iter_mut().zip(src).for_each(|(o, &v)| *o += v);
            }
            dst.iter_mut().for_each(|o| *o *= inv);
        }
    }
    out
}

pub(crate) fn adaptive_pool_backward<T: Float>(g: &[T], batch: usize, n: usize, d: usize, m: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); batch * n * d];
    for b in 0..batch {
        for i in 0..m {
            let (s, e) = pool_bin(i, n, m);
            let inv = T::one() / T::lit((e - s) as f64);
            let src = &g[(b * m + i) * d..(b * m + i + 1) * d];
            for t in s..e {
                let dst = &mut dx[(b * n + t) * d..(b * n + t + 1) * d];
                dst.iter_mut().zip(src).for_each(|(o, &v)| *o += v * inv);
            }
        }
    }
    dx
}

/// Geometry shared by strided and transposed sequence convolutions.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    /// Input sequence length.
    pub n: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub(crate) fn conv_len(&self) -> usize {
        (self.n - self.k) / self.stride + 1
    }

    pub(crate) fn conv_t_len(&self) -> usize {
        (self.n - 1) * self.stride + self.k
    }
}

fn add_bias<T: Float>(out: &mut [T], bias: &[T]) {
    let d = bias.len();
    out.chunks_exact_mut(d)
        .for_each(|row| row.iter_mut().zip(bias).for_each(|(o, &b)| *o += b));
}

fn bias_grad<T: Float>(g: &[T], d: usize) -> Vec<T> {
    let mut db = vec![T::zero(); d];
    g.chunks_exact(d)
        .for_each(|row| db.iter_mut().zip(row).for_each(|(o, &v)| *o += v));
    db
}

pub(crate) fn conv_seq<T: Float>(x: &[T], kernel: &[T], bias: &[T], geo: ConvGeom) -> Vec<T> {
    let ConvGeom {
        batch,
        n,
        d_in,
        d_out,
        k,
        stride,
    } = geo;
    let len = geo.conv_len();
    let mut out = vec![T::zero(); batch * len * d_out];
    for b in 0..batch {
        let xb = &x[b * n * d_in..(b + 1) * n * d_in];
        let ob = &mut out[b * len * d_out..(b + 1) * len * d_out];
        for t in 0..k {
            gemm(
                (len, d_in, d_out),
                &xb[t * d_in..],
                (stride * d_in, 1),
                &kernel[t * d_in * d_out..(t + 1) * d_in * d_out],
                (d_out, 1),
                ob,
                (d_out, 1),
                true,
            );
        }
    }
    add_bias(&mut out, bias);
    out
}

pub(crate) fn conv_seq_backward<T: Float>(g: &[T], x: &[T], kernel: &[T], geo: ConvGeom) -> (Vec<T>, Vec<T>, Vec<T>) {
    let ConvGeom {
        batch,
        n,
        d_in,
        d_out,
        k,
        stride,
    } = geo;
    let len = geo.conv_len();
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    for b in 0..batch {
        let xb = &x[b * n * d_in..(b + 1) * n * d_in];
        let gb = &g[b * len * d_out..(b + 1) * len * d_out];
        let dxb = &mut dx[b * n * d_in..(b + 1) * n * d_in];
        for t in 0..k {
            let kt = &kernel[t * d_in * d_out..(t + 1) * d_in * d_out];
            // dx[i·r+t] += g[i] · K[t]ᵀ
            gemm(
                (len, d_out, d_in),
                gb,
                (d_out, 1),
                kt,
                (1, d_out),
                &mut dxb[t * d_in..],
                (stride * d_in, 1),
                true,
            );
            // dK[t] += X_tᵀ · g
            gemm(
                (d_in, len, d_out),
                &xb[t * d_in..],
                (1, stride * d_in),
                gb,
                (d_out, 1),
                &mut dk[t * d_in * d_out..(t + 1) * d_in * d_out],
                (d_out, 1),
                true,
            );
        }
    }
    (dx, dk, bias_grad(g, d_out))
}

pub(crate) fn conv_t_seq<T: Float>(x: &[T], kernel: &[T], bias: &[T], geo: ConvGeom) -> Vec<T> {
    let ConvGeom {
        batch,
        n,
        d_in,
        d_out,
        k,
        stride,
    } = geo;
    let len = geo.conv_t_len();
    let mut out = vec![T::zero(); batch * len * d_out];
    for b in 0..batch {
        let xb = &x[b * n * d_in..(b + 1) * n * d_in];
        let ob = &mut out[b * len * d_out..(b + 1) * len * d_out];
        for t in 0..k {
            // out[i·r+t] += x[i] · K[t]
            gemm(
                (n, d_in, d_out),
                xb,
                (d_in, 1),
                &kernel[t * d_in * d_out..(t + 1) * d_in * d_out],
                (d_out, 1),
                &mut ob[t * d_out..],
                (stride * d_out, 1),
                true,
            );
        }
    }
    add_bias(&mut out, bias);
    out
}

pub(crate) fn conv_t_seq_backward<T: Float>(g: &[T], x: &[T], kernel: &[T], geo: ConvGeom) -> (Vec<T>, Vec<T>, Vec<T>) {
    let ConvGeom {
        batch,
        n,
        d_in,
        d_out,
        k,
        stride,
    } = geo;
    let len = geo.conv_t_len();
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    for b in 0..batch {
        let xb = &x[b * n * d_in..(b + 1) * n * d_in];
        let gb = &g[b * len * d_out..(b + 1) * len * d_out];
        let dxb = &mut dx[b * n * d_in..(b + 1) * n * d_in];
        for t in 0..k {
            let kt = &kernel[t * d_in * d_out..(t + 1) * d_in * d_out];
            // dx[i] += g[i·r+t] · K[t]ᵀ
            gemm(
                (n, d_out, d_in),
                &gb[t * d_out..],
                (stride * d_out, 1),
                kt,
                (1, d_out),
                dxb,
                (d_in, 1),
                true,
            );
            // dK[t] += Xᵀ · g_t
            gemm(
                (d_in, n, d_out),
                xb,
                (1, d_in),
                &gb[t * d_out..],
                (stride * d_out, 1),
                &mut dk[t * d_in * d_out..(t + 1) * d_in * d_out],
                (d_out, 1),
                true,
            );
        }
    }
    (dx, dk, bias_grad(g, d_out))
}

pub(crate) fn repeat_seq<T: Float>(x: &[T], batch: usize, n: usize, d: usize, factor: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len() * factor);
    for b in 0..batch {
        for i in 0..n {
            let row = &x[(b * n + i) * d..(b * n + i + 1) * d];
            for _ in 0..factor {
                out.extend_from_slice(row);
            }
        }
    }
    out
}

pub(crate) fn repeat_seq_backward<T: Float>(g: &[T], batch: usize, n: usize, d: usize, factor: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); batch * n * d];
    for b in 0..batch {
        for i in 0..n {
            let dst = &mut dx[(b * n + i) * d..(b * n + i + 1) * d];
            for j in 0..factor {
                let src = &g[((b * n + i) * factor + j) * d..((b * n + i) * factor + j + 1) * d];
                dst.iter_mut().zip(src).for_each(|(o, &v)| *o += v);
            }
        }
    }
    dx
}

pub(crate) fn sum_axis<T: Float>(x: &[T], (outer, len, inner): (usize, usize, usize)) -> Vec<T> {
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
            out[o * inner..(o + 1) * inner]
                .iter_mut()
                .zip(src)
                .for_each(|(a, &v)| *a += v);
        }
    }
    out
}

pub(crate) fn sum_axis_backward<T: Float>(g: &[T], (outer, len, inner): (usize, usize, usize)) -> Vec<T> {
    let mut dx = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        for _ in 0..len {
            dx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
        }
    }
    dx
}
