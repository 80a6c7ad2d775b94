use std::rc::Rc;

use rand::Rng;

use super::kernels::{self, Bcast, ConvGeom};
use super::tape::Op;
use super::{numel, Float, Tensor, Var};
use crate::error::{Error, Result};

impl<'t, T: Float> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node_shape(self.id)
    }

    pub fn data(&self) -> Rc<Vec<T>> {
        self.tape.node_data(self.id)
    }

    pub fn value(&self) -> Tensor<T> {
        Tensor::new(self.shape(), self.data().as_ref().clone()).expect("tape node is consistent")
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> T {
        self.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.node_requires_grad(self.id)
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables recorded on different tapes"
        );
    }

    fn record(&self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var<'t, T> {
        self.tape.push(shape, data, op, requires_grad)
    }

    fn binary(self, other: Var<'t, T>, f: impl Fn(T, T) -> T, op: Op<T>, name: &str) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (sa, sb) = (self.shape(), other.shape());
        let out_shape = kernels::broadcast_shape(&sa, &sb)
            .map_err(|_| Error::shape(format!("{name}: shapes {sa:?} and {sb:?} do not broadcast")))?;
        let (da, db) = (self.data(), other.data());
        let (ma, mb) = (Bcast::new(&out_shape, &sa), Bcast::new(&out_shape, &sb));
        let data = match (&ma, &mb) {
            (Bcast::Same, Bcast::Same) => da.iter().zip(db.iter()).map(|(&x, &y)| f(x, y)).collect(),
            (Bcast::Same, Bcast::Cycle(n)) => da
                .chunks_exact(*n)
                .flat_map(|c| c.iter().zip(db.iter()).map(|(&x, &y)| f(x, y)))
                .collect(),
            (Bcast::Cycle(n), Bcast::Same) => db
                .chunks_exact(*n)
                .flat_map(|c| da.iter().zip(c).map(|(&x, &y)| f(x, y)))
                .collect(),
            _ => (0..numel(&out_shape)).map(|i| f(da[ma.at(i)], db[mb.at(i)])).collect(),
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.record(out_shape, data, op, rg))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id), "add")
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id), "sub")
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id), "mul")
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        let c = T::lit(c);
        let data = self.data().iter().map(|&v| v * c).collect();
        self.record(self.shape(), data, Op::Scale(self.id, c), self.requires_grad())
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::lit(c);
        let data = self.data().iter().map(|&v| v + c).collect();
        self.record(self.shape(), data, Op::AddScalar(self.id), self.requires_grad())
    }

    pub fn square(self) -> Var<'t, T> {
        self.mul(self).expect("same shape")
    }

    /// Batched matrix product `[.., p, q] × [.., q, s] → [.., p, s]` with
    /// broadcasting over the leading extents.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (sa, sb) = (self.shape(), other.shape());
        let mismatch = || Error::shape(format!("matmul: cannot multiply {sa:?} by {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (ra, rb) = (sa.len(), sb.len());
        let (p, q, q2, s) = (sa[ra - 2], sa[ra - 1], sb[rb - 2], sb[rb - 1]);
        if q != q2 {
            return Err(mismatch());
        }
        let out_batch = kernels::broadcast_shape(&sa[..ra - 2], &sb[..rb - 2]).map_err(|_| mismatch())?;
        let nbo = numel(&out_batch);
        let (da, db) = (self.data(), other.data());
        let mut out = vec![T::zero(); nbo * p * s];
        if numel(&sb[..rb - 2]) == 1 && sa[..ra - 2] == out_batch[..] {
            kernels::gemm((nbo * p, q, s), &da, (q, 1), &db, (s, 1), &mut out, (s, 1), false);
        } else {
            let map_a = Bcast::new(&out_batch, &sa[..ra - 2]);
            let map_b = Bcast::new(&out_batch, &sb[..rb - 2]);
            for o in 0..nbo {
                let (ia, ib) = (map_a.at(o), map_b.at(o));
                kernels::gemm(
                    (p, q, s),
                    &da[ia * p * q..(ia + 1) * p * q],
                    (q, 1),
                    &db[ib * q * s..(ib + 1) * q * s],
                    (s, 1),
                    &mut out[o * p * s..(o + 1) * p * s],
                    (s, 1),
                    false,
                );
            }
        }
        let mut shape = out_batch;
        shape.extend([p, s]);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.record(shape, out, Op::Matmul(self.id, other.id), rg))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let shape = shape.into();
        let cur = self.shape();
        if numel(&shape) != numel(&cur) {
            return Err(Error::shape(format!("reshape: {cur:?} to {shape:?}")));
        }
        let data = self.data().as_ref().clone();
        Ok(self.record(shape, data, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(format!(
                "permute: {perm:?} is not a permutation of {shape:?}"
            )));
        }
        let data = kernels::permute(&self.data(), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        Ok(self.record(
            out_shape,
            data,
            Op::Permute(self.id, perm.to_vec()),
            self.requires_grad(),
        ))
    }

    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t, T>> {
        let mut perm: Vec<usize> = (0..self.shape().len()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(Error::shape(format!("transpose: axes {a},{b} out of range")));
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat: axis {axis} out of range for {base:?}")));
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        for (p, s) in parts.iter().zip(&shapes) {
            first.same_tape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat: {base:?} and {s:?} differ off axis {axis}"
                )));
            }
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let datas: Vec<Rc<Vec<T>>> = parts.iter().map(|p| p.data()).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (d, s) in datas.iter().zip(&shapes) {
                let len = s[axis] * inner;
                out.extend_from_slice(&d[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|p| p.requires_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.record(shape, out, Op::Concat(ids, axis), rg))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Range(format!(
                "narrow: [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = kernels::split_axis(&shape, axis);
        let d = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&d[s..s + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.record(
            out_shape,
            out,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
            self.requires_grad(),
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax: axis {axis} out of range for {shape:?}")));
        }
        let y = kernels::softmax(&self.data(), kernels::split_axis(&shape, axis));
        Ok(self.record(shape, y, Op::Softmax(self.id, axis), self.requires_grad()))
    }

    /// LayerNorm over the last axis: `gamma·(x−μ)/√(σ²+eps) + beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm on a scalar"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape(format!(
                "layer_norm: affine shapes {:?}/{:?} for feature size {d}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let (y, cache) = kernels::layer_norm(&self.data(), d, &gamma.data(), &beta.data(), T::lit(eps));
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            cache,
        };
        Ok(self.record(shape, y, op, rg))
    }

    /// Exact-erf GELU.
    pub fn gelu(self) -> Var<'t, T> {
        let xd = self.data();
        let cdf: Vec<T> = xd.iter().map(|&v| kernels::normal_cdf(v)).collect();
        let data = xd.iter().zip(&cdf).map(|(&v, &c)| v * c).collect();
        self.record(self.shape(), data, Op::Gelu { x: self.id, cdf }, self.requires_grad())
    }

    fn seq_dims(&self, what: &str) -> Result<(usize, usize, usize)> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::shape(format!("{what}: need [.., n, d], got {s:?}")));
        }
        let r = s.len();
        Ok((numel(&s[..r - 2]), s[r - 2], s[r - 1]))
    }

    fn with_seq_len(&self, n: usize, d: usize) -> Vec<usize> {
        let mut s = self.shape();
        let r = s.len();
        s[r - 2] = n;
        s[r - 1] = d;
        s
    }

    /// Length-targeted average pooling along the sequence axis (`[.., n, d]`).
    pub fn adaptive_avg_pool_seq(self, target: usize) -> Result<Var<'t, T>> {
        let (batch, n, d) = self.seq_dims("adaptive_avg_pool_seq")?;
        if target == 0 || target > n {
            return Err(Error::Range(format!(
                "adaptive_avg_pool_seq: target {target} outside 1..={n}"
            )));
        }
        let out = kernels::adaptive_pool(&self.data(), batch, n, d, target);
        let shape = self.with_seq_len(target, d);
        Ok(self.record(
            shape,
            out,
            Op::AdaptivePool { x: self.id, target },
            self.requires_grad(),
        ))
    }

    fn conv_geom(&self, kernel: &Var<'t, T>, bias: &Var<'t, T>, stride: usize, what: &str) -> Result<ConvGeom> {
        let (batch, n, d_in) = self.seq_dims(what)?;
        let ks = kernel.shape();
        if ks.len() != 3 || ks[1] != d_in || ks[0] == 0 {
            return Err(Error::shape(format!("{what}: kernel {ks:?} for input channels {d_in}")));
        }
        if bias.shape() != [ks[2]] {
            return Err(Error::shape(format!(
                "{what}: bias {:?} for output channels {}",
                bias.shape(),
                ks[2]
            )));
        }
        if stride == 0 {
            return Err(Error::Range(format!("{what}: stride must be ≥ 1")));
        }
        Ok(ConvGeom {
            batch,
            n,
            d_in,
            d_out: ks[2],
            k: ks[0],
            stride,
        })
    }

    /// 1-D cross-correlation along the sequence axis: kernel `[k, d, d']`,
    /// output length `floor((n−k)/stride)+1`.
    pub fn strided_conv_seq(self, kernel: Var<'t, T>, bias: Var<'t, T>, stride: usize) -> Result<Var<'t, T>> {
        let geo = self.conv_geom(&kernel, &bias, stride, "strided_conv_seq")?;
        if geo.n < geo.k {
            return Err(Error::Range(format!(
                "strided_conv_seq: sequence length {} shorter than kernel {}",
                geo.n, geo.k
            )));
        }
        let out = kernels::conv_seq(&self.data(), &kernel.data(), &bias.data(), geo);
        let shape = self.with_seq_len(geo.conv_len(), geo.d_out);
        let rg = self.requires_grad() || kernel.requires_grad() || bias.requires_grad();
        let op = Op::Conv {
            x: self.id,
            kernel: kernel.id,
            bias: bias.id,
            geo,
        };
        Ok(self.record(shape, out, op, rg))
    }

    /// Fractionally strided upsampling: output length `(n−1)·stride + k`.
    pub fn transposed_conv_seq(self, kernel: Var<'t, T>, bias: Var<'t, T>, stride: usize) -> Result<Var<'t, T>> {
        let geo = self.conv_geom(&kernel, &bias, stride, "transposed_conv_seq")?;
        let out = kernels::conv_t_seq(&self.data(), &kernel.data(), &bias.data(), geo);
        let shape = self.with_seq_len(geo.conv_t_len(), geo.d_out);
        let rg = self.requires_grad() || kernel.requires_grad() || bias.requires_grad();
        let op = Op::ConvTranspose {
            x: self.id,
            kernel: kernel.id,
            bias: bias.id,
            geo,
        };
        Ok(self.record(shape, out, op, rg))
    }

    /// Nearest-neighbour repetition of every sequence row `factor` times.
    pub fn repeat_seq(self, factor: usize) -> Result<Var<'t, T>> {
        let (batch, n, d) = self.seq_dims("repeat_seq")?;
        if factor == 0 {
            return Err(Error::Range("repeat_seq: factor must be ≥ 1".into()));
        }
        let out = kernels::repeat_seq(&self.data(), batch, n, d, factor);
        let shape = self.with_seq_len(n * factor, d);
        Ok(self.record(shape, out, Op::Repeat { x: self.id, factor }, self.requires_grad()))
    }

    /// Inverted dropout. `rng = None` is evaluation mode (identity).
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, rng: Option<&mut R>) -> Var<'t, T> {
        let Some(rng) = rng else { return self };
        if p <= 0.0 {
            return self;
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let n = self.data().len();
        // Drop iff a uniform u32 falls below p·2³².
        let cut = (p * 4294967296.0).min(u32::MAX as f64) as u32;
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<u32>() < cut { T::zero() } else { keep })
            .collect();
        let data = self.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.record(
            self.shape(),
            data,
            Op::Dropout { x: self.id, mask },
            self.requires_grad(),
        )
    }

    pub fn sum(self) -> Var<'t, T> {
        let s = self.data().iter().copied().sum::<T>();
        self.record(Vec::new(), vec![s], Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.data().len();
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let mut shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "sum_axis: axis {axis} out of range for {shape:?}"
            )));
        }
        let out = kernels::sum_axis(&self.data(), kernels::split_axis(&shape, axis));
        shape.remove(axis);
        Ok(self.record(shape, out, Op::SumAxis(self.id, axis), self.requires_grad()))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::shape(format!("mean_axis: axis {axis} out of range")))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    /// Euclidean norm over the last axis (zero subgradient at the origin).
    pub fn norm_last(self) -> Result<Var<'t, T>> {
        let mut shape = self.shape();
        let d = shape.pop().ok_or_else(|| Error::shape("norm_last on a scalar"))?;
        let out = self
            .data()
            .chunks_exact(d)
            .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        Ok(self.record(shape, out, Op::Norm(self.id), self.requires_grad()))
    }
}
