//! Scaled dot-product and multi-head attention.
//!
//! Keys and values may come from a different (and longer) sequence than the
//! queries, which is what cross-layer refinement needs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, ParamStore};
use crate::tensor::{Float, Var};

/// `softmax(q·kᵀ/√d_h)·v` over `[.., n_q, d_h]` / `[.., n_k, d_h]`.
///
/// Returns the output and the attention weights `[.., n_q, n_k]`.
pub fn scaled_dot_product<'t, T: Float>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    let rank = qs.len();
    if rank < 2 || ks.len() != rank || vs.len() != rank {
        return Err(Error::shape(format!(
            "scaled_dot_product: q {qs:?}, k {ks:?}, v {vs:?}"
        )));
    }
    let d_h = qs[rank - 1];
    if ks[rank - 1] != d_h || ks[rank - 2] != vs[rank - 2] {
        return Err(Error::shape(format!(
            "scaled_dot_product: q {qs:?}, k {ks:?}, v {vs:?}"
        )));
    }
    let logits = q
        .matmul(k.transpose(rank - 2, rank - 1)?)?
        .scale(1.0 / (d_h as f64).sqrt());
    let weights = logits.softmax(rank - 1)?;
    let out = weights.matmul(v)?;
    Ok((out, weights))
}

/// Projection weights of one multi-head attention layer.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Result of a multi-head attention call.
pub struct Attended<'t, T: Float> {
    /// `[.., n_q, C]`
    pub out: Var<'t, T>,
    /// `[.., h, n_q, n_k]`
    pub weights: Var<'t, T>,
}

impl AttentionParams {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "channel size {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            w_q: Linear::new(store, &format!("{name}.w_q"), dim, dim, rng)?,
            w_k: Linear::new(store, &format!("{name}.w_k"), dim, dim, rng)?,
            w_v: Linear::new(store, &format!("{name}.w_v"), dim, dim, rng)?,
            w_o: Linear::new(store, &format!("{name}.w_o"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn param_count(dim: usize) -> usize {
        4 * Linear::param_count(dim, dim)
    }

    /// `[.., n, C] → [.., h, n, d_h]`
    pub fn split_heads<'t, T: Float>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut shape = x.shape();
        let r = shape.len();
        if r < 2 || shape[r - 1] != self.dim {
            return Err(Error::shape(format!(
                "expected [.., n, {}] tokens, got {shape:?}",
                self.dim
            )));
        }
        shape[r - 1] = self.heads;
        shape.push(self.head_dim());
        x.reshape(shape)?.transpose(r - 2, r - 1)
    }

    /// `[.., h, n, d_h] → [.., n, C]`
    pub fn merge_heads<'t, T: Float>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let r = x.shape().len();
        let merged = x.transpose(r - 3, r - 2)?;
        let mut shape = merged.shape();
        shape.pop();
        shape[r - 2] = self.dim;
        merged.reshape(shape)
    }

    /// Attention over already projected `q`, `k`, `v` (all `[.., n, C]`),
    /// followed by the output projection.
    pub fn attend<'t, T: Float>(
        &self,
        ctx: &Ctx<'t, T>,
        q: Var<'t, T>,
        k: Var<'t, T>,
        v: Var<'t, T>,
    ) -> Result<Attended<'t, T>> {
        let (ks, vs) = (k.shape(), v.shape());
        if ks != vs {
            return Err(Error::shape(format!("key {ks:?} and value {vs:?} differ")));
        }
        let (out, weights) = scaled_dot_product(self.split_heads(q)?, self.split_heads(k)?, self.split_heads(v)?)?;
        let out = self.w_o.forward(ctx, self.merge_heads(out)?)?;
        Ok(Attended { out, weights })
    }

    /// Multi-head attention from `q_src` over keys from `k_src` and values
    /// from `v_src`. Self-attention is `forward(x, x, x)`.
    pub fn forward<'t, T: Float>(
        &self,
        ctx: &Ctx<'t, T>,
        q_src: Var<'t, T>,
        k_src: Var<'t, T>,
        v_src: Var<'t, T>,
    ) -> Result<Attended<'t, T>> {
        let q = self.w_q.forward(ctx, q_src)?;
        let k = self.w_k.forward(ctx, k_src)?;
        let v = self.w_v.forward(ctx, v_src)?;
        self.attend(ctx, q, k, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn single_key_returns_its_value() {
        let tape = Tape::new();
        let q = tape.constant(&t(&[3, 2], &[1., 2., -1., 0., 4., 4.]));
        let k = tape.constant(&t(&[1, 2], &[0.3, -0.7]));
        let v = tape.constant(&t(&[1, 2], &[5., 6.]));
        let (out, w) = scaled_dot_product(q, k, v).unwrap();
        assert_eq!(*w.data(), vec![1., 1., 1.]);
        assert_eq!(*out.data(), vec![5., 6., 5., 6., 5., 6.]);
    }

    #[test]
    fn orthogonal_query_averages_values() {
        let tape = Tape::new();
        let q = tape.constant(&t(&[1, 2], &[0., 1.]));
        let k = tape.constant(&t(&[3, 2], &[1., 0., 2., 0., -3., 0.]));
        let v = tape.constant(&t(&[3, 2], &[1., 2., 3., 4., 5., 9.]));
        let (out, _) = scaled_dot_product(q, k, v).unwrap();
        assert!((out.data()[0] - 3.0).abs() < 1e-15);
        assert!((out.data()[1] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn hand_case_weights() {
        // d_h = 1, so logits are q·k directly.
        let ln2 = 2f64.ln();
        let tape = Tape::new();
        let q = tape.constant(&t(&[2, 1], &[1., 0.]));
        let k = tape.constant(&t(&[3, 1], &[0., ln2, 0.]));
        let v = tape.constant(&t(&[3, 1], &[4., 8., 12.]));
        let (out, w) = scaled_dot_product(q, k, v).unwrap();
        let w = w.data();
        for (got, want) in w.iter().zip([0.25, 0.5, 0.25, 1. / 3., 1. / 3., 1. / 3.]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!((out.data()[0] - 8.0).abs() < 1e-14);
        assert!((out.data()[1] - 8.0).abs() < 1e-14);
    }

    #[test]
    fn heads_must_divide_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f64>::new();
        assert!(matches!(
            AttentionParams::new(&mut s, "a", 6, 4, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn output_shape_ignores_key_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::<f64>::new();
        let attn = AttentionParams::new(&mut s, "a", 8, 2, &mut rng).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &s);
        let q = tape.constant(&Tensor::from_fn([3, 5, 8], |i| (i as f64 * 0.1).sin()));
        let kv = tape.constant(&Tensor::from_fn([3, 11, 8], |i| (i as f64 * 0.3).cos()));
        let a = attn.forward(&ctx, q, kv, kv).unwrap();
        assert_eq!(a.out.shape(), vec![3, 5, 8]);
        assert_eq!(a.weights.shape(), vec![3, 2, 5, 11]);
    }
}
