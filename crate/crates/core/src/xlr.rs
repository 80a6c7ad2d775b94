//! Cross-layer refinement: the temporal attention of block `t` also attends
//! to the pooled keys and values of block `t-1`.
//!
//! Queries come from the current block only, so the output length never
//! changes. The previous block's contribution is appended after the current
//! keys, giving `K' = [K_t ; pool(K_{t-1})]` of length `n + n_p`.

use serde::{Deserialize, Serialize};

use crate::attention::{Attended, AttentionParams};
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::tensor::{Float, Var};
use crate::tpca::{tpca_attention, TpcaAttended, TpcaState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XlrConfig {
    pub enabled: bool,
    /// Pooled length of the previous keys; `None` means `ceil(n / 2)`.
    #[serde(default)]
    pub prev_pool_target: Option<usize>,
}

impl Default for XlrConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            prev_pool_target: None,
        }
    }
}

impl XlrConfig {
    /// Resolved pool length for a carry of length `n`.
    pub fn pool_target(&self, n: usize) -> Result<usize> {
        let target = self.prev_pool_target.unwrap_or(n.div_ceil(2));
        if target == 0 || target > n {
            return Err(Error::Config(format!(
                "prev_pool_target must lie in 1..={n}, got {target}"
            )));
        }
        Ok(target)
    }
}

/// Refined keys and values handed from one temporal block to the next.
#[derive(Clone, Copy)]
pub struct CrossLayerCarry<'t, T: Float> {
    pub k_prev: Var<'t, T>,
    pub v_prev: Var<'t, T>,
}

pub struct XlrAttended<'t, T: Float> {
    pub out: Var<'t, T>,
    /// `[.., h, n, n + n_p]`, or `[.., h, n, n]` without a carry.
    pub weights: Var<'t, T>,
    pub carry_next: CrossLayerCarry<'t, T>,
}

pub fn xlr_attention<'t, T: Float>(
    ctx: &Ctx<'t, T>,
    attn: &AttentionParams,
    cfg: &XlrConfig,
    z: Var<'t, T>,
    carry: Option<CrossLayerCarry<'t, T>>,
    tpca_k: &TpcaState,
    tpca_v: &TpcaState,
) -> Result<XlrAttended<'t, T>> {
    let carry = carry.filter(|_| cfg.enabled);
    let Some(carry) = carry else {
        let TpcaAttended {
            out,
            weights,
            k_refined,
            v_refined,
        } = tpca_attention(ctx, attn, tpca_k, tpca_v, z)?;
        return Ok(XlrAttended {
            out,
            weights,
            carry_next: CrossLayerCarry {
                k_prev: k_refined,
                v_prev: v_refined,
            },
        });
    };

    let (ks, vs) = (carry.k_prev.shape(), carry.v_prev.shape());
    let zs = z.shape();
    let r = zs.len();
    if ks != vs || ks.len() != r || ks[..r - 2] != zs[..r - 2] || ks[r - 1] != zs[r - 1] {
        return Err(Error::shape(format!(
            "carry keys {ks:?} / values {vs:?} do not fit tokens {zs:?}"
        )));
    }
    let target = cfg.pool_target(ks[r - 2])?;

    let q = attn.w_q.forward(ctx, z)?;
    let k_t = tpca_k.transform(ctx, attn.w_k.forward(ctx, z)?)?;
    let v_t = tpca_v.transform(ctx, attn.w_v.forward(ctx, z)?)?;
    let k_cat = Var::concat(&[k_t, carry.k_prev.adaptive_avg_pool_seq(target)?], r - 2)?;
    let v_cat = Var::concat(&[v_t, carry.v_prev.adaptive_avg_pool_seq(target)?], r - 2)?;
    let Attended { out, weights } = attn.attend(ctx, q, k_cat, v_cat)?;
    Ok(XlrAttended {
        out,
        weights,
        carry_next: CrossLayerCarry {
            k_prev: k_t,
            v_prev: v_t,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::{Tape, Tensor};
    use crate::tpca::TpcaConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        store: ParamStore<f64>,
        attn: AttentionParams,
        k: TpcaState,
        v: TpcaState,
    }

    fn fixture(dim: usize, heads: usize) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let attn = AttentionParams::new(&mut store, "a", dim, heads, &mut rng).unwrap();
        let k = TpcaState::new(&mut store, "tk", TpcaConfig::default(), dim, &mut rng).unwrap();
        let v = TpcaState::new(&mut store, "tv", TpcaConfig::default(), dim, &mut rng).unwrap();
        Fixture { store, attn, k, v }
    }

    #[test]
    fn default_target_rounds_up() {
        let cfg = XlrConfig::default();
        assert_eq!(cfg.pool_target(27).unwrap(), 14);
        assert_eq!(cfg.pool_target(1).unwrap(), 1);
        let bad = XlrConfig {
            prev_pool_target: Some(9),
            ..cfg
        };
        assert!(bad.pool_target(8).is_err());
    }

    #[test]
    fn carry_widens_key_axis() {
        let f = fixture(4, 2);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &f.store);
        let z = tape.constant(&Tensor::from_fn([8, 4], |i| (i as f64 * 0.37).sin()));
        let cfg = XlrConfig {
            enabled: true,
            prev_pool_target: Some(4),
        };
        let first = xlr_attention(&ctx, &f.attn, &cfg, z, None, &f.k, &f.v).unwrap();
        assert_eq!(first.weights.shape(), vec![2, 8, 8]);
        let second = xlr_attention(&ctx, &f.attn, &cfg, z, Some(first.carry_next), &f.k, &f.v).unwrap();
        assert_eq!(second.weights.shape(), vec![2, 8, 12]);
        assert_eq!(second.out.shape(), vec![8, 4]);
    }

    #[test]
    fn mismatched_carry_is_shape_error() {
        let f = fixture(4, 2);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &f.store);
        let z = tape.constant(&Tensor::zeros([8, 4]));
        let bad = tape.constant(&Tensor::zeros([8, 6]));
        let carry = CrossLayerCarry {
            k_prev: bad,
            v_prev: bad,
        };
        let r = xlr_attention(&ctx, &f.attn, &XlrConfig::default(), z, Some(carry), &f.k, &f.v);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn disabled_ignores_carry() {
        let f = fixture(4, 2);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &f.store);
        let z = tape.constant(&Tensor::from_fn([8, 4], |i| (i as f64).cos()));
        let other = tape.constant(&Tensor::from_fn([8, 4], |i| i as f64));
        let carry = CrossLayerCarry {
            k_prev: other,
            v_prev: other,
        };
        let cfg = XlrConfig {
            enabled: false,
            prev_pool_target: None,
        };
        let a = xlr_attention(&ctx, &f.attn, &cfg, z, Some(carry), &f.k, &f.v).unwrap();
        let b = tpca_attention(&ctx, &f.attn, &f.k, &f.v, z).unwrap();
        assert_eq!(*a.out.data(), *b.out.data());
    }
}
