//! The full lifting network: embedding, learned positional encodings, a stack
//! of spatial-temporal encoders and a per-token regression head.
//!
//! Activations live in `[B, J, F, C]` layout. Spatial blocks see joint tokens
//! within one frame (`[(B·F), J, C]`), temporal blocks see frame tokens of one
//! joint trajectory (`[(B·J), F, C]`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionParams;
use crate::error::{Error, Result};
use crate::nn::{normal, Ctx, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::tensor::{Float, Var};
use crate::tpca::{TpcaConfig, TpcaState};
use crate::xlr::{xlr_attention, CrossLayerCarry, XlrConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub frames: usize,
    pub joints: usize,
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    /// Head outputs are multiplied by this constant, so the network works in
    /// meters while targets are in millimeters.
    pub output_scale: f64,
    pub tpca: TpcaConfig,
    pub xlr: XlrConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 27,
            joints: 17,
            channels: 64,
            blocks: 2,
            heads: 4,
            mlp_ratio: 4,
            dropout: 0.1,
            output_scale: 1000.0,
            tpca: TpcaConfig::default(),
            xlr: XlrConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.frames == 0 || self.joints == 0 || self.blocks == 0 {
            return bad(format!(
                "frames, joints and blocks must be positive (got {}, {}, {})",
                self.frames, self.joints, self.blocks
            ));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!(
                "channel size {} is not divisible by {} heads",
                self.channels, self.heads
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return bad(format!("output_scale must be positive, got {}", self.output_scale));
        }
        self.tpca.stage_lengths(self.frames)?;
        self.xlr.pool_target(self.frames)?;
        Ok(())
    }

    /// Closed-form trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        let c = self.channels;
        let hidden = c * self.mlp_ratio;
        let embed = Linear::param_count(2, c);
        let encodings = (self.joints + self.frames) * c;
        let block = 2 * LayerNorm::param_count(c) + AttentionParams::param_count(c) + Mlp::param_count(c, hidden);
        let tt_extra = 2 * TpcaState::param_count(&self.tpca, c);
        let head = Linear::param_count(c, 3);
        embed + encodings + self.blocks * (2 * block + tt_extra) + head
    }
}

#[derive(Clone, Debug)]
pub struct StBlock {
    pub norm1: LayerNorm,
    pub attn: AttentionParams,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct TtBlock {
    pub norm1: LayerNorm,
    pub attn: AttentionParams,
    pub tpca_k: TpcaState,
    pub tpca_v: TpcaState,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

/// Parameter layout of the network. Values live in a [`ParamStore`], so the
/// same structure drives both 32- and 64-bit stores.
#[derive(Clone, Debug)]
pub struct Rtpca {
    pub config: ModelConfig,
    pub embed: Linear,
    pub e_s: ParamId,
    pub e_t: ParamId,
    pub spatial: Vec<StBlock>,
    pub temporal: Vec<TtBlock>,
    pub head: Linear,
}

/// Intermediate values of one forward pass.
pub struct Forward<'t, T: Float> {
    /// `[B, J, F, 3]`
    pub out: Var<'t, T>,
    /// Attention of the last temporal block, `[(B·J), h, F, F + n_p]`.
    pub last_weights: Var<'t, T>,
}

impl StBlock {
    fn new<T: Float>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c)?,
            attn: AttentionParams::new(store, &format!("{name}.attn"), c, cfg.heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), c, c * cfg.mlp_ratio, rng)?,
        })
    }

    /// `[.., J, C]` in, same shape out.
    pub fn forward<'t, T: Float>(&self, ctx: &Ctx<'t, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.norm1.forward(ctx, z)?;
        let a = self.attn.forward(ctx, h, h, h)?.out;
        let z = z.add(ctx.dropout(a))?;
        let m = self.mlp.forward(ctx, self.norm2.forward(ctx, z)?)?;
        z.add(m)
    }
}

impl TtBlock {
    fn new<T: Float>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c)?,
            attn: AttentionParams::new(store, &format!("{name}.attn"), c, cfg.heads, rng)?,
            tpca_k: TpcaState::new(store, &format!("{name}.tpca_k"), cfg.tpca, c, rng)?,
            tpca_v: TpcaState::new(store, &format!("{name}.tpca_v"), cfg.tpca, c, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), c, c * cfg.mlp_ratio, rng)?,
        })
    }

    /// `[.., F, C]` in, same shape out, plus the carry for the next block.
    pub fn forward<'t, T: Float>(
        &self,
        ctx: &Ctx<'t, T>,
        xlr: &XlrConfig,
        z: Var<'t, T>,
        carry: Option<CrossLayerCarry<'t, T>>,
    ) -> Result<(Var<'t, T>, CrossLayerCarry<'t, T>, Var<'t, T>)> {
        let h = self.norm1.forward(ctx, z)?;
        let a = xlr_attention(ctx, &self.attn, xlr, h, carry, &self.tpca_k, &self.tpca_v)?;
        let z = z.add(ctx.dropout(a.out))?;
        let m = self.mlp.forward(ctx, self.norm2.forward(ctx, z)?)?;
        Ok((z.add(m)?, a.carry_next, a.weights))
    }
}

/// `[B, J, F, C] → [(B·F), J, C]`
pub fn to_spatial<'t, T: Float>(z: Var<'t, T>) -> Result<Var<'t, T>> {
    let [b, j, f, c] = dims4(&z)?;
    z.permute(&[0, 2, 1, 3])?.reshape([b * f, j, c])
}

/// `[(B·F), J, C] → [B, J, F, C]`
pub fn from_spatial<'t, T: Float>(z: Var<'t, T>, batch: usize) -> Result<Var<'t, T>> {
    let s = z.shape();
    if s.len() != 3 || s[0] % batch != 0 {
        return Err(Error::shape(format!("cannot split {s:?} into batch {batch}")));
    }
    z.reshape([batch, s[0] / batch, s[1], s[2]])?.permute(&[0, 2, 1, 3])
}

/// `[B, J, F, C] → [(B·J), F, C]`
pub fn to_temporal<'t, T: Float>(z: Var<'t, T>) -> Result<Var<'t, T>> {
    let [b, j, f, c] = dims4(&z)?;
    z.reshape([b * j, f, c])
}

/// `[(B·J), F, C] → [B, J, F, C]`
pub fn from_temporal<'t, T: Float>(z: Var<'t, T>, batch: usize) -> Result<Var<'t, T>> {
    let s = z.shape();
    if s.len() != 3 || s[0] % batch != 0 {
        return Err(Error::shape(format!("cannot split {s:?} into batch {batch}")));
    }
    z.reshape([batch, s[0] / batch, s[1], s[2]])
}

fn dims4<T: Float>(z: &Var<'_, T>) -> Result<[usize; 4]> {
    z.shape()
        .try_into()
        .map_err(|s: Vec<usize>| Error::shape(format!("expected [B, J, F, C], got {s:?}")))
}

impl Rtpca {
    /// Builds the layout and initial values; initialization is a pure
    /// function of `(config, seed)`.
    pub fn new<T: Float>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let embed = Linear::new(&mut store, "embed", 2, c, &mut rng)?;
        let e_s = store.add("pos.spatial", normal(&[config.joints, c], 0.02, &mut rng))?;
        let e_t = store.add("pos.temporal", normal(&[config.frames, c], 0.02, &mut rng))?;
        let mut spatial = Vec::with_capacity(config.blocks);
        let mut temporal = Vec::with_capacity(config.blocks);
        for l in 0..config.blocks {
            spatial.push(StBlock::new(&mut store, &format!("ste{l}.st"), &config, &mut rng)?);
            temporal.push(TtBlock::new(&mut store, &format!("ste{l}.tt"), &config, &mut rng)?);
        }
        let head = Linear::new(&mut store, "head", c, 3, &mut rng)?;
        // Initial predictions are O(1) in target units.
        let w = store.get_mut(head.weight);
        let shrink = T::lit(1.0 / config.output_scale);
        w.data_mut().iter_mut().for_each(|v| *v *= shrink);
        let model = Self {
            config,
            embed,
            e_s,
            e_t,
            spatial,
            temporal,
            head,
        };
        Ok((model, store))
    }

    /// `x2d [B, J, F, 2] → [B, J, F, 3]` in target units.
    pub fn forward<'t, T: Float>(&self, ctx: &Ctx<'t, T>, x2d: Var<'t, T>) -> Result<Forward<'t, T>> {
        let cfg = &self.config;
        let s = x2d.shape();
        if s.len() != 4 || s[1] != cfg.joints || s[2] != cfg.frames || s[3] != 2 {
            return Err(Error::Config(format!(
                "input {s:?} does not match [B, {}, {}, 2]",
                cfg.joints, cfg.frames
            )));
        }
        let batch = s[0];
        let mut z = self.embed.forward(ctx, x2d)?;
        let mut carry = None;
        let mut last_weights = None;
        for (l, (st, tt)) in self.spatial.iter().zip(&self.temporal).enumerate() {
            let mut zs = to_spatial(z)?;
            if l == 0 {
                zs = zs.add(ctx.p(self.e_s))?;
            }
            z = from_spatial(st.forward(ctx, zs)?, batch)?;

            let mut zt = to_temporal(z)?;
            if l == 0 {
                zt = zt.add(ctx.p(self.e_t))?;
            }
            let (zt, next, weights) = tt.forward(ctx, &cfg.xlr, zt, carry)?;
            carry = cfg.xlr.enabled.then_some(next);
            last_weights = Some(weights);
            z = from_temporal(zt, batch)?;
        }
        let out = self.head.forward(ctx, z)?.scale(cfg.output_scale);
        Ok(Forward {
            out,
            last_weights: last_weights.expect("at least one block"),
        })
    }
}
