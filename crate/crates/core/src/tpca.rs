//! Temporal pyramidal compression-and-amplification of attention keys and
//! values.
//!
//! A sequence `z` of shape `[.., n, d]` is compressed `m` times by a factor
//! `r` and then amplified back, each step followed by LayerNorm and GELU:
//!
//! ```text
//! down[0] = z,         down[l+1] = gelu(LN(compress(down[l])))
//! up[0]   = down[m],   up[l+1]   = gelu(LN(amplify(up[l]))) + down[m-1-l]
//! ```
//!
//! The result `up[m]` has the input's shape. Queries are never transformed;
//! only the key and value sequences pass through the pyramid, each with its
//! own [`TpcaState`].
//!
//! Stage lengths are `len[l+1] = ceil(len[l] / r)`, so every amplification
//! step (which multiplies the length by `r`) reaches at least the matching
//! compression length; the surplus trailing rows are cropped.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Attended, AttentionParams};
use crate::error::{Error, Result};
use crate::nn::{xavier_uniform, Ctx, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Float, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compression {
    /// Adaptive average pooling.
    Pool,
    /// Strided convolution with kernel = stride = r.
    Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Amplification {
    /// Nearest-neighbour repetition followed by a position-wise linear map.
    Linear,
    /// Transposed convolution with kernel = stride = r.
    TransConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TpcaConfig {
    /// Number of compression (and amplification) stages `m`.
    pub stages: usize,
    /// Per-stage length reduction factor `r`.
    pub ratio: usize,
    pub compression: Compression,
    pub amplification: Amplification,
}

impl Default for TpcaConfig {
    fn default() -> Self {
        Self {
            stages: 2,
            ratio: 2,
            compression: Compression::Pool,
            amplification: Amplification::TransConv,
        }
    }
}

impl TpcaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages > 0 && self.ratio < 2 {
            return Err(Error::Config(format!(
                "pyramid ratio must be at least 2, got {}",
                self.ratio
            )));
        }
        Ok(())
    }

    /// Sequence lengths `[n, len_1, .., len_m]` visited by the compression chain.
    pub fn stage_lengths(&self, n: usize) -> Result<Vec<usize>> {
        self.validate()?;
        let reach = self.ratio.checked_pow(self.stages as u32).unwrap_or(usize::MAX);
        if n == 0 || (self.stages > 0 && n < reach) {
            return Err(Error::Config(format!(
                "coarsest pyramid level is empty: n = {n}, r = {}, m = {}",
                self.ratio, self.stages
            )));
        }
        if self.compression == Compression::Conv && n % reach != 0 {
            return Err(Error::Config(format!(
                "convolutional compression needs n divisible by r^m: n = {n}, r = {}, m = {}",
                self.ratio, self.stages
            )));
        }
        let mut lens = vec![n];
        for _ in 0..self.stages {
            let last = *lens.last().expect("non-empty");
            lens.push(last.div_ceil(self.ratio));
        }
        Ok(lens)
    }
}

#[derive(Clone, Debug)]
enum Down {
    Pool,
    Conv { kernel: ParamId, bias: ParamId },
}

#[derive(Clone, Debug)]
enum Up {
    Linear(Linear),
    TransConv { kernel: ParamId, bias: ParamId },
}

#[derive(Clone, Debug)]
struct DownStage {
    op: Down,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct UpStage {
    op: Up,
    norm: LayerNorm,
}

/// Learned parameters of one pyramid (for either the keys or the values).
#[derive(Clone, Debug)]
pub struct TpcaState {
    config: TpcaConfig,
    dim: usize,
    down: Vec<DownStage>,
    up: Vec<UpStage>,
}

/// Instrumentation of one [`TpcaState::transform_traced`] call.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TpcaTrace {
    pub compressions: usize,
    pub amplifications: usize,
    /// Sequence length after every step, starting with the input length.
    pub lengths: Vec<usize>,
}

fn kernel_init<T: Float>(
    store: &mut ParamStore<T>,
    name: &str,
    k: usize,
    d: usize,
    rng: &mut impl Rng,
) -> Result<(ParamId, ParamId)> {
    let kernel = store.add(format!("{name}.kernel"), xavier_uniform(&[k, d, d], k * d, k * d, rng))?;
    let bias = store.add(format!("{name}.bias"), Tensor::zeros([d]))?;
    Ok((kernel, bias))
}

impl TpcaState {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        config: TpcaConfig,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let r = config.ratio;
        let mut down = Vec::with_capacity(config.stages);
        for l in 0..config.stages {
            let op = match config.compression {
                Compression::Pool => Down::Pool,
                Compression::Conv => {
                    let (kernel, bias) = kernel_init(store, &format!("{name}.down{l}"), r, dim, rng)?;
                    Down::Conv { kernel, bias }
                }
            };
            let norm = LayerNorm::new(store, &format!("{name}.down{l}.norm"), dim)?;
            down.push(DownStage { op, norm });
        }
        let mut up = Vec::with_capacity(config.stages);
        for l in 0..config.stages {
            let op = match config.amplification {
                Amplification::Linear => {
                    Up::Linear(Linear::new(store, &format!("{name}.up{l}.linear"), dim, dim, rng)?)
                }
                Amplification::TransConv => {
                    let (kernel, bias) = kernel_init(store, &format!("{name}.up{l}"), r, dim, rng)?;
                    Up::TransConv { kernel, bias }
                }
            };
            let norm = LayerNorm::new(store, &format!("{name}.up{l}.norm"), dim)?;
            up.push(UpStage { op, norm });
        }
        Ok(Self { config, dim, down, up })
    }

    pub fn config(&self) -> &TpcaConfig {
        &self.config
    }

    pub fn param_count(config: &TpcaConfig, dim: usize) -> usize {
        let r = config.ratio;
        let down = match config.compression {
            Compression::Pool => 0,
            Compression::Conv => r * dim * dim + dim,
        };
        let up = match config.amplification {
            Amplification::Linear => Linear::param_count(dim, dim),
            Amplification::TransConv => r * dim * dim + dim,
        };
        config.stages * (down + up + 2 * LayerNorm::param_count(dim))
    }

    pub fn transform<'t, T: Float>(&self, ctx: &Ctx<'t, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        self.transform_traced(ctx, z).map(|(out, _)| out)
    }

    pub fn transform_traced<'t, T: Float>(&self, ctx: &Ctx<'t, T>, z: Var<'t, T>) -> Result<(Var<'t, T>, TpcaTrace)> {
        let shape = z.shape();
        let r = shape.len();
        if r < 2 || shape[r - 1] != self.dim {
            return Err(Error::shape(format!(
                "pyramid over [.., n, {}] expects matching tokens, got {shape:?}",
                self.dim
            )));
        }
        let lens = self.config.stage_lengths(shape[r - 2])?;
        let ratio = self.config.ratio;
        let mut trace = TpcaTrace {
            lengths: vec![lens[0]],
            ..TpcaTrace::default()
        };

        let mut downs = vec![z];
        for (l, stage) in self.down.iter().enumerate() {
            let prev = downs[l];
            let compressed = match &stage.op {
                Down::Pool => prev.adaptive_avg_pool_seq(lens[l + 1])?,
                Down::Conv { kernel, bias } => prev.strided_conv_seq(ctx.p(*kernel), ctx.p(*bias), ratio)?,
            };
            downs.push(stage.norm.forward(ctx, compressed)?.gelu());
            trace.compressions += 1;
            trace.lengths.push(lens[l + 1]);
        }

        let m = self.config.stages;
        let mut up = downs[m];
        for (l, stage) in self.up.iter().enumerate() {
            let target = lens[m - 1 - l];
            let amplified = match &stage.op {
                Up::Linear(lin) => {
                    let rep = up.repeat_seq(ratio)?;
                    lin.forward(ctx, crop_seq(rep, target)?)?
                }
                Up::TransConv { kernel, bias } => {
                    let t = up.transposed_conv_seq(ctx.p(*kernel), ctx.p(*bias), ratio)?;
                    crop_seq(t, target)?
                }
            };
            up = stage.norm.forward(ctx, amplified)?.gelu().add(downs[m - 1 - l])?;
            trace.amplifications += 1;
            trace.lengths.push(target);
        }
        Ok((up, trace))
    }
}

fn crop_seq<'t, T: Float>(x: Var<'t, T>, len: usize) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let axis = shape.len() - 2;
    if shape[axis] == len {
        Ok(x)
    } else {
        x.narrow(axis, 0, len)
    }
}

/// Output of pyramid attention; the refined keys and values feed the next
/// temporal block.
pub struct TpcaAttended<'t, T: Float> {
    pub out: Var<'t, T>,
    pub weights: Var<'t, T>,
    pub k_refined: Var<'t, T>,
    pub v_refined: Var<'t, T>,
}

/// Self-attention whose keys and values pass through independent pyramids.
pub fn tpca_attention<'t, T: Float>(
    ctx: &Ctx<'t, T>,
    attn: &AttentionParams,
    k_state: &TpcaState,
    v_state: &TpcaState,
    z: Var<'t, T>,
) -> Result<TpcaAttended<'t, T>> {
    let q = attn.w_q.forward(ctx, z)?;
    let k_refined = k_state.transform(ctx, attn.w_k.forward(ctx, z)?)?;
    let v_refined = v_state.transform(ctx, attn.w_v.forward(ctx, z)?)?;
    let Attended { out, weights } = attn.attend(ctx, q, k_refined, v_refined)?;
    Ok(TpcaAttended {
        out,
        weights,
        k_refined,
        v_refined,
    })
}
