//! Conditional flow matching: optimal-transport conditional paths, the
//! regression objective, a fixed-step Euler sampler, the U-Net vector field
//! and the semantic-to-mel decoder built from them.

mod model;
pub mod toy;
mod unet;

pub use model::{CfmExample, CfmModel, CfmTrainer, MelStats};
pub use unet::UNet1d;

use candle_core::{DType, Device, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::refenc::{RefEncoderConfig, SPEAKER_DIM};

/// Decoder settings. Channel counts refer to the U-Net; every level uses the
/// same width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CFMConfig {
    pub sigma_min: f64,
    pub sample_steps: usize,
    pub mel_dim: usize,
    pub speaker_dim: usize,
    /// Channels entering the U-Net: noisy mel, condition frames, speaker.
    pub input_dim: usize,
    /// U-Net channel width.
    pub intermediate_dim: usize,
    pub down_blocks: usize,
    pub mid_blocks: usize,
    pub up_blocks: usize,
    pub transformers_per_block: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub groups: usize,
    pub time_dim: usize,
    /// Semantic vocabulary including the end-of-sequence id.
    pub token_vocab: usize,
    pub token_emb_dim: usize,
    /// Training segment length in mel frames.
    pub segment_frames: usize,
    pub zero_init_out: bool,
    pub ref_encoder: RefEncoderConfig,
}

impl Default for CFMConfig {
    /// Full-size configuration.
    fn default() -> Self {
        Self {
            sigma_min: 1e-4,
            sample_steps: 20,
            mel_dim: 128,
            speaker_dim: SPEAKER_DIM,
            input_dim: 2 * 128 + SPEAKER_DIM,
            intermediate_dim: 768,
            down_blocks: 2,
            mid_blocks: 2,
            up_blocks: 2,
            transformers_per_block: 2,
            heads: 8,
            ff_mult: 4,
            groups: 8,
            time_dim: 1024,
            token_vocab: 1025,
            token_emb_dim: 256,
            segment_frames: 862,
            zero_init_out: false,
            ref_encoder: RefEncoderConfig::default(),
        }
    }
}

impl CFMConfig {
    /// Small configuration used for CPU experiments.
    pub fn desk() -> Self {
        Self {
            intermediate_dim: 32,
            transformers_per_block: 1,
            heads: 2,
            ff_mult: 2,
            time_dim: 32,
            token_vocab: 65,
            token_emb_dim: 32,
            segment_frames: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..1.0).contains(&self.sigma_min),
            "sigma_min must lie in [0, 1), got {}",
            self.sigma_min
        );
        ensure!(self.sample_steps >= 1, "sample_steps must be at least 1");
        ensure!(
            self.input_dim == 2 * self.mel_dim + self.speaker_dim,
            "input_dim {} must equal 2 * mel_dim + speaker_dim = {}",
            self.input_dim,
            2 * self.mel_dim + self.speaker_dim
        );
        ensure!(
            self.down_blocks == self.up_blocks,
            "down and up block counts must match"
        );
        ensure!(
            self.intermediate_dim % self.groups == 0,
            "groups must divide the channel width"
        );
        ensure!(
            self.heads >= 1 && self.intermediate_dim % self.heads == 0,
            "heads must divide the channel width"
        );
        ensure!(self.token_vocab >= 2, "token vocabulary needs a token and EOS");
        ensure!(
            self.ref_encoder.widths.last() == Some(&self.speaker_dim),
            "reference encoder output must equal speaker_dim"
        );
        Ok(())
    }

    /// Trainable parameter count implied by the configuration.
    pub fn param_count(&self) -> usize {
        let c = self.intermediate_dim;
        let conv = |i: usize, o: usize, k: usize| i * o * k + o;
        let lin = |i: usize, o: usize| i * o + o;
        let block = |i: usize, o: usize| conv(i, o, 3) + 2 * o;
        let resnet = |i: usize, o: usize| {
            block(i, o) + block(o, o) + lin(self.time_dim, o) + if i != o { conv(i, o, 1) } else { 0 }
        };
        let ff = c * self.ff_mult;
        let transformer = 2 * c + 3 * c * c + lin(c, c) + lin(c, ff) + 2 * ff + lin(ff, c);
        let tfs = self.transformers_per_block * transformer;
        let time = lin(c, self.time_dim) + lin(self.time_dim, self.time_dim);
        let mut n = time;
        for i in 0..self.down_blocks {
            let input = if i == 0 { self.input_dim } else { c };
            n += resnet(input, c) + tfs + conv(c, c, 3);
        }
        n += self.mid_blocks * (resnet(c, c) + tfs);
        n += self.up_blocks * (conv(c, c, 3) + resnet(2 * c, c) + tfs);
        n += block(c, c) + conv(c, self.mel_dim, 1);
        let mut refenc = 0;
        let mut d = self.ref_encoder.mel_dim;
        for &w in &self.ref_encoder.widths {
            refenc += lin(d, w);
            d = w;
        }
        refenc += 2 * d * d;
        n + refenc + self.token_vocab * self.token_emb_dim + lin(self.token_emb_dim, self.mel_dim)
    }
}

/// Point on a conditional probability path.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub x: Tensor,
    pub t: f64,
}

/// Conditioning passed to a vector field. Toy fields ignore it.
#[derive(Debug, Clone, Default)]
pub struct FieldCondition {
    /// `[B, T, mel_dim]` frames aligned with `x`.
    pub mu: Option<Tensor>,
    /// `[B, speaker_dim]`.
    pub spk: Option<Tensor>,
}

/// A time-dependent vector field `v(x, t)`. `x` is `[B, T, D]` and `t` is `[B]`.
pub trait VectorField {
    fn eval(&self, x: &Tensor, t: &Tensor, cond: &FieldCondition) -> Result<Tensor>;
}

impl<F> VectorField for F
where
    F: Fn(&Tensor, &Tensor) -> Result<Tensor>,
{
    fn eval(&self, x: &Tensor, t: &Tensor, _cond: &FieldCondition) -> Result<Tensor> {
        self(x, t)
    }
}

/// `x_t = (1 - (1 - sigma_min) t) x0 + t x1` and `u_t = x1 - (1 - sigma_min) x0`.
/// `t` is a scalar or broadcasts against the leading dimension.
pub fn ot_path_sample(x0: &Tensor, x1: &Tensor, t: &Tensor, sigma_min: f64) -> Result<(Tensor, Tensor)> {
    ensure!(
        x0.dims() == x1.dims(),
        "noise shape {:?} differs from data shape {:?}",
        x0.dims(),
        x1.dims()
    );
    let t = broadcast_time(t, x1)?;
    let a = (1.0 - (t.clone() * (1.0 - sigma_min))?)?;
    let xt = (x0.broadcast_mul(&a)? + x1.broadcast_mul(&t)?)?;
    let ut = (x1 - (x0 * (1.0 - sigma_min))?)?;
    Ok((xt, ut))
}

/// Scalar form of the path, for oracle checks.
pub fn ot_path_scalar(x0: f64, x1: f64, t: f64, sigma_min: f64) -> (f64, f64) {
    ((1.0 - (1.0 - sigma_min) * t) * x0 + t * x1, x1 - (1.0 - sigma_min) * x0)
}

fn broadcast_time(t: &Tensor, like: &Tensor) -> Result<Tensor> {
    let t = t.to_dtype(like.dtype())?;
    if t.rank() == 0 {
        return Ok(t);
    }
    let mut shape = vec![1; like.rank()];
    shape[0] = t.elem_count();
    ensure!(
        t.elem_count() == like.dims()[0],
        "time has {} entries for a batch of {}",
        t.elem_count(),
        like.dims()[0]
    );
    Ok(t.reshape(shape)?)
}

/// Standard-normal tensor from a seeded generator.
pub fn seeded_normal(shape: &[usize], rng: &mut impl Rng, dtype: DType, dev: &Device) -> Result<Tensor> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, dev)?.to_dtype(dtype)?)
}

/// Times and noise drawn for one loss evaluation.
#[derive(Debug, Clone)]
pub struct CfmDraw {
    pub t: Tensor,
    pub x0: Tensor,
}

impl CfmDraw {
    /// `t ~ U[0, 1]` per batch element, then `x0 ~ N(0, I)`.
    pub fn new(shape: &[usize], seed: u64, dtype: DType, dev: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<f64> = (0..shape[0]).map(|_| rng.random::<f64>()).collect();
        let t = Tensor::from_vec(t, shape[0], dev)?.to_dtype(dtype)?;
        let x0 = seeded_normal(shape, &mut rng, dtype, dev)?;
        Ok(Self { t, x0 })
    }
}

/// Mean squared error between the network output and the path velocity.
/// `mask` (`[B, T]`, 1 for real frames) excludes padding from the mean.
pub fn cfm_loss(
    net: &dyn VectorField,
    x1: &Tensor,
    cond: &FieldCondition,
    mask: Option<&Tensor>,
    sigma_min: f64,
    seed: u64,
) -> Result<Tensor> {
    let draw = CfmDraw::new(x1.dims(), seed, x1.dtype(), x1.device())?;
    cfm_loss_with(net, x1, cond, mask, sigma_min, &draw)
}

pub fn cfm_loss_with(
    net: &dyn VectorField,
    x1: &Tensor,
    cond: &FieldCondition,
    mask: Option<&Tensor>,
    sigma_min: f64,
    draw: &CfmDraw,
) -> Result<Tensor> {
    ensure!(x1.rank() == 3, "data must be [B, T, D]");
    if let Some(mu) = &cond.mu {
        ensure!(
            mu.dims()[..2] == x1.dims()[..2],
            "condition frames {:?} do not match data frames {:?}",
            mu.dims(),
            x1.dims()
        );
    }
    let (xt, ut) = ot_path_sample(&draw.x0, x1, &draw.t, sigma_min)?;
    let v = net.eval(&xt, &draw.t, cond)?;
    ensure!(v.dims() == ut.dims(), "vector field output shape {:?} differs from {:?}", v.dims(), ut.dims());
    let sq = (v - ut)?.sqr()?;
    let d = x1.dims()[2] as f64;
    match mask {
        None => Ok(sq.mean_all()?),
        Some(m) => {
            let m = m.to_dtype(x1.dtype())?;
            ensure!(m.dims() == &x1.dims()[..2], "mask must be [B, T]");
            let total = m.sum_all()?;
            let weighted = sq.broadcast_mul(&m.unsqueeze(2)?)?.sum_all()?;
            Ok((weighted / (total * d)?)?)
        }
    }
}

/// Integrate `dx/dt = v(x, t)` from `x0` at `t = 0` to `t = 1` with `steps`
/// Euler steps at `t_i = i / steps`.
pub fn euler_integrate(net: &dyn VectorField, x0: &Tensor, cond: &FieldCondition, steps: usize) -> Result<Tensor> {
    ensure!(steps >= 1, "sampler needs at least one step");
    let b = x0.dims()[0];
    let h = 1.0 / steps as f64;
    let mut x = x0.clone();
    for i in 0..steps {
        let t = Tensor::full(i as f64 * h, b, x0.device())?.to_dtype(x0.dtype())?;
        let v = net.eval(&x, &t, cond)?;
        x = (x + (v * h)?)?;
    }
    Ok(x)
}

/// Euler sampling from seeded standard-normal noise of the given shape.
pub fn euler_sample(
    net: &dyn VectorField,
    shape: &[usize],
    cond: &FieldCondition,
    steps: usize,
    seed: u64,
    dtype: DType,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = seeded_normal(shape, &mut rng, dtype, &Device::Cpu)?;
    euler_integrate(net, &x0, cond, steps)
}
