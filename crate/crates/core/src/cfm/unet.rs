use candle_core::{Tensor, D};
use candle_nn::{Conv1dConfig, GroupNorm, Linear, Module};

use super::{CFMConfig, FieldCondition, VectorField};
use crate::error::{ensure, Result};
use crate::nn::{softmax_last, Conv1d, ParamStore, RmsNorm, SnakeBeta};

/// Sinusoidal embedding of `t * 1000`, `[B] -> [B, dim]`.
pub fn timestep_embedding(t: &Tensor, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let scale = (10000f64).ln() / (half.max(2) - 1) as f64;
    let freqs: Vec<f64> = (0..half).map(|i| (-(i as f64) * scale).exp()).collect();
    let freqs = Tensor::from_vec(freqs, (1, half), t.device())?.to_dtype(t.dtype())?;
    let args = (t.unsqueeze(1)? * 1000.0)?.broadcast_mul(&freqs)?;
    let mut emb = Tensor::cat(&[args.sin()?, args.cos()?], 1)?;
    if dim % 2 == 1 {
        emb = emb.pad_with_zeros(1, 0, 1)?;
    }
    Ok(emb)
}

/// Convolution, group norm and SiLU.
struct Block1d {
    conv: Conv1d,
    norm: GroupNorm,
}

impl Block1d {
    fn new(p: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, groups: usize) -> Result<Self> {
        p.scoped(name, |p| {
            let conv = p.conv1d("conv", in_ch, out_ch, 3, pad1())?;
            let w = p.constant("norm_weight", &[out_ch], 1.0)?;
            let b = p.constant("norm_bias", &[out_ch], 0.0)?;
            Ok(Self {
                conv,
                norm: GroupNorm::new(w, b, out_ch, groups, 1e-5)?,
            })
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.silu()?)
    }
}

fn pad1() -> Conv1dConfig {
    Conv1dConfig {
        padding: 1,
        ..Default::default()
    }
}

struct ResnetBlock {
    b1: Block1d,
    b2: Block1d,
    time: Linear,
    res: Option<Conv1d>,
}

impl ResnetBlock {
    fn new(p: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, cfg: &CFMConfig) -> Result<Self> {
        p.scoped(name, |p| {
            Ok(Self {
                b1: Block1d::new(p, "block1", in_ch, out_ch, cfg.groups)?,
                b2: Block1d::new(p, "block2", out_ch, out_ch, cfg.groups)?,
                time: p.linear("time", cfg.time_dim, out_ch, true)?,
                res: if in_ch != out_ch {
                    Some(p.conv1d("res", in_ch, out_ch, 1, Default::default())?)
                } else {
                    None
                },
            })
        })
    }

    /// `x`: `[B, C, T]`, `temb`: `[B, time_dim]`.
    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.b1.forward(x)?;
        let tb = self.time.forward(&temb.silu()?)?.unsqueeze(2)?;
        let h = self.b2.forward(&h.broadcast_add(&tb)?)?;
        let skip = match &self.res {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Bidirectional self-attention and a snake-activated feed-forward.
struct TransformerBlock {
    norm1: RmsNorm,
    qkv: Linear,
    out: Linear,
    norm2: RmsNorm,
    ff_in: Linear,
    act: SnakeBeta,
    ff_out: Linear,
    heads: usize,
}

impl TransformerBlock {
    fn new(p: &mut ParamStore, name: &str, cfg: &CFMConfig) -> Result<Self> {
        let c = cfg.intermediate_dim;
        let ff = c * cfg.ff_mult;
        p.scoped(name, |p| {
            Ok(Self {
                norm1: p.rms_norm("norm1", c)?,
                qkv: p.linear("qkv", c, 3 * c, false)?,
                out: p.linear("out", c, c, true)?,
                norm2: p.rms_norm("norm2", c)?,
                ff_in: p.linear("ff_in", c, ff, true)?,
                act: SnakeBeta::new(p, "act", ff)?,
                ff_out: p.linear("ff_out", ff, c, true)?,
                heads: cfg.heads,
            })
        })
    }

    /// `[B, C, T] -> [B, C, T]`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = x.transpose(1, 2)?.contiguous()?;
        let (b, t, c) = h.dims3()?;
        let dh = c / self.heads;
        let qkv = self.qkv.forward(&self.norm1.forward(&h)?)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(D::Minus1, i * c, c)?
                .reshape((b, t, self.heads, dh))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        let att = softmax_last(&scores)?.matmul(&v)?;
        let att = att.transpose(1, 2)?.contiguous()?.reshape((b, t, c))?;
        let h = (h + self.out.forward(&att)?)?;
        let f = self.ff_in.forward(&self.norm2.forward(&h)?)?;
        let f = self.ff_out.forward(&self.act.forward(&f)?)?;
        Ok((h + f)?.transpose(1, 2)?.contiguous()?)
    }
}

struct Level {
    resnet: ResnetBlock,
    transformers: Vec<TransformerBlock>,
    resample: Option<Conv1d>,
}

impl Level {
    fn new(p: &mut ParamStore, name: &str, in_ch: usize, cfg: &CFMConfig, resample: Option<Conv1dConfig>) -> Result<Self> {
        let c = cfg.intermediate_dim;
        p.scoped(name, |p| {
            let resample = match resample {
                Some(rc) => Some(p.conv1d("resample", c, c, 3, rc)?),
                None => None,
            };
            let resnet = ResnetBlock::new(p, "resnet", in_ch, c, cfg)?;
            let transformers = (0..cfg.transformers_per_block)
                .map(|i| TransformerBlock::new(p, &format!("transformer{i}"), cfg))
                .collect::<Result<Vec<_>>>()?;
            Ok(Self {
                resnet,
                transformers,
                resample,
            })
        })
    }

    fn body(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let mut h = self.resnet.forward(x, temb)?;
        for tf in &self.transformers {
            h = tf.forward(&h)?;
        }
        Ok(h)
    }
}

/// One-dimensional U-Net over time. Inputs are channel-concatenated
/// `[x_t, mu, speaker]`; each down level halves the time axis, and inputs
/// whose length is not a multiple of `2^down_blocks` are zero-padded and the
/// output cropped back.
pub struct UNet1d {
    cfg: CFMConfig,
    time1: Linear,
    time2: Linear,
    down: Vec<Level>,
    mid: Vec<Level>,
    up: Vec<Level>,
    final_block: Block1d,
    final_conv: Conv1d,
}

impl UNet1d {
    pub fn new(p: &mut ParamStore, name: &str, cfg: &CFMConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.intermediate_dim;
        p.scoped(name, |p| {
            let time1 = p.linear("time1", c, cfg.time_dim, true)?;
            let time2 = p.linear("time2", cfg.time_dim, cfg.time_dim, true)?;
            let stride2 = Conv1dConfig {
                padding: 1,
                stride: 2,
                ..Default::default()
            };
            let down = (0..cfg.down_blocks)
                .map(|i| {
                    let input = if i == 0 { cfg.input_dim } else { c };
                    Level::new(p, &format!("down{i}"), input, cfg, Some(stride2))
                })
                .collect::<Result<Vec<_>>>()?;
            let mid = (0..cfg.mid_blocks)
                .map(|i| Level::new(p, &format!("mid{i}"), c, cfg, None))
                .collect::<Result<Vec<_>>>()?;
            let up = (0..cfg.up_blocks)
                .map(|i| Level::new(p, &format!("up{i}"), 2 * c, cfg, Some(pad1())))
                .collect::<Result<Vec<_>>>()?;
            let final_block = Block1d::new(p, "final_block", c, c, cfg.groups)?;
            let final_conv = if cfg.zero_init_out {
                p.scoped("final_conv", |p| {
                    let w = p.constant("weight", &[cfg.mel_dim, c, 1], 0.0)?;
                    let b = p.constant("bias", &[cfg.mel_dim], 0.0)?;
                    Ok(Conv1d::new(w, Some(b), Default::default()))
                })?
            } else {
                p.conv1d("final_conv", c, cfg.mel_dim, 1, Default::default())?
            };
            Ok(Self {
                cfg: cfg.clone(),
                time1,
                time2,
                down,
                mid,
                up,
                final_block,
                final_conv,
            })
        })
    }

    /// `x`, `mu`: `[B, T, mel_dim]`; `spk`: `[B, speaker_dim]`; `t`: `[B]`.
    pub fn forward(&self, x: &Tensor, t: &Tensor, mu: &Tensor, spk: &Tensor) -> Result<Tensor> {
        let (b, len, _) = x.dims3()?;
        let spk = spk.unsqueeze(1)?.broadcast_as((b, len, spk.dim(1)?))?;
        let input = Tensor::cat(&[x, mu, &spk], 2)?;
        ensure!(
            input.dim(2)? == self.cfg.input_dim,
            "assembled {} input channels, expected {}",
            input.dim(2)?,
            self.cfg.input_dim
        );
        let unit = 1usize << self.cfg.down_blocks;
        let padded = len.div_ceil(unit) * unit;
        let mut h = input.transpose(1, 2)?.contiguous()?;
        if padded > len {
            h = h.pad_with_zeros(2, 0, padded - len)?;
        }
        let temb = timestep_embedding(t, self.cfg.intermediate_dim)?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?;

        let mut skips = Vec::new();
        for level in &self.down {
            h = level.body(&h, &temb)?;
            skips.push(h.clone());
            h = level.resample.as_ref().expect("down levels resample").forward(&h)?;
        }
        for level in &self.mid {
            h = level.body(&h, &temb)?;
        }
        for level in &self.up {
            let (bb, c, tt) = h.dims3()?;
            let up = h.unsqueeze(3)?.broadcast_as((bb, c, tt, 2))?.reshape((bb, c, 2 * tt))?;
            let up = level.resample.as_ref().expect("up levels resample").forward(&up)?;
            let skip = skips.pop().expect("one skip per level");
            h = level.body(&Tensor::cat(&[&up, &skip], 1)?, &temb)?;
        }
        let out = self.final_conv.forward(&self.final_block.forward(&h)?)?;
        Ok(out.narrow(2, 0, len)?.transpose(1, 2)?.contiguous()?)
    }
}

impl VectorField for UNet1d {
    fn eval(&self, x: &Tensor, t: &Tensor, cond: &FieldCondition) -> Result<Tensor> {
        let mu = cond
            .mu
            .as_ref()
            .ok_or_else(|| crate::error::Error::invalid("U-Net field needs condition frames"))?;
        let spk = cond
            .spk
            .as_ref()
            .ok_or_else(|| crate::error::Error::invalid("U-Net field needs a speaker embedding"))?;
        self.forward(x, t, mu, spk)
    }
}
