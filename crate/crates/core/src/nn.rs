//! Small neural-network toolkit on top of candle: seeded parameter storage,
//! the layers shared by the models, an Adam optimizer whose state can be
//! checkpointed, and safetensors persistence.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{Conv1dConfig, Embedding, Linear, Module};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Named trainable parameters created from a seeded RNG.
///
/// Names are kept in a `BTreeMap`, so iteration order (and therefore
/// optimizer updates and checkpoint layout) does not depend on hashing.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    prefix: Vec<String>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            prefix: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Run `f` with `name` pushed onto the parameter-name prefix.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    fn register(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let full = self.full_name(name);
        if self.vars.contains_key(&full) {
            return Err(Error::invalid(format!("duplicate parameter name {full}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(full, var);
        Ok(out)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.register(name, values, shape)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.register(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.register(name, vec![value; n], shape)
    }

    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Linear> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        self.scoped(name, |p| {
            let w = p.uniform("weight", &[out_dim, in_dim], bound)?;
            let b = if bias {
                Some(p.uniform("bias", &[out_dim], bound)?)
            } else {
                None
            };
            Ok(Linear::new(w, b))
        })
    }

    pub fn embedding(&mut self, name: &str, vocab: usize, dim: usize, std: f64) -> Result<Embedding> {
        let table = self.scoped(name, |p| p.normal("weight", &[vocab, dim], std))?;
        Ok(Embedding::new(table, dim))
    }

    pub fn conv1d(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        cfg: Conv1dConfig,
    ) -> Result<Conv1d> {
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        self.scoped(name, |p| {
            let w = p.uniform("weight", &[out_ch, in_ch, kernel], bound)?;
            let b = p.uniform("bias", &[out_ch], bound)?;
            Ok(Conv1d::new(w, Some(b), cfg))
        })
    }

    pub fn rms_norm(&mut self, name: &str, dim: usize) -> Result<RmsNorm> {
        let weight = self.scoped(name, |p| p.constant("weight", &[dim], 1.0))?;
        Ok(RmsNorm { weight, eps: 1e-6 })
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrite every parameter from a safetensors file with the same names
    /// and shapes.
    pub fn load(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
            ));
        }
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        self.assign_from(&tensors)
    }

    pub fn assign_from(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::invalid(format!(
                    "parameter {name} has shape {:?} in checkpoint, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// 1-D convolution lowered to unfold plus matmul. candle's native conv1d
/// backward gives wrong weight and input gradients for batches larger than
/// one, so training goes through this path instead.
#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Option<Tensor>,
    padding: usize,
    stride: usize,
}

impl Conv1d {
    /// `weight` is `[out, in, kernel]`; only padding and stride are honoured.
    pub fn new(weight: Tensor, bias: Option<Tensor>, cfg: Conv1dConfig) -> Self {
        assert!(cfg.dilation == 1 && cfg.groups == 1, "dilated and grouped convolutions are unsupported");
        Self {
            weight,
            bias,
            padding: cfg.padding,
            stride: cfg.stride.max(1),
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Conv1d {
    /// `[B, in, T] -> [B, out, (T + 2 pad - kernel) / stride + 1]`.
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (out_ch, in_ch, k) = self.weight.dims3()?;
        let (b, c, t) = x.dims3()?;
        if c != in_ch {
            candle_core::bail!("conv1d expects {in_ch} input channels, got {c}");
        }
        let padded = t + 2 * self.padding;
        if padded < k {
            candle_core::bail!("conv1d input of length {t} is shorter than the kernel");
        }
        let s = self.stride;
        let t_out = (padded - k) / s + 1;
        // Extra right padding lets every tap take a `t_out * s` window.
        let need = (k - 1) + t_out * s;
        let x = x.pad_with_zeros(2, self.padding, self.padding + need.saturating_sub(padded))?;
        let taps = (0..k)
            .map(|j| {
                let w = x.narrow(2, j, t_out * s)?;
                if s == 1 {
                    Ok(w)
                } else {
                    w.reshape((b, c, t_out, s))?.narrow(3, 0, 1)?.squeeze(3)
                }
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        let cols = Tensor::stack(&taps, 2)?.reshape((b, c * k, t_out))?;
        let w = self.weight.reshape((out_ch, in_ch * k))?;
        let y = w.broadcast_matmul(&cols)?;
        match &self.bias {
            Some(bias) => y.broadcast_add(&bias.reshape((1, out_ch, 1))?),
            None => Ok(y),
        }
    }
}

/// Root-mean-square layer norm with a learned gain.
#[derive(Debug, Clone)]
pub struct RmsNorm {
    weight: Tensor,
    eps: f64,
}

impl Module for RmsNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
        let x = x.broadcast_div(&(ms + self.eps)?.sqrt()?)?;
        x.broadcast_mul(&self.weight)
    }
}

/// Softmax over the last dimension built from differentiable primitives.
/// The row max is detached; softmax is invariant to it.
pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    shifted.broadcast_sub(&lse)
}

/// Additive causal mask `[seq, seq]`: 0 on and below the diagonal, -inf above.
pub fn causal_mask(seq: usize, dtype: DType, device: &Device) -> candle_core::Result<Tensor> {
    let values: Vec<f32> = (0..seq)
        .flat_map(|i| (0..seq).map(move |j| if j > i { f32::NEG_INFINITY } else { 0.0 }))
        .collect();
    Tensor::from_vec(values, (seq, seq), device)?.to_dtype(dtype)
}

/// Rotary position tables for `seq` positions and head dim `head_dim`.
pub struct Rotary {
    cos: Tensor,
    sin: Tensor,
}

impl Rotary {
    pub fn new(seq: usize, head_dim: usize, dtype: DType, device: &Device) -> candle_core::Result<Self> {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for pos in 0..seq {
            for i in 0..half {
                let freq = 10_000f64.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Ok(Self {
            cos: Tensor::from_vec(cos, (seq, half), device)?.to_dtype(dtype)?,
            sin: Tensor::from_vec(sin, (seq, half), device)?.to_dtype(dtype)?,
        })
    }

    /// Rotate `x` of shape `[B, H, S, Dh]` (rotate-half convention).
    pub fn apply(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (_, _, seq, dh) = x.dims4()?;
        let half = dh / 2;
        let cos = self.cos.narrow(0, 0, seq)?;
        let sin = self.sin.narrow(0, 0, seq)?;
        let x1 = x.narrow(D::Minus1, 0, half)?;
        let x2 = x.narrow(D::Minus1, half, half)?;
        let r1 = (x1.broadcast_mul(&cos)? - x2.broadcast_mul(&sin)?)?;
        let r2 = (x1.broadcast_mul(&sin)? + x2.broadcast_mul(&cos)?)?;
        Tensor::cat(&[r1, r2], D::Minus1)
    }
}

/// Snake activation with separate frequency and magnitude parameters, both
/// stored in log scale: `x + sin^2(exp(a) x) / (exp(b) + eps)`.
#[derive(Debug, Clone)]
pub struct SnakeBeta {
    log_alpha: Tensor,
    log_beta: Tensor,
}

impl SnakeBeta {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        store.scoped(name, |p| {
            Ok(Self {
                log_alpha: p.constant("log_alpha", &[channels], 0.0)?,
                log_beta: p.constant("log_beta", &[channels], 0.0)?,
            })
        })
    }
}

impl Module for SnakeBeta {
    /// Channels are the last dimension.
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let alpha = self.log_alpha.exp()?;
        let beta = self.log_beta.exp()?;
        let s = x.broadcast_mul(&alpha)?.sin()?.sqr()?;
        x + s.broadcast_div(&(beta + 1e-9)?)?
    }
}

/// Adam with decoupled weight decay and global-norm gradient clipping.
/// Moments are kept per parameter name so they can be checkpointed.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients of `loss`.
    pub fn backward_step(&mut self, store: &ParamStore, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        let mut pairs = Vec::new();
        for (name, var) in store.vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                pairs.push((name.to_string(), var, g.clone()));
            }
        }
        let mut scale = 1.0;
        if let Some(max_norm) = self.clip_norm {
            let mut total = 0.0f64;
            for (_, _, g) in &pairs {
                total += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
            let norm = total.sqrt();
            if !norm.is_finite() {
                return Err(Error::Numerical("non-finite gradient norm".into()));
            }
            if norm > max_norm {
                scale = max_norm / norm;
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var, g) in pairs {
            let g = (g * scale)?;
            let (m, v) = match self.moments.get(&name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            let mut w = var.as_tensor().clone();
            if self.weight_decay > 0.0 {
                w = (&w * (1.0 - self.lr * self.weight_decay))?;
            }
            var.set(&(w - (update * self.lr)?)?)?;
            self.moments.insert(name, (m, v));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut map = HashMap::new();
        for (name, (m, v)) in &self.moments {
            map.insert(format!("m.{name}"), m.clone());
            map.insert(format!("v.{name}"), v.clone());
        }
        map.insert(
            "step".to_string(),
            Tensor::new(&[self.step as f64], &Device::Cpu)?,
        );
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &Device::Cpu)?;
        let step = map
            .get("step")
            .ok_or_else(|| Error::invalid("optimizer state lacks step"))?
            .to_vec1::<f64>()?[0];
        self.step = step as u64;
        self.moments.clear();
        for (key, m) in &map {
            if let Some(name) = key.strip_prefix("m.") {
                let v = map
                    .get(&format!("v.{name}"))
                    .ok_or_else(|| Error::invalid(format!("optimizer state lacks v.{name}")))?;
                self.moments.insert(name.to_string(), (m.clone(), v.clone()));
            }
        }
        Ok(())
    }
}

/// Copy a tensor of any float dtype into a flat `f64` vector.
/// Generator for training step `step`: one ChaCha stream per step.
pub(crate) fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
