//! Two-dimensional flow-matching toy: a ring of eight Gaussians, a small MLP
//! vector field and the energy distance used to score samples.

use candle_core::{DType, Device, Tensor};
use candle_nn::{Linear, Module};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::unet::timestep_embedding;
use super::{cfm_loss, euler_sample, FieldCondition, VectorField};
use crate::error::{ensure, Result};
use crate::nn::{scalar_f64, to_f64_vec, Adam, ParamStore};

pub const RING_RADIUS: f64 = 2.0;
pub const RING_STD: f64 = 0.1;

/// `n` points from an equal-weight mixture of eight isotropic Gaussians
/// centred on a circle.
pub fn eight_gaussians(n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let k = rng.random_range(0..8) as f64;
            let a = k * std::f64::consts::FRAC_PI_4;
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            [RING_RADIUS * a.cos() + RING_STD * nx, RING_RADIUS * a.sin() + RING_STD * ny]
        })
        .collect()
}

/// `2 E|X - Y| - E|X - X'| - E|Y - Y'|` with all pairs (V-statistic).
pub fn energy_distance(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let mean_dist = |p: &[[f64; 2]], q: &[[f64; 2]]| {
        let mut s = 0.0;
        for x in p {
            for y in q {
                s += ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt();
            }
        }
        s / (p.len() * q.len()) as f64
    };
    2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)
}

/// MLP field on `[B, 1, 2]` points with a sinusoidal time embedding.
pub struct ToyField {
    pub store: ParamStore,
    layers: Vec<Linear>,
    time_dim: usize,
}

impl ToyField {
    pub fn new(seed: u64, hidden: usize, dtype: DType) -> Result<Self> {
        let time_dim = 32;
        let mut store = ParamStore::new(seed, dtype);
        let dims = [2 + time_dim, hidden, hidden, hidden, 2];
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| store.linear(&format!("l{i}"), w[0], w[1], true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            store,
            layers,
            time_dim,
        })
    }
}

impl VectorField for ToyField {
    fn eval(&self, x: &Tensor, t: &Tensor, _cond: &FieldCondition) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        ensure!(n == 1 && d == 2, "toy field expects [B, 1, 2] input");
        let temb = timestep_embedding(t, self.time_dim)?;
        let mut h = Tensor::cat(&[&x.reshape((b, 2))?, &temb], 1)?;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i < last {
                h = h.silu()?;
            }
        }
        Ok(h.reshape((b, 1, 2))?)
    }
}

fn to_tensor(points: &[[f64; 2]], dtype: DType) -> Result<Tensor> {
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (points.len(), 1, 2), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Settings for fitting the toy field.
#[derive(Debug, Clone)]
pub struct ToyTraining {
    pub steps: usize,
    pub batch: usize,
    pub hidden: usize,
    pub lr: f64,
    pub sigma_min: f64,
}

impl Default for ToyTraining {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 256,
            hidden: 128,
            lr: 2e-3,
            sigma_min: 1e-4,
        }
    }
}

/// Fit a field on fresh mixture samples every step; returns the field and
/// the loss history.
pub fn train_toy(seed: u64, cfg: &ToyTraining) -> Result<(ToyField, Vec<f64>)> {
    let field = ToyField::new(seed, cfg.hidden, DType::F32)?;
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for _ in 0..cfg.steps {
        let x1 = to_tensor(&eight_gaussians(cfg.batch, rng.random()), DType::F32)?;
        let loss = cfm_loss(&field, &x1, &FieldCondition::default(), None, cfg.sigma_min, rng.random())?;
        losses.push(scalar_f64(&loss)?);
        opt.backward_step(&field.store, &loss)?;
    }
    Ok((field, losses))
}

/// Draw `n` points from a field with `steps` Euler steps.
pub fn sample_toy(field: &dyn VectorField, n: usize, steps: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    let x = euler_sample(field, &[n, 1, 2], &FieldCondition::default(), steps, seed, DType::F32)?;
    let v = to_f64_vec(&x)?;
    Ok(v.chunks(2).map(|c| [c[0], c[1]]).collect())
}
