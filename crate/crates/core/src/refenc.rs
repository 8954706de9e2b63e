//! Reference encoder: mel excerpt to a global speaker embedding.
//!
//! Frames pass through a per-frame feed-forward stack, then one self-attention
//! layer without positional information, then an average over time. Attention
//! weights come from learned query/key projections; the values are the
//! feed-forward outputs themselves, so a one-frame input maps to its own
//! feed-forward image. The whole encoder is invariant to frame order.

use candle_core::{Tensor, D};
use candle_nn::{Linear, Module};
use serde::{Deserialize, Serialize};

use crate::audio::{MelSpectrogram, N_MELS};
use crate::error::{ensure, Result};
use crate::nn::{softmax_last, to_f64_vec, ParamStore};

pub const SPEAKER_DIM: usize = 64;

/// Global timbre vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    values: Vec<f32>,
}

impl SpeakerEmbedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        ensure!(
            values.len() == SPEAKER_DIM,
            "speaker embedding must have {SPEAKER_DIM} values, got {}",
            values.len()
        );
        ensure!(values.iter().all(|v| v.is_finite()), "non-finite speaker embedding");
        Ok(Self { values })
    }

    pub fn zeros() -> Self {
        Self {
            values: vec![0.0; SPEAKER_DIM],
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefEncoderConfig {
    pub mel_dim: usize,
    /// Widths of the feed-forward stack; the last one is the embedding size.
    pub widths: Vec<usize>,
}

impl Default for RefEncoderConfig {
    fn default() -> Self {
        Self {
            mel_dim: N_MELS,
            widths: vec![128, 128, SPEAKER_DIM],
        }
    }
}

pub struct RefEncoder {
    layers: Vec<Linear>,
    query: Linear,
    key: Linear,
    out_dim: usize,
}

impl RefEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &RefEncoderConfig) -> Result<Self> {
        ensure!(!cfg.widths.is_empty(), "reference encoder needs at least one layer");
        store.scoped(name, |p| {
            let mut layers = Vec::new();
            let mut in_dim = cfg.mel_dim;
            for (i, &w) in cfg.widths.iter().enumerate() {
                layers.push(p.linear(&format!("ff{i}"), in_dim, w, true)?);
                in_dim = w;
            }
            Ok(Self {
                layers,
                query: p.linear("query", in_dim, in_dim, false)?,
                key: p.linear("key", in_dim, in_dim, false)?,
                out_dim: in_dim,
            })
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Per-frame feed-forward image, `[..., T, mel] -> [..., T, out]`.
    pub fn feed_forward(&self, mel: &Tensor) -> Result<Tensor> {
        let mut h = mel.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.silu()?;
            }
        }
        Ok(h)
    }

    /// `[B, T, mel] -> [B, out]`.
    pub fn forward(&self, mel: &Tensor) -> Result<Tensor> {
        let (_, t, _) = mel.dims3()?;
        ensure!(t >= 1, "reference mel must have at least one frame");
        let h = self.feed_forward(mel)?;
        let q = self.query.forward(&h)?;
        let k = self.key.forward(&h)?;
        let scale = 1.0 / (self.out_dim as f64).sqrt();
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? * scale)?;
        let att = softmax_last(&scores)?;
        let mixed = att.matmul(&h)?;
        Ok(mixed.mean(D::Minus2)?)
    }

    pub fn mel_tensor(&self, mel: &MelSpectrogram, store: &ParamStore) -> Result<Tensor> {
        Ok(Tensor::from_slice(mel.as_slice(), (1, mel.n_frames(), mel.n_mels()), store.device())?
            .to_dtype(store.dtype())?)
    }

    pub fn encode_reference(&self, mel: &MelSpectrogram, store: &ParamStore) -> Result<SpeakerEmbedding> {
        ensure!(mel.n_frames() >= 1, "reference mel is empty");
        let x = self.mel_tensor(mel, store)?;
        let e = self.forward(&x)?;
        let values = to_f64_vec(&e)?.into_iter().map(|v| v as f32).collect();
        SpeakerEmbedding::new(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_mel(frames: usize, seed: u64) -> MelSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..frames * N_MELS).map(|_| rng.random_range(-5.0f32..1.0)).collect();
        MelSpectrogram::new(data, frames, N_MELS, 86.1).unwrap()
    }

    #[test]
    fn single_frame_equals_feed_forward_image() {
        let mut store = ParamStore::new(0, DType::F64);
        let enc = RefEncoder::new(&mut store, "ref", &RefEncoderConfig::default()).unwrap();
        let mel = random_mel(1, 1);
        let x = enc.mel_tensor(&mel, &store).unwrap();
        let ff = to_f64_vec(&enc.feed_forward(&x).unwrap()).unwrap();
        let e = to_f64_vec(&enc.forward(&x).unwrap()).unwrap();
        for (a, b) in ff.iter().zip(&e) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_order_does_not_matter() {
        let mut store = ParamStore::new(1, DType::F64);
        let enc = RefEncoder::new(&mut store, "ref", &RefEncoderConfig::default()).unwrap();
        let mel = random_mel(30, 2);
        let base = enc.encode_reference(&mel, &store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut order: Vec<usize> = (0..30).collect();
        order.shuffle(&mut rng);
        let permuted: Vec<f32> = order.iter().flat_map(|&t| mel.frame(t).to_vec()).collect();
        let pm = MelSpectrogram::new(permuted, 30, N_MELS, 86.1).unwrap();
        let e = enc.encode_reference(&pm, &store).unwrap();
        for (a, b) in base.values().iter().zip(e.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn three_second_reference_and_empty_input() {
        let mut store = ParamStore::new(2, DType::F32);
        let enc = RefEncoder::new(&mut store, "ref", &RefEncoderConfig::default()).unwrap();
        let e = enc.encode_reference(&random_mel(258, 4), &store).unwrap();
        assert_eq!(e.values().len(), SPEAKER_DIM);
        let empty = MelSpectrogram::new(vec![], 0, N_MELS, 86.1).unwrap();
        assert!(enc.encode_reference(&empty, &store).is_err());
    }

    #[test]
    fn two_instances_do_not_share_parameters() {
        let mut store = ParamStore::new(5, DType::F32);
        let a = RefEncoder::new(&mut store, "lm_ref", &RefEncoderConfig::default()).unwrap();
        let b = RefEncoder::new(&mut store, "cfm_ref", &RefEncoderConfig::default()).unwrap();
        let wa = a.layers[0].weight();
        let wb = b.layers[0].weight();
        assert_ne!(wa.id(), wb.id());
        assert_ne!(to_f64_vec(wa).unwrap(), to_f64_vec(wb).unwrap());
    }
}
