use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{Embedding, Linear, Module};
use rand::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cfm_loss, euler_sample, CFMConfig, FieldCondition, UNet1d};
use crate::audio::{MelSpectrogram, MEL_FRAME_RATE_HZ};
use crate::error::{ensure, Error, Result};
use crate::featurization::{interpolation_indices, TokenSequence};
use crate::nn::{scalar_f64, step_rng, to_f64_vec, Adam, ParamStore};
use crate::refenc::RefEncoder;

/// Per-channel log-mel statistics used to normalize decoder targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl MelStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Mean and standard deviation of every channel over all frames; the
    /// deviation is floored at 1e-3.
    pub fn fit(mels: &[MelSpectrogram]) -> Result<Self> {
        ensure!(!mels.is_empty(), "no spectrograms to fit statistics on");
        let dim = mels[0].n_mels();
        let mut sum = vec![0f64; dim];
        let mut sq = vec![0f64; dim];
        let mut n = 0usize;
        for m in mels {
            ensure!(m.n_mels() == dim, "mixed mel channel counts");
            for t in 0..m.n_frames() {
                for (c, &v) in m.frame(t).iter().enumerate() {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            n += m.n_frames();
        }
        ensure!(n > 0, "spectrograms have no frames");
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / n as f64 - m * m).max(0.0).sqrt().max(1e-3)) as f32)
            .collect();
        Ok(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    pub fn normalize(&self, mel: &MelSpectrogram) -> Vec<f32> {
        let dim = self.mean.len();
        mel.as_slice()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i % dim]) / self.std[i % dim])
            .collect()
    }

    pub fn denormalize(&self, values: &[f32]) -> Vec<f32> {
        let dim = self.mean.len();
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| v * self.std[i % dim] + self.mean[i % dim])
            .collect()
    }
}

/// One training utterance: semantic tokens, the matching target mel and a
/// reference excerpt of the same speaker.
#[derive(Debug, Clone)]
pub struct CfmExample {
    pub tokens: TokenSequence,
    pub mel: MelSpectrogram,
    pub reference: MelSpectrogram,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: CFMConfig,
    stats: MelStats,
}

/// Semantic-token to mel decoder: a learned token embedding projected to the
/// mel width forms the condition frames, a reference encoder provides the
/// speaker vector, and a U-Net predicts the flow.
pub struct CfmModel {
    pub cfg: CFMConfig,
    pub store: ParamStore,
    token_emb: Embedding,
    token_proj: Linear,
    pub ref_encoder: RefEncoder,
    unet: UNet1d,
    pub stats: MelStats,
}

impl CfmModel {
    pub fn new(cfg: &CFMConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let p = &mut store;
        let token_emb = p.embedding("token_emb", cfg.token_vocab, cfg.token_emb_dim, 1.0)?;
        let token_proj = p.linear("token_proj", cfg.token_emb_dim, cfg.mel_dim, true)?;
        let ref_encoder = RefEncoder::new(p, "ref_encoder", &cfg.ref_encoder)?;
        let unet = UNet1d::new(p, "unet", cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            token_emb,
            token_proj,
            ref_encoder,
            unet,
            stats: MelStats::identity(cfg.mel_dim),
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn unet(&self) -> &UNet1d {
        &self.unet
    }

    /// Token ids at the mel frame rate (end-of-sequence marker dropped).
    pub fn aligned_ids(&self, tokens: &TokenSequence) -> Result<Vec<u32>> {
        ensure!(
            tokens.vocab_size() <= self.cfg.token_vocab,
            "token vocabulary {} exceeds decoder vocabulary {}",
            tokens.vocab_size(),
            self.cfg.token_vocab
        );
        let content = tokens.content();
        Ok(interpolation_indices(content.len(), tokens.frame_rate_hz(), MEL_FRAME_RATE_HZ)
            .into_iter()
            .map(|i| content[i])
            .collect())
    }

    /// Condition frames `[B, T, mel_dim]` for a `[B, T]` id tensor.
    pub fn condition_frames(&self, ids: &Tensor) -> Result<Tensor> {
        Ok(self.token_proj.forward(&self.token_emb.forward(ids)?)?)
    }

    /// `[B, speaker_dim]` from reference excerpts.
    pub fn speakers(&self, refs: &[&MelSpectrogram]) -> Result<Tensor> {
        let rows = refs
            .iter()
            .map(|m| self.ref_encoder.forward(&self.ref_encoder.mel_tensor(m, &self.store)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&rows, 0)?)
    }

    /// Loss on fixed-length crops of `segment_frames`; shorter utterances are
    /// zero-padded and the padding is masked out of the mean.
    pub fn loss(&self, batch: &[CfmExample], rng: &mut impl Rng) -> Result<Tensor> {
        ensure!(!batch.is_empty(), "empty batch");
        let seg = self.cfg.segment_frames;
        let dim = self.cfg.mel_dim;
        let mut x1 = vec![0f32; batch.len() * seg * dim];
        let mut ids = vec![0u32; batch.len() * seg];
        let mut mask = vec![0f32; batch.len() * seg];
        for (b, ex) in batch.iter().enumerate() {
            ensure!(ex.mel.n_mels() == dim, "target mel has {} channels", ex.mel.n_mels());
            let aligned = self.aligned_ids(&ex.tokens)?;
            let len = aligned.len().min(ex.mel.n_frames());
            ensure!(len > 0, "example has no aligned frames");
            let start = if len > seg { rng.random_range(0..=len - seg) } else { 0 };
            let take = len.min(seg);
            let norm = self.stats.normalize(&ex.mel.excerpt(start, take));
            x1[b * seg * dim..(b * seg + take) * dim].copy_from_slice(&norm);
            ids[b * seg..b * seg + take].copy_from_slice(&aligned[start..start + take]);
            mask[b * seg..b * seg + take].fill(1.0);
        }
        let dev = self.device();
        let dt = self.dtype();
        let x1 = Tensor::from_vec(x1, (batch.len(), seg, dim), dev)?.to_dtype(dt)?;
        let ids = Tensor::from_vec(ids, (batch.len(), seg), dev)?;
        let mask = Tensor::from_vec(mask, (batch.len(), seg), dev)?.to_dtype(dt)?;
        let refs: Vec<&MelSpectrogram> = batch.iter().map(|e| &e.reference).collect();
        let cond = FieldCondition {
            mu: Some(self.condition_frames(&ids)?),
            spk: Some(self.speakers(&refs)?),
        };
        cfm_loss(&self.unet, &x1, &cond, Some(&mask), self.cfg.sigma_min, rng.random())
    }

    /// Generate a mel for `tokens` in the voice of `reference`.
    pub fn sample(
        &self,
        tokens: &TokenSequence,
        reference: &MelSpectrogram,
        steps: usize,
        seed: u64,
    ) -> Result<MelSpectrogram> {
        let aligned = self.aligned_ids(tokens)?;
        ensure!(!aligned.is_empty(), "no tokens to decode");
        let t = aligned.len();
        let ids = Tensor::from_vec(aligned, (1, t), self.device())?;
        let cond = FieldCondition {
            mu: Some(self.condition_frames(&ids)?),
            spk: Some(self.speakers(&[reference])?),
        };
        let x = euler_sample(&self.unet, &[1, t, self.cfg.mel_dim], &cond, steps, seed, self.dtype())?;
        let values: Vec<f32> = to_f64_vec(&x)?.into_iter().map(|v| v as f32).collect();
        MelSpectrogram::new(self.stats.denormalize(&values), t, self.cfg.mel_dim, MEL_FRAME_RATE_HZ)
    }

    /// Writes `<stem>.safetensors` and `<stem>.json` (config and statistics).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save(&dir.join(format!("{stem}.safetensors")))?;
        let meta = ModelMeta {
            config: self.cfg.clone(),
            stats: self.stats.clone(),
        };
        crate::formats::write_text(&dir.join(format!("{stem}.json")), &serde_json::to_string_pretty(&meta)?)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let meta: ModelMeta =
            serde_json::from_str(&crate::formats::read_text(&dir.join(format!("{stem}.json")))?)?;
        let mut model = CfmModel::new(&meta.config, 0, DType::F32)?;
        model.store.load(&dir.join(format!("{stem}.safetensors")))?;
        model.stats = meta.stats;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    seed: u64,
    step: u64,
    lr: f64,
}

/// Seeded training loop state for the decoder.
pub struct CfmTrainer {
    pub model: CfmModel,
    opt: Adam,
    seed: u64,
    step: u64,
}

impl CfmTrainer {
    pub fn new(cfg: &CFMConfig, seed: u64, lr: f64) -> Result<Self> {
        Ok(Self {
            model: CfmModel::new(cfg, seed, DType::F32)?,
            opt: Adam::new(lr),
            seed,
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// One optimizer update; micro-batch losses are averaged first.
    pub fn train_step(&mut self, micro_batches: &[Vec<CfmExample>]) -> Result<f64> {
        ensure!(!micro_batches.is_empty(), "no micro-batches");
        let mut rng = step_rng(self.seed, self.step);
        let mut total: Option<Tensor> = None;
        for mb in micro_batches {
            let loss = self.model.loss(mb, &mut rng)?;
            total = Some(match total {
                None => loss,
                Some(t) => (t + loss)?,
            });
        }
        let loss = (total.expect("non-empty") / micro_batches.len() as f64)?;
        let value = scalar_f64(&loss)?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite CFM loss at step {}", self.step)));
        }
        self.opt.backward_step(&self.model.store, &loss)?;
        self.step += 1;
        Ok(value)
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        self.model.save(dir, stem)?;
        self.opt.save(&dir.join(format!("{stem}.optim.safetensors")))?;
        let state = TrainerState {
            seed: self.seed,
            step: self.step,
            lr: self.opt.lr,
        };
        crate::formats::write_text(
            &dir.join(format!("{stem}.trainer.json")),
            &serde_json::to_string_pretty(&state)?,
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let state: TrainerState = serde_json::from_str(&crate::formats::read_text(
            &dir.join(format!("{stem}.trainer.json")),
        )?)?;
        let model = CfmModel::load(dir, stem)?;
        let mut opt = Adam::new(state.lr);
        opt.load(&dir.join(format!("{stem}.optim.safetensors")))?;
        Ok(Self {
            model,
            opt,
            seed: state.seed,
            step: state.step,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refenc::RefEncoderConfig;

    fn tiny() -> CFMConfig {
        CFMConfig {
            mel_dim: 8,
            speaker_dim: 4,
            input_dim: 20,
            intermediate_dim: 8,
            groups: 2,
            heads: 2,
            ff_mult: 2,
            time_dim: 8,
            transformers_per_block: 1,
            token_vocab: 6,
            token_emb_dim: 4,
            segment_frames: 16,
            ref_encoder: RefEncoderConfig {
                mel_dim: 8,
                widths: vec![4],
            },
            ..CFMConfig::default()
        }
    }

    fn example(seed: u64, tokens: usize) -> CfmExample {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut ids: Vec<u32> = (0..tokens).map(|_| rng.random_range(0..5)).collect();
        ids.push(5);
        let tokens = TokenSequence::new(ids, 6, 50.0).unwrap();
        let frames = crate::featurization::resampled_len(tokens.content().len(), 50.0, MEL_FRAME_RATE_HZ);
        // mel channels follow the token id so the mapping is learnable
        let aligned: Vec<usize> = interpolation_indices(tokens.content().len(), 50.0, MEL_FRAME_RATE_HZ);
        let mut mel = Vec::new();
        for &i in &aligned {
            let id = tokens.content()[i] as f32;
            mel.extend((0..8).map(|c| id * 0.5 - c as f32 * 0.1));
        }
        CfmExample {
            tokens,
            mel: MelSpectrogram::new(mel, frames, 8, MEL_FRAME_RATE_HZ).unwrap(),
            reference: MelSpectrogram::filled(5, 8, 0.3),
        }
    }

    #[test]
    fn stats_round_trip() {
        let a = MelSpectrogram::new(vec![1.0, 2.0, 3.0, 6.0], 2, 2, MEL_FRAME_RATE_HZ).unwrap();
        let s = MelStats::fit(&[a.clone()]).unwrap();
        assert_eq!(s.mean, vec![2.0, 4.0]);
        assert_eq!(s.std, vec![1.0, 2.0]);
        assert_eq!(s.normalize(&a), vec![-1.0, -1.0, 1.0, 1.0]);
        assert_eq!(s.denormalize(&s.normalize(&a)), a.as_slice());
    }

    #[test]
    fn sample_length_follows_token_rate() {
        let m = CfmModel::new(&tiny(), 0, DType::F32).unwrap();
        let ex = example(1, 50);
        let mel = m.sample(&ex.tokens, &ex.reference, 3, 2).unwrap();
        assert_eq!(mel.n_frames(), 86);
        assert_eq!(mel.n_mels(), 8);
        assert_eq!(mel.as_slice(), m.sample(&ex.tokens, &ex.reference, 3, 2).unwrap().as_slice());
    }

    #[test]
    fn training_reduces_loss_and_resumes_exactly() {
        let data: Vec<Vec<CfmExample>> = (0..4).map(|i| vec![example(i, 8), example(i + 10, 12)]).collect();
        let mut tr = CfmTrainer::new(&tiny(), 3, 3e-3).unwrap();
        let mut losses = Vec::new();
        for step in 0..60 {
            losses.push(tr.train_step(&[data[step % 4].clone()]).unwrap());
        }
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[50..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");

        let dir = tempfile::tempdir().unwrap();
        tr.save(dir.path(), "cfm").unwrap();
        let mut resumed = CfmTrainer::load(dir.path(), "cfm").unwrap();
        assert_eq!(resumed.step(), 60);
        for step in 60..63 {
            let a = tr.train_step(&[data[step % 4].clone()]).unwrap();
            let b = resumed.train_step(&[data[step % 4].clone()]).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn oversized_vocabulary_is_rejected() {
        let m = CfmModel::new(&tiny(), 0, DType::F32).unwrap();
        let t = TokenSequence::new(vec![7, 9], 10, 50.0).unwrap();
        assert!(m.aligned_ids(&t).is_err());
    }
}
