use std::path::Path;

use candle_core::{DType, Tensor, D};
use rand::prelude::*;
use serde::{Deserialize, Serialize};

use super::conditioning::{shift_accompaniment, MaskDescriptor};
use super::{LMConfig, LyricsTokens, SemanticLm};
use crate::audio::MelSpectrogram;
use crate::error::{ensure, Error, Result};
use crate::featurization::{FeatureMatrix, TokenSequence};
use crate::nn::{log_softmax_last, scalar_f64, step_rng, Adam};

/// One training utterance. `accomp` has one frame per semantic token.
#[derive(Debug, Clone)]
pub struct LmExample {
    pub lyrics: LyricsTokens,
    pub semantic: TokenSequence,
    pub accomp: FeatureMatrix,
    pub reference: MelSpectrogram,
}

struct PreparedExample {
    lyrics: LyricsTokens,
    inputs: Vec<u32>,
    targets: Vec<u32>,
    accomp: FeatureMatrix,
    reference: MelSpectrogram,
    mask: MaskDescriptor,
}

/// Examples with shift and masking already applied.
pub struct PreparedBatch {
    items: Vec<PreparedExample>,
}

impl PreparedBatch {
    /// Shift each accompaniment by `cfg.shift_k`, draw its mask from `rng`,
    /// and lay out teacher-forcing inputs and targets (targets end with EOS).
    pub fn new(examples: &[LmExample], cfg: &LMConfig, rng: &mut impl Rng) -> Result<Self> {
        ensure!(!examples.is_empty(), "empty batch");
        let eos = cfg.eos_id();
        let items = examples
            .iter()
            .map(|ex| {
                let content = ex.semantic.content();
                ensure!(!content.is_empty(), "example has an empty semantic region");
                ensure!(
                    ex.semantic.vocab_size() == cfg.semantic_vocab,
                    "semantic vocabulary {} does not match model vocabulary {}",
                    ex.semantic.vocab_size(),
                    cfg.semantic_vocab
                );
                ensure!(
                    ex.accomp.rows() == content.len(),
                    "accompaniment has {} frames for {} semantic tokens",
                    ex.accomp.rows(),
                    content.len()
                );
                let slots = content.len() + 1;
                let mut accomp = shift_accompaniment(&ex.accomp, cfg.shift_k as i64, slots)?;
                let mask = MaskDescriptor::draw(rng, slots, cfg.mask_full_prob);
                mask.apply(&mut accomp);
                let mut inputs = vec![eos];
                inputs.extend_from_slice(content);
                let mut targets = content.to_vec();
                targets.push(eos);
                Ok(PreparedExample {
                    lyrics: ex.lyrics.clone(),
                    inputs,
                    targets,
                    accomp,
                    reference: ex.reference.clone(),
                    mask,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items })
    }

    pub fn masks(&self) -> Vec<MaskDescriptor> {
        self.items.iter().map(|i| i.mask).collect()
    }

    /// Mean cross-entropy over semantic targets (including EOS).
    pub fn loss(&self, model: &SemanticLm) -> Result<Tensor> {
        let dev = model.device();
        let dtype = model.dtype();
        let mut seqs = Vec::with_capacity(self.items.len());
        let mut spans = Vec::with_capacity(self.items.len());
        for it in &self.items {
            let mel = model.ref_encoder.mel_tensor(&it.reference, &model.store)?;
            let spk = model.ref_encoder.forward(&mel)?.squeeze(0)?;
            let mixed = model.build_mixed_sequence(&it.lyrics, &it.inputs, &it.accomp, &spk)?;
            spans.push((mixed.semantic_start(), it.targets.len()));
            seqs.push(mixed.embeddings);
        }
        let max_len = seqs.iter().map(|s| s.dims()[0]).max().unwrap_or(0);
        let hidden = model.cfg.hidden;
        let padded = seqs
            .iter()
            .map(|s| {
                let pad = max_len - s.dim(0)?;
                if pad == 0 {
                    Ok(s.clone())
                } else {
                    Tensor::cat(&[s.clone(), Tensor::zeros((pad, hidden), dtype, dev)?], 0)
                }
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        let x = Tensor::stack(&padded, 0)?;
        let logits = model.forward_embeddings(&x)?;

        let b = self.items.len();
        let mut targets = vec![0u32; b * max_len];
        let mut weights = vec![0f32; b * max_len];
        for (i, (it, &(start, n))) in self.items.iter().zip(&spans).enumerate() {
            for j in 0..n {
                targets[i * max_len + start + j] = it.targets[j];
                weights[i * max_len + start + j] = 1.0;
            }
        }
        let targets = Tensor::from_vec(targets, (b, max_len), dev)?;
        let weights = Tensor::from_vec(weights, (b, max_len), dev)?.to_dtype(dtype)?;
        semantic_cross_entropy(&logits, &targets, &weights)
    }
}

/// Weighted mean of `-log p(target)`; `logits` is `[B, S, V]`, `targets` and
/// `weights` are `[B, S]`.
pub fn semantic_cross_entropy(logits: &Tensor, targets: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let total = scalar_f64(&weights.sum_all()?)?;
    ensure!(total > 0.0, "no semantic targets in batch");
    let logp = log_softmax_last(logits)?;
    let picked = logp.gather(&targets.unsqueeze(D::Minus1)?, D::Minus1)?.squeeze(D::Minus1)?;
    let nll = (picked * weights)?.sum_all()?.neg()?;
    Ok((nll / total)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerState {
    seed: u64,
    step: u64,
    lr: f64,
    config: LMConfig,
}

/// Seeded training loop state for the semantic LM.
pub struct LmTrainer {
    pub model: SemanticLm,
    opt: Adam,
    seed: u64,
    step: u64,
}

impl LmTrainer {
    pub fn new(cfg: &LMConfig, seed: u64, lr: f64) -> Result<Self> {
        Ok(Self {
            model: SemanticLm::new(cfg, seed, DType::F32)?,
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

    /// One optimizer update over `micro_batches` (gradient accumulation:
    /// the micro-batch losses are averaged before the backward pass).
    /// Masking randomness depends only on the trainer seed and step index.
    pub fn train_step(&mut self, micro_batches: &[Vec<LmExample>]) -> Result<f64> {
        ensure!(!micro_batches.is_empty(), "no micro-batches");
        let mut rng = step_rng(self.seed, self.step);
        let mut total: Option<Tensor> = None;
        for mb in micro_batches {
            let loss = PreparedBatch::new(mb, &self.model.cfg, &mut rng)?.loss(&self.model)?;
            total = Some(match total {
                None => loss,
                Some(t) => (t + loss)?,
            });
        }
        let loss = (total.expect("non-empty") / micro_batches.len() as f64)?;
        let value = scalar_f64(&loss)?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite LM loss at step {}", self.step)));
        }
        self.opt.backward_step(&self.model.store, &loss)?;
        self.step += 1;
        Ok(value)
    }

    /// Writes `<stem>.safetensors`, `<stem>.optim.safetensors` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save(dir, stem)?;
        self.opt.save(&dir.join(format!("{stem}.optim.safetensors")))?;
        let state = TrainerState {
            seed: self.seed,
            step: self.step,
            lr: self.opt.lr,
            config: self.model.cfg.clone(),
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
        let model = SemanticLm::load(dir, stem)?;
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

impl SemanticLm {
    /// Writes `<stem>.safetensors` (parameters) and `<stem>.json` (config).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save(&dir.join(format!("{stem}.safetensors")))?;
        crate::formats::write_text(
            &dir.join(format!("{stem}.json")),
            &serde_json::to_string_pretty(&self.cfg)?,
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let cfg: LMConfig =
            serde_json::from_str(&crate::formats::read_text(&dir.join(format!("{stem}.json")))?)?;
        let model = SemanticLm::new(&cfg, 0, DType::F32)?;
        model.store.load(&dir.join(format!("{stem}.safetensors")))?;
        Ok(model)
    }
}
