use candle_core::Tensor;
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conditioning::shift_accompaniment;
use super::{LyricsTokens, SemanticLm};
use crate::error::{ensure, Result};
use crate::featurization::{FeatureMatrix, TokenSequence};
use crate::nn::to_f64_vec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Values at or below zero select greedy decoding.
    pub temperature: f64,
    /// 0 keeps the full vocabulary.
    pub top_k: usize,
    pub seed: u64,
    /// Cap on generated semantic tokens, on top of the model's `max_len`.
    #[serde(default)]
    pub max_tokens: Option<usize>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.9,
            top_k: 40,
            seed: 0,
            max_tokens: None,
        }
    }
}

impl SamplingConfig {
    pub fn greedy() -> Self {
        Self {
            temperature: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Ends with the end-of-sequence id unless `truncated`.
    pub tokens: TokenSequence,
    pub truncated: bool,
}

fn pick(logits: &[f64], cfg: &SamplingConfig, rng: &mut ChaCha8Rng) -> u32 {
    let argmax = || {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        best as u32
    };
    if cfg.temperature <= 0.0 {
        return argmax();
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    if cfg.top_k > 0 {
        order.truncate(cfg.top_k);
    }
    let top = logits[order[0]];
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| ((logits[i] - top) / cfg.temperature).exp())
        .collect();
    match WeightedIndex::new(&weights) {
        Ok(dist) => order[dist.sample(rng)] as u32,
        Err(_) => argmax(),
    }
}

impl SemanticLm {
    /// Autoregressive sampling. At semantic step `t` the model sees
    /// accompaniment frame `t + K` (zeros past its end). Stops at the
    /// end-of-sequence id or when the sequence budget is exhausted, in which
    /// case the result is flagged as truncated.
    pub fn generate_semantic(
        &self,
        lyrics: &LyricsTokens,
        accomp: &FeatureMatrix,
        speaker: &Tensor,
        sampling: &SamplingConfig,
    ) -> Result<Generation> {
        ensure!(!lyrics.is_empty(), "generation needs non-empty lyrics");
        let budget = self.cfg.max_len.saturating_sub(1 + lyrics.len());
        let limit = sampling.max_tokens.map_or(budget, |m| m.min(budget));
        let eos = self.cfg.eos_id();
        let shifted = shift_accompaniment(accomp, self.cfg.shift_k as i64, limit + 1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
        let mut inputs = vec![eos];
        let mut out = Vec::new();
        let mut truncated = true;
        while out.len() < limit {
            let slots = inputs.len();
            let acc = FeatureMatrix::new(
                shifted.as_slice()[..slots * shifted.dim()].to_vec(),
                slots,
                shifted.dim(),
                shifted.frame_rate_hz,
            )?;
            let mixed = self.build_mixed_sequence(lyrics, &inputs, &acc, speaker)?;
            let logits = self.lm_forward(&mixed)?;
            let last = to_f64_vec(&logits.get(mixed.len() - 1)?)?;
            let id = pick(&last, sampling, &mut rng);
            out.push(id);
            if id == eos {
                truncated = false;
                break;
            }
            inputs.push(id);
        }
        Ok(Generation {
            tokens: TokenSequence::new(out, self.cfg.semantic_vocab, accomp.frame_rate_hz)?,
            truncated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LMConfig;
    use candle_core::DType;

    fn tiny() -> LMConfig {
        LMConfig {
            layers: 2,
            hidden: 16,
            intermediate: 32,
            heads: 2,
            shift_k: 2,
            semantic_vocab: 9,
            lyrics_vocab: 6,
            accomp_dim: 3,
            max_len: 40,
            ..LMConfig::desk()
        }
    }

    fn accomp(rows: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * 3).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        FeatureMatrix::new(data, rows, 3, 50.0).unwrap()
    }

    #[test]
    fn low_temperature_matches_greedy() {
        let m = SemanticLm::new(&tiny(), 3, DType::F32).unwrap();
        let lyr = LyricsTokens::new(vec![1, 2, 3, 1], 6).unwrap();
        let spk = Tensor::zeros(64, DType::F32, m.device()).unwrap();
        let a = accomp(30, 1);
        let greedy = m.generate_semantic(&lyr, &a, &spk, &SamplingConfig::greedy()).unwrap();
        let cold = SamplingConfig {
            temperature: 1e-9,
            seed: 99,
            ..SamplingConfig::default()
        };
        assert_eq!(m.generate_semantic(&lyr, &a, &spk, &cold).unwrap(), greedy);
    }

    #[test]
    fn golden_sequence_for_fixed_seed() {
        let m = SemanticLm::new(&tiny(), 11, DType::F32).unwrap();
        let lyr = LyricsTokens::new(vec![1, 4, 5, 1], 6).unwrap();
        let spk = Tensor::ones(64, DType::F32, m.device()).unwrap();
        let s = SamplingConfig {
            seed: 5,
            max_tokens: Some(12),
            ..SamplingConfig::default()
        };
        let g = m.generate_semantic(&lyr, &accomp(20, 2), &spk, &s).unwrap();
        assert_eq!(g, m.generate_semantic(&lyr, &accomp(20, 2), &spk, &s).unwrap());
        assert_eq!(g.tokens.ids(), GOLDEN);
    }

    const GOLDEN: &[u32] = &[0, 3, 2, 1, 8];

    #[test]
    fn fully_masked_accompaniment_content_is_irrelevant() {
        let m = SemanticLm::new(&tiny(), 4, DType::F32).unwrap();
        let lyr = LyricsTokens::new(vec![1, 2, 1], 6).unwrap();
        let spk = Tensor::zeros(64, DType::F32, m.device()).unwrap();
        let s = SamplingConfig {
            seed: 1,
            max_tokens: Some(15),
            ..SamplingConfig::default()
        };
        let (a, _) = crate::lm::apply_accomp_mask(&accomp(20, 5), 0, 1.0).unwrap();
        let (b, _) = crate::lm::apply_accomp_mask(&accomp(20, 6), 0, 1.0).unwrap();
        assert_eq!(
            m.generate_semantic(&lyr, &a, &spk, &s).unwrap(),
            m.generate_semantic(&lyr, &b, &spk, &s).unwrap()
        );
    }

    #[test]
    fn budget_exhaustion_is_flagged() {
        let m = SemanticLm::new(&tiny(), 4, DType::F32).unwrap();
        let lyr = LyricsTokens::new(vec![1, 2, 1], 6).unwrap();
        let spk = Tensor::zeros(64, DType::F32, m.device()).unwrap();
        let s = SamplingConfig {
            max_tokens: Some(0),
            ..SamplingConfig::default()
        };
        let g = m.generate_semantic(&lyr, &accomp(5, 0), &spk, &s).unwrap();
        assert!(g.truncated && g.tokens.is_empty());
        let empty = LyricsTokens::new(vec![], 6).unwrap();
        assert!(m.generate_semantic(&empty, &accomp(5, 0), &spk, &s).is_err());
    }

    #[test]
    fn top_k_restricts_choices() {
        let logits = [0.0, 5.0, 4.9, -1.0];
        let cfg = SamplingConfig {
            temperature: 10.0,
            top_k: 2,
            ..SamplingConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let id = pick(&logits, &cfg, &mut rng);
            assert!(id == 1 || id == 2);
        }
        assert_eq!(pick(&[1.0, 3.0, 3.0], &SamplingConfig::greedy(), &mut rng), 1);
    }
}
