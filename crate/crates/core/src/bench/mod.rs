//! Synthetic benchmark with a planted accompaniment-to-vocal rhythm coupling.
//!
//! The accompaniment carries one beat per window of `beat_period_frames`
//! frames, at a random offset of up to `beat_jitter_frames` inside the window.
//! The vocal token at frame `t` is an "onset" token exactly when frame
//! `t + k_true` of the accompaniment is a beat, so a causal model needs
//! `k_true` frames of look-ahead to place onsets correctly. Beat offsets are
//! independent across windows, which keeps past beats uninformative about the
//! next one.

use std::ops::Range;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::featurization::{FeatureMatrix, TokenSequence, SSL_FRAME_RATE_HZ};
use crate::lm::LyricsTokens;

mod ablation;
pub use ablation::{
    evaluate_ablation_model, run_shift_ablation, train_ablation_model, AblationConfig, AblationRow, AblationTable,
    Inference,
};

/// Lyrics id reserved for padding.
pub const LYRICS_PAD: u32 = 0;
/// Lyrics id marking the start and end of a line.
pub const LYRICS_BOUNDARY: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub n_frames: usize,
    pub beat_period_frames: usize,
    /// Maximum offset of a beat inside its window; 0 puts beats on the grid.
    #[serde(default)]
    pub beat_jitter_frames: usize,
    pub k_true: usize,
    /// Token vocabulary including the end-of-sequence id.
    pub vocab: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub onset_band: Range<u32>,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            n_frames: 100,
            beat_period_frames: 10,
            beat_jitter_frames: 9,
            k_true: 5,
            vocab: 16,
            feature_dim: 16,
            noise_std: 0.1,
            onset_band: 0..4,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.beat_period_frames >= 2, "beat period must be at least 2 frames");
        ensure!(
            self.beat_jitter_frames < self.beat_period_frames,
            "beat jitter must be smaller than the period"
        );
        ensure!(
            self.k_true < self.n_frames,
            "k_true={} must be below n_frames={}",
            self.k_true,
            self.n_frames
        );
        ensure!(self.vocab >= 4, "vocab must be at least 4");
        ensure!(self.feature_dim >= 2, "feature_dim must be at least 2");
        ensure!(
            self.noise_std.is_finite() && self.noise_std >= 0.0,
            "noise_std must be non-negative"
        );
        let eos = (self.vocab - 1) as u32;
        ensure!(
            !self.onset_band.is_empty() && self.onset_band.end <= eos,
            "onset band must be non-empty and exclude the end-of-sequence id"
        );
        ensure!(
            (self.onset_band.len()) + 1 < self.vocab,
            "vocabulary needs at least one non-onset token"
        );
        Ok(())
    }

    pub fn eos_id(&self) -> u32 {
        (self.vocab - 1) as u32
    }

    pub fn is_onset_token(&self, id: u32) -> bool {
        self.onset_band.contains(&id)
    }

    /// Lyrics vocabulary: pad, boundary, then one id per onset-band token.
    pub fn lyrics_vocab(&self) -> usize {
        self.onset_band.len() + 2
    }

    fn filler_tokens(&self) -> Vec<u32> {
        (0..self.eos_id()).filter(|id| !self.is_onset_token(*id)).collect()
    }
}

/// One generated example with the planted structure exposed.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPair {
    pub spec: ToySpec,
    pub accomp: FeatureMatrix,
    pub vocal: TokenSequence,
    pub lyrics: LyricsTokens,
    pub beat_frames: Vec<usize>,
    pub onset_frames: Vec<usize>,
}

/// Feature channel carrying the beat pulse.
pub const BEAT_CHANNEL: usize = 0;
/// Feature channel that is constant while music plays, so masked (all-zero)
/// frames differ from beat-free frames.
pub const PRESENCE_CHANNEL: usize = 1;

pub fn gen_toy_pair(spec: &ToySpec, seed: u64) -> Result<ToyPair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n_frames;
    let p = spec.beat_period_frames;

    let beat_frames: Vec<usize> = (0..n / p)
        .map(|w| w * p + rng.random_range(0..=spec.beat_jitter_frames))
        .collect();
    let mut is_beat = vec![false; n];
    for &b in &beat_frames {
        is_beat[b] = true;
    }

    let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
    let d = spec.feature_dim;
    let mut accomp = FeatureMatrix::zeros(n, d, SSL_FRAME_RATE_HZ);
    for t in 0..n {
        let row = accomp.row_mut(t);
        for v in row.iter_mut() {
            *v = noise.sample(&mut rng) as f32;
        }
        row[PRESENCE_CHANNEL] += 1.0;
        if is_beat[t] {
            row[BEAT_CHANNEL] += 1.0;
        }
    }

    let onset_frames: Vec<usize> = (0..n)
        .filter(|&t| t + spec.k_true < n && is_beat[t + spec.k_true])
        .collect();
    let band: Vec<u32> = spec.onset_band.clone().collect();
    let filler = spec.filler_tokens();
    let onset_tokens: Vec<u32> = onset_frames
        .iter()
        .map(|_| band[rng.random_range(0..band.len())])
        .collect();

    let mut ids = Vec::with_capacity(n);
    let mut next_onset = onset_frames.iter().zip(&onset_tokens).peekable();
    for t in 0..n {
        match next_onset.peek() {
            Some((&o, &tok)) if o == t => {
                ids.push(tok);
                next_onset.next();
            }
            _ => ids.push(filler[rng.random_range(0..filler.len())]),
        }
    }
    let vocal = TokenSequence::new(ids, spec.vocab, SSL_FRAME_RATE_HZ)?;

    let mut lyric_ids = vec![LYRICS_BOUNDARY];
    lyric_ids.extend(onset_tokens.iter().map(|&t| t - spec.onset_band.start + 2));
    lyric_ids.push(LYRICS_BOUNDARY);
    let lyrics = LyricsTokens::new(lyric_ids, spec.lyrics_vocab())?;

    Ok(ToyPair {
        spec: spec.clone(),
        accomp,
        vocal,
        lyrics,
        beat_frames,
        onset_frames,
    })
}

/// Fraction of planted onset positions at which `pred` emits an onset-band
/// token within one frame. Positions past the end of `pred` count as misses;
/// with no planted onsets the score is 1.
pub fn alignment_score(pred: &[u32], truth: &ToyPair) -> f64 {
    let spec = &truth.spec;
    if truth.onset_frames.is_empty() {
        return 1.0;
    }
    let pred = &pred[..pred.len().min(spec.n_frames)];
    let hits = truth
        .onset_frames
        .iter()
        .filter(|&&t| {
            let lo = t.saturating_sub(1);
            let hi = (t + 1).min(pred.len().saturating_sub(1));
            lo < pred.len() && (lo..=hi).any(|i| spec.is_onset_token(pred[i]))
        })
        .count();
    hits as f64 / truth.onset_frames.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_spec(k_true: usize) -> ToySpec {
        ToySpec {
            beat_jitter_frames: 0,
            noise_std: 0.0,
            k_true,
            ..ToySpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = ToySpec::default();
        assert_eq!(gen_toy_pair(&s, 7).unwrap(), gen_toy_pair(&s, 7).unwrap());
        assert_ne!(gen_toy_pair(&s, 7).unwrap().vocal, gen_toy_pair(&s, 8).unwrap().vocal);
    }

    #[test]
    fn beat_count_is_length_over_period() {
        for jitter in [0, 4, 9] {
            let s = ToySpec {
                beat_jitter_frames: jitter,
                ..ToySpec::default()
            };
            let pair = gen_toy_pair(&s, 1).unwrap();
            assert_eq!(pair.beat_frames.len(), 10);
            let beats_in_features = pair
                .accomp
                .iter_rows()
                .filter(|r| r[BEAT_CHANNEL] > 0.5)
                .count();
            assert_eq!(beats_in_features, 10);
        }
    }

    #[test]
    fn zero_lookahead_puts_onsets_on_beats() {
        let pair = gen_toy_pair(&grid_spec(0), 3).unwrap();
        assert_eq!(pair.onset_frames, pair.beat_frames);
        for (t, &id) in pair.vocal.ids().iter().enumerate() {
            assert_eq!(pair.spec.is_onset_token(id), pair.beat_frames.contains(&t));
        }
    }

    #[test]
    fn onsets_are_the_shifted_beat_set() {
        // beats on 0, 10, .., 90; onsets need t + 5 to be a beat inside the clip
        let pair = gen_toy_pair(&grid_spec(5), 3).unwrap();
        let want: Vec<usize> = (0..9).map(|i| 5 + 10 * i).collect();
        assert_eq!(pair.onset_frames, want);
        let onset_positions: Vec<usize> = pair
            .vocal
            .ids()
            .iter()
            .enumerate()
            .filter(|(_, &id)| pair.spec.is_onset_token(id))
            .map(|(t, _)| t)
            .collect();
        assert_eq!(onset_positions, want);
    }

    #[test]
    fn lyrics_spell_the_onset_tokens() {
        let pair = gen_toy_pair(&ToySpec::default(), 11).unwrap();
        let onset_tokens: Vec<u32> = pair.onset_frames.iter().map(|&t| pair.vocal.ids()[t]).collect();
        let ids = pair.lyrics.ids();
        assert_eq!(ids.first(), Some(&LYRICS_BOUNDARY));
        assert_eq!(ids.last(), Some(&LYRICS_BOUNDARY));
        let decoded: Vec<u32> = ids[1..ids.len() - 1].iter().map(|&l| l - 2).collect();
        assert_eq!(decoded, onset_tokens);
    }

    #[test]
    fn full_scale_shift_is_a_valid_spec() {
        let s = ToySpec {
            n_frames: 500,
            k_true: 150,
            ..ToySpec::default()
        };
        let pair = gen_toy_pair(&s, 0).unwrap();
        assert!(pair.onset_frames.iter().all(|&t| pair.beat_frames.contains(&(t + 150))));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            ToySpec { beat_period_frames: 1, beat_jitter_frames: 0, ..ToySpec::default() },
            ToySpec { k_true: 100, ..ToySpec::default() },
            ToySpec { vocab: 3, onset_band: 0..1, ..ToySpec::default() },
            ToySpec { onset_band: 0..16, ..ToySpec::default() },
        ];
        for s in bad {
            assert!(s.validate().is_err(), "{s:?}");
        }
    }

    #[test]
    fn ground_truth_scores_one() {
        for seed in 0..20 {
            let s = ToySpec { noise_std: 0.0, ..ToySpec::default() };
            let pair = gen_toy_pair(&s, seed).unwrap();
            assert_eq!(alignment_score(pair.vocal.ids(), &pair), 1.0);
        }
    }

    #[test]
    fn random_tokens_score_near_three_frame_chance() {
        // onsets away from the clip edges see three candidate frames
        let s = ToySpec {
            beat_jitter_frames: 0,
            ..ToySpec::default()
        };
        let pair = gen_toy_pair(&s, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 1000;
        let scores: Vec<f64> = (0..draws)
            .map(|_| {
                let pred: Vec<u32> = (0..100).map(|_| rng.random_range(0..16)).collect();
                alignment_score(&pred, &pair)
            })
            .collect();
        let mean = scores.iter().sum::<f64>() / draws as f64;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let se = (var / draws as f64).sqrt();
        let expected = 1.0 - (1.0f64 - 4.0 / 16.0).powi(3);
        assert!((mean - expected).abs() < 3.0 * se, "mean {mean} expected {expected} se {se}");
    }

    #[test]
    fn short_predictions_count_as_misses() {
        let pair = gen_toy_pair(&grid_spec(5), 0).unwrap();
        assert_eq!(alignment_score(&[], &pair), 0.0);
        let half: Vec<u32> = pair.vocal.ids()[..50].to_vec();
        assert!((alignment_score(&half, &pair) - 5.0 / 9.0).abs() < 1e-12);
    }
}
