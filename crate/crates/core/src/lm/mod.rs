//! Lyrics-to-semantic language model conditioned on shifted accompaniment
//! features and a reference speaker embedding.

mod conditioning;
mod generate;
mod model;
mod train;

pub use conditioning::{apply_accomp_mask, shift_accompaniment, MaskDescriptor};
pub use generate::{Generation, SamplingConfig};
pub use model::{MixedSequence, Region, SemanticLm};
pub use train::{semantic_cross_entropy, LmExample, LmTrainer, PreparedBatch};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::refenc::{RefEncoderConfig, SPEAKER_DIM};

/// Lyrics token ids. Id 0 is padding and id 1 marks line boundaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LyricsTokens {
    ids: Vec<u32>,
    vocab_size: usize,
}

const CHAR_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz '";

/// ARPAbet phonemes without stress markers.
pub(crate) const ARPABET: [&str; 39] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH",
    "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH",
    "UW", "V", "W", "Y", "Z", "ZH",
];

impl LyricsTokens {
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::invalid(format!(
                "lyrics id {bad} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(Self { ids, vocab_size })
    }

    /// Vocabulary of the character-level front end.
    pub const CHAR_VOCAB: usize = 2 + CHAR_ALPHABET.len();
    /// Vocabulary of the phoneme front end.
    pub const PHONEME_VOCAB: usize = 2 + ARPABET.len();

    /// Character-level fallback: lowercase letters, space and apostrophe,
    /// wrapped in boundary ids. Other characters are dropped and whitespace
    /// runs collapse to one space.
    pub fn from_text(text: &str) -> Self {
        let mut ids = vec![1];
        let mut last_space = true;
        for c in text.chars().flat_map(char::to_lowercase) {
            let c = if c.is_whitespace() { ' ' } else { c };
            if c == ' ' {
                if last_space {
                    continue;
                }
                last_space = true;
            } else {
                last_space = false;
            }
            if let Some(pos) = CHAR_ALPHABET.find(c) {
                ids.push(2 + pos as u32);
            }
        }
        if ids.len() > 1 && ids.last() == Some(&(2 + CHAR_ALPHABET.find(' ').unwrap() as u32)) {
            ids.pop();
        }
        ids.push(1);
        Self {
            ids,
            vocab_size: Self::CHAR_VOCAB,
        }
    }

    /// Whitespace-separated ARPAbet symbols; stress digits are ignored.
    pub fn from_phonemes(text: &str) -> Result<Self> {
        let mut ids = vec![1];
        for sym in text.split_whitespace() {
            let bare = sym.trim_end_matches(|c: char| c.is_ascii_digit()).to_ascii_uppercase();
            let pos = ARPABET
                .iter()
                .position(|p| *p == bare)
                .ok_or_else(|| Error::invalid(format!("unknown phoneme {sym}")))?;
            ids.push(2 + pos as u32);
        }
        ids.push(1);
        Ok(Self {
            ids,
            vocab_size: Self::PHONEME_VOCAB,
        })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

/// Architecture and conditioning settings of the semantic LM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LMConfig {
    pub layers: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub speaker_dim: usize,
    /// Accompaniment look-ahead in frames.
    pub shift_k: usize,
    /// Semantic vocabulary including the end-of-sequence id.
    pub semantic_vocab: usize,
    pub lyrics_vocab: usize,
    pub accomp_dim: usize,
    pub mask_full_prob: f64,
    /// Longest mixed sequence (speaker + lyrics + semantic slots).
    pub max_len: usize,
    pub ref_encoder: RefEncoderConfig,
}

impl Default for LMConfig {
    /// Full-size configuration.
    fn default() -> Self {
        Self {
            layers: 6,
            hidden: 1024,
            intermediate: 4096,
            heads: 16,
            speaker_dim: SPEAKER_DIM,
            shift_k: 150,
            semantic_vocab: 1025,
            lyrics_vocab: LyricsTokens::PHONEME_VOCAB,
            accomp_dim: 1024,
            mask_full_prob: 0.5,
            max_len: 4096,
            ref_encoder: RefEncoderConfig::default(),
        }
    }
}

impl LMConfig {
    /// Small configuration used for CPU experiments.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            hidden: 64,
            intermediate: 192,
            heads: 4,
            shift_k: 5,
            semantic_vocab: 65,
            lyrics_vocab: LyricsTokens::CHAR_VOCAB,
            accomp_dim: 16,
            max_len: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.layers >= 1, "need at least one layer");
        ensure!(self.heads >= 1 && self.hidden % self.heads == 0, "hidden must be divisible by heads");
        ensure!((self.hidden / self.heads) % 2 == 0, "head dim must be even for rotary positions");
        ensure!(
            (0.0..=1.0).contains(&self.mask_full_prob),
            "mask_full_prob must lie in [0, 1]"
        );
        ensure!(self.semantic_vocab >= 2, "semantic vocab needs a token and EOS");
        ensure!(self.lyrics_vocab >= 2, "lyrics vocab needs pad and boundary ids");
        ensure!(
            self.ref_encoder.widths.last() == Some(&self.speaker_dim),
            "reference encoder output must equal speaker_dim"
        );
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn eos_id(&self) -> u32 {
        (self.semantic_vocab - 1) as u32
    }

    /// Trainable parameter count implied by the configuration.
    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        let per_layer = 4 * h * h + 3 * h * self.intermediate + 2 * h;
        let mut refenc = 0;
        let mut d = self.ref_encoder.mel_dim;
        for &w in &self.ref_encoder.widths {
            refenc += d * w + w;
            d = w;
        }
        refenc += 2 * d * d;
        self.layers * per_layer
            + h
            + self.semantic_vocab * h
            + self.lyrics_vocab * h
            + (self.accomp_dim * h + h)
            + (self.speaker_dim * h + h)
            + h * self.semantic_vocab
            + refenc
    }
}
