//! Training data index: one JSON object per line pointing at feature, mel
//! and reference files. Relative paths resolve against the index directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{MelSpectrogram, MEL_FRAME_RATE_HZ};
use crate::cfm::CfmExample;
use crate::error::{ensure, Error, Result};
use crate::featurization::{tokenize, Codebook, FeatureMatrix, TokenSequence};
use crate::formats::read_text;
use crate::lm::{LMConfig, LmExample, LyricsTokens};
use crate::rapbank::Subset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecord {
    pub id: String,
    #[serde(default)]
    pub lyrics: Option<String>,
    /// Frame-level self-supervised features of the vocal (FMX1).
    pub vocal_features: PathBuf,
    /// Accompaniment features with one frame per vocal frame (FMX1).
    #[serde(default)]
    pub accomp_features: Option<PathBuf>,
    /// Target vocal mel (MEL1).
    #[serde(default)]
    pub mel: Option<PathBuf>,
    /// Same-speaker reference mel; defaults to the head of `mel`.
    #[serde(default)]
    pub reference: Option<PathBuf>,
    #[serde(default)]
    pub subset: Option<Subset>,
}

pub fn load_index(path: &Path) -> Result<Vec<TrainRecord>> {
    let text = read_text(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut r: TrainRecord = serde_json::from_str(line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?;
        ensure!(seen.insert(r.id.clone()), "duplicate example id {}", r.id);
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut r.vocal_features);
        for p in [&mut r.accomp_features, &mut r.mel, &mut r.reference].into_iter().flatten() {
            resolve(p);
        }
        out.push(r);
    }
    ensure!(!out.is_empty(), "training index {} is empty", path.display());
    Ok(out)
}

/// Pick a lyrics front end from the model's lyrics vocabulary.
pub fn lyrics_tokens(text: &str, lyrics_vocab: usize) -> Result<LyricsTokens> {
    if lyrics_vocab == LyricsTokens::PHONEME_VOCAB {
        LyricsTokens::from_phonemes(text)
    } else if lyrics_vocab == LyricsTokens::CHAR_VOCAB {
        Ok(LyricsTokens::from_text(text))
    } else {
        Err(Error::invalid(format!(
            "lyrics vocabulary {lyrics_vocab} matches neither the character ({}) nor the phoneme ({}) front end",
            LyricsTokens::CHAR_VOCAB,
            LyricsTokens::PHONEME_VOCAB
        )))
    }
}

/// The first `seconds` of a mel (all of it when shorter).
pub fn reference_excerpt(mel: &MelSpectrogram, seconds: f64) -> MelSpectrogram {
    let frames = ((seconds * MEL_FRAME_RATE_HZ).round() as usize).max(1);
    if mel.n_frames() <= frames {
        mel.clone()
    } else {
        mel.excerpt(0, frames)
    }
}

fn reference_for(r: &TrainRecord, mel: Option<&MelSpectrogram>, seconds: f64) -> Result<MelSpectrogram> {
    match (&r.reference, mel) {
        (Some(p), _) => Ok(reference_excerpt(&MelSpectrogram::load(p)?, seconds)),
        (None, Some(m)) => Ok(reference_excerpt(m, seconds)),
        (None, None) => Err(Error::invalid(format!("example {} has neither reference nor mel", r.id))),
    }
}

fn tokens_for(r: &TrainRecord, codebook: &Codebook, vocab: usize) -> Result<TokenSequence> {
    let tokens = tokenize(&FeatureMatrix::load(&r.vocal_features)?, codebook)?;
    ensure!(
        tokens.vocab_size() == vocab,
        "codebook yields vocabulary {} but the model expects {vocab}",
        tokens.vocab_size()
    );
    ensure!(!tokens.is_empty(), "example {} has no vocal frames", r.id);
    Ok(tokens)
}

pub fn lm_examples(
    records: &[TrainRecord],
    codebook: &Codebook,
    cfg: &LMConfig,
    reference_seconds: f64,
) -> Result<Vec<(LmExample, Option<Subset>)>> {
    records
        .iter()
        .map(|r| {
            let text = r
                .lyrics
                .as_deref()
                .ok_or_else(|| Error::invalid(format!("example {} has no lyrics", r.id)))?;
            let semantic = tokens_for(r, codebook, cfg.semantic_vocab)?;
            let accomp_path = r
                .accomp_features
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("example {} has no accompaniment features", r.id)))?;
            let accomp = FeatureMatrix::load(accomp_path)?;
            ensure!(
                accomp.rows() == semantic.len(),
                "example {}: accompaniment has {} frames, vocal has {}",
                r.id,
                accomp.rows(),
                semantic.len()
            );
            let mel = r.mel.as_deref().map(MelSpectrogram::load).transpose()?;
            let ex = LmExample {
                lyrics: lyrics_tokens(text, cfg.lyrics_vocab)?,
                semantic,
                accomp,
                reference: reference_for(r, mel.as_ref(), reference_seconds)?,
            };
            Ok((ex, r.subset))
        })
        .collect()
}

pub fn cfm_examples(
    records: &[TrainRecord],
    codebook: &Codebook,
    token_vocab: usize,
    reference_seconds: f64,
) -> Result<Vec<(CfmExample, Option<Subset>)>> {
    records
        .iter()
        .map(|r| {
            let tokens = tokens_for(r, codebook, token_vocab)?;
            let mel_path = r
                .mel
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("example {} has no mel", r.id)))?;
            let mel = MelSpectrogram::load(mel_path)?;
            let reference = reference_for(r, Some(&mel), reference_seconds)?;
            Ok((CfmExample { tokens, mel, reference }, r.subset))
        })
        .collect()
}
