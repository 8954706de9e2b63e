//! Accompaniment-shift ablation on the planted benchmark: train one tiny LM
//! per (shift, seed), then score sampled continuations with the accompaniment
//! visible and fully masked.

use rand::prelude::*;
use serde::{Deserialize, Serialize};

use super::{alignment_score, gen_toy_pair, ToyPair, ToySpec};
use crate::audio::MelSpectrogram;
use crate::error::{ensure, Error, Result};
use crate::lm::{LMConfig, LmExample, LmTrainer, MaskDescriptor, SamplingConfig, SemanticLm};
use crate::nn::step_rng;

const DATA_SALT: u64 = 0xda7a_5eed;
const EVAL_SEED_BASE: u64 = 1 << 40;
const REFERENCE_FRAMES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub spec: ToySpec,
    /// Accompaniment shifts to compare; defaults to `[0, spec.k_true]`.
    pub shifts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub eval_pairs: usize,
    pub temperature: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let spec = ToySpec::default();
        Self {
            shifts: vec![0, spec.k_true],
            spec,
            seeds: (0..5).collect(),
            steps: 2000,
            batch: 8,
            lr: 1e-3,
            hidden: 64,
            layers: 2,
            heads: 4,
            intermediate: 128,
            eval_pairs: 16,
            temperature: 1.0,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        ensure!(self.shifts.len() >= 2, "ablation needs at least two shift settings");
        ensure!(self.seeds.len() >= 3, "ablation needs at least three seeds");
        ensure!(self.steps >= 1 && self.batch >= 1, "steps and batch must be positive");
        ensure!(self.eval_pairs >= 1, "eval_pairs must be positive");
        ensure!(self.temperature > 0.0, "ablation samples with a positive temperature");
        self.lm_config(0).validate()
    }

    pub fn lm_config(&self, shift_k: usize) -> LMConfig {
        let n = self.spec.n_frames;
        LMConfig {
            layers: self.layers,
            hidden: self.hidden,
            intermediate: self.intermediate,
            heads: self.heads,
            shift_k,
            semantic_vocab: self.spec.vocab,
            lyrics_vocab: self.spec.lyrics_vocab(),
            accomp_dim: self.spec.feature_dim,
            // speaker, lyrics (one id per beat plus two boundaries), slots
            max_len: n + n / self.spec.beat_period_frames + 8,
            ..LMConfig::desk()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inference {
    Accompaniment,
    Masked,
}

impl Inference {
    pub fn name(self) -> &'static str {
        match self {
            Inference::Accompaniment => "with-accomp",
            Inference::Masked => "masked",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub shift_k: usize,
    pub inference: Inference,
    /// One mean alignment score per seed that trained without diverging.
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub k_true: usize,
    pub steps: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, shift_k: usize, inference: Inference) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.shift_k == shift_k && r.inference == inference)
    }

    /// Aligned text columns.
    pub fn render(&self) -> String {
        let mut out = format!(
            "{:>7}  {:<12}  {:>8}  {:>8}  {:>5}  {:>8}\n",
            "shift_k", "inference", "mean", "std", "seeds", "diverged"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:>7}  {:<12}  {:>8.4}  {:>8.4}  {:>5}  {:>8}\n",
                r.shift_k,
                r.inference.name(),
                r.mean,
                r.std,
                r.scores.len(),
                r.diverged
            ));
        }
        out
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn reference(cfg: &LMConfig) -> Result<MelSpectrogram> {
    let n_mels = cfg.ref_encoder.mel_dim;
    MelSpectrogram::new(vec![0.0; REFERENCE_FRAMES * n_mels], REFERENCE_FRAMES, n_mels, crate::audio::MEL_FRAME_RATE_HZ)
}

fn example(pair: ToyPair, reference: &MelSpectrogram) -> LmExample {
    LmExample {
        lyrics: pair.lyrics,
        semantic: pair.vocal,
        accomp: pair.accomp,
        reference: reference.clone(),
    }
}

/// Train one model; the data stream depends on `seed` only, so every shift
/// setting sees the same examples.
pub fn train_ablation_model(cfg: &AblationConfig, shift_k: usize, seed: u64) -> Result<SemanticLm> {
    let lm_cfg = cfg.lm_config(shift_k);
    let reference = reference(&lm_cfg)?;
    let mut trainer = LmTrainer::new(&lm_cfg, seed, cfg.lr)?;
    for step in 0..cfg.steps {
        let mut rng = step_rng(seed ^ DATA_SALT, step as u64);
        let batch = (0..cfg.batch)
            .map(|_| Ok(example(gen_toy_pair(&cfg.spec, rng.random())?, &reference)))
            .collect::<Result<Vec<_>>>()?;
        trainer.train_step(&[batch])?;
    }
    Ok(trainer.model)
}

/// Mean alignment score of sampled continuations over the held-out pairs.
pub fn evaluate_ablation_model(
    model: &SemanticLm,
    cfg: &AblationConfig,
    inference: Inference,
    seed: u64,
) -> Result<f64> {
    let reference = reference(&model.cfg)?;
    let mel = model.ref_encoder.mel_tensor(&reference, &model.store)?;
    let spk = model.ref_encoder.forward(&mel)?.squeeze(0)?;
    let mut total = 0.0;
    for j in 0..cfg.eval_pairs {
        let pair = gen_toy_pair(&cfg.spec, EVAL_SEED_BASE + j as u64)?;
        let mut accomp = pair.accomp.clone();
        if inference == Inference::Masked {
            MaskDescriptor::Full.apply(&mut accomp);
        }
        let sampling = SamplingConfig {
            temperature: cfg.temperature,
            top_k: 0,
            seed: seed.wrapping_mul(1_000_003).wrapping_add(j as u64),
            max_tokens: Some(cfg.spec.n_frames),
        };
        let generated = model.generate_semantic(&pair.lyrics, &accomp, &spk, &sampling)?;
        total += alignment_score(generated.tokens.content(), &pair);
    }
    Ok(total / cfg.eval_pairs as f64)
}

/// Train and score every (shift, seed) combination. Runs whose training hits
/// a non-finite loss are counted as diverged and left out of the statistics.
pub fn run_shift_ablation(cfg: &AblationConfig) -> Result<AblationTable> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &k in &cfg.shifts {
        let mut with = Vec::new();
        let mut masked = Vec::new();
        let mut diverged = 0;
        for &seed in &cfg.seeds {
            let model = match train_ablation_model(cfg, k, seed) {
                Ok(m) => m,
                Err(Error::Numerical(_)) => {
                    diverged += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            with.push(evaluate_ablation_model(&model, cfg, Inference::Accompaniment, seed)?);
            masked.push(evaluate_ablation_model(&model, cfg, Inference::Masked, seed)?);
        }
        for (inference, scores) in [(Inference::Accompaniment, with), (Inference::Masked, masked)] {
            let (mean, std) = mean_std(&scores);
            rows.push(AblationRow {
                shift_k: k,
                inference,
                scores,
                mean,
                std,
                diverged,
            });
        }
    }
    Ok(AblationTable {
        k_true: cfg.spec.k_true,
        steps: cfg.steps,
        rows,
    })
}
