//! Command implementations shared by the binary, the tests and the Python
//! bindings.

use std::path::{Path, PathBuf};

use rand::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{RunConfig, TrainSettings};
use super::data::{cfm_examples, lm_examples, load_index, lyrics_tokens, reference_excerpt};
use crate::audio::{AudioClip, MelSpectrogram, HOP_LENGTH, SAMPLE_RATE};
use crate::bench::{run_shift_ablation, AblationConfig, AblationTable};
use crate::cfm::{CfmModel, CfmTrainer, MelStats};
use crate::error::{ensure, Error, Result};
use crate::featurization::{fit_kmeans_with, Codebook, FeatureMatrix, KMeansParams};
use crate::formats::{read_text, write_text};
use crate::lm::{LmTrainer, SamplingConfig, SemanticLm};
use crate::metrics;
use crate::nn::step_rng;
use crate::rapbank::{self, PipelineOptions, PipelineSummary, StatsReport, Subset};
use crate::spectral::{griffin_lim_invert, vocoder_ingest};

const BATCH_SALT: u64 = 0xba7c_4e5;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Split `dir/stem` checkpoint paths.
pub fn split_checkpoint(path: &Path) -> Result<(PathBuf, String)> {
    let stem = path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::invalid(format!("checkpoint path {} has no file name", path.display())))?;
    let stem = stem.strip_suffix(".safetensors").unwrap_or(stem).to_string();
    let dir = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    Ok((dir, stem))
}

pub fn cmd_pipeline(
    manifest: &Path,
    out: &Path,
    cfg: &RunConfig,
    seed: u64,
    write_audio: bool,
) -> Result<PipelineSummary> {
    let opts = PipelineOptions {
        segment: cfg.segment.clone(),
        thresholds: cfg.thresholds.clone(),
        seed,
        write_audio,
        ..PipelineOptions::default()
    };
    rapbank::run_pipeline(manifest, out, &opts)
}

pub fn cmd_stats(segments: &Path, out: &Path) -> Result<StatsReport> {
    let report = rapbank::dataset_stats(segments)?;
    create_dir(out)?;
    report.write(out)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenizerReport {
    pub k: usize,
    pub frames: usize,
    pub dim: usize,
    pub seed: u64,
    pub objective_history: Vec<f64>,
}

/// Fit a codebook on the concatenated frames of `features`; writes
/// `codebook.kmc` and `tokenizer.json` under `out`.
pub fn cmd_tokenizer_fit(
    features: &[PathBuf],
    k: usize,
    max_iters: usize,
    subsample: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<TokenizerReport> {
    ensure!(!features.is_empty(), "no feature files given");
    let mats = features.iter().map(|p| FeatureMatrix::load(p)).collect::<Result<Vec<_>>>()?;
    let dim = mats[0].dim();
    ensure!(mats.iter().all(|m| m.dim() == dim), "feature files have different dims");
    let rate = mats[0].frame_rate_hz;
    let rows: usize = mats.iter().map(FeatureMatrix::rows).sum();
    let data: Vec<f32> = mats.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
    let frames = FeatureMatrix::new(data, rows, dim, rate)?;
    let fit = fit_kmeans_with(
        &frames,
        KMeansParams {
            k,
            seed,
            max_iters,
            subsample,
        },
    )?;
    create_dir(out)?;
    fit.codebook.save(&out.join("codebook.kmc"))?;
    let report = TokenizerReport {
        k,
        frames: rows,
        dim,
        seed,
        objective_history: fit.objective_history,
    };
    write_text(&out.join("tokenizer.json"), &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub stem: String,
    pub start_step: usize,
    pub steps: usize,
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn first_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

fn read_loss_log(path: &Path, keep_below: usize) -> Result<Vec<(usize, String, f64)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = read_text(path)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if let [step, stage, loss] = parts[..] {
            let step: usize = step.parse().map_err(|_| Error::invalid(format!("bad loss log row `{line}`")))?;
            let loss: f64 = loss.parse().map_err(|_| Error::invalid(format!("bad loss log row `{line}`")))?;
            if step < keep_below {
                rows.push((step, stage.to_string(), loss));
            }
        }
    }
    Ok(rows)
}

fn write_loss_log(path: &Path, rows: &[(usize, String, f64)]) -> Result<()> {
    let mut s = String::from("step,stage,loss\n");
    for (step, stage, loss) in rows {
        s.push_str(&format!("{step},{stage},{loss}\n"));
    }
    write_text(path, &s)
}

/// Shared curriculum loop. `step_fn` performs one optimizer update on the
/// chosen example indices; `save` writes a checkpoint.
fn curriculum<E>(
    settings: &TrainSettings,
    subsets: &[Option<Subset>],
    seed: u64,
    start: usize,
    out: &Path,
    stem: &str,
    state: &mut E,
    mut step_fn: impl FnMut(&mut E, Vec<Vec<usize>>) -> Result<f64>,
    mut save: impl FnMut(&E) -> Result<()>,
) -> Result<TrainReport> {
    let log_path = out.join(format!("{stem}_losses.csv"));
    let mut log = read_loss_log(&log_path, start)?;
    let total = settings.total_steps();
    let mut losses = Vec::new();
    for step in start..total {
        let stage = settings.stages[settings.stage_at(step).expect("step below total")];
        let pool: Vec<usize> = (0..subsets.len()).filter(|&i| stage.pool.admits(subsets[i])).collect();
        ensure!(
            !pool.is_empty(),
            "stage `{}` has no training examples",
            stage.pool.name()
        );
        let mut rng = step_rng(seed ^ BATCH_SALT, step as u64);
        let picks = (0..settings.micro_batches)
            .map(|_| (0..settings.batch).map(|_| pool[rng.random_range(0..pool.len())]).collect())
            .collect();
        let loss = match step_fn(state, picks) {
            Ok(l) => l,
            Err(e) => {
                write_loss_log(&log_path, &log)?;
                return Err(e.in_stage(&format!("train {stem} step {step}")));
            }
        };
        log.push((step, stage.pool.name().to_string(), loss));
        losses.push(loss);
        let done = step + 1;
        if (settings.checkpoint_every > 0 && done % settings.checkpoint_every == 0) || done == total {
            save(state)?;
            write_loss_log(&log_path, &log)?;
        }
    }
    if start >= total {
        save(state)?;
    }
    Ok(TrainReport {
        stem: stem.to_string(),
        start_step: start,
        steps: total,
        losses,
    })
}

fn load_codebook(settings: &TrainSettings) -> Result<Codebook> {
    let p = settings
        .codebook
        .as_ref()
        .ok_or_else(|| Error::invalid("[train] codebook is required"))?;
    Codebook::load(p)
}

fn load_records(settings: &TrainSettings) -> Result<Vec<super::data::TrainRecord>> {
    let p = settings
        .data
        .as_ref()
        .ok_or_else(|| Error::invalid("[train] data index is required"))?;
    load_index(p)
}

/// Train the semantic LM through the configured curriculum. With `resume`,
/// continues from `out/lm.*` at its saved step.
pub fn cmd_train_lm(cfg: &RunConfig, seed: u64, out: &Path, resume: bool) -> Result<TrainReport> {
    let settings = &cfg.train;
    settings.validate()?;
    let data = lm_examples(
        &load_records(settings)?,
        &load_codebook(settings)?,
        &cfg.lm,
        cfg.generate.reference_seconds,
    )?;
    create_dir(out)?;
    let mut trainer = if resume {
        let t = LmTrainer::load(out, "lm")?;
        ensure!(t.model.cfg == cfg.lm, "checkpoint config differs from [lm]");
        t
    } else {
        LmTrainer::new(&cfg.lm, seed, settings.lr)?
    };
    let (examples, subsets): (Vec<_>, Vec<_>) = data.into_iter().unzip();
    let start = trainer.step() as usize;
    let seed = trainer.seed();
    curriculum(
        settings,
        &subsets,
        seed,
        start,
        out,
        "lm",
        &mut trainer,
        |t, picks| {
            let mbs: Vec<Vec<_>> = picks
                .into_iter()
                .map(|ix| ix.into_iter().map(|i| examples[i].clone()).collect())
                .collect();
            t.train_step(&mbs)
        },
        |t| t.save(out, "lm"),
    )
}

/// Train the mel decoder; statistics are fitted on all training mels when
/// starting fresh.
pub fn cmd_train_cfm(cfg: &RunConfig, seed: u64, out: &Path, resume: bool) -> Result<TrainReport> {
    let settings = &cfg.train;
    settings.validate()?;
    let data = cfm_examples(
        &load_records(settings)?,
        &load_codebook(settings)?,
        cfg.cfm.token_vocab,
        cfg.generate.reference_seconds,
    )?;
    create_dir(out)?;
    let (examples, subsets): (Vec<_>, Vec<_>) = data.into_iter().unzip();
    let mut trainer = if resume {
        let t = CfmTrainer::load(out, "cfm")?;
        ensure!(t.model.cfg == cfg.cfm, "checkpoint config differs from [cfm]");
        t
    } else {
        let mut t = CfmTrainer::new(&cfg.cfm, seed, settings.lr)?;
        let mels: Vec<MelSpectrogram> = examples.iter().map(|e| e.mel.clone()).collect();
        t.model.stats = MelStats::fit(&mels)?;
        t
    };
    let start = trainer.step() as usize;
    let seed = trainer.seed();
    curriculum(
        settings,
        &subsets,
        seed,
        start,
        out,
        "cfm",
        &mut trainer,
        |t, picks| {
            let mbs: Vec<Vec<_>> = picks
                .into_iter()
                .map(|ix| ix.into_iter().map(|i| examples[i].clone()).collect())
                .collect();
            t.train_step(&mbs)
        },
        |t| t.save(out, "cfm"),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateReport {
    pub wav: PathBuf,
    pub semantic_tokens: usize,
    pub truncated: bool,
    pub mel_frames: usize,
    pub duration_s: f64,
    pub reference_frames: usize,
    pub seed: u64,
    pub lm_seed: u64,
    pub cfm_seed: u64,
    pub vocoder_seed: u64,
    pub vocoder: String,
    pub sha256: String,
}

pub struct GenerateInputs<'a> {
    pub lyrics: &'a Path,
    pub accomp: &'a Path,
    pub reference: &'a Path,
    pub lm: &'a Path,
    pub cfm: &'a Path,
}

/// Lyrics to semantic tokens to mel to waveform. Writes `<out>/<name>.wav`,
/// `<out>/<name>.mel` and `<out>/<name>.json`.
pub fn cmd_generate(
    inputs: &GenerateInputs<'_>,
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
    name: &str,
) -> Result<GenerateReport> {
    let g = &cfg.generate;
    let (lm_dir, lm_stem) = split_checkpoint(inputs.lm)?;
    let (cfm_dir, cfm_stem) = split_checkpoint(inputs.cfm)?;
    let lm = SemanticLm::load(&lm_dir, &lm_stem).map_err(|e| e.in_stage("load lm"))?;
    let cfm = CfmModel::load(&cfm_dir, &cfm_stem).map_err(|e| e.in_stage("load cfm"))?;
    ensure!(
        lm.cfg.semantic_vocab == cfm.cfg.token_vocab,
        "LM vocabulary {} does not match decoder vocabulary {}",
        lm.cfg.semantic_vocab,
        cfm.cfg.token_vocab
    );

    let read_inputs = || -> Result<_> {
        let lyrics = lyrics_tokens(read_text(inputs.lyrics)?.trim(), lm.cfg.lyrics_vocab)?;
        let accomp = FeatureMatrix::load(inputs.accomp)?;
        let reference = reference_excerpt(&MelSpectrogram::load(inputs.reference)?, g.reference_seconds);
        Ok((lyrics, accomp, reference))
    };
    let (lyrics, accomp, reference) = read_inputs().map_err(|e| e.in_stage("inputs"))?;

    let (lm_seed, cfm_seed, vocoder_seed) = (seed, seed.wrapping_add(1), seed.wrapping_add(2));
    let generation = (|| -> Result<_> {
        let spk = lm.ref_encoder.forward(&lm.ref_encoder.mel_tensor(&reference, &lm.store)?)?.squeeze(0)?;
        let sampling = SamplingConfig {
            temperature: g.temperature,
            top_k: g.top_k,
            seed: lm_seed,
            max_tokens: g.max_tokens,
        };
        let gen = lm.generate_semantic(&lyrics, &accomp, &spk, &sampling)?;
        ensure!(!gen.tokens.content().is_empty(), "language model produced no tokens");
        Ok(gen)
    })()
    .map_err(|e| e.in_stage("lm"))?;

    let tokens = crate::featurization::TokenSequence::new(
        generation.tokens.content().to_vec(),
        lm.cfg.semantic_vocab,
        generation.tokens.frame_rate_hz(),
    )?;
    let steps = g.cfm_steps.unwrap_or(cfm.cfg.sample_steps);
    let mel = cfm
        .sample(&tokens, &reference, steps, cfm_seed)
        .map_err(|e| e.in_stage("cfm"))?;
    let audio = match &g.vocoder {
        Some(cmd) => vocoder_ingest(&mel, cmd),
        None => griffin_lim_invert(&mel, g.griffin_lim_iters, vocoder_seed),
    }
    .map_err(|e| e.in_stage("vocoder"))?;

    create_dir(out)?;
    let wav = out.join(format!("{name}.wav"));
    audio.save_wav(&wav).map_err(|e| e.in_stage("write"))?;
    mel.save(&out.join(format!("{name}.mel")))?;
    let bytes = std::fs::read(&wav).map_err(|e| Error::io(&wav, e))?;
    let report = GenerateReport {
        wav: wav.clone(),
        semantic_tokens: tokens.len(),
        truncated: generation.truncated,
        mel_frames: mel.n_frames(),
        duration_s: audio.duration_s(),
        reference_frames: reference.n_frames(),
        seed,
        lm_seed,
        cfm_seed,
        vocoder_seed,
        vocoder: g.vocoder.clone().unwrap_or_else(|| "griffin-lim".into()),
        sha256: format!("{:x}", Sha256::digest(&bytes)),
    };
    write_text(&out.join(format!("{name}.json")), &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Duration implied by a mel length.
pub fn mel_duration_s(frames: usize) -> f64 {
    (frames * HOP_LENGTH) as f64 / SAMPLE_RATE as f64
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?.lines().map(str::to_string).collect())
}

/// Corpus WER over line-aligned reference and hypothesis files: total edits
/// over total reference words.
pub fn cmd_eval_wer(reference: &Path, hypothesis: &Path) -> Result<f64> {
    let r = read_lines(reference)?;
    let h = read_lines(hypothesis)?;
    ensure!(r.len() == h.len(), "reference has {} lines, hypothesis {}", r.len(), h.len());
    let mut edits = 0;
    let mut words = 0;
    for (a, b) in r.iter().zip(&h) {
        let (a, b) = (metrics::normalize_words(a), metrics::normalize_words(b));
        edits += metrics::edit_distance(&a, &b);
        words += a.len();
    }
    ensure!(words > 0, "reference transcript is empty");
    Ok(edits as f64 / words as f64)
}

fn rows_f64(m: &FeatureMatrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

/// Mean row-wise cosine similarity between two embedding files.
pub fn cmd_eval_secs(a: &Path, b: &Path) -> Result<f64> {
    let (a, b) = (FeatureMatrix::load(a)?, FeatureMatrix::load(b)?);
    ensure!(a.rows() == b.rows() && a.rows() > 0, "embedding files need equal, non-zero row counts");
    let (ra, rb) = (rows_f64(&a), rows_f64(&b));
    let mut total = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        total += metrics::secs(x, y)?;
    }
    Ok(total / ra.len() as f64)
}

pub fn cmd_eval_fad(a: &Path, b: &Path) -> Result<f64> {
    metrics::fad_features(&FeatureMatrix::load(a)?, &FeatureMatrix::load(b)?)
}

pub fn cmd_eval_kld(p: &Path, q: &Path) -> Result<f64> {
    metrics::kld(&rows_f64(&FeatureMatrix::load(p)?), &rows_f64(&FeatureMatrix::load(q)?))
}

/// Writes `beats.json` and `beats.csv` under `out`.
pub fn cmd_eval_beats(accomp: &Path, vocal: &Path, tolerance_s: f64, out: &Path) -> Result<metrics::AlignmentReport> {
    let r = metrics::beat_alignment_report(&AudioClip::load_wav(accomp)?, &AudioClip::load_wav(vocal)?, tolerance_s)?;
    create_dir(out)?;
    write_text(&out.join("beats.json"), &serde_json::to_string_pretty(&r)?)?;
    write_text(&out.join("beats.csv"), &r.plot_csv())?;
    Ok(r)
}

/// Writes `ablation.txt` and `ablation.json` under `out`.
pub fn cmd_bench_ablation(cfg: &AblationConfig, out: &Path) -> Result<AblationTable> {
    let table = run_shift_ablation(cfg)?;
    create_dir(out)?;
    write_text(&out.join("ablation.txt"), &table.render())?;
    write_text(&out.join("ablation.json"), &serde_json::to_string_pretty(&table)?)?;
    Ok(table)
}
