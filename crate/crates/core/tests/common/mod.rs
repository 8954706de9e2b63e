#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rapgen::audio::{MelSpectrogram, MEL_FRAME_RATE_HZ, N_MELS};
use rapgen::featurization::{FeatureMatrix, SSL_FRAME_RATE_HZ};
use rapgen::formats::VadLabels;

/// Frame labels at `rate_hz` with the given voiced runs in frame indices.
pub fn vad(rate_hz: f64, frames: usize, runs: &[(usize, usize)]) -> VadLabels {
    let mut voiced = vec![false; frames];
    for &(a, b) in runs {
        for v in &mut voiced[a..b] {
            *v = true;
        }
    }
    VadLabels::new(voiced, rate_hz).unwrap()
}

pub fn write(path: &Path, text: &str) {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).unwrap();
    }
    std::fs::write(path, text).unwrap();
}

/// Toy training corpus: FMX1 vocal features drawn around 8 centres so the
/// codebook has structure, accompaniment features, mels and subset labels.
pub struct ToyCorpus {
    pub dir: PathBuf,
    pub index: PathBuf,
    pub features: Vec<PathBuf>,
}

pub const TOY_FEATURE_DIM: usize = 16;

pub fn toy_corpus(dir: &Path, n: usize, seed: u64) -> ToyCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f32>> = (0..8)
        .map(|_| (0..TOY_FEATURE_DIM).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let subsets = ["basic", "standard", "premium"];
    let mut index = String::new();
    let mut features = Vec::new();
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let frames = 20 + rng.random_range(0..10);
        let mut vocal = Vec::with_capacity(frames * TOY_FEATURE_DIM);
        let mut accomp = Vec::with_capacity(frames * TOY_FEATURE_DIM);
        for t in 0..frames {
            let c = &centres[(t / 3 + i) % 8];
            vocal.extend(c.iter().map(|v| v + rng.random_range(-0.1..0.1)));
            accomp.extend((0..TOY_FEATURE_DIM).map(|d| if t % 5 == 0 && d == 0 { 1.0 } else { 0.0 }));
        }
        let vf = dir.join(format!("ex{i}.vocal.fmx"));
        FeatureMatrix::new(vocal, frames, TOY_FEATURE_DIM, SSL_FRAME_RATE_HZ)
            .unwrap()
            .save(&vf)
            .unwrap();
        FeatureMatrix::new(accomp, frames, TOY_FEATURE_DIM, SSL_FRAME_RATE_HZ)
            .unwrap()
            .save(&dir.join(format!("ex{i}.accomp.fmx")))
            .unwrap();
        let mel_frames = (frames as f64 * MEL_FRAME_RATE_HZ / SSL_FRAME_RATE_HZ).round() as usize;
        let mel: Vec<f32> = (0..mel_frames * N_MELS)
            .map(|j| -4.0 + ((j % N_MELS) as f32 / N_MELS as f32) * 3.0 + rng.random_range(-0.2..0.2))
            .collect();
        MelSpectrogram::new(mel, mel_frames, N_MELS, MEL_FRAME_RATE_HZ)
            .unwrap()
            .save(&dir.join(format!("ex{i}.mel")))
            .unwrap();
        index.push_str(&format!(
            "{{\"id\":\"ex{i}\",\"lyrics\":\"yo check the mic {i}\",\"vocal_features\":\"ex{i}.vocal.fmx\",\
             \"accomp_features\":\"ex{i}.accomp.fmx\",\"mel\":\"ex{i}.mel\",\"subset\":\"{}\"}}\n",
            subsets[i % 3]
        ));
        features.push(vf);
    }
    let index_path = dir.join("index.jsonl");
    write(&index_path, &index);
    ToyCorpus {
        dir: dir.to_path_buf(),
        index: index_path,
        features,
    }
}

/// Relative error with a floor on the denominator for near-zero entries.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Hand-traced segmentation cases at 10 Hz with a fixed threshold
/// (std 0): (name, frames, runs, threshold mean, expected spans in s).
pub struct VadCase {
    pub name: &'static str,
    pub frames: usize,
    pub runs: &'static [(usize, usize)],
    pub threshold_s: f64,
    pub expected: &'static [(f64, f64)],
}

pub const VAD_CASES: [VadCase; 10] = [
    VadCase { name: "silence", frames: 100, runs: &[], threshold_s: 18.0, expected: &[] },
    VadCase { name: "short run dropped", frames: 100, runs: &[(0, 20)], threshold_s: 18.0, expected: &[] },
    VadCase { name: "exactly min length kept", frames: 100, runs: &[(10, 40)], threshold_s: 18.0, expected: &[(1.0, 4.0)] },
    VadCase { name: "gap below merge limit", frames: 100, runs: &[(0, 20), (49, 79)], threshold_s: 18.0, expected: &[(0.0, 7.9)] },
    VadCase { name: "gap at merge limit splits", frames: 120, runs: &[(0, 40), (70, 110)], threshold_s: 18.0, expected: &[(0.0, 4.0), (7.0, 11.0)] },
    VadCase { name: "short runs chain into one", frames: 60, runs: &[(0, 10), (20, 30), (40, 50)], threshold_s: 18.0, expected: &[(0.0, 5.0)] },
    VadCase { name: "threshold closes group", frames: 300, runs: &[(0, 50), (60, 110), (120, 170), (180, 230), (240, 290)], threshold_s: 18.0, expected: &[(0.0, 23.0), (24.0, 29.0)] },
    VadCase { name: "run reaching stream end", frames: 100, runs: &[(60, 100)], threshold_s: 18.0, expected: &[(6.0, 10.0)] },
    VadCase { name: "short tail after closed group", frames: 170, runs: &[(0, 60), (70, 130), (140, 160)], threshold_s: 10.0, expected: &[(0.0, 13.0)] },
    VadCase { name: "long gap separates groups", frames: 310, runs: &[(0, 80), (90, 170), (210, 300)], threshold_s: 18.0, expected: &[(0.0, 17.0), (21.0, 30.0)] },
];

pub fn vad_case_params(threshold_s: f64) -> rapgen::rapbank::SegmentParams {
    rapgen::rapbank::SegmentParams {
        threshold_mean_s: threshold_s,
        threshold_std_s: 0.0,
        ..Default::default()
    }
}

/// Dense voicing: syllable-length runs (0.2-1.0 s) separated by short
/// pauses (0.05-0.4 s) at 100 Hz.
pub fn dense_vad(seconds: usize, seed: u64) -> VadLabels {
    let rate = 100.0;
    let n = seconds * 100;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut voiced = Vec::with_capacity(n);
    while voiced.len() < n {
        let run = rng.random_range(20..=100);
        let gap = rng.random_range(5..=40);
        voiced.extend(std::iter::repeat_n(true, run));
        voiced.extend(std::iter::repeat_n(false, gap));
    }
    voiced.truncate(n);
    VadLabels::new(voiced, rate).unwrap()
}

/// Subset tier by explicit rule trace over the fixed table values.
pub fn subset_oracle(dnsmos: f64, pps: f64, primary: f64) -> &'static str {
    let premium = dnsmos >= 3.8 && pps >= 18.0 && pps <= 30.0 && primary >= 1.0;
    let standard = dnsmos >= 3.5 && pps >= 16.0 && pps <= 32.0 && primary >= 0.9;
    let basic = dnsmos >= 2.5 && pps >= 12.0 && pps <= 35.0 && primary >= 0.8;
    if premium {
        "premium"
    } else if standard {
        "standard"
    } else if basic {
        "basic"
    } else {
        "rejected"
    }
}

pub const GRID_DNSMOS: [f64; 10] = [2.0, 2.49, 2.5, 3.0, 3.49, 3.5, 3.79, 3.8, 4.2, 5.0];
pub const GRID_PPS: [f64; 10] = [11.99, 12.0, 15.99, 16.0, 17.99, 18.0, 30.0, 30.01, 32.0, 35.01];
pub const GRID_PRIMARY: [f64; 10] = [0.5, 0.79, 0.8, 0.85, 0.89, 0.9, 0.95, 0.99, 0.999, 1.0];

pub fn grid_segment(d: f64, p: f64, f: f64) -> rapgen::rapbank::Segment {
    rapgen::rapbank::Segment {
        id: "grid".into(),
        song_id: "grid".into(),
        language: "en".into(),
        start_s: 0.0,
        end_s: 10.0,
        pps: Some(p),
        dnsmos: Some(d),
        primary_frac: Some(f),
        primary_warning: false,
        subset: None,
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Compare autograd against fourth-order central differences,
/// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, on a few coordinates of
/// every parameter: the largest-gradient entry plus `extra` random ones.
/// The relative error's denominator is floored at `1e-6` so that
/// near-zero entries are not judged on rounding noise.
pub fn grad_check(
    store: &rapgen::nn::ParamStore,
    loss: impl Fn() -> candle_core::Tensor,
    extra: usize,
    seed: u64,
) -> GradCheck {
    const H: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = loss();
    let grads = base.backward().unwrap();
    let mut out = GradCheck {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    for (name, var) in store.vars() {
        let Some(g) = grads.get(var.as_tensor()) else {
            continue;
        };
        let g = rapgen::nn::to_f64_vec(g).unwrap();
        let orig = rapgen::nn::to_f64_vec(var.as_tensor()).unwrap();
        let top = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
        let mut coords = vec![top];
        coords.extend((0..extra).map(|_| rng.random_range(0..g.len())));
        let eval_at = |i: usize, delta: f64| {
            let mut v = orig.clone();
            v[i] += delta;
            let t = candle_core::Tensor::from_vec(v, var.dims(), var.device()).unwrap();
            var.set(&t).unwrap();
            rapgen::nn::scalar_f64(&loss()).unwrap()
        };
        for i in coords {
            let numeric = (8.0 * (eval_at(i, H) - eval_at(i, -H)) - (eval_at(i, 2.0 * H) - eval_at(i, -2.0 * H))) / (12.0 * H);
            let analytic = g[i];
            let rel = rel_err(analytic, numeric);
            out.checked += 1;
            if rel > out.max_rel {
                out.max_rel = rel;
                out.worst = format!("{name}[{i}]: analytic {analytic:e} numeric {numeric:e}");
            }
        }
        var.set(&candle_core::Tensor::from_vec(orig, var.dims(), var.device()).unwrap()).unwrap();
    }
    out
}

/// LM with hidden 16 and two layers in f64, plus a prepared batch whose
/// masks are fixed.
pub fn tiny_lm_fixture(seed: u64) -> (rapgen::lm::SemanticLm, rapgen::lm::PreparedBatch) {
    use rapgen::featurization::TokenSequence;
    use rapgen::lm::{LMConfig, LmExample, LyricsTokens, PreparedBatch, SemanticLm};
    use rapgen::refenc::RefEncoderConfig;
    let cfg = LMConfig {
        layers: 2,
        hidden: 16,
        intermediate: 32,
        heads: 2,
        shift_k: 2,
        semantic_vocab: 9,
        accomp_dim: 4,
        max_len: 64,
        ref_encoder: RefEncoderConfig {
            widths: vec![16, 64],
            ..Default::default()
        },
        ..LMConfig::desk()
    };
    let model = SemanticLm::new(&cfg, seed, candle_core::DType::F64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let examples: Vec<LmExample> = (0..3)
        .map(|i| {
            let n = 5 + i;
            let ids = (0..n).map(|_| rng.random_range(0..8)).collect();
            let accomp: Vec<f32> = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mel: Vec<f32> = (0..6 * N_MELS).map(|_| rng.random_range(-1.0..1.0)).collect();
            LmExample {
                lyrics: LyricsTokens::from_text(["yo", "mic check", "flow"][i]),
                semantic: TokenSequence::new(ids, 9, SSL_FRAME_RATE_HZ).unwrap(),
                accomp: FeatureMatrix::new(accomp, n, 4, SSL_FRAME_RATE_HZ).unwrap(),
                reference: MelSpectrogram::new(mel, 6, N_MELS, MEL_FRAME_RATE_HZ).unwrap(),
            }
        })
        .collect();
    // Draw masks until one example keeps some accompaniment visible so the
    // accompaniment projection receives gradient.
    let batch = (0..)
        .map(|_| PreparedBatch::new(&examples, &cfg, &mut rng).unwrap())
        .find(|b| b.masks().iter().any(|m| *m != rapgen::lm::MaskDescriptor::Full))
        .unwrap();
    (model, batch)
}

/// Decoder with a 16-wide U-Net in f64 and a batch of two short examples,
/// one shorter than the training crop so padding is masked.
pub fn tiny_cfm_fixture(seed: u64) -> (rapgen::cfm::CfmModel, Vec<rapgen::cfm::CfmExample>) {
    use rapgen::cfm::{CFMConfig, CfmExample, CfmModel};
    use rapgen::featurization::TokenSequence;
    use rapgen::refenc::RefEncoderConfig;
    let cfg = CFMConfig {
        intermediate_dim: 16,
        groups: 4,
        heads: 2,
        ff_mult: 2,
        time_dim: 16,
        token_vocab: 9,
        token_emb_dim: 8,
        segment_frames: 16,
        transformers_per_block: 1,
        ref_encoder: RefEncoderConfig {
            widths: vec![16, 64],
            ..Default::default()
        },
        ..CFMConfig::desk()
    };
    let model = CfmModel::new(&cfg, seed, candle_core::DType::F64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0de);
    let batch = [12usize, 20]
        .iter()
        .map(|&frames| {
            let n_tok = (frames as f64 * SSL_FRAME_RATE_HZ / MEL_FRAME_RATE_HZ).ceil() as usize;
            let ids = (0..n_tok).map(|_| rng.random_range(0..8)).collect();
            let mel: Vec<f32> = (0..frames * N_MELS).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r: Vec<f32> = (0..6 * N_MELS).map(|_| rng.random_range(-1.0..1.0)).collect();
            CfmExample {
                tokens: TokenSequence::new(ids, 9, SSL_FRAME_RATE_HZ).unwrap(),
                mel: MelSpectrogram::new(mel, frames, N_MELS, MEL_FRAME_RATE_HZ).unwrap(),
                reference: MelSpectrogram::new(r, 6, N_MELS, MEL_FRAME_RATE_HZ).unwrap(),
            }
        })
        .collect();
    (model, batch)
}

/// Hash of the WAV written by `generate_fixture` + `run_generate`; recorded
/// from the first run on this platform and frozen.
pub const GOLDEN_WAV_SHA256: &str = "8bcb29e97b8b4e8435efd879b0c8380721de620093bd3f1b03fc9f001c209a8f";

/// Paths of the fixed inputs for a generation run.
pub struct GenerateFixture {
    pub lyrics: PathBuf,
    pub accomp: PathBuf,
    pub reference: PathBuf,
    pub lm: PathBuf,
    pub cfm: PathBuf,
    pub config: PathBuf,
}

/// Untrained desk-size checkpoints from fixed seeds plus lyrics,
/// accompaniment features and a 4 s reference mel.
pub fn generate_fixture(dir: &Path) -> GenerateFixture {
    use rapgen::cfm::{CFMConfig, CfmModel};
    use rapgen::lm::{LMConfig, SemanticLm};
    std::fs::create_dir_all(dir).unwrap();
    SemanticLm::new(&LMConfig::desk(), 7, candle_core::DType::F32)
        .unwrap()
        .save(dir, "lm")
        .unwrap();
    CfmModel::new(&CFMConfig::desk(), 8, candle_core::DType::F32)
        .unwrap()
        .save(dir, "cfm")
        .unwrap();
    let lyrics = dir.join("lyrics.txt");
    write(&lyrics, "yo check the mic one two\n");
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let rows = 60;
    let accomp: Vec<f32> = (0..rows * TOY_FEATURE_DIM)
        .map(|i| if (i / TOY_FEATURE_DIM) % 10 == 0 { 1.0 } else { rng.random_range(-0.1..0.1) })
        .collect();
    let accomp_path = dir.join("accomp.fmx");
    FeatureMatrix::new(accomp, rows, TOY_FEATURE_DIM, SSL_FRAME_RATE_HZ)
        .unwrap()
        .save(&accomp_path)
        .unwrap();
    let frames = 345;
    let mel: Vec<f32> = (0..frames * N_MELS).map(|_| rng.random_range(-6.0..-1.0)).collect();
    let reference = dir.join("reference.mel");
    MelSpectrogram::new(mel, frames, N_MELS, MEL_FRAME_RATE_HZ)
        .unwrap()
        .save(&reference)
        .unwrap();
    let config = dir.join("generate.toml");
    write(
        &config,
        "seed = 5\n[generate]\nmax_tokens = 40\ncfm_steps = 4\ngriffin_lim_iters = 8\n",
    );
    GenerateFixture {
        lyrics,
        accomp: accomp_path,
        reference,
        lm: dir.join("lm"),
        cfm: dir.join("cfm"),
        config,
    }
}

pub fn run_generate(f: &GenerateFixture, out: &Path) -> rapgen::cli::GenerateReport {
    let cfg = rapgen::cli::RunConfig::load(&f.config).unwrap();
    let inputs = rapgen::cli::GenerateInputs {
        lyrics: &f.lyrics,
        accomp: &f.accomp,
        reference: &f.reference,
        lm: &f.lm,
        cfm: &f.cfm,
    };
    rapgen::cli::cmd_generate(&inputs, &cfg, cfg.seed.unwrap(), out, "take").unwrap()
}
