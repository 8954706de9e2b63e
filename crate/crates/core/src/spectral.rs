//! Log-mel analysis, Griffin-Lim inversion and the external vocoder bridge.

use std::path::Path;
use std::process::Command;
use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::{AudioClip, MelSpectrogram, HOP_LENGTH, N_MELS, SAMPLE_RATE};
use crate::error::{ensure, Error, Result};

/// Upsampling factors of the external vocoder; their product is the hop.
pub const VOCODER_UPSAMPLE_RATES: [usize; 6] = [8, 4, 2, 2, 2, 2];

#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            n_fft: 2048,
            hop: HOP_LENGTH,
            n_mels: N_MELS,
            fmin: 0.0,
            fmax: SAMPLE_RATE as f64 / 2.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames produced for `n` samples under center padding.
    pub fn n_frames(&self, n: usize) -> usize {
        n / self.hop + 1
    }
}

fn hz_to_mel(f: f64) -> f64 {
    let (f_sp, min_log_hz) = (200.0 / 3.0, 1000.0);
    let min_log_mel = min_log_hz / f_sp;
    if f >= min_log_hz {
        min_log_mel + (f / min_log_hz).ln() / (6.4f64.ln() / 27.0)
    } else {
        f / f_sp
    }
}

fn mel_to_hz(m: f64) -> f64 {
    let (f_sp, min_log_hz) = (200.0 / 3.0, 1000.0);
    let min_log_mel = min_log_hz / f_sp;
    if m >= min_log_mel {
        min_log_hz * ((m - min_log_mel) * (6.4f64.ln() / 27.0)).exp()
    } else {
        m * f_sp
    }
}

/// Slaney-scale triangular filters with area normalization, `[n_mels][n_bins]`.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<Vec<f64>> {
    let n_bins = cfg.n_bins();
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let pts: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let fft_freqs: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64)
        .collect();
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
            let norm = 2.0 / (r - l);
            fft_freqs
                .iter()
                .map(|&f| {
                    let up = (f - l) / (c - l);
                    let down = (r - f) / (r - c);
                    up.min(down).max(0.0) * norm
                })
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

struct Stft {
    cfg: MelConfig,
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Stft {
    fn new(cfg: &MelConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            cfg: cfg.clone(),
            window: hann(cfg.n_fft),
            fwd: planner.plan_fft_forward(cfg.n_fft),
            inv: planner.plan_fft_inverse(cfg.n_fft),
        }
    }

    /// Centered, reflect-padded STFT: `[frames][n_bins]`.
    fn forward(&self, x: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let (n_fft, hop) = (self.cfg.n_fft, self.cfg.hop);
        let pad = (n_fft / 2) as isize;
        let frames = self.cfg.n_frames(x.len());
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        (0..frames)
            .map(|f| {
                for (i, b) in buf.iter_mut().enumerate() {
                    let src = (f * hop + i) as isize - pad;
                    *b = Complex::new(x[reflect(src, x.len())] * self.window[i], 0.0);
                }
                self.fwd.process(&mut buf);
                buf[..self.cfg.n_bins()].to_vec()
            })
            .collect()
    }

    /// Weighted overlap-add inverse of `forward`, trimmed to `len` samples.
    fn inverse(&self, spec: &[Vec<Complex<f64>>], len: usize) -> Vec<f64> {
        let (n_fft, hop) = (self.cfg.n_fft, self.cfg.hop);
        let pad = n_fft / 2;
        let total = (spec.len().saturating_sub(1)) * hop + n_fft;
        let mut out = vec![0.0; total.max(len + pad)];
        let mut wsum = vec![0.0; out.len()];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        for (f, frame) in spec.iter().enumerate() {
            buf[..frame.len()].copy_from_slice(frame);
            for k in 1..n_fft - frame.len() + 1 {
                buf[n_fft - k] = frame[k].conj();
            }
            self.inv.process(&mut buf);
            for i in 0..n_fft {
                let w = self.window[i];
                out[f * hop + i] += buf[i].re / n_fft as f64 * w;
                wsum[f * hop + i] += w * w;
            }
        }
        (0..len)
            .map(|i| {
                let j = i + pad;
                if wsum[j] > 1e-8 {
                    out[j] / wsum[j]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Log-mel spectrogram with the default analysis settings.
pub fn mel_analyze(audio: &AudioClip) -> Result<MelSpectrogram> {
    mel_analyze_with(audio, &MelConfig::default())
}

pub fn mel_analyze_with(audio: &AudioClip, cfg: &MelConfig) -> Result<MelSpectrogram> {
    ensure!(!audio.is_empty(), "cannot analyze empty audio");
    ensure!(
        audio.sample_rate == cfg.sample_rate,
        "audio is {} Hz, analysis expects {} Hz",
        audio.sample_rate,
        cfg.sample_rate
    );
    let x: Vec<f64> = audio.samples.iter().map(|&s| s as f64).collect();
    let spec = Stft::new(cfg).forward(&x);
    let fb = filterbank(cfg);
    let mut frames = Vec::with_capacity(spec.len() * cfg.n_mels);
    for frame in &spec {
        let mag: Vec<f64> = frame.iter().map(|c| c.norm()).collect();
        for filt in fb.iter() {
            let e: f64 = filt.iter().zip(&mag).map(|(w, m)| w * m).sum();
            frames.push(e.max(cfg.log_floor).ln() as f32);
        }
    }
    MelSpectrogram::new(
        frames,
        spec.len(),
        cfg.n_mels,
        cfg.sample_rate as f64 / cfg.hop as f64,
    )
}

fn filterbank(cfg: &MelConfig) -> Arc<Vec<Vec<f64>>> {
    static DEFAULT: OnceLock<Arc<Vec<Vec<f64>>>> = OnceLock::new();
    if *cfg == MelConfig::default() {
        DEFAULT.get_or_init(|| Arc::new(mel_filterbank(cfg))).clone()
    } else {
        Arc::new(mel_filterbank(cfg))
    }
}

/// Least-squares linear magnitudes from log-mels, clamped at zero.
fn mel_to_linear(mel: &MelSpectrogram, cfg: &MelConfig) -> Vec<Vec<f64>> {
    let fb = filterbank(cfg);
    let m = DMatrix::from_fn(cfg.n_mels, cfg.n_bins(), |r, c| fb[r][c]);
    let pinv = m.pseudo_inverse(1e-10).expect("non-negative epsilon");
    (0..mel.n_frames())
        .map(|t| {
            let e = nalgebra::DVector::from_iterator(
                cfg.n_mels,
                mel.frame(t).iter().map(|&v| (v as f64).exp()),
            );
            (&pinv * e).iter().map(|v| v.max(0.0)).collect()
        })
        .collect()
}

/// Griffin-Lim reconstruction with `iters` phase updates from a seeded
/// random initial phase. Output has `n_frames * hop` samples in `[-1, 1]`.
pub fn griffin_lim_invert(mel: &MelSpectrogram, iters: usize, seed: u64) -> Result<AudioClip> {
    let cfg = MelConfig::default();
    ensure!(iters >= 1, "Griffin-Lim needs at least one iteration");
    ensure!(
        mel.n_mels() == cfg.n_mels,
        "expected {} mel channels, got {}",
        cfg.n_mels,
        mel.n_mels()
    );
    ensure!(mel.n_frames() >= 1, "empty spectrogram");
    let mag = mel_to_linear(mel, &cfg);
    let stft = Stft::new(&cfg);
    let len = mel.n_frames() * cfg.hop;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec: Vec<Vec<Complex<f64>>> = mag
        .iter()
        .map(|row| {
            row.iter()
                .map(|&a| Complex::from_polar(a, rng.random_range(0.0..std::f64::consts::TAU)))
                .collect()
        })
        .collect();
    let mut signal = stft.inverse(&spec, len);
    for _ in 1..iters {
        let est = stft.forward(&signal);
        for (t, row) in spec.iter_mut().enumerate() {
            for (k, c) in row.iter_mut().enumerate() {
                let e = est.get(t).map_or(Complex::new(0.0, 0.0), |r| r[k]);
                let n = e.norm();
                let phase = if n > 1e-12 { e / n } else { Complex::new(1.0, 0.0) };
                *c = phase * mag[t][k];
            }
        }
        signal = stft.inverse(&spec, len);
    }
    let samples = signal.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect();
    AudioClip::new(samples, cfg.sample_rate)
}

/// Run an external vocoder as `<program> [args...] <mel.mel> <out.wav>` and
/// read back its mono 44.1 kHz output.
pub fn vocoder_ingest(mel: &MelSpectrogram, external_cmd: &str) -> Result<AudioClip> {
    let mut parts = external_cmd.split_whitespace();
    let program = parts
        .next()
        .ok_or_else(|| Error::invalid("empty vocoder command"))?;
    let tool_err = |message: String| Error::ExternalTool {
        tool: program.to_string(),
        message,
    };
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let mel_path = dir.path().join("input.mel");
    let wav_path = dir.path().join("output.wav");
    mel.save(&mel_path)?;
    let output = Command::new(program)
        .args(parts)
        .arg(&mel_path)
        .arg(&wav_path)
        .output()
        .map_err(|e| tool_err(format!("could not start: {e}")))?;
    if !output.status.success() {
        return Err(tool_err(format!(
            "exited with {}: {}",
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        )));
    }
    read_vocoder_output(&wav_path).map_err(|e| tool_err(format!("unusable output: {e}")))
}

fn read_vocoder_output(path: &Path) -> Result<AudioClip> {
    let clip = AudioClip::load_wav(path)?;
    ensure!(
        clip.sample_rate == SAMPLE_RATE,
        "vocoder wrote {} Hz audio, expected {SAMPLE_RATE} Hz",
        clip.sample_rate
    );
    Ok(clip)
}
