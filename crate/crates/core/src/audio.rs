//! Audio clip and mel-spectrogram containers.

use std::path::Path;

use crate::error::{ensure, Result};
use crate::formats::{self, RawMatrix, MEL_MAGIC};

pub const SAMPLE_RATE: u32 = 44_100;
pub const HOP_LENGTH: usize = 512;
pub const N_MELS: usize = 128;
/// 44_100 / 512 = 86.13 frames per second.
pub const MEL_FRAME_RATE_HZ: f64 = SAMPLE_RATE as f64 / HOP_LENGTH as f64;

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        ensure!(sample_rate > 0, "sample rate must be positive");
        ensure!(
            samples.iter().all(|s| s.is_finite()),
            "audio contains non-finite samples"
        );
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(duration_s: f64, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; (duration_s * sample_rate as f64).round() as usize],
            sample_rate,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn load_wav(path: &Path) -> Result<Self> {
        let (samples, sr) = formats::read_wav(path)?;
        Self::new(samples, sr)
    }

    pub fn save_wav(&self, path: &Path) -> Result<()> {
        formats::write_wav(path, &self.samples, self.sample_rate)
    }
}

/// Log-mel magnitudes `[T x n_mels]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    frames: Vec<f32>,
    n_frames: usize,
    n_mels: usize,
    pub frame_rate_hz: f64,
}

impl MelSpectrogram {
    pub fn new(frames: Vec<f32>, n_frames: usize, n_mels: usize, frame_rate_hz: f64) -> Result<Self> {
        ensure!(
            frames.len() == n_frames * n_mels,
            "mel payload has {} values, expected {n_frames} x {n_mels}",
            frames.len()
        );
        ensure!(
            frames.iter().all(|v| v.is_finite()),
            "mel spectrogram contains non-finite values"
        );
        ensure!(frame_rate_hz > 0.0, "mel frame rate must be positive");
        Ok(Self {
            frames,
            n_frames,
            n_mels,
            frame_rate_hz,
        })
    }

    pub fn filled(n_frames: usize, n_mels: usize, value: f32) -> Self {
        Self {
            frames: vec![value; n_frames * n_mels],
            n_frames,
            n_mels,
            frame_rate_hz: MEL_FRAME_RATE_HZ,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Frames `start..start+len`, clamped to the spectrogram.
    pub fn excerpt(&self, start: usize, len: usize) -> Self {
        let start = start.min(self.n_frames);
        let end = (start + len).min(self.n_frames);
        Self {
            frames: self.frames[start * self.n_mels..end * self.n_mels].to_vec(),
            n_frames: end - start,
            n_mels: self.n_mels,
            frame_rate_hz: self.frame_rate_hz,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m = formats::read_matrix(path, MEL_MAGIC)?;
        Self::new(m.data, m.rows, m.cols, m.rate as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        formats::write_matrix(
            path,
            MEL_MAGIC,
            &RawMatrix {
                rows: self.n_frames,
                cols: self.n_mels,
                rate: self.frame_rate_hz as f32,
                data: self.frames.clone(),
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_rate_is_86_1() {
        assert!((MEL_FRAME_RATE_HZ - 86.13).abs() < 0.01);
    }

    #[test]
    fn mel_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.mel");
        let data = (0..3 * N_MELS).map(|i| i as f32 * 0.01).collect();
        let m = MelSpectrogram::new(data, 3, N_MELS, MEL_FRAME_RATE_HZ).unwrap();
        m.save(&p).unwrap();
        let back = MelSpectrogram::load(&p).unwrap();
        assert_eq!(back.as_slice(), m.as_slice());
        assert_eq!(back.n_mels(), 128);
        assert_eq!(m.excerpt(1, 10).n_frames(), 2);
    }
}
