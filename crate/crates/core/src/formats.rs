//! Binary container formats and WAV IO.
//!
//! Matrix files share one layout: a 16-byte header (4-byte ASCII magic,
//! `u32` rows, `u32` columns, `f32` frame rate, all little-endian) followed by
//! `rows * cols` little-endian `f32` values in row-major order.
//!
//! | magic  | content                          |
//! |--------|----------------------------------|
//! | `FMX1` | frame-level feature matrix       |
//! | `KMC1` | K-means codebook (rows = k)      |
//! | `MEL1` | log-mel spectrogram (cols = 128) |
//!
//! VAD label files use magic `VAD1`, a `u32` frame count, an `f32` rate and
//! then one byte per frame (0 or 1).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"FMX1";
pub const CODEBOOK_MAGIC: [u8; 4] = *b"KMC1";
pub const MEL_MAGIC: [u8; 4] = *b"MEL1";
pub const VAD_MAGIC: [u8; 4] = *b"VAD1";

const HEADER_LEN: usize = 16;

/// Row-major `f32` matrix with the frame rate from the file header.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMatrix {
    pub rows: usize,
    pub cols: usize,
    pub rate: f32,
    pub data: Vec<f32>,
}

pub fn encode_matrix(magic: [u8; 4], m: &RawMatrix) -> Vec<u8> {
    debug_assert_eq!(m.data.len(), m.rows * m.cols);
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.data.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols as u32).to_le_bytes());
    out.extend_from_slice(&m.rate.to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(magic: [u8; 4], bytes: &[u8], path: &Path) -> Result<RawMatrix> {
    let fmt_err = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fmt_err(format!("file shorter than {HEADER_LEN}-byte header")));
    }
    if bytes[..4] != magic {
        return Err(fmt_err(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(&magic)
        )));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let rate = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fmt_err("header dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(fmt_err(format!(
            "payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RawMatrix {
        rows,
        cols,
        rate,
        data,
    })
}

pub fn write_matrix(path: &Path, magic: [u8; 4], m: &RawMatrix) -> Result<()> {
    fs::write(path, encode_matrix(magic, m)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path, magic: [u8; 4]) -> Result<RawMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(magic, &bytes, path)
}

/// Frame-level voiced/unvoiced labels.
#[derive(Debug, Clone, PartialEq)]
pub struct VadLabels {
    pub voiced: Vec<bool>,
    pub rate_hz: f64,
}

impl VadLabels {
    pub fn new(voiced: Vec<bool>, rate_hz: f64) -> Result<Self> {
        crate::error::ensure!(
            rate_hz.is_finite() && rate_hz > 0.0,
            "VAD rate must be positive, got {rate_hz}"
        );
        Ok(Self { voiced, rate_hz })
    }

    pub fn duration_s(&self) -> f64 {
        self.voiced.len() as f64 / self.rate_hz
    }
}

pub fn encode_vad(v: &VadLabels) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + v.voiced.len());
    out.extend_from_slice(&VAD_MAGIC);
    out.extend_from_slice(&(v.voiced.len() as u32).to_le_bytes());
    out.extend_from_slice(&(v.rate_hz as f32).to_le_bytes());
    out.extend(v.voiced.iter().map(|&b| b as u8));
    out
}

pub fn decode_vad(bytes: &[u8], path: &Path) -> Result<VadLabels> {
    let fmt_err = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 12 || bytes[..4] != VAD_MAGIC {
        return Err(fmt_err("missing VAD1 header".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let rate = f32::from_le_bytes(bytes[8..12].try_into().unwrap()) as f64;
    let body = &bytes[12..];
    if body.len() != n {
        return Err(fmt_err(format!("expected {n} label bytes, found {}", body.len())));
    }
    let voiced = body
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(fmt_err(format!("label byte {other} is not 0/1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    VadLabels::new(voiced, rate)
}

pub fn write_vad(path: &Path, v: &VadLabels) -> Result<()> {
    fs::write(path, encode_vad(v)).map_err(|e| Error::io(path, e))
}

pub fn read_vad(path: &Path) -> Result<VadLabels> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_vad(&bytes, path)
}

/// Read a WAV file as mono `f32` samples, averaging channels.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let mono = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    Ok((mono, spec.sample_rate))
}

/// Write mono 16-bit PCM.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Write a UTF-8 text file, creating parent directories.
pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
