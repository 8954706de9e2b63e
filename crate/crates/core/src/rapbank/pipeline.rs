use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::stats::StatsReport;
use super::{
    assign_subset, compute_pps, primary_singer_fraction, segment_vad, slice_accompaniment, Segment,
    SegmentParams, SpeakerTurn, Subset, SubsetThresholds,
};
use crate::audio::AudioClip;
use crate::error::{ensure, Error, Result};
use crate::formats::{read_text, read_vad, write_text, VadLabels};
use crate::lm::ARPABET;

/// One manifest row. Relative paths are resolved against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SongRecord {
    pub song_id: String,
    pub language: String,
    pub duration_s: f64,
    pub vocal_path: PathBuf,
    pub accomp_path: PathBuf,
    #[serde(default)]
    pub vad_path: Option<PathBuf>,
    #[serde(default)]
    pub transcript_path: Option<PathBuf>,
    #[serde(default)]
    pub diarization_path: Option<PathBuf>,
    #[serde(default)]
    pub dnsmos_path: Option<PathBuf>,
}

/// Read a JSON-lines manifest. Blank lines are ignored.
pub fn load_manifest(path: &Path) -> Result<Vec<SongRecord>> {
    let text = read_text(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: SongRecord = serde_json::from_str(line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?;
        ensure!(
            rec.duration_s > 0.0,
            "song {} has non-positive duration",
            rec.song_id
        );
        ensure!(seen.insert(rec.song_id.clone()), "duplicate song id {}", rec.song_id);
        resolve(&mut rec.vocal_path);
        resolve(&mut rec.accomp_path);
        for p in [
            &mut rec.vad_path,
            &mut rec.transcript_path,
            &mut rec.diarization_path,
            &mut rec.dnsmos_path,
        ]
        .into_iter()
        .flatten()
        {
            resolve(p);
        }
        out.push(rec);
    }
    Ok(out)
}

/// Per-song seed: the first eight bytes of SHA-256 over the global seed
/// (little endian) followed by the song id.
pub fn song_seed(global_seed: u64, song_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(song_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

/// Frame-level voicing from RMS energy: a frame is voiced when its level
/// exceeds `threshold_db` dBFS.
pub fn energy_vad(audio: &AudioClip, rate_hz: f64, threshold_db: f64) -> Result<VadLabels> {
    ensure!(rate_hz > 0.0, "VAD rate must be positive");
    let hop = (audio.sample_rate as f64 / rate_hz).round().max(1.0) as usize;
    let voiced = audio
        .samples
        .chunks(hop)
        .map(|c| {
            let rms = (c.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / c.len() as f64).sqrt();
            20.0 * rms.max(1e-12).log10() > threshold_db
        })
        .collect();
    VadLabels::new(voiced, audio.sample_rate as f64 / hop as f64)
}

const DIGRAPHS: [&str; 9] = ["th", "sh", "ch", "ph", "wh", "ck", "ng", "ee", "oo"];

/// Phoneme count of a transcript line. ARPAbet input is counted symbol by
/// symbol; Han characters count as two phonemes (initial and final); other
/// text counts letters with common English digraphs merged.
pub fn phoneme_count(text: &str) -> usize {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let is_arpabet = !tokens.is_empty()
        && tokens.iter().all(|t| {
            let bare = t.trim_end_matches(|c: char| c.is_ascii_digit());
            ARPABET.contains(&bare)
        });
    if is_arpabet {
        return tokens.len();
    }
    let mut count = 0;
    for word in text.split(|c: char| !c.is_alphabetic()) {
        let lower = word.to_lowercase();
        let han = lower.chars().filter(|c| is_han(*c)).count();
        let latin: String = lower.chars().filter(|c| !is_han(*c)).collect();
        let n = latin.chars().count();
        let merged = DIGRAPHS.iter().map(|d| latin.matches(d).count()).sum::<usize>();
        count += 2 * han + n.saturating_sub(merged);
    }
    count
}

fn is_han(c: char) -> bool {
    matches!(c as u32, 0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0xF900..=0xFAFF)
}

fn parse_keyed(path: &Path, sep: Option<char>) -> Result<HashMap<String, String>> {
    let text = read_text(path)?;
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let split = match sep {
            Some(c) => line.split_once(c),
            None => line.trim().split_once(char::is_whitespace),
        };
        let (k, v) = split.ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {} has no key", n + 1),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn parse_diarization(path: &Path) -> Result<Vec<SpeakerTurn>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = || Error::Format {
                path: path.to_path_buf(),
                message: format!("line {}: expected `speaker start end`", n + 1),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(bad());
            }
            let start_s: f64 = f[1].parse().map_err(|_| bad())?;
            let end_s: f64 = f[2].parse().map_err(|_| bad())?;
            Ok(SpeakerTurn {
                speaker: f[0].to_string(),
                start_s,
                end_s,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineOptions {
    pub segment: SegmentParams,
    pub thresholds: SubsetThresholds,
    pub seed: u64,
    /// Write vocal and accompaniment slices next to the segment table.
    pub write_audio: bool,
    /// Energy VAD settings used when a song has no label file.
    pub vad_rate_hz: f64,
    pub vad_threshold_db: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            segment: SegmentParams::default(),
            thresholds: SubsetThresholds::default(),
            seed: 0,
            write_audio: true,
            vad_rate_hz: 100.0,
            vad_threshold_db: -40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub songs: usize,
    pub failed: BTreeMap<String, String>,
    pub segments: usize,
    pub stats: StatsReport,
}

/// Segment and score one song.
pub fn process_song(rec: &SongRecord, opts: &PipelineOptions, audio_dir: Option<&Path>) -> Result<Vec<Segment>> {
    let vocal = if rec.vad_path.is_none() || audio_dir.is_some() {
        Some(AudioClip::load_wav(&rec.vocal_path)?)
    } else {
        None
    };
    let labels = match &rec.vad_path {
        Some(p) => read_vad(p)?,
        None => energy_vad(vocal.as_ref().expect("loaded above"), opts.vad_rate_hz, opts.vad_threshold_db)?,
    };
    let spans = segment_vad(&labels, &opts.segment, song_seed(opts.seed, &rec.song_id))?;
    let dnsmos = rec.dnsmos_path.as_deref().map(|p| parse_keyed(p, None)).transpose()?;
    let transcript = rec
        .transcript_path
        .as_deref()
        .map(|p| parse_keyed(p, Some('\t')))
        .transpose()?;
    let turns = rec
        .diarization_path
        .as_deref()
        .map(parse_diarization)
        .transpose()?
        .unwrap_or_default();

    let mut out = Vec::with_capacity(spans.len());
    for (i, span) in spans.iter().enumerate() {
        let id = format!("{}_{i:04}", rec.song_id);
        let pps = match transcript.as_ref().and_then(|t| t.get(&id)) {
            Some(text) => Some(compute_pps(phoneme_count(text), span.duration())?),
            None => None,
        };
        let dnsmos = match dnsmos.as_ref().and_then(|d| d.get(&id)) {
            Some(v) => Some(v.parse::<f64>().map_err(|_| {
                Error::invalid(format!("segment {id} has an unreadable quality score `{v}`"))
            })?),
            None => None,
        };
        let (frac, warning) = primary_singer_fraction(&turns, *span);
        let mut seg = Segment {
            id,
            song_id: rec.song_id.clone(),
            language: rec.language.clone(),
            start_s: span.start_s,
            end_s: span.end_s,
            pps,
            dnsmos,
            primary_frac: Some(frac),
            primary_warning: warning,
            subset: None,
        };
        seg.subset = assign_subset(&seg, &opts.thresholds).ok();
        out.push(seg);
    }
    if let Some(dir) = audio_dir {
        let vocal = vocal.expect("loaded when writing audio");
        let accomp = AudioClip::load_wav(&rec.accomp_path)?;
        let v = slice_accompaniment(&spans, &vocal)?;
        let a = slice_accompaniment(&spans, &accomp)?;
        for (seg, (v, a)) in out.iter().zip(v.iter().zip(&a)) {
            v.save_wav(&dir.join(format!("{}_vocal.wav", seg.id)))?;
            a.save_wav(&dir.join(format!("{}_accomp.wav", seg.id)))?;
        }
    }
    Ok(out)
}

/// Run the pipeline over a manifest. Writes `segments.jsonl`, `report.json`
/// and plot data under `out_dir` (plus audio slices under `segments/` when
/// enabled). Songs that fail are listed in the report and skipped.
pub fn run_pipeline(manifest: &Path, out_dir: &Path, opts: &PipelineOptions) -> Result<PipelineSummary> {
    opts.thresholds.validate()?;
    let songs = load_manifest(manifest)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let audio_dir = out_dir.join("segments");
    if opts.write_audio {
        std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    }
    let mut all = Vec::new();
    let mut failed = BTreeMap::new();
    for rec in &songs {
        match process_song(rec, opts, opts.write_audio.then_some(audio_dir.as_path())) {
            Ok(segs) => all.extend(segs),
            Err(e) => {
                failed.insert(rec.song_id.clone(), e.to_string());
            }
        }
    }
    let mut lines = String::new();
    for s in &all {
        lines.push_str(&serde_json::to_string(s)?);
        lines.push('\n');
    }
    write_text(&out_dir.join("segments.jsonl"), &lines)?;
    let stats = StatsReport::from_segments(&all, 0);
    stats.write(out_dir)?;
    let summary = PipelineSummary {
        songs: songs.len(),
        failed,
        segments: all.len(),
        stats,
    };
    write_text(&out_dir.join("report.json"), &serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Count of segments per subset, with unscored segments under `None`.
pub fn subset_counts(segs: &[Segment]) -> BTreeMap<Option<Subset>, usize> {
    let mut m = BTreeMap::new();
    for s in segs {
        *m.entry(s.subset).or_insert(0) += 1;
    }
    m
}
