//! Dataset curation: VAD-driven segmentation with randomized merge lengths,
//! per-segment quality metrics and subset assignment.

mod pipeline;
mod stats;

pub use pipeline::{
    energy_vad, load_manifest, phoneme_count, process_song, run_pipeline, song_seed, subset_counts,
    PipelineOptions, PipelineSummary, SongRecord,
};
pub use stats::{dataset_stats, load_segments, StatsReport};

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{ensure, Error, Result};
use crate::formats::VadLabels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Rejected,
    Basic,
    Standard,
    Premium,
}

impl Subset {
    pub fn name(&self) -> &'static str {
        match self {
            Subset::Rejected => "rejected",
            Subset::Basic => "basic",
            Subset::Standard => "standard",
            Subset::Premium => "premium",
        }
    }
}

/// A time span in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub start_s: f64,
    pub end_s: f64,
}

impl Span {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// A curated segment with its quality metrics. Metrics are absent when the
/// corresponding input file was not supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub song_id: String,
    pub language: String,
    pub start_s: f64,
    pub end_s: f64,
    pub pps: Option<f64>,
    pub dnsmos: Option<f64>,
    pub primary_frac: Option<f64>,
    /// Set when the primary fraction defaulted to 1.0 for lack of diarization.
    #[serde(default)]
    pub primary_warning: bool,
    pub subset: Option<Subset>,
}

impl Segment {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn span(&self) -> Span {
        Span {
            start_s: self.start_s,
            end_s: self.end_s,
        }
    }
}

/// Segmentation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentParams {
    pub merge_gap_s: f64,
    pub threshold_mean_s: f64,
    pub threshold_std_s: f64,
    pub min_len_s: f64,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            merge_gap_s: 3.0,
            threshold_mean_s: 18.0,
            threshold_std_s: 3.0,
            min_len_s: 3.0,
        }
    }
}

/// Maximal voiced runs as spans.
pub fn voiced_runs(labels: &VadLabels) -> Vec<Span> {
    let mut runs = Vec::new();
    let mut start = None;
    let rate = labels.rate_hz;
    for (i, &v) in labels.voiced.iter().chain(std::iter::once(&false)).enumerate() {
        match (v, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push(Span {
                    start_s: s as f64 / rate,
                    end_s: i as f64 / rate,
                });
                start = None;
            }
            _ => {}
        }
    }
    runs
}

/// Greedy left-to-right merge of voiced runs. A group absorbs the next run
/// while the gap is below `merge_gap_s` and the group has not yet exceeded a
/// length threshold drawn from `N(mean, std)`; a new threshold is drawn for
/// every group. Groups shorter than `min_len_s` are dropped.
pub fn segment_vad(labels: &VadLabels, params: &SegmentParams, seed: u64) -> Result<Vec<Span>> {
    ensure!(params.merge_gap_s > 0.0, "merge gap must be positive");
    ensure!(params.min_len_s > 0.0, "minimum length must be positive");
    ensure!(params.threshold_std_s >= 0.0, "threshold std must be non-negative");
    let normal = Normal::new(params.threshold_mean_s, params.threshold_std_s)
        .map_err(|e| Error::invalid(format!("bad threshold distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let runs = voiced_runs(labels);
    let mut out = Vec::new();
    let mut iter = runs.into_iter();
    let Some(mut cur) = iter.next() else {
        return Ok(out);
    };
    let mut threshold = normal.sample(&mut rng);
    for run in iter {
        let gap = run.start_s - cur.end_s;
        if gap < params.merge_gap_s && cur.duration() <= threshold {
            cur.end_s = run.end_s;
        } else {
            if cur.duration() >= params.min_len_s {
                out.push(cur);
            }
            cur = run;
            threshold = normal.sample(&mut rng);
        }
    }
    if cur.duration() >= params.min_len_s {
        out.push(cur);
    }
    Ok(out)
}

/// Sample-accurate slices of `audio` at the segment timestamps.
pub fn slice_accompaniment(segments: &[Span], audio: &AudioClip) -> Result<Vec<AudioClip>> {
    let sr = audio.sample_rate as f64;
    segments
        .iter()
        .map(|s| {
            ensure!(
                s.start_s >= 0.0 && s.end_s >= s.start_s,
                "segment [{}, {}] is not a valid span",
                s.start_s,
                s.end_s
            );
            let a = (s.start_s * sr).round() as usize;
            let b = (s.end_s * sr).round() as usize;
            ensure!(
                b <= audio.len(),
                "segment ends at {} s beyond clip duration {} s",
                s.end_s,
                audio.duration_s()
            );
            AudioClip::new(audio.samples[a..b].to_vec(), audio.sample_rate)
        })
        .collect()
}

/// Phonemes per second.
pub fn compute_pps(phoneme_count: usize, duration_s: f64) -> Result<f64> {
    ensure!(duration_s > 0.0, "duration must be positive, got {duration_s}");
    Ok(phoneme_count as f64 / duration_s)
}

/// One diarization turn in song time.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerTurn {
    pub speaker: String,
    pub start_s: f64,
    pub end_s: f64,
}

/// Union length of intervals.
fn union_length(mut iv: Vec<(f64, f64)>) -> f64 {
    iv.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    let mut cur: Option<(f64, f64)> = None;
    for (a, b) in iv {
        match cur {
            Some((ca, cb)) if a <= cb => cur = Some((ca, cb.max(b))),
            Some((ca, cb)) => {
                total += cb - ca;
                cur = Some((a, b));
            }
            None => cur = Some((a, b)),
        }
    }
    if let Some((a, b)) = cur {
        total += b - a;
    }
    total
}

/// Share of the segment's diarized time held by its longest-singing speaker:
/// each speaker's turns are clipped to the span and unioned, and the largest
/// per-speaker total is divided by the sum of all per-speaker totals.
/// Returns `(fraction, warning)`; with no diarized time the fraction is 1.0
/// and the warning is set.
pub fn primary_singer_fraction(turns: &[SpeakerTurn], span: Span) -> (f64, bool) {
    let mut per: std::collections::BTreeMap<&str, Vec<(f64, f64)>> = Default::default();
    for t in turns {
        let a = t.start_s.max(span.start_s);
        let b = t.end_s.min(span.end_s);
        if b > a {
            per.entry(t.speaker.as_str()).or_default().push((a, b));
        }
    }
    let totals: Vec<f64> = per.into_values().map(union_length).collect();
    let sum: f64 = totals.iter().sum();
    if sum <= 0.0 {
        return (1.0, true);
    }
    let best = totals.iter().cloned().fold(0.0, f64::max);
    ((best / sum).clamp(0.0, 1.0), false)
}

/// Acceptance region of one subset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetRule {
    pub dnsmos_min: f64,
    pub pps_min: f64,
    pub pps_max: f64,
    pub primary_min: f64,
}

impl SubsetRule {
    pub fn accepts(&self, dnsmos: f64, pps: f64, primary: f64) -> bool {
        dnsmos >= self.dnsmos_min && (self.pps_min..=self.pps_max).contains(&pps) && primary >= self.primary_min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetThresholds {
    pub basic: SubsetRule,
    pub standard: SubsetRule,
    pub premium: SubsetRule,
}

impl Default for SubsetThresholds {
    fn default() -> Self {
        Self {
            basic: SubsetRule {
                dnsmos_min: 2.5,
                pps_min: 12.0,
                pps_max: 35.0,
                primary_min: 0.8,
            },
            standard: SubsetRule {
                dnsmos_min: 3.5,
                pps_min: 16.0,
                pps_max: 32.0,
                primary_min: 0.9,
            },
            premium: SubsetRule {
                dnsmos_min: 3.8,
                pps_min: 18.0,
                pps_max: 30.0,
                primary_min: 1.0,
            },
        }
    }
}

impl SubsetThresholds {
    /// Each tier must be strictly tighter than the one below in every
    /// coordinate.
    pub fn validate(&self) -> Result<()> {
        for (lo, hi, name) in [
            (&self.basic, &self.standard, "standard"),
            (&self.standard, &self.premium, "premium"),
        ] {
            ensure!(
                hi.dnsmos_min > lo.dnsmos_min
                    && hi.pps_min > lo.pps_min
                    && hi.pps_max < lo.pps_max
                    && hi.primary_min > lo.primary_min,
                "{name} thresholds must be strictly tighter than the tier below"
            );
        }
        for r in [&self.basic, &self.standard, &self.premium] {
            ensure!(r.pps_min <= r.pps_max, "pps band is empty");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::formats::read_text(path)?;
        let t: Self = toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        t.validate()?;
        Ok(t)
    }
}

/// Highest tier whose three conditions all hold.
pub fn assign_subset(seg: &Segment, thresholds: &SubsetThresholds) -> Result<Subset> {
    let (Some(d), Some(p), Some(f)) = (seg.dnsmos, seg.pps, seg.primary_frac) else {
        return Err(Error::invalid(format!("segment {} is missing a quality metric", seg.id)));
    };
    ensure!(
        d.is_finite() && p.is_finite() && f.is_finite(),
        "segment {} has non-finite metrics",
        seg.id
    );
    Ok(if thresholds.premium.accepts(d, p, f) {
        Subset::Premium
    } else if thresholds.standard.accepts(d, p, f) {
        Subset::Standard
    } else if thresholds.basic.accepts(d, p, f) {
        Subset::Basic
    } else {
        Subset::Rejected
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(spans: &[(f64, f64)], total_s: f64) -> VadLabels {
        let mut v = vec![false; (total_s * 100.0).round() as usize];
        for &(a, b) in spans {
            for f in (a * 100.0).round() as usize..(b * 100.0).round() as usize {
                v[f] = true;
            }
        }
        VadLabels::new(v, 100.0).unwrap()
    }

    fn spans(out: &[Span]) -> Vec<(f64, f64)> {
        out.iter().map(|s| (s.start_s, s.end_s)).collect()
    }

    fn fixed(threshold: f64) -> SegmentParams {
        SegmentParams {
            threshold_mean_s: threshold,
            threshold_std_s: 0.0,
            ..SegmentParams::default()
        }
    }

    #[test]
    fn single_run_shorter_than_threshold() {
        let out = segment_vad(&labels(&[(0.0, 10.0)], 12.0), &fixed(18.0), 0).unwrap();
        assert_eq!(spans(&out), vec![(0.0, 10.0)]);
    }

    #[test]
    fn gap_rule_hand_trace() {
        let l = labels(&[(0.0, 8.0), (9.0, 17.0), (21.0, 30.0)], 31.0);
        let out = segment_vad(&l, &fixed(18.0), 0).unwrap();
        assert_eq!(spans(&out), vec![(0.0, 17.0), (21.0, 30.0)]);
    }

    #[test]
    fn empty_and_short_inputs() {
        assert!(segment_vad(&labels(&[], 5.0), &fixed(18.0), 0).unwrap().is_empty());
        assert!(segment_vad(&labels(&[(1.0, 3.5)], 5.0), &fixed(18.0), 0).unwrap().is_empty());
        let bad = SegmentParams {
            merge_gap_s: 0.0,
            ..SegmentParams::default()
        };
        assert!(segment_vad(&labels(&[], 5.0), &bad, 0).is_err());
    }

    #[test]
    fn pps_and_slices() {
        assert_eq!(compute_pps(0, 2.0).unwrap(), 0.0);
        assert_eq!(compute_pps(36, 1.5).unwrap(), 24.0);
        assert!(compute_pps(3, 0.0).is_err());
        let clip = AudioClip::new((0..44100 * 3).map(|i| (i % 100) as f32 / 100.0).collect(), 44100).unwrap();
        let s = slice_accompaniment(
            &[
                Span { start_s: 1.0, end_s: 2.0 },
                Span { start_s: 0.0, end_s: 3.0 },
            ],
            &clip,
        )
        .unwrap();
        assert_eq!(s[0].len(), 44100);
        assert_eq!(s[0].samples[0], clip.samples[44100]);
        assert_eq!(s[1], clip);
        assert!(slice_accompaniment(&[Span { start_s: 2.0, end_s: 3.5 }], &clip).is_err());
    }

    #[test]
    fn primary_fraction_cases() {
        let span = Span { start_s: 0.0, end_s: 10.0 };
        let turn = |s: &str, a: f64, b: f64| SpeakerTurn {
            speaker: s.into(),
            start_s: a,
            end_s: b,
        };
        assert_eq!(primary_singer_fraction(&[turn("a", -5.0, 20.0)], span), (1.0, false));
        let (f, w) = primary_singer_fraction(&[turn("a", 0.0, 6.0), turn("b", 6.0, 10.0)], span);
        assert!((f - 0.6).abs() < 1e-12 && !w);
        // relabeling does not matter
        let (g, _) = primary_singer_fraction(&[turn("z", 0.0, 6.0), turn("y", 6.0, 10.0)], span);
        assert_eq!(f, g);
        assert_eq!(primary_singer_fraction(&[], span), (1.0, true));
        // overlapping turns of one speaker are unioned
        let (f, _) = primary_singer_fraction(
            &[turn("a", 0.0, 4.0), turn("a", 2.0, 6.0), turn("b", 6.0, 10.0)],
            span,
        );
        assert!((f - 0.6).abs() < 1e-12);
    }

    fn seg(d: f64, p: f64, f: f64) -> Segment {
        Segment {
            id: "s".into(),
            song_id: "song".into(),
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

    #[test]
    fn subset_examples() {
        let t = SubsetThresholds::default();
        t.validate().unwrap();
        assert_eq!(assign_subset(&seg(3.9, 20.0, 1.0), &t).unwrap(), Subset::Premium);
        assert_eq!(assign_subset(&seg(2.4, 20.0, 1.0), &t).unwrap(), Subset::Rejected);
        assert_eq!(assign_subset(&seg(3.6, 17.0, 0.95), &t).unwrap(), Subset::Standard);
        let mut missing = seg(3.9, 20.0, 1.0);
        missing.pps = None;
        assert!(assign_subset(&missing, &t).is_err());
    }

    #[test]
    fn loose_premium_is_rejected_by_validation() {
        let mut t = SubsetThresholds::default();
        t.premium.pps_max = 33.0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn thresholds_parse_from_toml() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.toml");
        std::fs::write(
            &p,
            "[basic]\ndnsmos_min = 2.5\npps_min = 12.0\npps_max = 35.0\nprimary_min = 0.8\n\
             [standard]\ndnsmos_min = 3.5\npps_min = 16.0\npps_max = 32.0\nprimary_min = 0.9\n\
             [premium]\ndnsmos_min = 3.8\npps_min = 18.0\npps_max = 30.0\nprimary_min = 1.0\n",
        )
        .unwrap();
        assert_eq!(SubsetThresholds::load(&p).unwrap(), SubsetThresholds::default());
        std::fs::write(&p, "[basic]\nbogus = 1\n").unwrap();
        assert!(SubsetThresholds::load(&p).is_err());
    }
}
