use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Segment;
use crate::error::Result;
use crate::formats::{read_text, write_text};

/// Corpus summary: totals, duration distribution and subset sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub segments: usize,
    pub total_hours: f64,
    pub mean_duration_s: f64,
    pub language_hours: BTreeMap<String, f64>,
    /// Segment counts in one-second bins keyed by the bin's lower edge.
    pub duration_histogram: BTreeMap<u32, usize>,
    /// Keyed by subset name; segments lacking a metric are counted as
    /// `unscored`.
    pub subset_counts: BTreeMap<String, usize>,
    pub subset_hours: BTreeMap<String, f64>,
    pub skipped_rows: usize,
}

impl StatsReport {
    pub fn from_segments(segs: &[Segment], skipped_rows: usize) -> Self {
        let mut language_hours = BTreeMap::new();
        let mut duration_histogram = BTreeMap::new();
        let mut subset_counts = BTreeMap::new();
        let mut subset_hours = BTreeMap::new();
        let mut total = 0.0;
        for s in segs {
            let d = s.duration();
            total += d;
            *language_hours.entry(s.language.clone()).or_insert(0.0) += d / 3600.0;
            *duration_histogram.entry(d.floor() as u32).or_insert(0) += 1;
            let name = s.subset.map_or("unscored", |x| x.name()).to_string();
            *subset_counts.entry(name.clone()).or_insert(0) += 1;
            *subset_hours.entry(name).or_insert(0.0) += d / 3600.0;
        }
        Self {
            segments: segs.len(),
            total_hours: total / 3600.0,
            mean_duration_s: if segs.is_empty() { 0.0 } else { total / segs.len() as f64 },
            language_hours,
            duration_histogram,
            subset_counts,
            subset_hours,
            skipped_rows,
        }
    }

    /// Writes `stats.json` and CSV plot data under `plots/`.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        write_text(&out_dir.join("stats.json"), &serde_json::to_string_pretty(self)?)?;
        let mut hist = String::from("bin_start_s,count\n");
        for (b, c) in &self.duration_histogram {
            hist.push_str(&format!("{b},{c}\n"));
        }
        write_text(&out_dir.join("plots").join("duration_histogram.csv"), &hist)?;
        let mut lang = String::from("language,hours\n");
        for (l, h) in &self.language_hours {
            lang.push_str(&format!("{l},{h}\n"));
        }
        write_text(&out_dir.join("plots").join("language_hours.csv"), &lang)
    }
}

/// Read a segment table, skipping rows that fail to parse.
pub fn load_segments(path: &Path) -> Result<(Vec<Segment>, usize)> {
    let text = read_text(path)?;
    let mut segs = Vec::new();
    let mut skipped = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str::<Segment>(line) {
            Ok(s) if s.duration().is_finite() && s.duration() >= 0.0 => segs.push(s),
            _ => skipped += 1,
        }
    }
    Ok((segs, skipped))
}

pub fn dataset_stats(segments_path: &Path) -> Result<StatsReport> {
    let (segs, skipped) = load_segments(segments_path)?;
    Ok(StatsReport::from_segments(&segs, skipped))
}
