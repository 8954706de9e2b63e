//! Objective evaluation metrics: word error rate, speaker similarity,
//! Frechet distance between embedding sets, classifier-posterior KL and a
//! beat/onset alignment report.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::audio::{AudioClip, HOP_LENGTH, SAMPLE_RATE};
use crate::error::{ensure, Result};
use crate::featurization::FeatureMatrix;

pub const KLD_EPS: f64 = 1e-8;
pub const DEFAULT_BEAT_TOLERANCE_S: f64 = 0.07;

/// Lowercase, drop everything that is not alphanumeric or whitespace, split
/// on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance between word sequences divided by the reference length.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    ensure!(!reference.is_empty(), "WER reference is empty");
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// WER on raw text after [`normalize_words`].
pub fn wer_text(reference: &str, hypothesis: &str) -> Result<f64> {
    wer(&normalize_words(reference), &normalize_words(hypothesis))
}

/// Cosine similarity of two speaker embeddings.
pub fn secs(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure!(
        a.len() == b.len(),
        "embedding dims differ: {} vs {}",
        a.len(),
        b.len()
    );
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    ensure!(na > 0.0 && nb > 0.0, "zero-norm embedding");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = x.row_mean().transpose();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = c.transpose() * &c / (n - 1.0);
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussians fitted to two embedding sets (rows are
/// embeddings).
pub fn fad(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    ensure!(a.len() >= 2 && b.len() >= 2, "FAD needs at least two embeddings per set");
    let d = a[0].len();
    ensure!(d > 0, "FAD embeddings are empty");
    ensure!(
        a.iter().chain(b).all(|r| r.len() == d),
        "FAD embedding dims differ"
    );
    let (mu_a, s_a) = mean_cov(&rows_to_matrix(a));
    let (mu_b, s_b) = mean_cov(&rows_to_matrix(b));
    // tr (S_a S_b)^1/2 = tr (S_a^1/2 S_b S_a^1/2)^1/2, the latter symmetric PSD
    let ra = psd_sqrt(&s_a);
    let inner = &ra * &s_b * &ra;
    let cross = psd_sqrt(&inner).trace();
    let diff = (mu_a - mu_b).norm_squared();
    Ok((diff + s_a.trace() + s_b.trace() - 2.0 * cross).max(0.0))
}

/// [`fad`] over the rows of two feature matrices.
pub fn fad_features(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<f64> {
    ensure!(a.dim() == b.dim(), "FAD embedding dims differ: {} vs {}", a.dim(), b.dim());
    let rows = |m: &FeatureMatrix| -> Vec<Vec<f64>> {
        m.iter_rows().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
    };
    fad(&rows(a), &rows(b))
}

fn check_distribution(row: &[f64], what: &str, i: usize) -> Result<()> {
    ensure!(
        row.iter().all(|v| v.is_finite() && *v >= 0.0),
        "{what} row {i} has negative or non-finite entries"
    );
    let s: f64 = row.iter().sum();
    ensure!((s - 1.0).abs() <= 1e-6, "{what} row {i} sums to {s}, not 1");
    Ok(())
}

/// Mean over rows of KL(p || q) after epsilon smoothing and renormalization.
pub fn kld(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<f64> {
    ensure!(!p.is_empty(), "KLD needs at least one row");
    ensure!(p.len() == q.len(), "KLD row counts differ: {} vs {}", p.len(), q.len());
    let mut total = 0.0;
    for (i, (pr, qr)) in p.iter().zip(q).enumerate() {
        ensure!(
            pr.len() == qr.len() && !pr.is_empty(),
            "KLD row {i} lengths differ"
        );
        check_distribution(pr, "p", i)?;
        check_distribution(qr, "q", i)?;
        let z = 1.0 + KLD_EPS * pr.len() as f64;
        total += pr
            .iter()
            .zip(qr)
            .map(|(&a, &b)| {
                let (a, b) = ((a + KLD_EPS) / z, (b + KLD_EPS) / z);
                a * (a / b).ln()
            })
            .sum::<f64>();
    }
    Ok((total / p.len() as f64).max(0.0))
}

/// Fraction of `onsets` lying within `tolerance_s` of some beat.
pub fn aligned_fraction(onsets: &[f64], beats: &[f64], tolerance_s: f64) -> f64 {
    if onsets.is_empty() {
        return 0.0;
    }
    let mut sorted = beats.to_vec();
    sorted.sort_by(f64::total_cmp);
    let hit = onsets
        .iter()
        .filter(|&&o| {
            let i = sorted.partition_point(|&b| b < o);
            let near = |j: usize| sorted.get(j).is_some_and(|b| (b - o).abs() <= tolerance_s);
            near(i) || (i > 0 && near(i - 1))
        })
        .count();
    hit as f64 / onsets.len() as f64
}

/// Peak-picking settings for the beat/onset detector.
#[derive(Debug, Clone)]
pub struct DetectorConfig {
    /// Peaks below this fraction of the curve maximum are ignored.
    pub rel_threshold: f64,
    pub min_gap_s: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            rel_threshold: 0.3,
            min_gap_s: 0.1,
        }
    }
}

/// Per-hop energy, smoothed with a `[1, 2, 1] / 4` kernel.
pub fn energy_envelope(clip: &AudioClip) -> Result<Vec<f64>> {
    ensure!(
        clip.len() >= HOP_LENGTH,
        "clip has {} samples, shorter than one hop",
        clip.len()
    );
    let raw: Vec<f64> = clip
        .samples
        .chunks(HOP_LENGTH)
        .map(|c| c.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / HOP_LENGTH as f64)
        .collect();
    let n = raw.len();
    Ok((0..n)
        .map(|i| {
            let l = raw[i.saturating_sub(1)];
            let r = raw[(i + 1).min(n - 1)];
            0.25 * l + 0.5 * raw[i] + 0.25 * r
        })
        .collect())
}

/// Local maxima above the threshold, greedily kept in descending height with
/// a minimum spacing; returns sorted frame indices.
pub fn pick_peaks(curve: &[f64], min_gap_frames: usize, rel_threshold: f64) -> Vec<usize> {
    let max = curve.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let n = curve.len();
    let mut cand: Vec<usize> = (0..n)
        .filter(|&i| {
            let v = curve[i];
            v >= rel_threshold * max
                && (i == 0 || v > curve[i - 1])
                && (i + 1 == n || v >= curve[i + 1])
        })
        .collect();
    cand.sort_by(|&a, &b| curve[b].total_cmp(&curve[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for c in cand {
        if kept.iter().all(|&k| k.abs_diff(c) >= min_gap_frames) {
            kept.push(c);
        }
    }
    kept.sort_unstable();
    kept
}

/// Beats, vocal onsets and their alignment, with the curves for plotting.
#[derive(Debug, Clone, Serialize)]
pub struct AlignmentReport {
    pub tolerance_s: f64,
    pub beats_s: Vec<f64>,
    pub onsets_s: Vec<f64>,
    pub aligned_fraction: f64,
    pub frame_rate_hz: f64,
    #[serde(skip)]
    pub accomp_energy: Vec<f64>,
    #[serde(skip)]
    pub vocal_flux: Vec<f64>,
}

impl AlignmentReport {
    /// Columns `time_s,accomp_energy,vocal_flux,beat,onset`.
    pub fn plot_csv(&self) -> String {
        let mut out = String::from("time_s,accomp_energy,vocal_flux,beat,onset\n");
        let n = self.accomp_energy.len().max(self.vocal_flux.len());
        let mark = |list: &[f64], i: usize| {
            let t = i as f64 / self.frame_rate_hz;
            u8::from(list.iter().any(|&x| (x - t).abs() < 0.5 / self.frame_rate_hz))
        };
        for i in 0..n {
            out.push_str(&format!(
                "{:.4},{:.6e},{:.6e},{},{}\n",
                i as f64 / self.frame_rate_hz,
                self.accomp_energy.get(i).copied().unwrap_or(0.0),
                self.vocal_flux.get(i).copied().unwrap_or(0.0),
                mark(&self.beats_s, i),
                mark(&self.onsets_s, i)
            ));
        }
        out
    }
}

pub fn beat_alignment_report(accomp: &AudioClip, vocal: &AudioClip, tolerance_s: f64) -> Result<AlignmentReport> {
    beat_alignment_with(accomp, vocal, tolerance_s, &DetectorConfig::default())
}

pub fn beat_alignment_with(
    accomp: &AudioClip,
    vocal: &AudioClip,
    tolerance_s: f64,
    cfg: &DetectorConfig,
) -> Result<AlignmentReport> {
    ensure!(
        accomp.sample_rate == SAMPLE_RATE && vocal.sample_rate == SAMPLE_RATE,
        "beat alignment expects {SAMPLE_RATE} Hz audio"
    );
    ensure!(tolerance_s >= 0.0, "tolerance must be nonnegative");
    let rate = SAMPLE_RATE as f64 / HOP_LENGTH as f64;
    let gap = ((cfg.min_gap_s * rate).round() as usize).max(1);
    let accomp_energy = energy_envelope(accomp)?;
    let vocal_energy = energy_envelope(vocal)?;
    let mut vocal_flux = vec![0.0; vocal_energy.len()];
    for i in 0..vocal_energy.len() {
        let prev = if i == 0 { 0.0 } else { vocal_energy[i - 1] };
        vocal_flux[i] = (vocal_energy[i] - prev).max(0.0);
    }
    let to_s = |v: Vec<usize>| -> Vec<f64> { v.into_iter().map(|i| i as f64 / rate).collect() };
    let beats_s = to_s(pick_peaks(&accomp_energy, gap, cfg.rel_threshold));
    let onsets_s = to_s(pick_peaks(&vocal_flux, gap, cfg.rel_threshold));
    Ok(AlignmentReport {
        tolerance_s,
        aligned_fraction: aligned_fraction(&onsets_s, &beats_s, tolerance_s),
        beats_s,
        onsets_s,
        frame_rate_hz: rate,
        accomp_energy,
        vocal_flux,
    })
}
