//! Frame-level features, the K-means semantic tokenizer and token-to-mel-rate
//! alignment.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::bench::{gen_toy_pair, ToySpec};
use crate::error::{ensure, Error, Result};
use crate::formats::{self, RawMatrix, CODEBOOK_MAGIC, FEATURE_MAGIC};

/// Frame rate of self-supervised speech features (20 ms hop).
pub const SSL_FRAME_RATE_HZ: f64 = 50.0;

/// Dense `[T x D]` matrix of frame features, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f32>,
    rows: usize,
    dim: usize,
    pub frame_rate_hz: f64,
}

impl FeatureMatrix {
    pub fn new(data: Vec<f32>, rows: usize, dim: usize, frame_rate_hz: f64) -> Result<Self> {
        ensure!(
            data.len() == rows * dim,
            "feature payload has {} values, expected {rows} x {dim}",
            data.len()
        );
        ensure!(
            frame_rate_hz.is_finite() && frame_rate_hz > 0.0,
            "frame rate must be positive, got {frame_rate_hz}"
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            "feature matrix contains non-finite values"
        );
        Ok(Self {
            data,
            rows,
            dim,
            frame_rate_hz,
        })
    }

    pub fn zeros(rows: usize, dim: usize, frame_rate_hz: f64) -> Self {
        Self {
            data: vec![0.0; rows * dim],
            rows,
            dim,
            frame_rate_hz,
        }
    }

    pub fn from_rows(rows: &[Vec<f32>], frame_rate_hz: f64) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        ensure!(
            rows.iter().all(|r| r.len() == dim),
            "ragged feature rows"
        );
        Self::new(rows.concat(), rows.len(), dim, frame_rate_hz)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact panics on zero; an empty-dim matrix yields no rows here
        self.data.chunks_exact(self.dim.max(1)).take(self.rows)
    }

    pub fn duration_s(&self) -> f64 {
        self.rows as f64 / self.frame_rate_hz
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m = formats::read_matrix(path, FEATURE_MAGIC)?;
        Self::new(m.data, m.rows, m.cols, m.rate as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        formats::write_matrix(path, FEATURE_MAGIC, &self.to_raw())
    }

    fn to_raw(&self) -> RawMatrix {
        RawMatrix {
            rows: self.rows,
            cols: self.dim,
            rate: self.frame_rate_hz as f32,
            data: self.data.clone(),
        }
    }
}

/// K-means centroids addressed by token id.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: Vec<f32>,
    k: usize,
    dim: usize,
    pub fit_seed: u64,
    /// Frame rate of the features the codebook was fit on.
    pub frame_rate_hz: f64,
}

impl Codebook {
    pub fn new(centroids: Vec<f32>, k: usize, dim: usize, frame_rate_hz: f64) -> Result<Self> {
        ensure!(k >= 1, "codebook needs at least one centroid");
        ensure!(centroids.len() == k * dim, "centroid payload does not match {k} x {dim}");
        ensure!(
            centroids.iter().all(|v| v.is_finite()),
            "codebook contains non-finite values"
        );
        Ok(Self {
            centroids,
            k,
            dim,
            fit_seed: 0,
            frame_rate_hz,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Token vocabulary implied by this codebook: `k` cluster ids plus one
    /// end-of-sequence id.
    pub fn vocab_size(&self) -> usize {
        self.k + 1
    }

    /// The KMC1 container has no slot for the fit seed; it is not persisted.
    pub fn save(&self, path: &Path) -> Result<()> {
        formats::write_matrix(
            path,
            CODEBOOK_MAGIC,
            &RawMatrix {
                rows: self.k,
                cols: self.dim,
                rate: self.frame_rate_hz as f32,
                data: self.centroids.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m = formats::read_matrix(path, CODEBOOK_MAGIC)?;
        Self::new(m.data, m.rows, m.cols, m.rate as f64)
    }
}

/// Discrete token ids; the last id of the vocabulary is reserved for
/// end-of-sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    vocab_size: usize,
    frame_rate_millihz: u64,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, vocab_size: usize, frame_rate_hz: f64) -> Result<Self> {
        ensure!(vocab_size >= 2, "vocabulary must hold at least one token and EOS");
        ensure!(
            frame_rate_hz.is_finite() && frame_rate_hz > 0.0,
            "token frame rate must be positive"
        );
        let eos = (vocab_size - 1) as u32;
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {vocab_size}")));
        }
        if let Some(pos) = ids.iter().position(|&id| id == eos) {
            ensure!(pos + 1 == ids.len(), "end-of-sequence id must be last");
        }
        Ok(Self {
            ids,
            vocab_size,
            frame_rate_millihz: (frame_rate_hz * 1000.0).round() as u64,
        })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn eos_id(&self) -> u32 {
        (self.vocab_size - 1) as u32
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_millihz as f64 / 1000.0
    }

    pub fn ends_with_eos(&self) -> bool {
        self.ids.last() == Some(&self.eos_id())
    }

    /// Ids with any trailing end-of-sequence marker removed.
    pub fn content(&self) -> &[u32] {
        if self.ends_with_eos() {
            &self.ids[..self.ids.len() - 1]
        } else {
            &self.ids
        }
    }

    pub fn with_eos(&self) -> Self {
        let mut ids = self.content().to_vec();
        ids.push(self.eos_id());
        Self { ids, ..self.clone() }
    }
}

/// Condition frames at the mel frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedConditionFrames {
    pub frames: Vec<f32>,
    pub rows: usize,
    pub dim: usize,
    pub frame_rate_hz: f64,
}

impl AlignedConditionFrames {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.frames[i * self.dim..(i + 1) * self.dim]
    }
}

/// Settings for a K-means fit.
#[derive(Debug, Clone, Copy)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Fit on a seeded random subset of at most this many frames.
    pub subsample: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Objective after each assignment step.
    pub objective_history: Vec<f64>,
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &c)| {
            let d = x as f64 - c;
            d * d
        })
        .sum()
}

fn nearest(frame: &[f32], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(frame, c);
        // strict comparison keeps the lowest index on ties
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp_init(frames: &[&[f32]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let to_f64 = |f: &[f32]| f.iter().map(|&v| v as f64).collect::<Vec<_>>();
    let mut centroids = vec![to_f64(frames[rng.random_range(0..frames.len())])];
    let mut d2: Vec<f64> = frames.iter().map(|f| sq_dist(f, &centroids[0])).collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // every frame already coincides with a centroid
            Err(_) => rng.random_range(0..frames.len()),
        };
        let c = to_f64(frames[next]);
        for (d, f) in d2.iter_mut().zip(frames) {
            *d = d.min(sq_dist(f, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn fit_kmeans_with(frames: &FeatureMatrix, params: KMeansParams) -> Result<KMeansFit> {
    let KMeansParams {
        k,
        seed,
        max_iters,
        subsample,
    } = params;
    ensure!(k >= 1, "k must be at least 1");
    ensure!(
        frames.rows() >= k,
        "K-means needs at least k={k} frames, got {}",
        frames.rows()
    );
    ensure!(
        frames.as_slice().iter().all(|v| v.is_finite()),
        "non-finite feature values"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<&[f32]> = frames.iter_rows().collect();
    if let Some(n) = subsample {
        ensure!(n >= k, "subsample size {n} is smaller than k={k}");
        if n < pool.len() {
            let idx = rand::seq::index::sample(&mut rng, pool.len(), n).into_vec();
            let mut idx = idx;
            idx.sort_unstable();
            pool = idx.into_iter().map(|i| pool[i]).collect();
        }
    }

    let dim = frames.dim();
    let mut centroids = kmeans_pp_init(&pool, k, &mut rng);
    let mut assign = vec![usize::MAX; pool.len()];
    let mut history = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut objective = 0.0;
        for (a, f) in assign.iter_mut().zip(&pool) {
            let (j, d) = nearest(f, &centroids);
            if *a != j {
                *a = j;
                changed = true;
            }
            objective += d;
        }
        history.push(objective);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, f) in assign.iter().zip(&pool) {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(f.iter()) {
                *s += v as f64;
            }
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            // an empty cluster keeps its previous centroid
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }

    let flat = centroids.iter().flatten().map(|&v| v as f32).collect();
    let mut codebook = Codebook::new(flat, k, dim, frames.frame_rate_hz)?;
    codebook.fit_seed = seed;
    Ok(KMeansFit {
        codebook,
        objective_history: history,
    })
}

pub fn fit_kmeans(frames: &FeatureMatrix, k: usize, seed: u64, max_iters: usize) -> Result<Codebook> {
    fit_kmeans_with(
        frames,
        KMeansParams {
            k,
            seed,
            max_iters,
            subsample: None,
        },
    )
    .map(|fit| fit.codebook)
}

/// Nearest-centroid ids, lowest index on ties.
pub fn tokenize(frames: &FeatureMatrix, codebook: &Codebook) -> Result<TokenSequence> {
    ensure!(
        frames.dim() == codebook.dim(),
        "feature dim {} does not match codebook dim {}",
        frames.dim(),
        codebook.dim()
    );
    let centroids: Vec<Vec<f64>> = (0..codebook.k())
        .map(|j| codebook.centroid(j).iter().map(|&v| v as f64).collect())
        .collect();
    let ids = frames
        .iter_rows()
        .map(|f| nearest(f, &centroids).0 as u32)
        .collect();
    TokenSequence::new(ids, codebook.vocab_size(), frames.frame_rate_hz)
}

/// Output length when resampling `len` frames from `source_hz` to `target_hz`.
pub fn resampled_len(len: usize, source_hz: f64, target_hz: f64) -> usize {
    (len as f64 * target_hz / source_hz).round() as usize
}

/// Source index feeding each output frame: the source frame whose span
/// contains the output frame center.
pub fn interpolation_indices(len: usize, source_hz: f64, target_hz: f64) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let ratio = source_hz / target_hz;
    (0..resampled_len(len, source_hz, target_hz))
        .map(|j| (((j as f64 + 0.5) * ratio).floor() as usize).min(len - 1))
        .collect()
}

/// Nearest-neighbour resampling of token embeddings to `target_rate_hz`.
pub fn interpolate_tokens(
    tokens: &TokenSequence,
    embedding_table: &FeatureMatrix,
    target_rate_hz: f64,
) -> Result<AlignedConditionFrames> {
    ensure!(
        target_rate_hz.is_finite() && target_rate_hz > 0.0,
        "target rate must be positive"
    );
    ensure!(
        embedding_table.rows() >= tokens.vocab_size(),
        "embedding table has {} rows, vocabulary is {}",
        embedding_table.rows(),
        tokens.vocab_size()
    );
    let dim = embedding_table.dim();
    let idx = interpolation_indices(tokens.len(), tokens.frame_rate_hz(), target_rate_hz);
    let mut frames = Vec::with_capacity(idx.len() * dim);
    for &i in &idx {
        frames.extend_from_slice(embedding_table.row(tokens.ids()[i] as usize));
    }
    Ok(AlignedConditionFrames {
        frames,
        rows: idx.len(),
        dim,
        frame_rate_hz: target_rate_hz,
    })
}

/// Paired accompaniment features and vocal tokens from the synthetic
/// benchmark generator.
pub fn synth_features(spec: &ToySpec, seed: u64) -> Result<(FeatureMatrix, TokenSequence)> {
    let pair = gen_toy_pair(spec, seed)?;
    Ok((pair.accomp, pair.vocal))
}
