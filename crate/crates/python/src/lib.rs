//! Python bindings for rapgen.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rapgen::audio::{AudioClip, MelSpectrogram};
use rapgen::bench::{run_shift_ablation, AblationConfig, Inference};
use rapgen::cli::{cmd_generate, GenerateInputs, RunConfig};
use rapgen::featurization as feat;
use rapgen::formats::VadLabels;
use rapgen::lm::{shift_accompaniment, LyricsTokens, MaskDescriptor, SamplingConfig};
use rapgen::nn::to_f64_vec;
use rapgen::rapbank::{self, SegmentParams, SubsetThresholds};
use rapgen::Error;

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 if matches!(e, Error::Io { .. }) => PyOSError::new_err(e.to_string()),
        2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for rapgen::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Frame-level features, one row per frame.
#[pyclass(name = "FeatureMatrix", module = "rapgen_py")]
#[derive(Clone)]
struct PyFeatureMatrix {
    inner: feat::FeatureMatrix,
}

#[pymethods]
impl PyFeatureMatrix {
    #[new]
    #[pyo3(signature = (rows, frame_rate_hz=50.0))]
    fn new(rows: Vec<Vec<f32>>, frame_rate_hz: f64) -> PyResult<Self> {
        Ok(Self {
            inner: feat::FeatureMatrix::from_rows(&rows, frame_rate_hz).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: feat::FeatureMatrix::load(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    #[getter]
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn duration_s(&self) -> f64 {
        self.inner.duration_s()
    }

    fn to_list(&self) -> Vec<Vec<f32>> {
        self.inner.iter_rows().map(<[f32]>::to_vec).collect()
    }

    /// Accompaniment aligned to `target_len` semantic slots with look-ahead `k`.
    fn shifted(&self, k: i64, target_len: usize) -> PyResult<Self> {
        Ok(Self {
            inner: shift_accompaniment(&self.inner, k, target_len).py()?,
        })
    }

    /// Copy with the last `suffix` rows zeroed, or every row when `suffix` is None.
    #[pyo3(signature = (suffix=None))]
    fn masked(&self, suffix: Option<usize>) -> Self {
        let mut inner = self.inner.clone();
        match suffix {
            Some(len) => MaskDescriptor::Suffix { len }.apply(&mut inner),
            None => MaskDescriptor::Full.apply(&mut inner),
        }
        Self { inner }
    }

    fn __repr__(&self) -> String {
        format!("FeatureMatrix(rows={}, dim={})", self.inner.rows(), self.inner.dim())
    }
}

/// K-means codebook mapping feature frames to semantic token ids.
#[pyclass(name = "Codebook", module = "rapgen_py")]
struct PyCodebook {
    inner: feat::Codebook,
}

#[pymethods]
impl PyCodebook {
    #[staticmethod]
    #[pyo3(signature = (features, k, seed=0, max_iters=100))]
    fn fit(features: &PyFeatureMatrix, k: usize, seed: u64, max_iters: usize) -> PyResult<Self> {
        Ok(Self {
            inner: feat::fit_kmeans(&features.inner, k, seed, max_iters).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: feat::Codebook::load(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn eos_id(&self) -> usize {
        self.inner.k()
    }

    fn tokenize(&self, features: &PyFeatureMatrix) -> PyResult<Vec<u32>> {
        Ok(feat::tokenize(&features.inner, &self.inner).py()?.ids().to_vec())
    }
}

/// Semantic language model conditioned on lyrics, speaker and shifted accompaniment.
#[pyclass(name = "SemanticLm", module = "rapgen_py", unsendable)]
struct PySemanticLm {
    inner: rapgen::lm::SemanticLm,
}

fn lyrics_from(text: &str, phonemes: bool) -> PyResult<LyricsTokens> {
    if phonemes {
        LyricsTokens::from_phonemes(text).py()
    } else {
        Ok(LyricsTokens::from_text(text))
    }
}

#[pymethods]
impl PySemanticLm {
    /// Load `<dir>/<stem>.safetensors` and `<dir>/<stem>.json`.
    #[staticmethod]
    #[pyo3(signature = (dir, stem="lm"))]
    fn load(dir: PathBuf, stem: &str) -> PyResult<Self> {
        Ok(Self {
            inner: rapgen::lm::SemanticLm::load(&dir, stem).py()?,
        })
    }

    /// Randomly initialised model with the small default configuration.
    #[staticmethod]
    #[pyo3(signature = (seed=0, shift_k=None, accomp_dim=None, semantic_vocab=None))]
    fn desk(seed: u64, shift_k: Option<usize>, accomp_dim: Option<usize>, semantic_vocab: Option<usize>) -> PyResult<Self> {
        let mut cfg = rapgen::lm::LMConfig::desk();
        cfg.shift_k = shift_k.unwrap_or(cfg.shift_k);
        cfg.accomp_dim = accomp_dim.unwrap_or(cfg.accomp_dim);
        cfg.semantic_vocab = semantic_vocab.unwrap_or(cfg.semantic_vocab);
        Ok(Self {
            inner: rapgen::lm::SemanticLm::new(&cfg, seed, candle_dtype()).py()?,
        })
    }

    fn save(&self, dir: PathBuf, stem: &str) -> PyResult<()> {
        self.inner.save(&dir, stem).py()
    }

    #[getter]
    fn shift_k(&self) -> usize {
        self.inner.cfg.shift_k
    }

    #[getter]
    fn eos_id(&self) -> u32 {
        self.inner.cfg.eos_id()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    /// Logits for every semantic slot: row t scores token t given tokens
    /// before it and accompaniment up to frame t + K.
    #[pyo3(signature = (lyrics, tokens, accomp, speaker=None, mask_accomp=false, phonemes=false))]
    fn slot_logits(
        &self,
        lyrics: &str,
        tokens: Vec<u32>,
        accomp: &PyFeatureMatrix,
        speaker: Option<Vec<f32>>,
        mask_accomp: bool,
        phonemes: bool,
    ) -> PyResult<Vec<Vec<f64>>> {
        let m = &self.inner;
        let lyrics = lyrics_from(lyrics, phonemes)?;
        let mut inputs = vec![m.cfg.eos_id()];
        inputs.extend(tokens);
        let mut shifted = shift_accompaniment(&accomp.inner, m.cfg.shift_k as i64, inputs.len()).py()?;
        if mask_accomp {
            MaskDescriptor::Full.apply(&mut shifted);
        }
        let spk = match speaker {
            Some(v) => rapgen::refenc::SpeakerEmbedding::new(v).py()?,
            None => rapgen::refenc::SpeakerEmbedding::zeros(),
        };
        let spk = m.speaker_tensor(&spk).py()?;
        let mixed = m.build_mixed_sequence(&lyrics, &inputs, &shifted, &spk).py()?;
        let logits = m.lm_forward(&mixed).py()?;
        let v = to_f64_vec(&logits).py()?;
        let vocab = v.len() / mixed.len();
        Ok(v.chunks(vocab).skip(mixed.semantic_start()).map(<[f64]>::to_vec).collect())
    }

    /// Autoregressive semantic tokens; returns (tokens, truncated).
    #[pyo3(signature = (lyrics, accomp, speaker=None, temperature=0.9, top_k=40, seed=0, max_tokens=None, phonemes=false))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        &self,
        lyrics: &str,
        accomp: &PyFeatureMatrix,
        speaker: Option<Vec<f32>>,
        temperature: f64,
        top_k: usize,
        seed: u64,
        max_tokens: Option<usize>,
        phonemes: bool,
    ) -> PyResult<(Vec<u32>, bool)> {
        let lyrics = lyrics_from(lyrics, phonemes)?;
        let spk = match speaker {
            Some(v) => rapgen::refenc::SpeakerEmbedding::new(v).py()?,
            None => rapgen::refenc::SpeakerEmbedding::zeros(),
        };
        let spk = self.inner.speaker_tensor(&spk).py()?;
        let sampling = SamplingConfig {
            temperature,
            top_k,
            seed,
            max_tokens,
        };
        let g = self.inner.generate_semantic(&lyrics, &accomp.inner, &spk, &sampling).py()?;
        Ok((g.tokens.ids().to_vec(), g.truncated))
    }

    /// Speaker embedding of a reference mel (frames x 128 log-mel rows).
    fn encode_reference(&self, mel: Vec<Vec<f32>>) -> PyResult<Vec<f32>> {
        let n_mels = mel.first().map_or(0, Vec::len);
        let mel = MelSpectrogram::new(mel.concat(), mel.len(), n_mels, 44_100.0 / 512.0).py()?;
        let e = self.inner.ref_encoder.encode_reference(&mel, &self.inner.store).py()?;
        Ok(e.values().to_vec())
    }
}

fn candle_dtype() -> candle_core::DType {
    candle_core::DType::F32
}

/// Split a VAD track into training segments; returns (start_s, end_s) pairs.
#[pyfunction]
#[pyo3(signature = (voiced, rate_hz, seed=0, merge_gap_s=3.0, threshold_mean_s=18.0, threshold_std_s=3.0, min_len_s=3.0))]
fn segment_vad(
    voiced: Vec<bool>,
    rate_hz: f64,
    seed: u64,
    merge_gap_s: f64,
    threshold_mean_s: f64,
    threshold_std_s: f64,
    min_len_s: f64,
) -> PyResult<Vec<(f64, f64)>> {
    let labels = VadLabels::new(voiced, rate_hz).py()?;
    let params = SegmentParams {
        merge_gap_s,
        threshold_mean_s,
        threshold_std_s,
        min_len_s,
    };
    let spans = rapbank::segment_vad(&labels, &params, seed).py()?;
    Ok(spans.iter().map(|s| (s.start_s, s.end_s)).collect())
}

/// Quality tier for a segment under the default thresholds.
#[pyfunction]
fn assign_subset(dnsmos: f64, pps: f64, primary_frac: f64) -> PyResult<String> {
    let seg = rapbank::Segment {
        id: String::new(),
        song_id: String::new(),
        language: String::new(),
        start_s: 0.0,
        end_s: 0.0,
        pps: Some(pps),
        dnsmos: Some(dnsmos),
        primary_frac: Some(primary_frac),
        primary_warning: false,
        subset: None,
    };
    Ok(rapbank::assign_subset(&seg, &SubsetThresholds::default()).py()?.name().to_string())
}

/// Segment, score and split every song in a JSONL manifest; returns the summary as JSON.
#[pyfunction]
#[pyo3(signature = (manifest, out_dir, config=None, seed=0, write_audio=true))]
fn run_pipeline(manifest: PathBuf, out_dir: PathBuf, config: Option<PathBuf>, seed: u64, write_audio: bool) -> PyResult<String> {
    let cfg = load_config(config)?;
    let summary = rapgen::cli::cmd_pipeline(&manifest, &out_dir, &cfg, seed, write_audio).py()?;
    serde_json::to_string(&summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

fn load_config(path: Option<PathBuf>) -> PyResult<RunConfig> {
    match path {
        Some(p) => RunConfig::load(&p).py(),
        None => Ok(RunConfig::default()),
    }
}

/// Lyrics, accompaniment and reference to a vocal WAV; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (lyrics, accomp, reference, lm, cfm, out_dir, name="output", config=None, seed=None))]
#[allow(clippy::too_many_arguments)]
fn generate<'py>(
    py: Python<'py>,
    lyrics: PathBuf,
    accomp: PathBuf,
    reference: PathBuf,
    lm: PathBuf,
    cfm: PathBuf,
    out_dir: PathBuf,
    name: &str,
    config: Option<PathBuf>,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = load_config(config)?;
    let seed = seed.or(cfg.seed).unwrap_or(0);
    let inputs = GenerateInputs {
        lyrics: &lyrics,
        accomp: &accomp,
        reference: &reference,
        lm: &lm,
        cfm: &cfm,
    };
    let r = cmd_generate(&inputs, &cfg, seed, &out_dir, name).py()?;
    let d = PyDict::new(py);
    d.set_item("wav", r.wav.to_string_lossy().to_string())?;
    d.set_item("semantic_tokens", r.semantic_tokens)?;
    d.set_item("truncated", r.truncated)?;
    d.set_item("mel_frames", r.mel_frames)?;
    d.set_item("duration_s", r.duration_s)?;
    d.set_item("reference_frames", r.reference_frames)?;
    d.set_item("seed", r.seed)?;
    d.set_item("vocoder", r.vocoder)?;
    d.set_item("sha256", r.sha256)?;
    Ok(d)
}

/// Log-mel analysis of a WAV file: frames x 128 rows.
#[pyfunction]
fn mel_from_wav(path: PathBuf) -> PyResult<Vec<Vec<f32>>> {
    let clip = AudioClip::load_wav(&path).py()?;
    let mel = rapgen::spectral::mel_analyze(&clip).py()?;
    Ok((0..mel.n_frames()).map(|t| mel.frame(t).to_vec()).collect())
}

#[pyfunction]
fn wer(reference: &str, hypothesis: &str) -> PyResult<f64> {
    rapgen::metrics::wer_text(reference, hypothesis).py()
}

#[pyfunction]
fn secs(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    rapgen::metrics::secs(&a, &b).py()
}

#[pyfunction]
fn fad(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    rapgen::metrics::fad(&a, &b).py()
}

#[pyfunction]
fn kld(p: Vec<Vec<f64>>, q: Vec<Vec<f64>>) -> PyResult<f64> {
    rapgen::metrics::kld(&p, &q).py()
}

/// Train the shift ablation and return {(shift_k, inference): mean alignment score}.
#[pyfunction]
#[pyo3(signature = (steps=None, seeds=None))]
fn shift_ablation(steps: Option<usize>, seeds: Option<Vec<u64>>) -> PyResult<Vec<(usize, String, f64)>> {
    let mut cfg = AblationConfig::default();
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    let table = run_shift_ablation(&cfg).py()?;
    let mut rows = Vec::new();
    for &k in &cfg.shifts {
        for inf in [Inference::Accompaniment, Inference::Masked] {
            if let Some(r) = table.row(k, inf) {
                rows.push((k, inf.name().to_string(), r.mean));
            }
        }
    }
    Ok(rows)
}

/// Train the 2-D flow-matching toy and return its energy distance to fresh target samples.
#[pyfunction]
#[pyo3(signature = (seed=0, n=2000, steps=100))]
fn cfm_toy_energy_distance(seed: u64, n: usize, steps: usize) -> PyResult<f64> {
    use rapgen::cfm::toy;
    let (field, _) = toy::train_toy(seed, &toy::ToyTraining::default()).py()?;
    let generated = toy::sample_toy(&field, n, steps, seed + 100).py()?;
    Ok(toy::energy_distance(&generated, &toy::eight_gaussians(n, seed + 200)))
}

#[pymodule]
fn rapgen_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFeatureMatrix>()?;
    m.add_class::<PyCodebook>()?;
    m.add_class::<PySemanticLm>()?;
    m.add_function(wrap_pyfunction!(segment_vad, m)?)?;
    m.add_function(wrap_pyfunction!(assign_subset, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(mel_from_wav, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(secs, m)?)?;
    m.add_function(wrap_pyfunction!(fad, m)?)?;
    m.add_function(wrap_pyfunction!(kld, m)?)?;
    m.add_function(wrap_pyfunction!(shift_ablation, m)?)?;
    m.add_function(wrap_pyfunction!(cfm_toy_energy_distance, m)?)?;
    Ok(())
}
