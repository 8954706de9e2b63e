use candle_core::{DType, Device, Tensor};
use candle_nn::{Embedding, Linear, Module};

use super::{LMConfig, LyricsTokens};
use crate::error::{ensure, Result};
use crate::featurization::FeatureMatrix;
use crate::nn::{causal_mask, softmax_last, ParamStore, RmsNorm, Rotary};
use crate::refenc::RefEncoder;

/// Role of each position in the mixed sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Speaker,
    Lyrics,
    Semantic,
}

/// Model input: `[speaker | lyrics | semantic]` embeddings, `[S, hidden]`.
#[derive(Debug, Clone)]
pub struct MixedSequence {
    pub embeddings: Tensor,
    pub regions: Vec<Region>,
}

impl MixedSequence {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Index of the first semantic slot.
    pub fn semantic_start(&self) -> usize {
        self.regions
            .iter()
            .position(|r| *r == Region::Semantic)
            .unwrap_or(self.regions.len())
    }
}

struct DecoderLayer {
    attn_norm: RmsNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ffn_norm: RmsNorm,
    gate: Linear,
    up: Linear,
    down: Linear,
    heads: usize,
    head_dim: usize,
}

impl DecoderLayer {
    fn new(p: &mut ParamStore, cfg: &LMConfig) -> Result<Self> {
        let h = cfg.hidden;
        Ok(Self {
            attn_norm: p.rms_norm("attn_norm", h)?,
            wq: p.linear("wq", h, h, false)?,
            wk: p.linear("wk", h, h, false)?,
            wv: p.linear("wv", h, h, false)?,
            wo: p.linear("wo", h, h, false)?,
            ffn_norm: p.rms_norm("ffn_norm", h)?,
            gate: p.linear("gate", h, cfg.intermediate, false)?,
            up: p.linear("up", h, cfg.intermediate, false)?,
            down: p.linear("down", cfg.intermediate, h, false)?,
            heads: cfg.heads,
            head_dim: cfg.head_dim(),
        })
    }

    fn split_heads(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, s, _) = x.dims3()?;
        x.reshape((b, s, self.heads, self.head_dim))?
            .transpose(1, 2)?
            .contiguous()
    }

    fn forward(&self, x: &Tensor, mask: &Tensor, rot: &Rotary) -> candle_core::Result<Tensor> {
        let (b, s, h) = x.dims3()?;
        let n = self.attn_norm.forward(x)?;
        let q = rot.apply(&self.split_heads(&self.wq.forward(&n)?)?)?;
        let k = rot.apply(&self.split_heads(&self.wk.forward(&n)?)?)?;
        let v = self.split_heads(&self.wv.forward(&n)?)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
        let att = softmax_last(&scores.broadcast_add(mask)?)?;
        let o = att.matmul(&v)?.transpose(1, 2)?.reshape((b, s, h))?;
        let x = (x + self.wo.forward(&o)?)?;
        let n = self.ffn_norm.forward(&x)?;
        let ff = (self.gate.forward(&n)?.silu()? * self.up.forward(&n)?)?;
        x + self.down.forward(&ff)?
    }
}

/// Decoder-only transformer over `[speaker | lyrics | semantic]` sequences.
///
/// Semantic slot `t` holds the embedding of the previous semantic token (the
/// end-of-sequence id acts as the start marker at slot 0) plus the projected
/// accompaniment frame `t + K`; its logits predict semantic token `t`.
pub struct SemanticLm {
    pub cfg: LMConfig,
    pub store: ParamStore,
    semantic_emb: Embedding,
    lyrics_emb: Embedding,
    accomp_proj: Linear,
    speaker_proj: Linear,
    pub ref_encoder: RefEncoder,
    layers: Vec<DecoderLayer>,
    final_norm: RmsNorm,
    head: Linear,
}

impl SemanticLm {
    pub fn new(cfg: &LMConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let p = &mut store;
        let emb_std = 1.0 / (cfg.hidden as f64).sqrt();
        let semantic_emb = p.embedding("semantic_emb", cfg.semantic_vocab, cfg.hidden, emb_std)?;
        let lyrics_emb = p.embedding("lyrics_emb", cfg.lyrics_vocab, cfg.hidden, emb_std)?;
        let accomp_proj = p.linear("accomp_proj", cfg.accomp_dim, cfg.hidden, true)?;
        let speaker_proj = p.linear("speaker_proj", cfg.speaker_dim, cfg.hidden, true)?;
        let ref_encoder = RefEncoder::new(p, "ref_encoder", &cfg.ref_encoder)?;
        let layers = (0..cfg.layers)
            .map(|i| p.scoped(&format!("layers.{i}"), |p| DecoderLayer::new(p, cfg)))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = p.rms_norm("final_norm", cfg.hidden)?;
        let head = p.linear("head", cfg.hidden, cfg.semantic_vocab, false)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            semantic_emb,
            lyrics_emb,
            accomp_proj,
            speaker_proj,
            ref_encoder,
            layers,
            final_norm,
            head,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    pub(crate) fn features_tensor(&self, m: &FeatureMatrix) -> Result<Tensor> {
        Ok(Tensor::from_slice(m.as_slice(), (m.rows(), m.dim()), self.device())?.to_dtype(self.dtype())?)
    }

    /// Assemble the mixed sequence. `semantic_inputs` are the ids fed at the
    /// semantic slots and `accomp` must already be shifted and masked, with
    /// one frame per semantic slot. `speaker` is a `[speaker_dim]` tensor.
    pub fn build_mixed_sequence(
        &self,
        lyrics: &LyricsTokens,
        semantic_inputs: &[u32],
        accomp: &FeatureMatrix,
        speaker: &Tensor,
    ) -> Result<MixedSequence> {
        ensure!(
            accomp.rows() == semantic_inputs.len(),
            "accompaniment has {} frames for {} semantic slots",
            accomp.rows(),
            semantic_inputs.len()
        );
        ensure!(
            accomp.dim() == self.cfg.accomp_dim,
            "accompaniment dim {} does not match model dim {}",
            accomp.dim(),
            self.cfg.accomp_dim
        );
        ensure!(
            lyrics.vocab_size() <= self.cfg.lyrics_vocab,
            "lyrics vocabulary {} exceeds model lyrics vocabulary {}",
            lyrics.vocab_size(),
            self.cfg.lyrics_vocab
        );
        if let Some(bad) = semantic_inputs.iter().find(|&&id| id as usize >= self.cfg.semantic_vocab) {
            return Err(crate::error::Error::invalid(format!("semantic id {bad} outside vocabulary")));
        }
        let dev = self.device();
        let spk = self
            .speaker_proj
            .forward(&speaker.reshape((1, self.cfg.speaker_dim))?)?;
        let mut parts = vec![spk];
        let mut regions = vec![Region::Speaker];
        if !lyrics.is_empty() {
            let ids = Tensor::new(lyrics.ids(), dev)?;
            parts.push(self.lyrics_emb.forward(&ids)?);
            regions.extend(std::iter::repeat_n(Region::Lyrics, lyrics.len()));
        }
        if !semantic_inputs.is_empty() {
            let ids = Tensor::new(semantic_inputs, dev)?;
            let tok = self.semantic_emb.forward(&ids)?;
            let acc = self.accomp_proj.forward(&self.features_tensor(accomp)?)?;
            parts.push((tok + acc)?);
            regions.extend(std::iter::repeat_n(Region::Semantic, semantic_inputs.len()));
        }
        Ok(MixedSequence {
            embeddings: Tensor::cat(&parts, 0)?,
            regions,
        })
    }

    /// Logits for a batch of embedded sequences `[B, S, hidden] -> [B, S, V]`.
    pub fn forward_embeddings(&self, x: &Tensor) -> Result<Tensor> {
        let (_, s, _) = x.dims3()?;
        ensure!(
            s <= self.cfg.max_len,
            "sequence of {s} positions exceeds max_len {}",
            self.cfg.max_len
        );
        let mask = causal_mask(s, self.dtype(), self.device())?;
        let rot = Rotary::new(s, self.cfg.head_dim(), self.dtype(), self.device())?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, &mask, &rot)?;
        }
        Ok(self.head.forward(&self.final_norm.forward(&h)?)?)
    }

    /// Logits `[S, V]` for one mixed sequence.
    pub fn lm_forward(&self, mixed: &MixedSequence) -> Result<Tensor> {
        let x = mixed.embeddings.unsqueeze(0)?;
        Ok(self.forward_embeddings(&x)?.squeeze(0)?)
    }

    /// Next-token distribution at the last position.
    pub fn next_token_probs(&self, mixed: &MixedSequence, temperature: f64) -> Result<Vec<f64>> {
        let logits = self.lm_forward(mixed)?;
        let last = logits.get(mixed.len() - 1)?;
        let scaled = (last / temperature.max(1e-12))?;
        crate::nn::to_f64_vec(&softmax_last(&scaled.unsqueeze(0)?)?)
    }

    pub fn speaker_tensor(&self, spk: &crate::refenc::SpeakerEmbedding) -> Result<Tensor> {
        Ok(Tensor::from_slice(spk.values(), spk.values().len(), self.device())?.to_dtype(self.dtype())?)
    }

    /// Rows of the semantic-token embedding table.
    pub fn semantic_embedding_table(&self) -> &Tensor {
        self.semantic_emb.embeddings()
    }
}
