//! Sentence encoders: token ids in, one contextual hidden vector per token
//! out.
//!
//! Three interchangeable kinds sit behind the same contract: a bidirectional
//! LSTM over trained embeddings, a small self-attention stack, and a
//! pass-through adapter that reads per-token vectors from a sidecar file
//! (for plugging in vectors produced by an external pretrained model).
//! Inference is deterministic; dropout only applies on the training path.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::Corpus;
use crate::error::ModelError;
use crate::nn::attention::positional_encoding;
use crate::nn::{AttentionEncoder, BiLstm, Embedding, Linear, Parameterized};

/// Token-to-index map with reserved unknown/padding entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
    pub min_freq: usize,
}

impl Vocab {
    pub const UNK: usize = 0;
    pub const PAD: usize = 1;

    /// Index every token whose corpus frequency is at least `min_freq`;
    /// everything else maps to `UNK`.
    pub fn build(corpus: &Corpus, min_freq: usize) -> Vocab {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for doc in &corpus.documents {
            for tok in doc.token_texts() {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut tokens = vec!["<unk>".to_string(), "<pad>".to_string()];
        tokens.extend(
            counts
                .into_iter()
                .filter(|(_, c)| *c >= min_freq)
                .map(|(t, _)| t),
        );
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            tokens,
            index,
            min_freq,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved entries always present
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Vocab::UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_of(t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    #[serde(rename = "recurrent")]
    Recurrent,
    #[serde(rename = "self_attention")]
    SelfAttention,
    #[serde(rename = "precomputed")]
    Precomputed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Self-attention only.
    pub layers: usize,
    /// Self-attention only.
    pub heads: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn recurrent(embed_dim: usize, hidden_dim: usize) -> EncoderConfig {
        EncoderConfig {
            kind: EncoderKind::Recurrent,
            embed_dim,
            hidden_dim,
            layers: 1,
            heads: 1,
            dropout: 0.0,
        }
    }

    pub fn self_attention(
        embed_dim: usize,
        hidden_dim: usize,
        layers: usize,
        heads: usize,
    ) -> EncoderConfig {
        EncoderConfig {
            kind: EncoderKind::SelfAttention,
            embed_dim,
            hidden_dim,
            layers,
            heads,
            dropout: 0.0,
        }
    }

    pub fn precomputed(hidden_dim: usize) -> EncoderConfig {
        EncoderConfig {
            kind: EncoderKind::Precomputed,
            embed_dim: hidden_dim,
            hidden_dim,
            layers: 0,
            heads: 0,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_dim == 0 {
            return Err(ModelError::InvalidConfig("hidden_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        match self.kind {
            EncoderKind::Recurrent => {
                if self.embed_dim == 0 {
                    return Err(ModelError::InvalidConfig("embed_dim must be positive".into()));
                }
                if self.hidden_dim % 2 != 0 {
                    return Err(ModelError::InvalidConfig(
                        "recurrent hidden_dim must be even (half per direction)".into(),
                    ));
                }
            }
            EncoderKind::SelfAttention => {
                if self.embed_dim == 0 || self.layers == 0 || self.heads == 0 {
                    return Err(ModelError::InvalidConfig(
                        "self-attention needs positive embed_dim, layers, heads".into(),
                    ));
                }
                if self.hidden_dim % self.heads != 0 {
                    return Err(ModelError::InvalidConfig(
                        "hidden_dim must be divisible by heads".into(),
                    ));
                }
            }
            EncoderKind::Precomputed => {}
        }
        Ok(())
    }
}

/// Per-token vectors keyed by `(doc id, document-level token index)`,
/// loaded from a tab-separated sidecar file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrecomputedVectors {
    pub dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

fn vec_key(doc_id: &str, token_index: usize) -> String {
    format!("{doc_id}\t{token_index}")
}

impl PrecomputedVectors {
    pub fn new(dim: usize) -> PrecomputedVectors {
        PrecomputedVectors {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, doc_id: &str, token_index: usize, vector: Vec<f64>) {
        assert_eq!(vector.len(), self.dim);
        self.vectors.insert(vec_key(doc_id, token_index), vector);
    }

    pub fn get(&self, doc_id: &str, token_index: usize) -> Option<&[f64]> {
        self.vectors
            .get(&vec_key(doc_id, token_index))
            .map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Parse the sidecar format: `doc_id<TAB>token_index<TAB>v1 v2 ... vh`.
    pub fn parse(text: &str) -> Result<PrecomputedVectors, ModelError> {
        let mut out: Option<PrecomputedVectors> = None;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let (doc_id, idx, values) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => {
                    return Err(ModelError::InvalidConfig(format!(
                        "vector file line {}: expected doc_id<TAB>index<TAB>values",
                        lineno + 1
                    )))
                }
            };
            let token_index: usize = idx.parse().map_err(|_| {
                ModelError::InvalidConfig(format!(
                    "vector file line {}: bad token index `{idx}`",
                    lineno + 1
                ))
            })?;
            let vector: Vec<f64> = values
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| {
                    ModelError::InvalidConfig(format!(
                        "vector file line {}: bad vector component",
                        lineno + 1
                    ))
                })?;
            let dim = vector.len();
            let store = out.get_or_insert_with(|| PrecomputedVectors::new(dim));
            if vector.len() != store.dim {
                return Err(ModelError::InvalidConfig(format!(
                    "vector file line {}: dimension {} != {}",
                    lineno + 1,
                    vector.len(),
                    store.dim
                )));
            }
            store.insert(doc_id, token_index, vector);
        }
        Ok(out.unwrap_or_default())
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (key, vector) in &self.vectors {
            out.push_str(key);
            out.push('\t');
            let joined: Vec<String> = vector.iter().map(|v| format!("{v}")).collect();
            out.push_str(&joined.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Trainable state of one encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EncoderParams {
    Recurrent {
        embedding: Embedding,
        lstm: BiLstm,
    },
    SelfAttention {
        embedding: Embedding,
        input_proj: Linear,
        stack: AttentionEncoder,
    },
    Precomputed {
        vectors: PrecomputedVectors,
    },
}

impl EncoderParams {
    pub fn zeros_like(&self) -> EncoderParams {
        match self {
            EncoderParams::Recurrent { embedding, lstm } => EncoderParams::Recurrent {
                embedding: embedding.zeros_like(),
                lstm: lstm.zeros_like(),
            },
            EncoderParams::SelfAttention {
                embedding,
                input_proj,
                stack,
            } => EncoderParams::SelfAttention {
                embedding: embedding.zeros_like(),
                input_proj: input_proj.zeros_like(),
                stack: stack.zeros_like(),
            },
            EncoderParams::Precomputed { .. } => EncoderParams::Precomputed {
                vectors: PrecomputedVectors::default(),
            },
        }
    }
}

impl Parameterized for EncoderParams {
    fn for_each_group(&self, f: &mut dyn FnMut(&str, &[f64])) {
        match self {
            EncoderParams::Recurrent { embedding, lstm } => {
                embedding.for_each_group(&mut |n, d| f(&format!("embedding.{n}"), d));
                lstm.for_each_group(&mut |n, d| f(&format!("lstm.{n}"), d));
            }
            EncoderParams::SelfAttention {
                embedding,
                input_proj,
                stack,
            } => {
                embedding.for_each_group(&mut |n, d| f(&format!("embedding.{n}"), d));
                input_proj.for_each_group(&mut |n, d| f(&format!("input_proj.{n}"), d));
                stack.for_each_group(&mut |n, d| f(&format!("attention.{n}"), d));
            }
            EncoderParams::Precomputed { .. } => {}
        }
    }
    fn for_each_group_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        match self {
            EncoderParams::Recurrent { embedding, lstm } => {
                embedding.for_each_group_mut(&mut |n, d| f(&format!("embedding.{n}"), d));
                lstm.for_each_group_mut(&mut |n, d| f(&format!("lstm.{n}"), d));
            }
            EncoderParams::SelfAttention {
                embedding,
                input_proj,
                stack,
            } => {
                embedding.for_each_group_mut(&mut |n, d| f(&format!("embedding.{n}"), d));
                input_proj.for_each_group_mut(&mut |n, d| f(&format!("input_proj.{n}"), d));
                stack.for_each_group_mut(&mut |n, d| f(&format!("attention.{n}"), d));
            }
            EncoderParams::Precomputed { .. } => {}
        }
    }
}

/// One encode call: token ids plus the document coordinates the precomputed
/// kind needs to look vectors up.
pub struct EncodeInput<'a> {
    pub token_ids: &'a [usize],
    pub doc_id: &'a str,
    /// Document-level index of the first token in `token_ids`.
    pub token_offset: usize,
}

pub struct EncoderCache {
    token_ids: Vec<usize>,
    embedded: Option<Array2<f64>>,
    dropout_mask: Option<Array2<f64>>,
    kind: KindCache,
}

enum KindCache {
    Recurrent(crate::nn::lstm::BiLstmCache),
    SelfAttention(crate::nn::attention::AttentionCache),
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

impl Encoder {
    /// Fresh trainable encoder (recurrent or self-attention kinds).
    pub fn init(config: EncoderConfig, vocab_size: usize, rng: &mut impl Rng) -> Result<Encoder, ModelError> {
        config.validate()?;
        let params = match config.kind {
            EncoderKind::Recurrent => EncoderParams::Recurrent {
                embedding: Embedding::init(vocab_size, config.embed_dim, rng),
                lstm: BiLstm::init(config.hidden_dim, config.embed_dim, rng),
            },
            EncoderKind::SelfAttention => EncoderParams::SelfAttention {
                embedding: Embedding::init(vocab_size, config.embed_dim, rng),
                input_proj: Linear::init(config.hidden_dim, config.embed_dim, rng),
                stack: AttentionEncoder::init(config.hidden_dim, config.layers, config.heads, rng),
            },
            EncoderKind::Precomputed => {
                return Err(ModelError::InvalidConfig(
                    "precomputed encoders are built from a vector file".into(),
                ))
            }
        };
        Ok(Encoder { config, params })
    }

    pub fn from_precomputed(vectors: PrecomputedVectors) -> Encoder {
        let config = EncoderConfig::precomputed(vectors.dim);
        Encoder {
            config,
            params: EncoderParams::Precomputed { vectors },
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn vocab_size(&self) -> Option<usize> {
        match &self.params {
            EncoderParams::Recurrent { embedding, .. }
            | EncoderParams::SelfAttention { embedding, .. } => Some(embedding.size()),
            EncoderParams::Precomputed { .. } => None,
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if let Some(size) = self.vocab_size() {
            for &id in ids {
                if id >= size {
                    return Err(ModelError::IndexOutOfRange {
                        index: id,
                        vocab_size: size,
                    });
                }
            }
        }
        Ok(())
    }

    /// Deterministic inference encoding: one hidden row per input token.
    pub fn encode(&self, input: &EncodeInput) -> Result<Array2<f64>, ModelError> {
        Ok(self.forward_inner(input, None)?.0)
    }

    /// Training-mode encoding; applies embedding dropout when configured and
    /// returns the caches the backward pass needs.
    pub fn forward_train(
        &self,
        input: &EncodeInput,
        rng: &mut impl Rng,
    ) -> Result<(Array2<f64>, EncoderCache), ModelError> {
        self.forward_inner(input, Some(rng))
    }

    fn forward_inner(
        &self,
        input: &EncodeInput,
        mut dropout_rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<(Array2<f64>, EncoderCache), ModelError> {
        self.check_ids(input.token_ids)?;
        let n = input.token_ids.len();

        let (embedded, dropout_mask) = match &self.params {
            EncoderParams::Precomputed { .. } => (None, None),
            EncoderParams::Recurrent { embedding, .. }
            | EncoderParams::SelfAttention { embedding, .. } => {
                let mut e = embedding.forward(input.token_ids);
                let mask = match (&mut dropout_rng, self.config.dropout > 0.0) {
                    (Some(rng), true) => {
                        let keep = 1.0 - self.config.dropout;
                        let mask = Array2::from_shape_fn(e.raw_dim(), |_| {
                            if rng.gen_range(0.0..1.0) < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        });
                        e *= &mask;
                        Some(mask)
                    }
                    _ => None,
                };
                (Some(e), mask)
            }
        };

        let (hidden, kind) = match &self.params {
            EncoderParams::Recurrent { lstm, .. } => {
                let e = embedded.as_ref().unwrap();
                let (h, cache) = lstm.forward(e.view());
                (h, KindCache::Recurrent(cache))
            }
            EncoderParams::SelfAttention {
                input_proj, stack, ..
            } => {
                let e = embedded.as_ref().unwrap();
                let mut proj_in = input_proj.forward_mat(e.view());
                proj_in += &positional_encoding(n, self.config.hidden_dim);
                let (h, cache) = stack.forward(proj_in.view());
                (h, KindCache::SelfAttention(cache))
            }
            EncoderParams::Precomputed { vectors } => {
                let mut h = Array2::zeros((n, self.config.hidden_dim));
                for (row, _) in input.token_ids.iter().enumerate() {
                    let idx = input.token_offset + row;
                    let v = vectors.get(input.doc_id, idx).ok_or_else(|| {
                        ModelError::MissingVector {
                            doc_id: input.doc_id.to_string(),
                            token_index: idx,
                        }
                    })?;
                    if v.len() != self.config.hidden_dim {
                        return Err(ModelError::ShapeMismatch(format!(
                            "vector dim {} != hidden_dim {}",
                            v.len(),
                            self.config.hidden_dim
                        )));
                    }
                    for (c, &val) in v.iter().enumerate() {
                        h[[row, c]] = val;
                    }
                }
                (h, KindCache::Precomputed)
            }
        };
        debug_assert_eq!(hidden.nrows(), n);
        Ok((
            hidden,
            EncoderCache {
                token_ids: input.token_ids.to_vec(),
                embedded,
                dropout_mask,
                kind,
            },
        ))
    }

    /// Accumulate parameter gradients given dL/dH; precomputed encoders have
    /// no trainable parameters and ignore the call.
    pub fn backward(&self, cache: &EncoderCache, d_hidden: ArrayView2<f64>, grad: &mut EncoderParams) {
        match (&self.params, &cache.kind, grad) {
            (
                EncoderParams::Recurrent { embedding, lstm },
                KindCache::Recurrent(lstm_cache),
                EncoderParams::Recurrent {
                    embedding: g_emb,
                    lstm: g_lstm,
                },
            ) => {
                let e = cache.embedded.as_ref().unwrap();
                let mut d_embedded = lstm.backward(e.view(), lstm_cache, d_hidden, g_lstm);
                if let Some(mask) = &cache.dropout_mask {
                    d_embedded *= mask;
                }
                embedding.backward(&cache.token_ids, d_embedded.view(), g_emb);
            }
            (
                EncoderParams::SelfAttention {
                    embedding,
                    input_proj,
                    stack,
                },
                KindCache::SelfAttention(attn),
                EncoderParams::SelfAttention {
                    embedding: g_emb,
                    input_proj: g_proj,
                    stack: g_stack,
                },
            ) => {
                let e = cache.embedded.as_ref().unwrap();
                let d_proj_out = stack.backward(attn, d_hidden, g_stack);
                // positional encoding is additive, gradient passes through
                let mut d_embedded = input_proj.backward_mat(e.view(), d_proj_out.view(), g_proj);
                if let Some(mask) = &cache.dropout_mask {
                    d_embedded *= mask;
                }
                embedding.backward(&cache.token_ids, d_embedded.view(), g_emb);
            }
            (EncoderParams::Precomputed { .. }, KindCache::Precomputed, _) => {}
            _ => panic!("encoder cache/grad kind mismatch"),
        }
    }
}

impl Parameterized for Encoder {
    fn for_each_group(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.params.for_each_group(f);
    }
    fn for_each_group_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.params.for_each_group_mut(f);
    }
}

/// A whole document encoded sentence by sentence; hidden rows are indexed by
/// document-level token position.
pub struct DocEncoding {
    pub hidden: Array2<f64>,
    sentences: Vec<crate::annotation::TokenSpan>,
    caches: Vec<EncoderCache>,
}

/// Encode every sentence of `doc` and stack the hidden rows. `train_rng`
/// enables dropout and cache collection for the backward pass.
pub fn encode_document(
    encoder: &Encoder,
    vocab: &Vocab,
    doc: &crate::annotation::Document,
    mut train_rng: Option<&mut dyn rand::RngCore>,
) -> Result<DocEncoding, ModelError> {
    let texts = doc.token_texts();
    let sentences = doc.sentences();
    let mut hidden = Array2::zeros((doc.tokens.len(), encoder.hidden_dim()));
    let mut caches = Vec::new();
    for sent in &sentences {
        let ids = vocab.encode(&texts[sent.start..sent.end]);
        let input = EncodeInput {
            token_ids: &ids,
            doc_id: &doc.doc_id,
            token_offset: sent.start,
        };
        let (h, cache) = match &mut train_rng {
            Some(rng) => encoder.forward_inner(&input, Some(&mut **rng))?,
            None => encoder.forward_inner(&input, None)?,
        };
        hidden
            .slice_mut(ndarray::s![sent.start..sent.end, ..])
            .assign(&h);
        if train_rng.is_some() {
            caches.push(cache);
        }
    }
    Ok(DocEncoding {
        hidden,
        sentences,
        caches,
    })
}

/// Push document-level hidden gradients back through every sentence.
pub fn document_backward(
    encoder: &Encoder,
    enc: &DocEncoding,
    d_hidden: ArrayView2<f64>,
    grad: &mut EncoderParams,
) {
    assert_eq!(enc.caches.len(), enc.sentences.len(), "inference encoding has no caches");
    for (sent, cache) in enc.sentences.iter().zip(&enc.caches) {
        let slice = d_hidden.slice(ndarray::s![sent.start..sent.end, ..]);
        encoder.backward(cache, slice, grad);
    }
}
