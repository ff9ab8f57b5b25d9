//! Modality classification: the modality of a recognized entity is predicted
//! from its span embedding (element sum of the hidden rows in the span)
//! concatenated with an entity-type embedding, through a softmax layer.

use ndarray::{Array1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{Document, Entity, TokenSpan};
use crate::encoder::{document_backward, encode_document, DocEncoding, Encoder, EncoderParams, Vocab};
use crate::error::ModelError;
use crate::nn::{softmax_inplace, Embedding, Linear, Parameterized};
use crate::schema::{EntityType, Schema};

/// Element sum of the hidden rows inside a token span.
pub fn entity_embedding(hidden: ArrayView2<f64>, span: TokenSpan) -> Result<Array1<f64>, ModelError> {
    if span.is_empty() || span.end > hidden.nrows() {
        return Err(ModelError::EmptySpan);
    }
    let mut out = Array1::zeros(hidden.ncols());
    for row in span.start..span.end {
        out += &hidden.row(row);
    }
    Ok(out)
}

/// The modality-classification stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityModel {
    pub vocab: Vocab,
    /// Modality codes in classifier-output order.
    pub modalities: Vec<String>,
    pub encoder: Encoder,
    /// Entity-type embedding table, 12 × d_t.
    pub type_embedding: Embedding,
    /// (hidden + d_t) → M classifier.
    pub classifier: Linear,
}

pub struct ModalityGrads {
    pub encoder: EncoderParams,
    pub type_embedding: Embedding,
    pub classifier: Linear,
}

impl ModalityModel {
    pub fn init(
        vocab: Vocab,
        encoder: Encoder,
        schema: &Schema,
        type_dim: usize,
        rng: &mut impl Rng,
    ) -> ModalityModel {
        let hidden = encoder.hidden_dim();
        let m = schema.modality_count();
        ModalityModel {
            vocab,
            modalities: schema.modalities().to_vec(),
            encoder,
            type_embedding: Embedding::init(EntityType::ALL.len(), type_dim, rng),
            classifier: Linear::init(m, hidden + type_dim, rng),
        }
    }

    pub fn modality_count(&self) -> usize {
        self.modalities.len()
    }

    pub fn modality_index(&self, code: &str) -> Result<usize, ModelError> {
        self.modalities
            .iter()
            .position(|m| m == code)
            .ok_or_else(|| {
                ModelError::Schema(crate::error::SchemaError::UnknownModality(code.to_string()))
            })
    }

    pub fn zero_grads(&self) -> ModalityGrads {
        ModalityGrads {
            encoder: self.encoder.params.zeros_like(),
            type_embedding: self.type_embedding.zeros_like(),
            classifier: self.classifier.zeros_like(),
        }
    }

    fn features(&self, hidden: ArrayView2<f64>, span: TokenSpan, etype: EntityType) -> Result<Array1<f64>, ModelError> {
        let span_emb = entity_embedding(hidden, span)?;
        let type_emb = self.type_embedding.row(etype.index());
        let mut features = Array1::zeros(span_emb.len() + type_emb.len());
        features
            .slice_mut(ndarray::s![0..span_emb.len()])
            .assign(&span_emb);
        features
            .slice_mut(ndarray::s![span_emb.len()..])
            .assign(&type_emb);
        Ok(features)
    }

    /// Probability of each modality for one entity span.
    pub fn classify(
        &self,
        hidden: ArrayView2<f64>,
        span: TokenSpan,
        etype: EntityType,
    ) -> Result<Array1<f64>, ModelError> {
        let features = self.features(hidden, span, etype)?;
        let mut logits = self.classifier.forward_vec(features.view()).to_vec();
        softmax_inplace(&mut logits);
        Ok(Array1::from_vec(logits))
    }

    /// Summed NLL over the document's entities, gradients accumulated into
    /// `grads`. Entities carry the gold types and modalities.
    pub fn document_loss(
        &self,
        doc: &Document,
        rng: &mut impl Rng,
        grads: &mut ModalityGrads,
    ) -> Result<(f64, usize), ModelError> {
        if doc.entities.is_empty() {
            return Ok((0.0, 0));
        }
        let enc = encode_document(&self.encoder, &self.vocab, doc, Some(rng))?;
        let mut d_hidden = ndarray::Array2::zeros(enc.hidden.raw_dim());
        let mut total = 0.0;
        for entity in &doc.entities {
            let gold = self.modality_index(&entity.modality)?;
            let features = self.features(enc.hidden.view(), entity.span, entity.etype)?;
            let mut probs = self.classifier.forward_vec(features.view()).to_vec();
            softmax_inplace(&mut probs);
            total -= probs[gold].max(1e-300).ln();

            let mut d_logits = Array1::from_vec(probs);
            d_logits[gold] -= 1.0;
            let d_features =
                self.classifier
                    .backward_vec(features.view(), d_logits.view(), &mut grads.classifier);
            let hidden_dim = enc.hidden.ncols();
            let d_span = d_features.slice(ndarray::s![0..hidden_dim]);
            for row in entity.span.start..entity.span.end {
                let mut slot = d_hidden.row_mut(row);
                slot += &d_span;
            }
            self.type_embedding.backward_row(
                entity.etype.index(),
                d_features.slice(ndarray::s![hidden_dim..]),
                &mut grads.type_embedding,
            );
        }
        document_backward(&self.encoder, &enc, d_hidden.view(), &mut grads.encoder);
        Ok((total, doc.entities.len()))
    }

    /// Inference loss over gold-labeled entities (validation scoring).
    pub fn document_nll(&self, doc: &Document) -> Result<(f64, usize), ModelError> {
        if doc.entities.is_empty() {
            return Ok((0.0, 0));
        }
        let enc = encode_document(&self.encoder, &self.vocab, doc, None)?;
        let mut total = 0.0;
        for entity in &doc.entities {
            let gold = self.modality_index(&entity.modality)?;
            let probs = self.classify(enc.hidden.view(), entity.span, entity.etype)?;
            total += modality_nll(probs.view(), gold);
        }
        Ok((total, doc.entities.len()))
    }

    /// Assign the argmax modality to each entity (entity types come from the
    /// previous stage or from gold, per the caller).
    pub fn predict(&self, doc: &Document, entities: &[Entity]) -> Result<Vec<Entity>, ModelError> {
        let enc: DocEncoding = encode_document(&self.encoder, &self.vocab, doc, None)?;
        let mut out = Vec::with_capacity(entities.len());
        for entity in entities {
            let probs = self.classify(enc.hidden.view(), entity.span, entity.etype)?;
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            let mut e = entity.clone();
            e.modality = self.modalities[best].clone();
            out.push(e);
        }
        Ok(out)
    }
}

/// Cross-entropy of a probability vector against the gold class.
pub fn modality_nll(probs: ndarray::ArrayView1<f64>, gold: usize) -> f64 {
    -probs[gold].max(1e-300).ln()
}

impl Parameterized for ModalityModel {
    fn for_each_group(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.encoder.params.for_each_group(&mut |n, d| f(&format!("encoder.{n}"), d));
        self.type_embedding
            .for_each_group(&mut |n, d| f(&format!("type_embedding.{n}"), d));
        self.classifier
            .for_each_group(&mut |n, d| f(&format!("classifier.{n}"), d));
    }
    fn for_each_group_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.encoder
            .params
            .for_each_group_mut(&mut |n, d| f(&format!("encoder.{n}"), d));
        self.type_embedding
            .for_each_group_mut(&mut |n, d| f(&format!("type_embedding.{n}"), d));
        self.classifier
            .for_each_group_mut(&mut |n, d| f(&format!("classifier.{n}"), d));
    }
}

impl Parameterized for ModalityGrads {
    fn for_each_group(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.encoder.for_each_group(&mut |n, d| f(&format!("encoder.{n}"), d));
        self.type_embedding
            .for_each_group(&mut |n, d| f(&format!("type_embedding.{n}"), d));
        self.classifier
            .for_each_group(&mut |n, d| f(&format!("classifier.{n}"), d));
    }
    fn for_each_group_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.encoder
            .for_each_group_mut(&mut |n, d| f(&format!("encoder.{n}"), d));
        self.type_embedding
            .for_each_group_mut(&mut |n, d| f(&format!("type_embedding.{n}"), d));
        self.classifier
            .for_each_group_mut(&mut |n, d| f(&format!("classifier.{n}"), d));
    }
}
