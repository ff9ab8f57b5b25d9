//! Relation extraction by multiple-head selection: every ordered entity pair
//! is scored independently with one fully connected layer over the
//! concatenated entity representations, one sigmoid per relation type plus a
//! no-relation slot. A source entity may select several heads; decoding
//! emits every relation whose probability clears the threshold.

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{Document, Entity, Relation};
use crate::encoder::{document_backward, encode_document, Encoder, EncoderParams, Vocab};
use crate::error::ModelError;
use crate::modality::entity_embedding;
use crate::nn::{sigmoid, Embedding, Linear, Parameterized};
use crate::schema::{validate_relation, EntityType, RelationType, Schema, ValidationMode};

/// Score-vector slot of the explicit no-relation outcome.
pub const NO_RELATION_SLOT: usize = RelationType::ALL.len();

/// Default decoding threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Default candidate window: ordered pairs whose span starts are at most
/// this many tokens apart.
pub const DEFAULT_WINDOW: usize = 128;

/// The relation-extraction stage.
///
/// The pair scorer is a single fully connected layer with a tanh
/// nonlinearity followed by the output projection onto the 11 score slots.
/// A purely additive scorer cannot tell the cross-pairs of two co-occurring
/// same-type relations apart from the true pairs, so the hidden layer is
/// essential, not an embellishment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationModel {
    pub vocab: Vocab,
    /// Modality codes in embedding-row order.
    pub modalities: Vec<String>,
    pub encoder: Encoder,
    /// 12 × d_t.
    pub type_embedding: Embedding,
    /// M × d_m.
    pub modality_embedding: Embedding,
    /// 2·(hidden + d_t + d_m) → scorer hidden size.
    pub scorer_hidden: Linear,
    /// scorer hidden size → 11.
    pub scorer_out: Linear,
    /// Candidate window in tokens; fixed at training time and stored with
    /// the model so decoding sees the same pair set.
    pub window: usize,
}

pub struct RelationGrads {
    pub encoder: EncoderParams,
    pub type_embedding: Embedding,
    pub modality_embedding: Embedding,
    pub scorer_hidden: Linear,
    pub scorer_out: Linear,
}

/// Ordered candidate pairs `(i, j)` of entity indices, `i ≠ j`, whose span
/// starts are within `window` tokens.
pub fn candidate_pairs(entities: &[Entity], window: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..entities.len() {
        for j in 0..entities.len() {
            if i == j {
                continue;
            }
            let a = entities[i].span.start;
            let b = entities[j].span.start;
            if a.abs_diff(b) <= window {
                out.push((i, j));
            }
        }
    }
    out
}

impl RelationModel {
    pub fn init(
        vocab: Vocab,
        encoder: Encoder,
        schema: &Schema,
        type_dim: usize,
        modality_dim: usize,
        scorer_dim: usize,
        window: usize,
        rng: &mut impl Rng,
    ) -> RelationModel {
        let rep_len = encoder.hidden_dim() + type_dim + modality_dim;
        RelationModel {
            vocab,
            modalities: schema.modalities().to_vec(),
            encoder,
            type_embedding: Embedding::init(EntityType::ALL.len(), type_dim, rng),
            modality_embedding: Embedding::init(schema.modality_count(), modality_dim, rng),
            scorer_hidden: Linear::init(scorer_dim, 2 * rep_len, rng),
            scorer_out: Linear::init(NO_RELATION_SLOT + 1, scorer_dim, rng),
            window,
        }
    }

    pub fn rep_len(&self) -> usize {
        self.encoder.hidden_dim() + self.type_embedding.dim() + self.modality_embedding.dim()
    }

    pub fn modality_index(&self, code: &str) -> Result<usize, ModelError> {
        self.modalities
            .iter()
            .position(|m| m == code)
            .ok_or_else(|| {
                ModelError::Schema(crate::error::SchemaError::UnknownModality(code.to_string()))
            })
    }

    pub fn zero_grads(&self) -> RelationGrads {
        RelationGrads {
            encoder: self.encoder.params.zeros_like(),
            type_embedding: self.type_embedding.zeros_like(),
            modality_embedding: self.modality_embedding.zeros_like(),
            scorer_hidden: self.scorer_hidden.zeros_like(),
            scorer_out: self.scorer_out.zeros_like(),
        }
    }

    /// `[span embedding; type embedding; modality embedding]` of one entity.
    pub fn entity_rep(
        &self,
        hidden: ArrayView2<f64>,
        entity: &Entity,
    ) -> Result<Array1<f64>, ModelError> {
        let span_emb = entity_embedding(hidden, entity.span)?;
        let type_emb = self.type_embedding.row(entity.etype.index());
        let mod_emb = self
            .modality_embedding
            .row(self.modality_index(&entity.modality)?);
        let mut rep = Array1::zeros(span_emb.len() + type_emb.len() + mod_emb.len());
        let h = span_emb.len();
        let t = type_emb.len();
        rep.slice_mut(ndarray::s![0..h]).assign(&span_emb);
        rep.slice_mut(ndarray::s![h..h + t]).assign(&type_emb);
        rep.slice_mut(ndarray::s![h + t..]).assign(&mod_emb);
        Ok(rep)
    }

    fn pair_features(&self, rep_i: ArrayView1<f64>, rep_j: ArrayView1<f64>) -> Array1<f64> {
        let mut features = Array1::zeros(rep_i.len() + rep_j.len());
        features.slice_mut(ndarray::s![0..rep_i.len()]).assign(&rep_i);
        features.slice_mut(ndarray::s![rep_i.len()..]).assign(&rep_j);
        features
    }

    /// Raw logits for all 11 slots (10 relation types + N).
    pub fn pair_logits(&self, rep_i: ArrayView1<f64>, rep_j: ArrayView1<f64>) -> Array1<f64> {
        let features = self.pair_features(rep_i, rep_j);
        let hidden = self.scorer_hidden.forward_vec(features.view()).mapv(f64::tanh);
        self.scorer_out.forward_vec(hidden.view())
    }

    /// Independent per-type probabilities for the 10 relation types. The N
    /// slot participates in training only, never in decoding output.
    pub fn pair_probabilities(
        &self,
        rep_i: ArrayView1<f64>,
        rep_j: ArrayView1<f64>,
    ) -> Array1<f64> {
        let logits = self.pair_logits(rep_i, rep_j);
        Array1::from_iter(logits.iter().take(NO_RELATION_SLOT).map(|&s| sigmoid(s)))
    }

    /// Emit every relation with probability strictly above `threshold` over
    /// the candidate pairs; with `schema_filter` on, canonical-signature
    /// violations are dropped.
    pub fn decode_relations(
        &self,
        doc: &Document,
        entities: &[Entity],
        threshold: f64,
        schema_filter: bool,
    ) -> Result<Vec<Relation>, ModelError> {
        let enc = encode_document(&self.encoder, &self.vocab, doc, None)?;
        let reps: Vec<Array1<f64>> = entities
            .iter()
            .map(|e| self.entity_rep(enc.hidden.view(), e))
            .collect::<Result<_, _>>()?;
        let mut out = Vec::new();
        for (i, j) in candidate_pairs(entities, self.window) {
            let probs = self.pair_probabilities(reps[i].view(), reps[j].view());
            for (k, &p) in probs.iter().enumerate() {
                if p > threshold {
                    let rtype = RelationType::ALL[k];
                    if schema_filter
                        && !validate_relation(
                            rtype,
                            entities[i].etype,
                            entities[j].etype,
                            ValidationMode::Strict,
                        )
                        .is_ok()
                    {
                        continue;
                    }
                    out.push(Relation {
                        source_id: entities[i].id,
                        target_id: entities[j].id,
                        rtype,
                    });
                }
            }
        }
        Ok(out)
    }

    /// Per-pair training targets over the 11 slots; `None` marks a gold
    /// relation that falls outside the candidate window (unreachable).
    fn gold_targets(
        &self,
        doc: &Document,
        pairs: &[(usize, usize)],
    ) -> (Vec<Array1<f64>>, usize) {
        let id_to_idx: std::collections::BTreeMap<u32, usize> = doc
            .entities
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id, i))
            .collect();
        let mut by_pair: std::collections::BTreeMap<(usize, usize), Vec<RelationType>> =
            Default::default();
        for r in &doc.relations {
            let (Some(&si), Some(&ti)) = (id_to_idx.get(&r.source_id), id_to_idx.get(&r.target_id))
            else {
                continue;
            };
            by_pair.entry((si, ti)).or_default().push(r.rtype);
        }
        let pair_set: std::collections::BTreeSet<(usize, usize)> = pairs.iter().copied().collect();
        let unreachable = by_pair
            .iter()
            .filter(|(p, _)| !pair_set.contains(p))
            .map(|(_, rs)| rs.len())
            .sum();

        let targets = pairs
            .iter()
            .map(|p| {
                let mut t = Array1::zeros(NO_RELATION_SLOT + 1);
                match by_pair.get(p) {
                    Some(rtypes) => {
                        for r in rtypes {
                            t[r.index()] = 1.0;
                        }
                    }
                    None => t[NO_RELATION_SLOT] = 1.0,
                }
                t
            })
            .collect();
        (targets, unreachable)
    }

    /// Mean binary cross-entropy over all candidate `(i, j, k)` triples of
    /// one document, with gradients. Returns `(loss, pair count, gold
    /// relations outside the window)`.
    pub fn document_loss(
        &self,
        doc: &Document,
        rng: &mut impl Rng,
        grads: &mut RelationGrads,
    ) -> Result<(f64, usize, usize), ModelError> {
        let pairs = candidate_pairs(&doc.entities, self.window);
        if pairs.is_empty() {
            let (_, unreachable) = self.gold_targets(doc, &pairs);
            return Ok((0.0, 0, unreachable));
        }
        let enc = encode_document(&self.encoder, &self.vocab, doc, Some(rng))?;
        let reps: Vec<Array1<f64>> = doc
            .entities
            .iter()
            .map(|e| self.entity_rep(enc.hidden.view(), e))
            .collect::<Result<_, _>>()?;
        let (targets, unreachable) = self.gold_targets(doc, &pairs);

        let scale = 1.0 / (pairs.len() * (NO_RELATION_SLOT + 1)) as f64;
        let mut loss = 0.0;
        let mut d_hidden = ndarray::Array2::zeros(enc.hidden.raw_dim());
        let mut d_reps: Vec<Array1<f64>> =
            vec![Array1::zeros(self.rep_len()); doc.entities.len()];
        for (pair_idx, &(i, j)) in pairs.iter().enumerate() {
            let features = self.pair_features(reps[i].view(), reps[j].view());
            let scorer_act = self
                .scorer_hidden
                .forward_vec(features.view())
                .mapv(f64::tanh);
            let logits = self.scorer_out.forward_vec(scorer_act.view());
            let target = &targets[pair_idx];
            let mut d_logits = Array1::zeros(logits.len());
            for k in 0..logits.len() {
                let p = sigmoid(logits[k]);
                let t = target[k];
                // numerically stable bce: max(s,0) − s·t + ln(1 + e^{−|s|})
                let s = logits[k];
                loss += scale * (s.max(0.0) - s * t + (-s.abs()).exp().ln_1p());
                d_logits[k] = scale * (p - t);
            }
            let d_act =
                self.scorer_out
                    .backward_vec(scorer_act.view(), d_logits.view(), &mut grads.scorer_out);
            let d_pre = &d_act * &scorer_act.mapv(|v| 1.0 - v * v);
            let d_features = self.scorer_hidden.backward_vec(
                features.view(),
                d_pre.view(),
                &mut grads.scorer_hidden,
            );
            let rep_len = self.rep_len();
            let mut d_i = d_reps[i].clone();
            d_i += &d_features.slice(ndarray::s![0..rep_len]);
            d_reps[i] = d_i;
            let mut d_j = d_reps[j].clone();
            d_j += &d_features.slice(ndarray::s![rep_len..]);
            d_reps[j] = d_j;
        }

        let h = self.encoder.hidden_dim();
        let t_dim = self.type_embedding.dim();
        for (entity, d_rep) in doc.entities.iter().zip(&d_reps) {
            let d_span = d_rep.slice(ndarray::s![0..h]);
            for row in entity.span.start..entity.span.end {
                let mut slot = d_hidden.row_mut(row);
                slot += &d_span;
            }
            self.type_embedding.backward_row(
                entity.etype.index(),
                d_rep.slice(ndarray::s![h..h + t_dim]),
                &mut grads.type_embedding,
            );
            self.modality_embedding.backward_row(
                self.modality_index(&entity.modality)?,
                d_rep.slice(ndarray::s![h + t_dim..]),
                &mut grads.modality_embedding,
            );
        }
        document_backward(&self.encoder, &enc, d_hidden.view(), &mut grads.encoder);
        Ok((loss, pairs.len(), unreachable))
    }

    /// Forward-only loss for validation scoring.
    pub fn document_nll(&self, doc: &Document) -> Result<(f64, usize, usize), ModelError> {
        let pairs = candidate_pairs(&doc.entities, self.window);
        if pairs.is_empty() {
            let (_, unreachable) = self.gold_targets(doc, &pairs);
            return Ok((0.0, 0, unreachable));
        }
        let enc = encode_document(&self.encoder, &self.vocab, doc, None)?;
        let reps: Vec<Array1<f64>> = doc
            .entities
            .iter()
            .map(|e| self.entity_rep(enc.hidden.view(), e))
            .collect::<Result<_, _>>()?;
        let (targets, unreachable) = self.gold_targets(doc, &pairs);
        let scale = 1.0 / (pairs.len() * (NO_RELATION_SLOT + 1)) as f64;
        let mut loss = 0.0;
        for (pair_idx, &(i, j)) in pairs.iter().enumerate() {
            let logits = self.pair_logits(reps[i].view(), reps[j].view());
            for k in 0..logits.len() {
                let s = logits[k];
                loss += scale * (s.max(0.0) - s * targets[pair_idx][k] + (-s.abs()).exp().ln_1p());
            }
        }
        Ok((loss, pairs.len(), unreachable))
    }
}

impl Parameterized for RelationModel {
    fn for_each_group(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.encoder.params.for_each_group(&mut |n, d| f(&format!("encoder.{n}"), d));
        self.type_embedding
            .for_each_group(&mut |n, d| f(&format!("type_embedding.{n}"), d));
        self.modality_embedding
            .for_each_group(&mut |n, d| f(&format!("modality_embedding.{n}"), d));
        self.scorer_hidden
            .for_each_group(&mut |n, d| f(&format!("scorer_hidden.{n}"), d));
        self.scorer_out
            .for_each_group(&mut |n, d| f(&format!("scorer_out.{n}"), d));
    }
    fn for_each_group_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.encoder
            .params
            .for_each_group_mut(&mut |n, d| f(&format!("encoder.{n}"), d));
        self.type_embedding
            .for_each_group_mut(&mut |n, d| f(&format!("type_embedding.{n}"), d));
        self.modality_embedding
            .for_each_group_mut(&mut |n, d| f(&format!("modality_embedding.{n}"), d));
        self.scorer_hidden
            .for_each_group_mut(&mut |n, d| f(&format!("scorer_hidden.{n}"), d));
        self.scorer_out
            .for_each_group_mut(&mut |n, d| f(&format!("scorer_out.{n}"), d));
    }
}

impl Parameterized for RelationGrads {
    fn for_each_group(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.encoder.for_each_group(&mut |n, d| f(&format!("encoder.{n}"), d));
        self.type_embedding
            .for_each_group(&mut |n, d| f(&format!("type_embedding.{n}"), d));
        self.modality_embedding
            .for_each_group(&mut |n, d| f(&format!("modality_embedding.{n}"), d));
        self.scorer_hidden
            .for_each_group(&mut |n, d| f(&format!("scorer_hidden.{n}"), d));
        self.scorer_out
            .for_each_group(&mut |n, d| f(&format!("scorer_out.{n}"), d));
    }
    fn for_each_group_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.encoder
            .for_each_group_mut(&mut |n, d| f(&format!("encoder.{n}"), d));
        self.type_embedding
            .for_each_group_mut(&mut |n, d| f(&format!("type_embedding.{n}"), d));
        self.modality_embedding
            .for_each_group_mut(&mut |n, d| f(&format!("modality_embedding.{n}"), d));
        self.scorer_hidden
            .for_each_group_mut(&mut |n, d| f(&format!("scorer_hidden.{n}"), d));
        self.scorer_out
            .for_each_group_mut(&mut |n, d| f(&format!("scorer_out.{n}"), d));
    }
}
