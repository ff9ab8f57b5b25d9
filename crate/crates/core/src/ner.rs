//! Entity recognition as BIO sequence tagging with a CRF output layer.
//!
//! The score of a tag sequence is the sum of per-token emission scores and
//! tag-transition scores, including virtual START and STOP states. The
//! sequence probability normalizer is computed with the forward algorithm in
//! log space; decoding uses Viterbi. Structurally illegal BIO transitions
//! are pinned to a large negative constant and excluded from training
//! updates, so neither the partition nor the decoder can use them.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{Document, Entity, TokenSpan};
use crate::encoder::{EncodeInput, Encoder, Vocab};
use crate::error::ModelError;
use crate::nn::{log_sum_exp, softmax_inplace, Linear, Parameterized};
use crate::schema::{BioTag, EntityType, Schema, TagSet};

/// Score assigned to structurally illegal transitions. Frozen: these entries
/// receive no training updates.
pub const MASK_SCORE: f64 = -1e4;

/// Virtual state indices inside the (T+2)² transition matrix.
pub fn start_state(num_tags: usize) -> usize {
    num_tags
}

pub fn stop_state(num_tags: usize) -> usize {
    num_tags + 1
}

/// `true` where a transition is structurally legal under the BIO scheme.
/// Row/column `T` is START, `T+1` is STOP.
pub fn transition_mask(tagset: &TagSet) -> Array2<bool> {
    let t = tagset.len();
    let mut mask = Array2::from_elem((t + 2, t + 2), false);
    for i in 0..t + 2 {
        for j in 0..t + 2 {
            if i == stop_state(t) || j == start_state(t) {
                continue; // out of STOP / into START never occurs
            }
            let from = if i == start_state(t) { None } else { Some(i) };
            let to = if j == stop_state(t) { None } else { Some(j) };
            mask[[i, j]] = tagset.legal_transition(from, to);
        }
    }
    mask
}

/// Emission projection plus transition matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    /// hidden → T affine projection.
    pub emission: Linear,
    /// (T+2) × (T+2) transition scores including START/STOP.
    pub transitions: Array2<f64>,
}

impl CrfParams {
    pub fn init(tagset: &TagSet, hidden_dim: usize, rng: &mut impl Rng) -> CrfParams {
        let t = tagset.len();
        let mut transitions = Array2::from_shape_fn((t + 2, t + 2), |_| rng.gen_range(-0.1..0.1));
        let mask = transition_mask(tagset);
        for ((i, j), legal) in mask.indexed_iter() {
            if !legal {
                transitions[[i, j]] = MASK_SCORE;
            }
        }
        CrfParams {
            emission: Linear::init(t, hidden_dim, rng),
            transitions,
        }
    }

    pub fn num_tags(&self) -> usize {
        self.transitions.nrows() - 2
    }

    pub fn zeros_like(&self) -> CrfParams {
        CrfParams {
            emission: self.emission.zeros_like(),
            transitions: Array2::zeros(self.transitions.raw_dim()),
        }
    }

    /// Re-pin masked transitions; call after every optimizer step.
    pub fn apply_structure(&mut self, mask: &Array2<bool>) {
        for ((i, j), legal) in mask.indexed_iter() {
            if !legal {
                self.transitions[[i, j]] = MASK_SCORE;
            }
        }
    }

    /// Per-token emission scores: affine map of each hidden row, (n, T).
    pub fn emissions(&self, hidden: ArrayView2<f64>) -> Result<Array2<f64>, ModelError> {
        if hidden.ncols() != self.emission.in_dim() {
            return Err(ModelError::ShapeMismatch(format!(
                "hidden dim {} != emission input dim {}",
                hidden.ncols(),
                self.emission.in_dim()
            )));
        }
        Ok(self.emission.forward_mat(hidden))
    }
}

impl Parameterized for CrfParams {
    fn for_each_group(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.emission.for_each_group(&mut |n, d| f(&format!("emission.{n}"), d));
        f("transitions", self.transitions.as_slice().unwrap());
    }
    fn for_each_group_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.emission
            .for_each_group_mut(&mut |n, d| f(&format!("emission.{n}"), d));
        f("transitions", self.transitions.as_slice_mut().unwrap());
    }
}

/// s(X, y): emissions along `y` plus transitions, including START → y₀ and
/// yₙ → STOP.
pub fn sequence_score(
    em: ArrayView2<f64>,
    trans: ArrayView2<f64>,
    y: &[usize],
) -> Result<f64, ModelError> {
    let n = em.nrows();
    let t = trans.nrows() - 2;
    if y.len() != n {
        return Err(ModelError::ShapeMismatch(format!(
            "tag sequence length {} != sentence length {n}",
            y.len()
        )));
    }
    for &tag in y {
        if tag >= t {
            return Err(ModelError::TagOutOfRange(tag));
        }
    }
    let mut score = trans[[start_state(t), y[0]]] + em[[0, y[0]]];
    for i in 1..n {
        score += trans[[y[i - 1], y[i]]] + em[[i, y[i]]];
    }
    score += trans[[y[n - 1], stop_state(t)]];
    Ok(score)
}

/// log Σ_ŷ exp(s(X, ŷ)) over all Tⁿ sequences, by the forward algorithm in
/// log space.
pub fn log_partition(em: ArrayView2<f64>, trans: ArrayView2<f64>) -> f64 {
    let n = em.nrows();
    let t = trans.nrows() - 2;
    let mut alpha: Vec<f64> = (0..t)
        .map(|j| trans[[start_state(t), j]] + em[[0, j]])
        .collect();
    let mut scratch = vec![0.0; t];
    for i in 1..n {
        let mut next = vec![0.0; t];
        for (j, slot) in next.iter_mut().enumerate() {
            for (k, s) in scratch.iter_mut().enumerate() {
                *s = alpha[k] + trans[[k, j]];
            }
            *slot = log_sum_exp(&scratch) + em[[i, j]];
        }
        alpha = next;
    }
    for (j, s) in scratch.iter_mut().enumerate() {
        *s = alpha[j] + trans[[j, stop_state(t)]];
    }
    log_sum_exp(&scratch)
}

/// Negative log-likelihood of the gold sequence: log Z − s(X, gold).
/// Gold sequences containing a structurally illegal transition are rejected.
pub fn crf_nll(
    em: ArrayView2<f64>,
    trans: ArrayView2<f64>,
    gold: &[usize],
    mask: &Array2<bool>,
) -> Result<f64, ModelError> {
    check_gold_legal(gold, mask)?;
    Ok(log_partition(em, trans) - sequence_score(em, trans, gold)?)
}

fn check_gold_legal(gold: &[usize], mask: &Array2<bool>) -> Result<(), ModelError> {
    let t = mask.nrows() - 2;
    if gold.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if !mask[[start_state(t), gold[0]]] {
        return Err(ModelError::IllegalGoldTransition(0));
    }
    for i in 1..gold.len() {
        if !mask[[gold[i - 1], gold[i]]] {
            return Err(ModelError::IllegalGoldTransition(i));
        }
    }
    Ok(())
}

/// NLL plus its gradients with respect to emissions and transitions,
/// computed with forward-backward marginals. Masked transition cells get a
/// zero gradient.
pub fn crf_nll_backward(
    em: ArrayView2<f64>,
    trans: ArrayView2<f64>,
    gold: &[usize],
    mask: &Array2<bool>,
) -> Result<(f64, Array2<f64>, Array2<f64>), ModelError> {
    check_gold_legal(gold, mask)?;
    let n = em.nrows();
    let t = trans.nrows() - 2;
    let start = start_state(t);
    let stop = stop_state(t);

    // forward
    let mut alpha = Array2::zeros((n, t));
    for j in 0..t {
        alpha[[0, j]] = trans[[start, j]] + em[[0, j]];
    }
    let mut scratch = vec![0.0; t];
    for i in 1..n {
        for j in 0..t {
            for (k, s) in scratch.iter_mut().enumerate() {
                *s = alpha[[i - 1, k]] + trans[[k, j]];
            }
            alpha[[i, j]] = log_sum_exp(&scratch) + em[[i, j]];
        }
    }
    for (j, s) in scratch.iter_mut().enumerate() {
        *s = alpha[[n - 1, j]] + trans[[j, stop]];
    }
    let log_z = log_sum_exp(&scratch);

    // backward
    let mut beta = Array2::zeros((n, t));
    for j in 0..t {
        beta[[n - 1, j]] = trans[[j, stop]];
    }
    for i in (0..n - 1).rev() {
        for j in 0..t {
            for (k, s) in scratch.iter_mut().enumerate() {
                *s = trans[[j, k]] + em[[i + 1, k]] + beta[[i + 1, k]];
            }
            beta[[i, j]] = log_sum_exp(&scratch);
        }
    }

    // unary marginals → emission gradient
    let mut d_em = Array2::zeros((n, t));
    for i in 0..n {
        for j in 0..t {
            d_em[[i, j]] = (alpha[[i, j]] + beta[[i, j]] - log_z).exp();
        }
        d_em[[i, gold[i]]] -= 1.0;
    }

    // pairwise marginals → transition gradient
    let mut d_trans = Array2::zeros((t + 2, t + 2));
    for j in 0..t {
        d_trans[[start, j]] = (alpha[[0, j]] + beta[[0, j]] - log_z).exp();
        d_trans[[j, stop]] = (alpha[[n - 1, j]] + beta[[n - 1, j]] - log_z).exp();
    }
    d_trans[[start, gold[0]]] -= 1.0;
    d_trans[[gold[n - 1], stop]] -= 1.0;
    for i in 0..n - 1 {
        for a in 0..t {
            for b in 0..t {
                d_trans[[a, b]] +=
                    (alpha[[i, a]] + trans[[a, b]] + em[[i + 1, b]] + beta[[i + 1, b]] - log_z)
                        .exp();
            }
        }
        d_trans[[gold[i], gold[i + 1]]] -= 1.0;
    }
    for ((i, j), legal) in mask.indexed_iter() {
        if !legal {
            d_trans[[i, j]] = 0.0;
        }
    }

    let nll = log_z - sequence_score(em, trans, gold)?;
    Ok((nll, d_em, d_trans))
}

/// Maximum-score tag sequence. Ties break toward the lower tag index.
pub fn viterbi_decode(em: ArrayView2<f64>, trans: ArrayView2<f64>) -> Vec<usize> {
    let n = em.nrows();
    let t = trans.nrows() - 2;
    let start = start_state(t);
    let stop = stop_state(t);

    let mut score: Vec<f64> = (0..t).map(|j| trans[[start, j]] + em[[0, j]]).collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(n.saturating_sub(1));
    for i in 1..n {
        let mut next = vec![f64::NEG_INFINITY; t];
        let mut ptr = vec![0usize; t];
        for j in 0..t {
            let mut best = f64::NEG_INFINITY;
            let mut best_k = 0;
            for (k, &s) in score.iter().enumerate() {
                let cand = s + trans[[k, j]];
                if cand > best {
                    best = cand;
                    best_k = k;
                }
            }
            next[j] = best + em[[i, j]];
            ptr[j] = best_k;
        }
        score = next;
        back.push(ptr);
    }

    let mut best = f64::NEG_INFINITY;
    let mut best_j = 0;
    for (j, &s) in score.iter().enumerate() {
        let cand = s + trans[[j, stop]];
        if cand > best {
            best = cand;
            best_j = j;
        }
    }

    let mut path = vec![best_j];
    for ptr in back.iter().rev() {
        path.push(ptr[*path.last().unwrap()]);
    }
    path.reverse();
    path
}

/// Decode a repaired tag sequence into typed spans: maximal `B-x (I-x)*`
/// runs become entities; an `I-x` with no open x-run is treated as `B-x`.
pub fn tags_to_entities(y: &[usize], tagset: &TagSet) -> Vec<(EntityType, TokenSpan)> {
    let mut out: Vec<(EntityType, TokenSpan)> = Vec::new();
    let mut open: Option<(EntityType, usize)> = None;
    for (i, &tag_idx) in y.iter().enumerate() {
        let tag = tagset.tag(tag_idx).expect("tag index in range");
        match tag {
            BioTag::Outside => {
                if let Some((t, s)) = open.take() {
                    out.push((t, TokenSpan::new(s, i)));
                }
            }
            BioTag::Begin(t) => {
                if let Some((ot, s)) = open.take() {
                    out.push((ot, TokenSpan::new(s, i)));
                }
                open = Some((t, i));
            }
            BioTag::Inside(t) => match open {
                Some((ot, _)) if ot == t => {}
                _ => {
                    // repair: orphan I-x acts as B-x
                    if let Some((ot, s)) = open.take() {
                        out.push((ot, TokenSpan::new(s, i)));
                    }
                    open = Some((t, i));
                }
            },
        }
    }
    if let Some((t, s)) = open {
        out.push((t, TokenSpan::new(s, y.len())));
    }
    out
}

/// Inverse of [`tags_to_entities`] for non-overlapping entities.
pub fn entities_to_tags(
    entities: &[(EntityType, TokenSpan)],
    n: usize,
    tagset: &TagSet,
) -> Result<Vec<usize>, ModelError> {
    let outside = tagset.index_of(BioTag::Outside).unwrap();
    let mut tags = vec![outside; n];
    let mut sorted: Vec<&(EntityType, TokenSpan)> = entities.iter().collect();
    sorted.sort_by_key(|(_, s)| *s);
    let mut prev_end = 0usize;
    for (etype, span) in sorted {
        if span.is_empty() || span.end > n {
            return Err(ModelError::ShapeMismatch(format!(
                "entity span [{}, {}) out of range",
                span.start, span.end
            )));
        }
        if span.start < prev_end {
            return Err(ModelError::ShapeMismatch("overlapping entity spans".into()));
        }
        prev_end = span.end;
        let begin = tagset
            .index_of(BioTag::Begin(*etype))
            .ok_or(ModelError::TagOutOfRange(0))?;
        let inside = tagset.index_of(BioTag::Inside(*etype)).unwrap();
        tags[span.start] = begin;
        for slot in tags.iter_mut().take(span.end).skip(span.start + 1) {
            *slot = inside;
        }
    }
    Ok(tags)
}

/// The entity-recognition stage: encoder, emission projection, transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggerModel {
    pub vocab: Vocab,
    pub entity_types: Vec<EntityType>,
    pub encoder: Encoder,
    pub crf: CrfParams,
    /// Ablation switch: with the CRF layer off, training and decoding use a
    /// per-token softmax.
    pub use_crf: bool,
}

/// Gradient holder mirroring [`TaggerModel`]'s trainable state.
pub struct TaggerGrads {
    pub encoder: crate::encoder::EncoderParams,
    pub crf: CrfParams,
}

impl TaggerModel {
    pub fn init(
        vocab: Vocab,
        encoder: Encoder,
        use_crf: bool,
        rng: &mut impl Rng,
    ) -> TaggerModel {
        let entity_types = EntityType::ALL.to_vec();
        let tagset = TagSet::full();
        let crf = CrfParams::init(&tagset, encoder.hidden_dim(), rng);
        TaggerModel {
            vocab,
            entity_types,
            encoder,
            crf,
            use_crf,
        }
    }

    pub fn tagset(&self) -> TagSet {
        TagSet::new(&self.entity_types.iter().copied().collect()).expect("non-empty type set")
    }

    pub fn zero_grads(&self) -> TaggerGrads {
        TaggerGrads {
            encoder: self.encoder.params.zeros_like(),
            crf: self.crf.zeros_like(),
        }
    }

    /// Loss of one sentence, with gradients accumulated into `grads`.
    pub fn sentence_loss(
        &self,
        input: &EncodeInput,
        gold: &[usize],
        mask: &Array2<bool>,
        rng: &mut impl Rng,
        grads: &mut TaggerGrads,
    ) -> Result<f64, ModelError> {
        let (hidden, cache) = self.encoder.forward_train(input, rng)?;
        let em = self.crf.emissions(hidden.view())?;
        let (loss, d_em) = if self.use_crf {
            let (nll, d_em, d_trans) =
                crf_nll_backward(em.view(), self.crf.transitions.view(), gold, mask)?;
            grads.crf.transitions += &d_trans;
            (nll, d_em)
        } else {
            softmax_nll_backward(em.view(), gold)?
        };
        let d_hidden = self
            .crf
            .emission
            .backward_mat(hidden.view(), d_em.view(), &mut grads.crf.emission);
        self.encoder.backward(&cache, d_hidden.view(), &mut grads.encoder);
        Ok(loss)
    }

    /// Inference loss (no gradients), for validation scoring.
    pub fn sentence_nll(
        &self,
        input: &EncodeInput,
        gold: &[usize],
        mask: &Array2<bool>,
    ) -> Result<f64, ModelError> {
        let hidden = self.encoder.encode(input)?;
        let em = self.crf.emissions(hidden.view())?;
        if self.use_crf {
            crf_nll(em.view(), self.crf.transitions.view(), gold, mask)
        } else {
            Ok(softmax_nll_backward(em.view(), gold)?.0)
        }
    }

    /// Best tag sequence for one sentence.
    pub fn decode_sentence(&self, input: &EncodeInput) -> Result<Vec<usize>, ModelError> {
        let hidden = self.encoder.encode(input)?;
        let em = self.crf.emissions(hidden.view())?;
        if self.use_crf {
            Ok(viterbi_decode(em.view(), self.crf.transitions.view()))
        } else {
            let mut out = Vec::with_capacity(em.nrows());
            for row in em.rows() {
                let mut best = f64::NEG_INFINITY;
                let mut best_j = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > best {
                        best = v;
                        best_j = j;
                    }
                }
                out.push(best_j);
            }
            Ok(out)
        }
    }

    /// Tag a whole document: per-sentence decoding, entity ids assigned in
    /// reading order, modality set to the schema default.
    pub fn decode_document(
        &self,
        doc: &Document,
        schema: &Schema,
    ) -> Result<Vec<Entity>, ModelError> {
        let tagset = self.tagset();
        let texts = doc.token_texts();
        let mut entities = Vec::new();
        let mut next_id = 1u32;
        for sent in doc.sentences() {
            let ids = self.vocab.encode(&texts[sent.start..sent.end]);
            let y = self.decode_sentence(&EncodeInput {
                token_ids: &ids,
                doc_id: &doc.doc_id,
                token_offset: sent.start,
            })?;
            for (etype, span) in tags_to_entities(&y, &tagset) {
                entities.push(Entity {
                    id: next_id,
                    etype,
                    span: TokenSpan::new(span.start + sent.start, span.end + sent.start),
                    modality: schema.default_modality().to_string(),
                });
                next_id += 1;
            }
        }
        Ok(entities)
    }

    /// Re-pin masked transitions after an optimizer step.
    pub fn apply_structure(&mut self, mask: &Array2<bool>) {
        self.crf.apply_structure(mask);
    }
}

impl Parameterized for TaggerModel {
    fn for_each_group(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.encoder.params.for_each_group(&mut |n, d| f(&format!("encoder.{n}"), d));
        self.crf.for_each_group(&mut |n, d| f(&format!("crf.{n}"), d));
    }
    fn for_each_group_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.encoder
            .params
            .for_each_group_mut(&mut |n, d| f(&format!("encoder.{n}"), d));
        self.crf.for_each_group_mut(&mut |n, d| f(&format!("crf.{n}"), d));
    }
}

impl Parameterized for TaggerGrads {
    fn for_each_group(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.encoder.for_each_group(&mut |n, d| f(&format!("encoder.{n}"), d));
        self.crf.for_each_group(&mut |n, d| f(&format!("crf.{n}"), d));
    }
    fn for_each_group_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.encoder
            .for_each_group_mut(&mut |n, d| f(&format!("encoder.{n}"), d));
        self.crf.for_each_group_mut(&mut |n, d| f(&format!("crf.{n}"), d));
    }
}

/// Per-token softmax cross-entropy (CRF-off ablation): loss and d/d_em.
fn softmax_nll_backward(
    em: ArrayView2<f64>,
    gold: &[usize],
) -> Result<(f64, Array2<f64>), ModelError> {
    let n = em.nrows();
    let t = em.ncols();
    if gold.len() != n {
        return Err(ModelError::ShapeMismatch("gold length mismatch".into()));
    }
    let mut d_em = em.to_owned();
    let mut loss = 0.0;
    for i in 0..n {
        if gold[i] >= t {
            return Err(ModelError::TagOutOfRange(gold[i]));
        }
        let mut row: Vec<f64> = em.row(i).to_vec();
        softmax_inplace(&mut row);
        loss -= row[gold[i]].max(1e-300).ln();
        for j in 0..t {
            d_em[[i, j]] = row[j];
        }
        d_em[[i, gold[i]]] -= 1.0;
    }
    Ok((loss, d_em))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::nn::finite_difference_check;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn small_tagset() -> TagSet {
        TagSet::new(&BTreeSet::from([EntityType::A, EntityType::D])).unwrap()
    }

    /// All-legal mask for CRF math tests that treat tags abstractly.
    fn free_mask(t: usize) -> Array2<bool> {
        let mut m = Array2::from_elem((t + 2, t + 2), true);
        for i in 0..t + 2 {
            m[[i, start_state(t)]] = false;
            m[[stop_state(t), i]] = false;
        }
        m
    }

    /// Enumeration oracle: score of every one of the Tⁿ sequences.
    fn enumerate_scores(em: ArrayView2<f64>, trans: ArrayView2<f64>) -> Vec<(Vec<usize>, f64)> {
        let n = em.nrows();
        let t = trans.nrows() - 2;
        let mut out = Vec::new();
        let mut seq = vec![0usize; n];
        loop {
            out.push((
                seq.clone(),
                sequence_score(em, trans, &seq).unwrap(),
            ));
            let mut pos = 0;
            loop {
                if pos == n {
                    return out;
                }
                seq[pos] += 1;
                if seq[pos] < t {
                    break;
                }
                seq[pos] = 0;
                pos += 1;
            }
        }
    }

    #[test]
    fn emissions_zero_weights_give_zero_scores() {
        let crf = CrfParams {
            emission: Linear::zeros(3, 4),
            transitions: Array2::zeros((5, 5)),
        };
        let h = Array2::from_elem((6, 4), 1.5);
        let em = crf.emissions(h.view()).unwrap();
        assert_eq!(em.shape(), &[6, 3]);
        assert!(em.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn emissions_match_hand_multiply() {
        let crf = CrfParams {
            emission: Linear {
                w: ndarray::array![[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]],
                b: ndarray::array![0.5, 0.0, -1.0],
            },
            transitions: Array2::zeros((5, 5)),
        };
        let h = ndarray::array![[2.0, 3.0]];
        let em = crf.emissions(h.view()).unwrap();
        assert_eq!(em, ndarray::array![[2.5, 6.0, 4.0]]);
    }

    #[test]
    fn emissions_shape_mismatch_is_error() {
        let crf = CrfParams {
            emission: Linear::zeros(3, 4),
            transitions: Array2::zeros((5, 5)),
        };
        assert!(crf.emissions(Array2::zeros((2, 5)).view()).is_err());
    }

    #[test]
    fn sequence_score_single_token_zero_transitions() {
        let em = ndarray::array![[0.3, -0.7, 1.1]];
        let trans = Array2::zeros((5, 5));
        assert_eq!(
            sequence_score(em.view(), trans.view(), &[2]).unwrap(),
            1.1
        );
    }

    #[test]
    fn sequence_score_hand_fixture() {
        let em = ndarray::array![[1.0, 2.0], [3.0, 4.0]];
        let mut trans = Array2::zeros((4, 4));
        trans[[2, 0]] = 0.5; // START -> 0
        trans[[0, 1]] = -0.25; // 0 -> 1
        trans[[1, 3]] = 0.125; // 1 -> STOP
        let score = sequence_score(em.view(), trans.view(), &[0, 1]).unwrap();
        assert!((score - (0.5 + 1.0 - 0.25 + 4.0 + 0.125)).abs() < 1e-12);
    }

    #[test]
    fn adding_constant_to_emissions_shifts_scores_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let em = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-2.0..2.0));
        let trans = Array2::from_shape_fn((5, 5), |_| rng.gen_range(-1.0..1.0));
        let y = [2usize, 0, 1, 1];
        let base = sequence_score(em.view(), trans.view(), &y).unwrap();
        let c = 0.8125;
        let shifted = em.mapv(|v| v + c);
        let s2 = sequence_score(shifted.view(), trans.view(), &y).unwrap();
        assert!((s2 - base - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn log_partition_single_token_is_logsumexp() {
        let em = ndarray::array![[0.2, -1.0, 0.5]];
        let trans = Array2::zeros((5, 5));
        let expected = log_sum_exp(&[0.2, -1.0, 0.5]);
        assert!((log_partition(em.view(), trans.view()) - expected).abs() < 1e-12);
    }

    #[test]
    fn log_partition_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.gen_range(1..=4);
            let t = rng.gen_range(1..=3);
            let em = Array2::from_shape_fn((n, t), |_| rng.gen_range(-2.0..2.0));
            let trans = Array2::from_shape_fn((t + 2, t + 2), |_| rng.gen_range(-2.0..2.0));
            let brute: Vec<f64> = enumerate_scores(em.view(), trans.view())
                .into_iter()
                .map(|(_, s)| s)
                .collect();
            let expected = log_sum_exp(&brute);
            let got = log_partition(em.view(), trans.view());
            assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        }
    }

    #[test]
    fn log_partition_bounds_max_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let em = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-2.0..2.0));
        let trans = Array2::from_shape_fn((5, 5), |_| rng.gen_range(-2.0..2.0));
        let best = enumerate_scores(em.view(), trans.view())
            .into_iter()
            .map(|(_, s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(log_partition(em.view(), trans.view()) >= best);
    }

    #[test]
    fn probabilities_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let em = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-2.0..2.0));
        let trans = Array2::from_shape_fn((5, 5), |_| rng.gen_range(-2.0..2.0));
        let log_z = log_partition(em.view(), trans.view());
        let total: f64 = enumerate_scores(em.view(), trans.view())
            .into_iter()
            .map(|(_, s)| (s - log_z).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn nll_zero_when_only_one_sequence() {
        let em = ndarray::array![[0.7]];
        let trans = Array2::zeros((3, 3));
        let nll = crf_nll(em.view(), trans.view(), &[0], &free_mask(1)).unwrap();
        assert!(nll.abs() < 1e-12);
    }

    #[test]
    fn nll_matches_brute_force_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let n = rng.gen_range(1..=3);
            let t = rng.gen_range(2..=3);
            let em = Array2::from_shape_fn((n, t), |_| rng.gen_range(-2.0..2.0));
            let trans = Array2::from_shape_fn((t + 2, t + 2), |_| rng.gen_range(-2.0..2.0));
            let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..t)).collect();
            let scores = enumerate_scores(em.view(), trans.view());
            let z: f64 = log_sum_exp(&scores.iter().map(|(_, s)| *s).collect::<Vec<_>>());
            let gold_score = sequence_score(em.view(), trans.view(), &gold).unwrap();
            let expected = z - gold_score;
            let got = crf_nll(em.view(), trans.view(), &gold, &free_mask(t)).unwrap();
            assert!((got - expected).abs() < 1e-9);
            assert!(got >= -1e-9);
        }
    }

    #[test]
    fn illegal_gold_transition_rejected() {
        let tagset = small_tagset(); // [O, B-A, I-A, B-D, I-D]
        let mask = transition_mask(&tagset);
        let em = Array2::zeros((2, 5));
        let trans = Array2::zeros((7, 7));
        // O -> I-A is illegal
        let err = crf_nll(em.view(), trans.view(), &[0, 2], &mask).unwrap_err();
        assert!(matches!(err, ModelError::IllegalGoldTransition(1)));
        // START -> I-A is illegal
        let err = crf_nll(em.view(), trans.view(), &[2, 2], &mask).unwrap_err();
        assert!(matches!(err, ModelError::IllegalGoldTransition(0)));
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tagset = small_tagset();
        let mask = transition_mask(&tagset);
        let t = tagset.len();
        let n = 4;
        let em = Array2::from_shape_fn((n, t), |_| rng.gen_range(-1.0..1.0));
        let mut trans = Array2::from_shape_fn((t + 2, t + 2), |_| rng.gen_range(-0.5..0.5));
        for ((i, j), legal) in mask.indexed_iter() {
            if !legal {
                trans[[i, j]] = MASK_SCORE;
            }
        }
        let gold = [1usize, 2, 0, 3]; // B-A I-A O B-D : legal
        let (_, d_em, d_trans) =
            crf_nll_backward(em.view(), trans.view(), &gold, &mask).unwrap();

        let step = 1e-5;
        // emissions
        let mut em_var = em.clone();
        for idx in [(0usize, 0usize), (1, 2), (3, 4), (2, 1)] {
            let orig = em_var[idx];
            em_var[idx] = orig + step;
            let up = crf_nll(em_var.view(), trans.view(), &gold, &mask).unwrap();
            em_var[idx] = orig - step;
            let down = crf_nll(em_var.view(), trans.view(), &gold, &mask).unwrap();
            em_var[idx] = orig;
            let fd = (up - down) / (2.0 * step);
            assert!((fd - d_em[idx]).abs() < 1e-6, "em {idx:?}: {fd} vs {}", d_em[idx]);
        }
        // transitions (legal cells only; masked cells are frozen)
        let mut tr_var = trans.clone();
        for idx in [(5usize, 1usize), (1, 2), (2, 0), (0, 6), (3, 4)] {
            assert!(mask[idx]);
            let orig = tr_var[idx];
            tr_var[idx] = orig + step;
            let up = crf_nll(em.view(), tr_var.view(), &gold, &mask).unwrap();
            tr_var[idx] = orig - step;
            let down = crf_nll(em.view(), tr_var.view(), &gold, &mask).unwrap();
            tr_var[idx] = orig;
            let fd = (up - down) / (2.0 * step);
            assert!(
                (fd - d_trans[idx]).abs() < 1e-6,
                "trans {idx:?}: {fd} vs {}",
                d_trans[idx]
            );
        }
    }

    #[test]
    fn viterbi_single_token_is_argmax() {
        let em = ndarray::array![[0.1, 0.9, -0.5]];
        let trans = Array2::zeros((5, 5));
        assert_eq!(viterbi_decode(em.view(), trans.view()), vec![1]);
    }

    #[test]
    fn viterbi_matches_enumeration_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let n = rng.gen_range(1..=4);
            let t = rng.gen_range(1..=3);
            // jitter makes the maximum unique with probability 1
            let em = Array2::from_shape_fn((n, t), |_| rng.gen_range(-2.0..2.0));
            let trans = Array2::from_shape_fn((t + 2, t + 2), |_| rng.gen_range(-2.0..2.0));
            let best = enumerate_scores(em.view(), trans.view())
                .into_iter()
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            assert_eq!(viterbi_decode(em.view(), trans.view()), best.0);
        }
    }

    #[test]
    fn viterbi_never_crosses_masked_transitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tagset = small_tagset();
        let mask = transition_mask(&tagset);
        let t = tagset.len();
        for _ in 0..1000 {
            let n = rng.gen_range(1..=6);
            let em = Array2::from_shape_fn((n, t), |_| rng.gen_range(-3.0..3.0));
            let mut trans =
                Array2::from_shape_fn((t + 2, t + 2), |_| rng.gen_range(-1.0..1.0));
            for ((i, j), legal) in mask.indexed_iter() {
                if !legal {
                    trans[[i, j]] = MASK_SCORE;
                }
            }
            let y = viterbi_decode(em.view(), trans.view());
            assert!(mask[[start_state(t), y[0]]], "START -> {}", y[0]);
            for w in y.windows(2) {
                assert!(mask[[w[0], w[1]]], "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn tags_to_entities_basic_and_repair() {
        let tagset = TagSet::new(&BTreeSet::from([EntityType::A, EntityType::D])).unwrap();
        // [O, B-A, I-A, B-D, I-D]
        let b_d = 3;
        let i_d = 4;
        let i_a = 2;
        let o = 0;
        assert_eq!(
            tags_to_entities(&[b_d, i_d, o], &tagset),
            vec![(EntityType::D, TokenSpan::new(0, 2))]
        );
        // orphan I-A repairs to B-A
        assert_eq!(
            tags_to_entities(&[o, i_a], &tagset),
            vec![(EntityType::A, TokenSpan::new(1, 2))]
        );
        // I-A after B-D starts a new A entity
        assert_eq!(
            tags_to_entities(&[b_d, i_a], &tagset),
            vec![
                (EntityType::D, TokenSpan::new(0, 1)),
                (EntityType::A, TokenSpan::new(1, 2))
            ]
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn entity_tag_round_trip(spans in prop::collection::vec((0usize..10, 1usize..4, 0usize..12), 0..5)) {
                let tagset = TagSet::full();
                // build non-overlapping entities from (gap, len, type) triples
                let mut entities: Vec<(EntityType, TokenSpan)> = Vec::new();
                let mut cursor = 0usize;
                for (gap, len, type_idx) in spans {
                    let start = cursor + gap;
                    let end = start + len;
                    entities.push((EntityType::ALL[type_idx], TokenSpan::new(start, end)));
                    cursor = end;
                }
                let n = cursor + 2;
                let tags = entities_to_tags(&entities, n, &tagset).unwrap();
                let back = tags_to_entities(&tags, &tagset);
                prop_assert_eq!(back, entities);
            }
        }
    }

    #[test]
    fn tagger_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for use_crf in [true, false] {
            let vocab = Vocab::build(&crate::annotation::Corpus::default(), 1);
            let encoder =
                Encoder::init(EncoderConfig::recurrent(3, 4), vocab.len(), &mut rng).unwrap();
            let mut model = TaggerModel::init(vocab, encoder, use_crf, &mut rng);
            let tagset = model.tagset();
            let mask = transition_mask(&tagset);
            let ids = [0usize, 1, 0];
            let gold = [0usize, 1, 2]; // O B-A I-A
            let input = EncodeInput {
                token_ids: &ids,
                doc_id: "d",
                token_offset: 0,
            };
            let mut grads = model.zero_grads();
            model
                .sentence_loss(&input, &gold, &mask, &mut ChaCha8Rng::seed_from_u64(0), &mut grads)
                .unwrap();
            let grad_model = TaggerModel {
                vocab: model.vocab.clone(),
                entity_types: model.entity_types.clone(),
                encoder: Encoder {
                    config: model.encoder.config,
                    params: grads.encoder,
                },
                crf: grads.crf,
                use_crf,
            };
            let report = finite_difference_check(
                &mut model,
                &grad_model,
                |m| m.sentence_nll(&input, &gold, &mask).unwrap(),
                1e-4,
                15,
                &mut rng,
            );
            assert!(
                report.passes(1e-3),
                "use_crf={use_crf}: worst {} in {}",
                report.worst_rel_err,
                report.worst_group
            );
        }
    }

    #[test]
    fn nll_decreases_after_one_gradient_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let vocab = Vocab::build(&crate::annotation::Corpus::default(), 1);
        let encoder =
            Encoder::init(EncoderConfig::recurrent(4, 6), vocab.len(), &mut rng).unwrap();
        let mut model = TaggerModel::init(vocab, encoder, true, &mut rng);
        let tagset = model.tagset();
        let mask = transition_mask(&tagset);
        let ids = [0usize, 1];
        let gold = [1usize, 2];
        let input = EncodeInput {
            token_ids: &ids,
            doc_id: "d",
            token_offset: 0,
        };
        let before = model.sentence_nll(&input, &gold, &mask).unwrap();
        let mut grads = model.zero_grads();
        model
            .sentence_loss(&input, &gold, &mask, &mut ChaCha8Rng::seed_from_u64(0), &mut grads)
            .unwrap();
        let mut opt = crate::nn::AdamW::new(0.05, 0.0, &model);
        opt.step(&mut model, &grads);
        model.apply_structure(&mask);
        let after = model.sentence_nll(&input, &gold, &mask).unwrap();
        assert!(after < before, "{after} !< {before}");
    }
}
