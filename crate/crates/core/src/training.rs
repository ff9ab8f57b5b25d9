//! Stage-wise training with gold upstream inputs, patient-level
//! cross-validation folds, and data-budget subsetting.
//!
//! Each stage trains against gold inputs from the stages before it: the
//! modality classifier sees gold entity spans and types, the relation
//! extractor sees gold entities and gold modalities. Predictions never enter
//! a training path; they exist only in the inference pipeline. The best
//! checkpoint is selected by stage micro-F1 on the dev split, computed with
//! gold upstream inputs, and the initialization itself is a selection
//! candidate, so the selected checkpoint never scores below it.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{Corpus, Document, Entity, TokenSpan};
use crate::encoder::{Encoder, EncoderConfig, PrecomputedVectors, Vocab};
use crate::error::{ModelError, TrainError};
use crate::evaluation::{eval_mc, eval_mer, eval_re};
use crate::modality::ModalityModel;
use crate::ner::{entities_to_tags, transition_mask, TaggerModel};
use crate::nn::{clip_global_norm, AdamW, Parameterized};
use crate::relation::{RelationModel, DEFAULT_THRESHOLD, DEFAULT_WINDOW};
use crate::schema::Schema;

/// Global-norm gradient clip applied before every optimizer step.
pub const GRAD_CLIP: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "mer")]
    Mer,
    #[serde(rename = "mc")]
    Mc,
    #[serde(rename = "re")]
    Re,
}

impl Stage {
    pub fn code(self) -> &'static str {
        match self {
            Stage::Mer => "mer",
            Stage::Mc => "mc",
            Stage::Re => "re",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Epochs without dev improvement before stopping; 0 disables early
    /// stopping.
    pub patience: usize,
    pub encoder: EncoderConfig,
    pub use_crf: bool,
    pub type_dim: usize,
    pub modality_dim: usize,
    /// Hidden size of the relation pair scorer.
    pub scorer_dim: usize,
    pub window: usize,
    pub min_freq: usize,
}

impl TrainConfig {
    /// Settings sized for a pretrained-encoder fine-tuning run: 10 epochs,
    /// batch 16, learning rate 5e-5.
    pub fn paper_profile(stage: Stage) -> TrainConfig {
        TrainConfig {
            stage,
            epochs: 10,
            batch_size: 16,
            learning_rate: 5e-5,
            weight_decay: 0.01,
            seed: 1,
            patience: 0,
            encoder: EncoderConfig::recurrent(256, 256),
            use_crf: true,
            type_dim: 16,
            modality_dim: 8,
            scorer_dim: 128,
            window: DEFAULT_WINDOW,
            min_freq: 1,
        }
    }

    /// Settings sized for training small models from scratch on one CPU
    /// core: up to 200 epochs, batch 8, learning rate 1e-3, early stopping.
    pub fn desk_profile(stage: Stage) -> TrainConfig {
        TrainConfig {
            stage,
            epochs: 200,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            seed: 1,
            patience: 15,
            encoder: EncoderConfig::recurrent(32, 48),
            use_crf: true,
            type_dim: 16,
            modality_dim: 8,
            scorer_dim: 64,
            window: DEFAULT_WINDOW,
            min_freq: 1,
        }
    }
}

/// Patient-disjoint fold assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    /// Document ids per fold.
    pub folds: Vec<Vec<String>>,
    pub dev_fraction: f64,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Split the corpus into (train, test) for one fold; train keeps corpus
    /// order.
    pub fn split(&self, corpus: &Corpus, fold: usize) -> (Corpus, Corpus) {
        let test_ids: std::collections::BTreeSet<&String> = self.folds[fold].iter().collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for doc in &corpus.documents {
            if test_ids.contains(&doc.doc_id) {
                test.push(doc.clone());
            } else {
                train.push(doc.clone());
            }
        }
        (Corpus::new(train), Corpus::new(test))
    }
}

/// Group documents by patient and deal the groups into `k` folds, largest
/// group first, always into the currently smallest fold. Deterministic for a
/// given seed.
pub fn make_folds(corpus: &Corpus, k: usize, seed: u64) -> Result<FoldPlan, TrainError> {
    if k < 2 {
        return Err(TrainError::BadFoldCount(k));
    }
    let mut by_patient: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for doc in &corpus.documents {
        by_patient
            .entry(&doc.patient_id)
            .or_default()
            .push(&doc.doc_id);
    }
    if by_patient.len() < k {
        return Err(TrainError::TooFewPatients {
            folds: k,
            patients: by_patient.len(),
        });
    }
    let mut groups: Vec<(&str, Vec<&str>)> = by_patient.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    // stable sort keeps the shuffled order among equal-sized groups
    groups.sort_by_key(|(_, docs)| std::cmp::Reverse(docs.len()));

    let mut folds: Vec<Vec<String>> = vec![Vec::new(); k];
    for (_, docs) in groups {
        let target = (0..k).min_by_key(|&i| (folds[i].len(), i)).unwrap();
        folds[target].extend(docs.iter().map(|d| d.to_string()));
    }
    Ok(FoldPlan {
        folds,
        dev_fraction: 0.10,
    })
}

/// Hold out roughly `dev_fraction` of the documents as a dev set, whole
/// patients at a time. Both halves keep corpus order.
pub fn split_dev(corpus: &Corpus, dev_fraction: f64, seed: u64) -> (Corpus, Corpus) {
    let mut patients: Vec<&str> = {
        let set: std::collections::BTreeSet<&str> = corpus
            .documents
            .iter()
            .map(|d| d.patient_id.as_str())
            .collect();
        set.into_iter().collect()
    };
    if patients.len() < 2 || corpus.documents.len() < 2 {
        return (corpus.clone(), Corpus::default());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let target = ((corpus.documents.len() as f64 * dev_fraction).ceil() as usize).max(1);
    let mut dev_patients = std::collections::BTreeSet::new();
    let mut dev_docs = 0;
    for p in patients {
        if dev_docs >= target || dev_patients.len() + 1 >= corpus.documents.len() {
            break;
        }
        dev_docs += corpus
            .documents
            .iter()
            .filter(|d| d.patient_id == p)
            .count();
        dev_patients.insert(p.to_string());
        if dev_docs >= target {
            break;
        }
    }
    let mut train = Vec::new();
    let mut dev = Vec::new();
    for doc in &corpus.documents {
        if dev_patients.contains(&doc.patient_id) {
            dev.push(doc.clone());
        } else {
            train.push(doc.clone());
        }
    }
    if train.is_empty() {
        // degenerate split; keep everything in train
        return (corpus.clone(), Corpus::default());
    }
    (Corpus::new(train), Corpus::new(dev))
}

/// Patient-grouped random subset whose relation count approximates
/// `fraction` of the corpus total. Greedy fill plus single-move refinement;
/// deterministic per seed; document order is preserved.
pub fn subset_train(corpus: &Corpus, fraction: f64, seed: u64) -> Result<Corpus, TrainError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(TrainError::BadFraction(fraction));
    }
    if (fraction - 1.0).abs() < f64::EPSILON {
        return Ok(corpus.clone());
    }
    let total: usize = corpus.relation_count();
    let target = fraction * total as f64;

    let mut group_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in &corpus.documents {
        *group_counts.entry(&doc.patient_id).or_insert(0) += doc.relations.len();
    }
    let mut patients: Vec<(&str, usize)> = group_counts.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);

    let mut selected = vec![false; patients.len()];
    let mut count = 0usize;
    for (i, (_, c)) in patients.iter().enumerate() {
        if (count as f64) < target {
            selected[i] = true;
            count += c;
        }
    }
    // single-move refinement: flip whichever selection brings the count
    // closest to target
    loop {
        let best_now = (count as f64 - target).abs();
        let mut best_move: Option<(usize, usize)> = None;
        let mut best_dist = best_now;
        for (i, (_, c)) in patients.iter().enumerate() {
            let cand = if selected[i] { count - c } else { count + c };
            let dist = (cand as f64 - target).abs();
            if dist < best_dist {
                best_dist = dist;
                best_move = Some((i, cand));
            }
        }
        match best_move {
            Some((i, new_count)) => {
                selected[i] = !selected[i];
                count = new_count;
            }
            None => break,
        }
    }

    let keep: std::collections::BTreeSet<&str> = patients
        .iter()
        .zip(&selected)
        .filter(|(_, &s)| s)
        .map(|((p, _), _)| *p)
        .collect();
    Ok(Corpus::new(
        corpus
            .documents
            .iter()
            .filter(|d| keep.contains(d.patient_id.as_str()))
            .cloned()
            .collect(),
    ))
}

/// A trained stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StageModel {
    Tagger(TaggerModel),
    Modality(ModalityModel),
    Relation(RelationModel),
}

impl StageModel {
    pub fn stage(&self) -> Stage {
        match self {
            StageModel::Tagger(_) => Stage::Mer,
            StageModel::Modality(_) => Stage::Mc,
            StageModel::Relation(_) => Stage::Re,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_f1: f64,
    pub is_best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: StageModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    /// Dev micro-F1 of the untrained initialization (selection baseline).
    pub init_dev_f1: f64,
}

pub fn build_encoder(
    config: &EncoderConfig,
    vocab_size: usize,
    pretrained: Option<PrecomputedVectors>,
    rng: &mut impl Rng,
) -> Result<Encoder, ModelError> {
    match pretrained {
        Some(vectors) => Ok(Encoder::from_precomputed(vectors)),
        None => Encoder::init(*config, vocab_size, rng),
    }
}

/// Gold tag indices per sentence of a document.
fn gold_sentence_tags(
    doc: &Document,
    tagset: &crate::schema::TagSet,
) -> Result<Vec<(TokenSpan, Vec<usize>)>, ModelError> {
    let mut out = Vec::new();
    for sent in doc.sentences() {
        let mut local: Vec<(crate::schema::EntityType, TokenSpan)> = Vec::new();
        for e in &doc.entities {
            if e.span.start >= sent.start && e.span.end <= sent.end {
                local.push((
                    e.etype,
                    TokenSpan::new(e.span.start - sent.start, e.span.end - sent.start),
                ));
            } else if e.span.overlaps(&sent) {
                return Err(ModelError::ShapeMismatch(format!(
                    "entity {} crosses a sentence boundary in doc {}",
                    e.id, doc.doc_id
                )));
            }
        }
        let tags = entities_to_tags(&local, sent.len(), tagset)?;
        out.push((sent, tags));
    }
    Ok(out)
}

/// Train one pipeline stage on gold inputs and return the best checkpoint by
/// dev micro-F1.
pub fn train_stage(
    train: &Corpus,
    dev: &Corpus,
    config: &TrainConfig,
    schema: &Schema,
    pretrained: Option<PrecomputedVectors>,
) -> Result<TrainOutcome, TrainError> {
    if train.documents.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    config.encoder.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab = Vocab::build(train, config.min_freq);
    let encoder = build_encoder(&config.encoder, vocab.len(), pretrained, &mut rng)?;

    match config.stage {
        Stage::Mer => train_mer(train, dev, config, schema, vocab, encoder, rng),
        Stage::Mc => train_mc(train, dev, config, schema, vocab, encoder, rng),
        Stage::Re => train_re(train, dev, config, schema, vocab, encoder, rng),
    }
}

struct SelectionState<M: Clone> {
    best: M,
    best_f1: f64,
    best_epoch: usize,
}

impl<M: Clone> SelectionState<M> {
    fn new(model: &M, f1: f64) -> SelectionState<M> {
        SelectionState {
            best: model.clone(),
            best_f1: f1,
            best_epoch: 0,
        }
    }

    /// Keep the strictly better checkpoint (ties keep the earlier one).
    /// Without a dev set there is no selection signal, so the latest model
    /// always wins.
    fn offer(&mut self, model: &M, f1: f64, epoch: usize, have_dev: bool) -> bool {
        if f1 > self.best_f1 || !have_dev {
            self.best = model.clone();
            self.best_f1 = f1;
            self.best_epoch = epoch;
            true
        } else {
            false
        }
    }

    fn should_stop(&self, epoch: usize, patience: usize) -> bool {
        patience > 0 && epoch >= self.best_epoch + patience
    }
}

fn mer_dev_f1(model: &TaggerModel, dev: &Corpus, schema: &Schema) -> Result<f64, TrainError> {
    if dev.documents.is_empty() {
        return Ok(0.0);
    }
    let mut pred_docs = Vec::with_capacity(dev.documents.len());
    for doc in &dev.documents {
        let mut pred = doc.clone();
        pred.entities = model.decode_document(doc, schema)?;
        pred.relations.clear();
        pred_docs.push(pred);
    }
    let mut gold = dev.clone();
    for d in &mut gold.documents {
        d.relations.clear();
    }
    Ok(eval_mer(&Corpus::new(pred_docs), &gold)
        .map_err(|e| TrainError::Parse(crate::error::ParseError::Invariant(e.to_string())))?
        .f1())
}

fn train_mer(
    train: &Corpus,
    dev: &Corpus,
    config: &TrainConfig,
    schema: &Schema,
    vocab: Vocab,
    encoder: Encoder,
    mut rng: ChaCha8Rng,
) -> Result<TrainOutcome, TrainError> {
    let mut model = TaggerModel::init(vocab, encoder, config.use_crf, &mut rng);
    let tagset = model.tagset();
    let mask = transition_mask(&tagset);

    // (doc index, sentence span, token ids, gold tags)
    let mut examples = Vec::new();
    for doc in &train.documents {
        let texts = doc.token_texts();
        for (sent, tags) in gold_sentence_tags(doc, &tagset)? {
            let ids = model.vocab.encode(&texts[sent.start..sent.end]);
            examples.push((doc.doc_id.clone(), sent.start, ids, tags));
        }
    }
    if examples.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }

    let init_f1 = mer_dev_f1(&model, dev, schema)?;
    let mut selection = SelectionState::new(&model, init_f1);
    let mut optimizer = AdamW::new(config.learning_rate, config.weight_decay, &model);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = model.zero_grads();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (doc_id, offset, ids, tags) = &examples[i];
                let input = crate::encoder::EncodeInput {
                    token_ids: ids,
                    doc_id,
                    token_offset: *offset,
                };
                batch_loss += model.sentence_loss(&input, tags, &mask, &mut rng, &mut grads)?;
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            let scale = 1.0 / batch.len() as f64;
            grads.for_each_group_mut(&mut |_, data| {
                for v in data {
                    *v *= scale;
                }
            });
            clip_global_norm(&mut grads, GRAD_CLIP);
            optimizer.step(&mut model, &grads);
            model.apply_structure(&mask);
            epoch_loss += batch_loss;
        }
        let dev_f1 = mer_dev_f1(&model, dev, schema)?;
        let is_best = selection.offer(&model, dev_f1, epoch, !dev.documents.is_empty());
        log.push(EpochLog {
            epoch,
            train_loss: epoch_loss / examples.len() as f64,
            dev_f1,
            is_best,
        });
        if selection.should_stop(epoch, config.patience) {
            break;
        }
    }

    Ok(TrainOutcome {
        model: StageModel::Tagger(selection.best),
        log,
        best_epoch: selection.best_epoch,
        best_dev_f1: selection.best_f1,
        init_dev_f1: init_f1,
    })
}

fn mc_dev_f1(model: &ModalityModel, dev: &Corpus) -> Result<f64, TrainError> {
    if dev.documents.is_empty() {
        return Ok(0.0);
    }
    let mut pred_docs = Vec::with_capacity(dev.documents.len());
    for doc in &dev.documents {
        let mut pred = doc.clone();
        pred.entities = model.predict(doc, &doc.entities)?;
        pred.relations.clear();
        pred_docs.push(pred);
    }
    let mut gold = dev.clone();
    for d in &mut gold.documents {
        d.relations.clear();
    }
    Ok(eval_mc(&Corpus::new(pred_docs), &gold)
        .map_err(|e| TrainError::Parse(crate::error::ParseError::Invariant(e.to_string())))?
        .f1())
}

fn train_mc(
    train: &Corpus,
    dev: &Corpus,
    config: &TrainConfig,
    schema: &Schema,
    vocab: Vocab,
    encoder: Encoder,
    mut rng: ChaCha8Rng,
) -> Result<TrainOutcome, TrainError> {
    let mut model = ModalityModel::init(vocab, encoder, schema, config.type_dim, &mut rng);
    let docs: Vec<&Document> = train
        .documents
        .iter()
        .filter(|d| !d.entities.is_empty())
        .collect();
    if docs.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }

    let init_f1 = mc_dev_f1(&model, dev)?;
    let mut selection = SelectionState::new(&model, init_f1);
    let mut optimizer = AdamW::new(config.learning_rate, config.weight_decay, &model);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..docs.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_entities = 0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = model.zero_grads();
            let mut batch_loss = 0.0;
            let mut batch_entities = 0;
            for &i in batch {
                let (loss, n) = model.document_loss(docs[i], &mut rng, &mut grads)?;
                batch_loss += loss;
                batch_entities += n;
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            if batch_entities == 0 {
                continue;
            }
            let scale = 1.0 / batch_entities as f64;
            grads.for_each_group_mut(&mut |_, data| {
                for v in data {
                    *v *= scale;
                }
            });
            clip_global_norm(&mut grads, GRAD_CLIP);
            optimizer.step(&mut model, &grads);
            epoch_loss += batch_loss;
            epoch_entities += batch_entities;
        }
        let dev_f1 = mc_dev_f1(&model, dev)?;
        let is_best = selection.offer(&model, dev_f1, epoch, !dev.documents.is_empty());
        log.push(EpochLog {
            epoch,
            train_loss: epoch_loss / epoch_entities.max(1) as f64,
            dev_f1,
            is_best,
        });
        if selection.should_stop(epoch, config.patience) {
            break;
        }
    }

    Ok(TrainOutcome {
        model: StageModel::Modality(selection.best),
        log,
        best_epoch: selection.best_epoch,
        best_dev_f1: selection.best_f1,
        init_dev_f1: init_f1,
    })
}

fn re_dev_f1(model: &RelationModel, dev: &Corpus) -> Result<f64, TrainError> {
    if dev.documents.is_empty() {
        return Ok(0.0);
    }
    let mut pred_docs = Vec::with_capacity(dev.documents.len());
    for doc in &dev.documents {
        let mut pred = doc.clone();
        pred.relations = model.decode_relations(doc, &doc.entities, DEFAULT_THRESHOLD, true)?;
        pred_docs.push(pred);
    }
    Ok(eval_re(&Corpus::new(pred_docs), dev)
        .map_err(|e| TrainError::Parse(crate::error::ParseError::Invariant(e.to_string())))?
        .overall
        .f1())
}

fn train_re(
    train: &Corpus,
    dev: &Corpus,
    config: &TrainConfig,
    schema: &Schema,
    vocab: Vocab,
    encoder: Encoder,
    mut rng: ChaCha8Rng,
) -> Result<TrainOutcome, TrainError> {
    let mut model = RelationModel::init(
        vocab,
        encoder,
        schema,
        config.type_dim,
        config.modality_dim,
        config.scorer_dim,
        config.window,
        &mut rng,
    );
    let docs: Vec<&Document> = train
        .documents
        .iter()
        .filter(|d| d.entities.len() >= 2)
        .collect();
    if docs.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }

    let init_f1 = re_dev_f1(&model, dev)?;
    let mut selection = SelectionState::new(&model, init_f1);
    let mut optimizer = AdamW::new(config.learning_rate, config.weight_decay, &model);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..docs.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = model.zero_grads();
            let mut batch_loss = 0.0;
            let mut batch_docs = 0;
            for &i in batch {
                let (loss, pairs, _) = model.document_loss(docs[i], &mut rng, &mut grads)?;
                if pairs > 0 {
                    batch_loss += loss;
                    batch_docs += 1;
                }
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            if batch_docs == 0 {
                continue;
            }
            let scale = 1.0 / batch_docs as f64;
            grads.for_each_group_mut(&mut |_, data| {
                for v in data {
                    *v *= scale;
                }
            });
            clip_global_norm(&mut grads, GRAD_CLIP);
            optimizer.step(&mut model, &grads);
            epoch_loss += batch_loss / batch_docs as f64;
        }
        let dev_f1 = re_dev_f1(&model, dev)?;
        let is_best = selection.offer(&model, dev_f1, epoch, !dev.documents.is_empty());
        log.push(EpochLog {
            epoch,
            train_loss: epoch_loss,
            dev_f1,
            is_best,
        });
        if selection.should_stop(epoch, config.patience) {
            break;
        }
    }

    Ok(TrainOutcome {
        model: StageModel::Relation(selection.best),
        log,
        best_epoch: selection.best_epoch,
        best_dev_f1: selection.best_f1,
        init_dev_f1: init_f1,
    })
}

/// Gold entities of a corpus, used when asserting gold-input staging in
/// tests: MC/RE training functions take only gold corpora and are typed so
/// no tagger or classifier predictions can reach them.
pub fn gold_entities(corpus: &Corpus) -> Vec<(&str, &[Entity])> {
    corpus
        .documents
        .iter()
        .map(|d| (d.doc_id.as_str(), d.entities.as_slice()))
        .collect()
}
