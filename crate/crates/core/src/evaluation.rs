//! Joint pipeline evaluation: micro precision/recall/F1 per stage, with a
//! per-relation-type breakdown.
//!
//! Matching is exact and one-to-one. An entity matches on
//! `{span, entity type}`; modality classification adds the modality to the
//! key; a relation matches on the `{source entity, relation type, target
//! entity}` triplet, entities again compared by span and type. No partial
//! credit. Scores pool true/false positives across documents and types
//! (micro averaging); fold summaries macro-average the per-fold scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::annotation::{Corpus, Document};
use crate::error::EvalError;
use crate::schema::{RelationCategory, RelationType};

/// Pooled counts and derived micro scores for one stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageScores {
    pub tp: usize,
    pub fp: usize,
    pub false_negatives: usize,
    /// Gold instance count.
    pub support: usize,
}

impl StageScores {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.false_negatives == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.false_negatives) as f64
        }
    }

    /// 2PR/(P+R); zero when P + R = 0.
    pub fn f1(&self) -> f64 {
        let p = self.precision();
        let r = self.recall();
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// No gold and no predictions: the score is undefined and rendered "-".
    pub fn is_vacuous(&self) -> bool {
        self.support == 0 && self.tp + self.fp == 0
    }

    fn add(&mut self, other: &StageScores) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.false_negatives += other.false_negatives;
        self.support += other.support;
    }
}

/// One-to-one multiset matching: overlap counts as TP, surplus predictions
/// as FP, missed gold as FN.
fn match_multisets<K: Ord>(pred: Vec<K>, gold: Vec<K>) -> StageScores {
    let mut pred_counts: BTreeMap<K, usize> = BTreeMap::new();
    for k in pred {
        *pred_counts.entry(k).or_insert(0) += 1;
    }
    let mut gold_counts: BTreeMap<K, usize> = BTreeMap::new();
    for k in gold {
        *gold_counts.entry(k).or_insert(0) += 1;
    }
    let mut scores = StageScores::default();
    for (_, &g) in gold_counts.iter() {
        scores.support += g;
    }
    for (k, &p) in pred_counts.iter() {
        let g = gold_counts.get(k).copied().unwrap_or(0);
        scores.tp += p.min(g);
        scores.fp += p.saturating_sub(g);
    }
    for (k, &g) in gold_counts.iter() {
        let p = pred_counts.get(k).copied().unwrap_or(0);
        scores.false_negatives += g.saturating_sub(p);
    }
    scores
}

fn check_alignment(pred: &Corpus, gold: &Corpus) -> Result<(), EvalError> {
    if pred.documents.len() != gold.documents.len() {
        return Err(EvalError::Misaligned(format!(
            "{} predicted vs {} gold documents",
            pred.documents.len(),
            gold.documents.len()
        )));
    }
    for (p, g) in pred.documents.iter().zip(&gold.documents) {
        if p.doc_id != g.doc_id {
            return Err(EvalError::Misaligned(format!(
                "doc `{}` paired with `{}`",
                p.doc_id, g.doc_id
            )));
        }
    }
    Ok(())
}

type EntityKey = (String, usize, usize, &'static str);

fn entity_keys(doc: &Document) -> Vec<EntityKey> {
    doc.entities
        .iter()
        .map(|e| (doc.doc_id.clone(), e.span.start, e.span.end, e.etype.code()))
        .collect()
}

type ModalityKey = (String, usize, usize, &'static str, String);

fn modality_keys(doc: &Document) -> Vec<ModalityKey> {
    doc.entities
        .iter()
        .map(|e| {
            (
                doc.doc_id.clone(),
                e.span.start,
                e.span.end,
                e.etype.code(),
                e.modality.clone(),
            )
        })
        .collect()
}

type RelationKey = (
    String,
    usize,
    usize,
    &'static str,
    &'static str,
    usize,
    usize,
    &'static str,
);

fn relation_keys(doc: &Document, only: Option<RelationType>) -> Vec<RelationKey> {
    doc.relations
        .iter()
        .filter(|r| only.is_none_or(|t| r.rtype == t))
        .filter_map(|r| {
            let src = doc.entity_by_id(r.source_id)?;
            let tgt = doc.entity_by_id(r.target_id)?;
            Some((
                doc.doc_id.clone(),
                src.span.start,
                src.span.end,
                src.etype.code(),
                r.rtype.code(),
                tgt.span.start,
                tgt.span.end,
                tgt.etype.code(),
            ))
        })
        .collect()
}

/// Entity recognition scores: exact `{span, type}` match.
pub fn eval_mer(pred: &Corpus, gold: &Corpus) -> Result<StageScores, EvalError> {
    check_alignment(pred, gold)?;
    let mut total = StageScores::default();
    for (p, g) in pred.documents.iter().zip(&gold.documents) {
        total.add(&match_multisets(entity_keys(p), entity_keys(g)));
    }
    Ok(total)
}

/// Modality scores: exact `{span, type, modality}` match, evaluated over the
/// entities the previous stage produced.
pub fn eval_mc(pred: &Corpus, gold: &Corpus) -> Result<StageScores, EvalError> {
    check_alignment(pred, gold)?;
    let mut total = StageScores::default();
    for (p, g) in pred.documents.iter().zip(&gold.documents) {
        total.add(&match_multisets(modality_keys(p), modality_keys(g)));
    }
    Ok(total)
}

/// Relation scores: `{entity, relation type, entity}` triplet match, plus a
/// per-relation-type table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationScores {
    pub overall: StageScores,
    pub per_type: BTreeMap<String, StageScores>,
}

pub fn eval_re(pred: &Corpus, gold: &Corpus) -> Result<RelationScores, EvalError> {
    check_alignment(pred, gold)?;
    let mut overall = StageScores::default();
    let mut per_type: BTreeMap<String, StageScores> = RelationType::ALL
        .iter()
        .map(|t| (t.code().to_string(), StageScores::default()))
        .collect();
    for (p, g) in pred.documents.iter().zip(&gold.documents) {
        overall.add(&match_multisets(relation_keys(p, None), relation_keys(g, None)));
        for t in RelationType::ALL {
            per_type.get_mut(t.code()).unwrap().add(&match_multisets(
                relation_keys(p, Some(t)),
                relation_keys(g, Some(t)),
            ));
        }
    }
    Ok(RelationScores { overall, per_type })
}

/// Scores of all three stages on one prediction/gold corpus pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mer: StageScores,
    pub mc: StageScores,
    pub relations: RelationScores,
    /// Gold relations outside the relation stage's candidate window.
    pub unreachable_gold: usize,
}

impl EvalReport {
    pub fn compute(pred: &Corpus, gold: &Corpus, unreachable_gold: usize) -> Result<EvalReport, EvalError> {
        Ok(EvalReport {
            mer: eval_mer(pred, gold)?,
            mc: eval_mc(pred, gold)?,
            relations: eval_re(pred, gold)?,
            unreachable_gold,
        })
    }

    fn fmt_f1(scores: &StageScores) -> String {
        if scores.is_vacuous() {
            "-".to_string()
        } else {
            format!("{:.4}", scores.f1())
        }
    }

    /// Aligned plain-text report.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<8}{:>10}{:>10}{:>10}{:>10}\n",
            "stage", "P", "R", "F1", "support"
        ));
        for (name, s) in [
            ("MER", &self.mer),
            ("MC", &self.mc),
            ("RE", &self.relations.overall),
        ] {
            out.push_str(&format!(
                "{:<8}{:>10.4}{:>10.4}{:>10.4}{:>10}\n",
                name,
                s.precision(),
                s.recall(),
                s.f1(),
                s.support
            ));
        }
        out.push_str(&format!(
            "unreachable gold relations (outside candidate window): {}\n\n",
            self.unreachable_gold
        ));
        out.push_str(&format!("{:<10}{:>10}{:>10}{:>10}\n", "Med REL", "F1", "support", ""));
        let (medical, temporal): (Vec<&RelationType>, Vec<&RelationType>) = RelationType::ALL
            .iter()
            .partition(|t| t.category() == RelationCategory::Medical);
        for t in &medical {
            let s = &self.relations.per_type[t.code()];
            out.push_str(&format!(
                "{:<10}{:>10}{:>10}\n",
                t.code(),
                Self::fmt_f1(s),
                s.support
            ));
        }
        out.push_str(&format!("{:<10}{:>10}{:>10}{:>10}\n", "Temp REL", "F1", "support", ""));
        for t in &temporal {
            let s = &self.relations.per_type[t.code()];
            out.push_str(&format!(
                "{:<10}{:>10}{:>10}\n",
                t.code(),
                Self::fmt_f1(s),
                s.support
            ));
        }
        out
    }

    /// Machine-readable rows: `stage<TAB>metric<TAB>value`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (name, s) in [
            ("mer", &self.mer),
            ("mc", &self.mc),
            ("re", &self.relations.overall),
        ] {
            out.push_str(&format!("{name}\tprecision\t{:.6}\n", s.precision()));
            out.push_str(&format!("{name}\trecall\t{:.6}\n", s.recall()));
            out.push_str(&format!("{name}\tf1\t{:.6}\n", s.f1()));
            out.push_str(&format!("{name}\tsupport\t{}\n", s.support));
        }
        for (code, s) in &self.relations.per_type {
            let f1 = if s.is_vacuous() {
                "-".to_string()
            } else {
                format!("{:.6}", s.f1())
            };
            out.push_str(&format!("re:{code}\tf1\t{f1}\n"));
            out.push_str(&format!("re:{code}\tsupport\t{}\n", s.support));
        }
        out.push_str(&format!("re\tunreachable_gold\t{}\n", self.unreachable_gold));
        out
    }
}

/// Cross-validation summary: per-fold reports retained, headline numbers
/// macro-averaged over folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub folds: Vec<EvalReport>,
}

impl CrossValReport {
    pub fn macro_mer_f1(&self) -> f64 {
        Self::mean(self.folds.iter().map(|f| f.mer.f1()))
    }

    pub fn macro_mc_f1(&self) -> f64 {
        Self::mean(self.folds.iter().map(|f| f.mc.f1()))
    }

    pub fn macro_re_f1(&self) -> f64 {
        Self::mean(self.folds.iter().map(|f| f.relations.overall.f1()))
    }

    fn mean(values: impl Iterator<Item = f64>) -> f64 {
        let v: Vec<f64> = values.collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        for (i, fold) in self.folds.iter().enumerate() {
            out.push_str(&format!("== fold {i} ==\n"));
            out.push_str(&fold.render_table());
            out.push('\n');
        }
        out.push_str(&format!(
            "macro-averaged over {} folds: MER F1 {:.4}  MC F1 {:.4}  RE F1 {:.4}\n",
            self.folds.len(),
            self.macro_mer_f1(),
            self.macro_mc_f1(),
            self.macro_re_f1()
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{Entity, Relation, TokenSpan};
    use crate::schema::EntityType;
    use crate::tokenize::TokenizerKind;

    fn doc(id: &str, entities: Vec<Entity>, relations: Vec<Relation>) -> Document {
        let mut d = Document::new(id, id, "t0 t1 t2 t3 t4 t5 t6 t7", TokenizerKind::Default);
        d.entities = entities;
        d.relations = relations;
        d
    }

    fn ent(id: u32, etype: EntityType, start: usize, end: usize, modality: &str) -> Entity {
        Entity {
            id,
            etype,
            span: TokenSpan::new(start, end),
            modality: modality.into(),
        }
    }

    #[test]
    fn identical_corpora_score_perfectly() {
        let gold = Corpus::new(vec![doc(
            "d1",
            vec![ent(1, EntityType::D, 0, 1, "positive"), ent(2, EntityType::A, 2, 4, "negative")],
            vec![Relation { source_id: 1, target_id: 2, rtype: RelationType::Region }],
        )]);
        let mer = eval_mer(&gold, &gold).unwrap();
        assert_eq!((mer.precision(), mer.recall(), mer.f1()), (1.0, 1.0, 1.0));
        let mc = eval_mc(&gold, &gold).unwrap();
        assert_eq!(mc.f1(), 1.0);
        let re = eval_re(&gold, &gold).unwrap();
        assert_eq!(re.overall.f1(), 1.0);
    }

    #[test]
    fn two_tp_one_fp_one_fn_gives_two_thirds() {
        let gold = Corpus::new(vec![doc(
            "d1",
            vec![
                ent(1, EntityType::D, 0, 1, "positive"),
                ent(2, EntityType::A, 2, 3, "positive"),
                ent(3, EntityType::C, 4, 5, "positive"),
            ],
            vec![],
        )]);
        let pred = Corpus::new(vec![doc(
            "d1",
            vec![
                ent(1, EntityType::D, 0, 1, "positive"), // TP
                ent(2, EntityType::A, 2, 3, "positive"), // TP
                ent(3, EntityType::F, 6, 7, "positive"), // FP (C at 4..5 missed -> FN)
            ],
            vec![],
        )]);
        let s = eval_mer(&pred, &gold).unwrap();
        assert_eq!((s.tp, s.fp, s.false_negatives), (2, 1, 1));
        assert!((s.precision() - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.recall() - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.f1() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_modality_fails_mc_but_not_mer() {
        let gold = Corpus::new(vec![doc(
            "d1",
            vec![
                ent(1, EntityType::D, 0, 1, "positive"),
                ent(2, EntityType::D, 1, 2, "positive"),
                ent(3, EntityType::D, 2, 3, "positive"),
                ent(4, EntityType::D, 3, 4, "negative"),
            ],
            vec![],
        )]);
        let mut pred = gold.clone();
        pred.documents[0].entities[3].modality = "positive".into(); // one of four wrong
        assert_eq!(eval_mer(&pred, &gold).unwrap().f1(), 1.0);
        let mc = eval_mc(&pred, &gold).unwrap();
        assert!((mc.f1() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn relation_triplet_requires_both_endpoints_and_type() {
        let gold = Corpus::new(vec![doc(
            "d1",
            vec![
                ent(1, EntityType::D, 0, 1, "positive"),
                ent(2, EntityType::A, 2, 3, "positive"),
                ent(3, EntityType::A, 4, 5, "positive"),
            ],
            vec![
                Relation { source_id: 1, target_id: 2, rtype: RelationType::Region },
                Relation { source_id: 1, target_id: 3, rtype: RelationType::Region },
            ],
        )]);
        // prediction: one correct region, one with the wrong target span
        let pred = Corpus::new(vec![doc(
            "d1",
            vec![
                ent(1, EntityType::D, 0, 1, "positive"),
                ent(2, EntityType::A, 2, 3, "positive"),
                ent(3, EntityType::A, 6, 7, "positive"),
            ],
            vec![
                Relation { source_id: 1, target_id: 2, rtype: RelationType::Region },
                Relation { source_id: 1, target_id: 3, rtype: RelationType::Region },
            ],
        )]);
        let re = eval_re(&pred, &gold).unwrap();
        assert_eq!((re.overall.tp, re.overall.fp, re.overall.false_negatives), (1, 1, 1));
        // one predicted of two gold, one correct -> P = 1/2, R = 1/2
        let region = &re.per_type["region"];
        assert!((region.f1() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_everything_is_vacuous_and_renders_dash() {
        let gold = Corpus::new(vec![doc("d1", vec![], vec![])]);
        let report = EvalReport::compute(&gold, &gold, 0).unwrap();
        assert!(report.relations.per_type["value"].is_vacuous());
        assert!(report.render_table().contains('-'));
        assert_eq!(report.mer.f1(), 0.0);
    }

    #[test]
    fn misaligned_corpora_are_rejected() {
        let a = Corpus::new(vec![doc("d1", vec![], vec![])]);
        let b = Corpus::new(vec![doc("d2", vec![], vec![])]);
        assert!(eval_mer(&a, &b).is_err());
        let c = Corpus::new(vec![]);
        assert!(eval_mer(&a, &c).is_err());
    }

    #[test]
    fn per_type_counts_pool_to_overall() {
        let gold = Corpus::new(vec![doc(
            "d1",
            vec![
                ent(1, EntityType::D, 0, 1, "positive"),
                ent(2, EntityType::A, 2, 3, "positive"),
                ent(3, EntityType::Timex3, 4, 5, "positive"),
            ],
            vec![
                Relation { source_id: 1, target_id: 2, rtype: RelationType::Region },
                Relation { source_id: 1, target_id: 3, rtype: RelationType::On },
            ],
        )]);
        let mut pred = gold.clone();
        pred.documents[0].relations.push(Relation {
            source_id: 2,
            target_id: 1,
            rtype: RelationType::Region,
        });
        let re = eval_re(&pred, &gold).unwrap();
        let pooled_tp: usize = re.per_type.values().map(|s| s.tp).sum();
        let pooled_fp: usize = re.per_type.values().map(|s| s.fp).sum();
        let pooled_fn: usize = re.per_type.values().map(|s| s.false_negatives).sum();
        assert_eq!(pooled_tp, re.overall.tp);
        assert_eq!(pooled_fp, re.overall.fp);
        assert_eq!(pooled_fn, re.overall.false_negatives);
    }

    #[test]
    fn upstream_errors_never_help_downstream_stages() {
        // gold-upstream ablation: predictions equal gold except modality
        let gold = Corpus::new(vec![doc(
            "d1",
            vec![
                ent(1, EntityType::D, 0, 1, "negative"),
                ent(2, EntityType::A, 2, 3, "positive"),
            ],
            vec![Relation { source_id: 1, target_id: 2, rtype: RelationType::Region }],
        )]);
        let ablation = gold.clone();
        // joint prediction: MER missed entity 1 entirely
        let mut joint = gold.clone();
        joint.documents[0].entities.remove(0);
        joint.documents[0].relations.clear();

        let mc_ablation = eval_mc(&ablation, &gold).unwrap().f1();
        let mc_joint = eval_mc(&joint, &gold).unwrap().f1();
        assert!(mc_joint <= mc_ablation);
        let re_ablation = eval_re(&ablation, &gold).unwrap().overall.f1();
        let re_joint = eval_re(&joint, &gold).unwrap().overall.f1();
        assert!(re_joint <= re_ablation);
    }

    #[test]
    fn macro_average_over_folds() {
        let gold = Corpus::new(vec![doc(
            "d1",
            vec![ent(1, EntityType::D, 0, 1, "positive")],
            vec![],
        )]);
        let perfect = EvalReport::compute(&gold, &gold, 0).unwrap();
        let empty_pred = Corpus::new(vec![doc("d1", vec![], vec![])]);
        let zero = EvalReport::compute(&empty_pred, &gold, 0).unwrap();
        let cv = CrossValReport {
            folds: vec![perfect, zero],
        };
        assert!((cv.macro_mer_f1() - 0.5).abs() < 1e-12);
        assert!(cv.render_table().contains("macro-averaged over 2 folds"));
    }
}
