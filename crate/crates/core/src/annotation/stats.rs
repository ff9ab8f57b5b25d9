//! Corpus statistics: counts per relation type (split by category), per
//! entity type, and per modality.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::schema::{EntityType, RelationCategory, RelationType};

use super::Corpus;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub patients: usize,
    pub tokens: usize,
    pub entities: usize,
    pub entity_counts: BTreeMap<String, usize>,
    pub modality_counts: BTreeMap<String, usize>,
    pub relation_counts: BTreeMap<String, usize>,
    pub medical_relations: usize,
    pub temporal_relations: usize,
}

impl CorpusStats {
    pub fn compute(corpus: &Corpus) -> CorpusStats {
        let mut entity_counts: BTreeMap<String, usize> = EntityType::ALL
            .iter()
            .map(|t| (t.code().to_string(), 0))
            .collect();
        let mut relation_counts: BTreeMap<String, usize> = RelationType::ALL
            .iter()
            .map(|t| (t.code().to_string(), 0))
            .collect();
        let mut modality_counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut patients = std::collections::BTreeSet::new();
        let mut tokens = 0;
        let mut entities = 0;
        let mut medical = 0;
        let mut temporal = 0;

        for doc in &corpus.documents {
            patients.insert(&doc.patient_id);
            tokens += doc.tokens.len();
            entities += doc.entities.len();
            for e in &doc.entities {
                *entity_counts.get_mut(e.etype.code()).unwrap() += 1;
                *modality_counts.entry(e.modality.clone()).or_insert(0) += 1;
            }
            for r in &doc.relations {
                *relation_counts.get_mut(r.rtype.code()).unwrap() += 1;
                match r.category() {
                    RelationCategory::Medical => medical += 1,
                    RelationCategory::Temporal => temporal += 1,
                }
            }
        }

        CorpusStats {
            documents: corpus.documents.len(),
            patients: patients.len(),
            tokens,
            entities,
            entity_counts,
            modality_counts,
            relation_counts,
            medical_relations: medical,
            temporal_relations: temporal,
        }
    }

    pub fn relation_count(&self, rtype: RelationType) -> usize {
        self.relation_counts[rtype.code()]
    }

    pub fn total_relations(&self) -> usize {
        self.medical_relations + self.temporal_relations
    }

    /// Aligned plain-text table, medical relations left, temporal right.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "documents {}  patients {}  tokens {}  entities {}\n\n",
            self.documents, self.patients, self.tokens, self.entities
        ));
        out.push_str(&format!(
            "{:<10}{:>8}   {:<10}{:>8}\n",
            "Med REL", "#Num", "Temp REL", "#Num"
        ));
        let medical: Vec<RelationType> = RelationType::ALL
            .iter()
            .copied()
            .filter(|r| r.category() == RelationCategory::Medical)
            .collect();
        let temporal: Vec<RelationType> = RelationType::ALL
            .iter()
            .copied()
            .filter(|r| r.category() == RelationCategory::Temporal)
            .collect();
        for (m, t) in medical.iter().zip(&temporal) {
            out.push_str(&format!(
                "{:<10}{:>8}   {:<10}{:>8}\n",
                m.code(),
                self.relation_count(*m),
                t.code(),
                self.relation_count(*t),
            ));
        }
        out.push_str(&format!(
            "{:<10}{:>8}   {:<10}{:>8}\n",
            "total", self.medical_relations, "total", self.temporal_relations
        ));

        out.push_str("\nentities:\n");
        for (code, n) in &self.entity_counts {
            out.push_str(&format!("  {code:<8}{n:>8}\n"));
        }
        out.push_str("modalities:\n");
        for (code, n) in &self.modality_counts {
            out.push_str(&format!("  {code:<12}{n:>8}\n"));
        }
        out
    }

    /// Machine-readable tab-separated rows: `kind<TAB>key<TAB>count`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("corpus\tdocuments\t{}\n", self.documents));
        out.push_str(&format!("corpus\tpatients\t{}\n", self.patients));
        out.push_str(&format!("corpus\ttokens\t{}\n", self.tokens));
        out.push_str(&format!("corpus\tentities\t{}\n", self.entities));
        for (code, n) in &self.entity_counts {
            out.push_str(&format!("entity\t{code}\t{n}\n"));
        }
        for (code, n) in &self.modality_counts {
            out.push_str(&format!("modality\t{code}\t{n}\n"));
        }
        for (code, n) in &self.relation_counts {
            out.push_str(&format!("relation\t{code}\t{n}\n"));
        }
        out.push_str(&format!("category\tmedical\t{}\n", self.medical_relations));
        out.push_str(&format!("category\ttemporal\t{}\n", self.temporal_relations));
        out
    }
}
