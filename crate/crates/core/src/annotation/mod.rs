//! Annotated-report documents and the inline-markup exchange format.
//!
//! A report is plain text in which entity spans are wrapped in inline
//! elements named by their entity type code. Relations are attached to the
//! source entity via `brel` (medical) and `trel` (temporal) attributes:
//!
//! ```text
//! <D id="1" mod="positive" brel="region:2">nodules</D> in <A id="2">the lung field</A>
//! ```
//!
//! Documents are immutable value types after construction; parsing and
//! serialization are pure functions.

mod parse;
mod serialize;
mod stats;

pub use parse::{parse_corpus, parse_report};
pub use serialize::{serialize_corpus, serialize_report};
pub use stats::CorpusStats;

use serde::{Deserialize, Serialize};

use crate::error::{ParseError, SourcePos};
use crate::schema::{
    validate_relation, EntityType, RelationCategory, RelationType, Schema, SignatureCheck,
    ValidationMode,
};
use crate::tokenize::{tokenize, CharSpan, TokenizerKind};

/// One token: its position and half-open character offsets into the raw
/// text, counted in Unicode scalar values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub index: usize,
    pub char_start: usize,
    pub char_end: usize,
}

/// Half-open token-index span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> TokenSpan {
        TokenSpan { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &TokenSpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// A typed, modality-tagged token span with a document-unique id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: u32,
    pub etype: EntityType,
    pub span: TokenSpan,
    pub modality: String,
}

/// A directed typed edge between two entities of one document.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Relation {
    pub source_id: u32,
    pub target_id: u32,
    pub rtype: RelationType,
}

impl Relation {
    pub fn category(&self) -> RelationCategory {
        self.rtype.category()
    }
}

/// One medical report with its tokens, entities, and relations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub patient_id: String,
    pub text: String,
    pub tokens: Vec<Token>,
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
}

impl Document {
    /// Tokenize `text` and build an unannotated document.
    pub fn new(
        doc_id: impl Into<String>,
        patient_id: impl Into<String>,
        text: impl Into<String>,
        tokenizer: TokenizerKind,
    ) -> Document {
        let text = text.into();
        let tokens = tokenize(&text, tokenizer)
            .into_iter()
            .enumerate()
            .map(|(index, CharSpan { start, end })| Token {
                index,
                char_start: start,
                char_end: end,
            })
            .collect();
        Document {
            doc_id: doc_id.into(),
            patient_id: patient_id.into(),
            text,
            tokens,
            entities: Vec::new(),
            relations: Vec::new(),
        }
    }

    /// Build a document from externally segmented token spans.
    pub fn with_token_spans(
        doc_id: impl Into<String>,
        patient_id: impl Into<String>,
        text: impl Into<String>,
        spans: &[CharSpan],
    ) -> Document {
        let text = text.into();
        let tokens = spans
            .iter()
            .enumerate()
            .map(|(index, s)| Token {
                index,
                char_start: s.start,
                char_end: s.end,
            })
            .collect();
        Document {
            doc_id: doc_id.into(),
            patient_id: patient_id.into(),
            text,
            tokens,
            entities: Vec::new(),
            relations: Vec::new(),
        }
    }

    /// The raw report text with all annotation removed.
    pub fn strip_annotations(&self) -> &str {
        &self.text
    }

    /// Surface string of each token.
    pub fn token_texts(&self) -> Vec<String> {
        let chars: Vec<char> = self.text.chars().collect();
        self.tokens
            .iter()
            .map(|t| chars[t.char_start..t.char_end].iter().collect())
            .collect()
    }

    /// Token-index spans of the newline-delimited sentences, in order.
    /// Tokens never straddle a newline, so grouping by line is well defined.
    pub fn sentences(&self) -> Vec<TokenSpan> {
        let mut line_of_char = Vec::with_capacity(self.text.chars().count());
        let mut line = 0usize;
        for c in self.text.chars() {
            line_of_char.push(line);
            if c == '\n' {
                line += 1;
            }
        }
        let mut spans: Vec<TokenSpan> = Vec::new();
        let mut current_line = usize::MAX;
        for t in &self.tokens {
            let l = line_of_char[t.char_start];
            if l != current_line {
                spans.push(TokenSpan::new(t.index, t.index + 1));
                current_line = l;
            } else {
                spans.last_mut().unwrap().end = t.index + 1;
            }
        }
        spans
    }

    pub fn entity_by_id(&self, id: u32) -> Option<&Entity> {
        self.entities.iter().find(|e| e.id == id)
    }

    /// Check all document invariants. Structural problems are errors in both
    /// modes; schema problems (signatures, unknown modalities) are errors in
    /// strict mode and warnings in lenient mode.
    pub fn validate(&self, schema: &Schema, mode: ValidationMode) -> Result<Vec<String>, ParseError> {
        let n_chars = self.text.chars().count();
        let mut prev_end = 0usize;
        for (i, t) in self.tokens.iter().enumerate() {
            if t.index != i {
                return Err(ParseError::Invariant(format!(
                    "token {} carries index {}",
                    i, t.index
                )));
            }
            if t.char_start >= t.char_end || t.char_start < prev_end || t.char_end > n_chars {
                return Err(ParseError::Invariant(format!(
                    "token {} has bad offsets [{}, {})",
                    i, t.char_start, t.char_end
                )));
            }
            prev_end = t.char_end;
        }

        let mut ids = std::collections::BTreeSet::new();
        for e in &self.entities {
            if e.id == 0 {
                return Err(ParseError::Invariant(format!(
                    "entity id must be positive, got {}",
                    e.id
                )));
            }
            if !ids.insert(e.id) {
                return Err(ParseError::DuplicateId {
                    pos: SourcePos { line: 0, column: 0 },
                    id: e.id,
                });
            }
            if e.span.is_empty() || e.span.end > self.tokens.len() {
                return Err(ParseError::Invariant(format!(
                    "entity {} has bad token span [{}, {})",
                    e.id, e.span.start, e.span.end
                )));
            }
        }
        let mut by_start: Vec<&Entity> = self.entities.iter().collect();
        by_start.sort_by_key(|e| e.span);
        for pair in by_start.windows(2) {
            if pair[0].span.overlaps(&pair[1].span) {
                return Err(ParseError::OverlappingSpans {
                    pos: SourcePos { line: 0, column: 0 },
                });
            }
        }

        let mut warnings = Vec::new();
        let mut violations = Vec::new();
        for e in &self.entities {
            if schema.modality_index(&e.modality).is_none() {
                let msg = format!("entity {}: unknown modality `{}`", e.id, e.modality);
                match mode {
                    ValidationMode::Strict => violations.push(msg),
                    ValidationMode::Lenient => warnings.push(msg),
                }
            }
        }
        for r in &self.relations {
            let src = self.entity_by_id(r.source_id).ok_or(ParseError::DanglingTarget {
                pos: SourcePos { line: 0, column: 0 },
                id: r.source_id,
            })?;
            let tgt = self.entity_by_id(r.target_id).ok_or(ParseError::DanglingTarget {
                pos: SourcePos { line: 0, column: 0 },
                id: r.target_id,
            })?;
            if r.source_id == r.target_id {
                return Err(ParseError::Invariant(format!(
                    "relation {} loops on entity {}",
                    r.rtype, r.source_id
                )));
            }
            match validate_relation(r.rtype, src.etype, tgt.etype, mode) {
                SignatureCheck::Ok => {}
                SignatureCheck::Warning(msg) => {
                    warnings.push(format!("doc {}: {}", self.doc_id, msg))
                }
                SignatureCheck::Violation(msg) => {
                    violations.push(format!("doc {}: {}", self.doc_id, msg))
                }
            }
        }
        if !violations.is_empty() {
            return Err(ParseError::SchemaViolations(violations.join("; ")));
        }
        Ok(warnings)
    }

    /// Entities and relations in canonical order (entities by span, relations
    /// by source/type/target); text and ids untouched.
    pub fn canonicalized(&self) -> Document {
        let mut doc = self.clone();
        doc.entities.sort_by_key(|e| (e.span, e.id));
        doc.relations
            .sort_by_key(|r| (r.source_id, r.rtype, r.target_id));
        doc
    }

    /// Equality up to entity/relation ordering.
    pub fn structurally_equals(&self, other: &Document) -> bool {
        self.canonicalized() == other.canonicalized()
    }
}

/// An ordered collection of documents with unique ids.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<Document>,
}

impl Corpus {
    pub fn new(documents: Vec<Document>) -> Corpus {
        Corpus { documents }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn validate(&self, schema: &Schema, mode: ValidationMode) -> Result<Vec<String>, ParseError> {
        let mut ids = std::collections::BTreeSet::new();
        for d in &self.documents {
            if !ids.insert(&d.doc_id) {
                return Err(ParseError::Invariant(format!(
                    "duplicate doc id `{}`",
                    d.doc_id
                )));
            }
        }
        let mut warnings = Vec::new();
        for d in &self.documents {
            warnings.extend(d.validate(schema, mode)?);
        }
        Ok(warnings)
    }

    /// Total relation count across all documents.
    pub fn relation_count(&self) -> usize {
        self.documents.iter().map(|d| d.relations.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc_with(text: &str) -> Document {
        Document::new("d1", "p1", text, TokenizerKind::Default)
    }

    #[test]
    fn strip_annotations_is_text() {
        let d = doc_with("plain line\nsecond line\n");
        assert_eq!(d.strip_annotations(), "plain line\nsecond line\n");
        assert_eq!(d.strip_annotations(), d.strip_annotations()); // idempotent
    }

    #[test]
    fn sentences_follow_newlines() {
        let d = doc_with("a b\nc\n\nd e f");
        let sents = d.sentences();
        assert_eq!(
            sents,
            vec![
                TokenSpan::new(0, 2),
                TokenSpan::new(2, 3),
                TokenSpan::new(3, 6)
            ]
        );
    }

    #[test]
    fn token_texts_match_offsets() {
        let d = doc_with("ab cd  e");
        assert_eq!(d.token_texts(), vec!["ab", "cd", "e"]);
    }

    #[test]
    fn validate_catches_overlap() {
        let mut d = doc_with("a b c");
        d.entities.push(Entity {
            id: 1,
            etype: EntityType::D,
            span: TokenSpan::new(0, 2),
            modality: "positive".into(),
        });
        d.entities.push(Entity {
            id: 2,
            etype: EntityType::A,
            span: TokenSpan::new(1, 3),
            modality: "positive".into(),
        });
        let err = d.validate(&Schema::default(), ValidationMode::Lenient);
        assert!(matches!(err, Err(ParseError::OverlappingSpans { .. })));
    }

    #[test]
    fn validate_catches_dangling_relation() {
        let mut d = doc_with("a b");
        d.entities.push(Entity {
            id: 1,
            etype: EntityType::D,
            span: TokenSpan::new(0, 1),
            modality: "positive".into(),
        });
        d.relations.push(Relation {
            source_id: 1,
            target_id: 9,
            rtype: RelationType::Region,
        });
        assert!(matches!(
            d.validate(&Schema::default(), ValidationMode::Lenient),
            Err(ParseError::DanglingTarget { id: 9, .. })
        ));
    }

    #[test]
    fn validate_signature_strict_vs_lenient() {
        let mut d = doc_with("a b");
        d.entities.push(Entity {
            id: 1,
            etype: EntityType::C,
            span: TokenSpan::new(0, 1),
            modality: "positive".into(),
        });
        d.entities.push(Entity {
            id: 2,
            etype: EntityType::C,
            span: TokenSpan::new(1, 2),
            modality: "positive".into(),
        });
        d.relations.push(Relation {
            source_id: 1,
            target_id: 2,
            rtype: RelationType::Compare,
        });
        let schema = Schema::default();
        assert!(matches!(
            d.validate(&schema, ValidationMode::Strict),
            Err(ParseError::SchemaViolations(_))
        ));
        let warnings = d.validate(&schema, ValidationMode::Lenient).unwrap();
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn corpus_rejects_duplicate_doc_ids() {
        let c = Corpus::new(vec![doc_with("a"), doc_with("b")]);
        assert!(c.validate(&Schema::default(), ValidationMode::Lenient).is_err());
    }
}
