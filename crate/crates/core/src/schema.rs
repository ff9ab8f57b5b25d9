//! Entity, modality, and relation type inventory plus the argument-type
//! rules each relation admits.
//!
//! Everything downstream (parsing, tagging, relation decoding, evaluation)
//! resolves type questions through this module. Schema values are immutable
//! after construction and safe to share across threads.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::SchemaError;

/// The twelve entity type codes. Declaration order is alphabetical by code,
/// which fixes tag and embedding-table indexing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntityType {
    /// Anatomical entity.
    #[serde(rename = "A")]
    A,
    /// Change of status.
    #[serde(rename = "C")]
    C,
    /// Clinical context.
    #[serde(rename = "CC")]
    Cc,
    /// Disease or symptom.
    #[serde(rename = "D")]
    D,
    /// Feature or measurement.
    #[serde(rename = "F")]
    F,
    /// Medicine key.
    #[serde(rename = "M-key")]
    MKey,
    /// Medicine value.
    #[serde(rename = "M-val")]
    MVal,
    /// Remedy.
    #[serde(rename = "R")]
    R,
    /// Test key.
    #[serde(rename = "T-key")]
    TKey,
    /// Test name.
    #[serde(rename = "T-test")]
    TTest,
    /// Test value.
    #[serde(rename = "T-val")]
    TVal,
    /// Temporal expression.
    #[serde(rename = "TIMEX3")]
    Timex3,
}

impl EntityType {
    /// All entity types in canonical (alphabetical-by-code) order.
    pub const ALL: [EntityType; 12] = [
        EntityType::A,
        EntityType::C,
        EntityType::Cc,
        EntityType::D,
        EntityType::F,
        EntityType::MKey,
        EntityType::MVal,
        EntityType::R,
        EntityType::TKey,
        EntityType::TTest,
        EntityType::TVal,
        EntityType::Timex3,
    ];

    pub fn code(self) -> &'static str {
        match self {
            EntityType::A => "A",
            EntityType::C => "C",
            EntityType::Cc => "CC",
            EntityType::D => "D",
            EntityType::F => "F",
            EntityType::MKey => "M-key",
            EntityType::MVal => "M-val",
            EntityType::R => "R",
            EntityType::TKey => "T-key",
            EntityType::TTest => "T-test",
            EntityType::TVal => "T-val",
            EntityType::Timex3 => "TIMEX3",
        }
    }

    pub fn from_code(code: &str) -> Result<EntityType, SchemaError> {
        EntityType::ALL
            .iter()
            .copied()
            .find(|t| t.code() == code)
            .ok_or_else(|| SchemaError::UnknownEntityType(code.to_string()))
    }

    /// Dense index into `ALL`; usable for embedding tables.
    pub fn index(self) -> usize {
        EntityType::ALL.iter().position(|&t| t == self).unwrap()
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Medical relations hold between entities of the report content; temporal
/// relations anchor an entity to a time expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RelationCategory {
    #[serde(rename = "medical")]
    Medical,
    #[serde(rename = "temporal")]
    Temporal,
}

impl RelationCategory {
    pub fn code(self) -> &'static str {
        match self {
            RelationCategory::Medical => "medical",
            RelationCategory::Temporal => "temporal",
        }
    }
}

impl fmt::Display for RelationCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// The ten relation type codes: five medical, five temporal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RelationType {
    #[serde(rename = "change")]
    Change,
    #[serde(rename = "compare")]
    Compare,
    #[serde(rename = "feature")]
    Feature,
    #[serde(rename = "region")]
    Region,
    #[serde(rename = "value")]
    Value,
    #[serde(rename = "on")]
    On,
    #[serde(rename = "before")]
    Before,
    #[serde(rename = "after")]
    After,
    #[serde(rename = "start")]
    Start,
    #[serde(rename = "finish")]
    Finish,
}

impl RelationType {
    /// All relation types, medical first, in stable declaration order.
    pub const ALL: [RelationType; 10] = [
        RelationType::Change,
        RelationType::Compare,
        RelationType::Feature,
        RelationType::Region,
        RelationType::Value,
        RelationType::On,
        RelationType::Before,
        RelationType::After,
        RelationType::Start,
        RelationType::Finish,
    ];

    pub fn code(self) -> &'static str {
        match self {
            RelationType::Change => "change",
            RelationType::Compare => "compare",
            RelationType::Feature => "feature",
            RelationType::Region => "region",
            RelationType::Value => "value",
            RelationType::On => "on",
            RelationType::Before => "before",
            RelationType::After => "after",
            RelationType::Start => "start",
            RelationType::Finish => "finish",
        }
    }

    pub fn from_code(code: &str) -> Result<RelationType, SchemaError> {
        RelationType::ALL
            .iter()
            .copied()
            .find(|t| t.code() == code)
            .ok_or_else(|| SchemaError::UnknownRelationType(code.to_string()))
    }

    pub fn category(self) -> RelationCategory {
        match self {
            RelationType::Change
            | RelationType::Compare
            | RelationType::Feature
            | RelationType::Region
            | RelationType::Value => RelationCategory::Medical,
            RelationType::On
            | RelationType::Before
            | RelationType::After
            | RelationType::Start
            | RelationType::Finish => RelationCategory::Temporal,
        }
    }

    /// Dense index into `ALL`; usable as a score-vector slot.
    pub fn index(self) -> usize {
        RelationType::ALL.iter().position(|&t| t == self).unwrap()
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// How a signature rule is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strictness {
    Canonical,
    Lenient,
}

/// The admissible (source type, target type) pairs of one relation type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureRule {
    pub relation: RelationType,
    pub source_types: BTreeSet<EntityType>,
    pub target_types: BTreeSet<EntityType>,
    pub strictness: Strictness,
}

impl SignatureRule {
    pub fn admits(&self, src: EntityType, tgt: EntityType) -> bool {
        self.source_types.contains(&src) && self.target_types.contains(&tgt)
    }
}

fn type_set(types: &[EntityType]) -> BTreeSet<EntityType> {
    types.iter().copied().collect()
}

fn all_types() -> BTreeSet<EntityType> {
    EntityType::ALL.iter().copied().collect()
}

/// Canonical argument-type rule for a relation type.
///
/// Every temporal relation targets exactly `TIMEX3` and admits any source.
pub fn canonical_signature(rel: RelationType) -> SignatureRule {
    use EntityType::*;
    let (source_types, target_types) = match rel {
        RelationType::Change => (type_set(&[C]), type_set(&[D, A, TKey, MKey])),
        RelationType::Compare => (type_set(&[C]), type_set(&[Timex3])),
        RelationType::Feature => (type_set(&[F]), all_types()),
        RelationType::Region => (type_set(&[A, D]), type_set(&[A, D])),
        RelationType::Value => (type_set(&[TKey, MKey]), type_set(&[TVal, MVal])),
        RelationType::On
        | RelationType::Before
        | RelationType::After
        | RelationType::Start
        | RelationType::Finish => (all_types(), type_set(&[Timex3])),
    };
    SignatureRule {
        relation: rel,
        source_types,
        target_types,
        strictness: Strictness::Canonical,
    }
}

/// Validation mode used by parsing and relation filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValidationMode {
    Strict,
    Lenient,
}

/// Outcome of checking one relation against its canonical signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SignatureCheck {
    Ok,
    /// Outside the canonical rule, tolerated in lenient mode.
    Warning(String),
    Violation(String),
}

impl SignatureCheck {
    pub fn is_ok(&self) -> bool {
        !matches!(self, SignatureCheck::Violation(_))
    }
}

/// Check a `(relation, source type, target type)` triple against the
/// canonical rule. Strict mode reports out-of-rule pairs as violations;
/// lenient mode downgrades them to warnings.
pub fn validate_relation(
    rel: RelationType,
    src: EntityType,
    tgt: EntityType,
    mode: ValidationMode,
) -> SignatureCheck {
    let rule = canonical_signature(rel);
    if rule.admits(src, tgt) {
        return SignatureCheck::Ok;
    }
    let message = format!("{}({}, {}) outside canonical signature", rel, src, tgt);
    match mode {
        ValidationMode::Strict => SignatureCheck::Violation(message),
        ValidationMode::Lenient => SignatureCheck::Warning(message),
    }
}

/// One tag of a BIO tagset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BioTag {
    Outside,
    Begin(EntityType),
    Inside(EntityType),
}

impl BioTag {
    pub fn label(self) -> String {
        match self {
            BioTag::Outside => "O".to_string(),
            BioTag::Begin(t) => format!("B-{}", t.code()),
            BioTag::Inside(t) => format!("I-{}", t.code()),
        }
    }
}

/// Ordered BIO tagset over a set of entity types: `O` first, then `B-t, I-t`
/// per type in alphabetical code order. Size is `2 * |types| + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSet {
    tags: Vec<BioTag>,
}

impl TagSet {
    pub fn new(entity_types: &BTreeSet<EntityType>) -> Result<TagSet, SchemaError> {
        if entity_types.is_empty() {
            return Err(SchemaError::EmptyEntitySet);
        }
        let mut tags = vec![BioTag::Outside];
        for &t in entity_types {
            tags.push(BioTag::Begin(t));
            tags.push(BioTag::Inside(t));
        }
        Ok(TagSet { tags })
    }

    /// Tagset over all twelve entity types (25 tags).
    pub fn full() -> TagSet {
        TagSet::new(&all_types()).unwrap()
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        false // a tagset always contains at least O
    }

    pub fn tag(&self, index: usize) -> Option<BioTag> {
        self.tags.get(index).copied()
    }

    pub fn tags(&self) -> &[BioTag] {
        &self.tags
    }

    pub fn index_of(&self, tag: BioTag) -> Option<usize> {
        self.tags.iter().position(|&t| t == tag)
    }

    pub fn labels(&self) -> Vec<String> {
        self.tags.iter().map(|t| t.label()).collect()
    }

    /// Whether `from -> to` is a structurally legal BIO transition.
    /// `None` stands for the virtual START (as `from`) or STOP (as `to`);
    /// START -> I-x is illegal, transitions into STOP are always legal.
    pub fn legal_transition(&self, from: Option<usize>, to: Option<usize>) -> bool {
        let to = match to {
            None => return true,
            Some(j) => self.tags[j],
        };
        let target = match to {
            BioTag::Inside(t) => t,
            _ => return true,
        };
        // Only transitions into I-x are constrained.
        match from.map(|i| self.tags[i]) {
            Some(BioTag::Begin(t)) | Some(BioTag::Inside(t)) => t == target,
            Some(BioTag::Outside) | None => false,
        }
    }
}

/// BIO tag labels for a set of entity types; `O` then `B-t, I-t` per type in
/// alphabetical code order.
pub fn bio_tagset(entity_types: &BTreeSet<EntityType>) -> Result<Vec<String>, SchemaError> {
    Ok(TagSet::new(entity_types)?.labels())
}

/// The active schema: the fixed entity/relation inventory plus the
/// configured modality set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    modalities: Vec<String>,
    default_modality: usize,
}

impl Default for Schema {
    /// Built-in schema: the four-code modality set with `positive` default.
    fn default() -> Schema {
        Schema {
            modalities: vec![
                "positive".to_string(),
                "negative".to_string(),
                "suspicious".to_string(),
                "general".to_string(),
            ],
            default_modality: 0,
        }
    }
}

impl Schema {
    pub fn with_modalities(codes: &[&str], default: &str) -> Result<Schema, SchemaError> {
        if codes.is_empty() {
            return Err(SchemaError::EmptyModalitySet);
        }
        let mut modalities = Vec::with_capacity(codes.len());
        for &c in codes {
            if modalities.iter().any(|m| m == c) {
                return Err(SchemaError::Duplicate(format!("modality {c}")));
            }
            modalities.push(c.to_string());
        }
        let default_modality = modalities
            .iter()
            .position(|m| m == default)
            .ok_or_else(|| SchemaError::UnknownModality(default.to_string()))?;
        Ok(Schema {
            modalities,
            default_modality,
        })
    }

    /// Parse a plain-text schema configuration: one declaration per line.
    ///
    /// ```text
    /// # lines starting with # are comments
    /// entity D                 # must name one of the built-in codes
    /// relation region medical  # must match the built-in category
    /// modality positive default
    /// modality negative
    /// ```
    ///
    /// `entity` and `relation` lines assert the fixed inventory; `modality`
    /// lines replace the default modality set. Exactly one modality may be
    /// marked `default`; otherwise the first declared one is the default.
    pub fn from_config_str(text: &str) -> Result<Schema, SchemaError> {
        let mut modalities: Vec<String> = Vec::new();
        let mut default: Option<usize> = None;
        let mut seen_entities: BTreeSet<EntityType> = BTreeSet::new();
        let mut seen_relations: BTreeSet<RelationType> = BTreeSet::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let kind = parts.next().unwrap();
            let bad = |message: String| SchemaError::BadConfigLine {
                line: lineno + 1,
                message,
            };
            match kind {
                "entity" => {
                    let code = parts
                        .next()
                        .ok_or_else(|| bad("missing entity code".into()))?;
                    let t = EntityType::from_code(code)?;
                    if !seen_entities.insert(t) {
                        return Err(SchemaError::Duplicate(format!("entity {code}")));
                    }
                }
                "relation" => {
                    let code = parts
                        .next()
                        .ok_or_else(|| bad("missing relation code".into()))?;
                    let r = RelationType::from_code(code)?;
                    if let Some(cat) = parts.next() {
                        if cat != r.category().code() {
                            return Err(SchemaError::CategoryMismatch {
                                relation: code.to_string(),
                                declared: cat.to_string(),
                                actual: r.category().code().to_string(),
                            });
                        }
                    }
                    if !seen_relations.insert(r) {
                        return Err(SchemaError::Duplicate(format!("relation {code}")));
                    }
                }
                "modality" => {
                    let code = parts
                        .next()
                        .ok_or_else(|| bad("missing modality code".into()))?;
                    if modalities.iter().any(|m| m == code) {
                        return Err(SchemaError::Duplicate(format!("modality {code}")));
                    }
                    modalities.push(code.to_string());
                    match parts.next() {
                        None => {}
                        Some("default") => {
                            if default.is_some() {
                                return Err(bad("multiple default modalities".into()));
                            }
                            default = Some(modalities.len() - 1);
                        }
                        Some(other) => {
                            return Err(bad(format!("unexpected token `{other}`")));
                        }
                    }
                }
                other => {
                    return Err(bad(format!("unknown declaration kind `{other}`")));
                }
            }
        }

        if modalities.is_empty() {
            let base = Schema::default();
            modalities = base.modalities;
            default = Some(base.default_modality);
        }
        Ok(Schema {
            default_modality: default.unwrap_or(0),
            modalities,
        })
    }

    /// Canonical configuration text; parsing it reproduces this schema.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        for t in EntityType::ALL {
            out.push_str(&format!("entity {}\n", t.code()));
        }
        for r in RelationType::ALL {
            out.push_str(&format!("relation {} {}\n", r.code(), r.category()));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if i == self.default_modality {
                out.push_str(&format!("modality {m} default\n"));
            } else {
                out.push_str(&format!("modality {m}\n"));
            }
        }
        out
    }

    /// Hex digest of the canonical configuration; model checkpoints store it
    /// so the pipeline can refuse mixing incompatible stages.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_config_string().as_bytes());
        hex::encode(hasher.finalize())
    }

    pub fn modalities(&self) -> &[String] {
        &self.modalities
    }

    pub fn modality_count(&self) -> usize {
        self.modalities.len()
    }

    pub fn default_modality(&self) -> &str {
        &self.modalities[self.default_modality]
    }

    pub fn modality_index(&self, code: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m == code)
    }

    pub fn modality_code(&self, index: usize) -> Option<&str> {
        self.modalities.get(index).map(|s| s.as_str())
    }

    /// Whether entities carrying `code` are accepted under `mode`.
    pub fn check_modality(&self, code: &str, mode: ValidationMode) -> Result<(), SchemaError> {
        if self.modality_index(code).is_some() || mode == ValidationMode::Lenient {
            Ok(())
        } else {
            Err(SchemaError::UnknownModality(code.to_string()))
        }
    }
}
