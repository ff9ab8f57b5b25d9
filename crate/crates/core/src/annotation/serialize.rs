//! Canonical serializer for annotated reports.
//!
//! Output is deterministic: attributes in the order `id, mod, brel, trel`,
//! relation lists sorted by (type, target id), the modality attribute only
//! present when it differs from the schema default. Parsing the output
//! reproduces the document structurally.

use crate::error::SerializeError;
use crate::schema::{RelationCategory, Schema, ValidationMode};

use super::{Corpus, Document, Entity};

fn escape_text(out: &mut String, text: &str) {
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            _ => out.push(c),
        }
    }
}

fn escape_attr(out: &mut String, value: &str) {
    for c in value.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
}

fn relation_attr(doc: &Document, entity: &Entity, category: RelationCategory) -> Option<String> {
    let mut rels: Vec<_> = doc
        .relations
        .iter()
        .filter(|r| r.source_id == entity.id && r.category() == category)
        .collect();
    if rels.is_empty() {
        return None;
    }
    rels.sort_by_key(|r| (r.rtype, r.target_id));
    Some(
        rels.iter()
            .map(|r| format!("{}:{}", r.rtype, r.target_id))
            .collect::<Vec<_>>()
            .join(";"),
    )
}

fn write_entity(out: &mut String, doc: &Document, entity: &Entity, schema: &Schema, body: &str) {
    out.push('<');
    out.push_str(entity.etype.code());
    out.push_str(&format!(" id=\"{}\"", entity.id));
    if entity.modality != schema.default_modality() {
        out.push_str(" mod=\"");
        escape_attr(out, &entity.modality);
        out.push('"');
    }
    if let Some(v) = relation_attr(doc, entity, RelationCategory::Medical) {
        out.push_str(" brel=\"");
        escape_attr(out, &v);
        out.push('"');
    }
    if let Some(v) = relation_attr(doc, entity, RelationCategory::Temporal) {
        out.push_str(" trel=\"");
        escape_attr(out, &v);
        out.push('"');
    }
    out.push('>');
    escape_text(out, body);
    out.push_str("</");
    out.push_str(entity.etype.code());
    out.push('>');
}

/// Serialize one report body (no `<doc>` wrapper).
pub fn serialize_report(doc: &Document, schema: &Schema) -> Result<String, SerializeError> {
    doc.validate(schema, ValidationMode::Lenient)
        .map_err(|e| SerializeError::Invariant(e.to_string()))?;

    let chars: Vec<char> = doc.text.chars().collect();
    let mut entities: Vec<&Entity> = doc.entities.iter().collect();
    entities.sort_by_key(|e| e.span);

    let mut out = String::with_capacity(doc.text.len() * 2);
    let mut cursor = 0usize; // char offset into text
    for e in entities {
        let start = doc.tokens[e.span.start].char_start;
        let end = doc.tokens[e.span.end - 1].char_end;
        let before: String = chars[cursor..start].iter().collect();
        escape_text(&mut out, &before);
        let body: String = chars[start..end].iter().collect();
        write_entity(&mut out, doc, e, schema, &body);
        cursor = end;
    }
    let tail: String = chars[cursor..].iter().collect();
    escape_text(&mut out, &tail);
    Ok(out)
}

/// Serialize a corpus as a sequence of `<doc id=".." patient="..">` blocks.
pub fn serialize_corpus(corpus: &Corpus, schema: &Schema) -> Result<String, SerializeError> {
    let mut out = String::new();
    for doc in &corpus.documents {
        out.push_str("<doc id=\"");
        escape_attr(&mut out, &doc.doc_id);
        out.push_str("\" patient=\"");
        escape_attr(&mut out, &doc.patient_id);
        out.push_str("\">");
        out.push_str(&serialize_report(doc, schema)?);
        out.push_str("</doc>\n");
    }
    Ok(out)
}
