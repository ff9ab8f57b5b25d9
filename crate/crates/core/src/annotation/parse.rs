//! Parser for the inline-markup report format.
//!
//! The grammar is deliberately small: a file is either one bare report or a
//! sequence of `<doc id=".." patient="..">...</doc>` blocks. Inside a report,
//! inline elements named by entity type codes wrap entity spans; they carry
//! `id`, `mod`, `brel`, and `trel` attributes and cannot nest. `&lt; &gt;
//! &amp; &quot;` are the only character references.

use crate::error::{ParseError, SourcePos};
use crate::schema::{EntityType, RelationCategory, RelationType, Schema, ValidationMode};
use crate::tokenize::TokenizerKind;

use super::{Corpus, Document, Entity, Relation, TokenSpan};

struct Scanner {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    col: usize,
}

impl Scanner {
    fn new(text: &str) -> Scanner {
        Scanner {
            chars: text.chars().collect(),
            pos: 0,
            line: 1,
            col: 1,
        }
    }

    fn eof(&self) -> bool {
        self.pos >= self.chars.len()
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn peek_at(&self, offset: usize) -> Option<char> {
        self.chars.get(self.pos + offset).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += 1;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn here(&self) -> SourcePos {
        SourcePos {
            line: self.line,
            column: self.col,
        }
    }

    fn fail(&self, message: impl Into<String>) -> ParseError {
        ParseError::Malformed {
            pos: self.here(),
            message: message.into(),
        }
    }

    /// Whether the input at the cursor starts with `s`.
    fn looking_at(&self, s: &str) -> bool {
        s.chars()
            .enumerate()
            .all(|(i, c)| self.peek_at(i) == Some(c))
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        match self.peek() {
            Some(found) if found == c => {
                self.bump();
                Ok(())
            }
            Some(found) => Err(self.fail(format!("expected `{c}`, found `{found}`"))),
            None => Err(self.fail(format!("expected `{c}`, found end of input"))),
        }
    }

    fn skip_whitespace(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.bump();
        }
    }

    fn read_name(&mut self) -> Result<String, ParseError> {
        let mut name = String::new();
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                name.push(c);
                self.bump();
            } else {
                break;
            }
        }
        if name.is_empty() {
            Err(self.fail("expected a name"))
        } else {
            Ok(name)
        }
    }

    fn read_char_reference(&mut self) -> Result<char, ParseError> {
        let pos = self.here();
        self.expect('&')?;
        let mut name = String::new();
        loop {
            match self.bump() {
                Some(';') => break,
                Some(c) if name.len() < 8 => name.push(c),
                _ => {
                    return Err(ParseError::Malformed {
                        pos,
                        message: "unterminated character reference".into(),
                    })
                }
            }
        }
        match name.as_str() {
            "lt" => Ok('<'),
            "gt" => Ok('>'),
            "amp" => Ok('&'),
            "quot" => Ok('"'),
            other => Err(ParseError::Malformed {
                pos,
                message: format!("unknown character reference `&{other};`"),
            }),
        }
    }

    /// Quoted attribute value with character references resolved.
    fn read_attr_value(&mut self) -> Result<String, ParseError> {
        self.expect('"')?;
        let mut value = String::new();
        loop {
            match self.peek() {
                Some('"') => {
                    self.bump();
                    return Ok(value);
                }
                Some('&') => value.push(self.read_char_reference()?),
                Some('<') => return Err(self.fail("`<` not allowed in attribute value")),
                Some(_) => value.push(self.bump().unwrap()),
                None => return Err(self.fail("unterminated attribute value")),
            }
        }
    }
}

struct PendingEntity {
    id: u32,
    etype: EntityType,
    char_start: usize,
    char_end: usize,
    modality: Option<String>,
    relations: Vec<(RelationType, u32)>,
    pos: SourcePos,
}

#[derive(Default)]
struct RawAttrs {
    id: Option<u32>,
    modality: Option<String>,
    brel: Option<String>,
    trel: Option<String>,
}

fn parse_relation_list(
    value: &str,
    expected: RelationCategory,
    attr: &str,
    pos: SourcePos,
) -> Result<Vec<(RelationType, u32)>, ParseError> {
    let mut out = Vec::new();
    for item in value.split(';') {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        let (code, target) = item.split_once(':').ok_or_else(|| ParseError::Malformed {
            pos,
            message: format!("relation item `{item}` is not `type:targetId`"),
        })?;
        let rtype = RelationType::from_code(code.trim()).map_err(|e| ParseError::Malformed {
            pos,
            message: e.to_string(),
        })?;
        if rtype.category() != expected {
            return Err(ParseError::Malformed {
                pos,
                message: format!("{} relation `{}` not allowed in `{}`", rtype.category(), rtype, attr),
            });
        }
        let target_id: u32 = target.trim().parse().map_err(|_| ParseError::Malformed {
            pos,
            message: format!("bad relation target id `{target}`"),
        })?;
        if target_id == 0 {
            return Err(ParseError::Malformed {
                pos,
                message: "relation target id must be positive".into(),
            });
        }
        out.push((rtype, target_id));
    }
    Ok(out)
}

/// Attributes after the element name, cursor ends past `>`.
fn parse_attrs(scanner: &mut Scanner, allowed: &[&str]) -> Result<Vec<(String, String, SourcePos)>, ParseError> {
    let mut attrs: Vec<(String, String, SourcePos)> = Vec::new();
    loop {
        scanner.skip_whitespace();
        match scanner.peek() {
            Some('>') => {
                scanner.bump();
                return Ok(attrs);
            }
            Some('/') => return Err(scanner.fail("self-closing elements are not allowed")),
            Some(c) if c.is_ascii_alphabetic() => {
                let pos = scanner.here();
                let name = scanner.read_name()?;
                if !allowed.contains(&name.as_str()) {
                    return Err(ParseError::Malformed {
                        pos,
                        message: format!("unknown attribute `{name}`"),
                    });
                }
                if attrs.iter().any(|(n, _, _)| *n == name) {
                    return Err(ParseError::Malformed {
                        pos,
                        message: format!("duplicate attribute `{name}`"),
                    });
                }
                scanner.expect('=')?;
                let value = scanner.read_attr_value()?;
                attrs.push((name, value, pos));
            }
            Some(c) => return Err(scanner.fail(format!("unexpected `{c}` in element tag"))),
            None => return Err(scanner.fail("unterminated element tag")),
        }
    }
}

fn entity_attrs(scanner: &mut Scanner, tag_pos: SourcePos) -> Result<RawAttrs, ParseError> {
    let mut out = RawAttrs::default();
    for (name, value, pos) in parse_attrs(scanner, &["id", "mod", "brel", "trel"])? {
        match name.as_str() {
            "id" => {
                let id: u32 = value.parse().map_err(|_| ParseError::Malformed {
                    pos,
                    message: format!("entity id must be a positive integer, got `{value}`"),
                })?;
                if id == 0 {
                    return Err(ParseError::Malformed {
                        pos,
                        message: "entity id must be positive".into(),
                    });
                }
                out.id = Some(id);
            }
            "mod" => out.modality = Some(value),
            "brel" => out.brel = Some(value),
            "trel" => out.trel = Some(value),
            _ => unreachable!(),
        }
    }
    if out.id.is_none() {
        return Err(ParseError::Malformed {
            pos: tag_pos,
            message: "entity element is missing the `id` attribute".into(),
        });
    }
    Ok(out)
}

/// Parse one report body. Stops at `</doc>` when `in_wrapper` (cursor left on
/// it), or at end of input otherwise.
fn parse_body(
    scanner: &mut Scanner,
    in_wrapper: bool,
) -> Result<(String, Vec<PendingEntity>), ParseError> {
    let mut text = String::new();
    let mut text_chars = 0usize;
    let mut entities: Vec<PendingEntity> = Vec::new();

    loop {
        match scanner.peek() {
            None => {
                if in_wrapper {
                    return Err(scanner.fail("missing `</doc>`"));
                }
                break;
            }
            Some('<') => {
                if scanner.peek_at(1) == Some('/') {
                    if in_wrapper && scanner.looking_at("</doc>") {
                        break;
                    }
                    return Err(scanner.fail("closing tag without matching open tag"));
                }
                let tag_pos = scanner.here();
                scanner.bump(); // <
                let code = scanner.read_name()?;
                let etype = EntityType::from_code(&code).map_err(|e| ParseError::Malformed {
                    pos: tag_pos,
                    message: e.to_string(),
                })?;
                let attrs = entity_attrs(scanner, tag_pos)?;
                let char_start = text_chars;
                // Inner text runs to the matching close tag; nesting is not
                // supported.
                loop {
                    match scanner.peek() {
                        None => return Err(scanner.fail(format!("unterminated <{code}> element"))),
                        Some('<') => {
                            if scanner.peek_at(1) == Some('/') {
                                scanner.bump();
                                scanner.bump();
                                let close_pos = scanner.here();
                                let close = scanner.read_name()?;
                                if close != code {
                                    return Err(ParseError::Malformed {
                                        pos: close_pos,
                                        message: format!(
                                            "mismatched closing tag </{close}> for <{code}>"
                                        ),
                                    });
                                }
                                scanner.expect('>')?;
                                break;
                            }
                            return Err(scanner
                                .fail("nested entity elements are not supported".to_string()));
                        }
                        Some('&') => {
                            text.push(scanner.read_char_reference()?);
                            text_chars += 1;
                        }
                        Some(_) => {
                            text.push(scanner.bump().unwrap());
                            text_chars += 1;
                        }
                    }
                }
                let mut relations = Vec::new();
                if let Some(v) = &attrs.brel {
                    relations.extend(parse_relation_list(
                        v,
                        RelationCategory::Medical,
                        "brel",
                        tag_pos,
                    )?);
                }
                if let Some(v) = &attrs.trel {
                    relations.extend(parse_relation_list(
                        v,
                        RelationCategory::Temporal,
                        "trel",
                        tag_pos,
                    )?);
                }
                entities.push(PendingEntity {
                    id: attrs.id.unwrap(),
                    etype,
                    char_start,
                    char_end: text_chars,
                    modality: attrs.modality,
                    relations,
                    pos: tag_pos,
                });
            }
            Some('&') => {
                text.push(scanner.read_char_reference()?);
                text_chars += 1;
            }
            Some(_) => {
                text.push(scanner.bump().unwrap());
                text_chars += 1;
            }
        }
    }
    Ok((text, entities))
}

/// Map a pending entity's character span onto a token span. Exact alignment
/// is required in strict mode; lenient mode snaps to the overlapping token
/// range with a warning.
fn map_span(
    doc: &Document,
    pending: &PendingEntity,
    mode: ValidationMode,
    warnings: &mut Vec<String>,
) -> Result<TokenSpan, ParseError> {
    let chars: Vec<char> = doc.text.chars().collect();
    let mut s = pending.char_start;
    let mut e = pending.char_end;
    while s < e && chars[s].is_whitespace() {
        s += 1;
    }
    while e > s && chars[e - 1].is_whitespace() {
        e -= 1;
    }
    let covered: Vec<&super::Token> = doc
        .tokens
        .iter()
        .filter(|t| t.char_start < e && t.char_end > s)
        .collect();
    if covered.is_empty() {
        return Err(ParseError::SpanMisaligned { pos: pending.pos });
    }
    let span = TokenSpan::new(covered[0].index, covered.last().unwrap().index + 1);
    let exact = covered[0].char_start == s && covered.last().unwrap().char_end == e;
    if !exact {
        match mode {
            ValidationMode::Strict => return Err(ParseError::SpanMisaligned { pos: pending.pos }),
            ValidationMode::Lenient => warnings.push(format!(
                "entity {} at {} snapped to token boundaries",
                pending.id, pending.pos
            )),
        }
    }
    Ok(span)
}

fn build_document(
    doc_id: &str,
    patient_id: &str,
    text: String,
    pending: Vec<PendingEntity>,
    schema: &Schema,
    mode: ValidationMode,
    tokenizer: TokenizerKind,
    warnings: &mut Vec<String>,
) -> Result<Document, ParseError> {
    let mut doc = Document::new(doc_id, patient_id, text, tokenizer);

    let mut seen = std::collections::BTreeMap::new();
    for p in &pending {
        if let Some(_first) = seen.insert(p.id, p.pos) {
            return Err(ParseError::DuplicateId {
                pos: p.pos,
                id: p.id,
            });
        }
    }
    for p in &pending {
        for &(_, target) in &p.relations {
            if !seen.contains_key(&target) {
                return Err(ParseError::DanglingTarget {
                    pos: p.pos,
                    id: target,
                });
            }
            if target == p.id {
                return Err(ParseError::Malformed {
                    pos: p.pos,
                    message: format!("entity {} relates to itself", p.id),
                });
            }
        }
    }

    for p in &pending {
        let span = map_span(&doc, p, mode, warnings)?;
        doc.entities.push(Entity {
            id: p.id,
            etype: p.etype,
            span,
            modality: p
                .modality
                .clone()
                .unwrap_or_else(|| schema.default_modality().to_string()),
        });
        for &(rtype, target_id) in &p.relations {
            doc.relations.push(Relation {
                source_id: p.id,
                target_id,
                rtype,
            });
        }
    }

    warnings.extend(doc.validate(schema, mode)?);
    Ok(doc)
}

/// Parse a single annotated report. `doc_id`/`patient_id` name the document
/// when the input is a bare report; a `<doc>` wrapper overrides them.
pub fn parse_report(
    input: &str,
    doc_id: &str,
    patient_id: &str,
    schema: &Schema,
    mode: ValidationMode,
) -> Result<(Document, Vec<String>), ParseError> {
    let (corpus, warnings) = parse_corpus_with_fallback(input, doc_id, patient_id, schema, mode)?;
    match corpus.documents.len() {
        1 => Ok((corpus.documents.into_iter().next().unwrap(), warnings)),
        n => Err(ParseError::Invariant(format!(
            "expected exactly one report, found {n}"
        ))),
    }
}

/// Parse an annotated corpus file: either one bare report (named
/// `fallback_doc_id`) or a sequence of `<doc>` blocks.
pub fn parse_corpus(
    input: &str,
    fallback_doc_id: &str,
    schema: &Schema,
    mode: ValidationMode,
) -> Result<(Corpus, Vec<String>), ParseError> {
    parse_corpus_with_fallback(input, fallback_doc_id, fallback_doc_id, schema, mode)
}

fn parse_corpus_with_fallback(
    input: &str,
    fallback_doc_id: &str,
    fallback_patient_id: &str,
    schema: &Schema,
    mode: ValidationMode,
) -> Result<(Corpus, Vec<String>), ParseError> {
    let tokenizer = TokenizerKind::Default;
    let mut warnings = Vec::new();
    let mut scanner = Scanner::new(input);

    // Wrapper detection: `<doc` followed by whitespace or `>`.
    let mut probe = 0;
    while matches!(scanner.peek_at(probe), Some(c) if c.is_whitespace()) {
        probe += 1;
    }
    let wrapped = scanner.peek_at(probe) == Some('<')
        && scanner.peek_at(probe + 1) == Some('d')
        && scanner.peek_at(probe + 2) == Some('o')
        && scanner.peek_at(probe + 3) == Some('c')
        && matches!(scanner.peek_at(probe + 4), Some(c) if c == '>' || c.is_whitespace());

    if !wrapped {
        let (text, pending) = parse_body(&mut scanner, false)?;
        let doc = build_document(
            fallback_doc_id,
            fallback_patient_id,
            text,
            pending,
            schema,
            mode,
            tokenizer,
            &mut warnings,
        )?;
        return Ok((Corpus::new(vec![doc]), warnings));
    }

    let mut documents = Vec::new();
    loop {
        scanner.skip_whitespace();
        if scanner.eof() {
            break;
        }
        let tag_pos = scanner.here();
        scanner.expect('<')?;
        let name = scanner.read_name()?;
        if name != "doc" {
            return Err(ParseError::Malformed {
                pos: tag_pos,
                message: format!("expected <doc>, found <{name}>"),
            });
        }
        let mut doc_id: Option<String> = None;
        let mut patient: Option<String> = None;
        for (name, value, _) in parse_attrs(&mut scanner, &["id", "patient"])? {
            match name.as_str() {
                "id" => doc_id = Some(value),
                "patient" => patient = Some(value),
                _ => unreachable!(),
            }
        }
        let doc_id = doc_id.ok_or_else(|| ParseError::Malformed {
            pos: tag_pos,
            message: "<doc> is missing the `id` attribute".into(),
        })?;
        let patient = patient.unwrap_or_else(|| doc_id.clone());
        let (text, pending) = parse_body(&mut scanner, true)?;
        // cursor sits on "</doc>"
        for _ in 0.."</doc>".len() {
            scanner.bump();
        }
        documents.push(build_document(
            &doc_id,
            &patient,
            text,
            pending,
            schema,
            mode,
            tokenizer,
            &mut warnings,
        )?);
    }

    let corpus = Corpus::new(documents);
    // Cross-document invariant (unique ids).
    let mut ids = std::collections::BTreeSet::new();
    for d in &corpus.documents {
        if !ids.insert(&d.doc_id) {
            return Err(ParseError::Invariant(format!(
                "duplicate doc id `{}`",
                d.doc_id
            )));
        }
    }
    Ok((corpus, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{EntityType, RelationType};

    fn schema() -> Schema {
        Schema::default()
    }

    fn parse(input: &str) -> (Document, Vec<String>) {
        parse_report(input, "d1", "p1", &schema(), ValidationMode::Strict).unwrap()
    }

    #[test]
    fn figure_style_example() {
        let (doc, warnings) = parse(
            r#"<D id="1" mod="positive" brel="region:2">nodules</D> in <A id="2">the lung field</A>"#,
        );
        assert!(warnings.is_empty());
        assert_eq!(doc.text, "nodules in the lung field");
        assert_eq!(doc.entities.len(), 2);
        let d = &doc.entities[0];
        assert_eq!(d.etype, EntityType::D);
        assert_eq!(d.span, TokenSpan::new(0, 1));
        assert_eq!(d.modality, "positive");
        let a = &doc.entities[1];
        assert_eq!(a.etype, EntityType::A);
        assert_eq!(a.span, TokenSpan::new(2, 5));
        assert_eq!(a.modality, "positive"); // schema default
        assert_eq!(
            doc.relations,
            vec![Relation {
                source_id: 1,
                target_id: 2,
                rtype: RelationType::Region
            }]
        );
    }

    #[test]
    fn plain_text_round_trips_byte_exact() {
        let input = "no annotation here\njust text\n";
        let (doc, warnings) = parse(input);
        assert!(warnings.is_empty());
        assert_eq!(doc.text, input);
        assert!(doc.entities.is_empty());
        assert!(doc.relations.is_empty());
    }

    #[test]
    fn character_references_unescape() {
        let (doc, _) = parse("a &lt;tag&gt; &amp; more");
        assert_eq!(doc.text, "a <tag> & more");
    }

    #[test]
    fn temporal_relations_in_trel() {
        let (doc, _) = parse(
            r#"<T-test id="1" trel="on:2">ct scan</T-test> on <TIMEX3 id="2">july 26</TIMEX3>"#,
        );
        assert_eq!(doc.relations[0].rtype, RelationType::On);
    }

    #[test]
    fn medical_relation_in_trel_rejected() {
        let err = parse_report(
            r#"<D id="1" trel="region:2">x</D> <A id="2">y</A>"#,
            "d",
            "p",
            &schema(),
            ValidationMode::Strict,
        )
        .unwrap_err();
        assert!(matches!(err, ParseError::Malformed { .. }), "{err}");
    }

    #[test]
    fn duplicate_entity_id_rejected() {
        let err = parse_report(
            r#"<D id="1">x</D> <A id="1">y</A>"#,
            "d",
            "p",
            &schema(),
            ValidationMode::Strict,
        )
        .unwrap_err();
        assert!(matches!(err, ParseError::DuplicateId { id: 1, .. }));
    }

    #[test]
    fn dangling_target_rejected() {
        let err = parse_report(
            r#"<D id="1" brel="region:7">x</D>"#,
            "d",
            "p",
            &schema(),
            ValidationMode::Strict,
        )
        .unwrap_err();
        assert!(matches!(err, ParseError::DanglingTarget { id: 7, .. }));
    }

    #[test]
    fn nested_entities_rejected() {
        let err = parse_report(
            r#"<D id="1">x <A id="2">y</A></D>"#,
            "d",
            "p",
            &schema(),
            ValidationMode::Strict,
        )
        .unwrap_err();
        match err {
            ParseError::Malformed { message, .. } => assert!(message.contains("nested")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn misaligned_span_strict_errors_lenient_snaps() {
        // entity covers only half of the token "abcd"
        let input = "xy <D id=\"1\">ab</D>cd tail";
        let err =
            parse_report(input, "d", "p", &schema(), ValidationMode::Strict).unwrap_err();
        assert!(matches!(err, ParseError::SpanMisaligned { .. }));

        let (doc, warnings) =
            parse_report(input, "d", "p", &schema(), ValidationMode::Lenient).unwrap();
        assert_eq!(warnings.len(), 1);
        assert_eq!(doc.entities[0].span, TokenSpan::new(1, 2));
        assert_eq!(doc.text, "xy abcd tail");
    }

    #[test]
    fn strict_signature_violation_fails_parse() {
        let input = r#"<C id="1" brel="compare:2">worse</C> vs <C id="2">same</C>"#;
        let err =
            parse_report(input, "d", "p", &schema(), ValidationMode::Strict).unwrap_err();
        assert!(matches!(err, ParseError::SchemaViolations(_)));
        let (_, warnings) =
            parse_report(input, "d", "p", &schema(), ValidationMode::Lenient).unwrap();
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn unknown_modality_strict_vs_lenient() {
        let input = r#"<D id="1" mod="odd">x</D>"#;
        assert!(parse_report(input, "d", "p", &schema(), ValidationMode::Strict).is_err());
        let (doc, warnings) =
            parse_report(input, "d", "p", &schema(), ValidationMode::Lenient).unwrap();
        assert_eq!(doc.entities[0].modality, "odd");
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn doc_wrapper_corpus() {
        let input = "<doc id=\"r1\" patient=\"pa\">one <D id=\"1\">dis</D>\n</doc>\n<doc id=\"r2\">two</doc>";
        let (corpus, _) = parse_corpus(input, "f", &schema(), ValidationMode::Strict).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.documents[0].doc_id, "r1");
        assert_eq!(corpus.documents[0].patient_id, "pa");
        assert_eq!(corpus.documents[0].text, "one dis\n");
        assert_eq!(corpus.documents[1].doc_id, "r2");
        assert_eq!(corpus.documents[1].patient_id, "r2");
    }

    #[test]
    fn duplicate_doc_ids_rejected() {
        let input = "<doc id=\"r1\">a</doc><doc id=\"r1\">b</doc>";
        assert!(parse_corpus(input, "f", &schema(), ValidationMode::Strict).is_err());
    }

    #[test]
    fn error_positions_are_line_column() {
        let input = "line one\nline two <D id=\"0\">x</D>";
        let err =
            parse_report(input, "d", "p", &schema(), ValidationMode::Strict).unwrap_err();
        match err {
            ParseError::Malformed { pos, .. } => {
                assert_eq!(pos.line, 2);
                assert!(pos.column > 10);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_input_is_empty_corpus() {
        let (corpus, _) = parse_corpus("", "f", &schema(), ValidationMode::Strict).unwrap();
        assert_eq!(corpus.len(), 1); // one empty bare report
        assert_eq!(corpus.documents[0].text, "");
    }
}
