//! Default tokenization: whitespace splitting with a per-character fallback
//! for scripts written without word separators.
//!
//! Offsets are counted in Unicode scalar values, not bytes. Callers with an
//! external segmenter can bypass this module entirely and construct documents
//! from explicit token spans.

/// Half-open character span of one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

/// Available tokenizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum TokenizerKind {
    /// Whitespace splitting; characters of unsegmented scripts become
    /// single-character tokens.
    #[default]
    #[serde(rename = "default")]
    Default,
    /// Pure whitespace splitting, for externally pre-tokenized text.
    #[serde(rename = "whitespace")]
    Whitespace,
}

fn is_unsegmented(c: char) -> bool {
    matches!(c,
        '\u{3000}'..='\u{303F}'   // CJK symbols and punctuation
        | '\u{3040}'..='\u{309F}' // hiragana
        | '\u{30A0}'..='\u{30FF}' // katakana
        | '\u{3400}'..='\u{4DBF}' // CJK extension A
        | '\u{4E00}'..='\u{9FFF}' // CJK unified ideographs
        | '\u{F900}'..='\u{FAFF}' // CJK compatibility ideographs
        | '\u{FF00}'..='\u{FFEF}' // halfwidth and fullwidth forms
    )
}

/// Tokenize `text` into character spans.
pub fn tokenize(text: &str, kind: TokenizerKind) -> Vec<CharSpan> {
    let mut spans = Vec::new();
    let mut run_start: Option<usize> = None;
    let mut pos = 0usize;
    for c in text.chars() {
        if c.is_whitespace() {
            if let Some(s) = run_start.take() {
                spans.push(CharSpan { start: s, end: pos });
            }
        } else if kind == TokenizerKind::Default && is_unsegmented(c) {
            if let Some(s) = run_start.take() {
                spans.push(CharSpan { start: s, end: pos });
            }
            spans.push(CharSpan {
                start: pos,
                end: pos + 1,
            });
        } else if run_start.is_none() {
            run_start = Some(pos);
        }
        pos += 1;
    }
    if let Some(s) = run_start {
        spans.push(CharSpan { start: s, end: pos });
    }
    spans
}
