//! Lexer for Java-like source lines.
//!
//! The lexer is intentionally shallow: it knows about identifiers, numbers,
//! quoted literals and single-character symbols. It is total, so any input
//! (including malformed code) produces a token sequence.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Identifier,
    Number,
    StringLiteral,
    Operator,
    Punctuation,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_' || c == '$'
}

fn is_ident_continue(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '$'
}

// Digits, dots, hex digits and type suffixes (`0x1F`, `1.5f`, `10L`).
fn is_number_continue(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '.' || c == '_'
}

fn is_punctuation(c: char) -> bool {
    matches!(c, '(' | ')' | '{' | '}' | '[' | ']' | ';' | ',' | '.' | '@')
}

/// Splits `text` into tokens. Whitespace is discarded.
///
/// Quoted literals (`"..."` and `'...'`) are kept whole, honoring backslash
/// escapes. A literal left open runs to the end of its line.
pub fn tokenize_code(text: &str) -> Vec<Token> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    let end_of = |idx: usize| -> usize { chars.get(idx).map_or(text.len(), |&(b, _)| b) };

    while i < chars.len() {
        let (start, c) = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let kind;
        let mut j = i + 1;
        if is_ident_start(c) {
            while j < chars.len() && is_ident_continue(chars[j].1) {
                j += 1;
            }
            kind = TokenKind::Identifier;
        } else if c.is_ascii_digit() {
            while j < chars.len() && is_number_continue(chars[j].1) {
                j += 1;
            }
            kind = TokenKind::Number;
        } else if c == '"' || c == '\'' {
            while j < chars.len() {
                let d = chars[j].1;
                if d == '\n' || d == '\r' {
                    break;
                }
                j += 1;
                if d == c {
                    break;
                }
                if d == '\\' && j < chars.len() && chars[j].1 != '\n' && chars[j].1 != '\r' {
                    j += 1;
                }
            }
            kind = TokenKind::StringLiteral;
        } else if is_punctuation(c) {
            kind = TokenKind::Punctuation;
        } else {
            kind = TokenKind::Operator;
        }
        tokens.push(Token {
            text: text[start..end_of(j)].to_string(),
            kind,
        });
        i = j;
    }
    tokens
}

/// Token texts only; the form used by metrics and retrieval.
pub fn token_texts(text: &str) -> Vec<String> {
    tokenize_code(text).into_iter().map(|t| t.text).collect()
}

pub fn token_count(text: &str) -> usize {
    tokenize_code(text).len()
}
