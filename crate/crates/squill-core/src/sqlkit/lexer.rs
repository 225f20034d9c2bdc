//! A small SQL lexer. Tokens carry byte spans over the input so that
//! truncation can cut the original text at token boundaries.

use std::ops::Range;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LexError {
    #[error("empty SQL text")]
    Empty,
    #[error("unterminated string literal starting at byte {0}")]
    UnterminatedString(usize),
    #[error("unterminated quoted identifier starting at byte {0}")]
    UnterminatedQuote(usize),
    #[error("unbalanced parentheses")]
    UnbalancedParens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Keyword,
    Ident,
    QuotedIdent,
    Number,
    StringLit,
    Star,
    Comma,
    Dot,
    LParen,
    RParen,
    Op,
}

#[derive(Debug, Clone)]
pub struct Token {
    pub kind: TokenKind,
    /// Raw text as written, including surrounding quotes for quoted forms.
    pub text: String,
    pub span: Range<usize>,
}

impl Token {
    pub fn upper(&self) -> String {
        self.text.to_ascii_uppercase()
    }

    pub fn is_kw(&self, kw: &str) -> bool {
        self.kind == TokenKind::Keyword && self.text.eq_ignore_ascii_case(kw)
    }

    /// Identifier text with surrounding quote characters stripped.
    pub fn unquoted(&self) -> &str {
        strip_ident_quotes(&self.text)
    }
}

/// Strips one layer of `"` / backtick / `[ ]` quoting, if present.
pub fn strip_ident_quotes(s: &str) -> &str {
    let b = s.as_bytes();
    if b.len() >= 2 {
        match (b[0], b[b.len() - 1]) {
            (b'"', b'"') | (b'`', b'`') | (b'[', b']') => return &s[1..s.len() - 1],
            _ => {}
        }
    }
    s
}

pub const KEYWORDS: &[&str] = &[
    "ABORT", "ALL", "AND", "ANY", "AS", "ASC", "BETWEEN", "BY", "CASE", "CAST", "COLLATE",
    "CROSS", "CURRENT_DATE", "CURRENT_TIME", "CURRENT_TIMESTAMP", "DELETE", "DESC", "DISTINCT",
    "ELSE", "END", "ESCAPE", "EXCEPT", "EXISTS", "FALSE", "FROM", "FULL", "GLOB", "GROUP",
    "HAVING", "IF", "IIF", "IN", "INNER", "INSERT", "INTERSECT", "INTO", "IS", "ISNULL", "JOIN",
    "LEFT", "LIKE", "LIMIT", "NATURAL", "NOT", "NOTNULL", "NULL", "OFFSET", "ON", "OR", "ORDER",
    "OUTER", "OVER", "PARTITION", "RECURSIVE", "REGEXP", "RIGHT", "SELECT", "SET", "THEN",
    "TRUE", "UNION", "UPDATE", "USING", "VALUES", "WHEN", "WHERE", "WITH",
];

pub fn is_keyword(s: &str) -> bool {
    KEYWORDS.iter().any(|k| k.eq_ignore_ascii_case(s))
}

/// Lexes SQL text into tokens. Comments are skipped; parenthesis balance is
/// checked so downstream scope tracking cannot underflow.
pub fn lex(sql: &str) -> Result<Vec<Token>, LexError> {
    let bytes = sql.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    let mut depth: i64 = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        // -- line comment
        if c == '-' && bytes.get(i + 1) == Some(&b'-') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        // /* block comment */
        if c == '/' && bytes.get(i + 1) == Some(&b'*') {
            let mut j = i + 2;
            while j + 1 < bytes.len() && !(bytes[j] == b'*' && bytes[j + 1] == b'/') {
                j += 1;
            }
            i = (j + 2).min(bytes.len());
            continue;
        }
        let start = i;
        match c {
            '\'' => {
                i += 1;
                loop {
                    if i >= bytes.len() {
                        return Err(LexError::UnterminatedString(start));
                    }
                    if bytes[i] == b'\'' {
                        if bytes.get(i + 1) == Some(&b'\'') {
                            i += 2; // escaped quote
                        } else {
                            i += 1;
                            break;
                        }
                    } else {
                        i += 1;
                    }
                }
                tokens.push(Token {
                    kind: TokenKind::StringLit,
                    text: sql[start..i].to_string(),
                    span: start..i,
                });
            }
            '"' | '`' | '[' => {
                let close = match c {
                    '"' => b'"',
                    '`' => b'`',
                    _ => b']',
                };
                i += 1;
                while i < bytes.len() && bytes[i] != close {
                    i += 1;
                }
                if i >= bytes.len() {
                    return Err(LexError::UnterminatedQuote(start));
                }
                i += 1;
                tokens.push(Token {
                    kind: TokenKind::QuotedIdent,
                    text: sql[start..i].to_string(),
                    span: start..i,
                });
            }
            '(' => {
                depth += 1;
                i += 1;
                tokens.push(Token {
                    kind: TokenKind::LParen,
                    text: "(".into(),
                    span: start..i,
                });
            }
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return Err(LexError::UnbalancedParens);
                }
                i += 1;
                tokens.push(Token {
                    kind: TokenKind::RParen,
                    text: ")".into(),
                    span: start..i,
                });
            }
            ',' => {
                i += 1;
                tokens.push(Token {
                    kind: TokenKind::Comma,
                    text: ",".into(),
                    span: start..i,
                });
            }
            '.' => {
                i += 1;
                tokens.push(Token {
                    kind: TokenKind::Dot,
                    text: ".".into(),
                    span: start..i,
                });
            }
            '*' => {
                i += 1;
                tokens.push(Token {
                    kind: TokenKind::Star,
                    text: "*".into(),
                    span: start..i,
                });
            }
            _ if c.is_ascii_digit() => {
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_alphanumeric()
                        || bytes[i] == b'.'
                        || bytes[i] == b'_')
                {
                    // 1e-5 style exponents
                    if (bytes[i] == b'e' || bytes[i] == b'E')
                        && matches!(bytes.get(i + 1), Some(b'+') | Some(b'-'))
                    {
                        i += 1;
                    }
                    i += 1;
                }
                tokens.push(Token {
                    kind: TokenKind::Number,
                    text: sql[start..i].to_string(),
                    span: start..i,
                });
            }
            _ if c.is_alphabetic() || c == '_' => {
                while i < bytes.len()
                    && ((bytes[i] as char).is_alphanumeric()
                        || bytes[i] == b'_'
                        || bytes[i] == b'$')
                {
                    i += 1;
                }
                let text = &sql[start..i];
                let kind = if is_keyword(text) {
                    TokenKind::Keyword
                } else {
                    TokenKind::Ident
                };
                tokens.push(Token {
                    kind,
                    text: text.to_string(),
                    span: start..i,
                });
            }
            _ => {
                // multi-char operators first
                let two = &sql[i..(i + 2).min(sql.len())];
                let len = if matches!(two, "<=" | ">=" | "<>" | "!=" | "||") {
                    2
                } else {
                    1
                };
                i += len;
                tokens.push(Token {
                    kind: TokenKind::Op,
                    text: sql[start..i].to_string(),
                    span: start..i,
                });
            }
        }
    }
    if depth != 0 {
        return Err(LexError::UnbalancedParens);
    }
    if tokens.is_empty() {
        return Err(LexError::Empty);
    }
    Ok(tokens)
}
