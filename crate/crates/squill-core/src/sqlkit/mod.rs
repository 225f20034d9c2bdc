//! SQL structural analysis: normalization, schema-element extraction,
//! subset merging, difficulty grading, and token-level truncation.

pub mod extract;
pub mod lexer;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use extract::{extract_schema_elements, Extraction, ResolutionWarning};
pub use lexer::{lex, LexError, Token, TokenKind};

#[derive(Debug, Error)]
pub enum SqlError {
    #[error("SQL text is empty after normalization")]
    EmptyAfterNormalize,
    #[error("cannot truncate a single-token query")]
    SingleToken,
    #[error(transparent)]
    Lex(#[from] LexError),
    #[error("schema subsets belong to different databases: {0} vs {1}")]
    SubsetDbMismatch(String, String),
}

/// Where a SQL string came from in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Gold,
    Predicted,
    Corrected,
    Continued,
}

/// Normalized SQL text plus a provenance tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlQuery {
    pub text: String,
    pub provenance: Provenance,
}

impl SqlQuery {
    pub fn gold(text: &str) -> Result<Self, SqlError> {
        normalize(text, Provenance::Gold)
    }

    pub fn tokens(&self) -> Result<Vec<Token>, LexError> {
        lex(&self.text)
    }
}

impl std::fmt::Display for SqlQuery {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.text)
    }
}

/// Collapses whitespace, strips code fences and trailing semicolons.
/// String-literal and quoted-identifier contents are preserved byte-exactly.
pub fn normalize(sql: &str, provenance: Provenance) -> Result<SqlQuery, SqlError> {
    let stripped = strip_fences(sql);
    let mut out = String::with_capacity(stripped.len());
    let mut chars = stripped.chars().peekable();
    let mut pending_space = false;
    while let Some(c) = chars.next() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        match c {
            '\'' => {
                out.push(c);
                // copy until the closing quote, honoring '' escapes
                while let Some(n) = chars.next() {
                    out.push(n);
                    if n == '\'' {
                        if chars.peek() == Some(&'\'') {
                            out.push(chars.next().unwrap());
                        } else {
                            break;
                        }
                    }
                }
            }
            '"' | '`' | '[' => {
                let close = match c {
                    '"' => '"',
                    '`' => '`',
                    _ => ']',
                };
                out.push(c);
                for n in chars.by_ref() {
                    out.push(n);
                    if n == close {
                        break;
                    }
                }
            }
            _ => out.push(c),
        }
    }
    while out.ends_with(';') {
        out.pop();
        while out.ends_with(' ') {
            out.pop();
        }
    }
    if out.is_empty() {
        return Err(SqlError::EmptyAfterNormalize);
    }
    Ok(SqlQuery {
        text: out,
        provenance,
    })
}

fn strip_fences(sql: &str) -> &str {
    let t = sql.trim();
    if let Some(rest) = t.strip_prefix("```") {
        // drop an optional language tag on the fence line
        let body = match rest.split_once('\n') {
            Some((tag, body)) if tag.trim().chars().all(|c| c.is_ascii_alphanumeric()) => body,
            _ => rest,
        };
        return body.strip_suffix("```").unwrap_or(body);
    }
    t
}

/// A set of (table, columns) selections over one database. An empty column
/// set means the table is selected without specific columns.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SchemaSubset {
    /// Database this subset was resolved against, when known.
    pub db_id: Option<String>,
    pub entries: BTreeMap<String, BTreeSet<String>>,
}

impl SchemaSubset {
    pub fn new(db_id: Option<String>) -> Self {
        SchemaSubset {
            db_id,
            entries: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn add_table(&mut self, table: &str) {
        self.entries.entry(table.to_string()).or_default();
    }

    pub fn add_column(&mut self, table: &str, column: &str) {
        self.entries
            .entry(table.to_string())
            .or_default()
            .insert(column.to_string());
    }

    pub fn tables(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// True when every entry of `other` is contained in `self`.
    pub fn contains(&self, other: &SchemaSubset) -> bool {
        other.entries.iter().all(|(t, cols)| {
            self.entries
                .get(t)
                .is_some_and(|own| cols.is_subset(own))
        })
    }
}

/// Table-wise union of two subsets; per-table column sets are unioned.
pub fn merge(a: &SchemaSubset, b: &SchemaSubset) -> Result<SchemaSubset, SqlError> {
    if let (Some(da), Some(db)) = (&a.db_id, &b.db_id) {
        if da != db {
            return Err(SqlError::SubsetDbMismatch(da.clone(), db.clone()));
        }
    }
    let mut out = a.clone();
    if out.db_id.is_none() {
        out.db_id = b.db_id.clone();
    }
    for (table, cols) in &b.entries {
        let entry = out.entries.entry(table.clone()).or_default();
        entry.extend(cols.iter().cloned());
    }
    Ok(out)
}

/// Query difficulty by distinct physical table count: 1, 2, or >2 tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HardnessLevel {
    Simple = 1,
    Medium = 2,
    Hard = 3,
}

impl HardnessLevel {
    pub fn from_table_count(n: usize) -> Self {
        match n {
            0 | 1 => HardnessLevel::Simple,
            2 => HardnessLevel::Medium,
            _ => HardnessLevel::Hard,
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

/// Grades a query by the number of distinct physical tables it references
/// anywhere, including subqueries and set-operation branches.
pub fn difficulty(
    sql: &SqlQuery,
    catalog: &crate::catalog::DatabaseCatalog,
) -> Result<HardnessLevel, SqlError> {
    let extraction = extract_schema_elements(sql, catalog)?;
    Ok(HardnessLevel::from_table_count(
        extraction.subset.entries.len(),
    ))
}

/// Strategy for building the incomplete query handed to continuation writing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RefinementStrategy {
    /// The literal token `SELECT`.
    #[default]
    SelectOnly,
    /// The first half of the query's tokens (rounded up).
    HalfPrefix,
}

/// Cuts the normalized query after the k-th token, k drawn uniformly from
/// [1, token_count-1] by a seeded generator. The result is a strict prefix.
pub fn truncate_random(sql: &SqlQuery, seed: u64) -> Result<String, SqlError> {
    let tokens = lex(&sql.text)?;
    if tokens.len() < 2 {
        return Err(SqlError::SingleToken);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(1..tokens.len());
    Ok(prefix_at(&sql.text, &tokens, k))
}

/// Prefix for continuation refinement. Queries not starting with SELECT/WITH
/// fall back to the bare `SELECT` prefix.
pub fn truncate_for_refinement(sql: &SqlQuery, strategy: RefinementStrategy) -> String {
    let tokens = match lex(&sql.text) {
        Ok(t) => t,
        Err(_) => return "SELECT".to_string(),
    };
    if !(tokens[0].is_kw("SELECT") || tokens[0].is_kw("WITH")) {
        return "SELECT".to_string();
    }
    match strategy {
        RefinementStrategy::SelectOnly => "SELECT".to_string(),
        RefinementStrategy::HalfPrefix => {
            let k = tokens.len().div_ceil(2);
            prefix_at(&sql.text, &tokens, k)
        }
    }
}

fn prefix_at(text: &str, tokens: &[Token], k: usize) -> String {
    let end = tokens[k - 1].span.end;
    text[..end].to_string()
}
