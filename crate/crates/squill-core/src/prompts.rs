//! Prompt construction for the four tasks plus the noise-filtering
//! discriminator prompt, and parsers for the structured responses.
//!
//! Templates are the contract: byte-identical output for identical inputs.
//! The canonical schema-linking output format is one line per table,
//! `table_name: column1, column2`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::DatabaseCatalog;
use crate::sqlkit::{normalize, Provenance, SchemaSubset, SqlQuery};

/// Default number of sample rows embedded in rendered schema text.
pub const DEFAULT_EXAMPLE_ROWS: usize = 3;

/// Canonical affirmative discriminator response.
pub const A_POS: &str = "The execution results of the SQL query can correctly answer the question.";

const A_NEG_PREFIX: &str = "The execution results of the SQL query cannot correctly answer the question. The correct SQL query should be: ";

/// Canonical negative discriminator response embedding the corrected query.
pub fn a_neg(corrected: &SqlQuery) -> String {
    format!("{A_NEG_PREFIX}{}", corrected.text)
}

const NEGATIVE_VERDICT_PHRASE: &str = "cannot correctly answer";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PromptTask {
    Ts,
    Sl,
    Nc,
    Cw,
    Filter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMeta {
    pub pair_id: String,
    pub db_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub task: PromptTask,
    pub text: String,
    pub meta: PromptMeta,
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("SQL argument is empty")]
    EmptySql,
}

fn hint_block(hint: Option<&str>) -> String {
    match hint {
        Some(h) if !h.is_empty() => format!("### Hint:\n{h}\n\n"),
        _ => String::new(),
    }
}

/// Text2SQL prompt: schema (with sample rows), question, optional hint.
pub fn build_ts_prompt(
    schema_text: &str,
    question: &str,
    hint: Option<&str>,
    meta: PromptMeta,
) -> Result<PromptText, PromptError> {
    if question.trim().is_empty() {
        return Err(PromptError::EmptyQuestion);
    }
    let text = format!(
        "You are a SQL expert. Given the database schema below, write one SQLite query that answers the question.\n\n\
         ### Database schema:\n{schema_text}\n\
         ### Question:\n{question}\n\n\
         {}Respond with only a single SQL statement inside a ```sql fence.\n",
        hint_block(hint)
    );
    Ok(PromptText {
        task: PromptTask::Ts,
        text,
        meta,
    })
}

/// Schema-linking prompt: instructs the canonical one-line-per-table format.
pub fn build_sl_prompt(
    schema_text: &str,
    question: &str,
    hint: Option<&str>,
    meta: PromptMeta,
) -> Result<PromptText, PromptError> {
    if question.trim().is_empty() {
        return Err(PromptError::EmptyQuestion);
    }
    let text = format!(
        "You are a SQL expert. Identify the tables and columns of the database that are relevant to answering the question.\n\n\
         ### Database schema:\n{schema_text}\n\
         ### Question:\n{question}\n\n\
         {}Respond with one line per relevant table, in the form:\ntable_name: column1, column2\n",
        hint_block(hint)
    );
    Ok(PromptText {
        task: PromptTask::Sl,
        text,
        meta,
    })
}

fn nc_body(schema_text: &str, question: &str, sql: &SqlQuery, exception: Option<&str>) -> String {
    let exception_block = match exception {
        Some(e) if !e.is_empty() => format!("### Execution exception:\n{e}\n\n"),
        _ => String::new(),
    };
    format!(
        "You are a SQL expert. Determine whether the execution results of the SQL query can correctly answer the question based on the database.\n\n\
         ### Database schema:\n{schema_text}\n\
         ### Question:\n{question}\n\n\
         ### SQL query:\n{sql}\n\n\
         {exception_block}\
         If the SQL query is correct, respond exactly:\n{A_POS}\n\
         Otherwise respond:\n{A_NEG_PREFIX}<corrected SQL query>\n"
    )
}

/// Noise-correction prompt. The exception section appears only when the
/// executor raised one.
pub fn build_nc_prompt(
    schema_text: &str,
    question: &str,
    sql: &SqlQuery,
    exception: Option<&str>,
    meta: PromptMeta,
) -> Result<PromptText, PromptError> {
    if sql.text.trim().is_empty() {
        return Err(PromptError::EmptySql);
    }
    Ok(PromptText {
        task: PromptTask::Nc,
        text: nc_body(schema_text, question, sql, exception),
        meta,
    })
}

/// Continuation-writing prompt: asks for the complete query, prefix included.
pub fn build_cw_prompt(
    schema_text: &str,
    question: &str,
    partial_sql: &str,
    meta: PromptMeta,
) -> Result<PromptText, PromptError> {
    if partial_sql.trim().is_empty() {
        return Err(PromptError::EmptySql);
    }
    let text = format!(
        "You are a SQL expert. Continue writing the incomplete SQL query into a complete and valid SQLite query that answers the question.\n\n\
         ### Database schema:\n{schema_text}\n\
         ### Question:\n{question}\n\n\
         ### Incomplete SQL query:\n{partial_sql}\n\n\
         Respond with the complete SQL query, including the given prefix, inside a ```sql fence.\n"
    );
    Ok(PromptText {
        task: PromptTask::Cw,
        text,
        meta,
    })
}

/// Discriminator prompt for noisy-correspondence filtering: the NC template
/// with the exception section structurally absent.
pub fn build_filter_prompt(
    schema_text: &str,
    question: &str,
    gold_sql: &SqlQuery,
    meta: PromptMeta,
) -> Result<PromptText, PromptError> {
    if gold_sql.text.trim().is_empty() {
        return Err(PromptError::EmptySql);
    }
    Ok(PromptText {
        task: PromptTask::Filter,
        text: nc_body(schema_text, question, gold_sql, None),
        meta,
    })
}

/// Renders a subset in the canonical schema-linking line format.
pub fn render_sl_subset(subset: &SchemaSubset) -> String {
    let mut out = String::new();
    for (table, cols) in &subset.entries {
        if cols.is_empty() {
            out.push_str(&format!("{table}:\n"));
        } else {
            let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
            out.push_str(&format!("{table}: {}\n", cols.join(", ")));
        }
    }
    out
}

/// Parses canonical `table: col, col` lines, resolving identifiers against
/// the catalog. Lenient: unparseable lines and unknown identifiers are
/// skipped with warnings, and an empty result is allowed.
pub fn parse_sl_response(text: &str, catalog: &DatabaseCatalog) -> (SchemaSubset, Vec<String>) {
    let mut subset = SchemaSubset::new(Some(catalog.db_id.clone()));
    let mut warnings = Vec::new();
    for line in text.lines() {
        let line = line.trim().trim_start_matches(['-', '*', ' ']);
        if line.is_empty() {
            continue;
        }
        let Some((table_part, cols_part)) = line.split_once(':') else {
            warnings.push(format!("unparseable line: {line}"));
            continue;
        };
        let table_name = table_part.trim();
        if table_name.is_empty() || table_name.contains(' ') {
            warnings.push(format!("unparseable line: {line}"));
            continue;
        }
        let Some(table) = catalog.resolve_table(table_name) else {
            warnings.push(format!("unknown table: {table_name}"));
            continue;
        };
        subset.add_table(&table.name);
        for col in cols_part.split(',') {
            let col = col.trim();
            if col.is_empty() {
                continue;
            }
            match table.resolve_column(col) {
                Some(resolved) => subset.add_column(&table.name, resolved),
                None => warnings.push(format!("unknown column: {}.{col}", table.name)),
            }
        }
    }
    (subset, warnings)
}

/// Verdict parsed from a noise-correction or filtering response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NcVerdict {
    pub is_correct: bool,
    pub corrected_sql: Option<SqlQuery>,
}

/// Negative iff the response contains the trained negative phrasing; the
/// corrected SQL is the first extractable statement after the verdict.
pub fn parse_nc_response(text: &str) -> NcVerdict {
    let lower = text.to_lowercase();
    let Some(at) = lower.find(NEGATIVE_VERDICT_PHRASE) else {
        return NcVerdict {
            is_correct: true,
            corrected_sql: None,
        };
    };
    let tail = &text[at + NEGATIVE_VERDICT_PHRASE.len()..];
    NcVerdict {
        is_correct: false,
        corrected_sql: extract_sql_with(tail, Provenance::Corrected).ok(),
    }
}

#[derive(Debug, Error)]
pub enum ExtractSqlError {
    #[error("no SQL statement found in response")]
    NotFound,
}

/// Pulls the first SQL statement out of free-form model output: a fenced
/// block if present, else the first substring starting at SELECT/WITH.
pub fn extract_sql(text: &str) -> Result<SqlQuery, ExtractSqlError> {
    extract_sql_with(text, Provenance::Predicted)
}

fn extract_sql_with(text: &str, provenance: Provenance) -> Result<SqlQuery, ExtractSqlError> {
    if let Some(start) = text.find("```") {
        let after = &text[start + 3..];
        let after = after
            .strip_prefix("sql")
            .or_else(|| after.strip_prefix("SQL"))
            .unwrap_or(after);
        let body = match after.find("```") {
            Some(end) => &after[..end],
            None => after,
        };
        if let Ok(sql) = normalize(body, provenance) {
            return Ok(sql);
        }
    }
    // bare statement fallback: first SELECT or WITH keyword to end of statement
    let lower = text.to_lowercase();
    let start = ["select", "with"]
        .iter()
        .filter_map(|kw| find_word(&lower, kw))
        .min();
    let Some(start) = start else {
        return Err(ExtractSqlError::NotFound);
    };
    let tail = &text[start..];
    let stmt = match tail.find(';') {
        Some(semi) => &tail[..=semi],
        None => tail,
    };
    normalize(stmt, provenance).map_err(|_| ExtractSqlError::NotFound)
}

fn find_word(haystack: &str, word: &str) -> Option<usize> {
    let mut from = 0;
    while let Some(at) = haystack[from..].find(word) {
        let at = from + at;
        let before_ok = at == 0
            || !haystack[..at]
                .chars()
                .next_back()
                .is_some_and(|c| c.is_alphanumeric() || c == '_');
        let after = at + word.len();
        let after_ok = !haystack[after..]
            .chars()
            .next()
            .is_some_and(|c| c.is_alphanumeric() || c == '_');
        if before_ok && after_ok {
            return Some(at);
        }
        from = after;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{DatabaseCatalog, TableSchema};

    fn meta() -> PromptMeta {
        PromptMeta {
            pair_id: "p0".into(),
            db_id: "db".into(),
        }
    }

    fn catalog() -> DatabaseCatalog {
        DatabaseCatalog {
            db_id: "db".into(),
            tables: vec![TableSchema {
                name: "follows".into(),
                columns: vec![
                    ("f1".into(), "number".into()),
                    ("f2".into(), "number".into()),
                ],
                primary_keys: vec!["f1".into(), "f2".into()],
                foreign_keys: vec![],
            }],
            db_file: "/nonexistent".into(),
        }
    }

    #[test]
    fn ts_prompt_is_deterministic_and_contains_inputs() {
        let a = build_ts_prompt("SCHEMA", "How many?", Some("a hint"), meta()).unwrap();
        let b = build_ts_prompt("SCHEMA", "How many?", Some("a hint"), meta()).unwrap();
        assert_eq!(a, b);
        assert!(a.text.contains("SCHEMA"));
        assert!(a.text.contains("How many?"));
        assert!(a.text.contains("a hint"));
    }

    #[test]
    fn ts_prompt_hint_section_optional() {
        let with = build_ts_prompt("S", "Q", Some("H"), meta()).unwrap();
        let without = build_ts_prompt("S", "Q", None, meta()).unwrap();
        assert!(with.text.contains("### Hint:"));
        assert!(!without.text.contains("### Hint:"));
    }

    #[test]
    fn empty_question_is_rejected() {
        assert!(build_ts_prompt("S", "  ", None, meta()).is_err());
    }

    #[test]
    fn nc_prompt_exception_only_when_nonempty() {
        let sql = SqlQuery::gold("SELECT 1").unwrap();
        let without = build_nc_prompt("S", "Q", &sql, Some(""), meta()).unwrap();
        assert!(!without.text.contains("### Execution exception:"));
        let with = build_nc_prompt("S", "Q", &sql, Some("no such column: X"), meta()).unwrap();
        assert!(with.text.contains("no such column: X"));
    }

    #[test]
    fn filter_prompt_never_has_exception_section() {
        let sql = SqlQuery::gold("SELECT 1").unwrap();
        let p = build_filter_prompt("S", "Q", &sql, meta()).unwrap();
        assert!(!p.text.contains("### Execution exception:"));
        let nc = build_nc_prompt("S", "Q", &sql, None, meta()).unwrap();
        assert_eq!(p.text, nc.text);
    }

    #[test]
    fn sl_response_round_trip() {
        let (subset, warnings) = parse_sl_response("follows: f1, f2", &catalog());
        assert!(warnings.is_empty());
        assert_eq!(render_sl_subset(&subset), "follows: f1, f2\n");
    }

    #[test]
    fn sl_response_resolves_case_insensitively() {
        let (subset, _) = parse_sl_response("Follows : F1", &catalog());
        assert!(subset.entries["follows"].contains("f1"));
    }

    #[test]
    fn sl_response_prose_yields_empty_with_warning() {
        let (subset, warnings) = parse_sl_response("I am not sure about this one.", &catalog());
        assert!(subset.is_empty());
        assert!(!warnings.is_empty());
    }

    #[test]
    fn nc_positive_verdict() {
        let v = parse_nc_response(A_POS);
        assert!(v.is_correct);
        assert!(v.corrected_sql.is_none());
    }

    #[test]
    fn nc_negative_verdict_recovers_sql() {
        let gold = SqlQuery::gold("SELECT 1").unwrap();
        let v = parse_nc_response(&a_neg(&gold));
        assert!(!v.is_correct);
        assert_eq!(v.corrected_sql.unwrap().text, "SELECT 1");
    }

    #[test]
    fn nc_negative_without_sql() {
        let v = parse_nc_response("cannot correctly answer. (no sql)");
        assert!(!v.is_correct);
        assert!(v.corrected_sql.is_none());
    }

    #[test]
    fn extract_sql_fenced_and_bare() {
        assert_eq!(
            extract_sql("```sql\nSELECT 1\n```").unwrap().text,
            "SELECT 1"
        );
        assert_eq!(extract_sql("Sure! SELECT 1").unwrap().text, "SELECT 1");
        assert!(extract_sql("I don't know.").is_err());
    }
}
