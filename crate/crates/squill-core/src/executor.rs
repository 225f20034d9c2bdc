//! Read-only SQL execution against SQLite files with a wall-clock timeout,
//! plus execution-result comparison (the EX metric core).

use std::path::Path;
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};

use crate::catalog::DatabaseCatalog;
use crate::sqlkit::lexer::{lex, TokenKind};
use crate::sqlkit::SqlQuery;

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

/// A single scalar cell of a result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scalar {
    Null,
    Int(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl Scalar {
    fn from_value(value: ValueRef<'_>) -> Scalar {
        match value {
            ValueRef::Null => Scalar::Null,
            ValueRef::Integer(i) => Scalar::Int(i),
            ValueRef::Real(f) => Scalar::Real(f),
            ValueRef::Text(t) => Scalar::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Scalar::Blob(b.to_vec()),
        }
    }

    fn as_f64(&self) -> Option<f64> {
        match self {
            Scalar::Int(i) => Some(*i as f64),
            Scalar::Real(f) => Some(*f),
            _ => None,
        }
    }
}

pub type Row = Vec<Scalar>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Ok,
    Error,
    Timeout,
}

/// Outcome of executing one SQL statement: result rows on success, the
/// engine's exception text otherwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub status: ExecStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<Row>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exception: Option<String>,
    pub elapsed_ms: u64,
}

impl ExecutionOutcome {
    pub fn is_ok(&self) -> bool {
        self.status == ExecStatus::Ok
    }

    /// Exception text, empty when the query executed successfully.
    pub fn exception_text(&self) -> &str {
        self.exception.as_deref().unwrap_or("")
    }
}

/// Executes `sql` read-only against `db_file`. All failure modes are encoded
/// in the outcome; this never panics or returns an error.
pub fn execute(db_file: &Path, sql: &SqlQuery, timeout_ms: u64) -> ExecutionOutcome {
    let start = Instant::now();
    let fail = |status: ExecStatus, exception: String, start: Instant| ExecutionOutcome {
        status,
        rows: None,
        exception: Some(exception),
        elapsed_ms: start.elapsed().as_millis() as u64,
    };

    let conn = match Connection::open_with_flags(db_file, OpenFlags::SQLITE_OPEN_READ_ONLY) {
        Ok(c) => c,
        Err(e) => return fail(ExecStatus::Error, e.to_string(), start),
    };
    let deadline = start + Duration::from_millis(timeout_ms);
    conn.progress_handler(1_000, Some(move || Instant::now() > deadline));

    let result = (|| -> rusqlite::Result<Vec<Row>> {
        let mut stmt = conn.prepare(&sql.text)?;
        let ncols = stmt.column_count();
        let mut rows = stmt.query([])?;
        let mut out = Vec::new();
        while let Some(row) = rows.next()? {
            let mut tuple = Vec::with_capacity(ncols);
            for i in 0..ncols {
                tuple.push(Scalar::from_value(row.get_ref(i)?));
            }
            out.push(tuple);
        }
        Ok(out)
    })();

    match result {
        Ok(rows) => ExecutionOutcome {
            status: ExecStatus::Ok,
            rows: Some(rows),
            exception: None,
            elapsed_ms: start.elapsed().as_millis() as u64,
        },
        Err(e) => {
            let interrupted = matches!(
                &e,
                rusqlite::Error::SqliteFailure(err, _)
                    if err.code == rusqlite::ErrorCode::OperationInterrupted
            );
            if interrupted && Instant::now() > deadline {
                fail(ExecStatus::Timeout, "timeout".to_string(), start)
            } else {
                fail(ExecStatus::Error, e.to_string(), start)
            }
        }
    }
}

const REL_TOLERANCE: f64 = 1e-6;

fn scalars_match(a: &Scalar, b: &Scalar) -> bool {
    match (a, b) {
        (Scalar::Null, Scalar::Null) => true,
        (Scalar::Text(x), Scalar::Text(y)) => x == y,
        (Scalar::Blob(x), Scalar::Blob(y)) => x == y,
        _ => match (a.as_f64(), b.as_f64()) {
            (Some(x), Some(y)) => {
                let scale = x.abs().max(y.abs());
                (x - y).abs() <= REL_TOLERANCE * scale.max(1.0)
            }
            _ => false,
        },
    }
}

fn rows_match(a: &Row, b: &Row) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| scalars_match(x, y))
}

/// Canonical sort key so multiset comparison can sort both sides identically.
fn sort_rows(rows: &mut [Row]) {
    rows.sort_by(|a, b| {
        for (x, y) in a.iter().zip(b.iter()) {
            let ord = scalar_cmp(x, y);
            if ord != std::cmp::Ordering::Equal {
                return ord;
            }
        }
        a.len().cmp(&b.len())
    });
}

fn scalar_cmp(a: &Scalar, b: &Scalar) -> std::cmp::Ordering {
    use std::cmp::Ordering;
    fn rank(s: &Scalar) -> u8 {
        match s {
            Scalar::Null => 0,
            Scalar::Int(_) | Scalar::Real(_) => 1,
            Scalar::Text(_) => 2,
            Scalar::Blob(_) => 3,
        }
    }
    match (a, b) {
        (Scalar::Text(x), Scalar::Text(y)) => x.cmp(y),
        (Scalar::Blob(x), Scalar::Blob(y)) => x.cmp(y),
        _ => match (a.as_f64(), b.as_f64()) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            _ => rank(a).cmp(&rank(b)).then(Ordering::Equal),
        },
    }
}

/// Compares two execution outcomes. Non-ok outcomes never match. Row tuples
/// compare as a multiset unless `order_sensitive`; numeric cells use relative
/// tolerance 1e-6, text compares byte-exact.
pub fn results_match(gold: &ExecutionOutcome, pred: &ExecutionOutcome, order_sensitive: bool) -> bool {
    let (Some(gold_rows), Some(pred_rows)) = (&gold.rows, &pred.rows) else {
        return false;
    };
    if !gold.is_ok() || !pred.is_ok() || gold_rows.len() != pred_rows.len() {
        return false;
    }
    if order_sensitive {
        gold_rows.iter().zip(pred_rows).all(|(a, b)| rows_match(a, b))
    } else {
        let mut a = gold_rows.clone();
        let mut b = pred_rows.clone();
        sort_rows(&mut a);
        sort_rows(&mut b);
        a.iter().zip(&b).all(|(x, y)| rows_match(x, y))
    }
}

/// True when the query's outermost statement has an ORDER BY clause.
pub fn has_toplevel_order_by(sql: &SqlQuery) -> bool {
    let Ok(tokens) = lex(&sql.text) else {
        return false;
    };
    let mut depth = 0usize;
    for pair in tokens.windows(2) {
        match pair[0].kind {
            TokenKind::LParen => depth += 1,
            TokenKind::RParen => depth = depth.saturating_sub(1),
            _ => {}
        }
        if depth == 0 && pair[0].is_kw("ORDER") && pair[1].is_kw("BY") {
            return true;
        }
    }
    false
}

/// Execution accuracy for one pair: executes gold and prediction and compares
/// results. Order sensitivity follows the gold query's outermost ORDER BY.
pub fn ex_for_pair(
    catalog: &DatabaseCatalog,
    gold_sql: &SqlQuery,
    pred_sql: &SqlQuery,
    timeout_ms: u64,
) -> bool {
    let gold = execute(&catalog.db_file, gold_sql, timeout_ms);
    if !gold.is_ok() {
        log::warn!(
            "gold SQL failed on {}: {} -- scored false, corpus defect",
            catalog.db_id,
            gold.exception_text()
        );
        return false;
    }
    let pred = execute(&catalog.db_file, pred_sql, timeout_ms);
    results_match(&gold, &pred, has_toplevel_order_by(gold_sql))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sqlkit::SqlQuery;

    fn mem_db() -> tempfile::NamedTempFile {
        let file = tempfile::NamedTempFile::new().unwrap();
        let conn = Connection::open(file.path()).unwrap();
        conn.execute_batch(
            "CREATE TABLE t (x INTEGER, y TEXT);
             INSERT INTO t VALUES (1, 'a'), (2, 'b');",
        )
        .unwrap();
        file
    }

    #[test]
    fn constant_query_returns_rows() {
        let db = mem_db();
        let out = execute(db.path(), &SqlQuery::gold("SELECT 1").unwrap(), 1000);
        assert!(out.is_ok());
        assert_eq!(out.exception_text(), "");
        assert_eq!(out.rows.unwrap(), vec![vec![Scalar::Int(1)]]);
    }

    #[test]
    fn syntax_error_is_captured() {
        let db = mem_db();
        let out = execute(db.path(), &SqlQuery::gold("SELEC 1").unwrap(), 1000);
        assert_eq!(out.status, ExecStatus::Error);
        assert!(out.exception_text().contains("syntax"));
    }

    #[test]
    fn runaway_query_times_out() {
        let db = mem_db();
        let sql = SqlQuery::gold(
            "WITH RECURSIVE r(x) AS (SELECT 1 UNION ALL SELECT x+1 FROM r) SELECT count(*) FROM r",
        )
        .unwrap();
        let out = execute(db.path(), &sql, 100);
        assert_eq!(out.status, ExecStatus::Timeout);
        assert_eq!(out.exception_text(), "timeout");
    }

    #[test]
    fn write_statements_are_rejected() {
        let db = mem_db();
        let out = execute(db.path(), &SqlQuery::gold("DELETE FROM t").unwrap(), 1000);
        assert_eq!(out.status, ExecStatus::Error);
    }

    #[test]
    fn multiset_matching_ignores_order() {
        let db = mem_db();
        let a = execute(db.path(), &SqlQuery::gold("SELECT x FROM t ORDER BY x").unwrap(), 1000);
        let b = execute(db.path(), &SqlQuery::gold("SELECT x FROM t ORDER BY x DESC").unwrap(), 1000);
        assert!(results_match(&a, &b, false));
        assert!(!results_match(&a, &b, true));
    }

    #[test]
    fn error_outcomes_never_match() {
        let db = mem_db();
        let ok = execute(db.path(), &SqlQuery::gold("SELECT 1").unwrap(), 1000);
        let err = execute(db.path(), &SqlQuery::gold("SELEC 1").unwrap(), 1000);
        assert!(!results_match(&ok, &err, false));
        assert!(results_match(&ok, &ok, false));
    }

    #[test]
    fn numeric_tolerance_applies() {
        let a = ExecutionOutcome {
            status: ExecStatus::Ok,
            rows: Some(vec![vec![Scalar::Real(1.0)]]),
            exception: None,
            elapsed_ms: 0,
        };
        let b = ExecutionOutcome {
            status: ExecStatus::Ok,
            rows: Some(vec![vec![Scalar::Real(1.0 + 1e-9)]]),
            exception: None,
            elapsed_ms: 0,
        };
        assert!(results_match(&a, &b, false));
    }

    #[test]
    fn toplevel_order_by_detection() {
        let with = SqlQuery::gold("SELECT x FROM t ORDER BY x").unwrap();
        let nested =
            SqlQuery::gold("SELECT x FROM (SELECT x FROM t ORDER BY x)").unwrap();
        assert!(has_toplevel_order_by(&with));
        assert!(!has_toplevel_order_by(&nested));
    }
}
