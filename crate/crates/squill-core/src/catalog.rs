//! Benchmark-layout corpus loading and deterministic schema rendering.
//!
//! A corpus root contains a schema index (`tables.json`), a pairs file
//! (`pairs.json` or `pairs.jsonl`), and one SQLite file per database under
//! `database/<db_id>/<db_id>.sqlite`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::sqlkit::lexer::strip_ident_quotes;
use crate::sqlkit::{SchemaSubset, SqlQuery};

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("schema index not found at {0}")]
    SchemaIndexNotFound(PathBuf),
    #[error("pairs file not found under {0}")]
    PairsFileNotFound(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed schema entry in {file} (record {index}): {message}")]
    MalformedSchema {
        file: PathBuf,
        index: usize,
        message: String,
    },
    #[error("malformed pair in {file} (record {index}): {message}")]
    MalformedPair {
        file: PathBuf,
        index: usize,
        message: String,
    },
    #[error("pair {pair_id} references unknown db_id {db_id}")]
    DanglingDbId { pair_id: String, db_id: String },
    #[error("catalog {db_id} violates invariant: {message}")]
    InvalidCatalog { db_id: String, message: String },
    #[error("subset references unknown table {0}")]
    UnknownTable(String),
    #[error("subset references unknown column {table}.{column}")]
    UnknownColumn { table: String, column: String },
    #[error("database file unreadable: {0}")]
    Database(#[from] rusqlite::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableSchema {
    pub name: String,
    /// (column name, declared SQL type) in declaration order.
    pub columns: Vec<(String, String)>,
    pub primary_keys: Vec<String>,
    /// (local column, remote table, remote column)
    pub foreign_keys: Vec<(String, String, String)>,
}

impl TableSchema {
    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|(n, _)| n.as_str())
    }

    /// Fuzzy column lookup: exact case-insensitive, then quote-stripped,
    /// then edit distance <= 1. Returns the catalog's original spelling.
    pub fn resolve_column(&self, name: &str) -> Option<&str> {
        resolve_name(self.column_names(), name)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatabaseCatalog {
    pub db_id: String,
    pub tables: Vec<TableSchema>,
    pub db_file: PathBuf,
}

impl DatabaseCatalog {
    pub fn table(&self, name: &str) -> Option<&TableSchema> {
        self.tables
            .iter()
            .find(|t| t.name.eq_ignore_ascii_case(name))
    }

    /// Fuzzy table lookup with the same ladder as [`TableSchema::resolve_column`].
    pub fn resolve_table(&self, name: &str) -> Option<&TableSchema> {
        let resolved = resolve_name(self.tables.iter().map(|t| t.name.as_str()), name)?;
        self.table(resolved)
    }

    /// The whole schema as a subset (every table, every column).
    pub fn full_subset(&self) -> SchemaSubset {
        let mut subset = SchemaSubset::new(Some(self.db_id.clone()));
        for table in &self.tables {
            for (col, _) in &table.columns {
                subset.add_column(&table.name, col);
            }
        }
        subset
    }

    fn validate(&self) -> Result<(), CatalogError> {
        let err = |message: String| CatalogError::InvalidCatalog {
            db_id: self.db_id.clone(),
            message,
        };
        let mut seen = Vec::new();
        for table in &self.tables {
            let lower = table.name.to_lowercase();
            if seen.contains(&lower) {
                return Err(err(format!("duplicate table name {}", table.name)));
            }
            seen.push(lower);
            if table.columns.is_empty() {
                return Err(err(format!("table {} has no columns", table.name)));
            }
            let mut cols = Vec::new();
            for (col, _) in &table.columns {
                let lower = col.to_lowercase();
                if cols.contains(&lower) {
                    return Err(err(format!("duplicate column {}.{}", table.name, col)));
                }
                cols.push(lower);
            }
            for pk in &table.primary_keys {
                if !cols.contains(&pk.to_lowercase()) {
                    return Err(err(format!("primary key {}.{} is not a column", table.name, pk)));
                }
            }
            for (local, remote_table, remote_col) in &table.foreign_keys {
                if !cols.contains(&local.to_lowercase()) {
                    return Err(err(format!("foreign key column {}.{} missing", table.name, local)));
                }
                let Some(remote) = self.table(remote_table) else {
                    return Err(err(format!("foreign key references unknown table {remote_table}")));
                };
                if !remote
                    .column_names()
                    .any(|c| c.eq_ignore_ascii_case(remote_col))
                {
                    return Err(err(format!(
                        "foreign key references unknown column {remote_table}.{remote_col}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn resolve_name<'a>(candidates: impl Iterator<Item = &'a str>, query: &str) -> Option<&'a str> {
    let candidates: Vec<&str> = candidates.collect();
    if let Some(hit) = candidates.iter().find(|c| c.eq_ignore_ascii_case(query)) {
        return Some(hit);
    }
    let unquoted = strip_ident_quotes(query);
    if let Some(hit) = candidates.iter().find(|c| c.eq_ignore_ascii_case(unquoted)) {
        return Some(hit);
    }
    candidates
        .into_iter()
        .find(|c| edit_distance_le1(&c.to_lowercase(), &unquoted.to_lowercase()))
}

/// True when the Levenshtein distance between `a` and `b` is at most 1.
fn edit_distance_le1(a: &str, b: &str) -> bool {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    let (short, long) = if a.len() <= b.len() { (&a, &b) } else { (&b, &a) };
    match long.len() - short.len() {
        0 => short.iter().zip(long.iter()).filter(|(x, y)| x != y).count() <= 1,
        1 => {
            let mut i = 0;
            while i < short.len() && short[i] == long[i] {
                i += 1;
            }
            short[i..] == long[i + 1..]
        }
        _ => false,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusPair {
    pub pair_id: String,
    pub db_id: String,
    pub question: String,
    pub hint: Option<String>,
    pub gold_sql: SqlQuery,
    pub difficulty_label: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub catalogs: BTreeMap<String, DatabaseCatalog>,
    pub pairs: Vec<CorpusPair>,
}

impl Corpus {
    pub fn catalog(&self, db_id: &str) -> Option<&DatabaseCatalog> {
        self.catalogs.get(db_id)
    }

    pub fn pair(&self, pair_id: &str) -> Option<&CorpusPair> {
        self.pairs.iter().find(|p| p.pair_id == pair_id)
    }
}

/// Loads a corpus from a benchmark-layout root and validates every catalog.
pub fn load_corpus(root: &Path) -> Result<Corpus, CatalogError> {
    let index_path = root.join("tables.json");
    if !index_path.exists() {
        return Err(CatalogError::SchemaIndexNotFound(index_path));
    }
    let raw = read_file(&index_path)?;
    let entries: Vec<Value> =
        serde_json::from_str(&raw).map_err(|e| CatalogError::MalformedSchema {
            file: index_path.clone(),
            index: 0,
            message: e.to_string(),
        })?;
    let mut catalogs = BTreeMap::new();
    for (i, entry) in entries.iter().enumerate() {
        let catalog = parse_schema_entry(entry, root).map_err(|message| {
            CatalogError::MalformedSchema {
                file: index_path.clone(),
                index: i,
                message,
            }
        })?;
        catalog.validate()?;
        catalogs.insert(catalog.db_id.clone(), catalog);
    }

    let pairs = load_pairs(root)?;
    for pair in &pairs {
        if !catalogs.contains_key(&pair.db_id) {
            return Err(CatalogError::DanglingDbId {
                pair_id: pair.pair_id.clone(),
                db_id: pair.db_id.clone(),
            });
        }
    }
    Ok(Corpus {
        root: root.to_path_buf(),
        catalogs,
        pairs,
    })
}

fn read_file(path: &Path) -> Result<String, CatalogError> {
    std::fs::read_to_string(path).map_err(|source| CatalogError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses one schema-index object in the widely used benchmark shape:
/// `db_id`, `table_names_original`, `column_names_original` (with table
/// indices), `column_types`, `primary_keys` (column indices, ints or lists),
/// `foreign_keys` (pairs of column indices).
fn parse_schema_entry(entry: &Value, root: &Path) -> Result<DatabaseCatalog, String> {
    let db_id = entry["db_id"]
        .as_str()
        .ok_or("missing db_id")?
        .to_string();
    let table_names: Vec<String> = as_string_vec(&entry["table_names_original"])
        .ok_or("missing table_names_original")?;
    let column_entries = entry["column_names_original"]
        .as_array()
        .ok_or("missing column_names_original")?;
    let column_types = as_string_vec(&entry["column_types"]).unwrap_or_default();

    // global column index -> (table index, column name); index -1 is the
    // star placeholder and owns no table
    let mut columns: Vec<(i64, String)> = Vec::new();
    for c in column_entries {
        let arr = c.as_array().ok_or("column entry is not a pair")?;
        let t = arr
            .first()
            .and_then(Value::as_i64)
            .ok_or("column entry missing table index")?;
        let name = arr
            .get(1)
            .and_then(Value::as_str)
            .ok_or("column entry missing name")?;
        columns.push((t, name.to_string()));
    }

    let mut tables: Vec<TableSchema> = table_names
        .iter()
        .map(|name| TableSchema {
            name: name.clone(),
            columns: Vec::new(),
            primary_keys: Vec::new(),
            foreign_keys: Vec::new(),
        })
        .collect();
    for (global, (t, name)) in columns.iter().enumerate() {
        if *t < 0 {
            continue;
        }
        let ty = column_types.get(global).cloned().unwrap_or_default();
        let table = tables
            .get_mut(*t as usize)
            .ok_or("column references out-of-range table index")?;
        table.columns.push((name.clone(), ty));
    }

    let col_ref = |idx: i64| -> Result<(usize, String), String> {
        let (t, name) = columns
            .get(idx as usize)
            .ok_or("key references out-of-range column index")?;
        if *t < 0 {
            return Err("key references the star placeholder".into());
        }
        Ok((*t as usize, name.clone()))
    };

    if let Some(pks) = entry["primary_keys"].as_array() {
        let mut flat = Vec::new();
        for pk in pks {
            match pk {
                Value::Number(n) => flat.push(n.as_i64().ok_or("bad primary key index")?),
                Value::Array(xs) => {
                    for x in xs {
                        flat.push(x.as_i64().ok_or("bad primary key index")?);
                    }
                }
                _ => return Err("bad primary key entry".into()),
            }
        }
        for idx in flat {
            let (t, name) = col_ref(idx)?;
            tables[t].primary_keys.push(name);
        }
    }
    if let Some(fks) = entry["foreign_keys"].as_array() {
        for fk in fks {
            let arr = fk.as_array().ok_or("bad foreign key entry")?;
            let local = arr.first().and_then(Value::as_i64).ok_or("bad foreign key")?;
            let remote = arr.get(1).and_then(Value::as_i64).ok_or("bad foreign key")?;
            let (lt, lname) = col_ref(local)?;
            let (rt, rname) = col_ref(remote)?;
            let remote_table = tables[rt].name.clone();
            tables[lt].foreign_keys.push((lname, remote_table, rname));
        }
    }

    let db_file = root
        .join("database")
        .join(&db_id)
        .join(format!("{db_id}.sqlite"));
    Ok(DatabaseCatalog {
        db_id,
        tables,
        db_file,
    })
}

fn as_string_vec(v: &Value) -> Option<Vec<String>> {
    v.as_array()
        .map(|xs| xs.iter().filter_map(|x| x.as_str().map(String::from)).collect())
}

fn load_pairs(root: &Path) -> Result<Vec<CorpusPair>, CatalogError> {
    let (path, records): (PathBuf, Vec<Value>) = {
        let json = root.join("pairs.json");
        let jsonl = root.join("pairs.jsonl");
        if json.exists() {
            let raw = read_file(&json)?;
            let v = serde_json::from_str(&raw).map_err(|e| CatalogError::MalformedPair {
                file: json.clone(),
                index: 0,
                message: e.to_string(),
            })?;
            (json, v)
        } else if jsonl.exists() {
            let raw = read_file(&jsonl)?;
            let mut out = Vec::new();
            for (i, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                out.push(serde_json::from_str(line).map_err(|e| CatalogError::MalformedPair {
                    file: jsonl.clone(),
                    index: i,
                    message: e.to_string(),
                })?);
            }
            (jsonl, out)
        } else {
            return Err(CatalogError::PairsFileNotFound(root.to_path_buf()));
        }
    };

    let mut pairs = Vec::new();
    for (i, record) in records.iter().enumerate() {
        let bad = |message: &str| CatalogError::MalformedPair {
            file: path.clone(),
            index: i,
            message: message.to_string(),
        };
        let question = record["question"]
            .as_str()
            .ok_or_else(|| bad("missing question"))?
            .to_string();
        let db_id = record["db_id"]
            .as_str()
            .ok_or_else(|| bad("missing db_id"))?
            .to_string();
        let sql_text = record["query"]
            .as_str()
            .or_else(|| record["SQL"].as_str())
            .ok_or_else(|| bad("missing query/SQL"))?;
        let gold_sql =
            SqlQuery::gold(sql_text).map_err(|e| bad(&format!("bad gold SQL: {e}")))?;
        let pair_id = record["pair_id"]
            .as_str()
            .map(String::from)
            .unwrap_or_else(|| format!("p{i}"));
        pairs.push(CorpusPair {
            pair_id,
            db_id,
            question,
            hint: record["evidence"].as_str().map(String::from),
            gold_sql,
            difficulty_label: record["difficulty"].as_str().map(String::from),
        });
    }
    Ok(pairs)
}

/// Writes the pairs file back out in the array layout `load_corpus` reads.
pub fn write_corpus_pairs(pairs: &[CorpusPair], path: &Path) -> Result<(), CatalogError> {
    let records: Vec<Value> = pairs
        .iter()
        .map(|p| {
            let mut obj = serde_json::Map::new();
            obj.insert("pair_id".into(), p.pair_id.clone().into());
            obj.insert("db_id".into(), p.db_id.clone().into());
            obj.insert("question".into(), p.question.clone().into());
            obj.insert("query".into(), p.gold_sql.text.clone().into());
            if let Some(hint) = &p.hint {
                obj.insert("evidence".into(), hint.clone().into());
            }
            if let Some(d) = &p.difficulty_label {
                obj.insert("difficulty".into(), d.clone().into());
            }
            Value::Object(obj)
        })
        .collect();
    let text = serde_json::to_string_pretty(&records).expect("pairs serialize");
    std::fs::write(path, text).map_err(|source| CatalogError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Renders a deterministic CREATE-TABLE-style schema description, optionally
/// restricted to a subset, followed by up to `example_rows` sample rows per
/// table read from the database file.
pub fn render_schema(
    catalog: &DatabaseCatalog,
    subset: Option<&SchemaSubset>,
    example_rows: usize,
) -> Result<String, CatalogError> {
    if let Some(subset) = subset {
        for (table, cols) in &subset.entries {
            let Some(schema) = catalog.table(table) else {
                return Err(CatalogError::UnknownTable(table.clone()));
            };
            for col in cols {
                if !schema.column_names().any(|c| c.eq_ignore_ascii_case(col)) {
                    return Err(CatalogError::UnknownColumn {
                        table: table.clone(),
                        column: col.clone(),
                    });
                }
            }
        }
    }

    let conn = if example_rows > 0 {
        Some(Connection::open_with_flags(
            &catalog.db_file,
            OpenFlags::SQLITE_OPEN_READ_ONLY,
        )?)
    } else {
        None
    };

    let mut out = String::new();
    for table in &catalog.tables {
        let included_cols: Vec<&(String, String)> = match subset {
            None => table.columns.iter().collect(),
            Some(s) => {
                let Some(cols) = s
                    .entries
                    .iter()
                    .find(|(t, _)| t.eq_ignore_ascii_case(&table.name))
                    .map(|(_, c)| c)
                else {
                    continue;
                };
                if cols.is_empty() {
                    table.columns.iter().collect()
                } else {
                    table
                        .columns
                        .iter()
                        .filter(|(n, _)| cols.iter().any(|c| c.eq_ignore_ascii_case(n)))
                        .collect()
                }
            }
        };
        if included_cols.is_empty() {
            continue;
        }
        writeln!(out, "CREATE TABLE {} (", table.name).unwrap();
        for (name, ty) in &included_cols {
            writeln!(out, "  {name} {ty},").unwrap();
        }
        if !table.primary_keys.is_empty() {
            writeln!(out, "  PRIMARY KEY ({})", table.primary_keys.join(", ")).unwrap();
        }
        for (local, remote_table, remote_col) in &table.foreign_keys {
            writeln!(out, "  FOREIGN KEY ({local}) REFERENCES {remote_table}({remote_col})").unwrap();
        }
        writeln!(out, ");").unwrap();

        if let Some(conn) = &conn {
            let cols: Vec<String> = included_cols.iter().map(|(n, _)| n.clone()).collect();
            let sql = format!(
                "SELECT {} FROM \"{}\" LIMIT {}",
                cols.iter()
                    .map(|c| format!("\"{c}\""))
                    .collect::<Vec<_>>()
                    .join(", "),
                table.name,
                example_rows
            );
            let mut stmt = conn.prepare(&sql)?;
            let ncols = cols.len();
            let mut rows = stmt.query([])?;
            let mut rendered = Vec::new();
            while let Some(row) = rows.next()? {
                let mut vals = Vec::with_capacity(ncols);
                for i in 0..ncols {
                    vals.push(render_value(row.get_ref(i)?));
                }
                rendered.push(format!("-- {}", vals.join(", ")));
            }
            if !rendered.is_empty() {
                writeln!(out, "-- sample rows ({}):", cols.join(", ")).unwrap();
                for line in rendered {
                    writeln!(out, "{line}").unwrap();
                }
            }
        }
        out.push('\n');
    }
    Ok(out)
}

fn render_value(value: ValueRef<'_>) -> String {
    match value {
        ValueRef::Null => "NULL".to_string(),
        ValueRef::Integer(i) => i.to_string(),
        ValueRef::Real(f) => format!("{f}"),
        ValueRef::Text(bytes) => {
            let mut s = String::from("'");
            for &b in bytes {
                let c = b as char;
                if (b"' \t".contains(&b) && b != b' ') || !(0x20..0x7f).contains(&b) {
                    write!(s, "\\x{b:02x}").unwrap();
                } else {
                    s.push(c);
                }
            }
            s.push('\'');
            s
        }
        ValueRef::Blob(bytes) => {
            let mut s = String::from("0x");
            for b in bytes {
                write!(s, "{b:02x}").unwrap();
            }
            s
        }
    }
}
