//! Extraction of referenced schema elements from SQL text.
//!
//! Works on the token stream with lightweight scope tracking: every
//! parenthesized SELECT/WITH opens a nested scope, FROM/JOIN clauses bind
//! sources (physical tables, CTEs, derived tables) with their aliases, and
//! column references resolve against the source chain. Identifier resolution
//! uses a three-step ladder: exact case-insensitive match, quote-stripped
//! match, then edit distance <= 1. Unresolvable identifiers are dropped and
//! recorded as warnings.

use serde::{Deserialize, Serialize};

use crate::catalog::DatabaseCatalog;
use crate::sqlkit::lexer::{lex, Token, TokenKind};
use crate::sqlkit::{SchemaSubset, SqlError, SqlQuery};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolutionWarning {
    pub identifier: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub subset: SchemaSubset,
    pub warnings: Vec<ResolutionWarning>,
}

#[derive(Debug, Clone)]
enum SourceKind {
    /// Canonical table name from the catalog.
    Physical(String),
    Cte,
    Derived,
    Unknown,
}

#[derive(Debug, Clone)]
struct Source {
    alias: Option<String>,
    name: String,
    kind: SourceKind,
}

#[derive(Debug, Default)]
struct Scope {
    parent: Option<usize>,
    sources: Vec<Source>,
}

/// Returns every table and column the query references, anywhere in the
/// statement. For a `COUNT(*)` item the primary keys of the counted scope's
/// tables are added instead of a star.
pub fn extract_schema_elements(
    sql: &SqlQuery,
    catalog: &DatabaseCatalog,
) -> Result<Extraction, SqlError> {
    let tokens = lex(&sql.text)?;
    let n = tokens.len();
    let mut warnings = Vec::new();
    let mut subset = SchemaSubset::new(Some(catalog.db_id.clone()));
    let mut consumed = vec![false; n];

    // scope assignment: a '(' directly followed by SELECT/WITH opens a scope
    let mut scope_of = vec![0usize; n];
    let mut scopes: Vec<Scope> = vec![Scope::default()];
    {
        let mut stack = vec![0usize];
        let mut paren_opens_scope: Vec<bool> = Vec::new();
        for i in 0..n {
            match tokens[i].kind {
                TokenKind::LParen => {
                    scope_of[i] = *stack.last().unwrap();
                    let opens = tokens
                        .get(i + 1)
                        .map(|t| t.is_kw("SELECT") || t.is_kw("WITH"))
                        .unwrap_or(false);
                    if opens {
                        let id = scopes.len();
                        scopes.push(Scope {
                            parent: Some(*stack.last().unwrap()),
                            sources: Vec::new(),
                        });
                        stack.push(id);
                    }
                    paren_opens_scope.push(opens);
                }
                TokenKind::RParen => {
                    if paren_opens_scope.pop() == Some(true) {
                        stack.pop();
                    }
                    scope_of[i] = *stack.last().unwrap();
                }
                _ => scope_of[i] = *stack.last().unwrap(),
            }
        }
    }

    // CTE names; definition-name tokens are consumed so they are not read
    // as column references
    let mut cte_names: Vec<String> = Vec::new();
    let mut i = 0;
    while i < n {
        if tokens[i].is_kw("WITH") {
            let mut j = i + 1;
            if j < n && tokens[j].is_kw("RECURSIVE") {
                j += 1;
            }
            loop {
                if j >= n || !is_ident(&tokens[j]) {
                    break;
                }
                cte_names.push(tokens[j].unquoted().to_lowercase());
                consumed[j] = true;
                j += 1;
                if j < n && tokens[j].kind == TokenKind::LParen {
                    j = skip_parens(&tokens, j);
                }
                if j < n && tokens[j].is_kw("AS") {
                    j += 1;
                }
                if j < n && tokens[j].kind == TokenKind::LParen {
                    j = skip_parens(&tokens, j);
                }
                if j < n && tokens[j].kind == TokenKind::Comma {
                    j += 1;
                } else {
                    break;
                }
            }
            i = j;
        } else {
            i += 1;
        }
    }

    // FROM/JOIN sources per scope
    let mut i = 0;
    while i < n {
        if !consumed[i] && (tokens[i].is_kw("FROM") || tokens[i].is_kw("JOIN")) {
            let from = tokens[i].is_kw("FROM");
            let scope = scope_of[i];
            let mut j = i + 1;
            loop {
                let start = j;
                let Some((next, source)) =
                    parse_source(&tokens, j, catalog, &cte_names, &mut warnings, &mut subset)
                else {
                    break;
                };
                if tokens[start].kind == TokenKind::LParen {
                    // derived table: keep the subquery tokens live so its own
                    // FROM clause and columns are still processed
                    let close = skip_parens(&tokens, start) - 1;
                    consumed[start] = true;
                    consumed[close] = true;
                    for k in close + 1..next {
                        consumed[k] = true;
                    }
                } else {
                    for k in start..next {
                        consumed[k] = true;
                    }
                }
                scopes[scope].sources.push(source);
                j = next;
                // comma-separated source lists only after FROM
                if from && j < n && tokens[j].kind == TokenKind::Comma && scope_of[j] == scope {
                    j += 1;
                } else {
                    break;
                }
            }
        }
        i += 1;
    }

    // qualified references: alias.column / table.column / alias.*
    for i in 0..n {
        if consumed[i] || !is_ident(&tokens[i]) {
            continue;
        }
        if !(i + 2 < n && tokens[i + 1].kind == TokenKind::Dot) {
            continue;
        }
        let target = &tokens[i + 2];
        if !(is_ident(target) || target.kind == TokenKind::Star) {
            continue;
        }
        let qualifier = tokens[i].unquoted();
        let table = lookup_source(&scopes, scope_of[i], qualifier)
            .or_else(|| {
                // qualifier naming a catalog table outside any parsed source
                catalog
                    .resolve_table(qualifier)
                    .map(|t| SourceKind::Physical(t.name.clone()))
            });
        match table {
            Some(SourceKind::Physical(table_name)) => {
                subset.add_table(&table_name);
                if target.kind != TokenKind::Star {
                    let schema = catalog.table(&table_name).expect("resolved table");
                    match schema.resolve_column(target.unquoted()) {
                        Some(col) => subset.add_column(&table_name, col),
                        None => warnings.push(ResolutionWarning {
                            identifier: format!("{}.{}", qualifier, target.text),
                            reason: format!("no such column in table {table_name}"),
                        }),
                    }
                }
            }
            Some(_) => {} // CTE or derived-table columns carry no schema entities
            None => warnings.push(ResolutionWarning {
                identifier: qualifier.to_string(),
                reason: "unresolvable qualifier".to_string(),
            }),
        }
        consumed[i] = true;
        consumed[i + 1] = true;
        consumed[i + 2] = true;
    }

    // COUNT(*) -> primary keys of the counted scope's tables
    for i in 0..n {
        if is_ident(&tokens[i])
            && tokens[i].text.eq_ignore_ascii_case("count")
            && i + 3 < n
            && tokens[i + 1].kind == TokenKind::LParen
            && tokens[i + 2].kind == TokenKind::Star
            && tokens[i + 3].kind == TokenKind::RParen
        {
            for source in &scopes[scope_of[i]].sources {
                if let SourceKind::Physical(table_name) = &source.kind {
                    subset.add_table(table_name);
                    let schema = catalog.table(table_name).expect("resolved table");
                    for pk in &schema.primary_keys {
                        subset.add_column(table_name, pk);
                    }
                }
            }
        }
    }

    // unqualified identifiers resolved as columns over the scope chain
    for i in 0..n {
        if consumed[i] || !is_ident(&tokens[i]) {
            continue;
        }
        // function names, aliases after AS, and dotted parts are not columns
        if i + 1 < n && matches!(tokens[i + 1].kind, TokenKind::LParen | TokenKind::Dot) {
            continue;
        }
        if i > 0 && (tokens[i - 1].is_kw("AS") || tokens[i - 1].kind == TokenKind::Dot) {
            continue;
        }
        let name = tokens[i].unquoted();
        if cte_names.contains(&name.to_lowercase()) {
            continue;
        }
        if lookup_source(&scopes, scope_of[i], name).is_some() {
            continue; // bare table/alias mention
        }
        match resolve_unqualified(&scopes, scope_of[i], catalog, name) {
            Some((table, col)) => subset.add_column(&table, &col),
            None => warnings.push(ResolutionWarning {
                identifier: tokens[i].text.clone(),
                reason: "unresolvable identifier".to_string(),
            }),
        }
    }

    Ok(Extraction { subset, warnings })
}

fn is_ident(t: &Token) -> bool {
    matches!(t.kind, TokenKind::Ident | TokenKind::QuotedIdent)
}

/// Index just past the matching close paren of the open paren at `at`.
fn skip_parens(tokens: &[Token], at: usize) -> usize {
    let mut depth = 0;
    for (i, t) in tokens.iter().enumerate().skip(at) {
        match t.kind {
            TokenKind::LParen => depth += 1,
            TokenKind::RParen => {
                depth -= 1;
                if depth == 0 {
                    return i + 1;
                }
            }
            _ => {}
        }
    }
    tokens.len()
}

/// Parses one FROM/JOIN source at `at`. Returns the index past the source
/// and the bound `Source`, or None when no source starts there.
fn parse_source(
    tokens: &[Token],
    at: usize,
    catalog: &DatabaseCatalog,
    cte_names: &[String],
    warnings: &mut Vec<ResolutionWarning>,
    subset: &mut SchemaSubset,
) -> Option<(usize, Source)> {
    let n = tokens.len();
    if at >= n {
        return None;
    }
    if tokens[at].kind == TokenKind::LParen {
        let mut j = skip_parens(tokens, at);
        let alias = parse_alias(tokens, &mut j);
        return Some((
            j,
            Source {
                alias,
                name: String::new(),
                kind: SourceKind::Derived,
            },
        ));
    }
    if !is_ident(&tokens[at]) {
        return None;
    }
    let mut j = at;
    let mut name = tokens[j].unquoted().to_string();
    j += 1;
    // schema-qualified name: keep the last component
    if j + 1 < n && tokens[j].kind == TokenKind::Dot && is_ident(&tokens[j + 1]) {
        name = tokens[j + 1].unquoted().to_string();
        j += 2;
    }
    let alias = parse_alias(tokens, &mut j);
    let kind = if cte_names.contains(&name.to_lowercase()) {
        SourceKind::Cte
    } else {
        match catalog.resolve_table(&name) {
            Some(table) => {
                subset.add_table(&table.name);
                SourceKind::Physical(table.name.clone())
            }
            None => {
                warnings.push(ResolutionWarning {
                    identifier: name.clone(),
                    reason: "unresolvable table".to_string(),
                });
                SourceKind::Unknown
            }
        }
    };
    Some((j, Source { alias, name, kind }))
}

fn parse_alias(tokens: &[Token], j: &mut usize) -> Option<String> {
    if *j < tokens.len() && tokens[*j].is_kw("AS") {
        *j += 1;
        if *j < tokens.len() && is_ident(&tokens[*j]) {
            let alias = tokens[*j].unquoted().to_string();
            *j += 1;
            return Some(alias);
        }
        return None;
    }
    if *j < tokens.len()
        && is_ident(&tokens[*j])
        && !(*j + 1 < tokens.len() && tokens[*j + 1].kind == TokenKind::Dot)
    {
        let alias = tokens[*j].unquoted().to_string();
        *j += 1;
        return Some(alias);
    }
    None
}

/// Finds a FROM/JOIN source by alias or name in `scope` and its ancestors.
fn lookup_source(scopes: &[Scope], scope: usize, name: &str) -> Option<SourceKind> {
    let mut current = Some(scope);
    while let Some(id) = current {
        for source in &scopes[id].sources {
            let hit = source
                .alias
                .as_deref()
                .is_some_and(|a| a.eq_ignore_ascii_case(name))
                || source.name.eq_ignore_ascii_case(name);
            if hit {
                return Some(source.kind.clone());
            }
        }
        current = scopes[id].parent;
    }
    None
}

/// Resolves an unqualified identifier as a column of an in-scope table,
/// walking the ladder stage by stage per scope before moving outward.
fn resolve_unqualified(
    scopes: &[Scope],
    scope: usize,
    catalog: &DatabaseCatalog,
    name: &str,
) -> Option<(String, String)> {
    let mut current = Some(scope);
    while let Some(id) = current {
        let tables: Vec<&str> = scopes[id]
            .sources
            .iter()
            .filter_map(|s| match &s.kind {
                SourceKind::Physical(t) => Some(t.as_str()),
                _ => None,
            })
            .collect();
        for exact_only in [true, false] {
            for table_name in &tables {
                let schema = catalog.table(table_name).expect("resolved table");
                let hit = if exact_only {
                    schema
                        .column_names()
                        .find(|c| c.eq_ignore_ascii_case(name))
                } else {
                    schema.resolve_column(name)
                };
                if let Some(col) = hit {
                    return Some((table_name.to_string(), col.to_string()));
                }
            }
        }
        current = scopes[id].parent;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{DatabaseCatalog, TableSchema};
    use crate::sqlkit::Provenance;

    fn social_catalog() -> DatabaseCatalog {
        DatabaseCatalog {
            db_id: "social".into(),
            tables: vec![
                TableSchema {
                    name: "user_profiles".into(),
                    columns: vec![
                        ("uid".into(), "number".into()),
                        ("name".into(), "text".into()),
                        ("email".into(), "text".into()),
                        ("followers".into(), "number".into()),
                    ],
                    primary_keys: vec!["uid".into()],
                    foreign_keys: vec![],
                },
                TableSchema {
                    name: "follows".into(),
                    columns: vec![
                        ("f1".into(), "number".into()),
                        ("f2".into(), "number".into()),
                    ],
                    primary_keys: vec!["f1".into(), "f2".into()],
                    foreign_keys: vec![
                        ("f1".into(), "user_profiles".into(), "uid".into()),
                        ("f2".into(), "user_profiles".into(), "uid".into()),
                    ],
                },
            ],
            db_file: "/nonexistent".into(),
        }
    }

    fn extract(sql: &str) -> Extraction {
        let sql = crate::sqlkit::normalize(sql, Provenance::Gold).unwrap();
        extract_schema_elements(&sql, &social_catalog()).unwrap()
    }

    fn cols(e: &Extraction, table: &str) -> Vec<String> {
        e.subset.entries[table].iter().cloned().collect()
    }

    #[test]
    fn count_star_yields_primary_keys() {
        let e = extract("SELECT count(*) FROM follows");
        assert_eq!(e.subset.entries.len(), 1);
        assert_eq!(cols(&e, "follows"), ["f1", "f2"]);
        assert!(e.warnings.is_empty());
    }

    #[test]
    fn aliases_resolve_to_physical_tables() {
        let e = extract(
            "SELECT T1.name FROM user_profiles AS T1 JOIN follows AS T2 ON T1.uid = T2.f1",
        );
        assert_eq!(cols(&e, "user_profiles"), ["name", "uid"]);
        assert_eq!(cols(&e, "follows"), ["f1"]);
    }

    #[test]
    fn unknown_table_drops_with_warning() {
        let e = extract("SELECT x FROM nosuchtable");
        assert!(e.subset.is_empty());
        assert!(!e.warnings.is_empty());
    }

    #[test]
    fn subquery_columns_resolve_in_inner_scope() {
        let e = extract(
            "SELECT uid FROM user_profiles WHERE followers > (SELECT avg(followers) FROM user_profiles)",
        );
        assert_eq!(cols(&e, "user_profiles"), ["followers", "uid"]);
    }

    #[test]
    fn fuzzy_ladder_fixes_single_typo() {
        let e = extract("SELECT nme FROM user_profiles");
        assert_eq!(cols(&e, "user_profiles"), ["name"]);
    }

    #[test]
    fn set_operation_branches_all_contribute() {
        let e = extract(
            "SELECT name FROM user_profiles UNION SELECT f1 FROM follows",
        );
        assert_eq!(cols(&e, "user_profiles"), ["name"]);
        assert_eq!(cols(&e, "follows"), ["f1"]);
    }

    #[test]
    fn cte_names_are_not_physical_tables() {
        let e = extract("WITH cte AS (SELECT uid FROM user_profiles) SELECT uid FROM cte");
        assert_eq!(e.subset.entries.len(), 1);
        assert_eq!(cols(&e, "user_profiles"), ["uid"]);
    }

    #[test]
    fn derived_table_inner_query_still_contributes() {
        let e = extract(
            "SELECT a.name FROM (SELECT name, followers FROM user_profiles) AS a WHERE a.followers > 10",
        );
        assert_eq!(cols(&e, "user_profiles"), ["followers", "name"]);
    }

    #[test]
    fn group_by_and_order_by_columns_are_collected() {
        let e = extract(
            "SELECT count(*), f1 FROM follows GROUP BY f1 ORDER BY count(*) DESC",
        );
        assert_eq!(cols(&e, "follows"), ["f1", "f2"]);
    }
}
