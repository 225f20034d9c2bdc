//! Collaborative inference orchestrator: schema linking, SQL generation,
//! execution-gated noise correction, and continuation refinement, with a
//! full per-question decision trace.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{render_schema, CatalogError, Corpus, DatabaseCatalog};
use crate::executor::{execute, ExecutionOutcome, DEFAULT_TIMEOUT_MS};
use crate::llm::{Backend, GenerationParams, LlmError};
use crate::prompts::{
    build_cw_prompt, build_nc_prompt, build_sl_prompt, build_ts_prompt, extract_sql,
    parse_nc_response, parse_sl_response, NcVerdict, PromptError, PromptMeta,
    DEFAULT_EXAMPLE_ROWS,
};
use crate::sqlkit::{
    difficulty, extract_schema_elements, merge, truncate_for_refinement, HardnessLevel,
    Provenance, RefinementStrategy, SchemaSubset, SqlError, SqlQuery,
};

#[derive(Debug, Error)]
pub enum McpError {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Sql(#[from] SqlError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

/// Placeholder query emitted when no SQL could be extracted from a
/// completion. It always fails execution, which routes the question into
/// the correction and refinement stages.
pub fn empty_marker_sql() -> SqlQuery {
    SqlQuery {
        text: "SELECT".to_string(),
        provenance: Provenance::Predicted,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McpOptions {
    pub enable_sl: bool,
    pub enable_nc: bool,
    pub enable_cw: bool,
    pub refinement_strategy: RefinementStrategy,
    /// U1: take the linked subset from the gold query instead of the model.
    pub oracle_schema: bool,
    /// U2: hand the refiner the first half of the gold query as its prefix.
    pub oracle_hint: bool,
    pub timeout_ms: u64,
    pub example_rows: usize,
}

impl Default for McpOptions {
    fn default() -> Self {
        McpOptions {
            enable_sl: true,
            enable_nc: true,
            enable_cw: true,
            refinement_strategy: RefinementStrategy::default(),
            oracle_schema: false,
            oracle_hint: false,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            example_rows: DEFAULT_EXAMPLE_ROWS,
        }
    }
}

/// Compact execution result kept in traces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecSummary {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exception: Option<String>,
}

impl From<&ExecutionOutcome> for ExecSummary {
    fn from(outcome: &ExecutionOutcome) -> Self {
        ExecSummary {
            ok: outcome.is_ok(),
            exception: (!outcome.exception_text().is_empty())
                .then(|| outcome.exception_text().to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CwReason {
    ExecFailed,
    Hard,
}

/// Everything one question's run decided, for auditing and ablations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McpTrace {
    pub pair_id: String,
    pub db_id: String,
    pub linked_subset: SchemaSubset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_sql: Option<SqlQuery>,
    pub initial_sql: SqlQuery,
    pub initial_outcome: ExecSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nc_verdict: Option<NcVerdict>,
    pub nc_applied: bool,
    pub cw_triggered: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cw_reason: Option<CwReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cw_sql: Option<SqlQuery>,
    pub cw_applied: bool,
    pub final_sql: SqlQuery,
    pub final_outcome: ExecSummary,
    /// Set when a stage failed hard (backend or rendering); the trace stops
    /// at that stage and `final_sql` holds the best incumbent so far.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn meta(pair_id: &str, db_id: &str) -> PromptMeta {
    PromptMeta {
        pair_id: pair_id.to_string(),
        db_id: db_id.to_string(),
    }
}

/// Builds the simplified schema for a question by merging the model's
/// schema-linking answer with the entities its pseudo-SQL references.
/// An empty merge falls back to the full catalog.
pub fn link_schema(
    catalog: &DatabaseCatalog,
    pair_id: &str,
    question: &str,
    hint: Option<&str>,
    backend: &dyn Backend,
    params: &GenerationParams,
    example_rows: usize,
) -> Result<(SchemaSubset, Option<SqlQuery>), McpError> {
    let schema_text = render_schema(catalog, None, example_rows)?;

    let sl_prompt = build_sl_prompt(&schema_text, question, hint, meta(pair_id, &catalog.db_id))?;
    let sl_response = backend.complete(&sl_prompt, params)?;
    let (linked, warnings) = parse_sl_response(&sl_response, catalog);
    for warning in warnings {
        log::debug!("schema linking ({pair_id}): {warning}");
    }

    let ts_prompt = build_ts_prompt(&schema_text, question, hint, meta(pair_id, &catalog.db_id))?;
    let ts_response = backend.complete(&ts_prompt, params)?;
    let pseudo = match extract_sql(&ts_response) {
        Ok(sql) => Some(sql),
        Err(e) => {
            log::warn!("pseudo-SQL extraction failed for {pair_id}: {e}");
            None
        }
    };
    let from_pseudo = pseudo
        .as_ref()
        .and_then(|sql| extract_schema_elements(sql, catalog).ok())
        .map(|e| e.subset)
        .unwrap_or_else(|| SchemaSubset::new(Some(catalog.db_id.clone())));

    let mut subset = merge(&linked, &from_pseudo)?;
    if subset.is_empty() {
        log::warn!("empty linked subset for {pair_id}; falling back to full schema");
        subset = catalog.full_subset();
    }
    Ok((subset, pseudo))
}

/// Generates SQL against the simplified schema. Extraction failure yields
/// the empty marker so downstream stages see an executable failure.
pub fn generate_sql(
    subset: &SchemaSubset,
    catalog: &DatabaseCatalog,
    pair_id: &str,
    question: &str,
    hint: Option<&str>,
    backend: &dyn Backend,
    params: &GenerationParams,
    example_rows: usize,
) -> Result<SqlQuery, McpError> {
    let schema_text = render_schema(catalog, Some(subset), example_rows)?;
    let prompt = build_ts_prompt(&schema_text, question, hint, meta(pair_id, &catalog.db_id))?;
    let response = backend.complete(&prompt, params)?;
    Ok(extract_sql(&response).unwrap_or_else(|e| {
        log::warn!("SQL extraction failed for {pair_id}: {e}");
        empty_marker_sql()
    }))
}

/// One round of execution-informed noise correction. The corrected query
/// replaces the input only when the verdict is negative, a correction is
/// present, and that correction executes cleanly. Fail-open on backend
/// errors.
pub fn correct_noise(
    catalog: &DatabaseCatalog,
    pair_id: &str,
    question: &str,
    sql: SqlQuery,
    backend: &dyn Backend,
    params: &GenerationParams,
    timeout_ms: u64,
    example_rows: usize,
) -> (SqlQuery, Option<NcVerdict>, bool) {
    let schema_text = match render_schema(catalog, None, example_rows) {
        Ok(t) => t,
        Err(e) => {
            log::warn!("schema rendering failed for {pair_id}: {e}");
            return (sql, None, false);
        }
    };
    let outcome = execute(&catalog.db_file, &sql, timeout_ms);
    let exception = outcome.exception_text();
    let prompt = match build_nc_prompt(
        &schema_text,
        question,
        &sql,
        (!exception.is_empty()).then_some(exception),
        meta(pair_id, &catalog.db_id),
    ) {
        Ok(p) => p,
        Err(e) => {
            log::warn!("noise-correction prompt failed for {pair_id}: {e}");
            return (sql, None, false);
        }
    };
    let response = match backend.complete(&prompt, params) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("noise-correction backend failed for {pair_id}: {e}");
            return (sql, None, false);
        }
    };
    let verdict = parse_nc_response(&response);
    if !verdict.is_correct {
        if let Some(corrected) = &verdict.corrected_sql {
            if execute(&catalog.db_file, corrected, timeout_ms).is_ok() {
                return (corrected.clone(), Some(verdict.clone()), true);
            }
            log::debug!("correction for {pair_id} failed execution; keeping original");
        }
    }
    (sql, Some(verdict), false)
}

/// One round of continuation refinement: truncate, ask for a rewrite, and
/// accept it only if the rewrite executes cleanly.
pub fn refine_by_continuation(
    catalog: &DatabaseCatalog,
    pair_id: &str,
    question: &str,
    sql: SqlQuery,
    strategy: RefinementStrategy,
    backend: &dyn Backend,
    params: &GenerationParams,
    timeout_ms: u64,
    example_rows: usize,
) -> (SqlQuery, Option<SqlQuery>, bool) {
    let prefix = truncate_for_refinement(&sql, strategy);
    refine_from_prefix(
        catalog, pair_id, question, sql, &prefix, backend, params, timeout_ms, example_rows,
    )
}

fn refine_from_prefix(
    catalog: &DatabaseCatalog,
    pair_id: &str,
    question: &str,
    sql: SqlQuery,
    prefix: &str,
    backend: &dyn Backend,
    params: &GenerationParams,
    timeout_ms: u64,
    example_rows: usize,
) -> (SqlQuery, Option<SqlQuery>, bool) {
    let schema_text = match render_schema(catalog, None, example_rows) {
        Ok(t) => t,
        Err(e) => {
            log::warn!("schema rendering failed for {pair_id}: {e}");
            return (sql, None, false);
        }
    };
    let prompt = match build_cw_prompt(&schema_text, question, prefix, meta(pair_id, &catalog.db_id))
    {
        Ok(p) => p,
        Err(e) => {
            log::warn!("continuation prompt failed for {pair_id}: {e}");
            return (sql, None, false);
        }
    };
    let response = match backend.complete(&prompt, params) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("continuation backend failed for {pair_id}: {e}");
            return (sql, None, false);
        }
    };
    let Ok(candidate) = extract_sql(&response) else {
        log::warn!("continuation extraction failed for {pair_id}");
        return (sql, None, false);
    };
    let candidate = SqlQuery {
        text: candidate.text,
        provenance: Provenance::Continued,
    };
    if execute(&catalog.db_file, &candidate, timeout_ms).is_ok() {
        (candidate.clone(), Some(candidate), true)
    } else {
        (sql, Some(candidate), false)
    }
}

fn hardness_or_hard(sql: &SqlQuery, catalog: &DatabaseCatalog) -> HardnessLevel {
    difficulty(sql, catalog).unwrap_or(HardnessLevel::Hard)
}

/// Runs the full collaboration pipeline for one question and returns the
/// complete decision trace. Never panics on backend failure: the trace
/// carries an error record and the best incumbent query.
pub fn run_mcp(
    catalog: &DatabaseCatalog,
    pair_id: &str,
    question: &str,
    hint: Option<&str>,
    gold: Option<&SqlQuery>,
    options: &McpOptions,
    backend: &dyn Backend,
) -> McpTrace {
    let params = GenerationParams::default();
    let mut trace = McpTrace {
        pair_id: pair_id.to_string(),
        db_id: catalog.db_id.clone(),
        linked_subset: SchemaSubset::new(Some(catalog.db_id.clone())),
        pseudo_sql: None,
        initial_sql: empty_marker_sql(),
        initial_outcome: ExecSummary {
            ok: false,
            exception: None,
        },
        nc_verdict: None,
        nc_applied: false,
        cw_triggered: false,
        cw_reason: None,
        cw_sql: None,
        cw_applied: false,
        final_sql: empty_marker_sql(),
        final_outcome: ExecSummary {
            ok: false,
            exception: None,
        },
        error: None,
    };

    // schema linking (or oracle subset, or full schema when disabled)
    let subset = if options.oracle_schema {
        match gold {
            Some(gold) => match extract_schema_elements(gold, catalog) {
                Ok(extraction) if !extraction.subset.is_empty() => extraction.subset,
                _ => catalog.full_subset(),
            },
            None => {
                trace.error = Some("oracle schema mode requires a gold query".into());
                catalog.full_subset()
            }
        }
    } else if options.enable_sl {
        match link_schema(
            catalog,
            pair_id,
            question,
            hint,
            backend,
            &params,
            options.example_rows,
        ) {
            Ok((subset, pseudo)) => {
                trace.pseudo_sql = pseudo;
                subset
            }
            Err(e) => {
                trace.error = Some(format!("schema linking: {e}"));
                seal(&mut trace, catalog, options);
                return trace;
            }
        }
    } else {
        catalog.full_subset()
    };
    trace.linked_subset = subset.clone();

    // SQL generation against the simplified schema
    match generate_sql(
        &subset,
        catalog,
        pair_id,
        question,
        hint,
        backend,
        &params,
        options.example_rows,
    ) {
        Ok(sql) => {
            trace.initial_sql = sql.clone();
            trace.final_sql = sql;
        }
        Err(e) => {
            trace.error = Some(format!("generation: {e}"));
            seal(&mut trace, catalog, options);
            return trace;
        }
    }
    let initial_outcome = execute(&catalog.db_file, &trace.initial_sql, options.timeout_ms);
    trace.initial_outcome = ExecSummary::from(&initial_outcome);

    // noise correction, gated on the correction actually executing
    if options.enable_nc {
        let (sql, verdict, applied) = correct_noise(
            catalog,
            pair_id,
            question,
            trace.final_sql.clone(),
            backend,
            &params,
            options.timeout_ms,
            options.example_rows,
        );
        trace.final_sql = sql;
        trace.nc_verdict = verdict;
        trace.nc_applied = applied;
    }

    // continuation refinement for failing or hard queries
    if options.enable_cw {
        let current_ok = trace.nc_applied || trace.initial_outcome.ok;
        let hard = hardness_or_hard(&trace.final_sql, catalog) > HardnessLevel::Medium;
        if !current_ok || hard {
            trace.cw_triggered = true;
            trace.cw_reason = Some(if current_ok {
                CwReason::Hard
            } else {
                CwReason::ExecFailed
            });
            let (sql, candidate, applied) = if options.oracle_hint && gold.is_some() {
                let prefix =
                    truncate_for_refinement(gold.expect("checked"), RefinementStrategy::HalfPrefix);
                refine_from_prefix(
                    catalog,
                    pair_id,
                    question,
                    trace.final_sql.clone(),
                    &prefix,
                    backend,
                    &params,
                    options.timeout_ms,
                    options.example_rows,
                )
            } else {
                refine_by_continuation(
                    catalog,
                    pair_id,
                    question,
                    trace.final_sql.clone(),
                    options.refinement_strategy,
                    backend,
                    &params,
                    options.timeout_ms,
                    options.example_rows,
                )
            };
            trace.final_sql = sql;
            trace.cw_sql = candidate;
            trace.cw_applied = applied;
        }
    }

    seal(&mut trace, catalog, options);
    trace
}

fn seal(trace: &mut McpTrace, catalog: &DatabaseCatalog, options: &McpOptions) {
    let outcome = execute(&catalog.db_file, &trace.final_sql, options.timeout_ms);
    trace.final_outcome = ExecSummary::from(&outcome);
}

/// Runs the pipeline over a whole corpus with bounded parallelism across
/// questions; the returned traces preserve corpus order.
pub fn run_mcp_corpus(
    corpus: &Corpus,
    options: &McpOptions,
    backend: &dyn Backend,
    parallelism: usize,
) -> Vec<McpTrace> {
    let parallelism = parallelism.max(1);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<McpTrace>>> =
        corpus.pairs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..parallelism.min(corpus.pairs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= corpus.pairs.len() {
                    break;
                }
                let pair = &corpus.pairs[i];
                let catalog = corpus.catalog(&pair.db_id).expect("corpus validated");
                let trace = run_mcp(
                    catalog,
                    &pair.pair_id,
                    &pair.question,
                    pair.hint.as_deref(),
                    Some(&pair.gold_sql),
                    options,
                    backend,
                );
                *slots[i].lock().unwrap() = Some(trace);
            });
        }
    });
    slots
        .into_iter()
        .map(|cell| cell.into_inner().unwrap().expect("worker filled every slot"))
        .collect()
}

/// One line of a predictions file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub pair_id: String,
    pub db_id: String,
    pub sql: String,
}

pub fn write_predictions(traces: &[McpTrace], path: &std::path::Path) -> std::io::Result<()> {
    let mut out = String::new();
    for trace in traces {
        let record = PredictionRecord {
            pair_id: trace.pair_id.clone(),
            db_id: trace.db_id.clone(),
            sql: trace.final_sql.text.clone(),
        };
        out.push_str(&serde_json::to_string(&record).expect("serializable record"));
        out.push('\n');
    }
    std::fs::write(path, out)
}

pub fn read_predictions(path: &std::path::Path) -> std::io::Result<Vec<PredictionRecord>> {
    let raw = std::fs::read_to_string(path)?;
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            serde_json::from_str(line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        })
        .collect()
}

pub fn write_traces(traces: &[McpTrace], path: &std::path::Path) -> std::io::Result<()> {
    let mut out = String::new();
    for trace in traces {
        out.push_str(&serde_json::to_string(trace).expect("serializable trace"));
        out.push('\n');
    }
    std::fs::write(path, out)
}
