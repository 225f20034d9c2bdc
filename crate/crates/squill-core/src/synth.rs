//! Multitask SFT dataset synthesis: seeded error injection, negative mining,
//! per-task record builders, noisy-correspondence filtering, and final
//! assembly into a single line-delimited dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{render_schema, CatalogError, Corpus, CorpusPair, DatabaseCatalog};
use crate::executor::{execute, has_toplevel_order_by, results_match, DEFAULT_TIMEOUT_MS};
use crate::llm::{complete_many, Backend, GenerationParams, LlmError};
use crate::prompts::{
    a_neg, build_cw_prompt, build_filter_prompt, build_nc_prompt, build_sl_prompt, build_ts_prompt,
    extract_sql, parse_nc_response, render_sl_subset, PromptError, PromptMeta,
    DEFAULT_EXAMPLE_ROWS,
};
use crate::sqlkit::{
    extract_schema_elements, lex, normalize, truncate_random, Provenance, SqlError, SqlQuery,
    Token, TokenKind,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Sql(#[from] SqlError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("failed writing {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

/// The five corruption kinds applied to gold SQL when manufacturing
/// negatives for noise-correction training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    SchemaLinking,
    Nesting,
    Join,
    GroupBy,
    Symbol,
}

impl ErrorType {
    pub const ALL: [ErrorType; 5] = [
        ErrorType::SchemaLinking,
        ErrorType::Nesting,
        ErrorType::Join,
        ErrorType::GroupBy,
        ErrorType::Symbol,
    ];
}

#[derive(Debug, Error)]
pub enum InjectError {
    /// The query has no site where this kind of error can be introduced;
    /// callers re-sample another kind.
    #[error("error kind {0:?} is inapplicable to this query")]
    Inapplicable(ErrorType),
    #[error(transparent)]
    Sql(#[from] SqlError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeOrigin {
    /// Zero-shot model prediction that failed execution accuracy.
    Mined,
    /// Gold query corrupted by [`inject_error`].
    Injected(ErrorType),
}

/// A construction-verified wrong query for one corpus pair: it either fails
/// to execute or executes to results that do not match the gold results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NegativeExample {
    pub pair_id: String,
    pub bad_sql: SqlQuery,
    pub origin: NegativeOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SftTask {
    Ts,
    Sl,
    NcPos,
    NcNeg,
    Cw,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftRecord {
    pub task: SftTask,
    pub instruction: String,
    pub response: String,
    pub source_pair_id: String,
}

pub type SftDataset = Vec<SftRecord>;

fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn splice(text: &str, start: usize, end: usize, replacement: &str) -> String {
    format!("{}{}{}", &text[..start], replacement, &text[end..])
}

fn renormalize(text: &str) -> Result<SqlQuery, SqlError> {
    normalize(text, Provenance::Predicted)
}

/// Introduces one seeded error of the given kind into a gold query.
/// Returns [`InjectError::Inapplicable`] when the query has no usable site.
pub fn inject_error(
    gold_sql: &SqlQuery,
    catalog: &DatabaseCatalog,
    kind: ErrorType,
    seed: u64,
) -> Result<SqlQuery, InjectError> {
    let tokens = lex(&gold_sql.text).map_err(SqlError::from)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text = match kind {
        ErrorType::SchemaLinking => inject_schema_linking(&gold_sql.text, &tokens, catalog, &mut rng),
        ErrorType::Nesting => inject_nesting(&gold_sql.text, &tokens, &mut rng),
        ErrorType::Join => inject_join(&gold_sql.text, &tokens, catalog, &mut rng),
        ErrorType::GroupBy => inject_group_by(gold_sql, &tokens, catalog, &mut rng),
        ErrorType::Symbol => inject_symbol(&gold_sql.text, &tokens, &mut rng),
    };
    let text = text.ok_or(InjectError::Inapplicable(kind))?;
    Ok(renormalize(&text)?)
}

const SYNONYMS: &[(&str, &str)] = &[
    ("name", "title"),
    ("title", "name"),
    ("id", "identifier"),
    ("email", "mail"),
    ("date", "day"),
    ("state", "province"),
    ("party", "faction"),
    ("votes", "ballots"),
    ("description", "summary"),
];

fn is_function_name(tokens: &[Token], i: usize) -> bool {
    tokens
        .get(i + 1)
        .is_some_and(|t| t.kind == TokenKind::LParen)
}

fn is_schema_identifier(token: &Token, catalog: &DatabaseCatalog) -> bool {
    catalog.table(&token.text).is_some()
        || catalog
            .tables
            .iter()
            .any(|t| t.column_names().any(|c| c.eq_ignore_ascii_case(&token.text)))
}

fn inject_schema_linking(
    text: &str,
    tokens: &[Token],
    catalog: &DatabaseCatalog,
    rng: &mut ChaCha8Rng,
) -> Option<String> {
    let candidates: Vec<usize> = (0..tokens.len())
        .filter(|&i| {
            tokens[i].kind == TokenKind::Ident
                && !is_function_name(tokens, i)
                && is_schema_identifier(&tokens[i], catalog)
        })
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let i = candidates[rng.gen_range(0..candidates.len())];
    let original = &tokens[i].text;
    let lower = original.to_lowercase();
    let synonym = SYNONYMS.iter().find(|(from, _)| *from == lower);
    let mutated = match synonym {
        // half synonym substitutions, half character typos, per seed
        Some((_, to)) if rng.gen_bool(0.5) => to.to_string(),
        _ => typo(original, rng),
    };
    Some(splice(text, tokens[i].span.start, tokens[i].span.end, &mutated))
}

fn typo(word: &str, rng: &mut ChaCha8Rng) -> String {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() < 2 {
        return format!("{word}x");
    }
    let at = rng.gen_range(0..chars.len());
    chars
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != at)
        .map(|(_, c)| c)
        .collect()
}

fn inject_nesting(text: &str, tokens: &[Token], rng: &mut ChaCha8Rng) -> Option<String> {
    let mut depth = 0usize;
    let mut set_ops = Vec::new();
    for (i, token) in tokens.iter().enumerate() {
        match token.kind {
            TokenKind::LParen => depth += 1,
            TokenKind::RParen => depth = depth.saturating_sub(1),
            TokenKind::Keyword if depth == 0 => {
                let kw = token.upper();
                if kw == "UNION" || kw == "INTERSECT" || kw == "EXCEPT" {
                    set_ops.push(i);
                }
            }
            _ => {}
        }
    }
    if set_ops.is_empty() {
        return None;
    }
    let i = set_ops[rng.gen_range(0..set_ops.len())];
    let right_start = if tokens.get(i + 1).is_some_and(|t| t.is_kw("ALL")) {
        i + 2
    } else {
        i + 1
    };
    if rng.gen_bool(0.5) {
        // drop the right branch
        Some(text[..tokens[i].span.start].trim_end().to_string())
    } else {
        Some(text[tokens[right_start].span.start..].to_string())
    }
}

fn inject_join(
    text: &str,
    tokens: &[Token],
    catalog: &DatabaseCatalog,
    rng: &mut ChaCha8Rng,
) -> Option<String> {
    if catalog.tables.len() < 2 {
        return None;
    }
    // table names immediately after a JOIN keyword
    let candidates: Vec<usize> = (0..tokens.len())
        .filter(|&i| {
            i > 0
                && tokens[i - 1].is_kw("JOIN")
                && tokens[i].kind == TokenKind::Ident
                && catalog.table(&tokens[i].text).is_some()
        })
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let i = candidates[rng.gen_range(0..candidates.len())];
    let others: Vec<&str> = catalog
        .tables
        .iter()
        .map(|t| t.name.as_str())
        .filter(|n| !n.eq_ignore_ascii_case(&tokens[i].text))
        .collect();
    let replacement = others[rng.gen_range(0..others.len())];
    Some(splice(text, tokens[i].span.start, tokens[i].span.end, replacement))
}

fn inject_group_by(
    gold_sql: &SqlQuery,
    tokens: &[Token],
    catalog: &DatabaseCatalog,
    rng: &mut ChaCha8Rng,
) -> Option<String> {
    let referenced = extract_schema_elements(gold_sql, catalog)
        .map(|e| e.subset.entries.keys().cloned().collect::<Vec<_>>())
        .unwrap_or_default();
    // column idents inside GROUP BY lists
    let mut candidates = Vec::new();
    let mut in_group_by = false;
    for (i, token) in tokens.iter().enumerate() {
        if token.is_kw("GROUP") && tokens.get(i + 1).is_some_and(|t| t.is_kw("BY")) {
            in_group_by = true;
            continue;
        }
        if in_group_by {
            match token.kind {
                TokenKind::Keyword if !token.is_kw("BY") => in_group_by = false,
                TokenKind::RParen => in_group_by = false,
                TokenKind::Ident if !is_function_name(tokens, i) => {
                    // skip alias qualifiers: `T1` in `T1.uid`
                    if tokens.get(i + 1).is_none_or(|t| t.kind != TokenKind::Dot) {
                        candidates.push(i);
                    }
                }
                _ => {}
            }
        }
    }
    if candidates.is_empty() {
        return None;
    }
    let i = candidates[rng.gen_range(0..candidates.len())];
    let column = &tokens[i].text;
    // owning table: prefer tables the query references, then the whole catalog
    let owner = referenced
        .iter()
        .filter_map(|t| catalog.table(t))
        .chain(catalog.tables.iter())
        .find(|t| t.column_names().any(|c| c.eq_ignore_ascii_case(column)))?;
    let others: Vec<&str> = owner
        .column_names()
        .filter(|c| !c.eq_ignore_ascii_case(column))
        .collect();
    if others.is_empty() {
        return None;
    }
    let replacement = others[rng.gen_range(0..others.len())];
    Some(splice(
        &gold_sql.text,
        tokens[i].span.start,
        tokens[i].span.end,
        replacement,
    ))
}

const AGGREGATES: [&str; 5] = ["COUNT", "MAX", "MIN", "SUM", "AVG"];

fn inject_symbol(text: &str, tokens: &[Token], rng: &mut ChaCha8Rng) -> Option<String> {
    let keywords: Vec<usize> = (0..tokens.len())
        .filter(|&i| tokens[i].kind == TokenKind::Keyword && tokens[i].text.len() >= 4)
        .collect();
    let commas: Vec<usize> = (0..tokens.len())
        .filter(|&i| tokens[i].kind == TokenKind::Comma)
        .collect();
    let rparens: Vec<usize> = (0..tokens.len())
        .filter(|&i| tokens[i].kind == TokenKind::RParen)
        .collect();
    let aggregates: Vec<usize> = (0..tokens.len())
        .filter(|&i| {
            tokens[i].kind == TokenKind::Ident
                && AGGREGATES.contains(&tokens[i].upper().as_str())
                && is_function_name(tokens, i)
        })
        .collect();

    let mut mutations: Vec<(usize, &[usize])> = Vec::new();
    for (tag, pool) in [
        (0usize, &keywords),
        (1, &commas),
        (2, &rparens),
        (3, &aggregates),
    ] {
        if !pool.is_empty() {
            mutations.push((tag, pool));
        }
    }
    let (tag, pool) = mutations[rng.gen_range(0..mutations.len())];
    let i = pool[rng.gen_range(0..pool.len())];
    let token = &tokens[i];
    match tag {
        0 => {
            let truncated = &token.text[..token.text.len() - 1];
            Some(splice(text, token.span.start, token.span.end, truncated))
        }
        1 | 2 => Some(splice(text, token.span.start, token.span.end, "")),
        _ => {
            let current = token.upper();
            let others: Vec<&str> = AGGREGATES.iter().copied().filter(|a| *a != current).collect();
            let replacement = others[rng.gen_range(0..others.len())];
            Some(splice(text, token.span.start, token.span.end, replacement))
        }
    }
}

/// Counters reported by [`make_negatives`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NegativeStats {
    pub requested: usize,
    pub produced: usize,
    pub dropped: usize,
    pub mined: usize,
    pub injected: usize,
    pub skipped_pairs: usize,
}

impl NegativeStats {
    pub fn drop_rate(&self) -> f64 {
        if self.requested == 0 {
            0.0
        } else {
            self.dropped as f64 / self.requested as f64
        }
    }
}

fn schema_texts(corpus: &Corpus) -> Result<BTreeMap<String, String>, SynthError> {
    let mut out = BTreeMap::new();
    for (db_id, catalog) in &corpus.catalogs {
        out.insert(
            db_id.clone(),
            render_schema(catalog, None, DEFAULT_EXAMPLE_ROWS)?,
        );
    }
    Ok(out)
}

fn meta_for(pair: &CorpusPair) -> PromptMeta {
    PromptMeta {
        pair_id: pair.pair_id.clone(),
        db_id: pair.db_id.clone(),
    }
}

fn is_wrong(
    catalog: &DatabaseCatalog,
    gold_outcome: &crate::executor::ExecutionOutcome,
    gold_sql: &SqlQuery,
    bad: &SqlQuery,
) -> bool {
    let bad_outcome = execute(&catalog.db_file, bad, DEFAULT_TIMEOUT_MS);
    !results_match(gold_outcome, &bad_outcome, has_toplevel_order_by(gold_sql))
}

/// Builds wrong-SQL examples for every pair: zero-shot model predictions that
/// fail execution accuracy when a backend is supplied, topped up with seeded
/// error injection. Every returned negative is re-executed and verified wrong
/// at construction time.
pub fn make_negatives(
    corpus: &Corpus,
    backend: Option<&dyn Backend>,
    per_pair: usize,
    seed: u64,
    parallelism: usize,
) -> Result<(Vec<NegativeExample>, NegativeStats), SynthError> {
    let schemas = schema_texts(corpus)?;
    let mut stats = NegativeStats {
        requested: corpus.pairs.len() * per_pair,
        ..NegativeStats::default()
    };

    // one zero-shot mining pass over all pairs, order-preserving
    let mut mined: BTreeMap<String, String> = BTreeMap::new();
    if let Some(backend) = backend {
        let prompts = corpus
            .pairs
            .iter()
            .map(|p| {
                build_ts_prompt(
                    &schemas[&p.db_id],
                    &p.question,
                    p.hint.as_deref(),
                    meta_for(p),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let params = GenerationParams::default();
        let results = complete_many(backend, &prompts, &params, parallelism);
        for (pair, result) in corpus.pairs.iter().zip(results) {
            match result {
                Ok(text) => {
                    mined.insert(pair.pair_id.clone(), text);
                }
                Err(e) => log::warn!("mining failed for {}: {e}", pair.pair_id),
            }
        }
    }

    let mut negatives = Vec::new();
    for pair in &corpus.pairs {
        let catalog = corpus.catalog(&pair.db_id).expect("corpus validated");
        let gold_outcome = execute(&catalog.db_file, &pair.gold_sql, DEFAULT_TIMEOUT_MS);
        if !gold_outcome.is_ok() {
            log::warn!(
                "gold SQL of {} fails execution ({}); pair skipped",
                pair.pair_id,
                gold_outcome.exception_text()
            );
            stats.skipped_pairs += 1;
            continue;
        }

        let mut seen: BTreeSet<String> = BTreeSet::new();
        let mut for_pair = 0usize;
        if let Some(prediction) = mined.get(&pair.pair_id) {
            if let Ok(bad) = extract_sql(prediction) {
                if is_wrong(catalog, &gold_outcome, &pair.gold_sql, &bad) && for_pair < per_pair {
                    seen.insert(bad.text.clone());
                    negatives.push(NegativeExample {
                        pair_id: pair.pair_id.clone(),
                        bad_sql: bad,
                        origin: NegativeOrigin::Mined,
                    });
                    for_pair += 1;
                    stats.mined += 1;
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &pair.pair_id));
        'slots: while for_pair < per_pair {
            for _attempt in 0..5 {
                let kind = ErrorType::ALL[rng.gen_range(0..ErrorType::ALL.len())];
                let sub_seed = rng.gen::<u64>();
                let Ok(bad) = inject_error(&pair.gold_sql, catalog, kind, sub_seed) else {
                    continue;
                };
                if seen.contains(&bad.text)
                    || !is_wrong(catalog, &gold_outcome, &pair.gold_sql, &bad)
                {
                    continue;
                }
                seen.insert(bad.text.clone());
                negatives.push(NegativeExample {
                    pair_id: pair.pair_id.clone(),
                    bad_sql: bad,
                    origin: NegativeOrigin::Injected(kind),
                });
                for_pair += 1;
                stats.injected += 1;
                continue 'slots;
            }
            // attempts exhausted for this slot; drop the rest for the pair
            stats.dropped += per_pair - for_pair;
            break;
        }
    }
    stats.produced = negatives.len();
    if stats.dropped > 0 {
        log::warn!(
            "negative injection dropped {} of {} slots ({:.1}% drop rate)",
            stats.dropped,
            stats.requested,
            stats.drop_rate() * 100.0
        );
    }
    Ok((negatives, stats))
}

/// Text2SQL records: the generation prompt paired with the gold query.
pub fn synth_ts(corpus: &Corpus) -> Result<SftDataset, SynthError> {
    let schemas = schema_texts(corpus)?;
    let mut records = Vec::new();
    for pair in &corpus.pairs {
        let prompt = build_ts_prompt(
            &schemas[&pair.db_id],
            &pair.question,
            pair.hint.as_deref(),
            meta_for(pair),
        )?;
        records.push(SftRecord {
            task: SftTask::Ts,
            instruction: prompt.text,
            response: pair.gold_sql.text.clone(),
            source_pair_id: pair.pair_id.clone(),
        });
    }
    Ok(records)
}

/// Schema-linking records: response is the canonical rendering of the
/// elements the gold query touches. Pairs whose extraction is empty are
/// skipped with a warning.
pub fn synth_sl(corpus: &Corpus) -> Result<SftDataset, SynthError> {
    let schemas = schema_texts(corpus)?;
    let mut records = Vec::new();
    for pair in &corpus.pairs {
        let catalog = corpus.catalog(&pair.db_id).expect("corpus validated");
        let extraction = extract_schema_elements(&pair.gold_sql, catalog)?;
        if extraction.subset.is_empty() {
            log::warn!("empty schema extraction for {}; pair skipped", pair.pair_id);
            continue;
        }
        let prompt = build_sl_prompt(
            &schemas[&pair.db_id],
            &pair.question,
            pair.hint.as_deref(),
            meta_for(pair),
        )?;
        records.push(SftRecord {
            task: SftTask::Sl,
            instruction: prompt.text,
            response: render_sl_subset(&extraction.subset),
            source_pair_id: pair.pair_id.clone(),
        });
    }
    Ok(records)
}

/// Noise-correction records: one positive per pair (gold query, affirmative
/// response) plus one negative per supplied wrong query (response embeds the
/// gold correction). Negative instructions carry the executor's exception
/// when the wrong query fails to run.
pub fn synth_nc(corpus: &Corpus, negatives: &[NegativeExample]) -> Result<SftDataset, SynthError> {
    let schemas = schema_texts(corpus)?;
    let mut records = Vec::new();
    for pair in &corpus.pairs {
        let prompt = build_nc_prompt(
            &schemas[&pair.db_id],
            &pair.question,
            &pair.gold_sql,
            None,
            meta_for(pair),
        )?;
        records.push(SftRecord {
            task: SftTask::NcPos,
            instruction: prompt.text,
            response: crate::prompts::A_POS.to_string(),
            source_pair_id: pair.pair_id.clone(),
        });
    }
    for negative in negatives {
        let Some(pair) = corpus.pair(&negative.pair_id) else {
            log::warn!("negative for unknown pair {}; skipped", negative.pair_id);
            continue;
        };
        let catalog = corpus.catalog(&pair.db_id).expect("corpus validated");
        let outcome = execute(&catalog.db_file, &negative.bad_sql, DEFAULT_TIMEOUT_MS);
        let exception = outcome.exception_text();
        let prompt = build_nc_prompt(
            &schemas[&pair.db_id],
            &pair.question,
            &negative.bad_sql,
            (!exception.is_empty()).then_some(exception),
            meta_for(pair),
        )?;
        records.push(SftRecord {
            task: SftTask::NcNeg,
            instruction: prompt.text,
            response: a_neg(&pair.gold_sql),
            source_pair_id: pair.pair_id.clone(),
        });
    }
    Ok(records)
}

/// Continuation-writing records: the instruction embeds a random strict
/// prefix of the gold query; the response is the full gold query.
pub fn synth_cw(corpus: &Corpus, seed: u64) -> Result<SftDataset, SynthError> {
    let schemas = schema_texts(corpus)?;
    let mut records = Vec::new();
    for pair in &corpus.pairs {
        let prefix = match truncate_random(&pair.gold_sql, derive_seed(seed, &pair.pair_id)) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("cannot truncate gold of {}: {e}; pair skipped", pair.pair_id);
                continue;
            }
        };
        let prompt = build_cw_prompt(&schemas[&pair.db_id], &pair.question, &prefix, meta_for(pair))?;
        records.push(SftRecord {
            task: SftTask::Cw,
            instruction: prompt.text,
            response: pair.gold_sql.text.clone(),
            source_pair_id: pair.pair_id.clone(),
        });
    }
    Ok(records)
}

/// A pair removed by [`filter_noise`], with the discriminator's verdict text.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemovedPair {
    pub pair_id: String,
    pub verdict: String,
}

/// Runs the discriminator over every pair and removes those it flags as
/// noisy correspondences. Fail-open: a backend failure keeps the pair.
pub fn filter_noise(
    corpus: &Corpus,
    backend: &dyn Backend,
    parallelism: usize,
) -> Result<(Corpus, Vec<RemovedPair>), SynthError> {
    let schemas = schema_texts(corpus)?;
    let prompts = corpus
        .pairs
        .iter()
        .map(|p| build_filter_prompt(&schemas[&p.db_id], &p.question, &p.gold_sql, meta_for(p)))
        .collect::<Result<Vec<_>, _>>()?;
    let params = GenerationParams::default();
    let results = complete_many(backend, &prompts, &params, parallelism);

    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (pair, result) in corpus.pairs.iter().zip(results) {
        match result {
            Ok(response) => {
                if parse_nc_response(&response).is_correct {
                    kept.push(pair.clone());
                } else {
                    removed.push(RemovedPair {
                        pair_id: pair.pair_id.clone(),
                        verdict: response,
                    });
                }
            }
            Err(e) => {
                log::warn!("filter backend failed on {}: {e}; pair kept", pair.pair_id);
                kept.push(pair.clone());
            }
        }
    }
    let filtered = Corpus {
        root: corpus.root.clone(),
        catalogs: corpus.catalogs.clone(),
        pairs: kept,
    };
    Ok((filtered, removed))
}

/// Per-task caps applied during assembly; `None` keeps the dataset whole.
/// The Text2SQL dataset is never down-sampled.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct AssemblyCaps {
    pub sl: Option<usize>,
    pub nc: Option<usize>,
    pub cw: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssemblyManifest {
    /// Pairs surviving the noise filter == size of the Text2SQL dataset.
    pub kept: usize,
    pub ts: usize,
    pub sl: usize,
    pub nc: usize,
    pub cw: usize,
    pub total: usize,
}

/// Pure counting logic behind [`assemble_msft`]: the Text2SQL dataset is
/// kept whole and each auxiliary dataset is clamped to its cap.
pub fn assembled_counts(
    ts: usize,
    sl: usize,
    nc: usize,
    cw: usize,
    caps: &AssemblyCaps,
) -> AssemblyManifest {
    let clamp = |n: usize, cap: Option<usize>| cap.map_or(n, |c| n.min(c));
    let sl = clamp(sl, caps.sl);
    let nc = clamp(nc, caps.nc);
    let cw = clamp(cw, caps.cw);
    AssemblyManifest {
        kept: ts,
        ts,
        sl,
        nc,
        cw,
        total: ts + sl + nc + cw,
    }
}

fn sample_to_cap(records: SftDataset, cap: Option<usize>, rng: &mut ChaCha8Rng) -> SftDataset {
    let Some(cap) = cap else {
        return records;
    };
    if cap >= records.len() {
        if cap > records.len() {
            log::warn!("cap {cap} exceeds available {} records; taking all", records.len());
        }
        return records;
    }
    let mut indices = rand::seq::index::sample(rng, records.len(), cap).into_vec();
    indices.sort_unstable();
    let mut records: Vec<Option<SftRecord>> = records.into_iter().map(Some).collect();
    indices
        .into_iter()
        .map(|i| records[i].take().expect("distinct indices"))
        .collect()
}

/// Combines the four task datasets into one: Text2SQL kept whole, auxiliary
/// datasets down-sampled to their caps without replacement, then shuffled.
/// Seeded throughout, so identical inputs yield identical output order.
pub fn assemble_msft(
    ts: SftDataset,
    sl: SftDataset,
    nc: SftDataset,
    cw: SftDataset,
    caps: &AssemblyCaps,
    seed: u64,
) -> (SftDataset, AssemblyManifest) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sl = sample_to_cap(sl, caps.sl, &mut rng);
    let nc = sample_to_cap(nc, caps.nc, &mut rng);
    let cw = sample_to_cap(cw, caps.cw, &mut rng);
    let manifest = AssemblyManifest {
        kept: ts.len(),
        ts: ts.len(),
        sl: sl.len(),
        nc: nc.len(),
        cw: cw.len(),
        total: ts.len() + sl.len() + nc.len() + cw.len(),
    };
    let mut all = ts;
    all.extend(sl);
    all.extend(nc);
    all.extend(cw);
    all.shuffle(&mut rng);
    (all, manifest)
}

#[derive(Serialize)]
struct SftLine<'a> {
    instruction: &'a str,
    output: &'a str,
    task: SftTask,
    source_pair_id: &'a str,
}

/// Writes records as line-delimited JSON with the `instruction`/`output`
/// keys SFT trainers expect.
pub fn write_sft_records(records: &[SftRecord], path: &Path) -> Result<(), SynthError> {
    let mut out = String::new();
    for record in records {
        let line = SftLine {
            instruction: &record.instruction,
            output: &record.response,
            task: record.task,
            source_pair_id: &record.source_pair_id,
        };
        out.push_str(&serde_json::to_string(&line).expect("serializable record"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a line-delimited SFT records file written by [`write_sft_records`].
pub fn read_sft_records(path: &Path) -> Result<Vec<SftRecord>, SynthError> {
    #[derive(Deserialize)]
    struct OwnedLine {
        instruction: String,
        output: String,
        task: SftTask,
        source_pair_id: String,
    }
    let raw = std::fs::read_to_string(path).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for line in raw.lines().filter(|l| !l.trim().is_empty()) {
        let parsed: OwnedLine = serde_json::from_str(line).map_err(|e| SynthError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })?;
        records.push(SftRecord {
            task: parsed.task,
            instruction: parsed.instruction,
            response: parsed.output,
            source_pair_id: parsed.source_pair_id,
        });
    }
    Ok(records)
}
