//! Scoring: execution accuracy overall and per difficulty bucket,
//! schema-linking recall/precision, and deterministic report rendering.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Corpus;
use crate::executor::ex_for_pair;
use crate::mcp::PredictionRecord;
use crate::sqlkit::{
    difficulty, extract_schema_elements, normalize, HardnessLevel, Provenance, SchemaSubset,
    SqlError,
};

/// Embedded in every report so numbers can be compared honestly across
/// scorers with different conventions.
pub const SCORER_NOTE: &str = "Execution accuracy compares result multisets; row order matters only \
when the gold query has a top-level ORDER BY. Numbers compare with relative tolerance 1e-6. \
Predictions that fail to execute or time out never match. Linking metrics are micro-averaged over \
all pairs.";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction references unknown pair {0}")]
    UnknownPair(String),
    #[error(transparent)]
    Sql(#[from] SqlError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairVerdict {
    pub pair_id: String,
    pub db_id: String,
    pub correct: bool,
    /// No prediction was supplied for this pair; scored false.
    pub missing: bool,
    pub hardness: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty_label: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    pub n: usize,
    pub correct: usize,
}

impl BucketStat {
    pub fn fraction(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_pairs: usize,
    pub n_correct: usize,
    pub ex_overall: f64,
    /// Buckets keyed by this toolkit's own table-count grading.
    pub ex_by_hardness: BTreeMap<String, BucketStat>,
    /// Buckets keyed by the dataset's difficulty labels, when present.
    pub ex_by_label: BTreeMap<String, BucketStat>,
    pub verdicts: Vec<PairVerdict>,
    pub scorer_note: String,
}

fn hardness_name(level: HardnessLevel) -> &'static str {
    match level {
        HardnessLevel::Simple => "simple",
        HardnessLevel::Medium => "medium",
        HardnessLevel::Hard => "hard",
    }
}

/// Scores predictions against the corpus by executing both queries per pair.
/// Pairs without a prediction are scored false and flagged.
pub fn evaluate_ex(
    corpus: &Corpus,
    predictions: &[PredictionRecord],
    timeout_ms: u64,
) -> Result<EvalReport, EvalError> {
    let mut by_pair: BTreeMap<&str, &str> = BTreeMap::new();
    for prediction in predictions {
        if corpus.pair(&prediction.pair_id).is_none() {
            return Err(EvalError::UnknownPair(prediction.pair_id.clone()));
        }
        by_pair.insert(&prediction.pair_id, &prediction.sql);
    }

    // score pairs in parallel; slot order keeps the output deterministic
    let parallelism = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(8)
        .min(corpus.pairs.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<(bool, bool)>>> =
        corpus.pairs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..parallelism {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= corpus.pairs.len() {
                    break;
                }
                let pair = &corpus.pairs[i];
                let catalog = corpus.catalog(&pair.db_id).expect("corpus validated");
                let (correct, missing) = match by_pair.get(pair.pair_id.as_str()) {
                    None => (false, true),
                    Some(sql_text) => match normalize(sql_text, Provenance::Predicted) {
                        Ok(sql) => (
                            ex_for_pair(catalog, &pair.gold_sql, &sql, timeout_ms),
                            false,
                        ),
                        Err(_) => (false, false),
                    },
                };
                *slots[i].lock().unwrap() = Some((correct, missing));
            });
        }
    });

    let mut verdicts = Vec::new();
    let mut ex_by_hardness: BTreeMap<String, BucketStat> = BTreeMap::new();
    let mut ex_by_label: BTreeMap<String, BucketStat> = BTreeMap::new();
    let mut n_correct = 0usize;
    for (pair, slot) in corpus.pairs.iter().zip(slots) {
        let (correct, missing) = slot.into_inner().unwrap().expect("worker filled every slot");
        let catalog = corpus.catalog(&pair.db_id).expect("corpus validated");
        let hardness = difficulty(&pair.gold_sql, catalog).unwrap_or(HardnessLevel::Hard);
        if missing {
            log::warn!("no prediction for {}; scored false", pair.pair_id);
        }
        n_correct += correct as usize;
        let h = ex_by_hardness.entry(hardness_name(hardness).to_string()).or_default();
        h.n += 1;
        h.correct += correct as usize;
        if let Some(label) = &pair.difficulty_label {
            let l = ex_by_label.entry(label.clone()).or_default();
            l.n += 1;
            l.correct += correct as usize;
        }
        verdicts.push(PairVerdict {
            pair_id: pair.pair_id.clone(),
            db_id: pair.db_id.clone(),
            correct,
            missing,
            hardness: hardness.as_u8(),
            difficulty_label: pair.difficulty_label.clone(),
        });
    }

    let n_pairs = corpus.pairs.len();
    Ok(EvalReport {
        n_pairs,
        n_correct,
        ex_overall: if n_pairs == 0 {
            0.0
        } else {
            n_correct as f64 / n_pairs as f64
        },
        ex_by_hardness,
        ex_by_label,
        verdicts,
        scorer_note: SCORER_NOTE.to_string(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkingReport {
    pub n_pairs: usize,
    pub table_recall: f64,
    pub table_precision: f64,
    pub column_recall: f64,
    pub column_precision: f64,
    pub scorer_note: String,
}

fn ratio(hits: usize, total: usize) -> f64 {
    // vacuous sets score 1.0: nothing was required/claimed
    if total == 0 {
        1.0
    } else {
        hits as f64 / total as f64
    }
}

/// Micro-averaged recall/precision of predicted schema subsets against the
/// elements each gold query actually touches. Pairs absent from `predicted`
/// count as empty predictions.
pub fn linking_metrics(
    predicted: &BTreeMap<String, SchemaSubset>,
    corpus: &Corpus,
) -> Result<LinkingReport, EvalError> {
    let empty = SchemaSubset::new(None);
    let mut table_hits = 0usize;
    let mut table_gold = 0usize;
    let mut table_pred = 0usize;
    let mut column_hits = 0usize;
    let mut column_gold = 0usize;
    let mut column_pred = 0usize;
    for pair in &corpus.pairs {
        let catalog = corpus.catalog(&pair.db_id).expect("corpus validated");
        let gold = extract_schema_elements(&pair.gold_sql, catalog)?.subset;
        let pred = predicted.get(&pair.pair_id).unwrap_or(&empty);

        let norm = |s: &str| s.to_lowercase();
        let gold_tables: Vec<String> = gold.entries.keys().map(|t| norm(t)).collect();
        let pred_tables: Vec<String> = pred.entries.keys().map(|t| norm(t)).collect();
        table_gold += gold_tables.len();
        table_pred += pred_tables.len();
        table_hits += gold_tables.iter().filter(|t| pred_tables.contains(t)).count();

        let columns = |s: &SchemaSubset| -> Vec<String> {
            s.entries
                .iter()
                .flat_map(|(t, cols)| cols.iter().map(move |c| format!("{}.{}", norm(t), norm(c))))
                .collect()
        };
        let gold_columns = columns(&gold);
        let pred_columns = columns(pred);
        column_gold += gold_columns.len();
        column_pred += pred_columns.len();
        column_hits += gold_columns.iter().filter(|c| pred_columns.contains(c)).count();
    }
    Ok(LinkingReport {
        n_pairs: corpus.pairs.len(),
        table_recall: ratio(table_hits, table_gold),
        table_precision: ratio(table_hits, table_pred),
        column_recall: ratio(column_hits, column_gold),
        column_precision: ratio(column_hits, column_pred),
        scorer_note: SCORER_NOTE.to_string(),
    })
}

fn pct(fraction: f64) -> String {
    format!("{:6.2}%", fraction * 100.0)
}

/// Renders the execution-accuracy report as an aligned text table.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str("execution accuracy report\n");
    out.push_str("=========================\n");
    out.push_str(&format!(
        "pairs: {}  correct: {}  EX: {}\n",
        report.n_pairs,
        report.n_correct,
        pct(report.ex_overall)
    ));
    out.push_str("\nby hardness (distinct tables referenced)\n");
    for (bucket, stat) in &report.ex_by_hardness {
        out.push_str(&format!(
            "  {bucket:<8} {:>4}/{:<4} {}\n",
            stat.correct,
            stat.n,
            pct(stat.fraction())
        ));
    }
    if !report.ex_by_label.is_empty() {
        out.push_str("\nby dataset label\n");
        for (bucket, stat) in &report.ex_by_label {
            out.push_str(&format!(
                "  {bucket:<8} {:>4}/{:<4} {}\n",
                stat.correct,
                stat.n,
                pct(stat.fraction())
            ));
        }
    }
    let missing: Vec<&str> = report
        .verdicts
        .iter()
        .filter(|v| v.missing)
        .map(|v| v.pair_id.as_str())
        .collect();
    if !missing.is_empty() {
        out.push_str(&format!("\nmissing predictions: {}\n", missing.join(", ")));
    }
    out.push_str(&format!("\nnote: {}\n", report.scorer_note));
    out
}

/// Renders the linking report as an aligned text table.
pub fn render_linking_report(report: &LinkingReport) -> String {
    let mut out = String::new();
    out.push_str("schema linking report\n");
    out.push_str("=====================\n");
    out.push_str(&format!("pairs: {}\n", report.n_pairs));
    out.push_str(&format!("  table recall     {}\n", pct(report.table_recall)));
    out.push_str(&format!("  table precision  {}\n", pct(report.table_precision)));
    out.push_str(&format!("  column recall    {}\n", pct(report.column_recall)));
    out.push_str(&format!("  column precision {}\n", pct(report.column_precision)));
    out.push_str(&format!("\nnote: {}\n", report.scorer_note));
    out
}

/// The machine-readable twin of the text reports.
pub fn render_json<T: Serialize>(report: &T) -> String {
    let mut out = serde_json::to_string_pretty(report).expect("serializable report");
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::load_corpus;
    use crate::executor::DEFAULT_TIMEOUT_MS;
    use std::path::Path;

    fn corpus() -> Corpus {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/minicorpus");
        load_corpus(&root).unwrap()
    }

    fn gold_predictions(corpus: &Corpus) -> Vec<PredictionRecord> {
        corpus
            .pairs
            .iter()
            .map(|p| PredictionRecord {
                pair_id: p.pair_id.clone(),
                db_id: p.db_id.clone(),
                sql: p.gold_sql.text.clone(),
            })
            .collect()
    }

    #[test]
    fn gold_predictions_score_perfectly() {
        let corpus = corpus();
        let report = evaluate_ex(&corpus, &gold_predictions(&corpus), DEFAULT_TIMEOUT_MS).unwrap();
        assert_eq!(report.ex_overall, 1.0);
        assert_eq!(report.n_correct, corpus.pairs.len());
        assert!(report.verdicts.iter().all(|v| v.correct && !v.missing));
    }

    #[test]
    fn empty_predictions_score_zero_and_flag_missing() {
        let corpus = corpus();
        let report = evaluate_ex(&corpus, &[], DEFAULT_TIMEOUT_MS).unwrap();
        assert_eq!(report.ex_overall, 0.0);
        assert!(report.verdicts.iter().all(|v| v.missing));
    }

    #[test]
    fn buckets_weighted_average_to_overall() {
        let corpus = corpus();
        let mut predictions = gold_predictions(&corpus);
        // break half of them
        for prediction in predictions.iter_mut().step_by(2) {
            prediction.sql = "SELECT broken FROM nowhere".into();
        }
        let report = evaluate_ex(&corpus, &predictions, DEFAULT_TIMEOUT_MS).unwrap();
        assert!(report.ex_overall < 1.0 && report.ex_overall > 0.0);
        let (n, correct) = report
            .ex_by_hardness
            .values()
            .fold((0, 0), |(n, c), s| (n + s.n, c + s.correct));
        assert_eq!(n, report.n_pairs);
        assert_eq!(correct, report.n_correct);
        let (ln, lcorrect) = report
            .ex_by_label
            .values()
            .fold((0, 0), |(n, c), s| (n + s.n, c + s.correct));
        // labels cover only the pairs that carry one
        assert!(ln <= report.n_pairs);
        assert!(lcorrect <= report.n_correct);
    }

    #[test]
    fn wrong_prediction_strictly_lowers_overall() {
        let corpus = corpus();
        let mut predictions = gold_predictions(&corpus);
        let full = evaluate_ex(&corpus, &predictions, DEFAULT_TIMEOUT_MS).unwrap();
        predictions[0].sql = "SELECT broken FROM nowhere".into();
        let dented = evaluate_ex(&corpus, &predictions, DEFAULT_TIMEOUT_MS).unwrap();
        assert!(dented.ex_overall < full.ex_overall);
    }

    #[test]
    fn unknown_pair_is_an_error() {
        let corpus = corpus();
        let predictions = vec![PredictionRecord {
            pair_id: "ghost".into(),
            db_id: "social".into(),
            sql: "SELECT 1".into(),
        }];
        assert!(matches!(
            evaluate_ex(&corpus, &predictions, DEFAULT_TIMEOUT_MS),
            Err(EvalError::UnknownPair(_))
        ));
    }

    #[test]
    fn identity_linking_scores_one() {
        let corpus = corpus();
        let mut predicted = BTreeMap::new();
        for pair in &corpus.pairs {
            let catalog = corpus.catalog(&pair.db_id).unwrap();
            let subset = extract_schema_elements(&pair.gold_sql, catalog).unwrap().subset;
            predicted.insert(pair.pair_id.clone(), subset);
        }
        let report = linking_metrics(&predicted, &corpus).unwrap();
        assert_eq!(report.table_recall, 1.0);
        assert_eq!(report.table_precision, 1.0);
        assert_eq!(report.column_recall, 1.0);
        assert_eq!(report.column_precision, 1.0);
    }

    #[test]
    fn full_catalog_linking_has_perfect_recall_low_precision() {
        let corpus = corpus();
        let mut predicted = BTreeMap::new();
        for pair in &corpus.pairs {
            let catalog = corpus.catalog(&pair.db_id).unwrap();
            predicted.insert(pair.pair_id.clone(), catalog.full_subset());
        }
        let report = linking_metrics(&predicted, &corpus).unwrap();
        assert_eq!(report.table_recall, 1.0);
        assert_eq!(report.column_recall, 1.0);
        assert!(report.table_precision < 1.0);
        assert!(report.column_precision < report.table_precision);
    }

    #[test]
    fn empty_linking_has_zero_recall() {
        let corpus = corpus();
        let report = linking_metrics(&BTreeMap::new(), &corpus).unwrap();
        assert_eq!(report.table_recall, 0.0);
        assert_eq!(report.column_recall, 0.0);
    }

    #[test]
    fn reports_render_deterministically_with_note() {
        let corpus = corpus();
        let report = evaluate_ex(&corpus, &gold_predictions(&corpus), DEFAULT_TIMEOUT_MS).unwrap();
        let a = render_report(&report);
        let b = render_report(&report);
        assert_eq!(a, b);
        assert!(a.contains("EX:"));
        assert!(a.contains(SCORER_NOTE));
        let json = render_json(&report);
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed["n_pairs"], corpus.pairs.len());

        let linking = linking_metrics(&BTreeMap::new(), &corpus).unwrap();
        let text = render_linking_report(&linking);
        assert!(text.contains("table recall"));
        assert!(text.contains(SCORER_NOTE));
    }
}
