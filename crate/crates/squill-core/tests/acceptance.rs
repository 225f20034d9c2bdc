//! End-to-end acceptance checks over the committed fixture corpus.
//! Each criterion prints one `[PASS]`/`[FAIL]` line (visible with
//! `cargo test --test acceptance -- --nocapture`).

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use squill_core::catalog::load_corpus;
use squill_core::eval::{evaluate_ex, linking_metrics};
use squill_core::executor::DEFAULT_TIMEOUT_MS;
use squill_core::llm::{MockBackend, ScriptEntry, ScriptMatcher};
use squill_core::mcp::{run_mcp, run_mcp_corpus, CwReason, McpOptions, PredictionRecord};
use squill_core::prompts::{
    a_neg, build_ts_prompt, parse_nc_response, parse_sl_response, render_sl_subset, PromptMeta,
    PromptTask, A_POS,
};
use squill_core::sqlkit::{
    extract_schema_elements, merge, truncate_for_refinement, RefinementStrategy,
};
use squill_core::synth::{
    assemble_msft, assembled_counts, filter_noise, make_negatives, synth_cw, synth_nc, synth_sl,
    synth_ts, write_sft_records, AssemblyCaps,
};
use squill_core::{Corpus, SchemaSubset, SqlQuery};

fn corpus() -> Corpus {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/minicorpus");
    load_corpus(&root).expect("fixture corpus loads")
}

fn criterion(name: &str, body: impl FnOnce() + std::panic::UnwindSafe) {
    match std::panic::catch_unwind(body) {
        Ok(()) => println!("[PASS] {name}"),
        Err(cause) => {
            println!("[FAIL] {name}");
            std::panic::resume_unwind(cause);
        }
    }
}

fn fenced(sql: &str) -> String {
    format!("```sql\n{sql}\n```")
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
fn c1_scorer_self_consistency() {
    criterion("criterion 1: gold-as-predictions scores 100% in under 10s", || {
        let corpus = corpus();
        let start = Instant::now();
        let report = evaluate_ex(&corpus, &gold_predictions(&corpus), DEFAULT_TIMEOUT_MS).unwrap();
        let elapsed = start.elapsed();
        assert_eq!(report.ex_overall, 1.0, "EX must be exactly 100%");
        assert_eq!(report.n_correct, 20);
        assert!(elapsed.as_secs() < 10, "took {elapsed:?}");
    });
}

#[derive(Deserialize)]
struct OracleCase {
    id: String,
    db_id: String,
    sql: String,
    expected: BTreeMap<String, Vec<String>>,
}

#[test]
fn c2_parser_oracle() {
    criterion(
        "criterion 2: 100% table recall, >=95% column F1 on the 30-query hand-parse oracle",
        || {
            let corpus = corpus();
            let raw = std::fs::read_to_string(
                Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/extraction_oracle.json"),
            )
            .unwrap();
            let cases: Vec<OracleCase> = serde_json::from_str(&raw).unwrap();
            assert_eq!(cases.len(), 30);

            let mut column_tp = 0usize;
            let mut column_fp = 0usize;
            let mut column_fn = 0usize;
            for case in &cases {
                let catalog = corpus.catalog(&case.db_id).unwrap();
                let sql = SqlQuery::gold(&case.sql).unwrap();
                let got = extract_schema_elements(&sql, catalog).unwrap().subset;
                for table in case.expected.keys() {
                    assert!(
                        got.entries.keys().any(|t| t.eq_ignore_ascii_case(table)),
                        "{}: table {table} not extracted (got {:?})",
                        case.id,
                        got.entries.keys().collect::<Vec<_>>()
                    );
                }
                let flat = |entries: &BTreeMap<String, Vec<String>>| -> Vec<String> {
                    entries
                        .iter()
                        .flat_map(|(t, cols)| {
                            cols.iter().map(move |c| {
                                format!("{}.{}", t.to_lowercase(), c.to_lowercase())
                            })
                        })
                        .collect()
                };
                let expected = flat(&case.expected);
                let got_columns: Vec<String> = got
                    .entries
                    .iter()
                    .flat_map(|(t, cols)| {
                        cols.iter()
                            .map(move |c| format!("{}.{}", t.to_lowercase(), c.to_lowercase()))
                    })
                    .collect();
                column_tp += expected.iter().filter(|c| got_columns.contains(c)).count();
                column_fn += expected.iter().filter(|c| !got_columns.contains(c)).count();
                column_fp += got_columns.iter().filter(|c| !expected.contains(c)).count();
            }
            let precision = column_tp as f64 / (column_tp + column_fp) as f64;
            let recall = column_tp as f64 / (column_tp + column_fn) as f64;
            let f1 = 2.0 * precision * recall / (precision + recall);
            assert!(
                f1 >= 0.95,
                "column F1 {f1:.4} (precision {precision:.4}, recall {recall:.4})"
            );
        },
    );
}

#[test]
fn c3_merge_recall_property() {
    criterion(
        "criterion 3: merged subsets never have lower linking recall than either input",
        || {
            let corpus = corpus();
            let mut rng = ChaCha8Rng::seed_from_u64(33);
            let recall_vs = |subset: &SchemaSubset, gold: &SchemaSubset| -> f64 {
                let total: usize = gold.entries.values().map(|c| c.len().max(1)).sum();
                let hit: usize = gold
                    .entries
                    .iter()
                    .map(|(t, cols)| {
                        let Some(own) = subset.entries.get(t) else {
                            return 0;
                        };
                        if cols.is_empty() {
                            1
                        } else {
                            cols.iter().filter(|c| own.contains(*c)).count()
                        }
                    })
                    .sum();
                hit as f64 / total as f64
            };
            for pair in &corpus.pairs {
                let catalog = corpus.catalog(&pair.db_id).unwrap();
                let gold = extract_schema_elements(&pair.gold_sql, catalog).unwrap().subset;
                for _ in 0..5 {
                    // random sub-subsets of the full catalog
                    let sample = |rng: &mut ChaCha8Rng| {
                        let mut s = SchemaSubset::new(Some(catalog.db_id.clone()));
                        for table in &catalog.tables {
                            for (col, _) in &table.columns {
                                if rng.gen_bool(0.4) {
                                    s.add_column(&table.name, col);
                                }
                            }
                        }
                        s
                    };
                    let a = sample(&mut rng);
                    let b = sample(&mut rng);
                    let merged = merge(&a, &b).unwrap();
                    let (ra, rb, rm) =
                        (recall_vs(&a, &gold), recall_vs(&b, &gold), recall_vs(&merged, &gold));
                    assert!(rm >= ra && rm >= rb, "{}: {rm} < max({ra},{rb})", pair.pair_id);
                }
            }
        },
    );
}

#[test]
fn c4_negative_validity() {
    criterion(
        "criterion 4: every synthesized negative fails execution accuracy against its gold",
        || {
            let corpus = corpus();
            let (negatives, stats) = make_negatives(&corpus, None, 2, 17, 1).unwrap();
            assert!(!negatives.is_empty());
            for negative in &negatives {
                let pair = corpus.pair(&negative.pair_id).unwrap();
                let catalog = corpus.catalog(&pair.db_id).unwrap();
                let bad = &negative.bad_sql;
                assert!(
                    !squill_core::executor::ex_for_pair(
                        catalog,
                        &pair.gold_sql,
                        bad,
                        DEFAULT_TIMEOUT_MS
                    ),
                    "{}: {:?} matches gold",
                    negative.pair_id,
                    bad.text
                );
            }
            println!(
                "  negatives: {} produced, {} dropped ({:.1}% drop rate)",
                stats.produced,
                stats.dropped,
                stats.drop_rate() * 100.0
            );
        },
    );
}

fn filter_mock(removed: &[&str]) -> MockBackend {
    let mut entries: Vec<ScriptEntry> = removed
        .iter()
        .map(|pair_id| {
            MockBackend::entry(
                PromptTask::Filter,
                pair_id,
                "The execution results of the SQL query cannot correctly answer the question.",
            )
        })
        .collect();
    entries.push(ScriptEntry {
        matcher: ScriptMatcher::PromptRegex(".*".into()),
        response: A_POS.into(),
        consume_once: false,
    });
    MockBackend::new(entries).unwrap()
}

fn synthesize(corpus: &Corpus, seed: u64) -> (Vec<squill_core::synth::SftRecord>, squill_core::synth::AssemblyManifest) {
    let mock = filter_mock(&["p03", "p17"]);
    let (kept, removed) = filter_noise(corpus, &mock, 4).unwrap();
    assert_eq!(removed.len(), 2);
    let ts = synth_ts(&kept).unwrap();
    let sl = synth_sl(&kept).unwrap();
    let (negatives, _) = make_negatives(&kept, None, 1, seed, 1).unwrap();
    let nc = synth_nc(&kept, &negatives).unwrap();
    let cw = synth_cw(&kept, seed).unwrap();
    let caps = AssemblyCaps {
        sl: Some(10),
        nc: Some(10),
        cw: Some(10),
    };
    assemble_msft(ts, sl, nc, cw, &caps, seed)
}

#[test]
fn c5_dataset_arithmetic() {
    criterion(
        "criterion 5: manifest {kept:18, TS:18, SL:10, NC:10, CW:10, total:48}, byte-identical rerun",
        || {
            let corpus = corpus();
            let (records_a, manifest) = synthesize(&corpus, 99);
            assert_eq!(manifest.kept, 18);
            assert_eq!(manifest.ts, 18);
            assert_eq!(manifest.sl, 10);
            assert_eq!(manifest.nc, 10);
            assert_eq!(manifest.cw, 10);
            assert_eq!(manifest.total, 48);
            assert_eq!(records_a.len(), 48);

            let (records_b, manifest_b) = synthesize(&corpus, 99);
            assert_eq!(manifest, manifest_b);
            let dir = tempfile::tempdir().unwrap();
            let path_a = dir.path().join("a.jsonl");
            let path_b = dir.path().join("b.jsonl");
            write_sft_records(&records_a, &path_a).unwrap();
            write_sft_records(&records_b, &path_b).unwrap();
            assert_eq!(std::fs::read(&path_a).unwrap(), std::fs::read(&path_b).unwrap());

            // full-scale counting arithmetic
            let caps = AssemblyCaps {
                sl: Some(10_000),
                nc: Some(10_000),
                cw: Some(10_000),
            };
            let full = assembled_counts(16_428 - 898, 20_000, 20_000, 20_000, &caps);
            assert_eq!(full.ts, 15_530);
            assert_eq!(full.total, 45_530);
        },
    );
}

#[test]
fn c6_pipeline_branch_coverage_and_monotonicity() {
    criterion(
        "criterion 6: four scripted pipeline branches plus 1,000-run executability monotonicity",
        || {
            let corpus = corpus();
            let options = McpOptions::default();

            // clean pass: simple query, everything agrees
            let pair = corpus.pair("p01").unwrap();
            let catalog = corpus.catalog(&pair.db_id).unwrap();
            let mock = MockBackend::new(vec![
                MockBackend::entry(PromptTask::Sl, "p01", "follows: f1, f2"),
                MockBackend::entry(PromptTask::Ts, "p01", &fenced(&pair.gold_sql.text)),
                MockBackend::entry(PromptTask::Nc, "p01", A_POS),
            ])
            .unwrap();
            let trace = run_mcp(catalog, "p01", &pair.question, None, None, &options, &mock);
            assert_eq!(trace.final_sql.text, pair.gold_sql.text);
            assert!(!trace.nc_applied && !trace.cw_triggered);

            // correction accepted
            let pair = corpus.pair("p07").unwrap();
            let catalog = corpus.catalog(&pair.db_id).unwrap();
            let mut pseudo = MockBackend::entry(PromptTask::Ts, "p07", &fenced(&pair.gold_sql.text));
            pseudo.consume_once = true;
            let mock = MockBackend::new(vec![
                MockBackend::entry(PromptTask::Sl, "p07", "user_profiles: email, followers"),
                pseudo,
                MockBackend::entry(PromptTask::Ts, "p07", &fenced("SELECT emial FROM user_profiles")),
                MockBackend::entry(PromptTask::Nc, "p07", &a_neg(&pair.gold_sql)),
            ])
            .unwrap();
            let trace = run_mcp(catalog, "p07", &pair.question, None, None, &options, &mock);
            assert!(trace.nc_applied);
            assert_eq!(trace.final_sql.text, pair.gold_sql.text);
            assert!(!trace.cw_triggered);

            // correction rejected by the executor gate, then CW rescues
            let broken = SqlQuery::gold("SELECT 1").map(|mut q| {
                q.text = "SELEC email FROM user_profiles".into();
                q
            })
            .unwrap();
            let mut pseudo = MockBackend::entry(PromptTask::Ts, "p07", &fenced(&pair.gold_sql.text));
            pseudo.consume_once = true;
            let mock = MockBackend::new(vec![
                MockBackend::entry(PromptTask::Sl, "p07", "user_profiles: email, followers"),
                pseudo,
                MockBackend::entry(PromptTask::Ts, "p07", &fenced("SELECT emial FROM user_profiles")),
                MockBackend::entry(PromptTask::Nc, "p07", &a_neg(&broken)),
                MockBackend::entry(PromptTask::Cw, "p07", &fenced(&pair.gold_sql.text)),
            ])
            .unwrap();
            let trace = run_mcp(catalog, "p07", &pair.question, None, None, &options, &mock);
            assert!(!trace.nc_applied, "gate must reject the broken correction");
            assert!(trace.cw_triggered);
            assert_eq!(trace.cw_reason, Some(CwReason::ExecFailed));
            assert!(trace.cw_applied);
            assert_eq!(trace.final_sql.text, pair.gold_sql.text);

            // hard query triggers CW even though the initial SQL executes
            let pair = corpus.pair("p17").unwrap();
            let catalog = corpus.catalog(&pair.db_id).unwrap();
            let mock = MockBackend::new(vec![
                MockBackend::entry(PromptTask::Sl, "p17", ""),
                MockBackend::entry(PromptTask::Ts, "p17", &fenced(&pair.gold_sql.text)),
                MockBackend::entry(PromptTask::Nc, "p17", A_POS),
                MockBackend::entry(PromptTask::Cw, "p17", &fenced(&pair.gold_sql.text)),
            ])
            .unwrap();
            let trace = run_mcp(catalog, "p17", &pair.question, None, None, &options, &mock);
            assert!(trace.initial_outcome.ok);
            assert_eq!(trace.cw_reason, Some(CwReason::Hard));
            assert!(trace.cw_applied);
            assert_eq!(trace.final_sql.text, pair.gold_sql.text);

            // randomized-script monotonicity: once any stage holds an
            // executing query, the final query executes
            let mut rng = ChaCha8Rng::seed_from_u64(4242);
            let mut runs = 0usize;
            while runs < 1000 {
                let pair = &corpus.pairs[rng.gen_range(0..corpus.pairs.len())];
                let catalog = corpus.catalog(&pair.db_id).unwrap();
                let sibling_golds: Vec<&str> = corpus
                    .pairs
                    .iter()
                    .filter(|p| p.db_id == pair.db_id)
                    .map(|p| p.gold_sql.text.as_str())
                    .collect();
                let mut any_sql = |rng: &mut ChaCha8Rng| -> String {
                    match rng.gen_range(0..3) {
                        0 => pair.gold_sql.text.clone(),
                        1 => sibling_golds[rng.gen_range(0..sibling_golds.len())].to_string(),
                        _ => "SELECT broken FROM nowhere".to_string(),
                    }
                };
                let ts = match rng.gen_range(0..4) {
                    0 => "no sql here".to_string(),
                    _ => fenced(&any_sql(&mut rng)),
                };
                let nc = match rng.gen_range(0..3) {
                    0 => A_POS.to_string(),
                    1 => format!(
                        "The execution results of the SQL query cannot correctly answer the \
                         question. The correct SQL query should be: {}",
                        any_sql(&mut rng)
                    ),
                    _ => "cannot correctly answer (no correction given)".to_string(),
                };
                let cw = match rng.gen_range(0..3) {
                    0 => "nothing useful".to_string(),
                    _ => fenced(&any_sql(&mut rng)),
                };
                let sl = match rng.gen_range(0..3) {
                    0 => String::new(),
                    1 => "not a schema".to_string(),
                    _ => render_sl_subset(&catalog.full_subset()),
                };
                let mock = MockBackend::new(vec![
                    MockBackend::entry(PromptTask::Sl, &pair.pair_id, &sl),
                    MockBackend::entry(PromptTask::Ts, &pair.pair_id, &ts),
                    MockBackend::entry(PromptTask::Nc, &pair.pair_id, &nc),
                    MockBackend::entry(PromptTask::Cw, &pair.pair_id, &cw),
                ])
                .unwrap();
                let trace = run_mcp(
                    catalog,
                    &pair.pair_id,
                    &pair.question,
                    None,
                    None,
                    &options,
                    &mock,
                );
                let had_executing_stage =
                    trace.initial_outcome.ok || trace.nc_applied || trace.cw_applied;
                if had_executing_stage {
                    assert!(
                        trace.final_outcome.ok,
                        "monotonicity violated on {}: {trace:?}",
                        pair.pair_id
                    );
                }
                runs += 1;
            }
        },
    );
}

#[test]
fn c7_oracle_modes() {
    criterion(
        "criterion 7: U1 echo-gold run scores 100% EX; U2 prefixes are strict gold prefixes",
        || {
            let corpus = corpus();
            let entries: Vec<ScriptEntry> = corpus
                .pairs
                .iter()
                .flat_map(|p| {
                    vec![
                        MockBackend::entry(PromptTask::Ts, &p.pair_id, &fenced(&p.gold_sql.text)),
                        MockBackend::entry(PromptTask::Nc, &p.pair_id, A_POS),
                        MockBackend::entry(PromptTask::Cw, &p.pair_id, &fenced(&p.gold_sql.text)),
                    ]
                })
                .collect();
            let mock = MockBackend::new(entries).unwrap();
            let options = McpOptions {
                oracle_schema: true,
                ..McpOptions::default()
            };
            let traces = run_mcp_corpus(&corpus, &options, &mock, 4);
            let predictions: Vec<PredictionRecord> = traces
                .iter()
                .map(|t| PredictionRecord {
                    pair_id: t.pair_id.clone(),
                    db_id: t.db_id.clone(),
                    sql: t.final_sql.text.clone(),
                })
                .collect();
            let report = evaluate_ex(&corpus, &predictions, DEFAULT_TIMEOUT_MS).unwrap();
            assert_eq!(report.ex_overall, 1.0, "U1 echo-gold must score 100%");

            for pair in &corpus.pairs {
                let half = truncate_for_refinement(&pair.gold_sql, RefinementStrategy::HalfPrefix);
                assert!(pair.gold_sql.text.starts_with(&half), "{}", pair.pair_id);
                assert!(half.len() < pair.gold_sql.text.len(), "{}", pair.pair_id);
            }
        },
    );
}

#[test]
fn c8_round_trips() {
    criterion(
        "criterion 8: SL render/parse identity on 100 random subsets; A_neg recovers every gold",
        || {
            let corpus = corpus();
            let mut rng = ChaCha8Rng::seed_from_u64(808);
            let catalogs: Vec<_> = corpus.catalogs.values().collect();
            for _ in 0..100 {
                let catalog = catalogs[rng.gen_range(0..catalogs.len())];
                let mut subset = SchemaSubset::new(Some(catalog.db_id.clone()));
                for table in &catalog.tables {
                    if rng.gen_bool(0.6) {
                        subset.add_table(&table.name);
                        for (col, _) in &table.columns {
                            if rng.gen_bool(0.5) {
                                subset.add_column(&table.name, col);
                            }
                        }
                    }
                }
                if subset.is_empty() {
                    subset.add_table(&catalog.tables[0].name);
                }
                let rendered = render_sl_subset(&subset);
                let (parsed, warnings) = parse_sl_response(&rendered, catalog);
                assert!(warnings.is_empty(), "{warnings:?}");
                assert_eq!(parsed.entries, subset.entries);
            }

            for pair in &corpus.pairs {
                let verdict = parse_nc_response(&a_neg(&pair.gold_sql));
                assert!(!verdict.is_correct);
                assert_eq!(verdict.corrected_sql.unwrap().text, pair.gold_sql.text);
            }
        },
    );
}

#[test]
fn c9_determinism() {
    criterion(
        "criterion 9: prompts, synthesis output, and scripted runs are byte-identical across reruns",
        || {
            let corpus = corpus();

            // prompts
            for pair in &corpus.pairs {
                let catalog = corpus.catalog(&pair.db_id).unwrap();
                let schema =
                    squill_core::catalog::render_schema(catalog, None, 3).unwrap();
                let schema2 =
                    squill_core::catalog::render_schema(catalog, None, 3).unwrap();
                assert_eq!(schema, schema2);
                let meta = PromptMeta {
                    pair_id: pair.pair_id.clone(),
                    db_id: pair.db_id.clone(),
                };
                let a = build_ts_prompt(&schema, &pair.question, pair.hint.as_deref(), meta.clone())
                    .unwrap();
                let b = build_ts_prompt(&schema, &pair.question, pair.hint.as_deref(), meta).unwrap();
                assert_eq!(a.text, b.text);
            }

            // synthesis (covered byte-for-byte in criterion 5; spot-check here)
            let (records_a, _) = synthesize(&corpus, 7);
            let (records_b, _) = synthesize(&corpus, 7);
            let flat = |records: &[squill_core::synth::SftRecord]| {
                records
                    .iter()
                    .map(|r| format!("{:?}\u{1}{}\u{1}{}\u{1}{}", r.task, r.instruction, r.response, r.source_pair_id))
                    .collect::<Vec<_>>()
                    .join("\u{2}")
            };
            assert_eq!(flat(&records_a), flat(&records_b));

            // scripted end-to-end runs
            let make_mock = || {
                let entries: Vec<ScriptEntry> = corpus
                    .pairs
                    .iter()
                    .flat_map(|p| {
                        vec![
                            MockBackend::entry(PromptTask::Sl, &p.pair_id, ""),
                            MockBackend::entry(PromptTask::Ts, &p.pair_id, &fenced(&p.gold_sql.text)),
                            MockBackend::entry(PromptTask::Nc, &p.pair_id, A_POS),
                            MockBackend::entry(PromptTask::Cw, &p.pair_id, &fenced(&p.gold_sql.text)),
                        ]
                    })
                    .collect();
                MockBackend::new(entries).unwrap()
            };
            let options = McpOptions::default();
            let traces_a = run_mcp_corpus(&corpus, &options, &make_mock(), 4);
            let traces_b = run_mcp_corpus(&corpus, &options, &make_mock(), 4);
            let dump = |traces: &[squill_core::mcp::McpTrace]| {
                traces
                    .iter()
                    .map(|t| serde_json::to_string(t).unwrap())
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            assert_eq!(dump(&traces_a), dump(&traces_b));

            // linking metrics are deterministic too
            let subsets: BTreeMap<String, SchemaSubset> = corpus
                .pairs
                .iter()
                .map(|p| {
                    let catalog = corpus.catalog(&p.db_id).unwrap();
                    (
                        p.pair_id.clone(),
                        extract_schema_elements(&p.gold_sql, catalog).unwrap().subset,
                    )
                })
                .collect();
            let la = linking_metrics(&subsets, &corpus).unwrap();
            let lb = linking_metrics(&subsets, &corpus).unwrap();
            assert_eq!(
                serde_json::to_string(&la).unwrap(),
                serde_json::to_string(&lb).unwrap()
            );
        },
    );
}
