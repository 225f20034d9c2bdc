//! `squill` — command-line front end: dataset synthesis, corpus filtering,
//! collaborative inference, evaluation, and ad-hoc SQL execution.

mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use thiserror::Error;

use config::{is_header_line, ArtifactHeader, ConfigError, RunConfig};
use squill_core::catalog::{load_corpus, write_corpus_pairs, CatalogError, Corpus};
use squill_core::eval::{evaluate_ex, render_json, render_report, EvalError};
use squill_core::executor::execute;
use squill_core::mcp::{run_mcp, McpTrace, PredictionRecord};
use squill_core::sqlkit::{normalize, Provenance, SqlError};
use squill_core::synth::{
    assemble_msft, filter_noise, make_negatives, synth_cw, synth_nc, synth_sl, synth_ts,
    write_sft_records, AssemblyCaps, SynthError,
};

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sql(#[from] SqlError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("incomplete run: {done} of {total} pairs processed")]
    Incomplete { done: usize, total: usize },
}

fn io_ctx(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

#[derive(Parser)]
#[command(name = "squill", about = "Text2SQL dataset synthesis, inference, and evaluation")]
struct Cli {
    /// TOML run configuration; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Overrides {
    /// Corpus root containing tables.json, pairs.json(l), database/.
    #[arg(long)]
    corpus_root: Option<PathBuf>,
    /// Directory artifacts are written to.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker pool size for backend calls and scoring.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Line-delimited mock backend script.
    #[arg(long)]
    mock_script: Option<PathBuf>,
    /// OpenAI-compatible chat-completions endpoint.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Filter the corpus, synthesize all four task datasets, and write the
    /// combined SFT file plus its manifest.
    Synth {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run only the noisy-correspondence filter; write kept and removed lists.
    Filter {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the collaboration pipeline over the corpus; write predictions and
    /// traces. `--resume` continues from the per-pair journal.
    Infer {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        resume: bool,
        /// Take the schema subset from the gold query (oracle mode).
        #[arg(long)]
        oracle_schema: bool,
        /// Hand the refiner half of the gold query as its prefix (oracle mode).
        #[arg(long)]
        oracle_hint: bool,
    },
    /// Score a predictions file against the corpus.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        /// Line-delimited predictions ({pair_id, db_id, sql} per line).
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Execute one SQL statement against a SQLite file and print the outcome.
    Exec {
        /// SQLite database file.
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        sql: String,
        #[arg(long, default_value_t = squill_core::executor::DEFAULT_TIMEOUT_MS)]
        timeout_ms: u64,
    },
}

fn resolve(config_path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut config = match config_path {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &overrides.corpus_root {
        config.corpus_root = v.clone();
    }
    if let Some(v) = &overrides.out_dir {
        config.out_dir = v.clone();
    }
    if let Some(v) = overrides.seed {
        config.seed = v;
    }
    if let Some(v) = overrides.parallelism {
        config.parallelism = v;
    }
    if let Some(v) = &overrides.mock_script {
        config.backend.mock_script = Some(v.clone());
        config.backend.endpoint = None;
    }
    if let Some(v) = &overrides.endpoint {
        config.backend.endpoint = Some(v.clone());
    }
    if let Some(v) = &overrides.model {
        config.backend.model = Some(v.clone());
    }
    Ok(config)
}

fn prepare(config: &RunConfig) -> Result<Corpus, CliError> {
    std::fs::create_dir_all(&config.out_dir)
        .map_err(io_ctx(format!("creating {}", config.out_dir.display())))?;
    Ok(load_corpus(&config.corpus_root)?)
}

fn write_with_header(path: &Path, header: &ArtifactHeader, body: &str) -> Result<(), CliError> {
    let mut out = header.jsonl_line();
    out.push_str(body);
    std::fs::write(path, out).map_err(io_ctx(format!("writing {}", path.display())))
}

fn cmd_synth(config: &RunConfig) -> Result<(), CliError> {
    let corpus = prepare(config)?;
    let backend = config.build_backend()?;
    let header = ArtifactHeader::of(config);

    let (kept, removed) = filter_noise(&corpus, backend.as_ref(), config.parallelism)?;
    let (negatives, negative_stats) = make_negatives(
        &kept,
        Some(backend.as_ref()),
        config.synth.per_pair_negatives,
        config.seed,
        config.parallelism,
    )?;
    let ts = synth_ts(&kept)?;
    let sl = synth_sl(&kept)?;
    let nc = synth_nc(&kept, &negatives)?;
    let cw = synth_cw(&kept, config.seed)?;
    let caps = AssemblyCaps {
        sl: config.synth.sl_cap,
        nc: config.synth.nc_cap,
        cw: config.synth.cw_cap,
    };
    let (records, counts) = assemble_msft(ts, sl, nc, cw, &caps, config.seed);

    let data_path = config.out_dir.join("msft.jsonl");
    let tmp = config.out_dir.join("msft.jsonl.tmp");
    write_sft_records(&records, &tmp)?;
    let body = std::fs::read_to_string(&tmp).map_err(io_ctx("rereading dataset"))?;
    std::fs::remove_file(&tmp).ok();
    write_with_header(&data_path, &header, &body)?;

    let manifest = serde_json::json!({
        "config_sha256": header.config_sha256,
        "seed": header.seed,
        "counts": counts,
        "negatives": negative_stats,
        "removed_pair_ids": removed.iter().map(|r| r.pair_id.clone()).collect::<Vec<_>>(),
    });
    let manifest_path = config.out_dir.join("msft.manifest.json");
    std::fs::write(&manifest_path, format!("{:#}\n", manifest))
        .map_err(io_ctx(format!("writing {}", manifest_path.display())))?;
    println!(
        "wrote {} records to {} (TS {}, SL {}, NC {}, CW {}; {} pairs filtered out)",
        counts.total,
        data_path.display(),
        counts.ts,
        counts.sl,
        counts.nc,
        counts.cw,
        removed.len()
    );
    Ok(())
}

fn cmd_filter(config: &RunConfig) -> Result<(), CliError> {
    let corpus = prepare(config)?;
    let backend = config.build_backend()?;
    let header = ArtifactHeader::of(config);
    let (kept, removed) = filter_noise(&corpus, backend.as_ref(), config.parallelism)?;

    let kept_path = config.out_dir.join("kept_pairs.json");
    write_corpus_pairs(&kept.pairs, &kept_path)?;
    let removed_path = config.out_dir.join("removed_pairs.json");
    let removed_doc = serde_json::json!({
        "config_sha256": header.config_sha256,
        "seed": header.seed,
        "removed": removed,
    });
    std::fs::write(&removed_path, format!("{:#}\n", removed_doc))
        .map_err(io_ctx(format!("writing {}", removed_path.display())))?;
    println!(
        "kept {} pairs ({}), removed {} ({})",
        kept.pairs.len(),
        kept_path.display(),
        removed.len(),
        removed_path.display()
    );
    Ok(())
}

fn read_journal(path: &Path) -> Vec<McpTrace> {
    let Ok(raw) = std::fs::read_to_string(path) else {
        return Vec::new();
    };
    raw.lines()
        .filter(|l| !l.trim().is_empty() && !is_header_line(l))
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect()
}

fn cmd_infer(
    config: &RunConfig,
    resume: bool,
    oracle_schema: bool,
    oracle_hint: bool,
) -> Result<(), CliError> {
    let corpus = prepare(config)?;
    let backend = config.build_backend()?;
    let header = ArtifactHeader::of(config);
    let mut options = config.mcp.to_options();
    options.oracle_schema |= oracle_schema;
    options.oracle_hint |= oracle_hint;

    let journal_path = config.out_dir.join("infer.journal.jsonl");
    let mut done: std::collections::BTreeMap<String, McpTrace> = std::collections::BTreeMap::new();
    if resume {
        for trace in read_journal(&journal_path) {
            done.insert(trace.pair_id.clone(), trace);
        }
        if !done.is_empty() {
            println!("resuming: {} pairs already journaled", done.len());
        }
    }
    let journal = std::fs::OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(&journal_path)
        .map_err(io_ctx(format!("opening {}", journal_path.display())))?;
    let journal = Mutex::new(journal);
    if !resume {
        journal
            .lock()
            .unwrap()
            .write_all(header.jsonl_line().as_bytes())
            .map_err(io_ctx("writing journal header"))?;
    }

    let todo: Vec<&squill_core::CorpusPair> = corpus
        .pairs
        .iter()
        .filter(|p| !done.contains_key(&p.pair_id))
        .collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let fresh: Vec<Mutex<Option<McpTrace>>> = todo.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..config.parallelism.max(1).min(todo.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= todo.len() {
                    break;
                }
                let pair = todo[i];
                let catalog = corpus.catalog(&pair.db_id).expect("corpus validated");
                let trace = run_mcp(
                    catalog,
                    &pair.pair_id,
                    &pair.question,
                    pair.hint.as_deref(),
                    Some(&pair.gold_sql),
                    &options,
                    backend.as_ref(),
                );
                let line = format!("{}\n", serde_json::to_string(&trace).expect("serializable"));
                let mut journal = journal.lock().unwrap();
                let _ = journal.write_all(line.as_bytes());
                let _ = journal.flush();
                drop(journal);
                *fresh[i].lock().unwrap() = Some(trace);
            });
        }
    });
    for cell in fresh {
        if let Some(trace) = cell.into_inner().unwrap() {
            done.insert(trace.pair_id.clone(), trace);
        }
    }

    let traces: Vec<&McpTrace> = corpus
        .pairs
        .iter()
        .filter_map(|p| done.get(&p.pair_id))
        .collect();
    if traces.len() != corpus.pairs.len() {
        return Err(CliError::Incomplete {
            done: traces.len(),
            total: corpus.pairs.len(),
        });
    }

    let mut predictions = header.jsonl_line();
    let mut trace_body = header.jsonl_line();
    for trace in &traces {
        let record = PredictionRecord {
            pair_id: trace.pair_id.clone(),
            db_id: trace.db_id.clone(),
            sql: trace.final_sql.text.clone(),
        };
        predictions.push_str(&serde_json::to_string(&record).expect("serializable"));
        predictions.push('\n');
        trace_body.push_str(&serde_json::to_string(trace).expect("serializable"));
        trace_body.push('\n');
    }
    let predictions_path = config.out_dir.join("predictions.jsonl");
    std::fs::write(&predictions_path, predictions)
        .map_err(io_ctx(format!("writing {}", predictions_path.display())))?;
    let traces_path = config.out_dir.join("traces.jsonl");
    std::fs::write(&traces_path, trace_body)
        .map_err(io_ctx(format!("writing {}", traces_path.display())))?;
    let errors = traces.iter().filter(|t| t.error.is_some()).count();
    println!(
        "processed {} pairs -> {} ({} with stage errors)",
        traces.len(),
        predictions_path.display(),
        errors
    );
    Ok(())
}

fn read_predictions_file(path: &Path) -> Result<Vec<PredictionRecord>, CliError> {
    #[derive(Deserialize)]
    struct Line(PredictionRecord);
    let raw = std::fs::read_to_string(path)
        .map_err(io_ctx(format!("reading {}", path.display())))?;
    let mut records = Vec::new();
    for line in raw.lines() {
        if line.trim().is_empty() || is_header_line(line) {
            continue;
        }
        let Line(record) = serde_json::from_str(line).map_err(|e| CliError::Io {
            context: format!("parsing {}", path.display()),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })?;
        records.push(record);
    }
    Ok(records)
}

fn cmd_eval(config: &RunConfig, predictions: &Path) -> Result<(), CliError> {
    let corpus = prepare(config)?;
    let header = ArtifactHeader::of(config);
    let records = read_predictions_file(predictions)?;
    let report = evaluate_ex(&corpus, &records, config.timeout_ms)?;

    let text = format!(
        "config: {}  seed: {}\n\n{}",
        header.config_sha256,
        header.seed,
        render_report(&report)
    );
    let text_path = config.out_dir.join("ex_report.txt");
    std::fs::write(&text_path, &text)
        .map_err(io_ctx(format!("writing {}", text_path.display())))?;
    let json_doc = serde_json::json!({
        "config_sha256": header.config_sha256,
        "seed": header.seed,
        "report": report,
    });
    let json_path = config.out_dir.join("ex_report.json");
    std::fs::write(&json_path, render_json(&json_doc))
        .map_err(io_ctx(format!("writing {}", json_path.display())))?;
    print!("{text}");
    Ok(())
}

fn cmd_exec(db: &Path, sql: &str, timeout_ms: u64) -> Result<(), CliError> {
    let query = normalize(sql, Provenance::Predicted)?;
    let outcome = execute(db, &query, timeout_ms);
    println!("{}", serde_json::to_string_pretty(&outcome).expect("serializable"));
    if outcome.is_ok() {
        Ok(())
    } else {
        std::process::exit(1);
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { overrides } => {
            resolve(cli.config.as_deref(), overrides).and_then(|c| cmd_synth(&c))
        }
        Command::Filter { overrides } => {
            resolve(cli.config.as_deref(), overrides).and_then(|c| cmd_filter(&c))
        }
        Command::Infer {
            overrides,
            resume,
            oracle_schema,
            oracle_hint,
        } => resolve(cli.config.as_deref(), overrides)
            .and_then(|c| cmd_infer(&c, *resume, *oracle_schema, *oracle_hint)),
        Command::Eval {
            overrides,
            predictions,
        } => resolve(cli.config.as_deref(), overrides).and_then(|c| cmd_eval(&c, predictions)),
        Command::Exec { db, sql, timeout_ms } => cmd_exec(db, sql, *timeout_ms),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
