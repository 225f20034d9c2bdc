//! Shared helpers for the benchmark targets: locates the fixture corpus
//! shipped with `squill-core`.

use std::path::{Path, PathBuf};

use squill_core::catalog::load_corpus;
use squill_core::Corpus;

/// Root of the committed fixture corpus.
pub fn fixture_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../squill-core/fixtures/minicorpus")
}

/// Loads the fixture corpus, panicking on any inconsistency.
pub fn fixture_corpus() -> Corpus {
    load_corpus(&fixture_root()).expect("fixture corpus loads")
}
