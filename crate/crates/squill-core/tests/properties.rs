//! Property tests for the algebraic invariants of subset merging,
//! normalization, and truncation.

use proptest::prelude::*;
use std::collections::BTreeMap;

use squill_core::sqlkit::{
    lex, merge, normalize, truncate_random, Provenance, SchemaSubset,
};

fn subset_strategy() -> impl Strategy<Value = SchemaSubset> {
    let table = prop::sample::select(vec!["alpha", "beta", "gamma", "delta"]);
    let column = prop::sample::select(vec!["a", "b", "c", "d", "e"]);
    prop::collection::btree_map(table, prop::collection::btree_set(column, 0..4), 0..4).prop_map(
        |entries: BTreeMap<&str, _>| {
            let mut subset = SchemaSubset::new(None);
            for (t, cols) in entries {
                subset.add_table(t);
                for c in cols {
                    subset.add_column(t, c);
                }
            }
            subset
        },
    )
}

fn sql_strategy() -> impl Strategy<Value = String> {
    let column = prop::sample::select(vec!["a", "b", "c", "price", "qty"]);
    let table = prop::sample::select(vec!["t", "orders", "items"]);
    (
        prop::collection::vec(column, 1..4),
        table,
        prop::option::of(0u32..100),
    )
        .prop_map(|(cols, table, limit)| {
            let mut sql = format!("SELECT {} FROM {table}", cols.join(", "));
            if let Some(limit) = limit {
                sql.push_str(&format!(" LIMIT {limit}"));
            }
            sql
        })
}

proptest! {
    #[test]
    fn merge_is_commutative(a in subset_strategy(), b in subset_strategy()) {
        prop_assert_eq!(merge(&a, &b).unwrap(), merge(&b, &a).unwrap());
    }

    #[test]
    fn merge_is_associative(
        a in subset_strategy(),
        b in subset_strategy(),
        c in subset_strategy(),
    ) {
        let left = merge(&merge(&a, &b).unwrap(), &c).unwrap();
        let right = merge(&a, &merge(&b, &c).unwrap()).unwrap();
        prop_assert_eq!(left, right);
    }

    #[test]
    fn merge_is_idempotent(a in subset_strategy()) {
        prop_assert_eq!(merge(&a, &a).unwrap(), a);
    }

    #[test]
    fn merge_contains_both_inputs(a in subset_strategy(), b in subset_strategy()) {
        let merged = merge(&a, &b).unwrap();
        prop_assert!(merged.contains(&a));
        prop_assert!(merged.contains(&b));
    }

    #[test]
    fn normalization_is_idempotent(sql in sql_strategy()) {
        let once = normalize(&sql, Provenance::Gold).unwrap();
        let twice = normalize(&once.text, Provenance::Gold).unwrap();
        prop_assert_eq!(once.text, twice.text);
    }

    #[test]
    fn random_truncation_is_a_strict_token_prefix(sql in sql_strategy(), seed in any::<u64>()) {
        let query = normalize(&sql, Provenance::Gold).unwrap();
        let tokens = lex(&query.text).unwrap();
        prop_assume!(tokens.len() >= 2);
        let prefix = truncate_random(&query, seed).unwrap();
        prop_assert!(query.text.starts_with(&prefix));
        prop_assert!(prefix.len() < query.text.len());
        // the cut lands on a token boundary: the prefix lexes cleanly into
        // fewer tokens whose texts match the originals
        let prefix_tokens = lex(&prefix).unwrap();
        prop_assert!(prefix_tokens.len() < tokens.len());
        for (p, t) in prefix_tokens.iter().zip(&tokens) {
            prop_assert_eq!(&p.text, &t.text);
        }
    }

    #[test]
    fn same_seed_same_truncation(sql in sql_strategy(), seed in any::<u64>()) {
        let query = normalize(&sql, Provenance::Gold).unwrap();
        prop_assume!(lex(&query.text).unwrap().len() >= 2);
        prop_assert_eq!(
            truncate_random(&query, seed).unwrap(),
            truncate_random(&query, seed).unwrap()
        );
    }
}
