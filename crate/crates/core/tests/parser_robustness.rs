//! Replays the fuzz corpus and mutations of it through every parser.

use std::fs;
use std::path::PathBuf;

use aoi_observer::io::{parse_gain_file, parse_schedule, parse_system};
use aoi_observer::scenario::parse_scenario;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn parse_all(text: &str) {
    let _ = parse_system(text);
    let _ = parse_schedule(text);
    let _ = parse_scenario(text);
    let _ = parse_gain_file(text);
}

fn corpus(target: &str) -> Vec<String> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files.iter().map(|p| fs::read_to_string(p).unwrap()).collect()
}

#[test]
fn corpus_seeds_parse_with_their_own_parser() {
    for text in corpus("parse_system") {
        let ok = parse_system(&text).is_ok();
        assert_eq!(ok, !text.contains("[3.0]]"), "{text}");
    }
    for text in corpus("parse_schedule") {
        parse_schedule(&text).unwrap();
    }
    for text in corpus("parse_scenario") {
        parse_scenario(&text).unwrap();
    }
    for text in corpus("parse_gain_file") {
        parse_gain_file(&text).unwrap();
    }
}

/// Truncations, byte flips and splices of every seed.
#[test]
fn mutated_seeds_do_not_panic() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let seeds: Vec<String> = ["parse_system", "parse_schedule", "parse_scenario", "parse_gain_file"]
        .iter()
        .flat_map(|t| corpus(t))
        .collect();
    for seed in &seeds {
        let bytes = seed.as_bytes();
        for _ in 0..40 {
            let mut b = bytes.to_vec();
            match rng.random_range(0..3) {
                0 => b.truncate(rng.random_range(0..=b.len())),
                1 => {
                    for _ in 0..rng.random_range(1..4) {
                        let i = rng.random_range(0..b.len());
                        b[i] = b"0123456789-.e[]{},:\"wE+"[rng.random_range(0..23)];
                    }
                }
                _ => {
                    let other = seeds[rng.random_range(0..seeds.len())].as_bytes();
                    let cut = rng.random_range(0..=b.len());
                    let from = rng.random_range(0..=other.len());
                    b.truncate(cut);
                    b.extend_from_slice(&other[from..]);
                }
            }
            if let Ok(text) = std::str::from_utf8(&b) {
                parse_all(text);
            }
        }
    }
}

#[test]
fn hostile_values_are_rejected() {
    let cases = [
        r#"{"A": [[1e999]], "C": [[[1.0]]]}"#,
        r#"{"A": [], "C": []}"#,
        r#"{"N": 0, "intervals": [0, 2], "edges": {}}"#,
        r#"{"N": 2, "intervals": [0, 2], "edges": {"x": [[0, 1]]}}"#,
        r#"{"N": 2, "intervals": [0, 2], "edges": {"0": [[0, 9]]}}"#,
        r#"{"N": 2, "interval_rule": {"kind": "constant", "period": 0}, "edges": {"0": [[0, 1]]}}"#,
        r#"{"N": 2, "horizon": 18446744073709551615, "interval_rule": {"kind": "floor-sqrt"}, "edges": {}}"#,
    ];
    for text in cases {
        assert!(parse_system(text).is_err() && parse_schedule(text).is_err(), "{text}");
    }
}

proptest! {
    #[test]
    fn arbitrary_text_does_not_panic(text in "\\PC{0,200}") {
        parse_all(&text);
    }

    #[test]
    fn json_shaped_text_does_not_panic(text in r#"\{("[A-Za-z$_]{1,8}": ?(-?[0-9]{1,4}(\.[0-9]+)?|\[[0-9\[\], .-]{0,30}\]|"[a-z-]{0,10}"|\{\}),? ?){0,6}\}"#) {
        parse_all(&text);
    }
}
