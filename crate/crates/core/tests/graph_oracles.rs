mod common;

use std::collections::{BTreeMap, BTreeSet};

use aoi_observer::graph::{
    generate_sequence, intervals_from_rule, is_jointly_strongly_r_robust, is_r_reachable, is_strongly_connected,
    is_strongly_r_robust_wrt, union_graph, EdgeSet, GraphSequence, IntervalRule, SequenceKind,
};
use common::{random_edges, robust_oracle, sc_oracle};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_sequence(rng: &mut ChaCha8Rng, n: usize, horizon: u64) -> GraphSequence {
    let rule = IntervalRule::Constant { period: 2 };
    let intervals = intervals_from_rule(&rule, n, horizon).unwrap();
    let schedule: BTreeMap<u64, EdgeSet> = (0..=horizon).map(|k| (k, random_edges(rng, n, 0.15))).collect();
    GraphSequence::new(n, horizon, intervals, rule, schedule).unwrap()
}

#[test]
fn union_matches_fold_of_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seq = random_sequence(&mut rng, 5, 12);
    let mut folded = BTreeSet::new();
    for k in 3..=7 {
        for i in 0..5 {
            for j in 0..5 {
                if seq.has_edge(k, i, j) {
                    folded.insert((i, j));
                }
            }
        }
    }
    assert_eq!(union_graph(&seq, 3, 7).unwrap(), folded);
}

#[test]
fn strong_connectivity_matches_reachability_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut seen = [0usize; 2];
    for _ in 0..50 {
        let n = rng.random_range(1..=8);
        let p = rng.random_range(0.1..0.5);
        let edges = random_edges(&mut rng, n, p);
        let expected = sc_oracle(&edges, n);
        seen[expected as usize] += 1;
        assert_eq!(is_strongly_connected(&edges, n), expected, "{edges:?}");
    }
    assert!(seen[0] > 0 && seen[1] > 0, "{seen:?}");
}

#[test]
fn r_reachable_matches_direct_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..30 {
        let n = rng.random_range(2..=8);
        let edges = random_edges(&mut rng, n, 0.4);
        let size = rng.random_range(1..=n);
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        let set = &ids[..size];
        for r in 1..=4 {
            let expected = set.iter().any(|&i| {
                (0..n)
                    .filter(|&u| !set.contains(&u) && edges.contains(&(u, i)))
                    .count()
                    >= r
            });
            assert_eq!(is_r_reachable(&edges, n, set, r).unwrap(), expected);
        }
    }
}

#[test]
fn robustness_matches_definition_enumerator() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut seen = [0usize; 2];
    for case in 0..200 {
        let n: usize = rng.random_range(2..=12);
        let n_sources = rng.random_range(n.saturating_sub(10)..=n.min(5));
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        let sources = ids[..n_sources].to_vec();
        let p = rng.random_range(0.2..0.9);
        let edges = random_edges(&mut rng, n, p);
        let r = rng.random_range(1..=4);
        let list: Vec<_> = edges.iter().copied().collect();
        let expected = robust_oracle(&list, n, &sources, r);
        seen[expected as usize] += 1;
        assert_eq!(
            is_strongly_r_robust_wrt(&edges, n, &sources, r).unwrap(),
            expected,
            "case {case}: n {n} S {sources:?} r {r}"
        );
    }
    assert!(seen[0] >= 20 && seen[1] >= 20, "{seen:?}");
}

#[test]
fn complete_graph_robust_for_every_f() {
    for f in 0..=3 {
        let s = 3 * f + 1;
        let n = s + 3;
        let edges: EdgeSet = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
        let sources: Vec<usize> = (0..s).collect();
        let list: Vec<_> = edges.iter().copied().collect();
        assert!(robust_oracle(&list, n, &sources, s));
        assert!(is_strongly_r_robust_wrt(&edges, n, &sources, s).unwrap());
    }
}

/// Each window of length 3 spreads the edges of the complete graph over
/// its steps in a rotating pattern.
#[test]
fn rotating_window_schedule_is_robust() {
    let n = 5;
    let period = 3;
    let horizon = 29;
    let all: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    let mut schedule: BTreeMap<u64, EdgeSet> = BTreeMap::new();
    for (idx, &e) in all.iter().enumerate() {
        for w in 0..=horizon / period {
            let k = w * period + (idx as u64 + w) % period;
            if k <= horizon {
                schedule.entry(k).or_default().insert(e);
            }
        }
    }
    let rule = IntervalRule::Constant { period };
    let seq = GraphSequence::new(n, horizon, intervals_from_rule(&rule, n, horizon).unwrap(), rule, schedule).unwrap();
    for w in 0..=(horizon - period + 1) / period {
        let union = union_graph(&seq, w * period, w * period + period - 1).unwrap();
        assert_eq!(union.len(), all.len());
    }
    for r in 1..=n - 1 {
        for s in r..n {
            let sources: Vec<usize> = (0..s).collect();
            let report = is_jointly_strongly_r_robust(&seq, &sources, r, period).unwrap();
            assert!(report.ok, "r {r} |S| {s}");
        }
    }
}

#[test]
fn generated_robust_schedule_agrees_with_enumeration() {
    let sources = vec![0, 1, 2, 3];
    let seq = generate_sequence(
        &SequenceKind::Robust {
            r: 4,
            period: 3,
            sources: sources.clone(),
        },
        6,
        17,
        59,
    )
    .unwrap();
    for w in 0..20 {
        let union = union_graph(&seq, 3 * w, 3 * w + 2).unwrap();
        let list: Vec<_> = union.iter().copied().collect();
        assert!(robust_oracle(&list, 6, &sources, 4), "window {w}");
        assert!(!robust_oracle(&list, 6, &sources, 5));
    }
    assert!(is_jointly_strongly_r_robust(&seq, &sources, 4, 3).unwrap().ok);
}

#[test]
fn seven_node_robust_sequence_passes_checker() {
    let sources = vec![0, 1, 2, 3];
    let seq = generate_sequence(
        &SequenceKind::Robust {
            r: 4,
            period: 3,
            sources: sources.clone(),
        },
        7,
        2024,
        300,
    )
    .unwrap();
    let report = is_jointly_strongly_r_robust(&seq, &sources, 4, 3).unwrap();
    assert!(report.ok);
    assert_eq!(report.windows_checked, 100);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_sequences_satisfy_their_own_checks(seed in 0u64..10_000, n in 2usize..7, period in 1u64..5) {
        let seq = generate_sequence(&SequenceKind::PeriodicSc { period }, n, seed, 40).unwrap();
        let ts = seq.intervals().to_vec();
        for w in ts.windows(2).filter(|w| w[1] - 1 <= 40) {
            let union = union_graph(&seq, w[0], w[1] - 1).unwrap();
            prop_assert!(sc_oracle(&union, n));
        }
        let s = n / 2;
        let sources: Vec<usize> = (0..s.max(1)).collect();
        let robust = generate_sequence(
            &SequenceKind::Robust { r: 1, period, sources: sources.clone() },
            n,
            seed,
            40,
        )
        .unwrap();
        for w in 0..(41 / period) {
            let union = union_graph(&robust, w * period, w * period + period - 1).unwrap();
            let list: Vec<_> = union.iter().copied().collect();
            prop_assert!(robust_oracle(&list, n, &sources, 1));
        }
    }
}
