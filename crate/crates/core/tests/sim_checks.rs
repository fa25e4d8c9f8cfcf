use std::fs;
use std::path::PathBuf;

use aoi_observer::aoi::FreshnessIndex;
use aoi_observer::graph::check_conditions;
use aoi_observer::io::{parse_schedule, parse_system};
use aoi_observer::reproduce::{
    acceptance_system, cor1_scenario, fig2_aoi, fig2_naive, growing_sqrt_scenario, sec5b_scenario, thm1_scenario,
    ACCEPTANCE_SYSTEM_SEED,
};
use aoi_observer::resilient::{AdversarySpec, AdversaryStrategy};
use aoi_observer::scenario::{parse_scenario, GainSpec, ProtocolSpec, WeightRule};
use aoi_observer::sim::{
    analyze, assert_online_invariants, max_error_series, run, verify_rate, ViolationKind,
};
use proptest::prelude::*;

fn repo_file(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn index_jump_is_reported() {
    let p = cor1_scenario().prepare().unwrap();
    let mut trace = run(&p).unwrap();
    assert!(assert_online_invariants(&p, &trace).is_empty());

    // first non-source sub-state whose index ticks up by one
    let (k, i, j, age) = (1..trace.steps.len() - 1)
        .flat_map(|k| (0..4).flat_map(move |i| (0..4).map(move |j| (k, i, j))))
        .find_map(|(k, i, j)| {
            let now = trace.steps[k].nodes[i].substates[j].tau;
            let next = trace.steps[k + 1].nodes[i].substates[j].tau;
            match (now, next) {
                (FreshnessIndex::Age(a), FreshnessIndex::Age(b)) if i != j && b == a + 1 => Some((k, i, j, a)),
                _ => None,
            }
        })
        .expect("some index ages by one");
    trace.steps[k + 1].nodes[i].substates[j].tau = FreshnessIndex::Age(age + 3);
    let violations = assert_online_invariants(&p, &trace);
    assert!(violations
        .iter()
        .any(|v| v.kind == ViolationKind::IndexGrowth && v.node == i && v.substate == Some(j)));
}

#[test]
fn adoption_without_edge_is_reported() {
    let p = fig2_aoi().prepare().unwrap();
    let mut trace = run(&p).unwrap();
    let step = trace.steps.iter_mut().find(|s| !s.adoptions.is_empty()).unwrap();
    // node 0 never transmits to itself
    step.adoptions[0].from = step.adoptions[0].node;
    let violations = assert_online_invariants(&p, &trace);
    assert!(violations.iter().any(|v| v.kind == ViolationKind::AdoptionWithoutEdge));
}

#[test]
fn slow_gains_fail_a_faster_rate() {
    let mut file = thm1_scenario().unwrap();
    file.protocol = ProtocolSpec::Aoi {
        gains: GainSpec::Rate { rho: 0.95, delta: 0.0 },
    };
    let p = file.prepare().unwrap();
    let trace = run(&p).unwrap();
    let series = max_error_series(&trace);
    let from = trace.horizon() / 2;
    assert!(!verify_rate(&series, 0.5, from, None).unwrap().pass);
    assert!(verify_rate(&series, 0.99, from, None).unwrap().pass);
}

#[test]
fn bundled_scenarios_match_their_builders() {
    let expect = [
        ("fig2_aoi.json", fig2_aoi()),
        ("fig2_naive.json", fig2_naive(WeightRule::Uniform)),
        ("fig2_naive_tree.json", fig2_naive(WeightRule::Tree { root: 0 })),
        ("thm1_rate.json", thm1_scenario().unwrap()),
        ("growing_sqrt.json", growing_sqrt_scenario()),
        ("cor1_finite.json", cor1_scenario()),
        ("sec5b_disturbance.json", sec5b_scenario()),
    ];
    for (file, built) in expect {
        let text = fs::read_to_string(repo_file(&format!("scenarios/{file}"))).unwrap();
        assert_eq!(parse_scenario(&text).unwrap(), built, "{file}");
    }
}

#[test]
fn bundled_scenarios_run_clean() {
    let mut seen = 0;
    for entry in fs::read_dir(repo_file("scenarios")).unwrap() {
        let path = entry.unwrap().path();
        let file = parse_scenario(&fs::read_to_string(&path).unwrap()).unwrap();
        let p = file.prepare().unwrap();
        let trace = run(&p).unwrap();
        let violations = assert_online_invariants(&p, &trace);
        let report = analyze(&p, &trace, &violations);
        assert!(report.passed(), "{}: {:?}", path.display(), report.summary.violations);
        // naive consensus and the disturbed plant are expected to blow up
        let unbounded = file.name.starts_with("fig2-naive") || file.disturbance.is_some();
        assert_eq!(report.summary.diverged, unbounded, "{}", path.display());
        if let Some(rate) = &report.rate {
            assert!(rate.pass, "{}", path.display());
        }
        if let Some(met) = report.deadline_met {
            assert!(met, "{}", path.display());
        }
        seen += 1;
    }
    assert_eq!(seen, 9);
}

#[test]
fn adversary_files_name_their_strategy() {
    for (file, node, name) in [
        ("thm2_colluding_bias.json", 6, "colluding-bias"),
        ("thm2_deadbeat_random.json", 3, "random-value"),
    ] {
        let text = fs::read_to_string(repo_file(&format!("scenarios/{file}"))).unwrap();
        let s = parse_scenario(&text).unwrap();
        let [AdversarySpec { node: n, strategy }] = s.adversaries.as_slice() else {
            panic!("{file}: one adversary expected");
        };
        assert_eq!((*n, strategy.name()), (node, name));
        assert!(!matches!(strategy, AdversaryStrategy::Silent));
    }
}

#[test]
fn data_files_load() {
    let sys = parse_system(&fs::read_to_string(repo_file("data/acceptance_system.json")).unwrap()).unwrap();
    let built = acceptance_system(ACCEPTANCE_SYSTEM_SEED);
    assert_eq!(sys.a(), built.a());
    assert_eq!(sys.c_all(), built.c_all());

    let seq = parse_schedule(&fs::read_to_string(repo_file("data/fig1_schedule.json")).unwrap()).unwrap();
    assert_eq!(seq.node_count(), 3);
    let report = check_conditions(&seq);
    // node 0 only transmits, so no window union is strongly connected
    assert!(!report.all_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// With estimates drawn as `x0 + noise` the error dynamics do not see x0.
    #[test]
    fn error_trajectory_ignores_x0(x0 in prop::collection::vec(-5.0f64..5.0, 4)) {
        let mut base = cor1_scenario();
        base.protocol = ProtocolSpec::Aoi { gains: GainSpec::Rate { rho: 0.7, delta: 0.0 } };
        base.horizon = 40;
        base.x0 = Some(vec![0.0; 4]);
        let mut moved = base.clone();
        moved.x0 = Some(x0);
        let a = run(&base.prepare().unwrap()).unwrap();
        let b = run(&moved.prepare().unwrap()).unwrap();
        for (sa, sb) in a.steps.iter().zip(&b.steps) {
            let scale = sb.x.iter().map(|v| v.abs()).fold(1.0, f64::max);
            for (na, nb) in sa.nodes.iter().zip(&sb.nodes) {
                prop_assert!((na.error_norm - nb.error_norm).abs() <= 1e-9 * scale, "k {}", sa.k);
            }
        }
    }
}
