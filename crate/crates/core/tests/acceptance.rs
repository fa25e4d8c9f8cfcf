//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Errors are recomputed from the recorded `x` and
//! `x̂` rather than taken from the simulator's own summaries.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

mod common;

use std::process::ExitCode;
use std::time::Instant;

use aoi_observer::aoi::FreshnessIndex;
use aoi_observer::lti::decompose;
use aoi_observer::reproduce::{
    bundled_strategies, burn_in, cor1_scenario, csv_bytes, fig2_aoi, fig2_naive, growing_sqrt_scenario,
    sec5b_scenario, thm1_scenario, thm2_scenario,
};
use aoi_observer::resilient::AdversarySpec;
use aoi_observer::scenario::{PreparedScenario, ScenarioFile, WeightRule};
use aoi_observer::sim::{assert_online_invariants, run, SimTrace};
use common::{obs_oracle, random_dims, random_edges, rank_oracle, robust_oracle, structured_system};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn simulate(file: &ScenarioFile) -> (PreparedScenario, SimTrace) {
    let p = file.prepare().expect("scenario prepares");
    let trace = run(&p).expect("scenario runs");
    (p, trace)
}

/// `‖x̂_i[k] − x[k]‖` from the recorded vectors.
fn err(trace: &SimTrace, k: usize, i: usize) -> f64 {
    let s = &trace.steps[k];
    s.nodes[i]
        .x_hat
        .iter()
        .zip(&s.x)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn max_err(trace: &SimTrace, k: usize) -> f64 {
    (0..trace.regular.len())
        .filter(|&i| trace.regular[i])
        .map(|i| err(trace, k, i))
        .fold(0.0, f64::max)
}

/// Least-squares slope of `ln e[k]` over the non-zero points of `[from, to]`.
/// `None` when the error is exactly zero from some point on.
fn log_slope(trace: &SimTrace, i: usize, from: usize, to: usize) -> Option<f64> {
    let pts: Vec<(f64, f64)> = (from..=to)
        .map(|k| (k as f64, err(trace, k, i)))
        .filter(|&(_, e)| e > 0.0)
        .map(|(k, e)| (k, e.ln()))
        .collect();
    if err(trace, to, i) == 0.0 && pts.len() < 10 {
        return None;
    }
    let n = pts.len() as f64;
    let mk = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let me = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let num: f64 = pts.iter().map(|p| (p.0 - mk) * (p.1 - me)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - mk).powi(2)).sum();
    Some(num / den)
}

fn criterion_1(runs: &mut Vec<ScenarioFile>) -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for weights in [WeightRule::Uniform, WeightRule::Tree { root: 0 }] {
        let file = fig2_naive(weights);
        let (_, trace) = simulate(&file);
        let hit = (0..=60).find(|&k| !(max_err(&trace, k) <= 1e6));
        pass &= hit.is_some();
        parts.push(format!("{} > 1e6 at k={hit:?}", file.name));
        runs.push(file);
    }
    let file = fig2_aoi();
    let (_, trace) = simulate(&file);
    let worst = (5..trace.steps.len()).map(|k| max_err(&trace, k)).fold(0.0, f64::max);
    pass &= worst <= 1e-8;
    parts.push(format!("aoi max error from k=5: {worst:e}"));
    runs.push(file);
    outcome(pass, parts.join("; "))
}

fn criterion_2_and_5(runs: &mut Vec<ScenarioFile>) -> (Outcome, Outcome) {
    let file = thm1_scenario().expect("burn-in inside the horizon");
    let (p, trace) = simulate(&file);
    let k_n = burn_in(&p).expect("burn-in") as usize;
    let target = 0.7f64.ln() + 0.02;
    let mut worst = f64::NEG_INFINITY;
    let mut pass = k_n + 150 <= p.horizon as usize;
    for i in 0..4 {
        if let Some(s) = log_slope(&trace, i, k_n, k_n + 150) {
            worst = worst.max(s);
            pass &= s <= target;
        }
    }
    let c2 = outcome(
        pass,
        format!("k_N={k_n}, worst slope {worst:.4} <= {target:.4} over [k_N, k_N+150]"),
    );

    // first sub-state, recomputed in the decomposed coordinates
    let dec = decompose(&p.system).expect("decomposes");
    let d0 = dec.block_dims()[0];
    let a00 = dec.a_bar().view((0, 0), (d0, d0)).into_owned();
    let block_err = |k: usize, i: usize| -> DVector<f64> {
        let s = &trace.steps[k];
        let diff = DVector::from_iterator(4, s.nodes[i].x_hat.iter().zip(&s.x).map(|(a, b)| a - b));
        (dec.t_inv() * diff).rows(0, d0).into_owned()
    };
    let mut worst_gap: f64 = 0.0;
    let mut checked = 0;
    for k in 0..trace.steps.len() {
        for i in 0..4 {
            if let FreshnessIndex::Age(tau) = trace.steps[k].nodes[i].substates[0].tau {
                let tau = tau as usize;
                let mut pow = DMatrix::<f64>::identity(d0, d0);
                for _ in 0..tau {
                    pow = &pow * &a00;
                }
                let gap = (block_err(k, i) - pow * block_err(k - tau, 0)).norm();
                worst_gap = worst_gap.max(gap);
                checked += 1;
            }
        }
    }
    let c5 = outcome(
        checked > 0 && worst_gap <= 1e-8,
        format!("{checked} (node, step) pairs, worst gap {worst_gap:e}"),
    );
    runs.push(file);
    (c2, c5)
}

fn criterion_3(runs: &mut Vec<ScenarioFile>) -> Outcome {
    let file = growing_sqrt_scenario();
    let (p, trace) = simulate(&file);
    let last = max_err(&trace, trace.steps.len() - 1);
    let t = p.graph.intervals().to_vec();
    let n = 4u64;
    let start = t[n as usize - 1];
    let mut breaches = 0;
    let mut checked = 0;
    for k in start..=p.horizon {
        let q = t.iter().rposition(|&tq| tq <= k).unwrap();
        let g = t[q + 1] - t[q];
        for i in 0..4 {
            for (j, sub) in trace.steps[k as usize].nodes[i].substates.iter().enumerate() {
                if j == i {
                    continue;
                }
                checked += 1;
                match sub.tau {
                    FreshnessIndex::Age(a) if a <= 2 * (n - 1) * g => {}
                    _ => breaches += 1,
                }
            }
        }
    }
    let violations = assert_online_invariants(&p, &trace).len();
    runs.push(file);
    outcome(
        last <= 1e-6 && breaches == 0 && violations == 0,
        format!("final {last:e}, {checked} delay checks, {breaches} breaches, {violations} violations"),
    )
}

fn criterion_4(runs: &mut Vec<ScenarioFile>) -> Outcome {
    let file = cor1_scenario();
    let (p, trace) = simulate(&file);
    let deadline = 4 + 2 * 4 * 3 * 2;
    let worst = (deadline..=p.horizon as usize).map(|k| max_err(&trace, k)).fold(0.0, f64::max);
    runs.push(file);
    outcome(worst <= 1e-8, format!("max error on [{deadline}, {}]: {worst:e}", p.horizon))
}

fn criterion_6(runs: &mut Vec<ScenarioFile>) -> Outcome {
    let file = sec5b_scenario();
    let (p, trace) = simulate(&file);
    let (a, d) = (1.5f64, 0.1f64);
    // x − x̂ on the scalar plant
    let e = |k: u64, i: usize| {
        let s = &trace.steps[k as usize];
        s.x[0] - s.nodes[i].x_hat[0]
    };
    let t = p.graph.intervals();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut peak: f64 = 0.0;
    for w in t.windows(2) {
        if w[1] > p.horizon {
            break;
        }
        let f = (w[1] - w[0]) as i32;
        let geometric: f64 = (0..f).map(|s| a.powi(s)).sum();
        let want = a.powi(f) * e(w[0], 0) + d * geometric;
        let got = e(w[1], 1);
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
        peak = peak.max(got.abs());
        checked += 1;
    }
    runs.push(file);
    outcome(
        checked > 0 && worst <= 1e-9 && peak > 1e3,
        format!("{checked} intervals, worst relative gap {worst:e}, peak {peak:e}"),
    )
}

fn criterion_7_and_8(runs: &mut Vec<ScenarioFile>) -> (Outcome, Outcome) {
    let target = 0.8f64.ln() + 0.02;
    let deadline = 2 * (7 - 4) * 3 + 1;
    let mut pass7 = true;
    let mut pass8 = true;
    let mut worst_slope = f64::NEG_INFINITY;
    let mut worst_final: f64 = 0.0;
    let mut violations = 0;
    let mut count = 0;
    for node in [3, 6] {
        for strategy in bundled_strategies() {
            let adversary = Some(AdversarySpec { node, strategy });
            let file = thm2_scenario(adversary.clone(), false);
            let (p, trace) = simulate(&file);
            let h = p.horizon as usize;
            for i in (0..7).filter(|&i| trace.regular[i]) {
                if let Some(s) = log_slope(&trace, i, h / 2, h) {
                    worst_slope = worst_slope.max(s);
                    pass7 &= s <= target;
                }
            }
            let v = assert_online_invariants(&p, &trace).len();
            violations += v;
            pass7 &= v == 0;
            runs.push(file);

            let file = thm2_scenario(adversary, true);
            let (p, trace) = simulate(&file);
            let w = (deadline..=p.horizon as usize).map(|k| max_err(&trace, k)).fold(0.0, f64::max);
            worst_final = worst_final.max(w);
            pass8 &= w <= 1e-8;
            runs.push(file);
            count += 1;
        }
    }
    (
        outcome(
            pass7,
            format!("{count} adversary runs, worst slope {worst_slope:.4} <= {target:.4}, {violations} violations"),
        ),
        outcome(pass8, format!("{count} deadbeat runs, max error from k={deadline}: {worst_final:e}")),
    )
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut robust_mismatch = 0;
    for _ in 0..200 {
        let n: usize = rng.random_range(2..=12);
        let n_sources = rng.random_range(n.saturating_sub(10)..=n.min(5));
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        let sources = ids[..n_sources].to_vec();
        let p = rng.random_range(0.2..0.9);
        let edges = random_edges(&mut rng, n, p);
        let r = rng.random_range(1..=4);
        let list: Vec<_> = edges.iter().copied().collect();
        let got = aoi_observer::graph::is_strongly_r_robust_wrt(&edges, n, &sources, r).expect("in range");
        if got != robust_oracle(&list, n, &sources, r) {
            robust_mismatch += 1;
        }
    }
    let mut decompose_fail = 0;
    for _ in 0..100 {
        let nodes = rng.random_range(1..=4);
        let n = rng.random_range(1..=6);
        let dims = random_dims(&mut rng, n, nodes);
        let sys = structured_system(&mut rng, &dims);
        let ok = decompose(&sys).is_ok_and(|dec| {
            let t = dec.t();
            let a_bar = dec.t_inv() * sys.a() * t;
            let mut ok = dec.block_dims() == dims.as_slice() && (t * dec.a_bar() * dec.t_inv() - sys.a()).amax() <= 1e-8;
            let mut off = 0;
            for j in 0..nodes {
                let right = off + dims[j];
                for r in off..right {
                    ok &= (right..n).all(|c| a_bar[(r, c)].abs() <= 1e-8);
                }
                ok &= (dec.c_bar(j) * dec.t_inv() - sys.c(j)).amax() <= 1e-8;
                let c_bar = sys.c(j) * t;
                ok &= (right..n).all(|c| c_bar[(0, c)].abs() <= 1e-8);
                if dims[j] > 0 {
                    let ajj = a_bar.view((off, off), (dims[j], dims[j])).into_owned();
                    let cjj = c_bar.view((0, off), (1, dims[j])).into_owned();
                    ok &= rank_oracle(&obs_oracle(&ajj, &cjj)) == dims[j];
                }
                off = right;
            }
            ok
        });
        if !ok {
            decompose_fail += 1;
        }
    }
    outcome(
        robust_mismatch == 0 && decompose_fail == 0,
        format!("robustness: {robust_mismatch}/200 mismatches; decomposition: {decompose_fail}/100 failures"),
    )
}

fn criterion_10(runs: &[ScenarioFile]) -> Outcome {
    let mut differ = Vec::new();
    for file in runs {
        let (_, a) = simulate(file);
        let (_, b) = simulate(file);
        if csv_bytes(&a) != csv_bytes(&b) {
            differ.push(file.name.clone());
        }
    }
    outcome(differ.is_empty(), format!("{} scenarios re-run, differing: {differ:?}", runs.len()))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut runs = Vec::new();
    let c1 = criterion_1(&mut runs);
    let (c2, c5) = criterion_2_and_5(&mut runs);
    let c3 = criterion_3(&mut runs);
    let c4 = criterion_4(&mut runs);
    let c6 = criterion_6(&mut runs);
    let (c7, c8) = criterion_7_and_8(&mut runs);
    let c9 = criterion_9();
    let c10 = criterion_10(&runs);
    let results = [
        ("1 naive consensus diverges, freshness protocol exact", c1),
        ("2 rate 0.7 on every node after burn-in", c2),
        ("3 square-root intervals: convergence and delay bound", c3),
        ("4 nilpotent gains exact by step 52", c4),
        ("5 delayed-error identity on the first sub-state", c5),
        ("6 disturbance closed form and growth", c6),
        ("7 resilient rate 0.8 under every adversary", c7),
        ("8 resilient deadbeat exact by step 19", c8),
        ("9 oracle equivalence: robustness and decomposition", c9),
        ("10 byte-identical CSV on re-run", c10),
    ];
    let mut failed = 0;
    for (label, o) in &results {
        println!("{} criterion {label}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        results.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
