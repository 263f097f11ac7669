//! Finite-N trends behind the large-population limits: the extinction event
//! becomes more likely and slower as N grows.

use wf_core::config::SystemConfig;
use wf_core::extinction::{run_experiment, ExperimentSpec, StopMode};

const A2: [[f64; 3]; 3] = [[1.0, 20.0, 35.0], [20.0, 21.0, 30.0], [35.0, 30.0, 1.0]];

fn absorption_spec(n: u32, replicates: usize) -> ExperimentSpec {
    ExperimentSpec {
        system: SystemConfig::partnership(A2.iter().map(|r| r.to_vec()).collect(), 0.5),
        n,
        m: None,
        initials: vec![vec![2.0 / 81.0, 59.5 / 81.0, 19.5 / 81.0], vec![1.0 / 3.0; 3]],
        replicates,
        seed: 31,
        stop_threshold: 0.05,
        sample_window: [1000, 5000],
        mode: StopMode::Absorption,
        max_steps: 1_000_000,
        bin_width: 0.01,
        time_budget_secs: None,
    }
}

/// Per-initial `(events, trials, mean absorption time)`.
fn ladder_point(n: u32) -> Vec<(usize, usize, f64)> {
    let result = run_experiment(&absorption_spec(n, 2000)).unwrap();
    result
        .summary
        .rows
        .iter()
        .map(|r| {
            assert_eq!(r.censored + r.errors + r.skipped, 0);
            (r.event_satisfied.unwrap(), r.trials, r.mean_stop_time.unwrap())
        })
        .collect()
}

#[test]
fn extinction_event_probability_does_not_fall_with_n() {
    let ladder: Vec<_> = [25u32, 50, 100].into_iter().map(ladder_point).collect();
    for init in 0..2 {
        for pair in ladder.windows(2) {
            let (e0, t0, _) = pair[0][init];
            let (e1, t1, _) = pair[1][init];
            let (p0, p1) = (e0 as f64 / t0 as f64, e1 as f64 / t1 as f64);
            let se = (p0 * (1.0 - p0) / t0 as f64 + p1 * (1.0 - p1) / t1 as f64).sqrt();
            // one-sided 95%: reject "non-decreasing" only on a significant drop
            assert!(p1 - p0 >= -1.645 * se, "initial {init}: {p0} -> {p1} (se {se})");
        }
    }
}

#[test]
fn absorption_time_grows_with_n() {
    let times: Vec<f64> = [25u32, 50, 100].into_iter().map(|n| ladder_point(n)[0].2).collect();
    assert!(times.windows(2).all(|w| w[1] > w[0]), "{times:?}");
}
