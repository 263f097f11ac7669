//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers to run a subset.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use serde_json::Value;

use wf_core::chain::{self, Caps, ChainConfig, StateClass};
use wf_core::deviation;
use wf_core::extinction::{self, ExperimentSpec};
use wf_core::gaussian::{self, ResidualSummary};
use wf_core::meanfield::{self, check_assumption7, check_positive_definite_on_w};
use wf_core::rng::replicate_rng;
use wf_core::{FitnessModel, LatticePoint, MutationMatrix, PayoffMatrix, SimplexPoint, SupportSet, UpdateRule};

type Outcome = Result<String, String>;

const A1: [[f64; 3]; 3] = [[1.0, 20.0, 45.0], [20.0, 21.0, 30.0], [45.0, 30.0, 1.0]];
const A2: [[f64; 3]; 3] = [[1.0, 20.0, 35.0], [20.0, 21.0, 30.0], [35.0, 30.0, 1.0]];
const A1_OMEGA: f64 = 1e-3 / (1.0 + 1e-3);

fn payoff(a: &[[f64; 3]; 3]) -> PayoffMatrix {
    PayoffMatrix::new(&a.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn rule(a: PayoffMatrix, omega: f64) -> UpdateRule {
    UpdateRule::new(FitnessModel::partnership(a, omega).unwrap())
}

fn a2_rule() -> UpdateRule {
    rule(payoff(&A2), 0.5)
}

fn shipped(name: &str) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion1() -> Outcome {
    let clock = Instant::now();
    let e1 = meanfield::solve_interior_equilibrium(&payoff(&A1)).map_err(|e| e.to_string())?;
    let e2 = meanfield::solve_interior_equilibrium(&payoff(&A2)).map_err(|e| e.to_string())?;
    let secs = clock.elapsed().as_secs_f64();
    let want1 = [0.24766355, 0.41121495, 0.3411215];
    let want2 = [0.0246913, 0.7345679, 0.2407407];
    let gap = |got: &[f64], want: &[f64]| got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let g1 = gap(&e1.coords, &want1);
    let g2 = gap(&e2.coords, &want2);
    check(
        g1 < 1e-6 && g2 < 1e-6 && e1.interior && e2.interior && secs < 1.0,
        format!("A1 {:?} (gap {g1:.1e}), A2 {:?} (gap {g2:.1e}), {secs:.4} s", e1.coords, e2.coords),
    )
}

fn table_counts(config: &str, replicates: usize) -> Result<(Vec<Vec<usize>>, f64), String> {
    let mut spec: ExperimentSpec = serde_json::from_value(shipped(config)).map_err(|e| e.to_string())?;
    spec.replicates = replicates;
    let clock = Instant::now();
    let result = extinction::run_experiment(&spec).map_err(|e| e.to_string())?;
    let rows = &result.summary.rows;
    if rows.iter().any(|r| r.censored + r.errors + r.skipped > 0) {
        return Err(format!("incomplete trials: {rows:?}"));
    }
    Ok((rows.iter().map(|r| r.counts.clone()).collect(), clock.elapsed().as_secs_f64()))
}

fn criterion2() -> Outcome {
    let (counts, secs) = table_counts("table2.json", 1000)?;
    let ok = counts.iter().all(|c| c[0] as f64 >= 0.99 * c.iter().sum::<usize>() as f64);
    check(ok && secs < 300.0, format!("least-abundant counts per initial {counts:?}, {secs:.1} s"))
}

fn criterion3() -> Outcome {
    let want = [[0.0933, 0.6831, 0.2248], [0.5991, 0.0164, 0.3903], [0.3692, 0.5940, 0.0373]];
    let (counts, secs) = table_counts("table1.json", 10_000)?;
    let mut worst: f64 = 0.0;
    let mut props = Vec::new();
    for (c, w) in counts.iter().zip(&want) {
        let total = c.iter().sum::<usize>() as f64;
        let p: Vec<f64> = c.iter().map(|&x| x as f64 / total).collect();
        worst = p.iter().zip(w).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        props.push(p);
    }
    check(
        worst <= 0.05 && secs < 1800.0,
        format!("proportions {props:.4?}, largest deviation {worst:.4}, {secs:.1} s"),
    )
}

/// `A = c ee^T - (G G^T + s I)`, kept when every Assumption-7 flag holds.
fn generated_assumption7(m: usize, rng: &mut impl Rng) -> PayoffMatrix {
    loop {
        let g = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let shift = rng.random_range(0.1..1.0);
        let q = &g * g.transpose() + DMatrix::identity(m, m) * shift;
        let c = q.max() + 0.5 + shift;
        let a = DMatrix::from_element(m, m, c) - q;
        if let Ok(a) = PayoffMatrix::from_matrix(a) {
            if check_assumption7(&a, 0.5).all() {
                return a;
            }
        }
    }
}

fn criterion4() -> Outcome {
    let mut rng = replicate_rng(4, 0);
    let grid = vec![0.1, 0.5, 0.9];
    let mut systems = vec![(payoff(&A1), vec![0.1, 0.5, 0.9, A1_OMEGA]), (payoff(&A2), grid.clone())];
    for m in [2usize, 3, 4] {
        for _ in 0..40 {
            systems.push((generated_assumption7(m, &mut rng), grid.clone()));
        }
    }
    let mut worst_rho: f64 = 0.0;
    let mut worst_fd: f64 = 0.0;
    let mut cases = 0;
    for (a, omegas) in &systems {
        let chi = meanfield::solve_interior_equilibrium(a)
            .map_err(|e| e.to_string())?
            .point()
            .ok_or("no interior equilibrium")?;
        for &omega in omegas {
            let d = meanfield::jacobian_at_equilibrium(a, omega, &chi).map_err(|e| e.to_string())?;
            let rho = meanfield::spectral_radius_on_w(&d).map_err(|e| e.to_string())?;
            let fd = meanfield::jacobian_fd_discrepancy(&rule(a.clone(), omega), &d, &chi, 1e-6).map_err(|e| e.to_string())?;
            worst_rho = worst_rho.max(rho);
            worst_fd = worst_fd.max(fd);
            cases += 1;
        }
    }
    check(
        worst_rho < 1.0 - 1e-9 && worst_fd < 1e-5,
        format!(
            "{} matrices, {cases} cases: max radius on W {worst_rho:.10}, max FD gap {worst_fd:.1e}",
            systems.len()
        ),
    )
}

/// `A = c ee^T + (G G^T + s I)`: positive definite on W with positive entries.
fn generated_pd_on_w(m: usize, rng: &mut impl Rng) -> PayoffMatrix {
    loop {
        let g = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let shift = rng.random_range(0.1..1.0);
        let q = &g * g.transpose() + DMatrix::identity(m, m) * shift;
        let c = q.abs().max() + rng.random_range(0.1..2.0);
        let a = DMatrix::from_element(m, m, c) + q;
        if let Ok(a) = PayoffMatrix::from_matrix(a) {
            let f = check_assumption7(&a, 0.5);
            if f.symmetric && f.positive_entries && f.invertible && check_positive_definite_on_w(&a) {
                return a;
            }
        }
    }
}

fn criterion5() -> Outcome {
    let mut rng = replicate_rng(5, 0);
    let mut min_drift = f64::INFINITY;
    let mut min_off = f64::INFINITY;
    let mut checked = 0;
    for i in 0..10 {
        let m = 2 + i % 2;
        let a = generated_pd_on_w(m, &mut rng);
        let omega = [0.1, 0.3, 0.5, 0.7, 0.9][i % 5];
        let r = rule(a.clone(), omega);
        for n in 1..=8u32 {
            let rep = chain::submartingale_oracle(&r, &a, n, Caps::default()).map_err(|e| e.to_string())?;
            min_drift = min_drift.min(rep.min_drift);
            if let Some(off) = rep.min_drift_off_vertices {
                min_off = min_off.min(off);
            }
            checked += 1;
        }
    }
    check(
        min_drift >= -1e-12 && min_off > 0.0,
        format!("{checked} (matrix, N) pairs: min drift {min_drift:.3e}, min off vertices {min_off:.3e}"),
    )
}

fn criterion6() -> Outcome {
    let r = a2_rule();
    let mut rng = replicate_rng(6, 0);
    let est = deviation::estimate_lipschitz(&r, 20_000, &mut rng).map_err(|e| e.to_string())?;
    let rho = 1.2 * est.rho;
    let epsilons = [0.05, 0.1];
    let mut violations = Vec::new();
    let mut rows = 0;
    for n in [500u32, 2000] {
        let x0 = LatticePoint::round_from(&SimplexPoint::new(vec![0.8, 0.1, 0.1]).unwrap(), n);
        let taus = deviation::decoupling_ensemble(&r, &x0, &epsilons, 50, 1000, 60 + n as u64).map_err(|e| e.to_string())?;
        for row in deviation::deviation_table(&taus, &epsilons, 50, n, 3, rho) {
            rows += 1;
            if !row.satisfied {
                violations.push(format!(
                    "N={n} eps={} K={}: UCL {:.3e} > bound {:.3e}",
                    row.epsilon, row.k, row.confidence_limit, row.bound
                ));
            }
        }
    }
    check(
        violations.is_empty(),
        format!(
            "rho-hat {:.3}, rho {rho:.3}, {} of {rows} rows violate{}",
            est.rho,
            violations.len(),
            if violations.is_empty() { String::new() } else { format!(": {}", violations.join("; ")) }
        ),
    )
}

fn criterion7() -> Outcome {
    let n = 10_000u32;
    let k = 20;
    let r = a2_rule();
    let x0 = LatticePoint::new(vec![8000, 1000, 1000], n).unwrap();
    let cfg = ChainConfig::new(n, r.clone(), 7, 1_000_000).map_err(|e| e.to_string())?;
    let sample = gaussian::rescaled_residuals(&cfg, &x0, k, 10_000).map_err(|e| e.to_string())?;
    let orbit = meanfield::iterate(&r, &x0.as_frequencies(), k).map_err(|e| e.to_string())?;
    let v = gaussian::ar1_covariance(&r, &orbit, &DMatrix::zeros(3, 3)).map_err(|e| e.to_string())?;
    let summary = ResidualSummary::from_samples(&sample.residuals).map_err(|e| e.to_string())?;
    let c = summary.check(&v[k]);
    check(
        c.mean_ok && c.covariance_ok,
        format!(
            "max |mean|/se {:.2}, max covariance gap / tolerance {:.2}",
            c.max_mean_z, c.max_covariance_ratio
        ),
    )
}

fn criterion8() -> Outcome {
    let toy = chain::build_exact_chain(2, 2, &UpdateRule::neutral(2), Caps::default()).map_err(|e| e.to_string())?;
    let q = chain::qsd_power_iteration(&toy).map_err(|e| e.to_string())?;
    let toy_ok = (q.lambda - 0.5).abs() < 1e-12;
    let mut ladder = Vec::new();
    let mut worst_leak: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    for n in [4u32, 6, 8, 10, 12] {
        let c = chain::build_exact_chain(3, n, &a2_rule(), Caps::default()).map_err(|e| e.to_string())?;
        let q = chain::qsd_power_iteration(&c).map_err(|e| e.to_string())?;
        let dense = chain::qsd_dense_eigenvalue(&c).map_err(|e| e.to_string())?;
        worst_leak = worst_leak.max(q.leak_residual);
        worst_oracle = worst_oracle.max((q.lambda - dense).abs());
        ladder.push(q.lambda);
    }
    let increasing = ladder.windows(2).all(|w| w[1] > w[0]);
    check(
        toy_ok && increasing && worst_leak < 1e-10 && worst_oracle < 1e-10,
        format!(
            "toy lambda {:.15}, ladder {ladder:.6?}, leak residual {worst_leak:.1e}, oracle gap {worst_oracle:.1e}",
            q.lambda
        ),
    )
}

fn criterion9() -> Outcome {
    let mut notes = Vec::new();
    let plain = chain::build_exact_chain(3, 6, &a2_rule(), Caps::default()).map_err(|e| e.to_string())?;
    let recurrent: Vec<&LatticePoint> = plain
        .recurrent_classes()
        .iter()
        .flat_map(|c| c.states.iter().map(|&i| &plain.states()[i]))
        .collect();
    let vertices_only = plain.recurrent_classes().len() == 3
        && plain.recurrent_classes().iter().all(|c| c.states.len() == 1)
        && recurrent.iter().all(|x| x.is_vertex());
    let mixed_transient = plain
        .states()
        .iter()
        .enumerate()
        .filter(|(_, x)| !x.is_vertex())
        .all(|(i, _)| plain.class(i) == StateClass::Transient);
    notes.push(format!("no mutation: vertices only {vertices_only}, mixed transient {mixed_transient}"));

    let mix = MutationMatrix::new(&[vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1], vec![0.1, 0.1, 0.8]]).unwrap();
    let mixing = chain::build_exact_chain(3, 6, &a2_rule().with_mutation(mix).unwrap(), Caps::default())
        .map_err(|e| e.to_string())?;
    let classes = mixing.recurrent_classes();
    let single = classes.len() == 1 && classes[0].states.len() == mixing.states().len() && classes[0].period == 1;
    notes.push(format!("full mixing: one aperiodic class {single}"));

    let block = MutationMatrix::new(&[vec![0.9, 0.1, 0.0], vec![0.2, 0.8, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    let blocked = chain::build_exact_chain(3, 6, &a2_rule().with_mutation(block).unwrap(), Caps::default())
        .map_err(|e| e.to_string())?;
    let mut shape = chain::recurrent_class_shape(&blocked).map_err(|e| e.to_string())?;
    shape.sort_by(|a, b| a[0].indices().cmp(b[0].indices()));
    let shape_ok = shape == vec![vec![SupportSet::new(vec![0, 1])], vec![SupportSet::new(vec![2])]];
    notes.push(format!("block mutation: classes supported on {{0,1}} and {{2}} {shape_ok}"));
    check(vertices_only && mixed_transient && single && shape_ok, notes.join("; "))
}

fn wf(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_wf")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("wf {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn same_outputs(a: &Path, b: &Path) -> Result<usize, String> {
    let mut compared = 0;
    for entry in fs::read_dir(a).map_err(|e| e.to_string())? {
        let name = entry.map_err(|e| e.to_string())?.file_name();
        if name == "manifest.json" {
            continue;
        }
        let left = fs::read(a.join(&name)).map_err(|e| e.to_string())?;
        let right = fs::read(b.join(&name)).map_err(|e| format!("{name:?}: {e}"))?;
        if left != right {
            return Err(format!("{} differs between {} and {}", name.to_string_lossy(), a.display(), b.display()));
        }
        compared += 1;
    }
    Ok(compared)
}

fn criterion10() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut files = 0;
    let runs = [
        ("extinction", "table1_smoke.json"),
        ("extinction", "table2_smoke.json"),
        ("simulate", "simulate_a2.json"),
        ("bounds", "bounds_a2.json"),
        ("qsd", "qsd_a2.json"),
        ("meanfield", "meanfield_a1.json"),
    ];
    for (cmd, cfg) in runs {
        let one = tmp.path().join(format!("{cfg}-1"));
        let eight = tmp.path().join(format!("{cfg}-8"));
        let again = tmp.path().join(format!("{cfg}-rerun"));
        let config = configs.join(cfg);
        wf(&[cmd, "--config", config.to_str().unwrap(), "--threads", "1", "--out", one.to_str().unwrap()])?;
        wf(&[cmd, "--config", config.to_str().unwrap(), "--threads", "8", "--out", eight.to_str().unwrap()])?;
        let manifest = one.join("manifest.json");
        wf(&["rerun", "--manifest", manifest.to_str().unwrap(), "--threads", "8", "--out", again.to_str().unwrap()])?;
        files += same_outputs(&one, &eight)?;
        files += same_outputs(&one, &again)?;
    }
    Ok(format!("{} commands, {files} output files byte-identical across 1 and 8 threads and manifest reruns", runs.len()))
}

fn main() {
    let criteria: [(u32, fn() -> Outcome); 10] = [
        (1, criterion1),
        (2, criterion2),
        (3, criterion3),
        (4, criterion4),
        (5, criterion5),
        (6, criterion6),
        (7, criterion7),
        (8, criterion8),
        (9, criterion9),
        (10, criterion10),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, f) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let clock = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = clock.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id}: PASS ({secs:.1} s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id}: FAIL ({secs:.1} s) {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
