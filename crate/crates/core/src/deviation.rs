//! Decoupling time `tau_N(eps) = inf{k : |X_k - psi_k|_inf > eps}` and the
//! Hoeffding-type bounds on its distribution.

use std::io::Write;

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{step_sample, TrajectoryRecord};
use crate::error::{Result, WfError};
use crate::fitness::UpdateRule;
use crate::meanfield::{iterate, Orbit};
use crate::rng::replicate_rng;
use crate::simplex::{self, LatticePoint, SimplexPoint};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationConfig {
    pub epsilon: f64,
    pub horizon: u64,
    pub rho: f64,
    pub n: u32,
    pub m: usize,
}

impl DeviationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || self.horizon < 1 || !(self.rho > 0.0) || self.n < 1 || self.m < 1 {
            return Err(WfError::InvalidParameter(format!(
                "need epsilon > 0, K >= 1, rho > 0, N >= 1, M >= 1; got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn bound(&self) -> f64 {
        hoeffding_bound(self.epsilon, self.horizon, self.n, self.m, self.rho)
    }
}

/// First `k` with `|X_k - psi_k|_inf > eps`, over the steps covered by both
/// the trajectory (recorded at stride one) and the orbit.
pub fn decoupling_time(traj: &TrajectoryRecord, orbit: &Orbit, eps: f64) -> Result<Option<u64>> {
    let x0 = traj.initial.as_frequencies::<f64>();
    if x0.linf_distance(orbit.state(0))? > 1e-12 {
        return Err(WfError::InvalidPoint("orbit does not start at the trajectory's initial state".into()));
    }
    for (i, (k, x)) in traj.states.iter().enumerate() {
        if *k != i as u64 {
            return Err(WfError::InvalidParameter("trajectory must be recorded at every step".into()));
        }
        if i >= orbit.len() {
            break;
        }
        if simplex::linf(x.as_frequencies::<f64>().coords(), orbit.state(i).coords()) > eps {
            return Ok(Some(*k));
        }
    }
    Ok(None)
}

/// `(1 - rho) / (1 - rho^K)`, written as `1 / (1 + rho + .. + rho^{K-1})` so
/// that it is continuous through `rho = 1`.
pub fn c_k(rho: f64, k: u64) -> f64 {
    assert!(rho > 0.0 && k >= 1, "c_K needs rho > 0 and K >= 1");
    if k <= 100_000 {
        let mut sum = 0.0;
        let mut pow = 1.0;
        for _ in 0..k {
            sum += pow;
            pow *= rho;
            if !sum.is_finite() {
                return 0.0;
            }
        }
        1.0 / sum
    } else if rho == 1.0 {
        1.0 / k as f64
    } else {
        let v = (1.0 - rho) / (1.0 - rho.powf(k as f64));
        if v.is_finite() {
            v
        } else {
            0.0
        }
    }
}

/// `min(1, 2 K M exp(-eps^2 c_K^2 N / 2))`.
pub fn hoeffding_bound(eps: f64, k: u64, n: u32, m: usize, rho: f64) -> f64 {
    let c = c_k(rho, k);
    let b = 2.0 * k as f64 * m as f64 * (-eps * eps * c * c * n as f64 / 2.0).exp();
    b.min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauBound {
    /// `exp((1 - rho)^2 eps^2 N / 2) / (2M)`.
    pub value: f64,
    /// `rho` in (0, 1) and `1 - 2M exp(-(1 - rho)^2 eps^2 N / 2) > 0`.
    pub applicable: bool,
    pub reason: Option<String>,
}

pub fn expected_tau_lower_bound(eps: f64, n: u32, m: usize, rho: f64) -> TauBound {
    let a = (1.0 - rho).powi(2) * eps * eps * n as f64 / 2.0;
    let value = a.exp() / (2.0 * m as f64);
    let reason = if !(rho > 0.0 && rho < 1.0) {
        Some(format!("rho = {rho} is not a contraction constant"))
    } else if 1.0 - 2.0 * m as f64 * (-a).exp() <= 0.0 {
        Some(format!("1 - 2M exp(-(1-rho)^2 eps^2 N / 2) = {} <= 0", 1.0 - 2.0 * m as f64 * (-a).exp()))
    } else {
        None
    };
    TauBound {
        value,
        applicable: reason.is_none(),
        reason,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzEstimate {
    pub rho: f64,
    pub from_pairs: f64,
    pub from_derivatives: f64,
    pub samples: usize,
    pub caveat: &'static str,
}

pub const LIPSCHITZ_CAVEAT: &str =
    "sampled lower estimate of the sup-norm Lipschitz constant; bounds using it are conditional on it not underestimating the true constant on the visited region";

fn uniform_simplex<R: Rng + ?Sized>(m: usize, rng: &mut R) -> SimplexPoint {
    loop {
        let e: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        if let Ok(p) = SimplexPoint::normalized(e) {
            return p;
        }
    }
}

/// Uniform on the open simplex or, with probability one half, uniform on a
/// random proper face.
fn sample_point<R: Rng + ?Sized>(m: usize, rng: &mut R) -> SimplexPoint {
    let x = uniform_simplex(m, rng);
    if m < 2 || rng.random_bool(0.5) {
        return x;
    }
    let keep: Vec<bool> = loop {
        let k: Vec<bool> = (0..m).map(|_| rng.random_bool(0.5)).collect();
        let c = k.iter().filter(|&&b| b).count();
        if c >= 1 && c < m {
            break k;
        }
    };
    let v = x.coords().iter().zip(&keep).map(|(&c, &k)| if k { c } else { 0.0 }).collect();
    SimplexPoint::normalized(v).expect("face has positive mass")
}

/// Extreme points of `{w : sum w = 0, |w|_inf <= 1}`: all but one coordinate
/// at +-1, the remaining one balancing the sum.
fn unit_ball_vertices(m: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    if m < 2 {
        return out;
    }
    for free in 0..m {
        for signs in 0u32..(1 << (m - 1)) {
            let mut w = vec![0.0; m];
            let mut bit = 0;
            for (i, wi) in w.iter_mut().enumerate() {
                if i != free {
                    *wi = if signs >> bit & 1 == 1 { 1.0 } else { -1.0 };
                    bit += 1;
                }
            }
            let rest: f64 = -w.iter().sum::<f64>();
            if rest.abs() <= 1.0 {
                w[free] = rest;
                if !out.contains(&w) {
                    out.push(w);
                }
            }
        }
    }
    out
}

/// Largest observed `|Gamma(x) - Gamma(y)|_inf / |x - y|_inf` over random
/// pairs, together with the sup-norm of `DGamma(x)` on the sum-zero subspace
/// at the vertices, the barycentre and random interior and face points.
pub fn estimate_lipschitz<R: Rng + ?Sized>(rule: &UpdateRule, samples: usize, rng: &mut R) -> Result<LipschitzEstimate> {
    if samples < 2 {
        return Err(WfError::InvalidParameter("need at least two samples".into()));
    }
    let m = rule.dim();
    let dirs: Vec<nalgebra::DVector<f64>> = unit_ball_vertices(m)
        .into_iter()
        .map(nalgebra::DVector::from_vec)
        .collect();
    let derivative_norm = |x: &SimplexPoint| -> Result<f64> {
        let jac = rule.jacobian(x)?;
        Ok(dirs.iter().map(|w| (&jac * w).amax()).fold(0.0, f64::max))
    };
    let mut from_pairs: f64 = 0.0;
    let mut from_derivatives: f64 = 0.0;
    for j in 0..m {
        from_derivatives = from_derivatives.max(derivative_norm(&SimplexPoint::vertex(m, j))?);
    }
    from_derivatives = from_derivatives.max(derivative_norm(&SimplexPoint::barycenter(m))?);
    for _ in 0..samples {
        let x = sample_point(m, rng);
        let y = sample_point(m, rng);
        let d = x.linf_distance(&y)?;
        if d > 1e-9 {
            let g = rule.apply(&x)?.linf_distance(&rule.apply(&y)?)?;
            from_pairs = from_pairs.max(g / d);
        }
        from_derivatives = from_derivatives.max(derivative_norm(&x)?);
    }
    Ok(LipschitzEstimate {
        rho: from_pairs.max(from_derivatives),
        from_pairs,
        from_derivatives,
        samples,
        caveat: LIPSCHITZ_CAVEAT,
    })
}

/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.575_829_303_548_900_4;

/// Upper end of the Wilson score interval for `successes / trials`.
pub fn wilson_upper(successes: usize, trials: usize, z: f64) -> f64 {
    if trials == 0 {
        return 1.0;
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let centre = p + z2 / (2.0 * n);
    let spread = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre + spread) / (1.0 + z2 / n)).min(1.0)
}

/// Decoupling times for every threshold in `epsilons`, for `trials` chains
/// started at `x0` and followed for at most `horizon` steps. `None` is a
/// censored trial.
pub fn decoupling_ensemble(
    rule: &UpdateRule,
    x0: &LatticePoint,
    epsilons: &[f64],
    horizon: u64,
    trials: usize,
    seed: u64,
) -> Result<Vec<Vec<Option<u64>>>> {
    let orbit = iterate(rule, &x0.as_frequencies(), horizon as usize)?;
    (0..trials)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(seed, r as u64);
            let mut taus = vec![None; epsilons.len()];
            let mut x = x0.clone();
            for k in 1..=horizon {
                x = step_sample(&x, rule, &mut rng)?;
                let gap = simplex::linf(x.as_frequencies::<f64>().coords(), orbit.state(k as usize).coords());
                for (t, &e) in taus.iter_mut().zip(epsilons) {
                    if t.is_none() && gap > e {
                        *t = Some(k);
                    }
                }
                if taus.iter().all(|t| t.is_some()) {
                    break;
                }
            }
            Ok(taus)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationRow {
    pub epsilon: f64,
    pub k: u64,
    pub trials: usize,
    pub exceedances: usize,
    pub empirical: f64,
    pub confidence_limit: f64,
    pub bound: f64,
    pub rho: f64,
    pub satisfied: bool,
}

/// `P(tau <= K)` with its Wilson 99% upper limit against the bound, for
/// `K = 1..=horizon` and each threshold.
pub fn deviation_table(
    taus: &[Vec<Option<u64>>],
    epsilons: &[f64],
    horizon: u64,
    n: u32,
    m: usize,
    rho: f64,
) -> Vec<DeviationRow> {
    let trials = taus.len();
    let mut rows = Vec::new();
    for (e, &eps) in epsilons.iter().enumerate() {
        for k in 1..=horizon {
            let hits = taus.iter().filter(|t| matches!(t[e], Some(tau) if tau <= k)).count();
            let limit = wilson_upper(hits, trials, Z99);
            let bound = hoeffding_bound(eps, k, n, m, rho);
            rows.push(DeviationRow {
                epsilon: eps,
                k,
                trials,
                exceedances: hits,
                empirical: hits as f64 / trials.max(1) as f64,
                confidence_limit: limit,
                bound,
                rho,
                satisfied: limit <= bound,
            });
        }
    }
    rows
}

pub fn write_deviation_csv<W: Write>(rows: &[DeviationRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "epsilon",
        "K",
        "trials",
        "empirical_probability",
        "confidence_limit",
        "bound",
        "rho",
        "satisfied",
    ])?;
    for r in rows {
        out.write_record(&[
            r.epsilon.to_string(),
            r.k.to_string(),
            r.trials.to_string(),
            format!("{:e}", r.empirical),
            format!("{:e}", r.confidence_limit),
            format!("{:e}", r.bound),
            format!("{:e}", r.rho),
            r.satisfied.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{simulate, ChainConfig};
    use crate::fitness::{FitnessModel, MutationMatrix, PayoffMatrix};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn a2_rule() -> UpdateRule {
        let a = PayoffMatrix::new(&[vec![1.0, 20.0, 35.0], vec![20.0, 21.0, 30.0], vec![35.0, 30.0, 1.0]]).unwrap();
        UpdateRule::new(FitnessModel::partnership(a, 0.5).unwrap())
    }

    #[test]
    fn c_k_examples() {
        assert_abs_diff_eq!(c_k(1.0, 10), 0.1, epsilon = 1e-15);
        for rho in [0.3, 0.5, 2.0, 7.0] {
            assert_abs_diff_eq!(c_k(rho, 1), 1.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(c_k(0.5, 200), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(c_k(1.0 + 1e-9, 10), 0.1, epsilon = 1e-8);
        assert_abs_diff_eq!(c_k(0.5, 3), 0.5 / 0.875, epsilon = 1e-15);
    }

    #[test]
    fn bound_examples() {
        assert_abs_diff_eq!(hoeffding_bound(0.1, 1, 500, 3, 0.5), 6.0 * (-2.5f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(hoeffding_bound(0.1, 1, 500, 3, 0.5), 0.4925, epsilon = 1e-4);
        let mut prev = 1.0;
        for n in [100, 1000, 10_000, 100_000] {
            let b = hoeffding_bound(0.1, 5, n, 3, 0.5);
            assert!(b <= prev);
            prev = b;
        }
        assert!(prev < 1e-10);
        for k in 1..40 {
            let loose = 2.0 * k as f64 * 3.0 * (-0.01 * 0.25 * 2000.0 / 2.0f64).exp();
            assert!(hoeffding_bound(0.1, k, 2000, 3, 0.5) <= loose.min(1.0) + 1e-15);
        }

        let t = expected_tau_lower_bound(0.1, 500, 3, 0.5);
        assert_abs_diff_eq!(t.value, (0.625f64).exp() / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.value, 0.311, epsilon = 1e-3);
        // 6 exp(-0.625) > 1: the applicability condition fails here
        assert!(!t.applicable);
        let t = expected_tau_lower_bound(0.1, 5000, 3, 0.5);
        // exp(6.25) / 6 = 86.34
        assert!((t.value - 86.1).abs() / 86.1 < 0.005);
        assert!(t.applicable);
        assert!(!expected_tau_lower_bound(0.1, 5000, 3, 1.5).applicable);
    }

    #[test]
    fn wilson_examples() {
        assert_abs_diff_eq!(wilson_upper(0, 1000, Z99), Z99 * Z99 / (1000.0 + Z99 * Z99), epsilon = 1e-15);
        let u = wilson_upper(500, 1000, Z99);
        assert!(u > 0.5 && u < 0.55);
        assert_eq!(wilson_upper(10, 10, Z99), 1.0);
    }

    #[test]
    fn lipschitz_examples() {
        let mut rng = replicate_rng(3, 0);
        let neutral = estimate_lipschitz(&UpdateRule::neutral(3), 200, &mut rng).unwrap();
        assert_abs_diff_eq!(neutral.rho, 1.0, epsilon = 1e-9);

        let p = vec![0.2, 0.3, 0.5];
        let constant = UpdateRule::neutral(3)
            .with_mutation(MutationMatrix::new(&[p.clone(), p.clone(), p]).unwrap())
            .unwrap();
        let est = estimate_lipschitz(&constant, 200, &mut rng).unwrap();
        assert!(est.rho < 1e-12);

        let runs: Vec<f64> = (0..4)
            .map(|s| estimate_lipschitz(&a2_rule(), 20_000, &mut replicate_rng(s, 0)).unwrap().rho)
            .collect();
        let lo = runs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = runs.iter().copied().fold(0.0, f64::max);
        assert!(hi.is_finite() && hi / lo < 1.05, "{runs:?}");
    }

    #[test]
    fn unit_ball_vertices_in_three_dimensions() {
        let v = unit_ball_vertices(3);
        assert_eq!(v.len(), 6);
        assert!(v.iter().all(|w| w.iter().sum::<f64>() == 0.0 && w.contains(&0.0)));
        // two +1 and two -1
        assert_eq!(unit_ball_vertices(4).len(), 6);
    }

    #[test]
    fn decoupling_time_examples() {
        let p = vec![0.0, 1.0, 0.0];
        let rule = UpdateRule::neutral(3)
            .with_mutation(MutationMatrix::new(&[p.clone(), p.clone(), p]).unwrap())
            .unwrap();
        let cfg = ChainConfig::new(20, rule.clone(), 0, 100).unwrap();
        let x0 = LatticePoint::new(vec![5, 10, 5], 20).unwrap();
        let orbit = iterate(&rule, &x0.as_frequencies(), 30).unwrap();
        let traj = simulate(&cfg, &x0, 1, false, |k, _| k >= 30, &mut replicate_rng(1, 0)).unwrap();
        assert_eq!(decoupling_time(&traj, &orbit, 1e-9).unwrap(), None);

        let a2 = a2_rule();
        let cfg = ChainConfig::new(50, a2.clone(), 0, 100).unwrap();
        let orbit = iterate(&a2, &x0.as_frequencies(), 40).unwrap();
        let x0 = LatticePoint::new(vec![15, 25, 10], 50).unwrap();
        let orbit2 = iterate(&a2, &x0.as_frequencies(), 40).unwrap();
        let traj = simulate(&cfg, &x0, 1, false, |k, _| k >= 40, &mut replicate_rng(2, 0)).unwrap();
        assert_eq!(decoupling_time(&traj, &orbit2, 1.0).unwrap(), None);
        assert!(decoupling_time(&traj, &orbit, 0.1).is_err());
        let tau = decoupling_time(&traj, &orbit2, 1e-6).unwrap();
        assert!(matches!(tau, Some(k) if k >= 1));
    }

    #[test]
    fn ensemble_matches_trajectory_definition() {
        let rule = a2_rule();
        let x0 = LatticePoint::new(vec![400, 50, 50], 500).unwrap();
        let taus = decoupling_ensemble(&rule, &x0, &[0.01, 0.05], 20, 50, 11).unwrap();
        let orbit = iterate(&rule, &x0.as_frequencies(), 20).unwrap();
        let cfg = ChainConfig::new(500, rule.clone(), 11, 1000).unwrap();
        for (r, t) in taus.iter().enumerate() {
            let traj = simulate(&cfg, &x0, 1, false, |k, _| k >= 20, &mut replicate_rng(11, r as u64)).unwrap();
            assert_eq!(t[0], decoupling_time(&traj, &orbit, 0.01).unwrap());
            assert_eq!(t[1], decoupling_time(&traj, &orbit, 0.05).unwrap());
        }
        let rows = deviation_table(&taus, &[0.01, 0.05], 20, 500, 3, 2.0);
        assert_eq!(rows.len(), 40);
        for w in rows[..20].windows(2) {
            assert!(w[1].exceedances >= w[0].exceedances);
        }
    }

    proptest! {
        #[test]
        fn c_k_monotone(rho in 0.01f64..0.99, k in 1u64..200) {
            prop_assert!(c_k(rho, k + 1) <= c_k(rho, k) + 1e-15);
            prop_assert!(c_k(rho, k) >= 1.0 - rho - 1e-15);
            prop_assert!(c_k(rho * 0.9, k) >= c_k(rho, k) - 1e-15);
        }

        #[test]
        fn bound_monotone(eps in 0.01f64..0.3, k in 1u64..50, n in 10u32..5000, m in 2usize..6, rho in 0.1f64..3.0) {
            let b = hoeffding_bound(eps, k, n, m, rho);
            prop_assert!(hoeffding_bound(eps, k + 1, n, m, rho) >= b);
            prop_assert!(hoeffding_bound(eps, k, n, m + 1, rho) >= b);
            prop_assert!(hoeffding_bound(eps, k, n + 1, m, rho) <= b);
            prop_assert!(hoeffding_bound(eps * 1.1, k, n, m, rho) <= b);
        }
    }
}
