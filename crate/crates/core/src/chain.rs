//! The finite-population Markov chain `X_{k+1} ~ Multinomial(N, Gamma(X_k / N)) / N`:
//! sampling, exact transition matrices for small instances, communication
//! classes, quasi-stationary distributions and the exact drift of `x^T A x`.

use std::collections::{HashMap, VecDeque};
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Result, WfError};
use crate::fitness::{PayoffMatrix, UpdateRule};
use crate::meanfield::{check_assumption7, check_positive_definite_on_w};
use crate::simplex::{self, LatticePoint, SupportSet};

#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub n: u32,
    pub rule: UpdateRule,
    pub seed: u64,
    pub max_steps: u64,
}

impl ChainConfig {
    pub fn new(n: u32, rule: UpdateRule, seed: u64, max_steps: u64) -> Result<Self> {
        if n == 0 {
            return Err(WfError::InvalidParameter("population size N must be at least 1".into()));
        }
        if max_steps == 0 {
            return Err(WfError::InvalidParameter("max_steps must be at least 1".into()));
        }
        Ok(Self {
            n,
            rule,
            seed,
            max_steps,
        })
    }
}

/// Enumeration limits: number of lattice states and of (state, successor) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Caps {
    pub states: usize,
    pub pairs: u128,
}

impl Default for Caps {
    fn default() -> Self {
        Self {
            states: simplex::DEFAULT_MAX_STATES,
            pairs: 10_000_000,
        }
    }
}

/// Draws a multinomial vector by sequential conditional binomials. Categories
/// with zero probability always receive zero.
pub fn sample_multinomial<R: Rng + ?Sized>(n: u32, p: &[f64], rng: &mut R) -> Result<Vec<u32>> {
    let last = p
        .iter()
        .rposition(|&q| q > 0.0)
        .ok_or_else(|| WfError::InvalidPoint("multinomial probabilities are all zero".into()))?;
    let mut out = vec![0u32; p.len()];
    let mut left = n as u64;
    let mut mass = 1.0f64;
    for (i, &q) in p.iter().enumerate() {
        if left == 0 {
            break;
        }
        if q <= 0.0 {
            continue;
        }
        if i == last {
            out[i] = left as u32;
            break;
        }
        let cond = (q / mass).clamp(0.0, 1.0);
        let k = Binomial::new(left, cond)
            .map_err(|e| WfError::Numeric(format!("binomial({left}, {cond}): {e}")))?
            .sample(rng);
        out[i] = k as u32;
        left -= k;
        mass -= q;
    }
    Ok(out)
}

pub fn step_sample<R: Rng + ?Sized>(x: &LatticePoint, rule: &UpdateRule, rng: &mut R) -> Result<LatticePoint> {
    let p = rule.apply(&x.as_frequencies())?;
    LatticePoint::new(sample_multinomial(x.n(), p.coords(), rng)?, x.n())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Absorbed,
    MaxSteps,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub initial: LatticePoint,
    /// `(step, state)` at multiples of the stride, plus the final state.
    pub states: Vec<(u64, LatticePoint)>,
    pub final_state: LatticePoint,
    pub steps: u64,
    pub absorption_time: Option<u64>,
    pub stop: StopReason,
}

impl TrajectoryRecord {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let m = self.initial.dim();
        let mut header = vec!["step".to_string()];
        header.extend((1..=m).map(|i| format!("x_{i}")));
        out.write_record(&header)?;
        for (k, s) in &self.states {
            let mut row = vec![k.to_string()];
            row.extend(s.counts().iter().map(|c| c.to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs the chain from `x0` until the boundary is hit (when `stop_at_boundary`),
/// `stop(k, X_k)` returns true, or `max_steps` elapse.
pub fn simulate<R, F>(
    config: &ChainConfig,
    x0: &LatticePoint,
    stride: u64,
    stop_at_boundary: bool,
    mut stop: F,
    rng: &mut R,
) -> Result<TrajectoryRecord>
where
    R: Rng + ?Sized,
    F: FnMut(u64, &LatticePoint) -> bool,
{
    if x0.n() != config.n || x0.dim() != config.rule.dim() {
        return Err(WfError::InvalidPoint(format!(
            "initial state {:?} does not match N = {} and M = {}",
            x0.counts(),
            config.n,
            config.rule.dim()
        )));
    }
    let stride = stride.max(1);
    let mut x = x0.clone();
    let mut states = vec![(0, x.clone())];
    let mut absorption_time = None;
    let mut k = 0u64;
    let reason = loop {
        if absorption_time.is_none() && !x.is_interior() {
            absorption_time = Some(k);
            if stop_at_boundary {
                break StopReason::Absorbed;
            }
        }
        if stop(k, &x) {
            break StopReason::Custom;
        }
        if k >= config.max_steps {
            break StopReason::MaxSteps;
        }
        x = step_sample(&x, &config.rule, rng)?;
        k += 1;
        if k.is_multiple_of(stride) {
            states.push((k, x.clone()));
        }
    };
    if states.last().map(|s| s.0) != Some(k) {
        states.push((k, x.clone()));
    }
    Ok(TrajectoryRecord {
        initial: x0.clone(),
        states,
        final_state: x,
        steps: k,
        absorption_time,
        stop: reason,
    })
}

/// `ln k!` for `k = 0..=n`.
#[derive(Debug, Clone)]
pub struct LnFactorial(Vec<f64>);

impl LnFactorial {
    pub fn new(n: u32) -> Self {
        let mut t = Vec::with_capacity(n as usize + 1);
        let mut acc = 0.0f64;
        t.push(0.0);
        for k in 1..=n {
            acc += (k as f64).ln();
            t.push(acc);
        }
        Self(t)
    }

    pub fn get(&self, k: u32) -> f64 {
        self.0[k as usize]
    }
}

/// `N! / prod y_i! * prod p_i^{y_i}` with `0^0 = 1`.
pub fn multinomial_pmf(y: &[u32], p: &[f64], lnf: &LnFactorial) -> f64 {
    let n: u32 = y.iter().sum();
    let mut log = lnf.get(n);
    for (&c, &q) in y.iter().zip(p) {
        if c == 0 {
            continue;
        }
        if q <= 0.0 {
            return 0.0;
        }
        log += c as f64 * q.ln() - lnf.get(c);
    }
    log.exp()
}

pub fn transition_prob(x: &LatticePoint, y: &LatticePoint, rule: &UpdateRule) -> Result<f64> {
    if x.n() != y.n() || x.dim() != y.dim() {
        return Err(WfError::InvalidPoint("states belong to different lattices".into()));
    }
    let p = rule.apply(&x.as_frequencies())?;
    Ok(multinomial_pmf(y.counts(), p.coords(), &LnFactorial::new(x.n())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StateClass {
    Absorbing,
    Recurrent(usize),
    Transient,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecurrentClass {
    pub states: Vec<usize>,
    pub period: usize,
}

/// Dense transition matrix of the chain on the full lattice with its
/// communication-class structure.
#[derive(Debug, Clone)]
pub struct ExactChain {
    m: usize,
    n: u32,
    states: Vec<LatticePoint>,
    index: HashMap<Vec<u32>, usize>,
    p: DMatrix<f64>,
    classes: Vec<RecurrentClass>,
    class_of: Vec<Option<usize>>,
}

fn check_pairs(states: usize, caps: Caps) -> Result<()> {
    let pairs = (states as u128) * (states as u128);
    if pairs > caps.pairs {
        return Err(WfError::ResourceLimit {
            what: "state-successor pairs",
            requested: pairs,
            cap: caps.pairs,
        });
    }
    Ok(())
}

pub fn build_exact_chain(m: usize, n: u32, rule: &UpdateRule, caps: Caps) -> Result<ExactChain> {
    if rule.dim() != m {
        return Err(WfError::DimensionMismatch {
            expected: m,
            got: rule.dim(),
        });
    }
    let states = simplex::enumerate_lattice(m, n, caps.states)?;
    check_pairs(states.len(), caps)?;
    let s = states.len();
    let lnf = LnFactorial::new(n);
    let rows: Vec<Vec<f64>> = states
        .par_iter()
        .map(|x| {
            let p = rule.apply(&x.as_frequencies())?;
            Ok(states.iter().map(|y| multinomial_pmf(y.counts(), p.coords(), &lnf)).collect())
        })
        .collect::<Result<_>>()?;
    for (i, r) in rows.iter().enumerate() {
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(WfError::InvariantViolation(format!(
                "row {:?} sums to {sum}",
                states[i].counts()
            )));
        }
    }
    let p = DMatrix::from_fn(s, s, |i, j| rows[i][j]);
    let (classes, class_of) = classify(&p);
    let index = states
        .iter()
        .enumerate()
        .map(|(i, x)| (x.counts().to_vec(), i))
        .collect();
    Ok(ExactChain {
        m,
        n,
        states,
        index,
        p,
        classes,
        class_of,
    })
}

fn graph_of(p: &DMatrix<f64>, keep: &[usize]) -> DiGraph<usize, ()> {
    let mut g = DiGraph::with_capacity(keep.len(), 0);
    let nodes: Vec<_> = keep.iter().map(|&i| g.add_node(i)).collect();
    for (a, &i) in keep.iter().enumerate() {
        for (b, &j) in keep.iter().enumerate() {
            if p[(i, j)] > 0.0 {
                g.add_edge(nodes[a], nodes[b], ());
            }
        }
    }
    g
}

fn classify(p: &DMatrix<f64>) -> (Vec<RecurrentClass>, Vec<Option<usize>>) {
    let s = p.nrows();
    let all: Vec<usize> = (0..s).collect();
    let g = graph_of(p, &all);
    let mut comp = vec![0usize; s];
    let sccs = tarjan_scc(&g);
    for (c, members) in sccs.iter().enumerate() {
        for v in members {
            comp[v.index()] = c;
        }
    }
    let mut classes = Vec::new();
    let mut class_of = vec![None; s];
    for (c, members) in sccs.iter().enumerate() {
        let closed = members
            .iter()
            .all(|v| (0..s).all(|j| p[(v.index(), j)] <= 0.0 || comp[j] == c));
        if !closed {
            continue;
        }
        let mut idx: Vec<usize> = members.iter().map(|v| v.index()).collect();
        idx.sort_unstable();
        let period = period_of(p, &idx);
        for &i in &idx {
            class_of[i] = Some(classes.len());
        }
        classes.push(RecurrentClass { states: idx, period });
    }
    (classes, class_of)
}

/// gcd of `level(u) + 1 - level(v)` over the edges inside the class, with BFS levels.
fn period_of(p: &DMatrix<f64>, class: &[usize]) -> usize {
    let mut level = vec![usize::MAX; class.len()];
    level[0] = 0;
    let mut queue = VecDeque::from([0usize]);
    let mut g = 0usize;
    while let Some(a) = queue.pop_front() {
        let i = class[a];
        for (b, &j) in class.iter().enumerate() {
            if p[(i, j)] <= 0.0 {
                continue;
            }
            if level[b] == usize::MAX {
                level[b] = level[a] + 1;
                queue.push_back(b);
            } else {
                let diff = (level[a] + 1).abs_diff(level[b]);
                g = gcd(g, diff);
            }
        }
    }
    g.max(1)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl ExactChain {
    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn population(&self) -> u32 {
        self.n
    }

    pub fn states(&self) -> &[LatticePoint] {
        &self.states
    }

    pub fn index_of(&self, counts: &[u32]) -> Option<usize> {
        self.index.get(counts).copied()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.p[(i, j)]
    }

    pub fn recurrent_classes(&self) -> &[RecurrentClass] {
        &self.classes
    }

    pub fn class(&self, i: usize) -> StateClass {
        match self.class_of[i] {
            None => StateClass::Transient,
            Some(c) if self.classes[c].states.len() == 1 && self.p[(i, i)] >= 1.0 - 1e-12 => StateClass::Absorbing,
            Some(c) => StateClass::Recurrent(c),
        }
    }

    pub fn absorbing_states(&self) -> Vec<usize> {
        (0..self.states.len())
            .filter(|&i| self.class(i) == StateClass::Absorbing)
            .collect()
    }

    pub fn transient_states(&self) -> Vec<usize> {
        (0..self.states.len())
            .filter(|&i| self.class_of[i].is_none())
            .collect()
    }

    pub fn interior_states(&self) -> Vec<usize> {
        (0..self.states.len())
            .filter(|&i| self.states[i].is_interior())
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.m).map(|i| format!("x_{i}")).collect();
        header.push("class".into());
        header.push("self_loop".into());
        out.write_record(&header)?;
        for (i, x) in self.states.iter().enumerate() {
            let mut row: Vec<String> = x.counts().iter().map(|c| c.to_string()).collect();
            row.push(match self.class(i) {
                StateClass::Absorbing => "absorbing".into(),
                StateClass::Recurrent(c) => format!("recurrent_{c}"),
                StateClass::Transient => "transient".into(),
            });
            row.push(format!("{:e}", self.p[(i, i)]));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Maximal supports `J_l` of each recurrent class, after verifying that the
/// class is exactly the union of the face lattices `{x : supp(x) ⊆ J_l}`.
pub fn recurrent_class_shape(chain: &ExactChain) -> Result<Vec<Vec<SupportSet>>> {
    let mut shapes = Vec::new();
    for (c, class) in chain.classes.iter().enumerate() {
        let mut supports: Vec<SupportSet> = class.states.iter().map(|&i| chain.states[i].support()).collect();
        supports.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.indices().cmp(b.indices())));
        supports.dedup();
        let mut maximal: Vec<SupportSet> = Vec::new();
        for s in supports {
            if !maximal.iter().any(|t| s.is_subset_of(t)) {
                maximal.push(s);
            }
        }
        maximal.sort_by(|a, b| a.indices().cmp(b.indices()));
        for (i, x) in chain.states.iter().enumerate() {
            let in_complex = maximal.iter().any(|j| x.support().is_subset_of(j));
            let in_class = chain.class_of[i] == Some(c);
            if in_complex != in_class {
                return Err(WfError::InvariantViolation(format!(
                    "recurrent class {c} is not a union of face lattices: state {:?}",
                    x.counts()
                )));
            }
        }
        shapes.push(maximal);
    }
    Ok(shapes)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QsdResult {
    pub lambda: f64,
    pub mu: Vec<f64>,
    pub states: Vec<LatticePoint>,
    pub iterations: usize,
    /// `|mu P_o - lambda mu|_1`
    pub eigen_residual: f64,
    /// `|1 - lambda - sum_x mu(x) P(x, boundary)|`
    pub leak_residual: f64,
}

impl QsdResult {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let m = self.states.first().map_or(0, |s| s.dim());
        let mut header: Vec<String> = (1..=m).map(|i| format!("x_{i}")).collect();
        header.push("mu".into());
        out.write_record(&header)?;
        for (x, mu) in self.states.iter().zip(&self.mu) {
            let mut row: Vec<String> = x.counts().iter().map(|c| c.to_string()).collect();
            row.push(format!("{mu:e}"));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub const QSD_TOLERANCE: f64 = 1e-12;
pub const QSD_MAX_ITERATIONS: usize = 10_000_000;

fn restricted(chain: &ExactChain) -> Result<(Vec<usize>, DMatrix<f64>)> {
    let interior = chain.interior_states();
    if interior.is_empty() {
        return Err(WfError::Precondition("no interior states (N < M)".into()));
    }
    let k = interior.len();
    let q = DMatrix::from_fn(k, k, |a, b| chain.p[(interior[a], interior[b])]);
    Ok((interior, q))
}

/// Left Perron vector of the chain restricted to interior states, by the
/// lazy power iteration `mu <- mu (P_o + I) / 2` from the uniform vector.
pub fn qsd_power_iteration(chain: &ExactChain) -> Result<QsdResult> {
    let (interior, q) = restricted(chain)?;
    let k = interior.len();
    let local: Vec<usize> = (0..k).collect();
    if tarjan_scc(&graph_of(&q, &local)).len() != 1 {
        return Err(WfError::Precondition("chain restricted to the interior is reducible".into()));
    }
    let qt = q.transpose();
    let mut mu = nalgebra::DVector::from_element(k, 1.0 / k as f64);
    let mut iterations = 0;
    loop {
        if iterations >= QSD_MAX_ITERATIONS {
            return Err(WfError::Numeric(format!(
                "quasi-stationary iteration did not converge in {QSD_MAX_ITERATIONS} steps"
            )));
        }
        iterations += 1;
        let mut next = (&qt * &mu + &mu) * 0.5;
        let norm = next.sum();
        if !(norm > 0.0) {
            return Err(WfError::Numeric("interior mass vanished".into()));
        }
        next /= norm;
        let diff = (&next - &mu).abs().sum();
        mu = next;
        if diff < QSD_TOLERANCE {
            break;
        }
    }
    let mp = &qt * &mu;
    let lambda = mp.sum();
    let eigen_residual = (&mp - &mu * lambda).abs().sum();
    let leak: f64 = interior
        .iter()
        .enumerate()
        .map(|(a, &i)| {
            let out: f64 = (0..chain.states.len())
                .filter(|&j| !chain.states[j].is_interior())
                .map(|j| chain.p[(i, j)])
                .sum();
            mu[a] * out
        })
        .sum();
    let leak_residual = (1.0 - lambda - leak).abs();
    Ok(QsdResult {
        lambda,
        mu: mu.iter().copied().collect(),
        states: interior.iter().map(|&i| chain.states[i].clone()).collect(),
        iterations,
        eigen_residual,
        leak_residual,
    })
}

/// Largest eigenvalue modulus of the interior-restricted matrix, from a dense
/// eigensolver. Used as an independent check on the power iteration.
pub fn qsd_dense_eigenvalue(chain: &ExactChain) -> Result<f64> {
    let (_, q) = restricted(chain)?;
    let rho = crate::linalg::spectral_radius(&q);
    if !rho.is_finite() {
        return Err(WfError::Numeric("dense eigensolver failed".into()));
    }
    Ok(rho)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    /// `min_x E[h(X_1) | X_0 = x] - h(x)` over all lattice states.
    pub min_drift: f64,
    /// The same minimum over non-vertex states, if there are any.
    pub min_drift_off_vertices: Option<f64>,
    /// The largest absolute drift at a vertex.
    pub max_vertex_drift: f64,
    pub states: usize,
}

/// Exact conditional drift of `h(x) = x^T A x` by enumerating every
/// multinomial outcome from every state.
pub fn submartingale_oracle(rule: &UpdateRule, a: &PayoffMatrix, n: u32, caps: Caps) -> Result<DriftReport> {
    let m = a.dim();
    if rule.dim() != m {
        return Err(WfError::DimensionMismatch {
            expected: m,
            got: rule.dim(),
        });
    }
    let flags = check_assumption7(a, 0.5);
    if !(flags.symmetric && flags.positive_entries && flags.invertible) {
        return Err(WfError::Precondition(
            "payoff matrix must be symmetric, invertible and entrywise positive".into(),
        ));
    }
    if !check_positive_definite_on_w(a) {
        return Err(WfError::Precondition("payoff matrix is not positive definite on the sum-zero subspace".into()));
    }
    let states = simplex::enumerate_lattice(m, n, caps.states)?;
    check_pairs(states.len(), caps)?;
    let lnf = LnFactorial::new(n);
    let h: Vec<f64> = states
        .iter()
        .map(|y| a.quadratic(y.as_frequencies::<f64>().coords()))
        .collect();
    let drifts: Vec<(bool, f64)> = states
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let p = rule.apply(&x.as_frequencies())?;
            let mut e = 0.0;
            for (j, y) in states.iter().enumerate() {
                let w = multinomial_pmf(y.counts(), p.coords(), &lnf);
                if w > 0.0 {
                    e += w * h[j];
                }
            }
            Ok((x.is_vertex(), e - h[i]))
        })
        .collect::<Result<_>>()?;
    let min_drift = drifts.iter().map(|d| d.1).fold(f64::INFINITY, f64::min);
    let off: Vec<f64> = drifts.iter().filter(|d| !d.0).map(|d| d.1).collect();
    Ok(DriftReport {
        min_drift,
        min_drift_off_vertices: (!off.is_empty()).then(|| off.iter().copied().fold(f64::INFINITY, f64::min)),
        max_vertex_drift: drifts.iter().filter(|d| d.0).map(|d| d.1.abs()).fold(0.0, f64::max),
        states: states.len(),
    })
}

pub fn write_trajectory_csv(path: &Path, record: &TrajectoryRecord) -> Result<()> {
    record.write_csv(std::fs::File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitness::{FitnessModel, MutationMatrix};
    use crate::rng::replicate_rng;
    use crate::simplex::SimplexPoint;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn a1_rule() -> UpdateRule {
        let a = PayoffMatrix::new(&[vec![1.0, 20.0, 45.0], vec![20.0, 21.0, 30.0], vec![45.0, 30.0, 1.0]]).unwrap();
        UpdateRule::new(FitnessModel::partnership(a, 1e-3 / 1.001).unwrap())
    }

    fn a2_rule() -> UpdateRule {
        let a = PayoffMatrix::new(&[vec![1.0, 20.0, 35.0], vec![20.0, 21.0, 30.0], vec![35.0, 30.0, 1.0]]).unwrap();
        UpdateRule::new(FitnessModel::partnership(a, 0.5).unwrap())
    }

    fn constant_rule(p: Vec<f64>) -> UpdateRule {
        // Gamma(x) = p for every x: replicator with fitness p_i / x_i off the
        // boundary is awkward, so express it through full mutation instead.
        let m = p.len();
        let rows = vec![p; m];
        UpdateRule::neutral(m).with_mutation(MutationMatrix::new(&rows).unwrap()).unwrap()
    }

    fn lp(c: &[u32]) -> LatticePoint {
        LatticePoint::from_counts(c.to_vec()).unwrap()
    }

    #[test]
    fn degenerate_multinomial() {
        let mut rng = replicate_rng(1, 0);
        for _ in 0..100 {
            assert_eq!(sample_multinomial(7, &[1.0, 0.0, 0.0], &mut rng).unwrap(), vec![7, 0, 0]);
            assert_eq!(sample_multinomial(7, &[0.0, 0.0, 1.0], &mut rng).unwrap(), vec![0, 0, 7]);
            let v = sample_multinomial(9, &[0.5, 0.0, 0.5], &mut rng).unwrap();
            assert_eq!(v[1], 0);
            assert_eq!(v.iter().sum::<u32>(), 9);
        }
        let x = lp(&[3, 0, 2]);
        let rule = a2_rule();
        for _ in 0..100 {
            assert_eq!(step_sample(&x, &rule, &mut rng).unwrap().counts()[1], 0);
        }
    }

    #[test]
    fn sample_moments_match_update_rule() {
        let rule = a2_rule();
        let x = lp(&[100, 300, 100]);
        let g = rule.apply(&x.as_frequencies()).unwrap();
        let draws = 100_000;
        let mut rng = replicate_rng(42, 0);
        let m = 3;
        let mut sum = vec![0.0; m];
        let mut cross = vec![vec![0.0; m]; m];
        for _ in 0..draws {
            let y = step_sample(&x, &rule, &mut rng).unwrap().as_frequencies::<f64>();
            for i in 0..m {
                sum[i] += y.get(i);
                for (j, c) in cross[i].iter_mut().enumerate() {
                    *c += y.get(i) * y.get(j);
                }
            }
        }
        let d = draws as f64;
        let n = 500.0;
        for i in 0..m {
            let mean = sum[i] / d;
            let p = g.get(i);
            let se = (p * (1.0 - p) / n / d).sqrt();
            assert!((mean - p).abs() < 3.0 * se.max(1e-12) + 1e-12, "coord {i}: {mean} vs {p}");
            for j in 0..m {
                let cov = cross[i][j] / d - sum[i] * sum[j] / d / d;
                let want = if i == j { p * (1.0 - p) } else { -p * g.get(j) } / n;
                assert!((cov - want).abs() < 0.05 * want.abs() + 1e-7, "({i},{j}): {cov} vs {want}");
            }
        }
    }

    #[test]
    fn transition_probability_examples() {
        let rule = UpdateRule::neutral(2);
        let x = lp(&[1, 1]);
        assert_abs_diff_eq!(transition_prob(&x, &lp(&[2, 0]), &rule).unwrap(), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(transition_prob(&x, &lp(&[1, 1]), &rule).unwrap(), 0.5, epsilon = 1e-15);
        let edge = lp(&[1, 0, 1]);
        assert_eq!(transition_prob(&edge, &lp(&[0, 1, 1]), &a2_rule()).unwrap(), 0.0);

        let rule = a1_rule();
        let states = simplex::enumerate_lattice(3, 6, 1000).unwrap();
        for x in &states {
            let total: f64 = states.iter().map(|y| transition_prob(x, y, &rule).unwrap()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ln_factorial_matches_products() {
        let t = LnFactorial::new(20);
        let mut f = 1.0f64;
        for k in 1..=20u32 {
            f *= k as f64;
            assert!((t.get(k) - f.ln()).abs() < 1e-12 * f.ln().max(1.0));
        }
    }

    #[test]
    fn neutral_two_by_two_classes() {
        let c = build_exact_chain(2, 2, &UpdateRule::neutral(2), Caps::default()).unwrap();
        let abs: Vec<Vec<u32>> = c.absorbing_states().iter().map(|&i| c.states()[i].counts().to_vec()).collect();
        assert_eq!(abs, vec![vec![2, 0], vec![0, 2]]);
        let tr: Vec<Vec<u32>> = c.transient_states().iter().map(|&i| c.states()[i].counts().to_vec()).collect();
        assert_eq!(tr, vec![vec![1, 1]]);
    }

    #[test]
    fn no_mutation_chain_absorbs_at_vertices() {
        let c = build_exact_chain(3, 6, &a1_rule(), Caps::default()).unwrap();
        let abs = c.absorbing_states();
        assert_eq!(abs.len(), 3);
        assert!(abs.iter().all(|&i| c.states()[i].is_vertex()));
        for (i, x) in c.states().iter().enumerate() {
            if x.support().len() >= 2 {
                assert_eq!(c.class(i), StateClass::Transient);
            }
        }
        let shapes = recurrent_class_shape(&c).unwrap();
        assert_eq!(shapes.len(), 3);
        assert!(shapes.iter().all(|s| s.len() == 1 && s[0].len() == 1));
    }

    #[test]
    fn full_mixing_is_irreducible_and_aperiodic() {
        let theta = MutationMatrix::new(&[vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1], vec![0.1, 0.1, 0.8]]).unwrap();
        let rule = a1_rule().with_mutation(theta).unwrap();
        let c = build_exact_chain(3, 6, &rule, Caps::default()).unwrap();
        assert_eq!(c.recurrent_classes().len(), 1);
        assert_eq!(c.recurrent_classes()[0].states.len(), c.states().len());
        assert_eq!(c.recurrent_classes()[0].period, 1);
        let shapes = recurrent_class_shape(&c).unwrap();
        assert_eq!(shapes, vec![vec![SupportSet::full(3)]]);
    }

    #[test]
    fn block_mutation_class_is_an_edge() {
        let theta = MutationMatrix::new(&[vec![0.9, 0.1, 0.0], vec![0.2, 0.8, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let rule = a1_rule().with_mutation(theta).unwrap();
        let c = build_exact_chain(3, 5, &rule, Caps::default()).unwrap();
        let shapes = recurrent_class_shape(&c).unwrap();
        let mut flat: Vec<Vec<SupportSet>> = shapes;
        flat.sort_by(|a, b| a[0].indices().cmp(b[0].indices()));
        assert_eq!(
            flat,
            vec![vec![SupportSet::new(vec![0, 1])], vec![SupportSet::new(vec![2])]]
        );
        let edge = c
            .recurrent_classes()
            .iter()
            .find(|k| k.states.len() > 1)
            .unwrap();
        assert_eq!(edge.states.len(), 6);
    }

    #[test]
    fn periodic_class_is_detected() {
        // two states swapping deterministically
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let (classes, _) = classify(&p);
        assert_eq!(classes.len(), 1);
        assert_eq!(classes[0].period, 2);
    }

    #[test]
    fn qsd_single_interior_state() {
        let c = build_exact_chain(2, 2, &UpdateRule::neutral(2), Caps::default()).unwrap();
        let q = qsd_power_iteration(&c).unwrap();
        assert_abs_diff_eq!(q.lambda, 0.5, epsilon = 1e-12);
        assert_eq!(q.mu, vec![1.0]);
        assert!(q.leak_residual < 1e-10);
    }

    #[test]
    fn qsd_ladder_for_a2() {
        let mut prev = 0.0;
        for n in [4u32, 6, 8, 10, 12] {
            let c = build_exact_chain(3, n, &a2_rule(), Caps::default()).unwrap();
            let q = qsd_power_iteration(&c).unwrap();
            assert!(q.lambda > prev, "N = {n}: {} <= {prev}", q.lambda);
            assert!(q.leak_residual < 1e-10);
            assert!(q.eigen_residual < 1e-10);
            let dense = qsd_dense_eigenvalue(&c).unwrap();
            assert!((dense - q.lambda).abs() < 1e-10, "N = {n}: {dense} vs {}", q.lambda);
            assert!((q.mu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prev = q.lambda;
        }
    }

    #[test]
    fn qsd_errors() {
        let c = build_exact_chain(3, 2, &a2_rule(), Caps::default()).unwrap();
        assert!(matches!(qsd_power_iteration(&c), Err(WfError::Precondition(_))));
        let big = build_exact_chain(3, 200, &a2_rule(), Caps { states: 1000, pairs: 10_000_000 });
        assert!(matches!(big, Err(WfError::ResourceLimit { .. })));
        let pairs = build_exact_chain(3, 60, &a2_rule(), Caps { states: 10_000, pairs: 1_000_000 });
        assert!(matches!(pairs, Err(WfError::ResourceLimit { .. })));
    }

    #[test]
    fn drift_of_average_payoff() {
        let a = PayoffMatrix::new(&[vec![3.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let rule = UpdateRule::new(FitnessModel::partnership(a.clone(), 0.3).unwrap());
        for n in 1..=10 {
            let d = submartingale_oracle(&rule, &a, n, Caps::default()).unwrap();
            assert!(d.min_drift >= -1e-12);
            assert!(d.max_vertex_drift < 1e-12);
            if n >= 2 {
                assert!(d.min_drift_off_vertices.unwrap() > 0.0);
            }
        }
        let a2 = PayoffMatrix::new(&[vec![1.0, 20.0, 35.0], vec![20.0, 21.0, 30.0], vec![35.0, 30.0, 1.0]]).unwrap();
        assert!(matches!(
            submartingale_oracle(&a2_rule(), &a2, 4, Caps::default()),
            Err(WfError::Precondition(_))
        ));
    }

    #[test]
    fn simulation_records() {
        let rule = a2_rule();
        let cfg = ChainConfig::new(50, rule.clone(), 3, 10_000).unwrap();
        let x0 = LatticePoint::round_from(&SimplexPoint::new(vec![0.4, 0.4, 0.2]).unwrap(), 50);
        let run = |seed| {
            let mut rng = replicate_rng(seed, 0);
            simulate(&cfg, &x0, 1, true, |_, _| false, &mut rng).unwrap()
        };
        let a = run(3);
        assert_eq!(a, run(3));
        assert_eq!(a.stop, StopReason::Absorbed);
        assert_eq!(a.absorption_time, Some(a.steps));
        assert!(!a.final_state.is_interior());

        let vertex = LatticePoint::vertex(3, 1, 50);
        let mut rng = replicate_rng(0, 0);
        let v = simulate(&cfg, &vertex, 1, false, |k, _| k >= 20, &mut rng).unwrap();
        assert!(v.states.iter().all(|(_, s)| *s == vertex));
        assert_eq!(v.absorption_time, Some(0));
        assert_eq!(v.stop, StopReason::Custom);

        let mut buf = Vec::new();
        v.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,x_1,x_2,x_3\n0,0,50,0\n"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn trajectories_stay_on_lattice_and_support_shrinks(seed in any::<u64>(), a in 1u32..30, b in 1u32..30) {
            let n = a + b + 10;
            let x0 = LatticePoint::new(vec![a, b, 10], n).unwrap();
            let cfg = ChainConfig::new(n, a2_rule(), seed, 200).unwrap();
            let mut rng = replicate_rng(seed, 0);
            let rec = simulate(&cfg, &x0, 1, false, |_, _| false, &mut rng).unwrap();
            for w in rec.states.windows(2) {
                prop_assert_eq!(w[1].1.counts().iter().sum::<u32>(), n);
                prop_assert!(w[1].1.support().is_subset_of(&w[0].1.support()));
            }
        }

        #[test]
        fn constant_rule_is_deterministic_on_the_lattice(seed in any::<u64>()) {
            let rule = constant_rule(vec![0.0, 1.0, 0.0]);
            let x = lp(&[2, 3, 5]);
            let mut rng = replicate_rng(seed, 1);
            prop_assert_eq!(step_sample(&x, &rule, &mut rng).unwrap(), lp(&[0, 10, 0]));
        }
    }
}
