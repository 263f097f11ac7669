//! The deterministic skeleton `psi_{k+1} = Gamma(psi_k)`: orbits, interior
//! equilibria of partnership games, linear stability on the sum-zero
//! subspace, permanence diagnostics and epsilon-chain reachability.

use std::collections::{HashMap, VecDeque};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WfError};
use crate::fitness::{finite_difference_jacobian, PayoffMatrix, UpdateRule};
use crate::linalg;
use crate::scalar::Scalar;
use crate::simplex::{self, LatticePoint, SimplexPoint, SupportSet};

/// `psi_0, psi_1, .., psi_K`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Scalar"))]
pub struct Orbit<T: Scalar = f64> {
    states: Vec<SimplexPoint<T>>,
    converged_at: Option<usize>,
}

impl<T: Scalar> Orbit<T> {
    pub fn states(&self) -> &[SimplexPoint<T>] {
        &self.states
    }

    pub fn state(&self, k: usize) -> &SimplexPoint<T> {
        &self.states[k]
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> &SimplexPoint<T> {
        self.states.last().expect("orbit holds at least psi_0")
    }

    /// Start of the first run of three consecutive steps that move less than
    /// the convergence tolerance.
    pub fn converged_at(&self) -> Option<usize> {
        self.converged_at
    }

    /// Largest per-coordinate gap between `Gamma(psi_k)` and `psi_{k+1}`.
    pub fn consistency_error(&self, rule: &UpdateRule<T>) -> Result<T> {
        let mut worst = T::zero();
        for w in self.states.windows(2) {
            worst = worst.max(rule.apply(&w[0])?.linf_distance(&w[1])?);
        }
        Ok(worst)
    }
}

pub fn convergence_tolerance<T: Scalar>() -> T {
    T::lit(1e-12).max(T::epsilon() * T::lit(8.0))
}

pub fn iterate<T: Scalar>(rule: &UpdateRule<T>, x0: &SimplexPoint<T>, steps: usize) -> Result<Orbit<T>> {
    if x0.dim() != rule.dim() {
        return Err(WfError::DimensionMismatch {
            expected: rule.dim(),
            got: x0.dim(),
        });
    }
    let tol = convergence_tolerance::<T>();
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0.clone());
    let mut run = 0usize;
    let mut converged_at = None;
    for k in 0..steps {
        let next = rule.apply(&states[k])?;
        let gap = simplex::linf(next.coords(), states[k].coords());
        states.push(next);
        if gap < tol {
            run += 1;
            if run == 3 && converged_at.is_none() {
                converged_at = Some(k + 1 - 3);
            }
        } else {
            run = 0;
        }
    }
    Ok(Orbit {
        states,
        converged_at,
    })
}

/// Solution of `A chi = c e` normalised to sum one.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Scalar"))]
pub struct Equilibrium<T: Scalar = f64> {
    pub coords: Vec<T>,
    pub constant: T,
    pub interior: bool,
    pub residual: T,
}

impl<T: Scalar> Equilibrium<T> {
    /// The equilibrium as a simplex point, when it lies in the open simplex.
    pub fn point(&self) -> Option<SimplexPoint<T>> {
        if self.interior {
            Some(SimplexPoint::from_raw(self.coords.clone()))
        } else {
            None
        }
    }
}

pub fn solve_interior_equilibrium<T: Scalar>(a: &PayoffMatrix<T>) -> Result<Equilibrium<T>> {
    let m = a.dim();
    let v = linalg::solve(a.matrix(), &vec![T::one(); m])
        .ok_or_else(|| WfError::NoEquilibrium("payoff matrix is singular".into()))?;
    let s: T = v.iter().copied().sum();
    if s.abs() <= T::tiny() {
        return Err(WfError::NoEquilibrium("A^{-1} e sums to zero".into()));
    }
    let coords: Vec<T> = v.iter().map(|&vi| vi / s).collect();
    let constant = T::one() / s;
    let ax = a.apply(&coords);
    let residual = ax.iter().fold(T::zero(), |r, &y| r.max((y - constant).abs()));
    let scale = linalg::max_abs(a.matrix());
    if residual > T::lit(1e-9).max(T::epsilon() * T::lit(1e3)) * scale {
        return Err(WfError::Numeric(format!(
            "equilibrium residual {residual} too large"
        )));
    }
    let interior = coords.iter().all(|&c| c > T::zero());
    Ok(Equilibrium {
        coords,
        constant,
        interior,
        residual,
    })
}

/// Jacobian of the partnership rule (baseline `b = e`) at an interior
/// equilibrium, in the form `delta_ij + chi_i B_ij / (1 + r)` with
/// `B = omega / (1 - omega) A` and `B chi = r e`. It agrees with the
/// derivative of `Gamma` on the sum-zero subspace.
pub fn jacobian_at_equilibrium<T: Scalar>(a: &PayoffMatrix<T>, omega: T, chi: &SimplexPoint<T>) -> Result<DMatrix<T>> {
    if !(omega > T::zero() && omega < T::one()) {
        return Err(WfError::InvalidParameter(format!("omega = {omega} not in (0, 1)")));
    }
    let m = a.dim();
    if chi.dim() != m {
        return Err(WfError::DimensionMismatch {
            expected: m,
            got: chi.dim(),
        });
    }
    let b = a.scaled(omega / (T::one() - omega));
    let bchi = b.apply(chi.coords());
    let r = bchi.iter().copied().sum::<T>() / T::lit(m as f64);
    let spread = bchi.iter().fold(T::zero(), |s, &v| s.max((v - r).abs()));
    let tol = T::lit(1e-9).max(T::epsilon() * T::lit(1e3)) * (T::one() + linalg::max_abs(b.matrix()));
    if spread > tol {
        return Err(WfError::Precondition(format!(
            "point is not an equilibrium: B chi deviates from a constant by {spread}"
        )));
    }
    let x = chi.coords();
    Ok(DMatrix::from_fn(m, m, |i, j| {
        let delta = if i == j { T::one() } else { T::zero() };
        delta + x[i] * b.get(i, j) / (T::one() + r)
    }))
}

/// Largest eigenvalue modulus of `D` restricted to the sum-zero subspace.
pub fn spectral_radius_on_w<T: Scalar>(d: &DMatrix<T>) -> Result<T> {
    if d.nrows() != d.ncols() {
        return Err(WfError::DimensionMismatch {
            expected: d.nrows(),
            got: d.ncols(),
        });
    }
    if d.nrows() < 2 {
        return Ok(T::zero());
    }
    let projected = linalg::project_to_sum_zero(d);
    let rho = linalg::spectral_radius(&projected);
    if !rho.is_finite() {
        return Err(WfError::Numeric("eigenvalue computation failed".into()));
    }
    Ok(T::lit(rho))
}

/// Compares the closed-form equilibrium Jacobian with central differences of
/// `Gamma`, along an orthonormal basis of the sum-zero subspace.
pub fn jacobian_fd_discrepancy<T: Scalar>(rule: &UpdateRule<T>, d: &DMatrix<T>, at: &SimplexPoint<T>, h: T) -> Result<T> {
    let fd = finite_difference_jacobian(|v| rule.apply_raw(v), at.coords(), h)?;
    let q = linalg::sum_zero_basis::<T>(d.nrows());
    Ok(linalg::max_abs_diff(&(d * &q), &(fd * q)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assumption7Flags {
    pub omega_in_range: bool,
    pub symmetric: bool,
    pub positive_entries: bool,
    pub invertible: bool,
    /// Exactly one positive eigenvalue; for a symmetric positive matrix this is
    /// equivalent to negative definiteness on the sum-zero subspace.
    pub one_positive_eigenvalue: bool,
    pub interior_equilibrium: bool,
}

impl Assumption7Flags {
    pub fn all(&self) -> bool {
        self.omega_in_range
            && self.symmetric
            && self.positive_entries
            && self.invertible
            && self.one_positive_eigenvalue
            && self.interior_equilibrium
    }
}

pub fn check_assumption7<T: Scalar>(a: &PayoffMatrix<T>, omega: T) -> Assumption7Flags {
    let scale = linalg::max_abs(a.matrix()).as_f64();
    let ev = linalg::symmetric_eigenvalues(a.matrix());
    let positives = ev.iter().filter(|&&l| l > 1e-10 * scale).count();
    let interior_equilibrium = solve_interior_equilibrium(a)
        .map(|e| e.interior && e.constant > T::zero())
        .unwrap_or(false);
    Assumption7Flags {
        omega_in_range: omega > T::zero() && omega < T::one(),
        symmetric: a.is_symmetric(),
        positive_entries: a.has_positive_entries(),
        invertible: a.is_invertible(),
        one_positive_eigenvalue: positives == 1,
        interior_equilibrium,
    }
}

/// `w^T A w > 0` for every non-zero sum-zero `w`.
pub fn check_positive_definite_on_w<T: Scalar>(a: &PayoffMatrix<T>) -> bool {
    if a.dim() < 2 {
        return true;
    }
    let scale = linalg::max_abs(a.matrix()).as_f64().max(f64::MIN_POSITIVE);
    let projected = linalg::project_to_sum_zero(a.matrix());
    linalg::symmetric_eigenvalues(&projected)
        .iter()
        .all(|&l| l > 1e-10 * scale)
}

/// A replicator rest point on the boundary together with the invasion test
/// `y^T A z > z^T A z` for the chosen witness `y`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Scalar"))]
pub struct BoundaryRestPoint<T: Scalar = f64> {
    pub face: SupportSet,
    pub point: SimplexPoint<T>,
    pub margin: Option<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermanenceStatus {
    /// A witness `y` in the open simplex invades every boundary rest point.
    Permanent,
    /// Interior equilibrium and candidate grid both fail the invasion test.
    ConditionFails,
    /// No interior equilibrium to test, and the candidate grid found no witness.
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Scalar"))]
pub struct PermanenceReport<T: Scalar = f64> {
    pub status: PermanenceStatus,
    pub witness: Option<SimplexPoint<T>>,
    pub rest_points: Vec<BoundaryRestPoint<T>>,
}

const PERMANENCE_MAX_DIM: usize = 5;

/// Checks the invasion condition for permanence of replicator dynamics with a
/// symmetric payoff matrix.
pub fn check_permanence<T: Scalar>(a: &PayoffMatrix<T>) -> Result<PermanenceReport<T>> {
    let m = a.dim();
    if m > PERMANENCE_MAX_DIM {
        return Err(WfError::Precondition(format!(
            "permanence check enumerates faces; M = {m} exceeds {PERMANENCE_MAX_DIM}"
        )));
    }
    if !a.is_symmetric() {
        return Err(WfError::Precondition("permanence check requires a symmetric payoff matrix".into()));
    }
    let mut rest: Vec<(SupportSet, SimplexPoint<T>)> = Vec::new();
    for face in SupportSet::proper_faces(m) {
        let idx = face.indices().to_vec();
        let sub = a.submatrix(&idx);
        match solve_interior_equilibrium(&sub) {
            Ok(eq) => {
                if eq.interior {
                    rest.push((face.clone(), embed(m, &idx, &eq.coords)));
                }
            }
            Err(_) => {
                for z in face_grid_rest_points(&sub, 200) {
                    rest.push((face.clone(), embed(m, &idx, &z)));
                }
            }
        }
    }

    let invades = |y: &SimplexPoint<T>, z: &SimplexPoint<T>| {
        linalg::bilinear(a.matrix(), y.coords(), z.coords()) - a.quadratic(z.coords())
    };
    let passes = |y: &SimplexPoint<T>| rest.iter().all(|(_, z)| invades(y, z) > T::zero());

    let equilibrium = solve_interior_equilibrium(a).ok().and_then(|e| e.point());
    let mut witness = equilibrium.clone().filter(|y| passes(y));
    if witness.is_none() {
        let res = if m <= 3 { 60 } else { 12 };
        witness = simplex::enumerate_lattice(m, res, simplex::DEFAULT_MAX_STATES)?
            .into_iter()
            .filter(|p| p.is_interior())
            .map(|p| p.as_frequencies::<T>())
            .find(|y| passes(y));
    }
    let status = match (&witness, &equilibrium) {
        (Some(_), _) => PermanenceStatus::Permanent,
        (None, Some(_)) => PermanenceStatus::ConditionFails,
        (None, None) => PermanenceStatus::Inconclusive,
    };
    let rest_points = rest
        .into_iter()
        .map(|(face, point)| {
            let margin = witness.as_ref().or(equilibrium.as_ref()).map(|y| invades(y, &point));
            BoundaryRestPoint { face, point, margin }
        })
        .collect();
    Ok(PermanenceReport {
        status,
        witness,
        rest_points,
    })
}

fn embed<T: Scalar>(m: usize, idx: &[usize], sub: &[T]) -> SimplexPoint<T> {
    let mut v = vec![T::zero(); m];
    for (k, &i) in idx.iter().enumerate() {
        v[i] = sub[k];
    }
    SimplexPoint::from_raw(v)
}

/// Grid scan of the open face for points where `(A z)_i` is constant.
fn face_grid_rest_points<T: Scalar>(sub: &PayoffMatrix<T>, res: u32) -> Vec<Vec<T>> {
    let k = sub.dim();
    let Ok(grid) = simplex::enumerate_lattice(k, res, simplex::DEFAULT_MAX_STATES) else {
        return Vec::new();
    };
    grid.into_iter()
        .filter(|p| p.is_interior())
        .filter_map(|p| {
            let z = p.as_frequencies::<T>().into_coords();
            let az = sub.apply(&z);
            let lo = az.iter().copied().fold(T::infinity(), T::min);
            let hi = az.iter().copied().fold(T::neg_infinity(), T::max);
            (hi - lo < T::lit(1e-8)).then_some(z)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Scalar"))]
pub struct LyapunovReport<T: Scalar = f64> {
    pub min_increment: T,
    /// `(sample index, h(Gamma(x)) - h(x))` for increments below `-1e-10`.
    pub violations: Vec<(usize, T)>,
}

pub fn lyapunov_check<T, H>(rule: &UpdateRule<T>, h: H, sample: &[SimplexPoint<T>]) -> Result<LyapunovReport<T>>
where
    T: Scalar,
    H: Fn(&SimplexPoint<T>) -> T,
{
    let mut min_increment = T::infinity();
    let mut violations = Vec::new();
    for (i, x) in sample.iter().enumerate() {
        let inc = h(&rule.apply(x)?) - h(x);
        min_increment = min_increment.min(inc);
        if inc < T::lit(-1e-10) {
            violations.push((i, inc));
        }
    }
    Ok(LyapunovReport {
        min_increment,
        violations,
    })
}

/// Barycentric lattice of resolution `1/G` used to discretise epsilon-chains.
#[derive(Debug, Clone)]
pub struct SimplexGrid<T: Scalar = f64> {
    resolution: u32,
    nodes: Vec<SimplexPoint<T>>,
    index: HashMap<Vec<u32>, usize>,
    counts: Vec<LatticePoint>,
}

pub const DEFAULT_GRID_RESOLUTION: u32 = 60;
const CHAIN_MAX_DIM: usize = 3;

impl<T: Scalar> SimplexGrid<T> {
    pub fn new(m: usize, resolution: u32) -> Result<Self> {
        if m > CHAIN_MAX_DIM {
            return Err(WfError::Precondition(format!(
                "epsilon-chain grid search supports M <= {CHAIN_MAX_DIM}, got {m}"
            )));
        }
        let counts = simplex::enumerate_lattice(m, resolution, simplex::DEFAULT_MAX_STATES)?;
        let nodes = counts.iter().map(|p| p.as_frequencies()).collect();
        let index = counts
            .iter()
            .enumerate()
            .map(|(i, p)| (p.counts().to_vec(), i))
            .collect();
        Ok(Self {
            resolution,
            nodes,
            index,
            counts,
        })
    }

    pub fn spacing(&self) -> T {
        T::one() / T::lit(self.resolution as f64)
    }

    pub fn nodes(&self) -> &[SimplexPoint<T>] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nearest(&self, x: &SimplexPoint<T>) -> usize {
        let p = LatticePoint::round_from(x, self.resolution);
        self.index[p.counts()]
    }

    /// Grid nodes `v` with `|center - v|_inf < eps`.
    pub fn within(&self, center: &[T], eps: T) -> Vec<usize> {
        let g = self.resolution as f64;
        let m = center.len();
        let eps_f = eps.as_f64();
        let ranges: Vec<(u32, u32)> = center
            .iter()
            .map(|&c| {
                let c = c.as_f64();
                let lo = ((c - eps_f) * g).ceil().max(0.0) as u32;
                let hi = ((c + eps_f) * g).floor().min(g) as u32;
                (lo, hi)
            })
            .collect();
        let mut out = Vec::new();
        let mut counts = vec![0u32; m];
        self.box_walk(0, self.resolution, &ranges, &mut counts, center, eps, &mut out);
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn box_walk(
        &self,
        i: usize,
        left: u32,
        ranges: &[(u32, u32)],
        counts: &mut Vec<u32>,
        center: &[T],
        eps: T,
        out: &mut Vec<usize>,
    ) {
        let m = counts.len();
        if i == m - 1 {
            counts[i] = left;
            if left < ranges[i].0 || left > ranges[i].1 {
                return;
            }
            let idx = self.index[counts.as_slice()];
            if simplex::linf(self.nodes[idx].coords(), center) < eps {
                out.push(idx);
            }
            return;
        }
        let (lo, hi) = ranges[i];
        for c in lo..=hi.min(left) {
            counts[i] = c;
            self.box_walk(i + 1, left - c, ranges, counts, center, eps, out);
        }
    }

    pub fn lattice(&self, i: usize) -> &LatticePoint {
        &self.counts[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainReach {
    pub reachable: bool,
    /// Minimal number of chain steps; `Some(0)` when the start already lies in the target.
    pub length: Option<usize>,
}

fn check_chain_eps<T: Scalar>(grid: &SimplexGrid<T>, eps: T) -> Result<()> {
    if !(eps > grid.spacing()) {
        return Err(WfError::Config(format!(
            "epsilon {eps} must exceed the grid spacing {}",
            grid.spacing()
        )));
    }
    Ok(())
}

/// Breadth-first search for the shortest epsilon-chain, on the grid, from the
/// node nearest to `from` into `target`.
pub fn epsilon_chain_reachable<T, F>(
    rule: &UpdateRule<T>,
    from: &SimplexPoint<T>,
    target: F,
    eps: T,
    resolution: u32,
) -> Result<ChainReach>
where
    T: Scalar,
    F: Fn(&SimplexPoint<T>) -> bool,
{
    let grid = SimplexGrid::new(rule.dim(), resolution)?;
    check_chain_eps(&grid, eps)?;
    let start = grid.nearest(from);
    if target(&grid.nodes[start]) {
        return Ok(ChainReach {
            reachable: true,
            length: Some(0),
        });
    }
    let mut dist = vec![usize::MAX; grid.len()];
    dist[start] = 0;
    let mut queue = VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        let image = rule.apply(&grid.nodes[u])?;
        for v in grid.within(image.coords(), eps) {
            if dist[v] != usize::MAX {
                continue;
            }
            dist[v] = dist[u] + 1;
            if target(&grid.nodes[v]) {
                return Ok(ChainReach {
                    reachable: true,
                    length: Some(dist[v]),
                });
            }
            queue.push_back(v);
        }
    }
    Ok(ChainReach {
        reachable: false,
        length: None,
    })
}

/// Empirical surrogate for the `(epsilon, T)` pair that forces every
/// epsilon-chain started in a compact set into a neighbourhood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Scalar"))]
pub struct ChainConstants<T: Scalar = f64> {
    pub epsilon: T,
    pub steps: usize,
    pub sources: usize,
}

/// For each candidate epsilon (largest first), propagates the set of grid
/// nodes reachable by epsilon-chains from `source` and reports the first
/// step at which that whole set lies inside `target`. This is an estimate on
/// a finite grid, not a certified constant.
pub fn estimate_chain_constants<T, S, F>(
    rule: &UpdateRule<T>,
    source: S,
    target: F,
    candidates: &[T],
    resolution: u32,
    max_steps: usize,
) -> Result<Option<ChainConstants<T>>>
where
    T: Scalar,
    S: Fn(&SimplexPoint<T>) -> bool,
    F: Fn(&SimplexPoint<T>) -> bool,
{
    let grid = SimplexGrid::new(rule.dim(), resolution)?;
    let images: Vec<SimplexPoint<T>> = grid
        .nodes
        .iter()
        .map(|x| rule.apply(x))
        .collect::<Result<_>>()?;
    let in_target: Vec<bool> = grid.nodes.iter().map(&target).collect();
    let start: Vec<usize> = (0..grid.len()).filter(|&i| source(&grid.nodes[i])).collect();
    if start.is_empty() {
        return Err(WfError::InvalidParameter("source set contains no grid nodes".into()));
    }
    let mut eps_sorted = candidates.to_vec();
    eps_sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    for eps in eps_sorted {
        check_chain_eps(&grid, eps)?;
        let mut current = start.clone();
        for step in 1..=max_steps {
            let mut mark = vec![false; grid.len()];
            for &u in &current {
                for v in grid.within(images[u].coords(), eps) {
                    mark[v] = true;
                }
            }
            let next: Vec<usize> = (0..grid.len()).filter(|&i| mark[i]).collect();
            if next.iter().all(|&v| in_target[v]) {
                return Ok(Some(ChainConstants {
                    epsilon: eps,
                    steps: step,
                    sources: start.len(),
                }));
            }
            if next == current {
                break;
            }
            current = next;
        }
    }
    Ok(None)
}

/// Summary of the mean-field skeleton of a partnership rule.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Scalar"))]
pub struct MeanFieldReport<T: Scalar = f64> {
    pub equilibrium: Vec<T>,
    pub constant: T,
    pub interior: bool,
    pub omega: T,
    pub jacobian: Option<Vec<Vec<T>>>,
    pub spectral_radius_on_w: Option<T>,
    pub assumption7: Assumption7Flags,
    pub positive_definite_on_w: bool,
    pub permanence: Option<PermanenceStatus>,
}

pub fn analyze<T: Scalar>(a: &PayoffMatrix<T>, omega: T) -> Result<MeanFieldReport<T>> {
    let eq = solve_interior_equilibrium(a)?;
    let (jacobian, radius) = match eq.point() {
        Some(chi) => {
            let d = jacobian_at_equilibrium(a, omega, &chi)?;
            let rho = spectral_radius_on_w(&d)?;
            (Some(linalg::to_rows(&d)), Some(rho))
        }
        None => (None, None),
    };
    let permanence = if a.is_symmetric() && a.dim() <= PERMANENCE_MAX_DIM {
        Some(check_permanence(a)?.status)
    } else {
        None
    };
    Ok(MeanFieldReport {
        constant: eq.constant,
        interior: eq.interior,
        equilibrium: eq.coords,
        omega,
        jacobian,
        spectral_radius_on_w: radius,
        assumption7: check_assumption7(a, omega),
        positive_definite_on_w: check_positive_definite_on_w(a),
        permanence,
    })
}
