//! Probability simplex of dimension `M - 1` and its population-`N` lattice.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WfError};
use crate::scalar::Scalar;

/// Default cap on enumerated lattice states.
pub const DEFAULT_MAX_STATES: usize = 200_000;

/// A probability vector: non-negative coordinates summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct SimplexPoint<T: Scalar = f64> {
    coords: Vec<T>,
}

fn sum_tolerance<T: Scalar>(m: usize) -> T {
    T::lit(1e-12).max(T::epsilon() * T::lit(4.0 * m as f64))
}

impl<T: Scalar> SimplexPoint<T> {
    /// Rejects inputs whose sum differs from one by more than 1e-12
    /// (or a few ulps for narrow float types).
    pub fn new(coords: Vec<T>) -> Result<Self> {
        Self::check_entries(&coords)?;
        let sum: T = coords.iter().copied().sum();
        if (sum - T::one()).abs() > sum_tolerance::<T>(coords.len()) {
            return Err(WfError::InvalidPoint(format!(
                "coordinates sum to {sum}, expected 1"
            )));
        }
        Ok(Self { coords })
    }

    /// Divides by the coordinate sum.
    pub fn normalized(coords: Vec<T>) -> Result<Self> {
        Self::check_entries(&coords)?;
        let sum: T = coords.iter().copied().sum();
        if sum <= T::zero() {
            return Err(WfError::InvalidPoint("coordinates sum to zero".into()));
        }
        Ok(Self {
            coords: coords.into_iter().map(|c| c / sum).collect(),
        })
    }

    fn check_entries(coords: &[T]) -> Result<()> {
        if coords.is_empty() {
            return Err(WfError::InvalidPoint("empty coordinate vector".into()));
        }
        for (i, &c) in coords.iter().enumerate() {
            if !c.is_finite() || c < T::zero() {
                return Err(WfError::InvalidPoint(format!(
                    "coordinate {i} = {c} is not a finite non-negative number"
                )));
            }
        }
        Ok(())
    }

    /// Used internally where the caller guarantees the invariant up to rounding.
    pub(crate) fn from_raw(coords: Vec<T>) -> Self {
        Self { coords }
    }

    pub fn vertex(m: usize, j: usize) -> Self {
        assert!(j < m, "vertex index {j} out of range for M = {m}");
        let mut coords = vec![T::zero(); m];
        coords[j] = T::one();
        Self { coords }
    }

    pub fn barycenter(m: usize) -> Self {
        Self {
            coords: vec![T::one() / T::lit(m as f64); m],
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<T> {
        self.coords
    }

    pub fn get(&self, i: usize) -> T {
        self.coords[i]
    }

    /// `{ j : x(j) > 0 }`.
    pub fn support(&self) -> SupportSet {
        self.support_above(T::zero())
    }

    pub fn support_above(&self, tol: T) -> SupportSet {
        SupportSet::new(
            self.coords
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > tol)
                .map(|(i, _)| i)
                .collect(),
        )
    }

    pub fn is_interior(&self) -> bool {
        self.coords.iter().all(|&c| c > T::zero())
    }

    pub fn classify(&self) -> Location {
        let s = self.support();
        if s.len() == self.dim() {
            Location::Interior
        } else {
            Location::Face(s)
        }
    }

    pub fn linf_distance(&self, other: &Self) -> Result<T> {
        self.check_dim(other)?;
        Ok(linf(&self.coords, &other.coords))
    }

    pub fn euclidean_distance(&self, other: &Self) -> Result<T> {
        self.check_dim(other)?;
        Ok(self
            .coords
            .iter()
            .zip(&other.coords)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            .sqrt())
    }

    fn check_dim(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(WfError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(())
    }

    pub fn min_coord(&self) -> T {
        self.coords.iter().copied().fold(T::infinity(), T::min)
    }

    /// Index of the smallest coordinate (lowest index on ties) and whether a tie occurred.
    pub fn argmin(&self) -> (usize, bool) {
        argmin(&self.coords)
    }
}

pub(crate) fn linf<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |m, (&x, &y)| m.max((x - y).abs()))
}

pub(crate) fn argmin<T: PartialOrd + Copy>(v: &[T]) -> (usize, bool) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] < v[best] {
            best = i;
        }
    }
    let tie = v.iter().enumerate().any(|(i, x)| i != best && *x == v[best]);
    (best, tie)
}

/// Set of type indices (0-based, sorted).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SupportSet {
    indices: Vec<usize>,
}

impl SupportSet {
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self { indices }
    }

    pub fn full(m: usize) -> Self {
        Self {
            indices: (0..m).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn is_subset_of(&self, other: &SupportSet) -> bool {
        self.indices.iter().all(|&i| other.contains(i))
    }

    /// Every non-empty subset of `{0, .., m-1}` except the full set.
    pub fn proper_faces(m: usize) -> Vec<SupportSet> {
        (1u32..(1u32 << m) - 1)
            .map(|mask| SupportSet::new((0..m).filter(|&i| mask & (1 << i) != 0).collect()))
            .collect()
    }
}

impl fmt::Display for SupportSet {
    /// Renders 1-based, e.g. `{2,3,4}`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (k, i) in self.indices.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", i + 1)?;
        }
        write!(f, "}}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Location {
    Interior,
    /// Relative interior of the face spanned by the given support.
    Face(SupportSet),
}

/// Integer composition of `N` into `M` parts: a state of the population-`N` chain.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatticePoint {
    counts: Vec<u32>,
    n: u32,
}

impl LatticePoint {
    pub fn new(counts: Vec<u32>, n: u32) -> Result<Self> {
        let sum: u64 = counts.iter().map(|&c| c as u64).sum();
        if counts.is_empty() || n == 0 || sum != n as u64 {
            return Err(WfError::InvalidPoint(format!(
                "counts {counts:?} do not sum to N = {n}"
            )));
        }
        Ok(Self { counts, n })
    }

    pub fn from_counts(counts: Vec<u32>) -> Result<Self> {
        let n = counts.iter().map(|&c| c as u64).sum::<u64>();
        let n = u32::try_from(n)
            .map_err(|_| WfError::InvalidParameter("population too large".into()))?;
        Self::new(counts, n)
    }

    pub fn vertex(m: usize, j: usize, n: u32) -> Self {
        let mut counts = vec![0; m];
        counts[j] = n;
        Self { counts, n }
    }

    /// Nearest lattice point by the largest-remainder rule; exact whenever
    /// `N x` is integral.
    pub fn round_from<T: Scalar>(x: &SimplexPoint<T>, n: u32) -> Self {
        let scaled: Vec<f64> = x.coords().iter().map(|c| c.as_f64() * n as f64).collect();
        let mut counts: Vec<u32> = scaled.iter().map(|s| (s + 1e-9).floor() as u32).collect();
        let assigned: u64 = counts.iter().map(|&c| c as u64).sum();
        let mut deficit = (n as u64).saturating_sub(assigned);
        let mut order: Vec<usize> = (0..scaled.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = scaled[a] - counts[a] as f64;
            let rb = scaled[b] - counts[b] as f64;
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if deficit == 0 {
                break;
            }
            counts[i] += 1;
            deficit -= 1;
        }
        // floor(+1e-9) can overshoot only when a coordinate sits within 1e-9 of an integer
        let mut total: u64 = counts.iter().map(|&c| c as u64).sum();
        while total > n as u64 {
            let (imax, _) = argmin(&counts.iter().map(|&c| -(c as i64)).collect::<Vec<_>>());
            counts[imax] -= 1;
            total -= 1;
        }
        Self { counts, n }
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn as_frequencies<T: Scalar>(&self) -> SimplexPoint<T> {
        let n = T::lit(self.n as f64);
        SimplexPoint::from_raw(self.counts.iter().map(|&c| T::lit(c as f64) / n).collect())
    }

    pub fn support(&self) -> SupportSet {
        SupportSet::new(
            self.counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(i, _)| i)
                .collect(),
        )
    }

    pub fn is_interior(&self) -> bool {
        self.counts.iter().all(|&c| c > 0)
    }

    pub fn is_vertex(&self) -> bool {
        self.counts.iter().filter(|&&c| c > 0).count() == 1
    }

    pub fn min_count(&self) -> u32 {
        self.counts.iter().copied().min().unwrap_or(0)
    }
}

/// `C(N + M - 1, M - 1)`, computed exactly.
pub fn lattice_size(m: usize, n: u32) -> u128 {
    if m == 0 {
        return 0;
    }
    let k = (m - 1) as u128;
    let total = n as u128 + k;
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (total - i) / (i + 1);
    }
    acc
}

/// All compositions of `N` into `M` parts, in descending lexicographic order,
/// starting at `(N, 0, .., 0)`.
pub fn enumerate_lattice(m: usize, n: u32, cap: usize) -> Result<Vec<LatticePoint>> {
    if m == 0 || n == 0 {
        return Err(WfError::InvalidParameter("M and N must be at least 1".into()));
    }
    let size = lattice_size(m, n);
    if size > cap as u128 {
        return Err(WfError::ResourceLimit {
            what: "lattice states",
            requested: size,
            cap: cap as u128,
        });
    }
    let mut out = Vec::with_capacity(size as usize);
    let mut c = vec![0u32; m];
    c[0] = n;
    loop {
        out.push(LatticePoint {
            counts: c.clone(),
            n,
        });
        let Some(i) = (0..m.saturating_sub(1)).rev().find(|&i| c[i] > 0) else {
            break;
        };
        let tail: u32 = c[i + 1..].iter().sum();
        c[i] -= 1;
        for v in &mut c[i + 1..] {
            *v = 0;
        }
        c[i + 1] = tail + 1;
    }
    debug_assert_eq!(out.len() as u128, size);
    Ok(out)
}
