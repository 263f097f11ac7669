//! Fitness landscapes and the replicator update rule they induce, with an
//! optional mutation stage applied before selection.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Result, WfError};
use crate::linalg;
use crate::scalar::Scalar;
use crate::simplex::SimplexPoint;

/// Square payoff matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PayoffMatrix<T: Scalar = f64> {
    a: DMatrix<T>,
}

impl<T: Scalar> PayoffMatrix<T> {
    pub fn new(rows: &[Vec<T>]) -> Result<Self> {
        Self::from_matrix(linalg::from_rows(rows)?)
    }

    pub fn from_matrix(a: DMatrix<T>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(WfError::DimensionMismatch {
                expected: a.nrows(),
                got: a.ncols(),
            });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(WfError::InvalidParameter("payoff matrix has non-finite entries".into()));
        }
        Ok(Self { a })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.a
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.a[(i, j)]
    }

    pub fn rows(&self) -> Vec<Vec<T>> {
        linalg::to_rows(&self.a)
    }

    pub fn is_symmetric(&self) -> bool {
        let tol = T::lit(1e-12) * (T::one() + linalg::max_abs(&self.a));
        (0..self.dim()).all(|i| (0..i).all(|j| (self.a[(i, j)] - self.a[(j, i)]).abs() <= tol))
    }

    pub fn has_positive_entries(&self) -> bool {
        self.a.iter().all(|&v| v > T::zero())
    }

    pub fn is_invertible(&self) -> bool {
        linalg::is_invertible(&self.a)
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        linalg::mat_vec(&self.a, x)
    }

    /// `x^T A x`.
    pub fn quadratic(&self, x: &[T]) -> T {
        linalg::bilinear(&self.a, x, x)
    }

    pub fn scaled(&self, k: T) -> Self {
        Self { a: &self.a * k }
    }

    /// Principal submatrix on the given indices.
    pub fn submatrix(&self, idx: &[usize]) -> Self {
        Self {
            a: DMatrix::from_fn(idx.len(), idx.len(), |i, j| self.a[(idx[i], idx[j])]),
        }
    }
}

pub type FitnessFn<T> = Arc<dyn Fn(&[T]) -> Vec<T> + Send + Sync>;

/// A fitness landscape `phi: simplex -> R_+^M`.
#[derive(Clone)]
pub enum FitnessModel<T: Scalar = f64> {
    /// `(1 - omega) b + omega A x`.
    LinearFractional {
        payoff: PayoffMatrix<T>,
        baseline: Vec<T>,
        omega: T,
    },
    /// `exp(beta (A x)_i)`.
    Exponential { payoff: PayoffMatrix<T>, beta: T },
    /// Arbitrary user landscape; validity is checked on every evaluation.
    Tabulated { dim: usize, f: FitnessFn<T> },
}

impl<T: Scalar> fmt::Debug for FitnessModel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::LinearFractional {
                payoff,
                baseline,
                omega,
            } => f
                .debug_struct("LinearFractional")
                .field("payoff", &payoff.rows())
                .field("baseline", baseline)
                .field("omega", omega)
                .finish(),
            Self::Exponential { payoff, beta } => f
                .debug_struct("Exponential")
                .field("payoff", &payoff.rows())
                .field("beta", beta)
                .finish(),
            Self::Tabulated { dim, .. } => f.debug_struct("Tabulated").field("dim", dim).finish(),
        }
    }
}

impl<T: Scalar> FitnessModel<T> {
    pub fn linear_fractional(payoff: PayoffMatrix<T>, baseline: Vec<T>, omega: T) -> Result<Self> {
        if !(omega > T::zero() && omega < T::one()) {
            return Err(WfError::InvalidParameter(format!(
                "selection parameter omega = {omega} must lie in (0, 1)"
            )));
        }
        if baseline.len() != payoff.dim() {
            return Err(WfError::DimensionMismatch {
                expected: payoff.dim(),
                got: baseline.len(),
            });
        }
        if baseline.iter().any(|&b| !(b > T::zero()) || !b.is_finite()) {
            return Err(WfError::InvalidParameter("baseline fitness must be strictly positive".into()));
        }
        Ok(Self::LinearFractional {
            payoff,
            baseline,
            omega,
        })
    }

    /// Linear-fractional fitness with baseline `b = (1, .., 1)`.
    pub fn partnership(payoff: PayoffMatrix<T>, omega: T) -> Result<Self> {
        let m = payoff.dim();
        Self::linear_fractional(payoff, vec![T::one(); m], omega)
    }

    pub fn exponential(payoff: PayoffMatrix<T>, beta: T) -> Result<Self> {
        if !(beta > T::zero()) || !beta.is_finite() {
            return Err(WfError::InvalidParameter(format!("beta = {beta} must be positive")));
        }
        Ok(Self::Exponential { payoff, beta })
    }

    pub fn tabulated<F>(dim: usize, f: F) -> Self
    where
        F: Fn(&[T]) -> Vec<T> + Send + Sync + 'static,
    {
        Self::Tabulated {
            dim,
            f: Arc::new(f),
        }
    }

    /// `phi == 1`.
    pub fn neutral(dim: usize) -> Self {
        Self::tabulated(dim, move |_| vec![T::one(); dim])
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::LinearFractional { payoff, .. } | Self::Exponential { payoff, .. } => payoff.dim(),
            Self::Tabulated { dim, .. } => *dim,
        }
    }

    pub fn payoff(&self) -> Option<&PayoffMatrix<T>> {
        match self {
            Self::LinearFractional { payoff, .. } | Self::Exponential { payoff, .. } => Some(payoff),
            Self::Tabulated { .. } => None,
        }
    }

    pub fn eval(&self, x: &SimplexPoint<T>) -> Result<Vec<T>> {
        self.eval_raw(x.coords())
    }

    pub(crate) fn eval_raw(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.dim() {
            return Err(WfError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let phi = match self {
            Self::LinearFractional {
                payoff,
                baseline,
                omega,
            } => {
                let ax = payoff.apply(x);
                baseline
                    .iter()
                    .zip(&ax)
                    .map(|(&b, &v)| (T::one() - *omega) * b + *omega * v)
                    .collect::<Vec<_>>()
            }
            Self::Exponential { payoff, beta } => payoff
                .apply(x)
                .into_iter()
                .map(|v| (*beta * v).exp())
                .collect(),
            Self::Tabulated { dim, f } => {
                let phi = f(x);
                if phi.len() != *dim {
                    return Err(WfError::DimensionMismatch {
                        expected: *dim,
                        got: phi.len(),
                    });
                }
                phi
            }
        };
        if let Some(i) = phi.iter().position(|v| !v.is_finite()) {
            return Err(WfError::NumericRange(i));
        }
        Ok(phi)
    }

    /// Fitness values up to a common positive factor, chosen so that
    /// large exponents never overflow. `Gamma` is invariant to the factor.
    fn relative_eval(&self, x: &[T]) -> Result<Vec<T>> {
        match self {
            Self::Exponential { payoff, beta } => {
                let z: Vec<T> = payoff.apply(x).into_iter().map(|v| *beta * v).collect();
                let shift = z
                    .iter()
                    .zip(x)
                    .filter(|(_, &xi)| xi > T::zero())
                    .map(|(&zi, _)| zi)
                    .fold(T::neg_infinity(), T::max);
                let shift = if shift.is_finite() { shift } else { T::zero() };
                Ok(z.into_iter().map(|v| (v - shift).exp()).collect())
            }
            _ => self.eval_raw(x),
        }
    }

    /// `d phi_i / d x_j` scaled consistently with [`Self::relative_eval`];
    /// central differences for tabulated landscapes.
    fn relative_jacobian(&self, x: &[T], phi: &[T]) -> Result<DMatrix<T>> {
        match self {
            Self::LinearFractional { payoff, omega, .. } => Ok(payoff.matrix() * *omega),
            Self::Exponential { payoff, beta } => {
                let m = payoff.dim();
                Ok(DMatrix::from_fn(m, m, |i, j| *beta * payoff.get(i, j) * phi[i]))
            }
            Self::Tabulated { .. } => finite_difference_jacobian(|v| self.eval_raw(v), x, T::lit(1e-6)),
        }
    }
}

/// Row-stochastic mutation matrix; entry `(i, j)` is the probability that a
/// type-`i` offspring mutates into type `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct MutationMatrix<T: Scalar = f64> {
    theta: DMatrix<T>,
}

impl<T: Scalar> MutationMatrix<T> {
    pub fn new(rows: &[Vec<T>]) -> Result<Self> {
        let theta = linalg::from_rows(rows)?;
        if theta.nrows() != theta.ncols() {
            return Err(WfError::DimensionMismatch {
                expected: theta.nrows(),
                got: theta.ncols(),
            });
        }
        let tol = T::lit(1e-12).max(T::epsilon() * T::lit(4.0 * theta.ncols() as f64));
        for i in 0..theta.nrows() {
            let row = theta.row(i);
            if row.iter().any(|&v| v < T::zero() || !v.is_finite()) {
                return Err(WfError::InvalidParameter(format!(
                    "mutation row {i} has negative or non-finite entries"
                )));
            }
            let s: T = row.iter().copied().sum();
            if (s - T::one()).abs() > tol {
                return Err(WfError::InvalidParameter(format!(
                    "mutation row {i} sums to {s}, expected 1"
                )));
            }
        }
        Ok(Self { theta })
    }

    pub fn identity(m: usize) -> Self {
        Self {
            theta: DMatrix::identity(m, m),
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.theta
    }

    pub fn rows(&self) -> Vec<Vec<T>> {
        linalg::to_rows(&self.theta)
    }

    /// `x^T Theta`.
    pub fn mix(&self, x: &[T]) -> Vec<T> {
        let m = self.dim();
        (0..m)
            .map(|j| (0..m).map(|i| x[i] * self.theta[(i, j)]).sum())
            .collect()
    }
}

/// The mean-field map `Gamma(x) = Upsilon(x^T Theta)` where `Upsilon` is the
/// replicator map of the fitness landscape.
#[derive(Debug, Clone)]
pub struct UpdateRule<T: Scalar = f64> {
    fitness: FitnessModel<T>,
    mutation: Option<MutationMatrix<T>>,
}

impl<T: Scalar> UpdateRule<T> {
    pub fn new(fitness: FitnessModel<T>) -> Self {
        Self {
            fitness,
            mutation: None,
        }
    }

    pub fn neutral(m: usize) -> Self {
        Self::new(FitnessModel::neutral(m))
    }

    pub fn with_mutation(mut self, theta: MutationMatrix<T>) -> Result<Self> {
        if theta.dim() != self.dim() {
            return Err(WfError::DimensionMismatch {
                expected: self.dim(),
                got: theta.dim(),
            });
        }
        self.mutation = Some(theta);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.fitness.dim()
    }

    pub fn fitness(&self) -> &FitnessModel<T> {
        &self.fitness
    }

    pub fn mutation(&self) -> Option<&MutationMatrix<T>> {
        self.mutation.as_ref()
    }

    /// `Gamma(x)`.
    pub fn apply(&self, x: &SimplexPoint<T>) -> Result<SimplexPoint<T>> {
        self.apply_raw(x.coords()).map(SimplexPoint::from_raw)
    }

    /// The replicator part `Upsilon(x)`, ignoring any mutation matrix.
    pub fn replicator(&self, x: &SimplexPoint<T>) -> Result<SimplexPoint<T>> {
        self.replicator_raw(x.coords()).map(SimplexPoint::from_raw)
    }

    /// `Gamma` on a raw coordinate vector; also valid slightly off the simplex,
    /// which finite-difference probes rely on.
    pub fn apply_raw(&self, x: &[T]) -> Result<Vec<T>> {
        match &self.mutation {
            Some(theta) => self.replicator_raw(&theta.mix(x)),
            None => self.replicator_raw(x),
        }
    }

    fn replicator_raw(&self, y: &[T]) -> Result<Vec<T>> {
        let phi = self.fitness.relative_eval(y)?;
        let (weights, total) = weighted(y, &phi)?;
        Ok(weights.into_iter().map(|w| w / total).collect())
    }

    /// `sum_j y(j) phi_j(y)` with `y = x^T Theta` (or `y = x`), the normaliser of the rule.
    pub fn average_fitness(&self, x: &SimplexPoint<T>) -> Result<T> {
        let y = self.premix(x.coords());
        let phi = self.fitness.eval_raw(&y)?;
        Ok(y.iter().zip(&phi).map(|(&a, &b)| a * b).sum())
    }

    /// `Gamma_i(x) / x(i)` on the support; `None` off the support.
    pub fn darwinian_fitness(&self, x: &SimplexPoint<T>) -> Result<Vec<Option<T>>> {
        let g = self.apply(x)?;
        Ok(x.coords()
            .iter()
            .zip(g.coords())
            .map(|(&xi, &gi)| (xi > T::zero()).then(|| gi / xi))
            .collect())
    }

    /// `(Gamma_i(x) / x(i)) h(x)` on the support, for a positive normalisation `h`.
    pub fn reproductive_fitness<H>(&self, h: H, x: &SimplexPoint<T>) -> Result<Vec<Option<T>>>
    where
        H: Fn(&SimplexPoint<T>) -> T,
    {
        let hv = h(x);
        if !(hv > T::zero()) || !hv.is_finite() {
            return Err(WfError::InvalidParameter(format!(
                "normalisation h(x) = {hv} must be positive"
            )));
        }
        Ok(self
            .darwinian_fitness(x)?
            .into_iter()
            .map(|f| f.map(|v| v * hv))
            .collect())
    }

    /// Jacobian of `Gamma` (as a map on the positive orthant) at `x`.
    /// Columns sum to zero. The fitness derivative is analytic for built-in
    /// landscapes and a central difference for tabulated ones.
    pub fn jacobian(&self, x: &SimplexPoint<T>) -> Result<DMatrix<T>> {
        let y = self.premix(x.coords());
        let phi = self.fitness.relative_eval(&y)?;
        let dphi = self.fitness.relative_jacobian(&y, &phi)?;
        let m = self.dim();
        let (weights, total) = weighted(&y, &phi)?;
        let upsilon: Vec<T> = weights.iter().map(|&w| w / total).collect();
        // d total / d y_j = phi_j + sum_k y_k dphi_kj
        let dtotal: Vec<T> = (0..m)
            .map(|j| phi[j] + (0..m).map(|k| y[k] * dphi[(k, j)]).sum::<T>())
            .collect();
        let mut jac = DMatrix::from_fn(m, m, |i, j| {
            let delta = if i == j { phi[i] } else { T::zero() };
            (delta + y[i] * dphi[(i, j)]) / total - upsilon[i] * dtotal[j] / total
        });
        if let Some(theta) = &self.mutation {
            jac *= theta.matrix().transpose();
        }
        Ok(jac)
    }

    fn premix(&self, x: &[T]) -> Vec<T> {
        match &self.mutation {
            Some(theta) => theta.mix(x),
            None => x.to_vec(),
        }
    }
}

fn weighted<T: Scalar>(y: &[T], phi: &[T]) -> Result<(Vec<T>, T)> {
    let mut weights = Vec::with_capacity(y.len());
    for (i, (&yi, &fi)) in y.iter().zip(phi).enumerate() {
        if yi > T::zero() && fi < T::zero() {
            return Err(WfError::Precondition(format!(
                "fitness component {i} is negative ({fi}) on the support"
            )));
        }
        weights.push(yi * fi);
    }
    let total: T = weights.iter().copied().sum();
    if !(total > T::zero()) || !total.is_finite() {
        return Err(WfError::DegenerateFitness(total.as_f64()));
    }
    Ok((weights, total))
}

/// Central-difference Jacobian of `f` at `x` along the coordinate axes.
pub fn finite_difference_jacobian<T, F>(f: F, x: &[T], h: T) -> Result<DMatrix<T>>
where
    T: Scalar,
    F: Fn(&[T]) -> Result<Vec<T>>,
{
    let m = x.len();
    let mut jac = DMatrix::zeros(m, m);
    let mut probe = x.to_vec();
    for j in 0..m {
        probe[j] = x[j] + h;
        let up = f(&probe)?;
        probe[j] = x[j] - h;
        let down = f(&probe)?;
        probe[j] = x[j];
        for i in 0..m {
            jac[(i, j)] = (up[i] - down[i]) / (h + h);
        }
    }
    Ok(jac)
}
