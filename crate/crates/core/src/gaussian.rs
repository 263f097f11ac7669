//! Gaussian AR(1) approximation of the rescaled fluctuations
//! `u_k = sqrt(N) (X_k - psi_k)` around a mean-field orbit.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::chain::{step_sample, ChainConfig};
use crate::error::{Result, WfError};
use crate::fitness::UpdateRule;
use crate::linalg::psd_sqrt;
use crate::meanfield::{iterate, Orbit};
use crate::rng::replicate_rng;
use crate::simplex::{LatticePoint, SimplexPoint};

/// `Sigma_ii = p_i (1 - p_i)`, `Sigma_ij = -p_i p_j`: the covariance of one
/// multinomial draw with probabilities `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCovariance(DMatrix<f64>);

impl NoiseCovariance {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

pub fn sigma_matrix(p: &SimplexPoint) -> NoiseCovariance {
    let m = p.dim();
    NoiseCovariance(DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            p.get(i) * (1.0 - p.get(i))
        } else {
            -p.get(i) * p.get(j)
        }
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ar1Path {
    pub states: Vec<Vec<f64>>,
}

/// Coefficients `D_k = DGamma(psi_k)` and `Sigma_k = Sigma(Gamma(psi_k))` of
/// `U_{k+1} = D_k U_k + g_k`, `g_k ~ N(0, Sigma_k)`.
#[derive(Debug, Clone)]
pub struct Ar1Model {
    d: Vec<DMatrix<f64>>,
    sigma: Vec<DMatrix<f64>>,
    roots: Vec<DMatrix<f64>>,
}

impl Ar1Model {
    /// Time-inhomogeneous coefficients along `orbit` (one step per orbit edge).
    pub fn along(rule: &UpdateRule, orbit: &Orbit) -> Result<Self> {
        let k = orbit.len().saturating_sub(1);
        let mut d = Vec::with_capacity(k);
        let mut sigma = Vec::with_capacity(k);
        for psi in &orbit.states()[..k] {
            d.push(rule.jacobian(psi)?);
            sigma.push(sigma_matrix(&rule.apply(psi)?).into_matrix());
        }
        Self::from_parts(d, sigma)
    }

    /// Coefficients frozen at a fixed point `chi` for `steps` steps.
    pub fn stationary(rule: &UpdateRule, chi: &SimplexPoint, steps: usize) -> Result<Self> {
        let d = rule.jacobian(chi)?;
        let s = sigma_matrix(&rule.apply(chi)?).into_matrix();
        Self::from_parts(vec![d; steps], vec![s; steps])
    }

    pub fn from_parts(d: Vec<DMatrix<f64>>, sigma: Vec<DMatrix<f64>>) -> Result<Self> {
        if d.len() != sigma.len() {
            return Err(WfError::DimensionMismatch {
                expected: d.len(),
                got: sigma.len(),
            });
        }
        let mut roots: Vec<DMatrix<f64>> = Vec::with_capacity(sigma.len());
        for (k, s) in sigma.iter().enumerate() {
            if k > 0 && *s == sigma[k - 1] {
                roots.push(roots[k - 1].clone());
            } else {
                roots.push(psd_sqrt(s)?);
            }
        }
        Ok(Self { d, sigma, roots })
    }

    pub fn steps(&self) -> usize {
        self.d.len()
    }

    pub fn jacobians(&self) -> &[DMatrix<f64>] {
        &self.d
    }

    pub fn sigmas(&self) -> &[DMatrix<f64>] {
        &self.sigma
    }

    pub fn sample<R: Rng + ?Sized>(&self, u0: &[f64], rng: &mut R) -> Ar1Path {
        let mut u = DVector::from_column_slice(u0);
        let mut states = vec![u0.to_vec()];
        for (d, root) in self.d.iter().zip(&self.roots) {
            let z = DVector::from_fn(root.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
            u = d * u + root * z;
            states.push(u.iter().copied().collect());
        }
        Ar1Path { states }
    }

    /// `V_{k+1} = D_k V_k D_k^T + Sigma_k`.
    pub fn covariance(&self, v0: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut out = vec![v0.clone()];
        for (d, s) in self.d.iter().zip(&self.sigma) {
            let v = out.last().unwrap();
            out.push(d * v * d.transpose() + s);
        }
        out
    }
}

fn check_sum_zero(u0: &[f64]) -> Result<()> {
    let s: f64 = u0.iter().sum();
    if s.abs() > 1e-10 {
        return Err(WfError::InvalidParameter(format!("initial fluctuation sums to {s}, not 0")));
    }
    Ok(())
}

pub fn ar1_sample<R: Rng + ?Sized>(
    rule: &UpdateRule,
    orbit: &Orbit,
    u0: &[f64],
    stationary: Option<&SimplexPoint>,
    rng: &mut R,
) -> Result<Ar1Path> {
    check_sum_zero(u0)?;
    let model = match stationary {
        Some(chi) => Ar1Model::stationary(rule, chi, orbit.len().saturating_sub(1))?,
        None => Ar1Model::along(rule, orbit)?,
    };
    Ok(model.sample(u0, rng))
}

pub fn ar1_covariance(rule: &UpdateRule, orbit: &Orbit, v0: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
    Ok(Ar1Model::along(rule, orbit)?.covariance(v0))
}

/// Solution of `V = D V D^T + Sigma` by fixed-point iteration from zero.
pub fn stationary_covariance(d: &DMatrix<f64>, sigma: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<DMatrix<f64>> {
    let mut v = DMatrix::zeros(d.nrows(), d.ncols());
    for _ in 0..max_iter {
        let next = d * &v * d.transpose() + sigma;
        let change = (&next - &v).abs().max();
        v = next;
        if !v.iter().all(|x| x.is_finite()) {
            break;
        }
        if change < tol {
            return Ok(v);
        }
    }
    Err(WfError::Numeric(
        "covariance recursion did not converge (spectral radius on the sum-zero subspace >= 1?)".into(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualSample {
    pub n: u32,
    pub step: usize,
    pub orbit: Vec<Vec<f64>>,
    pub residuals: Vec<Vec<f64>>,
}

/// `sqrt(N) (X_k - psi_k)` for `replicates` independent chains started at
/// `x0`, with `psi_0 = x0 / N` so that every residual starts at zero.
pub fn rescaled_residuals(
    config: &ChainConfig,
    x0: &LatticePoint,
    k: usize,
    replicates: usize,
) -> Result<ResidualSample> {
    if x0.n() != config.n {
        return Err(WfError::InvalidPoint(format!("initial state is not on the N = {} lattice", config.n)));
    }
    let psi0 = x0.as_frequencies::<f64>();
    let orbit = iterate(&config.rule, &psi0, k)?;
    let psi_k = orbit.state(k).clone();
    let scale = (config.n as f64).sqrt();
    let residuals = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(config.seed, r as u64);
            let mut x = x0.clone();
            for _ in 0..k {
                x = step_sample(&x, &config.rule, &mut rng)?;
            }
            let f = x.as_frequencies::<f64>();
            Ok(f.coords().iter().zip(psi_k.coords()).map(|(a, b)| scale * (a - b)).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(ResidualSample {
        n: config.n,
        step: k,
        orbit: orbit.states().iter().map(|s| s.coords().to_vec()).collect(),
        residuals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualSummary {
    pub count: usize,
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub covariance_se: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualCheck {
    pub mean_ok: bool,
    pub covariance_ok: bool,
    /// Largest `|mean_i| / se_i`.
    pub max_mean_z: f64,
    /// Largest `|emp - pred| / max(0.1 |pred|, 3 se)`; at most 1 when passing.
    pub max_covariance_ratio: f64,
}

impl ResidualSummary {
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(WfError::InvalidParameter("need at least two samples".into()));
        }
        let m = samples[0].len();
        let nf = n as f64;
        let mean: Vec<f64> = (0..m).map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / nf).collect();
        let mut covariance = vec![vec![0.0; m]; m];
        let mut covariance_se = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                let prods: Vec<f64> = samples.iter().map(|s| (s[i] - mean[i]) * (s[j] - mean[j])).collect();
                let c = prods.iter().sum::<f64>() / (nf - 1.0);
                let pm = prods.iter().sum::<f64>() / nf;
                let var = prods.iter().map(|p| (p - pm) * (p - pm)).sum::<f64>() / (nf - 1.0);
                covariance[i][j] = c;
                covariance_se[i][j] = (var / nf).sqrt();
            }
        }
        let mean_se = (0..m).map(|i| (covariance[i][i] / nf).sqrt()).collect();
        Ok(Self {
            count: n,
            mean,
            mean_se,
            covariance,
            covariance_se,
        })
    }

    /// Mean within 3 standard errors of zero; covariance entrywise within
    /// `max(10% relative, 3 standard errors)` of `predicted`.
    pub fn check(&self, predicted: &DMatrix<f64>) -> ResidualCheck {
        let m = self.mean.len();
        let mut max_mean_z: f64 = 0.0;
        for i in 0..m {
            let z = if self.mean_se[i] > 0.0 {
                self.mean[i].abs() / self.mean_se[i]
            } else if self.mean[i] == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            max_mean_z = max_mean_z.max(z);
        }
        let mut max_ratio: f64 = 0.0;
        for i in 0..m {
            for j in 0..m {
                let pred = predicted[(i, j)];
                let tol = (0.1 * pred.abs()).max(3.0 * self.covariance_se[i][j]);
                let gap = (self.covariance[i][j] - pred).abs();
                let ratio = if tol > 0.0 {
                    gap / tol
                } else if gap == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                };
                max_ratio = max_ratio.max(ratio);
            }
        }
        ResidualCheck {
            mean_ok: max_mean_z <= 3.0,
            covariance_ok: max_ratio <= 1.0,
            max_mean_z,
            max_covariance_ratio: max_ratio,
        }
    }
}

pub fn write_residuals_csv<W: Write>(sample: &ResidualSample, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let m = sample.residuals.first().map_or(0, |r| r.len());
    let mut header = vec!["replicate".to_string()];
    header.extend((1..=m).map(|i| format!("u_{i}")));
    out.write_record(&header)?;
    for (r, u) in sample.residuals.iter().enumerate() {
        let mut row = vec![r.to_string()];
        row.extend(u.iter().map(|v| format!("{v:e}")));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_covariances_csv<W: Write>(v: &[DMatrix<f64>], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "i", "j", "covariance"])?;
    for (k, vk) in v.iter().enumerate() {
        for i in 0..vk.nrows() {
            for j in 0..vk.ncols() {
                out.write_record(&[k.to_string(), (i + 1).to_string(), (j + 1).to_string(), format!("{:e}", vk[(i, j)])])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}
