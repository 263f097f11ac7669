//! JSON description of an update rule.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WfError};
use crate::fitness::{FitnessModel, MutationMatrix, PayoffMatrix, UpdateRule};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitnessKind {
    #[default]
    LinearFractional,
    Exponential,
}

/// `omega` and `omega_ratio = omega / (1 - omega)` are alternatives; after
/// [`SystemConfig::resolve`] only `omega` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub matrix: Vec<Vec<f64>>,
    #[serde(default)]
    pub fitness: FitnessKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mutation: Option<Vec<Vec<f64>>>,
}

fn config_err(msg: impl Into<String>) -> WfError {
    WfError::Config(msg.into())
}

impl SystemConfig {
    pub fn partnership(matrix: Vec<Vec<f64>>, omega: f64) -> Self {
        Self {
            matrix,
            fitness: FitnessKind::LinearFractional,
            b: None,
            omega: Some(omega),
            omega_ratio: None,
            beta: None,
            mutation: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.len()
    }

    pub fn resolve(&self) -> Result<Self> {
        let mut out = self.clone();
        match self.fitness {
            FitnessKind::LinearFractional => {
                out.omega = Some(match (self.omega, self.omega_ratio) {
                    (Some(_), Some(_)) => return Err(config_err("give either `omega` or `omega_ratio`, not both")),
                    (Some(w), None) => w,
                    (None, Some(r)) => {
                        if !(r > 0.0 && r.is_finite()) {
                            return Err(config_err(format!("field `omega_ratio`: {r} must be positive")));
                        }
                        r / (1.0 + r)
                    }
                    (None, None) => return Err(config_err("missing field `omega` (or `omega_ratio`)")),
                });
                out.omega_ratio = None;
                if self.beta.is_some() {
                    return Err(config_err("field `beta` applies only to exponential fitness"));
                }
                if out.b.is_none() {
                    out.b = Some(vec![1.0; self.dim()]);
                }
            }
            FitnessKind::Exponential => {
                if self.beta.is_none() {
                    return Err(config_err("missing field `beta` for exponential fitness"));
                }
                if self.omega.is_some() || self.omega_ratio.is_some() || self.b.is_some() {
                    return Err(config_err("fields `omega`, `omega_ratio`, `b` apply only to linear-fractional fitness"));
                }
            }
        }
        Ok(out)
    }

    pub fn omega(&self) -> Result<f64> {
        self.resolve()?
            .omega
            .ok_or_else(|| config_err("system has no `omega` (exponential fitness)"))
    }

    pub fn payoff(&self) -> Result<PayoffMatrix> {
        PayoffMatrix::new(&self.matrix).map_err(|e| config_err(format!("field `matrix`: {e}")))
    }

    pub fn build_rule(&self) -> Result<UpdateRule> {
        let r = self.resolve()?;
        let payoff = r.payoff()?;
        let model = match r.fitness {
            FitnessKind::LinearFractional => {
                FitnessModel::linear_fractional(payoff, r.b.clone().unwrap(), r.omega.unwrap())
            }
            FitnessKind::Exponential => FitnessModel::exponential(payoff, r.beta.unwrap()),
        }
        .map_err(|e| config_err(e.to_string()))?;
        let rule = UpdateRule::new(model);
        match &r.mutation {
            None => Ok(rule),
            Some(rows) => {
                let theta = MutationMatrix::new(rows).map_err(|e| config_err(format!("field `mutation`: {e}")))?;
                rule.with_mutation(theta).map_err(|e| config_err(e.to_string()))
            }
        }
    }
}
