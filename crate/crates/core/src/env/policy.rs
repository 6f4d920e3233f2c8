use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Action, PricingConfig};
use crate::error::{invalid, Result};
use crate::math::{dot, sigmoid};
use crate::serde_float;

/// A context-only score whose level decides the price in threshold policies.
pub trait RatioFn: Send + Sync {
    fn ratio(&self, x: &[f64]) -> f64;
}

/// Per-epoch, per-inventory thresholds, indexed `[t][s]` for `s = 0..=s0`.
///
/// Entries at `s = 0` exist only for indexing convenience; no decision is
/// taken at stockout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaTable {
    #[serde(with = "serde_float::nested")]
    cells: Vec<Vec<f64>>,
}

impl ThetaTable {
    pub fn filled(horizon: usize, capacity: u32, value: f64) -> Self {
        ThetaTable { cells: vec![vec![value; capacity as usize + 1]; horizon] }
    }

    pub fn from_rows(cells: Vec<Vec<f64>>) -> Result<Self> {
        if cells.is_empty() || cells.iter().any(|r| r.len() != cells[0].len()) {
            return Err(invalid("threshold table must be a nonempty rectangle"));
        }
        Ok(ThetaTable { cells })
    }

    pub fn horizon(&self) -> usize {
        self.cells.len()
    }

    pub fn capacity(&self) -> u32 {
        (self.cells[0].len() - 1) as u32
    }

    pub fn get(&self, t: usize, s: u32) -> f64 {
        self.cells[t][s as usize]
    }

    pub fn set(&mut self, t: usize, s: u32, value: f64) {
        self.cells[t][s as usize] = value;
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.cells
    }
}

/// Pricing policy: a distribution over [`Action`] given `(t, s, x)`.
#[derive(Clone)]
pub enum PolicySpec {
    /// `pi(1 | x) = sigmoid(scale * coef' x)`, the same at every `(t, s)`.
    StochasticLogistic { coef: Vec<f64>, scale: f64 },
    /// `pi(1 | t, s, x) = 1[ratio(x) > theta[t][s]]`.
    ThresholdOnRatio { ratio: Arc<dyn RatioFn>, theta: ThetaTable },
    ConstantAction(Action),
    /// The logging policy of the environment.
    Behavior,
}

impl fmt::Debug for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::StochasticLogistic { coef, scale } => f
                .debug_struct("StochasticLogistic")
                .field("coef", coef)
                .field("scale", scale)
                .finish(),
            PolicySpec::ThresholdOnRatio { theta, .. } => {
                f.debug_struct("ThresholdOnRatio").field("theta", theta).finish_non_exhaustive()
            }
            PolicySpec::ConstantAction(a) => f.debug_tuple("ConstantAction").field(a).finish(),
            PolicySpec::Behavior => f.write_str("Behavior"),
        }
    }
}

impl PolicySpec {
    /// The stationary evaluation policy `sigmoid(eval_scale * beta' x)`.
    pub fn evaluation(cfg: &PricingConfig) -> Self {
        PolicySpec::StochasticLogistic { coef: cfg.beta.clone(), scale: cfg.eval_scale }
    }

    /// Probability of the high price at epoch `t`, inventory `s`, context `x`.
    pub fn prob_high(&self, cfg: &PricingConfig, t: usize, s: u32, x: &[f64]) -> f64 {
        match self {
            PolicySpec::StochasticLogistic { coef, scale } => sigmoid(scale * dot(coef, x)),
            PolicySpec::ThresholdOnRatio { ratio, theta } => {
                if ratio.ratio(x) > theta.get(t, s) {
                    1.0
                } else {
                    0.0
                }
            }
            PolicySpec::ConstantAction(a) => a.index() as f64,
            PolicySpec::Behavior => cfg.behavior_prob_high(x),
        }
    }

    pub fn prob(&self, cfg: &PricingConfig, t: usize, s: u32, x: &[f64], a: Action) -> f64 {
        let high = self.prob_high(cfg, t, s, x);
        match a {
            Action::High => high,
            Action::Low => 1.0 - high,
        }
    }

    /// True when the action distribution does not depend on `(t, s)`.
    pub fn is_stationary(&self) -> bool {
        !matches!(self, PolicySpec::ThresholdOnRatio { .. })
    }

    pub fn validate(&self, cfg: &PricingConfig) -> Result<()> {
        match self {
            PolicySpec::StochasticLogistic { coef, .. } if coef.len() != cfg.dim() => {
                Err(invalid(format!("policy has {} coefficients, context dimension is {}", coef.len(), cfg.dim())))
            }
            PolicySpec::ThresholdOnRatio { theta, .. }
                if theta.horizon() != cfg.horizon || theta.capacity() < cfg.initial_capacity =>
            {
                Err(invalid("threshold table does not cover every (t, s) of the environment"))
            }
            _ => Ok(()),
        }
    }
}
