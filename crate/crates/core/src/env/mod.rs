//! Capacitated single-item dynamic pricing.
//!
//! A seller starts with `initial_capacity` units and `horizon` decision
//! epochs. Each epoch one customer with exogenous context `x` arrives, the
//! seller posts either the low (`a = 0`) or the high (`a = 1`) price, and the
//! customer buys with probability `mu(1 | a, x)`. A sale only happens while
//! stock remains; inventory zero is absorbing.
//!
//! The purchase model is a mixture of a logistic and a nonlinear response:
//!
//! ```text
//! mu(1 | a, x) = (1 - delta) * sigmoid(beta' x + beta0 * p(a)) + delta * sigmoid(x_0^2 * p(a))
//! ```
//!
//! and logged data is generated by the confounded behavior policy
//! `e(1 | x) = sigmoid(behavior_scale * beta' x)`.

mod io;
mod policy;
mod simulate;

pub use io::{read_trajectories, write_trajectories, TRAJECTORY_ID_COLUMN};
pub use policy::{PolicySpec, RatioFn, ThetaTable};
pub use simulate::{monte_carlo_value, simulate, Dataset, Observation, Step, Trajectory};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math::{dot, sigmoid};

// ── Actions, outcomes, states ───────────────────────────────────────────

/// Posted price level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Low = 0,
    High = 1,
}

impl Action {
    pub const ALL: [Action; 2] = [Action::Low, Action::High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Action::Low),
            1 => Ok(Action::High),
            other => Err(invalid(format!("action index {other} not in {{0, 1}}"))),
        }
    }
}

/// Inventory transition: a sale consumes one unit, stockout is absorbing.
pub fn step(s: u32, purchased: bool) -> u32 {
    if s > 0 && purchased {
        s - 1
    } else {
        s
    }
}

// ── Context distribution ────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContextSpec {
    /// `N(mean, I_dim)`. An empty `mean` means the origin.
    Gaussian {
        dim: usize,
        #[serde(default)]
        mean: Vec<f64>,
    },
    /// Discrete distribution over `support` with probabilities `probs`.
    Finite {
        support: Vec<Vec<f64>>,
        probs: Vec<f64>,
    },
}

impl ContextSpec {
    pub fn standard_gaussian(dim: usize) -> Self {
        ContextSpec::Gaussian { dim, mean: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        match self {
            ContextSpec::Gaussian { dim, .. } => *dim,
            ContextSpec::Finite { support, .. } => support.first().map_or(0, Vec::len),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ContextSpec::Gaussian { dim, mean } => {
                if *dim == 0 {
                    return Err(invalid("gaussian context dimension must be positive"));
                }
                if !mean.is_empty() && mean.len() != *dim {
                    return Err(Error::DimensionMismatch { expected: *dim, got: mean.len() });
                }
            }
            ContextSpec::Finite { support, probs } => {
                if support.is_empty() || support.len() != probs.len() {
                    return Err(invalid("finite context needs one probability per support point"));
                }
                let d = support[0].len();
                if let Some(bad) = support.iter().find(|p| p.len() != d) {
                    return Err(Error::DimensionMismatch { expected: d, got: bad.len() });
                }
                if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                    return Err(invalid("finite context probabilities must lie in [0, 1]"));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(invalid(format!("finite context probabilities sum to {total}, not 1")));
                }
            }
        }
        Ok(())
    }

    pub fn sampler(&self) -> Result<ContextSampler<'_>> {
        self.validate()?;
        Ok(match self {
            ContextSpec::Gaussian { dim, mean } => ContextSampler::Gaussian { dim: *dim, mean },
            ContextSpec::Finite { support, probs } => ContextSampler::Finite {
                support,
                index: WeightedIndex::new(probs).map_err(|e| invalid(e.to_string()))?,
            },
        })
    }
}

/// Prepared sampler for a [`ContextSpec`].
pub enum ContextSampler<'a> {
    Gaussian { dim: usize, mean: &'a [f64] },
    Finite { support: &'a [Vec<f64>], index: WeightedIndex<f64> },
}

impl ContextSampler<'_> {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            ContextSampler::Gaussian { dim, mean } => (0..*dim)
                .map(|j| {
                    let z: f64 = rng.sample(StandardNormal);
                    z + mean.get(j).copied().unwrap_or(0.0)
                })
                .collect(),
            ContextSampler::Finite { support, index } => support[index.sample(rng)].clone(),
        }
    }
}

// ── Environment configuration ───────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingConfig {
    /// Number of decision epochs `t = 0..horizon-1`.
    #[serde(rename = "horizon_T")]
    pub horizon: usize,
    #[serde(rename = "initial_capacity_s0")]
    pub initial_capacity: u32,
    /// Price per action, indexed by [`Action::index`].
    pub prices: [f64; 2],
    pub beta: Vec<f64>,
    pub beta0: f64,
    pub mixture_delta: f64,
    #[serde(rename = "context_spec")]
    pub context: ContextSpec,
    #[serde(default = "default_behavior_scale")]
    pub behavior_scale: f64,
    #[serde(default = "default_eval_scale")]
    pub eval_scale: f64,
}

fn default_behavior_scale() -> f64 {
    -0.8
}

fn default_eval_scale() -> f64 {
    0.25
}

impl Default for PricingConfig {
    /// The canonical experiment: ten epochs, four units, two-dimensional
    /// standard Gaussian contexts, well-specified logistic responses.
    fn default() -> Self {
        PricingConfig {
            horizon: 10,
            initial_capacity: 4,
            prices: [0.5, 1.0],
            beta: vec![-0.75, 0.75],
            beta0: -2.0,
            mixture_delta: 0.0,
            context: ContextSpec::standard_gaussian(2),
            behavior_scale: default_behavior_scale(),
            eval_scale: default_eval_scale(),
        }
    }
}

impl PricingConfig {
    pub fn with_delta(mut self, delta: f64) -> Self {
        self.mixture_delta = delta;
        self
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn price(&self, a: Action) -> f64 {
        self.prices[a.index()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(invalid("horizon must be positive"));
        }
        if self.beta.is_empty() {
            return Err(invalid("beta must be nonempty"));
        }
        if !(0.0..=1.0).contains(&self.mixture_delta) {
            return Err(invalid(format!("mixture delta {} outside [0, 1]", self.mixture_delta)));
        }
        if self.prices.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid("prices must be finite and nonnegative"));
        }
        self.context.validate()?;
        if self.context.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: self.context.dim() });
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PricingConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        Ok(())
    }

    /// True purchase probability `mu(1 | a, x)`.
    pub fn true_outcome_prob(&self, x: &[f64], a: Action) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.purchase_prob(x, a))
    }

    /// Unchecked [`Self::true_outcome_prob`] for inner loops.
    pub fn purchase_prob(&self, x: &[f64], a: Action) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        let p = self.price(a);
        let logistic = sigmoid(dot(&self.beta, x) + self.beta0 * p);
        if self.mixture_delta == 0.0 {
            return logistic;
        }
        let nonlinear = sigmoid(x[0] * x[0] * p);
        (1.0 - self.mixture_delta) * logistic + self.mixture_delta * nonlinear
    }

    /// Behavior-policy probability of the high price, `e(1 | x)`.
    pub fn behavior_propensity(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.behavior_prob_high(x))
    }

    pub(crate) fn behavior_prob_high(&self, x: &[f64]) -> f64 {
        sigmoid(self.behavior_scale * dot(&self.beta, x))
    }

    /// Immediate revenue: the posted price if a unit is sold, else zero.
    pub fn reward(&self, s: u32, a: Action, purchased: bool) -> f64 {
        if purchased && s > 0 {
            self.price(a)
        } else {
            0.0
        }
    }
}
