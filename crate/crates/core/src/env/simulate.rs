use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{step, Action, PolicySpec, PricingConfig};
use crate::error::{invalid, Result};
use crate::math::mean_stderr;
use crate::rng::substream;

/// One epoch of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// Inventory before the epoch's customer arrives.
    pub s: u32,
    pub x: Vec<f64>,
    pub a: Action,
    pub y: bool,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.r).sum()
    }
}

/// A logged batch of episodes of a common horizon and context dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub horizon: usize,
    pub dim: usize,
}

/// Borrowed view of one logged `(i, t)` record.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub traj: usize,
    pub t: usize,
    pub step: &'a Step,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        let first = trajectories.first().ok_or_else(|| invalid("dataset has no trajectories"))?;
        let horizon = first.steps.len();
        let dim = first.steps.first().map_or(0, |s| s.x.len());
        if horizon == 0 {
            return Err(invalid("trajectories have no steps"));
        }
        for (i, tr) in trajectories.iter().enumerate() {
            if tr.steps.len() != horizon {
                return Err(invalid(format!("trajectory {i} has {} steps, expected {horizon}", tr.steps.len())));
            }
            if tr.steps.iter().any(|s| s.x.len() != dim) {
                return Err(invalid(format!("trajectory {i} has inconsistent context dimension")));
            }
        }
        Ok(Dataset { trajectories, horizon, dim })
    }

    pub fn n_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    /// All `(i, t)` records in trajectory-major order. With
    /// `include_stockout = false`, records logged at zero inventory are skipped.
    pub fn observations(&self, include_stockout: bool) -> impl Iterator<Item = Observation<'_>> + '_ {
        self.trajectories.iter().enumerate().flat_map(move |(traj, tr)| {
            tr.steps
                .iter()
                .enumerate()
                .filter(move |(_, st)| include_stockout || st.s > 0)
                .map(move |(t, step)| Observation { traj, t, step })
        })
    }
}

fn rollout(cfg: &PricingConfig, policy: &PolicySpec, sampler: &super::ContextSampler<'_>, seed: u64, index: u64) -> Trajectory {
    let mut rng = substream(seed, index);
    let mut s = cfg.initial_capacity;
    let mut steps = Vec::with_capacity(cfg.horizon);
    for t in 0..cfg.horizon {
        let x = sampler.sample(&mut rng);
        let a = if rng.gen::<f64>() < policy.prob_high(cfg, t, s, &x) { Action::High } else { Action::Low };
        let y = rng.gen::<f64>() < cfg.purchase_prob(&x, a);
        let r = cfg.reward(s, a, y);
        steps.push(Step { s, x, a, y, r });
        s = step(s, y);
    }
    Trajectory { steps }
}

/// Simulate `n` independent episodes under `policy`.
///
/// Episode `i` draws from stream `i` of `seed`, so the output is identical
/// for any thread count. Contexts, actions and outcomes keep being drawn
/// after stockout; those records carry zero reward.
pub fn simulate(cfg: &PricingConfig, policy: &PolicySpec, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid("need at least one trajectory"));
    }
    cfg.validate()?;
    policy.validate(cfg)?;
    let sampler = cfg.context.sampler()?;
    let trajectories = (0..n as u64)
        .into_par_iter()
        .map(|i| rollout(cfg, policy, &sampler, seed, i))
        .collect();
    Ok(Dataset { trajectories, horizon: cfg.horizon, dim: cfg.dim() })
}

/// Monte Carlo estimate of `V_0(s0)`: mean and standard error of the
/// episode return over `n_rollouts` fresh episodes.
pub fn monte_carlo_value(cfg: &PricingConfig, policy: &PolicySpec, n_rollouts: usize, seed: u64) -> Result<(f64, f64)> {
    if n_rollouts < 2 {
        return Err(invalid("need at least two rollouts for a standard error"));
    }
    cfg.validate()?;
    policy.validate(cfg)?;
    let sampler = cfg.context.sampler()?;
    let returns: Vec<f64> = (0..n_rollouts as u64)
        .into_par_iter()
        .map(|i| rollout(cfg, policy, &sampler, seed, i).total_reward())
        .collect();
    Ok(mean_stderr(&returns))
}
