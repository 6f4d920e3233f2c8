//! Backward-recursive learning of per-`(t, s)` threshold pricing policies.
//!
//! The policy class charges the high price exactly when the estimated
//! purchase-probability ratio `mu_hat(1 | 1, x) / mu_hat(1 | 0, x)` exceeds a
//! threshold chosen separately for every epoch and inventory level.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{monte_carlo_value, Action, Dataset, PolicySpec, PricingConfig, RatioFn, ThetaTable};
use crate::error::{invalid, Result};
use crate::marginal::{
    evaluate_policy, oracle_from_probs, pooled_transition, q_value, ClipMode, ContextQuadrature, EstimatorMode,
    MarginalTransition, ScoreTable, ValueTable,
};
use crate::nuisance::{Distortion, NuisanceSet};
use crate::serde_float;

pub const DEFAULT_RATIO_FLOOR: f64 = 1e-6;
pub const DEFAULT_GRID_SIZE: usize = 101;

// ── Ratios ──────────────────────────────────────────────────────────────

/// `mu_high / max(mu_low, floor)`, and whether the floor was hit.
pub fn ratio(mu_high: f64, mu_low: f64, floor: f64) -> (f64, bool) {
    if mu_low < floor {
        (mu_high / floor, true)
    } else {
        (mu_high / mu_low, false)
    }
}

/// Ratio of the true purchase model, optionally distorted.
#[derive(Debug)]
pub struct OracleRatio {
    cfg: PricingConfig,
    distortion: Distortion,
    floor: f64,
    floor_events: AtomicUsize,
}

impl OracleRatio {
    pub fn new(cfg: &PricingConfig, distortion: Distortion) -> Self {
        OracleRatio { cfg: cfg.clone(), distortion, floor: DEFAULT_RATIO_FLOOR, floor_events: AtomicUsize::new(0) }
    }

    pub fn floor_events(&self) -> usize {
        self.floor_events.load(Ordering::Relaxed)
    }
}

impl RatioFn for OracleRatio {
    fn ratio(&self, x: &[f64]) -> f64 {
        let mu = |a| self.distortion.apply(self.cfg.purchase_prob(x, a), a);
        let (r, floored) = ratio(mu(Action::High), mu(Action::Low), self.floor);
        if floored {
            self.floor_events.fetch_add(1, Ordering::Relaxed);
        }
        r
    }
}

/// Ratio of the cross-fitted outcome models, averaged over folds.
#[derive(Debug)]
pub struct FittedRatio {
    nuisances: Arc<NuisanceSet>,
    floor: f64,
    floor_events: AtomicUsize,
}

impl FittedRatio {
    pub fn new(nuisances: Arc<NuisanceSet>) -> Self {
        FittedRatio { nuisances, floor: DEFAULT_RATIO_FLOOR, floor_events: AtomicUsize::new(0) }
    }

    pub fn floor_events(&self) -> usize {
        self.floor_events.load(Ordering::Relaxed)
    }
}

impl RatioFn for FittedRatio {
    fn ratio(&self, x: &[f64]) -> f64 {
        let (r, floored) = ratio(
            self.nuisances.ensemble_outcome(x, Action::High),
            self.nuisances.ensemble_outcome(x, Action::Low),
            self.floor,
        );
        if floored {
            self.floor_events.fetch_add(1, Ordering::Relaxed);
        }
        r
    }
}

// ── Threshold grid ──────────────────────────────────────────────────────

/// Strictly increasing candidate thresholds bracketed by `-inf` and `+inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    #[serde(with = "serde_float::vec")]
    thresholds: Vec<f64>,
}

impl ThresholdGrid {
    /// Sort, deduplicate and add the infinite sentinels. NaNs are rejected.
    pub fn from_values(mut values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| v.is_nan()) {
            return Err(invalid("threshold grid values must not be NaN"));
        }
        values.push(f64::NEG_INFINITY);
        values.push(f64::INFINITY);
        values.sort_by(f64::total_cmp);
        values.dedup();
        Ok(ThresholdGrid { thresholds: values })
    }

    /// `g` nearest-rank empirical quantiles at levels `j / (g - 1)`.
    pub fn from_ratios(ratios: &[f64], g: usize) -> Result<Self> {
        if g < 2 {
            return Err(invalid("threshold grid needs at least two quantiles"));
        }
        if ratios.is_empty() {
            return Self::from_values(Vec::new());
        }
        let mut sorted = ratios.to_vec();
        if sorted.iter().any(|v| v.is_nan()) {
            return Err(invalid("ratio values must not be NaN"));
        }
        sorted.sort_by(f64::total_cmp);
        let last = (sorted.len() - 1) as f64;
        let q = (0..g).map(|j| sorted[(j as f64 / (g - 1) as f64 * last).round() as usize]).collect();
        Self::from_values(q)
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }
}

/// Grid from the ratio evaluated on every scored record.
pub fn build_grid(data: &Dataset, scores: &ScoreTable, ratio: &dyn RatioFn, g: usize) -> Result<ThresholdGrid> {
    let ratios = record_ratios(data, scores, ratio);
    ThresholdGrid::from_ratios(&ratios, g)
}

fn record_ratios(data: &Dataset, scores: &ScoreTable, ratio: &dyn RatioFn) -> Vec<f64> {
    scores
        .entries
        .par_iter()
        .map(|e| ratio.ratio(&data.trajectories[e.traj].steps[e.t].x))
        .collect()
}

// ── Learning ────────────────────────────────────────────────────────────

#[derive(Clone)]
pub struct LearnedPolicy {
    pub theta: ThetaTable,
    pub mode: EstimatorMode,
    pub ratio_source: String,
    pub ratio: Arc<dyn RatioFn>,
    /// Fitted values `V_hat` under the estimated marginal MDP.
    pub values: ValueTable,
    /// Fitted `Q_hat_t(s, theta)` for every grid threshold, `[t][s][g]`.
    pub q: Vec<Vec<Vec<f64>>>,
    pub grid: ThresholdGrid,
}

#[derive(Serialize)]
struct LearnedPolicyRecord<'a> {
    mode: EstimatorMode,
    ratio_source: &'a str,
    theta: &'a ThetaTable,
    values: &'a ValueTable,
    grid: &'a ThresholdGrid,
}

impl std::fmt::Debug for LearnedPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LearnedPolicy")
            .field("theta", &self.theta)
            .field("mode", &self.mode)
            .field("ratio_source", &self.ratio_source)
            .finish_non_exhaustive()
    }
}

impl LearnedPolicy {
    pub fn policy(&self) -> PolicySpec {
        PolicySpec::ThresholdOnRatio { ratio: Arc::clone(&self.ratio), theta: self.theta.clone() }
    }

    pub fn to_json(&self) -> Result<String> {
        let rec = LearnedPolicyRecord {
            mode: self.mode,
            ratio_source: &self.ratio_source,
            theta: &self.theta,
            values: &self.values,
            grid: &self.grid,
        };
        Ok(serde_json::to_string_pretty(&rec)?)
    }

    /// Exact value table of the policy in the true environment.
    pub fn exact_values(&self, cfg: &PricingConfig, quad: &ContextQuadrature) -> ValueTable {
        let ratios: Vec<f64> = quad.points.par_iter().map(|x| self.ratio.ratio(x)).collect();
        threshold_values(cfg, quad, &ratios, &self.theta)
    }
}

/// Exact value of `1[r(x) > theta[t][s]]` with `ratios` the rule's ratio at
/// each quadrature point.
pub fn threshold_values(cfg: &PricingConfig, quad: &ContextQuadrature, ratios: &[f64], theta: &ThetaTable) -> ValueTable {
    evaluate_policy(cfg, |t, s| {
        let th = theta.get(t, s);
        let probs: Vec<f64> = ratios.iter().map(|&r| if r > th { 1.0 } else { 0.0 }).collect();
        oracle_from_probs(quad, &probs)
    })
}

/// Estimated transitions of `1[ratio > theta]` for every grid threshold, from
/// prefix sums of scores sorted by ratio.
pub fn grid_transitions(
    ratios: &[f64],
    scores: &ScoreTable,
    grid: &ThresholdGrid,
    mode: EstimatorMode,
    clip: ClipMode,
) -> Result<Vec<MarginalTransition>> {
    if scores.is_empty() {
        return Err(invalid("no scored records to learn from"));
    }
    if grid.is_empty() {
        return Err(invalid("threshold grid is empty"));
    }
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| ratios[a].total_cmp(&ratios[b]));
    let n = order.len();
    // prefix[k][a][y]: score sum over the k smallest ratios.
    let mut prefix = vec![[[0.0; 2]; 2]; n + 1];
    for (k, &i) in order.iter().enumerate() {
        let e = &scores.entries[i];
        let mut cell = prefix[k];
        for a in Action::ALL {
            for y in [false, true] {
                cell[a.index()][y as usize] += e.score(mode, a, y);
            }
        }
        prefix[k + 1] = cell;
    }
    let sorted: Vec<f64> = order.iter().map(|&i| ratios[i]).collect();
    grid.thresholds
        .par_iter()
        .map(|&th| {
            // records with ratio <= th get the low price
            let low = sorted.partition_point(|&r| r <= th);
            let mut joint = [[0.0; 2]; 2];
            for y in 0..2 {
                joint[0][y] = prefix[low][0][y];
                joint[1][y] = prefix[n][1][y] - prefix[low][1][y];
            }
            pooled_transition(joint, n, mode, clip)
        })
        .collect()
}

/// Learn thresholds by backward recursion over the estimated marginal MDP.
/// At every `(t, s)` the grid threshold maximizing the fitted `Q_hat` is
/// chosen; ties go to the smallest threshold.
#[allow(clippy::too_many_arguments)]
pub fn learn(
    data: &Dataset,
    scores: &ScoreTable,
    ratio: Arc<dyn RatioFn>,
    ratio_source: &str,
    mode: EstimatorMode,
    grid: &ThresholdGrid,
    cfg: &PricingConfig,
    clip: ClipMode,
) -> Result<LearnedPolicy> {
    cfg.validate()?;
    let ratios = record_ratios(data, scores, ratio.as_ref());
    let transitions = grid_transitions(&ratios, scores, grid, mode, clip)?;
    Ok(learn_from_transitions(cfg, &transitions, grid, ratio, ratio_source, mode))
}

/// Backward recursion given the transition of every grid threshold.
pub fn learn_from_transitions(
    cfg: &PricingConfig,
    transitions: &[MarginalTransition],
    grid: &ThresholdGrid,
    ratio: Arc<dyn RatioFn>,
    ratio_source: &str,
    mode: EstimatorMode,
) -> LearnedPolicy {
    let cap = cfg.initial_capacity;
    let mut values = ValueTable::zeros(cfg.horizon, cap);
    let mut theta = ThetaTable::filled(cfg.horizon, cap, f64::INFINITY);
    let mut q = vec![vec![Vec::new(); cap as usize + 1]; cfg.horizon];
    for t in (0..cfg.horizon).rev() {
        let next = values.values[t + 1].clone();
        let cells: Vec<(usize, Vec<f64>)> = (1..=cap)
            .into_par_iter()
            .map(|s| {
                let qs: Vec<f64> = transitions.iter().map(|tr| q_value(&next, s, tr, cfg.prices)).collect();
                let mut best = 0;
                for (g, &v) in qs.iter().enumerate() {
                    if v > qs[best] {
                        best = g;
                    }
                }
                (best, qs)
            })
            .collect();
        for (s, (best, qs)) in (1..=cap).zip(cells) {
            theta.set(t, s, grid.thresholds[best]);
            values.values[t][s as usize] = qs[best];
            q[t][s as usize] = qs;
        }
    }
    LearnedPolicy { theta, mode, ratio_source: ratio_source.to_string(), ratio, values, q, grid: grid.clone() }
}

/// Fresh-simulation Monte Carlo value `(mean, stderr)` of the learned policy.
pub fn out_of_sample_value(policy: &LearnedPolicy, cfg: &PricingConfig, n_rollouts: usize, seed: u64) -> Result<(f64, f64)> {
    monte_carlo_value(cfg, &policy.policy(), n_rollouts, seed)
}

/// Value of the best threshold policy on the true ratio, i.e. the optimal
/// value of the environment, from the initial state.
pub fn oracle_best_value(cfg: &PricingConfig, quad: &ContextQuadrature) -> f64 {
    crate::marginal::oracle_optimal_values(cfg, quad).get(0, cfg.initial_capacity)
}
