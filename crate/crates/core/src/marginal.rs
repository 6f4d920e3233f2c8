//! Marginal MDP over inventory.
//!
//! Marginalizing the exogenous context out of the pricing problem leaves an
//! MDP on inventory alone whose "actions" are single-step pricing rules
//! `pi(a | x)`. From inventory `s > 0` a rule sells with probability
//! `P(Y = 1 | pi) = E_X[sum_a pi(a | X) mu(1 | a, X)]` and earns
//! `E_X[sum_a pi(a | X) mu(1 | a, X) p(a)]` in expectation.
//!
//! Both quantities are estimated from logged data by pooling doubly robust
//! scores over every logged `(i, t)`:
//!
//! ```text
//! Gamma(y | a) = (1[Y = y] - mu_hat(y | A, X)) / e_hat(A | X) * 1[A = a] + mu_hat(y | a, X)
//! P_hat(Y = y | pi) = (N T)^-1 sum_{i,t} sum_a pi(a | X) Gamma(y | a)
//! ```
//!
//! with the IPW (`mu_hat = 0`, self-normalized) and DM (`e_hat = inf`)
//! special cases. Values are then computed by backward recursion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{step, Action, ContextSpec, Dataset, PolicySpec, PricingConfig};
use crate::error::{invalid, Result};
use crate::nuisance::Nuisance;
use crate::serde_float;

// ── Scores ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    Dr,
    Ipw,
    Dm,
}

impl EstimatorMode {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorMode::Dr => "dr",
            EstimatorMode::Ipw => "ipw",
            EstimatorMode::Dm => "dm",
        }
    }
}

/// Nuisance evaluations and doubly robust scores for one logged record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub traj: usize,
    pub t: usize,
    pub s: u32,
    pub action: Action,
    pub outcome: bool,
    /// Clipped `e_hat(A | X)` of the logged action.
    pub propensity: f64,
    /// `mu_hat(1 | a, X)` for `a = 0, 1`.
    pub mu: [f64; 2],
    /// `Gamma(y | a)`, indexed `[a][y]`.
    pub gamma: [[f64; 2]; 2],
}

impl ScoreEntry {
    fn mu_of(&self, a: Action, y: bool) -> f64 {
        let p = self.mu[a.index()];
        if y {
            p
        } else {
            1.0 - p
        }
    }

    /// Score of `(a, y)` under `mode`. IPW scores are unnormalized.
    pub fn score(&self, mode: EstimatorMode, a: Action, y: bool) -> f64 {
        let hit = (self.action == a && self.outcome == y) as u8 as f64;
        match mode {
            EstimatorMode::Dr => self.gamma[a.index()][y as usize],
            EstimatorMode::Ipw => hit / self.propensity,
            EstimatorMode::Dm => self.mu_of(a, y),
        }
    }
}

/// `Gamma[i][t][a][y]` for every record used in estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub entries: Vec<ScoreEntry>,
}

fn dr_gamma(observed_a: Action, observed_y: bool, propensity: f64, mu: [f64; 2]) -> [[f64; 2]; 2] {
    let mu_y = |a: Action, y: bool| if y { mu[a.index()] } else { 1.0 - mu[a.index()] };
    let mut g = [[0.0; 2]; 2];
    for a in Action::ALL {
        for y in [false, true] {
            let mut v = mu_y(a, y);
            if a == observed_a {
                let residual = (observed_y == y) as u8 as f64 - mu_y(observed_a, y);
                v += residual / propensity;
            }
            g[a.index()][y as usize] = v;
        }
    }
    g
}

/// Evaluate nuisances and doubly robust scores on every record of `data`
/// (skipping zero-inventory records when `include_stockout` is false).
pub fn dr_scores(data: &Dataset, nuisance: &dyn Nuisance, include_stockout: bool) -> ScoreTable {
    let entries = data
        .trajectories
        .par_iter()
        .enumerate()
        .flat_map_iter(|(traj, tr)| {
            tr.steps
                .iter()
                .enumerate()
                .filter(move |(_, st)| include_stockout || st.s > 0)
                .map(move |(t, st)| {
                    let propensity = nuisance.propensity(traj, t, &st.x, st.a);
                    let mu = [
                        nuisance.outcome(traj, t, &st.x, Action::Low),
                        nuisance.outcome(traj, t, &st.x, Action::High),
                    ];
                    ScoreEntry {
                        traj,
                        t,
                        s: st.s,
                        action: st.a,
                        outcome: st.y,
                        propensity,
                        mu,
                        gamma: dr_gamma(st.a, st.y, propensity, mu),
                    }
                })
        })
        .collect();
    ScoreTable { entries }
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

// ── Marginal transitions ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionSource {
    Dr,
    Ipw,
    Dm,
    Oracle,
}

impl From<EstimatorMode> for TransitionSource {
    fn from(m: EstimatorMode) -> Self {
        match m {
            EstimatorMode::Dr => TransitionSource::Dr,
            EstimatorMode::Ipw => TransitionSource::Ipw,
            EstimatorMode::Dm => TransitionSource::Dm,
        }
    }
}

/// Post-processing of raw pooled estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Keep the unbiased raw estimate, possibly with negative mass.
    Raw,
    /// Zero out negative cells of the joint table and renormalize.
    ClipRenormalize,
}

/// `P(Y = y | pi)` for a single-step rule, together with the action-resolved
/// joint mass `E[pi(a | X) 1[Y(a) = y]]` that determines expected revenue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalTransition {
    /// Indexed `[a][y]`.
    pub joint: [[f64; 2]; 2],
    /// Indexed by `y`.
    pub probs: [f64; 2],
    pub source: TransitionSource,
    pub clipped: bool,
    /// Monte Carlo standard error of `probs[1]` for sampled oracles.
    #[serde(with = "serde_float")]
    pub stderr: f64,
}

impl MarginalTransition {
    pub fn from_joint(joint: [[f64; 2]; 2], source: TransitionSource, clipped: bool, stderr: f64) -> Self {
        let probs = [joint[0][0] + joint[1][0], joint[0][1] + joint[1][1]];
        MarginalTransition { joint, probs, source, clipped, stderr }
    }

    pub fn prob(&self, y: bool) -> f64 {
        self.probs[y as usize]
    }

    /// Expected immediate revenue from an inventory level `s > 0`.
    pub fn expected_reward(&self, prices: [f64; 2]) -> f64 {
        self.joint[0][1] * prices[0] + self.joint[1][1] * prices[1]
    }

    fn clip_renormalize(mut self) -> Self {
        if self.joint.iter().flatten().all(|&v| v >= 0.0) {
            return self;
        }
        let mut joint = self.joint;
        joint.iter_mut().flatten().for_each(|v| *v = v.max(0.0));
        let total: f64 = joint.iter().flatten().sum();
        if total > 0.0 {
            joint.iter_mut().flatten().for_each(|v| *v /= total);
        }
        self = MarginalTransition::from_joint(joint, self.source, true, self.stderr);
        self
    }
}

/// Pooled estimate from per-record high-price probabilities
/// `prob_high[k]` aligned with `scores.entries`.
pub fn estimate_from_probs(scores: &ScoreTable, prob_high: &[f64], mode: EstimatorMode, clip: ClipMode) -> Result<MarginalTransition> {
    if scores.is_empty() {
        return Err(invalid("no scored records"));
    }
    if prob_high.len() != scores.len() {
        return Err(invalid("one policy probability per scored record required"));
    }
    let mut joint = [[0.0; 2]; 2];
    for (e, &p1) in scores.entries.iter().zip(prob_high) {
        for a in Action::ALL {
            let w = if a == Action::High { p1 } else { 1.0 - p1 };
            if w == 0.0 {
                continue;
            }
            for y in [false, true] {
                joint[a.index()][y as usize] += w * e.score(mode, a, y);
            }
        }
    }
    pooled_transition(joint, scores.len(), mode, clip)
}

/// Turn summed scores `sum_k pi(a | X_k) score_k(a, y)` over `count` records
/// into a transition estimate. IPW is self-normalized by its total weight.
pub fn pooled_transition(mut joint: [[f64; 2]; 2], count: usize, mode: EstimatorMode, clip: ClipMode) -> Result<MarginalTransition> {
    let total: f64 = match mode {
        EstimatorMode::Ipw => joint.iter().flatten().sum(),
        _ => count as f64,
    };
    if total == 0.0 {
        return Err(invalid("importance weights sum to zero"));
    }
    joint.iter_mut().flatten().for_each(|v| *v /= total);
    let tr = MarginalTransition::from_joint(joint, mode.into(), false, 0.0);
    Ok(match clip {
        ClipMode::Raw => tr,
        ClipMode::ClipRenormalize => tr.clip_renormalize(),
    })
}

/// `P_hat(Y = . | pi)` for the single-step rule `prob_high(x) = pi(1 | x)`.
pub fn estimate_transition(
    prob_high: &(dyn Fn(&[f64]) -> f64 + Sync),
    scores: &ScoreTable,
    data: &Dataset,
    mode: EstimatorMode,
    clip: ClipMode,
) -> Result<MarginalTransition> {
    let probs: Vec<f64> = scores
        .entries
        .par_iter()
        .map(|e| prob_high(&data.trajectories[e.traj].steps[e.t].x))
        .collect();
    estimate_from_probs(scores, &probs, mode, clip)
}

// ── Oracle transitions ──────────────────────────────────────────────────

/// Weighted context points standing in for the context distribution: the
/// exact support for finite contexts, a fixed Monte Carlo sample otherwise.
/// Purchase probabilities are cached per point.
#[derive(Debug, Clone)]
pub struct ContextQuadrature {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// `mu(1 | a, x)` per point, indexed by action.
    pub mu: Vec<[f64; 2]>,
    pub exact: bool,
}

impl ContextQuadrature {
    pub fn from_points(cfg: &PricingConfig, points: Vec<Vec<f64>>, weights: Vec<f64>, exact: bool) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(invalid("quadrature needs one weight per point"));
        }
        if points.iter().any(|p| p.len() != cfg.dim()) {
            return Err(invalid("quadrature point dimension differs from the environment"));
        }
        let mu = points
            .iter()
            .map(|x| [cfg.purchase_prob(x, Action::Low), cfg.purchase_prob(x, Action::High)])
            .collect();
        Ok(ContextQuadrature { points, weights, mu, exact })
    }

    /// Exact support for finite contexts; `draws` i.i.d. samples otherwise.
    pub fn for_config(cfg: &PricingConfig, draws: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        match &cfg.context {
            ContextSpec::Finite { support, probs } => Self::from_points(cfg, support.clone(), probs.clone(), true),
            ContextSpec::Gaussian { .. } => {
                if draws == 0 {
                    return Err(invalid("need at least one context draw"));
                }
                let sampler = cfg.context.sampler()?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let points: Vec<Vec<f64>> = (0..draws).map(|_| sampler.sample(&mut rng)).collect();
                let w = 1.0 / draws as f64;
                Self::from_points(cfg, points, vec![w; draws], false)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `E[f(X)]` under the quadrature, summed in point order.
    pub fn expect(&self, f: impl Fn(usize) -> f64 + Sync) -> f64 {
        let terms: Vec<f64> = (0..self.len()).into_par_iter().map(|k| self.weights[k] * f(k)).collect();
        terms.iter().sum()
    }
}

/// Exact (or sampled) `P(Y = . | pi)` from the true purchase model.
pub fn oracle_transition(prob_high: &(dyn Fn(&[f64]) -> f64 + Sync), quad: &ContextQuadrature) -> MarginalTransition {
    let probs: Vec<f64> = quad.points.par_iter().map(|x| prob_high(x)).collect();
    oracle_from_probs(quad, &probs)
}

/// [`oracle_transition`] with the rule evaluated beforehand at each point.
pub fn oracle_from_probs(quad: &ContextQuadrature, prob_high: &[f64]) -> MarginalTransition {
    let mut joint = [[0.0; 2]; 2];
    let mut sum_sq = 0.0;
    for ((w, mu), &p1) in quad.weights.iter().zip(&quad.mu).zip(prob_high) {
        let buy = [(1.0 - p1) * mu[0], p1 * mu[1]];
        for a in 0..2 {
            joint[a][1] += w * buy[a];
            joint[a][0] += w * ([1.0 - p1, p1][a] - buy[a]);
        }
        let sale = buy[0] + buy[1];
        sum_sq += w * sale * sale;
    }
    let stderr = if quad.exact {
        0.0
    } else {
        let m = quad.len() as f64;
        let mean = joint[0][1] + joint[1][1];
        ((sum_sq - mean * mean).max(0.0) * m / (m - 1.0).max(1.0) / m).sqrt()
    };
    MarginalTransition::from_joint(joint, TransitionSource::Oracle, false, stderr)
}

// ── Values ──────────────────────────────────────────────────────────────

/// `V[t][s]` for `t = 0..=T`, `s = 0..=s0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    #[serde(with = "serde_float::nested")]
    pub values: Vec<Vec<f64>>,
}

impl ValueTable {
    pub fn zeros(horizon: usize, capacity: u32) -> Self {
        ValueTable { values: vec![vec![0.0; capacity as usize + 1]; horizon + 1] }
    }

    pub fn horizon(&self) -> usize {
        self.values.len() - 1
    }

    pub fn capacity(&self) -> u32 {
        (self.values[0].len() - 1) as u32
    }

    pub fn get(&self, t: usize, s: u32) -> f64 {
        self.values[t][s as usize]
    }

    /// `Delta V_t(s) = V_t(s - 1) - V_t(s)` for `s >= 1`.
    pub fn delta(&self, t: usize, s: u32) -> f64 {
        self.get(t, s - 1) - self.get(t, s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `Q_t(s, pi) = R(s, pi) + V_{t+1}(s) + P(Y = 1 | pi) (V_{t+1}(s - 1) - V_{t+1}(s))`
/// for `s > 0`; zero at stockout.
pub fn q_value(next: &[f64], s: u32, tr: &MarginalTransition, prices: [f64; 2]) -> f64 {
    if s == 0 {
        return 0.0;
    }
    let s = s as usize;
    tr.expected_reward(prices) + tr.prob(false) * next[s] + tr.prob(true) * next[s - 1]
}

/// Backward recursion with `provider(t, s)` giving the transition of the
/// rule played at `(t, s)`. Never called at `s = 0`, which is absorbing.
pub fn evaluate_policy(cfg: &PricingConfig, mut provider: impl FnMut(usize, u32) -> MarginalTransition) -> ValueTable {
    let mut table = ValueTable::zeros(cfg.horizon, cfg.initial_capacity);
    for t in (0..cfg.horizon).rev() {
        for s in 1..=cfg.initial_capacity {
            let tr = provider(t, s);
            let q = q_value(&table.values[t + 1], s, &tr, cfg.prices);
            table.values[t][s as usize] = q;
        }
    }
    table
}

/// Exact value of `policy` in the marginal MDP built from the true model.
pub fn oracle_value(policy: &PolicySpec, cfg: &PricingConfig, quad: &ContextQuadrature) -> ValueTable {
    if policy.is_stationary() {
        let tr = oracle_transition(&|x: &[f64]| policy.prob_high(cfg, 0, 1, x), quad);
        return evaluate_policy(cfg, |_, _| tr.clone());
    }
    evaluate_policy(cfg, |t, s| oracle_transition(&|x: &[f64]| policy.prob_high(cfg, t, s, x), quad))
}

/// Optimal values of the marginal MDP under the true model: at every
/// `(t, s)` each context gets the price maximizing
/// `mu(1 | a, x) (p(a) + Delta V_{t+1}(s))`, ties going to the low price.
pub fn oracle_optimal_values(cfg: &PricingConfig, quad: &ContextQuadrature) -> ValueTable {
    evaluate_policy_with(cfg, |_, s, next| {
        let dv = next[s as usize - 1] - next[s as usize];
        let probs: Vec<f64> = quad
            .mu
            .par_iter()
            .map(|mu| {
                let gain_low = mu[0] * (cfg.prices[0] + dv);
                let gain_high = mu[1] * (cfg.prices[1] + dv);
                if gain_high > gain_low {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        oracle_from_probs(quad, &probs)
    })
}

/// Backward recursion where the rule at `(t, s)` may depend on `V_{t+1}`.
pub fn evaluate_policy_with(cfg: &PricingConfig, mut provider: impl FnMut(usize, u32, &[f64]) -> MarginalTransition) -> ValueTable {
    let mut table = ValueTable::zeros(cfg.horizon, cfg.initial_capacity);
    for t in (0..cfg.horizon).rev() {
        let (head, tail) = table.values.split_at_mut(t + 1);
        let next = &tail[0];
        for s in 1..=cfg.initial_capacity {
            let tr = provider(t, s, next);
            head[t][s as usize] = q_value(next, s, &tr, cfg.prices);
        }
    }
    table
}

/// Right-hand side of the additive decomposition of value-estimation error:
///
/// ```text
/// V_t(s) - V_hat_t(s) = E_{M_hat}[ sum_{h >= t} (R - R_hat)(s_h) + sum_y (P - P_hat)(y | s_h) V_{h+1}(s'(s_h, y)) | s_t = s ]
/// ```
///
/// computed by pushing the state distribution forward under the estimated
/// transitions. `truth(t, s)` and `estimate(t, s)` give the transitions of
/// the evaluated rule at `(t, s)`; `true_values` is its value under `truth`.
pub fn value_error_decomposition(
    cfg: &PricingConfig,
    mut truth: impl FnMut(usize, u32) -> MarginalTransition,
    mut estimate: impl FnMut(usize, u32) -> MarginalTransition,
    true_values: &ValueTable,
) -> Vec<Vec<f64>> {
    let horizon = cfg.horizon;
    let cap = cfg.initial_capacity as usize;
    let mut out = vec![vec![0.0; cap + 1]; horizon + 1];
    // Per-step local errors and estimated transitions.
    let mut local = vec![vec![0.0; cap + 1]; horizon];
    let mut p_sale = vec![vec![0.0; cap + 1]; horizon];
    for t in 0..horizon {
        for s in 1..=cap {
            let tr = truth(t, s as u32);
            let est = estimate(t, s as u32);
            let next = &true_values.values[t + 1];
            let reward_err = tr.expected_reward(cfg.prices) - est.expected_reward(cfg.prices);
            let trans_err = (tr.prob(true) - est.prob(true)) * next[step(s as u32, true) as usize]
                + (tr.prob(false) - est.prob(false)) * next[step(s as u32, false) as usize];
            local[t][s] = reward_err + trans_err;
            p_sale[t][s] = est.prob(true);
        }
    }
    for (start, row) in out.iter_mut().enumerate().take(horizon) {
        for s0 in 1..=cap {
            let mut mass = vec![0.0; cap + 1];
            mass[s0] = 1.0;
            let mut total = 0.0;
            for h in start..horizon {
                let mut next_mass = vec![0.0; cap + 1];
                next_mass[0] = mass[0];
                for s in 1..=cap {
                    if mass[s] == 0.0 {
                        continue;
                    }
                    total += mass[s] * local[h][s];
                    next_mass[s - 1] += mass[s] * p_sale[h][s];
                    next_mass[s] += mass[s] * (1.0 - p_sale[h][s]);
                }
                mass = next_mass;
            }
            row[s0] = total;
        }
    }
    out
}
