//! Cross-fitted propensity and outcome models.
//!
//! Records are keyed by `k(i, t) = (fold(i), t mod 2)`. The model used for a
//! record with key `(f, p)` is trained on the trajectories outside fold `f`,
//! restricted to epochs of parity `p`, so no record is ever scored by a model
//! that saw its own trajectory.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Dataset, PricingConfig};
use crate::error::{invalid, Result};
use crate::knn::{default_k, flexible_outcome_fit, KnnModel};
use crate::logistic::{fit_logistic, FitOptions, LogisticModel};
use crate::math::{logit, sigmoid};
use crate::rng::substream;

/// Fitted nuisances as seen by the score construction: clipped propensities
/// and purchase probabilities for the record `(traj, t)`.
pub trait Nuisance: Sync {
    /// `e_hat(a | x)`, within `[clip_eps, 1 - clip_eps]`.
    fn propensity(&self, traj: usize, t: usize, x: &[f64], a: Action) -> f64;
    /// `mu_hat(1 | a, x)`.
    fn outcome(&self, traj: usize, t: usize, x: &[f64], a: Action) -> f64;

    /// `mu_hat(y | a, x)`; the two outcomes sum to one.
    fn outcome_prob(&self, traj: usize, t: usize, x: &[f64], a: Action, y: bool) -> f64 {
        let p = self.outcome(traj, t, x, a);
        if y {
            p
        } else {
            1.0 - p
        }
    }
}

/// Clip the high-price propensity and return the probability of `a`.
pub fn clip_propensity(prob_high: f64, a: Action, clip_eps: f64) -> f64 {
    let p = prob_high.clamp(clip_eps, 1.0 - clip_eps);
    match a {
        Action::High => p,
        Action::Low => 1.0 - p,
    }
}

// ── Folds ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FoldKey {
    pub fold: usize,
    pub parity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub horizon: usize,
    pub traj_fold: Vec<usize>,
}

/// Split `n` trajectories into `k` near-equal folds after a seeded shuffle.
pub fn assign_folds(n: usize, horizon: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, 0));
    FoldAssignment::from_order(&order, horizon, k)
}

impl FoldAssignment {
    /// Fold `j * k / n` for the trajectory at position `j` of `order`.
    pub fn from_order(order: &[usize], horizon: usize, k: usize) -> Result<Self> {
        let n = order.len();
        if k < 2 {
            return Err(invalid("need at least two folds"));
        }
        if n < k {
            return Err(invalid(format!("{n} trajectories cannot fill {k} folds")));
        }
        let mut traj_fold = vec![usize::MAX; n];
        for (j, &i) in order.iter().enumerate() {
            if i >= n || traj_fold[i] != usize::MAX {
                return Err(invalid("order must be a permutation"));
            }
            traj_fold[i] = j * k / n;
        }
        Ok(FoldAssignment { k, horizon, traj_fold })
    }

    pub fn n_trajectories(&self) -> usize {
        self.traj_fold.len()
    }

    pub fn key(&self, traj: usize, t: usize) -> FoldKey {
        FoldKey { fold: self.traj_fold[traj], parity: t % 2 }
    }

    pub fn keys(&self) -> impl Iterator<Item = FoldKey> + '_ {
        (0..self.k).flat_map(|fold| (0..2).map(move |parity| FoldKey { fold, parity }))
    }

    pub fn slot(&self, key: FoldKey) -> usize {
        key.fold * 2 + key.parity
    }

    /// Whether record `(traj, t)` may be used to train the model for `key`.
    pub fn trains(&self, key: FoldKey, traj: usize, t: usize) -> bool {
        self.traj_fold[traj] != key.fold && t % 2 == key.parity
    }
}

// ── Models ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeMode {
    Logistic,
    Flexible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbModel {
    Logistic(LogisticModel),
    Knn(KnnModel),
}

impl ProbModel {
    pub fn predict(&self, features: &[f64]) -> f64 {
        match self {
            ProbModel::Logistic(m) => m.predict(features),
            ProbModel::Knn(m) => m.predict(features),
        }
    }
}

/// Outcome features: the context followed by the posted price.
pub fn outcome_features(x: &[f64], price: f64) -> Vec<f64> {
    let mut f = Vec::with_capacity(x.len() + 1);
    f.extend_from_slice(x);
    f.push(price);
    f
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuisanceOptions {
    pub outcome_mode: OutcomeMode,
    pub clip_eps: f64,
    pub fit: FitOptions,
    /// Neighborhood size for the flexible smoother; `None` uses
    /// `ceil(m^0.6)` for a training set of `m` records.
    pub k_neighbors: Option<usize>,
    /// Use records logged at zero inventory.
    pub include_stockout: bool,
}

impl Default for NuisanceOptions {
    fn default() -> Self {
        NuisanceOptions {
            outcome_mode: OutcomeMode::Logistic,
            clip_eps: 0.01,
            fit: FitOptions::default(),
            k_neighbors: None,
            include_stockout: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipStats {
    pub evaluated: usize,
    pub clipped: usize,
}

impl ClipStats {
    pub fn rate(&self) -> f64 {
        if self.evaluated == 0 {
            0.0
        } else {
            self.clipped as f64 / self.evaluated as f64
        }
    }
}

/// Cross-fitted nuisance models, one propensity and one outcome model per
/// fold key, stored at [`FoldAssignment::slot`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSet {
    pub folds: FoldAssignment,
    pub propensity: Vec<ProbModel>,
    pub outcome: Vec<ProbModel>,
    pub prices: [f64; 2],
    pub clip_eps: f64,
    pub flexible: bool,
    pub clip_stats: ClipStats,
}

const MIN_TRAINING_RECORDS: usize = 10;

/// Fit all per-key models on `data` under `folds`.
pub fn fit_nuisances(data: &Dataset, folds: &FoldAssignment, prices: [f64; 2], opts: &NuisanceOptions) -> Result<NuisanceSet> {
    if data.n_trajectories() != folds.n_trajectories() {
        return Err(invalid("fold assignment was built for a different dataset"));
    }
    if !(0.0..0.5).contains(&opts.clip_eps) {
        return Err(invalid("clip_eps must lie in [0, 0.5)"));
    }
    let keys: Vec<FoldKey> = folds.keys().collect();
    let fitted: Vec<(ProbModel, ProbModel)> = keys
        .par_iter()
        .map(|&key| {
            let train: Vec<_> = data
                .observations(opts.include_stockout)
                .filter(|o| folds.trains(key, o.traj, o.t))
                .collect();
            if train.len() < MIN_TRAINING_RECORDS {
                return Err(invalid(format!(
                    "fold {} parity {} has {} training records, need {MIN_TRAINING_RECORDS}",
                    key.fold,
                    key.parity,
                    train.len()
                )));
            }
            let xs: Vec<Vec<f64>> = train.iter().map(|o| o.step.x.clone()).collect();
            let actions: Vec<bool> = train.iter().map(|o| o.step.a == Action::High).collect();
            let propensity = ProbModel::Logistic(fit_logistic(&xs, &actions, &opts.fit)?);

            let feats: Vec<Vec<f64>> =
                train.iter().map(|o| outcome_features(&o.step.x, prices[o.step.a.index()])).collect();
            let ys: Vec<bool> = train.iter().map(|o| o.step.y).collect();
            let outcome = match opts.outcome_mode {
                OutcomeMode::Logistic => ProbModel::Logistic(fit_logistic(&feats, &ys, &opts.fit)?),
                OutcomeMode::Flexible => {
                    let k = opts.k_neighbors.unwrap_or_else(|| default_k(feats.len()));
                    ProbModel::Knn(flexible_outcome_fit(&feats, &ys, k)?)
                }
            };
            Ok((propensity, outcome))
        })
        .collect::<Result<_>>()?;

    let mut propensity = Vec::with_capacity(keys.len());
    let mut outcome = Vec::with_capacity(keys.len());
    for (p, o) in fitted {
        propensity.push(p);
        outcome.push(o);
    }
    let mut set = NuisanceSet {
        folds: folds.clone(),
        propensity,
        outcome,
        prices,
        clip_eps: opts.clip_eps,
        flexible: opts.outcome_mode == OutcomeMode::Flexible,
        clip_stats: ClipStats { evaluated: 0, clipped: 0 },
    };
    let mut stats = ClipStats { evaluated: 0, clipped: 0 };
    for o in data.observations(opts.include_stockout) {
        let raw = set.raw_propensity(o.traj, o.t, &o.step.x);
        stats.evaluated += 1;
        if raw < set.clip_eps || raw > 1.0 - set.clip_eps {
            stats.clipped += 1;
        }
    }
    set.clip_stats = stats;
    Ok(set)
}

impl NuisanceSet {
    fn slot(&self, traj: usize, t: usize) -> usize {
        self.folds.slot(self.folds.key(traj, t))
    }

    /// Unclipped cross-fitted `e_hat(1 | x)` for record `(traj, t)`.
    pub fn raw_propensity(&self, traj: usize, t: usize, x: &[f64]) -> f64 {
        self.propensity[self.slot(traj, t)].predict(x)
    }

    /// Average of the per-key outcome models; used away from the logged records.
    pub fn ensemble_outcome(&self, x: &[f64], a: Action) -> f64 {
        let f = outcome_features(x, self.prices[a.index()]);
        self.outcome.iter().map(|m| m.predict(&f)).sum::<f64>() / self.outcome.len() as f64
    }

    pub fn ensemble_propensity(&self, x: &[f64]) -> f64 {
        self.propensity.iter().map(|m| m.predict(x)).sum::<f64>() / self.propensity.len() as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl Nuisance for NuisanceSet {
    fn propensity(&self, traj: usize, t: usize, x: &[f64], a: Action) -> f64 {
        clip_propensity(self.raw_propensity(traj, t, x), a, self.clip_eps)
    }

    fn outcome(&self, traj: usize, t: usize, x: &[f64], a: Action) -> f64 {
        let f = outcome_features(x, self.prices[a.index()]);
        self.outcome[self.slot(traj, t)].predict(&f)
    }
}

// ── Known nuisances ─────────────────────────────────────────────────────

/// Deterministic perturbation of a true probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distortion {
    Exact,
    /// `sigmoid(factor * logit(p))`.
    LogitScale { factor: f64 },
    /// Additive shift per action, kept inside `[floor, 1 - floor]`.
    Shift { low: f64, high: f64, floor: f64 },
    /// Constant prediction.
    Constant { value: f64 },
}

impl Distortion {
    pub fn apply(&self, p: f64, a: Action) -> f64 {
        match *self {
            Distortion::Exact => p,
            Distortion::LogitScale { factor } => sigmoid(factor * logit(p)),
            Distortion::Shift { low, high, floor } => {
                let shift = if a == Action::High { high } else { low };
                (p + shift).clamp(floor, 1.0 - floor)
            }
            Distortion::Constant { value } => value,
        }
    }
}

/// Nuisances computed from the true environment, optionally distorted.
/// Used to study estimator bias with one or both nuisances known.
#[derive(Debug, Clone)]
pub struct OracleNuisance<'a> {
    pub cfg: &'a PricingConfig,
    pub propensity: Distortion,
    pub outcome: Distortion,
    pub clip_eps: f64,
}

impl<'a> OracleNuisance<'a> {
    pub fn exact(cfg: &'a PricingConfig) -> Self {
        OracleNuisance { cfg, propensity: Distortion::Exact, outcome: Distortion::Exact, clip_eps: 0.0 }
    }
}

impl Nuisance for OracleNuisance<'_> {
    fn propensity(&self, _traj: usize, _t: usize, x: &[f64], a: Action) -> f64 {
        let p = self.propensity.apply(self.cfg.behavior_prob_high(x), Action::High);
        clip_propensity(p, a, self.clip_eps)
    }

    fn outcome(&self, _traj: usize, _t: usize, x: &[f64], a: Action) -> f64 {
        self.outcome.apply(self.cfg.purchase_prob(x, a), a)
    }
}

// ── Diagnostics ─────────────────────────────────────────────────────────

/// Mean squared error of the cross-fitted `mu_hat(1 | a, x)` against the truth,
/// averaged over both actions at every logged context.
pub fn outcome_mse(n: &dyn Nuisance, data: &Dataset, cfg: &PricingConfig) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for o in data.observations(true) {
        for a in Action::ALL {
            let d = n.outcome(o.traj, o.t, &o.step.x, a) - cfg.purchase_prob(&o.step.x, a);
            total += d * d;
            count += 1;
        }
    }
    total / count as f64
}

/// Mean squared error of the cross-fitted `e_hat(1 | x)` against the truth.
pub fn propensity_mse(n: &dyn Nuisance, data: &Dataset, cfg: &PricingConfig) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for o in data.observations(true) {
        let d = n.propensity(o.traj, o.t, &o.step.x, Action::High) - cfg.behavior_prob_high(&o.step.x);
        total += d * d;
        count += 1;
    }
    total / count as f64
}
