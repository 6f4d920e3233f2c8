//! Structural diagnostics of threshold policies: optimal and bias-distorted
//! thresholds, pointwise outcome-model bias, the error-persistence quantity,
//! threshold heatmaps and discrete concavity of value functions.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::env::{Action, PricingConfig, ThetaTable};
use crate::error::{invalid, Result};
use crate::marginal::{oracle_optimal_values, ContextQuadrature, ValueTable};
use crate::serde_float;

pub const CONCAVITY_TOLERANCE: f64 = 1e-9;

// ── Thresholds ──────────────────────────────────────────────────────────

/// `(R0 + dV) / (R1 + dV)`.
pub fn optimal_threshold(r0: f64, r1: f64, dv: f64) -> Result<f64> {
    let den = r1 + dv;
    if den == 0.0 {
        return Err(invalid("optimal threshold has a zero denominator"));
    }
    Ok((r0 + dv) / den)
}

/// Threshold distorted by outcome-model errors `delta0`, `delta1` with true
/// low-price purchase probability `eta0`: `theta * (1 + delta0 / eta0) - delta1`.
pub fn biased_threshold(theta_star: f64, delta0: f64, delta1: f64, eta0: f64) -> Result<f64> {
    if eta0.is_nan() || eta0 <= 0.0 {
        return Err(invalid("eta0 must be positive"));
    }
    Ok(theta_star * (1.0 + delta0 / eta0) - delta1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleThresholds {
    /// `theta*[t][s]`; NaN at `s = 0`.
    pub theta: ThetaTable,
    pub values: ValueTable,
}

/// Optimal thresholds from the optimal values of the true model.
pub fn oracle_thresholds(cfg: &PricingConfig, quad: &ContextQuadrature) -> Result<OracleThresholds> {
    let values = oracle_optimal_values(cfg, quad);
    let mut theta = ThetaTable::filled(cfg.horizon, cfg.initial_capacity, f64::NAN);
    for t in 0..cfg.horizon {
        for s in 1..=cfg.initial_capacity {
            let dv = values.delta(t + 1, s);
            theta.set(t, s, optimal_threshold(cfg.prices[0], cfg.prices[1], dv)?);
        }
    }
    Ok(OracleThresholds { theta, values })
}

// ── Bias ────────────────────────────────────────────────────────────────

/// Pointwise error `delta(a, x) = mu_hat(1 | a, x) - mu(1 | a, x)` of an
/// outcome model, and the true treatment effect `tau(x)`.
pub struct BiasField<'a> {
    pub cfg: &'a PricingConfig,
    pub mu_hat: &'a (dyn Fn(&[f64], Action) -> f64 + Sync),
}

impl BiasField<'_> {
    pub fn delta(&self, a: Action, x: &[f64]) -> f64 {
        (self.mu_hat)(x, a) - self.cfg.purchase_prob(x, a)
    }

    /// `mu(1 | 1, x) - mu(1 | 0, x)`.
    pub fn tau(&self, x: &[f64]) -> f64 {
        self.cfg.purchase_prob(x, Action::High) - self.cfg.purchase_prob(x, Action::Low)
    }

    /// Context averages of `(delta(0, X), delta(1, X), mu(1 | 0, X))`.
    pub fn mean_bias(&self, quad: &ContextQuadrature) -> (f64, f64, f64) {
        let d0 = quad.expect(|k| self.delta(Action::Low, &quad.points[k]));
        let d1 = quad.expect(|k| self.delta(Action::High, &quad.points[k]));
        let eta0 = quad.expect(|k| quad.mu[k][0]);
        (d0, d1, eta0)
    }
}

/// `E[-tau(X) 1[lo <= ratio*(X) <= hi]]` with `(lo, hi)` the sorted pair of
/// thresholds and `ratio*` the true purchase-probability ratio.
pub fn persistence_condition(quad: &ContextQuadrature, theta_hat: f64, theta_star: f64) -> f64 {
    let (lo, hi) = if theta_hat <= theta_star { (theta_hat, theta_star) } else { (theta_star, theta_hat) };
    if lo == hi {
        return 0.0;
    }
    quad.expect(|k| {
        let mu = quad.mu[k];
        let r = crate::learn::ratio(mu[1], mu[0], crate::learn::DEFAULT_RATIO_FLOOR).0;
        if lo <= r && r <= hi {
            mu[0] - mu[1]
        } else {
            0.0
        }
    })
}

// ── Reports ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    #[serde(with = "serde_float::vec")]
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    #[serde(with = "serde_float")]
    pub mean: f64,
}

/// Equal-width histogram over the sample range.
pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 || values.is_empty() {
        return Err(invalid("histogram needs data and at least one bin"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("histogram values must be finite"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|j| lo + j as f64 * width).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let j = (((v - lo) / width) as usize).min(bins - 1);
        counts[j] += 1;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(Histogram { edges, counts, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    /// Indexed `[t][s - 1]` for `t < T`, `1 <= s <= s0`.
    #[serde(with = "serde_float::nested")]
    pub theta_star: Vec<Vec<f64>>,
    #[serde(with = "serde_float::nested")]
    pub theta_hat: Vec<Vec<f64>>,
    /// `theta_star - theta_hat`.
    #[serde(with = "serde_float::nested")]
    pub gap: Vec<Vec<f64>>,
    /// Share of cells with `s > 2` where `theta_hat < theta_star`.
    #[serde(with = "serde_float")]
    pub fraction_below_for_large_s: f64,
    #[serde(with = "serde_float")]
    pub persistence_condition_value: f64,
    pub delta_hist: Histogram,
}

/// Compare learned and optimal thresholds cell by cell. The persistence
/// value and bias histogram are left for the caller to fill in.
pub fn heatmap(learned: &ThetaTable, oracle: &ThetaTable) -> Result<ThresholdReport> {
    if learned.horizon() != oracle.horizon() || learned.capacity() != oracle.capacity() {
        return Err(invalid("learned and optimal threshold tables differ in shape"));
    }
    let cap = learned.capacity();
    let mut theta_star = Vec::new();
    let mut theta_hat = Vec::new();
    let mut gap = Vec::new();
    let (mut below, mut cells) = (0usize, 0usize);
    for t in 0..learned.horizon() {
        let star: Vec<f64> = (1..=cap).map(|s| oracle.get(t, s)).collect();
        let hat: Vec<f64> = (1..=cap).map(|s| learned.get(t, s)).collect();
        for s in 3..=cap {
            cells += 1;
            if hat[s as usize - 1] < star[s as usize - 1] {
                below += 1;
            }
        }
        gap.push(star.iter().zip(&hat).map(|(a, b)| if a == b { 0.0 } else { a - b }).collect());
        theta_star.push(star);
        theta_hat.push(hat);
    }
    let fraction = if cells == 0 { f64::NAN } else { below as f64 / cells as f64 };
    Ok(ThresholdReport {
        theta_star,
        theta_hat,
        gap,
        fraction_below_for_large_s: fraction,
        persistence_condition_value: f64::NAN,
        delta_hist: Histogram::default(),
    })
}

impl ThresholdReport {
    /// Long format: `t,s,theta_star,theta_hat,gap`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "s", "theta_star", "theta_hat", "gap"])?;
        for (t, row) in self.gap.iter().enumerate() {
            for (j, g) in row.iter().enumerate() {
                w.write_record([
                    t.to_string(),
                    (j + 1).to_string(),
                    self.theta_star[t][j].to_string(),
                    self.theta_hat[t][j].to_string(),
                    g.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl Histogram {
    /// `bin_lo,bin_hi,count`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["bin_lo", "bin_hi", "count"])?;
        for (j, c) in self.counts.iter().enumerate() {
            w.write_record([self.edges[j].to_string(), self.edges[j + 1].to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

// ── Concavity ───────────────────────────────────────────────────────────

/// Per epoch: whether `V[t][s] - V[t][s - 1]` is nonincreasing in `s`.
pub fn concavity_check(values: &ValueTable) -> Result<Vec<bool>> {
    if values.capacity() < 2 {
        return Err(invalid("concavity needs at least three inventory levels"));
    }
    Ok(values.values.iter().map(|row| row_is_concave(row)).collect())
}

fn row_is_concave(row: &[f64]) -> bool {
    let diffs: Vec<f64> = row.windows(2).map(|w| w[1] - w[0]).collect();
    diffs.windows(2).all(|d| d[1] <= d[0] + CONCAVITY_TOLERANCE)
}
