//! Seeded experiment drivers: off-policy evaluation error curves, policy
//! learning value curves and threshold diagnostics.
//!
//! Replication `r` draws its seed from `(master_seed, r)` alone, so every
//! estimator and sample size within a replication sees nested prefixes of
//! the same logged trajectories. Results are sorted by `(method, N, r)`
//! before writing, which makes outputs independent of the worker count.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{biased_threshold, heatmap, histogram, oracle_thresholds, persistence_condition, BiasField, ThresholdReport};
use crate::env::{monte_carlo_value, simulate, Action, Dataset, PolicySpec, PricingConfig, RatioFn};
use crate::error::{invalid, Result};
use crate::learn::{build_grid, learn, out_of_sample_value, FittedRatio, LearnedPolicy, DEFAULT_GRID_SIZE};
use crate::marginal::{dr_scores, estimate_transition, evaluate_policy, oracle_optimal_values, ClipMode, ContextQuadrature, EstimatorMode, ScoreTable};
use crate::nuisance::{assign_folds, fit_nuisances, NuisanceOptions, NuisanceSet, OutcomeMode};
use crate::rng::derive_seed;

// ── Methods ─────────────────────────────────────────────────────────────

/// Estimator paired with an outcome-model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "dm")]
    Dm,
    #[serde(rename = "ipw")]
    Ipw,
    #[serde(rename = "dr")]
    Dr,
    #[serde(rename = "drnp")]
    DrNonpara,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dm, Method::Ipw, Method::Dr, Method::DrNonpara];

    pub fn estimator(self) -> EstimatorMode {
        match self {
            Method::Dm => EstimatorMode::Dm,
            Method::Ipw => EstimatorMode::Ipw,
            Method::Dr | Method::DrNonpara => EstimatorMode::Dr,
        }
    }

    pub fn outcome_mode(self) -> OutcomeMode {
        match self {
            Method::DrNonpara => OutcomeMode::Flexible,
            _ => OutcomeMode::Logistic,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Dm => "dm",
            Method::Ipw => "ipw",
            Method::Dr => "dr",
            Method::DrNonpara => "drnp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dm" => Ok(Method::Dm),
            "ipw" => Ok(Method::Ipw),
            "dr" => Ok(Method::Dr),
            "drnp" | "dr-nonpara" => Ok(Method::DrNonpara),
            other => Err(invalid(format!("unknown method '{other}' (expected dm, ipw, dr or drnp)"))),
        }
    }
}

/// Parse a comma-separated method list such as `dm,ipw,dr,drnp`.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let mut out: Vec<Method> = list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(invalid("no methods selected"));
    }
    Ok(out)
}

// ── Configuration ───────────────────────────────────────────────────────

/// Estimation choices shared by all commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationSettings {
    pub folds: usize,
    pub nuisance: NuisanceOptions,
    pub clip: ClipMode,
    pub grid_size: usize,
}

impl Default for EstimationSettings {
    fn default() -> Self {
        EstimationSettings {
            folds: 2,
            nuisance: NuisanceOptions::default(),
            clip: ClipMode::ClipRenormalize,
            grid_size: DEFAULT_GRID_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub env: PricingConfig,
    pub sample_sizes: Vec<usize>,
    pub replications: usize,
    pub methods: Vec<Method>,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub estimation: EstimationSettings,
    /// Monte Carlo rollouts for the OPE ground truth.
    pub truth_rollouts: usize,
    /// Monte Carlo rollouts for out-of-sample values of learned policies.
    pub oos_rollouts: usize,
    /// Context draws standing in for a Gaussian context distribution in
    /// oracle dynamic programs.
    pub oracle_draws: usize,
    /// Sample size of the threshold analysis.
    pub analysis_n: usize,
    pub histogram_bins: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: PricingConfig::default(),
            sample_sizes: vec![50, 100, 250, 500, 1000, 2500, 5000],
            replications: 48,
            methods: Method::ALL.to_vec(),
            master_seed: 0,
            output_dir: PathBuf::from("results"),
            estimation: EstimationSettings::default(),
            truth_rollouts: 200_000,
            oos_rollouts: 10_000,
            oracle_draws: 200_000,
            analysis_n: 5000,
            histogram_bins: 40,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.replications == 0 {
            return Err(invalid("replications must be at least 1"));
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.contains(&0) {
            return Err(invalid("sample sizes must be positive"));
        }
        if self.methods.is_empty() {
            return Err(invalid("no methods selected"));
        }
        if self.estimation.grid_size < 2 {
            return Err(invalid("threshold grid needs at least two quantiles"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Seed of replication `r`.
    pub fn replication_seed(&self, r: usize) -> u64 {
        derive_seed(self.master_seed, &[r as u64])
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let text = serde_json::to_string(self)?;
        Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
    }
}

const DATA_STREAM: u64 = 0;
const FOLD_STREAM: u64 = 1;
const ROLLOUT_STREAM: u64 = 2;
const TRUTH_STREAM: u64 = 3;
const QUADRATURE_STREAM: u64 = 4;

/// Logged behavior data of replication seed `seed`; smaller `n` gives a
/// prefix of larger `n`.
pub fn replication_data(env: &PricingConfig, n: usize, seed: u64) -> Result<Dataset> {
    simulate(env, &PolicySpec::Behavior, n, derive_seed(seed, &[DATA_STREAM]))
}

// ── Fitting ─────────────────────────────────────────────────────────────

/// Cross-fitted nuisances and their scores for one dataset.
pub struct Fitted {
    pub nuisances: Arc<NuisanceSet>,
    pub scores: ScoreTable,
}

pub fn fit(env: &PricingConfig, data: &Dataset, outcome_mode: OutcomeMode, seed: u64, settings: &EstimationSettings) -> Result<Fitted> {
    let folds = assign_folds(data.n_trajectories(), env.horizon, settings.folds, derive_seed(seed, &[FOLD_STREAM]))?;
    let opts = NuisanceOptions { outcome_mode, ..settings.nuisance };
    let nuisances = fit_nuisances(data, &folds, env.prices, &opts)?;
    let scores = dr_scores(data, &nuisances, opts.include_stockout);
    Ok(Fitted { nuisances: Arc::new(nuisances), scores })
}

/// `V_hat_0(s0)` of the evaluation policy.
pub fn ope_estimate(env: &PricingConfig, data: &Dataset, fitted: &Fitted, mode: EstimatorMode, clip: ClipMode) -> Result<f64> {
    let pi = PolicySpec::evaluation(env);
    let tr = estimate_transition(&|x: &[f64]| pi.prob_high(env, 0, 1, x), &fitted.scores, data, mode, clip)?;
    Ok(evaluate_policy(env, |_, _| tr.clone()).get(0, env.initial_capacity))
}

/// Threshold policy learned on the fitted outcome-model ratio.
pub fn learn_policy(env: &PricingConfig, data: &Dataset, fitted: &Fitted, mode: EstimatorMode, settings: &EstimationSettings) -> Result<LearnedPolicy> {
    let ratio: Arc<dyn RatioFn> = Arc::new(FittedRatio::new(Arc::clone(&fitted.nuisances)));
    let source = if fitted.nuisances.flexible { "knn_ensemble" } else { "logistic_ensemble" };
    let grid = build_grid(data, &fitted.scores, ratio.as_ref(), settings.grid_size)?;
    learn(data, &fitted.scores, ratio, source, mode, &grid, env, settings.clip)
}

/// Fit each outcome family needed by `methods` once.
fn fit_for_methods(env: &PricingConfig, data: &Dataset, methods: &[Method], seed: u64, settings: &EstimationSettings) -> Vec<(OutcomeMode, Result<Fitted>)> {
    let mut modes: Vec<OutcomeMode> = Vec::new();
    for m in methods {
        if !modes.contains(&m.outcome_mode()) {
            modes.push(m.outcome_mode());
        }
    }
    modes.into_iter().map(|om| (om, fit(env, data, om, seed, settings))).collect()
}

fn fitted_for(fits: &[(OutcomeMode, Result<Fitted>)], mode: OutcomeMode) -> std::result::Result<&Fitted, String> {
    match fits.iter().find(|(m, _)| *m == mode).map(|(_, f)| f) {
        Some(Ok(f)) => Ok(f),
        Some(Err(e)) => Err(e.to_string()),
        None => Err("outcome family was not fitted".to_string()),
    }
}

// ── Rows ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeRow {
    pub method: Method,
    pub n: usize,
    pub replication: usize,
    pub seed: u64,
    pub estimate: f64,
    pub oracle_value: f64,
    pub rel_abs_error: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnRow {
    pub method: Method,
    pub n: usize,
    pub replication: usize,
    pub seed: u64,
    pub oos_value: f64,
    pub oracle_gap: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub method: Method,
    pub n: usize,
    pub replication: usize,
    pub error: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: String,
    config: &'a ExperimentConfig,
    rows: usize,
    failures: Vec<Failure>,
    #[serde(flatten)]
    extra: serde_json::Value,
}

fn write_manifest(dir: &Path, command: &str, cfg: &ExperimentConfig, rows: usize, failures: Vec<Failure>, extra: serde_json::Value) -> Result<PathBuf> {
    let m = Manifest { command, version: env!("CARGO_PKG_VERSION"), config_hash: cfg.hash()?, config: cfg, rows, failures, extra };
    let path = dir.join(format!("{command}_manifest.json"));
    fs::write(&path, serde_json::to_string_pretty(&m)?)?;
    Ok(path)
}

fn grid_cells(cfg: &ExperimentConfig) -> Vec<(usize, usize)> {
    let mut cells = Vec::new();
    for &n in &cfg.sample_sizes {
        for r in 0..cfg.replications {
            cells.push((n, r));
        }
    }
    cells
}

// ── Off-policy evaluation ───────────────────────────────────────────────

/// Monte Carlo value of the evaluation policy used as OPE ground truth.
pub fn ope_truth(cfg: &ExperimentConfig) -> Result<(f64, f64)> {
    let seed = derive_seed(cfg.master_seed, &[u64::MAX, TRUTH_STREAM]);
    monte_carlo_value(&cfg.env, &PolicySpec::evaluation(&cfg.env), cfg.truth_rollouts, seed)
}

/// One OPE row per `(method, N, r)`; per-row failures are recorded, not
/// propagated.
pub fn ope_rows(cfg: &ExperimentConfig, truth: f64) -> Vec<OpeRow> {
    let mut rows: Vec<OpeRow> = grid_cells(cfg)
        .into_par_iter()
        .flat_map_iter(|(n, r)| {
            let seed = cfg.replication_seed(r);
            let data = replication_data(&cfg.env, n, seed);
            let fits = match &data {
                Ok(d) => fit_for_methods(&cfg.env, d, &cfg.methods, derive_seed(seed, &[n as u64]), &cfg.estimation),
                Err(_) => Vec::new(),
            };
            cfg.methods
                .iter()
                .map(|&method| {
                    let result = data
                        .as_ref()
                        .map_err(|e| e.to_string())
                        .and_then(|d| {
                            let f = fitted_for(&fits, method.outcome_mode())?;
                            ope_estimate(&cfg.env, d, f, method.estimator(), cfg.estimation.clip).map_err(|e| e.to_string())
                        });
                    let (estimate, error) = match result {
                        Ok(v) => (v, None),
                        Err(e) => (f64::NAN, Some(e)),
                    };
                    OpeRow {
                        method,
                        n,
                        replication: r,
                        seed,
                        estimate,
                        oracle_value: truth,
                        rel_abs_error: (estimate - truth).abs() / truth.abs(),
                        error,
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    rows.sort_by_key(|r| (r.method, r.n, r.replication));
    rows
}

pub fn write_ope_csv<W: std::io::Write>(writer: W, rows: &[OpeRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["mode", "n", "seed", "estimate", "oracle_value", "rel_abs_error"])?;
    for r in rows {
        w.write_record([
            r.method.name().to_string(),
            r.n.to_string(),
            r.seed.to_string(),
            r.estimate.to_string(),
            r.oracle_value.to_string(),
            r.rel_abs_error.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Run the OPE experiment and write `ope.csv` and `ope_manifest.json`.
pub fn run_ope(cfg: &ExperimentConfig) -> Result<Vec<OpeRow>> {
    cfg.validate()?;
    let (truth, truth_se) = ope_truth(cfg)?;
    let rows = ope_rows(cfg, truth);
    fs::create_dir_all(&cfg.output_dir)?;
    write_ope_csv(fs::File::create(cfg.output_dir.join("ope.csv"))?, &rows)?;
    let failures = failures_of(rows.iter().map(|r| (r.method, r.n, r.replication, &r.error)));
    let extra = serde_json::json!({ "truth_value": truth, "truth_stderr": truth_se });
    write_manifest(&cfg.output_dir, "ope", cfg, rows.len(), failures, extra)?;
    Ok(rows)
}

fn failures_of<'a>(rows: impl Iterator<Item = (Method, usize, usize, &'a Option<String>)>) -> Vec<Failure> {
    rows.filter_map(|(method, n, replication, e)| e.as_ref().map(|e| Failure { method, n, replication, error: e.clone() }))
        .collect()
}

// ── Policy learning ─────────────────────────────────────────────────────

/// Context quadrature of the experiment's oracle computations.
pub fn oracle_quadrature(cfg: &ExperimentConfig) -> Result<ContextQuadrature> {
    ContextQuadrature::for_config(&cfg.env, cfg.oracle_draws, derive_seed(cfg.master_seed, &[u64::MAX, QUADRATURE_STREAM]))
}

pub fn learn_rows(cfg: &ExperimentConfig, oracle_best: f64) -> Vec<LearnRow> {
    let mut rows: Vec<LearnRow> = grid_cells(cfg)
        .into_par_iter()
        .flat_map_iter(|(n, r)| {
            let seed = cfg.replication_seed(r);
            let data = replication_data(&cfg.env, n, seed);
            let fits = match &data {
                Ok(d) => fit_for_methods(&cfg.env, d, &cfg.methods, derive_seed(seed, &[n as u64]), &cfg.estimation),
                Err(_) => Vec::new(),
            };
            cfg.methods
                .iter()
                .map(|&method| {
                    let result = data.as_ref().map_err(|e| e.to_string()).and_then(|d| {
                        let f = fitted_for(&fits, method.outcome_mode())?;
                        let policy = learn_policy(&cfg.env, d, f, method.estimator(), &cfg.estimation).map_err(|e| e.to_string())?;
                        let rollout_seed = derive_seed(seed, &[n as u64, ROLLOUT_STREAM]);
                        out_of_sample_value(&policy, &cfg.env, cfg.oos_rollouts, rollout_seed).map_err(|e| e.to_string())
                    });
                    let (oos_value, error) = match result {
                        Ok((v, _)) => (v, None),
                        Err(e) => (f64::NAN, Some(e)),
                    };
                    LearnRow { method, n, replication: r, seed, oos_value, oracle_gap: oracle_best - oos_value, error }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    rows.sort_by_key(|r| (r.method, r.n, r.replication));
    rows
}

pub fn write_learn_csv<W: std::io::Write>(writer: W, rows: &[LearnRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["mode", "n", "seed", "oos_value", "oracle_gap"])?;
    for r in rows {
        w.write_record([
            r.method.name().to_string(),
            r.n.to_string(),
            r.seed.to_string(),
            r.oos_value.to_string(),
            r.oracle_gap.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Run the learning experiment and write `learn.csv` and `learn_manifest.json`.
pub fn run_learn(cfg: &ExperimentConfig) -> Result<Vec<LearnRow>> {
    cfg.validate()?;
    let quad = oracle_quadrature(cfg)?;
    let oracle_best = oracle_optimal_values(&cfg.env, &quad).get(0, cfg.env.initial_capacity);
    let rows = learn_rows(cfg, oracle_best);
    fs::create_dir_all(&cfg.output_dir)?;
    write_learn_csv(fs::File::create(cfg.output_dir.join("learn.csv"))?, &rows)?;
    let failures = failures_of(rows.iter().map(|r| (r.method, r.n, r.replication, &r.error)));
    let extra = serde_json::json!({ "oracle_best_value": oracle_best });
    write_manifest(&cfg.output_dir, "learn", cfg, rows.len(), failures, extra)?;
    Ok(rows)
}

// ── Threshold analysis ──────────────────────────────────────────────────

/// Optimal thresholds against thresholds learned by the direct method with
/// logistic outcome models, with the bias histogram of `mu_hat(1 | 1, .)`
/// and the persistence quantity at the last epoch.
pub fn analyze(cfg: &ExperimentConfig) -> Result<ThresholdReport> {
    cfg.validate()?;
    let env = &cfg.env;
    let quad = oracle_quadrature(cfg)?;
    let oracle = oracle_thresholds(env, &quad)?;
    let seed = cfg.replication_seed(0);
    let data = replication_data(env, cfg.analysis_n, seed)?;
    let fitted = fit(env, &data, OutcomeMode::Logistic, derive_seed(seed, &[cfg.analysis_n as u64]), &cfg.estimation)?;
    let learned = learn_policy(env, &data, &fitted, EstimatorMode::Dm, &cfg.estimation)?;
    let mut report = heatmap(&learned.theta, &oracle.theta)?;

    let ns = Arc::clone(&fitted.nuisances);
    let mu_hat = move |x: &[f64], a: Action| ns.ensemble_outcome(x, a);
    let field = BiasField { cfg: env, mu_hat: &mu_hat };
    let deltas: Vec<f64> = quad.points.par_iter().map(|x| field.delta(Action::High, x)).collect();
    report.delta_hist = histogram(&deltas, cfg.histogram_bins)?;

    let (d0, d1, eta0) = field.mean_bias(&quad);
    let last = env.horizon - 1;
    let theta_star = oracle.theta.get(last, env.initial_capacity);
    let theta_hat = biased_threshold(theta_star, d0, d1, eta0)?;
    report.persistence_condition_value = persistence_condition(&quad, theta_hat, theta_star);
    Ok(report)
}

/// Run the analysis and write `thresholds.csv`, `delta_hist.csv` and
/// `analyze_manifest.json`.
pub fn run_analyze(cfg: &ExperimentConfig) -> Result<ThresholdReport> {
    let report = analyze(cfg)?;
    fs::create_dir_all(&cfg.output_dir)?;
    report.write_csv(fs::File::create(cfg.output_dir.join("thresholds.csv"))?)?;
    report.delta_hist.write_csv(fs::File::create(cfg.output_dir.join("delta_hist.csv"))?)?;
    let extra = serde_json::json!({ "report": &report });
    write_manifest(&cfg.output_dir, "analyze", cfg, report.gap.len() * cfg.env.initial_capacity as usize, Vec::new(), extra)?;
    Ok(report)
}
