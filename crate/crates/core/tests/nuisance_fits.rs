use stateful_ope::env::{simulate, Action, Dataset, PolicySpec, PricingConfig};
use stateful_ope::logistic::fit_logistic;
use stateful_ope::nuisance::{assign_folds, fit_nuisances, outcome_features, outcome_mse, propensity_mse, NuisanceOptions, OutcomeMode};

fn fitted_mses(cfg: &PricingConfig, n: usize, seed: u64, mode: OutcomeMode) -> (f64, f64) {
    let data = simulate(cfg, &PolicySpec::Behavior, n, seed).unwrap();
    let folds = assign_folds(n, cfg.horizon, 2, seed + 1).unwrap();
    let opts = NuisanceOptions { outcome_mode: mode, ..NuisanceOptions::default() };
    let ns = fit_nuisances(&data, &folds, cfg.prices, &opts).unwrap();
    (propensity_mse(&ns, &data, cfg), outcome_mse(&ns, &data, cfg))
}

#[test]
fn propensity_fit_is_accurate_at_fifty_thousand_records() {
    let cfg = PricingConfig::default();
    let (prop, _) = fitted_mses(&cfg, 5000, 3, OutcomeMode::Logistic);
    assert!(prop < 1e-3, "propensity mse {prop}");
}

#[test]
fn well_specified_outcome_error_shrinks_with_sample_size() {
    let cfg = PricingConfig::default();
    let mses: Vec<f64> = [100, 1000, 10000]
        .iter()
        .map(|&n| (0..3).map(|r| fitted_mses(&cfg, n, 100 + r, OutcomeMode::Logistic).1).sum::<f64>() / 3.0)
        .collect();
    assert!(mses[0] > mses[1] && mses[1] > mses[2], "{mses:?}");
    assert!(mses[2] < 1e-4, "{mses:?}");
}

/// Mean squared error, over the logged records of `data`, of the logistic
/// projection of the mixture model fitted on a million behavior records.
fn projection_mse(cfg: &PricingConfig, data: &Dataset) -> f64 {
    let big = simulate(cfg, &PolicySpec::Behavior, 100_000, 999).unwrap();
    let (rows, labels): (Vec<Vec<f64>>, Vec<bool>) =
        big.observations(true).map(|o| (outcome_features(&o.step.x, cfg.price(o.step.a)), o.step.y)).unzip();
    let model = fit_logistic(&rows, &labels, &Default::default()).unwrap();
    let mut total = 0.0;
    let mut count = 0usize;
    for o in data.observations(true) {
        for a in Action::ALL {
            let d = model.predict(&outcome_features(&o.step.x, cfg.price(a))) - cfg.purchase_prob(&o.step.x, a);
            total += d * d;
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn misspecified_logistic_error_is_bounded_below_by_projection_error() {
    let cfg = PricingConfig::default().with_delta(0.2);
    let n = 5000;
    let data = simulate(&cfg, &PolicySpec::Behavior, n, 41).unwrap();
    let folds = assign_folds(n, cfg.horizon, 2, 42).unwrap();
    let ns = fit_nuisances(&data, &folds, cfg.prices, &NuisanceOptions::default()).unwrap();
    let fitted = outcome_mse(&ns, &data, &cfg);
    let floor = projection_mse(&cfg, &data);
    assert!(floor > 1e-4, "projection error {floor} should be material at delta = 0.2");
    assert!(fitted >= floor, "fitted {fitted} below projection {floor}");
}

#[test]
fn flexible_outcome_beats_misspecified_logistic() {
    let cfg = PricingConfig::default().with_delta(0.2);
    let reps = 8;
    let (mut logistic, mut flexible) = (0.0, 0.0);
    for r in 0..reps {
        logistic += fitted_mses(&cfg, 2000, 1000 + r, OutcomeMode::Logistic).1 / reps as f64;
        flexible += fitted_mses(&cfg, 2000, 1000 + r, OutcomeMode::Flexible).1 / reps as f64;
    }
    assert!(flexible < logistic, "mean mse over {reps} replications: flexible {flexible} vs logistic {logistic}");
}
