use stateful_ope::analysis::{biased_threshold, concavity_check, oracle_thresholds, persistence_condition, BiasField};
use stateful_ope::env::{Action, PricingConfig};
use stateful_ope::marginal::ContextQuadrature;

#[test]
fn shifted_outcome_bias_gives_positive_persistence_value_on_default_config() {
    let cfg = PricingConfig::default();
    let quad = ContextQuadrature::for_config(&cfg, 200_000, 2).unwrap();
    let oracle = oracle_thresholds(&cfg, &quad).unwrap();
    let shift = |x: &[f64], a: Action| {
        let p = cfg.purchase_prob(x, a);
        match a {
            Action::High => (p + 0.05).min(1.0),
            Action::Low => (p - 0.05).max(0.0),
        }
    };
    let field = BiasField { cfg: &cfg, mu_hat: &shift };
    let (d0, d1, eta0) = field.mean_bias(&quad);
    assert!(d1 > 0.0 && d0 < 0.0);
    let last = cfg.horizon - 1;
    let star = oracle.theta.get(last, cfg.initial_capacity);
    let hat = biased_threshold(star, d0, d1, eta0).unwrap();
    assert!(hat < star);
    let value = persistence_condition(&quad, hat, star);
    assert!(value > 0.0, "persistence value {value} on [{hat}, {star}]");
}

#[test]
fn optimal_thresholds_are_nondecreasing_in_inventory() {
    for delta in [0.0, 0.2] {
        let cfg = PricingConfig::default().with_delta(delta);
        let quad = ContextQuadrature::for_config(&cfg, 200_000, 3).unwrap();
        let oracle = oracle_thresholds(&cfg, &quad).unwrap();
        for t in 0..cfg.horizon {
            for s in 2..=cfg.initial_capacity {
                let (lo, hi) = (oracle.theta.get(t, s - 1), oracle.theta.get(t, s));
                assert!(hi >= lo - 1e-12, "delta {delta}, t {t}: theta*({}) = {lo} > theta*({s}) = {hi}", s - 1);
            }
        }
    }
}

#[test]
fn default_config_thresholds_are_finite_and_below_the_price_ratio() {
    let cfg = PricingConfig::default();
    let quad = ContextQuadrature::for_config(&cfg, 200_000, 4).unwrap();
    let oracle = oracle_thresholds(&cfg, &quad).unwrap();
    let ratio = cfg.prices[0] / cfg.prices[1];
    for t in 0..cfg.horizon {
        for s in 1..=cfg.initial_capacity {
            let v = oracle.theta.get(t, s);
            assert!(v.is_finite() && v <= ratio + 1e-12, "theta*({t}, {s}) = {v}");
        }
    }
    for s in 1..=cfg.initial_capacity {
        assert_eq!(oracle.theta.get(cfg.horizon - 1, s), ratio);
    }
}

#[test]
fn default_config_optimal_values_are_concave_in_inventory() {
    for delta in [0.0, 0.2] {
        let cfg = PricingConfig::default().with_delta(delta);
        let quad = ContextQuadrature::for_config(&cfg, 200_000, 5).unwrap();
        let oracle = oracle_thresholds(&cfg, &quad).unwrap();
        assert!(concavity_check(&oracle.values).unwrap().into_iter().all(|ok| ok));
    }
}
