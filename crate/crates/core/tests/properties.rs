use std::sync::Arc;

use proptest::prelude::*;

use stateful_ope::analysis::{biased_threshold, concavity_check};
use stateful_ope::env::{simulate, step, Action, ContextSpec, PolicySpec, PricingConfig, RatioFn};
use stateful_ope::experiment::{fit, EstimationSettings};
use stateful_ope::learn::{grid_transitions, learn_from_transitions, OracleRatio, ThresholdGrid};
use stateful_ope::logistic::{fit_logistic, objective_gradient, FitOptions};
use stateful_ope::marginal::{
    dr_scores, estimate_transition, oracle_optimal_values, oracle_value, ClipMode, ContextQuadrature, EstimatorMode,
};
use stateful_ope::nuisance::{assign_folds, clip_propensity, Distortion, Nuisance, OracleNuisance, OutcomeMode};

// ── Strategies ──────────────────────────────────────────────────────────

fn finite_context(dim: usize) -> impl Strategy<Value = ContextSpec> {
    (1usize..6).prop_flat_map(move |m| {
        (prop::collection::vec(prop::collection::vec(-2.0..2.0f64, dim), m), prop::collection::vec(0.1..1.0f64, m)).prop_map(
            |(support, w)| {
                let total: f64 = w.iter().sum();
                let mut probs: Vec<f64> = w.iter().map(|v| v / total).collect();
                let head: f64 = probs[..probs.len() - 1].iter().sum();
                *probs.last_mut().unwrap() = 1.0 - head;
                ContextSpec::Finite { support, probs }
            },
        )
    })
}

fn config() -> impl Strategy<Value = PricingConfig> {
    (1usize..4).prop_flat_map(|dim| {
        (
            1usize..7,
            0u32..6,
            0.0..1.0f64,
            0.1..1.0f64,
            prop::collection::vec(-1.5..1.5f64, dim),
            -3.0..0.0f64,
            0.0..=1.0f64,
            prop_oneof![Just(ContextSpec::standard_gaussian(dim)), finite_context(dim)],
        )
            .prop_map(|(horizon, cap, low, gap, beta, beta0, delta, context)| PricingConfig {
                horizon,
                initial_capacity: cap,
                prices: [low, low + gap],
                beta,
                beta0,
                mixture_delta: delta,
                context,
                ..PricingConfig::default()
            })
    })
}

fn finite_config() -> impl Strategy<Value = PricingConfig> {
    config().prop_flat_map(|cfg| {
        let dim = cfg.dim();
        finite_context(dim).prop_map(move |context| PricingConfig { context, ..cfg.clone() })
    })
}

fn distortion() -> impl Strategy<Value = Distortion> {
    prop_oneof![
        Just(Distortion::Exact),
        (0.2..3.0f64).prop_map(|factor| Distortion::LogitScale { factor }),
        (-0.2..0.2f64, -0.2..0.2f64).prop_map(|(low, high)| Distortion::Shift { low, high, floor: 1e-3 }),
        (0.01..0.99f64).prop_map(|value| Distortion::Constant { value }),
    ]
}

fn quadrature(cfg: &PricingConfig) -> ContextQuadrature {
    ContextQuadrature::for_config(cfg, 400, 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // ── Environment ─────────────────────────────────────────────────────

    #[test]
    fn trajectories_follow_the_transition_and_reward_rules(cfg in config(), n in 1usize..20, seed: u64) {
        let data = simulate(&cfg, &PolicySpec::Behavior, n, seed).unwrap();
        prop_assert_eq!(data.trajectories.len(), n);
        for tr in &data.trajectories {
            prop_assert_eq!(tr.steps.len(), cfg.horizon);
            prop_assert_eq!(tr.steps[0].s, cfg.initial_capacity);
            for w in tr.steps.windows(2) {
                prop_assert_eq!(w[1].s, step(w[0].s, w[0].y));
                prop_assert!(w[1].s <= w[0].s);
            }
            for st in &tr.steps {
                prop_assert_eq!(st.r, cfg.reward(st.s, st.a, st.y));
            }
        }
    }

    #[test]
    fn simulation_is_deterministic_in_the_seed(cfg in config(), n in 1usize..10, seed: u64) {
        let a = simulate(&cfg, &PolicySpec::evaluation(&cfg), n, seed).unwrap();
        let b = simulate(&cfg, &PolicySpec::evaluation(&cfg), n, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn policy_action_probabilities_are_normalized(cfg in config(), scale in -3.0..3.0f64, seed: u64) {
        let data = simulate(&cfg, &PolicySpec::Behavior, 3, seed).unwrap();
        let policies = [
            PolicySpec::Behavior,
            PolicySpec::evaluation(&cfg),
            PolicySpec::StochasticLogistic { coef: cfg.beta.clone(), scale },
            PolicySpec::ConstantAction(Action::High),
        ];
        for tr in &data.trajectories {
            for (t, st) in tr.steps.iter().enumerate() {
                for p in &policies {
                    let hi = p.prob(&cfg, t, st.s, &st.x, Action::High);
                    let lo = p.prob(&cfg, t, st.s, &st.x, Action::Low);
                    prop_assert!((0.0..=1.0).contains(&hi) && (0.0..=1.0).contains(&lo));
                    prop_assert!((hi + lo - 1.0).abs() < 1e-15);
                }
            }
        }
    }

    // ── Nuisances ───────────────────────────────────────────────────────

    #[test]
    fn folds_partition_records_and_never_train_on_their_own_trajectory(n in 2usize..60, horizon in 1usize..8, seed: u64) {
        let folds = assign_folds(n, horizon, 2, seed).unwrap();
        let size0 = folds.traj_fold.iter().filter(|&&f| f == 0).count();
        prop_assert!(size0.abs_diff(n - size0) <= 1);
        for i in 0..n {
            for t in 0..horizon {
                let key = folds.key(i, t);
                let owners = folds.keys().filter(|&k| k == key).count();
                prop_assert_eq!(owners, 1);
                for t2 in 0..horizon {
                    prop_assert!(!folds.trains(key, i, t2));
                }
            }
        }
    }

    #[test]
    fn clipped_propensities_stay_in_bounds(p in 0.0..=1.0f64, eps in 0.0..0.5f64) {
        for a in Action::ALL {
            let v = clip_propensity(p, a, eps);
            prop_assert!(v >= eps - 1e-15 && v <= 1.0 - eps + 1e-15);
        }
        prop_assert!((clip_propensity(p, Action::High, eps) + clip_propensity(p, Action::Low, eps) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fitted_nuisances_respect_overlap_and_normalization(seed in 0u64..1000, flexible: bool, delta in 0.0..0.5f64) {
        let cfg = PricingConfig::default().with_delta(delta);
        let data = simulate(&cfg, &PolicySpec::Behavior, 60, seed).unwrap();
        let mode = if flexible { OutcomeMode::Flexible } else { OutcomeMode::Logistic };
        let settings = EstimationSettings::default();
        let fitted = fit(&cfg, &data, mode, seed, &settings).unwrap();
        let eps = settings.nuisance.clip_eps;
        for (i, tr) in data.trajectories.iter().enumerate() {
            for (t, st) in tr.steps.iter().enumerate() {
                for a in Action::ALL {
                    let e = fitted.nuisances.propensity(i, t, &st.x, a);
                    prop_assert!(e >= eps && e <= 1.0 - eps);
                    let total = fitted.nuisances.outcome_prob(i, t, &st.x, a, true) + fitted.nuisances.outcome_prob(i, t, &st.x, a, false);
                    prop_assert!((total - 1.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn logistic_fit_reaches_the_gradient_tolerance(
        rows in prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 2), 5..80),
        labels_seed: u64,
        lambda in 1e-3..1.0f64,
    ) {
        let labels: Vec<bool> = (0..rows.len()).map(|i| (labels_seed >> (i % 64)) & 1 == 1).collect();
        let opts = FitOptions { l2_lambda: lambda, ..FitOptions::default() };
        let model = fit_logistic(&rows, &labels, &opts).unwrap();
        let grad = objective_gradient(&model, &rows, &labels, lambda);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        prop_assert!(norm <= opts.tol, "gradient norm {}", norm);
        for r in &rows {
            let p = model.predict(r);
            prop_assert!(p > 0.0 && p < 1.0);
        }
    }

    // ── Marginal MDP ────────────────────────────────────────────────────

    #[test]
    fn scores_and_transitions_are_normalized(
        cfg in config(),
        n in 1usize..15,
        seed: u64,
        prop_d in distortion(),
        out_d in distortion(),
        eps in 0.0..0.2f64,
        coef_scale in -3.0..3.0f64,
    ) {
        let data = simulate(&cfg, &PolicySpec::Behavior, n, seed).unwrap();
        let nuisance = OracleNuisance { cfg: &cfg, propensity: prop_d, outcome: out_d, clip_eps: eps };
        let scores = dr_scores(&data, &nuisance, true);
        for e in &scores.entries {
            for a in 0..2 {
                prop_assert!((e.gamma[a][0] + e.gamma[a][1] - 1.0).abs() <= 1e-12);
            }
        }
        let policy = PolicySpec::StochasticLogistic { coef: cfg.beta.clone(), scale: coef_scale };
        let pi = |x: &[f64]| policy.prob_high(&cfg, 0, 1, x);
        for mode in [EstimatorMode::Dr, EstimatorMode::Ipw, EstimatorMode::Dm] {
            for clip in [ClipMode::Raw, ClipMode::ClipRenormalize] {
                if let Ok(tr) = estimate_transition(&pi, &scores, &data, mode, clip) {
                    prop_assert!((tr.probs[0] + tr.probs[1] - 1.0).abs() <= 1e-10);
                    if clip == ClipMode::ClipRenormalize {
                        prop_assert!(tr.probs.iter().all(|p| (0.0..=1.0).contains(p)));
                    }
                }
            }
        }
    }

    #[test]
    fn oracle_values_vanish_at_the_horizon_and_at_stockout(cfg in config(), scale in -2.0..2.0f64) {
        let quad = quadrature(&cfg);
        let policy = PolicySpec::StochasticLogistic { coef: cfg.beta.clone(), scale };
        let v = oracle_value(&policy, &cfg, &quad);
        for s in 0..=cfg.initial_capacity {
            prop_assert_eq!(v.get(cfg.horizon, s), 0.0);
        }
        for t in 0..=cfg.horizon {
            prop_assert_eq!(v.get(t, 0), 0.0);
        }
    }

    #[test]
    fn stationary_policy_values_are_nondecreasing_in_inventory(cfg in config(), scale in -2.0..2.0f64) {
        let quad = quadrature(&cfg);
        let policies = [PolicySpec::StochasticLogistic { coef: cfg.beta.clone(), scale }, PolicySpec::ConstantAction(Action::High)];
        for policy in &policies {
            let v = oracle_value(policy, &cfg, &quad);
            for t in 0..cfg.horizon {
                for s in 1..=cfg.initial_capacity {
                    prop_assert!(v.get(t, s) >= v.get(t, s - 1) - 1e-12);
                }
            }
        }
    }

    #[test]
    fn optimal_values_are_discretely_concave(cfg in finite_config()) {
        prop_assume!(cfg.initial_capacity >= 2);
        let v = oracle_optimal_values(&cfg, &quadrature(&cfg));
        prop_assert!(concavity_check(&v).unwrap().into_iter().all(|ok| ok));
    }

    // ── Learning ────────────────────────────────────────────────────────

    #[test]
    fn learned_thresholds_maximize_fitted_q_and_values_grow_with_inventory(
        seed in 0u64..500,
        delta in 0.0..0.4f64,
        out_d in distortion(),
        g in 2usize..30,
        mode_ix in 0usize..3,
    ) {
        let cfg = PricingConfig::default().with_delta(delta);
        let data = simulate(&cfg, &PolicySpec::Behavior, 40, seed).unwrap();
        let nuisance = OracleNuisance { cfg: &cfg, propensity: Distortion::Exact, outcome: out_d, clip_eps: 0.01 };
        let scores = dr_scores(&data, &nuisance, true);
        let ratio: Arc<dyn RatioFn> = Arc::new(OracleRatio::new(&cfg, out_d));
        let ratios: Vec<f64> = scores.entries.iter().map(|e| ratio.ratio(&data.trajectories[e.traj].steps[e.t].x)).collect();
        let grid = ThresholdGrid::from_ratios(&ratios, g).unwrap();
        let mode = [EstimatorMode::Dr, EstimatorMode::Ipw, EstimatorMode::Dm][mode_ix];
        let trs = grid_transitions(&ratios, &scores, &grid, mode, ClipMode::ClipRenormalize).unwrap();
        let learned = learn_from_transitions(&cfg, &trs, &grid, ratio, "oracle", mode);
        for t in 0..cfg.horizon {
            for s in 1..=cfg.initial_capacity {
                let q = &learned.q[t][s as usize];
                let chosen = grid.thresholds().iter().position(|&v| v == learned.theta.get(t, s)).unwrap();
                prop_assert!(q.iter().all(|&v| q[chosen] >= v));
                prop_assert!(q[..chosen].iter().all(|&v| v < q[chosen]));
                prop_assert!(learned.values.get(t, s) >= learned.values.get(t, s - 1) - 1e-12);
            }
        }
    }

    #[test]
    fn refining_the_grid_never_lowers_the_fitted_value(seed in 0u64..500, g in 2usize..20, extra in 1usize..20) {
        let cfg = PricingConfig::default().with_delta(0.2);
        let data = simulate(&cfg, &PolicySpec::Behavior, 40, seed).unwrap();
        let fitted = fit(&cfg, &data, OutcomeMode::Logistic, seed, &EstimationSettings::default()).unwrap();
        let ratio: Arc<dyn RatioFn> = Arc::new(OracleRatio::new(&cfg, Distortion::Exact));
        let ratios: Vec<f64> = fitted.scores.entries.iter().map(|e| ratio.ratio(&data.trajectories[e.traj].steps[e.t].x)).collect();
        let coarse = ThresholdGrid::from_ratios(&ratios, g).unwrap();
        let mut values = coarse.thresholds().to_vec();
        values.extend(ThresholdGrid::from_ratios(&ratios, g + extra).unwrap().thresholds());
        let fine = ThresholdGrid::from_values(values.into_iter().filter(|v| v.is_finite()).collect()).unwrap();
        prop_assert!(coarse.thresholds().iter().all(|v| fine.thresholds().contains(v)));
        let value = |grid: &ThresholdGrid| {
            let trs = grid_transitions(&ratios, &fitted.scores, grid, EstimatorMode::Dr, ClipMode::ClipRenormalize).unwrap();
            learn_from_transitions(&cfg, &trs, grid, Arc::clone(&ratio), "oracle", EstimatorMode::Dr).values.get(0, cfg.initial_capacity)
        };
        prop_assert!(value(&fine) >= value(&coarse) - 1e-12);
    }

    #[test]
    fn threshold_grids_are_strictly_increasing_with_sentinels(ratios in prop::collection::vec(0.0..5.0f64, 0..200), g in 2usize..120) {
        let grid = ThresholdGrid::from_ratios(&ratios, g).unwrap();
        let th = grid.thresholds();
        prop_assert_eq!(th[0], f64::NEG_INFINITY);
        prop_assert_eq!(*th.last().unwrap(), f64::INFINITY);
        prop_assert!(th.windows(2).all(|w| w[0] < w[1]));
    }

    // ── Analysis ────────────────────────────────────────────────────────

    #[test]
    fn unbiased_models_leave_thresholds_unchanged(theta in -5.0..5.0f64, eta0 in 1e-3..1.0f64) {
        prop_assert_eq!(biased_threshold(theta, 0.0, 0.0, eta0).unwrap(), theta);
    }

    #[test]
    fn threshold_bias_follows_the_sign_law(theta in 1e-3..5.0f64, eta0 in 1e-3..1.0f64, d0 in 1e-4..0.5f64, d1 in 1e-4..0.5f64) {
        prop_assert!(biased_threshold(theta, -d0, d1, eta0).unwrap() < theta);
        prop_assert!(biased_threshold(theta, d0, -d1, eta0).unwrap() > theta);
    }
}
