use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use tatl_core::data::{generate, GenConfig, Preset};
use tatl_core::losses::LossConfig;
use tatl_core::maskops::Attribute;
use tatl_core::nnet::{NetConfig, Segmenter};
use tatl_core::stability::{
    bound_score, compare_inits, empirical_risk, gamma_hat, hessian_vec, spectral_norm, BoundInputs, GammaStats,
};
use tatl_core::training::{attribute_items, TrainItem};

fn tiny_net() -> (Segmenter, NetConfig) {
    let cfg = NetConfig {
        base_channels: 2,
        depth: 1,
        seed: 3,
        ..NetConfig::default()
    };
    (Segmenter::new(cfg).unwrap(), cfg)
}

fn tiny_items(n: usize) -> Vec<TrainItem> {
    let ds = generate(&GenConfig::preset(Preset::Uniform, n, 8, 2)).unwrap();
    attribute_items(&ds, Attribute::P).unwrap()
}

fn quick_inputs() -> BoundInputs {
    BoundInputs {
        power_iters: 4,
        ..BoundInputs::default()
    }
}

#[test]
fn quadratic_hessian_is_recovered() {
    let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, -1.0, 0.0, -1.0, 2.0]);
    let grad = |w: &[f64]| Ok((&a * DVector::from_column_slice(w)).as_slice().to_vec());
    for v in [[1.0, 0.0, 0.0], [0.3, -2.0, 5.0]] {
        let hv = hessian_vec(grad, &[0.5, -1.0, 2.0], &v, 1e-4).unwrap();
        let exact = &a * DVector::from_column_slice(&v);
        for (x, y) in hv.iter().zip(exact.iter()) {
            assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
    }
    let exact = a.clone().symmetric_eigen().eigenvalues.amax();
    let est = spectral_norm(|v: &[f64]| hessian_vec(grad, &[0.0; 3], v, 1e-4), 3, 500, 1e-12, 1).unwrap();
    assert!((est - exact).abs() / exact < 1e-6);
}

#[test]
fn gamma_is_order_independent() {
    let (net, cfg) = tiny_net();
    let params = tatl_core::nnet::init_params(&cfg).unwrap();
    let items = tiny_items(6);
    let mut reversed = items.clone();
    reversed.reverse();
    let loss = LossConfig::default();
    let a = gamma_hat(&net, &params, &items, &loss, &quick_inputs()).unwrap();
    let b = gamma_hat(&net, &params, &reversed, &loss, &quick_inputs()).unwrap();
    assert!((a.gamma_hat - b.gamma_hat).abs() <= 1e-12);
    assert!((a.empirical_risk - b.empirical_risk).abs() <= 1e-12);
    assert_eq!(a.empirical_risk, empirical_risk(&net, &params, &items, &loss).unwrap());
}

#[test]
fn identical_candidates_tie_break_by_name() {
    let (net, cfg) = tiny_net();
    let params = tatl_core::nnet::init_params(&cfg).unwrap();
    let items = tiny_items(3);
    let cands = vec![("b".to_string(), params.clone()), ("a".to_string(), params)];
    let report = compare_inits(&net, &cands, &items, &LossConfig::default(), &quick_inputs()).unwrap();
    assert_eq!(report.argmin, "a");
    assert_eq!(report.entries[0].bound_score, report.entries[1].bound_score);
    assert!(!report.assumptions.is_empty());
}

#[test]
fn single_candidate_warns_about_log_k() {
    let (net, cfg) = tiny_net();
    let params = tatl_core::nnet::init_params(&cfg).unwrap();
    let inputs = BoundInputs { k: 1, ..quick_inputs() };
    let report = compare_inits(&net, &[("only".into(), params)], &tiny_items(2), &LossConfig::default(), &inputs).unwrap();
    assert_eq!(report.argmin, "only");
    assert_eq!(report.entries[0].bound_score, 0.0);
    assert!(report.warnings.iter().any(|w| w.contains("ln K")));
}

#[test]
fn clamp_is_reported() {
    let g = GammaStats::from_parts(&[0.01; 16], 0.01).unwrap();
    assert!(g.clamped);
    assert!(bound_score(g.gamma_plus, g.gamma_minus, g.empirical_risk, 16, 4, 0.01).unwrap().is_finite());
}

#[test]
fn report_serializes_expected_fields() {
    let (net, cfg) = tiny_net();
    let params = tatl_core::nnet::init_params(&cfg).unwrap();
    let report = compare_inits(&net, &[("r".into(), params)], &tiny_items(2), &LossConfig::default(), &quick_inputs()).unwrap();
    let json = serde_json::to_value(&report).unwrap();
    let entry = &json["entries"][0];
    for key in [
        "candidate", "empirical_risk", "mean_hessian_norm", "gamma_hat", "gamma_plus", "gamma_minus", "clamped",
        "bound_score", "m", "c", "K", "seed",
    ] {
        assert!(entry.get(key).is_some(), "missing {key}");
    }
}

proptest! {
    #[test]
    fn score_grows_with_risk(gm in 0.01f64..20.0, extra in 0.0f64..2.0, m in 1usize..50_000,
                             k in 2usize..8, r in 0.0f64..0.9, dr in 1e-6f64..0.1) {
        let gp = gm + extra;
        prop_assert!(bound_score(gp, gm, r, m, k, 0.01).unwrap() < bound_score(gp, gm, r + dr, m, k, 0.01).unwrap());
    }

    #[test]
    fn score_shrinks_with_more_samples(g in 0.5f64..20.0, r in 0.01f64..1.0, m in 1usize..10_000) {
        let s = |m: usize| {
            let spread = (m as f64).powf(-0.25);
            bound_score(g + spread, (g - spread).max(1e-6), r, m, 4, 0.01).unwrap()
        };
        prop_assert!(s(m * 16) < s(m));
    }
}

/// In the small-curvature regime the `1 + 1/(c g-)` factor dominates, so
/// more curvature lowers the score.
#[test]
fn score_can_fall_as_curvature_rises() {
    let at = |h: f64| {
        let g = h + 0.5f64.sqrt();
        bound_score(g + 0.1, g - 0.1, 0.5, 10_000, 4, 0.01).unwrap()
    };
    assert!(at(2.0) < at(1.0));
}
