mod common;

use common::{toy_disagreement, Toy};
use latentdrive::config::{IntrinsicConfig, IntrinsicKind, WmConfig};
use latentdrive::intrinsic::{disagreement, Intrinsic, Normalizer, PairBatch, Rnd};
use latentdrive::world_model::WorldModel;
use latentdrive_autodiff::seeded;
use proptest::prelude::*;
use rand::Rng;

fn population_variance(preds: &[Vec<f64>]) -> f64 {
    let k = preds.len() as f64;
    let d = preds[0].len();
    let mut total = 0.0;
    for i in 0..d {
        let mean = preds.iter().map(|p| p[i]).sum::<f64>() / k;
        total += preds.iter().map(|p| (p[i] - mean).powi(2)).sum::<f64>() / k;
    }
    total / d as f64
}

#[test]
fn disagreement_matches_brute_force_over_random_ensembles() {
    let mut rng = seeded(20);
    for _ in 0..1000 {
        let k = rng.gen_range(2..=8);
        let d = rng.gen_range(2..=64);
        let preds: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let raw: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let rows: Vec<&[f64]> = preds.iter().map(Vec::as_slice).collect();
        let got = disagreement(&rows);
        let want = population_variance(&preds);
        assert!((got - want).abs() <= 1e-12, "K={k} d={d}: {got} vs {want}");
    }
}

proptest! {
    #[test]
    fn disagreement_ignores_member_order(
        preds in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 5), 2..7),
        rot in 0usize..7,
    ) {
        let mut shuffled = preds.clone();
        shuffled.rotate_left(rot % preds.len());
        shuffled.reverse();
        let a: Vec<&[f64]> = preds.iter().map(Vec::as_slice).collect();
        let b: Vec<&[f64]> = shuffled.iter().map(Vec::as_slice).collect();
        prop_assert!((disagreement(&a) - disagreement(&b)).abs() <= 1e-15);
    }

    #[test]
    fn normalizer_variance_stays_non_negative(stream in prop::collection::vec(-1e3f64..1e3, 1..200), rate in 1e-4f64..1.0) {
        let mut n = Normalizer::new(rate, 1e-8);
        for g in stream {
            let out = n.normalize(g);
            prop_assert!(n.var >= 0.0);
            prop_assert!(out.is_finite());
        }
    }
}

#[test]
fn normalizer_follows_the_scalar_recurrence_exactly() {
    let mut rng = seeded(21);
    for rate in [1e-3, 1e-2, 1e-1] {
        let eps = 1e-8;
        let mut n = Normalizer::new(rate, eps);
        let (mut mu, mut var) = (0.0f64, 1.0f64);
        for _ in 0..10_000 {
            let g: f64 = rng.gen_range(-50.0..50.0);
            mu = (1.0 - rate) * mu + rate * g;
            var = (1.0 - rate) * var + rate * (g - mu) * (g - mu);
            let want = (g - mu) / (var.sqrt() + eps);
            assert_eq!(n.normalize(g), want);
            assert_eq!((n.mean, n.var), (mu, var));
        }
    }
}

#[test]
fn converged_ensemble_agrees_on_deterministic_transitions() {
    let r = toy_disagreement(true, 5, 3000, 1);
    assert!(r < 1e-4, "{r}");
}

#[test]
fn ambiguous_transitions_keep_members_apart() {
    let r = toy_disagreement(false, 5, 3000, 1);
    assert!(r > 0.0, "{r}");
    let (u, a) = Toy::all_pairs();
    assert_eq!(a.len() * Toy::FEAT, u.len());
}

#[test]
fn intrinsic_training_never_touches_the_world_model() {
    let wm_cfg = WmConfig { embed: 16, deter: 8, vars: 4, classes: 4, hidden: 16, decoder_hidden: 16, ..WmConfig::default() };
    let mut rng = seeded(22);
    let wm = WorldModel::new(&wm_cfg, 16, &mut rng).unwrap();
    let ep = common::fixed_episode(6);
    let feats = wm.infer(&[&ep[..]], &mut rng).unwrap();
    let sum = wm.params.checksum();
    for kind in IntrinsicKind::ARMS {
        let cfg = IntrinsicConfig { kind, hidden: 16, ensemble_size: 3, rnd_out: 8, ..IntrinsicConfig::default() };
        let mut m = Intrinsic::new(&cfg, wm.feature_dim(), wm_cfg.vars, wm_cfg.classes, 3).unwrap();
        m.train(&PairBatch::from_features(&feats)).unwrap();
        assert_eq!(wm.params.checksum(), sum, "{kind:?}");
        assert!(!wm.params.has_grad(), "{kind:?}");
    }
}

#[test]
fn rnd_distillation_error_falls_on_a_single_input() {
    let mut rnd = Rnd::new(6, 32, 8, Normalizer::new(0.01, 1e-8), 1e-3, 23);
    let u: Vec<f64> = [0.3, -0.1, 0.8, 0.0, 0.5, -0.7].repeat(8);
    let target = rnd.target_output(&u[..6], 1).unwrap();
    let mut losses = Vec::new();
    for _ in 0..400 {
        losses.push(rnd.train(&u, 8).unwrap().0);
    }
    let windows: Vec<f64> = losses.chunks(50).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for pair in windows.windows(2) {
        assert!(pair[1] < pair[0], "{windows:?}");
    }
    for _ in 0..10_000 {
        assert_eq!(rnd.target_output(&u[..6], 1).unwrap(), target);
    }
}
