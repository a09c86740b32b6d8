mod oracles;

use oracles::{logistic, predictive_moments, rel_err, replay_rank_loss, win_probability_quadrature};
use prefrank_core::pairs::AnnotatorModel;
use prefrank_core::rater::{
    mc_win_probability, rank_loss, rank_loss_from_ratings, win_probability_transitive, LossVariant,
};
use prefrank_core::synth::{fit_rater, random_comparisons, rating_spearman, DatasetKind, RatingRun, SyntheticDataset};
use prefrank_core::{seed, EncoderConfig, EncoderModel, GaussianRating};
use rand::Rng;

fn random_rating(rng: &mut impl Rng) -> GaussianRating {
    GaussianRating {
        mu: rng.random_range(-3.0..3.0),
        sigma: rng.random_range(0.05..2.0),
    }
}

#[test]
fn gauss_hermite_integrates_gaussian_moments() {
    let nodes = oracles::gauss_hermite(32);
    let norm = std::f64::consts::PI.sqrt();
    let m0: f64 = nodes.iter().map(|(_, w)| w).sum::<f64>() / norm;
    let m2: f64 = nodes.iter().map(|(t, w)| w * 2.0 * t * t).sum::<f64>() / norm;
    let m4: f64 = nodes.iter().map(|(t, w)| w * 4.0 * t.powi(4)).sum::<f64>() / norm;
    assert!((m0 - 1.0).abs() < 1e-12);
    assert!((m2 - 1.0).abs() < 1e-12);
    assert!((m4 - 3.0).abs() < 1e-10);
}

#[test]
fn monte_carlo_win_probability_matches_quadrature() {
    let mut rng = seed::rng(31);
    for k in 0..20u64 {
        let (a, b) = (random_rating(&mut rng), random_rating(&mut rng));
        let mc = mc_win_probability(a, b, 100_000, seed::derive(k, 1), seed::derive(k, 2)).unwrap();
        let q = win_probability_quadrature(a.mu, a.sigma, b.mu, b.sigma, 32);
        let se = mc.std_error();
        assert!((mc.p - q).abs() <= 3.0 * se, "pair {k}: mc {} quad {q} se {se}", mc.p);
    }
}

#[test]
fn upper_bound_dominates_averaged_loss() {
    let mut rng = seed::rng(5);
    for k in 0..100u64 {
        let n = rng.random_range(1..12);
        let pairs: Vec<_> = (0..n)
            .map(|_| {
                let s = [0.0, 0.5, 1.0][rng.random_range(0..3)];
                (random_rating(&mut rng), random_rating(&mut rng), s)
            })
            .collect();
        let mc = rank_loss_from_ratings(&pairs, 8, k, LossVariant::Mc).unwrap();
        let ub = rank_loss_from_ratings(&pairs, 8, k, LossVariant::Ub).unwrap();
        assert_eq!(mc.samples_a, ub.samples_a);
        assert!(ub.value >= mc.value, "batch {k}: ub {} < mc {}", ub.value, mc.value);
    }
}

#[test]
fn loss_replays_from_recorded_samples() {
    let mut rng = seed::rng(8);
    let pairs: Vec<_> = (0..7)
        .map(|i| (random_rating(&mut rng), random_rating(&mut rng), [0.0, 0.5, 1.0][i % 3]))
        .collect();
    let scores: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    for variant in [LossVariant::Mc, LossVariant::Ub] {
        let loss = rank_loss_from_ratings(&pairs, 16, 3, variant).unwrap();
        let replay = replay_rank_loss(&loss.samples_a, &loss.samples_b, &scores, variant == LossVariant::Ub);
        assert!(rel_err(loss.value, replay, 1e-12) < 1e-10, "{variant:?}: {} vs {replay}", loss.value);
    }
}

#[test]
fn encoder_loss_replays_from_recorded_samples() {
    let ds = SyntheticDataset::generate(DatasetKind::Linear, 20, 3, 2).unwrap();
    let cs = random_comparisons(&ds, 15, AnnotatorModel { tie_margin: 0.1, ..Default::default() }, 2).unwrap();
    let model = EncoderModel::new(EncoderConfig {
        input_dim: 3,
        hidden: vec![8],
        ..Default::default()
    })
    .unwrap();
    let scores: Vec<f64> = cs.iter().map(|c| c.score_a()).collect();
    for variant in [LossVariant::Mc, LossVariant::Ub] {
        let loss = rank_loss(&model, &ds.items, &cs, 6, 9, variant).unwrap();
        let replay = replay_rank_loss(&loss.samples_a, &loss.samples_b, &scores, variant == LossVariant::Ub);
        assert!(rel_err(loss.value, replay, 1e-12) < 1e-10);
    }
}

#[test]
fn predictive_table_replays_from_passes() {
    let ds = SyntheticDataset::generate(DatasetKind::Radial, 15, 2, 3).unwrap();
    let model = EncoderModel::new(EncoderConfig {
        input_dim: 2,
        hidden: vec![16, 16],
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    // the output layer starts at zero; give it weights so passes differ
    let mut rng = seed::rng(4);
    let params = model
        .network()
        .params()
        .iter()
        .map(|p| {
            let d = (0..p.len()).map(|_| rng.random_range(-0.5..0.5)).collect();
            prefrank_core::diffcore::Tensor::new(p.shape().to_vec(), d).unwrap()
        })
        .collect();
    let mut model = model;
    model.set_params(params).unwrap();
    let rows = ds.items.feature_rows();
    let passes = model.sample_passes(&rows, 20, 77).unwrap();
    let table = model.predict_table(&rows, 20, 77).unwrap();
    let mut spread = 0.0;
    for (p, est) in passes.iter().zip(&table) {
        let recorded: Vec<(f64, f64)> = p.iter().map(|r| (r.mu, r.sigma)).collect();
        let (mean, epi, ale) = predictive_moments(&recorded);
        assert!(rel_err(est.mean, mean, 1e-9) < 1e-9);
        assert!((est.epistemic - epi).abs() < 1e-9 * (1.0 + epi.abs()));
        assert!(rel_err(est.aleatoric, ale, 1e-12) < 1e-10);
        assert_eq!(est.total, est.epistemic + est.aleatoric);
        spread += epi;
    }
    assert!(spread > 0.0);
}

#[test]
fn deterministic_limits() {
    let tight = |mu| GaussianRating { mu, sigma: 1e-9 };
    let p = mc_win_probability(tight(2.0), tight(0.0), 64, 1, 2).unwrap().p;
    assert!((p - logistic(2.0)).abs() < 1e-8);
    let equal = [(tight(0.7), tight(0.7), 1.0)];
    for variant in [LossVariant::Mc, LossVariant::Ub] {
        let loss = rank_loss_from_ratings(&equal, 32, 0, variant).unwrap();
        assert!((loss.value - std::f64::consts::LN_2).abs() < 1e-8);
    }
    let t = win_probability_transitive(GaussianRating { mu: 1.0, sigma: 0.6 }, GaussianRating { mu: 0.0, sigma: 0.8 });
    assert!((t - logistic(1.0)).abs() < 1e-15);
}

#[test]
fn one_dimensional_toy_recovers_order() {
    let ds = SyntheticDataset::generate(DatasetKind::Linear, 50, 1, 12).unwrap();
    let cs = random_comparisons(&ds, 200, AnnotatorModel::default(), 12).unwrap();
    let run = RatingRun {
        encoder: EncoderConfig {
            learning_rate: 1e-2,
            ..Default::default()
        },
        train_steps: 800,
        max_epochs: 200,
        batch_size: 64,
    };
    let (model, report) = fit_rater(&ds, &cs, &run, 12).unwrap();
    assert!(report.epoch_losses.len() <= 200);
    let rho = rating_spearman(&model, &ds).unwrap();
    assert!(rho >= 0.95, "spearman {rho}");
}
