mod oracles;

use oracles::{rel_err, softplus};
use prefrank_core::congen::{
    conditioning, corrupt, evaluate, optimal_discriminator_check, train_gan, CorruptionSource, Discriminator,
    DoptConfig, FrozenRater, GanConfig, GanSnapshot, GenPairBatch, Generator, PairSource, REC_SIGMA_FLOOR,
};
use prefrank_core::diffcore::{Mlp, Tensor};
use prefrank_core::synth::{random_comparisons, DatasetKind, SyntheticDataset};
use prefrank_core::{seed, Comparison, EncoderConfig, EncoderModel};
use rand::Rng;

fn randomize(net: &Mlp, seed_value: u64, scale: f64) -> Vec<Tensor> {
    let mut rng = seed::rng(seed_value);
    net.params()
        .iter()
        .map(|p| {
            let data = (0..p.len()).map(|_| rng.random_range(-scale..scale)).collect();
            Tensor::new(p.shape().to_vec(), data).unwrap()
        })
        .collect()
}

struct Setup {
    ds: SyntheticDataset,
    comparisons: Vec<Comparison>,
    rater: FrozenRater,
}

fn setup() -> Setup {
    let ds = SyntheticDataset::generate(DatasetKind::Ring, 40, 2, 4).unwrap();
    let comparisons = random_comparisons(&ds, 80, Default::default(), 4).unwrap();
    let mut model = EncoderModel::new(EncoderConfig {
        input_dim: 2,
        hidden: vec![6],
        ..Default::default()
    })
    .unwrap();
    let p = randomize(model.network(), 1, 0.8);
    model.set_params(p).unwrap();
    let rater = FrozenRater::freeze(model, &ds.items, 2).unwrap();
    Setup { ds, comparisons, rater }
}

fn batch(s: &Setup, cfg: &GanConfig, size: usize) -> GenPairBatch {
    PairSource::new(&s.rater, &s.comparisons)
        .unwrap()
        .sample(&s.ds.items, &s.rater, size, cfg.corruption, &mut seed::rng(11))
}

fn rows(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

#[test]
fn corruption_has_requested_moments() {
    let mut rng = seed::rng(3);
    let (y, sigma, n) = (1.5, 0.7, 100_000);
    let draws: Vec<f64> = (0..n).map(|_| corrupt(y, sigma, &mut rng)).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((mean - y).abs() <= 4.0 * sigma / (n as f64).sqrt());
    assert!((var / (sigma * sigma) - 1.0).abs() < 0.05);
    assert_eq!(corrupt(y, 0.0, &mut rng), y);
}

#[test]
fn zero_discriminator_is_indifferent() {
    let s = setup();
    let cfg = GanConfig::default();
    let gen = Generator::new(2, &[5], 1).unwrap();
    let mut disc = Discriminator::new(3, &[5], 2).unwrap();
    let zeros = disc.network().params().iter().map(|p| Tensor::new(p.shape().to_vec(), vec![0.0; p.len()]).unwrap()).collect();
    disc.set_params(zeros).unwrap();
    let b = batch(&s, &cfg, 16);
    let cond = conditioning(&cfg, &s.rater, &b, 5);
    let l = evaluate(&cfg, &gen, &disc, &s.rater, &b, &cond).unwrap();
    assert!((l.loss_d - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    assert!((l.adversarial - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn objective_matches_plain_evaluation() {
    let s = setup();
    for (corruption, rec_sigma) in [(CorruptionSource::Off, None), (CorruptionSource::Total, None), (CorruptionSource::Total, Some(0.5))] {
        let cfg = GanConfig {
            corruption,
            label_noise: 0.2,
            rec_sigma,
            lambda_rec: 0.7,
            lambda_cyc: 3.0,
            ..Default::default()
        };
        let mut gen = Generator::new(2, &[5], 1).unwrap();
        gen.set_params(randomize(gen.network(), 2, 0.5)).unwrap();
        let mut disc = Discriminator::new(3, &[5], 3).unwrap();
        disc.set_params(randomize(disc.network(), 4, 0.5)).unwrap();
        let b = batch(&s, &cfg, 12);
        let cond = conditioning(&cfg, &s.rater, &b, 9);
        if corruption == CorruptionSource::Off {
            let clean: Vec<f64> = b.target_rating.iter().map(|&y| s.rater.normalize(y)).collect();
            assert_eq!(cond.fake, clean);
        }
        let l = evaluate(&cfg, &gen, &disc, &s.rater, &b, &cond).unwrap();

        let n = b.len() as f64;
        let y_norm: Vec<f64> = b.target_rating.iter().map(|&y| s.rater.normalize(y)).collect();
        let fake = gen.generate(&rows(&b.source), &y_norm).unwrap();
        let with_label = |x: &[Vec<f64>], y: &[f64]| -> Vec<Vec<f64>> {
            x.iter().zip(y).map(|(r, v)| r.iter().copied().chain([*v]).collect()).collect()
        };
        let logits = |input: Vec<Vec<f64>>| -> Vec<f64> {
            let p = disc.probabilities(&rows(&input)).unwrap();
            p.iter().map(|p| (p / (1.0 - p)).ln()).collect()
        };
        let z_real = logits(with_label(&b.target, &cond.real));
        let z_fake = logits(with_label(&fake, &cond.fake));
        let loss_d = z_real.iter().map(|z| softplus(-z)).sum::<f64>() / n + z_fake.iter().map(|z| softplus(*z)).sum::<f64>() / n;
        let adversarial = z_fake.iter().map(|z| softplus(-z)).sum::<f64>() / n;

        let out = s.rater.model().network().eval(&Tensor::from_rows(&rows(&fake)).unwrap(), None).unwrap();
        let fixed = rec_sigma.map(|v| v * s.rater.rating_std());
        let rec = (0..b.len())
            .map(|i| {
                let var = fixed.unwrap_or(b.target_sigma[i]).max(REC_SIGMA_FLOOR).powi(2);
                0.5 * (out.row(i)[0] - b.target_rating[i]).powi(2) / var + 0.5 * var.ln()
            })
            .sum::<f64>()
            / n;

        let y_src: Vec<f64> = b.source_rating.iter().map(|&y| s.rater.normalize(y)).collect();
        let back = gen.generate(&rows(&fake), &y_src).unwrap();
        let cycle = back
            .iter()
            .zip(&b.source)
            .map(|(r, x)| r.iter().zip(x).map(|(u, v)| (u - v).abs()).sum::<f64>())
            .sum::<f64>()
            / n;

        // logits pass through a logistic and back, so allow rounding there
        assert!(rel_err(l.loss_d, loss_d, 1e-9) < 1e-8, "{} vs {loss_d}", l.loss_d);
        assert!(rel_err(l.adversarial, adversarial, 1e-9) < 1e-8);
        assert!(rel_err(l.reconstruction, rec, 1e-12) < 1e-10, "{} vs {rec}", l.reconstruction);
        assert!(rel_err(l.cycle, cycle, 1e-12) < 1e-10);
        let total = adversarial + cfg.lambda_rec * rec + cfg.lambda_cyc * cycle;
        assert!(rel_err(l.loss_g, total, 1e-9) < 1e-8);
    }
}

#[test]
fn untrained_generator_is_identity() {
    let s = setup();
    let cfg = GanConfig::default();
    let gen = Generator::new(2, &[8, 8], 1).unwrap();
    let disc = Discriminator::new(3, &[8], 2).unwrap();
    let b = batch(&s, &cfg, 10);
    let y: Vec<f64> = b.target_rating.iter().map(|&v| s.rater.normalize(v)).collect();
    assert_eq!(gen.generate(&rows(&b.source), &y).unwrap(), b.source);
    let cond = conditioning(&cfg, &s.rater, &b, 1);
    assert_eq!(evaluate(&cfg, &gen, &disc, &s.rater, &b, &cond).unwrap().cycle, 0.0);
}

#[test]
fn training_replays_from_seed() {
    let s = setup();
    let cfg = GanConfig {
        steps: 30,
        batch_size: 16,
        generator_hidden: vec![8],
        discriminator_hidden: vec![8],
        label_noise: 0.1,
        seed: 21,
        ..Default::default()
    };
    let a = train_gan(&cfg, &s.ds.items, &s.comparisons, &s.rater).unwrap();
    let b = train_gan(&cfg, &s.ds.items, &s.comparisons, &s.rater).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.generator, b.generator);
    let other = train_gan(&GanConfig { seed: 22, ..cfg.clone() }, &s.ds.items, &s.comparisons, &s.rater).unwrap();
    assert_ne!(a.trace, other.trace);

    let json = serde_json::to_string(&a.snapshot(&cfg)).unwrap();
    let snap: GanSnapshot = serde_json::from_str(&json).unwrap();
    assert_eq!(snap.config, cfg);
    let (gen, disc) = snap.restore().unwrap();
    assert_eq!(gen, a.generator);
    assert_eq!(disc, a.discriminator);
}

#[test]
fn discriminator_reaches_density_ratio() {
    let mut rng = seed::rng(16);
    let mut p: Vec<f64> = (0..16).map(|_| rng.random_range(0.05..1.0)).collect();
    let mut q: Vec<f64> = (0..16).map(|_| rng.random_range(0.05..1.0)).collect();
    for v in [&mut p, &mut q] {
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
    }
    let report = optimal_discriminator_check(&p, &q, &DoptConfig::default()).unwrap();
    for i in 0..16 {
        let oracle = p[i] / (p[i] + q[i]);
        assert!((report.trained[i] - oracle).abs() <= 0.05, "bin {i}: {} vs {oracle}", report.trained[i]);
    }
}
