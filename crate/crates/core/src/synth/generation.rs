//! Conditional-generation experiments on synthetic data: train a rater,
//! freeze it, train the generator, and score edits both with the rater and
//! against the hidden attribute.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{
    fit_rater, median, random_comparisons, DatasetKind, RatingRun, RelativeAnnotator, SynthError,
    SyntheticDataset,
};
use crate::congen::{
    edit, edit_sweep, evaluate_generator, sweep_monotonicity, train_gan, CorruptionSource,
    FrozenRater, GanConfig, GanEvaluation, GanRun,
};
use crate::rater::EncoderConfig;
use crate::seed;

const TAG_DATA: u64 = 0x6da7;
const TAG_PAIRS: u64 = 0x6a12;
const TAG_RATER: u64 = 0x6a7e;
const TAG_FREEZE: u64 = 0x6f2e;
const TAG_GAN: u64 = 0x6a11;
const TAG_EVAL: u64 = 0x6e7a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub kind: DatasetKind,
    pub dim: usize,
    pub n: usize,
    /// Random comparisons per item.
    pub budget_multiplier: f64,
    pub annotator: RelativeAnnotator,
    pub rater: RatingRun,
    pub gan: GanConfig,
    pub eval_pairs: usize,
    pub sweep_items: usize,
    pub sweep_points: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Ring,
            dim: 2,
            n: 500,
            budget_multiplier: 5.0,
            annotator: RelativeAnnotator::default(),
            rater: RatingRun {
                encoder: EncoderConfig {
                    learning_rate: 1e-2,
                    ..Default::default()
                },
                train_steps: 800,
                max_epochs: 10_000,
                batch_size: 64,
            },
            gan: GanConfig::default(),
            eval_pairs: 500,
            sweep_items: 20,
            sweep_points: 21,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub evaluation: GanEvaluation,
    /// Median `|Ω(G(x, y′)) − Ω(x′)|` over the evaluation pairs, in units of
    /// the attribute std; `y′` is the rating of `x′`.
    pub oracle_error: f64,
    /// Median per-item Spearman of an edit sweep.
    pub monotonicity: f64,
}

/// Everything a generation run produced.
pub struct GenerationRun {
    pub dataset: SyntheticDataset,
    pub rater: FrozenRater,
    pub gan: GanRun,
    pub report: GenerationReport,
}

/// Full pipeline for one seed.
pub fn generation_run(cfg: &GenerationConfig, seed: u64) -> Result<GenerationRun, SynthError> {
    let ds = SyntheticDataset::generate(cfg.kind, cfg.n, cfg.dim, seed::derive(seed, TAG_DATA))?;
    let m = (cfg.budget_multiplier * cfg.n as f64).round() as usize;
    let cs = random_comparisons(&ds, m, cfg.annotator.absolute(&ds), seed::derive(seed, TAG_PAIRS))?;
    let (model, _) = fit_rater(&ds, &cs, &cfg.rater, seed::derive(seed, TAG_RATER))?;
    let rater = FrozenRater::freeze(model, &ds.items, seed::derive(seed, TAG_FREEZE))?;
    let gan_cfg = GanConfig {
        seed: seed::derive(seed, TAG_GAN),
        ..cfg.gan.clone()
    };
    let gan = train_gan(&gan_cfg, &ds.items, &cs, &rater)?;
    let eval_seed = seed::derive(seed, TAG_EVAL);
    let evaluation = evaluate_generator(&gan.generator, &rater, &ds.items, cfg.eval_pairs, eval_seed)?;
    let oracle_error = oracle_error(&ds, &rater, &gan, cfg.eval_pairs, eval_seed)?;
    let ids = ds.items.ids();
    let step = (ids.len() / cfg.sweep_items.max(1)).max(1);
    let sweep_ids: Vec<_> = ids.iter().step_by(step).take(cfg.sweep_items).copied().collect();
    let sweep = edit_sweep(&gan.generator, &rater, &ds.items, &sweep_ids, cfg.sweep_points)?;
    let report = GenerationReport {
        evaluation,
        oracle_error,
        monotonicity: sweep_monotonicity(&sweep),
    };
    Ok(GenerationRun {
        dataset: ds,
        rater,
        gan,
        report,
    })
}

fn oracle_error(
    ds: &SyntheticDataset,
    rater: &FrozenRater,
    gan: &GanRun,
    pairs: usize,
    seed: u64,
) -> Result<f64, SynthError> {
    let items = ds.items.items();
    let omega = ds.truth.values_for(&ds.items.ids())?;
    let mean = omega.iter().sum::<f64>() / omega.len() as f64;
    let std = (omega.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / omega.len() as f64).sqrt();
    let mut rng = seed::rng_for(seed, 1);
    let mut errs = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let i = rng.random_range(0..items.len());
        let j = rng.random_range(0..items.len());
        let out = edit(&gan.generator, rater, &items[i].features, rater.ratings()[j])?;
        errs.push((ds.truth.attribute_at(&out)? - omega[j]).abs() / std);
    }
    Ok(median(&errs))
}

/// Bayesian rater with corruption against a deterministic rater without it,
/// both trained with the same noise in the real-branch conditioning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessConfig {
    pub base: GenerationConfig,
    /// Real-branch conditioning noise, in rating-std units.
    pub label_noise: f64,
    pub bayesian_dropout: f64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            base: GenerationConfig::default(),
            label_noise: 0.5,
            bayesian_dropout: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    /// Rater-measured error, own rating-std units.
    pub attribute_error: f64,
    pub oracle_error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub seed: u64,
    pub bayesian: ArmResult,
    pub deterministic: ArmResult,
}

/// Both arms on the same dataset, comparisons and GAN seed.
pub fn robustness_comparison(cfg: &RobustnessConfig, seed: u64) -> Result<RobustnessRow, SynthError> {
    let arm = |dropout: f64, corruption: CorruptionSource| -> Result<ArmResult, SynthError> {
        let mut c = cfg.base.clone();
        c.rater.encoder.dropout = dropout;
        c.gan.corruption = corruption;
        c.gan.label_noise = cfg.label_noise;
        let r = generation_run(&c, seed)?.report;
        Ok(ArmResult {
            attribute_error: r.evaluation.attribute_error,
            oracle_error: r.oracle_error,
        })
    };
    Ok(RobustnessRow {
        seed,
        bayesian: arm(cfg.bayesian_dropout, CorruptionSource::Total)?,
        deterministic: arm(0.0, CorruptionSource::Off)?,
    })
}
