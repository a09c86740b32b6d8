//! Desk-scale rating experiments. Every grid point is an independent job with
//! its own derived seed, so results do not depend on scheduling.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{spearman, DatasetKind, SynthError, SyntheticDataset};
use crate::data::{Comparison, ItemId};
use crate::pairs::{
    pseudo_label, sample_pairs, AnnotatorModel, Annotator, PseudoLabel, PseudoPolicy,
    SamplerConfig, Strategy,
};
use crate::rater::{train, EncoderConfig, EncoderModel, TrainOptions, TrainReport};
use crate::seed;

const TAG_DATA: u64 = 0xda7a;
const TAG_PAIRS: u64 = 0x9a12;
const TAG_ANNOTATE: u64 = 0xa220;
const TAG_TRAIN: u64 = 0x7a19;
const TAG_ROUND: u64 = 0x2049;
const TAG_PREDICT: u64 = 0x93ed;
const TAG_LABEL_NOISE: u64 = 0x1abe;

/// How a rater is fitted inside an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RatingRun {
    /// `input_dim` and `seed` are filled in per job.
    pub encoder: EncoderConfig,
    /// Target optimizer steps; converted to whole epochs.
    pub train_steps: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
}

impl Default for RatingRun {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            train_steps: 600,
            max_epochs: 200,
            batch_size: 64,
        }
    }
}

impl RatingRun {
    pub fn options(&self, pairs: usize) -> TrainOptions {
        TrainOptions::for_steps(self.train_steps, pairs, self.batch_size, self.max_epochs)
    }
}

/// Trains a fresh rater on `comparisons`.
pub fn fit_rater(
    ds: &SyntheticDataset,
    comparisons: &[Comparison],
    run: &RatingRun,
    seed: u64,
) -> Result<(EncoderModel, TrainReport), SynthError> {
    let cfg = EncoderConfig {
        input_dim: ds.items.dim(),
        seed,
        ..run.encoder.clone()
    };
    let mut model = EncoderModel::new(cfg)?;
    let report = train(&mut model, &ds.items, comparisons, &run.options(comparisons.len()))?;
    Ok((model, report))
}

/// Spearman between deterministic mean ratings and the hidden attribute.
pub fn rating_spearman(model: &EncoderModel, ds: &SyntheticDataset) -> Result<f64, SynthError> {
    let mu = model.mean_ratings(&ds.items.feature_rows())?;
    let omega = ds.truth.values_for(&ds.items.ids())?;
    spearman(&mu, &omega)
}

/// Labels pairs through the oracle.
pub fn annotate_pairs(
    ds: &SyntheticDataset,
    pairs: &[(ItemId, ItemId)],
    annotator: &mut Annotator,
) -> Result<Vec<Comparison>, SynthError> {
    pairs
        .iter()
        .map(|&(a, b)| {
            let o = annotator.annotate(ds.truth.omega(a)?, ds.truth.omega(b)?);
            Ok(Comparison::new(a, b, o)?)
        })
        .collect()
}

/// `m` uniform pairs (with repetition), annotated.
pub fn random_comparisons(
    ds: &SyntheticDataset,
    m: usize,
    annotator: AnnotatorModel,
    seed: u64,
) -> Result<Vec<Comparison>, SynthError> {
    let pool = ds.items.ids();
    let pairs = sample_pairs(&SamplerConfig::default(), &pool, None, m, seed::derive(seed, TAG_PAIRS))?;
    let mut ann = Annotator::new(AnnotatorModel {
        seed: seed::derive(seed, TAG_ANNOTATE),
        ..annotator
    })?;
    annotate_pairs(ds, &pairs.query, &mut ann)
}

/// Annotator whose tie margin and noise are given as fractions of the
/// attribute range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelativeAnnotator {
    pub tie_margin: f64,
    pub noise_half_width: f64,
}

impl Default for RelativeAnnotator {
    fn default() -> Self {
        Self {
            tie_margin: 0.0,
            noise_half_width: 0.0,
        }
    }
}

impl RelativeAnnotator {
    pub fn absolute(&self, ds: &SyntheticDataset) -> AnnotatorModel {
        let r = ds.truth.range();
        AnnotatorModel {
            tie_margin: self.tie_margin * r,
            noise_half_width: self.noise_half_width * r,
            seed: 0,
        }
    }
}

fn single_run(
    kind: DatasetKind,
    n: usize,
    d: usize,
    m: usize,
    annotator: RelativeAnnotator,
    run: &RatingRun,
    seed: u64,
) -> Result<(SyntheticDataset, f64), SynthError> {
    let ds = SyntheticDataset::generate(kind, n, d, seed::derive(seed, TAG_DATA))?;
    let cs = random_comparisons(&ds, m, annotator.absolute(&ds), seed)?;
    let (model, _) = fit_rater(&ds, &cs, run, seed::derive(seed, TAG_TRAIN))?;
    let rho = rating_spearman(&model, &ds)?;
    Ok((ds, rho))
}

// ---------------------------------------------------------------------------
// Budget curve

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetCurveConfig {
    pub kind: DatasetKind,
    pub dim: usize,
    pub ns: Vec<usize>,
    /// Budgets are `multiplier * n` random pairs.
    pub multipliers: Vec<f64>,
    pub threshold: f64,
    pub run: RatingRun,
}

impl Default for BudgetCurveConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Linear,
            dim: 2,
            ns: vec![100, 500, 1000],
            multipliers: vec![0.1, 0.2, 0.3, 0.5, 1.0, 2.0, 3.0, 5.0],
            threshold: 0.9,
            run: RatingRun::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub n: usize,
    pub multiplier: f64,
    pub m: usize,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetCurve {
    pub rows: Vec<BudgetRow>,
    /// Smallest tested budget reaching the threshold, per `n`.
    pub minimal: Vec<(usize, Option<usize>)>,
    /// Least-squares slope of `log m*` against `log n`.
    pub exponent: Option<f64>,
}

pub fn pairs_budget_curve(cfg: &BudgetCurveConfig, seed: u64) -> Result<BudgetCurve, SynthError> {
    let grid: Vec<(usize, f64)> = cfg
        .ns
        .iter()
        .flat_map(|&n| cfg.multipliers.iter().map(move |&k| (n, k)))
        .collect();
    let rows = grid
        .par_iter()
        .enumerate()
        .map(|(j, &(n, k))| {
            let m = (k * n as f64).round() as usize;
            let (_, rho) = single_run(
                cfg.kind,
                n,
                cfg.dim,
                m,
                RelativeAnnotator::default(),
                &cfg.run,
                seed::derive(seed, j as u64),
            )?;
            Ok(BudgetRow { n, multiplier: k, m, rho })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    let minimal: Vec<(usize, Option<usize>)> = cfg
        .ns
        .iter()
        .map(|&n| {
            let m = rows
                .iter()
                .filter(|r| r.n == n && r.rho >= cfg.threshold)
                .map(|r| r.m)
                .min();
            (n, m)
        })
        .collect();
    let exponent = if minimal.len() >= 2 && minimal.iter().all(|(_, m)| m.is_some_and(|m| m > 0)) {
        let pts: Vec<(f64, f64)> = minimal
            .iter()
            .map(|&(n, m)| ((n as f64).ln(), (m.unwrap() as f64).ln()))
            .collect();
        Some(slope(&pts))
    } else {
        None
    };
    Ok(BudgetCurve {
        rows,
        minimal,
        exponent,
    })
}

fn slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

// ---------------------------------------------------------------------------
// Noise resistance and margin sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseCurveConfig {
    pub kind: DatasetKind,
    pub dim: usize,
    pub n: usize,
    pub budget_multiplier: f64,
    /// Fractions of the attribute range.
    pub margins: Vec<f64>,
    pub run: RatingRun,
}

impl Default for NoiseCurveConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Linear,
            dim: 2,
            n: 200,
            budget_multiplier: 5.0,
            margins: vec![0.0, 0.05, 0.1, 0.2, 0.35],
            run: RatingRun::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub margin: f64,
    pub rho_rating: f64,
    pub rho_label: f64,
    pub tie_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseCurve {
    pub rows: Vec<NoiseRow>,
}

impl NoiseCurve {
    fn first_last(&self) -> Option<(&NoiseRow, &NoiseRow)> {
        let lo = self.rows.iter().min_by(|a, b| a.margin.total_cmp(&b.margin))?;
        let hi = self.rows.iter().max_by(|a, b| a.margin.total_cmp(&b.margin))?;
        Some((lo, hi))
    }

    /// Drop in rating correlation from the smallest to the largest margin.
    pub fn rating_degradation(&self) -> f64 {
        self.first_last().map_or(0.0, |(lo, hi)| lo.rho_rating - hi.rho_rating)
    }

    pub fn label_degradation(&self) -> f64 {
        self.first_last().map_or(0.0, |(lo, hi)| lo.rho_label - hi.rho_label)
    }
}

/// For each margin `M`, annotators perturb attributes by `Uniform(±M/2)` of
/// the range and call ties within `M`. The label curve is the correlation of
/// `Ω` with `Ω` perturbed by the same noise.
pub fn noise_resistance_curve(cfg: &NoiseCurveConfig, seed: u64) -> Result<NoiseCurve, SynthError> {
    margin_grid(cfg, seed, |m| RelativeAnnotator {
        tie_margin: m,
        noise_half_width: m / 2.0,
    })
}

/// Tie margins only, no attribute noise.
pub fn margin_sweep(cfg: &NoiseCurveConfig, seed: u64) -> Result<NoiseCurve, SynthError> {
    margin_grid(cfg, seed, |m| RelativeAnnotator {
        tie_margin: m,
        noise_half_width: 0.0,
    })
}

fn margin_grid(
    cfg: &NoiseCurveConfig,
    seed: u64,
    annotator: impl Fn(f64) -> RelativeAnnotator + Sync,
) -> Result<NoiseCurve, SynthError> {
    // one dataset for the whole curve so the rows differ only by annotation
    let ds = SyntheticDataset::generate(cfg.kind, cfg.n, cfg.dim, seed::derive(seed, TAG_DATA))?;
    let omega = ds.truth.values_for(&ds.items.ids())?;
    let range = ds.truth.range();
    let m = (cfg.budget_multiplier * cfg.n as f64).round() as usize;
    let rows = cfg
        .margins
        .par_iter()
        .enumerate()
        .map(|(j, &margin)| {
            let job = seed::derive(seed, j as u64 + 1);
            let rel = annotator(margin);
            let cs = random_comparisons(&ds, m, rel.absolute(&ds), job)?;
            let ties = cs.iter().filter(|c| c.is_tie()).count();
            let (model, _) = fit_rater(&ds, &cs, &cfg.run, seed::derive(job, TAG_TRAIN))?;
            let rho_rating = rating_spearman(&model, &ds)?;
            let w = rel.noise_half_width * range;
            let mut rng = seed::rng_for(job, TAG_LABEL_NOISE);
            let noisy: Vec<f64> = omega
                .iter()
                .map(|&o| if w > 0.0 { o + rng.random_range(-w..=w) } else { o })
                .collect();
            Ok(NoiseRow {
                margin,
                rho_rating,
                rho_label: spearman(&omega, &noisy)?,
                tie_fraction: if cs.is_empty() { 0.0 } else { ties as f64 / cs.len() as f64 },
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    Ok(NoiseCurve { rows })
}

// ---------------------------------------------------------------------------
// Active collection and the strategy table

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActiveConfig {
    pub sampler: SamplerConfig,
    /// Collection rounds; the first round is always uniform.
    pub rounds: usize,
    pub pseudo: PseudoPolicy,
    pub annotator: RelativeAnnotator,
    pub run: RatingRun,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            rounds: 4,
            pseudo: PseudoPolicy::default(),
            annotator: RelativeAnnotator::default(),
            run: RatingRun::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActiveOutcome {
    /// Comparisons answered by the oracle.
    pub queried: Vec<Comparison>,
    /// Comparisons labeled by the model itself.
    pub pseudo: Vec<Comparison>,
    /// Oracle queries actually made.
    pub queries: u64,
    pub model: EncoderModel,
}

impl ActiveOutcome {
    pub fn training_set(&self) -> Vec<Comparison> {
        self.queried.iter().chain(&self.pseudo).copied().collect()
    }
}

/// Spends `budget` oracle queries over several rounds, retraining from
/// scratch before each strategy-driven round, then fits the final rater.
pub fn collect_active(
    ds: &SyntheticDataset,
    cfg: &ActiveConfig,
    budget: usize,
    seed: u64,
) -> Result<ActiveOutcome, SynthError> {
    cfg.pseudo.validate()?;
    let pool = ds.items.ids();
    let rows = ds.items.feature_rows();
    let rounds = cfg.rounds.max(1);
    let mut ann = Annotator::new(AnnotatorModel {
        seed: seed::derive(seed, TAG_ANNOTATE),
        ..cfg.annotator.absolute(ds)
    })?;
    let mut queried = Vec::with_capacity(budget);
    let mut pseudo = Vec::new();
    for r in 0..rounds {
        let count = budget * (r + 1) / rounds - budget * r / rounds;
        if count == 0 {
            continue;
        }
        let round_seed = seed::derive(seed::derive(seed, TAG_ROUND), r as u64);
        let (sampler, model, ratings) = if r == 0 || cfg.sampler.strategy == Strategy::Random {
            (SamplerConfig { strategy: Strategy::Random, ..cfg.sampler.clone() }, None, None)
        } else {
            let train_set: Vec<Comparison> = queried.iter().chain(&pseudo).copied().collect();
            let (model, _) = fit_rater(ds, &train_set, &cfg.run, seed::derive(round_seed, TAG_TRAIN))?;
            let ratings = model.mean_ratings(&rows)?;
            (cfg.sampler.clone(), Some(model), Some(ratings))
        };
        let picked = sample_pairs(&sampler, &pool, ratings.as_deref(), count, round_seed)?;
        queried.extend(annotate_pairs(ds, &picked.query, &mut ann)?);
        if let Some(model) = &model {
            for &(a, b) in &picked.pseudo {
                let f = (ds.items.features(a)?, ds.items.features(b)?);
                if let PseudoLabel::Label(c) = pseudo_label(model, (a, b), f, &cfg.pseudo)? {
                    pseudo.push(c);
                }
            }
        }
    }
    let train_set: Vec<Comparison> = queried.iter().chain(&pseudo).copied().collect();
    let (model, _) = fit_rater(ds, &train_set, &cfg.run, seed::derive(seed, TAG_TRAIN))?;
    Ok(ActiveOutcome {
        queried,
        pseudo,
        queries: ann.queries(),
        model,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyTableConfig {
    pub kind: DatasetKind,
    pub dim: usize,
    pub n: usize,
    /// Oracle queries per strategy. Defaults to `2n` when absent.
    pub budget: Option<usize>,
    pub strategies: Vec<Strategy>,
    pub active: ActiveConfig,
}

impl Default for StrategyTableConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Linear,
            dim: 2,
            n: 200,
            budget: None,
            strategies: Strategy::ALL.to_vec(),
            active: ActiveConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: Strategy,
    pub budget: usize,
    pub queries: u64,
    pub pseudo_pairs: usize,
    pub rho: f64,
}

/// Each strategy's own ratings are scored against the oracle; all strategies
/// share the dataset and the first uniform round's seed.
pub fn strategy_table(cfg: &StrategyTableConfig, seed: u64) -> Result<Vec<StrategyRow>, SynthError> {
    let ds = SyntheticDataset::generate(cfg.kind, cfg.n, cfg.dim, seed::derive(seed, TAG_DATA))?;
    let budget = cfg.budget.unwrap_or(2 * cfg.n);
    cfg.strategies
        .par_iter()
        .map(|&strategy| {
            let active = ActiveConfig {
                sampler: SamplerConfig {
                    strategy,
                    ..cfg.active.sampler.clone()
                },
                ..cfg.active.clone()
            };
            let out = collect_active(&ds, &active, budget, seed)?;
            Ok(StrategyRow {
                strategy,
                budget,
                queries: out.queries,
                pseudo_pairs: out.pseudo.len(),
                rho: rating_spearman(&out.model, &ds)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Uncertainty shape

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UncertaintyConfig {
    pub kind: DatasetKind,
    pub dim: usize,
    pub n: usize,
    pub budget_multiplier: f64,
    pub annotator: RelativeAnnotator,
    pub run: RatingRun,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Radial,
            dim: 2,
            n: 300,
            budget_multiplier: 5.0,
            annotator: RelativeAnnotator::default(),
            run: RatingRun::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyShape {
    /// Mean predictive std per attribute tercile, low to high.
    pub tercile_std: [f64; 3],
    /// Mean epistemic and aleatoric variance per tercile.
    pub tercile_epistemic: [f64; 3],
    pub tercile_aleatoric: [f64; 3],
    pub rho: f64,
}

impl UncertaintyShape {
    pub fn middle(&self) -> f64 {
        self.tercile_std[1]
    }

    pub fn extremes(&self) -> f64 {
        (self.tercile_std[0] + self.tercile_std[2]) / 2.0
    }
}

/// Trains a rater and reports its predictive std by attribute tercile.
pub fn uncertainty_shape(cfg: &UncertaintyConfig, seed: u64) -> Result<UncertaintyShape, SynthError> {
    let ds = SyntheticDataset::generate(cfg.kind, cfg.n, cfg.dim, seed::derive(seed, TAG_DATA))?;
    let m = (cfg.budget_multiplier * cfg.n as f64).round() as usize;
    let cs = random_comparisons(&ds, m, cfg.annotator.absolute(&ds), seed)?;
    let (model, _) = fit_rater(&ds, &cs, &cfg.run, seed::derive(seed, TAG_TRAIN))?;
    let est = model.predict_table(
        &ds.items.feature_rows(),
        model.config().predict_passes,
        seed::derive(seed, TAG_PREDICT),
    )?;
    let omega = ds.truth.values_for(&ds.items.ids())?;
    let mut order: Vec<usize> = (0..omega.len()).collect();
    order.sort_by(|&a, &b| omega[a].total_cmp(&omega[b]));
    let n = order.len();
    let tercile = |f: &dyn Fn(usize) -> f64| {
        let mut out = [0.0; 3];
        for (t, slot) in out.iter_mut().enumerate() {
            let part = &order[t * n / 3..(t + 1) * n / 3];
            *slot = part.iter().map(|&i| f(i)).sum::<f64>() / part.len().max(1) as f64;
        }
        out
    };
    let mean: Vec<f64> = est.iter().map(|e| e.mean).collect();
    Ok(UncertaintyShape {
        tercile_std: tercile(&|i| est[i].std()),
        tercile_epistemic: tercile(&|i| est[i].epistemic),
        tercile_aleatoric: tercile(&|i| est[i].aleatoric),
        rho: spearman(&mean, &omega)?,
    })
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_run() -> RatingRun {
        RatingRun {
            encoder: EncoderConfig {
                hidden: vec![16],
                learning_rate: 1e-2,
                ..Default::default()
            },
            train_steps: 150,
            max_epochs: 100,
            batch_size: 32,
        }
    }

    #[test]
    fn zero_budget_gives_uninformative_ratings() {
        let ds = SyntheticDataset::generate(DatasetKind::Linear, 30, 2, 0).unwrap();
        let (model, _) = fit_rater(&ds, &[], &quick_run(), 1).unwrap();
        assert_eq!(rating_spearman(&model, &ds).unwrap(), 0.0);
    }

    #[test]
    fn hard_pseudo_accounts_queries_exactly() {
        let ds = SyntheticDataset::generate(DatasetKind::Linear, 40, 2, 2).unwrap();
        let cfg = ActiveConfig {
            sampler: SamplerConfig::new(Strategy::HardPseudo),
            rounds: 2,
            run: quick_run(),
            ..Default::default()
        };
        let out = collect_active(&ds, &cfg, 30, 5).unwrap();
        assert_eq!(out.queries, 30);
        assert_eq!(out.queried.len(), 30);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn label_curve_is_exact_at_zero_margin() {
        let cfg = NoiseCurveConfig {
            n: 30,
            budget_multiplier: 1.0,
            margins: vec![0.0],
            run: quick_run(),
            ..Default::default()
        };
        let c = noise_resistance_curve(&cfg, 3).unwrap();
        assert_eq!(c.rows[0].rho_label, 1.0);
        assert_eq!(c.rows[0].tie_fraction, 0.0);
    }
}
