//! Subcommand bodies. Each one reads its inputs, computes, and writes every
//! artifact through [`Outputs`].

use std::path::Path;

use anyhow::{bail, Context};
use rand::Rng;
use serde::{Deserialize, Serialize};

use prefrank_core::congen::{
    edit_sweep, evaluate_generator, CongenError, optimal_discriminator_check, sweep_monotonicity, train_gan, DoptConfig,
    FrozenRater, GanConfig, GanSnapshot,
};
use prefrank_core::data::{format_f64, read_comparisons, write_comparisons};
use prefrank_core::pairs::PairsError;
use prefrank_core::rater::{train, RaterError};
use prefrank_core::synth::{
    expected_risk, margin_sweep, noise_resistance_curve, pairs_budget_curve, random_comparisons, spearman,
    strategy_table, BudgetCurveConfig, DatasetKind, GroundTruth, NoiseCurve, NoiseCurveConfig, RatingRun,
    RelativeAnnotator, StrategyTableConfig, SyntheticDataset,
};
use prefrank_core::{seed, Comparison, EncoderConfig, EncoderModel, ItemId, ItemTable, RatingEstimate};

use crate::config::ConfigError;
use crate::manifest::Outputs;

const TAG_DATA: u64 = 0xda7a;
const TAG_PAIRS: u64 = 0x9a12;
const TAG_TRAIN: u64 = 0x7a1e;
const TAG_PREDICT: u64 = 0x93ed;
const TAG_FREEZE: u64 = 0xf2ee;
const TAG_EVAL: u64 = 0xe7a1;
const TAG_BINS: u64 = 0xb125;

/// Semantic checks that go beyond the JSON shape; failures exit as config errors.
pub trait Checked {
    fn check(&self) -> Result<(), ConfigError> {
        Ok(())
    }
}

fn rater_field(prefix: &str, e: RaterError) -> ConfigError {
    match e {
        RaterError::Config { field, reason } => ConfigError::new(format!("{prefix}{field}"), reason),
        other => ConfigError::new(prefix.trim_end_matches('.'), other),
    }
}

fn pairs_field(prefix: &str, e: PairsError) -> ConfigError {
    match e {
        PairsError::Config { field, reason } => ConfigError::new(format!("{prefix}{field}"), reason),
        other => ConfigError::new(prefix.trim_end_matches('.'), other),
    }
}

fn positive(path: &str, v: usize) -> Result<(), ConfigError> {
    if v == 0 {
        return Err(ConfigError::new(path, "must be >= 1"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV helpers

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    Ok(w.into_inner()?)
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

pub fn read_items(path: &Path) -> anyhow::Result<ItemTable> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    ItemTable::read_csv(f).with_context(|| format!("reading {}", path.display()))
}

fn read_log(path: &Path) -> anyhow::Result<Vec<Comparison>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_comparisons(f).with_context(|| format!("reading {}", path.display()))
}

fn read_model(path: &Path) -> anyhow::Result<EncoderModel> {
    let s = std::fs::read_to_string(path).with_context(|| format!("opening {}", path.display()))?;
    EncoderModel::from_json(&s).with_context(|| format!("reading {}", path.display()))
}

#[derive(Deserialize)]
struct OracleRow {
    id: u64,
    omega: f64,
}

fn read_oracle(path: &Path) -> anyhow::Result<GroundTruth> {
    let mut rd = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut values = Vec::new();
    for row in rd.deserialize::<OracleRow>() {
        let r = row.with_context(|| format!("reading {}", path.display()))?;
        values.push((ItemId(r.id), r.omega));
    }
    Ok(GroundTruth::new(values)?)
}

fn rating_csv(ids: &[ItemId], est: &[RatingEstimate]) -> anyhow::Result<Vec<u8>> {
    csv_bytes(
        &header(&["id", "mean", "epistemic", "aleatoric", "total"]),
        ids.iter().zip(est).map(|(id, e)| {
            vec![
                id.to_string(),
                format_f64(e.mean),
                format_f64(e.epistemic),
                format_f64(e.aleatoric),
                format_f64(e.total),
            ]
        }),
    )
}

// ---------------------------------------------------------------------------
// gen-data

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataConfig {
    pub kind: DatasetKind,
    pub n: usize,
    pub dim: usize,
    /// Simulated comparisons, as a multiple of `n`.
    pub budget_multiplier: f64,
    pub annotator: RelativeAnnotator,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Linear,
            n: 500,
            dim: 2,
            budget_multiplier: 5.0,
            annotator: RelativeAnnotator::default(),
        }
    }
}

impl Checked for GenDataConfig {
    fn check(&self) -> Result<(), ConfigError> {
        if self.n < 2 {
            return Err(ConfigError::new("n", "must be >= 2"));
        }
        positive("dim", self.dim)?;
        if self.kind == DatasetKind::Ring && self.dim != 2 {
            return Err(ConfigError::new("dim", "ring datasets are 2-D"));
        }
        if !(self.budget_multiplier >= 0.0 && self.budget_multiplier.is_finite()) {
            return Err(ConfigError::new("budget_multiplier", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Writes `items.csv`, `oracle.csv` and `comparisons.csv`.
pub fn gen_data(cfg: &GenDataConfig, seed_value: u64, out: &mut Outputs) -> anyhow::Result<()> {
    let ds = SyntheticDataset::generate(cfg.kind, cfg.n, cfg.dim, seed::derive(seed_value, TAG_DATA))?;
    let mut items = Vec::new();
    ds.items.write_csv(&mut items)?;
    out.write("items.csv", &items)?;

    let ids = ds.items.ids();
    let omega = ds.truth.values_for(&ids)?;
    let oracle = csv_bytes(
        &header(&["id", "omega"]),
        ids.iter().zip(&omega).map(|(id, w)| vec![id.to_string(), format_f64(*w)]),
    )?;
    out.write("oracle.csv", &oracle)?;

    let m = (cfg.budget_multiplier * cfg.n as f64).round() as usize;
    let cs = random_comparisons(&ds, m, cfg.annotator.absolute(&ds), seed::derive(seed_value, TAG_PAIRS))?;
    let mut log = Vec::new();
    write_comparisons(&mut log, &cs)?;
    out.write("comparisons.csv", &log)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train-rater / eval-rater

impl Checked for RatingRun {
    fn check(&self) -> Result<(), ConfigError> {
        positive("batch_size", self.batch_size)?;
        self.encoder.validate().map_err(|e| rater_field("encoder.", e))
    }
}

pub fn train_rater(
    cfg: &RatingRun,
    seed_value: u64,
    items_path: &Path,
    log_path: &Path,
    out: &mut Outputs,
) -> anyhow::Result<()> {
    let items = read_items(items_path)?;
    let log = read_log(log_path)?;
    if log.is_empty() {
        bail!("{} holds no comparisons", log_path.display());
    }
    let mut model = EncoderModel::new(EncoderConfig {
        input_dim: items.dim(),
        seed: seed::derive(seed_value, TAG_TRAIN),
        ..cfg.encoder.clone()
    })?;
    let report = train(&mut model, &items, &log, &cfg.options(log.len()))?;
    out.write("model.json", model.to_json().as_bytes())?;
    let losses = csv_bytes(
        &header(&["epoch", "loss"]),
        report
            .epoch_losses
            .iter()
            .enumerate()
            .map(|(e, l)| vec![e.to_string(), format_f64(*l)]),
    )?;
    out.write("train_loss.csv", &losses)?;
    let est = model.predict_table(
        &items.feature_rows(),
        model.config().predict_passes,
        seed::derive(seed_value, TAG_PREDICT),
    )?;
    out.write("ratings.csv", &rating_csv(&items.ids(), &est)?)?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalRaterConfig {
    /// Stochastic passes per item; the model's own setting when absent.
    pub passes: Option<usize>,
}

impl Checked for EvalRaterConfig {
    fn check(&self) -> Result<(), ConfigError> {
        if let Some(p) = self.passes {
            positive("passes", p)?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct RaterEvaluation {
    n: usize,
    spearman: f64,
    risk: u64,
    pairs: u64,
    normalized_risk: f64,
}

pub fn eval_rater(
    cfg: &EvalRaterConfig,
    seed_value: u64,
    model_path: &Path,
    items_path: &Path,
    oracle_path: &Path,
    out: &mut Outputs,
) -> anyhow::Result<()> {
    let model = read_model(model_path)?;
    let items = read_items(items_path)?;
    let truth = read_oracle(oracle_path)?;
    let ids = items.ids();
    let passes = cfg.passes.unwrap_or(model.config().predict_passes);
    let est = model.predict_table(&items.feature_rows(), passes, seed::derive(seed_value, TAG_PREDICT))?;
    out.write("ratings.csv", &rating_csv(&ids, &est)?)?;
    let mean: Vec<f64> = est.iter().map(|e| e.mean).collect();
    let omega = truth.values_for(&ids)?;
    let risk = expected_risk(&ids, &mean, &truth)?;
    out.write_json(
        "eval.json",
        &RaterEvaluation {
            n: ids.len(),
            spearman: spearman(&mean, &omega)?,
            risk: risk.risk,
            pairs: risk.pairs,
            normalized_risk: risk.normalized(),
        },
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Experiment grids

impl Checked for BudgetCurveConfig {
    fn check(&self) -> Result<(), ConfigError> {
        if self.ns.is_empty() {
            return Err(ConfigError::new("ns", "must not be empty"));
        }
        if self.multipliers.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(ConfigError::new("multipliers", "must be finite and > 0"));
        }
        self.run.check().map_err(|e| ConfigError::new(format!("run.{}", e.path), e.message))
    }
}

#[derive(Serialize)]
struct BudgetSummary {
    minimal: Vec<(usize, Option<usize>)>,
    exponent: Option<f64>,
}

pub fn pairs_curve(cfg: &BudgetCurveConfig, seed_value: u64, out: &mut Outputs) -> anyhow::Result<()> {
    let curve = pairs_budget_curve(cfg, seed_value)?;
    let rows = csv_bytes(
        &header(&["n", "multiplier", "m", "rho"]),
        curve
            .rows
            .iter()
            .map(|r| vec![r.n.to_string(), format_f64(r.multiplier), r.m.to_string(), format_f64(r.rho)]),
    )?;
    out.write("pairs_curve.csv", &rows)?;
    out.write_json(
        "summary.json",
        &BudgetSummary {
            minimal: curve.minimal,
            exponent: curve.exponent,
        },
    )?;
    Ok(())
}

impl Checked for NoiseCurveConfig {
    fn check(&self) -> Result<(), ConfigError> {
        if self.margins.is_empty() {
            return Err(ConfigError::new("margins", "must not be empty"));
        }
        if self.margins.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
            return Err(ConfigError::new("margins", "must be finite and >= 0"));
        }
        self.run.check().map_err(|e| ConfigError::new(format!("run.{}", e.path), e.message))
    }
}

#[derive(Serialize)]
struct NoiseSummary {
    rating_degradation: f64,
    label_degradation: f64,
}

fn write_noise(curve: &NoiseCurve, name: &str, out: &mut Outputs) -> anyhow::Result<()> {
    let rows = csv_bytes(
        &header(&["margin", "rho_rating", "rho_label", "tie_fraction"]),
        curve.rows.iter().map(|r| {
            vec![
                format_f64(r.margin),
                format_f64(r.rho_rating),
                format_f64(r.rho_label),
                format_f64(r.tie_fraction),
            ]
        }),
    )?;
    out.write(name, &rows)?;
    out.write_json(
        "summary.json",
        &NoiseSummary {
            rating_degradation: curve.rating_degradation(),
            label_degradation: curve.label_degradation(),
        },
    )?;
    Ok(())
}

pub fn noise_curve(cfg: &NoiseCurveConfig, seed_value: u64, out: &mut Outputs) -> anyhow::Result<()> {
    write_noise(&noise_resistance_curve(cfg, seed_value)?, "noise_curve.csv", out)
}

pub fn margin_sweep_cmd(cfg: &NoiseCurveConfig, seed_value: u64, out: &mut Outputs) -> anyhow::Result<()> {
    write_noise(&margin_sweep(cfg, seed_value)?, "margin_sweep.csv", out)
}

impl Checked for StrategyTableConfig {
    fn check(&self) -> Result<(), ConfigError> {
        if self.strategies.is_empty() {
            return Err(ConfigError::new("strategies", "must not be empty"));
        }
        positive("active.rounds", self.active.rounds)?;
        self.active.pseudo.validate().map_err(|e| pairs_field("active.pseudo.", e))?;
        self.active.run.check().map_err(|e| ConfigError::new(format!("active.run.{}", e.path), e.message))
    }
}

pub fn strategy_table_cmd(cfg: &StrategyTableConfig, seed_value: u64, out: &mut Outputs) -> anyhow::Result<()> {
    let rows = strategy_table(cfg, seed_value)?;
    let bytes = csv_bytes(
        &header(&["strategy", "budget", "queries", "pseudo_pairs", "rho"]),
        rows.iter().map(|r| {
            vec![
                r.strategy.to_string(),
                r.budget.to_string(),
                r.queries.to_string(),
                r.pseudo_pairs.to_string(),
                format_f64(r.rho),
            ]
        }),
    )?;
    out.write("strategy_table.csv", &bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Conditional generator

/// Generator weights plus the seed the rater was frozen with, so that later
/// commands rebuild the same rating table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanFile {
    pub freeze_seed: u64,
    pub gan: GanSnapshot,
}

impl Checked for GanConfig {
    fn check(&self) -> Result<(), ConfigError> {
        self.validate().map_err(|e| match e {
            CongenError::Config { field, reason } => ConfigError::new(field, reason),
            other => ConfigError::new("<config>", other),
        })
    }
}

pub fn train_cgen(
    cfg: &GanConfig,
    seed_value: u64,
    items_path: &Path,
    log_path: &Path,
    model_path: &Path,
    out: &mut Outputs,
) -> anyhow::Result<()> {
    let items = read_items(items_path)?;
    let log = read_log(log_path)?;
    let freeze_seed = seed::derive(seed_value, TAG_FREEZE);
    let rater = FrozenRater::freeze(read_model(model_path)?, &items, freeze_seed)?;
    let run = train_gan(cfg, &items, &log, &rater)?;
    out.write_json(
        "gan.json",
        &GanFile {
            freeze_seed,
            gan: run.snapshot(cfg),
        },
    )?;
    let trace = csv_bytes(
        &header(&["step", "loss_d", "loss_g", "adversarial", "reconstruction", "cycle"]),
        run.trace.iter().map(|t| {
            vec![
                t.step.to_string(),
                format_f64(t.loss_d),
                format_f64(t.loss_g),
                format_f64(t.adversarial),
                format_f64(t.reconstruction),
                format_f64(t.cycle),
            ]
        }),
    )?;
    out.write("trace.csv", &trace)?;
    Ok(())
}

fn load_generator(
    gan_path: &Path,
    model_path: &Path,
    items: &ItemTable,
) -> anyhow::Result<(prefrank_core::congen::Generator, FrozenRater)> {
    let s = std::fs::read_to_string(gan_path).with_context(|| format!("opening {}", gan_path.display()))?;
    let file: GanFile = serde_json::from_str(&s).with_context(|| format!("reading {}", gan_path.display()))?;
    let (gen, _) = file.gan.restore()?;
    let rater = FrozenRater::freeze(read_model(model_path)?, items, file.freeze_seed)?;
    if gen.dim() != items.dim() {
        bail!("generator is {}-D, items are {}-D", gen.dim(), items.dim());
    }
    Ok((gen, rater))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalCgenConfig {
    /// Random (source, target) pairs scored.
    pub pairs: usize,
}

impl Default for EvalCgenConfig {
    fn default() -> Self {
        Self { pairs: 500 }
    }
}

impl Checked for EvalCgenConfig {
    fn check(&self) -> Result<(), ConfigError> {
        positive("pairs", self.pairs)
    }
}

pub fn eval_cgen(
    cfg: &EvalCgenConfig,
    seed_value: u64,
    gan_path: &Path,
    model_path: &Path,
    items_path: &Path,
    out: &mut Outputs,
) -> anyhow::Result<()> {
    let items = read_items(items_path)?;
    let (gen, rater) = load_generator(gan_path, model_path, &items)?;
    let eval = evaluate_generator(&gen, &rater, &items, cfg.pairs, seed::derive(seed_value, TAG_EVAL))?;
    out.write_json("eval.json", &eval)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditSweepConfig {
    /// Items swept, spread evenly over the table.
    pub items: usize,
    /// Targets per item across the rating range.
    pub points: usize,
}

impl Default for EditSweepConfig {
    fn default() -> Self {
        Self { items: 20, points: 21 }
    }
}

impl Checked for EditSweepConfig {
    fn check(&self) -> Result<(), ConfigError> {
        positive("items", self.items)?;
        positive("points", self.points)
    }
}

#[derive(Serialize)]
struct SweepSummary {
    items: usize,
    points: usize,
    monotonicity: f64,
}

pub fn edit_sweep_cmd(
    cfg: &EditSweepConfig,
    gan_path: &Path,
    model_path: &Path,
    items_path: &Path,
    out: &mut Outputs,
) -> anyhow::Result<()> {
    let items = read_items(items_path)?;
    let (gen, rater) = load_generator(gan_path, model_path, &items)?;
    let all = items.ids();
    let k = cfg.items.min(all.len());
    let picked: Vec<ItemId> = (0..k).map(|i| all[i * all.len() / k]).collect();
    let rows = edit_sweep(&gen, &rater, &items, &picked, cfg.points)?;
    let mut cols = header(&["id", "y_target", "realized"]);
    cols.extend((0..items.dim()).map(|j| format!("feat_{j}")));
    let bytes = csv_bytes(
        &cols,
        rows.iter().map(|r| {
            let mut v = vec![r.id.to_string(), format_f64(r.y_target), format_f64(r.realized)];
            v.extend(r.output.iter().map(|x| format_f64(*x)));
            v
        }),
    )?;
    out.write("edit_sweep.csv", &bytes)?;
    out.write_json(
        "summary.json",
        &SweepSummary {
            items: k,
            points: cfg.points,
            monotonicity: sweep_monotonicity(&rows),
        },
    )?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DoptCheckConfig {
    pub bins: usize,
    /// Unnormalized bin masses are drawn from `[min_mass, 1)`.
    pub min_mass: f64,
    pub dopt: DoptConfig,
}

impl Default for DoptCheckConfig {
    fn default() -> Self {
        Self {
            bins: 16,
            min_mass: 0.05,
            dopt: DoptConfig::default(),
        }
    }
}

impl Checked for DoptCheckConfig {
    fn check(&self) -> Result<(), ConfigError> {
        positive("bins", self.bins)?;
        positive("dopt.steps", self.dopt.steps)?;
        if !(self.min_mass > 0.0 && self.min_mass < 1.0) {
            return Err(ConfigError::new("min_mass", "must lie in (0, 1)"));
        }
        if !(self.dopt.learning_rate > 0.0 && self.dopt.learning_rate.is_finite()) {
            return Err(ConfigError::new("dopt.learning_rate", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// Random `p` and `q` over `bins` bins, each normalized.
pub fn random_bins(bins: usize, min_mass: f64, seed_value: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = seed::rng_for(seed_value, TAG_BINS);
    let mut draw = || {
        let v: Vec<f64> = (0..bins).map(|_| rng.random_range(min_mass..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    let p = draw();
    (p, draw())
}

#[derive(Serialize)]
struct DoptSummary {
    bins: usize,
    max_deviation: f64,
}

pub fn dopt_check(cfg: &DoptCheckConfig, seed_value: u64, out: &mut Outputs) -> anyhow::Result<()> {
    let (p, q) = random_bins(cfg.bins, cfg.min_mass, seed_value);
    let report = optimal_discriminator_check(&p, &q, &cfg.dopt)?;
    let rows = csv_bytes(
        &header(&["bin", "p", "q", "trained", "optimal"]),
        (0..cfg.bins).map(|i| {
            vec![
                i.to_string(),
                format_f64(p[i]),
                format_f64(q[i]),
                format_f64(report.trained[i]),
                format_f64(report.optimal[i]),
            ]
        }),
    )?;
    out.write("dopt.csv", &rows)?;
    out.write_json(
        "summary.json",
        &DoptSummary {
            bins: cfg.bins,
            max_deviation: report.max_deviation,
        },
    )?;
    Ok(())
}
