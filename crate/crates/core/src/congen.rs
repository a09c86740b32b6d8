//! Noise-robust conditional generator on 2-D data.
//!
//! The generator `G(x, y′)` edits a point `x` towards target rating `y′`; the
//! discriminator `D(x, y)` scores point/rating pairs. Ratings come from a
//! [`FrozenRater`]. Before the discriminator sees a generated sample its
//! conditioning rating is resampled as `ỹ′ ~ N(y′, σ̂′²)` (the corruption
//! process), so the generator is not pushed to reproduce rating noise.
//!
//! The generator objective is
//! `adv + λ_rec · rec + λ_cyc · cyc`, with
//! * `rec = mean[(E_μ(G(x, y′)) − y′)² / (2σ̂′²) + ½ log σ̂′²]`,
//! * `cyc = mean ‖G(G(x, y′), y) − x‖₁`, `y = E_μ(x)`.

use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Comparison, ItemId, ItemTable};
use crate::diffcore::{AdamW, DiffError, Graph, LayerRecord, Mlp, MlpHandles, NodeId, Tensor};
use crate::pairs::filter_equal;
use crate::rater::{EncoderModel, RaterError, RatingEstimate};
use crate::seed::{self, Rng};

/// Lower bound on `σ̂′` inside the reconstruction term.
pub const REC_SIGMA_FLOOR: f64 = 1e-3;

const TAG_G_INIT: u64 = 0x6e11;
const TAG_D_INIT: u64 = 0xd111;
const TAG_BATCH: u64 = 0xba7c;
const TAG_CORRUPT: u64 = 0xc022;
const TAG_LABEL_NOISE: u64 = 0x10b5;
const TAG_PREDICT: u64 = 0x93ed;

#[derive(Debug, Error)]
pub enum CongenError {
    #[error("invalid gan config `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error("no decisive comparisons to draw generator pairs from")]
    NoPairs,
    #[error("item {0} is not in the rating table")]
    UnknownItem(ItemId),
    #[error("point has {got} coordinates, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Rater(#[from] RaterError),
    #[error("snapshot: {0}")]
    Snapshot(String),
}

/// Where the corruption variance comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionSource {
    /// Total predictive variance (epistemic + aleatoric).
    #[default]
    Total,
    Aleatoric,
    /// No corruption: the plain conditional objective.
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorLoss {
    /// `−log D(G(x, y′), ỹ′)`.
    #[default]
    NonSaturating,
    /// `log(1 − D(G(x, y′), ỹ′))`, the literal minimax term.
    Minimax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub lambda_rec: f64,
    pub lambda_cyc: f64,
    pub d_steps: usize,
    /// Generator steps.
    pub steps: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub generator_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub corruption: CorruptionSource,
    pub generator_loss: GeneratorLoss,
    /// Std of Gaussian noise in the real-branch conditioning ratings, in
    /// rating-std units. Unless corruption is off it is also added to the
    /// corruption variance.
    pub label_noise: f64,
    /// Fixed reconstruction σ in rating-std units, replacing the per-item
    /// predictive σ; for raters that report no usable uncertainty.
    pub rec_sigma: Option<f64>,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_cyc: 10.0,
            d_steps: 1,
            steps: 2000,
            batch_size: 64,
            lr_generator: 1e-3,
            lr_discriminator: 1e-3,
            generator_hidden: vec![64, 64],
            discriminator_hidden: vec![64, 64],
            corruption: CorruptionSource::Total,
            generator_loss: GeneratorLoss::NonSaturating,
            label_noise: 0.0,
            rec_sigma: None,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<(), CongenError> {
        let bad = |field: &'static str, reason: &str| {
            Err(CongenError::Config {
                field,
                reason: reason.into(),
            })
        };
        for (field, v) in [("lambda_rec", self.lambda_rec), ("lambda_cyc", self.lambda_cyc)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(field, "must be finite and >= 0");
            }
        }
        if !(self.label_noise.is_finite() && self.label_noise >= 0.0) {
            return bad("label_noise", "must be finite and >= 0");
        }
        if self.rec_sigma.is_some_and(|s| !(s.is_finite() && s > 0.0)) {
            return bad("rec_sigma", "must be finite and > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.d_steps == 0 {
            return bad("d_steps", "must be >= 1");
        }
        for (field, v) in [("lr_generator", self.lr_generator), ("lr_discriminator", self.lr_discriminator)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(field, "must be finite and > 0");
            }
        }
        if self.generator_hidden.contains(&0) || self.discriminator_hidden.contains(&0) {
            return bad("hidden", "widths must be >= 1");
        }
        Ok(())
    }
}

/// A rater whose weights no longer change, with its rating table for the
/// dataset cached. GAN training accepts only this type.
#[derive(Clone, Debug)]
pub struct FrozenRater {
    model: EncoderModel,
    ids: Vec<ItemId>,
    index: HashMap<ItemId, usize>,
    ratings: Vec<f64>,
    estimates: Vec<RatingEstimate>,
    mean: f64,
    std: f64,
}

impl FrozenRater {
    /// Freezes `model` and rates every item: the deterministic mean pass for
    /// ratings, `T` stochastic passes for the uncertainty.
    pub fn freeze(model: EncoderModel, items: &ItemTable, seed: u64) -> Result<Self, CongenError> {
        let rows = items.feature_rows();
        let ratings = model.mean_ratings(&rows)?;
        let estimates = model.predict_table(
            &rows,
            model.config().predict_passes,
            seed::derive(seed, TAG_PREDICT),
        )?;
        let n = ratings.len() as f64;
        let mean = ratings.iter().sum::<f64>() / n;
        let var = ratings.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            model,
            ids: items.ids(),
            index: items.ids().into_iter().enumerate().map(|(i, id)| (id, i)).collect(),
            ratings,
            estimates,
            mean,
            std: if var > 0.0 { var.sqrt() } else { 1.0 },
        })
    }

    pub fn model(&self) -> &EncoderModel {
        &self.model
    }

    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    /// Deterministic mean rating per item, in table order.
    pub fn ratings(&self) -> &[f64] {
        &self.ratings
    }

    pub fn estimates(&self) -> &[RatingEstimate] {
        &self.estimates
    }

    pub fn rating_mean(&self) -> f64 {
        self.mean
    }

    /// Std of the rating table; the unit for attribute errors.
    pub fn rating_std(&self) -> f64 {
        self.std
    }

    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    /// `E_μ` on arbitrary points.
    pub fn rate(&self, rows: &[&[f64]]) -> Result<Vec<f64>, CongenError> {
        Ok(self.model.mean_ratings(rows)?)
    }

    fn index_of(&self, id: ItemId) -> Result<usize, CongenError> {
        self.index.get(&id).copied().ok_or(CongenError::UnknownItem(id))
    }

    fn sigma(&self, i: usize, source: CorruptionSource) -> f64 {
        let e = &self.estimates[i];
        match source {
            CorruptionSource::Total => e.total.sqrt(),
            CorruptionSource::Aleatoric => e.aleatoric.sqrt(),
            CorruptionSource::Off => 0.0,
        }
    }
}

/// Residual generator `G(x, y′) = x + f(x, y′_norm)`; `f` starts at zero, so
/// an untrained generator is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    net: Mlp,
    dim: usize,
}

impl Generator {
    pub fn new(dim: usize, hidden: &[usize], seed: u64) -> Result<Self, CongenError> {
        let mut widths = vec![dim + 1];
        widths.extend(hidden);
        widths.push(dim);
        Ok(Self {
            net: Mlp::new(&widths, seed, true)?,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<(), CongenError> {
        Ok(self.net.set_params(params)?)
    }

    /// `x`: `[n, dim]`, `y`: `[n, 1]` normalized ratings.
    pub fn forward(
        &self,
        g: &mut Graph,
        h: &MlpHandles,
        x: NodeId,
        y: NodeId,
    ) -> Result<NodeId, CongenError> {
        let input = g.concat_cols(x, y)?;
        let delta = self.net.forward(g, h, input, None)?;
        Ok(g.add(x, delta)?)
    }

    /// Generates one point per row; `y_norm` are normalized target ratings.
    pub fn generate(&self, x: &[&[f64]], y_norm: &[f64]) -> Result<Vec<Vec<f64>>, CongenError> {
        if x.is_empty() {
            return Ok(Vec::new());
        }
        for r in x {
            if r.len() != self.dim {
                return Err(CongenError::Dimension {
                    expected: self.dim,
                    got: r.len(),
                });
            }
        }
        let mut g = Graph::new();
        let h = self.net.register(&mut g, false)?;
        let xi = g.input(Tensor::from_rows(x)?)?;
        let yi = g.input(Tensor::column(y_norm.to_vec()))?;
        let out = self.forward(&mut g, &h, xi, yi)?;
        let t = g.value(out);
        Ok((0..t.rows()).map(|i| t.row(i).to_vec()).collect())
    }
}

/// `D(x, y)` as a logit; the probability is its sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    net: Mlp,
}

impl Discriminator {
    /// `input` is the full input width (features plus any conditioning).
    pub fn new(input: usize, hidden: &[usize], seed: u64) -> Result<Self, CongenError> {
        let mut widths = vec![input];
        widths.extend(hidden);
        widths.push(1);
        Ok(Self {
            net: Mlp::new(&widths, seed, false)?,
        })
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<(), CongenError> {
        Ok(self.net.set_params(params)?)
    }

    pub fn logits(&self, g: &mut Graph, h: &MlpHandles, input: NodeId) -> Result<NodeId, CongenError> {
        Ok(self.net.forward(g, h, input, None)?)
    }

    /// Probabilities for raw input rows.
    pub fn probabilities(&self, rows: &[&[f64]]) -> Result<Vec<f64>, CongenError> {
        let out = self.net.eval(&Tensor::from_rows(rows)?, None)?;
        Ok(out.data().iter().map(|&z| crate::rater::logistic(z)).collect())
    }
}

/// Resamples a conditioning rating: `y′ + σ̂′ ε`. `σ̂′ = 0` returns `y′`.
pub fn corrupt(y: f64, sigma: f64, rng: &mut Rng) -> f64 {
    if sigma == 0.0 {
        return y;
    }
    let e: f64 = StandardNormal.sample(rng);
    y + sigma * e
}

/// One generator minibatch. Ratings are in raw rating units.
#[derive(Clone, Debug, PartialEq)]
pub struct GenPairBatch {
    pub source: Vec<Vec<f64>>,
    /// `E_μ(x)` of each source.
    pub source_rating: Vec<f64>,
    pub target: Vec<Vec<f64>>,
    /// `y′ = E_μ(x′)`.
    pub target_rating: Vec<f64>,
    /// Predictive std `σ̂′` of each target.
    pub target_sigma: Vec<f64>,
    /// Std used by the corruption process (depends on [`CorruptionSource`]).
    pub corruption_sigma: Vec<f64>,
}

impl GenPairBatch {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

/// Draws generator batches from decisive comparisons, each pair in a random
/// orientation.
#[derive(Clone, Debug)]
pub struct PairSource {
    pairs: Vec<(usize, usize)>,
}

impl PairSource {
    pub fn new(rater: &FrozenRater, comparisons: &[Comparison]) -> Result<Self, CongenError> {
        let pairs = filter_equal(comparisons)
            .iter()
            .map(|c| Ok((rater.index_of(c.a())?, rater.index_of(c.b())?)))
            .collect::<Result<Vec<_>, CongenError>>()?;
        if pairs.is_empty() {
            return Err(CongenError::NoPairs);
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sample(
        &self,
        items: &ItemTable,
        rater: &FrozenRater,
        size: usize,
        corruption: CorruptionSource,
        rng: &mut Rng,
    ) -> GenPairBatch {
        let mut b = GenPairBatch {
            source: Vec::with_capacity(size),
            source_rating: Vec::with_capacity(size),
            target: Vec::with_capacity(size),
            target_rating: Vec::with_capacity(size),
            target_sigma: Vec::with_capacity(size),
            corruption_sigma: Vec::with_capacity(size),
        };
        let all = items.items();
        for _ in 0..size {
            let (mut s, mut t) = self.pairs[rng.random_range(0..self.pairs.len())];
            if rng.random_bool(0.5) {
                std::mem::swap(&mut s, &mut t);
            }
            b.source.push(all[s].features.clone());
            b.source_rating.push(rater.ratings[s]);
            b.target.push(all[t].features.clone());
            b.target_rating.push(rater.ratings[t]);
            b.target_sigma.push(rater.sigma(t, CorruptionSource::Total));
            b.corruption_sigma.push(rater.sigma(t, corruption));
        }
        b
    }
}

/// Scalar losses of one evaluation of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLosses {
    pub loss_d: f64,
    /// Full generator objective.
    pub loss_g: f64,
    pub adversarial: f64,
    pub reconstruction: f64,
    pub cycle: f64,
}

struct ObjectiveNodes {
    loss_d: NodeId,
    loss_g: NodeId,
    adversarial: NodeId,
    reconstruction: Option<NodeId>,
    cycle: Option<NodeId>,
}

/// Conditioning values fixed for one objective evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    /// Normalized ratings the real branch is paired with.
    pub real: Vec<f64>,
    /// Normalized corrupted targets the fake branch is paired with.
    pub fake: Vec<f64>,
}

/// Draws the real-branch label noise and the corruption of `y′`.
pub fn conditioning(
    cfg: &GanConfig,
    rater: &FrozenRater,
    batch: &GenPairBatch,
    seed: u64,
) -> Conditioning {
    let std = rater.rating_std();
    let mut noise_rng = seed::rng_for(seed, TAG_LABEL_NOISE);
    let real = batch
        .target_rating
        .iter()
        .map(|&y| rater.normalize(corrupt(y, cfg.label_noise * std, &mut noise_rng)))
        .collect();
    let mut rng = seed::rng_for(seed, TAG_CORRUPT);
    let fake = batch
        .target_rating
        .iter()
        .zip(&batch.corruption_sigma)
        .map(|(&y, &s)| {
            let sigma = match cfg.corruption {
                CorruptionSource::Off => 0.0,
                _ => (s * s + (cfg.label_noise * std).powi(2)).sqrt(),
            };
            rater.normalize(corrupt(y, sigma, &mut rng))
        })
        .collect();
    Conditioning { real, fake }
}

#[allow(clippy::too_many_arguments)]
fn build_objective(
    g: &mut Graph,
    cfg: &GanConfig,
    gen: &Generator,
    gh: &MlpHandles,
    disc: &Discriminator,
    dh: &MlpHandles,
    rater: &FrozenRater,
    rh: &MlpHandles,
    batch: &GenPairBatch,
    cond: &Conditioning,
) -> Result<ObjectiveNodes, CongenError> {
    if batch.is_empty() {
        return Err(CongenError::EmptyBatch);
    }
    let src_rows: Vec<&[f64]> = batch.source.iter().map(Vec::as_slice).collect();
    let dst_rows: Vec<&[f64]> = batch.target.iter().map(Vec::as_slice).collect();
    let x = g.input(Tensor::from_rows(&src_rows)?)?;
    let x_real = g.input(Tensor::from_rows(&dst_rows)?)?;
    let y_target = g.input(Tensor::column(
        batch.target_rating.iter().map(|&y| rater.normalize(y)).collect(),
    ))?;
    let y_real = g.input(Tensor::column(cond.real.clone()))?;
    let y_fake = g.input(Tensor::column(cond.fake.clone()))?;

    let fake = gen.forward(g, gh, x, y_target)?;

    // log D = −softplus(−z), log(1 − D) = −softplus(z)
    let real_in = g.concat_cols(x_real, y_real)?;
    let z_real = disc.logits(g, dh, real_in)?;
    let fake_in = g.concat_cols(fake, y_fake)?;
    let z_fake = disc.logits(g, dh, fake_in)?;
    let neg_real = g.scale(z_real, -1.0)?;
    let sp_real = g.softplus(neg_real)?;
    let sp_fake = g.softplus(z_fake)?;
    let d_real = g.mean(sp_real)?;
    let d_fake = g.mean(sp_fake)?;
    let loss_d = g.add(d_real, d_fake)?;

    let adversarial = match cfg.generator_loss {
        GeneratorLoss::NonSaturating => {
            let neg = g.scale(z_fake, -1.0)?;
            let sp = g.softplus(neg)?;
            g.mean(sp)?
        }
        GeneratorLoss::Minimax => {
            let m = g.mean(sp_fake)?;
            g.scale(m, -1.0)?
        }
    };
    let mut loss_g = adversarial;

    let reconstruction = if cfg.lambda_rec > 0.0 {
        let out = rater.model.network().forward(g, rh, fake, None)?;
        let mu = g.slice_cols(out, 0, 1)?;
        let y_raw = g.input(Tensor::column(batch.target_rating.clone()))?;
        let err = g.sub(mu, y_raw)?;
        let sq = g.square(err)?;
        let fixed = cfg.rec_sigma.map(|s| s * rater.rating_std());
        let s2: Vec<f64> = batch
            .target_sigma
            .iter()
            .map(|&s| fixed.unwrap_or(s).max(REC_SIGMA_FLOOR).powi(2))
            .collect();
        let w = g.input(Tensor::column(s2.iter().map(|v| 0.5 / v).collect()))?;
        let c = g.input(Tensor::column(s2.iter().map(|v| 0.5 * v.ln()).collect()))?;
        let weighted = g.mul(sq, w)?;
        let per = g.add(weighted, c)?;
        let rec = g.mean(per)?;
        let scaled = g.scale(rec, cfg.lambda_rec)?;
        loss_g = g.add(loss_g, scaled)?;
        Some(rec)
    } else {
        None
    };

    let cycle = if cfg.lambda_cyc > 0.0 {
        let y_src = g.input(Tensor::column(
            batch.source_rating.iter().map(|&y| rater.normalize(y)).collect(),
        ))?;
        let back = gen.forward(g, gh, fake, y_src)?;
        let diff = g.sub(back, x)?;
        let a = g.abs(diff)?;
        let per = g.sum_cols(a)?;
        let cyc = g.mean(per)?;
        let scaled = g.scale(cyc, cfg.lambda_cyc)?;
        loss_g = g.add(loss_g, scaled)?;
        Some(cyc)
    } else {
        None
    };

    Ok(ObjectiveNodes {
        loss_d,
        loss_g,
        adversarial,
        reconstruction,
        cycle,
    })
}

fn losses_of(g: &Graph, n: &ObjectiveNodes) -> GanLosses {
    GanLosses {
        loss_d: g.value(n.loss_d).item(),
        loss_g: g.value(n.loss_g).item(),
        adversarial: g.value(n.adversarial).item(),
        reconstruction: n.reconstruction.map_or(0.0, |id| g.value(id).item()),
        cycle: n.cycle.map_or(0.0, |id| g.value(id).item()),
    }
}

/// Which network the gradients are taken for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Player {
    Generator,
    Discriminator,
}

/// Evaluates the objective and, for `player`, the gradient of its loss with
/// respect to that network's parameters (in [`Mlp::params`] order).
pub fn objective(
    cfg: &GanConfig,
    gen: &Generator,
    disc: &Discriminator,
    rater: &FrozenRater,
    batch: &GenPairBatch,
    cond: &Conditioning,
    player: Player,
) -> Result<(GanLosses, Vec<Tensor>), CongenError> {
    let mut g = Graph::new();
    let gh = gen.net.register(&mut g, player == Player::Generator)?;
    let dh = disc.net.register(&mut g, player == Player::Discriminator)?;
    let rh = rater.model.network().register(&mut g, false)?;
    let nodes = build_objective(&mut g, cfg, gen, &gh, disc, &dh, rater, &rh, batch, cond)?;
    let losses = losses_of(&g, &nodes);
    let (loss, handles, current) = match player {
        Player::Generator => (nodes.loss_g, &gh, gen.net.params()),
        Player::Discriminator => (nodes.loss_d, &dh, disc.net.params()),
    };
    g.backward(loss)?;
    let grads = handles
        .params()
        .iter()
        .zip(&current)
        .map(|(id, p)| g.grad(*id).cloned().unwrap_or_else(|| p.map(|_| 0.0)))
        .collect();
    Ok((losses, grads))
}

/// Losses without gradients.
pub fn evaluate(
    cfg: &GanConfig,
    gen: &Generator,
    disc: &Discriminator,
    rater: &FrozenRater,
    batch: &GenPairBatch,
    cond: &Conditioning,
) -> Result<GanLosses, CongenError> {
    let mut g = Graph::new();
    let gh = gen.net.register(&mut g, false)?;
    let dh = disc.net.register(&mut g, false)?;
    let rh = rater.model.network().register(&mut g, false)?;
    let nodes = build_objective(&mut g, cfg, gen, &gh, disc, &dh, rater, &rh, batch, cond)?;
    Ok(losses_of(&g, &nodes))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub adversarial: f64,
    pub reconstruction: f64,
    pub cycle: f64,
}

#[derive(Clone, Debug)]
pub struct GanRun {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub trace: Vec<TraceRow>,
}

fn step_seed(cfg: &GanConfig, step: usize, k: usize) -> u64 {
    seed::derive(seed::derive(cfg.seed, step as u64), k as u64)
}

/// Alternating optimization: `d_steps` discriminator updates, then one
/// generator update, each on a fresh batch.
pub fn train_gan(
    cfg: &GanConfig,
    items: &ItemTable,
    comparisons: &[Comparison],
    rater: &FrozenRater,
) -> Result<GanRun, CongenError> {
    cfg.validate()?;
    let dim = items.dim();
    let source = PairSource::new(rater, comparisons)?;
    let mut gen = Generator::new(dim, &cfg.generator_hidden, seed::derive(cfg.seed, TAG_G_INIT))?;
    let mut disc = Discriminator::new(dim + 1, &cfg.discriminator_hidden, seed::derive(cfg.seed, TAG_D_INIT))?;
    let mut opt_g = AdamW::new(cfg.lr_generator, 0.0).with_betas(0.5, 0.999);
    let mut opt_d = AdamW::new(cfg.lr_discriminator, 0.0).with_betas(0.5, 0.999);
    let mut rng = seed::rng_for(cfg.seed, TAG_BATCH);
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut loss_d = 0.0;
        for k in 0..cfg.d_steps {
            let batch = source.sample(items, rater, cfg.batch_size, cfg.corruption, &mut rng);
            let cond = conditioning(cfg, rater, &batch, step_seed(cfg, step, k));
            let (l, grads) = objective(cfg, &gen, &disc, rater, &batch, &cond, Player::Discriminator)?;
            let mut params = disc.net.params();
            opt_d.step(&mut params, &grads)?;
            disc.net.set_params(params)?;
            loss_d = l.loss_d;
        }
        let batch = source.sample(items, rater, cfg.batch_size, cfg.corruption, &mut rng);
        let cond = conditioning(cfg, rater, &batch, step_seed(cfg, step, cfg.d_steps));
        let (l, grads) = objective(cfg, &gen, &disc, rater, &batch, &cond, Player::Generator)?;
        let mut params = gen.net.params();
        opt_g.step(&mut params, &grads)?;
        gen.net.set_params(params)?;
        trace.push(TraceRow {
            step,
            loss_d,
            loss_g: l.loss_g,
            adversarial: l.adversarial,
            reconstruction: l.reconstruction,
            cycle: l.cycle,
        });
    }
    Ok(GanRun {
        generator: gen,
        discriminator: disc,
        trace,
    })
}

/// Edits `x` to the target rating in a single forward pass.
pub fn edit(
    gen: &Generator,
    rater: &FrozenRater,
    x: &[f64],
    y_target: f64,
) -> Result<Vec<f64>, CongenError> {
    Ok(gen.generate(&[x], &[rater.normalize(y_target)])?.remove(0))
}

/// Mean rating of exemplar items, a target for [`edit`].
pub fn cluster_mean(rater: &FrozenRater, exemplars: &[ItemId]) -> Result<f64, CongenError> {
    if exemplars.is_empty() {
        return Err(CongenError::EmptyBatch);
    }
    let mut sum = 0.0;
    for &id in exemplars {
        sum += rater.ratings[rater.index_of(id)?];
    }
    Ok(sum / exemplars.len() as f64)
}

/// Generator/discriminator weights in the rater's layer format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanSnapshot {
    pub config: GanConfig,
    pub generator: Vec<LayerRecord>,
    pub discriminator: Vec<LayerRecord>,
}

impl GanRun {
    pub fn snapshot(&self, config: &GanConfig) -> GanSnapshot {
        GanSnapshot {
            config: config.clone(),
            generator: self.generator.net.to_records(),
            discriminator: self.discriminator.net.to_records(),
        }
    }
}

impl GanSnapshot {
    pub fn restore(&self) -> Result<(Generator, Discriminator), CongenError> {
        let g = Mlp::from_records(&self.generator)?;
        let d = Mlp::from_records(&self.discriminator)?;
        let dim = g.output_width();
        if g.input_width() != dim + 1 || d.output_width() != 1 {
            return Err(CongenError::Snapshot("layer widths do not form a generator/discriminator".into()));
        }
        Ok((Generator { net: g, dim }, Discriminator { net: d }))
    }
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanEvaluation {
    /// Median `|E_μ(G(x, y′)) − y′|` in rating-std units.
    pub attribute_error: f64,
    /// Median `‖G(G(x, y′), y) − x‖₁` divided by the mean feature std.
    pub cycle_error: f64,
    /// Median `‖G(x, E_μ(x)) − x‖₂` divided by the mean feature std.
    pub self_edit: f64,
    pub pairs: usize,
}

fn feature_std(items: &ItemTable) -> f64 {
    let n = items.len() as f64;
    let d = items.dim();
    let mut total = 0.0;
    for j in 0..d {
        let m = items.items().iter().map(|i| i.features[j]).sum::<f64>() / n;
        let v = items.items().iter().map(|i| (i.features[j] - m).powi(2)).sum::<f64>() / n;
        total += v.sqrt();
    }
    total / d as f64
}

/// Scores a generator on `pairs` random (source, target) item pairs.
pub fn evaluate_generator(
    gen: &Generator,
    rater: &FrozenRater,
    items: &ItemTable,
    pairs: usize,
    seed: u64,
) -> Result<GanEvaluation, CongenError> {
    let mut rng = seed::rng(seed);
    let n = items.len();
    let all = items.items();
    let mut src = Vec::with_capacity(pairs);
    let mut dst = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        src.push(rng.random_range(0..n));
        dst.push(rng.random_range(0..n));
    }
    let x: Vec<&[f64]> = src.iter().map(|&i| all[i].features.as_slice()).collect();
    let y_t: Vec<f64> = dst.iter().map(|&i| rater.ratings[i]).collect();
    let y_s: Vec<f64> = src.iter().map(|&i| rater.ratings[i]).collect();
    let norm = |v: &[f64]| v.iter().map(|&y| rater.normalize(y)).collect::<Vec<_>>();

    let fake = gen.generate(&x, &norm(&y_t))?;
    let fake_rows: Vec<&[f64]> = fake.iter().map(Vec::as_slice).collect();
    let realized = rater.rate(&fake_rows)?;
    let attr: Vec<f64> = realized
        .iter()
        .zip(&y_t)
        .map(|(r, y)| (r - y).abs() / rater.rating_std())
        .collect();
    let back = gen.generate(&fake_rows, &norm(&y_s))?;
    let scale = feature_std(items);
    let cyc: Vec<f64> = back
        .iter()
        .zip(&x)
        .map(|(b, x)| b.iter().zip(x.iter()).map(|(u, v)| (u - v).abs()).sum::<f64>() / scale)
        .collect();
    let same = gen.generate(&x, &norm(&y_s))?;
    let selfe: Vec<f64> = same
        .iter()
        .zip(&x)
        .map(|(b, x)| b.iter().zip(x.iter()).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt() / scale)
        .collect();
    Ok(GanEvaluation {
        attribute_error: crate::synth::median(&attr),
        cycle_error: crate::synth::median(&cyc),
        self_edit: crate::synth::median(&selfe),
        pairs,
    })
}

/// One row of an edit sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub id: ItemId,
    pub y_target: f64,
    pub output: Vec<f64>,
    pub realized: f64,
}

/// Edits each item to `points` evenly spaced targets across the rating range.
pub fn edit_sweep(
    gen: &Generator,
    rater: &FrozenRater,
    items: &ItemTable,
    ids: &[ItemId],
    points: usize,
) -> Result<Vec<SweepRow>, CongenError> {
    let lo = rater.ratings.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = rater.ratings.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let targets: Vec<f64> = (0..points)
        .map(|k| if points == 1 { lo } else { lo + (hi - lo) * k as f64 / (points - 1) as f64 })
        .collect();
    let mut rows = Vec::with_capacity(ids.len() * points);
    for &id in ids {
        let x = items.features(id).map_err(|_| CongenError::UnknownItem(id))?;
        let xs = vec![x; points];
        let norm: Vec<f64> = targets.iter().map(|&y| rater.normalize(y)).collect();
        let out = gen.generate(&xs, &norm)?;
        let out_rows: Vec<&[f64]> = out.iter().map(Vec::as_slice).collect();
        let realized = rater.rate(&out_rows)?;
        for ((y, o), r) in targets.iter().zip(out).zip(realized) {
            rows.push(SweepRow {
                id,
                y_target: *y,
                output: o,
                realized: r,
            });
        }
    }
    Ok(rows)
}

/// Median over items of the Spearman correlation between sweep targets and
/// realized ratings.
pub fn sweep_monotonicity(rows: &[SweepRow]) -> f64 {
    let mut per_item: Vec<f64> = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let mut j = i;
        while j < rows.len() && rows[j].id == rows[i].id {
            j += 1;
        }
        let t: Vec<f64> = rows[i..j].iter().map(|r| r.y_target).collect();
        let r: Vec<f64> = rows[i..j].iter().map(|r| r.realized).collect();
        if t.len() >= 2 {
            per_item.push(crate::synth::spearman(&t, &r).unwrap_or(0.0));
        }
        i = j;
    }
    crate::synth::median(&per_item)
}

// ---------------------------------------------------------------------------
// Optimal discriminator

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DoptConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for DoptConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            learning_rate: 0.05,
            hidden: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoptReport {
    pub trained: Vec<f64>,
    pub optimal: Vec<f64>,
    pub max_deviation: f64,
}

/// Trains a discriminator on one-hot bins against fixed real (`p`) and
/// generated (`q`) distributions, minimizing the exact expected loss
/// `−Σ p log D − Σ q log(1 − D)`, and compares it with `p / (p + q)`.
pub fn optimal_discriminator_check(p: &[f64], q: &[f64], cfg: &DoptConfig) -> Result<DoptReport, CongenError> {
    let k = p.len();
    if k == 0 || q.len() != k {
        return Err(CongenError::Config {
            field: "bins",
            reason: format!("p has {} bins, q has {}", k, q.len()),
        });
    }
    if p.iter().chain(q).any(|v| !(v.is_finite() && *v >= 0.0)) || p.iter().zip(q).any(|(a, b)| a + b == 0.0) {
        return Err(CongenError::Config {
            field: "bins",
            reason: "probabilities must be >= 0 with p + q > 0 in every bin".into(),
        });
    }
    let mut disc = Discriminator::new(k, &cfg.hidden, cfg.seed)?;
    let mut opt = AdamW::new(cfg.learning_rate, 0.0);
    let eye: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let rows: Vec<&[f64]> = eye.iter().map(Vec::as_slice).collect();
    let onehot = Tensor::from_rows(&rows)?;
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let h = disc.net.register(&mut g, true)?;
        let x = g.input(onehot.clone())?;
        let z = disc.logits(&mut g, &h, x)?;
        let wp = g.input(Tensor::column(p.to_vec()))?;
        let wq = g.input(Tensor::column(q.to_vec()))?;
        let neg = g.scale(z, -1.0)?;
        let lp = g.softplus(neg)?;
        let lq = g.softplus(z)?;
        let a = g.mul(lp, wp)?;
        let b = g.mul(lq, wq)?;
        let s = g.add(a, b)?;
        let loss = g.sum(s)?;
        g.backward(loss)?;
        let params = disc.net.params();
        let grads: Vec<Tensor> = h
            .params()
            .iter()
            .zip(&params)
            .map(|(id, p)| g.grad(*id).cloned().unwrap_or_else(|| p.map(|_| 0.0)))
            .collect();
        let mut params = params;
        opt.step(&mut params, &grads)?;
        disc.net.set_params(params)?;
    }
    let trained = disc.probabilities(&rows)?;
    let optimal: Vec<f64> = p.iter().zip(q).map(|(a, b)| a / (a + b)).collect();
    let max_deviation = trained
        .iter()
        .zip(&optimal)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(DoptReport {
        trained,
        optimal,
        max_deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corruption_with_zero_sigma_is_exact() {
        let mut rng = seed::rng(1);
        assert_eq!(corrupt(0.375, 0.0, &mut rng), 0.375);
        let y = corrupt(0.375, 1.0, &mut rng);
        assert!(y != 0.375 && y.is_finite());
    }

    #[test]
    fn untrained_generator_is_identity() {
        let g = Generator::new(2, &[8], 3).unwrap();
        let out = g.generate(&[&[0.5, -1.0], &[2.0, 0.0]], &[1.0, -1.0]).unwrap();
        assert_eq!(out, vec![vec![0.5, -1.0], vec![2.0, 0.0]]);
    }

    #[test]
    fn discriminator_output_is_a_probability() {
        let d = Discriminator::new(3, &[8], 2).unwrap();
        for p in d.probabilities(&[&[100.0, -50.0, 3.0], &[0.0, 0.0, 0.0]]).unwrap() {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn dopt_closed_form_examples() {
        let r = optimal_discriminator_check(&[0.5, 0.5], &[0.5, 0.5], &DoptConfig::default()).unwrap();
        assert!(r.max_deviation < 1e-3, "{r:?}");
        let r = optimal_discriminator_check(&[0.8, 0.2], &[0.2, 0.8], &DoptConfig::default()).unwrap();
        assert_eq!(r.optimal, vec![0.8, 0.2]);
        assert!(r.max_deviation < 1e-3, "{r:?}");
        assert!(optimal_discriminator_check(&[1.0], &[0.5, 0.5], &DoptConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(GanConfig::default().validate().is_ok());
        let bad = GanConfig {
            lambda_rec: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
