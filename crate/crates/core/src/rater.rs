//! Bayesian Elo rating network.
//!
//! An encoder maps item features to a Gaussian latent rating `N(μ, σ²)`. Win
//! probabilities are `sigm(y_A - y_B)` averaged over reparameterized samples
//! of the two ratings, and the network is trained on pairwise outcomes with
//! dropout kept on, so that at prediction time repeated dropout passes give
//! the epistemic part of the rating variance and the σ head the aleatoric part.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Comparison, DataError, ItemTable};
use crate::diffcore::{AdamW, DiffError, Graph, LayerRecord, Mlp, MlpHandles, NodeId, Tensor};
use crate::seed;

/// Floor added after the softplus of the σ head.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` before logarithms.
pub const P_CLAMP: f64 = 1e-7;

const TAG_INIT: u64 = 0x1417;
const TAG_SHUFFLE: u64 = 0x5407;
const TAG_STEP: u64 = 0x57e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// Log of the Monte Carlo averaged win probability.
    Mc,
    /// Monte Carlo average of per-sample log probabilities.
    #[default]
    Ub,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub weight_decay: f64,
    /// Reparameterized samples per rating during training.
    pub mc_samples: usize,
    /// Stochastic passes for predictive uncertainty.
    pub predict_passes: usize,
    pub loss: LossVariant,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden: vec![64, 64],
            dropout: 0.2,
            weight_decay: 1e-4,
            mc_samples: 8,
            predict_passes: 20,
            loss: LossVariant::Ub,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), RaterError> {
        let bad = |field: &'static str, reason: String| Err(RaterError::Config { field, reason });
        if self.input_dim == 0 {
            return bad("input_dim", "must be >= 1".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden", "widths must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{} outside [0, 1)", self.dropout));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be finite and >= 0".into());
        }
        if self.mc_samples == 0 {
            return bad("mc_samples", "must be >= 1".into());
        }
        if self.predict_passes == 0 {
            return bad("predict_passes", "must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be finite and > 0".into());
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(2);
        w
    }
}

#[derive(Debug, Error)]
pub enum RaterError {
    #[error("invalid encoder config `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("feature length {got} does not match input width {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("empty comparison batch")]
    EmptyBatch,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("snapshot: {0}")]
    Snapshot(String),
}

/// Latent rating distribution of one item.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianRating {
    pub mu: f64,
    pub sigma: f64,
}

/// Predictive mean and variance decomposition from `T` stochastic passes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingEstimate {
    pub mean: f64,
    pub epistemic: f64,
    pub aleatoric: f64,
    pub total: f64,
}

impl RatingEstimate {
    /// Variance of the pass means plus the mean of the pass variances.
    ///
    /// The mean and the spread of `μ_t` are accumulated with Welford's
    /// recurrence, which equals `mean(μ²) - mean(μ)²` algebraically and
    /// returns exactly zero when all passes agree.
    pub fn from_passes(passes: &[GaussianRating]) -> Self {
        assert!(!passes.is_empty(), "at least one pass");
        let mut mean = 0.0;
        let mut m2 = 0.0;
        let mut sq = 0.0;
        for (k, p) in passes.iter().enumerate() {
            let delta = p.mu - mean;
            mean += delta / (k + 1) as f64;
            m2 += delta * (p.mu - mean);
            sq += p.sigma * p.sigma;
        }
        let t = passes.len() as f64;
        let epistemic = (m2 / t).max(0.0);
        let aleatoric = sq / t;
        Self {
            mean,
            epistemic,
            aleatoric,
            total: epistemic + aleatoric,
        }
    }

    pub fn std(&self) -> f64 {
        self.total.sqrt()
    }
}

/// The feed-forward encoder `E` and its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    net: Mlp,
}

/// JSON snapshot: config plus the layer list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSnapshot {
    pub config: EncoderConfig,
    pub layers: Vec<LayerRecord>,
}

/// Graph nodes of one encoder pass over a batch.
struct EncodedNodes {
    mu: NodeId,
    sigma: NodeId,
}

impl EncoderModel {
    /// Fresh encoder. The output layer starts at zero, so an untrained model
    /// rates every item `μ = 0`.
    pub fn new(config: EncoderConfig) -> Result<Self, RaterError> {
        config.validate()?;
        let net = Mlp::new(&config.widths(), seed::derive(config.seed, TAG_INIT), true)?;
        Ok(Self { config, net })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    /// Replaces every weight; used by tests that need a hand-set network.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<(), RaterError> {
        self.net.set_params(params)?;
        Ok(())
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            config: self.config.clone(),
            layers: self.net.to_records(),
        }
    }

    pub fn from_snapshot(snap: ModelSnapshot) -> Result<Self, RaterError> {
        snap.config.validate()?;
        let net = Mlp::from_records(&snap.layers)?;
        if net.widths() != snap.config.widths() {
            return Err(RaterError::Snapshot(format!(
                "layer widths {:?} do not match config {:?}",
                net.widths(),
                snap.config.widths()
            )));
        }
        Ok(Self {
            config: snap.config,
            net,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.snapshot()).expect("snapshot serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, RaterError> {
        let snap: ModelSnapshot =
            serde_json::from_str(s).map_err(|e| RaterError::Snapshot(e.to_string()))?;
        Self::from_snapshot(snap)
    }

    fn check_width(&self, got: usize) -> Result<(), RaterError> {
        if got != self.config.input_dim {
            return Err(RaterError::Dimension {
                expected: self.config.input_dim,
                got,
            });
        }
        Ok(())
    }

    fn dropout_for(&self, seed: Option<u64>) -> Option<(f64, u64)> {
        seed.filter(|_| self.config.dropout > 0.0)
            .map(|s| (self.config.dropout, s))
    }

    fn encode_nodes(
        &self,
        g: &mut Graph,
        h: &MlpHandles,
        x: Tensor,
        dropout_seed: Option<u64>,
    ) -> Result<EncodedNodes, RaterError> {
        self.check_width(x.cols())?;
        let xi = g.input(x)?;
        let out = self.net.forward(g, h, xi, self.dropout_for(dropout_seed))?;
        let mu = g.slice_cols(out, 0, 1)?;
        let raw = g.slice_cols(out, 1, 2)?;
        let sp = g.softplus(raw)?;
        let sigma = g.offset(sp, SIGMA_FLOOR)?;
        Ok(EncodedNodes { mu, sigma })
    }

    /// Gaussian ratings for a batch of rows. `dropout_seed = None` is the
    /// deterministic pass.
    pub fn encode_rows(
        &self,
        rows: &[&[f64]],
        dropout_seed: Option<u64>,
    ) -> Result<Vec<GaussianRating>, RaterError> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        for r in rows {
            self.check_width(r.len())?;
        }
        let x = Tensor::from_rows(rows)?;
        let out = self.net.eval(&x, self.dropout_for(dropout_seed))?;
        Ok((0..out.rows())
            .map(|i| {
                let r = out.row(i);
                GaussianRating {
                    mu: r[0],
                    sigma: crate::diffcore::softplus(r[1]) + SIGMA_FLOOR,
                }
            })
            .collect())
    }

    /// Encodes one item. With `stochastic` a dropout mask is drawn from `seed`.
    pub fn encode(
        &self,
        features: &[f64],
        stochastic: bool,
        seed: u64,
    ) -> Result<GaussianRating, RaterError> {
        let s = stochastic.then_some(seed);
        Ok(self.encode_rows(&[features], s)?[0])
    }

    /// Deterministic mean-rating pass over many rows.
    pub fn mean_ratings(&self, rows: &[&[f64]]) -> Result<Vec<f64>, RaterError> {
        Ok(self
            .encode_rows(rows, None)?
            .into_iter()
            .map(|r| r.mu)
            .collect())
    }

    /// `T` stochastic passes per row, indexed `[row][pass]`.
    pub fn sample_passes(
        &self,
        rows: &[&[f64]],
        passes: usize,
        seed: u64,
    ) -> Result<Vec<Vec<GaussianRating>>, RaterError> {
        if passes == 0 {
            return Err(RaterError::Config {
                field: "predict_passes",
                reason: "must be >= 1".into(),
            });
        }
        let mut out = vec![Vec::with_capacity(passes); rows.len()];
        for t in 0..passes {
            let pass = self.encode_rows(rows, Some(seed::derive(seed, t as u64)))?;
            for (slot, r) in out.iter_mut().zip(pass) {
                slot.push(r);
            }
        }
        Ok(out)
    }

    /// Predictive mean and uncertainty decomposition for each row.
    pub fn predict_table(
        &self,
        rows: &[&[f64]],
        passes: usize,
        seed: u64,
    ) -> Result<Vec<RatingEstimate>, RaterError> {
        Ok(self
            .sample_passes(rows, passes, seed)?
            .iter()
            .map(|p| RatingEstimate::from_passes(p))
            .collect())
    }

    pub fn predict_with_uncertainty(
        &self,
        features: &[f64],
        passes: usize,
        seed: u64,
    ) -> Result<RatingEstimate, RaterError> {
        Ok(self.predict_table(&[features], passes, seed)?[0])
    }
}

/// Logistic function with exact antisymmetry: `logistic(-z) == 1 - logistic(z)`
/// bit for bit, so `P(A, B) + P(B, A) == 1.0` holds in floating point.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        1.0 - 1.0 / (1.0 + z.exp())
    }
}

/// Monte Carlo win probability and the rating samples behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct WinProbability {
    pub p: f64,
    pub samples_a: Vec<f64>,
    pub samples_b: Vec<f64>,
}

impl WinProbability {
    /// Standard error of `p` as a sample mean.
    pub fn std_error(&self) -> f64 {
        let m = self.samples_a.len() as f64;
        let var = self
            .samples_a
            .iter()
            .zip(&self.samples_b)
            .map(|(a, b)| (logistic(a - b) - self.p).powi(2))
            .sum::<f64>()
            / (m - 1.0).max(1.0);
        (var / m).sqrt()
    }
}

/// `M` reparameterized draws of each rating and the averaged `sigm(y_A - y_B)`.
/// Rating A draws its noise from `seed_a`, rating B from `seed_b`.
pub fn mc_win_probability(
    a: GaussianRating,
    b: GaussianRating,
    samples: usize,
    seed_a: u64,
    seed_b: u64,
) -> Result<WinProbability, RaterError> {
    if samples == 0 {
        return Err(RaterError::Config {
            field: "mc_samples",
            reason: "must be >= 1".into(),
        });
    }
    let draw = |r: GaussianRating, s: u64| -> Result<Vec<f64>, RaterError> {
        let mut g = Graph::new();
        let mu = g.input(Tensor::filled(1, samples, r.mu))?;
        let sd = g.input(Tensor::filled(1, samples, r.sigma))?;
        let y = g.gaussian_reparam(mu, sd, s)?;
        Ok(g.value(y).data().to_vec())
    };
    let samples_a = draw(a, seed_a)?;
    let samples_b = draw(b, seed_b)?;
    let p = samples_a
        .iter()
        .zip(&samples_b)
        .map(|(x, y)| logistic(x - y))
        .sum::<f64>()
        / samples as f64;
    Ok(WinProbability {
        p,
        samples_a,
        samples_b,
    })
}

/// Stochastic encoder passes for both items, then [`mc_win_probability`].
pub fn win_probability_mc(
    model: &EncoderModel,
    xa: &[f64],
    xb: &[f64],
    samples: usize,
    seed: u64,
) -> Result<WinProbability, RaterError> {
    let ra = model.encode(xa, true, seed::derive(seed, 1))?;
    let rb = model.encode(xb, true, seed::derive(seed, 2))?;
    mc_win_probability(ra, rb, samples, seed::derive(seed, 3), seed::derive(seed, 4))
}

/// Sampling-free variant that keeps transitivity:
/// `sigm((μ_A - μ_B) / sqrt(σ_A² + σ_B²))`. Both σ must be positive.
pub fn win_probability_transitive(a: GaussianRating, b: GaussianRating) -> f64 {
    debug_assert!(a.sigma > 0.0 && b.sigma > 0.0);
    logistic((a.mu - b.mu) / (a.sigma * a.sigma + b.sigma * b.sigma).sqrt())
}

/// Loss value plus the rating samples it was computed from, `[pair][m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RankLoss {
    pub value: f64,
    pub samples_a: Vec<Vec<f64>>,
    pub samples_b: Vec<Vec<f64>>,
}

struct LossNodes {
    loss: NodeId,
    ya: NodeId,
    yb: NodeId,
}

#[allow(clippy::too_many_arguments)]
fn build_loss(
    g: &mut Graph,
    a: &EncodedNodes,
    b: &EncodedNodes,
    scores: &[f64],
    samples: usize,
    seed: u64,
    variant: LossVariant,
) -> Result<LossNodes, RaterError> {
    let n = scores.len();
    let mu_a = g.tile_cols(a.mu, samples)?;
    let sd_a = g.tile_cols(a.sigma, samples)?;
    let mu_b = g.tile_cols(b.mu, samples)?;
    let sd_b = g.tile_cols(b.sigma, samples)?;
    let ya = g.gaussian_reparam(mu_a, sd_a, seed::derive(seed, 3))?;
    let yb = g.gaussian_reparam(mu_b, sd_b, seed::derive(seed, 4))?;
    let d = g.sub(ya, yb)?;
    let s = g.sigmoid(d)?;

    let (p, cols) = match variant {
        LossVariant::Mc => (g.mean_cols(s)?, 1),
        LossVariant::Ub => (s, samples),
    };
    let sa: Vec<f64> = scores
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v, cols))
        .collect();
    let sb: Vec<f64> = sa.iter().map(|v| 1.0 - v).collect();
    let sa = g.input(Tensor::matrix(n, cols, sa)?)?;
    let sb = g.input(Tensor::matrix(n, cols, sb)?)?;

    let pa = g.clamp(p, P_CLAMP, 1.0 - P_CLAMP)?;
    let la = g.log(pa)?;
    let q = g.scale(p, -1.0)?;
    let q = g.offset(q, 1.0)?;
    let pb = g.clamp(q, P_CLAMP, 1.0 - P_CLAMP)?;
    let lb = g.log(pb)?;
    let ta = g.mul(la, sa)?;
    let tb = g.mul(lb, sb)?;
    let t = g.add(ta, tb)?;
    let m = g.mean(t)?;
    let loss = g.scale(m, -1.0)?;
    Ok(LossNodes { loss, ya, yb })
}

fn collect_samples(g: &Graph, id: NodeId) -> Vec<Vec<f64>> {
    let v = g.value(id);
    (0..v.rows()).map(|r| v.row(r).to_vec()).collect()
}

fn batch_tensors(
    items: &ItemTable,
    batch: &[Comparison],
) -> Result<(Tensor, Tensor, Vec<f64>), RaterError> {
    let xa: Vec<&[f64]> = batch
        .iter()
        .map(|c| items.features(c.a()))
        .collect::<Result<_, _>>()?;
    let xb: Vec<&[f64]> = batch
        .iter()
        .map(|c| items.features(c.b()))
        .collect::<Result<_, _>>()?;
    let scores = batch.iter().map(Comparison::score_a).collect();
    Ok((Tensor::from_rows(&xa)?, Tensor::from_rows(&xb)?, scores))
}

/// Ranking loss of the model on a batch, with dropout masks and rating noise
/// drawn from `seed`. MC and UB share every sample under the same seed.
pub fn rank_loss(
    model: &EncoderModel,
    items: &ItemTable,
    batch: &[Comparison],
    samples: usize,
    seed: u64,
    variant: LossVariant,
) -> Result<RankLoss, RaterError> {
    if batch.is_empty() {
        return Err(RaterError::EmptyBatch);
    }
    let (xa, xb, scores) = batch_tensors(items, batch)?;
    let mut g = Graph::new();
    let h = model.net.register(&mut g, false)?;
    let a = model.encode_nodes(&mut g, &h, xa, Some(seed::derive(seed, 1)))?;
    let b = model.encode_nodes(&mut g, &h, xb, Some(seed::derive(seed, 2)))?;
    let nodes = build_loss(&mut g, &a, &b, &scores, samples.max(1), seed, variant)?;
    Ok(RankLoss {
        value: g.value(nodes.loss).item(),
        samples_a: collect_samples(&g, nodes.ya),
        samples_b: collect_samples(&g, nodes.yb),
    })
}

pub fn rank_loss_mc(
    model: &EncoderModel,
    items: &ItemTable,
    batch: &[Comparison],
    samples: usize,
    seed: u64,
) -> Result<RankLoss, RaterError> {
    rank_loss(model, items, batch, samples, seed, LossVariant::Mc)
}

pub fn rank_loss_ub(
    model: &EncoderModel,
    items: &ItemTable,
    batch: &[Comparison],
    samples: usize,
    seed: u64,
) -> Result<RankLoss, RaterError> {
    rank_loss(model, items, batch, samples, seed, LossVariant::Ub)
}

/// Ranking loss on given rating distributions instead of an encoder:
/// `pairs[i] = (rating_a, rating_b, S_A)`.
pub fn rank_loss_from_ratings(
    pairs: &[(GaussianRating, GaussianRating, f64)],
    samples: usize,
    seed: u64,
    variant: LossVariant,
) -> Result<RankLoss, RaterError> {
    if pairs.is_empty() {
        return Err(RaterError::EmptyBatch);
    }
    let n = pairs.len();
    let col = |f: &dyn Fn(&(GaussianRating, GaussianRating, f64)) -> f64| {
        Tensor::matrix(n, 1, pairs.iter().map(f).collect())
    };
    let mut g = Graph::new();
    let a = EncodedNodes {
        mu: g.input(col(&|p| p.0.mu)?)?,
        sigma: g.input(col(&|p| p.0.sigma)?)?,
    };
    let b = EncodedNodes {
        mu: g.input(col(&|p| p.1.mu)?)?,
        sigma: g.input(col(&|p| p.1.sigma)?)?,
    };
    let scores: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    let nodes = build_loss(&mut g, &a, &b, &scores, samples.max(1), seed, variant)?;
    Ok(RankLoss {
        value: g.value(nodes.loss).item(),
        samples_a: collect_samples(&g, nodes.ya),
        samples_b: collect_samples(&g, nodes.yb),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
        }
    }
}

impl TrainOptions {
    /// Epoch count that gives roughly `steps` optimizer steps on `pairs`
    /// comparisons, bounded to `[1, max_epochs]`.
    pub fn for_steps(steps: usize, pairs: usize, batch_size: usize, max_epochs: usize) -> Self {
        let per_epoch = pairs.div_ceil(batch_size.max(1)).max(1);
        Self {
            epochs: steps.div_ceil(per_epoch).clamp(1, max_epochs.max(1)),
            batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Minimizes the configured ranking loss plus decoupled weight decay.
/// Dropout is active on every training pass.
pub fn train(
    model: &mut EncoderModel,
    items: &ItemTable,
    comparisons: &[Comparison],
    opts: &TrainOptions,
) -> Result<TrainReport, RaterError> {
    for c in comparisons {
        items.features(c.a())?;
        items.features(c.b())?;
    }
    model.check_width(items.dim())?;
    let mut report = TrainReport::default();
    if opts.epochs == 0 || comparisons.is_empty() {
        return Ok(report);
    }
    let cfg = model.config.clone();
    let batch_size = opts.batch_size.max(1);
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut shuffle_rng = seed::rng_for(cfg.seed, TAG_SHUFFLE);
    let mut order: Vec<usize> = (0..comparisons.len()).collect();
    let mut params = model.net.params();

    for _ in 0..opts.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<Comparison> = chunk.iter().map(|&i| comparisons[i]).collect();
            let (xa, xb, scores) = batch_tensors(items, &batch)?;
            let step_seed = seed::derive(seed::derive(cfg.seed, TAG_STEP), report.steps);
            let mut g = Graph::new();
            let h = model.net.register(&mut g, true)?;
            let a = model.encode_nodes(&mut g, &h, xa, Some(seed::derive(step_seed, 1)))?;
            let b = model.encode_nodes(&mut g, &h, xb, Some(seed::derive(step_seed, 2)))?;
            let nodes = build_loss(&mut g, &a, &b, &scores, cfg.mc_samples, step_seed, cfg.loss)?;
            total += g.value(nodes.loss).item();
            batches += 1;
            g.backward(nodes.loss)?;
            let grads: Vec<Tensor> = h
                .params()
                .iter()
                .zip(&params)
                .map(|(id, p)| g.grad(*id).cloned().unwrap_or_else(|| p.map(|_| 0.0)))
                .collect();
            opt.step(&mut params, &grads)?;
            model.net.set_params(params.clone())?;
            report.steps += 1;
        }
        report.epoch_losses.push(total / batches as f64);
    }
    Ok(report)
}
