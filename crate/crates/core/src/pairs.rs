//! Pair sampling, simulated annotation and pseudo-labeling.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Comparison, ItemId, Outcome};
use crate::rater::{win_probability_transitive, EncoderModel, RaterError};
use crate::seed::{self, Rng};

#[derive(Debug, Error)]
pub enum PairsError {
    #[error("pool of {0} items is too small to form a pair")]
    PoolTooSmall(usize),
    #[error("ratings cover {got} items, pool has {expected}")]
    RatingsLength { expected: usize, got: usize },
    #[error("invalid `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error(transparent)]
    Rater(#[from] RaterError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Uniform pairs, with repetition.
    Random,
    /// Largest rating gap among the candidates.
    Easy,
    /// Smallest rating gap among the candidates.
    Hard,
    /// Hard pairs go to the annotator, easy pairs to pseudo-labeling.
    HardPseudo,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Random,
        Strategy::Easy,
        Strategy::Hard,
        Strategy::HardPseudo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Easy => "easy",
            Strategy::Hard => "hard",
            Strategy::HardPseudo => "hard-pseudo",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = PairsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" | "rand" => Ok(Strategy::Random),
            "easy" => Ok(Strategy::Easy),
            "hard" => Ok(Strategy::Hard),
            "hard-pseudo" | "hard+pseudo" => Ok(Strategy::HardPseudo),
            other => Err(PairsError::UnknownStrategy(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    /// Random candidate pairs scored per selected pair. When it reaches
    /// `n(n-1)/2` every pair is a candidate.
    pub candidate_pool: usize,
    /// Easy pairs routed to pseudo-labeling per queried hard pair.
    pub pseudo_ratio: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Random,
            candidate_pool: 256,
            pseudo_ratio: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Default::default()
        }
    }
}

/// A pair without orientation, for duplicate and pending bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct UnorderedPair(ItemId, ItemId);

impl UnorderedPair {
    pub fn new(a: ItemId, b: ItemId) -> Self {
        if a <= b {
            Self(a, b)
        } else {
            Self(b, a)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampledPairs {
    /// Pairs that go to the annotator.
    pub query: Vec<(ItemId, ItemId)>,
    /// Pairs the model labels itself (HardPseudo only).
    pub pseudo: Vec<(ItemId, ItemId)>,
}

/// Draws `count` pairs for annotation from `pool`. `ratings[i]` is the current
/// mean rating of `pool[i]`; without ratings every gap is equal and the
/// gap-based strategies reduce to uniform picks.
pub fn sample_pairs(
    cfg: &SamplerConfig,
    pool: &[ItemId],
    ratings: Option<&[f64]>,
    count: usize,
    seed: u64,
) -> Result<SampledPairs, PairsError> {
    let mut rng = seed::rng(seed);
    sample_pairs_excluding(cfg, pool, ratings, count, &HashSet::new(), &mut rng)
}

/// [`sample_pairs`] that never returns a pair in `exclude`. May return fewer
/// than `count` pairs when the exclusions leave nothing to pick.
pub fn sample_pairs_excluding(
    cfg: &SamplerConfig,
    pool: &[ItemId],
    ratings: Option<&[f64]>,
    count: usize,
    exclude: &HashSet<UnorderedPair>,
    rng: &mut Rng,
) -> Result<SampledPairs, PairsError> {
    let n = pool.len();
    if n < 2 {
        return Err(PairsError::PoolTooSmall(n));
    }
    if let Some(r) = ratings {
        if r.len() != n {
            return Err(PairsError::RatingsLength {
                expected: n,
                got: r.len(),
            });
        }
    }
    if cfg.candidate_pool == 0 {
        return Err(PairsError::Config {
            field: "candidate_pool",
            reason: "must be >= 1".into(),
        });
    }
    let gap = |i: usize, j: usize| ratings.map_or(0.0, |r| (r[i] - r[j]).abs());
    let to_ids = |v: Vec<(usize, usize)>| v.into_iter().map(|(i, j)| (pool[i], pool[j])).collect();

    match cfg.strategy {
        Strategy::Random => Ok(SampledPairs {
            query: to_ids(random_pairs(n, count, exclude, pool, rng)),
            pseudo: Vec::new(),
        }),
        Strategy::Hard | Strategy::Easy => {
            let hard = cfg.strategy == Strategy::Hard;
            let mut taken = exclude.clone();
            let picked = mine(cfg, n, count, hard, &gap, &mut taken, pool, rng);
            Ok(SampledPairs {
                query: to_ids(picked),
                pseudo: Vec::new(),
            })
        }
        Strategy::HardPseudo => {
            let mut taken = exclude.clone();
            let query = mine(cfg, n, count, true, &gap, &mut taken, pool, rng);
            let n_pseudo = (count as f64 * cfg.pseudo_ratio.max(0.0)).round() as usize;
            let pseudo = mine(cfg, n, n_pseudo, false, &gap, &mut taken, pool, rng);
            Ok(SampledPairs {
                query: to_ids(query),
                pseudo: to_ids(pseudo),
            })
        }
    }
}

fn draw_pair(n: usize, rng: &mut Rng) -> (usize, usize) {
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    (i, j)
}

fn all_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

fn random_pairs(
    n: usize,
    count: usize,
    exclude: &HashSet<UnorderedPair>,
    pool: &[ItemId],
    rng: &mut Rng,
) -> Vec<(usize, usize)> {
    let blocked = |p: (usize, usize)| exclude.contains(&UnorderedPair::new(pool[p.0], pool[p.1]));
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut found = None;
        for _ in 0..64 {
            let p = draw_pair(n, rng);
            if !blocked(p) {
                found = Some(p);
                break;
            }
        }
        if found.is_none() {
            let free: Vec<_> = all_pairs(n).filter(|&p| !blocked(p)).collect();
            if free.is_empty() {
                break;
            }
            found = Some(free[rng.random_range(0..free.len())]);
        }
        out.extend(found);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn mine(
    cfg: &SamplerConfig,
    n: usize,
    count: usize,
    hard: bool,
    gap: &dyn Fn(usize, usize) -> f64,
    taken: &mut HashSet<UnorderedPair>,
    pool: &[ItemId],
    rng: &mut Rng,
) -> Vec<(usize, usize)> {
    let total_pairs = n * (n - 1) / 2;
    let exhaustive = cfg.candidate_pool >= total_pairs;
    let better = |a: f64, b: f64| if hard { a < b } else { a > b };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let candidates: Vec<(usize, usize)> = if exhaustive {
            all_pairs(n).collect()
        } else {
            (0..cfg.candidate_pool).map(|_| draw_pair(n, rng)).collect()
        };
        let mut best: Option<((usize, usize), f64)> = None;
        for &c in &candidates {
            if taken.contains(&UnorderedPair::new(pool[c.0], pool[c.1])) {
                continue;
            }
            let g = gap(c.0, c.1);
            if best.is_none_or(|(_, bg)| better(g, bg)) {
                best = Some((c, g));
            }
        }
        let pick = match best {
            Some((c, _)) => c,
            // every candidate was already used
            None if exhaustive => {
                if total_pairs == 1 {
                    (0, 1)
                } else {
                    break;
                }
            }
            None => candidates[0],
        };
        taken.insert(UnorderedPair::new(pool[pick.0], pool[pick.1]));
        out.push(pick);
    }
    out
}

/// Simulated annotator: each attribute is perturbed by independent
/// `Uniform(-w, w)` noise, and gaps within the tie margin are reported as ties.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotatorModel {
    pub tie_margin: f64,
    pub noise_half_width: f64,
    pub seed: u64,
}

impl Default for AnnotatorModel {
    fn default() -> Self {
        Self {
            tie_margin: 0.0,
            noise_half_width: 0.0,
            seed: 0,
        }
    }
}

impl AnnotatorModel {
    pub fn validate(&self) -> Result<(), PairsError> {
        if !(self.tie_margin >= 0.0 && self.tie_margin.is_finite()) {
            return Err(PairsError::Config {
                field: "tie_margin",
                reason: "must be finite and >= 0".into(),
            });
        }
        if !(self.noise_half_width >= 0.0 && self.noise_half_width.is_finite()) {
            return Err(PairsError::Config {
                field: "noise_half_width",
                reason: "must be finite and >= 0".into(),
            });
        }
        Ok(())
    }

    /// Outcome for fixed noise draws `za`, `zb`.
    pub fn judge(&self, omega_a: f64, omega_b: f64, za: f64, zb: f64) -> Outcome {
        let (a, b) = (omega_a + za, omega_b + zb);
        if (a - b).abs() <= self.tie_margin {
            Outcome::Tie
        } else if a > b {
            Outcome::Win
        } else {
            Outcome::Loss
        }
    }
}

/// Stateful annotator that draws noise and counts the queries it answers.
#[derive(Clone, Debug)]
pub struct Annotator {
    model: AnnotatorModel,
    rng: Rng,
    queries: u64,
}

impl Annotator {
    pub fn new(model: AnnotatorModel) -> Result<Self, PairsError> {
        model.validate()?;
        Ok(Self {
            rng: seed::rng(model.seed),
            model,
            queries: 0,
        })
    }

    pub fn model(&self) -> &AnnotatorModel {
        &self.model
    }

    pub fn queries(&self) -> u64 {
        self.queries
    }

    pub fn annotate(&mut self, omega_a: f64, omega_b: f64) -> Outcome {
        self.queries += 1;
        let w = self.model.noise_half_width;
        let (za, zb) = if w > 0.0 {
            (
                self.rng.random_range(-w..=w),
                self.rng.random_range(-w..=w),
            )
        } else {
            (0.0, 0.0)
        };
        self.model.judge(omega_a, omega_b, za, zb)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoPolicy {
    /// Confidence `τ ∈ (0.5, 1]` needed to emit a label.
    pub threshold: f64,
}

impl Default for PseudoPolicy {
    fn default() -> Self {
        Self { threshold: 0.9 }
    }
}

impl PseudoPolicy {
    pub fn validate(&self) -> Result<(), PairsError> {
        if !(self.threshold > 0.5 && self.threshold <= 1.0) {
            return Err(PairsError::Config {
                field: "threshold",
                reason: format!("{} outside (0.5, 1]", self.threshold),
            });
        }
        Ok(())
    }

    /// `Win` if `p >= τ`, `Loss` if `p <= 1 - τ`, otherwise no label.
    pub fn label(&self, p: f64) -> Option<Outcome> {
        if p >= self.threshold {
            Some(Outcome::Win)
        } else if p <= 1.0 - self.threshold {
            Some(Outcome::Loss)
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PseudoLabel {
    Label(Comparison),
    Discard,
}

/// Labels `(a, b)` with the model's own transitive win probability, using the
/// deterministic pass (μ and the aleatoric σ).
pub fn pseudo_label(
    model: &EncoderModel,
    pair: (ItemId, ItemId),
    features: (&[f64], &[f64]),
    policy: &PseudoPolicy,
) -> Result<PseudoLabel, PairsError> {
    policy.validate()?;
    let r = model.encode_rows(&[features.0, features.1], None)?;
    let p = win_probability_transitive(r[0], r[1]);
    Ok(match policy.label(p) {
        Some(o) => PseudoLabel::Label(
            Comparison::new(pair.0, pair.1, o).map_err(|e| PairsError::Config {
                field: "pair",
                reason: e.to_string(),
            })?,
        ),
        None => PseudoLabel::Discard,
    })
}

/// Keeps decisive comparisons only, in their original order.
pub fn filter_equal(comparisons: &[Comparison]) -> Vec<Comparison> {
    comparisons.iter().filter(|c| !c.is_tie()).copied().collect()
}
