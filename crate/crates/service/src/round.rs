//! One retrain round and its serialized snapshot. The live service and the
//! offline replay both go through [`train_round`], so a saved log reproduces
//! every snapshot exactly.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use prefrank_core::pairs::{
    pseudo_label, sample_pairs_excluding, PseudoLabel, Strategy, UnorderedPair,
};
use prefrank_core::rater::{train, ModelSnapshot, TrainOptions};
use prefrank_core::synth::spearman;
use prefrank_core::{seed, Comparison, EncoderModel, ItemId, ItemTable};

use crate::{ServiceConfig, ServiceError};

const TAG_PREDICT: u64 = 0x9ed1;
const TAG_PSEUDO: u64 = 0x95e0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingRow {
    pub id: ItemId,
    pub mean: f64,
    pub epistemic: f64,
    pub aleatoric: f64,
    pub total: f64,
}

/// Model and rating table after round `round`.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub round: u64,
    /// Log prefix the model was trained on.
    pub annotations: usize,
    pub pseudo_pairs: usize,
    pub predict_seed: u64,
    pub model: EncoderModel,
    pub ratings: Vec<RatingRow>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotFile {
    round: u64,
    annotations: usize,
    pseudo_pairs: usize,
    predict_seed: u64,
    model: ModelSnapshot,
    ratings: Vec<RatingRow>,
}

impl Snapshot {
    pub fn means(&self) -> Vec<f64> {
        self.ratings.iter().map(|r| r.mean).collect()
    }

    pub fn to_json(&self) -> String {
        let file = SnapshotFile {
            round: self.round,
            annotations: self.annotations,
            pseudo_pairs: self.pseudo_pairs,
            predict_seed: self.predict_seed,
            model: self.model.snapshot(),
            ratings: self.ratings.clone(),
        };
        serde_json::to_string_pretty(&file).expect("snapshot serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ServiceError> {
        let f: SnapshotFile =
            serde_json::from_str(s).map_err(|e| ServiceError::Snapshot(e.to_string()))?;
        Ok(Self {
            round: f.round,
            annotations: f.annotations,
            pseudo_pairs: f.pseudo_pairs,
            predict_seed: f.predict_seed,
            model: EncoderModel::from_snapshot(f.model)?,
            ratings: f.ratings,
        })
    }

    /// Spearman correlation of the mean ratings of two snapshots.
    pub fn agreement(&self, other: &Snapshot) -> Option<f64> {
        spearman(&self.means(), &other.means()).ok()
    }
}

/// Rating table of `model` over every item, in table order.
pub fn rating_table(
    model: &EncoderModel,
    items: &ItemTable,
    predict_seed: u64,
) -> Result<Vec<RatingRow>, ServiceError> {
    let rows = items.feature_rows();
    let est = model.predict_table(&rows, model.config().predict_passes, predict_seed)?;
    Ok(items
        .items()
        .iter()
        .zip(est)
        .map(|(it, e)| RatingRow {
            id: it.id,
            mean: e.mean,
            epistemic: e.epistemic,
            aleatoric: e.aleatoric,
            total: e.total,
        })
        .collect())
}

/// Trains round `round` from scratch on the first `round · R` comparisons.
/// With the hard+pseudo strategy the previous snapshot labels easy pairs that
/// are added to the training set.
pub fn train_round(
    cfg: &ServiceConfig,
    items: &ItemTable,
    log: &[Comparison],
    previous: Option<&Snapshot>,
    round: u64,
) -> Result<Snapshot, ServiceError> {
    let annotations = round as usize * cfg.round_size;
    if log.len() < annotations {
        return Err(ServiceError::ShortLog {
            round,
            needed: annotations,
            got: log.len(),
        });
    }
    let round_seed = seed::derive(cfg.seed, round);
    let mut data = log[..annotations].to_vec();
    let mut pseudo_pairs = 0;
    if let (Strategy::HardPseudo, Some(prev)) = (cfg.sampler.strategy, previous) {
        let ids = items.ids();
        let annotated: HashSet<UnorderedPair> =
            data.iter().map(|c| UnorderedPair::new(c.a(), c.b())).collect();
        let count = (annotations as f64 * cfg.sampler.pseudo_ratio).round() as usize;
        let mut rng = seed::rng_for(round_seed, TAG_PSEUDO);
        let mut easy_cfg = cfg.sampler.clone();
        easy_cfg.strategy = Strategy::Easy;
        let picked =
            sample_pairs_excluding(&easy_cfg, &ids, Some(&prev.means()), count, &annotated, &mut rng)?;
        for (a, b) in picked.query {
            let fa = items.features(a)?;
            let fb = items.features(b)?;
            if let PseudoLabel::Label(c) = pseudo_label(&prev.model, (a, b), (fa, fb), &cfg.pseudo)? {
                data.push(c);
                pseudo_pairs += 1;
            }
        }
    }
    let mut enc = cfg.encoder.clone();
    enc.input_dim = items.dim();
    enc.seed = round_seed;
    let mut model = EncoderModel::new(enc)?;
    let opts = TrainOptions::for_steps(cfg.train_steps, data.len(), cfg.batch_size, cfg.max_epochs);
    train(&mut model, items, &data, &opts)?;
    let predict_seed = seed::derive(round_seed, TAG_PREDICT);
    let ratings = rating_table(&model, items, predict_seed)?;
    Ok(Snapshot {
        round,
        annotations,
        pseudo_pairs,
        predict_seed,
        model,
        ratings,
    })
}

/// Every snapshot a session with this log produces, in round order.
pub fn replay(
    cfg: &ServiceConfig,
    items: &ItemTable,
    log: &[Comparison],
) -> Result<Vec<Snapshot>, ServiceError> {
    let rounds = (log.len() / cfg.round_size) as u64;
    let mut out: Vec<Snapshot> = Vec::with_capacity(rounds as usize);
    for k in 1..=rounds {
        let snap = train_round(cfg, items, log, out.last(), k)?;
        out.push(snap);
    }
    Ok(out)
}
