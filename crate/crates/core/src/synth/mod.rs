//! Synthetic datasets with a hidden ground-truth attribute, rank metrics and
//! the rating experiments built on them.
//!
//! Training code sees only the [`ItemTable`]; the attribute values live in a
//! [`GroundTruth`] oracle that answers annotation queries.

mod experiments;
mod generation;
mod metrics;

pub use experiments::*;
pub use generation::*;
pub use metrics::{expected_risk, risk_brute_force, spearman, RiskReport};

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{format_f64, DataError, Item, ItemId, ItemTable};
use crate::pairs::PairsError;
use crate::rater::RaterError;
use crate::seed;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("values have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Rater(#[from] RaterError),
    #[error(transparent)]
    Pairs(#[from] PairsError),
    #[error(transparent)]
    Congen(#[from] crate::congen::CongenError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// `Ω = w·x` for a random unit direction `w`.
    Linear,
    /// `Ω = ‖x − c‖`, with points spread so that `Ω` is near uniform.
    Radial,
    /// 2-D annulus, `Ω` is the radius.
    Ring,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Linear => "linear",
            DatasetKind::Radial => "radial",
            DatasetKind::Ring => "ring",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(DatasetKind::Linear),
            "radial" => Ok(DatasetKind::Radial),
            "ring" => Ok(DatasetKind::Ring),
            other => Err(SynthError::Invalid {
                field: "kind",
                reason: format!("unknown dataset kind {other:?}"),
            }),
        }
    }
}

const RING_INNER: f64 = 1.0;
const RING_OUTER: f64 = 2.0;

/// How the attribute is computed from standardized features.
#[derive(Clone, Debug, PartialEq)]
enum Geometry {
    Linear { w: Vec<f64> },
    Radial { center: Vec<f64> },
    Ring { mean: Vec<f64>, std: Vec<f64> },
}

impl Geometry {
    fn attribute(&self, x: &[f64]) -> f64 {
        match self {
            Geometry::Linear { w } => dot(x, w),
            Geometry::Radial { center } => {
                x.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            }
            Geometry::Ring { mean, std } => x
                .iter()
                .zip(mean.iter().zip(std))
                .map(|(v, (m, s))| (v * s + m).powi(2))
                .sum::<f64>()
                .sqrt(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            Geometry::Linear { w } => w.len(),
            Geometry::Radial { center } => center.len(),
            Geometry::Ring { mean, .. } => mean.len(),
        }
    }
}

/// Hidden attribute values, keyed by item id.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    ids: Vec<ItemId>,
    omega: Vec<f64>,
    index: HashMap<ItemId, usize>,
    geometry: Option<Geometry>,
}

impl GroundTruth {
    pub fn new(values: Vec<(ItemId, f64)>) -> Result<Self, SynthError> {
        let mut index = HashMap::with_capacity(values.len());
        let mut ids = Vec::with_capacity(values.len());
        let mut omega = Vec::with_capacity(values.len());
        for (i, (id, w)) in values.into_iter().enumerate() {
            if !w.is_finite() {
                return Err(SynthError::Invalid {
                    field: "omega",
                    reason: format!("non-finite value for item {id}"),
                });
            }
            if index.insert(id, i).is_some() {
                return Err(DataError::DuplicateId(id).into());
            }
            ids.push(id);
            omega.push(w);
        }
        Ok(Self {
            ids,
            omega,
            index,
            geometry: None,
        })
    }

    /// Attribute of an arbitrary point in feature space, e.g. a generated
    /// sample. Only available for generated datasets.
    pub fn attribute_at(&self, features: &[f64]) -> Result<f64, SynthError> {
        let g = self.geometry.as_ref().ok_or_else(|| SynthError::Invalid {
            field: "oracle",
            reason: "attribute geometry unknown for loaded oracles".into(),
        })?;
        if features.len() != g.dim() {
            return Err(SynthError::LengthMismatch(features.len(), g.dim()));
        }
        Ok(g.attribute(features))
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn omega(&self, id: ItemId) -> Result<f64, SynthError> {
        self.index
            .get(&id)
            .map(|&i| self.omega[i])
            .ok_or_else(|| DataError::UnknownItem(id).into())
    }

    /// Values in the order of `ids`.
    pub fn values_for(&self, ids: &[ItemId]) -> Result<Vec<f64>, SynthError> {
        ids.iter().map(|&id| self.omega(id)).collect()
    }

    /// `max Ω − min Ω`.
    pub fn range(&self) -> f64 {
        let (lo, hi) = self
            .omega
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &w| (l.min(w), h.max(w)));
        if self.omega.is_empty() {
            0.0
        } else {
            hi - lo
        }
    }

    /// Writes `id,omega`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SynthError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["id", "omega"]).map_err(DataError::from)?;
        for (id, w) in self.ids.iter().zip(&self.omega) {
            wr.write_record([id.to_string(), format_f64(*w)])
                .map_err(DataError::from)?;
        }
        wr.flush().map_err(|e| DataError::Csv(e.into()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, SynthError> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers().map_err(DataError::from)?.clone();
        if headers.iter().collect::<Vec<_>>() != ["id", "omega"] {
            return Err(DataError::Malformed("expected header id,omega".into()).into());
        }
        let mut values = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(DataError::from)?;
            let id = rec[0]
                .trim()
                .parse::<u64>()
                .map_err(|_| DataError::Malformed(format!("bad id {:?}", &rec[0])))?;
            let w = rec[1]
                .trim()
                .parse::<f64>()
                .map_err(|_| DataError::Malformed(format!("bad omega {:?}", &rec[1])))?;
            values.push((ItemId(id), w));
        }
        Self::new(values)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub kind: DatasetKind,
    pub items: ItemTable,
    pub truth: GroundTruth,
}

impl SyntheticDataset {
    pub fn generate(kind: DatasetKind, n: usize, d: usize, seed: u64) -> Result<Self, SynthError> {
        if n < 2 {
            return Err(SynthError::Invalid {
                field: "n",
                reason: format!("need at least 2 items, got {n}"),
            });
        }
        if d == 0 {
            return Err(SynthError::Invalid {
                field: "d",
                reason: "must be >= 1".into(),
            });
        }
        if kind == DatasetKind::Ring && d != 2 {
            return Err(SynthError::Invalid {
                field: "d",
                reason: format!("ring datasets are 2-D, got d={d}"),
            });
        }
        let mut rng = seed::rng(seed);
        let raw: Vec<Vec<f64>> = match kind {
            DatasetKind::Linear => (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
            DatasetKind::Radial => (0..n)
                .map(|_| {
                    let r: f64 = rng.random_range(0.0..1.0);
                    scaled(unit_vector(d, &mut rng), r)
                })
                .collect(),
            DatasetKind::Ring => (0..n)
                .map(|_| {
                    let r = rng.random_range(RING_INNER..RING_OUTER);
                    scaled(unit_vector(2, &mut rng), r)
                })
                .collect(),
        };
        let (x, mean, std) = standardize(&raw);
        let geometry = match kind {
            DatasetKind::Linear => Geometry::Linear {
                w: if d == 1 { vec![1.0] } else { unit_vector(d, &mut rng) },
            },
            // distance from the generating center, measured in standardized units
            DatasetKind::Radial => Geometry::Radial {
                center: mean.iter().zip(&std).map(|(m, s)| -m / s).collect(),
            },
            DatasetKind::Ring => Geometry::Ring { mean, std },
        };
        let omega: Vec<f64> = x.iter().map(|row| geometry.attribute(row)).collect();
        let items = x
            .into_iter()
            .enumerate()
            .map(|(i, features)| Item {
                id: ItemId(i as u64),
                features,
            })
            .collect();
        let mut truth = GroundTruth::new(
            omega
                .into_iter()
                .enumerate()
                .map(|(i, w)| (ItemId(i as u64), w))
                .collect(),
        )?;
        truth.geometry = Some(geometry);
        Ok(Self {
            kind,
            items: ItemTable::new(items)?,
            truth,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn unit_vector(d: usize, rng: &mut seed::Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn scaled(v: Vec<f64>, r: f64) -> Vec<f64> {
    v.into_iter().map(|x| x * r).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-column zero mean, unit variance. Constant columns are only centered.
fn standardize(rows: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            std[j] += (r[j] - mean[j]).powi(2) / n;
        }
    }
    for s in &mut std {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    let x = rows
        .iter()
        .map(|r| (0..d).map(|j| (r[j] - mean[j]) / std[j]).collect())
        .collect();
    (x, mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_1d_attribute_is_the_feature() {
        let ds = SyntheticDataset::generate(DatasetKind::Linear, 50, 1, 3).unwrap();
        for it in ds.items.items() {
            assert_eq!(ds.truth.omega(it.id).unwrap(), it.features[0]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in [DatasetKind::Linear, DatasetKind::Radial, DatasetKind::Ring] {
            let a = SyntheticDataset::generate(kind, 40, 2, 9).unwrap();
            let b = SyntheticDataset::generate(kind, 40, 2, 9).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn features_are_standardized() {
        let ds = SyntheticDataset::generate(DatasetKind::Radial, 500, 3, 1).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = ds.items.items().iter().map(|i| i.features[j]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn radial_histogram_has_no_empty_decile() {
        let ds = SyntheticDataset::generate(DatasetKind::Radial, 10_000, 2, 4).unwrap();
        let w = ds.truth.values_for(ds.truth.ids()).unwrap();
        let lo = w.iter().cloned().fold(f64::INFINITY, f64::min);
        let range = ds.truth.range();
        let mut bins = [0usize; 10];
        for v in w {
            bins[(((v - lo) / range * 10.0) as usize).min(9)] += 1;
        }
        assert!(bins.iter().all(|&b| b > 0), "{bins:?}");
    }

    #[test]
    fn ring_radius_stays_in_the_annulus() {
        let ds = SyntheticDataset::generate(DatasetKind::Ring, 300, 2, 2).unwrap();
        for id in ds.truth.ids() {
            let r = ds.truth.omega(*id).unwrap();
            assert!((RING_INNER..RING_OUTER).contains(&r));
        }
        assert!(SyntheticDataset::generate(DatasetKind::Ring, 10, 3, 0).is_err());
    }

    #[test]
    fn invalid_sizes() {
        assert!(SyntheticDataset::generate(DatasetKind::Linear, 1, 2, 0).is_err());
        assert!(SyntheticDataset::generate(DatasetKind::Linear, 10, 0, 0).is_err());
    }

    #[test]
    fn oracle_csv_round_trip() {
        let ds = SyntheticDataset::generate(DatasetKind::Ring, 20, 2, 5).unwrap();
        let mut buf = Vec::new();
        ds.truth.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"id,omega\n"));
        let loaded = GroundTruth::read_csv(buf.as_slice()).unwrap();
        assert_eq!(loaded.values_for(loaded.ids()).unwrap(), ds.truth.values_for(ds.truth.ids()).unwrap());
        assert!(loaded.attribute_at(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn attribute_at_matches_stored_values() {
        for kind in [DatasetKind::Linear, DatasetKind::Radial, DatasetKind::Ring] {
            let ds = SyntheticDataset::generate(kind, 50, 2, 8).unwrap();
            for it in ds.items.items() {
                let a = ds.truth.attribute_at(&it.features).unwrap();
                assert!((a - ds.truth.omega(it.id).unwrap()).abs() < 1e-12);
            }
        }
    }
}
