//! Items, comparisons and their CSV formats.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u64);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: ItemId,
    pub features: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("duplicate item id {0}")]
    DuplicateId(ItemId),
    #[error("item {id} has {got} features, expected {expected}")]
    Width { id: ItemId, got: usize, expected: usize },
    #[error("unknown item id {0}")]
    UnknownItem(ItemId),
    #[error("comparison of item {0} with itself")]
    SelfComparison(ItemId),
    #[error("invalid outcome {0:?}; expected 1, 0.5 or 0")]
    InvalidOutcome(String),
    #[error("empty item table")]
    Empty,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed csv: {0}")]
    Malformed(String),
}

/// Items with a fixed feature width, addressable by id.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemTable {
    items: Vec<Item>,
    index: HashMap<ItemId, usize>,
    dim: usize,
}

impl ItemTable {
    pub fn new(items: Vec<Item>) -> Result<Self, DataError> {
        let dim = items.first().ok_or(DataError::Empty)?.features.len();
        let mut index = HashMap::with_capacity(items.len());
        for (i, it) in items.iter().enumerate() {
            if it.features.len() != dim {
                return Err(DataError::Width {
                    id: it.id,
                    got: it.features.len(),
                    expected: dim,
                });
            }
            if index.insert(it.id, i).is_some() {
                return Err(DataError::DuplicateId(it.id));
            }
        }
        Ok(Self { items, index, dim })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn ids(&self) -> Vec<ItemId> {
        self.items.iter().map(|i| i.id).collect()
    }

    pub fn position(&self, id: ItemId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn features(&self, id: ItemId) -> Result<&[f64], DataError> {
        self.position(id)
            .map(|i| self.items[i].features.as_slice())
            .ok_or(DataError::UnknownItem(id))
    }

    pub fn feature_rows(&self) -> Vec<&[f64]> {
        self.items.iter().map(|i| i.features.as_slice()).collect()
    }

    /// Writes `id,feat_0..feat_{d-1}`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DataError> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["id".to_string()];
        header.extend((0..self.dim).map(|j| format!("feat_{j}")));
        wr.write_record(&header)?;
        for it in &self.items {
            let mut rec = vec![it.id.to_string()];
            rec.extend(it.features.iter().map(|v| format_f64(*v)));
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, DataError> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers()?.clone();
        if headers.get(0) != Some("id") {
            return Err(DataError::Malformed("first column must be `id`".into()));
        }
        for (j, h) in headers.iter().skip(1).enumerate() {
            if h != format!("feat_{j}") {
                return Err(DataError::Malformed(format!("unexpected column {h:?}")));
            }
        }
        let mut items = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let id = parse_id(&rec[0])?;
            let features = rec
                .iter()
                .skip(1)
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| DataError::Malformed(format!("bad feature {v:?}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            items.push(Item { id, features });
        }
        Self::new(items)
    }
}

fn parse_id(s: &str) -> Result<ItemId, DataError> {
    s.trim()
        .parse::<u64>()
        .map(ItemId)
        .map_err(|_| DataError::Malformed(format!("bad id {s:?}")))
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_f64(v: f64) -> String {
    let s = format!("{v:?}");
    s.strip_suffix(".0").map(str::to_owned).unwrap_or(s)
}

/// Annotated score of the first item: win, tie or loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Win,
    Tie,
    Loss,
}

impl Outcome {
    pub fn score(self) -> f64 {
        match self {
            Outcome::Win => 1.0,
            Outcome::Tie => 0.5,
            Outcome::Loss => 0.0,
        }
    }

    pub fn from_score(s: f64) -> Option<Self> {
        if s == 1.0 {
            Some(Outcome::Win)
        } else if s == 0.5 {
            Some(Outcome::Tie)
        } else if s == 0.0 {
            Some(Outcome::Loss)
        } else {
            None
        }
    }

    /// Outcome seen from the other item.
    pub fn flipped(self) -> Self {
        match self {
            Outcome::Win => Outcome::Loss,
            Outcome::Tie => Outcome::Tie,
            Outcome::Loss => Outcome::Win,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Win => "1",
            Outcome::Tie => "0.5",
            Outcome::Loss => "0",
        })
    }
}

impl FromStr for Outcome {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim()
            .parse::<f64>()
            .ok()
            .and_then(Outcome::from_score)
            .ok_or_else(|| DataError::InvalidOutcome(s.to_string()))
    }
}

/// One annotated pair. `S_B` is always `1 - S_A` and is never stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Comparison {
    a: ItemId,
    b: ItemId,
    outcome: Outcome,
}

impl Comparison {
    pub fn new(a: ItemId, b: ItemId, outcome: Outcome) -> Result<Self, DataError> {
        if a == b {
            return Err(DataError::SelfComparison(a));
        }
        Ok(Self { a, b, outcome })
    }

    pub fn a(&self) -> ItemId {
        self.a
    }

    pub fn b(&self) -> ItemId {
        self.b
    }

    pub fn outcome(&self) -> Outcome {
        self.outcome
    }

    pub fn score_a(&self) -> f64 {
        self.outcome.score()
    }

    pub fn score_b(&self) -> f64 {
        1.0 - self.outcome.score()
    }

    pub fn is_tie(&self) -> bool {
        self.outcome == Outcome::Tie
    }
}

/// Writes the `id_a,id_b,outcome` comparisons file.
pub fn write_comparisons<W: Write>(w: W, comparisons: &[Comparison]) -> Result<(), DataError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["id_a", "id_b", "outcome"])?;
    for c in comparisons {
        wr.write_record([c.a.to_string(), c.b.to_string(), c.outcome.to_string()])?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn comparison_csv_line(c: &Comparison) -> String {
    format!("{},{},{}\n", c.a, c.b, c.outcome)
}

pub fn read_comparisons<R: Read>(r: R) -> Result<Vec<Comparison>, DataError> {
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id_a", "id_b", "outcome"] {
        return Err(DataError::Malformed(format!(
            "expected header id_a,id_b,outcome, got {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    rd.records()
        .map(|rec| {
            let rec = rec?;
            Comparison::new(parse_id(&rec[0])?, parse_id(&rec[1])?, rec[2].parse()?)
        })
        .collect()
}
