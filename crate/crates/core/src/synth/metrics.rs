use serde::Serialize;

use super::{GroundTruth, SynthError};
use crate::data::ItemId;

/// Average ranks (1-based); tied values share the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties. A constant input
/// carries no ordering and gives 0.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, SynthError> {
    if a.len() != b.len() {
        return Err(SynthError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(SynthError::Invalid {
            field: "values",
            reason: "spearman needs at least 2 values".into(),
        });
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - mean, y - mean);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RiskReport {
    /// Items by descending rating, ties by ascending id.
    pub permutation: Vec<ItemId>,
    /// Pairs placed in the wrong order relative to the oracle.
    pub risk: u64,
    /// `n(n-1)/2`.
    pub pairs: u64,
}

impl RiskReport {
    pub fn normalized(&self) -> f64 {
        if self.pairs == 0 {
            0.0
        } else {
            self.risk as f64 / self.pairs as f64
        }
    }
}

fn permutation(ids: &[ItemId], ratings: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&i, &j| ratings[j].total_cmp(&ratings[i]).then(ids[i].cmp(&ids[j])));
    order
}

/// Ranks items by rating and counts pairs `(u, v)` with `u` ranked above `v`
/// although the oracle strictly prefers `v`. O(n log n).
pub fn expected_risk(
    ids: &[ItemId],
    ratings: &[f64],
    oracle: &GroundTruth,
) -> Result<RiskReport, SynthError> {
    if ids.len() != ratings.len() {
        return Err(SynthError::LengthMismatch(ids.len(), ratings.len()));
    }
    let order = permutation(ids, ratings);
    let mut seq = order
        .iter()
        .map(|&i| oracle.omega(ids[i]))
        .collect::<Result<Vec<_>, _>>()?;
    let risk = count_ascending_pairs(&mut seq);
    let n = ids.len() as u64;
    Ok(RiskReport {
        permutation: order.into_iter().map(|i| ids[i]).collect(),
        risk,
        pairs: n * n.saturating_sub(1) / 2,
    })
}

/// Reference O(n²) count over every pair.
pub fn risk_brute_force(
    ids: &[ItemId],
    ratings: &[f64],
    oracle: &GroundTruth,
) -> Result<u64, SynthError> {
    let order = permutation(ids, ratings);
    let w = order
        .iter()
        .map(|&i| oracle.omega(ids[i]))
        .collect::<Result<Vec<_>, _>>()?;
    let mut risk = 0;
    for i in 0..w.len() {
        for j in i + 1..w.len() {
            if w[j] > w[i] {
                risk += 1;
            }
        }
    }
    Ok(risk)
}

/// Number of `i < j` with `v[i] < v[j]`, by merge sort (sorts `v` descending).
fn count_ascending_pairs(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = count_ascending_pairs(&mut v[..mid]) + count_ascending_pairs(&mut v[mid..]);
    let (left, right) = (v[..mid].to_vec(), v[mid..].to_vec());
    let (mut i, mut j, mut k) = (0, 0, 0);
    while i < left.len() && j < right.len() {
        // both halves descending: right[j] beats every left entry still unmerged
        // that is strictly smaller
        if left[i] >= right[j] {
            v[k] = left[i];
            i += 1;
        } else {
            count += (left.len() - i) as u64;
            v[k] = right[j];
            j += 1;
        }
        k += 1;
    }
    v[k..k + left.len() - i].copy_from_slice(&left[i..]);
    let k = k + left.len() - i;
    v[k..].copy_from_slice(&right[j..]);
    count
}
