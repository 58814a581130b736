use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{Detector, DetectorContext, ScoreRecord};
use crate::error::{Error, Result};
use crate::metrics::normalize;
use crate::repr::{PairedRecord, RepresentationRecord};

/// Unit-normalized in-distribution features.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    rows: Vec<Vec<f64>>,
    k: usize,
}

impl FeatureBank {
    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn knn_fit<'a>(features: impl IntoIterator<Item = &'a [f64]>, k: usize) -> Result<FeatureBank> {
    let rows = features
        .into_iter()
        .enumerate()
        .map(|(i, f)| normalize(f).map_err(|e| Error::Degenerate(format!("bank row {i}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(Error::InvalidArgument("feature bank is empty".into()));
    }
    if k == 0 || k > rows.len() {
        return Err(Error::InvalidArgument(format!("k={k} must be in 1..={}", rows.len())));
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::DimensionMismatch("feature bank rows differ in width".into()));
    }
    Ok(FeatureBank { rows, k })
}

/// Max-heap entry ordered by distance.
#[derive(PartialEq)]
struct Dist(f64);

impl Eq for Dist {}

impl PartialOrd for Dist {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Dist {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Negative k-th smallest ℓ2 distance between the normalized query and the
/// bank.
pub fn knn_score(record: &RepresentationRecord, bank: &FeatureBank) -> Result<f64> {
    let q = normalize(&record.features)?;
    if q.len() != bank.rows[0].len() {
        return Err(Error::DimensionMismatch(format!(
            "query width {} vs bank width {}",
            q.len(),
            bank.rows[0].len()
        )));
    }
    let mut heap = BinaryHeap::with_capacity(bank.k + 1);
    for row in &bank.rows {
        let d = row.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if heap.len() < bank.k {
            heap.push(Dist(d));
        } else if heap.peek().is_some_and(|top| d < top.0) {
            heap.pop();
            heap.push(Dist(d));
        }
    }
    Ok(-heap.peek().map(|d| d.0).unwrap_or(f64::INFINITY))
}

struct Knn {
    bank: FeatureBank,
}

impl Detector for Knn {
    fn name(&self) -> &str {
        "knn"
    }

    fn score(&self, pair: &PairedRecord) -> Result<ScoreRecord> {
        ScoreRecord::plain(pair.id(), knn_score(&pair.input, &self.bank)?)
    }
}

pub(super) fn build(ctx: &DetectorContext) -> Result<Box<dyn Detector>> {
    let bank = knn_fit(ctx.bank()?.iter().map(|r| r.features.as_slice()), ctx.settings.knn_k)?;
    Ok(Box::new(Knn { bank }))
}
