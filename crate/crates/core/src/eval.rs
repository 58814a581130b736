//! Detection quality: AUROC, FPR at a target TPR, and report tables.
//!
//! Conventions: AUROC credits ties with 1/2 (Mann–Whitney). A sample counts
//! as in-distribution only when its score is strictly above the threshold.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TPR: f64 = 0.95;

fn check_scores(scores: &[f64], what: &str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} scores are empty")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("{what} scores contain a non-finite value")));
    }
    Ok(())
}

/// Probability that a random in-distribution score beats a random
/// out-of-distribution score, ties counted as 1/2.
///
/// Computed from mid-ranks in `O(n log n)`.
pub fn auroc(ind: &[f64], ood: &[f64]) -> Result<f64> {
    check_scores(ind, "in-distribution")?;
    check_scores(ood, "out-of-distribution")?;
    let mut all: Vec<(f64, bool)> = ind
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum keeps mid-ranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j, mid-rank (i + 1 + j) / 2
        let twice_mid = (i + 1 + j) as u128;
        let ind_in_tie = all[i..j].iter().filter(|e| e.1).count() as u128;
        twice_rank_sum += twice_mid * ind_in_tie;
        i = j;
    }
    let n_i = ind.len() as u128;
    let n_o = ood.len() as u128;
    // 2U = 2R - n_i (n_i + 1)
    let twice_u = twice_rank_sum - n_i * (n_i + 1);
    Ok(twice_u as f64 / (2 * n_i * n_o) as f64)
}

/// Threshold and false-positive rate at a target true-positive rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FprAtTpr {
    pub fpr: f64,
    pub threshold: f64,
    /// Achieved TPR, `|{ind > threshold}| / n_ind`.
    pub tpr: f64,
}

/// Picks the largest representable threshold `s` with
/// `|{ind > s}| / n_ind >= tpr_target`, then reports `|{ood > s}| / n_ood`.
pub fn fpr_at_tpr(ind: &[f64], ood: &[f64], tpr_target: f64) -> Result<FprAtTpr> {
    check_scores(ind, "in-distribution")?;
    check_scores(ood, "out-of-distribution")?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "tpr target {tpr_target} outside (0, 1]"
        )));
    }
    let mut sorted = ind.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    // smallest k with k / n >= target
    let mut needed = (tpr_target * n as f64).ceil() as usize;
    while needed > 1 && (needed - 1) as f64 / n as f64 >= tpr_target {
        needed -= 1;
    }
    while (needed as f64) / (n as f64) < tpr_target {
        needed += 1;
    }
    let needed = needed.clamp(1, n);
    let threshold = sorted[needed - 1].next_down();
    let above = |xs: &[f64]| xs.iter().filter(|&&s| s > threshold).count();
    Ok(FprAtTpr {
        fpr: above(ood) as f64 / ood.len() as f64,
        threshold,
        tpr: above(ind) as f64 / n as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detector: String,
    pub ood_dataset: String,
    pub fpr_at_95tpr: f64,
    pub auroc: f64,
    pub threshold_s: f64,
    pub n_ind: usize,
    pub n_ood: usize,
}

pub fn evaluate(detector: &str, ood_dataset: &str, ind: &[f64], ood: &[f64]) -> Result<EvalReport> {
    let fpr = fpr_at_tpr(ind, ood, DEFAULT_TPR)?;
    Ok(EvalReport {
        detector: detector.to_string(),
        ood_dataset: ood_dataset.to_string(),
        fpr_at_95tpr: fpr.fpr,
        auroc: auroc(ind, ood)?,
        threshold_s: fpr.threshold,
        n_ind: ind.len(),
        n_ood: ood.len(),
    })
}

/// Rows = detectors (first-seen order), columns = FPR/AUROC per OoD set plus
/// the average. Percent values with two decimals.
pub fn render_table_csv(reports: &[EvalReport]) -> String {
    let (detectors, datasets, cells) = layout(reports);
    let mut out = String::from("detector");
    for d in &datasets {
        let _ = write!(out, ",{d}_fpr95,{d}_auroc");
    }
    out.push_str(",average_fpr95,average_auroc\n");
    for det in &detectors {
        out.push_str(det);
        let mut sums = (0.0, 0.0, 0usize);
        for d in &datasets {
            match cells.get(&(det.as_str(), d.as_str())) {
                Some(r) => {
                    let _ = write!(out, ",{:.2},{:.2}", 100.0 * r.fpr_at_95tpr, 100.0 * r.auroc);
                    sums = (sums.0 + r.fpr_at_95tpr, sums.1 + r.auroc, sums.2 + 1);
                }
                None => out.push_str(",,"),
            }
        }
        if sums.2 > 0 {
            let k = sums.2 as f64;
            let _ = write!(out, ",{:.2},{:.2}", 100.0 * sums.0 / k, 100.0 * sums.1 / k);
        } else {
            out.push_str(",,");
        }
        out.push('\n');
    }
    out
}

/// The same layout as [`render_table_csv`], as a Markdown table.
pub fn render_table_markdown(reports: &[EvalReport]) -> String {
    let csv = render_table_csv(reports);
    let mut lines = csv.lines();
    let mut out = String::new();
    if let Some(header) = lines.next() {
        let cols: Vec<&str> = header.split(',').collect();
        let _ = writeln!(out, "| {} |", cols.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(cols.len()));
    }
    for line in lines {
        let _ = writeln!(out, "| {} |", line.split(',').collect::<Vec<_>>().join(" | "));
    }
    out
}

type Layout<'a> = (Vec<String>, Vec<String>, BTreeMap<(&'a str, &'a str), &'a EvalReport>);

fn layout(reports: &[EvalReport]) -> Layout<'_> {
    let mut detectors: Vec<String> = Vec::new();
    let mut datasets: Vec<String> = Vec::new();
    let mut cells = BTreeMap::new();
    for r in reports {
        if !detectors.contains(&r.detector) {
            detectors.push(r.detector.clone());
        }
        if !datasets.contains(&r.ood_dataset) {
            datasets.push(r.ood_dataset.clone());
        }
        cells.insert((r.detector.as_str(), r.ood_dataset.as_str()), r);
    }
    (detectors, datasets, cells)
}
