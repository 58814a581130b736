//! Ablation grids over the toy benchmark.
//!
//! Grid points that differ only in `T` or guidance reuse the same seed, so
//! every benchmark draws the same raw points and forward noise (common random
//! numbers). Differences between points then reflect the setting, not a fresh
//! sample.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::{D3Config, D3Detector, Detector, DetectorRegistry, DetectorSettings, RemovalTarget};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::rectify::RectifyMode;
use crate::toydiff::{build_benchmark, Benchmark, ToyConfig, OOD_DATASET};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub lambda: Vec<f64>,
    pub steps: Vec<usize>,
    pub rectify: Vec<RectifyMode>,
    pub removal_target: Vec<RemovalTarget>,
    pub conditional: Vec<bool>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            lambda: (0..=10).map(|i| f64::from(i) / 10.0).collect(),
            steps: vec![2, 4, 8, 16, 24],
            rectify: vec![RectifyMode::React],
            removal_target: vec![RemovalTarget::Generation],
            conditional: vec![true],
        }
    }
}

impl SweepGrid {
    /// The grid holding only the given point.
    pub fn single(point: &SweepPoint) -> Self {
        Self {
            lambda: vec![point.lambda],
            steps: vec![point.steps],
            rectify: vec![point.rectify],
            removal_target: vec![point.removal_target],
            conditional: vec![point.conditional],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let axes = [
            ("lambda", self.lambda.len()),
            ("steps", self.steps.len()),
            ("rectify", self.rectify.len()),
            ("removal_target", self.removal_target.len()),
            ("conditional", self.conditional.len()),
        ];
        if let Some((name, _)) = axes.iter().find(|(_, n)| *n == 0) {
            return Err(Error::InvalidArgument(format!("sweep axis `{name}` is empty")));
        }
        if let Some(l) = self.lambda.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::InvalidArgument(format!("lambda {l} outside [0, 1]")));
        }
        if self.steps.contains(&0) {
            return Err(Error::InvalidArgument("T must be >= 1".into()));
        }
        Ok(())
    }

    /// Points in row order: `steps`, `conditional`, `rectify`,
    /// `removal_target`, then `lambda` varying fastest.
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &steps in &self.steps {
            for &conditional in &self.conditional {
                for &rectify in &self.rectify {
                    for &removal_target in &self.removal_target {
                        for &lambda in &self.lambda {
                            out.push(SweepPoint {
                                lambda,
                                steps,
                                rectify,
                                removal_target,
                                conditional,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub steps: usize,
    pub rectify: RectifyMode,
    pub removal_target: RemovalTarget,
    pub conditional: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub report: EvalReport,
}

/// Toy config for a grid point; `T` also fixes `t_start` when the base leaves
/// it unset.
pub fn point_config(base: &ToyConfig, steps: usize, conditional: bool) -> ToyConfig {
    ToyConfig {
        steps,
        conditional,
        ..base.clone()
    }
}

pub fn point_d3_config(bench: &Benchmark, base: &D3Config, point: &SweepPoint) -> D3Config {
    D3Config {
        lambda: point.lambda,
        rectify: bench.rectify.with_mode(point.rectify),
        removal_target: point.removal_target,
        ..*base
    }
}

/// Scores both test splits with `detector` and evaluates them.
pub fn evaluate_on(bench: &Benchmark, detector: &dyn Detector) -> Result<EvalReport> {
    let ind: Vec<f64> = detector
        .score_all(&bench.ind_test.pairs)?
        .iter()
        .map(|s| s.score)
        .collect();
    let ood: Vec<f64> = detector
        .score_all(&bench.ood_test.pairs)?
        .iter()
        .map(|s| s.score)
        .collect();
    evaluate(detector.name(), OOD_DATASET, &ind, &ood)
}

/// Builds a registered detector against the benchmark and evaluates it.
pub fn evaluate_detector(bench: &Benchmark, name: &str, settings: DetectorSettings) -> Result<EvalReport> {
    let detector = DetectorRegistry::builtin().build(name, &bench.context(settings))?;
    evaluate_on(bench, detector.as_ref())
}

/// Evaluates the disparity ensemble under `cfg`.
pub fn evaluate_d3(bench: &Benchmark, cfg: D3Config) -> Result<EvalReport> {
    let det = D3Detector::fit("d3", bench.classifier.head.clone(), cfg, &bench.calibration.pairs)?;
    evaluate_on(bench, &det)
}

pub fn sweep(grid: &SweepGrid, base: &ToyConfig, d3: &D3Config) -> Result<Vec<SweepRow>> {
    grid.validate()?;
    let mut benches: BTreeMap<(usize, bool), Benchmark> = BTreeMap::new();
    for &steps in &grid.steps {
        for &conditional in &grid.conditional {
            benches.insert(
                (steps, conditional),
                build_benchmark(&point_config(base, steps, conditional))?,
            );
        }
    }
    grid.points()
        .par_iter()
        .map(|p| {
            let bench = &benches[&(p.steps, p.conditional)];
            Ok(SweepRow {
                point: *p,
                report: evaluate_d3(bench, point_d3_config(bench, d3, p))?,
            })
        })
        .collect()
}

const ROW_HEADER: &str = "lambda,T,rectify,removal_target,conditional,fpr95,auroc,threshold_s,n_ind,n_ood";

/// One row per grid point; rates as fractions with full precision.
pub fn rows_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{ROW_HEADER}\n");
    for r in rows {
        let p = &r.point;
        let e = &r.report;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            p.lambda,
            p.steps,
            p.rectify,
            p.removal_target,
            p.conditional,
            e.fpr_at_95tpr,
            e.auroc,
            e.threshold_s,
            e.n_ind,
            e.n_ood
        );
    }
    out
}

fn series(p: &SweepPoint, skip_lambda: bool) -> String {
    let mut s = String::new();
    if !skip_lambda {
        let _ = write!(s, "lambda={};", p.lambda);
    } else {
        let _ = write!(s, "T={};", p.steps);
    }
    let _ = write!(
        s,
        "rectify={};removal={};cond={}",
        p.rectify, p.removal_target, p.conditional
    );
    s
}

/// Curve over `lambda`, one series per remaining setting.
pub fn lambda_curve_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("series,lambda,fpr95,auroc\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            series(&r.point, true),
            r.point.lambda,
            r.report.fpr_at_95tpr,
            r.report.auroc
        );
    }
    out
}

/// Curve over `T`, one series per remaining setting.
pub fn steps_curve_csv(rows: &[SweepRow]) -> String {
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        series(&a.point, false)
            .cmp(&series(&b.point, false))
            .then(a.point.steps.cmp(&b.point.steps))
    });
    let mut out = String::from("series,T,fpr95,auroc\n");
    for r in sorted {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            series(&r.point, false),
            r.point.steps,
            r.report.fpr_at_95tpr,
            r.report.auroc
        );
    }
    out
}
