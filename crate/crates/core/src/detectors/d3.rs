//! Disparity-ensemble scoring between an input and its diffusion generation.
//!
//! Score = `λ / ε̃_prob + (1 − λ) / ε̃_feat`, where each disparity is
//! min-max normalized with extremes taken over in-distribution calibration
//! pairs, then floored at [`SCORE_FLOOR`]. Values outside the calibration
//! range are extrapolated, not clamped.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Detector, DetectorContext, GuardFlag, ScoreComponents, ScoreRecord};
use crate::error::{Error, Result};
use crate::metrics::{softmax, FeatureMetric, ProbabilityMetric};
use crate::rectify::{react_clip, vra_clip, RectifyConfig, RectifyMode};
use crate::repr::{ClassifierHead, PairedRecord, RepresentationRecord};

/// Floor applied to normalized disparities before taking reciprocals.
pub const SCORE_FLOOR: f64 = 1e-6;

/// Which side(s) of the pair get their features rectified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RemovalTarget {
    #[default]
    Generation,
    Input,
    Both,
    None,
}

impl RemovalTarget {
    fn rectifies_input(self) -> bool {
        matches!(self, RemovalTarget::Input | RemovalTarget::Both)
    }

    fn rectifies_generation(self) -> bool {
        matches!(self, RemovalTarget::Generation | RemovalTarget::Both)
    }
}

impl FromStr for RemovalTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generation" => Ok(RemovalTarget::Generation),
            "input" => Ok(RemovalTarget::Input),
            "both" => Ok(RemovalTarget::Both),
            "none" => Ok(RemovalTarget::None),
            other => Err(Error::Unknown {
                kind: "removal target",
                name: other.into(),
                available: "generation, input, both, none".into(),
            }),
        }
    }
}

impl fmt::Display for RemovalTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RemovalTarget::Generation => "generation",
            RemovalTarget::Input => "input",
            RemovalTarget::Both => "both",
            RemovalTarget::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct D3Config {
    pub lambda: f64,
    pub rectify: RectifyConfig,
    pub removal_target: RemovalTarget,
    pub prob_metric: ProbabilityMetric,
    pub feat_metric: FeatureMetric,
}

impl Default for D3Config {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            rectify: RectifyConfig::default(),
            removal_target: RemovalTarget::Generation,
            prob_metric: ProbabilityMetric::Kl,
            feat_metric: FeatureMetric::L2,
        }
    }
}

impl D3Config {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        self.rectify.validate()
    }
}

/// Features and logits seen by the feature and probability metrics for one
/// side of a pair.
struct SideView {
    features: Vec<f64>,
    logits: Vec<f64>,
}

/// Unrectified sides use stored values. Rectified sides re-project through
/// the head; under `vra` the feature metric still sees the `react`-clipped
/// features and only the logits come from the `vra` band.
fn side_view(
    record: &RepresentationRecord,
    head: &ClassifierHead,
    cfg: &RectifyConfig,
    rectify: bool,
) -> Result<SideView> {
    if !rectify || cfg.mode == RectifyMode::None {
        return Ok(SideView {
            features: record.features.clone(),
            logits: record.logits.clone(),
        });
    }
    if record.dims() != head.dims() {
        return Err(Error::DimensionMismatch(format!(
            "record `{}` has {}, head has {}",
            record.id,
            record.dims(),
            head.dims()
        )));
    }
    cfg.validate()?;
    let react = react_clip(&record.features, cfg.c)?;
    let logits = match cfg.mode {
        RectifyMode::Vra => head.logits(&vra_clip(&record.features, cfg.alpha, cfg.beta)?)?,
        _ => head.logits(&react)?,
    };
    Ok(SideView {
        features: react,
        logits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawDisparity {
    pub prob: f64,
    pub feat: f64,
    pub kl_denominator_clamped: bool,
}

/// Unnormalized probability- and feature-space disparities for one pair.
pub fn raw_disparities(pair: &PairedRecord, head: &ClassifierHead, cfg: &D3Config) -> Result<RawDisparity> {
    let x = side_view(&pair.input, head, &cfg.rectify, cfg.removal_target.rectifies_input())?;
    let g = side_view(
        &pair.generation,
        head,
        &cfg.rectify,
        cfg.removal_target.rectifies_generation(),
    )?;
    let (prob, kl_denominator_clamped) = cfg.prob_metric.disparity(&softmax(&x.logits)?, &softmax(&g.logits)?)?;
    let feat = cfg.feat_metric.disparity(&x.features, &g.features)?;
    Ok(RawDisparity {
        prob,
        feat,
        kl_denominator_clamped,
    })
}

/// Extremes of the raw disparities over in-distribution calibration pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub kl_min: f64,
    pub kl_max: f64,
    pub l2_min: f64,
    pub l2_max: f64,
    pub count: usize,
}

impl CalibrationStats {
    pub fn kl_degenerate(&self) -> bool {
        self.kl_max <= self.kl_min
    }

    pub fn l2_degenerate(&self) -> bool {
        self.l2_max <= self.l2_min
    }

    /// Affine min-max map; identity when the range is degenerate.
    fn normalize(value: f64, min: f64, max: f64) -> f64 {
        if max > min {
            (value - min) / (max - min)
        } else {
            value
        }
    }
}

pub fn calibrate(pairs: &[PairedRecord], head: &ClassifierHead, cfg: &D3Config) -> Result<CalibrationStats> {
    cfg.validate()?;
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "calibration needs at least 2 in-distribution pairs, got {}",
            pairs.len()
        )));
    }
    let mut stats = CalibrationStats {
        kl_min: f64::INFINITY,
        kl_max: f64::NEG_INFINITY,
        l2_min: f64::INFINITY,
        l2_max: f64::NEG_INFINITY,
        count: pairs.len(),
    };
    for pair in pairs {
        let raw = raw_disparities(pair, head, cfg)?;
        stats.kl_min = stats.kl_min.min(raw.prob);
        stats.kl_max = stats.kl_max.max(raw.prob);
        stats.l2_min = stats.l2_min.min(raw.feat);
        stats.l2_max = stats.l2_max.max(raw.feat);
    }
    Ok(stats)
}

pub fn d3_score(
    pair: &PairedRecord,
    head: &ClassifierHead,
    cfg: &D3Config,
    stats: &CalibrationStats,
) -> Result<ScoreRecord> {
    cfg.validate()?;
    let raw = raw_disparities(pair, head, cfg)?;
    let mut flags = Vec::new();
    if raw.kl_denominator_clamped {
        flags.push(GuardFlag::KlDenominatorClamped);
    }
    if stats.kl_degenerate() || stats.l2_degenerate() {
        flags.push(GuardFlag::NormalizationDegenerate);
    }
    let kl_norm = CalibrationStats::normalize(raw.prob, stats.kl_min, stats.kl_max);
    let l2_norm = CalibrationStats::normalize(raw.feat, stats.l2_min, stats.l2_max);
    let score = ensemble(cfg.lambda, kl_norm, l2_norm);
    ScoreRecord::new(
        pair.id(),
        score,
        Some(ScoreComponents {
            eps_kl_raw: raw.prob,
            eps_l2_raw: raw.feat,
            eps_kl_norm: kl_norm,
            eps_l2_norm: l2_norm,
        }),
        flags,
    )
}

/// `λ / max(kl, floor) + (1 − λ) / max(l2, floor)`.
pub(crate) fn ensemble(lambda: f64, kl_norm: f64, l2_norm: f64) -> f64 {
    lambda / kl_norm.max(SCORE_FLOOR) + (1.0 - lambda) / l2_norm.max(SCORE_FLOOR)
}

pub struct D3Detector {
    name: &'static str,
    head: ClassifierHead,
    cfg: D3Config,
    stats: CalibrationStats,
}

impl D3Detector {
    pub fn fit(name: &'static str, head: ClassifierHead, cfg: D3Config, calibration: &[PairedRecord]) -> Result<Self> {
        let stats = calibrate(calibration, &head, &cfg)?;
        Ok(Self { name, head, cfg, stats })
    }

    pub fn from_stats(name: &'static str, head: ClassifierHead, cfg: D3Config, stats: CalibrationStats) -> Self {
        Self { name, head, cfg, stats }
    }

    pub fn stats(&self) -> &CalibrationStats {
        &self.stats
    }
}

impl Detector for D3Detector {
    fn name(&self) -> &str {
        self.name
    }

    fn score(&self, pair: &PairedRecord) -> Result<ScoreRecord> {
        d3_score(pair, &self.head, &self.cfg, &self.stats)
    }
}

pub(super) fn build_d3(ctx: &DetectorContext) -> Result<Box<dyn Detector>> {
    let head = ctx.head()?.clone();
    let cfg = ctx.settings.d3;
    Ok(Box::new(D3Detector::fit("d3", head, cfg, ctx.calibration()?)?))
}

pub(super) fn build_d3plus(ctx: &DetectorContext) -> Result<Box<dyn Detector>> {
    let head = ctx.head()?.clone();
    let mut cfg = ctx.settings.d3;
    cfg.lambda = ctx.settings.d3plus_lambda;
    cfg.rectify.mode = RectifyMode::Vra;
    Ok(Box::new(D3Detector::fit("d3plus", head, cfg, ctx.calibration()?)?))
}
