//! Scoring functions behind one interface.
//!
//! Every detector returns scores where larger means "more in-distribution",
//! so a single threshold rule ([`decide`]) applies to all of them. Detectors
//! are built by name from a [`DetectorRegistry`], which lets the CLI and the
//! sweep runner pick strategies at runtime.

mod baselines;
mod d3;
mod knn;
mod vim;

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::repr::{ClassifierHead, DatasetRole, PairedRecord, RepresentationRecord};

pub use baselines::{
    energy_score, gradnorm_gradient, gradnorm_score, mls_score, msp_score, odin_score, DifferentiableClassifier,
    GradNormOrientation, OdinInput,
};
pub use d3::{
    calibrate, d3_score, raw_disparities, CalibrationStats, D3Config, D3Detector, RawDisparity, RemovalTarget,
    SCORE_FLOOR,
};
pub use knn::{knn_fit, knn_score, FeatureBank};
pub use vim::{default_residual_dim, vim_fit, vim_score, VimModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardFlag {
    KlDenominatorClamped,
    NormalizationDegenerate,
}

impl GuardFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            GuardFlag::KlDenominatorClamped => "kl_denominator_clamped",
            GuardFlag::NormalizationDegenerate => "normalization_degenerate",
        }
    }
}

/// Raw and normalized disparities behind a disparity-ensemble score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreComponents {
    pub eps_kl_raw: f64,
    pub eps_l2_raw: f64,
    pub eps_kl_norm: f64,
    pub eps_l2_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub id: String,
    pub score: f64,
    pub components: Option<ScoreComponents>,
    pub guard_flags: Vec<GuardFlag>,
}

impl ScoreRecord {
    pub fn plain(id: &str, score: f64) -> Result<Self> {
        Self::new(id, score, None, Vec::new())
    }

    pub fn new(
        id: &str,
        score: f64,
        components: Option<ScoreComponents>,
        mut guard_flags: Vec<GuardFlag>,
    ) -> Result<Self> {
        if !score.is_finite() {
            return Err(Error::Numerical(format!("score for `{id}` is not finite ({score})")));
        }
        guard_flags.sort();
        guard_flags.dedup();
        Ok(Self {
            id: id.to_string(),
            score,
            components,
            guard_flags,
        })
    }

    /// Flags joined with `|`, empty when none fired.
    pub fn flags_label(&self) -> String {
        self.guard_flags
            .iter()
            .map(|f| f.as_str())
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// Threshold decision: in-distribution iff `score > threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    InD,
    OoD,
}

pub fn decide(score: f64, threshold: f64) -> Decision {
    if score > threshold {
        Decision::InD
    } else {
        Decision::OoD
    }
}

pub trait Detector: Send + Sync {
    fn name(&self) -> &str;

    fn score(&self, pair: &PairedRecord) -> Result<ScoreRecord>;

    /// Scores every pair in order. Records are independent, so this runs in
    /// parallel; output order matches input order.
    fn score_all(&self, pairs: &[PairedRecord]) -> Result<Vec<ScoreRecord>> {
        pairs.par_iter().map(|p| self.score(p)).collect()
    }
}

/// Knobs shared by the built-in detectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSettings {
    pub d3: D3Config,
    /// Ensemble weight used by `d3plus`; its rectifier is always `vra`.
    pub d3plus_lambda: f64,
    pub odin_temperature: f64,
    pub gradnorm_temperature: f64,
    pub gradnorm_orientation: GradNormOrientation,
    pub knn_k: usize,
    /// Residual subspace dimension; `None` keeps `C` principal directions
    /// when `C < m`, otherwise `m / 2`.
    pub vim_residual_dim: Option<usize>,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        Self {
            d3: D3Config::default(),
            d3plus_lambda: 0.5,
            odin_temperature: 1000.0,
            gradnorm_temperature: 1.0,
            gradnorm_orientation: GradNormOrientation::default(),
            knn_k: 1,
            vim_residual_dim: None,
        }
    }
}

/// Everything a detector may need to construct itself.
#[derive(Debug, Clone, Default)]
pub struct DetectorContext {
    pub head: Option<ClassifierHead>,
    pub calibration: Option<Vec<PairedRecord>>,
    pub bank: Option<Vec<RepresentationRecord>>,
    pub settings: DetectorSettings,
}

impl DetectorContext {
    pub fn head(&self) -> Result<&ClassifierHead> {
        self.head
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("this detector needs the classifier head".into()))
    }

    pub fn calibration(&self) -> Result<&[PairedRecord]> {
        self.calibration
            .as_deref()
            .ok_or_else(|| Error::MissingRole(DatasetRole::IndCalibration.to_string()))
    }

    pub fn bank(&self) -> Result<&[RepresentationRecord]> {
        self.bank
            .as_deref()
            .ok_or_else(|| Error::MissingRole(DatasetRole::FeatureBank.to_string()))
    }
}

pub type DetectorFactory = fn(&DetectorContext) -> Result<Box<dyn Detector>>;

struct Entry {
    factory: DetectorFactory,
    summary: &'static str,
}

/// Name → factory table.
pub struct DetectorRegistry {
    entries: BTreeMap<&'static str, Entry>,
}

impl fmt::Debug for DetectorRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.entries.keys()).finish()
    }
}

impl DetectorRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("d3", "disparity ensemble, react-rectified generation", d3::build_d3);
        r.register(
            "d3plus",
            "disparity ensemble, vra-rectified generation",
            d3::build_d3plus,
        );
        r.register("msp", "maximum softmax probability", baselines::build_msp);
        r.register("odin", "temperature-scaled softmax", baselines::build_odin);
        r.register("energy", "log-sum-exp of logits", baselines::build_energy);
        r.register(
            "gradnorm",
            "l1 norm of head gradient of KL to uniform",
            baselines::build_gradnorm,
        );
        r.register("mls", "maximum logit", baselines::build_mls);
        r.register("knn", "negative k-th nearest normalized-feature distance", knn::build);
        r.register("vim", "residual-subspace virtual logit", vim::build);
        r
    }

    pub fn register(&mut self, name: &'static str, summary: &'static str, factory: DetectorFactory) {
        self.entries.insert(name, Entry { factory, summary });
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }

    pub fn describe(&self) -> impl Iterator<Item = (&'static str, &'static str)> + '_ {
        self.entries.iter().map(|(k, e)| (*k, e.summary))
    }

    pub fn build(&self, name: &str, ctx: &DetectorContext) -> Result<Box<dyn Detector>> {
        let entry = self.entries.get(name).ok_or_else(|| Error::Unknown {
            kind: "detector",
            name: name.to_string(),
            available: self.names().collect::<Vec<_>>().join(", "),
        })?;
        (entry.factory)(ctx)
    }
}
