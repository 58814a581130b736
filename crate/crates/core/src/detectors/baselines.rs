//! Logit- and gradient-based baselines: MSP, ODIN, Energy, GradNorm, MLS.

use serde::{Deserialize, Serialize};

use super::{Detector, DetectorContext, ScoreRecord};
use crate::error::{Error, Result};
use crate::metrics::{logsumexp, softmax};
use crate::repr::{ClassifierHead, PairedRecord, RepresentationRecord};

pub fn msp_score(record: &RepresentationRecord) -> Result<f64> {
    Ok(softmax(&record.logits)?.max())
}

pub fn energy_score(record: &RepresentationRecord) -> Result<f64> {
    if record.logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numerical(format!(
            "record `{}` has non-finite logits",
            record.id
        )));
    }
    Ok(logsumexp(&record.logits))
}

pub fn mls_score(record: &RepresentationRecord) -> Result<f64> {
    record
        .logits
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::DimensionMismatch("record has no logits".into()))
}

/// Orientation of the KL loss differentiated by GradNorm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradNormOrientation {
    /// `KL(g || u)`.
    #[default]
    PredictionToUniform,
    /// `KL(u || g)`.
    UniformToPrediction,
}

/// Unfloored softmax; gradients need the exact map.
fn softmax_exact(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `∂ loss / ∂ W` for the head's weight matrix (`m` rows of `C`), with
/// `g = softmax(logits / temperature)` and logits recomputed from the
/// record's features.
pub fn gradnorm_gradient(
    record: &RepresentationRecord,
    head: &ClassifierHead,
    temperature: f64,
    orientation: GradNormOrientation,
) -> Result<Vec<Vec<f64>>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let logits = head.logits(&record.features)?;
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let g = softmax_exact(&scaled);
    let classes = g.len() as f64;
    // ∂ loss / ∂ logits
    let delta: Vec<f64> = match orientation {
        GradNormOrientation::PredictionToUniform => {
            let plogp = |p: f64| if p > 0.0 { p * p.ln() } else { 0.0 };
            let neg_entropy: f64 = g.iter().map(|&p| plogp(p)).sum();
            g.iter()
                .map(|&p| {
                    if p > 0.0 {
                        p * (p.ln() - neg_entropy) / temperature
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        GradNormOrientation::UniformToPrediction => g.iter().map(|&p| (p - 1.0 / classes) / temperature).collect(),
    };
    Ok(record
        .features
        .iter()
        .map(|&h| delta.iter().map(|&d| h * d).collect())
        .collect())
}

/// Entrywise ℓ1 norm of [`gradnorm_gradient`].
pub fn gradnorm_score(
    record: &RepresentationRecord,
    head: &ClassifierHead,
    temperature: f64,
    orientation: GradNormOrientation,
) -> Result<f64> {
    let grad = gradnorm_gradient(record, head, temperature, orientation)?;
    Ok(grad.iter().flatten().map(|v| v.abs()).sum())
}

/// A classifier whose logits can be differentiated with respect to its raw
/// input.
pub trait DifferentiableClassifier {
    fn input_logits(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// `C` rows, row `j` is `∂ logit_j / ∂ x`.
    fn logit_jacobian(&self, x: &[f64]) -> Result<Vec<Vec<f64>>>;
}

pub enum OdinInput<'a> {
    /// Stored representations only; no input perturbation possible.
    Record(&'a RepresentationRecord),
    /// A raw input point with the full classifier available.
    Toy {
        point: &'a [f64],
        classifier: &'a dyn DifferentiableClassifier,
    },
}

fn max_tempered_softmax(logits: &[f64], temperature: f64) -> Result<f64> {
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    Ok(softmax(&scaled)?.max())
}

/// Maximum of `softmax(logits / temperature)`, after nudging a raw input by
/// `perturbation` along the sign of the gradient that raises the top-class
/// tempered probability.
pub fn odin_score(input: OdinInput<'_>, temperature: f64, perturbation: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    match input {
        OdinInput::Record(record) => {
            if perturbation != 0.0 {
                return Err(Error::InvalidArgument(
                    "odin input perturbation needs a raw input and its classifier".into(),
                ));
            }
            max_tempered_softmax(&record.logits, temperature)
        }
        OdinInput::Toy { point, classifier } => {
            let logits = classifier.input_logits(point)?;
            if perturbation == 0.0 {
                return max_tempered_softmax(&logits, temperature);
            }
            let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
            let g = softmax_exact(&scaled);
            let top = g
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            // ∇_x log S_top = Σ_j (1[j = top] − g_j) / T · ∇_x z_j
            let jac = classifier.logit_jacobian(point)?;
            let mut grad = vec![0.0; point.len()];
            for (j, row) in jac.iter().enumerate() {
                let w = ((j == top) as u8 as f64 - g[j]) / temperature;
                for (acc, d) in grad.iter_mut().zip(row) {
                    *acc += w * d;
                }
            }
            let moved: Vec<f64> = point
                .iter()
                .zip(&grad)
                .map(|(x, d)| x + perturbation * sign(*d))
                .collect();
            max_tempered_softmax(&classifier.input_logits(&moved)?, temperature)
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct Msp;
struct Energy;
struct Mls;
struct Odin {
    temperature: f64,
}
struct GradNorm {
    head: ClassifierHead,
    temperature: f64,
    orientation: GradNormOrientation,
}

impl Detector for Msp {
    fn name(&self) -> &str {
        "msp"
    }
    fn score(&self, pair: &PairedRecord) -> Result<ScoreRecord> {
        ScoreRecord::plain(pair.id(), msp_score(&pair.input)?)
    }
}

impl Detector for Energy {
    fn name(&self) -> &str {
        "energy"
    }
    fn score(&self, pair: &PairedRecord) -> Result<ScoreRecord> {
        ScoreRecord::plain(pair.id(), energy_score(&pair.input)?)
    }
}

impl Detector for Mls {
    fn name(&self) -> &str {
        "mls"
    }
    fn score(&self, pair: &PairedRecord) -> Result<ScoreRecord> {
        ScoreRecord::plain(pair.id(), mls_score(&pair.input)?)
    }
}

impl Detector for Odin {
    fn name(&self) -> &str {
        "odin"
    }
    fn score(&self, pair: &PairedRecord) -> Result<ScoreRecord> {
        ScoreRecord::plain(
            pair.id(),
            odin_score(OdinInput::Record(&pair.input), self.temperature, 0.0)?,
        )
    }
}

impl Detector for GradNorm {
    fn name(&self) -> &str {
        "gradnorm"
    }
    fn score(&self, pair: &PairedRecord) -> Result<ScoreRecord> {
        let s = gradnorm_score(&pair.input, &self.head, self.temperature, self.orientation)?;
        ScoreRecord::plain(pair.id(), s)
    }
}

pub(super) fn build_msp(_: &DetectorContext) -> Result<Box<dyn Detector>> {
    Ok(Box::new(Msp))
}

pub(super) fn build_energy(_: &DetectorContext) -> Result<Box<dyn Detector>> {
    Ok(Box::new(Energy))
}

pub(super) fn build_mls(_: &DetectorContext) -> Result<Box<dyn Detector>> {
    Ok(Box::new(Mls))
}

pub(super) fn build_odin(ctx: &DetectorContext) -> Result<Box<dyn Detector>> {
    let temperature = ctx.settings.odin_temperature;
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "odin temperature must be > 0, got {temperature}"
        )));
    }
    Ok(Box::new(Odin { temperature }))
}

pub(super) fn build_gradnorm(ctx: &DetectorContext) -> Result<Box<dyn Detector>> {
    Ok(Box::new(GradNorm {
        head: ctx.head()?.clone(),
        temperature: ctx.settings.gradnorm_temperature,
        orientation: ctx.settings.gradnorm_orientation,
    }))
}
