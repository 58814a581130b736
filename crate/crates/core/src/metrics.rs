//! Softmax, KL divergence, and the input/generation disparity metrics.
//!
//! All arithmetic is `f64`. Probabilities are floored at [`PROB_FLOOR`] and
//! renormalized so every logarithm is finite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest probability mass any class may carry.
pub const PROB_FLOOR: f64 = 1e-12;
/// Lower clamp for the denominator of [`eps_kl`].
pub const KL_DENOMINATOR_GUARD: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-9;

/// A categorical distribution over `C >= 2` classes, floored at
/// [`PROB_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    /// Validates, floors and renormalizes `values`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::DimensionMismatch(format!(
                "probability vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Numerical("probabilities must be finite and non-negative".into()));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Numerical(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self::floored(values))
    }

    fn floored(mut values: Vec<f64>) -> Self {
        for v in values.iter_mut() {
            *v = v.max(PROB_FLOOR);
        }
        let sum: f64 = values.iter().sum();
        for v in values.iter_mut() {
            *v /= sum;
        }
        Self(values)
    }

    pub fn uniform(classes: usize) -> Result<Self> {
        Self::new(vec![1.0 / classes as f64; classes])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} contains a non-finite value")))
    }
}

/// Max-stabilized softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbabilityVector> {
    check_finite(logits, "logits")?;
    if logits.len() < 2 {
        return Err(Error::DimensionMismatch("softmax needs at least 2 logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(ProbabilityVector::floored(exps.into_iter().map(|e| e / sum).collect()))
}

/// `log Σ exp(z_i)`, max-stabilized.
pub fn logsumexp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// `D_KL(p || q) = Σ p_i ln(p_i / q_i)`, clamped at zero against rounding.
pub fn kl_div(p: &ProbabilityVector, q: &ProbabilityVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(format!(
            "KL between {} and {} classes",
            p.len(),
            q.len()
        )));
    }
    let d: f64 = p
        .values()
        .iter()
        .zip(q.values())
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum();
    Ok(d.max(0.0))
}

/// `D_KL(p || u)` against the uniform distribution over `p`'s classes.
pub fn kl_to_uniform(p: &ProbabilityVector) -> f64 {
    let uniform = 1.0 / p.len() as f64;
    let d: f64 = p.values().iter().map(|&pi| pi * (pi / uniform).ln()).sum();
    d.max(0.0)
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn nonzero_norm(v: &[f64], what: &str) -> Result<f64> {
    check_finite(v, what)?;
    let n = l2_norm(v);
    if n > 0.0 {
        Ok(n)
    } else {
        Err(Error::Degenerate(format!("{what} has zero norm")))
    }
}

/// Unit-normalizes `v`. Zero vectors are an error.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = nonzero_norm(v, "feature vector")?;
    Ok(v.iter().map(|x| x / n).collect())
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )))
    }
}

/// ℓ2 distance between the unit-normalized features. In `[0, 2]`.
pub fn eps_l2(h_x: &[f64], h_gen: &[f64]) -> Result<f64> {
    same_len(h_x, h_gen)?;
    let nx = nonzero_norm(h_x, "input features")?;
    let ng = nonzero_norm(h_gen, "generation features")?;
    let d2: f64 = h_x
        .iter()
        .zip(h_gen)
        .map(|(a, b)| {
            let d = b / ng - a / nx;
            d * d
        })
        .sum();
    Ok(d2.sqrt().min(2.0))
}

/// Cosine similarity. In `[-1, 1]`.
pub fn eps_cos(h_x: &[f64], h_gen: &[f64]) -> Result<f64> {
    same_len(h_x, h_gen)?;
    let nx = nonzero_norm(h_x, "input features")?;
    let ng = nonzero_norm(h_gen, "generation features")?;
    let dot: f64 = h_x.iter().zip(h_gen).map(|(a, b)| a * b).sum();
    Ok((dot / (nx * ng)).clamp(-1.0, 1.0))
}

/// Result of the KL ratio, with a flag for when the denominator was clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlRatio {
    pub value: f64,
    pub denominator_clamped: bool,
}

/// `D_KL(g_gen || u) / D_KL(g_x || u)`.
///
/// A denominator below [`KL_DENOMINATOR_GUARD`] is clamped to it and flagged.
pub fn eps_kl(g_x: &ProbabilityVector, g_gen: &ProbabilityVector) -> Result<KlRatio> {
    if g_x.len() != g_gen.len() {
        return Err(Error::DimensionMismatch(format!(
            "KL ratio between {} and {} classes",
            g_x.len(),
            g_gen.len()
        )));
    }
    let numerator = kl_to_uniform(g_gen);
    let denominator = kl_to_uniform(g_x);
    let denominator_clamped = denominator < KL_DENOMINATOR_GUARD;
    Ok(KlRatio {
        value: numerator / denominator.max(KL_DENOMINATOR_GUARD),
        denominator_clamped,
    })
}

/// `D_KL(g_gen || g_x)`, the reference-free alternative.
pub fn eps_kl_alt(g_x: &ProbabilityVector, g_gen: &ProbabilityVector) -> Result<f64> {
    kl_div(g_gen, g_x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    EpsL2,
    EpsKl,
    EpsKlAlt,
    EpsCos,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue {
    pub kind: MetricKind,
    pub value: f64,
}

/// Probability-space disparity used by the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbabilityMetric {
    #[default]
    Kl,
    KlAlt,
}

/// Feature-space disparity used by the ensemble. `Cos` contributes
/// `1 - eps_cos` so that larger always means more different.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMetric {
    #[default]
    L2,
    Cos,
}

impl ProbabilityMetric {
    pub fn kind(self) -> MetricKind {
        match self {
            ProbabilityMetric::Kl => MetricKind::EpsKl,
            ProbabilityMetric::KlAlt => MetricKind::EpsKlAlt,
        }
    }

    /// Returns the disparity and whether a guard fired.
    pub fn disparity(self, g_x: &ProbabilityVector, g_gen: &ProbabilityVector) -> Result<(f64, bool)> {
        match self {
            ProbabilityMetric::Kl => eps_kl(g_x, g_gen).map(|r| (r.value, r.denominator_clamped)),
            ProbabilityMetric::KlAlt => eps_kl_alt(g_x, g_gen).map(|v| (v, false)),
        }
    }
}

impl FeatureMetric {
    pub fn kind(self) -> MetricKind {
        match self {
            FeatureMetric::L2 => MetricKind::EpsL2,
            FeatureMetric::Cos => MetricKind::EpsCos,
        }
    }

    pub fn disparity(self, h_x: &[f64], h_gen: &[f64]) -> Result<f64> {
        match self {
            FeatureMetric::L2 => eps_l2(h_x, h_gen),
            FeatureMetric::Cos => eps_cos(h_x, h_gen).map(|c| 1.0 - c),
        }
    }
}
