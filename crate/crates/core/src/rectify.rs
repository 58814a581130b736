//! Feature truncation applied before re-projecting through the classifier head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::repr::{ClassifierHead, RepresentationRecord};

pub const DEFAULT_REACT_CEILING: f64 = 0.1;
pub const DEFAULT_VRA_ALPHA: f64 = 0.1;
pub const DEFAULT_VRA_BETA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RectifyMode {
    None,
    #[default]
    React,
    Vra,
}

impl FromStr for RectifyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RectifyMode::None),
            "react" => Ok(RectifyMode::React),
            "vra" => Ok(RectifyMode::Vra),
            other => Err(Error::Unknown {
                kind: "rectify mode",
                name: other.into(),
                available: "none, react, vra".into(),
            }),
        }
    }
}

impl fmt::Display for RectifyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RectifyMode::None => "none",
            RectifyMode::React => "react",
            RectifyMode::Vra => "vra",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RectifyConfig {
    pub mode: RectifyMode,
    /// Ceiling for `react`.
    pub c: f64,
    /// Lower cut for `vra`; values below become 0.
    pub alpha: f64,
    /// Upper ceiling for `vra`.
    pub beta: f64,
}

impl Default for RectifyConfig {
    fn default() -> Self {
        Self {
            mode: RectifyMode::React,
            c: DEFAULT_REACT_CEILING,
            alpha: DEFAULT_VRA_ALPHA,
            beta: DEFAULT_VRA_BETA,
        }
    }
}

impl RectifyConfig {
    pub fn none() -> Self {
        Self {
            mode: RectifyMode::None,
            ..Self::default()
        }
    }

    pub fn with_mode(self, mode: RectifyMode) -> Self {
        Self { mode, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.c.is_finite() || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::InvalidArgument("rectify constants must be finite".into()));
        }
        if self.mode == RectifyMode::Vra && self.alpha >= self.beta {
            return Err(Error::InvalidArgument(format!(
                "vra needs alpha < beta, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    /// Clips `h` according to the mode.
    pub fn clip(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        match self.mode {
            RectifyMode::None => Ok(h.to_vec()),
            RectifyMode::React => react_clip(h, self.c),
            RectifyMode::Vra => vra_clip(h, self.alpha, self.beta),
        }
    }
}

fn check_finite(h: &[f64]) -> Result<()> {
    if h.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical("features contain a non-finite value".into()))
    }
}

/// Elementwise `min(h_i, c)`.
pub fn react_clip(h: &[f64], c: f64) -> Result<Vec<f64>> {
    check_finite(h)?;
    Ok(h.iter().map(|&v| v.min(c)).collect())
}

/// Zero below `alpha`, identity on `[alpha, beta]`, `beta` above.
pub fn vra_clip(h: &[f64], alpha: f64, beta: f64) -> Result<Vec<f64>> {
    check_finite(h)?;
    if alpha >= beta {
        return Err(Error::InvalidArgument(format!(
            "vra needs alpha < beta, got alpha={alpha} beta={beta}"
        )));
    }
    Ok(h.iter()
        .map(|&v| {
            if v < alpha {
                0.0
            } else if v > beta {
                beta
            } else {
                v
            }
        })
        .collect())
}

/// Clipped features and the logits the head assigns to them.
#[derive(Debug, Clone, PartialEq)]
pub struct RectifiedOutputs {
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Clips `record.features` and re-projects them through `head`.
///
/// Logits are always recomputed from the head, including for mode `none`.
pub fn rectified_outputs(
    record: &RepresentationRecord,
    head: &ClassifierHead,
    cfg: &RectifyConfig,
) -> Result<RectifiedOutputs> {
    if record.dims() != head.dims() {
        return Err(Error::DimensionMismatch(format!(
            "record `{}` has {}, head has {}",
            record.id,
            record.dims(),
            head.dims()
        )));
    }
    let features = cfg.clip(&record.features)?;
    let logits = head.logits(&features)?;
    Ok(RectifiedOutputs { features, logits })
}

/// Percentile (0..=100) of `values` by linear interpolation between order
/// statistics.
pub fn percentile(values: &[f64], pct: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of an empty set".into()));
    }
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::InvalidArgument(format!("percentile {pct} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

/// Clip levels estimated from in-distribution features: `c` and `beta` at the
/// 90th percentile of all pooled feature entries, `alpha` at the 10th.
pub fn percentile_levels<'a>(
    features: impl IntoIterator<Item = &'a [f64]>,
    mode: RectifyMode,
) -> Result<RectifyConfig> {
    let pooled: Vec<f64> = features.into_iter().flatten().copied().collect();
    let p90 = percentile(&pooled, 90.0)?;
    let p10 = percentile(&pooled, 10.0)?;
    let cfg = RectifyConfig {
        mode,
        c: p90,
        alpha: p10,
        beta: p90,
    };
    if p10 >= p90 {
        return Err(Error::Degenerate(format!(
            "feature percentiles collapse (p10={p10}, p90={p90}); cannot set a vra band"
        )));
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn react_examples() {
        assert_eq!(react_clip(&[0.05, 0.2, -1.0], 0.1).unwrap(), vec![0.05, 0.1, -1.0]);
        let low = [0.01, -3.0, 0.1];
        assert_eq!(react_clip(&low, 0.1).unwrap(), low.to_vec());
        assert!(react_clip(&[f64::INFINITY], 0.1).is_err());
    }

    #[test]
    fn vra_examples() {
        assert_eq!(vra_clip(&[0.05, 0.3, 0.9], 0.1, 0.5).unwrap(), vec![0.0, 0.3, 0.5]);
        let inside = [0.1, 0.25, 0.5];
        assert_eq!(vra_clip(&inside, 0.1, 0.5).unwrap(), inside.to_vec());
        assert!(vra_clip(&inside, 0.5, 0.5).is_err());
        let bad = RectifyConfig {
            mode: RectifyMode::Vra,
            alpha: 0.6,
            beta: 0.5,
            c: 0.1,
        };
        assert!(bad.validate().is_err());
    }

    fn head() -> ClassifierHead {
        ClassifierHead::new(vec![vec![1.0, -2.0, 0.5], vec![0.3, 0.7, -1.1]], vec![0.25, -0.5, 1.5]).unwrap()
    }

    #[test]
    fn mode_none_recomputes_logits() {
        let h = head();
        let logits = h.logits(&[0.4, 2.0]).unwrap();
        let rec = RepresentationRecord::new("a", vec![0.4, 2.0], logits.clone());
        let out = rectified_outputs(&rec, &h, &RectifyConfig::none()).unwrap();
        assert_eq!(out.features, rec.features);
        assert_eq!(out.logits, logits);
    }

    #[test]
    fn zero_features_give_bias() {
        let h = head();
        let rec = RepresentationRecord::new("z", vec![0.0, 0.0], vec![0.0; 3]);
        for mode in [RectifyMode::None, RectifyMode::React, RectifyMode::Vra] {
            let out = rectified_outputs(&rec, &h, &RectifyConfig::default().with_mode(mode)).unwrap();
            assert_eq!(out.logits, h.bias);
        }
    }

    #[test]
    fn react_logits_match_dense_matvec() {
        let h = head();
        let rec = RepresentationRecord::new("r", vec![0.05, 0.8], vec![0.0; 3]);
        let out = rectified_outputs(&rec, &h, &RectifyConfig::default()).unwrap();
        let clipped = [0.05, 0.1];
        for j in 0..3 {
            let expect = h.bias[j] + h.weights[0][j] * clipped[0] + h.weights[1][j] * clipped[1];
            assert!((out.logits[j] - expect).abs() < 1e-15);
        }
        let wrong = RepresentationRecord::new("w", vec![1.0], vec![0.0; 3]);
        assert!(rectified_outputs(&wrong, &h, &RectifyConfig::default()).is_err());
    }

    #[test]
    fn percentile_levels_order() {
        let rows: Vec<Vec<f64>> = (0..11).map(|i| vec![i as f64 / 10.0]).collect();
        let cfg = percentile_levels(rows.iter().map(Vec::as_slice), RectifyMode::Vra).unwrap();
        assert!((cfg.c - 0.9).abs() < 1e-12);
        assert!((cfg.alpha - 0.1).abs() < 1e-12);
        assert_eq!(cfg.beta, cfg.c);
    }

    proptest! {
        #[test]
        fn clips_are_idempotent(h in proptest::collection::vec(-2.0f64..2.0, 1..20), c in -1.0f64..1.0, a in 0.0f64..0.5, w in 0.01f64..1.0) {
            let once = react_clip(&h, c).unwrap();
            prop_assert!(once.iter().all(|&v| v <= c));
            prop_assert_eq!(react_clip(&once, c).unwrap(), once);
            let b = a + w;
            let v = vra_clip(&h, a, b).unwrap();
            prop_assert!(v.iter().all(|&x| x == 0.0 || (a..=b).contains(&x)));
            prop_assert_eq!(vra_clip(&v, a, b).unwrap(), v);
        }
    }
}
