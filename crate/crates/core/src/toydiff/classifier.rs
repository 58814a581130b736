//! Radial-basis features with a softmax-regression head.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::detectors::DifferentiableClassifier;
use crate::error::{Error, Result};
use crate::metrics::{logsumexp, softmax};
use crate::repr::{ClassifierHead, Dims, RepresentationRecord};
use crate::rng::{SampleStream, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfFeatureMap {
    pub centers: Vec<Vec<f64>>,
    pub bandwidth: f64,
}

impl RbfFeatureMap {
    pub fn new(centers: Vec<Vec<f64>>, bandwidth: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::InvalidArgument("feature map needs at least one center".into()));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "bandwidth {bandwidth} must be positive"
            )));
        }
        let d = centers[0].len();
        if d == 0 || centers.iter().any(|c| c.len() != d) {
            return Err(Error::DimensionMismatch("centers differ in dimension".into()));
        }
        Ok(Self { centers, bandwidth })
    }

    pub fn input_dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// `φ_j(x) = exp(−‖x − c_j‖² / (2h²))`.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let denom = 2.0 * self.bandwidth * self.bandwidth;
        self.centers
            .iter()
            .map(|c| {
                let sq: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                (-sq / denom).exp()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub centers: usize,
    pub bandwidth: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            centers: 24,
            bandwidth: 2.0,
            steps: 400,
            learning_rate: 2.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyClassifier {
    pub feature_map: RbfFeatureMap,
    pub head: ClassifierHead,
}

impl ToyClassifier {
    pub fn new(feature_map: RbfFeatureMap, head: ClassifierHead) -> Result<Self> {
        if head.dims().features != feature_map.len() {
            return Err(Error::DimensionMismatch(format!(
                "head expects {} features, map has {} centers",
                head.dims().features,
                feature_map.len()
            )));
        }
        Ok(Self { feature_map, head })
    }

    pub fn dims(&self) -> Dims {
        self.head.dims()
    }

    pub fn embed(&self, id: &str, x: &[f64]) -> Result<RepresentationRecord> {
        if x.len() != self.feature_map.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "point has {} coordinates, classifier expects {}",
                x.len(),
                self.feature_map.input_dim()
            )));
        }
        let features = self.feature_map.features(x);
        let logits = self.head.logits(&features)?;
        Ok(RepresentationRecord::new(id, features, logits))
    }

    pub fn embed_batch(&self, points: &[(String, Vec<f64>)]) -> Result<Vec<RepresentationRecord>> {
        points.iter().map(|(id, x)| self.embed(id, x)).collect()
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let logits = self.embed("", x)?.logits;
        Ok(argmax(&logits))
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.embed("", x)?.logits)?.values().to_vec())
    }
}

/// Record with an empty id; see [`ToyClassifier::embed`].
pub fn embed(point: &[f64], clf: &ToyClassifier) -> Result<RepresentationRecord> {
    clf.embed("", point)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &x)| if x > best.1 { (i, x) } else { best },
        )
        .0
}

impl DifferentiableClassifier for ToyClassifier {
    fn input_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.embed("", x)?.logits)
    }

    /// `∂ℓ_k/∂x = Σ_j W_jk · φ_j(x) · (c_j − x) / h²`.
    fn logit_jacobian(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let phi = self.feature_map.features(x);
        let h2 = self.feature_map.bandwidth * self.feature_map.bandwidth;
        let classes = self.dims().classes;
        let mut jac = vec![vec![0.0; x.len()]; classes];
        for (j, center) in self.feature_map.centers.iter().enumerate() {
            for (k, row) in jac.iter_mut().enumerate() {
                let w = self.head.weights[j][k] * phi[j] / h2;
                for (r, (c, xi)) in row.iter_mut().zip(center.iter().zip(x)) {
                    *r += w * (c - xi);
                }
            }
        }
        Ok(jac)
    }
}

/// Mean cross-entropy of `head` on already-embedded features.
pub fn cross_entropy(head: &ClassifierHead, features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for (f, &y) in features.iter().zip(labels) {
        let logits = head.logits(f)?;
        total += logsumexp(&logits) - logits[y];
    }
    Ok(total / features.len() as f64)
}

/// Fits a multinomial logistic head by full-batch gradient descent from a
/// zero initialization. Centers are drawn without replacement from the
/// training points.
pub fn train_toy_classifier(
    points: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    cfg: &TrainConfig,
) -> Result<ToyClassifier> {
    if points.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} points vs {} labels",
            points.len(),
            labels.len()
        )));
    }
    if classes < 2 || (0..classes).any(|k| !labels.contains(&k)) {
        return Err(Error::InvalidArgument(format!(
            "training data must cover all {classes} classes"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range")));
    }
    if cfg.centers == 0 || cfg.centers > points.len() {
        return Err(Error::InvalidArgument(format!(
            "need 1..={} centers, got {}",
            points.len(),
            cfg.centers
        )));
    }
    let mut rng = SampleStream::new(cfg.seed, Split::Centers, 0).step(0);
    let mut picked = sample(&mut rng, points.len(), cfg.centers).into_vec();
    picked.sort_unstable();
    let centers = picked.iter().map(|&i| points[i].clone()).collect();
    let feature_map = RbfFeatureMap::new(centers, cfg.bandwidth)?;
    let features: Vec<Vec<f64>> = points.iter().map(|x| feature_map.features(x)).collect();

    let m = feature_map.len();
    let n = points.len() as f64;
    let mut head = ClassifierHead::zeros(Dims::new(m, classes));
    for step in 0..cfg.steps {
        let mut grad_w = vec![vec![0.0; classes]; m];
        let mut grad_b = vec![0.0; classes];
        for (f, &y) in features.iter().zip(labels) {
            let p = softmax(&head.logits(f)?)?;
            for k in 0..classes {
                let delta = p.values()[k] - if k == y { 1.0 } else { 0.0 };
                grad_b[k] += delta / n;
                for (g, fj) in grad_w.iter_mut().zip(f) {
                    g[k] += delta * fj / n;
                }
            }
        }
        for (w, g) in head.weights.iter_mut().zip(&grad_w) {
            for (wk, gk) in w.iter_mut().zip(g) {
                *wk -= cfg.learning_rate * gk;
            }
        }
        for (b, g) in head.bias.iter_mut().zip(&grad_b) {
            *b -= cfg.learning_rate * g;
        }
        if head.weights.iter().flatten().chain(&head.bias).any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "training diverged at step {step} with {cfg:?}"
            )));
        }
    }
    let loss = cross_entropy(&head, &features, labels)?;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("training loss is {loss} with {cfg:?}")));
    }
    ToyClassifier::new(feature_map, head)
}
