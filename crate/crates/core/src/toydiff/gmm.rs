//! Isotropic Gaussian mixtures and their diffused scores.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::metrics::logsumexp;

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Per-coordinate variance.
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmClass {
    pub prior: f64,
    pub components: Vec<Component>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub classes: Vec<GmmClass>,
}

impl GmmSpec {
    pub fn new(classes: Vec<GmmClass>) -> Result<Self> {
        let spec = Self { classes };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .classes
            .first()
            .and_then(|c| c.components.first())
            .ok_or_else(|| Error::InvalidArgument("mixture needs at least one class and component".into()))?;
        let d = first.mean.len();
        if d == 0 {
            return Err(Error::InvalidArgument("mixture dimension is zero".into()));
        }
        let prior_sum: f64 = self.classes.iter().map(|c| c.prior).sum();
        if (prior_sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!("class priors sum to {prior_sum}")));
        }
        for (k, class) in self.classes.iter().enumerate() {
            if !(class.prior > 0.0) || class.components.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "class {k} needs a positive prior and components"
                )));
            }
            let w: f64 = class.components.iter().map(|c| c.weight).sum();
            if (w - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::InvalidArgument(format!("class {k} weights sum to {w}")));
            }
            for comp in &class.components {
                if !(comp.weight > 0.0) || !(comp.variance > 0.0) || !comp.variance.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "class {k} has a non-positive weight or variance"
                    )));
                }
                if comp.mean.len() != d || comp.mean.iter().any(|v| !v.is_finite()) {
                    return Err(Error::DimensionMismatch(format!(
                        "class {k} mean is not a finite {d}-vector"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.classes[0].components[0].mean.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// One class holding `N(mean, variance·I)`.
    pub fn single_gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(vec![GmmClass {
            prior: 1.0,
            components: vec![Component {
                weight: 1.0,
                mean,
                variance,
            }],
        }])
    }

    /// Equal-prior classes on a ring. Class `k` sits at angle
    /// `offset_deg + 360·k / classes`; its components are spread by
    /// `±spread` along the tangent.
    pub fn ring(classes: usize, radius: f64, offset_deg: f64, spread: f64, variance: f64) -> Result<Self> {
        let classes = (0..classes)
            .map(|k| {
                let theta = (offset_deg + 360.0 * k as f64 / classes as f64).to_radians();
                let (s, c) = theta.sin_cos();
                let centre = [radius * c, radius * s];
                let tangent = [-s, c];
                let components = [-1.0, 1.0]
                    .iter()
                    .map(|sign| Component {
                        weight: 0.5,
                        mean: vec![
                            centre[0] + sign * spread * tangent[0],
                            centre[1] + sign * spread * tangent[1],
                        ],
                        variance,
                    })
                    .collect();
                GmmClass {
                    prior: 1.0 / classes as f64,
                    components,
                }
            })
            .collect();
        Self::new(classes)
    }

    /// Draws `(x, class)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let class = pick(rng, self.classes.iter().map(|c| c.prior));
        let comps = &self.classes[class].components;
        let comp = &comps[pick(rng, comps.iter().map(|c| c.weight))];
        let sd = comp.variance.sqrt();
        let x = comp
            .mean
            .iter()
            .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (x, class)
    }

    /// Same mixture with every mean rotated by `deg` in the first two
    /// coordinates and every variance multiplied by `variance_scale`.
    pub fn rotated(&self, deg: f64, variance_scale: f64) -> Result<Self> {
        if self.dim() < 2 {
            return Err(Error::InvalidArgument("rotation needs at least two dimensions".into()));
        }
        let (s, c) = deg.to_radians().sin_cos();
        let mut out = self.clone();
        for comp in out.classes.iter_mut().flat_map(|k| k.components.iter_mut()) {
            let (x, y) = (comp.mean[0], comp.mean[1]);
            comp.mean[0] = c * x - s * y;
            comp.mean[1] = s * x + c * y;
            comp.variance *= variance_scale;
        }
        out.validate()?;
        Ok(out)
    }
}

fn pick<R: Rng + ?Sized>(rng: &mut R, weights: impl Iterator<Item = f64> + Clone) -> usize {
    let total: f64 = weights.clone().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        if u < w {
            return i;
        }
        u -= w;
        last = i;
    }
    last
}

/// A component after diffusion to step `t`.
struct Diffused {
    log_weight: f64,
    mean: Vec<f64>,
    variance: f64,
}

fn diffused(spec: &GmmSpec, alpha_bar: f64, class: Option<usize>) -> Result<Vec<Diffused>> {
    let scale = alpha_bar.sqrt();
    let classes: Vec<(usize, &GmmClass)> = match class {
        Some(k) => {
            let c = spec.classes.get(k).ok_or_else(|| {
                Error::InvalidArgument(format!("class {k} out of range for {} classes", spec.num_classes()))
            })?;
            vec![(k, c)]
        }
        None => spec.classes.iter().enumerate().collect(),
    };
    Ok(classes
        .into_iter()
        .flat_map(|(_, c)| {
            let class_log = if class.is_some() { 0.0 } else { c.prior.ln() };
            c.components.iter().map(move |comp| Diffused {
                log_weight: class_log + comp.weight.ln(),
                mean: comp.mean.iter().map(|m| scale * m).collect(),
                variance: alpha_bar * comp.variance + 1.0 - alpha_bar,
            })
        })
        .collect())
}

fn log_normal(x: &[f64], mean: &[f64], variance: f64) -> f64 {
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * sq / variance - 0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI * variance).ln()
}

fn check_point(x: &[f64], spec: &GmmSpec) -> Result<()> {
    if x.len() != spec.dim() {
        return Err(Error::DimensionMismatch(format!(
            "point has {} coordinates, mixture {}",
            x.len(),
            spec.dim()
        )));
    }
    Ok(())
}

/// `log p_t(x)`, or `log p_t(x | class)` when a class is given.
pub fn log_density(
    x: &[f64],
    t: usize,
    spec: &GmmSpec,
    schedule: &DiffusionSchedule,
    class: Option<usize>,
) -> Result<f64> {
    check_point(x, spec)?;
    let comps = diffused(spec, schedule.alpha_bar(t)?, class)?;
    let terms: Vec<f64> = comps
        .iter()
        .map(|c| c.log_weight + log_normal(x, &c.mean, c.variance))
        .collect();
    Ok(logsumexp(&terms))
}

/// `∇_x log p_t(x)` (or of the class-conditional density).
pub fn gmm_score(
    x: &[f64],
    t: usize,
    spec: &GmmSpec,
    schedule: &DiffusionSchedule,
    class: Option<usize>,
) -> Result<Vec<f64>> {
    check_point(x, spec)?;
    let comps = diffused(spec, schedule.alpha_bar(t)?, class)?;
    let terms: Vec<f64> = comps
        .iter()
        .map(|c| c.log_weight + log_normal(x, &c.mean, c.variance))
        .collect();
    let norm = logsumexp(&terms);
    let mut score = vec![0.0; x.len()];
    for (c, term) in comps.iter().zip(&terms) {
        let r = (term - norm).exp();
        for (s, (xi, mi)) in score.iter_mut().zip(x.iter().zip(&c.mean)) {
            *s -= r * (xi - mi) / c.variance;
        }
    }
    Ok(score)
}

/// `log p_t(class | x)` for every class.
pub fn class_log_posterior(x: &[f64], t: usize, spec: &GmmSpec, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    let joint = (0..spec.num_classes())
        .map(|k| Ok(spec.classes[k].prior.ln() + log_density(x, t, spec, schedule, Some(k))?))
        .collect::<Result<Vec<f64>>>()?;
    let norm = logsumexp(&joint);
    Ok(joint.iter().map(|j| j - norm).collect())
}

/// `p_t(class | x)` for every class.
pub fn class_posterior(x: &[f64], t: usize, spec: &GmmSpec, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    Ok(class_log_posterior(x, t, spec, schedule)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// `∇_x log p_t(class | x) = ∇ log p_t(x | class) − ∇ log p_t(x)`.
pub fn class_log_posterior_grad(
    x: &[f64],
    t: usize,
    spec: &GmmSpec,
    schedule: &DiffusionSchedule,
    class: usize,
) -> Result<Vec<f64>> {
    let cond = gmm_score(x, t, spec, schedule, Some(class))?;
    let marg = gmm_score(x, t, spec, schedule, None)?;
    Ok(cond.iter().zip(&marg).map(|(a, b)| a - b).collect())
}
