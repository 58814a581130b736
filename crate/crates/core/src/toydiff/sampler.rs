//! Forward noising and reverse denoising with the analytic score.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::gmm::{gmm_score, GmmSpec};
use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::rng::SampleStream;

/// Stream step reserved for the forward (noising) draw; reverse step `t`
/// uses stream step `t`.
const FORWARD_STEP: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Guidance {
    #[default]
    None,
    /// Adds `scale · ∇ log p_t(class | x)` to the score.
    Conditional { class: usize, scale: f64 },
}

pub trait ReverseSampler: Send + Sync {
    fn name(&self) -> &'static str;

    /// `x_{t-1}` given `x_t` and the (possibly guided) score at `t`.
    fn step(
        &self,
        x: &[f64],
        score: &[f64],
        t: usize,
        schedule: &DiffusionSchedule,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>>;
}

/// Denoised estimate `x̂_0 = (x_t + (1 − ᾱ_t)·score) / √ᾱ_t`.
pub fn predicted_x0(x: &[f64], score: &[f64], alpha_bar: f64) -> Vec<f64> {
    let root = alpha_bar.sqrt();
    x.iter()
        .zip(score)
        .map(|(xi, si)| (xi + (1.0 - alpha_bar) * si) / root)
        .collect()
}

/// Stochastic posterior step `q(x_{t-1} | x_t, x̂_0)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Ancestral;

impl ReverseSampler for Ancestral {
    fn name(&self) -> &'static str {
        "ancestral"
    }

    fn step(
        &self,
        x: &[f64],
        score: &[f64],
        t: usize,
        s: &DiffusionSchedule,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        let ab = s.alpha_bar(t)?;
        let ab_prev = s.alpha_bar(t - 1)?;
        let beta = s.beta(t)?;
        let x0 = predicted_x0(x, score, ab);
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sd = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
        Ok(x0
            .iter()
            .zip(x)
            .map(|(a, b)| {
                let z: f64 = rng.sample(StandardNormal);
                c0 * a + ct * b + sd * z
            })
            .collect())
    }
}

/// Deterministic implicit step (`η = 0`).
#[derive(Debug, Clone, Copy, Default)]
pub struct Ddim;

impl ReverseSampler for Ddim {
    fn name(&self) -> &'static str {
        "ddim"
    }

    fn step(&self, x: &[f64], score: &[f64], t: usize, s: &DiffusionSchedule, _: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let ab = s.alpha_bar(t)?;
        let ab_prev = s.alpha_bar(t - 1)?;
        let x0 = predicted_x0(x, score, ab);
        // ε̂ = −√(1 − ᾱ_t)·score
        let noise_scale = (1.0 - ab).sqrt();
        Ok(x0
            .iter()
            .zip(score)
            .map(|(a, sc)| ab_prev.sqrt() * a - (1.0 - ab_prev).sqrt() * noise_scale * sc)
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ancestral,
    #[default]
    Ddim,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 2] = [SamplerKind::Ancestral, SamplerKind::Ddim];

    pub fn build(self) -> Box<dyn ReverseSampler> {
        match self {
            SamplerKind::Ancestral => Box::new(Ancestral),
            SamplerKind::Ddim => Box::new(Ddim),
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.build().name())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.build().name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "sampler",
                name: s.to_string(),
                available: "ancestral, ddim".into(),
            })
    }
}

/// Draw from `N(√ᾱ_t·x0, (1 − ᾱ_t)·I)`.
pub fn forward_marginal_sample<R: Rng + ?Sized>(
    x0: &[f64],
    t: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::InvalidArgument("forward sampling needs t >= 1".into()));
    }
    let ab = schedule.alpha_bar(t)?;
    let (mean_scale, sd) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0
        .iter()
        .map(|x| mean_scale * x + sd * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// Noises `x_input` to `t_start`, then denoises back to step 0.
///
/// The forward draw uses stream step 0; reverse step `t` uses stream step
/// `t`, so DDIM output depends on the stream only through the forward draw.
pub fn reverse_sample(
    x_input: &[f64],
    spec: &GmmSpec,
    schedule: &DiffusionSchedule,
    sampler: &dyn ReverseSampler,
    guidance: Guidance,
    t_start: usize,
    stream: &SampleStream,
) -> Result<Vec<f64>> {
    if x_input.len() != spec.dim() {
        return Err(Error::DimensionMismatch(format!(
            "input has {} coordinates, mixture {}",
            x_input.len(),
            spec.dim()
        )));
    }
    if t_start > schedule.steps() {
        return Err(Error::InvalidArgument(format!(
            "t_start {t_start} exceeds T={}",
            schedule.steps()
        )));
    }
    if let Guidance::Conditional { class, scale } = guidance {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "guidance scale {scale} must be finite and >= 0"
            )));
        }
        if class >= spec.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "guidance class {class} out of range for {} classes",
                spec.num_classes()
            )));
        }
    }
    if t_start == 0 {
        return Ok(x_input.to_vec());
    }
    let mut x = forward_marginal_sample(x_input, t_start, schedule, &mut stream.step(FORWARD_STEP))?;
    for t in (1..=t_start).rev() {
        let mut score = gmm_score(&x, t, spec, schedule, None)?;
        if let Guidance::Conditional { class, scale } = guidance {
            if scale != 0.0 {
                let cond = gmm_score(&x, t, spec, schedule, Some(class))?;
                for (s, c) in score.iter_mut().zip(&cond) {
                    *s += scale * (c - *s);
                }
            }
        }
        x = sampler.step(&x, &score, t, schedule, &mut stream.step(t as u64))?;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("reverse sampling produced a non-finite point".into()));
    }
    Ok(x)
}
