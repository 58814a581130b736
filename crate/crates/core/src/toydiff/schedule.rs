use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance schedule `β_1..β_T` with cumulative products
/// `ᾱ_t = Π_{s≤t} (1 − β_s)`. Step 0 is the clean data (`ᾱ_0 = 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        if beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidArgument("every beta must lie in (0, 1)".into()));
        }
        if beta.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument("betas must be non-decreasing".into()));
        }
        let mut acc = 1.0;
        let alpha_bar = beta
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { beta, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t, 1)?;
        Ok(self.beta[t - 1])
    }

    /// `ᾱ_t` for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t, 0)?;
        Ok(if t == 0 { 1.0 } else { self.alpha_bar[t - 1] })
    }

    fn check(&self, t: usize, lowest: usize) -> Result<()> {
        if t < lowest || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside {lowest}..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Linear `β` from `beta_start` to `beta_end` over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    let beta = (0..steps)
        .map(|i| match steps {
            1 => beta_start,
            _ => beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64,
        })
        .collect();
    DiffusionSchedule::from_betas(beta)
}

/// Linear schedule whose final `ᾱ_T` equals `alpha_bar_final`, so that
/// schedules of different lengths reach the same noise level.
pub fn linear_to_alpha_bar(steps: usize, beta_start: f64, alpha_bar_final: f64) -> Result<DiffusionSchedule> {
    if !(alpha_bar_final > 0.0 && alpha_bar_final < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target alpha_bar {alpha_bar_final} outside (0, 1)"
        )));
    }
    if steps == 1 {
        return make_schedule(1, 1.0 - alpha_bar_final, 1.0 - alpha_bar_final);
    }
    let final_for = |end: f64| make_schedule(steps, beta_start, end).map(|s| s.alpha_bar[steps - 1]);
    let (mut lo, mut hi) = (beta_start, 1.0 - 1e-12);
    if final_for(lo)? < alpha_bar_final || final_for(hi)? > alpha_bar_final {
        return Err(Error::InvalidArgument(format!(
            "alpha_bar {alpha_bar_final} is unreachable in {steps} steps from beta_start {beta_start}"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if final_for(mid)? > alpha_bar_final {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    make_schedule(steps, beta_start, 0.5 * (lo + hi))
}
