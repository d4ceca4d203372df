//! Forward noising process.

use serde::{Deserialize, Serialize};

use crate::numkit::{NumError, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self, NumError> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(NumError::Layout("betas must be non-empty and inside (0, 1)".into()));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    /// Betas evenly spaced from `lo` to `hi` over `t` steps.
    pub fn linear(t: usize, lo: f64, hi: f64) -> Result<Self, NumError> {
        let betas = if t == 1 {
            vec![lo]
        } else {
            (0..t).map(|i| lo + (hi - lo) * i as f64 / (t - 1) as f64).collect()
        };
        Self::from_betas(betas)
    }

    /// The 1000-step `1e-4 → 0.02` schedule compressed to `t` steps, so the
    /// final `ᾱ` still reaches near-pure noise.
    pub fn linear_rescaled(t: usize) -> Result<Self, NumError> {
        let k = 1000.0 / t as f64;
        Self::linear(t, 1e-4 * k, 0.02 * k)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check(&self, t: usize) -> Result<(), NumError> {
        if t >= self.len() {
            return Err(NumError::Layout(format!("timestep {t} outside 0..{}", self.len())));
        }
        Ok(())
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear_rescaled(50).expect("valid schedule")
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε` with a caller-supplied `ε`.
pub fn noise_with(
    schedule: &DiffusionSchedule,
    x0: &[f64],
    t: usize,
    eps: &[f64],
) -> Result<Vec<f64>, NumError> {
    schedule.check(t)?;
    Ok(mix(schedule.alpha_bar(t), x0, eps))
}

fn mix(alpha_bar: f64, x0: &[f64], eps: &[f64]) -> Vec<f64> {
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
}

/// Draws `ε ~ N(0, I)` and returns `(x_t, ε)`.
pub fn noise(
    schedule: &DiffusionSchedule,
    x0: &[f64],
    t: usize,
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<f64>), NumError> {
    schedule.check(t)?;
    let eps = rng.normals(x0.len());
    Ok((mix(schedule.alpha_bar(t), x0, &eps), eps))
}
