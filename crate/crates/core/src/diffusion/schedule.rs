use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear β range. `scale_with_steps` multiplies both ends by `1000 / T`
/// so that short schedules still end close to pure noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub scale_with_steps: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 2e-2,
            scale_with_steps: true,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let scale = if self.scale_with_steps {
            1000.0 / self.steps.max(1) as f64
        } else {
            1.0
        };
        NoiseSchedule::linear(
            self.steps,
            (self.beta_start * scale).min(0.999),
            (self.beta_end * scale).min(0.999),
        )
    }
}

/// Per-step β, α = 1 − β and cumulative ᾱ, indexed by timestep `0..T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// Number of timesteps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_timestep(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::OutOfRange {
                what: "timestep",
                value: t as i64,
                valid: format!("[0, {})", self.steps()),
            });
        }
        Ok(())
    }

    /// Coefficients `(1/√α, β/(√α √(1−ᾱ)))` of the reverse step at
    /// timestep index `t`.
    pub fn reverse_coefficients(&self, t: usize) -> (f64, f64) {
        let a = self.alpha[t];
        let ab = self.alpha_bar[t];
        let inv = 1.0 / a.sqrt();
        (inv, inv * self.beta[t] / (1.0 - ab).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cumulative_product_is_consistent() {
        let s = ScheduleConfig::default().build().unwrap();
        let mut prod = 1.0;
        for t in 0..s.steps() {
            prod *= s.alpha()[t];
            assert!((s.alpha_bar()[t] - prod).abs() < 1e-12);
            assert_eq!(s.alpha()[t], 1.0 - s.beta()[t]);
            if t > 0 {
                assert!(s.alpha_bar()[t] < s.alpha_bar()[t - 1]);
            }
        }
    }

    #[test]
    fn scaled_schedule_ends_near_noise() {
        let s = ScheduleConfig::default().build().unwrap();
        assert!(s.alpha_bar()[s.steps() - 1] < 1e-3);
        let raw = ScheduleConfig {
            scale_with_steps: false,
            ..Default::default()
        }
        .build()
        .unwrap();
        assert!(raw.beta()[0] == 1e-4 && (raw.beta()[49] - 2e-2).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_betas() {
        assert!(NoiseSchedule::from_betas(vec![0.1, 1.0]).is_err());
        assert!(NoiseSchedule::from_betas(vec![]).is_err());
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
    }
}
