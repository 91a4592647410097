//! DDIM schedule, deterministic stepping and inversion.
//!
//! All modules outside the backend speak in *step indices*: a latent at
//! `t_index = k` sits at the k-th scheduler timestep, with `k = 0` the clean
//! latent and `k = step_count` the starting noise. The mapping to the
//! backbone's 1000-entry training timestep table lives here.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Noise schedule of the training process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleId {
    /// `betas = linspace(sqrt(0.00085), sqrt(0.012), 1000)^2`, the SD-1.x schedule.
    #[default]
    ScaledLinear,
    /// `betas = linspace(0.0001, 0.02, 1000)`.
    Linear,
}

/// Sampler settings for one trajectory.
///
/// The defaults (50 steps, guidance 7.5) are conventional choices; the method
/// itself does not pin them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub step_count: usize,
    pub guidance_scale: f64,
    pub eta: f64,
    pub seed: u64,
    pub schedule_id: ScheduleId,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            step_count: 50,
            guidance_scale: 7.5,
            eta: 0.0,
            seed: 0,
            schedule_id: ScheduleId::ScaledLinear,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_count == 0 {
            return Err(Error::validation("step_count must be >= 1"));
        }
        if self.step_count > TRAIN_TIMESTEPS {
            return Err(Error::validation(format!(
                "step_count must be <= {TRAIN_TIMESTEPS}"
            )));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::validation("guidance_scale must be a finite value >= 0"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::validation("eta must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Settings must be deterministic for a trajectory that will be inverted.
    pub fn require_invertible(&self) -> Result<()> {
        self.validate()?;
        if self.eta != 0.0 {
            return Err(Error::validation(
                "eta must be 0 for trajectories that are inverted",
            ));
        }
        Ok(())
    }
}

pub const TRAIN_TIMESTEPS: usize = 1000;
const STEPS_OFFSET: usize = 1;

/// Cumulative alphas plus the step-index to timestep mapping for one step count.
#[derive(Debug, Clone)]
pub struct DdimSchedule {
    alphas_cumprod: Vec<f64>,
    final_alpha_cumprod: f64,
    step_ratio: usize,
    step_count: usize,
}

impl DdimSchedule {
    pub fn new(schedule: ScheduleId, step_count: usize) -> Result<Self> {
        if step_count == 0 || step_count > TRAIN_TIMESTEPS {
            return Err(Error::validation(format!(
                "step_count must lie in [1, {TRAIN_TIMESTEPS}], got {step_count}"
            )));
        }
        let n = TRAIN_TIMESTEPS;
        let betas: Vec<f64> = match schedule {
            ScheduleId::ScaledLinear => {
                let (lo, hi) = (0.00085f64.sqrt(), 0.012f64.sqrt());
                (0..n)
                    .map(|i| {
                        let b = lo + (hi - lo) * i as f64 / (n - 1) as f64;
                        b * b
                    })
                    .collect()
            }
            ScheduleId::Linear => (0..n)
                .map(|i| 0.0001 + (0.02 - 0.0001) * i as f64 / (n - 1) as f64)
                .collect(),
        };
        let mut alphas_cumprod = Vec::with_capacity(n);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_cumprod.push(acc);
        }
        let final_alpha_cumprod = alphas_cumprod[0];
        Ok(Self {
            alphas_cumprod,
            final_alpha_cumprod,
            step_ratio: TRAIN_TIMESTEPS / step_count,
            step_count,
        })
    }

    pub fn from_config(cfg: &SamplerConfig) -> Result<Self> {
        Self::new(cfg.schedule_id, cfg.step_count)
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// Training timestep fed to the backbone when denoising from `t_index`.
    pub fn timestep(&self, t_index: usize) -> usize {
        debug_assert!((1..=self.step_count).contains(&t_index));
        (t_index - 1) * self.step_ratio + STEPS_OFFSET
    }

    /// Cumulative alpha of the latent at `t_index`.
    pub fn alpha_cumprod(&self, t_index: usize) -> f64 {
        if t_index == 0 {
            self.final_alpha_cumprod
        } else {
            self.alphas_cumprod[self.timestep(t_index)]
        }
    }

    fn check_index(&self, t_index: usize) -> Result<()> {
        if t_index == 0 || t_index > self.step_count {
            return Err(Error::validation(format!(
                "t_index {t_index} outside [1, {}]",
                self.step_count
            )));
        }
        Ok(())
    }

    /// One DDIM update from `t_index` to `t_index - 1`.
    ///
    /// With `eta > 0` the caller supplies the standard-normal `noise` for this step.
    pub fn step(
        &self,
        eps: &Tensor,
        sample: &Tensor,
        t_index: usize,
        eta: f64,
        noise: Option<&Tensor>,
    ) -> Result<Tensor> {
        self.check_index(t_index)?;
        let a_t = self.alpha_cumprod(t_index);
        let a_prev = self.alpha_cumprod(t_index - 1);
        let pred_x0 = ((sample - (eps * (1.0 - a_t).sqrt())?)? * (1.0 / a_t.sqrt()))?;
        let sigma = if eta > 0.0 {
            eta * ((1.0 - a_prev) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_prev).sqrt()
        } else {
            0.0
        };
        let dir = (eps * (1.0 - a_prev - sigma * sigma).max(0.0).sqrt())?;
        let prev = ((pred_x0 * a_prev.sqrt())? + dir)?;
        match (sigma > 0.0, noise) {
            (false, _) => Ok(prev),
            (true, Some(noise)) => Ok((prev + (noise * sigma)?)?),
            (true, None) => Err(Error::validation("eta > 0 requires a noise tensor")),
        }
    }

    /// Inverse DDIM update from `t_index - 1` to `t_index`, with `eps` predicted
    /// at the lower-noise latent and the `t_index` timestep.
    pub fn invert_step(&self, eps: &Tensor, sample_prev: &Tensor, t_index: usize) -> Result<Tensor> {
        self.check_index(t_index)?;
        let a_t = self.alpha_cumprod(t_index);
        let a_prev = self.alpha_cumprod(t_index - 1);
        let pred_x0 = ((sample_prev - (eps * (1.0 - a_prev).sqrt())?)? * (1.0 / a_prev.sqrt()))?;
        let next = ((pred_x0 * a_t.sqrt())? + (eps * (1.0 - a_t).sqrt())?)?;
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn sd_schedule_endpoints() {
        let s = DdimSchedule::new(ScheduleId::ScaledLinear, 50).unwrap();
        assert_eq!(s.timestep(50), 981);
        assert_eq!(s.timestep(1), 1);
        assert!((s.alpha_cumprod(0) - (1.0 - 0.00085)).abs() < 1e-12);
        // monotone: more noise at higher index
        for k in 1..=50 {
            assert!(s.alpha_cumprod(k) < s.alpha_cumprod(k - 1));
        }
    }

    #[test]
    fn step_then_invert_is_identity_for_fixed_eps() {
        let dev = Device::Cpu;
        let s = DdimSchedule::new(ScheduleId::ScaledLinear, 10).unwrap();
        let x = Tensor::randn(0f32, 1.0, (1, 4, 3, 3), &dev).unwrap();
        let eps = Tensor::randn(0f32, 1.0, (1, 4, 3, 3), &dev).unwrap();
        let prev = s.step(&eps, &x, 7, 0.0, None).unwrap();
        let back = s.invert_step(&eps, &prev, 7).unwrap();
        let err: f32 = (back - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn rejects_zero_steps_and_bad_eta() {
        assert!(DdimSchedule::new(ScheduleId::Linear, 0).is_err());
        let cfg = SamplerConfig {
            eta: 0.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_ok());
        assert!(cfg.require_invertible().is_err());
    }
}
