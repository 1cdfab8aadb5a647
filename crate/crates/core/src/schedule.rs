use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// Diffusion coefficients for `T` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Linear betas from 1e-4 to 2e-2 inclusive; with one step the ramp collapses to its start.
pub fn build_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 1 {
        return invalid("schedule needs at least one step");
    }
    let ScheduleKind::Linear = kind;
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                BETA_START
            } else {
                BETA_START + (BETA_END - BETA_START) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `x_t = sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·eps` for one item.
    pub fn q_sample_item(&self, x0: &[f32], t: usize, eps: &[f32]) -> Result<Vec<f32>> {
        if t >= self.steps() {
            return invalid(alloc::format!("timestep {t} out of range for T={}", self.steps()));
        }
        if x0.len() != eps.len() {
            return crate::error::shape_err("q_sample", &[x0.len()], &[eps.len()]);
        }
        let a = libm::sqrt(self.alpha_bars[t]) as f32;
        let s = libm::sqrt(1.0 - self.alpha_bars[t]) as f32;
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
    }

    /// Timesteps visited by a `num_steps` strided sampler, ascending and evenly spaced over `[0, T)`.
    pub fn strided_timesteps(&self, num_steps: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if num_steps < 1 || num_steps > t {
            return invalid(alloc::format!("sampler steps must be in 1..={t}, got {num_steps}"));
        }
        if num_steps == 1 {
            return Ok(alloc::vec![t - 1]);
        }
        Ok((0..num_steps).map(|i| i * (t - 1) / (num_steps - 1)).collect())
    }
}

/// Noised version of a batch `x0 [B, ...]` with per-item timesteps.
pub fn q_sample(x0: &Tensor, timesteps: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return crate::error::shape_err("q_sample", x0.shape(), eps.shape());
    }
    let b = timesteps.len();
    if b == 0 || x0.len() % b != 0 || x0.shape().first() != Some(&b) {
        return crate::error::shape_err("q_sample", x0.shape(), &[b]);
    }
    let per = x0.len() / b;
    let mut out = Vec::with_capacity(x0.len());
    for (i, &t) in timesteps.iter().enumerate() {
        out.extend(sched.q_sample_item(&x0.data()[i * per..(i + 1) * per], t, &eps.data()[i * per..(i + 1) * per])?);
    }
    Tensor::new(x0.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_ramp() {
        let s = build_schedule(1, ScheduleKind::Linear).unwrap();
        assert_eq!(s.betas, [1e-4]);
        assert!((s.alpha_bars[0] - 0.9999).abs() < 1e-15);
        assert_eq!(s.alpha_bars[0], s.alphas[0]);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(build_schedule(0, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn default_schedule_is_monotone_and_bounded() {
        let s = build_schedule(1000, ScheduleKind::Linear).unwrap();
        assert_eq!(s.betas[0], 1e-4);
        assert!((s.betas[999] - 2e-2).abs() < 1e-15);
        assert!(s.betas.iter().all(|&b| b > 0.0 && b < 1.0));
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn zero_noise_scales_x0() {
        let s = build_schedule(1000, ScheduleKind::Linear).unwrap();
        let x0 = [0.5f32, -1.0, 0.25];
        let out = s.q_sample_item(&x0, 300, &[0.0; 3]).unwrap();
        let a = libm::sqrt(s.alpha_bars[300]) as f32;
        for (o, x) in out.iter().zip(x0) {
            assert_eq!(*o, a * x);
        }
        assert!(s.q_sample_item(&x0, 1000, &[0.0; 3]).is_err());
    }

    #[test]
    fn near_one_alpha_bar_returns_x0() {
        let s = build_schedule(1, ScheduleKind::Linear).unwrap();
        let out = s.q_sample_item(&[0.7], 0, &[0.0]).unwrap();
        assert!((out[0] - 0.7).abs() < 1e-4);
    }

    #[test]
    fn strided_timesteps_cover_range() {
        let s = build_schedule(1000, ScheduleKind::Linear).unwrap();
        let ts = s.strided_timesteps(24).unwrap();
        assert_eq!(ts.len(), 24);
        assert_eq!((ts[0], ts[23]), (0, 999));
        assert!(ts.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(s.strided_timesteps(1000).unwrap(), (0..1000).collect::<Vec<_>>());
        assert!(s.strided_timesteps(0).is_err());
        assert!(s.strided_timesteps(1001).is_err());
    }
}
