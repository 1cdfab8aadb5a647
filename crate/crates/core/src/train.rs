//! Epsilon-prediction loss, one optimizer step, and the strided ancestral sampler.

use alloc::vec::Vec;

use crate::backbone::{ConditioningInputs, EpsModel};
use crate::error::{invalid, Result};
use crate::optim::AdamW;
use crate::rng::Rng;
use crate::schedule::{q_sample, NoiseSchedule};
use crate::tape::{Gradients, Tape, TapeReport};
use crate::tensor::Tensor;

/// A training batch. `x0` is `[B, C, H, W]` in `[-1, 1]`; `cond` (if any)
/// is in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x0: Tensor,
    pub labels: Vec<usize>,
    pub cond: Option<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// The timestep and noise drawn for one batch item.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemNoise {
    pub t: usize,
    pub eps: Vec<f32>,
}

/// Draws `(t, eps)` for every item, each from its own stream `rng.split(i)`.
pub fn draw_noise(rng: &Rng, batch: usize, per_item: usize, sched: &NoiseSchedule) -> Vec<ItemNoise> {
    (0..batch)
        .map(|i| {
            let mut r = rng.split(i as u64);
            let t = r.below(sched.steps() as u64) as usize;
            ItemNoise { t, eps: r.normal_vec(per_item) }
        })
        .collect()
}

/// MSE between predicted and true noise for explicit per-item draws.
pub fn diffusion_loss_with(
    model: &dyn EpsModel,
    tape: &mut Tape,
    batch: &Batch,
    sched: &NoiseSchedule,
    noise: &[ItemNoise],
) -> Result<Tensor> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    if noise.len() != batch.len() {
        return invalid("one noise draw per batch item required");
    }
    let eps: Vec<f32> = noise.iter().flat_map(|n| n.eps.iter().copied()).collect();
    let eps = Tensor::new(batch.x0.shape(), eps)?;
    let ts: Vec<usize> = noise.iter().map(|n| n.t).collect();
    let x_t = q_sample(&batch.x0, &ts, &eps, sched)?;
    let mut cond = ConditioningInputs::new(ts, batch.labels.clone());
    cond.cond_image = batch.cond.clone();
    let pred = model.predict(tape, &x_t, &cond)?;
    tape.mse(&pred, &eps)
}

/// Samples `t ~ U{0..T-1}` and `eps ~ N(0, I)` per item and returns the loss.
pub fn diffusion_loss(
    model: &dyn EpsModel,
    tape: &mut Tape,
    batch: &Batch,
    sched: &NoiseSchedule,
    rng: &Rng,
) -> Result<Tensor> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let per_item = batch.x0.len() / batch.len();
    let noise = draw_noise(rng, batch.len(), per_item, sched);
    diffusion_loss_with(model, tape, batch, sched, &noise)
}

#[derive(Clone, Debug)]
pub struct StepStats {
    pub loss: f32,
    pub grad_norm: f32,
    pub tape: TapeReport,
    pub grads: Gradients,
}

/// Forward, backward and one AdamW update on the trainable parameters.
pub fn train_step<M: EpsModel>(
    model: &mut M,
    opt: &mut AdamW,
    batch: &Batch,
    sched: &NoiseSchedule,
    rng: &Rng,
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let loss = diffusion_loss(model, &mut tape, batch, sched, rng)?;
    let grads = tape.backward(&loss, model.params())?;
    let report = tape.report();
    drop(tape);
    opt.step(model.params_mut(), &grads);
    Ok(StepStats {
        loss: loss.item(),
        grad_norm: grads.global_norm(),
        tape: report,
        grads,
    })
}

/// Strided ancestral DDPM sampling from pure noise over `num_steps` evenly
/// spaced timesteps. `cond.timesteps` is overwritten at every step; the
/// returned sample is in model space (roughly `[-1, 1]`), unclamped.
pub fn sample_loop(
    model: &dyn EpsModel,
    cond: &ConditioningInputs,
    shape: &[usize],
    sched: &NoiseSchedule,
    num_steps: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    let taus = sched.strided_timesteps(num_steps)?;
    if shape.first() != Some(&cond.batch()) {
        return invalid("sample shape batch differs from conditioning batch");
    }
    let n: usize = shape.iter().product();
    let mut x = rng.normal_vec(n);
    let mut cond = cond.clone();
    let mut tape = Tape::inference();
    for i in (0..taus.len()).rev() {
        let t = taus[i];
        let ab_t = sched.alpha_bars[t];
        let ab_prev = if i > 0 { sched.alpha_bars[taus[i - 1]] } else { 1.0 };
        let beta = 1.0 - ab_t / ab_prev;
        let alpha = 1.0 - beta;
        cond.timesteps = alloc::vec![t; cond.batch()];
        let eps = model.predict(&mut tape, &Tensor::new(shape, x.clone())?, &cond)?;
        let c_eps = (beta / libm::sqrt(1.0 - ab_t)) as f32;
        let inv_sqrt_alpha = (1.0 / libm::sqrt(alpha)) as f32;
        for (xv, e) in x.iter_mut().zip(eps.data()) {
            *xv = (*xv - c_eps * e) * inv_sqrt_alpha;
        }
        if i > 0 {
            let sigma = libm::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab_t)) as f32;
            for xv in x.iter_mut() {
                *xv += sigma * rng.normal();
            }
        }
    }
    Tensor::new(shape, x)
}

/// Maps model space `[-1, 1]` to image space `[0, 1]`, clamping.
pub fn to_unit(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Maps `[0, 1]` images to model space `[-1, 1]`.
pub fn to_model(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| 2.0 * v - 1.0).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}
